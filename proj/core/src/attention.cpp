#include "rt/attention.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace rt {

double bias_value(const BiasSpec& b, index_t pos_q, index_t pos_kv) {
  switch (b.kind) {
    case BiasKind::none:
      return 0.0;
    case BiasKind::alibi: {
      const double raw = -b.slope * static_cast<double>(pos_q - pos_kv);
      return raw < -b.max_bias ? -b.max_bias : raw;
    }
    case BiasKind::prev_token:
      return pos_kv == pos_q - 1 ? b.strength : 0.0;
  }
  return 0.0;
}

double alibi_head_slope(int head, int num_heads) {
  return std::pow(2.0, -8.0 * static_cast<double>(head + 1) / static_cast<double>(num_heads));
}

SoftmaxAccumulator::SoftmaxAccumulator(index_t dim)
    : m(-std::numeric_limits<double>::infinity()), o(static_cast<std::size_t>(dim), 0.0) {}

namespace detail {

Vec attn_slice_reference(std::span<const Vec> keys, std::span<const Vec> values,
                         std::span<const index_t> pos_kv, const Vec* extra_key,
                         const Vec* extra_value, index_t extra_pos, const Vec& q_head,
                         index_t off, const BiasSpec& bias, index_t pos_q) {
  const std::size_t n = keys.size() + (extra_key ? 1 : 0);
  if (n == 0) throw std::logic_error("attention over an empty key/value list");
  const index_t width = static_cast<index_t>(q_head.size());

  std::vector<double> logits(n);
  for (std::size_t j = 0; j < keys.size(); ++j)
    logits[j] = dot_slice(keys[j], q_head, off) + bias_value(bias, pos_q, pos_kv[j]);
  if (extra_key)
    logits[n - 1] = dot_slice(*extra_key, q_head, off) + bias_value(bias, pos_q, extra_pos);

  double m = logits[0];
  for (std::size_t j = 1; j < n; ++j) m = std::max(m, logits[j]);

  Vec out(static_cast<std::size_t>(width), 0.0);
  double denom = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double w = std::exp(logits[j] - m);
    denom += w;
    const Vec& v = (extra_key && j == n - 1) ? *extra_value : values[j];
    for (index_t d = 0; d < width; ++d)
      out[static_cast<std::size_t>(d)] += w * v[static_cast<std::size_t>(off + d)];
  }
  for (auto& x : out) x /= denom;
  return out;
}

void acc_absorb_slice(SoftmaxAccumulator& acc, const Vec& q_head, std::span<const Vec> keys,
                      std::span<const Vec> values, std::span<const index_t> pos_kv,
                      index_t off, const BiasSpec& bias, index_t pos_q) {
  if (keys.empty()) throw std::logic_error("acc_absorb_slice: empty tile");
  if (keys.size() != values.size() || keys.size() != pos_kv.size())
    throw_shape_error("acc_absorb_slice: tile spans disagree");
  const index_t width = static_cast<index_t>(q_head.size());
  if (static_cast<index_t>(acc.o.size()) != width)
    throw_shape_error("acc_absorb_slice: accumulator width mismatch");

  std::vector<double> logits(keys.size());
  double tile_max = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < keys.size(); ++j) {
    logits[j] = dot_slice(keys[j], q_head, off) + bias_value(bias, pos_q, pos_kv[j]);
    tile_max = std::max(tile_max, logits[j]);
  }
  const double m_new = std::max(acc.m, tile_max);

  // Rescale old accumulators. exp(-inf) == 0 handles the fresh state.
  const double rescale = std::exp(acc.m - m_new);
  acc.l *= rescale;
  for (auto& x : acc.o) x *= rescale;

  for (std::size_t j = 0; j < keys.size(); ++j) {
    const double w = std::exp(logits[j] - m_new);
    acc.l += w;
    const Vec& v = values[j];
    for (index_t d = 0; d < width; ++d)
      acc.o[static_cast<std::size_t>(d)] += w * v[static_cast<std::size_t>(off + d)];
  }
  acc.m = m_new;
}

}  // namespace detail

Vec attn_reference(std::span<const Vec> keys, std::span<const Vec> values, const Vec& q,
                   const BiasSpec& bias, index_t pos_q, std::span<const index_t> pos_kv) {
  if (keys.empty()) throw std::logic_error("attn_reference: empty key/value list");
  if (keys.size() != values.size() || keys.size() != pos_kv.size())
    throw_shape_error("attn_reference: list sizes disagree");
  for (const Vec& k : keys)
    if (k.size() != q.size()) throw_shape_error("attn_reference: key dim mismatch");
  for (const Vec& v : values)
    if (v.size() != q.size()) throw_shape_error("attn_reference: value dim mismatch");
  return detail::attn_slice_reference(keys, values, pos_kv, nullptr, nullptr, -1, q, 0, bias,
                                      pos_q);
}

void acc_absorb_tile(SoftmaxAccumulator& acc, const Vec& q, std::span<const Vec> keys,
                     std::span<const Vec> values, const BiasSpec& bias, index_t pos_q,
                     std::span<const index_t> pos_kv) {
  for (const Vec& k : keys)
    if (k.size() != q.size()) throw_shape_error("acc_absorb_tile: key dim mismatch");
  detail::acc_absorb_slice(acc, q, keys, values, pos_kv, 0, bias, pos_q);
}

SoftmaxAccumulator acc_update_tile(const SoftmaxAccumulator& acc, const Vec& q,
                                   std::span<const Vec> keys, std::span<const Vec> values,
                                   const BiasSpec& bias, index_t pos_q,
                                   std::span<const index_t> pos_kv) {
  SoftmaxAccumulator next = acc;
  acc_absorb_tile(next, q, keys, values, bias, pos_q, pos_kv);
  return next;
}

Vec acc_finalize(const SoftmaxAccumulator& acc) {
  if (acc.l <= 0.0)
    throw std::logic_error("acc_finalize: accumulator was never updated (l == 0)");
  Vec out = acc.o;
  for (auto& x : out) x /= acc.l;
  return out;
}

}  // namespace rt
