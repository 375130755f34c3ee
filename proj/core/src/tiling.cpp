#include "rt/tiling.hpp"

#include <algorithm>
#include <stdexcept>

namespace rt {

index_t tile_size(index_t t) {
  if (t < 1) throw std::logic_error("tile_size: step index must be >= 1");
  return t & -t;
}

Schedule build_schedule(index_t n, index_t max_tile) {
  if (n < 1) throw std::logic_error("build_schedule: sequence length must be >= 1");
  Schedule s;
  s.n = n;
  s.events.reserve(static_cast<std::size_t>(2 * n));
  for (index_t t = 1; t <= n; ++t) {
    s.events.push_back({TileKind::temp_self, t, t, t, t});
    if (t == n) continue;
    const index_t p = tile_size(t);
    // Optional cap: subdivide the p x p step into cap-sized sub-tiles. The
    // covered rectangle is unchanged, so the schedule stays exact.
    const index_t step = (max_tile > 0 && max_tile < p) ? max_tile : p;
    for (index_t qlo = t + 1; qlo <= std::min(t + p, n); qlo += step) {
      const index_t qhi = std::min({qlo + step - 1, t + p, n});
      for (index_t klo = t - p + 1; klo <= t; klo += step) {
        const index_t khi = std::min(klo + step - 1, t);
        s.events.push_back({TileKind::persistent_tile, qlo, qhi, klo, khi});
      }
    }
  }
  return s;
}

ScheduleReport validate_schedule(const Schedule& s) {
  const index_t n = s.n;
  auto fail = [](index_t idx, std::string msg) {
    return ScheduleReport{false, std::move(msg), idx};
  };
  if (n < 1) return fail(-1, "schedule has non-positive length");

  // coverage[(i-1)*n + (j-1)] counts persistent deliveries of pair (q=i, kv=j).
  std::vector<std::uint8_t> coverage(static_cast<std::size_t>(n * n), 0);
  std::vector<std::uint8_t> temp_seen(static_cast<std::size_t>(n + 1), 0);
  // Number of persistent kv positions delivered to each query so far.
  std::vector<index_t> delivered(static_cast<std::size_t>(n + 1), 0);

  // z_j is computable once j's own attention is complete: its temp_self event
  // has run and all of 1..j-1 have been delivered to query j.
  auto output_ready = [&](index_t j) { return temp_seen[static_cast<std::size_t>(j)] && delivered[static_cast<std::size_t>(j)] == j - 1; };

  for (std::size_t idx = 0; idx < s.events.size(); ++idx) {
    const TileEvent& ev = s.events[idx];
    if (ev.u < 1 || ev.v > n || ev.s < 1 || ev.e > n || ev.u > ev.v || ev.s > ev.e)
      return fail(static_cast<index_t>(idx), "event range outside [1, n] or empty");
    if (ev.kind == TileKind::temp_self) {
      if (ev.u != ev.v || ev.s != ev.e || ev.u != ev.s)
        return fail(static_cast<index_t>(idx), "temp_self must have u == v == s == e");
      if (temp_seen[static_cast<std::size_t>(ev.u)])
        return fail(static_cast<index_t>(idx),
                    "temp_self repeated for position " + std::to_string(ev.u));
      temp_seen[static_cast<std::size_t>(ev.u)] = 1;
    } else {
      if (ev.e >= ev.u)
        return fail(static_cast<index_t>(idx),
                    "causality violated: kv range [" + std::to_string(ev.s) + "," +
                        std::to_string(ev.e) + "] overlaps query range starting at " +
                        std::to_string(ev.u));
      for (index_t j = ev.s; j <= ev.e; ++j)
        if (!output_ready(j))
          return fail(static_cast<index_t>(idx),
                      "kv position " + std::to_string(j) +
                          " used before its output is computable");
      for (index_t i = ev.u; i <= ev.v; ++i) {
        for (index_t j = ev.s; j <= ev.e; ++j) {
          auto& c = coverage[static_cast<std::size_t>((i - 1) * n + (j - 1))];
          if (c)
            return fail(static_cast<index_t>(idx),
                        "pair covered twice: query " + std::to_string(i) + ", kv " +
                            std::to_string(j));
          c = 1;
        }
        delivered[static_cast<std::size_t>(i)] += ev.e - ev.s + 1;
      }
    }
  }

  for (index_t i = 1; i <= n; ++i) {
    if (!temp_seen[static_cast<std::size_t>(i)])
      return fail(-1, "missing temp_self for position " + std::to_string(i));
    for (index_t j = 1; j < i; ++j)
      if (!coverage[static_cast<std::size_t>((i - 1) * n + (j - 1))])
        return fail(-1, "pair never covered: query " + std::to_string(i) + ", kv " +
                            std::to_string(j));
  }
  return {};
}

LayerIO rt_forward_tiled(const LayerParams& p, const std::vector<Vec>& xs, index_t max_tile) {
  detail::check_layer_shapes(p);
  if (xs.empty()) throw_shape_error("rt_forward_tiled: empty sequence");
  const index_t n = static_cast<index_t>(xs.size());
  const index_t hd = p.head_dim();
  const int heads = p.num_heads;

  LayerIO io;
  io.x = xs;
  io.q = detail::compute_queries(p, xs);
  io.a.resize(static_cast<std::size_t>(n));
  io.z.resize(static_cast<std::size_t>(n));

  std::vector<index_t> positions(static_cast<std::size_t>(n));
  for (index_t i = 0; i < n; ++i) positions[static_cast<std::size_t>(i)] = i;

  // One accumulator per (position, head).
  std::vector<std::vector<SoftmaxAccumulator>> acc;
  acc.reserve(static_cast<std::size_t>(n));
  for (index_t i = 0; i < n; ++i)
    acc.emplace_back(static_cast<std::size_t>(heads), SoftmaxAccumulator(hd));
  std::vector<std::uint8_t> finalized(static_cast<std::size_t>(n), 0);

  std::vector<Vec> q_heads(static_cast<std::size_t>(heads));
  auto head_slices = [&](index_t i) {
    const Vec& q = io.q[static_cast<std::size_t>(i)];
    for (int h = 0; h < heads; ++h)
      q_heads[static_cast<std::size_t>(h)] = Vec(q.begin() + h * hd, q.begin() + (h + 1) * hd);
  };

  const Schedule schedule = build_schedule(n, max_tile);
  for (const TileEvent& ev : schedule.events) {
    if (ev.kind == TileKind::temp_self) {
      const index_t t = ev.u - 1;
      if (finalized[static_cast<std::size_t>(t)])
        throw std::logic_error("rt_forward_tiled: position finalized twice");
      if (io.cache.filled() != t)
        throw std::logic_error("rt_forward_tiled: schedule finalizes a position whose "
                               "prefix is not fully delivered");

      Vec xn = detail::input_rms(p, xs[static_cast<std::size_t>(t)]);
      Vec k_temp = detail::project_qk(p, p.k_proj, xn, p.gain_k ? &*p.gain_k : nullptr);
      Vec v_temp = matvec(p.v_proj, xn);

      head_slices(t);
      Vec concat(static_cast<std::size_t>(p.dim()));
      for (int h = 0; h < heads; ++h) {
        auto& a_th = acc[static_cast<std::size_t>(t)][static_cast<std::size_t>(h)];
        detail::acc_absorb_slice(a_th, q_heads[static_cast<std::size_t>(h)],
                                 std::span<const Vec>(&k_temp, 1),
                                 std::span<const Vec>(&v_temp, 1),
                                 std::span<const index_t>(&t, 1), h * hd,
                                 head_bias(p.bias, h, heads), t);
        Vec out_h = acc_finalize(a_th);
        for (index_t i = 0; i < hd; ++i)
          concat[static_cast<std::size_t>(h * hd + i)] = out_h[static_cast<std::size_t>(i)];
      }
      finalized[static_cast<std::size_t>(t)] = 1;

      Vec a = matvec(p.out_proj, concat);
      Vec z = detail::finish_block(p, xs[static_cast<std::size_t>(t)], a, nullptr);

      Vec zn = p.norm_free ? z : rms_norm(z, p.gain_kv_in ? &*p.gain_kv_in : nullptr);
      io.cache.append(detail::project_qk(p, p.k_proj, zn, p.gain_k ? &*p.gain_k : nullptr),
                      matvec(p.v_proj, zn));

      io.a[static_cast<std::size_t>(t)] = std::move(a);
      io.z[static_cast<std::size_t>(t)] = std::move(z);
    } else {
      const index_t s0 = ev.s - 1;
      const index_t width = ev.e - ev.s + 1;
      if (ev.e > io.cache.filled())
        throw std::logic_error("rt_forward_tiled: tile reads an unrevealed persistent pair");
      std::span<const Vec> keys(io.cache.keys.data() + s0, static_cast<std::size_t>(width));
      std::span<const Vec> values(io.cache.values.data() + s0,
                                  static_cast<std::size_t>(width));
      std::span<const index_t> kv_pos(positions.data() + s0, static_cast<std::size_t>(width));
      for (index_t qi = ev.u - 1; qi <= ev.v - 1; ++qi) {
        if (finalized[static_cast<std::size_t>(qi)])
          throw std::logic_error("rt_forward_tiled: tile delivered after finalize");
        head_slices(qi);
        for (int h = 0; h < heads; ++h)
          detail::acc_absorb_slice(acc[static_cast<std::size_t>(qi)][static_cast<std::size_t>(h)],
                                   q_heads[static_cast<std::size_t>(h)], keys, values, kv_pos,
                                   h * hd, head_bias(p.bias, h, heads), qi);
      }
    }
  }
  return io;
}

}  // namespace rt
