#pragma once

#include <span>
#include <utility>

#include "rt/core_math.hpp"

namespace rt {

enum class BiasKind { none, alibi, prev_token };

// Additive attention-logit bias. Exactly one kind is active.
//  - alibi:      -slope * (pos_q - pos_kv), clamped below at -max_bias
//  - prev_token: +strength iff pos_kv == pos_q - 1
struct BiasSpec {
  BiasKind kind = BiasKind::none;
  double slope = 1.0;     // alibi; acts as a multiplier on the per-head slope
  double strength = 0.0;  // prev_token
  double max_bias = 8.0;  // alibi clamp
};

double bias_value(const BiasSpec& b, index_t pos_q, index_t pos_kv);

// Geometric per-head alibi slope 2^(-8(h+1)/H) for head h in [0, H).
double alibi_head_slope(int head, int num_heads);

// Online-softmax running statistics for one query: running max logit m,
// normalizer l and unnormalized numerator o. Absorbing key/value tiles in any
// order and finalizing recovers exact softmax attention up to fp reordering.
struct SoftmaxAccumulator {
  double m;
  double l = 0.0;
  Vec o;

  explicit SoftmaxAccumulator(index_t dim);
  bool empty() const { return l == 0.0; }
};

// Exact single-pass reference: softmax over logits <k_i, q> + bias, applied
// to the values. Used as the oracle for every tiled path.
Vec attn_reference(std::span<const Vec> keys, std::span<const Vec> values, const Vec& q,
                   const BiasSpec& bias, index_t pos_q, std::span<const index_t> pos_kv);

// Absorb one tile into the accumulator: rescale (m, l, o) by exp(m - m_new)
// and add the tile contribution relative to the new maximum.
void acc_absorb_tile(SoftmaxAccumulator& acc, const Vec& q, std::span<const Vec> keys,
                     std::span<const Vec> values, const BiasSpec& bias, index_t pos_q,
                     std::span<const index_t> pos_kv);

SoftmaxAccumulator acc_update_tile(const SoftmaxAccumulator& acc, const Vec& q,
                                   std::span<const Vec> keys, std::span<const Vec> values,
                                   const BiasSpec& bias, index_t pos_q,
                                   std::span<const index_t> pos_kv);

// o / l. Throws if no tile was ever absorbed.
Vec acc_finalize(const SoftmaxAccumulator& acc);

namespace detail {

// Slice-view variants backing the multi-head layer paths: keys/values are
// full-width vectors, the query is a head slice, logits are taken over
// [off, off+width) of each key. An optional extra pair is appended after the
// span (the temporary pair of the recurrent layer).
Vec attn_slice_reference(std::span<const Vec> keys, std::span<const Vec> values,
                         std::span<const index_t> pos_kv, const Vec* extra_key,
                         const Vec* extra_value, index_t extra_pos, const Vec& q_head,
                         index_t off, const BiasSpec& bias, index_t pos_q);

void acc_absorb_slice(SoftmaxAccumulator& acc, const Vec& q_head, std::span<const Vec> keys,
                      std::span<const Vec> values, std::span<const index_t> pos_kv,
                      index_t off, const BiasSpec& bias, index_t pos_q);

}  // namespace detail

}  // namespace rt
