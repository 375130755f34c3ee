#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "rt/attention.hpp"
#include "rt/core_math.hpp"
#include "rt/rng.hpp"

namespace rt {

// All learnable tensors and structural configuration of one layer. Both the
// baseline causal layer and the recurrent layer share this parameter set; the
// recurrent layer reuses k_proj/v_proj for temporary and persistent pairs.
struct LayerParams {
  Mat q_proj, k_proj, v_proj;  // D x D
  Mat out_proj;                // D x D, identity-initializable
  MlpParams mlp;
  int num_heads = 1;
  double alpha_res = 1.0;  // residual scale on both branches, typically 1/sqrt(L)
  BiasSpec bias;

  bool use_qk_norm = true;
  // Disables every normalization (input RMS, query/key RMS, pre-MLP RMS and
  // the pre-projection RMS of persistent pairs). Used by the simulation and
  // stability checks, which are stated for the norm-free architecture.
  bool norm_free = false;
  // Multiplies queries after normalization; 1.0 reproduces raw <k, q> logits.
  double logit_scale = 1.0;

  // Optional learnable gains (absent means analysis mode: gain == 1).
  std::optional<Vec> gain_attn_in;  // RMS on x before q/k/v projections
  std::optional<Vec> gain_mlp_in;   // RMS on x + alpha*a before the MLP
  std::optional<Vec> gain_kv_in;    // RMS on z before persistent projections
  std::optional<Vec> gain_q, gain_k;

  // When set, replaces mlp_apply(mlp, .) in the forward pass. Lets the
  // simulation checks inject an exact functional MLP. Not differentiable.
  std::function<Vec(const Vec&)> mlp_fn;

  index_t dim() const { return q_proj.rows; }
  index_t head_dim() const { return dim() / num_heads; }
};

// Position-major store of persistent key/value vectors: outer index is the
// position. Entries are immutable once appended.
struct KVCache {
  std::vector<Vec> keys;
  std::vector<Vec> values;

  index_t filled() const { return static_cast<index_t>(keys.size()); }
  void append(Vec k, Vec v) {
    keys.push_back(std::move(k));
    values.push_back(std::move(v));
  }
};

// Forward activations of one layer over a sequence. For the recurrent layer
// the cache holds the persistent pairs; for the baseline layer it holds the
// ordinary per-position pairs. q stores the exact queries used by attention.
struct LayerIO {
  std::vector<Vec> x;
  std::vector<Vec> z;
  std::vector<Vec> a;  // attention-branch output (after out_proj, before residual scale)
  std::vector<Vec> q;
  KVCache cache;
};

// Test instrumentation: mutate the temporary pair right after projection.
struct ForwardHooks {
  std::function<void(index_t t, Vec& k_temp, Vec& v_temp)> mutate_temp_kv;
};

// Per-head bias: alibi slopes follow the geometric schedule scaled by the
// configured multiplier; other kinds are head-independent.
BiasSpec head_bias(const BiasSpec& base, int head, int num_heads);

// Baseline causal layer: keys/values at position i come from the layer input
// at i, attention runs over the prefix j <= i, and
//   y_i = x_i + alpha * (a_i + MLP[RMS(x_i + alpha * a_i)]).
std::vector<Vec> transformer_forward(const LayerParams& p, const std::vector<Vec>& xs);
// Same computation, returning activations (cache holds the input-derived pairs).
LayerIO transformer_forward_io(const LayerParams& p, const std::vector<Vec>& xs);

// Recurrent layer, sequential in position: position t attends over the
// persistent pairs 1..t-1 plus a temporary pair projected from x_t; the
// persistent pair at t is projected from the freshly computed output z_t.
LayerIO rt_forward_naive(const LayerParams& p, const std::vector<Vec>& xs,
                         const ForwardHooks& hooks = {});

// Reconstructs cache, attention outputs and queries from (x, z) without the
// sequential reveal: persistent pairs from z in one parallel pass, then every
// attention output independently. Matches the sequential forward bit-for-bit.
LayerIO rt_recompute_intermediates(const LayerParams& p, const std::vector<Vec>& xs,
                                   const std::vector<Vec>& zs);

struct LayerInit {
  double proj_std = -1.0;  // default 1/sqrt(D)
  bool orthonormal_v = false;
  bool learnable_gains = false;  // allocate all-ones gains
};

LayerParams make_layer_params(index_t d, int heads, index_t hidden, Rng& rng,
                              const LayerInit& init = {});
Mat random_orthonormal(index_t d, Rng& rng);

namespace detail {
// Queries exactly as both forward passes compute them (they depend only on
// the layer input): per-head RMS of q_proj * RMS(x), times logit_scale.
std::vector<Vec> compute_queries(const LayerParams& p, const std::vector<Vec>& xs);
Vec input_rms(const LayerParams& p, const Vec& x);
Vec project_qk(const LayerParams& p, const Mat& proj, const Vec& normed, const Vec* gain);
Vec finish_block(const LayerParams& p, const Vec& x, const Vec& a, Vec* u_out);
void check_layer_shapes(const LayerParams& p);
}  // namespace detail

}  // namespace rt
