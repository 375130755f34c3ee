#pragma once

#include <cstdint>
#include <vector>

#include "rt/layers.hpp"

namespace rt {

// ---- Width-3d' embedding of a norm-free baseline stack ---------------------
//
// Feature layout: three disjoint d'-wide blocks. At every layer one block
// carries a protected copy of the quantity the key/value/query projections
// read, one block receives the simulated layer output, and the third absorbs
// attention contributions and is cancelled back to zero by the functional
// MLP. Because the written block becomes the next layer's read block, the
// read/write roles alternate between the first two blocks across depth (the
// inter-layer block swap is absorbed into the next layer's parameters).
struct SimBlocks {
  index_t d_prime = 0;

  index_t width() const { return 3 * d_prime; }
  index_t carry_off() const { return 0; }
  index_t live_off() const { return d_prime; }
  index_t scratch_off() const { return 2 * d_prime; }

  // Block the given layer's Q/K/V read from (and preserve through the layer).
  index_t read_off(index_t layer) const { return layer % 2 == 0 ? carry_off() : live_off(); }
  // Block the simulated layer output is written to.
  index_t out_off(index_t layer) const { return layer % 2 == 0 ? live_off() : carry_off(); }
};

// One layer of the norm-free baseline being simulated.
struct NormFreeTransformerLayer {
  Mat q_proj, k_proj, v_proj;  // d' x d'
  MlpParams mlp;               // d' -> d'
};

struct SimulatedStack {
  SimBlocks blocks;
  std::vector<LayerParams> layers;  // width 3d', norm-free, single head
};

// Norm-free single-head layer parameters for running the baseline oracle.
LayerParams norm_free_layer_params(const NormFreeTransformerLayer& tf);

// Block-sparse parameters plus a functional MLP implementing the exact
// embedding: attention logits of the wide layer coincide with the baseline's
// and the out block tracks the baseline layer output.
SimulatedStack build_simulator(const std::vector<NormFreeTransformerLayer>& tf_layers);

// Initial wide input (x ; 0 ; 0) for the simulated stack.
std::vector<Vec> embed_simulator_input(const SimBlocks& blocks, const std::vector<Vec>& xs);

// ---- Closed-form input-output Jacobian of the uniform-attention layer ------
//
// Simplified single-layer recurrence z_k = x_k + (alpha/k) (V x_k + V sum_{j<k} z_j).
struct SimplifiedLayerCfg {
  double alpha = 0.5;
  Mat v;  // value matrix
  index_t n = 0;
};

// Unsigned Stirling numbers of the first kind: permutations of k elements
// with exactly r cycles. Requires 0 <= r <= k <= 20.
std::uint64_t stirling_first_kind(int k, int r);
std::uint64_t factorial_u64(int k);

// dz_k/dx_1 = (1/k!) sum_{r=1..k} [k r] alpha^r V^r.
Mat stirling_jacobian(const SimplifiedLayerCfg& cfg, int k);
// Single term of the sum (r-th path length).
Mat stirling_jacobian_term(const SimplifiedLayerCfg& cfg, int k, int r);
// Exact forward-mode differentiation of the linear recurrence itself.
Mat recurrence_jacobian(const SimplifiedLayerCfg& cfg, int k);

// Largest singular value by power iteration on A^T A.
double spectral_norm(const Mat& a, int iters = 200);

// ---- Previous-token concentration limit -------------------------------------
//
// With the value projection fixed to the identity and a previous-token bias of
// strength B, the recurrent layer approaches
//   z_i = RMS(z_{i-1}) + x_i + MLP[RMS(x_i + RMS(z_{i-1}))]
// as B grows. Runs the layer at each strength and reports the worst relative
// deviation from the explicit recurrence (position 1 excluded: it has no
// predecessor).
struct RnnEmulationPoint {
  double bias_strength = 0.0;
  double max_rel_err = 0.0;
};

struct RnnEmulationReport {
  std::vector<RnnEmulationPoint> points;
  bool monotone_decreasing = false;
};

RnnEmulationReport rnn_emulation_check(const LayerParams& p, const std::vector<Vec>& xs,
                                       const std::vector<double>& bias_strengths);

}  // namespace rt
