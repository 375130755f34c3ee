#pragma once

#include <functional>
#include <string>

#include "rt/layers.hpp"

namespace rt {

// Upstream gradient on the layer outputs z.
struct SeedGrads {
  std::vector<Vec> d_z;
};

struct MlpGrads {
  Mat w_in;
  Vec b_in;
  Mat w_out;
  Vec b_out;
};

struct LayerParamGrads {
  Mat q_proj, k_proj, v_proj, out_proj;
  MlpGrads mlp;
  std::optional<Vec> gain_attn_in, gain_mlp_in, gain_kv_in, gain_q, gain_k;
};

struct LayerGrads {
  std::vector<Vec> d_x;
  LayerParamGrads params;
};

LayerParamGrads zero_param_grads(const LayerParams& p);

// Reverse-mode gradients of the recurrent layer. The reverse loop over
// positions only accumulates gradients with respect to the persistent
// key/value pairs (those gate the step to earlier positions); gradients with
// respect to x, queries, temporary pairs and all parameters are assembled in
// batched passes after the loop. io must come from rt_forward_naive(p, x) or
// rt_recompute_intermediates; the result is the exact transpose-Jacobian
// product of the forward map, independent of which schedule produced io.
LayerGrads rt_backward(const LayerParams& p, const LayerIO& io, const SeedGrads& seed);

// Reverse-mode gradients of the baseline layer (io from transformer_forward_io).
LayerGrads transformer_backward(const LayerParams& p, const LayerIO& io,
                                const SeedGrads& seed);

// Central differences column by column: J[:, j] = (f(x + h e_j) - f(x - h e_j)) / 2h.
Mat finite_diff_jacobian(const std::function<Vec(const Vec&)>& f, const Vec& x0, double h);

enum class LayerArch { recurrent, transformer };

// Central-difference directional derivative of <seed, z(x)> along u, evaluated
// through the extended-precision straight-line oracle (the same one gradcheck
// compares against).
double directional_derivative(const LayerParams& p, const std::vector<Vec>& xs,
                              const SeedGrads& seed, const std::vector<Vec>& u, double h,
                              LayerArch arch = LayerArch::recurrent);

struct GradcheckOpts {
  double tol = 1e-6;
  double h = 1e-5;
  LayerArch arch = LayerArch::recurrent;
};

struct GradcheckReport {
  bool pass = false;
  double max_rel_err = 0.0;
  std::string worst_coordinate;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

// Compares every coordinate of the analytic gradients (inputs and parameters)
// against central finite differences of the scalar loss <seed, z>.
GradcheckReport gradcheck(const LayerParams& p, const std::vector<Vec>& xs,
                          const SeedGrads& seed, const GradcheckOpts& opts = {});

// Same comparison against externally supplied gradients (used to verify that
// a corrupted gradient is detected and localized).
GradcheckReport gradcheck_against(const LayerParams& p, const std::vector<Vec>& xs,
                                  const SeedGrads& seed, const LayerGrads& grads,
                                  const GradcheckOpts& opts = {});

// RMS backward shared by the layer and model backward passes: forward is
// out = gain .* (x / sqrt(mean(x^2) + eps)).
Vec rms_backward(const Vec& x, const Vec& d_out, const Vec* gain);
void rms_gain_grad(const Vec& x, const Vec& d_out, Vec& d_gain);

// Flat traversal of the learnable tensors (fixed order, used by gradcheck and
// the optimizer).
void for_each_param_tensor(
    LayerParams& p,
    const std::function<void(const std::string&, double*, std::size_t)>& fn);
void for_each_param_tensor(
    const LayerParamGrads& g,
    const std::function<void(const std::string&, const double*, std::size_t)>& fn);
void for_each_param_tensor(
    LayerParamGrads& g,
    const std::function<void(const std::string&, double*, std::size_t)>& fn);

}  // namespace rt
