#pragma once

#include <vector>

#include "rt/layers.hpp"
#include "rt/rng.hpp"

namespace rt::testing {

inline std::vector<Vec> random_inputs(index_t n, index_t d, Rng& rng, double std = 1.0) {
  std::vector<Vec> xs;
  xs.reserve(static_cast<std::size_t>(n));
  for (index_t i = 0; i < n; ++i) xs.push_back(rng.normal_vec(d, std));
  return xs;
}

struct RandomLayerOpts {
  bool qk_norm = true;
  BiasKind bias = BiasKind::none;
  bool gains = false;
  index_t hidden = 0;  // default 4d
};

inline LayerParams random_layer(index_t d, int heads, Rng& rng,
                                const RandomLayerOpts& opts = {}) {
  LayerInit init;
  init.learnable_gains = opts.gains;
  LayerParams p =
      make_layer_params(d, heads, opts.hidden > 0 ? opts.hidden : 4 * d, rng, init);
  p.use_qk_norm = opts.qk_norm;
  if (opts.bias == BiasKind::alibi) p.bias = BiasSpec{BiasKind::alibi, 1.0, 0.0, 8.0};
  if (opts.bias == BiasKind::prev_token) p.bias = BiasSpec{BiasKind::prev_token, 1.0, 5.0, 8.0};
  return p;
}

inline LayerParams zero_weight_layer(index_t d, int heads, index_t hidden) {
  LayerParams p;
  p.q_proj = Mat(d, d);
  p.k_proj = Mat(d, d);
  p.v_proj = Mat(d, d);
  p.out_proj = Mat(d, d);
  p.mlp.w_in = Mat(hidden, d);
  p.mlp.b_in = Vec(static_cast<std::size_t>(hidden), 0.0);
  p.mlp.w_out = Mat(d, hidden);
  p.mlp.b_out = Vec(static_cast<std::size_t>(d), 0.0);
  p.num_heads = heads;
  return p;
}

inline double max_seq_diff(const std::vector<Vec>& a, const std::vector<Vec>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, max_abs_diff(a[i], b[i]));
  return m;
}

}  // namespace rt::testing
