#include "rt/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace rt {

BiasSpec head_bias(const BiasSpec& base, int head, int num_heads) {
  BiasSpec b = base;
  if (b.kind == BiasKind::alibi) b.slope = base.slope * alibi_head_slope(head, num_heads);
  return b;
}

namespace detail {

Vec input_rms(const LayerParams& p, const Vec& x) {
  if (p.norm_free) return x;
  return rms_norm(x, p.gain_attn_in ? &*p.gain_attn_in : nullptr);
}

Vec project_qk(const LayerParams& p, const Mat& proj, const Vec& normed, const Vec* gain) {
  Vec raw = matvec(proj, normed);
  if (!p.norm_free && p.use_qk_norm) {
    const index_t hd = p.head_dim();
    for (int h = 0; h < p.num_heads; ++h) rms_norm_slice_inplace(raw, h * hd, hd, gain);
  }
  return raw;
}

std::vector<Vec> compute_queries(const LayerParams& p, const std::vector<Vec>& xs) {
  std::vector<Vec> qs;
  qs.reserve(xs.size());
  for (const Vec& x : xs) {
    Vec q = project_qk(p, p.q_proj, input_rms(p, x), p.gain_q ? &*p.gain_q : nullptr);
    for (auto& c : q) c *= p.logit_scale;
    qs.push_back(std::move(q));
  }
  return qs;
}

// z = x + alpha*(a + MLP[RMS(u)]) with u = x + alpha*a. The same expression,
// evaluated in the same order, serves both layer variants so that degenerate
// cases (single position, zero weights) agree bit-for-bit.
Vec finish_block(const LayerParams& p, const Vec& x, const Vec& a, Vec* u_out) {
  const std::size_t d = x.size();
  Vec u(d);
  for (std::size_t i = 0; i < d; ++i) u[i] = x[i] + p.alpha_res * a[i];
  Vec mlp_in = p.norm_free ? u : rms_norm(u, p.gain_mlp_in ? &*p.gain_mlp_in : nullptr);
  Vec m = p.mlp_fn ? p.mlp_fn(mlp_in) : mlp_apply(p.mlp, mlp_in);
  if (m.size() != d) throw_shape_error("layer MLP must map back to the embedding dimension");
  Vec z(d);
  for (std::size_t i = 0; i < d; ++i) z[i] = x[i] + p.alpha_res * (a[i] + m[i]);
  if (u_out) *u_out = std::move(u);
  return z;
}

// Attention over cache[0, count) plus an optional extra pair, per head,
// concatenated and passed through out_proj.
Vec attend_position(const LayerParams& p, const KVCache& cache, index_t count,
                    std::span<const index_t> positions, const Vec* extra_key,
                    const Vec* extra_value, index_t extra_pos, const Vec& q, index_t pos_q) {
  const index_t hd = p.head_dim();
  Vec concat(static_cast<std::size_t>(p.dim()));
  for (int h = 0; h < p.num_heads; ++h) {
    const index_t off = h * hd;
    Vec q_head(q.begin() + off, q.begin() + off + hd);
    Vec out_h = detail::attn_slice_reference(
        std::span<const Vec>(cache.keys.data(), static_cast<std::size_t>(count)),
        std::span<const Vec>(cache.values.data(), static_cast<std::size_t>(count)),
        positions.subspan(0, static_cast<std::size_t>(count)), extra_key, extra_value,
        extra_pos, q_head, off, head_bias(p.bias, h, p.num_heads), pos_q);
    for (index_t i = 0; i < hd; ++i) concat[static_cast<std::size_t>(off + i)] = out_h[i];
  }
  return matvec(p.out_proj, concat);
}

void check_layer_shapes(const LayerParams& p) {
  const index_t d = p.dim();
  if (d <= 0) throw_shape_error("layer dimension must be positive");
  if (p.q_proj.cols != d || p.k_proj.rows != d || p.k_proj.cols != d || p.v_proj.rows != d ||
      p.v_proj.cols != d || p.out_proj.rows != d || p.out_proj.cols != d)
    throw_shape_error("projection matrices must all be DxD");
  if (p.num_heads < 1 || d % p.num_heads != 0)
    throw_shape_error("num_heads must divide the embedding dimension");
  if (!p.mlp_fn && p.mlp.dim() != d)
    throw_shape_error("MLP width inconsistent with the embedding dimension");
}

}  // namespace detail

std::vector<Vec> transformer_forward(const LayerParams& p, const std::vector<Vec>& xs) {
  return transformer_forward_io(p, xs).z;
}

LayerIO transformer_forward_io(const LayerParams& p, const std::vector<Vec>& xs) {
  detail::check_layer_shapes(p);
  if (xs.empty()) throw_shape_error("transformer_forward: empty sequence");
  const index_t n = static_cast<index_t>(xs.size());

  LayerIO io;
  io.x = xs;
  io.q = detail::compute_queries(p, xs);

  std::vector<index_t> positions(static_cast<std::size_t>(n));
  for (index_t i = 0; i < n; ++i) {
    positions[static_cast<std::size_t>(i)] = i;
    Vec xn = detail::input_rms(p, xs[static_cast<std::size_t>(i)]);
    io.cache.append(detail::project_qk(p, p.k_proj, xn, p.gain_k ? &*p.gain_k : nullptr),
                    matvec(p.v_proj, xn));
  }

  io.a.reserve(static_cast<std::size_t>(n));
  io.z.reserve(static_cast<std::size_t>(n));
  for (index_t i = 0; i < n; ++i) {
    Vec a = detail::attend_position(p, io.cache, i + 1, positions, nullptr, nullptr, -1,
                                    io.q[static_cast<std::size_t>(i)], i);
    io.z.push_back(detail::finish_block(p, xs[static_cast<std::size_t>(i)], a, nullptr));
    io.a.push_back(std::move(a));
  }
  return io;
}

LayerIO rt_forward_naive(const LayerParams& p, const std::vector<Vec>& xs,
                         const ForwardHooks& hooks) {
  detail::check_layer_shapes(p);
  if (xs.empty()) throw_shape_error("rt_forward_naive: empty sequence");
  const index_t n = static_cast<index_t>(xs.size());

  LayerIO io;
  io.x = xs;
  io.q = detail::compute_queries(p, xs);
  io.a.reserve(static_cast<std::size_t>(n));
  io.z.reserve(static_cast<std::size_t>(n));

  std::vector<index_t> positions(static_cast<std::size_t>(n));
  for (index_t i = 0; i < n; ++i) positions[static_cast<std::size_t>(i)] = i;

  for (index_t t = 0; t < n; ++t) {
    Vec xn = detail::input_rms(p, xs[static_cast<std::size_t>(t)]);
    Vec k_temp = detail::project_qk(p, p.k_proj, xn, p.gain_k ? &*p.gain_k : nullptr);
    Vec v_temp = matvec(p.v_proj, xn);
    if (hooks.mutate_temp_kv) hooks.mutate_temp_kv(t, k_temp, v_temp);

    Vec a = detail::attend_position(p, io.cache, t, positions, &k_temp, &v_temp, t,
                                    io.q[static_cast<std::size_t>(t)], t);
    Vec z = detail::finish_block(p, xs[static_cast<std::size_t>(t)], a, nullptr);

    // Persistent pair: projected from the freshly formed output.
    Vec zn = p.norm_free ? z : rms_norm(z, p.gain_kv_in ? &*p.gain_kv_in : nullptr);
    io.cache.append(detail::project_qk(p, p.k_proj, zn, p.gain_k ? &*p.gain_k : nullptr),
                    matvec(p.v_proj, zn));

    io.a.push_back(std::move(a));
    io.z.push_back(std::move(z));
  }
  return io;
}

LayerIO rt_recompute_intermediates(const LayerParams& p, const std::vector<Vec>& xs,
                                   const std::vector<Vec>& zs) {
  detail::check_layer_shapes(p);
  if (xs.size() != zs.size() || xs.empty())
    throw_shape_error("rt_recompute_intermediates: x/z length mismatch");
  const index_t n = static_cast<index_t>(xs.size());

  LayerIO io;
  io.x = xs;
  io.z = zs;
  io.q = detail::compute_queries(p, xs);

  // Persistent pairs directly from z; independent across positions.
  for (index_t t = 0; t < n; ++t) {
    Vec zn = p.norm_free ? zs[static_cast<std::size_t>(t)]
                         : rms_norm(zs[static_cast<std::size_t>(t)],
                                    p.gain_kv_in ? &*p.gain_kv_in : nullptr);
    io.cache.append(detail::project_qk(p, p.k_proj, zn, p.gain_k ? &*p.gain_k : nullptr),
                    matvec(p.v_proj, zn));
  }

  std::vector<index_t> positions(static_cast<std::size_t>(n));
  for (index_t i = 0; i < n; ++i) positions[static_cast<std::size_t>(i)] = i;

  // Attention outputs; also independent across positions given the cache.
  io.a.resize(static_cast<std::size_t>(n));
  for (index_t t = 0; t < n; ++t) {
    Vec xn = detail::input_rms(p, xs[static_cast<std::size_t>(t)]);
    Vec k_temp = detail::project_qk(p, p.k_proj, xn, p.gain_k ? &*p.gain_k : nullptr);
    Vec v_temp = matvec(p.v_proj, xn);
    io.a[static_cast<std::size_t>(t)] =
        detail::attend_position(p, io.cache, t, positions, &k_temp, &v_temp, t,
                                io.q[static_cast<std::size_t>(t)], t);
  }
  return io;
}

Mat random_orthonormal(index_t d, Rng& rng) {
  // Gram-Schmidt on a Gaussian matrix; retries on near-degenerate draws.
  Mat m(d, d);
  for (index_t r = 0; r < d; ++r) {
    Vec v;
    double norm = 0.0;
    for (int attempt = 0; attempt < 64; ++attempt) {
      v = rng.normal_vec(d);
      for (index_t j = 0; j < r; ++j) {
        double proj = 0.0;
        for (index_t c = 0; c < d; ++c) proj += m.at(j, c) * v[static_cast<std::size_t>(c)];
        for (index_t c = 0; c < d; ++c) v[static_cast<std::size_t>(c)] -= proj * m.at(j, c);
      }
      norm = std::sqrt(dot(v, v));
      if (norm > 1e-8) break;
    }
    for (index_t c = 0; c < d; ++c) m.at(r, c) = v[static_cast<std::size_t>(c)] / norm;
  }
  return m;
}

LayerParams make_layer_params(index_t d, int heads, index_t hidden, Rng& rng,
                              const LayerInit& init) {
  const double std = init.proj_std > 0.0 ? init.proj_std : 1.0 / std::sqrt(double(d));
  LayerParams p;
  p.q_proj = rng.normal_mat(d, d, std);
  p.k_proj = rng.normal_mat(d, d, std);
  p.v_proj = init.orthonormal_v ? random_orthonormal(d, rng) : rng.normal_mat(d, d, std);
  p.out_proj = rng.normal_mat(d, d, std);
  p.mlp.w_in = rng.normal_mat(hidden, d, std);
  p.mlp.b_in = Vec(static_cast<std::size_t>(hidden), 0.0);
  p.mlp.w_out = rng.normal_mat(d, hidden, 1.0 / std::sqrt(double(hidden)));
  p.mlp.b_out = Vec(static_cast<std::size_t>(d), 0.0);
  p.num_heads = heads;
  if (init.learnable_gains) {
    const Vec ones(static_cast<std::size_t>(d), 1.0);
    p.gain_attn_in = ones;
    p.gain_mlp_in = ones;
    p.gain_kv_in = ones;
    p.gain_q = ones;
    p.gain_k = ones;
  }
  return p;
}

}  // namespace rt
