#include "rt/theory.hpp"

#include <cmath>
#include <stdexcept>

namespace rt {

namespace {

Mat block_sparse_map(index_t d_prime, const Mat& inner, index_t row_off, index_t col_off) {
  Mat m(3 * d_prime, 3 * d_prime);
  for (index_t r = 0; r < d_prime; ++r)
    for (index_t c = 0; c < d_prime; ++c) m.at(row_off + r, col_off + c) = inner.at(r, c);
  return m;
}

}  // namespace

LayerParams norm_free_layer_params(const NormFreeTransformerLayer& tf) {
  const index_t d = tf.q_proj.rows;
  LayerParams p;
  p.q_proj = tf.q_proj;
  p.k_proj = tf.k_proj;
  p.v_proj = tf.v_proj;
  p.out_proj = Mat::identity(d);
  p.mlp = tf.mlp;
  p.num_heads = 1;
  p.alpha_res = 1.0;
  p.norm_free = true;
  p.use_qk_norm = false;
  return p;
}

SimulatedStack build_simulator(const std::vector<NormFreeTransformerLayer>& tf_layers) {
  if (tf_layers.empty()) throw_shape_error("build_simulator: no layers");
  const index_t dp = tf_layers.front().q_proj.rows;
  for (const auto& l : tf_layers)
    if (l.q_proj.rows != dp || l.q_proj.cols != dp || l.k_proj.rows != dp ||
        l.k_proj.cols != dp || l.v_proj.rows != dp || l.v_proj.cols != dp ||
        l.mlp.dim() != dp)
      throw_shape_error("build_simulator: layers must share one width");

  SimulatedStack stack;
  stack.blocks.d_prime = dp;
  const SimBlocks blocks = stack.blocks;
  const index_t width = blocks.width();

  for (std::size_t li = 0; li < tf_layers.size(); ++li) {
    const NormFreeTransformerLayer& tf = tf_layers[li];
    const index_t read = blocks.read_off(static_cast<index_t>(li));
    const index_t out = blocks.out_off(static_cast<index_t>(li));
    const index_t scratch = blocks.scratch_off();

    LayerParams p;
    // Queries and keys land in the carry block so their inner products reduce
    // to the embedded d'-dimensional ones; values land in the scratch block.
    p.q_proj = block_sparse_map(dp, tf.q_proj, blocks.carry_off(), read);
    p.k_proj = block_sparse_map(dp, tf.k_proj, blocks.carry_off(), read);
    p.v_proj = block_sparse_map(dp, tf.v_proj, scratch, read);
    p.out_proj = Mat::identity(width);
    p.num_heads = 1;
    p.alpha_res = 1.0;
    p.norm_free = true;
    p.use_qk_norm = false;

    // Functional MLP over u = x + a with blocks (read: c, scratch: s, out: o):
    //   read block    -> 0                       (protected copy survives)
    //   scratch block -> -s                      (attention contribution cancelled)
    //   out block     -> (c + (s + M(c + s))) - o (baseline output, junk removed)
    // The association c + (s + M) matches the layer update so the simulated
    // output is reproduced bit-for-bit whenever the out block arrives at zero.
    MlpParams inner = tf.mlp;
    p.mlp_fn = [dp, read, out, scratch, inner](const Vec& u) {
      Vec result(u.size(), 0.0);
      Vec m_in(static_cast<std::size_t>(dp));
      for (index_t i = 0; i < dp; ++i)
        m_in[static_cast<std::size_t>(i)] = u[static_cast<std::size_t>(read + i)] +
                                            u[static_cast<std::size_t>(scratch + i)];
      const Vec m = mlp_apply(inner, m_in);
      for (index_t i = 0; i < dp; ++i) {
        const double c = u[static_cast<std::size_t>(read + i)];
        const double s = u[static_cast<std::size_t>(scratch + i)];
        result[static_cast<std::size_t>(scratch + i)] = -s;
        result[static_cast<std::size_t>(out + i)] =
            (c + (s + m[static_cast<std::size_t>(i)])) - u[static_cast<std::size_t>(out + i)];
      }
      return result;
    };

    stack.layers.push_back(std::move(p));
  }
  return stack;
}

std::vector<Vec> embed_simulator_input(const SimBlocks& blocks, const std::vector<Vec>& xs) {
  std::vector<Vec> wide;
  wide.reserve(xs.size());
  for (const Vec& x : xs) {
    if (static_cast<index_t>(x.size()) != blocks.d_prime)
      throw_shape_error("embed_simulator_input: input width mismatch");
    Vec w(static_cast<std::size_t>(blocks.width()), 0.0);
    for (index_t i = 0; i < blocks.d_prime; ++i)
      w[static_cast<std::size_t>(blocks.carry_off() + i)] = x[static_cast<std::size_t>(i)];
    wide.push_back(std::move(w));
  }
  return wide;
}

std::uint64_t factorial_u64(int k) {
  if (k < 0 || k > 20) throw std::logic_error("factorial_u64: k out of [0, 20]");
  std::uint64_t f = 1;
  for (int i = 2; i <= k; ++i) f *= static_cast<std::uint64_t>(i);
  return f;
}

std::uint64_t stirling_first_kind(int k, int r) {
  if (k < 0 || r < 0 || r > k || k > 20)
    throw std::logic_error("stirling_first_kind: need 0 <= r <= k <= 20");
  // [k r] = [k-1 r-1] + (k-1) [k-1 r]
  std::vector<std::uint64_t> prev(static_cast<std::size_t>(k) + 1, 0), cur;
  prev[0] = 1;  // [0 0] = 1
  for (int kk = 1; kk <= k; ++kk) {
    cur.assign(static_cast<std::size_t>(k) + 1, 0);
    for (int rr = 1; rr <= kk; ++rr)
      cur[static_cast<std::size_t>(rr)] =
          prev[static_cast<std::size_t>(rr - 1)] +
          static_cast<std::uint64_t>(kk - 1) * prev[static_cast<std::size_t>(rr)];
    prev = cur;
  }
  return prev[static_cast<std::size_t>(r)];
}

Mat stirling_jacobian_term(const SimplifiedLayerCfg& cfg, int k, int r) {
  const index_t d = cfg.v.rows;
  Mat vp = Mat::identity(d);
  for (int i = 0; i < r; ++i) vp = matmul(vp, cfg.v);
  const double coef = static_cast<double>(stirling_first_kind(k, r)) /
                      static_cast<double>(factorial_u64(k)) * std::pow(cfg.alpha, r);
  for (auto& x : vp.data) x *= coef;
  return vp;
}

Mat stirling_jacobian(const SimplifiedLayerCfg& cfg, int k) {
  if (k < 1) throw std::logic_error("stirling_jacobian: k must be >= 1");
  const index_t d = cfg.v.rows;
  Mat j(d, d);
  Mat vp = Mat::identity(d);
  const double kfact = static_cast<double>(factorial_u64(k));
  for (int r = 1; r <= k; ++r) {
    vp = matmul(vp, cfg.v);
    const double coef =
        static_cast<double>(stirling_first_kind(k, r)) / kfact * std::pow(cfg.alpha, r);
    for (std::size_t i = 0; i < j.data.size(); ++i) j.data[i] += coef * vp.data[i];
  }
  return j;
}

Mat recurrence_jacobian(const SimplifiedLayerCfg& cfg, int k) {
  if (k < 1 || k > cfg.n) throw std::logic_error("recurrence_jacobian: k out of range");
  const index_t d = cfg.v.rows;
  // T_1 = I + alpha V; for k >= 2, T_k = (alpha/k) V S_{k-1} with S the
  // running sum of tangents. x_k itself does not depend on x_1 for k >= 2.
  Mat t = Mat::identity(d);
  {
    Mat av = cfg.v;
    for (auto& x : av.data) x *= cfg.alpha;
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] += av.data[i];
  }
  Mat s = t;
  for (int kk = 2; kk <= k; ++kk) {
    t = matmul(cfg.v, s);
    const double c = cfg.alpha / static_cast<double>(kk);
    for (auto& x : t.data) x *= c;
    for (std::size_t i = 0; i < s.data.size(); ++i) s.data[i] += t.data[i];
  }
  return t;
}

double spectral_norm(const Mat& a, int iters) {
  Vec v(static_cast<std::size_t>(a.cols), 1.0);
  double norm = 0.0;
  for (int i = 0; i < iters; ++i) {
    Vec av = matvec(a, v);
    Vec atav = matvec_transposed(a, av);
    norm = std::sqrt(dot(atav, atav));
    if (norm == 0.0) return 0.0;
    for (auto& x : atav) x /= norm;
    v = std::move(atav);
  }
  Vec av = matvec(a, v);
  return std::sqrt(dot(av, av) / dot(v, v));
}

RnnEmulationReport rnn_emulation_check(const LayerParams& p, const std::vector<Vec>& xs,
                                       const std::vector<double>& bias_strengths) {
  if (p.num_heads != 1 || p.alpha_res != 1.0)
    throw std::logic_error("rnn_emulation_check: single head and unit residual scale required");
  RnnEmulationReport rep;
  for (double strength : bias_strengths) {
    LayerParams q = p;
    q.bias = BiasSpec{BiasKind::prev_token, 1.0, strength, 8.0};
    const LayerIO io = rt_forward_naive(q, xs);

    // Explicit recurrence, seeded with the layer's own first output.
    std::vector<Vec> oracle(xs.size());
    oracle[0] = io.z[0];
    double worst = 0.0;
    for (std::size_t i = 1; i < xs.size(); ++i) {
      const Vec prev = rms_norm(oracle[i - 1]);
      Vec inner(prev.size());
      for (std::size_t d = 0; d < prev.size(); ++d) inner[d] = xs[i][d] + prev[d];
      const Vec m = mlp_apply(q.mlp, rms_norm(inner));
      Vec z(prev.size());
      for (std::size_t d = 0; d < prev.size(); ++d) z[d] = prev[d] + xs[i][d] + m[d];
      oracle[i] = std::move(z);
      const double err = max_abs_diff(io.z[i], oracle[i]);
      const double scale = std::max(max_abs(oracle[i]), 1e-12);
      worst = std::max(worst, err / scale);
    }
    rep.points.push_back({strength, worst});
  }
  rep.monotone_decreasing = true;
  for (std::size_t i = 1; i < rep.points.size(); ++i)
    if (rep.points[i].max_rel_err >= rep.points[i - 1].max_rel_err)
      rep.monotone_decreasing = false;
  return rep;
}

}  // namespace rt
