#include "rt/autograd.hpp"

#include <cmath>
#include <stdexcept>

namespace rt {

namespace {

// Denominator of the guarded RMS at x.
double rms_denom(const Vec& x) {
  double ss = 0.0;
  for (double v : x) ss += v * v;
  return std::sqrt(ss / static_cast<double>(x.size()) + kRmsEpsilon);
}

Vec rms_normed_only(const Vec& x) {
  const double r = rms_denom(x);
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / r;
  return out;
}

// Slice RMS backward over x[off, off+len); d_out indexed absolutely.
void rms_slice_backward_into(const Vec& x, index_t off, index_t len, const Vec& d_out,
                             const Vec* gain, Vec& dx) {
  double ss = 0.0;
  for (index_t i = 0; i < len; ++i) {
    const double v = x[static_cast<std::size_t>(off + i)];
    ss += v * v;
  }
  const double r = std::sqrt(ss / static_cast<double>(len) + kRmsEpsilon);
  double inner = 0.0;  // <d_nrm, x>
  for (index_t i = 0; i < len; ++i) {
    const std::size_t idx = static_cast<std::size_t>(off + i);
    const double dn = gain ? d_out[idx] * (*gain)[idx] : d_out[idx];
    inner += dn * x[idx];
  }
  const double scale = inner / (static_cast<double>(len) * r * r * r);
  for (index_t i = 0; i < len; ++i) {
    const std::size_t idx = static_cast<std::size_t>(off + i);
    const double dn = gain ? d_out[idx] * (*gain)[idx] : d_out[idx];
    dx[idx] = dn / r - x[idx] * scale;
  }
}

struct LayerRefs {
  const LayerParams& p;
  const index_t d;
  const index_t hd;
  const int heads;

  explicit LayerRefs(const LayerParams& params)
      : p(params), d(params.dim()), hd(params.head_dim()), heads(params.num_heads) {}

  bool norms_on() const { return !p.norm_free; }
  bool qk_on() const { return !p.norm_free && p.use_qk_norm; }

  Vec input_rms(const Vec& x) const { return detail::input_rms(p, x); }

  // Backward through the optional per-head query/key RMS: raw is the
  // pre-normalization projection, d_post the gradient on the normalized
  // (and gained) result.
  Vec qk_backward(const Vec& raw, const Vec& d_post, const Vec* gain) const {
    if (!qk_on()) return d_post;
    Vec out(raw.size(), 0.0);
    for (int h = 0; h < heads; ++h)
      rms_slice_backward_into(raw, h * hd, hd, d_post, gain, out);
    return out;
  }

  void qk_gain_grad(const Vec& raw, const Vec& d_post, Vec& d_gain) const {
    for (int h = 0; h < heads; ++h) {
      double ss = 0.0;
      for (index_t i = 0; i < hd; ++i) {
        const double v = raw[static_cast<std::size_t>(h * hd + i)];
        ss += v * v;
      }
      const double r = std::sqrt(ss / static_cast<double>(hd) + kRmsEpsilon);
      for (index_t i = 0; i < hd; ++i) {
        const std::size_t idx = static_cast<std::size_t>(h * hd + i);
        d_gain[idx] += d_post[idx] * raw[idx] / r;
      }
    }
  }
};

struct MlpActivations {
  Vec mlp_in;   // RMS(u) (post-gain)
  Vec hidden;   // act(w_in * mlp_in + b_in)
  Vec pre;      // w_in * mlp_in + b_in
};

MlpActivations mlp_forward_acts(const LayerParams& p, const Vec& u) {
  MlpActivations acts;
  acts.mlp_in = p.norm_free ? u : rms_norm(u, p.gain_mlp_in ? &*p.gain_mlp_in : nullptr);
  acts.pre = matvec(p.mlp.w_in, acts.mlp_in);
  for (std::size_t i = 0; i < acts.pre.size(); ++i) acts.pre[i] += p.mlp.b_in[i];
  acts.hidden.resize(acts.pre.size());
  for (std::size_t i = 0; i < acts.pre.size(); ++i) acts.hidden[i] = gelu(acts.pre[i]);
  return acts;
}

// Softmax attention backward for one (position, head). Recomputes the exact
// forward weights from the stored keys/values, then distributes d_out over
// values (weight path) and logits (score path).
struct HeadAttnBwd {
  Vec d_q_head;                 // width hd, gradient on the (scaled) query slice
  Vec d_extra_k, d_extra_v;     // width D (slice non-zero), empty when no extra pair
  Vec out_head;                 // recomputed attention output slice
};

HeadAttnBwd attention_head_backward(const LayerRefs& L, const KVCache& cache, index_t count,
                                    const Vec* extra_k, const Vec* extra_v, index_t extra_pos,
                                    const Vec& q_full, index_t pos_q, int head,
                                    const Vec& d_out_full, std::vector<Vec>& d_cache_k,
                                    std::vector<Vec>& d_cache_v) {
  const index_t off = head * L.hd;
  const BiasSpec bias = head_bias(L.p.bias, head, L.heads);
  const std::size_t n = static_cast<std::size_t>(count) + (extra_k ? 1 : 0);

  std::vector<double> logits(n);
  for (index_t j = 0; j < count; ++j) {
    double acc = 0.0;
    for (index_t i = 0; i < L.hd; ++i)
      acc += cache.keys[static_cast<std::size_t>(j)][static_cast<std::size_t>(off + i)] *
             q_full[static_cast<std::size_t>(off + i)];
    logits[static_cast<std::size_t>(j)] = acc + bias_value(bias, pos_q, j);
  }
  if (extra_k) {
    double acc = 0.0;
    for (index_t i = 0; i < L.hd; ++i)
      acc += (*extra_k)[static_cast<std::size_t>(off + i)] *
             q_full[static_cast<std::size_t>(off + i)];
    logits[n - 1] = acc + bias_value(bias, pos_q, extra_pos);
  }

  double m = logits[0];
  for (std::size_t j = 1; j < n; ++j) m = std::max(m, logits[j]);
  std::vector<double> w(n);
  double denom = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    w[j] = std::exp(logits[j] - m);
    denom += w[j];
  }
  for (std::size_t j = 0; j < n; ++j) w[j] /= denom;

  auto value_at = [&](std::size_t j) -> const Vec& {
    return (extra_k && j == n - 1) ? *extra_v : cache.values[j];
  };

  HeadAttnBwd r;
  r.out_head.assign(static_cast<std::size_t>(L.hd), 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    const Vec& v = value_at(j);
    for (index_t i = 0; i < L.hd; ++i)
      r.out_head[static_cast<std::size_t>(i)] += w[j] * v[static_cast<std::size_t>(off + i)];
  }

  // d wrt per-pair weight, then softmax backward to logits.
  std::vector<double> dw(n), dlogit(n);
  double sum_wdw = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const Vec& v = value_at(j);
    double acc = 0.0;
    for (index_t i = 0; i < L.hd; ++i)
      acc += v[static_cast<std::size_t>(off + i)] * d_out_full[static_cast<std::size_t>(off + i)];
    dw[j] = acc;
    sum_wdw += w[j] * acc;
  }
  for (std::size_t j = 0; j < n; ++j) dlogit[j] = w[j] * (dw[j] - sum_wdw);

  r.d_q_head.assign(static_cast<std::size_t>(L.hd), 0.0);
  if (extra_k) {
    r.d_extra_k.assign(q_full.size(), 0.0);
    r.d_extra_v.assign(q_full.size(), 0.0);
  }
  for (std::size_t j = 0; j < n; ++j) {
    const bool is_extra = extra_k && j == n - 1;
    const Vec& k = is_extra ? *extra_k : cache.keys[j];
    Vec& dk = is_extra ? r.d_extra_k : d_cache_k[j];
    Vec& dv = is_extra ? r.d_extra_v : d_cache_v[j];
    for (index_t i = 0; i < L.hd; ++i) {
      const std::size_t idx = static_cast<std::size_t>(off + i);
      r.d_q_head[static_cast<std::size_t>(i)] += dlogit[j] * k[idx];
      dk[idx] += dlogit[j] * q_full[idx];
      dv[idx] += w[j] * d_out_full[idx];
    }
  }
  return r;
}

}  // namespace

Vec rms_backward(const Vec& x, const Vec& d_out, const Vec* gain) {
  Vec dx(x.size(), 0.0);
  rms_slice_backward_into(x, 0, static_cast<index_t>(x.size()), d_out, gain, dx);
  return dx;
}

void rms_gain_grad(const Vec& x, const Vec& d_out, Vec& d_gain) {
  const Vec nrm = rms_normed_only(x);
  for (std::size_t i = 0; i < x.size(); ++i) d_gain[i] += d_out[i] * nrm[i];
}

LayerParamGrads zero_param_grads(const LayerParams& p) {
  const index_t d = p.dim();
  LayerParamGrads g;
  g.q_proj = Mat(d, d);
  g.k_proj = Mat(d, d);
  g.v_proj = Mat(d, d);
  g.out_proj = Mat(d, d);
  g.mlp.w_in = Mat(p.mlp.w_in.rows, p.mlp.w_in.cols);
  g.mlp.b_in = Vec(p.mlp.b_in.size(), 0.0);
  g.mlp.w_out = Mat(p.mlp.w_out.rows, p.mlp.w_out.cols);
  g.mlp.b_out = Vec(p.mlp.b_out.size(), 0.0);
  auto zero_like = [](const std::optional<Vec>& src) {
    return src ? std::optional<Vec>(Vec(src->size(), 0.0)) : std::nullopt;
  };
  g.gain_attn_in = zero_like(p.gain_attn_in);
  g.gain_mlp_in = zero_like(p.gain_mlp_in);
  g.gain_kv_in = zero_like(p.gain_kv_in);
  g.gain_q = zero_like(p.gain_q);
  g.gain_k = zero_like(p.gain_k);
  return g;
}

LayerGrads rt_backward(const LayerParams& p, const LayerIO& io, const SeedGrads& seed) {
  if (p.mlp_fn)
    throw std::logic_error("rt_backward: functional MLP overrides are not differentiable");
  const LayerRefs L(p);
  const index_t n = static_cast<index_t>(io.x.size());
  if (seed.d_z.size() != io.x.size() || io.z.size() != io.x.size() ||
      io.cache.filled() != n)
    throw_shape_error("rt_backward: io/seed sizes disagree");

  const Vec* gq = p.gain_q ? &*p.gain_q : nullptr;
  const Vec* gk = p.gain_k ? &*p.gain_k : nullptr;

  LayerGrads grads;
  grads.params = zero_param_grads(p);
  grads.d_x.assign(static_cast<std::size_t>(n), Vec(static_cast<std::size_t>(L.d), 0.0));

  // Accumulators for the persistent pairs (post-normalization coordinates).
  std::vector<Vec> g_kp(static_cast<std::size_t>(n), Vec(static_cast<std::size_t>(L.d), 0.0));
  std::vector<Vec> g_vp(static_cast<std::size_t>(n), Vec(static_cast<std::size_t>(L.d), 0.0));

  // Per-position intermediates consumed by the batched passes.
  std::vector<Vec> g_z(seed.d_z);
  std::vector<Vec> d_u(static_cast<std::size_t>(n));
  std::vector<Vec> d_a(static_cast<std::size_t>(n));
  std::vector<Vec> d_attnc(static_cast<std::size_t>(n));
  std::vector<Vec> attnc(static_cast<std::size_t>(n));
  std::vector<Vec> d_q(static_cast<std::size_t>(n));
  std::vector<Vec> d_kt(static_cast<std::size_t>(n));
  std::vector<Vec> d_vt(static_cast<std::size_t>(n));
  std::vector<Vec> d_kpraw(static_cast<std::size_t>(n));
  std::vector<Vec> d_zn(static_cast<std::size_t>(n));
  std::vector<Vec> d_mn(static_cast<std::size_t>(n));
  std::vector<Vec> d_pre(static_cast<std::size_t>(n));
  std::vector<Vec> u_arr(static_cast<std::size_t>(n));

  // Reverse loop: only the persistent-pair gradients impose the sequential
  // order; everything stored here is folded into parameters afterwards.
  for (index_t t = n - 1; t >= 0; --t) {
    const std::size_t ts = static_cast<std::size_t>(t);

    // Fold the accumulated persistent-pair gradient into z_t.
    Vec zn = p.norm_free ? io.z[ts]
                         : rms_norm(io.z[ts], p.gain_kv_in ? &*p.gain_kv_in : nullptr);
    Vec kpraw = matvec(p.k_proj, zn);
    d_kpraw[ts] = L.qk_backward(kpraw, g_kp[ts], gk);
    Vec dzn = matvec_transposed(p.k_proj, d_kpraw[ts]);
    axpy(1.0, matvec_transposed(p.v_proj, g_vp[ts]), dzn);
    d_zn[ts] = dzn;
    if (!p.norm_free)
      axpy(1.0, rms_backward(io.z[ts], dzn, p.gain_kv_in ? &*p.gain_kv_in : nullptr),
           g_z[ts]);
    else
      axpy(1.0, dzn, g_z[ts]);

    if (!all_finite(g_z[ts]))
      throw std::runtime_error("rt_backward: non-finite gradient at position " +
                               std::to_string(t));

    // z_t = x_t + alpha * (a_t + m_t), u_t = x_t + alpha * a_t.
    Vec u(static_cast<std::size_t>(L.d));
    for (index_t i = 0; i < L.d; ++i)
      u[static_cast<std::size_t>(i)] =
          io.x[ts][static_cast<std::size_t>(i)] + p.alpha_res * io.a[ts][static_cast<std::size_t>(i)];
    const MlpActivations acts = mlp_forward_acts(p, u);

    Vec d_m(static_cast<std::size_t>(L.d));
    for (index_t i = 0; i < L.d; ++i)
      d_m[static_cast<std::size_t>(i)] = p.alpha_res * g_z[ts][static_cast<std::size_t>(i)];
    Vec d_hidden = matvec_transposed(p.mlp.w_out, d_m);
    Vec dpre(d_hidden.size());
    for (std::size_t i = 0; i < dpre.size(); ++i)
      dpre[i] = d_hidden[i] * gelu_derivative(acts.pre[i]);
    Vec dmn = matvec_transposed(p.mlp.w_in, dpre);
    d_pre[ts] = std::move(dpre);
    d_mn[ts] = dmn;
    d_u[ts] = p.norm_free
                  ? dmn
                  : rms_backward(u, dmn, p.gain_mlp_in ? &*p.gain_mlp_in : nullptr);
    u_arr[ts] = std::move(u);

    d_a[ts].resize(static_cast<std::size_t>(L.d));
    for (index_t i = 0; i < L.d; ++i)
      d_a[ts][static_cast<std::size_t>(i)] =
          p.alpha_res * (g_z[ts][static_cast<std::size_t>(i)] + d_u[ts][static_cast<std::size_t>(i)]);
    d_attnc[ts] = matvec_transposed(p.out_proj, d_a[ts]);

    // Attention backward: temporary pair recomputed from x_t, persistent
    // pairs read from the cache. Contributions to pairs j < t land in the
    // g_kp / g_vp accumulators.
    Vec xn = L.input_rms(io.x[ts]);
    Vec kt = detail::project_qk(p, p.k_proj, xn, gk);
    Vec vt = matvec(p.v_proj, xn);

    attnc[ts].assign(static_cast<std::size_t>(L.d), 0.0);
    d_q[ts].assign(static_cast<std::size_t>(L.d), 0.0);
    d_kt[ts].assign(static_cast<std::size_t>(L.d), 0.0);
    d_vt[ts].assign(static_cast<std::size_t>(L.d), 0.0);
    for (int h = 0; h < L.heads; ++h) {
      HeadAttnBwd hb = attention_head_backward(L, io.cache, t, &kt, &vt, t, io.q[ts], t, h,
                                               d_attnc[ts], g_kp, g_vp);
      const index_t off = h * L.hd;
      for (index_t i = 0; i < L.hd; ++i) {
        attnc[ts][static_cast<std::size_t>(off + i)] = hb.out_head[static_cast<std::size_t>(i)];
        d_q[ts][static_cast<std::size_t>(off + i)] = hb.d_q_head[static_cast<std::size_t>(i)];
      }
      axpy(1.0, hb.d_extra_k, d_kt[ts]);
      axpy(1.0, hb.d_extra_v, d_vt[ts]);
    }
  }

  // Batched passes: parameters, queries, temporary pairs and input gradients.
  for (index_t t = 0; t < n; ++t) {
    const std::size_t ts = static_cast<std::size_t>(t);
    Vec xn = L.input_rms(io.x[ts]);
    Vec qraw = matvec(p.q_proj, xn);
    Vec ktraw = matvec(p.k_proj, xn);

    // Residual paths.
    axpy(1.0, g_z[ts], grads.d_x[ts]);
    axpy(1.0, d_u[ts], grads.d_x[ts]);

    // out_proj and MLP parameters.
    add_outer(grads.params.out_proj, d_a[ts], attnc[ts]);
    Vec d_m(static_cast<std::size_t>(L.d));
    for (index_t i = 0; i < L.d; ++i)
      d_m[static_cast<std::size_t>(i)] = p.alpha_res * g_z[ts][static_cast<std::size_t>(i)];
    const MlpActivations acts = mlp_forward_acts(p, u_arr[ts]);
    add_outer(grads.params.mlp.w_out, d_m, acts.hidden);
    axpy(1.0, d_m, grads.params.mlp.b_out);
    add_outer(grads.params.mlp.w_in, d_pre[ts], acts.mlp_in);
    axpy(1.0, d_pre[ts], grads.params.mlp.b_in);
    if (grads.params.gain_mlp_in) rms_gain_grad(u_arr[ts], d_mn[ts], *grads.params.gain_mlp_in);

    // Query path (logit_scale sits between the normalized query and the logits).
    Vec d_qpost(static_cast<std::size_t>(L.d));
    for (index_t i = 0; i < L.d; ++i)
      d_qpost[static_cast<std::size_t>(i)] = p.logit_scale * d_q[ts][static_cast<std::size_t>(i)];
    Vec d_qraw = L.qk_backward(qraw, d_qpost, gq);
    if (grads.params.gain_q && L.qk_on()) L.qk_gain_grad(qraw, d_qpost, *grads.params.gain_q);
    add_outer(grads.params.q_proj, d_qraw, xn);
    Vec d_xn = matvec_transposed(p.q_proj, d_qraw);

    // Temporary pair paths.
    Vec d_ktraw = L.qk_backward(ktraw, d_kt[ts], gk);
    if (grads.params.gain_k && L.qk_on()) L.qk_gain_grad(ktraw, d_kt[ts], *grads.params.gain_k);
    add_outer(grads.params.k_proj, d_ktraw, xn);
    axpy(1.0, matvec_transposed(p.k_proj, d_ktraw), d_xn);
    add_outer(grads.params.v_proj, d_vt[ts], xn);
    axpy(1.0, matvec_transposed(p.v_proj, d_vt[ts]), d_xn);

    // Persistent pair parameter contributions (z-side).
    Vec zn = p.norm_free ? io.z[ts]
                         : rms_norm(io.z[ts], p.gain_kv_in ? &*p.gain_kv_in : nullptr);
    add_outer(grads.params.k_proj, d_kpraw[ts], zn);
    add_outer(grads.params.v_proj, g_vp[ts], zn);
    if (grads.params.gain_k && L.qk_on()) {
      Vec kpraw = matvec(p.k_proj, zn);
      L.qk_gain_grad(kpraw, g_kp[ts], *grads.params.gain_k);
    }
    if (grads.params.gain_kv_in) rms_gain_grad(io.z[ts], d_zn[ts], *grads.params.gain_kv_in);

    // Input RMS.
    if (p.norm_free) {
      axpy(1.0, d_xn, grads.d_x[ts]);
    } else {
      axpy(1.0,
           rms_backward(io.x[ts], d_xn, p.gain_attn_in ? &*p.gain_attn_in : nullptr),
           grads.d_x[ts]);
      if (grads.params.gain_attn_in)
        rms_gain_grad(io.x[ts], d_xn, *grads.params.gain_attn_in);
    }
  }
  return grads;
}

LayerGrads transformer_backward(const LayerParams& p, const LayerIO& io,
                                const SeedGrads& seed) {
  if (p.mlp_fn)
    throw std::logic_error("transformer_backward: functional MLP overrides are not "
                           "differentiable");
  const LayerRefs L(p);
  const index_t n = static_cast<index_t>(io.x.size());
  if (seed.d_z.size() != io.x.size() || io.cache.filled() != n)
    throw_shape_error("transformer_backward: io/seed sizes disagree");

  const Vec* gq = p.gain_q ? &*p.gain_q : nullptr;
  const Vec* gk = p.gain_k ? &*p.gain_k : nullptr;

  LayerGrads grads;
  grads.params = zero_param_grads(p);
  grads.d_x.assign(static_cast<std::size_t>(n), Vec(static_cast<std::size_t>(L.d), 0.0));

  std::vector<Vec> d_k(static_cast<std::size_t>(n), Vec(static_cast<std::size_t>(L.d), 0.0));
  std::vector<Vec> d_v(static_cast<std::size_t>(n), Vec(static_cast<std::size_t>(L.d), 0.0));
  std::vector<Vec> d_q(static_cast<std::size_t>(n));

  for (index_t t = n - 1; t >= 0; --t) {
    const std::size_t ts = static_cast<std::size_t>(t);
    const Vec& d_y = seed.d_z[ts];

    Vec u(static_cast<std::size_t>(L.d));
    for (index_t i = 0; i < L.d; ++i)
      u[static_cast<std::size_t>(i)] =
          io.x[ts][static_cast<std::size_t>(i)] + p.alpha_res * io.a[ts][static_cast<std::size_t>(i)];
    const MlpActivations acts = mlp_forward_acts(p, u);

    Vec d_m(static_cast<std::size_t>(L.d));
    for (index_t i = 0; i < L.d; ++i)
      d_m[static_cast<std::size_t>(i)] = p.alpha_res * d_y[static_cast<std::size_t>(i)];
    Vec d_hidden = matvec_transposed(p.mlp.w_out, d_m);
    Vec dpre(d_hidden.size());
    for (std::size_t i = 0; i < dpre.size(); ++i)
      dpre[i] = d_hidden[i] * gelu_derivative(acts.pre[i]);
    Vec dmn = matvec_transposed(p.mlp.w_in, dpre);
    Vec du = p.norm_free ? dmn
                         : rms_backward(u, dmn, p.gain_mlp_in ? &*p.gain_mlp_in : nullptr);

    Vec da(static_cast<std::size_t>(L.d));
    for (index_t i = 0; i < L.d; ++i)
      da[static_cast<std::size_t>(i)] =
          p.alpha_res * (d_y[static_cast<std::size_t>(i)] + du[static_cast<std::size_t>(i)]);
    Vec dattnc = matvec_transposed(p.out_proj, da);

    Vec attnc(static_cast<std::size_t>(L.d), 0.0);
    d_q[ts].assign(static_cast<std::size_t>(L.d), 0.0);
    for (int h = 0; h < L.heads; ++h) {
      HeadAttnBwd hb = attention_head_backward(L, io.cache, t + 1, nullptr, nullptr, -1,
                                               io.q[ts], t, h, dattnc, d_k, d_v);
      const index_t off = h * L.hd;
      for (index_t i = 0; i < L.hd; ++i) {
        attnc[static_cast<std::size_t>(off + i)] = hb.out_head[static_cast<std::size_t>(i)];
        d_q[ts][static_cast<std::size_t>(off + i)] = hb.d_q_head[static_cast<std::size_t>(i)];
      }
    }

    add_outer(grads.params.out_proj, da, attnc);
    add_outer(grads.params.mlp.w_out, d_m, acts.hidden);
    axpy(1.0, d_m, grads.params.mlp.b_out);
    add_outer(grads.params.mlp.w_in, dpre, acts.mlp_in);
    axpy(1.0, dpre, grads.params.mlp.b_in);
    if (grads.params.gain_mlp_in) rms_gain_grad(u, dmn, *grads.params.gain_mlp_in);

    axpy(1.0, d_y, grads.d_x[ts]);
    axpy(1.0, du, grads.d_x[ts]);
  }

  for (index_t t = 0; t < n; ++t) {
    const std::size_t ts = static_cast<std::size_t>(t);
    Vec xn = L.input_rms(io.x[ts]);
    Vec qraw = matvec(p.q_proj, xn);
    Vec kraw = matvec(p.k_proj, xn);

    Vec d_qpost(static_cast<std::size_t>(L.d));
    for (index_t i = 0; i < L.d; ++i)
      d_qpost[static_cast<std::size_t>(i)] = p.logit_scale * d_q[ts][static_cast<std::size_t>(i)];
    Vec d_qraw = L.qk_backward(qraw, d_qpost, gq);
    if (grads.params.gain_q && L.qk_on()) L.qk_gain_grad(qraw, d_qpost, *grads.params.gain_q);
    add_outer(grads.params.q_proj, d_qraw, xn);
    Vec d_xn = matvec_transposed(p.q_proj, d_qraw);

    Vec d_kraw = L.qk_backward(kraw, d_k[ts], gk);
    if (grads.params.gain_k && L.qk_on()) L.qk_gain_grad(kraw, d_k[ts], *grads.params.gain_k);
    add_outer(grads.params.k_proj, d_kraw, xn);
    axpy(1.0, matvec_transposed(p.k_proj, d_kraw), d_xn);
    add_outer(grads.params.v_proj, d_v[ts], xn);
    axpy(1.0, matvec_transposed(p.v_proj, d_v[ts]), d_xn);

    if (p.norm_free) {
      axpy(1.0, d_xn, grads.d_x[ts]);
    } else {
      axpy(1.0,
           rms_backward(io.x[ts], d_xn, p.gain_attn_in ? &*p.gain_attn_in : nullptr),
           grads.d_x[ts]);
      if (grads.params.gain_attn_in)
        rms_gain_grad(io.x[ts], d_xn, *grads.params.gain_attn_in);
    }
  }
  return grads;
}

Mat finite_diff_jacobian(const std::function<Vec(const Vec&)>& f, const Vec& x0, double h) {
  if (h <= 0.0) throw std::logic_error("finite_diff_jacobian: h must be positive");
  Vec x = x0;
  const Vec f0 = f(x0);
  Mat j(static_cast<index_t>(f0.size()), static_cast<index_t>(x0.size()));
  for (std::size_t c = 0; c < x0.size(); ++c) {
    x[c] = x0[c] + h;
    const Vec fp = f(x);
    x[c] = x0[c] - h;
    const Vec fm = f(x);
    x[c] = x0[c];
    for (std::size_t r = 0; r < f0.size(); ++r)
      j.at(static_cast<index_t>(r), static_cast<index_t>(c)) = (fp[r] - fm[r]) / (2.0 * h);
  }
  return j;
}

void for_each_param_tensor(
    LayerParams& p,
    const std::function<void(const std::string&, double*, std::size_t)>& fn) {
  fn("q_proj", p.q_proj.data.data(), p.q_proj.data.size());
  fn("k_proj", p.k_proj.data.data(), p.k_proj.data.size());
  fn("v_proj", p.v_proj.data.data(), p.v_proj.data.size());
  fn("out_proj", p.out_proj.data.data(), p.out_proj.data.size());
  fn("mlp.w_in", p.mlp.w_in.data.data(), p.mlp.w_in.data.size());
  fn("mlp.b_in", p.mlp.b_in.data(), p.mlp.b_in.size());
  fn("mlp.w_out", p.mlp.w_out.data.data(), p.mlp.w_out.data.size());
  fn("mlp.b_out", p.mlp.b_out.data(), p.mlp.b_out.size());
  if (p.gain_attn_in) fn("gain_attn_in", p.gain_attn_in->data(), p.gain_attn_in->size());
  if (p.gain_mlp_in) fn("gain_mlp_in", p.gain_mlp_in->data(), p.gain_mlp_in->size());
  if (p.gain_kv_in) fn("gain_kv_in", p.gain_kv_in->data(), p.gain_kv_in->size());
  if (p.gain_q) fn("gain_q", p.gain_q->data(), p.gain_q->size());
  if (p.gain_k) fn("gain_k", p.gain_k->data(), p.gain_k->size());
}

void for_each_param_tensor(
    const LayerParamGrads& g,
    const std::function<void(const std::string&, const double*, std::size_t)>& fn) {
  fn("q_proj", g.q_proj.data.data(), g.q_proj.data.size());
  fn("k_proj", g.k_proj.data.data(), g.k_proj.data.size());
  fn("v_proj", g.v_proj.data.data(), g.v_proj.data.size());
  fn("out_proj", g.out_proj.data.data(), g.out_proj.data.size());
  fn("mlp.w_in", g.mlp.w_in.data.data(), g.mlp.w_in.data.size());
  fn("mlp.b_in", g.mlp.b_in.data(), g.mlp.b_in.size());
  fn("mlp.w_out", g.mlp.w_out.data.data(), g.mlp.w_out.data.size());
  fn("mlp.b_out", g.mlp.b_out.data(), g.mlp.b_out.size());
  if (g.gain_attn_in) fn("gain_attn_in", g.gain_attn_in->data(), g.gain_attn_in->size());
  if (g.gain_mlp_in) fn("gain_mlp_in", g.gain_mlp_in->data(), g.gain_mlp_in->size());
  if (g.gain_kv_in) fn("gain_kv_in", g.gain_kv_in->data(), g.gain_kv_in->size());
  if (g.gain_q) fn("gain_q", g.gain_q->data(), g.gain_q->size());
  if (g.gain_k) fn("gain_k", g.gain_k->data(), g.gain_k->size());
}

void for_each_param_tensor(
    LayerParamGrads& g,
    const std::function<void(const std::string&, double*, std::size_t)>& fn) {
  const LayerParamGrads& cg = g;
  for_each_param_tensor(cg, [&](const std::string& name, const double* ptr, std::size_t sz) {
    fn(name, const_cast<double*>(ptr), sz);
  });
}

namespace {

// ---- Extended-precision finite-difference oracle ----------------------------
//
// The FD loss difference at h = 1e-5 carries roundoff of order ulp(loss)/h in
// double, which exceeds a 1e-6 relative tolerance at coordinates whose true
// gradient happens to be tiny. The quotient is therefore evaluated through an
// independent straight-line reimplementation of the layer in long double:
// same map, same epsilon guard, measurement noise pushed well below the
// tolerance. This path shares no code with the double-precision forward it
// checks.
using ldbl = long double;
using LdVec = std::vector<ldbl>;

struct LdLayer {
  index_t d = 0, hidden = 0;
  int heads = 1;
  ldbl alpha = 1.0L, logit_scale = 1.0L;
  bool qk_norm = true, norm_free = false;
  BiasSpec bias;
  LdVec q_proj, k_proj, v_proj, out_proj, w_in, b_in, w_out, b_out;
  LdVec gain_attn, gain_mlp, gain_kv, gain_q, gain_k;  // empty when absent
  std::vector<LdVec> xs;
};

LdVec to_ld(const std::vector<double>& v) { return LdVec(v.begin(), v.end()); }

LdLayer make_ld_layer(const LayerParams& p, const std::vector<Vec>& xs) {
  LdLayer L;
  L.d = p.dim();
  L.hidden = p.mlp.hidden();
  L.heads = p.num_heads;
  L.alpha = p.alpha_res;
  L.logit_scale = p.logit_scale;
  L.qk_norm = p.use_qk_norm;
  L.norm_free = p.norm_free;
  L.bias = p.bias;
  L.q_proj = to_ld(p.q_proj.data);
  L.k_proj = to_ld(p.k_proj.data);
  L.v_proj = to_ld(p.v_proj.data);
  L.out_proj = to_ld(p.out_proj.data);
  L.w_in = to_ld(p.mlp.w_in.data);
  L.b_in = to_ld(p.mlp.b_in);
  L.w_out = to_ld(p.mlp.w_out.data);
  L.b_out = to_ld(p.mlp.b_out);
  if (p.gain_attn_in) L.gain_attn = to_ld(*p.gain_attn_in);
  if (p.gain_mlp_in) L.gain_mlp = to_ld(*p.gain_mlp_in);
  if (p.gain_kv_in) L.gain_kv = to_ld(*p.gain_kv_in);
  if (p.gain_q) L.gain_q = to_ld(*p.gain_q);
  if (p.gain_k) L.gain_k = to_ld(*p.gain_k);
  for (const Vec& x : xs) L.xs.push_back(to_ld(x));
  return L;
}

LdVec ld_matvec(const LdVec& m, index_t rows, index_t cols, const LdVec& v) {
  LdVec out(static_cast<std::size_t>(rows), 0.0L);
  for (index_t r = 0; r < rows; ++r) {
    ldbl acc = 0.0L;
    for (index_t c = 0; c < cols; ++c)
      acc += m[static_cast<std::size_t>(r * cols + c)] * v[static_cast<std::size_t>(c)];
    out[static_cast<std::size_t>(r)] = acc;
  }
  return out;
}

LdVec ld_rms(const LdVec& v, const LdVec& gain) {
  ldbl ss = 0.0L;
  for (ldbl x : v) ss += x * x;
  const ldbl r = std::sqrt(ss / static_cast<ldbl>(v.size()) + static_cast<ldbl>(kRmsEpsilon));
  LdVec out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = v[i] / r;
    if (!gain.empty()) out[i] *= gain[i];
  }
  return out;
}

void ld_qk_slices(const LdLayer& L, LdVec& v, const LdVec& gain) {
  if (L.norm_free || !L.qk_norm) return;
  const index_t hd = L.d / L.heads;
  for (int h = 0; h < L.heads; ++h) {
    ldbl ss = 0.0L;
    for (index_t i = 0; i < hd; ++i) {
      const ldbl x = v[static_cast<std::size_t>(h * hd + i)];
      ss += x * x;
    }
    const ldbl r = std::sqrt(ss / static_cast<ldbl>(hd) + static_cast<ldbl>(kRmsEpsilon));
    for (index_t i = 0; i < hd; ++i) {
      const std::size_t idx = static_cast<std::size_t>(h * hd + i);
      v[idx] /= r;
      if (!gain.empty()) v[idx] *= gain[idx];
    }
  }
}

LdVec ld_input_norm(const LdLayer& L, const LdVec& x) {
  return L.norm_free ? x : ld_rms(x, L.gain_attn);
}

LdVec ld_mlp(const LdLayer& L, const LdVec& v) {
  LdVec h = ld_matvec(L.w_in, L.hidden, L.d, v);
  for (std::size_t i = 0; i < h.size(); ++i) {
    const ldbl x = h[i] + L.b_in[i];
    const ldbl inner = 0.7978845608028654L * (x + 0.044715L * x * x * x);
    h[i] = 0.5L * x * (1.0L + std::tanh(inner));
  }
  LdVec out = ld_matvec(L.w_out, L.d, L.hidden, h);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += L.b_out[i];
  return out;
}

// Attention over keys/values [0, count) plus an optional extra pair.
LdVec ld_attend(const LdLayer& L, const std::vector<LdVec>& keys,
                const std::vector<LdVec>& values, index_t count, const LdVec* extra_k,
                const LdVec* extra_v, index_t extra_pos, const LdVec& q, index_t pos_q) {
  const index_t hd = L.d / L.heads;
  LdVec concat(static_cast<std::size_t>(L.d), 0.0L);
  const std::size_t n = static_cast<std::size_t>(count) + (extra_k ? 1 : 0);
  std::vector<ldbl> logits(n);
  for (int h = 0; h < L.heads; ++h) {
    const index_t off = h * hd;
    const BiasSpec hb = head_bias(L.bias, h, L.heads);
    for (std::size_t j = 0; j < n; ++j) {
      const LdVec& k = (extra_k && j == n - 1) ? *extra_k : keys[j];
      ldbl acc = 0.0L;
      for (index_t i = 0; i < hd; ++i)
        acc += k[static_cast<std::size_t>(off + i)] * q[static_cast<std::size_t>(off + i)];
      const index_t kv_pos = (extra_k && j == n - 1) ? extra_pos : static_cast<index_t>(j);
      logits[j] = acc + static_cast<ldbl>(bias_value(hb, pos_q, kv_pos));
    }
    ldbl m = logits[0];
    for (std::size_t j = 1; j < n; ++j) m = std::max(m, logits[j]);
    ldbl denom = 0.0L;
    for (std::size_t j = 0; j < n; ++j) {
      const ldbl w = std::exp(logits[j] - m);
      denom += w;
      const LdVec& v = (extra_k && j == n - 1) ? *extra_v : values[j];
      for (index_t i = 0; i < hd; ++i)
        concat[static_cast<std::size_t>(off + i)] += w * v[static_cast<std::size_t>(off + i)];
    }
    for (index_t i = 0; i < hd; ++i) concat[static_cast<std::size_t>(off + i)] /= denom;
  }
  return ld_matvec(L.out_proj, L.d, L.d, concat);
}

LdVec ld_finish(const LdLayer& L, const LdVec& x, const LdVec& a) {
  LdVec u(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) u[i] = x[i] + L.alpha * a[i];
  const LdVec m = ld_mlp(L, L.norm_free ? u : ld_rms(u, L.gain_mlp));
  LdVec z(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) z[i] = x[i] + L.alpha * (a[i] + m[i]);
  return z;
}

ldbl ld_loss(const LdLayer& L, const SeedGrads& seed, LayerArch arch) {
  const index_t n = static_cast<index_t>(L.xs.size());
  std::vector<LdVec> qs(static_cast<std::size_t>(n));
  for (index_t i = 0; i < n; ++i) {
    LdVec q = ld_matvec(L.q_proj, L.d, L.d, ld_input_norm(L, L.xs[static_cast<std::size_t>(i)]));
    ld_qk_slices(L, q, L.gain_q);
    for (ldbl& c : q) c *= L.logit_scale;
    qs[static_cast<std::size_t>(i)] = std::move(q);
  }

  ldbl loss = 0.0L;
  std::vector<LdVec> keys, values;
  if (arch == LayerArch::transformer) {
    for (index_t i = 0; i < n; ++i) {
      const LdVec xn = ld_input_norm(L, L.xs[static_cast<std::size_t>(i)]);
      LdVec k = ld_matvec(L.k_proj, L.d, L.d, xn);
      ld_qk_slices(L, k, L.gain_k);
      keys.push_back(std::move(k));
      values.push_back(ld_matvec(L.v_proj, L.d, L.d, xn));
    }
    for (index_t i = 0; i < n; ++i) {
      const LdVec a = ld_attend(L, keys, values, i + 1, nullptr, nullptr, -1,
                                qs[static_cast<std::size_t>(i)], i);
      const LdVec z = ld_finish(L, L.xs[static_cast<std::size_t>(i)], a);
      for (std::size_t c = 0; c < z.size(); ++c)
        loss += static_cast<ldbl>(seed.d_z[static_cast<std::size_t>(i)][c]) * z[c];
    }
  } else {
    for (index_t t = 0; t < n; ++t) {
      const LdVec xn = ld_input_norm(L, L.xs[static_cast<std::size_t>(t)]);
      LdVec kt = ld_matvec(L.k_proj, L.d, L.d, xn);
      ld_qk_slices(L, kt, L.gain_k);
      const LdVec vt = ld_matvec(L.v_proj, L.d, L.d, xn);
      const LdVec a =
          ld_attend(L, keys, values, t, &kt, &vt, t, qs[static_cast<std::size_t>(t)], t);
      const LdVec z = ld_finish(L, L.xs[static_cast<std::size_t>(t)], a);
      const LdVec zn = L.norm_free ? z : ld_rms(z, L.gain_kv);
      LdVec kp = ld_matvec(L.k_proj, L.d, L.d, zn);
      ld_qk_slices(L, kp, L.gain_k);
      keys.push_back(std::move(kp));
      values.push_back(ld_matvec(L.v_proj, L.d, L.d, zn));
      for (std::size_t c = 0; c < z.size(); ++c)
        loss += static_cast<ldbl>(seed.d_z[static_cast<std::size_t>(t)][c]) * z[c];
    }
  }
  return loss;
}

GradcheckReport run_gradcheck(const LayerParams& p_in, const std::vector<Vec>& xs,
                              const SeedGrads& seed, const LayerGrads& grads,
                              const GradcheckOpts& opts) {
  LdLayer L = make_ld_layer(p_in, xs);
  const ldbl h = static_cast<ldbl>(opts.h);

  GradcheckReport rep;
  auto consider = [&](const std::string& name, double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    const double rel = std::abs(analytic - numeric) / denom;
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_coordinate = name;
      rep.analytic_at_worst = analytic;
      rep.numeric_at_worst = numeric;
    }
  };
  auto central = [&](ldbl* coord) {
    const ldbl keep = *coord;
    *coord = keep + h;
    const ldbl lp = ld_loss(L, seed, opts.arch);
    *coord = keep - h;
    const ldbl lm = ld_loss(L, seed, opts.arch);
    *coord = keep;
    return static_cast<double>((lp - lm) / (2.0L * h));
  };

  for (std::size_t t = 0; t < xs.size(); ++t)
    for (std::size_t i = 0; i < xs[t].size(); ++i)
      consider("x[" + std::to_string(t) + "][" + std::to_string(i) + "]",
               grads.d_x[t][i], central(&L.xs[t][i]));

  // Parameter coordinates, walked in the canonical tensor order.
  std::vector<std::pair<std::string, std::pair<LdVec*, std::size_t>>> tensors = {
      {"q_proj", {&L.q_proj, L.q_proj.size()}},
      {"k_proj", {&L.k_proj, L.k_proj.size()}},
      {"v_proj", {&L.v_proj, L.v_proj.size()}},
      {"out_proj", {&L.out_proj, L.out_proj.size()}},
      {"mlp.w_in", {&L.w_in, L.w_in.size()}},
      {"mlp.b_in", {&L.b_in, L.b_in.size()}},
      {"mlp.w_out", {&L.w_out, L.w_out.size()}},
      {"mlp.b_out", {&L.b_out, L.b_out.size()}},
  };
  if (!L.gain_attn.empty()) tensors.push_back({"gain_attn_in", {&L.gain_attn, L.gain_attn.size()}});
  if (!L.gain_mlp.empty()) tensors.push_back({"gain_mlp_in", {&L.gain_mlp, L.gain_mlp.size()}});
  if (!L.gain_kv.empty()) tensors.push_back({"gain_kv_in", {&L.gain_kv, L.gain_kv.size()}});
  if (!L.gain_q.empty()) tensors.push_back({"gain_q", {&L.gain_q, L.gain_q.size()}});
  if (!L.gain_k.empty()) tensors.push_back({"gain_k", {&L.gain_k, L.gain_k.size()}});

  std::vector<std::pair<std::string, std::pair<const double*, std::size_t>>> gtensors;
  for_each_param_tensor(grads.params,
                        [&](const std::string& name, const double* ptr, std::size_t sz) {
                          gtensors.push_back({name, {ptr, sz}});
                        });
  if (tensors.size() != gtensors.size())
    throw std::logic_error("gradcheck: parameter/gradient tensor lists disagree");

  for (std::size_t k = 0; k < tensors.size(); ++k) {
    if (tensors[k].first != gtensors[k].first)
      throw std::logic_error("gradcheck: tensor order mismatch at " + tensors[k].first);
    LdVec* ten = tensors[k].second.first;
    const double* gptr = gtensors[k].second.first;
    for (std::size_t i = 0; i < tensors[k].second.second; ++i)
      consider(tensors[k].first + "[" + std::to_string(i) + "]", gptr[i],
               central(&(*ten)[i]));
  }

  rep.pass = rep.max_rel_err < opts.tol;
  return rep;
}

}  // namespace

double directional_derivative(const LayerParams& p, const std::vector<Vec>& xs,
                              const SeedGrads& seed, const std::vector<Vec>& u, double h,
                              LayerArch arch) {
  LdLayer L = make_ld_layer(p, xs);
  const ldbl step = static_cast<ldbl>(h);
  auto shift = [&](ldbl sgn) {
    for (std::size_t t = 0; t < xs.size(); ++t)
      for (std::size_t i = 0; i < xs[t].size(); ++i)
        L.xs[t][i] = static_cast<ldbl>(xs[t][i]) + sgn * step * static_cast<ldbl>(u[t][i]);
  };
  shift(1.0L);
  const ldbl lp = ld_loss(L, seed, arch);
  shift(-1.0L);
  const ldbl lm = ld_loss(L, seed, arch);
  return static_cast<double>((lp - lm) / (2.0L * step));
}

GradcheckReport gradcheck(const LayerParams& p, const std::vector<Vec>& xs,
                          const SeedGrads& seed, const GradcheckOpts& opts) {
  const LayerGrads grads =
      opts.arch == LayerArch::recurrent
          ? rt_backward(p, rt_forward_naive(p, xs), seed)
          : transformer_backward(p, transformer_forward_io(p, xs), seed);
  return run_gradcheck(p, xs, seed, grads, opts);
}

GradcheckReport gradcheck_against(const LayerParams& p, const std::vector<Vec>& xs,
                                  const SeedGrads& seed, const LayerGrads& grads,
                                  const GradcheckOpts& opts) {
  return run_gradcheck(p, xs, seed, grads, opts);
}

}  // namespace rt
