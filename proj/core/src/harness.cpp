#include "rt/harness.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <thread>

#include "rt/tiling.hpp"

namespace rt {

TokenBatch gen_copy_batch(const CopyTaskCfg& cfg, index_t batch_size, std::uint64_t stream) {
  if (cfg.vocab < 4) throw std::logic_error("gen_copy_batch: vocab must be >= 4");
  if (cfg.prefix_len < 1) throw std::logic_error("gen_copy_batch: prefix_len must be >= 1");
  Rng rng(mix_seed(cfg.seed, stream));
  TokenBatch b;
  b.batch = batch_size;
  b.seq_len = cfg.seq_len();
  b.tokens.resize(static_cast<std::size_t>(batch_size * b.seq_len));
  b.mask.assign(static_cast<std::size_t>(batch_size * b.seq_len), 0);
  const index_t m = cfg.prefix_len;
  for (index_t s = 0; s < batch_size; ++s) {
    index_t* row = b.tokens.data() + s * b.seq_len;
    for (index_t i = 0; i < m; ++i) row[i] = rng.uniform_int(1, cfg.vocab - 1);
    row[m] = cfg.marker_token();
    for (index_t i = 0; i < m; ++i) {
      row[m + 1 + i] = row[i];
      b.mask[static_cast<std::size_t>(s * b.seq_len + m + 1 + i)] = 1;
    }
  }
  return b;
}

double ModelCfg::alpha_res() const {
  return layers > 0 ? 1.0 / std::sqrt(static_cast<double>(layers)) : 1.0;
}

ModelParams init_model(const ModelCfg& cfg, Rng& rng) {
  ModelParams p;
  for (index_t l = 0; l < cfg.layers; ++l) {
    LayerInit init;
    init.orthonormal_v = cfg.orthonormal_v;
    LayerParams lp = make_layer_params(cfg.d, cfg.heads, cfg.mlp_hidden(), rng, init);
    lp.alpha_res = cfg.alpha_res();
    lp.bias = cfg.bias;
    lp.use_qk_norm = cfg.use_qk_norm;
    p.layers.push_back(std::move(lp));
  }
  p.embed = rng.normal_mat(cfg.vocab, cfg.d, 1.0);
  // Zero readout: cross-entropy starts exactly at ln(vocab).
  p.unembed = Mat(cfg.vocab, cfg.d);
  return p;
}

ModelGrads zero_model_grads(const ModelParams& params) {
  ModelGrads g;
  for (const LayerParams& lp : params.layers) g.layers.push_back(zero_param_grads(lp));
  g.embed = Mat(params.embed.rows, params.embed.cols);
  g.unembed = Mat(params.unembed.rows, params.unembed.cols);
  return g;
}

namespace {

void add_into(Vec& into, const Vec& from) {
  for (std::size_t i = 0; i < into.size(); ++i) into[i] += from[i];
}

void add_into(Mat& into, const Mat& from) {
  for (std::size_t i = 0; i < into.data.size(); ++i) into.data[i] += from.data[i];
}

void add_param_grads(LayerParamGrads& into, const LayerParamGrads& from) {
  add_into(into.q_proj, from.q_proj);
  add_into(into.k_proj, from.k_proj);
  add_into(into.v_proj, from.v_proj);
  add_into(into.out_proj, from.out_proj);
  add_into(into.mlp.w_in, from.mlp.w_in);
  add_into(into.mlp.b_in, from.mlp.b_in);
  add_into(into.mlp.w_out, from.mlp.w_out);
  add_into(into.mlp.b_out, from.mlp.b_out);
  auto add_opt = [](std::optional<Vec>& a, const std::optional<Vec>& b) {
    if (a && b) add_into(*a, *b);
  };
  add_opt(into.gain_attn_in, from.gain_attn_in);
  add_opt(into.gain_mlp_in, from.gain_mlp_in);
  add_opt(into.gain_kv_in, from.gain_kv_in);
  add_opt(into.gain_q, from.gain_q);
  add_opt(into.gain_k, from.gain_k);
}

}  // namespace

void accumulate_model_grads(ModelGrads& into, const ModelGrads& from) {
  for (std::size_t l = 0; l < into.layers.size(); ++l)
    add_param_grads(into.layers[l], from.layers[l]);
  add_into(into.embed, from.embed);
  add_into(into.unembed, from.unembed);
}

void scale_model_grads(ModelGrads& g, double s) {
  for (LayerParamGrads& lg : g.layers) {
    for_each_param_tensor(lg, [s](const std::string&, double* ptr, std::size_t n) {
      for (std::size_t i = 0; i < n; ++i) ptr[i] *= s;
    });
  }
  for (auto& x : g.embed.data) x *= s;
  for (auto& x : g.unembed.data) x *= s;
}

SeqForward model_forward(const ModelCfg& cfg, const ModelParams& params,
                         const std::vector<index_t>& tokens) {
  const index_t t_len = static_cast<index_t>(tokens.size());
  std::vector<Vec> xs;
  xs.reserve(tokens.size());
  for (index_t t = 0; t < t_len; ++t) {
    const index_t tok = tokens[static_cast<std::size_t>(t)];
    if (tok < 0 || tok >= params.embed.rows)
      throw std::out_of_range("model_forward: token id " + std::to_string(tok) +
                              " outside vocabulary");
    xs.emplace_back(params.embed.row(tok), params.embed.row(tok) + params.embed.cols);
  }

  SeqForward f;
  for (const LayerParams& lp : params.layers) {
    LayerIO io = cfg.use_tiled_forward && cfg.arch == Arch::recurrent
                     ? rt_forward_tiled(lp, xs)
                     : (cfg.arch == Arch::recurrent ? rt_forward_naive(lp, xs)
                                                    : transformer_forward_io(lp, xs));
    xs = io.z;
    f.layer_ios.push_back(std::move(io));
  }
  f.hidden = xs;
  f.normed.reserve(xs.size());
  const Mat& readout = cfg.tied_embeddings ? params.embed : params.unembed;
  for (const Vec& h : xs) {
    Vec hn = cfg.final_rms ? rms_norm(h) : h;
    f.logits.push_back(matvec(readout, hn));
    f.normed.push_back(std::move(hn));
  }
  return f;
}

OutputLoss masked_cross_entropy(const std::vector<Vec>& logits,
                                const std::vector<index_t>& tokens,
                                const std::vector<std::uint8_t>& mask) {
  OutputLoss out;
  out.d_logits.assign(logits.size(), Vec(logits.empty() ? 0 : logits[0].size(), 0.0));
  double total = 0.0;
  index_t count = 0;
  for (std::size_t t = 1; t < tokens.size(); ++t) {
    if (!mask[t]) continue;
    const Vec& lg = logits[t - 1];
    const index_t target = tokens[t];
    double m = lg[0];
    for (double v : lg) m = std::max(m, v);
    double denom = 0.0;
    for (double v : lg) denom += std::exp(v - m);
    const double log_denom = std::log(denom) + m;
    total += log_denom - lg[static_cast<std::size_t>(target)];
    ++count;
    Vec& d = out.d_logits[t - 1];
    for (std::size_t c = 0; c < lg.size(); ++c) d[c] += std::exp(lg[c] - log_denom);
    d[static_cast<std::size_t>(target)] -= 1.0;
  }
  if (count == 0) throw std::logic_error("masked_cross_entropy: empty loss mask");
  out.loss = total / static_cast<double>(count);
  out.masked_tokens = count;
  // Gradients are reported per masked token, matching the mean loss.
  for (Vec& d : out.d_logits)
    for (double& v : d) v /= static_cast<double>(count);
  return out;
}

ModelGrads model_backward(const ModelCfg& cfg, const ModelParams& params,
                          const std::vector<index_t>& tokens, const SeqForward& fwd,
                          const std::vector<Vec>& d_logits) {
  ModelGrads grads = zero_model_grads(params);
  const index_t t_len = static_cast<index_t>(tokens.size());
  const Mat& readout = cfg.tied_embeddings ? params.embed : params.unembed;
  Mat& d_readout = cfg.tied_embeddings ? grads.embed : grads.unembed;

  // Readout and final RMS.
  std::vector<Vec> d_hidden(static_cast<std::size_t>(t_len));
  for (index_t t = 0; t < t_len; ++t) {
    const std::size_t ts = static_cast<std::size_t>(t);
    add_outer(d_readout, d_logits[ts], fwd.normed[ts]);
    Vec d_hn = matvec_transposed(readout, d_logits[ts]);
    d_hidden[ts] = cfg.final_rms ? rms_backward(fwd.hidden[ts], d_hn, nullptr)
                                 : std::move(d_hn);
  }

  // Layer stack, top to bottom.
  SeedGrads seed{std::move(d_hidden)};
  for (index_t l = static_cast<index_t>(params.layers.size()) - 1; l >= 0; --l) {
    const std::size_t ls = static_cast<std::size_t>(l);
    LayerGrads lg = cfg.arch == Arch::recurrent
                        ? rt_backward(params.layers[ls], fwd.layer_ios[ls], seed)
                        : transformer_backward(params.layers[ls], fwd.layer_ios[ls], seed);
    add_param_grads(grads.layers[ls], lg.params);
    seed.d_z = std::move(lg.d_x);
  }

  // Embedding rows.
  for (index_t t = 0; t < t_len; ++t) {
    const index_t tok = tokens[static_cast<std::size_t>(t)];
    double* row = grads.embed.row(tok);
    const Vec& d = seed.d_z[static_cast<std::size_t>(t)];
    for (index_t c = 0; c < grads.embed.cols; ++c) row[c] += d[static_cast<std::size_t>(c)];
  }
  return grads;
}

BatchResult batch_loss_and_grads(const ModelCfg& cfg, const ModelParams& params,
                                 const TokenBatch& batch, int threads) {
  const index_t n = batch.batch;
  std::vector<ModelGrads> per_seq(static_cast<std::size_t>(n));
  std::vector<double> losses(static_cast<std::size_t>(n), 0.0);
  std::vector<index_t> counts(static_cast<std::size_t>(n), 0);

  auto run_seq = [&](index_t s) {
    const std::size_t ss = static_cast<std::size_t>(s);
    std::vector<index_t> tokens(batch.tokens.begin() + s * batch.seq_len,
                                batch.tokens.begin() + (s + 1) * batch.seq_len);
    std::vector<std::uint8_t> mask(batch.mask.begin() + s * batch.seq_len,
                                   batch.mask.begin() + (s + 1) * batch.seq_len);
    const SeqForward fwd = model_forward(cfg, params, tokens);
    OutputLoss ol = masked_cross_entropy(fwd.logits, tokens, mask);
    // Per-sequence grads are scaled back to sums so the batch mean is exact.
    for (Vec& d : ol.d_logits)
      for (double& v : d) v *= static_cast<double>(ol.masked_tokens);
    per_seq[ss] = model_backward(cfg, params, tokens, fwd, ol.d_logits);
    losses[ss] = ol.loss * static_cast<double>(ol.masked_tokens);
    counts[ss] = ol.masked_tokens;
  };

  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(n)));
  if (workers == 1) {
    for (index_t s = 0; s < n; ++s) run_seq(s);
  } else {
    std::vector<std::thread> pool;
    std::size_t chunk = (static_cast<std::size_t>(n) + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
      const index_t lo = static_cast<index_t>(w * chunk);
      const index_t hi = std::min<index_t>(n, static_cast<index_t>((w + 1) * chunk));
      if (lo >= hi) break;
      pool.emplace_back([&, lo, hi] {
        for (index_t s = lo; s < hi; ++s) run_seq(s);
      });
    }
    for (auto& th : pool) th.join();
  }

  // Sequential reduction in sequence order: results are independent of the
  // thread count.
  BatchResult r;
  r.grads = zero_model_grads(params);
  double loss_sum = 0.0;
  index_t count_sum = 0;
  for (index_t s = 0; s < n; ++s) {
    accumulate_model_grads(r.grads, per_seq[static_cast<std::size_t>(s)]);
    loss_sum += losses[static_cast<std::size_t>(s)];
    count_sum += counts[static_cast<std::size_t>(s)];
  }
  scale_model_grads(r.grads, 1.0 / static_cast<double>(count_sum));
  r.loss = loss_sum / static_cast<double>(count_sum);
  r.masked_tokens = count_sum;
  return r;
}

namespace {

void adam_update_tensor(double* p, const double* g, double* m, double* v, std::size_t n,
                        const AdamCfg& cfg, double bc1, double bc2) {
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    p[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

}  // namespace

void adam_step(ModelParams& params, const ModelGrads& grads, AdamState& state,
               const AdamCfg& cfg) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));

  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    std::vector<std::pair<double*, std::size_t>> p_t, m_t, v_t;
    std::vector<std::pair<const double*, std::size_t>> g_t;
    for_each_param_tensor(params.layers[l], [&](const std::string&, double* ptr, std::size_t n) {
      p_t.push_back({ptr, n});
    });
    for_each_param_tensor(grads.layers[l],
                          [&](const std::string&, const double* ptr, std::size_t n) {
                            g_t.push_back({ptr, n});
                          });
    for_each_param_tensor(state.m.layers[l], [&](const std::string&, double* ptr, std::size_t n) {
      m_t.push_back({ptr, n});
    });
    for_each_param_tensor(state.v.layers[l], [&](const std::string&, double* ptr, std::size_t n) {
      v_t.push_back({ptr, n});
    });
    if (p_t.size() != g_t.size() || p_t.size() != m_t.size() || p_t.size() != v_t.size())
      throw std::logic_error("adam_step: tensor walks disagree");
    for (std::size_t k = 0; k < p_t.size(); ++k)
      adam_update_tensor(p_t[k].first, g_t[k].first, m_t[k].first, v_t[k].first,
                         p_t[k].second, cfg, bc1, bc2);
  }
  adam_update_tensor(params.embed.data.data(), grads.embed.data.data(),
                     state.m.embed.data.data(), state.v.embed.data.data(),
                     params.embed.data.size(), cfg, bc1, bc2);
  adam_update_tensor(params.unembed.data.data(), grads.unembed.data.data(),
                     state.m.unembed.data.data(), state.v.unembed.data.data(),
                     params.unembed.data.size(), cfg, bc1, bc2);
}

SeqEval sequence_metrics(const std::vector<Vec>& logits, const std::vector<index_t>& tokens,
                         const std::vector<std::uint8_t>& mask) {
  SeqEval ev;
  for (std::size_t t = 1; t < tokens.size(); ++t) {
    if (!mask[t]) continue;
    const Vec& lg = logits[t - 1];
    // argmax with ties broken toward the lowest token index
    std::size_t best = 0;
    for (std::size_t c = 1; c < lg.size(); ++c)
      if (lg[c] > lg[best]) best = c;
    const index_t target = tokens[t];
    ev.total += 1;
    if (static_cast<index_t>(best) == target)
      ev.correct += 1;
    else
      ev.all_correct = false;
    double m = lg[0];
    for (double v : lg) m = std::max(m, v);
    double denom = 0.0;
    for (double v : lg) denom += std::exp(v - m);
    ev.ce_sum += std::log(denom) + m - lg[static_cast<std::size_t>(target)];
  }
  return ev;
}

EvalMetrics evaluate(const ModelCfg& cfg, const ModelParams& params, const CopyTaskCfg& task,
                     index_t n_batches, index_t batch_size, std::uint64_t eval_seed,
                     int threads) {
  EvalMetrics em;
  double ce_sum = 0.0;
  index_t correct = 0, total = 0, seq_correct = 0, seqs = 0;

  for (index_t bi = 0; bi < n_batches; ++bi) {
    CopyTaskCfg eval_task = task;
    eval_task.seed = mix_seed(task.seed ^ 0x5eed5eed5eed5eedull, eval_seed);
    const TokenBatch batch = gen_copy_batch(eval_task, batch_size, static_cast<std::uint64_t>(bi));

    std::vector<std::uint8_t> seq_ok(static_cast<std::size_t>(batch.batch), 1);
    std::vector<double> ce(static_cast<std::size_t>(batch.batch), 0.0);
    std::vector<index_t> corr(static_cast<std::size_t>(batch.batch), 0);
    std::vector<index_t> tot(static_cast<std::size_t>(batch.batch), 0);

    auto run_seq = [&](index_t s) {
      std::vector<index_t> tokens(batch.tokens.begin() + s * batch.seq_len,
                                  batch.tokens.begin() + (s + 1) * batch.seq_len);
      std::vector<std::uint8_t> mask(batch.mask.begin() + s * batch.seq_len,
                                     batch.mask.begin() + (s + 1) * batch.seq_len);
      const SeqForward fwd = model_forward(cfg, params, tokens);
      const SeqEval ev = sequence_metrics(fwd.logits, tokens, mask);
      tot[static_cast<std::size_t>(s)] = ev.total;
      corr[static_cast<std::size_t>(s)] = ev.correct;
      seq_ok[static_cast<std::size_t>(s)] = ev.all_correct ? 1 : 0;
      ce[static_cast<std::size_t>(s)] = ev.ce_sum;
    };

    const int workers = std::max(1, std::min<int>(threads, static_cast<int>(batch.batch)));
    if (workers == 1) {
      for (index_t s = 0; s < batch.batch; ++s) run_seq(s);
    } else {
      std::vector<std::thread> pool;
      std::size_t chunk = (static_cast<std::size_t>(batch.batch) + workers - 1) / workers;
      for (int w = 0; w < workers; ++w) {
        const index_t lo = static_cast<index_t>(w * chunk);
        const index_t hi =
            std::min<index_t>(batch.batch, static_cast<index_t>((w + 1) * chunk));
        if (lo >= hi) break;
        pool.emplace_back([&, lo, hi] {
          for (index_t s = lo; s < hi; ++s) run_seq(s);
        });
      }
      for (auto& th : pool) th.join();
    }

    for (index_t s = 0; s < batch.batch; ++s) {
      const std::size_t ss = static_cast<std::size_t>(s);
      ce_sum += ce[ss];
      correct += corr[ss];
      total += tot[ss];
      seq_correct += seq_ok[ss] ? 1 : 0;
      seqs += 1;
    }
  }

  em.masked_ce = ce_sum / static_cast<double>(total);
  em.token_acc = static_cast<double>(correct) / static_cast<double>(total);
  em.seq_acc = static_cast<double>(seq_correct) / static_cast<double>(seqs);
  em.masked_tokens = total;
  em.sequences = seqs;
  return em;
}

TrainResult train(const ModelCfg& cfg, const CopyTaskCfg& task, const TrainCfg& tc) {
  Rng rng(mix_seed(tc.seed, 0xabcdef));
  TrainResult result;
  result.params = init_model(cfg, rng);

  AdamState adam;
  adam.m = zero_model_grads(result.params);
  adam.v = zero_model_grads(result.params);

  CopyTaskCfg stream_task = task;
  stream_task.seed = tc.seed;

  const double divergence_level = 10.0 * std::log(static_cast<double>(cfg.vocab));
  index_t bad_steps = 0;

  for (index_t step = 0; step < tc.steps; ++step) {
    const TokenBatch batch =
        gen_copy_batch(stream_task, tc.batch_size, static_cast<std::uint64_t>(step));
    BatchResult br = batch_loss_and_grads(cfg, result.params, batch, tc.threads);
    adam_step(result.params, br.grads, adam, tc.adam);

    if (!std::isfinite(br.loss) || br.loss > divergence_level) {
      if (!std::isfinite(br.loss) || ++bad_steps >= tc.divergence_patience) {
        result.diverged = true;
        result.diagnostic = "training diverged at step " + std::to_string(step) +
                            " (loss " + std::to_string(br.loss) + ")";
        return result;
      }
    } else {
      bad_steps = 0;
    }

    if ((step + 1) % tc.eval_every == 0 || step + 1 == tc.steps) {
      const EvalMetrics em = evaluate(cfg, result.params, task, tc.eval_batches,
                                      tc.eval_batch_size, 1, tc.threads);
      result.trace.push_back({step + 1, em.masked_ce, em.token_acc, em.seq_acc});
    }
  }
  return result;
}

}  // namespace rt
