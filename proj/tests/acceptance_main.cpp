// Acceptance suite: runs every acceptance criterion at its stated tolerance
// and prints one pass/fail line per criterion. Exit code 0 iff all pass.
//
// Usage: rt_acceptance [--only N] [--threads T]

#include <chrono>
#include <cmath>
#include <cstring>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "rt/autograd.hpp"
#include "rt/harness.hpp"
#include "rt/io_model.hpp"
#include "rt/theory.hpp"
#include "rt/tiling.hpp"

using namespace rt;

namespace {

int g_threads = 2;

struct Outcome {
  bool pass = false;
  std::string detail;
};

LayerParams random_case_layer(index_t d, int heads, bool qk_norm, bool alibi, Rng& rng) {
  LayerParams p = make_layer_params(d, heads, 4 * d, rng);
  p.use_qk_norm = qk_norm;
  if (alibi) p.bias = BiasSpec{BiasKind::alibi, 1.0, 0.0, 8.0};
  p.alpha_res = 1.0 / std::sqrt(2.0);
  return p;
}

// 1. Exactness of the tiled forward against the sequential forward.
Outcome criterion_tiled_exactness() {
  Rng rng(1001);
  const index_t dims[] = {4, 8, 16};
  const int heads_opts[] = {1, 2, 4};
  double worst = 0.0;
  for (int c = 0; c < 200; ++c) {
    const index_t n = rng.uniform_int(1, 128);
    const index_t d = dims[rng.uniform_int(0, 2)];
    const int h = heads_opts[rng.uniform_int(0, 2)];
    const bool qk = rng.uniform() < 0.5;
    const bool alibi = rng.uniform() < 0.5;
    LayerParams p = random_case_layer(d, h, qk, alibi, rng);
    std::vector<Vec> xs;
    for (index_t i = 0; i < n; ++i) xs.push_back(rng.normal_vec(d));
    const LayerIO naive = rt_forward_naive(p, xs);
    const LayerIO tiled = rt_forward_tiled(p, xs);
    for (index_t i = 0; i < n; ++i)
      worst = std::max(worst, max_abs_diff(naive.z[static_cast<std::size_t>(i)],
                                           tiled.z[static_cast<std::size_t>(i)]));
  }
  std::ostringstream os;
  os << "max |z_tiled - z_naive| = " << worst << " over 200 random cases";
  return {worst < 1e-10, os.str()};
}

// 2. Every causal pair covered exactly once, for all n in [1, 512].
Outcome criterion_schedule_coverage() {
  for (index_t n = 1; n <= 512; ++n) {
    const Schedule s = build_schedule(n);
    const ScheduleReport rep = validate_schedule(s);
    if (!rep.ok)
      return {false, "n=" + std::to_string(n) + ": " + rep.message};
    index_t interactions = 0;
    for (const TileEvent& ev : s.events)
      if (ev.kind == TileKind::persistent_tile)
        interactions += (ev.e - ev.s + 1) * (ev.v - ev.u + 1);
    if (interactions != n * (n - 1) / 2)
      return {false, "n=" + std::to_string(n) + ": covered pair count " +
                         std::to_string(interactions) + " != n(n-1)/2"};
  }
  return {true, "coverage exact for all n in [1, 512]"};
}

// 3. Counted-traffic asymptotics (substitute for wall-clock curves).
Outcome criterion_traffic_asymptotics() {
  const index_t d = 64;
  std::vector<index_t> ns;
  for (index_t n = 1 << 7; n <= (1 << 14); n *= 2) ns.push_back(n);

  for (index_t n : ns) {
    index_t pairs = 0;
    for (index_t t = 1; t <= n; ++t) pairs += t;  // independent accumulation
    const TrafficReport r = count_naive(n, d);
    if (r.kv_elements_loaded != pairs * 2 * d)
      return {false, "naive kv loads disagree with n(n+1)/2 * 2d at n=" + std::to_string(n)};
  }

  const AsymptoticsTable t = asymptotics_check(ns, d);
  std::ostringstream os;
  os << "tiled/(n log2 n) in [" << t.tiled_band_lo << ", " << t.tiled_band_hi
     << "] (ratio " << t.tiled_band_hi / t.tiled_band_lo << "), naive AI spread "
     << t.naive_ai_spread * 100.0 << "%";
  const bool pass = t.tiled_band_hi / t.tiled_band_lo <= 3.0 &&
                    t.tiled_ai_strictly_increasing && t.naive_ai_spread < 0.05;
  return {pass, os.str()};
}

// 4. Gradients against central finite differences, plus the transpose test.
Outcome criterion_gradients() {
  Rng rng(1004);
  double worst = 0.0, worst_dot = 0.0;
  for (int inst = 0; inst < 20; ++inst) {
    LayerParams p = make_layer_params(6, 1, 24, rng);
    p.alpha_res = 1.0 / std::sqrt(2.0);
    p.use_qk_norm = inst % 2 == 0;
    std::vector<Vec> xs;
    for (int i = 0; i < 6; ++i) xs.push_back(rng.normal_vec(6));
    SeedGrads seed;
    for (int i = 0; i < 6; ++i) seed.d_z.push_back(rng.normal_vec(6));

    GradcheckOpts opts;
    opts.tol = 1e-6;
    opts.h = 1e-5;
    const GradcheckReport rep = gradcheck(p, xs, seed, opts);
    worst = std::max(worst, rep.max_rel_err);
    if (!rep.pass)
      return {false, "instance " + std::to_string(inst) + " failed at " +
                         rep.worst_coordinate + " rel err " + std::to_string(rep.max_rel_err)};

    // Transpose consistency along a random direction.
    const LayerIO io = rt_forward_naive(p, xs);
    const LayerGrads g = rt_backward(p, io, seed);
    std::vector<Vec> u;
    for (int i = 0; i < 6; ++i) u.push_back(rng.normal_vec(6));
    const double jvp = directional_derivative(p, xs, seed, u, 1e-5);
    double vjp = 0.0;
    for (std::size_t tt = 0; tt < u.size(); ++tt) vjp += dot(u[tt], g.d_x[tt]);
    const double rel = std::abs(jvp - vjp) / std::max({std::abs(jvp), std::abs(vjp), 1e-8});
    worst_dot = std::max(worst_dot, rel);
    if (rel >= 1e-6)
      return {false, "transpose test failed: rel err " + std::to_string(rel)};
  }
  std::ostringstream os;
  os << "20 instances: worst gradcheck rel err " << worst << ", worst transpose rel err "
     << worst_dot;
  return {true, os.str()};
}

// 5. Closed-form Jacobian of the uniform-attention layer.
Outcome criterion_stirling_jacobian() {
  for (int k = 1; k <= 10; ++k) {
    std::uint64_t sum = 0;
    for (int r = 0; r <= k; ++r) sum += stirling_first_kind(k, r);
    if (sum != factorial_u64(k))
      return {false, "stirling row " + std::to_string(k) + " does not sum to k!"};
    if (stirling_first_kind(k, 1) != factorial_u64(k - 1))
      return {false, "[k 1] != (k-1)! at k=" + std::to_string(k)};
  }
  Rng rng(1005);
  double worst = 0.0;
  for (int draw = 0; draw < 20; ++draw) {
    const index_t d = rng.uniform_int(1, 4);
    SimplifiedLayerCfg cfg{rng.uniform(0.02, 0.98), rng.normal_mat(d, d), 8};
    for (int k = 2; k <= 8; ++k) {
      const Mat a = stirling_jacobian(cfg, k);
      const Mat b = recurrence_jacobian(cfg, k);
      for (std::size_t i = 0; i < a.data.size(); ++i)
        worst = std::max(worst, std::abs(a.data[i] - b.data[i]));
    }
  }
  std::ostringstream os;
  os << "analytic vs recurrence max |diff| = " << worst << " over 20 draws, k <= 8";
  return {worst < 1e-10, os.str()};
}

// 6. Width-3d' simulation of a stacked norm-free baseline.
Outcome criterion_simulation() {
  Rng rng(1006);
  const index_t dp = 4, n = 8, layers = 3;
  double worst_live = 0.0, worst_scratch = 0.0, worst_logit = 0.0;
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<NormFreeTransformerLayer> tf;
    for (index_t l = 0; l < layers; ++l) {
      NormFreeTransformerLayer layer;
      const double std = 1.0 / std::sqrt(static_cast<double>(dp));
      layer.q_proj = rng.normal_mat(dp, dp, std);
      layer.k_proj = rng.normal_mat(dp, dp, std);
      layer.v_proj = rng.normal_mat(dp, dp, std);
      layer.mlp.w_in = rng.normal_mat(2 * dp, dp, std);
      layer.mlp.b_in = rng.normal_vec(2 * dp, 0.1);
      layer.mlp.w_out = rng.normal_mat(dp, 2 * dp, std);
      layer.mlp.b_out = rng.normal_vec(dp, 0.1);
      tf.push_back(std::move(layer));
    }
    const SimulatedStack sim = build_simulator(tf);
    std::vector<Vec> xs;
    for (index_t i = 0; i < n; ++i) xs.push_back(rng.normal_vec(dp));

    std::vector<std::vector<Vec>> tf_inputs{xs};
    std::vector<LayerIO> tf_ios;
    for (index_t l = 0; l < layers; ++l) {
      LayerIO io = transformer_forward_io(norm_free_layer_params(tf[static_cast<std::size_t>(l)]),
                                          tf_inputs.back());
      tf_inputs.push_back(io.z);
      tf_ios.push_back(std::move(io));
    }

    std::vector<Vec> wide = embed_simulator_input(sim.blocks, xs);
    for (index_t l = 0; l < layers; ++l) {
      const std::size_t ls = static_cast<std::size_t>(l);
      const LayerIO io = rt_forward_naive(sim.layers[ls], wide);

      for (index_t i = 0; i < n; ++i) {
        const std::size_t is = static_cast<std::size_t>(i);
        for (index_t c = 0; c < dp; ++c)
          worst_scratch = std::max(
              worst_scratch,
              std::abs(io.z[is][static_cast<std::size_t>(sim.blocks.scratch_off() + c)]));

        // Logits: wide dots must equal the embedded d'-dots bit for bit and
        // track the independently run baseline.
        for (index_t j = 0; j <= i; ++j) {
          const std::size_t js = static_cast<std::size_t>(j);
          const Vec wide_k = j == i ? matvec(sim.layers[ls].k_proj, io.x[is])
                                    : io.cache.keys[js];
          const double wide_logit = dot(wide_k, io.q[is]);
          double embedded = 0.0;
          for (index_t c = 0; c < dp; ++c)
            embedded += wide_k[static_cast<std::size_t>(c)] * io.q[is][static_cast<std::size_t>(c)];
          if (wide_logit != embedded)
            return {false, "wide logit differs from its embedded dot product"};
          const double oracle = dot(tf_ios[ls].cache.keys[js], tf_ios[ls].q[is]);
          worst_logit = std::max(worst_logit, std::abs(wide_logit - oracle));
          if (l < 2 && wide_logit != oracle)
            return {false, "layer " + std::to_string(l + 1) +
                               " logit not bit-identical to the baseline"};
        }
      }

      // Output block tracks the baseline layer output.
      for (index_t i = 0; i < n; ++i)
        for (index_t c = 0; c < dp; ++c)
          worst_live = std::max(
              worst_live,
              std::abs(io.z[static_cast<std::size_t>(i)]
                           [static_cast<std::size_t>(sim.blocks.out_off(l) + c)] -
                       tf_ios[ls].z[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)]));
      wide = io.z;
    }
  }
  std::ostringstream os;
  os << "live err " << worst_live << ", scratch " << worst_scratch << ", logit err vs oracle "
     << worst_logit << " (embedded dots bit-exact)";
  return {worst_live <= 1e-12 && worst_scratch <= 1e-12 && worst_logit <= 1e-12, os.str()};
}

// 7. Previous-token concentration limit.
Outcome criterion_rnn_limit() {
  Rng rng(1007);
  const index_t d = 8, n = 16;
  LayerParams p = make_layer_params(d, 1, 4 * d, rng);
  p.v_proj = Mat::identity(d);
  p.out_proj = Mat::identity(d);
  p.alpha_res = 1.0;
  std::vector<Vec> xs;
  for (index_t i = 0; i < n; ++i) xs.push_back(rng.normal_vec(d));
  const RnnEmulationReport rep = rnn_emulation_check(p, xs, {10.0, 25.0, 50.0});
  std::ostringstream os;
  os << "rel err at B=10/25/50: " << rep.points[0].max_rel_err << " / "
     << rep.points[1].max_rel_err << " / " << rep.points[2].max_rel_err;
  return {rep.monotone_decreasing && rep.points[2].max_rel_err < 1e-3, os.str()};
}

// 8. Copy-task capability at desk scale.
Outcome criterion_copy_task() {
  CopyTaskCfg task;
  task.vocab = 16;
  task.prefix_len = 16;

  auto run_arch = [&](Arch arch, std::uint64_t seed) {
    ModelCfg cfg;
    cfg.arch = arch;
    cfg.layers = 1;
    cfg.d = 64;
    cfg.heads = 2;
    cfg.vocab = 16;
    TrainCfg tc;
    tc.steps = 3000;
    tc.batch_size = 32;
    tc.eval_every = 250;
    tc.eval_batches = 2;
    tc.eval_batch_size = 64;
    tc.seed = seed;
    tc.threads = g_threads;
    tc.adam.lr = 1e-3;
    const TrainResult r = train(cfg, task, tc);
    double best_tok = 0.0, final_seq = 0.0;
    for (const StepMetrics& m : r.trace) best_tok = std::max(best_tok, m.tok_acc);
    if (!r.trace.empty()) final_seq = r.trace.back().seq_acc;
    return std::make_pair(best_tok, final_seq);
  };

  const std::uint64_t seeds[3] = {11, 22, 33};
  int rt_hits = 0;
  double rt_seq_mean = 0.0, tf_seq_mean = 0.0;
  std::ostringstream os;
  os << "rt tok acc:";
  for (std::uint64_t s : seeds) {
    const auto [tok, seq] = run_arch(Arch::recurrent, s);
    os << " " << tok;
    if (tok >= 0.9) ++rt_hits;
    rt_seq_mean += seq / 3.0;
  }
  os << " | tf tok acc:";
  for (std::uint64_t s : seeds) {
    const auto [tok, seq] = run_arch(Arch::transformer, s);
    os << " " << tok;
    tf_seq_mean += seq / 3.0;
  }
  os << " | seq acc mean rt " << rt_seq_mean << " vs tf " << tf_seq_mean;
  return {rt_hits >= 2 && rt_seq_mean >= tf_seq_mean, os.str()};
}

// 9. Parallel recomputation of the sequential forward's intermediates.
Outcome criterion_recompute() {
  Rng rng(1009);
  double worst = 0.0;
  for (index_t n : {1, 7, 33, 64}) {
    LayerParams p = random_case_layer(8, 2, true, true, rng);
    std::vector<Vec> xs;
    for (index_t i = 0; i < n; ++i) xs.push_back(rng.normal_vec(8));
    const LayerIO io = rt_forward_naive(p, xs);
    const LayerIO re = rt_recompute_intermediates(p, xs, io.z);
    for (index_t i = 0; i < n; ++i) {
      const std::size_t is = static_cast<std::size_t>(i);
      worst = std::max(worst, max_abs_diff(io.a[is], re.a[is]));
      worst = std::max(worst, max_abs_diff(io.cache.keys[is], re.cache.keys[is]));
      worst = std::max(worst, max_abs_diff(io.cache.values[is], re.cache.values[is]));
    }
  }
  std::ostringstream os;
  os << "max |recomputed - sequential| = " << worst << " for N in {1, 7, 33, 64}";
  return {worst <= 1e-12, os.str()};
}

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  g_threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc) only = std::atoi(argv[++i]);
    if (std::strcmp(argv[i], "--threads") == 0 && i + 1 < argc)
      g_threads = std::atoi(argv[++i]);
  }

  struct Entry {
    int id;
    const char* name;
    Outcome (*fn)();
  };
  const Entry entries[] = {
      {1, "tiled-forward exactness", criterion_tiled_exactness},
      {2, "schedule coverage", criterion_schedule_coverage},
      {3, "traffic asymptotics", criterion_traffic_asymptotics},
      {4, "gradient correctness", criterion_gradients},
      {5, "uniform-attention closed-form Jacobian", criterion_stirling_jacobian},
      {6, "baseline simulation at width 3d'", criterion_simulation},
      {7, "previous-token recurrence limit", criterion_rnn_limit},
      {8, "copy-task capability", criterion_copy_task},
      {9, "recompute consistency", criterion_recompute},
  };

  bool all_pass = true;
  for (const Entry& e : entries) {
    if (only != 0 && e.id != only) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = e.fn();
    } catch (const std::exception& ex) {
      out = {false, std::string("exception: ") + ex.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cout << "criterion " << e.id << " " << (out.pass ? "PASS" : "FAIL") << " ["
              << e.name << "] " << out.detail << " (" << secs << "s)" << std::endl;
    all_pass = all_pass && out.pass;
  }
  return all_pass ? 0 : 1;
}
