// Single command line entry point for the verification and experiment
// commands. Every command writes one manifest.json (full configuration,
// seed, result summary) into its output directory.
//
// Exit codes: 0 pass, 1 check failure, 2 usage error.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "rt/autograd.hpp"
#include "rt/harness.hpp"
#include "rt/io_model.hpp"
#include "rt/theory.hpp"
#include "rt/tiling.hpp"
#include "rt/weights.hpp"

using json = nlohmann::json;
using namespace rt;

namespace {

constexpr const char* kVersion = "0.1.0";

std::string timestamp_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", std::localtime(&t));
  return buf;
}

struct RunContext {
  std::string command;
  std::string out_dir;
  std::uint64_t seed = 0;
  int threads = 2;
  json config;
  json result;

  void finalize(bool pass) {
    std::filesystem::create_directories(out_dir);
    json manifest;
    manifest["schema_version"] = 1;
    manifest["command"] = command;
    manifest["config"] = config;
    manifest["seed"] = seed;
    manifest["threads"] = threads;
    manifest["version"] = kVersion;
    manifest["timestamp"] = timestamp_now();
    manifest["pass"] = pass;
    manifest["result"] = result;
    std::ofstream os(out_dir + "/manifest.json");
    os << manifest.dump(2) << "\n";
  }

  std::ofstream open_output(const std::string& name) {
    std::filesystem::create_directories(out_dir);
    return std::ofstream(out_dir + "/" + name);
  }
};

json bias_to_json(const BiasSpec& b) {
  const char* kind = b.kind == BiasKind::none ? "none"
                     : b.kind == BiasKind::alibi ? "alibi"
                                                 : "prev_token";
  return json{{"kind", kind},
              {"slope", b.slope},
              {"strength", b.strength},
              {"max_bias", b.max_bias}};
}

BiasSpec bias_from_json(const json& j) {
  BiasSpec b;
  const std::string kind = j.value("kind", "none");
  b.kind = kind == "alibi" ? BiasKind::alibi
           : kind == "prev_token" ? BiasKind::prev_token
                                  : BiasKind::none;
  b.slope = j.value("slope", 1.0);
  b.strength = j.value("strength", 0.0);
  b.max_bias = j.value("max_bias", 8.0);
  return b;
}

// ---- equivalence -----------------------------------------------------------

int cmd_equivalence(RunContext& ctx, index_t n, index_t d, int heads, int cases,
                    bool qk_norm, double tol) {
  Rng rng(ctx.seed ? ctx.seed : 42);
  double worst = 0.0;
  for (int c = 0; c < cases; ++c) {
    const index_t len = rng.uniform_int(1, n);
    LayerParams p = make_layer_params(d, heads, 4 * d, rng);
    p.use_qk_norm = qk_norm;
    if (rng.uniform() < 0.5) p.bias = BiasSpec{BiasKind::alibi, 1.0, 0.0, 8.0};
    std::vector<Vec> xs;
    for (index_t i = 0; i < len; ++i) xs.push_back(rng.normal_vec(d));
    const LayerIO naive = rt_forward_naive(p, xs);
    const LayerIO tiled = rt_forward_tiled(p, xs);
    for (index_t i = 0; i < len; ++i)
      worst = std::max(worst, max_abs_diff(naive.z[static_cast<std::size_t>(i)],
                                           tiled.z[static_cast<std::size_t>(i)]));
  }
  const bool pass = worst < tol;
  std::cout << "max |z_tiled - z_naive| = " << worst << " over " << cases
            << " cases (N <= " << n << ", D = " << d << ", H = " << heads << ")\n"
            << (pass ? "PASS" : "FAIL") << " at tolerance " << tol << "\n";
  ctx.result = {{"max_abs_err", worst}, {"tolerance", tol}, {"cases", cases}};
  ctx.finalize(pass);
  return pass ? 0 : 1;
}

// ---- schedule ---------------------------------------------------------------

int cmd_schedule_dump(RunContext& ctx, index_t n, index_t max_tile) {
  const Schedule s = build_schedule(n, max_tile);
  std::ostringstream csv;
  csv << "kind,u,v,s,e\n";
  for (const TileEvent& ev : s.events)
    csv << (ev.kind == TileKind::temp_self ? "temp_self" : "persistent_tile") << ","
        << ev.u << "," << ev.v << "," << ev.s << "," << ev.e << "\n";
  std::cout << csv.str();
  auto os = ctx.open_output("schedule.csv");
  os << csv.str();
  ctx.result = {{"events", s.events.size()}};
  ctx.finalize(true);
  return 0;
}

int cmd_schedule_validate(RunContext& ctx, index_t n_max) {
  for (index_t n = 1; n <= n_max; ++n) {
    const ScheduleReport rep = validate_schedule(build_schedule(n));
    if (!rep.ok) {
      std::cout << "FAIL n=" << n << ": " << rep.message << "\n";
      ctx.result = {{"failed_n", n}, {"message", rep.message}};
      ctx.finalize(false);
      return 1;
    }
  }
  std::cout << "PASS schedules valid for all n in [1, " << n_max << "]\n";
  ctx.result = {{"n_max", n_max}};
  ctx.finalize(true);
  return 0;
}

// ---- io-report --------------------------------------------------------------

int cmd_io_report(RunContext& ctx, const std::string& n_list, index_t d,
                  const std::string& format, index_t bytes_per_element,
                  index_t softmax_flops) {
  std::vector<index_t> ns;
  std::stringstream ss(n_list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) ns.push_back(std::stoll(item));
  }
  if (ns.empty()) {
    std::cerr << "io-report: empty --n-list\n";
    return 2;
  }

  // One row per sequence length, both schedules side by side.
  json rows = json::array();
  std::ostringstream csv;
  csv << "n,d,naive_kv_pairs,naive_kv_elements,naive_q_elements,naive_o_elements,"
         "naive_flops,naive_ai,tiled_kv_pairs,tiled_kv_elements,tiled_q_elements,"
         "tiled_o_elements,tiled_flops,tiled_ai,tiled_ai_excluding_queries,"
         "kv_load_ratio\n";
  const index_t scale = bytes_per_element;
  auto report_json = [scale](const TrafficReport& r) {
    return json{{"kv_pairs", r.kv_pairs_loaded},
                {"kv_elements", r.kv_elements_loaded * scale},
                {"q_elements", r.q_elements_loaded * scale},
                {"o_elements", r.o_elements_moved * scale},
                {"flops", r.flops},
                {"arithmetic_intensity", r.arithmetic_intensity / static_cast<double>(scale)},
                {"ai_excluding_queries", r.ai_excluding_queries / static_cast<double>(scale)}};
  };
  for (index_t n : ns) {
    const TrafficReport nv = count_naive(n, d, softmax_flops);
    const TrafficReport td = count_tiled(n, d, softmax_flops);
    csv << n << "," << d << "," << nv.kv_pairs_loaded << "," << nv.kv_elements_loaded * scale
        << "," << nv.q_elements_loaded * scale << "," << nv.o_elements_moved * scale << ","
        << nv.flops << "," << nv.arithmetic_intensity / static_cast<double>(scale) << ","
        << td.kv_pairs_loaded << "," << td.kv_elements_loaded * scale << ","
        << td.q_elements_loaded * scale << "," << td.o_elements_moved * scale << ","
        << td.flops << "," << td.arithmetic_intensity / static_cast<double>(scale) << ","
        << td.ai_excluding_queries / static_cast<double>(scale) << ","
        << static_cast<double>(nv.kv_elements_loaded) /
               static_cast<double>(td.kv_elements_loaded)
        << "\n";
    rows.push_back({{"n", n}, {"d", d}, {"naive", report_json(nv)}, {"tiled", report_json(td)}});
  }

  if (format == "json") {
    json doc{{"schema_version", 1}, {"rows", rows}};
    std::cout << doc.dump(2) << "\n";
    auto os = ctx.open_output("io_report.json");
    os << doc.dump(2) << "\n";
  } else {
    std::cout << csv.str();
    auto os = ctx.open_output("io_report.csv");
    os << csv.str();
  }
  ctx.result = {{"rows", rows.size()}};
  ctx.finalize(true);
  return 0;
}

// ---- gradcheck ---------------------------------------------------------------

int cmd_gradcheck(RunContext& ctx, index_t n, index_t d, int heads, int seeds, double tol,
                  double h, bool qk_norm, const std::string& arch) {
  double worst = 0.0;
  std::string worst_coord;
  bool pass = true;
  for (int s = 0; s < seeds; ++s) {
    Rng rng(mix_seed(ctx.seed ? ctx.seed : 7, static_cast<std::uint64_t>(s)));
    LayerParams p = make_layer_params(d, heads, 4 * d, rng);
    p.use_qk_norm = qk_norm;
    p.alpha_res = 1.0 / std::sqrt(2.0);
    std::vector<Vec> xs;
    for (index_t i = 0; i < n; ++i) xs.push_back(rng.normal_vec(d));
    SeedGrads seed;
    for (index_t i = 0; i < n; ++i) seed.d_z.push_back(rng.normal_vec(d));
    GradcheckOpts opts;
    opts.tol = tol;
    opts.h = h;
    opts.arch = arch == "tf" ? LayerArch::transformer : LayerArch::recurrent;
    const GradcheckReport rep = gradcheck(p, xs, seed, opts);
    if (rep.max_rel_err > worst) {
      worst = rep.max_rel_err;
      worst_coord = rep.worst_coordinate;
    }
    pass = pass && rep.pass;
  }
  std::cout << "gradcheck over " << seeds << " seeds: max rel err = " << worst << " at "
            << worst_coord << "\n"
            << (pass ? "PASS" : "FAIL") << " at tolerance " << tol << "\n";
  ctx.result = {{"max_rel_err", worst}, {"worst_coordinate", worst_coord}, {"tolerance", tol}};
  ctx.finalize(pass);
  return pass ? 0 : 1;
}

// ---- theory-check -------------------------------------------------------------

json theory_simulate(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 1));
  const index_t dp = 4, n = 8, layers = 3;
  double worst_live = 0.0, worst_scratch = 0.0, worst_logit = 0.0;
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<NormFreeTransformerLayer> tf;
    const double std = 1.0 / std::sqrt(static_cast<double>(dp));
    for (index_t l = 0; l < layers; ++l) {
      NormFreeTransformerLayer layer;
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
      LayerIO io = transformer_forward_io(
          norm_free_layer_params(tf[static_cast<std::size_t>(l)]), tf_inputs.back());
      tf_inputs.push_back(io.z);
      tf_ios.push_back(std::move(io));
    }
    std::vector<Vec> wide = embed_simulator_input(sim.blocks, xs);
    for (index_t l = 0; l < layers; ++l) {
      const std::size_t ls = static_cast<std::size_t>(l);
      const LayerIO io = rt_forward_naive(sim.layers[ls], wide);
      for (index_t i = 0; i < n; ++i) {
        const std::size_t is = static_cast<std::size_t>(i);
        for (index_t c = 0; c < dp; ++c) {
          worst_scratch = std::max(
              worst_scratch,
              std::abs(io.z[is][static_cast<std::size_t>(sim.blocks.scratch_off() + c)]));
          worst_live = std::max(
              worst_live,
              std::abs(io.z[is][static_cast<std::size_t>(sim.blocks.out_off(l) + c)] -
                       tf_ios[ls].z[is][static_cast<std::size_t>(c)]));
        }
        for (index_t j = 0; j <= i; ++j) {
          const std::size_t js = static_cast<std::size_t>(j);
          const Vec wide_k = j == i ? matvec(sim.layers[ls].k_proj, io.x[is])
                                    : io.cache.keys[js];
          const double wide_logit = dot(wide_k, io.q[is]);
          const double oracle = dot(tf_ios[ls].cache.keys[js], tf_ios[ls].q[is]);
          worst_logit = std::max(worst_logit, std::abs(wide_logit - oracle));
        }
      }
      wide = io.z;
    }
  }
  const bool pass = worst_live <= 1e-12 && worst_scratch <= 1e-12 && worst_logit <= 1e-12;
  return json{{"name", "simulate"},
              {"pass", pass},
              {"live_err", worst_live},
              {"scratch_err", worst_scratch},
              {"logit_err", worst_logit}};
}

json theory_jacobian(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 2));
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
  bool identities = true;
  for (int k = 1; k <= 10; ++k) {
    std::uint64_t sum = 0;
    for (int r = 0; r <= k; ++r) sum += stirling_first_kind(k, r);
    identities = identities && sum == factorial_u64(k) &&
                 stirling_first_kind(k, 1) == factorial_u64(k - 1);
  }
  return json{{"name", "theorem1"},
              {"pass", worst < 1e-10 && identities},
              {"max_abs_err", worst},
              {"stirling_identities", identities}};
}

json theory_rnn(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 3));
  const index_t d = 8, n = 16;
  LayerParams p = make_layer_params(d, 1, 4 * d, rng);
  p.v_proj = Mat::identity(d);
  p.out_proj = Mat::identity(d);
  p.alpha_res = 1.0;
  std::vector<Vec> xs;
  for (index_t i = 0; i < n; ++i) xs.push_back(rng.normal_vec(d));
  const RnnEmulationReport rep = rnn_emulation_check(p, xs, {10.0, 25.0, 50.0});
  return json{{"name", "rnn"},
              {"pass", rep.monotone_decreasing && rep.points[2].max_rel_err < 1e-3},
              {"rel_err_b10", rep.points[0].max_rel_err},
              {"rel_err_b25", rep.points[1].max_rel_err},
              {"rel_err_b50", rep.points[2].max_rel_err}};
}

int cmd_theory_check(RunContext& ctx, const std::string& which) {
  json results = json::array();
  if (which == "simulate" || which == "all") results.push_back(theory_simulate(ctx.seed));
  if (which == "theorem1" || which == "all") results.push_back(theory_jacobian(ctx.seed));
  if (which == "rnn" || which == "all") results.push_back(theory_rnn(ctx.seed));
  bool pass = true;
  for (const json& r : results) pass = pass && r.at("pass").get<bool>();
  json doc{{"schema_version", 1}, {"results", results}, {"pass", pass}};
  std::cout << doc.dump(2) << "\n";
  auto os = ctx.open_output("theory_check.json");
  os << doc.dump(2) << "\n";
  ctx.result = doc;
  ctx.finalize(pass);
  return pass ? 0 : 1;
}

// ---- train-copy / eval ---------------------------------------------------------

json model_cfg_to_json(const ModelCfg& cfg) {
  return json{{"arch", cfg.arch == Arch::recurrent ? "rt" : "tf"},
              {"layers", cfg.layers},
              {"d", cfg.d},
              {"heads", cfg.heads},
              {"vocab", cfg.vocab},
              {"use_qk_norm", cfg.use_qk_norm},
              {"final_rms", cfg.final_rms},
              {"tied_embeddings", cfg.tied_embeddings},
              {"alpha_res", cfg.alpha_res()},
              {"logit_scale", 1.0},
              {"bias", bias_to_json(cfg.bias)}};
}

ModelCfg model_cfg_from_json(const json& j) {
  ModelCfg cfg;
  cfg.arch = j.value("arch", "rt") == std::string("tf") ? Arch::transformer : Arch::recurrent;
  cfg.layers = j.value("layers", 1);
  cfg.d = j.value("d", 64);
  cfg.heads = j.value("heads", 2);
  cfg.vocab = j.value("vocab", 16);
  cfg.use_qk_norm = j.value("use_qk_norm", true);
  cfg.final_rms = j.value("final_rms", true);
  cfg.tied_embeddings = j.value("tied_embeddings", false);
  if (j.contains("bias")) cfg.bias = bias_from_json(j.at("bias"));
  return cfg;
}

int cmd_train_copy(RunContext& ctx, const std::string& arch, index_t layers, index_t d,
                   int heads, index_t vocab, index_t prefix_len, index_t steps, double lr,
                   const std::string& metrics_out, index_t batch, index_t eval_every) {
  ModelCfg cfg;
  cfg.arch = arch == "tf" ? Arch::transformer : Arch::recurrent;
  cfg.layers = layers;
  cfg.d = d;
  cfg.heads = heads;
  cfg.vocab = vocab;

  CopyTaskCfg task;
  task.vocab = vocab;
  task.prefix_len = prefix_len;

  TrainCfg tc;
  tc.steps = steps;
  tc.batch_size = batch;
  tc.eval_every = eval_every;
  tc.seed = ctx.seed;
  tc.threads = ctx.threads;
  tc.adam.lr = lr;

  const TrainResult r = train(cfg, task, tc);

  std::ostringstream csv;
  csv << "step,loss,tok_acc,seq_acc\n";
  for (const StepMetrics& m : r.trace)
    csv << m.step << "," << m.loss << "," << m.tok_acc << "," << m.seq_acc << "\n";
  std::filesystem::create_directories(ctx.out_dir);
  const std::string metrics_path =
      metrics_out.empty() ? ctx.out_dir + "/metrics.csv" : metrics_out;
  {
    std::ofstream os(metrics_path);
    os << csv.str();
  }

  if (!r.diverged) {
    save_model_bundle(ctx.out_dir + "/model.rtw", r.params.layers, r.params.embed,
                      r.params.unembed);
    json sidecar{{"schema_version", 1},
                 {"model", model_cfg_to_json(cfg)},
                 {"task", {{"vocab", task.vocab}, {"prefix_len", task.prefix_len}}},
                 {"optimizer",
                  {{"lr", lr}, {"beta1", tc.adam.beta1}, {"beta2", tc.adam.beta2},
                   {"eps", tc.adam.eps}, {"schedule", "constant"}}},
                 {"seed", ctx.seed},
                 {"steps", steps}};
    std::ofstream os(ctx.out_dir + "/model.json");
    os << sidecar.dump(2) << "\n";
  }

  if (r.trace.empty()) {
    std::cout << "no evaluation points recorded\n";
  } else {
    const StepMetrics& last = r.trace.back();
    std::cout << "final: step " << last.step << " loss " << last.loss << " tok_acc "
              << last.tok_acc << " seq_acc " << last.seq_acc << "\n";
    ctx.result = {{"final_loss", last.loss},
                  {"final_tok_acc", last.tok_acc},
                  {"final_seq_acc", last.seq_acc},
                  {"metrics_csv", metrics_path},
                  {"diverged", r.diverged}};
  }
  if (r.diverged) {
    std::cout << "ABORT: " << r.diagnostic << "\n";
    ctx.result["diagnostic"] = r.diagnostic;
  }
  ctx.finalize(!r.diverged);
  return r.diverged ? 1 : 0;
}

int cmd_eval(RunContext& ctx, const std::string& weights, const std::string& config,
             index_t batches, index_t batch_size) {
  const ModelBundle bundle = load_model_bundle(weights);
  json sidecar;
  {
    std::ifstream is(config);
    if (!is) {
      std::cerr << "cannot open config sidecar: " << config << "\n";
      return 2;
    }
    is >> sidecar;
  }
  ModelCfg cfg = model_cfg_from_json(sidecar.at("model"));
  CopyTaskCfg task;
  task.vocab = sidecar.at("task").value("vocab", cfg.vocab);
  task.prefix_len = sidecar.at("task").value("prefix_len", 16);

  ModelParams params;
  params.layers = bundle.layers;
  for (LayerParams& lp : params.layers) {
    lp.num_heads = cfg.heads;
    lp.alpha_res = cfg.alpha_res();
    lp.use_qk_norm = cfg.use_qk_norm;
    lp.bias = cfg.bias;
  }
  params.embed = bundle.embed;
  params.unembed = bundle.unembed;

  const EvalMetrics em =
      evaluate(cfg, params, task, batches, batch_size, ctx.seed + 1, ctx.threads);
  std::cout << "masked_ce " << em.masked_ce << " tok_acc " << em.token_acc << " seq_acc "
            << em.seq_acc << " (" << em.masked_tokens << " tokens, " << em.sequences
            << " sequences)\n";
  ctx.result = {{"masked_ce", em.masked_ce},
                {"tok_acc", em.token_acc},
                {"seq_acc", em.seq_acc},
                {"masked_tokens", em.masked_tokens},
                {"sequences", em.sequences}};
  ctx.finalize(true);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Recurrent-layer attention laboratory"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  const std::string default_out = "./runs/" + timestamp_now();

  // equivalence
  auto* eq = app.add_subcommand("equivalence", "tiled vs naive forward equivalence check");
  index_t eq_n = 64, eq_d = 16;
  int eq_heads = 2, eq_cases = 50;
  bool eq_no_qk = false;
  double eq_tol = 1e-10;
  RunContext eq_ctx;
  eq->add_option("--n", eq_n, "max sequence length");
  eq->add_option("--d", eq_d, "embedding dimension");
  eq->add_option("--heads", eq_heads, "attention heads");
  eq->add_option("--cases", eq_cases, "random cases");
  eq->add_option("--tol", eq_tol, "max-error tolerance");
  eq->add_flag("--no-qk-norm", eq_no_qk, "disable query/key normalization");
  eq->add_option("--seed", eq_ctx.seed, "rng seed");
  eq->add_option("--threads", eq_ctx.threads, "worker cap");
  eq->add_option("--out-dir", eq_ctx.out_dir, "output directory")->default_val(default_out);

  // schedule dump/validate
  auto* sched = app.add_subcommand("schedule", "schedule inspection");
  sched->require_subcommand(1);
  auto* dump = sched->add_subcommand("dump", "emit the event list as CSV");
  index_t dump_n = 16, dump_cap = 0;
  RunContext dump_ctx;
  dump->add_option("--n", dump_n, "sequence length")->required();
  dump->add_option("--max-tile", dump_cap, "tile size cap (0 = none)");
  dump->add_option("--out-dir", dump_ctx.out_dir, "output directory")->default_val(default_out);
  auto* val = sched->add_subcommand("validate", "validate canonical schedules");
  index_t val_n = 512;
  RunContext val_ctx;
  val->add_option("--n-max", val_n, "validate all lengths up to this");
  val->add_option("--out-dir", val_ctx.out_dir, "output directory")->default_val(default_out);

  // io-report
  auto* io = app.add_subcommand("io-report", "memory-traffic and arithmetic-intensity table");
  std::string io_ns = "128,256,512,1024";
  index_t io_d = 64, io_bytes = 1, io_softmax = 4;
  std::string io_format = "csv";
  RunContext io_ctx;
  io->add_option("--n-list", io_ns, "comma-separated sequence lengths");
  io->add_option("--d", io_d, "embedding dimension");
  io->add_option("--format", io_format, "csv or json")
      ->check(CLI::IsMember({"csv", "json"}));
  io->add_option("--bytes-per-element", io_bytes, "scale element counts to bytes");
  io->add_option("--softmax-flops", io_softmax, "softmax flops counted per (q, kv) pair");
  io->add_option("--out-dir", io_ctx.out_dir, "output directory")->default_val(default_out);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "backward pass vs central finite differences");
  index_t gc_n = 6, gc_d = 6;
  int gc_heads = 1, gc_seeds = 20;
  double gc_tol = 1e-6, gc_h = 1e-5;
  bool gc_no_qk = false;
  std::string gc_arch = "rt";
  RunContext gc_ctx;
  gc->add_option("--n", gc_n, "sequence length");
  gc->add_option("--d", gc_d, "embedding dimension");
  gc->add_option("--heads", gc_heads, "attention heads");
  gc->add_option("--seeds", gc_seeds, "random instances");
  gc->add_option("--tol", gc_tol, "relative tolerance");
  gc->add_option("--fd-step", gc_h, "finite-difference step");
  gc->add_option("--arch", gc_arch, "rt or tf")->check(CLI::IsMember({"rt", "tf"}));
  gc->add_flag("--no-qk-norm", gc_no_qk, "disable query/key normalization");
  gc->add_option("--seed", gc_ctx.seed, "rng seed");
  gc->add_option("--out-dir", gc_ctx.out_dir, "output directory")->default_val(default_out);

  // theory-check
  auto* th = app.add_subcommand("theory-check", "executable representation/stability checks");
  std::string th_which = "all";
  RunContext th_ctx;
  th->add_option("--which", th_which, "simulate, theorem1, rnn or all")
      ->check(CLI::IsMember({"simulate", "theorem1", "rnn", "all"}));
  th->add_option("--seed", th_ctx.seed, "rng seed");
  th->add_option("--out-dir", th_ctx.out_dir, "output directory")->default_val(default_out);

  // train-copy
  auto* tr = app.add_subcommand("train-copy", "train on the copy task");
  std::string tr_arch = "rt", tr_out;
  index_t tr_layers = 1, tr_d = 64, tr_vocab = 16, tr_prefix = 16, tr_steps = 3000;
  index_t tr_batch = 32, tr_eval_every = 100;
  int tr_heads = 2;
  double tr_lr = 1e-3;
  RunContext tr_ctx;
  tr->add_option("--arch", tr_arch, "rt or tf")->check(CLI::IsMember({"rt", "tf"}));
  tr->add_option("--layers", tr_layers, "layer count");
  tr->add_option("--d", tr_d, "embedding dimension");
  tr->add_option("--heads", tr_heads, "attention heads");
  tr->add_option("--vocab", tr_vocab, "vocabulary size (marker included)");
  tr->add_option("--prefix-len", tr_prefix, "copy prefix length M");
  tr->add_option("--steps", tr_steps, "optimizer steps");
  tr->add_option("--lr", tr_lr, "learning rate");
  tr->add_option("--batch", tr_batch, "batch size");
  tr->add_option("--eval-every", tr_eval_every, "evaluation interval");
  tr->add_option("--out", tr_out, "metrics CSV path (default <out-dir>/metrics.csv)");
  tr->add_option("--seed", tr_ctx.seed, "rng seed");
  tr->add_option("--threads", tr_ctx.threads, "worker cap");
  tr->add_option("--out-dir", tr_ctx.out_dir, "output directory")->default_val(default_out);

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the copy task");
  std::string ev_weights, ev_config;
  index_t ev_batches = 4, ev_batch = 64;
  RunContext ev_ctx;
  ev->add_option("--weights", ev_weights, "RTW1 model bundle")->required();
  ev->add_option("--config", ev_config, "JSON config sidecar")->required();
  ev->add_option("--batches", ev_batches, "evaluation batches");
  ev->add_option("--batch", ev_batch, "evaluation batch size");
  ev->add_option("--seed", ev_ctx.seed, "rng seed");
  ev->add_option("--threads", ev_ctx.threads, "worker cap");
  ev->add_option("--out-dir", ev_ctx.out_dir, "output directory")->default_val(default_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (eq->parsed()) {
      eq_ctx.command = "equivalence";
      eq_ctx.config = {{"n", eq_n}, {"d", eq_d}, {"heads", eq_heads}, {"cases", eq_cases},
                       {"qk_norm", !eq_no_qk}, {"tol", eq_tol}, {"logit_scale", 1.0}};
      return cmd_equivalence(eq_ctx, eq_n, eq_d, eq_heads, eq_cases, !eq_no_qk, eq_tol);
    }
    if (dump->parsed()) {
      dump_ctx.command = "schedule dump";
      dump_ctx.config = {{"n", dump_n}, {"max_tile", dump_cap}};
      return cmd_schedule_dump(dump_ctx, dump_n, dump_cap);
    }
    if (val->parsed()) {
      val_ctx.command = "schedule validate";
      val_ctx.config = {{"n_max", val_n}};
      return cmd_schedule_validate(val_ctx, val_n);
    }
    if (io->parsed()) {
      io_ctx.command = "io-report";
      io_ctx.config = {{"n_list", io_ns}, {"d", io_d}, {"format", io_format},
                       {"bytes_per_element", io_bytes}, {"softmax_flops", io_softmax}};
      return cmd_io_report(io_ctx, io_ns, io_d, io_format, io_bytes, io_softmax);
    }
    if (gc->parsed()) {
      gc_ctx.command = "gradcheck";
      gc_ctx.config = {{"n", gc_n}, {"d", gc_d}, {"heads", gc_heads}, {"seeds", gc_seeds},
                       {"tol", gc_tol}, {"h", gc_h}, {"qk_norm", !gc_no_qk},
                       {"arch", gc_arch}};
      return cmd_gradcheck(gc_ctx, gc_n, gc_d, gc_heads, gc_seeds, gc_tol, gc_h, !gc_no_qk,
                           gc_arch);
    }
    if (th->parsed()) {
      th_ctx.command = "theory-check";
      th_ctx.config = {{"which", th_which}};
      return cmd_theory_check(th_ctx, th_which);
    }
    if (tr->parsed()) {
      tr_ctx.command = "train-copy";
      tr_ctx.config = {{"arch", tr_arch}, {"layers", tr_layers}, {"d", tr_d},
                       {"heads", tr_heads}, {"vocab", tr_vocab}, {"prefix_len", tr_prefix},
                       {"steps", tr_steps}, {"lr", tr_lr}, {"batch", tr_batch},
                       {"eval_every", tr_eval_every}};
      return cmd_train_copy(tr_ctx, tr_arch, tr_layers, tr_d, tr_heads, tr_vocab, tr_prefix,
                            tr_steps, tr_lr, tr_out, tr_batch, tr_eval_every);
    }
    if (ev->parsed()) {
      ev_ctx.command = "eval";
      ev_ctx.config = {{"weights", ev_weights}, {"config", ev_config},
                       {"batches", ev_batches}, {"batch", ev_batch}};
      return cmd_eval(ev_ctx, ev_weights, ev_config, ev_batches, ev_batch);
    }
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 2;
}
