#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rt/autograd.hpp"
#include "rt/layers.hpp"
#include "rt/rng.hpp"

namespace rt {

// ---- Copy task ---------------------------------------------------------------
//
// Sequence = M uniform random tokens from {1..V-1}, the marker token 0, then
// the same M tokens again. The loss mask selects exactly the M repeated
// tokens. Unsolvable by any fixed-size-state model for unbounded M.
struct CopyTaskCfg {
  index_t vocab = 16;       // includes the marker
  index_t prefix_len = 16;  // M
  std::uint64_t seed = 0;

  index_t marker_token() const { return 0; }
  index_t seq_len() const { return 2 * prefix_len + 1; }
};

struct TokenBatch {
  index_t batch = 0;
  index_t seq_len = 0;
  std::vector<index_t> tokens;       // [batch][seq_len], row-major
  std::vector<std::uint8_t> mask;    // loss mask, same layout

  index_t token(index_t b, index_t t) const { return tokens[static_cast<std::size_t>(b * seq_len + t)]; }
  bool masked(index_t b, index_t t) const { return mask[static_cast<std::size_t>(b * seq_len + t)] != 0; }
};

// Deterministic in (cfg.seed, stream); use one stream per training step.
TokenBatch gen_copy_batch(const CopyTaskCfg& cfg, index_t batch_size, std::uint64_t stream = 0);

// ---- Model -------------------------------------------------------------------

enum class Arch { transformer, recurrent };

struct ModelCfg {
  Arch arch = Arch::recurrent;
  index_t layers = 1;
  index_t d = 64;
  int heads = 2;
  index_t vocab = 16;

  bool use_qk_norm = true;
  bool final_rms = true;
  bool tied_embeddings = false;
  bool use_tiled_forward = false;  // forward-only; training uses the naive path
  bool orthonormal_v = false;      // orthonormal value-projection init
  BiasSpec bias{BiasKind::alibi, 1.0, 0.0, 8.0};

  index_t mlp_hidden() const { return 4 * d; }
  double alpha_res() const;
};

struct ModelParams {
  std::vector<LayerParams> layers;
  Mat embed;    // vocab x d
  Mat unembed;  // vocab x d (rows are output token directions); zero-initialized
};

ModelParams init_model(const ModelCfg& cfg, Rng& rng);

struct ModelGrads {
  std::vector<LayerParamGrads> layers;
  Mat embed;
  Mat unembed;
};

ModelGrads zero_model_grads(const ModelParams& params);
void accumulate_model_grads(ModelGrads& into, const ModelGrads& from);
void scale_model_grads(ModelGrads& g, double s);

// Forward over one sequence: embed -> layers -> optional final RMS -> logits.
struct SeqForward {
  std::vector<LayerIO> layer_ios;
  std::vector<Vec> hidden;   // final-layer outputs (pre final RMS)
  std::vector<Vec> normed;   // after final RMS (== hidden when disabled)
  std::vector<Vec> logits;   // [T][vocab], logits[t] scores token t+1
};

SeqForward model_forward(const ModelCfg& cfg, const ModelParams& params,
                         const std::vector<index_t>& tokens);

// Mean masked cross-entropy of next-token prediction and its logit gradients.
// mask[t] marks target positions: the logits at t-1 are scored against
// tokens[t]. d_logits is zero wherever the shifted mask is off.
struct OutputLoss {
  double loss = 0.0;
  index_t masked_tokens = 0;
  std::vector<Vec> d_logits;
};

OutputLoss masked_cross_entropy(const std::vector<Vec>& logits,
                                const std::vector<index_t>& tokens,
                                const std::vector<std::uint8_t>& mask);

// Backward through unembed, final RMS, the layer stack and the embedding.
ModelGrads model_backward(const ModelCfg& cfg, const ModelParams& params,
                          const std::vector<index_t>& tokens, const SeqForward& fwd,
                          const std::vector<Vec>& d_logits);

// Greedy-decoding metrics for one sequence: argmax token accuracy over the
// masked positions (ties broken toward the lowest token index), the
// exact-match flag and the summed cross-entropy.
struct SeqEval {
  index_t correct = 0;
  index_t total = 0;
  bool all_correct = true;
  double ce_sum = 0.0;
};

SeqEval sequence_metrics(const std::vector<Vec>& logits, const std::vector<index_t>& tokens,
                         const std::vector<std::uint8_t>& mask);

// ---- Training ---------------------------------------------------------------

struct AdamCfg {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
};

struct AdamState {
  ModelGrads m;
  ModelGrads v;
  index_t step = 0;
};

void adam_step(ModelParams& params, const ModelGrads& grads, AdamState& state,
               const AdamCfg& cfg);

struct TrainCfg {
  index_t steps = 3000;
  index_t batch_size = 32;
  index_t eval_every = 100;
  index_t eval_batches = 2;
  index_t eval_batch_size = 64;
  std::uint64_t seed = 0;
  int threads = 4;
  AdamCfg adam;
  // Abort when loss exceeds 10 ln(V) this many consecutive steps.
  index_t divergence_patience = 50;
};

// One evaluation snapshot; loss is the held-out masked cross-entropy, so a
// zero learning rate produces a bit-constant trace.
struct StepMetrics {
  index_t step = 0;
  double loss = 0.0;
  double tok_acc = 0.0;
  double seq_acc = 0.0;
};

struct EvalMetrics {
  double masked_ce = 0.0;
  double token_acc = 0.0;
  double seq_acc = 0.0;
  index_t masked_tokens = 0;
  index_t sequences = 0;
};

struct TrainResult {
  std::vector<StepMetrics> trace;
  ModelParams params;
  bool diverged = false;
  std::string diagnostic;
};

EvalMetrics evaluate(const ModelCfg& cfg, const ModelParams& params, const CopyTaskCfg& task,
                     index_t n_batches, index_t batch_size, std::uint64_t eval_seed,
                     int threads = 1);

TrainResult train(const ModelCfg& cfg, const CopyTaskCfg& task, const TrainCfg& train_cfg);

// Batch loss + summed gradients, parallel over sequences; the reduction order
// is fixed so results do not depend on the thread count.
struct BatchResult {
  double loss = 0.0;
  index_t masked_tokens = 0;
  ModelGrads grads;
};

BatchResult batch_loss_and_grads(const ModelCfg& cfg, const ModelParams& params,
                                 const TokenBatch& batch, int threads);

}  // namespace rt
