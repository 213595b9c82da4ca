#pragma once

// Optimisation loop: Adam on label-smoothed cross-entropy (optionally preceded
// by the anti-unigram objective), greedy-BLEU early stopping, and probes that
// compare the model's next-token distributions with the training unigram.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "unibias/corpus.hpp"
#include "unibias/model.hpp"

namespace unibias {

// Raised on non-finite losses or gradients; the message names the culprit.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RegularizerConfig {
  double lambda = 0.5;
  std::size_t switch_step = 0;  // anti-unigram objective for updates [0, switch_step)
};

struct TrainingConfig {
  double learning_rate = 2e-3;  // peak, reached at the end of warmup
  std::size_t warmup_steps = 400;
  double beta1 = 0.9;
  double beta2 = 0.997;
  double adam_eps = 1e-9;
  std::size_t batch_tokens = 1024;  // target tokens per batch
  std::size_t max_steps = 3000;
  std::size_t eval_interval = 250;
  std::size_t patience = 0;  // evaluations without improvement before stopping; 0 = never
  double label_smoothing = 0.1;
  std::optional<RegularizerConfig> regularizer;
  std::size_t probe_interval = 100;
  std::size_t probe_positions = 512;
  std::size_t valid_sentences = 0;  // validation subset used for BLEU; 0 = all
  std::uint64_t seed = 1;

  void validate() const;  // throws ConfigError
  // Every field except max_steps, so a run may be resumed with a later horizon.
  std::string fingerprint() const;
};

// lr_t = lr * min(t / warmup, sqrt(warmup / t)) for update t >= 1; constant
// lr when warmup is 0.
double learning_rate_at(const TrainingConfig& config, std::size_t t);

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::size_t step = 0;
};

// One bias-corrected Adam update of every parameter from its accumulated
// gradient (absent gradients count as zero). Throws TrainingError naming the
// first parameter with a non-finite gradient, before anything is modified.
void adam_step(std::span<Tensor> params, AdamState& state, double lr, double beta1, double beta2, double eps);

// Training objective of one batch: the anti-unigram loss while
// `step` < switch_step, label-smoothed cross-entropy afterwards.
Tensor batch_loss(const Model& model, const Batch& batch, const TrainingConfig& config,
                  const UnigramDistribution& unigram, std::size_t step, Rng* dropout_rng);

// Pairs grouped into batches of at most `batch_tokens` target tokens (a
// longer pair gets its own batch). Pairs are shuffled, stably sorted by
// length, cut into batches and the batch order shuffled again.
std::vector<std::vector<std::size_t>> make_batches(const ParallelCorpus& corpus, std::size_t batch_tokens,
                                                   std::uint64_t seed);

struct DivergenceRecord {
  std::size_t step = 0;
  double kl_unigram = 0.0, kl_uniform = 0.0, xent_empirical = 0.0;
  double kl_unigram_se = 0.0, kl_uniform_se = 0.0, xent_empirical_se = 0.0;
  bool operator==(const DivergenceRecord&) const = default;
};

struct BiasDriftRecord {
  std::size_t step = 0;
  double kl_unigram = 0.0;  // KL(softmax(b) || u)
  double norm = 0.0;        // ||b||
  bool operator==(const BiasDriftRecord&) const = default;
};

struct ProbePosition {
  std::size_t pair = 0;
  std::size_t position = 0;  // index into the pair's target
};

// `count` distinct target positions drawn uniformly from the corpus (all of
// them when the corpus has fewer), ordered by (pair, position).
std::vector<ProbePosition> choose_probe_positions(const ParallelCorpus& corpus, std::size_t count,
                                                  std::uint64_t seed);

// Means (and standard errors) over the probed positions of KL(p || u),
// KL(p || uniform) and -log p(target), p the model's next-token distribution.
DivergenceRecord probe_divergences(const Model& model, const ParallelCorpus& corpus,
                                   std::span<const ProbePosition> positions, const UnigramDistribution& unigram);
// Same statistics from explicit next-token distributions and targets.
DivergenceRecord divergence_stats(std::span<const std::vector<double>> dists, std::span<const int> targets,
                                  const UnigramDistribution& unigram);

// Empty for a model without a bias.
std::optional<BiasDriftRecord> probe_bias_drift(const Model& model, const UnigramDistribution& unigram);

struct LossPoint {
  std::size_t step = 0;
  double loss = 0.0;
  bool operator==(const LossPoint&) const = default;
};
struct ValidationPoint {
  std::size_t step = 0;
  double bleu = 0.0;
  bool operator==(const ValidationPoint&) const = default;
};

struct TrainingLog {
  std::vector<LossPoint> losses;          // training loss of update `step`
  std::vector<ValidationPoint> validation;
  std::vector<DivergenceRecord> divergences;
  std::vector<BiasDriftRecord> bias_drift;
  std::size_t best_step = 0;
  std::optional<double> best_bleu;  // empty until the first evaluation
  std::size_t final_step = 0;
  bool stopped_early = false;
  std::string abort_reason;  // set when training stopped on a TrainingError

  // Line records `step,kind,field=value,...` with round-trip precision.
  std::string serialize() const;
  static TrainingLog parse(const std::string& text);
  bool operator==(const TrainingLog&) const = default;
};

struct TrainOptions {
  // When set: best.ckpt, state.bin (for resume) and log.txt are written here.
  std::filesystem::path checkpoint_dir;
  bool resume = false;  // continue from checkpoint_dir/state.bin when present
};

// Runs the loop and leaves `model` holding the best-validation parameters.
// Validation BLEU (greedy) is computed every eval_interval updates and after
// the last one; probes run at step 0 and every probe_interval updates. On a
// TrainingError the log and last state are saved before rethrowing.
TrainingLog train(Model& model, const ParallelCorpus& train_set, const ParallelCorpus& valid_set,
                  const UnigramDistribution& unigram, const TrainingConfig& config, const TrainOptions& options = {});

// Greedy-decoding corpus BLEU on (a prefix of) `corpus`, EOS stripped.
double validation_bleu(const Model& model, const ParallelCorpus& corpus, std::size_t limit = 0);

}  // namespace unibias
