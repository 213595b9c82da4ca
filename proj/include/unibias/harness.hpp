#pragma once

// Experiment runner: datasets on disk, declarative sweeps over bias-init
// strategies and seeds, per-run manifests, CSV aggregation and SVG plots.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "unibias/corpus.hpp"
#include "unibias/gradcheck.hpp"
#include "unibias/metrics.hpp"
#include "unibias/model.hpp"
#include "unibias/training.hpp"

namespace unibias {

// ------------------------------------------------------------------ Datasets

// A dataset directory holds {train,valid,test}.{src,tgt} (one sentence per
// line), vocab.tsv and, when present, bpe.txt. Without bpe.txt lines are
// whitespace-separated vocabulary tokens.
struct Dataset {
  std::string name;
  Vocabulary vocab;
  std::optional<BpeModel> bpe;
  ParallelCorpus train, valid, test;
  std::filesystem::path vocab_path;  // empty for in-memory datasets

  std::vector<int> encode(std::string_view line) const;  // unknown pieces -> UNK, no EOS
  std::string decode(std::span<const int> ids) const;    // trailing EOS ignored
  // Source/target files read with this dataset's tokenizer (targets get EOS).
  ParallelCorpus read_pairs(const std::filesystem::path& src, const std::filesystem::path& tgt, Split split) const;
};

// vocab.tsv (and bpe.txt) only; the splits stay empty.
Dataset load_tokenizer(const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir, std::string name = {});
Dataset dataset_from_task(const SyntheticTask& task, std::string name);
void write_dataset(const Dataset& data, const std::filesystem::path& dir);

// Counts of a vocab.tsv-style file mapped onto `vocab` by token string
// (tokens absent from `vocab` are dropped), normalised with add-k smoothing.
UnigramDistribution external_unigram(const std::filesystem::path& counts_file, const Vocabulary& vocab,
                                     double smoothing = 1.0);

// ------------------------------------------------------------ Specification

// "zero", "none", "log_unigram" or "external_log_unigram", optionally
// suffixed ":anti_unigram".
struct Strategy {
  std::string name;
  BiasMode mode = BiasMode::Zero;
  bool anti_unigram = false;
};
Strategy parse_strategy(std::string_view name);  // throws ConfigError

struct DatasetSpec {
  std::string name;
  std::optional<SyntheticSpec> synthetic;
  std::filesystem::path path;  // dataset directory when not synthetic
};

struct ExperimentSpec {
  std::string name = "experiment";
  std::vector<DatasetSpec> datasets;
  std::vector<Strategy> strategies;
  std::size_t seeds = 5;
  std::uint64_t root_seed = 1;
  ModelConfig model;  // vocab_size comes from each dataset
  TrainingConfig training;  // seed is replaced per run
  std::vector<std::string> metrics{"bleu", "chrf", "alc", "freq_slope", "freq_slope_bias"};
  double alc_horizon = 0.4;  // fraction of max_steps
  std::size_t beam_size = 5;
  std::size_t num_bins = 10;
  double anti_unigram_lambda = 0.5;
  double anti_unigram_switch = 0.2;  // fraction of max_steps
  double unigram_smoothing = 1.0;
  bool scale_baseline = false;
  std::filesystem::path external_unigram;  // counts file for external_log_unigram

  void validate() const;  // throws ConfigError
  // Key=value text with [sections], every field written out.
  std::string to_ini() const;
};

ExperimentSpec parse_experiment(const std::string& text);  // throws ConfigError
ExperimentSpec load_experiment(const std::filesystem::path& path);

inline const std::vector<std::string>& known_metrics() {
  static const std::vector<std::string> names{"bleu", "chrf", "alc", "freq_slope", "freq_slope_bias"};
  return names;
}

// Per-run seed from (root, strategy, seed index) only, so adding strategies
// or datasets leaves every other run's stream unchanged.
std::uint64_t run_seed(std::uint64_t root, std::string_view strategy, std::size_t seed_index);

// ------------------------------------------------------------------- Sweeps

struct RunResult {
  std::string dataset, strategy;
  std::size_t seed_index = 0;
  std::uint64_t seed = 0;
  std::map<std::string, double> metrics;
  double step0_bleu = 0.0;
  double train_seconds = 0.0;  // wall time of the last (re)run; not in any CSV
  TrainingLog log;
  std::string error;  // non-empty when the run failed

  bool ok() const { return error.empty(); }
  std::string id() const;  // dataset/strategy/seedK
};

struct MetricReport {
  std::vector<std::string> datasets, strategies, metrics;  // spec order
  std::size_t seeds = 0;
  std::vector<RunResult> runs;  // (dataset, strategy, seed) order; failed runs kept

  const RunResult* find(std::string_view dataset, std::string_view strategy, std::size_t seed) const;
  // Values of one metric over the successful seeds of a cell, seed order.
  std::vector<double> values(std::string_view dataset, std::string_view strategy, std::string_view metric) const;
  // Mean and standard error, independent of seed order.
  Summary summary(std::string_view dataset, std::string_view strategy, std::string_view metric) const;

  // `dataset,strategy,seed,metric,value`; per cell and metric, rows for each
  // seed then seed=mean and seed=stderr. Failed runs give value `missing`.
  std::string results_csv() const;
  // `run_id,step,series,value`.
  std::string curves_csv() const;
};

// Validation-BLEU learning curve of a run (step 0 included).
LearningCurve validation_curve(const RunResult& run);

struct SweepOptions {
  std::ostream* progress = nullptr;  // one line per run
};

// Trains every (dataset, strategy, seed) cell under out_dir/runs/, reusing
// runs whose manifest matches, then writes experiment.ini, results.csv and
// curves.csv. Failed runs are recorded and skipped.
MetricReport run_sweep(const ExperimentSpec& spec, const std::filesystem::path& out_dir,
                       const SweepOptions& options = {});

// Rebuilds the report of a finished sweep from its manifests.
MetricReport load_report(const std::filesystem::path& out_dir);

// One cell: trains into run_dir (resuming when possible) and evaluates the
// best checkpoint.
RunResult run_one(const ExperimentSpec& spec, const Dataset& data, const Strategy& strategy, std::size_t seed_index,
                  const std::filesystem::path& run_dir);

// divergence_<run>.svg per run, bars_<metric>.svg per metric and alc.svg,
// each beside a CSV holding every plotted number.
void emit_plots(const MetricReport& report, const std::filesystem::path& dir);

// --------------------------------------------------------------- Evaluation

struct EvalScores {
  double bleu = 0.0;
  double chrf = 0.0;
  std::size_t sentences = 0;
};

// Beam search, then BLEU on whitespace tokens of the decoded text and chrF.
EvalScores evaluate_corpus(const Model& model, const Dataset& tokenizer, const ParallelCorpus& corpus,
                           std::size_t beam_size = 5);

// Scores a checkpoint on an out-of-domain source/target pair of files,
// tokenised with the dataset at `data_dir`, whose vocabulary must be the one
// the checkpoint was trained with.
EvalScores evaluate_ood(const std::filesystem::path& checkpoint, const std::filesystem::path& data_dir,
                        const std::filesystem::path& src, const std::filesystem::path& tgt,
                        std::size_t beam_size = 5);

// Throws DataError when the checkpoint's recorded vocabulary differs.
void check_vocabulary(const Model& model, const Dataset& data, const std::filesystem::path& checkpoint);

// ---------------------------------------------------------------- Gradcheck

struct NamedGradcheck {
  std::string name;
  GradcheckReport report;
};

// Random instances of every differentiable op plus the full training loss of
// a 2-sentence batch through a 2-layer, d = 32 model.
std::vector<NamedGradcheck> gradcheck_suite(std::uint64_t seed = 1, std::size_t trials_per_op = 10);

}  // namespace unibias
