#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "unibias/harness.hpp"

using namespace unibias;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("unibias_harness_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::size_t count_lines(const std::string& text) { return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')); }

const char* kTinyConfig = R"([experiment]
name = tiny
strategies = zero, log_unigram
seeds = 2
root_seed = 7

[dataset.copy]
type = synthetic
task = copy
vocab_size = 20
pairs = 200
valid_pairs = 20
test_pairs = 20
min_len = 2
max_len = 5

[model]
layers = 1
heads = 2
d_model = 16
d_ffn = 32
max_len = 24

[training]
max_steps = 20
warmup_steps = 10
batch_tokens = 128
eval_interval = 10
probe_interval = 10
probe_positions = 32
)";

SyntheticSpec small_task(TaskKind kind, std::size_t pairs = 300) {
  SyntheticSpec s;
  s.kind = kind;
  s.vocab_size = 20;
  s.pairs = pairs;
  s.valid_pairs = 30;
  s.test_pairs = 40;
  s.min_len = 2;
  s.max_len = 5;
  s.seed = 5;
  return s;
}

// Report with hand-set metric values and no training.
MetricReport fake_report(std::size_t strategies, std::size_t seeds) {
  MetricReport r;
  r.datasets = {"d"};
  r.metrics = {"bleu", "alc"};
  r.seeds = seeds;
  for (std::size_t s = 0; s < strategies; ++s) {
    r.strategies.push_back(s == 0 ? "zero" : "log_unigram");
    for (std::size_t k = 0; k < seeds; ++k) {
      RunResult run;
      run.dataset = "d";
      run.strategy = r.strategies.back();
      run.seed_index = k;
      run.metrics = {{"bleu", 10.0 * static_cast<double>(s) + static_cast<double>(k)}, {"alc", 1.0}};
      run.log.divergences = {{0, 1.0, 0.5, 3.0}, {10, 0.4, 0.9, 2.0}};
      r.runs.push_back(run);
    }
  }
  return r;
}

}  // namespace

TEST(Strategy, ParsesModesAndSuffix) {
  EXPECT_EQ(parse_strategy("zero").mode, BiasMode::Zero);
  EXPECT_EQ(parse_strategy("none").mode, BiasMode::None);
  EXPECT_EQ(parse_strategy("external_log_unigram").mode, BiasMode::ExternalLogUnigram);
  const auto s = parse_strategy("log_unigram:anti_unigram");
  EXPECT_EQ(s.mode, BiasMode::LogUnigram);
  EXPECT_TRUE(s.anti_unigram);
  EXPECT_EQ(s.name, "log_unigram:anti_unigram");
  EXPECT_THROW(parse_strategy("ones"), ConfigError);
  EXPECT_THROW(parse_strategy("zero:dropout"), ConfigError);
}

TEST(Spec, ParsesAndRoundTripsThroughIni) {
  const auto spec = parse_experiment(kTinyConfig);
  EXPECT_EQ(spec.name, "tiny");
  ASSERT_EQ(spec.strategies.size(), 2u);
  EXPECT_EQ(spec.seeds, 2u);
  EXPECT_EQ(spec.root_seed, 7u);
  ASSERT_EQ(spec.datasets.size(), 1u);
  ASSERT_TRUE(spec.datasets[0].synthetic.has_value());
  EXPECT_EQ(spec.datasets[0].synthetic->kind, TaskKind::Copy);
  EXPECT_EQ(spec.model.d_model, 16u);
  EXPECT_EQ(spec.training.max_steps, 20u);
  EXPECT_EQ(spec.training.learning_rate, TrainingConfig{}.learning_rate);  // default kept
  EXPECT_EQ(spec.alc_horizon, 0.4);
  EXPECT_EQ(parse_experiment(spec.to_ini()).to_ini(), spec.to_ini());
  // Defaults are echoed.
  EXPECT_NE(spec.to_ini().find("label_smoothing = 0.10000000000000001"), std::string::npos);
}

TEST(Spec, RejectsBadConfigs) {
  const std::string base = kTinyConfig;
  EXPECT_THROW(parse_experiment(base + "\n[model]\nwidth = 3\n"), ConfigError);  // duplicate section
  EXPECT_THROW(parse_experiment(std::regex_replace(base, std::regex("d_ffn"), "d_fnn")), ConfigError);
  EXPECT_THROW(parse_experiment(std::regex_replace(base, std::regex("seeds = 2"), "seeds = 0")), ConfigError);
  EXPECT_THROW(parse_experiment(std::regex_replace(base, std::regex("seeds = 2"), "seeds = -2")), ConfigError);
  EXPECT_THROW(parse_experiment(std::regex_replace(base, std::regex("strategies = zero, log_unigram"), "strategies =")),
               ConfigError);
  EXPECT_THROW(parse_experiment(std::regex_replace(base, std::regex("task = copy"), "task = sort")), ConfigError);
  EXPECT_THROW(parse_experiment(base + "\n[optimizer]\nlr = 1\n"), ConfigError);
  EXPECT_THROW(parse_experiment("[model]\nlayers = 1\n"), ConfigError);
  EXPECT_THROW(parse_experiment(std::regex_replace(base, std::regex("log_unigram"), "external_log_unigram")),
               ConfigError);  // no external_unigram file given
}

TEST(Seeds, DependOnlyOnStrategyAndIndex) {
  EXPECT_EQ(run_seed(1, "zero", 0), run_seed(1, "zero", 0));
  EXPECT_NE(run_seed(1, "zero", 0), run_seed(1, "zero", 1));
  EXPECT_NE(run_seed(1, "zero", 0), run_seed(1, "log_unigram", 0));
  EXPECT_NE(run_seed(1, "zero", 0), run_seed(2, "zero", 0));
}

TEST(Report, SummaryIsSampleStandardError) {
  MetricReport r;
  r.datasets = {"d"};
  r.strategies = {"zero"};
  r.metrics = {"bleu"};
  r.seeds = 3;
  for (std::size_t k = 0; k < 3; ++k) {
    RunResult run;
    run.dataset = "d";
    run.strategy = "zero";
    run.seed_index = k;
    run.metrics["bleu"] = static_cast<double>(k + 1);
    r.runs.push_back(run);
  }
  const auto s = r.summary("d", "zero", "bleu");
  EXPECT_DOUBLE_EQ(s.mean, 2.0);
  EXPECT_NEAR(s.stderr_mean, 1.0 / std::sqrt(3.0), 1e-15);
}

TEST(Report, AggregationIgnoresSeedOrder) {
  // Values whose floating-point sum depends on order.
  const double v[] = {1e16, 1.0, -1e16, 3.0, 0.1};
  MetricReport a, b;
  for (auto* r : {&a, &b}) {
    r->datasets = {"d"};
    r->strategies = {"zero"};
    r->metrics = {"bleu"};
    r->seeds = 5;
  }
  for (std::size_t k = 0; k < 5; ++k) {
    RunResult run;
    run.dataset = "d";
    run.strategy = "zero";
    run.seed_index = k;
    run.metrics["bleu"] = v[k];
    a.runs.push_back(run);
    run.seed_index = 4 - k;
    b.runs.push_back(run);
  }
  EXPECT_EQ(a.summary("d", "zero", "bleu").mean, b.summary("d", "zero", "bleu").mean);
  EXPECT_EQ(a.summary("d", "zero", "bleu").stderr_mean, b.summary("d", "zero", "bleu").stderr_mean);
}

TEST(Report, ResultsCsvLayout) {
  const auto r = fake_report(2, 5);
  const auto csv = r.results_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "dataset,strategy,seed,metric,value");
  // 2 strategies x (5 seeds + mean + stderr) x 2 metrics, plus the header.
  EXPECT_EQ(count_lines(csv), 1u + 2 * 7 * 2);
  EXPECT_NE(csv.find("d,zero,mean,bleu,2\n"), std::string::npos);
  EXPECT_NE(csv.find("d,log_unigram,mean,bleu,12\n"), std::string::npos);
}

TEST(Plots, BarCsvHasDataAndAggregateRows) {
  const auto dir = fresh_dir("bars");
  emit_plots(fake_report(2, 5), dir);
  const auto csv = slurp(dir / "bars_bleu.csv");
  EXPECT_EQ(count_lines(csv), 1u + 10 + 2);
  EXPECT_TRUE(fs::exists(dir / "bars_bleu.svg"));
  EXPECT_TRUE(fs::exists(dir / "alc.svg"));
  EXPECT_TRUE(fs::exists(dir / "alc.csv"));
}

TEST(Plots, SingleStrategyGivesOneGroupAndTwoPointPolylines) {
  const auto dir = fresh_dir("single");
  emit_plots(fake_report(1, 1), dir);
  const auto bars = slurp(dir / "bars_bleu.svg");
  std::size_t rects = 0;
  for (auto pos = bars.find("<rect x="); pos != std::string::npos; pos = bars.find("<rect x=", pos + 1)) ++rects;
  EXPECT_EQ(rects, 2u);  // one bar and one legend swatch
  const auto line = slurp(dir / "divergence_d_zero_seed0.svg");
  const std::regex poly("points=\"([^\"]*)\"");
  std::size_t polylines = 0;
  for (std::sregex_iterator it(line.begin(), line.end(), poly), end; it != end; ++it) {
    ++polylines;
    std::istringstream pts((*it)[1].str());
    std::size_t vertices = 0;
    for (std::string p; pts >> p;) ++vertices;
    EXPECT_EQ(vertices, 2u);
  }
  EXPECT_EQ(polylines, 3u);
  // Every number printed in the plot is in its CSV.
  const auto csv = slurp(dir / "divergence_d_zero_seed0.csv");
  const std::regex label(">(-?[0-9.e+-]+)</text>");
  for (std::sregex_iterator it(line.begin(), line.end(), label), end; it != end; ++it)
    EXPECT_NE(csv.find((*it)[1].str()), std::string::npos) << (*it)[1].str();
}

TEST(Plots, EmptyReportRejected) { EXPECT_THROW(emit_plots(MetricReport{}, fresh_dir("empty")), DataError); }

TEST(Dataset, WriteLoadRoundTrip) {
  const auto task = generate_synthetic_task(small_task(TaskKind::Substitute));
  const auto data = dataset_from_task(task, "sub");
  const auto dir = fresh_dir("dataset");
  write_dataset(data, dir);
  const auto back = load_dataset(dir, "sub");
  EXPECT_EQ(back.vocab.tokens(), data.vocab.tokens());
  EXPECT_EQ(back.vocab.counts(), data.vocab.counts());
  for (auto [a, b] : {std::pair{&back.train, &data.train}, {&back.valid, &data.valid}, {&back.test, &data.test}}) {
    ASSERT_EQ(a->size(), b->size());
    for (std::size_t i = 0; i < a->size(); ++i) {
      EXPECT_EQ(a->pairs[i].source, b->pairs[i].source);
      EXPECT_EQ(a->pairs[i].target, b->pairs[i].target);
    }
  }
}

TEST(Dataset, MismatchedOrEmptyFilesRejected) {
  const auto dir = fresh_dir("bad_files");
  write_dataset(dataset_from_task(generate_synthetic_task(small_task(TaskKind::Copy)), "c"), dir);
  const auto tok = load_tokenizer(dir);
  write_lines(dir / "empty.src", std::vector<std::string>{});
  write_lines(dir / "empty.tgt", std::vector<std::string>{});
  EXPECT_THROW(tok.read_pairs(dir / "empty.src", dir / "empty.tgt", Split::Test), DataError);
  EXPECT_THROW(tok.read_pairs(dir / "train.src", dir / "test.tgt", Split::Test), DataError);
}

TEST(Dataset, UnknownWordsBecomeUnk) {
  const auto data = dataset_from_task(generate_synthetic_task(small_task(TaskKind::Copy)), "c");
  EXPECT_EQ(data.encode("w0 zzz w1"), (std::vector<int>{4, kUnkId, 5}));
  EXPECT_EQ(data.decode(std::vector<int>{4, 5, kEosId}), "w0 w1");
}

TEST(ExternalUnigram, MapsCountsByToken) {
  const auto dir = fresh_dir("external");
  fs::create_directories(dir);
  Vocabulary ext;
  ext.add_count(ext.add("b"), 6);
  ext.add_count(ext.add("zz"), 100);
  ext.add_count(ext.add("a"), 2);
  ext.save(dir / "ext.tsv");
  Vocabulary v;
  v.add("a");
  v.add("b");
  v.add("c");
  const auto u = external_unigram(dir / "ext.tsv", v, 0.0);
  ASSERT_EQ(u.size(), 7u);
  EXPECT_DOUBLE_EQ(u.probs[4], 0.25);
  EXPECT_DOUBLE_EQ(u.probs[5], 0.75);
  EXPECT_DOUBLE_EQ(u.probs[6], 0.0);
}

TEST(Sweep, ZeroStepRunGivesStepZeroMetrics) {
  auto spec = parse_experiment(kTinyConfig);
  spec.strategies = {parse_strategy("zero")};
  spec.seeds = 1;
  spec.training.max_steps = 0;
  const auto dir = fresh_dir("zero_steps");
  const auto report = run_sweep(spec, dir);
  ASSERT_EQ(report.runs.size(), 1u);
  const auto& r = report.runs[0];
  ASSERT_TRUE(r.ok()) << r.error;
  EXPECT_EQ(r.log.final_step, 0u);
  EXPECT_EQ(r.metrics.at("alc"), r.step0_bleu);
  EXPECT_TRUE(r.metrics.count("bleu"));
  // One run: 5 metric rows, 5 mean rows, 5 stderr rows.
  EXPECT_EQ(count_lines(slurp(dir / "results.csv")), 1u + 15);
}

TEST(Sweep, DeterministicIdempotentAndReloadable) {
  const auto spec = parse_experiment(kTinyConfig);
  const auto a = fresh_dir("det_a"), b = fresh_dir("det_b");
  std::ostringstream first, again;
  const auto ra = run_sweep(spec, a, SweepOptions{&first});
  run_sweep(spec, b);
  EXPECT_EQ(slurp(a / "results.csv"), slurp(b / "results.csv"));
  EXPECT_EQ(slurp(a / "curves.csv"), slurp(b / "curves.csv"));
  EXPECT_EQ(count_lines(first.str()), 4u);

  const auto stamp = fs::last_write_time(a / "runs/copy/zero/seed0/best.ckpt");
  run_sweep(spec, a, SweepOptions{&again});
  EXPECT_EQ(again.str().find("trained"), std::string::npos);
  EXPECT_EQ(fs::last_write_time(a / "runs/copy/zero/seed0/best.ckpt"), stamp);
  EXPECT_EQ(slurp(a / "results.csv"), slurp(b / "results.csv"));

  const auto loaded = load_report(a);
  EXPECT_EQ(loaded.results_csv(), ra.results_csv());
  EXPECT_EQ(loaded.curves_csv(), ra.curves_csv());
}

TEST(Sweep, AddingAStrategyKeepsOtherRuns) {
  auto spec = parse_experiment(kTinyConfig);
  spec.seeds = 1;
  const auto dir = fresh_dir("add_strategy");
  const auto before = run_sweep(spec, dir);
  spec.strategies.push_back(parse_strategy("none"));
  std::ostringstream progress;
  const auto after = run_sweep(spec, dir, SweepOptions{&progress});
  EXPECT_EQ(progress.str().find("trained copy/zero"), std::string::npos);
  EXPECT_NE(progress.str().find("trained copy/none"), std::string::npos);
  EXPECT_EQ(after.find("copy", "zero", 0)->metrics, before.find("copy", "zero", 0)->metrics);
}

TEST(Sweep, FailedDatasetIsMarkedMissing) {
  auto spec = parse_experiment(kTinyConfig);
  spec.seeds = 1;
  spec.strategies = {parse_strategy("zero")};
  DatasetSpec broken;
  broken.name = "broken";
  broken.path = fresh_dir("no_such_dataset");
  spec.datasets.push_back(broken);
  const auto dir = fresh_dir("partial");
  const auto report = run_sweep(spec, dir);
  ASSERT_EQ(report.runs.size(), 2u);
  EXPECT_TRUE(report.runs[0].ok());
  EXPECT_FALSE(report.runs[1].ok());
  const auto csv = slurp(dir / "results.csv");
  EXPECT_NE(csv.find("broken,zero,0,bleu,missing"), std::string::npos);
  EXPECT_NE(csv.find("broken,zero,mean,bleu,missing"), std::string::npos);
  EXPECT_NE(csv.find("copy,zero,0,bleu,"), std::string::npos);
}

class OodEvaluation : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fresh_dir("ood");
    const auto task = generate_synthetic_task(small_task(TaskKind::Copy, 600));
    write_dataset(dataset_from_task(task, "copy"), root_ / "copy");
    auto rev = small_task(TaskKind::Reverse);
    rev.seed = 9;
    write_dataset(dataset_from_task(generate_synthetic_task(rev), "reverse"), root_ / "reverse");

    auto spec = parse_experiment(kTinyConfig);
    spec.training.max_steps = 400;
    spec.training.eval_interval = 100;
    spec.training.warmup_steps = 50;
    spec.training.learning_rate = 5e-3;
    spec.model.dropout = 0.0;
    const auto data = load_dataset(root_ / "copy", "copy");
    in_domain_ = new RunResult(run_one(spec, data, parse_strategy("zero"), 0, root_ / "run"));
  }
  static void TearDownTestSuite() { delete in_domain_; }

  static fs::path root_;
  static RunResult* in_domain_;
};
fs::path OodEvaluation::root_;
RunResult* OodEvaluation::in_domain_ = nullptr;

TEST_F(OodEvaluation, InDomainCorpusGivesInDomainScores) {
  const auto s = evaluate_ood(root_ / "run/best.ckpt", root_ / "copy", root_ / "copy/test.src", root_ / "copy/test.tgt");
  EXPECT_EQ(s.bleu, in_domain_->metrics.at("bleu"));
  EXPECT_EQ(s.chrf, in_domain_->metrics.at("chrf"));
  EXPECT_GT(s.bleu, 50.0);
}

TEST_F(OodEvaluation, CopyModelScoresLowerOnReverse) {
  const auto s =
      evaluate_ood(root_ / "run/best.ckpt", root_ / "copy", root_ / "reverse/test.src", root_ / "reverse/test.tgt");
  EXPECT_LT(s.bleu, in_domain_->metrics.at("bleu"));
}

TEST_F(OodEvaluation, EmptyFileIsAnError) {
  write_lines(root_ / "empty.txt", std::vector<std::string>{});
  EXPECT_THROW(evaluate_ood(root_ / "run/best.ckpt", root_ / "copy", root_ / "empty.txt", root_ / "empty.txt"),
               DataError);
}

TEST_F(OodEvaluation, VocabularyMismatchNamesTheFiles) {
  auto other = small_task(TaskKind::Copy);
  other.vocab_size = 30;
  write_dataset(dataset_from_task(generate_synthetic_task(other), "big"), root_ / "big");
  try {
    evaluate_ood(root_ / "run/best.ckpt", root_ / "big", root_ / "big/test.src", root_ / "big/test.tgt");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find((root_ / "big/vocab.tsv").string()), std::string::npos) << msg;
    EXPECT_NE(msg.find((root_ / "copy/vocab.tsv").string()), std::string::npos) << msg;
  }
}

TEST(GradcheckSuite, EveryCheckPasses) {
  const auto suite = gradcheck_suite(3, 2);
  EXPECT_GE(suite.size(), 2u * 14 + 2);
  for (const auto& c : suite) EXPECT_TRUE(c.report.ok()) << c.name << "\n" << c.report.summary();
}
