// Command-line front end. Exit codes: 0 success, 1 configuration error,
// 2 runtime failure, 3 failed acceptance check (sweep --check).

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

#include "unibias/decoding.hpp"
#include "unibias/harness.hpp"

using namespace unibias;
namespace fs = std::filesystem;

namespace {

constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;
constexpr int kCheckFailed = 3;

std::vector<std::string> read_all_lines(const std::vector<std::string>& files) {
  std::vector<std::string> lines;
  for (const auto& f : files) {
    auto l = read_lines(f);
    lines.insert(lines.end(), l.begin(), l.end());
  }
  if (lines.empty()) throw DataError("no input lines");
  return lines;
}

// Reads `step,value` rows (a header line is skipped) or the val_bleu
// records of a training log.
LearningCurve read_curve(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  LearningCurve curve;
  if (text.find(",val_bleu,") != std::string::npos) {
    for (const auto& v : TrainingLog::parse(text).validation)
      curve.push_back({static_cast<double>(v.step), v.bleu});
    return curve;
  }
  std::istringstream lines(text);
  for (std::string line; std::getline(lines, line);) {
    double s, v;
    if (std::sscanf(line.c_str(), "%lf,%lf", &s, &v) == 2) curve.push_back({s, v});
  }
  return curve;
}

// Directional checks on a finished sweep: log_unigram against zero (ALC,
// final BLEU, frequency slope without bias) and zero:anti_unigram against
// zero (final BLEU). Cells missing from the sweep are skipped.
bool check_sweep(const MetricReport& r, std::ostream& out) {
  bool ok = true;
  auto report = [&](const std::string& what, bool pass) {
    out << (pass ? "PASS " : "FAIL ") << what << '\n';
    ok = ok && pass;
  };
  for (const auto& d : r.datasets) {
    auto mean = [&](const char* s, const char* m) { return r.summary(d, s, m); };
    auto has = [&](const char* s) { return std::find(r.strategies.begin(), r.strategies.end(), s) != r.strategies.end(); };
    if (has("zero") && has("log_unigram")) {
      const auto a = mean("log_unigram", "alc"), b = mean("zero", "alc");
      if (a.n && b.n) report(d + " alc log_unigram >= zero", a.mean >= b.mean);
      const auto x = mean("log_unigram", "bleu"), y = mean("zero", "bleu");
      if (x.n && y.n) report(d + " bleu log_unigram >= zero - 0.5", x.mean >= y.mean - 0.5);
      std::size_t wins = 0, pairs = 0;
      for (std::size_t k = 0; k < r.seeds; ++k) {
        const auto* l = r.find(d, "log_unigram", k);
        const auto* z = r.find(d, "zero", k);
        if (l && z && l->ok() && z->ok() && l->metrics.count("freq_slope") && z->metrics.count("freq_slope")) {
          ++pairs;
          wins += l->metrics.at("freq_slope") < z->metrics.at("freq_slope");
        }
      }
      if (pairs) report(d + " freq_slope log_unigram < zero on " + std::to_string(wins) + "/" + std::to_string(pairs),
                        2 * wins > pairs);
    }
    if (has("zero") && has("zero:anti_unigram")) {
      const auto a = mean("zero:anti_unigram", "bleu"), b = mean("zero", "bleu");
      if (a.n && b.n) report(d + " bleu zero:anti_unigram <= zero", a.mean <= b.mean);
    }
  }
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Log-unigram output-bias workbench"};
  app.require_subcommand(1);
  int code = 0;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic translation task as a dataset directory");
  SyntheticSpec syn;
  std::string task = "substitute", gen_out;
  gen->add_option("--task", task, "copy, reverse or substitute")->capture_default_str();
  gen->add_option("--vocab-size", syn.vocab_size, "Vocabulary size including reserved tokens")->capture_default_str();
  gen->add_option("--zipf", syn.zipf_exponent, "Zipf exponent")->capture_default_str();
  gen->add_option("--pairs", syn.pairs)->capture_default_str();
  gen->add_option("--valid-pairs", syn.valid_pairs)->capture_default_str();
  gen->add_option("--test-pairs", syn.test_pairs)->capture_default_str();
  gen->add_option("--min-len", syn.min_len)->capture_default_str();
  gen->add_option("--max-len", syn.max_len)->capture_default_str();
  gen->add_option("--seed", syn.seed)->capture_default_str();
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->callback([&] {
    syn.kind = parse_task_kind(task);
    write_dataset(dataset_from_task(generate_synthetic_task(syn), task), gen_out);
    std::cout << "wrote " << gen_out << '\n';
  });

  // build-vocab
  auto* bv = app.add_subcommand("build-vocab", "Count whitespace (or BPE) tokens into vocab.tsv");
  std::vector<std::string> bv_inputs;
  std::string bv_out, bv_bpe, bv_bpe_vocab;
  bv->add_option("--input", bv_inputs, "Text files")->required();
  bv->add_option("--out", bv_out, "Output vocab.tsv")->required();
  bv->add_option("--bpe", bv_bpe, "Segment with this BPE model instead of whitespace");
  bv->add_option("--bpe-vocab", bv_bpe_vocab, "Vocabulary file of the BPE model");
  bv->callback([&] {
    const auto lines = read_all_lines(bv_inputs);
    Vocabulary vocab;
    if (!bv_bpe.empty()) {
      if (bv_bpe_vocab.empty()) throw ConfigError("--bpe needs --bpe-vocab");
      const auto bpe = BpeModel::load(bv_bpe, bv_bpe_vocab);
      vocab = bpe.vocabulary();
      vocab.clear_counts();
      for (const auto& l : lines)
        for (int id : bpe.tokenize(l)) vocab.add_count(id);
    } else {
      for (const auto& l : lines) {
        std::istringstream in(l);
        for (std::string w; in >> w;) vocab.add_count(vocab.add(w));
      }
    }
    vocab.save(bv_out);
    std::cout << vocab.size() << " tokens -> " << bv_out << '\n';
  });

  // train-bpe
  auto* tb = app.add_subcommand("train-bpe", "Learn BPE merges; writes the model and its vocabulary");
  std::vector<std::string> tb_inputs;
  std::size_t tb_size = 0;
  std::string tb_model, tb_vocab;
  tb->add_option("--input", tb_inputs, "Text files")->required();
  tb->add_option("--vocab-size", tb_size, "Target vocabulary size")->required();
  tb->add_option("--model", tb_model, "Output merges file")->required();
  tb->add_option("--vocab", tb_vocab, "Output vocab.tsv")->required();
  tb->callback([&] {
    const auto lines = read_all_lines(tb_inputs);
    const auto bpe = BpeModel::train(lines, tb_size);
    Vocabulary vocab = bpe.vocabulary();
    vocab.clear_counts();
    for (const auto& l : lines)
      for (int id : bpe.tokenize(l)) vocab.add_count(id);
    bpe.save(tb_model);
    vocab.save(tb_vocab);
    std::cout << bpe.merges().size() << " merges, " << vocab.size() << " tokens\n";
  });

  // train
  auto* tr = app.add_subcommand("train", "Train and evaluate one (dataset, strategy, seed) cell of a config");
  std::string tr_config, tr_dataset, tr_strategy, tr_out;
  std::size_t tr_seed = 0;
  tr->add_option("--config", tr_config, "Experiment config")->required();
  tr->add_option("--dataset", tr_dataset, "Dataset name (default: first)");
  tr->add_option("--strategy", tr_strategy, "Strategy (default: first)");
  tr->add_option("--seed-index", tr_seed)->capture_default_str();
  tr->add_option("--out", tr_out, "Run directory")->required();
  tr->callback([&] {
    const auto spec = load_experiment(tr_config);
    const DatasetSpec* ds = &spec.datasets.front();
    if (!tr_dataset.empty()) {
      ds = nullptr;
      for (const auto& d : spec.datasets)
        if (d.name == tr_dataset) ds = &d;
      if (!ds) throw ConfigError("no dataset " + tr_dataset + " in " + tr_config);
    }
    const Strategy strategy = tr_strategy.empty() ? spec.strategies.front() : parse_strategy(tr_strategy);
    const Dataset data = ds->synthetic ? dataset_from_task(generate_synthetic_task(*ds->synthetic), ds->name)
                                       : load_dataset(ds->path, ds->name);
    const auto r = run_one(spec, data, strategy, tr_seed, tr_out);
    std::cout << r.id() << " best_step=" << r.log.best_step << " final_step=" << r.log.final_step << '\n';
    for (const auto& [m, v] : r.metrics) std::cout << m << ' ' << v << '\n';
  });

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Beam-search BLEU and chrF of a checkpoint on a dataset split");
  std::string ev_ckpt, ev_data, ev_split = "test";
  std::size_t ev_beam = 5;
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--split", ev_split, "train, valid or test")->capture_default_str();
  ev->add_option("--beam", ev_beam)->capture_default_str();
  ev->callback([&] {
    const Model model = Model::load(ev_ckpt);
    const Dataset tok = load_tokenizer(ev_data);
    check_vocabulary(model, tok, ev_ckpt);
    if (ev_split != "train" && ev_split != "valid" && ev_split != "test") throw ConfigError("unknown split " + ev_split);
    const fs::path dir(ev_data);
    const auto corpus = tok.read_pairs(dir / (ev_split + ".src"), dir / (ev_split + ".tgt"), Split::Test);
    const auto s = evaluate_corpus(model, tok, corpus, ev_beam);
    std::cout << "sentences " << s.sentences << "\nbleu " << s.bleu << "\nchrf " << s.chrf << '\n';
  });

  // evaluate-ood
  auto* ood = app.add_subcommand("evaluate-ood", "Score a checkpoint on out-of-domain text files");
  std::string ood_ckpt, ood_data, ood_src, ood_tgt;
  std::size_t ood_beam = 5;
  ood->add_option("--checkpoint", ood_ckpt)->required();
  ood->add_option("--data", ood_data, "Dataset directory providing the tokenizer")->required();
  ood->add_option("--src", ood_src)->required();
  ood->add_option("--tgt", ood_tgt)->required();
  ood->add_option("--beam", ood_beam)->capture_default_str();
  ood->callback([&] {
    const auto s = evaluate_ood(ood_ckpt, ood_data, ood_src, ood_tgt, ood_beam);
    std::cout << "sentences " << s.sentences << "\nbleu " << s.bleu << "\nchrf " << s.chrf << '\n';
  });

  // sweep
  auto* sw = app.add_subcommand("sweep", "Run every seed x strategy x dataset cell of a config");
  std::string sw_config, sw_out;
  bool sw_check = false, sw_plots = true;
  sw->add_option("--config", sw_config)->required();
  sw->add_option("--out", sw_out, "Output directory")->required();
  sw->add_flag("--check", sw_check, "Exit 3 unless the directional checks hold");
  sw->add_flag("--plots,!--no-plots", sw_plots, "Write SVG plots")->capture_default_str();
  sw->callback([&] {
    const auto report = run_sweep(load_experiment(sw_config), sw_out, SweepOptions{&std::cerr});
    if (sw_plots) emit_plots(report, fs::path(sw_out) / "plots");
    std::cout << report.results_csv();
    bool failed = false;
    for (const auto& r : report.runs) failed = failed || !r.ok();
    if (failed) code = kRuntimeError;
    if (sw_check && !check_sweep(report, std::cout)) code = kCheckFailed;
  });

  // alc
  auto* ac = app.add_subcommand("alc", "Normalised area under a learning curve");
  std::string ac_curve;
  double ac_horizon = 0.0;
  ac->add_option("--curve", ac_curve, "CSV of step,value or a training log")->required();
  ac->add_option("--horizon", ac_horizon, "Last step of the integration interval")->required();
  ac->callback([&] {
    const auto curve = read_curve(ac_curve);
    try {
      std::printf("%.17g\n", alc(curve, ac_horizon));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  });

  // plot
  auto* pl = app.add_subcommand("plot", "Re-emit SVG plots and CSVs of a finished sweep");
  std::string pl_sweep, pl_out;
  pl->add_option("--sweep", pl_sweep, "Sweep output directory")->required();
  pl->add_option("--out", pl_out, "Plot directory (default: <sweep>/plots)");
  pl->callback([&] {
    emit_plots(load_report(pl_sweep), pl_out.empty() ? fs::path(pl_sweep) / "plots" : fs::path(pl_out));
  });

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every op and the full loss");
  std::uint64_t gc_seed = 1;
  std::size_t gc_trials = 10;
  gc->add_option("--seed", gc_seed)->capture_default_str();
  gc->add_option("--trials", gc_trials, "Random instances per op")->capture_default_str();
  gc->callback([&] {
    double worst = 0.0;
    bool ok = true;
    for (const auto& c : gradcheck_suite(gc_seed, gc_trials)) {
      worst = std::max(worst, c.report.max_rel_error());
      if (!c.report.ok()) {
        ok = false;
        std::cout << "FAIL " << c.name << '\n' << c.report.summary() << '\n';
      }
    }
    std::printf("%s max relative error %.3g\n", ok ? "ok" : "failed", worst);
    if (!ok) code = kRuntimeError;
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kConfigError;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return code;
}
