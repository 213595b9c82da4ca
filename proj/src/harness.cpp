#include "unibias/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include "unibias/decoding.hpp"
#include "unibias/random.hpp"

namespace unibias {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string hex(std::uint64_t x) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(x));
  return buf;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  while (!s.empty()) {
    const auto comma = s.find(',');
    const auto item = trim(s.substr(0, comma));
    if (!item.empty()) out.emplace_back(item);
    if (comma == std::string_view::npos) break;
    s.remove_prefix(comma + 1);
  }
  return out;
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (const auto& s : items) out += (out.empty() ? "" : ", ") + s;
  return out;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write " + tmp.string());
    out << text;
    if (!out) throw DataError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string strategy_dir(std::string_view name) {
  std::string s(name);
  std::replace(s.begin(), s.end(), ':', '+');
  return s;
}

std::vector<std::string> words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  for (std::string w; in >> w;) out.push_back(std::move(w));
  return out;
}

}  // namespace

// ------------------------------------------------------------------ Datasets

std::vector<int> Dataset::encode(std::string_view line) const {
  return bpe ? bpe->tokenize(line) : tokenize_words(vocab, line);
}

std::string Dataset::decode(std::span<const int> ids) const {
  if (!ids.empty() && ids.back() == kEosId) ids = ids.first(ids.size() - 1);
  return bpe ? bpe->detokenize(ids) : detokenize_words(vocab, ids);
}

ParallelCorpus Dataset::read_pairs(const fs::path& src, const fs::path& tgt, Split split) const {
  const auto s = read_lines(src), t = read_lines(tgt);
  if (s.empty()) throw DataError(src.string() + " is empty");
  if (s.size() != t.size())
    throw DataError(src.string() + " has " + std::to_string(s.size()) + " lines but " + tgt.string() + " has " +
                    std::to_string(t.size()));
  ParallelCorpus c;
  c.split = split;
  c.pairs.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    SentencePair p{encode(s[i]), encode(t[i])};
    p.target.push_back(kEosId);
    c.pairs.push_back(std::move(p));
  }
  c.validate(vocab.size());
  return c;
}

Dataset load_tokenizer(const fs::path& dir) {
  Dataset d;
  d.vocab_path = dir / "vocab.tsv";
  d.vocab = Vocabulary::load(d.vocab_path);
  if (fs::exists(dir / "bpe.txt")) {
    d.bpe = BpeModel::load(dir / "bpe.txt", d.vocab_path);
    if (d.bpe->vocabulary().tokens() != d.vocab.tokens())
      throw DataError((dir / "bpe.txt").string() + " does not match " + d.vocab_path.string());
  }
  return d;
}

Dataset load_dataset(const fs::path& dir, std::string name) {
  Dataset d = load_tokenizer(dir);
  d.name = name.empty() ? dir.filename().string() : std::move(name);
  d.train = d.read_pairs(dir / "train.src", dir / "train.tgt", Split::Train);
  d.valid = d.read_pairs(dir / "valid.src", dir / "valid.tgt", Split::Valid);
  d.test = d.read_pairs(dir / "test.src", dir / "test.tgt", Split::Test);
  return d;
}

Dataset dataset_from_task(const SyntheticTask& task, std::string name) {
  Dataset d;
  d.name = std::move(name);
  d.vocab = task.vocab;
  d.train = task.train;
  d.valid = task.valid;
  d.test = task.test;
  return d;
}

void write_dataset(const Dataset& data, const fs::path& dir) {
  fs::create_directories(dir);
  data.vocab.save(dir / "vocab.tsv");
  if (data.bpe) data.bpe->save(dir / "bpe.txt");
  const std::pair<const char*, const ParallelCorpus*> splits[] = {
      {"train", &data.train}, {"valid", &data.valid}, {"test", &data.test}};
  for (const auto& [name, corpus] : splits) {
    std::vector<std::string> src, tgt;
    for (const auto& p : corpus->pairs) {
      src.push_back(data.decode(p.source));
      tgt.push_back(data.decode(p.target));
    }
    write_lines(dir / (std::string(name) + ".src"), src);
    write_lines(dir / (std::string(name) + ".tgt"), tgt);
  }
}

UnigramDistribution external_unigram(const fs::path& counts_file, const Vocabulary& vocab, double smoothing) {
  const Vocabulary ext = Vocabulary::load(counts_file);
  std::vector<std::uint64_t> counts(vocab.size(), 0);
  for (std::size_t i = 0; i < ext.size(); ++i)
    if (auto j = vocab.find(ext.token(static_cast<int>(i)))) counts[static_cast<std::size_t>(*j)] += ext.count(static_cast<int>(i));
  return unigram_from_counts(counts, smoothing);
}

// ------------------------------------------------------------ Specification

Strategy parse_strategy(std::string_view name) {
  Strategy s;
  s.name = std::string(trim(name));
  std::string_view base = s.name;
  if (const auto colon = base.find(':'); colon != std::string_view::npos) {
    if (base.substr(colon + 1) != "anti_unigram")
      throw ConfigError("unknown strategy suffix in '" + s.name + "' (only ':anti_unigram')");
    s.anti_unigram = true;
    base = base.substr(0, colon);
  }
  s.mode = parse_bias_mode(base);
  return s;
}

std::uint64_t run_seed(std::uint64_t root, std::string_view strategy, std::size_t seed_index) {
  return derive_seed({root, hash_string(strategy), seed_index});
}

void ExperimentSpec::validate() const {
  if (seeds == 0) throw ConfigError("an experiment needs at least one seed");
  if (strategies.empty()) throw ConfigError("an experiment needs at least one strategy");
  if (datasets.empty()) throw ConfigError("an experiment needs at least one dataset");
  std::set<std::string> seen;
  for (const auto& s : strategies)
    if (!seen.insert(s.name).second) throw ConfigError("duplicate strategy " + s.name);
  seen.clear();
  for (const auto& d : datasets) {
    if (d.name.empty() || d.name.find_first_of("/\\,") != std::string::npos)
      throw ConfigError("invalid dataset name '" + d.name + "'");
    if (!seen.insert(d.name).second) throw ConfigError("duplicate dataset " + d.name);
    if (!d.synthetic && d.path.empty()) throw ConfigError("dataset " + d.name + " needs a path");
  }
  if (metrics.empty()) throw ConfigError("no metrics requested");
  for (const auto& m : metrics)
    if (std::find(known_metrics().begin(), known_metrics().end(), m) == known_metrics().end())
      throw ConfigError("unknown metric " + m + " (expected " + join(known_metrics()) + ")");
  if (!(alc_horizon > 0.0 && alc_horizon <= 1.0)) throw ConfigError("alc_horizon must lie in (0, 1]");
  if (beam_size == 0) throw ConfigError("beam_size must be positive");
  if (num_bins == 0) throw ConfigError("num_bins must be positive");
  if (!(anti_unigram_lambda > 0.0)) throw ConfigError("anti_unigram_lambda must be positive");
  if (!(anti_unigram_switch > 0.0 && anti_unigram_switch < 1.0))
    throw ConfigError("anti_unigram_switch must lie in (0, 1)");
  if (!(unigram_smoothing >= 0.0)) throw ConfigError("unigram_smoothing must be non-negative");
  for (const auto& s : strategies)
    if (s.mode == BiasMode::ExternalLogUnigram && external_unigram.empty())
      throw ConfigError("strategy " + s.name + " needs external_unigram");
  ModelConfig m = model;
  m.vocab_size = kNumReserved + 1;
  m.validate();
  training.validate();
}

namespace {

const char* task_name(TaskKind k) { return task_kind_name(k).data(); }

void write_dataset_section(std::ostream& o, const DatasetSpec& d) {
  o << "\n[dataset." << d.name << "]\n";
  if (d.synthetic) {
    const auto& s = *d.synthetic;
    o << "type = synthetic\ntask = " << task_name(s.kind) << "\nvocab_size = " << s.vocab_size
      << "\nzipf_exponent = " << num(s.zipf_exponent) << "\npairs = " << s.pairs << "\nvalid_pairs = " << s.valid_pairs
      << "\ntest_pairs = " << s.test_pairs << "\nmin_len = " << s.min_len << "\nmax_len = " << s.max_len
      << "\nseed = " << s.seed << "\n";
  } else {
    o << "type = files\npath = " << d.path.string() << "\n";
  }
}

void write_model_section(std::ostream& o, const ModelConfig& m) {
  o << "\n[model]\nlayers = " << m.layers << "\nheads = " << m.heads << "\nd_model = " << m.d_model
    << "\nd_ffn = " << m.d_ffn << "\ndropout = " << num(m.dropout) << "\nmax_len = " << m.max_len
    << "\ndecoder_only = " << (m.decoder_only ? "true" : "false") << "\n";
}

void write_training_section(std::ostream& o, const TrainingConfig& t) {
  o << "\n[training]\nlearning_rate = " << num(t.learning_rate) << "\nwarmup_steps = " << t.warmup_steps
    << "\nbeta1 = " << num(t.beta1) << "\nbeta2 = " << num(t.beta2) << "\nadam_eps = " << num(t.adam_eps)
    << "\nbatch_tokens = " << t.batch_tokens << "\nmax_steps = " << t.max_steps << "\neval_interval = "
    << t.eval_interval << "\npatience = " << t.patience << "\nlabel_smoothing = " << num(t.label_smoothing)
    << "\nprobe_interval = " << t.probe_interval << "\nprobe_positions = " << t.probe_positions
    << "\nvalid_sentences = " << t.valid_sentences << "\n";
}

void write_evaluation_keys(std::ostream& o, const ExperimentSpec& e) {
  o << "metrics = " << join(e.metrics) << "\nalc_horizon = " << num(e.alc_horizon) << "\nbeam_size = " << e.beam_size
    << "\nnum_bins = " << e.num_bins << "\nanti_unigram_lambda = " << num(e.anti_unigram_lambda)
    << "\nanti_unigram_switch = " << num(e.anti_unigram_switch) << "\nunigram_smoothing = "
    << num(e.unigram_smoothing) << "\nscale_baseline = " << (e.scale_baseline ? "true" : "false")
    << "\nexternal_unigram = " << e.external_unigram.string() << "\n";
}

// Reads the keys of one INI section, rejecting anything unrecognised.
class Section {
 public:
  Section(std::string name, const boost::property_tree::ptree& tree) : name_(std::move(name)), tree_(tree) {
    for (const auto& [key, child] : tree_) {
      if (!child.empty()) throw ConfigError("nested key " + name_ + "." + key);
      keys_.insert(key);
    }
  }

  const std::string* raw(const std::string& key) {
    used_.insert(key);
    const auto it = tree_.find(key);
    return it == tree_.not_found() ? nullptr : &it->second.data();
  }

  void get(const std::string& key, std::string& out) {
    if (auto v = raw(key)) out = std::string(trim(*v));
  }
  void get(const std::string& key, fs::path& out) {
    if (auto v = raw(key)) out = std::string(trim(*v));
  }
  void get(const std::string& key, bool& out) {
    if (auto v = raw(key)) {
      const auto t = trim(*v);
      if (t == "true" || t == "1") out = true;
      else if (t == "false" || t == "0") out = false;
      else bad(key, *v);
    }
  }
  template <class T>
    requires std::is_arithmetic_v<T>
  void get(const std::string& key, T& out) {
    if (auto v = raw(key)) {
      const auto t = trim(*v);
      T parsed{};
      const auto [end, ec] = std::from_chars(t.data(), t.data() + t.size(), parsed);
      if (ec != std::errc() || end != t.data() + t.size()) bad(key, *v);
      out = parsed;
    }
  }

  void finish() const {
    for (const auto& k : keys_)
      if (!used_.count(k)) throw ConfigError("unknown key '" + k + "' in [" + name_ + "]");
  }

 private:
  [[noreturn]] void bad(const std::string& key, const std::string& value) const {
    throw ConfigError("invalid value '" + value + "' for " + name_ + "." + key);
  }

  std::string name_;
  const boost::property_tree::ptree& tree_;
  std::set<std::string> keys_, used_;
};

}  // namespace

std::string ExperimentSpec::to_ini() const {
  std::ostringstream o;
  std::vector<std::string> names;
  for (const auto& s : strategies) names.push_back(s.name);
  o << "[experiment]\nname = " << name << "\nstrategies = " << join(names) << "\nseeds = " << seeds
    << "\nroot_seed = " << root_seed << "\n";
  write_evaluation_keys(o, *this);
  write_model_section(o, model);
  write_training_section(o, training);
  for (const auto& d : datasets) write_dataset_section(o, d);
  return o.str();
}

ExperimentSpec parse_experiment(const std::string& text) {
  boost::property_tree::ptree tree;
  try {
    std::istringstream in(text);
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  ExperimentSpec spec;
  bool have_experiment = false;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw ConfigError("key '" + section + "' outside any section");
    if (section == "experiment") {
      have_experiment = true;
      Section s(section, body);
      s.get("name", spec.name);
      if (auto v = s.raw("strategies")) {
        spec.strategies.clear();
        for (const auto& n : split_list(*v)) spec.strategies.push_back(parse_strategy(n));
      }
      s.get("seeds", spec.seeds);
      s.get("root_seed", spec.root_seed);
      if (auto v = s.raw("metrics")) spec.metrics = split_list(*v);
      s.get("alc_horizon", spec.alc_horizon);
      s.get("beam_size", spec.beam_size);
      s.get("num_bins", spec.num_bins);
      s.get("anti_unigram_lambda", spec.anti_unigram_lambda);
      s.get("anti_unigram_switch", spec.anti_unigram_switch);
      s.get("unigram_smoothing", spec.unigram_smoothing);
      s.get("scale_baseline", spec.scale_baseline);
      s.get("external_unigram", spec.external_unigram);
      s.finish();
    } else if (section == "model") {
      Section s(section, body);
      auto& m = spec.model;
      s.get("layers", m.layers);
      s.get("heads", m.heads);
      s.get("d_model", m.d_model);
      s.get("d_ffn", m.d_ffn);
      s.get("dropout", m.dropout);
      s.get("max_len", m.max_len);
      s.get("decoder_only", m.decoder_only);
      s.finish();
    } else if (section == "training") {
      Section s(section, body);
      auto& t = spec.training;
      s.get("learning_rate", t.learning_rate);
      s.get("warmup_steps", t.warmup_steps);
      s.get("beta1", t.beta1);
      s.get("beta2", t.beta2);
      s.get("adam_eps", t.adam_eps);
      s.get("batch_tokens", t.batch_tokens);
      s.get("max_steps", t.max_steps);
      s.get("eval_interval", t.eval_interval);
      s.get("patience", t.patience);
      s.get("label_smoothing", t.label_smoothing);
      s.get("probe_interval", t.probe_interval);
      s.get("probe_positions", t.probe_positions);
      s.get("valid_sentences", t.valid_sentences);
      s.finish();
    } else if (section.rfind("dataset.", 0) == 0) {
      Section s(section, body);
      DatasetSpec d;
      d.name = section.substr(8);
      std::string type = "synthetic";
      s.get("type", type);
      if (type == "synthetic") {
        SyntheticSpec syn;
        std::string task(task_kind_name(syn.kind));
        s.get("task", task);
        syn.kind = parse_task_kind(task);
        s.get("vocab_size", syn.vocab_size);
        s.get("zipf_exponent", syn.zipf_exponent);
        s.get("pairs", syn.pairs);
        s.get("valid_pairs", syn.valid_pairs);
        s.get("test_pairs", syn.test_pairs);
        s.get("min_len", syn.min_len);
        s.get("max_len", syn.max_len);
        s.get("seed", syn.seed);
        d.synthetic = syn;
      } else if (type == "files") {
        s.get("path", d.path);
      } else {
        throw ConfigError("unknown dataset type '" + type + "' in [" + section + "]");
      }
      s.finish();
      spec.datasets.push_back(std::move(d));
    } else {
      throw ConfigError("unknown section [" + section + "]");
    }
  }
  if (!have_experiment) throw ConfigError("missing [experiment] section");
  spec.validate();
  return spec;
}

ExperimentSpec load_experiment(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  auto spec = parse_experiment(s.str());
  // Relative dataset paths are taken from the config's directory.
  for (auto& d : spec.datasets)
    if (!d.synthetic && d.path.is_relative()) d.path = path.parent_path() / d.path;
  return spec;
}

// ------------------------------------------------------------------- Reports

std::string RunResult::id() const { return dataset + "/" + strategy + "/seed" + std::to_string(seed_index); }

const RunResult* MetricReport::find(std::string_view dataset, std::string_view strategy, std::size_t seed) const {
  for (const auto& r : runs)
    if (r.dataset == dataset && r.strategy == strategy && r.seed_index == seed) return &r;
  return nullptr;
}

std::vector<double> MetricReport::values(std::string_view dataset, std::string_view strategy,
                                         std::string_view metric) const {
  std::vector<double> out;
  for (std::size_t k = 0; k < seeds; ++k)
    if (const auto* r = find(dataset, strategy, k); r && r->ok())
      if (auto it = r->metrics.find(std::string(metric)); it != r->metrics.end()) out.push_back(it->second);
  return out;
}

Summary MetricReport::summary(std::string_view dataset, std::string_view strategy, std::string_view metric) const {
  auto v = values(dataset, strategy, metric);
  std::sort(v.begin(), v.end());
  return summarize(v);
}

std::string MetricReport::results_csv() const {
  std::ostringstream o;
  o << "dataset,strategy,seed,metric,value\n";
  for (const auto& d : datasets)
    for (const auto& s : strategies) {
      for (std::size_t k = 0; k < seeds; ++k) {
        const auto* r = find(d, s, k);
        for (const auto& m : metrics) {
          o << d << ',' << s << ',' << k << ',' << m << ',';
          const bool have = r && r->ok() && r->metrics.count(m);
          o << (have ? num(r->metrics.at(m)) : "missing") << '\n';
        }
      }
      for (const char* row : {"mean", "stderr"})
        for (const auto& m : metrics) {
          o << d << ',' << s << ',' << row << ',' << m << ',';
          const auto sum = summary(d, s, m);
          if (sum.n == 0) o << "missing\n";
          else o << num(row[0] == 'm' ? sum.mean : sum.stderr_mean) << '\n';
        }
    }
  return o.str();
}

LearningCurve validation_curve(const RunResult& run) {
  LearningCurve c{{0.0, run.step0_bleu}};
  for (const auto& v : run.log.validation)
    if (v.step > 0) c.push_back({static_cast<double>(v.step), v.bleu});
  return c;
}

std::string MetricReport::curves_csv() const {
  std::ostringstream o;
  o << "run_id,step,series,value\n";
  for (const auto& r : runs) {
    if (!r.ok()) continue;
    const auto id = r.id();
    auto row = [&](std::size_t step, const char* series, double value) {
      o << id << ',' << step << ',' << series << ',' << num(value) << '\n';
    };
    for (const auto& l : r.log.losses) row(l.step, "loss", l.loss);
    for (const auto& p : validation_curve(r)) row(static_cast<std::size_t>(p.step), "val_bleu", p.score);
    for (const auto& d : r.log.divergences) row(d.step, "kl_unigram", d.kl_unigram);
    for (const auto& d : r.log.divergences) row(d.step, "kl_uniform", d.kl_uniform);
    for (const auto& d : r.log.divergences) row(d.step, "xent_empirical", d.xent_empirical);
    for (const auto& b : r.log.bias_drift) row(b.step, "bias_kl", b.kl_unigram);
    for (const auto& b : r.log.bias_drift) row(b.step, "bias_norm", b.norm);
  }
  return o.str();
}

// ------------------------------------------------------------------- Sweeps

namespace {

Dataset materialize(const DatasetSpec& d) {
  if (d.synthetic) return dataset_from_task(generate_synthetic_task(*d.synthetic), d.name);
  return load_dataset(d.path, d.name);
}

// Everything a run's outcome depends on; a manifest is reused only when
// this matches exactly.
std::string run_config(const ExperimentSpec& spec, const DatasetSpec& dataset, const Strategy& strategy,
                       std::size_t seed_index) {
  std::ostringstream o;
  o << "strategy = " << strategy.name << "\nseed_index = " << seed_index
    << "\nrun_seed = " << run_seed(spec.root_seed, strategy.name, seed_index) << "\n";
  write_evaluation_keys(o, spec);
  write_model_section(o, spec.model);
  write_training_section(o, spec.training);
  write_dataset_section(o, dataset);
  return o.str();
}

json metrics_json(const std::map<std::string, double>& m) {
  json j = json::object();
  for (const auto& [k, v] : m) j[k] = std::isfinite(v) ? json(v) : json(nullptr);
  return j;
}

std::map<std::string, double> metrics_from_json(const json& j) {
  std::map<std::string, double> m;
  for (const auto& [k, v] : j.items()) m[k] = v.is_null() ? std::nan("") : v.get<double>();
  return m;
}

std::optional<RunResult> load_manifest(const fs::path& run_dir, const std::string* expected_config) {
  const auto path = run_dir / "manifest.json";
  if (!fs::exists(path)) return std::nullopt;
  const auto j = json::parse(read_file(path));
  if (expected_config && j.value("config", "") != *expected_config) return std::nullopt;
  RunResult r;
  r.dataset = j.at("dataset");
  r.strategy = j.at("strategy");
  r.seed_index = j.at("seed_index");
  r.seed = j.at("seed");
  if (j.at("status") != "complete") {
    r.error = j.value("error", "failed");
    return r;
  }
  r.step0_bleu = j.at("step0_bleu");
  r.train_seconds = j.value("train_seconds", 0.0);
  r.metrics = metrics_from_json(j.at("metrics"));
  r.log = TrainingLog::parse(read_file(run_dir / "log.txt"));
  return r;
}

void write_manifest(const fs::path& run_dir, const RunResult& r, const std::string& config) {
  json j;
  j["dataset"] = r.dataset;
  j["strategy"] = r.strategy;
  j["seed_index"] = r.seed_index;
  j["seed"] = r.seed;
  j["config"] = config;
  if (r.ok()) {
    j["status"] = "complete";
    j["step0_bleu"] = r.step0_bleu;
    j["train_seconds"] = r.train_seconds;
    j["metrics"] = metrics_json(r.metrics);
  } else {
    j["status"] = "failed";
    j["error"] = r.error;
  }
  write_file(run_dir / "manifest.json", j.dump(2) + "\n");
}

bool wants(const ExperimentSpec& spec, std::string_view metric) {
  return std::find(spec.metrics.begin(), spec.metrics.end(), metric) != spec.metrics.end();
}

}  // namespace

RunResult run_one(const ExperimentSpec& spec, const Dataset& data, const Strategy& strategy, std::size_t seed_index,
                  const fs::path& run_dir) {
  RunResult r;
  r.dataset = data.name;
  r.strategy = strategy.name;
  r.seed_index = seed_index;
  r.seed = run_seed(spec.root_seed, strategy.name, seed_index);
  fs::create_directories(run_dir);

  const auto unigram = estimate_unigram(data.train, data.vocab, spec.unigram_smoothing);
  BiasInit init;
  init.mode = strategy.mode;
  init.scale_baseline = spec.scale_baseline;
  if (strategy.mode == BiasMode::ExternalLogUnigram)
    init.unigram = external_unigram(spec.external_unigram, data.vocab, spec.unigram_smoothing);
  else if (is_log_unigram(strategy.mode) || spec.scale_baseline)
    init.unigram = unigram;

  ModelConfig mc = spec.model;
  mc.vocab_size = data.vocab.size();
  Model model(mc, init, r.seed);
  model.metadata()["dataset"] = data.name;
  model.metadata()["strategy"] = strategy.name;
  model.metadata()["vocab_fingerprint"] = hex(data.vocab.fingerprint());
  if (!data.vocab_path.empty()) model.metadata()["vocab_path"] = data.vocab_path.string();

  TrainingConfig tc = spec.training;
  tc.seed = r.seed;
  if (strategy.anti_unigram) {
    const auto switch_step =
        static_cast<std::size_t>(std::llround(spec.anti_unigram_switch * static_cast<double>(tc.max_steps)));
    if (switch_step > 0) tc.regularizer = RegularizerConfig{spec.anti_unigram_lambda, switch_step};
  }

  const auto start = std::chrono::steady_clock::now();
  r.step0_bleu = validation_bleu(model, data.valid, tc.valid_sentences);
  r.log = train(model, data.train, data.valid, unigram, tc, TrainOptions{run_dir, true});
  r.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  if (wants(spec, "bleu") || wants(spec, "chrf")) {
    const auto scores = evaluate_corpus(model, data, data.test, spec.beam_size);
    if (wants(spec, "bleu")) r.metrics["bleu"] = scores.bleu;
    if (wants(spec, "chrf")) r.metrics["chrf"] = scores.chrf;
  }
  if (wants(spec, "alc")) {
    const auto curve = validation_curve(r);
    const double horizon = spec.alc_horizon * static_cast<double>(tc.max_steps);
    // A run with no evaluation inside the horizon has a one-point curve.
    r.metrics["alc"] = curve.size() >= 2 && horizon > 0.0 ? alc(curve, horizon) : curve.front().score;
  }
  if (wants(spec, "freq_slope"))
    r.metrics["freq_slope"] = frequency_binned_logprob(model, data.test, unigram, spec.num_bins, false).slope();
  if (wants(spec, "freq_slope_bias"))
    r.metrics["freq_slope_bias"] = frequency_binned_logprob(model, data.test, unigram, spec.num_bins, true).slope();
  return r;
}

MetricReport run_sweep(const ExperimentSpec& spec, const fs::path& out_dir, const SweepOptions& options) {
  spec.validate();
  for (const auto& s : spec.strategies)
    if (s.mode == BiasMode::ExternalLogUnigram && !fs::exists(spec.external_unigram))
      throw ConfigError("external_unigram file " + spec.external_unigram.string() + " does not exist");
  fs::create_directories(out_dir);
  write_file(out_dir / "experiment.ini", spec.to_ini());

  MetricReport report;
  for (const auto& d : spec.datasets) report.datasets.push_back(d.name);
  for (const auto& s : spec.strategies) report.strategies.push_back(s.name);
  report.metrics = spec.metrics;
  report.seeds = spec.seeds;

  for (const auto& ds : spec.datasets) {
    std::optional<Dataset> data;
    for (const auto& strategy : spec.strategies)
      for (std::size_t k = 0; k < spec.seeds; ++k) {
        const auto run_dir = out_dir / "runs" / ds.name / strategy_dir(strategy.name) / ("seed" + std::to_string(k));
        const auto config = run_config(spec, ds, strategy, k);
        auto cached = load_manifest(run_dir, &config);
        RunResult r;
        const char* how = "reused";
        if (cached && cached->ok()) {
          r = std::move(*cached);
        } else {
          how = "trained";
          try {
            if (!data) data = materialize(ds);
            r = run_one(spec, *data, strategy, k, run_dir);
          } catch (const ConfigError&) {
            throw;
          } catch (const std::exception& e) {
            r = RunResult{};
            r.dataset = ds.name;
            r.strategy = strategy.name;
            r.seed_index = k;
            r.seed = run_seed(spec.root_seed, strategy.name, k);
            r.error = e.what();
            how = "failed";
          }
          fs::create_directories(run_dir);
          write_manifest(run_dir, r, config);
        }
        if (options.progress) {
          *options.progress << how << ' ' << r.id();
          for (const auto& [m, v] : r.metrics) *options.progress << ' ' << m << '=' << v;
          if (!r.ok()) *options.progress << " error: " << r.error;
          *options.progress << std::endl;
        }
        report.runs.push_back(std::move(r));
      }
  }
  write_file(out_dir / "results.csv", report.results_csv());
  write_file(out_dir / "curves.csv", report.curves_csv());
  return report;
}

MetricReport load_report(const fs::path& out_dir) {
  const auto spec = load_experiment(out_dir / "experiment.ini");
  MetricReport report;
  for (const auto& d : spec.datasets) report.datasets.push_back(d.name);
  for (const auto& s : spec.strategies) report.strategies.push_back(s.name);
  report.metrics = spec.metrics;
  report.seeds = spec.seeds;
  for (const auto& d : spec.datasets)
    for (const auto& s : spec.strategies)
      for (std::size_t k = 0; k < spec.seeds; ++k) {
        const auto run_dir = out_dir / "runs" / d.name / strategy_dir(s.name) / ("seed" + std::to_string(k));
        if (auto r = load_manifest(run_dir, nullptr)) report.runs.push_back(std::move(*r));
      }
  return report;
}

// --------------------------------------------------------------- Evaluation

EvalScores evaluate_corpus(const Model& model, const Dataset& tokenizer, const ParallelCorpus& corpus,
                           std::size_t beam_size) {
  if (corpus.empty()) throw DataError("cannot evaluate an empty corpus");
  std::vector<std::vector<int>> sources;
  sources.reserve(corpus.size());
  for (const auto& p : corpus.pairs) sources.push_back(p.source);
  DecodeOptions opt;
  opt.beam_size = beam_size;
  opt.max_len = 0;
  const auto hyps = model_beam_search(model, sources, opt);

  std::vector<std::string> hyp_text, ref_text;
  std::vector<std::vector<std::string>> hyp_words, ref_words;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    hyp_text.push_back(tokenizer.decode(hyps[i].tokens));
    ref_text.push_back(tokenizer.decode(corpus.pairs[i].target));
    hyp_words.push_back(words(hyp_text.back()));
    ref_words.push_back(words(ref_text.back()));
  }
  return EvalScores{bleu(hyp_words, ref_words), chrf(hyp_text, ref_text), corpus.size()};
}

void check_vocabulary(const Model& model, const Dataset& data, const fs::path& checkpoint) {
  const auto& meta = model.metadata();
  const auto it = meta.find("vocab_fingerprint");
  const bool mismatch = model.config().vocab_size != data.vocab.size() ||
                        (it != meta.end() && it->second != hex(data.vocab.fingerprint()));
  if (!mismatch) return;
  const auto trained = meta.count("vocab_path") ? meta.at("vocab_path") : std::string("an in-memory vocabulary");
  throw DataError("vocabulary " + data.vocab_path.string() + " does not match the one checkpoint " +
                  checkpoint.string() + " was trained with (" + trained + ")");
}

EvalScores evaluate_ood(const fs::path& checkpoint, const fs::path& data_dir, const fs::path& src,
                        const fs::path& tgt, std::size_t beam_size) {
  const Model model = Model::load(checkpoint);
  const Dataset tokenizer = load_tokenizer(data_dir);
  check_vocabulary(model, tokenizer, checkpoint);
  return evaluate_corpus(model, tokenizer, tokenizer.read_pairs(src, tgt, Split::Test), beam_size);
}

}  // namespace unibias
