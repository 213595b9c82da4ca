#include "unibias/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "unibias/binary_io.hpp"
#include "unibias/decoding.hpp"
#include "unibias/errors.hpp"
#include "unibias/metrics.hpp"

namespace unibias {

namespace {

constexpr char kStateMagic[] = "UNIBIAS-STATE";
constexpr std::uint32_t kStateVersion = 1;

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string model_fingerprint(const ModelConfig& c) {
  std::ostringstream s;
  s << c.layers << '/' << c.heads << '/' << c.d_model << '/' << c.d_ffn << '/' << fmt(c.dropout) << '/'
    << c.vocab_size << '/' << c.max_len << '/' << c.decoder_only;
  return s.str();
}

}  // namespace

// ------------------------------------------------------------------- Config

void TrainingConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (batch_tokens == 0) throw ConfigError("batch_tokens must be positive");
  if (eval_interval == 0 || probe_interval == 0) throw ConfigError("eval_interval and probe_interval must be positive");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw ConfigError("label_smoothing must lie in [0, 1)");
  if (regularizer) {
    if (!(regularizer->lambda > 0.0)) throw ConfigError("regularizer lambda must be positive");
    if (regularizer->switch_step >= max_steps && max_steps > 0)
      throw ConfigError("regularizer switch_step " + std::to_string(regularizer->switch_step) +
                        " must be below max_steps " + std::to_string(max_steps));
  }
}

std::string TrainingConfig::fingerprint() const {
  std::ostringstream s;
  s << "lr=" << fmt(learning_rate) << ";warmup=" << warmup_steps << ";betas=" << fmt(beta1) << ',' << fmt(beta2)
    << ";eps=" << fmt(adam_eps) << ";batch_tokens=" << batch_tokens << ";eval=" << eval_interval
    << ";patience=" << patience << ";alpha=" << fmt(label_smoothing) << ";probe=" << probe_interval << ','
    << probe_positions << ";valid=" << valid_sentences << ";seed=" << seed;
  if (regularizer) s << ";reg=" << fmt(regularizer->lambda) << ',' << regularizer->switch_step;
  return s.str();
}

double learning_rate_at(const TrainingConfig& config, std::size_t t) {
  if (config.warmup_steps == 0) return config.learning_rate;
  const double ts = static_cast<double>(std::max<std::size_t>(t, 1)), w = static_cast<double>(config.warmup_steps);
  return config.learning_rate * std::min(ts / w, std::sqrt(w / ts));
}

// --------------------------------------------------------------------- Adam

void adam_step(std::span<Tensor> params, AdamState& state, double lr, double beta1, double beta2, double eps) {
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), 0.0);
      state.v.emplace_back(p.size(), 0.0);
    }
  }
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad())
      if (!std::isfinite(g)) throw TrainingError("non-finite gradient in parameter '" + p.name() + "'");
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const bool has = params[i].has_grad();
    const auto g = has ? params[i].grad() : std::span<const double>{};
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double gj = has ? g[j] : 0.0;
      m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
      v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
      data[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
    }
  }
}

// ------------------------------------------------------------------ Batches

Tensor batch_loss(const Model& model, const Batch& batch, const TrainingConfig& config,
                  const UnigramDistribution& unigram, std::size_t step, Rng* dropout_rng) {
  const ForwardContext ctx{dropout_rng != nullptr, dropout_rng};
  Tensor logits = model.forward_logits(batch, ctx);
  if (config.regularizer && step < config.regularizer->switch_step)
    return anti_unigram_loss(logits, batch.labels, unigram.probs, config.regularizer->lambda);
  return label_smoothed_xent(logits, batch.labels, config.label_smoothing);
}

std::vector<std::vector<std::size_t>> make_batches(const ParallelCorpus& corpus, std::size_t batch_tokens,
                                                   std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order.begin(), order.end());
  auto length = [&](std::size_t i) { return corpus.pairs[i].source.size() + corpus.pairs[i].target.size(); };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return length(a) < length(b); });

  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> current;
  std::size_t tokens = 0;
  for (auto i : order) {
    const auto n = corpus.pairs[i].target.size();
    if (!current.empty() && tokens + n > batch_tokens) {
      batches.push_back(std::move(current));
      current.clear();
      tokens = 0;
    }
    current.push_back(i);
    tokens += n;
  }
  if (!current.empty()) batches.push_back(std::move(current));
  rng.shuffle(batches.begin(), batches.end());
  return batches;
}

// ------------------------------------------------------------------- Probes

std::vector<ProbePosition> choose_probe_positions(const ParallelCorpus& corpus, std::size_t count,
                                                  std::uint64_t seed) {
  std::vector<ProbePosition> all;
  for (std::size_t p = 0; p < corpus.size(); ++p)
    for (std::size_t t = 0; t < corpus.pairs[p].target.size(); ++t) all.push_back({p, t});
  if (count < all.size()) {
    Rng rng(seed);
    // Partial Fisher-Yates: the first `count` entries become a uniform sample.
    for (std::size_t i = 0; i < count; ++i) std::swap(all[i], all[i + rng.below(all.size() - i)]);
    all.resize(count);
  }
  std::sort(all.begin(), all.end(), [](const ProbePosition& a, const ProbePosition& b) {
    return a.pair != b.pair ? a.pair < b.pair : a.position < b.position;
  });
  return all;
}

DivergenceRecord divergence_stats(std::span<const std::vector<double>> dists, std::span<const int> targets,
                                  const UnigramDistribution& unigram) {
  if (dists.empty()) throw std::invalid_argument("divergence probe: empty sample");
  const std::size_t v = unigram.size();
  const std::vector<double> uniform(v, 1.0 / static_cast<double>(v));
  std::vector<double> a, b, c;
  for (std::size_t i = 0; i < dists.size(); ++i) {
    a.push_back(kl_divergence(dists[i], unigram.probs));
    b.push_back(kl_divergence(dists[i], uniform));
    c.push_back(-std::log(dists[i][static_cast<std::size_t>(targets[i])]));
  }
  const auto sa = summarize(a), sb = summarize(b), sc = summarize(c);
  DivergenceRecord r;
  r.kl_unigram = sa.mean;
  r.kl_uniform = sb.mean;
  r.xent_empirical = sc.mean;
  r.kl_unigram_se = sa.stderr_mean;
  r.kl_uniform_se = sb.stderr_mean;
  r.xent_empirical_se = sc.stderr_mean;
  return r;
}

DivergenceRecord probe_divergences(const Model& model, const ParallelCorpus& corpus,
                                   std::span<const ProbePosition> positions, const UnigramDistribution& unigram) {
  if (positions.empty()) throw std::invalid_argument("divergence probe: empty sample");
  NoGradScope no_grad;
  std::vector<const SentencePair*> pairs;
  std::map<std::size_t, std::size_t> slot;
  for (const auto& p : positions)
    if (slot.emplace(p.pair, pairs.size()).second) pairs.push_back(&corpus.pairs.at(p.pair));
  const auto batch = Batch::from_pairs(std::span<const SentencePair* const>(pairs));
  const Tensor logits = model.forward_logits(batch, ForwardContext{});
  const std::size_t v = model.config().vocab_size;
  std::vector<std::vector<double>> dists;
  std::vector<int> targets;
  for (const auto& p : positions) {
    const std::size_t row = batch.tgt.offset[slot[p.pair]] + p.position;
    dists.push_back(softmax_values(logits.data().subspan(row * v, v)));
    targets.push_back(batch.labels[row]);
  }
  return divergence_stats(dists, targets, unigram);
}

std::optional<BiasDriftRecord> probe_bias_drift(const Model& model, const UnigramDistribution& unigram) {
  const auto& out = model.output();
  if (!out.has_bias()) return std::nullopt;
  BiasDriftRecord r;
  r.kl_unigram = kl_divergence(softmax_values(out.bias.data()), unigram.probs);
  r.norm = l2_norm(out.bias);
  return r;
}

// ---------------------------------------------------------------------- Log

std::string TrainingLog::serialize() const {
  std::ostringstream s;
  for (const auto& p : losses) s << p.step << ",loss,value=" << fmt(p.loss) << '\n';
  for (const auto& p : validation) s << p.step << ",val_bleu,value=" << fmt(p.bleu) << '\n';
  for (const auto& d : divergences)
    s << d.step << ",probe,kl_unigram=" << fmt(d.kl_unigram) << ",kl_uniform=" << fmt(d.kl_uniform)
      << ",xent_empirical=" << fmt(d.xent_empirical) << ",kl_unigram_se=" << fmt(d.kl_unigram_se)
      << ",kl_uniform_se=" << fmt(d.kl_uniform_se) << ",xent_empirical_se=" << fmt(d.xent_empirical_se) << '\n';
  for (const auto& b : bias_drift)
    s << b.step << ",bias_drift,kl_unigram=" << fmt(b.kl_unigram) << ",norm=" << fmt(b.norm) << '\n';
  s << best_step << ",best";
  if (best_bleu) s << ",bleu=" << fmt(*best_bleu);
  s << '\n' << final_step << ",end,stopped_early=" << (stopped_early ? 1 : 0);
  if (!abort_reason.empty()) s << ",reason=" << abort_reason;
  s << '\n';
  return s.str();
}

TrainingLog TrainingLog::parse(const std::string& text) {
  TrainingLog log;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto fail = [&](const std::string& why) {
      return DataError("training log line " + std::to_string(line_no) + ": " + why);
    };
    const auto c1 = line.find(',');
    if (c1 == std::string::npos) throw fail("missing kind");
    const auto c2 = line.find(',', c1 + 1);
    const std::size_t step = std::stoull(line.substr(0, c1));
    const std::string kind = line.substr(c1 + 1, c2 == std::string::npos ? std::string::npos : c2 - c1 - 1);
    std::map<std::string, std::string> fields;
    std::size_t pos = c2;
    while (pos != std::string::npos) {
      const auto eq = line.find('=', pos + 1);
      if (eq == std::string::npos) throw fail("field without value");
      const std::string key = line.substr(pos + 1, eq - pos - 1);
      if (key == "reason") {
        fields[key] = line.substr(eq + 1);
        break;
      }
      const auto next = line.find(',', eq + 1);
      fields[key] = line.substr(eq + 1, next == std::string::npos ? std::string::npos : next - eq - 1);
      pos = next;
    }
    auto num = [&](const std::string& key) {
      auto it = fields.find(key);
      if (it == fields.end()) throw fail("missing field " + key);
      return std::strtod(it->second.c_str(), nullptr);
    };
    if (kind == "loss") {
      log.losses.push_back({step, num("value")});
    } else if (kind == "val_bleu") {
      log.validation.push_back({step, num("value")});
    } else if (kind == "probe") {
      log.divergences.push_back({step, num("kl_unigram"), num("kl_uniform"), num("xent_empirical"),
                                 num("kl_unigram_se"), num("kl_uniform_se"), num("xent_empirical_se")});
    } else if (kind == "bias_drift") {
      log.bias_drift.push_back({step, num("kl_unigram"), num("norm")});
    } else if (kind == "best") {
      log.best_step = step;
      if (fields.count("bleu")) log.best_bleu = num("bleu");
    } else if (kind == "end") {
      log.final_step = step;
      log.stopped_early = num("stopped_early") != 0.0;
      if (fields.count("reason")) log.abort_reason = fields["reason"];
    } else {
      throw fail("unknown record kind '" + kind + "'");
    }
  }
  return log;
}

// -------------------------------------------------------------- Validation

double validation_bleu(const Model& model, const ParallelCorpus& corpus, std::size_t limit) {
  const std::size_t n = limit ? std::min(limit, corpus.size()) : corpus.size();
  if (n == 0) throw std::invalid_argument("validation_bleu: empty corpus");
  std::vector<std::vector<int>> sources, refs, hyps;
  for (std::size_t i = 0; i < n; ++i) {
    sources.push_back(corpus.pairs[i].source);
    refs.push_back(strip_eos(corpus.pairs[i].target));
  }
  DecodeOptions opt;
  opt.max_len = 0;
  for (auto& h : model_greedy_decode(model, sources, opt)) hyps.push_back(strip_eos(std::move(h.tokens)));
  return bleu(hyps, refs);
}

// -------------------------------------------------------------------- Train

namespace {

struct LoopState {
  std::size_t step = 0, epoch = 0, batch_index = 0, since_best = 0;
  AdamState adam;
  std::vector<std::vector<double>> best;
  TrainingLog log;
};

void write_nested(std::ostream& out, const std::vector<std::vector<double>>& v) {
  binary::write<std::uint64_t>(out, v.size());
  for (const auto& x : v) binary::write_doubles(out, x);
}

std::vector<std::vector<double>> read_nested(std::istream& in) {
  const auto n = binary::read<std::uint64_t>(in);
  if (n > (1u << 20)) throw DataError("state file: implausible array count");
  std::vector<std::vector<double>> v(n);
  for (auto& x : v) x = binary::read_doubles(in);
  return v;
}

void save_state(const std::filesystem::path& path, const Model& model, const TrainingConfig& config,
                const LoopState& s) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write training state " + tmp);
    out.write(kStateMagic, sizeof(kStateMagic));
    binary::write(out, kStateVersion);
    binary::write_string(out, config.fingerprint());
    binary::write_string(out, model_fingerprint(model.config()));
    for (std::uint64_t v : {std::uint64_t{s.step}, std::uint64_t{s.epoch}, std::uint64_t{s.batch_index},
                            std::uint64_t{s.since_best}, std::uint64_t{s.adam.step}})
      binary::write(out, v);
    write_nested(out, s.adam.m);
    write_nested(out, s.adam.v);
    write_nested(out, model.snapshot());
    write_nested(out, s.best);
    binary::write_string(out, s.log.serialize());
    if (!out) throw DataError("failed writing training state " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

LoopState load_state(const std::filesystem::path& path, Model& model, const TrainingConfig& config) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read training state " + path.string());
  char magic[sizeof(kStateMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kStateMagic, sizeof(magic)) != 0)
    throw DataError(path.string() + " is not a training state file");
  if (binary::read<std::uint32_t>(in) != kStateVersion) throw DataError(path.string() + ": unsupported version");
  if (binary::read_string(in) != config.fingerprint())
    throw ConfigError(path.string() + " was written with a different training configuration");
  if (binary::read_string(in) != model_fingerprint(model.config()))
    throw ConfigError(path.string() + " was written for a different model configuration");
  LoopState s;
  s.step = binary::read<std::uint64_t>(in);
  s.epoch = binary::read<std::uint64_t>(in);
  s.batch_index = binary::read<std::uint64_t>(in);
  s.since_best = binary::read<std::uint64_t>(in);
  s.adam.step = binary::read<std::uint64_t>(in);
  s.adam.m = read_nested(in);
  s.adam.v = read_nested(in);
  model.restore(read_nested(in));
  s.best = read_nested(in);
  s.log = TrainingLog::parse(binary::read_string(in));
  return s;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

}  // namespace

TrainingLog train(Model& model, const ParallelCorpus& train_set, const ParallelCorpus& valid_set,
                  const UnigramDistribution& unigram, const TrainingConfig& config, const TrainOptions& options) {
  config.validate();
  if (train_set.empty()) throw DataError("training corpus is empty");
  if (valid_set.empty() && config.max_steps > 0) throw DataError("validation corpus is empty");
  if (unigram.size() != model.config().vocab_size)
    throw ConfigError("unigram distribution does not match the model vocabulary");

  const auto& dir = options.checkpoint_dir;
  const bool persist = !dir.empty();
  if (persist) std::filesystem::create_directories(dir);
  const auto state_path = dir / "state.bin";

  const auto probes =
      choose_probe_positions(train_set, config.probe_positions, derive_seed({config.seed, hash_string("probe")}));
  auto params = model.parameters();

  LoopState s;
  auto record_probes = [&] {
    auto d = probe_divergences(model, train_set, probes, unigram);
    d.step = s.step;
    s.log.divergences.push_back(d);
    if (auto b = probe_bias_drift(model, unigram)) {
      b->step = s.step;
      s.log.bias_drift.push_back(*b);
    }
  };
  auto save_best = [&] {
    if (!persist) return;
    // Model copies share parameter storage, so swap the values in and out.
    const auto current = model.snapshot();
    const auto metadata = model.metadata();
    model.restore(s.best);
    model.metadata()["best_step"] = std::to_string(s.log.best_step);
    if (s.log.best_bleu) model.metadata()["best_bleu"] = fmt(*s.log.best_bleu);
    model.save(dir / "best.ckpt");
    model.restore(current);
    model.metadata() = metadata;
  };

  if (options.resume && persist && std::filesystem::exists(state_path)) {
    s = load_state(state_path, model, config);
  } else {
    s.best = model.snapshot();
    record_probes();
    save_best();
  }

  auto epoch_batches = [&] {
    return make_batches(train_set, config.batch_tokens,
                        derive_seed({config.seed, hash_string("epoch"), s.epoch}));
  };
  auto batches = epoch_batches();

  try {
    while (s.step < config.max_steps && !s.log.stopped_early && s.log.abort_reason.empty()) {
      if (s.batch_index >= batches.size()) {
        ++s.epoch;
        s.batch_index = 0;
        batches = epoch_batches();
      }
      std::vector<const SentencePair*> pairs;
      for (auto i : batches[s.batch_index]) pairs.push_back(&train_set.pairs[i]);
      ++s.batch_index;
      const auto batch = Batch::from_pairs(std::span<const SentencePair* const>(pairs));

      Rng dropout_rng(derive_seed({config.seed, hash_string("dropout"), s.step}));
      double loss_value = 0.0;
      {
        Tape tape;
        const Tensor loss = batch_loss(model, batch, config, unigram, s.step, &dropout_rng);
        loss_value = loss.item();
        if (!std::isfinite(loss_value))
          throw TrainingError("non-finite training loss at update " + std::to_string(s.step + 1));
        for (auto& p : params) p.zero_grad();
        tape.backward(loss);
      }
      adam_step(params, s.adam, learning_rate_at(config, s.step + 1), config.beta1, config.beta2, config.adam_eps);
      ++s.step;
      s.log.losses.push_back({s.step, loss_value});

      if (s.step % config.probe_interval == 0) record_probes();
      if (s.step % config.eval_interval == 0 || s.step == config.max_steps) {
        const double score = validation_bleu(model, valid_set, config.valid_sentences);
        s.log.validation.push_back({s.step, score});
        if (!s.log.best_bleu || score > *s.log.best_bleu) {
          s.log.best_bleu = score;
          s.log.best_step = s.step;
          s.best = model.snapshot();
          s.since_best = 0;
          save_best();
        } else {
          ++s.since_best;
        }
        if (config.patience > 0 && s.since_best >= config.patience) s.log.stopped_early = true;
        s.log.final_step = s.step;
        if (persist) save_state(state_path, model, config, s);
      }
    }
  } catch (const TrainingError& e) {
    s.log.abort_reason = e.what();
    s.log.final_step = s.step;
    model.restore(s.best);
    if (persist) write_text(dir / "log.txt", s.log.serialize());
    throw;
  }

  s.log.final_step = s.step;
  if (persist) save_state(state_path, model, config, s);
  model.restore(s.best);
  if (persist) write_text(dir / "log.txt", s.log.serialize());
  return s.log;
}

}  // namespace unibias
