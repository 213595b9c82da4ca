#include "unibias/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "unibias/random.hpp"

namespace unibias {

namespace {

constexpr std::string_view kReservedTokens[] = {"<pad>", "<s>", "</s>", "<unk>"};

std::vector<std::string_view> split_spaces(std::string_view line) {
  std::vector<std::string_view> words;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && line[i] == ' ') ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ') ++j;
    if (j > i) words.push_back(line.substr(i, j - i));
    i = j;
  }
  return words;
}

std::string pair_key(std::string_view l, std::string_view r) {
  std::string k;
  k.reserve(l.size() + r.size() + 1);
  k.append(l);
  k.push_back('\x1f');
  k.append(r);
  return k;
}

// Merge every non-overlapping occurrence of (l, r), scanning left to right.
void apply_merge(std::vector<std::string>& symbols, const std::string& l, const std::string& r) {
  std::vector<std::string> out;
  out.reserve(symbols.size());
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    if (i + 1 < symbols.size() && symbols[i] == l && symbols[i + 1] == r) {
      out.push_back(l + r);
      ++i;
    } else {
      out.push_back(std::move(symbols[i]));
    }
  }
  symbols = std::move(out);
}

}  // namespace

// ---------------------------------------------------------------- Vocabulary

Vocabulary::Vocabulary() {
  for (auto t : kReservedTokens) add(t);
}

int Vocabulary::add(std::string_view token) {
  if (auto id = find(token)) return *id;
  const int id = static_cast<int>(tokens_.size());
  tokens_.emplace_back(token);
  counts_.push_back(0);
  index_.emplace(tokens_.back(), id);
  return id;
}

std::optional<int> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

int Vocabulary::id_or_unk(std::string_view token) const { return find(token).value_or(kUnkId); }

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw std::out_of_range("vocabulary id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

void Vocabulary::clear_counts() { std::fill(counts_.begin(), counts_.end(), 0); }

std::uint64_t Vocabulary::fingerprint() const {
  std::uint64_t h = 0;
  for (const auto& t : tokens_) h = mix64(h ^ hash_string(t));
  return h;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write vocabulary file " + path.string());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].find_first_of("\t\n") != std::string::npos)
      throw DataError("token with tab/newline cannot be stored in " + path.string());
    out << tokens_[i] << '\t' << counts_[i] << '\n';
  }
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read vocabulary file " + path.string());
  Vocabulary v;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos || tab == 0)
      throw DataError(path.string() + ":" + std::to_string(lineno + 1) + ": expected token<TAB>count");
    const std::string token = line.substr(0, tab);
    std::uint64_t count = 0;
    try {
      count = std::stoull(line.substr(tab + 1));
    } catch (const std::exception&) {
      throw DataError(path.string() + ":" + std::to_string(lineno + 1) + ": bad count");
    }
    if (lineno < kNumReserved) {
      if (token != kReservedTokens[lineno])
        throw DataError(path.string() + ": line " + std::to_string(lineno + 1) + " must hold reserved token " +
                        std::string(kReservedTokens[lineno]));
    } else {
      if (v.find(token)) throw DataError(path.string() + ": duplicate token '" + token + "'");
      v.add(token);
    }
    v.counts_[lineno] = count;
    ++lineno;
  }
  if (lineno < kNumReserved) throw DataError(path.string() + ": missing reserved tokens");
  return v;
}

// ------------------------------------------------------------------- Unigram

bool UnigramDistribution::strictly_positive() const {
  return !probs.empty() && std::all_of(probs.begin(), probs.end(), [](double p) { return p > 0.0; });
}

std::vector<double> UnigramDistribution::log_probs() const {
  std::vector<double> out(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (!(probs[i] > 0.0))
      throw std::domain_error("log-unigram undefined: token " + std::to_string(i) + " has zero probability");
    out[i] = std::log(probs[i]);
  }
  return out;
}

UnigramDistribution unigram_from_counts(std::span<const std::uint64_t> counts, double smoothing) {
  if (!(smoothing >= 0.0)) throw ConfigError("unigram smoothing must be non-negative");
  if (counts.empty()) throw ConfigError("unigram over an empty vocabulary");
  // Accumulate in integer space, then one division per entry.
  const std::uint64_t total = std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
  const double denom = static_cast<double>(total) + smoothing * static_cast<double>(counts.size());
  if (!(denom > 0.0)) throw ConfigError("unigram of an empty token stream needs positive smoothing");
  UnigramDistribution u;
  u.probs.resize(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) u.probs[i] = (static_cast<double>(counts[i]) + smoothing) / denom;
  return u;
}

UnigramDistribution estimate_unigram(const ParallelCorpus& corpus, const Vocabulary& vocab, double smoothing) {
  std::vector<std::uint64_t> counts(vocab.size(), 0);
  for (const auto& p : corpus.pairs)
    for (int id : p.target) {
      if (id < 0 || static_cast<std::size_t>(id) >= counts.size())
        throw DataError("target id " + std::to_string(id) + " outside vocabulary");
      ++counts[static_cast<std::size_t>(id)];
    }
  return unigram_from_counts(counts, smoothing);
}

void ParallelCorpus::validate(std::size_t vocab_size) const {
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    if (p.target.empty() || p.target.back() != kEosId)
      throw DataError("pair " + std::to_string(i) + ": target does not end with EOS");
    for (const auto* seq : {&p.source, &p.target})
      for (int id : *seq)
        if (id < 0 || static_cast<std::size_t>(id) >= vocab_size)
          throw DataError("pair " + std::to_string(i) + ": id " + std::to_string(id) + " outside vocabulary");
  }
}

// ----------------------------------------------------------------------- BPE

std::vector<std::string> utf8_chars(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    std::size_t len = 1;
    if (c >= 0xF0)
      len = 4;
    else if (c >= 0xE0)
      len = 3;
    else if (c >= 0xC0)
      len = 2;
    len = std::min(len, text.size() - i);
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

BpeModel::BpeModel(std::vector<std::string> alphabet, std::vector<Merge> merges, std::size_t vocab_size)
    : alphabet_(std::move(alphabet)), merges_(std::move(merges)), vocab_size_(vocab_size) {
  build_index();
}

void BpeModel::build_index() {
  vocab_ = Vocabulary();
  for (const auto& a : alphabet_) vocab_.add(a);
  rank_.clear();
  for (std::size_t i = 0; i < merges_.size(); ++i) {
    vocab_.add(merges_[i].first + merges_[i].second);
    rank_.emplace(pair_key(merges_[i].first, merges_[i].second), i);
  }
}

BpeModel BpeModel::train(std::span<const std::string> lines, std::size_t vocab_size) {
  std::map<std::string, std::uint64_t> word_freq;
  bool has_space = false;
  for (const auto& line : lines) {
    if (line.find(' ') != std::string::npos) has_space = true;
    for (auto w : split_spaces(line)) ++word_freq[std::string(w)];
  }
  if (word_freq.empty()) throw ConfigError("cannot train BPE on an empty corpus");

  std::set<std::string> chars;
  std::vector<std::pair<std::vector<std::string>, std::uint64_t>> words;
  for (const auto& [w, f] : word_freq) {
    auto cs = utf8_chars(w);
    chars.insert(cs.begin(), cs.end());
    words.emplace_back(std::move(cs), f);
  }
  if (has_space) chars.insert(std::string(kSpaceMarker));
  std::vector<std::string> alphabet(chars.begin(), chars.end());
  if (vocab_size < alphabet.size() + kNumReserved)
    throw ConfigError("BPE vocabulary size " + std::to_string(vocab_size) + " is below alphabet size " +
                      std::to_string(alphabet.size()) + " + 4 reserved");

  std::set<std::string> known(alphabet.begin(), alphabet.end());
  std::vector<Merge> merges;
  while (known.size() + kNumReserved < vocab_size) {
    std::map<Merge, std::uint64_t> pair_counts;
    for (const auto& [syms, f] : words)
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) pair_counts[{syms[i], syms[i + 1]}] += f;
    if (pair_counts.empty()) break;
    auto best = pair_counts.begin();
    for (auto it = pair_counts.begin(); it != pair_counts.end(); ++it)
      if (it->second > best->second) best = it;  // map order gives the lexicographic tie-break
    const Merge m = best->first;
    merges.push_back(m);
    known.insert(m.first + m.second);
    for (auto& [syms, f] : words) apply_merge(syms, m.first, m.second);
  }
  return BpeModel(std::move(alphabet), std::move(merges), vocab_size);
}

std::vector<std::string> BpeModel::segment_word(const std::vector<std::string>& chars) const {
  std::vector<std::string> syms = chars;
  while (syms.size() > 1) {
    std::size_t best_rank = merges_.size();
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      auto it = rank_.find(pair_key(syms[i], syms[i + 1]));
      if (it != rank_.end()) best_rank = std::min(best_rank, it->second);
    }
    if (best_rank == merges_.size()) break;
    apply_merge(syms, merges_[best_rank].first, merges_[best_rank].second);
  }
  return syms;
}

std::vector<std::string> BpeModel::segment(std::string_view line) const {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < line.size()) {
    if (line[i] == ' ') {
      out.emplace_back(kSpaceMarker);
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ') ++j;
    for (auto& s : segment_word(utf8_chars(line.substr(i, j - i)))) out.push_back(std::move(s));
    i = j;
  }
  return out;
}

std::vector<int> BpeModel::tokenize(std::string_view line) const {
  std::vector<int> ids;
  for (const auto& s : segment(line)) ids.push_back(vocab_.id_or_unk(s));
  return ids;
}

std::string BpeModel::detokenize(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (id == kPadId || id == kBosId || id == kEosId) continue;
    const auto& t = vocab_.token(id);
    if (t == kSpaceMarker)
      out.push_back(' ');
    else
      out += t;
  }
  return out;
}

void BpeModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write BPE model " + path.string());
  out << "bpe-v1 " << vocab_size_ << '\n';
  for (const auto& [l, r] : merges_) out << l << ' ' << r << '\n';
}

BpeModel BpeModel::load(const std::filesystem::path& path, const std::filesystem::path& vocab_path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read BPE model " + path.string());
  std::string header;
  std::getline(in, header);
  std::istringstream hs(header);
  std::string magic;
  std::size_t vocab_size = 0;
  if (!(hs >> magic >> vocab_size) || magic != "bpe-v1")
    throw DataError(path.string() + ": expected header 'bpe-v1 <vocab_size>'");
  std::vector<Merge> merges;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto sp = line.find(' ');
    if (sp == std::string::npos || sp == 0 || sp + 1 >= line.size())
      throw DataError(path.string() + ": malformed merge line '" + line + "'");
    merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
  }
  const Vocabulary vocab = Vocabulary::load(vocab_path);
  std::vector<std::string> alphabet;
  for (std::size_t i = kNumReserved; i < vocab.size(); ++i) {
    const auto& t = vocab.tokens()[i];
    if (utf8_chars(t).size() == 1) alphabet.push_back(t);
  }
  BpeModel model(std::move(alphabet), std::move(merges), vocab_size);
  if (model.vocabulary().tokens() != vocab.tokens())
    throw DataError("tokenizer mismatch: BPE model " + path.string() + " does not produce vocabulary " +
                    vocab_path.string());
  return model;
}

std::vector<int> tokenize_words(const Vocabulary& vocab, std::string_view line) {
  std::vector<int> ids;
  for (auto w : split_spaces(line)) ids.push_back(vocab.id_or_unk(w));
  return ids;
}

std::string detokenize_words(const Vocabulary& vocab, std::span<const int> ids) {
  std::string out;
  for (int id : ids) {
    if (id == kPadId || id == kBosId || id == kEosId) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

// ----------------------------------------------------------------- Synthetic

TaskKind parse_task_kind(std::string_view name) {
  if (name == "copy") return TaskKind::Copy;
  if (name == "reverse") return TaskKind::Reverse;
  if (name == "substitute") return TaskKind::Substitute;
  throw ConfigError("unknown task kind '" + std::string(name) + "' (expected copy, reverse or substitute)");
}

std::string_view task_kind_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::Copy:
      return "copy";
    case TaskKind::Reverse:
      return "reverse";
    case TaskKind::Substitute:
      return "substitute";
  }
  return "?";
}

namespace {

class ZipfSampler {
 public:
  ZipfSampler(std::size_t n, double s) : cdf_(n) {
    double acc = 0.0;
    for (std::size_t r = 0; r < n; ++r) cdf_[r] = (acc += std::pow(static_cast<double>(r + 1), -s));
    for (auto& c : cdf_) c /= acc;
    cdf_.back() = 1.0;
  }
  std::size_t operator()(Rng& rng) const {
    const double u = rng.uniform();
    return static_cast<std::size_t>(std::upper_bound(cdf_.begin(), cdf_.end(), u) - cdf_.begin());
  }

 private:
  std::vector<double> cdf_;
};

ParallelCorpus make_split(const SyntheticSpec& spec, const std::vector<int>& mapping, std::size_t count, Split split,
                          std::uint64_t stream) {
  Rng rng(derive_seed({spec.seed, stream}));
  const std::size_t content = spec.vocab_size - kNumReserved;
  ZipfSampler zipf(content, spec.zipf_exponent);
  ParallelCorpus c;
  c.split = split;
  c.pairs.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
    SentencePair p;
    p.source.resize(len);
    for (auto& id : p.source) id = static_cast<int>(zipf(rng)) + kNumReserved;
    switch (spec.kind) {
      case TaskKind::Copy:
        p.target = p.source;
        break;
      case TaskKind::Reverse:
        p.target.assign(p.source.rbegin(), p.source.rend());
        break;
      case TaskKind::Substitute:
        for (int id : p.source) p.target.push_back(mapping[static_cast<std::size_t>(id)]);
        break;
    }
    p.target.push_back(kEosId);
    c.pairs.push_back(std::move(p));
  }
  return c;
}

}  // namespace

SyntheticTask generate_synthetic_task(const SyntheticSpec& spec) {
  if (spec.vocab_size < 10) throw ConfigError("synthetic vocabulary size must be at least 10");
  if (spec.pairs < 100) throw ConfigError("synthetic pair count must be at least 100");
  if (spec.min_len == 0 || spec.min_len > spec.max_len) throw ConfigError("synthetic length range is empty");
  if (!(spec.zipf_exponent >= 0.0)) throw ConfigError("Zipf exponent must be non-negative");

  SyntheticTask task;
  for (std::size_t i = kNumReserved; i < spec.vocab_size; ++i) task.vocab.add("w" + std::to_string(i - kNumReserved));

  task.mapping.resize(spec.vocab_size);
  std::iota(task.mapping.begin(), task.mapping.end(), 0);
  if (spec.kind == TaskKind::Substitute) {
    Rng rng(derive_seed({spec.seed, 0x5eed}));
    rng.shuffle(task.mapping.begin() + kNumReserved, task.mapping.end());
  }

  task.train = make_split(spec, task.mapping, spec.pairs, Split::Train, 1);
  task.valid = make_split(spec, task.mapping, spec.valid_pairs, Split::Valid, 2);
  task.test = make_split(spec, task.mapping, spec.test_pairs, Split::Test, 3);
  for (const auto& p : task.train.pairs)
    for (int id : p.target) task.vocab.add_count(id);
  return task;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

void write_lines(const std::filesystem::path& path, std::span<const std::string> lines) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
}

}  // namespace unibias
