#pragma once

// Tokenization, vocabularies, unigram estimation and synthetic translation
// tasks.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "unibias/errors.hpp"

namespace unibias {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kNumReserved = 4;

// Word-boundary marker emitted by the BPE tokenizer for every space.
inline constexpr std::string_view kSpaceMarker = "\xE2\x96\x81";  // U+2581

class Vocabulary {
 public:
  // Starts with <pad>, <s>, </s>, <unk> at ids 0-3.
  Vocabulary();

  // Id of `token`, inserting it with zero count when new.
  int add(std::string_view token);
  std::optional<int> find(std::string_view token) const;
  int id_or_unk(std::string_view token) const;

  const std::string& token(int id) const;
  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  std::uint64_t count(int id) const { return counts_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::uint64_t>& counts() const noexcept { return counts_; }
  void add_count(int id, std::uint64_t n = 1) { counts_.at(static_cast<std::size_t>(id)) += n; }
  void clear_counts();

  // Hash of the token list (not the counts); identifies compatible checkpoints.
  std::uint64_t fingerprint() const;

  // `token<TAB>count` per line; id = line number.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary&) const = default;

 private:
  std::vector<std::string> tokens_;
  std::vector<std::uint64_t> counts_;
  std::unordered_map<std::string, int> index_;
};

struct UnigramDistribution {
  std::vector<double> probs;

  std::size_t size() const noexcept { return probs.size(); }
  bool strictly_positive() const;
  std::vector<double> log_probs() const;  // throws when some entry is zero
};

struct SentencePair {
  std::vector<int> source;
  std::vector<int> target;  // ends with EOS
};

enum class Split { Train, Valid, Test };

struct ParallelCorpus {
  std::vector<SentencePair> pairs;
  Split split = Split::Train;

  std::size_t size() const noexcept { return pairs.size(); }
  bool empty() const noexcept { return pairs.empty(); }
  // Throws DataError on ids outside the vocabulary or a missing final EOS.
  void validate(std::size_t vocab_size) const;
};

// (count(t) + k) / (N + k |V|) over the target side, EOS included once per
// sentence. PAD and BOS never occur, so they receive the smoothing floor.
UnigramDistribution estimate_unigram(const ParallelCorpus& corpus, const Vocabulary& vocab, double smoothing = 1.0);
UnigramDistribution unigram_from_counts(std::span<const std::uint64_t> counts, double smoothing = 1.0);

// Splits a UTF-8 string into code points.
std::vector<std::string> utf8_chars(std::string_view text);

// Word-internal byte-pair encoding over UTF-8 code points. Each space in the
// input becomes a standalone marker token, so detokenization is exact for any
// line whose characters are all known.
class BpeModel {
 public:
  using Merge = std::pair<std::string, std::string>;

  BpeModel() = default;
  BpeModel(std::vector<std::string> alphabet, std::vector<Merge> merges, std::size_t vocab_size);

  // Most frequent adjacent pair first; ties go to the lexicographically
  // smallest (left, right).
  static BpeModel train(std::span<const std::string> lines, std::size_t vocab_size);

  const std::vector<std::string>& alphabet() const noexcept { return alphabet_; }
  const std::vector<Merge>& merges() const noexcept { return merges_; }
  std::size_t target_vocab_size() const noexcept { return vocab_size_; }

  // Reserved tokens, then the alphabet, then merge products in merge order.
  const Vocabulary& vocabulary() const noexcept { return vocab_; }

  std::vector<std::string> segment(std::string_view line) const;
  std::vector<int> tokenize(std::string_view line) const;
  std::string detokenize(std::span<const int> ids) const;

  // Header `bpe-v1 <vocab_size>` then one `left right` merge per line. The
  // alphabet is recovered from the companion vocabulary file.
  void save(const std::filesystem::path& path) const;
  static BpeModel load(const std::filesystem::path& path, const std::filesystem::path& vocab_path);

 private:
  void build_index();
  std::vector<std::string> segment_word(const std::vector<std::string>& chars) const;

  std::vector<std::string> alphabet_;
  std::vector<Merge> merges_;
  std::size_t vocab_size_ = 0;
  Vocabulary vocab_;
  std::unordered_map<std::string, std::size_t> rank_;  // "left\x1fright" -> merge index
};

// Whitespace tokenizer over a fixed vocabulary (used for synthetic tasks).
std::vector<int> tokenize_words(const Vocabulary& vocab, std::string_view line);
std::string detokenize_words(const Vocabulary& vocab, std::span<const int> ids);

enum class TaskKind { Copy, Reverse, Substitute };
TaskKind parse_task_kind(std::string_view name);
std::string_view task_kind_name(TaskKind kind);

struct SyntheticSpec {
  TaskKind kind = TaskKind::Substitute;
  std::size_t vocab_size = 200;  // including the 4 reserved tokens
  double zipf_exponent = 1.0;
  std::size_t pairs = 10000;  // training pairs
  std::size_t valid_pairs = 500;
  std::size_t test_pairs = 500;
  std::size_t min_len = 3;
  std::size_t max_len = 10;
  std::uint64_t seed = 1;
};

struct SyntheticTask {
  Vocabulary vocab;  // counts from the training targets
  ParallelCorpus train, valid, test;
  std::vector<int> mapping;  // SUBSTITUTE: source id -> target id (identity otherwise)
};

// Source tokens drawn i.i.d. from Zipf(s) over the content vocabulary
// (rank 1 = id 4). Bitwise reproducible given the spec.
SyntheticTask generate_synthetic_task(const SyntheticSpec& spec);

std::vector<std::string> read_lines(const std::filesystem::path& path);
void write_lines(const std::filesystem::path& path, std::span<const std::string> lines);

}  // namespace unibias
