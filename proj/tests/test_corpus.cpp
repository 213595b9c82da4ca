#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>

#include "unibias/corpus.hpp"
#include "unibias/random.hpp"

using namespace unibias;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("unibias_corpus_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

ParallelCorpus targets_only(std::vector<std::vector<int>> targets) {
  ParallelCorpus c;
  for (auto& t : targets) c.pairs.push_back({{}, std::move(t)});
  return c;
}

// Least-squares slope of y on x.
double ls_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
  mx /= n, my /= n;
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) sxy += (x[i] - mx) * (y[i] - my), sxx += (x[i] - mx) * (x[i] - mx);
  return sxy / sxx;
}

}  // namespace

TEST(Vocabulary, ReservedIdsAndUniqueness) {
  Vocabulary v;
  EXPECT_EQ(v.size(), 4u);
  EXPECT_EQ(v.token(kPadId), "<pad>");
  EXPECT_EQ(v.token(kEosId), "</s>");
  const int a = v.add("a");
  EXPECT_EQ(a, 4);
  EXPECT_EQ(v.add("a"), 4);
  EXPECT_EQ(v.id_or_unk("zzz"), kUnkId);
}

TEST(Vocabulary, FileRoundTrip) {
  auto dir = temp_dir("vocab");
  Vocabulary v;
  v.add_count(v.add("hello"), 7);
  v.add_count(kEosId, 3);
  v.save(dir / "v.txt");
  auto back = Vocabulary::load(dir / "v.txt");
  EXPECT_EQ(back.tokens(), v.tokens());
  EXPECT_EQ(back.counts(), v.counts());
  EXPECT_EQ(back.fingerprint(), v.fingerprint());
}

TEST(Vocabulary, LoadRejectsMissingReserved) {
  auto dir = temp_dir("badvocab");
  write_lines(dir / "v.txt", std::vector<std::string>{"a\t1"});
  EXPECT_THROW(Vocabulary::load(dir / "v.txt"), DataError);
}

TEST(Unigram, CountsWithoutSmoothing) {
  Vocabulary v;
  const int a = v.add("a"), b = v.add("b");
  // stream [a, a, b] over V = {a, b}: restrict to the two content entries
  std::vector<std::uint64_t> counts = {2, 1};
  auto u = unigram_from_counts(counts, 0.0);
  EXPECT_DOUBLE_EQ(u.probs[0], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(u.probs[1], 1.0 / 3.0);
  (void)a, (void)b;
}

TEST(Unigram, AddOneSmoothing) {
  // stream [a, a, b], k = 1, V = {a, b, c}: (2+1)/6, (1+1)/6, (0+1)/6
  std::vector<std::uint64_t> counts = {2, 1, 0};
  auto u = unigram_from_counts(counts, 1.0);
  EXPECT_DOUBLE_EQ(u.probs[0], 3.0 / 6.0);
  EXPECT_DOUBLE_EQ(u.probs[1], 2.0 / 6.0);
  EXPECT_DOUBLE_EQ(u.probs[2], 1.0 / 6.0);
}

TEST(Unigram, EmptyStreamIsUniform) {
  Vocabulary v;
  v.add("a");
  ParallelCorpus empty;
  auto u = estimate_unigram(empty, v, 1.0);
  for (double p : u.probs) EXPECT_DOUBLE_EQ(p, 1.0 / 5.0);
}

TEST(Unigram, EosCountedOncePerSentencePadBosFloor) {
  Vocabulary v;
  const int a = v.add("a");
  auto c = targets_only({{a, kEosId}, {a, a, kEosId}});
  auto u = estimate_unigram(c, v, 1.0);
  // N = 5, |V| = 5
  EXPECT_DOUBLE_EQ(u.probs[kEosId], 3.0 / 10.0);
  EXPECT_DOUBLE_EQ(u.probs[static_cast<std::size_t>(a)], 4.0 / 10.0);
  EXPECT_DOUBLE_EQ(u.probs[kPadId], 1.0 / 10.0);
  EXPECT_DOUBLE_EQ(u.probs[kBosId], 1.0 / 10.0);
}

TEST(Unigram, ZeroSmoothingLeavesUnseenAtZeroAndLogFails) {
  Vocabulary v;
  const int a = v.add("a");
  auto u = estimate_unigram(targets_only({{a, kEosId}}), v, 0.0);
  EXPECT_FALSE(u.strictly_positive());
  EXPECT_THROW(u.log_probs(), std::domain_error);
}

TEST(Unigram, SumsToOneAndPermutationEquivariant) {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::uint64_t> counts(13);
    for (auto& c : counts) c = rng.below(1000);
    auto u = unigram_from_counts(counts, 0.5);
    double s = 0.0;
    for (double p : u.probs) s += p;
    EXPECT_NEAR(s, 1.0, 1e-12);
    std::vector<std::size_t> perm(counts.size());
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm.begin(), perm.end());
    std::vector<std::uint64_t> permuted(counts.size());
    for (std::size_t i = 0; i < perm.size(); ++i) permuted[i] = counts[perm[i]];
    auto up = unigram_from_counts(permuted, 0.5);
    for (std::size_t i = 0; i < perm.size(); ++i) EXPECT_EQ(up.probs[i], u.probs[perm[i]]);
  }
}

TEST(Bpe, MinimalVocabularyMeansNoMerges) {
  std::vector<std::string> lines = {"ab ab ab c"};
  // alphabet: a b c and the space marker
  auto m = BpeModel::train(lines, 4 + 4);
  EXPECT_TRUE(m.merges().empty());
  EXPECT_EQ(m.alphabet().size(), 4u);
  auto ids = m.tokenize("ab");
  ASSERT_EQ(ids.size(), 2u);
  EXPECT_EQ(ids[0], *m.vocabulary().find("a"));
  EXPECT_EQ(ids[1], *m.vocabulary().find("b"));
}

TEST(Bpe, FirstMergeIsMostFrequentPair) {
  std::vector<std::string> lines = {"ab ab ab c"};
  auto m = BpeModel::train(lines, 4 + 4 + 1);
  ASSERT_EQ(m.merges().size(), 1u);
  EXPECT_EQ(m.merges()[0], (BpeModel::Merge{"a", "b"}));
  auto ids = m.tokenize("ab");
  ASSERT_EQ(ids.size(), 1u);
  EXPECT_EQ(m.vocabulary().token(ids[0]), "ab");
}

TEST(Bpe, RepeatedCharacterMerges) {
  std::vector<std::string> lines = {"aaaa"};
  auto m = BpeModel::train(lines, 4 + 1 + 2);
  ASSERT_EQ(m.merges().size(), 2u);
  EXPECT_EQ(m.merges()[0], (BpeModel::Merge{"a", "a"}));
  EXPECT_EQ(m.merges()[1], (BpeModel::Merge{"aa", "aa"}));
}

TEST(Bpe, UnknownCharacterFallsBackToUnk) {
  std::vector<std::string> lines = {"ab"};
  auto m = BpeModel::train(lines, 6);
  auto ids = m.tokenize("az");
  ASSERT_EQ(ids.size(), 2u);
  EXPECT_EQ(ids[1], kUnkId);
}

TEST(Bpe, EmptyCorpusAndTinyVocabRejected) {
  std::vector<std::string> none;
  EXPECT_THROW(BpeModel::train(none, 100), ConfigError);
  std::vector<std::string> lines = {"abc"};
  EXPECT_THROW(BpeModel::train(lines, 6), ConfigError);
}

TEST(Bpe, DetokenizeInvertsTokenizeOnTrainingLines) {
  std::vector<std::string> lines = {"the cat sat on the mat", "  leading and trailing  ", "naïve café über",
                                    "a  double  space", "the theme of the thesis"};
  for (std::size_t vs : {27u, 40u, 60u}) {
    auto m = BpeModel::train(lines, vs);
    for (const auto& l : lines) EXPECT_EQ(m.detokenize(m.tokenize(l)), l) << "vocab " << vs;
  }
}

TEST(Bpe, FileRoundTripNeedsVocabulary) {
  auto dir = temp_dir("bpe");
  std::vector<std::string> lines = {"low lower lowest", "new newer newest"};
  auto m = BpeModel::train(lines, 24);
  m.save(dir / "bpe.txt");
  m.vocabulary().save(dir / "vocab.txt");
  auto text = read_lines(dir / "bpe.txt");
  EXPECT_EQ(text[0], "bpe-v1 24");
  EXPECT_EQ(text.size(), m.merges().size() + 1);
  auto back = BpeModel::load(dir / "bpe.txt", dir / "vocab.txt");
  EXPECT_EQ(back.merges(), m.merges());
  EXPECT_EQ(back.vocabulary().tokens(), m.vocabulary().tokens());
  for (const auto& l : lines) EXPECT_EQ(back.tokenize(l), m.tokenize(l));

  Vocabulary other;
  other.add("x");
  other.save(dir / "other.txt");
  try {
    BpeModel::load(dir / "bpe.txt", dir / "other.txt");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("other.txt"), std::string::npos);
  }
}

TEST(Synthetic, CopyTargetsEqualSourcePlusEos) {
  SyntheticSpec spec{.kind = TaskKind::Copy, .vocab_size = 30, .pairs = 200, .seed = 4};
  auto task = generate_synthetic_task(spec);
  for (const auto& p : task.train.pairs) {
    auto expected = p.source;
    expected.push_back(kEosId);
    EXPECT_EQ(p.target, expected);
  }
  task.train.validate(task.vocab.size());
  task.test.validate(task.vocab.size());
}

TEST(Synthetic, ReverseAndSubstitute) {
  SyntheticSpec spec{.kind = TaskKind::Reverse, .vocab_size = 30, .pairs = 100, .seed = 5};
  auto rev = generate_synthetic_task(spec);
  for (const auto& p : rev.train.pairs)
    EXPECT_TRUE(std::equal(p.source.rbegin(), p.source.rend(), p.target.begin()));

  spec.kind = TaskKind::Substitute;
  auto sub = generate_synthetic_task(spec);
  std::vector<int> sorted(sub.mapping.begin() + kNumReserved, sub.mapping.end());
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) EXPECT_EQ(sorted[i], static_cast<int>(i) + kNumReserved);
  for (const auto& p : sub.train.pairs)
    for (std::size_t i = 0; i < p.source.size(); ++i)
      EXPECT_EQ(p.target[i], sub.mapping[static_cast<std::size_t>(p.source[i])]);
}

TEST(Synthetic, UnknownKindIsConfigError) { EXPECT_THROW(parse_task_kind("shuffle"), ConfigError); }

TEST(Synthetic, PreconditionsEnforced) {
  EXPECT_THROW(generate_synthetic_task({.vocab_size = 9}), ConfigError);
  EXPECT_THROW(generate_synthetic_task({.vocab_size = 20, .pairs = 99}), ConfigError);
}

TEST(Synthetic, ZeroExponentIsUniformWithinThreeSigma) {
  SyntheticSpec spec{.kind = TaskKind::Copy, .vocab_size = 10, .zipf_exponent = 0.0, .pairs = 1000, .seed = 21};
  auto task = generate_synthetic_task(spec);
  std::map<int, double> counts;
  double n = 0;
  for (const auto& p : task.train.pairs)
    for (int id : p.source) counts[id] += 1, n += 1;
  const double k = 6.0, prob = 1.0 / k;
  const double sigma = std::sqrt(n * prob * (1 - prob));
  ASSERT_EQ(counts.size(), 6u);
  for (auto [id, c] : counts) EXPECT_LE(std::abs(c - n * prob), 3 * sigma) << "token " << id;
}

TEST(Synthetic, ZipfOneRankFrequencySlope) {
  SyntheticSpec spec{.kind = TaskKind::Copy, .vocab_size = 100, .zipf_exponent = 1.0, .pairs = 10000, .seed = 8};
  auto task = generate_synthetic_task(spec);
  std::vector<double> counts(100, 0.0);
  for (const auto& p : task.train.pairs)
    for (int id : p.source) counts[static_cast<std::size_t>(id)] += 1;
  std::vector<double> freq;
  for (double c : counts)
    if (c > 0) freq.push_back(c);
  std::sort(freq.rbegin(), freq.rend());
  std::vector<double> lx, ly;
  for (std::size_t r = 0; r < freq.size(); ++r) {
    lx.push_back(std::log(static_cast<double>(r + 1)));
    ly.push_back(std::log(freq[r]));
  }
  EXPECT_NEAR(ls_slope(lx, ly), -1.0, 0.15);
}

TEST(Synthetic, BitwiseReproducible) {
  SyntheticSpec spec{.kind = TaskKind::Substitute, .vocab_size = 50, .pairs = 300, .seed = 77};
  auto a = generate_synthetic_task(spec), b = generate_synthetic_task(spec);
  ASSERT_EQ(a.train.size(), b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train.pairs[i].source, b.train.pairs[i].source);
    EXPECT_EQ(a.train.pairs[i].target, b.train.pairs[i].target);
  }
  EXPECT_EQ(a.vocab.counts(), b.vocab.counts());
  spec.seed = 78;
  auto c = generate_synthetic_task(spec);
  EXPECT_NE(a.train.pairs[0].source, c.train.pairs[0].source);
}

TEST(Words, TokenizeDetokenize) {
  Vocabulary v;
  v.add("w0");
  v.add("w1");
  auto ids = tokenize_words(v, "w1 w0  w9");
  EXPECT_EQ(ids, (std::vector<int>{5, 4, kUnkId}));
  EXPECT_EQ(detokenize_words(v, std::vector<int>{5, 4, kEosId}), "w1 w0");
}
