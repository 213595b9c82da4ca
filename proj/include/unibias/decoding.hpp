#pragma once

// Length-normalised beam search and greedy decoding.
//
// Both are written against a scorer that returns next-token log-probabilities
// for a batch of (prefix, source) pairs, so one decoder pass serves every
// live hypothesis of every sentence being decoded.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "unibias/corpus.hpp"

namespace unibias {

class Model;

template <class S>
concept BatchScorer = requires(const S& s, std::span<const std::vector<int>> prefixes,
                               std::span<const std::size_t> sources) {
  { s.vocab_size() } -> std::convertible_to<std::size_t>;
  { s.log_probs(prefixes, sources) } -> std::convertible_to<std::vector<std::vector<double>>>;
};

struct Hypothesis {
  std::vector<int> tokens;  // generated tokens, EOS included when finished
  double log_prob = 0.0;
  double score = 0.0;  // log_prob / tokens.size()
  bool finished = false;
};

struct DecodeOptions {
  std::size_t beam_size = 5;
  std::size_t max_len = 100;
  int eos = kEosId;
  std::vector<int> forbidden{kPadId, kBosId};
};

namespace detail {

inline bool allowed(const DecodeOptions& opt, int token) {
  return std::find(opt.forbidden.begin(), opt.forbidden.end(), token) == opt.forbidden.end();
}

inline Hypothesis make_hypothesis(std::vector<int> tokens, double log_prob, bool finished) {
  Hypothesis h;
  h.score = tokens.empty() ? 0.0 : log_prob / static_cast<double>(tokens.size());
  h.tokens = std::move(tokens);
  h.log_prob = log_prob;
  h.finished = finished;
  return h;
}

// Higher score first; equal scores resolved by the lexicographically smaller
// token sequence.
inline bool better(const Hypothesis& a, const Hypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.tokens < b.tokens;
}

struct Candidate {
  std::size_t parent;
  int token;
  double log_prob;
};

}  // namespace detail

// Beam search over every source index in [0, num_sources). Each step ranks
// all one-token extensions of the live beam by cumulative log-probability
// and keeps the best beam_size; extensions ending in EOS leave the beam for
// the finished pool. Search for a source stops when its beam is empty, when
// max_lens[i] tokens have been generated (survivors are finalised
// unfinished), or when no live hypothesis can still beat the best finished
// score: with log-probabilities <= 0 an extension of a prefix with
// cumulative L reaches at most L / max_len. The best pool entry by
// normalised score is returned.
template <BatchScorer S>
std::vector<Hypothesis> beam_search_many(const S& scorer, std::size_t num_sources, const DecodeOptions& opt,
                                         std::span<const std::size_t> max_lens = {}) {
  if (opt.beam_size == 0) throw std::invalid_argument("beam_search: beam_size must be at least 1");
  if (opt.max_len == 0) throw std::invalid_argument("beam_search: max_len must be at least 1");
  const std::size_t vocab = scorer.vocab_size();
  auto limit = [&](std::size_t s) { return max_lens.empty() ? opt.max_len : std::max<std::size_t>(1, max_lens[s]); };

  struct Live {
    std::vector<int> tokens;
    double log_prob;
  };
  std::vector<std::vector<Live>> beams(num_sources, std::vector<Live>{{{}, 0.0}});
  std::vector<std::vector<Hypothesis>> pools(num_sources);

  for (std::size_t step = 1;; ++step) {
    std::vector<std::vector<int>> prefixes;
    std::vector<std::size_t> owners;
    for (std::size_t s = 0; s < num_sources; ++s)
      for (const auto& h : beams[s]) {
        prefixes.push_back(h.tokens);
        owners.push_back(s);
      }
    if (prefixes.empty()) break;
    const std::vector<std::vector<double>> scores = scorer.log_probs(prefixes, owners);

    std::size_t row = 0;
    for (std::size_t s = 0; s < num_sources; ++s) {
      const auto& beam = beams[s];
      if (beam.empty()) continue;
      std::vector<detail::Candidate> cands;
      cands.reserve(beam.size() * vocab);
      for (std::size_t i = 0; i < beam.size(); ++i, ++row)
        for (std::size_t y = 0; y < vocab; ++y)
          if (detail::allowed(opt, static_cast<int>(y)))
            cands.push_back({i, static_cast<int>(y), beam[i].log_prob + scores[row][y]});
      const auto keep = std::min(opt.beam_size, cands.size());
      // Equal cumulative scores: earlier parent wins (parents are kept in
      // rank order, which makes this the lexicographic order), then lower id.
      std::partial_sort(cands.begin(), cands.begin() + static_cast<long>(keep), cands.end(),
                        [&](const detail::Candidate& a, const detail::Candidate& b) {
                          if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
                          if (beam[a.parent].tokens != beam[b.parent].tokens)
                            return beam[a.parent].tokens < beam[b.parent].tokens;
                          return a.token < b.token;
                        });
      std::vector<Live> next;
      for (std::size_t c = 0; c < keep; ++c) {
        if (cands[c].log_prob == -std::numeric_limits<double>::infinity()) break;
        auto tokens = beam[cands[c].parent].tokens;
        tokens.push_back(cands[c].token);
        if (cands[c].token == opt.eos)
          pools[s].push_back(detail::make_hypothesis(std::move(tokens), cands[c].log_prob, true));
        else
          next.push_back({std::move(tokens), cands[c].log_prob});
      }
      if (step >= limit(s)) {
        for (auto& h : next) pools[s].push_back(detail::make_hypothesis(std::move(h.tokens), h.log_prob, false));
        next.clear();
      } else if (!pools[s].empty() && !next.empty()) {
        double best = -std::numeric_limits<double>::infinity();
        for (const auto& h : pools[s]) best = std::max(best, h.score);
        double reachable = -std::numeric_limits<double>::infinity();
        for (const auto& h : next) reachable = std::max(reachable, h.log_prob / static_cast<double>(limit(s)));
        if (best >= reachable) next.clear();
      }
      beams[s] = std::move(next);
    }
  }

  std::vector<Hypothesis> out(num_sources);
  for (std::size_t s = 0; s < num_sources; ++s) {
    if (pools[s].empty()) {
      out[s] = detail::make_hypothesis({}, -std::numeric_limits<double>::infinity(), false);
      continue;
    }
    out[s] = *std::min_element(pools[s].begin(), pools[s].end(), detail::better);
  }
  return out;
}

// Argmax at every step, lowest id on ties; stops at EOS or max_len.
template <BatchScorer S>
std::vector<Hypothesis> greedy_decode_many(const S& scorer, std::size_t num_sources, const DecodeOptions& opt,
                                           std::span<const std::size_t> max_lens = {}) {
  if (opt.max_len == 0) throw std::invalid_argument("greedy_decode: max_len must be at least 1");
  const std::size_t vocab = scorer.vocab_size();
  std::vector<Hypothesis> out(num_sources);
  std::vector<std::size_t> live(num_sources);
  for (std::size_t s = 0; s < num_sources; ++s) live[s] = s;

  while (!live.empty()) {
    std::vector<std::vector<int>> prefixes;
    for (auto s : live) prefixes.push_back(out[s].tokens);
    const std::vector<std::vector<double>> scores = scorer.log_probs(prefixes, live);
    std::vector<std::size_t> still;
    for (std::size_t r = 0; r < live.size(); ++r) {
      auto& h = out[live[r]];
      int arg = -1;
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t y = 0; y < vocab; ++y)
        if (detail::allowed(opt, static_cast<int>(y)) && (arg < 0 || scores[r][y] > best)) {
          arg = static_cast<int>(y);
          best = scores[r][y];
        }
      if (arg < 0) throw std::invalid_argument("greedy_decode: every token is forbidden");
      h.tokens.push_back(arg);
      h.log_prob += best;
      h.finished = arg == opt.eos;
      const std::size_t cap = max_lens.empty() ? opt.max_len : std::max<std::size_t>(1, max_lens[live[r]]);
      if (!h.finished && h.tokens.size() < cap) still.push_back(live[r]);
    }
    live = std::move(still);
  }
  for (auto& h : out) h.score = h.log_prob / static_cast<double>(h.tokens.size());
  return out;
}

// Single-source adapters for scorers that ignore the source index.
template <class S>
struct SingleSource {
  const S& inner;
  std::size_t vocab_size() const { return inner.vocab_size(); }
  std::vector<std::vector<double>> log_probs(std::span<const std::vector<int>> prefixes,
                                             std::span<const std::size_t>) const {
    std::vector<std::vector<double>> out;
    out.reserve(prefixes.size());
    for (const auto& p : prefixes) out.push_back(inner.log_probs(p));
    return out;
  }
};

// `scorer.log_probs(prefix)` gives next-token log-probabilities for one prefix.
template <class S>
Hypothesis beam_search(const S& scorer, const DecodeOptions& opt) {
  return beam_search_many(SingleSource<S>{scorer}, 1, opt)[0];
}

template <class S>
Hypothesis greedy_decode(const S& scorer, const DecodeOptions& opt) {
  return greedy_decode_many(SingleSource<S>{scorer}, 1, opt)[0];
}

// --------------------------------------------------------------- Model glue

// Decodes `sources` with `model`. A zero opt.max_len means
// min(source length + 10, model max_len) per sentence; otherwise it is still
// capped at the model's max_len.
std::vector<Hypothesis> model_beam_search(const Model& model, std::span<const std::vector<int>> sources,
                                          const DecodeOptions& opt, bool include_bias = true);
std::vector<Hypothesis> model_greedy_decode(const Model& model, std::span<const std::vector<int>> sources,
                                            const DecodeOptions& opt, bool include_bias = true);

// Tokens with a trailing EOS removed (the form scored by BLEU).
std::vector<int> strip_eos(std::vector<int> tokens, int eos = kEosId);

}  // namespace unibias
