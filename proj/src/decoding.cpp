#include "unibias/decoding.hpp"

#include "unibias/model.hpp"

namespace unibias {

namespace {

struct ModelScorer {
  const Model& model;
  const EncodedSources& enc;
  bool include_bias;

  std::size_t vocab_size() const { return model.config().vocab_size; }
  std::vector<std::vector<double>> log_probs(std::span<const std::vector<int>> prefixes,
                                             std::span<const std::size_t> sources) const {
    return model.next_log_probs(enc, prefixes, sources, include_bias);
  }
};

// Encodes up to kChunk sources at a time and decodes them together.
template <class Decode>
std::vector<Hypothesis> decode_in_chunks(const Model& model, std::span<const std::vector<int>> sources,
                                         const DecodeOptions& opt, bool include_bias, Decode decode) {
  constexpr std::size_t kChunk = 128;
  std::vector<Hypothesis> out;
  out.reserve(sources.size());
  const std::size_t cap = model.config().max_len;
  for (std::size_t start = 0; start < sources.size(); start += kChunk) {
    const auto chunk = sources.subspan(start, std::min(kChunk, sources.size() - start));
    std::vector<std::size_t> max_lens;
    for (const auto& s : chunk) max_lens.push_back(std::min(cap, opt.max_len ? opt.max_len : s.size() + 10));
    const auto enc = model.encode(chunk);
    const ModelScorer scorer{model, enc, include_bias};
    auto hyps = decode(scorer, chunk.size(), max_lens);
    for (auto& h : hyps) out.push_back(std::move(h));
  }
  return out;
}

}  // namespace

std::vector<Hypothesis> model_beam_search(const Model& model, std::span<const std::vector<int>> sources,
                                          const DecodeOptions& opt, bool include_bias) {
  DecodeOptions o = opt;
  if (o.max_len == 0) o.max_len = model.config().max_len;
  return decode_in_chunks(model, sources, opt, include_bias, [&](const auto& scorer, std::size_t n, const auto& lens) {
    return beam_search_many(scorer, n, o, lens);
  });
}

std::vector<Hypothesis> model_greedy_decode(const Model& model, std::span<const std::vector<int>> sources,
                                            const DecodeOptions& opt, bool include_bias) {
  DecodeOptions o = opt;
  if (o.max_len == 0) o.max_len = model.config().max_len;
  return decode_in_chunks(model, sources, opt, include_bias, [&](const auto& scorer, std::size_t n, const auto& lens) {
    return greedy_decode_many(scorer, n, o, lens);
  });
}

std::vector<int> strip_eos(std::vector<int> tokens, int eos) {
  if (!tokens.empty() && tokens.back() == eos) tokens.pop_back();
  return tokens;
}

}  // namespace unibias
