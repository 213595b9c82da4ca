#include "unibias/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

#include "unibias/model.hpp"

namespace unibias {

namespace {

template <class Tok>
using NgramCounts = std::map<std::vector<Tok>, std::size_t>;

template <class Tok>
NgramCounts<Tok> ngrams(const std::vector<Tok>& seq, std::size_t n) {
  NgramCounts<Tok> out;
  if (seq.size() < n) return out;
  for (std::size_t i = 0; i + n <= seq.size(); ++i) ++out[std::vector<Tok>(seq.begin() + i, seq.begin() + i + n)];
  return out;
}

template <class Tok>
BleuReport corpus_bleu(const std::vector<std::vector<Tok>>& hyps, const std::vector<std::vector<Tok>>& refs,
                       std::size_t max_n) {
  if (hyps.empty()) throw std::invalid_argument("bleu: no hypotheses");
  if (hyps.size() != refs.size())
    throw std::invalid_argument("bleu: " + std::to_string(hyps.size()) + " hypotheses for " +
                                std::to_string(refs.size()) + " references");
  if (max_n == 0) throw std::invalid_argument("bleu: max_n must be positive");

  std::vector<std::size_t> matches(max_n, 0), totals(max_n, 0);
  BleuReport r;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    r.hypothesis_length += hyps[s].size();
    r.reference_length += refs[s].size();
    for (std::size_t n = 1; n <= max_n; ++n) {
      const auto h = ngrams(hyps[s], n);
      const auto ref = ngrams(refs[s], n);
      for (const auto& [g, c] : h) {
        totals[n - 1] += c;
        if (auto it = ref.find(g); it != ref.end()) matches[n - 1] += std::min(c, it->second);
      }
    }
  }

  if (matches[0] == 0) {
    r.score = 0.0;
    r.precisions.assign(max_n, 0.0);
    r.brevity_penalty = 0.0;
    return r;
  }
  double log_sum = 0.0;
  for (std::size_t n = 0; n < max_n; ++n) {
    const double p = n == 0 ? static_cast<double>(matches[0]) / static_cast<double>(totals[0])
                            : static_cast<double>(matches[n] + 1) / static_cast<double>(totals[n] + 1);
    r.precisions.push_back(p);
    log_sum += std::log(p);
  }
  const double c = static_cast<double>(r.hypothesis_length), ref_len = static_cast<double>(r.reference_length);
  r.brevity_penalty = c > ref_len ? 1.0 : std::exp(1.0 - ref_len / c);
  r.score = 100.0 * r.brevity_penalty * std::exp(log_sum / static_cast<double>(max_n));
  return r;
}

std::vector<std::string> chars_without_space(std::string_view text) {
  std::vector<std::string> out;
  for (auto& c : utf8_chars(text))
    if (!(c.size() == 1 && std::isspace(static_cast<unsigned char>(c[0])))) out.push_back(std::move(c));
  return out;
}

}  // namespace

BleuReport bleu_report(const std::vector<std::vector<int>>& hypotheses,
                       const std::vector<std::vector<int>>& references, std::size_t max_n) {
  return corpus_bleu(hypotheses, references, max_n);
}

BleuReport bleu_report(const std::vector<std::vector<std::string>>& hypotheses,
                       const std::vector<std::vector<std::string>>& references, std::size_t max_n) {
  return corpus_bleu(hypotheses, references, max_n);
}

double bleu(const std::vector<std::vector<int>>& hypotheses, const std::vector<std::vector<int>>& references,
            std::size_t max_n) {
  return corpus_bleu(hypotheses, references, max_n).score;
}

double bleu(const std::vector<std::vector<std::string>>& hypotheses,
            const std::vector<std::vector<std::string>>& references, std::size_t max_n) {
  return corpus_bleu(hypotheses, references, max_n).score;
}

double chrf_segment(std::string_view hypothesis, std::string_view reference, std::size_t char_n, double beta) {
  const auto h = chars_without_space(hypothesis), r = chars_without_space(reference);
  if (h.empty() && r.empty()) return 1.0;
  double p_sum = 0.0, r_sum = 0.0;
  std::size_t orders = 0;
  for (std::size_t n = 1; n <= char_n; ++n) {
    const auto hg = ngrams(h, n), rg = ngrams(r, n);
    if (hg.empty() || rg.empty()) continue;
    std::size_t h_total = 0, r_total = 0, match = 0;
    for (const auto& [g, c] : hg) {
      h_total += c;
      if (auto it = rg.find(g); it != rg.end()) match += std::min(c, it->second);
    }
    for (const auto& [g, c] : rg) r_total += c;
    p_sum += static_cast<double>(match) / static_cast<double>(h_total);
    r_sum += static_cast<double>(match) / static_cast<double>(r_total);
    ++orders;
  }
  if (orders == 0) return 0.0;
  const double p = p_sum / static_cast<double>(orders), rec = r_sum / static_cast<double>(orders);
  if (p == 0.0 && rec == 0.0) return 0.0;
  const double b2 = beta * beta;
  return (1.0 + b2) * p * rec / (b2 * p + rec);
}

double chrf(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references,
            std::size_t char_n, double beta) {
  if (hypotheses.empty()) throw std::invalid_argument("chrf: no hypotheses");
  if (hypotheses.size() != references.size()) throw std::invalid_argument("chrf: hypothesis/reference count mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) total += chrf_segment(hypotheses[i], references[i], char_n, beta);
  return 100.0 * total / static_cast<double>(hypotheses.size());
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: length mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (q[i] <= 0.0) throw std::domain_error("kl_divergence: q[" + std::to_string(i) + "] = 0 where p > 0");
    kl += p[i] * std::log(p[i] / q[i]);
  }
  return std::max(kl, 0.0);
}

double alc(const LearningCurve& curve, double t_max) {
  for (std::size_t i = 1; i < curve.size(); ++i)
    if (!(curve[i].step > curve[i - 1].step)) throw std::invalid_argument("alc: steps must be strictly increasing");
  LearningCurve pts;
  for (std::size_t i = 0; i < curve.size() && curve[i].step <= t_max; ++i) {
    pts.push_back(curve[i]);
    if (i + 1 < curve.size() && curve[i + 1].step > t_max && curve[i].step < t_max) {
      const auto& a = curve[i];
      const auto& b = curve[i + 1];
      const double w = (t_max - a.step) / (b.step - a.step);
      pts.push_back({t_max, a.score + w * (b.score - a.score)});
    }
  }
  if (pts.size() < 2) throw std::invalid_argument("alc: fewer than two curve points within the horizon");
  double area = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i)
    area += 0.5 * (pts[i].score + pts[i - 1].score) * (pts[i].step - pts[i - 1].step);
  return area / (pts.back().step - pts.front().step);
}

double least_squares_slope(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("least_squares_slope: length mismatch");
  if (x.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
  mx /= n, my /= n;
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxx == 0.0 ? std::numeric_limits<double>::quiet_NaN() : sxy / sxx;
}

double FrequencyBinReport::slope() const {
  std::vector<double> x, y;
  for (const auto& b : bins) {
    x.push_back(b.center);
    y.push_back(b.mean_logprob);
  }
  return least_squares_slope(x, y);
}

FrequencyBinReport bin_by_log_frequency(std::span<const double> log_unigram, std::span<const double> logprob,
                                        std::size_t num_bins, bool include_bias) {
  if (num_bins == 0) throw std::invalid_argument("frequency bins: num_bins must be positive");
  if (log_unigram.size() != logprob.size()) throw std::invalid_argument("frequency bins: length mismatch");
  if (log_unigram.empty()) throw std::invalid_argument("frequency bins: no tokens to evaluate");
  const auto [lo_it, hi_it] = std::minmax_element(log_unigram.begin(), log_unigram.end());
  const double lo = *lo_it, hi = *hi_it;
  const double width = (hi - lo) / static_cast<double>(num_bins);

  std::vector<double> sum(num_bins, 0.0), sum_sq(num_bins, 0.0), sum_u(num_bins, 0.0);
  std::vector<std::size_t> count(num_bins, 0);
  for (std::size_t i = 0; i < log_unigram.size(); ++i) {
    std::size_t b = width > 0.0 ? static_cast<std::size_t>((log_unigram[i] - lo) / width) : 0;
    b = std::min(b, num_bins - 1);
    sum[b] += logprob[i];
    sum_sq[b] += logprob[i] * logprob[i];
    sum_u[b] += log_unigram[i];
    ++count[b];
  }

  FrequencyBinReport report;
  report.include_bias = include_bias;
  report.total_tokens = log_unigram.size();
  for (std::size_t b = 0; b < num_bins; ++b) {
    if (count[b] == 0) continue;
    FrequencyBin bin;
    bin.lo = lo + width * static_cast<double>(b);
    bin.hi = b + 1 == num_bins ? hi : lo + width * static_cast<double>(b + 1);
    bin.center = 0.5 * (bin.lo + bin.hi);
    bin.count = count[b];
    const double n = static_cast<double>(count[b]);
    bin.mean_logprob = sum[b] / n;
    bin.mean_log_unigram = sum_u[b] / n;
    if (count[b] > 1) {
      const double var = std::max(0.0, (sum_sq[b] - n * bin.mean_logprob * bin.mean_logprob) / (n - 1.0));
      bin.stderr_logprob = std::sqrt(var / n);
    }
    report.bins.push_back(bin);
  }
  return report;
}

FrequencyBinReport frequency_binned_logprob(const Model& model, const ParallelCorpus& test,
                                            const UnigramDistribution& unigram, std::size_t num_bins,
                                            bool include_bias) {
  if (test.empty()) throw std::invalid_argument("frequency bins: empty test corpus");
  const auto log_u = unigram.log_probs();
  const std::size_t v = model.config().vocab_size;
  if (log_u.size() != v) throw std::invalid_argument("frequency bins: unigram size does not match the model");

  NoGradScope no_grad;
  std::vector<double> xs, ys;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < test.size(); start += kChunk) {
    const auto end = std::min(test.size(), start + kChunk);
    auto batch = Batch::from_pairs(std::span<const SentencePair>(test.pairs).subspan(start, end - start));
    Tensor logits = model.forward_logits(batch, ForwardContext{}, include_bias);
    for (std::size_t row = 0; row < batch.labels.size(); ++row) {
      const auto lp = log_softmax_values(logits.data().subspan(row * v, v));
      const int y = batch.labels[row];
      xs.push_back(log_u[static_cast<std::size_t>(y)]);
      ys.push_back(lp[static_cast<std::size_t>(y)]);
    }
  }
  return bin_by_log_frequency(xs, ys, num_bins, include_bias);
}

Summary summarize(std::span<const double> values) {
  Summary s;
  s.n = values.size();
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(s.n);
  if (s.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stderr_mean = std::sqrt(ss / static_cast<double>(s.n - 1)) / std::sqrt(static_cast<double>(s.n));
  }
  return s;
}

}  // namespace unibias
