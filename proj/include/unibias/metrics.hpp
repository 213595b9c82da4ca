#pragma once

// Corpus-level scores and the analysis statistics reported by the harness.
// Everything here is a pure function.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "unibias/corpus.hpp"

namespace unibias {

class Model;

struct BleuReport {
  double score = 0.0;                 // [0, 100]
  std::vector<double> precisions;     // smoothed, one per order
  double brevity_penalty = 1.0;
  std::size_t hypothesis_length = 0;
  std::size_t reference_length = 0;
};

// Corpus BLEU: clipped n-gram precisions pooled over all segments, geometric
// mean times brevity penalty. Orders n >= 2 use add-one smoothing
// (m + 1) / (t + 1); zero unigram matches give 0.
BleuReport bleu_report(const std::vector<std::vector<int>>& hypotheses,
                       const std::vector<std::vector<int>>& references, std::size_t max_n = 4);
BleuReport bleu_report(const std::vector<std::vector<std::string>>& hypotheses,
                       const std::vector<std::vector<std::string>>& references, std::size_t max_n = 4);
double bleu(const std::vector<std::vector<int>>& hypotheses, const std::vector<std::vector<int>>& references,
            std::size_t max_n = 4);
double bleu(const std::vector<std::vector<std::string>>& hypotheses,
            const std::vector<std::vector<std::string>>& references, std::size_t max_n = 4);

// Character n-gram F-score of one segment, whitespace removed. Precision and
// recall are averaged over the orders that occur in both strings.
double chrf_segment(std::string_view hypothesis, std::string_view reference, std::size_t char_n = 6,
                    double beta = 2.0);
// Mean of chrf_segment over the pairs, times 100.
double chrf(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references,
            std::size_t char_n = 6, double beta = 2.0);

// KL(p || q) = sum p log(p / q) with 0 log 0 = 0. Throws std::domain_error
// when q vanishes where p does not.
double kl_divergence(std::span<const double> p, std::span<const double> q);

struct CurvePoint {
  double step = 0.0;
  double score = 0.0;
};
using LearningCurve = std::vector<CurvePoint>;

// Trapezoid area over [first step, t_max] divided by the span. A segment
// crossing t_max is cut by linear interpolation; a curve ending before t_max
// is integrated to its last point. Throws std::invalid_argument with fewer
// than two usable points or non-increasing steps.
double alc(const LearningCurve& curve, double t_max);

struct FrequencyBin {
  double lo = 0.0, hi = 0.0;
  double center = 0.0;
  double mean_log_unigram = 0.0;
  double mean_logprob = 0.0;
  double stderr_logprob = 0.0;
  std::size_t count = 0;
};

struct FrequencyBinReport {
  std::vector<FrequencyBin> bins;  // non-empty bins only, ascending
  bool include_bias = true;
  std::size_t total_tokens = 0;

  // Least-squares slope of bin mean log-probability on bin center; NaN with
  // fewer than two bins.
  double slope() const;
};

// Equal-width bins over the observed range of log_unigram.
FrequencyBinReport bin_by_log_frequency(std::span<const double> log_unigram, std::span<const double> logprob,
                                        std::size_t num_bins, bool include_bias);

// Teacher-forced log p(y_t) for every ground-truth target token of `test`,
// binned against log u(y_t). include_bias = false scores with softmax(W phi).
FrequencyBinReport frequency_binned_logprob(const Model& model, const ParallelCorpus& test,
                                            const UnigramDistribution& unigram, std::size_t num_bins = 10,
                                            bool include_bias = true);

double least_squares_slope(std::span<const double> x, std::span<const double> y);

struct Summary {
  double mean = 0.0;
  double stderr_mean = 0.0;  // sample standard deviation / sqrt(n); 0 when n = 1
  std::size_t n = 0;
};
Summary summarize(std::span<const double> values);

}  // namespace unibias
