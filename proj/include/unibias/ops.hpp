#pragma once

// Differentiable operations on unibias::Tensor. Every op validates shapes,
// computes its forward value eagerly and, when recording, registers a
// backward rule that accumulates into its inputs' gradients.
//
// "Row" ops (softmax, layer_norm, losses) treat a tensor as
// [rows x cols] with cols = last dimension.

#include <cstddef>
#include <span>
#include <vector>

#include "unibias/random.hpp"
#include "unibias/tensor.hpp"

namespace unibias {

// Packed variable-length sequences: sequence i occupies rows
// [offset[i], offset[i] + length[i]) of a [tokens x d] matrix.
struct SeqLayout {
  std::vector<std::size_t> offset;
  std::vector<std::size_t> length;

  std::size_t count() const noexcept { return offset.size(); }
  std::size_t total() const noexcept;

  // Contiguous layout for the given lengths.
  static SeqLayout contiguous(std::span<const std::size_t> lengths);
};

// a[m x k] . b[k x n]
Tensor matmul(const Tensor& a, const Tensor& b);

// x[n x in] . weight[out x in]^T (+ bias[out])
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor* bias = nullptr);

// Elementwise sum; b may also be a row vector of length a.cols(), broadcast
// over rows.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor relu(const Tensor& x);

// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift, double eps = 1e-5);

Tensor softmax(const Tensor& logits);
Tensor log_softmax(const Tensor& logits);

// Rows of table[V x d] selected by ids.
Tensor embedding(const Tensor& table, std::span<const int> ids);

// Multi-head scaled dot-product attention over packed sequences. Query
// sequence i attends to key sequence i; with causal, query row j of a
// sequence sees key rows 0..j of the same-index key sequence.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const SeqLayout& q_layout,
                 const SeqLayout& k_layout, std::size_t heads, bool causal);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Scalar x.data()[index].
Tensor pick(const Tensor& x, std::size_t index);

// Mean over rows of the cross-entropy between softmax(logits row) and the
// smoothed target (1 - alpha) * onehot(target) + alpha / V. The smoothing
// mass alpha / V goes to every token, the target included.
Tensor label_smoothed_xent(const Tensor& logits, std::span<const int> targets, double alpha);

// Mean over rows of KL(onehot(target) || p) - lambda * KL(omega || p) with
// p = softmax(logits row).
Tensor anti_unigram_loss(const Tensor& logits, std::span<const int> targets, std::span<const double> omega,
                         double lambda);

// Plain (non-recording) helpers shared by the model, probes and metrics.
std::vector<double> softmax_values(std::span<const double> logits);
std::vector<double> log_softmax_values(std::span<const double> logits);
double log_sum_exp(std::span<const double> values);

}  // namespace unibias
