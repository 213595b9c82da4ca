#include "unibias/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace unibias {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;
using CStrided = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using MStrided = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

CMap cmap(const double* p, std::size_t r, std::size_t c) {
  return CMap(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
MMap mmap(double* p, std::size_t r, std::size_t c) {
  return MMap(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

void check_finite([[maybe_unused]] const Tensor& t, [[maybe_unused]] const char* op) {
#ifndef NDEBUG
  for (double v : t.data())
    if (!std::isfinite(v)) throw std::runtime_error(std::string(op) + ": produced a non-finite value");
#endif
}

void record(const Tensor& out, std::function<void()> rule) {
  if (out.requires_grad()) Tape::active()->record(out.shared(), std::move(rule));
}

bool wants(const std::shared_ptr<TensorNode>& n) { return n->requires_grad; }

std::size_t last_dim(const Tensor& t) { return t.cols(); }

void require_rank2(const Tensor& t, const char* op, const char* what) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": " + what + " must be 2-D, got " + shape_string(t.shape()));
}

}  // namespace

std::size_t SeqLayout::total() const noexcept { return std::accumulate(length.begin(), length.end(), std::size_t{0}); }

SeqLayout SeqLayout::contiguous(std::span<const std::size_t> lengths) {
  SeqLayout l;
  std::size_t off = 0;
  for (auto n : lengths) {
    l.offset.push_back(off);
    l.length.push_back(n);
    off += n;
  }
  return l;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul", "lhs");
  require_rank2(b, "matmul", "rhs");
  const auto m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    throw ShapeError("matmul: inner dimensions differ: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  Tensor out = make_result({m, n}, {&a, &b});
  mmap(out.mutable_data().data(), m, n).noalias() = cmap(a.data().data(), m, k) * cmap(b.data().data(), k, n);
  check_finite(out, "matmul");
  auto an = a.shared(), bn = b.shared();
  auto* on = out.node();
  record(out, [an, bn, on, m, k, n] {
    auto dc = cmap(on->grad.data(), m, n);
    if (wants(an)) mmap(an->grad_buffer().data(), m, k).noalias() += dc * cmap(bn->data.data(), k, n).transpose();
    if (wants(bn)) mmap(bn->grad_buffer().data(), k, n).noalias() += cmap(an->data.data(), m, k).transpose() * dc;
  });
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor* bias) {
  require_rank2(weight, "linear", "weight");
  const auto out_dim = weight.shape()[0], in_dim = weight.shape()[1];
  if (x.cols() != in_dim)
    throw ShapeError("linear: input " + shape_string(x.shape()) + " incompatible with weight " +
                     shape_string(weight.shape()));
  if (bias && bias->size() != out_dim)
    throw ShapeError("linear: bias " + shape_string(bias->shape()) + " incompatible with weight " +
                     shape_string(weight.shape()));
  const auto n = x.rows();
  Tensor out = make_result({n, out_dim}, {&x, &weight, bias});
  auto y = mmap(out.mutable_data().data(), n, out_dim);
  y.noalias() = cmap(x.data().data(), n, in_dim) * cmap(weight.data().data(), out_dim, in_dim).transpose();
  if (bias) y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias->data().data(), static_cast<Eigen::Index>(out_dim));
  check_finite(out, "linear");
  auto xn = x.shared(), wn = weight.shared();
  std::shared_ptr<TensorNode> bn = bias ? bias->shared() : nullptr;
  auto* on = out.node();
  record(out, [xn, wn, bn, on, n, in_dim, out_dim] {
    auto dy = cmap(on->grad.data(), n, out_dim);
    if (wants(xn)) mmap(xn->grad_buffer().data(), n, in_dim).noalias() += dy * cmap(wn->data.data(), out_dim, in_dim);
    if (wants(wn))
      mmap(wn->grad_buffer().data(), out_dim, in_dim).noalias() += dy.transpose() * cmap(xn->data.data(), n, in_dim);
    if (bn && wants(bn)) {
      auto g = bn->grad_buffer();
      Eigen::Map<Eigen::RowVectorXd>(g.data(), static_cast<Eigen::Index>(out_dim)) += dy.colwise().sum();
    }
  });
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  const bool broadcast = a.shape() != b.shape();
  if (broadcast && b.size() != a.cols())
    throw ShapeError("add: shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) + " differ");
  Tensor out = make_result(a.shape(), {&a, &b});
  auto o = out.mutable_data();
  auto ad = a.data(), bd = b.data();
  const auto cols = a.cols();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] + bd[broadcast ? i % cols : i];
  check_finite(out, "add");
  auto an = a.shared(), bn = b.shared();
  auto* on = out.node();
  record(out, [an, bn, on, broadcast, cols] {
    const auto& g = on->grad;
    if (wants(an)) {
      auto ga = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (wants(bn)) {
      auto gb = bn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[broadcast ? i % cols : i] += g[i];
    }
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) + " differ");
  Tensor out = make_result(a.shape(), {&a, &b});
  auto o = out.mutable_data();
  const auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] * bd[i];
  check_finite(out, "mul");
  auto an = a.shared(), bn = b.shared();
  auto* on = out.node();
  record(out, [an, bn, on] {
    const auto& g = on->grad;
    if (wants(an)) {
      auto ga = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->data[i];
    }
    if (wants(bn)) {
      auto gb = bn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->data[i];
    }
  });
  return out;
}

Tensor scale(const Tensor& a, double factor) {
  Tensor out = make_result(a.shape(), {&a});
  auto o = out.mutable_data();
  const auto ad = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] * factor;
  auto an = a.shared();
  auto* on = out.node();
  record(out, [an, on, factor] {
    auto ga = an->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += on->grad[i] * factor;
  });
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = make_result(x.shape(), {&x});
  auto o = out.mutable_data();
  const auto xd = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::max(0.0, xd[i]);
  auto xn = x.shared();
  auto* on = out.node();
  record(out, [xn, on] {
    auto gx = xn->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (xn->data[i] > 0.0) gx[i] += on->grad[i];
  });
  return out;
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must lie in [0, 1)");
  if (p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.size());
  for (auto& m : mask) m = rng.uniform() >= p ? keep_scale : 0.0;
  Tensor out = make_result(x.shape(), {&x});
  auto o = out.mutable_data();
  const auto xd = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xd[i] * mask[i];
  auto xn = x.shared();
  auto* on = out.node();
  record(out, [xn, on, mask = std::move(mask)] {
    auto gx = xn->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += on->grad[i] * mask[i];
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift, double eps) {
  const auto d = last_dim(x);
  if (x.rank() == 0 || d == 0) throw ShapeError("layer_norm: empty feature dimension");
  if (gain.size() != d || shift.size() != d)
    throw ShapeError("layer_norm: gain/shift " + shape_string(gain.shape()) + "/" + shape_string(shift.shape()) +
                     " do not match features of " + shape_string(x.shape()));
  if (!(eps > 0.0)) throw std::invalid_argument("layer_norm: eps must be positive");
  const auto rows = x.rows();
  Tensor out = make_result(x.shape(), {&x, &gain, &shift});
  std::vector<double> xhat(x.size()), inv_std(rows);
  const auto xd = x.data(), gd = gain.data(), sd = shift.data();
  auto o = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * is;
      xhat[r * d + j] = h;
      o[r * d + j] = gd[j] * h + sd[j];
    }
  }
  check_finite(out, "layer_norm");
  auto xn = x.shared(), gn = gain.shared(), sn = shift.shared();
  auto* on = out.node();
  record(out, [xn, gn, sn, on, rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
    const auto& dy = on->grad;
    if (wants(gn)) {
      auto gg = gn->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gg[j] += dy[r * d + j] * xhat[r * d + j];
    }
    if (wants(sn)) {
      auto gs = sn->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gs[j] += dy[r * d + j];
    }
    if (wants(xn)) {
      auto gx = xn->grad_buffer();
      const double inv_d = 1.0 / static_cast<double>(d);
      for (std::size_t r = 0; r < rows; ++r) {
        double mean_dh = 0.0, mean_dh_h = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = dy[r * d + j] * gn->data[j];
          mean_dh += dh;
          mean_dh_h += dh * xhat[r * d + j];
        }
        mean_dh *= inv_d;
        mean_dh_h *= inv_d;
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = dy[r * d + j] * gn->data[j];
          gx[r * d + j] += inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
        }
      }
    }
  });
  return out;
}

double log_sum_exp(std::span<const double> values) {
  if (values.empty()) return -std::numeric_limits<double>::infinity();
  const double m = *std::max_element(values.begin(), values.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : values) s += std::exp(v - m);
  return m + std::log(s);
}

std::vector<double> softmax_values(std::span<const double> logits) {
  if (logits.empty()) throw ShapeError("softmax: empty last dimension");
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) s += (out[i] = std::exp(logits[i] - m));
  for (auto& v : out) v /= s;
  return out;
}

std::vector<double> log_softmax_values(std::span<const double> logits) {
  const double lse = log_sum_exp(logits);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

namespace {

// Row-wise softmax into dst; returns nothing, dst must be sized.
void softmax_rows(std::span<const double> src, std::span<double> dst, std::size_t cols) {
  const auto rows = src.size() / cols;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = src.data() + r * cols;
    double* out = dst.data() + r * cols;
    const double m = *std::max_element(in, in + cols);
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += (out[j] = std::exp(in[j] - m));
    const double inv = 1.0 / s;
    for (std::size_t j = 0; j < cols; ++j) out[j] *= inv;
  }
}

}  // namespace

Tensor softmax(const Tensor& logits) {
  if (!logits.defined() || logits.rank() == 0) throw ShapeError("softmax: empty last dimension");
  const auto cols = logits.cols();
  Tensor out = make_result(logits.shape(), {&logits});
  softmax_rows(logits.data(), out.mutable_data(), cols);
  check_finite(out, "softmax");
  auto xn = logits.shared();
  auto* on = out.node();
  record(out, [xn, on, cols] {
    auto gx = xn->grad_buffer();
    const auto& y = on->data;
    const auto& dy = on->grad;
    for (std::size_t r = 0; r < y.size() / cols; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) dot += dy[r * cols + j] * y[r * cols + j];
      for (std::size_t j = 0; j < cols; ++j) gx[r * cols + j] += y[r * cols + j] * (dy[r * cols + j] - dot);
    }
  });
  return out;
}

Tensor log_softmax(const Tensor& logits) {
  if (!logits.defined() || logits.rank() == 0) throw ShapeError("log_softmax: empty last dimension");
  const auto cols = logits.cols();
  const auto rows = logits.rows();
  Tensor out = make_result(logits.shape(), {&logits});
  auto o = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = logits.data().subspan(r * cols, cols);
    const double lse = log_sum_exp(row);
    for (std::size_t j = 0; j < cols; ++j) o[r * cols + j] = row[j] - lse;
  }
  check_finite(out, "log_softmax");
  auto xn = logits.shared();
  auto* on = out.node();
  record(out, [xn, on, cols, rows] {
    auto gx = xn->grad_buffer();
    const auto& y = on->data;
    const auto& dy = on->grad;
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < cols; ++j) s += dy[r * cols + j];
      for (std::size_t j = 0; j < cols; ++j) gx[r * cols + j] += dy[r * cols + j] - std::exp(y[r * cols + j]) * s;
    }
  });
  return out;
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_rank2(table, "embedding", "table");
  const auto vocab = table.shape()[0], d = table.shape()[1];
  if (ids.empty()) throw ShapeError("embedding: no ids");
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= vocab)
      throw IndexError("embedding: id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab));
  Tensor out = make_result({ids.size(), d}, {&table});
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d, o.data() + i * d);
  auto tn = table.shared();
  auto* on = out.node();
  record(out, [tn, on, d, ids = std::vector<int>(ids.begin(), ids.end())] {
    auto gt = tn->grad_buffer();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      double* dst = gt.data() + static_cast<std::size_t>(ids[i]) * d;
      const double* src = on->grad.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
  return out;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const SeqLayout& q_layout,
                 const SeqLayout& k_layout, std::size_t heads, bool causal) {
  require_rank2(q, "attention", "queries");
  require_rank2(k, "attention", "keys");
  require_rank2(v, "attention", "values");
  const auto d = q.cols();
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows())
    throw ShapeError("attention: q/k/v shapes " + shape_string(q.shape()) + " " + shape_string(k.shape()) + " " +
                     shape_string(v.shape()) + " are incompatible");
  if (heads == 0 || d % heads != 0)
    throw ShapeError("attention: model width " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                     " heads");
  if (q_layout.count() != k_layout.count())
    throw ShapeError("attention: query and key layouts hold different sequence counts");
  for (std::size_t s = 0; s < q_layout.count(); ++s) {
    if (q_layout.offset[s] + q_layout.length[s] > q.rows() || k_layout.offset[s] + k_layout.length[s] > k.rows())
      throw ShapeError("attention: layout exceeds tensor rows");
    if (k_layout.length[s] == 0) throw ShapeError("attention: empty key sequence");
    if (causal && q_layout.length[s] > k_layout.length[s])
      throw ShapeError("attention: causal queries longer than keys");
  }
  const auto dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(d));

  // Saved attention probabilities, one block per (sequence, head).
  std::vector<std::size_t> prob_offset;
  std::size_t total = 0;
  for (std::size_t s = 0; s < q_layout.count(); ++s) {
    prob_offset.push_back(total);
    total += q_layout.length[s] * k_layout.length[s] * heads;
  }
  std::vector<double> probs(total);

  Tensor out = make_result({q.rows(), d}, {&q, &k, &v});
  for (std::size_t s = 0; s < q_layout.count(); ++s) {
    const auto lq = static_cast<Eigen::Index>(q_layout.length[s]);
    const auto lk = static_cast<Eigen::Index>(k_layout.length[s]);
    if (lq == 0) continue;
    for (std::size_t h = 0; h < heads; ++h) {
      CStrided qs(q.data().data() + q_layout.offset[s] * d + h * dh, lq, static_cast<Eigen::Index>(dh), stride);
      CStrided ks(k.data().data() + k_layout.offset[s] * d + h * dh, lk, static_cast<Eigen::Index>(dh), stride);
      CStrided vs(v.data().data() + k_layout.offset[s] * d + h * dh, lk, static_cast<Eigen::Index>(dh), stride);
      MMap p(probs.data() + prob_offset[s] + h * static_cast<std::size_t>(lq * lk), static_cast<std::size_t>(lq),
             static_cast<std::size_t>(lk));
      p.noalias() = (qs * ks.transpose()) * inv_sqrt;
      for (Eigen::Index i = 0; i < lq; ++i) {
        const Eigen::Index visible = causal ? i + 1 : lk;
        double m = p(i, 0);
        for (Eigen::Index j = 1; j < visible; ++j) m = std::max(m, p(i, j));
        double z = 0.0;
        for (Eigen::Index j = 0; j < visible; ++j) z += (p(i, j) = std::exp(p(i, j) - m));
        const double inv = 1.0 / z;
        for (Eigen::Index j = 0; j < visible; ++j) p(i, j) *= inv;
        for (Eigen::Index j = visible; j < lk; ++j) p(i, j) = 0.0;
      }
      MStrided os(out.mutable_data().data() + q_layout.offset[s] * d + h * dh, lq, static_cast<Eigen::Index>(dh),
                  stride);
      os.noalias() = p * vs;
    }
  }
  check_finite(out, "attention");

  auto qn = q.shared(), kn = k.shared(), vn = v.shared();
  auto* on = out.node();
  record(out, [qn, kn, vn, on, q_layout, k_layout, heads, d, dh, inv_sqrt, probs = std::move(probs),
               prob_offset = std::move(prob_offset)] {
    const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(d));
    double* gq = wants(qn) ? qn->grad_buffer().data() : nullptr;
    double* gk = wants(kn) ? kn->grad_buffer().data() : nullptr;
    double* gv = wants(vn) ? vn->grad_buffer().data() : nullptr;
    RowMat dp, ds;
    for (std::size_t s = 0; s < q_layout.count(); ++s) {
      const auto lq = static_cast<Eigen::Index>(q_layout.length[s]);
      const auto lk = static_cast<Eigen::Index>(k_layout.length[s]);
      if (lq == 0) continue;
      for (std::size_t h = 0; h < heads; ++h) {
        const auto edh = static_cast<Eigen::Index>(dh);
        CStrided qs(qn->data.data() + q_layout.offset[s] * d + h * dh, lq, edh, stride);
        CStrided ks(kn->data.data() + k_layout.offset[s] * d + h * dh, lk, edh, stride);
        CStrided vs(vn->data.data() + k_layout.offset[s] * d + h * dh, lk, edh, stride);
        CStrided dout(on->grad.data() + q_layout.offset[s] * d + h * dh, lq, edh, stride);
        CMap p(probs.data() + prob_offset[s] + h * static_cast<std::size_t>(lq * lk), static_cast<std::size_t>(lq),
               static_cast<std::size_t>(lk));
        if (gv) {
          MStrided gvs(gv + k_layout.offset[s] * d + h * dh, lk, edh, stride);
          gvs.noalias() += p.transpose() * dout;
        }
        if (!gq && !gk) continue;
        dp.noalias() = dout * vs.transpose();
        ds.resize(lq, lk);
        for (Eigen::Index i = 0; i < lq; ++i) {
          double dot = 0.0;
          for (Eigen::Index j = 0; j < lk; ++j) dot += dp(i, j) * p(i, j);
          for (Eigen::Index j = 0; j < lk; ++j) ds(i, j) = p(i, j) * (dp(i, j) - dot) * inv_sqrt;
        }
        if (gq) {
          MStrided gqs(gq + q_layout.offset[s] * d + h * dh, lq, edh, stride);
          gqs.noalias() += ds * ks;
        }
        if (gk) {
          MStrided gks(gk + k_layout.offset[s] * d + h * dh, lk, edh, stride);
          gks.noalias() += ds.transpose() * qs;
        }
      }
    }
  });
  return out;
}

Tensor sum(const Tensor& x) {
  Tensor out = make_result({1}, {&x});
  double s = 0.0;
  for (double v : x.data()) s += v;
  out.mutable_data()[0] = s;
  auto xn = x.shared();
  auto* on = out.node();
  record(out, [xn, on] {
    auto gx = xn->grad_buffer();
    for (auto& g : gx) g += on->grad[0];
  });
  return out;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor pick(const Tensor& x, std::size_t index) {
  if (index >= x.size())
    throw IndexError("pick: index " + std::to_string(index) + " outside tensor of " + std::to_string(x.size()));
  Tensor out = make_result({1}, {&x});
  out.mutable_data()[0] = x.data()[index];
  auto xn = x.shared();
  auto* on = out.node();
  record(out, [xn, on, index] { xn->grad_buffer()[index] += on->grad[0]; });
  return out;
}

namespace {

void check_targets(std::span<const int> targets, std::size_t rows, std::size_t vocab, const char* op) {
  if (targets.size() != rows)
    throw ShapeError(std::string(op) + ": " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) +
                     " rows");
  for (int t : targets)
    if (t < 0 || static_cast<std::size_t>(t) >= vocab)
      throw IndexError(std::string(op) + ": target " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(vocab));
}

}  // namespace

Tensor label_smoothed_xent(const Tensor& logits, std::span<const int> targets, double alpha) {
  if (!(alpha >= 0.0 && alpha < 1.0)) throw std::invalid_argument("label_smoothed_xent: alpha must lie in [0, 1)");
  const auto vocab = logits.cols(), rows = logits.rows();
  check_targets(targets, rows, vocab, "label_smoothed_xent");
  const double off = alpha / static_cast<double>(vocab);
  std::vector<double> probs(logits.size());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = logits.data().subspan(r * vocab, vocab);
    const double lse = log_sum_exp(row);
    double sum_logp = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      const double lp = row[j] - lse;
      sum_logp += lp;
      probs[r * vocab + j] = std::exp(lp);
    }
    const double lp_target = row[static_cast<std::size_t>(targets[r])] - lse;
    total += -(1.0 - alpha) * lp_target - off * sum_logp;
  }
  Tensor out = make_result({1}, {&logits});
  out.mutable_data()[0] = total / static_cast<double>(rows);
  auto xn = logits.shared();
  auto* on = out.node();
  record(out, [xn, on, rows, vocab, alpha, off, probs = std::move(probs),
               targets = std::vector<int>(targets.begin(), targets.end())] {
    auto gx = xn->grad_buffer();
    const double g = on->grad[0] / static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < vocab; ++j) gx[r * vocab + j] += g * (probs[r * vocab + j] - off);
      gx[r * vocab + static_cast<std::size_t>(targets[r])] -= g * (1.0 - alpha);
    }
  });
  return out;
}

Tensor anti_unigram_loss(const Tensor& logits, std::span<const int> targets, std::span<const double> omega,
                         double lambda) {
  if (!(lambda >= 0.0)) throw std::invalid_argument("anti_unigram_loss: lambda must be non-negative");
  const auto vocab = logits.cols(), rows = logits.rows();
  check_targets(targets, rows, vocab, "anti_unigram_loss");
  if (omega.size() != vocab) throw ShapeError("anti_unigram_loss: unigram length differs from vocabulary");
  double omega_entropy_term = 0.0;  // sum omega log omega
  for (double w : omega) {
    if (!(w > 0.0)) throw std::invalid_argument("anti_unigram_loss: unigram must be strictly positive");
    omega_entropy_term += w * std::log(w);
  }
  std::vector<double> probs(logits.size());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = logits.data().subspan(r * vocab, vocab);
    const double lse = log_sum_exp(row);
    double cross = 0.0;  // sum omega log p
    for (std::size_t j = 0; j < vocab; ++j) {
      const double lp = row[j] - lse;
      cross += omega[j] * lp;
      probs[r * vocab + j] = std::exp(lp);
    }
    const double kl_target = -(row[static_cast<std::size_t>(targets[r])] - lse);
    const double kl_unigram = omega_entropy_term - cross;
    total += kl_target - lambda * kl_unigram;
  }
  Tensor out = make_result({1}, {&logits});
  out.mutable_data()[0] = total / static_cast<double>(rows);
  auto xn = logits.shared();
  auto* on = out.node();
  record(out, [xn, on, rows, vocab, lambda, probs = std::move(probs),
               targets = std::vector<int>(targets.begin(), targets.end()),
               omega = std::vector<double>(omega.begin(), omega.end())] {
    auto gx = xn->grad_buffer();
    const double g = on->grad[0] / static_cast<double>(rows);
    // d/dz [-log p_t] = p - e_t ; d/dz KL(omega || p) = p - omega
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < vocab; ++j) {
        const double p = probs[r * vocab + j];
        gx[r * vocab + j] += g * ((p - (static_cast<int>(j) == targets[r] ? 1.0 : 0.0)) - lambda * (p - omega[j]));
      }
    }
  });
  return out;
}

}  // namespace unibias
