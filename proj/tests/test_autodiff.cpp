#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "unibias/gradcheck.hpp"
#include "unibias/ops.hpp"

using namespace unibias;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
  return Tensor::from(std::move(shape), std::move(v), true);
}

// Weighted sum with fixed random weights turns any tensor into a scalar whose
// gradient exercises every output element.
Tensor probe_sum(const Tensor& t, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(t.size());
  for (auto& x : w) x = rng.uniform() * 2.0 - 1.0;
  return sum(mul(t, Tensor::from(t.shape(), w)));
}

void expect_near_all(std::span<const double> got, std::initializer_list<double> want, double tol) {
  ASSERT_EQ(got.size(), want.size());
  std::size_t i = 0;
  for (double w : want) EXPECT_NEAR(got[i++], w, tol) << "at " << i - 1;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto m = Tensor::from({2, 2}, {1, 2, 3, 4});
  expect_near_all(matmul(eye, m).data(), {1, 2, 3, 4}, 0.0);
}

TEST(Matmul, ProjectorSelectsFirstRow) {
  auto p = Tensor::from({2, 2}, {1, 0, 0, 0});
  auto m = Tensor::from({2, 2}, {5, 6, 7, 8});
  expect_near_all(matmul(p, m).data(), {5, 6, 0, 0}, 0.0);
}

TEST(Matmul, MatrixVectorProduct) {
  // 1*5 + 2*6 = 17, 3*5 + 4*6 = 39
  auto out = matmul(Tensor::from({2, 2}, {1, 2, 3, 4}), Tensor::from({2, 1}, {5, 6}));
  EXPECT_EQ(out.shape(), (Shape{2, 1}));
  expect_near_all(out.data(), {17, 39}, 0.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3] x [2x3]"), std::string::npos) << e.what();
  }
}

TEST(Softmax, ClosedForms) {
  expect_near_all(softmax(Tensor::from({2}, {0, 0})).data(), {0.5, 0.5}, 1e-15);
  expect_near_all(softmax(Tensor::from({2}, {0, std::log(2.0)})).data(), {1.0 / 3, 2.0 / 3}, 1e-15);
  expect_near_all(softmax(Tensor::from({2}, {5, 5 + std::log(2.0)})).data(), {1.0 / 3, 2.0 / 3}, 1e-15);
}

TEST(Softmax, RowsSumToOneAtExtremeLogits) {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    auto x = random_tensor(rng, {4, 17}, -700.0, 700.0);
    auto y = softmax(x);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < 17; ++j) s += y.data()[r * 17 + j];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Softmax, ShiftInvariance) {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    auto x = random_tensor(rng, {9}, -20.0, 20.0);
    const double c = rng.uniform() * 200.0 - 100.0;
    std::vector<double> shifted(x.data().begin(), x.data().end());
    for (auto& v : shifted) v += c;
    auto a = softmax(x), b = softmax(Tensor::from({9}, shifted));
    for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-12);
  }
}

TEST(Softmax, EmptyLastDimensionRejected) {
  EXPECT_THROW(softmax_values(std::span<const double>{}), ShapeError);
  EXPECT_THROW(Tensor::from({0}, {}), ShapeError);
}

TEST(LabelSmoothedXent, UniformLogitsGiveLogV) {
  for (double alpha : {0.0, 0.1, 0.5, 0.9}) {
    for (int target : {0, 3, 6}) {
      const int targets[] = {target};
      auto loss = label_smoothed_xent(Tensor::zeros({1, 7}), targets, alpha);
      EXPECT_NEAR(loss.item(), std::log(7.0), 1e-14);
    }
  }
}

TEST(LabelSmoothedXent, AlphaZeroIsNegativeLogLikelihood) {
  auto logits = Tensor::from({1, 3}, {0.3, -1.2, 2.0});
  const int targets[] = {1};
  const auto logp = log_softmax_values(logits.data());
  EXPECT_DOUBLE_EQ(label_smoothed_xent(logits, targets, 0.0).item(), -logp[1]);
}

TEST(LabelSmoothedXent, SmoothedClosedForm) {
  // Scalar oracle in extended precision.
  const long double l7 = std::log(0.7L), l2 = std::log(0.2L), l1 = std::log(0.1L);
  const long double expected = 0.9L * -l7 + (0.1L / 3.0L) * (-l7 - l2 - l1);
  auto logits = Tensor::from({1, 3}, {std::log(0.7), std::log(0.2), std::log(0.1)});
  const int targets[] = {0};
  EXPECT_NEAR(label_smoothed_xent(logits, targets, 0.1).item(), static_cast<double>(expected), 1e-14);
}

TEST(LabelSmoothedXent, TargetOutOfRange) {
  const int targets[] = {3};
  EXPECT_THROW(label_smoothed_xent(Tensor::zeros({1, 3}), targets, 0.1), IndexError);
}

TEST(LayerNorm, ConstantRowMapsToZero) {
  auto g = Tensor::filled({3}, 1.0), b = Tensor::zeros({3});
  expect_near_all(layer_norm(Tensor::from({3}, {1, 1, 1}), g, b).data(), {0, 0, 0}, 0.0);
}

TEST(LayerNorm, AlreadyNormalized) {
  auto g = Tensor::filled({2}, 1.0), b = Tensor::zeros({2});
  expect_near_all(layer_norm(Tensor::from({2}, {-1, 1}), g, b, 1e-300).data(), {-1, 1}, 1e-15);
}

TEST(LayerNorm, HandComputedMeanVariance) {
  // mean 2, population variance 8/3
  const long double sd = std::sqrt(8.0L / 3.0L + 1e-5L);
  const double z = static_cast<double>(2.0L / sd);
  auto g = Tensor::filled({3}, 1.0), b = Tensor::zeros({3});
  auto y = layer_norm(Tensor::from({3}, {0, 2, 4}), g, b, 1e-5);
  expect_near_all(y.data(), {-z, 0.0, z}, 1e-14);
  EXPECT_NEAR(z, 1.2247, 1e-4);
}

TEST(LayerNorm, RejectsBadArguments) {
  auto g = Tensor::filled({3}, 1.0), b = Tensor::zeros({3});
  EXPECT_THROW(layer_norm(Tensor::zeros({2, 2}), g, b), ShapeError);
  EXPECT_THROW(layer_norm(Tensor::zeros({3}), g, b, 0.0), std::invalid_argument);
}

TEST(Backward, SumGivesOnes) {
  auto x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Tape tape;
  tape.backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, HalfSquaredNormGivesX) {
  auto x = Tensor::from({4}, {0.5, -2.0, 3.0, 0.0}, true);
  Tape tape;
  tape.backward(scale(sum(mul(x, x)), 0.5));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], x.data()[i]);
}

TEST(Backward, NonScalarLossRejected) {
  auto x = Tensor::from({2}, {1, 2}, true);
  Tape tape;
  auto y = scale(x, 2.0);
  EXPECT_THROW(tape.backward(y), ShapeError);
}

TEST(Backward, DetachedLeafReceivesNoGradient) {
  auto x = Tensor::from({2}, {1, 2}, true);
  auto frozen = Tensor::from({2}, {3, 4}, false);
  Tape tape;
  tape.backward(sum(mul(x, frozen)));
  EXPECT_TRUE(x.has_grad());
  EXPECT_FALSE(frozen.has_grad());
}

TEST(Backward, EachRuleRunsOnce) {
  // y = x + x shares an input; the gradient must be 2, not 4.
  auto x = Tensor::from({1}, {3.0}, true);
  Tape tape;
  auto y = add(x, x);
  auto z = mul(y, y);
  tape.backward(sum(z));
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0 * 2.0 * 6.0);
}

TEST(Backward, NoTapeNoRecording) {
  auto x = Tensor::from({2}, {1, 2}, true);
  auto y = scale(x, 2.0);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Gradcheck, ScalarSquare) {
  auto x = Tensor::from({1}, {3.0}, true);
  auto report = gradcheck([&] { return sum(mul(x, x)); }, {x}, {.step = 1e-5, .tolerance = 1e-8});
  EXPECT_TRUE(report.ok()) << report.summary();
  EXPECT_NEAR(x.grad()[0], 6.0, 1e-12);
}

TEST(Gradcheck, SoftmaxThenIndex) {
  auto x = Tensor::from({5}, {0.3, -0.2, 1.5, 0.0, -1.0}, true);
  auto report = gradcheck([&] { return pick(softmax(x), 2); }, {x});
  EXPECT_TRUE(report.ok()) << report.summary();
}

TEST(Gradcheck, WrongBackwardRuleIsReported) {
  auto x = Tensor::from({3}, {0.5, 1.0, -2.0}, true);
  // cube with a deliberately wrong derivative (2x instead of 3x^2)
  auto bad_cube = [](const Tensor& in) {
    Tensor out = make_result(in.shape(), {&in});
    for (std::size_t i = 0; i < in.size(); ++i) out.mutable_data()[i] = std::pow(in.data()[i], 3);
    auto xn = in.shared();
    auto* on = out.node();
    if (out.requires_grad())
      Tape::active()->record(out.shared(), [xn, on] {
        for (std::size_t i = 0; i < xn->data.size(); ++i) xn->grad_buffer()[i] += on->grad[i] * 2.0 * xn->data[i];
      });
    return out;
  };
  auto report = gradcheck([&] { return sum(bad_cube(x)); }, {x});
  EXPECT_FALSE(report.ok());
}

// Every differentiable op passes central-difference checks on 100 random
// instances.
class OpGradcheck : public ::testing::TestWithParam<int> {};

TEST_P(OpGradcheck, RandomInstances) {
  const int which = GetParam();
  Rng rng(1000 + static_cast<std::uint64_t>(which));
  for (int trial = 0; trial < 100; ++trial) {
    const std::uint64_t ws = rng.next_u64();
    GradcheckReport report;
    switch (which) {
      case 0: {
        auto a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {4, 2});
        report = gradcheck([&] { return probe_sum(matmul(a, b), ws); }, {a, b});
        break;
      }
      case 1: {
        auto x = random_tensor(rng, {3, 4}), w = random_tensor(rng, {5, 4}), b = random_tensor(rng, {5});
        report = gradcheck([&] { return probe_sum(linear(x, w, &b), ws); }, {x, w, b});
        break;
      }
      case 2: {
        auto a = random_tensor(rng, {2, 3}), b = random_tensor(rng, {3});
        report = gradcheck([&] { return probe_sum(mul(add(a, b), a), ws); }, {a, b});
        break;
      }
      case 3: {
        auto x = random_tensor(rng, {3, 5});
        report = gradcheck([&] { return probe_sum(relu(scale(x, 1.7)), ws); }, {x});
        break;
      }
      case 4: {
        auto x = random_tensor(rng, {3, 6}), g = random_tensor(rng, {6}), s = random_tensor(rng, {6});
        report = gradcheck([&] { return probe_sum(layer_norm(x, g, s), ws); }, {x, g, s});
        break;
      }
      case 5: {
        auto x = random_tensor(rng, {2, 7}, -3, 3);
        report = gradcheck([&] { return probe_sum(softmax(x), ws); }, {x});
        break;
      }
      case 6: {
        auto x = random_tensor(rng, {2, 7}, -3, 3);
        report = gradcheck([&] { return probe_sum(log_softmax(x), ws); }, {x});
        break;
      }
      case 7: {
        auto table = random_tensor(rng, {6, 3});
        const int ids[] = {1, 4, 1, 0};
        report = gradcheck([&] { return probe_sum(embedding(table, ids), ws); }, {table});
        break;
      }
      case 8: {
        // two packed sequences (lengths 3 and 2), 2 heads, causal and cross
        auto q = random_tensor(rng, {5, 4}), k = random_tensor(rng, {5, 4}), v = random_tensor(rng, {5, 4});
        const std::size_t lens[] = {3, 2};
        auto layout = SeqLayout::contiguous(lens);
        const bool causal = trial % 2 == 0;
        report = gradcheck([&] { return probe_sum(attention(q, k, v, layout, layout, 2, causal), ws); }, {q, k, v});
        break;
      }
      case 9: {
        auto x = random_tensor(rng, {3, 5}, -2, 2);
        const int targets[] = {0, 4, 2};
        report = gradcheck([&] { return label_smoothed_xent(x, targets, 0.1); }, {x});
        break;
      }
      case 10: {
        auto x = random_tensor(rng, {3, 4}, -2, 2);
        const int targets[] = {3, 1, 0};
        const double omega[] = {0.4, 0.3, 0.2, 0.1};
        report = gradcheck([&] { return anti_unigram_loss(x, targets, omega, 0.5); }, {x});
        break;
      }
      case 11: {
        auto x = random_tensor(rng, {4, 3});
        report = gradcheck([&] { return mean(mul(x, x)); }, {x});
        break;
      }
    }
    ASSERT_TRUE(report.ok()) << "op " << which << " trial " << trial << "\n" << report.summary();
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradcheck, ::testing::Range(0, 12));

TEST(Gradcheck, TwoLayerToyModel) {
  Rng rng(5);
  auto x = random_tensor(rng, {4, 3}, -1, 1);
  x.set_requires_grad(false);
  auto w1 = random_tensor(rng, {6, 3}), b1 = random_tensor(rng, {6});
  auto w2 = random_tensor(rng, {5, 6}), b2 = random_tensor(rng, {5});
  const int targets[] = {0, 2, 4, 1};
  auto report = gradcheck([&] { return label_smoothed_xent(linear(relu(linear(x, w1, &b1)), w2, &b2), targets, 0.1); },
                          {w1, b1, w2, b2});
  EXPECT_TRUE(report.ok()) << report.summary();
}

TEST(Dropout, InvertedScalingAndDeterminism) {
  auto x = Tensor::filled({1000}, 1.0);
  Rng a(3), b(3);
  auto ya = dropout(x, 0.1, a), yb = dropout(x, 0.1, b);
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < 1000; ++i) {
    EXPECT_EQ(ya.data()[i], yb.data()[i]);
    if (ya.data()[i] == 0.0)
      ++zeros;
    else
      EXPECT_DOUBLE_EQ(ya.data()[i], 1.0 / 0.9);
  }
  EXPECT_GT(zeros, 50u);
  EXPECT_LT(zeros, 150u);
  Rng c(4);
  EXPECT_EQ(dropout(x, 0.0, c).node(), x.node());
}

TEST(Attention, CausalFirstQuerySeesOnlyFirstKey) {
  auto q = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto k = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto v = Tensor::from({2, 2}, {10, 20, 30, 40});
  const std::size_t lens[] = {2};
  auto l = SeqLayout::contiguous(lens);
  auto out = attention(q, k, v, l, l, 1, true);
  EXPECT_DOUBLE_EQ(out.data()[0], 10.0);
  EXPECT_DOUBLE_EQ(out.data()[1], 20.0);
}
