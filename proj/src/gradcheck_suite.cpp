#include "unibias/harness.hpp"
#include "unibias/ops.hpp"
#include "unibias/random.hpp"

namespace unibias {

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
  return Tensor::from(std::move(shape), std::move(v), true);
}

// sum(x * w) with fixed random w, so no output element is symmetric with
// another in the check.
Tensor weighted_sum(const Tensor& x, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(x.size());
  for (auto& v : w) v = rng.uniform() * 2.0 - 1.0;
  return sum(mul(x, Tensor::from(x.shape(), std::move(w))));
}

}  // namespace

std::vector<NamedGradcheck> gradcheck_suite(std::uint64_t seed, std::size_t trials_per_op) {
  std::vector<NamedGradcheck> out;
  Rng rng(seed);
  auto check = [&](std::string name, const std::function<Tensor()>& loss, std::vector<Tensor> params) {
    out.push_back({std::move(name), gradcheck(loss, std::move(params))});
  };

  for (std::size_t t = 0; t < trials_per_op; ++t) {
    const auto ws = rng.next_u64();
    {
      auto a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {4, 2});
      check("matmul", [&] { return weighted_sum(matmul(a, b), ws); }, {a, b});
    }
    {
      auto x = random_tensor(rng, {3, 4}), w = random_tensor(rng, {5, 4}), b = random_tensor(rng, {5});
      check("linear", [&] { return weighted_sum(linear(x, w, &b), ws); }, {x, w, b});
    }
    {
      auto a = random_tensor(rng, {2, 3}), b = random_tensor(rng, {3});
      check("add+mul", [&] { return weighted_sum(mul(add(a, b), a), ws); }, {a, b});
    }
    {
      auto x = random_tensor(rng, {3, 5});
      check("scale+relu", [&] { return weighted_sum(relu(scale(x, 1.7)), ws); }, {x});
    }
    {
      auto x = random_tensor(rng, {4, 5});
      const auto mask_seed = rng.next_u64();
      check("dropout", [&] {
        Rng r(mask_seed);
        return weighted_sum(dropout(x, 0.3, r), ws);
      }, {x});
    }
    {
      auto x = random_tensor(rng, {3, 6}), g = random_tensor(rng, {6}), s = random_tensor(rng, {6});
      check("layer_norm", [&] { return weighted_sum(layer_norm(x, g, s), ws); }, {x, g, s});
    }
    {
      auto x = random_tensor(rng, {2, 7}, -3, 3);
      check("softmax", [&] { return weighted_sum(softmax(x), ws); }, {x});
      check("log_softmax", [&] { return weighted_sum(log_softmax(x), ws); }, {x});
    }
    {
      auto table = random_tensor(rng, {6, 3});
      const int ids[] = {1, 4, 1, 0};
      check("embedding", [&] { return weighted_sum(embedding(table, ids), ws); }, {table});
    }
    for (bool causal : {false, true}) {
      auto q = random_tensor(rng, {5, 4}), k = random_tensor(rng, {5, 4}), v = random_tensor(rng, {5, 4});
      const std::size_t lens[] = {3, 2};
      const auto layout = SeqLayout::contiguous(lens);
      check(causal ? "attention_causal" : "attention",
            [&] { return weighted_sum(attention(q, k, v, layout, layout, 2, causal), ws); }, {q, k, v});
    }
    {
      auto x = random_tensor(rng, {3, 5}, -2, 2);
      const int targets[] = {0, 4, 2};
      check("label_smoothed_xent", [&] { return label_smoothed_xent(x, targets, 0.1); }, {x});
    }
    {
      auto x = random_tensor(rng, {3, 4}, -2, 2);
      const int targets[] = {3, 1, 0};
      const double omega[] = {0.4, 0.3, 0.2, 0.1};
      check("anti_unigram_loss", [&] { return anti_unigram_loss(x, targets, omega, 0.5); }, {x});
    }
    {
      auto x = random_tensor(rng, {4, 3});
      check("mean+pick", [&] { return add(mean(mul(x, x)), pick(x, 5)); }, {x});
    }
  }

  // Full objective: 2 layers, d = 32, log-unigram output layer, dropout with
  // a fixed mask, both the standard and the anti-unigram loss.
  ModelConfig mc;
  mc.layers = 2;
  mc.heads = 4;
  mc.d_model = 32;
  mc.d_ffn = 64;
  mc.vocab_size = 12;
  mc.max_len = 16;
  std::vector<double> probs{0.01, 0.01, 0.2, 0.01, 0.25, 0.12, 0.1, 0.08, 0.07, 0.06, 0.05, 0.04};
  const UnigramDistribution u{probs};
  BiasInit init;
  init.mode = BiasMode::LogUnigram;
  init.unigram = u;
  const Model model(mc, init, seed);
  const std::vector<SentencePair> pairs{{{4, 5, 6, 7}, {8, 9, 10, 2}}, {{11, 4}, {5, 11, 2}}};
  const auto batch = Batch::from_pairs(std::span<const SentencePair>(pairs));
  for (bool regularized : {false, true}) {
    TrainingConfig tc;
    if (regularized) tc.regularizer = RegularizerConfig{0.5, 1};
    check(regularized ? "model_loss_anti_unigram" : "model_loss", [&] {
      Rng r(seed);
      return batch_loss(model, batch, tc, u, 0, &r);
    }, model.parameters());
  }
  return out;
}

}  // namespace unibias
