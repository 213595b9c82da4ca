#include "unibias/model.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "unibias/binary_io.hpp"
#include "unibias/errors.hpp"

namespace unibias {

namespace {

constexpr char kCheckpointMagic[] = "UNIBIAS-MODEL";
constexpr std::uint32_t kCheckpointVersion = 1;

Tensor normal_param(Rng& rng, Shape shape, double stddev, std::string name) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  Tensor t = Tensor::from(std::move(shape), std::move(v), true);
  t.set_name(std::move(name));
  return t;
}

Tensor const_param(Shape shape, double value, std::string name) {
  Tensor t = Tensor::filled(std::move(shape), value, true);
  t.set_name(std::move(name));
  return t;
}

}  // namespace

double l2_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

void ModelConfig::validate() const {
  if (layers == 0 || heads == 0 || d_model == 0 || d_ffn == 0 || vocab_size == 0 || max_len == 0)
    throw ConfigError("model dimensions must all be at least 1");
  if (d_model % heads != 0)
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
}

BiasMode parse_bias_mode(std::string_view name) {
  if (name == "zero") return BiasMode::Zero;
  if (name == "none") return BiasMode::None;
  if (name == "log_unigram") return BiasMode::LogUnigram;
  if (name == "external_log_unigram") return BiasMode::ExternalLogUnigram;
  throw ConfigError("unknown bias mode '" + std::string(name) +
                    "' (expected zero, none, log_unigram or external_log_unigram)");
}

std::string_view bias_mode_name(BiasMode mode) {
  switch (mode) {
    case BiasMode::Zero:
      return "zero";
    case BiasMode::None:
      return "none";
    case BiasMode::LogUnigram:
      return "log_unigram";
    case BiasMode::ExternalLogUnigram:
      return "external_log_unigram";
  }
  return "?";
}

Tensor OutputLayer::logits(const Tensor& phi, bool include_bias) const {
  return linear(phi, weight, include_bias && has_bias() ? &bias : nullptr);
}

OutputLayer init_output_layer(const ModelConfig& config, const BiasInit& bias_init, std::uint64_t seed) {
  const auto vocab = config.vocab_size, d = config.d_model;
  if (vocab == 0 || d == 0) throw ConfigError("output layer needs positive vocabulary size and width");
  OutputLayer out;
  out.mode = bias_init.mode;

  std::vector<double> log_u;
  const bool need_unigram = is_log_unigram(bias_init.mode) || bias_init.scale_baseline;
  if (need_unigram) {
    if (!bias_init.unigram) throw ConfigError("log-unigram bias requires a unigram distribution");
    if (bias_init.unigram->size() != vocab)
      throw ConfigError("unigram distribution has " + std::to_string(bias_init.unigram->size()) +
                        " entries for a vocabulary of " + std::to_string(vocab));
    if (!bias_init.unigram->strictly_positive())
      throw ConfigError("log-unigram bias needs a strictly positive unigram distribution (use smoothing > 0)");
    log_u = bias_init.unigram->log_probs();
  }

  Rng rng(seed);
  out.weight = normal_param(rng, {vocab, d}, 1.0 / std::sqrt(static_cast<double>(d)), "out.weight");

  if (bias_init.mode != BiasMode::None) {
    out.bias = is_log_unigram(bias_init.mode) ? Tensor::from({vocab}, log_u, true) : Tensor::zeros({vocab}, true);
    out.bias.set_name("out.bias");
  }

  if (is_log_unigram(bias_init.mode) || bias_init.scale_baseline) {
    double target = 0.0;
    for (double v : log_u) target += v * v;
    target = std::sqrt(target);
    out.weight_scale = target / l2_norm(out.weight);
    for (auto& w : out.weight.mutable_data()) w *= out.weight_scale;
  }
  if (bias_init.zero_projection) {
    for (auto& w : out.weight.mutable_data()) w = 0.0;
    out.weight_scale = 0.0;
  }
  return out;
}

// --------------------------------------------------------------------- Batch

Batch Batch::from_pairs(std::span<const SentencePair* const> pairs) {
  Batch b;
  std::vector<std::size_t> src_len, tgt_len;
  for (const SentencePair* p : pairs) {
    if (p->target.empty()) throw DataError("batch: empty target sequence");
    for (std::size_t i = 0; i < p->source.size(); ++i) {
      b.src_ids.push_back(p->source[i]);
      b.src_positions.push_back(static_cast<int>(i));
    }
    b.src_ids.push_back(kEosId);
    b.src_positions.push_back(static_cast<int>(p->source.size()));
    src_len.push_back(p->source.size() + 1);

    b.dec_ids.push_back(kBosId);
    for (std::size_t i = 0; i < p->target.size(); ++i) {
      if (i + 1 < p->target.size()) b.dec_ids.push_back(p->target[i]);
      b.dec_positions.push_back(static_cast<int>(i));
      b.labels.push_back(p->target[i]);
    }
    tgt_len.push_back(p->target.size());
  }
  b.src = SeqLayout::contiguous(src_len);
  b.tgt = SeqLayout::contiguous(tgt_len);
  return b;
}

Batch Batch::from_pairs(std::span<const SentencePair> pairs) {
  std::vector<const SentencePair*> ptrs;
  for (const auto& p : pairs) ptrs.push_back(&p);
  return from_pairs(std::span<const SentencePair* const>(ptrs));
}

// --------------------------------------------------------------------- Model

Model::Model(const ModelConfig& config, const BiasInit& bias_init, std::uint64_t seed) : config_(config), seed_(seed) {
  config_.validate();
  const auto d = config_.d_model, f = config_.d_ffn, v = config_.vocab_size;
  Rng rng(derive_seed({seed, 0xb0d7}));
  const double emb_sd = 1.0 / std::sqrt(static_cast<double>(d));
  auto lin = [&](std::size_t out, std::size_t in, const std::string& name) {
    return normal_param(rng, {out, in}, 1.0 / std::sqrt(static_cast<double>(in)), name);
  };
  auto attention_block = [&](const std::string& p) {
    return Attention{lin(d, d, p + ".wq"), const_param({d}, 0.0, p + ".bq"), lin(d, d, p + ".wk"),
                     const_param({d}, 0.0, p + ".bk"), lin(d, d, p + ".wv"), const_param({d}, 0.0, p + ".bv"),
                     lin(d, d, p + ".wo"), const_param({d}, 0.0, p + ".bo")};
  };
  auto ffn_block = [&](const std::string& p) {
    return Feedforward{lin(f, d, p + ".w1"), const_param({f}, 0.0, p + ".b1"), lin(d, f, p + ".w2"),
                       const_param({d}, 0.0, p + ".b2")};
  };

  if (!config_.decoder_only) {
    src_embed_ = normal_param(rng, {v, d}, emb_sd, "src_embed");
    for (std::size_t l = 0; l < config_.layers; ++l) {
      const std::string p = "enc." + std::to_string(l);
      EncoderLayer layer;
      layer.ln1_g = const_param({d}, 1.0, p + ".ln1.g");
      layer.ln1_b = const_param({d}, 0.0, p + ".ln1.b");
      layer.self = attention_block(p + ".self");
      layer.ln2_g = const_param({d}, 1.0, p + ".ln2.g");
      layer.ln2_b = const_param({d}, 0.0, p + ".ln2.b");
      layer.ffn = ffn_block(p + ".ffn");
      encoder_.push_back(std::move(layer));
    }
    enc_norm_g_ = const_param({d}, 1.0, "enc.norm.g");
    enc_norm_b_ = const_param({d}, 0.0, "enc.norm.b");
  }
  tgt_embed_ = normal_param(rng, {v, d}, emb_sd, "tgt_embed");
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    DecoderLayer layer;
    layer.ln1_g = const_param({d}, 1.0, p + ".ln1.g");
    layer.ln1_b = const_param({d}, 0.0, p + ".ln1.b");
    layer.self = attention_block(p + ".self");
    if (!config_.decoder_only) {
      layer.ln2_g = const_param({d}, 1.0, p + ".ln2.g");
      layer.ln2_b = const_param({d}, 0.0, p + ".ln2.b");
      layer.cross = attention_block(p + ".cross");
    }
    layer.ln3_g = const_param({d}, 1.0, p + ".ln3.g");
    layer.ln3_b = const_param({d}, 0.0, p + ".ln3.b");
    layer.ffn = ffn_block(p + ".ffn");
    decoder_.push_back(std::move(layer));
  }
  dec_norm_g_ = const_param({d}, 1.0, "dec.norm.g");
  dec_norm_b_ = const_param({d}, 0.0, "dec.norm.b");

  output_ = init_output_layer(config_, bias_init, derive_seed({seed, 0x07e7}));

  std::vector<double> pe(config_.max_len * d);
  for (std::size_t pos = 0; pos < config_.max_len; ++pos)
    for (std::size_t i = 0; i < d; i += 2) {
      const double angle = static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
      pe[pos * d + i] = std::sin(angle);
      if (i + 1 < d) pe[pos * d + i + 1] = std::cos(angle);
    }
  positional_ = Tensor::from({config_.max_len, d}, std::move(pe));
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  auto add_attention = [&](const Attention& a) {
    for (const Tensor* t : {&a.wq, &a.bq, &a.wk, &a.bk, &a.wv, &a.bv, &a.wo, &a.bo}) out.push_back(*t);
  };
  auto add_ffn = [&](const Feedforward& f) {
    for (const Tensor* t : {&f.w1, &f.b1, &f.w2, &f.b2}) out.push_back(*t);
  };
  if (!config_.decoder_only) {
    out.push_back(src_embed_);
    for (const auto& l : encoder_) {
      out.push_back(l.ln1_g);
      out.push_back(l.ln1_b);
      add_attention(l.self);
      out.push_back(l.ln2_g);
      out.push_back(l.ln2_b);
      add_ffn(l.ffn);
    }
    out.push_back(enc_norm_g_);
    out.push_back(enc_norm_b_);
  }
  out.push_back(tgt_embed_);
  for (const auto& l : decoder_) {
    out.push_back(l.ln1_g);
    out.push_back(l.ln1_b);
    add_attention(l.self);
    if (!config_.decoder_only) {
      out.push_back(l.ln2_g);
      out.push_back(l.ln2_b);
      add_attention(l.cross);
    }
    out.push_back(l.ln3_g);
    out.push_back(l.ln3_b);
    add_ffn(l.ffn);
  }
  out.push_back(dec_norm_g_);
  out.push_back(dec_norm_b_);
  out.push_back(output_.weight);
  if (output_.has_bias()) out.push_back(output_.bias);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.size();
  return n;
}

Tensor Model::drop(const Tensor& x, const ForwardContext& ctx) const {
  if (!ctx.training || config_.dropout == 0.0) return x;
  if (!ctx.rng) throw std::logic_error("training forward pass with dropout needs an rng");
  return dropout(x, config_.dropout, *ctx.rng);
}

Tensor Model::embed(const Tensor& table, std::span<const int> ids, std::span<const int> positions,
                    const ForwardContext& ctx) const {
  for (int p : positions)
    if (p < 0 || static_cast<std::size_t>(p) >= config_.max_len)
      throw IndexError("sequence position " + std::to_string(p) + " exceeds max_len " +
                       std::to_string(config_.max_len));
  Tensor x = scale(embedding(table, ids), std::sqrt(static_cast<double>(config_.d_model)));
  x = add(x, embedding(positional_, positions));
  return drop(x, ctx);
}

Tensor Model::attend(const Attention& a, const Tensor& queries_in, const Tensor& keys_in, const SeqLayout& q_layout,
                     const SeqLayout& k_layout, bool causal, const ForwardContext& ctx) const {
  Tensor q = linear(queries_in, a.wq, &a.bq);
  Tensor k = linear(keys_in, a.wk, &a.bk);
  Tensor v = linear(keys_in, a.wv, &a.bv);
  Tensor o = attention(q, k, v, q_layout, k_layout, config_.heads, causal);
  return drop(linear(o, a.wo, &a.bo), ctx);
}

Tensor Model::feedforward(const Feedforward& f, const Tensor& x, const ForwardContext& ctx) const {
  Tensor h = drop(relu(linear(x, f.w1, &f.b1)), ctx);
  return drop(linear(h, f.w2, &f.b2), ctx);
}

Tensor Model::run_encoder(std::span<const int> ids, std::span<const int> positions, const SeqLayout& layout,
                          const ForwardContext& ctx) const {
  Tensor x = embed(src_embed_, ids, positions, ctx);
  for (const auto& l : encoder_) {
    Tensor h = layer_norm(x, l.ln1_g, l.ln1_b);
    x = add(x, attend(l.self, h, h, layout, layout, false, ctx));
    h = layer_norm(x, l.ln2_g, l.ln2_b);
    x = add(x, feedforward(l.ffn, h, ctx));
  }
  return layer_norm(x, enc_norm_g_, enc_norm_b_);
}

Tensor Model::run_decoder(std::span<const int> ids, std::span<const int> positions, const SeqLayout& layout,
                          const Tensor* memory, const SeqLayout* memory_layout, const ForwardContext& ctx) const {
  Tensor y = embed(tgt_embed_, ids, positions, ctx);
  for (const auto& l : decoder_) {
    Tensor h = layer_norm(y, l.ln1_g, l.ln1_b);
    y = add(y, attend(l.self, h, h, layout, layout, true, ctx));
    if (!config_.decoder_only) {
      h = layer_norm(y, l.ln2_g, l.ln2_b);
      y = add(y, attend(l.cross, h, *memory, layout, *memory_layout, false, ctx));
    }
    h = layer_norm(y, l.ln3_g, l.ln3_b);
    y = add(y, feedforward(l.ffn, h, ctx));
  }
  return layer_norm(y, dec_norm_g_, dec_norm_b_);
}

Tensor Model::decoder_states(const Batch& batch, const ForwardContext& ctx) const {
  if (config_.decoder_only) return run_decoder(batch.dec_ids, batch.dec_positions, batch.tgt, nullptr, nullptr, ctx);
  Tensor memory = run_encoder(batch.src_ids, batch.src_positions, batch.src, ctx);
  return run_decoder(batch.dec_ids, batch.dec_positions, batch.tgt, &memory, &batch.src, ctx);
}

Tensor Model::forward_logits(const Batch& batch, const ForwardContext& ctx, bool include_bias) const {
  return output_.logits(decoder_states(batch, ctx), include_bias);
}

EncodedSources Model::encode(std::span<const std::vector<int>> sources) const {
  NoGradScope no_grad;
  EncodedSources enc;
  if (config_.decoder_only) return enc;
  std::vector<int> ids, positions;
  std::vector<std::size_t> lengths;
  for (const auto& s : sources) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      ids.push_back(s[i]);
      positions.push_back(static_cast<int>(i));
    }
    ids.push_back(kEosId);
    positions.push_back(static_cast<int>(s.size()));
    lengths.push_back(s.size() + 1);
  }
  enc.layout = SeqLayout::contiguous(lengths);
  enc.memory = run_encoder(ids, positions, enc.layout, ForwardContext{});
  return enc;
}

Tensor Model::last_states(const EncodedSources& enc, std::span<const std::vector<int>> prefixes,
                          std::span<const std::size_t> source_index) const {
  NoGradScope no_grad;
  if (prefixes.size() != source_index.size()) throw ShapeError("next_log_probs: prefix/source count mismatch");
  std::vector<int> ids, positions, last_rows;
  std::vector<std::size_t> lengths;
  SeqLayout mem;
  for (std::size_t i = 0; i < prefixes.size(); ++i) {
    ids.push_back(kBosId);
    positions.push_back(0);
    for (std::size_t j = 0; j < prefixes[i].size(); ++j) {
      ids.push_back(prefixes[i][j]);
      positions.push_back(static_cast<int>(j + 1));
    }
    lengths.push_back(prefixes[i].size() + 1);
    last_rows.push_back(static_cast<int>(ids.size() - 1));
    if (!config_.decoder_only) {
      const auto s = source_index[i];
      if (s >= enc.layout.count()) throw IndexError("next_log_probs: source index out of range");
      mem.offset.push_back(enc.layout.offset[s]);
      mem.length.push_back(enc.layout.length[s]);
    }
  }
  const auto layout = SeqLayout::contiguous(lengths);
  Tensor phi = config_.decoder_only ? run_decoder(ids, positions, layout, nullptr, nullptr, ForwardContext{})
                                    : run_decoder(ids, positions, layout, &enc.memory, &mem, ForwardContext{});
  return embedding(phi, last_rows);
}

std::vector<std::vector<double>> Model::next_log_probs(const EncodedSources& enc,
                                                       std::span<const std::vector<int>> prefixes,
                                                       std::span<const std::size_t> source_index,
                                                       bool include_bias) const {
  NoGradScope no_grad;
  if (prefixes.empty()) return {};
  Tensor logits = output_.logits(last_states(enc, prefixes, source_index), include_bias);
  const auto v = config_.vocab_size;
  std::vector<std::vector<double>> out;
  out.reserve(prefixes.size());
  for (std::size_t r = 0; r < prefixes.size(); ++r) out.push_back(log_softmax_values(logits.data().subspan(r * v, v)));
  return out;
}

std::vector<double> Model::next_token_dist(std::span<const int> source, std::span<const int> target_prefix) const {
  const std::vector<std::vector<int>> src{std::vector<int>(source.begin(), source.end())};
  const std::vector<std::vector<int>> prefix{std::vector<int>(target_prefix.begin(), target_prefix.end())};
  for (int id : target_prefix)
    if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size)
      throw IndexError("target prefix id " + std::to_string(id) + " out of range");
  const std::size_t index[] = {0};
  auto enc = encode(src);
  auto logp = next_log_probs(enc, prefix, index)[0];
  std::vector<double> p(logp.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(logp[i]);
  return p;
}

ExpertsDecomposition Model::decompose_experts(std::span<const int> source, std::span<const int> target_prefix) const {
  const std::vector<std::vector<int>> src{std::vector<int>(source.begin(), source.end())};
  const std::vector<std::vector<int>> prefix{std::vector<int>(target_prefix.begin(), target_prefix.end())};
  const std::size_t index[] = {0};
  auto enc = encode(src);
  NoGradScope no_grad;
  Tensor phi = last_states(enc, prefix, index);
  Tensor contextual_logits = output_.logits(phi, false);
  ExpertsDecomposition e;
  e.contextual = softmax_values(contextual_logits.data());
  const auto v = config_.vocab_size;
  if (output_.has_bias()) {
    e.prior = softmax_values(output_.bias.data());
    e.combined = softmax_values(output_.logits(phi, true).data());
  } else {
    e.prior.assign(v, 1.0 / static_cast<double>(v));
    e.combined = e.contextual;
  }
  return e;
}

// --------------------------------------------------------------- Persistence

std::vector<std::vector<double>> Model::snapshot() const {
  std::vector<std::vector<double>> out;
  for (const auto& p : parameters()) out.emplace_back(p.data().begin(), p.data().end());
  return out;
}

void Model::restore(const std::vector<std::vector<double>>& values) {
  auto params = parameters();
  if (values.size() != params.size()) throw DataError("parameter snapshot has the wrong number of arrays");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (values[i].size() != params[i].size()) throw DataError("parameter snapshot shape mismatch at " + params[i].name());
    std::copy(values[i].begin(), values[i].end(), params[i].mutable_data().begin());
  }
}

void Model::copy_parameters_from(const Model& other) { restore(other.snapshot()); }

void Model::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  binary::write(out, kCheckpointVersion);
  const ModelConfig& c = config_;
  for (std::uint64_t v : {std::uint64_t{c.layers}, std::uint64_t{c.heads}, std::uint64_t{c.d_model},
                          std::uint64_t{c.d_ffn}, std::uint64_t{c.vocab_size}, std::uint64_t{c.max_len}})
    binary::write(out, v);
  binary::write(out, c.dropout);
  binary::write<std::uint8_t>(out, c.decoder_only ? 1 : 0);
  binary::write_string(out, std::string(bias_mode_name(output_.mode)));
  binary::write(out, output_.weight_scale);
  binary::write(out, seed_);
  binary::write<std::uint64_t>(out, metadata_.size());
  for (const auto& [k, v] : metadata_) {
    binary::write_string(out, k);
    binary::write_string(out, v);
  }
  const auto params = parameters();
  binary::write<std::uint64_t>(out, params.size());
  for (const auto& p : params) {
    binary::write_string(out, p.name());
    binary::write<std::uint64_t>(out, p.rank());
    for (auto d : p.shape()) binary::write<std::uint64_t>(out, d);
    binary::write_doubles(out, std::vector<double>(p.data().begin(), p.data().end()));
  }
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

Model Model::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + path.string());
  char magic[sizeof(kCheckpointMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw DataError(path.string() + " is not a model checkpoint");
  if (binary::read<std::uint32_t>(in) != kCheckpointVersion)
    throw DataError(path.string() + ": unsupported checkpoint version");
  ModelConfig c;
  c.layers = binary::read<std::uint64_t>(in);
  c.heads = binary::read<std::uint64_t>(in);
  c.d_model = binary::read<std::uint64_t>(in);
  c.d_ffn = binary::read<std::uint64_t>(in);
  c.vocab_size = binary::read<std::uint64_t>(in);
  c.max_len = binary::read<std::uint64_t>(in);
  c.dropout = binary::read<double>(in);
  c.decoder_only = binary::read<std::uint8_t>(in) != 0;
  const BiasMode mode = parse_bias_mode(binary::read_string(in));
  const double weight_scale = binary::read<double>(in);
  const auto seed = binary::read<std::uint64_t>(in);

  BiasInit shell;
  shell.mode = mode == BiasMode::None ? BiasMode::None : BiasMode::Zero;
  Model model(c, shell, seed);
  model.output_.mode = mode;
  model.output_.weight_scale = weight_scale;

  const auto n_meta = binary::read<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < n_meta; ++i) {
    auto k = binary::read_string(in);
    model.metadata_[k] = binary::read_string(in);
  }
  auto params = model.parameters();
  if (binary::read<std::uint64_t>(in) != params.size())
    throw DataError(path.string() + ": parameter count does not match the stored configuration");
  for (auto& p : params) {
    const auto name = binary::read_string(in);
    if (name != p.name()) throw DataError(path.string() + ": expected parameter " + p.name() + ", found " + name);
    const auto rank = binary::read<std::uint64_t>(in);
    Shape shape;
    for (std::uint64_t i = 0; i < rank; ++i) shape.push_back(binary::read<std::uint64_t>(in));
    if (shape != p.shape()) throw DataError(path.string() + ": shape mismatch for " + name);
    auto values = binary::read_doubles(in);
    std::copy(values.begin(), values.end(), p.mutable_data().begin());
  }
  return model;
}

}  // namespace unibias
