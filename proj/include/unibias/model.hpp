#pragma once

// Pre-norm transformer encoder-decoder whose final projection is split into a
// contextual term W.phi and a context-free bias b:
//
//   p(y | context) = softmax(W phi + b)_y  ∝  softmax(W phi)_y * softmax(b)_y
//
// The bias can be omitted, zeroed, or initialised to a log-unigram
// distribution, in which case W is rescaled to the same Frobenius norm as b.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "unibias/corpus.hpp"
#include "unibias/ops.hpp"
#include "unibias/random.hpp"
#include "unibias/tensor.hpp"

namespace unibias {

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t d_model = 64;
  std::size_t d_ffn = 256;
  double dropout = 0.1;
  std::size_t vocab_size = 0;
  std::size_t max_len = 128;
  bool decoder_only = false;  // target-side language model, source ignored

  void validate() const;  // throws ConfigError
  bool operator==(const ModelConfig&) const = default;
};

enum class BiasMode { Zero, None, LogUnigram, ExternalLogUnigram };

BiasMode parse_bias_mode(std::string_view name);
std::string_view bias_mode_name(BiasMode mode);
inline bool is_log_unigram(BiasMode m) { return m == BiasMode::LogUnigram || m == BiasMode::ExternalLogUnigram; }

struct BiasInit {
  BiasMode mode = BiasMode::Zero;
  std::optional<UnigramDistribution> unigram;  // required by the log-unigram modes
  // Diagnostic: force W = 0 so the output is softmax(b) for every context.
  bool zero_projection = false;
  // Sensitivity knob: give ZERO/NONE models the same W rescaling a
  // log-unigram model would receive (requires `unigram`).
  bool scale_baseline = false;
};

struct OutputLayer {
  Tensor weight;  // [|V| x d]
  Tensor bias;    // [|V|]; undefined when mode == None
  BiasMode mode = BiasMode::Zero;
  double weight_scale = 1.0;  // factor applied to the raw N(0, 1/d) draw

  bool has_bias() const { return bias.defined(); }
  // phi[n x d] -> logits[n x |V|]; include_bias = false drops b.
  Tensor logits(const Tensor& phi, bool include_bias = true) const;
};

// W ~ N(0, 1/d) elementwise. Log-unigram modes set b = log(probs) and rescale
// W by ||b|| / ||W_raw||. Throws ConfigError when a log-unigram mode lacks a
// strictly positive distribution.
OutputLayer init_output_layer(const ModelConfig& config, const BiasInit& bias_init, std::uint64_t seed);

// Teacher-forced batch of packed sequences. Decoder inputs are BOS + target
// without its final token; labels are the full target.
struct Batch {
  std::vector<int> src_ids;
  std::vector<int> src_positions;
  SeqLayout src;
  std::vector<int> dec_ids;
  std::vector<int> dec_positions;
  std::vector<int> labels;
  SeqLayout tgt;

  static Batch from_pairs(std::span<const SentencePair* const> pairs);
  static Batch from_pairs(std::span<const SentencePair> pairs);
  std::size_t target_tokens() const { return labels.size(); }
};

struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;  // dropout masks; required when training with dropout
};

struct EncodedSources {
  Tensor memory;  // [tokens x d]
  SeqLayout layout;
};

struct ExpertsDecomposition {
  std::vector<double> contextual;  // softmax(W phi)
  std::vector<double> prior;       // softmax(b), uniform without a bias
  std::vector<double> combined;    // softmax(W phi + b)
};

// Copies share parameter storage (tensors are handles).
class Model {
 public:
  Model(const ModelConfig& config, const BiasInit& bias_init, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  std::uint64_t seed() const noexcept { return seed_; }
  BiasMode bias_mode() const noexcept { return output_.mode; }
  OutputLayer& output() noexcept { return output_; }
  const OutputLayer& output() const noexcept { return output_; }

  // Every trainable tensor, in a fixed declaration order.
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;

  // Free-form key/value pairs persisted with checkpoints.
  std::map<std::string, std::string>& metadata() noexcept { return metadata_; }
  const std::map<std::string, std::string>& metadata() const noexcept { return metadata_; }

  // phi for every target position of the batch, [target tokens x d].
  Tensor decoder_states(const Batch& batch, const ForwardContext& ctx) const;
  Tensor forward_logits(const Batch& batch, const ForwardContext& ctx, bool include_bias = true) const;

  // Inference (no tape, dropout off).
  EncodedSources encode(std::span<const std::vector<int>> sources) const;
  // Log-probabilities of the next token after BOS + prefixes[i], conditioned
  // on source source_index[i] of `enc`.
  std::vector<std::vector<double>> next_log_probs(const EncodedSources& enc,
                                                  std::span<const std::vector<int>> prefixes,
                                                  std::span<const std::size_t> source_index,
                                                  bool include_bias = true) const;
  // phi at the last position of each prefix, [prefixes x d].
  Tensor last_states(const EncodedSources& enc, std::span<const std::vector<int>> prefixes,
                     std::span<const std::size_t> source_index) const;

  std::vector<double> next_token_dist(std::span<const int> source, std::span<const int> target_prefix) const;
  ExpertsDecomposition decompose_experts(std::span<const int> source, std::span<const int> target_prefix) const;

  // Versioned binary container: config, bias mode, seed, metadata and every
  // parameter array in declaration order. Doubles are stored bit-exactly.
  void save(const std::filesystem::path& path) const;
  static Model load(const std::filesystem::path& path);

  // Copies parameter values (shapes must agree).
  void copy_parameters_from(const Model& other);
  std::vector<std::vector<double>> snapshot() const;
  void restore(const std::vector<std::vector<double>>& values);

 private:
  struct Attention {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct Feedforward {
    Tensor w1, b1, w2, b2;
  };
  struct EncoderLayer {
    Tensor ln1_g, ln1_b;
    Attention self;
    Tensor ln2_g, ln2_b;
    Feedforward ffn;
  };
  struct DecoderLayer {
    Tensor ln1_g, ln1_b;
    Attention self;
    Tensor ln2_g, ln2_b;
    Attention cross;
    Tensor ln3_g, ln3_b;
    Feedforward ffn;
  };

  Tensor embed(const Tensor& table, std::span<const int> ids, std::span<const int> positions,
               const ForwardContext& ctx) const;
  Tensor attend(const Attention& a, const Tensor& queries_in, const Tensor& keys_in, const SeqLayout& q_layout,
                const SeqLayout& k_layout, bool causal, const ForwardContext& ctx) const;
  Tensor feedforward(const Feedforward& f, const Tensor& x, const ForwardContext& ctx) const;
  Tensor drop(const Tensor& x, const ForwardContext& ctx) const;
  Tensor run_encoder(std::span<const int> ids, std::span<const int> positions, const SeqLayout& layout,
                     const ForwardContext& ctx) const;
  Tensor run_decoder(std::span<const int> ids, std::span<const int> positions, const SeqLayout& layout,
                     const Tensor* memory, const SeqLayout* memory_layout, const ForwardContext& ctx) const;

  ModelConfig config_;
  std::uint64_t seed_ = 0;
  Tensor src_embed_, tgt_embed_;
  std::vector<EncoderLayer> encoder_;
  Tensor enc_norm_g_, enc_norm_b_;
  std::vector<DecoderLayer> decoder_;
  Tensor dec_norm_g_, dec_norm_b_;
  OutputLayer output_;
  Tensor positional_;  // [max_len x d], constant
  std::map<std::string, std::string> metadata_;
};

// Frobenius norm of a tensor's data.
double l2_norm(const Tensor& t);

}  // namespace unibias
