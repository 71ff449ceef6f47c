#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ttsv/tensor.hpp"

#include <nlohmann/json_fwd.hpp>

namespace ttsv {

enum class PosEncoding { kRope, kNone };

std::string to_string(PosEncoding p);
PosEncoding pos_encoding_from_string(const std::string& s);

struct ModelConfig {
  int64_t n_layers = 4;
  int64_t n_heads = 4;
  int64_t d_model = 96;
  int64_t d_ff = 256;
  int64_t vocab_size = 36;
  int64_t max_seq = 160;
  PosEncoding pos_encoding = PosEncoding::kRope;
  bool tie_lm_head = true;

  int64_t d_head() const { return d_model / n_heads; }
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct LayerWeights {
  Tensor attn_norm;  // [d]
  Tensor wq, wk, wv, wo;  // [d×d]
  Tensor ff_norm;    // [d]
  Tensor w1;         // [d×d_ff]
  Tensor w2;         // [d_ff×d]
};

/// The frozen parameter set. All tensors default to requires_grad=false; the
/// entropy-minimization baseline flips that on a deep copy only.
struct TransformerWeights {
  Tensor embedding;  // [V×d]
  std::vector<LayerWeights> layers;
  Tensor final_norm;  // [d]
  Tensor lm_head;     // [d×V]; undefined when tied to the embedding

  static TransformerWeights init(const ModelConfig& cfg, uint64_t seed);

  /// Stable (name, tensor) listing used for checkpoints and hashing.
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  void set_requires_grad(bool rg);
  TransformerWeights deep_copy() const;
  /// SHA-256 over names, shapes and raw values; the freeze check.
  std::string content_hash() const;
};

struct ForwardTrace {
  /// attention[layer][head] is the [T×T] post-softmax attention matrix.
  std::vector<std::vector<Tensor>> attention;
  /// hidden[0] is the embedding output, hidden[l] the post-block state.
  std::vector<Tensor> hidden;
  /// Post final-norm, pre-head states.
  Tensor final_hidden;
};

/// Decoder-only causal transformer with pre-norm blocks, RMS normalization and
/// a SiLU feed-forward.
class Model {
 public:
  Model(ModelConfig cfg, TransformerWeights weights);

  const ModelConfig& config() const { return cfg_; }
  const TransformerWeights& weights() const { return weights_; }
  TransformerWeights& weights() { return weights_; }

  /// Embedding rows for a token sequence; [T×d], T may be zero.
  Tensor embed_tokens(std::span<const int32_t> ids) const;

  /// Full forward over an embedding sequence. pad_mask marks positions that
  /// must be neither attended to nor meaningfully attending; it may be empty
  /// (no padding). head_delta, when given, is added to every final hidden row
  /// before the LM head.
  Tensor forward(const Tensor& embeddings, const std::vector<uint8_t>& pad_mask = {},
                 ForwardTrace* trace = nullptr, const Tensor* head_delta = nullptr) const;

  /// Forward over [prefix; E(ids)]; returns logits restricted to the content
  /// positions. An undefined or zero-row prefix reduces to plain forward.
  Tensor forward_with_prefix(const Tensor& prefix, std::span<const int32_t> ids,
                             ForwardTrace* trace = nullptr) const;

 private:
  ModelConfig cfg_;
  TransformerWeights weights_;
};

/// RMS-normalization epsilon shared by the model and its test oracles.
inline constexpr double kRmsNormEps = 1e-5;

}  // namespace ttsv
