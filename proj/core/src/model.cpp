#include "ttsv/model.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "ttsv/sha256.hpp"

namespace ttsv {

std::string to_string(PosEncoding p) { return p == PosEncoding::kRope ? "rope" : "none"; }

PosEncoding pos_encoding_from_string(const std::string& s) {
  if (s == "rope") {
    return PosEncoding::kRope;
  }
  if (s == "none") {
    return PosEncoding::kNone;
  }
  throw std::invalid_argument("pos_encoding must be 'rope' or 'none', got '" + s + "'");
}

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1 || max_seq < 1) {
    throw std::invalid_argument("ModelConfig: all dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("ModelConfig: d_model must be divisible by n_heads");
  }
  if (vocab_size < 4) {
    throw std::invalid_argument("ModelConfig: vocab_size must be >= 4 (specials)");
  }
  if (pos_encoding == PosEncoding::kRope && d_head() % 2 != 0) {
    throw std::invalid_argument("ModelConfig: rope requires an even head dimension");
  }
}

nlohmann::json ModelConfig::to_json() const {
  return nlohmann::json{{"n_layers", n_layers},   {"n_heads", n_heads},
                        {"d_model", d_model},     {"d_ff", d_ff},
                        {"vocab_size", vocab_size}, {"max_seq", max_seq},
                        {"pos_encoding", to_string(pos_encoding)},
                        {"tie_lm_head", tie_lm_head}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.n_layers = j.at("n_layers").get<int64_t>();
  cfg.n_heads = j.at("n_heads").get<int64_t>();
  cfg.d_model = j.at("d_model").get<int64_t>();
  cfg.d_ff = j.at("d_ff").get<int64_t>();
  cfg.vocab_size = j.at("vocab_size").get<int64_t>();
  cfg.max_seq = j.at("max_seq").get<int64_t>();
  cfg.pos_encoding = pos_encoding_from_string(j.at("pos_encoding").get<std::string>());
  cfg.tie_lm_head = j.at("tie_lm_head").get<bool>();
  cfg.validate();
  return cfg;
}

namespace {

Tensor init_matrix(Shape shape, double sigma, uint64_t seed, const std::string& name) {
  Rng rng = Rng::stream(seed, "init." + name);
  Tensor t = Tensor::randn(std::move(shape), rng);
  for (double& x : t.mutable_data()) {
    x *= sigma;
  }
  return t;
}

}  // namespace

TransformerWeights TransformerWeights::init(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  TransformerWeights w;
  const double proj_sigma = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  const double ff_sigma = 1.0 / std::sqrt(static_cast<double>(cfg.d_ff));
  w.embedding = init_matrix({cfg.vocab_size, cfg.d_model}, 0.05, seed, "embedding");
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    LayerWeights lw;
    lw.attn_norm = Tensor::full({cfg.d_model}, 1.0);
    lw.wq = init_matrix({cfg.d_model, cfg.d_model}, proj_sigma, seed, p + "wq");
    lw.wk = init_matrix({cfg.d_model, cfg.d_model}, proj_sigma, seed, p + "wk");
    lw.wv = init_matrix({cfg.d_model, cfg.d_model}, proj_sigma, seed, p + "wv");
    lw.wo = init_matrix({cfg.d_model, cfg.d_model}, proj_sigma, seed, p + "wo");
    lw.ff_norm = Tensor::full({cfg.d_model}, 1.0);
    lw.w1 = init_matrix({cfg.d_model, cfg.d_ff}, proj_sigma, seed, p + "w1");
    lw.w2 = init_matrix({cfg.d_ff, cfg.d_model}, ff_sigma, seed, p + "w2");
    w.layers.push_back(std::move(lw));
  }
  w.final_norm = Tensor::full({cfg.d_model}, 1.0);
  if (!cfg.tie_lm_head) {
    w.lm_head = init_matrix({cfg.d_model, cfg.vocab_size}, proj_sigma, seed, "lm_head");
  }
  return w;
}

std::vector<std::pair<std::string, Tensor>> TransformerWeights::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("embedding", embedding);
  for (size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    out.emplace_back(p + "attn_norm", layers[l].attn_norm);
    out.emplace_back(p + "wq", layers[l].wq);
    out.emplace_back(p + "wk", layers[l].wk);
    out.emplace_back(p + "wv", layers[l].wv);
    out.emplace_back(p + "wo", layers[l].wo);
    out.emplace_back(p + "ff_norm", layers[l].ff_norm);
    out.emplace_back(p + "w1", layers[l].w1);
    out.emplace_back(p + "w2", layers[l].w2);
  }
  out.emplace_back("final_norm", final_norm);
  if (lm_head.defined()) {
    out.emplace_back("lm_head", lm_head);
  }
  return out;
}

void TransformerWeights::set_requires_grad(bool rg) {
  auto tensors = named_tensors();
  for (auto& [name, t] : tensors) {
    t.set_requires_grad(rg);
  }
}

TransformerWeights TransformerWeights::deep_copy() const {
  TransformerWeights w;
  w.embedding = embedding.clone();
  for (const auto& l : layers) {
    LayerWeights lw;
    lw.attn_norm = l.attn_norm.clone();
    lw.wq = l.wq.clone();
    lw.wk = l.wk.clone();
    lw.wv = l.wv.clone();
    lw.wo = l.wo.clone();
    lw.ff_norm = l.ff_norm.clone();
    lw.w1 = l.w1.clone();
    lw.w2 = l.w2.clone();
    w.layers.push_back(std::move(lw));
  }
  w.final_norm = final_norm.clone();
  if (lm_head.defined()) {
    w.lm_head = lm_head.clone();
  }
  return w;
}

std::string TransformerWeights::content_hash() const {
  Sha256 h;
  for (const auto& [name, t] : named_tensors()) {
    h.update(name.data(), name.size());
    for (int64_t dim : t.shape()) {
      h.update(&dim, sizeof(dim));
    }
    h.update(t.data().data(), t.data().size() * sizeof(double));
  }
  return h.hex_digest();
}

// ---- forward ------------------------------------------------------------------

Model::Model(ModelConfig cfg, TransformerWeights weights)
    : cfg_(std::move(cfg)), weights_(std::move(weights)) {
  cfg_.validate();
  if (weights_.embedding.rows() != cfg_.vocab_size ||
      weights_.embedding.cols() != cfg_.d_model ||
      static_cast<int64_t>(weights_.layers.size()) != cfg_.n_layers) {
    throw std::invalid_argument("Model: weights do not match config");
  }
  if (cfg_.tie_lm_head == weights_.lm_head.defined()) {
    throw std::invalid_argument("Model: lm_head presence inconsistent with tie_lm_head");
  }
}

Tensor Model::embed_tokens(std::span<const int32_t> ids) const {
  for (int32_t id : ids) {
    if (id < 0 || id >= cfg_.vocab_size) {
      throw std::invalid_argument("embed_tokens: token id out of range");
    }
  }
  return gather_rows(weights_.embedding, std::vector<int32_t>(ids.begin(), ids.end()));
}

Tensor Model::forward(const Tensor& embeddings, const std::vector<uint8_t>& pad_mask,
                      ForwardTrace* trace, const Tensor* head_delta) const {
  const int64_t t_len = embeddings.rows();
  const int64_t d = cfg_.d_model;
  if (embeddings.cols() != d) {
    throw std::invalid_argument("forward: embedding width does not match d_model");
  }
  if (t_len > cfg_.max_seq) {
    throw std::invalid_argument("forward: sequence length exceeds max_seq");
  }
  if (!pad_mask.empty() && static_cast<int64_t>(pad_mask.size()) != t_len) {
    throw std::invalid_argument("forward: pad mask length mismatch");
  }

  // Causal + pad mask over scores: key j is hidden from query i when j > i or
  // j is padding (a padded query still sees itself so its softmax row is
  // well-defined; its output is never consumed).
  std::vector<uint8_t> score_mask(static_cast<size_t>(t_len * t_len), 0);
  for (int64_t i = 0; i < t_len; ++i) {
    for (int64_t j = 0; j < t_len; ++j) {
      const bool pad_j = !pad_mask.empty() && pad_mask[static_cast<size_t>(j)] != 0;
      score_mask[i * t_len + j] = (j > i || (pad_j && j != i)) ? 1 : 0;
    }
  }
  const double neg_inf = -std::numeric_limits<double>::infinity();

  if (trace) {
    trace->attention.assign(static_cast<size_t>(cfg_.n_layers), {});
    trace->hidden.clear();
    trace->hidden.push_back(embeddings.clone());
  }

  const int64_t dh = cfg_.d_head();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor h = embeddings;
  for (int64_t l = 0; l < cfg_.n_layers; ++l) {
    const LayerWeights& lw = weights_.layers[static_cast<size_t>(l)];
    Tensor a = rmsnorm_rows(h, lw.attn_norm, kRmsNormEps);
    Tensor q = matmul(a, lw.wq);
    Tensor k = matmul(a, lw.wk);
    Tensor v = matmul(a, lw.wv);
    if (cfg_.pos_encoding == PosEncoding::kRope) {
      q = rope_rows(q, dh);
      k = rope_rows(k, dh);
    }
    std::vector<Tensor> head_ctx;
    head_ctx.reserve(static_cast<size_t>(cfg_.n_heads));
    for (int64_t head = 0; head < cfg_.n_heads; ++head) {
      Tensor qh = slice_cols(q, head * dh, dh);
      Tensor kh = slice_cols(k, head * dh, dh);
      Tensor vh = slice_cols(v, head * dh, dh);
      Tensor scores = scale(matmul(qh, kh, false, true), inv_sqrt_dh);
      Tensor attn = softmax_rows(masked_fill(scores, score_mask, neg_inf));
      if (trace) {
        trace->attention[static_cast<size_t>(l)].push_back(attn.clone());
      }
      head_ctx.push_back(matmul(attn, vh));
    }
    Tensor ctx = cfg_.n_heads == 1 ? head_ctx[0] : concat_cols(head_ctx);
    h = add(h, matmul(ctx, lw.wo));
    Tensor f = rmsnorm_rows(h, lw.ff_norm, kRmsNormEps);
    h = add(h, matmul(silu(matmul(f, lw.w1)), lw.w2));
    if (trace) {
      trace->hidden.push_back(h.clone());
    }
  }
  Tensor final_hidden = rmsnorm_rows(h, weights_.final_norm, kRmsNormEps);
  if (head_delta != nullptr) {
    final_hidden = add_bias_rows(final_hidden, *head_delta);
  }
  if (trace) {
    trace->final_hidden = final_hidden.clone();
  }
  return cfg_.tie_lm_head ? matmul(final_hidden, weights_.embedding, false, true)
                          : matmul(final_hidden, weights_.lm_head);
}

Tensor Model::forward_with_prefix(const Tensor& prefix, std::span<const int32_t> ids,
                                  ForwardTrace* trace) const {
  const int64_t prefix_len = prefix.defined() ? prefix.rows() : 0;
  if (prefix_len > 0 && prefix.cols() != cfg_.d_model) {
    throw std::invalid_argument("forward_with_prefix: prefix width does not match d_model");
  }
  if (prefix_len + static_cast<int64_t>(ids.size()) > cfg_.max_seq) {
    throw std::invalid_argument("forward_with_prefix: sequence length exceeds max_seq");
  }
  Tensor emb = embed_tokens(ids);
  if (prefix_len == 0) {
    return forward(emb, {}, trace);
  }
  Tensor logits = forward(concat_rows(prefix, emb), {}, trace);
  return slice_rows(logits, prefix_len, static_cast<int64_t>(ids.size()));
}

}  // namespace ttsv
