#include "ttsv/baselines.hpp"

#include <stdexcept>

namespace ttsv {

EmFullResult adapt_em_full(const Model& frozen, const std::vector<std::vector<int32_t>>& prompts,
                           const AdaptationConfig& cfg, const GenerationParams& train_gen,
                           const AdaptHooks& hooks) {
  EmFullResult result;
  TransformerWeights copy = frozen.weights().deep_copy();
  copy.set_requires_grad(true);
  result.adapted = std::make_unique<Model>(frozen.config(), std::move(copy));

  std::vector<Tensor> trainable;
  auto named = result.adapted->weights().named_tensors();
  for (auto& [name, t] : named) {
    trainable.push_back(t);
  }
  result.log = run_entropy_adaptation(*result.adapted, Tensor{}, trainable, prompts, cfg,
                                      train_gen, hooks);
  result.adapted->weights().set_requires_grad(false);
  return result;
}

SlotResult adapt_slot_delta(const Model& model, std::span<const int32_t> prompt_ids,
                            const SlotConfig& cfg) {
  if (prompt_ids.size() < 2) {
    throw std::invalid_argument("adapt_slot_delta: prompt needs at least 2 tokens");
  }
  SlotResult result;
  result.delta = Tensor::zeros({model.config().d_model});
  result.delta.set_requires_grad(true);

  // Next-token targets over the prompt itself; the last row predicts nothing.
  std::vector<int32_t> targets(prompt_ids.begin() + 1, prompt_ids.end());
  targets.push_back(-1);

  AdamW::Config opt_cfg;
  opt_cfg.weight_decay = 0.0;
  opt_cfg.eps = cfg.adam_eps;
  AdamW optimizer({result.delta}, opt_cfg);

  Tensor emb;
  {
    NoGradGuard no_grad;
    emb = model.embed_tokens(prompt_ids).clone();
  }
  for (int64_t s = 0; s < cfg.steps; ++s) {
    Tape tape;
    Tensor logits = model.forward(emb, {}, nullptr, &result.delta);
    Tensor loss = cross_entropy_mean(logits, targets);
    result.losses.push_back(loss.value());
    tape.backward(loss);
    optimizer.step(cfg.lr);
    optimizer.zero_grad();
  }
  result.delta.set_requires_grad(false);
  return result;
}

}  // namespace ttsv
