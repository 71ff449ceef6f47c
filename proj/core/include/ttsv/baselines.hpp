#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "ttsv/steering.hpp"

namespace ttsv {

/// Full-parameter entropy-minimization baseline: the identical rollout / loss /
/// optimizer path as steering adaptation, but gradients flow into a deep copy
/// of every weight tensor. The original model is untouched.
struct EmFullResult {
  std::unique_ptr<Model> adapted;
  TrainLog log;
};

EmFullResult adapt_em_full(const Model& frozen, const std::vector<std::vector<int32_t>>& prompts,
                           const AdaptationConfig& cfg, const GenerationParams& train_gen,
                           const AdaptHooks& hooks = {});

/// Sample-specific final-hidden-layer delta baseline: a d-vector added to every
/// pre-head hidden state, optimized by next-token prediction on the prompt
/// itself.
struct SlotConfig {
  int64_t steps = 3;
  double lr = 0.01;
  double adam_eps = 1e-5;
};

struct SlotResult {
  Tensor delta;  // [d]
  std::vector<double> losses;  // prompt cross-entropy per optimization step
};

SlotResult adapt_slot_delta(const Model& model, std::span<const int32_t> prompt_ids,
                            const SlotConfig& cfg = {});

}  // namespace ttsv
