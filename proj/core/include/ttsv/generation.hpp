#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ttsv/model.hpp"
#include "ttsv/tensor.hpp"

namespace ttsv {

struct GenerationParams {
  bool do_sample = true;
  double top_p = 0.95;
  double temperature = 0.5;
  double repetition_penalty = 1.15;
  int64_t max_new_tokens = 64;
  int32_t eos_id = 2;
  uint64_t seed = 0;

  void validate() const;
};

/// One decoded continuation. Generation stops at the first EOS (inclusive) or
/// at max_new_tokens, so every recorded step is a non-padding position.
struct Rollout {
  std::vector<int32_t> prompt_ids;
  std::vector<int32_t> generated_ids;
  /// Entropy of the raw model distribution at each generated step, in nats.
  std::vector<double> entropies;
  bool truncated = false;
  int32_t eos_id = 2;

  /// Number of steps up to and including the first EOS; robust to
  /// hand-constructed rollouts whose ids continue past an EOS.
  int64_t nonpad_count() const;
};

/// Sampling distribution for one step: repetition penalty over the generated
/// history, then temperature, then nucleus truncation with renormalization.
/// Requires do_sample=true and temperature > 0.
Tensor transform_logits(const Tensor& logits, std::span<const int32_t> history,
                        const GenerationParams& params);

/// Argmax with ties broken toward the lowest index.
int32_t argmax_lowest(std::span<const double> xs);

/// Gradient-free sampled rollouts. Each sample draws from its own PRNG stream
/// derived from (params.seed, sample_index), so batch composition and ordering
/// never change a sample's rollout. sample_indices defaults to 0..n-1.
std::vector<Rollout> sample_rollouts(const Model& model, const Tensor& prefix,
                                     const std::vector<std::vector<int32_t>>& prompts,
                                     const GenerationParams& params,
                                     const std::vector<uint64_t>& sample_indices = {},
                                     const Tensor* head_delta = nullptr);

/// Deterministic argmax decoding; entropies are still recorded.
std::vector<Rollout> greedy_decode(const Model& model, const Tensor& prefix,
                                   const std::vector<std::vector<int32_t>>& prompts,
                                   const GenerationParams& params,
                                   const Tensor* head_delta = nullptr);

/// One differentiable forward over [prefix; E(prompt); E(generated)] treating
/// the generated ids as constants; returns the entropy at each generated
/// position. Matches the no-grad entropies recorded during rollout.
Tensor teacher_forced_entropies(const Model& model, const Tensor& prefix,
                                std::span<const int32_t> prompt_ids,
                                std::span<const int32_t> generated_ids);

}  // namespace ttsv
