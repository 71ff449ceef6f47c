#include "ttsv/generation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "ttsv/rng.hpp"

namespace ttsv {

void GenerationParams::validate() const {
  if (do_sample) {
    if (temperature <= 0.0) {
      throw std::invalid_argument("GenerationParams: temperature must be positive");
    }
    if (top_p <= 0.0 || top_p > 1.0) {
      throw std::invalid_argument("GenerationParams: top_p must be in (0, 1]");
    }
    if (repetition_penalty < 1.0) {
      throw std::invalid_argument("GenerationParams: repetition_penalty must be >= 1");
    }
  }
  if (max_new_tokens < 1) {
    throw std::invalid_argument("GenerationParams: max_new_tokens must be >= 1");
  }
}

int64_t Rollout::nonpad_count() const {
  for (size_t i = 0; i < generated_ids.size(); ++i) {
    if (generated_ids[i] == eos_id) {
      return static_cast<int64_t>(i) + 1;
    }
  }
  return static_cast<int64_t>(generated_ids.size());
}

Tensor transform_logits(const Tensor& logits, std::span<const int32_t> history,
                        const GenerationParams& params) {
  if (!params.do_sample) {
    throw std::invalid_argument("transform_logits: only defined for sampling mode");
  }
  if (params.temperature <= 0.0) {
    throw std::invalid_argument("transform_logits: temperature must be positive");
  }
  const int64_t vocab = logits.numel();
  std::vector<double> z(logits.data().begin(), logits.data().end());

  // Repetition penalty over previously generated tokens: positive logits are
  // divided, negative ones multiplied.
  if (params.repetition_penalty != 1.0) {
    std::vector<uint8_t> seen(static_cast<size_t>(vocab), 0);
    for (int32_t id : history) {
      if (id >= 0 && id < vocab) {
        seen[static_cast<size_t>(id)] = 1;
      }
    }
    for (int64_t v = 0; v < vocab; ++v) {
      if (seen[static_cast<size_t>(v)]) {
        z[static_cast<size_t>(v)] = z[static_cast<size_t>(v)] > 0.0
                                        ? z[static_cast<size_t>(v)] / params.repetition_penalty
                                        : z[static_cast<size_t>(v)] * params.repetition_penalty;
      }
    }
  }
  for (double& x : z) {
    x /= params.temperature;
  }

  // Softmax.
  double mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double& x : z) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (double& x : z) {
    x /= sum;
  }

  // Nucleus: smallest probability-sorted set with cumulative mass >= top_p.
  // Sort order pinned to (probability desc, id asc) for determinism.
  std::vector<int64_t> order(static_cast<size_t>(vocab));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    if (z[static_cast<size_t>(a)] != z[static_cast<size_t>(b)]) {
      return z[static_cast<size_t>(a)] > z[static_cast<size_t>(b)];
    }
    return a < b;
  });
  std::vector<double> probs(static_cast<size_t>(vocab), 0.0);
  double cum = 0.0;
  double kept = 0.0;
  for (int64_t rank = 0; rank < vocab; ++rank) {
    const int64_t v = order[static_cast<size_t>(rank)];
    probs[static_cast<size_t>(v)] = z[static_cast<size_t>(v)];
    cum += z[static_cast<size_t>(v)];
    kept = cum;
    if (cum >= params.top_p) {
      break;
    }
  }
  if (kept <= 0.0) {
    throw std::runtime_error("transform_logits: nucleus collapsed to zero mass");
  }
  for (double& p : probs) {
    p /= kept;
  }
  return Tensor::from_data({vocab}, std::move(probs));
}

int32_t argmax_lowest(std::span<const double> xs) {
  if (xs.empty()) {
    throw std::invalid_argument("argmax_lowest: empty input");
  }
  size_t best = 0;
  for (size_t i = 1; i < xs.size(); ++i) {
    if (xs[i] > xs[best]) {
      best = i;
    }
  }
  return static_cast<int32_t>(best);
}

namespace {

Rollout decode_one(const Model& model, const Tensor& prefix,
                   const std::vector<int32_t>& prompt, const GenerationParams& params,
                   uint64_t sample_index, const Tensor* head_delta) {
  NoGradGuard no_grad;
  Rollout r;
  r.prompt_ids = prompt;
  r.eos_id = params.eos_id;
  Rng rng = Rng::stream(params.seed, "rollout", sample_index);
  const int64_t prefix_len = prefix.defined() ? prefix.rows() : 0;

  std::vector<int32_t> ids = prompt;
  for (int64_t step = 0; step < params.max_new_tokens; ++step) {
    if (prefix_len + static_cast<int64_t>(ids.size()) + 1 > model.config().max_seq) {
      r.truncated = true;
      break;
    }
    Tensor emb = model.embed_tokens(ids);
    Tensor seq = prefix_len > 0 ? concat_rows(prefix, emb) : emb;
    Tensor logits = model.forward(seq, {}, nullptr, head_delta);
    Tensor last = slice_rows(logits, logits.rows() - 1, 1);
    // Entropy always comes from the raw distribution, pre-transform.
    r.entropies.push_back(entropy_rows(last).value());

    int32_t token;
    if (params.do_sample) {
      Tensor probs = transform_logits(last, r.generated_ids, params);
      token = static_cast<int32_t>(rng.categorical(probs.data()));
    } else {
      token = argmax_lowest(last.data());
    }
    r.generated_ids.push_back(token);
    ids.push_back(token);
    if (token == params.eos_id) {
      return r;
    }
  }
  r.truncated = true;
  return r;
}

}  // namespace

std::vector<Rollout> sample_rollouts(const Model& model, const Tensor& prefix,
                                     const std::vector<std::vector<int32_t>>& prompts,
                                     const GenerationParams& params,
                                     const std::vector<uint64_t>& sample_indices,
                                     const Tensor* head_delta) {
  if (prompts.empty()) {
    throw std::invalid_argument("sample_rollouts: empty prompt batch");
  }
  if (!sample_indices.empty() && sample_indices.size() != prompts.size()) {
    throw std::invalid_argument("sample_rollouts: sample_indices size mismatch");
  }
  params.validate();
  std::vector<Rollout> out;
  out.reserve(prompts.size());
  for (size_t i = 0; i < prompts.size(); ++i) {
    const uint64_t idx = sample_indices.empty() ? static_cast<uint64_t>(i) : sample_indices[i];
    out.push_back(decode_one(model, prefix, prompts[i], params, idx, head_delta));
  }
  return out;
}

std::vector<Rollout> greedy_decode(const Model& model, const Tensor& prefix,
                                   const std::vector<std::vector<int32_t>>& prompts,
                                   const GenerationParams& params, const Tensor* head_delta) {
  GenerationParams greedy = params;
  greedy.do_sample = false;
  greedy.validate();
  std::vector<Rollout> out;
  out.reserve(prompts.size());
  for (const auto& prompt : prompts) {
    out.push_back(decode_one(model, prefix, prompt, greedy, 0, head_delta));
  }
  return out;
}

Tensor teacher_forced_entropies(const Model& model, const Tensor& prefix,
                                std::span<const int32_t> prompt_ids,
                                std::span<const int32_t> generated_ids) {
  if (prompt_ids.empty()) {
    throw std::invalid_argument("teacher_forced_entropies: empty prompt");
  }
  const int64_t p_len = static_cast<int64_t>(prompt_ids.size());
  const int64_t g_len = static_cast<int64_t>(generated_ids.size());
  std::vector<int32_t> ids(prompt_ids.begin(), prompt_ids.end());
  ids.insert(ids.end(), generated_ids.begin(), generated_ids.end());
  Tensor logits = model.forward_with_prefix(prefix, ids);
  // Row p_len-1+t predicts generated token t.
  Tensor step_logits = slice_rows(logits, p_len - 1, g_len);
  return entropy_rows(step_logits);
}

}  // namespace ttsv
