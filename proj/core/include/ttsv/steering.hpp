#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ttsv/generation.hpp"
#include "ttsv/model.hpp"
#include "ttsv/tensor.hpp"

namespace ttsv {

enum class SteeringInit { kStandardNormal, kDataDriven };

std::string to_string(SteeringInit m);
SteeringInit steering_init_from_string(const std::string& s);

/// The trainable L x d prefix prepended to every input embedding sequence.
struct SteeringVector {
  Tensor values;  // [L×d]; requires_grad only while adapting
  SteeringInit init_mode = SteeringInit::kStandardNormal;
  std::string source_task;
  uint64_t seed = 0;
  int64_t epochs_trained = 0;

  int64_t length() const { return values.defined() ? values.rows() : 0; }
};

enum class AdaptMode { kShared, kPerSample };

struct AdaptationConfig {
  int64_t epochs = 20;
  int64_t batch_size = 16;
  double lr_start = 1e-3;
  double lr_end = 1e-5;
  double weight_decay = 1e-8;
  double adam_eps = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int64_t length = 20;
  SteeringInit init_mode = SteeringInit::kStandardNormal;
  /// Constant rate used instead of the schedule under data-driven init.
  double small_lr = 5e-6;
  uint64_t seed = 0;
  AdaptMode mode = AdaptMode::kShared;

  void validate() const;
};

struct StepRecord {
  int64_t step = 0;
  int64_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct EpochRecord {
  int64_t epoch = 0;
  double accuracy = 0.0;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epoch_eval;
  int64_t skipped_batches = 0;

  double initial_loss() const;
  double final_loss() const;
};

/// Linear interpolation from lr_start to lr_end across total_steps.
double lr_at(int64_t step, int64_t total_steps, const AdaptationConfig& cfg);

/// Token-weighted batch mean of per-sample entropy sequences: the flat mean of
/// every recorded step entropy. Throws when every sequence is empty.
Tensor entropy_loss(const std::vector<Tensor>& per_sample_entropies);

/// AdamW with decoupled weight decay and bias-corrected moments.
class AdamW {
 public:
  struct Config {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-5;
    double weight_decay = 1e-8;
  };

  AdamW(std::vector<Tensor> params, Config cfg);

  /// Applies one update from the gradients currently on the parameters.
  /// Parameters without gradients are skipped. Throws on non-finite gradients.
  void step(double lr);
  void zero_grad();
  int64_t steps_taken() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  Config cfg_;
  int64_t t_ = 0;
};

/// Fresh steering vector. Data-driven mode samples N(mu_d, sigma_d^2) from
/// per-dimension moments of the corpus token embeddings.
SteeringVector init_steering(SteeringInit mode, const AdaptationConfig& cfg, const Model& model,
                             const std::vector<std::vector<int32_t>>* corpus_ids = nullptr);

struct AdaptHooks {
  std::function<void(const StepRecord&)> on_step;
  /// Called after each epoch; the returned accuracy lands in TrainLog.
  std::function<double(const Tensor& prefix, int64_t epoch)> epoch_eval;
  /// Called right after backward while gradients are still present.
  std::function<void()> after_backward;
};

struct AdaptResult {
  SteeringVector steering;
  TrainLog log;
};

/// Shared entropy-minimization loop: sampled rollouts under the current
/// trainable state, one teacher-forced differentiable pass, token-weighted
/// entropy loss, AdamW on `trainable` only. `prefix` may be undefined (the
/// full-parameter baseline trains with no prefix). The frozen-weight hash of
/// `model` is verified unchanged unless the model's own tensors are trainable.
TrainLog run_entropy_adaptation(const Model& model, const Tensor& prefix,
                                const std::vector<Tensor>& trainable,
                                const std::vector<std::vector<int32_t>>& prompts,
                                const AdaptationConfig& cfg, const GenerationParams& train_gen,
                                const AdaptHooks& hooks = {});

/// Optimize-once, apply-to-all adaptation of a steering vector on unlabeled
/// prompts against the frozen model.
AdaptResult adapt(const Model& model, const std::vector<std::vector<int32_t>>& prompts,
                  const AdaptationConfig& cfg, const GenerationParams& train_gen,
                  const AdaptHooks& hooks = {});

/// Sample-specific variant: one independent vector per prompt, equivalent to
/// adapt() on the singleton dataset.
AdaptResult adapt_per_sample(const Model& model, const std::vector<int32_t>& prompt,
                             const AdaptationConfig& cfg, const GenerationParams& train_gen,
                             const AdaptHooks& hooks = {});

}  // namespace ttsv
