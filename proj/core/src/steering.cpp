#include "ttsv/steering.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "ttsv/rng.hpp"

namespace ttsv {

std::string to_string(SteeringInit m) {
  return m == SteeringInit::kStandardNormal ? "standard_normal" : "data_driven";
}

SteeringInit steering_init_from_string(const std::string& s) {
  if (s == "standard_normal") {
    return SteeringInit::kStandardNormal;
  }
  if (s == "data_driven") {
    return SteeringInit::kDataDriven;
  }
  throw std::invalid_argument("init_mode must be 'standard_normal' or 'data_driven', got '" +
                              s + "'");
}

void AdaptationConfig::validate() const {
  if (epochs < 0) {
    throw std::invalid_argument("AdaptationConfig: epochs must be >= 0");
  }
  if (batch_size < 1) {
    throw std::invalid_argument("AdaptationConfig: batch_size must be >= 1");
  }
  if (!(lr_start >= lr_end && lr_end > 0.0)) {
    throw std::invalid_argument("AdaptationConfig: need lr_start >= lr_end > 0");
  }
  if (length < 0) {
    throw std::invalid_argument("AdaptationConfig: length must be >= 0");
  }
  if (small_lr <= 0.0) {
    throw std::invalid_argument("AdaptationConfig: small_lr must be positive");
  }
}

double TrainLog::initial_loss() const {
  if (steps.empty()) {
    throw std::logic_error("TrainLog: no steps recorded");
  }
  return steps.front().loss;
}

double TrainLog::final_loss() const {
  if (steps.empty()) {
    throw std::logic_error("TrainLog: no steps recorded");
  }
  return steps.back().loss;
}

double lr_at(int64_t step, int64_t total_steps, const AdaptationConfig& cfg) {
  if (total_steps < 1) {
    throw std::invalid_argument("lr_at: total_steps must be >= 1");
  }
  if (step < 0 || step >= total_steps) {
    throw std::invalid_argument("lr_at: step out of range");
  }
  if (total_steps == 1) {
    return cfg.lr_start;
  }
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps - 1);
  return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * frac;
}

Tensor entropy_loss(const std::vector<Tensor>& per_sample_entropies) {
  int64_t total = 0;
  std::vector<Tensor> parts;
  for (const auto& h : per_sample_entropies) {
    if (h.defined() && h.numel() > 0) {
      total += h.numel();
      parts.push_back(h);
    }
  }
  if (total == 0) {
    throw std::invalid_argument("entropy_loss: degenerate batch (no generated positions)");
  }
  return mean_all(concat_flat(parts));
}

// ---- AdamW --------------------------------------------------------------------

AdamW::AdamW(std::vector<Tensor> params, Config cfg) : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<size_t>(p.numel()), 0.0);
    v_.emplace_back(static_cast<size_t>(p.numel()), 0.0);
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t pi = 0; pi < params_.size(); ++pi) {
    Tensor& p = params_[pi];
    if (!p.has_grad()) {
      continue;
    }
    auto g = p.grad();
    if (!all_finite(g)) {
      throw std::runtime_error("AdamW: non-finite gradient on parameter " + std::to_string(pi) +
                               " at step " + std::to_string(t_));
    }
    auto values = p.mutable_data();
    auto& m = m_[pi];
    auto& v = v_[pi];
    for (size_t i = 0; i < values.size(); ++i) {
      // Decoupled decay is applied to the value independently of the moments.
      values[i] *= 1.0 - lr * cfg_.weight_decay;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      values[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) {
    p.zero_grad();
  }
}

// ---- initialization --------------------------------------------------------------

SteeringVector init_steering(SteeringInit mode, const AdaptationConfig& cfg, const Model& model,
                             const std::vector<std::vector<int32_t>>* corpus_ids) {
  const int64_t d = model.config().d_model;
  SteeringVector sv;
  sv.init_mode = mode;
  sv.seed = cfg.seed;
  Rng rng = Rng::stream(cfg.seed, "steer_init");
  if (mode == SteeringInit::kStandardNormal) {
    sv.values = Tensor::randn({cfg.length, d}, rng);
    return sv;
  }
  if (corpus_ids == nullptr || corpus_ids->empty()) {
    throw std::invalid_argument("init_steering: data_driven mode requires a corpus");
  }
  // Per-dimension moments over every token embedding occurring in the corpus
  // (with multiplicity).
  std::vector<double> mean(static_cast<size_t>(d), 0.0);
  std::vector<double> sq(static_cast<size_t>(d), 0.0);
  int64_t count = 0;
  const Tensor& table = model.weights().embedding;
  const auto td = table.data();
  for (const auto& seq : *corpus_ids) {
    for (int32_t id : seq) {
      if (id < 0 || id >= table.rows()) {
        throw std::invalid_argument("init_steering: corpus token out of range");
      }
      for (int64_t j = 0; j < d; ++j) {
        const double x = td[id * d + j];
        mean[static_cast<size_t>(j)] += x;
        sq[static_cast<size_t>(j)] += x * x;
      }
      ++count;
    }
  }
  if (count == 0) {
    throw std::invalid_argument("init_steering: data_driven mode requires a non-empty corpus");
  }
  std::vector<double> sigma(static_cast<size_t>(d), 0.0);
  for (int64_t j = 0; j < d; ++j) {
    mean[static_cast<size_t>(j)] /= static_cast<double>(count);
    const double var =
        sq[static_cast<size_t>(j)] / static_cast<double>(count) -
        mean[static_cast<size_t>(j)] * mean[static_cast<size_t>(j)];
    sigma[static_cast<size_t>(j)] = std::sqrt(std::max(0.0, var));
  }
  sv.values = Tensor::zeros({cfg.length, d});
  auto out = sv.values.mutable_data();
  for (int64_t r = 0; r < cfg.length; ++r) {
    for (int64_t j = 0; j < d; ++j) {
      out[r * d + j] = rng.normal(mean[static_cast<size_t>(j)], sigma[static_cast<size_t>(j)]);
    }
  }
  return sv;
}

// ---- adaptation loop ----------------------------------------------------------------

TrainLog run_entropy_adaptation(const Model& model, const Tensor& prefix,
                                const std::vector<Tensor>& trainable,
                                const std::vector<std::vector<int32_t>>& prompts,
                                const AdaptationConfig& cfg, const GenerationParams& train_gen,
                                const AdaptHooks& hooks) {
  cfg.validate();
  train_gen.validate();
  if (prompts.empty()) {
    throw std::invalid_argument("run_entropy_adaptation: empty dataset");
  }

  bool model_is_trainable = false;
  for (const auto& t : trainable) {
    if (t.same_storage(model.weights().embedding)) {
      model_is_trainable = true;
    }
  }
  const std::string hash_before = model_is_trainable ? "" : model.weights().content_hash();

  const int64_t n = static_cast<int64_t>(prompts.size());
  const int64_t batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t total_steps = cfg.epochs * batches_per_epoch;
  const bool constant_small_lr = cfg.init_mode == SteeringInit::kDataDriven;

  AdamW::Config opt_cfg;
  opt_cfg.beta1 = cfg.beta1;
  opt_cfg.beta2 = cfg.beta2;
  opt_cfg.eps = cfg.adam_eps;
  opt_cfg.weight_decay = cfg.weight_decay;
  AdamW optimizer(trainable, opt_cfg);
  optimizer.zero_grad();

  TrainLog log;
  int64_t step = 0;
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(hash_stream(cfg.seed, "shuffle", static_cast<uint64_t>(epoch)));
    std::iota(order.begin(), order.end(), 0);
    shuffle_rng.shuffle(order);

    for (int64_t b = 0; b < batches_per_epoch; ++b) {
      const int64_t lo = b * cfg.batch_size;
      const int64_t hi = std::min(n, lo + cfg.batch_size);
      std::vector<std::vector<int32_t>> batch;
      std::vector<uint64_t> indices;
      for (int64_t i = lo; i < hi; ++i) {
        batch.push_back(prompts[static_cast<size_t>(order[static_cast<size_t>(i)])]);
        indices.push_back(static_cast<uint64_t>(order[static_cast<size_t>(i)]));
      }

      // Fresh rollouts every batch: the loss conditions on the current
      // trainable state. The rollout stream is re-derived per epoch so the
      // same sample explores differently across epochs.
      GenerationParams rollout_gen = train_gen;
      rollout_gen.seed = hash_stream(cfg.seed, "rollout_epoch", static_cast<uint64_t>(epoch));
      std::vector<Rollout> rollouts = sample_rollouts(model, prefix, batch, rollout_gen, indices);

      bool any_tokens = false;
      for (const auto& r : rollouts) {
        any_tokens = any_tokens || !r.generated_ids.empty();
      }
      const double lr = constant_small_lr ? cfg.small_lr : lr_at(step, total_steps, cfg);
      if (!any_tokens) {
        // Degenerate batch: skipped, but the schedule still advances.
        ++log.skipped_batches;
        ++step;
        continue;
      }

      double loss_value = 0.0;
      {
        Tape tape;
        std::vector<Tensor> entropies;
        entropies.reserve(rollouts.size());
        for (const auto& r : rollouts) {
          if (r.generated_ids.empty()) {
            continue;
          }
          entropies.push_back(
              teacher_forced_entropies(model, prefix, r.prompt_ids, r.generated_ids));
        }
        Tensor loss = entropy_loss(entropies);
        loss_value = loss.value();
        if (!std::isfinite(loss_value)) {
          throw std::runtime_error("run_entropy_adaptation: non-finite loss at step " +
                                   std::to_string(step));
        }
        tape.backward(loss);
        if (hooks.after_backward) {
          hooks.after_backward();
        }
      }
      optimizer.step(lr);
      optimizer.zero_grad();

      StepRecord rec{step, epoch, lr, loss_value};
      log.steps.push_back(rec);
      if (hooks.on_step) {
        hooks.on_step(rec);
      }
      ++step;
    }

    if (hooks.epoch_eval) {
      log.epoch_eval.push_back({epoch, hooks.epoch_eval(prefix, epoch)});
    }
  }

  if (cfg.epochs > 0 && log.steps.empty()) {
    throw std::runtime_error("run_entropy_adaptation: every batch was degenerate");
  }
  if (!model_is_trainable && model.weights().content_hash() != hash_before) {
    throw std::logic_error("run_entropy_adaptation: frozen weights changed");
  }
  return log;
}

AdaptResult adapt(const Model& model, const std::vector<std::vector<int32_t>>& prompts,
                  const AdaptationConfig& cfg, const GenerationParams& train_gen,
                  const AdaptHooks& hooks) {
  cfg.validate();
  SteeringVector sv = init_steering(cfg.init_mode, cfg, model,
                                    cfg.init_mode == SteeringInit::kDataDriven ? &prompts
                                                                               : nullptr);
  AdaptResult result;
  if (cfg.length == 0) {
    // Zero-length steering is the identity; nothing to optimize.
    result.steering = std::move(sv);
    return result;
  }
  sv.values.set_requires_grad(true);
  result.log = run_entropy_adaptation(model, sv.values, {sv.values}, prompts, cfg, train_gen,
                                      hooks);
  sv.values.set_requires_grad(false);
  sv.epochs_trained = cfg.epochs;
  result.steering = std::move(sv);
  return result;
}

AdaptResult adapt_per_sample(const Model& model, const std::vector<int32_t>& prompt,
                             const AdaptationConfig& cfg, const GenerationParams& train_gen,
                             const AdaptHooks& hooks) {
  // Definitionally the shared loop on a singleton dataset: each epoch re-rolls
  // the one sample under the current vector.
  return adapt(model, {prompt}, cfg, train_gen, hooks);
}

}  // namespace ttsv
