#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ttsv/model.hpp"
#include "ttsv/steering.hpp"
#include "ttsv/tasks.hpp"

namespace ttsv {

/// Configuration problems exit with a distinct status from runtime failures.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetSpec {
  TaskSpec task;
  int64_t n = 128;
};

struct PretrainSection {
  std::vector<TaskSpec> mixture;
  int64_t n_train = 4096;
  int64_t n_heldout = 256;
  PretrainOptions options;
};

/// Whole-experiment configuration. Unknown keys anywhere are fatal; defaults
/// follow the reference hyperparameters (L=20, 20 epochs, lr 1e-3 -> 1e-5,
/// weight decay 1e-8, eps 1e-5, batch 16; train sampling top_p 0.95,
/// temperature 0.5, repetition penalty 1.15; greedy evaluation).
struct ExperimentConfig {
  uint64_t seed = 0;
  ModelConfig model;
  AdaptationConfig adaptation;
  GenerationParams gen_train;
  GenerationParams gen_eval = [] {
    GenerationParams p;
    p.do_sample = false;
    return p;
  }();
  PretrainSection pretrain;
  DatasetSpec adapt_data;
  DatasetSpec eval_data;
  DatasetSpec transfer_data;

  nlohmann::json to_json() const;
};

ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::string& path);

}  // namespace ttsv
