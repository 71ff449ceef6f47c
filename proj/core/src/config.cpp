#include "ttsv/config.hpp"

#include <fstream>
#include <set>

namespace ttsv {

namespace {

void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                         const std::string& where) {
  if (!j.is_object()) {
    throw ConfigError("config: '" + where + "' must be an object");
  }
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) {
      throw ConfigError("config: unknown key '" + key + "' in " + where);
    }
  }
}

template <typename T>
void read_if(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) {
    out = j.at(key).get<T>();
  }
}

ModelConfig parse_model(const nlohmann::json& j) {
  reject_unknown_keys(j,
                      {"n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "max_seq",
                       "pos_encoding", "tie_lm_head"},
                      "model");
  ModelConfig cfg;
  read_if(j, "n_layers", cfg.n_layers);
  read_if(j, "n_heads", cfg.n_heads);
  read_if(j, "d_model", cfg.d_model);
  read_if(j, "d_ff", cfg.d_ff);
  read_if(j, "vocab_size", cfg.vocab_size);
  read_if(j, "max_seq", cfg.max_seq);
  if (j.contains("pos_encoding")) {
    cfg.pos_encoding = pos_encoding_from_string(j.at("pos_encoding").get<std::string>());
  }
  read_if(j, "tie_lm_head", cfg.tie_lm_head);
  cfg.validate();
  return cfg;
}

AdaptationConfig parse_adaptation(const nlohmann::json& j) {
  reject_unknown_keys(j,
                      {"epochs", "batch_size", "lr_start", "lr_end", "weight_decay", "adam_eps",
                       "beta1", "beta2", "length", "init_mode", "small_lr", "mode"},
                      "adaptation");
  AdaptationConfig cfg;
  read_if(j, "epochs", cfg.epochs);
  read_if(j, "batch_size", cfg.batch_size);
  read_if(j, "lr_start", cfg.lr_start);
  read_if(j, "lr_end", cfg.lr_end);
  read_if(j, "weight_decay", cfg.weight_decay);
  read_if(j, "adam_eps", cfg.adam_eps);
  read_if(j, "beta1", cfg.beta1);
  read_if(j, "beta2", cfg.beta2);
  read_if(j, "length", cfg.length);
  if (j.contains("init_mode")) {
    cfg.init_mode = steering_init_from_string(j.at("init_mode").get<std::string>());
  }
  read_if(j, "small_lr", cfg.small_lr);
  if (j.contains("mode")) {
    const std::string m = j.at("mode").get<std::string>();
    if (m == "shared") {
      cfg.mode = AdaptMode::kShared;
    } else if (m == "per_sample") {
      cfg.mode = AdaptMode::kPerSample;
    } else {
      throw ConfigError("config: adaptation.mode must be 'shared' or 'per_sample'");
    }
  }
  cfg.validate();
  return cfg;
}

GenerationParams parse_generation(const nlohmann::json& j, const std::string& where) {
  reject_unknown_keys(
      j, {"do_sample", "top_p", "temperature", "repetition_penalty", "max_new_tokens"}, where);
  GenerationParams p;
  read_if(j, "do_sample", p.do_sample);
  read_if(j, "top_p", p.top_p);
  read_if(j, "temperature", p.temperature);
  read_if(j, "repetition_penalty", p.repetition_penalty);
  read_if(j, "max_new_tokens", p.max_new_tokens);
  p.validate();
  return p;
}

TaskSpec parse_task(const nlohmann::json& j, const std::string& where) {
  reject_unknown_keys(j,
                      {"task", "weight", "style", "distractor", "min_len", "max_len", "min_val",
                       "max_val", "moduli"},
                      where);
  try {
    return TaskSpec::from_json(j);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("config: " + where + ": " + e.what());
  }
}

DatasetSpec parse_dataset(const nlohmann::json& j, const std::string& where) {
  reject_unknown_keys(j, {"task", "n"}, where);
  DatasetSpec spec;
  if (j.contains("task")) {
    spec.task = parse_task(j.at("task"), where + ".task");
  }
  read_if(j, "n", spec.n);
  if (spec.n < 1) {
    throw ConfigError("config: " + where + ".n must be >= 1");
  }
  return spec;
}

PretrainSection parse_pretrain(const nlohmann::json& j) {
  reject_unknown_keys(j,
                      {"mixture", "n_train", "n_heldout", "steps", "batch_size", "lr",
                       "warmup_steps", "final_lr_fraction", "clip_norm", "weight_decay"},
                      "pretrain");
  PretrainSection s;
  if (j.contains("mixture")) {
    if (!j.at("mixture").is_array() || j.at("mixture").empty()) {
      throw ConfigError("config: pretrain.mixture must be a non-empty array");
    }
    for (const auto& entry : j.at("mixture")) {
      s.mixture.push_back(parse_task(entry, "pretrain.mixture[]"));
    }
  }
  read_if(j, "n_train", s.n_train);
  read_if(j, "n_heldout", s.n_heldout);
  read_if(j, "steps", s.options.steps);
  read_if(j, "batch_size", s.options.batch_size);
  read_if(j, "lr", s.options.lr);
  read_if(j, "warmup_steps", s.options.warmup_steps);
  read_if(j, "final_lr_fraction", s.options.final_lr_fraction);
  read_if(j, "clip_norm", s.options.clip_norm);
  read_if(j, "weight_decay", s.options.weight_decay);
  return s;
}

}  // namespace

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j,
                      {"seed", "model", "adaptation", "generation", "pretrain", "adapt_data",
                       "eval_data", "transfer_data"},
                      "top level");
  ExperimentConfig cfg;
  read_if(j, "seed", cfg.seed);
  if (j.contains("model")) {
    cfg.model = parse_model(j.at("model"));
  }
  if (j.contains("adaptation")) {
    cfg.adaptation = parse_adaptation(j.at("adaptation"));
  }
  if (j.contains("generation")) {
    reject_unknown_keys(j.at("generation"), {"train", "eval"}, "generation");
    if (j.at("generation").contains("train")) {
      cfg.gen_train = parse_generation(j.at("generation").at("train"), "generation.train");
    }
    if (j.at("generation").contains("eval")) {
      cfg.gen_eval = parse_generation(j.at("generation").at("eval"), "generation.eval");
    }
  }
  if (j.contains("pretrain")) {
    cfg.pretrain = parse_pretrain(j.at("pretrain"));
  }
  if (j.contains("adapt_data")) {
    cfg.adapt_data = parse_dataset(j.at("adapt_data"), "adapt_data");
  }
  if (j.contains("eval_data")) {
    cfg.eval_data = parse_dataset(j.at("eval_data"), "eval_data");
  }
  if (j.contains("transfer_data")) {
    cfg.transfer_data = parse_dataset(j.at("transfer_data"), "transfer_data");
  }
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("config: cannot open " + path);
  }
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: parse failure in " + path + ": " + e.what());
  }
  return experiment_config_from_json(j);
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json mixture = nlohmann::json::array();
  for (const auto& spec : pretrain.mixture) {
    mixture.push_back(spec.to_json());
  }
  return nlohmann::json{
      {"seed", seed},
      {"model", model.to_json()},
      {"adaptation",
       {{"epochs", adaptation.epochs},
        {"batch_size", adaptation.batch_size},
        {"lr_start", adaptation.lr_start},
        {"lr_end", adaptation.lr_end},
        {"weight_decay", adaptation.weight_decay},
        {"adam_eps", adaptation.adam_eps},
        {"beta1", adaptation.beta1},
        {"beta2", adaptation.beta2},
        {"length", adaptation.length},
        {"init_mode", to_string(adaptation.init_mode)},
        {"small_lr", adaptation.small_lr},
        {"mode", adaptation.mode == AdaptMode::kShared ? "shared" : "per_sample"}}},
      {"generation",
       {{"train",
         {{"do_sample", gen_train.do_sample},
          {"top_p", gen_train.top_p},
          {"temperature", gen_train.temperature},
          {"repetition_penalty", gen_train.repetition_penalty},
          {"max_new_tokens", gen_train.max_new_tokens}}},
        {"eval",
         {{"do_sample", gen_eval.do_sample},
          {"top_p", gen_eval.top_p},
          {"temperature", gen_eval.temperature},
          {"repetition_penalty", gen_eval.repetition_penalty},
          {"max_new_tokens", gen_eval.max_new_tokens}}}}},
      {"pretrain",
       {{"mixture", mixture},
        {"n_train", pretrain.n_train},
        {"n_heldout", pretrain.n_heldout},
        {"steps", pretrain.options.steps},
        {"batch_size", pretrain.options.batch_size},
        {"lr", pretrain.options.lr},
        {"warmup_steps", pretrain.options.warmup_steps},
        {"final_lr_fraction", pretrain.options.final_lr_fraction},
        {"clip_norm", pretrain.options.clip_norm},
        {"weight_decay", pretrain.options.weight_decay}}},
      {"adapt_data", {{"task", adapt_data.task.to_json()}, {"n", adapt_data.n}}},
      {"eval_data", {{"task", eval_data.task.to_json()}, {"n", eval_data.n}}},
      {"transfer_data", {{"task", transfer_data.task.to_json()}, {"n", transfer_data.n}}}};
}

}  // namespace ttsv
