#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ttsv/generation.hpp"
#include "ttsv/model.hpp"
#include "ttsv/tokenizer.hpp"

#include <nlohmann/json_fwd.hpp>

namespace ttsv {

enum class TaskKind { kModAdd, kReverse, kSortDigits, kParity, kCopy };

std::string to_string(TaskKind k);
TaskKind task_kind_from_string(const std::string& s);

/// Prompt rendering. Tagged is the pretraining format ("R:abc12="); plain
/// drops the tag; distractor prepends an unfamiliar marker string to a tagged
/// prompt — the shifted test distribution.
enum class PromptStyle { kTagged, kPlain, kDistractor };

std::string to_string(PromptStyle s);
PromptStyle prompt_style_from_string(const std::string& s);

struct TaskSpec {
  TaskKind kind = TaskKind::kReverse;
  double weight = 1.0;
  // String tasks (reverse / sort_digits / parity / copy).
  int64_t min_len = 3;
  int64_t max_len = 8;
  // mod_add.
  int64_t min_val = 0;
  int64_t max_val = 99;
  std::vector<int64_t> moduli = {3, 5, 7};
  // Rendering.
  PromptStyle style = PromptStyle::kTagged;
  std::string distractor = "##";

  void validate() const;
  nlohmann::json to_json() const;
  static TaskSpec from_json(const nlohmann::json& j);
};

struct TaskInstance {
  std::string prompt;
  std::string answer;
  std::string task;
};

/// One instance from the spec's generator; pure given the RNG state.
TaskInstance generate_instance(const TaskSpec& spec, Rng& rng);

/// n instances drawn from a weighted mixture; record i uses the PRNG stream
/// (seed, "corpus", i), so generation parallelizes and reordering the mixture
/// list does not change records.
std::vector<TaskInstance> make_corpus(const std::vector<TaskSpec>& mixture, int64_t n,
                                      uint64_t seed);

void write_corpus_jsonl(const std::string& path, const std::vector<TaskInstance>& corpus);
std::vector<TaskInstance> read_corpus_jsonl(const std::string& path);

/// BOS + prompt + SEP + answer + EOS.
std::vector<int32_t> training_sequence(const Tokenizer& tok, const TaskInstance& inst);
/// BOS + prompt + SEP (the decoding context).
std::vector<int32_t> prompt_sequence(const Tokenizer& tok, const TaskInstance& inst);

struct PretrainOptions {
  int64_t steps = 2000;
  int64_t batch_size = 16;
  double lr = 1e-3;
  int64_t warmup_steps = 100;
  /// Final LR as a fraction of the peak (linear decay after warmup).
  double final_lr_fraction = 0.1;
  double clip_norm = 1.0;
  double weight_decay = 0.01;
  uint64_t seed = 0;
};

struct PretrainStepRecord {
  int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct PretrainResult {
  TransformerWeights weights;
  std::vector<PretrainStepRecord> curve;
};

/// Next-token cross-entropy pretraining over BOS+prompt+SEP+answer+EOS, with
/// the loss restricted to answer tokens and EOS. Deterministic given the seed.
/// Throws on divergence (non-finite loss).
PretrainResult pretrain_base(const ModelConfig& cfg, const std::vector<TaskInstance>& corpus,
                             const Tokenizer& tok, const PretrainOptions& opts);

struct EvalRecord {
  std::string prompt;
  std::string answer;
  std::string generated;
  bool correct = false;
  bool truncated = false;
  std::vector<double> entropies;
};

struct EvalReport {
  double accuracy = 0.0;  // percentage in [0, 100]
  int64_t n = 0;
  int64_t correct = 0;
  double mean_entropy = 0.0;
  double p95_entropy = 0.0;
  std::vector<EvalRecord> records;
};

/// Exact-match accuracy under an arbitrary generator (injection point for
/// oracle tests); the generator returns the detokenized text before EOS.
EvalReport evaluate_with(const std::function<std::string(const TaskInstance&)>& generate,
                         const std::vector<TaskInstance>& dataset);

/// Greedy evaluation of the model (optionally steered); the answer is the
/// detokenized generation strictly before the first EOS.
EvalReport evaluate_accuracy(const Model& model, const Tensor& prefix,
                             const std::vector<TaskInstance>& dataset, const Tokenizer& tok,
                             const GenerationParams& eval_params,
                             const Tensor* head_delta = nullptr);

/// Detokenized generation strictly before the first EOS.
std::string generated_text(const Tokenizer& tok, const Rollout& rollout);

}  // namespace ttsv
