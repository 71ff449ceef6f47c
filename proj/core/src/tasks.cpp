#include "ttsv/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "ttsv/steering.hpp"

namespace ttsv {

std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::kModAdd: return "mod_add";
    case TaskKind::kReverse: return "reverse";
    case TaskKind::kSortDigits: return "sort_digits";
    case TaskKind::kParity: return "parity";
    case TaskKind::kCopy: return "copy";
  }
  throw std::logic_error("to_string(TaskKind): unreachable");
}

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "mod_add") return TaskKind::kModAdd;
  if (s == "reverse") return TaskKind::kReverse;
  if (s == "sort_digits") return TaskKind::kSortDigits;
  if (s == "parity") return TaskKind::kParity;
  if (s == "copy") return TaskKind::kCopy;
  throw std::invalid_argument("unknown task '" + s + "'");
}

std::string to_string(PromptStyle s) {
  switch (s) {
    case PromptStyle::kTagged: return "tagged";
    case PromptStyle::kPlain: return "plain";
    case PromptStyle::kDistractor: return "distractor";
  }
  throw std::logic_error("to_string(PromptStyle): unreachable");
}

PromptStyle prompt_style_from_string(const std::string& s) {
  if (s == "tagged") return PromptStyle::kTagged;
  if (s == "plain") return PromptStyle::kPlain;
  if (s == "distractor") return PromptStyle::kDistractor;
  throw std::invalid_argument("unknown prompt style '" + s + "'");
}

void TaskSpec::validate() const {
  if (weight <= 0.0) {
    throw std::invalid_argument("TaskSpec: weight must be positive");
  }
  if (kind == TaskKind::kModAdd) {
    if (min_val < 0 || max_val < min_val) {
      throw std::invalid_argument("TaskSpec: bad operand range");
    }
    if (moduli.empty()) {
      throw std::invalid_argument("TaskSpec: mod_add needs at least one modulus");
    }
    for (int64_t m : moduli) {
      if (m < 2) {
        throw std::invalid_argument("TaskSpec: moduli must be >= 2");
      }
    }
  } else {
    if (min_len < 1 || max_len < min_len) {
      throw std::invalid_argument("TaskSpec: bad length range");
    }
  }
}

nlohmann::json TaskSpec::to_json() const {
  nlohmann::json j{{"task", to_string(kind)},
                   {"weight", weight},
                   {"style", to_string(style)}};
  if (kind == TaskKind::kModAdd) {
    j["min_val"] = min_val;
    j["max_val"] = max_val;
    j["moduli"] = moduli;
  } else {
    j["min_len"] = min_len;
    j["max_len"] = max_len;
  }
  if (style == PromptStyle::kDistractor) {
    j["distractor"] = distractor;
  }
  return j;
}

TaskSpec TaskSpec::from_json(const nlohmann::json& j) {
  TaskSpec spec;
  for (const auto& [key, value] : j.items()) {
    if (key == "task") {
      spec.kind = task_kind_from_string(value.get<std::string>());
    } else if (key == "weight") {
      spec.weight = value.get<double>();
    } else if (key == "style") {
      spec.style = prompt_style_from_string(value.get<std::string>());
    } else if (key == "min_len") {
      spec.min_len = value.get<int64_t>();
    } else if (key == "max_len") {
      spec.max_len = value.get<int64_t>();
    } else if (key == "min_val") {
      spec.min_val = value.get<int64_t>();
    } else if (key == "max_val") {
      spec.max_val = value.get<int64_t>();
    } else if (key == "moduli") {
      spec.moduli = value.get<std::vector<int64_t>>();
    } else if (key == "distractor") {
      spec.distractor = value.get<std::string>();
    } else {
      throw std::invalid_argument("TaskSpec: unknown key '" + key + "'");
    }
  }
  spec.validate();
  return spec;
}

namespace {

char task_tag(TaskKind k) {
  switch (k) {
    case TaskKind::kModAdd: return 'A';
    case TaskKind::kReverse: return 'R';
    case TaskKind::kSortDigits: return 'S';
    case TaskKind::kParity: return 'P';
    case TaskKind::kCopy: return 'C';
  }
  throw std::logic_error("task_tag: unreachable");
}

std::string render_prompt(const TaskSpec& spec, const std::string& body) {
  std::string tagged;
  tagged.push_back(task_tag(spec.kind));
  tagged.push_back(':');
  tagged += body;
  tagged.push_back('=');
  switch (spec.style) {
    case PromptStyle::kTagged:
      return tagged;
    case PromptStyle::kPlain:
      return body + "=";
    case PromptStyle::kDistractor:
      return spec.distractor + tagged;
  }
  throw std::logic_error("render_prompt: unreachable");
}

}  // namespace

TaskInstance generate_instance(const TaskSpec& spec, Rng& rng) {
  spec.validate();
  TaskInstance inst;
  inst.task = to_string(spec.kind);
  switch (spec.kind) {
    case TaskKind::kModAdd: {
      const int64_t span = spec.max_val - spec.min_val + 1;
      const int64_t a = spec.min_val + static_cast<int64_t>(rng.below(static_cast<uint64_t>(span)));
      const int64_t b = spec.min_val + static_cast<int64_t>(rng.below(static_cast<uint64_t>(span)));
      const int64_t m = spec.moduli[rng.below(spec.moduli.size())];
      inst.prompt = render_prompt(
          spec, std::to_string(a) + "+" + std::to_string(b) + "%" + std::to_string(m));
      inst.answer = std::to_string((a + b) % m);
      return inst;
    }
    case TaskKind::kReverse:
    case TaskKind::kCopy:
    case TaskKind::kSortDigits:
    case TaskKind::kParity: {
      const int64_t len =
          spec.min_len + static_cast<int64_t>(rng.below(static_cast<uint64_t>(
                             spec.max_len - spec.min_len + 1)));
      std::string body;
      for (int64_t i = 0; i < len; ++i) {
        if (spec.kind == TaskKind::kSortDigits) {
          body.push_back(static_cast<char>('0' + rng.below(10)));
        } else if (spec.kind == TaskKind::kParity) {
          body.push_back(static_cast<char>('0' + rng.below(2)));
        } else {
          // Mixed digits and letters a-j for copy / reverse.
          const uint64_t r = rng.below(20);
          body.push_back(r < 10 ? static_cast<char>('0' + r)
                                : static_cast<char>('a' + (r - 10)));
        }
      }
      inst.prompt = render_prompt(spec, body);
      if (spec.kind == TaskKind::kReverse) {
        inst.answer = std::string(body.rbegin(), body.rend());
      } else if (spec.kind == TaskKind::kCopy) {
        inst.answer = body;
      } else if (spec.kind == TaskKind::kSortDigits) {
        std::string sorted = body;
        std::sort(sorted.begin(), sorted.end());
        inst.answer = sorted;
      } else {
        const auto ones = std::count(body.begin(), body.end(), '1');
        inst.answer = (ones % 2 == 1) ? "1" : "0";
      }
      return inst;
    }
  }
  throw std::logic_error("generate_instance: unreachable");
}

std::vector<TaskInstance> make_corpus(const std::vector<TaskSpec>& mixture, int64_t n,
                                      uint64_t seed) {
  if (mixture.empty()) {
    throw std::invalid_argument("make_corpus: empty mixture");
  }
  if (n < 1) {
    throw std::invalid_argument("make_corpus: n must be >= 1");
  }
  double total_weight = 0.0;
  for (const auto& spec : mixture) {
    spec.validate();
    total_weight += spec.weight;
  }
  std::vector<double> probs;
  probs.reserve(mixture.size());
  for (const auto& spec : mixture) {
    probs.push_back(spec.weight / total_weight);
  }
  std::vector<TaskInstance> corpus;
  corpus.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    Rng rng = Rng::stream(seed, "corpus", static_cast<uint64_t>(i));
    const size_t which = rng.categorical(probs);
    corpus.push_back(generate_instance(mixture[which], rng));
  }
  return corpus;
}

void write_corpus_jsonl(const std::string& path, const std::vector<TaskInstance>& corpus) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw std::runtime_error("write_corpus_jsonl: cannot open " + path);
  }
  for (const auto& inst : corpus) {
    nlohmann::json j{{"prompt", inst.prompt}, {"answer", inst.answer}, {"task", inst.task}};
    out << j.dump() << "\n";
  }
}

std::vector<TaskInstance> read_corpus_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("read_corpus_jsonl: cannot open " + path);
  }
  std::vector<TaskInstance> corpus;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) {
      continue;
    }
    nlohmann::json j = nlohmann::json::parse(line);
    corpus.push_back(TaskInstance{j.at("prompt").get<std::string>(),
                                  j.at("answer").get<std::string>(),
                                  j.at("task").get<std::string>()});
  }
  return corpus;
}

std::vector<int32_t> training_sequence(const Tokenizer& tok, const TaskInstance& inst) {
  std::vector<int32_t> seq{Tokenizer::kBos};
  auto p = tok.encode(inst.prompt);
  seq.insert(seq.end(), p.begin(), p.end());
  seq.push_back(Tokenizer::kSep);
  auto a = tok.encode(inst.answer);
  seq.insert(seq.end(), a.begin(), a.end());
  seq.push_back(Tokenizer::kEos);
  return seq;
}

std::vector<int32_t> prompt_sequence(const Tokenizer& tok, const TaskInstance& inst) {
  std::vector<int32_t> seq{Tokenizer::kBos};
  auto p = tok.encode(inst.prompt);
  seq.insert(seq.end(), p.begin(), p.end());
  seq.push_back(Tokenizer::kSep);
  return seq;
}

// ---- pretraining -----------------------------------------------------------------

PretrainResult pretrain_base(const ModelConfig& cfg, const std::vector<TaskInstance>& corpus,
                             const Tokenizer& tok, const PretrainOptions& opts) {
  cfg.validate();
  if (corpus.empty()) {
    throw std::invalid_argument("pretrain_base: empty corpus");
  }
  if (cfg.vocab_size != tok.vocab_size()) {
    throw std::invalid_argument("pretrain_base: config vocab_size does not match tokenizer");
  }

  // Pre-tokenize. The loss covers positions predicting answer tokens and EOS.
  struct Sample {
    std::vector<int32_t> inputs;
    std::vector<int32_t> targets;
    int64_t answer_tokens;
  };
  std::vector<Sample> samples;
  samples.reserve(corpus.size());
  for (const auto& inst : corpus) {
    std::vector<int32_t> seq = training_sequence(tok, inst);
    if (static_cast<int64_t>(seq.size()) > cfg.max_seq) {
      throw std::invalid_argument("pretrain_base: sequence exceeds max_seq: " + inst.prompt);
    }
    Sample s;
    s.inputs.assign(seq.begin(), seq.end() - 1);
    s.targets.assign(s.inputs.size(), -1);
    const auto sep =
        std::find(seq.begin(), seq.end(), Tokenizer::kSep) - seq.begin();
    for (size_t pos = static_cast<size_t>(sep); pos < s.inputs.size(); ++pos) {
      s.targets[pos] = seq[pos + 1];
    }
    s.answer_tokens = static_cast<int64_t>(s.inputs.size()) - sep;
    samples.push_back(std::move(s));
  }

  PretrainResult result;
  result.weights = TransformerWeights::init(cfg, opts.seed);
  result.weights.set_requires_grad(true);
  Model model(cfg, result.weights);

  std::vector<Tensor> params;
  auto named = result.weights.named_tensors();
  for (auto& [name, t] : named) {
    params.push_back(t);
  }
  AdamW::Config opt_cfg;
  opt_cfg.weight_decay = opts.weight_decay;
  opt_cfg.eps = 1e-8;
  AdamW optimizer(params, opt_cfg);

  Rng batch_rng = Rng::stream(opts.seed, "pretrain.batches");
  for (int64_t step = 0; step < opts.steps; ++step) {
    double lr = opts.lr;
    if (step < opts.warmup_steps) {
      lr = opts.lr * static_cast<double>(step + 1) / static_cast<double>(opts.warmup_steps);
    } else if (opts.steps > opts.warmup_steps + 1) {
      const double progress = static_cast<double>(step - opts.warmup_steps) /
                              static_cast<double>(opts.steps - opts.warmup_steps - 1);
      lr = opts.lr * (1.0 + (opts.final_lr_fraction - 1.0) * progress);
    }

    double loss_value = 0.0;
    {
      Tape tape;
      // Token-weighted mean over the batch.
      std::vector<Tensor> losses;
      std::vector<int64_t> counts;
      int64_t total = 0;
      for (int64_t b = 0; b < opts.batch_size; ++b) {
        const Sample& s = samples[batch_rng.below(samples.size())];
        Tensor logits = model.forward(model.embed_tokens(s.inputs));
        losses.push_back(cross_entropy_mean(logits, s.targets));
        counts.push_back(s.answer_tokens);
        total += s.answer_tokens;
      }
      Tensor loss = scale(losses[0], static_cast<double>(counts[0]) / static_cast<double>(total));
      for (size_t i = 1; i < losses.size(); ++i) {
        loss = add(loss, scale(losses[i],
                               static_cast<double>(counts[i]) / static_cast<double>(total)));
      }
      loss_value = loss.value();
      if (!std::isfinite(loss_value)) {
        throw std::runtime_error("pretrain_base: diverged (non-finite loss) at step " +
                                 std::to_string(step));
      }
      tape.backward(loss);
    }

    // Global-norm clip.
    if (opts.clip_norm > 0.0) {
      double sq = 0.0;
      for (auto& p : params) {
        if (p.has_grad()) {
          for (double g : p.grad()) {
            sq += g * g;
          }
        }
      }
      const double norm = std::sqrt(sq);
      if (norm > opts.clip_norm) {
        const double factor = opts.clip_norm / norm;
        for (auto& p : params) {
          if (p.has_grad()) {
            for (double& g : p.impl()->grad) {
              g *= factor;
            }
          }
        }
      }
    }

    optimizer.step(lr);
    optimizer.zero_grad();
    result.curve.push_back({step, loss_value, lr});
  }

  result.weights.set_requires_grad(false);
  return result;
}

// ---- evaluation --------------------------------------------------------------------

std::string generated_text(const Tokenizer& tok, const Rollout& rollout) {
  std::vector<int32_t> kept;
  for (int32_t id : rollout.generated_ids) {
    if (id == rollout.eos_id) {
      break;
    }
    kept.push_back(id);
  }
  return tok.decode(kept);
}

EvalReport evaluate_with(const std::function<std::string(const TaskInstance&)>& generate,
                         const std::vector<TaskInstance>& dataset) {
  if (dataset.empty()) {
    throw std::invalid_argument("evaluate_with: empty dataset");
  }
  EvalReport report;
  report.n = static_cast<int64_t>(dataset.size());
  for (const auto& inst : dataset) {
    EvalRecord rec;
    rec.prompt = inst.prompt;
    rec.answer = inst.answer;
    rec.generated = generate(inst);
    rec.correct = rec.generated == inst.answer;
    report.correct += rec.correct ? 1 : 0;
    report.records.push_back(std::move(rec));
  }
  report.accuracy = 100.0 * static_cast<double>(report.correct) /
                    static_cast<double>(report.n);
  return report;
}

EvalReport evaluate_accuracy(const Model& model, const Tensor& prefix,
                             const std::vector<TaskInstance>& dataset, const Tokenizer& tok,
                             const GenerationParams& eval_params, const Tensor* head_delta) {
  if (dataset.empty()) {
    throw std::invalid_argument("evaluate_accuracy: empty dataset");
  }
  std::vector<std::vector<int32_t>> prompts;
  prompts.reserve(dataset.size());
  for (const auto& inst : dataset) {
    prompts.push_back(prompt_sequence(tok, inst));
  }
  std::vector<Rollout> rollouts = greedy_decode(model, prefix, prompts, eval_params, head_delta);

  EvalReport report;
  report.n = static_cast<int64_t>(dataset.size());
  std::vector<double> all_entropies;
  for (size_t i = 0; i < dataset.size(); ++i) {
    EvalRecord rec;
    rec.prompt = dataset[i].prompt;
    rec.answer = dataset[i].answer;
    rec.generated = generated_text(tok, rollouts[i]);
    rec.correct = rec.generated == dataset[i].answer;
    rec.truncated = rollouts[i].truncated;
    rec.entropies = rollouts[i].entropies;
    all_entropies.insert(all_entropies.end(), rec.entropies.begin(), rec.entropies.end());
    report.correct += rec.correct ? 1 : 0;
    report.records.push_back(std::move(rec));
  }
  report.accuracy = 100.0 * static_cast<double>(report.correct) /
                    static_cast<double>(report.n);
  if (!all_entropies.empty()) {
    double sum = 0.0;
    for (double h : all_entropies) {
      sum += h;
    }
    report.mean_entropy = sum / static_cast<double>(all_entropies.size());
    std::sort(all_entropies.begin(), all_entropies.end());
    const size_t idx = static_cast<size_t>(std::max<int64_t>(
        0, static_cast<int64_t>(
               std::ceil(0.95 * static_cast<double>(all_entropies.size()))) - 1));
    report.p95_entropy = all_entropies[idx];
  }
  return report;
}

}  // namespace ttsv
