#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ttsv/model.hpp"
#include "ttsv/steering.hpp"
#include "ttsv/tasks.hpp"

namespace ttsv {

// ---- first-layer bias identity ------------------------------------------------

struct BiasIdentityRow {
  int64_t position = 0;
  double alpha = 0.0;     // attention mass on the prefix vector
  double residual = 0.0;  // || t'_i - ((1-a_i) t_i + a_i Wv p) ||_2
};

struct BiasIdentityReport {
  std::vector<BiasIdentityRow> rows;
  double max_residual = 0.0;
};

/// Bare single-head attention (no position encoding, normalization or
/// residual): computes t_i without the prefix and t'_i with the prefix at
/// position 0 straight from the score/softmax/value definitions and reports
/// the residual against the linear-interpolation form. mask_prefix forces the
/// prefix score to -inf (alpha -> 0 degenerate check).
BiasIdentityReport check_first_layer_identity(const Tensor& wq, const Tensor& wk,
                                              const Tensor& wv, const Tensor& content,
                                              const Tensor& prefix_vec,
                                              bool mask_prefix = false);

/// Bare-attention outputs with the prefix present, alongside the alphas;
/// exposed for the layer-0 shift oracle.
struct BareAttentionOut {
  std::vector<std::vector<double>> with_prefix;     // t'_i
  std::vector<std::vector<double>> without_prefix;  // t_i
  std::vector<double> alpha;
  std::vector<double> bias_dir;  // b = Wv p
};
BareAttentionOut bare_attention(const Tensor& wq, const Tensor& wk, const Tensor& wv,
                                const Tensor& content, const Tensor& prefix_vec,
                                bool mask_prefix = false);

// ---- layer-0 attention rescaling ----------------------------------------------

struct RescalingReport {
  /// max over heads and content pairs of |A'_ij - (1-alpha_i) A_ij|.
  double max_deviation = 0.0;
  /// max over heads and content rows of |sum_j A'_ij - (1 - alpha_i)|.
  double max_mass_deviation = 0.0;
};

/// Compares traces of the same content run with and without a prefix at the
/// given layer. alpha_i is the total attention mass on prefix columns. Exact
/// (<= ~1e-9) only at layer 0 with pos_encoding=none.
RescalingReport check_attention_rescaling(const ForwardTrace& without, const ForwardTrace& with,
                                          int64_t prefix_len, int64_t layer = 0);

// ---- depth profile of the induced shift ----------------------------------------

struct LayerShiftProfile {
  /// index 0: embedding output; index l: post-block state of layer l.
  std::vector<double> mean;
  std::vector<double> stddev;
};

LayerShiftProfile layer_shift_profile(const Model& model, const Tensor& prefix,
                                      const std::vector<std::vector<int32_t>>& prompts);

// ---- entropy distribution -------------------------------------------------------

struct EntropyStats {
  std::vector<double> entropies;
  std::vector<int64_t> hist;  // bins of width bin_width covering [0, ln vocab]
  double bin_width = 0.1;
  double mean = 0.0;
  double p95 = 0.0;
  int64_t token_count = 0;
};

/// Greedy decodes the dataset (steered when prefix is defined) and bins the
/// per-token raw-distribution entropies.
EntropyStats entropy_histogram(const Model& model, const Tensor& prefix,
                               const std::vector<std::vector<int32_t>>& prompts,
                               const GenerationParams& params);

// ---- activation geometry ---------------------------------------------------------

struct Pca2 {
  std::vector<double> mean;
  std::vector<double> comp1, comp2;
  double var1 = 0.0, var2 = 0.0;
};

/// Two-component PCA of row vectors; the sign convention makes each
/// component's largest-magnitude loading positive.
Pca2 pca_fit_2d(const std::vector<std::vector<double>>& points);
std::pair<double, double> pca_project(const Pca2& pca, std::span<const double> point);

struct ActivationRow {
  std::string sample_id;
  std::string label;
  std::vector<double> activation;  // mean-pooled final hidden state
  double pc1 = 0.0, pc2 = 0.0;
};

struct ActivationExport {
  std::vector<ActivationRow> rows;
  Pca2 pca;
};

struct LabeledSet {
  std::string label;
  Tensor prefix;  // undefined = baseline
  std::vector<std::vector<int32_t>> prompts;
};

/// Mean-pooled final-layer activations per sample (content positions only)
/// with a joint 2-component PCA projection.
ActivationExport export_activations(const Model& model, const std::vector<LabeledSet>& sets);

// ---- transfer and length sweep -----------------------------------------------------

struct TransferReport {
  std::string from_task;
  std::string to_task;
  double baseline_accuracy = 0.0;
  double ood_accuracy = 0.0;
  std::optional<double> id_accuracy;
  double baseline_mean_entropy = 0.0;
  double ood_mean_entropy = 0.0;
};

/// Applies a vector adapted on task A to task B's dataset.
TransferReport transfer_eval(const Model& model, const Tensor& steering_from_a,
                             const std::vector<TaskInstance>& dataset_b, const Tokenizer& tok,
                             const GenerationParams& eval_params,
                             const Tensor* steering_id = nullptr);

struct SweepRow {
  int64_t length = 0;
  double accuracy = 0.0;
  /// NaN for the L=0 control row (nothing is optimized).
  double final_loss = 0.0;
};

/// Independent adaptation per length with a fresh seed-derived init, then
/// greedy evaluation. Length 0 rows evaluate the baseline.
std::vector<SweepRow> length_sweep(const Model& model,
                                   const std::vector<TaskInstance>& adapt_set,
                                   const std::vector<TaskInstance>& eval_set,
                                   const std::vector<int64_t>& lengths,
                                   const AdaptationConfig& base_cfg,
                                   const GenerationParams& train_gen,
                                   const GenerationParams& eval_gen, const Tokenizer& tok);

}  // namespace ttsv
