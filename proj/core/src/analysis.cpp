#include "ttsv/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <Eigen/Dense>

namespace ttsv {

namespace {

std::vector<double> matvec(const Tensor& w, std::span<const double> x) {
  // w [d_out×d_in] times column vector x.
  const int64_t r = w.rows(), c = w.cols();
  if (static_cast<int64_t>(x.size()) != c) {
    throw std::invalid_argument("matvec: dimension mismatch");
  }
  std::vector<double> y(static_cast<size_t>(r), 0.0);
  const auto wd = w.data();
  for (int64_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      s += wd[i * c + j] * x[static_cast<size_t>(j)];
    }
    y[static_cast<size_t>(i)] = s;
  }
  return y;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    s += a[i] * b[i];
  }
  return s;
}

}  // namespace

BareAttentionOut bare_attention(const Tensor& wq, const Tensor& wk, const Tensor& wv,
                                const Tensor& content, const Tensor& prefix_vec,
                                bool mask_prefix) {
  const int64_t n = content.rows();
  const int64_t d = content.cols();
  if (n == 0) {
    throw std::invalid_argument("bare_attention: no content positions");
  }
  if (prefix_vec.numel() != d) {
    throw std::invalid_argument("bare_attention: prefix width mismatch");
  }
  const int64_t dk = wq.rows();
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

  // Projected vectors; weights act as w * x with x a column vector.
  std::vector<std::vector<double>> q(static_cast<size_t>(n)), k(static_cast<size_t>(n)),
      v(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    std::vector<double> xi(content.data().begin() + i * d, content.data().begin() + (i + 1) * d);
    q[static_cast<size_t>(i)] = matvec(wq, xi);
    k[static_cast<size_t>(i)] = matvec(wk, xi);
    v[static_cast<size_t>(i)] = matvec(wv, xi);
  }
  std::vector<double> p(prefix_vec.data().begin(), prefix_vec.data().end());
  const std::vector<double> kp = matvec(wk, p);
  const std::vector<double> vp = matvec(wv, p);

  BareAttentionOut out;
  out.bias_dir = vp;
  const int64_t dv = wv.rows();
  out.with_prefix.assign(static_cast<size_t>(n), std::vector<double>(static_cast<size_t>(dv)));
  out.without_prefix.assign(static_cast<size_t>(n),
                            std::vector<double>(static_cast<size_t>(dv)));
  out.alpha.assign(static_cast<size_t>(n), 0.0);

  for (int64_t i = 0; i < n; ++i) {
    // Scores against content keys (full bidirectional attention: this is the
    // derivation's bare setting, not the causal model).
    std::vector<double> scores(static_cast<size_t>(n));
    for (int64_t j = 0; j < n; ++j) {
      scores[static_cast<size_t>(j)] =
          dot(q[static_cast<size_t>(i)], k[static_cast<size_t>(j)]) * inv_sqrt_dk;
    }
    const double score_p = mask_prefix ? -std::numeric_limits<double>::infinity()
                                       : dot(q[static_cast<size_t>(i)], kp) * inv_sqrt_dk;

    // Without prefix.
    double mx = *std::max_element(scores.begin(), scores.end());
    double z = 0.0;
    std::vector<double> a(static_cast<size_t>(n));
    for (int64_t j = 0; j < n; ++j) {
      a[static_cast<size_t>(j)] = std::exp(scores[static_cast<size_t>(j)] - mx);
      z += a[static_cast<size_t>(j)];
    }
    for (int64_t j = 0; j < n; ++j) {
      const double w = a[static_cast<size_t>(j)] / z;
      for (int64_t c = 0; c < dv; ++c) {
        out.without_prefix[static_cast<size_t>(i)][static_cast<size_t>(c)] +=
            w * v[static_cast<size_t>(j)][static_cast<size_t>(c)];
      }
    }

    // With prefix at position 0.
    double mx2 = std::max(mx, score_p);
    double zp = std::exp(score_p - mx2);
    double z2 = zp;
    for (int64_t j = 0; j < n; ++j) {
      z2 += std::exp(scores[static_cast<size_t>(j)] - mx2);
    }
    out.alpha[static_cast<size_t>(i)] = zp / z2;
    for (int64_t c = 0; c < dv; ++c) {
      out.with_prefix[static_cast<size_t>(i)][static_cast<size_t>(c)] =
          (zp / z2) * vp[static_cast<size_t>(c)];
    }
    for (int64_t j = 0; j < n; ++j) {
      const double w = std::exp(scores[static_cast<size_t>(j)] - mx2) / z2;
      for (int64_t c = 0; c < dv; ++c) {
        out.with_prefix[static_cast<size_t>(i)][static_cast<size_t>(c)] +=
            w * v[static_cast<size_t>(j)][static_cast<size_t>(c)];
      }
    }
  }
  return out;
}

BiasIdentityReport check_first_layer_identity(const Tensor& wq, const Tensor& wk,
                                              const Tensor& wv, const Tensor& content,
                                              const Tensor& prefix_vec, bool mask_prefix) {
  BareAttentionOut bare = bare_attention(wq, wk, wv, content, prefix_vec, mask_prefix);
  const int64_t n = content.rows();
  const int64_t dv = static_cast<int64_t>(bare.bias_dir.size());
  BiasIdentityReport report;
  for (int64_t i = 0; i < n; ++i) {
    const double alpha = bare.alpha[static_cast<size_t>(i)];
    double sq = 0.0;
    for (int64_t c = 0; c < dv; ++c) {
      const double predicted =
          (1.0 - alpha) * bare.without_prefix[static_cast<size_t>(i)][static_cast<size_t>(c)] +
          alpha * bare.bias_dir[static_cast<size_t>(c)];
      const double diff =
          bare.with_prefix[static_cast<size_t>(i)][static_cast<size_t>(c)] - predicted;
      sq += diff * diff;
    }
    BiasIdentityRow row{i, alpha, std::sqrt(sq)};
    report.max_residual = std::max(report.max_residual, row.residual);
    report.rows.push_back(row);
  }
  return report;
}

RescalingReport check_attention_rescaling(const ForwardTrace& without, const ForwardTrace& with,
                                          int64_t prefix_len, int64_t layer) {
  if (layer < 0 || layer >= static_cast<int64_t>(without.attention.size()) ||
      layer >= static_cast<int64_t>(with.attention.size())) {
    throw std::invalid_argument("check_attention_rescaling: layer out of range");
  }
  const auto& heads_without = without.attention[static_cast<size_t>(layer)];
  const auto& heads_with = with.attention[static_cast<size_t>(layer)];
  if (heads_without.size() != heads_with.size()) {
    throw std::invalid_argument("check_attention_rescaling: head count mismatch");
  }
  RescalingReport report;
  for (size_t h = 0; h < heads_without.size(); ++h) {
    const Tensor& a = heads_without[h];
    const Tensor& ap = heads_with[h];
    const int64_t n = a.rows();
    if (ap.rows() != n + prefix_len) {
      throw std::invalid_argument("check_attention_rescaling: content length mismatch");
    }
    for (int64_t i = 0; i < n; ++i) {
      double alpha = 0.0;
      for (int64_t j = 0; j < prefix_len; ++j) {
        alpha += ap.at(prefix_len + i, j);
      }
      double mass = 0.0;
      for (int64_t j = 0; j < n; ++j) {
        const double expected = (1.0 - alpha) * a.at(i, j);
        const double actual = ap.at(prefix_len + i, prefix_len + j);
        report.max_deviation = std::max(report.max_deviation, std::abs(actual - expected));
        mass += actual;
      }
      report.max_mass_deviation =
          std::max(report.max_mass_deviation, std::abs(mass - (1.0 - alpha)));
    }
  }
  return report;
}

LayerShiftProfile layer_shift_profile(const Model& model, const Tensor& prefix,
                                      const std::vector<std::vector<int32_t>>& prompts) {
  if (prompts.empty()) {
    throw std::invalid_argument("layer_shift_profile: empty dataset");
  }
  NoGradGuard no_grad;
  const int64_t levels = model.config().n_layers + 1;
  std::vector<std::vector<double>> norms(static_cast<size_t>(levels));
  for (const auto& prompt : prompts) {
    ForwardTrace base, steered;
    (void)model.forward_with_prefix(Tensor{}, prompt, &base);
    (void)model.forward_with_prefix(prefix, prompt, &steered);
    const int64_t prefix_len = prefix.defined() ? prefix.rows() : 0;
    const int64_t t_len = static_cast<int64_t>(prompt.size());
    for (int64_t level = 0; level < levels; ++level) {
      const Tensor& hb = base.hidden[static_cast<size_t>(level)];
      const Tensor& hs = steered.hidden[static_cast<size_t>(level)];
      const int64_t d = hb.cols();
      for (int64_t i = 0; i < t_len; ++i) {
        double sq = 0.0;
        for (int64_t c = 0; c < d; ++c) {
          const double diff = hs.at(prefix_len + i, c) - hb.at(i, c);
          sq += diff * diff;
        }
        norms[static_cast<size_t>(level)].push_back(std::sqrt(sq));
      }
    }
  }
  LayerShiftProfile profile;
  for (const auto& level : norms) {
    double sum = 0.0;
    for (double x : level) {
      sum += x;
    }
    const double mean = sum / static_cast<double>(level.size());
    double var = 0.0;
    for (double x : level) {
      var += (x - mean) * (x - mean);
    }
    profile.mean.push_back(mean);
    profile.stddev.push_back(std::sqrt(var / static_cast<double>(level.size())));
  }
  return profile;
}

EntropyStats entropy_histogram(const Model& model, const Tensor& prefix,
                               const std::vector<std::vector<int32_t>>& prompts,
                               const GenerationParams& params) {
  if (prompts.empty()) {
    throw std::invalid_argument("entropy_histogram: empty dataset");
  }
  std::vector<Rollout> rollouts = greedy_decode(model, prefix, prompts, params);
  EntropyStats stats;
  const double h_max = std::log(static_cast<double>(model.config().vocab_size));
  const int64_t n_bins = static_cast<int64_t>(std::ceil(h_max / stats.bin_width)) + 1;
  stats.hist.assign(static_cast<size_t>(n_bins), 0);
  for (const auto& r : rollouts) {
    for (double h : r.entropies) {
      stats.entropies.push_back(h);
      int64_t bin = static_cast<int64_t>(h / stats.bin_width);
      bin = std::clamp<int64_t>(bin, 0, n_bins - 1);
      ++stats.hist[static_cast<size_t>(bin)];
    }
  }
  stats.token_count = static_cast<int64_t>(stats.entropies.size());
  if (stats.token_count > 0) {
    double sum = 0.0;
    for (double h : stats.entropies) {
      sum += h;
    }
    stats.mean = sum / static_cast<double>(stats.token_count);
    std::vector<double> sorted = stats.entropies;
    std::sort(sorted.begin(), sorted.end());
    const size_t idx = static_cast<size_t>(std::max<int64_t>(
        0,
        static_cast<int64_t>(std::ceil(0.95 * static_cast<double>(sorted.size()))) - 1));
    stats.p95 = sorted[idx];
  }
  return stats;
}

// ---- PCA ---------------------------------------------------------------------------

Pca2 pca_fit_2d(const std::vector<std::vector<double>>& points) {
  if (points.size() < 2) {
    throw std::invalid_argument("pca_fit_2d: need at least 2 points");
  }
  const size_t n = points.size();
  const size_t d = points[0].size();
  Pca2 pca;
  pca.mean.assign(d, 0.0);
  for (const auto& p : points) {
    if (p.size() != d) {
      throw std::invalid_argument("pca_fit_2d: ragged points");
    }
    for (size_t j = 0; j < d; ++j) {
      pca.mean[j] += p[j];
    }
  }
  for (double& m : pca.mean) {
    m /= static_cast<double>(n);
  }

  Eigen::MatrixXd centered(n, d);
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < d; ++j) {
      centered(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          points[i][j] - pca.mean[j];
    }
  }
  Eigen::MatrixXd cov =
      (centered.transpose() * centered) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) {
    throw std::runtime_error("pca_fit_2d: eigendecomposition failed");
  }
  // Eigenvalues ascend; take the top two.
  const Eigen::Index last = static_cast<Eigen::Index>(d) - 1;
  auto extract = [&](Eigen::Index col) {
    std::vector<double> v(d);
    for (size_t j = 0; j < d; ++j) {
      v[j] = solver.eigenvectors()(static_cast<Eigen::Index>(j), col);
    }
    // Sign convention: the largest-magnitude loading is positive.
    size_t arg = 0;
    for (size_t j = 1; j < d; ++j) {
      if (std::abs(v[j]) > std::abs(v[arg])) {
        arg = j;
      }
    }
    if (v[arg] < 0.0) {
      for (double& x : v) {
        x = -x;
      }
    }
    return v;
  };
  pca.comp1 = extract(last);
  pca.var1 = solver.eigenvalues()(last);
  if (d >= 2) {
    pca.comp2 = extract(last - 1);
    pca.var2 = solver.eigenvalues()(last - 1);
  } else {
    pca.comp2.assign(d, 0.0);
    pca.var2 = 0.0;
  }
  return pca;
}

std::pair<double, double> pca_project(const Pca2& pca, std::span<const double> point) {
  if (point.size() != pca.mean.size()) {
    throw std::invalid_argument("pca_project: dimension mismatch");
  }
  double a = 0.0, b = 0.0;
  for (size_t j = 0; j < point.size(); ++j) {
    const double x = point[j] - pca.mean[j];
    a += x * pca.comp1[j];
    b += x * pca.comp2[j];
  }
  return {a, b};
}

ActivationExport export_activations(const Model& model, const std::vector<LabeledSet>& sets) {
  if (sets.empty()) {
    throw std::invalid_argument("export_activations: no labeled sets");
  }
  NoGradGuard no_grad;
  ActivationExport result;
  std::vector<std::vector<double>> points;
  for (const auto& set : sets) {
    const int64_t prefix_len = set.prefix.defined() ? set.prefix.rows() : 0;
    for (size_t s = 0; s < set.prompts.size(); ++s) {
      ForwardTrace trace;
      (void)model.forward_with_prefix(set.prefix, set.prompts[s], &trace);
      const Tensor& fh = trace.final_hidden;
      const int64_t d = fh.cols();
      const int64_t t_len = static_cast<int64_t>(set.prompts[s].size());
      std::vector<double> pooled(static_cast<size_t>(d), 0.0);
      for (int64_t i = 0; i < t_len; ++i) {
        for (int64_t c = 0; c < d; ++c) {
          pooled[static_cast<size_t>(c)] += fh.at(prefix_len + i, c);
        }
      }
      for (double& x : pooled) {
        x /= static_cast<double>(t_len);
      }
      ActivationRow row;
      row.sample_id = set.label + "/" + std::to_string(s);
      row.label = set.label;
      row.activation = pooled;
      points.push_back(std::move(pooled));
      result.rows.push_back(std::move(row));
    }
  }
  if (points.size() < 2) {
    throw std::invalid_argument("export_activations: need at least 2 samples for the PCA");
  }
  result.pca = pca_fit_2d(points);
  for (auto& row : result.rows) {
    auto [a, b] = pca_project(result.pca, row.activation);
    row.pc1 = a;
    row.pc2 = b;
  }
  return result;
}

// ---- transfer / sweep -----------------------------------------------------------------

TransferReport transfer_eval(const Model& model, const Tensor& steering_from_a,
                             const std::vector<TaskInstance>& dataset_b, const Tokenizer& tok,
                             const GenerationParams& eval_params, const Tensor* steering_id) {
  TransferReport report;
  EvalReport base = evaluate_accuracy(model, Tensor{}, dataset_b, tok, eval_params);
  EvalReport ood = evaluate_accuracy(model, steering_from_a, dataset_b, tok, eval_params);
  report.baseline_accuracy = base.accuracy;
  report.baseline_mean_entropy = base.mean_entropy;
  report.ood_accuracy = ood.accuracy;
  report.ood_mean_entropy = ood.mean_entropy;
  if (steering_id != nullptr) {
    report.id_accuracy =
        evaluate_accuracy(model, *steering_id, dataset_b, tok, eval_params).accuracy;
  }
  return report;
}

std::vector<SweepRow> length_sweep(const Model& model,
                                   const std::vector<TaskInstance>& adapt_set,
                                   const std::vector<TaskInstance>& eval_set,
                                   const std::vector<int64_t>& lengths,
                                   const AdaptationConfig& base_cfg,
                                   const GenerationParams& train_gen,
                                   const GenerationParams& eval_gen, const Tokenizer& tok) {
  if (lengths.empty()) {
    throw std::invalid_argument("length_sweep: no lengths");
  }
  std::vector<std::vector<int32_t>> adapt_prompts;
  for (const auto& inst : adapt_set) {
    adapt_prompts.push_back(prompt_sequence(tok, inst));
  }
  std::vector<SweepRow> rows;
  for (int64_t length : lengths) {
    SweepRow row;
    row.length = length;
    if (length == 0) {
      row.accuracy = evaluate_accuracy(model, Tensor{}, eval_set, tok, eval_gen).accuracy;
      row.final_loss = std::numeric_limits<double>::quiet_NaN();
    } else {
      AdaptationConfig cfg = base_cfg;
      cfg.length = length;
      cfg.seed = hash_stream(base_cfg.seed, "sweep", static_cast<uint64_t>(length));
      AdaptResult r = adapt(model, adapt_prompts, cfg, train_gen);
      row.accuracy =
          evaluate_accuracy(model, r.steering.values, eval_set, tok, eval_gen).accuracy;
      row.final_loss = r.log.final_loss();
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace ttsv
