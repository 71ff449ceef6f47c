#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ttsv/rng.hpp"

namespace ttsv {

using Shape = std::vector<int64_t>;

class Tape;

class Tensor;

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass deposits into it
  bool requires_grad = false;
  Tape* tape = nullptr;  // producing tape, if this is an op output
  int64_t node = -1;     // node index on that tape
};

Tensor wrap(std::shared_ptr<TensorImpl> impl);

}  // namespace detail

/// Dense row-major tensor of 64-bit floats with optional gradient tracking.
///
/// Values are immutable once produced by an op; leaves (parameters) may be
/// updated in place between tapes via mutable_data().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from_data(Shape shape, std::vector<double> data);
  static Tensor scalar(double value);
  /// I.i.d. standard normal entries.
  static Tensor randn(Shape shape, Rng& rng);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int64_t numel() const;
  /// 2-D helpers; rows()/cols() require rank <= 2 (rank-1 is a single row).
  int64_t rows() const;
  int64_t cols() const;

  std::span<const double> data() const;
  /// In-place access for leaves (parameter updates, test setup).
  std::span<double> mutable_data();
  double value() const;  // scalar tensors only
  double at(int64_t r, int64_t c) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool rg);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// Deep copy of values; the copy is a fresh leaf (no tape linkage).
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  friend class Tape;
  friend Tensor detail::wrap(std::shared_ptr<detail::TensorImpl>);
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

enum class OpKind {
  kAdd,
  kSub,
  kMul,
  kScale,
  kMatmul,
  kConcatRows,
  kConcatCols,
  kConcatFlat,
  kSliceRows,
  kSliceCols,
  kGatherRows,
  kRmsNorm,
  kSilu,
  kSoftmaxRows,
  kLog,
  kSumAll,
  kMeanAll,
  kMaskedFill,
  kRope,
  kEntropyRows,
  kCrossEntropyMean,
  kAddBiasRows,
};

/// Reverse-mode tape. Ops record onto the innermost live Tape of the current
/// thread whenever gradients are enabled and an input requires them.
/// Calling backward() twice on the same tape is an error.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Runs reverse accumulation from a scalar loss produced on this tape.
  /// Gradients are deposited only into tensors with requires_grad=true.
  void backward(const Tensor& loss);

  size_t size() const { return nodes_.size(); }
  bool backward_done() const { return backward_done_; }

  static Tape* active();

  struct Node {
    OpKind kind;
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    std::shared_ptr<detail::TensorImpl> output;
    std::function<void()> backward;
  };

  /// Internal: record an op node; returns its index.
  int64_t record(Node node);

 private:
  std::vector<Node> nodes_;
  Tape* previous_ = nullptr;
  bool backward_done_ = false;
};

/// Suspends gradient recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---- op inventory ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
/// a [m×k] (or its transpose) times b [k×n] (or its transpose).
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor concat_cols(const std::vector<Tensor>& parts);
/// Concatenates raw elements of all parts into one rank-1 tensor.
Tensor concat_flat(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, int64_t start, int64_t count);
Tensor slice_cols(const Tensor& x, int64_t start, int64_t count);
/// rows of `table` selected by ids; backward scatters into a dense table grad.
Tensor gather_rows(const Tensor& table, const std::vector<int32_t>& ids);
/// Row-wise RMS normalization with learned gain: y = x / rms(x) * gain.
Tensor rmsnorm_rows(const Tensor& x, const Tensor& gain, double eps);
Tensor silu(const Tensor& x);
/// Numerically stabilized row softmax (row-max subtraction).
Tensor softmax_rows(const Tensor& x);
Tensor log_elem(const Tensor& x);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
/// mask is row-major over x's elements; true entries are replaced by `value`.
Tensor masked_fill(const Tensor& x, const std::vector<uint8_t>& mask, double value);
/// Rotary position encoding applied per head to consecutive even/odd pairs.
/// Row index (+ pos_offset) is the position.
Tensor rope_rows(const Tensor& x, int64_t head_dim, int64_t pos_offset = 0,
                 double base = 10000.0);
/// Shannon entropy of softmax(row) for each row, in nats.
Tensor entropy_rows(const Tensor& logits);
/// Mean cross-entropy of softmax(logits[t]) against targets[t]; positions with
/// target -1 are excluded from the mean.
Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int32_t>& targets);
/// Adds a rank-1 bias (length = cols) to every row of x.
Tensor add_bias_rows(const Tensor& x, const Tensor& bias);

// ---- validation utilities --------------------------------------------------

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
/// for a scalar-valued function of one tensor. Throws if f evaluates to a
/// non-finite value anywhere.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double h);

bool all_finite(std::span<const double> xs);

}  // namespace ttsv
