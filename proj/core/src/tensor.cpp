#include "ttsv/tensor.hpp"

#include <cmath>
#include <cstdlib>
#include <stdexcept>

namespace ttsv {

namespace {

thread_local Tape* g_active_tape = nullptr;
thread_local bool g_grad_enabled = true;

// OpenBLAS threading is disabled before main() so repeated runs are
// bit-reproducible regardless of core count.
struct BlasSingleThread {
  BlasSingleThread() {
#ifndef _WIN32
    setenv("OPENBLAS_NUM_THREADS", "1", 0);
    setenv("OMP_NUM_THREADS", "1", 0);
#endif
  }
};
const BlasSingleThread g_blas_single_thread{};

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) {
      throw std::invalid_argument("Tensor: negative dimension");
    }
    n *= d;
  }
  return n;
}

}  // namespace

bool all_finite(std::span<const double> xs) {
  for (double x : xs) {
    if (!std::isfinite(x)) {
      return false;
    }
  }
  return true;
}

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  auto impl = std::make_shared<detail::TensorImpl>();
  int64_t n = shape_numel(shape);
  impl->shape = std::move(shape);
  impl->data.assign(static_cast<size_t>(n), value);
  return Tensor(std::move(impl));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
  int64_t n = shape_numel(shape);
  if (n != static_cast<int64_t>(data.size())) {
    throw std::invalid_argument("Tensor::from_data: shape/data size mismatch");
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from_data({}, {value}); }

Tensor Tensor::randn(Shape shape, Rng& rng) {
  Tensor t = zeros(std::move(shape));
  for (double& x : t.impl_->data) {
    x = rng.normal();
  }
  return t;
}

const Shape& Tensor::shape() const {
  if (!impl_) {
    throw std::logic_error("Tensor: undefined");
  }
  return impl_->shape;
}

int64_t Tensor::numel() const { return static_cast<int64_t>(impl_->data.size()); }

int64_t Tensor::rows() const {
  const Shape& s = shape();
  if (s.size() > 2) {
    throw std::invalid_argument("Tensor::rows: rank > 2");
  }
  if (s.empty()) {
    return 1;
  }
  return s.size() == 1 ? 1 : s[0];
}

int64_t Tensor::cols() const {
  const Shape& s = shape();
  if (s.size() > 2) {
    throw std::invalid_argument("Tensor::cols: rank > 2");
  }
  if (s.empty()) {
    return 1;
  }
  return s.size() == 1 ? s[0] : s[1];
}

std::span<const double> Tensor::data() const { return {impl_->data.data(), impl_->data.size()}; }

std::span<double> Tensor::mutable_data() { return {impl_->data.data(), impl_->data.size()}; }

double Tensor::value() const {
  if (numel() != 1) {
    throw std::invalid_argument("Tensor::value: not a scalar");
  }
  return impl_->data[0];
}

double Tensor::at(int64_t r, int64_t c) const {
  return impl_->data[static_cast<size_t>(r * cols() + c)];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool rg) {
  impl_->requires_grad = rg;
  return *this;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) {
    throw std::logic_error("Tensor::grad: no gradient present");
  }
  return {impl_->grad.data(), impl_->grad.size()};
}

void Tensor::zero_grad() {
  if (impl_) {
    impl_->grad.clear();
  }
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->requires_grad = impl_->requires_grad;
  return Tensor(std::move(impl));
}

// ---- Tape -------------------------------------------------------------------

Tape::Tape() {
  previous_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

int64_t Tape::record(Node node) {
  nodes_.push_back(std::move(node));
  return static_cast<int64_t>(nodes_.size()) - 1;
}

void Tape::backward(const Tensor& loss) {
  if (backward_done_) {
    throw std::logic_error("Tape::backward: called twice without a fresh tape");
  }
  if (!loss.defined() || loss.numel() != 1) {
    throw std::invalid_argument("Tape::backward: loss must be a scalar");
  }
  const auto& impl = loss.impl();
  if (impl->tape != this || impl->node < 0) {
    throw std::invalid_argument("Tape::backward: loss was not produced on this tape");
  }
  backward_done_ = true;
  impl->grad.assign(1, 1.0);
  for (int64_t i = impl->node; i >= 0; --i) {
    Node& node = nodes_[static_cast<size_t>(i)];
    if (!node.output->grad.empty()) {
      node.backward();
    }
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

}  // namespace ttsv
