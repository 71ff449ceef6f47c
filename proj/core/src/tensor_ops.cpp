#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "ttsv/tensor.hpp"

namespace ttsv {

namespace detail {
Tensor wrap(std::shared_ptr<TensorImpl> impl) { return Tensor(std::move(impl)); }
}  // namespace detail

namespace {

using Impl = std::shared_ptr<detail::TensorImpl>;

Impl make_impl(Shape shape, std::vector<double> data) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return impl;
}

void ensure_grad(const Impl& t) {
  if (t->grad.empty()) {
    t->grad.assign(t->data.size(), 0.0);
  }
}

void accum(const Impl& t, const double* g, size_t n) {
  if (!t->requires_grad) {
    return;
  }
  ensure_grad(t);
  for (size_t i = 0; i < n; ++i) {
    t->grad[i] += g[i];
  }
}

/// Builds the output tensor and records the node when gradients are live.
/// `bwd` receives (inputs, output) and must accumulate into input grads.
Tensor finish_op(OpKind kind, Shape shape, std::vector<double> data,
                 const std::vector<Tensor>& inputs,
                 std::function<void(const std::vector<Impl>&, const Impl&)> bwd) {
  Impl out = make_impl(std::move(shape), std::move(data));
  bool any_rg = false;
  for (const auto& t : inputs) {
    any_rg = any_rg || t.requires_grad();
  }
  if (any_rg && grad_enabled()) {
    Tape* tape = Tape::active();
    if (tape == nullptr) {
      throw std::logic_error(
          "differentiable op on a requires_grad tensor outside any Tape; "
          "wrap inference in NoGradGuard or create a Tape");
    }
    out->requires_grad = true;
    std::vector<Impl> in_impls;
    in_impls.reserve(inputs.size());
    for (const auto& t : inputs) {
      in_impls.push_back(t.impl());
    }
    Tape::Node node;
    node.kind = kind;
    node.inputs = in_impls;
    node.output = out;
    node.backward = [in_impls, out, f = std::move(bwd)]() { f(in_impls, out); };
    out->tape = tape;
    out->node = tape->record(std::move(node));
  }
  return detail::wrap(std::move(out));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

void dgemm_raw(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, const double* a,
               int64_t lda, const double* b, int64_t ldb, double beta, double* c) {
  if (m == 0 || n == 0) {
    return;
  }
  if (k == 0) {
    if (beta == 0.0) {
      std::fill(c, c + m * n, 0.0);
    }
    return;
  }
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), 1.0, a, static_cast<int>(lda), b, static_cast<int>(ldb), beta,
              c, static_cast<int>(n));
}

}  // namespace

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] += bd[i];
  }
  return finish_op(OpKind::kAdd, a.shape(), std::move(out), {a, b},
                   [](const std::vector<Impl>& in, const Impl& o) {
                     accum(in[0], o->grad.data(), o->grad.size());
                     accum(in[1], o->grad.data(), o->grad.size());
                   });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] -= bd[i];
  }
  return finish_op(OpKind::kSub, a.shape(), std::move(out), {a, b},
                   [](const std::vector<Impl>& in, const Impl& o) {
                     accum(in[0], o->grad.data(), o->grad.size());
                     if (in[1]->requires_grad) {
                       ensure_grad(in[1]);
                       for (size_t i = 0; i < o->grad.size(); ++i) {
                         in[1]->grad[i] -= o->grad[i];
                       }
                     }
                   });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto ad = a.data();
  const auto bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = ad[i] * bd[i];
  }
  return finish_op(OpKind::kMul, a.shape(), std::move(out), {a, b},
                   [](const std::vector<Impl>& in, const Impl& o) {
                     if (in[0]->requires_grad) {
                       ensure_grad(in[0]);
                       for (size_t i = 0; i < o->grad.size(); ++i) {
                         in[0]->grad[i] += o->grad[i] * in[1]->data[i];
                       }
                     }
                     if (in[1]->requires_grad) {
                       ensure_grad(in[1]);
                       for (size_t i = 0; i < o->grad.size(); ++i) {
                         in[1]->grad[i] += o->grad[i] * in[0]->data[i];
                       }
                     }
                   });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& x : out) {
    x *= c;
  }
  return finish_op(OpKind::kScale, a.shape(), std::move(out), {a},
                   [c](const std::vector<Impl>& in, const Impl& o) {
                     if (in[0]->requires_grad) {
                       ensure_grad(in[0]);
                       for (size_t i = 0; i < o->grad.size(); ++i) {
                         in[0]->grad[i] += c * o->grad[i];
                       }
                     }
                   });
}

// ---- matmul -----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  const int64_t ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  const int64_t m = trans_a ? ac : ar;
  const int64_t ka = trans_a ? ar : ac;
  const int64_t kb = trans_b ? bc : br;
  const int64_t n = trans_b ? br : bc;
  if (ka != kb) {
    throw std::invalid_argument("matmul: inner dimension mismatch");
  }
  std::vector<double> out(static_cast<size_t>(m * n), 0.0);
  dgemm_raw(trans_a, trans_b, m, n, ka, a.data().data(), ac, b.data().data(), bc, 0.0,
            out.data());
  return finish_op(
      OpKind::kMatmul, Shape{m, n}, std::move(out), {a, b},
      [trans_a, trans_b, m, n, ka, ar, ac, br, bc](const std::vector<Impl>& in, const Impl& o) {
        const double* A = in[0]->data.data();
        const double* B = in[1]->data.data();
        const double* G = o->grad.data();
        (void)ar;
        (void)br;
        if (in[0]->requires_grad) {
          ensure_grad(in[0]);
          double* dA = in[0]->grad.data();
          if (!trans_a) {
            // dA = G * op(B)^T
            dgemm_raw(false, !trans_b, m, ka, n, G, n, B, bc, 1.0, dA);
          } else {
            // A stored (ka x m): dA = op(B) * G^T with op(B) = B or B^T
            dgemm_raw(trans_b, true, ka, m, n, B, bc, G, n, 1.0, dA);
          }
        }
        if (in[1]->requires_grad) {
          ensure_grad(in[1]);
          double* dB = in[1]->grad.data();
          if (!trans_b) {
            // dB = op(A)^T * G
            dgemm_raw(!trans_a, false, ka, n, m, A, ac, G, n, 1.0, dB);
          } else {
            // B stored (n x ka): dB = G^T * op(A)
            dgemm_raw(true, trans_a, n, ka, m, G, n, A, ac, 1.0, dB);
          }
        }
      });
}

// ---- structure ops ----------------------------------------------------------

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("concat_rows: column mismatch");
  }
  const int64_t c = a.cols();
  std::vector<double> out;
  out.reserve(a.data().size() + b.data().size());
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  const int64_t ra = a.rows();
  return finish_op(OpKind::kConcatRows, Shape{ra + b.rows(), c}, std::move(out), {a, b},
                   [ra, c](const std::vector<Impl>& in, const Impl& o) {
                     const double* g = o->grad.data();
                     accum(in[0], g, static_cast<size_t>(ra * c));
                     accum(in[1], g + ra * c, in[1]->data.size());
                   });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) {
    throw std::invalid_argument("concat_cols: no inputs");
  }
  const int64_t r = parts[0].rows();
  int64_t total_c = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) {
      throw std::invalid_argument("concat_cols: row mismatch");
    }
    total_c += p.cols();
  }
  std::vector<double> out(static_cast<size_t>(r * total_c));
  std::vector<int64_t> offsets;
  int64_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const int64_t pc = p.cols();
    const auto pd = p.data();
    for (int64_t i = 0; i < r; ++i) {
      std::copy(pd.begin() + i * pc, pd.begin() + (i + 1) * pc, out.begin() + i * total_c + off);
    }
    off += pc;
  }
  return finish_op(OpKind::kConcatCols, Shape{r, total_c}, std::move(out), parts,
                   [r, total_c, offsets](const std::vector<Impl>& in, const Impl& o) {
                     for (size_t p = 0; p < in.size(); ++p) {
                       if (!in[p]->requires_grad) {
                         continue;
                       }
                       ensure_grad(in[p]);
                       const int64_t pc = in[p]->shape.size() == 2 ? in[p]->shape[1]
                                                                   : in[p]->shape[0];
                       for (int64_t i = 0; i < r; ++i) {
                         for (int64_t j = 0; j < pc; ++j) {
                           in[p]->grad[i * pc + j] += o->grad[i * total_c + offsets[p] + j];
                         }
                       }
                     }
                   });
}

Tensor concat_flat(const std::vector<Tensor>& parts) {
  if (parts.empty()) {
    throw std::invalid_argument("concat_flat: no inputs");
  }
  std::vector<double> out;
  std::vector<size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  const int64_t n = static_cast<int64_t>(out.size());
  return finish_op(OpKind::kConcatFlat, Shape{n}, std::move(out), parts,
                   [offsets](const std::vector<Impl>& in, const Impl& o) {
                     for (size_t p = 0; p < in.size(); ++p) {
                       accum(in[p], o->grad.data() + offsets[p], in[p]->data.size());
                     }
                   });
}

Tensor slice_rows(const Tensor& x, int64_t start, int64_t count) {
  const int64_t r = x.rows(), c = x.cols();
  if (start < 0 || count < 0 || start + count > r) {
    throw std::invalid_argument("slice_rows: range out of bounds");
  }
  std::vector<double> out(x.data().begin() + start * c, x.data().begin() + (start + count) * c);
  return finish_op(OpKind::kSliceRows, Shape{count, c}, std::move(out), {x},
                   [start, c](const std::vector<Impl>& in, const Impl& o) {
                     if (!in[0]->requires_grad) {
                       return;
                     }
                     ensure_grad(in[0]);
                     for (size_t i = 0; i < o->grad.size(); ++i) {
                       in[0]->grad[static_cast<size_t>(start * c) + i] += o->grad[i];
                     }
                   });
}

Tensor slice_cols(const Tensor& x, int64_t start, int64_t count) {
  const int64_t r = x.rows(), c = x.cols();
  if (start < 0 || count < 0 || start + count > c) {
    throw std::invalid_argument("slice_cols: range out of bounds");
  }
  std::vector<double> out(static_cast<size_t>(r * count));
  const auto xd = x.data();
  for (int64_t i = 0; i < r; ++i) {
    std::copy(xd.begin() + i * c + start, xd.begin() + i * c + start + count,
              out.begin() + i * count);
  }
  return finish_op(OpKind::kSliceCols, Shape{r, count}, std::move(out), {x},
                   [start, count, c, r](const std::vector<Impl>& in, const Impl& o) {
                     if (!in[0]->requires_grad) {
                       return;
                     }
                     ensure_grad(in[0]);
                     for (int64_t i = 0; i < r; ++i) {
                       for (int64_t j = 0; j < count; ++j) {
                         in[0]->grad[i * c + start + j] += o->grad[i * count + j];
                       }
                     }
                   });
}

Tensor gather_rows(const Tensor& table, const std::vector<int32_t>& ids) {
  const int64_t v = table.rows(), d = table.cols();
  for (int32_t id : ids) {
    if (id < 0 || id >= v) {
      throw std::invalid_argument("gather_rows: id out of range");
    }
  }
  std::vector<double> out(ids.size() * static_cast<size_t>(d));
  const auto td = table.data();
  for (size_t t = 0; t < ids.size(); ++t) {
    std::copy(td.begin() + ids[t] * d, td.begin() + (ids[t] + 1) * d, out.begin() + t * d);
  }
  return finish_op(OpKind::kGatherRows, Shape{static_cast<int64_t>(ids.size()), d},
                   std::move(out), {table},
                   [ids, d](const std::vector<Impl>& in, const Impl& o) {
                     if (!in[0]->requires_grad) {
                       return;
                     }
                     ensure_grad(in[0]);
                     for (size_t t = 0; t < ids.size(); ++t) {
                       for (int64_t j = 0; j < d; ++j) {
                         in[0]->grad[ids[t] * d + j] += o->grad[t * d + j];
                       }
                     }
                   });
}

// ---- normalization / activations ---------------------------------------------

Tensor rmsnorm_rows(const Tensor& x, const Tensor& gain, double eps) {
  const int64_t r = x.rows(), d = x.cols();
  if (gain.numel() != d) {
    throw std::invalid_argument("rmsnorm_rows: gain size mismatch");
  }
  std::vector<double> out(static_cast<size_t>(r * d));
  std::vector<double> inv_rms(static_cast<size_t>(r));
  const auto xd = x.data();
  const auto gd = gain.data();
  for (int64_t i = 0; i < r; ++i) {
    double ss = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      ss += xd[i * d + j] * xd[i * d + j];
    }
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    inv_rms[static_cast<size_t>(i)] = inv;
    for (int64_t j = 0; j < d; ++j) {
      out[i * d + j] = xd[i * d + j] * inv * gd[j];
    }
  }
  return finish_op(
      OpKind::kRmsNorm, x.shape(), std::move(out), {x, gain},
      [r, d, inv_rms](const std::vector<Impl>& in, const Impl& o) {
        const double* xd = in[0]->data.data();
        const double* gd = in[1]->data.data();
        const double* G = o->grad.data();
        if (in[0]->requires_grad) {
          ensure_grad(in[0]);
          for (int64_t i = 0; i < r; ++i) {
            const double inv = inv_rms[static_cast<size_t>(i)];
            double dot = 0.0;
            for (int64_t j = 0; j < d; ++j) {
              dot += G[i * d + j] * gd[j] * xd[i * d + j];
            }
            const double coef = inv * inv * inv * dot / static_cast<double>(d);
            for (int64_t j = 0; j < d; ++j) {
              in[0]->grad[i * d + j] += inv * G[i * d + j] * gd[j] - coef * xd[i * d + j];
            }
          }
        }
        if (in[1]->requires_grad) {
          ensure_grad(in[1]);
          for (int64_t i = 0; i < r; ++i) {
            const double inv = inv_rms[static_cast<size_t>(i)];
            for (int64_t j = 0; j < d; ++j) {
              in[1]->grad[j] += G[i * d + j] * xd[i * d + j] * inv;
            }
          }
        }
      });
}

Tensor silu(const Tensor& x) {
  std::vector<double> out(x.numel());
  std::vector<double> sig(x.numel());
  const auto xd = x.data();
  for (size_t i = 0; i < out.size(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-xd[i]));
    sig[i] = s;
    out[i] = xd[i] * s;
  }
  return finish_op(OpKind::kSilu, x.shape(), std::move(out), {x},
                   [sig](const std::vector<Impl>& in, const Impl& o) {
                     if (!in[0]->requires_grad) {
                       return;
                     }
                     ensure_grad(in[0]);
                     for (size_t i = 0; i < o->grad.size(); ++i) {
                       const double s = sig[i];
                       const double x = in[0]->data[i];
                       in[0]->grad[i] += o->grad[i] * s * (1.0 + x * (1.0 - s));
                     }
                   });
}

Tensor softmax_rows(const Tensor& x) {
  const int64_t r = x.rows(), c = x.cols();
  if (c == 0) {
    throw std::invalid_argument("softmax_rows: empty rows");
  }
  std::vector<double> out(static_cast<size_t>(r * c));
  const auto xd = x.data();
  for (int64_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < c; ++j) {
      mx = std::max(mx, xd[i * c + j]);
    }
    double z = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      const double e = std::exp(xd[i * c + j] - mx);
      out[i * c + j] = e;
      z += e;
    }
    for (int64_t j = 0; j < c; ++j) {
      out[i * c + j] /= z;
    }
  }
  return finish_op(OpKind::kSoftmaxRows, x.shape(), std::move(out), {x},
                   [r, c](const std::vector<Impl>& in, const Impl& o) {
                     if (!in[0]->requires_grad) {
                       return;
                     }
                     ensure_grad(in[0]);
                     const double* p = o->data.data();
                     const double* G = o->grad.data();
                     for (int64_t i = 0; i < r; ++i) {
                       double dot = 0.0;
                       for (int64_t j = 0; j < c; ++j) {
                         dot += G[i * c + j] * p[i * c + j];
                       }
                       for (int64_t j = 0; j < c; ++j) {
                         in[0]->grad[i * c + j] += p[i * c + j] * (G[i * c + j] - dot);
                       }
                     }
                   });
}

Tensor log_elem(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = std::log(xd[i]);
  }
  return finish_op(OpKind::kLog, x.shape(), std::move(out), {x},
                   [](const std::vector<Impl>& in, const Impl& o) {
                     if (!in[0]->requires_grad) {
                       return;
                     }
                     ensure_grad(in[0]);
                     for (size_t i = 0; i < o->grad.size(); ++i) {
                       in[0]->grad[i] += o->grad[i] / in[0]->data[i];
                     }
                   });
}

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) {
    s += v;
  }
  return finish_op(OpKind::kSumAll, Shape{}, {s}, {x},
                   [](const std::vector<Impl>& in, const Impl& o) {
                     if (!in[0]->requires_grad) {
                       return;
                     }
                     ensure_grad(in[0]);
                     const double g = o->grad[0];
                     for (double& v : in[0]->grad) {
                       v += g;
                     }
                   });
}

Tensor mean_all(const Tensor& x) {
  if (x.numel() == 0) {
    throw std::invalid_argument("mean_all: empty tensor");
  }
  double s = 0.0;
  for (double v : x.data()) {
    s += v;
  }
  const double n = static_cast<double>(x.numel());
  return finish_op(OpKind::kMeanAll, Shape{}, {s / n}, {x},
                   [n](const std::vector<Impl>& in, const Impl& o) {
                     if (!in[0]->requires_grad) {
                       return;
                     }
                     ensure_grad(in[0]);
                     const double g = o->grad[0] / n;
                     for (double& v : in[0]->grad) {
                       v += g;
                     }
                   });
}

Tensor masked_fill(const Tensor& x, const std::vector<uint8_t>& mask, double value) {
  if (static_cast<int64_t>(mask.size()) != x.numel()) {
    throw std::invalid_argument("masked_fill: mask size mismatch");
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  for (size_t i = 0; i < out.size(); ++i) {
    if (mask[i]) {
      out[i] = value;
    }
  }
  return finish_op(OpKind::kMaskedFill, x.shape(), std::move(out), {x},
                   [mask](const std::vector<Impl>& in, const Impl& o) {
                     if (!in[0]->requires_grad) {
                       return;
                     }
                     ensure_grad(in[0]);
                     for (size_t i = 0; i < o->grad.size(); ++i) {
                       if (!mask[i]) {
                         in[0]->grad[i] += o->grad[i];
                       }
                     }
                   });
}

Tensor rope_rows(const Tensor& x, int64_t head_dim, int64_t pos_offset, double base) {
  const int64_t r = x.rows(), c = x.cols();
  if (head_dim <= 0 || head_dim % 2 != 0 || c % head_dim != 0) {
    throw std::invalid_argument("rope_rows: head_dim must be even and divide cols");
  }
  const int64_t half = head_dim / 2;
  std::vector<double> freqs(static_cast<size_t>(half));
  for (int64_t i = 0; i < half; ++i) {
    freqs[static_cast<size_t>(i)] =
        std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
  }
  std::vector<double> out(static_cast<size_t>(r * c));
  const auto xd = x.data();
  for (int64_t t = 0; t < r; ++t) {
    const double pos = static_cast<double>(t + pos_offset);
    for (int64_t h = 0; h < c / head_dim; ++h) {
      for (int64_t i = 0; i < half; ++i) {
        const double angle = pos * freqs[static_cast<size_t>(i)];
        const double cs = std::cos(angle), sn = std::sin(angle);
        const int64_t j0 = t * c + h * head_dim + 2 * i;
        out[j0] = xd[j0] * cs - xd[j0 + 1] * sn;
        out[j0 + 1] = xd[j0] * sn + xd[j0 + 1] * cs;
      }
    }
  }
  return finish_op(OpKind::kRope, x.shape(), std::move(out), {x},
                   [r, c, head_dim, half, pos_offset, freqs](const std::vector<Impl>& in,
                                                             const Impl& o) {
                     if (!in[0]->requires_grad) {
                       return;
                     }
                     ensure_grad(in[0]);
                     // Rotation is orthogonal; backward rotates by -angle.
                     for (int64_t t = 0; t < r; ++t) {
                       const double pos = static_cast<double>(t + pos_offset);
                       for (int64_t h = 0; h < c / head_dim; ++h) {
                         for (int64_t i = 0; i < half; ++i) {
                           const double angle = pos * freqs[static_cast<size_t>(i)];
                           const double cs = std::cos(angle), sn = std::sin(angle);
                           const int64_t j0 = t * c + h * head_dim + 2 * i;
                           const double g0 = o->grad[j0], g1 = o->grad[j0 + 1];
                           in[0]->grad[j0] += g0 * cs + g1 * sn;
                           in[0]->grad[j0 + 1] += -g0 * sn + g1 * cs;
                         }
                       }
                     }
                   });
}

// ---- fused losses -------------------------------------------------------------

namespace {

// log-softmax of one row; returns log Z relative to max for reuse.
void row_log_softmax(const double* row, int64_t c, double* logp) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int64_t j = 0; j < c; ++j) {
    mx = std::max(mx, row[j]);
  }
  double z = 0.0;
  for (int64_t j = 0; j < c; ++j) {
    z += std::exp(row[j] - mx);
  }
  const double log_z = std::log(z);
  for (int64_t j = 0; j < c; ++j) {
    logp[j] = row[j] - mx - log_z;
  }
}

}  // namespace

Tensor entropy_rows(const Tensor& logits) {
  const int64_t r = logits.rows(), c = logits.cols();
  if (c < 1) {
    throw std::invalid_argument("entropy_rows: vocabulary dimension must be >= 1");
  }
  std::vector<double> out(static_cast<size_t>(r));
  std::vector<double> logp(static_cast<size_t>(r * c));
  const auto xd = logits.data();
  for (int64_t i = 0; i < r; ++i) {
    row_log_softmax(xd.data() + i * c, c, logp.data() + i * c);
    double h = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      const double lp = logp[i * c + j];
      h -= std::exp(lp) * lp;
    }
    out[static_cast<size_t>(i)] = h;
  }
  return finish_op(OpKind::kEntropyRows, Shape{r}, std::move(out), {logits},
                   [r, c, logp](const std::vector<Impl>& in, const Impl& o) {
                     if (!in[0]->requires_grad) {
                       return;
                     }
                     ensure_grad(in[0]);
                     // dH/dz_j = -p_j (log p_j + H)
                     for (int64_t i = 0; i < r; ++i) {
                       const double g = o->grad[static_cast<size_t>(i)];
                       const double h = o->data[static_cast<size_t>(i)];
                       for (int64_t j = 0; j < c; ++j) {
                         const double lp = logp[i * c + j];
                         in[0]->grad[i * c + j] += -g * std::exp(lp) * (lp + h);
                       }
                     }
                   });
}

Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int32_t>& targets) {
  const int64_t r = logits.rows(), c = logits.cols();
  if (static_cast<int64_t>(targets.size()) != r) {
    throw std::invalid_argument("cross_entropy_mean: target count mismatch");
  }
  int64_t active = 0;
  for (int32_t t : targets) {
    if (t >= 0) {
      if (t >= c) {
        throw std::invalid_argument("cross_entropy_mean: target out of range");
      }
      ++active;
    }
  }
  if (active == 0) {
    throw std::invalid_argument("cross_entropy_mean: no active targets");
  }
  std::vector<double> logp(static_cast<size_t>(r * c));
  const auto xd = logits.data();
  double loss = 0.0;
  for (int64_t i = 0; i < r; ++i) {
    row_log_softmax(xd.data() + i * c, c, logp.data() + i * c);
    if (targets[static_cast<size_t>(i)] >= 0) {
      loss -= logp[i * c + targets[static_cast<size_t>(i)]];
    }
  }
  loss /= static_cast<double>(active);
  return finish_op(
      OpKind::kCrossEntropyMean, Shape{}, {loss}, {logits},
      [r, c, active, targets, logp](const std::vector<Impl>& in, const Impl& o) {
        if (!in[0]->requires_grad) {
          return;
        }
        ensure_grad(in[0]);
        const double g = o->grad[0] / static_cast<double>(active);
        for (int64_t i = 0; i < r; ++i) {
          const int32_t t = targets[static_cast<size_t>(i)];
          if (t < 0) {
            continue;
          }
          for (int64_t j = 0; j < c; ++j) {
            double p = std::exp(logp[i * c + j]);
            in[0]->grad[i * c + j] += g * (p - (j == t ? 1.0 : 0.0));
          }
        }
      });
}

Tensor add_bias_rows(const Tensor& x, const Tensor& bias) {
  const int64_t r = x.rows(), c = x.cols();
  if (bias.numel() != c) {
    throw std::invalid_argument("add_bias_rows: bias size mismatch");
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto bd = bias.data();
  for (int64_t i = 0; i < r; ++i) {
    for (int64_t j = 0; j < c; ++j) {
      out[i * c + j] += bd[j];
    }
  }
  return finish_op(OpKind::kAddBiasRows, x.shape(), std::move(out), {x, bias},
                   [r, c](const std::vector<Impl>& in, const Impl& o) {
                     accum(in[0], o->grad.data(), o->grad.size());
                     if (in[1]->requires_grad) {
                       ensure_grad(in[1]);
                       for (int64_t i = 0; i < r; ++i) {
                         for (int64_t j = 0; j < c; ++j) {
                           in[1]->grad[j] += o->grad[i * c + j];
                         }
                       }
                     }
                   });
}

// ---- finite differences --------------------------------------------------------

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double h) {
  // Analytic gradient on a private tape.
  Tensor xg = x.clone();
  xg.set_requires_grad(true);
  std::vector<double> analytic(static_cast<size_t>(x.numel()), 0.0);
  {
    Tape tape;
    Tensor y = f(xg);
    if (y.numel() != 1) {
      throw std::invalid_argument("finite_diff_check: f must be scalar-valued");
    }
    if (!std::isfinite(y.value())) {
      throw std::runtime_error("finite_diff_check: non-finite function value");
    }
    tape.backward(y);
    if (xg.has_grad()) {
      auto g = xg.grad();
      analytic.assign(g.begin(), g.end());
    }
  }

  NoGradGuard no_grad;
  Tensor probe = x.clone();
  probe.set_requires_grad(false);
  auto pd = probe.mutable_data();
  double max_rel = 0.0;
  for (size_t i = 0; i < pd.size(); ++i) {
    const double orig = pd[i];
    pd[i] = orig + h;
    const double fp = f(probe).value();
    pd[i] = orig - h;
    const double fm = f(probe).value();
    pd[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw std::runtime_error("finite_diff_check: non-finite function value");
    }
    const double numeric = (fp - fm) / (2.0 * h);
    const double rel = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace ttsv
