#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "aclf/rng.hpp"

// Dense row-major tensors of 64-bit reals with reverse-mode autodiff on a
// linear tape. Every operation the model needs records an analytic backward
// rule; replaying the tape in reverse accumulates gradients into every tensor
// reachable from the loss. Single-threaded per tape.

namespace aclf {

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

struct TensorNode {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until backward touches this tensor

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

inline std::string shape_str(const std::vector<std::size_t>& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

}  // namespace detail

class Tensor {
 public:
  Tensor() : node_(std::make_shared<detail::TensorNode>()) {}

  explicit Tensor(std::vector<std::size_t> shape)
      : node_(std::make_shared<detail::TensorNode>()) {
    node_->shape = std::move(shape);
    node_->data.assign(count(node_->shape), 0.0);
  }

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : node_(std::make_shared<detail::TensorNode>()) {
    if (count(shape) != data.size())
      throw std::invalid_argument("tensor: data length " +
                                  std::to_string(data.size()) +
                                  " does not match shape " +
                                  detail::shape_str(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  bool defined() const { return !node_->shape.empty(); }
  const std::vector<std::size_t>& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }

  // Rank-1 tensors are treated as a single row where a matrix is expected.
  std::size_t rows() const { return rank() <= 1 ? 1 : node_->shape[0]; }
  std::size_t cols() const {
    if (rank() == 0) return 0;
    return rank() == 1 ? node_->shape[0] : node_->shape[1];
  }

  double* data() { return node_->data.data(); }
  const double* data() const { return node_->data.data(); }
  std::vector<double>& values() { return node_->data; }
  const std::vector<double>& values() const { return node_->data; }

  double at(std::size_t r, std::size_t c) const {
    return node_->data[r * cols() + c];
  }
  double& at(std::size_t r, std::size_t c) {
    return node_->data[r * cols() + c];
  }

  double item() const {
    if (size() != 1)
      throw std::invalid_argument("item(): tensor has " +
                                  std::to_string(size()) + " elements");
    return node_->data[0];
  }

  bool all_finite() const {
    for (double v : node_->data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  // Gradient buffer, allocated (zeroed) on first access.
  std::vector<double>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<double>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  // Deep copy of values; gradient buffer not carried over.
  Tensor clone() const { return Tensor(node_->shape, node_->data); }

  void fill_uniform(SplitMix64& rng, double lo, double hi) {
    for (double& v : node_->data) v = rng.uniform(lo, hi);
  }

  const std::shared_ptr<detail::TensorNode>& node() const { return node_; }

  static std::size_t count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t s : shape) {
      if (s == 0) throw std::invalid_argument("tensor: zero-length dimension");
      n *= s;
    }
    return shape.empty() ? 0 : n;
  }

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

// Records one entry per forward operation; backward() replays the entries in
// reverse order. Entries whose output never received a gradient are skipped
// (nothing downstream consumed them).
class Tape {
 public:
  struct Entry {
    const char* label;
    std::shared_ptr<detail::TensorNode> out;
    std::function<void()> backward;
  };

  bool enabled() const { return enabled_; }
  void set_enabled(bool on) { enabled_ = on; }

  void record(const char* label, const Tensor& out, std::function<void()> fn) {
    if (enabled_) entries_.push_back({label, out.node(), std::move(fn)});
  }

  std::size_t size() const { return entries_.size(); }

  void backward() {
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it)
      if (!it->out->grad.empty()) it->backward();
  }

  void clear() { entries_.clear(); }

  // First recorded output containing a non-finite value, for diagnostics.
  // Returns "" when the whole tape is finite.
  std::string first_nonfinite() const {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      for (double v : entries_[i].out->data) {
        if (!std::isfinite(v))
          return std::string(entries_[i].label) + " (tape index " +
                 std::to_string(i) + ")";
      }
    }
    return "";
  }

 private:
  std::vector<Entry> entries_;
  bool enabled_ = true;
};

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

inline void require_matrix(const Tensor& t, const char* who) {
  require(t.rank() == 2, std::string(who) + ": expected a matrix, got shape " +
                             shape_str(t.shape()));
}

using NodePtr = std::shared_ptr<TensorNode>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations. Each validates shapes, computes the forward value and records
// the backward rule. dA = dZ B^T, dB = A^T dZ for products; everything else
// follows from the chain rule on elementwise maps and reductions.
// ---------------------------------------------------------------------------

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul lhs");
  detail::require_matrix(b, "matmul rhs");
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t k2 = b.shape()[0], n = b.shape()[1];
  detail::require(k == k2, "matmul: inner dimensions disagree, " +
                               detail::shape_str(a.shape()) + " x " +
                               detail::shape_str(b.shape()));
  Tensor out({m, n});
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = pa[i * k + kk];
      const double* brow = pb + kk * n;
      double* orow = po + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  if (tape.enabled()) {
    auto an = a.node(), bn = b.node(), on = out.node();
    tape.record("matmul", out, [an, bn, on, m, k, n] {
      an->ensure_grad();
      bn->ensure_grad();
      const double* dz = on->grad.data();
      const double* pa = an->data.data();
      const double* pb = bn->data.data();
      double* da = an->grad.data();
      double* db = bn->grad.data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
          const double* dzrow = dz + i * n;
          const double* brow = pb + kk * n;
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += dzrow[j] * brow[j];
          da[i * k + kk] += acc;
        }
        const double* dzrow = dz + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
          const double av = pa[i * k + kk];
          double* dbrow = db + kk * n;
          for (std::size_t j = 0; j < n; ++j) dbrow[j] += av * dzrow[j];
        }
      }
    });
  }
  return out;
}

inline Tensor transpose(Tape& tape, const Tensor& x) {
  detail::require_matrix(x, "transpose");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = x.at(i, j);
  if (tape.enabled()) {
    auto xn = x.node(), on = out.node();
    tape.record("transpose", out, [xn, on, m, n] {
      xn->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          xn->grad[i * n + j] += on->grad[j * m + i];
    });
  }
  return out;
}

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(),
                  "add: shape mismatch " + detail::shape_str(a.shape()) +
                      " vs " + detail::shape_str(b.shape()));
  Tensor out(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] + pb[i];
  if (tape.enabled()) {
    auto an = a.node(), bn = b.node(), on = out.node();
    tape.record("add", out, [an, bn, on] {
      an->ensure_grad();
      bn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        an->grad[i] += on->grad[i];
        bn->grad[i] += on->grad[i];
      }
    });
  }
  return out;
}

// x[m x n] + bias[n], broadcast over rows.
inline Tensor add_rowvec(Tape& tape, const Tensor& x, const Tensor& bias) {
  detail::require_matrix(x, "add_rowvec");
  detail::require(bias.size() == x.shape()[1],
                  "add_rowvec: bias length " + std::to_string(bias.size()) +
                      " vs " + std::to_string(x.shape()[1]) + " columns");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out.at(i, j) = x.at(i, j) + bias.data()[j];
  if (tape.enabled()) {
    auto xn = x.node(), bn = bias.node(), on = out.node();
    tape.record("add_rowvec", out, [xn, bn, on, m, n] {
      xn->ensure_grad();
      bn->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          xn->grad[i * n + j] += on->grad[i * n + j];
          bn->grad[j] += on->grad[i * n + j];
        }
    });
  }
  return out;
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(),
                  "mul: shape mismatch " + detail::shape_str(a.shape()) +
                      " vs " + detail::shape_str(b.shape()));
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data()[i] = a.data()[i] * b.data()[i];
  if (tape.enabled()) {
    auto an = a.node(), bn = b.node(), on = out.node();
    tape.record("mul", out, [an, bn, on] {
      an->ensure_grad();
      bn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        an->grad[i] += on->grad[i] * bn->data[i];
        bn->grad[i] += on->grad[i] * an->data[i];
      }
    });
  }
  return out;
}

// scale * x + shift, elementwise.
inline Tensor affine(Tape& tape, const Tensor& x, double scale, double shift) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data()[i] = scale * x.data()[i] + shift;
  if (tape.enabled()) {
    auto xn = x.node(), on = out.node();
    tape.record("affine", out, [xn, on, scale] {
      xn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        xn->grad[i] += scale * on->grad[i];
    });
  }
  return out;
}

namespace detail {
// Exponent clamped so exp never overflows; the clamp error is below 1e-17.
inline double sigmoid_value(double x) {
  const double z = std::min(std::max(x, -40.0), 40.0);
  return 1.0 / (1.0 + std::exp(-z));
}
inline double logsigmoid_value(double x) {
  const double z = std::min(std::max(x, -40.0), 40.0);
  return z >= 0.0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z));
}
}  // namespace detail

inline Tensor sigmoid(Tape& tape, const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data()[i] = detail::sigmoid_value(x.data()[i]);
  if (tape.enabled()) {
    auto xn = x.node(), on = out.node();
    tape.record("sigmoid", out, [xn, on] {
      xn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        const double y = on->data[i];
        xn->grad[i] += on->grad[i] * y * (1.0 - y);
      }
    });
  }
  return out;
}

// log(sigmoid(x)), computed directly so long conditional chains never
// underflow. d/dx = sigmoid(-x).
inline Tensor logsigmoid(Tape& tape, const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data()[i] = detail::logsigmoid_value(x.data()[i]);
  if (tape.enabled()) {
    auto xn = x.node(), on = out.node();
    tape.record("logsigmoid", out, [xn, on] {
      xn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        xn->grad[i] += on->grad[i] * detail::sigmoid_value(-xn->data[i]);
    });
  }
  return out;
}

inline Tensor exp_elem(Tape& tape, const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data()[i] = std::exp(x.data()[i]);
  if (tape.enabled()) {
    auto xn = x.node(), on = out.node();
    tape.record("exp", out, [xn, on] {
      xn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        xn->grad[i] += on->grad[i] * on->data[i];
    });
  }
  return out;
}

// max(log(x), floor); entries at or below the floor get zero gradient.
inline Tensor log_clamped(Tape& tape, const Tensor& x, double floor_log) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.data()[i];
    out.data()[i] = v > 0.0 ? std::max(std::log(v), floor_log) : floor_log;
  }
  if (tape.enabled()) {
    auto xn = x.node(), on = out.node();
    tape.record("log_clamped", out, [xn, on, floor_log] {
      xn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        const double v = xn->data[i];
        if (v > 0.0 && std::log(v) > floor_log)
          xn->grad[i] += on->grad[i] / v;
      }
    });
  }
  return out;
}

// Row softmax with row-max subtraction for overflow safety.
inline Tensor softmax_rows(Tape& tape, const Tensor& x) {
  detail::require_matrix(x, "softmax_rows");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const double* xr = x.data() + i * n;
    double* yr = out.data() + i * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    for (std::size_t j = 0; j < n; ++j) yr[j] /= sum;
  }
  if (tape.enabled()) {
    auto xn = x.node(), on = out.node();
    tape.record("softmax_rows", out, [xn, on, m, n] {
      xn->ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        const double* y = on->data.data() + i * n;
        const double* dy = on->grad.data() + i * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
        double* dx = xn->grad.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
      }
    });
  }
  return out;
}

// Per-row normalization over the feature axis followed by the gamma/beta
// affine map. A single feature is rejected: its variance is identically zero.
inline Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma,
                         const Tensor& beta, double eps) {
  detail::require_matrix(x, "layer_norm");
  const std::size_t m = x.shape()[0], d = x.shape()[1];
  detail::require(d >= 2, "layer_norm: feature dimension must be >= 2, got " +
                              std::to_string(d));
  detail::require(gamma.size() == d && beta.size() == d,
                  "layer_norm: gamma/beta length mismatch");
  Tensor out({m, d});
  std::vector<double> xhat(m * d), inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xr = x.data() + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xr[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (xr[j] - mean) * is;
      out.at(i, j) = xhat[i * d + j] * gamma.data()[j] + beta.data()[j];
    }
  }
  if (tape.enabled()) {
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
    tape.record("layer_norm", out,
                [xn, gn, bn, on, m, d, xhat = std::move(xhat),
                 inv_std = std::move(inv_std)] {
                  xn->ensure_grad();
                  gn->ensure_grad();
                  bn->ensure_grad();
                  for (std::size_t i = 0; i < m; ++i) {
                    const double* dy = on->grad.data() + i * d;
                    const double* xh = xhat.data() + i * d;
                    double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                      const double dxh = dy[j] * gn->data[j];
                      sum_dxh += dxh;
                      sum_dxh_xh += dxh * xh[j];
                      gn->grad[j] += dy[j] * xh[j];
                      bn->grad[j] += dy[j];
                    }
                    const double inv_d = 1.0 / static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                      const double dxh = dy[j] * gn->data[j];
                      xn->grad[i * d + j] +=
                          inv_std[i] *
                          (dxh - inv_d * sum_dxh - xh[j] * inv_d * sum_dxh_xh);
                    }
                  }
                });
  }
  return out;
}

// Concatenate matrices with equal row counts along the column axis.
inline Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts) {
  detail::require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    detail::require(p.rows() == m, "concat_cols: row count mismatch");
    total += p.cols();
  }
  Tensor out({m, total});
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    const std::size_t n = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        out.at(i, off + j) = p.data()[i * n + j];
    off += n;
  }
  if (tape.enabled()) {
    std::vector<detail::NodePtr> ins;
    std::vector<std::size_t> widths;
    ins.reserve(parts.size());
    for (const Tensor& p : parts) {
      ins.push_back(p.node());
      widths.push_back(p.cols());
    }
    auto on = out.node();
    tape.record("concat_cols", out,
                [ins = std::move(ins), widths = std::move(widths), on, m,
                 total] {
                  std::size_t off = 0;
                  for (std::size_t pi = 0; pi < ins.size(); ++pi) {
                    ins[pi]->ensure_grad();
                    const std::size_t n = widths[pi];
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < n; ++j)
                        ins[pi]->grad[i * n + j] +=
                            on->grad[i * total + off + j];
                    off += n;
                  }
                });
  }
  return out;
}

// Row lookup: out[t] = x[idx[t]]. Embedding tables and grid-column views.
inline Tensor gather_rows(Tape& tape, const Tensor& x,
                          const std::vector<int>& idx) {
  detail::require_matrix(x, "gather_rows");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  for (int i : idx)
    detail::require(i >= 0 && static_cast<std::size_t>(i) < n,
                    "gather_rows: index " + std::to_string(i) +
                        " out of range [0," + std::to_string(n) + ")");
  Tensor out({idx.size(), d});
  for (std::size_t t = 0; t < idx.size(); ++t)
    std::copy_n(x.data() + static_cast<std::size_t>(idx[t]) * d, d,
                out.data() + t * d);
  if (tape.enabled()) {
    auto xn = x.node(), on = out.node();
    tape.record("gather_rows", out, [xn, on, idx, d] {
      xn->ensure_grad();
      for (std::size_t t = 0; t < idx.size(); ++t)
        for (std::size_t j = 0; j < d; ++j)
          xn->grad[static_cast<std::size_t>(idx[t]) * d + j] +=
              on->grad[t * d + j];
    });
  }
  return out;
}

inline Tensor row_slice(Tape& tape, const Tensor& x, std::size_t r0,
                        std::size_t r1) {
  detail::require_matrix(x, "row_slice");
  detail::require(r0 < r1 && r1 <= x.shape()[0],
                  "row_slice: bad range [" + std::to_string(r0) + "," +
                      std::to_string(r1) + ") for " +
                      std::to_string(x.shape()[0]) + " rows");
  const std::size_t d = x.shape()[1];
  Tensor out({r1 - r0, d});
  std::copy_n(x.data() + r0 * d, (r1 - r0) * d, out.data());
  if (tape.enabled()) {
    auto xn = x.node(), on = out.node();
    tape.record("row_slice", out, [xn, on, r0, d] {
      xn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        xn->grad[r0 * d + i] += on->grad[i];
    });
  }
  return out;
}

// Mean of rows [r0, r1) as a 1 x d matrix.
inline Tensor mean_rows_range(Tape& tape, const Tensor& x, std::size_t r0,
                              std::size_t r1) {
  detail::require_matrix(x, "mean_rows_range");
  detail::require(r0 < r1 && r1 <= x.shape()[0], "mean_rows_range: bad range");
  const std::size_t d = x.shape()[1];
  const double inv = 1.0 / static_cast<double>(r1 - r0);
  Tensor out({1, d});
  for (std::size_t r = r0; r < r1; ++r)
    for (std::size_t j = 0; j < d; ++j) out.data()[j] += x.at(r, j) * inv;
  if (tape.enabled()) {
    auto xn = x.node(), on = out.node();
    tape.record("mean_rows_range", out, [xn, on, r0, r1, d, inv] {
      xn->ensure_grad();
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t j = 0; j < d; ++j)
          xn->grad[r * d + j] += on->grad[j] * inv;
    });
  }
  return out;
}

// Mean over one axis of a matrix: axis 0 collapses rows (1 x n), axis 1
// collapses columns (m x 1).
inline Tensor mean_axis(Tape& tape, const Tensor& x, int axis) {
  detail::require_matrix(x, "mean_axis");
  detail::require(axis == 0 || axis == 1, "mean_axis: axis must be 0 or 1");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (axis == 0) return mean_rows_range(tape, x, 0, m);
  Tensor out({m, 1});
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += x.at(i, j);
    out.data()[i] = s * inv;
  }
  if (tape.enabled()) {
    auto xn = x.node(), on = out.node();
    tape.record("mean_axis", out, [xn, on, m, n, inv] {
      xn->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          xn->grad[i * n + j] += on->grad[i] * inv;
    });
  }
  return out;
}

inline Tensor sum_all(Tape& tape, const Tensor& x) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x.data()[i];
  Tensor out = Tensor::scalar(s);
  if (tape.enabled()) {
    auto xn = x.node(), on = out.node();
    tape.record("sum_all", out, [xn, on] {
      xn->ensure_grad();
      for (double& g : xn->grad) g += on->grad[0];
    });
  }
  return out;
}

// Build a rows x cols matrix from scalar tensors: cell p takes scalars[idx[p]],
// idx[p] == -1 means the cell is the constant `fill`. Cells may share a
// scalar; its gradient accumulates over every cell that references it.
inline Tensor assemble_indexed(Tape& tape, const std::vector<Tensor>& scalars,
                               const std::vector<int>& idx, std::size_t rows,
                               std::size_t cols, double fill = 0.0) {
  detail::require(idx.size() == rows * cols,
                  "assemble_indexed: index map size mismatch");
  for (const Tensor& s : scalars)
    detail::require(s.size() == 1, "assemble_indexed: non-scalar entry");
  Tensor out({rows, cols});
  for (std::size_t p = 0; p < idx.size(); ++p)
    out.data()[p] =
        idx[p] < 0 ? fill : scalars[static_cast<std::size_t>(idx[p])].item();
  if (tape.enabled()) {
    std::vector<detail::NodePtr> ins;
    ins.reserve(scalars.size());
    for (const Tensor& s : scalars) ins.push_back(s.node());
    auto on = out.node();
    tape.record("assemble_indexed", out, [ins = std::move(ins), idx, on] {
      for (std::size_t p = 0; p < idx.size(); ++p) {
        if (idx[p] < 0) continue;
        auto& in = ins[static_cast<std::size_t>(idx[p])];
        in->ensure_grad();
        in->grad[0] += on->grad[p];
      }
    });
  }
  return out;
}

// out.flat[p] = x.flat[map[p]]; the index-mapped expansion used to upsample
// clustering matrices.
inline Tensor gather_entries(Tape& tape, const Tensor& x,
                             const std::vector<std::size_t>& map,
                             std::size_t rows, std::size_t cols) {
  detail::require(map.size() == rows * cols,
                  "gather_entries: index map size mismatch");
  for (std::size_t s : map)
    detail::require(s < x.size(), "gather_entries: source index out of range");
  Tensor out({rows, cols});
  for (std::size_t p = 0; p < map.size(); ++p) out.data()[p] = x.data()[map[p]];
  if (tape.enabled()) {
    auto xn = x.node(), on = out.node();
    tape.record("gather_entries", out, [xn, on, map] {
      xn->ensure_grad();
      for (std::size_t p = 0; p < map.size(); ++p)
        xn->grad[map[p]] += on->grad[p];
    });
  }
  return out;
}

// Mean-pool rows into groups; group g of the output is the mean of the input
// rows listed in groups[g]. Covers pairwise sequence pooling and 2x2 grid
// pooling, singleton tails included.
inline Tensor pool_rows_groups(Tape& tape, const Tensor& x,
                               const std::vector<std::vector<std::size_t>>& groups) {
  detail::require_matrix(x, "pool_rows_groups");
  const std::size_t d = x.shape()[1];
  Tensor out({groups.size(), d});
  for (std::size_t g = 0; g < groups.size(); ++g) {
    detail::require(!groups[g].empty(), "pool_rows_groups: empty group");
    const double inv = 1.0 / static_cast<double>(groups[g].size());
    for (std::size_t r : groups[g]) {
      detail::require(r < x.shape()[0], "pool_rows_groups: row out of range");
      for (std::size_t j = 0; j < d; ++j)
        out.at(g, j) += x.at(r, j) * inv;
    }
  }
  if (tape.enabled()) {
    auto xn = x.node(), on = out.node();
    tape.record("pool_rows_groups", out, [xn, on, groups, d] {
      xn->ensure_grad();
      for (std::size_t g = 0; g < groups.size(); ++g) {
        const double inv = 1.0 / static_cast<double>(groups[g].size());
        for (std::size_t r : groups[g])
          for (std::size_t j = 0; j < d; ++j)
            xn->grad[r * d + j] += on->grad[g * d + j] * inv;
      }
    });
  }
  return out;
}

// Normalize each row to unit sum, dividing by max(row sum, eps) so an
// all-zero row stays finite. Rows with sum >= eps come out summing to 1.
inline Tensor div_rowsum(Tape& tape, const Tensor& x, double eps) {
  detail::require_matrix(x, "div_rowsum");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  Tensor out({m, n});
  std::vector<double> denom(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += x.at(i, j);
    denom[i] = std::max(s, eps);
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = x.at(i, j) / denom[i];
  }
  if (tape.enabled()) {
    auto xn = x.node(), on = out.node();
    tape.record("div_rowsum", out,
                [xn, on, m, n, eps, denom = std::move(denom)] {
                  xn->ensure_grad();
                  for (std::size_t i = 0; i < m; ++i) {
                    const double* y = on->data.data() + i * n;
                    const double* dy = on->grad.data() + i * n;
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += xn->data[i * n + j];
                    const bool clamped = s < eps;
                    double dot = 0.0;
                    if (!clamped)
                      for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
                    for (std::size_t j = 0; j < n; ++j)
                      xn->grad[i * n + j] += (dy[j] - dot) / denom[i];
                  }
                });
  }
  return out;
}

}  // namespace aclf
