#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cct/error.hpp"
#include "cct/rng.hpp"

// Dense double-precision tensors with reverse-mode autodiff on an
// explicit tape. Rank 1 and rank 2 cover everything the model needs;
// matrices are row-major.

namespace cct {

using Shape = std::vector<int>;

inline int shape_numel(const Shape& s) {
  int n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

class Tape;

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // sized like data iff this tensor receives gradients
  Tape* tape = nullptr;
};

using ImplPtr = std::shared_ptr<TensorImpl>;

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return full(std::move(shape), 0.0);
  }

  static Tensor full(Shape shape, double v) {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->data.assign(static_cast<std::size_t>(shape_numel(shape)), v);
    impl->shape = std::move(shape);
    return Tensor(std::move(impl));
  }

  static Tensor from_data(Shape shape, std::vector<double> data) {
    if (static_cast<int>(data.size()) != shape_numel(shape))
      throw DimError("from_data: " + shape_str(shape) + " does not hold " +
                     std::to_string(data.size()) + " values");
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    return Tensor(std::move(impl));
  }

  static Tensor scalar(double v) { return full({1}, v); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int numel() const { return static_cast<int>(impl_->data.size()); }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int rows() const { return rank() == 2 ? impl_->shape[0] : 1; }
  int cols() const { return impl_->shape.back(); }

  const std::vector<double>& data() const { return impl_->data; }
  std::vector<double>& mutable_data() { return impl_->data; }
  const std::vector<double>& grad() const { return impl_->grad; }
  std::vector<double>& mutable_grad() { return impl_->grad; }
  bool has_grad() const { return !impl_->grad.empty(); }

  double at(int i) const { return impl_->data[static_cast<std::size_t>(i)]; }
  double at(int r, int c) const {
    return impl_->data[static_cast<std::size_t>(r) * cols() + c];
  }
  void set(int i, double v) { impl_->data[static_cast<std::size_t>(i)] = v; }
  void set(int r, int c, double v) {
    impl_->data[static_cast<std::size_t>(r) * cols() + c] = v;
  }

  double value() const {
    if (numel() != 1) throw ContractError("value(): tensor is not scalar");
    return impl_->data[0];
  }

  Tape* tape() const { return impl_ ? impl_->tape : nullptr; }

  const detail::ImplPtr& impl() const { return impl_; }

 private:
  explicit Tensor(detail::ImplPtr impl) : impl_(std::move(impl)) {}
  detail::ImplPtr impl_;
  friend class Tape;
};

// Records every primitive op of a forward pass, in execution order, so
// backward can replay the chain rule in exact reverse order.
class Tape {
 public:
  Tensor parameter(Shape shape, std::vector<double> init) {
    Tensor t = Tensor::from_data(std::move(shape), std::move(init));
    t.impl_->tape = this;
    t.impl_->grad.assign(t.impl_->data.size(), 0.0);
    params_.push_back(t.impl_);
    return t;
  }

  // Ops call this when at least one input lives on a tape.
  void record(std::vector<detail::ImplPtr> inputs, const detail::ImplPtr& output,
              std::function<void()> backward) {
    if (!enabled_) return;
    output->tape = this;
    output->grad.assign(output->data.size(), 0.0);
    ops_.push_back(OpRecord{std::move(inputs), output, std::move(backward)});
  }

  // Populates grads of everything reachable from `loss`; parameters the
  // loss does not depend on end up with exactly-zero grads.
  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
      throw ContractError("backward: loss must be a scalar tensor");
    if (loss.tape() != this)
      throw ContractError("backward: loss is not recorded on this tape");
    for (auto& op : ops_) {
      std::fill(op.output->grad.begin(), op.output->grad.end(), 0.0);
      for (auto& in : op.inputs)
        if (!in->grad.empty()) std::fill(in->grad.begin(), in->grad.end(), 0.0);
    }
    for (auto& p : params_) std::fill(p->grad.begin(), p->grad.end(), 0.0);
    loss.impl_->grad[0] = 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) it->backward();
  }

  // Drops recorded ops (typically once per training step). Parameters stay.
  void reset() { ops_.clear(); }

  std::size_t num_ops() const { return ops_.size(); }
  const std::vector<detail::ImplPtr>& parameters() const { return params_; }

  bool enabled() const { return enabled_; }
  void set_enabled(bool e) { enabled_ = e; }

 private:
  struct OpRecord {
    std::vector<detail::ImplPtr> inputs;
    detail::ImplPtr output;
    std::function<void()> backward;
  };
  std::vector<OpRecord> ops_;
  std::vector<detail::ImplPtr> params_;
  bool enabled_ = true;
};

// RAII guard: ops run but are not recorded (evaluation / inference).
class GradPause {
 public:
  explicit GradPause(Tape& tape) : tape_(tape), prev_(tape.enabled()) {
    tape_.set_enabled(false);
  }
  ~GradPause() { tape_.set_enabled(prev_); }
  GradPause(const GradPause&) = delete;
  GradPause& operator=(const GradPause&) = delete;

 private:
  Tape& tape_;
  bool prev_;
};

namespace detail {

inline Tape* recording_tape(std::initializer_list<const Tensor*> ts) {
  Tape* found = nullptr;
  for (const Tensor* t : ts) {
    if (!t->defined()) continue;
    Tape* tp = t->tape();
    if (!tp) continue;
    if (found && found != tp)
      throw ContractError("op mixes tensors from two different tapes");
    found = tp;
  }
  return found && found->enabled() ? found : nullptr;
}

inline void accumulate(const ImplPtr& impl, const std::vector<double>& delta) {
  if (impl->grad.empty()) return;
  for (std::size_t i = 0; i < delta.size(); ++i) impl->grad[i] += delta[i];
}

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using CEMap = Eigen::Map<const EMat>;

inline CEMap as_mat(const std::vector<double>& v, int r, int c) {
  return CEMap(v.data(), r, c);
}
inline EMap as_mat(std::vector<double>& v, int r, int c) {
  return EMap(v.data(), r, c);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace detail {

// Shared skeleton for binary elementwise ops with scalar broadcast.
template <class Fwd, class Bwd>
Tensor binary_ew(const char* name, const Tensor& a, const Tensor& b, Fwd fwd,
                 Bwd bwd) {
  const bool a_scalar = a.numel() == 1;
  const bool b_scalar = b.numel() == 1;
  if (!a_scalar && !b_scalar && a.shape() != b.shape())
    throw DimError(std::string(name) + ": shape mismatch " +
                   shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const Tensor& big = b_scalar ? a : b;
  Tensor out = Tensor::zeros(big.shape());
  const int n = out.numel();
  for (int i = 0; i < n; ++i) {
    double av = a_scalar ? a.at(0) : a.at(i);
    double bv = b_scalar ? b.at(0) : b.at(i);
    out.set(i, fwd(av, bv));
  }
  if (Tape* t = recording_tape({&a, &b})) {
    auto ai = a.impl();
    auto bi = b.impl();
    auto oi = out.impl();
    t->record({ai, bi}, oi, [=]() {
      const int m = static_cast<int>(oi->data.size());
      for (int i = 0; i < m; ++i) {
        double av = a_scalar ? ai->data[0] : ai->data[i];
        double bv = b_scalar ? bi->data[0] : bi->data[i];
        auto [da, db] = bwd(av, bv);
        double g = oi->grad[i];
        if (!ai->grad.empty()) ai->grad[a_scalar ? 0 : i] += g * da;
        if (!bi->grad.empty()) bi->grad[b_scalar ? 0 : i] += g * db;
      }
    });
  }
  return out;
}

template <class Fwd, class Bwd>
Tensor unary_ew(const Tensor& a, Fwd fwd, Bwd bwd) {
  Tensor out = Tensor::zeros(a.shape());
  const int n = a.numel();
  for (int i = 0; i < n; ++i) out.set(i, fwd(a.at(i)));
  if (Tape* t = recording_tape({&a})) {
    auto ai = a.impl();
    auto oi = out.impl();
    t->record({ai}, oi, [=]() {
      if (ai->grad.empty()) return;
      const int m = static_cast<int>(oi->data.size());
      for (int i = 0; i < m; ++i)
        ai->grad[i] += oi->grad[i] * bwd(ai->data[i], oi->data[i]);
    });
  }
  return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_ew(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return std::pair<double, double>{1.0, 1.0}; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_ew(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return std::pair<double, double>{1.0, -1.0}; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_ew(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y) { return std::pair<double, double>{y, x}; });
}

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary_ew(
      a, [c](double x) { return c * x; },
      [c](double, double) { return c; });
}

inline Tensor relu(const Tensor& a) {
  // Subgradient at 0 is 0.
  return detail::unary_ew(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_ew(
      a,
      [](double x) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                        : std::exp(x) / (1.0 + std::exp(x));
      },
      [](double, double y) { return y * (1.0 - y); });
}

// Subgradient at 0 is 0, which makes the two-sided budget loss
// well-defined at exact budget adherence.
inline Tensor abs_val(const Tensor& a) {
  return detail::unary_ew(
      a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
    throw DimError("matmul: incompatible shapes " + shape_str(a.shape()) +
                   " vs " + shape_str(b.shape()));
  const int m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = Tensor::zeros({m, n});
  detail::as_mat(out.mutable_data(), m, n).noalias() =
      detail::as_mat(a.data(), m, k) * detail::as_mat(b.data(), k, n);
  if (Tape* t = detail::recording_tape({&a, &b})) {
    auto ai = a.impl();
    auto bi = b.impl();
    auto oi = out.impl();
    t->record({ai, bi}, oi, [=]() {
      auto go = detail::as_mat(oi->grad, m, n);
      if (!ai->grad.empty())
        detail::as_mat(ai->grad, m, k).noalias() +=
            go * detail::as_mat(bi->data, k, n).transpose();
      if (!bi->grad.empty())
        detail::as_mat(bi->grad, k, n).noalias() +=
            detail::as_mat(ai->data, m, k).transpose() * go;
    });
  }
  return out;
}

// a · bᵀ without materializing the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols())
    throw DimError("matmul_nt: incompatible shapes " + shape_str(a.shape()) +
                   " vs " + shape_str(b.shape()));
  const int m = a.rows(), k = a.cols(), n = b.rows();
  Tensor out = Tensor::zeros({m, n});
  detail::as_mat(out.mutable_data(), m, n).noalias() =
      detail::as_mat(a.data(), m, k) * detail::as_mat(b.data(), n, k).transpose();
  if (Tape* t = detail::recording_tape({&a, &b})) {
    auto ai = a.impl();
    auto bi = b.impl();
    auto oi = out.impl();
    t->record({ai, bi}, oi, [=]() {
      auto go = detail::as_mat(oi->grad, m, n);
      if (!ai->grad.empty())
        detail::as_mat(ai->grad, m, k).noalias() +=
            go * detail::as_mat(bi->data, n, k);
      if (!bi->grad.empty())
        detail::as_mat(bi->grad, n, k).noalias() +=
            go.transpose() * detail::as_mat(ai->data, m, k);
    });
  }
  return out;
}

// out[r, :] = x[r, :] * g[r]; g is [R] or [R,1].
inline Tensor row_scale(const Tensor& x, const Tensor& g) {
  const int r = x.rows(), c = x.cols();
  if (g.numel() != r)
    throw DimError("row_scale: gate " + shape_str(g.shape()) +
                   " does not match rows of " + shape_str(x.shape()));
  Tensor out = Tensor::zeros(x.shape());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.set(i, j, x.at(i, j) * g.at(i));
  if (Tape* t = detail::recording_tape({&x, &g})) {
    auto xi = x.impl();
    auto gi = g.impl();
    auto oi = out.impl();
    t->record({xi, gi}, oi, [=]() {
      for (int i = 0; i < r; ++i) {
        double gsum = 0.0;
        for (int j = 0; j < c; ++j) {
          double go = oi->grad[static_cast<std::size_t>(i) * c + j];
          if (!xi->grad.empty())
            xi->grad[static_cast<std::size_t>(i) * c + j] += go * gi->data[i];
          gsum += go * xi->data[static_cast<std::size_t>(i) * c + j];
        }
        if (!gi->grad.empty()) gi->grad[i] += gsum;
      }
    });
  }
  return out;
}

inline Tensor slice_cols(const Tensor& x, int start, int len) {
  const int r = x.rows(), c = x.cols();
  if (start < 0 || len <= 0 || start + len > c)
    throw DimError("slice_cols: [" + std::to_string(start) + "," +
                   std::to_string(start + len) + ") out of " +
                   shape_str(x.shape()));
  Tensor out = Tensor::zeros({r, len});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < len; ++j) out.set(i, j, x.at(i, start + j));
  if (Tape* t = detail::recording_tape({&x})) {
    auto xi = x.impl();
    auto oi = out.impl();
    t->record({xi}, oi, [=]() {
      if (xi->grad.empty()) return;
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < len; ++j)
          xi->grad[static_cast<std::size_t>(i) * c + start + j] +=
              oi->grad[static_cast<std::size_t>(i) * len + j];
    });
  }
  return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ContractError("concat_cols: no inputs");
  const int r = xs[0].rows();
  int total = 0;
  for (const Tensor& x : xs) {
    if (x.rows() != r)
      throw DimError("concat_cols: row mismatch " + shape_str(x.shape()));
    total += x.cols();
  }
  Tensor out = Tensor::zeros({r, total});
  int off = 0;
  for (const Tensor& x : xs) {
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < x.cols(); ++j) out.set(i, off + j, x.at(i, j));
    off += x.cols();
  }
  Tape* tape = nullptr;
  for (const Tensor& x : xs)
    if (Tape* t = detail::recording_tape({&x})) tape = t;
  if (tape) {
    std::vector<detail::ImplPtr> ins;
    for (const Tensor& x : xs) ins.push_back(x.impl());
    auto oi = out.impl();
    tape->record(ins, oi, [ins, oi, r, total]() {
      int o = 0;
      for (auto& in : ins) {
        const int c = in->shape.back();
        if (!in->grad.empty())
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
              in->grad[static_cast<std::size_t>(i) * c + j] +=
                  oi->grad[static_cast<std::size_t>(i) * total + o + j];
        o += c;
      }
    });
  }
  return out;
}

// out[r, :] = x[r, :] + row; row is [C] or [1,C].
inline Tensor add_row_broadcast(const Tensor& x, const Tensor& row) {
  const int r = x.rows(), c = x.cols();
  if (row.numel() != c)
    throw DimError("add_row_broadcast: row " + shape_str(row.shape()) +
                   " vs " + shape_str(x.shape()));
  Tensor out = Tensor::zeros(x.shape());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.set(i, j, x.at(i, j) + row.at(j));
  if (Tape* t = detail::recording_tape({&x, &row})) {
    auto xi = x.impl();
    auto ri = row.impl();
    auto oi = out.impl();
    t->record({xi, ri}, oi, [=]() {
      if (!xi->grad.empty()) detail::accumulate(xi, oi->grad);
      if (!ri->grad.empty())
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j)
            ri->grad[j] += oi->grad[static_cast<std::size_t>(i) * c + j];
    });
  }
  return out;
}

inline Tensor sum(const Tensor& x) {
  Tensor out = Tensor::zeros({1});
  double s = 0.0;
  for (int i = 0; i < x.numel(); ++i) s += x.at(i);
  out.set(0, s);
  if (Tape* t = detail::recording_tape({&x})) {
    auto xi = x.impl();
    auto oi = out.impl();
    t->record({xi}, oi, [=]() {
      if (xi->grad.empty()) return;
      for (double& g : xi->grad) g += oi->grad[0];
    });
  }
  return out;
}

inline Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  if (table.rank() != 2)
    throw DimError("gather_rows: table must be rank 2, got " +
                   shape_str(table.shape()));
  const int v = table.rows(), d = table.cols();
  for (int id : ids)
    if (id < 0 || id >= v)
      throw IndexError("gather_rows: id " + std::to_string(id) +
                       " outside table of " + std::to_string(v) + " rows");
  const int n = static_cast<int>(ids.size());
  Tensor out = Tensor::zeros({n, d});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out.set(i, j, table.at(ids[i], j));
  if (Tape* t = detail::recording_tape({&table})) {
    auto ti = table.impl();
    auto oi = out.impl();
    t->record({ti}, oi, [ti, oi, ids, d]() {
      if (ti->grad.empty()) return;
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (int j = 0; j < d; ++j)
          ti->grad[static_cast<std::size_t>(ids[i]) * d + j] +=
              oi->grad[i * d + j];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization, softmax, loss
// ---------------------------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-5;

// Per-row zero-mean unit-variance over the last axis, then affine.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const int c = x.cols();
  if (c == 0) throw DimError("layer_norm: zero-width input");
  if (gain.numel() != c || bias.numel() != c)
    throw DimError("layer_norm: params " + shape_str(gain.shape()) + "/" +
                   shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
  const int r = x.rows();
  Tensor out = Tensor::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<double>>(x.data().size());
  auto inv_std = std::make_shared<std::vector<double>>(r);
  for (int i = 0; i < r; ++i) {
    double mean = 0.0;
    for (int j = 0; j < c; ++j) mean += x.at(i, j);
    mean /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) {
      double d = x.at(i, j) - mean;
      var += d * d;
    }
    var /= c;
    double is = 1.0 / std::sqrt(var + kLayerNormEps);
    (*inv_std)[i] = is;
    for (int j = 0; j < c; ++j) {
      double h = (x.at(i, j) - mean) * is;
      (*xhat)[static_cast<std::size_t>(i) * c + j] = h;
      out.set(i, j, gain.at(j) * h + bias.at(j));
    }
  }
  if (Tape* t = detail::recording_tape({&x, &gain, &bias})) {
    auto xi = x.impl();
    auto gi = gain.impl();
    auto bi = bias.impl();
    auto oi = out.impl();
    t->record({xi, gi, bi}, oi, [=]() {
      for (int i = 0; i < r; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * c;
        double m1 = 0.0, m2 = 0.0;  // mean(gh), mean(gh*xhat)
        for (int j = 0; j < c; ++j) {
          double go = oi->grad[base + j];
          double h = (*xhat)[base + j];
          if (!bi->grad.empty()) bi->grad[j] += go;
          if (!gi->grad.empty()) gi->grad[j] += go * h;
          double gh = go * gi->data[j];
          m1 += gh;
          m2 += gh * h;
        }
        m1 /= c;
        m2 /= c;
        if (!xi->grad.empty()) {
          for (int j = 0; j < c; ++j) {
            double gh = oi->grad[base + j] * gi->data[j];
            double h = (*xhat)[base + j];
            xi->grad[base + j] += (*inv_std)[i] * (gh - m1 - h * m2);
          }
        }
      }
    });
  }
  return out;
}

// Row-wise softmax over unmasked entries. mask (1 = keep), when given,
// must have one flag per element; fully masked rows produce all-zero
// rows so that attention over an empty key set contributes nothing and
// the residual path carries the signal.
inline Tensor softmax_rows(const Tensor& x,
                           const std::vector<std::uint8_t>* mask = nullptr) {
  const int r = x.rows(), c = x.cols();
  if (mask && static_cast<int>(mask->size()) != r * c)
    throw DimError("softmax_rows: mask size " + std::to_string(mask->size()) +
                   " vs input " + shape_str(x.shape()));
  Tensor out = Tensor::zeros(x.shape());
  for (int i = 0; i < r; ++i) {
    const std::size_t base = static_cast<std::size_t>(i) * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < c; ++j)
      if (!mask || (*mask)[base + j]) mx = std::max(mx, x.at(i, j));
    if (mx == -std::numeric_limits<double>::infinity()) continue;  // all masked
    double z = 0.0;
    for (int j = 0; j < c; ++j)
      if (!mask || (*mask)[base + j]) z += std::exp(x.at(i, j) - mx);
    for (int j = 0; j < c; ++j)
      if (!mask || (*mask)[base + j])
        out.set(i, j, std::exp(x.at(i, j) - mx) / z);
  }
  if (Tape* t = detail::recording_tape({&x})) {
    auto xi = x.impl();
    auto oi = out.impl();
    t->record({xi}, oi, [=]() {
      if (xi->grad.empty()) return;
      for (int i = 0; i < r; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * c;
        double dot = 0.0;
        for (int j = 0; j < c; ++j) dot += oi->grad[base + j] * oi->data[base + j];
        for (int j = 0; j < c; ++j)
          xi->grad[base + j] += oi->data[base + j] * (oi->grad[base + j] - dot);
      }
    });
  }
  return out;
}

// Weighted mean of per-position negative log-likelihood. Weights of 0
// drop padded positions from the loss.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<double>& weights) {
  const int n = logits.rows(), v = logits.cols();
  if (static_cast<int>(targets.size()) != n ||
      static_cast<int>(weights.size()) != n)
    throw DimError("cross_entropy: " + std::to_string(targets.size()) +
                   " targets / " + std::to_string(weights.size()) +
                   " weights vs logits " + shape_str(logits.shape()));
  for (int id : targets)
    if (id < 0 || id >= v)
      throw IndexError("cross_entropy: target id " + std::to_string(id) +
                       " outside vocab of " + std::to_string(v));
  double wtot = 0.0;
  for (double w : weights) wtot += w;
  if (wtot <= 0.0)
    throw ContractError("cross_entropy: total weight must be positive");

  auto probs = std::make_shared<std::vector<double>>(logits.data().size());
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    const std::size_t base = static_cast<std::size_t>(i) * v;
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < v; ++j) mx = std::max(mx, logits.at(i, j));
    double z = 0.0;
    for (int j = 0; j < v; ++j) z += std::exp(logits.at(i, j) - mx);
    for (int j = 0; j < v; ++j)
      (*probs)[base + j] = std::exp(logits.at(i, j) - mx) / z;
    double lse = mx + std::log(z);
    loss += weights[i] * (lse - logits.at(i, targets[i]));
  }
  Tensor out = Tensor::scalar(loss / wtot);
  if (Tape* t = detail::recording_tape({&logits})) {
    auto li = logits.impl();
    auto oi = out.impl();
    t->record({li}, oi, [li, oi, probs, targets, weights, wtot, n, v]() {
      if (li->grad.empty()) return;
      const double g = oi->grad[0];
      for (int i = 0; i < n; ++i) {
        if (weights[i] == 0.0) continue;
        const std::size_t base = static_cast<std::size_t>(i) * v;
        const double wi = weights[i] / wtot;
        for (int j = 0; j < v; ++j) {
          double p = (*probs)[base + j];
          li->grad[base + j] += g * wi * (p - (j == targets[i] ? 1.0 : 0.0));
        }
      }
    });
  }
  return out;
}

// Inverted dropout: scaling happens at train time, inference is identity.
inline Tensor dropout(const Tensor& x, double rate, bool train, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw ContractError("dropout: rate must be in [0,1)");
  if (!train || rate == 0.0) return x;
  const int n = x.numel();
  auto keep = std::make_shared<std::vector<double>>(n);
  const double inv = 1.0 / (1.0 - rate);
  Tensor out = Tensor::zeros(x.shape());
  for (int i = 0; i < n; ++i) {
    double k = rng.uniform() >= rate ? inv : 0.0;
    (*keep)[i] = k;
    out.set(i, x.at(i) * k);
  }
  if (Tape* t = detail::recording_tape({&x})) {
    auto xi = x.impl();
    auto oi = out.impl();
    t->record({xi}, oi, [xi, oi, keep, n]() {
      if (xi->grad.empty()) return;
      for (int i = 0; i < n; ++i) xi->grad[i] += oi->grad[i] * (*keep)[i];
    });
  }
  return out;
}

// Value-only helper: N(0, stddev) init.
inline Tensor randn(Shape shape, Rng& rng, double stddev) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (int i = 0; i < t.numel(); ++i) t.set(i, rng.normal() * stddev);
  return t;
}

}  // namespace cct
