#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rrnet/errors.hpp"
#include "rrnet/params.hpp"
#include "rrnet/tensor.hpp"

namespace rrnet::netops {

/// An operator produced a NaN or infinity.
class NonFiniteError : public Error {
 public:
  explicit NonFiniteError(std::string op)
      : Error("non-finite value produced by " + op), op_(std::move(op)) {}
  const std::string& op() const { return op_; }

 private:
  std::string op_;
};

/// Test-only knobs. A scale other than 1 corrupts the conv2d weight gradient.
namespace hooks {
inline thread_local double conv2d_grad_scale = 1.0;
}

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
  bool valid() const { return id != std::numeric_limits<std::size_t>::max(); }
};

/// Records a forward pass and replays it in reverse once.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Var constant(Tensor t) { return push(std::move(t), false, {}, "constant"); }

  /// Leaf whose gradient is kept on the tape (inputs under test).
  Var variable(Tensor t) { return push(std::move(t), true, {}, "variable"); }

  /// Leaf bound to a parameter; backward() accumulates into the store.
  Var param(ParamStore& store, const std::string& name) {
    auto it = param_vars_.find(name);
    if (it != param_vars_.end()) return it->second;
    ParamEntry& e = store.entry(name);
    Var v = push(e.value, true, {}, "param");
    nodes_[v.id].param = &e;
    param_vars_.emplace(name, v);
    return v;
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  const Shape& shape(Var v) const { return nodes_.at(v.id).value.shape; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient of the last backward() with respect to `v` (zeros when unreached).
  Tensor grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.grad.empty() ? Tensor(n.value.shape) : n.grad;
  }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Appends an operator output. `fn` receives this tape and the node id.
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn, const char* op) {
    bool rg = false;
    for (Var in : inputs) rg = rg || nodes_.at(in.id).requires_grad;
    if (check_finite_ && !value.all_finite()) throw NonFiniteError(op);
    return push(std::move(value), rg, rg ? std::move(fn) : BackwardFn{}, op);
  }
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn, const char* op) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn), op);
  }

  /// Upstream gradient of node `id` during backward.
  const Tensor& out_grad(std::size_t id) const { return nodes_[id].grad; }

  /// Accumulation buffer for the gradient of `v`; null when `v` needs none.
  Tensor* grad_sink(Var v) {
    Node& n = nodes_.at(v.id);
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor(n.value.shape);
    return &n.grad;
  }

  void backward(Var loss) {
    if (consumed_) throw TapeConsumedError("backward already ran on this tape");
    Node& root = nodes_.at(loss.id);
    if (root.value.numel() != 1) {
      throw DimensionError("backward needs a scalar loss, got " + shape_str(root.value.shape));
    }
    consumed_ = true;
    if (!root.requires_grad) return;
    root.grad = Tensor(root.value.shape, 1.0);
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.backward && !n.grad.empty()) n.backward(*this, id);
    }
    for (Node& n : nodes_) {
      if (!n.param) continue;
      if (!n.grad.empty()) {
        for (std::size_t i = 0; i < n.grad.numel(); ++i) n.param->grad[i] += n.grad[i];
      }
      n.param->has_grad = true;
    }
  }

  void set_check_finite(bool on) { check_finite_ = on; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
    ParamEntry* param = nullptr;
    const char* op = "";
  };

  Var push(Tensor t, bool rg, BackwardFn fn, const char* op) {
    nodes_.push_back(Node{std::move(t), {}, std::move(fn), rg, nullptr, op});
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::map<std::string, Var> param_vars_;
  bool consumed_ = false;
  bool check_finite_ = true;
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

template <typename M>
double row_sum(const M& m, std::size_t r) {
  double s = 0.0;
  for (Eigen::Index c = 0; c < m.cols(); ++c) s += m(static_cast<Eigen::Index>(r), c);
  return s;
}

inline ConstMatMap as_mat(const Tensor& t, std::size_t rows, std::size_t cols) {
  return ConstMatMap(t.data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline MatMap as_mat(Tensor& t, std::size_t rows, std::size_t cols) {
  return MatMap(t.data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* arg) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + arg + " must have rank " + std::to_string(rank) +
                         ", got " + shape_str(t.shape));
  }
}

inline void require_dim(std::size_t got, std::size_t want, const char* op, const std::string& what) {
  if (got != want) {
    throw DimensionError(std::string(op) + ": " + what + " is " + std::to_string(got) + ", expected " +
                         std::to_string(want));
  }
}

inline void accumulate(Tensor* sink, const Tensor& g) {
  if (!sink) return;
  for (std::size_t i = 0; i < g.numel(); ++i) (*sink)[i] += g[i];
}

}  // namespace detail

/// Zero-padded ("same" for stride 1) 2-D cross-correlation.
/// x: C×H×W, w: O×C×k×k, b: O. Output O×Ho×Wo with Ho = (H + 2(k/2) - k)/stride + 1.
inline Var conv2d(Tape& tape, Var x, Var w, Var b, int stride = 1) {
  using namespace detail;
  const Tensor& xt = tape.value(x);
  const Tensor& wt = tape.value(w);
  const Tensor& bt = tape.value(b);
  require_rank(xt, 3, "conv2d", "input");
  require_rank(wt, 4, "conv2d", "weights");
  require_rank(bt, 1, "conv2d", "bias");
  const std::size_t C = xt.dim(0), H = xt.dim(1), W = xt.dim(2);
  const std::size_t O = wt.dim(0), k = wt.dim(2);
  require_dim(wt.dim(1), C, "conv2d", "weights axis 1 (input channels)");
  require_dim(wt.dim(3), k, "conv2d", "weights axis 3 (kernel width)");
  require_dim(bt.dim(0), O, "conv2d", "bias axis 0 (output channels)");
  if (k % 2 == 0) throw DimensionError("conv2d: kernel size must be odd, got " + std::to_string(k));
  if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
  const long pad = static_cast<long>(k / 2);
  const std::size_t s = static_cast<std::size_t>(stride);
  const std::size_t Ho = (H + 2 * (k / 2) - k) / s + 1;
  const std::size_t Wo = (W + 2 * (k / 2) - k) / s + 1;
  const std::size_t L = Ho * Wo;
  const std::size_t R = C * k * k;

  RowMat cols = RowMat::Zero(static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(L));
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = cols.data() + ((c * k + ky) * k + kx) * L;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const long iy = static_cast<long>(oy * s + ky) - pad;
          if (iy < 0 || iy >= static_cast<long>(H)) continue;
          const double* src = xt.data.data() + (c * H + static_cast<std::size_t>(iy)) * W;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const long ix = static_cast<long>(ox * s + kx) - pad;
            if (ix >= 0 && ix < static_cast<long>(W)) row[oy * Wo + ox] = src[ix];
          }
        }
      }
    }
  }
  Tensor out({O, Ho, Wo});
  as_mat(out, O, L).noalias() = as_mat(wt, O, R) * cols;
  for (std::size_t o = 0; o < O; ++o) {
    double* dst = out.data.data() + o * L;
    for (std::size_t l = 0; l < L; ++l) dst[l] += bt[o];
  }

  auto fn = [x, w, b, C, H, W, O, k, s, pad, Ho, Wo, L, R, cols = std::move(cols)](Tape& t, std::size_t self) {
    const Tensor& g = t.out_grad(self);
    const auto gmat = as_mat(g, O, L);
    if (Tensor* gw = t.grad_sink(w)) {
      as_mat(*gw, O, R).noalias() += hooks::conv2d_grad_scale * (gmat * cols.transpose());
    }
    if (Tensor* gb = t.grad_sink(b)) {
      // Plain loop: Eigen reductions regroup with buffer alignment.
      for (std::size_t o = 0; o < O; ++o) (*gb)[o] += detail::row_sum(gmat, o);
    }
    if (Tensor* gx = t.grad_sink(x)) {
      const RowMat gcols = as_mat(t.value(w), O, R).transpose() * gmat;
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            const double* row = gcols.data() + ((c * k + ky) * k + kx) * L;
            for (std::size_t oy = 0; oy < Ho; ++oy) {
              const long iy = static_cast<long>(oy * s + ky) - pad;
              if (iy < 0 || iy >= static_cast<long>(H)) continue;
              double* dst = gx->data.data() + (c * H + static_cast<std::size_t>(iy)) * W;
              for (std::size_t ox = 0; ox < Wo; ++ox) {
                const long ix = static_cast<long>(ox * s + kx) - pad;
                if (ix >= 0 && ix < static_cast<long>(W)) dst[ix] += row[oy * Wo + ox];
              }
            }
          }
        }
      }
    }
  };
  return tape.record(std::move(out), {x, w, b}, std::move(fn), "conv2d");
}

/// Zero-padded 1-D convolution. x: C×L, w: O×C×k, b: O -> O×L.
inline Var conv1d(Tape& tape, Var x, Var w, Var b) {
  using namespace detail;
  const Tensor& xt = tape.value(x);
  const Tensor& wt = tape.value(w);
  const Tensor& bt = tape.value(b);
  require_rank(xt, 2, "conv1d", "input");
  require_rank(wt, 3, "conv1d", "weights");
  require_rank(bt, 1, "conv1d", "bias");
  const std::size_t C = xt.dim(0), L = xt.dim(1), O = wt.dim(0), k = wt.dim(2);
  require_dim(wt.dim(1), C, "conv1d", "weights axis 1 (input channels)");
  require_dim(bt.dim(0), O, "conv1d", "bias axis 0 (output channels)");
  if (k % 2 == 0) throw DimensionError("conv1d: kernel size must be odd, got " + std::to_string(k));
  const long pad = static_cast<long>(k / 2);
  const std::size_t R = C * k;
  RowMat cols = RowMat::Zero(static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(L));
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      for (std::size_t l = 0; l < L; ++l) {
        const long il = static_cast<long>(l + kk) - pad;
        if (il >= 0 && il < static_cast<long>(L)) {
          cols(static_cast<Eigen::Index>(c * k + kk), static_cast<Eigen::Index>(l)) =
              xt.data[c * L + static_cast<std::size_t>(il)];
        }
      }
    }
  }
  Tensor out({O, L});
  as_mat(out, O, L).noalias() = as_mat(wt, O, R) * cols;
  for (std::size_t o = 0; o < O; ++o) {
    for (std::size_t l = 0; l < L; ++l) out.data[o * L + l] += bt[o];
  }
  auto fn = [x, w, b, C, L, O, k, pad, R, cols = std::move(cols)](Tape& t, std::size_t self) {
    const auto gmat = as_mat(t.out_grad(self), O, L);
    if (Tensor* gw = t.grad_sink(w)) as_mat(*gw, O, R).noalias() += gmat * cols.transpose();
    if (Tensor* gb = t.grad_sink(b)) {
      // Plain loop: Eigen reductions regroup with buffer alignment.
      for (std::size_t o = 0; o < O; ++o) (*gb)[o] += detail::row_sum(gmat, o);
    }
    if (Tensor* gx = t.grad_sink(x)) {
      const RowMat gcols = as_mat(t.value(w), O, R).transpose() * gmat;
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t kk = 0; kk < k; ++kk) {
          for (std::size_t l = 0; l < L; ++l) {
            const long il = static_cast<long>(l + kk) - pad;
            if (il >= 0 && il < static_cast<long>(L)) {
              gx->data[c * L + static_cast<std::size_t>(il)] +=
                  gcols(static_cast<Eigen::Index>(c * k + kk), static_cast<Eigen::Index>(l));
            }
          }
        }
      }
    }
  };
  return tape.record(std::move(out), {x, w, b}, std::move(fn), "conv1d");
}

/// weights·x + bias. x: M, w: P×M, b: P.
inline Var fully_connected(Tape& tape, Var x, Var w, Var b) {
  using namespace detail;
  const Tensor& xt = tape.value(x);
  const Tensor& wt = tape.value(w);
  const Tensor& bt = tape.value(b);
  require_rank(xt, 1, "fully_connected", "input");
  require_rank(wt, 2, "fully_connected", "weights");
  require_rank(bt, 1, "fully_connected", "bias");
  const std::size_t M = xt.dim(0), P = wt.dim(0);
  require_dim(wt.dim(1), M, "fully_connected", "weights axis 1");
  require_dim(bt.dim(0), P, "fully_connected", "bias axis 0");
  Tensor out({P});
  VecMap(out.data.data(), static_cast<Eigen::Index>(P)).noalias() =
      as_mat(wt, P, M) * ConstVecMap(xt.data.data(), static_cast<Eigen::Index>(M)) +
      ConstVecMap(bt.data.data(), static_cast<Eigen::Index>(P));
  auto fn = [x, w, b, M, P](Tape& t, std::size_t self) {
    const ConstVecMap g(t.out_grad(self).data.data(), static_cast<Eigen::Index>(P));
    if (Tensor* gw = t.grad_sink(w)) {
      as_mat(*gw, P, M).noalias() +=
          g * ConstVecMap(t.value(x).data.data(), static_cast<Eigen::Index>(M)).transpose();
    }
    if (Tensor* gb = t.grad_sink(b)) VecMap(gb->data.data(), static_cast<Eigen::Index>(P)) += g;
    if (Tensor* gx = t.grad_sink(x)) {
      VecMap(gx->data.data(), static_cast<Eigen::Index>(M)).noalias() +=
          as_mat(t.value(w), P, M).transpose() * g;
    }
  };
  return tape.record(std::move(out), {x, w, b}, std::move(fn), "fully_connected");
}

enum class Pointwise { relu, sigmoid };

inline double sigmoid_scalar(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Var pointwise(Tape& tape, Var x, Pointwise kind) {
  Tensor out = tape.value(x);
  if (kind == Pointwise::relu) {
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    auto fn = [x](Tape& t, std::size_t self) {
      Tensor* gx = t.grad_sink(x);
      const Tensor& in = t.value(x);
      const Tensor& g = t.out_grad(self);
      for (std::size_t i = 0; i < g.numel(); ++i) {
        if (in[i] > 0.0) (*gx)[i] += g[i];
      }
    };
    return tape.record(std::move(out), {x}, std::move(fn), "relu");
  }
  for (double& v : out.data) v = sigmoid_scalar(v);
  auto fn = [x](Tape& t, std::size_t self) {
    Tensor* gx = t.grad_sink(x);
    const Tensor& y = t.value(Var{self});
    const Tensor& g = t.out_grad(self);
    for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i] * y[i] * (1.0 - y[i]);
  };
  return tape.record(std::move(out), {x}, std::move(fn), "sigmoid");
}

inline Var relu(Tape& tape, Var x) { return pointwise(tape, x, Pointwise::relu); }
inline Var sigmoid(Tape& tape, Var x) { return pointwise(tape, x, Pointwise::sigmoid); }

/// a: M×P, b: P×Q -> M×Q.
inline Var matmul(Tape& tape, Var a, Var b) {
  using namespace detail;
  const Tensor& at = tape.value(a);
  const Tensor& bt = tape.value(b);
  require_rank(at, 2, "matmul", "lhs");
  require_rank(bt, 2, "matmul", "rhs");
  const std::size_t M = at.dim(0), P = at.dim(1), Q = bt.dim(1);
  require_dim(bt.dim(0), P, "matmul", "rhs axis 0 (inner dimension)");
  Tensor out({M, Q});
  as_mat(out, M, Q).noalias() = as_mat(at, M, P) * as_mat(bt, P, Q);
  auto fn = [a, b, M, P, Q](Tape& t, std::size_t self) {
    const auto g = as_mat(t.out_grad(self), M, Q);
    if (Tensor* ga = t.grad_sink(a)) as_mat(*ga, M, P).noalias() += g * as_mat(t.value(b), P, Q).transpose();
    if (Tensor* gb = t.grad_sink(b)) as_mat(*gb, P, Q).noalias() += as_mat(t.value(a), M, P).transpose() * g;
  };
  return tape.record(std::move(out), {a, b}, std::move(fn), "matmul");
}

/// M×P -> P×M.
inline Var transpose(Tape& tape, Var a) {
  using namespace detail;
  const Tensor& at = tape.value(a);
  require_rank(at, 2, "transpose", "input");
  const std::size_t M = at.dim(0), P = at.dim(1);
  Tensor out({P, M});
  as_mat(out, P, M) = as_mat(at, M, P).transpose();
  auto fn = [a, M, P](Tape& t, std::size_t self) {
    if (Tensor* ga = t.grad_sink(a)) as_mat(*ga, M, P) += as_mat(t.out_grad(self), P, M).transpose();
  };
  return tape.record(std::move(out), {a}, std::move(fn), "transpose");
}

/// C×H×W -> (H·W)×C: spatial locations index rows.
inline Var planar(Tape& tape, Var x) {
  using namespace detail;
  const Tensor& xt = tape.value(x);
  require_rank(xt, 3, "planar", "input");
  const std::size_t C = xt.dim(0), L = xt.dim(1) * xt.dim(2);
  Tensor out({L, C});
  as_mat(out, L, C) = as_mat(xt, C, L).transpose();
  auto fn = [x, C, L](Tape& t, std::size_t self) {
    if (Tensor* gx = t.grad_sink(x)) as_mat(*gx, C, L) += as_mat(t.out_grad(self), L, C).transpose();
  };
  return tape.record(std::move(out), {x}, std::move(fn), "planar");
}

/// (H·W)×C -> C×H×W, the inverse of planar.
inline Var unplanar(Tape& tape, Var y, std::size_t height, std::size_t width) {
  using namespace detail;
  const Tensor& yt = tape.value(y);
  require_rank(yt, 2, "unplanar", "input");
  const std::size_t L = yt.dim(0), C = yt.dim(1);
  require_dim(L, height * width, "unplanar", "row count");
  Tensor out({C, height, width});
  as_mat(out, C, L) = as_mat(yt, L, C).transpose();
  auto fn = [y, C, L](Tape& t, std::size_t self) {
    if (Tensor* gy = t.grad_sink(y)) as_mat(*gy, L, C) += as_mat(t.out_grad(self), C, L).transpose();
  };
  return tape.record(std::move(out), {y}, std::move(fn), "unplanar");
}

/// Stacks along axis 0; trailing axes must agree.
inline Var concat_channels(Tape& tape, std::span<const Var> xs) {
  if (xs.empty()) throw DimensionError("concat_channels: no inputs");
  Shape trailing(tape.shape(xs[0]).begin() + 1, tape.shape(xs[0]).end());
  std::size_t total = 0;
  for (Var v : xs) {
    const Shape& s = tape.shape(v);
    if (s.empty() || Shape(s.begin() + 1, s.end()) != trailing) {
      throw DimensionError("concat_channels: trailing shape " + shape_str(s) + " differs from " +
                           shape_str(tape.shape(xs[0])));
    }
    total += s[0];
  }
  Shape out_shape = tape.shape(xs[0]);
  out_shape[0] = total;
  Tensor out(out_shape);
  std::size_t off = 0;
  std::vector<std::pair<Var, std::size_t>> parts;
  for (Var v : xs) {
    const Tensor& t = tape.value(v);
    std::copy(t.data.begin(), t.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
    parts.emplace_back(v, off);
    off += t.numel();
  }
  auto fn = [parts](Tape& t, std::size_t self) {
    const Tensor& g = t.out_grad(self);
    for (auto [v, o] : parts) {
      if (Tensor* gv = t.grad_sink(v)) {
        for (std::size_t i = 0; i < gv->numel(); ++i) (*gv)[i] += g[o + i];
      }
    }
  };
  return tape.record(std::move(out), xs, std::move(fn), "concat_channels");
}

inline Var concat_channels(Tape& tape, std::initializer_list<Var> xs) {
  return concat_channels(tape, std::span<const Var>(xs.begin(), xs.size()));
}

/// Channels [begin, end) along axis 0.
inline Var slice_channels(Tape& tape, Var x, std::size_t begin, std::size_t end) {
  const Tensor& xt = tape.value(x);
  if (xt.rank() < 1 || begin >= end || end > xt.dim(0)) {
    throw DimensionError("slice_channels: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for " + shape_str(xt.shape));
  }
  const std::size_t inner = xt.numel() / xt.dim(0);
  Shape s = xt.shape;
  s[0] = end - begin;
  Tensor out(s, std::vector<double>(xt.data.begin() + static_cast<std::ptrdiff_t>(begin * inner),
                                    xt.data.begin() + static_cast<std::ptrdiff_t>(end * inner)));
  auto fn = [x, begin, inner](Tape& t, std::size_t self) {
    const Tensor& g = t.out_grad(self);
    Tensor* gx = t.grad_sink(x);
    for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[begin * inner + i] += g[i];
  };
  return tape.record(std::move(out), {x}, std::move(fn), "slice_channels");
}

/// Multiplies channel c of x (C×...) by s[c].
inline Var scale_channels(Tape& tape, Var x, Var s) {
  const Tensor& xt = tape.value(x);
  const Tensor& st = tape.value(s);
  detail::require_rank(st, 1, "scale_channels", "scales");
  if (xt.rank() < 1) throw DimensionError("scale_channels: input must have a channel axis");
  const std::size_t C = xt.dim(0);
  detail::require_dim(st.dim(0), C, "scale_channels", "scale length");
  const std::size_t inner = xt.numel() / C;
  Tensor out = xt;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < inner; ++i) out[c * inner + i] *= st[c];
  }
  auto fn = [x, s, C, inner](Tape& t, std::size_t self) {
    const Tensor& g = t.out_grad(self);
    const Tensor& xv = t.value(x);
    const Tensor& sv = t.value(s);
    if (Tensor* gx = t.grad_sink(x)) {
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < inner; ++i) (*gx)[c * inner + i] += g[c * inner + i] * sv[c];
      }
    }
    if (Tensor* gs = t.grad_sink(s)) {
      for (std::size_t c = 0; c < C; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < inner; ++i) acc += g[c * inner + i] * xv[c * inner + i];
        (*gs)[c] += acc;
      }
    }
  };
  return tape.record(std::move(out), {x, s}, std::move(fn), "scale_channels");
}

inline Var add(Tape& tape, Var a, Var b) {
  const Tensor& at = tape.value(a);
  const Tensor& bt = tape.value(b);
  if (at.shape != bt.shape) {
    throw DimensionError("add: shapes " + shape_str(at.shape) + " and " + shape_str(bt.shape) + " differ");
  }
  Tensor out = at;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bt[i];
  auto fn = [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.out_grad(self);
    detail::accumulate(t.grad_sink(a), g);
    detail::accumulate(t.grad_sink(b), g);
  };
  return tape.record(std::move(out), {a, b}, std::move(fn), "add");
}

/// Multiplies every element by a constant.
inline Var scale(Tape& tape, Var x, double factor) {
  Tensor out = tape.value(x);
  for (double& v : out.data) v *= factor;
  auto fn = [x, factor](Tape& t, std::size_t self) {
    const Tensor& g = t.out_grad(self);
    Tensor* gx = t.grad_sink(x);
    for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += factor * g[i];
  };
  return tape.record(std::move(out), {x}, std::move(fn), "scale");
}

/// Sum of all elements as a shape-[1] scalar.
inline Var sum(Tape& tape, Var x) {
  const Tensor& xt = tape.value(x);
  double acc = 0.0;
  for (double v : xt.data) acc += v;
  auto fn = [x](Tape& t, std::size_t self) {
    const double g = t.out_grad(self)[0];
    Tensor* gx = t.grad_sink(x);
    for (double& v : gx->data) v += g;
  };
  return tape.record(Tensor({1}, acc), {x}, std::move(fn), "sum");
}

/// Σ x_i·w_i against constant weights of the same shape.
inline Var weighted_sum(Tape& tape, Var x, Tensor weights) {
  const Tensor& xt = tape.value(x);
  if (xt.shape != weights.shape) {
    throw DimensionError("weighted_sum: shapes " + shape_str(xt.shape) + " and " + shape_str(weights.shape) +
                         " differ");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < xt.numel(); ++i) acc += xt[i] * weights[i];
  auto fn = [x, weights = std::move(weights)](Tape& t, std::size_t self) {
    const double g = t.out_grad(self)[0];
    Tensor* gx = t.grad_sink(x);
    for (std::size_t i = 0; i < weights.numel(); ++i) (*gx)[i] += g * weights[i];
  };
  return tape.record(Tensor({1}, acc), {x}, std::move(fn), "weighted_sum");
}

inline Var reshape(Tape& tape, Var x, Shape shape) {
  const Tensor& xt = tape.value(x);
  if (shape_numel(shape) != xt.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(xt.shape) + " as " + shape_str(shape));
  }
  Tensor out(std::move(shape), xt.data);
  auto fn = [x](Tape& t, std::size_t self) { detail::accumulate(t.grad_sink(x), t.out_grad(self)); };
  return tape.record(std::move(out), {x}, std::move(fn), "reshape");
}

}  // namespace rrnet::netops
