#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "rrnet/netops.hpp"

namespace rrnet::loss {

using netops::Tape;
using netops::Var;

struct FocalHyper {
  double alpha = 2.0;
  double beta = 4.0;
  double eps = 1e-12;
};

/// Penalty-reduced pixel-wise focal loss, normalised by the number of y == 1 cells:
///   -1/max(1,n_pos) Σ [ y==1: (1-p)^α log p ;  y<1: (1-y)^β p^α log(1-p) ]
/// with p clamped to [eps, 1-eps].
inline Var focal_loss(Tape& tape, Var pred, const Tensor& gt, const FocalHyper& hp = {}) {
  const Tensor& p = tape.value(pred);
  if (p.shape != gt.shape) {
    throw DimensionError("focal_loss: prediction " + shape_str(p.shape) + " vs target " + shape_str(gt.shape));
  }
  std::size_t n_pos = 0;
  for (double y : gt.data) n_pos += (y == 1.0);
  const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(1, n_pos));
  const double lo = hp.eps, hi = 1.0 - hp.eps;
  double acc = 0.0;
  for (std::size_t i = 0; i < p.numel(); ++i) {
    const double q = std::clamp(p[i], lo, hi);
    if (gt[i] == 1.0) {
      acc += std::pow(1.0 - q, hp.alpha) * std::log(q);
    } else {
      acc += std::pow(1.0 - gt[i], hp.beta) * std::pow(q, hp.alpha) * std::log(1.0 - q);
    }
  }
  auto fn = [pred, gt, hp, norm, lo, hi](Tape& t, std::size_t self) {
    const double g = t.out_grad(self)[0] * -norm;
    const Tensor& pv = t.value(pred);
    Tensor* gp = t.grad_sink(pred);
    const double a = hp.alpha;
    for (std::size_t i = 0; i < pv.numel(); ++i) {
      if (pv[i] < lo || pv[i] > hi) continue;  // clamped: flat
      const double q = pv[i];
      double d;
      if (gt[i] == 1.0) {
        // d/dq (1-q)^a log q
        d = -a * std::pow(1.0 - q, a - 1.0) * std::log(q) + std::pow(1.0 - q, a) / q;
      } else {
        // d/dq (1-y)^b q^a log(1-q)
        const double w = std::pow(1.0 - gt[i], hp.beta);
        d = w * (a * std::pow(q, a - 1.0) * std::log(1.0 - q) - std::pow(q, a) / (1.0 - q));
      }
      (*gp)[i] += g * d;
    }
  };
  return tape.record(Tensor({1}, -norm * acc), {pred}, std::move(fn), "focal_loss");
}

/// Σ over mask==1 cells and all channels of |pred - gt|, divided by max(1, mask count).
/// pred, gt: C×H×W; mask: 1×H×W.
inline Var masked_l1(Tape& tape, Var pred, const Tensor& gt, const Tensor& mask) {
  const Tensor& p = tape.value(pred);
  if (p.shape != gt.shape || p.rank() != 3 || mask.rank() != 3 || mask.dim(0) != 1 || mask.dim(1) != p.dim(1) ||
      mask.dim(2) != p.dim(2)) {
    throw DimensionError("masked_l1: prediction " + shape_str(p.shape) + ", target " + shape_str(gt.shape) +
                         ", mask " + shape_str(mask.shape));
  }
  const std::size_t C = p.dim(0), HW = p.dim(1) * p.dim(2);
  std::size_t count = 0;
  for (double m : mask.data) count += (m == 1.0);
  const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(1, count));
  double acc = 0.0;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t l = 0; l < HW; ++l)
      if (mask[l] == 1.0) acc += std::abs(p[c * HW + l] - gt[c * HW + l]);
  auto fn = [pred, gt, mask, C, HW, norm](Tape& t, std::size_t self) {
    const double g = t.out_grad(self)[0] * norm;
    const Tensor& pv = t.value(pred);
    Tensor* gp = t.grad_sink(pred);
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t l = 0; l < HW; ++l) {
        if (mask[l] != 1.0) continue;
        const double d = pv[c * HW + l] - gt[c * HW + l];
        (*gp)[c * HW + l] += g * static_cast<double>((d > 0.0) - (d < 0.0));
      }
    }
  };
  return tape.record(Tensor({1}, acc * norm), {pred}, std::move(fn), "masked_l1");
}

struct LossBreakdown {
  double l_ho = 0.0;
  double l_i = 0.0;
  double l_dh = 0.0;
  double l_do = 0.0;
  double l_wh = 0.0;
  double l_off = 0.0;
  double total = 0.0;
  std::size_t n_pos = 0;
  bool operator==(const LossBreakdown&) const = default;
};

inline double combine(double l_ho, double l_i, double l_dh, double l_do, double l_wh, double l_off, double lambda) {
  return (l_ho + l_i) + lambda * (l_dh + l_do) + (l_wh + l_off);
}

/// Fills `total` from the six components: (L_ho + L_i) + λ(L_dh + L_do) + (L_wh + L_off).
inline LossBreakdown total_loss(LossBreakdown parts, double lambda = 0.1) {
  parts.total = combine(parts.l_ho, parts.l_i, parts.l_dh, parts.l_do, parts.l_wh, parts.l_off, lambda);
  return parts;
}

/// Component variables of one scene's objective.
struct LossVars {
  Var l_ho, l_i, l_dh, l_do, l_wh, l_off;
};

/// Recorded counterpart of total_loss().
inline Var total_loss(Tape& tape, const LossVars& v, double lambda = 0.1) {
  using namespace netops;
  Var point = add(tape, v.l_ho, v.l_i);
  Var disp = scale(tape, add(tape, v.l_dh, v.l_do), lambda);
  Var reg = add(tape, v.l_wh, v.l_off);
  return add(tape, add(tape, point, disp), reg);
}

}  // namespace rrnet::loss
