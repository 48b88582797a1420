#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rrnet/netops.hpp"

namespace rrnet::netops {

/// Builds a scalar from leaf variables recorded on `tape`.
using ScalarBuilder = std::function<Var(Tape&, std::span<const Var>)>;

struct FdOptions {
  double step = 1e-5;
  /// Coordinates probed per input; 0 probes every coordinate.
  std::size_t probes_per_input = 0;
  std::uint64_t probe_seed = 0;
};

/// Builds a scalar from leaf variables and the parameters of `store`.
using ParamScalarBuilder = std::function<Var(Tape&, ParamStore&, std::span<const Var>)>;

namespace detail {

inline std::vector<std::size_t> probe_coords(std::size_t n, const FdOptions& opt, std::mt19937_64& rng) {
  std::vector<std::size_t> coords(n);
  for (std::size_t j = 0; j < n; ++j) coords[j] = j;
  if (opt.probes_per_input && n > opt.probes_per_input) {
    for (std::size_t j = 0; j < opt.probes_per_input; ++j) std::swap(coords[j], coords[j + rng() % (n - j)]);
    coords.resize(opt.probes_per_input);
  }
  return coords;
}

}  // namespace detail

/// max over probed coordinates of |analytic - central difference| / max(1, |central difference|),
/// taken over every input tensor and every parameter of `store`.
/// The step shrinks (up to 1000x) while differences at h and h/2 disagree.
inline double max_relative_error(const ParamScalarBuilder& build, const ParamStore& store,
                                 const std::vector<Tensor>& inputs, const FdOptions& opt = {}) {
  ParamStore work_store = store;
  std::vector<Tensor> work = inputs;
  auto evaluate = [&] {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& x : work) vars.push_back(tape.constant(x));
    return tape.value(build(tape, work_store, vars))[0];
  };

  ParamStore grad_store = store;
  grad_store.zero_grad();
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& x : inputs) vars.push_back(tape.variable(x));
  tape.backward(build(tape, grad_store, vars));

  std::mt19937_64 rng(opt.probe_seed);
  double worst = 0.0;
  auto probe = [&](Tensor& target, const Tensor& analytic) {
    for (std::size_t j : detail::probe_coords(target.numel(), opt, rng)) {
      const double orig = target[j];
      auto central = [&](double h) {
        target[j] = orig + h;
        const double up = evaluate();
        target[j] = orig - h;
        const double down = evaluate();
        target[j] = orig;
        return (up - down) / (2.0 * h);
      };
      // A kink inside [x-h, x+h] (relu, |x|) makes the estimate depend on h; shrink until it does not.
      double h = opt.step, fd = central(h);
      for (int shrink = 0; shrink < 3; ++shrink) {
        const double half = central(h / 2.0);
        if (std::abs(fd - half) <= 1e-6 * std::max(1.0, std::abs(fd))) break;
        h /= 10.0;
        fd = central(h);
      }
      worst = std::max(worst, std::abs(analytic[j] - fd) / std::max(1.0, std::abs(fd)));
    }
  };
  for (std::size_t i = 0; i < inputs.size(); ++i) probe(work[i], tape.grad(vars[i]));
  for (auto& [name, e] : work_store.entries()) probe(e.value, grad_store.grad(name));
  return worst;
}

inline double max_relative_error(const ScalarBuilder& build, const std::vector<Tensor>& inputs,
                                 const FdOptions& opt = {}) {
  return max_relative_error([&](Tape& t, ParamStore&, std::span<const Var> v) { return build(t, v); }, ParamStore{},
                            inputs, opt);
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.data) v = u(rng);
  return t;
}

}  // namespace rrnet::netops
