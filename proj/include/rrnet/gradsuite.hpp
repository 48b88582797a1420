#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "rrnet/cpm.hpp"
#include "rrnet/frame.hpp"
#include "rrnet/gradcheck.hpp"
#include "rrnet/iim.hpp"
#include "rrnet/loss.hpp"
#include "rrnet/netops.hpp"

namespace rrnet::gradsuite {

using namespace rrnet::netops;

/// One randomly drawn problem: leaf inputs, parameters and the scalar built from them.
struct Instance {
  std::vector<Tensor> inputs;
  ParamStore store;
  ParamScalarBuilder build;
  FdOptions fd;
};

struct Case {
  std::string name;
  std::function<Instance(std::mt19937_64&)> make;
};

namespace detail {

inline std::size_t dim(std::mt19937_64& r, int lo, int hi) {
  return static_cast<std::size_t>(std::uniform_int_distribution<int>(lo, hi)(r));
}

/// Random projection so that every output element reaches the checked scalar.
inline Var project(Tape& t, Var out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return weighted_sum(t, out, random_tensor(t.shape(out), rng));
}

/// Case whose scalar depends only on its inputs.
inline Case plain(std::string name, std::function<std::vector<Shape>(std::mt19937_64&)> shapes, ScalarBuilder build) {
  return {std::move(name), [shapes = std::move(shapes), build = std::move(build)](std::mt19937_64& r) {
            Instance in;
            for (auto& s : shapes(r)) in.inputs.push_back(random_tensor(s, r));
            in.build = [build](Tape& t, ParamStore&, std::span<const Var> v) { return build(t, v); };
            return in;
          }};
}

}  // namespace detail

/// The differentiable operator set.
inline std::vector<Case> operator_cases() {
  using detail::dim;
  using detail::plain;
  using detail::project;
  std::vector<Case> cases;
  cases.push_back(plain(
      "conv2d",
      [](std::mt19937_64& r) {
        const auto c = dim(r, 1, 3), o = dim(r, 1, 3), k = std::size_t{r() % 2 ? 3u : 1u};
        return std::vector<Shape>{{c, dim(r, 2, 5), dim(r, 2, 5)}, {o, c, k, k}, {o}};
      },
      [](Tape& t, std::span<const Var> v) { return project(t, conv2d(t, v[0], v[1], v[2]), 1); }));
  cases.push_back(plain(
      "conv2d_stride2",
      [](std::mt19937_64& r) {
        const auto c = dim(r, 1, 3), o = dim(r, 1, 3);
        return std::vector<Shape>{{c, dim(r, 3, 6), dim(r, 3, 6)}, {o, c, 3, 3}, {o}};
      },
      [](Tape& t, std::span<const Var> v) { return project(t, conv2d(t, v[0], v[1], v[2], 2), 2); }));
  cases.push_back(plain(
      "conv1d",
      [](std::mt19937_64& r) {
        const auto c = dim(r, 1, 4), o = dim(r, 1, 4), k = std::size_t{r() % 2 ? 3u : 1u};
        return std::vector<Shape>{{c, dim(r, 2, 6)}, {o, c, k}, {o}};
      },
      [](Tape& t, std::span<const Var> v) { return project(t, conv1d(t, v[0], v[1], v[2]), 3); }));
  cases.push_back(plain(
      "fully_connected",
      [](std::mt19937_64& r) {
        const auto m = dim(r, 1, 6), p = dim(r, 1, 6);
        return std::vector<Shape>{{m}, {p, m}, {p}};
      },
      [](Tape& t, std::span<const Var> v) { return project(t, fully_connected(t, v[0], v[1], v[2]), 4); }));
  cases.push_back(plain(
      "relu", [](std::mt19937_64& r) { return std::vector<Shape>{{dim(r, 1, 4), dim(r, 1, 5)}}; },
      [](Tape& t, std::span<const Var> v) { return project(t, relu(t, v[0]), 5); }));
  cases.push_back(plain(
      "sigmoid", [](std::mt19937_64& r) { return std::vector<Shape>{{dim(r, 1, 4), dim(r, 1, 5)}}; },
      [](Tape& t, std::span<const Var> v) { return project(t, sigmoid(t, v[0]), 6); }));
  cases.push_back(plain(
      "matmul",
      [](std::mt19937_64& r) {
        const auto p = dim(r, 1, 5);
        return std::vector<Shape>{{dim(r, 1, 5), p}, {p, dim(r, 1, 5)}};
      },
      [](Tape& t, std::span<const Var> v) { return project(t, matmul(t, v[0], v[1]), 7); }));
  cases.push_back(plain(
      "transpose", [](std::mt19937_64& r) { return std::vector<Shape>{{dim(r, 1, 5), dim(r, 1, 5)}}; },
      [](Tape& t, std::span<const Var> v) { return project(t, transpose(t, v[0]), 8); }));
  cases.push_back(plain(
      "planar_unplanar",
      [](std::mt19937_64& r) { return std::vector<Shape>{{dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4)}}; },
      [](Tape& t, std::span<const Var> v) {
        const Shape s = t.shape(v[0]);
        Var p = planar(t, v[0]);
        Var a = project(t, p, 9);
        return add(t, a, project(t, unplanar(t, p, s[1], s[2]), 10));
      }));
  cases.push_back(plain(
      "concat_slice",
      [](std::mt19937_64& r) {
        const auto h = dim(r, 1, 4), w = dim(r, 1, 4);
        return std::vector<Shape>{{dim(r, 1, 3), h, w}, {dim(r, 1, 3), h, w}};
      },
      [](Tape& t, std::span<const Var> v) {
        Var c = concat_channels(t, {v[0], v[1], v[0]});
        return add(t, project(t, c, 11), project(t, slice_channels(t, c, 1, t.shape(c)[0]), 12));
      }));
  cases.push_back(plain(
      "scale_channels",
      [](std::mt19937_64& r) {
        const auto c = dim(r, 1, 4);
        return std::vector<Shape>{{c, dim(r, 1, 4), dim(r, 1, 4)}, {c}};
      },
      [](Tape& t, std::span<const Var> v) { return project(t, scale_channels(t, v[0], v[1]), 13); }));
  cases.push_back(plain(
      "add_scale_sum",
      [](std::mt19937_64& r) {
        const Shape s{dim(r, 1, 4), dim(r, 1, 4)};
        return std::vector<Shape>{s, s};
      },
      [](Tape& t, std::span<const Var> v) { return sum(t, add(t, v[0], scale(t, v[1], -1.5))); }));
  cases.push_back(plain(
      "reshape", [](std::mt19937_64& r) { return std::vector<Shape>{{dim(r, 1, 4), dim(r, 1, 4), 2}}; },
      [](Tape& t, std::span<const Var> v) { return project(t, reshape(t, v[0], {shape_numel(t.shape(v[0]))}), 14); }));
  return cases;
}

/// Head block, modules, losses and the assembled frame.
inline std::vector<Case> composite_cases() {
  using detail::dim;
  using detail::project;
  std::vector<Case> cases;
  cases.push_back({"head_apply", [](std::mt19937_64& r) {
                     Instance in;
                     const frame::HeadBlock h{"head", dim(r, 1, 3), dim(r, 2, 4), dim(r, 1, 3)};
                     frame::init_head(in.store, h, r);
                     in.inputs.push_back(random_tensor({h.in_dim, dim(r, 2, 5), dim(r, 2, 5)}, r));
                     in.build = [h](Tape& t, ParamStore& s, std::span<const Var> v) {
                       return project(t, frame::head_apply(t, s, h, v[0]), 21);
                     };
                     return in;
                   }});
  cases.push_back({"iim_forward", [](std::mt19937_64& r) {
                     Instance in;
                     const auto K = dim(r, 1, 3), H = dim(r, 2, 4), W = dim(r, 2, 4);
                     iim::init_params(in.store, H * W, dim(r, 2, 4), K, r);
                     in.inputs.push_back(random_tensor({1 + K, H, W}, r));
                     in.build = [](Tape& t, ParamStore& s, std::span<const Var> v) {
                       auto out = iim::iim_forward(t, s, v[0]);
                       return add(t, project(t, out.f_ho, 22), project(t, out.beta, 23));
                     };
                     return in;
                   }});
  cases.push_back({"cpm_forward", [](std::mt19937_64& r) {
                     Instance in;
                     const auto C = dim(r, 2, 4);
                     cpm::init_params(in.store, C, r);
                     in.inputs.push_back(random_tensor({C, dim(r, 2, 3), dim(r, 2, 3)}, r));
                     in.build = [](Tape& t, ParamStore& s, std::span<const Var> v) {
                       return project(t, cpm::cpm_forward(t, s, v[0]).fused, 24);
                     };
                     return in;
                   }});
  cases.push_back({"focal_loss", [](std::mt19937_64& r) {
                     Instance in;
                     const Shape s{dim(r, 1, 3), dim(r, 2, 4), dim(r, 2, 4)};
                     in.inputs.push_back(random_tensor(s, r, -3.0, 3.0));
                     Tensor gt = random_tensor(s, r, 0.0, 1.0);
                     for (std::size_t k = 0, n = dim(r, 0, 2); k < n; ++k) gt[r() % gt.numel()] = 1.0;
                     in.build = [gt](Tape& t, ParamStore&, std::span<const Var> v) {
                       return loss::focal_loss(t, sigmoid(t, v[0]), gt);
                     };
                     return in;
                   }});
  cases.push_back({"masked_l1", [](std::mt19937_64& r) {
                     Instance in;
                     const auto H = dim(r, 2, 4), W = dim(r, 2, 4);
                     const Shape s{dim(r, 1, 3), H, W};
                     in.inputs.push_back(random_tensor(s, r));
                     const Tensor gt = random_tensor(s, r);
                     Tensor mask({1, H, W});
                     for (double& m : mask.data) m = (r() % 2) ? 1.0 : 0.0;
                     in.build = [gt, mask](Tape& t, ParamStore&, std::span<const Var> v) {
                       return loss::masked_l1(t, v[0], gt, mask);
                     };
                     return in;
                   }});
  cases.push_back({"backbone", [](std::mt19937_64& r) {
                     Instance in;
                     frame::FrameConfig fc;
                     fc.backbone_dim = 4;
                     fc.hidden_dim = 3;
                     frame::ModelDims d{{2, 2, 4}, 8, 1, 1};
                     in.store = frame::init_params(fc, d, r());
                     for (auto it = in.store.entries().begin(); it != in.store.entries().end();) {
                       it = it->first.starts_with("backbone.") ? std::next(it) : in.store.entries().erase(it);
                     }
                     in.inputs.push_back(random_tensor({3, 8, 8}, r, 0.0, 1.0));
                     in.build = [fc, d](Tape& t, ParamStore& s, std::span<const Var> v) {
                       return project(t, frame::backbone(t, s, v[0], fc, d), 25);
                     };
                     in.fd.probes_per_input = 24;
                     return in;
                   }});
  cases.push_back({"forward_frame", [](std::mt19937_64& r) {
                     Instance in;
                     frame::FrameConfig fc;
                     fc.backbone_dim = 3;
                     fc.hidden_dim = 3;
                     fc.iim_hidden = 3;
                     const auto H = dim(r, 2, 3), W = dim(r, 2, 3);
                     frame::ModelDims d{{static_cast<int>(H), static_cast<int>(W), 1}, 0, 2, 2};
                     in.store = frame::init_params(fc, d, r());
                     in.inputs.push_back(random_tensor({3, H, W}, r));
                     in.build = [fc, d](Tape& t, ParamStore& s, std::span<const Var> v) {
                       const auto o = frame::forward_frame(t, s, v[0], fc, d);
                       Var acc = project(t, o.hm_ho, 26);
                       std::uint64_t seed = 27;
                       for (Var x : {o.hm_i, o.f_dh, o.f_do, o.f_wh, o.f_off}) acc = add(t, acc, project(t, x, seed++));
                       return acc;
                     };
                     in.fd.probes_per_input = 16;
                     return in;
                   }});
  return cases;
}

struct Row {
  std::string name;
  double max_rel_error = 0.0;
  int instances = 0;
  bool pass = false;
};

inline constexpr double kTolerance = 1e-4;

inline std::vector<Row> run(const std::vector<Case>& cases, std::uint64_t seed, int instances = 10) {
  std::vector<Row> rows;
  for (std::size_t k = 0; k < cases.size(); ++k) {
    const Case& c = cases[k];
    std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + k);
    Row row{c.name, 0.0, instances, false};
    for (int i = 0; i < instances; ++i) {
      Instance in = c.make(rng);
      in.fd.probe_seed = rng();
      row.max_rel_error = std::max(row.max_rel_error, max_relative_error(in.build, in.store, in.inputs, in.fd));
    }
    row.pass = row.max_rel_error <= kTolerance;
    rows.push_back(row);
  }
  return rows;
}

inline std::vector<Row> run_all(std::uint64_t seed, int instances = 10) {
  auto cases = operator_cases();
  for (auto& c : composite_cases()) cases.push_back(std::move(c));
  return run(cases, seed, instances);
}

inline std::string format_table(const std::vector<Row>& rows) {
  std::string s;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-18s %14s %9s  %s\n", "op", "max_rel_err", "instances", "status");
  s += buf;
  for (const Row& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-18s %14.6e %9d  %s\n", r.name.c_str(), r.max_rel_error, r.instances,
                  r.pass ? "ok" : "FAIL");
    s += buf;
  }
  return s;
}

}  // namespace rrnet::gradsuite
