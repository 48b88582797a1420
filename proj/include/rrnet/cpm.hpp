#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include "rrnet/netops.hpp"

namespace rrnet::cpm {

using netops::ParamStore;
using netops::Tape;
using netops::Var;

inline constexpr const char* kTheta = "cpm.theta.w";
inline constexpr const char* kPhi = "cpm.phi.w";
inline constexpr const char* kG = "cpm.g.w";
inline constexpr const char* kMix1W = "cpm.mix1.w";
inline constexpr const char* kMix1B = "cpm.mix1.b";
inline constexpr const char* kMix2W = "cpm.mix2.w";
inline constexpr const char* kMix2B = "cpm.mix2.b";

/// θ, φ, g: bias-free 1×1 convs C->C. mix1, mix2: kernel-1 conv1d C->C with bias.
inline void init_params(ParamStore& store, std::size_t channels, std::mt19937_64& rng) {
  const std::size_t C = channels;
  store.add(kTheta, netops::uniform_init({C, C, 1, 1}, C, rng));
  store.add(kPhi, netops::uniform_init({C, C, 1, 1}, C, rng));
  store.add(kG, netops::uniform_init({C, C, 1, 1}, C, rng));
  store.add(kMix1W, netops::uniform_init({C, C, 1}, C, rng));
  store.add(kMix1B, netops::uniform_init({C}, C, rng));
  store.add(kMix2W, netops::uniform_init({C, C, 1}, C, rng));
  store.add(kMix2B, netops::uniform_init({C}, C, rng));
}

namespace detail {

inline std::size_t channels(const ParamStore& store) { return store.value(kTheta).dim(0); }

inline Var embed(Tape& tape, ParamStore& store, const char* name, Var x) {
  const std::size_t C = store.value(name).dim(0);
  return netops::conv2d(tape, x, tape.param(store, name), tape.constant(Tensor({C})));
}

inline void require_channels(Tape& tape, Var x, std::size_t C, const char* op) {
  const Shape& s = tape.shape(x);
  if (s.size() != 3 || s[0] != C) {
    throw DimensionError(std::string(op) + ": expected " + std::to_string(C) + " channels, got " + shape_str(s));
  }
}

}  // namespace detail

/// A = planar(θ(f_p))ᵀ · planar(φ(f_p)), so A_ij = Σ_ℓ θ[ℓ,i]·φ[ℓ,j]. Always C×C.
inline Var project_adjacency(Tape& tape, ParamStore& store, Var f_p) {
  using namespace netops;
  detail::require_channels(tape, f_p, detail::channels(store), "project_adjacency");
  Var theta = planar(tape, detail::embed(tape, store, kTheta, f_p));
  Var phi = planar(tape, detail::embed(tape, store, kPhi, f_p));
  return matmul(tape, transpose(tape, theta), phi);
}

/// A' = mix2((mix1(A)ᵀ)ᵀ ⊕ A): rows of A are the conv1d channels, kernel size 1.
inline Var spread_messages(Tape& tape, ParamStore& store, Var adjacency) {
  using namespace netops;
  const Shape& s = tape.shape(adjacency);
  if (s.size() != 2 || s[0] != s[1]) throw DimensionError("spread_messages: adjacency must be square, got " + shape_str(s));
  Var t = conv1d(tape, adjacency, tape.param(store, kMix1W), tape.param(store, kMix1B));
  Var merged = add(tape, transpose(tape, transpose(tape, t)), adjacency);
  return conv1d(tape, merged, tape.param(store, kMix2W), tape.param(store, kMix2B));
}

/// f_ad = reshape(planar(g(f_p)) · sigmoid(A')) back to C×H×W.
inline Var reverse_project(Tape& tape, ParamStore& store, Var updated, Var f_p) {
  using namespace netops;
  const std::size_t C = detail::channels(store);
  detail::require_channels(tape, f_p, C, "reverse_project");
  const Shape& a = tape.shape(updated);
  if (a.size() != 2 || a[0] != C || a[1] != C) {
    throw DimensionError("reverse_project: A' must be " + std::to_string(C) + "x" + std::to_string(C) + ", got " +
                         shape_str(a));
  }
  const Shape fs = tape.shape(f_p);
  Var g = planar(tape, detail::embed(tape, store, kG, f_p));
  Var y = matmul(tape, g, sigmoid(tape, updated));
  return unplanar(tape, y, fs[1], fs[2]);
}

struct CpmOutput {
  Var adjacency;  // A
  Var updated;    // A'
  Var f_ad;       // correlation encoding, C×H×W
  Var fused;      // concat(f_p, f_ad), 2C×H×W
};

inline CpmOutput cpm_forward(Tape& tape, ParamStore& store, Var f_p) {
  CpmOutput out;
  out.adjacency = project_adjacency(tape, store, f_p);
  out.updated = spread_messages(tape, store, out.adjacency);
  out.f_ad = reverse_project(tape, store, out.updated, f_p);
  out.fused = netops::concat_channels(tape, {f_p, out.f_ad});
  return out;
}

/// Row-major CSV of sigmoid(A'), C columns per row.
inline void write_gate_csv(const Tensor& updated, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  const std::size_t C = updated.dim(0);
  char buf[40];
  for (std::size_t i = 0; i < C; ++i) {
    for (std::size_t j = 0; j < C; ++j) {
      std::snprintf(buf, sizeof(buf), "%.9g", netops::sigmoid_scalar(updated[i * C + j]));
      os << (j ? "," : "") << buf;
    }
    os << '\n';
  }
}

}  // namespace rrnet::cpm
