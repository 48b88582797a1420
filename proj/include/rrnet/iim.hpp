#pragma once

#include <random>
#include <string>
#include <utility>

#include "rrnet/netops.hpp"

namespace rrnet::iim {

using netops::ParamStore;
using netops::Tape;
using netops::Var;

inline constexpr const char* kFc1W = "iim.fc1.w";
inline constexpr const char* kFc1B = "iim.fc1.b";
inline constexpr const char* kFc2W = "iim.fc2.w";
inline constexpr const char* kFc2B = "iim.fc2.b";

/// fc1: (H·W) -> hidden, fc2: hidden -> K.
inline void init_params(ParamStore& store, std::size_t plane_cells, std::size_t hidden, std::size_t num_classes,
                        std::mt19937_64& rng) {
  store.add(kFc1W, netops::uniform_init({hidden, plane_cells}, plane_cells, rng));
  store.add(kFc1B, netops::uniform_init({hidden}, plane_cells, rng));
  store.add(kFc2W, netops::uniform_init({num_classes, hidden}, hidden, rng));
  store.add(kFc2B, netops::uniform_init({num_classes}, hidden, rng));
}

/// Channel 0 (human) and channels 1..K (objects) of a (1+K)×H×W map.
inline std::pair<Var, Var> iim_split(Tape& tape, Var f_ho, std::size_t num_classes) {
  const Shape& s = tape.shape(f_ho);
  if (s.size() != 3 || s[0] != 1 + num_classes) {
    throw DimensionError("iim_split: expected " + std::to_string(1 + num_classes) + " channels, got " + shape_str(s));
  }
  return {netops::slice_channels(tape, f_ho, 0, 1), netops::slice_channels(tape, f_ho, 1, 1 + num_classes)};
}

struct IimOutput {
  Var f_ho;  // concat(f_h, β·f_o), same shape as the input
  Var beta;  // K interactive values in (0,1)
};

/// β = sigmoid(fc2(relu(fc1(flatten(f_h))))); object channel k is scaled by β_k.
inline IimOutput iim_forward(Tape& tape, ParamStore& store, Var f_ho) {
  using namespace netops;
  const std::size_t K = store.value(kFc2W).dim(0);
  auto [f_h, f_o] = iim_split(tape, f_ho, K);
  const Shape s = tape.shape(f_ho);
  Var flat = reshape(tape, f_h, {s[1] * s[2]});
  Var hidden = relu(tape, fully_connected(tape, flat, tape.param(store, kFc1W), tape.param(store, kFc1B)));
  Var beta = sigmoid(tape, fully_connected(tape, hidden, tape.param(store, kFc2W), tape.param(store, kFc2B)));
  Var f_o_scaled = scale_channels(tape, f_o, beta);
  return {concat_channels(tape, {f_h, f_o_scaled}), beta};
}

}  // namespace rrnet::iim
