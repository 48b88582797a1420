#pragma once

#include <algorithm>
#include <bit>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "rrnet/cpm.hpp"
#include "rrnet/errors.hpp"
#include "rrnet/geometry.hpp"
#include "rrnet/iim.hpp"
#include "rrnet/json_util.hpp"
#include "rrnet/netops.hpp"

namespace rrnet::frame {

using netops::ParamStore;
using netops::Tape;
using netops::Var;

/// Initial bias of the heatmap heads' last layer; sigmoid(-2.19) ≈ 0.1.
inline constexpr double kHeatmapPriorBias = -2.19;

struct FrameConfig {
  bool relation_part_a = true;
  bool relation_part_b = true;  // off: displacement heads read f_dla, not the concatenated head outputs
  bool use_iim = true;
  bool use_cpm = true;
  int hidden_dim = 64;
  int backbone_dim = 32;
  int iim_hidden = 32;

  void validate() const {
    if (use_iim && !relation_part_a) throw ConfigError("frame.use_iim requires frame.relation_part_a");
    if (use_cpm && !relation_part_b) throw ConfigError("frame.use_cpm requires frame.relation_part_b");
    if (hidden_dim < 1) throw ConfigError("frame.hidden_dim must be >= 1");
    if (backbone_dim < 2) throw ConfigError("frame.backbone_dim must be >= 2");
    if (iim_hidden < 1) throw ConfigError("frame.iim_hidden must be >= 1");
  }

  /// "baseline", "A", "B+CPM", "A+B+IIM+CPM", ...
  std::string label() const {
    std::string s;
    auto put = [&](bool on, const char* part) {
      if (on) s += (s.empty() ? "" : "+") + std::string(part);
    };
    put(relation_part_a, "A");
    put(relation_part_b, "B");
    put(use_iim, "IIM");
    put(use_cpm, "CPM");
    return s.empty() ? "baseline" : s;
  }
  bool operator==(const FrameConfig&) const = default;
};

inline json to_json(const FrameConfig& c) {
  return json{{"relation_part_a", c.relation_part_a}, {"relation_part_b", c.relation_part_b},
              {"use_iim", c.use_iim},                 {"use_cpm", c.use_cpm},
              {"hidden_dim", c.hidden_dim},           {"backbone_dim", c.backbone_dim},
              {"iim_hidden", c.iim_hidden}};
}

inline void apply_json(const json& j, FrameConfig& c) {
  reject_unknown_keys(
      j, {"relation_part_a", "relation_part_b", "use_iim", "use_cpm", "hidden_dim", "backbone_dim", "iim_hidden"},
      "frame");
  read_field(j, "relation_part_a", c.relation_part_a, "frame");
  read_field(j, "relation_part_b", c.relation_part_b, "frame");
  read_field(j, "use_iim", c.use_iim, "frame");
  read_field(j, "use_cpm", c.use_cpm, "frame");
  read_field(j, "hidden_dim", c.hidden_dim, "frame");
  read_field(j, "backbone_dim", c.backbone_dim, "frame");
  read_field(j, "iim_hidden", c.iim_hidden, "frame");
}

/// Problem dimensions the network is built for.
struct ModelDims {
  GridSpec grid;
  int image_size = 64;
  int num_object_classes = 3;  // K
  int num_verbs = 4;           // N

  std::size_t K() const { return static_cast<std::size_t>(num_object_classes); }
  std::size_t N() const { return static_cast<std::size_t>(num_verbs); }
  std::size_t point_channels() const { return 1 + K() + N(); }
};

/// conv_b(relu(conv_a(x))) with a 3×3 conv_a and a 1×1 conv_b.
struct HeadBlock {
  std::string name;
  std::size_t in_dim = 0;
  std::size_t hidden_dim = 0;
  std::size_t out_dim = 0;

  std::string conv_a_w() const { return name + ".conv_a.w"; }
  std::string conv_a_b() const { return name + ".conv_a.b"; }
  std::string conv_b_w() const { return name + ".conv_b.w"; }
  std::string conv_b_b() const { return name + ".conv_b.b"; }
};

inline void init_head(ParamStore& store, const HeadBlock& h, std::mt19937_64& rng) {
  const std::size_t fan_a = h.in_dim * 9;
  store.add(h.conv_a_w(), netops::uniform_init({h.hidden_dim, h.in_dim, 3, 3}, fan_a, rng));
  store.add(h.conv_a_b(), netops::uniform_init({h.hidden_dim}, fan_a, rng));
  store.add(h.conv_b_w(), netops::uniform_init({h.out_dim, h.hidden_dim, 1, 1}, h.hidden_dim, rng));
  store.add(h.conv_b_b(), netops::uniform_init({h.out_dim}, h.hidden_dim, rng));
}

inline Var head_apply(Tape& tape, ParamStore& store, const HeadBlock& h, Var x) {
  using namespace netops;
  const Shape& s = tape.shape(x);
  if (s.size() != 3 || s[0] != h.in_dim) {
    throw DimensionError(h.name + ": expected " + std::to_string(h.in_dim) + " input channels, got " + shape_str(s));
  }
  Var a = relu(tape, conv2d(tape, x, tape.param(store, h.conv_a_w()), tape.param(store, h.conv_a_b())));
  return conv2d(tape, a, tape.param(store, h.conv_b_w()), tape.param(store, h.conv_b_b()));
}

struct BackboneStage {
  std::string name;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  int stride = 1;
};

/// Every head and backbone stage of one configuration.
struct FrameLayout {
  std::vector<BackboneStage> backbone;
  HeadBlock ho, i, dh, do_, wh, off;
  std::size_t disp_in = 0;  // channels entering G_dh / G_do
};

/// Three 3×3 conv+relu stages, D/2 -> D -> D channels; the first log2(stride) stages have stride 2.
inline std::vector<BackboneStage> backbone_layout(const FrameConfig& fc, const ModelDims& d) {
  const int stride = d.grid.stride;
  if (stride < 1 || stride > 8 || !std::has_single_bit(static_cast<unsigned>(stride))) {
    throw ConfigError("grid stride must be 1, 2, 4 or 8 for the three-stage backbone, got " + std::to_string(stride));
  }
  const int halvings = std::countr_zero(static_cast<unsigned>(stride));
  const std::size_t D = static_cast<std::size_t>(fc.backbone_dim);
  const std::size_t widths[3] = {D / 2, D, D};
  std::vector<BackboneStage> out;
  std::size_t in = 3;
  for (int s = 0; s < 3; ++s) {
    out.push_back({"backbone.conv" + std::to_string(s + 1), in, widths[s], s < halvings ? 2 : 1});
    in = widths[s];
  }
  return out;
}

inline FrameLayout frame_layout(const FrameConfig& fc, const ModelDims& d) {
  fc.validate();
  FrameLayout L;
  L.backbone = backbone_layout(fc, d);
  const std::size_t D = static_cast<std::size_t>(fc.backbone_dim), hid = static_cast<std::size_t>(fc.hidden_dim);
  const std::size_t P = d.point_channels();
  L.ho = {"head_ho", D, hid, 1 + d.K()};
  L.i = {"head_i", fc.relation_part_a ? 1 + d.K() : D, hid, d.N()};
  // Without Part B the displacement heads read the shared feature; concatenated
  // independent head outputs would be the alternative.
  L.disp_in = fc.relation_part_b ? (fc.use_cpm ? 2 * P : P) : D;
  L.dh = {"head_dh", L.disp_in, hid, 2};
  L.do_ = {"head_do", L.disp_in, hid, 2};
  L.wh = {"head_wh", D, hid, 2};
  L.off = {"head_off", D, hid, 2};
  return L;
}

/// Fresh parameters: uniform ±1/√fan_in drawn in a fixed order from `seed`.
inline ParamStore init_params(const FrameConfig& fc, const ModelDims& d, std::uint64_t seed) {
  const FrameLayout L = frame_layout(fc, d);
  std::mt19937_64 rng(seed);
  ParamStore store;
  for (const BackboneStage& s : L.backbone) {
    const std::size_t fan = s.in_dim * 9;
    store.add(s.name + ".w", netops::uniform_init({s.out_dim, s.in_dim, 3, 3}, fan, rng));
    store.add(s.name + ".b", netops::uniform_init({s.out_dim}, fan, rng));
  }
  for (const HeadBlock* h : {&L.ho, &L.i, &L.dh, &L.do_, &L.wh, &L.off}) init_head(store, *h, rng);
  for (const HeadBlock* h : {&L.ho, &L.i}) {
    Tensor& b = store.entry(h->conv_b_b()).value;
    std::fill(b.data.begin(), b.data.end(), kHeatmapPriorBias);
  }
  const std::size_t cells = static_cast<std::size_t>(d.grid.cells());
  if (fc.use_iim) iim::init_params(store, cells, static_cast<std::size_t>(fc.iim_hidden), d.K(), rng);
  if (fc.use_cpm) cpm::init_params(store, d.point_channels(), rng);
  return store;
}

/// 3×S×S image -> D×H×W shared feature.
inline Var backbone(Tape& tape, ParamStore& store, Var image, const FrameConfig& fc, const ModelDims& d) {
  using namespace netops;
  const Shape& s = tape.shape(image);
  const auto S = static_cast<std::size_t>(d.image_size);
  if (s.size() != 3 || s[0] != 3 || s[1] != S || s[2] != S) {
    throw DimensionError("backbone: expected image 3x" + std::to_string(S) + "x" + std::to_string(S) + ", got " +
                         shape_str(s));
  }
  Var x = image;
  for (const BackboneStage& st : backbone_layout(fc, d)) {
    x = relu(tape, conv2d(tape, x, tape.param(store, st.name + ".w"), tape.param(store, st.name + ".b"), st.stride));
  }
  const Shape& o = tape.shape(x);
  if (o[1] != static_cast<std::size_t>(d.grid.height) || o[2] != static_cast<std::size_t>(d.grid.width)) {
    throw DimensionError("backbone: output " + shape_str(o) + " does not match the grid");
  }
  return x;
}

struct HeadOutputs {
  Var f_dla;
  Var f_ho;        // raw G_ho output, (1+K)×H×W
  Var f_ho_prime;  // IIM output when enabled, else f_ho
  Var beta;        // IIM only
  Var f_i;         // N×H×W
  Var f_p;         // Part B only: concat(f_ho', f_i)
  Var f_ad;        // CPM only
  Var adjacency;   // CPM only: A
  Var updated;     // CPM only: A'
  Var disp_input;
  Var f_dh, f_do, f_wh, f_off;
  Var hm_ho;       // sigmoid(f_ho)
  Var hm_h, hm_o, hm_i;
};

inline HeadOutputs forward_frame(Tape& tape, ParamStore& store, Var f_dla, const FrameConfig& fc, const ModelDims& d) {
  using namespace netops;
  const FrameLayout L = frame_layout(fc, d);
  HeadOutputs out;
  out.f_dla = f_dla;
  out.f_ho = head_apply(tape, store, L.ho, f_dla);
  out.f_ho_prime = out.f_ho;
  if (fc.use_iim) {
    auto r = iim::iim_forward(tape, store, out.f_ho);
    out.f_ho_prime = r.f_ho;
    out.beta = r.beta;
  }
  out.f_i = head_apply(tape, store, L.i, fc.relation_part_a ? out.f_ho_prime : f_dla);
  out.disp_input = f_dla;
  if (fc.relation_part_b) {
    out.f_p = concat_channels(tape, {out.f_ho_prime, out.f_i});
    out.disp_input = out.f_p;
    if (fc.use_cpm) {
      auto c = cpm::cpm_forward(tape, store, out.f_p);
      out.f_ad = c.f_ad;
      out.adjacency = c.adjacency;
      out.updated = c.updated;
      out.disp_input = c.fused;
    }
  }
  out.f_dh = head_apply(tape, store, L.dh, out.disp_input);
  out.f_do = head_apply(tape, store, L.do_, out.disp_input);
  out.f_wh = head_apply(tape, store, L.wh, f_dla);
  out.f_off = head_apply(tape, store, L.off, f_dla);
  out.hm_ho = sigmoid(tape, out.f_ho);
  out.hm_h = slice_channels(tape, out.hm_ho, 0, 1);
  out.hm_o = slice_channels(tape, out.hm_ho, 1, 1 + d.K());
  out.hm_i = sigmoid(tape, out.f_i);
  return out;
}

/// The nine wirings of the ablation grid, baseline first.
inline std::vector<FrameConfig> ablation_wirings(const FrameConfig& base) {
  std::vector<FrameConfig> out;
  for (auto [a, b, i, c] : {std::tuple{false, false, false, false}, {true, false, false, false},
                            {false, true, false, false}, {true, true, false, false}, {true, false, true, false},
                            {false, true, false, true}, {true, true, true, false}, {true, true, false, true},
                            {true, true, true, true}}) {
    FrameConfig fc = base;
    fc.relation_part_a = a;
    fc.relation_part_b = b;
    fc.use_iim = i;
    fc.use_cpm = c;
    out.push_back(fc);
  }
  return out;
}

}  // namespace rrnet::frame
