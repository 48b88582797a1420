#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "oracles.hpp"
#include "rrnet/cpm.hpp"
#include "rrnet/frame.hpp"
#include "rrnet/gradcheck.hpp"
#include "rrnet/iim.hpp"
#include "rrnet/loss.hpp"

using namespace rrnet;
using namespace rrnet::netops;

namespace {

Tensor rnd(Shape s, std::mt19937_64& rng) { return random_tensor(std::move(s), rng); }

void fill(ParamStore& s, const std::string& name, double v) {
  auto& t = s.value(name);
  std::fill(t.data.begin(), t.data.end(), v);
}

void zero_biases(ParamStore& s) {
  for (auto& [name, e] : s.entries())
    if (name.ends_with(".b")) std::fill(e.value.data.begin(), e.value.data.end(), 0.0);
}

frame::ModelDims small_dims() { return {{4, 4, 4}, 16, 3, 4}; }

frame::FrameConfig small_frame() {
  frame::FrameConfig fc;
  fc.hidden_dim = 6;
  fc.backbone_dim = 6;
  fc.iim_hidden = 5;
  return fc;
}

// C×C matrix of theta/phi/g (bias-free 1x1 conv) applied per location; planar layout L×C.
std::vector<double> embed_planar(const Tensor& w, const Tensor& x) {
  const std::size_t C = x.dim(0), L = x.dim(1) * x.dim(2);
  std::vector<double> out(L * C);
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t o = 0; o < C; ++o) {
      double s = 0;
      for (std::size_t c = 0; c < C; ++c) s += w[o * C + c] * x[c * L + l];
      out[l * C + o] = s;
    }
  return out;
}

}  // namespace

// ---- head blocks and backbone --------------------------------------------------

TEST(Head, ZeroInputZeroBiasGivesZero) {
  std::mt19937_64 rng(1);
  ParamStore s;
  const frame::HeadBlock h{"h", 3, 5, 2};
  frame::init_head(s, h, rng);
  zero_biases(s);
  Tape t;
  const Tensor& y = t.value(frame::head_apply(t, s, h, t.constant(Tensor({3, 4, 4}))));
  EXPECT_EQ(y.shape, (Shape{2, 4, 4}));
  for (double v : y.data) EXPECT_EQ(v, 0.0);
}

TEST(Head, EqualsManualChainAndChecksChannels) {
  std::mt19937_64 rng(2);
  ParamStore s;
  const frame::HeadBlock h{"h", 3, 4, 2};
  frame::init_head(s, h, rng);
  const Tensor x = rnd({3, 5, 6}, rng);
  Tape t;
  const Tensor got = t.value(frame::head_apply(t, s, h, t.constant(x)));
  const Tensor a = oracle::conv2d(x, s.value(h.conv_a_w()), s.value(h.conv_a_b()), 1);
  Tensor r = a;
  for (double& v : r.data) v = std::max(v, 0.0);
  const Tensor want = oracle::conv2d(r, s.value(h.conv_b_w()), s.value(h.conv_b_b()), 1);
  EXPECT_LE(oracle::max_abs_diff(got, want), 1e-12);
  EXPECT_THROW(frame::head_apply(t, s, h, t.constant(Tensor({2, 5, 6}))), DimensionError);
}

TEST(Backbone, ShapeZeroImageAndSizeCheck) {
  const auto fc = small_frame();
  const auto d = small_dims();
  ParamStore s = frame::init_params(fc, d, 5);
  zero_biases(s);
  Tape t;
  const Tensor& f = t.value(frame::backbone(t, s, t.constant(Tensor({3, 16, 16})), fc, d));
  EXPECT_EQ(f.shape, (Shape{6, 4, 4}));
  for (double v : f.data) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(frame::backbone(t, s, t.constant(Tensor({3, 12, 16})), fc, d), DimensionError);

  frame::ModelDims def{{16, 16, 4}, 64, 3, 4};
  frame::FrameConfig dfc;
  ParamStore ds = frame::init_params(dfc, def, 1);
  Tape t2;
  EXPECT_EQ(t2.shape(frame::backbone(t2, ds, t2.constant(Tensor({3, 64, 64}, 0.5)), dfc, def)), (Shape{32, 16, 16}));
}

TEST(Backbone, RejectsUnsupportedStride) {
  frame::ModelDims d{{4, 4, 3}, 12, 1, 1};
  EXPECT_THROW(frame::init_params(small_frame(), d, 1), ConfigError);
}

// ---- wiring ----------------------------------------------------------------------

TEST(Frame, ConfigInvariants) {
  frame::FrameConfig fc;
  fc.relation_part_a = false;
  EXPECT_THROW(fc.validate(), ConfigError);
  fc = {};
  fc.relation_part_b = false;
  EXPECT_THROW(fc.validate(), ConfigError);
  EXPECT_EQ(frame::FrameConfig{}.label(), "A+B+IIM+CPM");
  const auto w = frame::ablation_wirings({});
  EXPECT_EQ(w.size(), 9u);
  std::set<std::string> labels;
  for (const auto& c : w) {
    EXPECT_NO_THROW(c.validate());
    labels.insert(c.label());
  }
  EXPECT_EQ(labels.size(), 9u);
  EXPECT_EQ(w.front().label(), "baseline");
}

TEST(Frame, ChannelContractHoldsForEveryWiring) {
  const auto d = small_dims();
  std::mt19937_64 rng(3);
  const Tensor f = rnd({6, 4, 4}, rng);
  for (const auto& fc : frame::ablation_wirings(small_frame())) {
    ParamStore s = frame::init_params(fc, d, 9);
    Tape t;
    const auto o = frame::forward_frame(t, s, t.constant(f), fc, d);
    EXPECT_EQ(t.shape(o.f_ho), (Shape{4, 4, 4})) << fc.label();
    EXPECT_EQ(t.shape(o.f_i), (Shape{4, 4, 4}));
    for (Var v : {o.f_dh, o.f_do, o.f_wh, o.f_off}) EXPECT_EQ(t.shape(v), (Shape{2, 4, 4}));
    EXPECT_EQ(t.shape(o.hm_h), (Shape{1, 4, 4}));
    EXPECT_EQ(t.shape(o.hm_o), (Shape{3, 4, 4}));
    for (Var v : {o.hm_h, o.hm_o, o.hm_i})
      for (double x : t.value(v).data) EXPECT_TRUE(x > 0.0 && x < 1.0);
    if (fc.relation_part_b) EXPECT_EQ(t.shape(o.f_p)[0], 8u);
    if (fc.use_cpm) EXPECT_EQ(t.shape(o.disp_input)[0], 16u);
  }
}

TEST(Frame, BaselineIsolatesInteractionHead) {
  const auto d = small_dims();
  std::mt19937_64 rng(4);
  const Tensor f = rnd({6, 4, 4}, rng);
  frame::FrameConfig base = frame::ablation_wirings(small_frame())[0];
  ParamStore s = frame::init_params(base, d, 2);
  auto f_i = [&](ParamStore& p) {
    Tape t;
    return t.value(frame::forward_frame(t, p, t.constant(f), base, d).f_i);
  };
  const Tensor before = f_i(s);
  for (double& v : s.value("head_ho.conv_a.w").data) v += 0.3;
  EXPECT_EQ(f_i(s), before);

  auto grad_norm = [&](const frame::FrameConfig& fc) {
    ParamStore p = frame::init_params(fc, d, 2);
    Tape t;
    const auto o = frame::forward_frame(t, p, t.constant(f), fc, d);
    Tensor gt({4, 4, 4});
    gt.at(1, 2, 2) = 1.0;
    t.backward(loss::focal_loss(t, o.hm_i, gt));
    double n = 0;
    for (const char* name : {"head_ho.conv_a.w", "head_ho.conv_b.w", "head_ho.conv_b.b"})
      for (double g : p.grad(name).data) n += std::abs(g);
    return n;
  };
  EXPECT_EQ(grad_norm(base), 0.0);
  frame::FrameConfig part_a = base;
  part_a.relation_part_a = true;
  EXPECT_GT(grad_norm(part_a), 0.0);
}

TEST(Frame, BitIdenticalForSameSeed) {
  const auto d = small_dims();
  const auto fc = small_frame();
  std::mt19937_64 rng(6);
  const Tensor img = random_tensor({3, 16, 16}, rng, 0.0, 1.0);
  auto run = [&] {
    ParamStore s = frame::init_params(fc, d, 11);
    Tape t;
    const auto o = frame::forward_frame(t, s, frame::backbone(t, s, t.constant(img), fc, d), fc, d);
    return std::vector<Tensor>{t.value(o.f_ho), t.value(o.f_i), t.value(o.f_dh), t.value(o.f_do),
                               t.value(o.f_wh), t.value(o.f_off)};
  };
  EXPECT_EQ(run(), run());
}

TEST(Frame, HeatmapBiasPrior) {
  ParamStore s = frame::init_params(small_frame(), small_dims(), 1);
  for (double b : s.value("head_ho.conv_b.b").data) EXPECT_EQ(b, -2.19);
  for (double b : s.value("head_i.conv_b.b").data) EXPECT_EQ(b, -2.19);
}

// ---- IIM -------------------------------------------------------------------------

TEST(Iim, SplitIsAPartition) {
  std::mt19937_64 rng(7);
  const Tensor x = rnd({4, 3, 5}, rng);
  Tape t;
  auto [h, o] = iim::iim_split(t, t.constant(x), 3);
  EXPECT_EQ(t.shape(h), (Shape{1, 3, 5}));
  EXPECT_EQ(t.shape(o), (Shape{3, 3, 5}));
  EXPECT_EQ(t.value(concat_channels(t, {h, o})), x);
  EXPECT_THROW(iim::iim_split(t, t.constant(x), 2), DimensionError);

  Tape g;
  Var v = g.variable(x);
  auto [gh, go] = iim::iim_split(g, v, 3);
  g.backward(sum(g, gh));
  const Tensor grad = g.grad(v);
  for (std::size_t i = 0; i < grad.numel(); ++i) EXPECT_EQ(grad[i], i < 15 ? 1.0 : 0.0);
}

TEST(Iim, ScalingMatchesLoopOracle) {
  std::mt19937_64 rng(8);
  for (int n = 0; n < 5; ++n) {
    const std::size_t K = 1 + rng() % 3, H = 2 + rng() % 3, W = 2 + rng() % 3;
    ParamStore s;
    iim::init_params(s, H * W, 4, K, rng);
    const Tensor x = rnd({1 + K, H, W}, rng);
    Tape t;
    const auto out = iim::iim_forward(t, s, t.constant(x));
    const Tensor& y = t.value(out.f_ho);
    const Tensor& beta = t.value(out.beta);
    ASSERT_EQ(y.shape, x.shape);
    for (std::size_t k = 0; k < K; ++k) EXPECT_TRUE(beta[k] > 0.0 && beta[k] < 1.0);
    // beta recomputed independently.
    std::vector<double> hidden(4), b(K);
    for (std::size_t j = 0; j < 4; ++j) {
      double a = s.value("iim.fc1.b")[j];
      for (std::size_t l = 0; l < H * W; ++l) a += s.value("iim.fc1.w")[j * H * W + l] * x[l];
      hidden[j] = std::max(a, 0.0);
    }
    for (std::size_t k = 0; k < K; ++k) {
      double a = s.value("iim.fc2.b")[k];
      for (std::size_t j = 0; j < 4; ++j) a += s.value("iim.fc2.w")[k * 4 + j] * hidden[j];
      b[k] = 1.0 / (1.0 + std::exp(-a));
      EXPECT_NEAR(beta[k], b[k], 1e-12);
    }
    for (std::size_t l = 0; l < H * W; ++l) EXPECT_EQ(y[l], x[l]);
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t l = 0; l < H * W; ++l) EXPECT_NEAR(y[(1 + k) * H * W + l], b[k] * x[(1 + k) * H * W + l], 1e-12);
  }
}

TEST(Iim, SaturatedGateSuppressesObjects) {
  std::mt19937_64 rng(9);
  ParamStore s;
  iim::init_params(s, 9, 4, 2, rng);
  fill(s, "iim.fc2.w", 0.0);
  fill(s, "iim.fc2.b", -20.0);
  const Tensor x = rnd({3, 3, 3}, rng);
  double mx = 0;
  for (std::size_t i = 9; i < 27; ++i) mx = std::max(mx, std::abs(x[i]));
  Tape t;
  const Tensor& y = t.value(iim::iim_forward(t, s, t.constant(x)).f_ho);
  for (std::size_t i = 9; i < 27; ++i) EXPECT_LE(std::abs(y[i]), 2.1e-9 * mx);
}

TEST(Iim, HumanChannelDrivesObjectChannels) {
  std::mt19937_64 rng(10);
  ParamStore s;
  iim::init_params(s, 9, 4, 2, rng);
  Tape t;
  Var x = t.variable(rnd({3, 3, 3}, rng));
  auto out = iim::iim_forward(t, s, x);
  t.backward(sum(t, slice_channels(t, out.f_ho, 1, 3)));
  const Tensor g = t.grad(x);
  double cross = 0;
  for (std::size_t i = 0; i < 9; ++i) cross += std::abs(g[i]);
  EXPECT_GT(cross, 0.0);
}

// ---- CPM -------------------------------------------------------------------------

TEST(Cpm, AdjacencyMatchesDoubleLoopOracle) {
  std::mt19937_64 rng(11);
  ParamStore s;
  cpm::init_params(s, 4, rng);
  const Tensor x = rnd({4, 2, 2}, rng);
  Tape t;
  const Tensor& a = t.value(cpm::project_adjacency(t, s, t.constant(x)));
  ASSERT_EQ(a.shape, (Shape{4, 4}));
  const auto th = embed_planar(s.value("cpm.theta.w"), x), ph = embed_planar(s.value("cpm.phi.w"), x);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      double v = 0;
      for (std::size_t l = 0; l < 4; ++l) v += th[l * 4 + i] * ph[l * 4 + j];
      EXPECT_NEAR(a[i * 4 + j], v, 1e-12);
    }
}

TEST(Cpm, AdjacencyPropertiesZeroSwapPermutation) {
  std::mt19937_64 rng(12);
  ParamStore s;
  cpm::init_params(s, 5, rng);
  const Tensor x = rnd({5, 3, 4}, rng);
  auto adj = [&](ParamStore& p, const Tensor& in) {
    Tape t;
    return t.value(cpm::project_adjacency(t, p, t.constant(in)));
  };
  const Tensor a = adj(s, x);
  EXPECT_EQ(a.shape, (Shape{5, 5}));

  ParamStore swapped = s;
  std::swap(swapped.value("cpm.theta.w"), swapped.value("cpm.phi.w"));
  const Tensor b = adj(swapped, x);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(b[i * 5 + j], a[j * 5 + i], 1e-12);

  std::vector<std::size_t> perm(12);
  for (std::size_t l = 0; l < 12; ++l) perm[l] = l;
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor xp = x;
  for (std::size_t c = 0; c < 5; ++c)
    for (std::size_t l = 0; l < 12; ++l) xp[c * 12 + l] = x[c * 12 + perm[l]];
  EXPECT_LE(oracle::max_abs_diff(adj(s, xp), a), 1e-12);

  ParamStore z = s;
  fill(z, "cpm.theta.w", 0.0);
  for (double v : adj(z, x).data) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(adj(s, rnd({4, 3, 4}, rng)), DimensionError);
}

TEST(Cpm, SpreadMessages) {
  std::mt19937_64 rng(13);
  ParamStore s;
  cpm::init_params(s, 4, rng);
  auto spread = [&](ParamStore& p, const Tensor& a) {
    Tape t;
    return t.value(cpm::spread_messages(t, p, t.constant(a)));
  };
  ParamStore zb = s;
  fill(zb, "cpm.mix1.b", 0.0);
  fill(zb, "cpm.mix2.b", 0.0);
  for (double v : spread(zb, Tensor({4, 4})).data) EXPECT_EQ(v, 0.0);

  ParamStore id = zb;
  fill(id, "cpm.mix1.w", 0.0);
  fill(id, "cpm.mix2.w", 0.0);
  for (std::size_t i = 0; i < 4; ++i) id.value("cpm.mix2.w")[i * 4 + i] = 1.0;
  const Tensor a = rnd({4, 4}, rng);
  EXPECT_EQ(spread(id, a), a);

  // Matrix form: A' = M2 (M1 A + b1 1ᵀ + A) + b2 1ᵀ.
  const Tensor got = spread(s, a);
  const auto& m1 = s.value("cpm.mix1.w");
  const auto& m2 = s.value("cpm.mix2.w");
  Tensor mid({4, 4});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      double v = s.value("cpm.mix1.b")[i];
      for (std::size_t k = 0; k < 4; ++k) v += m1[i * 4 + k] * a[k * 4 + j];
      mid[i * 4 + j] = v + a[i * 4 + j];
    }
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      double v = s.value("cpm.mix2.b")[i];
      for (std::size_t k = 0; k < 4; ++k) v += m2[i * 4 + k] * mid[k * 4 + j];
      EXPECT_NEAR(got[i * 4 + j], v, 1e-12);
    }
  Tape t;
  EXPECT_THROW(cpm::spread_messages(t, s, t.constant(Tensor({4, 3}))), DimensionError);
}

TEST(Cpm, ReverseProjection) {
  std::mt19937_64 rng(14);
  ParamStore s;
  cpm::init_params(s, 4, rng);
  const Tensor x = rnd({4, 3, 3}, rng);
  auto rev = [&](const Tensor& ap) {
    Tape t;
    return t.value(cpm::reverse_project(t, s, t.constant(ap), t.constant(x)));
  };
  const auto g = embed_planar(s.value("cpm.g.w"), x);
  double gmax = 0;
  for (double v : g) gmax = std::max(gmax, std::abs(v));
  for (double v : rev(Tensor({4, 4}, -30.0)).data) EXPECT_LE(std::abs(v), 4 * 1e-13 * gmax);

  Tensor diag({4, 4}, -30.0);
  for (std::size_t i = 0; i < 4; ++i) diag[i * 4 + i] = 30.0;
  const Tensor near_id = rev(diag);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t l = 0; l < 9; ++l) {
      const double want = g[l * 4 + c];
      EXPECT_NEAR(near_id[c * 9 + l], want, 1e-10 * std::max(1.0, std::abs(want)));
    }

  const Tensor ap = rnd({4, 4}, rng);
  const Tensor got = rev(ap);
  for (std::size_t l = 0; l < 9; ++l)
    for (std::size_t j = 0; j < 4; ++j) {
      double v = 0;
      for (std::size_t i = 0; i < 4; ++i) v += g[l * 4 + i] * (1.0 / (1.0 + std::exp(-ap[i * 4 + j])));
      EXPECT_NEAR(got[j * 9 + l], v, 1e-12);
    }
}

TEST(Cpm, ForwardConcatenatesAndPassesThrough) {
  std::mt19937_64 rng(15);
  ParamStore s;
  cpm::init_params(s, 3, rng);
  const Tensor x = rnd({3, 4, 2}, rng);
  Tape t;
  const auto out = cpm::cpm_forward(t, s, t.constant(x));
  EXPECT_EQ(t.shape(out.fused), (Shape{6, 4, 2}));
  EXPECT_EQ(t.value(slice_channels(t, out.fused, 0, 3)), x);
  for (double v : t.value(out.f_ad).data) EXPECT_TRUE(std::isfinite(v));
  for (double v : t.value(out.updated).data) {
    const double g = sigmoid_scalar(v);
    EXPECT_TRUE(g > 0.0 && g < 1.0);
  }
}
