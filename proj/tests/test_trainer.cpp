#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "rrnet/trainer.hpp"

using namespace rrnet;
using namespace rrnet::trainer;

namespace {

synthdata::DataConfig tiny_data(std::size_t n = 6) {
  synthdata::DataConfig c;
  c.image_size = 32;
  c.grid = {8, 8, 4};
  c.humans_per_scene = {1, 1};
  c.objects_per_scene = {1, 2};
  c.num_scenes = n;
  return c;
}

frame::FrameConfig tiny_frame() {
  frame::FrameConfig fc;
  fc.hidden_dim = 4;
  fc.backbone_dim = 4;
  fc.iim_hidden = 4;
  return fc;
}

TrainConfig tiny_train(std::size_t steps) {
  TrainConfig tc;
  tc.batch_size = 2;
  tc.total_steps = steps;
  tc.seed = 5;
  return tc;
}

std::filesystem::path fresh_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("rrnet_train_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST(Schedule, DropsAndEffectiveRate) {
  TrainConfig tc;
  tc.total_steps = 140;
  EXPECT_EQ(tc.drops(), (std::vector<std::size_t>{90, 119}));
  EXPECT_EQ(effective_lr(tc, 0), 5e-4);
  EXPECT_EQ(effective_lr(tc, 89), 5e-4);
  EXPECT_EQ(effective_lr(tc, 90), 5e-4 * 0.1);
  EXPECT_EQ(effective_lr(tc, 139), 5e-4 * 0.1 * 0.1);
  tc.lr_drop_steps = std::vector<std::size_t>{50, 10};
  EXPECT_THROW(tc.validate(), ConfigError);
  tc.lr_drop_steps = std::vector<std::size_t>{140};
  EXPECT_THROW(tc.validate(), ConfigError);
  tc.lr_drop_steps.reset();
  tc.total_steps = 0;
  EXPECT_THROW(tc.validate(), ConfigError);
}

TEST(Batches, DeterministicPermutationsPerEpoch) {
  EXPECT_EQ(batch_indices(3, 10, 4, 7), batch_indices(3, 10, 4, 7));
  std::multiset<std::size_t> epoch;
  for (std::size_t s = 0; s < 5; ++s)
    for (std::size_t i : batch_indices(3, 10, 2, s)) epoch.insert(i);
  EXPECT_EQ(epoch.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(epoch.count(i), 1u);
  EXPECT_NE(batch_indices(3, 10, 10, 0), batch_indices(4, 10, 10, 0));
}

TEST(Train, ZeroLearningRateLeavesParametersUnchanged) {
  const auto ds = synthdata::make_dataset(tiny_data());
  auto tc = tiny_train(1);
  tc.lr = 0.0;
  const ParamStore init = frame::init_params(tiny_frame(), model_dims(ds.config), tc.seed);
  ParamStore after;
  const auto rec = train(tiny_frame(), tc, ds, {}, &after);
  ASSERT_EQ(rec.history.size(), 1u);
  for (const auto& [name, e] : init.entries()) EXPECT_EQ(after.value(name), e.value) << name;
}

TEST(Train, RepeatedRunsAreBitIdentical) {
  const auto ds = synthdata::make_dataset(tiny_data());
  const auto a = train(tiny_frame(), tiny_train(4), ds);
  const auto b = train(tiny_frame(), tiny_train(4), ds);
  ASSERT_EQ(a.history.size(), 4u);
  EXPECT_EQ(a.history, b.history);
  for (const auto& h : a.history) EXPECT_EQ(h.total, loss::total_loss(h).total);
}

TEST(Train, WorkersDoNotChangeResults) {
  const auto ds = synthdata::make_dataset(tiny_data());
  auto tc = tiny_train(3);
  tc.batch_size = 3;
  const auto one = train(tiny_frame(), tc, ds);
  tc.workers = 2;
  const auto two = train(tiny_frame(), tc, ds);
  EXPECT_EQ(one.history, two.history);
}

TEST(Train, RunDirectoryAndResume) {
  const auto ds = synthdata::make_dataset(tiny_data());
  const auto dir = fresh_dir("resume");
  auto tc = tiny_train(4);
  tc.checkpoint_every = 2;
  TrainOptions opt;
  opt.run_dir = dir;
  opt.config_snapshot = json{{"train", to_json(tc)}};
  const auto full = train(tiny_frame(), tc, ds, opt);
  EXPECT_TRUE(std::filesystem::exists(dir / "config.json"));
  EXPECT_TRUE(std::filesystem::exists(checkpoint_path(dir, 2)));
  EXPECT_EQ(full.final_checkpoint, checkpoint_path(dir, 4));
  std::ifstream is(dir / "losses.csv");
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "step,l_ho,l_i,l_dh,l_do,l_wh,l_off,total");
  int rows = 0;
  while (std::getline(is, line)) ++rows;
  EXPECT_EQ(rows, 4);

  ParamStore mid = netops::load_checkpoint(checkpoint_path(dir, 2));
  EXPECT_EQ(mid.step(), 2);
  const auto rest = train_from(mid, tiny_frame(), tc, ds);
  ASSERT_EQ(rest.history.size(), 2u);
  EXPECT_EQ(rest.history[0], full.history[2]);
  EXPECT_EQ(rest.history[1], full.history[3]);
  EXPECT_EQ(mid, netops::load_checkpoint(full.final_checkpoint));
}

TEST(Train, NonFiniteParametersReportDivergence) {
  const auto ds = synthdata::make_dataset(tiny_data());
  ParamStore s = frame::init_params(tiny_frame(), model_dims(ds.config), 1);
  s.value("head_wh.conv_b.b")[0] = std::nan("");
  try {
    train_from(s, tiny_frame(), tiny_train(2), ds);
    FAIL();
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.step(), 0u);
    EXPECT_FALSE(e.component().empty());
  }
}

TEST(Infer, PredictionMapsHaveDecoderShapes) {
  const auto ds = synthdata::make_dataset(tiny_data(2));
  ParamStore s = frame::init_params(tiny_frame(), model_dims(ds.config), 1);
  const auto m = predict(s, tiny_frame(), model_dims(ds.config), ds.images[0].to_tensor());
  EXPECT_EQ(m.hm_h.shape, (Shape{1, 8, 8}));
  EXPECT_EQ(m.hm_o.shape, (Shape{3, 8, 8}));
  EXPECT_EQ(m.hm_i.shape, (Shape{4, 8, 8}));
  EXPECT_EQ(m.disp.shape, (Shape{4, 8, 8}));
  const auto dets = infer(s, tiny_frame(), ds, InferConfig{});
  ASSERT_EQ(dets.size(), 2u);
  EXPECT_EQ(dets[1].scene, 1u);
  const auto r = evaluate_dataset(dets, ds);
  EXPECT_GE(r.map_role, 0.0);
  EXPECT_LE(r.map_role, 1.0);
}

TEST(Ablate, EveryWiringRunsWithFiniteLosses) {
  const auto train_ds = synthdata::make_dataset(tiny_data(4));
  auto held = tiny_data(2);
  held.first_index = 4;
  const auto held_ds = synthdata::make_dataset(held);
  const auto rows = ablate(frame::ablation_wirings(tiny_frame()), tiny_train(2), train_ds, held_ds, InferConfig{});
  ASSERT_EQ(rows.size(), 9u);
  std::set<std::string> names;
  for (const auto& r : rows) {
    EXPECT_TRUE(r.finite) << r.wiring;
    EXPECT_TRUE(std::isfinite(r.final_loss));
    names.insert(r.wiring);
  }
  EXPECT_EQ(names.size(), 9u);
  const std::string csv = ablation_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "wiring,initial_loss,final_loss,train_map_role,heldout_map_role");
}
