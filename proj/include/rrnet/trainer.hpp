#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "rrnet/decoder.hpp"
#include "rrnet/evaluator.hpp"
#include "rrnet/frame.hpp"
#include "rrnet/json_util.hpp"
#include "rrnet/loss.hpp"
#include "rrnet/netops.hpp"
#include "rrnet/synthdata.hpp"

namespace rrnet::trainer {

using frame::FrameConfig;
using frame::ModelDims;
using netops::ParamStore;
using netops::Tape;
using netops::Var;
using synthdata::DataConfig;
using synthdata::Dataset;

struct TrainConfig {
  std::size_t batch_size = 8;
  std::size_t total_steps = 2000;
  double lr = 5e-4;
  std::optional<std::vector<std::size_t>> lr_drop_steps;  // unset: ⌊0.643·T⌋, ⌊0.857·T⌋
  double lr_drop_factor = 0.1;
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  double lambda = 0.1;
  loss::FocalHyper focal;
  int workers = 1;

  std::vector<std::size_t> drops() const {
    if (lr_drop_steps) return *lr_drop_steps;
    const double T = static_cast<double>(total_steps);
    return {static_cast<std::size_t>(std::floor(0.643 * T)), static_cast<std::size_t>(std::floor(0.857 * T))};
  }

  void validate() const {
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (total_steps < 1) throw ConfigError("train.total_steps must be >= 1");
    if (!(lr >= 0.0)) throw ConfigError("train.lr must be >= 0");
    if (!(lr_drop_factor > 0.0)) throw ConfigError("train.lr_drop_factor must be > 0");
    if (workers < 1) throw ConfigError("train.workers must be >= 1");
    const auto d = drops();
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (d[i] >= total_steps) throw ConfigError("train.lr_drop_steps must be < train.total_steps");
      if (i && d[i] < d[i - 1]) throw ConfigError("train.lr_drop_steps must be sorted ascending");
    }
  }
};

inline json to_json(const TrainConfig& c) {
  json j{{"batch_size", c.batch_size},     {"total_steps", c.total_steps}, {"lr", c.lr},
         {"lr_drop_factor", c.lr_drop_factor}, {"seed", c.seed},           {"checkpoint_every", c.checkpoint_every},
         {"lambda", c.lambda},
         {"focal", {{"alpha", c.focal.alpha}, {"beta", c.focal.beta}, {"eps", c.focal.eps}}},
         {"workers", c.workers}};
  j["lr_drop_steps"] = c.lr_drop_steps ? json(*c.lr_drop_steps) : json(nullptr);
  return j;
}

inline void apply_json(const json& j, TrainConfig& c) {
  reject_unknown_keys(j,
                      {"batch_size", "total_steps", "lr", "lr_drop_steps", "lr_drop_factor", "seed",
                       "checkpoint_every", "lambda", "focal", "workers"},
                      "train");
  read_field(j, "batch_size", c.batch_size, "train");
  read_field(j, "total_steps", c.total_steps, "train");
  read_field(j, "lr", c.lr, "train");
  if (auto it = j.find("lr_drop_steps"); it != j.end()) {
    if (it->is_null()) {
      c.lr_drop_steps.reset();
    } else {
      std::vector<std::size_t> v;
      read_field(j, "lr_drop_steps", v, "train");
      c.lr_drop_steps = v;
    }
  }
  read_field(j, "lr_drop_factor", c.lr_drop_factor, "train");
  read_field(j, "seed", c.seed, "train");
  read_field(j, "checkpoint_every", c.checkpoint_every, "train");
  read_field(j, "lambda", c.lambda, "train");
  if (auto f = j.find("focal"); f != j.end()) {
    reject_unknown_keys(*f, {"alpha", "beta", "eps"}, "train.focal");
    read_field(*f, "alpha", c.focal.alpha, "train.focal");
    read_field(*f, "beta", c.focal.beta, "train.focal");
    read_field(*f, "eps", c.focal.eps, "train.focal");
  }
  read_field(j, "workers", c.workers, "train");
}

/// lr · factor^{|{d ∈ drops : d ≤ step}|}
inline double effective_lr(const TrainConfig& c, std::size_t step) {
  double lr = c.lr;
  for (std::size_t d : c.drops())
    if (d <= step) lr *= c.lr_drop_factor;
  return lr;
}

/// Scene indices of batch `step`: consecutive slices of per-epoch Fisher-Yates permutations.
/// Depends only on (seed, n, batch, step), so a resumed run sees the same batches.
inline std::vector<std::size_t> batch_indices(std::uint64_t seed, std::size_t n, std::size_t batch, std::size_t step) {
  if (n == 0) throw ConfigError("training needs a nonempty dataset");
  std::vector<std::size_t> out;
  std::size_t pos = step * batch;
  std::size_t cached_epoch = static_cast<std::size_t>(-1);
  std::vector<std::size_t> perm(n);
  while (out.size() < batch) {
    const std::size_t epoch = pos / n;
    if (epoch != cached_epoch) {
      for (std::size_t i = 0; i < n; ++i) perm[i] = i;
      std::mt19937_64 rng(synthdata::detail::splitmix64(seed ^ synthdata::detail::splitmix64(epoch + 0xBA7C4)));
      for (std::size_t i = n; i > 1; --i) {
        const auto j = static_cast<std::size_t>(synthdata::detail::uniform_int(rng, 0, static_cast<int>(i - 1)));
        std::swap(perm[i - 1], perm[j]);
      }
      cached_epoch = epoch;
    }
    out.push_back(perm[pos % n]);
    ++pos;
  }
  return out;
}

inline ModelDims model_dims(const DataConfig& d) {
  return {d.grid, d.image_size, d.num_object_classes, d.num_verbs};
}

/// Image tensor and encoded targets of one scene.
struct Sample {
  Tensor image;
  synthdata::TargetMaps targets;
  Tensor hm_ho;  // concat(hm_h, hm_o)
  Tensor disp_h, disp_o;
};

inline Sample make_sample(const Dataset& ds, std::size_t i) {
  Sample s;
  s.image = ds.images[i].to_tensor();
  s.targets = synthdata::encode_targets(ds.scenes[i], ds.config);
  const auto& t = s.targets;
  const std::size_t HW = t.hm_h.numel();
  s.hm_ho = Tensor({1 + t.hm_o.dim(0), t.hm_h.dim(1), t.hm_h.dim(2)});
  std::copy(t.hm_h.data.begin(), t.hm_h.data.end(), s.hm_ho.data.begin());
  std::copy(t.hm_o.data.begin(), t.hm_o.data.end(), s.hm_ho.data.begin() + static_cast<std::ptrdiff_t>(HW));
  s.disp_h = Tensor({2, t.hm_h.dim(1), t.hm_h.dim(2)});
  s.disp_o = s.disp_h;
  std::copy(t.disp.data.begin(), t.disp.data.begin() + static_cast<std::ptrdiff_t>(2 * HW), s.disp_h.data.begin());
  std::copy(t.disp.data.begin() + static_cast<std::ptrdiff_t>(2 * HW), t.disp.data.end(), s.disp_o.data.begin());
  return s;
}

struct SceneObjective {
  loss::LossVars parts;
  Var total;
  std::size_t n_pos = 0;
};

inline SceneObjective scene_objective(Tape& tape, const frame::HeadOutputs& out, const Sample& s,
                                      const loss::FocalHyper& hp, double lambda) {
  SceneObjective o;
  o.parts.l_ho = loss::focal_loss(tape, out.hm_ho, s.hm_ho, hp);
  o.parts.l_i = loss::focal_loss(tape, out.hm_i, s.targets.hm_i, hp);
  o.parts.l_dh = loss::masked_l1(tape, out.f_dh, s.disp_h, s.targets.disp_mask);
  o.parts.l_do = loss::masked_l1(tape, out.f_do, s.disp_o, s.targets.disp_mask);
  o.parts.l_wh = loss::masked_l1(tape, out.f_wh, s.targets.wh, s.targets.reg_mask);
  o.parts.l_off = loss::masked_l1(tape, out.f_off, s.targets.off, s.targets.reg_mask);
  o.total = loss::total_loss(tape, o.parts, lambda);
  for (const Tensor* t : {&s.hm_ho, &s.targets.hm_i})
    for (double y : t->data) o.n_pos += (y == 1.0);
  return o;
}

inline loss::LossBreakdown breakdown(const Tape& tape, const SceneObjective& o) {
  loss::LossBreakdown b;
  b.l_ho = tape.value(o.parts.l_ho)[0];
  b.l_i = tape.value(o.parts.l_i)[0];
  b.l_dh = tape.value(o.parts.l_dh)[0];
  b.l_do = tape.value(o.parts.l_do)[0];
  b.l_wh = tape.value(o.parts.l_wh)[0];
  b.l_off = tape.value(o.parts.l_off)[0];
  b.total = tape.value(o.total)[0];
  b.n_pos = o.n_pos;
  return b;
}

/// Gradient of one scene's loss, scaled by `weight`, keyed in store order.
struct SceneGrad {
  loss::LossBreakdown losses;
  std::vector<Tensor> grads;
};

inline SceneGrad scene_gradient(ParamStore& store, const FrameConfig& fc, const ModelDims& dims, const Sample& s,
                                const TrainConfig& tc, double weight) {
  store.zero_grad();
  Tape tape;
  Var img = tape.constant(s.image);
  Var f = frame::backbone(tape, store, img, fc, dims);
  auto out = frame::forward_frame(tape, store, f, fc, dims);
  auto obj = scene_objective(tape, out, s, tc.focal, tc.lambda);
  SceneGrad g;
  g.losses = breakdown(tape, obj);
  tape.backward(netops::scale(tape, obj.total, weight));
  g.grads.reserve(store.size());
  for (auto& [_, e] : store.entries()) g.grads.push_back(e.grad);
  return g;
}

inline void check_finite(const loss::LossBreakdown& b, std::size_t step) {
  const std::pair<const char*, double> parts[] = {{"l_ho", b.l_ho}, {"l_i", b.l_i},   {"l_dh", b.l_dh},
                                                  {"l_do", b.l_do}, {"l_wh", b.l_wh}, {"l_off", b.l_off}};
  for (auto [name, v] : parts)
    if (!std::isfinite(v)) throw DivergenceError(step, name);
  if (!std::isfinite(b.total)) throw DivergenceError(step, "total");
}

/// Batch gradient into `store` (mean over scenes, summed in batch order) and the mean breakdown.
inline loss::LossBreakdown batch_gradient(ParamStore& store, const FrameConfig& fc, const ModelDims& dims,
                                          const std::vector<const Sample*>& batch, const TrainConfig& tc,
                                          std::size_t step) {
  const double w = 1.0 / static_cast<double>(batch.size());
  std::vector<SceneGrad> per(batch.size());
  auto run = [&](ParamStore& local, std::size_t i) {
    try {
      per[i] = scene_gradient(local, fc, dims, *batch[i], tc, w);
    } catch (const netops::NonFiniteError& e) {
      throw DivergenceError(step, e.op());
    }
  };
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(tc.workers), batch.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < batch.size(); ++i) run(store, i);
  } else {
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t wi = 0; wi < workers; ++wi) {
      pool.emplace_back([&, wi] {
        try {
          ParamStore local = store;
          for (std::size_t i = wi; i < batch.size(); i += workers) run(local, i);
        } catch (...) {
          errors[wi] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  store.zero_grad();
  loss::LossBreakdown mean;
  for (const SceneGrad& g : per) {
    std::size_t k = 0;
    for (auto& [_, e] : store.entries()) {
      const Tensor& src = g.grads[k++];
      for (std::size_t j = 0; j < src.numel(); ++j) e.grad[j] += src[j];
      e.has_grad = true;
    }
    mean.l_ho += g.losses.l_ho;
    mean.l_i += g.losses.l_i;
    mean.l_dh += g.losses.l_dh;
    mean.l_do += g.losses.l_do;
    mean.l_wh += g.losses.l_wh;
    mean.l_off += g.losses.l_off;
    mean.n_pos += g.losses.n_pos;
  }
  for (double* v : {&mean.l_ho, &mean.l_i, &mean.l_dh, &mean.l_do, &mean.l_wh, &mean.l_off}) *v *= w;
  mean = loss::total_loss(mean, tc.lambda);
  check_finite(mean, step);
  return mean;
}

/// Mean loss over every scene of `ds`, forward only.
inline loss::LossBreakdown corpus_loss(ParamStore& store, const FrameConfig& fc, const Dataset& ds,
                                       const TrainConfig& tc) {
  const ModelDims dims = model_dims(ds.config);
  loss::LossBreakdown mean;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Sample s = make_sample(ds, i);
    Tape tape;
    Var f = frame::backbone(tape, store, tape.constant(s.image), fc, dims);
    auto out = frame::forward_frame(tape, store, f, fc, dims);
    const auto b = breakdown(tape, scene_objective(tape, out, s, tc.focal, tc.lambda));
    mean.l_ho += b.l_ho;
    mean.l_i += b.l_i;
    mean.l_dh += b.l_dh;
    mean.l_do += b.l_do;
    mean.l_wh += b.l_wh;
    mean.l_off += b.l_off;
    mean.n_pos += b.n_pos;
  }
  const double w = ds.size() ? 1.0 / static_cast<double>(ds.size()) : 0.0;
  for (double* v : {&mean.l_ho, &mean.l_i, &mean.l_dh, &mean.l_do, &mean.l_wh, &mean.l_off}) *v *= w;
  return loss::total_loss(mean, tc.lambda);
}

struct RunRecord {
  json config;
  std::vector<loss::LossBreakdown> history;
  std::filesystem::path final_checkpoint;
  double wall_seconds = 0.0;
};

inline std::string losses_csv_header() { return "step,l_ho,l_i,l_dh,l_do,l_wh,l_off,total"; }

inline std::string losses_csv_row(std::size_t step, const loss::LossBreakdown& b) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", step, b.l_ho, b.l_i, b.l_dh,
                b.l_do, b.l_wh, b.l_off, b.total);
  return buf;
}

inline std::filesystem::path checkpoint_path(const std::filesystem::path& run_dir, std::size_t step) {
  char name[32];
  std::snprintf(name, sizeof(name), "step_%06zu.bin", step);
  return run_dir / "checkpoints" / name;
}

struct TrainOptions {
  std::optional<std::filesystem::path> run_dir;  // nothing is written when unset
  json config_snapshot = json::object();
  std::uint64_t init_seed = 0;  // parameter init seed; ignored when resuming
  bool quiet = true;
};

/// Trains `store` in place from its current step up to tc.total_steps.
inline RunRecord train_from(ParamStore& store, const FrameConfig& fc, const TrainConfig& tc, const Dataset& ds,
                            const TrainOptions& opt = {}) {
  tc.validate();
  fc.validate();
  if (ds.size() == 0) throw ConfigError("training needs a nonempty dataset");
  const auto t0 = std::chrono::steady_clock::now();
  const ModelDims dims = model_dims(ds.config);
  std::vector<Sample> samples;
  samples.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) samples.push_back(make_sample(ds, i));

  RunRecord rec;
  rec.config = opt.config_snapshot;
  std::ofstream losses;
  if (opt.run_dir) {
    std::filesystem::create_directories(*opt.run_dir / "checkpoints");
    std::ofstream cfg(*opt.run_dir / "config.json", std::ios::trunc);
    if (!cfg) throw IoError("cannot write " + (*opt.run_dir / "config.json").string());
    cfg << opt.config_snapshot.dump(2) << '\n';
    const bool resume = store.step() > 0;
    losses.open(*opt.run_dir / "losses.csv", resume ? std::ios::app : std::ios::trunc);
    if (!losses) throw IoError("cannot write " + (*opt.run_dir / "losses.csv").string());
    if (!resume) losses << losses_csv_header() << '\n';
  }
  for (auto step = static_cast<std::size_t>(store.step()); step < tc.total_steps; ++step) {
    std::vector<const Sample*> batch;
    for (std::size_t i : batch_indices(tc.seed, ds.size(), tc.batch_size, step)) batch.push_back(&samples[i]);
    const loss::LossBreakdown b = batch_gradient(store, fc, dims, batch, tc, step);
    netops::adam_step(store, effective_lr(tc, step));
    rec.history.push_back(b);
    if (!opt.quiet && (step % 50 == 0 || step + 1 == tc.total_steps)) {
      std::fprintf(stderr, "step %zu total %.6g\n", step, b.total);
    }
    if (opt.run_dir) {
      losses << losses_csv_row(step, b) << '\n';
      const std::size_t done = step + 1;
      if (tc.checkpoint_every && done % tc.checkpoint_every == 0 && done != tc.total_steps) {
        netops::save_checkpoint(store, checkpoint_path(*opt.run_dir, done));
      }
    }
  }
  if (opt.run_dir) {
    losses.flush();
    if (!losses) throw IoError("write failed for losses.csv");
    rec.final_checkpoint = checkpoint_path(*opt.run_dir, static_cast<std::size_t>(store.step()));
    netops::save_checkpoint(store, rec.final_checkpoint);
  }
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

inline RunRecord train(const FrameConfig& fc, const TrainConfig& tc, const Dataset& ds, const TrainOptions& opt = {},
                       ParamStore* out_params = nullptr) {
  ParamStore store = frame::init_params(fc, model_dims(ds.config), opt.init_seed ? opt.init_seed : tc.seed);
  RunRecord rec = train_from(store, fc, tc, ds, opt);
  if (out_params) *out_params = std::move(store);
  return rec;
}

// ---- inference ---------------------------------------------------------------

struct InferConfig {
  std::size_t top_t = 100;
  double s_min = 0.01;
};

inline json to_json(const InferConfig& c) { return json{{"top_t", c.top_t}, {"s_min", c.s_min}}; }

inline void apply_json(const json& j, InferConfig& c) {
  reject_unknown_keys(j, {"top_t", "s_min"}, "infer");
  read_field(j, "top_t", c.top_t, "infer");
  read_field(j, "s_min", c.s_min, "infer");
  if (c.top_t < 1) throw ConfigError("infer.top_t must be >= 1");
}

/// Forward pass of one image, converted to decoder inputs.
inline decoder::PredictionMaps predict(ParamStore& store, const FrameConfig& fc, const ModelDims& dims,
                                       const Tensor& image) {
  Tape tape;
  Var f = frame::backbone(tape, store, tape.constant(image), fc, dims);
  auto out = frame::forward_frame(tape, store, f, fc, dims);
  decoder::PredictionMaps m;
  m.hm_h = tape.value(out.hm_h);
  m.hm_o = tape.value(out.hm_o);
  m.hm_i = tape.value(out.hm_i);
  const Tensor& dh = tape.value(out.f_dh);
  const Tensor& dov = tape.value(out.f_do);
  m.disp = Tensor({4, dh.dim(1), dh.dim(2)});
  std::copy(dh.data.begin(), dh.data.end(), m.disp.data.begin());
  std::copy(dov.data.begin(), dov.data.end(), m.disp.data.begin() + static_cast<std::ptrdiff_t>(dh.numel()));
  m.wh = tape.value(out.f_wh);
  m.off = tape.value(out.f_off);
  return m;
}

inline decoder::DecodeOptions decode_options(const InferConfig& ic) {
  decoder::DecodeOptions o;
  o.top_t = ic.top_t;
  o.grouping.s_min = ic.s_min;
  return o;
}

/// Detections for every scene of `ds`; `on_maps` sees each scene's prediction maps.
template <typename MapsFn = std::nullptr_t>
std::vector<decoder::SceneDetections> infer(ParamStore& store, const FrameConfig& fc, const Dataset& ds,
                                            const InferConfig& ic, MapsFn on_maps = nullptr) {
  const ModelDims dims = model_dims(ds.config);
  std::vector<decoder::SceneDetections> out;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto maps = predict(store, fc, dims, ds.images[i].to_tensor());
    if constexpr (!std::is_same_v<MapsFn, std::nullptr_t>) on_maps(ds.config.first_index + i, maps);
    out.push_back({ds.config.first_index + i, decoder::decode(maps, ds.config.grid, decode_options(ic))});
  }
  return out;
}

inline evaluator::EvalReport evaluate_dataset(const std::vector<decoder::SceneDetections>& dets, const Dataset& ds,
                                              double iou_thr = 0.5) {
  std::vector<std::vector<decoder::Detection>> d;
  std::vector<std::vector<evaluator::GtTriplet>> g;
  for (const auto& sd : dets) d.push_back(sd.detections);
  for (const auto& s : ds.scenes) g.push_back(evaluator::ground_truth(s));
  return evaluator::evaluate(d, g, iou_thr);
}

// ---- ablation ------------------------------------------------------------------

struct AblationRow {
  std::string wiring;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double train_map_role = 0.0;
  double heldout_map_role = 0.0;
  bool finite = true;
};

/// Trains every wiring with identical seeds and data; optional per-row callback for progress.
template <typename RowFn = std::nullptr_t>
std::vector<AblationRow> ablate(const std::vector<FrameConfig>& wirings, const TrainConfig& tc, const Dataset& train_ds,
                                const Dataset& heldout, const InferConfig& ic, double iou_thr = 0.5,
                                RowFn on_row = nullptr) {
  std::vector<AblationRow> rows;
  for (const FrameConfig& fc : wirings) {
    ParamStore store;
    TrainOptions opt;
    const RunRecord rec = train(fc, tc, train_ds, opt, &store);
    AblationRow r;
    r.wiring = fc.label();
    r.initial_loss = rec.history.front().total;
    r.final_loss = rec.history.back().total;
    for (const auto& b : rec.history) r.finite = r.finite && std::isfinite(b.total);
    r.train_map_role = evaluate_dataset(infer(store, fc, train_ds, ic), train_ds, iou_thr).map_role;
    r.heldout_map_role = evaluate_dataset(infer(store, fc, heldout, ic), heldout, iou_thr).map_role;
    if constexpr (!std::is_same_v<RowFn, std::nullptr_t>) on_row(r);
    rows.push_back(r);
  }
  return rows;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string s = "wiring,initial_loss,final_loss,train_map_role,heldout_map_role\n";
  char buf[200];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%.9g,%.9g,%.9g,%.9g\n", r.wiring.c_str(), r.initial_loss, r.final_loss,
                  r.train_map_role, r.heldout_map_role);
    s += buf;
  }
  return s;
}

}  // namespace rrnet::trainer
