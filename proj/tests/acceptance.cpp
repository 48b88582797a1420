// Acceptance gate: one PASS/FAIL line per criterion, exit status 0 iff all pass.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "CLI11.hpp"
#include "decoder_oracle.hpp"
#include "rrnet/cli.hpp"

using namespace rrnet;
namespace fs = std::filesystem;
using netops::ParamStore;
using netops::Tape;
using netops::Var;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  fs::path work;
  fs::path cli;
  std::size_t ablation_steps = 300;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int shell(const std::string& cmd) {
  const int rc = std::system(cmd.c_str());
  return rc == -1 ? -1 : WEXITSTATUS(rc);
}

std::string quote(const fs::path& p) { return "'" + p.string() + "'"; }

Outcome gradient_suite(const Context&) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto rows = gradsuite::run_all(2024, 10);
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::string failed;
  std::set<std::string> names;
  for (const auto& r : rows) {
    worst = std::max(worst, r.max_rel_error);
    names.insert(r.name);
    if (!r.pass || r.instances < 10) failed += " " + r.name;
  }
  bool composites = true;
  for (const char* n : {"head_apply", "iim_forward", "cpm_forward", "focal_loss"}) composites = composites && names.count(n);
  Outcome o;
  o.pass = failed.empty() && composites && secs <= 60.0;
  o.detail = std::to_string(rows.size()) + " ops x 10 instances, max rel err " + fmt("%.3g", worst) + ", " +
             fmt("%.1f", secs) + " s" + (failed.empty() ? "" : ", failed:" + failed);
  return o;
}

Outcome round_trip(const Context&) {
  const auto t0 = std::chrono::steady_clock::now();
  synthdata::DataConfig c;
  c.num_scenes = 100;
  const auto ds = synthdata::make_dataset(c);
  std::size_t n_det = 0, n_gt = 0, tp = 0, matched_gt = 0;
  for (std::size_t s = 0; s < ds.size(); ++s) {
    const auto dets = decoder::decode(evaluator::perfect_maps(synthdata::encode_targets(ds.scenes[s], c)), c.grid);
    auto gts = evaluator::ground_truth(ds.scenes[s]);
    const auto labels = evaluator::match_scene(dets, gts, 0.99);
    n_det += dets.size();
    n_gt += gts.size();
    for (const auto& l : labels) tp += l.true_positive;
    for (const auto& g : gts) matched_gt += g.matched;
  }
  const double secs = seconds_since(t0);
  const double precision = n_det ? static_cast<double>(tp) / static_cast<double>(n_det) : 0.0;
  const double recall = n_gt ? static_cast<double>(matched_gt) / static_cast<double>(n_gt) : 0.0;
  Outcome o;
  o.pass = precision == 1.0 && recall == 1.0 && secs <= 30.0;
  o.detail = "100 scenes, " + std::to_string(n_gt) + " triplets, precision " + fmt("%.6g", precision) + " recall " +
             fmt("%.6g", recall) + " at IoU 0.99, " + fmt("%.2f", secs) + " s";
  return o;
}

Outcome overfit(const Context&) {
  const auto t0 = std::chrono::steady_clock::now();
  synthdata::DataConfig dc;
  dc.num_scenes = 16;
  const auto ds = synthdata::make_dataset(dc);
  const frame::FrameConfig fc;  // Part A + Part B + IIM + CPM
  trainer::TrainConfig tc;
  tc.total_steps = 2000;
  tc.workers = 1;
  ParamStore store = frame::init_params(fc, trainer::model_dims(dc), tc.seed);
  const double initial = trainer::corpus_loss(store, fc, ds, tc).total;
  const auto rec = trainer::train_from(store, fc, tc, ds);
  const double final_loss = trainer::corpus_loss(store, fc, ds, tc).total;
  const double map = trainer::evaluate_dataset(trainer::infer(store, fc, ds, {}), ds).map_role;
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = final_loss <= 0.1 * initial && map >= 0.9 && secs <= 600.0;
  o.detail = "corpus loss " + fmt("%.4g", initial) + " -> " + fmt("%.4g", final_loss) + " (" +
             fmt("%.2f%%", 100.0 * final_loss / initial) + "), batch loss " + fmt("%.4g", rec.history.front().total) +
             " -> " + fmt("%.4g", rec.history.back().total) + ", train map_role " + fmt("%.4f", map) + ", " +
             fmt("%.0f", secs) + " s";
  return o;
}

Outcome ablation(const Context& cx) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path dir = cx.work / "ablation";
  fs::remove_all(dir);
  const std::string cmd = quote(cx.cli) + " ablate --out " + quote(dir) +
                          " --set data.num_scenes=200 --set ablate.heldout_scenes=50 --set train.total_steps=" +
                          std::to_string(cx.ablation_steps) + " > " + quote(cx.work / "ablation.log") + " 2>&1";
  const int rc = shell(cmd);
  Outcome o;
  if (rc != 0) {
    o.detail = "ablate exited with " + std::to_string(rc);
    return o;
  }
  std::ifstream is(dir / "report.csv");
  std::string line;
  std::getline(is, line);
  std::set<std::string> names;
  bool finite = true;
  double base = NAN, full = NAN;
  while (std::getline(is, line)) {
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 5) {
      finite = false;
      continue;
    }
    names.insert(cells[0]);
    for (std::size_t i = 1; i < 5; ++i) finite = finite && std::isfinite(std::stod(cells[i]));
    if (cells[0] == "baseline") base = std::stod(cells[4]);
    if (cells[0] == "A+B+IIM+CPM") full = std::stod(cells[4]);
  }
  const double secs = seconds_since(t0);
  o.pass = names.size() == 9 && finite && std::isfinite(base) && std::isfinite(full);
  o.detail = std::to_string(names.size()) + " wirings x " + std::to_string(cx.ablation_steps) +
             " steps on 200 scenes, losses finite: " + (finite ? "yes" : "no") + ", held-out map_role baseline " +
             fmt("%.4f", base) + " full " + fmt("%.4f", full) + " delta " + fmt("%+.4f", full - base) + ", " +
             fmt("%.0f", secs) + " s, csv " + (dir / "report.csv").string();
  return o;
}

Outcome decoder_oracles(const Context&) {
  std::mt19937_64 rng(505);
  std::size_t peak_ok = 0, group_ok = 0;
  for (int n = 0; n < 50; ++n) {
    const Tensor hm = oracle::random_heatmap(rng);
    const std::size_t T = 1 + rng() % 12;
    peak_ok += decoder::extract_peaks(hm, T) == oracle::peaks(hm, T);
  }
  for (int n = 0; n < 50; ++n) {
    const auto in = oracle::random_grouping_instance(rng);
    group_ok += decoder::group_triplets(in.h, in.o, in.i, in.disp, in.wh, in.off, in.grid) ==
                oracle::group(in.h, in.o, in.i, in.disp, in.wh, in.off, in.grid, 0.01);
  }
  Outcome o;
  o.pass = peak_ok == 50 && group_ok == 50;
  o.detail = "extract_peaks " + std::to_string(peak_ok) + "/50, group_triplets " + std::to_string(group_ok) +
             "/50 bit-exact";
  return o;
}

Outcome evaluator_fixtures(const Context&) {
  using evaluator::average_precision;
  struct Fixture {
    std::vector<bool> ranking;
    std::size_t n_gt;
    double expected;
  };
  const std::vector<Fixture> fixtures{{{true, false, true}, 2, 5.0 / 6.0},
                                      {{true, true}, 2, 1.0},
                                      {{false, true, false, true}, 3, 1.0 / 3.0},
                                      {{true, false, false, true, true}, 3, 1.0 / 3.0 + 0.4},
                                      {{}, 3, 0.0}};
  std::size_t ok = 0;
  for (const auto& f : fixtures) ok += std::fabs(*average_precision(f.ranking, f.n_gt) - f.expected) <= 1e-9;

  synthdata::DataConfig c;
  const auto ds = synthdata::make_dataset(c);
  std::vector<decoder::SceneDetections> dets;
  for (std::size_t s = 0; s < ds.size(); ++s) {
    dets.push_back({s, decoder::decode(evaluator::perfect_maps(synthdata::encode_targets(ds.scenes[s], c)), c.grid)});
  }
  const double map = trainer::evaluate_dataset(dets, ds).map_role;
  Outcome o;
  o.pass = ok == fixtures.size() && map == 1.0;
  o.detail = std::to_string(ok) + "/" + std::to_string(fixtures.size()) +
             " AP fixtures within 1e-9, perfect detections on " + std::to_string(ds.size()) + " scenes map_role " +
             fmt("%.17g", map);
  return o;
}

Outcome structural(const Context&) {
  synthdata::DataConfig dc;
  const auto dims = trainer::model_dims(dc);
  const frame::FrameConfig fc;
  ParamStore store = frame::init_params(fc, dims, 3);
  std::mt19937_64 rng(17);
  std::normal_distribution<double> nd(0.0, 1.0);
  const std::size_t H = dc.grid.height, W = dc.grid.width, K = dims.K(), N = dims.N(), C = 1 + K + N;
  std::vector<std::string> bad;

  Tensor image({3, static_cast<std::size_t>(dc.image_size), static_cast<std::size_t>(dc.image_size)});
  for (double& v : image.data) v = nd(rng);
  Tape tape;
  Var f = frame::backbone(tape, store, tape.constant(image), fc, dims);
  const auto out = frame::forward_frame(tape, store, f, fc, dims);
  const Tensor f_ho = tape.value(out.f_ho), f_ho_p = tape.value(out.f_ho_prime), beta = tape.value(out.beta);
  if (f_ho_p.shape != f_ho.shape) bad.push_back("IIM output shape");
  for (std::size_t i = 0; i < H * W; ++i)
    if (f_ho_p[i] != f_ho[i]) {
      bad.push_back("IIM channel 0 pass-through");
      break;
    }
  if (beta.numel() != K) bad.push_back("beta length");
  for (double b : beta.data)
    if (!(b > 0.0 && b < 1.0)) bad.push_back("beta range");
  if (tape.shape(out.adjacency) != Shape{C, C}) bad.push_back("CPM adjacency shape");

  // Location permutation leaves A unchanged.
  Tensor fp({C, H, W});
  for (double& v : fp.data) v = nd(rng);
  std::vector<std::size_t> perm(H * W);
  for (std::size_t l = 0; l < perm.size(); ++l) perm[l] = l;
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor fq(fp.shape);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t l = 0; l < H * W; ++l) fq[c * H * W + l] = fp[c * H * W + perm[l]];
  Tape t2;
  const Tensor a = t2.value(cpm::project_adjacency(t2, store, t2.constant(fp)));
  const Tensor b = t2.value(cpm::project_adjacency(t2, store, t2.constant(fq)));
  double scale = 0.0, diff = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    scale = std::max(scale, std::fabs(a[i]));
    diff = std::max(diff, std::fabs(a[i] - b[i]));
  }
  if (diff > 1e-12 * std::max(1.0, scale)) bad.push_back("adjacency permutation invariance");

  // Total-loss identity at λ = 0.1.
  std::uniform_real_distribution<double> u(0.0, 5.0);
  for (int n = 0; n < 20; ++n) {
    loss::LossBreakdown p;
    for (double* v : {&p.l_ho, &p.l_i, &p.l_dh, &p.l_do, &p.l_wh, &p.l_off}) *v = u(rng);
    const double want = (p.l_ho + p.l_i) + 0.1 * (p.l_dh + p.l_do) + (p.l_wh + p.l_off);
    if (loss::total_loss(p).total != want || trainer::TrainConfig{}.lambda != 0.1) {
      bad.push_back("total-loss identity");
      break;
    }
  }
  Outcome o;
  o.pass = bad.empty();
  o.detail = "f_ho' " + shape_str(f_ho_p.shape) + ", beta in (0,1)^" + std::to_string(K) + ", A " +
             shape_str(tape.shape(out.adjacency)) + ", permutation diff " + fmt("%.2g", diff);
  for (const auto& s : bad) o.detail += "; broken: " + s;
  return o;
}

Outcome determinism(const Context& cx) {
  auto pipeline = [&](const fs::path& dir) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::string log = " >> " + quote(dir / "log.txt") + " 2>&1";
    const std::string sets = " --set data.num_scenes=32 --set train.total_steps=50";
    const std::string bin = quote(cx.cli);
    const fs::path data = dir / "data" / "dataset.jsonl";
    int rc = shell(bin + " gen --out " + quote(dir / "data") + sets + " > " + quote(dir / "gen.txt"));
    if (!rc) rc = shell(bin + " train --data " + quote(data) + " --out " + quote(dir / "run") + sets + log);
    if (!rc) {
      rc = shell(bin + " infer --data " + quote(data) + " --checkpoint " +
                 quote(trainer::checkpoint_path(dir / "run", 50)) + " --out " + quote(dir / "infer") + sets + log);
    }
    if (!rc) {
      rc = shell(bin + " eval --data " + quote(data) + " --detections " + quote(dir / "infer" / "detections.jsonl") +
                 " --out " + quote(dir / "eval") + sets + log);
    }
    return rc;
  };
  const fs::path a = cx.work / "determinism_a", b = cx.work / "determinism_b";
  const int ra = pipeline(a), rb = pipeline(b);
  Outcome o;
  if (ra || rb) {
    o.detail = "pipeline exit codes " + std::to_string(ra) + ", " + std::to_string(rb);
    return o;
  }
  std::vector<std::string> differ;
  for (const fs::path rel : {fs::path("gen.txt"), fs::path("run/losses.csv"), fs::path("infer/detections.jsonl"),
                             fs::path("eval/report.csv")}) {
    if (slurp(a / rel) != slurp(b / rel) || slurp(a / rel).empty()) differ.push_back(rel.string());
  }
  o.pass = differ.empty();
  o.detail = "gen -> train(50) -> infer -> eval twice: ";
  if (differ.empty()) {
    o.detail += "losses.csv, detections.jsonl, report.csv and digest identical";
  } else {
    for (const auto& d : differ) o.detail += d + " differs; ";
  }
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  Context cx;
  cx.cli = RRNET_CLI_PATH;
  cx.work = fs::temp_directory_path() / "rrnet_acceptance";
  std::vector<int> only;
  app.add_option("--cli", cx.cli, "rrnet binary");
  app.add_option("--work", cx.work, "scratch directory for artifacts");
  app.add_option("--only", only, "run just these criteria");
  app.add_option("--ablation-steps", cx.ablation_steps, "training steps per wiring");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(cx.work);

  const std::vector<std::pair<std::string, std::function<Outcome(const Context&)>>> criteria{
      {"gradient suite", gradient_suite},   {"encode/decode round trip", round_trip},
      {"overfit", overfit},                 {"ablation harness", ablation},
      {"decoder oracles", decoder_oracles}, {"evaluator fixtures", evaluator_fixtures},
      {"structural invariants", structural}, {"determinism", determinism}};
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second(cx);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  return failures ? 1 : 0;
}
