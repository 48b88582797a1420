#pragma once

// Run configuration and subcommand bodies behind tools/rrnet.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rrnet/cpm.hpp"
#include "rrnet/gradsuite.hpp"
#include "rrnet/trainer.hpp"

namespace rrnet::cli {

using synthdata::DataConfig;
using synthdata::Dataset;
using netops::ParamStore;
using netops::Tape;
using netops::Var;

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfig = 2,
  kIo = 3,
  kDivergence = 4,
  kGradcheck = 5,
};

struct EvalConfig {
  double iou_threshold = 0.5;
};

struct AblateConfig {
  std::size_t heldout_scenes = 50;  // taken from the indices right after the training corpus
};

struct RunConfig {
  DataConfig data;
  frame::FrameConfig frame;
  trainer::TrainConfig train;
  trainer::InferConfig infer;
  EvalConfig eval;
  AblateConfig ablate;
};

inline json to_json(const RunConfig& c) {
  return json{{"data", synthdata::to_json(c.data)},
              {"frame", frame::to_json(c.frame)},
              {"train", trainer::to_json(c.train)},
              {"infer", trainer::to_json(c.infer)},
              {"eval", {{"iou_threshold", c.eval.iou_threshold}}},
              {"ablate", {{"heldout_scenes", c.ablate.heldout_scenes}}}};
}

/// Defaults overlaid with `j`; every section and key is checked.
inline RunConfig config_from_json(const json& j) {
  reject_unknown_keys(j, {"data", "frame", "train", "infer", "eval", "ablate"}, "");
  RunConfig c;
  if (j.contains("data")) synthdata::apply_json(j["data"], c.data);
  if (j.contains("frame")) frame::apply_json(j["frame"], c.frame);
  if (j.contains("train")) trainer::apply_json(j["train"], c.train);
  if (j.contains("infer")) trainer::apply_json(j["infer"], c.infer);
  if (j.contains("eval")) {
    reject_unknown_keys(j["eval"], {"iou_threshold"}, "eval");
    read_field(j["eval"], "iou_threshold", c.eval.iou_threshold, "eval");
    if (!(c.eval.iou_threshold > 0.0 && c.eval.iou_threshold <= 1.0)) {
      throw ConfigError("eval.iou_threshold must be in (0, 1]");
    }
  }
  if (j.contains("ablate")) {
    reject_unknown_keys(j["ablate"], {"heldout_scenes"}, "ablate");
    read_field(j["ablate"], "heldout_scenes", c.ablate.heldout_scenes, "ablate");
  }
  c.data.validate();
  c.frame.validate();
  c.train.validate();
  return c;
}

/// "a.b.c=value": value is parsed as JSON, falling back to a plain string.
inline void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &doc;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (!node->is_object()) throw ConfigError("override key '" + key + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
}

inline RunConfig load_config(const std::optional<std::filesystem::path>& path, const std::vector<std::string>& sets) {
  json doc = path ? read_json_file(*path) : json::object();
  for (const auto& s : sets) apply_override(doc, s);
  return config_from_json(doc);
}

/// 64-bit FNV-1a over the bytes of each file in turn.
inline std::uint64_t fnv1a_files(const std::vector<std::filesystem::path>& files) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& f : files) {
    std::ifstream is(f, std::ios::binary);
    if (!is) throw IoError("cannot read " + f.string());
    char buf[1 << 14];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
      for (std::streamsize i = 0; i < is.gcount(); ++i) {
        h ^= static_cast<unsigned char>(buf[i]);
        h *= 0x100000001b3ULL;
      }
    }
  }
  return h;
}

/// 8-bit binary graymap of one plane, pixel = round(255 p) clamped to [0, 255].
inline void write_pgm(const Tensor& maps, std::size_t channel, const std::filesystem::path& path) {
  const std::size_t H = maps.dim(1), W = maps.dim(2);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "P5\n" << W << ' ' << H << "\n255\n";
  for (std::size_t i = 0; i < H * W; ++i) {
    const double p = std::clamp(maps.data[channel * H * W + i], 0.0, 1.0);
    os.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * p))));
  }
  if (!os) throw IoError("write failed for " + path.string());
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw IoError("write failed for " + path.string());
}

inline std::string scene_stem(std::size_t scene) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%06zu", scene);
  return buf;
}

struct Args {
  std::optional<std::filesystem::path> config;
  std::vector<std::string> sets;
  std::filesystem::path out = ".";
  std::optional<std::filesystem::path> data;
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> detections;
  std::optional<std::size_t> workers;
  bool dump_heatmaps = false;
  bool dump_cpm = false;
  std::uint64_t seed = 1;
  int instances = 10;
  std::string corrupt;  // gradcheck negative control: "conv2d"
};

struct Streams {
  std::ostream& out;
  std::ostream& err;
};

inline std::filesystem::path dataset_file(const std::filesystem::path& dir) { return dir / "dataset.jsonl"; }

inline Dataset load_or_generate(const Args& a, RunConfig& c) {
  if (!a.data) return synthdata::make_dataset(c.data);
  Dataset ds = synthdata::read_dataset(*a.data);
  c.data = ds.config;
  return ds;
}

inline RunConfig resolve(const Args& a) {
  RunConfig c = load_config(a.config, a.sets);
  if (a.workers) {
    c.train.workers = *a.workers;
    c.train.validate();
  }
  return c;
}

inline int cmd_gen(const Args& a, Streams s) {
  const RunConfig c = resolve(a);
  const Dataset ds = synthdata::make_dataset(c.data);
  std::filesystem::create_directories(a.out);
  const auto path = dataset_file(a.out);
  synthdata::write_dataset(ds, path);
  char digest[17];
  std::snprintf(digest, sizeof(digest), "%016llx",
                static_cast<unsigned long long>(fnv1a_files({path, synthdata::raster_path(path)})));
  s.out << "scenes " << ds.size() << " digest " << digest << '\n';
  return kOk;
}

inline int cmd_train(const Args& a, Streams s) {
  RunConfig c = resolve(a);
  const Dataset ds = load_or_generate(a, c);
  trainer::TrainOptions opt;
  opt.run_dir = a.out;
  opt.config_snapshot = to_json(c);
  opt.quiet = false;
  trainer::RunRecord rec;
  if (a.checkpoint) {
    ParamStore store = netops::load_checkpoint(*a.checkpoint);
    rec = trainer::train_from(store, c.frame, c.train, ds, opt);
  } else {
    rec = trainer::train(c.frame, c.train, ds, opt);
  }
  if (!rec.history.empty()) {
    s.out << "initial_loss " << rec.history.front().total << " final_loss " << rec.history.back().total << '\n';
  }
  s.out << "checkpoint " << rec.final_checkpoint.string() << '\n';
  return kOk;
}

inline int cmd_infer(const Args& a, Streams s) {
  RunConfig c = resolve(a);
  if (!a.checkpoint) throw ConfigError("infer needs --checkpoint");
  const Dataset ds = load_or_generate(a, c);
  ParamStore store = netops::load_checkpoint(*a.checkpoint);
  if (a.dump_cpm && !c.frame.use_cpm) throw ConfigError("--dump-cpm needs frame.use_cpm");
  std::filesystem::create_directories(a.out);
  if (a.dump_heatmaps) std::filesystem::create_directories(a.out / "heatmaps");
  if (a.dump_cpm) std::filesystem::create_directories(a.out / "cpm");
  const trainer::ModelDims dims = trainer::model_dims(ds.config);
  const auto dets = trainer::infer(store, c.frame, ds, c.infer, [&](std::size_t scene, const decoder::PredictionMaps& m) {
    if (!a.dump_heatmaps) return;
    const auto dir = a.out / "heatmaps";
    const std::string stem = scene_stem(scene);
    write_pgm(m.hm_h, 0, dir / (stem + "_h.pgm"));
    for (std::size_t k = 0; k < m.hm_o.dim(0); ++k) write_pgm(m.hm_o, k, dir / (stem + "_o" + std::to_string(k) + ".pgm"));
    for (std::size_t n = 0; n < m.hm_i.dim(0); ++n) write_pgm(m.hm_i, n, dir / (stem + "_i" + std::to_string(n) + ".pgm"));
  });
  if (a.dump_cpm) {
    for (std::size_t i = 0; i < ds.size(); ++i) {
      Tape tape;
      Var f = frame::backbone(tape, store, tape.constant(ds.images[i].to_tensor()), c.frame, dims);
      const auto out = frame::forward_frame(tape, store, f, c.frame, dims);
      cpm::write_gate_csv(tape.value(out.updated), a.out / "cpm" / (scene_stem(ds.config.first_index + i) + ".csv"));
    }
  }
  decoder::write_detections(dets, a.out / "detections.jsonl");
  std::size_t n = 0;
  for (const auto& d : dets) n += d.detections.size();
  s.out << "scenes " << dets.size() << " detections " << n << '\n';
  return kOk;
}

inline int cmd_eval(const Args& a, Streams s) {
  RunConfig c = resolve(a);
  if (!a.detections) throw ConfigError("eval needs --detections");
  const Dataset ds = load_or_generate(a, c);
  const auto dets = decoder::read_detections(*a.detections);
  if (dets.size() != ds.size()) {
    throw EvaluationError("detections cover " + std::to_string(dets.size()) + " scenes but the dataset has " +
                          std::to_string(ds.size()));
  }
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (dets[i].scene != ds.config.first_index + i) {
      throw EvaluationError("detections line " + std::to_string(i + 1) + " is for scene " +
                            std::to_string(dets[i].scene) + ", expected " +
                            std::to_string(ds.config.first_index + i));
    }
  }
  const auto report = trainer::evaluate_dataset(dets, ds, c.eval.iou_threshold);
  std::filesystem::create_directories(a.out);
  evaluator::write_report(report, a.out / "report.csv");
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", report.map_role);
  s.out << "map_role " << buf << '\n';
  return kOk;
}

inline int cmd_ablate(const Args& a, Streams s) {
  RunConfig c = resolve(a);
  const Dataset train_ds = load_or_generate(a, c);
  DataConfig held = c.data;
  held.first_index = c.data.first_index + c.data.num_scenes;
  held.num_scenes = c.ablate.heldout_scenes;
  const Dataset held_ds = synthdata::make_dataset(held);
  std::filesystem::create_directories(a.out);
  write_text(a.out / "config.json", to_json(c).dump(2) + "\n");
  const auto rows = trainer::ablate(frame::ablation_wirings(c.frame), c.train, train_ds, held_ds, c.infer,
                                    c.eval.iou_threshold, [&](const trainer::AblationRow& r) {
                                      s.out << r.wiring << " final_loss " << r.final_loss << " heldout_map_role "
                                            << r.heldout_map_role << std::endl;
                                    });
  for (const auto& r : rows) {
    if (!r.finite) throw DivergenceError(c.train.total_steps, "wiring " + r.wiring);
  }
  write_text(a.out / "report.csv", trainer::ablation_csv(rows));
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%+.9g", rows.back().heldout_map_role - rows.front().heldout_map_role);
  s.out << "heldout_map_role delta (" << rows.back().wiring << " - " << rows.front().wiring << ") " << buf << '\n';
  return kOk;
}

inline int cmd_gradcheck(const Args& a, Streams s) {
  if (!a.corrupt.empty() && a.corrupt != "conv2d") throw ConfigError("--corrupt supports only conv2d");
  const double saved = netops::hooks::conv2d_grad_scale;
  if (a.corrupt == "conv2d") netops::hooks::conv2d_grad_scale = 1.5;
  std::vector<gradsuite::Row> rows;
  try {
    rows = gradsuite::run_all(a.seed, a.instances);
  } catch (...) {
    netops::hooks::conv2d_grad_scale = saved;
    throw;
  }
  netops::hooks::conv2d_grad_scale = saved;
  s.out << gradsuite::format_table(rows);
  std::string failed;
  for (const auto& r : rows) {
    if (!r.pass) failed += (failed.empty() ? "" : ", ") + r.name;
  }
  if (!failed.empty()) {
    s.err << "gradcheck failed: " << failed << '\n';
    return kGradcheck;
  }
  return kOk;
}

/// Runs one subcommand and maps errors to exit codes.
inline int run(const std::string& command, const Args& a, Streams s) {
  try {
    if (command == "gen") return cmd_gen(a, s);
    if (command == "train") return cmd_train(a, s);
    if (command == "infer") return cmd_infer(a, s);
    if (command == "eval") return cmd_eval(a, s);
    if (command == "ablate") return cmd_ablate(a, s);
    if (command == "gradcheck") return cmd_gradcheck(a, s);
    s.err << "unknown subcommand " << command << '\n';
    return kConfig;
  } catch (const ConfigError& e) {
    s.err << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const GenerationError& e) {
    s.err << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const EvaluationError& e) {
    s.err << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const DivergenceError& e) {
    s.err << "divergence: " << e.what() << '\n';
    return kDivergence;
  } catch (const IoError& e) {
    s.err << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const ParseError& e) {
    s.err << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const FormatVersionError& e) {
    s.err << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    s.err << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const std::exception& e) {
    s.err << "error: " << e.what() << '\n';
    return kFailure;
  }
}

}  // namespace rrnet::cli
