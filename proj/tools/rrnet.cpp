#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "rrnet/cli.hpp"

int main(int argc, char** argv) {
  using rrnet::cli::Args;
  CLI::App app{"rrnet: synthetic HOI data, point-based detector training, inference and evaluation"};
  app.require_subcommand(1);
  Args a;
  std::string config, out = ".", data, checkpoint, detections;
  std::size_t workers = 0;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "run config JSON");
    sub->add_option("--set", a.sets, "dotted override key=value (repeatable)");
    sub->add_option("--out", out, "output directory");
  };
  auto with_data = [&](CLI::App* sub) {
    sub->add_option("--data", data, "dataset JSONL written by gen (default: generate from config)");
  };

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  common(gen);
  auto* train = app.add_subcommand("train", "train a model into a run directory");
  common(train);
  with_data(train);
  train->add_option("--checkpoint", checkpoint, "resume from this checkpoint");
  train->add_option("--workers", workers, "threads for per-scene gradients");
  auto* infer = app.add_subcommand("infer", "write detections for a dataset");
  common(infer);
  with_data(infer);
  infer->add_option("--checkpoint", checkpoint, "trained parameters")->required();
  infer->add_flag("--dump-heatmaps", a.dump_heatmaps, "write H, O and I heatmaps as PGM files");
  infer->add_flag("--dump-cpm", a.dump_cpm, "write the CPM gate matrix of every scene as CSV");
  auto* eval = app.add_subcommand("eval", "score detections against ground truth");
  common(eval);
  with_data(eval);
  eval->add_option("--detections", detections, "detections JSONL from infer")->required();
  auto* ablate = app.add_subcommand("ablate", "train and score every head wiring");
  common(ablate);
  with_data(ablate);
  ablate->add_option("--workers", workers, "threads for per-scene gradients");
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  grad->add_option("--seed", a.seed, "suite seed");
  grad->add_option("--instances", a.instances, "random instances per op")->check(CLI::PositiveNumber);
  grad->add_option("--corrupt", a.corrupt, "scale one op's gradient to check the suite catches it")
      ->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : rrnet::cli::kConfig;
  }

  if (!config.empty()) a.config = config;
  a.out = out;
  if (!data.empty()) a.data = data;
  if (!checkpoint.empty()) a.checkpoint = checkpoint;
  if (!detections.empty()) a.detections = detections;
  if (workers) a.workers = workers;

  const std::string command = app.get_subcommands().front()->get_name();
  return rrnet::cli::run(command, a, {std::cout, std::cerr});
}
