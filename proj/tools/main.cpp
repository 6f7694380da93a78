#include <iostream>

#include <CLI11.hpp>

#include "s2fpn/app/commands.hpp"

using namespace s2fpn;
using namespace s2fpn::app;

int main(int argc, char** argv) {
  CLI::App cli{"S2-FPN real-time semantic segmentation: train, evaluate, infer and analyze"};
  cli.require_subcommand(1);
  cli.fallthrough();

  GlobalOptions global;
  std::uint64_t seed = 0;
  int threads = 1;
  cli.add_option("--config", global.config, "Run config file (key = value lines)");
  auto* seed_opt = cli.add_option("--seed", seed, "Global seed (overrides the config)");
  auto* threads_opt = cli.add_option("--threads", threads, "Kernel threads")->check(CLI::PositiveNumber);
  cli.add_flag("--f64", global.f64, "Run in 64-bit floating point");

  auto* train = cli.add_subcommand("train", "Train from the run config given with --config");

  EvalOptions eval_opts;
  auto* eval = cli.add_subcommand("eval", "Per-class IoU and mIoU of a checkpoint on a dataset split");
  eval->add_option("--checkpoint", eval_opts.checkpoint, "Model checkpoint")->required();
  eval->add_option("--dataset", eval_opts.dataset, "Dataset root")->required();
  eval->add_option("--split", eval_opts.split, "Split list name")->capture_default_str();
  eval->add_option("--palette", eval_opts.palette, "Palette file with class names");
  eval->add_option("--csv", eval_opts.csv, "Write the per-class table as CSV");
  eval->add_option("--confusion", eval_opts.confusion, "Write the confusion matrix as CSV");

  InferOptions infer_opts;
  auto* infer = cli.add_subcommand("infer", "Segment one PPM image");
  infer->add_option("--checkpoint", infer_opts.checkpoint, "Model checkpoint")->required();
  infer->add_option("--image", infer_opts.image, "Input image (P6 PPM)")->required();
  infer->add_option("--out", infer_opts.out, "Colour overlay output (PPM)")->required();
  infer->add_option("--labels", infer_opts.labels, "Raw label map output (PGM)");
  infer->add_option("--palette", infer_opts.palette, "Palette file");
  infer->add_option("--alpha", infer_opts.alpha, "Overlay blend factor in [0, 1]")->capture_default_str();

  AnalyzeOptions analyze_opts;
  auto* analyze = cli.add_subcommand("analyze", "Parameter, cost and latency report");
  analyze->add_option("--backbone", analyze_opts.backbone, "resnet18 | resnet34 | resnet34m");
  analyze->add_option("--height", analyze_opts.height, "Input height")->capture_default_str();
  analyze->add_option("--width", analyze_opts.width, "Input width")->capture_default_str();
  analyze->add_option("--batch", analyze_opts.batch, "Batch size")->capture_default_str();
  analyze->add_option("--latency-iters", analyze_opts.latency_iters, "Timed forward passes (0: skip)");
  analyze->add_option("--warmup", analyze_opts.warmup, "Untimed warm-up passes")->capture_default_str();
  analyze->add_flag("--compare", analyze_opts.compare, "Report all three backbones");
  analyze->add_option("--csv", analyze_opts.csv, "Write the report as CSV");

  GradcheckOptions grad_opts;
  auto* gradcheck = cli.add_subcommand("gradcheck", "Finite-difference gradient checks (64-bit)");
  gradcheck->add_option("--scope", grad_opts.scope, "all | ops | blocks | <case name>")->capture_default_str();
  gradcheck->add_option("--seeds", grad_opts.seeds, "Seeds per case")->capture_default_str();
  gradcheck->add_option("--tol", grad_opts.tolerance, "Max relative error")->capture_default_str();
  gradcheck->add_option("--eps", grad_opts.eps, "Central-difference step")->capture_default_str();

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = cli.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }
  if (*seed_opt) global.seed = seed;
  if (*threads_opt) global.threads = threads;

  try {
    if (*train) return cmd_train(global, std::cout);
    if (*eval) return cmd_eval(global, eval_opts, std::cout);
    if (*infer) return cmd_infer(global, infer_opts, std::cout);
    if (*analyze) return cmd_analyze(global, analyze_opts, std::cout);
    if (*gradcheck) return cmd_gradcheck(global, grad_opts, std::cout);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
