#include "commands.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace pairdiff;
using namespace pairdiff::cli;

int main(int argc, char** argv) {
  CLI::App app{"Paired image-mask diffusion toolkit"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  app.add_option("--config", config_path, "Experiment config (JSON); defaults to the built-in toy config");
  app.add_option("--seed", seed, "Master seed overriding the config");
  app.add_option("--out", out, "Output root overriding the config");

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Train the paired generator or the super-resolution model");
  c_train->add_option("--flavor", train.flavor, "concat | two_encoder | shared_encoder");
  c_train->add_flag("--discriminator", train.discriminator, "Add the time-conditioned discriminator");
  c_train->add_flag("--resume", train.resume, "Continue from the latest checkpoint");
  c_train->add_option("--model", train.model, "generator | sr");

  SelectArgs select;
  auto* c_select = app.add_subcommand("select", "Score checkpoints and pick one");
  c_select->add_option("--run", select.run, "Run directory")->required();
  c_select->add_option("--strategy", select.strategy, "best_val_loss | final_epoch | min_mean_jsd");

  SampleArgs sample;
  auto* c_sample = app.add_subcommand("sample", "Generate pairs from a trained generator");
  c_sample->add_option("--run", sample.run, "Generator run directory")->required();
  c_sample->add_option("--dest", sample.dest, "Output dataset directory")->required();
  c_sample->add_option("-n,--count", sample.n, "Number of pairs");
  c_sample->add_option("--mode", sample.mode, "ddpm | ddim");
  c_sample->add_option("--steps", sample.steps, "Sampler steps");
  c_sample->add_option("--strategy", sample.strategy, "Checkpoint selection strategy");
  c_sample->add_flag("--grid", sample.grid, "Also write contact_sheet.png");

  SuperresArgs superres;
  auto* c_superres = app.add_subcommand("superres", "Upscale a generated dataset 2x");
  c_superres->add_option("--run", superres.run, "Super-resolution run directory")->required();
  c_superres->add_option("--input", superres.input, "Low-resolution dataset directory")->required();
  c_superres->add_option("--dest", superres.dest, "Output dataset directory")->required();
  c_superres->add_option("--mode", superres.mode, "ddpm | ddim");
  c_superres->add_option("--steps", superres.steps, "Sampler steps");

  SegTrainArgs segtrain;
  auto* c_segtrain = app.add_subcommand("segtrain", "Train (or fine-tune) a segmenter");
  c_segtrain->add_option("--train", segtrain.train, "Training dataset directory")->required();
  c_segtrain->add_option("--dest", segtrain.dest, "Model directory")->required();
  c_segtrain->add_option("--init", segtrain.init, "Model directory to fine-tune from");

  SegEvalArgs segeval;
  auto* c_segeval = app.add_subcommand("segeval", "Evaluate a segmenter with Dice and IoU");
  c_segeval->add_option("--model", segeval.model, "Model directory")->required();
  c_segeval->add_option("--test", segeval.test, "Test dataset directory (default: config eval data)");
  c_segeval->add_option("--threshold", segeval.threshold, "Foreground threshold (>= rule)");
  c_segeval->add_option("--method", segeval.method, "Method label for the CSV row");
  c_segeval->add_option("--phase", segeval.phase, "Phase label for the CSV row");
  c_segeval->add_option("--csv", segeval.csv, "Metrics CSV to append to");

  auto* c_pipeline = app.add_subcommand("pipeline", "Run every stage end to end (resumable)");

  ReportArgs report;
  auto* c_report = app.add_subcommand("report", "Contact sheet and metrics table");
  c_report->add_option("--input", report.input, "Dataset directory")->required();
  c_report->add_option("--dest", report.dest, "Output PNG")->required();
  c_report->add_option("--count", report.count, "Pairs to show");
  c_report->add_option("--metrics", report.metrics, "Metrics CSV to print");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    ExperimentConfig cfg = config_path.empty() ? toy_config() : load_config(config_path);
    if (seed) cfg.apply_seed(*seed);
    if (out) cfg.output_root = *out;
    cfg.validate();
    auto& log = std::cout;
    if (c_train->parsed()) cmd_train(cfg, train, log);
    if (c_select->parsed()) cmd_select(cfg, select, log);
    if (c_sample->parsed()) cmd_sample(cfg, sample, log);
    if (c_superres->parsed()) cmd_superres(cfg, superres, log);
    if (c_segtrain->parsed()) cmd_segtrain(cfg, segtrain, log);
    if (c_segeval->parsed()) cmd_segeval(cfg, segeval, log);
    if (c_pipeline->parsed()) cmd_pipeline(cfg, log);
    if (c_report->parsed()) cmd_report(cfg, report, log);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
