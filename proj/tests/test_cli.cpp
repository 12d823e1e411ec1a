#include "pairdiff/dataset.hpp"

#include "support.hpp"

#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

using namespace pairdiff;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  int code = -1;
  std::string output;
};

Outcome run(const fs::path& workdir, const std::string& args) {
  const fs::path log = workdir / "cli_output.txt";
  const std::string cmd = std::string(PAIRDIFF_CLI) + " " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  Outcome o;
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::ostringstream ss;
  ss << in.rdbuf();
  o.output = ss.str();
  return o;
}

bool contains(const std::string& s, const std::string& part) { return s.find(part) != std::string::npos; }

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Small enough that the whole pipeline finishes in seconds.
fs::path write_tiny_config(const fs::path& dir) {
  const json j = {
      {"name", "cli"},
      {"output_root", (dir / "runs").string()},
      {"data", {{"toy_count", 24}, {"eval_toy_count", 8}}},
      {"generator",
       {{"variant", "concat"}, {"base_channels", 8}, {"attention_heads", 2}, {"timesteps", 50}}},
      {"train", {{"epochs", 2}, {"batch_size", 4}, {"steps_per_epoch", 2}, {"T", 50}, {"checkpoint_fraction", 0.5}}},
      {"sr", {{"base_channels", 8}, {"steps_train", 50}, {"steps_infer", 5}}},
      {"sr_train", {{"epochs", 1}, {"batch_size", 4}, {"steps_per_epoch", 2}, {"T", 50}}},
      {"segmentation", {{"encoder_widths", {8, 16}}, {"epochs", 1}, {"batch_size", 4}}},
      {"sampling",
       {{"count", 6},
        {"score_samples", 4},
        {"histogram_bins", 32},
        {"sampler", {{"steps", 5}}},
        {"score_sampler", {{"steps", 5}}}}}};
  const fs::path path = dir / "tiny.json";
  std::ofstream(path) << j.dump(2);
  return path;
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
  testing::TempDir dir("cli_usage");
  CHECK(run(dir.path(), "").code == 2);
  CHECK(run(dir.path(), "frobnicate").code == 2);
  CHECK(run(dir.path(), "sample").code == 2);
  CHECK(run(dir.path(), "--seed notanumber pipeline").code == 2);
  const auto help = run(dir.path(), "--help");
  CHECK(help.code == 0);
  for (const char* cmd : {"train", "sample", "superres", "select", "segtrain", "segeval", "pipeline", "report"})
    CHECK(contains(help.output, cmd));

  const auto cfg = write_tiny_config(dir.path());
  const auto flavor = run(dir.path(), "--config '" + cfg.string() + "' train --flavor triple");
  CHECK(flavor.code == 2);
  CHECK(contains(flavor.output, "--flavor"));
  CHECK(run(dir.path(), "--config '" + cfg.string() + "' train --model vae").code == 2);

  std::ofstream(dir.path() / "bad.json") << R"({"train": {"epochs": "ten"}})";
  const auto bad = run(dir.path(), "--config '" + (dir.path() / "bad.json").string() + "' pipeline");
  CHECK(bad.code == 2);
  CHECK(contains(bad.output, "train.epochs"));
  CHECK(run(dir.path(), "--config '" + (dir.path() / "absent.json").string() + "' pipeline").code == 2);
}

TEST_CASE("runtime failures exit with 1") {
  testing::TempDir dir("cli_runtime");
  const auto missing = run(dir.path(), "sample --run '" + (dir.path() / "nowhere").string() + "' --dest x");
  CHECK(missing.code == 1);
  CHECK(contains(missing.output, "run.json"));
  fs::create_directories(dir.path() / "empty");
  CHECK(run(dir.path(), "report --input '" + (dir.path() / "empty").string() + "' --dest r.png").code == 1);
}

TEST_CASE("end-to-end pipeline, resumption and the individual commands") {
  testing::TempDir dir("cli_pipeline");
  const auto cfg = write_tiny_config(dir.path());
  const std::string base = "--config '" + cfg.string() + "' ";
  const fs::path root = dir.path() / "runs" / "cli";

  const auto first = run(dir.path(), base + "pipeline");
  INFO(first.output);
  REQUIRE(first.code == 0);
  const fs::path metrics = root / "pipeline" / "metrics.csv";
  const std::string table = read_text(metrics);
  CHECK(contains(table, "method,phase,dice,iou"));
  CHECK(contains(table, "concat,synthetic,"));
  CHECK(contains(table, "concat,finetuned,"));
  const auto generated = load_dataset(root / "pipeline" / "generated_sr");
  CHECK(generated.pairs.size() == 6);
  CHECK(generated.pairs[0].height() == 32);
  CHECK(fs::exists(root / "pipeline" / "generated" / "contact_sheet.png"));

  // Re-running skips every completed stage and leaves the results untouched.
  const auto second = run(dir.path(), base + "pipeline");
  CHECK(second.code == 0);
  CHECK(contains(second.output, "[segeval_finetuned] complete, skipping"));
  CHECK_FALSE(contains(second.output, "running"));
  CHECK(read_text(metrics) == table);

  const fs::path gen_run = root / "concat";
  const auto sample = run(dir.path(), base + "sample --run '" + gen_run.string() + "' --dest '" +
                                          (dir.path() / "s8").string() + "' -n 8 --mode ddim --steps 4");
  INFO(sample.output);
  CHECK(sample.code == 0);
  const auto manifest = json::parse(read_text(dir.path() / "s8" / "manifest.json"));
  CHECK(manifest["count"] == 8);
  CHECK(manifest["sampler_mode"] == "ddim");
  CHECK(manifest["sampler_steps"] == 4);
  CHECK(load_dataset(dir.path() / "s8").pairs.size() == 8);
  const auto again = run(dir.path(), base + "sample --run '" + gen_run.string() + "' --dest '" +
                                         (dir.path() / "s8").string() + "' -n 8 --mode ddim --steps 4");
  CHECK(again.code == 0);
  CHECK(contains(again.output, "skipping"));

  // More steps than the schedule has.
  CHECK(run(dir.path(), base + "sample --run '" + gen_run.string() + "' --dest s --steps 51").code == 2);
  CHECK(run(dir.path(), base + "superres --run '" + (root / "sr").string() + "' --input '" +
                            (dir.path() / "s8").string() + "' --dest s --steps 51").code == 2);
  // A generator run is not a super-resolution run.
  CHECK(run(dir.path(), base + "superres --run '" + gen_run.string() + "' --input '" + (dir.path() / "s8").string() +
                            "' --dest s").code == 2);

  const auto select = run(dir.path(), base + "select --run '" + gen_run.string() + "' --strategy best_val_loss");
  CHECK(select.code == 0);
  CHECK(contains(select.output, "<- selected"));
  CHECK(run(dir.path(), base + "select --run '" + gen_run.string() + "' --strategy lowest").code == 2);

  const auto report = run(dir.path(), base + "report --input '" + (dir.path() / "s8").string() + "' --dest '" +
                                          (dir.path() / "sheet.png").string() + "' --metrics '" + metrics.string() +
                                          "'");
  CHECK(report.code == 0);
  CHECK(fs::exists(dir.path() / "sheet.png"));
  CHECK(contains(report.output, "finetuned"));

  const auto eval = run(dir.path(), base + "segeval --model '" + (root / "pipeline" / "seg_synthetic").string() +
                                        "' --test '" + (dir.path() / "s8").string() + "' --csv '" +
                                        (dir.path() / "m.csv").string() + "' --threshold 0.7");
  CHECK(eval.code == 0);
  CHECK(contains(read_text(dir.path() / "m.csv"), "model,synthetic,"));
  CHECK(run(dir.path(), base + "segeval --model '" + (root / "pipeline" / "seg_synthetic").string() +
                            "' --threshold 2").code == 2);
}
