#include "pairdiff/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

namespace pairdiff {

using nlohmann::json;

namespace {

/// Reads fields of one JSON object, remembering which keys were consumed.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    const std::string field = path_.empty() ? key : path_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(field + ": expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(field + ": expected an integer");
      if (std::is_unsigned_v<T> && v.get<long long>() < 0) throw ConfigError(field + ": must be non-negative");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(field + ": expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(field + ": expected a string");
    } else if constexpr (std::is_same_v<T, std::vector<int>>) {
      if (!v.is_array()) throw ConfigError(field + ": expected an array of integers");
      for (const auto& e : v)
        if (!e.is_number_integer()) throw ConfigError(field + ": expected an array of integers");
    }
    out = v.get<T>();
  }

  /// Parses a string field through `parse`, reporting failures under the field path.
  template <typename T, typename Parse>
  void get_enum(const char* key, T& out, Parse parse) {
    std::string text;
    if (!j_.contains(key)) {
      seen_.insert(key);
      return;
    }
    get(key, text);
    try {
      out = parse(text);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(child(key) + ": " + e.what());
    }
  }

  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const json& at(const char* key) const { return j_.at(key); }
  std::string child(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw ConfigError(child(key.c_str()) + ": unknown field");
  }

 private:
  std::string where() const { return path_.empty() ? "<root>" : path_; }
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_train(const json& j, const std::string& path, TrainConfig& t) {
  Reader r(j, path);
  r.get("batch_size", t.batch_size);
  r.get("lr", t.lr);
  r.get("epochs", t.epochs);
  r.get("T", t.T);
  r.get("adv_weight", t.adv_weight);
  r.get("use_discriminator", t.use_discriminator);
  r.get("crop_size", t.crop_size);
  r.get("train_size", t.train_size);
  r.get("split_ratio", t.split_ratio);
  r.get("steps_per_epoch", t.steps_per_epoch);
  r.get("clip_norm", t.clip_norm);
  r.get("checkpoint_fraction", t.checkpoint_fraction);
  r.finish();
}

json train_json(const TrainConfig& t) {
  return {{"batch_size", t.batch_size},
          {"lr", t.lr},
          {"epochs", t.epochs},
          {"T", t.T},
          {"adv_weight", t.adv_weight},
          {"use_discriminator", t.use_discriminator},
          {"crop_size", t.crop_size},
          {"train_size", t.train_size},
          {"split_ratio", t.split_ratio},
          {"steps_per_epoch", t.steps_per_epoch},
          {"clip_norm", t.clip_norm},
          {"checkpoint_fraction", t.checkpoint_fraction}};
}

void read_sampler(const json& j, const std::string& path, SamplerOptions& s) {
  Reader r(j, path);
  r.get_enum("mode", s.mode, parse_sampler_mode);
  r.get("steps", s.steps);
  r.get_enum("variance", s.variance, [](const std::string& v) {
    if (v == "beta") return PosteriorVariance::kBeta;
    if (v == "beta_tilde") return PosteriorVariance::kBetaTilde;
    throw std::invalid_argument("expected beta or beta_tilde, got '" + v + "'");
  });
  r.get("clip_x0", s.clip_x0);
  r.finish();
}

json sampler_json(const SamplerOptions& s) {
  return {{"mode", to_string(s.mode)},
          {"steps", s.steps},
          {"variance", s.variance == PosteriorVariance::kBeta ? "beta" : "beta_tilde"},
          {"clip_x0", s.clip_x0}};
}

template <typename F>
void rethrow_as_config(const std::string& path, F&& f) {
  try {
    f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace

ExperimentConfig config_from_json(const json& j) {
  Reader r(j, "");
  std::string preset = "toy";
  r.get("preset", preset);
  if (preset != "toy" && preset != "full") throw ConfigError("preset: expected toy or full, got '" + preset + "'");
  ExperimentConfig c = preset == "toy" ? toy_config() : full_config();
  r.get("name", c.name);
  r.get("seed", c.seed);
  r.get("output_root", c.output_root);
  if (r.has("data")) {
    Reader d(r.at("data"), "data");
    d.get("root", c.data.root);
    d.get("toy_count", c.data.toy_count);
    d.get("toy_size", c.data.toy_size);
    d.get("toy_seed", c.data.toy_seed);
    d.get("eval_root", c.data.eval_root);
    d.get("eval_toy_count", c.data.eval_toy_count);
    d.get("eval_toy_seed", c.data.eval_toy_seed);
    d.get("eval_crop", c.data.eval_crop);
    d.finish();
  }
  if (r.has("generator")) {
    auto& g = c.generator;
    Reader gr(r.at("generator"), "generator");
    gr.get_enum("variant", g.variant, parse_variant);
    gr.get_enum("skip_fusion", g.skip_fusion, parse_skip_fusion);
    gr.get("base_channels", g.base_channels);
    gr.get("depth", g.depth);
    gr.get("blocks_per_level", g.blocks_per_level);
    gr.get("attention_heads", g.attention_heads);
    gr.get("image_channels", g.image_channels);
    gr.get("input_size", g.input_size);
    gr.get("timesteps", g.timesteps);
    gr.finish();
  }
  if (r.has("train")) read_train(r.at("train"), "train", c.train);
  if (r.has("discriminator")) {
    auto& s = c.discriminator;
    Reader dr(r.at("discriminator"), "discriminator");
    dr.get("sigma", s.sigma);
    dr.get("alpha_epochs", s.alpha_epochs);
    dr.get("i0", s.i0);
    dr.get("priority_until_epoch", s.priority_until_epoch);
    dr.finish();
  }
  if (r.has("sr")) {
    auto& s = c.sr;
    Reader sr(r.at("sr"), "sr");
    sr.get("low_size", s.low_size);
    sr.get("high_size", s.high_size);
    sr.get("steps_train", s.steps_train);
    sr.get("steps_infer", s.steps_infer);
    sr.get_enum("infer_mode", s.infer_mode, parse_sampler_mode);
    sr.get("base_channels", s.base_channels);
    sr.get("depth", s.depth);
    sr.get("blocks_per_level", s.blocks_per_level);
    sr.get("output_skip", s.output_skip);
    sr.finish();
  }
  if (r.has("sr_train")) read_train(r.at("sr_train"), "sr_train", c.sr_train);
  if (r.has("segmentation")) {
    auto& s = c.segmentation;
    Reader sr(r.at("segmentation"), "segmentation");
    sr.get("encoder_widths", s.encoder_widths);
    sr.get("lr", s.lr);
    sr.get("momentum", s.momentum);
    sr.get("epochs", s.epochs);
    sr.get("batch_size", s.batch_size);
    sr.get("dice_weight", s.dice_weight);
    sr.get("bce_weight", s.bce_weight);
    sr.finish();
  }
  if (r.has("sampling")) {
    auto& s = c.sampling;
    Reader sr(r.at("sampling"), "sampling");
    if (sr.has("sampler")) read_sampler(sr.at("sampler"), "sampling.sampler", s.sampler);
    sr.get("count", s.count);
    sr.get_enum("selection", s.selection, parse_selection_strategy);
    sr.get("score_samples", s.score_samples);
    if (sr.has("score_sampler")) read_sampler(sr.at("score_sampler"), "sampling.score_sampler", s.score_sampler);
    sr.get("histogram_bins", s.histogram_bins);
    sr.finish();
  }
  r.finish();
  c.sr.image_channels = c.generator.image_channels;
  c.segmentation.image_channels = c.generator.image_channels;
  c.apply_seed(c.seed);
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

void ExperimentConfig::apply_seed(std::uint64_t value) {
  seed = value;
  train.seed = value;
  sr_train.seed = derive_seed(value, 17);
}

void ExperimentConfig::validate() const {
  if (name.empty() || name.find('/') != std::string::npos) throw ConfigError("name: must be a non-empty plain name");
  if (data.root.empty() && (data.toy_count < 2 || data.toy_size < 16))
    throw ConfigError("data: toy_count must be >= 2 and toy_size >= 16");
  if (data.eval_root.empty() && data.eval_toy_count < 1) throw ConfigError("data.eval_toy_count: must be >= 1");
  if (data.eval_crop < 0) throw ConfigError("data.eval_crop: must be >= 0");
  rethrow_as_config("generator", [&] { generator.validate(); });
  rethrow_as_config("train", [&] { train.validate(); });
  rethrow_as_config("sr", [&] { sr.validate(); });
  rethrow_as_config("sr_train", [&] { sr_train.validate(); });
  rethrow_as_config("segmentation", [&] { segmentation.validate(); });
  if (train.use_discriminator) rethrow_as_config("discriminator", [&] {
      DiscriminatorSchedule s = discriminator;
      s.T = train.T;
      s.validate();
    });
  if (train.T != generator.timesteps) throw ConfigError("train.T: must equal generator.timesteps");
  if (train.train_size != generator.input_size) throw ConfigError("train.train_size: must equal generator.input_size");
  if (sr.low_size != generator.input_size) throw ConfigError("sr.low_size: must equal generator.input_size");
  if (sr_train.T != sr.steps_train) throw ConfigError("sr_train.T: must equal sr.steps_train");
  if (sr_train.train_size != sr.high_size) throw ConfigError("sr_train.train_size: must equal sr.high_size");
  if (sampling.count < 1) throw ConfigError("sampling.count: must be >= 1");
  if (sampling.score_samples < 1) throw ConfigError("sampling.score_samples: must be >= 1");
  if (sampling.histogram_bins < 2) throw ConfigError("sampling.histogram_bins: must be >= 2");
  for (const auto* s : {&sampling.sampler, &sampling.score_sampler})
    if (s->steps < 1 || s->steps > generator.timesteps)
      throw ConfigError("sampling: sampler steps must lie in [1, generator.timesteps]");
}

json ExperimentConfig::to_json() const {
  return {{"name", name},
          {"seed", seed},
          {"output_root", output_root},
          {"data",
           {{"root", data.root},
            {"toy_count", data.toy_count},
            {"toy_size", data.toy_size},
            {"toy_seed", data.toy_seed},
            {"eval_root", data.eval_root},
            {"eval_toy_count", data.eval_toy_count},
            {"eval_toy_seed", data.eval_toy_seed},
            {"eval_crop", data.eval_crop}}},
          {"generator",
           {{"variant", to_string(generator.variant)},
            {"skip_fusion", to_string(generator.skip_fusion)},
            {"base_channels", generator.base_channels},
            {"depth", generator.depth},
            {"blocks_per_level", generator.blocks_per_level},
            {"attention_heads", generator.attention_heads},
            {"image_channels", generator.image_channels},
            {"input_size", generator.input_size},
            {"timesteps", generator.timesteps}}},
          {"train", train_json(train)},
          {"discriminator",
           {{"sigma", discriminator.sigma},
            {"alpha_epochs", discriminator.alpha_epochs},
            {"i0", discriminator.i0},
            {"priority_until_epoch", discriminator.priority_until_epoch}}},
          {"sr",
           {{"low_size", sr.low_size},
            {"high_size", sr.high_size},
            {"steps_train", sr.steps_train},
            {"steps_infer", sr.steps_infer},
            {"infer_mode", to_string(sr.infer_mode)},
            {"base_channels", sr.base_channels},
            {"depth", sr.depth},
            {"blocks_per_level", sr.blocks_per_level},
            {"output_skip", sr.output_skip}}},
          {"sr_train", train_json(sr_train)},
          {"segmentation",
           {{"encoder_widths", segmentation.encoder_widths},
            {"lr", segmentation.lr},
            {"momentum", segmentation.momentum},
            {"epochs", segmentation.epochs},
            {"batch_size", segmentation.batch_size},
            {"dice_weight", segmentation.dice_weight},
            {"bce_weight", segmentation.bce_weight}}},
          {"sampling",
           {{"sampler", sampler_json(sampling.sampler)},
            {"count", sampling.count},
            {"selection", to_string(sampling.selection)},
            {"score_samples", sampling.score_samples},
            {"score_sampler", sampler_json(sampling.score_sampler)},
            {"histogram_bins", sampling.histogram_bins}}}};
}

std::string ExperimentConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(to_json().dump())));
  return buf;
}

ExperimentConfig toy_config() {
  ExperimentConfig c;
  c.name = "toy";
  c.generator.base_channels = 16;
  c.generator.depth = 2;
  c.generator.blocks_per_level = 1;
  c.generator.input_size = 16;
  c.train.batch_size = 16;
  c.train.lr = 1e-3;
  c.train.epochs = 160;
  c.train.crop_size = 32;
  c.train.train_size = 16;
  c.discriminator.priority_until_epoch = 20;
  c.sr.low_size = 16;
  c.sr.high_size = 32;
  c.sr_train = c.train;
  c.sr_train.lr = 2e-3;
  c.sr_train.epochs = 40;
  c.sr_train.train_size = 32;
  c.segmentation.epochs = 20;
  c.apply_seed(c.seed);
  return c;
}

ExperimentConfig full_config() {
  ExperimentConfig c;
  c.name = "full";
  c.generator.base_channels = 64;
  c.generator.depth = 4;
  c.generator.input_size = 128;
  c.train.crop_size = 512;
  c.train.train_size = 128;
  c.sr.low_size = 128;
  c.sr.high_size = 256;
  c.sr.base_channels = 64;
  c.sr.depth = 4;
  c.sr.blocks_per_level = 2;
  c.sr_train = c.train;
  c.sr_train.train_size = 256;
  c.data.eval_crop = 512;
  c.sampling.sampler = {SamplerMode::kDdpm, 1000, PosteriorVariance::kBeta, true};
  c.sampling.count = 5000;
  c.apply_seed(c.seed);
  return c;
}

}  // namespace pairdiff
