#include "pairdiff/training.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>

namespace pairdiff {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("train.batch_size must be >= 1");
  if (!(lr >= 0)) throw std::invalid_argument("train.lr must be non-negative");
  if (epochs < 1) throw std::invalid_argument("train.epochs must be >= 1");
  if (T < 1) throw std::invalid_argument("train.T must be >= 1");
  if (!(adv_weight >= 0)) throw std::invalid_argument("train.adv_weight must be non-negative");
  if (train_size < 1) throw std::invalid_argument("train.train_size must be >= 1");
  if (crop_size < train_size) throw std::invalid_argument("train.crop_size must be >= train.train_size");
  if (!(split_ratio > 0 && split_ratio < 1)) throw std::invalid_argument("train.split_ratio must lie in (0, 1)");
  if (steps_per_epoch < 0) throw std::invalid_argument("train.steps_per_epoch must be >= 0");
  if (!(clip_norm >= 0)) throw std::invalid_argument("train.clip_norm must be non-negative");
  if (!(checkpoint_fraction > 0 && checkpoint_fraction <= 1))
    throw std::invalid_argument("train.checkpoint_fraction must lie in (0, 1]");
}

int TrainConfig::resolved_steps_per_epoch(std::size_t n_train) const {
  if (steps_per_epoch > 0) return steps_per_epoch;
  return int((n_train + std::size_t(batch_size) - 1) / std::size_t(batch_size));
}

std::vector<int> TrainConfig::checkpoint_epochs() const {
  const int every = std::max(1, int(std::lround(checkpoint_fraction * epochs)));
  std::vector<int> out;
  for (int e = every; e < epochs; e += every) out.push_back(e);
  out.push_back(epochs);
  return out;
}

CheckpointRecord read_checkpoint(const fs::path& ckpt_dir) {
  std::ifstream in(ckpt_dir / "manifest.json");
  if (!in) throw std::runtime_error("missing checkpoint manifest in " + ckpt_dir.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("corrupt checkpoint manifest in " + ckpt_dir.string() + ": " + e.what());
  }
  CheckpointRecord r;
  r.epoch = j.at("epoch").get<int>();
  r.weights_uri = ckpt_dir;
  r.val_loss = j.at("val_loss").get<double>();
  if (j.contains("mean_jsd") && !j["mean_jsd"].is_null()) r.mean_jsd = j["mean_jsd"].get<double>();
  r.rng_state = j.value("rng_state", "");
  r.step = j.value("step", std::int64_t(0));
  r.config_hash = j.value("config_hash", "");
  return r;
}

void write_checkpoint_manifest(const CheckpointRecord& r) {
  json j = {{"epoch", r.epoch},       {"val_loss", r.val_loss}, {"step", r.step},
            {"config_hash", r.config_hash}, {"rng_state", r.rng_state}, {"weights", "weights.bin"}};
  j["mean_jsd"] = r.mean_jsd ? json(*r.mean_jsd) : json(nullptr);
  write_file_atomic(r.weights_uri / "manifest.json", j.dump(2));
}

std::vector<CheckpointRecord> list_checkpoints(const fs::path& run_dir) {
  std::vector<CheckpointRecord> out;
  if (!fs::is_directory(run_dir)) return out;
  for (const auto& entry : fs::directory_iterator(run_dir)) {
    const std::string name = entry.path().filename().string();
    if (!entry.is_directory() || name.rfind("ckpt_", 0) != 0 || name.find('.') != std::string::npos) continue;
    if (!fs::exists(entry.path() / "manifest.json")) continue;
    out.push_back(read_checkpoint(entry.path()));
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.epoch < b.epoch; });
  return out;
}

void write_train_log(const fs::path& path, const std::vector<EpochLog>& log) {
  std::ostringstream os;
  os.precision(9);
  os << "epoch,train_mse,val_mse,loss_d,loss_g_adv\n";
  for (const auto& e : log)
    os << e.epoch << ',' << e.train_mse << ',' << e.val_mse << ',' << e.loss_d << ',' << e.loss_g_adv << '\n';
  write_file_atomic(path, os.str());
}

std::vector<EpochLog> read_train_log(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read training log " + path.string());
  std::vector<EpochLog> out;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    EpochLog e;
    char c;
    std::istringstream ls(line);
    ls >> e.epoch >> c >> e.train_mse >> c >> e.val_mse >> c >> e.loss_d >> c >> e.loss_g_adv;
    if (!ls) throw std::runtime_error("malformed training log line: " + line);
    out.push_back(e);
  }
  return out;
}

ImageMaskPair center_view(const ImageMaskPair& pair, int crop_size, int out_size) {
  ImageMaskPair p = pair;
  const int side = std::min({crop_size, pair.height(), pair.width()});
  if (side < pair.height() || side < pair.width()) {
    const int y0 = (pair.height() - side) / 2, x0 = (pair.width() - side) / 2;
    p.image = crop(pair.image, y0, x0, side, side);
    p.mask = crop(pair.mask, y0, x0, side, side);
  }
  if (p.height() != out_size || p.width() != out_size) p = resize_pair(p, out_size, out_size);
  return p;
}

std::vector<ImageMaskPair> generate_pairs(const PairedGenerator<float>& model, const NoiseSchedule& sched, int n,
                                          const SamplerOptions& options, std::uint64_t seed, int chunk) {
  if (n < 0 || chunk < 1) throw std::invalid_argument("generate_pairs: invalid count or chunk");
  const auto& cfg = model.config();
  std::vector<ImageMaskPair> out;
  out.reserve(std::size_t(n));
  NoGradGuard guard;
  NoisePredictor<float> predictor = [&](const Tensor<float>& x, std::span<const int> t) {
    return model.predict_stacked(Var<float>(x), t).value();
  };
  for (int b = 0; b < n; b += chunk) {
    const int count = std::min(chunk, n - b);
    Rng rng(derive_seed(seed, std::uint64_t(b)));
    const Shape shape{count, cfg.input_size, cfg.input_size, cfg.state_channels()};
    auto pairs = state_to_pairs(sample_loop<float>(predictor, sched, shape, options, rng), cfg.image_channels,
                                "gen_", b);
    for (auto& p : pairs) out.push_back(std::move(p));
  }
  return out;
}

namespace {

struct StepLosses {
  double mse = 0, loss_d = 0, loss_g_adv = 0, total = 0;
};

/// One model family plugged into the shared loop.
class Task {
 public:
  virtual ~Task() = default;
  virtual ParamStore<float>& params() = 0;
  /// Side length of the pairs produced by augmentation.
  virtual int train_size() const = 0;
  /// Forward and backward for one batch; the loop zeroes grads and steps Adam.
  virtual StepLosses step(const std::vector<ImageMaskPair>& batch, int epoch0, Rng& rng) = 0;
  /// Loss on the given pairs with noise drawn from `rng`; returns the element-weighted MSE.
  virtual double eval_chunk(const std::vector<ImageMaskPair>& chunk, Rng& rng) = 0;
  virtual void save_extra(const fs::path&) const {}
  virtual void load_extra(const fs::path&) {}
};

std::vector<int> uniform_timesteps(int n, int T, Rng& rng) {
  std::vector<int> t(static_cast<std::size_t>(n));
  for (auto& v : t) v = uniform_int(rng, 1, T);
  return t;
}

class PairedTask final : public Task {
 public:
  PairedTask(PairedGenerator<float>& model, const TrainConfig& cfg, const DiscriminatorSchedule& sched)
      : model_(model), cfg_(cfg), sched_(make_linear_schedule(cfg.T)), disc_schedule_(sched) {
    if (model.config().timesteps != cfg.T)
      throw std::invalid_argument("train.T differs from the generator's timestep count");
    if (model.config().input_size != cfg.train_size)
      throw std::invalid_argument("train.train_size differs from the generator's input size");
    if (cfg.use_discriminator) {
      disc_schedule_.validate();
      if (disc_schedule_.T != cfg.T) throw std::invalid_argument("discriminator schedule T differs from train.T");
      DiscriminatorConfig dc;
      dc.base_channels = model.config().base_channels;
      dc.input_size = model.config().input_size;
      dc.state_channels = model.config().state_channels();
      dc.timesteps = cfg.T;
      disc_ = std::make_unique<Discriminator<float>>(dc, derive_seed(cfg.seed, 2));
      Adam<float>::Options o;
      o.lr = cfg.lr;
      o.clip_norm = cfg.clip_norm;
      disc_opt_ = std::make_unique<Adam<float>>(disc_->params(), o);
    }
  }

  ParamStore<float>& params() override { return model_.params(); }
  int train_size() const override { return model_.config().input_size; }

  StepLosses step(const std::vector<ImageMaskPair>& batch, int epoch0, Rng& rng) override {
    const Tensor<float> x0 = pairs_to_state(batch);
    const int n = x0.n();
    const auto t = cfg_.use_discriminator ? sample_timesteps(n, epoch0, disc_schedule_, rng)
                                          : uniform_timesteps(n, cfg_.T, rng);
    const Tensor<float> noise = randn<float>(x0.shape(), rng);
    const Tensor<float> x_t = forward_diffuse<float>(x0, std::span<const int>(t), noise, sched_);
    auto eps = model_.predict_stacked(Var<float>(x_t), t);
    auto mse = ops::mse(eps, ops::constant(noise));
    StepLosses out;
    out.mse = mse.value().item();
    if (!cfg_.use_discriminator) {
      out.total = out.mse;
      mse.backward();
      return out;
    }
    std::vector<int> t_prev(t);
    for (auto& v : t_prev) v -= 1;
    const Tensor<float> real_prev =
        forward_diffuse<float>(x0, std::span<const int>(t_prev), randn<float>(x0.shape(), rng), sched_);
    auto fake_prev = ddpm_reverse_step<float>(eps, x_t, t, randn<float>(x0.shape(), rng), sched_);

    disc_->params().zero_grad();
    auto loss_d = discriminator_loss(*disc_, Var<float>(real_prev), fake_prev.detach(), t_prev, t_prev);
    loss_d.backward();
    disc_opt_->step();

    auto adv = generator_adversarial_loss(*disc_, fake_prev, t_prev);
    auto total = combined_generator_loss(mse, adv, cfg_.adv_weight);
    out.loss_d = loss_d.value().item();
    out.loss_g_adv = adv.value().item();
    out.total = total.value().item();
    total.backward();
    return out;
  }

  double eval_chunk(const std::vector<ImageMaskPair>& chunk, Rng& rng) override {
    NoGradGuard guard;
    const Tensor<float> x0 = pairs_to_state(chunk);
    const auto t = uniform_timesteps(x0.n(), cfg_.T, rng);
    const Tensor<float> noise = randn<float>(x0.shape(), rng);
    const Tensor<float> x_t = forward_diffuse<float>(x0, std::span<const int>(t), noise, sched_);
    return ops::mse(model_.predict_stacked(Var<float>(x_t), t), ops::constant(noise)).value().item();
  }

  void save_extra(const fs::path& dir) const override {
    if (!disc_) return;
    disc_->params().save(dir / "disc.bin");
    disc_opt_->save(dir / "disc_optimizer.bin");
  }
  void load_extra(const fs::path& dir) override {
    if (!disc_) return;
    disc_->params().load(dir / "disc.bin");
    disc_opt_->load(dir / "disc_optimizer.bin");
  }

 private:
  PairedGenerator<float>& model_;
  TrainConfig cfg_;
  NoiseSchedule sched_;
  DiscriminatorSchedule disc_schedule_;
  std::unique_ptr<Discriminator<float>> disc_;
  std::unique_ptr<Adam<float>> disc_opt_;
};

class SRTask final : public Task {
 public:
  SRTask(SRModel<float>& model, const TrainConfig& cfg) : model_(model), cfg_(cfg), sched_(make_linear_schedule(cfg.T)) {
    if (model.config().steps_train != cfg.T) throw std::invalid_argument("train.T differs from sr.steps_train");
    if (model.config().high_size != cfg.train_size)
      throw std::invalid_argument("train.train_size differs from sr.high_size");
  }

  ParamStore<float>& params() override { return model_.params(); }
  int train_size() const override { return model_.config().high_size; }

  StepLosses step(const std::vector<ImageMaskPair>& batch, int, Rng& rng) override {
    auto mse = loss(batch, rng);
    StepLosses out;
    out.mse = out.total = mse.value().item();
    mse.backward();
    return out;
  }

  double eval_chunk(const std::vector<ImageMaskPair>& chunk, Rng& rng) override {
    NoGradGuard guard;
    return loss(chunk, rng).value().item();
  }

 private:
  Var<float> loss(const std::vector<ImageMaskPair>& batch, Rng& rng) {
    std::vector<ImageMaskPair> low;
    low.reserve(batch.size());
    for (const auto& p : batch) {
      if (p.height() != model_.config().high_size || p.width() != model_.config().high_size)
        throw ShapeError("train_sr: ground truth '" + p.id + "' is not at the high-res size");
      low.push_back(resize_pair(p, model_.config().low_size, model_.config().low_size));
    }
    const Tensor<float> x0 = pairs_to_state(batch);
    const Tensor<float> cond = pairs_to_state(low);
    const auto t = uniform_timesteps(x0.n(), cfg_.T, rng);
    const Tensor<float> noise = randn<float>(x0.shape(), rng);
    const Tensor<float> x_t = forward_diffuse<float>(x0, std::span<const int>(t), noise, sched_);
    return ops::mse(model_.forward(Var<float>(x_t), t, cond), ops::constant(noise));
  }

  SRModel<float>& model_;
  TrainConfig cfg_;
  NoiseSchedule sched_;
};

fs::path ckpt_dir(const fs::path& run_dir, int epoch) { return run_dir / ("ckpt_" + std::to_string(epoch)); }

TrainResult run_training(Task& task, const std::vector<ImageMaskPair>& dataset, const TrainConfig& cfg,
                         const TrainOptions& options) {
  cfg.validate();
  if (dataset.empty()) throw std::invalid_argument("training: empty dataset");
  auto [train, val_raw] = split_dataset(dataset, cfg.split_ratio, cfg.seed);
  if (train.empty()) throw std::invalid_argument("training: split left no training pairs");
  for (const auto& p : train)
    if (p.height() < cfg.crop_size || p.width() < cfg.crop_size)
      throw std::invalid_argument("training: pair '" + p.id + "' is smaller than crop_size " +
                                  std::to_string(cfg.crop_size));
  std::vector<ImageMaskPair> val;
  for (const auto& p : val_raw) val.push_back(center_view(p, cfg.crop_size, task.train_size()));

  Adam<float>::Options opt_options;
  opt_options.lr = cfg.lr;
  opt_options.clip_norm = cfg.clip_norm;
  Adam<float> opt(task.params(), opt_options);
  Rng rng(derive_seed(cfg.seed, 1));

  TrainResult result;
  const bool persist = !options.run_dir.empty();
  int start_epoch = 1;
  if (persist) {
    fs::create_directories(options.run_dir);
    if (options.resume) {
      auto existing = list_checkpoints(options.run_dir);
      if (!existing.empty()) {
        const CheckpointRecord& last = existing.back();
        task.params().load(last.weights_uri / "weights.bin");
        opt.load(last.weights_uri / "optimizer.bin");
        task.load_extra(last.weights_uri);
        restore_rng_state(rng, last.rng_state);
        result.steps = last.step;
        start_epoch = last.epoch + 1;
        result.checkpoints = existing;
        if (fs::exists(options.run_dir / "train_log.csv"))
          for (const auto& e : read_train_log(options.run_dir / "train_log.csv"))
            if (e.epoch <= last.epoch) result.log.push_back(e);
      }
    }
  }

  const int steps_per_epoch = cfg.resolved_steps_per_epoch(train.size());
  const auto save_epochs = cfg.checkpoint_epochs();
  const int n_train = int(train.size());
  std::vector<ImageMaskPair> batch(std::size_t(cfg.batch_size));

  for (int epoch = start_epoch; epoch <= cfg.epochs; ++epoch) {
    EpochLog entry;
    entry.epoch = epoch;
    for (int s = 0; s < steps_per_epoch; ++s) {
      for (auto& item : batch)
        item = augment(train[std::size_t(uniform_int(rng, 0, n_train - 1))], cfg.crop_size, task.train_size(), rng);
      task.params().zero_grad();
      const StepLosses l = task.step(batch, epoch - 1, rng);
      ++result.steps;
      if (!std::isfinite(l.total))
        throw std::runtime_error("training: non-finite loss at step " + std::to_string(result.steps) + " (epoch " +
                                 std::to_string(epoch) + ")");
      opt.step();
      entry.train_mse += l.mse;
      entry.loss_d += l.loss_d;
      entry.loss_g_adv += l.loss_g_adv;
      if (options.on_step) options.on_step(StepInfo{result.steps, epoch, l.mse, l.loss_d, l.loss_g_adv, l.total});
    }
    entry.train_mse /= steps_per_epoch;
    entry.loss_d /= steps_per_epoch;
    entry.loss_g_adv /= steps_per_epoch;

    if (!val.empty()) {
      Rng val_rng(derive_seed(cfg.seed, 3));
      double weighted = 0;
      constexpr std::size_t kChunk = 64;
      for (std::size_t b = 0; b < val.size(); b += kChunk) {
        const std::size_t e = std::min(val.size(), b + kChunk);
        const std::vector<ImageMaskPair> chunk(val.begin() + std::ptrdiff_t(b), val.begin() + std::ptrdiff_t(e));
        weighted += task.eval_chunk(chunk, val_rng) * double(e - b);
      }
      entry.val_mse = weighted / double(val.size());
    } else {
      entry.val_mse = entry.train_mse;
    }
    result.log.push_back(entry);

    if (std::binary_search(save_epochs.begin(), save_epochs.end(), epoch)) {
      CheckpointRecord rec;
      rec.epoch = epoch;
      rec.val_loss = entry.val_mse;
      rec.rng_state = rng_state(rng);
      rec.step = result.steps;
      rec.config_hash = options.config_hash;
      if (persist) {
        const fs::path final_dir = ckpt_dir(options.run_dir, epoch);
        const fs::path tmp = final_dir.string() + ".tmp";
        fs::remove_all(tmp);
        fs::create_directories(tmp);
        task.params().save(tmp / "weights.bin");
        opt.save(tmp / "optimizer.bin");
        task.save_extra(tmp);
        rec.weights_uri = tmp;
        write_checkpoint_manifest(rec);
        fs::remove_all(final_dir);
        fs::rename(tmp, final_dir);
        rec.weights_uri = final_dir;
      }
      std::erase_if(result.checkpoints, [&](const auto& r) { return r.epoch == epoch; });
      result.checkpoints.push_back(rec);
    }
    if (persist) write_train_log(options.run_dir / "train_log.csv", result.log);
  }
  return result;
}

}  // namespace

TrainResult train_paired(PairedGenerator<float>& model, const std::vector<ImageMaskPair>& dataset,
                         const TrainConfig& train, const DiscriminatorSchedule& disc_schedule,
                         const TrainOptions& options) {
  train.validate();
  PairedTask task(model, train, disc_schedule);
  return run_training(task, dataset, train, options);
}

TrainResult train_sr(SRModel<float>& model, const std::vector<ImageMaskPair>& dataset, const TrainConfig& train,
                     const TrainOptions& options) {
  train.validate();
  SRTask task(model, train);
  return run_training(task, dataset, train, options);
}

}  // namespace pairdiff
