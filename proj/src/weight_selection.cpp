#include "pairdiff/weight_selection.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace pairdiff {

RGBHistogram rgb_histogram(const std::vector<Image>& images, int bins) {
  if (images.empty()) throw std::invalid_argument("rgb_histogram: empty image set");
  if (bins < 2) throw std::invalid_argument("rgb_histogram: bins must be >= 2");
  RGBHistogram h;
  h.bins = bins;
  std::array<std::vector<std::uint64_t>, 3> counts;
  for (auto& c : counts) c.assign(std::size_t(bins), 0);
  std::uint64_t pixels = 0;
  for (const auto& img : images) {
    if (img.c() != 3) throw ShapeError("rgb_histogram: expected 3 channels, got " + img.shape().str());
    const auto m = img.mat();
    for (Eigen::Index p = 0; p < m.rows(); ++p)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(double(m(p, c)), 0.0, 1.0);
        const int b = std::min(bins - 1, int(std::floor(v * bins)));
        ++counts[std::size_t(c)][std::size_t(b)];
      }
    pixels += std::uint64_t(m.rows());
  }
  for (int c = 0; c < 3; ++c) {
    h.per_channel[std::size_t(c)].resize(std::size_t(bins));
    for (int b = 0; b < bins; ++b)
      h.per_channel[std::size_t(c)][std::size_t(b)] = double(counts[std::size_t(c)][std::size_t(b)]) / double(pixels);
  }
  return h;
}

double js_divergence(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size()) throw std::invalid_argument("js_divergence: length mismatch");
  double total = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0 || q[i] < 0) throw std::invalid_argument("js_divergence: negative probability");
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0) total += 0.5 * p[i] * std::log(p[i] / m);
    if (q[i] > 0) total += 0.5 * q[i] * std::log(q[i] / m);
  }
  return std::max(0.0, total);
}

double mean_js_divergence(const RGBHistogram& a, const RGBHistogram& b) {
  if (a.bins != b.bins) throw std::invalid_argument("mean_js_divergence: bin counts differ");
  double sum = 0;
  for (std::size_t c = 0; c < 3; ++c) sum += js_divergence(a.per_channel[c], b.per_channel[c]);
  return sum / 3.0;
}

double score_generator(const PairedGenerator<float>& model, const NoiseSchedule& sched, const RGBHistogram& train,
                       int n_samples, const SamplerOptions& options, std::uint64_t seed) {
  if (n_samples < 1) throw std::invalid_argument("score_generator: n_samples must be >= 1");
  const auto pairs = generate_pairs(model, sched, n_samples, options, seed);
  std::vector<Image> images;
  images.reserve(pairs.size());
  for (const auto& p : pairs) images.push_back(p.image);
  return mean_js_divergence(rgb_histogram(images, train.bins), train);
}

double score_checkpoint(CheckpointRecord& record, const PairedGeneratorConfig& config, const RGBHistogram& train,
                        int n_samples, const SamplerOptions& options, std::uint64_t seed) {
  PairedGenerator<float> model(config, 0);
  model.params().load(record.weights_uri / "weights.bin");
  const double score = score_generator(model, make_linear_schedule(config.timesteps), train, n_samples, options, seed);
  record.mean_jsd = score;
  write_checkpoint_manifest(record);
  return score;
}

SelectionStrategy parse_selection_strategy(const std::string& text) {
  if (text == "best_val_loss") return SelectionStrategy::kBestValLoss;
  if (text == "final_epoch") return SelectionStrategy::kFinalEpoch;
  if (text == "min_mean_jsd") return SelectionStrategy::kMinMeanJsd;
  throw std::invalid_argument("unknown selection strategy '" + text +
                              "' (expected best_val_loss, final_epoch or min_mean_jsd)");
}

std::string to_string(SelectionStrategy s) {
  switch (s) {
    case SelectionStrategy::kBestValLoss: return "best_val_loss";
    case SelectionStrategy::kFinalEpoch: return "final_epoch";
    case SelectionStrategy::kMinMeanJsd: return "min_mean_jsd";
  }
  return "?";
}

const CheckpointRecord& select_weights(const std::vector<CheckpointRecord>& records, SelectionStrategy strategy) {
  if (records.empty()) throw std::invalid_argument("select_weights: no checkpoints");
  std::vector<const CheckpointRecord*> order;
  for (const auto& r : records) order.push_back(&r);
  std::stable_sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->epoch < b->epoch; });
  const CheckpointRecord* best = order.front();
  switch (strategy) {
    case SelectionStrategy::kFinalEpoch:
      return *order.back();
    case SelectionStrategy::kBestValLoss:
      for (auto* r : order)
        if (r->val_loss < best->val_loss) best = r;
      return *best;
    case SelectionStrategy::kMinMeanJsd:
      for (auto* r : order)
        if (!r->mean_jsd)
          throw std::invalid_argument("select_weights: checkpoint at epoch " + std::to_string(r->epoch) +
                                      " has no mean_jsd score");
      for (auto* r : order)
        if (*r->mean_jsd < *best->mean_jsd) best = r;
      return *best;
  }
  return *best;
}

}  // namespace pairdiff
