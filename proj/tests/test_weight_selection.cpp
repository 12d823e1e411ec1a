#include "pairdiff/weight_selection.hpp"

#include "support.hpp"

#include <algorithm>
#include <numeric>

using namespace pairdiff;

namespace {

// Straight textbook form: KL(p || m) + KL(q || m), halved.
double reference_jsd(const std::vector<double>& p, const std::vector<double>& q) {
  double kl_p = 0, kl_q = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = (p[i] + q[i]) / 2;
    if (p[i] > 0) kl_p += p[i] * std::log(p[i] / m);
    if (q[i] > 0) kl_q += q[i] * std::log(q[i] / m);
  }
  return (kl_p + kl_q) / 2;
}

std::vector<double> random_distribution(int n, Rng& rng) {
  std::vector<double> p(static_cast<std::size_t>(n));
  for (auto& v : p) v = uniform_real(rng) < 0.2 ? 0.0 : uniform_real(rng);
  p[0] += 1e-3;
  const double s = std::accumulate(p.begin(), p.end(), 0.0);
  for (auto& v : p) v /= s;
  return p;
}

CheckpointRecord record(int epoch, double val, std::optional<double> jsd = std::nullopt) {
  CheckpointRecord r;
  r.epoch = epoch;
  r.val_loss = val;
  r.mean_jsd = jsd;
  return r;
}

}  // namespace

TEST_CASE("histogram bin edges") {
  Image img(Shape{1, 1, 4, 3});
  img.mat().col(0) << 0.0f, 0.5f, 0.99f, 1.0f;
  img.mat().col(1).setConstant(0.25f);
  img.mat().col(2) << -0.3f, 1.7f, 0.49f, 0.5f;
  const auto h = rgb_histogram({img}, 4);
  CHECK(h.bins == 4);
  CHECK(h.per_channel[0] == std::vector<double>{0.25, 0, 0.25, 0.5});
  CHECK(h.per_channel[1] == std::vector<double>{0, 1, 0, 0});
  // Out-of-range values are clamped into the end bins.
  CHECK(h.per_channel[2] == std::vector<double>{0.25, 0.25, 0.25, 0.25});
  for (const auto& c : rgb_histogram({img, Image(Shape{1, 3, 3, 3}, 0.7f)}, 256).per_channel)
    CHECK(std::accumulate(c.begin(), c.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS(rgb_histogram({}, 4));
  CHECK_THROWS(rgb_histogram({Image(Shape{1, 2, 2, 1})}, 4));
  CHECK_THROWS(rgb_histogram({img}, 1));
}

TEST_CASE("Jensen-Shannon examples") {
  CHECK(js_divergence({1, 0}, {0, 1}) == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(js_divergence({0.5, 0.5}, {0.5, 0.5}) == 0.0);
  // p = (1, 0), q = (1/2, 1/2): m = (3/4, 1/4).
  const double expected = 0.5 * std::log(4.0 / 3.0) + 0.25 * (std::log(2.0 / 3.0) + std::log(2.0));
  CHECK(js_divergence({1, 0}, {0.5, 0.5}) == doctest::Approx(expected).epsilon(1e-14));
  CHECK_THROWS(js_divergence({1}, {0.5, 0.5}));
  CHECK_THROWS(js_divergence({1.5, -0.5}, {0.5, 0.5}));
}

TEST_CASE("Jensen-Shannon properties on random distributions") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + int(uniform_real(rng) * 60);
    const auto p = random_distribution(n, rng), q = random_distribution(n, rng);
    const double d = js_divergence(p, q);
    CHECK(d >= 0.0);
    CHECK(d <= std::log(2.0) + 1e-12);
    CHECK(d == doctest::Approx(reference_jsd(p, q)).epsilon(1e-10));
    CHECK(d == doctest::Approx(js_divergence(q, p)).epsilon(1e-12));
    CHECK(js_divergence(p, p) < 1e-15);
    // Relabelling bins consistently leaves the divergence unchanged.
    std::vector<std::size_t> perm(p.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> pp(p.size()), qq(q.size());
    for (std::size_t i = 0; i < perm.size(); ++i) {
      pp[i] = p[perm[i]];
      qq[i] = q[perm[i]];
    }
    CHECK(js_divergence(pp, qq) == doctest::Approx(d).epsilon(1e-10));
  }
}

TEST_CASE("mean divergence averages channels") {
  RGBHistogram a, b;
  a.bins = b.bins = 2;
  a.per_channel = {std::vector<double>{1, 0}, {1, 0}, {0.5, 0.5}};
  b.per_channel = {std::vector<double>{0, 1}, {1, 0}, {0.5, 0.5}};
  CHECK(mean_js_divergence(a, b) == doctest::Approx(std::log(2.0) / 3).epsilon(1e-14));
  b.bins = 3;
  CHECK_THROWS(mean_js_divergence(a, b));
}

TEST_CASE("histogram of an image set matches itself and separates shifted sets") {
  const auto data = make_toy_dataset(40, 16, 3);
  std::vector<Image> images, shifted;
  for (const auto& p : data) {
    images.push_back(p.image);
    Image s = p.image;
    s.array() = (s.array() + 0.3f).min(1.0f);
    shifted.push_back(s);
  }
  const auto h = rgb_histogram(images);
  CHECK(mean_js_divergence(h, h) == 0.0);
  CHECK(mean_js_divergence(h, rgb_histogram(shifted)) > 0.3);
}

TEST_CASE("generator scoring is deterministic and reaches the manifest") {
  testing::TempDir dir("score");
  PairedGeneratorConfig config;
  config.variant = Variant::kConcat;
  config.input_size = 8;
  config.depth = 2;
  config.base_channels = 8;
  config.blocks_per_level = 1;
  config.attention_heads = 2;
  config.timesteps = 20;
  PairedGenerator<float> model(config, 4);
  const auto ckpt = dir.path() / "ckpt_3";
  std::filesystem::create_directories(ckpt);
  model.params().save(ckpt / "weights.bin");
  CheckpointRecord rec = record(3, 0.5);
  rec.weights_uri = ckpt;
  write_checkpoint_manifest(rec);

  std::vector<Image> images;
  for (const auto& p : make_toy_dataset(8, 32, 5)) images.push_back(resize_bilinear(p.image, 8, 8));
  const auto train = rgb_histogram(images, 32);
  const SamplerOptions so{SamplerMode::kDdim, 5, PosteriorVariance::kBeta, true};
  const double a = score_checkpoint(rec, config, train, 6, so, 9);
  const double b = score_generator(model, make_linear_schedule(20), train, 6, so, 9);
  CHECK(a == b);
  CHECK(a >= 0.0);
  CHECK(a <= std::log(2.0));
  REQUIRE(read_checkpoint(ckpt).mean_jsd.has_value());
  CHECK(*read_checkpoint(ckpt).mean_jsd == doctest::Approx(a).epsilon(1e-12));
}

TEST_CASE("weight selection strategies") {
  const std::vector<CheckpointRecord> records{record(30, 0.2, 0.05), record(10, 0.3, 0.04), record(20, 0.2, 0.04),
                                              record(40, 0.25, 0.09)};
  CHECK(select_weights(records, SelectionStrategy::kFinalEpoch).epoch == 40);
  // Ties go to the earliest epoch regardless of list order.
  CHECK(select_weights(records, SelectionStrategy::kBestValLoss).epoch == 20);
  CHECK(select_weights(records, SelectionStrategy::kMinMeanJsd).epoch == 10);

  auto missing = records;
  missing[3].mean_jsd.reset();
  CHECK_THROWS(select_weights(missing, SelectionStrategy::kMinMeanJsd));
  CHECK(select_weights(missing, SelectionStrategy::kBestValLoss).epoch == 20);
  CHECK_THROWS(select_weights({}, SelectionStrategy::kFinalEpoch));
}

TEST_CASE("selection is invariant to monotone rescaling of scores") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<CheckpointRecord> a, b;
    for (int e = 1; e <= 12; ++e) {
      const double v = std::floor(uniform_real(rng) * 6) / 10, j = std::floor(uniform_real(rng) * 6) / 100;
      a.push_back(record(e * 5, v, j));
      b.push_back(record(e * 5, std::exp(3 * v) + 1, 7 * j * j + j));
    }
    std::shuffle(b.begin(), b.end(), rng);
    for (auto s : {SelectionStrategy::kBestValLoss, SelectionStrategy::kMinMeanJsd, SelectionStrategy::kFinalEpoch})
      CHECK(select_weights(a, s).epoch == select_weights(b, s).epoch);
  }
}

TEST_CASE("strategy names") {
  for (auto s : {SelectionStrategy::kBestValLoss, SelectionStrategy::kMinMeanJsd, SelectionStrategy::kFinalEpoch})
    CHECK(parse_selection_strategy(to_string(s)) == s);
  CHECK_THROWS(parse_selection_strategy("lowest_fid"));
}
