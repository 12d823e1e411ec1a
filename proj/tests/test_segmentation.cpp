#include "pairdiff/segmentation.hpp"

#include "support.hpp"

#include <algorithm>

using namespace pairdiff;
using testing::check_gradients;

namespace {

Image mask_of(int h, int w, std::vector<float> values) {
  Image m(Shape{1, h, w, 1});
  for (std::size_t i = 0; i < values.size(); ++i) m.vec()[Eigen::Index(i)] = values[i];
  return m;
}

Image random_mask(int h, int w, double p, Rng& rng) {
  Image m(Shape{1, h, w, 1});
  for (auto& v : m.vec()) v = uniform_real(rng) < p ? 1.0f : 0.0f;
  return m;
}

SegConfig small_config(int epochs) {
  SegConfig c;
  c.encoder_widths = {8, 16};
  c.epochs = epochs;
  c.batch_size = 8;
  c.lr = 2e-2;
  c.momentum = 0.9;
  return c;
}

std::vector<ImageMaskPair> toy(int n, std::uint64_t seed) {
  std::vector<ImageMaskPair> out;
  for (const auto& p : make_toy_dataset(n, 32, seed)) out.push_back(resize_pair(p, 16, 16));
  return out;
}

// Target domain: contrast inverted, so the foreground becomes the dark part.
std::vector<ImageMaskPair> inverted(std::vector<ImageMaskPair> pairs) {
  for (auto& p : pairs) p.image.array() = 1.0f - p.image.array();
  return pairs;
}

}  // namespace

TEST_CASE("dice and iou examples") {
  const auto pred = mask_of(1, 4, {1, 1, 0, 0});
  const auto gt = mask_of(1, 4, {1, 0, 1, 0});
  CHECK(dice_score(pred, gt) == 0.5);
  CHECK(iou_score(pred, gt) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  const auto empty = mask_of(1, 4, {0, 0, 0, 0});
  CHECK(dice_score(empty, empty) == 1.0);
  CHECK(iou_score(empty, empty) == 1.0);
  CHECK(dice_score(empty, gt) == 0.0);
  CHECK_THROWS(dice_score(pred, mask_of(2, 2, {1, 0, 1, 0})));
}

TEST_CASE("dice and iou identities on random masks") {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const auto a = random_mask(6, 7, uniform_real(rng), rng);
    const auto b = random_mask(6, 7, uniform_real(rng), rng);
    const double d = dice_score(a, b), j = iou_score(a, b);
    CHECK(d == doctest::Approx(dice_score(b, a)).epsilon(1e-15));
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
    // Dice and IoU are tied by d = 2j / (1 + j).
    CHECK(std::abs(d - 2 * j / (1 + j)) < 1e-9);
    CHECK(dice_score(a, a) == 1.0);
  }
}

TEST_CASE("aggregate metrics") {
  Rng rng(2);
  std::vector<Image> gts, perfect, half, inverse;
  double f_sum = 0;
  for (int i = 0; i < 10; ++i) {
    gts.push_back(random_mask(8, 8, 0.3, rng));
    gts.back().vec()[0] = 1.0f;
    perfect.push_back(gts.back());
    half.push_back(Image(Shape{1, 8, 8, 1}, 0.5f));
    Image inv = gts.back();
    inv.array() = 1.0f - inv.array();
    inverse.push_back(inv);
    f_sum += gts.back().vec().mean();
  }
  const auto m = evaluate_predictions(perfect, gts);
  CHECK(m.dice == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(m.mean_iou == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(m.per_image.size() == 10);
  // A constant 0.5 map predicts everything as foreground at the >= rule:
  // summed over the set, Dice = 2F / (1 + F) for foreground fraction F.
  const double f = f_sum / 10;
  CHECK(evaluate_predictions(half, gts).dice == doctest::Approx(2 * f / (1 + f)).epsilon(1e-9));
  CHECK(evaluate_predictions(inverse, gts).dice < 1e-9);
  CHECK_THROWS(evaluate_predictions({}, {}));
  CHECK_THROWS(evaluate_predictions(perfect, {gts[0]}));
}

TEST_CASE("predicted foreground shrinks as the threshold rises") {
  Rng rng(3);
  std::vector<Image> probs, gts;
  for (int i = 0; i < 6; ++i) {
    Image p(Shape{1, 8, 8, 1});
    for (auto& v : p.vec()) v = float(uniform_real(rng));
    probs.push_back(p);
    gts.push_back(random_mask(8, 8, 0.4, rng));
  }
  double prev_recall = 2;
  for (double th = 0.05; th < 1.0; th += 0.05) {
    double tp = 0, positives = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      const auto b = binarize(probs[i], float(th));
      tp += (b.array() * gts[i].array()).sum();
      positives += gts[i].array().sum();
    }
    const double recall = tp / positives;
    CHECK(recall <= prev_recall);
    prev_recall = recall;
  }
  // Permuting the test set leaves the aggregate unchanged.
  auto base = evaluate_predictions(probs, gts, 0.3);
  std::vector<std::size_t> idx{3, 1, 5, 0, 4, 2};
  std::vector<Image> p2, g2;
  for (auto i : idx) {
    p2.push_back(probs[i]);
    g2.push_back(gts[i]);
  }
  auto perm = evaluate_predictions(p2, g2, 0.3);
  CHECK(perm.dice == doctest::Approx(base.dice).epsilon(1e-12));
  CHECK(perm.mean_dice == doctest::Approx(base.mean_dice).epsilon(1e-12));
}

TEST_CASE("segmenter shape and gradients") {
  SegConfig c = small_config(0);
  SegModel<double> model(c, 1);
  Rng rng(4);
  Var<double> x(randn<double>(Shape{2, 8, 8, 3}, rng), true);
  CHECK(model(x).shape() == Shape{2, 8, 8, 1});
  CHECK_THROWS(model(Var<double>(Tensor<double>(Shape{1, 7, 8, 3}))));
  CHECK_THROWS(model(Var<double>(Tensor<double>(Shape{1, 8, 8, 1}))));
  Tensor<double> target(Shape{2, 8, 8, 1});
  for (auto& v : target.vec()) v = uniform_real(rng) < 0.3 ? 1.0 : 0.0;
  std::vector<Var<double>> vars{x};
  for (const auto& [name, var] : model.params().entries()) vars.push_back(var);
  check_gradients(vars, [&] { return segmentation_loss(model(x), target, c); }, {.samples_per_input = 3});
}

TEST_CASE("segmentation loss weights") {
  Rng rng(5);
  Var<double> logits(randn<double>(Shape{1, 4, 4, 1}, rng));
  Tensor<double> target(Shape{1, 4, 4, 1});
  for (auto& v : target.vec()) v = uniform_real(rng) < 0.5 ? 1.0 : 0.0;
  SegConfig c;
  const double dice = ops::dice_loss(ops::sigmoid(logits), target).value().item();
  const double bce = ops::bce_with_logits(logits, target).value().item();
  c.dice_weight = 0.3;
  c.bce_weight = 2.0;
  CHECK(segmentation_loss(logits, target, c).value().item() == doctest::Approx(0.3 * dice + 2.0 * bce).epsilon(1e-12));
}

TEST_CASE("training is reproducible and zero-epoch fine-tuning is the identity") {
  const auto data = toy(16, 1);
  const auto a = train_segmenter(data, small_config(1), 7);
  const auto b = train_segmenter(data, small_config(1), 7);
  for (std::size_t i = 0; i < a.params().entries().size(); ++i)
    CHECK(a.params().entries()[i].second.value().vec() == b.params().entries()[i].second.value().vec());
  const auto same = finetune(a, data, small_config(0), 3);
  for (std::size_t i = 0; i < a.params().entries().size(); ++i)
    CHECK(same.params().entries()[i].second.value().vec() == a.params().entries()[i].second.value().vec());
  CHECK(evaluate(same, data).dice == evaluate(a, data).dice);
  CHECK_THROWS(train_segmenter({}, small_config(1), 7));
}

TEST_CASE("fine-tuning adapts to a shifted domain") {
  const auto source = toy(96, 2);
  const auto target_train = inverted(toy(48, 3));
  const auto target_test = inverted(toy(48, 4));
  const auto base = train_segmenter(source, small_config(25), 1);
  CHECK(evaluate(base, toy(48, 4)).dice > 0.7);
  const double before = evaluate(base, target_test).dice;
  const auto tuned = finetune(base, target_train, small_config(40), 1);
  const double after = evaluate(tuned, target_test).dice;
  MESSAGE("target dice before " << before << " after " << after);
  CHECK(after > before + 0.2);
  CHECK(after > 0.7);
}

TEST_CASE("all-background masks stay finite") {
  auto data = toy(8, 5);
  for (auto& p : data) p.mask.vec().setZero();
  const auto model = train_segmenter(data, small_config(3), 2);
  const auto m = evaluate(model, data);
  CHECK(std::isfinite(m.dice));
  CHECK(m.dice >= 0.0);
  CHECK(m.dice <= 1.0);
}
