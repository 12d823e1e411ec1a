#include "pairdiff/segmentation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace pairdiff {

void SegConfig::validate() const {
  if (encoder_widths.empty()) throw std::invalid_argument("seg config: encoder_widths must not be empty");
  for (int w : encoder_widths)
    if (w <= 0) throw std::invalid_argument("seg config: encoder widths must be positive");
  if (!(lr > 0)) throw std::invalid_argument("seg config: lr must be positive");
  if (epochs < 0) throw std::invalid_argument("seg config: epochs must be non-negative");
  if (batch_size <= 0) throw std::invalid_argument("seg config: batch_size must be positive");
}

namespace {

struct Counts {
  double inter = 0, pred = 0, gt = 0;
};

Counts count(const Image& pred, const Image& gt) {
  if (!(pred.shape() == gt.shape()))
    throw ShapeError("mask shapes differ: " + pred.shape().str() + " vs " + gt.shape().str());
  Counts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred.data()[i] >= 0.5f;
    const bool g = gt.data()[i] >= 0.5f;
    c.inter += double(p && g);
    c.pred += double(p);
    c.gt += double(g);
  }
  return c;
}

double dice_from(const Counts& c) { return c.pred + c.gt == 0 ? 1.0 : 2.0 * c.inter / (c.pred + c.gt); }
double iou_from(const Counts& c) {
  const double uni = c.pred + c.gt - c.inter;
  return uni == 0 ? 1.0 : c.inter / uni;
}

Tensor<float> stack_images(const std::vector<ImageMaskPair>& pairs, std::size_t begin, std::size_t end, bool masks) {
  std::vector<Tensor<float>> items;
  for (std::size_t i = begin; i < end; ++i) items.push_back(masks ? pairs[i].mask : pairs[i].image);
  return Tensor<float>::stack(items);
}

void run_sgd(SegModel<float>& model, const std::vector<ImageMaskPair>& pairs, const SegConfig& config,
             std::uint64_t seed) {
  if (config.epochs == 0) return;
  if (pairs.empty()) throw std::invalid_argument("segmentation training: empty dataset");
  Sgd<float> opt(model.params(), config.lr, config.momentum);
  Rng rng(seed);
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<ImageMaskPair> shuffled(pairs.size());
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < order.size(); ++i) shuffled[i] = pairs[order[i]];
    for (std::size_t b = 0; b < shuffled.size(); b += std::size_t(config.batch_size)) {
      const std::size_t e = std::min(shuffled.size(), b + std::size_t(config.batch_size));
      Var<float> images(stack_images(shuffled, b, e, false));
      const Tensor<float> target = stack_images(shuffled, b, e, true);
      model.params().zero_grad();
      auto loss = segmentation_loss(model(images), target, config);
      if (!std::isfinite(loss.value().item()))
        throw std::runtime_error("segmentation training: non-finite loss at epoch " + std::to_string(epoch));
      loss.backward();
      opt.step();
    }
  }
}

}  // namespace

double dice_score(const Image& pred, const Image& gt) { return dice_from(count(pred, gt)); }
double iou_score(const Image& pred, const Image& gt) { return iou_from(count(pred, gt)); }

SegMetrics evaluate_predictions(const std::vector<Image>& probs, const std::vector<Image>& gts, double threshold) {
  if (probs.empty()) throw std::invalid_argument("evaluate: empty test set");
  if (probs.size() != gts.size()) throw std::invalid_argument("evaluate: prediction/ground-truth count mismatch");
  SegMetrics m;
  Counts total;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const Image pred = binarize(probs[i], float(threshold));
    const Counts c = count(pred, gts[i]);
    total.inter += c.inter;
    total.pred += c.pred;
    total.gt += c.gt;
    m.per_image.push_back({dice_from(c), iou_from(c)});
    m.mean_dice += m.per_image.back().dice;
    m.mean_iou += m.per_image.back().iou;
  }
  m.mean_dice /= double(probs.size());
  m.mean_iou /= double(probs.size());
  m.dice = dice_from(total);
  m.iou = iou_from(total);
  return m;
}

template <typename S>
SegModel<S>::SegModel(const SegConfig& config, std::uint64_t seed) : config_(config), seed_(seed), params_(seed) {
  config_.validate();
  const auto& widths = config_.encoder_widths;
  int cin = config_.image_channels;
  for (std::size_t s = 0; s < widths.size(); ++s) {
    const std::string name = "seg.enc" + std::to_string(s);
    encoder_.push_back(Stage{nn::Conv2d<S>::make(params_, name + ".conv1", cin, widths[s], 3, s == 0 ? 1 : 2),
                             nn::GroupNorm<S>::make(params_, name + ".norm1", widths[s]),
                             nn::Conv2d<S>::make(params_, name + ".conv2", widths[s], widths[s], 3),
                             nn::GroupNorm<S>::make(params_, name + ".norm2", widths[s])});
    cin = widths[s];
  }
  for (int s = int(widths.size()) - 2; s >= 0; --s) {
    const std::string name = "seg.dec" + std::to_string(s);
    decoder_.push_back(UpStage{nn::Conv2d<S>::make(params_, name + ".up", widths[s + 1], widths[s], 3),
                               nn::Conv2d<S>::make(params_, name + ".merge", 2 * widths[s], widths[s], 3),
                               nn::GroupNorm<S>::make(params_, name + ".norm", widths[s])});
  }
  head_ = nn::Conv2d<S>::make(params_, "seg.head", widths.front(), 1, 1);
}

template <typename S>
Var<S> SegModel<S>::operator()(const Var<S>& images) const {
  const int factor = 1 << (config_.encoder_widths.size() - 1);
  if (images.shape().h % factor != 0 || images.shape().w % factor != 0)
    throw ShapeError("segmenter: input " + images.shape().str() + " not divisible by " + std::to_string(factor));
  if (images.shape().c != config_.image_channels) throw ShapeError("segmenter: wrong channel count");
  std::vector<Var<S>> features;
  Var<S> h = images;
  for (const auto& st : encoder_) {
    h = ops::relu(st.norm1(st.conv1(h)));
    h = ops::relu(st.norm2(st.conv2(h)));
    features.push_back(h);
  }
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    const auto& st = decoder_[i];
    const std::size_t s = features.size() - 2 - i;
    auto up = st.up(ops::upsample_nearest2x(h));
    h = ops::relu(st.norm(st.merge(ops::concat_channels<S>({up, features[s]}))));
  }
  return head_(h);
}

template <typename S>
Tensor<S> SegModel<S>::predict(const Tensor<S>& images) const {
  NoGradGuard guard;
  return ops::sigmoid((*this)(Var<S>(images))).value();
}

template <typename S>
SegModel<S> SegModel<S>::clone() const {
  SegModel copy(config_, seed_);
  for (std::size_t i = 0; i < params_.entries().size(); ++i)
    copy.params_.entries()[i].second.node()->value = params_.entries()[i].second.value();
  return copy;
}

template <typename S>
Var<S> segmentation_loss(const Var<S>& logits, const Tensor<S>& target, const SegConfig& config) {
  auto dice = ops::dice_loss(ops::sigmoid(logits), target);
  auto bce = ops::bce_with_logits(logits, target);
  return ops::add(ops::scale(dice, S(config.dice_weight)), ops::scale(bce, S(config.bce_weight)));
}

SegModel<float> train_segmenter(const std::vector<ImageMaskPair>& train, const SegConfig& config, std::uint64_t seed) {
  if (train.empty()) throw std::invalid_argument("train_segmenter: empty dataset");
  SegModel<float> model(config, seed);
  run_sgd(model, train, config, derive_seed(seed, 1));
  return model;
}

SegModel<float> finetune(const SegModel<float>& model, const std::vector<ImageMaskPair>& pairs,
                         const SegConfig& config, std::uint64_t seed) {
  SegModel<float> tuned = model.clone();
  run_sgd(tuned, pairs, config, derive_seed(seed, 2));
  return tuned;
}

SegMetrics evaluate(const SegModel<float>& model, const std::vector<ImageMaskPair>& test, double threshold) {
  if (test.empty()) throw std::invalid_argument("evaluate: empty test set");
  std::vector<Image> probs, gts;
  constexpr std::size_t kChunk = 64;
  for (std::size_t b = 0; b < test.size(); b += kChunk) {
    const std::size_t e = std::min(test.size(), b + kChunk);
    const Tensor<float> p = model.predict(stack_images(test, b, e, false));
    for (std::size_t i = b; i < e; ++i) {
      probs.push_back(p.batch(int(i - b), 1));
      gts.push_back(test[i].mask);
    }
  }
  return evaluate_predictions(probs, gts, threshold);
}

template class SegModel<float>;
template class SegModel<double>;
template Var<float> segmentation_loss(const Var<float>&, const Tensor<float>&, const SegConfig&);
template Var<double> segmentation_loss(const Var<double>&, const Tensor<double>&, const SegConfig&);

}  // namespace pairdiff
