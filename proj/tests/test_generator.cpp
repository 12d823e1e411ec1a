#include "pairdiff/generator.hpp"

#include "support.hpp"

#include <set>

using namespace pairdiff;
using testing::check_gradients;
using testing::leaf;

namespace {

PairedGeneratorConfig small(Variant v, SkipFusion f, int size = 8, int depth = 2) {
  PairedGeneratorConfig c;
  c.variant = v;
  c.skip_fusion = f;
  c.base_channels = 8;
  c.depth = depth;
  c.blocks_per_level = 1;
  c.attention_heads = 2;
  c.input_size = size;
  return c;
}

const Variant kVariants[] = {Variant::kConcat, Variant::kTwoEncoder, Variant::kSharedEncoder};
const SkipFusion kFusions[] = {SkipFusion::kDirect, SkipFusion::kZeroConv, SkipFusion::kScaleU};

template <typename S>
std::pair<Var<S>, Var<S>> inputs(int n, int size, std::uint64_t seed) {
  Rng rng(seed);
  return {Var<S>(randn<S>(Shape{n, size, size, 3}, rng)), Var<S>(randn<S>(Shape{n, size, size, 1}, rng))};
}

double max_diff(const Var<float>& a, const Var<float>& b) {
  return double((a.value().vec() - b.value().vec()).cwiseAbs().maxCoeff());
}

}  // namespace

TEST_CASE("variant and fusion names round-trip") {
  for (auto v : kVariants) CHECK(parse_variant(to_string(v)) == v);
  for (auto f : kFusions) CHECK(parse_skip_fusion(to_string(f)) == f);
  CHECK(parse_variant("TwoEncoder") == Variant::kTwoEncoder);
  CHECK_THROWS(parse_variant("three_encoder"));
  CHECK_THROWS(parse_skip_fusion("sum"));
}

TEST_CASE("config validation") {
  auto c = small(Variant::kConcat, SkipFusion::kDirect);
  CHECK_NOTHROW(c.validate());
  c.input_size = 10;
  CHECK_THROWS(c.validate());
  c = small(Variant::kConcat, SkipFusion::kDirect);
  c.attention_heads = 3;
  CHECK_THROWS(c.validate());
  c = small(Variant::kConcat, SkipFusion::kDirect);
  c.mask_channels = 2;
  CHECK_THROWS(c.validate());
  c = small(Variant::kConcat, SkipFusion::kDirect);
  c.depth = 0;
  CHECK_THROWS(c.validate());
  CHECK_THROWS(PairedGenerator<float>(small(Variant::kTwoEncoder, SkipFusion::kDirect, 10), 0));
}

TEST_CASE("shape contract across variants, fusions, depths and sizes") {
  for (auto v : kVariants)
    for (auto f : kFusions)
      for (int depth : {2, 3})
        for (int size : {16, 32, 64}) {
          CAPTURE(to_string(v));
          CAPTURE(to_string(f));
          CAPTURE(depth);
          CAPTURE(size);
          auto cfg = small(v, f, size, depth);
          cfg.base_channels = 4;
          PairedGenerator<float> gen(cfg, 1);
          auto [x, y] = inputs<float>(2, size, 2);
          const std::vector<int> t{1, 1000};
          NoGradGuard guard;
          auto [ex, ey] = gen.predict_noise(x, y, t);
          CHECK(ex.shape() == Shape{2, size, size, 3});
          CHECK(ey.shape() == Shape{2, size, size, 1});
        }
}

TEST_CASE("input validation in predict_noise") {
  PairedGenerator<float> gen(small(Variant::kTwoEncoder, SkipFusion::kScaleU), 1);
  auto [x, y] = inputs<float>(2, 8, 3);
  const std::vector<int> t{5, 6};
  const std::vector<int> one{5};
  auto [_, y_small] = inputs<float>(2, 4, 3);
  CHECK_THROWS_AS(gen.predict_noise(x, y_small, t), ShapeError);
  CHECK_THROWS_AS(gen.predict_noise(x, y, one), ShapeError);
  const std::vector<int> late{5, 1001};
  CHECK_THROWS(gen.predict_noise(x, y, late));
  const std::vector<int> early{0, 5};
  CHECK_THROWS(gen.predict_noise(x, y, early));
}

TEST_CASE("concat network maps C+1 channels to C+1 channels") {
  PairedGenerator<float> gen(small(Variant::kConcat, SkipFusion::kDirect), 1);
  CHECK(gen.params().find("unet.enc.stem.weight").shape().w == 4);
  CHECK(gen.params().find("unet.dec.out.weight").shape().c == 4);
}

TEST_CASE("parameter census") {
  auto census = [](Variant v) {
    auto cfg = small(v, SkipFusion::kDirect, 16);
    cfg.base_channels = 16;
    return PairedGenerator<float>(cfg, 0).params();
  };
  const auto concat = census(Variant::kConcat);
  const auto two = census(Variant::kTwoEncoder);
  std::set<std::string> gx, gy;
  for (const auto& [name, var] : two.entries()) {
    if (name.rfind("gx.", 0) == 0) gx.insert(name.substr(3));
    if (name.rfind("gy.", 0) == 0) gy.insert(name.substr(3));
  }
  CHECK_FALSE(gx.empty());
  // Same layout mirrored under disjoint prefixes.
  CHECK(gx == gy);
  const double ratio = double(two.scalar_count()) / double(concat.scalar_count());
  MESSAGE("two_encoder / concat parameter ratio = " << ratio);
  CHECK(ratio > 1.8);
  CHECK(ratio < 2.4);
}

TEST_CASE("initialization is a function of the seed") {
  for (auto v : kVariants) {
    PairedGenerator<float> a(small(v, SkipFusion::kScaleU), 7), b(small(v, SkipFusion::kScaleU), 7),
        c(small(v, SkipFusion::kScaleU), 8);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.params().size(); ++i) {
      const auto& [name, va] = a.params().entries()[i];
      CHECK(b.params().entries()[i].first == name);
      CHECK(va.value().vec() == b.params().entries()[i].second.value().vec());
      any_diff = any_diff || va.value().vec() != c.params().entries()[i].second.value().vec();
    }
    CHECK(any_diff);
    auto [x, y] = inputs<float>(2, 8, 4);
    const std::vector<int> t{3, 700};
    CHECK(max_diff(a.predict_noise(x, y, t).first, b.predict_noise(x, y, t).first) == 0.0);
  }
}

TEST_CASE("batch elements do not interact") {
  for (auto v : kVariants) {
    PairedGenerator<float> gen(small(v, SkipFusion::kScaleU), 3);
    auto [x, y] = inputs<float>(2, 8, 5);
    const std::vector<int> t{10, 900};
    const auto both = gen.predict_stacked(ops::concat_channels<float>({x, y}), t).value();
    const std::vector<int> t0{10};
    const auto single =
        gen.predict_stacked(Var<float>(Tensor<float>::concat_channels({x.value(), y.value()}).batch(0, 1)), t0).value();
    CHECK((both.batch(0, 1).vec() - single.vec()).cwiseAbs().maxCoeff() < 1e-5f);
  }
}

TEST_CASE("stacked prediction equals the split prediction") {
  for (auto v : kVariants) {
    PairedGenerator<float> gen(small(v, SkipFusion::kDirect), 3);
    auto [x, y] = inputs<float>(2, 8, 6);
    const std::vector<int> t{1, 2};
    auto [ex, ey] = gen.predict_noise(x, y, t);
    auto stacked = gen.predict_stacked(ops::concat_channels<float>({x, y}), t);
    CHECK((stacked.value().channels(0, 3).vec() - ex.value().vec()).cwiseAbs().maxCoeff() == 0.0f);
    CHECK((stacked.value().channels(3, 1).vec() - ey.value().vec()).cwiseAbs().maxCoeff() == 0.0f);
  }
}

TEST_CASE("fuse_skip modes") {
  ParamStore<double> ps(1);
  auto backbone = leaf(Shape{2, 4, 4, 8}, 1);
  std::vector<Var<double>> skips{leaf(Shape{2, 4, 4, 8}, 2), leaf(Shape{2, 4, 4, 8}, 3)};
  const auto direct = FuseParams<double>::make(ps, "d", SkipFusion::kDirect, 8, {8, 8});
  const auto zero = FuseParams<double>::make(ps, "z", SkipFusion::kZeroConv, 8, {8, 8});
  auto scale = FuseParams<double>::make(ps, "s", SkipFusion::kScaleU, 8, {8, 8});

  const auto d = fuse_skip<double>(backbone, skips, SkipFusion::kDirect, direct);
  CHECK(d.shape() == Shape{2, 4, 4, 24});
  CHECK(d.value().channels(0, 8).vec() == backbone.value().vec());
  CHECK(d.value().channels(16, 8).vec() == skips[1].value().vec());

  const auto z = fuse_skip<double>(backbone, skips, SkipFusion::kZeroConv, zero);
  CHECK(z.shape() == Shape{2, 4, 4, 24});
  CHECK(z.value().channels(0, 8).vec() == backbone.value().vec());
  CHECK(z.value().channels(8, 16).vec().cwiseAbs().maxCoeff() == 0.0);

  const auto s = fuse_skip<double>(backbone, skips, SkipFusion::kScaleU, scale);
  CHECK(s.value().vec() == d.value().vec());

  // Non-zero scales multiply by (1 + s).
  scale.backbone_scale.value().vec().setConstant(0.5);
  scale.skip_scales[0].value().vec().setConstant(-1.0);
  const auto s2 = fuse_skip<double>(backbone, skips, SkipFusion::kScaleU, scale).value();
  CHECK((s2.channels(0, 8).vec() - 1.5 * backbone.value().vec()).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(s2.channels(8, 8).vec().cwiseAbs().maxCoeff() == 0.0);
  CHECK(s2.channels(16, 8).vec() == skips[1].value().vec());

  std::vector<Var<double>> bad{leaf(Shape{2, 2, 2, 8}, 4), leaf(Shape{2, 4, 4, 8}, 5)};
  CHECK_THROWS_AS(fuse_skip<double>(backbone, bad, SkipFusion::kDirect, direct), ShapeError);
}

TEST_CASE("fusion parameter gradients") {
  ParamStore<double> ps(2);
  auto backbone = leaf(Shape{1, 3, 3, 4}, 6);
  std::vector<Var<double>> skips{leaf(Shape{1, 3, 3, 4}, 7)};
  auto w = leaf(Shape{1, 3, 3, 8}, 8).detach();
  for (auto mode : {SkipFusion::kZeroConv, SkipFusion::kScaleU}) {
    const auto fp = FuseParams<double>::make(ps, to_string(mode), mode, 4, {4});
    std::vector<Var<double>> vars{backbone, skips[0]};
    if (mode == SkipFusion::kZeroConv) {
      vars.push_back(fp.zero_convs[0].weight);
      vars.push_back(fp.zero_convs[0].bias);
    } else {
      vars.push_back(fp.backbone_scale);
      vars.push_back(fp.skip_scales[0]);
    }
    check_gradients(vars, [&] { return ops::sum(ops::mul(fuse_skip<double>(backbone, skips, mode, fp), w)); });
  }
}

TEST_CASE("zero-conv links are inert at initialization and live after one step") {
  for (auto v : {Variant::kTwoEncoder, Variant::kSharedEncoder}) {
    CAPTURE(to_string(v));
    PairedGenerator<float> gen(small(v, SkipFusion::kZeroConv), 11);
    auto [x, y] = inputs<float>(2, 8, 9);
    const std::vector<int> t{20, 600};
    GeneratorForwardOptions sever{true};
    {
      NoGradGuard guard;
      auto linked = gen.predict_noise(x, y, t);
      auto severed = gen.predict_noise(x, y, t, sever);
      CHECK(max_diff(linked.first, severed.first) == 0.0);
      CHECK(max_diff(linked.second, severed.second) == 0.0);
    }
    Adam<float> opt(gen.params(), {.lr = 1e-2});
    auto [tx, ty] = inputs<float>(2, 8, 10);
    auto [ex, ey] = gen.predict_noise(x, y, t);
    ops::add(ops::mse(ex, tx), ops::mse(ey, ty)).backward();
    opt.step();
    NoGradGuard guard;
    auto linked = gen.predict_noise(x, y, t);
    auto severed = gen.predict_noise(x, y, t, sever);
    CHECK(max_diff(linked.first, severed.first) + max_diff(linked.second, severed.second) > 1e-6);
  }
}

TEST_CASE("scale-u starts as the direct network") {
  for (auto v : kVariants) {
    CAPTURE(to_string(v));
    PairedGenerator<float> direct(small(v, SkipFusion::kDirect), 13), scaled(small(v, SkipFusion::kScaleU), 13);
    auto [x, y] = inputs<float>(2, 8, 12);
    const std::vector<int> t{5, 999};
    auto [dx, dy] = direct.predict_noise(x, y, t);
    auto [sx, sy] = scaled.predict_noise(x, y, t);
    CHECK(max_diff(dx, sx) == 0.0);
    CHECK(max_diff(dy, sy) == 0.0);
  }
}

TEST_CASE("generator gradients per submodule") {
  // Attention, fusion, and time-embedding parameters in 64-bit precision.
  struct Case {
    Variant variant;
    SkipFusion fusion;
    std::vector<std::string> prefixes;
  };
  const std::vector<Case> cases{
      {Variant::kConcat, SkipFusion::kDirect, {"unet.mid.attn.", "unet.time.", "unet.enc.stem."}},
      {Variant::kTwoEncoder, SkipFusion::kScaleU, {"pair_attn.self.", "pair_attn.cross.", "gx.fuse_", "gy.time."}},
      {Variant::kTwoEncoder, SkipFusion::kZeroConv, {"gx.fuse_up", "gy.fuse_down", "pair_attn.cross."}},
      {Variant::kSharedEncoder, SkipFusion::kScaleU,
       {"shared.pair_attn.", "dx.fuse_up", "shared.time.", "shared.mask_lift."}},
  };
  for (const auto& c : cases) {
    CAPTURE(to_string(c.variant));
    CAPTURE(to_string(c.fusion));
    PairedGenerator<double> gen(small(c.variant, c.fusion), 17);
    // Move zero-initialized parameters off zero so every path is exercised.
    Rng jitter(3);
    for (const auto& [name, var] : gen.params().entries()) {
      if (var.value().vec().cwiseAbs().maxCoeff() == 0.0) {
        Var<double> handle = var;
        handle.value().vec() = 0.05 * randn<double>(var.shape(), jitter).vec();
      }
    }
    auto [x, y] = inputs<double>(2, 8, 14);
    const std::vector<int> t{7, 640};
    auto loss = [&] {
      auto [ex, ey] = gen.predict_noise(x, y, t);
      return ops::add(ops::mean(ops::mul(ex, ex)), ops::mean(ops::mul(ey, ey)));
    };
    for (const auto& prefix : c.prefixes) {
      CAPTURE(prefix);
      std::vector<Var<double>> vars;
      for (const auto& [name, var] : gen.params().entries())
        if (name.rfind(prefix, 0) == 0) vars.push_back(var);
      REQUIRE_FALSE(vars.empty());
      // At least ten sampled scalars per submodule.
      const int per = std::max(2, int((10 + vars.size() - 1) / vars.size()));
      check_gradients(vars, loss, {.samples_per_input = per, .seed = 5});
    }
  }
}
