#include <gtest/gtest.h>

#include <cmath>

#include "generators.hpp"
#include "oracles.hpp"
#include "quantkit/fixtures.hpp"
#include "quantkit/qat.hpp"

using namespace quantkit;
using testing_support::random_tensor;
using testing_support::TempDir;

namespace {

QuantParams layer(double scale, int bits, Signedness s = Signedness::Signed) {
  return {{scale}, bits, s, Granularity::LayerWise};
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += static_cast<double>(a.f32()[i]) * b.f32()[i];
  return s;
}

struct QatSetup {
  DatasetSplit data;
  ModelGraph planned;
  CalibrationProfile profile;
};

const QatSetup& setup() {
  static const QatSetup s = [] {
    QatSetup r;
    r.data = make_toy_dataset(5, 4, 40, 8);
    ToyNetOptions o;
    o.image_size = 8;
    o.classes = 4;
    r.planned = plan_placement(toy_mobilenet(o));
    CalibConfig cfg;
    cfg.batches = 2;
    cfg.batch_size = 16;
    r.profile = calibrate(prepare_ptq(r.planned).graph, r.data.train, cfg);
    return r;
  }();
  return s;
}

QatConfig short_qat() {
  QatConfig c;
  c.epochs = 1;
  c.batch_size = 16;
  c.learning_rate = 1e-3;
  return c;
}

}  // namespace

TEST(FakeQuant, Examples) {
  const auto p = layer(0.5, 8);
  const Tensor x({4}, std::vector<float>{1.26f, 0.0f, 200.0f, -0.74f});
  const auto y = fake_quant_forward(x, p);
  EXPECT_FLOAT_EQ(y.f32()[0], 1.5f);
  EXPECT_FLOAT_EQ(y.f32()[1], 0.0f);
  EXPECT_FLOAT_EQ(y.f32()[2], 63.5f);
  EXPECT_FLOAT_EQ(y.f32()[3], -0.5f);
  EXPECT_EQ(fake_quant_forward(y, p), y);
}

TEST(FakeQuant, StraightThroughMask) {
  const auto p = layer(1.0, 8);
  const Tensor x({4}, std::vector<float>{127.0f, 127.6f, -127.0f, -300.0f});
  const Tensor g({4}, std::vector<float>{1, 2, 3, 4});
  const auto d = fake_quant_backward(g, x, p);
  EXPECT_EQ(d.f32()[0], 1.0f);
  EXPECT_EQ(d.f32()[1], 0.0f);
  EXPECT_EQ(d.f32()[2], 3.0f);
  EXPECT_EQ(d.f32()[3], 0.0f);
  const auto u = fake_quant_backward(g, Tensor({4}, std::vector<float>{-0.1f, 0.0f, 255.0f, 256.0f}), layer(1.0, 8, Signedness::Unsigned));
  EXPECT_EQ(u.f32()[0], 0.0f);
  EXPECT_EQ(u.f32()[1], 2.0f);
  EXPECT_EQ(u.f32()[2], 3.0f);
  EXPECT_EQ(u.f32()[3], 0.0f);
}

TEST(FoldUnfold, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 12; ++seed) {
    auto f = testing_support::random_conv_bn(seed);
    const auto& conv = f.graph.node("conv");
    const auto bn = bn_params(f.graph, f.graph.node("bn"));
    const Tensor* bias = conv.has_param("bias") ? &f.graph.param(conv, "bias") : nullptr;
    const ops::ConvGeometry geo{conv.stride, conv.padding, conv.groups};
    Rng rng(seed + 100);
    const auto ref = forward(f.graph, f.input).output;
    const auto dy = random_tensor(ref.shape(), rng);
    const auto r = fold_forward_unfold_backward(f.graph.param(conv, "weight"), bias, bn, geo, f.input, dy, std::nullopt);

    double scale = 0.0;
    for (float v : ref.f32()) scale = std::max(scale, static_cast<double>(std::fabs(v)));
    for (std::size_t i = 0; i < ref.numel(); ++i) EXPECT_NEAR(r.output.f32()[i], ref.f32()[i], 1e-4 * std::max(1.0, scale));

    const auto loss = [&](const ModelGraph& g) { return dot(forward(g, f.input).output, dy); };
    const auto check = [&](const std::string& name, const Tensor& grad) {
      double gmax = 0.0;
      for (float v : grad.f32()) gmax = std::max(gmax, static_cast<double>(std::fabs(v)));
      for (std::size_t i = 0; i < grad.numel(); ++i) {
        const double fd = oracles::oracle_finite_diff(f.graph, name, i, loss, 1e-2);
        EXPECT_NEAR(grad.f32()[i], fd, 1e-2 * gmax + 2e-3) << name << "[" << i << "] seed " << seed;
      }
    };
    check("conv.weight", r.d_weight);
    check("bn.gamma", r.d_gamma);
    check("bn.beta", r.d_beta);
  }
}

TEST(FoldUnfold, QuantizedForwardUsesStraightThroughGradients) {
  for (std::uint64_t seed = 1; seed <= 12; ++seed) {
    const auto f = testing_support::random_conv_bn(seed);
    const auto& conv = f.graph.node("conv");
    const auto bn = bn_params(f.graph, f.graph.node("bn"));
    const auto& w = f.graph.param(conv, "weight");
    const Tensor* bias = conv.has_param("bias") ? &f.graph.param(conv, "bias") : nullptr;
    const ops::ConvGeometry geo{conv.stride, conv.padding, conv.groups};
    Rng rng(seed);
    const auto dy = random_tensor(forward(f.graph, f.input).output.shape(), rng);
    const auto s_w = minmax_scale(w, 4, Granularity::ChannelWise);
    const auto q = fold_forward_unfold_backward(w, bias, bn, geo, f.input, dy, s_w);
    const auto fp = fold_forward_unfold_backward(w, bias, bn, geo, f.input, dy, std::nullopt);

    // every weight lies inside its MinMax range, so the STE passes all of them
    EXPECT_EQ(q.d_weight, fp.d_weight);
    EXPECT_EQ(q.d_gamma, fp.d_gamma);
    EXPECT_EQ(q.d_beta, fp.d_beta);

    const auto folded = fold_bn(w, bias, bn, s_w.scales);
    QuantParams hat{folded.s_w_hat, 4, Signedness::Signed, Granularity::ChannelWise};
    const auto expected = ops::conv2d(f.input, fake_quant_forward(folded.w_hat, hat), &folded.b_hat, geo);
    for (std::size_t i = 0; i < expected.numel(); ++i) EXPECT_NEAR(q.output.f32()[i], expected.f32()[i], 1e-4);
  }
}

TEST(QatConfig, Validation) {
  QatConfig c;
  EXPECT_NO_THROW(c.validate());
  c.learning_rate = 0.0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = {};
  c.epochs = -1;
  EXPECT_THROW(c.validate(), ValidationError);
  const auto t = QatConfig{}.train_config();
  EXPECT_EQ(t.bn_mode, BnMode::Running);
  EXPECT_DOUBLE_EQ(t.learning_rate_at(9), 5e-4);
  EXPECT_DOUBLE_EQ(t.learning_rate_at(10), 1e-4);
}

TEST(Qat, ZeroEpochsLeavesModelUnchanged) {
  auto c = short_qat();
  c.epochs = 0;
  const auto r = qat_finetune(setup().planned, setup().profile, setup().data.train, c);
  EXPECT_TRUE(graphs_equivalent(r.graph, setup().planned));
}

TEST(Qat, DeterministicAndScalesFrozen) {
  const auto c = short_qat();
  const auto a = qat_finetune(setup().planned, setup().profile, setup().data.train, c);
  const auto b = qat_finetune(setup().planned, setup().profile, setup().data.train, c);
  EXPECT_TRUE(graphs_equivalent(a.graph, b.graph));
  EXPECT_EQ(a.weight_scales, frozen_weight_scales(setup().planned, c.weight_bits));
  EXPECT_FALSE(graphs_equivalent(a.graph, setup().planned));
  for (const auto& n : a.graph.nodes)
    if (n.kind == LayerKind::BatchNorm) {
      EXPECT_EQ(a.graph.param(n, "mean"), setup().planned.param(n, "mean"));
      EXPECT_EQ(a.graph.param(n, "var"), setup().planned.param(n, "var"));
    }
}

TEST(Qat, DisabledQuantizersMatchPlainTraining) {
  auto c = short_qat();
  c.quantize_weights = false;
  c.quantize_activations = false;
  const auto r = qat_finetune(setup().planned, setup().profile, setup().data.train, c);
  const auto plain = train(setup().planned, setup().data.train, c.train_config());
  EXPECT_TRUE(graphs_equivalent(r.graph, plain));
}

TEST(Qat, HooksReproduceIntegerModel) {
  const auto& s = setup();
  const auto scales = frozen_weight_scales(s.planned, 8);
  QatHooks hooks(s.planned, s.profile, scales, true, true);
  const auto x = s.data.eval.batch(0, 16).inputs;
  const auto simulated = forward(s.planned, x, {}, &hooks).output;
  const auto qm = build_qat_model({s.planned, scales}, s.profile, AccumMode::Int32);
  const auto integer = run_quantized(qm, x).output;
  double scale = 0.0, diff = 0.0;
  for (std::size_t i = 0; i < integer.numel(); ++i) {
    scale = std::max(scale, static_cast<double>(std::fabs(integer.f32()[i])));
    diff = std::max(diff, static_cast<double>(std::fabs(integer.f32()[i] - simulated.f32()[i])));
  }
  EXPECT_LT(diff, 0.05 * std::max(scale, 1.0));
}

TEST(Qat, CheckpointsPerEpoch) {
  TempDir dir("qat_ckpt");
  auto c = short_qat();
  c.epochs = 2;
  c.checkpoint_dir = dir.path();
  const auto r = qat_finetune(setup().planned, setup().profile, setup().data.train, c);
  EXPECT_TRUE(std::filesystem::exists(dir / "epoch_001" / "model.json"));
  const auto last = load_model(dir / "epoch_002" / "model.json");
  EXPECT_TRUE(graphs_equivalent(last, r.graph));
}

TEST(Qat, RequiresProfile) {
  EXPECT_THROW(qat_finetune(setup().planned, {}, setup().data.train, short_qat()), ValidationError);
}
