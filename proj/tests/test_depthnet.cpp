#include <gtest/gtest.h>

#include <Eigen/Geometry>

#include <random>

#include "attnmvs/depthnet.hpp"
#include "attnmvs/synthetic.hpp"
#include "support.hpp"

using namespace attnmvs;
using testing_support::check_gradients;
using testing_support::random_parameter;
using testing_support::random_tensor;

namespace {

Camera pinhole(std::int64_t size, const Vec3& center) {
  Camera c;
  // Long focal length keeps one-pixel depth steps well below the scene depth.
  const double f = 200.0, cxy = 0.5 * (static_cast<double>(size) - 1);
  c.K << f, 0, cxy, 0, f, cxy, 0, 0, 1;
  c.t = -center;
  c.depth_min = 4;
  c.depth_max = 8;
  return c;
}

Tensor<double> random_probability(Shape shape, std::mt19937_64& rng) {
  auto logits = random_tensor(shape, rng, -2, 2);
  return softmax_axis(logits, 0);
}

// Network small enough for fast tests.
NetworkConfig tiny_config(int levels) {
  NetworkConfig cfg;
  cfg.levels = levels;
  cfg.m_coarse = 8;
  cfg.m_fine = 4;
  cfg.groups = 4;
  cfg.feature_channels = {8, 8, 8, 8, 8, 8, 8, 8};
  return cfg;
}

}  // namespace

TEST(Regularize, OutputIsDistribution) {
  std::mt19937_64 rng(1);
  const auto w = Regularizer3DWeights<double>::init(4, rng);
  auto p = regularize(random_tensor({4, 6, 8, 16}, rng, -3, 3), w);
  ASSERT_EQ(p.shape(), (Shape{6, 8, 16}));
  for (std::int64_t q = 0; q < 128; ++q) {
    double s = 0;
    for (std::int64_t m = 0; m < 6; ++m) {
      EXPECT_GE(p[static_cast<std::size_t>(m * 128 + q)], 0.0);
      s += p[static_cast<std::size_t>(m * 128 + q)];
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Regularize, ZeroWeightsGiveUniform) {
  std::mt19937_64 rng(2);
  auto w = Regularizer3DWeights<double>::init(4, rng);
  ParameterList<double> params;
  w.collect(params, "r");
  for (auto& p : params)
    for (auto& v : p.tensor.mutable_values()) v = 0;
  auto p = regularize(random_tensor({4, 9, 8, 8}, rng), w);
  for (double v : p.values()) EXPECT_DOUBLE_EQ(v, 1.0 / 9.0);
}

TEST(Regularize, OddPlaneCountWorks) {
  std::mt19937_64 rng(3);
  const auto w = Regularizer3DWeights<float>::init(4, rng);
  EXPECT_EQ(regularize(Tensor<float>(Shape{4, 9, 16, 8}), w).shape(), (Shape{9, 16, 8}));
}

TEST(Regularize, IndivisibleExtentIsSizeError) {
  std::mt19937_64 rng(4);
  const auto w = Regularizer3DWeights<float>::init(4, rng);
  EXPECT_THROW(regularize(Tensor<float>(Shape{4, 8, 12, 8}), w), SizeError);
  EXPECT_THROW(regularize(Tensor<float>(Shape{4, 8, 8, 20}), w), SizeError);
}

TEST(Regularize, Gradients) {
  std::mt19937_64 rng(5);
  auto w = Regularizer3DWeights<double>::init(2, rng);
  ParameterList<double> params;
  w.collect(params, "r");
  for (auto& p : params)
    if (p.tensor.rank() == 1)
      for (auto& v : p.tensor.mutable_values()) v = std::uniform_real_distribution<double>(-0.05, 0.05)(rng);
  auto cost = random_parameter({2, 8, 8, 8}, rng);
  std::vector<Tensor<double>> inputs{cost};
  for (const auto& p : params) inputs.push_back(p.tensor);
  const double err = check_gradients([&](const auto& in) { return regularize(in[0], w); }, inputs, 2, 1e-6, 12);
  EXPECT_LT(err, 1e-4);
}

TEST(RegressDepth, OneHotGivesPlane) {
  const auto hyp = Hypotheses<double>::global(sample_depth_planes(4, 8, 8));
  Tensor<double> p(Shape{8, 2, 3});
  for (std::int64_t q = 0; q < 6; ++q) p.data()[(q % 8) * 6 + q] = 1.0;
  auto d = regress_depth(p, hyp);
  for (std::int64_t q = 0; q < 6; ++q) EXPECT_EQ(d[static_cast<std::size_t>(q)], hyp.planes[static_cast<std::size_t>(q % 8)]);
}

TEST(RegressDepth, UniformGivesMean) {
  Hypotheses<double> hyp;
  hyp.planes = {1, 2, 3, 4};
  auto d = regress_depth(Tensor<double>(Shape{4, 1, 1}, 0.25), hyp);
  EXPECT_DOUBLE_EQ(d[0], 2.5);
}

TEST(RegressDepth, MatchesDotProductAndStaysInRange) {
  std::mt19937_64 rng(6);
  auto p = random_probability({9, 4, 5}, rng);
  auto stack = random_tensor({9, 4, 5}, rng, 3, 9);
  auto d = regress_depth(p, Hypotheses<double>::pixelwise(stack, 0));
  for (std::int64_t q = 0; q < 20; ++q) {
    double dot = 0, lo = 1e9, hi = -1e9;
    for (std::int64_t m = 0; m < 9; ++m) {
      const auto i = static_cast<std::size_t>(m * 20 + q);
      dot += p[i] * stack[i];
      lo = std::min(lo, stack[i]);
      hi = std::max(hi, stack[i]);
    }
    EXPECT_NEAR(d[static_cast<std::size_t>(q)], dot, 1e-7);
    EXPECT_GE(d[static_cast<std::size_t>(q)], lo - 1e-12);
    EXPECT_LE(d[static_cast<std::size_t>(q)], hi + 1e-12);
  }
}

TEST(RegressDepth, ShapeMismatch) {
  const auto hyp = Hypotheses<double>::global(sample_depth_planes(4, 8, 8));
  EXPECT_THROW(regress_depth(Tensor<double>(Shape{7, 2, 2}), hyp), ShapeError);
}

TEST(ResidualHypotheses, CenterPlaneIsUpsampledDepth) {
  std::mt19937_64 rng(7);
  auto up = random_tensor({6, 6}, rng, 5, 7);
  const Camera ref = pinhole(6, Vec3::Zero());
  const auto hyp = build_residual_hypotheses(up, ref, {pinhole(6, Vec3(0.3, 0, 0)), pinhole(6, Vec3(-0.2, 0.1, 0))}, 8, 1);
  ASSERT_EQ(hyp.per_pixel.shape(), (Shape{9, 6, 6}));
  for (std::int64_t p = 0; p < 36; ++p) {
    EXPECT_EQ(hyp.depth(4, p), up[static_cast<std::size_t>(p)]);
    for (std::int64_t m = 1; m <= 4; ++m)
      EXPECT_NEAR(hyp.depth(4 + m, p) - up[static_cast<std::size_t>(p)], up[static_cast<std::size_t>(p)] - hyp.depth(4 - m, p), 1e-12);
  }
}

TEST(ResidualHypotheses, IntervalIsMeanEpipolarStep) {
  const Camera ref = pinhole(8, Vec3::Zero());
  const std::vector<Camera> srcs{pinhole(8, Vec3(0.3, 0, 0)), pinhole(8, Vec3(0, 0.5, 0))};
  Tensor<double> up(Shape{8, 8}, 6.0);
  const auto hyp = build_residual_hypotheses(up, ref, srcs, 4, 0);
  for (std::int64_t y : {0, 3, 7})
    for (std::int64_t x : {1, 4, 6}) {
      const double expected = 0.5 * (epipolar_depth_interval(ref, srcs[0], x, y, 6.0) + epipolar_depth_interval(ref, srcs[1], x, y, 6.0));
      EXPECT_NEAR(hyp.depth(3, y * 8 + x) - 6.0, expected, 1e-9);
    }
}

TEST(ResidualHypotheses, AllDegenerateSourcesRejected) {
  const Camera ref = pinhole(4, Vec3::Zero());
  EXPECT_THROW(build_residual_hypotheses(Tensor<double>(Shape{4, 4}, 5.0), ref, {ref, ref}, 8, 0), DegenerateGeometry);
  EXPECT_THROW(build_residual_hypotheses(Tensor<double>(Shape{4, 4}, 5.0), ref, {pinhole(4, Vec3(1, 0, 0))}, 3, 0),
               InvalidArgument);
}

TEST(ResidualHypotheses, ClampedBelowMinimumDepth) {
  const Camera ref = pinhole(4, Vec3::Zero());
  ResidualOptions opt;
  opt.min_depth = 0.5;
  opt.fallback_interval = 1.0;
  // A huge baseline gives a large interval so low planes cross the floor.
  const auto hyp = build_residual_hypotheses(Tensor<double>(Shape{4, 4}, 0.6), ref, {pinhole(4, Vec3(0.001, 0, 0))}, 8, 0, opt);
  for (std::int64_t m = 0; m < 9; ++m)
    for (std::int64_t p = 0; p < 16; ++p) EXPECT_GE(hyp.depth(m, p), 0.5);
}

TEST(ResidualHypotheses, Gradients) {
  std::mt19937_64 rng(8);
  auto up = random_parameter({4, 4}, rng, 5, 7);
  const Camera ref = pinhole(4, Vec3::Zero());
  const std::vector<Camera> srcs{pinhole(4, Vec3(0.3, 0.1, 0)), pinhole(4, Vec3(-0.2, 0.3, 0.1))};
  EXPECT_LT(check_gradients([&](const auto& in) { return build_residual_hypotheses(in[0], ref, srcs, 4, 0).per_pixel; }, {up}),
            1e-7);
}

TEST(RefineDepth, CenterOneHotKeepsUpsampledDepth) {
  std::mt19937_64 rng(9);
  auto up = random_tensor({3, 3}, rng, 5, 7);
  const auto hyp = build_residual_hypotheses(up, pinhole(3, Vec3::Zero()), {pinhole(3, Vec3(0.2, 0, 0))}, 8, 0);
  Tensor<double> p(Shape{9, 3, 3});
  for (std::int64_t q = 0; q < 9; ++q) p.data()[4 * 9 + q] = 1.0;
  auto d = refine_depth(p, hyp, up);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(d[i], up[i]);
}

TEST(RefineDepth, SymmetricProbabilityGivesZeroResidual) {
  std::mt19937_64 rng(10);
  auto up = random_tensor({4, 4}, rng, 5, 7);
  const auto hyp = build_residual_hypotheses(up, pinhole(4, Vec3::Zero()), {pinhole(4, Vec3(0.2, 0.1, 0))}, 8, 0);
  auto raw = random_tensor({9, 4, 4}, rng, 0.1, 1);
  Tensor<double> p(Shape{9, 4, 4});
  for (std::int64_t q = 0; q < 16; ++q) {
    double z = 0;
    for (std::int64_t m = 0; m < 9; ++m) {
      const double v = raw[static_cast<std::size_t>(std::min(m, 8 - m) * 16 + q)];
      p.data()[m * 16 + q] = v;
      z += v;
    }
    for (std::int64_t m = 0; m < 9; ++m) p.data()[m * 16 + q] /= z;
  }
  auto d = refine_depth(p, hyp, up);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(d[i], up[i], 1e-7);
}

TEST(RefineDepth, MatchesSignedResidualSum) {
  std::mt19937_64 rng(11);
  auto up = random_tensor({4, 5}, rng, 5, 7);
  const auto hyp = build_residual_hypotheses(up, pinhole(4, Vec3::Zero()), {pinhole(4, Vec3(0.25, 0, 0.05))}, 8, 0);
  auto p = random_probability({9, 4, 5}, rng);
  auto d = refine_depth(p, hyp, up);
  for (std::int64_t q = 0; q < 20; ++q) {
    const double dd = hyp.depth(5, q) - hyp.depth(4, q);
    double r = 0;
    for (std::int64_t m = -4; m <= 4; ++m) r += static_cast<double>(m) * dd * p[static_cast<std::size_t>((m + 4) * 20 + q)];
    EXPECT_NEAR(d[static_cast<std::size_t>(q)], up[static_cast<std::size_t>(q)] + r, 1e-7);
    EXPECT_LE(std::abs(d[static_cast<std::size_t>(q)] - up[static_cast<std::size_t>(q)]), 4 * dd + 1e-12);
  }
}

TEST(RefineDepth, Gradients) {
  std::mt19937_64 rng(12);
  auto up = random_parameter({4, 4}, rng, 5, 7);
  auto logits = random_parameter({5, 4, 4}, rng);
  const Camera ref = pinhole(4, Vec3::Zero());
  const std::vector<Camera> srcs{pinhole(4, Vec3(0.3, 0.1, 0))};
  const double err = check_gradients(
      [&](const auto& in) {
        const auto hyp = build_residual_hypotheses(in[1], ref, srcs, 4, 0);
        return refine_depth(softmax_axis(in[0], 0), hyp, in[1]);
      },
      {logits, up});
  EXPECT_LT(err, 1e-7);
}

TEST(PyramidLoss, Contracts) {
  std::mt19937_64 rng(13);
  auto gt = random_tensor({4, 4}, rng, 4, 8);
  auto map = DepthMap<double>::all_valid(gt);
  EXPECT_EQ(pyramid_loss<double>({gt.detach()}, {map}).item(), 0.0);

  auto off = gt.detach();
  off.mutable_values()[5] += 0.375;
  EXPECT_DOUBLE_EQ(pyramid_loss<double>({off}, {map}).item(), 0.375);

  map.valid[7] = 0;
  auto corrupt = gt.detach();
  corrupt.mutable_values()[7] = 1e6;
  EXPECT_EQ(pyramid_loss<double>({corrupt}, {map}).item(), 0.0);

  std::fill(map.valid.begin(), map.valid.end(), 0);
  EXPECT_THROW(pyramid_loss<double>({gt}, {map}), DegenerateLoss);
}

TEST(PyramidLoss, SumsLevels) {
  auto a = DepthMap<double>::all_valid(Tensor<double>(Shape{2, 2}, 5.0));
  auto b = DepthMap<double>::all_valid(Tensor<double>(Shape{4, 4}, 5.0));
  auto loss = pyramid_loss<double>({Tensor<double>(Shape{2, 2}, 5.5), Tensor<double>(Shape{4, 4}, 4.0)}, {a, b});
  EXPECT_DOUBLE_EQ(loss.item(), 4 * 0.5 + 16 * 1.0);
}

TEST(InferPyramid, LevelsDoubleInSize) {
  SynthConfig sc;
  sc.height = sc.width = 32;
  const auto scene = generate_synthetic_scene<float>(1, sc);
  const auto cfg = tiny_config(2);
  const auto w = NetworkWeights<float>::init(cfg, 3);
  NoGradScope<float> off;
  const auto out = infer_depth_pyramid(scene.images, scene.cams, w, cfg);
  ASSERT_EQ(out.size(), 3u);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::int64_t size = 8 << i;
    EXPECT_EQ(out[i].level, 2 - static_cast<int>(i));
    EXPECT_EQ(out[i].depth.shape(), (Shape{size, size}));
    const std::int64_t planes = i == 0 ? 8 : 5;
    EXPECT_EQ(out[i].probability.shape(), (Shape{planes, size, size}));
    EXPECT_EQ(out[i].cost_volume_elements, 4 * planes * size * size);
    for (std::int64_t q = 0; q < size * size; ++q) {
      double s = 0;
      for (std::int64_t m = 0; m < planes; ++m) s += out[i].probability[static_cast<std::size_t>(m * size * size + q)];
      ASSERT_NEAR(s, 1.0, 1e-5);
    }
  }
  // Coarsest level stays inside the plane range.
  for (float d : out[0].depth.values()) {
    EXPECT_GE(d, 4.0f - 1e-4f);
    EXPECT_LE(d, 8.0f);
  }
}

TEST(InferPyramid, SingleLevel) {
  SynthConfig sc;
  sc.height = sc.width = 16;
  sc.views = 2;
  const auto scene = generate_synthetic_scene<float>(2, sc);
  const auto cfg = tiny_config(0);
  const auto w = NetworkWeights<float>::init(cfg, 4);
  NoGradScope<float> off;
  const auto out = infer_depth_pyramid(scene.images, scene.cams, w, cfg);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].depth.shape(), (Shape{16, 16}));
  EXPECT_TRUE(out[0].hypotheses.is_global());
}

TEST(InferPyramid, RejectsBadSizes) {
  const auto cfg = tiny_config(1);
  const auto w = NetworkWeights<float>::init(cfg, 5);
  std::vector<Camera> cams(2, pinhole(24, Vec3::Zero()));
  cams[1].t = Vec3(-0.3, 0, 0);
  EXPECT_THROW(infer_depth_pyramid<float>({Tensor<float>(Shape{3, 24, 32}), Tensor<float>(Shape{3, 24, 32})}, cams, w, cfg),
               SizeError);
  EXPECT_THROW(infer_depth_pyramid<float>({Tensor<float>(Shape{3, 32, 32})}, {cams[0]}, w, cfg), InsufficientViews);
}

TEST(InferPyramid, GlobalScaleScalesCoarseDepth) {
  SynthConfig sc;
  sc.height = sc.width = 16;
  const auto scene = generate_synthetic_scene<double>(3, sc);
  auto scaled = scene.cams;
  for (auto& c : scaled) {
    c.t *= 2.0;
    c.depth_min *= 2.0;
    c.depth_max *= 2.0;
  }
  const auto cfg = tiny_config(0);
  const auto w = NetworkWeights<double>::init(cfg, 6);
  NoGradScope<double> off;
  const auto a = infer_depth_pyramid(scene.images, scene.cams, w, cfg);
  const auto b = infer_depth_pyramid(scene.images, scaled, w, cfg);
  for (std::size_t i = 0; i < a[0].depth.numel(); ++i) EXPECT_NEAR(b[0].depth[i], 2.0 * a[0].depth[i], 1e-9);
}

TEST(NetworkConfig, Validation) {
  auto cfg = tiny_config(1);
  cfg.groups = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny_config(1);
  cfg.m_fine = 5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny_config(1);
  cfg.heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(NetworkWeights, DeterministicInit) {
  const auto cfg = tiny_config(1);
  const auto a = NetworkWeights<float>::init(cfg, 9).parameters();
  const auto b = NetworkWeights<float>::init(cfg, 9).parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    for (std::size_t k = 0; k < a[i].tensor.numel(); ++k) ASSERT_EQ(a[i].tensor[k], b[i].tensor[k]);
  }
}
