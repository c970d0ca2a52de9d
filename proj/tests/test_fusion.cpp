#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "attnmvs/fusion.hpp"
#include "attnmvs/synthetic.hpp"
#include "support.hpp"

using namespace attnmvs;
namespace fs = std::filesystem;

namespace {

SyntheticScene<double> scene_of(SceneGeometry g, int views = 5, std::int64_t size = 48) {
  SynthConfig sc;
  sc.height = sc.width = size;
  sc.views = views;
  sc.geometry = g;
  return generate_synthetic_scene<double>(7, sc);
}

std::vector<Tensor<double>> ones_like(const std::vector<Tensor<double>>& ds) {
  std::vector<Tensor<double>> out;
  for (const auto& d : ds) out.emplace_back(d.shape(), 1.0);
  return out;
}

// Depths with multiplicative noise and confidences in [0.5, 1], for threshold sweeps.
struct NoisyInputs {
  std::vector<Tensor<double>> depths, conf;
};

NoisyInputs noisy(const SyntheticScene<double>& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, 0.006);
  std::uniform_real_distribution<double> u(0.5, 1.0);
  NoisyInputs in;
  for (const auto& d : s.depths) {
    Tensor<double> nd(d.shape()), c(d.shape());
    for (std::size_t i = 0; i < d.numel(); ++i) {
      nd.data()[i] = d[i] * (1 + n(rng));
      c.data()[i] = u(rng);
    }
    in.depths.push_back(nd);
    in.conf.push_back(c);
  }
  return in;
}

std::set<std::tuple<int, int, int>> kept(const PointCloud& c) {
  std::set<std::tuple<int, int, int>> s;
  for (const auto& p : c.points) s.emplace(p.view, p.u, p.v);
  return s;
}

bool subset(const std::set<std::tuple<int, int, int>>& a, const std::set<std::tuple<int, int, int>>& b) {
  return std::includes(b.begin(), b.end(), a.begin(), a.end());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Photometric, OneHotKeepsEverything) {
  const auto hyp = Hypotheses<double>::global(sample_depth_planes(4, 8, 9));
  Tensor<double> p(Shape{9, 3, 3}), d(Shape{3, 3});
  for (std::int64_t q = 0; q < 9; ++q) {
    p.data()[q * 9 + q] = 1.0;
    d.data()[q] = hyp.planes[static_cast<std::size_t>(q)];
  }
  for (double t : {0.0, 0.5, 1.0}) {
    FusionConfig cfg;
    cfg.prob_threshold = t;
    const auto mask = photometric_filter(d, p, hyp, cfg);
    EXPECT_EQ(std::count(mask.begin(), mask.end(), 1), 9);
  }
}

TEST(Photometric, UniformRejectedAtDefault) {
  const auto hyp = Hypotheses<double>::global(sample_depth_planes(4, 8, 9));
  const Tensor<double> p(Shape{9, 2, 2}, 1.0 / 9.0), d(Shape{2, 2}, 6.0);
  const auto mask = photometric_filter(d, p, hyp, FusionConfig{});
  EXPECT_EQ(std::count(mask.begin(), mask.end(), 0), 4);
}

TEST(Photometric, MatchesThresholdOracle) {
  std::mt19937_64 rng(1);
  auto logits = testing_support::random_tensor({6, 5, 5}, rng, -3, 3);
  const auto p = softmax_axis(logits, 0);
  auto stack = testing_support::random_tensor({6, 5, 5}, rng, 4, 8);
  const auto hyp = Hypotheses<double>::pixelwise(stack, 0);
  auto d = testing_support::random_tensor({5, 5}, rng, 4, 8);
  FusionConfig cfg;
  cfg.prob_threshold = 0.3;
  const auto mask = photometric_filter(d, p, hyp, cfg);
  for (std::int64_t q = 0; q < 25; ++q) {
    std::int64_t best = 0;
    for (std::int64_t m = 1; m < 6; ++m)
      if (std::abs(stack[static_cast<std::size_t>(m * 25 + q)] - d[static_cast<std::size_t>(q)]) <
          std::abs(stack[static_cast<std::size_t>(best * 25 + q)] - d[static_cast<std::size_t>(q)]))
        best = m;
    EXPECT_EQ(mask[static_cast<std::size_t>(q)], p[static_cast<std::size_t>(best * 25 + q)] >= 0.3 ? 1 : 0);
  }
}

TEST(Geometric, ExactDepthsSupportedByCoVisibleViews) {
  const auto s = scene_of(SceneGeometry::Plane);
  const auto geo = geometric_filter(s.depths, s.cams, FusionConfig{});
  const std::int64_t w = 48;
  int interior = 0;
  for (std::int64_t y = 0; y < w; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const double d = s.depths[0][static_cast<std::size_t>(y * w + x)];
      const Vec3 X = s.cams[0].lift(x, y, d);
      int visible = 1;
      for (std::size_t j = 1; j < s.cams.size(); ++j) {
        const Vec3 pj = s.cams[j].project(X);
        visible += pj.x() >= 1 && pj.y() >= 1 && pj.x() <= w - 2 && pj.y() <= w - 2;
      }
      if (visible != 5) continue;
      ++interior;
      EXPECT_EQ(geo.support[0][static_cast<std::size_t>(y * w + x)], 5);
    }
  EXPECT_GT(interior, 48 * 48 / 3);
}

TEST(Geometric, DoubledViewSupportsNothing) {
  const auto s = scene_of(SceneGeometry::Steps, 3);
  auto depths = s.depths;
  Tensor<double> doubled(depths[1].shape());
  for (std::size_t i = 0; i < doubled.numel(); ++i) doubled.data()[i] = 2 * depths[1][i];
  FusionConfig cfg;
  cfg.min_consistent_views = 1;
  const auto before = geometric_filter(std::vector<Tensor<double>>{depths[0], depths[1]}, {s.cams[0], s.cams[1]}, cfg);
  const auto after = geometric_filter(std::vector<Tensor<double>>{depths[0], doubled}, {s.cams[0], s.cams[1]}, cfg);
  EXPECT_GT(std::count(before.support[0].begin(), before.support[0].end(), 2), 0);
  for (int c : after.support[0]) EXPECT_LE(c, 1);
}

TEST(Geometric, SingleConsistentSourceKept) {
  const auto s = scene_of(SceneGeometry::Plane, 2);
  for (int min_views : {1, 2}) {
    FusionConfig cfg;
    cfg.min_consistent_views = min_views;
    const auto geo = geometric_filter(s.depths, s.cams, cfg);
    EXPECT_EQ(geo.masks[0][static_cast<std::size_t>(24 * 48 + 24)], 1);
  }
  FusionConfig three;
  const auto geo = geometric_filter(s.depths, s.cams, three);
  EXPECT_EQ(std::count(geo.masks[0].begin(), geo.masks[0].end(), 1), 0);
}

TEST(Geometric, DegeneratePairsCounted) {
  const auto s = scene_of(SceneGeometry::Plane, 2);
  FusionConfig cfg;
  cfg.min_consistent_views = 1;
  const auto geo = geometric_filter(std::vector<Tensor<double>>{s.depths[0], s.depths[0]}, {s.cams[0], s.cams[0]}, cfg);
  EXPECT_EQ(geo.degenerate_pairs, 2);
  for (int c : geo.support[0]) EXPECT_EQ(c, 1);
}

TEST(Fuse, PlanePointsOnPlane) {
  const auto s = scene_of(SceneGeometry::Plane);
  FusionStats stats;
  const auto cloud = fuse(s.depths, ones_like(s.depths), s.images, s.cams, FusionConfig{}, &stats);
  ASSERT_GT(cloud.size(), 48u * 48u);
  double sq = 0;
  for (const auto& p : cloud.points) {
    sq += std::pow(p.position.z() - s.config.plane_depth, 2);
    EXPECT_GE(p.support, 3);
    EXPECT_TRUE(p.position.allFinite());
  }
  EXPECT_LT(std::sqrt(sq / static_cast<double>(cloud.size())), 0.005 * s.config.plane_depth);
  EXPECT_EQ(stats.fused, cloud.size());
  EXPECT_EQ(stats.pixels, 5u * 48u * 48u);
  EXPECT_EQ(stats.photometric_kept, stats.pixels);
}

TEST(Fuse, SingleViewPassThrough) {
  const auto s = scene_of(SceneGeometry::Sphere, 1);
  FusionConfig cfg;
  cfg.min_consistent_views = 1;
  const auto cloud = fuse(s.depths, ones_like(s.depths), s.images, s.cams, cfg);
  std::size_t valid = 0;
  for (double d : s.depths[0].values()) valid += d > 0;
  ASSERT_EQ(cloud.size(), valid);
  for (const auto& p : cloud.points) {
    const double d = s.depths[0][static_cast<std::size_t>(p.v * 48 + p.u)];
    EXPECT_LT((p.position - s.cams[0].lift(p.u, p.v, d)).norm(), 1e-12);
    EXPECT_EQ(p.support, 1);
    for (int c = 0; c < 3; ++c)
      EXPECT_EQ(p.color[static_cast<std::size_t>(c)],
                std::lround(s.images[0][static_cast<std::size_t>((c * 48 + p.v) * 48 + p.u)] * 255));
  }
}

TEST(Fuse, ZeroThresholdsKeepNothing) {
  const auto s = scene_of(SceneGeometry::Plane, 3);
  FusionConfig cfg;
  cfg.prob_threshold = 0;
  cfg.reproj_px_threshold = 0;
  cfg.rel_depth_threshold = 0;
  FusionStats stats;
  EXPECT_TRUE(fuse(s.depths, ones_like(s.depths), s.images, s.cams, cfg, &stats).empty());
  EXPECT_EQ(stats.fused, 0u);
  EXPECT_EQ(stats.photometric_kept, 3u * 48u * 48u);
}

TEST(Fuse, TighteningAnyThresholdNeverGrowsKeptSet) {
  const auto s = scene_of(SceneGeometry::Steps, 4, 32);
  const auto in = noisy(s, 3);
  auto run = [&](const FusionConfig& cfg) { return kept(fuse(in.depths, in.conf, s.images, s.cams, cfg)); };
  const FusionConfig base{0.7, 1.0, 0.01, 2};
  auto sweep = [&](auto set, const std::vector<double>& stricter) {
    std::set<std::tuple<int, int, int>> prev;
    for (std::size_t i = 0; i < stricter.size(); ++i) {
      FusionConfig cfg = base;
      set(cfg, stricter[i]);
      const auto now = run(cfg);
      if (i) {
        EXPECT_TRUE(subset(now, prev)) << "step " << i;
      } else {
        EXPECT_FALSE(now.empty());
      }
      prev = now;
    }
  };
  sweep([](FusionConfig& c, double v) { c.prob_threshold = v; }, {0.0, 0.55, 0.7, 0.8, 0.95, 1.0});
  sweep([](FusionConfig& c, double v) { c.min_consistent_views = static_cast<int>(v); }, {1, 2, 3, 4, 5});
  sweep([](FusionConfig& c, double v) { c.reproj_px_threshold = v; }, {4.0, 2.0, 1.0, 0.5, 0.1, 0.0});
  sweep([](FusionConfig& c, double v) { c.rel_depth_threshold = v; }, {0.1, 0.02, 0.01, 0.005, 0.001, 0.0});
}

TEST(Fuse, ViewOrderInvariant) {
  const auto s = scene_of(SceneGeometry::Steps, 4, 32);
  const auto in = noisy(s, 4);
  const FusionConfig cfg{0.6, 1.0, 0.01, 2};
  const auto a = fuse(in.depths, in.conf, s.images, s.cams, cfg);
  const std::vector<int> perm{2, 0, 3, 1};
  std::vector<Tensor<double>> d, c, im;
  std::vector<Camera> cams;
  for (int v : perm) {
    d.push_back(in.depths[static_cast<std::size_t>(v)]);
    c.push_back(in.conf[static_cast<std::size_t>(v)]);
    im.push_back(s.images[static_cast<std::size_t>(v)]);
    cams.push_back(s.cams[static_cast<std::size_t>(v)]);
  }
  const auto b = fuse(d, c, im, cams, cfg);
  ASSERT_EQ(a.size(), b.size());
  std::map<std::tuple<int, int, int>, Vec3> by_pixel;
  for (const auto& p : a.points) by_pixel[{p.view, p.u, p.v}] = p.position;
  for (const auto& p : b.points) {
    const auto it = by_pixel.find({perm[static_cast<std::size_t>(p.view)], p.u, p.v});
    ASSERT_NE(it, by_pixel.end());
    EXPECT_LT((it->second - p.position).norm(), 1e-7);
  }
}

TEST(Fuse, PointsReprojectNearSourcePixel) {
  const auto s = scene_of(SceneGeometry::Steps, 4, 32);
  const auto in = noisy(s, 5);
  const FusionConfig cfg{0.6, 1.0, 0.01, 2};
  const auto cloud = fuse(in.depths, in.conf, s.images, s.cams, cfg);
  ASSERT_FALSE(cloud.empty());
  for (const auto& p : cloud.points) {
    const Vec3 h = s.cams[static_cast<std::size_t>(p.view)].project(p.position);
    EXPECT_LE(std::hypot(h.x() - p.u, h.y() - p.v), cfg.reproj_px_threshold);
  }
}

TEST(Fuse, Errors) {
  const auto s = scene_of(SceneGeometry::Plane, 2, 16);
  FusionConfig bad;
  bad.rel_depth_threshold = -1;
  EXPECT_THROW(fuse(s.depths, ones_like(s.depths), s.images, s.cams, bad), ConfigError);
  bad = {};
  bad.min_consistent_views = 0;
  EXPECT_THROW(fuse(s.depths, ones_like(s.depths), s.images, s.cams, bad), ConfigError);
  EXPECT_THROW(fuse(s.depths, ones_like(s.depths), s.images, {s.cams[0]}, FusionConfig{}), ShapeError);
}

TEST(Ply, EmptyCloud) {
  const auto path = fs::temp_directory_path() / "attnmvs_empty.ply";
  export_ply(PointCloud{}, path);
  EXPECT_NE(slurp(path).find("element vertex 0\n"), std::string::npos);
  EXPECT_TRUE(load_ply(path).empty());
}

TEST(Ply, OnePointRoundTrip) {
  PointCloud c;
  FusedPoint p;
  p.position = Vec3(1, 2, 3);
  p.color = {255, 255, 255};
  c.points.push_back(p);
  const auto path = fs::temp_directory_path() / "attnmvs_one.ply";
  export_ply(c, path);
  const auto back = load_ply(path);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back.points[0].position, Vec3(1, 2, 3));
  EXPECT_EQ(back.points[0].color, p.color);
}

TEST(Ply, SizeArithmeticAndBitExactRoundTrip) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<float> pos(-50, 50);
  std::uniform_int_distribution<int> col(0, 255);
  PointCloud c;
  for (int i = 0; i < 10000; ++i) {
    FusedPoint p;
    p.position = Vec3(pos(rng), pos(rng), pos(rng));
    for (auto& ch : p.color) ch = static_cast<std::uint8_t>(col(rng));
    c.points.push_back(p);
  }
  const auto path = fs::temp_directory_path() / "attnmvs_10k.ply";
  export_ply(c, path);
  EXPECT_EQ(fs::file_size(path), ply_header(10000).size() + 15u * 10000u);
  const auto back = load_ply(path);
  ASSERT_EQ(back.size(), c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    ASSERT_EQ(back.points[i].position, c.points[i].position);
    ASSERT_EQ(back.points[i].color, c.points[i].color);
  }
}

TEST(Ply, IdenticalInputsGiveIdenticalFiles) {
  const auto s = scene_of(SceneGeometry::Steps, 3, 32);
  const auto in = noisy(s, 8);
  const FusionConfig cfg{0.6, 1.0, 0.01, 2};
  const auto a = fs::temp_directory_path() / "attnmvs_det_a.ply";
  const auto b = fs::temp_directory_path() / "attnmvs_det_b.ply";
  export_ply(fuse(in.depths, in.conf, s.images, s.cams, cfg), a);
  export_ply(fuse(in.depths, in.conf, s.images, s.cams, cfg), b);
  EXPECT_EQ(slurp(a), slurp(b));
  EXPECT_GT(fs::file_size(a), ply_header(0).size());
}

TEST(Ply, Errors) {
  EXPECT_THROW(load_ply("/nonexistent/cloud.ply"), NotFound);
  const auto path = fs::temp_directory_path() / "attnmvs_bad.ply";
  std::ofstream(path) << "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n1\n";
  EXPECT_THROW(load_ply(path), ParseError);
  std::ofstream(path) << "not a ply\n";
  EXPECT_THROW(load_ply(path), ParseError);
}
