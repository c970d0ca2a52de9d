#include <gtest/gtest.h>

#include <Eigen/Geometry>

#include <filesystem>
#include <fstream>
#include <random>

#include "attnmvs/geometry.hpp"

using namespace attnmvs;

namespace {

Camera make_camera(double f, double cx, double cy, const Mat3& R, const Vec3& center) {
  Camera c;
  c.K << f, 0, cx, 0, f, cy, 0, 0, 1;
  c.R = R;
  c.t = -R * center;
  c.depth_min = 1.0;
  c.depth_max = 10.0;
  return c;
}

Mat3 small_rotation(std::mt19937_64& rng, double max_angle) {
  std::normal_distribution<double> n(0, 1);
  std::uniform_real_distribution<double> a(-max_angle, max_angle);
  Vec3 axis(n(rng), n(rng), n(rng));
  return Eigen::AngleAxis<double>(a(rng), axis.normalized()).toRotationMatrix();
}

// Lift with the reference camera, project with the source camera.
Vec2 lift_project(const Camera& ref, const Camera& src, double u, double v, double d) {
  const Vec3 ray = ref.K.inverse() * Vec3(u, v, 1.0);
  const Vec3 cam_point = ray * (d / ray.z());
  const Vec3 world = ref.R.transpose() * (cam_point - ref.t);
  const Vec3 h = src.K * (src.R * world + src.t);
  return {h.x() / h.z(), h.y() / h.z()};
}

// Smallest depth increase that moves the source projection by one pixel, by bisection.
double scan_interval(const Camera& ref, const Camera& src, double u, double v, double d) {
  const Vec2 base = lift_project(ref, src, u, v, d);
  auto moved = [&](double dd) { return (lift_project(ref, src, u, v, d + dd) - base).norm(); };
  double lo = 0, hi = 1e-3;
  while (moved(hi) < 1.0) hi *= 2;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (moved(mid) < 1.0 ? lo : hi) = mid;
  }
  return hi;
}

}  // namespace

TEST(ScaleIntrinsics, LevelZeroUnchanged) {
  Mat3 K;
  K << 1600, 0, 800, 0, 1600, 600, 0, 0, 1;
  EXPECT_EQ(scale_intrinsics(K, 0), K);
}

TEST(ScaleIntrinsics, LevelTwoQuarters) {
  Mat3 K;
  K << 1600, 0, 800, 0, 1600, 600, 0, 0, 1;
  const Mat3 s = scale_intrinsics(K, 2);
  EXPECT_EQ(s(0, 0), 400);
  EXPECT_EQ(s(0, 2), 200);
  EXPECT_EQ(s(1, 2), 150);
  EXPECT_EQ(s(2, 2), 1);
}

TEST(ScaleIntrinsics, Composes) {
  Mat3 K;
  K << 1234.5, 0.25, 640.5, 0, 1100.25, 481.75, 0, 0, 1;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b)
      EXPECT_LT((scale_intrinsics(scale_intrinsics(K, a), b) - scale_intrinsics(K, a + b)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(scale_intrinsics(K, -1), InvalidArgument);
}

TEST(DepthPlanes, DirectSubstitution) {
  const auto p = sample_depth_planes(1, 3, 2);
  ASSERT_EQ(p.depths.size(), 2u);
  EXPECT_EQ(p.depths[0], 1.0);
  EXPECT_EQ(p.depths[1], 2.0);
  EXPECT_EQ(sample_depth_planes(4, 9, 1).depths, std::vector<double>{4.0});
}

TEST(DepthPlanes, AffineSpacing) {
  const auto p = sample_depth_planes(425, 935, 48);
  EXPECT_EQ(p.depths.front(), 425.0);
  EXPECT_NEAR(p.depths[1] - p.depths[0], 10.625, 1e-12);
  for (std::size_t m = 1; m + 1 < p.depths.size(); ++m)
    EXPECT_NEAR(p.depths[m + 1] - p.depths[m], p.depths[1] - p.depths[0], 1e-12);
}

TEST(DepthPlanes, InvalidArguments) {
  EXPECT_THROW(sample_depth_planes(1, 2, 0), InvalidArgument);
  EXPECT_THROW(sample_depth_planes(2, 2, 4), InvalidArgument);
  EXPECT_THROW(sample_depth_planes(0, 2, 4), InvalidArgument);
}

TEST(Homography, IdentityForSameCamera) {
  std::mt19937_64 rng(1);
  const Camera c = make_camera(500, 320, 240, small_rotation(rng, 0.3), Vec3(0.2, -0.1, 0.4));
  for (double d : {0.5, 3.0, 100.0}) EXPECT_LT((plane_homography(c, c, d) - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Homography, MatchesLiftAndProject) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> pix(0, 640), depth(2, 20), off(-1, 1);
  for (int trial = 0; trial < 50; ++trial) {
    const Camera ref = make_camera(600, 320, 240, small_rotation(rng, 0.2), Vec3(off(rng), off(rng), off(rng)));
    const Camera src = make_camera(550, 300, 250, small_rotation(rng, 0.2), Vec3(off(rng), off(rng), off(rng)));
    const double d = depth(rng);
    const Mat3 H = plane_homography(ref, src, d);
    for (int k = 0; k < 5; ++k) {
      const double u = pix(rng), v = pix(rng) * 0.75;
      EXPECT_LT((apply_homography(H, u, v) - lift_project(ref, src, u, v, d)).norm(), 1e-6);
    }
  }
}

TEST(Homography, TranslationAlongPrincipalAxis) {
  const Camera ref = make_camera(400, 200, 150, Mat3::Identity(), Vec3::Zero());
  const Camera src = make_camera(400, 200, 150, Mat3::Identity(), Vec3(0, 0, 0.75));
  const Mat3 H = plane_homography(ref, src, 5.0);
  for (double u : {0.0, 37.5, 200.0, 399.0})
    for (double v : {0.0, 150.0, 299.0})
      EXPECT_LT((apply_homography(H, u, v) - lift_project(ref, src, u, v, 5.0)).norm(), 1e-6);
}

TEST(Homography, ZeroDepthRejected) {
  const Camera c = make_camera(1, 0, 0, Mat3::Identity(), Vec3::Zero());
  EXPECT_THROW(plane_homography(c, c, 0.0), InvalidArgument);
}

TEST(EpipolarInterval, ZeroBaselineIsDegenerate) {
  const Camera c = make_camera(500, 250, 250, Mat3::Identity(), Vec3::Zero());
  EXPECT_THROW(epipolar_depth_interval(c, c, 250, 250, 5.0), DegenerateGeometry);
}

TEST(EpipolarInterval, MatchesDepthScan) {
  const Camera ref = make_camera(500, 250, 250, Mat3::Identity(), Vec3::Zero());
  const Camera src = make_camera(500, 250, 250, Mat3::Identity(), Vec3(0.3, 0, 0));
  const double d = 6.0;
  const double dd = epipolar_depth_interval(ref, src, 250, 250, d);
  const double oracle = scan_interval(ref, src, 250, 250, d);
  EXPECT_NEAR(dd, oracle, 0.05 * oracle);
}

TEST(EpipolarInterval, MatchesDepthScanRotatedPair) {
  std::mt19937_64 rng(3);
  const Camera ref = make_camera(480, 240, 200, small_rotation(rng, 0.1), Vec3(0, 0, 0));
  const Camera src = make_camera(480, 240, 200, small_rotation(rng, 0.1), Vec3(0.4, 0.1, -0.05));
  for (double u : {40.0, 240.0, 420.0}) {
    const double dd = epipolar_depth_interval(ref, src, u, 180, 7.0);
    const double oracle = scan_interval(ref, src, u, 180, 7.0);
    EXPECT_NEAR(dd, oracle, 0.05 * oracle);
  }
}

TEST(EpipolarInterval, DoublingBaselineHalvesInterval) {
  const Camera ref = make_camera(500, 250, 250, Mat3::Identity(), Vec3::Zero());
  const Camera near = make_camera(500, 250, 250, Mat3::Identity(), Vec3(0.2, 0, 0));
  const Camera far = make_camera(500, 250, 250, Mat3::Identity(), Vec3(0.4, 0, 0));
  const double a = epipolar_depth_interval(ref, near, 250, 250, 8.0);
  const double b = epipolar_depth_interval(ref, far, 250, 250, 8.0);
  EXPECT_NEAR(b, a / 2, 0.1 * a / 2);
}

TEST(EpipolarInterval, SlopeMatchesFiniteDifference) {
  std::mt19937_64 rng(4);
  const Camera ref = make_camera(480, 240, 200, small_rotation(rng, 0.1), Vec3::Zero());
  const Camera src = make_camera(480, 240, 200, small_rotation(rng, 0.1), Vec3(0.4, 0.1, -0.05));
  const auto r = epipolar_depth_interval_with_slope(ref, src, 100, 50, 6.0);
  ASSERT_TRUE(r.has_value());
  const double h = 1e-5;
  const double numeric = (epipolar_depth_interval(ref, src, 100, 50, 6.0 + h) -
                          epipolar_depth_interval(ref, src, 100, 50, 6.0 - h)) / (2 * h);
  EXPECT_NEAR(r->second, numeric, 1e-6 * std::max(1.0, std::abs(numeric)));
}

TEST(CameraFile, RoundTrip) {
  std::mt19937_64 rng(5);
  Camera c = make_camera(1234.5678, 640.25, 480.125, small_rotation(rng, 0.5), Vec3(1.5, -2.25, 0.125));
  c.depth_min = 425.0;
  c.depth_max = 935.0;
  const auto path = std::filesystem::temp_directory_path() / "attnmvs_cam_roundtrip.txt";
  write_camera_file(path, c);
  const Camera back = read_camera_file(path);
  EXPECT_LT((back.K - c.K).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LT((back.R - c.R).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LT((back.t - c.t).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_NEAR(back.depth_min, 425.0, 1e-9);
  EXPECT_NEAR(back.depth_max, 935.0, 1e-9);
  std::filesystem::remove(path);
}

TEST(CameraFile, TwoValueDepthLine) {
  const auto path = std::filesystem::temp_directory_path() / "attnmvs_cam_two.txt";
  std::ofstream(path) << "extrinsic\n1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n\nintrinsic\n"
                         "361.54 0 82.9\n0 360.39 66.38\n0 0 1\n\n425 2.5\n";
  const Camera c = read_camera_file(path);
  EXPECT_DOUBLE_EQ(c.depth_min, 425.0);
  EXPECT_DOUBLE_EQ(c.depth_max, 425.0 + 192 * 2.5);
  std::filesystem::remove(path);
}

TEST(CameraFile, MalformedReportsLine) {
  const auto path = std::filesystem::temp_directory_path() / "attnmvs_cam_bad.txt";
  std::ofstream(path) << "extrinsic\n1 0 0 0\n0 1 x 0\n0 0 1 0\n0 0 0 1\n";
  try {
    read_camera_file(path);
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3);
  }
  std::filesystem::remove(path);
}

TEST(CameraFile, MissingFileIsNotFound) {
  EXPECT_THROW(read_camera_file("/nonexistent/dir/cam.txt"), NotFound);
}
