#pragma once

// Pinhole cameras, pyramid-level intrinsics, fronto-parallel depth planes,
// plane-induced homographies and epipolar depth intervals.

#include <Eigen/Core>
#include <Eigen/LU>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "attnmvs/errors.hpp"

namespace attnmvs {

using Mat3 = Eigen::Matrix3d;
using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;

/// World-to-camera pinhole model: x ~ K (R X + t).
struct Camera {
  Mat3 K = Mat3::Identity();
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();
  double depth_min = 1.0;
  double depth_max = 2.0;

  Vec3 center() const { return -R.transpose() * t; }

  /// Reference principal axis in world coordinates (unit length).
  Vec3 principal_axis() const { return R.row(2).transpose(); }

  /// Pixel (u, v) lifted to the world point at camera-frame depth d.
  Vec3 lift(double u, double v, double d) const {
    const Vec3 ray = K.inverse() * Vec3(u, v, 1.0);
    return R.transpose() * (d / ray.z() * ray - t);
  }

  Vec3 to_camera(const Vec3& world) const { return R * world + t; }

  /// Projects a world point; returns (u, v, depth).
  Vec3 project(const Vec3& world) const {
    const Vec3 h = K * to_camera(world);
    return {h.x() / h.z(), h.y() / h.z(), h.z()};
  }

  void validate() const {
    if ((R * R.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-9)
      throw InvalidArgument("camera rotation is not orthonormal");
    if (std::abs(R.determinant() - 1.0) > 1e-9) throw InvalidArgument("camera rotation has det != +1");
    if (K(2, 2) != 1.0 || K(2, 0) != 0.0 || K(2, 1) != 0.0 || K(1, 0) != 0.0)
      throw InvalidArgument("camera intrinsics must be upper triangular with K[2][2] = 1");
    if (!(depth_min > 0.0)) throw InvalidArgument("camera depth_min must be positive");
    if (!(depth_max > depth_min)) throw InvalidArgument("camera depth_max must exceed depth_min");
  }
};

/// Intrinsics for an image downsampled by 2^level: first two rows divided.
inline Mat3 scale_intrinsics(const Mat3& K, int level) {
  if (level < 0) throw InvalidArgument("scale_intrinsics: level must be >= 0");
  Mat3 out = K;
  const double factor = std::ldexp(1.0, -level);
  out.row(0) *= factor;
  out.row(1) *= factor;
  return out;
}

inline Camera scale_camera(const Camera& cam, int level) {
  Camera out = cam;
  out.K = scale_intrinsics(cam.K, level);
  return out;
}

struct DepthPlanes {
  std::vector<double> depths;
  int level = 0;
};

/// M fronto-parallel planes d_m = d_min + m (d_max - d_min) / M, m = 0..M-1.
inline DepthPlanes sample_depth_planes(double d_min, double d_max, int count, int level = 0) {
  if (count < 1) throw InvalidArgument("sample_depth_planes: plane count must be >= 1");
  if (!(d_min > 0.0) || !(d_max > d_min)) throw InvalidArgument("sample_depth_planes: need 0 < d_min < d_max");
  DepthPlanes planes;
  planes.level = level;
  planes.depths.resize(static_cast<std::size_t>(count));
  const double step = (d_max - d_min) / count;
  for (int m = 0; m < count; ++m) planes.depths[static_cast<std::size_t>(m)] = d_min + m * step;
  return planes;
}

/// Homography taking reference pixels to source pixels for points on the
/// fronto-parallel reference plane at depth d. Normalized so H[2][2] = 1.
inline Mat3 plane_homography(const Camera& ref, const Camera& src, double d) {
  if (!(d > 0.0)) throw InvalidArgument("plane_homography: depth must be positive");
  const Vec3 baseline = ref.center() - src.center();
  const Vec3 normal = ref.principal_axis();
  Mat3 H = src.K * src.R * (Mat3::Identity() + baseline * normal.transpose() / d) * ref.R.transpose() *
           ref.K.inverse();
  if (std::abs(H(2, 2)) > 1e-300) H /= H(2, 2);
  return H;
}

inline Vec2 apply_homography(const Mat3& H, double u, double v) {
  const Vec3 h = H * Vec3(u, v, 1.0);
  return {h.x() / h.z(), h.y() / h.z()};
}

namespace detail {

// Forward-mode dual number; carries d/d(depth).
struct Dual {
  double v = 0, d = 0;
  Dual() = default;
  Dual(double value, double deriv = 0) : v(value), d(deriv) {}
  friend Dual operator+(Dual a, Dual b) { return {a.v + b.v, a.d + b.d}; }
  friend Dual operator-(Dual a, Dual b) { return {a.v - b.v, a.d - b.d}; }
  friend Dual operator*(Dual a, Dual b) { return {a.v * b.v, a.d * b.v + a.v * b.d}; }
  friend Dual operator/(Dual a, Dual b) { return {a.v / b.v, (a.d * b.v - a.v * b.d) / (b.v * b.v)}; }
};
inline Dual sqrt(Dual a) {
  const double s = std::sqrt(a.v);
  return {s, a.d / (2.0 * s)};
}
inline Dual abs(Dual a) { return a.v < 0 ? Dual{-a.v, -a.d} : a; }
inline double value_of(double x) { return x; }
inline double value_of(Dual x) { return x.v; }

// Source-image trajectory of the reference ray through one pixel:
// homogeneous P(d) = offset + d * direction.
struct RayTrajectory {
  Vec3 offset;
  Vec3 direction;
};

inline RayTrajectory ray_trajectory(const Camera& ref, const Camera& src, double u, double v) {
  const Vec3 ray = ref.K.inverse() * Vec3(u, v, 1.0);
  const Vec3 ray_cam = ray / ray.z();
  return {src.K * src.to_camera(ref.center()), src.K * src.R * ref.R.transpose() * ray_cam};
}

// Depth step that moves the source projection by one pixel along the epipolar
// line in the direction of increasing depth. Empty if the pixel has no usable
// epipolar direction (behind the source camera or a stationary projection).
template <typename S>
std::optional<S> epipolar_step(const RayTrajectory& tr, S d) {
  using std::abs;
  using std::sqrt;
  const S pz = S(tr.offset.z()) + d * S(tr.direction.z());
  if (!(value_of(pz) > 0.0)) return std::nullopt;
  const S px = S(tr.offset.x()) + d * S(tr.direction.x());
  const S py = S(tr.offset.y()) + d * S(tr.direction.y());
  const S x = px / pz, y = py / pz;
  const S gx = (S(tr.direction.x()) * pz - px * S(tr.direction.z())) / (pz * pz);
  const S gy = (S(tr.direction.y()) * pz - py * S(tr.direction.z())) / (pz * pz);
  const S norm = sqrt(gx * gx + gy * gy);
  const double scale = std::abs(value_of(x)) + std::abs(value_of(y)) + 1.0;
  if (!(value_of(norm) * value_of(d) > 1e-12 * scale)) return std::nullopt;
  // One pixel further along the (straight) epipolar line.
  const S sx = x + gx / norm, sy = y + gy / norm;
  // Triangulate: offset + d' direction ~ (sx, sy, 1); exact because (sx, sy) is on the line.
  const S ax = S(tr.direction.x()) - sx * S(tr.direction.z());
  const S ay = S(tr.direction.y()) - sy * S(tr.direction.z());
  const S bx = sx * S(tr.offset.z()) - S(tr.offset.x());
  const S by = sy * S(tr.offset.z()) - S(tr.offset.y());
  const S denom = ax * ax + ay * ay;
  if (!(value_of(denom) > 0.0)) return std::nullopt;
  const S stepped = (ax * bx + ay * by) / denom;
  return abs(stepped - d);
}

inline bool zero_baseline(const Camera& ref, const Camera& src) {
  const double extent = ref.center().norm() + src.center().norm() + 1.0;
  return (ref.center() - src.center()).norm() <= 1e-12 * extent;
}

}  // namespace detail

/// Depth change that displaces the source projection by one pixel along the
/// epipolar line. Throws DegenerateGeometry when no epipolar direction exists.
inline double epipolar_depth_interval(const Camera& ref, const Camera& src, double u, double v, double d) {
  if (detail::zero_baseline(ref, src))
    throw DegenerateGeometry("epipolar_depth_interval: reference and source share a camera center");
  const auto step = detail::epipolar_step(detail::ray_trajectory(ref, src, u, v), d);
  if (!step) throw DegenerateGeometry("epipolar_depth_interval: no epipolar direction at this pixel");
  return *step;
}

/// Same as epipolar_depth_interval, plus its derivative with respect to d.
inline std::optional<std::pair<double, double>> epipolar_depth_interval_with_slope(const Camera& ref,
                                                                                 const Camera& src, double u,
                                                                                 double v, double d) {
  const auto step = detail::epipolar_step(detail::ray_trajectory(ref, src, u, v), detail::Dual(d, 1.0));
  if (!step) return std::nullopt;
  return std::make_pair(step->v, step->d);
}

// ---------------------------------------------------------------------------
// Camera text files: extrinsic 4x4, intrinsic 3x3, then depth range line.

inline constexpr int kDefaultCameraPlaneCount = 192;

inline Camera read_camera_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFound("camera file not found: " + path.string());
  const std::string source = path.string();

  std::vector<std::pair<int, std::vector<std::string>>> lines;
  std::string line;
  for (int number = 1; std::getline(in, line); ++number) {
    std::istringstream ss(line);
    std::vector<std::string> tokens;
    for (std::string tok; ss >> tok;) tokens.push_back(tok);
    if (!tokens.empty()) lines.emplace_back(number, std::move(tokens));
  }
  std::size_t cursor = 0;
  auto next = [&](const char* what) -> const std::pair<int, std::vector<std::string>>& {
    if (cursor >= lines.size()) throw ParseError(source, static_cast<int>(lines.empty() ? 0 : lines.back().first + 1),
                                                 std::string("unexpected end of file, expected ") + what);
    return lines[cursor++];
  };
  auto number_at = [&](const std::pair<int, std::vector<std::string>>& l, std::size_t i) {
    try {
      std::size_t used = 0;
      double value = std::stod(l.second.at(i), &used);
      if (used != l.second[i].size()) throw std::invalid_argument("trailing characters");
      return value;
    } catch (const std::exception&) {
      throw ParseError(source, l.first, "expected a number, got '" + l.second.at(i) + "'");
    }
  };
  auto keyword = [&](const char* word) {
    const auto& l = next(word);
    if (l.second.size() != 1 || l.second[0] != word)
      throw ParseError(source, l.first, std::string("expected '") + word + "'");
  };
  auto row = [&](std::size_t count, const char* what) {
    const auto& l = next(what);
    if (l.second.size() != count)
      throw ParseError(source, l.first, std::string("expected ") + std::to_string(count) + " values in " + what);
    std::vector<double> values;
    for (std::size_t i = 0; i < count; ++i) values.push_back(number_at(l, i));
    return values;
  };

  Camera cam;
  keyword("extrinsic");
  for (int r = 0; r < 3; ++r) {
    const auto values = row(4, "extrinsic row");
    for (int c = 0; c < 3; ++c) cam.R(r, c) = values[static_cast<std::size_t>(c)];
    cam.t(r) = values[3];
  }
  row(4, "extrinsic row");
  keyword("intrinsic");
  for (int r = 0; r < 3; ++r) {
    const auto values = row(3, "intrinsic row");
    for (int c = 0; c < 3; ++c) cam.K(r, c) = values[static_cast<std::size_t>(c)];
  }
  const auto& depth_line = next("depth range");
  const std::size_t n = depth_line.second.size();
  if (n != 2 && n != 4 && n != 3)
    throw ParseError(source, depth_line.first, "expected 'd_min d_interval [n_planes [d_max]]'");
  cam.depth_min = number_at(depth_line, 0);
  const double interval = number_at(depth_line, 1);
  if (n == 4) {
    cam.depth_max = number_at(depth_line, 3);
  } else {
    const double planes = n == 3 ? number_at(depth_line, 2) : kDefaultCameraPlaneCount;
    cam.depth_max = cam.depth_min + interval * planes;
  }
  try {
    cam.validate();
  } catch (const InvalidArgument& e) {
    throw ParseError(source, depth_line.first, e.what());
  }
  return cam;
}

inline void write_camera_file(const std::filesystem::path& path, const Camera& cam,
                              int plane_count = kDefaultCameraPlaneCount) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write camera file: " + path.string());
  out << std::setprecision(17);
  out << "extrinsic\n";
  for (int r = 0; r < 3; ++r)
    out << cam.R(r, 0) << ' ' << cam.R(r, 1) << ' ' << cam.R(r, 2) << ' ' << cam.t(r) << '\n';
  out << "0 0 0 1\n\nintrinsic\n";
  for (int r = 0; r < 3; ++r) out << cam.K(r, 0) << ' ' << cam.K(r, 1) << ' ' << cam.K(r, 2) << '\n';
  out << '\n'
      << cam.depth_min << ' ' << (cam.depth_max - cam.depth_min) / plane_count << ' ' << plane_count << ' '
      << cam.depth_max << '\n';
  if (!out) throw IoError("failed writing camera file: " + path.string());
}

}  // namespace attnmvs
