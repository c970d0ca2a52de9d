#pragma once

// Procedural test scenes: value-noise textured surfaces ray cast from cameras on
// an arc around a look-at point, with exact depth for every view.

#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "attnmvs/geometry.hpp"
#include "attnmvs/tensor.hpp"

namespace attnmvs {

enum class SceneGeometry { Plane, Sphere, Steps };

inline SceneGeometry parse_geometry(const std::string& name) {
  if (name == "plane") return SceneGeometry::Plane;
  if (name == "sphere") return SceneGeometry::Sphere;
  if (name == "steps") return SceneGeometry::Steps;
  throw ConfigError("unknown scene geometry '" + name + "' (expected plane, sphere or steps)");
}

inline const char* geometry_name(SceneGeometry g) {
  switch (g) {
    case SceneGeometry::Plane: return "plane";
    case SceneGeometry::Sphere: return "sphere";
    case SceneGeometry::Steps: return "steps";
  }
  return "?";
}

struct SynthConfig {
  std::int64_t height = 96;
  std::int64_t width = 96;
  int views = 3;
  SceneGeometry geometry = SceneGeometry::Steps;
  double arc_step_deg = 10.0;   // angle between neighbouring views around the look-at point
  double look_at_depth = 6.0;   // distance from the reference camera to the arc center
  double plane_depth = 6.0;     // depth of the fronto-parallel plane (plane geometry)
  double background_depth = 7.0;
  double depth_min = 4.0;
  double depth_max = 8.0;
  double focal_scale = 1.0;     // focal length in units of image width
  double texture_cell = 0.25;   // coarsest-but-one noise cell size in scene units
  int supersample = 2;          // rays per pixel along each axis for shading

  void validate() const {
    if (height <= 0 || width <= 0 || height % 16 || width % 16)
      throw ConfigError("synthetic image size must be positive and divisible by 16");
    if (views < 1) throw ConfigError("synthetic scene needs at least one view");
    if (views > 1 && !(std::abs(arc_step_deg) > 1e-6))
      throw ConfigError("degenerate pose arc: arc step must be nonzero for multiple views");
    if (views > 1 && std::abs(arc_step_deg) * (views / 2) >= 80.0)
      throw ConfigError("degenerate pose arc: views would turn away from the scene");
    if (!(look_at_depth > 0.0)) throw ConfigError("degenerate pose arc: look-at depth must be positive");
    if (!(depth_min > 0.0) || !(depth_max > depth_min)) throw ConfigError("synthetic depth range must satisfy 0 < min < max");
    if (!(focal_scale > 0.0) || !(texture_cell > 0.0) || supersample < 1)
      throw ConfigError("synthetic focal scale, texture cell and supersampling must be positive");
  }
};

/// Every view of a rendered scene with its exact depth map; view 0 is the arc center.
template <typename T>
struct SyntheticScene {
  SynthConfig config;
  std::vector<Tensor<T>> images;  // [3,H,W] in [0,1]
  std::vector<Camera> cams;
  std::vector<Tensor<T>> depths;  // [H,W]; 0 where the ray misses every surface
  std::vector<double> arc_angles_deg;

  /// Source views for `ref` ordered by arc distance (ties: lower id first).
  std::vector<int> nearest_views(int ref, int count) const {
    std::vector<int> ids;
    for (int v = 0; v < static_cast<int>(cams.size()); ++v)
      if (v != ref) ids.push_back(v);
    std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) {
      return std::abs(arc_angles_deg[a] - arc_angles_deg[ref]) < std::abs(arc_angles_deg[b] - arc_angles_deg[ref]);
    });
    if (count < static_cast<int>(ids.size())) ids.resize(static_cast<std::size_t>(count));
    return ids;
  }
};

namespace detail {

inline std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 33;
  x *= 0xff51afd7ed558ccdULL;
  x ^= x >> 33;
  x *= 0xc4ceb9fe1a85ec53ULL;
  x ^= x >> 33;
  return x;
}

/// Smooth 3D value noise in [0,1] on an integer lattice.
class ValueNoise {
 public:
  explicit ValueNoise(std::uint64_t seed) : seed_(seed) {}

  double operator()(const Vec3& p) const {
    const double fx = std::floor(p.x()), fy = std::floor(p.y()), fz = std::floor(p.z());
    const auto ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy), iz = static_cast<std::int64_t>(fz);
    const double tx = fade(p.x() - fx), ty = fade(p.y() - fy), tz = fade(p.z() - fz);
    double acc = 0;
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const double w = (dx ? tx : 1 - tx) * (dy ? ty : 1 - ty) * (dz ? tz : 1 - tz);
          acc += w * lattice(ix + dx, iy + dy, iz + dz);
        }
    return acc;
  }

 private:
  static double fade(double t) { return t * t * (3 - 2 * t); }
  double lattice(std::int64_t x, std::int64_t y, std::int64_t z) const {
    std::uint64_t h = seed_;
    h = mix64(h ^ static_cast<std::uint64_t>(x) * 0x9e3779b97f4a7c15ULL);
    h = mix64(h ^ static_cast<std::uint64_t>(y) * 0xbf58476d1ce4e5b9ULL);
    h = mix64(h ^ static_cast<std::uint64_t>(z) * 0x94d049bb133111ebULL);
    return static_cast<double>(h >> 11) * 0x1.0p-53;
  }
  std::uint64_t seed_;
};

struct Ray {
  Vec3 origin, dir;
};

/// Ray parameter of the first surface hit, or nullopt if nothing is hit in front of the origin.
class SceneSurface {
 public:
  explicit SceneSurface(const SynthConfig& cfg) : cfg_(cfg) {}

  std::optional<double> hit(const Ray& r) const {
    switch (cfg_.geometry) {
      case SceneGeometry::Plane: return hit_plane(r, cfg_.plane_depth);
      case SceneGeometry::Sphere: {
        auto best = hit_plane(r, cfg_.background_depth);
        if (auto s = hit_sphere(r); s && (!best || *s < *best)) best = s;
        return best;
      }
      case SceneGeometry::Steps: return hit_steps(r);
    }
    return std::nullopt;
  }

 private:
  static std::optional<double> hit_plane(const Ray& r, double z) {
    if (std::abs(r.dir.z()) < 1e-12) return std::nullopt;
    const double lambda = (z - r.origin.z()) / r.dir.z();
    return lambda > 1e-9 ? std::optional<double>(lambda) : std::nullopt;
  }

  std::optional<double> hit_sphere(const Ray& r) const {
    const Vec3 center(0.0, 0.0, cfg_.background_depth - 1.5);
    const double radius = 1.2;
    const Vec3 oc = r.origin - center;
    const double a = r.dir.squaredNorm(), b = oc.dot(r.dir), c = oc.squaredNorm() - radius * radius;
    const double disc = b * b - a * c;
    if (disc < 0) return std::nullopt;
    const double lambda = (-b - std::sqrt(disc)) / a;
    return lambda > 1e-9 ? std::optional<double>(lambda) : std::nullopt;
  }

  // Terraces facing the cameras: solid wherever z >= level(x), levels
  // piecewise constant over vertical bands in x.
  double step_level(double x) const {
    const double b = cfg_.background_depth;
    if (x < -1.0) return b;
    if (x < -0.2) return b - 1.0;
    if (x < 0.6) return b - 2.0;
    if (x < 1.4) return b - 1.4;
    return b;
  }

  std::optional<double> hit_steps(const Ray& r) const {
    static constexpr std::array<double, 4> edges{-1.0, -0.2, 0.6, 1.4};
    // Walk the bands the ray crosses in order of increasing ray parameter.
    std::vector<double> cuts{0.0};
    if (std::abs(r.dir.x()) > 1e-15)
      for (double e : edges) {
        const double lambda = (e - r.origin.x()) / r.dir.x();
        if (lambda > 0) cuts.push_back(lambda);
      }
    std::sort(cuts.begin(), cuts.end());
    cuts.push_back(std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
      const double a = cuts[i], b = cuts[i + 1];
      const double mid = std::isinf(b) ? a + 1.0 : 0.5 * (a + b);
      const double level = step_level(r.origin.x() + mid * r.dir.x());
      const double za = r.origin.z() + a * r.dir.z();
      if (za >= level && a > 0) return a;  // enters the band already behind its face: wall hit
      if (r.dir.z() > 1e-15) {
        const double lambda = (level - r.origin.z()) / r.dir.z();
        if (lambda >= a && lambda < b && lambda > 1e-9) return lambda;
      }
    }
    return std::nullopt;
  }

  SynthConfig cfg_;
};

inline Mat3 rotation_y(double deg) {
  return Eigen::AngleAxis<double>(deg * std::numbers::pi / 180.0, Vec3::UnitY()).toRotationMatrix();
}

}  // namespace detail

/// Renders `cfg.views` views; view 0 sits at the origin looking down +z, further
/// views alternate +step, -step, +2 step, ... around (0, 0, look_at_depth).
template <typename T>
SyntheticScene<T> generate_synthetic_scene(std::uint64_t seed, const SynthConfig& cfg) {
  cfg.validate();
  SyntheticScene<T> scene;
  scene.config = cfg;
  const Vec3 look_at(0.0, 0.0, cfg.look_at_depth);
  const double f = cfg.focal_scale * static_cast<double>(cfg.width);
  Mat3 K;
  K << f, 0.0, 0.5 * static_cast<double>(cfg.width - 1), 0.0, f, 0.5 * static_cast<double>(cfg.height - 1), 0.0, 0.0, 1.0;

  for (int v = 0; v < cfg.views; ++v) {
    const int k = (v + 1) / 2;
    const double angle = (v % 2 ? 1.0 : -1.0) * k * cfg.arc_step_deg;
    const Mat3 cam_to_world = detail::rotation_y(angle);
    const Vec3 center = look_at - cam_to_world * Vec3(0.0, 0.0, cfg.look_at_depth);
    Camera cam;
    cam.K = K;
    cam.R = cam_to_world.transpose();
    cam.t = -cam.R * center;
    cam.depth_min = cfg.depth_min;
    cam.depth_max = cfg.depth_max;
    scene.cams.push_back(cam);
    scene.arc_angles_deg.push_back(angle);
  }

  const detail::SceneSurface surface(cfg);
  const std::array<detail::ValueNoise, 3> noise{detail::ValueNoise(detail::mix64(seed * 3 + 1)),
                                                detail::ValueNoise(detail::mix64(seed * 3 + 2)),
                                                detail::ValueNoise(detail::mix64(seed * 3 + 3))};
  auto shade = [&](const Vec3& p, int channel) {
    double acc = 0, norm = 0, amp = 1.0, freq = 0.5 / cfg.texture_cell;
    for (int octave = 0; octave < 3; ++octave) {
      acc += amp * noise[static_cast<std::size_t>(channel)](p * freq);
      norm += amp;
      amp *= 0.5;
      freq *= 2.0;
    }
    return std::clamp(0.1 + 0.8 * (acc / norm - 0.5) * 2.2 + 0.4, 0.0, 1.0);
  };

  const std::int64_t h = cfg.height, w = cfg.width;
  const int ss = cfg.supersample;
  for (const auto& cam : scene.cams) {
    const Vec3 origin = cam.center();
    const Mat3 K_inv = cam.K.inverse();
    const Mat3 to_world = cam.R.transpose();
    auto ray_at = [&](double u, double v) {
      return detail::Ray{origin, to_world * (K_inv * Vec3(u, v, 1.0))};
    };
    Tensor<T> image(Shape{3, h, w});
    Tensor<T> depth(Shape{h, w});
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        // Camera-frame depth equals the ray parameter because the ray has unit z in camera coordinates.
        if (auto lambda = surface.hit(ray_at(static_cast<double>(x), static_cast<double>(y))))
          depth.data()[y * w + x] = static_cast<T>(*lambda);
        std::array<double, 3> color{0, 0, 0};
        for (int sy = 0; sy < ss; ++sy)
          for (int sx = 0; sx < ss; ++sx) {
            const double u = static_cast<double>(x) + (sx + 0.5) / ss - 0.5;
            const double v = static_cast<double>(y) + (sy + 0.5) / ss - 0.5;
            const auto ray = ray_at(u, v);
            const auto lambda = surface.hit(ray);
            for (int c = 0; c < 3; ++c) color[static_cast<std::size_t>(c)] += lambda ? shade(ray.origin + *lambda * ray.dir, c) : 0.0;
          }
        for (int c = 0; c < 3; ++c)
          image.data()[(c * h + y) * w + x] = static_cast<T>(color[static_cast<std::size_t>(c)] / (ss * ss));
      }
    scene.images.push_back(std::move(image));
    scene.depths.push_back(std::move(depth));
  }
  return scene;
}

}  // namespace attnmvs
