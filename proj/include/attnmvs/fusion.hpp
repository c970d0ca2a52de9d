#pragma once

// Depth-map filtering (probability and cross-view consistency), point fusion and PLY export.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "attnmvs/costvol.hpp"
#include "attnmvs/geometry.hpp"

namespace attnmvs {

struct FusionConfig {
  double prob_threshold = 0.8;
  double reproj_px_threshold = 1.0;
  double rel_depth_threshold = 0.01;
  int min_consistent_views = 3;  // counts the reference view itself

  void validate() const {
    if (!(prob_threshold >= 0.0) || !(reproj_px_threshold >= 0.0) || !(rel_depth_threshold >= 0.0))
      throw ConfigError("fusion thresholds must be non-negative");
    if (min_consistent_views < 1) throw ConfigError("min_consistent_views must be >= 1");
  }
};

struct FusedPoint {
  Vec3 position;
  std::array<std::uint8_t, 3> color{0, 0, 0};
  int support = 0;   // consistent views including the view the point came from
  int view = 0;      // index of the originating view in the fused inputs
  int u = 0, v = 0;  // originating pixel
};

struct PointCloud {
  std::vector<FusedPoint> points;
  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

using Mask = std::vector<std::uint8_t>;

/// Probability of the hypothesis nearest to the regressed depth, per pixel.
template <typename T>
Tensor<T> confidence_map(const Tensor<T>& depth, const Tensor<T>& prob, const Hypotheses<T>& hyp) {
  detail::require(prob.rank() == 3 && depth.rank() == 2 && prob.dim(1) == depth.dim(0) && prob.dim(2) == depth.dim(1),
                  "confidence_map: probability volume " + shape_str(prob.shape()) + " does not match depth " +
                      shape_str(depth.shape()));
  detail::require(prob.dim(0) == hyp.count(), "confidence_map: plane count mismatch");
  const std::int64_t planes = prob.dim(0), hw = depth.dim(0) * depth.dim(1);
  Tensor<T> out(depth.shape());
  for (std::int64_t p = 0; p < hw; ++p) {
    const double d = static_cast<double>(depth[static_cast<std::size_t>(p)]);
    std::int64_t best = 0;
    double best_gap = std::abs(hyp.depth(0, p) - d);
    for (std::int64_t m = 1; m < planes; ++m) {
      const double gap = std::abs(hyp.depth(m, p) - d);
      if (gap < best_gap) {
        best_gap = gap;
        best = m;
      }
    }
    out.data()[p] = prob[static_cast<std::size_t>(best * hw + p)];
  }
  return out;
}

/// Keeps pixels whose confidence reaches prob_threshold.
template <typename T>
Mask photometric_filter(const Tensor<T>& confidence, const FusionConfig& cfg) {
  Mask mask(confidence.numel());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = static_cast<double>(confidence[i]) >= cfg.prob_threshold;
  return mask;
}

template <typename T>
Mask photometric_filter(const Tensor<T>& depth, const Tensor<T>& prob, const Hypotheses<T>& hyp,
                        const FusionConfig& cfg) {
  return photometric_filter(confidence_map(depth, prob, hyp), cfg);
}

namespace detail {

/// Bilinear depth lookup that refuses to blend across invalid (<= 0) samples.
template <typename T>
std::optional<double> sample_depth(const Tensor<T>& depth, double u, double v) {
  const std::int64_t h = depth.dim(0), w = depth.dim(1);
  if (!(u >= 0.0 && v >= 0.0 && u <= static_cast<double>(w - 1) && v <= static_cast<double>(h - 1))) return std::nullopt;
  const auto x0 = std::min(static_cast<std::int64_t>(u), w - 1), y0 = std::min(static_cast<std::int64_t>(v), h - 1);
  const auto x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  const double fx = u - static_cast<double>(x0), fy = v - static_cast<double>(y0);
  const double taps[4] = {static_cast<double>(depth[static_cast<std::size_t>(y0 * w + x0)]),
                          static_cast<double>(depth[static_cast<std::size_t>(y0 * w + x1)]),
                          static_cast<double>(depth[static_cast<std::size_t>(y1 * w + x0)]),
                          static_cast<double>(depth[static_cast<std::size_t>(y1 * w + x1)])};
  const double weights[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
  double acc = 0;
  for (int k = 0; k < 4; ++k) {
    if (weights[k] == 0.0) continue;
    if (!(taps[k] > 0.0) || !std::isfinite(taps[k])) return std::nullopt;
    acc += weights[k] * taps[k];
  }
  return acc;
}

struct Support {
  bool ok = false;
  Vec3 point;  // the source view's own estimate of the surface point
};

inline bool within(double value, double threshold) { return threshold > 0.0 && value <= threshold; }

/// Round trip p -> view j -> back to the reference; see geometric_filter.
template <typename T>
Support check_support(const Camera& ref, const Camera& src, const Tensor<T>& src_depth, double u, double v, double d,
                      const FusionConfig& cfg) {
  const Vec3 X = ref.lift(u, v, d);
  const Vec3 pj = src.project(X);
  if (!(pj.z() > 0.0)) return {};
  const auto dj = sample_depth(src_depth, pj.x(), pj.y());
  if (!dj) return {};
  const Vec3 Xj = src.lift(pj.x(), pj.y(), *dj);
  const Vec3 back = ref.project(Xj);
  if (!(back.z() > 0.0)) return {};
  const double reproj = std::hypot(back.x() - u, back.y() - v);
  const double rel = std::abs(back.z() - d) / d;
  if (!within(reproj, cfg.reproj_px_threshold) || !within(rel, cfg.rel_depth_threshold)) return {};
  return {true, Xj};
}

}  // namespace detail

struct GeometricResult {
  std::vector<Mask> masks;
  std::vector<std::vector<int>> support;  // per view, per pixel: consistent views including itself
  int degenerate_pairs = 0;
};

/// Pixel p of view r with depth d is supported by view j when p -> j -> r lands
/// within reproj_px_threshold of p with relative depth change <= rel_depth_threshold.
/// The count includes view r itself; kept iff count >= min_consistent_views.
/// Depths <= 0 are treated as missing.
template <typename T>
GeometricResult geometric_filter(const std::vector<Tensor<T>>& depths, const std::vector<Camera>& cams,
                                 const FusionConfig& cfg) {
  cfg.validate();
  if (depths.empty()) throw EmptyInput("geometric_filter: no views");
  if (cams.size() != depths.size()) throw ShapeError("geometric_filter: one camera per depth map required");
  GeometricResult out;
  for (std::size_t r = 0; r < depths.size(); ++r) {
    const auto& D = depths[r];
    const std::int64_t h = D.dim(0), w = D.dim(1);
    Mask mask(D.numel(), 0);
    std::vector<int> counts(D.numel(), 0);
    for (std::size_t j = 0; j < depths.size(); ++j) {
      if (j == r) continue;
      if (detail::zero_baseline(cams[r], cams[j])) {
        ++out.degenerate_pairs;
        continue;
      }
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
          const double d = static_cast<double>(D[static_cast<std::size_t>(y * w + x)]);
          if (!(d > 0.0)) continue;
          if (detail::check_support(cams[r], cams[j], depths[j], static_cast<double>(x), static_cast<double>(y), d, cfg).ok)
            ++counts[static_cast<std::size_t>(y * w + x)];
        }
    }
    for (std::size_t p = 0; p < counts.size(); ++p) {
      if (!(static_cast<double>(D[p]) > 0.0)) continue;
      counts[p] += 1;
      mask[p] = counts[p] >= cfg.min_consistent_views;
    }
    out.masks.push_back(std::move(mask));
    out.support.push_back(std::move(counts));
  }
  return out;
}

struct FusionStats {
  std::size_t pixels = 0;
  std::size_t photometric_kept = 0;
  std::size_t geometric_kept = 0;
  std::size_t fused = 0;
  int degenerate_pairs = 0;
};

/// Filters every view and back-projects surviving pixels; each point is the mean
/// of its own back-projection and those of the views supporting it. Colors come
/// from the originating view. Views are processed in input order.
template <typename T>
PointCloud fuse(const std::vector<Tensor<T>>& depths, const std::vector<Tensor<T>>& confidences,
                const std::vector<Tensor<T>>& images, const std::vector<Camera>& cams, const FusionConfig& cfg,
                FusionStats* stats = nullptr) {
  cfg.validate();
  const std::size_t n = depths.size();
  if (confidences.size() != n || images.size() != n || cams.size() != n)
    throw ShapeError("fuse: depths, confidences, images and cameras must align per view");
  // Photometrically rejected pixels are removed before the consistency check.
  std::vector<Tensor<T>> filtered;
  FusionStats local;
  for (std::size_t r = 0; r < n; ++r) {
    detail::require(confidences[r].shape() == depths[r].shape(), "fuse: confidence map does not match depth map");
    detail::require(images[r].rank() == 3 && images[r].dim(1) == depths[r].dim(0) && images[r].dim(2) == depths[r].dim(1),
                    "fuse: image does not match depth map");
    const auto keep = photometric_filter(confidences[r], cfg);
    Tensor<T> d = depths[r].detach();
    for (std::size_t p = 0; p < keep.size(); ++p) {
      local.pixels += 1;
      if (keep[p] && static_cast<double>(d[p]) > 0.0)
        ++local.photometric_kept;
      else
        d.data()[p] = T(0);
    }
    filtered.push_back(std::move(d));
  }
  const auto geo = geometric_filter(filtered, cams, cfg);
  local.degenerate_pairs = geo.degenerate_pairs;

  PointCloud cloud;
  for (std::size_t r = 0; r < n; ++r) {
    const auto& D = filtered[r];
    const std::int64_t h = D.dim(0), w = D.dim(1);
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const auto p = static_cast<std::size_t>(y * w + x);
        if (!geo.masks[r][p]) continue;
        ++local.geometric_kept;
        const double d = static_cast<double>(D[p]);
        Vec3 sum = cams[r].lift(static_cast<double>(x), static_cast<double>(y), d);
        int count = 1;
        for (std::size_t j = 0; j < n; ++j) {
          if (j == r || detail::zero_baseline(cams[r], cams[j])) continue;
          const auto s = detail::check_support(cams[r], cams[j], filtered[j], static_cast<double>(x),
                                               static_cast<double>(y), d, cfg);
          if (!s.ok) continue;
          sum += s.point;
          ++count;
        }
        FusedPoint pt;
        pt.position = sum / static_cast<double>(count);
        pt.support = count;
        pt.view = static_cast<int>(r);
        pt.u = static_cast<int>(x);
        pt.v = static_cast<int>(y);
        for (int c = 0; c < 3; ++c) {
          const double value = static_cast<double>(images[r][static_cast<std::size_t>((c * h + y) * w + x)]);
          pt.color[static_cast<std::size_t>(c)] = static_cast<std::uint8_t>(std::lround(std::clamp(value, 0.0, 1.0) * 255.0));
        }
        cloud.points.push_back(pt);
      }
  }
  local.fused = cloud.size();
  if (stats) *stats = local;
  return cloud;
}

// ---------------------------------------------------------------------------
// PLY: binary little-endian, vertex {float x, y, z; uchar red, green, blue}.

inline std::string ply_header(std::size_t count) {
  std::ostringstream h;
  h << "ply\nformat binary_little_endian 1.0\nelement vertex " << count
    << "\nproperty float x\nproperty float y\nproperty float z\n"
       "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
  return h.str();
}

inline void export_ply(const PointCloud& cloud, const std::filesystem::path& path) {
  std::string buf = ply_header(cloud.size());
  const std::size_t header = buf.size();
  buf.resize(header + cloud.size() * 15);
  char* out = buf.data() + header;
  for (const auto& p : cloud.points) {
    for (int k = 0; k < 3; ++k) {
      const auto f = static_cast<float>(p.position[k]);
      std::memcpy(out, &f, 4);  // little-endian hosts only
      out += 4;
    }
    for (int c = 0; c < 3; ++c) *out++ = static_cast<char>(p.color[static_cast<std::size_t>(c)]);
  }
  std::ofstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open for writing: " + path.string());
  file.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!file) throw IoError("write failed: " + path.string());
}

/// Reads files written by export_ply (and other binary little-endian xyz[rgb] float PLYs).
inline PointCloud load_ply(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw NotFound("PLY file not found: " + path.string());
  std::ifstream in(path, std::ios::binary);
  std::string line;
  int line_no = 0;
  std::size_t count = 0;
  bool binary_le = false, in_vertex = false;
  std::vector<std::string> props;
  std::vector<std::string> types;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1 && line != "ply") throw ParseError(path.string(), 1, "missing 'ply' magic");
    std::istringstream is(line);
    std::string word;
    is >> word;
    if (word == "format") {
      std::string fmt;
      is >> fmt;
      binary_le = fmt == "binary_little_endian";
    } else if (word == "element") {
      std::string name;
      is >> name;
      in_vertex = name == "vertex";
      if (in_vertex && !(is >> count)) throw ParseError(path.string(), line_no, "bad vertex count");
    } else if (word == "property" && in_vertex) {
      std::string type, name;
      is >> type >> name;
      types.push_back(type);
      props.push_back(name);
    } else if (word == "end_header") {
      break;
    }
  }
  if (!binary_le) throw ParseError(path.string(), line_no, "only binary_little_endian PLY is supported");
  std::size_t stride = 0;
  std::vector<std::size_t> offsets;
  for (const auto& t : types) {
    offsets.push_back(stride);
    if (t == "float" || t == "float32") stride += 4;
    else if (t == "uchar" || t == "uint8") stride += 1;
    else if (t == "double" || t == "float64") stride += 8;
    else throw ParseError(path.string(), line_no, "unsupported property type " + t);
  }
  auto find = [&](const char* name) -> int {
    for (std::size_t i = 0; i < props.size(); ++i)
      if (props[i] == name) return static_cast<int>(i);
    return -1;
  };
  const int ix = find("x"), iy = find("y"), iz = find("z");
  if (ix < 0 || iy < 0 || iz < 0) throw ParseError(path.string(), line_no, "vertex lacks x/y/z");
  const int colors[3] = {find("red"), find("green"), find("blue")};
  std::vector<char> raw(count * stride);
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size()) throw ParseError(path.string(), line_no, "truncated vertex data");
  auto read_value = [&](const char* base, int prop) -> double {
    const char* at = base + offsets[static_cast<std::size_t>(prop)];
    const auto& t = types[static_cast<std::size_t>(prop)];
    if (t == "float" || t == "float32") {
      float f;
      std::memcpy(&f, at, 4);
      return f;
    }
    if (t == "double" || t == "float64") {
      double f;
      std::memcpy(&f, at, 8);
      return f;
    }
    return static_cast<unsigned char>(*at);
  };
  PointCloud cloud;
  cloud.points.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const char* base = raw.data() + i * stride;
    auto& p = cloud.points[i];
    p.position = Vec3(read_value(base, ix), read_value(base, iy), read_value(base, iz));
    for (int c = 0; c < 3; ++c)
      if (colors[c] >= 0) p.color[static_cast<std::size_t>(c)] = static_cast<std::uint8_t>(read_value(base, colors[c]));
  }
  return cloud;
}

}  // namespace attnmvs
