#pragma once

// Plane-sweep warping of source features and cost-volume aggregation by
// average group-wise correlation, plus the variance-based baseline.

#include <string>
#include <vector>

#include "attnmvs/geometry.hpp"
#include "attnmvs/ops.hpp"

namespace attnmvs {

/// Depth hypotheses for one pyramid level: either global planes shared by all
/// pixels or a per-pixel stack [M', H, W].
template <typename T>
struct Hypotheses {
  std::vector<double> planes;
  Tensor<T> per_pixel;
  int level = 0;

  bool is_global() const { return !per_pixel.defined(); }
  std::int64_t count() const {
    return is_global() ? static_cast<std::int64_t>(planes.size()) : per_pixel.dim(0);
  }

  static Hypotheses global(const DepthPlanes& p) { return {p.depths, {}, p.level}; }
  static Hypotheses pixelwise(Tensor<T> stack, int level) { return {{}, std::move(stack), level}; }

  /// Depth of hypothesis m at pixel index p.
  double depth(std::int64_t m, std::int64_t p) const {
    if (is_global()) return planes[static_cast<std::size_t>(m)];
    const std::int64_t plane = per_pixel.dim(1) * per_pixel.dim(2);
    return static_cast<double>(per_pixel[static_cast<std::size_t>(m * plane + p)]);
  }
};

template <typename T>
struct CostVolume {
  Tensor<T> values;  // [G, M', H, W]
  int level = 0;
  Hypotheses<T> hypotheses;
};

/// Sampling grid [H,W,2] obtained by mapping every reference pixel through H.
template <typename T>
Tensor<T> homography_coords(const Mat3& H, std::int64_t height, std::int64_t width) {
  Tensor<T> coords(Shape{height, width, 2});
  T* c = coords.data();
  for (std::int64_t y = 0; y < height; ++y)
    for (std::int64_t x = 0; x < width; ++x) {
      const Vec3 h = H * Vec3(static_cast<double>(x), static_cast<double>(y), 1.0);
      const std::int64_t p = y * width + x;
      if (h.z() > 0) {
        c[2 * p] = static_cast<T>(h.x() / h.z());
        c[2 * p + 1] = static_cast<T>(h.y() / h.z());
      } else {
        c[2 * p] = c[2 * p + 1] = T(-2);
      }
    }
  return coords;
}

/// Lifts every reference pixel at its own depth and projects it into src.
/// Differentiable with respect to the depth map [H,W].
template <typename T>
Tensor<T> project_coords(const Tensor<T>& depth, const Camera& ref, const Camera& src) {
  detail::require(depth.rank() == 2, "project_coords: depth must be [H,W]");
  const std::int64_t height = depth.dim(0), width = depth.dim(1), n = height * width;
  Tensor<T> coords(Shape{height, width, 2});
  std::vector<T> du(static_cast<std::size_t>(n)), dv(static_cast<std::size_t>(n));
  const Mat3 Kinv = ref.K.inverse();
  const Vec3 offset = src.K * src.to_camera(ref.center());
  const Mat3 M = src.K * src.R * ref.R.transpose() * Kinv;
  T* c = coords.data();
  for (std::int64_t y = 0; y < height; ++y)
    for (std::int64_t x = 0; x < width; ++x) {
      const std::int64_t p = y * width + x;
      const Vec3 dir = M * Vec3(static_cast<double>(x), static_cast<double>(y), 1.0);
      const double d = static_cast<double>(depth[static_cast<std::size_t>(p)]);
      const Vec3 h = offset + d * dir;
      if (h.z() > 0) {
        c[2 * p] = static_cast<T>(h.x() / h.z());
        c[2 * p + 1] = static_cast<T>(h.y() / h.z());
        du[static_cast<std::size_t>(p)] = static_cast<T>((dir.x() * h.z() - h.x() * dir.z()) / (h.z() * h.z()));
        dv[static_cast<std::size_t>(p)] = static_cast<T>((dir.y() * h.z() - h.y() * dir.z()) / (h.z() * h.z()));
      } else {
        c[2 * p] = c[2 * p + 1] = T(-2);
      }
    }
  Tape<T>* tape = detail::recording_tape<T>(depth);
  detail::finish(coords, tape, "project_coords", [depth, coords, du = std::move(du), dv = std::move(dv)]() mutable {
    if (!coords.has_grad()) return;
    const T* g = coords.grad().data();
    auto& dd = depth.node()->grad_buffer();
    for (std::size_t p = 0; p < dd.size(); ++p) dd[p] += g[2 * p] * du[p] + g[2 * p + 1] * dv[p];
  });
  return coords;
}

/// Source features resampled onto the reference grid at a global plane depth.
template <typename T>
Tensor<T> warp_feature(const Tensor<T>& f_src, const Camera& ref, const Camera& src, double depth) {
  detail::require(f_src.rank() == 3, "warp_feature: features must be [C,H,W]");
  const Mat3 H = plane_homography(ref, src, depth);
  return grid_sample_bilinear(f_src, homography_coords<T>(H, f_src.dim(1), f_src.dim(2)));
}

/// Source features resampled onto the reference grid at per-pixel depths [H,W].
template <typename T>
Tensor<T> warp_feature(const Tensor<T>& f_src, const Camera& ref, const Camera& src, const Tensor<T>& depth) {
  detail::require(f_src.rank() == 3, "warp_feature: features must be [C,H,W]");
  detail::require(depth.rank() == 2 && depth.dim(0) == f_src.dim(1) && depth.dim(1) == f_src.dim(2),
                  "warp_feature: depth map " + shape_str(depth.shape()) + " does not match features " +
                      shape_str(f_src.shape()));
  return grid_sample_bilinear(f_src, project_coords(depth, ref, src));
}

/// S_g = <f_ref^g, f_warp^g> / (Ch/G) over contiguous channel groups; [G,H,W].
template <typename T>
Tensor<T> groupwise_correlation(const Tensor<T>& f_ref, const Tensor<T>& f_warp, int groups) {
  detail::require(f_ref.rank() == 3 && f_ref.shape() == f_warp.shape(),
                  "groupwise_correlation: feature shapes differ: " + shape_str(f_ref.shape()) + " vs " +
                      shape_str(f_warp.shape()));
  const std::int64_t channels = f_ref.dim(0);
  if (groups < 1 || channels % groups)
    throw ConfigError("groupwise_correlation: " + std::to_string(groups) + " groups do not divide " +
                      std::to_string(channels) + " channels");
  const std::int64_t gs = channels / groups, hw = f_ref.dim(1) * f_ref.dim(2);
  const T norm = T(1) / static_cast<T>(gs);
  Tensor<T> out(Shape{groups, f_ref.dim(1), f_ref.dim(2)});
  const T* a = f_ref.data();
  const T* b = f_warp.data();
  T* o = out.data();
  for (std::int64_t g = 0; g < groups; ++g)
    for (std::int64_t c = g * gs; c < (g + 1) * gs; ++c)
      for (std::int64_t p = 0; p < hw; ++p) o[g * hw + p] += a[c * hw + p] * b[c * hw + p];
  for (std::size_t i = 0; i < out.numel(); ++i) o[i] *= norm;

  Tape<T>* tape = detail::recording_tape<T>(f_ref, f_warp);
  detail::finish(out, tape, "groupwise_correlation", [f_ref, f_warp, out, groups, gs, hw, norm]() mutable {
    if (!out.has_grad()) return;
    const T* g = out.grad().data();
    const T* a = f_ref.data();
    const T* b = f_warp.data();
    T* da = f_ref.requires_grad() ? f_ref.node()->grad_buffer().data() : nullptr;
    T* db = f_warp.requires_grad() ? f_warp.node()->grad_buffer().data() : nullptr;
    for (std::int64_t grp = 0; grp < groups; ++grp)
      for (std::int64_t c = grp * gs; c < (grp + 1) * gs; ++c)
        for (std::int64_t p = 0; p < hw; ++p) {
          const T gp = g[grp * hw + p] * norm;
          if (da) da[c * hw + p] += gp * b[c * hw + p];
          if (db) db[c * hw + p] += gp * a[c * hw + p];
        }
  });
  return out;
}

/// Stacks M tensors [C,H,W] into [C,M,H,W].
template <typename T>
Tensor<T> stack_planes(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw InvalidArgument("stack_planes: empty input list");
  const Shape& s = xs.front().shape();
  detail::require(s.size() == 3, "stack_planes: inputs must be [C,H,W]");
  for (const auto& x : xs) detail::require(x.shape() == s, "stack_planes: shape mismatch");
  const std::int64_t channels = s[0], hw = s[1] * s[2], planes = static_cast<std::int64_t>(xs.size());
  Tensor<T> out(Shape{channels, planes, s[1], s[2]});
  for (std::int64_t m = 0; m < planes; ++m)
    for (std::int64_t c = 0; c < channels; ++c)
      std::copy(xs[static_cast<std::size_t>(m)].data() + c * hw, xs[static_cast<std::size_t>(m)].data() + (c + 1) * hw,
                out.data() + (c * planes + m) * hw);
  Tape<T>* tape = nullptr;
  for (const auto& x : xs)
    if (!tape) tape = detail::recording_tape<T>(x);
  detail::finish(out, tape, "stack_planes", [xs, out, channels, hw, planes]() mutable {
    if (!out.has_grad()) return;
    const T* g = out.grad().data();
    for (std::int64_t m = 0; m < planes; ++m) {
      auto& x = xs[static_cast<std::size_t>(m)];
      if (!x.requires_grad()) continue;
      auto& d = x.node()->grad_buffer();
      for (std::int64_t c = 0; c < channels; ++c)
        for (std::int64_t p = 0; p < hw; ++p) d[static_cast<std::size_t>(c * hw + p)] += g[(c * planes + m) * hw + p];
    }
  });
  return out;
}

namespace detail {

template <typename T>
Tensor<T> hypothesis_slice(const Hypotheses<T>& hyp, std::int64_t m) {
  const auto& stack = hyp.per_pixel;
  return reshape(slice0(stack, m, m + 1), Shape{stack.dim(1), stack.dim(2)});
}

template <typename T>
Tensor<T> warp_to_hypothesis(const Tensor<T>& f_src, const Camera& ref, const Camera& src, const Hypotheses<T>& hyp,
                             std::int64_t m, const Tensor<T>& plane_depth) {
  if (hyp.is_global()) return warp_feature(f_src, ref, src, hyp.planes[static_cast<std::size_t>(m)]);
  return warp_feature(f_src, ref, src, plane_depth);
}

template <typename T>
void check_views(const std::vector<Tensor<T>>& features, const std::vector<Camera>& cams, const Hypotheses<T>& hyp) {
  if (features.size() < 2) throw InsufficientViews("cost volume needs a reference and at least one source view");
  if (cams.size() != features.size()) throw ShapeError("cost volume: one camera per feature map required");
  for (const auto& f : features)
    require(f.shape() == features.front().shape(), "cost volume: feature maps must share one shape");
  if (!hyp.is_global())
    require(hyp.per_pixel.rank() == 3 && hyp.per_pixel.dim(1) == features[0].dim(1) &&
                hyp.per_pixel.dim(2) == features[0].dim(2),
            "cost volume: per-pixel hypotheses do not match the feature resolution");
  if (hyp.count() < 1) throw InvalidArgument("cost volume: no depth hypotheses");
}

}  // namespace detail

/// C = 1/(N-1) sum_j stack_m groupwise_correlation(f_ref, warp(f_j, d_m)); features[0] is the reference.
template <typename T>
CostVolume<T> build_cost_volume(const std::vector<Tensor<T>>& features, const std::vector<Camera>& cams,
                                const Hypotheses<T>& hyp, int groups) {
  detail::check_views(features, cams, hyp);
  const std::int64_t planes = hyp.count();
  std::vector<Tensor<T>> plane_depths(static_cast<std::size_t>(planes));
  if (!hyp.is_global())
    for (std::int64_t m = 0; m < planes; ++m) plane_depths[static_cast<std::size_t>(m)] = detail::hypothesis_slice(hyp, m);

  std::vector<Tensor<T>> per_view;
  for (std::size_t j = 1; j < features.size(); ++j) {
    std::vector<Tensor<T>> slices;
    slices.reserve(static_cast<std::size_t>(planes));
    for (std::int64_t m = 0; m < planes; ++m) {
      const auto warped =
          detail::warp_to_hypothesis(features[j], cams[0], cams[j], hyp, m, plane_depths[static_cast<std::size_t>(m)]);
      slices.push_back(groupwise_correlation(features[0], warped, groups));
    }
    per_view.push_back(stack_planes(slices));
  }
  CostVolume<T> volume;
  volume.values = per_view.size() == 1 ? per_view.front()
                                       : scale(add_n(per_view), T(1) / static_cast<T>(per_view.size()));
  volume.level = hyp.level;
  volume.hypotheses = hyp;
  return volume;
}

/// Population variance of the N warped feature maps per plane; [Ch, M', H, W].
template <typename T>
Tensor<T> variance_cost_volume(const std::vector<Tensor<T>>& features, const std::vector<Camera>& cams,
                               const Hypotheses<T>& hyp) {
  detail::check_views(features, cams, hyp);
  const std::int64_t planes = hyp.count();
  const T inv_n = T(1) / static_cast<T>(features.size());
  std::vector<Tensor<T>> slices;
  for (std::int64_t m = 0; m < planes; ++m) {
    Tensor<T> plane_depth;
    if (!hyp.is_global()) plane_depth = detail::hypothesis_slice(hyp, m);
    std::vector<Tensor<T>> views{features[0]};
    for (std::size_t j = 1; j < features.size(); ++j)
      views.push_back(detail::warp_to_hypothesis(features[j], cams[0], cams[j], hyp, m, plane_depth));
    const auto mean = scale(add_n(views), inv_n);
    std::vector<Tensor<T>> squares;
    for (const auto& v : views) {
      const auto diff = sub(v, mean);
      squares.push_back(mul(diff, diff));
    }
    slices.push_back(scale(add_n(squares), inv_n));
  }
  return stack_planes(slices);
}

}  // namespace attnmvs
