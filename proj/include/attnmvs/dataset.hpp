#pragma once

// Training samples and the on-disk scene layout:
//   <root>/<scan>/images/00000000.png   view images
//   <root>/<scan>/cams/00000000_cam.txt camera files
//   <root>/<scan>/depths/00000000.pfm   ground-truth depth (0 = invalid)
//   <root>/<scan>/pair.txt              optional source-view ranking

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "attnmvs/depthnet.hpp"
#include "attnmvs/io.hpp"
#include "attnmvs/synthetic.hpp"

namespace attnmvs {

template <typename T>
struct SceneSample {
  std::string name;
  std::vector<Tensor<T>> images;  // view 0 is the reference
  std::vector<Camera> cams;       // full-resolution intrinsics
  std::vector<int> view_ids;
  std::vector<DepthMap<T>> gt;    // indexed by level, 0 = full resolution

  int levels() const { return static_cast<int>(gt.size()) - 1; }

  /// Ground truth ordered like infer_depth_pyramid's output (coarsest first).
  std::vector<DepthMap<T>> gt_coarse_to_fine() const { return {gt.rbegin(), gt.rend()}; }
};

/// Levels 0..levels of a depth map. A coarse pixel is valid only when all four
/// finer pixels are; its depth is their minimum (nearest surface wins).
template <typename T>
std::vector<DepthMap<T>> build_gt_pyramid(const Tensor<T>& depth, int levels) {
  if (depth.rank() != 2) throw ShapeError("build_gt_pyramid: depth must be [H,W]");
  if (levels < 0) throw InvalidArgument("build_gt_pyramid: levels must be >= 0");
  const std::int64_t factor = std::int64_t{1} << levels;
  if (depth.dim(0) % factor) throw SizeError("build_gt_pyramid: height is not divisible by 2^L");
  if (depth.dim(1) % factor) throw SizeError("build_gt_pyramid: width is not divisible by 2^L");
  std::vector<DepthMap<T>> out;
  DepthMap<T> base{depth.detach(), {}};
  base.valid.resize(depth.numel());
  for (std::size_t i = 0; i < depth.numel(); ++i) base.valid[i] = depth[i] > T(0) && std::isfinite(depth[i]);
  out.push_back(std::move(base));
  for (int l = 1; l <= levels; ++l) {
    const auto& fine = out.back();
    const std::int64_t h = fine.height() / 2, w = fine.width() / 2, fw = fine.width();
    DepthMap<T> coarse{Tensor<T>(Shape{h, w}), std::vector<std::uint8_t>(static_cast<std::size_t>(h * w), 0)};
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        bool ok = true;
        T best = std::numeric_limits<T>::max();
        for (std::int64_t dy = 0; dy < 2; ++dy)
          for (std::int64_t dx = 0; dx < 2; ++dx) {
            const auto i = static_cast<std::size_t>((2 * y + dy) * fw + 2 * x + dx);
            ok = ok && fine.valid[i];
            best = std::min(best, fine.depth[i]);
          }
        if (ok) {
          coarse.valid[static_cast<std::size_t>(y * w + x)] = 1;
          coarse.depth.data()[y * w + x] = best;
        }
      }
    out.push_back(std::move(coarse));
  }
  return out;
}

/// Training sample with view `ref` as reference and its nearest arc neighbours as sources.
template <typename T>
SceneSample<T> sample_from_scene(const SyntheticScene<T>& scene, int ref, int n_views, int levels) {
  if (ref < 0 || ref >= static_cast<int>(scene.cams.size())) throw InvalidArgument("reference view out of range");
  if (n_views < 2) throw InsufficientViews("a sample needs at least two views");
  if (n_views > static_cast<int>(scene.cams.size()))
    throw InsufficientViews("scene has " + std::to_string(scene.cams.size()) + " views, " + std::to_string(n_views) +
                            " requested");
  SceneSample<T> s;
  s.name = "synthetic/" + std::to_string(ref);
  s.view_ids.push_back(ref);
  for (int v : scene.nearest_views(ref, n_views - 1)) s.view_ids.push_back(v);
  for (int v : s.view_ids) {
    s.images.push_back(scene.images[static_cast<std::size_t>(v)]);
    s.cams.push_back(scene.cams[static_cast<std::size_t>(v)]);
  }
  s.gt = build_gt_pyramid(scene.depths[static_cast<std::size_t>(ref)], levels);
  return s;
}

/// One sample per view, each view in turn acting as reference.
template <typename T>
std::vector<SceneSample<T>> samples_from_scene(const SyntheticScene<T>& scene, int n_views, int levels) {
  std::vector<SceneSample<T>> out;
  for (int v = 0; v < static_cast<int>(scene.cams.size()); ++v) out.push_back(sample_from_scene(scene, v, n_views, levels));
  return out;
}

inline std::string view_stem(int id) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%08d", id);
  return buf;
}

struct ScenePaths {
  fs::path dir;
  fs::path image(int id) const { return dir / "images" / (view_stem(id) + ".png"); }
  fs::path camera(int id) const { return dir / "cams" / (view_stem(id) + "_cam.txt"); }
  fs::path depth(int id) const { return dir / "depths" / (view_stem(id) + ".pfm"); }
  fs::path pairs() const { return dir / "pair.txt"; }

  /// View ids that have an image file, ascending.
  std::vector<int> view_ids() const {
    std::vector<int> ids;
    if (!fs::is_directory(dir / "images")) return ids;
    for (const auto& entry : fs::directory_iterator(dir / "images")) {
      const auto stem = entry.path().stem().string();
      if (stem.size() == 8 && std::all_of(stem.begin(), stem.end(), ::isdigit)) ids.push_back(std::stoi(stem));
    }
    std::sort(ids.begin(), ids.end());
    return ids;
  }
};

/// Writes every view of a synthetic scene in the on-disk layout.
template <typename T>
void write_scene(const fs::path& root, const std::string& scan, const SyntheticScene<T>& scene) {
  const ScenePaths paths{root / scan};
  for (const char* sub : {"images", "cams", "depths"}) fs::create_directories(paths.dir / sub);
  std::vector<std::pair<int, std::vector<int>>> pairs;
  for (int v = 0; v < static_cast<int>(scene.cams.size()); ++v) {
    write_png(paths.image(v), scene.images[static_cast<std::size_t>(v)]);
    write_camera_file(paths.camera(v), scene.cams[static_cast<std::size_t>(v)]);
    write_pfm(paths.depth(v), scene.depths[static_cast<std::size_t>(v)]);
    pairs.emplace_back(v, scene.nearest_views(v, static_cast<int>(scene.cams.size()) - 1));
  }
  write_pair_file(paths.pairs(), pairs);
}

/// Loads reference view `ref_id` plus n_views-1 sources (pair ranking if present,
/// else nearest ids) with a ground-truth pyramid of levels 0..L. Without
/// `require_depth` a missing depth file leaves `gt` empty.
template <typename T>
SceneSample<T> load_scene(const fs::path& root, const std::string& scan, int ref_id, int n_views, int levels,
                          bool require_depth = true) {
  const ScenePaths paths{root / scan};
  if (!fs::is_directory(paths.dir)) throw NotFound("scan directory not found: " + paths.dir.string());
  if (n_views < 2) throw InsufficientViews("a sample needs at least two views");
  std::vector<int> sources;
  if (fs::exists(paths.pairs())) {
    for (const auto& [ref, ranked] : read_pair_file(paths.pairs()))
      if (ref == ref_id) sources = ranked;
  } else {
    auto ids = paths.view_ids();
    ids.erase(std::remove(ids.begin(), ids.end(), ref_id), ids.end());
    std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) { return std::abs(a - ref_id) < std::abs(b - ref_id); });
    sources = ids;
  }
  if (static_cast<int>(sources.size()) < n_views - 1)
    throw InsufficientViews("view " + std::to_string(ref_id) + " of " + scan + " has only " +
                            std::to_string(sources.size()) + " source views");
  sources.resize(static_cast<std::size_t>(n_views - 1));

  SceneSample<T> s;
  s.name = scan + "/" + std::to_string(ref_id);
  s.view_ids.push_back(ref_id);
  s.view_ids.insert(s.view_ids.end(), sources.begin(), sources.end());
  const std::int64_t factor = std::int64_t{1} << levels;
  for (int id : s.view_ids) {
    auto image = read_image<T>(paths.image(id));
    for (auto [axis, extent] : {std::pair{"height", image.dim(1)}, std::pair{"width", image.dim(2)}})
      if (extent % 16 || extent % factor)
        throw SizeError(paths.image(id).string() + ": " + axis + " " + std::to_string(extent) +
                        " is not divisible by 16 and 2^L");
    if (!s.images.empty() && image.shape() != s.images.front().shape())
      throw ShapeError(paths.image(id).string() + ": image size differs from the reference view");
    s.images.push_back(std::move(image));
    s.cams.push_back(read_camera_file(paths.camera(id)));
  }
  if (!require_depth && !fs::exists(paths.depth(ref_id))) return s;
  auto depth = read_pfm<T>(paths.depth(ref_id));
  if (depth.dim(0) != s.images[0].dim(1) || depth.dim(1) != s.images[0].dim(2))
    throw ShapeError(paths.depth(ref_id).string() + ": depth size differs from the image");
  s.gt = build_gt_pyramid(depth, levels);
  return s;
}

/// Every view of a scan as reference, in id order.
template <typename T>
std::vector<SceneSample<T>> load_scan(const fs::path& root, const std::string& scan, int n_views, int levels) {
  const ScenePaths paths{root / scan};
  if (!fs::is_directory(paths.dir)) throw NotFound("scan directory not found: " + paths.dir.string());
  std::vector<SceneSample<T>> out;
  for (int id : paths.view_ids()) out.push_back(load_scene<T>(root, scan, id, n_views, levels));
  if (out.empty()) throw EmptyInput("scan " + scan + " contains no views");
  return out;
}

}  // namespace attnmvs
