#pragma once

// Accuracy / completeness / overall accuracy between point clouds, with an
// exact k-d tree for nearest-neighbour distances.

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "attnmvs/fusion.hpp"

namespace attnmvs {

/// Static 3D k-d tree; queries return the exact nearest distance.
class KdTree {
 public:
  explicit KdTree(std::vector<Vec3> points) : points_(std::move(points)) {
    index_.resize(points_.size());
    std::iota(index_.begin(), index_.end(), std::size_t{0});
    nodes_.reserve(points_.size());
    if (!points_.empty()) root_ = build(0, points_.size(), 0);
  }

  std::size_t size() const { return points_.size(); }

  /// Squared distance to the nearest stored point (infinity when empty).
  double nearest_sq(const Vec3& q) const {
    double best = std::numeric_limits<double>::infinity();
    if (root_ >= 0) search(root_, q, best);
    return best;
  }

  double nearest(const Vec3& q) const { return std::sqrt(nearest_sq(q)); }

 private:
  struct Node {
    std::size_t point;
    int axis;
    std::int64_t left = -1, right = -1;
  };

  std::int64_t build(std::size_t lo, std::size_t hi, int depth) {
    if (lo >= hi) return -1;
    // Split on the axis of largest spread for balanced cells on anisotropic clouds.
    Vec3 mn = Vec3::Constant(std::numeric_limits<double>::infinity()), mx = -mn;
    for (std::size_t i = lo; i < hi; ++i) {
      mn = mn.cwiseMin(points_[index_[i]]);
      mx = mx.cwiseMax(points_[index_[i]]);
    }
    int axis = 0;
    (mx - mn).maxCoeff(&axis);
    const std::size_t mid = lo + (hi - lo) / 2;
    std::nth_element(index_.begin() + static_cast<std::ptrdiff_t>(lo), index_.begin() + static_cast<std::ptrdiff_t>(mid),
                     index_.begin() + static_cast<std::ptrdiff_t>(hi),
                     [&](std::size_t a, std::size_t b) { return points_[a][axis] < points_[b][axis]; });
    const auto id = static_cast<std::int64_t>(nodes_.size());
    nodes_.push_back({index_[mid], axis});
    const auto left = build(lo, mid, depth + 1);
    const auto right = build(mid + 1, hi, depth + 1);
    nodes_[static_cast<std::size_t>(id)].left = left;
    nodes_[static_cast<std::size_t>(id)].right = right;
    return id;
  }

  void search(std::int64_t id, const Vec3& q, double& best) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    const Vec3& p = points_[n.point];
    best = std::min(best, (p - q).squaredNorm());
    const double diff = q[n.axis] - p[n.axis];
    const std::int64_t near = diff < 0 ? n.left : n.right;
    const std::int64_t far = diff < 0 ? n.right : n.left;
    if (near >= 0) search(near, q, best);
    if (far >= 0 && diff * diff < best) search(far, q, best);
  }

  std::vector<Vec3> points_;
  std::vector<std::size_t> index_;
  std::vector<Node> nodes_;
  std::int64_t root_ = -1;
};

struct EvalReport {
  double acc = 0, comp = 0, oa = 0;
  std::size_t recon_points = 0, gt_points = 0;
  std::size_t recon_inliers = 0, gt_inliers = 0;
  double max_dist = 0;

  nlohmann::json to_json() const {
    return {{"acc", acc},
            {"comp", comp},
            {"oa", oa},
            {"recon_points", recon_points},
            {"gt_points", gt_points},
            {"recon_inliers", recon_inliers},
            {"gt_inliers", gt_inliers},
            {"max_dist", max_dist}};
  }

  std::string table() const {
    std::ostringstream out;
    out.setf(std::ios::fixed);
    out.precision(6);
    out << "metric        value\n"
        << "accuracy      " << acc << "\n"
        << "completeness  " << comp << "\n"
        << "overall       " << oa << "\n";
    out.precision(3);
    out << "points        " << recon_points << " recon (" << recon_inliers << " inliers), " << gt_points << " gt ("
        << gt_inliers << " inliers)\n"
        << "max distance  " << max_dist << "\n";
    return out.str();
  }
};

/// Overall accuracy: the mean of accuracy and completeness.
inline double overall_accuracy(double acc, double comp) { return (acc + comp) / 2.0; }

namespace detail {

struct DirectedDistance {
  double mean = 0;
  std::size_t inliers = 0;
};

inline DirectedDistance directed_mean(const std::vector<Vec3>& from, const KdTree& to, double max_dist) {
  double sum = 0;
  std::size_t n = 0;
  for (const auto& p : from) {
    const double d = to.nearest(p);
    if (d > max_dist) continue;
    sum += d;
    ++n;
  }
  return {n ? sum / static_cast<double>(n) : 0.0, n};
}

inline std::vector<Vec3> positions(const PointCloud& cloud) {
  std::vector<Vec3> out;
  out.reserve(cloud.size());
  for (const auto& p : cloud.points) out.push_back(p.position);
  return out;
}

}  // namespace detail

/// acc: mean recon->gt nearest distance; comp: mean gt->recon; distances above
/// max_dist are dropped as outliers. Throws if either side has no inlier.
inline EvalReport evaluate(const std::vector<Vec3>& recon, const std::vector<Vec3>& gt, double max_dist = 20.0) {
  if (recon.empty()) throw EmptyInput("evaluate: reconstructed cloud is empty");
  if (gt.empty()) throw EmptyInput("evaluate: ground-truth cloud is empty");
  if (!(max_dist > 0.0)) throw InvalidArgument("evaluate: max_dist must be positive");
  const KdTree gt_tree(gt), recon_tree(recon);
  const auto a = detail::directed_mean(recon, gt_tree, max_dist);
  const auto c = detail::directed_mean(gt, recon_tree, max_dist);
  if (a.inliers == 0 || c.inliers == 0)
    throw EmptyInput("evaluate: every point lies farther than max_dist from the other cloud");
  EvalReport r;
  r.acc = a.mean;
  r.comp = c.mean;
  r.oa = overall_accuracy(r.acc, r.comp);
  r.recon_points = recon.size();
  r.gt_points = gt.size();
  r.recon_inliers = a.inliers;
  r.gt_inliers = c.inliers;
  r.max_dist = max_dist;
  return r;
}

inline EvalReport evaluate(const PointCloud& recon, const PointCloud& gt, double max_dist = 20.0) {
  return evaluate(detail::positions(recon), detail::positions(gt), max_dist);
}

}  // namespace attnmvs
