#pragma once

// 3D cost regularization, depth / residual regression and the coarse-to-fine
// inference loop with its multi-level L1 loss.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "attnmvs/attention.hpp"
#include "attnmvs/costvol.hpp"

namespace attnmvs {

template <typename T>
struct Conv3dLayer {
  Tensor<T> weight;  // [C_out, C_in, k, k, k]
  Tensor<T> bias;

  static Conv3dLayer init(std::int64_t c_in, std::int64_t c_out, std::mt19937_64& rng, int kernel = 3) {
    return {he_uniform<T>(Shape{c_out, c_in, kernel, kernel, kernel}, c_in * kernel * kernel * kernel, 0.1, rng),
            zeros_parameter<T>(Shape{c_out})};
  }
};

/// Encoder-decoder over [C, M', H, W]: a full-resolution stem, three stride-2
/// stages (8 -> 16 -> 32 -> 32), three nearest-resize + conv stages back to 8
/// channels with additive skips, and a 1-channel head.
template <typename T>
struct Regularizer3DWeights {
  Conv3dLayer<T> stem, down1, down2, down3, up3, up2, up1, head;
  T slope = T(0.1);

  std::int64_t in_channels() const { return stem.weight.dim(1); }

  static Regularizer3DWeights init(std::int64_t c_in, std::mt19937_64& rng) {
    Regularizer3DWeights w;
    w.stem = Conv3dLayer<T>::init(c_in, 8, rng);
    w.down1 = Conv3dLayer<T>::init(8, 16, rng);
    w.down2 = Conv3dLayer<T>::init(16, 32, rng);
    w.down3 = Conv3dLayer<T>::init(32, 32, rng);
    w.up3 = Conv3dLayer<T>::init(32, 32, rng);
    w.up2 = Conv3dLayer<T>::init(32, 16, rng);
    w.up1 = Conv3dLayer<T>::init(16, 8, rng);
    w.head = Conv3dLayer<T>::init(8, 1, rng);
    return w;
  }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    const std::pair<const char*, const Conv3dLayer<T>*> layers[] = {
        {"stem", &stem}, {"down1", &down1}, {"down2", &down2}, {"down3", &down3},
        {"up3", &up3},   {"up2", &up2},     {"up1", &up1},     {"head", &head}};
    for (const auto& [name, layer] : layers) {
      out.push_back({prefix + "." + name + ".weight", layer->weight});
      out.push_back({prefix + "." + name + ".bias", layer->bias});
    }
  }
};

/// Regularized logits softmaxed along the hypothesis axis: [M', H, W].
template <typename T>
Tensor<T> regularize(const Tensor<T>& cost, const Regularizer3DWeights<T>& w) {
  detail::require(cost.rank() == 4 && cost.dim(0) == w.in_channels(),
                  "regularize: cost volume " + shape_str(cost.shape()) + " does not match " +
                      std::to_string(w.in_channels()) + " input channels");
  if (cost.dim(2) % 8) throw SizeError("regularize: height " + std::to_string(cost.dim(2)) + " is not divisible by 8");
  if (cost.dim(3) % 8) throw SizeError("regularize: width " + std::to_string(cost.dim(3)) + " is not divisible by 8");
  auto block = [&](const Tensor<T>& x, const Conv3dLayer<T>& l, int stride) {
    return leaky_relu(conv3d(x, l.weight, l.bias, stride), w.slope);
  };
  auto resize_like = [](const Tensor<T>& x, const Tensor<T>& like) {
    return upsample_nearest3d(x, like.dim(1), like.dim(2), like.dim(3));
  };
  const auto s0 = block(cost, w.stem, 1);
  const auto d1 = block(s0, w.down1, 2);
  const auto d2 = block(d1, w.down2, 2);
  const auto d3 = block(d2, w.down3, 2);
  const auto u2 = add(block(resize_like(d3, d2), w.up3, 1), d2);
  const auto u1 = add(block(resize_like(u2, d1), w.up2, 1), d1);
  const auto u0 = add(block(resize_like(u1, s0), w.up1, 1), s0);
  const auto logits = conv3d(u0, w.head.weight, w.head.bias, 1);
  return softmax_axis(reshape(logits, Shape{cost.dim(1), cost.dim(2), cost.dim(3)}), 0);
}

template <typename T>
Tensor<T> regularize(const CostVolume<T>& cost, const Regularizer3DWeights<T>& w) {
  return regularize(cost.values, w);
}

/// Per-pixel expectation sum_m P[m] * values[m]; values is [M] (constants) or [M,H,W].
template <typename T>
Tensor<T> expectation(const Tensor<T>& prob, const Tensor<T>& values) {
  detail::require(prob.rank() == 3, "expectation: probability volume must be [M,H,W]");
  const std::int64_t planes = prob.dim(0), hw = prob.dim(1) * prob.dim(2);
  const bool global = values.rank() == 1;
  detail::require(values.dim(0) == planes && (global || values.shape() == prob.shape()),
                  "expectation: hypotheses " + shape_str(values.shape()) + " do not match probabilities " +
                      shape_str(prob.shape()));
  Tensor<T> out(Shape{prob.dim(1), prob.dim(2)});
  T* o = out.data();
  for (std::int64_t m = 0; m < planes; ++m)
    for (std::int64_t p = 0; p < hw; ++p)
      o[p] += prob[static_cast<std::size_t>(m * hw + p)] *
              values[static_cast<std::size_t>(global ? m : m * hw + p)];
  Tape<T>* tape = detail::recording_tape<T>(prob, values);
  detail::finish(out, tape, "expectation", [prob, values, out, planes, hw, global]() mutable {
    if (!out.has_grad()) return;
    const T* g = out.grad().data();
    T* dp = prob.requires_grad() ? prob.node()->grad_buffer().data() : nullptr;
    T* dv = values.requires_grad() ? values.node()->grad_buffer().data() : nullptr;
    for (std::int64_t m = 0; m < planes; ++m)
      for (std::int64_t p = 0; p < hw; ++p) {
        const auto vi = static_cast<std::size_t>(global ? m : m * hw + p);
        if (dp) dp[m * hw + p] += g[p] * values[vi];
        if (dv) dv[vi] += g[p] * prob[static_cast<std::size_t>(m * hw + p)];
      }
  });
  return out;
}

/// D(p) = sum_m d_m P(p, d_m).
template <typename T>
Tensor<T> regress_depth(const Tensor<T>& prob, const Hypotheses<T>& hyp) {
  detail::require(prob.rank() == 3 && prob.dim(0) == hyp.count(),
                  "regress_depth: " + std::to_string(prob.rank() ? prob.dim(0) : 0) + " probabilities vs " +
                      std::to_string(hyp.count()) + " hypotheses");
  if (!hyp.is_global()) return expectation(prob, hyp.per_pixel);
  std::vector<T> planes(hyp.planes.begin(), hyp.planes.end());
  return expectation(prob, Tensor<T>(Shape{hyp.count()}, std::move(planes)));
}

struct ResidualOptions {
  /// Hypotheses never fall below this depth (absolute, scene units).
  double min_depth = 1e-3;
  /// Interval used at pixels where no source view yields an epipolar direction.
  double fallback_interval = 1.0;
};

/// Per-pixel hypotheses D_up(p) + m * dd_p for m = -M/2..M/2, where dd_p is the
/// mean over source views of the one-pixel epipolar depth interval at D_up(p).
/// Differentiable with respect to D_up (including through dd_p).
template <typename T>
Hypotheses<T> build_residual_hypotheses(const Tensor<T>& depth_up, const Camera& ref, const std::vector<Camera>& srcs,
                                        int planes, int level, const ResidualOptions& opt = {}) {
  detail::require(depth_up.rank() == 2, "build_residual_hypotheses: depth must be [H,W]");
  if (planes < 2 || planes % 2) throw InvalidArgument("build_residual_hypotheses: plane count M must be even and >= 2");
  std::vector<const Camera*> usable;
  for (const auto& s : srcs)
    if (!detail::zero_baseline(ref, s)) usable.push_back(&s);
  if (usable.empty()) throw DegenerateGeometry("build_residual_hypotheses: every source view shares the reference center");

  const std::int64_t height = depth_up.dim(0), width = depth_up.dim(1), hw = height * width;
  const std::int64_t count = planes + 1, half = planes / 2;
  std::vector<double> interval(static_cast<std::size_t>(hw)), slope(static_cast<std::size_t>(hw));
  for (std::int64_t y = 0; y < height; ++y)
    for (std::int64_t x = 0; x < width; ++x) {
      const std::int64_t p = y * width + x;
      const double d = static_cast<double>(depth_up[static_cast<std::size_t>(p)]);
      double sum = 0, dsum = 0;
      int valid = 0;
      for (const Camera* s : usable) {
        const auto r = epipolar_depth_interval_with_slope(ref, *s, static_cast<double>(x), static_cast<double>(y), d);
        if (!r || !std::isfinite(r->first) || !std::isfinite(r->second)) continue;
        sum += r->first;
        dsum += r->second;
        ++valid;
      }
      interval[static_cast<std::size_t>(p)] = valid ? sum / valid : opt.fallback_interval;
      slope[static_cast<std::size_t>(p)] = valid ? dsum / valid : 0.0;
    }

  Tensor<T> stack(Shape{count, height, width});
  std::vector<std::uint8_t> clamped(static_cast<std::size_t>(count * hw), 0);
  T* h = stack.data();
  for (std::int64_t m = 0; m < count; ++m)
    for (std::int64_t p = 0; p < hw; ++p) {
      const double v = static_cast<double>(depth_up[static_cast<std::size_t>(p)]) +
                       static_cast<double>(m - half) * interval[static_cast<std::size_t>(p)];
      const auto i = static_cast<std::size_t>(m * hw + p);
      if (v < opt.min_depth) {
        h[i] = static_cast<T>(opt.min_depth);
        clamped[i] = 1;
      } else {
        h[i] = m == half ? depth_up[static_cast<std::size_t>(p)] : static_cast<T>(v);
      }
    }
  Tape<T>* tape = detail::recording_tape<T>(depth_up);
  detail::finish(stack, tape, "build_residual_hypotheses",
                 [depth_up, stack, slope = std::move(slope), clamped = std::move(clamped), count, hw, half]() mutable {
                   if (!stack.has_grad()) return;
                   const T* g = stack.grad().data();
                   auto& dd = depth_up.node()->grad_buffer();
                   for (std::int64_t m = 0; m < count; ++m)
                     for (std::int64_t p = 0; p < hw; ++p) {
                       const auto i = static_cast<std::size_t>(m * hw + p);
                       if (clamped[i]) continue;
                       dd[static_cast<std::size_t>(p)] +=
                           g[i] * static_cast<T>(1.0 + static_cast<double>(m - half) * slope[static_cast<std::size_t>(p)]);
                     }
                 });
  return Hypotheses<T>::pixelwise(stack, level);
}

/// D = D_up + sum_m P[m] (hyp[m] - D_up): expected signed residual added to the upsampled depth.
template <typename T>
Tensor<T> refine_depth(const Tensor<T>& prob, const Hypotheses<T>& hyp, const Tensor<T>& depth_up) {
  detail::require(!hyp.is_global(), "refine_depth: residual refinement needs per-pixel hypotheses");
  const Tensor<T>& stack = hyp.per_pixel;
  detail::require(prob.shape() == stack.shape(), "refine_depth: probabilities " + shape_str(prob.shape()) +
                                                     " do not match hypotheses " + shape_str(stack.shape()));
  detail::require(depth_up.rank() == 2 && depth_up.dim(0) == prob.dim(1) && depth_up.dim(1) == prob.dim(2),
                  "refine_depth: upsampled depth does not match the probability volume");
  const std::int64_t planes = prob.dim(0), hw = prob.dim(1) * prob.dim(2);
  Tensor<T> out(depth_up.shape());
  T* o = out.data();
  for (std::int64_t p = 0; p < hw; ++p) {
    T residual = 0;
    for (std::int64_t m = 0; m < planes; ++m)
      residual += prob[static_cast<std::size_t>(m * hw + p)] *
                  (stack[static_cast<std::size_t>(m * hw + p)] - depth_up[static_cast<std::size_t>(p)]);
    o[p] = depth_up[static_cast<std::size_t>(p)] + residual;
  }
  Tape<T>* tape = detail::recording_tape<T>(prob, stack, depth_up);
  detail::finish(out, tape, "refine_depth", [prob, stack, depth_up, out, planes, hw]() mutable {
    if (!out.has_grad()) return;
    const T* g = out.grad().data();
    T* dp = prob.requires_grad() ? prob.node()->grad_buffer().data() : nullptr;
    T* dh = stack.requires_grad() ? stack.node()->grad_buffer().data() : nullptr;
    T* du = depth_up.requires_grad() ? depth_up.node()->grad_buffer().data() : nullptr;
    for (std::int64_t p = 0; p < hw; ++p) {
      T mass = 0;
      for (std::int64_t m = 0; m < planes; ++m) {
        const auto i = static_cast<std::size_t>(m * hw + p);
        if (dp) dp[i] += g[p] * (stack[i] - depth_up[static_cast<std::size_t>(p)]);
        if (dh) dh[i] += g[p] * prob[i];
        mass += prob[i];
      }
      if (du) du[p] += g[p] * (T(1) - mass);
    }
  });
  return out;
}

/// Depth map with validity mask (the loss's set of valid pixels).
template <typename T>
struct DepthMap {
  Tensor<T> depth;                  // [H,W]
  std::vector<std::uint8_t> valid;  // H*W

  static DepthMap all_valid(Tensor<T> d) {
    DepthMap m{std::move(d), {}};
    m.valid.assign(m.depth.numel(), 1);
    return m;
  }
  std::int64_t height() const { return depth.dim(0); }
  std::int64_t width() const { return depth.dim(1); }
};

enum class CostAggregation { GroupCorrelation, Variance };

struct NetworkConfig {
  int levels = 2;  // L; the pyramid has L+1 levels
  int m_coarse = 48;
  int m_fine = 8;
  int groups = 4;
  int heads = 1;
  CostAggregation aggregation = CostAggregation::GroupCorrelation;
  std::vector<std::int64_t> feature_channels = default_feature_channels();

  void validate() const {
    if (levels < 0) throw ConfigError("levels must be >= 0");
    if (m_coarse < 1) throw ConfigError("m_coarse must be >= 1");
    if (levels > 0 && (m_fine < 2 || m_fine % 2)) throw ConfigError("m_fine must be even and >= 2");
    if (m_coarse < m_fine) throw ConfigError("m_coarse must be >= m_fine");
    if (feature_channels.empty()) throw ConfigError("feature extractor needs at least one layer");
    const std::int64_t ch = feature_channels.back();
    if (groups < 1 || ch % groups)
      throw ConfigError("groups=" + std::to_string(groups) + " must divide " + std::to_string(ch) + " feature channels");
    if (heads < 1 || ch % heads)
      throw ConfigError("heads=" + std::to_string(heads) + " must divide " + std::to_string(ch) + " feature channels");
  }
};

template <typename T>
struct NetworkWeights {
  FeatureExtractorWeights<T> features;
  Regularizer3DWeights<T> regularizer;

  static NetworkWeights init(const NetworkConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    NetworkWeights w;
    w.features = FeatureExtractorWeights<T>::init(rng, cfg.heads, cfg.feature_channels);
    const std::int64_t c_in =
        cfg.aggregation == CostAggregation::GroupCorrelation ? cfg.groups : cfg.feature_channels.back();
    w.regularizer = Regularizer3DWeights<T>::init(c_in, rng);
    return w;
  }

  ParameterList<T> parameters() const {
    ParameterList<T> out;
    features.collect(out, "features");
    regularizer.collect(out, "regularizer");
    return out;
  }
};

template <typename T>
struct LevelOutput {
  int level = 0;
  Tensor<T> depth;        // [H,W]
  Tensor<T> probability;  // [M',H,W]
  Hypotheses<T> hypotheses;
  std::int64_t cost_volume_elements = 0;
};

/// Zero-mean, unit-variance per channel; constant channels map to zero.
template <typename T>
Tensor<T> normalize_image(const Tensor<T>& image) {
  detail::require(image.rank() == 3, "normalize_image: image must be [C,H,W]");
  Tensor<T> out(image.shape());
  const std::int64_t hw = image.dim(1) * image.dim(2);
  for (std::int64_t c = 0; c < image.dim(0); ++c) {
    double mean = 0, sq = 0;
    for (std::int64_t p = 0; p < hw; ++p) mean += static_cast<double>(image[static_cast<std::size_t>(c * hw + p)]);
    mean /= static_cast<double>(hw);
    for (std::int64_t p = 0; p < hw; ++p) {
      const double d = static_cast<double>(image[static_cast<std::size_t>(c * hw + p)]) - mean;
      sq += d * d;
    }
    const double inv = 1.0 / (std::sqrt(sq / static_cast<double>(hw)) + 1e-6);
    for (std::int64_t p = 0; p < hw; ++p)
      out.data()[c * hw + p] = static_cast<T>((static_cast<double>(image[static_cast<std::size_t>(c * hw + p)]) - mean) * inv);
  }
  return out;
}

/// Coarse-to-fine depth inference for view 0. Returns levels L..0 (coarsest first).
/// `cams` carry full-resolution intrinsics; the same weights serve every level.
template <typename T>
std::vector<LevelOutput<T>> infer_depth_pyramid(const std::vector<Tensor<T>>& images, const std::vector<Camera>& cams,
                                                const NetworkWeights<T>& weights, const NetworkConfig& cfg) {
  cfg.validate();
  if (images.size() < 2) throw InsufficientViews("depth inference needs a reference and at least one source view");
  if (cams.size() != images.size()) throw ShapeError("infer_depth_pyramid: one camera per image required");
  const auto& first = images.front();
  for (const auto& img : images)
    detail::require(img.shape() == first.shape(), "infer_depth_pyramid: images must share one shape");
  const std::int64_t factor = std::int64_t{1} << cfg.levels;
  for (auto [axis, extent] : {std::pair{"height", first.dim(1)}, std::pair{"width", first.dim(2)}}) {
    if (extent % 16) throw SizeError(std::string("infer_depth_pyramid: ") + axis + " " + std::to_string(extent) + " is not divisible by 16");
    if (extent % factor)
      throw SizeError(std::string("infer_depth_pyramid: ") + axis + " " + std::to_string(extent) +
                      " is not divisible by 2^L = " + std::to_string(factor));
  }

  std::vector<std::vector<Tensor<T>>> pyramids;
  for (const auto& img : images) pyramids.push_back(build_image_pyramid(normalize_image(img), cfg.levels + 1));

  const Camera& ref_full = cams.front();
  std::vector<LevelOutput<T>> outputs;
  Tensor<T> previous;
  for (int level = cfg.levels; level >= 0; --level) {
    std::vector<Camera> level_cams;
    std::vector<Tensor<T>> feats;
    for (std::size_t v = 0; v < images.size(); ++v) {
      level_cams.push_back(scale_camera(cams[v], level));
      feats.push_back(extract_features(pyramids[v][static_cast<std::size_t>(level)], weights.features));
    }
    LevelOutput<T> out;
    out.level = level;
    Tensor<T> depth_up;
    if (level == cfg.levels) {
      out.hypotheses = Hypotheses<T>::global(sample_depth_planes(ref_full.depth_min, ref_full.depth_max, cfg.m_coarse, level));
    } else {
      depth_up = reshape(upsample_bilinear_x2(previous), Shape{feats[0].dim(1), feats[0].dim(2)});
      ResidualOptions opt;
      opt.min_depth = 0.01 * ref_full.depth_min;
      opt.fallback_interval = (ref_full.depth_max - ref_full.depth_min) / cfg.m_coarse;
      std::vector<Camera> srcs(level_cams.begin() + 1, level_cams.end());
      out.hypotheses = build_residual_hypotheses(depth_up, level_cams[0], srcs, cfg.m_fine, level, opt);
    }
    Tensor<T> volume;
    if (cfg.aggregation == CostAggregation::GroupCorrelation)
      volume = build_cost_volume(feats, level_cams, out.hypotheses, cfg.groups).values;
    else
      volume = variance_cost_volume(feats, level_cams, out.hypotheses);
    out.cost_volume_elements = static_cast<std::int64_t>(volume.numel());
    out.probability = regularize(volume, weights.regularizer);
    out.depth = level == cfg.levels ? regress_depth(out.probability, out.hypotheses)
                                    : refine_depth(out.probability, out.hypotheses, depth_up);
    previous = out.depth;
    outputs.push_back(std::move(out));
  }
  return outputs;
}

/// sum over levels and valid pixels of |D^l(p) - D_GT^l(p)|.
template <typename T>
Tensor<T> pyramid_loss(const std::vector<Tensor<T>>& estimates, const std::vector<DepthMap<T>>& gts) {
  if (estimates.size() != gts.size())
    throw ShapeError("pyramid_loss: " + std::to_string(estimates.size()) + " estimates vs " +
                     std::to_string(gts.size()) + " ground-truth levels");
  std::vector<Tensor<T>> terms;
  std::size_t valid = 0;
  for (std::size_t l = 0; l < estimates.size(); ++l) {
    detail::require(estimates[l].shape() == gts[l].depth.shape(),
                    "pyramid_loss: level " + std::to_string(l) + " estimate " + shape_str(estimates[l].shape()) +
                        " vs ground truth " + shape_str(gts[l].depth.shape()));
    for (auto v : gts[l].valid) valid += v != 0;
    terms.push_back(masked_abs_diff_sum(estimates[l], gts[l].depth.values(), std::span<const std::uint8_t>(gts[l].valid)));
  }
  if (valid == 0) throw DegenerateLoss("pyramid_loss: no valid ground-truth pixel at any level");
  return terms.size() == 1 ? terms.front() : add_n(terms);
}

}  // namespace attnmvs
