#pragma once

// Block-local self-attention with relative position embeddings, the shared
// 9-layer feature extractor and the image pyramid it runs on.

#include <Eigen/Core>

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "attnmvs/ops.hpp"
#include "attnmvs/params.hpp"

namespace attnmvs {

/// Per-head linear maps: head h maps input channels [h*in/H, (h+1)*in/H)
/// to output channels [h*out/H, (h+1)*out/H). w: [C_out, C_in/H].
template <typename T>
Tensor<T> grouped_pointwise(const Tensor<T>& x, const Tensor<T>& w, int groups) {
  detail::require(x.rank() == 3, "grouped_pointwise: input must be [C,H,W]");
  const std::int64_t c_in = x.dim(0), c_out = w.dim(0);
  if (groups < 1 || c_in % groups || c_out % groups)
    throw ConfigError("grouped_pointwise: head count must divide input and output channels");
  const std::int64_t gi = c_in / groups, go = c_out / groups, hw = x.dim(1) * x.dim(2);
  detail::require(w.rank() == 2 && w.dim(1) == gi, "grouped_pointwise: weight must be [C_out, C_in/heads]");

  Tensor<T> out(Shape{c_out, x.dim(1), x.dim(2)});
  for (int g = 0; g < groups; ++g) {
    detail::MatMap<T> y(out.data() + g * go * hw, go, hw);
    y.noalias() = detail::ConstMatMap<T>(w.data() + g * go * gi, go, gi) *
                  detail::ConstMatMap<T>(x.data() + g * gi * hw, gi, hw);
  }
  Tape<T>* tape = detail::recording_tape<T>(x, w);
  detail::finish(out, tape, "grouped_pointwise", [x, w, out, groups, gi, go, hw]() mutable {
    if (!out.has_grad()) return;
    const T* g_out = out.grad().data();
    for (int g = 0; g < groups; ++g) {
      detail::ConstMatMap<T> dy(g_out + g * go * hw, go, hw);
      if (w.requires_grad()) {
        detail::MatMap<T> dw(w.node()->grad_buffer().data() + g * go * gi, go, gi);
        dw.noalias() += dy * detail::ConstMatMap<T>(x.data() + g * gi * hw, gi, hw).transpose();
      }
      if (x.requires_grad()) {
        detail::MatMap<T> dx(x.node()->grad_buffer().data() + g * gi * hw, gi, hw);
        dx.noalias() += detail::ConstMatMap<T>(w.data() + g * go * gi, go, gi).transpose() * dy;
      }
    }
  });
  return out;
}

/// Attention over the k x k block around every pixel, per head:
///   y_ij = sum_ab softmax_ab(q_ij . (k_ab + r_{a-i,b-j})) v_ab
/// r is the concatenation of a row-offset embedding (rel_row: [H,k,dr]) and a
/// column-offset embedding (rel_col: [H,k,dc]) with dr + dc = channels / H.
/// Keys and values outside the image are zero but still receive attention mass.
/// If `weights_out` is given it receives the attention weights laid out as
/// [head][pixel][block position].
template <typename T>
Tensor<T> local_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>& rel_row,
                          const Tensor<T>& rel_col, int heads, int kernel, std::vector<T>* weights_out = nullptr) {
  detail::require(q.rank() == 3 && q.shape() == k.shape() && q.shape() == v.shape(),
                  "local_attention: q, k, v must share one [C,H,W] shape");
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("local_attention: kernel extent must be odd");
  const std::int64_t channels = q.dim(0), height = q.dim(1), width = q.dim(2), hw = height * width;
  if (heads < 1 || channels % heads) throw ConfigError("local_attention: head count must divide channels");
  const std::int64_t dh = channels / heads;
  detail::require(rel_row.rank() == 3 && rel_row.dim(0) == heads && rel_row.dim(1) == kernel,
                  "local_attention: rel_row must be [heads, kernel, dr]");
  detail::require(rel_col.rank() == 3 && rel_col.dim(0) == heads && rel_col.dim(1) == kernel,
                  "local_attention: rel_col must be [heads, kernel, dc]");
  const std::int64_t dr = rel_row.dim(2), dc = rel_col.dim(2);
  detail::require(dr + dc == dh, "local_attention: embedding widths must sum to the head width");
  const std::int64_t radius = kernel / 2, block = static_cast<std::int64_t>(kernel) * kernel;

  std::vector<T> probs(static_cast<std::size_t>(heads * hw * block));
  Tensor<T> out(q.shape());
  const T* qv = q.data();
  const T* kv = k.data();
  const T* vv = v.data();
  const T* rr = rel_row.data();
  const T* rc = rel_col.data();
  T* ov = out.data();

  for (std::int64_t h = 0; h < heads; ++h) {
    const std::int64_t c0 = h * dh;
    for (std::int64_t i = 0; i < height; ++i)
      for (std::int64_t j = 0; j < width; ++j) {
        const std::int64_t p = i * width + j;
        T* prob = probs.data() + (h * hw + p) * block;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::int64_t di = -radius; di <= radius; ++di)
          for (std::int64_t dj = -radius; dj <= radius; ++dj) {
            const std::int64_t a = i + di, b = j + dj;
            const bool inside = a >= 0 && a < height && b >= 0 && b < width;
            const T* row_emb = rr + (h * kernel + di + radius) * dr;
            const T* col_emb = rc + (h * kernel + dj + radius) * dc;
            T logit = 0;
            for (std::int64_t c = 0; c < dh; ++c) {
              const T key = inside ? kv[(c0 + c) * hw + a * width + b] : T(0);
              const T pos = c < dr ? row_emb[c] : col_emb[c - dr];
              logit += qv[(c0 + c) * hw + p] * (key + pos);
            }
            prob[(di + radius) * kernel + dj + radius] = logit;
            mx = std::max(mx, logit);
          }
        T total = 0;
        for (std::int64_t n = 0; n < block; ++n) total += (prob[n] = std::exp(prob[n] - mx));
        for (std::int64_t n = 0; n < block; ++n) prob[n] /= total;
        for (std::int64_t c = 0; c < dh; ++c) {
          T acc = 0;
          for (std::int64_t di = -radius; di <= radius; ++di)
            for (std::int64_t dj = -radius; dj <= radius; ++dj) {
              const std::int64_t a = i + di, b = j + dj;
              if (a < 0 || a >= height || b < 0 || b >= width) continue;
              acc += prob[(di + radius) * kernel + dj + radius] * vv[(c0 + c) * hw + a * width + b];
            }
          ov[(c0 + c) * hw + p] = acc;
        }
      }
  }
  if (weights_out) *weights_out = probs;

  Tape<T>* tape = detail::recording_tape<T>(q, k, v, rel_row, rel_col);
  detail::finish(out, tape, "local_attention",
                 [q, k, v, rel_row, rel_col, out, probs = std::move(probs), heads, kernel, height, width, hw, dh,
                  dr, dc, radius, block]() mutable {
                   if (!out.has_grad()) return;
                   const T* g = out.grad().data();
                   const T* qv = q.data();
                   const T* kv = k.data();
                   const T* vv = v.data();
                   const T* rr = rel_row.data();
                   const T* rc = rel_col.data();
                   T* dq = q.requires_grad() ? q.node()->grad_buffer().data() : nullptr;
                   T* dk = k.requires_grad() ? k.node()->grad_buffer().data() : nullptr;
                   T* dv = v.requires_grad() ? v.node()->grad_buffer().data() : nullptr;
                   T* drr = rel_row.requires_grad() ? rel_row.node()->grad_buffer().data() : nullptr;
                   T* drc = rel_col.requires_grad() ? rel_col.node()->grad_buffer().data() : nullptr;
                   std::vector<T> dlogit(static_cast<std::size_t>(block));
                   for (std::int64_t h = 0; h < heads; ++h) {
                     const std::int64_t c0 = h * dh;
                     for (std::int64_t i = 0; i < height; ++i)
                       for (std::int64_t j = 0; j < width; ++j) {
                         const std::int64_t p = i * width + j;
                         const T* prob = probs.data() + (h * hw + p) * block;
                         // d(prob) = g . v_ab, then through the softmax.
                         T weighted = 0;
                         for (std::int64_t di = -radius; di <= radius; ++di)
                           for (std::int64_t dj = -radius; dj <= radius; ++dj) {
                             const std::int64_t a = i + di, b = j + dj;
                             const std::int64_t n = (di + radius) * kernel + dj + radius;
                             T dp = 0;
                             if (a >= 0 && a < height && b >= 0 && b < width) {
                               for (std::int64_t c = 0; c < dh; ++c) {
                                 const T gc = g[(c0 + c) * hw + p];
                                 dp += gc * vv[(c0 + c) * hw + a * width + b];
                                 if (dv) dv[(c0 + c) * hw + a * width + b] += prob[n] * gc;
                               }
                             }
                             dlogit[static_cast<std::size_t>(n)] = dp;
                             weighted += prob[n] * dp;
                           }
                         for (std::int64_t n = 0; n < block; ++n)
                           dlogit[static_cast<std::size_t>(n)] = prob[n] * (dlogit[static_cast<std::size_t>(n)] - weighted);
                         for (std::int64_t di = -radius; di <= radius; ++di)
                           for (std::int64_t dj = -radius; dj <= radius; ++dj) {
                             const std::int64_t a = i + di, b = j + dj;
                             const bool inside = a >= 0 && a < height && b >= 0 && b < width;
                             const T dl = dlogit[static_cast<std::size_t>((di + radius) * kernel + dj + radius)];
                             const std::int64_t row_off = (h * kernel + di + radius) * dr;
                             const std::int64_t col_off = (h * kernel + dj + radius) * dc;
                             for (std::int64_t c = 0; c < dh; ++c) {
                               const T qc = qv[(c0 + c) * hw + p];
                               const T key = inside ? kv[(c0 + c) * hw + a * width + b] : T(0);
                               const T pos = c < dr ? rr[row_off + c] : rc[col_off + c - dr];
                               if (dq) dq[(c0 + c) * hw + p] += dl * (key + pos);
                               if (dk && inside) dk[(c0 + c) * hw + a * width + b] += dl * qc;
                               if (c < dr) {
                                 if (drr) drr[row_off + c] += dl * qc;
                               } else if (drc) {
                                 drc[col_off + c - dr] += dl * qc;
                               }
                             }
                           }
                       }
                   }
                 });
  return out;
}

template <typename T>
struct SelfAttentionWeights {
  int heads = 1;
  int kernel = 3;
  Tensor<T> wq, wk, wv;      // [C_out, C_in/heads]
  Tensor<T> rel_row, rel_col;  // [heads, kernel, dr] and [heads, kernel, dc]

  std::int64_t in_channels() const { return wq.dim(1) * heads; }
  std::int64_t out_channels() const { return wq.dim(0); }

  static SelfAttentionWeights init(std::int64_t c_in, std::int64_t c_out, int heads, int kernel,
                                   std::mt19937_64& rng) {
    if (heads < 1 || c_in % heads || c_out % heads)
      throw ConfigError("self-attention: head count " + std::to_string(heads) + " must divide " +
                        std::to_string(c_in) + " and " + std::to_string(c_out));
    if (kernel < 1 || kernel % 2 == 0) throw ConfigError("self-attention: kernel extent must be odd");
    SelfAttentionWeights w;
    w.heads = heads;
    w.kernel = kernel;
    const std::int64_t gi = c_in / heads, dh = c_out / heads;
    const double bound = std::sqrt(3.0 / static_cast<double>(gi));
    auto linear = [&] {
      std::uniform_real_distribution<double> dist(-bound, bound);
      std::vector<T> values(static_cast<std::size_t>(c_out * gi));
      for (auto& v : values) v = static_cast<T>(dist(rng));
      return Tensor<T>::parameter(Shape{c_out, gi}, std::move(values));
    };
    w.wq = linear();
    w.wk = linear();
    w.wv = linear();
    w.rel_row = normal_init<T>(Shape{heads, kernel, dh / 2}, 0.02, rng);
    w.rel_col = normal_init<T>(Shape{heads, kernel, dh - dh / 2}, 0.02, rng);
    return w;
  }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".wq", wq});
    out.push_back({prefix + ".wk", wk});
    out.push_back({prefix + ".wv", wv});
    out.push_back({prefix + ".rel_row", rel_row});
    out.push_back({prefix + ".rel_col", rel_col});
  }
};

/// Multi-head block-local self-attention; output keeps the input resolution.
template <typename T>
Tensor<T> self_attention_2d(const Tensor<T>& x, const SelfAttentionWeights<T>& w,
                            std::vector<T>* weights_out = nullptr) {
  detail::require(x.rank() == 3 && x.dim(0) == w.in_channels(),
                  "self_attention_2d: input " + shape_str(x.shape()) + " does not match " +
                      std::to_string(w.in_channels()) + " input channels");
  const auto q = grouped_pointwise(x, w.wq, w.heads);
  const auto k = grouped_pointwise(x, w.wk, w.heads);
  const auto v = grouped_pointwise(x, w.wv, w.heads);
  return local_attention(q, k, v, w.rel_row, w.rel_col, w.heads, w.kernel, weights_out);
}

template <typename T>
struct Conv2dLayer {
  Tensor<T> weight;  // [C_out, C_in, k, k]
  Tensor<T> bias;    // [C_out]
};

/// Channel widths of the eight convolution layers; the attention layer keeps the last width.
inline std::vector<std::int64_t> default_feature_channels() { return {64, 64, 64, 32, 32, 32, 16, 16}; }

template <typename T>
struct FeatureExtractorWeights {
  std::vector<Conv2dLayer<T>> convs;
  SelfAttentionWeights<T> attention;
  T slope = T(0.1);

  std::int64_t out_channels() const { return attention.out_channels(); }

  static FeatureExtractorWeights init(std::mt19937_64& rng, int heads = 1,
                                      std::vector<std::int64_t> channels = default_feature_channels(),
                                      int kernel = 3) {
    FeatureExtractorWeights w;
    std::int64_t c_in = 3;
    for (std::int64_t c_out : channels) {
      Conv2dLayer<T> layer;
      layer.weight = he_uniform<T>(Shape{c_out, c_in, kernel, kernel}, c_in * kernel * kernel, 0.1, rng);
      layer.bias = zeros_parameter<T>(Shape{c_out});
      w.convs.push_back(std::move(layer));
      c_in = c_out;
    }
    w.attention = SelfAttentionWeights<T>::init(c_in, c_in, heads, kernel, rng);
    return w;
  }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < convs.size(); ++i) {
      out.push_back({prefix + ".conv" + std::to_string(i) + ".weight", convs[i].weight});
      out.push_back({prefix + ".conv" + std::to_string(i) + ".bias", convs[i].bias});
    }
    attention.collect(out, prefix + ".attention");
  }
};

/// Eight 3x3 conv + leaky-ReLU layers followed by self-attention + leaky-ReLU.
template <typename T>
Tensor<T> extract_features(const Tensor<T>& image, const FeatureExtractorWeights<T>& w) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw ShapeError("extract_features: expected a [3,H,W] image, got " + shape_str(image.shape()));
  Tensor<T> x = image;
  for (const auto& layer : w.convs) x = leaky_relu(conv2d(x, layer.weight, layer.bias), w.slope);
  return leaky_relu(self_attention_2d(x, w.attention), w.slope);
}

/// Levels 0..levels-1, each a 2x2 mean-pooled copy of the previous one.
template <typename T>
std::vector<Tensor<T>> build_image_pyramid(const Tensor<T>& image, int levels) {
  if (levels < 1) throw InvalidArgument("build_image_pyramid: need at least one level");
  detail::require(image.rank() == 3, "build_image_pyramid: image must be [C,H,W]");
  const std::int64_t factor = std::int64_t{1} << (levels - 1);
  if (image.dim(1) % factor)
    throw SizeError("build_image_pyramid: height " + std::to_string(image.dim(1)) + " is not divisible by " +
                    std::to_string(factor));
  if (image.dim(2) % factor)
    throw SizeError("build_image_pyramid: width " + std::to_string(image.dim(2)) + " is not divisible by " +
                    std::to_string(factor));
  std::vector<Tensor<T>> pyramid{image};
  for (int l = 1; l < levels; ++l) pyramid.push_back(mean_pool2x2(pyramid.back()));
  return pyramid;
}

}  // namespace attnmvs
