#pragma once

// Differentiable operation set: convolutions, activations, softmax, sampling,
// resampling and the small elementwise/structural ops the network needs.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "attnmvs/tensor.hpp"

namespace attnmvs {

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

struct ConvGeometry {
  std::int64_t channels, in_d, in_h, in_w;
  std::int64_t kd, kh, kw;
  std::int64_t stride_d, stride_h, stride_w;
  std::int64_t pad_d, pad_h, pad_w;
  std::int64_t out_d, out_h, out_w;

  std::int64_t rows() const { return channels * kd * kh * kw; }
  std::int64_t cols() const { return out_d * out_h * out_w; }
};

inline std::int64_t conv_out_extent(std::int64_t n, std::int64_t k, std::int64_t stride, std::int64_t pad) {
  return (n + 2 * pad - k) / stride + 1;
}

// Output columns ox whose input column ox*stride - pad + kx lies inside the row.
inline std::pair<std::int64_t, std::int64_t> valid_range(const ConvGeometry& g, std::int64_t kx) {
  const std::int64_t shift = g.pad_w - kx;  // ix = ox*stride - shift
  std::int64_t lo = shift > 0 ? (shift + g.stride_w - 1) / g.stride_w : 0;
  const std::int64_t last = g.in_w - 1 + shift;
  std::int64_t hi = last < 0 ? 0 : last / g.stride_w + 1;
  lo = std::min(lo, g.out_w);
  hi = std::clamp(hi, lo, g.out_w);
  return {lo, hi};
}

// Unrolls receptive fields of output rows [r0, r1) into columns, where an
// output row is one (oz, oy) pair: col[(c,kz,ky,kx), (oz,oy,ox)].
template <typename T>
void vol2col(const T* x, const ConvGeometry& g, std::int64_t r0, std::int64_t r1, T* col) {
  const std::int64_t ncols = (r1 - r0) * g.out_w;
  for (std::int64_t c = 0; c < g.channels; ++c)
    for (std::int64_t kz = 0; kz < g.kd; ++kz)
      for (std::int64_t ky = 0; ky < g.kh; ++ky)
        for (std::int64_t kx = 0; kx < g.kw; ++kx) {
          const std::int64_t row = ((c * g.kd + kz) * g.kh + ky) * g.kw + kx;
          T* dst = col + row * ncols;
          for (std::int64_t r = r0; r < r1; ++r) {
            const std::int64_t iz = (r / g.out_h) * g.stride_d - g.pad_d + kz;
            const std::int64_t iy = (r % g.out_h) * g.stride_h - g.pad_h + ky;
            T* out = dst + (r - r0) * g.out_w;
            if (iz < 0 || iz >= g.in_d || iy < 0 || iy >= g.in_h) {
              std::fill(out, out + g.out_w, T(0));
              continue;
            }
            const T* src = x + ((c * g.in_d + iz) * g.in_h + iy) * g.in_w;
            const auto [lo, hi] = valid_range(g, kx);
            std::fill(out, out + lo, T(0));
            if (g.stride_w == 1) {
              std::copy(src + lo - g.pad_w + kx, src + hi - g.pad_w + kx, out + lo);
            } else {
              for (std::int64_t ox = lo; ox < hi; ++ox) out[ox] = src[ox * g.stride_w - g.pad_w + kx];
            }
            std::fill(out + hi, out + g.out_w, T(0));
          }
        }
}

// Adjoint of vol2col over the same row range; accumulates into dx.
template <typename T>
void col2vol(const T* col, const ConvGeometry& g, std::int64_t r0, std::int64_t r1, T* dx) {
  const std::int64_t ncols = (r1 - r0) * g.out_w;
  for (std::int64_t c = 0; c < g.channels; ++c)
    for (std::int64_t kz = 0; kz < g.kd; ++kz)
      for (std::int64_t ky = 0; ky < g.kh; ++ky)
        for (std::int64_t kx = 0; kx < g.kw; ++kx) {
          const std::int64_t row = ((c * g.kd + kz) * g.kh + ky) * g.kw + kx;
          const T* src = col + row * ncols;
          for (std::int64_t r = r0; r < r1; ++r) {
            const std::int64_t iz = (r / g.out_h) * g.stride_d - g.pad_d + kz;
            const std::int64_t iy = (r % g.out_h) * g.stride_h - g.pad_h + ky;
            if (iz < 0 || iz >= g.in_d || iy < 0 || iy >= g.in_h) continue;
            const T* in = src + (r - r0) * g.out_w;
            T* dst = dx + ((c * g.in_d + iz) * g.in_h + iy) * g.in_w;
            const auto [lo, hi] = valid_range(g, kx);
            if (g.stride_w == 1) {
              T* d = dst - g.pad_w + kx;
              for (std::int64_t ox = lo; ox < hi; ++ox) d[ox] += in[ox];
            } else {
              for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox * g.stride_w - g.pad_w + kx] += in[ox];
            }
          }
        }
}

// Per-thread scratch for unrolled columns; grows, never shrinks.
template <typename T>
T* column_workspace(std::int64_t n) {
  thread_local std::vector<T> buffer;
  if (static_cast<std::int64_t>(buffer.size()) < n) buffer.resize(static_cast<std::size_t>(n));
  return buffer.data();
}

// Output rows per chunk so that one chunk of columns stays cache-sized.
inline std::int64_t rows_per_chunk(const ConvGeometry& g) {
  constexpr std::int64_t budget = 128 * 1024;
  return std::max<std::int64_t>(1, budget / std::max<std::int64_t>(1, g.rows() * g.out_w));
}

// Shared convolution kernel; output shape is supplied by the caller. Works on
// chunks of output rows so the unrolled columns never exceed a small buffer.
template <typename T>
Tensor<T> convolve(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const ConvGeometry& g,
                   Shape out_shape, const char* name) {
  const std::int64_t c_out = w.dim(0);
  const std::int64_t rows = g.rows();
  const std::int64_t cols = g.cols();
  const std::int64_t out_rows = g.out_d * g.out_h;
  const std::int64_t chunk = rows_per_chunk(g);

  Tensor<T> out(std::move(out_shape));
  MatMap<T> y(out.data(), c_out, cols);
  ConstMatMap<T> wm(w.data(), c_out, rows);
  T* col = column_workspace<T>(rows * chunk * g.out_w);
  for (std::int64_t r0 = 0; r0 < out_rows; r0 += chunk) {
    const std::int64_t r1 = std::min(out_rows, r0 + chunk);
    const std::int64_t n = (r1 - r0) * g.out_w;
    vol2col(x.data(), g, r0, r1, col);
    y.middleCols(r0 * g.out_w, n).noalias() = wm * ConstMatMap<T>(col, rows, n);
  }
  if (b.defined())
    for (std::int64_t o = 0; o < c_out; ++o) y.row(o).array() += b[static_cast<std::size_t>(o)];

  Tape<T>* tape = recording_tape<T>(x, w, b);
  finish(out, tape, name, [x, w, b, g, out, c_out, rows, cols, out_rows, chunk]() mutable {
    if (!out.has_grad()) return;
    ConstMatMap<T> dy(out.grad().data(), c_out, cols);
    if (b.defined() && b.requires_grad()) {
      auto& db = b.node()->grad_buffer();
      // Plain loop: a vectorized sum would change order with the buffer's alignment,
      // making repeated runs differ in the last bits.
      const T* g_out = out.grad().data();
      for (std::int64_t o = 0; o < c_out; ++o) {
        double acc = 0;
        for (std::int64_t i = 0; i < cols; ++i) acc += static_cast<double>(g_out[o * cols + i]);
        db[static_cast<std::size_t>(o)] += static_cast<T>(acc);
      }
    }
    const bool want_w = w.requires_grad(), want_x = x.requires_grad();
    if (!want_w && !want_x) return;
    T* col_buf = column_workspace<T>(rows * chunk * g.out_w);
    ConstMatMap<T> wm(w.data(), c_out, rows);
    for (std::int64_t r0 = 0; r0 < out_rows; r0 += chunk) {
      const std::int64_t r1 = std::min(out_rows, r0 + chunk);
      const std::int64_t n = (r1 - r0) * g.out_w;
      const auto dy_chunk = dy.middleCols(r0 * g.out_w, n);
      if (want_w) {
        vol2col(x.data(), g, r0, r1, col_buf);
        MatMap<T> dw(w.node()->grad_buffer().data(), c_out, rows);
        dw.noalias() += dy_chunk * ConstMatMap<T>(col_buf, rows, n).transpose();
      }
      if (want_x) {
        MatMap<T> dcol(col_buf, rows, n);
        dcol.noalias() = wm.transpose() * dy_chunk;
        col2vol(col_buf, g, r0, r1, x.node()->grad_buffer().data());
      }
    }
  });
  return out;
}

}  // namespace detail

/// Same-padded, stride-1 2D cross-correlation. x: [C_in,H,W], w: [C_out,C_in,k,k], b: [C_out] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require(x.rank() == 3, "conv2d: input must be [C,H,W], got " + shape_str(x.shape()));
  detail::require(w.rank() == 4 && w.dim(1) == x.dim(0) && w.dim(2) == w.dim(3),
                  "conv2d: weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
  detail::require(w.dim(2) % 2 == 1, "conv2d: kernel extent must be odd");
  detail::require(!b.defined() || (b.rank() == 1 && b.dim(0) == w.dim(0)), "conv2d: bias must be [C_out]");
  const std::int64_t k = w.dim(2);
  detail::ConvGeometry g{x.dim(0), 1, x.dim(1), x.dim(2), 1, k, k, 1, 1, 1, 0, k / 2, k / 2, 1, x.dim(1), x.dim(2)};
  return detail::convolve(x, w, b, g, Shape{w.dim(0), x.dim(1), x.dim(2)}, "conv2d");
}

/// Same-padded 3D cross-correlation with stride 1 or 2. x: [C_in,D,H,W], w: [C_out,C_in,k,k,k].
/// Stride 2 produces ceil(n/2) along each axis.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride = 1) {
  detail::require(x.rank() == 4, "conv3d: input must be [C,D,H,W], got " + shape_str(x.shape()));
  detail::require(w.rank() == 5 && w.dim(1) == x.dim(0) && w.dim(2) == w.dim(3) && w.dim(3) == w.dim(4),
                  "conv3d: weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
  detail::require(w.dim(2) % 2 == 1, "conv3d: kernel extent must be odd");
  detail::require(!b.defined() || (b.rank() == 1 && b.dim(0) == w.dim(0)), "conv3d: bias must be [C_out]");
  if (stride != 1 && stride != 2) throw InvalidArgument("conv3d: stride must be 1 or 2");
  const std::int64_t k = w.dim(2);
  const std::int64_t p = k / 2;
  detail::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), k, k, k, stride, stride, stride, p, p, p,
                         detail::conv_out_extent(x.dim(1), k, stride, p),
                         detail::conv_out_extent(x.dim(2), k, stride, p),
                         detail::conv_out_extent(x.dim(3), k, stride, p)};
  return detail::convolve(x, w, b, g, Shape{w.dim(0), g.out_d, g.out_h, g.out_w}, "conv3d");
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  if (!(slope > T(0) && slope < T(1))) throw InvalidArgument("leaky_relu: slope must lie in (0,1)");
  Tensor<T> out(x.shape());
  const auto xv = x.values();
  auto ov = out.mutable_values();
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] >= T(0) ? xv[i] : slope * xv[i];
  Tape<T>* tape = detail::recording_tape<T>(x);
  detail::finish(out, tape, "leaky_relu", [x, out, slope]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    auto xv = x.values();
    auto& dx = x.node()->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += xv[i] >= T(0) ? g[i] : slope * g[i];
  });
  return out;
}

/// Exponent-normalizes along one axis, with max subtraction.
template <typename T>
Tensor<T> softmax_axis(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw InvalidArgument("softmax_axis: axis out of range");
  std::int64_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::int64_t n = x.dim(axis);

  Tensor<T> out(x.shape());
  const T* xv = x.data();
  T* ov = out.data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * n * inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::int64_t m = 0; m < n; ++m) mx = std::max(mx, xv[base + m * inner]);
      T total = 0;
      for (std::int64_t m = 0; m < n; ++m) {
        const T e = std::exp(xv[base + m * inner] - mx);
        ov[base + m * inner] = e;
        total += e;
      }
      for (std::int64_t m = 0; m < n; ++m) ov[base + m * inner] /= total;
    }

  Tape<T>* tape = detail::recording_tape<T>(x);
  detail::finish(out, tape, "softmax_axis", [x, out, outer, inner, n]() mutable {
    if (!out.has_grad()) return;
    const T* g = out.grad().data();
    const T* y = out.data();
    T* dx = x.node()->grad_buffer().data();
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t i = 0; i < inner; ++i) {
        const std::int64_t base = o * n * inner + i;
        T dot = 0;
        for (std::int64_t m = 0; m < n; ++m) dot += g[base + m * inner] * y[base + m * inner];
        for (std::int64_t m = 0; m < n; ++m)
          dx[base + m * inner] += y[base + m * inner] * (g[base + m * inner] - dot);
      }
  });
  return out;
}

namespace detail {

template <typename T>
struct BilinearTap {
  bool inside = false;
  std::int64_t x0 = 0, x1 = 0, y0 = 0, y1 = 0;
  T wx = 0, wy = 0;
};

// Samples outside [0,W-1]x[0,H-1] are zero; the last cell is closed on its far side.
template <typename T>
BilinearTap<T> bilinear_tap(T x, T y, std::int64_t width, std::int64_t height) {
  BilinearTap<T> t;
  if (!(x >= T(0) && x <= T(width - 1) && y >= T(0) && y <= T(height - 1))) return t;
  t.inside = true;
  t.x0 = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor(x)), std::max<std::int64_t>(width - 2, 0));
  t.y0 = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor(y)), std::max<std::int64_t>(height - 2, 0));
  t.x1 = std::min(t.x0 + 1, width - 1);
  t.y1 = std::min(t.y0 + 1, height - 1);
  t.wx = x - T(t.x0);
  t.wy = y - T(t.y0);
  return t;
}

}  // namespace detail

/// Bilinear sampling of x: [C,H,W] at pixel coordinates coords: [H',W',2] holding (u, v).
/// Differentiable with respect to both the sampled values and the coordinates.
template <typename T>
Tensor<T> grid_sample_bilinear(const Tensor<T>& x, const Tensor<T>& coords) {
  detail::require(x.rank() == 3, "grid_sample_bilinear: input must be [C,H,W]");
  detail::require(coords.rank() == 3 && coords.dim(2) == 2, "grid_sample_bilinear: coords must be [H,W,2]");
  const std::int64_t channels = x.dim(0), height = x.dim(1), width = x.dim(2);
  const std::int64_t out_h = coords.dim(0), out_w = coords.dim(1);
  const std::int64_t plane = height * width, out_plane = out_h * out_w;

  Tensor<T> out(Shape{channels, out_h, out_w});
  const T* xv = x.data();
  const T* cv = coords.data();
  T* ov = out.data();
  for (std::int64_t p = 0; p < out_plane; ++p) {
    const auto t = detail::bilinear_tap(cv[2 * p], cv[2 * p + 1], width, height);
    if (!t.inside) continue;
    const T w00 = (T(1) - t.wx) * (T(1) - t.wy), w01 = t.wx * (T(1) - t.wy);
    const T w10 = (T(1) - t.wx) * t.wy, w11 = t.wx * t.wy;
    for (std::int64_t c = 0; c < channels; ++c) {
      const T* src = xv + c * plane;
      ov[c * out_plane + p] = w00 * src[t.y0 * width + t.x0] + w01 * src[t.y0 * width + t.x1] +
                              w10 * src[t.y1 * width + t.x0] + w11 * src[t.y1 * width + t.x1];
    }
  }

  Tape<T>* tape = detail::recording_tape<T>(x, coords);
  detail::finish(out, tape, "grid_sample_bilinear",
                 [x, coords, out, channels, height, width, plane, out_plane]() mutable {
                   if (!out.has_grad()) return;
                   const T* g = out.grad().data();
                   const T* xv = x.data();
                   const T* cv = coords.data();
                   T* dx = x.requires_grad() ? x.node()->grad_buffer().data() : nullptr;
                   T* dc = coords.requires_grad() ? coords.node()->grad_buffer().data() : nullptr;
                   for (std::int64_t p = 0; p < out_plane; ++p) {
                     const auto t = detail::bilinear_tap(cv[2 * p], cv[2 * p + 1], width, height);
                     if (!t.inside) continue;
                     const T w00 = (T(1) - t.wx) * (T(1) - t.wy), w01 = t.wx * (T(1) - t.wy);
                     const T w10 = (T(1) - t.wx) * t.wy, w11 = t.wx * t.wy;
                     T gu = 0, gv = 0;
                     for (std::int64_t c = 0; c < channels; ++c) {
                       const T gc = g[c * out_plane + p];
                       if (gc == T(0)) continue;
                       const std::int64_t i00 = c * plane + t.y0 * width + t.x0;
                       const std::int64_t i01 = c * plane + t.y0 * width + t.x1;
                       const std::int64_t i10 = c * plane + t.y1 * width + t.x0;
                       const std::int64_t i11 = c * plane + t.y1 * width + t.x1;
                       if (dx) {
                         dx[i00] += w00 * gc;
                         dx[i01] += w01 * gc;
                         dx[i10] += w10 * gc;
                         dx[i11] += w11 * gc;
                       }
                       if (dc) {
                         gu += gc * ((T(1) - t.wy) * (xv[i01] - xv[i00]) + t.wy * (xv[i11] - xv[i10]));
                         gv += gc * ((T(1) - t.wx) * (xv[i10] - xv[i00]) + t.wx * (xv[i11] - xv[i01]));
                       }
                     }
                     if (dc) {
                       dc[2 * p] += gu;
                       dc[2 * p + 1] += gv;
                     }
                   }
                 });
  return out;
}

namespace detail {

struct LinearTap {
  std::int64_t i0, i1;
  double w1;
};

// align-corners=false source positions for an exact x2 upsampling.
inline std::vector<LinearTap> upsample_taps(std::int64_t n) {
  std::vector<LinearTap> taps(static_cast<std::size_t>(2 * n));
  for (std::int64_t o = 0; o < 2 * n; ++o) {
    double src = std::max((static_cast<double>(o) + 0.5) / 2.0 - 0.5, 0.0);
    auto i0 = std::min(static_cast<std::int64_t>(std::floor(src)), n - 1);
    auto i1 = std::min(i0 + 1, n - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear x2 upsampling (align-corners=false) of [C,H,W] or [H,W].
template <typename T>
Tensor<T> upsample_bilinear_x2(const Tensor<T>& x) {
  detail::require(x.rank() == 3 || x.rank() == 2, "upsample_bilinear_x2: input must be [C,H,W] or [H,W]");
  const bool planar = x.rank() == 2;
  const std::int64_t channels = planar ? 1 : x.dim(0);
  const std::int64_t height = x.dim(planar ? 0 : 1), width = x.dim(planar ? 1 : 2);
  if (height < 1 || width < 1) throw ShapeError("upsample_bilinear_x2: empty input");
  const auto ty = detail::upsample_taps(height);
  const auto tx = detail::upsample_taps(width);
  const std::int64_t out_h = 2 * height, out_w = 2 * width;

  Tensor<T> out(planar ? Shape{out_h, out_w} : Shape{channels, out_h, out_w});
  const T* xv = x.data();
  T* ov = out.data();
  for (std::int64_t c = 0; c < channels; ++c)
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
      const auto& a = ty[static_cast<std::size_t>(oy)];
      const T wy1 = static_cast<T>(a.w1), wy0 = T(1) - wy1;
      const T* r0 = xv + (c * height + a.i0) * width;
      const T* r1 = xv + (c * height + a.i1) * width;
      T* dst = ov + (c * out_h + oy) * out_w;
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        const auto& b = tx[static_cast<std::size_t>(ox)];
        const T wx1 = static_cast<T>(b.w1), wx0 = T(1) - wx1;
        dst[ox] = wy0 * (wx0 * r0[b.i0] + wx1 * r0[b.i1]) + wy1 * (wx0 * r1[b.i0] + wx1 * r1[b.i1]);
      }
    }

  Tape<T>* tape = detail::recording_tape<T>(x);
  detail::finish(out, tape, "upsample_bilinear_x2", [x, out, ty, tx, channels, height, width, out_h, out_w]() mutable {
    if (!out.has_grad()) return;
    const T* g = out.grad().data();
    T* dx = x.node()->grad_buffer().data();
    for (std::int64_t c = 0; c < channels; ++c)
      for (std::int64_t oy = 0; oy < out_h; ++oy) {
        const auto& a = ty[static_cast<std::size_t>(oy)];
        const T wy1 = static_cast<T>(a.w1), wy0 = T(1) - wy1;
        T* r0 = dx + (c * height + a.i0) * width;
        T* r1 = dx + (c * height + a.i1) * width;
        const T* src = g + (c * out_h + oy) * out_w;
        for (std::int64_t ox = 0; ox < out_w; ++ox) {
          const auto& b = tx[static_cast<std::size_t>(ox)];
          const T wx1 = static_cast<T>(b.w1), wx0 = T(1) - wx1;
          r0[b.i0] += wy0 * wx0 * src[ox];
          r0[b.i1] += wy0 * wx1 * src[ox];
          r1[b.i0] += wy1 * wx0 * src[ox];
          r1[b.i1] += wy1 * wx1 * src[ox];
        }
      }
  });
  return out;
}

/// Nearest-neighbour resize of [C,D,H,W] to the given extents (index = floor(o * n / n')).
template <typename T>
Tensor<T> upsample_nearest3d(const Tensor<T>& x, std::int64_t depth, std::int64_t height, std::int64_t width) {
  detail::require(x.rank() == 4, "upsample_nearest3d: input must be [C,D,H,W]");
  const std::int64_t channels = x.dim(0), in_d = x.dim(1), in_h = x.dim(2), in_w = x.dim(3);
  auto index_map = [](std::int64_t n_out, std::int64_t n_in) {
    std::vector<std::int64_t> m(static_cast<std::size_t>(n_out));
    for (std::int64_t o = 0; o < n_out; ++o) m[static_cast<std::size_t>(o)] = o * n_in / n_out;
    return m;
  };
  const auto md = index_map(depth, in_d), mh = index_map(height, in_h), mw = index_map(width, in_w);

  Tensor<T> out(Shape{channels, depth, height, width});
  const T* xv = x.data();
  T* ov = out.data();
  std::int64_t o = 0;
  for (std::int64_t c = 0; c < channels; ++c)
    for (std::int64_t z = 0; z < depth; ++z)
      for (std::int64_t y = 0; y < height; ++y) {
        const T* src = xv + ((c * in_d + md[z]) * in_h + mh[y]) * in_w;
        for (std::int64_t xx = 0; xx < width; ++xx) ov[o++] = src[mw[xx]];
      }

  Tape<T>* tape = detail::recording_tape<T>(x);
  detail::finish(out, tape, "upsample_nearest3d", [x, out, md, mh, mw, channels, in_d, in_h, in_w]() mutable {
    if (!out.has_grad()) return;
    const T* g = out.grad().data();
    T* dx = x.node()->grad_buffer().data();
    std::int64_t o = 0;
    for (std::int64_t c = 0; c < channels; ++c)
      for (std::size_t z = 0; z < md.size(); ++z)
        for (std::size_t y = 0; y < mh.size(); ++y) {
          T* dst = dx + ((c * in_d + md[z]) * in_h + mh[y]) * in_w;
          for (std::size_t xx = 0; xx < mw.size(); ++xx) dst[mw[xx]] += g[o++];
        }
  });
  return out;
}

/// 2x2 mean pooling of [C,H,W]; H and W must be even.
template <typename T>
Tensor<T> mean_pool2x2(const Tensor<T>& x) {
  detail::require(x.rank() == 3, "mean_pool2x2: input must be [C,H,W]");
  const std::int64_t channels = x.dim(0), height = x.dim(1), width = x.dim(2);
  if (height % 2) throw SizeError("mean_pool2x2: height " + std::to_string(height) + " is odd");
  if (width % 2) throw SizeError("mean_pool2x2: width " + std::to_string(width) + " is odd");
  const std::int64_t oh = height / 2, ow = width / 2;
  Tensor<T> out(Shape{channels, oh, ow});
  const T* xv = x.data();
  T* ov = out.data();
  for (std::int64_t c = 0; c < channels; ++c)
    for (std::int64_t y = 0; y < oh; ++y)
      for (std::int64_t xx = 0; xx < ow; ++xx) {
        const T* r0 = xv + (c * height + 2 * y) * width + 2 * xx;
        const T* r1 = r0 + width;
        ov[(c * oh + y) * ow + xx] = (r0[0] + r0[1] + r1[0] + r1[1]) * T(0.25);
      }
  Tape<T>* tape = detail::recording_tape<T>(x);
  detail::finish(out, tape, "mean_pool2x2", [x, out, channels, height, width, oh, ow]() mutable {
    if (!out.has_grad()) return;
    const T* g = out.grad().data();
    T* dx = x.node()->grad_buffer().data();
    for (std::int64_t c = 0; c < channels; ++c)
      for (std::int64_t y = 0; y < oh; ++y)
        for (std::int64_t xx = 0; xx < ow; ++xx) {
          const T v = g[(c * oh + y) * ow + xx] * T(0.25);
          T* r0 = dx + (c * height + 2 * y) * width + 2 * xx;
          r0[0] += v;
          r0[1] += v;
          r0[width] += v;
          r0[width + 1] += v;
        }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops.

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a[i] + b[i];
  Tape<T>* tape = detail::recording_tape<T>(a, b);
  detail::finish(out, tape, "add", [a, b, out]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    for (const Tensor<T>* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      auto& d = t->node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a[i] - b[i];
  Tape<T>* tape = detail::recording_tape<T>(a, b);
  detail::finish(out, tape, "sub", [a, b, out]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    if (a.requires_grad()) {
      auto& d = a.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (b.requires_grad()) {
      auto& d = b.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a[i] * b[i];
  Tape<T>* tape = detail::recording_tape<T>(a, b);
  detail::finish(out, tape, "mul", [a, b, out]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    if (a.requires_grad()) {
      auto& d = a.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * b[i];
    }
    if (b.requires_grad()) {
      auto& d = b.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * a[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a[i] * s;
  Tape<T>* tape = detail::recording_tape<T>(a);
  detail::finish(out, tape, "scale", [a, out, s]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    auto& d = a.node()->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * s;
  });
  return out;
}

/// Sum of all elements as a [1] tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (T v : a.values()) total += v;
  Tensor<T> out(Shape{1}, total);
  Tape<T>* tape = detail::recording_tape<T>(a);
  detail::finish(out, tape, "sum", [a, out]() mutable {
    if (!out.has_grad()) return;
    const T g = out.grad()[0];
    auto& d = a.node()->grad_buffer();
    for (auto& v : d) v += g;
  });
  return out;
}

/// Elementwise sum of equally shaped tensors.
template <typename T>
Tensor<T> add_n(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw InvalidArgument("add_n: empty input list");
  Tensor<T> out(xs.front().shape());
  for (const auto& x : xs) {
    detail::require(x.shape() == out.shape(), "add_n: shape mismatch");
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] += x[i];
  }
  Tape<T>* tape = nullptr;
  for (const auto& x : xs)
    if (!tape) tape = detail::recording_tape<T>(x);
  detail::finish(out, tape, "add_n", [xs, out]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    for (auto& x : xs) {
      if (!x.requires_grad()) continue;
      auto& d = x.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != static_cast<std::int64_t>(a.numel()))
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tensor<T> out(std::move(shape), std::vector<T>(a.values().begin(), a.values().end()));
  Tape<T>* tape = detail::recording_tape<T>(a);
  detail::finish(out, tape, "reshape", [a, out]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    auto& d = a.node()->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
  return out;
}

/// Concatenates along axis 0; trailing extents must agree.
template <typename T>
Tensor<T> concat0(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw InvalidArgument("concat0: empty input list");
  Shape tail(xs.front().shape().begin() + 1, xs.front().shape().end());
  std::int64_t lead = 0;
  for (const auto& x : xs) {
    detail::require(Shape(x.shape().begin() + 1, x.shape().end()) == tail, "concat0: trailing extents differ");
    lead += x.dim(0);
  }
  Shape shape{lead};
  shape.insert(shape.end(), tail.begin(), tail.end());
  Tensor<T> out(shape);
  std::size_t offset = 0;
  for (const auto& x : xs) {
    std::copy(x.values().begin(), x.values().end(), out.data() + offset);
    offset += x.numel();
  }
  Tape<T>* tape = nullptr;
  for (const auto& x : xs)
    if (!tape) tape = detail::recording_tape<T>(x);
  detail::finish(out, tape, "concat0", [xs, out]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    std::size_t offset = 0;
    for (auto& x : xs) {
      if (x.requires_grad()) {
        auto& d = x.node()->grad_buffer();
        for (std::size_t i = 0; i < x.numel(); ++i) d[i] += g[offset + i];
      }
      offset += x.numel();
    }
  });
  return out;
}

/// Stacks equally shaped tensors along a new leading axis.
template <typename T>
Tensor<T> stack0(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw InvalidArgument("stack0: empty input list");
  std::vector<Tensor<T>> lifted;
  lifted.reserve(xs.size());
  for (const auto& x : xs) {
    detail::require(x.shape() == xs.front().shape(), "stack0: shape mismatch");
    Shape s{1};
    s.insert(s.end(), x.shape().begin(), x.shape().end());
    lifted.push_back(reshape(x, s));
  }
  return concat0(lifted);
}

/// Rows [begin, end) of axis 0.
template <typename T>
Tensor<T> slice0(const Tensor<T>& x, std::int64_t begin, std::int64_t end) {
  detail::require(x.rank() >= 1 && begin >= 0 && end <= x.dim(0) && begin < end, "slice0: bad range");
  Shape shape = x.shape();
  shape[0] = end - begin;
  const std::int64_t stride = static_cast<std::int64_t>(x.numel()) / x.dim(0);
  Tensor<T> out(shape, std::vector<T>(x.data() + begin * stride, x.data() + end * stride));
  Tape<T>* tape = detail::recording_tape<T>(x);
  detail::finish(out, tape, "slice0", [x, out, begin, stride]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    auto& d = x.node()->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) d[static_cast<std::size_t>(begin * stride) + i] += g[i];
  });
  return out;
}

/// Sum over pixels where mask != 0 of |a - target|. Target is a constant.
template <typename T>
Tensor<T> masked_abs_diff_sum(const Tensor<T>& a, std::span<const T> target, std::span<const std::uint8_t> mask) {
  detail::require(target.size() == a.numel() && mask.size() == a.numel(), "masked_abs_diff_sum: size mismatch");
  T total = 0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (mask[i]) total += std::abs(a[i] - target[i]);
  Tensor<T> out(Shape{1}, total);
  std::vector<T> sign(a.numel(), T(0));
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (mask[i]) sign[i] = a[i] > target[i] ? T(1) : (a[i] < target[i] ? T(-1) : T(0));
  Tape<T>* tape = detail::recording_tape<T>(a);
  detail::finish(out, tape, "masked_abs_diff_sum", [a, out, sign = std::move(sign)]() mutable {
    if (!out.has_grad()) return;
    const T g = out.grad()[0];
    auto& d = a.node()->grad_buffer();
    for (std::size_t i = 0; i < sign.size(); ++i) d[i] += g * sign[i];
  });
  return out;
}

}  // namespace attnmvs
