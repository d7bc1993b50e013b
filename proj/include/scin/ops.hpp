#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "scin/error.hpp"
#include "scin/tensor.hpp"

namespace scin {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

inline void require_rank(const Shape& s, std::size_t r, const char* what) {
  if (s.size() != r) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(r) +
                     ", got " + shape_str(s));
  }
}

struct ConvGeom {
  std::size_t cin, d, h, w;      // input
  std::size_t k, stride, pad;
  std::size_t od, oh, ow;        // output
  std::size_t out_vox() const { return od * oh * ow; }
  std::size_t in_vox() const { return d * h * w; }
};

inline std::size_t conv_extent(std::size_t n, std::size_t k, std::size_t stride,
                               std::size_t pad) {
  const long long span = static_cast<long long>(n + 2 * pad) - static_cast<long long>(k);
  if (span < 0) throw ShapeError("conv3d: kernel larger than padded input extent");
  return static_cast<std::size_t>(span) / stride + 1;
}

// Unfolds one instance into a [cin*k^3, out_vox] column matrix.
template <typename T>
void im2col(const T* in, const ConvGeom& g, T* col) {
  const std::size_t k = g.k, n_out = g.out_vox();
  for (std::size_t c = 0; c < g.cin; ++c) {
    const T* src = in + c * g.in_vox();
    for (std::size_t kd = 0; kd < k; ++kd)
      for (std::size_t kh = 0; kh < k; ++kh)
        for (std::size_t kw = 0; kw < k; ++kw) {
          T* row = col + (((c * k + kd) * k + kh) * k + kw) * n_out;
          std::size_t o = 0;
          for (std::size_t z = 0; z < g.od; ++z) {
            const long long iz = static_cast<long long>(z * g.stride + kd) - static_cast<long long>(g.pad);
            for (std::size_t y = 0; y < g.oh; ++y) {
              const long long iy = static_cast<long long>(y * g.stride + kh) - static_cast<long long>(g.pad);
              const bool zy_ok = iz >= 0 && iz < static_cast<long long>(g.d) && iy >= 0 &&
                                 iy < static_cast<long long>(g.h);
              const T* line = zy_ok ? src + (iz * static_cast<long long>(g.h) + iy) * g.w : nullptr;
              for (std::size_t x = 0; x < g.ow; ++x, ++o) {
                const long long ix = static_cast<long long>(x * g.stride + kw) - static_cast<long long>(g.pad);
                row[o] = (zy_ok && ix >= 0 && ix < static_cast<long long>(g.w)) ? line[ix] : T(0);
              }
            }
          }
        }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& g, T* in_grad) {
  const std::size_t k = g.k, n_out = g.out_vox();
  for (std::size_t c = 0; c < g.cin; ++c) {
    T* dst = in_grad + c * g.in_vox();
    for (std::size_t kd = 0; kd < k; ++kd)
      for (std::size_t kh = 0; kh < k; ++kh)
        for (std::size_t kw = 0; kw < k; ++kw) {
          const T* row = col + (((c * k + kd) * k + kh) * k + kw) * n_out;
          std::size_t o = 0;
          for (std::size_t z = 0; z < g.od; ++z) {
            const long long iz = static_cast<long long>(z * g.stride + kd) - static_cast<long long>(g.pad);
            for (std::size_t y = 0; y < g.oh; ++y) {
              const long long iy = static_cast<long long>(y * g.stride + kh) - static_cast<long long>(g.pad);
              if (iz < 0 || iz >= static_cast<long long>(g.d) || iy < 0 ||
                  iy >= static_cast<long long>(g.h)) {
                o += g.ow;
                continue;
              }
              T* line = dst + (iz * static_cast<long long>(g.h) + iy) * g.w;
              for (std::size_t x = 0; x < g.ow; ++x, ++o) {
                const long long ix = static_cast<long long>(x * g.stride + kw) - static_cast<long long>(g.pad);
                if (ix >= 0 && ix < static_cast<long long>(g.w)) line[ix] += row[o];
              }
            }
          }
        }
  }
}

}  // namespace detail

/// Cubic-kernel 3D convolution (cross-correlation) on [B,Cin,D,H,W].
/// weight is [Cout,Cin,k,k,k]; the network uses k=3 for conv blocks and k=1
/// for the output head.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t padding = 1) {
  detail::require_rank(input.shape(), 5, "conv3d input");
  detail::require_rank(weight.shape(), 5, "conv3d weight");
  const std::size_t k = weight.dim(2);
  if (weight.dim(3) != k || weight.dim(4) != k || (k != 1 && k != 3)) {
    throw ShapeError("conv3d: kernel must be cubic 3x3x3 (or 1x1x1), got " +
                     shape_str(weight.shape()));
  }
  if (stride != 1 && stride != 2) throw ShapeError("conv3d: stride must be 1 or 2");
  if (padding > 1) throw ShapeError("conv3d: padding must be 0 or 1");
  const std::size_t B = input.dim(0), cin = input.dim(1), cout = weight.dim(0);
  if (weight.dim(1) != cin) {
    throw ShapeError("conv3d: input has " + std::to_string(cin) + " channels, weight expects " +
                     std::to_string(weight.dim(1)));
  }
  if (bias.numel() != cout) throw ShapeError("conv3d: bias length must equal Cout");

  detail::ConvGeom g{cin, input.dim(2), input.dim(3), input.dim(4), k, stride, padding,
                     0, 0, 0};
  g.od = detail::conv_extent(g.d, k, stride, padding);
  g.oh = detail::conv_extent(g.h, k, stride, padding);
  g.ow = detail::conv_extent(g.w, k, stride, padding);

  const std::size_t kk = cin * k * k * k, n_out = g.out_vox();
  const bool pointwise = (k == 1 && stride == 1 && padding == 0);
  std::vector<T> out(B * cout * n_out);
  std::vector<T> col(pointwise ? 0 : kk * n_out);
  detail::CMapMat<T> W(weight.data().data(), cout, kk);
  for (std::size_t b = 0; b < B; ++b) {
    const T* in_b = input.data().data() + b * cin * g.in_vox();
    const T* cols = in_b;
    if (!pointwise) {
      detail::im2col(in_b, g, col.data());
      cols = col.data();
    }
    detail::MapMat<T> Y(out.data() + b * cout * n_out, cout, n_out);
    Y.noalias() = W * detail::CMapMat<T>(cols, kk, n_out);
    for (std::size_t c = 0; c < cout; ++c) Y.row(c).array() += bias.data()[c];
  }

  return Tensor<T>::from_op(
      Shape{B, cout, g.od, g.oh, g.ow}, std::move(out), {input, weight, bias},
      [input, weight, g, B, cout, kk, n_out, pointwise](std::span<const T> gout,
                                                       std::vector<std::span<T>>& gin) {
        std::vector<T> col(pointwise ? 0 : kk * n_out), dcol(kk * n_out);
        detail::CMapMat<T> W(weight.data().data(), cout, kk);
        for (std::size_t b = 0; b < B; ++b) {
          detail::CMapMat<T> G(gout.data() + b * cout * n_out, cout, n_out);
          const T* in_b = input.data().data() + b * g.cin * g.in_vox();
          const T* cols = in_b;
          if (!pointwise && !gin[1].empty()) {
            detail::im2col(in_b, g, col.data());
            cols = col.data();
          }
          if (!gin[1].empty()) {
            detail::MapMat<T> dW(gin[1].data(), cout, kk);
            dW.noalias() += G * detail::CMapMat<T>(cols, kk, n_out).transpose();
          }
          if (!gin[2].empty()) {
            // fixed-order loop: a vectorised reduction would depend on buffer alignment
            const T* gb = gout.data() + b * cout * n_out;
            for (std::size_t c = 0; c < cout; ++c) {
              T acc = 0;
              for (std::size_t i = 0; i < n_out; ++i) acc += gb[c * n_out + i];
              gin[2][c] += acc;
            }
          }
          if (!gin[0].empty()) {
            T* din = gin[0].data() + b * g.cin * g.in_vox();
            if (pointwise) {
              detail::MapMat<T>(din, kk, n_out).noalias() += W.transpose() * G;
            } else {
              detail::MapMat<T>(dcol.data(), kk, n_out).noalias() = W.transpose() * G;
              detail::col2im_add(dcol.data(), g, din);
            }
          }
        }
      },
      "conv3d");
}

/// Stride-2 transposed convolution with a 2x2x2 kernel; weight is
/// [Cin,Cout,2,2,2]. Output extents are exactly twice the input's.
template <typename T>
Tensor<T> transposed_conv3d(const Tensor<T>& input, const Tensor<T>& weight,
                            const Tensor<T>& bias, std::size_t stride = 2) {
  detail::require_rank(input.shape(), 5, "transposed_conv3d input");
  detail::require_rank(weight.shape(), 5, "transposed_conv3d weight");
  if (stride != 2) throw ShapeError("transposed_conv3d: only stride 2 is supported");
  if (weight.dim(2) != 2 || weight.dim(3) != 2 || weight.dim(4) != 2) {
    throw ShapeError("transposed_conv3d: kernel must be 2x2x2, got " + shape_str(weight.shape()));
  }
  const std::size_t B = input.dim(0), cin = input.dim(1), cout = weight.dim(1);
  if (weight.dim(0) != cin) {
    throw ShapeError("transposed_conv3d: input has " + std::to_string(cin) +
                     " channels, weight expects " + std::to_string(weight.dim(0)));
  }
  if (bias.numel() != cout) throw ShapeError("transposed_conv3d: bias length must equal Cout");
  const std::size_t d = input.dim(2), h = input.dim(3), w = input.dim(4);
  const std::size_t n_in = d * h * w, n_out = 8 * n_in, taps = cout * 8;
  std::vector<T> out(B * cout * n_out);
  std::vector<T> Ybuf(taps * n_in);
  detail::CMapMat<T> Wm(weight.data().data(), cin, taps);

  auto out_index = [=](std::size_t co, std::size_t tap, std::size_t z, std::size_t y,
                       std::size_t x) {
    const std::size_t a = tap >> 2, bb = (tap >> 1) & 1, c = tap & 1;
    return ((co * 2 * d + 2 * z + a) * 2 * h + 2 * y + bb) * 2 * w + 2 * x + c;
  };

  for (std::size_t b = 0; b < B; ++b) {
    detail::MapMat<T> Y(Ybuf.data(), taps, n_in);
    Y.noalias() = Wm.transpose() * detail::CMapMat<T>(input.data().data() + b * cin * n_in, cin, n_in);
    T* ob = out.data() + b * cout * n_out;
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t tap = 0; tap < 8; ++tap) {
        const T* row = Ybuf.data() + (co * 8 + tap) * n_in;
        std::size_t n = 0;
        for (std::size_t z = 0; z < d; ++z)
          for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x, ++n)
              ob[out_index(co, tap, z, y, x)] = row[n] + bias.data()[co];
      }
  }

  return Tensor<T>::from_op(
      Shape{B, cout, 2 * d, 2 * h, 2 * w}, std::move(out), {input, weight, bias},
      [input, weight, B, cin, cout, d, h, w, n_in, n_out, taps, out_index](
          std::span<const T> gout, std::vector<std::span<T>>& gin) {
        std::vector<T> Gbuf(taps * n_in);
        detail::CMapMat<T> Wm(weight.data().data(), cin, taps);
        for (std::size_t b = 0; b < B; ++b) {
          const T* gb = gout.data() + b * cout * n_out;
          for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t tap = 0; tap < 8; ++tap) {
              T* row = Gbuf.data() + (co * 8 + tap) * n_in;
              std::size_t n = 0;
              for (std::size_t z = 0; z < d; ++z)
                for (std::size_t y = 0; y < h; ++y)
                  for (std::size_t x = 0; x < w; ++x, ++n) row[n] = gb[out_index(co, tap, z, y, x)];
            }
          detail::CMapMat<T> G(Gbuf.data(), taps, n_in);
          if (!gin[0].empty()) {
            detail::MapMat<T>(gin[0].data() + b * cin * n_in, cin, n_in).noalias() += Wm * G;
          }
          if (!gin[1].empty()) {
            detail::MapMat<T>(gin[1].data(), cin, taps).noalias() +=
                detail::CMapMat<T>(input.data().data() + b * cin * n_in, cin, n_in) * G.transpose();
          }
          if (!gin[2].empty()) {
            for (std::size_t co = 0; co < cout; ++co) {
              T s = 0;
              for (std::size_t i = 0; i < 8 * n_in; ++i) s += gb[co * n_out + i];
              gin[2][co] += s;
            }
          }
        }
      },
      "transposed_conv3d");
}

/// max(x, slope*x). The subgradient at exactly 0 is `slope`.
template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(0.01)) {
  std::vector<T> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > T(0) ? in[i] : slope * in[i];
  return Tensor<T>::from_op(
      x.shape(), std::move(out), {x},
      [x, slope](std::span<const T> g, std::vector<std::span<T>>& gin) {
        auto in = x.data();
        for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += in[i] > T(0) ? g[i] : slope * g[i];
      },
      "leaky_relu");
}

/// Inverted dropout. In eval mode (or p == 0) this returns `x` itself.
template <typename T, typename Rng>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ParameterError("dropout: p must lie in [0,1), got " + std::to_string(p));
  }
  if (!training || p == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  const T scale = T(1.0 / (1.0 - p));
  std::vector<T> mask(x.numel());
  std::vector<T> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = keep(rng) ? scale : T(0);
    out[i] = in[i] * mask[i];
  }
  return Tensor<T>::from_op(
      x.shape(), std::move(out), {x},
      [mask = std::move(mask)](std::span<const T> g, std::vector<std::span<T>>& gin) {
        for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * mask[i];
      },
      "dropout");
}

/// Mean binary cross-entropy on logits, in the overflow-free form
/// max(x,0) - x*t + log1p(exp(-|x|)).
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets) {
  if (logits.shape() != targets.shape()) {
    throw ShapeError("bce_with_logits: logits " + shape_str(logits.shape()) + " vs targets " +
                     shape_str(targets.shape()));
  }
  auto x = logits.data();
  auto t = targets.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(t[i] >= T(0) && t[i] <= T(1))) {
      throw DomainError("bce_with_logits: target outside [0,1] at index " + std::to_string(i));
    }
    const double xi = x[i];
    acc += std::max(xi, 0.0) - xi * double(t[i]) + std::log1p(std::exp(-std::abs(xi)));
  }
  const double n = static_cast<double>(x.size());
  return Tensor<T>::from_op(
      Shape{}, {T(acc / n)}, {logits, targets},
      [logits, targets, n](std::span<const T> g, std::vector<std::span<T>>& gin) {
        if (gin[0].empty()) return;
        auto x = logits.data();
        auto t = targets.data();
        const T scale = g[0] / T(n);
        for (std::size_t i = 0; i < x.size(); ++i) {
          const T s = x[i] >= T(0) ? T(1) / (T(1) + std::exp(-x[i]))
                                   : std::exp(x[i]) / (T(1) + std::exp(x[i]));
          gin[0][i] += scale * (s - t[i]);
        }
      },
      "bce_with_logits");
}

/// Channel-axis concatenation of two [B,C,D,H,W] tensors (U-Net skips).
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a.shape(), 5, "concat_channels");
  detail::require_rank(b.shape(), 5, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3) || a.dim(4) != b.dim(4)) {
    throw ShapeError("concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t B = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const std::size_t vox = a.dim(2) * a.dim(3) * a.dim(4);
  std::vector<T> out(B * (ca + cb) * vox);
  for (std::size_t n = 0; n < B; ++n) {
    std::copy_n(a.data().data() + n * ca * vox, ca * vox, out.data() + n * (ca + cb) * vox);
    std::copy_n(b.data().data() + n * cb * vox, cb * vox, out.data() + (n * (ca + cb) + ca) * vox);
  }
  return Tensor<T>::from_op(
      Shape{B, ca + cb, a.dim(2), a.dim(3), a.dim(4)}, std::move(out), {a, b},
      [B, ca, cb, vox](std::span<const T> g, std::vector<std::span<T>>& gin) {
        for (std::size_t n = 0; n < B; ++n) {
          const T* src = g.data() + n * (ca + cb) * vox;
          if (!gin[0].empty())
            for (std::size_t i = 0; i < ca * vox; ++i) gin[0][n * ca * vox + i] += src[i];
          if (!gin[1].empty())
            for (std::size_t i = 0; i < cb * vox; ++i) gin[1][n * cb * vox + i] += src[ca * vox + i];
        }
      },
      "concat_channels");
}

/// Elementwise product of same-shape tensors.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return Tensor<T>::from_op(
      a.shape(), std::move(out), {a, b},
      [a, b](std::span<const T> g, std::vector<std::span<T>>& gin) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (!gin[0].empty()) gin[0][i] += g[i] * b.data()[i];
          if (!gin[1].empty()) gin[1][i] += g[i] * a.data()[i];
        }
      },
      "mul");
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  return Tensor<T>::from_op(
      Shape{}, {s}, {x},
      [](std::span<const T> g, std::vector<std::span<T>>& gin) {
        for (auto& v : gin[0]) v += g[0];
      },
      "sum");
}

template <typename T>
std::vector<T> sigmoid_values(std::span<const T> logits) {
  std::vector<T> out(logits.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = logits[i];
    out[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
  }
  return out;
}

}  // namespace scin
