#pragma once

// Neural-network primitives (convolution, pooling, upsampling, batch
// normalization, activations, LSTM, cross-entropy) and the parameter-holding
// layer types built on them. Image tensors are laid out (N, C, H, W).

#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "dhan/tensor.hpp"

namespace dhan {

enum class Mode { train, eval };

template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;  // false for running statistics
};

template <class T>
using ParamList = std::vector<NamedTensor<T>>;

namespace nn {

namespace detail {

inline void require_rank(std::string_view op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " + shape_str(s));
  }
}

// C[m x n] += A[m x k] * B[k x n]
template <class T, class A>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, A* c) {
  for (std::size_t i = 0; i < m; ++i) {
    A* cr = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const A av = a[i * k + p];
      if (av == 0) continue;
      const T* br = b + p * n;
      for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

// C[k x n] += A^T * B with A[m x k], B[m x n]
template <class T, class A>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, A* c) {
  for (std::size_t p = 0; p < k; ++p) {
    A* cr = c + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const A av = a[i * k + p];
      if (av == 0) continue;
      const T* br = b + i * n;
      for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

// C[m x k] += A * B^T with A[m x n], B[k x n]
template <class T, class A>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, A* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ar = a + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T* br = b + p * n;
      // Eight independent partial sums so the reduction vectorizes.
      A part[8] = {};
      std::size_t j = 0;
      for (; j + 8 <= n; j += 8) {
        for (std::size_t u = 0; u < 8; ++u) part[u] += static_cast<A>(ar[j + u]) * br[j + u];
      }
      A s = 0;
      for (; j < n; ++j) s += static_cast<A>(ar[j]) * br[j];
      for (std::size_t u = 0; u < 8; ++u) s += part[u];
      c[i * k + p] += s;
    }
  }
}

struct ConvGeometry {
  std::size_t channels, height, width, kernel, stride, pad, out_h, out_w;
  std::size_t col_rows() const { return channels * kernel * kernel; }
  std::size_t col_cols() const { return out_h * out_w; }
  bool is_pointwise() const { return kernel == 1 && stride == 1 && pad == 0; }
};

template <class T>
void im2col(const ConvGeometry& g, const T* img, T* col) {
  const std::size_t cols = g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        T* dst = col + ((c * g.kernel + ki) * g.kernel + kj) * cols;
        // Output columns whose input column falls inside the image.
        const long off = static_cast<long>(kj) - static_cast<long>(g.pad);
        const long st = static_cast<long>(g.stride);
        long lo = 0;
        while (lo < static_cast<long>(g.out_w) && lo * st + off < 0) ++lo;
        long hi = static_cast<long>(g.out_w);
        while (hi > lo && (hi - 1) * st + off >= static_cast<long>(g.width)) --hi;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          T* row = dst + oy * g.out_w;
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.height)) {
            std::fill(row, row + g.out_w, T(0));
            continue;
          }
          const T* src = img + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          std::fill(row, row + lo, T(0));
          for (long ox = lo; ox < hi; ++ox) row[ox] = src[ox * st + off];
          std::fill(row + hi, row + g.out_w, T(0));
        }
      }
    }
  }
}

template <class S>
void col2im_add(const ConvGeometry& g, const S* col, acc_t* img) {
  const std::size_t cols = g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        const S* src = col + ((c * g.kernel + ki) * g.kernel + kj) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
            img[(c * g.height + iy) * g.width + ix] += src[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// Cross-correlation. Weight (out, in, k, k); bias (out) may be undefined.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                 std::size_t pad) {
  detail::require_rank("conv2d", x.shape(), 4);
  detail::require_rank("conv2d", weight.shape(), 4);
  if (weight.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d: channel mismatch, input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  }
  if (weight.dim(2) != weight.dim(3)) throw ShapeError("conv2d: non-square kernel " + shape_str(weight.shape()));
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  const std::size_t n = x.dim(0), out_c = weight.dim(0), k = weight.dim(2);
  detail::ConvGeometry geo{x.dim(1), x.dim(2), x.dim(3), k, stride, pad, 0, 0};
  if (geo.height + 2 * pad < k || geo.width + 2 * pad < k) {
    throw ShapeError("conv2d: kernel " + std::to_string(k) + " larger than padded input " + shape_str(x.shape()));
  }
  geo.out_h = (geo.height + 2 * pad - k) / stride + 1;
  geo.out_w = (geo.width + 2 * pad - k) / stride + 1;
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_c)) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) + " does not match " + std::to_string(out_c) + " filters");
  }

  const std::size_t rows = geo.col_rows(), cols = geo.col_cols();
  const std::size_t in_sz = geo.channels * geo.height * geo.width;
  std::vector<T> out(n * out_c * cols);
  std::vector<T> col(geo.is_pointwise() ? 0 : rows * cols);
  std::vector<T> acc(out_c * cols);
  const T* w = weight.data().data();
  for (std::size_t b = 0; b < n; ++b) {
    const T* img = x.data().data() + b * in_sz;
    const T* cm = img;
    if (!geo.is_pointwise()) {
      detail::im2col(geo, img, col.data());
      cm = col.data();
    }
    std::fill(acc.begin(), acc.end(), 0.0);
    detail::gemm_nn(out_c, rows, cols, w, cm, acc.data());
    T* dst = out.data() + b * out_c * cols;
    for (std::size_t o = 0; o < out_c; ++o) {
      const T bv = bias.defined() ? bias.data()[o] : T(0);
      for (std::size_t j = 0; j < cols; ++j) dst[o * cols + j] = static_cast<T>(acc[o * cols + j] + bv);
    }
  }

  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return ::dhan::detail::make_result<T>("conv2d", {n, out_c, geo.out_h, geo.out_w}, std::move(out), inputs,
                                        [geo, n, out_c, in_sz](::dhan::detail::Node<T>& self) {
    const std::size_t rows = geo.col_rows(), cols = geo.col_cols();
    const T* xv = ::dhan::detail::value_of(self, 0);
    const T* w = ::dhan::detail::value_of(self, 1);
    T* gx = ::dhan::detail::grad_of(self, 0);
    T* gw = ::dhan::detail::grad_of(self, 1);
    T* gb = self.inputs.size() > 2 ? ::dhan::detail::grad_of(self, 2) : nullptr;
    std::vector<T> col(geo.is_pointwise() ? 0 : rows * cols);
    std::vector<acc_t> dcol(gx ? rows * cols : 0);
    std::vector<acc_t> dimg(gx && !geo.is_pointwise() ? in_sz : 0);
    std::vector<T> dw(gw ? out_c * rows : 0, T(0));
    std::vector<acc_t> db(gb ? out_c : 0, 0.0);
    for (std::size_t b = 0; b < n; ++b) {
      const T* go = self.grad.data() + b * out_c * cols;
      if (gb) {
        for (std::size_t o = 0; o < out_c; ++o) {
          acc_t s = 0;
          for (std::size_t j = 0; j < cols; ++j) s += go[o * cols + j];
          db[o] += s;
        }
      }
      if (gw) {
        const T* cm = xv + b * in_sz;
        if (!geo.is_pointwise()) {
          detail::im2col(geo, cm, col.data());
          cm = col.data();
        }
        detail::gemm_nt(out_c, rows, cols, go, cm, dw.data());
      }
      if (gx) {
        std::fill(dcol.begin(), dcol.end(), 0.0);
        detail::gemm_tn(out_c, rows, cols, w, go, dcol.data());
        T* gimg = gx + b * in_sz;
        if (geo.is_pointwise()) {
          for (std::size_t i = 0; i < rows * cols; ++i) gimg[i] += static_cast<T>(dcol[i]);
        } else {
          std::fill(dimg.begin(), dimg.end(), 0.0);
          detail::col2im_add(geo, dcol.data(), dimg.data());
          for (std::size_t i = 0; i < in_sz; ++i) gimg[i] += static_cast<T>(dimg[i]);
        }
      }
    }
    if (gw) for (std::size_t i = 0; i < dw.size(); ++i) gw[i] += static_cast<T>(dw[i]);
    if (gb) for (std::size_t i = 0; i < db.size(); ++i) gb[i] += static_cast<T>(db[i]);
  });
}

// Max pooling with implicit -inf padding. The gradient goes to the first
// maximal element of each window.
template <class T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t window, std::size_t stride, std::size_t pad = 0) {
  detail::require_rank("max_pool2d", x.shape(), 4);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (window == 0 || stride == 0) throw std::invalid_argument("max_pool2d: window and stride must be positive");
  if (window > h + 2 * pad || window > w + 2 * pad) {
    throw ShapeError("max_pool2d: window " + std::to_string(window) + " larger than padded input " + shape_str(x.shape()));
  }
  if (pad >= window) throw std::invalid_argument("max_pool2d: padding must be smaller than the window");
  const std::size_t oh = (h + 2 * pad - window) / stride + 1, ow = (w + 2 * pad - window) / stride + 1;
  std::vector<T> out(n * c * oh * ow);
  std::vector<std::size_t> argmax(out.size());
  auto xv = x.data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_i = 0;
        bool found = false;
        for (std::size_t ky = 0; ky < window; ++ky) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t kx = 0; kx < window; ++kx) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            const std::size_t idx = base + iy * w + ix;
            if (!found || xv[idx] > best) {
              best = xv[idx];
              best_i = idx;
              found = true;
            }
          }
        }
        const std::size_t o = (plane * oh + oy) * ow + ox;
        out[o] = best;
        argmax[o] = best_i;
      }
    }
  }
  return ::dhan::detail::make_result<T>("max_pool2d", {n, c, oh, ow}, std::move(out), {x},
                                        [argmax = std::move(argmax)](::dhan::detail::Node<T>& self) {
    if (T* g = ::dhan::detail::grad_of(self, 0)) {
      for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += self.grad[o];
    }
  });
}

// (N, C, H, W) -> (N, C): mean over all spatial positions.
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require_rank("global_avg_pool", x.shape(), 4);
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(n * c);
  auto xv = x.data();
  for (std::size_t p = 0; p < n * c; ++p) {
    acc_t s = 0;
    for (std::size_t i = 0; i < hw; ++i) s += xv[p * hw + i];
    out[p] = static_cast<T>(s / static_cast<acc_t>(hw));
  }
  return ::dhan::detail::make_result<T>("global_avg_pool", {n, c}, std::move(out), {x}, [hw](::dhan::detail::Node<T>& self) {
    if (T* g = ::dhan::detail::grad_of(self, 0)) {
      for (std::size_t p = 0; p < self.grad.size(); ++p) {
        const T share = static_cast<T>(static_cast<acc_t>(self.grad[p]) / static_cast<acc_t>(hw));
        for (std::size_t i = 0; i < hw; ++i) g[p * hw + i] += share;
      }
    }
  });
}

namespace detail {

struct Lerp {
  std::size_t lo, hi;
  acc_t frac;
};

// Align-corners source coordinates for an upsampled axis.
inline std::vector<Lerp> align_corners_taps(std::size_t in, std::size_t out) {
  std::vector<Lerp> taps(out);
  for (std::size_t i = 0; i < out; ++i) {
    if (in == 1 || out == 1) {
      taps[i] = {0, 0, 0.0};
      continue;
    }
    const acc_t src = static_cast<acc_t>(i) * static_cast<acc_t>(in - 1) / static_cast<acc_t>(out - 1);
    auto lo = static_cast<std::size_t>(std::floor(src));
    if (lo >= in - 1) lo = in - 1;
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[i] = {lo, hi, src - static_cast<acc_t>(lo)};
  }
  return taps;
}

}  // namespace detail

// Bilinear upsampling by an integer factor, align-corners convention.
template <class T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, std::size_t scale) {
  detail::require_rank("bilinear_upsample", x.shape(), 4);
  if (scale < 2) throw std::invalid_argument("bilinear_upsample: scale must be >= 2, got " + std::to_string(scale));
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h * scale, ow = w * scale;
  auto ty = detail::align_corners_taps(h, oh);
  auto tx = detail::align_corners_taps(w, ow);
  std::vector<T> out(n * c * oh * ow);
  auto xv = x.data();
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = xv.data() + p * h * w;
    T* dst = out.data() + p * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const auto& a = ty[oy];
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const auto& b = tx[ox];
        const acc_t top = (1 - b.frac) * src[a.lo * w + b.lo] + b.frac * src[a.lo * w + b.hi];
        const acc_t bot = (1 - b.frac) * src[a.hi * w + b.lo] + b.frac * src[a.hi * w + b.hi];
        dst[oy * ow + ox] = static_cast<T>((1 - a.frac) * top + a.frac * bot);
      }
    }
  }
  return ::dhan::detail::make_result<T>("bilinear_upsample", {n, c, oh, ow}, std::move(out), {x},
                                        [ty, tx, h, w, oh, ow](::dhan::detail::Node<T>& self) {
    T* g = ::dhan::detail::grad_of(self, 0);
    if (!g) return;
    const std::size_t planes = self.grad.size() / (oh * ow);
    std::vector<acc_t> acc(h * w);
    for (std::size_t p = 0; p < planes; ++p) {
      std::fill(acc.begin(), acc.end(), 0.0);
      const T* go = self.grad.data() + p * oh * ow;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        const auto& a = ty[oy];
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const auto& b = tx[ox];
          const acc_t v = go[oy * ow + ox];
          acc[a.lo * w + b.lo] += v * (1 - a.frac) * (1 - b.frac);
          acc[a.lo * w + b.hi] += v * (1 - a.frac) * b.frac;
          acc[a.hi * w + b.lo] += v * a.frac * (1 - b.frac);
          acc[a.hi * w + b.hi] += v * a.frac * b.frac;
        }
      }
      for (std::size_t i = 0; i < h * w; ++i) g[p * h * w + i] += static_cast<T>(acc[i]);
    }
  });
}

struct BatchNormOptions {
  Mode mode = Mode::train;
  double momentum = 0.9;  // running <- momentum * running + (1 - momentum) * batch
  double eps = 1e-5;
};

// Per-channel normalization over (N, C) or (N, C, H, W) input, channel axis 1.
// Train mode uses biased batch statistics and updates the running buffers;
// eval mode uses the running buffers.
template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                     Tensor<T>& running_var, const BatchNormOptions& opt) {
  if (x.rank() != 2 && x.rank() != 4) throw ShapeError("batch_norm: expected rank 2 or 4, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  for (const Tensor<T>* p : std::initializer_list<const Tensor<T>*>{&gamma, &beta, &running_mean, &running_var}) {
    if (p->rank() != 1 || p->dim(0) != c) throw_shape_mismatch("batch_norm", x.shape(), p->shape());
  }
  const std::size_t count = n * hw;
  std::vector<acc_t> mu(c), inv_std(c);
  auto xv = x.data();
  if (opt.mode == Mode::train) {
    if (count < 2) {
      throw std::invalid_argument("batch_norm: train mode needs at least 2 values per channel, got input " +
                                  shape_str(x.shape()));
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      acc_t s = 0, s2 = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = xv.data() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) s += p[i];
      }
      mu[ch] = s / static_cast<acc_t>(count);
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = xv.data() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) s2 += (p[i] - mu[ch]) * (p[i] - mu[ch]);
      }
      const acc_t var = s2 / static_cast<acc_t>(count);
      inv_std[ch] = 1.0 / std::sqrt(var + opt.eps);
      auto rm = running_mean.data_mut();
      auto rv = running_var.data_mut();
      rm[ch] = static_cast<T>(opt.momentum * rm[ch] + (1 - opt.momentum) * mu[ch]);
      rv[ch] = static_cast<T>(opt.momentum * rv[ch] + (1 - opt.momentum) * var);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = running_mean.data()[ch];
      inv_std[ch] = 1.0 / std::sqrt(static_cast<acc_t>(running_var.data()[ch]) + opt.eps);
    }
  }
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  auto gv = gamma.data(), bv = beta.data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const acc_t xh = (xv[off + i] - mu[ch]) * inv_std[ch];
        xhat[off + i] = static_cast<T>(xh);
        out[off + i] = static_cast<T>(gv[ch] * xh + bv[ch]);
      }
    }
  }
  const bool batch_stats = opt.mode == Mode::train;
  return ::dhan::detail::make_result<T>("batch_norm", x.shape(), std::move(out), {x, gamma, beta},
                                        [n, c, hw, count, inv_std, batch_stats, xhat = std::move(xhat)](::dhan::detail::Node<T>& self) {
    const T* gam = ::dhan::detail::value_of(self, 1);
    T* gx = ::dhan::detail::grad_of(self, 0);
    T* gg = ::dhan::detail::grad_of(self, 1);
    T* gb = ::dhan::detail::grad_of(self, 2);
    for (std::size_t ch = 0; ch < c; ++ch) {
      acc_t sum_dy = 0, sum_dy_xhat = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t off = (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          sum_dy += self.grad[off + i];
          sum_dy_xhat += static_cast<acc_t>(self.grad[off + i]) * xhat[off + i];
        }
      }
      if (gg) gg[ch] += static_cast<T>(sum_dy_xhat);
      if (gb) gb[ch] += static_cast<T>(sum_dy);
      if (!gx) continue;
      const acc_t k = gam[ch] * inv_std[ch];
      const acc_t m = static_cast<acc_t>(count);
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t off = (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          acc_t d = self.grad[off + i];
          if (batch_stats) d = d - sum_dy / m - xhat[off + i] * sum_dy_xhat / m;
          gx[off + i] += static_cast<T>(k * d);
        }
      }
    }
  });
}

// x @ W^T + b with x (N, in), W (out, in), b (out) optional.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) throw_shape_mismatch("linear", x.shape(), weight.shape());
  const std::size_t n = x.dim(0), in = x.dim(1), out_f = weight.dim(0);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_f)) throw_shape_mismatch("linear", weight.shape(), bias.shape());
  std::vector<acc_t> acc(n * out_f, 0.0);
  detail::gemm_nt(n, out_f, in, x.data().data(), weight.data().data(), acc.data());
  std::vector<T> out(n * out_f);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t o = 0; o < out_f; ++o) {
      out[r * out_f + o] = static_cast<T>(acc[r * out_f + o] + (bias.defined() ? static_cast<acc_t>(bias.data()[o]) : 0.0));
    }
  }
  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return ::dhan::detail::make_result<T>("linear", {n, out_f}, std::move(out), inputs, [n, in, out_f](::dhan::detail::Node<T>& self) {
    const T* xv = ::dhan::detail::value_of(self, 0);
    const T* w = ::dhan::detail::value_of(self, 1);
    const T* go = self.grad.data();
    if (T* gx = ::dhan::detail::grad_of(self, 0)) {
      std::vector<acc_t> acc(n * in, 0.0);
      detail::gemm_nn(n, out_f, in, go, w, acc.data());
      for (std::size_t i = 0; i < acc.size(); ++i) gx[i] += static_cast<T>(acc[i]);
    }
    if (T* gw = ::dhan::detail::grad_of(self, 1)) {
      std::vector<acc_t> acc(out_f * in, 0.0);
      detail::gemm_tn(n, out_f, in, go, xv, acc.data());
      for (std::size_t i = 0; i < acc.size(); ++i) gw[i] += static_cast<T>(acc[i]);
    }
    if (self.inputs.size() > 2) {
      if (T* gb = ::dhan::detail::grad_of(self, 2)) {
        for (std::size_t o = 0; o < out_f; ++o) {
          acc_t s = 0;
          for (std::size_t r = 0; r < n; ++r) s += go[r * out_f + o];
          gb[o] += static_cast<T>(s);
        }
      }
    }
  });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  return ::dhan::detail::make_result<T>("relu", x.shape(), std::move(out), {x}, [](::dhan::detail::Node<T>& self) {
    if (T* g = ::dhan::detail::grad_of(self, 0)) {
      const T* xv = ::dhan::detail::value_of(self, 0);
      for (std::size_t i = 0; i < self.grad.size(); ++i) if (xv[i] > T(0)) g[i] += self.grad[i];
    }
  });
}

// Parametric ReLU with one slope per channel (axis 1), or a single shared slope.
template <class T>
Tensor<T> prelu(const Tensor<T>& x, const Tensor<T>& slope) {
  const std::size_t n = x.dim(0);
  const std::size_t c = x.rank() >= 2 ? x.dim(1) : 1;
  if (slope.numel() != c && slope.numel() != 1) throw_shape_mismatch("prelu", x.shape(), slope.shape());
  const std::size_t inner = x.numel() / (n * c);
  const bool shared = slope.numel() == 1;
  std::vector<T> out(x.numel());
  auto xv = x.data(), sv = slope.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T a = sv[shared ? 0 : (i / inner) % c];
    out[i] = xv[i] > T(0) ? xv[i] : a * xv[i];
  }
  return ::dhan::detail::make_result<T>("prelu", x.shape(), std::move(out), {x, slope},
                                        [c, inner, shared](::dhan::detail::Node<T>& self) {
    const T* xv = ::dhan::detail::value_of(self, 0);
    const T* sv = ::dhan::detail::value_of(self, 1);
    T* gx = ::dhan::detail::grad_of(self, 0);
    T* gs = ::dhan::detail::grad_of(self, 1);
    std::vector<acc_t> ds(shared ? 1 : c, 0.0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const std::size_t ch = shared ? 0 : (i / inner) % c;
      if (xv[i] > T(0)) {
        if (gx) gx[i] += self.grad[i];
      } else {
        if (gx) gx[i] += sv[ch] * self.grad[i];
        ds[ch] += static_cast<acc_t>(self.grad[i]) * xv[i];
      }
    }
    if (gs) for (std::size_t ch = 0; ch < ds.size(); ++ch) gs[ch] += static_cast<T>(ds[ch]);
  });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const acc_t v = xv[i];
    out[i] = static_cast<T>(v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)));
  }
  return ::dhan::detail::make_result<T>("sigmoid", x.shape(), std::move(out), {x}, [](::dhan::detail::Node<T>& self) {
    if (T* g = ::dhan::detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const T s = self.value[i];
        g[i] += self.grad[i] * s * (T(1) - s);
      }
    }
  });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(std::tanh(static_cast<acc_t>(xv[i])));
  return ::dhan::detail::make_result<T>("tanh", x.shape(), std::move(out), {x}, [](::dhan::detail::Node<T>& self) {
    if (T* g = ::dhan::detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const T t = self.value[i];
        g[i] += self.grad[i] * (T(1) - t * t);
      }
    }
  });
}

// Softmax over the last axis with max subtraction.
template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  const std::size_t k = x.shape().back(), rows = x.numel() / k;
  std::vector<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * k;
    const acc_t mx = *std::max_element(in, in + k);
    acc_t z = 0;
    std::vector<acc_t> e(k);
    for (std::size_t j = 0; j < k; ++j) z += (e[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = static_cast<T>(e[j] / z);
  }
  return ::dhan::detail::make_result<T>("softmax", x.shape(), std::move(out), {x}, [rows, k](::dhan::detail::Node<T>& self) {
    if (T* g = ::dhan::detail::grad_of(self, 0)) {
      for (std::size_t r = 0; r < rows; ++r) {
        const T* p = self.value.data() + r * k;
        const T* go = self.grad.data() + r * k;
        acc_t dot = 0;
        for (std::size_t j = 0; j < k; ++j) dot += static_cast<acc_t>(go[j]) * p[j];
        for (std::size_t j = 0; j < k; ++j) g[r * k + j] += static_cast<T>(p[j] * (go[j] - dot));
      }
    }
  });
}

inline constexpr double kMinProbability = 1e-12;

// Mean over rows of -ln(max(p[label], 1e-12)). probs is (K) or (N, K).
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& probs, std::span<const std::size_t> labels) {
  Tensor<T> p2 = probs.rank() == 1 ? reshape(probs, {1, probs.dim(0)}) : probs;
  if (p2.rank() != 2 || labels.size() != p2.dim(0)) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for probabilities " + shape_str(probs.shape()));
  }
  const std::size_t k = p2.dim(1);
  for (std::size_t r = 0; r < p2.dim(0); ++r) {
    if (labels[r] >= k) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(labels[r]) + " out of range for " + std::to_string(k) + " classes");
    }
    acc_t s = 0;
    for (std::size_t j = 0; j < k; ++j) s += p2.data()[r * k + j];
    if (std::abs(s - 1.0) > 1e-5) throw std::invalid_argument("cross_entropy: probabilities do not sum to 1");
  }
  auto chosen = clamp(pick(p2, labels), static_cast<T>(kMinProbability), T(1));
  return scale(mean(::dhan::log(chosen)), T(-1));
}

template <class T>
Tensor<T> cross_entropy(const Tensor<T>& probs, std::size_t label) {
  const std::size_t one[1] = {label};
  return cross_entropy(probs, std::span<const std::size_t>(one));
}

// ---------------------------------------------------------------------------
// Parameterized layers

using Rng = std::mt19937_64;

template <class T>
Tensor<T> kaiming_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(v), true);
}

template <class T>
struct Dense {
  Tensor<T> weight, bias;

  Dense() = default;
  Dense(std::size_t in, std::size_t out, Rng& rng)
      : weight(kaiming_normal<T>({out, in}, in, rng)), bias(Tensor<T>::zeros({out}, true)) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight, true});
    out.push_back({prefix + ".bias", bias, true});
  }
};

template <class T>
struct Conv2d {
  Tensor<T> weight, bias;
  std::size_t stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride_, std::size_t pad_, Rng& rng)
      : weight(kaiming_normal<T>({out, in, kernel, kernel}, in * kernel * kernel, rng)),
        bias(Tensor<T>::zeros({out}, true)),
        stride(stride_),
        pad(pad_) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, pad); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight, true});
    out.push_back({prefix + ".bias", bias, true});
  }
};

template <class T>
struct BatchNorm {
  Tensor<T> gamma, beta, running_mean, running_var;
  double momentum = 0.9, eps = 1e-5;

  BatchNorm() = default;
  BatchNorm(std::size_t channels, double momentum_ = 0.9, double eps_ = 1e-5)
      : gamma(Tensor<T>::full({channels}, T(1), true)),
        beta(Tensor<T>::zeros({channels}, true)),
        running_mean(Tensor<T>::zeros({channels})),
        running_var(Tensor<T>::full({channels}, T(1))),
        momentum(momentum_),
        eps(eps_) {}

  Tensor<T> operator()(const Tensor<T>& x, Mode mode) {
    return batch_norm(x, gamma, beta, running_mean, running_var, {mode, momentum, eps});
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".gamma", gamma, true});
    out.push_back({prefix + ".beta", beta, true});
    out.push_back({prefix + ".running_mean", running_mean, false});
    out.push_back({prefix + ".running_var", running_var, false});
  }
};

template <class T>
struct PReLU {
  Tensor<T> slope;

  PReLU() = default;
  explicit PReLU(std::size_t channels, T init = T(0.25)) : slope(Tensor<T>::full({channels}, init, true)) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return prelu(x, slope); }

  void collect(const std::string& prefix, ParamList<T>& out) const { out.push_back({prefix + ".slope", slope, true}); }
};

template <class T>
struct LSTMState {
  Tensor<T> h, c;
};

// Gate order in the stacked weights: input, forget, candidate, output.
template <class T>
struct LSTMCell {
  Tensor<T> w_ih, w_hh, bias;
  std::size_t hidden = 0;

  LSTMCell() = default;
  LSTMCell(std::size_t in, std::size_t hidden_, Rng& rng) : hidden(hidden_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    std::uniform_real_distribution<double> dist(-bound, bound);
    auto fill = [&](Shape s) {
      std::vector<T> v(shape_numel(s));
      for (auto& x : v) x = static_cast<T>(dist(rng));
      return Tensor<T>(std::move(s), std::move(v), true);
    };
    w_ih = fill({4 * hidden, in});
    w_hh = fill({4 * hidden, hidden});
    std::vector<T> b(4 * hidden, T(0));
    for (std::size_t i = hidden; i < 2 * hidden; ++i) b[i] = T(1);  // forget gate
    bias = Tensor<T>({4 * hidden}, std::move(b), true);
  }

  LSTMState<T> initial_state(std::size_t batch) const {
    return {Tensor<T>::zeros({batch, hidden}), Tensor<T>::zeros({batch, hidden})};
  }

  LSTMState<T> operator()(const Tensor<T>& x, const LSTMState<T>& state) const {
    if (state.h.rank() != 2 || state.h.dim(1) != hidden || state.c.shape() != state.h.shape() ||
        x.rank() != 2 || x.dim(0) != state.h.dim(0)) {
      throw ShapeError("lstm_cell: input " + shape_str(x.shape()) + " incompatible with state " + shape_str(state.h.shape()) +
                       " for hidden width " + std::to_string(hidden));
    }
    auto gates = add(linear(x, w_ih, bias), linear(state.h, w_hh, Tensor<T>()));
    auto i = sigmoid(narrow(gates, 1, 0, hidden));
    auto f = sigmoid(narrow(gates, 1, hidden, hidden));
    auto g = tanh(narrow(gates, 1, 2 * hidden, hidden));
    auto o = sigmoid(narrow(gates, 1, 3 * hidden, hidden));
    auto c = add(mul(f, state.c), mul(i, g));
    auto h = mul(o, tanh(c));
    return {h, c};
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".w_ih", w_ih, true});
    out.push_back({prefix + ".w_hh", w_hh, true});
    out.push_back({prefix + ".bias", bias, true});
  }
};

}  // namespace nn
}  // namespace dhan
