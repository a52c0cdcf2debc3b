// Copyright 2026 The Serval Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "serval/common.hpp"
#include "serval/rng.hpp"
#include "serval/tensor.hpp"

namespace serval::nn {

enum class Phase { Train, Eval };

enum class PoolKind { Max, Avg, GlobalAvg };

namespace detail {

// Row-major matmul kernels. Loop orders keep the inner loop contiguous;
// single-threaded, so results are bit-deterministic.

/// C[m x n] += A[m x k] * B[k x n]
template <typename T>
void mm_nn(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::int64_t>(i) * k;
    T* crow = c + static_cast<std::int64_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      T av = arow[kk];
      if (av == T(0)) continue;
      const T* brow = b + static_cast<std::int64_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// C[m x n] += A[m x k] * B[n x k]^T
template <typename T>
void mm_nt(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::int64_t>(i) * k;
    T* crow = c + static_cast<std::int64_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<std::int64_t>(j) * k;
      T acc = T(0);
      for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      crow[j] += acc;
    }
  }
}

/// C[m x n] += A[k x m]^T * B[k x n]
template <typename T>
void mm_tn(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int kk = 0; kk < k; ++kk) {
    const T* arow = a + static_cast<std::int64_t>(kk) * m;
    const T* brow = b + static_cast<std::int64_t>(kk) * n;
    for (int i = 0; i < m; ++i) {
      T av = arow[i];
      if (av == T(0)) continue;
      T* crow = c + static_cast<std::int64_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// Scatters one sample's image into column layout:
/// col[(C*kh*kw) x (ho*wo)], zero-padded borders.
template <typename T>
void im2col(const T* img, int c, int h, int w, int kh, int kw, int stride,
            int pad, int ho, int wo, T* col) {
  int patch = c * kh * kw;
  std::fill(col, col + static_cast<std::int64_t>(patch) * ho * wo, T(0));
  for (int ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        int row = (ch * kh + ky) * kw + kx;
        T* dst = col + static_cast<std::int64_t>(row) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const T* src = img + (static_cast<std::int64_t>(ch) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= w) continue;
            dst[oy * wo + ox] = src[ix];
          }
        }
      }
    }
  }
}

/// Accumulates column-layout gradients back into image layout.
template <typename T>
void col2im_accum(const T* col, int c, int h, int w, int kh, int kw, int stride,
                  int pad, int ho, int wo, T* img) {
  for (int ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        int row = (ch * kh + ky) * kw + kx;
        const T* src = col + static_cast<std::int64_t>(row) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          T* dst = img + (static_cast<std::int64_t>(ch) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= w) continue;
            dst[ix] += src[oy * wo + ox];
          }
        }
      }
    }
  }
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

}  // namespace detail

/// 2-D convolution. input N x I x H x W, weight O x I x kH x kW, bias O.
/// Output spatial size follows floor((H + 2*pad - kH) / stride) + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, int stride, int pad) {
  detail::require(input.rank() == 4, "conv2d: input must be NCHW, got " +
                                         shape_str(input.shape()));
  detail::require(weight.rank() == 4, "conv2d: weight must be OIkHkW, got " +
                                          shape_str(weight.shape()));
  int n = input.dim(0), ic = input.dim(1), h = input.dim(2), w = input.dim(3);
  int oc = weight.dim(0), wic = weight.dim(1), kh = weight.dim(2),
      kw = weight.dim(3);
  detail::require(stride >= 1, "conv2d: stride must be positive");
  detail::require(pad >= 0, "conv2d: pad must be non-negative");
  detail::require(ic == wic, "conv2d: input channels " + std::to_string(ic) +
                                 " do not match weight channels " +
                                 std::to_string(wic));
  detail::require(bias.rank() == 1 && bias.dim(0) == oc,
                  "conv2d: bias must have " + std::to_string(oc) + " entries");
  detail::require(h + 2 * pad >= kh && w + 2 * pad >= kw,
                  "conv2d: kernel " + std::to_string(kh) + "x" +
                      std::to_string(kw) + " exceeds padded input " +
                      std::to_string(h + 2 * pad) + "x" +
                      std::to_string(w + 2 * pad));
  int ho = (h + 2 * pad - kh) / stride + 1;
  int wo = (w + 2 * pad - kw) / stride + 1;
  detail::require(ho > 0 && wo > 0, "conv2d: zero-sized output");

  int patch = ic * kh * kw;
  auto out = Tensor<T>::zeros({n, oc, ho, wo});
  std::vector<T> col(static_cast<std::size_t>(patch) * ho * wo);
  const T* x = input.data().data();
  const T* wt = weight.data().data();
  const T* b = bias.data().data();
  T* y = out.data().data();
  std::int64_t in_stride = static_cast<std::int64_t>(ic) * h * w;
  std::int64_t out_stride = static_cast<std::int64_t>(oc) * ho * wo;
  for (int s = 0; s < n; ++s) {
    detail::im2col(x + s * in_stride, ic, h, w, kh, kw, stride, pad, ho, wo,
                   col.data());
    T* ys = y + s * out_stride;
    detail::mm_nn(wt, col.data(), ys, oc, patch, ho * wo);
    for (int o = 0; o < oc; ++o) {
      T* row = ys + static_cast<std::int64_t>(o) * ho * wo;
      for (int i = 0; i < ho * wo; ++i) row[i] += b[o];
    }
  }

  if (Tensor<T>::recording(input, weight, bias)) {
    Tensor<T> in_h = input, w_h = weight, b_h = bias;
    out.attach(
        {input, weight, bias},
        [in_h, w_h, b_h, n, ic, h, w, oc, kh, kw, stride, pad, ho,
         wo](detail::TensorNode<T>& self) mutable {
          int patch_k = ic * kh * kw;
          const T* dy = self.grad.data();
          std::int64_t in_str = static_cast<std::int64_t>(ic) * h * w;
          std::int64_t out_str = static_cast<std::int64_t>(oc) * ho * wo;
          std::vector<T> col(static_cast<std::size_t>(patch_k) * ho * wo);
          std::vector<T> dcol(col.size());
          std::vector<T> dw(w_h.size(), T(0));
          std::vector<T> db(static_cast<std::size_t>(oc), T(0));
          std::vector<T> dx;
          bool need_dx = in_h.requires_grad();
          if (need_dx) dx.assign(static_cast<std::size_t>(in_h.size()), T(0));
          const T* xv = in_h.data().data();
          const T* wv = w_h.data().data();
          for (int s = 0; s < n; ++s) {
            const T* dys = dy + s * out_str;
            if (w_h.requires_grad()) {
              detail::im2col(xv + s * in_str, ic, h, w, kh, kw, stride, pad, ho,
                             wo, col.data());
              detail::mm_nt(dys, col.data(), dw.data(), oc, ho * wo, patch_k);
            }
            for (int o = 0; o < oc; ++o) {
              const T* row = dys + static_cast<std::int64_t>(o) * ho * wo;
              for (int i = 0; i < ho * wo; ++i) db[o] += row[i];
            }
            if (need_dx) {
              std::fill(dcol.begin(), dcol.end(), T(0));
              detail::mm_tn(wv, dys, dcol.data(), patch_k, oc, ho * wo);
              detail::col2im_accum(dcol.data(), ic, h, w, kh, kw, stride, pad,
                                   ho, wo, dx.data() + s * in_str);
            }
          }
          if (need_dx) in_h.accumulate_grad(dx);
          w_h.accumulate_grad(dw);
          b_h.accumulate_grad(db);
        });
  }
  return out;
}

/// Pooling. Max routes gradients to the argmax cell (first occurrence in
/// row-major order on ties); avg distributes uniformly; global-avg
/// reduces H,W to 1,1 and ignores k/stride/pad. Padding is virtual: max
/// windows are clipped to valid cells, avg treats padding as zeros while
/// still dividing by the full k*k window.
template <typename T>
Tensor<T> pool2d(const Tensor<T>& input, PoolKind kind, int k = 2,
                 int stride = 2, int pad = 0) {
  detail::require(input.rank() == 4, "pool2d: input must be NCHW, got " +
                                         shape_str(input.shape()));
  int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (kind != PoolKind::GlobalAvg) {
    detail::require(k >= 1 && stride >= 1,
                    "pool2d: k and stride must be >= 1");
    detail::require(pad >= 0 && 2 * pad < k,
                    "pool2d: pad must satisfy 0 <= 2*pad < k");
    detail::require(k <= h + 2 * pad && k <= w + 2 * pad,
                    "pool2d: kernel " + std::to_string(k) +
                        " larger than padded input " + std::to_string(h) +
                        "x" + std::to_string(w));
  }
  int ho, wo, kk, sx, px;
  if (kind == PoolKind::GlobalAvg) {
    ho = 1, wo = 1, kk = 0, sx = 1, px = 0;
  } else {
    ho = (h + 2 * pad - k) / stride + 1;
    wo = (w + 2 * pad - k) / stride + 1;
    kk = k, sx = stride, px = pad;
  }

  auto out = Tensor<T>::zeros({n, c, ho, wo});
  const T* x = input.data().data();
  T* y = out.data().data();
  std::vector<std::int32_t> argmax;
  bool is_max = kind == PoolKind::Max;
  bool global = kind == PoolKind::GlobalAvg;
  if (is_max) argmax.resize(static_cast<std::size_t>(out.size()));

  std::int64_t plane_in = static_cast<std::int64_t>(h) * w;
  std::int64_t plane_out = static_cast<std::int64_t>(ho) * wo;
  for (std::int64_t p = 0; p < static_cast<std::int64_t>(n) * c; ++p) {
    const T* xp = x + p * plane_in;
    T* yp = y + p * plane_out;
    if (global) {
      T acc = T(0);
      for (std::int64_t i = 0; i < plane_in; ++i) acc += xp[i];
      yp[0] = acc / static_cast<T>(plane_in);
      continue;
    }
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        int y0 = oy * sx - px, x0 = ox * sx - px;
        int ya = std::max(y0, 0), yb = std::min(y0 + kk, h);
        int xa = std::max(x0, 0), xb = std::min(x0 + kk, w);
        if (is_max) {
          T best = xp[ya * w + xa];
          int best_idx = ya * w + xa;
          for (int iy = ya; iy < yb; ++iy) {
            for (int ix = xa; ix < xb; ++ix) {
              int idx = iy * w + ix;
              if (xp[idx] > best) {
                best = xp[idx];
                best_idx = idx;
              }
            }
          }
          yp[oy * wo + ox] = best;
          argmax[static_cast<std::size_t>(p * plane_out + oy * wo + ox)] =
              best_idx;
        } else {
          T acc = T(0);
          for (int iy = ya; iy < yb; ++iy) {
            for (int ix = xa; ix < xb; ++ix) acc += xp[iy * w + ix];
          }
          yp[oy * wo + ox] = acc / static_cast<T>(kk * kk);
        }
      }
    }
  }

  if (Tensor<T>::recording(input)) {
    Tensor<T> in_h = input;
    out.attach({input}, [in_h, n, c, h, w, ho, wo, kk, sx, px, is_max, global,
                         argmax = std::move(argmax)](
                            detail::TensorNode<T>& self) mutable {
      std::vector<T> dx(static_cast<std::size_t>(in_h.size()), T(0));
      const T* dy = self.grad.data();
      std::int64_t plane_in = static_cast<std::int64_t>(h) * w;
      std::int64_t plane_out = static_cast<std::int64_t>(ho) * wo;
      for (std::int64_t p = 0; p < static_cast<std::int64_t>(n) * c; ++p) {
        T* dxp = dx.data() + p * plane_in;
        const T* dyp = dy + p * plane_out;
        if (global) {
          T share = dyp[0] / static_cast<T>(plane_in);
          for (std::int64_t i = 0; i < plane_in; ++i) dxp[i] += share;
          continue;
        }
        for (int oy = 0; oy < ho; ++oy) {
          for (int ox = 0; ox < wo; ++ox) {
            T g = dyp[oy * wo + ox];
            if (is_max) {
              dxp[argmax[static_cast<std::size_t>(p * plane_out + oy * wo +
                                                  ox)]] += g;
            } else {
              T share = g / static_cast<T>(kk * kk);
              int y0 = oy * sx - px, x0 = ox * sx - px;
              int ya = std::max(y0, 0), yb = std::min(y0 + kk, h);
              int xa = std::max(x0, 0), xb = std::min(x0 + kk, w);
              for (int iy = ya; iy < yb; ++iy) {
                for (int ix = xa; ix < xb; ++ix) dxp[iy * w + ix] += share;
              }
            }
          }
        }
      }
      in_h.accumulate_grad(dx);
    });
  }
  return out;
}

/// Fully connected map: y = x * W^T + b. x is N x D, W is M x D, b is M.
template <typename T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias) {
  detail::require(x.rank() == 2,
                  "affine: input must be N x D, got " + shape_str(x.shape()));
  detail::require(weight.rank() == 2, "affine: weight must be M x D, got " +
                                          shape_str(weight.shape()));
  int n = x.dim(0), d = x.dim(1);
  int m = weight.dim(0), wd = weight.dim(1);
  detail::require(d == wd, "affine: inner dimensions do not match: input D=" +
                               std::to_string(d) + ", weight D=" +
                               std::to_string(wd));
  detail::require(bias.rank() == 1 && bias.dim(0) == m,
                  "affine: bias must have " + std::to_string(m) + " entries");

  auto out = Tensor<T>::zeros({n, m});
  detail::mm_nt(x.data().data(), weight.data().data(), out.data().data(), n, d,
                m);
  T* y = out.data().data();
  const T* b = bias.data().data();
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) y[static_cast<std::int64_t>(i) * m + j] += b[j];
  }

  if (Tensor<T>::recording(x, weight, bias)) {
    Tensor<T> x_h = x, w_h = weight, b_h = bias;
    out.attach({x, weight, bias},
               [x_h, w_h, b_h, n, d, m](detail::TensorNode<T>& self) mutable {
                 const T* dy = self.grad.data();
                 if (x_h.requires_grad()) {
                   std::vector<T> dx(static_cast<std::size_t>(x_h.size()),
                                     T(0));
                   detail::mm_nn(dy, w_h.data().data(), dx.data(), n, m, d);
                   x_h.accumulate_grad(dx);
                 }
                 std::vector<T> dw(static_cast<std::size_t>(w_h.size()), T(0));
                 detail::mm_tn(dy, x_h.data().data(), dw.data(), m, n, d);
                 w_h.accumulate_grad(dw);
                 std::vector<T> db(static_cast<std::size_t>(m), T(0));
                 for (int i = 0; i < n; ++i) {
                   for (int j = 0; j < m; ++j) {
                     db[j] += dy[static_cast<std::int64_t>(i) * m + j];
                   }
                 }
                 b_h.accumulate_grad(db);
               });
  }
  return out;
}

/// Elementwise max(0, x); subgradient 0 at exactly 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  auto out = Tensor<T>::zeros(x.shape());
  auto xv = x.data();
  auto yv = out.data();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    yv[i] = xv[i] > T(0) ? xv[i] : T(0);
  }
  if (Tensor<T>::recording(x)) {
    Tensor<T> x_h = x;
    out.attach({x}, [x_h](detail::TensorNode<T>& self) mutable {
      std::vector<T> dx(self.grad.size());
      auto xv = x_h.data();
      for (std::size_t i = 0; i < dx.size(); ++i) {
        dx[i] = xv[i] > T(0) ? self.grad[i] : T(0);
      }
      x_h.accumulate_grad(dx);
    });
  }
  return out;
}

/// Elementwise sum of two same-shape tensors (residual shortcut join).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "add: shapes differ: " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  auto out = Tensor<T>::zeros(a.shape());
  auto av = a.data();
  auto bv = b.data();
  auto yv = out.data();
  for (std::size_t i = 0; i < av.size(); ++i) yv[i] = av[i] + bv[i];
  if (Tensor<T>::recording(a, b)) {
    Tensor<T> a_h = a, b_h = b;
    out.attach({a, b}, [a_h, b_h](detail::TensorNode<T>& self) mutable {
      a_h.accumulate_grad(self.grad);
      b_h.accumulate_grad(self.grad);
    });
  }
  return out;
}

/// Concatenation along the channel axis; all inputs must share N, H, W.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_channels: no inputs");
  int n = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
  int total_c = 0;
  for (const auto& p : parts) {
    detail::require(p.rank() == 4 && p.dim(0) == n && p.dim(2) == h &&
                        p.dim(3) == w,
                    "concat_channels: mismatched spatial shape " +
                        shape_str(p.shape()) + " vs expected N=" +
                        std::to_string(n) + " H=" + std::to_string(h) +
                        " W=" + std::to_string(w));
    total_c += p.dim(1);
  }
  auto out = Tensor<T>::zeros({n, total_c, h, w});
  T* y = out.data().data();
  std::int64_t plane = static_cast<std::int64_t>(h) * w;
  std::int64_t out_sample = static_cast<std::int64_t>(total_c) * plane;
  int c_off = 0;
  for (const auto& p : parts) {
    int pc = p.dim(1);
    const T* xv = p.data().data();
    for (int s = 0; s < n; ++s) {
      std::copy(xv + s * pc * plane, xv + (s + 1) * pc * plane,
                y + s * out_sample + c_off * plane);
    }
    c_off += pc;
  }
  bool rec = grad_recording();
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (rec && any) {
    std::vector<Tensor<T>> handles = parts;
    out.attach(parts, [handles, n, total_c, plane](
                          detail::TensorNode<T>& self) mutable {
      std::int64_t out_sample = static_cast<std::int64_t>(total_c) * plane;
      int c_off = 0;
      for (auto& p : handles) {
        int pc = p.dim(1);
        if (p.requires_grad()) {
          std::vector<T> dp(static_cast<std::size_t>(p.size()));
          for (int s = 0; s < n; ++s) {
            std::copy(self.grad.data() + s * out_sample + c_off * plane,
                      self.grad.data() + s * out_sample + (c_off + pc) * plane,
                      dp.data() + s * pc * plane);
          }
          p.accumulate_grad(dp);
        }
        c_off += pc;
      }
    });
  }
  return out;
}

/// Collapses all non-batch dimensions: N x C x H x W -> N x (C*H*W).
template <typename T>
Tensor<T> flatten(const Tensor<T>& x) {
  if (x.rank() == 2) return x;
  int n = x.dim(0);
  int rest = static_cast<int>(x.size() / n);
  auto out = Tensor<T>::from(std::vector<T>(x.data().begin(), x.data().end()),
                             {n, rest});
  if (Tensor<T>::recording(x)) {
    Tensor<T> x_h = x;
    out.attach({x}, [x_h](detail::TensorNode<T>& self) mutable {
      x_h.accumulate_grad(self.grad);
    });
  }
  return out;
}

/// Running statistics of one batch-norm layer. Lives outside the graph;
/// train-mode calls update it, eval-mode calls read it.
template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  bool initialized = false;

  explicit BatchNormState(int channels = 0)
      : running_mean(static_cast<std::size_t>(channels), T(0)),
        running_var(static_cast<std::size_t>(channels), T(1)) {}
};

/// Per-channel batch normalization over N, H, W.
///
/// Train mode normalizes with batch moments (biased variance) and folds
/// them into the running statistics: the first call copies the batch
/// moments, later calls apply an exponential moving average where
/// `momentum` weighs the new batch. Eval mode uses running statistics
/// only and requires at least one prior train-mode call.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma,
                      const Tensor<T>& beta, BatchNormState<T>& state,
                      Phase phase, T momentum = T(0.1), T eps = T(1e-5)) {
  detail::require(x.rank() == 4, "batchnorm2d: input must be NCHW, got " +
                                     shape_str(x.shape()));
  int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  detail::require(gamma.rank() == 1 && gamma.dim(0) == c &&
                      beta.rank() == 1 && beta.dim(0) == c,
                  "batchnorm2d: gamma/beta must have " + std::to_string(c) +
                      " entries");
  if (eps <= T(0)) throw ConfigError("batchnorm2d: eps must be > 0");
  if (phase == Phase::Eval && !state.initialized) {
    throw Error("batchnorm2d: uninitialized running statistics");
  }

  std::int64_t plane = static_cast<std::int64_t>(h) * w;
  std::int64_t m = static_cast<std::int64_t>(n) * plane;  // samples per channel
  std::vector<T> mean(static_cast<std::size_t>(c), T(0));
  std::vector<T> var(static_cast<std::size_t>(c), T(0));
  const T* xv = x.data().data();

  if (phase == Phase::Train) {
    for (int ch = 0; ch < c; ++ch) {
      T acc = T(0);
      for (int s = 0; s < n; ++s) {
        const T* p = xv + (static_cast<std::int64_t>(s) * c + ch) * plane;
        for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
      }
      mean[ch] = acc / static_cast<T>(m);
      T vacc = T(0);
      for (int s = 0; s < n; ++s) {
        const T* p = xv + (static_cast<std::int64_t>(s) * c + ch) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          T d = p[i] - mean[ch];
          vacc += d * d;
        }
      }
      var[ch] = vacc / static_cast<T>(m);
    }
    if (!state.initialized) {
      state.running_mean = mean;
      state.running_var = var;
      state.initialized = true;
    } else {
      for (int ch = 0; ch < c; ++ch) {
        state.running_mean[ch] =
            (T(1) - momentum) * state.running_mean[ch] + momentum * mean[ch];
        state.running_var[ch] =
            (T(1) - momentum) * state.running_var[ch] + momentum * var[ch];
      }
    }
  } else {
    mean = state.running_mean;
    var = state.running_var;
  }

  std::vector<T> inv_std(static_cast<std::size_t>(c));
  for (int ch = 0; ch < c; ++ch) {
    inv_std[ch] = T(1) / std::sqrt(var[ch] + eps);
  }

  auto out = Tensor<T>::zeros(x.shape());
  T* yv = out.data().data();
  const T* g = gamma.data().data();
  const T* b = beta.data().data();
  for (int s = 0; s < n; ++s) {
    for (int ch = 0; ch < c; ++ch) {
      const T* p = xv + (static_cast<std::int64_t>(s) * c + ch) * plane;
      T* q = yv + (static_cast<std::int64_t>(s) * c + ch) * plane;
      T mu = mean[ch], is = inv_std[ch], gc = g[ch], bc = b[ch];
      for (std::int64_t i = 0; i < plane; ++i) {
        q[i] = gc * (p[i] - mu) * is + bc;
      }
    }
  }

  if (Tensor<T>::recording(x, gamma, beta)) {
    Tensor<T> x_h = x, g_h = gamma, b_h = beta;
    bool train = phase == Phase::Train;
    out.attach(
        {x, gamma, beta},
        [x_h, g_h, b_h, n, c, plane, m, mean = std::move(mean),
         inv_std = std::move(inv_std), train](detail::TensorNode<T>& self) mutable {
          const T* dy = self.grad.data();
          const T* xv = x_h.data().data();
          const T* g = g_h.data().data();
          std::vector<T> dgamma(static_cast<std::size_t>(c), T(0));
          std::vector<T> dbeta(static_cast<std::size_t>(c), T(0));
          std::vector<T> dx;
          bool need_dx = x_h.requires_grad();
          if (need_dx) dx.assign(static_cast<std::size_t>(x_h.size()), T(0));
          for (int ch = 0; ch < c; ++ch) {
            T mu = mean[ch], is = inv_std[ch];
            // Accumulate the two reductions the train-mode formula needs.
            T sum_dy = T(0), sum_dy_xhat = T(0);
            for (int s = 0; s < n; ++s) {
              std::int64_t base = (static_cast<std::int64_t>(s) * c + ch) * plane;
              for (std::int64_t i = 0; i < plane; ++i) {
                T xhat = (xv[base + i] - mu) * is;
                sum_dy += dy[base + i];
                sum_dy_xhat += dy[base + i] * xhat;
              }
            }
            dbeta[ch] = sum_dy;
            dgamma[ch] = sum_dy_xhat;
            if (need_dx) {
              T gc = g[ch];
              T inv_m = T(1) / static_cast<T>(m);
              for (int s = 0; s < n; ++s) {
                std::int64_t base =
                    (static_cast<std::int64_t>(s) * c + ch) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                  if (train) {
                    T xhat = (xv[base + i] - mu) * is;
                    dx[base + i] =
                        gc * is *
                        (dy[base + i] - inv_m * sum_dy - xhat * inv_m * sum_dy_xhat);
                  } else {
                    dx[base + i] = gc * is * dy[base + i];
                  }
                }
              }
            }
          }
          if (need_dx) x_h.accumulate_grad(dx);
          g_h.accumulate_grad(dgamma);
          b_h.accumulate_grad(dbeta);
        });
  }
  return out;
}

/// Inverted dropout: train mode zeroes each element with probability p
/// and scales survivors by 1/(1-p); eval mode is the identity. The mask
/// is drawn from `rng`, so results are deterministic per seed stream.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Phase phase, Rng& rng) {
  if (p >= 1.0 || p < 0.0) {
    throw ConfigError("dropout: p must be in [0, 1), got " + std::to_string(p));
  }
  if (phase == Phase::Eval || p == 0.0) return x;

  T scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(static_cast<std::size_t>(x.size()));
  for (auto& mv : mask) mv = rng.bernoulli(p) ? T(0) : scale;

  auto out = Tensor<T>::zeros(x.shape());
  auto xv = x.data();
  auto yv = out.data();
  for (std::size_t i = 0; i < mask.size(); ++i) yv[i] = xv[i] * mask[i];

  if (Tensor<T>::recording(x)) {
    Tensor<T> x_h = x;
    out.attach({x}, [x_h, mask = std::move(mask)](
                        detail::TensorNode<T>& self) mutable {
      std::vector<T> dx(self.grad.size());
      for (std::size_t i = 0; i < dx.size(); ++i) {
        dx[i] = self.grad[i] * mask[i];
      }
      x_h.accumulate_grad(dx);
    });
  }
  return out;
}

/// Row-wise softmax of an N x C matrix (plain values, no graph).
template <typename T>
std::vector<T> softmax_rows(const Tensor<T>& logits) {
  detail::require(logits.rank() == 2, "softmax_rows: input must be N x C");
  int n = logits.dim(0), c = logits.dim(1);
  std::vector<T> probs(static_cast<std::size_t>(logits.size()));
  const T* z = logits.data().data();
  for (int i = 0; i < n; ++i) {
    const T* row = z + static_cast<std::int64_t>(i) * c;
    T* prow = probs.data() + static_cast<std::int64_t>(i) * c;
    T mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (int j = 0; j < c; ++j) {
      prow[j] = std::exp(row[j] - mx);
      sum += prow[j];
    }
    for (int j = 0; j < c; ++j) prow[j] /= sum;
  }
  return probs;
}

/// Mean cross-entropy of softmax(logits) against integer labels.
/// Stabilized by max-subtraction; gradient is (softmax - onehot) / N.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits,
                                std::span<const int> labels) {
  detail::require(logits.rank() == 2,
                  "softmax_cross_entropy: logits must be N x C, got " +
                      shape_str(logits.shape()));
  int n = logits.dim(0), c = logits.dim(1);
  detail::require(static_cast<int>(labels.size()) == n,
                  "softmax_cross_entropy: " + std::to_string(labels.size()) +
                      " labels for " + std::to_string(n) + " rows");
  for (int i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= c) {
      throw Error("softmax_cross_entropy: label " + std::to_string(labels[i]) +
                  " out of range [0, " + std::to_string(c) + ")");
    }
  }

  std::vector<T> probs = softmax_rows(logits);
  T loss = T(0);
  for (int i = 0; i < n; ++i) {
    T p = probs[static_cast<std::int64_t>(i) * c + labels[i]];
    loss -= std::log(std::max(p, std::numeric_limits<T>::min()));
  }
  loss /= static_cast<T>(n);

  auto out = Tensor<T>::scalar(loss);
  if (Tensor<T>::recording(logits)) {
    Tensor<T> l_h = logits;
    std::vector<int> lbl(labels.begin(), labels.end());
    out.attach({logits}, [l_h, probs = std::move(probs), lbl = std::move(lbl),
                          n, c](detail::TensorNode<T>& self) mutable {
      T up = self.grad[0];
      std::vector<T> dz(probs.size());
      T inv_n = T(1) / static_cast<T>(n);
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < c; ++j) {
          std::int64_t idx = static_cast<std::int64_t>(i) * c + j;
          T onehot = (j == lbl[static_cast<std::size_t>(i)]) ? T(1) : T(0);
          dz[idx] = up * (probs[idx] - onehot) * inv_n;
        }
      }
      l_h.accumulate_grad(dz);
    });
  }
  return out;
}

/// Sum of all elements (scalar output); test and loss-building helper.
template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  auto out = Tensor<T>::scalar(acc);
  if (Tensor<T>::recording(x)) {
    Tensor<T> x_h = x;
    out.attach({x}, [x_h](detail::TensorNode<T>& self) mutable {
      std::vector<T> dx(static_cast<std::size_t>(x_h.size()), self.grad[0]);
      x_h.accumulate_grad(dx);
    });
  }
  return out;
}

}  // namespace serval::nn
