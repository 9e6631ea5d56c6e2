#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <vector>

#include "voxopt/tape.hpp"

namespace voxopt::ops {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatRM<T>>;
template <typename T>
using MapCM = Eigen::Map<const MatRM<T>>;

template <typename T>
T stable_softplus(T x) {
  if (x > T(30)) return x;
  if (x < T(-30)) return std::exp(x);
  if (x > T(0)) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) {
    const T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var add(Tape<T>& t, Var a, Var b) {
  const auto& A = t.val(a);
  const auto& B = t.val(b);
  if (!A.same_shape(B)) throw ValidationError("add: shape mismatch");
  Tensor<T> y = A;
  y.add_scaled(B, T(1));
  return t.emit(std::move(y), {a, b}, [a, b](Tape<T>& t, Var self) {
    const auto& g = t.grad(self);
    t.accum_grad(a, g);
    t.accum_grad(b, g);
  });
}

template <typename T>
Var sub(Tape<T>& t, Var a, Var b) {
  const auto& A = t.val(a);
  const auto& B = t.val(b);
  if (!A.same_shape(B)) throw ValidationError("sub: shape mismatch");
  Tensor<T> y = A;
  y.add_scaled(B, T(-1));
  return t.emit(std::move(y), {a, b}, [a, b](Tape<T>& t, Var self) {
    const auto& g = t.grad(self);
    t.accum_grad(a, g);
    Tensor<T> gb = g;
    for (std::int64_t i = 0; i < gb.numel(); ++i) gb[i] = -gb[i];
    t.accum_grad(b, gb);
  });
}

template <typename T>
Var mul(Tape<T>& t, Var a, Var b) {
  const auto& A = t.val(a);
  const auto& B = t.val(b);
  if (!A.same_shape(B)) throw ValidationError("mul: shape mismatch");
  Tensor<T> y(A.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = A[i] * B[i];
  return t.emit(std::move(y), {a, b}, [a, b](Tape<T>& t, Var self) {
    const auto& g = t.grad(self);
    const auto& A = t.val(a);
    const auto& B = t.val(b);
    if (t.requires_grad(a)) {
      Tensor<T> ga(A.shape());
      for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] = g[i] * B[i];
      t.accum_grad(a, ga);
    }
    if (t.requires_grad(b)) {
      Tensor<T> gb(B.shape());
      for (std::int64_t i = 0; i < gb.numel(); ++i) gb[i] = g[i] * A[i];
      t.accum_grad(b, gb);
    }
  });
}

template <typename T>
Var add_const(Tape<T>& t, Var x, T c) {
  Tensor<T> y = t.val(x);
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] += c;
  return t.emit(std::move(y), {x}, [x](Tape<T>& t, Var self) {
    t.accum_grad(x, t.grad(self));
  });
}

template <typename T>
Var scale_const(Tape<T>& t, Var x, T c) {
  Tensor<T> y = t.val(x);
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] *= c;
  return t.emit(std::move(y), {x}, [x, c](Tape<T>& t, Var self) {
    Tensor<T> gx = t.grad(self);
    for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] *= c;
    t.accum_grad(x, gx);
  });
}

template <typename T>
Var leaky_relu(Tape<T>& t, Var x, T alpha, T gain = T(1)) {
  const auto& X = t.val(x);
  Tensor<T> y(X.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    const T v = X[i];
    y[i] = gain * (v > T(0) ? v : alpha * v);
  }
  return t.emit(std::move(y), {x}, [x, alpha, gain](Tape<T>& t, Var self) {
    const auto& g = t.grad(self);
    const auto& X = t.val(x);
    Tensor<T> gx(X.shape());
    for (std::int64_t i = 0; i < gx.numel(); ++i) {
      gx[i] = g[i] * gain * (X[i] > T(0) ? T(1) : alpha);
    }
    t.accum_grad(x, gx);
  });
}

template <typename T>
Var tanh_act(Tape<T>& t, Var x) {
  const auto& X = t.val(x);
  Tensor<T> y(X.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = std::tanh(X[i]);
  return t.emit(std::move(y), {x}, [x](Tape<T>& t, Var self) {
    const auto& g = t.grad(self);
    const auto& Y = t.val(self);
    Tensor<T> gx(Y.shape());
    for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] = g[i] * (T(1) - Y[i] * Y[i]);
    t.accum_grad(x, gx);
  });
}

template <typename T>
Var reshape(Tape<T>& t, Var x, std::vector<std::int64_t> shape) {
  Tensor<T> y = t.val(x).reshaped(std::move(shape));
  return t.emit(std::move(y), {x}, [x](Tape<T>& t, Var self) {
    t.accum_grad(x, t.grad(self).reshaped(t.val(x).shape()));
  });
}

template <typename T>
Var detach(Tape<T>& t, Var x) {
  return t.constant(t.val(x));
}

// ---------------------------------------------------------------------------
// Dense layers
// ---------------------------------------------------------------------------

/// y = x * (w * wscale)^T + b.  x: [B,in], w: [out,in], b: [out] (optional).
template <typename T>
Var linear(Tape<T>& t, Var x, Var w, Var b, T wscale) {
  const auto& X = t.val(x);
  const auto& W = t.val(w);
  if (X.rank() != 2 || W.rank() != 2 || X.dim(1) != W.dim(1)) {
    throw ValidationError("linear: bad shapes " + shape_string(X) + " x " + shape_string(W));
  }
  const std::int64_t Bn = X.dim(0), in = X.dim(1), out = W.dim(0);
  Tensor<T> y({Bn, out});
  MapCM<T> xm(X.data(), Bn, in);
  MapCM<T> wm(W.data(), out, in);
  MapM<T> ym(y.data(), Bn, out);
  ym.noalias() = xm * wm.transpose() * wscale;
  if (b.valid()) {
    const auto& Bv = t.val(b);
    if (Bv.numel() != out) throw ValidationError("linear: bias size mismatch");
    for (std::int64_t r = 0; r < Bn; ++r)
      for (std::int64_t c = 0; c < out; ++c) y[r * out + c] += Bv[c];
  }
  return t.emit(std::move(y), {x, w, b}, [x, w, b, wscale](Tape<T>& t, Var self) {
    const auto& G = t.grad(self);
    const auto& X = t.val(x);
    const auto& W = t.val(w);
    const std::int64_t Bn = X.dim(0), in = X.dim(1), out = W.dim(0);
    MapCM<T> gm(G.data(), Bn, out);
    MapCM<T> xm(X.data(), Bn, in);
    MapCM<T> wm(W.data(), out, in);
    if (t.requires_grad(x)) {
      Tensor<T> gx({Bn, in});
      MapM<T>(gx.data(), Bn, in).noalias() = gm * wm * wscale;
      t.accum_grad(x, gx);
    }
    if (t.requires_grad(w)) {
      Tensor<T> gw({out, in});
      MapM<T>(gw.data(), out, in).noalias() = gm.transpose() * xm * wscale;
      t.accum_grad(w, gw);
    }
    if (b.valid() && t.requires_grad(b)) {
      Tensor<T> gb({out});
      for (std::int64_t r = 0; r < Bn; ++r)
        for (std::int64_t c = 0; c < out; ++c) gb[c] += G[r * out + c];
      t.accum_grad(b, gb);
    }
  });
}

/// Row lookup: y[i] = table[ids[i]].  Gradient scatter-adds into the table.
template <typename T>
Var embed(Tape<T>& t, Var table, std::vector<int> ids) {
  const auto& Tab = t.val(table);
  if (Tab.rank() != 2) throw ValidationError("embed: table must be rank 2");
  const std::int64_t n = Tab.dim(0), d = Tab.dim(1);
  for (int id : ids) {
    if (id < 0 || id >= n) throw ValidationError("class_id out of range: " + std::to_string(id));
  }
  const auto Bn = static_cast<std::int64_t>(ids.size());
  Tensor<T> y({Bn, d});
  for (std::int64_t i = 0; i < Bn; ++i) {
    std::memcpy(y.data() + i * d, Tab.data() + static_cast<std::int64_t>(ids[static_cast<std::size_t>(i)]) * d,
                sizeof(T) * static_cast<std::size_t>(d));
  }
  return t.emit(std::move(y), {table}, [table, ids = std::move(ids)](Tape<T>& t, Var self) {
    const auto& G = t.grad(self);
    const auto& Tab = t.val(table);
    const std::int64_t d = Tab.dim(1);
    Tensor<T> gt(Tab.shape());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const std::int64_t row = ids[i];
      for (std::int64_t c = 0; c < d; ++c) gt[row * d + c] += G[static_cast<std::int64_t>(i) * d + c];
    }
    t.accum_grad(table, gt);
  });
}

template <typename T>
Var concat_cols(Tape<T>& t, Var a, Var b) {
  const auto& A = t.val(a);
  const auto& B = t.val(b);
  if (A.rank() != 2 || B.rank() != 2 || A.dim(0) != B.dim(0)) {
    throw ValidationError("concat_cols: shape mismatch");
  }
  const std::int64_t Bn = A.dim(0), na = A.dim(1), nb = B.dim(1);
  Tensor<T> y({Bn, na + nb});
  for (std::int64_t r = 0; r < Bn; ++r) {
    std::memcpy(y.data() + r * (na + nb), A.data() + r * na, sizeof(T) * static_cast<std::size_t>(na));
    std::memcpy(y.data() + r * (na + nb) + na, B.data() + r * nb, sizeof(T) * static_cast<std::size_t>(nb));
  }
  return t.emit(std::move(y), {a, b}, [a, b](Tape<T>& t, Var self) {
    const auto& G = t.grad(self);
    const auto& A = t.val(a);
    const auto& B = t.val(b);
    const std::int64_t Bn = A.dim(0), na = A.dim(1), nb = B.dim(1);
    if (t.requires_grad(a)) {
      Tensor<T> ga(A.shape());
      for (std::int64_t r = 0; r < Bn; ++r)
        std::memcpy(ga.data() + r * na, G.data() + r * (na + nb), sizeof(T) * static_cast<std::size_t>(na));
      t.accum_grad(a, ga);
    }
    if (t.requires_grad(b)) {
      Tensor<T> gb(B.shape());
      for (std::int64_t r = 0; r < Bn; ++r)
        std::memcpy(gb.data() + r * nb, G.data() + r * (na + nb) + na, sizeof(T) * static_cast<std::size_t>(nb));
      t.accum_grad(b, gb);
    }
  });
}

/// Normalizes each row to unit RMS: y = x / sqrt(mean(x^2) + eps).
template <typename T>
Var pixel_norm_rows(Tape<T>& t, Var x, T eps = T(1e-8)) {
  const auto& X = t.val(x);
  if (X.rank() != 2) throw ValidationError("pixel_norm_rows: rank 2 expected");
  const std::int64_t Bn = X.dim(0), n = X.dim(1);
  Tensor<T> y(X.shape());
  std::vector<T> r(static_cast<std::size_t>(Bn));
  for (std::int64_t b = 0; b < Bn; ++b) {
    T ss = T(0);
    for (std::int64_t i = 0; i < n; ++i) ss += X[b * n + i] * X[b * n + i];
    r[static_cast<std::size_t>(b)] = std::sqrt(ss / static_cast<T>(n) + eps);
    for (std::int64_t i = 0; i < n; ++i) y[b * n + i] = X[b * n + i] / r[static_cast<std::size_t>(b)];
  }
  return t.emit(std::move(y), {x}, [x, r = std::move(r)](Tape<T>& t, Var self) {
    const auto& G = t.grad(self);
    const auto& X = t.val(x);
    const std::int64_t Bn = X.dim(0), n = X.dim(1);
    Tensor<T> gx(X.shape());
    for (std::int64_t b = 0; b < Bn; ++b) {
      const T rb = r[static_cast<std::size_t>(b)];
      T dot = T(0);
      for (std::int64_t i = 0; i < n; ++i) dot += G[b * n + i] * X[b * n + i];
      const T c = dot / (static_cast<T>(n) * rb * rb * rb);
      for (std::int64_t i = 0; i < n; ++i) gx[b * n + i] = G[b * n + i] / rb - c * X[b * n + i];
    }
    t.accum_grad(x, gx);
  });
}

// ---------------------------------------------------------------------------
// Volumetric ops (NCDHW)
// ---------------------------------------------------------------------------

namespace detail {

struct ConvDims {
  std::int64_t B, Ci, D, H, W;
  std::int64_t Co, K;
  std::int64_t Do, Ho, Wo;
  std::int64_t stride, pad;
};

template <typename T>
ConvDims conv_dims(const Tensor<T>& x, const Tensor<T>& w, std::int64_t stride, std::int64_t pad) {
  if (x.rank() != 5 || w.rank() != 5) throw ValidationError("conv3d: rank-5 tensors expected");
  if (x.dim(1) != w.dim(1)) throw ValidationError("conv3d: channel mismatch");
  if (w.dim(2) != w.dim(3) || w.dim(2) != w.dim(4)) throw ValidationError("conv3d: cubic kernels only");
  ConvDims d;
  d.B = x.dim(0);
  d.Ci = x.dim(1);
  d.D = x.dim(2);
  d.H = x.dim(3);
  d.W = x.dim(4);
  d.Co = w.dim(0);
  d.K = w.dim(2);
  d.stride = stride;
  d.pad = pad;
  d.Do = (d.D + 2 * pad - d.K) / stride + 1;
  d.Ho = (d.H + 2 * pad - d.K) / stride + 1;
  d.Wo = (d.W + 2 * pad - d.K) / stride + 1;
  if (d.Do < 1 || d.Ho < 1 || d.Wo < 1) throw ValidationError("conv3d: output collapses to zero");
  return d;
}

/// Copies one batch item into a zero-padded [Ci, D+2p, H+2p, W+2p] buffer.
template <typename T>
void pad_volume(const T* src, const ConvDims& d, std::vector<T>& out) {
  const std::int64_t Dp = d.D + 2 * d.pad, Hp = d.H + 2 * d.pad, Wp = d.W + 2 * d.pad;
  out.assign(static_cast<std::size_t>(d.Ci * Dp * Hp * Wp), T(0));
  for (std::int64_t c = 0; c < d.Ci; ++c)
    for (std::int64_t z = 0; z < d.D; ++z)
      for (std::int64_t y = 0; y < d.H; ++y) {
        const T* s = src + ((c * d.D + z) * d.H + y) * d.W;
        T* dst = out.data() + ((c * Dp + z + d.pad) * Hp + y + d.pad) * Wp + d.pad;
        std::memcpy(dst, s, sizeof(T) * static_cast<std::size_t>(d.W));
      }
}

/// im2col for one output z-slab: rows = Ci*K^3, cols = Ho*Wo.
template <typename T>
void im2col_slab(const std::vector<T>& padded, const ConvDims& d, std::int64_t zo, std::vector<T>& cols) {
  const std::int64_t Dp = d.D + 2 * d.pad, Hp = d.H + 2 * d.pad, Wp = d.W + 2 * d.pad;
  (void)Dp;
  const std::int64_t ncols = d.Ho * d.Wo;
  cols.resize(static_cast<std::size_t>(d.Ci * d.K * d.K * d.K * ncols));
  std::int64_t row = 0;
  for (std::int64_t c = 0; c < d.Ci; ++c)
    for (std::int64_t dz = 0; dz < d.K; ++dz)
      for (std::int64_t dy = 0; dy < d.K; ++dy)
        for (std::int64_t dx = 0; dx < d.K; ++dx, ++row) {
          T* dst = cols.data() + row * ncols;
          const std::int64_t z = zo * d.stride + dz;
          for (std::int64_t ho = 0; ho < d.Ho; ++ho) {
            const T* s = padded.data() + ((c * (d.D + 2 * d.pad) + z) * Hp + ho * d.stride + dy) * Wp + dx;
            if (d.stride == 1) {
              std::memcpy(dst, s, sizeof(T) * static_cast<std::size_t>(d.Wo));
              dst += d.Wo;
            } else {
              for (std::int64_t wo = 0; wo < d.Wo; ++wo) *dst++ = s[wo * d.stride];
            }
          }
        }
}

/// Scatter-add transpose of im2col_slab.
template <typename T>
void col2im_slab(const T* cols, const ConvDims& d, std::int64_t zo, std::vector<T>& padded) {
  const std::int64_t Hp = d.H + 2 * d.pad, Wp = d.W + 2 * d.pad;
  const std::int64_t ncols = d.Ho * d.Wo;
  std::int64_t row = 0;
  for (std::int64_t c = 0; c < d.Ci; ++c)
    for (std::int64_t dz = 0; dz < d.K; ++dz)
      for (std::int64_t dy = 0; dy < d.K; ++dy)
        for (std::int64_t dx = 0; dx < d.K; ++dx, ++row) {
          const T* src = cols + row * ncols;
          const std::int64_t z = zo * d.stride + dz;
          for (std::int64_t ho = 0; ho < d.Ho; ++ho) {
            T* p = padded.data() + ((c * (d.D + 2 * d.pad) + z) * Hp + ho * d.stride + dy) * Wp + dx;
            for (std::int64_t wo = 0; wo < d.Wo; ++wo) p[wo * d.stride] += src[wo];
            src += d.Wo;
          }
        }
}

}  // namespace detail

/// 3D convolution, no bias. y = conv(x, w * wscale).
/// x: [B,Ci,D,H,W], w: [Co,Ci,K,K,K]; cubic kernel, symmetric padding.
template <typename T>
Var conv3d(Tape<T>& t, Var x, Var w, std::int64_t stride, std::int64_t pad, T wscale) {
  using namespace detail;
  const auto& X = t.val(x);
  const auto& W = t.val(w);
  const ConvDims d = conv_dims(X, W, stride, pad);
  const std::int64_t kk = d.Ci * d.K * d.K * d.K;
  const std::int64_t ncols = d.Ho * d.Wo;

  Tensor<T> weff({d.Co, kk});
  for (std::int64_t i = 0; i < weff.numel(); ++i) weff[i] = W[i] * wscale;

  Tensor<T> y({d.B, d.Co, d.Do, d.Ho, d.Wo});
  std::vector<T> padded, cols;
  MatRM<T> out_slab(d.Co, ncols);
  MapCM<T> wm(weff.data(), d.Co, kk);
  for (std::int64_t b = 0; b < d.B; ++b) {
    pad_volume(X.data() + b * d.Ci * d.D * d.H * d.W, d, padded);
    for (std::int64_t zo = 0; zo < d.Do; ++zo) {
      im2col_slab(padded, d, zo, cols);
      MapCM<T> km(cols.data(), kk, ncols);
      out_slab.noalias() = wm * km;
      for (std::int64_t co = 0; co < d.Co; ++co) {
        std::memcpy(y.data() + (((b * d.Co + co) * d.Do + zo) * ncols), out_slab.data() + co * ncols,
                    sizeof(T) * static_cast<std::size_t>(ncols));
      }
    }
  }

  return t.emit(std::move(y), {x, w}, [x, w, stride, pad, wscale](Tape<T>& t, Var self) {
    using namespace detail;
    const auto& G = t.grad(self);
    const auto& X = t.val(x);
    const auto& W = t.val(w);
    const ConvDims d = conv_dims(X, W, stride, pad);
    const std::int64_t kk = d.Ci * d.K * d.K * d.K;
    const std::int64_t ncols = d.Ho * d.Wo;

    Tensor<T> weff({d.Co, kk});
    for (std::int64_t i = 0; i < weff.numel(); ++i) weff[i] = W[i] * wscale;
    MapCM<T> wm(weff.data(), d.Co, kk);

    const bool need_gx = t.requires_grad(x);
    const bool need_gw = t.requires_grad(w);
    Tensor<T> gx = need_gx ? Tensor<T>(X.shape()) : Tensor<T>();
    MatRM<T> gweff = MatRM<T>::Zero(d.Co, kk);

    std::vector<T> padded, cols, gpadded;
    MatRM<T> gslab(d.Co, ncols), gcols(kk, ncols);
    const std::int64_t Dp = d.D + 2 * d.pad, Hp = d.H + 2 * d.pad, Wp = d.W + 2 * d.pad;
    for (std::int64_t b = 0; b < d.B; ++b) {
      if (need_gw) pad_volume(X.data() + b * d.Ci * d.D * d.H * d.W, d, padded);
      if (need_gx) gpadded.assign(static_cast<std::size_t>(d.Ci * Dp * Hp * Wp), T(0));
      for (std::int64_t zo = 0; zo < d.Do; ++zo) {
        for (std::int64_t co = 0; co < d.Co; ++co) {
          std::memcpy(gslab.data() + co * ncols, G.data() + (((b * d.Co + co) * d.Do + zo) * ncols),
                      sizeof(T) * static_cast<std::size_t>(ncols));
        }
        if (need_gw) {
          im2col_slab(padded, d, zo, cols);
          MapCM<T> km(cols.data(), kk, ncols);
          gweff.noalias() += gslab * km.transpose();
        }
        if (need_gx) {
          gcols.noalias() = wm.transpose() * gslab;
          col2im_slab(gcols.data(), d, zo, gpadded);
        }
      }
      if (need_gx) {
        for (std::int64_t c = 0; c < d.Ci; ++c)
          for (std::int64_t z = 0; z < d.D; ++z)
            for (std::int64_t yy = 0; yy < d.H; ++yy) {
              const T* s = gpadded.data() + ((c * Dp + z + d.pad) * Hp + yy + d.pad) * Wp + d.pad;
              T* dst = gx.data() + (((b * d.Ci + c) * d.D + z) * d.H + yy) * d.W;
              std::memcpy(dst, s, sizeof(T) * static_cast<std::size_t>(d.W));
            }
      }
    }
    if (need_gx) t.accum_grad(x, gx);
    if (need_gw) {
      Tensor<T> gw(W.shape());
      for (std::int64_t i = 0; i < gw.numel(); ++i) gw[i] = gweff.data()[i] * wscale;
      t.accum_grad(w, gw);
    }
  });
}

/// Nearest-neighbor 2x upsampling of NCDHW volumes.
template <typename T>
Var upsample2x(Tape<T>& t, Var x) {
  const auto& X = t.val(x);
  if (X.rank() != 5) throw ValidationError("upsample2x: rank-5 expected");
  const std::int64_t B = X.dim(0), C = X.dim(1), D = X.dim(2), H = X.dim(3), W = X.dim(4);
  Tensor<T> y({B, C, 2 * D, 2 * H, 2 * W});
  for (std::int64_t bc = 0; bc < B * C; ++bc)
    for (std::int64_t z = 0; z < 2 * D; ++z)
      for (std::int64_t yy = 0; yy < 2 * H; ++yy) {
        const T* src = X.data() + ((bc * D + z / 2) * H + yy / 2) * W;
        T* dst = y.data() + ((bc * 2 * D + z) * 2 * H + yy) * 2 * W;
        for (std::int64_t xx = 0; xx < W; ++xx) {
          dst[2 * xx] = src[xx];
          dst[2 * xx + 1] = src[xx];
        }
      }
  return t.emit(std::move(y), {x}, [x](Tape<T>& t, Var self) {
    const auto& G = t.grad(self);
    const auto& X = t.val(x);
    const std::int64_t B = X.dim(0), C = X.dim(1), D = X.dim(2), H = X.dim(3), W = X.dim(4);
    Tensor<T> gx(X.shape());
    for (std::int64_t bc = 0; bc < B * C; ++bc)
      for (std::int64_t z = 0; z < 2 * D; ++z)
        for (std::int64_t yy = 0; yy < 2 * H; ++yy) {
          T* dst = gx.data() + ((bc * D + z / 2) * H + yy / 2) * W;
          const T* src = G.data() + ((bc * 2 * D + z) * 2 * H + yy) * 2 * W;
          for (std::int64_t xx = 0; xx < W; ++xx) dst[xx] += src[2 * xx] + src[2 * xx + 1];
        }
    t.accum_grad(x, gx);
  });
}

/// Per-sample per-channel scaling: y[b,c,...] = x[b,c,...] * s[b,c].
template <typename T>
Var scale_channels(Tape<T>& t, Var x, Var s) {
  const auto& X = t.val(x);
  const auto& S = t.val(s);
  if (X.rank() != 5 || S.rank() != 2 || X.dim(0) != S.dim(0) || X.dim(1) != S.dim(1)) {
    throw ValidationError("scale_channels: shape mismatch");
  }
  const std::int64_t B = X.dim(0), C = X.dim(1), sp = X.dim(2) * X.dim(3) * X.dim(4);
  Tensor<T> y(X.shape());
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c) {
      const T sc = S[b * C + c];
      const T* src = X.data() + (b * C + c) * sp;
      T* dst = y.data() + (b * C + c) * sp;
      for (std::int64_t i = 0; i < sp; ++i) dst[i] = src[i] * sc;
    }
  return t.emit(std::move(y), {x, s}, [x, s](Tape<T>& t, Var self) {
    const auto& G = t.grad(self);
    const auto& X = t.val(x);
    const auto& S = t.val(s);
    const std::int64_t B = X.dim(0), C = X.dim(1), sp = X.dim(2) * X.dim(3) * X.dim(4);
    if (t.requires_grad(x)) {
      Tensor<T> gx(X.shape());
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
          const T sc = S[b * C + c];
          const T* g = G.data() + (b * C + c) * sp;
          T* dst = gx.data() + (b * C + c) * sp;
          for (std::int64_t i = 0; i < sp; ++i) dst[i] = g[i] * sc;
        }
      t.accum_grad(x, gx);
    }
    if (t.requires_grad(s)) {
      Tensor<T> gs(S.shape());
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
          const T* g = G.data() + (b * C + c) * sp;
          const T* xv = X.data() + (b * C + c) * sp;
          T acc = T(0);
          for (std::int64_t i = 0; i < sp; ++i) acc += g[i] * xv[i];
          gs[b * C + c] = acc;
        }
      t.accum_grad(s, gs);
    }
  });
}

/// y[b,c,...] = x[b,c,...] + bias[c].
template <typename T>
Var bias_channels(Tape<T>& t, Var x, Var bias) {
  const auto& X = t.val(x);
  const auto& Bv = t.val(bias);
  if (X.rank() != 5 || Bv.numel() != X.dim(1)) throw ValidationError("bias_channels: shape mismatch");
  const std::int64_t B = X.dim(0), C = X.dim(1), sp = X.dim(2) * X.dim(3) * X.dim(4);
  Tensor<T> y = X;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c) {
      T* dst = y.data() + (b * C + c) * sp;
      const T bc = Bv[c];
      for (std::int64_t i = 0; i < sp; ++i) dst[i] += bc;
    }
  return t.emit(std::move(y), {x, bias}, [x, bias](Tape<T>& t, Var self) {
    const auto& G = t.grad(self);
    const auto& X = t.val(x);
    const std::int64_t B = X.dim(0), C = X.dim(1), sp = X.dim(2) * X.dim(3) * X.dim(4);
    if (t.requires_grad(x)) t.accum_grad(x, G);
    if (t.requires_grad(bias)) {
      Tensor<T> gb({C});
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
          const T* g = G.data() + (b * C + c) * sp;
          T acc = T(0);
          for (std::int64_t i = 0; i < sp; ++i) acc += g[i];
          gb[c] += acc;
        }
      t.accum_grad(bias, gb);
    }
  });
}

/// Demodulation coefficients for a style-modulated convolution:
/// d[b,o] = 1 / sqrt(sum_{i,k} (wscale * w[o,i,k] * s[b,i])^2 + eps).
template <typename T>
Var demod_coeffs(Tape<T>& t, Var w, Var s, T wscale, T eps = T(1e-8)) {
  const auto& W = t.val(w);
  const auto& S = t.val(s);
  if (W.rank() != 5 || S.rank() != 2 || W.dim(1) != S.dim(1)) {
    throw ValidationError("demod_coeffs: shape mismatch");
  }
  const std::int64_t Co = W.dim(0), Ci = W.dim(1), kk = W.dim(2) * W.dim(3) * W.dim(4);
  const std::int64_t B = S.dim(0);
  // M[o,i] = sum_k (wscale * w)^2
  Tensor<T> m({Co, Ci});
  for (std::int64_t o = 0; o < Co; ++o)
    for (std::int64_t i = 0; i < Ci; ++i) {
      T acc = T(0);
      const T* wp = W.data() + (o * Ci + i) * kk;
      for (std::int64_t k = 0; k < kk; ++k) acc += wp[k] * wp[k];
      m[o * Ci + i] = acc * wscale * wscale;
    }
  Tensor<T> d({B, Co});
  Tensor<T> vsave({B, Co});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t o = 0; o < Co; ++o) {
      T v = eps;
      for (std::int64_t i = 0; i < Ci; ++i) v += m[o * Ci + i] * S[b * Ci + i] * S[b * Ci + i];
      vsave[b * Co + o] = v;
      d[b * Co + o] = T(1) / std::sqrt(v);
    }
  return t.emit(std::move(d), {w, s},
                [w, s, wscale, m = std::move(m), vsave = std::move(vsave)](Tape<T>& t, Var self) {
    const auto& G = t.grad(self);
    const auto& W = t.val(w);
    const auto& S = t.val(s);
    const std::int64_t Co = W.dim(0), Ci = W.dim(1), kk = W.dim(2) * W.dim(3) * W.dim(4);
    const std::int64_t B = S.dim(0);
    // dd/dv = -0.5 * v^{-3/2}
    Tensor<T> coef({B, Co});
    for (std::int64_t i = 0; i < coef.numel(); ++i) {
      const T v = vsave[i];
      coef[i] = G[i] * T(-0.5) / (v * std::sqrt(v));
    }
    if (t.requires_grad(s)) {
      Tensor<T> gs(S.shape());
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < Ci; ++i) {
          T acc = T(0);
          for (std::int64_t o = 0; o < Co; ++o) acc += coef[b * Co + o] * m[o * Ci + i];
          gs[b * Ci + i] = acc * T(2) * S[b * Ci + i];
        }
      t.accum_grad(s, gs);
    }
    if (t.requires_grad(w)) {
      Tensor<T> gw(W.shape());
      for (std::int64_t o = 0; o < Co; ++o)
        for (std::int64_t i = 0; i < Ci; ++i) {
          T acc = T(0);
          for (std::int64_t b = 0; b < B; ++b) acc += coef[b * Co + o] * S[b * Ci + i] * S[b * Ci + i];
          const T* wp = W.data() + (o * Ci + i) * kk;
          T* gp = gw.data() + (o * Ci + i) * kk;
          for (std::int64_t k = 0; k < kk; ++k) gp[k] = acc * T(2) * wscale * wscale * wp[k];
        }
      t.accum_grad(w, gw);
    }
  });
}

/// Appends one channel holding the batch-wide feature standard deviation
/// averaged over all features (single group across the whole batch).
template <typename T>
Var minibatch_stddev(Tape<T>& t, Var x, T eps = T(1e-8)) {
  const auto& X = t.val(x);
  if (X.rank() != 5) throw ValidationError("minibatch_stddev: rank-5 expected");
  const std::int64_t B = X.dim(0), C = X.dim(1), sp = X.dim(2) * X.dim(3) * X.dim(4);
  const std::int64_t F = C * sp;
  std::vector<T> mu(static_cast<std::size_t>(F), T(0));
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t f = 0; f < F; ++f) mu[static_cast<std::size_t>(f)] += X[b * F + f];
  for (T& v : mu) v /= static_cast<T>(B);
  std::vector<T> sd(static_cast<std::size_t>(F), T(0));
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t f = 0; f < F; ++f) {
      const T dv = X[b * F + f] - mu[static_cast<std::size_t>(f)];
      sd[static_cast<std::size_t>(f)] += dv * dv;
    }
  T sigma = T(0);
  for (std::int64_t f = 0; f < F; ++f) {
    sd[static_cast<std::size_t>(f)] = std::sqrt(sd[static_cast<std::size_t>(f)] / static_cast<T>(B) + eps);
    sigma += sd[static_cast<std::size_t>(f)];
  }
  sigma /= static_cast<T>(F);

  Tensor<T> y({B, C + 1, X.dim(2), X.dim(3), X.dim(4)});
  for (std::int64_t b = 0; b < B; ++b) {
    std::memcpy(y.data() + b * (C + 1) * sp, X.data() + b * C * sp, sizeof(T) * static_cast<std::size_t>(C * sp));
    T* extra = y.data() + (b * (C + 1) + C) * sp;
    for (std::int64_t i = 0; i < sp; ++i) extra[i] = sigma;
  }
  return t.emit(std::move(y), {x},
                [x, mu = std::move(mu), sd = std::move(sd)](Tape<T>& t, Var self) {
    const auto& G = t.grad(self);
    const auto& X = t.val(x);
    const std::int64_t B = X.dim(0), C = X.dim(1), sp = X.dim(2) * X.dim(3) * X.dim(4);
    const std::int64_t F = C * sp;
    T gsum = T(0);
    for (std::int64_t b = 0; b < B; ++b) {
      const T* extra = G.data() + (b * (C + 1) + C) * sp;
      for (std::int64_t i = 0; i < sp; ++i) gsum += extra[i];
    }
    Tensor<T> gx(X.shape());
    const T scale = gsum / (static_cast<T>(F) * static_cast<T>(B));
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t f = 0; f < F; ++f) {
        gx[b * F + f] = G[b * (C + 1) * sp + f] +
                        scale * (X[b * F + f] - mu[static_cast<std::size_t>(f)]) / sd[static_cast<std::size_t>(f)];
      }
    t.accum_grad(x, gx);
  });
}

template <typename T>
Var global_avg_pool(Tape<T>& t, Var x) {
  const auto& X = t.val(x);
  if (X.rank() != 5) throw ValidationError("global_avg_pool: rank-5 expected");
  const std::int64_t B = X.dim(0), C = X.dim(1), sp = X.dim(2) * X.dim(3) * X.dim(4);
  Tensor<T> y({B, C});
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    const T* src = X.data() + bc * sp;
    T acc = T(0);
    for (std::int64_t i = 0; i < sp; ++i) acc += src[i];
    y[bc] = acc / static_cast<T>(sp);
  }
  return t.emit(std::move(y), {x}, [x](Tape<T>& t, Var self) {
    const auto& G = t.grad(self);
    const auto& X = t.val(x);
    const std::int64_t B = X.dim(0), C = X.dim(1), sp = X.dim(2) * X.dim(3) * X.dim(4);
    Tensor<T> gx(X.shape());
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
      const T g = G[bc] / static_cast<T>(sp);
      T* dst = gx.data() + bc * sp;
      for (std::int64_t i = 0; i < sp; ++i) dst[i] = g;
    }
    t.accum_grad(x, gx);
  });
}

template <typename T>
Var concat_channels(Tape<T>& t, Var a, Var b) {
  const auto& A = t.val(a);
  const auto& B = t.val(b);
  if (A.rank() != 5 || B.rank() != 5 || A.dim(0) != B.dim(0) || A.dim(2) != B.dim(2) ||
      A.dim(3) != B.dim(3) || A.dim(4) != B.dim(4)) {
    throw ValidationError("concat_channels: shape mismatch");
  }
  const std::int64_t Bn = A.dim(0), Ca = A.dim(1), Cb = B.dim(1), sp = A.dim(2) * A.dim(3) * A.dim(4);
  Tensor<T> y({Bn, Ca + Cb, A.dim(2), A.dim(3), A.dim(4)});
  for (std::int64_t i = 0; i < Bn; ++i) {
    std::memcpy(y.data() + i * (Ca + Cb) * sp, A.data() + i * Ca * sp, sizeof(T) * static_cast<std::size_t>(Ca * sp));
    std::memcpy(y.data() + (i * (Ca + Cb) + Ca) * sp, B.data() + i * Cb * sp,
                sizeof(T) * static_cast<std::size_t>(Cb * sp));
  }
  return t.emit(std::move(y), {a, b}, [a, b](Tape<T>& t, Var self) {
    const auto& G = t.grad(self);
    const auto& A = t.val(a);
    const auto& B = t.val(b);
    const std::int64_t Bn = A.dim(0), Ca = A.dim(1), Cb = B.dim(1), sp = A.dim(2) * A.dim(3) * A.dim(4);
    if (t.requires_grad(a)) {
      Tensor<T> ga(A.shape());
      for (std::int64_t i = 0; i < Bn; ++i)
        std::memcpy(ga.data() + i * Ca * sp, G.data() + i * (Ca + Cb) * sp,
                    sizeof(T) * static_cast<std::size_t>(Ca * sp));
      t.accum_grad(a, ga);
    }
    if (t.requires_grad(b)) {
      Tensor<T> gb(B.shape());
      for (std::int64_t i = 0; i < Bn; ++i)
        std::memcpy(gb.data() + i * Cb * sp, G.data() + (i * (Ca + Cb) + Ca) * sp,
                    sizeof(T) * static_cast<std::size_t>(Cb * sp));
      t.accum_grad(b, gb);
    }
  });
}

/// Broadcast a constant-like tensor across a new leading batch axis.
template <typename T>
Var repeat_batch(Tape<T>& t, Var x, std::int64_t batch) {
  const auto& X = t.val(x);
  std::vector<std::int64_t> shape = X.shape();
  shape.insert(shape.begin(), batch);
  Tensor<T> y(shape);
  const std::int64_t n = X.numel();
  for (std::int64_t b = 0; b < batch; ++b)
    std::memcpy(y.data() + b * n, X.data(), sizeof(T) * static_cast<std::size_t>(n));
  return t.emit(std::move(y), {x}, [x, batch](Tape<T>& t, Var self) {
    const auto& G = t.grad(self);
    const auto& X = t.val(x);
    const std::int64_t n = X.numel();
    Tensor<T> gx(X.shape());
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t i = 0; i < n; ++i) gx[i] += G[b * n + i];
    t.accum_grad(x, gx);
  });
}

// ---------------------------------------------------------------------------
// Reductions, norms, losses
// ---------------------------------------------------------------------------

/// Scaled row dot product: y[b] = scale * sum_i a[b,i] * b[b,i].
template <typename T>
Var rowdot(Tape<T>& t, Var a, Var b, T scale) {
  const auto& A = t.val(a);
  const auto& B = t.val(b);
  if (!A.same_shape(B) || A.rank() != 2) throw ValidationError("rowdot: shape mismatch");
  const std::int64_t Bn = A.dim(0), n = A.dim(1);
  Tensor<T> y({Bn});
  for (std::int64_t r = 0; r < Bn; ++r) {
    T acc = T(0);
    for (std::int64_t i = 0; i < n; ++i) acc += A[r * n + i] * B[r * n + i];
    y[r] = acc * scale;
  }
  return t.emit(std::move(y), {a, b}, [a, b, scale](Tape<T>& t, Var self) {
    const auto& G = t.grad(self);
    const auto& A = t.val(a);
    const auto& B = t.val(b);
    const std::int64_t Bn = A.dim(0), n = A.dim(1);
    if (t.requires_grad(a)) {
      Tensor<T> ga(A.shape());
      for (std::int64_t r = 0; r < Bn; ++r)
        for (std::int64_t i = 0; i < n; ++i) ga[r * n + i] = G[r] * scale * B[r * n + i];
      t.accum_grad(a, ga);
    }
    if (t.requires_grad(b)) {
      Tensor<T> gb(B.shape());
      for (std::int64_t r = 0; r < Bn; ++r)
        for (std::int64_t i = 0; i < n; ++i) gb[r * n + i] = G[r] * scale * A[r * n + i];
      t.accum_grad(b, gb);
    }
  });
}

/// Unsquared per-row Euclidean norm. Subgradient 0 at the origin.
template <typename T>
Var l2norm_rows(Tape<T>& t, Var x) {
  const auto& X = t.val(x);
  if (X.rank() != 2) throw ValidationError("l2norm_rows: rank 2 expected");
  const std::int64_t Bn = X.dim(0), n = X.dim(1);
  Tensor<T> y({Bn});
  for (std::int64_t r = 0; r < Bn; ++r) {
    T acc = T(0);
    for (std::int64_t i = 0; i < n; ++i) acc += X[r * n + i] * X[r * n + i];
    y[r] = std::sqrt(acc);
  }
  return t.emit(std::move(y), {x}, [x](Tape<T>& t, Var self) {
    const auto& G = t.grad(self);
    const auto& Y = t.val(self);
    const auto& X = t.val(x);
    const std::int64_t Bn = X.dim(0), n = X.dim(1);
    Tensor<T> gx(X.shape());
    for (std::int64_t r = 0; r < Bn; ++r) {
      const T nr = std::max(Y[r], T(1e-12));
      const T c = G[r] / nr;
      for (std::int64_t i = 0; i < n; ++i) gx[r * n + i] = c * X[r * n + i];
    }
    t.accum_grad(x, gx);
  });
}

/// Squared per-row Euclidean norm.
template <typename T>
Var sumsq_rows(Tape<T>& t, Var x) {
  const auto& X = t.val(x);
  if (X.rank() != 2) throw ValidationError("sumsq_rows: rank 2 expected");
  const std::int64_t Bn = X.dim(0), n = X.dim(1);
  Tensor<T> y({Bn});
  for (std::int64_t r = 0; r < Bn; ++r) {
    T acc = T(0);
    for (std::int64_t i = 0; i < n; ++i) acc += X[r * n + i] * X[r * n + i];
    y[r] = acc;
  }
  return t.emit(std::move(y), {x}, [x](Tape<T>& t, Var self) {
    const auto& G = t.grad(self);
    const auto& X = t.val(x);
    const std::int64_t Bn = X.dim(0), n = X.dim(1);
    Tensor<T> gx(X.shape());
    for (std::int64_t r = 0; r < Bn; ++r)
      for (std::int64_t i = 0; i < n; ++i) gx[r * n + i] = T(2) * G[r] * X[r * n + i];
    t.accum_grad(x, gx);
  });
}

/// Binary cross-entropy against constant targets, computed from logits:
/// y[b] = softplus(l[b]) - target[b] * l[b].
template <typename T>
Var bce_with_logits(Tape<T>& t, Var logits, std::vector<T> targets) {
  const auto& L = t.val(logits);
  if (L.rank() != 1 || static_cast<std::size_t>(L.numel()) != targets.size()) {
    throw ValidationError("bce_with_logits: shape mismatch");
  }
  Tensor<T> y(L.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    y[i] = stable_softplus(L[i]) - targets[static_cast<std::size_t>(i)] * L[i];
  }
  return t.emit(std::move(y), {logits}, [logits, targets = std::move(targets)](Tape<T>& t, Var self) {
    const auto& G = t.grad(self);
    const auto& L = t.val(logits);
    Tensor<T> gl(L.shape());
    for (std::int64_t i = 0; i < gl.numel(); ++i) {
      gl[i] = G[i] * (sigmoid(L[i]) - targets[static_cast<std::size_t>(i)]);
    }
    t.accum_grad(logits, gl);
  });
}

/// Non-saturating GAN penalty softplus(sign * l) applied per row.
template <typename T>
Var softplus_rows(Tape<T>& t, Var logits, T sign) {
  const auto& L = t.val(logits);
  Tensor<T> y(L.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = stable_softplus(sign * L[i]);
  return t.emit(std::move(y), {logits}, [logits, sign](Tape<T>& t, Var self) {
    const auto& G = t.grad(self);
    const auto& L = t.val(logits);
    Tensor<T> gl(L.shape());
    for (std::int64_t i = 0; i < gl.numel(); ++i) gl[i] = G[i] * sign * sigmoid(sign * L[i]);
    t.accum_grad(logits, gl);
  });
}

template <typename T>
Var mean_all(Tape<T>& t, Var x) {
  const auto& X = t.val(x);
  T acc = T(0);
  for (std::int64_t i = 0; i < X.numel(); ++i) acc += X[i];
  const T n = static_cast<T>(X.numel());
  Tensor<T> y = Tensor<T>::scalar(acc / n);
  return t.emit(std::move(y), {x}, [x, n](Tape<T>& t, Var self) {
    const T g = t.grad(self)[0] / n;
    Tensor<T> gx(t.val(x).shape());
    gx.fill(g);
    t.accum_grad(x, gx);
  });
}

template <typename T>
Var sum_all(Tape<T>& t, Var x) {
  const auto& X = t.val(x);
  T acc = T(0);
  for (std::int64_t i = 0; i < X.numel(); ++i) acc += X[i];
  Tensor<T> y = Tensor<T>::scalar(acc);
  return t.emit(std::move(y), {x}, [x](Tape<T>& t, Var self) {
    const T g = t.grad(self)[0];
    Tensor<T> gx(t.val(x).shape());
    gx.fill(g);
    t.accum_grad(x, gx);
  });
}

/// y = x * s where s is a trainable scalar (shape [1]).
template <typename T>
Var mul_scalar_param(Tape<T>& t, Var x, Var s) {
  const auto& X = t.val(x);
  const auto& S = t.val(s);
  if (S.numel() != 1) throw ValidationError("mul_scalar_param: scalar expected");
  Tensor<T> y(X.shape());
  const T sv = S[0];
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = X[i] * sv;
  return t.emit(std::move(y), {x, s}, [x, s](Tape<T>& t, Var self) {
    const auto& G = t.grad(self);
    const auto& X = t.val(x);
    const T sv = t.val(s)[0];
    if (t.requires_grad(x)) {
      Tensor<T> gx(X.shape());
      for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] = G[i] * sv;
      t.accum_grad(x, gx);
    }
    if (t.requires_grad(s)) {
      T acc = T(0);
      for (std::int64_t i = 0; i < X.numel(); ++i) acc += G[i] * X[i];
      t.accum_grad(s, Tensor<T>::scalar(acc));
    }
  });
}

}  // namespace voxopt::ops
