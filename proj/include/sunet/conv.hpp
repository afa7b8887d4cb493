#pragma once

// 3-D convolution (kernel 1 or 3, stride 1, zero padding (k-1)/2, same-size
// output) with forward, input-gradient and weight-gradient passes.
//
// Two execution strategies share one dispatch:
//   * im2col + GEMM, chunked over h-slabs so scratch stays bounded,
//   * Winograd F(4,3)^3 for float 3x3x3 layers with enough output tiles
//     (8x fewer multiplies; transforms are exact in rationals, the float
//     evaluation agrees with im2col to ~1e-4 relative).
//
// Weight layout: w[co][ci][kh][kw][kd] flat; bias one value per output
// channel (nullptr means zero bias).

#include <algorithm>
#include <cstring>

#include "core.hpp"
#include "gemm.hpp"

namespace sunet {

template <class T>
struct ConvScratch {
  std::vector<T> col;    // im2col slab, (Ci*k^3) x V
  std::vector<T> wt;     // flipped/transposed weights for the data gradient
  std::vector<T> uw;     // Winograd-transformed weights, 216 x (Co*Ci)
  std::vector<T> vin;    // Winograd-transformed input tiles, 216 x (Ci*NT)
  std::vector<T> mout;   // Winograd products, 216 x (Co*NT)
};

namespace detail {

// Gather one im2col row block: col rows (ci,kh,kw,kd), columns = voxels of
// output rows h in [h0,h1).  Zero padding handled by bounds checks per run.
template <class T>
void im2col_slab(const Tensor5<T>& x, int64_t n, int k, int64_t h0, int64_t h1, T* col) {
  const Shape5 s = x.shape();
  const int64_t W = s.W, D = s.D, V = (h1 - h0) * W * D;
  const int p = (k - 1) / 2;
  const T* xb = x.data() + n * s.c * s.spatial();
  int64_t row = 0;
  for (int64_t ci = 0; ci < s.c; ++ci)
    for (int kh = 0; kh < k; ++kh)
      for (int kw = 0; kw < k; ++kw)
        for (int kd = 0; kd < k; ++kd, ++row) {
          T* dst = col + row * V;
          for (int64_t h = h0; h < h1; ++h) {
            const int64_t sh = h + kh - p;
            for (int64_t w = 0; w < W; ++w, dst += D) {
              const int64_t sw = w + kw - p;
              if (sh < 0 || sh >= s.H || sw < 0 || sw >= W) {
                std::fill(dst, dst + D, T(0));
                continue;
              }
              const T* src = xb + ((ci * s.H + sh) * W + sw) * D + (kd - p);
              const int64_t lo = std::max<int64_t>(0, p - kd);          // first valid d
              const int64_t hi = std::min<int64_t>(D, D + p - kd);      // one past last valid d
              if (lo > 0) std::fill(dst, dst + lo, T(0));
              std::copy(src + lo, src + hi, dst + lo);
              if (hi < D) std::fill(dst + hi, dst + D, T(0));
            }
          }
        }
}

// Pick an h-slab height so the im2col buffer stays near 48 MB.
inline int64_t conv_slab_rows(int64_t Ci, int k, int64_t H, int64_t W, int64_t D, size_t esize) {
  const int64_t per_row = Ci * k * k * k * W * D * int64_t(esize);
  return std::clamp<int64_t>((int64_t(48) << 20) / std::max<int64_t>(per_row, 1), 1, H);
}

template <class T>
void conv3d_im2col(const Tensor5<T>& x, const T* w, const T* b, int Co, int k, Tensor5<T>& y,
                   ConvScratch<T>& s) {
  const Shape5 xs = x.shape();
  const int64_t K = xs.c * k * k * k, W = xs.W, D = xs.D;
  const int64_t slab = conv_slab_rows(xs.c, k, xs.H, W, D, sizeof(T));
  s.col.resize(size_t(K * slab * W * D));
  for (int64_t n = 0; n < xs.n; ++n)
    for (int64_t h0 = 0; h0 < xs.H; h0 += slab) {
      const int64_t h1 = std::min(xs.H, h0 + slab), V = (h1 - h0) * W * D;
      im2col_slab(x, n, k, h0, h1, s.col.data());
      T* yo = y.data() + n * Co * xs.spatial() + h0 * W * D;
      CMapRM<T> A(w, Co, K), B(s.col.data(), K, V);
      Eigen::Map<MatRM<T>, 0, Eigen::OuterStride<>> out(yo, Co, V,
                                                        Eigen::OuterStride<>(xs.spatial()));
      out.noalias() = A * B;
      if (b)
        for (int64_t co = 0; co < Co; ++co) out.row(co).array() += b[co];
    }
}

// ---- Winograd F(4,3)^3, float-only fast path ------------------------------

inline constexpr double WG[6][3] = {{1.0 / 4, 0, 0},
                                    {-1.0 / 6, -1.0 / 6, -1.0 / 6},
                                    {-1.0 / 6, 1.0 / 6, -1.0 / 6},
                                    {1.0 / 24, 1.0 / 12, 1.0 / 6},
                                    {1.0 / 24, -1.0 / 12, 1.0 / 6},
                                    {0, 0, 1}};
inline constexpr double WBT[6][6] = {{4, 0, -5, 0, 1, 0},  {0, -4, -4, 1, 1, 0}, {0, 4, -4, -1, 1, 0},
                                     {0, -2, -1, 2, 1, 0}, {0, 2, -1, -2, 1, 0}, {0, 4, 0, -5, 0, 1}};
inline constexpr double WAT[4][6] = {
    {1, 1, 1, 1, 1, 0}, {0, 1, -1, 2, -2, 0}, {0, 1, 1, 4, 4, 0}, {0, 1, -1, 8, -8, 1}};

// g (3x3x3) -> u (6x6x6): apply G along each axis.
inline void wino_weight_tile(const float* g, float* u) {
  double t1[6][3][3], t2[6][6][3];
  for (int i = 0; i < 6; ++i)
    for (int a = 0; a < 3; ++a)
      for (int bb = 0; bb < 3; ++bb) {
        double acc = 0;
        for (int j = 0; j < 3; ++j) acc += WG[i][j] * g[(j * 3 + a) * 3 + bb];
        t1[i][a][bb] = acc;
      }
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j)
      for (int bb = 0; bb < 3; ++bb) {
        double acc = 0;
        for (int a = 0; a < 3; ++a) acc += WG[j][a] * t1[i][a][bb];
        t2[i][j][bb] = acc;
      }
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j)
      for (int l = 0; l < 6; ++l) {
        double acc = 0;
        for (int bb = 0; bb < 3; ++bb) acc += WG[l][bb] * t2[i][j][bb];
        u[(i * 6 + j) * 6 + l] = float(acc);
      }
}

// d (6x6x6, double) -> v (6x6x6): apply B^T along each axis in place.
inline void wino_input_tile(double* d) {
  double t[6];
  for (int j = 0; j < 6; ++j)
    for (int l = 0; l < 6; ++l) {
      for (int i = 0; i < 6; ++i) {
        double acc = 0;
        for (int a = 0; a < 6; ++a) acc += WBT[i][a] * d[(a * 6 + j) * 6 + l];
        t[i] = acc;
      }
      for (int i = 0; i < 6; ++i) d[(i * 6 + j) * 6 + l] = t[i];
    }
  for (int i = 0; i < 6; ++i)
    for (int l = 0; l < 6; ++l) {
      for (int j = 0; j < 6; ++j) {
        double acc = 0;
        for (int a = 0; a < 6; ++a) acc += WBT[j][a] * d[(i * 6 + a) * 6 + l];
        t[j] = acc;
      }
      for (int j = 0; j < 6; ++j) d[(i * 6 + j) * 6 + l] = t[j];
    }
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j) {
      double* row = d + (i * 6 + j) * 6;
      for (int l = 0; l < 6; ++l) {
        double acc = 0;
        for (int a = 0; a < 6; ++a) acc += WBT[l][a] * row[a];
        t[l] = acc;
      }
      for (int l = 0; l < 6; ++l) row[l] = t[l];
    }
}

// m (6x6x6) -> y (4x4x4): apply A^T along each axis.
inline void wino_output_tile(const double* m, double* y) {
  double t1[4][6][6], t2[4][4][6];
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 6; ++j)
      for (int l = 0; l < 6; ++l) {
        double acc = 0;
        for (int a = 0; a < 6; ++a) acc += WAT[i][a] * m[(a * 6 + j) * 6 + l];
        t1[i][j][l] = acc;
      }
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      for (int l = 0; l < 6; ++l) {
        double acc = 0;
        for (int a = 0; a < 6; ++a) acc += WAT[j][a] * t1[i][a][l];
        t2[i][j][l] = acc;
      }
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      for (int l = 0; l < 4; ++l) {
        double acc = 0;
        for (int a = 0; a < 6; ++a) acc += WAT[l][a] * t2[i][j][a];
        y[(i * 4 + j) * 4 + l] = acc;
      }
}

inline void conv3d_winograd(const Tensor5<float>& x, const float* w, const float* b, int Co,
                            Tensor5<float>& y, ConvScratch<float>& s) {
  const Shape5 xs = x.shape();
  const int64_t Ci = xs.c, H = xs.H, W = xs.W, D = xs.D;
  const int64_t TH = (H + 3) / 4, TW = (W + 3) / 4, TD = (D + 3) / 4, NTILES = TH * TW * TD;

  s.uw.resize(size_t(216) * Co * Ci);
  for (int64_t co = 0; co < Co; ++co)
    for (int64_t ci = 0; ci < Ci; ++ci) {
      float u[216];
      wino_weight_tile(w + (co * Ci + ci) * 27, u);
      for (int k = 0; k < 216; ++k) s.uw[size_t(k) * Co * Ci + co * Ci + ci] = u[k];
    }

  const int64_t NT = std::clamp<int64_t>((int64_t(12) << 20) / ((Ci + Co) * 216 * 4), 16, 512);
  s.vin.resize(size_t(216) * Ci * NT);
  s.mout.resize(size_t(216) * Co * NT);

  for (int64_t n = 0; n < xs.n; ++n) {
    const float* xb = x.data() + n * Ci * xs.spatial();
    float* yb = y.data() + n * Co * xs.spatial();
    for (int64_t t0 = 0; t0 < NTILES; t0 += NT) {
      const int64_t tn = std::min(NT, NTILES - t0);
      // input transform
      for (int64_t ci = 0; ci < Ci; ++ci)
        for (int64_t t = 0; t < tn; ++t) {
          const int64_t tid = t0 + t;
          const int64_t th = tid / (TW * TD), tw = (tid / TD) % TW, td = tid % TD;
          const int64_t h0 = th * 4 - 1, w0 = tw * 4 - 1, d0 = td * 4 - 1;
          double dblk[216];
          for (int i = 0; i < 6; ++i)
            for (int j = 0; j < 6; ++j) {
              const int64_t sh = h0 + i, sw = w0 + j;
              double* row = dblk + (i * 6 + j) * 6;
              if (sh < 0 || sh >= H || sw < 0 || sw >= W) {
                for (int l = 0; l < 6; ++l) row[l] = 0;
                continue;
              }
              const float* src = xb + (ci * H + sh) * W * D + sw * D;
              for (int l = 0; l < 6; ++l) {
                const int64_t sd = d0 + l;
                row[l] = (sd < 0 || sd >= D) ? 0.0 : double(src[sd]);
              }
            }
          wino_input_tile(dblk);
          for (int k = 0; k < 216; ++k) s.vin[size_t(k) * Ci * tn + ci * tn + t] = float(dblk[k]);
        }
      // 216 GEMMs in the transform domain
      for (int k = 0; k < 216; ++k)
        gemm<float>(s.uw.data() + size_t(k) * Co * Ci, s.vin.data() + size_t(k) * Ci * tn,
                    s.mout.data() + size_t(k) * Co * tn, Co, Ci, tn);
      // output transform + scatter
      for (int64_t co = 0; co < Co; ++co) {
        const double bias = b ? double(b[co]) : 0.0;
        for (int64_t t = 0; t < tn; ++t) {
          const int64_t tid = t0 + t;
          const int64_t th = tid / (TW * TD), tw = (tid / TD) % TW, td = tid % TD;
          double mblk[216], yblk[64];
          for (int k = 0; k < 216; ++k) mblk[k] = s.mout[size_t(k) * Co * tn + co * tn + t];
          wino_output_tile(mblk, yblk);
          float* yc = yb + co * xs.spatial();
          for (int i = 0; i < 4; ++i) {
            const int64_t oh = th * 4 + i;
            if (oh >= H) break;
            for (int j = 0; j < 4; ++j) {
              const int64_t ow = tw * 4 + j;
              if (ow >= W) break;
              float* dst = yc + (oh * W + ow) * D + td * 4;
              const int64_t nd = std::min<int64_t>(4, D - td * 4);
              const double* src = yblk + (i * 4 + j) * 4;
              for (int64_t l = 0; l < nd; ++l) dst[l] = float(src[l] + bias);
            }
          }
        }
      }
    }
  }
}

template <class T>
bool winograd_eligible(const Tensor5<T>& x, int k) {
  if constexpr (!std::is_same_v<T, float>) return false;
  const Shape5 s = x.shape();
  const int64_t ntiles = ((s.H + 3) / 4) * ((s.W + 3) / 4) * ((s.D + 3) / 4);
  return k == 3 && ntiles >= 64;
}

}  // namespace detail

// y(n,Co,H,W,D) = conv(x; w(Co,Ci,k,k,k), b(Co)).  k in {1,3}; same-size output.
template <class T>
void conv3d_forward(const Tensor5<T>& x, const T* w, const T* b, int Co, int k, Tensor5<T>& y,
                    ConvScratch<T>& s) {
  const Shape5 xs = x.shape();
  require(k == 1 || k == 3, "conv3d: kernel must be 1 or 3");
  y.resize({xs.n, Co, xs.H, xs.W, xs.D});
  if constexpr (std::is_same_v<T, float>) {
    if (detail::winograd_eligible(x, k)) {
      detail::conv3d_winograd(x, w, b, Co, y, s);
      return;
    }
  }
  detail::conv3d_im2col(x, w, b, Co, k, y, s);
}

// gx = full correlation of gy with weights: equals a same-size conv of gy with
// the channel-transposed, spatially flipped kernel.
template <class T>
void conv3d_backward_data(const Tensor5<T>& gy, const T* w, int Ci, int k, Tensor5<T>& gx,
                          ConvScratch<T>& s) {
  const Shape5 gs = gy.shape();
  const int Co = int(gs.c);
  const int kk = k * k * k;
  s.wt.resize(size_t(Ci) * Co * kk);
  for (int64_t co = 0; co < Co; ++co)
    for (int64_t ci = 0; ci < Ci; ++ci)
      for (int t = 0; t < kk; ++t)
        s.wt[(ci * Co + co) * kk + (kk - 1 - t)] = w[(co * Ci + ci) * kk + t];
  ConvScratch<T> local;  // wt aliases s; use separate scratch for the conv itself
  local.col.swap(s.col);
  local.uw.swap(s.uw);
  local.vin.swap(s.vin);
  local.mout.swap(s.mout);
  conv3d_forward(gy, s.wt.data(), static_cast<const T*>(nullptr), Ci, k, gx, local);
  local.col.swap(s.col);
  local.uw.swap(s.uw);
  local.vin.swap(s.vin);
  local.mout.swap(s.mout);
}

// gw[co][ci][kappa] = sum over batch and voxels of gy[co,v] * x[ci, v+kappa]; gb = row sums.
// Accumulates into gw/gb (callers zero them at step start).
template <class T>
void conv3d_backward_weights(const Tensor5<T>& x, const Tensor5<T>& gy, int k, T* gw, T* gb,
                             ConvScratch<T>& s) {
  const Shape5 xs = x.shape();
  const Shape5 gs = gy.shape();
  const int64_t K = xs.c * k * k * k, Co = gs.c, W = xs.W, D = xs.D;
  const int64_t slab = detail::conv_slab_rows(xs.c, k, xs.H, W, D, sizeof(T));
  s.col.resize(size_t(K * slab * W * D));
  MapRM<T> gwm(gw, Co, K);
  for (int64_t n = 0; n < xs.n; ++n) {
    for (int64_t h0 = 0; h0 < xs.H; h0 += slab) {
      const int64_t h1 = std::min(xs.H, h0 + slab), V = (h1 - h0) * W * D;
      detail::im2col_slab(x, n, k, h0, h1, s.col.data());
      CMapRM<T> colm(s.col.data(), K, V);
      Eigen::Map<const MatRM<T>, 0, Eigen::OuterStride<>> gym(
          gy.data() + n * Co * gs.spatial() + h0 * W * D, Co, V,
          Eigen::OuterStride<>(gs.spatial()));
      gwm.noalias() += gym * colm.transpose();
    }
    if (gb) {
      for (int64_t co = 0; co < Co; ++co) {
        const T* g = gy.data() + (n * Co + co) * gs.spatial();
        T acc = 0;
        for (int64_t v = 0; v < gs.spatial(); ++v) acc += g[v];
        gb[co] += acc;
      }
    }
  }
}

}  // namespace sunet
