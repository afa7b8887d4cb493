#pragma once

// 3-D pixel unshuffle / pixel shuffle: lossless permutations between channel
// and spatial dimensions.
//
// Channel-major index map: unshuffle sends input channel c and sub-voxel
// offset (dh, dw, dd), dh,dw,dd in [0,r), to output channel
//     c*r^3 + (dh*r + dw)*r + dd,
// halving... more precisely dividing each spatial extent by r.  Pixel
// shuffle applies the exact inverse, so shuffle(unshuffle(x)) is bitwise
// identity for any tensor with spatial sizes divisible by r.

#include "core.hpp"

namespace sunet {

// (n, c, H, W, D) -> (n, c*r^3, H/r, W/r, D/r); requires r >= 1 and H,W,D divisible by r.
template <class T>
Tensor5<T> pixel_unshuffle(const Tensor5<T>& x, int r) {
  const Shape5 s = x.shape();
  require(r >= 1, "pixel_unshuffle: factor must be >= 1");
  require(s.H % r == 0 && s.W % r == 0 && s.D % r == 0,
          "pixel_unshuffle: spatial dims " + s.str() + " not divisible by r=" + std::to_string(r));
  const int64_t r3 = int64_t(r) * r * r;
  Tensor5<T> y(s.n, s.c * r3, s.H / r, s.W / r, s.D / r);
  const Shape5 t = y.shape();
  const T* xp = x.data();
  T* yp = y.data();
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t c = 0; c < s.c; ++c)
      for (int dh = 0; dh < r; ++dh)
        for (int dw = 0; dw < r; ++dw)
          for (int dd = 0; dd < r; ++dd) {
            const int64_t co = c * r3 + (int64_t(dh) * r + dw) * r + dd;
            for (int64_t h = 0; h < t.H; ++h)
              for (int64_t w = 0; w < t.W; ++w) {
                const T* src = xp + (((n * s.c + c) * s.H + h * r + dh) * s.W + w * r + dw) * s.D + dd;
                T* dst = yp + (((n * t.c + co) * t.H + h) * t.W + w) * t.D;
                for (int64_t d = 0; d < t.D; ++d) dst[d] = src[int64_t(d) * r];
              }
          }
  return y;
}

// (n, c, H, W, D) -> (n, c/r^3, H*r, W*r, D*r); requires c divisible by r^3.  Exact inverse
// of pixel_unshuffle under the channel-major index map.
template <class T>
Tensor5<T> pixel_shuffle(const Tensor5<T>& x, int r) {
  const Shape5 s = x.shape();
  require(r >= 1, "pixel_shuffle: factor must be >= 1");
  const int64_t r3 = int64_t(r) * r * r;
  require(s.c % r3 == 0,
          "pixel_shuffle: channels " + std::to_string(s.c) + " not divisible by r^3=" + std::to_string(r3));
  Tensor5<T> y(s.n, s.c / r3, s.H * r, s.W * r, s.D * r);
  const Shape5 t = y.shape();
  const T* xp = x.data();
  T* yp = y.data();
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t c = 0; c < t.c; ++c)
      for (int dh = 0; dh < r; ++dh)
        for (int dw = 0; dw < r; ++dw)
          for (int dd = 0; dd < r; ++dd) {
            const int64_t ci = c * r3 + (int64_t(dh) * r + dw) * r + dd;
            for (int64_t h = 0; h < s.H; ++h)
              for (int64_t w = 0; w < s.W; ++w) {
                const T* src = xp + (((n * s.c + ci) * s.H + h) * s.W + w) * s.D;
                T* dst = yp + (((n * t.c + c) * t.H + h * r + dh) * t.W + w * r + dw) * t.D + dd;
                for (int64_t d = 0; d < s.D; ++d) dst[int64_t(d) * r] = src[d];
              }
          }
  return y;
}

}  // namespace sunet
