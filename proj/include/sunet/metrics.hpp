#pragma once

// Volume similarity metrics.
//
// ssim   - mean structural similarity over all fully-interior windows, with a
//          3-D Gaussian window (default 11^3, sigma 1.5) and the usual
//          stabilizers C1=(K1 L)^2, C2=(K2 L)^2.  L defaults to the intensity
//          range (max - min) of the reference, falling back to 1 when the
//          reference is constant.
// uqi    - mean universal quality index over all 8^3 stride-1 windows
//          (unweighted, no stabilizers).  Written as luminance * structure:
//          l = 2 ma mb / (ma^2 + mb^2), taken as 1 when both means are zero;
//          s = 2 cov / (va + vb).  Windows where both variances vanish
//          contribute 1 when their contents are identical and are skipped
//          otherwise.
// rmse   - root mean squared difference.
//
// Identical inputs therefore give exactly (ssim, uqi, rmse) = (1, 1, 0).

#include "volume.hpp"

namespace sunet {

namespace metrics_detail {

inline void check_pair(const Volume& a, const Volume& b, const char* what) {
  if (a.nx != b.nx || a.ny != b.ny || a.nz != b.nz)
    throw shape_error(std::string(what) + ": volume dims differ");
  if (a.size() == 0) throw shape_error(std::string(what) + ": empty volumes");
}

// separable weighted blur along one axis, zero-padded borders (only interior
// voxels, where the window fits, are ever read by the caller)
inline void blur_axis(const std::vector<double>& src, std::vector<double>& dst, int64_t nx,
                      int64_t ny, int64_t nz, int axis, const std::vector<double>& w) {
  const int64_t r = int64_t(w.size()) / 2;
  const int64_t stride = axis == 0 ? 1 : axis == 1 ? nx : nx * ny;
  const int64_t extent = axis == 0 ? nx : axis == 1 ? ny : nz;
  for (int64_t z = 0; z < nz; ++z)
    for (int64_t y = 0; y < ny; ++y)
      for (int64_t x = 0; x < nx; ++x) {
        const int64_t pos = axis == 0 ? x : axis == 1 ? y : z;
        const int64_t base = (z * ny + y) * nx + x;
        double acc = 0.0;
        const int64_t k0 = std::max<int64_t>(-r, -pos), k1 = std::min(r, extent - 1 - pos);
        for (int64_t k = k0; k <= k1; ++k) acc += w[size_t(k + r)] * src[size_t(base + k * stride)];
        dst[size_t(base)] = acc;
      }
}

inline void gaussian_blur3(std::vector<double>& field, std::vector<double>& tmp, int64_t nx,
                           int64_t ny, int64_t nz, const std::vector<double>& w) {
  blur_axis(field, tmp, nx, ny, nz, 0, w);
  blur_axis(tmp, field, nx, ny, nz, 1, w);
  blur_axis(field, tmp, nx, ny, nz, 2, w);
  field.swap(tmp);
}

// 3-D inclusive prefix sums; window sums then come from 8 corners.
inline std::vector<double> prefix3(const std::vector<double>& src, int64_t nx, int64_t ny,
                                   int64_t nz) {
  std::vector<double> p(src.size());
  for (int64_t z = 0; z < nz; ++z)
    for (int64_t y = 0; y < ny; ++y) {
      double row = 0.0;
      for (int64_t x = 0; x < nx; ++x) {
        const size_t i = size_t((z * ny + y) * nx + x);
        row += src[i];
        double v = row;
        if (y > 0) v += p[i - size_t(nx)];
        if (z > 0) v += p[i - size_t(nx * ny)];
        if (y > 0 && z > 0) v -= p[i - size_t(nx * ny) - size_t(nx)];
        p[i] = v;
      }
    }
  return p;
}

// sum over [x0,x1] x [y0,y1] x [z0,z1], all bounds inclusive
inline double box_sum(const std::vector<double>& p, int64_t nx, int64_t ny, int64_t x0, int64_t x1,
                      int64_t y0, int64_t y1, int64_t z0, int64_t z1) {
  auto at = [&](int64_t x, int64_t y, int64_t z) -> double {
    if (x < 0 || y < 0 || z < 0) return 0.0;
    return p[size_t((z * ny + y) * nx + x)];
  };
  return at(x1, y1, z1) - at(x0 - 1, y1, z1) - at(x1, y0 - 1, z1) - at(x1, y1, z0 - 1) +
         at(x0 - 1, y0 - 1, z1) + at(x0 - 1, y1, z0 - 1) + at(x1, y0 - 1, z0 - 1) -
         at(x0 - 1, y0 - 1, z0 - 1);
}

}  // namespace metrics_detail

inline double rmse(const Volume& ref, const Volume& x) {
  metrics_detail::check_pair(ref, x, "rmse");
  double acc = 0.0;
  for (size_t i = 0; i < ref.v.size(); ++i) {
    const double d = double(ref.v[i]) - double(x.v[i]);
    acc += d * d;
  }
  return std::sqrt(acc / double(ref.size()));
}

// data_range <= 0 means "derive from the reference".
inline double ssim(const Volume& ref, const Volume& x, double data_range = -1.0, int window = 11,
                   double sigma = 1.5, double k1 = 0.01, double k2 = 0.03) {
  using namespace metrics_detail;
  check_pair(ref, x, "ssim");
  require(window >= 3 && window % 2 == 1, "ssim: window must be odd and >= 3");

  // shrink the window if a volume axis cannot hold it
  const int64_t min_dim = std::min({ref.nx, ref.ny, ref.nz});
  int ws = window;
  while (ws > min_dim) ws -= 2;
  require(ws >= 3, "ssim: volume too small for any window");

  if (data_range <= 0.0) {
    float mn = ref.v[0], mx = ref.v[0];
    for (float f : ref.v) {
      mn = std::min(mn, f);
      mx = std::max(mx, f);
    }
    data_range = mx > mn ? double(mx) - double(mn) : 1.0;
  }
  const double c1 = (k1 * data_range) * (k1 * data_range);
  const double c2 = (k2 * data_range) * (k2 * data_range);

  std::vector<double> w(static_cast<size_t>(ws));
  const int64_t r = ws / 2;
  double wsum = 0.0;
  for (int64_t i = 0; i < ws; ++i) {
    const double d = double(i - r);
    w[size_t(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
    wsum += w[size_t(i)];
  }
  for (auto& v : w) v /= wsum;

  const int64_t nx = ref.nx, ny = ref.ny, nz = ref.nz;
  const size_t n = size_t(ref.size());
  std::vector<double> ma(n), mb(n), aa(n), bb(n), ab(n), tmp(n);
  for (size_t i = 0; i < n; ++i) {
    const double va = double(ref.v[i]), vb = double(x.v[i]);
    ma[i] = va;
    mb[i] = vb;
    aa[i] = va * va;
    bb[i] = vb * vb;
    ab[i] = va * vb;
  }
  gaussian_blur3(ma, tmp, nx, ny, nz, w);
  gaussian_blur3(mb, tmp, nx, ny, nz, w);
  gaussian_blur3(aa, tmp, nx, ny, nz, w);
  gaussian_blur3(bb, tmp, nx, ny, nz, w);
  gaussian_blur3(ab, tmp, nx, ny, nz, w);

  double acc = 0.0;
  int64_t count = 0;
  for (int64_t z = r; z < nz - r; ++z)
    for (int64_t y = r; y < ny - r; ++y)
      for (int64_t x4 = r; x4 < nx - r; ++x4) {
        const size_t i = size_t((z * ny + y) * nx + x4);
        // identical window statistics give a term of exactly 1; detect them
        // on the raw moment fields, before cancellation can amplify rounding
        // differences between the variance and covariance expressions
        if (ma[i] == mb[i] && aa[i] == bb[i] && ab[i] == aa[i]) {
          acc += 1.0;
          ++count;
          continue;
        }
        const double mua = ma[i], mub = mb[i];
        const double va = aa[i] - mua * mua;
        const double vb = bb[i] - mub * mub;
        const double cov = ab[i] - mua * mub;
        acc += ((2.0 * mua * mub + c1) * (2.0 * cov + c2)) /
               ((mua * mua + mub * mub + c1) * (va + vb + c2));
        ++count;
      }
  return acc / double(count);
}

inline double uqi(const Volume& a, const Volume& b, int window = 8) {
  using namespace metrics_detail;
  check_pair(a, b, "uqi");
  require(window >= 2, "uqi: window must be >= 2");
  const int64_t ws = std::min<int64_t>(window, std::min({a.nx, a.ny, a.nz}));
  const int64_t nx = a.nx, ny = a.ny, nz = a.nz;
  const double wn = double(ws * ws * ws);

  const size_t n = size_t(a.size());
  std::vector<double> fa(n), fb(n), faa(n), fbb(n), fab(n);
  for (size_t i = 0; i < n; ++i) {
    const double va = double(a.v[i]), vb = double(b.v[i]);
    fa[i] = va;
    fb[i] = vb;
    faa[i] = va * va;
    fbb[i] = vb * vb;
    fab[i] = va * vb;
  }
  const auto pa = prefix3(fa, nx, ny, nz);
  const auto pb = prefix3(fb, nx, ny, nz);
  const auto paa = prefix3(faa, nx, ny, nz);
  const auto pbb = prefix3(fbb, nx, ny, nz);
  const auto pab = prefix3(fab, nx, ny, nz);

  double acc = 0.0;
  int64_t count = 0, skipped = 0;
  for (int64_t z = 0; z + ws <= nz; ++z)
    for (int64_t y = 0; y + ws <= ny; ++y)
      for (int64_t x = 0; x + ws <= nx; ++x) {
        const int64_t x1 = x + ws - 1, y1 = y + ws - 1, z1 = z + ws - 1;
        const double sa = box_sum(pa, nx, ny, x, x1, y, y1, z, z1);
        const double sb = box_sum(pb, nx, ny, x, x1, y, y1, z, z1);
        const double saa = box_sum(paa, nx, ny, x, x1, y, y1, z, z1);
        const double sbb = box_sum(pbb, nx, ny, x, x1, y, y1, z, z1);
        const double sab = box_sum(pab, nx, ny, x, x1, y, y1, z, z1);
        // identical window content gives q = 1 by identity; the quotient
        // below amplifies per-line rounding differences (fused multiply-add
        // contraction) through catastrophic cancellation, so test the raw
        // sums, which are computed before any cancellation
        if (sa == sb && saa == sbb && sab == saa) {
          acc += 1.0;
          ++count;
          continue;
        }

        const double mua = sa / wn, mub = sb / wn;
        const double va = saa / wn - mua * mua;
        const double vb = sbb / wn - mub * mub;
        const double cov = sab / wn - mua * mub;

        if (va + vb == 0.0) {  // both windows constant
          bool same = true;
          for (int64_t dz = 0; dz < ws && same; ++dz)
            for (int64_t dy = 0; dy < ws && same; ++dy)
              for (int64_t dx = 0; dx < ws; ++dx)
                if (a.at(x + dx, y + dy, z + dz) != b.at(x + dx, y + dy, z + dz)) {
                  same = false;
                  break;
                }
          if (same) {
            acc += 1.0;
            ++count;
          } else {
            ++skipped;
          }
          continue;
        }
        // equal means give luminance 1 by identity; the quotient form can
        // round away from 1 under fused multiply-add
        const double lden = mua * mua + mub * mub;
        const double lum = (mua == mub || lden == 0.0) ? 1.0 : (2.0 * mua * mub) / lden;
        acc += lum * (2.0 * cov) / (va + vb);
        ++count;
      }
  if (count == 0)
    throw data_error("uqi: all " + std::to_string(skipped) + " windows degenerate and distinct");
  return acc / double(count);
}

}  // namespace sunet
