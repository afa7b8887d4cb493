#pragma once

// Fourier (sinc) resampling of volumes plus a trilinear baseline.
//
// Up- and down-sampling are implemented as zero-padding / truncation of the
// 3-D DFT spectrum, axis by axis.  When a source axis of even length is
// padded, its Nyquist bin is split half-and-half between the +N/2 and -N/2
// target bins; when truncating to an even length, the target Nyquist bin
// receives the sum of the two source bins.  This keeps real signals real,
// preserves constants, and makes truncate(pad(x)) == x.
//
// The trilinear path uses the align-corners-false grid convention (output
// voxel centre o maps to input coordinate (o + 0.5) * n_in / n_out - 0.5)
// with linear extrapolation past the first/last voxel centre, so affine
// intensity ramps are reproduced exactly everywhere.

#include <fftw3.h>

#include <complex>

#include "volume.hpp"

namespace sunet {

namespace resample_detail {

struct AxisTap {
  int src;
  double w;
};

// For each output frequency bin, the (at most two) source bins feeding it.
// Rescales the affine's direction columns when voxel density changes; the
// optional half-voxel origin shift matches centre-aligned (align-corners
// false) sampling, where the first voxel centre moves by (new - old) / 2.
inline void rescale_affine(std::array<double, 16>& a, const std::array<double, 3>& sp_old,
                           const std::array<double, 3>& sp_new, bool half_voxel_shift) {
  for (int j = 0; j < 3; ++j) {
    if (!(sp_old[size_t(j)] > 0.0)) continue;
    for (int r = 0; r < 3; ++r) {
      const double unit = a[size_t(r * 4 + j)] / sp_old[size_t(j)];
      a[size_t(r * 4 + j)] = unit * sp_new[size_t(j)];
      if (half_voxel_shift)
        a[size_t(r * 4 + 3)] += unit * 0.5 * (sp_new[size_t(j)] - sp_old[size_t(j)]);
    }
  }
}

inline std::vector<std::array<AxisTap, 2>> axis_map(int64_t n_in, int64_t n_out) {
  std::vector<std::array<AxisTap, 2>> map(size_t(n_out), {AxisTap{0, 0.0}, AxisTap{0, 0.0}});
  auto signed_freq = [](int64_t k, int64_t n) { return k <= n / 2 ? k : k - n; };
  auto bin = [](int64_t f, int64_t n) { return int(f >= 0 ? f : f + n); };

  if (n_out >= n_in) {  // pad: walk source bins
    for (int64_t k = 0; k < n_in; ++k) {
      const int64_t f = signed_freq(k, n_in);
      if (n_out > n_in && n_in % 2 == 0 && k == n_in / 2) {
        map[size_t(bin(f, n_out))][0] = {int(k), 0.5};
        map[size_t(bin(-f, n_out))][0] = {int(k), 0.5};
      } else {
        map[size_t(bin(f, n_out))][0] = {int(k), 1.0};
      }
    }
  } else {  // truncate: walk output bins
    for (int64_t ko = 0; ko < n_out; ++ko) {
      const int64_t f = signed_freq(ko, n_out);
      map[size_t(ko)][0] = {bin(f, n_in), 1.0};
      if (n_out % 2 == 0 && ko == n_out / 2) map[size_t(ko)][1] = {bin(-f, n_in), 1.0};
    }
  }
  return map;
}

}  // namespace resample_detail

// Spectral resampling to explicit target dims.  Spacing is scaled so the
// field of view is preserved (spacing_out = spacing_in * n_in / n_out).
inline Volume fourier_resample(const Volume& in, std::array<int64_t, 3> target) {
  for (int i = 0; i < 3; ++i)
    require(target[size_t(i)] >= 1, "fourier_resample: target dims must be positive");
  const int64_t ni = in.size();
  const int64_t no = target[0] * target[1] * target[2];
  require(ni > 0, "fourier_resample: empty volume");

  std::vector<std::complex<double>> src(static_cast<size_t>(ni)), spec(static_cast<size_t>(ni));
  for (int64_t i = 0; i < ni; ++i) src[size_t(i)] = double(in.v[size_t(i)]);

  // FFTW wants the slowest dim first; our layout is z, y, x.
  fftw_plan fwd = fftw_plan_dft_3d(int(in.nz), int(in.ny), int(in.nx),
                                   reinterpret_cast<fftw_complex*>(src.data()),
                                   reinterpret_cast<fftw_complex*>(spec.data()), FFTW_FORWARD,
                                   FFTW_ESTIMATE);
  fftw_execute(fwd);
  fftw_destroy_plan(fwd);

  const auto mx = resample_detail::axis_map(in.nx, target[0]);
  const auto my = resample_detail::axis_map(in.ny, target[1]);
  const auto mz = resample_detail::axis_map(in.nz, target[2]);

  std::vector<std::complex<double>> ospec(static_cast<size_t>(no)), out(static_cast<size_t>(no));
  for (int64_t z = 0; z < target[2]; ++z)
    for (int64_t y = 0; y < target[1]; ++y)
      for (int64_t x = 0; x < target[0]; ++x) {
        std::complex<double> acc = 0.0;
        for (const auto& tz : mz[size_t(z)]) {
          if (tz.w == 0.0) continue;
          for (const auto& ty : my[size_t(y)]) {
            if (ty.w == 0.0) continue;
            for (const auto& tx : mx[size_t(x)]) {
              if (tx.w == 0.0) continue;
              acc += tz.w * ty.w * tx.w *
                     spec[size_t((int64_t(tz.src) * in.ny + ty.src) * in.nx + tx.src)];
            }
          }
        }
        ospec[size_t((z * target[1] + y) * target[0] + x)] = acc;
      }

  fftw_plan bwd = fftw_plan_dft_3d(int(target[2]), int(target[1]), int(target[0]),
                                   reinterpret_cast<fftw_complex*>(ospec.data()),
                                   reinterpret_cast<fftw_complex*>(out.data()), FFTW_BACKWARD,
                                   FFTW_ESTIMATE);
  fftw_execute(bwd);
  fftw_destroy_plan(bwd);

  Volume res(target[0], target[1], target[2]);
  const double scale = 1.0 / double(ni);  // unnormalized FFT pair; keeps the mean fixed
  for (int64_t i = 0; i < no; ++i) res.v[size_t(i)] = float(out[size_t(i)].real() * scale);
  for (int i = 0; i < 3; ++i) {
    auto d = [&](const Volume& v, int a) { return a == 0 ? v.nx : a == 1 ? v.ny : v.nz; };
    res.spacing[size_t(i)] = in.spacing[size_t(i)] * double(d(in, i)) / double(target[size_t(i)]);
  }
  res.affine = in.affine;
  // spectral grids share the first sample position, so only density changes
  resample_detail::rescale_affine(res.affine, in.spacing, res.spacing, false);
  res.scale_min = in.scale_min;
  res.scale_max = in.scale_max;
  return res;
}

// Low-resolution acquisition model: spectral truncation by `factor` on every
// axis (output dims = ceil(dim / factor)), reported spacing = spacing * factor.
inline Volume simulate_lowres(const Volume& hr, int factor) {
  require(factor >= 1, "simulate_lowres: factor must be >= 1");
  std::array<int64_t, 3> dims = {(hr.nx + factor - 1) / factor, (hr.ny + factor - 1) / factor,
                                 (hr.nz + factor - 1) / factor};
  Volume lr = fourier_resample(hr, dims);
  const std::array<double, 3> fov_spacing = lr.spacing;
  for (int i = 0; i < 3; ++i) lr.spacing[size_t(i)] = hr.spacing[size_t(i)] * factor;
  resample_detail::rescale_affine(lr.affine, fov_spacing, lr.spacing, false);
  return lr;
}

inline Volume sinc_upsample(const Volume& lr, std::array<int64_t, 3> target) {
  for (int i = 0; i < 3; ++i)
    require(target[size_t(i)] >= (i == 0 ? lr.nx : i == 1 ? lr.ny : lr.nz),
            "sinc_upsample: target smaller than input");
  return fourier_resample(lr, target);
}

inline Volume trilinear_upsample(const Volume& in, std::array<int64_t, 3> target) {
  for (int i = 0; i < 3; ++i)
    require(target[size_t(i)] >= 1, "trilinear_upsample: target dims must be positive");
  Volume out(target[0], target[1], target[2]);

  // per-axis base cell index and fractional offset (may leave [0,1] at borders)
  auto prep = [](int64_t n_in, int64_t n_out) {
    std::vector<std::pair<int64_t, double>> m(static_cast<size_t>(n_out));
    for (int64_t o = 0; o < n_out; ++o) {
      const double c = (double(o) + 0.5) * double(n_in) / double(n_out) - 0.5;
      int64_t i0 = n_in > 1 ? std::clamp<int64_t>(int64_t(std::floor(c)), 0, n_in - 2) : 0;
      m[size_t(o)] = {i0, n_in > 1 ? c - double(i0) : 0.0};
    }
    return m;
  };
  const auto ax = prep(in.nx, target[0]);
  const auto ay = prep(in.ny, target[1]);
  const auto az = prep(in.nz, target[2]);

  for (int64_t z = 0; z < target[2]; ++z) {
    const auto [z0, tz] = az[size_t(z)];
    const int64_t z1 = std::min(z0 + 1, in.nz - 1);
    for (int64_t y = 0; y < target[1]; ++y) {
      const auto [y0, ty] = ay[size_t(y)];
      const int64_t y1 = std::min(y0 + 1, in.ny - 1);
      for (int64_t x = 0; x < target[0]; ++x) {
        const auto [x0, tx] = ax[size_t(x)];
        const int64_t x1 = std::min(x0 + 1, in.nx - 1);
        const double c00 = double(in.at(x0, y0, z0)) * (1 - tx) + double(in.at(x1, y0, z0)) * tx;
        const double c10 = double(in.at(x0, y1, z0)) * (1 - tx) + double(in.at(x1, y1, z0)) * tx;
        const double c01 = double(in.at(x0, y0, z1)) * (1 - tx) + double(in.at(x1, y0, z1)) * tx;
        const double c11 = double(in.at(x0, y1, z1)) * (1 - tx) + double(in.at(x1, y1, z1)) * tx;
        const double c0 = c00 * (1 - ty) + c10 * ty;
        const double c1 = c01 * (1 - ty) + c11 * ty;
        out.at(x, y, z) = float(c0 * (1 - tz) + c1 * tz);
      }
    }
  }

  for (int i = 0; i < 3; ++i) {
    auto d = [&](const Volume& v, int a) { return a == 0 ? v.nx : a == 1 ? v.ny : v.nz; };
    out.spacing[size_t(i)] = in.spacing[size_t(i)] * double(d(in, i)) / double(target[size_t(i)]);
  }
  out.affine = in.affine;
  resample_detail::rescale_affine(out.affine, in.spacing, out.spacing, true);
  out.scale_min = in.scale_min;
  out.scale_max = in.scale_max;
  return out;
}

}  // namespace sunet
