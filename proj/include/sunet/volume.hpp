#pragma once

// Volume: one 3-D scalar grid with voxel spacing, a 4x4 spatial affine and
// the recorded intensity normalization.  Storage order matches NIfTI: x
// fastest, then y, then z.  A volume maps onto the network tensor layout
// (n,c,H,W,D) as H=z, W=y, D=x, which makes the conversion a straight copy.
//
// DwiStudy: an ordered stack of volumes with the matching gradient table.

#include <array>
#include <cmath>

#include "core.hpp"

namespace sunet {

struct Volume {
  int64_t nx = 0, ny = 0, nz = 0;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};       // mm
  std::array<double, 16> affine{1, 0, 0, 0,           // row-major 4x4
                                0, 1, 0, 0,
                                0, 0, 1, 0,
                                0, 0, 0, 1};
  // recorded normalization: stored = (raw - scale_min) / (scale_max - scale_min)
  double scale_min = 0.0, scale_max = 1.0;
  std::vector<float> v;

  Volume() = default;
  Volume(int64_t x, int64_t y, int64_t z) : nx(x), ny(y), nz(z), v(size_t(x * y * z), 0.f) {
    if (x < 1 || y < 1 || z < 1) throw shape_error("volume: dims must be positive");
  }

  int64_t size() const { return nx * ny * nz; }
  float& at(int64_t x, int64_t y, int64_t z) { return v[size_t((z * ny + y) * nx + x)]; }
  float at(int64_t x, int64_t y, int64_t z) const { return v[size_t((z * ny + y) * nx + x)]; }

  // grid metadata equal (dims, spacing within tolerance)
  bool same_grid(const Volume& o) const {
    if (nx != o.nx || ny != o.ny || nz != o.nz) return false;
    for (int i = 0; i < 3; ++i)
      if (std::abs(spacing[size_t(i)] - o.spacing[size_t(i)]) > 1e-6) return false;
    return true;
  }

  void set_affine_from_spacing() {
    affine = {spacing[0], 0, 0, 0, 0, spacing[1], 0, 0, 0, 0, spacing[2], 0, 0, 0, 0, 1};
  }
};

inline Tensor5<float> volume_to_tensor(const Volume& vol) {
  Tensor5<float> t(1, 1, vol.nz, vol.ny, vol.nx);
  std::copy(vol.v.begin(), vol.v.end(), t.data());
  return t;
}

// Copies grid metadata (spacing, affine, recorded scale) from `like`.
inline Volume tensor_to_volume(const Tensor5<float>& t, const Volume& like) {
  const Shape5 s = t.shape();
  require(s.n == 1 && s.c == 1, "tensor_to_volume expects (1,1,H,W,D)");
  Volume out(s.D, s.W, s.H);
  out.spacing = like.spacing;
  out.affine = like.affine;
  out.scale_min = like.scale_min;
  out.scale_max = like.scale_max;
  std::copy(t.data(), t.data() + t.size(), out.v.begin());
  return out;
}

// Min-max normalization to [0,1], parameters recorded on the result so the
// inverse is exact.  A constant volume maps to all-zero with the identity
// range (min, min+1), so denormalize still restores the constant.
inline Volume normalize(const Volume& in) {
  Volume out = in;
  float mn = in.v.empty() ? 0.f : in.v[0], mx = mn;
  for (float x : in.v) {
    mn = std::min(mn, x);
    mx = std::max(mx, x);
  }
  out.scale_min = double(mn);
  out.scale_max = mx > mn ? double(mx) : double(mn) + 1.0;
  const float lo = mn, inv = float(1.0 / (out.scale_max - out.scale_min));
  for (auto& x : out.v) x = (x - lo) * inv;
  return out;
}

inline Volume denormalize(const Volume& in) {
  Volume out = in;
  const float lo = float(in.scale_min), sc = float(in.scale_max - in.scale_min);
  for (auto& x : out.v) x = x * sc + lo;
  out.scale_min = 0.0;
  out.scale_max = 1.0;
  return out;
}

// ---- diffusion study ----------------------------------------------------------

struct DwiStudy {
  std::vector<Volume> volumes;                 // one per table row
  std::vector<double> bvals;                   // s/mm^2
  std::vector<std::array<double, 3>> bvecs;    // unit direction per non-zero b

  static constexpr double kB0Threshold = 50.0;  // s/mm^2

  void validate() const {
    if (volumes.size() != bvals.size() || volumes.size() != bvecs.size())
      throw data_error("dwi study: " + std::to_string(volumes.size()) + " volumes vs " +
                       std::to_string(bvals.size()) + " bvals / " + std::to_string(bvecs.size()) +
                       " bvecs");
    if (volumes.empty()) throw data_error("dwi study: empty");
    bool any_b0 = false;
    for (size_t i = 0; i < bvals.size(); ++i) {
      if (bvals[i] <= kB0Threshold) {
        any_b0 = true;
        continue;
      }
      const auto& g = bvecs[i];
      const double n = std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
      if (std::abs(n - 1.0) > 1e-3)
        throw data_error("dwi study: bvec " + std::to_string(i) + " norm " + std::to_string(n) +
                         " not unit");
    }
    if (!any_b0) throw data_error("dwi study: no b=0 volume");
    for (size_t i = 1; i < volumes.size(); ++i)
      if (!volumes[i].same_grid(volumes[0]))
        throw data_error("dwi study: volume " + std::to_string(i) + " grid mismatch");
  }
};

}  // namespace sunet
