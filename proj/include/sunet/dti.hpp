#pragma once

// Diffusion tensor estimation and scalar maps.
//
// Per voxel the signal model  S_i = S0 * exp(-b_i g_i^T D g_i)  is fit by
// ordinary least squares on the log signal, giving seven coefficients
// (ln S0 and the six unique tensor entries).  The design pseudo-inverse is
// computed once per gradient table via SVD; a rank-deficient direction set
// is rejected up front.  Scalar maps use eigenvalues sorted descending with
// negative values clamped to zero (the raw tensor coefficients are reported
// unclamped).

#include <Eigen/Dense>

#include "metrics.hpp"
#include "volume.hpp"

namespace sunet {

// Maps are computed in double and kept at full precision alongside the
// float volumes used for file output, so numeric properties of the fit can
// be checked without float-storage rounding in the way.
struct DtiResult {
  Volume ad, fa, md;           // axial / fractional anisotropy / mean diffusivity
  std::array<Volume, 6> e;     // Dxx, Dxy, Dxz, Dyy, Dyz, Dzz
  std::vector<double> ad64, fa64, md64;
  std::array<std::vector<double>, 6> e64;
  double design_cond = 0.0;    // singular-value ratio of the design matrix
  int64_t clamped = 0;         // voxels with at least one negative eigenvalue
  int64_t skipped = 0;         // background voxels (S0 below threshold)
};

// Evenly spread unit directions (spherical Fibonacci lattice) for synthetic
// acquisition protocols.
inline std::vector<std::array<double, 3>> fibonacci_directions(int n) {
  if (n < 1) throw data_error("directions: need n >= 1");
  std::vector<std::array<double, 3>> g;
  const double golden = M_PI * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < n; ++i) {
    const double z = 1.0 - 2.0 * (double(i) + 0.5) / double(n);
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z)), phi = golden * double(i);
    double v[3] = {r * std::cos(phi), r * std::sin(phi), z};
    const double nn = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    g.push_back({v[0] / nn, v[1] / nn, v[2] / nn});
  }
  return g;
}

inline const std::array<const char*, 9>& dti_map_names() {
  static const std::array<const char*, 9> names = {"AD", "FA", "MD", "E1", "E2", "E3",
                                                   "E4", "E5", "E6"};
  return names;
}

inline const Volume& dti_map(const DtiResult& r, size_t idx) {
  switch (idx) {
    case 0: return r.ad;
    case 1: return r.fa;
    case 2: return r.md;
    default:
      require(idx < 9, "dti map index out of range");
      return r.e[idx - 3];
  }
}

inline DtiResult fit_dti(const DwiStudy& study) {
  study.validate();
  const size_t m = study.volumes.size();
  if (m < 7)
    throw data_error("dti: need at least 7 measurements for a 7-parameter fit, got " +
                     std::to_string(m));

  // design row: [1, -b gx^2, -2b gx gy, -2b gx gz, -b gy^2, -2b gy gz, -b gz^2]
  Eigen::MatrixXd X(Eigen::Index(m), 7);
  for (size_t i = 0; i < m; ++i) {
    const double bv = study.bvals[i];
    const double gx = bv > DwiStudy::kB0Threshold ? study.bvecs[i][0] : 0.0;
    const double gy = bv > DwiStudy::kB0Threshold ? study.bvecs[i][1] : 0.0;
    const double gz = bv > DwiStudy::kB0Threshold ? study.bvecs[i][2] : 0.0;
    const auto r = Eigen::Index(i);
    X(r, 0) = 1.0;
    X(r, 1) = -bv * gx * gx;
    X(r, 2) = -2.0 * bv * gx * gy;
    X(r, 3) = -2.0 * bv * gx * gz;
    X(r, 4) = -bv * gy * gy;
    X(r, 5) = -2.0 * bv * gy * gz;
    X(r, 6) = -bv * gz * gz;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(X, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  if (sv(6) <= sv(0) * 1e-12)
    throw data_error("dti: " + std::to_string(m) +
                     " gradient directions do not span the tensor space (rank-deficient design)");
  const Eigen::MatrixXd pinv =
      svd.matrixV() * sv.cwiseInverse().asDiagonal() * svd.matrixU().transpose();

  const Volume& g0 = study.volumes[0];
  auto blank = [&g0]() {
    Volume v(g0.nx, g0.ny, g0.nz);
    v.spacing = g0.spacing;
    v.affine = g0.affine;
    return v;
  };
  DtiResult res;
  res.ad = blank();
  res.fa = blank();
  res.md = blank();
  for (auto& e : res.e) e = blank();
  const size_t nvox = size_t(g0.size());
  res.ad64.assign(nvox, 0.0);
  res.fa64.assign(nvox, 0.0);
  res.md64.assign(nvox, 0.0);
  for (auto& e : res.e64) e.assign(nvox, 0.0);
  res.design_cond = sv(0) / sv(6);

  // mean b=0 image and its maximum, for the background mask
  std::vector<double> s0(size_t(g0.size()), 0.0);
  int nb0 = 0;
  for (size_t i = 0; i < m; ++i)
    if (study.bvals[i] <= DwiStudy::kB0Threshold) {
      ++nb0;
      for (size_t v = 0; v < s0.size(); ++v) s0[v] += double(study.volumes[i].v[v]);
    }
  double s0max = 0.0;
  for (auto& v : s0) {
    v /= nb0;
    s0max = std::max(s0max, v);
  }
  const double bg = 1e-6 * s0max;

  Eigen::VectorXd y(static_cast<Eigen::Index>(m));
  Eigen::VectorXd beta(7);
  for (int64_t vi = 0; vi < g0.size(); ++vi) {
    if (s0[size_t(vi)] <= bg) {
      ++res.skipped;
      continue;
    }
    for (size_t i = 0; i < m; ++i)
      y(Eigen::Index(i)) = std::log(std::max(double(study.volumes[i].v[size_t(vi)]), 1e-8));
    beta = pinv * y;
    for (int c = 0; c < 6; ++c) {
      res.e[size_t(c)].v[size_t(vi)] = float(beta(c + 1));
      res.e64[size_t(c)][size_t(vi)] = beta(c + 1);
    }

    Eigen::Matrix3d D;
    D << beta(1), beta(2), beta(3), beta(2), beta(4), beta(5), beta(3), beta(5), beta(6);
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(D);
    double l1 = es.eigenvalues()(2), l2 = es.eigenvalues()(1), l3 = es.eigenvalues()(0);
    if (l3 < 0.0 || l2 < 0.0 || l1 < 0.0) ++res.clamped;
    l1 = std::max(l1, 0.0);
    l2 = std::max(l2, 0.0);
    l3 = std::max(l3, 0.0);
    const double md = (l1 + l2 + l3) / 3.0;
    const double nrm2 = l1 * l1 + l2 * l2 + l3 * l3;
    const double dev2 = (l1 - md) * (l1 - md) + (l2 - md) * (l2 - md) + (l3 - md) * (l3 - md);
    const double fa = nrm2 > 0.0 ? std::sqrt(1.5 * dev2 / nrm2) : 0.0;
    res.ad64[size_t(vi)] = l1;
    res.md64[size_t(vi)] = md;
    res.fa64[size_t(vi)] = fa;
    res.ad.v[size_t(vi)] = float(l1);
    res.md.v[size_t(vi)] = float(md);
    res.fa.v[size_t(vi)] = float(fa);
  }
  return res;
}

// per-map similarity between two fits of the same grid
struct MapComparison {
  std::string name;
  double rmse = 0.0;
  double uqi = 0.0;
};

inline std::vector<MapComparison> compare_derived(const DtiResult& ref, const DtiResult& other) {
  std::vector<MapComparison> rows;
  for (size_t i = 0; i < dti_map_names().size(); ++i)
    rows.push_back({dti_map_names()[i], rmse(dti_map(ref, i), dti_map(other, i)),
                    uqi(dti_map(ref, i), dti_map(other, i))});
  return rows;
}

}  // namespace sunet
