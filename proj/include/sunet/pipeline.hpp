#pragma once

// Dataset plumbing: random patch extraction with edge-replicate padding,
// overlap-average patch aggregation, the plain-text subject split manifest,
// a synthetic phantom generator for desk-scale runs, and FSL-style
// bval / bvec files.

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>

#include "volume.hpp"

namespace sunet {

// ---- padding / patches --------------------------------------------------------

// Replicates the last sample along each axis until dims reach at least `mins`.
inline Volume pad_replicate(const Volume& in, std::array<int64_t, 3> mins) {
  const std::array<int64_t, 3> od = {std::max(in.nx, mins[0]), std::max(in.ny, mins[1]),
                                     std::max(in.nz, mins[2])};
  if (od[0] == in.nx && od[1] == in.ny && od[2] == in.nz) return in;
  Volume out(od[0], od[1], od[2]);
  out.spacing = in.spacing;
  out.affine = in.affine;
  out.scale_min = in.scale_min;
  out.scale_max = in.scale_max;
  for (int64_t z = 0; z < od[2]; ++z)
    for (int64_t y = 0; y < od[1]; ++y)
      for (int64_t x = 0; x < od[0]; ++x)
        out.at(x, y, z) =
            in.at(std::min(x, in.nx - 1), std::min(y, in.ny - 1), std::min(z, in.nz - 1));
  return out;
}

// Uniform random patch origins over every valid position (inclusive ranges).
inline std::vector<std::array<int64_t, 3>> sample_patch_origins(std::array<int64_t, 3> dims,
                                                                std::array<int64_t, 3> patch,
                                                                int count, std::mt19937& rng) {
  for (int i = 0; i < 3; ++i)
    require(dims[size_t(i)] >= patch[size_t(i)], "patch larger than (padded) volume");
  std::uniform_int_distribution<int64_t> dx(0, dims[0] - patch[0]);
  std::uniform_int_distribution<int64_t> dy(0, dims[1] - patch[1]);
  std::uniform_int_distribution<int64_t> dz(0, dims[2] - patch[2]);
  std::vector<std::array<int64_t, 3>> origins(static_cast<size_t>(count));
  for (auto& o : origins) o = {dx(rng), dy(rng), dz(rng)};
  return origins;
}

inline Volume extract_patch(const Volume& vol, std::array<int64_t, 3> origin,
                            std::array<int64_t, 3> size) {
  require(origin[0] >= 0 && origin[1] >= 0 && origin[2] >= 0 &&
              origin[0] + size[0] <= vol.nx && origin[1] + size[1] <= vol.ny &&
              origin[2] + size[2] <= vol.nz,
          "patch out of bounds");
  Volume p(size[0], size[1], size[2]);
  p.spacing = vol.spacing;
  p.affine = vol.affine;
  p.scale_min = vol.scale_min;
  p.scale_max = vol.scale_max;
  for (int64_t z = 0; z < size[2]; ++z)
    for (int64_t y = 0; y < size[1]; ++y)
      for (int64_t x = 0; x < size[0]; ++x)
        p.at(x, y, z) = vol.at(origin[0] + x, origin[1] + y, origin[2] + z);
  return p;
}

// Convenience wrapper: pad if needed, then draw `count` seeded patches.
inline std::vector<Volume> extract_random_patches(const Volume& vol, std::array<int64_t, 3> size,
                                                  int count, uint64_t seed) {
  const Volume padded = pad_replicate(vol, size);
  std::mt19937 rng(uint32_t(seed ^ (seed >> 32)));
  const auto origins =
      sample_patch_origins({padded.nx, padded.ny, padded.nz}, size, count, rng);
  std::vector<Volume> out;
  out.reserve(size_t(count));
  for (const auto& o : origins) out.push_back(extract_patch(padded, o, size));
  return out;
}

// Overlap-average reassembly.  Every voxel of the target must be covered by
// at least one patch; with an exact non-overlapping tiling this is lossless.
inline Volume aggregate_patches(const std::vector<std::array<int64_t, 3>>& origins,
                                const std::vector<Volume>& patches,
                                std::array<int64_t, 3> dims) {
  require(origins.size() == patches.size(), "aggregate: origin/patch count mismatch");
  require(!patches.empty(), "aggregate: no patches");
  Volume out(dims[0], dims[1], dims[2]);
  out.spacing = patches[0].spacing;
  out.affine = patches[0].affine;
  out.scale_min = patches[0].scale_min;
  out.scale_max = patches[0].scale_max;
  std::vector<double> acc(size_t(out.size()), 0.0);
  std::vector<int32_t> cnt(size_t(out.size()), 0);
  for (size_t p = 0; p < patches.size(); ++p) {
    const Volume& pv = patches[p];
    const auto& o = origins[p];
    require(o[0] >= 0 && o[1] >= 0 && o[2] >= 0 && o[0] + pv.nx <= dims[0] &&
                o[1] + pv.ny <= dims[1] && o[2] + pv.nz <= dims[2],
            "aggregate: patch outside target extent");
    for (int64_t z = 0; z < pv.nz; ++z)
      for (int64_t y = 0; y < pv.ny; ++y)
        for (int64_t x = 0; x < pv.nx; ++x) {
          const size_t i = size_t(((o[2] + z) * dims[1] + (o[1] + y)) * dims[0] + (o[0] + x));
          acc[i] += double(pv.at(x, y, z));
          ++cnt[i];
        }
  }
  int64_t gaps = 0, gx = -1, gy = -1, gz = -1;
  for (size_t i = 0; i < acc.size(); ++i) {
    if (cnt[i] == 0) {
      if (gaps++ == 0) {
        gx = int64_t(i) % dims[0];
        gy = (int64_t(i) / dims[0]) % dims[1];
        gz = int64_t(i) / (dims[0] * dims[1]);
      }
      continue;
    }
    out.v[i] = float(acc[i] / cnt[i]);
  }
  if (gaps > 0)
    throw data_error("aggregate: " + std::to_string(gaps) + " voxels uncovered, first at (" +
                     std::to_string(gx) + ", " + std::to_string(gy) + ", " + std::to_string(gz) +
                     ")");
  return out;
}

// ---- split manifest -----------------------------------------------------------

struct SplitManifest {
  uint64_t seed = 0;
  std::vector<std::string> train, validation, test;
};

// Shuffle once with the given seed, then deal the requested counts in order.
inline SplitManifest split_subjects(std::vector<std::string> ids, size_t n_train, size_t n_val,
                                    size_t n_test, uint64_t seed) {
  if (n_train + n_val + n_test != ids.size())
    throw data_error("split: " + std::to_string(n_train) + "+" + std::to_string(n_val) + "+" +
                     std::to_string(n_test) + " != " + std::to_string(ids.size()) + " subjects");
  if (n_train == 0 || n_val == 0 || n_test == 0)
    throw data_error("split: every section needs at least one subject");
  std::sort(ids.begin(), ids.end());  // independent of directory enumeration order
  std::mt19937 rng(uint32_t(seed ^ (seed >> 32)));
  std::shuffle(ids.begin(), ids.end(), rng);
  SplitManifest m;
  m.seed = seed;
  m.train.assign(ids.begin(), ids.begin() + ptrdiff_t(n_train));
  m.validation.assign(ids.begin() + ptrdiff_t(n_train), ids.begin() + ptrdiff_t(n_train + n_val));
  m.test.assign(ids.begin() + ptrdiff_t(n_train + n_val), ids.end());
  return m;
}

// Roughly 300/50/49 proportions, every section non-empty.
inline std::array<size_t, 3> default_split_counts(size_t n) {
  if (n < 3) throw data_error("split: need at least 3 subjects, got " + std::to_string(n));
  size_t n_test = std::max<size_t>(1, size_t(std::llround(double(n) * 49.0 / 399.0)));
  size_t n_val = std::max<size_t>(1, size_t(std::llround(double(n) * 50.0 / 399.0)));
  if (n_test + n_val >= n) {
    n_test = 1;
    n_val = 1;
  }
  return {n - n_val - n_test, n_val, n_test};
}

inline void write_manifest(const std::string& path, const SplitManifest& m) {
  std::ofstream f(path);
  if (!f) throw data_error("manifest: cannot create " + path);
  f << "# subject split, seed=" << m.seed << "\n";
  auto section = [&f](const char* name, const std::vector<std::string>& ids) {
    f << "[" << name << "]\n";
    for (const auto& id : ids) f << id << "\n";
  };
  section("train", m.train);
  section("validation", m.validation);
  section("test", m.test);
  if (!f) throw data_error("manifest: write failed for " + path);
}

inline SplitManifest read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw data_error("manifest: cannot open " + path);
  SplitManifest m;
  std::vector<std::string>* cur = nullptr;
  std::string line;
  while (std::getline(f, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto p = line.find("seed=");
      if (p != std::string::npos) m.seed = std::stoull(line.substr(p + 5));
      continue;
    }
    if (line == "[train]")
      cur = &m.train;
    else if (line == "[validation]")
      cur = &m.validation;
    else if (line == "[test]")
      cur = &m.test;
    else if (line[0] == '[')
      throw data_error("manifest: unknown section " + line + " in " + path);
    else if (cur)
      cur->push_back(line);
    else
      throw data_error("manifest: entry before any section in " + path);
  }
  if (m.train.empty() || m.validation.empty() || m.test.empty())
    throw data_error("manifest: empty section in " + path);
  return m;
}

// ---- synthetic phantoms -------------------------------------------------------

// Smooth random blobs over a gentle background gradient, plus a couple of
// soft-edged slabs so the image has genuine edges.  Values land in [0,1].
inline Volume make_phantom(int64_t n, uint64_t seed) {
  require(n >= 8, "phantom: dim too small");
  Volume vol(n, n, n);
  vol.spacing = {1.0, 1.0, 1.0};
  vol.set_affine_from_spacing();
  std::mt19937 rng(uint32_t(seed ^ (seed >> 32)));
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  struct Blob {
    double cx, cy, cz, inv2s2, amp;
  };
  std::vector<Blob> blobs;
  const int nb = 6 + int(u01(rng) * 4);
  for (int b = 0; b < nb; ++b) {
    const double s = (0.06 + 0.12 * u01(rng)) * double(n);
    blobs.push_back({(0.15 + 0.7 * u01(rng)) * double(n), (0.15 + 0.7 * u01(rng)) * double(n),
                     (0.15 + 0.7 * u01(rng)) * double(n), 1.0 / (2.0 * s * s),
                     0.3 + 0.7 * u01(rng)});
  }
  struct Slab {
    int axis;
    double pos, width, amp;
  };
  std::vector<Slab> slabs;
  for (int s = 0; s < 2; ++s)
    slabs.push_back({int(u01(rng) * 3.0), (0.25 + 0.5 * u01(rng)) * double(n),
                     (0.08 + 0.08 * u01(rng)) * double(n), 0.25 + 0.35 * u01(rng)});
  const double gx = u01(rng) - 0.5, gy = u01(rng) - 0.5, gz = u01(rng) - 0.5;

  auto soft_edge = [](double d) { return 1.0 / (1.0 + std::exp(-d)); };  // ~1 voxel transition
  for (int64_t z = 0; z < n; ++z)
    for (int64_t y = 0; y < n; ++y)
      for (int64_t x = 0; x < n; ++x) {
        double val = 0.15 + 0.1 * (gx * x + gy * y + gz * z) / double(n);
        for (const auto& b : blobs) {
          const double dx = double(x) - b.cx, dy = double(y) - b.cy, dz = double(z) - b.cz;
          val += b.amp * std::exp(-(dx * dx + dy * dy + dz * dz) * b.inv2s2);
        }
        for (const auto& s : slabs) {
          const double c = s.axis == 0 ? double(x) : s.axis == 1 ? double(y) : double(z);
          val += s.amp * soft_edge(c - (s.pos - s.width / 2)) * soft_edge((s.pos + s.width / 2) - c);
        }
        vol.at(x, y, z) = float(val);
      }

  float mn = vol.v[0], mx = vol.v[0];
  for (float f : vol.v) {
    mn = std::min(mn, f);
    mx = std::max(mx, f);
  }
  const float inv = mx > mn ? 1.f / (mx - mn) : 1.f;
  for (auto& f : vol.v) f = (f - mn) * inv;
  return vol;
}

// ---- FSL gradient tables ------------------------------------------------------

namespace pipeline_detail {

inline std::vector<std::vector<double>> read_rows(const std::string& path, size_t want_rows) {
  std::ifstream f(path);
  if (!f) throw data_error("gradient table: cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(f, line)) {
    std::istringstream ss(line);
    std::vector<double> row;
    double x;
    while (ss >> x) row.push_back(x);
    if (!ss.eof()) throw data_error("gradient table: bad number in " + path);
    if (!row.empty()) rows.push_back(std::move(row));
  }
  if (rows.size() != want_rows)
    throw data_error("gradient table: expected " + std::to_string(want_rows) + " rows in " + path +
                     ", got " + std::to_string(rows.size()));
  return rows;
}

inline void write_row(std::ostream& os, const std::vector<double>& row) {
  os.precision(17);
  for (size_t i = 0; i < row.size(); ++i) os << (i ? " " : "") << row[i];
  os << "\n";
}

}  // namespace pipeline_detail

// b-values: a single whitespace-separated row
inline std::vector<double> read_bvals(const std::string& path) {
  return pipeline_detail::read_rows(path, 1)[0];
}

// b-vectors: three rows (x, y, z components), one column per volume
inline std::vector<std::array<double, 3>> read_bvecs(const std::string& path) {
  const auto rows = pipeline_detail::read_rows(path, 3);
  if (rows[0].size() != rows[1].size() || rows[0].size() != rows[2].size())
    throw data_error("gradient table: ragged bvec rows in " + path);
  std::vector<std::array<double, 3>> out(rows[0].size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = {rows[0][i], rows[1][i], rows[2][i]};
  return out;
}

inline void write_bvals(const std::string& path, const std::vector<double>& bvals) {
  std::ofstream f(path);
  if (!f) throw data_error("gradient table: cannot create " + path);
  pipeline_detail::write_row(f, bvals);
}

inline void write_bvecs(const std::string& path, const std::vector<std::array<double, 3>>& bvecs) {
  std::ofstream f(path);
  if (!f) throw data_error("gradient table: cannot create " + path);
  for (int c = 0; c < 3; ++c) {
    std::vector<double> row(bvecs.size());
    for (size_t i = 0; i < bvecs.size(); ++i) row[i] = bvecs[i][size_t(c)];
    pipeline_detail::write_row(f, row);
  }
}

}  // namespace sunet
