#pragma once

// Minimal NIfTI-1 I/O: 3-D and 4-D images, scalar dtypes uint8 / int16 /
// int32 / float32 / float64 (always converted to float32 on load, with
// scl_slope / scl_inter applied), sform or qform orientation, and
// transparent gzip handling through zlib (gzread also accepts plain files,
// writers pick gzip when the name ends in .gz).  Files are written as
// float32 with an sform.

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <string>

#include "volume.hpp"

namespace sunet {

#pragma pack(push, 1)
struct NiftiHeader {
  int32_t sizeof_hdr;     // must be 348
  char data_type[10];
  char db_name[18];
  int32_t extents;
  int16_t session_error;
  char regular;
  char dim_info;
  int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  int16_t intent_code;
  int16_t datatype;
  int16_t bitpix;
  int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration;
  float toffset;
  int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  int16_t qform_code;
  int16_t sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4];
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(NiftiHeader) == 348, "NIfTI-1 header must be 348 bytes");

namespace nifti_detail {

constexpr int16_t kDtUint8 = 2, kDtInt16 = 4, kDtInt32 = 8, kDtFloat32 = 16, kDtFloat64 = 64;

inline void bswap(int16_t& x) { x = int16_t(((uint16_t(x) & 0xff) << 8) | (uint16_t(x) >> 8)); }
inline void bswap(int32_t& x) {
  uint32_t u;
  std::memcpy(&u, &x, 4);
  u = (u >> 24) | ((u >> 8) & 0xff00u) | ((u << 8) & 0xff0000u) | (u << 24);
  std::memcpy(&x, &u, 4);
}
inline void bswap(float& x) {
  int32_t i;
  std::memcpy(&i, &x, 4);
  bswap(i);
  std::memcpy(&x, &i, 4);
}

inline void swap_header(NiftiHeader& h) {
  bswap(h.sizeof_hdr);
  bswap(h.extents);
  bswap(h.session_error);
  for (auto& d : h.dim) bswap(d);
  bswap(h.intent_p1);
  bswap(h.intent_p2);
  bswap(h.intent_p3);
  bswap(h.intent_code);
  bswap(h.datatype);
  bswap(h.bitpix);
  bswap(h.slice_start);
  for (auto& p : h.pixdim) bswap(p);
  bswap(h.vox_offset);
  bswap(h.scl_slope);
  bswap(h.scl_inter);
  bswap(h.slice_end);
  bswap(h.cal_max);
  bswap(h.cal_min);
  bswap(h.slice_duration);
  bswap(h.toffset);
  bswap(h.glmax);
  bswap(h.glmin);
  bswap(h.qform_code);
  bswap(h.sform_code);
  bswap(h.quatern_b);
  bswap(h.quatern_c);
  bswap(h.quatern_d);
  bswap(h.qoffset_x);
  bswap(h.qoffset_y);
  bswap(h.qoffset_z);
  for (auto& s : h.srow_x) bswap(s);
  for (auto& s : h.srow_y) bswap(s);
  for (auto& s : h.srow_z) bswap(s);
}

// quaternion form (qform) to row-major 4x4
inline std::array<double, 16> qform_affine(const NiftiHeader& h) {
  const double b = h.quatern_b, c = h.quatern_c, d = h.quatern_d;
  double a2 = 1.0 - (b * b + c * c + d * d);
  const double a = a2 > 0 ? std::sqrt(a2) : 0.0;
  const double qfac = h.pixdim[0] < 0 ? -1.0 : 1.0;
  const double sx = h.pixdim[1], sy = h.pixdim[2], sz = h.pixdim[3] * qfac;
  std::array<double, 16> m{};
  m[0] = (a * a + b * b - c * c - d * d) * sx;
  m[1] = (2 * b * c - 2 * a * d) * sy;
  m[2] = (2 * b * d + 2 * a * c) * sz;
  m[3] = h.qoffset_x;
  m[4] = (2 * b * c + 2 * a * d) * sx;
  m[5] = (a * a + c * c - b * b - d * d) * sy;
  m[6] = (2 * c * d - 2 * a * b) * sz;
  m[7] = h.qoffset_y;
  m[8] = (2 * b * d - 2 * a * c) * sx;
  m[9] = (2 * c * d + 2 * a * b) * sy;
  m[10] = (a * a + d * d - c * c - b * b) * sz;
  m[11] = h.qoffset_z;
  m[15] = 1.0;
  return m;
}

struct GzFile {
  gzFile f = nullptr;
  explicit GzFile(const std::string& path, const char* mode) : f(gzopen(path.c_str(), mode)) {}
  ~GzFile() {
    if (f) gzclose(f);
  }
  GzFile(const GzFile&) = delete;
  GzFile& operator=(const GzFile&) = delete;
};

inline void read_exact(gzFile f, void* dst, size_t bytes, const std::string& path) {
  size_t got = 0;
  auto* p = static_cast<char*>(dst);
  while (got < bytes) {
    const unsigned chunk = unsigned(std::min<size_t>(bytes - got, 1u << 28));
    const int r = gzread(f, p + got, chunk);
    if (r <= 0) throw data_error("nifti: short read in " + path);
    got += size_t(r);
  }
}

inline void write_exact(gzFile f, const void* src, size_t bytes, const std::string& path) {
  size_t put = 0;
  const auto* p = static_cast<const char*>(src);
  while (put < bytes) {
    const unsigned chunk = unsigned(std::min<size_t>(bytes - put, 1u << 28));
    const int r = gzwrite(f, p + put, chunk);
    if (r <= 0) throw data_error("nifti: write failed for " + path);
    put += size_t(r);
  }
}

template <typename S>
void convert_to_float(const std::vector<char>& raw, bool swapped, std::vector<float>& out) {
  const size_t n = raw.size() / sizeof(S);
  out.resize(n);
  const auto* src = reinterpret_cast<const S*>(raw.data());
  for (size_t i = 0; i < n; ++i) {
    S s = src[i];
    if (swapped && sizeof(S) > 1) {
      char* b = reinterpret_cast<char*>(&s);
      for (size_t j = 0; j < sizeof(S) / 2; ++j) std::swap(b[j], b[sizeof(S) - 1 - j]);
    }
    out[i] = float(s);
  }
}

}  // namespace nifti_detail

// In-memory image: dims[0..3] = (nx,ny,nz,nt); nt==1 for plain 3-D volumes.
struct NiftiImage {
  std::array<int64_t, 4> dim{0, 0, 0, 1};
  std::array<double, 3> spacing{1, 1, 1};
  std::array<double, 16> affine{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
  std::vector<float> data;  // x fastest, then y, z, t

  int64_t volume_elems() const { return dim[0] * dim[1] * dim[2]; }

  Volume volume(int64_t t = 0) const {
    if (t < 0 || t >= dim[3]) throw shape_error("nifti: volume index out of range");
    Volume v(dim[0], dim[1], dim[2]);
    v.spacing = spacing;
    v.affine = affine;
    const auto* src = data.data() + t * volume_elems();
    std::copy(src, src + volume_elems(), v.v.begin());
    return v;
  }
};

inline NiftiImage read_nifti(const std::string& path) {
  using namespace nifti_detail;
  GzFile gz(path, "rb");
  if (!gz.f) throw data_error("nifti: cannot open " + path);

  NiftiHeader h{};
  read_exact(gz.f, &h, sizeof(h), path);
  bool swapped = false;
  if (h.sizeof_hdr != 348) {
    swap_header(h);
    swapped = true;
    if (h.sizeof_hdr != 348) throw data_error("nifti: bad header size in " + path);
  }
  if (std::strncmp(h.magic, "n+1", 3) != 0 && std::strncmp(h.magic, "ni1", 3) != 0)
    throw data_error("nifti: bad magic in " + path);
  if (std::strncmp(h.magic, "ni1", 3) == 0)
    throw data_error("nifti: two-file (.hdr/.img) form not supported: " + path);
  if (h.dim[0] < 3 || h.dim[0] > 4)
    throw data_error("nifti: only 3-D/4-D images supported, got dim[0]=" +
                     std::to_string(h.dim[0]) + " in " + path);

  NiftiImage img;
  for (int i = 0; i < 3; ++i) {
    img.dim[size_t(i)] = h.dim[i + 1];
    img.spacing[size_t(i)] = double(h.pixdim[i + 1]);
    if (img.dim[size_t(i)] < 1) throw data_error("nifti: non-positive dim in " + path);
  }
  img.dim[3] = h.dim[0] == 4 ? std::max<int64_t>(1, h.dim[4]) : 1;

  if (h.sform_code > 0) {
    for (int j = 0; j < 4; ++j) {
      img.affine[size_t(j)] = double(h.srow_x[j]);
      img.affine[size_t(4 + j)] = double(h.srow_y[j]);
      img.affine[size_t(8 + j)] = double(h.srow_z[j]);
    }
    img.affine[12] = img.affine[13] = img.affine[14] = 0.0;
    img.affine[15] = 1.0;
  } else if (h.qform_code > 0) {
    img.affine = qform_affine(h);
  } else {
    img.affine = {img.spacing[0], 0, 0, 0, 0, img.spacing[1], 0, 0, 0, 0, img.spacing[2], 0,
                  0, 0, 0, 1};
  }

  int elem = 0;
  switch (h.datatype) {
    case kDtUint8: elem = 1; break;
    case kDtInt16: elem = 2; break;
    case kDtInt32: elem = 4; break;
    case kDtFloat32: elem = 4; break;
    case kDtFloat64: elem = 8; break;
    default:
      throw data_error("nifti: unsupported datatype " + std::to_string(h.datatype) + " in " + path);
  }

  const int64_t offset = int64_t(h.vox_offset);
  if (offset < 348) throw data_error("nifti: bad vox_offset in " + path);
  {  // skip extensions between header and data
    int64_t skip = offset - 348;
    std::vector<char> pad(4096);
    while (skip > 0) {
      const int r = gzread(gz.f, pad.data(), unsigned(std::min<int64_t>(skip, 4096)));
      if (r <= 0) throw data_error("nifti: short read in " + path);
      skip -= r;
    }
  }

  const int64_t n = img.dim[0] * img.dim[1] * img.dim[2] * img.dim[3];
  std::vector<char> raw(size_t(n) * size_t(elem));
  read_exact(gz.f, raw.data(), raw.size(), path);

  switch (h.datatype) {
    case kDtUint8: convert_to_float<uint8_t>(raw, swapped, img.data); break;
    case kDtInt16: convert_to_float<int16_t>(raw, swapped, img.data); break;
    case kDtInt32: convert_to_float<int32_t>(raw, swapped, img.data); break;
    case kDtFloat32: convert_to_float<float>(raw, swapped, img.data); break;
    case kDtFloat64: convert_to_float<double>(raw, swapped, img.data); break;
    default: break;
  }

  const float slope = h.scl_slope, inter = h.scl_inter;
  if (slope != 0.f && (slope != 1.f || inter != 0.f))
    for (auto& x : img.data) x = x * slope + inter;

  for (const float x : img.data)
    if (!std::isfinite(x)) throw data_error("nifti: non-finite voxel in " + path);
  return img;
}

inline void write_nifti(const std::string& path, const NiftiImage& img) {
  using namespace nifti_detail;
  const int64_t n = img.dim[0] * img.dim[1] * img.dim[2] * img.dim[3];
  require(int64_t(img.data.size()) == n, "nifti: data size does not match dims");

  NiftiHeader h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = img.dim[3] > 1 ? 4 : 3;
  h.dim[1] = int16_t(img.dim[0]);
  h.dim[2] = int16_t(img.dim[1]);
  h.dim[3] = int16_t(img.dim[2]);
  h.dim[4] = int16_t(std::max<int64_t>(1, img.dim[3]));
  for (int i = int(h.dim[0]) + 1; i < 8; ++i) h.dim[i] = 1;
  h.datatype = kDtFloat32;
  h.bitpix = 32;
  h.pixdim[0] = 1.f;
  for (int i = 0; i < 3; ++i) h.pixdim[i + 1] = float(img.spacing[size_t(i)]);
  h.pixdim[4] = 1.f;
  h.vox_offset = 352.f;
  h.scl_slope = 1.f;
  h.scl_inter = 0.f;
  h.xyzt_units = 2;  // millimetres
  h.sform_code = 1;
  h.qform_code = 0;
  for (int j = 0; j < 4; ++j) {
    h.srow_x[j] = float(img.affine[size_t(j)]);
    h.srow_y[j] = float(img.affine[size_t(4 + j)]);
    h.srow_z[j] = float(img.affine[size_t(8 + j)]);
  }
  std::memcpy(h.magic, "n+1", 4);

  const bool gzip = path.size() > 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
  GzFile gz(path, gzip ? "wb" : "wbT");  // T = transparent (no compression)
  if (!gz.f) throw data_error("nifti: cannot create " + path);
  write_exact(gz.f, &h, sizeof(h), path);
  const char ext[4] = {0, 0, 0, 0};
  write_exact(gz.f, ext, 4, path);
  write_exact(gz.f, img.data.data(), img.data.size() * sizeof(float), path);
}

inline Volume read_volume(const std::string& path) {
  const NiftiImage img = read_nifti(path);
  if (img.dim[3] != 1)
    throw data_error("nifti: expected a 3-D volume, got " + std::to_string(img.dim[3]) +
                     " frames in " + path);
  return img.volume(0);
}

inline void write_volume(const std::string& path, const Volume& vol) {
  NiftiImage img;
  img.dim = {vol.nx, vol.ny, vol.nz, 1};
  img.spacing = vol.spacing;
  img.affine = vol.affine;
  img.data = vol.v;
  write_nifti(path, img);
}

// stack of same-grid volumes -> one 4-D file
inline void write_nifti4d(const std::string& path, const std::vector<Volume>& vols) {
  require(!vols.empty(), "nifti: empty 4-D stack");
  NiftiImage img;
  img.dim = {vols[0].nx, vols[0].ny, vols[0].nz, int64_t(vols.size())};
  img.spacing = vols[0].spacing;
  img.affine = vols[0].affine;
  img.data.reserve(size_t(img.volume_elems()) * vols.size());
  for (const auto& v : vols) {
    if (!v.same_grid(vols[0])) throw data_error("nifti: 4-D stack grids differ");
    img.data.insert(img.data.end(), v.v.begin(), v.v.end());
  }
  write_nifti(path, img);
}

}  // namespace sunet
