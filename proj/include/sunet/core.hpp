#pragma once

// Core tensor container and error taxonomy shared by every module.
//
// Tensor5 is a dense rank-5 array (batch, channel, H, W, D) in row-major
// order with D fastest.  All network computation runs on Tensor5; 3-D
// volumes are carried as (1,1,H,W,D) views where convenient.

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace sunet {

// Raised when tensor/volume shapes violate an operation's contract.
struct shape_error : std::runtime_error {
  explicit shape_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised on malformed or inconsistent input data (files, tables, manifests).
struct data_error : std::runtime_error {
  explicit data_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised on numerical failure (non-finite loss, singular fit, ...).
struct numeric_error : std::runtime_error {
  explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct Shape5 {
  int64_t n = 0, c = 0, H = 0, W = 0, D = 0;

  int64_t elems() const { return n * c * H * W * D; }
  int64_t spatial() const { return H * W * D; }
  bool operator==(const Shape5&) const = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(H) + "," +
           std::to_string(W) + "," + std::to_string(D) + ")";
  }
};

template <class T>
class Tensor5 {
 public:
  Tensor5() = default;
  explicit Tensor5(Shape5 s) : shape_(s), data_(check_size(s)) {}
  Tensor5(int64_t n, int64_t c, int64_t H, int64_t W, int64_t D) : Tensor5(Shape5{n, c, H, W, D}) {}

  const Shape5& shape() const { return shape_; }
  int64_t size() const { return int64_t(data_.size()); }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& at(int64_t n, int64_t c, int64_t h, int64_t w, int64_t d) { return data_[idx(n, c, h, w, d)]; }
  const T& at(int64_t n, int64_t c, int64_t h, int64_t w, int64_t d) const {
    return data_[idx(n, c, h, w, d)];
  }

  int64_t idx(int64_t n, int64_t c, int64_t h, int64_t w, int64_t d) const {
    return (((n * shape_.c + c) * shape_.H + h) * shape_.W + w) * shape_.D + d;
  }

  void fill(T v) { data_.assign(data_.size(), v); }
  void resize(Shape5 s) {
    shape_ = s;
    data_.assign(check_size(s), T(0));
  }

  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

 private:
  static size_t check_size(Shape5 s) {
    if (s.n < 0 || s.c < 0 || s.H < 0 || s.W < 0 || s.D < 0)
      throw shape_error("negative tensor dimension " + s.str());
    return size_t(s.elems());
  }

  Shape5 shape_{};
  std::vector<T> data_;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw shape_error(msg);
}

}  // namespace sunet
