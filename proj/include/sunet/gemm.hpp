#pragma once

// Thin row-major GEMM wrapper over Eigen.  One entry point, C = A*B (+ C).

#include <Eigen/Core>

namespace sunet {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using MapRM = Eigen::Map<MatRM<T>>;

template <class T>
using CMapRM = Eigen::Map<const MatRM<T>>;

// C(MxN) = A(MxK) * B(KxN), all row-major dense; accumulate adds into C.
template <class T>
void gemm(const T* A, const T* B, T* C, int64_t M, int64_t K, int64_t N, bool accumulate = false) {
  CMapRM<T> a(A, M, K), b(B, K, N);
  MapRM<T> c(C, M, N);
  if (accumulate)
    c.noalias() += a * b;
  else
    c.noalias() = a * b;
}

}  // namespace sunet
