#pragma once

// Raw-pointer GEMM wrappers over Eigen. Everything above this header works in
// terms of row-major buffers; Eigen supplies the vectorized kernels. Each call
// is a single Eigen product evaluated on the calling thread, so a fixed input
// always produces bit-identical output regardless of ARSG_THREADS.

#include <Eigen/Core>

namespace arseg::core {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

// C = A(MxK) * B(KxN), optionally accumulating into C.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N, bool accumulate = false) {
  ECMap<T> A(a, M, K);
  ECMap<T> B(b, K, N);
  EMap<T> C(c, M, N);
  if (accumulate)
    C.noalias() += A * B;
  else
    C.noalias() = A * B;
}

// C = A(MxK) * B(NxK)^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N, bool accumulate = false) {
  ECMap<T> A(a, M, K);
  ECMap<T> B(b, N, K);
  EMap<T> C(c, M, N);
  if (accumulate)
    C.noalias() += A * B.transpose();
  else
    C.noalias() = A * B.transpose();
}

// C = A(KxM)^T * B(KxN)
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N, bool accumulate = false) {
  ECMap<T> A(a, K, M);
  ECMap<T> B(b, K, N);
  EMap<T> C(c, M, N);
  if (accumulate)
    C.noalias() += A.transpose() * B;
  else
    C.noalias() = A.transpose() * B;
}

}  // namespace arseg::core
