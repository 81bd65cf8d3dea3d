#pragma once

#include <cstdint>
#include <vector>

#include <cblas.h>

namespace simcmf::detail {

inline void dgemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, std::int64_t m, std::int64_t n,
                  std::int64_t k, const double* a, std::int64_t lda, const double* b,
                  std::int64_t ldb, double* c, bool accumulate, std::int64_t ldc = 0) {
  if (m == 0 || n == 0) return;
  cblas_dgemm(CblasRowMajor, ta, tb, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), 1.0, a, static_cast<int>(lda), b, static_cast<int>(ldb),
              accumulate ? 1.0 : 0.0, c, static_cast<int>(ldc ? ldc : n));
}

// C[M,N] (+)= A[M,K] * B[K,N], all row-major.
inline void gemm_nn(std::int64_t m, std::int64_t n, std::int64_t k, const double* a,
                    const double* b, double* c, bool accumulate) {
  dgemm(CblasNoTrans, CblasNoTrans, m, n, k, a, k, b, n, c, accumulate);
}

inline std::vector<double> transposed(const double* x, std::int64_t rows, std::int64_t cols) {
  std::vector<double> t(static_cast<std::size_t>(rows * cols));
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j) t[j * rows + i] = x[i * cols + j];
  return t;
}

// C[M,N] (+)= A[M,K] * B[N,K]^T
inline void gemm_nt(std::int64_t m, std::int64_t n, std::int64_t k, const double* a,
                    const double* b, double* c, bool accumulate) {
  dgemm(CblasNoTrans, CblasTrans, m, n, k, a, k, b, k, c, accumulate);
}

// C[M,N] (+)= A[K,M]^T * B[K,N]
inline void gemm_tn(std::int64_t m, std::int64_t n, std::int64_t k, const double* a,
                    const double* b, double* c, bool accumulate) {
  dgemm(CblasTrans, CblasNoTrans, m, n, k, a, m, b, n, c, accumulate);
}

}  // namespace simcmf::detail
