#pragma once

#include <cstddef>

namespace skillformer::kernels {

/// C[m,n] = A[m,k] * B[k,n]            (accumulate == false)
/// C[m,n] = C[m,n] + A[m,k] * B[k,n]   (accumulate == true)
///
/// Every output element is a multiply-add chain over p = 0..k-1 in order,
/// whatever the tile it lands in. A row of C therefore does not depend on
/// how many other rows are computed alongside it.
void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda, const double* b,
          std::size_t ldb, double* c, std::size_t ldc, bool accumulate);

/// dst[cols, rows] = src[rows, cols]^T
void transpose(std::size_t rows, std::size_t cols, const double* src, double* dst);

}  // namespace skillformer::kernels
