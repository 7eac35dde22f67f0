#include "kernels.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

namespace skillformer::kernels {

namespace {

using v8d = double __attribute__((vector_size(64)));

inline v8d load8(const double* p) {
  v8d v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void store8(double* p, v8d v) { std::memcpy(p, &v, sizeof v); }

inline v8d splat(double x) { return v8d{} + x; }

constexpr std::size_t kRowTile = 4;
constexpr std::size_t kColTile = 16;
constexpr std::size_t kDepthBlock = 256;

// 4x16 register tile over depth range [p0, p1).
inline void tile_4x16(const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c,
                      std::size_t ldc, std::size_t p0, std::size_t p1, bool load_c) {
  v8d c00{}, c01{}, c10{}, c11{}, c20{}, c21{}, c30{}, c31{};
  if (load_c) {
    c00 = load8(c), c01 = load8(c + 8);
    c10 = load8(c + ldc), c11 = load8(c + ldc + 8);
    c20 = load8(c + 2 * ldc), c21 = load8(c + 2 * ldc + 8);
    c30 = load8(c + 3 * ldc), c31 = load8(c + 3 * ldc + 8);
  }
  for (std::size_t p = p0; p < p1; ++p) {
    const v8d b0 = load8(b + p * ldb);
    const v8d b1 = load8(b + p * ldb + 8);
    const v8d a0 = splat(a[p]);
    const v8d a1 = splat(a[lda + p]);
    const v8d a2 = splat(a[2 * lda + p]);
    const v8d a3 = splat(a[3 * lda + p]);
    c00 += a0 * b0, c01 += a0 * b1;
    c10 += a1 * b0, c11 += a1 * b1;
    c20 += a2 * b0, c21 += a2 * b1;
    c30 += a3 * b0, c31 += a3 * b1;
  }
  store8(c, c00), store8(c + 8, c01);
  store8(c + ldc, c10), store8(c + ldc + 8, c11);
  store8(c + 2 * ldc, c20), store8(c + 2 * ldc + 8, c21);
  store8(c + 3 * ldc, c30), store8(c + 3 * ldc + 8, c31);
}

inline void tile_1x16(const double* a, const double* b, std::size_t ldb, double* c, std::size_t p0,
                      std::size_t p1, bool load_c) {
  v8d c0{}, c1{};
  if (load_c) c0 = load8(c), c1 = load8(c + 8);
  for (std::size_t p = p0; p < p1; ++p) {
    const v8d av = splat(a[p]);
    c0 += av * load8(b + p * ldb);
    c1 += av * load8(b + p * ldb + 8);
  }
  store8(c, c0), store8(c + 8, c1);
}

// 4x8 register tile over depth range [p0, p1).
inline void tile_4x8(const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c, std::size_t ldc,
                     std::size_t p0, std::size_t p1, bool load_c) {
  v8d c0{}, c1{}, c2{}, c3{};
  if (load_c) c0 = load8(c), c1 = load8(c + ldc), c2 = load8(c + 2 * ldc), c3 = load8(c + 3 * ldc);
  for (std::size_t p = p0; p < p1; ++p) {
    const v8d bv = load8(b + p * ldb);
    c0 += splat(a[p]) * bv;
    c1 += splat(a[lda + p]) * bv;
    c2 += splat(a[2 * lda + p]) * bv;
    c3 += splat(a[3 * lda + p]) * bv;
  }
  store8(c, c0), store8(c + ldc, c1), store8(c + 2 * ldc, c2), store8(c + 3 * ldc, c3);
}

inline void tile_1x8(const double* a, const double* b, std::size_t ldb, double* c, std::size_t p0, std::size_t p1,
                     bool load_c) {
  v8d c0{};
  if (load_c) c0 = load8(c);
  for (std::size_t p = p0; p < p1; ++p) c0 += splat(a[p]) * load8(b + p * ldb);
  store8(c, c0);
}

// Columns [j0, j1) with j1 - j0 a multiple of 8 (or 16 when wide).
void gemm_cols(std::size_t m, std::size_t j0, std::size_t j1, std::size_t k, const double* a, std::size_t lda,
               const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  const std::size_t m_tiled = m - m % kRowTile;
  for (std::size_t p0 = 0; p0 < k; p0 += kDepthBlock) {
    const std::size_t p1 = std::min(k, p0 + kDepthBlock);
    const bool load_c = accumulate || p0 > 0;
    std::size_t j = j0;
    for (; j + kColTile <= j1; j += kColTile) {
      std::size_t i = 0;
      for (; i < m_tiled; i += kRowTile) {
        tile_4x16(a + i * lda, lda, b + j, ldb, c + i * ldc + j, ldc, p0, p1, load_c);
      }
      for (; i < m; ++i) tile_1x16(a + i * lda, b + j, ldb, c + i * ldc + j, p0, p1, load_c);
    }
    for (; j + 8 <= j1; j += 8) {
      std::size_t i = 0;
      for (; i < m_tiled; i += kRowTile) tile_4x8(a + i * lda, lda, b + j, ldb, c + i * ldc + j, ldc, p0, p1, load_c);
      for (; i < m; ++i) tile_1x8(a + i * lda, b + j, ldb, c + i * ldc + j, p0, p1, load_c);
    }
  }
}

}  // namespace

void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda, const double* b,
          std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate) {
      for (std::size_t i = 0; i < m; ++i) std::fill(c + i * ldc, c + i * ldc + n, 0.0);
    }
    return;
  }
  const std::size_t n_main = n - n % 8;
  if (n_main > 0) gemm_cols(m, 0, n_main, k, a, lda, b, ldb, c, ldc, accumulate);
  const std::size_t rest = n - n_main;
  if (rest == 0) return;

  // Leftover columns run through the same 8-wide kernel on zero-padded
  // copies, so every element is still one FMA chain over k.
  thread_local std::vector<double> bpad, cpad;
  bpad.assign(k * 8, 0.0);
  cpad.assign(m * 8, 0.0);
  for (std::size_t p = 0; p < k; ++p) std::copy(b + p * ldb + n_main, b + p * ldb + n, bpad.data() + p * 8);
  if (accumulate) {
    for (std::size_t i = 0; i < m; ++i) std::copy(c + i * ldc + n_main, c + i * ldc + n, cpad.data() + i * 8);
  }
  gemm_cols(m, 0, 8, k, a, lda, bpad.data(), 8, cpad.data(), 8, accumulate);
  for (std::size_t i = 0; i < m; ++i) std::copy(cpad.data() + i * 8, cpad.data() + i * 8 + rest, c + i * ldc + n_main);
}

void transpose(std::size_t rows, std::size_t cols, const double* src, double* dst) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += kBlock) {
    const std::size_t r1 = std::min(rows, r0 + kBlock);
    for (std::size_t c0 = 0; c0 < cols; c0 += kBlock) {
      const std::size_t c1 = std::min(cols, c0 + kBlock);
      for (std::size_t r = r0; r < r1; ++r) {
        for (std::size_t col = c0; col < c1; ++col) dst[col * rows + r] = src[r * cols + col];
      }
    }
  }
}

}  // namespace skillformer::kernels
