// Compiled with -mavx2 -mfma; only reached after a runtime CPU check.

#include <immintrin.h>

#include <cstdint>

#include "parawidth/kernels.hpp"

namespace parawidth::kernels {
namespace {

template <typename T>
struct Vec;

template <>
struct Vec<float> {
  using type = __m256;
  static constexpr int kLanes = 8;
  static type zero() { return _mm256_setzero_ps(); }
  static type load(const float* p) { return _mm256_loadu_ps(p); }
  static void store(float* p, type v) { _mm256_storeu_ps(p, v); }
  static type broadcast(const float* p) { return _mm256_broadcast_ss(p); }
  static type fmadd(type a, type b, type c) { return _mm256_fmadd_ps(a, b, c); }
  static __m256i tail_mask(int count) {
    alignas(32) static const std::int32_t kTable[16] = {-1, -1, -1, -1, -1, -1, -1, -1,
                                                         0,  0,  0,  0,  0,  0,  0,  0};
    return _mm256_loadu_si256(reinterpret_cast<const __m256i*>(kTable + 8 - count));
  }
  static type mask_load(const float* p, __m256i m) { return _mm256_maskload_ps(p, m); }
  static void mask_store(float* p, __m256i m, type v) { _mm256_maskstore_ps(p, m, v); }
};

template <>
struct Vec<double> {
  using type = __m256d;
  static constexpr int kLanes = 4;
  static type zero() { return _mm256_setzero_pd(); }
  static type load(const double* p) { return _mm256_loadu_pd(p); }
  static void store(double* p, type v) { _mm256_storeu_pd(p, v); }
  static type broadcast(const double* p) { return _mm256_broadcast_sd(p); }
  static type fmadd(type a, type b, type c) { return _mm256_fmadd_pd(a, b, c); }
  static __m256i tail_mask(int count) {
    alignas(32) static const std::int64_t kTable[8] = {-1, -1, -1, -1, 0, 0, 0, 0};
    return _mm256_loadu_si256(reinterpret_cast<const __m256i*>(kTable + 4 - count));
  }
  static type mask_load(const double* p, __m256i m) { return _mm256_maskload_pd(p, m); }
  static void mask_store(double* p, __m256i m, type v) { _mm256_maskstore_pd(p, m, v); }
};

// MR rows x two full vectors of columns.
template <typename T, int MR>
inline void block_2v(int k, const T* a, std::ptrdiff_t ars, std::ptrdiff_t acs,
                     const T* b, std::ptrdiff_t ldb, T* c, std::ptrdiff_t ldc,
                     bool accumulate) {
  using V = Vec<T>;
  typename V::type acc0[MR], acc1[MR];
  for (int r = 0; r < MR; ++r) {
    if (accumulate) {
      acc0[r] = V::load(c + r * ldc);
      acc1[r] = V::load(c + r * ldc + V::kLanes);
    } else {
      acc0[r] = V::zero();
      acc1[r] = V::zero();
    }
  }
  for (int p = 0; p < k; ++p) {
    const T* brow = b + p * ldb;
    const auto b0 = V::load(brow);
    const auto b1 = V::load(brow + V::kLanes);
    const T* acol = a + p * acs;
    for (int r = 0; r < MR; ++r) {
      const auto av = V::broadcast(acol + r * ars);
      acc0[r] = V::fmadd(av, b0, acc0[r]);
      acc1[r] = V::fmadd(av, b1, acc1[r]);
    }
  }
  for (int r = 0; r < MR; ++r) {
    V::store(c + r * ldc, acc0[r]);
    V::store(c + r * ldc + V::kLanes, acc1[r]);
  }
}

// MR rows x one vector of columns, optionally masked to `count` lanes.
template <typename T, int MR, bool Masked>
inline void block_1v(int k, const T* a, std::ptrdiff_t ars, std::ptrdiff_t acs,
                     const T* b, std::ptrdiff_t ldb, T* c, std::ptrdiff_t ldc,
                     bool accumulate, int count) {
  using V = Vec<T>;
  const __m256i mask = V::tail_mask(Masked ? count : V::kLanes);
  typename V::type acc[MR];
  for (int r = 0; r < MR; ++r) {
    if (!accumulate) {
      acc[r] = V::zero();
    } else if constexpr (Masked) {
      acc[r] = V::mask_load(c + r * ldc, mask);
    } else {
      acc[r] = V::load(c + r * ldc);
    }
  }
  for (int p = 0; p < k; ++p) {
    const T* brow = b + p * ldb;
    typename V::type bv;
    if constexpr (Masked) {
      bv = V::mask_load(brow, mask);
    } else {
      bv = V::load(brow);
    }
    const T* acol = a + p * acs;
    for (int r = 0; r < MR; ++r) {
      acc[r] = V::fmadd(V::broadcast(acol + r * ars), bv, acc[r]);
    }
  }
  for (int r = 0; r < MR; ++r) {
    if constexpr (Masked) {
      V::mask_store(c + r * ldc, mask, acc[r]);
    } else {
      V::store(c + r * ldc, acc[r]);
    }
  }
}

template <typename T, int MR>
void row_panel(int n, int k, const T* a, std::ptrdiff_t ars, std::ptrdiff_t acs,
               const T* b, std::ptrdiff_t ldb, T* c, std::ptrdiff_t ldc,
               bool accumulate) {
  constexpr int L = Vec<T>::kLanes;
  int j = 0;
  for (; j + 2 * L <= n; j += 2 * L) {
    block_2v<T, MR>(k, a, ars, acs, b + j, ldb, c + j, ldc, accumulate);
  }
  for (; j + L <= n; j += L) {
    block_1v<T, MR, false>(k, a, ars, acs, b + j, ldb, c + j, ldc, accumulate, L);
  }
  if (j < n) {
    block_1v<T, MR, true>(k, a, ars, acs, b + j, ldb, c + j, ldc, accumulate, n - j);
  }
}

template <typename T>
void gemm_impl(int m, int n, int k, const T* a, std::ptrdiff_t ars,
               std::ptrdiff_t acs, const T* b, std::ptrdiff_t ldb, T* c,
               std::ptrdiff_t ldc, bool accumulate) {
  constexpr int kMr = 6;
  // Column panels of B stay hot while row blocks of A stream past them.
  constexpr int kPanel = 256;
  for (int j0 = 0; j0 < n; j0 += kPanel) {
    const int nb = (n - j0 < kPanel) ? n - j0 : kPanel;
    int i = 0;
    for (; i + kMr <= m; i += kMr) {
      row_panel<T, kMr>(nb, k, a + i * ars, ars, acs, b + j0, ldb, c + i * ldc + j0, ldc,
                        accumulate);
    }
    const int rest = m - i;
    const T* ai = a + i * ars;
    T* ci = c + i * ldc + j0;
    switch (rest) {
      case 5: row_panel<T, 5>(nb, k, ai, ars, acs, b + j0, ldb, ci, ldc, accumulate); break;
      case 4: row_panel<T, 4>(nb, k, ai, ars, acs, b + j0, ldb, ci, ldc, accumulate); break;
      case 3: row_panel<T, 3>(nb, k, ai, ars, acs, b + j0, ldb, ci, ldc, accumulate); break;
      case 2: row_panel<T, 2>(nb, k, ai, ars, acs, b + j0, ldb, ci, ldc, accumulate); break;
      case 1: row_panel<T, 1>(nb, k, ai, ars, acs, b + j0, ldb, ci, ldc, accumulate); break;
      default: break;
    }
  }
}

}  // namespace

template <typename T>
void gemm_avx2(int m, int n, int k, const T* a, std::ptrdiff_t a_row_stride,
               std::ptrdiff_t a_col_stride, const T* b, std::ptrdiff_t ldb, T* c,
               std::ptrdiff_t ldc, bool accumulate) {
  if (m <= 0 || n <= 0) return;
  gemm_impl<T>(m, n, k, a, a_row_stride, a_col_stride, b, ldb, c, ldc, accumulate);
}

template void gemm_avx2<float>(int, int, int, const float*, std::ptrdiff_t, std::ptrdiff_t,
                               const float*, std::ptrdiff_t, float*, std::ptrdiff_t, bool);
template void gemm_avx2<double>(int, int, int, const double*, std::ptrdiff_t, std::ptrdiff_t,
                                const double*, std::ptrdiff_t, double*, std::ptrdiff_t, bool);

}  // namespace parawidth::kernels
