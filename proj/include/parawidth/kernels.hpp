#pragma once

// Dense matrix kernels behind the convolution and linear layers.
//
// Every kernel exists as a portable scalar reference and as an AVX2/FMA
// variant; the active variant is picked once at startup from the CPU
// features and can be overridden with PARAWIDTH_ISA=scalar|avx2 or
// set_isa(). Both variants accumulate each output element in ascending
// reduction order, so results do not depend on how rows or columns are
// tiled. That property is what lets a masked full-width pass reproduce a
// sliced subnet pass bit for bit.

#include <cstddef>
#include <string_view>

namespace parawidth::kernels {

enum class Isa { kScalar, kAvx2 };

bool isa_supported(Isa isa);
Isa active_isa();
void set_isa(Isa isa);
std::string_view isa_name(Isa isa);

// C[m x n] = (accumulate ? C : 0) + A[m x k] * B[k x n]
//
// A(i, p) is read from a[i * a_row_stride + p * a_col_stride], which covers
// both A and A^T without a copy. B and C are row-major with leading
// dimensions ldb and ldc.
template <typename T>
void gemm(int m, int n, int k, const T* a, std::ptrdiff_t a_row_stride,
          std::ptrdiff_t a_col_stride, const T* b, std::ptrdiff_t ldb, T* c,
          std::ptrdiff_t ldc, bool accumulate);

// Same contract, pinned to one variant. Used by the equivalence tests.
template <typename T>
void gemm_scalar(int m, int n, int k, const T* a, std::ptrdiff_t a_row_stride,
                 std::ptrdiff_t a_col_stride, const T* b, std::ptrdiff_t ldb,
                 T* c, std::ptrdiff_t ldc, bool accumulate);

template <typename T>
void gemm_avx2(int m, int n, int k, const T* a, std::ptrdiff_t a_row_stride,
               std::ptrdiff_t a_col_stride, const T* b, std::ptrdiff_t ldb,
               T* c, std::ptrdiff_t ldc, bool accumulate);

// C[m x n] (+)= A[m x k] * B^T where B is stored row-major as [n x k].
// Transposes B into scratch and forwards to gemm().
template <typename T>
void gemm_bt(int m, int n, int k, const T* a, std::ptrdiff_t lda, const T* b,
             std::ptrdiff_t ldb, T* c, std::ptrdiff_t ldc, bool accumulate);

}  // namespace parawidth::kernels
