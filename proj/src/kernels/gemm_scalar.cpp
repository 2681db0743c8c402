#include <algorithm>

#include "parawidth/kernels.hpp"

namespace parawidth::kernels {

// Row-wise axpy form: each C element still accumulates in ascending p order.
template <typename T>
void gemm_scalar(int m, int n, int k, const T* a, std::ptrdiff_t a_row_stride,
                 std::ptrdiff_t a_col_stride, const T* b, std::ptrdiff_t ldb,
                 T* c, std::ptrdiff_t ldc, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + i * ldc;
    if (!accumulate) std::fill(crow, crow + n, T(0));
    const T* arow = a + i * a_row_stride;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p * a_col_stride];
      const T* brow = b + p * ldb;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template void gemm_scalar<float>(int, int, int, const float*, std::ptrdiff_t,
                                 std::ptrdiff_t, const float*, std::ptrdiff_t,
                                 float*, std::ptrdiff_t, bool);
template void gemm_scalar<double>(int, int, int, const double*, std::ptrdiff_t,
                                  std::ptrdiff_t, const double*,
                                  std::ptrdiff_t, double*, std::ptrdiff_t,
                                  bool);

}  // namespace parawidth::kernels
