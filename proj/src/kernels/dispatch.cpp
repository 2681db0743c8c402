#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <vector>

#include "parawidth/kernels.hpp"

namespace parawidth::kernels {
namespace {

bool cpu_has_avx2() {
#if defined(PARAWIDTH_HAVE_AVX2)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Isa initial_isa() {
  if (const char* env = std::getenv("PARAWIDTH_ISA")) {
    const std::string v(env);
    if (v == "scalar") return Isa::kScalar;
    if (v == "avx2" && cpu_has_avx2()) return Isa::kAvx2;
  }
  return cpu_has_avx2() ? Isa::kAvx2 : Isa::kScalar;
}

std::atomic<Isa>& current() {
  static std::atomic<Isa> isa{initial_isa()};
  return isa;
}

}  // namespace

bool isa_supported(Isa isa) {
  return isa == Isa::kScalar || cpu_has_avx2();
}

Isa active_isa() { return current().load(std::memory_order_relaxed); }

void set_isa(Isa isa) {
  if (!isa_supported(isa)) {
    throw std::invalid_argument("instruction set not supported on this CPU: " +
                                std::string(isa_name(isa)));
  }
  current().store(isa, std::memory_order_relaxed);
}

std::string_view isa_name(Isa isa) {
  return isa == Isa::kAvx2 ? "avx2" : "scalar";
}

template <typename T>
void gemm(int m, int n, int k, const T* a, std::ptrdiff_t a_row_stride,
          std::ptrdiff_t a_col_stride, const T* b, std::ptrdiff_t ldb, T* c,
          std::ptrdiff_t ldc, bool accumulate) {
#if defined(PARAWIDTH_HAVE_AVX2)
  if (active_isa() == Isa::kAvx2) {
    gemm_avx2<T>(m, n, k, a, a_row_stride, a_col_stride, b, ldb, c, ldc, accumulate);
    return;
  }
#endif
  gemm_scalar<T>(m, n, k, a, a_row_stride, a_col_stride, b, ldb, c, ldc, accumulate);
}

template <typename T>
void gemm_bt(int m, int n, int k, const T* a, std::ptrdiff_t lda, const T* b,
             std::ptrdiff_t ldb, T* c, std::ptrdiff_t ldc, bool accumulate) {
  thread_local std::vector<T> scratch;
  scratch.resize(static_cast<std::size_t>(k) * static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) {
    const T* brow = b + j * ldb;
    for (int p = 0; p < k; ++p) scratch[static_cast<std::size_t>(p) * n + j] = brow[p];
  }
  gemm<T>(m, n, k, a, lda, 1, scratch.data(), n, c, ldc, accumulate);
}

template void gemm<float>(int, int, int, const float*, std::ptrdiff_t, std::ptrdiff_t,
                          const float*, std::ptrdiff_t, float*, std::ptrdiff_t, bool);
template void gemm<double>(int, int, int, const double*, std::ptrdiff_t, std::ptrdiff_t,
                           const double*, std::ptrdiff_t, double*, std::ptrdiff_t, bool);
template void gemm_bt<float>(int, int, int, const float*, std::ptrdiff_t, const float*,
                             std::ptrdiff_t, float*, std::ptrdiff_t, bool);
template void gemm_bt<double>(int, int, int, const double*, std::ptrdiff_t, const double*,
                              std::ptrdiff_t, double*, std::ptrdiff_t, bool);

}  // namespace parawidth::kernels
