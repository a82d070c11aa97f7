// AVX2 kernel variants. This translation unit is compiled with -mavx2 and
// without -mfma: multiply and add must stay separate so results match the
// scalar reference bit for bit.

#include "fslora/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64) || defined(__i386__)
#define FSLORA_HAVE_AVX2_TU 1
#include <immintrin.h>
#endif

namespace fslora::kern {

#if FSLORA_HAVE_AVX2_TU
namespace {

void matmul_avx2(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
  const size_t n4 = n & ~size_t{3};
  for (size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (size_t j = 0; j < n; ++j) crow[j] = 0.0;
    for (size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const __m256d va = _mm256_set1_pd(aip);
      const double* brow = b + p * n;
      size_t j = 0;
      for (; j < n4; j += 4) {
        __m256d vb = _mm256_loadu_pd(brow + j);
        __m256d vc = _mm256_loadu_pd(crow + j);
        vc = _mm256_add_pd(vc, _mm256_mul_pd(va, vb));
        _mm256_storeu_pd(crow + j, vc);
      }
      for (; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

void axpy_avx2(double alpha, const double* x, double* y, size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  const size_t n4 = n & ~size_t{3};
  size_t i = 0;
  for (; i < n4; i += 4) {
    __m256d vy = _mm256_loadu_pd(y + i);
    vy = _mm256_add_pd(vy, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
    _mm256_storeu_pd(y + i, vy);
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale_avx2(double alpha, const double* x, double* y, size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  const size_t n4 = n & ~size_t{3};
  size_t i = 0;
  for (; i < n4; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
  }
  for (; i < n; ++i) y[i] = alpha * x[i];
}

// Same 4-lane pattern as the scalar reference: vector lane L holds the partial
// sum of elements L, L+4, ...; lanes combine as ((l0+l1)+(l2+l3)) + tail.
double dot_avx2(const double* x, const double* y, size_t n) {
  __m256d vacc = _mm256_setzero_pd();
  const size_t n4 = n & ~size_t{3};
  size_t i = 0;
  for (; i < n4; i += 4) {
    vacc = _mm256_add_pd(vacc, _mm256_mul_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  double lane[4];
  _mm256_storeu_pd(lane, vacc);
  double tail = 0.0;
  for (; i < n; ++i) tail += x[i] * y[i];
  return ((lane[0] + lane[1]) + (lane[2] + lane[3])) + tail;
}

double sum_sq_avx2(const double* x, size_t n) {
  __m256d vacc = _mm256_setzero_pd();
  const size_t n4 = n & ~size_t{3};
  size_t i = 0;
  for (; i < n4; i += 4) {
    __m256d vx = _mm256_loadu_pd(x + i);
    vacc = _mm256_add_pd(vacc, _mm256_mul_pd(vx, vx));
  }
  double lane[4];
  _mm256_storeu_pd(lane, vacc);
  double tail = 0.0;
  for (; i < n; ++i) tail += x[i] * x[i];
  return ((lane[0] + lane[1]) + (lane[2] + lane[3])) + tail;
}

const Ops avx2_ops = {matmul_avx2, axpy_avx2, scale_avx2, dot_avx2, sum_sq_avx2, "avx2"};

}  // namespace

const Ops* avx2_table() { return &avx2_ops; }
#else
const Ops* avx2_table() { return nullptr; }
#endif

}  // namespace fslora::kern
