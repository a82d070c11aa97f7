// NEON kernel variants (aarch64, float64x2). Same contract as the AVX2 unit:
// separate multiply and add (vmulq/vaddq, not vfmaq), identical per-element
// operation order, same 4-lane reduction pattern (two vector registers).

#include "fslora/kernels.hpp"

#if defined(__aarch64__)
#define FSLORA_HAVE_NEON_TU 1
#include <arm_neon.h>
#endif

namespace fslora::kern {

#if FSLORA_HAVE_NEON_TU
namespace {

void matmul_neon(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
  const size_t n2 = n & ~size_t{1};
  for (size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (size_t j = 0; j < n; ++j) crow[j] = 0.0;
    for (size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const float64x2_t va = vdupq_n_f64(aip);
      const double* brow = b + p * n;
      size_t j = 0;
      for (; j < n2; j += 2) {
        float64x2_t vc = vld1q_f64(crow + j);
        vc = vaddq_f64(vc, vmulq_f64(va, vld1q_f64(brow + j)));
        vst1q_f64(crow + j, vc);
      }
      for (; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

void axpy_neon(double alpha, const double* x, double* y, size_t n) {
  const float64x2_t va = vdupq_n_f64(alpha);
  const size_t n2 = n & ~size_t{1};
  size_t i = 0;
  for (; i < n2; i += 2) {
    float64x2_t vy = vld1q_f64(y + i);
    vy = vaddq_f64(vy, vmulq_f64(va, vld1q_f64(x + i)));
    vst1q_f64(y + i, vy);
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale_neon(double alpha, const double* x, double* y, size_t n) {
  const float64x2_t va = vdupq_n_f64(alpha);
  const size_t n2 = n & ~size_t{1};
  size_t i = 0;
  for (; i < n2; i += 2) {
    vst1q_f64(y + i, vmulq_f64(va, vld1q_f64(x + i)));
  }
  for (; i < n; ++i) y[i] = alpha * x[i];
}

// Two float64x2 accumulators realize the scalar reference's 4-lane pattern:
// acc0 holds lanes {0,1}, acc1 holds lanes {2,3}.
double dot_neon(const double* x, const double* y, size_t n) {
  float64x2_t acc0 = vdupq_n_f64(0.0);
  float64x2_t acc1 = vdupq_n_f64(0.0);
  const size_t n4 = n & ~size_t{3};
  size_t i = 0;
  for (; i < n4; i += 4) {
    acc0 = vaddq_f64(acc0, vmulq_f64(vld1q_f64(x + i), vld1q_f64(y + i)));
    acc1 = vaddq_f64(acc1, vmulq_f64(vld1q_f64(x + i + 2), vld1q_f64(y + i + 2)));
  }
  double tail = 0.0;
  for (; i < n; ++i) tail += x[i] * y[i];
  const double l0 = vgetq_lane_f64(acc0, 0), l1 = vgetq_lane_f64(acc0, 1);
  const double l2 = vgetq_lane_f64(acc1, 0), l3 = vgetq_lane_f64(acc1, 1);
  return ((l0 + l1) + (l2 + l3)) + tail;
}

double sum_sq_neon(const double* x, size_t n) {
  float64x2_t acc0 = vdupq_n_f64(0.0);
  float64x2_t acc1 = vdupq_n_f64(0.0);
  const size_t n4 = n & ~size_t{3};
  size_t i = 0;
  for (; i < n4; i += 4) {
    float64x2_t v0 = vld1q_f64(x + i);
    float64x2_t v1 = vld1q_f64(x + i + 2);
    acc0 = vaddq_f64(acc0, vmulq_f64(v0, v0));
    acc1 = vaddq_f64(acc1, vmulq_f64(v1, v1));
  }
  double tail = 0.0;
  for (; i < n; ++i) tail += x[i] * x[i];
  const double l0 = vgetq_lane_f64(acc0, 0), l1 = vgetq_lane_f64(acc0, 1);
  const double l2 = vgetq_lane_f64(acc1, 0), l3 = vgetq_lane_f64(acc1, 1);
  return ((l0 + l1) + (l2 + l3)) + tail;
}

const Ops neon_ops = {matmul_neon, axpy_neon, scale_neon, dot_neon, sum_sq_neon, "neon"};

}  // namespace

const Ops* neon_table() { return &neon_ops; }
#else
const Ops* neon_table() { return nullptr; }
#endif

}  // namespace fslora::kern
