#include "fslora/kernels.hpp"

// Scalar reference kernels. These define the arithmetic contract: every other
// variant must reproduce these results bit for bit.

namespace fslora::kern {
namespace {

void matmul_scalar(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
  for (size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (size_t j = 0; j < n; ++j) crow[j] = 0.0;
    for (size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const double* brow = b + p * n;
      for (size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

void axpy_scalar(double alpha, const double* x, double* y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale_scalar(double alpha, const double* x, double* y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] = alpha * x[i];
}

// 4-lane accumulation: lane L sums elements L, L+4, L+8, ... of the main body;
// the tail (n % 4 elements) accumulates separately and is added last. SIMD
// variants realize the same pattern with one vector register.
double dot_scalar(const double* x, const double* y, size_t n) {
  double acc[4] = {0.0, 0.0, 0.0, 0.0};
  size_t n4 = n & ~size_t{3};
  for (size_t i = 0; i < n4; i += 4) {
    acc[0] += x[i] * y[i];
    acc[1] += x[i + 1] * y[i + 1];
    acc[2] += x[i + 2] * y[i + 2];
    acc[3] += x[i + 3] * y[i + 3];
  }
  double tail = 0.0;
  for (size_t i = n4; i < n; ++i) tail += x[i] * y[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail;
}

double sum_sq_scalar(const double* x, size_t n) {
  double acc[4] = {0.0, 0.0, 0.0, 0.0};
  size_t n4 = n & ~size_t{3};
  for (size_t i = 0; i < n4; i += 4) {
    acc[0] += x[i] * x[i];
    acc[1] += x[i + 1] * x[i + 1];
    acc[2] += x[i + 2] * x[i + 2];
    acc[3] += x[i + 3] * x[i + 3];
  }
  double tail = 0.0;
  for (size_t i = n4; i < n; ++i) tail += x[i] * x[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail;
}

}  // namespace

const Ops& scalar() {
  static const Ops ops = {matmul_scalar, axpy_scalar, scale_scalar,
                          dot_scalar,    sum_sq_scalar, "scalar"};
  return ops;
}

}  // namespace fslora::kern
