#pragma once

#include <cstddef>
#include <string>

namespace fslora::kern {

// ============================================================================
// Runtime-dispatched dense kernels.
//
// Every kernel has a scalar reference implementation and (where the platform
// supports it) a SIMD variant. The two are bit-exact by construction: both
// perform the same floating point operations on each output element in the
// same order. Concretely:
//   * matmul uses the i-k-j loop order, so C[i][j] accumulates a[i][k]*b[k][j]
//     over ascending k in both variants; SIMD vectorizes over j only.
//   * multiply and add stay separate instructions (no FMA); the AVX2 unit is
//     compiled with -mavx2 but not -mfma, and contraction is disabled.
//   * reductions (dot, sum_sq) use an explicit 4-lane accumulator pattern with
//     a fixed combine order; the scalar reference implements the same pattern.
// ============================================================================

struct Ops {
  // c = a * b, row-major; a is m x k, b is k x n, c is m x n. c is overwritten.
  void (*matmul)(const double* a, const double* b, double* c, size_t m, size_t k, size_t n);
  // y += alpha * x (n elements).
  void (*axpy)(double alpha, const double* x, double* y, size_t n);
  // y = alpha * x (n elements).
  void (*scale)(double alpha, const double* x, double* y, size_t n);
  // sum of x[i] * y[i], 4-lane pattern.
  double (*dot)(const double* x, const double* y, size_t n);
  // sum of x[i]^2, 4-lane pattern.
  double (*sum_sq)(const double* x, size_t n);
  const char* name;
};

enum class Kind { Auto, Scalar, Avx2, Neon };

// The active kernel table. Defaults to the best supported variant, or to the
// one named in FSLORA_KERNELS (scalar | avx2 | neon | auto) if that is set.
const Ops& active();

// Select a variant at runtime. Throws ConfigError if unsupported on this CPU.
void select(Kind kind);
Kind parse_kind(const std::string& name);  // throws ConfigError on bad name
const char* active_name();

// Individual tables, for equivalence tests. avx2()/neon() are null when the
// binary or CPU lacks support.
const Ops& scalar();
const Ops* avx2();
const Ops* neon();

}  // namespace fslora::kern
