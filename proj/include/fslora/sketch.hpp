#pragma once

#include <cstdint>
#include <vector>

#include "fslora/matrix.hpp"
#include "fslora/rng.hpp"

namespace fslora {

struct SketchSpec {
  uint32_t r = 0;  // adapter rank (sketch dimension)
  uint32_t k = 0;  // kept components, 1 <= k <= r
};

// Diagonal sketch S = (r/k) * sum_{j in indices} e_j e_j^T, represented by its
// index set. E[S] = I when indices are a uniform k-subset, which is what makes
// sketched adapter gradients unbiased.
class Sketch {
 public:
  // indices need not be sorted on input; stored sorted ascending, no
  // duplicates. Throws RangeError on bad sizes or out-of-range indices.
  Sketch(SketchSpec spec, std::vector<uint32_t> indices);

  static Sketch full(uint32_t r);  // k = r, scale exactly 1.0

  const SketchSpec& spec() const { return spec_; }
  uint32_t r() const { return spec_.r; }
  uint32_t k() const { return spec_.k; }
  double sketch_scale() const { return scale_; }
  const std::vector<uint32_t>& indices() const { return indices_; }
  bool contains(uint32_t j) const;
  bool is_full() const { return spec_.k == spec_.r; }

  // Dense r x r diagonal form (scale on kept indices, 0 elsewhere).
  Matrix dense() const;

  bool operator==(const Sketch& o) const {
    return spec_.r == o.spec_.r && spec_.k == o.spec_.k && indices_ == o.indices_;
  }

 private:
  SketchSpec spec_;
  std::vector<uint32_t> indices_;
  double scale_;
};

// Uniform random k-subset of {0, ..., r-1} via partial Fisher-Yates.
Sketch sample_random_k(SketchSpec spec, RngStream& rng);

// Importance-weighted sampling: k indices without replacement, selection
// probability proportional to a per-component score built from column j of b
// and row j of a. The scale stays r/k (the estimator is intentionally the
// same as the uniform one; only the index distribution changes). Throws
// DegenerateScoresError when all scores are zero.
enum class ImportanceMetric { NormProduct, NormSum };
Sketch sample_importance(const Matrix& b, const Matrix& a, uint32_t k, ImportanceMetric metric,
                         RngStream& rng);

// x * S for row-major x (cols == r): kept columns scaled by r/k, the rest
// exactly zero. apply_left computes S * x (rows == r) on the rows.
Matrix apply_right(const Matrix& x, const Sketch& s);
Matrix apply_left(const Matrix& x, const Sketch& s);

// Wire form of the index set: ceil(r/8) bytes, little-endian bit order
// (index j -> byte j/8, bit j%8).
std::vector<uint8_t> encode_indices(const Sketch& s);
Sketch decode_indices(SketchSpec spec, const std::vector<uint8_t>& bytes);

}  // namespace fslora
