#include "fslora/sketch.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fslora/errors.hpp"
#include "fslora/kernels.hpp"

namespace fslora {

Sketch::Sketch(SketchSpec spec, std::vector<uint32_t> indices)
    : spec_(spec), indices_(std::move(indices)) {
  if (spec_.r == 0) throw RangeError("Sketch: rank must be positive");
  if (spec_.k == 0 || spec_.k > spec_.r) {
    throw RangeError("Sketch: k " + std::to_string(spec_.k) + " outside [1, " +
                     std::to_string(spec_.r) + "]");
  }
  if (indices_.size() != spec_.k) {
    throw RangeError("Sketch: expected " + std::to_string(spec_.k) + " indices, got " +
                     std::to_string(indices_.size()));
  }
  std::sort(indices_.begin(), indices_.end());
  for (size_t i = 0; i < indices_.size(); ++i) {
    if (indices_[i] >= spec_.r) {
      throw RangeError("Sketch: index " + std::to_string(indices_[i]) + " out of range for rank " +
                       std::to_string(spec_.r));
    }
    if (i > 0 && indices_[i] == indices_[i - 1]) {
      throw RangeError("Sketch: duplicate index " + std::to_string(indices_[i]));
    }
  }
  // r/k in double; exact 1.0 when k == r, so a full sketch perturbs nothing.
  scale_ = static_cast<double>(spec_.r) / static_cast<double>(spec_.k);
}

Sketch Sketch::full(uint32_t r) {
  std::vector<uint32_t> idx(r);
  for (uint32_t j = 0; j < r; ++j) idx[j] = j;
  return Sketch(SketchSpec{r, r}, std::move(idx));
}

bool Sketch::contains(uint32_t j) const {
  return std::binary_search(indices_.begin(), indices_.end(), j);
}

Matrix Sketch::dense() const {
  Matrix d(spec_.r, spec_.r);
  for (uint32_t j : indices_) d.at(j, j) = scale_;
  return d;
}

Sketch sample_random_k(SketchSpec spec, RngStream& rng) {
  if (spec.k == 0 || spec.k > spec.r) {
    throw RangeError("sample_random_k: k " + std::to_string(spec.k) + " outside [1, " +
                     std::to_string(spec.r) + "]");
  }
  return Sketch(spec, rng.sample_without_replacement(spec.r, spec.k));
}

Sketch sample_importance(const Matrix& b, const Matrix& a, uint32_t k, ImportanceMetric metric,
                         RngStream& rng) {
  if (b.cols() != a.rows()) {
    throw ShapeError("sample_importance: b cols " + std::to_string(b.cols()) + " != a rows " +
                     std::to_string(a.rows()));
  }
  const uint32_t r = static_cast<uint32_t>(b.cols());
  if (k == 0 || k > r) {
    throw RangeError("sample_importance: k " + std::to_string(k) + " outside [1, " +
                     std::to_string(r) + "]");
  }
  if (k == r) return Sketch::full(r);  // every component kept; scores moot
  std::vector<double> score(r);
  double total = 0.0;
  for (uint32_t j = 0; j < r; ++j) {
    double bn = 0.0;
    for (size_t i = 0; i < b.rows(); ++i) bn += b.at(i, j) * b.at(i, j);
    bn = std::sqrt(bn);
    double an = std::sqrt(kern::active().sum_sq(a.row(j), a.cols()));
    score[j] = metric == ImportanceMetric::NormProduct ? bn * an : bn + an;
    total += score[j];
  }
  if (total <= 0.0) {
    throw DegenerateScoresError("sample_importance: all component scores are zero");
  }
  // Sequential weighted draws without replacement; chosen scores drop out of
  // the denominator.
  std::vector<uint32_t> chosen;
  std::vector<bool> used(r, false);
  for (uint32_t draw = 0; draw < k; ++draw) {
    double u = rng.next_double() * total;
    uint32_t pick = r;  // sentinel
    double cum = 0.0;
    for (uint32_t j = 0; j < r; ++j) {
      if (used[j]) continue;
      cum += score[j];
      if (u < cum) {
        pick = j;
        break;
      }
    }
    if (pick == r) {
      // u landed on the rounding slack past the last positive score; take the
      // last unused component with positive score, else any unused one.
      for (uint32_t j = r; j-- > 0;) {
        if (!used[j] && (score[j] > 0.0 || pick == r)) {
          pick = j;
          if (score[j] > 0.0) break;
        }
      }
    }
    used[pick] = true;
    total -= score[pick];
    chosen.push_back(pick);
    if (total <= 0.0 && draw + 1 < k) {
      // Remaining scores all zero: fill with the lowest unused indices so the
      // draw count contract still holds.
      for (uint32_t j = 0; j < r && chosen.size() < k; ++j) {
        if (!used[j]) {
          used[j] = true;
          chosen.push_back(j);
        }
      }
      break;
    }
  }
  return Sketch(SketchSpec{r, k}, std::move(chosen));
}

Matrix apply_right(const Matrix& x, const Sketch& s) {
  if (x.cols() != s.r()) {
    throw ShapeError("apply_right: x cols " + std::to_string(x.cols()) + " != sketch rank " +
                     std::to_string(s.r()));
  }
  Matrix out(x.rows(), x.cols());
  const double c = s.sketch_scale();
  for (size_t i = 0; i < x.rows(); ++i) {
    for (uint32_t j : s.indices()) out.at(i, j) = c * x.at(i, j);
  }
  return out;
}

Matrix apply_left(const Matrix& x, const Sketch& s) {
  if (x.rows() != s.r()) {
    throw ShapeError("apply_left: x rows " + std::to_string(x.rows()) + " != sketch rank " +
                     std::to_string(s.r()));
  }
  Matrix out(x.rows(), x.cols());
  const double c = s.sketch_scale();
  for (uint32_t j : s.indices()) {
    kern::active().scale(c, x.row(j), out.row(j), x.cols());
  }
  return out;
}

std::vector<uint8_t> encode_indices(const Sketch& s) {
  std::vector<uint8_t> bytes((s.r() + 7) / 8, 0);
  for (uint32_t j : s.indices()) bytes[j / 8] |= static_cast<uint8_t>(1u << (j % 8));
  return bytes;
}

Sketch decode_indices(SketchSpec spec, const std::vector<uint8_t>& bytes) {
  if (bytes.size() != (spec.r + 7) / 8) {
    throw RangeError("decode_indices: expected " + std::to_string((spec.r + 7) / 8) +
                     " bytes for rank " + std::to_string(spec.r) + ", got " +
                     std::to_string(bytes.size()));
  }
  std::vector<uint32_t> idx;
  for (uint32_t j = 0; j < spec.r; ++j) {
    if (bytes[j / 8] & (1u << (j % 8))) idx.push_back(j);
  }
  for (uint32_t j = spec.r; j < bytes.size() * 8; ++j) {
    if (bytes[j / 8] & (1u << (j % 8))) {
      throw RangeError("decode_indices: stray bit " + std::to_string(j) + " beyond rank " +
                       std::to_string(spec.r));
    }
  }
  return Sketch(spec, std::move(idx));
}

}  // namespace fslora
