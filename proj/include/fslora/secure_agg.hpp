#pragma once

#include <cstdint>
#include <vector>

#include "fslora/lora.hpp"
#include "fslora/sketch.hpp"

namespace fslora {

// Pairwise additive masking over sparse deltas. For every client pair i < j a
// mask M_ij lives on the intersection of their sketch index sets (B-side
// columns and A-side rows); the reverse direction is its negation. Client i
// uploads delta + R_i with R_i = sum_{j>i} M_ij - sum_{j<i} M_ji, so the
// server's sum telescopes back to the plain aggregate while individual
// uploads stay hidden.

struct PairMask {
  int i = -1;  // i < j always
  int j = -1;
  uint32_t m = 0, n = 0;
  std::vector<uint32_t> indices;  // sorted intersection of the two index sets
  std::vector<double> b_cols;     // indices.size() columns, m values each
  std::vector<double> a_rows;     // indices.size() rows, n values each
};

// One client's aggregate mask, laid out exactly like its SparseDelta so the
// two add entrywise. indices equal the client's full sketch index set.
struct ClientMask {
  int client_id = -1;
  SparseDelta shift;  // payload holds R_i restricted to the client's indices
};

// Gaussian(0, mask_stddev) pair masks for every pair among `ids`, supported
// on sketch-index intersections, then folded into per-client masks. All
// values derive from (pair_seed_base, i, j, round): the same arguments always
// rebuild the same masks, modeling two clients expanding a shared seed.
// sketches[t] belongs to ids[t]; m/n are the adapter cross-shapes.
struct MaskSet {
  std::vector<PairMask> pairs;        // ordered (i, j), i < j, lexicographic
  std::vector<ClientMask> per_client; // aligned with ids order
};
MaskSet derive_masks(const std::vector<int>& ids, const std::vector<Sketch>& sketches, uint32_t m,
                     uint32_t n, double mask_stddev, uint64_t pair_seed_base, long round);

// delta + mask, entrywise on the payload. The index set is unchanged. Throws
// ContractError if the mask's support is not contained in the delta's index
// set or shapes differ.
SparseDelta mask_delta(const SparseDelta& delta, const ClientMask& mask);

// Sum of densified masked deltas (no averaging). With a complete participant
// set the pair masks cancel and this equals the plain sum of deltas up to
// floating-point cancellation (<= 1e-10 at desk scale). Throws ContractError
// when a client id from the mask derivation is missing (its masks would not
// cancel).
DenseDelta secure_aggregate(const std::vector<SparseDelta>& masked,
                            const std::vector<int>& expected_ids, uint32_t r);

}  // namespace fslora
