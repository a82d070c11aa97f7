#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace fslora {

// Counter-based splittable PRNG.
//
// Every stream is identified by (seed, stream id). Output i of a stream is a pure
// function of (seed, stream, i), so draws are reproducible regardless of how many
// other streams exist or in what order they are consumed. Streams for independent
// purposes are derived by mixing tags into the stream id ("domain separation"):
//
//   RngStream root(seed);
//   auto batch = root.derive("client").derive(client_id).derive("batch");
//
// The generator is SplitMix64 evaluated at base + i * GOLDEN where base mixes
// (seed, stream). Gaussian draws use Box-Muller on explicit uniform draws, so the
// sequence is identical across platforms and compilers (no std::distribution).
class RngStream {
 public:
  RngStream() : RngStream(0, 0) {}
  explicit RngStream(uint64_t seed, uint64_t stream = 0);

  uint64_t seed() const { return seed_; }
  uint64_t stream() const { return stream_; }

  // New independent stream; does not disturb this stream's state.
  RngStream derive(uint64_t tag) const;
  RngStream derive(std::string_view label) const;

  uint64_t next_u64();
  // Uniform in [0, bound). bound must be > 0. Rejection sampling, unbiased.
  uint64_t next_below(uint64_t bound);
  // Uniform in [0, 1) with 53-bit resolution.
  double next_double();
  // Standard normal via Box-Muller (second value cached).
  double next_gaussian();
  // Standard Gumbel: -log(-log(u)).
  double next_gumbel();

  // k distinct values from {0, ..., n-1} via partial Fisher-Yates; uniform over
  // k-subsets. Result is in draw order (not sorted). Requires k <= n.
  std::vector<uint32_t> sample_without_replacement(uint32_t n, uint32_t k);

  // In-place Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t seed_;
  uint64_t stream_;
  uint64_t base_;     // mixed (seed, stream)
  uint64_t counter_;  // index of the next output
  bool have_spare_;
  double spare_;
};

// 64-bit FNV-1a. Used for string tags and content hashes. The basis overload
// chains multiple regions into one running hash.
inline constexpr uint64_t kFnvBasis = 0xcbf29ce484222325ULL;
uint64_t fnv1a64(const void* data, size_t len, uint64_t basis = kFnvBasis);
uint64_t fnv1a64(std::string_view s);

}  // namespace fslora
