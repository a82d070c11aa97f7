#include "fslora/rng.hpp"

#include <cmath>

#include "fslora/errors.hpp"

namespace fslora {

namespace {

constexpr uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

// SplitMix64 finalizer (Steele, Lea, Flood 2014).
uint64_t mix64(uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

uint64_t fnv1a64(const void* data, size_t len, uint64_t basis) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = basis;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

RngStream::RngStream(uint64_t seed, uint64_t stream)
    : seed_(seed),
      stream_(stream),
      base_(mix64(mix64(seed + kGolden) ^ mix64(stream))),
      counter_(0),
      have_spare_(false),
      spare_(0.0) {}

RngStream RngStream::derive(uint64_t tag) const {
  return RngStream(seed_, mix64(stream_ ^ mix64(tag + kGolden)));
}

RngStream RngStream::derive(std::string_view label) const {
  return derive(fnv1a64(label));
}

uint64_t RngStream::next_u64() { return mix64(base_ + (counter_++) * kGolden); }

uint64_t RngStream::next_below(uint64_t bound) {
  if (bound == 0) throw RangeError("next_below: bound must be positive");
  // Rejection below the largest multiple of bound; unbiased.
  uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  for (;;) {
    uint64_t v = next_u64();
    if (v < limit) return v % bound;
  }
}

double RngStream::next_double() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::next_gaussian() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  // Box-Muller; guard against log(0).
  double u1 = next_double();
  while (u1 <= 0.0) u1 = next_double();
  double u2 = next_double();
  double mag = std::sqrt(-2.0 * std::log(u1));
  double ang = 6.283185307179586476925286766559 * u2;
  spare_ = mag * std::sin(ang);
  have_spare_ = true;
  return mag * std::cos(ang);
}

double RngStream::next_gumbel() {
  double u = next_double();
  while (u <= 0.0) u = next_double();
  return -std::log(-std::log(u));
}

std::vector<uint32_t> RngStream::sample_without_replacement(uint32_t n, uint32_t k) {
  if (k > n) throw RangeError("sample_without_replacement: k exceeds n");
  std::vector<uint32_t> pool(n);
  for (uint32_t i = 0; i < n; ++i) pool[i] = i;
  std::vector<uint32_t> out(k);
  for (uint32_t i = 0; i < k; ++i) {
    uint32_t j = i + static_cast<uint32_t>(next_below(n - i));
    std::swap(pool[i], pool[j]);
    out[i] = pool[i];
  }
  return out;
}

}  // namespace fslora
