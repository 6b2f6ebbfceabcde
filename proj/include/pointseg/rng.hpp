#pragma once
// Counter-based, platform-stable random numbers.
//
// Every random quantity in the project is a pure function of
// (seed, stream label, counter), built on the SplitMix64 finalizer.
// There is no hidden generator state, so fixtures are bit-exact across
// runs and resuming a job mid-stream is trivial.

#include <cstdint>
#include <string_view>
#include <vector>

namespace pointseg::rng {

// SplitMix64 output function (Steele, Lea, Flood 2014).
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// FNV-1a over a label, used to derive independent streams by name.
constexpr std::uint64_t stream_id(std::string_view label) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : label) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// A stateless stream: draws are indexed, never consumed.
class Stream {
 public:
  Stream(std::uint64_t seed, std::string_view label)
      : key_(mix64(seed ^ stream_id(label))) {}
  Stream(std::uint64_t seed, std::string_view label, std::uint64_t sub)
      : key_(mix64(mix64(seed ^ stream_id(label)) ^ sub)) {}

  std::uint64_t bits(std::uint64_t counter) const { return mix64(key_ ^ counter); }

  // Uniform double in [0, 1) with 53 random bits.
  double uniform(std::uint64_t counter) const {
    return static_cast<double>(bits(counter) >> 11) * 0x1.0p-53;
  }

  double uniform(std::uint64_t counter, double lo, double hi) const {
    return lo + (hi - lo) * uniform(counter);
  }

  // Integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t counter, std::uint64_t n) const {
    // 128-bit multiply keeps the mapping unbiased enough for our uses.
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(bits(counter)) * n) >> 64);
  }

  // Approximate standard normal via Irwin-Hall (sum of 12 uniforms).
  // Pure arithmetic, so the value is identical on every platform.
  double gaussian(std::uint64_t counter) const {
    double s = 0.0;
    for (std::uint64_t k = 0; k < 12; ++k) s += uniform(counter * 12 + k);
    return s - 6.0;
  }

  std::uint64_t key() const { return key_; }

 private:
  std::uint64_t key_;
};

// Deterministic Fisher-Yates permutation of {0, ..., n-1}.
inline std::vector<std::size_t> permutation(const Stream& s, std::size_t n) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(s.below(i, i));
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

}  // namespace pointseg::rng
