#pragma once

#include <cstdint>
#include <random>

namespace cotrain {

// Every random decision in an experiment draws from its own derived stream so
// that skipping one component (e.g. no VAT when lambda_div = 0) cannot shift
// the draws of another.
enum class RngPurpose : std::uint64_t {
  kInit = 1,
  kDataOrder = 2,
  kDropout = 3,
  kVatInit = 4,
  kPairSampling = 5,
  kAugment = 6,
  kTieBreak = 7,
  kSynthesis = 8,
  kSplit = 9,
};

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace detail

inline std::mt19937_64 make_stream(std::uint64_t seed, RngPurpose purpose,
                                   std::uint64_t instance = 0) {
  std::uint64_t s = detail::splitmix64(seed);
  s = detail::splitmix64(s ^ static_cast<std::uint64_t>(purpose));
  s = detail::splitmix64(s ^ instance);
  return std::mt19937_64(s);
}

using Rng = std::mt19937_64;

}  // namespace cotrain
