#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mtlab {

inline constexpr const char* kSoftwareVersion = "0.1.0";

using TokenId = std::int32_t;

// All recoverable failures in the library surface as mtlab::Error.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// SplitMix64 finalizer; used to derive independent seeds (per epoch, per step,
// per sentence) from one experiment seed.
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace mtlab
