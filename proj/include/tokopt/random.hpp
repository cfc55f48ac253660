#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace tokopt {

// splitmix64 finalizer; used to expand one user seed into independent streams.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view bytes,
                                std::uint64_t hash = 0xCBF29CE484222325ULL) {
  for (char c : bytes) {
    hash ^= static_cast<unsigned char>(c);
    hash *= 0x100000001B3ULL;
  }
  return hash;
}

// Sub-seed derivation: derive_seed(seed, "noise") etc. Every consumer of
// randomness names its stream so that adding a new consumer never shifts the
// values seen by existing ones.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream,
                                    std::uint64_t index = 0) {
  return mix_seed(mix_seed(seed ^ fnv1a64(stream)) + index);
}

using Rng = std::mt19937_64;

// Uniform integer in [0, bound) from raw engine output; independent of the
// standard library's distribution implementation.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t bound) {
  return bound == 0 ? 0 : rng() % bound;
}

std::string to_hex(std::uint64_t value);

}  // namespace tokopt
