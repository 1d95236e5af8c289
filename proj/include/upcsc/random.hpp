#ifndef UPCSC_RANDOM_HPP
#define UPCSC_RANDOM_HPP

#include <cstdint>
#include <initializer_list>
#include <random>

namespace upcsc {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/*
 * Counter-based sub-seed: a pure function of the key tuple, so streams derived
 * for (target, seed, step, purpose) never depend on the order runs execute in.
 */
constexpr std::uint64_t derive_seed(std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = 0x243f6a8885a308d3ULL;
  for (std::uint64_t k : keys) h = mix64(h ^ mix64(k));
  return h;
}

inline Rng make_rng(std::initializer_list<std::uint64_t> keys) { return Rng(derive_seed(keys)); }

}  // namespace upcsc

#endif  // UPCSC_RANDOM_HPP
