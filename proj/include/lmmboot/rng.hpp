#pragma once

#include <cstdint>
#include <random>

namespace lmmboot {

// Purpose tags keep independent uses of the same seed on disjoint streams.
namespace rng_tag {
inline constexpr std::uint64_t kBootstrapOuter = 0x626f6f742d6f7574ULL;
inline constexpr std::uint64_t kBootstrapInner = 0x626f6f742d696e6eULL;
inline constexpr std::uint64_t kSimulationRun = 0x73696d2d72756e00ULL;
inline constexpr std::uint64_t kStudyScheme = 0x73747564792d7363ULL;
}  // namespace rng_tag

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Deterministic stream keyed by (seed, tag, index, subindex). Replicates,
/// simulation runs, and inner bootstrap levels each get their own stream, so
/// results do not depend on scheduling or worker count.
inline std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t tag,
                                   std::uint64_t index = 0, std::uint64_t subindex = 0) {
  std::uint64_t h = detail::splitmix64(seed ^ 0x243f6a8885a308d3ULL);
  h = detail::splitmix64(h ^ tag);
  h = detail::splitmix64(h ^ index);
  h = detail::splitmix64(h ^ subindex);
  return std::mt19937_64(h);
}

}  // namespace lmmboot
