#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace reflplan {

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Seed for a stream identified by a path of integers, e.g.
// derive_seed(master, {episode, kStreamActor, step}).
inline std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = mix64(master);
  for (auto p : path) h = mix64(h ^ mix64(p + 0x632be59bd9b4e019ULL));
  return h;
}

inline Rng make_rng(std::uint64_t master, std::initializer_list<std::uint64_t> path) {
  return Rng(derive_seed(master, path));
}

// Stream tags, so that e.g. the demand path never shares draws with actor sampling.
namespace stream {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kDemand = 2;
inline constexpr std::uint64_t kObservation = 3;
inline constexpr std::uint64_t kActor = 4;
inline constexpr std::uint64_t kRollout = 5;
inline constexpr std::uint64_t kWarmup = 6;
inline constexpr std::uint64_t kEncoder = 7;
}  // namespace stream

}  // namespace reflplan
