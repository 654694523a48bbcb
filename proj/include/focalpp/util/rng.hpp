#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace focalpp {

// splitmix64; used to derive independent, reproducible seed streams.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Derive a stream seed from a base seed and a list of stream identifiers
// (step, task index, purpose tag, ...). Every random decision in training is a
// pure function of (seed, identifiers), which makes runs resumable and allows
// deterministic parallel execution.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> ids) {
  std::uint64_t h = mix64(base);
  for (std::uint64_t id : ids) h = mix64(h ^ mix64(id + 0x5bd1e995ULL));
  return h;
}

inline std::mt19937_64 make_rng(std::uint64_t seed) { return std::mt19937_64(seed); }

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double gaussian(std::mt19937_64& rng, double mean = 0.0, double stddev = 1.0) {
  return std::normal_distribution<double>(mean, stddev)(rng);
}

// Uniform index in [0, n).
inline std::size_t uindex(std::mt19937_64& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

}  // namespace focalpp
