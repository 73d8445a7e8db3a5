#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace voldeform {

// Counter-based generator. Draw i of a stream with seed s is a SplitMix64
// bit mix of s + (i+1)*gamma, so any draw can be produced independently of
// the others. Every random quantity in this library flows through it; that
// is what makes runs with equal manifests byte-identical.
class CounterRng {
 public:
  explicit CounterRng(uint64_t seed) : seed_(seed) {}

  uint64_t bits(uint64_t counter) const {
    uint64_t z = seed_ + (counter + 1) * 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // uniform in (0, 1]; never 0, so log() below is safe
  double uniform01(uint64_t counter) const {
    return (static_cast<double>(bits(counter) >> 11) + 1.0) * 0x1.0p-53;
  }

  double uniform(uint64_t counter, double lo, double hi) const {
    return lo + (hi - lo) * uniform01(counter);
  }

  // standard normal via Box-Muller on counters 2i and 2i+1
  double normal(uint64_t counter) const {
    const double u1 = uniform01(2 * counter);
    const double u2 = uniform01(2 * counter + 1);
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  // unbiased enough for desk-scale index draws (multiply-shift range map)
  uint64_t below(uint64_t counter, uint64_t n) const {
    return static_cast<uint64_t>(
        (static_cast<unsigned __int128>(bits(counter)) * n) >> 64);
  }

 private:
  uint64_t seed_;
};

// Sequential view over CounterRng for call sites that just want "next".
class RngStream {
 public:
  explicit RngStream(uint64_t seed) : rng_(seed) {}

  uint64_t next_bits() { return rng_.bits(counter_++); }
  double next_uniform01() { return rng_.uniform01(counter_++); }
  double next_uniform(double lo, double hi) {
    return rng_.uniform(counter_++, lo, hi);
  }
  double next_normal() {
    // two fresh counters; keeps normal draws disjoint from uniform draws
    const double u1 = rng_.uniform01(counter_++);
    const double u2 = rng_.uniform01(counter_++);
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }
  uint64_t next_below(uint64_t n) { return rng_.below(counter_++, n); }
  bool next_coin(double p) { return next_uniform01() <= p; }

 private:
  CounterRng rng_;
  uint64_t counter_ = 0;
};

// FNV-1a. Used to derive per-parameter seeds from names so that two models
// sharing a parameter name initialize it identically under the same master
// seed, regardless of what other parameters either model has.
inline uint64_t hash_string(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  CounterRng r(a);
  return r.bits(b);
}

}  // namespace voldeform
