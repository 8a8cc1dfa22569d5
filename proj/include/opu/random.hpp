// Deterministic random source: xoshiro256++ seeded through splitmix64.
// Same seed gives the identical sample stream on a given platform. A state is
// single-owner; concurrent sampling requires independently split streams.
#pragma once

#include <cmath>
#include <cstdint>

namespace opu {

namespace detail {
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}
inline uint64_t rotl64(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
}  // namespace detail

class RngState {
 public:
  explicit RngState(uint64_t seed) : seed_(seed) {
    uint64_t sm = seed;
    for (auto& w : s_) w = detail::splitmix64(sm);
  }

  uint64_t seed() const { return seed_; }

  uint64_t next_u64() {
    const uint64_t result = detail::rotl64(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = detail::rotl64(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in (0, 1]; safe under log().
  double uniform_pos() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

  double exponential() { return -std::log(uniform_pos()); }

  // Standard normal via Box-Muller; the paired draw is cached.
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    const double r = std::sqrt(-2.0 * std::log(uniform_pos()));
    const double t = 6.283185307179586476925286766559 * uniform();
    cached_ = r * std::sin(t);
    have_cached_ = true;
    return r * std::cos(t);
  }

  // Derive an independent stream. Streams split from the same state with
  // distinct ids never share output sequences.
  RngState split(uint64_t stream_id) const {
    uint64_t mix = seed_ ^ (0x9e3779b97f4a7c15ULL * (stream_id + 0x632be59bd9b4e019ULL));
    mix = detail::splitmix64(mix);
    return RngState(mix);
  }

 private:
  uint64_t s_[4];
  uint64_t seed_;
  bool have_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace opu
