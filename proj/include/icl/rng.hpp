#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

namespace icl {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// 64-bit FNV-1a over a byte string.
constexpr std::uint64_t fnv1a64(std::string_view bytes,
                                std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Seeded xoshiro256** generator with keyed sub-streams.
///
/// Every generator carries a 64-bit key. `derive(tag)` builds a child whose key
/// depends only on the parent key and the tag, never on how many numbers the
/// parent has produced, so sub-streams can be addressed by name or index
/// (task m of the pool, batch t of training, chain c of SGLD) without replaying
/// anything.
///
/// Normals come from the Box-Muller transform on 53-bit uniforms; the second
/// value of each pair is cached and is part of the generator state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  Rng derive(std::uint64_t tag) const;
  Rng derive(std::string_view tag) const { return derive(fnv1a64(tag)); }

  std::uint64_t key() const { return key_; }

  std::uint64_t next_u64();
  /// Uniform on [0, 1).
  double uniform();
  /// Uniform integer on [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);
  /// Standard normal.
  double normal();

  struct State {
    std::uint64_t key = 0;
    std::array<std::uint64_t, 4> s{};
    bool has_spare = false;
    double spare = 0.0;
  };
  State state() const;
  static Rng from_state(const State& st);

  friend bool operator==(const Rng& a, const Rng& b);

 private:
  Rng() = default;

  std::uint64_t key_ = 0;
  std::array<std::uint64_t, 4> s_{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace icl
