#include "icl/rng.hpp"

#include <cmath>
#include <numbers>

namespace icl {
namespace {

constexpr std::uint64_t rotl(std::uint64_t x, int k) {
  return (x << k) | (x >> (64 - k));
}

}  // namespace

Rng::Rng(std::uint64_t seed) : key_(mix64(seed ^ 0x6a09e667f3bcc908ULL)) {
  std::uint64_t z = key_;
  for (auto& word : s_) {
    z = mix64(z);
    word = z;
  }
}

Rng Rng::derive(std::uint64_t tag) const {
  Rng child;
  child.key_ = mix64(key_ ^ mix64(tag + 0x3c6ef372fe94f82bULL));
  std::uint64_t z = child.key_;
  for (auto& word : child.s_) {
    z = mix64(z);
    word = z;
  }
  return child;
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::below(std::uint64_t n) {
  // Rejection on the top of the range keeps the draw exactly uniform.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x = next_u64();
  while (x >= limit) x = next_u64();
  return x % n;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // 1 - u lies in (0, 1], so the logarithm is finite.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

Rng::State Rng::state() const { return {key_, s_, has_spare_, spare_}; }

Rng Rng::from_state(const State& st) {
  Rng r;
  r.key_ = st.key;
  r.s_ = st.s;
  r.has_spare_ = st.has_spare;
  r.spare_ = st.spare;
  return r;
}

bool operator==(const Rng& a, const Rng& b) {
  return a.key_ == b.key_ && a.s_ == b.s_ && a.has_spare_ == b.has_spare_ &&
         (!a.has_spare_ || a.spare_ == b.spare_);
}

}  // namespace icl
