#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>
#include <vector>

namespace sheafdmfl {

/// splitmix64 finalizer; used both as the stream-derivation hash and to
/// expand one seed into decorrelated child seeds.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Deterministic seed derivation: hash the base seed with a tag sequence.
/// The same (base, tags) always yields the same child seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t s = splitmix64(base);
  for (std::uint64_t t : tags) s = splitmix64(s ^ (t + 0x9e3779b97f4a7c15ull));
  return s;
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a) {
  return derive_seed(base, {a});
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
  return derive_seed(base, {a, b});
}

/// mt19937_64 driven generator with pinned output mappings. The standard
/// distributions are implementation-defined, so uniforms and normals are
/// produced here with fixed algorithms (53-bit mantissa scaling and
/// Box-Muller) to keep every stream reproducible bit for bit.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t raw() { return gen_(); }

  /// Uniform on [0, 1).
  double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  /// Uniform on (0, 1]; used where log() must not see zero.
  double uniform01_open_below() {
    return (static_cast<double>(gen_() >> 11) + 1.0) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller, one spare cached per pair.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform01_open_below();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) { return gen_() % n; }

  /// Fisher-Yates shuffle with pinned index draws.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace sheafdmfl
