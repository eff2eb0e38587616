#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>

#include "ipainter/tensor.hpp"

namespace ipainter {

/// Seeded source of i.i.d. standard normal variates.
///
/// The engine is std::mt19937_64 initialised through std::seed_seq from the
/// 32-bit halves of (seed, stream, substream); both are fully specified by the
/// standard, so sequences are identical across platforms. Normals come from the
/// Box-Muller transform over 53-bit uniforms in (0, 1], consumed in pairs.
class GaussianNoiseSource {
 public:
  explicit GaussianNoiseSource(std::uint64_t seed, std::uint64_t stream = 0, std::uint64_t substream = 0)
      : seed_(seed), stream_(stream), substream_(substream) {
    std::seed_seq seq{lo(seed), hi(seed), lo(stream), hi(stream), lo(substream), hi(substream)};
    engine_.seed(seq);
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t substream_id() const { return substream_; }

  // Independent source sharing (seed, stream); k indexes the child.
  GaussianNoiseSource substream(std::uint64_t k) const { return GaussianNoiseSource(seed_, stream_, k + 1); }

  // Uniform in (0, 1].
  double uniform() { return (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53; }

  // Uniform integer in [0, n); n > 0.
  // Rejection sampling keeps this portable, unlike std::uniform_int_distribution.
  std::uint64_t uniform_index(std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v;
    do {
      v = engine_();
    } while (v >= limit);
    return v % n;
  }

  double next() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  void fill(std::span<double> out) {
    for (double& v : out) v = next();
  }

  Tensor normal(Shape shape) {
    Tensor t(shape);
    fill(t.values());
    return t;
  }

 private:
  static std::uint32_t lo(std::uint64_t v) { return static_cast<std::uint32_t>(v & 0xffffffffu); }
  static std::uint32_t hi(std::uint64_t v) { return static_cast<std::uint32_t>(v >> 32); }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t substream_;
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace ipainter
