#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <vector>

#include "ipainter/noise.hpp"
#include "ipainter/schedule.hpp"
#include "ipainter/spectral.hpp"
#include "test_support.hpp"

using namespace ipainter;

namespace {

// Circular 3x3 binomial blur; its transfer function is (1 + cos wx)(1 + cos wy) / 4.
Tensor blur(const Tensor& img) {
  const auto& s = img.shape();
  Tensor out(s);
  const double k[3] = {0.25, 0.5, 0.25};
  for (int c = 0; c < s.channels; ++c)
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x) {
        double acc = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx)
            acc += k[dy + 1] * k[dx + 1] * img.at(c, (y + dy + s.height) % s.height, (x + dx + s.width) % s.width);
        out.at(c, y, x) = acc;
      }
  return out;
}

}  // namespace

TEST(Spectral, FftMatchesDirectDft) {
  GaussianNoiseSource rng(1);
  const Tensor img = rng.normal(Shape{2, 12, 10});
  for (int c = 0; c < 2; ++c) {
    const auto fast = detail::dft2(img.values().data() + c * img.shape().plane(), 12, 10);
    const auto slow = test::direct_dft2(img, c);
    for (std::size_t i = 0; i < fast.size(); ++i) EXPECT_LT(std::abs(fast[i] - slow[i]), 1e-9);
  }
}

TEST(Spectral, Parseval) {
  GaussianNoiseSource rng(2);
  for (const Shape shape : {Shape{1, 16, 16}, Shape{3, 9, 14}, Shape{1, 32, 20}}) {
    Tensor img = rng.normal(shape);
    for (double& v : img.values()) v += 0.3;
    const auto s = radial_power_spectrum(img, 8);
    double spatial = 0;
    for (double v : img.values()) spatial += v * v;
    spatial *= static_cast<double>(shape.plane());
    double banded = s.dc_power;
    for (int b = 0; b < s.bands(); ++b) banded += s.power[b] * static_cast<double>(s.counts[b]);
    EXPECT_NEAR(banded / spatial, 1.0, 1e-6) << shape.str();
    EXPECT_NEAR(s.total_power / spatial, 1.0, 1e-6);
  }
}

TEST(Spectral, ConstantImageHasOnlyDc) {
  const auto s = radial_power_spectrum(Tensor(Shape{1, 16, 16}, 0.4));
  EXPECT_NEAR(s.dc_power, std::pow(0.4 * 256, 2), 1e-9);
  for (double p : s.power) EXPECT_NEAR(p, 0.0, 1e-18);
}

TEST(Spectral, SinusoidConcentratesInOneBand) {
  Tensor img(Shape{1, 32, 32});
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) img.at(0, y, x) = std::cos(2 * std::numbers::pi * 5 * x / 32.0);
  const auto s = radial_power_spectrum(img, 16);
  double total = 0;
  for (int b = 0; b < 16; ++b) total += s.power[b] * s.counts[b];
  int hit = -1;
  for (int b = 0; b < 16; ++b)
    if (s.band_edges[b] < 5 && 5 <= s.band_edges[b + 1]) hit = b;
  ASSERT_GE(hit, 0);
  EXPECT_GE(s.power[hit] * s.counts[hit] / total, 0.9);
}

TEST(Spectral, WhiteNoiseIsFlat) {
  const Shape shape{1, 32, 32};
  GaussianNoiseSource rng(3);
  const auto sampled = sampled_noise_spectrum(shape, 16, rng, 100);
  const auto expected = expected_noise_spectrum(shape, 16);
  for (int b = 0; b < 16; ++b) {
    EXPECT_NEAR(sampled.power[b] / expected.power[b], 1.0, 0.2) << b;
    EXPECT_EQ(sampled.counts[b], expected.counts[b]);
  }
  const double mean = std::accumulate(sampled.power.begin(), sampled.power.end(), 0.0) / 16;
  for (double p : sampled.power) EXPECT_NEAR(p / mean, 1.0, 0.2);
}

TEST(Spectral, Errors) {
  EXPECT_THROW(radial_power_spectrum(Tensor(Shape{1, 7, 16})), std::invalid_argument);
  EXPECT_THROW(radial_power_spectrum(Tensor(Shape{1, 16, 16}), 3), std::invalid_argument);
  EXPECT_THROW(highband_energy(Tensor(Shape{1, 16, 16}), 0.0), std::invalid_argument);
  EXPECT_THROW(highband_energy(Tensor(Shape{1, 16, 16}), 1.0), std::invalid_argument);
  const auto sig = radial_power_spectrum(Tensor(Shape{1, 16, 16}, 1.0), 8);
  auto zero = expected_noise_spectrum(Shape{1, 16, 16}, 8);
  zero.power[3] = 0.0;
  EXPECT_THROW(corruption_profile(sig, Schedule::linear(50), zero), std::invalid_argument);
  EXPECT_THROW(corruption_profile(sig, Schedule::linear(50), expected_noise_spectrum(Shape{1, 16, 16}, 9)),
               std::invalid_argument);
}

TEST(CorruptionProfile, SnrDecreasesAndCrossoverOrders) {
  GaussianNoiseSource rng(4);
  const Tensor img = power_law_image(64, 64, 2.0, rng);
  const auto schedule = Schedule::linear(250);
  const auto prof = corruption_profile(radial_power_spectrum(img), schedule, expected_noise_spectrum(img.shape()));
  for (int b = 0; b < prof.bands(); ++b)
    for (int t = 2; t <= 250; ++t) EXPECT_LT(prof.snr[b][t - 1], prof.snr[b][t - 2]);
  for (int b = 1; b < prof.bands(); ++b) EXPECT_LE(prof.crossover[b], prof.crossover[b - 1]);
  EXPECT_LT(prof.crossover.back(), prof.crossover.front());
}

TEST(CorruptionProfile, EqualPowerCrossesAtHalfAlphaBar) {
  const Shape shape{1, 16, 16};
  const auto noise = expected_noise_spectrum(shape, 8);
  const auto schedule = Schedule::linear(250);
  const auto prof = corruption_profile(noise, schedule, noise);
  int expected = 251;
  for (int t = 1; t <= 250; ++t)
    if (schedule.alpha_bar(t) <= 0.5) {
      expected = t;
      break;
    }
  for (int c : prof.crossover) EXPECT_EQ(c, expected);
}

TEST(CorruptionProfile, VanishesAtEndOfLongSchedule) {
  const Shape shape{1, 16, 16};
  const auto noise = expected_noise_spectrum(shape, 8);
  const auto prof = corruption_profile(noise, Schedule::linear(1000), noise);
  for (const auto& row : prof.snr) {
    EXPECT_GT(row.front(), 1000.0);
    EXPECT_LT(row.back(), 1e-3);
  }
}

TEST(CorruptionProfile, Exports) {
  const Shape shape{1, 16, 16};
  const auto noise = expected_noise_spectrum(shape, 4);
  const auto prof = corruption_profile(noise, Schedule::linear(20), noise);
  const auto csv = prof.to_csv();
  EXPECT_EQ(csv.rfind("band,t,snr\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 4 * 20);
  const auto cross = prof.crossover_csv();
  EXPECT_EQ(std::count(cross.begin(), cross.end(), '\n'), 5);
  EXPECT_EQ(prof.summary()["bands"].size(), 4u);
  EXPECT_FALSE(prof.heat_table(5).empty());
}

TEST(Highband, ConstantIsZero) { EXPECT_EQ(highband_energy(Tensor(Shape{3, 16, 16}, 0.2), 0.5), 0.0); }

TEST(Highband, WhiteNoiseMatchesAreaFraction) {
  const int n = 32;
  int above = 0;
  for (int ky = 0; ky < n; ++ky)
    for (int kx = 0; kx < n; ++kx) {
      if (!ky && !kx) continue;
      const int fy = ky <= n / 2 ? ky : ky - n, fx = kx <= n / 2 ? kx : kx - n;
      if (std::hypot(fy, fx) > 0.5 * n / 2) ++above;
    }
  const double area = static_cast<double>(above) / (n * n - 1);
  GaussianNoiseSource rng(5);
  double mean = 0;
  for (int d = 0; d < 100; ++d) mean += highband_energy(rng.normal(Shape{1, n, n}), 0.5) / 100;
  EXPECT_NEAR(mean, area, 0.1 * area);
}

TEST(Highband, BlurContracts) {
  GaussianNoiseSource rng(6);
  for (int i = 0; i < 20; ++i) {
    Tensor img = i % 2 ? power_law_image(32, 32, 1.0 + 0.1 * i, rng) : rng.normal(Shape{1, 32, 32});
    EXPECT_LT(highband_energy(blur(img), 0.5), highband_energy(img, 0.5)) << i;
  }
}
