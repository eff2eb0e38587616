#pragma once

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <mutex>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ipainter/noise.hpp"
#include "ipainter/schedule.hpp"
#include "ipainter/tensor.hpp"

namespace ipainter {

/// Mean DFT power per annulus of radial frequency |f| (cycles/image).
///
/// Band b covers (band_edges[b], band_edges[b+1]]; edges are linear from 0 to
/// the Nyquist radius min(H, W) / 2. Frequencies past Nyquist (the corners of
/// the DFT grid) are folded into the last band, so every non-DC coefficient
/// lands in exactly one band. Power is the unnormalised |F_k|^2, averaged over
/// channels and over the coefficients in the band: white noise of variance
/// s^2 has expected power s^2 * H * W in every band.
struct RadialSpectrum {
  std::vector<double> band_edges;
  std::vector<double> power;
  std::vector<std::size_t> counts;  // (channel, coefficient) pairs per band
  double dc_power = 0.0;            // summed over channels
  double total_power = 0.0;         // sum of |F_k|^2 over all k and channels

  int bands() const { return static_cast<int>(power.size()); }
  double nyquist() const { return band_edges.empty() ? 0.0 : band_edges.back(); }
  double band_center(int b) const { return 0.5 * (band_edges[b] + band_edges[b + 1]); }
};

namespace detail {

inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

// Unnormalised forward 2D DFT of one real plane.
inline std::vector<std::complex<double>> dft2(const double* plane, int height, int width) {
  const std::size_t n = static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  std::vector<std::complex<double>> buf(n);
  for (std::size_t i = 0; i < n; ++i) buf[i] = plane[i];
  auto* data = reinterpret_cast<fftw_complex*>(buf.data());
  fftw_plan plan;
  {
    std::lock_guard lock(fftw_planner_mutex());
    plan = fftw_plan_dft_2d(height, width, data, data, FFTW_FORWARD, FFTW_ESTIMATE);
  }
  fftw_execute(plan);
  {
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(plan);
  }
  return buf;
}

inline std::vector<std::complex<double>> idft2(std::vector<std::complex<double>> buf, int height, int width) {
  auto* data = reinterpret_cast<fftw_complex*>(buf.data());
  fftw_plan plan;
  {
    std::lock_guard lock(fftw_planner_mutex());
    plan = fftw_plan_dft_2d(height, width, data, data, FFTW_BACKWARD, FFTW_ESTIMATE);
  }
  fftw_execute(plan);
  {
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(plan);
  }
  const double scale = 1.0 / static_cast<double>(buf.size());
  for (auto& v : buf) v *= scale;
  return buf;
}

inline int signed_frequency(int k, int n) { return k <= n / 2 ? k : k - n; }

inline double radial_frequency(int ky, int kx, int height, int width) {
  return std::hypot(static_cast<double>(signed_frequency(ky, height)), static_cast<double>(signed_frequency(kx, width)));
}

inline void check_spectrum_args(Shape shape, int n_bands) {
  if (shape.height < 8 || shape.width < 8)
    throw std::invalid_argument("spectral analysis needs at least 8x8 images, got " + shape.str());
  if (n_bands < 4) throw std::invalid_argument("spectral analysis needs at least 4 bands");
}

inline RadialSpectrum empty_spectrum(Shape shape, int n_bands) {
  RadialSpectrum s;
  const double nyq = 0.5 * std::min(shape.height, shape.width);
  s.band_edges.resize(static_cast<std::size_t>(n_bands) + 1);
  for (int b = 0; b <= n_bands; ++b) s.band_edges[static_cast<std::size_t>(b)] = nyq * b / n_bands;
  s.power.assign(static_cast<std::size_t>(n_bands), 0.0);
  s.counts.assign(static_cast<std::size_t>(n_bands), 0);
  return s;
}

inline int band_of(double radius, double nyquist, int n_bands) {
  const int b = static_cast<int>(std::ceil(radius / nyquist * n_bands)) - 1;
  return std::clamp(b, 0, n_bands - 1);
}

}  // namespace detail

inline RadialSpectrum radial_power_spectrum(const Tensor& image, int n_bands = 16) {
  const Shape shape = image.shape();
  detail::check_spectrum_args(shape, n_bands);
  RadialSpectrum s = detail::empty_spectrum(shape, n_bands);
  const double nyq = s.nyquist();
  std::vector<double> sums(static_cast<std::size_t>(n_bands), 0.0);
  for (int c = 0; c < shape.channels; ++c) {
    const auto f = detail::dft2(image.values().data() + c * shape.plane(), shape.height, shape.width);
    for (int ky = 0; ky < shape.height; ++ky) {
      for (int kx = 0; kx < shape.width; ++kx) {
        const double p = std::norm(f[static_cast<std::size_t>(ky) * shape.width + kx]);
        s.total_power += p;
        if (ky == 0 && kx == 0) {
          s.dc_power += p;
          continue;
        }
        const int b = detail::band_of(detail::radial_frequency(ky, kx, shape.height, shape.width), nyq, n_bands);
        sums[static_cast<std::size_t>(b)] += p;
        ++s.counts[static_cast<std::size_t>(b)];
      }
    }
  }
  for (int b = 0; b < n_bands; ++b) {
    const auto i = static_cast<std::size_t>(b);
    s.power[i] = s.counts[i] ? sums[i] / static_cast<double>(s.counts[i]) : 0.0;
  }
  return s;
}

// Analytic expectation for i.i.d. N(0, variance) pixels: flat at variance * H * W.
inline RadialSpectrum expected_noise_spectrum(Shape shape, int n_bands = 16, double variance = 1.0) {
  detail::check_spectrum_args(shape, n_bands);
  RadialSpectrum s = detail::empty_spectrum(shape, n_bands);
  const double nyq = s.nyquist();
  const double level = variance * static_cast<double>(shape.plane());
  for (int ky = 0; ky < shape.height; ++ky)
    for (int kx = 0; kx < shape.width; ++kx) {
      if (ky == 0 && kx == 0) continue;
      const int b = detail::band_of(detail::radial_frequency(ky, kx, shape.height, shape.width), nyq, n_bands);
      s.counts[static_cast<std::size_t>(b)] += static_cast<std::size_t>(shape.channels);
    }
  std::fill(s.power.begin(), s.power.end(), level);
  s.dc_power = level * shape.channels;
  s.total_power = level * static_cast<double>(shape.size());
  return s;
}

// Band-wise average over `draws` sampled noise images; validates the analytic form.
inline RadialSpectrum sampled_noise_spectrum(Shape shape, int n_bands, GaussianNoiseSource& rng, int draws) {
  if (draws < 1) throw std::invalid_argument("sampled_noise_spectrum needs draws >= 1");
  RadialSpectrum acc = radial_power_spectrum(rng.normal(shape), n_bands);
  for (int d = 1; d < draws; ++d) {
    const RadialSpectrum s = radial_power_spectrum(rng.normal(shape), n_bands);
    for (int b = 0; b < n_bands; ++b) acc.power[static_cast<std::size_t>(b)] += s.power[static_cast<std::size_t>(b)];
    acc.dc_power += s.dc_power;
    acc.total_power += s.total_power;
  }
  for (double& p : acc.power) p /= draws;
  acc.dc_power /= draws;
  acc.total_power /= draws;
  return acc;
}

/// Per-band signal-to-noise ratio of x_t along the schedule:
/// snr(b, t) = ab_t P_x(b) / ((1 - ab_t) P_eps(b)). crossover[b] is the first
/// t with snr <= 1, or T + 1 when the band never drops to 1.
struct CorruptionProfile {
  int timesteps = 0;
  std::vector<double> band_edges;
  std::vector<std::vector<double>> snr;  // [band][t - 1]
  std::vector<int> crossover;

  int bands() const { return static_cast<int>(crossover.size()); }

  std::string to_csv() const {
    std::ostringstream out;
    out.precision(17);
    out << "band,t,snr\n";
    for (int b = 0; b < bands(); ++b)
      for (int t = 1; t <= timesteps; ++t) out << b << ',' << t << ',' << snr[b][t - 1] << '\n';
    return out.str();
  }

  std::string crossover_csv() const {
    std::ostringstream out;
    out << "band,f_lo,f_hi,crossover\n";
    for (int b = 0; b < bands(); ++b)
      out << b << ',' << band_edges[b] << ',' << band_edges[b + 1] << ',' << crossover[b] << '\n';
    return out.str();
  }

  nlohmann::json summary() const {
    nlohmann::json bands_json = nlohmann::json::array();
    for (int b = 0; b < bands(); ++b)
      bands_json.push_back({{"band", b}, {"f_lo", band_edges[b]}, {"f_hi", band_edges[b + 1]}, {"crossover", crossover[b]}});
    return {{"T", timesteps}, {"bands", bands_json}};
  }

  // Text heat map: one row per band, one column per `stride` timesteps.
  std::string heat_table(int stride = 10) const {
    static constexpr char kRamp[] = " .:-=+*#%@";
    std::ostringstream out;
    out << "band   f_lo..f_hi   cross | log10(snr) from t=1 (left) to t=" << timesteps << " (right), '@' high\n";
    for (int b = 0; b < bands(); ++b) {
      char head[64];
      std::snprintf(head, sizeof head, "%4d %6.2f..%-6.2f %5d | ", b, band_edges[b], band_edges[b + 1], crossover[b]);
      out << head;
      for (int t = 1; t <= timesteps; t += stride) {
        const double v = snr[b][t - 1];
        const double l = v > 0 ? std::log10(v) : -99.0;
        const int level = std::clamp(static_cast<int>(std::floor((l + 3.0) / 7.0 * 9.0 + 0.5)), 0, 9);
        out << kRamp[level];
      }
      out << '\n';
    }
    return out.str();
  }
};

inline CorruptionProfile corruption_profile(const RadialSpectrum& signal, const Schedule& schedule,
                                            const RadialSpectrum& noise) {
  if (signal.bands() != noise.bands() || signal.band_edges != noise.band_edges)
    throw std::invalid_argument("corruption_profile: signal and noise band grids differ");
  CorruptionProfile prof;
  prof.timesteps = schedule.timesteps();
  prof.band_edges = signal.band_edges;
  prof.snr.resize(static_cast<std::size_t>(signal.bands()));
  prof.crossover.resize(static_cast<std::size_t>(signal.bands()));
  for (int b = 0; b < signal.bands(); ++b) {
    const double pe = noise.power[static_cast<std::size_t>(b)];
    if (!(pe > 0.0)) throw std::invalid_argument("corruption_profile: zero noise power in band " + std::to_string(b));
    const double px = signal.power[static_cast<std::size_t>(b)];
    auto& row = prof.snr[static_cast<std::size_t>(b)];
    row.resize(static_cast<std::size_t>(prof.timesteps));
    int cross = prof.timesteps + 1;
    for (int t = 1; t <= prof.timesteps; ++t) {
      const double ab = schedule.alpha_bar(t);
      row[static_cast<std::size_t>(t - 1)] = ab * px / ((1.0 - ab) * pe);
      if (cross > prof.timesteps && row[static_cast<std::size_t>(t - 1)] <= 1.0) cross = t;
    }
    prof.crossover[static_cast<std::size_t>(b)] = cross;
  }
  return prof;
}

// Fraction of non-DC power at radial frequency above cutoff_fraction * Nyquist.
inline double highband_energy(const Tensor& image, double cutoff_fraction) {
  if (!(cutoff_fraction > 0.0 && cutoff_fraction < 1.0))
    throw std::invalid_argument("highband_energy: cutoff_fraction must be in (0, 1)");
  const Shape shape = image.shape();
  const double cutoff = cutoff_fraction * 0.5 * std::min(shape.height, shape.width);
  double high = 0.0;
  double total = 0.0;
  for (int c = 0; c < shape.channels; ++c) {
    const auto f = detail::dft2(image.values().data() + c * shape.plane(), shape.height, shape.width);
    for (int ky = 0; ky < shape.height; ++ky)
      for (int kx = 0; kx < shape.width; ++kx) {
        if (ky == 0 && kx == 0) continue;
        const double p = std::norm(f[static_cast<std::size_t>(ky) * shape.width + kx]);
        total += p;
        if (detail::radial_frequency(ky, kx, shape.height, shape.width) > cutoff) high += p;
      }
  }
  return total > 0.0 ? high / total : 0.0;
}

// Single-channel test image with radial power ~ |f|^-exponent and random phases.
inline Tensor power_law_image(int height, int width, double exponent, GaussianNoiseSource& rng) {
  std::vector<std::complex<double>> spec(static_cast<std::size_t>(height) * width);
  for (int ky = 0; ky < height; ++ky)
    for (int kx = 0; kx < width; ++kx) {
      if (ky == 0 && kx == 0) continue;
      const double r = detail::radial_frequency(ky, kx, height, width);
      const double amp = std::pow(r, -0.5 * exponent);
      const double phase = 2.0 * std::numbers::pi * rng.uniform();
      spec[static_cast<std::size_t>(ky) * width + kx] = std::polar(amp, phase);
    }
  const auto img = detail::idft2(std::move(spec), height, width);
  Tensor out(Shape{1, height, width});
  double peak = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = img[i].real();
    peak = std::max(peak, std::abs(out[i]));
  }
  if (peak > 0.0)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] /= peak;
  return out;
}

}  // namespace ipainter
