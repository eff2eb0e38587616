#pragma once

#include <cmath>
#include <complex>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>
#include <sys/wait.h>
#include <string>
#include <vector>

#include "ipainter/denoiser.hpp"
#include "ipainter/tensor.hpp"

namespace ipainter::test {

struct Moments {
  double mean = 0.0;
  double variance = 0.0;  // unbiased
  std::size_t n = 0;
  double standard_error() const { return std::sqrt(variance / static_cast<double>(n)); }
};

inline Moments moments(const std::vector<double>& xs) {
  Moments m;
  m.n = xs.size();
  for (double x : xs) m.mean += x;
  m.mean /= static_cast<double>(m.n);
  for (double x : xs) m.variance += (x - m.mean) * (x - m.mean);
  m.variance /= static_cast<double>(m.n - 1);
  return m;
}

// Brute-force 2D DFT of one plane; independent of FFTW.
inline std::vector<std::complex<double>> direct_dft2(const Tensor& image, int channel) {
  const int h = image.shape().height;
  const int w = image.shape().width;
  std::vector<std::complex<double>> out(static_cast<std::size_t>(h) * w);
  for (int ky = 0; ky < h; ++ky)
    for (int kx = 0; kx < w; ++kx) {
      std::complex<double> acc = 0.0;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double phase = -2.0 * std::numbers::pi * (static_cast<double>(ky) * y / h + static_cast<double>(kx) * x / w);
          acc += image.at(channel, y, x) * std::polar(1.0, phase);
        }
      out[static_cast<std::size_t>(ky) * w + kx] = acc;
    }
  return out;
}

// Denoiser that returns a fixed epsilon regardless of input.
class FixedEpsilon final : public Denoiser {
 public:
  explicit FixedEpsilon(Tensor eps, VarianceMode mode = VarianceMode::fixed_beta_tilde)
      : Denoiser(mode), eps_(std::move(eps)) {}
  EpsilonPrediction predict(const Tensor&, int) const override { return {eps_, variance_mode()}; }
  std::string digest() const override { return "fixed"; }
  std::string kind() const override { return "fixed"; }

 private:
  Tensor eps_;
};

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("ipainter_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

struct CommandResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

// Runs a shell command, capturing both streams through files in `dir`.
inline CommandResult run_command(const std::string& command, const std::filesystem::path& dir) {
  const auto out = dir / "stdout.txt";
  const auto err = dir / "stderr.txt";
  const int status = std::system((command + " >" + out.string() + " 2>" + err.string()).c_str());
  CommandResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_text(out);
  r.err = read_text(err);
  return r;
}

}  // namespace ipainter::test
