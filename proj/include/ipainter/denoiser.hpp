#pragma once

#include <optional>
#include <stdexcept>
#include <string>

#include "ipainter/tensor.hpp"

namespace ipainter {

// Selects the reverse-step variance: beta_t, or the posterior variance beta~_t.
enum class VarianceMode { fixed_beta, fixed_beta_tilde };

inline std::string to_string(VarianceMode mode) {
  return mode == VarianceMode::fixed_beta ? "fixed_beta" : "fixed_beta_tilde";
}

inline VarianceMode parse_variance_mode(const std::string& s) {
  if (s == "fixed_beta" || s == "beta") return VarianceMode::fixed_beta;
  if (s == "fixed_beta_tilde" || s == "beta_tilde") return VarianceMode::fixed_beta_tilde;
  throw std::invalid_argument("unknown variance mode '" + s + "'");
}

struct EpsilonPrediction {
  Tensor epsilon;
  VarianceMode variance_mode = VarianceMode::fixed_beta_tilde;
};

/// Noise predictor eps_theta(x_t, t).
///
/// Implementations are immutable after construction: predict() is a pure
/// function of its arguments and may be called from several threads.
class Denoiser {
 public:
  explicit Denoiser(VarianceMode mode = VarianceMode::fixed_beta_tilde) : variance_mode_(mode) {}
  virtual ~Denoiser() = default;

  virtual EpsilonPrediction predict(const Tensor& x_t, int t) const = 0;

  // Content digest of the model parameters, for reproducibility manifests.
  virtual std::string digest() const = 0;
  virtual std::string kind() const = 0;

  // Shape the model was built for, if it is tied to one.
  virtual std::optional<Shape> native_shape() const { return std::nullopt; }

  VarianceMode variance_mode() const { return variance_mode_; }

 private:
  VarianceMode variance_mode_;
};

}  // namespace ipainter
