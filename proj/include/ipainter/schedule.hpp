#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ipainter/digest.hpp"
#include "ipainter/tensor.hpp"

namespace ipainter {

/// Fixed forward-process noise schedule.
///
/// Timesteps are 1-based: beta(1) .. beta(T). Timestep 0 denotes the clean
/// image, so alpha_bar(0) == 1. The cumulative product is accumulated in
/// order, which makes alpha_bar(t) == alpha_bar(t - 1) * alpha(t) hold
/// exactly in floating point. Immutable once built.
class Schedule {
 public:
  static constexpr double kBetaStart = 1e-4;
  static constexpr double kBetaEnd = 0.02;

  // beta_1 = 1e-4 and beta_T = 0.02 independent of T.
  static Schedule linear(int timesteps, double beta_start = kBetaStart, double beta_end = kBetaEnd) {
    if (timesteps < 2) throw std::invalid_argument("linear schedule needs T >= 2, got " + std::to_string(timesteps));
    std::vector<double> betas(static_cast<std::size_t>(timesteps));
    const double span = beta_end - beta_start;
    for (int i = 0; i < timesteps; ++i)
      betas[static_cast<std::size_t>(i)] = beta_start + span * static_cast<double>(i) / (timesteps - 1);
    betas.back() = beta_end;
    return from_betas(std::move(betas));
  }

  static Schedule from_betas(std::vector<double> betas) {
    if (betas.empty()) throw std::invalid_argument("schedule needs at least one beta");
    for (std::size_t i = 0; i < betas.size(); ++i) {
      if (!(betas[i] > 0.0 && betas[i] < 1.0))
        throw std::invalid_argument("beta[" + std::to_string(i + 1) + "] outside (0, 1)");
    }
    Schedule s;
    s.beta_ = std::move(betas);
    s.alpha_.resize(s.beta_.size());
    s.alpha_bar_.resize(s.beta_.size() + 1);
    s.alpha_bar_[0] = 1.0;
    for (std::size_t i = 0; i < s.beta_.size(); ++i) {
      s.alpha_[i] = 1.0 - s.beta_[i];
      s.alpha_bar_[i + 1] = s.alpha_bar_[i] * s.alpha_[i];
    }
    return s;
  }

  int timesteps() const { return static_cast<int>(beta_.size()); }

  double beta(int t) const { return beta_[step_index(t)]; }
  double alpha(int t) const { return alpha_[step_index(t)]; }
  double alpha_bar(int t) const {
    if (t < 0 || t > timesteps()) throw std::invalid_argument("timestep " + std::to_string(t) + " out of [0, T]");
    return alpha_bar_[static_cast<std::size_t>(t)];
  }
  // Posterior variance of q(x_{t-1} | x_t, x_0).
  double beta_tilde(int t) const { return (1.0 - alpha_bar(t - 1)) / (1.0 - alpha_bar(t)) * beta(t); }

  const std::vector<double>& betas() const { return beta_; }

  nlohmann::json to_json() const { return {{"T", timesteps()}, {"beta", beta_}}; }

  static Schedule from_json(const nlohmann::json& j) {
    auto betas = j.at("beta").get<std::vector<double>>();
    if (j.contains("T") && j.at("T").get<int>() != static_cast<int>(betas.size()))
      throw std::invalid_argument("schedule JSON: T does not match beta length");
    return from_betas(std::move(betas));
  }

  std::string digest() const { return sha256_hex(to_json().dump()); }

 private:
  Schedule() = default;

  std::size_t step_index(int t) const {
    if (t < 1 || t > timesteps())
      throw std::invalid_argument("timestep " + std::to_string(t) + " out of [1, " + std::to_string(timesteps()) + "]");
    return static_cast<std::size_t>(t - 1);
  }

  std::vector<double> beta_;
  std::vector<double> alpha_;
  std::vector<double> alpha_bar_;  // index 0 holds alpha_bar(0) = 1
};

namespace detail {

inline Tensor affine_combine(const Tensor& x, double a, const Tensor& noise, double b, const char* what) {
  require_same_shape(x, noise, what);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i] + b * noise[i];
  return out;
}

}  // namespace detail

// x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) noise
inline Tensor forward_step(const Schedule& schedule, const Tensor& x, int t, const Tensor& noise) {
  const double beta = schedule.beta(t);
  return detail::affine_combine(x, std::sqrt(1.0 - beta), noise, std::sqrt(beta), "forward_step");
}

// x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) noise; t = 0 returns x0.
inline Tensor forward_jump(const Schedule& schedule, const Tensor& x0, int t, const Tensor& noise) {
  const double ab = schedule.alpha_bar(t);
  return detail::affine_combine(x0, std::sqrt(ab), noise, std::sqrt(1.0 - ab), "forward_jump");
}

// Accumulated jump from level s to level t > s in one draw.
inline Tensor forward_rejump(const Schedule& schedule, const Tensor& x_s, int s, int t, const Tensor& noise) {
  if (s < 0 || s >= t) throw std::invalid_argument("forward_rejump needs 0 <= s < t");
  const double ratio = schedule.alpha_bar(t) / schedule.alpha_bar(s);
  return detail::affine_combine(x_s, std::sqrt(ratio), noise, std::sqrt(1.0 - ratio), "forward_rejump");
}

}  // namespace ipainter
