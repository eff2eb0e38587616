#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ipainter/denoiser.hpp"
#include "ipainter/digest.hpp"
#include "ipainter/schedule.hpp"

namespace ipainter {

/// Gaussian mixture prior over clean data x_0.
///
/// Components are isotropic N(mean_k, sigma_k^2 I) unless `covariances` is
/// non-empty, in which case every component k uses the full matrix
/// covariances[k]. Isotropic means of length 1 broadcast over any dimension.
struct GmmModel {
  std::vector<double> weights;
  std::vector<std::vector<double>> means;
  std::vector<double> sigma;
  std::vector<Eigen::MatrixXd> covariances;

  std::size_t components() const { return weights.size(); }
  std::size_t dimension() const { return means.empty() ? 0 : means.front().size(); }
  bool full_covariance() const { return !covariances.empty(); }

  void validate() const {
    const std::size_t k = weights.size();
    if (k == 0) throw std::invalid_argument("GMM needs at least one component");
    if (means.size() != k) throw std::invalid_argument("GMM: means count does not match weights");
    double total = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0)) throw std::invalid_argument("GMM: negative weight");
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-12) throw std::invalid_argument("GMM: weights must sum to 1");
    const std::size_t d = dimension();
    if (d == 0) throw std::invalid_argument("GMM: empty mean");
    for (const auto& m : means)
      if (m.size() != d) throw std::invalid_argument("GMM: component means differ in length");
    if (full_covariance()) {
      if (covariances.size() != k) throw std::invalid_argument("GMM: covariances count does not match weights");
      for (const auto& c : covariances) {
        if (c.rows() != static_cast<Eigen::Index>(d) || c.cols() != static_cast<Eigen::Index>(d))
          throw std::invalid_argument("GMM: covariance must be d x d");
        if (!c.isApprox(c.transpose(), 1e-12)) throw std::invalid_argument("GMM: covariance not symmetric");
        if (Eigen::LLT<Eigen::MatrixXd>(c).info() != Eigen::Success)
          throw std::invalid_argument("GMM: covariance not positive definite");
      }
    } else {
      if (sigma.size() != k) throw std::invalid_argument("GMM: sigma count does not match weights");
      for (double s : sigma)
        if (!(s > 0.0)) throw std::invalid_argument("GMM: sigma must be positive");
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"weights", weights}, {"means", means}};
    if (full_covariance()) {
      nlohmann::json covs = nlohmann::json::array();
      for (const auto& c : covariances) {
        nlohmann::json rows = nlohmann::json::array();
        for (Eigen::Index r = 0; r < c.rows(); ++r) {
          std::vector<double> row(static_cast<std::size_t>(c.cols()));
          for (Eigen::Index col = 0; col < c.cols(); ++col) row[static_cast<std::size_t>(col)] = c(r, col);
          rows.push_back(row);
        }
        covs.push_back(rows);
      }
      j["covariances"] = covs;
    } else {
      j["sigma"] = sigma;
    }
    return j;
  }

  static GmmModel from_json(const nlohmann::json& j) {
    GmmModel m;
    m.weights = j.at("weights").get<std::vector<double>>();
    m.means = j.at("means").get<std::vector<std::vector<double>>>();
    if (j.contains("sigma")) m.sigma = j.at("sigma").get<std::vector<double>>();
    if (j.contains("covariances")) {
      for (const auto& cj : j.at("covariances")) {
        const auto rows = cj.get<std::vector<std::vector<double>>>();
        Eigen::MatrixXd c(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.size()));
        for (std::size_t r = 0; r < rows.size(); ++r) {
          if (rows[r].size() != rows.size()) throw std::invalid_argument("GMM: covariance must be square");
          for (std::size_t col = 0; col < rows.size(); ++col)
            c(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(col)) = rows[r][col];
        }
        m.covariances.push_back(std::move(c));
      }
    }
    m.validate();
    return m;
  }

  // Standard normal in `d` dimensions (d = 1 broadcasts).
  static GmmModel standard_normal(std::size_t d = 1) {
    return GmmModel{{1.0}, {std::vector<double>(d, 0.0)}, {1.0}, {}};
  }
};

namespace detail {

// Per-timestep quantities of the noisy marginal of each component:
// N(sqrt(ab) mu_k, C_k) with C_k = ab Sigma_k + (1 - ab) I.
struct GmmStepTerms {
  double sqrt_ab = 1.0;
  // isotropic
  std::vector<double> var;   // C_k scalar
  std::vector<double> gain;  // sqrt(ab) sigma_k^2 / C_k
  // full covariance, column-major d x d per component
  std::vector<std::vector<double>> precision;  // C_k^{-1}
  std::vector<std::vector<double>> gain_matrix;  // sqrt(ab) Sigma_k C_k^{-1}
  std::vector<double> log_det;
};

inline GmmStepTerms gmm_step_terms(const GmmModel& model, double alpha_bar) {
  GmmStepTerms terms;
  terms.sqrt_ab = std::sqrt(alpha_bar);
  const std::size_t k = model.components();
  if (!model.full_covariance()) {
    terms.var.resize(k);
    terms.gain.resize(k);
    for (std::size_t c = 0; c < k; ++c) {
      const double s2 = model.sigma[c] * model.sigma[c];
      terms.var[c] = alpha_bar * s2 + (1.0 - alpha_bar);
      terms.gain[c] = terms.sqrt_ab * s2 / terms.var[c];
    }
    return terms;
  }
  const auto d = static_cast<Eigen::Index>(model.dimension());
  for (std::size_t c = 0; c < k; ++c) {
    const Eigen::MatrixXd& sigma = model.covariances[c];
    const Eigen::MatrixXd cov = alpha_bar * sigma + (1.0 - alpha_bar) * Eigen::MatrixXd::Identity(d, d);
    const Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success) throw std::runtime_error("GMM: noisy covariance not positive definite");
    const Eigen::MatrixXd precision = llt.solve(Eigen::MatrixXd::Identity(d, d));
    const Eigen::MatrixXd gain = terms.sqrt_ab * sigma * precision;
    double log_det = 0.0;
    for (Eigen::Index i = 0; i < d; ++i) log_det += 2.0 * std::log(llt.matrixL()(i, i));
    terms.precision.emplace_back(precision.data(), precision.data() + precision.size());
    terms.gain_matrix.emplace_back(gain.data(), gain.data() + gain.size());
    terms.log_det.push_back(log_det);
  }
  return terms;
}

inline void gmm_posterior_mean_into(const GmmModel& model, const GmmStepTerms& terms, std::span<const double> x,
                                    std::span<double> out) {
  const std::size_t n = x.size();
  const std::size_t k = model.components();
  const std::size_t d = model.dimension();
  if (d != n && !(d == 1 && !model.full_covariance()))
    throw std::invalid_argument("GMM dimension " + std::to_string(d) + " does not match input size " +
                                std::to_string(n));

  auto mean_at = [&](std::size_t c, std::size_t i) { return d == 1 ? model.means[c][0] : model.means[c][i]; };

  std::vector<double> log_resp(k, -std::numeric_limits<double>::infinity());
  std::vector<double> r(n);
  std::vector<double> tmp(n);
  for (std::size_t c = 0; c < k; ++c) {
    if (model.weights[c] <= 0.0) continue;
    for (std::size_t i = 0; i < n; ++i) r[i] = x[i] - terms.sqrt_ab * mean_at(c, i);
    double quad = 0.0;
    double log_det = 0.0;
    if (!model.full_covariance()) {
      for (std::size_t i = 0; i < n; ++i) quad += r[i] * r[i];
      quad /= terms.var[c];
      log_det = static_cast<double>(n) * std::log(terms.var[c]);
    } else {
      const auto& p = terms.precision[c];
      for (std::size_t row = 0; row < n; ++row) {
        double acc = 0.0;
        for (std::size_t col = 0; col < n; ++col) acc += p[col * n + row] * r[col];
        quad += r[row] * acc;
      }
      log_det = terms.log_det[c];
    }
    log_resp[c] = std::log(model.weights[c]) - 0.5 * (log_det + quad);
  }
  const double peak = *std::max_element(log_resp.begin(), log_resp.end());
  double norm = 0.0;
  for (double& l : log_resp) {
    l = std::exp(l - peak);
    norm += l;
  }

  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    const double w = log_resp[c] / norm;
    if (w == 0.0) continue;
    for (std::size_t i = 0; i < n; ++i) r[i] = x[i] - terms.sqrt_ab * mean_at(c, i);
    if (!model.full_covariance()) {
      for (std::size_t i = 0; i < n; ++i) out[i] += w * (mean_at(c, i) + terms.gain[c] * r[i]);
    } else {
      const auto& g = terms.gain_matrix[c];
      for (std::size_t row = 0; row < n; ++row) {
        double acc = 0.0;
        for (std::size_t col = 0; col < n; ++col) acc += g[col * n + row] * r[col];
        tmp[row] = mean_at(c, row) + acc;
      }
      for (std::size_t i = 0; i < n; ++i) out[i] += w * tmp[i];
    }
  }
}

}  // namespace detail

/// E[x_0 | x_t] under the mixture prior. Responsibilities are normalised in
/// the log domain, so any finite input gives a finite result.
inline std::vector<double> gmm_posterior_mean(const GmmModel& model, std::span<const double> x_t, int t,
                                              const Schedule& schedule) {
  if (t < 1 || t > schedule.timesteps()) throw std::invalid_argument("gmm_posterior_mean: timestep out of range");
  std::vector<double> out(x_t.size());
  detail::gmm_posterior_mean_into(model, detail::gmm_step_terms(model, schedule.alpha_bar(t)), x_t, out);
  return out;
}

inline EpsilonPrediction analytic_gmm_epsilon(const GmmModel& model, const Tensor& x_t, int t,
                                              const Schedule& schedule,
                                              VarianceMode mode = VarianceMode::fixed_beta_tilde) {
  if (t < 1 || t > schedule.timesteps())
    throw std::invalid_argument("analytic_gmm_epsilon: timestep must be in [1, T], got " + std::to_string(t));
  const double ab = schedule.alpha_bar(t);
  const auto x0 = gmm_posterior_mean(model, x_t.values(), t, schedule);
  Tensor eps(x_t.shape());
  const double sa = std::sqrt(ab);
  const double sn = std::sqrt(1.0 - ab);
  for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = (x_t[i] - sa * x0[i]) / sn;
  return {std::move(eps), mode};
}

/// Exact epsilon predictor for data drawn from a GmmModel.
class GmmDenoiser final : public Denoiser {
 public:
  GmmDenoiser(GmmModel model, const Schedule& schedule, VarianceMode mode = VarianceMode::fixed_beta_tilde)
      : Denoiser(mode), model_(std::move(model)), timesteps_(schedule.timesteps()) {
    model_.validate();
    alpha_bar_.resize(static_cast<std::size_t>(timesteps_) + 1);
    for (int t = 0; t <= timesteps_; ++t) alpha_bar_[static_cast<std::size_t>(t)] = schedule.alpha_bar(t);
    // Full-covariance terms are d x d per component; only cache them for small d.
    if (!model_.full_covariance() || model_.dimension() <= 64) {
      terms_.reserve(static_cast<std::size_t>(timesteps_));
      for (int t = 1; t <= timesteps_; ++t) terms_.push_back(detail::gmm_step_terms(model_, alpha_bar_[t]));
    }
  }

  EpsilonPrediction predict(const Tensor& x_t, int t) const override {
    if (t < 1 || t > timesteps_)
      throw std::invalid_argument("GmmDenoiser: timestep must be in [1, T], got " + std::to_string(t));
    const double ab = alpha_bar_[static_cast<std::size_t>(t)];
    Tensor eps(x_t.shape());
    if (terms_.empty()) {
      detail::gmm_posterior_mean_into(model_, detail::gmm_step_terms(model_, ab), x_t.values(), eps.values());
    } else {
      detail::gmm_posterior_mean_into(model_, terms_[static_cast<std::size_t>(t - 1)], x_t.values(), eps.values());
    }
    const double sa = std::sqrt(ab);
    const double sn = std::sqrt(1.0 - ab);
    for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = (x_t[i] - sa * eps[i]) / sn;
    return {std::move(eps), variance_mode()};
  }

  std::string digest() const override { return sha256_hex(model_.to_json().dump()); }
  std::string kind() const override { return "gmm"; }

  const GmmModel& model() const { return model_; }

 private:
  GmmModel model_;
  int timesteps_;
  std::vector<double> alpha_bar_;
  std::vector<detail::GmmStepTerms> terms_;
};

}  // namespace ipainter
