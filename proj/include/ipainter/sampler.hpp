#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <stop_token>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ipainter/denoiser.hpp"
#include "ipainter/noise.hpp"
#include "ipainter/schedule.hpp"
#include "ipainter/tensor.hpp"

namespace ipainter {

class SamplingError : public std::runtime_error {
 public:
  SamplingError(int timestep, const std::string& what)
      : std::runtime_error("sampling failed at t=" + std::to_string(timestep) + ": " + what), timestep_(timestep) {}
  int timestep() const { return timestep_; }

 private:
  int timestep_;
};

// ---------------------------------------------------------------------------
// Single steps
// ---------------------------------------------------------------------------

// x0 estimate implied by an epsilon prediction: (x_t - sqrt(1 - ab) eps) / sqrt(ab).
inline Tensor implied_x0(const Tensor& x_t, const Tensor& epsilon, int t, const Schedule& schedule) {
  require_same_shape(x_t, epsilon, "implied_x0");
  const double ab = schedule.alpha_bar(t);
  const double sa = std::sqrt(ab);
  const double sn = std::sqrt(1.0 - ab);
  Tensor x0(x_t.shape());
  for (std::size_t i = 0; i < x0.size(); ++i) x0[i] = (x_t[i] - sn * epsilon[i]) / sa;
  return x0;
}

/// One ancestral step x_t -> x_{t-1}.
///
/// With clip_x0 the implied x0 is clamped to [-1, 1] and the mean is formed
/// from the posterior q(x_{t-1} | x_t, x0); otherwise the epsilon form
/// (x_t - beta_t / sqrt(1 - ab_t) eps) / sqrt(alpha_t) is used directly. The
/// two agree when no clamping happens. No noise is drawn at t = 1.
inline Tensor reverse_step(const Tensor& x_t, int t, const Denoiser& denoiser, const Schedule& schedule,
                           GaussianNoiseSource& rng, bool clip_x0 = true) {
  if (t < 1 || t > schedule.timesteps())
    throw std::invalid_argument("reverse_step: timestep " + std::to_string(t) + " out of range");
  EpsilonPrediction pred = denoiser.predict(x_t, t);
  if (pred.epsilon.shape() != x_t.shape()) throw SamplingError(t, "denoiser returned wrong shape");
  if (!pred.epsilon.all_finite()) throw SamplingError(t, "denoiser returned non-finite values");

  const double beta = schedule.beta(t);
  const double alpha = schedule.alpha(t);
  const double ab = schedule.alpha_bar(t);
  const double ab_prev = schedule.alpha_bar(t - 1);
  const Tensor& eps = pred.epsilon;

  Tensor out(x_t.shape());
  if (clip_x0) {
    const double sa = std::sqrt(ab);
    const double sn = std::sqrt(1.0 - ab);
    const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    const double ct = std::sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double x0 = std::clamp((x_t[i] - sn * eps[i]) / sa, -1.0, 1.0);
      out[i] = c0 * x0 + ct * x_t[i];
    }
  } else {
    const double k = beta / std::sqrt(1.0 - ab);
    const double inv = 1.0 / std::sqrt(alpha);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (x_t[i] - k * eps[i]) * inv;
  }

  if (t > 1) {
    const double var = pred.variance_mode == VarianceMode::fixed_beta ? beta : schedule.beta_tilde(t);
    const double sigma = std::sqrt(var);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += sigma * rng.next();
  }
  if (!out.all_finite()) throw SamplingError(t, "reverse step produced non-finite values");
  return out;
}

// Known region at noise level t. Level 0 returns `known` unchanged and draws nothing.
inline Tensor encode_known(const Tensor& known, int t, const Schedule& schedule, GaussianNoiseSource& rng) {
  if (t < 0 || t > schedule.timesteps())
    throw std::invalid_argument("encode_known: level " + std::to_string(t) + " out of [0, T]");
  if (t == 0) return known;
  return forward_jump(schedule, known, t, rng.normal(known.shape()));
}

// m * known + (1 - m) * unknown, as an exact per-element select.
inline Tensor merge(const Tensor& known_t, const Tensor& unknown_t, const Mask& mask) {
  require_same_shape(known_t, unknown_t, "merge");
  if (mask.shape() != known_t.shape())
    throw std::invalid_argument("merge: mask shape " + mask.shape().str() + " does not match " +
                                known_t.shape().str());
  Tensor out(known_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask.keep(i) ? known_t[i] : unknown_t[i];
  return out;
}

inline Tensor merge(const Tensor& known_t, const Tensor& unknown_t, const Tensor& mask_values) {
  return merge(known_t, unknown_t, Mask::from_values(mask_values.shape(), mask_values.values()));
}

// ---------------------------------------------------------------------------
// Resampling plans and cost model
// ---------------------------------------------------------------------------

// Resampling is active at jump points p with lo < p <= hi.
struct ResampleWindow {
  int lo = 0;
  int hi = 0;
  bool contains(int p) const { return lo < p && p <= hi; }
  bool operator==(const ResampleWindow&) const = default;
};

struct Strategy {
  enum class Kind { none, all, start_at, stop_at };
  Kind kind = Kind::none;
  int at = 0;

  static Strategy none() { return {Kind::none, 0}; }
  static Strategy all() { return {Kind::all, 0}; }
  static Strategy start_at(int t) { return {Kind::start_at, t}; }
  static Strategy stop_at(int t) { return {Kind::stop_at, t}; }

  ResampleWindow window(int timesteps, int lambda) const {
    switch (kind) {
      case Kind::none: return {0, 0};
      case Kind::all: return {0, timesteps - lambda};
      case Kind::start_at: return {0, at};
      case Kind::stop_at: return {at, timesteps - lambda};
    }
    return {0, 0};
  }

  std::string str() const {
    switch (kind) {
      case Kind::none: return "none";
      case Kind::all: return "all";
      case Kind::start_at: return "start:" + std::to_string(at);
      case Kind::stop_at: return "stop:" + std::to_string(at);
    }
    return "none";
  }

  // "none" | "all" | "start:<t>" | "stop:<t>"
  static Strategy parse(const std::string& text) {
    if (text == "none") return none();
    if (text == "all") return all();
    auto number = [&](std::size_t offset) {
      int v = 0;
      const char* first = text.data() + offset;
      const char* last = text.data() + text.size();
      auto [ptr, ec] = std::from_chars(first, last, v);
      if (ec != std::errc() || ptr != last || first == last || v < 0)
        throw std::invalid_argument("bad strategy timestep in '" + text + "'");
      return v;
    };
    if (text.rfind("start:", 0) == 0) return start_at(number(6));
    if (text.rfind("stop:", 0) == 0) return stop_at(number(5));
    throw std::invalid_argument("unknown strategy '" + text + "' (expected none|all|start:<t>|stop:<t>)");
  }

  bool operator==(const Strategy&) const = default;
};

struct ResampleConfig {
  int lambda = 10;
  int repeats = 10;
  Strategy strategy = Strategy::stop_at(100);
  // Overrides the strategy's preset window when set.
  std::optional<ResampleWindow> window;

  ResampleWindow resolve_window(int timesteps) const {
    return window ? *window : strategy.window(timesteps, lambda);
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"lambda", lambda}, {"repeats", repeats}, {"strategy", strategy.str()}};
    if (window) j["window"] = {window->lo, window->hi};
    return j;
  }

  static ResampleConfig from_json(const nlohmann::json& j) {
    ResampleConfig c;
    c.lambda = j.value("lambda", c.lambda);
    c.repeats = j.value("repeats", c.repeats);
    if (j.contains("strategy")) c.strategy = Strategy::parse(j.at("strategy").get<std::string>());
    if (j.contains("window")) {
      const auto w = j.at("window").get<std::vector<int>>();
      if (w.size() != 2) throw std::invalid_argument("window must be [lo, hi]");
      c.window = ResampleWindow{w[0], w[1]};
    }
    return c;
  }
};

struct ResamplePlan {
  int timesteps = 0;
  int lambda = 0;
  std::vector<int> jump_points;  // descending
  int cycles_per_point = 0;

  bool is_jump_point(int p) const {
    return std::find(jump_points.begin(), jump_points.end(), p) != jump_points.end();
  }
};

/// Jump grid {lambda, 2 lambda, ..., T - lambda} restricted to the window;
/// `repeats` counts the base pass, so each point gets repeats - 1 cycles.
inline ResamplePlan build_resample_plan(const ResampleConfig& config, int timesteps) {
  if (config.lambda < 1) throw std::invalid_argument("lambda must be positive");
  if (config.repeats < 1) throw std::invalid_argument("repeats must be positive");
  if (config.lambda >= timesteps)
    throw std::invalid_argument("lambda (" + std::to_string(config.lambda) + ") must be smaller than T (" +
                                std::to_string(timesteps) + ")");
  const ResampleWindow window = config.resolve_window(timesteps);
  ResamplePlan plan;
  plan.timesteps = timesteps;
  plan.lambda = config.lambda;
  plan.cycles_per_point = config.repeats - 1;
  for (int p = (timesteps - config.lambda) / config.lambda * config.lambda; p >= config.lambda; p -= config.lambda) {
    if (window.contains(p)) plan.jump_points.push_back(p);
  }
  return plan;
}

struct OpCountReport {
  long long n_dn = 0;
  long long n_fwd = 0;
  long long n_total = 0;

  bool operator==(const OpCountReport&) const = default;

  nlohmann::json to_json() const { return {{"n_dn", n_dn}, {"n_fwd", n_fwd}, {"n_total", n_total}}; }
};

// Each accumulated lambda-jump counts as one forward op; the per-step
// known-region encodings are not counted.
inline OpCountReport count_ops(const ResamplePlan& plan) {
  OpCountReport r;
  const long long cycles = static_cast<long long>(plan.jump_points.size()) * plan.cycles_per_point;
  r.n_fwd = cycles;
  r.n_dn = plan.timesteps + cycles * plan.lambda;
  r.n_total = r.n_dn + r.n_fwd;
  return r;
}

// The four presets compared in the cost table: all, start:150, stop:100, none.
inline std::vector<Strategy> reference_strategies() {
  return {Strategy::all(), Strategy::start_at(150), Strategy::stop_at(100), Strategy::none()};
}

// ---------------------------------------------------------------------------
// Composition sampling
// ---------------------------------------------------------------------------

struct CompositionInput {
  Tensor known;
  Mask mask;  // same shape as `known`; 1 = keep
};

// Which noise level the known region is encoded at when merged into x_{t-1}.
enum class KnownNoiseIndex { t_minus_1, t };

struct Snapshot {
  long long ops_done = 0;  // denoise + forward ops completed when taken
  int timestep = 0;        // noise level of `image`
  Tensor image;
};

struct PaintProgress {
  long long ops_done = 0;
  long long ops_total = 0;
  int timestep = 0;
};

struct SamplerOptions {
  bool clip_x0 = true;
  KnownNoiseIndex known_noise_index = KnownNoiseIndex::t_minus_1;
  int snapshot_every = 0;  // denoise ops between snapshots; 0 disables
  std::function<void(const PaintProgress&)> on_progress;
  std::function<void(const Snapshot&)> on_snapshot;
  std::stop_token stop;
};

struct PaintResult {
  Tensor image;
  OpCountReport ops;
  std::vector<Snapshot> snapshots;
};

// Thrown when a stop is requested; carries the state reached so far.
class CancelledError : public std::runtime_error {
 public:
  explicit CancelledError(PaintResult partial)
      : std::runtime_error("paint cancelled"), partial_(std::move(partial)) {}
  const PaintResult& partial() const { return partial_; }

 private:
  PaintResult partial_;
};

namespace detail {

class Chain {
 public:
  Chain(const CompositionInput* input, const Denoiser& denoiser, const Schedule& schedule, const ResamplePlan& plan,
        GaussianNoiseSource& root, const SamplerOptions& options)
      : input_(input),
        denoiser_(denoiser),
        schedule_(schedule),
        plan_(plan),
        options_(options),
        reverse_rng_(root.substream(0)),
        known_rng_(root.substream(1)),
        jump_rng_(root.substream(2)),
        total_(count_ops(plan).n_total) {
    if (plan.timesteps != schedule.timesteps())
      throw std::invalid_argument("plan built for T=" + std::to_string(plan.timesteps) + " but schedule has T=" +
                                  std::to_string(schedule.timesteps()));
    jump_.assign(static_cast<std::size_t>(schedule.timesteps()) + 1, false);
    for (int p : plan.jump_points) jump_[static_cast<std::size_t>(p)] = true;
  }

  PaintResult run(Shape shape) {
    const int T = schedule_.timesteps();
    Tensor x = reverse_rng_.normal(shape);
    for (int t = T; t >= 1; --t) {
      x = denoise(x, t);
      const int p = t - 1;
      if (!jump_[static_cast<std::size_t>(p)]) continue;
      for (int c = 0; c < plan_.cycles_per_point; ++c) {
        check_stop(x);
        x = forward_rejump(schedule_, x, p, p + plan_.lambda, jump_rng_.normal(shape));
        ++result_.ops.n_fwd;
        report(p + plan_.lambda);
        for (int s = p + plan_.lambda; s > p; --s) x = denoise(x, s);
      }
    }
    result_.ops.n_total = result_.ops.n_dn + result_.ops.n_fwd;
    result_.image = std::move(x);
    return std::move(result_);
  }

 private:
  // x_t -> x_{t-1}, merged with the known region when there is one.
  Tensor denoise(const Tensor& x, int t) {
    check_stop(x);
    Tensor unknown = reverse_step(x, t, denoiser_, schedule_, reverse_rng_, options_.clip_x0);
    ++result_.ops.n_dn;
    Tensor next;
    if (input_ == nullptr) {
      next = std::move(unknown);
    } else {
      const int level = options_.known_noise_index == KnownNoiseIndex::t_minus_1 ? t - 1 : t;
      next = merge(encode_known(input_->known, level, schedule_, known_rng_), unknown, input_->mask);
    }
    if (options_.snapshot_every > 0 && result_.ops.n_dn % options_.snapshot_every == 0) {
      Snapshot snap{result_.ops.n_dn + result_.ops.n_fwd, t - 1, next};
      if (options_.on_snapshot) options_.on_snapshot(snap);
      result_.snapshots.push_back(std::move(snap));
    }
    report(t - 1);
    return next;
  }

  void report(int t) {
    if (options_.on_progress) options_.on_progress({result_.ops.n_dn + result_.ops.n_fwd, total_, t});
  }

  void check_stop(const Tensor& x) {
    if (!options_.stop.stop_requested()) return;
    PaintResult partial = result_;
    partial.ops.n_total = partial.ops.n_dn + partial.ops.n_fwd;
    partial.image = x;
    throw CancelledError(std::move(partial));
  }

  const CompositionInput* input_;
  const Denoiser& denoiser_;
  const Schedule& schedule_;
  const ResamplePlan& plan_;
  const SamplerOptions& options_;
  GaussianNoiseSource reverse_rng_;
  GaussianNoiseSource known_rng_;
  GaussianNoiseSource jump_rng_;
  long long total_;
  std::vector<bool> jump_;
  PaintResult result_;
};

}  // namespace detail

/// Fills the unknown region of `input` by reverse diffusion.
///
/// Starting from x_T ~ N(0, I), every reverse step is merged with the known
/// region encoded at the matching noise level. After reaching a plan jump
/// point p, the state is re-noised to p + lambda in one accumulated jump and
/// denoised back down to p, cycles_per_point times. Noise for x_T and the
/// reverse steps, the known-region encodings and the jumps come from
/// substreams 0, 1 and 2 of `rng`.
inline PaintResult paint(const CompositionInput& input, const Denoiser& denoiser, const Schedule& schedule,
                         const ResamplePlan& plan, GaussianNoiseSource& rng, const SamplerOptions& options = {}) {
  if (input.mask.shape() != input.known.shape())
    throw std::invalid_argument("paint: mask shape " + input.mask.shape().str() + " does not match known " +
                                input.known.shape().str());
  detail::Chain chain(&input, denoiser, schedule, plan, rng, options);
  return chain.run(input.known.shape());
}

// Sample i uses stream (rng.stream() + i) of rng's seed; sample 0 therefore
// matches paint() with an all-zero mask, plan "none" and the same rng.
inline std::vector<Tensor> unconditional_sample(const Denoiser& denoiser, const Schedule& schedule,
                                                const GaussianNoiseSource& rng, int n, Shape shape,
                                                const SamplerOptions& options = {}) {
  if (n < 1) throw std::invalid_argument("unconditional_sample needs n >= 1");
  const ResamplePlan plan{schedule.timesteps(), 1, {}, 0};
  std::vector<Tensor> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    GaussianNoiseSource sample_rng(rng.seed(), rng.stream() + static_cast<std::uint64_t>(i));
    detail::Chain chain(nullptr, denoiser, schedule, plan, sample_rng, options);
    out.push_back(chain.run(shape).image);
  }
  return out;
}

}  // namespace ipainter
