#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <stop_token>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "ipainter/canvas.hpp"
#include "ipainter/denoiser_factory.hpp"
#include "ipainter/digest.hpp"
#include "ipainter/image_io.hpp"
#include "ipainter/sampler.hpp"

namespace ipainter {

// Everything besides the composition that determines a paint result.
struct JobConfig {
  ResampleConfig resample;
  std::uint64_t seed = 0;
  std::string denoiser = "gmm:standard";
  int timesteps = 250;  // used by GMM denoisers; toy weights carry their own T
  VarianceMode variance = VarianceMode::fixed_beta_tilde;
  bool clip_x0 = true;
  KnownNoiseIndex known_noise_index = KnownNoiseIndex::t_minus_1;
  // Denoise ops between snapshots: 0 disables, -1 picks max(1, n_dn / 40).
  int snapshot_every = 0;

  nlohmann::json to_json() const {
    nlohmann::json j = resample.to_json();
    j["seed"] = seed;
    j["denoiser"] = denoiser;
    j["timesteps"] = timesteps;
    j["variance"] = to_string(variance);
    j["clip_x0"] = clip_x0;
    j["known_noise_index"] = known_noise_index == KnownNoiseIndex::t ? "t" : "t-1";
    j["snapshot_every"] = snapshot_every;
    return j;
  }

  static JobConfig from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
    JobConfig c;
    c.resample = ResampleConfig::from_json(j);
    c.seed = j.value("seed", c.seed);
    c.denoiser = j.value("denoiser", c.denoiser);
    c.timesteps = j.value("timesteps", c.timesteps);
    if (j.contains("variance")) c.variance = parse_variance_mode(j.at("variance").get<std::string>());
    c.clip_x0 = j.value("clip_x0", c.clip_x0);
    if (j.contains("known_noise_index")) {
      const auto k = j.at("known_noise_index").get<std::string>();
      if (k == "t") c.known_noise_index = KnownNoiseIndex::t;
      else if (k == "t-1") c.known_noise_index = KnownNoiseIndex::t_minus_1;
      else throw std::invalid_argument("known_noise_index must be \"t\" or \"t-1\"");
    }
    if (j.contains("snapshots")) {
      const auto& s = j.at("snapshots");
      if (s.is_boolean()) c.snapshot_every = s.get<bool>() ? -1 : 0;
      else c.snapshot_every = s.get<int>();
    }
    c.snapshot_every = j.value("snapshot_every", c.snapshot_every);
    if (c.snapshot_every < -1) throw std::invalid_argument("snapshot_every must be >= -1");
    return c;
  }
};

// Loaded denoisers are read-only and shared between jobs.
class DenoiserCache {
 public:
  LoadedDenoiser get(const std::string& ref, int timesteps, VarianceMode mode) {
    const auto key = std::make_tuple(ref, timesteps, mode);
    std::lock_guard lock(mutex_);
    auto it = cache_.find(key);
    if (it == cache_.end()) it = cache_.emplace(key, load_denoiser(ref, timesteps, mode)).first;
    return it->second;
  }

 private:
  std::mutex mutex_;
  std::map<std::tuple<std::string, int, VarianceMode>, LoadedDenoiser> cache_;
};

struct PreparedJob {
  CompositionInput input;
  std::vector<std::string> warnings;
  LoadedDenoiser denoiser;
  ResamplePlan plan;
  OpCountReport expected;
};

inline PreparedJob prepare_job(CompositionInput input, std::vector<std::string> warnings, const JobConfig& config,
                               DenoiserCache& cache) {
  PreparedJob job{std::move(input), std::move(warnings), cache.get(config.denoiser, config.timesteps, config.variance),
                  {}, {}};
  if (const auto native = job.denoiser.denoiser->native_shape();
      native && native->channels != job.input.known.shape().channels)
    throw std::invalid_argument("denoiser expects " + std::to_string(native->channels) + "-channel images; canvas has " +
                                std::to_string(job.input.known.shape().channels));
  job.plan = build_resample_plan(config.resample, job.denoiser.schedule.timesteps());
  job.expected = count_ops(job.plan);
  return job;
}

struct PaintOutput {
  PaintResult result;
  std::vector<std::uint8_t> png;
  nlohmann::json report;
  nlohmann::json manifest;
};

inline int resolve_snapshot_interval(int snapshot_every, const OpCountReport& expected) {
  if (snapshot_every >= 0) return snapshot_every;
  return static_cast<int>(std::max<long long>(1, expected.n_dn / 40));
}

/// Runs one paint job. CLI and HTTP both go through here, so identical inputs
/// give byte-identical PNGs.
inline PaintOutput run_paint_job(const PreparedJob& job, const JobConfig& config,
                                 std::function<void(const PaintProgress&)> on_progress = {},
                                 std::function<void(const Snapshot&)> on_snapshot = {}, std::stop_token stop = {}) {
  SamplerOptions opts;
  opts.clip_x0 = config.clip_x0;
  opts.known_noise_index = config.known_noise_index;
  opts.snapshot_every = resolve_snapshot_interval(config.snapshot_every, job.expected);
  opts.on_progress = std::move(on_progress);
  opts.on_snapshot = std::move(on_snapshot);
  opts.stop = std::move(stop);

  GaussianNoiseSource rng(config.seed);
  PaintOutput out;
  out.result = paint(job.input, *job.denoiser.denoiser, job.denoiser.schedule, job.plan, rng, opts);
  out.png = encode_png(out.result.image);

  const auto& ops = out.result.ops;
  out.report = {{"n_dn", ops.n_dn},
                {"n_fwd", ops.n_fwd},
                {"n_total", ops.n_total},
                {"expected", job.expected.to_json()},
                {"strategy", config.resample.strategy.str()},
                {"lambda", config.resample.lambda},
                {"repeats", config.resample.repeats},
                {"T", job.denoiser.schedule.timesteps()},
                {"jump_points", job.plan.jump_points},
                {"known_pixels", job.input.mask.count()},
                {"snapshots", out.result.snapshots.size()},
                {"warnings", job.warnings}};
  out.manifest = {{"seed", config.seed},
                  {"config", config.to_json()},
                  {"schedule_digest", job.denoiser.schedule.digest()},
                  {"denoiser", job.denoiser.source},
                  {"denoiser_kind", job.denoiser.denoiser->kind()},
                  {"denoiser_digest", job.denoiser.denoiser->digest()},
                  {"output_sha256", sha256_hex(out.png)}};
  return out;
}

}  // namespace ipainter
