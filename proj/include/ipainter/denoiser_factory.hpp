#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "ipainter/gmm.hpp"
#include "ipainter/image_io.hpp"
#include "ipainter/schedule.hpp"
#include "ipainter/toy_denoiser.hpp"

namespace ipainter {

// A denoiser bundled with the schedule it runs on.
struct LoadedDenoiser {
  std::shared_ptr<const Denoiser> denoiser;
  Schedule schedule;
  std::string source;
};

/// Resolves a denoiser reference:
///   gmm:standard       standard normal prior, any dimension
///   gmm:<path.json>    GmmModel document
///   gmm:{...}          inline GmmModel JSON
///   <path>             toy denoiser weights file (its own T wins; `mode` replaces the stored one)
/// GMM denoisers run on a linear schedule with `timesteps` steps.
inline LoadedDenoiser load_denoiser(const std::string& ref, int timesteps = 250,
                                    VarianceMode mode = VarianceMode::fixed_beta_tilde) {
  if (ref.rfind("gmm:", 0) == 0) {
    const std::string arg = ref.substr(4);
    GmmModel model;
    if (arg == "standard") {
      model = GmmModel::standard_normal();
    } else if (!arg.empty() && arg.front() == '{') {
      model = GmmModel::from_json(nlohmann::json::parse(arg));
    } else {
      std::ifstream in(arg);
      if (!in) throw IoError(arg + ": cannot open GMM file");
      model = GmmModel::from_json(nlohmann::json::parse(in));
    }
    Schedule schedule = Schedule::linear(timesteps);
    auto d = std::make_shared<GmmDenoiser>(std::move(model), schedule, mode);
    return {std::move(d), std::move(schedule), ref};
  }
  if (!std::filesystem::exists(ref)) throw IoError(ref + ": denoiser weights not found");
  ToyDenoiser stored = ToyDenoiser::load(ref);
  auto toy = std::make_shared<ToyDenoiser>(stored.architecture(), *stored.native_shape(), stored.timesteps(),
                                           stored.seed(), mode);
  std::copy(stored.parameters().begin(), stored.parameters().end(), toy->parameters().begin());
  Schedule schedule = Schedule::linear(toy->timesteps());
  return {std::move(toy), std::move(schedule), ref};
}

}  // namespace ipainter
