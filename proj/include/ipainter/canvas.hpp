#pragma once

#include <algorithm>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ipainter/digest.hpp"
#include "ipainter/image_io.hpp"
#include "ipainter/sampler.hpp"
#include "ipainter/tensor.hpp"

namespace ipainter {

// Patch pixels with alpha >= this threshold become part of the keep-mask.
inline constexpr double kAlphaThreshold = 0.5;

struct Placement {
  Tensor patch;                // 1 or canvas-channel count, values in [-1, 1]
  std::optional<Tensor> alpha;  // 1 x h x w in [0, 1]; absent means opaque
  int x = 0;
  int y = 0;
  int z = 0;
};

struct CompositionSpec {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<Placement> placements;
  double background = 0.0;
};

struct RasterizedComposition {
  CompositionInput input;
  std::vector<std::string> warnings;
};

/// Paints placements onto a background canvas in ascending z order (ties keep
/// list order), clipping to the canvas. The mask marks every canvas pixel
/// covered by an opaque enough patch pixel, across all channels.
inline RasterizedComposition rasterize(const CompositionSpec& spec) {
  if (spec.width <= 0 || spec.height <= 0) throw std::invalid_argument("canvas dimensions must be positive");
  if (spec.channels != 1 && spec.channels != 3) throw std::invalid_argument("canvas must have 1 or 3 channels");
  const Shape shape{spec.channels, spec.height, spec.width};
  RasterizedComposition out{{Tensor(shape, spec.background), Mask(shape, false)}, {}};

  std::vector<std::size_t> order(spec.placements.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return spec.placements[a].z < spec.placements[b].z; });

  for (std::size_t idx : order) {
    const Placement& p = spec.placements[idx];
    const Shape ps = p.patch.shape();
    if (p.patch.empty() || ps.height <= 0 || ps.width <= 0)
      throw std::invalid_argument("placement " + std::to_string(idx) + " has an empty patch");
    if (ps.channels != 1 && ps.channels != spec.channels)
      throw std::invalid_argument("placement " + std::to_string(idx) + " has " + std::to_string(ps.channels) +
                                  " channels; canvas has " + std::to_string(spec.channels));
    if (p.alpha && (p.alpha->shape() != Shape{1, ps.height, ps.width}))
      throw std::invalid_argument("placement " + std::to_string(idx) + " alpha does not match patch size");

    const int x0 = std::max(0, p.x);
    const int y0 = std::max(0, p.y);
    const int x1 = std::min(spec.width, p.x + ps.width);
    const int y1 = std::min(spec.height, p.y + ps.height);
    if (x0 >= x1 || y0 >= y1) {
      out.warnings.push_back("placement " + std::to_string(idx) + " at (" + std::to_string(p.x) + ", " +
                             std::to_string(p.y) + ") lies entirely outside the canvas");
      continue;
    }
    for (int cy = y0; cy < y1; ++cy)
      for (int cx = x0; cx < x1; ++cx) {
        const int py = cy - p.y;
        const int px = cx - p.x;
        if (p.alpha && p.alpha->at(0, py, px) < kAlphaThreshold) continue;
        for (int c = 0; c < spec.channels; ++c) {
          out.input.known.at(c, cy, cx) = p.patch.at(ps.channels == 1 ? 0 : c, py, px);
          out.input.mask.set(c, cy, cx, true);
        }
      }
  }
  return out;
}

// Builds a composition directly from a full-canvas image and a 1-channel mask.
inline CompositionInput composition_from_image(const Tensor& image, const Mask& mask) {
  if (mask.shape().height != image.shape().height || mask.shape().width != image.shape().width)
    throw std::invalid_argument("mask size does not match image size");
  return {image, mask.broadcast(image.shape().channels)};
}

namespace detail {

inline constexpr std::string_view kDataUriPrefix = "data:image/png;base64,";

inline LoadedImage load_patch_source(const nlohmann::json& pj, const std::filesystem::path& base_dir) {
  if (pj.contains("image_base64")) return decode_png(base64_decode(pj.at("image_base64").get<std::string>()), "inline patch");
  const std::string src = pj.at("image").get<std::string>();
  if (src.rfind(kDataUriPrefix, 0) == 0) return decode_png(base64_decode(src.substr(kDataUriPrefix.size())), "inline patch");
  std::filesystem::path path(src);
  if (path.is_relative()) path = base_dir / path;
  return load_image(path);
}

}  // namespace detail

/// Parses the composition document
/// {canvas: {w, h[, channels]}, placements: [{image, x, y, z}], background}.
/// `image` is a path (relative to base_dir) or a data:image/png;base64 URI;
/// `image_base64` may carry bare base64 instead. Without an explicit channel
/// count the canvas is RGB if any patch is RGB (or there are no patches).
inline CompositionSpec composition_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = ".") {
  CompositionSpec spec;
  const auto& canvas = j.at("canvas");
  spec.width = canvas.at("w").get<int>();
  spec.height = canvas.at("h").get<int>();
  if (spec.width <= 0 || spec.height <= 0) throw std::invalid_argument("canvas dimensions must be positive");
  spec.background = j.value("background", 0.0);
  bool any_color = false;
  if (j.contains("placements")) {
    for (const auto& pj : j.at("placements")) {
      LoadedImage img = detail::load_patch_source(pj, base_dir);
      any_color = any_color || img.pixels.shape().channels == 3;
      spec.placements.push_back(
          {std::move(img.pixels), std::move(img.alpha), pj.at("x").get<int>(), pj.at("y").get<int>(), pj.value("z", 0)});
    }
  }
  spec.channels = canvas.contains("channels") ? canvas.at("channels").get<int>()
                                               : (any_color || spec.placements.empty() ? 3 : 1);
  return spec;
}

// Inverse of composition_from_json with patches (and alpha) inlined as PNG data URIs.
inline nlohmann::json composition_to_json(const CompositionSpec& spec) {
  nlohmann::json placements = nlohmann::json::array();
  for (const auto& p : spec.placements) {
    placements.push_back({{"image", std::string(detail::kDataUriPrefix) + base64_encode(encode_png(p.patch, p.alpha ? &*p.alpha : nullptr))},
                          {"x", p.x},
                          {"y", p.y},
                          {"z", p.z}});
  }
  return {{"canvas", {{"w", spec.width}, {"h", spec.height}, {"channels", spec.channels}}},
          {"placements", placements},
          {"background", spec.background}};
}

}  // namespace ipainter
