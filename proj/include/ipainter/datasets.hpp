#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "ipainter/noise.hpp"
#include "ipainter/tensor.hpp"

// Synthetic image sets for training and exercising the toy denoiser.
namespace ipainter::datasets {

inline std::vector<Tensor> constant(Shape shape, double value, int count) {
  return std::vector<Tensor>(static_cast<std::size_t>(count), Tensor(shape, value));
}

// Each image is a flat level of -0.5 or +0.5 plus N(0, spread^2) pixel noise, clamped to [-1, 1].
inline std::vector<Tensor> two_gaussians(Shape shape, int count, GaussianNoiseSource& rng, double spread = 0.1) {
  std::vector<Tensor> out;
  for (int i = 0; i < count; ++i) {
    const double level = rng.uniform() < 0.5 ? -0.5 : 0.5;
    Tensor img(shape);
    for (double& v : img.values()) v = std::clamp(level + spread * rng.next(), -1.0, 1.0);
    out.push_back(std::move(img));
  }
  return out;
}

// Hard-edged bright disc or square on a dark background, random size and position.
inline std::vector<Tensor> two_shapes(Shape shape, int count, GaussianNoiseSource& rng) {
  if (shape.height < 8 || shape.width < 8) throw std::invalid_argument("two_shapes needs at least 8x8 images");
  std::vector<Tensor> out;
  const int extent = std::min(shape.height, shape.width);
  for (int i = 0; i < count; ++i) {
    Tensor img(shape, -0.6);
    const bool disc = rng.uniform() < 0.5;
    const double radius = extent * (0.15 + 0.15 * rng.uniform());
    const double cy = radius + (shape.height - 2 * radius) * rng.uniform();
    const double cx = radius + (shape.width - 2 * radius) * rng.uniform();
    for (int y = 0; y < shape.height; ++y)
      for (int x = 0; x < shape.width; ++x) {
        const double dy = y + 0.5 - cy;
        const double dx = x + 0.5 - cx;
        const bool inside = disc ? dx * dx + dy * dy <= radius * radius
                                 : std::abs(dx) <= radius * 0.85 && std::abs(dy) <= radius * 0.85;
        if (inside)
          for (int c = 0; c < shape.channels; ++c) img.at(c, y, x) = 0.6;
      }
    out.push_back(std::move(img));
  }
  return out;
}

}  // namespace ipainter::datasets
