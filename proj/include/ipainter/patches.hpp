#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ipainter/tensor.hpp"

namespace ipainter {

// A small RGBA landmark image for composing canvases.
struct SamplePatch {
  std::string name;
  Tensor rgb;    // 3 x h x w in [-1, 1]
  Tensor alpha;  // 1 x h x w in [0, 1]
};

namespace detail {

struct Rgb {
  double r, g, b;
};

inline double to_unit(int v) { return 2.0 * v / 255.0 - 1.0; }

// Paints `color` wherever inside(x, y) holds, with (x, y) in patch-relative [0, 1].
inline void paint_region(SamplePatch& p, Rgb color, const std::function<bool(double, double)>& inside) {
  const int h = p.rgb.shape().height;
  const int w = p.rgb.shape().width;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double u = (x + 0.5) / w;
      const double v = (y + 0.5) / h;
      if (!inside(u, v)) continue;
      p.rgb.at(0, y, x) = color.r;
      p.rgb.at(1, y, x) = color.g;
      p.rgb.at(2, y, x) = color.b;
      p.alpha.at(0, y, x) = 1.0;
    }
}

inline SamplePatch blank_patch(std::string name, int size) {
  return {std::move(name), Tensor(Shape{3, size, size}, 0.0), Tensor(Shape{1, size, size}, 0.0)};
}

}  // namespace detail

/// Procedurally drawn landmarks: sun, tree, house, rock, cloud.
inline std::vector<SamplePatch> sample_patches(int size = 32) {
  using detail::Rgb;
  using detail::to_unit;
  std::vector<SamplePatch> out;

  auto sun = detail::blank_patch("sun", size);
  detail::paint_region(sun, {to_unit(250), to_unit(200), to_unit(40)}, [](double u, double v) {
    return std::hypot(u - 0.5, v - 0.5) < 0.4;
  });
  out.push_back(std::move(sun));

  auto tree = detail::blank_patch("tree", size);
  detail::paint_region(tree, {to_unit(110), to_unit(70), to_unit(30)}, [](double u, double v) {
    return std::abs(u - 0.5) < 0.08 && v > 0.7;
  });
  detail::paint_region(tree, {to_unit(40), to_unit(140), to_unit(50)}, [](double u, double v) {
    return v > 0.08 && v < 0.75 && std::abs(u - 0.5) < 0.45 * (v - 0.08) / 0.67;
  });
  out.push_back(std::move(tree));

  auto house = detail::blank_patch("house", size);
  detail::paint_region(house, {to_unit(200), to_unit(60), to_unit(50)}, [](double u, double v) {
    return u > 0.15 && u < 0.85 && v > 0.45 && v < 0.95;
  });
  detail::paint_region(house, {to_unit(90), to_unit(50), to_unit(40)}, [](double u, double v) {
    return v > 0.1 && v <= 0.45 && std::abs(u - 0.5) < 0.45 * (v - 0.1) / 0.35;
  });
  detail::paint_region(house, {to_unit(240), to_unit(230), to_unit(150)}, [](double u, double v) {
    return u > 0.42 && u < 0.58 && v > 0.7 && v < 0.95;
  });
  out.push_back(std::move(house));

  auto rock = detail::blank_patch("rock", size);
  detail::paint_region(rock, {to_unit(120), to_unit(120), to_unit(125)}, [](double u, double v) {
    const double a = std::atan2(v - 0.6, u - 0.5);
    return std::hypot((u - 0.5) / 1.3, v - 0.6) < 0.3 + 0.04 * std::sin(5 * a);
  });
  out.push_back(std::move(rock));

  auto cloud = detail::blank_patch("cloud", size);
  detail::paint_region(cloud, {to_unit(245), to_unit(245), to_unit(250)}, [](double u, double v) {
    return std::hypot(u - 0.3, v - 0.6) < 0.2 || std::hypot(u - 0.55, v - 0.45) < 0.25 ||
           std::hypot(u - 0.75, v - 0.62) < 0.18;
  });
  out.push_back(std::move(cloud));
  return out;
}

}  // namespace ipainter
