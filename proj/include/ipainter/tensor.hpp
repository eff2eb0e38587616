#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ipainter {

// Channel-major (C, H, W) extent of an image-like tensor.
struct Shape {
  int channels = 1;
  int height = 1;
  int width = 1;

  std::size_t size() const {
    return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) *
           static_cast<std::size_t>(width);
  }
  std::size_t plane() const {
    return static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  }
  bool valid() const { return channels > 0 && height > 0 && width > 0; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    return std::to_string(channels) + "x" + std::to_string(height) + "x" + std::to_string(width);
  }
};

// Dense real-valued tensor. Image data lives in [-1, 1]; nothing here enforces it.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(shape), data_(shape.size(), fill) {
    if (!shape.valid()) throw std::invalid_argument("tensor shape must be positive: " + shape.str());
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
    if (!shape.valid()) throw std::invalid_argument("tensor shape must be positive: " + shape.str());
    if (data_.size() != shape.size())
      throw std::invalid_argument("tensor data size " + std::to_string(data_.size()) +
                                  " does not match shape " + shape.str());
  }

  // Flat vector viewed as a 1x1xN tensor.
  static Tensor vector(std::vector<double> values) {
    const int n = static_cast<int>(values.size());
    return Tensor(Shape{1, 1, n}, std::move(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(int c, int y, int x) { return data_[index(c, y, x)]; }
  double at(int c, int y, int x) const { return data_[index(c, y, x)]; }

  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * shape_.height + static_cast<std::size_t>(y)) * shape_.width +
           static_cast<std::size_t>(x);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_{};
  std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.shape().str() + " vs " +
                                b.shape().str());
}

// Binary keep-mask m: 1 marks a known (kept) element, 0 an element to generate.
class Mask {
 public:
  Mask() = default;

  Mask(Shape shape, bool keep) : shape_(shape), bits_(shape.size(), keep ? 1 : 0) {
    if (!shape.valid()) throw std::invalid_argument("mask shape must be positive: " + shape.str());
  }

  // Throws std::invalid_argument unless every value is exactly 0 or 1.
  static Mask from_values(Shape shape, std::span<const double> values) {
    if (values.size() != shape.size()) throw std::invalid_argument("mask data size does not match shape");
    Mask m(shape, false);
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (values[i] == 1.0) {
        m.bits_[i] = 1;
      } else if (values[i] != 0.0) {
        throw std::invalid_argument("mask is not binary at element " + std::to_string(i));
      }
    }
    return m;
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return bits_.size(); }

  bool keep(std::size_t i) const { return bits_[i] != 0; }
  void set(std::size_t i, bool keep) { bits_[i] = keep ? 1 : 0; }
  bool keep(int c, int y, int x) const { return bits_[offset(c, y, x)] != 0; }
  void set(int c, int y, int x, bool keep) { bits_[offset(c, y, x)] = keep ? 1 : 0; }

  std::size_t count() const {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
  }

  // Replicates a single-channel mask across `channels` channels.
  Mask broadcast(int channels) const {
    if (shape_.channels == channels) return *this;
    if (shape_.channels != 1) throw std::invalid_argument("only single-channel masks broadcast");
    Mask out(Shape{channels, shape_.height, shape_.width}, false);
    for (int c = 0; c < channels; ++c)
      std::copy(bits_.begin(), bits_.end(), out.bits_.begin() + static_cast<std::ptrdiff_t>(c * shape_.plane()));
    return out;
  }

  Tensor as_tensor() const {
    std::vector<double> v(bits_.begin(), bits_.end());
    return Tensor(shape_, std::move(v));
  }

  bool operator==(const Mask&) const = default;

 private:
  std::size_t offset(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * shape_.height + static_cast<std::size_t>(y)) * shape_.width +
           static_cast<std::size_t>(x);
  }

  Shape shape_{};
  std::vector<std::uint8_t> bits_;
};

}  // namespace ipainter
