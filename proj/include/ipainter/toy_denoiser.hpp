#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numbers>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ipainter/denoiser.hpp"
#include "ipainter/digest.hpp"
#include "ipainter/image_io.hpp"
#include "ipainter/noise.hpp"
#include "ipainter/schedule.hpp"
#include "ipainter/tensor.hpp"

namespace ipainter {

static_assert(std::endian::native == std::endian::little, "weights files are little-endian");

/// Stack of 3x3 dilated convolutions with SiLU activations. Every layer but
/// the last adds a per-channel bias projected from a sinusoidal embedding of
/// t. Channels: image -> hidden -> ... -> hidden -> image.
struct ToyArchitecture {
  int hidden = 16;
  int embed_dim = 32;
  std::vector<int> dilations{1, 2, 4, 1};

  void validate() const {
    if (hidden < 1) throw std::invalid_argument("hidden width must be positive");
    if (embed_dim < 2 || embed_dim % 2 != 0) throw std::invalid_argument("embed_dim must be a positive even number");
    if (dilations.size() < 2) throw std::invalid_argument("need at least two conv layers");
    for (int d : dilations)
      if (d < 1) throw std::invalid_argument("dilations must be positive");
  }

  nlohmann::json to_json() const {
    return {{"type", "dilated-conv-silu"}, {"hidden", hidden}, {"embed_dim", embed_dim}, {"dilations", dilations}};
  }
  static ToyArchitecture from_json(const nlohmann::json& j) {
    if (j.value("type", std::string("dilated-conv-silu")) != "dilated-conv-silu")
      throw std::invalid_argument("unsupported toy architecture type");
    ToyArchitecture a;
    a.hidden = j.at("hidden").get<int>();
    a.embed_dim = j.at("embed_dim").get<int>();
    a.dilations = j.at("dilations").get<std::vector<int>>();
    a.validate();
    return a;
  }
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::vector<double> timestep_embedding(int t, int dim) {
  std::vector<double> e(static_cast<std::size_t>(dim));
  const int half = dim / 2;
  for (int j = 0; j < half; ++j) {
    const double freq = std::exp(-std::log(10000.0) * j / half);
    e[static_cast<std::size_t>(j)] = std::sin(t * freq);
    e[static_cast<std::size_t>(j + half)] = std::cos(t * freq);
  }
  return e;
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// out[o] += sum_i w[o][i] (*) in[i], 3x3 kernel, zero padding, given dilation.
inline void conv3x3_accumulate(const double* in, int in_ch, const double* w, int out_ch, int h, int wd, int dil,
                               double* out) {
  const std::size_t plane = static_cast<std::size_t>(h) * wd;
  for (int o = 0; o < out_ch; ++o)
    for (int i = 0; i < in_ch; ++i)
      for (int ky = 0; ky < 3; ++ky) {
        const int dy = (ky - 1) * dil;
        const int y0 = std::max(0, -dy);
        const int y1 = std::min(h, h - dy);
        for (int kx = 0; kx < 3; ++kx) {
          const int dx = (kx - 1) * dil;
          const int x0 = std::max(0, -dx);
          const int x1 = std::min(wd, wd - dx);
          const double k = w[((static_cast<std::size_t>(o) * in_ch + i) * 3 + ky) * 3 + kx];
          for (int y = y0; y < y1; ++y) {
            double* orow = out + o * plane + static_cast<std::size_t>(y) * wd;
            const double* irow = in + i * plane + static_cast<std::size_t>(y + dy) * wd + dx;
            for (int x = x0; x < x1; ++x) orow[x] += k * irow[x];
          }
        }
      }
}

// Gradients of conv3x3_accumulate w.r.t. weights (accumulated) and, if gin is
// non-null, the input (accumulated).
inline void conv3x3_backward(const double* in, int in_ch, const double* w, int out_ch, int h, int wd, int dil,
                             const double* gout, double* gw, double* gin) {
  const std::size_t plane = static_cast<std::size_t>(h) * wd;
  for (int o = 0; o < out_ch; ++o)
    for (int i = 0; i < in_ch; ++i)
      for (int ky = 0; ky < 3; ++ky) {
        const int dy = (ky - 1) * dil;
        const int y0 = std::max(0, -dy);
        const int y1 = std::min(h, h - dy);
        for (int kx = 0; kx < 3; ++kx) {
          const int dx = (kx - 1) * dil;
          const int x0 = std::max(0, -dx);
          const int x1 = std::min(wd, wd - dx);
          const std::size_t widx = ((static_cast<std::size_t>(o) * in_ch + i) * 3 + ky) * 3 + kx;
          const double k = w[widx];
          double acc = 0.0;
          for (int y = y0; y < y1; ++y) {
            const double* grow = gout + o * plane + static_cast<std::size_t>(y) * wd;
            const double* irow = in + i * plane + static_cast<std::size_t>(y + dy) * wd + dx;
            for (int x = x0; x < x1; ++x) acc += grow[x] * irow[x];
            if (gin) {
              double* girow = gin + i * plane + static_cast<std::size_t>(y + dy) * wd + dx;
              for (int x = x0; x < x1; ++x) girow[x] += k * grow[x];
            }
          }
          gw[widx] += acc;
        }
      }
}

struct LayerLayout {
  int in = 0;
  int out = 0;
  int dilation = 1;
  bool timed = false;
  std::size_t weight = 0;  // out x in x 3 x 3
  std::size_t bias = 0;    // out
  std::size_t time = 0;    // out x embed_dim, when timed
};

inline std::vector<LayerLayout> layer_layout(const ToyArchitecture& arch, int channels, std::size_t* total) {
  std::vector<LayerLayout> layers;
  std::size_t offset = 0;
  const int n = static_cast<int>(arch.dilations.size());
  for (int l = 0; l < n; ++l) {
    LayerLayout L;
    L.in = l == 0 ? channels : arch.hidden;
    L.out = l == n - 1 ? channels : arch.hidden;
    L.dilation = arch.dilations[static_cast<std::size_t>(l)];
    L.timed = l < n - 1;
    L.weight = offset;
    offset += static_cast<std::size_t>(L.out) * L.in * 9;
    L.bias = offset;
    offset += static_cast<std::size_t>(L.out);
    if (L.timed) {
      L.time = offset;
      offset += static_cast<std::size_t>(L.out) * arch.embed_dim;
    }
    layers.push_back(L);
  }
  *total = offset;
  return layers;
}

}  // namespace detail

/// Small trained epsilon predictor. Works on any H x W with the channel count
/// it was trained for; timesteps must lie in [1, T] of its training schedule.
class ToyDenoiser final : public Denoiser {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;
  static constexpr char kMagic[4] = {'I', 'P', 'D', 'N'};

  ToyDenoiser(ToyArchitecture arch, Shape image_shape, int timesteps, std::uint64_t seed,
              VarianceMode mode = VarianceMode::fixed_beta_tilde)
      : Denoiser(mode), arch_(std::move(arch)), shape_(image_shape), timesteps_(timesteps), seed_(seed) {
    arch_.validate();
    if (!shape_.valid()) throw std::invalid_argument("toy denoiser image shape must be positive");
    layers_ = detail::layer_layout(arch_, shape_.channels, &param_count_);
    params_.assign(param_count_, 0.0);
    GaussianNoiseSource rng(seed, 0x746f79);  // "toy"
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& L = layers_[l];
      const bool last = l + 1 == layers_.size();
      const double scale = std::sqrt(2.0 / (L.in * 9.0)) * (last ? 0.1 : 1.0);
      for (std::size_t i = 0; i < static_cast<std::size_t>(L.out) * L.in * 9; ++i) params_[L.weight + i] = scale * rng.next();
      if (L.timed)
        for (std::size_t i = 0; i < static_cast<std::size_t>(L.out) * arch_.embed_dim; ++i)
          params_[L.time + i] = 0.1 * rng.next() / std::sqrt(static_cast<double>(arch_.embed_dim));
    }
  }

  EpsilonPrediction predict(const Tensor& x_t, int t) const override {
    check_input(x_t, t);
    Cache cache;
    forward(x_t, t, cache);
    return {Tensor(x_t.shape(), std::move(cache.output)), variance_mode()};
  }

  std::string digest() const override { return sha256_hex(serialize()); }
  std::string kind() const override { return "toy"; }
  std::optional<Shape> native_shape() const override { return shape_; }

  const ToyArchitecture& architecture() const { return arch_; }
  int timesteps() const { return timesteps_; }
  std::uint64_t seed() const { return seed_; }
  std::span<const double> parameters() const { return params_; }
  std::span<double> parameters() { return params_; }

  nlohmann::json header() const {
    return {{"format", "ipainter-toy-denoiser"},
            {"format_version", kFormatVersion},
            {"architecture", arch_.to_json()},
            {"T", timesteps_},
            {"image_shape", {shape_.channels, shape_.height, shape_.width}},
            {"seed", seed_},
            {"variance_mode", to_string(variance_mode())},
            {"param_count", param_count_}};
  }

  /// "IPDN" | u32 version | u32 header length | JSON header | u64 count | f64 params (little-endian).
  std::vector<std::uint8_t> serialize() const {
    const std::string head = header().dump();
    std::vector<std::uint8_t> out;
    auto put = [&](const void* p, std::size_t n) {
      const auto* b = static_cast<const std::uint8_t*>(p);
      out.insert(out.end(), b, b + n);
    };
    const std::uint32_t version = kFormatVersion;
    const auto head_len = static_cast<std::uint32_t>(head.size());
    const auto count = static_cast<std::uint64_t>(params_.size());
    put(kMagic, 4);
    put(&version, 4);
    put(&head_len, 4);
    put(head.data(), head.size());
    put(&count, 8);
    put(params_.data(), params_.size() * sizeof(double));
    return out;
  }

  static ToyDenoiser deserialize(std::span<const std::uint8_t> bytes) {
    std::size_t pos = 0;
    auto take = [&](void* dst, std::size_t n) {
      if (pos + n > bytes.size()) throw IoError("toy denoiser file truncated");
      std::memcpy(dst, bytes.data() + pos, n);
      pos += n;
    };
    char magic[4];
    take(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw IoError("not a toy denoiser weights file");
    std::uint32_t version = 0;
    take(&version, 4);
    if (version != kFormatVersion) throw IoError("unsupported toy denoiser format version " + std::to_string(version));
    std::uint32_t head_len = 0;
    take(&head_len, 4);
    std::string head(head_len, '\0');
    take(head.data(), head_len);
    const auto h = nlohmann::json::parse(head);
    const auto shape = h.at("image_shape").get<std::vector<int>>();
    if (shape.size() != 3) throw IoError("toy denoiser header: bad image_shape");
    ToyDenoiser d(ToyArchitecture::from_json(h.at("architecture")), Shape{shape[0], shape[1], shape[2]},
                  h.at("T").get<int>(), h.at("seed").get<std::uint64_t>(),
                  parse_variance_mode(h.at("variance_mode").get<std::string>()));
    std::uint64_t count = 0;
    take(&count, 8);
    if (count != d.params_.size()) throw IoError("toy denoiser parameter count does not match architecture");
    take(d.params_.data(), d.params_.size() * sizeof(double));
    if (pos != bytes.size()) throw IoError("trailing bytes after toy denoiser parameters");
    return d;
  }

  void save(const std::filesystem::path& path) const { write_file(path, serialize()); }

  static ToyDenoiser load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(path.string() + ": cannot open file");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
  }

  // Returns the per-sample loss mean((eps_hat - eps)^2) and accumulates
  // scale * dLoss/dparams into grad.
  double loss_and_gradient(const Tensor& x_t, int t, const Tensor& eps, double scale, std::span<double> grad) const {
    check_input(x_t, t);
    Cache cache;
    forward(x_t, t, cache);
    const std::size_t n = x_t.size();
    std::vector<double> g(n);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = cache.output[i] - eps[i];
      loss += d * d;
      g[i] = 2.0 * d / static_cast<double>(n) * scale;
    }
    backward(x_t.shape(), cache, std::move(g), grad);
    return loss / static_cast<double>(n);
  }

 private:
  struct Cache {
    std::vector<double> embedding;
    std::vector<std::vector<double>> inputs;  // layer inputs
    std::vector<std::vector<double>> pre;     // pre-activations of hidden layers
    std::vector<double> output;
  };

  void check_input(const Tensor& x_t, int t) const {
    if (x_t.shape().channels != shape_.channels)
      throw std::invalid_argument("toy denoiser expects " + std::to_string(shape_.channels) + " channels, got " +
                                  std::to_string(x_t.shape().channels));
    if (t < 1 || t > timesteps_)
      throw std::invalid_argument("toy denoiser: timestep " + std::to_string(t) + " out of [1, " +
                                  std::to_string(timesteps_) + "]");
  }

  void forward(const Tensor& x, int t, Cache& cache) const {
    const int h = x.shape().height;
    const int w = x.shape().width;
    const std::size_t plane = x.shape().plane();
    cache.embedding = detail::timestep_embedding(t, arch_.embed_dim);
    std::vector<double> act(x.values().begin(), x.values().end());
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& L = layers_[l];
      std::vector<double> z(static_cast<std::size_t>(L.out) * plane);
      for (int o = 0; o < L.out; ++o) {
        double b = params_[L.bias + static_cast<std::size_t>(o)];
        if (L.timed)
          for (int e = 0; e < arch_.embed_dim; ++e)
            b += params_[L.time + static_cast<std::size_t>(o) * arch_.embed_dim + e] * cache.embedding[static_cast<std::size_t>(e)];
        std::fill(z.begin() + static_cast<std::ptrdiff_t>(o * plane), z.begin() + static_cast<std::ptrdiff_t>((o + 1) * plane), b);
      }
      detail::conv3x3_accumulate(act.data(), L.in, params_.data() + L.weight, L.out, h, w, L.dilation, z.data());
      cache.inputs.push_back(std::move(act));
      if (l + 1 == layers_.size()) {
        cache.output = std::move(z);
        return;
      }
      act.resize(z.size());
      for (std::size_t i = 0; i < z.size(); ++i) act[i] = z[i] * detail::sigmoid(z[i]);
      cache.pre.push_back(std::move(z));
    }
  }

  void backward(Shape shape, const Cache& cache, std::vector<double> g, std::span<double> grad) const {
    const int h = shape.height;
    const int w = shape.width;
    const std::size_t plane = shape.plane();
    for (std::size_t l = layers_.size(); l-- > 0;) {
      const auto& L = layers_[l];
      if (l + 1 < layers_.size()) {
        const auto& z = cache.pre[l];
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double s = detail::sigmoid(z[i]);
          g[i] *= s * (1.0 + z[i] * (1.0 - s));
        }
      }
      for (int o = 0; o < L.out; ++o) {
        double sum = 0.0;
        for (std::size_t i = 0; i < plane; ++i) sum += g[static_cast<std::size_t>(o) * plane + i];
        grad[L.bias + static_cast<std::size_t>(o)] += sum;
        if (L.timed)
          for (int e = 0; e < arch_.embed_dim; ++e)
            grad[L.time + static_cast<std::size_t>(o) * arch_.embed_dim + e] += sum * cache.embedding[static_cast<std::size_t>(e)];
      }
      std::vector<double> gin;
      if (l > 0) gin.assign(static_cast<std::size_t>(L.in) * plane, 0.0);
      detail::conv3x3_backward(cache.inputs[l].data(), L.in, params_.data() + L.weight, L.out, h, w, L.dilation, g.data(),
                               grad.data() + L.weight, l > 0 ? gin.data() : nullptr);
      g = std::move(gin);
    }
  }

  ToyArchitecture arch_;
  Shape shape_;
  int timesteps_;
  std::uint64_t seed_;
  std::vector<detail::LayerLayout> layers_;
  std::size_t param_count_ = 0;
  std::vector<double> params_;
};

struct TrainConfig {
  ToyArchitecture architecture;
  int epochs = 20;
  int batches_per_epoch = 50;
  int batch_size = 8;
  double learning_rate = 2e-3;
  double final_lr_fraction = 0.1;  // cosine decay target
  std::uint64_t seed = 0;
  VarianceMode variance_mode = VarianceMode::fixed_beta_tilde;
};

struct TrainResult {
  std::shared_ptr<ToyDenoiser> denoiser;
  std::vector<double> epoch_loss;  // mean minibatch loss per epoch
};

/// Minimises E ||eps - eps_hat(sqrt(ab_t) x0 + sqrt(1 - ab_t) eps, t)||^2 over
/// uniform t in [1, T] with Adam. Single-threaded and fully determined by
/// config.seed.
inline TrainResult train_toy_denoiser(const std::vector<Tensor>& dataset, const Schedule& schedule,
                                      const TrainConfig& config) {
  if (dataset.empty()) throw std::invalid_argument("training dataset is empty");
  const Shape shape = dataset.front().shape();
  for (const auto& img : dataset) {
    if (img.shape() != shape) throw std::invalid_argument("training images differ in shape");
    for (double v : img.values())
      if (!(v >= -1.0 && v <= 1.0)) throw std::invalid_argument("training images must lie in [-1, 1]");
  }
  if (config.epochs < 1 || config.batches_per_epoch < 1 || config.batch_size < 1)
    throw std::invalid_argument("epochs, batches_per_epoch and batch_size must be positive");

  auto model = std::make_shared<ToyDenoiser>(config.architecture, shape, schedule.timesteps(), config.seed,
                                             config.variance_mode);
  auto params = model->parameters();
  std::vector<double> grad(params.size()), m(params.size(), 0.0), v(params.size(), 0.0);
  constexpr double b1 = 0.9, b2 = 0.999, adam_eps = 1e-8;
  GaussianNoiseSource rng(config.seed, 0x747261696e);  // "train"

  TrainResult result;
  result.denoiser = model;
  const long long total_steps = static_cast<long long>(config.epochs) * config.batches_per_epoch;
  long long step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (int b = 0; b < config.batches_per_epoch; ++b) {
      std::fill(grad.begin(), grad.end(), 0.0);
      double batch_loss = 0.0;
      for (int s = 0; s < config.batch_size; ++s) {
        const Tensor& x0 = dataset[rng.uniform_index(dataset.size())];
        const int t = 1 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(schedule.timesteps())));
        const Tensor eps = rng.normal(shape);
        const Tensor xt = forward_jump(schedule, x0, t, eps);
        batch_loss += model->loss_and_gradient(xt, t, eps, 1.0 / config.batch_size, grad);
      }
      batch_loss /= config.batch_size;
      if (!std::isfinite(batch_loss)) {
        std::ostringstream msg;
        msg << "training diverged: non-finite loss at epoch " << epoch << ", batch " << b << " (step " << step
            << ", lr " << config.learning_rate << ")";
        throw TrainingError(msg.str());
      }
      ++step;
      const double progress = static_cast<double>(step - 1) / std::max<long long>(1, total_steps - 1);
      const double lr = config.learning_rate *
                        (config.final_lr_fraction +
                         (1.0 - config.final_lr_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
      for (std::size_t i = 0; i < params.size(); ++i) {
        m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
        v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
        params[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + adam_eps);
      }
      epoch_loss += batch_loss;
    }
    result.epoch_loss.push_back(epoch_loss / config.batches_per_epoch);
  }
  for (double p : params)
    if (!std::isfinite(p)) throw TrainingError("training produced non-finite parameters");
  return result;
}

}  // namespace ipainter
