#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <vector>

#include "ipainter/datasets.hpp"
#include "ipainter/denoiser_factory.hpp"
#include "ipainter/toy_denoiser.hpp"
#include "test_support.hpp"

using namespace ipainter;

namespace {

ToyArchitecture small_arch() {
  ToyArchitecture a;
  a.hidden = 6;
  a.embed_dim = 8;
  return a;
}

}  // namespace

TEST(ToyDenoiser, UntrainedOutputShapeAndFinite) {
  const ToyDenoiser d(ToyArchitecture{}, Shape{3, 16, 16}, 250, 1);
  GaussianNoiseSource rng(1);
  const Tensor x = rng.normal(Shape{3, 16, 16});
  for (int t : {1, 125, 250}) {
    const auto eps = d.predict(x, t).epsilon;
    EXPECT_EQ(eps.shape(), x.shape());
    EXPECT_TRUE(eps.all_finite());
  }
  // Fully convolutional: other spatial sizes work too.
  EXPECT_EQ(d.predict(rng.normal(Shape{3, 9, 12}), 7).epsilon.shape(), (Shape{3, 9, 12}));
  EXPECT_THROW(d.predict(rng.normal(Shape{1, 16, 16}), 7), std::invalid_argument);
  EXPECT_THROW(d.predict(x, 0), std::invalid_argument);
  EXPECT_THROW(d.predict(x, 251), std::invalid_argument);
}

// Central differences against the hand-written backward pass.
TEST(ToyDenoiser, GradientMatchesFiniteDifferences) {
  ToyDenoiser d(small_arch(), Shape{2, 6, 5}, 50, 3);
  GaussianNoiseSource rng(2);
  const Tensor x = rng.normal(Shape{2, 6, 5});
  const Tensor eps = rng.normal(Shape{2, 6, 5});
  auto params = d.parameters();
  for (double& p : params) p += 0.05 * rng.next();  // move off the initial point
  std::vector<double> grad(params.size(), 0.0);
  d.loss_and_gradient(x, 17, eps, 1.0, grad);
  std::vector<double> scratch(params.size());
  double worst = 0;
  for (std::size_t i = 0; i < params.size(); i += 7) {
    const double keep = params[i];
    const double h = 1e-5;
    params[i] = keep + h;
    const double up = d.loss_and_gradient(x, 17, eps, 0.0, scratch);
    params[i] = keep - h;
    const double down = d.loss_and_gradient(x, 17, eps, 0.0, scratch);
    params[i] = keep;
    const double numeric = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(numeric - grad[i]) / std::max(1e-6, std::abs(numeric) + std::abs(grad[i])));
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(ToyDenoiser, SerializationRoundTrip) {
  ToyDenoiser d(small_arch(), Shape{1, 8, 8}, 40, 9, VarianceMode::fixed_beta);
  const auto dir = test::scratch_dir("toy");
  d.save(dir / "w.bin");
  const auto back = ToyDenoiser::load(dir / "w.bin");
  EXPECT_EQ(back.digest(), d.digest());
  EXPECT_EQ(back.variance_mode(), VarianceMode::fixed_beta);
  EXPECT_EQ(back.timesteps(), 40);
  GaussianNoiseSource rng(3);
  const Tensor x = rng.normal(Shape{1, 8, 8});
  EXPECT_EQ(back.predict(x, 11).epsilon, d.predict(x, 11).epsilon);
  EXPECT_EQ(d.header()["param_count"].get<std::size_t>(), d.parameters().size());

  auto bytes = d.serialize();
  bytes[0] = 'X';
  EXPECT_THROW(ToyDenoiser::deserialize(bytes), IoError);
  bytes = d.serialize();
  bytes.pop_back();
  EXPECT_THROW(ToyDenoiser::deserialize(bytes), IoError);
  bytes = d.serialize();
  bytes.push_back(0);
  EXPECT_THROW(ToyDenoiser::deserialize(bytes), IoError);
  EXPECT_THROW(ToyDenoiser::load(dir / "missing.bin"), IoError);
}

TEST(ToyDenoiser, FactoryOverridesVarianceMode) {
  ToyDenoiser d(small_arch(), Shape{1, 8, 8}, 40, 9);
  const auto dir = test::scratch_dir("toy_factory");
  d.save(dir / "w.bin");
  const auto loaded = load_denoiser((dir / "w.bin").string(), 250, VarianceMode::fixed_beta);
  EXPECT_EQ(loaded.schedule.timesteps(), 40);
  EXPECT_EQ(loaded.denoiser->variance_mode(), VarianceMode::fixed_beta);
  GaussianNoiseSource rng(4);
  const Tensor x = rng.normal(Shape{1, 8, 8});
  EXPECT_EQ(loaded.denoiser->predict(x, 3).epsilon, d.predict(x, 3).epsilon);
  EXPECT_EQ(load_denoiser("gmm:standard", 30).schedule.timesteps(), 30);
  EXPECT_EQ(load_denoiser(R"(gmm:{"weights":[1.0],"means":[[0.2]],"sigma":[0.5]})").denoiser->kind(), "gmm");
  EXPECT_THROW(load_denoiser((dir / "nope.bin").string()), IoError);
}

TEST(Training, ConstantDatasetBeatsNoiseVariance) {
  const Shape shape{1, 8, 8};
  const auto schedule = Schedule::linear(50);
  TrainConfig cfg;
  cfg.architecture = small_arch();
  cfg.epochs = 10;
  cfg.batches_per_epoch = 30;
  cfg.learning_rate = 5e-3;
  cfg.seed = 5;
  const auto result = train_toy_denoiser(datasets::constant(shape, 0.6, 16), schedule, cfg);
  GaussianNoiseSource rng(6);
  const Tensor x0(shape, 0.6);
  double mse = 0;
  const int draws = 200;
  for (int i = 0; i < draws; ++i) {
    const int t = 1 + rng.uniform_index(50);
    const Tensor eps = rng.normal(shape);
    const auto pred = result.denoiser->predict(forward_jump(schedule, x0, t, eps), t).epsilon;
    for (std::size_t k = 0; k < eps.size(); ++k) mse += (pred[k] - eps[k]) * (pred[k] - eps[k]);
  }
  mse /= draws * static_cast<double>(shape.size());
  EXPECT_LE(mse, 0.5);
}

TEST(Training, SmoothedLossNonIncreasing) {
  const Shape shape{1, 8, 8};
  GaussianNoiseSource data_rng(7);
  const auto data = datasets::two_gaussians(shape, 64, data_rng);
  TrainConfig cfg;
  cfg.architecture = small_arch();
  cfg.epochs = 30;
  cfg.batches_per_epoch = 60;
  cfg.learning_rate = 1e-3;
  cfg.seed = 8;
  const auto result = train_toy_denoiser(data, Schedule::linear(50), cfg);
  ASSERT_EQ(result.epoch_loss.size(), 30u);
  std::vector<double> smooth;
  for (std::size_t i = 10; i <= result.epoch_loss.size(); ++i) {
    double s = 0;
    for (std::size_t k = i - 10; k < i; ++k) s += result.epoch_loss[k];
    smooth.push_back(s / 10);
  }
  for (std::size_t i = 1; i < smooth.size(); ++i) EXPECT_LE(smooth[i], smooth[i - 1]) << i;
}

TEST(Training, Deterministic) {
  const Shape shape{1, 8, 8};
  TrainConfig cfg;
  cfg.architecture = small_arch();
  cfg.epochs = 2;
  cfg.batches_per_epoch = 5;
  cfg.seed = 10;
  const auto data = datasets::constant(shape, -0.3, 4);
  const auto a = train_toy_denoiser(data, Schedule::linear(20), cfg);
  const auto b = train_toy_denoiser(data, Schedule::linear(20), cfg);
  EXPECT_EQ(a.denoiser->digest(), b.denoiser->digest());
  EXPECT_EQ(a.epoch_loss, b.epoch_loss);
}

TEST(Training, Errors) {
  const auto schedule = Schedule::linear(20);
  TrainConfig cfg;
  cfg.architecture = small_arch();
  EXPECT_THROW(train_toy_denoiser({}, schedule, cfg), std::invalid_argument);
  EXPECT_THROW(train_toy_denoiser({Tensor(Shape{1, 8, 8}), Tensor(Shape{1, 8, 9})}, schedule, cfg),
               std::invalid_argument);
  EXPECT_THROW(train_toy_denoiser({Tensor(Shape{1, 8, 8}, 1.5)}, schedule, cfg), std::invalid_argument);

  cfg.learning_rate = 1e200;
  cfg.epochs = 3;
  cfg.batches_per_epoch = 5;
  try {
    train_toy_denoiser(datasets::constant(Shape{1, 8, 8}, 0.5, 4), schedule, cfg);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos);
  }
}

TEST(Datasets, ShapesAndRanges) {
  GaussianNoiseSource rng(11);
  for (const auto& img : datasets::two_shapes(Shape{1, 32, 32}, 10, rng)) {
    int bright = 0;
    for (double v : img.values()) {
      EXPECT_TRUE(v == 0.6 || v == -0.6);
      bright += v > 0;
    }
    EXPECT_GT(bright, 0);
  }
  for (const auto& img : datasets::two_gaussians(Shape{3, 4, 4}, 10, rng))
    for (double v : img.values()) EXPECT_LE(std::abs(v), 1.0);
  EXPECT_THROW(datasets::two_shapes(Shape{1, 4, 4}, 1, rng), std::invalid_argument);
}
