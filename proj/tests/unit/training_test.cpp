#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "hct/errors.hpp"
#include "hct/training.hpp"
#include "test_util.hpp"

namespace {

using hct::Tensor;
namespace train = hct::train;
namespace model = hct::model;

model::ModelConfig tiny_model() {
  model::ModelConfig c;
  c.h = c.w = 32;
  c.d_embed = 16;
  c.depth = 1;
  c.n_heads = 2;
  c.backbone_widths = {4, 4, 8, 8};
  c.seed = 5;
  return c;
}

train::TrainConfig tiny_train(std::size_t epochs) {
  train::TrainConfig c;
  c.epochs = epochs;
  c.lr0 = 1e-3;
  c.seed = 11;
  c.log_timing = false;
  return c;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TEST(CrossEntropy, UniformPredictionIsLn2) {
  const Tensor probs({2, 2, 4, 4}, 0.5);
  Tensor mask({2, 4, 4});
  for (std::size_t i = 0; i < mask.size(); i += 3) mask[i] = 1.0;
  EXPECT_NEAR(train::cross_entropy(probs, mask), std::log(2.0), 1e-9);
}

TEST(CrossEntropy, MatchesPixelLoop) {
  std::mt19937_64 rng(1);
  Tensor probs({1, 2, 3, 3});
  Tensor mask({3, 3});
  for (std::size_t i = 0; i < 9; ++i) {
    const double p = std::uniform_real_distribution<double>(0.01, 0.99)(rng);
    probs[i] = 1 - p;
    probs[9 + i] = p;
    mask[i] = i % 2;
  }
  double ref = 0;
  for (std::size_t i = 0; i < 9; ++i) ref -= std::log(mask[i] == 1 ? probs[9 + i] : probs[i]);
  EXPECT_NEAR(train::cross_entropy(probs, mask), ref / 9, 1e-15);
  EXPECT_THROW(train::cross_entropy(probs, Tensor({2, 3, 3})), hct::DimensionError);
}

TEST(CrossEntropy, FloorAvoidsInfinity) {
  Tensor probs({1, 2, 1, 1}, std::vector<double>{1.0, 0.0});
  const double loss = train::cross_entropy(probs, Tensor({1, 1}, 1.0));
  EXPECT_NEAR(loss, -std::log(1e-12), 1e-9);
}

TEST(CrossEntropy, GradientMatchesFiniteDifference) {
  std::mt19937_64 rng(2);
  Tensor probs = hct::testing::random_tensor({1, 2, 2, 2}, rng, 0.1, 0.9);
  const Tensor mask({2, 2}, std::vector<double>{1, 0, 0, 1});
  auto p = hct::ad::Var::parameter(probs);
  hct::ad::backward(train::cross_entropy(p, mask));
  const Tensor g = p.grad();
  for (std::size_t i = 0; i < probs.size(); ++i) {
    Tensor up = probs, down = probs;
    up[i] += 1e-6;
    down[i] -= 1e-6;
    const double num = (train::cross_entropy(up, mask) - train::cross_entropy(down, mask)) / 2e-6;
    EXPECT_NEAR(g[i], num, 1e-6);
  }
}

TEST(PolyLr, Schedule) {
  EXPECT_DOUBLE_EQ(train::poly_lr(0, 100, 1e-4, 0.9), 1e-4);
  EXPECT_DOUBLE_EQ(train::poly_lr(100, 100, 1e-4, 0.9), 0.0);
  EXPECT_NEAR(train::poly_lr(50, 100, 1e-4, 0.9), 1e-4 * std::pow(0.5, 0.9), 1e-18);
  EXPECT_THROW(train::poly_lr(101, 100, 1e-4, 0.9), hct::ArgumentError);
}

// Scalar Adam written out by hand.
struct ScalarAdam {
  double m = 0, v = 0;
  int t = 0;
  double step(double p, double g, double lr, const train::TrainConfig& c) {
    if (!c.decoupled_weight_decay) g += c.weight_decay * p;
    ++t;
    m = c.adam_beta1 * m + (1 - c.adam_beta1) * g;
    v = c.adam_beta2 * v + (1 - c.adam_beta2) * g * g;
    const double mh = m / (1 - std::pow(c.adam_beta1, t)), vh = v / (1 - std::pow(c.adam_beta2, t));
    double next = p - lr * mh / (std::sqrt(vh) + c.adam_eps);
    if (c.decoupled_weight_decay) next -= lr * c.weight_decay * p;
    return next;
  }
};

TEST(Adam, MatchesHandUpdate) {
  for (bool decoupled : {true, false}) {
    train::TrainConfig cfg;
    cfg.weight_decay = 0.1;
    cfg.decoupled_weight_decay = decoupled;
    Tensor p({2}, std::vector<double>{0.5, -1.5});
    train::OptimState state;
    ScalarAdam a, b;
    double ra = 0.5, rb = -1.5;
    const double grads[3][2] = {{0.3, -0.2}, {0.1, 0.4}, {-0.5, 0.05}};
    for (const auto& g : grads) {
      train::adam_step({&p}, {Tensor({2}, std::vector<double>{g[0], g[1]})}, state, 1e-2, cfg);
      ra = a.step(ra, g[0], 1e-2, cfg);
      rb = b.step(rb, g[1], 1e-2, cfg);
    }
    EXPECT_NEAR(p[0], ra, 1e-15);
    EXPECT_NEAR(p[1], rb, 1e-15);
    EXPECT_EQ(state.step, 3u);
  }
}

TEST(Adam, FirstStepMovesByLr) {
  train::TrainConfig cfg;
  cfg.weight_decay = 0;
  Tensor p({1}, 1.0);
  train::OptimState state;
  train::adam_step({&p}, {Tensor({1}, 123.0)}, state, 1e-3, cfg);
  EXPECT_NEAR(p[0], 1.0 - 1e-3, 1e-10);
}

TEST(TrainConfig, JsonAndValidation) {
  auto c = tiny_train(3);
  c.augment = false;
  EXPECT_EQ(train::train_config_from_json(train::to_json(c)), c);
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), hct::ConfigError);
}

TEST(Train, LossDecreasesAndLogWritten) {
  hct::testing::TempDir dir("train");
  auto m = model::Model::build(tiny_model());
  const auto ds = hct::data::generate_phantom(1, 2, 2, 32, 32);
  auto cfg = tiny_train(6);
  cfg.augment = false;
  const auto r = train::train(m, ds.samples, cfg, {dir.path(), std::nullopt});
  ASSERT_EQ(r.log.size(), 6u);
  EXPECT_LT(r.log.back().mean_loss, r.log.front().mean_loss);
  EXPECT_EQ(r.state.step, 12u);
  const std::string csv = read_file(dir / "train_log.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,mean_loss,lr,seconds");
  EXPECT_TRUE(std::filesystem::exists(dir / "checkpoint.ckpt"));
}

TEST(Train, DeterministicLogAndWeights) {
  hct::testing::TempDir a("det_a"), b("det_b");
  const auto ds = hct::data::generate_phantom(2, 2, 2, 32, 32);
  auto m1 = model::Model::build(tiny_model()), m2 = model::Model::build(tiny_model());
  train::train(m1, ds.samples, tiny_train(3), {a.path(), std::nullopt});
  train::train(m2, ds.samples, tiny_train(3), {b.path(), std::nullopt});
  EXPECT_EQ(read_file(a / "train_log.csv"), read_file(b / "train_log.csv"));
  for (std::size_t i = 0; i < m1.params().size(); ++i) {
    EXPECT_EQ(m1.params().entries()[i].second.value(), m2.params().entries()[i].second.value());
  }
}

TEST(Train, ResumeMatchesUninterrupted) {
  hct::testing::TempDir full("full"), part("part");
  const auto ds = hct::data::generate_phantom(3, 3, 1, 32, 32);
  auto cfg = tiny_train(4);
  cfg.checkpoint_every = 2;

  auto m1 = model::Model::build(tiny_model());
  const auto whole = train::train(m1, ds.samples, cfg, {full.path(), std::nullopt});

  auto m2 = model::Model::build(tiny_model());
  const auto ckpt = model::read_checkpoint(full / "checkpoint_epoch_2.ckpt");
  const auto resumed = train::train(m2, ds.samples, cfg, {part.path(), ckpt});
  ASSERT_EQ(resumed.log.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(resumed.log[i].epoch, whole.log[i + 2].epoch);
    EXPECT_NEAR(resumed.log[i].mean_loss, whole.log[i + 2].mean_loss, 1e-6);
  }
  for (std::size_t i = 0; i < m1.params().size(); ++i) {
    EXPECT_EQ(m1.params().entries()[i].second.value(), m2.params().entries()[i].second.value());
  }
}

TEST(Train, NonFiniteLossNamesStep) {
  auto m = model::Model::build(tiny_model());
  hct::ad::Var w = m.params().entries().front().second;
  w.mutable_value()[0] = std::numeric_limits<double>::quiet_NaN();
  const auto ds = hct::data::generate_phantom(4, 1, 2, 32, 32);
  try {
    train::train(m, ds.samples, tiny_train(1));
    FAIL() << "expected NumericalError";
  } catch (const hct::NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1, step 1"), std::string::npos) << e.what();
  }
}

TEST(Batch, StacksSamples) {
  const auto ds = hct::data::generate_phantom(5, 1, 3, 32, 32);
  const auto b = train::make_batch({&ds.samples[0], &ds.samples[2]});
  EXPECT_EQ(b.pet.shape(), (hct::Shape{2, 1, 32, 32}));
  EXPECT_EQ(b.mask.shape(), (hct::Shape{2, 32, 32}));
  EXPECT_EQ(b.ct[32 * 32 + 5], ds.samples[2].ct[5]);
}

}  // namespace
