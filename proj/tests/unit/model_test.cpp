#include <gtest/gtest.h>

#include <fstream>

#include "hct/checkpoint.hpp"
#include "hct/errors.hpp"
#include "hct/model.hpp"
#include "test_util.hpp"

namespace {

using hct::Shape;
using hct::Tensor;
using hct::ad::Var;
namespace model = hct::model;

model::ModelConfig small_config(model::Variant v, std::size_t size = 32) {
  model::ModelConfig c;
  c.h = c.w = size;
  c.d_embed = 16;
  c.depth = 1;
  c.n_heads = 2;
  c.backbone_widths = {4, 4, 8, 8};
  c.variant = v;
  c.seed = 3;
  return c;
}

void expect_probability_map(const Tensor& p, std::size_t b, std::size_t h, std::size_t w) {
  ASSERT_EQ(p.shape(), (Shape{b, 2, h, w}));
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t i = 0; i < h * w; ++i) {
      const double a = p[(s * 2) * h * w + i], c = p[(s * 2 + 1) * h * w + i];
      EXPECT_NEAR(a + c, 1.0, 1e-6);
      EXPECT_GE(a, 0.0);
      EXPECT_GE(c, 0.0);
    }
}

TEST(Backbone, DefaultWidthShapes) {
  std::mt19937_64 rng(1);
  hct::nn::ParamStore store;
  auto bb = model::Backbone::create(store, "b", 1, {16, 32, 64, 128}, rng);
  const auto out = bb(Var::constant(Tensor({1, 1, 64, 64}, 0.3)));
  EXPECT_EQ(out.deep.shape(), (Shape{1, 128, 4, 4}));
  EXPECT_EQ(out.skip.shape(), (Shape{1, 32, 16, 16}));
}

TEST(Hct, TokenCountsAtFullWidth) {
  model::ModelConfig cfg;  // D = 256, T = 4, 64x64
  auto m = model::Model::build(cfg);
  std::mt19937_64 rng(2);
  const Tensor pet = hct::testing::random_tensor({2, 1, 64, 64}, rng, 0, 1);
  const Tensor ct = hct::testing::random_tensor({2, 1, 64, 64}, rng, 0, 1);
  model::ForwardTrace trace;
  const Tensor p = m.forward(pet, ct, &trace).value();
  ASSERT_EQ(trace.branch_tokens.size(), 3u);
  for (const auto& t : trace.branch_tokens) EXPECT_EQ(t.shape(), (Shape{2, 16, 256}));
  EXPECT_EQ(trace.decoder_tokens, 48u);
  ASSERT_FALSE(trace.decoder_attention.empty());
  EXPECT_EQ(trace.decoder_attention.front().shape(), (Shape{48, 48}));
  EXPECT_EQ(trace.decoder_output.shape(), (Shape{2, 16, 256}));
  expect_probability_map(p, 2, 64, 64);
}

TEST(Variants, AllEmitProbabilityMaps) {
  std::mt19937_64 rng(4);
  const Tensor pet = hct::testing::random_tensor({2, 1, 32, 32}, rng, 0, 1);
  const Tensor ct = hct::testing::random_tensor({2, 1, 32, 32}, rng, 0, 1);
  for (const auto& name : model::variant_names()) {
    SCOPED_TRACE(name);
    auto m = model::Model::build(small_config(model::parse_variant(name)));
    expect_probability_map(m.forward(pet, ct).value(), 2, 32, 32);
  }
}

TEST(Variants, Parsing) {
  EXPECT_EQ(model::parse_variant("HF-TN"), model::Variant::HCT);
  EXPECT_EQ(model::parse_variant("LF-FCN"), model::Variant::LF_FCN);
  try {
    model::parse_variant("bogus");
    FAIL() << "expected ConfigError";
  } catch (const hct::ConfigError& e) {
    const std::string msg = e.what();
    for (const auto& n : model::variant_names()) EXPECT_NE(msg.find(n), std::string::npos) << n;
  }
}

TEST(Config, Validation) {
  model::ModelConfig c;
  c.h = 60;
  EXPECT_THROW(c.validate(), hct::ConfigError);
  c = {};
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), hct::ConfigError);
  c = {};
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(model::model_config_from_json(model::to_json(small_config(model::Variant::LF_TN))),
            small_config(model::Variant::LF_TN));
}

TEST(ZeroIdentities, TransformerModulesBecomeIdentity) {
  auto m = model::Model::build(small_config(model::Variant::HCT));
  m.zero_transformer_sub_blocks();
  std::mt19937_64 rng(5);
  const auto modules = m.network().transformer_modules();
  ASSERT_EQ(modules.size(), 4u);
  for (const auto* t : modules) {
    const Tensor x = hct::testing::random_tensor({2, 4, 16}, rng);
    EXPECT_EQ((*t)(Var::constant(x)).value(), x);
  }
}

TEST(ZeroIdentities, ZeroClassifierGivesHalf) {
  std::mt19937_64 rng(6);
  const Tensor pet = hct::testing::random_tensor({1, 1, 32, 32}, rng, 0, 1);
  const Tensor ct = hct::testing::random_tensor({1, 1, 32, 32}, rng, 0, 1);
  for (const auto& name : model::variant_names()) {
    SCOPED_TRACE(name);
    auto m = model::Model::build(small_config(model::parse_variant(name)));
    m.zero_classifiers();
    const Tensor p = m.forward(pet, ct).value();
    for (double v : p.values()) EXPECT_EQ(v, 0.5);
  }
}

TEST(Head, SkipDimsChecked) {
  std::mt19937_64 rng(7);
  hct::nn::ParamStore store;
  auto head = model::SegmentationHead::create(store, "h", small_config(model::Variant::HCT), 4, rng);
  EXPECT_THROW(head(Var::constant(Tensor({1, 16, 2, 2})), Var::constant(Tensor({1, 4, 4, 4})), 32, 32),
               hct::DimensionError);
  EXPECT_EQ(head(Var::constant(Tensor({1, 16, 2, 2})), Var::constant(Tensor({1, 4, 8, 8})), 32, 32).shape(),
            (Shape{1, 2, 32, 32}));
}

TEST(Build, SeededAndFloat32) {
  auto a = model::Model::build(small_config(model::Variant::EF_TN));
  auto b = model::Model::build(small_config(model::Variant::EF_TN));
  ASSERT_EQ(a.params().size(), b.params().size());
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    const Tensor& v = a.params().entries()[i].second.value();
    EXPECT_EQ(v, b.params().entries()[i].second.value());
    for (double x : v.values()) EXPECT_EQ(static_cast<double>(static_cast<float>(x)), x);
  }
}

TEST(Checkpoint, BitExactRoundTrip) {
  hct::testing::TempDir dir("ckpt");
  auto m = model::Model::build(small_config(model::Variant::HCT));
  model::write_checkpoint(dir / "m.ckpt", model::snapshot(m, {}, {{"epoch", 3}}));
  const auto back = model::read_checkpoint(dir / "m.ckpt");
  EXPECT_EQ(back.extra.at("epoch"), 3);
  EXPECT_EQ(model::model_config_from_json(back.config), m.config());
  auto fresh = model::Model::build([&] {
    auto c = small_config(model::Variant::HCT);
    c.seed = 99;
    return c;
  }());
  model::load_parameters(fresh, back);
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    EXPECT_EQ(fresh.params().entries()[i].second.value(), m.params().entries()[i].second.value());
  }
}

TEST(Checkpoint, ShapeMismatchRejected) {
  auto m = model::Model::build(small_config(model::Variant::HCT));
  auto cfg = small_config(model::Variant::HCT);
  cfg.d_embed = 32;
  auto other = model::Model::build(cfg);
  EXPECT_THROW(model::load_parameters(other, model::snapshot(m)), hct::FormatError);
  auto ef = model::Model::build(small_config(model::Variant::EF_TN));
  EXPECT_THROW(model::load_parameters(ef, model::snapshot(m)), hct::FormatError);
}

TEST(Checkpoint, TruncatedAndTrailingBytes) {
  hct::testing::TempDir dir("ckpt_bad");
  auto m = model::Model::build(small_config(model::Variant::EF_FCN));
  const auto path = dir / "m.ckpt";
  model::write_checkpoint(path, model::snapshot(m));
  const auto size = std::filesystem::file_size(path);
  std::ofstream(path, std::ios::app | std::ios::binary) << 'x';
  EXPECT_THROW(model::read_checkpoint(path), hct::FormatError);
  std::filesystem::resize_file(path, size - 8);
  EXPECT_THROW(model::read_checkpoint(path), hct::FormatError);
}

}  // namespace
