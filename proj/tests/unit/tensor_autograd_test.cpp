#include <gtest/gtest.h>

#include "hct/autograd.hpp"
#include "hct/errors.hpp"
#include "hct/primitives.hpp"
#include "test_util.hpp"

namespace {

using hct::Tensor;
using hct::ad::Var;

TEST(Tensor, ShapeAndFill) {
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_DOUBLE_EQ(t.at(1, 2), 1.5);
  EXPECT_THROW(Tensor({2, 0}), hct::DimensionError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), hct::DimensionError);
}

TEST(Tensor, ReshapeKeepsOrder) {
  Tensor t({2, 3}, std::vector<double>{0, 1, 2, 3, 4, 5});
  Tensor r = t.reshaped({3, 2});
  EXPECT_DOUBLE_EQ(r.at(2, 1), 5.0);
  EXPECT_THROW(t.reshaped({4, 2}), hct::DimensionError);
}

TEST(Tensor, NchwIndexing) {
  Tensor t({2, 3, 4, 5});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i);
  EXPECT_DOUBLE_EQ(t.at(1, 2, 3, 4), ((1 * 3 + 2) * 4 + 3) * 5 + 4);
}

TEST(Autograd, SharedInputAccumulates) {
  // loss = sum(w * (x + x)) -> dloss/dx = 2w
  Var x = Var::parameter(Tensor({3}, std::vector<double>{1, 2, 3}));
  Tensor w({3}, std::vector<double>{0.5, -1, 2});
  hct::ad::backward(hct::nn::weighted_sum(hct::nn::add(x, x), w));
  const Tensor g = x.grad();
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(g[i], 2 * w[i]);
}

TEST(Autograd, GradientsSumAcrossBackwardCalls) {
  Var x = Var::parameter(Tensor({2}, 1.0));
  Tensor w({2}, std::vector<double>{1, 3});
  hct::ad::backward(hct::nn::weighted_sum(x, w));
  hct::ad::backward(hct::nn::weighted_sum(x, w));
  EXPECT_DOUBLE_EQ(x.grad()[1], 6.0);
  x.zero_grad();
  EXPECT_DOUBLE_EQ(x.grad()[1], 0.0);
}

TEST(Autograd, ConstantsRecordNoGraph) {
  Var a = Var::constant(Tensor({2}, 1.0));
  Var b = hct::nn::gelu(a);
  EXPECT_FALSE(b.requires_grad());
  EXPECT_EQ(b.node()->parents.size(), 0u);
}

TEST(Autograd, DiamondGraph) {
  // y = gelu(x) + x; dy/dx = gelu'(x) + 1
  Var x = Var::parameter(Tensor({1}, 0.0));
  hct::ad::backward(hct::nn::weighted_sum(hct::nn::add(hct::nn::gelu(x), x), Tensor({1}, 1.0)));
  EXPECT_NEAR(x.grad()[0], 1.5, 1e-15);  // gelu'(0) = 0.5
}

TEST(Autograd, NonScalarRootRejected) {
  Var x = Var::parameter(Tensor({2}, 1.0));
  EXPECT_THROW(hct::ad::backward(hct::nn::gelu(x)), hct::DimensionError);
}

}  // namespace
