#include <gtest/gtest.h>

#include "simcmf/core/archive.hpp"
#include "simcmf/core/ops.hpp"
#include "test_support.hpp"

using namespace simcmf;
using simcmf::testing::numeric_gradient;
using simcmf::testing::random_tensor;

namespace {

// Projects an op's output onto fixed random weights so every output element
// contributes to the checked scalar.
double check_op(const std::function<Tensor()>& op, const std::vector<Tensor>& inputs) {
  Rng rng(99);
  Tensor probe;
  auto scalar = [&]() {
    NoGradGuard guard;
    auto out = op();
    if (!probe.defined()) probe = random_tensor(out.shape(), rng, 1.0, false);
    return ops::sum(ops::mul(out, probe)).item();
  };
  scalar();
  for (auto& t : inputs) t.zero_grad();
  auto out = op();
  ops::sum(ops::mul(out, probe)).backward();
  double worst = 0.0;
  for (auto& t : inputs) {
    auto numeric = numeric_gradient(scalar, t);
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    if (analytic.empty()) analytic.assign(numeric.size(), 0.0);
    worst = std::max(worst, simcmf::testing::max_relative_error(analytic, numeric));
  }
  return worst;
}

constexpr double kTol = 1e-6;

}  // namespace

TEST(Ops, ElementwiseGradients) {
  Rng rng(1);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({3, 4}, rng);
  auto row = random_tensor({4}, rng);
  EXPECT_LT(check_op([&] { return ops::add(a, b); }, {a, b}), kTol);
  EXPECT_LT(check_op([&] { return ops::sub(a, b); }, {a, b}), kTol);
  EXPECT_LT(check_op([&] { return ops::mul(a, b); }, {a, b}), kTol);
  EXPECT_LT(check_op([&] { return ops::scale(a, -2.5); }, {a}), kTol);
  EXPECT_LT(check_op([&] { return ops::add_row(a, row); }, {a, row}), kTol);
  EXPECT_LT(check_op([&] { return ops::gelu(a); }, {a}), kTol);
  EXPECT_LT(check_op([&] { return ops::sigmoid(a); }, {a}), kTol);
  EXPECT_LT(check_op([&] { return ops::relu(a); }, {a}), kTol);
  EXPECT_LT(check_op([&] { return ops::transpose2d(a); }, {a}), kTol);
  EXPECT_LT(check_op([&] { return ops::reshape(a, {2, 6}); }, {a}), kTol);
}

TEST(Ops, LinearAndMatmulGradients) {
  Rng rng(2);
  auto x = random_tensor({5, 3}, rng);
  auto w = random_tensor({4, 3}, rng);
  auto b = random_tensor({4}, rng);
  auto m = random_tensor({3, 6}, rng);
  auto delta = random_tensor({5, 2}, rng);
  EXPECT_LT(check_op([&] { return ops::linear(x, w, b); }, {x, w, b}), kTol);
  EXPECT_LT(check_op([&] { return ops::linear(x, w); }, {x, w}), kTol);
  EXPECT_LT(check_op([&] { return ops::matmul(x, m); }, {x, m}), kTol);
  EXPECT_LT(check_op([&] { return ops::add_columns(ops::linear(x, w), delta, 1); },
                     {x, w, delta}),
            kTol);
}

TEST(Ops, LinearMatchesDefinition) {
  auto x = Tensor::from({1, 2}, {1.0, 2.0});
  auto w = Tensor::from({2, 2}, {1.0, 0.0, 3.0, -1.0});
  auto b = Tensor::from({2}, {0.5, 0.25});
  auto y = ops::linear(x, w, b);
  EXPECT_DOUBLE_EQ(y.at(0), 1.5);
  EXPECT_DOUBLE_EQ(y.at(1), 1.25);
}

TEST(Ops, LayerNormAndAttentionGradients) {
  Rng rng(3);
  auto x = random_tensor({4, 6}, rng);
  auto g = random_tensor({6}, rng);
  auto b = random_tensor({6}, rng);
  EXPECT_LT(check_op([&] { return ops::layer_norm(x, g, b, 1e-6); }, {x, g, b}), kTol);
  auto q = random_tensor({3, 6}, rng);
  auto k = random_tensor({5, 6}, rng);
  auto v = random_tensor({5, 6}, rng);
  EXPECT_LT(check_op([&] { return ops::attention(q, k, v, 2); }, {q, k, v}), kTol);
  EXPECT_LT(check_op([&] { return ops::attention(q, q, q, 3); }, {q}), kTol);
}

TEST(Ops, AttentionRowsAreConvexCombinations) {
  Rng rng(4);
  auto q = random_tensor({2, 4}, rng, 1.0, false);
  auto k = random_tensor({3, 4}, rng, 1.0, false);
  auto v = Tensor::full({3, 4}, 2.0);
  auto out = ops::attention(q, k, v, 2);
  for (double o : out.data()) EXPECT_NEAR(o, 2.0, 1e-12);
}

TEST(Ops, ConvolutionGradients) {
  Rng rng(5);
  auto x = random_tensor({2, 5, 6}, rng);
  auto w = random_tensor({3, 2, 3, 3}, rng);
  auto b = random_tensor({3}, rng);
  EXPECT_LT(check_op([&] { return ops::conv2d(x, w, b, 1, 1); }, {x, w, b}), kTol);
  auto wp = random_tensor({4, 2, 2, 2}, rng);
  auto x4 = random_tensor({2, 4, 6}, rng);
  EXPECT_LT(check_op([&] { return ops::conv2d(x4, wp, Tensor(), 2, 0); }, {x4, wp}), kTol);
  auto wt = random_tensor({2, 3, 2, 2}, rng);
  auto bt = random_tensor({3}, rng);
  EXPECT_LT(check_op([&] { return ops::conv_transpose2x2(x, wt, bt); }, {x, wt, bt}), kTol);
}

TEST(Ops, ConvolutionPreservesSizeWithSymmetricPadding) {
  auto x = Tensor::full({1, 7, 5}, 1.0);
  auto w = Tensor::full({2, 1, 5, 5}, 1.0);
  auto y = ops::conv2d(x, w, Tensor(), 1, 2);
  EXPECT_EQ(y.shape(), (Shape{2, 7, 5}));
  // Center pixel sees the full 5x5 window, the corner only 3x3.
  EXPECT_DOUBLE_EQ(y.at(3 * 5 + 2), 25.0);
  EXPECT_DOUBLE_EQ(y.at(0), 9.0);
}

TEST(Ops, ConcatSliceAndResizeGradients) {
  Rng rng(6);
  auto a = random_tensor({2, 3}, rng);
  auto b = random_tensor({4, 3}, rng);
  EXPECT_LT(check_op([&] { return ops::concat_rows({a, b}); }, {a, b}), kTol);
  EXPECT_LT(check_op([&] { return ops::slice_rows(ops::concat_rows({a, b}), 1, 5); }, {a, b}),
            kTol);
  auto img = random_tensor({2, 4, 5}, rng);
  EXPECT_LT(check_op([&] { return ops::resize_bilinear(img, 8, 10); }, {img}), kTol);
  EXPECT_LT(check_op([&] { return ops::resize_bilinear(img, 3, 2); }, {img}), kTol);
}

TEST(Ops, BilinearUpsampleOfConstantIsConstant) {
  auto img = Tensor::full({1, 3, 3}, 4.0);
  auto up = ops::resize_bilinear(img, 7, 11);
  for (double v : up.data()) EXPECT_DOUBLE_EQ(v, 4.0);
}

TEST(Ops, LossGradients) {
  Rng rng(7);
  auto logits = random_tensor({30}, rng, 2.0);
  auto target = Tensor::zeros({30});
  for (std::int64_t i = 0; i < 30; i += 3) target.mutable_data()[i] = 1.0;
  EXPECT_LT(check_op([&] { return ops::sigmoid_focal_loss(logits, target); }, {logits}), kTol);
  EXPECT_LT(check_op([&] { return ops::dice_loss(logits, target); }, {logits}), kTol);
  EXPECT_LT(check_op([&] { return ops::mse_loss(logits, target); }, {logits}), kTol);
}

TEST(Ops, FocalLossMatchesReferenceValue) {
  // Single element: x = 0, t = 1 -> p = 0.5, ce = ln 2, (1 - p_t)^2 = 0.25,
  // alpha_t = 0.25.
  auto x = Tensor::from({1}, {0.0});
  auto t = Tensor::from({1}, {1.0});
  EXPECT_NEAR(ops::sigmoid_focal_loss(x, t).item(), 0.25 * 0.25 * std::log(2.0), 1e-15);
}

TEST(Ops, DiceLossOfPerfectConfidentPrediction) {
  auto x = Tensor::from({4}, {40.0, 40.0, -40.0, -40.0});
  auto t = Tensor::from({4}, {1.0, 1.0, 0.0, 0.0});
  EXPECT_NEAR(ops::dice_loss(x, t).item(), 0.0, 1e-12);
}

TEST(Ops, NoGradGuardSkipsRecording) {
  auto a = Tensor::full({2}, 1.0, true);
  NoGradGuard guard;
  auto b = ops::scale(a, 2.0);
  EXPECT_FALSE(b.requires_grad());
}

TEST(Ops, SharedSubgraphAccumulates) {
  auto a = Tensor::from({1}, {3.0}, true);
  auto b = ops::mul(a, a);
  auto c = ops::add(b, a);
  c.backward();
  EXPECT_DOUBLE_EQ(a.grad()[0], 7.0);
}

TEST(Ops, ShapeMismatchThrows) {
  EXPECT_THROW(ops::add(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
  EXPECT_THROW(ops::linear(Tensor::zeros({2, 3}), Tensor::zeros({4, 2})), ShapeError);
  EXPECT_THROW(ops::attention(Tensor::zeros({2, 5}), Tensor::zeros({2, 5}), Tensor::zeros({2, 5}), 2),
               ShapeError);
}
