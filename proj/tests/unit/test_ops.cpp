#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "fpcnet/autodiff.hpp"
#include "fpcnet/verify/gradcheck.hpp"
#include "fpcnet/verify/oracles.hpp"

using namespace fpcnet;
using namespace fpcnet::ops;

// ---------------------------------------------------------------------------
// conv2d

TEST(Conv2d, EffectiveKernelSize) {
  EXPECT_EQ(effective_kernel_size(3, 4), 9u);
  const std::size_t expected[] = {3, 5, 7, 9};
  for (std::size_t r = 1; r <= 4; ++r) EXPECT_EQ(effective_kernel_size(3, r), expected[r - 1]);
  EXPECT_EQ(effective_kernel_size(1, 4), 1u);
}

TEST(Conv2d, PointwiseIdentityForAnyDilation) {
  Rng rng(3);
  auto x = randn<float>({2, 1, 6, 5}, 0, 1, rng);
  TensorF w(Shape{1, 1, 1, 1}, 1.0f), b(Shape{1}, 0.0f);
  for (std::size_t r = 1; r <= 4; ++r) EXPECT_EQ(conv2d(x, w, b, ConvSpec{r, 0, 1}), x);
}

TEST(Conv2d, MatchesDirectSumOracle) {
  Rng rng(17);
  auto x = randn<float>({1, 1, 7, 7}, 0, 1, rng);
  auto w = randn<float>({1, 1, 3, 3}, 0, 1, rng);
  auto b = randn<float>({1}, 0, 1, rng);
  auto y = conv2d(x, w, b, ConvSpec{2, 2, 1});
  auto ref = verify::conv2d_oracle(x, w, &b, 2, 2);
  ASSERT_EQ(y.shape(), ref.shape());
  EXPECT_LE(max_abs_diff(y, ref), 1e-5f);
}

TEST(Conv2d, OracleSweepOverKernelsAndRates) {
  Rng rng(99);
  for (std::size_t k : {1u, 3u})
    for (std::size_t r = 1; r <= 4; ++r) {
      auto x = randn<float>({2, 3, 11, 9}, 0, 1, rng);
      auto w = randn<float>({4, 3, k, k}, 0, 1, rng);
      auto b = randn<float>({4}, 0, 1, rng);
      const auto s = ConvSpec::same(k, r);
      auto y = conv2d(x, w, b, s);
      auto ref = verify::conv2d_oracle(x, w, &b, r, s.padding);
      ASSERT_EQ(y.shape(), (Shape{2, 4, 11, 9}));
      EXPECT_LE(max_abs_diff(y, ref), 1e-5f) << "k=" << k << " r=" << r;
      EXPECT_LE(max_abs_diff(conv2d_direct(x, w, &b, s), ref), 1e-5f);
    }
}

TEST(Conv2d, OutputExtentFormula) {
  Rng rng(5);
  for (std::size_t k : {1u, 3u, 5u})
    for (std::size_t r = 1; r <= 4; ++r)
      for (std::size_t p = 0; p <= 4; ++p) {
        const std::size_t H = 13;
        const std::size_t keff = k + (k - 1) * (r - 1);
        if (H + 2 * p < keff) {
          EXPECT_THROW(conv_output_extent(H, k, {r, p, 1}), ShapeError);
          continue;
        }
        auto x = randn<float>({1, 1, H, H}, 0, 1, rng);
        auto w = randn<float>({2, 1, k, k}, 0, 1, rng);
        auto y = conv2d(x, w, nullptr, ConvSpec{r, p, 1});
        EXPECT_EQ(y.dim(2), H + 2 * p - keff + 1);
        EXPECT_EQ(y.dim(3), H + 2 * p - keff + 1);
      }
}

TEST(Conv2d, StandardConvolutionBitwise) {
  Rng rng(8);
  auto x = randn<float>({1, 3, 9, 9}, 0, 1, rng);
  auto w = randn<float>({2, 3, 3, 3}, 0, 1, rng);
  auto b = randn<float>({2}, 0, 1, rng);
  auto direct = conv2d_direct(x, w, &b, ConvSpec{1, 1, 1});
  EXPECT_EQ(direct, verify::standard_conv2d_oracle(x, w, b, 1));
}

TEST(Conv2d, Errors) {
  auto x = zeros<float>({1, 2, 4, 4});
  EXPECT_THROW(conv2d(x, zeros<float>({1, 3, 3, 3}), nullptr, ConvSpec{}), ShapeError);
  EXPECT_THROW(conv2d(x, zeros<float>({1, 2, 3, 3}), nullptr, ConvSpec{4, 0, 1}), ShapeError);
}

TEST(Conv2dBackward, ZeroUpstreamAndBiasAdjoint) {
  Rng rng(21);
  auto x = randn<double>({2, 3, 6, 6}, 0, 1, rng);
  auto w = randn<double>({4, 3, 3, 3}, 0, 1, rng);
  const ConvSpec s{2, 2, 1};
  auto zero = conv2d_backward(zeros<double>({2, 4, 6, 6}), x, w, s);
  for (const auto* g : {&zero.input, &zero.weight, &zero.bias})
    for (double v : g->data()) EXPECT_EQ(v, 0.0);

  auto gy = randn<double>({2, 4, 6, 6}, 0, 1, rng);
  auto g = conv2d_backward(gy, x, w, s);
  for (std::size_t o = 0; o < 4; ++o) {
    double sum = 0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 6; ++j) sum += gy.at(n, o, i, j);
    EXPECT_NEAR(g.bias[o], sum, 1e-12);
  }
  EXPECT_THROW(conv2d_backward(zeros<double>({2, 4, 5, 6}), x, w, s), ShapeError);
}

TEST(Conv2dBackward, LoweredPathChunksLargeInputs) {
  // Big enough that the patch matrix is processed in several row chunks.
  Rng rng(4);
  auto x = randn<float>({1, 64, 96, 96}, 0, 1, rng);
  auto w = randn<float>({2, 64, 3, 3}, 0, 0.1, rng);
  auto y = conv2d(x, w, nullptr, ConvSpec::same(3, 2));
  auto ref = conv2d_direct(x, w, nullptr, ConvSpec::same(3, 2));
  EXPECT_LE(max_abs_diff(y, ref), 1e-4f);
}

// ---------------------------------------------------------------------------
// transposed conv

TEST(TransposedConv2d, ChannelHalvingResolutionDoubling) {
  Rng rng(2);
  auto x = randn<float>({1, 512, 32, 32}, 0, 1, rng);
  auto w = randn<float>({512, 256, 2, 2}, 0, 0.05, rng);
  auto y = transposed_conv2d(x, w, nullptr);
  EXPECT_EQ(y.shape(), (Shape{1, 256, 64, 64}));
}

TEST(TransposedConv2d, ZeroInputGivesBias) {
  auto w = ones<float>({4, 2, 2, 2});
  TensorF b(Shape{2}, {0.25f, -1.0f});
  auto y = transposed_conv2d(zeros<float>({1, 4, 3, 3}), w, &b);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      EXPECT_EQ(y.at(0, 0, i, j), 0.25f);
      EXPECT_EQ(y.at(0, 1, i, j), -1.0f);
    }
  auto y0 = transposed_conv2d(zeros<float>({1, 4, 3, 3}), w, nullptr);
  for (float v : y0.data()) EXPECT_EQ(v, 0.0f);
}

TEST(TransposedConv2d, MatchesScatterOracle) {
  Rng rng(13);
  for (int trial = 0; trial < 5; ++trial) {
    auto x = randn<float>({2, 6, 5, 4}, 0, 1, rng);
    auto w = randn<float>({6, 3, 2, 2}, 0, 1, rng);
    auto b = randn<float>({3}, 0, 1, rng);
    auto y = transposed_conv2d(x, w, &b);
    auto ref = verify::transposed_conv2d_oracle(x, w, &b);
    ASSERT_EQ(y.shape(), ref.shape());
    EXPECT_LE(max_abs_diff(y, ref), 1e-5f);
  }
}

TEST(TransposedConv2d, AdjointOfStrideTwoConv) {
  Rng rng(77);
  for (int trial = 0; trial < 10; ++trial) {
    // conv: [N,3,8,8] -> [N,6,4,4] with weight [6,3,2,2]; convT maps back.
    auto w = randn<float>({6, 3, 2, 2}, 0, 1, rng);
    auto x = randn<float>({2, 3, 8, 8}, 0, 1, rng);
    auto y = randn<float>({2, 6, 4, 4}, 0, 1, rng);
    const float lhs = dot(conv2d(x, w, nullptr, ConvSpec{1, 0, 2}), y);
    const float rhs = dot(x, transposed_conv2d(y, w, nullptr));
    EXPECT_NEAR(lhs, rhs, 1e-4f);
  }
}

// ---------------------------------------------------------------------------
// pooling

TEST(MaxPool, WindowMaximum) {
  TensorF x(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  auto r = maxpool2x2(x);
  EXPECT_EQ(r.output[0], 4.0f);
  EXPECT_EQ(r.argmax[0], 3u);
}

TEST(MaxPool, TiesBreakToFirstElement) {
  auto x = full<float>({1, 2, 4, 4}, 1.5f);
  auto r = maxpool2x2(x);
  for (float v : r.output.data()) EXPECT_EQ(v, 1.5f);
  // Output (0,0,1,1) covers input rows 2-3, cols 2-3; first is (2,2).
  EXPECT_EQ(r.argmax[3], 2u * 4 + 2);
  EXPECT_EQ(r.argmax[0], 0u);
}

TEST(MaxPool, FourPoolsFrom512To32) {
  TensorF x(Shape{1, 1, 512, 512});
  for (int i = 0; i < 4; ++i) x = maxpool2x2(x).output;
  EXPECT_EQ(x.shape(), (Shape{1, 1, 32, 32}));
}

TEST(MaxPool, BackwardRoutesEachGradientOnce) {
  Rng rng(31);
  auto x = randn<float>({2, 3, 6, 8}, 0, 1, rng);
  auto r = maxpool2x2(x);
  auto gy = randn<float>(r.output.shape(), 0, 1, rng);
  auto gx = maxpool2x2_backward(gy, std::span<const std::size_t>(r.argmax), x.shape());
  std::size_t nonzero = 0;
  for (float v : gx.data()) nonzero += v != 0.0f;
  EXPECT_EQ(nonzero, gy.numel());
  EXPECT_NEAR(gx.sum(), gy.sum(), 1e-4f);
}

TEST(MaxPool, OddExtentsRejected) {
  EXPECT_THROW(maxpool2x2(zeros<float>({1, 1, 3, 4})), ShapeError);
  EXPECT_THROW(maxpool2x2(zeros<float>({1, 1, 4, 5})), ShapeError);
}

TEST(GlobalAvgPool, Basics) {
  auto y = global_avg_pool(ones<float>({1, 3, 4, 4}));
  EXPECT_EQ(y.shape(), (Shape{1, 3, 1, 1}));
  for (float v : y.data()) EXPECT_EQ(v, 1.0f);

  Rng rng(6);
  auto single = randn<float>({2, 5, 1, 1}, 0, 1, rng);
  EXPECT_EQ(global_avg_pool(single), single);

  auto x = randn<float>({2, 4, 7, 5}, 0, 1, rng);
  auto sums = verify::channel_sum_oracle(x);
  auto mean = global_avg_pool(x);
  for (std::size_t i = 0; i < mean.numel(); ++i) EXPECT_NEAR(mean[i] * 35.0f, sums[i], 1e-5f);
}

// ---------------------------------------------------------------------------
// activations

TEST(Activations, ReluAndSigmoidValues) {
  TensorF x(Shape{2}, {-2.0f, 3.0f});
  auto r = relu(x);
  EXPECT_EQ(r[0], 0.0f);
  EXPECT_EQ(r[1], 3.0f);
  EXPECT_EQ(sigmoid(0.0f), 0.5f);
  EXPECT_EQ(sigmoid(0.0), 0.5);
}

TEST(Activations, SigmoidGradientAtZero) {
  TensorD x(Shape{1}, 0.0), one(Shape{1}, 1.0);
  const double analytic = sigmoid_backward(one, sigmoid(x))[0];
  EXPECT_EQ(analytic, 0.25);
  const double h = 1e-5;
  const double numeric = (sigmoid(h) - sigmoid(-h)) / (2 * h);
  EXPECT_NEAR(analytic, numeric, 1e-6);
}

TEST(Activations, RangeProperties) {
  Rng rng(10);
  auto x = randn<double>({10000}, 0, 10, rng);
  for (double v : sigmoid(x).data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  auto big = TensorF(Shape{2}, {-80.0f, 80.0f});
  auto s = sigmoid(big);
  EXPECT_TRUE(all_finite(s));
  for (double v : relu(x).data()) EXPECT_GE(v, 0.0);
}

// ---------------------------------------------------------------------------
// fully connected

TEST(FullyConnected, IdentityAndSqueezeWidth) {
  Rng rng(12);
  auto x = randn<float>({3, 5}, 0, 1, rng);
  TensorF eye(Shape{5, 5});
  for (std::size_t i = 0; i < 5; ++i) eye[i * 5 + i] = 1.0f;
  EXPECT_EQ(fully_connected(x, eye, zeros<float>({5})), x);

  auto z = randn<float>({1, 512}, 0, 1, rng);
  auto y = fully_connected(z, randn<float>({512 / 16, 512}, 0, 0.1, rng), zeros<float>({32}));
  EXPECT_EQ(y.shape(), (Shape{1, 32}));
}

TEST(FullyConnected, MatchesMatmulOracle) {
  Rng rng(14);
  auto x = randn<float>({4, 19}, 0, 1, rng);
  auto w = randn<float>({7, 19}, 0, 1, rng);
  auto b = randn<float>({7}, 0, 1, rng);
  EXPECT_LE(max_abs_diff(fully_connected(x, w, b), verify::matmul_oracle(x, w, b)), 1e-5f);
  EXPECT_THROW(fully_connected(x, randn<float>({7, 18}, 0, 1, rng), b), ShapeError);
  EXPECT_THROW(fully_connected(x, w, zeros<float>({6})), ShapeError);
}

// ---------------------------------------------------------------------------
// concat

TEST(Concat, SixBranchesWidth) {
  std::vector<TensorF> parts(6, zeros<float>({1, 512, 2, 2}));
  std::vector<const TensorF*> ptrs;
  for (auto& p : parts) ptrs.push_back(&p);
  auto y = concat_channels<float>(std::span<const TensorF* const>(ptrs));
  EXPECT_EQ(y.dim(1), 3072u);
}

TEST(Concat, SingleInputIdentityAndSlicesRecoverInputs) {
  Rng rng(15);
  auto a = randn<float>({2, 3, 4, 5}, 0, 1, rng);
  auto b = randn<float>({2, 1, 4, 5}, 0, 1, rng);
  auto c = randn<float>({2, 2, 4, 5}, 0, 1, rng);
  EXPECT_EQ(concat_channels<float>({&a}), a);
  auto y = concat_channels<float>({&a, &b, &c});
  EXPECT_EQ(y.dim(1), 6u);
  EXPECT_EQ(slice_channels(y, 0, 3), a);
  EXPECT_EQ(slice_channels(y, 3, 1), b);
  EXPECT_EQ(slice_channels(y, 4, 2), c);
  auto bad = zeros<float>({2, 1, 4, 4});
  EXPECT_THROW(concat_channels<float>({&a, &bad}), ShapeError);
}

// ---------------------------------------------------------------------------
// loss

TEST(BceDiceLoss, PerfectPrediction) {
  TensorD t(Shape{1, 1, 2, 2}, {1, 0, 0, 1});
  const double loss = bce_dice_loss(t, t);
  EXPECT_GE(loss, 0.0);
  EXPECT_LT(loss, 1e-6);
}

TEST(BceDiceLoss, HalfProbabilityBceIsLn2) {
  Rng rng(16);
  for (int trial = 0; trial < 5; ++trial) {
    TensorD t(Shape{1, 1, 4, 4});
    for (auto& v : t.data()) v = rng.coin() ? 1.0 : 0.0;
    const auto terms = bce_dice_terms(full<double>(t.shape(), 0.5), t);
    EXPECT_NEAR(terms.bce, std::log(2.0), 1e-6);
  }
}

TEST(BceDiceLoss, TwoPixelHandComputation) {
  TensorD t(Shape{2}, {1, 0}), p(Shape{2}, {0.8, 0.3});
  // Independent hand computation: soft TP=0.8, FP=0.3, FN=0.2.
  const double bce = -(std::log(0.8) + std::log(0.7)) / 2.0;
  const double dice = 1.0 - (2 * 0.8) / (2 * 0.8 + 0.3 + 0.2);
  const auto terms = bce_dice_terms(p, t);
  EXPECT_NEAR(terms.bce, bce, 1e-12);
  EXPECT_NEAR(terms.dice, dice, 1e-12);
  EXPECT_NEAR(terms.total(), 0.528, 1e-3);
}

TEST(BceDiceLoss, NonNegativeOnRandomInputs) {
  Rng rng(18);
  for (int trial = 0; trial < 200; ++trial) {
    auto p = rand_uniform<double>({1, 1, 3, 3}, 0.0, 1.0, rng);
    TensorD t(p.shape());
    for (auto& v : t.data()) v = rng.coin(0.3) ? 1.0 : 0.0;
    EXPECT_GE(bce_dice_loss(p, t), 0.0);
  }
}

TEST(BceDiceLoss, Errors) {
  EXPECT_THROW(bce_dice_loss(zeros<double>({2}), zeros<double>({3})), ShapeError);
  EXPECT_THROW(bce_dice_loss(TensorD{}, TensorD{}), ShapeError);
}
