// Copyright 2026 The Serval Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "serval/ops.hpp"
#include "serval/optim.hpp"
#include "serval/rng.hpp"
#include "serval/tensor.hpp"

using serval::Rng;
using namespace serval::nn;

namespace {

Tensor<float> randn(Shape shape, Rng& rng, bool requires_grad = false) {
  auto t = Tensor<float>::zeros(std::move(shape), requires_grad);
  for (auto& v : t.data()) v = static_cast<float>(rng.normal());
  return t;
}

}  // namespace

TEST(Conv2d, IdentityKernelPassesInputThrough) {
  auto x = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
  auto w = Tensor<float>::from({1.0f}, {1, 1, 1, 1});
  auto b = Tensor<float>::zeros({1});
  auto y = conv2d(x, w, b, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  for (float v : y.data()) EXPECT_FLOAT_EQ(v, 1.0f);
}

TEST(Conv2d, FullKernelSumsWindow) {
  auto x = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
  auto w = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
  auto b = Tensor<float>::zeros({1});
  auto y = conv2d(x, w, b, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_FLOAT_EQ(y.item(), 9.0f);
}

TEST(Conv2d, OutputShapeFollowsFloorFormula) {
  Rng rng(11);
  for (int h = 3; h <= 9; h += 3) {
    for (int k = 1; k <= 3; ++k) {
      for (int stride = 1; stride <= 3; ++stride) {
        for (int pad = 0; pad <= 2; ++pad) {
          if (h + 2 * pad < k) continue;
          auto x = randn({2, 3, h, h}, rng);
          auto w = randn({4, 3, k, k}, rng);
          auto b = Tensor<float>::zeros({4});
          auto y = conv2d(x, w, b, stride, pad);
          int expect = (h + 2 * pad - k) / stride + 1;
          EXPECT_EQ(y.shape(), (Shape{2, 4, expect, expect}))
              << "h=" << h << " k=" << k << " s=" << stride << " p=" << pad;
        }
      }
    }
  }
}

TEST(Conv2d, RejectsChannelMismatchAndOversizedKernel) {
  Rng rng(3);
  auto x = randn({1, 2, 4, 4}, rng);
  auto w3 = randn({1, 3, 3, 3}, rng);
  auto b = Tensor<float>::zeros({1});
  EXPECT_THROW(conv2d(x, w3, b, 1, 0), serval::ShapeError);
  auto w_big = randn({1, 2, 6, 6}, rng);
  EXPECT_THROW(conv2d(x, w_big, b, 1, 0), serval::ShapeError);
}

TEST(Pool2d, MaxOfFourValues) {
  auto x = Tensor<float>::from({1, 2, 3, 4}, {1, 1, 2, 2});
  auto y = pool2d(x, PoolKind::Max, 2, 2);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_FLOAT_EQ(y.item(), 4.0f);
}

TEST(Pool2d, ConstantInputGivesConstantOutput) {
  auto x = Tensor<float>::full({2, 3, 4, 4}, 2.5f);
  for (PoolKind kind : {PoolKind::Max, PoolKind::Avg, PoolKind::GlobalAvg}) {
    auto y = pool2d(x, kind, 2, 2);
    for (float v : y.data()) EXPECT_FLOAT_EQ(v, 2.5f);
  }
}

TEST(Pool2d, GlobalAvgReducesSpatialToOne) {
  auto x = Tensor<float>::from({1, 2, 3, 4, 10, 20, 30, 40}, {1, 2, 2, 2});
  auto y = pool2d(x, PoolKind::GlobalAvg);
  ASSERT_EQ(y.shape(), (Shape{1, 2, 1, 1}));
  EXPECT_FLOAT_EQ(y.data()[0], 2.5f);
  EXPECT_FLOAT_EQ(y.data()[1], 25.0f);
}

// Brute force: for each cell of a random 4x4 input, the backward of
// max-pool must deposit the upstream gradient exactly on the argmax cell
// of the corresponding window and nowhere else.
TEST(Pool2d, MaxBackwardRoutesToArgmax) {
  Rng rng(17);
  auto x = randn({1, 1, 4, 4}, rng, true);
  auto y = pool2d(x, PoolKind::Max, 2, 2);
  auto loss = sum_all(y);
  loss.backward();
  auto xv = x.data();
  auto g = x.grad();
  for (int wy = 0; wy < 2; ++wy) {
    for (int wx = 0; wx < 2; ++wx) {
      float best = -1e30f;
      int best_idx = -1;
      for (int ky = 0; ky < 2; ++ky) {
        for (int kx = 0; kx < 2; ++kx) {
          int idx = (wy * 2 + ky) * 4 + (wx * 2 + kx);
          if (xv[idx] > best) {
            best = xv[idx];
            best_idx = idx;
          }
        }
      }
      for (int ky = 0; ky < 2; ++ky) {
        for (int kx = 0; kx < 2; ++kx) {
          int idx = (wy * 2 + ky) * 4 + (wx * 2 + kx);
          EXPECT_FLOAT_EQ(g[idx], idx == best_idx ? 1.0f : 0.0f);
        }
      }
    }
  }
}

TEST(Pool2d, KernelLargerThanInputIsRejected) {
  auto x = Tensor<float>::zeros({1, 1, 2, 2});
  EXPECT_THROW(pool2d(x, PoolKind::Max, 3, 1), serval::ShapeError);
}

TEST(Pool2d, PaddedMaxPreservesSpatialSize) {
  auto x = Tensor<float>::from({1, 2, 3, 4, 5, 6, 7, 8, 9}, {1, 1, 3, 3});
  auto y = pool2d(x, PoolKind::Max, 3, 1, 1);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  std::vector<float> want{5, 6, 6, 8, 9, 9, 8, 9, 9};
  for (std::size_t i = 0; i < want.size(); ++i) {
    EXPECT_FLOAT_EQ(y.data()[i], want[i]);
  }
}

TEST(Pool2d, PaddedAvgCountsPaddingAsZero) {
  auto x = Tensor<float>::from({1, 2, 3, 4, 5, 6, 7, 8, 9}, {1, 1, 3, 3});
  auto y = pool2d(x, PoolKind::Avg, 3, 1, 1);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  EXPECT_FLOAT_EQ(y.data()[4], 5.0f);
  EXPECT_FLOAT_EQ(y.data()[0], 12.0f / 9.0f);
}

TEST(Pool2d, PadAtLeastHalfKernelIsRejected) {
  auto x = Tensor<float>::zeros({1, 1, 4, 4});
  EXPECT_THROW(pool2d(x, PoolKind::Max, 2, 2, 1), serval::ShapeError);
}

TEST(Affine, IdentityWeightZeroBias) {
  auto x = Tensor<float>::from({1, 2, 3, 4, 5, 6}, {2, 3});
  auto w = Tensor<float>::from({1, 0, 0, 0, 1, 0, 0, 0, 1}, {3, 3});
  auto b = Tensor<float>::zeros({3});
  auto y = affine(x, w, b);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_FLOAT_EQ(y.data()[i], x.data()[i]);
  }
}

TEST(Affine, ZeroInputBroadcastsBias) {
  auto x = Tensor<float>::zeros({3, 5});
  Rng rng(5);
  auto w = randn({4, 5}, rng);
  auto b = Tensor<float>::from({-1, 2, 0.5f, 7}, {4});
  auto y = affine(x, w, b);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 4; ++j) {
      EXPECT_FLOAT_EQ(y.data()[i * 4 + j], b.data()[j]);
    }
  }
}

TEST(Affine, DimensionMismatchIsRejected) {
  auto x = Tensor<float>::zeros({2, 3});
  auto w = Tensor<float>::zeros({4, 5});
  auto b = Tensor<float>::zeros({4});
  EXPECT_THROW(affine(x, w, b), serval::ShapeError);
}

TEST(Relu, ClampsNegativesKeepsPositives) {
  auto neg = Tensor<float>::full({2, 3}, -4.0f);
  auto clamped = relu(neg);
  for (float v : clamped.data()) EXPECT_FLOAT_EQ(v, 0.0f);
  auto pos = Tensor<float>::from({1, 2, 3}, {1, 3});
  auto y = relu(pos);
  for (int i = 0; i < 3; ++i) EXPECT_FLOAT_EQ(y.data()[i], pos.data()[i]);
}

TEST(Relu, BackwardMasksNegativeInputs) {
  auto x = Tensor<float>::from({-2, -0.5f, 0.5f, 3}, {1, 4}, true);
  auto loss = sum_all(relu(x));
  loss.backward();
  auto g = x.grad();
  EXPECT_FLOAT_EQ(g[0], 0.0f);
  EXPECT_FLOAT_EQ(g[1], 0.0f);
  EXPECT_FLOAT_EQ(g[2], 1.0f);
  EXPECT_FLOAT_EQ(g[3], 1.0f);
}

TEST(BatchNorm, NormalizedInputIsAFixedPoint) {
  // Per-channel zero-mean unit-variance data: +/-1 in equal counts.
  std::vector<float> data(2 * 2 * 2 * 2);
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] = (i % 2 == 0) ? 1.0f : -1.0f;
  }
  auto x = Tensor<float>::from(data, {2, 2, 2, 2});
  auto gamma = Tensor<float>::full({2}, 1.0f);
  auto beta = Tensor<float>::zeros({2});
  BatchNormState<float> state(2);
  auto y = batchnorm2d(x, gamma, beta, state, Phase::Train);
  for (std::size_t i = 0; i < data.size(); ++i) {
    EXPECT_NEAR(y.data()[i], data[i], 1e-3f);
  }
}

TEST(BatchNorm, ZeroGammaYieldsBeta) {
  Rng rng(7);
  auto x = randn({2, 3, 4, 4}, rng);
  auto gamma = Tensor<float>::zeros({3});
  auto beta = Tensor<float>::from({1, -2, 3}, {3});
  BatchNormState<float> state(3);
  auto y = batchnorm2d(x, gamma, beta, state, Phase::Train);
  for (int s = 0; s < 2; ++s) {
    for (int c = 0; c < 3; ++c) {
      for (int i = 0; i < 16; ++i) {
        EXPECT_FLOAT_EQ(y.data()[(s * 3 + c) * 16 + i], beta.data()[c]);
      }
    }
  }
}

TEST(BatchNorm, TrainOutputHasUnitMoments) {
  Rng rng(23);
  auto x = randn({4, 3, 8, 8}, rng);
  auto gamma = Tensor<float>::full({3}, 1.0f);
  auto beta = Tensor<float>::zeros({3});
  BatchNormState<float> state(3);
  auto y = batchnorm2d(x, gamma, beta, state, Phase::Train, 0.1f, 1e-8f);
  int m = 4 * 8 * 8;
  for (int c = 0; c < 3; ++c) {
    double mean = 0, var = 0;
    for (int s = 0; s < 4; ++s) {
      for (int i = 0; i < 64; ++i) mean += y.data()[(s * 3 + c) * 64 + i];
    }
    mean /= m;
    for (int s = 0; s < 4; ++s) {
      for (int i = 0; i < 64; ++i) {
        double d = y.data()[(s * 3 + c) * 64 + i] - mean;
        var += d * d;
      }
    }
    var /= m;
    EXPECT_NEAR(mean, 0.0, 1e-4);
    EXPECT_NEAR(var, 1.0, 1e-4);
  }
}

TEST(BatchNorm, EvalBeforeTrainIsRejected) {
  auto x = Tensor<float>::zeros({1, 2, 2, 2});
  auto gamma = Tensor<float>::full({2}, 1.0f);
  auto beta = Tensor<float>::zeros({2});
  BatchNormState<float> state(2);
  EXPECT_THROW(batchnorm2d(x, gamma, beta, state, Phase::Eval), serval::Error);
}

TEST(Dropout, ZeroRateIsIdentityInBothPhases) {
  Rng rng(1);
  auto x = randn({2, 10}, rng);
  Rng stream(2);
  auto train = dropout(x, 0.0, Phase::Train, stream);
  auto eval = dropout(x, 0.0, Phase::Eval, stream);
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_FLOAT_EQ(train.data()[i], x.data()[i]);
    EXPECT_FLOAT_EQ(eval.data()[i], x.data()[i]);
  }
}

TEST(Dropout, EvalIsIdentityForAnyRate) {
  Rng rng(1);
  auto x = randn({4, 7}, rng);
  Rng stream(9);
  auto y = dropout(x, 0.7, Phase::Eval, stream);
  EXPECT_TRUE(y.same_node(x));
}

TEST(Dropout, HalfRateZeroesAboutHalf) {
  auto x = Tensor<float>::full({1000, 1000}, 1.0f);
  Rng stream(42);
  auto y = dropout(x, 0.5, Phase::Train, stream);
  std::size_t zeros = 0;
  for (float v : y.data()) {
    if (v == 0.0f) {
      ++zeros;
    } else {
      EXPECT_FLOAT_EQ(v, 2.0f);  // survivors scaled by 1/(1-p)
    }
  }
  double fraction = static_cast<double>(zeros) / 1e6;
  EXPECT_NEAR(fraction, 0.5, 0.01);
}

TEST(Dropout, RateAtOrAboveOneIsRejected) {
  auto x = Tensor<float>::zeros({2, 2});
  Rng stream(0);
  EXPECT_THROW(dropout(x, 1.0, Phase::Train, stream), serval::ConfigError);
}

TEST(SoftmaxCrossEntropy, UniformLogitsGiveLogC) {
  auto logits = Tensor<float>::zeros({3, 26});
  std::vector<int> labels = {0, 13, 25};
  auto loss = softmax_cross_entropy(logits, labels);
  EXPECT_NEAR(loss.item(), std::log(26.0f), 1e-5f);
}

TEST(SoftmaxCrossEntropy, SaturatedCorrectPredictionHasTinyLoss) {
  auto logits = Tensor<float>::zeros({2, 5});
  logits.data()[1] = 1000.0f;
  logits.data()[5 + 3] = 1000.0f;
  std::vector<int> labels = {1, 3};
  auto loss = softmax_cross_entropy(logits, labels);
  EXPECT_LT(loss.item(), 1e-6f);
}

TEST(SoftmaxCrossEntropy, RowsSumToOne) {
  Rng rng(19);
  auto logits = randn({4, 26}, rng);
  auto probs = softmax_rows(logits);
  for (int i = 0; i < 4; ++i) {
    double sum = 0;
    for (int j = 0; j < 26; ++j) {
      float p = probs[i * 26 + j];
      EXPECT_GE(p, 0.0f);
      sum += p;
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(SoftmaxCrossEntropy, OutOfRangeLabelIsRejected) {
  auto logits = Tensor<float>::zeros({1, 4});
  std::vector<int> labels = {4};
  EXPECT_THROW(softmax_cross_entropy(logits, labels), serval::Error);
}

TEST(Backward, ConstantLossLeavesGradsZero) {
  Rng rng(4);
  auto w = randn({2, 3}, rng, true);
  auto loss = Tensor<float>::scalar(5.0f, true);
  loss.backward();
  // w is unreachable from loss; its grad stays unallocated/zero.
  EXPECT_FALSE(w.has_grad());
}

// y = affine(affine(x, W1, b1), W2, b2); d sum(y) / dx must equal the
// product of the two local Jacobians: ones * W2 * W1.
TEST(Backward, TwoLayerChainMatchesManualJacobianProduct) {
  auto x = Tensor<float>::from({0.5f, -1.5f}, {1, 2}, true);
  auto w1 = Tensor<float>::from({2, 1, -1, 3}, {2, 2});
  auto b1 = Tensor<float>::from({0.1f, -0.2f}, {2});
  auto w2 = Tensor<float>::from({1, -2, 0.5f, 4}, {2, 2});
  auto b2 = Tensor<float>::zeros({2});
  w1.set_requires_grad(true);
  w2.set_requires_grad(true);

  auto y = affine(affine(x, w1, b1), w2, b2);
  auto loss = sum_all(y);
  loss.backward();

  // ones(1x2) * W2 gives the gradient at the hidden layer; times W1
  // gives the gradient at x. W rows are output units (y = x W^T).
  float dh[2], dx_expect[2];
  for (int j = 0; j < 2; ++j) {
    dh[j] = w2.data()[0 * 2 + j] + w2.data()[1 * 2 + j];
  }
  for (int j = 0; j < 2; ++j) {
    dx_expect[j] = dh[0] * w1.data()[0 * 2 + j] + dh[1] * w1.data()[1 * 2 + j];
  }
  EXPECT_FLOAT_EQ(x.grad()[0], dx_expect[0]);
  EXPECT_FLOAT_EQ(x.grad()[1], dx_expect[1]);
}

TEST(Backward, NonScalarLossIsRejected) {
  auto y = Tensor<float>::zeros({2, 2}, true);
  EXPECT_THROW(y.backward(), serval::ShapeError);
}

TEST(Backward, RepeatedCallsAccumulateUntilZeroed) {
  auto x = Tensor<float>::from({1.0f, 2.0f}, {1, 2}, true);
  auto run = [&] {
    auto loss = sum_all(x);
    loss.backward();
  };
  run();
  EXPECT_FLOAT_EQ(x.grad()[0], 1.0f);
  run();
  EXPECT_FLOAT_EQ(x.grad()[0], 2.0f);
  x.zero_grad();
  run();
  EXPECT_FLOAT_EQ(x.grad()[0], 1.0f);
}

TEST(Sgd, VanillaStepIsExact) {
  ParamStore<float> params;
  auto& p = params.add("w", Tensor<float>::from({1.0f, -2.0f}, {2}));
  auto g = p.tensor.grad();
  g[0] = 0.5f;
  g[1] = -1.0f;
  Sgd<float> opt(0.0f, 0.0f);
  opt.step(params, 0.1f);
  EXPECT_FLOAT_EQ(p.tensor.data()[0], 1.0f - 0.1f * 0.5f);
  EXPECT_FLOAT_EQ(p.tensor.data()[1], -2.0f - 0.1f * -1.0f);
}

TEST(Sgd, FrozenParameterIsBitIdentical) {
  ParamStore<float> params;
  auto& p = params.add("w", Tensor<float>::from({1.25f, -3.5f}, {2}));
  p.trainable = false;
  auto g = p.tensor.grad();
  g[0] = 10.0f;
  g[1] = 10.0f;
  std::vector<float> before(p.tensor.data().begin(), p.tensor.data().end());
  Sgd<float> opt(0.9f, 1e-2f);
  opt.step(params, 0.5f);
  for (int i = 0; i < 2; ++i) {
    EXPECT_EQ(std::memcmp(&before[i], &p.tensor.data()[i], sizeof(float)), 0);
  }
}

// v1 = g, w1 = w0 - lr g; v2 = 0.9 g + g = 1.9 g,
// w2 = w1 - lr 1.9 g = w0 - lr (g + 1.9 g).
TEST(Sgd, TwoMomentumStepsMatchClosedForm) {
  ParamStore<float> params;
  auto& p = params.add("w", Tensor<float>::from({2.0f}, {1}));
  Sgd<float> opt(0.9f, 0.0f);
  const float lr = 0.1f, g0 = 0.4f;
  for (int step = 0; step < 2; ++step) {
    p.tensor.zero_grad();
    p.tensor.grad()[0] = g0;
    opt.step(params, lr);
  }
  EXPECT_NEAR(p.tensor.data()[0], 2.0f - lr * (g0 + 1.9f * g0), 1e-7f);
}

TEST(Sgd, MissingGradientOnTrainableIsRejected) {
  ParamStore<float> params;
  params.add("w", Tensor<float>::from({1.0f}, {1}));
  Sgd<float> opt(0.0f, 0.0f);
  EXPECT_THROW(opt.step(params, 0.1f), serval::Error);
}

TEST(NoGrad, EvalForwardIsBitDeterministicAndGraphFree) {
  Rng rng(31);
  auto x = randn({2, 3, 6, 6}, rng);
  auto w = randn({4, 3, 3, 3}, rng, true);
  auto b = Tensor<float>::zeros({4}, true);
  std::vector<float> first;
  {
    NoGradGuard guard;
    auto y = conv2d(x, w, b, 1, 1);
    EXPECT_FALSE(y.requires_grad());
    first.assign(y.data().begin(), y.data().end());
  }
  {
    NoGradGuard guard;
    auto y = conv2d(x, w, b, 1, 1);
    for (std::size_t i = 0; i < first.size(); ++i) {
      EXPECT_EQ(std::memcmp(&first[i], &y.data()[i], sizeof(float)), 0);
    }
  }
}
