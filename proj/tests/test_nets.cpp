// Copyright 2026 The Serval Authors
// SPDX-License-Identifier: Apache-2.0

#include "serval/nets.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <set>
#include <vector>

#include "serval/gradcheck.hpp"
#include "serval/ops.hpp"
#include "serval/rng.hpp"

namespace serval::nn {
namespace {

ArchitectureSpec micro_spec(Family family, int depth = 3, int classes = 26,
                            int side = 64, int wb = 8) {
  ArchitectureSpec s;
  s.family = family;
  s.depth_units = depth;
  s.input_side = side;
  s.input_channels = 3;
  s.num_classes = classes;
  s.dropout_p = 0.0;
  s.width_base = wb;
  return s;
}

TEST(ResidualBlock, ZeroGammaIdentityShortcutIsRelu) {
  Rng rng(sub_seed(1, "rb.zero-gamma"));
  ResidualBlockParams<float> p;
  p.conv1_w = he_normal_init<float>({4, 4, 3, 3}, 36, rng);
  p.bn1_gamma = Tensor<float>::full({4}, 1.0f);
  p.bn1_beta = Tensor<float>::zeros({4});
  p.conv2_w = he_normal_init<float>({4, 4, 3, 3}, 36, rng);
  p.bn2_gamma = Tensor<float>::zeros({4});  // kills the residual branch
  p.bn2_beta = Tensor<float>::zeros({4});
  BatchNormState<float> bn1(4), bn2(4);

  auto x = Tensor<float>::zeros({2, 4, 6, 6});
  for (auto& v : x.data()) v = rng.uniform(0.0, 1.0);  // non-negative
  auto y = residual_block(x, p, bn1, bn2, 1, false, Phase::Train);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.data().size(); ++i) {
    EXPECT_FLOAT_EQ(y.data()[i], x.data()[i]);
  }
}

TEST(ResidualBlock, StrideTwoProjectionHalvesSpatialDoublesChannels) {
  Rng rng(sub_seed(1, "rb.stride"));
  ResidualBlockParams<float> p;
  p.conv1_w = he_normal_init<float>({16, 8, 3, 3}, 72, rng);
  p.bn1_gamma = Tensor<float>::full({16}, 1.0f);
  p.bn1_beta = Tensor<float>::zeros({16});
  p.conv2_w = he_normal_init<float>({16, 16, 3, 3}, 144, rng);
  p.bn2_gamma = Tensor<float>::full({16}, 1.0f);
  p.bn2_beta = Tensor<float>::zeros({16});
  p.proj_w = he_normal_init<float>({16, 8, 1, 1}, 8, rng);
  BatchNormState<float> bn1(16), bn2(16);

  auto x = Tensor<float>::zeros({1, 8, 16, 16});
  auto y = residual_block(x, p, bn1, bn2, 2, true, Phase::Train);
  EXPECT_EQ(y.shape(), (Shape{1, 16, 8, 8}));
}

TEST(ResidualBlock, ShapeChangeWithoutProjectionIsRejected) {
  Rng rng(sub_seed(1, "rb.reject"));
  ResidualBlockParams<float> p;
  p.conv1_w = he_normal_init<float>({16, 8, 3, 3}, 72, rng);
  p.bn1_gamma = Tensor<float>::full({16}, 1.0f);
  p.bn1_beta = Tensor<float>::zeros({16});
  p.conv2_w = he_normal_init<float>({16, 16, 3, 3}, 144, rng);
  p.bn2_gamma = Tensor<float>::full({16}, 1.0f);
  p.bn2_beta = Tensor<float>::zeros({16});
  BatchNormState<float> bn1(16), bn2(16);
  auto x = Tensor<float>::zeros({1, 8, 16, 16});
  EXPECT_THROW(residual_block(x, p, bn1, bn2, 2, false, Phase::Train),
               serval::ShapeError);
}

TEST(ResidualBlock, ZeroBranchGradientEqualsReluOnlyGraph) {
  Rng rng(sub_seed(1, "rb.grad"));
  ResidualBlockParams<double> p;
  p.conv1_w = Tensor<double>::zeros({4, 4, 3, 3});
  p.bn1_gamma = Tensor<double>::full({4}, 1.0);
  p.bn1_beta = Tensor<double>::zeros({4});
  p.conv2_w = Tensor<double>::zeros({4, 4, 3, 3});
  p.bn2_gamma = Tensor<double>::full({4}, 1.0);
  p.bn2_beta = Tensor<double>::zeros({4});
  BatchNormState<double> bn1(4), bn2(4);

  auto x = gradcheck::spread_tensor({2, 4, 5, 5}, rng);
  x.set_requires_grad(true);
  auto y = residual_block(x, p, bn1, bn2, 1, false, Phase::Train);
  sum_all(y).backward();
  auto got = x.grad();

  auto x2 = x.clone_detached();
  x2.set_requires_grad(true);
  sum_all(relu(x2)).backward();
  auto want = x2.grad();

  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    EXPECT_DOUBLE_EQ(got[i], want[i]);
  }
}

TEST(InceptionBlock, SingleIdentityBranchPassesThrough) {
  auto x = Tensor<float>::from({1, 2, 3, 4, 5, 6, 7, 8}, {1, 2, 2, 2});
  InceptionBranch<float> br;
  br.kind = BranchKind::Conv1x1;
  br.w1 = Tensor<float>::from({1, 0, 0, 1}, {2, 2, 1, 1});
  br.b1 = Tensor<float>::zeros({2});
  auto y = inception_block(x, {br});
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_FLOAT_EQ(y.data()[i], x.data()[i]);
  }
}

TEST(InceptionBlock, OutputChannelsAreTheBranchSum) {
  Rng rng(sub_seed(1, "ib.sum"));
  auto x = Tensor<float>::zeros({2, 6, 8, 8});
  for (auto& v : x.data()) v = rng.uniform(-1.0, 1.0);
  std::vector<InceptionBranch<float>> branches;
  InceptionBranch<float> b1;
  b1.w1 = he_normal_init<float>({4, 6, 1, 1}, 6, rng);
  b1.b1 = Tensor<float>::zeros({4});
  branches.push_back(b1);
  InceptionBranch<float> b3;
  b3.kind = BranchKind::Conv3x3Reduced;
  b3.w1 = he_normal_init<float>({3, 6, 1, 1}, 6, rng);
  b3.b1 = Tensor<float>::zeros({3});
  b3.w2 = he_normal_init<float>({8, 3, 3, 3}, 27, rng);
  b3.b2 = Tensor<float>::zeros({8});
  branches.push_back(b3);
  InceptionBranch<float> b5;
  b5.kind = BranchKind::Conv5x5Reduced;
  b5.w1 = he_normal_init<float>({2, 6, 1, 1}, 6, rng);
  b5.b1 = Tensor<float>::zeros({2});
  b5.w2 = he_normal_init<float>({4, 2, 5, 5}, 50, rng);
  b5.b2 = Tensor<float>::zeros({4});
  branches.push_back(b5);
  InceptionBranch<float> bp;
  bp.kind = BranchKind::PoolProj;
  bp.w1 = he_normal_init<float>({4, 6, 1, 1}, 6, rng);
  bp.b1 = Tensor<float>::zeros({4});
  branches.push_back(bp);

  auto y = inception_block(x, branches);
  EXPECT_EQ(y.shape(), (Shape{2, 20, 8, 8}));
}

TEST(InceptionBlock, RandomTwoBranchGradientCheck) {
  Rng rng(sub_seed(1, "ib.grad"));
  auto x = gradcheck::normal_tensor({2, 3, 6, 6}, rng, 0.7);
  InceptionBranch<double> a;
  a.w1 = gradcheck::normal_tensor({2, 3, 1, 1}, rng, 0.5);
  a.b1 = gradcheck::normal_tensor({2}, rng, 0.1);
  InceptionBranch<double> b;
  b.kind = BranchKind::Conv3x3Reduced;
  b.w1 = gradcheck::normal_tensor({2, 3, 1, 1}, rng, 0.5);
  b.b1 = gradcheck::normal_tensor({2}, rng, 0.1);
  b.w2 = gradcheck::normal_tensor({3, 2, 3, 3}, rng, 0.4);
  b.b2 = gradcheck::normal_tensor({3}, rng, 0.1);
  auto w = gradcheck::normal_tensor({1, 180}, rng, 0.3);

  std::vector<Tensor<double>> leaves{x, a.w1, a.b1, b.w1, b.b1, b.w2, b.b2};
  double err = gradcheck::max_rel_error(
      [=] {
        auto y = inception_block(x, {a, b});
        return sum_all(affine(flatten(y), w, Tensor<double>::zeros({1})));
      },
      leaves);
  EXPECT_LT(err, gradcheck::kTolerance);
}

TEST(BuildArchitecture, ResidualProbeGivesLogitsShape) {
  auto m = build_architecture<float>(micro_spec(Family::ResidualStyle), 42);
  auto probe = Tensor<float>::zeros({1, 3, 64, 64});
  auto logits = forward(m, probe, Phase::Train);
  EXPECT_EQ(logits.shape(), (Shape{1, 26}));
}

TEST(BuildArchitecture, EveryFamilyRunsForward) {
  for (Family f : {Family::PlainAlexnetStyle, Family::SmallFilterVggStyle,
                   Family::InceptionStyle, Family::ResidualStyle}) {
    auto m = build_architecture<float>(micro_spec(f), 42);
    auto probe = Tensor<float>::zeros({2, 3, 64, 64});
    auto logits = forward(m, probe, Phase::Train);
    EXPECT_EQ(logits.shape(), (Shape{2, 26})) << family_to_string(f);
  }
}

TEST(BuildArchitecture, AlexnetStyleHasActiveDropoutStage) {
  auto spec = micro_spec(Family::PlainAlexnetStyle);
  spec.dropout_p = 0.5;
  auto m = build_architecture<float>(spec, 42);
  auto probe = Tensor<float>::zeros({4, 3, 64, 64});
  for (auto& v : probe.data()) v = 0.1f;

  // Train phase demands a stream and uses it: two streams disagree.
  EXPECT_THROW(forward(m, probe, Phase::Train), serval::ConfigError);
  Rng r1(1), r2(2);
  auto y1 = forward(m, probe, Phase::Train, &r1);
  auto y2 = forward(m, probe, Phase::Train, &r2);
  bool differ = false;
  for (std::size_t i = 0; i < y1.data().size(); ++i) {
    differ = differ || y1.data()[i] != y2.data()[i];
  }
  EXPECT_TRUE(differ);

  // Eval ignores dropout entirely.
  auto e1 = forward(m, probe, Phase::Eval);
  auto e2 = forward(m, probe, Phase::Eval);
  for (std::size_t i = 0; i < e1.data().size(); ++i) {
    EXPECT_FLOAT_EQ(e1.data()[i], e2.data()[i]);
  }
}

TEST(BuildArchitecture, SameSpecAndSeedIsBitIdentical) {
  for (Family f : {Family::PlainAlexnetStyle, Family::SmallFilterVggStyle,
                   Family::InceptionStyle, Family::ResidualStyle}) {
    auto a = build_architecture<float>(micro_spec(f), 7);
    auto b = build_architecture<float>(micro_spec(f), 7);
    ASSERT_EQ(a.params.size(), b.params.size());
    for (std::size_t i = 0; i < a.params.size(); ++i) {
      const auto& pa = a.params.items()[i];
      const auto& pb = b.params.items()[i];
      EXPECT_EQ(pa.name, pb.name);
      ASSERT_EQ(pa.tensor.size(), pb.tensor.size());
      EXPECT_EQ(0, std::memcmp(pa.tensor.data().data(),
                               pb.tensor.data().data(),
                               sizeof(float) *
                                   static_cast<std::size_t>(pa.tensor.size())));
    }
  }
}

TEST(BuildArchitecture, DifferentSeedsDiffer) {
  auto a = build_architecture<float>(micro_spec(Family::ResidualStyle), 7);
  auto b = build_architecture<float>(micro_spec(Family::ResidualStyle), 8);
  auto& wa = a.p("stem.conv.weight");
  auto& wb = b.p("stem.conv.weight");
  bool differ = false;
  for (std::int64_t i = 0; i < wa.size(); ++i) {
    differ = differ || wa.data()[i] != wb.data()[i];
  }
  EXPECT_TRUE(differ);
}

TEST(BuildArchitecture, TooSmallInputNamesTheOffendingStage) {
  auto spec = micro_spec(Family::PlainAlexnetStyle, 3, 26, 2);
  try {
    build_architecture<float>(spec, 1);
    FAIL() << "expected ConfigError";
  } catch (const serval::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("stem.pool"), std::string::npos)
        << e.what();
  }
}

TEST(BuildArchitecture, InvalidSpecsAreRejected) {
  auto s = micro_spec(Family::ResidualStyle);
  s.depth_units = 0;
  EXPECT_THROW(build_architecture<float>(s, 1), serval::ConfigError);
  s = micro_spec(Family::ResidualStyle);
  s.num_classes = 1;
  EXPECT_THROW(build_architecture<float>(s, 1), serval::ConfigError);
  s = micro_spec(Family::ResidualStyle);
  s.dropout_p = 1.0;
  EXPECT_THROW(build_architecture<float>(s, 1), serval::ConfigError);
}

TEST(OrderedParamGroups, ResidualDepthThreeOrder) {
  auto m = build_architecture<float>(micro_spec(Family::ResidualStyle), 3);
  auto groups = ordered_param_groups(m);
  std::vector<std::string> want{"head", "block3", "block2", "block1", "stem"};
  EXPECT_EQ(groups, want);
}

TEST(OrderedParamGroups, GroupsPartitionAllParameters) {
  for (Family f : {Family::PlainAlexnetStyle, Family::SmallFilterVggStyle,
                   Family::InceptionStyle, Family::ResidualStyle}) {
    auto m = build_architecture<float>(micro_spec(f, 4), 3);
    auto groups = ordered_param_groups(m);
    std::set<std::string> group_set(groups.begin(), groups.end());
    EXPECT_EQ(group_set.size(), groups.size()) << "duplicate group";
    EXPECT_EQ(groups.front(), "head");
    for (const auto& p : m.params.items()) {
      EXPECT_TRUE(group_set.count(group_of(p.name)))
          << p.name << " not covered by any group";
    }
  }
}

TEST(OrderedParamGroups, ResidualGroupCountIsDepthPlusTwo) {
  for (int depth : {1, 2, 3, 5, 6}) {
    auto m = build_architecture<float>(
        micro_spec(Family::ResidualStyle, depth), 3);
    EXPECT_EQ(ordered_param_groups(m).size(),
              static_cast<std::size_t>(depth + 2));
  }
}

TEST(OrderedParamGroups, GroupIndicesMatchLastToFirstOrder) {
  auto m = build_architecture<float>(micro_spec(Family::ResidualStyle), 3);
  auto groups = ordered_param_groups(m);
  for (const auto& p : m.params.items()) {
    const auto& g = groups[static_cast<std::size_t>(p.group_index)];
    EXPECT_EQ(g, group_of(p.name)) << p.name;
  }
}

TEST(SetTrainableFirstGroups, HeadOnlyFreezesTheRest) {
  auto m = build_architecture<float>(micro_spec(Family::ResidualStyle), 3);
  set_trainable_first_groups(m, 1);
  for (const auto& p : m.params.items()) {
    EXPECT_EQ(p.trainable, group_of(p.name) == "head") << p.name;
  }
  set_trainable_first_groups(m, 2);
  int unfrozen_groups = 0;
  std::set<std::string> unfrozen;
  for (const auto& p : m.params.items()) {
    if (p.trainable) unfrozen.insert(group_of(p.name));
  }
  unfrozen_groups = static_cast<int>(unfrozen.size());
  EXPECT_EQ(unfrozen_groups, 2);
  EXPECT_TRUE(unfrozen.count("head"));
  EXPECT_TRUE(unfrozen.count("block3"));
}

TEST(ReplaceClassifierHead, NonHeadParametersAreBitIdentical) {
  auto m = build_architecture<float>(
      micro_spec(Family::ResidualStyle, 3, 10), 11);
  auto out = replace_classifier_head(m, 26, 99);
  ASSERT_EQ(out.params.size(), m.params.size());
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    const auto& before = m.params.items()[i];
    const auto& after = out.params.items()[i];
    ASSERT_EQ(before.name, after.name);
    if (group_of(before.name) == "head") continue;
    ASSERT_EQ(before.tensor.size(), after.tensor.size());
    EXPECT_EQ(0,
              std::memcmp(before.tensor.data().data(),
                          after.tensor.data().data(),
                          sizeof(float) *
                              static_cast<std::size_t>(before.tensor.size())))
        << before.name;
  }
  EXPECT_EQ(out.p("head.weight").dim(0), 26);
  EXPECT_EQ(out.spec.num_classes, 26);
  EXPECT_TRUE(out.params.at("head.weight").trainable);
}

TEST(ReplaceClassifierHead, SameClassCountStillReinitializes) {
  auto m = build_architecture<float>(
      micro_spec(Family::ResidualStyle, 3, 10), 11);
  auto out = replace_classifier_head(m, 10, 99);
  auto& wa = m.p("head.weight");
  auto& wb = out.p("head.weight");
  ASSERT_EQ(wa.shape(), wb.shape());
  bool differ = false;
  for (std::int64_t i = 0; i < wa.size(); ++i) {
    differ = differ || wa.data()[i] != wb.data()[i];
  }
  EXPECT_TRUE(differ);
}

TEST(ReplaceClassifierHead, ForwardAfterReplacementGivesNewLogitShape) {
  auto m = build_architecture<float>(
      micro_spec(Family::SmallFilterVggStyle, 3, 10), 11);
  auto out = replace_classifier_head(m, 26, 99);
  auto probe = Tensor<float>::zeros({1, 3, 64, 64});
  EXPECT_EQ(forward(out, probe, Phase::Train).shape(), (Shape{1, 26}));
}

TEST(ReplaceClassifierHead, TooFewClassesIsRejected) {
  auto m = build_architecture<float>(micro_spec(Family::ResidualStyle), 11);
  EXPECT_THROW(replace_classifier_head(m, 1, 0), serval::ConfigError);
}

TEST(ExtractFeatures, HeadTapWidthMatchesConstruction) {
  auto spec = micro_spec(Family::ResidualStyle, 3, 26, 64, 8);
  auto m = build_architecture<float>(spec, 5);
  // Populate batch-norm running stats with one training pass.
  Rng rng(1);
  auto warm = Tensor<float>::zeros({4, 3, 64, 64});
  for (auto& v : warm.data()) v = rng.uniform(-1.0, 1.0);
  forward(m, warm, Phase::Train);

  auto batch = Tensor<float>::zeros({2, 3, 64, 64});
  for (auto& v : batch.data()) v = rng.uniform(-1.0, 1.0);
  auto f1 = extract_features(m, "head", batch);
  EXPECT_EQ(f1.shape(), (Shape{2, 8 * 4}));  // width_base * 2^(stages-1)
  auto f2 = extract_features(m, "head", batch);
  EXPECT_EQ(0, std::memcmp(f1.data().data(), f2.data().data(),
                           sizeof(float) *
                               static_cast<std::size_t>(f1.size())));
  EXPECT_FALSE(f1.requires_grad());
}

TEST(ExtractFeatures, ZeroBatchThroughBiasFreeStemIsZero) {
  auto m = build_architecture<float>(
      micro_spec(Family::SmallFilterVggStyle, 2), 5);
  for (auto& v : m.p("stem.conv.bias").data()) v = 0.0f;
  auto zero = Tensor<float>::zeros({2, 3, 64, 64});
  auto feats = extract_features(m, "block1", zero);
  EXPECT_EQ(feats.dim(0), 2);
  for (float v : feats.data()) EXPECT_EQ(v, 0.0f);
}

TEST(ExtractFeatures, UnknownGroupListsValidNames) {
  auto m = build_architecture<float>(micro_spec(Family::ResidualStyle, 2), 5);
  try {
    auto x = Tensor<float>::zeros({1, 3, 64, 64});
    extract_features(m, "blockZ", x);
    FAIL() << "expected ConfigError";
  } catch (const serval::ConfigError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("stem"), std::string::npos) << msg;
    EXPECT_NE(msg.find("block1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("head"), std::string::npos) << msg;
  }
}

TEST(ModelGradCheck, EveryFamilyPassesFullModelCheck) {
  auto suite = gradcheck::run_model_suite(20260823);
  ASSERT_EQ(suite.checks.size(), 4u);
  for (const auto& check : suite.checks) {
    EXPECT_LE(check.max_rel_err, gradcheck::kTolerance) << check.name;
  }
}

}  // namespace
}  // namespace serval::nn
