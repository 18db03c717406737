// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>

#include <gtest/gtest.h>

#include "riverpref/checkpoint.hpp"
#include "riverpref/net.hpp"
#include "support/oracles.hpp"

namespace riverpref {
namespace {

NetParams zero_gru(NetParams p) {
  for_each_tensor(p, [](const char* name, auto& t) {
    if (std::string(name).rfind("gru.", 0) == 0) t.setZero();
  });
  return p;
}

TEST(Encoder, ZeroParametersHalveAnAllOnesState) {
  const NetParams p = zero_gru(NetParams::init(1));
  const LatentState h = encode_step(p, Vec::Ones(64), Observation{});
  ASSERT_EQ(h.size(), 64);
  for (int i = 0; i < 64; ++i) EXPECT_DOUBLE_EQ(h(i), 0.5);
}

TEST(Encoder, DeterministicAndDimensionChecked) {
  const NetParams p = NetParams::init(3);
  const RiverWorld w(WorldConfig::default_river());
  const Observation obs = std::get<2>(w.reset(StartSpec{}, 0));
  const LatentState z0 = initial_latent(p);
  EXPECT_EQ(encode_step(p, z0, obs), encode_step(p, z0, obs));
  EXPECT_EQ(encoder_input(obs).size(), kEncoderInputDim);
  EXPECT_THROW(encode_step(p, z0, Vec::Zero(10)), UsageError);
  EXPECT_THROW(encode_step(p, Vec::Zero(3), obs), UsageError);
}

TEST(Encoder, InitIsSeededAndRecordsTheSeed) {
  EXPECT_EQ(oracle::params_bytes(NetParams::init(9)), oracle::params_bytes(NetParams::init(9)));
  EXPECT_NE(oracle::params_bytes(NetParams::init(9)), oracle::params_bytes(NetParams::init(10)));
  EXPECT_EQ(NetParams::init(9).init_seed, 9u);
  EXPECT_TRUE(NetParams::init(9).frozen_encoder);
}

TEST(Policy, ZeroLogitsGiveUniformJointLogProb) {
  const ActionDistribution d = ActionDistribution::from_logits(Vec::Zero(12));
  for (int j = 0; j < kNumJointActions; ++j)
    EXPECT_NEAR(d.log_prob(MultiDiscreteAction::from_joint(j)), 4.0 * std::log(1.0 / 3.0), 1e-12);
  EXPECT_NEAR(4.0 * std::log(1.0 / 3.0), -4.3944, 1e-4);
}

TEST(Policy, ClosedFormSoftmax) {
  Vec logits = Vec::Zero(12);
  logits(6) = std::log(2.0);  // forward branch
  const auto probs = ActionDistribution::from_logits(logits).branch_probs();
  EXPECT_NEAR(probs[2][0], 0.5, 1e-15);
  EXPECT_NEAR(probs[2][1], 0.25, 1e-15);
  EXPECT_NEAR(probs[2][2], 0.25, 1e-15);
}

TEST(Policy, BranchesNormalizedAndJointIsSumOfBranches) {
  Rng rng(4);
  for (int i = 0; i < 50; ++i) {
    Vec logits(12);
    oracle::fill_gaussian(logits, rng, 3.0);
    const ActionDistribution d = ActionDistribution::from_logits(logits);
    for (const auto& b : d.branch_probs()) EXPECT_NEAR(b[0] + b[1] + b[2], 1.0, 1e-9);
    const MultiDiscreteAction a = oracle::random_action(rng);
    double sum = 0.0;
    for (int b = 0; b < 4; ++b) sum += d.log_probs(b * 3 + a.idx[b]);
    EXPECT_EQ(d.log_prob(a), sum);
  }
}

TEST(Policy, GreedyInvariantToPerBranchShift) {
  Rng rng(8);
  for (int i = 0; i < 50; ++i) {
    Vec logits(12);
    oracle::fill_gaussian(logits, rng, 1.0);
    Vec shifted = logits;
    for (int b = 0; b < 4; ++b) shifted.segment(b * 3, 3).array() += 10.0 * oracle::gaussian(rng);
    EXPECT_EQ(ActionDistribution::from_logits(logits).greedy(), ActionDistribution::from_logits(shifted).greedy());
  }
}

TEST(Policy, SeededSamplingIsReproducible) {
  const NetParams p = oracle::random_net(2);
  Rng zr(1);
  const LatentState z = oracle::random_latent(zr, p.hidden_dim());
  Rng a(77), b(77);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(act(p, z, a).action, act(p, z, b).action);
}

TEST(RewardHead, ZeroHeadAndAffineOutput) {
  NetParams p = oracle::random_net(5);
  Rng rng(1);
  const LatentState z = oracle::random_latent(rng, p.hidden_dim());
  const MultiDiscreteAction a = oracle::random_action(rng);
  const double before = reward_estimate(p, z, a);
  p.reward.b2(0) += 2.5;
  EXPECT_NEAR(reward_estimate(p, z, a), before + 2.5, 1e-12);
  p.reward = MlpParams::zeros(p.hidden_dim() + 12, p.hidden_dim(), 1);
  for (int j = 0; j < kNumJointActions; ++j) EXPECT_EQ(reward_estimate(p, z, MultiDiscreteAction::from_joint(j)), 0.0);
  const auto all = reward_estimates_all(oracle::random_net(5), z);
  EXPECT_EQ(all[17], reward_estimate(oracle::random_net(5), z, MultiDiscreteAction::from_joint(17)));
}

TEST(Optimizer, ZeroLearningRateIsANoOp) {
  NetParams p = oracle::random_net(6);
  const std::string before = oracle::params_bytes(p);
  HeadGrads g;
  g.policy = p.policy;
  g.reward = p.reward;
  OptimizerState adam = OptimizerState::adam();
  apply_gradients(p, g, adam, 0.0);
  EXPECT_EQ(oracle::params_bytes(p), before);
}

TEST(Optimizer, SgdOnHalfSquaredNormShrinksByNineTenths) {
  NetParams p = oracle::random_net(7, 8);
  OptimizerState sgd = OptimizerState::sgd();
  sgd.clip_norm = 0.0;
  const MlpParams start = p.policy;
  for (int k = 1; k <= 3; ++k) {
    HeadGrads g;
    g.policy = p.policy;  // d/dp ||p||^2 / 2
    apply_gradients(p, g, sgd, 0.1, 0.5 * p.policy.squared_norm());
    const double s = std::pow(0.9, k);
    EXPECT_NEAR((p.policy.w1 - s * start.w1).cwiseAbs().maxCoeff(), 0.0, 1e-14);
    EXPECT_NEAR((p.policy.b2 - s * start.b2).cwiseAbs().maxCoeff(), 0.0, 1e-14);
  }
}

TEST(Optimizer, GlobalNormClipAndFiniteness) {
  NetParams p = oracle::random_net(7, 8);
  OptimizerState sgd = OptimizerState::sgd();
  HeadGrads g;
  g.policy = p.policy.zeros_like();
  g.policy->b2(0) = 1000.0;
  const double before = p.policy.b2(0);
  apply_gradients(p, g, sgd, 1.0);
  EXPECT_NEAR(before - p.policy.b2(0), kGradClipNorm, 1e-12);

  g.policy->b2(0) = std::nan("");
  try {
    apply_gradients(p, g, sgd, 1.0);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("policy.b2"), std::string::npos);
  }
  NetParams thawed = p;
  thawed.frozen_encoder = false;
  HeadGrads ok;
  EXPECT_THROW(apply_gradients(thawed, ok, sgd, 1.0), UsageError);
}

TEST(Optimizer, MissingHeadIsUntouched) {
  NetParams p = oracle::random_net(9, 8);
  const MlpParams reward = p.reward;
  HeadGrads g;
  g.policy = p.policy;
  OptimizerState adam = OptimizerState::adam();
  apply_gradients(p, g, adam, 0.1);
  EXPECT_TRUE(oracle::same_tensors(p.reward, reward));
  EXPECT_FALSE(adam.reward.m.has_value());
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto dir = std::filesystem::temp_directory_path() / "riverpref_ckpt_test";
  std::filesystem::create_directories(dir);
  Checkpoint c{oracle::random_net(11), {}};
  c.meta.checkpoint_id = "Cp3";
  c.meta.episode_index = 3;
  c.meta.method = "SPAR-H";
  c.meta.hyperparameters = {{"alpha", 1.0}};
  c.meta.creation_seed = 42;
  save_checkpoint(c, (dir / "a.ckpt").string());
  const Checkpoint back = load_checkpoint((dir / "a.ckpt").string());
  save_checkpoint(back, (dir / "b.ckpt").string());
  EXPECT_EQ(serialize_checkpoint(c), serialize_checkpoint(back));
  EXPECT_EQ(back.meta.episode_index, 3);
  EXPECT_EQ(back.meta.checkpoint_id, "Cp3");
  EXPECT_EQ(back.meta.creation_seed, 42u);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, VersionGuardAndCorruption) {
  std::string bytes = serialize_checkpoint(Checkpoint{NetParams::init(1, 8), {}});
  EXPECT_NO_THROW(deserialize_checkpoint(bytes));
  std::string bad_version = bytes;
  bad_version[8] = 7;  // format_version follows the 8-byte magic
  EXPECT_THROW(deserialize_checkpoint(bad_version), FormatError);
  std::string flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x40;
  EXPECT_THROW(deserialize_checkpoint(flipped), FormatError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), FormatError);
}

}  // namespace
}  // namespace riverpref
