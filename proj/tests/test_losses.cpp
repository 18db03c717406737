// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include <gtest/gtest.h>

#include "riverpref/losses.hpp"
#include "riverpref/retrain.hpp"
#include "support/gradcheck.hpp"

namespace riverpref {
namespace {

using oracle::random_latent;

/// Network whose policy logits are all zero (uniform) and reward head zero.
NetParams flat_net(int hidden = 16) {
  NetParams p = NetParams::init(1, hidden);
  p.policy.w2.setZero();
  p.policy.b2.setZero();
  p.reward.w2.setZero();
  p.reward.b2.setZero();
  return p;
}

PairSample one_pair(Rng& rng, int hidden) {
  return {{0, 0}, random_latent(rng, hidden), MultiDiscreteAction::make(2, 1, 2, 1), MultiDiscreteAction::make(0, 1, 0, 1)};
}

TEST(BradleyTerry, ClosedFormValues) {
  EXPECT_NEAR(bt_nll(0.3, 0.3, 1.0).loss, std::log(2.0), 1e-12);
  EXPECT_NEAR(bt_nll(std::log(3.0), 0.0, 1.0).loss, -std::log(0.75), 1e-12);
  EXPECT_NEAR(-std::log(0.75), 0.2877, 1e-4);
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const double d = uniform(rng, -5.0, 5.0);
    EXPECT_NEAR(bt_nll(d, 0.0, 2.0).loss, bt_nll(2.0 * d, 0.0, 1.0).loss, 1e-12);
  }
  EXPECT_THROW(bt_nll(0.0, 0.0, 0.0), UsageError);
  // Extreme margins stay finite.
  EXPECT_TRUE(std::isfinite(bt_nll(-800.0, 800.0, 1.0).loss));
  EXPECT_NEAR(bt_nll(800.0, -800.0, 1.0).loss, 0.0, 1e-300);
}

TEST(BradleyTerry, ScoreDerivativesMatchFiniteDifferences) {
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    const double a = uniform(rng, -4.0, 4.0), b = uniform(rng, -4.0, 4.0), beta = uniform(rng, 0.2, 3.0);
    const BtTerm t = bt_nll(a, b, beta);
    const double h = 1e-5;
    const double fa = (bt_nll(a + h, b, beta).loss - bt_nll(a - h, b, beta).loss) / (2 * h);
    const double fb = (bt_nll(a, b + h, beta).loss - bt_nll(a, b - h, beta).loss) / (2 * h);
    EXPECT_LT(std::abs(fa - t.d_pos) / std::max(std::abs(fa), 1e-6), 1e-6);
    EXPECT_LT(std::abs(fb - t.d_neg) / std::max(std::abs(fb), 1e-6), 1e-6);
  }
}

TEST(SparP, UniformPolicyOnePairIsLn2) {
  const NetParams p = flat_net();
  Rng rng(3);
  const std::vector<PairSample> pairs{one_pair(rng, 16)};
  EXPECT_NEAR(spar_p_loss(p, pairs).value, std::log(2.0), 1e-12);
  EXPECT_EQ(spar_p_loss(p, {}).value, 0.0);
  EXPECT_FALSE(spar_p_loss(p, {}).grad.policy.has_value());
}

TEST(SparP, OneStepIncreasesTheMargin) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    NetParams p = oracle::random_net(trial);
    const std::vector<PairSample> pairs{oracle::random_pairs(rng, 1, p.hidden_dim())};
    auto margin = [&](const NetParams& q) {
      const ActionDistribution d = policy_distribution(q, pairs[0].z);
      return d.log_prob(pairs[0].a_h) - d.log_prob(pairs[0].a_a);
    };
    const double before = margin(p);
    const LossValue l = spar_p_loss(p, pairs);
    OptimizerState sgd = OptimizerState::sgd();
    apply_gradients(p, l.grad, sgd, 1e-3, l.value);
    EXPECT_GT(margin(p), before);
  }
}

TEST(SparR, ZeroHeadLn2PerPairAndPolicyUntouched) {
  NetParams p = flat_net();
  Rng rng(5);
  const auto pairs = oracle::random_pairs(rng, 7, 16);
  EXPECT_NEAR(spar_r_loss(p, pairs).value, 7.0 * std::log(2.0), 1e-12);
  const MlpParams policy = p.policy;
  OptimizerState adam = OptimizerState::adam();
  for (int i = 0; i < 25; ++i) {
    const LossValue l = spar_r_loss(p, pairs);
    EXPECT_FALSE(l.grad.policy.has_value());
    apply_gradients(p, l.grad, adam, 1e-2, l.value);
  }
  EXPECT_TRUE(oracle::same_tensors(p.policy, policy));
}

// Synthetic overseer that always prefers moving forward over backing up.
TEST(SparR, TenEpochsOrderMostSyntheticPairs) {
  NetParams p = NetParams::init(6);
  Rng rng(6);
  std::vector<PairSample> pairs;
  for (int i = 0; i < 50; ++i) {
    PairSample s;
    s.ref = {0, i};
    s.z = random_latent(rng, p.hidden_dim());
    s.a_h = oracle::random_action(rng);
    s.a_h.idx[2] = 2;
    s.a_a = oracle::random_action(rng);
    s.a_a.idx[2] = 0;
    pairs.push_back(s);
  }
  OptimizerState adam = OptimizerState::adam();
  for (int epoch = 0; epoch < 10; ++epoch) {
    const LossValue l = spar_r_loss(p, pairs);
    apply_gradients(p, l.grad, adam, HyperParams{}.reward_lr, l.value);
  }
  int ordered = 0;
  for (const auto& s : pairs) ordered += reward_estimate(p, s.z, s.a_h) > reward_estimate(p, s.z, s.a_a) ? 1 : 0;
  EXPECT_GE(ordered, 45);
}

TEST(Advantages, HandComputedValues) {
  const std::vector<double> r{1.0, 2.0, 3.0};
  const AdvantageBatch b = advantages(r, 0.0, 32, 1e-8);
  EXPECT_EQ(b.returns, r);
  EXPECT_NEAR(b.std, std::sqrt(2.0 / 3.0), 1e-15);
  EXPECT_NEAR(b.advantages[0], -1.2247, 1e-4);
  EXPECT_NEAR(b.advantages[1], 0.0, 1e-15);
  EXPECT_NEAR(b.advantages[2], 1.2247, 1e-4);
}

TEST(Advantages, BruteForceTruncatedReturns) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const int T = 1 + static_cast<int>(rng() % 40);
    const int K = 1 + static_cast<int>(rng() % 12);
    const double gamma = uniform01(rng);
    std::vector<double> r;
    for (int t = 0; t < T; ++t) r.push_back(uniform01(rng) < 0.4 ? 1.0 : 0.0);
    const AdvantageBatch b = advantages(r, gamma, K, 1e-8);
    double mean = 0.0;
    for (int t = 0; t < T; ++t) {
      double g = 0.0;
      for (int k = 0; k < K && t + k < T; ++k) g += std::pow(gamma, k) * r[static_cast<std::size_t>(t + k)];
      EXPECT_NEAR(b.returns[static_cast<std::size_t>(t)], g, 1e-12);
      mean += g / T;
    }
    double var = 0.0;
    for (double g : b.returns) var += (g - mean) * (g - mean) / T;
    for (int t = 0; t < T; ++t) {
      const double want = var == 0.0 ? 0.0 : (b.returns[static_cast<std::size_t>(t)] - mean) / (std::sqrt(var) + 1e-8);
      EXPECT_NEAR(b.advantages[static_cast<std::size_t>(t)], want, 1e-9);
    }
  }
}

TEST(Advantages, ConstantRewardsOnlyTruncationDiffers) {
  const std::vector<double> r(10, 1.0);
  const AdvantageBatch b = advantages(r, 0.9, 32, 1e-8);
  for (std::size_t t = 1; t < r.size(); ++t) EXPECT_LT(b.returns[t], b.returns[t - 1]);
  const AdvantageBatch flat = advantages(r, 0.9, 1, 1e-8);
  for (double a : flat.advantages) EXPECT_EQ(a, 0.0);
  const AdvantageBatch g0 = advantages(std::vector<double>{0.0, 1.0, 1.0, 0.0}, 0.0, 5, 1e-8);
  EXPECT_EQ(g0.advantages[1], g0.advantages[2]);
  EXPECT_THROW(advantages(r, 1.5, 3, 1e-8), UsageError);
}

TEST(Focops, ReferencePointValue) {
  const NetParams p = oracle::random_net(8);
  Rng rng(8);
  const auto steps = oracle::random_steps(rng, 1, p.hidden_dim(), 0.0);
  const std::vector<double> adv{1.5};
  const FocopsResult r = focops_loss(p, p, steps, adv, 0.05, 1.5);
  EXPECT_NEAR(r.value, -1.0, 1e-12);
  EXPECT_EQ(r.kl[0], 0.0);
  EXPECT_EQ(r.ratio[0], 1.0);
  const FocopsResult zero = focops_loss(p, p, steps, std::vector<double>{0.0}, 0.05, 1.5);
  EXPECT_EQ(zero.value, 0.0);
}

TEST(Focops, GatedStepsContributeNothingBitwise) {
  Rng rng(9);
  int mixed = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const NetParams p = oracle::random_net(100 + trial);
    const NetParams ref = oracle::nearby(p, rng, 0.08);
    auto steps = oracle::random_steps(rng, 12, p.hidden_dim(), 0.0);
    std::vector<double> adv;
    for (std::size_t i = 0; i < steps.size(); ++i) adv.push_back(oracle::gaussian(rng));
    const FocopsResult full = focops_loss(p, ref, steps, adv, 0.05, 1.5);
    std::vector<TrainingStep> kept;
    std::vector<double> kept_adv;
    for (std::size_t i = 0; i < steps.size(); ++i)
      if (full.kl[i] <= 0.05) {
        kept.push_back(steps[i]);
        kept_adv.push_back(adv[i]);
      }
    const FocopsResult reduced =
        focops_loss(p, ref, kept, kept_adv, 0.05, 1.5, static_cast<double>(steps.size()));
    if (kept.empty() || full.gated == 0) continue;
    ++mixed;
    EXPECT_EQ(std::bit_cast<std::uint64_t>(full.value), std::bit_cast<std::uint64_t>(reduced.value));
    EXPECT_TRUE(oracle::same_tensors(*full.grad.policy, *reduced.grad.policy));
  }
  EXPECT_GE(mixed, 10);
}

TEST(Focops, KlIsTheSumOfBranchKls) {
  Rng rng(10);
  Vec a(12), b(12);
  oracle::fill_gaussian(a, rng, 1.0);
  oracle::fill_gaussian(b, rng, 1.0);
  const ActionDistribution p = ActionDistribution::from_logits(a), q = ActionDistribution::from_logits(b);
  // Brute force over the 81 joint actions.
  double kl = 0.0;
  for (int j = 0; j < kNumJointActions; ++j) {
    const MultiDiscreteAction x = MultiDiscreteAction::from_joint(j);
    kl += std::exp(p.log_prob(x)) * (p.log_prob(x) - q.log_prob(x));
  }
  EXPECT_NEAR(factorized_kl(p, q), kl, 1e-12);
  EXPECT_EQ(factorized_kl(p, p), 0.0);
}

TEST(SparH, AlphaZeroIsSparPAndAlphaOneIsTheSum) {
  Rng rng(11);
  const NetParams p = oracle::random_net(11);
  const NetParams ref = oracle::nearby(p, rng, 0.02);
  const auto pairs = oracle::random_pairs(rng, 4, p.hidden_dim());
  auto steps = oracle::random_steps(rng, 6, p.hidden_dim(), 0.0, 3);
  std::vector<double> adv{0.5, -1.0, 1.2, 0.1, -0.3, 0.9};
  HybridTerms t0;
  t0.alpha = 0.0;
  const HybridResult h0 = spar_h_loss(p, ref, pairs, steps, adv, t0);
  const LossValue sp = spar_p_loss(p, pairs);
  EXPECT_EQ(h0.value, sp.value);
  EXPECT_TRUE(oracle::same_tensors(*h0.grad.policy, *sp.grad.policy));

  HybridTerms t1;
  t1.alpha = 1.0;
  const HybridResult h1 = spar_h_loss(p, ref, pairs, steps, adv, t1);
  const FocopsResult f = focops_loss(p, ref, steps, adv, t1.eta, t1.lambda);
  EXPECT_NEAR(h1.value, sp.value + f.value, 1e-12);

  const HybridResult only_rl = spar_h_loss(p, ref, {}, steps, adv, t1);
  EXPECT_EQ(only_rl.value, f.value);
  EXPECT_TRUE(oracle::same_tensors(*only_rl.grad.policy, *f.grad.policy));

  steps[0].ref = pairs[0].ref;
  EXPECT_THROW(spar_h_loss(p, ref, pairs, steps, adv, t1), UsageError);
}

TEST(Iwr, TakeoverWeightAndFallbacks) {
  Rng rng(12);
  auto steps = oracle::random_steps(rng, 100, 16, 0.0);
  for (int i = 0; i < 20; ++i) {
    steps[static_cast<std::size_t>(i)].intervened = true;
    steps[static_cast<std::size_t>(i)].a_human = oracle::random_other_action(rng, steps[static_cast<std::size_t>(i)].a_agent);
    steps[static_cast<std::size_t>(i)].a_exec = *steps[static_cast<std::size_t>(i)].a_human;
  }
  EXPECT_DOUBLE_EQ(iwr_takeover_weight(steps), 4.0);

  const NetParams p = oracle::random_net(12);
  const auto none = oracle::random_steps(rng, 10, 16, 0.0);
  std::vector<LatentState> z;
  std::vector<MultiDiscreteAction> a;
  for (const auto& s : none) {
    z.push_back(s.z);
    a.push_back(s.a_exec);
  }
  EXPECT_EQ(iwr_loss(p, none).value, behavior_cloning_loss(p, z, a).value);
  auto all = oracle::random_steps(rng, 10, 16, 1.0);
  EXPECT_DOUBLE_EQ(iwr_takeover_weight(all), 1.0);
}

TEST(HgDagger, GatedBehaviorCloning) {
  const NetParams flat = flat_net();
  Rng rng(13);
  auto steps = oracle::random_steps(rng, 8, 16, 0.0);
  EXPECT_EQ(hg_dagger_loss(flat, steps).value, 0.0);
  steps[3].intervened = true;
  steps[3].a_human = oracle::random_other_action(rng, steps[3].a_agent);
  steps[3].a_exec = *steps[3].a_human;
  EXPECT_NEAR(hg_dagger_loss(flat, steps).value, 4.0 * std::log(3.0), 1e-12);
  EXPECT_NEAR(4.0 * std::log(3.0), 4.3944, 1e-4);

  // States of non-intervened steps do not matter.
  const NetParams p = oracle::random_net(13);
  const LossValue before = hg_dagger_loss(p, steps);
  for (auto& s : steps)
    if (!s.intervened) s.z = random_latent(rng, 16);
  const LossValue after = hg_dagger_loss(p, steps);
  EXPECT_EQ(before.value, after.value);
  EXPECT_TRUE(oracle::same_tensors(*before.grad.policy, *after.grad.policy));
}

TEST(SparD, AtTheReferenceEveryPairIsLn2AndGradientIsHalfTheMarginGradient) {
  Rng rng(14);
  const NetParams p = oracle::random_net(14);
  const auto pairs = oracle::random_pairs(rng, 5, p.hidden_dim());
  for (double beta : {1.0, 0.5, 2.0}) {
    const LossValue d = spar_d_loss(p, p, pairs, beta);
    EXPECT_NEAR(d.value, 5.0 * std::log(2.0), 1e-12);
    // spar_p at beta is -log sigmoid(beta * margin); its gradient at margin m
    // is -beta * sigmoid(-beta m) * dm. Build the expected -(beta/2) dm from it.
    MlpParams expected = p.policy.zeros_like();
    for (const auto& pr : pairs) {
      const std::vector<PairSample> one{pr};
      const ActionDistribution dist = policy_distribution(p, pr.z);
      const double m = dist.log_prob(pr.a_h) - dist.log_prob(pr.a_a);
      const double s = 1.0 / (1.0 + std::exp(beta * m));
      const LossValue lp = spar_p_loss(p, one, beta);
      oracle::mlp_axpy(expected, 0.5 / s, *lp.grad.policy);
    }
    EXPECT_LT((d.grad.policy->w1 - expected.w1).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((d.grad.policy->b2 - expected.b2).cwiseAbs().maxCoeff(), 1e-12);
  }
  EXPECT_EQ(HyperParams{}.beta, 1.0);
}

TEST(Coach, InterventionLowersTheProposedAction) {
  Rng rng(15);
  for (int trial = 0; trial < 20; ++trial) {
    NetParams p = oracle::random_net(200 + trial);
    auto steps = oracle::random_steps(rng, 1, p.hidden_dim(), 1.0);
    const double before = policy_distribution(p, steps[0].z).log_prob(steps[0].a_agent);
    coach_update(p, steps, 0.01, 0.1);
    EXPECT_LT(policy_distribution(p, steps[0].z).log_prob(steps[0].a_agent), before);
  }
  TrainingStep s;
  EXPECT_EQ(coach_label(s, 0.1), 0.1);
  s.intervened = true;
  EXPECT_EQ(coach_label(s, 0.1), -1.0);

  NetParams p = oracle::random_net(3);
  const std::string bytes = oracle::params_bytes(p);
  coach_update(p, oracle::random_steps(rng, 5, p.hidden_dim(), 0.5), 0.0, 0.1);
  EXPECT_EQ(oracle::params_bytes(p), bytes);
}

TEST(ResolvePairs, RejectsBadReferences) {
  Rng rng(16);
  auto steps = oracle::random_steps(rng, 4, 16, 0.0);
  steps[1].intervened = true;
  steps[1].a_human = oracle::random_other_action(rng, steps[1].a_agent);
  const PreferencePair good{steps[1].ref, *steps[1].a_human, steps[1].a_agent};
  EXPECT_EQ(resolve_pairs(std::vector<PreferencePair>{good}, steps).size(), 1u);
  const PreferencePair not_intervened{steps[0].ref, steps[1].a_agent, steps[0].a_agent};
  EXPECT_THROW(resolve_pairs(std::vector<PreferencePair>{not_intervened}, steps), UsageError);
  const PreferencePair unknown{{9, 9}, steps[1].a_agent, steps[0].a_agent};
  EXPECT_THROW(resolve_pairs(std::vector<PreferencePair>{unknown}, steps), UsageError);
}

class GradientCheck : public ::testing::TestWithParam<int> {};

TEST_P(GradientCheck, AnalyticMatchesCentralDifferences) {
  const auto cases = oracle::gradient_cases();
  const auto& gc = cases[static_cast<std::size_t>(GetParam())];
  const oracle::GradReport r = oracle::check_gradient(gc, 100, 0xfd00 + static_cast<std::uint64_t>(GetParam()));
  EXPECT_EQ(r.points, 100);
  EXPECT_LT(r.max_rel_error, 1e-4) << gc.name;
}

INSTANTIATE_TEST_SUITE_P(AllObjectives, GradientCheck,
                         ::testing::Range(0, static_cast<int>(oracle::gradient_cases().size())));

}  // namespace
}  // namespace riverpref
