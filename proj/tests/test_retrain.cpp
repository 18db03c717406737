// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "riverpref/retrain.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

namespace riverpref {
namespace {

const MultiDiscreteAction kForward = MultiDiscreteAction::make(1, 1, 2, 1);
const MultiDiscreteAction kLeft = MultiDiscreteAction::make(1, 1, 1, 2);

class NudgeThenWatch : public Overseer {
 public:
  OverseerDecision decide(const OverseerContext& ctx) override {
    if (ctx.t == 2) return OverseerDecision::override_with(kForward, InterventionReason::kInefficiency);
    return OverseerDecision::accept();
  }
};

/// Shared episode 0 plus an episode that ends in an unhandled corridor exit.
ReplayBuffer buffer_with_exclusion() {
  ReplayBuffer b;
  b.append(fixture::shared_buffer().episodes()[0]);
  NudgeThenWatch overseer;
  b.append(run_episode(fixture::default_world(), fixture::constant_policy(kLeft, kDefaultHiddenDim), overseer, 1,
                       StartSpec{5, 0.0, 6.0, 0.0}, 3, PolicyMode::kGreedy));
  return b;
}

ReplayBuffer zero_intervention_buffer() {
  ReplayBuffer b;
  NeverIntervene never;
  WorldConfig c = WorldConfig::default_river();
  c.step_limit = 60;
  static const RiverWorld w(c);
  for (int ep = 0; ep < 2; ++ep)
    b.append(run_episode(w, fixture::novice().checkpoint.params, never, ep, StartSpec{static_cast<std::size_t>(ep), 0.5, 6.0, 5.0},
                         mix_seed(4, ep), PolicyMode::kSampled));
  return b;
}

TEST(Retrain, ReportsEveryEpochWithConsistentCounts) {
  const NetParams& p = fixture::novice().checkpoint.params;
  for (Method m : kAllMethods) {
    int calls = 0;
    const RetrainResult r = retrain(m, fixture::shared_buffer(), p, HyperParams{}, [&](const LossReport&) { ++calls; });
    ASSERT_EQ(r.reports.size(), 10u) << to_string(m);
    EXPECT_EQ(calls, 10);
    for (const auto& rep : r.reports) {
      EXPECT_EQ(rep.total, rep.intervened + rep.non_intervened);
      EXPECT_GE(rep.intervened, 0);
      EXPECT_EQ(rep.method, to_string(m));
    }
    EXPECT_EQ(r.reports.front().epoch, 1);
    EXPECT_EQ(r.reports.back().epoch, 10);
  }
}

TEST(Retrain, EncoderStaysBitIdentical) {
  const NetParams& p = fixture::novice().checkpoint.params;
  for (Method m : kAllMethods) {
    const RetrainResult r = retrain(m, fixture::shared_buffer(), p, HyperParams{});
    bool same = true;
    NetParams a = p, b = r.params;
    std::vector<std::string> ga, gb;
    for_each_tensor(a, [&](const char* name, auto& t) {
      if (std::string(name).rfind("gru.", 0) == 0)
        ga.emplace_back(reinterpret_cast<const char*>(t.data()), static_cast<std::size_t>(t.size()) * sizeof(double));
    });
    for_each_tensor(b, [&](const char* name, auto& t) {
      if (std::string(name).rfind("gru.", 0) == 0)
        gb.emplace_back(reinterpret_cast<const char*>(t.data()), static_cast<std::size_t>(t.size()) * sizeof(double));
    });
    same = ga == gb;
    EXPECT_TRUE(same) << to_string(m);
    EXPECT_NE(oracle::params_bytes(r.params), oracle::params_bytes(p)) << to_string(m) << " did not learn";
  }
}

TEST(Retrain, AlphaZeroHybridIsTheDirectMethod) {
  HyperParams hp;
  hp.alpha = 0.0;
  const NetParams& p = fixture::novice().checkpoint.params;
  const RetrainResult h = retrain(Method::kSparH, fixture::shared_buffer(), p, hp);
  const RetrainResult d = retrain(Method::kSparP, fixture::shared_buffer(), p, hp);
  EXPECT_EQ(oracle::params_bytes(h.params), oracle::params_bytes(d.params));
  for (std::size_t i = 0; i < h.reports.size(); ++i) EXPECT_EQ(h.reports[i].direct, d.reports[i].direct);
}

TEST(Retrain, NoInterventionsNoUpdateForPreferenceAndInterventionLearners) {
  const ReplayBuffer b = zero_intervention_buffer();
  for (const auto& ep : b.episodes()) ASSERT_EQ(ep.totals.interventions, 0);
  const NetParams& p = fixture::novice().checkpoint.params;
  for (Method m : {Method::kSparP, Method::kSparR, Method::kSparD, Method::kHgDagger})
    EXPECT_EQ(oracle::params_bytes(retrain(m, b, p, HyperParams{}).params), oracle::params_bytes(p)) << to_string(m);
  // Learners with a signal on non-intervened steps still move.
  for (Method m : {Method::kSparH, Method::kIwr, Method::kCoach})
    EXPECT_NE(oracle::params_bytes(retrain(m, b, p, HyperParams{}).params), oracle::params_bytes(p)) << to_string(m);
}

TEST(Retrain, ExcludedTerminalTransitionNeverEntersALoss) {
  const ReplayBuffer b = buffer_with_exclusion();
  const Trajectory& bad = b.episodes()[1];
  ASSERT_TRUE(bad.records.back().excluded_from_training);
  ASSERT_EQ(bad.totals.interventions, 1);

  ReplayBuffer altered;
  altered.append(b.episodes()[0]);
  Trajectory t = bad;
  TransitionRecord& last = t.records.back();
  last.a_agent = MultiDiscreteAction::make(2, 0, 0, 2);
  last.a_exec = last.a_agent;
  last.observation.mask.fill(1);
  altered.append(t);

  const NetParams& p = fixture::novice().checkpoint.params;
  for (Method m : kAllMethods) {
    const RetrainResult r1 = retrain(m, b, p, HyperParams{});
    const RetrainResult r2 = retrain(m, altered, p, HyperParams{});
    EXPECT_EQ(oracle::params_bytes(r1.params), oracle::params_bytes(r2.params)) << to_string(m);
    int usable = 0;
    for (const auto& ep : b.episodes())
      for (const auto& rec : ep.records) usable += !rec.excluded_from_training;
    EXPECT_EQ(r1.reports.back().total, usable);
    EXPECT_LT(usable, static_cast<int>(b.total_steps()));
  }
}

TEST(Retrain, HybridOrdersTheTrainingPairs) {
  const NetParams& p = fixture::novice().checkpoint.params;
  const RetrainResult r = retrain(Method::kSparH, fixture::shared_buffer(), p, HyperParams{});
  const auto steps = build_training_steps(p, fixture::shared_buffer());
  const auto pairs = resolve_pairs(extract_preferences(fixture::shared_buffer()), steps);
  int ordered = 0;
  for (const auto& s : pairs) ordered += reward_estimate(r.params, s.z, s.a_h) > reward_estimate(r.params, s.z, s.a_a);
  EXPECT_GE(ordered, static_cast<int>(0.9 * static_cast<double>(pairs.size())));
  for (std::size_t e = 1; e < r.reports.size(); ++e)
    EXPECT_GE(r.reports[e].reward_margin, r.reports[e - 1].reward_margin - 1e-6);
}

TEST(Retrain, RejectsBadInput) {
  const NetParams& p = fixture::novice().checkpoint.params;
  EXPECT_THROW(retrain(Method::kSparH, ReplayBuffer{}, p, HyperParams{}), UsageError);
  HyperParams hp;
  hp.eta = 0.0;
  EXPECT_THROW(retrain(Method::kSparH, fixture::shared_buffer(), p, hp), ConfigError);
  EXPECT_THROW(method_from_string("PPO"), ConfigError);
  for (Method m : kAllMethods) EXPECT_EQ(method_from_string(to_string(m)), m);
}

TEST(HyperParams, JsonRoundTripAndValidation) {
  HyperParams hp;
  hp.alpha = 0.25;
  hp.K = 7;
  hp.reward_lr = 0.02;
  const HyperParams back = hyperparams_from_json(hyperparams_to_json(hp));
  EXPECT_EQ(hyperparams_to_json(back), hyperparams_to_json(hp));
  nlohmann::json j = hyperparams_to_json(hp);
  j["gamma"] = 1.5;
  EXPECT_THROW(hyperparams_from_json(j), ConfigError);
  HyperParams d;
  EXPECT_EQ(d.gamma, 0.99);
  EXPECT_EQ(d.eta, 0.05);
  EXPECT_EQ(d.lambda, 1.5);
  EXPECT_EQ(d.epochs, 10);
  EXPECT_EQ(d.zeta, 0.1);
}

TEST(LossReports, JsonLinesOnePerEpoch) {
  const RetrainResult r = retrain(Method::kSparR, fixture::shared_buffer(), fixture::novice().checkpoint.params, HyperParams{});
  const std::string text = loss_reports_to_jsonl(r.reports);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 10);
  const auto first = nlohmann::json::parse(text.substr(0, text.find('\n')));
  EXPECT_EQ(first.at("method"), "SPAR-R");
  EXPECT_GT(first.at("reward_bt").get<double>(), 0.0);
}

}  // namespace
}  // namespace riverpref
