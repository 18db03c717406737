// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <compare>
#include <optional>
#include <span>
#include <vector>

#include "riverpref/net.hpp"

namespace riverpref {

/// (episode id, time index) of a logged step.
struct StepRef {
  int episode_id = 0;
  int t = 0;
  friend auto operator<=>(const StepRef&, const StepRef&) = default;
};

/// Statewise preference a_h > a_a at the referenced state.
struct PreferencePair {
  StepRef step_ref;
  MultiDiscreteAction a_h;
  MultiDiscreteAction a_a;
  friend bool operator==(const PreferencePair&, const PreferencePair&) = default;
};

/// One logged step with its recomputed latent, ready for loss evaluation.
struct TrainingStep {
  StepRef ref;
  LatentState z;
  MultiDiscreteAction a_agent;
  std::optional<MultiDiscreteAction> a_human;
  MultiDiscreteAction a_exec;
  bool intervened = false;
  bool excluded = false;
};

/// A preference pair resolved against its state.
struct PairSample {
  StepRef ref;
  LatentState z;
  MultiDiscreteAction a_h;
  MultiDiscreteAction a_a;
};

/// Resolves pairs against logged steps; a pair pointing at a non-intervened
/// or unknown step is a usage error.
std::vector<PairSample> resolve_pairs(std::span<const PreferencePair> pairs, std::span<const TrainingStep> steps);

struct LossValue {
  double value = 0.0;
  HeadGrads grad;
};

struct BtTerm {
  double loss = 0.0;
  double d_pos = 0.0;  // d loss / d score_pos
  double d_neg = 0.0;
};

/// -log sigmoid(beta * (pos - neg)).
BtTerm bt_nll(double score_pos, double score_neg, double beta);

/// BT on joint policy log-probabilities; policy head only.
LossValue spar_p_loss(const NetParams& params, std::span<const PairSample> pairs, double beta = 1.0);
/// BT on reward-head scores; reward head only.
LossValue spar_r_loss(const NetParams& params, std::span<const PairSample> pairs, double beta = 1.0);
/// Reference-normalized BT (DPO form) against ref_params; policy head only.
LossValue spar_d_loss(const NetParams& params, const NetParams& ref_params, std::span<const PairSample> pairs,
                      double beta = 1.0);

struct AdvantageBatch {
  std::vector<double> returns;     // truncated K-step reward-to-go
  double mean = 0.0;
  double std = 0.0;                // population
  std::vector<double> advantages;  // (G - mean) / (std + eps)
};

AdvantageBatch advantages(std::span<const double> rewards, double gamma, int K, double eps);

struct FocopsResult {
  double value = 0.0;
  HeadGrads grad;
  std::vector<double> kl;
  std::vector<double> ratio;
  int gated = 0;  // steps with KL > eta
};

/// Mean over steps of 1{KL_t <= eta} (KL_t - rho_t A_t / lambda). `normalizer`
/// defaults to the number of steps.
FocopsResult focops_loss(const NetParams& params, const NetParams& ref_params, std::span<const TrainingStep> steps,
                         std::span<const double> adv, double eta, double lambda,
                         std::optional<double> normalizer = std::nullopt);

/// Exact KL between two factorized policies (sum of per-branch KLs).
double factorized_kl(const ActionDistribution& p, const ActionDistribution& q);

struct HybridTerms {
  double alpha = 1.0;
  double eta = 0.05;
  double lambda = 1.5;
};

struct HybridResult {
  double value = 0.0;
  double direct = 0.0;
  double rl = 0.0;
  int gated = 0;
  HeadGrads grad;
};

/// SPAR-P + alpha * FOCOPS. Pair states and RL steps must be disjoint.
HybridResult spar_h_loss(const NetParams& params, const NetParams& ref_params, std::span<const PairSample> pairs,
                         std::span<const TrainingStep> rl_steps, std::span<const double> adv,
                         const HybridTerms& terms);

/// Intervention-weighted behavior cloning on executed actions.
LossValue iwr_loss(const NetParams& params, std::span<const TrainingStep> steps);
double iwr_takeover_weight(std::span<const TrainingStep> steps);
/// Behavior cloning of the overseer on intervened steps only.
LossValue hg_dagger_loss(const NetParams& params, std::span<const TrainingStep> steps);

/// COACH label: -1 on intervened steps, zeta otherwise.
double coach_label(const TrainingStep& s, double zeta);
/// J = sum_t f_t log pi(a_agent_t | s_t); grad is the ascent direction dJ/dtheta.
LossValue coach_objective(const NetParams& params, std::span<const TrainingStep> steps, double zeta);
/// Sequential per-step ascent theta += lr f_t grad log pi(a_agent_t | s_t) (plain SGD).
void coach_update(NetParams& params, std::span<const TrainingStep> steps, double lr, double zeta);

/// Plain cross-entropy -sum log pi(a_t|z_t) over (z, a) samples; used by pretraining.
LossValue behavior_cloning_loss(const NetParams& params, std::span<const LatentState> z,
                                std::span<const MultiDiscreteAction> actions);
/// 0.5 * sum (R(z,a) - target)^2 over samples; reward head only.
LossValue reward_regression_loss(const NetParams& params, std::span<const LatentState> z,
                                 std::span<const MultiDiscreteAction> actions, std::span<const double> targets);

}  // namespace riverpref
