// SPDX-License-Identifier: Apache-2.0
#include "riverpref/losses.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace riverpref {

namespace {

// log(1 + exp(x)) without overflow.
double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct PolicyEval {
  MlpCache cache;
  ActionDistribution dist;
};

PolicyEval eval_policy(const NetParams& params, const LatentState& z) {
  PolicyEval e;
  e.dist = ActionDistribution::from_logits(mlp_forward(params.policy, z, &e.cache));
  return e;
}

struct RewardEval {
  MlpCache cache;
  double value = 0.0;
};

RewardEval eval_reward(const NetParams& params, const LatentState& z, const MultiDiscreteAction& a) {
  RewardEval e;
  e.value = mlp_forward(params.reward, reward_input(z, a), &e.cache)(0);
  return e;
}

void backprop_reward(const NetParams& params, const RewardEval& e, double dout, MlpParams& grad) {
  Vec d(1);
  d(0) = dout;
  mlp_backward(params.reward, e.cache, d, grad);
}

}  // namespace

std::vector<PairSample> resolve_pairs(std::span<const PreferencePair> pairs, std::span<const TrainingStep> steps) {
  std::map<StepRef, const TrainingStep*> index;
  for (const auto& s : steps) index.emplace(s.ref, &s);
  std::vector<PairSample> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    auto it = index.find(p.step_ref);
    if (it == index.end())
      throw UsageError("preference pair references unknown step (episode " + std::to_string(p.step_ref.episode_id) +
                       ", t " + std::to_string(p.step_ref.t) + ")");
    if (!it->second->intervened)
      throw UsageError("preference pair references a non-intervened step (episode " +
                       std::to_string(p.step_ref.episode_id) + ", t " + std::to_string(p.step_ref.t) + ")");
    if (p.a_h == p.a_a) throw UsageError("preference pair with identical actions");
    out.push_back({p.step_ref, it->second->z, p.a_h, p.a_a});
  }
  return out;
}

BtTerm bt_nll(double score_pos, double score_neg, double beta) {
  if (!(beta > 0.0)) throw UsageError("bt_nll: beta must be > 0");
  const double x = beta * (score_pos - score_neg);
  BtTerm t;
  t.loss = softplus(-x);
  t.d_pos = -beta * sigmoid(-x);
  t.d_neg = -t.d_pos;
  return t;
}

LossValue spar_p_loss(const NetParams& params, std::span<const PairSample> pairs, double beta) {
  LossValue out;
  if (pairs.empty()) return out;
  MlpParams& g = out.grad.policy_or_zero(params);
  for (const auto& p : pairs) {
    const PolicyEval e = eval_policy(params, p.z);
    const BtTerm bt = bt_nll(e.dist.log_prob(p.a_h), e.dist.log_prob(p.a_a), beta);
    out.value += bt.loss;
    const Vec dlogits =
        bt.d_pos * log_prob_grad_logits(e.dist, p.a_h) + bt.d_neg * log_prob_grad_logits(e.dist, p.a_a);
    mlp_backward(params.policy, e.cache, dlogits, g);
  }
  return out;
}

LossValue spar_r_loss(const NetParams& params, std::span<const PairSample> pairs, double beta) {
  LossValue out;
  if (pairs.empty()) return out;
  MlpParams& g = out.grad.reward_or_zero(params);
  for (const auto& p : pairs) {
    const RewardEval h = eval_reward(params, p.z, p.a_h);
    const RewardEval a = eval_reward(params, p.z, p.a_a);
    const BtTerm bt = bt_nll(h.value, a.value, beta);
    out.value += bt.loss;
    backprop_reward(params, h, bt.d_pos, g);
    backprop_reward(params, a, bt.d_neg, g);
  }
  return out;
}

LossValue spar_d_loss(const NetParams& params, const NetParams& ref_params, std::span<const PairSample> pairs,
                      double beta) {
  LossValue out;
  if (pairs.empty()) return out;
  MlpParams& g = out.grad.policy_or_zero(params);
  for (const auto& p : pairs) {
    const PolicyEval e = eval_policy(params, p.z);
    const ActionDistribution ref = policy_distribution(ref_params, p.z);
    const double dh = e.dist.log_prob(p.a_h) - ref.log_prob(p.a_h);
    const double da = e.dist.log_prob(p.a_a) - ref.log_prob(p.a_a);
    const BtTerm bt = bt_nll(dh, da, beta);
    out.value += bt.loss;
    const Vec dlogits =
        bt.d_pos * log_prob_grad_logits(e.dist, p.a_h) + bt.d_neg * log_prob_grad_logits(e.dist, p.a_a);
    mlp_backward(params.policy, e.cache, dlogits, g);
  }
  return out;
}

AdvantageBatch advantages(std::span<const double> rewards, double gamma, int K, double eps) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw UsageError("advantages: gamma must be in [0, 1]");
  if (K < 1) throw UsageError("advantages: K must be >= 1");
  if (!(eps > 0.0)) throw UsageError("advantages: eps must be > 0");
  AdvantageBatch b;
  const std::size_t T = rewards.size();
  if (T == 0) return b;
  b.returns.assign(T, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    const std::size_t kt = std::min<std::size_t>(static_cast<std::size_t>(K), T - t);
    double disc = 1.0;
    double g = 0.0;
    for (std::size_t k = 0; k < kt; ++k) {
      g += disc * rewards[t + k];
      disc *= gamma;
    }
    b.returns[t] = g;
  }
  const auto [mn, mx] = std::minmax_element(b.returns.begin(), b.returns.end());
  b.advantages.assign(T, 0.0);
  if (*mn == *mx) {
    b.mean = *mn;
    b.std = 0.0;
    return b;
  }
  double sum = 0.0;
  for (double g : b.returns) sum += g;
  b.mean = sum / static_cast<double>(T);
  double ss = 0.0;
  for (double g : b.returns) ss += (g - b.mean) * (g - b.mean);
  b.std = std::sqrt(ss / static_cast<double>(T));
  for (std::size_t t = 0; t < T; ++t) b.advantages[t] = (b.returns[t] - b.mean) / (b.std + eps);
  return b;
}

double factorized_kl(const ActionDistribution& p, const ActionDistribution& q) {
  double kl = 0.0;
  for (int i = 0; i < kActionOneHotDim; ++i) kl += std::exp(p.log_probs(i)) * (p.log_probs(i) - q.log_probs(i));
  return kl;
}

FocopsResult focops_loss(const NetParams& params, const NetParams& ref_params, std::span<const TrainingStep> steps,
                         std::span<const double> adv, double eta, double lambda, std::optional<double> normalizer) {
  if (steps.size() != adv.size()) throw UsageError("focops_loss: steps and advantages differ in length");
  if (!(eta > 0.0) || !(lambda > 0.0)) throw UsageError("focops_loss: eta and lambda must be > 0");
  FocopsResult out;
  out.kl.assign(steps.size(), 0.0);
  out.ratio.assign(steps.size(), 1.0);
  if (steps.empty()) return out;
  const double n = normalizer.value_or(static_cast<double>(steps.size()));
  MlpParams& g = out.grad.policy_or_zero(params);
  for (std::size_t t = 0; t < steps.size(); ++t) {
    const TrainingStep& s = steps[t];
    const PolicyEval e = eval_policy(params, s.z);
    const ActionDistribution ref = policy_distribution(ref_params, s.z);
    const double kl = factorized_kl(e.dist, ref);
    const double rho = std::exp(e.dist.log_prob(s.a_exec) - ref.log_prob(s.a_exec));
    out.kl[t] = kl;
    out.ratio[t] = rho;
    if (kl > eta) {
      ++out.gated;
      continue;
    }
    out.value += (kl - rho * adv[t] / lambda) / n;
    Vec dlogits(kActionOneHotDim);
    for (int b = 0; b < kNumBranches; ++b) {
      double kl_b = 0.0;
      for (int k = 0; k < kBranchSize; ++k) {
        const int i = b * kBranchSize + k;
        kl_b += std::exp(e.dist.log_probs(i)) * (e.dist.log_probs(i) - ref.log_probs(i));
      }
      for (int k = 0; k < kBranchSize; ++k) {
        const int i = b * kBranchSize + k;
        dlogits(i) = std::exp(e.dist.log_probs(i)) * (e.dist.log_probs(i) - ref.log_probs(i) - kl_b);
      }
    }
    dlogits -= (adv[t] / lambda) * rho * log_prob_grad_logits(e.dist, s.a_exec);
    dlogits /= n;
    mlp_backward(params.policy, e.cache, dlogits, g);
  }
  return out;
}

HybridResult spar_h_loss(const NetParams& params, const NetParams& ref_params, std::span<const PairSample> pairs,
                         std::span<const TrainingStep> rl_steps, std::span<const double> adv,
                         const HybridTerms& terms) {
  std::set<StepRef> pair_refs;
  for (const auto& p : pairs) pair_refs.insert(p.ref);
  for (const auto& s : rl_steps)
    if (pair_refs.count(s.ref))
      throw UsageError("spar_h_loss: step (episode " + std::to_string(s.ref.episode_id) + ", t " +
                       std::to_string(s.ref.t) + ") is both a preference state and an RL step");
  HybridResult out;
  LossValue direct = spar_p_loss(params, pairs, 1.0);
  out.direct = direct.value;
  out.grad = std::move(direct.grad);
  if (terms.alpha != 0.0) {
    FocopsResult rl = focops_loss(params, ref_params, rl_steps, adv, terms.eta, terms.lambda);
    out.rl = rl.value;
    out.gated = rl.gated;
    out.grad.add(rl.grad, terms.alpha);
  }
  out.value = out.direct + terms.alpha * out.rl;
  return out;
}

double iwr_takeover_weight(std::span<const TrainingStep> steps) {
  std::size_t inter = 0;
  for (const auto& s : steps) inter += s.intervened ? 1 : 0;
  const std::size_t non = steps.size() - inter;
  if (inter == 0 || non == 0) return 1.0;
  return static_cast<double>(non) / static_cast<double>(inter);
}

LossValue iwr_loss(const NetParams& params, std::span<const TrainingStep> steps) {
  LossValue out;
  if (steps.empty()) return out;
  const double w_takeover = iwr_takeover_weight(steps);
  MlpParams& g = out.grad.policy_or_zero(params);
  for (const auto& s : steps) {
    const double w = s.intervened ? w_takeover : 1.0;
    const PolicyEval e = eval_policy(params, s.z);
    out.value += -w * e.dist.log_prob(s.a_exec);
    mlp_backward(params.policy, e.cache, -w * log_prob_grad_logits(e.dist, s.a_exec), g);
  }
  return out;
}

LossValue hg_dagger_loss(const NetParams& params, std::span<const TrainingStep> steps) {
  LossValue out;
  bool any = false;
  for (const auto& s : steps) any = any || s.intervened;
  if (!any) return out;
  MlpParams& g = out.grad.policy_or_zero(params);
  for (const auto& s : steps) {
    if (!s.intervened) continue;
    if (!s.a_human) throw UsageError("hg_dagger_loss: intervened step without a human action");
    const PolicyEval e = eval_policy(params, s.z);
    out.value += -e.dist.log_prob(*s.a_human);
    mlp_backward(params.policy, e.cache, -log_prob_grad_logits(e.dist, *s.a_human), g);
  }
  return out;
}

double coach_label(const TrainingStep& s, double zeta) { return s.intervened ? -1.0 : zeta; }

LossValue coach_objective(const NetParams& params, std::span<const TrainingStep> steps, double zeta) {
  LossValue out;
  if (steps.empty()) return out;
  MlpParams& g = out.grad.policy_or_zero(params);
  for (const auto& s : steps) {
    const double f = coach_label(s, zeta);
    const PolicyEval e = eval_policy(params, s.z);
    out.value += f * e.dist.log_prob(s.a_agent);
    mlp_backward(params.policy, e.cache, f * log_prob_grad_logits(e.dist, s.a_agent), g);
  }
  return out;
}

void coach_update(NetParams& params, std::span<const TrainingStep> steps, double lr, double zeta) {
  OptimizerState sgd = OptimizerState::sgd();
  for (const auto& s : steps) {
    const LossValue j = coach_objective(params, std::span<const TrainingStep>(&s, 1), zeta);
    // Ascent on J is descent on -J.
    HeadGrads descent;
    descent.add(j.grad, -1.0);
    apply_gradients(params, descent, sgd, lr, -j.value);
  }
}

LossValue behavior_cloning_loss(const NetParams& params, std::span<const LatentState> z,
                                std::span<const MultiDiscreteAction> actions) {
  if (z.size() != actions.size()) throw UsageError("behavior_cloning_loss: length mismatch");
  LossValue out;
  if (z.empty()) return out;
  MlpParams& g = out.grad.policy_or_zero(params);
  for (std::size_t i = 0; i < z.size(); ++i) {
    const PolicyEval e = eval_policy(params, z[i]);
    out.value += -e.dist.log_prob(actions[i]);
    mlp_backward(params.policy, e.cache, -log_prob_grad_logits(e.dist, actions[i]), g);
  }
  return out;
}

LossValue reward_regression_loss(const NetParams& params, std::span<const LatentState> z,
                                 std::span<const MultiDiscreteAction> actions, std::span<const double> targets) {
  if (z.size() != actions.size() || z.size() != targets.size())
    throw UsageError("reward_regression_loss: length mismatch");
  LossValue out;
  if (z.empty()) return out;
  MlpParams& g = out.grad.reward_or_zero(params);
  for (std::size_t i = 0; i < z.size(); ++i) {
    const RewardEval e = eval_reward(params, z[i], actions[i]);
    const double diff = e.value - targets[i];
    out.value += 0.5 * diff * diff;
    backprop_reward(params, e, diff, g);
  }
  return out;
}

}  // namespace riverpref
