// SPDX-License-Identifier: Apache-2.0
// Finite-difference checks of every training objective.
#pragma once

#include <string>
#include <vector>

#include "support/oracles.hpp"

namespace riverpref::oracle {

struct GradCase {
  std::string name;
  // Builds random data around `p` and returns the loss as a function of the
  // parameters.
  std::function<LossFn(Rng&, const NetParams& p)> make;
};

inline std::pair<double, HeadGrads> as_pair(const LossValue& l) { return {l.value, l.grad}; }

/// Reference network near `p`: policy head perturbed by small noise.
inline NetParams nearby(const NetParams& p, Rng& rng, double scale) {
  NetParams r = p;
  MlpParams d = p.policy.zeros_like();
  randomize_mlp(d, rng, scale);
  mlp_axpy(r.policy, 1.0, d);
  return r;
}

/// A KL threshold at least `margin` away from every step's KL, so the gate
/// is constant inside the finite-difference stencil.
inline double gate_away_from(const NetParams& p, const NetParams& ref, const std::vector<TrainingStep>& steps,
                             Rng& rng, double margin) {
  std::vector<double> kls;
  for (const auto& s : steps) kls.push_back(factorized_kl(policy_distribution(p, s.z), policy_distribution(ref, s.z)));
  for (;;) {
    const double eta = uniform(rng, 1e-3, 0.2);
    bool ok = true;
    for (double k : kls) ok = ok && std::abs(k - eta) > margin;
    if (ok) return eta;
  }
}

inline std::vector<GradCase> gradient_cases() {
  std::vector<GradCase> c;
  c.push_back({"SPAR-P (BT on policy log-probs)", [](Rng& rng, const NetParams& p) -> LossFn {
                 auto pairs = random_pairs(rng, 6, p.hidden_dim());
                 return [pairs](const NetParams& q) { return as_pair(spar_p_loss(q, pairs, 1.0)); };
               }});
  c.push_back({"SPAR-R (BT on reward head)", [](Rng& rng, const NetParams& p) -> LossFn {
                 auto pairs = random_pairs(rng, 6, p.hidden_dim());
                 const double beta = uniform(rng, 0.5, 2.0);
                 return [pairs, beta](const NetParams& q) { return as_pair(spar_r_loss(q, pairs, beta)); };
               }});
  c.push_back({"SPAR-D (reference-normalized BT)", [](Rng& rng, const NetParams& p) -> LossFn {
                 auto pairs = random_pairs(rng, 6, p.hidden_dim());
                 const NetParams ref = nearby(p, rng, 0.2);
                 const double beta = uniform(rng, 0.5, 2.0);
                 return [pairs, ref, beta](const NetParams& q) { return as_pair(spar_d_loss(q, ref, pairs, beta)); };
               }});
  c.push_back({"FOCOPS surrogate with KL gate", [](Rng& rng, const NetParams& p) -> LossFn {
                 auto steps = random_steps(rng, 8, p.hidden_dim(), 0.0);
                 const NetParams ref = nearby(p, rng, 0.05);
                 std::vector<double> adv;
                 for (std::size_t i = 0; i < steps.size(); ++i) adv.push_back(gaussian(rng));
                 const double eta = gate_away_from(p, ref, steps, rng, 1e-3);
                 const double lambda = uniform(rng, 0.5, 3.0);
                 return [steps, ref, adv, eta, lambda](const NetParams& q) {
                   FocopsResult r = focops_loss(q, ref, steps, adv, eta, lambda);
                   return std::make_pair(r.value, r.grad);
                 };
               }});
  c.push_back({"SPAR-H (BT + alpha * FOCOPS)", [](Rng& rng, const NetParams& p) -> LossFn {
                 auto pairs = random_pairs(rng, 5, p.hidden_dim());
                 auto steps = random_steps(rng, 8, p.hidden_dim(), 0.0);
                 const NetParams ref = nearby(p, rng, 0.05);
                 std::vector<double> adv;
                 for (std::size_t i = 0; i < steps.size(); ++i) adv.push_back(gaussian(rng));
                 HybridTerms terms;
                 terms.alpha = uniform(rng, 0.1, 5.0);
                 terms.eta = gate_away_from(p, ref, steps, rng, 1e-3);
                 terms.lambda = uniform(rng, 0.5, 3.0);
                 return [pairs, steps, ref, adv, terms](const NetParams& q) {
                   HybridResult r = spar_h_loss(q, ref, pairs, steps, adv, terms);
                   return std::make_pair(r.value, r.grad);
                 };
               }});
  c.push_back({"IWR (intervention-weighted BC)", [](Rng& rng, const NetParams& p) -> LossFn {
                 auto steps = random_steps(rng, 10, p.hidden_dim(), 0.3);
                 return [steps](const NetParams& q) { return as_pair(iwr_loss(q, steps)); };
               }});
  c.push_back({"HG-DAgger (BC on interventions)", [](Rng& rng, const NetParams& p) -> LossFn {
                 auto steps = random_steps(rng, 10, p.hidden_dim(), 0.5);
                 steps[0].intervened = true;
                 steps[0].a_human = random_other_action(rng, steps[0].a_agent);
                 steps[0].a_exec = *steps[0].a_human;
                 return [steps](const NetParams& q) { return as_pair(hg_dagger_loss(q, steps)); };
               }});
  c.push_back({"COACH ascent direction", [](Rng& rng, const NetParams& p) -> LossFn {
                 auto steps = random_steps(rng, 10, p.hidden_dim(), 0.3);
                 const double zeta = uniform(rng, 0.05, 0.5);
                 return [steps, zeta](const NetParams& q) { return as_pair(coach_objective(q, steps, zeta)); };
               }});
  c.push_back({"behavior cloning", [](Rng& rng, const NetParams& p) -> LossFn {
                 std::vector<LatentState> z;
                 std::vector<MultiDiscreteAction> a;
                 for (int i = 0; i < 8; ++i) {
                   z.push_back(random_latent(rng, p.hidden_dim()));
                   a.push_back(random_action(rng));
                 }
                 return [z, a](const NetParams& q) { return as_pair(behavior_cloning_loss(q, z, a)); };
               }});
  c.push_back({"reward regression", [](Rng& rng, const NetParams& p) -> LossFn {
                 std::vector<LatentState> z;
                 std::vector<MultiDiscreteAction> a;
                 std::vector<double> y;
                 for (int i = 0; i < 8; ++i) {
                   z.push_back(random_latent(rng, p.hidden_dim()));
                   a.push_back(random_action(rng));
                   y.push_back(gaussian(rng));
                 }
                 return [z, a, y](const NetParams& q) { return as_pair(reward_regression_loss(q, z, a, y)); };
               }});
  return c;
}

struct GradReport {
  int points = 0;
  double max_rel_error = 0.0;
};

/// `points` random parameter points, each with fresh data and a fresh
/// random direction.
inline GradReport check_gradient(const GradCase& gc, int points, std::uint64_t seed, int hidden = 16) {
  GradReport r;
  for (int i = 0; i < points; ++i) {
    const NetParams p = random_net(mix_seed(seed, static_cast<std::uint64_t>(i)), hidden);
    Rng rng(mix_seed(seed, 1000 + static_cast<std::uint64_t>(i)));
    const LossFn f = gc.make(rng, p);
    r.max_rel_error = std::max(r.max_rel_error, directional_rel_error(f, p, rng));
    ++r.points;
  }
  return r;
}

}  // namespace riverpref::oracle
