// SPDX-License-Identifier: Apache-2.0
#include "riverpref/retrain.hpp"

#include <algorithm>

namespace riverpref {

std::string to_string(Method m) {
  switch (m) {
    case Method::kSparP: return "SPAR-P";
    case Method::kSparR: return "SPAR-R";
    case Method::kSparD: return "SPAR-D";
    case Method::kSparH: return "SPAR-H";
    case Method::kIwr: return "IWR";
    case Method::kHgDagger: return "HG-DAgger";
    case Method::kCoach: return "COACH";
  }
  return "?";
}

Method method_from_string(const std::string& name) {
  for (Method m : kAllMethods)
    if (to_string(m) == name) return m;
  throw ConfigError("unknown method: " + name);
}

void HyperParams::validate() const {
  if (!(beta > 0.0)) throw ConfigError("hyperparameters: beta must be > 0");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("hyperparameters: gamma must be in [0, 1]");
  if (!(eta > 0.0)) throw ConfigError("hyperparameters: eta must be > 0");
  if (!(lambda > 0.0)) throw ConfigError("hyperparameters: lambda must be > 0");
  if (epochs < 1) throw ConfigError("hyperparameters: E must be >= 1");
  if (K < 1) throw ConfigError("hyperparameters: K must be >= 1");
  if (!(eps > 0.0)) throw ConfigError("hyperparameters: eps must be > 0");
  if (!(lr >= 0.0) || !(reward_lr >= 0.0) || !(coach_lr >= 0.0)) throw ConfigError("hyperparameters: learning rates must be >= 0");
  if (updates_per_epoch < 1) throw ConfigError("hyperparameters: updates_per_epoch must be >= 1");
}

nlohmann::json hyperparams_to_json(const HyperParams& hp) {
  return {{"alpha", hp.alpha}, {"beta", hp.beta},   {"gamma", hp.gamma}, {"eta", hp.eta},
          {"lambda", hp.lambda}, {"E", hp.epochs},  {"K", hp.K},         {"zeta", hp.zeta},
          {"lr", hp.lr},       {"reward_lr", hp.reward_lr}, {"eps", hp.eps},     {"updates_per_epoch", hp.updates_per_epoch},
          {"coach_lr", hp.coach_lr}};
}

HyperParams hyperparams_from_json(const nlohmann::json& j) {
  HyperParams hp;
  hp.alpha = j.value("alpha", hp.alpha);
  hp.beta = j.value("beta", hp.beta);
  hp.gamma = j.value("gamma", hp.gamma);
  hp.eta = j.value("eta", hp.eta);
  hp.lambda = j.value("lambda", hp.lambda);
  hp.epochs = j.value("E", hp.epochs);
  hp.K = j.value("K", hp.K);
  hp.zeta = j.value("zeta", hp.zeta);
  hp.lr = j.value("lr", hp.lr);
  hp.reward_lr = j.value("reward_lr", hp.reward_lr);
  hp.eps = j.value("eps", hp.eps);
  hp.updates_per_epoch = j.value("updates_per_epoch", hp.updates_per_epoch);
  hp.coach_lr = j.value("coach_lr", hp.coach_lr);
  hp.validate();
  return hp;
}

nlohmann::json loss_report_to_json(const LossReport& r) {
  return {{"method", r.method},
          {"epoch", r.epoch},
          {"direct", r.direct},
          {"reward_bt", r.reward_bt},
          {"rl_surrogate", r.rl_surrogate},
          {"intervened", r.intervened},
          {"non_intervened", r.non_intervened},
          {"total", r.total},
          {"pairs", r.pairs},
          {"gate_rejections", r.gate_rejections},
          {"reward_margin", r.reward_margin},
          {"policy_margin", r.policy_margin}};
}

std::string loss_reports_to_jsonl(const std::vector<LossReport>& reports) {
  std::string out;
  for (const auto& r : reports) out += loss_report_to_json(r).dump() + "\n";
  return out;
}

namespace {

/// Non-intervened steps grouped by episode, with per-episode standardized
/// advantages under the current reward head.
struct RlBatch {
  std::vector<TrainingStep> steps;
  std::vector<std::pair<std::size_t, std::size_t>> episodes;  // [begin, end)
};

RlBatch make_rl_batch(const std::vector<TrainingStep>& usable) {
  RlBatch b;
  for (const auto& s : usable) {
    if (s.intervened) continue;
    if (b.episodes.empty() || b.steps.back().ref.episode_id != s.ref.episode_id)
      b.episodes.emplace_back(b.steps.size(), b.steps.size());
    b.steps.push_back(s);
    b.episodes.back().second = b.steps.size();
  }
  return b;
}

std::vector<double> rl_advantages(const NetParams& params, const RlBatch& batch, const HyperParams& hp) {
  std::vector<double> adv(batch.steps.size(), 0.0);
  for (const auto& [begin, end] : batch.episodes) {
    std::vector<double> rewards;
    rewards.reserve(end - begin);
    for (std::size_t i = begin; i < end; ++i)
      rewards.push_back(reward_estimate(params, batch.steps[i].z, batch.steps[i].a_exec));
    const AdvantageBatch ab = advantages(rewards, hp.gamma, hp.K, hp.eps);
    std::copy(ab.advantages.begin(), ab.advantages.end(), adv.begin() + static_cast<std::ptrdiff_t>(begin));
  }
  return adv;
}

void fill_margins(const NetParams& params, const std::vector<PairSample>& pairs, LossReport& r) {
  if (pairs.empty()) return;
  double rm = 0.0, pm = 0.0;
  for (const auto& p : pairs) {
    rm += reward_estimate(params, p.z, p.a_h) - reward_estimate(params, p.z, p.a_a);
    const ActionDistribution d = policy_distribution(params, p.z);
    pm += d.log_prob(p.a_h) - d.log_prob(p.a_a);
  }
  r.reward_margin = rm / static_cast<double>(pairs.size());
  r.policy_margin = pm / static_cast<double>(pairs.size());
}

}  // namespace

RetrainResult retrain(Method method, const ReplayBuffer& buffer, const NetParams& params, const HyperParams& hp,
                      const EpochCallback& on_epoch) {
  hp.validate();
  if (buffer.empty()) throw UsageError("retrain: empty buffer");

  const std::vector<TrainingStep> all = build_training_steps(params, buffer);
  std::vector<TrainingStep> usable;
  usable.reserve(all.size());
  for (const auto& s : all)
    if (!s.excluded) usable.push_back(s);
  const std::vector<PreferencePair> prefs = extract_preferences(buffer);
  const std::vector<PairSample> pairs = resolve_pairs(prefs, usable);
  const RlBatch rl = make_rl_batch(usable);

  int intervened = 0;
  for (const auto& s : usable) intervened += s.intervened ? 1 : 0;

  RetrainResult result{params, {}};
  NetParams& theta = result.params;
  const NetParams theta0 = params;  // episode-boundary reference snapshot
  OptimizerState opt = OptimizerState::adam();
  const HybridTerms terms{hp.alpha, hp.eta, hp.lambda};

  auto reward_bt_updates = [&](LossReport& r) {
    for (int u = 0; u < hp.updates_per_epoch; ++u) {
      const LossValue l = spar_r_loss(theta, pairs, 1.0);
      r.reward_bt = l.value;
      apply_gradients(theta, l.grad, opt, hp.reward_lr, l.value);
    }
  };

  for (int epoch = 1; epoch <= hp.epochs; ++epoch) {
    LossReport rep;
    rep.method = to_string(method);
    rep.epoch = epoch;
    rep.intervened = intervened;
    rep.non_intervened = static_cast<int>(usable.size()) - intervened;
    rep.total = static_cast<int>(usable.size());
    rep.pairs = static_cast<int>(pairs.size());

    switch (method) {
      case Method::kSparP:
        if (pairs.empty()) break;
        for (int u = 0; u < hp.updates_per_epoch; ++u) {
          const LossValue l = spar_p_loss(theta, pairs, 1.0);
          rep.direct = l.value;
          apply_gradients(theta, l.grad, opt, hp.lr, l.value);
        }
        break;
      case Method::kSparR: {
        // Without preferences the reward head carries no human signal.
        if (pairs.empty()) break;
        reward_bt_updates(rep);
        const std::vector<double> adv = rl_advantages(theta, rl, hp);
        for (int u = 0; u < hp.updates_per_epoch; ++u) {
          const FocopsResult f = focops_loss(theta, theta0, rl.steps, adv, hp.eta, hp.lambda);
          rep.rl_surrogate = f.value;
          rep.gate_rejections = f.gated;
          apply_gradients(theta, f.grad, opt, hp.lr, f.value);
        }
        break;
      }
      case Method::kSparH: {
        // With alpha = 0 the RL pathway, reward head included, is off.
        if (hp.alpha != 0.0 && !pairs.empty()) reward_bt_updates(rep);
        const std::vector<double> adv =
            hp.alpha != 0.0 ? rl_advantages(theta, rl, hp) : std::vector<double>(rl.steps.size(), 0.0);
        for (int u = 0; u < hp.updates_per_epoch; ++u) {
          const HybridResult h = spar_h_loss(theta, theta0, pairs, rl.steps, adv, terms);
          rep.direct = h.direct;
          rep.rl_surrogate = h.rl;
          rep.gate_rejections = h.gated;
          if (!h.grad.policy) continue;
          apply_gradients(theta, h.grad, opt, hp.lr, h.value);
        }
        break;
      }
      case Method::kSparD: {
        if (pairs.empty()) break;
        const NetParams ref = theta;  // refreshed at every epoch
        for (int u = 0; u < hp.updates_per_epoch; ++u) {
          const LossValue l = spar_d_loss(theta, ref, pairs, hp.beta);
          rep.direct = l.value;
          apply_gradients(theta, l.grad, opt, hp.lr, l.value);
        }
        break;
      }
      case Method::kIwr:
        if (usable.empty()) break;
        for (int u = 0; u < hp.updates_per_epoch; ++u) {
          const LossValue l = iwr_loss(theta, usable);
          rep.direct = l.value;
          apply_gradients(theta, l.grad, opt, hp.lr, l.value);
        }
        break;
      case Method::kHgDagger:
        if (intervened == 0) break;
        for (int u = 0; u < hp.updates_per_epoch; ++u) {
          const LossValue l = hg_dagger_loss(theta, usable);
          rep.direct = l.value;
          apply_gradients(theta, l.grad, opt, hp.lr, l.value);
        }
        break;
      case Method::kCoach:
        rep.direct = coach_objective(theta, usable, hp.zeta).value;
        coach_update(theta, usable, hp.coach_lr, hp.zeta);
        break;
    }
    fill_margins(theta, pairs, rep);
    if (on_epoch) on_epoch(rep);
    result.reports.push_back(rep);
  }
  return result;
}

}  // namespace riverpref
