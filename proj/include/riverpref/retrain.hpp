// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "riverpref/hitl.hpp"
#include "riverpref/losses.hpp"
#include "riverpref/net.hpp"

namespace riverpref {

enum class Method { kSparP, kSparR, kSparD, kSparH, kIwr, kHgDagger, kCoach };

inline constexpr Method kAllMethods[] = {Method::kSparH, Method::kSparP, Method::kSparR, Method::kSparD,
                                         Method::kIwr,  Method::kHgDagger, Method::kCoach};

std::string to_string(Method m);
Method method_from_string(const std::string& name);

struct HyperParams {
  double alpha = 100.0;  // hybrid mixing weight
  double beta = 1.0;     // BT inverse temperature (SPAR-D)
  double gamma = 0.99;   // discount
  double eta = 0.05;     // per-state KL gate
  double lambda = 1.5;   // FOCOPS greediness
  int epochs = 10;       // E
  int K = 32;            // reward-to-go truncation
  double zeta = 0.1;     // COACH weak positive
  double lr = 3e-4;      // Adam step size for policy-head updates
  double reward_lr = 1e-2;  // Adam step size for the reward-head BT pathway
  double eps = 1e-8;     // standardization guard
  int updates_per_epoch = 1;  // full-batch optimizer steps per pathway per epoch
  double coach_lr = 0.01;     // plain SGD step size for COACH

  void validate() const;
};

nlohmann::json hyperparams_to_json(const HyperParams& hp);
HyperParams hyperparams_from_json(const nlohmann::json& j);

struct LossReport {
  std::string method;
  int epoch = 0;
  double direct = 0.0;        // SPAR-P / SPAR-D BT, or BC/COACH objective
  double reward_bt = 0.0;     // SPAR-R BT on the reward head
  double rl_surrogate = 0.0;  // FOCOPS
  int intervened = 0;
  int non_intervened = 0;
  int total = 0;
  int pairs = 0;
  int gate_rejections = 0;
  double reward_margin = 0.0;  // mean R(s,a_h) - R(s,a_a) over pairs after the epoch
  double policy_margin = 0.0;  // mean log pi(a_h|s) - log pi(a_a|s) over pairs after the epoch
};

nlohmann::json loss_report_to_json(const LossReport& r);
std::string loss_reports_to_jsonl(const std::vector<LossReport>& reports);

struct RetrainResult {
  NetParams params;
  std::vector<LossReport> reports;
};

using EpochCallback = std::function<void(const LossReport&)>;

/// E epochs of the method's update over the whole cumulative buffer, with
/// the reference policy snapshotted at entry. Excluded terminal transitions
/// never enter a loss.
RetrainResult retrain(Method method, const ReplayBuffer& buffer, const NetParams& params, const HyperParams& hp,
                      const EpochCallback& on_epoch = {});

}  // namespace riverpref
