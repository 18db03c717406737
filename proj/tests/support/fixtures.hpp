// SPDX-License-Identifier: Apache-2.0
// Expensive shared objects, built once per test binary.
#pragma once

#include "riverpref/harness.hpp"

namespace riverpref::fixture {

inline const RiverWorld& default_world() {
  static const RiverWorld w(WorldConfig::default_river());
  return w;
}

inline const ExperimentConfig& experiment() {
  static const ExperimentConfig cfg = make_experiment(default_world(), 1);
  return cfg;
}

inline const PretrainResult& novice() {
  static const PretrainResult r = pretrain_novice(default_world(), mix_seed(1, 0x6e6f76));
  return r;
}

/// The 5-episode scripted-overseer buffer collected with the novice.
inline const ReplayBuffer& shared_buffer() {
  static const ReplayBuffer b = collect_shared_buffer(default_world(), novice().checkpoint.params, experiment());
  return b;
}

/// Always proposes the given action.
inline NetParams constant_policy(const MultiDiscreteAction& a, int hidden = 16) {
  NetParams p = NetParams::init(5, hidden);
  p.policy.w2.setZero();
  p.policy.b2.setZero();
  for (int b = 0; b < kNumBranches; ++b) p.policy.b2(b * kBranchSize + a.idx[b]) = 5.0;
  return p;
}

}  // namespace riverpref::fixture
