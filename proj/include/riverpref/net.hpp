// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "riverpref/action.hpp"
#include "riverpref/common.hpp"
#include "riverpref/world.hpp"

namespace riverpref {

inline constexpr int kDefaultHiddenDim = 64;
inline constexpr int kEncoderInputDim = kMaskCells + kActionOneHotDim;  // 268
inline constexpr double kGradClipNorm = 10.0;

using LatentState = Vec;

/// Single-layer GRU cell. Gates: u (update), r (reset), c (candidate).
struct GruParams {
  Mat w_update, u_update;
  Vec b_update;
  Mat w_reset, u_reset;
  Vec b_reset;
  Mat w_cand, u_cand;
  Vec b_cand;
};

/// Two-layer perceptron: out = w2 * tanh(w1 * x + b1) + b2.
struct MlpParams {
  Mat w1;
  Vec b1;
  Mat w2;
  Vec b2;

  static MlpParams zeros(int in, int hidden, int out);
  MlpParams zeros_like() const { return zeros(static_cast<int>(w1.cols()), static_cast<int>(w1.rows()), static_cast<int>(w2.rows())); }
  double squared_norm() const;
  Eigen::Index size() const { return w1.size() + b1.size() + w2.size() + b2.size(); }
};

struct NetParams {
  GruParams gru;
  MlpParams policy;  // latent -> 12 logits (branch-major)
  MlpParams reward;  // latent (+) action one-hot -> scalar
  bool frozen_encoder = true;
  std::uint64_t init_seed = 0;

  int hidden_dim() const { return static_cast<int>(gru.b_update.size()); }

  /// Randomly initialized network: orthogonal recurrent weights, scaled
  /// uniform input weights, near-uniform initial policy.
  static NetParams init(std::uint64_t seed, int hidden_dim = kDefaultHiddenDim);
};

/// Visits every tensor with a stable name, GRU first.
template <typename Params, typename Fn>
void for_each_tensor(Params& p, Fn&& fn) {
  fn("gru.w_update", p.gru.w_update);
  fn("gru.u_update", p.gru.u_update);
  fn("gru.b_update", p.gru.b_update);
  fn("gru.w_reset", p.gru.w_reset);
  fn("gru.u_reset", p.gru.u_reset);
  fn("gru.b_reset", p.gru.b_reset);
  fn("gru.w_cand", p.gru.w_cand);
  fn("gru.u_cand", p.gru.u_cand);
  fn("gru.b_cand", p.gru.b_cand);
  fn("policy.w1", p.policy.w1);
  fn("policy.b1", p.policy.b1);
  fn("policy.w2", p.policy.w2);
  fn("policy.b2", p.policy.b2);
  fn("reward.w1", p.reward.w1);
  fn("reward.b1", p.reward.b1);
  fn("reward.w2", p.reward.w2);
  fn("reward.b2", p.reward.b2);
}

template <typename Mlp, typename Fn>
void for_each_mlp_tensor(Mlp& m, Fn&& fn) {
  fn("w1", m.w1);
  fn("b1", m.b1);
  fn("w2", m.w2);
  fn("b2", m.b2);
}

Vec encoder_input(const Observation& obs);

LatentState encode_step(const NetParams& params, const LatentState& z_prev, const Observation& obs);
LatentState encode_step(const NetParams& params, const LatentState& z_prev, const Vec& input);
LatentState initial_latent(const NetParams& params);
/// z_t for every observation of an executed history, starting from zeros.
std::vector<LatentState> encode_history(const NetParams& params, const std::vector<Observation>& observations);
/// FNV-1a over the raw bytes of the latent, as 16 hex digits.
std::string latent_fingerprint(const LatentState& z);

/// Per-branch categorical distribution over the 4x3 multi-discrete space.
struct ActionDistribution {
  Vec logits;     // 12, branch-major
  Vec log_probs;  // 12, per-branch log-softmax

  static ActionDistribution from_logits(const Vec& logits);
  double prob(int branch, int k) const { return std::exp(log_probs(branch * kBranchSize + k)); }
  double log_prob(const MultiDiscreteAction& a) const;
  /// Argmax per branch, ties to the lowest index.
  MultiDiscreteAction greedy() const;
  MultiDiscreteAction sample(Rng& rng) const;
  std::array<std::array<double, 3>, 4> branch_probs() const;
};

struct ActResult {
  ActionDistribution dist;
  MultiDiscreteAction action;
  double log_prob = 0.0;
};

enum class PolicyMode { kSampled, kGreedy };

Vec policy_logits(const NetParams& params, const LatentState& z);
ActionDistribution policy_distribution(const NetParams& params, const LatentState& z);
ActResult act(const NetParams& params, const LatentState& z, Rng& rng);
ActResult act(const NetParams& params, const LatentState& z, Rng& rng, PolicyMode mode);

Vec reward_input(const LatentState& z, const MultiDiscreteAction& a);
double reward_estimate(const NetParams& params, const LatentState& z, const MultiDiscreteAction& a);
/// R(z, a) for all 81 joint actions, indexed by joint index.
std::array<double, kNumJointActions> reward_estimates_all(const NetParams& params, const LatentState& z);

// ---- analytic gradient support -------------------------------------------

struct MlpCache {
  Vec input;
  Vec hidden;  // tanh activations
};

Vec mlp_forward(const MlpParams& p, const Vec& x, MlpCache* cache = nullptr);
/// Accumulates d(out)/d(params)^T * dout into grad.
void mlp_backward(const MlpParams& p, const MlpCache& cache, const Vec& dout, MlpParams& grad);

/// Gradients for the trainable heads. A missing head means "this loss does
/// not touch it": optimizers leave that head and its moments untouched.
struct HeadGrads {
  std::optional<MlpParams> policy;
  std::optional<MlpParams> reward;

  MlpParams& policy_or_zero(const NetParams& p);
  MlpParams& reward_or_zero(const NetParams& p);
  void add(const HeadGrads& other, double scale = 1.0);
  double squared_norm() const;
};

/// d log pi(a|z) / d logits = onehot(a) - p, per branch.
Vec log_prob_grad_logits(const ActionDistribution& dist, const MultiDiscreteAction& a);

enum class OptimizerKind { kSgd, kAdam };

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::kAdam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = kGradClipNorm;
  struct Moments {
    std::optional<MlpParams> m, v;
    long long t = 0;
  };
  Moments policy, reward;

  static OptimizerState adam() { return {}; }
  static OptimizerState sgd() {
    OptimizerState s;
    s.kind = OptimizerKind::kSgd;
    return s;
  }
};

/// Validates finiteness (naming the offending tensor), clips the global norm
/// of the present heads, then applies one SGD or Adam step. The GRU is never
/// touched; a non-frozen encoder is rejected.
void apply_gradients(NetParams& params, const HeadGrads& grads, OptimizerState& opt, double lr,
                     double loss = 0.0);

}  // namespace riverpref
