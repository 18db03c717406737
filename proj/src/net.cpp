// SPDX-License-Identifier: Apache-2.0
#include "riverpref/net.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <iomanip>

namespace riverpref {

namespace {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Mat uniform_mat(Rng& rng, Eigen::Index rows, Eigen::Index cols, double bound) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = uniform(rng, -bound, bound);
  return m;
}

Mat orthogonal(Rng& rng, Eigen::Index n) {
  Mat g(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) g(i, j) = normal01(rng);
  Eigen::HouseholderQR<Mat> qr(g);
  Mat q = qr.householderQ() * Mat::Identity(n, n);
  const Mat r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < n; ++j)
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  return q;
}

MlpParams init_mlp(Rng& rng, int in, int hidden, int out, double out_scale) {
  MlpParams m;
  m.w1 = uniform_mat(rng, hidden, in, std::sqrt(6.0 / (in + hidden)));
  m.b1 = Vec::Zero(hidden);
  m.w2 = uniform_mat(rng, out, hidden, out_scale);
  m.b2 = Vec::Zero(out);
  return m;
}

template <typename T>
bool all_finite(const T& t) {
  return t.allFinite();
}

}  // namespace

MlpParams MlpParams::zeros(int in, int hidden, int out) {
  return {Mat::Zero(hidden, in), Vec::Zero(hidden), Mat::Zero(out, hidden), Vec::Zero(out)};
}

double MlpParams::squared_norm() const {
  return w1.squaredNorm() + b1.squaredNorm() + w2.squaredNorm() + b2.squaredNorm();
}

NetParams NetParams::init(std::uint64_t seed, int hidden_dim) {
  if (hidden_dim < 1) throw ConfigError("hidden_dim must be >= 1");
  Rng rng(mix_seed(seed, 0x6E6574));
  NetParams p;
  p.init_seed = seed;
  const double in_bound = std::sqrt(6.0 / (kEncoderInputDim + hidden_dim));
  auto gate = [&](Mat& w, Mat& u, Vec& b) {
    w = uniform_mat(rng, hidden_dim, kEncoderInputDim, in_bound);
    u = orthogonal(rng, hidden_dim);
    b = Vec::Zero(hidden_dim);
  };
  gate(p.gru.w_update, p.gru.u_update, p.gru.b_update);
  gate(p.gru.w_reset, p.gru.u_reset, p.gru.b_reset);
  gate(p.gru.w_cand, p.gru.u_cand, p.gru.b_cand);
  p.policy = init_mlp(rng, hidden_dim, hidden_dim, kActionOneHotDim, 0.01);
  p.reward = init_mlp(rng, hidden_dim + kActionOneHotDim, hidden_dim, 1, 0.01);
  return p;
}

Vec encoder_input(const Observation& obs) {
  Vec x(kEncoderInputDim);
  for (int i = 0; i < kMaskCells; ++i) x(i) = obs.mask[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
  x.tail(kActionOneHotDim) = obs.prev_action.one_hot();
  return x;
}

LatentState initial_latent(const NetParams& params) { return Vec::Zero(params.hidden_dim()); }

LatentState encode_step(const NetParams& params, const LatentState& z_prev, const Vec& x) {
  const auto& g = params.gru;
  if (x.size() != g.w_update.cols())
    throw UsageError("encode_step: input length " + std::to_string(x.size()) + " != " +
                     std::to_string(g.w_update.cols()));
  if (z_prev.size() != g.u_update.cols()) throw UsageError("encode_step: latent dimension mismatch");
  const Vec a_u = g.w_update * x + g.u_update * z_prev + g.b_update;
  const Vec a_r = g.w_reset * x + g.u_reset * z_prev + g.b_reset;
  const Vec u = a_u.unaryExpr([](double v) { return sigmoid(v); });
  const Vec r = a_r.unaryExpr([](double v) { return sigmoid(v); });
  const Vec rh = r.cwiseProduct(z_prev);
  const Vec c = (g.w_cand * x + g.u_cand * rh + g.b_cand).array().tanh().matrix();
  return (Vec::Ones(u.size()) - u).cwiseProduct(z_prev) + u.cwiseProduct(c);
}

LatentState encode_step(const NetParams& params, const LatentState& z_prev, const Observation& obs) {
  return encode_step(params, z_prev, encoder_input(obs));
}

std::vector<LatentState> encode_history(const NetParams& params, const std::vector<Observation>& observations) {
  std::vector<LatentState> out;
  out.reserve(observations.size());
  LatentState z = initial_latent(params);
  for (const auto& o : observations) {
    z = encode_step(params, z, o);
    out.push_back(z);
  }
  return out;
}

std::string latent_fingerprint(const LatentState& z) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    unsigned char bytes[sizeof(double)];
    const double v = z(i);
    std::memcpy(bytes, &v, sizeof(double));
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 0x100000001b3ULL;
    }
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

ActionDistribution ActionDistribution::from_logits(const Vec& logits) {
  if (logits.size() != kActionOneHotDim) throw UsageError("policy logits must have 12 entries");
  ActionDistribution d;
  d.logits = logits;
  d.log_probs.resize(kActionOneHotDim);
  for (int b = 0; b < kNumBranches; ++b) {
    const auto seg = logits.segment(b * kBranchSize, kBranchSize);
    const double mx = seg.maxCoeff();
    const double lse = mx + std::log((seg.array() - mx).exp().sum());
    d.log_probs.segment(b * kBranchSize, kBranchSize) = seg.array() - lse;
  }
  return d;
}

double ActionDistribution::log_prob(const MultiDiscreteAction& a) const {
  double lp = 0.0;
  for (int b = 0; b < kNumBranches; ++b) lp += log_probs(b * kBranchSize + a.idx[b]);
  return lp;
}

MultiDiscreteAction ActionDistribution::greedy() const {
  MultiDiscreteAction a;
  for (int b = 0; b < kNumBranches; ++b) {
    int best = 0;
    for (int k = 1; k < kBranchSize; ++k)
      if (logits(b * kBranchSize + k) > logits(b * kBranchSize + best)) best = k;
    a.idx[b] = static_cast<std::uint8_t>(best);
  }
  return a;
}

MultiDiscreteAction ActionDistribution::sample(Rng& rng) const {
  MultiDiscreteAction a;
  for (int b = 0; b < kNumBranches; ++b) {
    const double u = uniform01(rng);
    double acc = 0.0;
    int pick = kBranchSize - 1;
    for (int k = 0; k < kBranchSize; ++k) {
      acc += prob(b, k);
      if (u < acc) {
        pick = k;
        break;
      }
    }
    a.idx[b] = static_cast<std::uint8_t>(pick);
  }
  return a;
}

std::array<std::array<double, 3>, 4> ActionDistribution::branch_probs() const {
  std::array<std::array<double, 3>, 4> out{};
  for (int b = 0; b < kNumBranches; ++b)
    for (int k = 0; k < kBranchSize; ++k) out[b][k] = prob(b, k);
  return out;
}

Vec mlp_forward(const MlpParams& p, const Vec& x, MlpCache* cache) {
  if (x.size() != p.w1.cols()) throw UsageError("mlp_forward: input dimension mismatch");
  Vec h = (p.w1 * x + p.b1).array().tanh().matrix();
  Vec out = p.w2 * h + p.b2;
  if (cache) {
    cache->input = x;
    cache->hidden = std::move(h);
  }
  return out;
}

void mlp_backward(const MlpParams& p, const MlpCache& cache, const Vec& dout, MlpParams& grad) {
  grad.w2.noalias() += dout * cache.hidden.transpose();
  grad.b2 += dout;
  const Vec dh = p.w2.transpose() * dout;
  const Vec da = dh.cwiseProduct((Vec::Ones(cache.hidden.size()) - cache.hidden.cwiseAbs2()));
  grad.w1.noalias() += da * cache.input.transpose();
  grad.b1 += da;
}

Vec policy_logits(const NetParams& params, const LatentState& z) { return mlp_forward(params.policy, z); }

ActionDistribution policy_distribution(const NetParams& params, const LatentState& z) {
  return ActionDistribution::from_logits(policy_logits(params, z));
}

ActResult act(const NetParams& params, const LatentState& z, Rng& rng, PolicyMode mode) {
  ActResult r;
  r.dist = policy_distribution(params, z);
  r.action = mode == PolicyMode::kGreedy ? r.dist.greedy() : r.dist.sample(rng);
  r.log_prob = r.dist.log_prob(r.action);
  return r;
}

ActResult act(const NetParams& params, const LatentState& z, Rng& rng) {
  return act(params, z, rng, PolicyMode::kSampled);
}

Vec reward_input(const LatentState& z, const MultiDiscreteAction& a) {
  Vec x(z.size() + kActionOneHotDim);
  x.head(z.size()) = z;
  x.tail(kActionOneHotDim) = a.one_hot();
  return x;
}

double reward_estimate(const NetParams& params, const LatentState& z, const MultiDiscreteAction& a) {
  return mlp_forward(params.reward, reward_input(z, a))(0);
}

std::array<double, kNumJointActions> reward_estimates_all(const NetParams& params, const LatentState& z) {
  std::array<double, kNumJointActions> out{};
  for (int j = 0; j < kNumJointActions; ++j) out[j] = reward_estimate(params, z, MultiDiscreteAction::from_joint(j));
  return out;
}

MlpParams& HeadGrads::policy_or_zero(const NetParams& p) {
  if (!policy) policy = p.policy.zeros_like();
  return *policy;
}

MlpParams& HeadGrads::reward_or_zero(const NetParams& p) {
  if (!reward) reward = p.reward.zeros_like();
  return *reward;
}

void HeadGrads::add(const HeadGrads& other, double scale) {
  auto merge = [scale](std::optional<MlpParams>& dst, const std::optional<MlpParams>& src) {
    if (!src) return;
    if (!dst) {
      dst = src->zeros_like();
    }
    dst->w1 += scale * src->w1;
    dst->b1 += scale * src->b1;
    dst->w2 += scale * src->w2;
    dst->b2 += scale * src->b2;
  };
  merge(policy, other.policy);
  merge(reward, other.reward);
}

double HeadGrads::squared_norm() const {
  return (policy ? policy->squared_norm() : 0.0) + (reward ? reward->squared_norm() : 0.0);
}

Vec log_prob_grad_logits(const ActionDistribution& dist, const MultiDiscreteAction& a) {
  Vec g = -dist.log_probs.array().exp().matrix();
  for (int b = 0; b < kNumBranches; ++b) g(b * kBranchSize + a.idx[b]) += 1.0;
  return g;
}

namespace {

void check_finite(const std::optional<MlpParams>& head, const char* head_name) {
  if (!head) return;
  for_each_mlp_tensor(*head, [&](const char* name, const auto& t) {
    if (!all_finite(t))
      throw NumericError(std::string("non-finite gradient in tensor ") + head_name + "." + name);
  });
}

void step_head(MlpParams& params, const MlpParams& grad, OptimizerState& opt, OptimizerState::Moments& mom,
               double lr, double scale) {
  if (opt.kind == OptimizerKind::kSgd) {
    params.w1 -= (lr * scale) * grad.w1;
    params.b1 -= (lr * scale) * grad.b1;
    params.w2 -= (lr * scale) * grad.w2;
    params.b2 -= (lr * scale) * grad.b2;
    return;
  }
  if (!mom.m) {
    mom.m = params.zeros_like();
    mom.v = params.zeros_like();
  }
  ++mom.t;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(mom.t));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(mom.t));
  auto update = [&](auto& p, const auto& g, auto& m, auto& v) {
    m = opt.beta1 * m + (1.0 - opt.beta1) * (scale * g);
    v = opt.beta2 * v + (1.0 - opt.beta2) * (scale * g).cwiseAbs2();
    p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + opt.eps);
  };
  update(params.w1, grad.w1, mom.m->w1, mom.v->w1);
  update(params.b1, grad.b1, mom.m->b1, mom.v->b1);
  update(params.w2, grad.w2, mom.m->w2, mom.v->w2);
  update(params.b2, grad.b2, mom.m->b2, mom.v->b2);
}

}  // namespace

void apply_gradients(NetParams& params, const HeadGrads& grads, OptimizerState& opt, double lr, double loss) {
  if (!params.frozen_encoder) throw UsageError("encoder training is not supported; set frozen_encoder");
  if (!std::isfinite(loss)) throw NumericError("non-finite loss");
  check_finite(grads.policy, "policy");
  check_finite(grads.reward, "reward");
  if (lr == 0.0) return;
  const double norm = std::sqrt(grads.squared_norm());
  const double scale = (opt.clip_norm > 0.0 && norm > opt.clip_norm) ? opt.clip_norm / norm : 1.0;
  if (grads.policy) step_head(params.policy, *grads.policy, opt, opt.policy, lr, scale);
  if (grads.reward) step_head(params.reward, *grads.reward, opt, opt.reward, lr, scale);
}

}  // namespace riverpref
