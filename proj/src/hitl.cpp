// SPDX-License-Identifier: Apache-2.0
#include "riverpref/hitl.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

namespace riverpref {

std::string to_string(InterventionReason r) {
  switch (r) {
    case InterventionReason::kNone: return "none";
    case InterventionReason::kSafety: return "safety";
    case InterventionReason::kInefficiency: return "inefficiency";
  }
  return "none";
}

InterventionReason intervention_reason_from_string(const std::string& s) {
  if (s == "none") return InterventionReason::kNone;
  if (s == "safety") return InterventionReason::kSafety;
  if (s == "inefficiency") return InterventionReason::kInefficiency;
  throw FormatError("unknown intervention reason: " + s);
}

void validate_record(const TransitionRecord& r) {
  if (r.m != 0 && r.m != 1) throw FormatError("record: m must be 0 or 1");
  if (r.m == 1 && (!r.a_human || r.a_exec != *r.a_human))
    throw FormatError("record: intervened step must execute the human action");
  if (r.m == 0 && r.a_exec != r.a_agent) throw FormatError("record: non-intervened step must execute the agent action");
  if (r.excluded_from_training &&
      !(r.terminated && r.termination_reason == TerminationReason::kCorridorViolation && r.m == 0))
    throw FormatError("record: only unhandled corridor violations may be excluded");
  if (r.terminated != (r.termination_reason != TerminationReason::kNone))
    throw FormatError("record: terminated flag disagrees with termination_reason");
}

TrajectoryTotals Trajectory::recompute_totals() const {
  TrajectoryTotals t;
  for (const auto& r : records) {
    ++t.steps;
    t.interventions += r.m;
    t.episodic_reward += r.reward;
  }
  return t;
}

void ReplayBuffer::append(Trajectory traj) { episodes_.push_back(std::move(traj)); }

std::size_t ReplayBuffer::total_steps() const {
  std::size_t n = 0;
  for (const auto& e : episodes_) n += e.records.size();
  return n;
}

ReplayBuffer ReplayBuffer::prefix(std::size_t n) const {
  ReplayBuffer b;
  for (std::size_t i = 0; i < std::min(n, episodes_.size()); ++i) b.append(episodes_[i]);
  return b;
}

// ---- overseer ---------------------------------------------------------------

MultiDiscreteAction oracle_action(const RiverWorld& world, const Pose& pose, const CoverageState& cov) {
  const auto& cfg = world.config();
  const auto& segs = world.segments();
  // Target: the next unvisited segment downstream, or the nearest upstream
  // one once everything ahead is covered.
  const double arc_now = world.project(pose.x, pose.y).arc;
  std::optional<double> ahead, behind;
  for (std::size_t k = 0; k < segs.size(); ++k) {
    if (cov.visited(k)) continue;
    const double center = 0.5 * (segs[k].arc_begin + segs[k].arc_end);
    if (center >= arc_now) {
      if (!ahead || center < *ahead) ahead = center;
    } else if (!behind || center > *behind) {
      behind = center;
    }
  }
  const std::optional<double> target = ahead ? ahead : behind;
  const double z_mid = 0.5 * (cfg.z_min + cfg.z_max);

  struct Candidate {
    double gain = -1.0;
    double progress = -std::numeric_limits<double>::infinity();
    double yaw_change = 0.0;
    int joint = 0;
  };
  std::optional<Candidate> best;
  auto better = [](const Candidate& a, const Candidate& b) {
    if (a.gain != b.gain) return a.gain > b.gain;
    if (a.progress != b.progress) return a.progress > b.progress;
    if (a.yaw_change != b.yaw_change) return a.yaw_change < b.yaw_change;
    return a.joint < b.joint;
  };
  for (int j = 0; j < kNumJointActions; ++j) {
    const MultiDiscreteAction a = MultiDiscreteAction::from_joint(j);
    const Transition tr = world.transition(pose, a);
    if (tr.violation) continue;
    const Projection pr = world.project(tr.pose.x, tr.pose.y);
    Candidate c;
    c.joint = j;
    c.gain = world.marginal_gain(*tr.segment, cov);
    c.yaw_change = std::abs(a.yaw_deg());
    const double frontier = target ? std::abs(pr.arc - *target) : 0.0;
    const double heading = std::abs(wrap_deg(tr.pose.yaw - std::atan2(pr.tangent.y, pr.tangent.x) * 180.0 / std::numbers::pi));
    c.progress = -frontier - 0.5 * std::abs(pr.lateral) - 0.1 * std::abs(tr.pose.z - z_mid) - 0.01 * heading;
    if (!best || better(c, *best)) best = c;
  }
  return best ? MultiDiscreteAction::from_joint(best->joint) : MultiDiscreteAction::identity();
}

bool finishes_river(const RiverWorld& world, const Pose& pose, const MultiDiscreteAction& action) {
  const Transition tr = world.transition(pose, action);
  if (!tr.violation) return false;
  const auto& cfg = world.config();
  if (tr.pose.z < cfg.z_min || tr.pose.z > cfg.z_max) return false;
  const Projection pr = world.project(tr.pose.x, tr.pose.y);
  return pr.beyond_ends && pr.arc >= world.total_length() && std::abs(pr.lateral) <= cfg.corridor_half_width;
}

OverseerDecision scripted_overseer(const RiverWorld& world, const Pose& pose, const CoverageState& cov,
                                   const MultiDiscreteAction& proposed, std::span<const double> recent_rewards,
                                   int window) {
  const Transition tr = world.transition(pose, proposed);
  if (tr.violation && !finishes_river(world, pose, proposed))
    return OverseerDecision::override_with(oracle_action(world, pose, cov), InterventionReason::kSafety);
  if (window > 0 && recent_rewards.size() >= static_cast<std::size_t>(window)) {
    const auto tail = recent_rewards.last(static_cast<std::size_t>(window));
    if (std::all_of(tail.begin(), tail.end(), [](double r) { return r == 0.0; }))
      return OverseerDecision::override_with(oracle_action(world, pose, cov), InterventionReason::kInefficiency);
  }
  return OverseerDecision::accept();
}

OverseerDecision ScriptedOverseer::decide(const OverseerContext& ctx) {
  return scripted_overseer(ctx.world, ctx.state.pose, ctx.state.coverage, ctx.proposed, ctx.recent_rewards, window_);
}

ReplayOverseer::ReplayOverseer(const Trajectory& traj) {
  for (const auto& r : traj.records) exec_.push_back(r.a_exec);
}

OverseerDecision ReplayOverseer::decide(const OverseerContext& ctx) {
  if (ctx.t < 0 || static_cast<std::size_t>(ctx.t) >= exec_.size())
    throw UsageError("replay overseer: episode is longer than the recorded trajectory");
  const MultiDiscreteAction& want = exec_[static_cast<std::size_t>(ctx.t)];
  if (ctx.proposed == want) return OverseerDecision::accept();
  return OverseerDecision::override_with(want, InterventionReason::kNone);
}

// ---- rollout ----------------------------------------------------------------

EpisodeRunner::EpisodeRunner(const RiverWorld& world, const NetParams& params, int episode_id,
                             const StartSpec& start, std::uint64_t seed, PolicyMode mode)
    : world_(&world), params_(params), rng_(seed), mode_(mode) {
  auto [pose, cov, obs] = world.reset(start, seed);
  state_.pose = pose;
  state_.coverage = std::move(cov);
  state_.seed = seed;
  obs_ = obs;
  z_prev_ = initial_latent(params_);
  traj_.episode_id = episode_id;
  traj_.start = start;
  traj_.seed = seed;
}

void EpisodeRunner::set_params(const NetParams& params) {
  params_ = params;
  z_prev_ = history_.empty() ? initial_latent(params_) : encode_history(params_, history_).back();
  pending_.reset();
}

const Proposal& EpisodeRunner::propose() {
  if (state_.terminated) throw UsageError("propose: episode already terminated");
  if (!pending_) {
    Proposal p;
    p.t = t();
    p.z = encode_step(params_, z_prev_, obs_);
    ActResult r = act(params_, p.z, rng_, mode_);
    p.dist = std::move(r.dist);
    p.action = r.action;
    p.log_prob = r.log_prob;
    pending_ = std::move(p);
  }
  return *pending_;
}

const TransitionRecord& EpisodeRunner::execute(const OverseerDecision& decision) {
  if (!pending_) throw UsageError("execute: no pending proposal");
  if (decision.intervene && !decision.override_action)
    throw UsageError("execute: intervention without an override action");
  TransitionRecord rec;
  rec.episode_id = traj_.episode_id;
  rec.t = t();
  rec.observation = obs_;
  rec.pose = state_.pose;
  rec.latent_fingerprint = latent_fingerprint(pending_->z);
  rec.a_agent = pending_->action;
  rec.m = decision.intervene ? 1 : 0;
  if (decision.intervene) rec.a_human = decision.override_action;
  rec.a_exec = decision.intervene ? *decision.override_action : pending_->action;
  rec.reason = decision.intervene ? decision.reason : InterventionReason::kNone;

  const StepOutcome out = world_->step(state_, rec.a_exec);
  rec.reward = out.reward;
  rec.terminated = out.terminated;
  rec.termination_reason = out.termination_reason;
  rec.excluded_from_training =
      out.termination_reason == TerminationReason::kCorridorViolation && rec.m == 0;

  history_.push_back(obs_);
  z_prev_ = pending_->z;
  obs_ = out.observation;
  rewards_.push_back(out.reward);
  pending_.reset();

  traj_.totals.steps += 1;
  traj_.totals.interventions += rec.m;
  traj_.totals.episodic_reward += rec.reward;
  traj_.records.push_back(std::move(rec));
  return traj_.records.back();
}

Trajectory EpisodeRunner::finish() const { return traj_; }

Trajectory run_episode(const RiverWorld& world, const NetParams& params, Overseer& overseer, int episode_id,
                       const StartSpec& start, std::uint64_t seed, PolicyMode mode) {
  EpisodeRunner runner(world, params, episode_id, start, seed, mode);
  while (!runner.done()) {
    const Proposal& p = runner.propose();
    const OverseerContext ctx{world, runner.state(), p.action, runner.rewards(), runner.t()};
    runner.execute(overseer.decide(ctx));
  }
  return runner.finish();
}

std::vector<PreferencePair> extract_preferences(const ReplayBuffer& buffer) {
  std::vector<PreferencePair> pairs;
  for (const auto& ep : buffer.episodes())
    for (const auto& r : ep.records)
      if (r.m == 1 && !r.excluded_from_training && r.a_human && *r.a_human != r.a_agent)
        pairs.push_back({{r.episode_id, r.t}, *r.a_human, r.a_agent});
  std::stable_sort(pairs.begin(), pairs.end(),
                   [](const PreferencePair& a, const PreferencePair& b) { return a.step_ref < b.step_ref; });
  return pairs;
}

std::vector<TrainingStep> build_training_steps(const NetParams& params, const ReplayBuffer& buffer) {
  std::vector<TrainingStep> out;
  out.reserve(buffer.total_steps());
  for (const auto& ep : buffer.episodes()) {
    std::vector<Observation> obs;
    obs.reserve(ep.records.size());
    for (const auto& r : ep.records) obs.push_back(r.observation);
    const auto latents = encode_history(params, obs);
    for (std::size_t i = 0; i < ep.records.size(); ++i) {
      const auto& r = ep.records[i];
      TrainingStep s;
      s.ref = {r.episode_id, r.t};
      s.z = latents[i];
      s.a_agent = r.a_agent;
      s.a_human = r.a_human;
      s.a_exec = r.a_exec;
      s.intervened = r.m == 1;
      s.excluded = r.excluded_from_training;
      out.push_back(std::move(s));
    }
  }
  return out;
}

// ---- persistence ------------------------------------------------------------

nlohmann::json action_to_json(const MultiDiscreteAction& a) { return {a.idx[0], a.idx[1], a.idx[2], a.idx[3]}; }

MultiDiscreteAction action_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw FormatError("action must be an array of 4 branch indices");
  try {
    return MultiDiscreteAction::make(j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>());
  } catch (const UsageError& e) {
    throw FormatError(e.what());
  }
}

nlohmann::json record_to_json(const TransitionRecord& r) {
  return {{"schema_version", kTrajectorySchemaVersion},
          {"kind", "transition"},
          {"episode_id", r.episode_id},
          {"t", r.t},
          {"mask", mask_to_bits(r.observation.mask)},
          {"prev_action", action_to_json(r.observation.prev_action)},
          {"pose", pose_to_json(r.pose)},
          {"latent_fp", r.latent_fingerprint},
          {"a_agent", action_to_json(r.a_agent)},
          {"a_human", r.a_human ? action_to_json(*r.a_human) : nlohmann::json(nullptr)},
          {"a_exec", action_to_json(r.a_exec)},
          {"m", r.m},
          {"reward", r.reward},
          {"terminated", r.terminated},
          {"termination_reason", to_string(r.termination_reason)},
          {"excluded_from_training", r.excluded_from_training},
          {"reason", to_string(r.reason)}};
}

TransitionRecord record_from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema_version").get<int>() != kTrajectorySchemaVersion)
      throw FormatError("trajectory record: unsupported schema_version");
    if (j.at("kind").get<std::string>() != "transition") throw FormatError("expected a transition record");
    TransitionRecord r;
    r.episode_id = j.at("episode_id").get<int>();
    r.t = j.at("t").get<int>();
    r.observation.mask = mask_from_bits(j.at("mask").get<std::string>());
    r.observation.prev_action = action_from_json(j.at("prev_action"));
    r.pose = pose_from_json(j.at("pose"));
    r.latent_fingerprint = j.at("latent_fp").get<std::string>();
    r.a_agent = action_from_json(j.at("a_agent"));
    if (!j.at("a_human").is_null()) r.a_human = action_from_json(j.at("a_human"));
    r.a_exec = action_from_json(j.at("a_exec"));
    r.m = j.at("m").get<int>();
    r.reward = j.at("reward").get<double>();
    r.terminated = j.at("terminated").get<bool>();
    r.termination_reason = termination_from_string(j.at("termination_reason").get<std::string>());
    r.excluded_from_training = j.at("excluded_from_training").get<bool>();
    r.reason = intervention_reason_from_string(j.at("reason").get<std::string>());
    validate_record(r);
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("trajectory record: ") + e.what());
  }
}

namespace {

nlohmann::json header_json(const Trajectory& t) {
  return {{"schema_version", kTrajectorySchemaVersion},
          {"kind", "trajectory"},
          {"episode_id", t.episode_id},
          {"start", start_to_json(t.start)},
          {"seed", t.seed},
          {"totals",
           {{"steps", t.totals.steps},
            {"interventions", t.totals.interventions},
            {"episodic_reward", t.totals.episodic_reward}}}};
}

}  // namespace

std::string trajectory_to_jsonl(const Trajectory& traj) {
  std::string out = header_json(traj).dump() + "\n";
  for (const auto& r : traj.records) out += record_to_json(r).dump() + "\n";
  return out;
}

void save_trajectory(const Trajectory& traj, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write trajectory " + path);
  out << trajectory_to_jsonl(traj);
}

ReplayBuffer parse_buffer(std::istream& in) {
  ReplayBuffer buf;
  std::optional<Trajectory> cur;
  auto flush = [&] {
    if (!cur) return;
    if (cur->recompute_totals() != cur->totals)
      throw FormatError("trajectory " + std::to_string(cur->episode_id) + ": totals do not match records");
    buf.append(std::move(*cur));
    cur.reset();
  };
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("trajectory log line " + std::to_string(lineno) + ": " + e.what());
    }
    if (j.value("schema_version", -1) != kTrajectorySchemaVersion)
      throw FormatError("trajectory log line " + std::to_string(lineno) + ": schema_version mismatch");
    const std::string kind = j.value("kind", "");
    if (kind == "trajectory") {
      flush();
      try {
        Trajectory t;
        t.episode_id = j.at("episode_id").get<int>();
        t.start = start_from_json(j.at("start"));
        t.seed = j.at("seed").get<std::uint64_t>();
        const auto& tot = j.at("totals");
        t.totals = {tot.at("steps").get<int>(), tot.at("interventions").get<int>(),
                    tot.at("episodic_reward").get<double>()};
        cur = std::move(t);
      } catch (const nlohmann::json::exception& e) {
        throw FormatError("trajectory header: " + std::string(e.what()));
      }
    } else if (kind == "transition") {
      if (!cur) throw FormatError("transition record before any trajectory header");
      TransitionRecord r = record_from_json(j);
      if (r.episode_id != cur->episode_id || r.t != static_cast<int>(cur->records.size()))
        throw FormatError("transition record out of order at line " + std::to_string(lineno));
      cur->records.push_back(std::move(r));
    } else {
      throw FormatError("unknown record kind at line " + std::to_string(lineno));
    }
  }
  flush();
  return buf;
}

Trajectory load_trajectory(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open trajectory " + path);
  ReplayBuffer b = parse_buffer(in);
  if (b.size() != 1) throw FormatError("trajectory file must hold exactly one trajectory: " + path);
  return b.episodes().front();
}

void save_buffer(const ReplayBuffer& buffer, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write buffer " + path);
  for (const auto& t : buffer.episodes()) out << trajectory_to_jsonl(t);
}

ReplayBuffer load_buffer(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open buffer " + path);
  return parse_buffer(in);
}

}  // namespace riverpref
