// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "riverpref/losses.hpp"
#include "riverpref/net.hpp"
#include "riverpref/world.hpp"

namespace riverpref {

inline constexpr int kTrajectorySchemaVersion = 1;
inline constexpr int kDefaultStallWindow = 6;

enum class InterventionReason { kNone, kSafety, kInefficiency };
std::string to_string(InterventionReason r);
InterventionReason intervention_reason_from_string(const std::string& s);

struct OverseerDecision {
  bool intervene = false;
  std::optional<MultiDiscreteAction> override_action;
  InterventionReason reason = InterventionReason::kNone;

  static OverseerDecision accept() { return {}; }
  static OverseerDecision override_with(const MultiDiscreteAction& a, InterventionReason r) { return {true, a, r}; }
};

struct TransitionRecord {
  int episode_id = 0;
  int t = 0;
  Observation observation;  // o_t, consumed to produce z_t
  Pose pose;                // pose at which the action was proposed
  std::string latent_fingerprint;
  MultiDiscreteAction a_agent;
  std::optional<MultiDiscreteAction> a_human;
  MultiDiscreteAction a_exec;
  int m = 0;
  double reward = 0.0;
  bool terminated = false;
  TerminationReason termination_reason = TerminationReason::kNone;
  bool excluded_from_training = false;
  InterventionReason reason = InterventionReason::kNone;

  friend bool operator==(const TransitionRecord&, const TransitionRecord&) = default;
};

/// Checks the executed-action rule and the exclusion rule on one record.
void validate_record(const TransitionRecord& r);

struct TrajectoryTotals {
  int steps = 0;
  int interventions = 0;
  double episodic_reward = 0.0;
  friend bool operator==(const TrajectoryTotals&, const TrajectoryTotals&) = default;
};

struct Trajectory {
  int episode_id = 0;
  StartSpec start;
  std::uint64_t seed = 0;
  std::vector<TransitionRecord> records;
  TrajectoryTotals totals;

  TrajectoryTotals recompute_totals() const;
  double intervention_rate() const {
    return totals.steps == 0 ? 0.0 : static_cast<double>(totals.interventions) / totals.steps;
  }
  friend bool operator==(const Trajectory& a, const Trajectory& b) {
    return a.episode_id == b.episode_id && a.start == b.start && a.seed == b.seed && a.records == b.records &&
           a.totals == b.totals;
  }
};

/// Cumulative, append-only episode buffer.
class ReplayBuffer {
 public:
  void append(Trajectory traj);
  const std::vector<Trajectory>& episodes() const { return episodes_; }
  std::size_t size() const { return episodes_.size(); }
  bool empty() const { return episodes_.empty(); }
  std::size_t total_steps() const;
  /// First n episodes (the buffer as it stood after episode n-1).
  ReplayBuffer prefix(std::size_t n) const;

 private:
  std::vector<Trajectory> episodes_;
};

/// Everything an overseer may look at when judging a proposal. It has
/// privileged access to the world state.
struct OverseerContext {
  const RiverWorld& world;
  const EpisodeState& state;
  const MultiDiscreteAction& proposed;
  std::span<const double> recent_rewards;  // this episode so far, oldest first
  int t = 0;
};

class Overseer {
 public:
  virtual ~Overseer() = default;
  virtual OverseerDecision decide(const OverseerContext& ctx) = 0;
};

/// Greedy one-step coverage maximizer among corridor-safe actions. Ties are
/// broken by a progress score (distance to the next unvisited segment
/// downstream, or upstream once the rest is covered; centering; altitude;
/// heading), then by smallest yaw change, then by the lowest joint index.
MultiDiscreteAction oracle_action(const RiverWorld& world, const Pose& pose, const CoverageState& cov);

/// True when the action leaves the corridor only by flying past the
/// downstream end of the river, inside the lateral and altitude bounds.
bool finishes_river(const RiverWorld& world, const Pose& pose, const MultiDiscreteAction& action);

/// Conservative rule: override unsafe proposals, and override after `window`
/// consecutive zero-gain steps; otherwise accept. Flying out past the
/// downstream end counts as finishing the river, not as unsafe.
OverseerDecision scripted_overseer(const RiverWorld& world, const Pose& pose, const CoverageState& cov,
                                   const MultiDiscreteAction& proposed, std::span<const double> recent_rewards,
                                   int window = kDefaultStallWindow);

class ScriptedOverseer : public Overseer {
 public:
  explicit ScriptedOverseer(int window = kDefaultStallWindow) : window_(window) {}
  OverseerDecision decide(const OverseerContext& ctx) override;

 private:
  int window_;
};

class NeverIntervene : public Overseer {
 public:
  OverseerDecision decide(const OverseerContext&) override { return OverseerDecision::accept(); }
};

/// Forces a recorded sequence of executed actions: overrides whenever the
/// proposal differs from the recorded a_exec at that time index.
class ReplayOverseer : public Overseer {
 public:
  explicit ReplayOverseer(const Trajectory& traj);
  OverseerDecision decide(const OverseerContext& ctx) override;

 private:
  std::vector<MultiDiscreteAction> exec_;
};

struct Proposal {
  int t = 0;
  LatentState z;
  ActionDistribution dist;
  MultiDiscreteAction action;
  double log_prob = 0.0;
};

/// Step-wise rollout: encode -> propose -> (decision) -> execute -> record.
/// Used synchronously by run_episode and asynchronously by the session server.
class EpisodeRunner {
 public:
  EpisodeRunner(const RiverWorld& world, const NetParams& params, int episode_id, const StartSpec& start,
                std::uint64_t seed, PolicyMode mode);

  bool done() const { return state_.terminated; }
  const EpisodeState& state() const { return state_; }
  const Observation& observation() const { return obs_; }
  const std::vector<TransitionRecord>& records() const { return traj_.records; }
  int t() const { return static_cast<int>(traj_.records.size()); }
  const NetParams& params() const { return params_; }
  std::span<const double> rewards() const { return rewards_; }

  /// Swaps the policy used for subsequent proposals (online retraining).
  /// The latent is recomputed from the executed history under the new params.
  void set_params(const NetParams& params);

  /// Current proposal; computed once per time step.
  const Proposal& propose();
  /// Executes a decision for the current proposal; returns the new record.
  const TransitionRecord& execute(const OverseerDecision& decision);
  Trajectory finish() const;

 private:
  const RiverWorld* world_;
  NetParams params_;
  EpisodeState state_;
  Observation obs_;
  LatentState z_prev_;
  std::vector<Observation> history_;
  std::vector<double> rewards_;
  Trajectory traj_;
  Rng rng_;
  PolicyMode mode_;
  std::optional<Proposal> pending_;
};

Trajectory run_episode(const RiverWorld& world, const NetParams& params, Overseer& overseer, int episode_id,
                       const StartSpec& start, std::uint64_t seed, PolicyMode mode);

/// One pair per intervened record with a_human != a_agent, excluding records
/// flagged excluded_from_training; ordered by (episode, t).
std::vector<PreferencePair> extract_preferences(const ReplayBuffer& buffer);

/// Latents recomputed from the executed history of each episode.
std::vector<TrainingStep> build_training_steps(const NetParams& params, const ReplayBuffer& buffer);

nlohmann::json record_to_json(const TransitionRecord& r);
TransitionRecord record_from_json(const nlohmann::json& j);
nlohmann::json action_to_json(const MultiDiscreteAction& a);
MultiDiscreteAction action_from_json(const nlohmann::json& j);

/// JSON Lines: a trajectory header line followed by one line per record.
std::string trajectory_to_jsonl(const Trajectory& traj);
void save_trajectory(const Trajectory& traj, const std::string& path);
Trajectory load_trajectory(const std::string& path);
void save_buffer(const ReplayBuffer& buffer, const std::string& path);
ReplayBuffer load_buffer(const std::string& path);
ReplayBuffer parse_buffer(std::istream& in);

}  // namespace riverpref
