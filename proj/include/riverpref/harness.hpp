// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "riverpref/checkpoint.hpp"
#include "riverpref/hitl.hpp"
#include "riverpref/retrain.hpp"
#include "riverpref/world.hpp"

namespace riverpref {

struct PretrainConfig {
  double epsilon = 0.3;       // probability of executing a uniform random joint action
  int steps = 2000;           // labeled steps collected
  double coverage_bar = 0.3;  // fraction of segments covered greedily from the default start
  int updates_per_round = 25;
  int max_rounds = 80;
  double lr = 3e-3;
  int hidden_dim = kDefaultHiddenDim;
};

struct PretrainResult {
  Checkpoint checkpoint;
  double coverage_fraction = 0.0;
  int rounds = 0;
};

/// Novice construction: behavior cloning of an epsilon-corrupted oracle (the
/// executed actions), run in rounds until the greedy policy clears the
/// coverage bar from the default start. The reward head is fit to the true
/// one-step gains on the same states.
PretrainResult pretrain_novice(const RiverWorld& world, std::uint64_t seed, const PretrainConfig& cfg = {});

/// Fraction of segments covered by a greedy, overseer-free rollout.
double greedy_coverage(const RiverWorld& world, const NetParams& params, const StartSpec& start, std::uint64_t seed);

struct ExperimentConfig {
  std::string world_file;  // empty: built-in default river
  std::vector<Method> methods{std::begin(kAllMethods), std::end(kAllMethods)};
  HyperParams hp;
  int num_episodes = 5;
  std::vector<StartSpec> starts;
  std::vector<std::uint64_t> eval_seeds;
  PolicyMode eval_mode = PolicyMode::kGreedy;
  PolicyMode rollout_mode = PolicyMode::kGreedy;
  bool shared_rollouts = true;
  std::optional<int> online_retrain_interval;
  int stall_window = kDefaultStallWindow;
  std::uint64_t seed = 0;
  std::string out_dir;

  void validate() const;
};

/// Seeded defaults: `num_episodes` sampled starts and per-start eval seeds.
ExperimentConfig make_experiment(const RiverWorld& world, std::uint64_t seed, int num_episodes = 5);

nlohmann::json experiment_to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_from_json(const nlohmann::json& j);

std::uint64_t rollout_seed(const ExperimentConfig& cfg, int episode);

/// The shared data source: one HITL episode per start, novice policy,
/// scripted overseer.
ReplayBuffer collect_shared_buffer(const RiverWorld& world, const NetParams& novice, const ExperimentConfig& cfg);

/// Episodic rewards of overseer-free rollouts, one per start.
std::vector<double> evaluate(const RiverWorld& world, const NetParams& params, const std::vector<StartSpec>& starts,
                             const std::vector<std::uint64_t>& seeds, PolicyMode mode);

struct ProtocolRun {
  Method method = Method::kSparH;
  std::vector<Checkpoint> checkpoints;         // Cp0 .. Cp{N-1}
  ReplayBuffer buffer;                         // cumulative buffer after the last episode
  std::vector<double> checkpoint_rewards;      // Cp{k} evaluated on start k
  std::vector<double> final_rewards;           // last checkpoint on every start
  std::vector<std::vector<LossReport>> losses; // per checkpoint, per epoch
};

/// Sequential per-episode retraining with checkpointing. With shared
/// rollouts the episodes come from `shared`; otherwise each episode is
/// rolled out with the latest parameters.
ProtocolRun run_protocol(const RiverWorld& world, const ExperimentConfig& cfg, Method method, const NetParams& novice,
                         const ReplayBuffer* shared);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population
};
MeanStd mean_std(const std::vector<double>& xs);

struct InterventionRow {
  std::string episode;  // episode index, or "Overall"
  int steps = 0;
  int interventions = 0;
  double rate = 0.0;
};

/// Per-episode rows plus an Overall row holding the column sums and the
/// step-weighted rate.
std::vector<InterventionRow> intervention_table(const std::vector<InterventionRow>& episodes);
std::vector<InterventionRow> intervention_table(const ReplayBuffer& buffer);

struct RewardDumpRow {
  int episode_id = 0;
  int t = 0;
  int m = 0;
  double r_agent = 0.0;  // R(s_t, a_agent)
  double r_exec = 0.0;   // R(s_t, a_exec)
};

/// Reward estimates along a logged episode, states from the executed history.
std::vector<RewardDumpRow> reward_dump(const NetParams& params, const Trajectory& traj);

struct EvalReport {
  std::vector<InterventionRow> interventions;
  std::vector<double> baseline_rewards;  // novice on every start
  std::vector<ProtocolRun> runs;
  nlohmann::json to_json() const;
};

/// Writes report.json and the plot-ready CSV tables into `dir`.
void write_report(const EvalReport& report, const std::string& dir);

std::string interventions_csv(const std::vector<InterventionRow>& rows);

/// manifest.json listing every file under `dir` with its size and FNV-1a hash.
void write_manifest(const std::string& dir, const nlohmann::json& extra = {});

std::uint64_t fnv1a(const std::string& bytes);
std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

struct ProtocolOutput {
  PretrainResult novice;
  ReplayBuffer shared;
  EvalReport report;
};

/// Full desk-scale protocol for one experiment seed: novice, shared rollouts,
/// every configured method, evaluation, and (if out_dir is set) files on disk.
ProtocolOutput run_experiment(const RiverWorld& world, const ExperimentConfig& cfg,
                              const PretrainConfig& pretrain = {});

}  // namespace riverpref
