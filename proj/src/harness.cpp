// SPDX-License-Identifier: Apache-2.0
#include "riverpref/harness.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

namespace riverpref {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

double greedy_coverage(const RiverWorld& world, const NetParams& params, const StartSpec& start, std::uint64_t seed) {
  EpisodeRunner runner(world, params, 0, start, seed, PolicyMode::kGreedy);
  while (!runner.done()) {
    runner.propose();
    runner.execute(OverseerDecision::accept());
  }
  return static_cast<double>(runner.state().coverage.count()) / static_cast<double>(world.num_segments());
}

PretrainResult pretrain_novice(const RiverWorld& world, std::uint64_t seed, const PretrainConfig& cfg) {
  if (cfg.steps < 1 || cfg.max_rounds < 1 || cfg.updates_per_round < 1)
    throw ConfigError("pretrain: steps, rounds and updates must be positive");
  if (!(cfg.epsilon >= 0.0 && cfg.epsilon <= 1.0)) throw ConfigError("pretrain: epsilon must be in [0, 1]");

  NetParams params = NetParams::init(mix_seed(seed, 0), cfg.hidden_dim);
  Rng rng(mix_seed(seed, 1));

  std::vector<LatentState> z_bc;
  std::vector<MultiDiscreteAction> labels;
  std::vector<LatentState> z_rw;
  std::vector<MultiDiscreteAction> rw_actions;
  std::vector<double> rw_targets;

  int episode = 0;
  while (static_cast<int>(labels.size()) < cfg.steps) {
    const StartSpec start = sample_start(world, rng);
    EpisodeState ep = world.reset_episode(start, mix_seed(seed, 100 + static_cast<std::uint64_t>(episode++)));
    Observation obs = std::get<2>(world.reset(start, ep.seed));
    LatentState z = initial_latent(params);
    while (!ep.terminated && static_cast<int>(labels.size()) < cfg.steps) {
      z = encode_step(params, z, obs);
      const MultiDiscreteAction label = oracle_action(world, ep.pose, ep.coverage);
      const double label_gain = std::get<2>(world.step(ep.pose, ep.coverage, label)).reward;
      MultiDiscreteAction exec = label;
      if (uniform01(rng) < cfg.epsilon)
        exec = MultiDiscreteAction::from_joint(static_cast<int>(uniform_index(rng, kNumJointActions)));
      const StepOutcome out = world.step(ep, exec);
      z_bc.push_back(z);
      labels.push_back(exec);
      z_rw.push_back(z);
      rw_actions.push_back(label);
      rw_targets.push_back(label_gain);
      if (exec != label) {
        z_rw.push_back(z);
        rw_actions.push_back(exec);
        rw_targets.push_back(out.reward);
      }
      obs = out.observation;
    }
  }

  OptimizerState opt = OptimizerState::adam();
  const double bc_scale = 1.0 / static_cast<double>(labels.size());
  const double rw_scale = 1.0 / static_cast<double>(rw_targets.size());
  PretrainResult result;
  for (int round = 1; round <= cfg.max_rounds; ++round) {
    for (int u = 0; u < cfg.updates_per_round; ++u) {
      const LossValue bc = behavior_cloning_loss(params, z_bc, labels);
      const LossValue rw = reward_regression_loss(params, z_rw, rw_actions, rw_targets);
      HeadGrads g;
      g.add(bc.grad, bc_scale);
      g.add(rw.grad, rw_scale);
      apply_gradients(params, g, opt, cfg.lr, bc.value * bc_scale + rw.value * rw_scale);
    }
    const double cov = greedy_coverage(world, params, StartSpec{}, mix_seed(seed, 2));
    if (cov >= cfg.coverage_bar) {
      result.coverage_fraction = cov;
      result.rounds = round;
      result.checkpoint.params = params;
      result.checkpoint.meta.checkpoint_id = "novice";
      result.checkpoint.meta.method = "novice";
      result.checkpoint.meta.creation_seed = seed;
      result.checkpoint.meta.hyperparameters = {{"epsilon", cfg.epsilon},
                                                {"steps", cfg.steps},
                                                {"coverage_bar", cfg.coverage_bar},
                                                {"updates_per_round", cfg.updates_per_round},
                                                {"rounds", round},
                                                {"lr", cfg.lr}};
      return result;
    }
  }
  throw ConfigError("pretrain: novice did not reach " + fmt(cfg.coverage_bar) +
                    " coverage; increase the number of BC steps or rounds");
}

void ExperimentConfig::validate() const {
  if (methods.empty()) throw ConfigError("experiment: methods list is empty");
  if (num_episodes < 1) throw ConfigError("experiment: num_episodes must be >= 1");
  if (static_cast<int>(starts.size()) != num_episodes)
    throw ConfigError("experiment: need one start spec per episode");
  if (eval_seeds.size() != starts.size()) throw ConfigError("experiment: need one eval seed per start");
  if (online_retrain_interval && *online_retrain_interval < 1)
    throw ConfigError("experiment: online_retrain_interval must be >= 1");
  hp.validate();
}

ExperimentConfig make_experiment(const RiverWorld& world, std::uint64_t seed, int num_episodes) {
  ExperimentConfig cfg;
  cfg.seed = seed;
  cfg.num_episodes = num_episodes;
  Rng rng(mix_seed(seed, 7));
  for (int i = 0; i < num_episodes; ++i) {
    cfg.starts.push_back(sample_start(world, rng));
    cfg.eval_seeds.push_back(mix_seed(seed, 1000 + static_cast<std::uint64_t>(i)));
  }
  return cfg;
}

namespace {

std::string mode_name(PolicyMode m) { return m == PolicyMode::kGreedy ? "greedy" : "sampled"; }

PolicyMode mode_from_name(const std::string& s) {
  if (s == "greedy") return PolicyMode::kGreedy;
  if (s == "sampled") return PolicyMode::kSampled;
  throw ConfigError("unknown policy mode: " + s);
}

}  // namespace

nlohmann::json experiment_to_json(const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["world_file"] = cfg.world_file;
  j["methods"] = nlohmann::json::array();
  for (Method m : cfg.methods) j["methods"].push_back(to_string(m));
  j["hyperparameters"] = hyperparams_to_json(cfg.hp);
  j["num_episodes"] = cfg.num_episodes;
  j["starts"] = nlohmann::json::array();
  for (const auto& s : cfg.starts) j["starts"].push_back(start_to_json(s));
  j["eval_seeds"] = cfg.eval_seeds;
  j["eval_mode"] = mode_name(cfg.eval_mode);
  j["rollout_mode"] = mode_name(cfg.rollout_mode);
  j["shared_rollouts"] = cfg.shared_rollouts;
  j["online_retrain_interval"] = cfg.online_retrain_interval ? nlohmann::json(*cfg.online_retrain_interval) : nlohmann::json(nullptr);
  j["stall_window"] = cfg.stall_window;
  j["seed"] = cfg.seed;
  j["out_dir"] = cfg.out_dir;
  return j;
}

ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  try {
    if (j.value("format_version", 1) != 1) throw ConfigError("experiment: unsupported format_version");
    ExperimentConfig cfg;
    cfg.world_file = j.value("world_file", std::string{});
    if (j.contains("methods")) {
      cfg.methods.clear();
      for (const auto& m : j.at("methods")) cfg.methods.push_back(method_from_string(m.get<std::string>()));
    }
    if (j.contains("hyperparameters")) cfg.hp = hyperparams_from_json(j.at("hyperparameters"));
    cfg.num_episodes = j.value("num_episodes", cfg.num_episodes);
    for (const auto& s : j.at("starts")) cfg.starts.push_back(start_from_json(s));
    cfg.eval_seeds = j.at("eval_seeds").get<std::vector<std::uint64_t>>();
    cfg.eval_mode = mode_from_name(j.value("eval_mode", std::string("greedy")));
    cfg.rollout_mode = mode_from_name(j.value("rollout_mode", std::string("greedy")));
    cfg.shared_rollouts = j.value("shared_rollouts", true);
    if (j.contains("online_retrain_interval") && !j.at("online_retrain_interval").is_null())
      cfg.online_retrain_interval = j.at("online_retrain_interval").get<int>();
    cfg.stall_window = j.value("stall_window", kDefaultStallWindow);
    cfg.seed = j.value("seed", std::uint64_t{0});
    cfg.out_dir = j.value("out_dir", std::string{});
    cfg.validate();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
}

std::uint64_t rollout_seed(const ExperimentConfig& cfg, int episode) {
  return mix_seed(cfg.seed, 500 + static_cast<std::uint64_t>(episode));
}

ReplayBuffer collect_shared_buffer(const RiverWorld& world, const NetParams& novice, const ExperimentConfig& cfg) {
  cfg.validate();
  ReplayBuffer buffer;
  ScriptedOverseer overseer(cfg.stall_window);
  for (int ep = 0; ep < cfg.num_episodes; ++ep)
    buffer.append(run_episode(world, novice, overseer, ep, cfg.starts[static_cast<std::size_t>(ep)],
                              rollout_seed(cfg, ep), cfg.rollout_mode));
  return buffer;
}

std::vector<double> evaluate(const RiverWorld& world, const NetParams& params, const std::vector<StartSpec>& starts,
                             const std::vector<std::uint64_t>& seeds, PolicyMode mode) {
  if (seeds.size() != starts.size()) throw UsageError("evaluate: need one seed per start");
  std::vector<double> rewards;
  NeverIntervene none;
  for (std::size_t i = 0; i < starts.size(); ++i)
    rewards.push_back(run_episode(world, params, none, static_cast<int>(i), starts[i], seeds[i], mode)
                          .totals.episodic_reward);
  return rewards;
}

namespace {

/// One HITL episode with the latest params, retraining every `interval`
/// steps on the buffer plus the partial episode when the window holds at
/// least one intervention.
Trajectory online_episode(const RiverWorld& world, const ExperimentConfig& cfg, Method method, NetParams& params,
                          const ReplayBuffer& buffer, int ep, std::vector<LossReport>& losses) {
  ScriptedOverseer overseer(cfg.stall_window);
  EpisodeRunner runner(world, params, ep, cfg.starts[static_cast<std::size_t>(ep)], rollout_seed(cfg, ep),
                       cfg.rollout_mode);
  int window_interventions = 0;
  while (!runner.done()) {
    const Proposal& p = runner.propose();
    const OverseerContext ctx{world, runner.state(), p.action, runner.rewards(), runner.t()};
    window_interventions += runner.execute(overseer.decide(ctx)).m;
    if (cfg.online_retrain_interval && !runner.done() && runner.t() % *cfg.online_retrain_interval == 0) {
      if (window_interventions > 0) {
        ReplayBuffer partial = buffer;
        partial.append(runner.finish());
        RetrainResult r = retrain(method, partial, params, cfg.hp);
        params = r.params;
        losses.insert(losses.end(), r.reports.begin(), r.reports.end());
        runner.set_params(params);
      }
      window_interventions = 0;
    }
  }
  return runner.finish();
}

}  // namespace

ProtocolRun run_protocol(const RiverWorld& world, const ExperimentConfig& cfg, Method method, const NetParams& novice,
                         const ReplayBuffer* shared) {
  cfg.validate();
  if (cfg.shared_rollouts && !shared) throw ConfigError("run_protocol: shared_rollouts set but no shared buffer");
  if (shared && static_cast<int>(shared->size()) < cfg.num_episodes)
    throw ConfigError("run_protocol: shared buffer holds fewer episodes than num_episodes");

  ProtocolRun run;
  run.method = method;
  NetParams params = novice;
  for (int ep = 0; ep < cfg.num_episodes; ++ep) {
    std::vector<LossReport> losses;
    if (cfg.shared_rollouts) {
      run.buffer.append(shared->episodes()[static_cast<std::size_t>(ep)]);
    } else {
      run.buffer.append(online_episode(world, cfg, method, params, run.buffer, ep, losses));
    }
    RetrainResult r = retrain(method, run.buffer, params, cfg.hp);
    params = r.params;
    losses.insert(losses.end(), r.reports.begin(), r.reports.end());
    run.losses.push_back(std::move(losses));

    Checkpoint ck;
    ck.params = params;
    ck.meta.checkpoint_id = "Cp" + std::to_string(ep);
    ck.meta.episode_index = ep;
    ck.meta.method = to_string(method);
    ck.meta.hyperparameters = hyperparams_to_json(cfg.hp);
    ck.meta.creation_seed = cfg.seed;
    run.checkpoints.push_back(ck);

    const auto i = static_cast<std::size_t>(ep);
    run.checkpoint_rewards.push_back(evaluate(world, params, {cfg.starts[i]}, {cfg.eval_seeds[i]}, cfg.eval_mode)[0]);
  }
  run.final_rewards = evaluate(world, params, cfg.starts, cfg.eval_seeds, cfg.eval_mode);
  return run;
}

MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd r;
  if (xs.empty()) return r;
  const double n = static_cast<double>(xs.size());
  r.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : xs) ss += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(ss / n);
  return r;
}

std::vector<InterventionRow> intervention_table(const std::vector<InterventionRow>& episodes) {
  std::vector<InterventionRow> rows;
  InterventionRow overall{"Overall", 0, 0, 0.0};
  for (InterventionRow r : episodes) {
    r.rate = r.steps == 0 ? 0.0 : static_cast<double>(r.interventions) / r.steps;
    overall.steps += r.steps;
    overall.interventions += r.interventions;
    rows.push_back(r);
  }
  overall.rate = overall.steps == 0 ? 0.0 : static_cast<double>(overall.interventions) / overall.steps;
  rows.push_back(overall);
  return rows;
}

std::vector<InterventionRow> intervention_table(const ReplayBuffer& buffer) {
  std::vector<InterventionRow> eps;
  for (const auto& traj : buffer.episodes()) {
    const TrajectoryTotals t = traj.recompute_totals();
    eps.push_back({std::to_string(traj.episode_id), t.steps, t.interventions, 0.0});
  }
  return intervention_table(eps);
}

std::vector<RewardDumpRow> reward_dump(const NetParams& params, const Trajectory& traj) {
  std::vector<Observation> obs;
  obs.reserve(traj.records.size());
  for (const auto& r : traj.records) obs.push_back(r.observation);
  const std::vector<LatentState> zs = encode_history(params, obs);
  std::vector<RewardDumpRow> rows;
  for (std::size_t i = 0; i < traj.records.size(); ++i) {
    const auto& r = traj.records[i];
    rows.push_back({r.episode_id, r.t, r.m, reward_estimate(params, zs[i], r.a_agent),
                    reward_estimate(params, zs[i], r.a_exec)});
  }
  return rows;
}

std::string interventions_csv(const std::vector<InterventionRow>& rows) {
  std::string s = "episode,steps,interventions,intervention_rate\n";
  for (const auto& r : rows)
    s += r.episode + "," + std::to_string(r.steps) + "," + std::to_string(r.interventions) + "," + fmt(r.rate) + "\n";
  return s;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["format_version"] = 1;
  j["interventions"] = nlohmann::json::array();
  for (const auto& r : interventions)
    j["interventions"].push_back(
        {{"episode", r.episode}, {"steps", r.steps}, {"interventions", r.interventions}, {"rate", r.rate}});
  const MeanStd base = mean_std(baseline_rewards);
  j["baseline"] = {{"rewards", baseline_rewards}, {"mean", base.mean}, {"std", base.std}};
  j["methods"] = nlohmann::json::array();
  for (const auto& run : runs) {
    const MeanStd ms = mean_std(run.final_rewards);
    nlohmann::json m;
    m["method"] = to_string(run.method);
    m["checkpoint_rewards"] = run.checkpoint_rewards;
    m["final_rewards"] = run.final_rewards;
    m["final_mean"] = ms.mean;
    m["final_std"] = ms.std;
    m["pairs"] = extract_preferences(run.buffer).size();
    j["methods"].push_back(m);
  }
  return j;
}

void write_report(const EvalReport& report, const std::string& dir) {
  fs::create_directories(dir);
  write_file((fs::path(dir) / "report.json").string(), report.to_json().dump(2) + "\n");
  write_file((fs::path(dir) / "interventions.csv").string(), interventions_csv(report.interventions));

  std::string cp = "method,checkpoint,reward\n";
  std::string fin = "method,mean,std\n";
  std::string dump = "method,checkpoint,episode,t,m,r_agent,r_exec\n";
  const MeanStd base = mean_std(report.baseline_rewards);
  for (std::size_t k = 0; k < report.baseline_rewards.size(); ++k)
    cp += "Baseline,Cp" + std::to_string(k) + "," + fmt(report.baseline_rewards[k]) + "\n";
  fin += "Baseline," + fmt(base.mean) + "," + fmt(base.std) + "\n";
  for (const auto& run : report.runs) {
    const std::string name = to_string(run.method);
    for (std::size_t k = 0; k < run.checkpoint_rewards.size(); ++k)
      cp += name + ",Cp" + std::to_string(k) + "," + fmt(run.checkpoint_rewards[k]) + "\n";
    const MeanStd ms = mean_std(run.final_rewards);
    fin += name + "," + fmt(ms.mean) + "," + fmt(ms.std) + "\n";
    if (!run.checkpoints.empty() && !run.buffer.empty()) {
      const Checkpoint& last = run.checkpoints.back();
      for (const auto& row : reward_dump(last.params, run.buffer.episodes().front()))
        dump += name + "," + last.meta.checkpoint_id + "," + std::to_string(row.episode_id) + "," +
                std::to_string(row.t) + "," + std::to_string(row.m) + "," + fmt(row.r_agent) + "," +
                fmt(row.r_exec) + "\n";
    }
  }
  write_file((fs::path(dir) / "checkpoint_rewards.csv").string(), cp);
  write_file((fs::path(dir) / "final_rewards.csv").string(), fin);
  write_file((fs::path(dir) / "reward_dump.csv").string(), dump);
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ConfigError("write failed: " + path);
}

void write_manifest(const std::string& dir, const nlohmann::json& extra) {
  std::vector<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) {
      const std::string rel = fs::relative(e.path(), dir).generic_string();
      if (rel != "manifest.json") files.push_back(rel);
    }
  std::sort(files.begin(), files.end());
  nlohmann::json j;
  j["format_version"] = 1;
  j["files"] = nlohmann::json::array();
  for (const auto& f : files) {
    const std::string bytes = read_file((fs::path(dir) / f).string());
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(fnv1a(bytes)));
    j["files"].push_back({{"path", f}, {"bytes", bytes.size()}, {"fnv1a", hex}});
  }
  if (!extra.is_null()) j["info"] = extra;
  write_file((fs::path(dir) / "manifest.json").string(), j.dump(2) + "\n");
}

ProtocolOutput run_experiment(const RiverWorld& world, const ExperimentConfig& cfg, const PretrainConfig& pretrain) {
  cfg.validate();
  ProtocolOutput out;
  out.novice = pretrain_novice(world, mix_seed(cfg.seed, 0x6e6f76), pretrain);
  const NetParams& novice = out.novice.checkpoint.params;
  if (cfg.shared_rollouts) out.shared = collect_shared_buffer(world, novice, cfg);

  out.report.baseline_rewards = evaluate(world, novice, cfg.starts, cfg.eval_seeds, cfg.eval_mode);
  for (Method m : cfg.methods)
    out.report.runs.push_back(run_protocol(world, cfg, m, novice, cfg.shared_rollouts ? &out.shared : nullptr));
  out.report.interventions =
      intervention_table(cfg.shared_rollouts ? out.shared : out.report.runs.front().buffer);

  if (!cfg.out_dir.empty()) {
    const fs::path dir(cfg.out_dir);
    fs::create_directories(dir);
    nlohmann::json config = experiment_to_json(cfg);
    config.erase("out_dir");
    write_file((dir / "config.json").string(), config.dump(2) + "\n");
    write_file((dir / "world.json").string(), world_to_json(world.config()).dump(2) + "\n");
    save_checkpoint(out.novice.checkpoint, (dir / "novice.ckpt").string());
    if (cfg.shared_rollouts) save_buffer(out.shared, (dir / "shared_buffer.jsonl").string());
    for (const auto& run : out.report.runs) {
      const fs::path mdir = dir / to_string(run.method);
      fs::create_directories(mdir);
      for (const auto& ck : run.checkpoints) save_checkpoint(ck, (mdir / (ck.meta.checkpoint_id + ".ckpt")).string());
      if (!cfg.shared_rollouts) save_buffer(run.buffer, (mdir / "buffer.jsonl").string());
      std::string losses;
      for (std::size_t k = 0; k < run.losses.size(); ++k)
        for (const auto& rep : run.losses[k]) {
          nlohmann::json j = loss_report_to_json(rep);
          j["checkpoint"] = "Cp" + std::to_string(k);
          losses += j.dump() + "\n";
        }
      write_file((mdir / "losses.jsonl").string(), losses);
    }
    write_report(out.report, cfg.out_dir);
    write_manifest(cfg.out_dir, {{"seed", cfg.seed}, {"novice_coverage", out.novice.coverage_fraction}});
  }
  return out;
}

}  // namespace riverpref
