// SPDX-License-Identifier: Apache-2.0
// Command-line front end: pretrain, rollout, retrain, evaluate, report,
// serve and protocol. Every command writes into a run directory with a
// manifest.json.
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "riverpref/harness.hpp"
#include "riverpref/server.hpp"
#include "riverpref/session.hpp"

using namespace riverpref;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string world_file;
  std::uint64_t seed = 0;
  std::string out_dir;
};

WorldConfig load_or_default(const std::string& path) {
  return path.empty() ? WorldConfig::default_river() : load_world(path);
}

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--world", c.world_file, "world JSON (default: built-in river)");
  cmd->add_option("--seed", c.seed, "seed");
  cmd->add_option("--out", c.out_dir, "run directory")->required();
}

void add_hp(CLI::App* cmd, HyperParams& hp) {
  cmd->add_option("--alpha", hp.alpha);
  cmd->add_option("--beta", hp.beta);
  cmd->add_option("--gamma", hp.gamma);
  cmd->add_option("--eta", hp.eta);
  cmd->add_option("--lambda", hp.lambda);
  cmd->add_option("--epochs", hp.epochs);
  cmd->add_option("--K", hp.K);
  cmd->add_option("--zeta", hp.zeta);
  cmd->add_option("--lr", hp.lr);
  cmd->add_option("--reward-lr", hp.reward_lr);
  cmd->add_option("--updates-per-epoch", hp.updates_per_epoch);
  cmd->add_option("--coach-lr", hp.coach_lr);
}

void start_run(const Common& c, const WorldConfig& wc) {
  fs::create_directories(c.out_dir);
  save_world(wc, (fs::path(c.out_dir) / "world.json").string());
}

void finish_run(const Common& c, const std::string& command, nlohmann::json info = nlohmann::json::object()) {
  info["command"] = command;
  info["seed"] = c.seed;
  write_manifest(c.out_dir, info);
  std::cout << "wrote " << c.out_dir << "\n";
}

std::string path_in(const Common& c, const std::string& name) { return (fs::path(c.out_dir) / name).string(); }

std::string rewards_csv(const std::vector<double>& rewards) {
  std::ostringstream os;
  os << "start,reward\n";
  char buf[32];
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.10g", rewards[i]);
    os << i << ',' << buf << '\n';
  }
  return os.str();
}

int run_serve(const Common& c, const WorldConfig& wc, const std::string& checkpoint, const std::string& method,
              int episodes, const HyperParams& hp, unsigned short port, const std::string& address,
              std::optional<double> timeout, const std::string& policy, std::optional<int> interval) {
  start_run(c, wc);
  const RiverWorld world(wc);
  const Checkpoint ck = load_checkpoint(checkpoint);
  SessionConfig sc;
  sc.method = method_from_string(method);
  sc.hp = hp;
  sc.seed = c.seed;
  sc.starts = make_experiment(world, c.seed, episodes).starts;
  sc.decision_timeout_s = timeout;
  sc.timeout_policy = timeout_policy_from_string(policy);
  sc.online_retrain_interval = interval;
  sc.log_dir = path_in(c, "session");
  SessionCore core(world, ck.params, sc);
  ServerConfig srv;
  srv.address = address;
  srv.port = port;
  SessionServer server(core, srv);
  std::cout << "session " << core.session_id() << " listening on ws://" << address << ':' << server.port() << "\n"
            << std::flush;
  server.run();
  finish_run(c, "serve", {{"session_id", core.session_id()}, {"method", method}, {"retrains", core.retrains()}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"river-following preference alignment toolkit"};
  app.require_subcommand(1);

  // pretrain
  Common pre;
  PretrainConfig pcfg;
  auto* cmd_pre = app.add_subcommand("pretrain", "build the novice policy");
  add_common(cmd_pre, pre);
  cmd_pre->add_option("--epsilon", pcfg.epsilon);
  cmd_pre->add_option("--steps", pcfg.steps);
  cmd_pre->add_option("--coverage-bar", pcfg.coverage_bar);
  cmd_pre->add_option("--hidden", pcfg.hidden_dim);

  // rollout
  Common ro;
  std::string ro_ckpt, ro_overseer = "scripted", ro_method = "SPAR-H", ro_shared, ro_address = "127.0.0.1";
  int ro_episodes = 5;
  unsigned short ro_port = 8765;
  HyperParams ro_hp;
  auto* cmd_ro = app.add_subcommand("rollout", "collect HITL episodes");
  add_common(cmd_ro, ro);
  cmd_ro->add_option("--checkpoint", ro_ckpt)->required();
  cmd_ro->add_option("--method", ro_method, "method for online retraining (remote overseer)");
  cmd_ro->add_option("--overseer", ro_overseer)->check(CLI::IsMember({"scripted", "remote"}));
  cmd_ro->add_option("--episodes", ro_episodes);
  cmd_ro->add_option("--shared-buffer", ro_shared, "also write the buffer to this path");
  cmd_ro->add_option("--port", ro_port);
  cmd_ro->add_option("--address", ro_address);
  add_hp(cmd_ro, ro_hp);

  // retrain
  Common rt;
  std::string rt_ckpt, rt_buffer, rt_method = "SPAR-H";
  HyperParams rt_hp;
  auto* cmd_rt = app.add_subcommand("retrain", "run one retrain over a buffer");
  add_common(cmd_rt, rt);
  cmd_rt->add_option("--checkpoint", rt_ckpt)->required();
  cmd_rt->add_option("--buffer", rt_buffer)->required();
  cmd_rt->add_option("--method", rt_method);
  add_hp(cmd_rt, rt_hp);

  // evaluate
  Common ev;
  std::string ev_ckpt;
  int ev_episodes = 5;
  auto* cmd_ev = app.add_subcommand("evaluate", "overseer-free greedy rollouts from the seeded starts");
  add_common(cmd_ev, ev);
  cmd_ev->add_option("--checkpoint", ev_ckpt)->required();
  cmd_ev->add_option("--episodes", ev_episodes);

  // report
  Common rp;
  std::string rp_buffer, rp_ckpt;
  auto* cmd_rp = app.add_subcommand("report", "intervention table and reward dump for a buffer");
  add_common(cmd_rp, rp);
  cmd_rp->add_option("--buffer", rp_buffer)->required();
  cmd_rp->add_option("--checkpoint", rp_ckpt, "adds reward_dump.csv");

  // serve
  Common sv;
  std::string sv_ckpt, sv_method = "SPAR-H", sv_policy = "pause", sv_address = "127.0.0.1";
  int sv_episodes = 5;
  unsigned short sv_port = 8765;
  std::optional<double> sv_timeout;
  std::optional<int> sv_interval;
  HyperParams sv_hp;
  auto* cmd_sv = app.add_subcommand("serve", "live session over a websocket");
  add_common(cmd_sv, sv);
  cmd_sv->add_option("--checkpoint", sv_ckpt)->required();
  cmd_sv->add_option("--method", sv_method);
  cmd_sv->add_option("--episodes", sv_episodes);
  cmd_sv->add_option("--port", sv_port);
  cmd_sv->add_option("--address", sv_address);
  cmd_sv->add_option("--timeout", sv_timeout, "decision timeout in seconds (default: none)");
  cmd_sv->add_option("--timeout-policy", sv_policy)->check(CLI::IsMember({"auto_accept", "pause"}));
  cmd_sv->add_option("--retrain-interval", sv_interval, "auto-retrain every N steps");
  add_hp(cmd_sv, sv_hp);

  // protocol
  Common pr;
  int pr_episodes = 5;
  std::vector<std::string> pr_methods;
  HyperParams pr_hp;
  std::optional<int> pr_interval;
  bool pr_online = false;
  auto* cmd_pr = app.add_subcommand("protocol", "novice, shared rollouts, every method, report");
  add_common(cmd_pr, pr);
  cmd_pr->add_option("--episodes", pr_episodes);
  cmd_pr->add_option("--methods", pr_methods);
  cmd_pr->add_flag("--online", pr_online, "each method collects its own episodes");
  cmd_pr->add_option("--retrain-interval", pr_interval, "online retraining every N steps (with --online)");
  add_hp(cmd_pr, pr_hp);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*cmd_pre) {
      const WorldConfig wc = load_or_default(pre.world_file);
      start_run(pre, wc);
      const PretrainResult r = pretrain_novice(RiverWorld(wc), pre.seed, pcfg);
      save_checkpoint(r.checkpoint, path_in(pre, "novice.ckpt"));
      finish_run(pre, "pretrain", {{"coverage_fraction", r.coverage_fraction}, {"rounds", r.rounds}});
    } else if (*cmd_ro) {
      const WorldConfig wc = load_or_default(ro.world_file);
      if (ro_overseer == "remote")
        return run_serve(ro, wc, ro_ckpt, ro_method, ro_episodes, ro_hp, ro_port, ro_address, std::nullopt, "pause",
                         std::nullopt);
      start_run(ro, wc);
      const RiverWorld world(wc);
      ExperimentConfig cfg = make_experiment(world, ro.seed, ro_episodes);
      const ReplayBuffer buf = collect_shared_buffer(world, load_checkpoint(ro_ckpt).params, cfg);
      save_buffer(buf, path_in(ro, "buffer.jsonl"));
      if (!ro_shared.empty()) save_buffer(buf, ro_shared);
      write_file(path_in(ro, "interventions.csv"), interventions_csv(intervention_table(buf)));
      finish_run(ro, "rollout", {{"episodes", ro_episodes}, {"overseer", ro_overseer}});
    } else if (*cmd_rt) {
      const WorldConfig wc = load_or_default(rt.world_file);
      start_run(rt, wc);
      const Method m = method_from_string(rt_method);
      const ReplayBuffer buf = load_buffer(rt_buffer);
      const RetrainResult r = retrain(m, buf, load_checkpoint(rt_ckpt).params, rt_hp);
      Checkpoint ck;
      ck.params = r.params;
      ck.meta.checkpoint_id = "Cp" + std::to_string(buf.size() - 1);
      ck.meta.episode_index = static_cast<int>(buf.size()) - 1;
      ck.meta.method = rt_method;
      ck.meta.hyperparameters = hyperparams_to_json(rt_hp);
      ck.meta.creation_seed = rt.seed;
      save_checkpoint(ck, path_in(rt, ck.meta.checkpoint_id + ".ckpt"));
      write_file(path_in(rt, "losses.jsonl"), loss_reports_to_jsonl(r.reports));
      finish_run(rt, "retrain", {{"method", rt_method}, {"pairs", extract_preferences(buf).size()}});
    } else if (*cmd_ev) {
      const WorldConfig wc = load_or_default(ev.world_file);
      start_run(ev, wc);
      const RiverWorld world(wc);
      const ExperimentConfig cfg = make_experiment(world, ev.seed, ev_episodes);
      const auto rewards = evaluate(world, load_checkpoint(ev_ckpt).params, cfg.starts, cfg.eval_seeds, cfg.eval_mode);
      write_file(path_in(ev, "rewards.csv"), rewards_csv(rewards));
      const MeanStd ms = mean_std(rewards);
      std::printf("mean %.3f std %.3f\n", ms.mean, ms.std);
      finish_run(ev, "evaluate", {{"mean", ms.mean}, {"std", ms.std}});
    } else if (*cmd_rp) {
      const WorldConfig wc = load_or_default(rp.world_file);
      start_run(rp, wc);
      const ReplayBuffer buf = load_buffer(rp_buffer);
      const auto table = intervention_table(buf);
      write_file(path_in(rp, "interventions.csv"), interventions_csv(table));
      std::cout << interventions_csv(table);
      if (!rp_ckpt.empty() && !buf.empty()) {
        const NetParams params = load_checkpoint(rp_ckpt).params;
        std::ostringstream os;
        os << "episode,t,m,r_agent,r_exec\n";
        char line[160];
        for (const auto& tr : buf.episodes())
          for (const auto& row : reward_dump(params, tr)) {
            std::snprintf(line, sizeof line, "%d,%d,%d,%.10g,%.10g\n", row.episode_id, row.t, row.m, row.r_agent,
                          row.r_exec);
            os << line;
          }
        write_file(path_in(rp, "reward_dump.csv"), os.str());
      }
      finish_run(rp, "report", {{"pairs", extract_preferences(buf).size()}});
    } else if (*cmd_sv) {
      return run_serve(sv, load_or_default(sv.world_file), sv_ckpt, sv_method, sv_episodes, sv_hp, sv_port,
                       sv_address, sv_timeout, sv_policy, sv_interval);
    } else if (*cmd_pr) {
      const WorldConfig wc = load_or_default(pr.world_file);
      const RiverWorld world(wc);
      ExperimentConfig cfg = make_experiment(world, pr.seed, pr_episodes);
      cfg.world_file = pr.world_file;
      cfg.hp = pr_hp;
      cfg.out_dir = pr.out_dir;
      cfg.shared_rollouts = !pr_online;
      cfg.online_retrain_interval = pr_interval;
      if (!pr_methods.empty()) {
        cfg.methods.clear();
        for (const auto& m : pr_methods) cfg.methods.push_back(method_from_string(m));
      }
      const ProtocolOutput out = run_experiment(world, cfg);
      const MeanStd base = mean_std(out.report.baseline_rewards);
      std::printf("%-10s mean %8.3f std %8.3f\n", "novice", base.mean, base.std);
      for (const auto& run : out.report.runs) {
        const MeanStd ms = mean_std(run.final_rewards);
        std::printf("%-10s mean %8.3f std %8.3f\n", to_string(run.method).c_str(), ms.mean, ms.std);
      }
      std::cout << "wrote " << pr.out_dir << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
