// SPDX-License-Identifier: Apache-2.0
#include "riverpref/session.hpp"

#include <cstdio>
#include <filesystem>

namespace riverpref {

using nlohmann::json;

std::string to_string(TimeoutPolicy p) { return p == TimeoutPolicy::kAutoAccept ? "auto_accept" : "pause"; }

TimeoutPolicy timeout_policy_from_string(const std::string& s) {
  if (s == "auto_accept") return TimeoutPolicy::kAutoAccept;
  if (s == "pause") return TimeoutPolicy::kPause;
  throw ConfigError("unknown timeout policy: " + s);
}

std::string to_string(SessionPhase p) {
  switch (p) {
    case SessionPhase::kAwaitingHello: return "awaiting_hello";
    case SessionPhase::kAwaitingDecision: return "awaiting_decision";
    case SessionPhase::kPaused: return "paused";
    case SessionPhase::kComplete: return "complete";
  }
  return "complete";
}

json proposal_payload(const NetParams& params, const Proposal& p, int episode_id) {
  json probs = json::array();
  for (const auto& branch : p.dist.branch_probs()) probs.push_back({branch[0], branch[1], branch[2]});
  json rewards = json::array();
  for (double r : reward_estimates_all(params, p.z)) rewards.push_back(r);
  return {{"episode_id", episode_id},
          {"t", p.t},
          {"a_agent", action_to_json(p.action)},
          {"joint_index", p.action.joint_index()},
          {"log_prob", p.log_prob},
          {"branch_probs", probs},
          {"reward_estimates", rewards}};
}

namespace {

std::string default_session_id(std::uint64_t seed) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "s%016llx", static_cast<unsigned long long>(mix_seed(seed, 0x5e55)));
  return buf;
}

const std::vector<TransitionRecord> kNoRecords;

}  // namespace

SessionCore::SessionCore(const RiverWorld& world, const NetParams& params, SessionConfig cfg)
    : world_(&world), params_(params), cfg_(std::move(cfg)) {
  if (cfg_.starts.empty()) throw ConfigError("session: at least one start is required");
  if (cfg_.online_retrain_interval && *cfg_.online_retrain_interval < 1)
    throw ConfigError("session: online_retrain_interval must be >= 1");
  if (cfg_.decision_timeout_s && !(*cfg_.decision_timeout_s > 0.0))
    throw ConfigError("session: decision timeout must be > 0");
  cfg_.hp.validate();
  if (cfg_.session_id.empty()) cfg_.session_id = default_session_id(cfg_.seed);
  if (!cfg_.log_dir.empty()) std::filesystem::create_directories(cfg_.log_dir);
  start_episode();
}

const std::vector<TransitionRecord>& SessionCore::current_records() const {
  return runner_ ? runner_->records() : kNoRecords;
}

json SessionCore::envelope(const char* type, json payload) {
  return {{"format_version", kSessionFormatVersion},
          {"type", type},
          {"session_id", cfg_.session_id},
          {"seq", ++seq_},
          {"payload", std::move(payload)}};
}

void SessionCore::emit_error(std::vector<json>& out, const std::string& code, const std::string& message) {
  out.push_back(envelope(msg::kError, {{"code", code}, {"message", message}}));
}

std::vector<json> SessionCore::handle_text(const std::string& frame, double now_s) {
  json j;
  try {
    j = json::parse(frame);
  } catch (const json::parse_error& e) {
    std::vector<json> out;
    emit_error(out, "malformed", std::string("frame is not JSON: ") + e.what());
    if (pending_seq_ && phase_ != SessionPhase::kAwaitingHello) propose(out, now_s);
    return out;
  }
  return handle(j, now_s);
}

std::vector<json> SessionCore::handle(const json& frame, double now_s) {
  std::vector<json> out;
  if (!frame.is_object() || !frame.contains("type") || !frame["type"].is_string()) {
    emit_error(out, "malformed", "frame must be an object with a string type");
    if (pending_seq_ && phase_ != SessionPhase::kAwaitingHello) propose(out, now_s);
    return out;
  }
  if (frame.contains("format_version") && frame["format_version"] != kSessionFormatVersion) {
    emit_error(out, "format_version", "unsupported format_version");
    return out;
  }
  const std::string type = frame["type"].get<std::string>();
  const json payload = frame.contains("payload") ? frame["payload"] : json::object();

  if (type == msg::kHello) {
    on_hello(payload, out, now_s);
    return out;
  }
  if (phase_ == SessionPhase::kAwaitingHello) {
    emit_error(out, "hello_required", "send hello before other messages");
    return out;
  }
  if (!frame.contains("session_id") || frame["session_id"] != cfg_.session_id) {
    emit_error(out, "session_id", "missing or unknown session_id");
    if (type == msg::kDecision && pending_seq_) propose(out, now_s);
    return out;
  }
  if (type == msg::kDecision) {
    on_decision(payload, out, now_s);
  } else if (type == msg::kRetrainRequest) {
    on_retrain_request(out, now_s);
  } else {
    emit_error(out, "unknown_type", "unexpected message type: " + type);
  }
  return out;
}

void SessionCore::on_hello(const json& payload, std::vector<json>& out, double now_s) {
  bool resumed = false;
  if (payload.is_object() && payload.contains("session_id") && !payload["session_id"].is_null()) {
    if (payload["session_id"] != cfg_.session_id) {
      emit_error(out, "session_id", "unknown session_id");
      return;
    }
    resumed = true;
  }
  out.push_back(envelope(msg::kHello, {{"format_version", kSessionFormatVersion},
                                       {"resumed", resumed},
                                       {"method", to_string(cfg_.method)},
                                       {"episodes_total", cfg_.starts.size()},
                                       {"num_segments", world_->num_segments()},
                                       {"decision_timeout_s", cfg_.decision_timeout_s
                                                                  ? json(*cfg_.decision_timeout_s)
                                                                  : json(nullptr)},
                                       {"timeout_policy", to_string(cfg_.timeout_policy)}}));
  if (phase_ == SessionPhase::kComplete) {
    state_update(out);
    return;
  }
  phase_ = SessionPhase::kAwaitingDecision;
  state_update(out);
  propose(out, now_s);
}

void SessionCore::on_decision(const json& payload, std::vector<json>& out, double now_s) {
  if (phase_ == SessionPhase::kComplete || !pending_seq_) {
    emit_error(out, "no_proposal", "no proposal is awaiting a decision");
    return;
  }
  OverseerDecision d;
  std::string problem;
  try {
    if (!payload.is_object()) throw FormatError("payload must be an object");
    const auto ref = payload.at("proposal_seq").get<std::uint64_t>();
    if (ref != *pending_seq_) {
      problem = "stale";
      throw FormatError("proposal_seq " + std::to_string(ref) + " does not reference the pending proposal " +
                        std::to_string(*pending_seq_));
    }
    d.intervene = payload.at("intervene").get<bool>();
    if (d.intervene) {
      if (!payload.contains("override") || payload["override"].is_null())
        throw FormatError("intervene requires an override action");
      d.override_action = action_from_json(payload["override"]);
      d.reason = payload.contains("reason")
                     ? intervention_reason_from_string(payload["reason"].get<std::string>())
                     : InterventionReason::kNone;
    }
  } catch (const std::exception& e) {
    emit_error(out, problem.empty() ? "malformed_decision" : "stale_decision", e.what());
    propose(out, now_s);
    return;
  }
  phase_ = SessionPhase::kAwaitingDecision;
  execute(d, out, now_s);
}

void SessionCore::on_retrain_request(std::vector<json>& out, double now_s) {
  if (pending_seq_ && phase_ != SessionPhase::kComplete) {
    retrain_deferred_ = true;
    out.push_back(envelope(msg::kRetrainProgress, {{"status", "deferred"}, {"trigger", "request"}}));
    return;
  }
  run_retrain(out, "request");
  if (runner_ && !runner_->done()) propose(out, now_s);
}

void SessionCore::execute(const OverseerDecision& d, std::vector<json>& out, double now_s) {
  const std::uint64_t answered = *pending_seq_;
  pending_seq_.reset();
  const TransitionRecord& rec = runner_->execute(d);
  window_interventions_ += rec.m;
  const bool done = runner_->done();
  out.push_back(envelope(msg::kStepResult, {{"proposal_seq", answered},
                                            {"record", record_to_json(rec)},
                                            {"episode_done", done}}));
  if (done) {
    finish_episode();
  } else if (cfg_.online_retrain_interval && runner_->t() % *cfg_.online_retrain_interval == 0) {
    if (window_interventions_ > 0) {
      run_retrain(out, "auto");
      retrain_deferred_ = false;
    } else {
      out.push_back(envelope(msg::kRetrainProgress,
                             {{"status", "skipped"}, {"trigger", "auto"}, {"reason", "no_interventions"}}));
    }
    window_interventions_ = 0;
  }
  if (retrain_deferred_) {
    retrain_deferred_ = false;
    run_retrain(out, "request");
  }
  state_update(out);
  if (phase_ != SessionPhase::kComplete) propose(out, now_s);
}

void SessionCore::propose(std::vector<json>& out, double now_s) {
  const Proposal& p = runner_->propose();
  out.push_back(envelope(msg::kActionProposal, proposal_payload(runner_->params(), p, episode_)));
  pending_seq_ = seq_;
  pending_since_ = now_s;
}

void SessionCore::state_update(std::vector<json>& out) {
  json trail = json::array();
  int steps = 0;
  int interventions = 0;
  for (const auto& tr : buffer_.episodes()) {
    steps += tr.totals.steps;
    interventions += tr.totals.interventions;
  }
  json p = {{"phase", to_string(phase_)},
            {"episode_id", episode_},
            {"episodes_total", cfg_.starts.size()},
            {"episodes_done", buffer_.size()},
            {"num_segments", world_->num_segments()},
            {"retrains", retrains_}};
  if (runner_) {
    const auto& st = runner_->state();
    for (const auto& r : runner_->records()) {
      trail.push_back({{"t", r.t},
                       {"pose", pose_to_json(r.pose)},
                       {"a_exec", action_to_json(r.a_exec)},
                       {"m", r.m},
                       {"reward", r.reward}});
      steps += 1;
      interventions += r.m;
    }
    p["t"] = runner_->t();
    p["pose"] = pose_to_json(st.pose);
    p["mask"] = mask_to_bits(runner_->observation().mask);
    p["coverage_count"] = st.coverage.count();
  }
  p["trajectory"] = std::move(trail);
  p["session_steps"] = steps;
  p["session_interventions"] = interventions;
  p["intervention_rate"] = steps == 0 ? 0.0 : static_cast<double>(interventions) / steps;
  out.push_back(envelope(msg::kStateUpdate, std::move(p)));
}

void SessionCore::run_retrain(std::vector<json>& out, const std::string& trigger) {
  ReplayBuffer snapshot = buffer_;
  if (runner_ && runner_->t() > 0) snapshot.append(runner_->finish());
  if (snapshot.empty() || snapshot.total_steps() == 0) {
    emit_error(out, "nothing_to_train", "the session buffer is empty");
    return;
  }
  out.push_back(envelope(msg::kRetrainProgress, {{"status", "started"},
                                                 {"trigger", trigger},
                                                 {"method", to_string(cfg_.method)},
                                                 {"epochs", cfg_.hp.epochs}}));
  RetrainResult r = retrain(cfg_.method, snapshot, params_, cfg_.hp, [&](const LossReport& rep) {
    out.push_back(envelope(msg::kRetrainProgress, {{"status", "epoch"}, {"report", loss_report_to_json(rep)}}));
  });
  params_ = r.params;
  ++retrains_;
  out.push_back(envelope(msg::kRetrainProgress, {{"status", "finished"}, {"trigger", trigger}}));

  Checkpoint ck;
  ck.params = params_;
  ck.meta.checkpoint_id = "S" + std::to_string(retrains_);
  ck.meta.episode_index = episode_;
  ck.meta.method = to_string(cfg_.method);
  ck.meta.hyperparameters = hyperparams_to_json(cfg_.hp);
  ck.meta.creation_seed = cfg_.seed;
  json saved = {{"checkpoint_id", ck.meta.checkpoint_id}, {"episode_index", episode_}, {"path", nullptr}};
  if (!cfg_.log_dir.empty()) {
    const std::string path = (std::filesystem::path(cfg_.log_dir) / (ck.meta.checkpoint_id + ".ckpt")).string();
    save_checkpoint(ck, path);
    saved["path"] = path;
  }
  out.push_back(envelope(msg::kCheckpointSaved, std::move(saved)));
  if (runner_ && !runner_->done()) runner_->set_params(params_);
}

void SessionCore::start_episode() {
  const auto i = static_cast<std::size_t>(episode_);
  runner_.emplace(*world_, params_, episode_, cfg_.starts[i], mix_seed(cfg_.seed, 500 + i), cfg_.mode);
  window_interventions_ = 0;
}

void SessionCore::finish_episode() {
  Trajectory traj = runner_->finish();
  if (!cfg_.log_dir.empty()) {
    save_trajectory(traj, (std::filesystem::path(cfg_.log_dir) /
                           ("episode_" + std::to_string(traj.episode_id) + ".jsonl")).string());
  }
  buffer_.append(std::move(traj));
  if (!cfg_.log_dir.empty())
    save_buffer(buffer_, (std::filesystem::path(cfg_.log_dir) / "session_buffer.jsonl").string());
  ++episode_;
  if (static_cast<std::size_t>(episode_) < cfg_.starts.size()) {
    start_episode();
  } else {
    runner_.reset();
    phase_ = SessionPhase::kComplete;
  }
}

std::vector<json> SessionCore::tick(double now_s) {
  std::vector<json> out;
  if (phase_ != SessionPhase::kAwaitingDecision || !pending_seq_ || !cfg_.decision_timeout_s) return out;
  if (now_s - pending_since_ < *cfg_.decision_timeout_s) return out;
  if (cfg_.timeout_policy == TimeoutPolicy::kAutoAccept) {
    execute(OverseerDecision::accept(), out, now_s);
  } else {
    phase_ = SessionPhase::kPaused;
    state_update(out);
  }
  return out;
}

void SessionCore::disconnect() {
  if (phase_ != SessionPhase::kComplete) phase_ = SessionPhase::kAwaitingHello;
}

}  // namespace riverpref
