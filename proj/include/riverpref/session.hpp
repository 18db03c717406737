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

inline constexpr int kSessionFormatVersion = 1;

/// Message types of the live-session protocol.
///
/// Every frame is one JSON object:
///   {"format_version": 1, "type": <string>, "session_id": <string>,
///    "seq": <uint, strictly increasing per sender>, "payload": <object>}
///
/// server -> client: hello, state_update, action_proposal, step_result,
///                   retrain_progress, checkpoint_saved, error
/// client -> server: hello, decision, retrain_request
///
/// decision payload: {"proposal_seq": uint, "intervene": bool,
///                    "override": [vertical, yaw, forward, lateral] (when intervene),
///                    "reason": "safety" | "inefficiency" (optional)}
namespace msg {
inline constexpr const char* kHello = "hello";
inline constexpr const char* kStateUpdate = "state_update";
inline constexpr const char* kActionProposal = "action_proposal";
inline constexpr const char* kDecision = "decision";
inline constexpr const char* kStepResult = "step_result";
inline constexpr const char* kRetrainRequest = "retrain_request";
inline constexpr const char* kRetrainProgress = "retrain_progress";
inline constexpr const char* kCheckpointSaved = "checkpoint_saved";
inline constexpr const char* kError = "error";
}  // namespace msg

enum class TimeoutPolicy { kAutoAccept, kPause };
std::string to_string(TimeoutPolicy p);
TimeoutPolicy timeout_policy_from_string(const std::string& s);

struct SessionConfig {
  std::string session_id;  // empty: derived from the seed
  Method method = Method::kSparH;
  HyperParams hp;
  std::vector<StartSpec> starts;  // one episode per start
  std::uint64_t seed = 0;
  PolicyMode mode = PolicyMode::kGreedy;
  std::optional<int> online_retrain_interval;
  std::optional<double> decision_timeout_s;  // none: wait forever
  TimeoutPolicy timeout_policy = TimeoutPolicy::kPause;
  std::string log_dir;  // trajectory logs and checkpoints; empty: in memory only
};

enum class SessionPhase { kAwaitingHello, kAwaitingDecision, kPaused, kComplete };
std::string to_string(SessionPhase p);

/// The session loop without any transport: feed it client frames and clock
/// ticks, collect the frames it wants sent. Stepping, decisions and
/// retraining are serialized inside; there is at most one retrain at a time.
class SessionCore {
 public:
  SessionCore(const RiverWorld& world, const NetParams& params, SessionConfig cfg);

  const std::string& session_id() const { return cfg_.session_id; }
  SessionPhase phase() const { return phase_; }
  const ReplayBuffer& buffer() const { return buffer_; }
  const NetParams& params() const { return params_; }
  std::uint64_t last_seq() const { return seq_; }
  int retrains() const { return retrains_; }
  std::optional<std::uint64_t> pending_proposal_seq() const { return pending_seq_; }
  /// Records of the episode in progress.
  const std::vector<TransitionRecord>& current_records() const;

  /// Handles one raw client frame; malformed frames produce an error frame.
  std::vector<nlohmann::json> handle_text(const std::string& frame, double now_s = 0.0);
  std::vector<nlohmann::json> handle(const nlohmann::json& frame, double now_s = 0.0);
  /// Applies the decision timeout policy.
  std::vector<nlohmann::json> tick(double now_s);
  /// Transport lost: the session pauses and waits for a hello with its id.
  void disconnect();

 private:
  nlohmann::json envelope(const char* type, nlohmann::json payload);
  void emit_error(std::vector<nlohmann::json>& out, const std::string& code, const std::string& message);
  void on_hello(const nlohmann::json& payload, std::vector<nlohmann::json>& out, double now_s);
  void on_decision(const nlohmann::json& payload, std::vector<nlohmann::json>& out, double now_s);
  void on_retrain_request(std::vector<nlohmann::json>& out, double now_s);
  void execute(const OverseerDecision& d, std::vector<nlohmann::json>& out, double now_s);
  void propose(std::vector<nlohmann::json>& out, double now_s);
  void state_update(std::vector<nlohmann::json>& out);
  void run_retrain(std::vector<nlohmann::json>& out, const std::string& trigger);
  void start_episode();
  void finish_episode();

  const RiverWorld* world_;
  NetParams params_;
  SessionConfig cfg_;
  SessionPhase phase_ = SessionPhase::kAwaitingHello;
  std::uint64_t seq_ = 0;
  std::optional<std::uint64_t> pending_seq_;
  double pending_since_ = 0.0;
  bool retrain_deferred_ = false;
  int retrains_ = 0;
  int window_interventions_ = 0;
  int episode_ = 0;
  std::optional<EpisodeRunner> runner_;
  ReplayBuffer buffer_;
};

/// a_agent, per-branch probabilities and R estimates for all 81 joint actions.
nlohmann::json proposal_payload(const NetParams& params, const Proposal& p, int episode_id);

}  // namespace riverpref
