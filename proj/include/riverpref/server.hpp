// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <string>

#include "riverpref/session.hpp"

namespace riverpref {

struct ServerConfig {
  std::string address = "127.0.0.1";
  unsigned short port = 8765;  // 0: pick a free port
  double tick_s = 0.05;        // timeout-policy polling period
  bool exit_when_complete = true;
};

/// Websocket endpoint for one SessionCore. One text frame is one message.
/// A single operator connection is served at a time; further connections
/// get an error frame and are closed. A dropped connection pauses the session
/// until a new connection says hello with the session id.
class SessionServer {
 public:
  SessionServer(SessionCore& core, ServerConfig cfg);
  ~SessionServer();
  SessionServer(const SessionServer&) = delete;
  SessionServer& operator=(const SessionServer&) = delete;

  /// Bound port (valid after construction).
  unsigned short port() const;
  /// Runs the event loop until stop() or, with exit_when_complete, until the
  /// session is complete and the operator has disconnected.
  void run();
  /// Thread safe.
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace riverpref
