// SPDX-License-Identifier: Apache-2.0
#include "riverpref/server.hpp"

#include <chrono>
#include <deque>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>

namespace riverpref {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;

namespace {

class Connection : public std::enable_shared_from_this<Connection> {
 public:
  using Handler = std::function<void(Connection&, const std::string&)>;
  using Closed = std::function<void(Connection&)>;

  Connection(tcp::socket socket, Handler on_message, Closed on_closed)
      : ws_(std::move(socket)), on_message_(std::move(on_message)), on_closed_(std::move(on_closed)) {}

  void start(bool reject) {
    ws_.text(true);
    ws_.async_accept([self = shared_from_this(), reject](beast::error_code ec) {
      if (ec) return self->close_down();
      if (reject) {
        self->send(nlohmann::json{{"format_version", kSessionFormatVersion},
                                  {"type", msg::kError},
                                  {"seq", 0},
                                  {"payload", {{"code", "busy"}, {"message", "another operator is connected"}}}}
                       .dump());
        self->close_after_write_ = true;
        return;
      }
      self->read();
    });
  }

  void send(std::string text) {
    if (closed_) return;
    outbox_.push_back(std::move(text));
    if (outbox_.size() == 1) write_next();
  }

  void close() {
    if (closed_) return;
    beast::error_code ec;
    ws_.next_layer().shutdown(tcp::socket::shutdown_both, ec);
    ws_.next_layer().close(ec);
  }

 private:
  void read() {
    ws_.async_read(buffer_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) return self->close_down();
      std::string text = beast::buffers_to_string(self->buffer_.data());
      self->buffer_.consume(self->buffer_.size());
      self->on_message_(*self, text);
      self->read();
    });
  }

  void write_next() {
    ws_.async_write(asio::buffer(outbox_.front()), [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) return self->close_down();
      self->outbox_.pop_front();
      if (!self->outbox_.empty()) {
        self->write_next();
      } else if (self->close_after_write_) {
        self->ws_.async_close(websocket::close_code::try_again_later,
                              [self](beast::error_code) { self->close_down(); });
      }
    });
  }

  void close_down() {
    if (closed_) return;
    closed_ = true;
    outbox_.clear();
    on_closed_(*this);
  }

  websocket::stream<tcp::socket> ws_;
  beast::flat_buffer buffer_;
  std::deque<std::string> outbox_;
  Handler on_message_;
  Closed on_closed_;
  bool closed_ = false;
  bool close_after_write_ = false;
};

}  // namespace

struct SessionServer::Impl {
  Impl(SessionCore& c, ServerConfig config)
      : core(c), cfg(std::move(config)), acceptor(io), timer(io), t0(std::chrono::steady_clock::now()) {
    const tcp::endpoint ep(asio::ip::make_address(cfg.address), cfg.port);
    acceptor.open(ep.protocol());
    acceptor.set_option(asio::socket_base::reuse_address(true));
    acceptor.bind(ep);
    acceptor.listen();
  }

  double now() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); }

  void deliver(const std::vector<nlohmann::json>& frames) {
    if (!active) return;
    for (const auto& f : frames) active->send(f.dump());
  }

  void accept() {
    acceptor.async_accept([this](beast::error_code ec, tcp::socket socket) {
      if (ec) return;
      socket.set_option(tcp::no_delay(true), ec);
      const bool busy = active != nullptr;
      auto conn = std::make_shared<Connection>(
          std::move(socket),
          [this](Connection& c, const std::string& text) {
            if (&c != active.get()) return;
            deliver(core.handle_text(text, now()));
          },
          [this](Connection& c) {
            if (&c != active.get()) return;
            active.reset();
            core.disconnect();
            if (cfg.exit_when_complete && core.phase() == SessionPhase::kComplete) shutdown();
          });
      if (!busy) active = conn;
      conn->start(busy);
      accept();
    });
  }

  void tick() {
    timer.expires_after(std::chrono::duration_cast<std::chrono::steady_clock::duration>(
        std::chrono::duration<double>(cfg.tick_s)));
    timer.async_wait([this](beast::error_code ec) {
      if (ec) return;
      if (active) deliver(core.tick(now()));
      tick();
    });
  }

  void shutdown() {
    beast::error_code ec;
    acceptor.close(ec);
    timer.cancel();
    if (active) active->close();
    io.stop();
  }

  SessionCore& core;
  ServerConfig cfg;
  asio::io_context io;
  tcp::acceptor acceptor;
  asio::steady_timer timer;
  std::chrono::steady_clock::time_point t0;
  std::shared_ptr<Connection> active;
};

SessionServer::SessionServer(SessionCore& core, ServerConfig cfg)
    : impl_(std::make_unique<Impl>(core, std::move(cfg))) {}

SessionServer::~SessionServer() = default;

unsigned short SessionServer::port() const { return impl_->acceptor.local_endpoint().port(); }

void SessionServer::run() {
  impl_->accept();
  impl_->tick();
  impl_->io.run();
}

void SessionServer::stop() {
  asio::post(impl_->io, [this] { impl_->shutdown(); });
}

}  // namespace riverpref
