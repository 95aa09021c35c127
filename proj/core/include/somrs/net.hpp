#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "somrs/frp.hpp"

namespace somrs::net {

// ---------------------------------------------------------------------------
// Event loops
// ---------------------------------------------------------------------------

using TimerId = std::uint64_t;

/// Clock plus deferred execution. Times are seconds.
class EventLoop {
 public:
  virtual ~EventLoop() = default;
  virtual double now() const = 0;
  virtual TimerId schedule(double delay, std::function<void()> fn) = 0;
  virtual void cancel(TimerId id) = 0;
  TimerId post(std::function<void()> fn) { return schedule(0, std::move(fn)); }
};

/// Deterministic discrete-event loop: events run in (time, insertion) order
/// and the clock jumps between them. Single-threaded.
class SimLoop : public EventLoop {
 public:
  double now() const override { return now_; }
  TimerId schedule(double delay, std::function<void()> fn) override;
  void cancel(TimerId id) override;

  /// Runs the earliest event; false when the queue is empty.
  bool step();
  /// Runs events up to and including time `t`, then sets the clock to `t`.
  void run_until(double t);
  /// Runs until `done()` holds, the queue drains, or the clock passes
  /// `deadline`. Returns done().
  bool run_while_pending(const std::function<bool()>& done, double deadline);
  std::size_t pending() const { return queue_.size(); }

 private:
  double now_ = 0;
  TimerId next_id_ = 1;
  std::map<std::pair<double, TimerId>, std::function<void()>> queue_;
  std::map<TimerId, double> times_;
};

/// Wall-clock loop running callbacks on one worker thread.
class RealtimeLoop : public EventLoop {
 public:
  RealtimeLoop();
  ~RealtimeLoop() override;
  RealtimeLoop(const RealtimeLoop&) = delete;
  RealtimeLoop& operator=(const RealtimeLoop&) = delete;

  double now() const override;
  TimerId schedule(double delay, std::function<void()> fn) override;
  void cancel(TimerId id) override;
  /// Stops the worker after the callback in progress; pending events are dropped.
  void stop();
  bool on_loop_thread() const { return std::this_thread::get_id() == worker_.get_id(); }

 private:
  void run();

  const std::chrono::steady_clock::time_point start_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::map<std::pair<double, TimerId>, std::function<void()>> queue_;
  std::map<TimerId, double> times_;
  TimerId next_id_ = 1;
  bool stopping_ = false;
  std::thread worker_;
};

/// Runs another loop's clock `scale` times faster.
class ScaledLoop : public EventLoop {
 public:
  ScaledLoop(EventLoop& inner, double scale) : inner_(inner), scale_(scale) {}
  double now() const override { return inner_.now() * scale_; }
  TimerId schedule(double delay, std::function<void()> fn) override {
    return inner_.schedule(delay / scale_, std::move(fn));
  }
  void cancel(TimerId id) override { inner_.cancel(id); }

 private:
  EventLoop& inner_;
  double scale_;
};

// ---------------------------------------------------------------------------
// Message transports
// ---------------------------------------------------------------------------

using Handler = std::function<void(const frp::Envelope&)>;

/// Delivers envelopes to endpoints by header.recipient. Handlers run on the
/// transport's event loop.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual void bind(const std::string& address, Handler handler) = 0;
  virtual void unbind(const std::string& address) = 0;
  virtual void send(const frp::Envelope& e) = 0;
};

/// In-process transport. Every envelope passes through encode/decode and is
/// delivered after `latency` plus uniform jitter, FIFO per sender/recipient pair.
class LoopbackTransport : public Transport {
 public:
  LoopbackTransport(EventLoop& loop, double latency = 0.01, double jitter = 0.0, std::uint64_t seed = 1);

  void bind(const std::string& address, Handler handler) override;
  void unbind(const std::string& address) override;
  void send(const frp::Envelope& e) override;

  /// Called for every envelope at delivery time, before the handler.
  void set_observer(std::function<void(const frp::Envelope&)> fn) { observer_ = std::move(fn); }
  std::size_t dropped() const { return dropped_; }

 private:
  EventLoop& loop_;
  double latency_;
  double jitter_;
  std::mt19937_64 rng_;
  std::map<std::string, Handler> handlers_;
  std::map<std::pair<std::string, std::string>, double> last_delivery_;
  std::function<void(const frp::Envelope&)> observer_;
  std::size_t dropped_ = 0;
};

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
  std::string to_string() const { return host + ":" + std::to_string(port); }
};

/// Parses `host:port`; throws BadConfig.
Endpoint parse_endpoint(const std::string& text);

/// A connected, framed byte stream. Writes are serialized internally.
class Connection {
 public:
  explicit Connection(int fd) : fd_(fd) {}
  ~Connection();
  Connection(const Connection&) = delete;
  Connection& operator=(const Connection&) = delete;

  /// Throws IoError when the peer is gone.
  void write(const frp::Envelope& e);
  /// Blocks for the next envelope; nullopt on orderly close. Throws on
  /// malformed frames and IoError on timeout (`timeout` <= 0 waits forever).
  std::optional<frp::Envelope> read(double timeout = 0);
  /// Ends both directions without releasing the descriptor.
  void shutdown();
  void close();
  bool open() const { return fd_ >= 0; }

 private:
  int fd_;
  std::mutex write_mu_;
  frp::FrameReader reader_;
};

/// Throws IoError.
std::unique_ptr<Connection> connect(const Endpoint& ep, double timeout = 2.0);

/// One request, one Response envelope. Throws IoError, and rethrows the
/// server's error when the Response reports failure.
frp::Envelope request(const Endpoint& ep, const frp::Envelope& e, double timeout = 5.0);

/// Accepts connections and hands each received envelope to `on_frame` on
/// the connection's reader thread.
class FrameServer {
 public:
  using FrameHandler = std::function<void(const frp::Envelope&, const std::shared_ptr<Connection>&)>;

  FrameServer() = default;
  ~FrameServer();
  FrameServer(const FrameServer&) = delete;
  FrameServer& operator=(const FrameServer&) = delete;

  /// Binds and starts accepting. Port 0 picks a free port. Throws PortInUse.
  void start(const Endpoint& ep, FrameHandler on_frame);
  void stop();
  std::uint16_t port() const { return port_; }

 private:
  void accept_loop();

  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  FrameHandler on_frame_;
  std::atomic<bool> running_{false};
  std::thread acceptor_;
  std::mutex mu_;
  std::vector<std::shared_ptr<Connection>> connections_;
  std::vector<std::thread> readers_;
};

/// Transport over TCP. Addresses bound locally are served by this process's
/// listener; other addresses are reached through configured routes.
class TcpTransport : public Transport {
 public:
  explicit TcpTransport(EventLoop& loop) : loop_(loop) {}
  ~TcpTransport() override;

  void listen(const Endpoint& ep);
  std::uint16_t port() const { return server_.port(); }
  void add_route(const std::string& address, const Endpoint& ep);

  void bind(const std::string& address, Handler handler) override;
  void unbind(const std::string& address) override;
  void send(const frp::Envelope& e) override;
  void stop();

 private:
  void deliver(const frp::Envelope& e);

  EventLoop& loop_;
  FrameServer server_;
  std::mutex mu_;
  std::map<std::string, Handler> handlers_;
  std::map<std::string, Endpoint> routes_;
  std::map<std::string, std::shared_ptr<Connection>> outgoing_;
};

/// Monotonic message ids of the form `<prefix>-<n>`.
class IdGenerator {
 public:
  explicit IdGenerator(std::string prefix) : prefix_(std::move(prefix)) {}
  std::string next() { return prefix_ + "-" + std::to_string(++counter_); }

 private:
  std::string prefix_;
  std::atomic<std::uint64_t> counter_{0};
};

}  // namespace somrs::net
