#include "somrs/net.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <iostream>

#include "somrs/error.hpp"

namespace somrs::net {

// ---------------------------------------------------------------------------
// SimLoop
// ---------------------------------------------------------------------------

TimerId SimLoop::schedule(double delay, std::function<void()> fn) {
  const TimerId id = next_id_++;
  const double at = now_ + std::max(0.0, delay);
  queue_.emplace(std::make_pair(at, id), std::move(fn));
  times_.emplace(id, at);
  return id;
}

void SimLoop::cancel(TimerId id) {
  auto it = times_.find(id);
  if (it == times_.end()) return;
  queue_.erase({it->second, id});
  times_.erase(it);
}

bool SimLoop::step() {
  if (queue_.empty()) return false;
  auto node = queue_.extract(queue_.begin());
  times_.erase(node.key().second);
  now_ = std::max(now_, node.key().first);
  node.mapped()();
  return true;
}

void SimLoop::run_until(double t) {
  while (!queue_.empty() && queue_.begin()->first.first <= t) step();
  now_ = std::max(now_, t);
}

bool SimLoop::run_while_pending(const std::function<bool()>& done, double deadline) {
  while (!done()) {
    if (queue_.empty() || queue_.begin()->first.first > deadline) break;
    step();
  }
  return done();
}

// ---------------------------------------------------------------------------
// RealtimeLoop
// ---------------------------------------------------------------------------

RealtimeLoop::RealtimeLoop() : start_(std::chrono::steady_clock::now()), worker_([this] { run(); }) {}

RealtimeLoop::~RealtimeLoop() { stop(); }

double RealtimeLoop::now() const {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
}

TimerId RealtimeLoop::schedule(double delay, std::function<void()> fn) {
  std::lock_guard lock(mu_);
  const TimerId id = next_id_++;
  const double at = now() + std::max(0.0, delay);
  queue_.emplace(std::make_pair(at, id), std::move(fn));
  times_.emplace(id, at);
  cv_.notify_one();
  return id;
}

void RealtimeLoop::cancel(TimerId id) {
  std::lock_guard lock(mu_);
  auto it = times_.find(id);
  if (it == times_.end()) return;
  queue_.erase({it->second, id});
  times_.erase(it);
}

void RealtimeLoop::stop() {
  {
    std::lock_guard lock(mu_);
    stopping_ = true;
    cv_.notify_all();
  }
  if (worker_.joinable() && !on_loop_thread()) worker_.join();
}

void RealtimeLoop::run() {
  std::unique_lock lock(mu_);
  while (!stopping_) {
    if (queue_.empty()) {
      cv_.wait(lock);
      continue;
    }
    const double due = queue_.begin()->first.first;
    const double t = now();
    if (due > t) {
      cv_.wait_for(lock, std::chrono::duration<double>(due - t));
      continue;
    }
    auto node = queue_.extract(queue_.begin());
    times_.erase(node.key().second);
    lock.unlock();
    try {
      node.mapped()();
    } catch (const std::exception& e) {
      std::cerr << "event loop: callback threw: " << e.what() << "\n";
    }
    lock.lock();
  }
}

// ---------------------------------------------------------------------------
// LoopbackTransport
// ---------------------------------------------------------------------------

LoopbackTransport::LoopbackTransport(EventLoop& loop, double latency, double jitter, std::uint64_t seed)
    : loop_(loop), latency_(latency), jitter_(jitter), rng_(seed) {}

void LoopbackTransport::bind(const std::string& address, Handler handler) { handlers_[address] = std::move(handler); }

void LoopbackTransport::unbind(const std::string& address) { handlers_.erase(address); }

void LoopbackTransport::send(const frp::Envelope& e) {
  std::string bytes = frp::encode(e);
  double delay = latency_;
  if (jitter_ > 0) delay += std::uniform_real_distribution<double>(0, jitter_)(rng_);
  auto& last = last_delivery_[{e.header.sender, e.header.recipient}];
  double at = std::max(loop_.now() + delay, last);
  last = at;
  loop_.schedule(at - loop_.now(), [this, bytes = std::move(bytes)] {
    auto env = frp::decode(bytes);
    auto it = handlers_.find(env.header.recipient);
    if (it == handlers_.end()) {
      ++dropped_;
      return;
    }
    if (observer_) observer_(env);
    // Copy: the handler may unbind itself.
    Handler h = it->second;
    h(env);
  });
}

// ---------------------------------------------------------------------------
// Sockets
// ---------------------------------------------------------------------------

Endpoint parse_endpoint(const std::string& text) {
  const auto colon = text.rfind(':');
  if (colon == std::string::npos || colon + 1 == text.size()) {
    throw Error(Errc::BadConfig, "expected HOST:PORT, got '" + text + "'");
  }
  Endpoint ep;
  ep.host = colon == 0 ? "127.0.0.1" : text.substr(0, colon);
  try {
    std::size_t used = 0;
    const int port = std::stoi(text.substr(colon + 1), &used);
    if (used != text.size() - colon - 1 || port < 0 || port > 65535) throw std::out_of_range("port");
    ep.port = static_cast<std::uint16_t>(port);
  } catch (const std::exception&) {
    throw Error(Errc::BadConfig, "bad port in '" + text + "'");
  }
  return ep;
}

namespace {

[[noreturn]] void io_error(const std::string& what) {
  throw Error(Errc::IoError, what + ": " + std::strerror(errno));
}

sockaddr_in resolve(const Endpoint& ep) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(ep.port);
  if (inet_pton(AF_INET, ep.host.c_str(), &addr.sin_addr) == 1) return addr;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (getaddrinfo(ep.host.c_str(), nullptr, &hints, &res) != 0 || res == nullptr) {
    throw Error(Errc::IoError, "cannot resolve " + ep.host);
  }
  addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  freeaddrinfo(res);
  return addr;
}

}  // namespace

Connection::~Connection() { close(); }

void Connection::shutdown() {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

void Connection::close() {
  if (fd_ >= 0) {
    ::shutdown(fd_, SHUT_RDWR);
    ::close(fd_);
    fd_ = -1;
  }
}

void Connection::write(const frp::Envelope& e) {
  const std::string bytes = frp::encode(e);
  std::lock_guard lock(write_mu_);
  std::size_t off = 0;
  while (off < bytes.size()) {
    if (fd_ < 0) throw Error(Errc::IoError, "connection closed");
    const ssize_t n = ::send(fd_, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      io_error("send");
    }
    off += static_cast<std::size_t>(n);
  }
}

std::optional<frp::Envelope> Connection::read(double timeout) {
  char buf[65536];
  while (true) {
    if (auto e = reader_.next()) return e;
    if (fd_ < 0) return std::nullopt;
    if (timeout > 0) {
      pollfd p{fd_, POLLIN, 0};
      const int r = ::poll(&p, 1, static_cast<int>(timeout * 1000));
      if (r == 0) throw Error(Errc::IoError, "timed out waiting for a reply");
      if (r < 0 && errno != EINTR) io_error("poll");
    }
    const ssize_t n = ::recv(fd_, buf, sizeof(buf), 0);
    if (n == 0) return std::nullopt;
    if (n < 0) {
      if (errno == EINTR) continue;
      if (errno == EBADF || errno == ECONNRESET || errno == EINVAL) return std::nullopt;
      io_error("recv");
    }
    reader_.feed(std::string_view(buf, static_cast<std::size_t>(n)));
  }
}

std::unique_ptr<Connection> connect(const Endpoint& ep, double timeout) {
  const sockaddr_in addr = resolve(ep);
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) io_error("socket");
  timeval tv{static_cast<time_t>(timeout), static_cast<suseconds_t>((timeout - static_cast<long>(timeout)) * 1e6)};
  ::setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof(tv));
  if (::connect(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) != 0) {
    const int err = errno;
    ::close(fd);
    errno = err;
    io_error("connect " + ep.to_string());
  }
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  return std::make_unique<Connection>(fd);
}

frp::Envelope request(const Endpoint& ep, const frp::Envelope& e, double timeout) {
  auto conn = connect(ep, timeout);
  conn->write(e);
  auto reply = conn->read(timeout);
  if (!reply) throw Error(Errc::IoError, "connection closed before reply from " + ep.to_string());
  if (const auto* r = std::get_if<frp::Response>(&reply->body); r != nullptr && !r->ok) {
    Errc code = Errc::IoError;
    parse_errc(r->error, code);
    throw Error(code, r->message);
  }
  return *reply;
}

FrameServer::~FrameServer() { stop(); }

void FrameServer::start(const Endpoint& ep, FrameHandler on_frame) {
  on_frame_ = std::move(on_frame);
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) io_error("socket");
  int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr = resolve(ep);
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    const int err = errno;
    ::close(listen_fd_);
    listen_fd_ = -1;
    if (err == EADDRINUSE) throw Error(Errc::PortInUse, ep.to_string());
    errno = err;
    io_error("bind " + ep.to_string());
  }
  if (::listen(listen_fd_, 64) != 0) io_error("listen");
  socklen_t len = sizeof(addr);
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
  running_ = true;
  acceptor_ = std::thread([this] { accept_loop(); });
}

void FrameServer::accept_loop() {
  while (running_) {
    pollfd p{listen_fd_, POLLIN, 0};
    if (::poll(&p, 1, 100) <= 0) continue;
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) continue;
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    auto conn = std::make_shared<Connection>(fd);
    std::lock_guard lock(mu_);
    connections_.push_back(conn);
    readers_.emplace_back([this, conn] {
      try {
        while (running_) {
          auto e = conn->read();
          if (!e) break;
          on_frame_(*e, conn);
        }
      } catch (const std::exception& ex) {
        if (running_) std::cerr << "frame server: dropping connection: " << ex.what() << "\n";
      }
    });
  }
}

void FrameServer::stop() {
  if (!running_.exchange(false)) return;
  if (acceptor_.joinable()) acceptor_.join();
  std::vector<std::thread> readers;
  std::vector<std::shared_ptr<Connection>> connections;
  {
    std::lock_guard lock(mu_);
    readers.swap(readers_);
    connections.swap(connections_);
  }
  // Wake blocked readers, then close once none of them touches the socket.
  for (auto& c : connections) c->shutdown();
  for (auto& t : readers) {
    if (t.joinable()) t.join();
  }
  for (auto& c : connections) c->close();
  ::close(listen_fd_);
  listen_fd_ = -1;
}

// ---------------------------------------------------------------------------
// TcpTransport
// ---------------------------------------------------------------------------

TcpTransport::~TcpTransport() { stop(); }

void TcpTransport::listen(const Endpoint& ep) {
  server_.start(ep, [this](const frp::Envelope& e, const std::shared_ptr<Connection>&) { deliver(e); });
}

void TcpTransport::add_route(const std::string& address, const Endpoint& ep) {
  std::lock_guard lock(mu_);
  routes_[address] = ep;
}

void TcpTransport::bind(const std::string& address, Handler handler) {
  std::lock_guard lock(mu_);
  handlers_[address] = std::move(handler);
}

void TcpTransport::unbind(const std::string& address) {
  std::lock_guard lock(mu_);
  handlers_.erase(address);
}

void TcpTransport::deliver(const frp::Envelope& e) {
  loop_.post([this, e] {
    Handler h;
    {
      std::lock_guard lock(mu_);
      auto it = handlers_.find(e.header.recipient);
      if (it == handlers_.end()) return;
      h = it->second;
    }
    h(e);
  });
}

void TcpTransport::send(const frp::Envelope& e) {
  std::shared_ptr<Connection> conn;
  Endpoint ep;
  {
    std::lock_guard lock(mu_);
    if (handlers_.contains(e.header.recipient)) {
      deliver(e);
      return;
    }
    auto route = routes_.find(e.header.recipient);
    if (route == routes_.end()) {
      std::cerr << "tcp transport: no route to " << e.header.recipient << "\n";
      return;
    }
    ep = route->second;
    auto it = outgoing_.find(e.header.recipient);
    if (it != outgoing_.end()) conn = it->second;
  }
  for (int attempt = 0; attempt < 2; ++attempt) {
    try {
      if (!conn || !conn->open()) {
        conn = std::shared_ptr<Connection>(connect(ep).release());
        std::lock_guard lock(mu_);
        outgoing_[e.header.recipient] = conn;
      }
      conn->write(e);
      return;
    } catch (const Error& err) {
      conn.reset();
      if (attempt == 1) std::cerr << "tcp transport: " << err.what() << "\n";
    }
  }
}

void TcpTransport::stop() {
  server_.stop();
  std::lock_guard lock(mu_);
  outgoing_.clear();
}

}  // namespace somrs::net
