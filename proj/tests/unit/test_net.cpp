#include <doctest.h>

#include <atomic>
#include <future>

#include "somrs/error.hpp"
#include "somrs/net.hpp"

using namespace somrs;

namespace {

frp::Envelope note(const std::string& from, const std::string& to, const std::string& id) {
  return frp::make_envelope(from, to, "s", id, frp::End{});
}

}  // namespace

TEST_CASE("SimLoop runs events in time order, ties by insertion") {
  net::SimLoop loop;
  std::vector<std::string> seen;
  loop.schedule(2.0, [&] { seen.push_back("c"); });
  loop.schedule(1.0, [&] { seen.push_back("a"); });
  loop.schedule(1.0, [&] { seen.push_back("b"); });
  auto dead = loop.schedule(1.5, [&] { seen.push_back("x"); });
  loop.cancel(dead);
  loop.run_until(1.0);
  CHECK(seen == std::vector<std::string>{"a", "b"});
  CHECK(loop.now() == doctest::Approx(1.0));
  loop.run_until(10);
  CHECK(seen == std::vector<std::string>{"a", "b", "c"});
  CHECK(loop.pending() == 0);
}

TEST_CASE("SimLoop nested scheduling and run_while_pending deadline") {
  net::SimLoop loop;
  int ticks = 0;
  std::function<void()> tick = [&] {
    ++ticks;
    loop.schedule(1.0, tick);
  };
  loop.post(tick);
  CHECK_FALSE(loop.run_while_pending([&] { return ticks >= 1000; }, 5.5));
  CHECK(ticks == 6);
  CHECK(loop.run_while_pending([&] { return ticks >= 8; }, 100));
  CHECK(ticks == 8);
}

TEST_CASE("LoopbackTransport preserves per-pair FIFO under jitter") {
  net::SimLoop loop;
  net::LoopbackTransport t(loop, 0.01, 0.5, 7);
  std::vector<std::string> got;
  std::size_t observed = 0;
  t.set_observer([&](const frp::Envelope&) { ++observed; });
  t.bind("b", [&](const frp::Envelope& e) { got.push_back(e.header.message_id); });
  for (int i = 0; i < 50; ++i) t.send(note("a", "b", std::to_string(i)));
  t.send(note("a", "nobody", "lost"));
  loop.run_until(100);
  REQUIRE(got.size() == 50);
  for (int i = 0; i < 50; ++i) CHECK(got[i] == std::to_string(i));
  CHECK(observed == 50);
  CHECK(t.dropped() == 1);
}

TEST_CASE("LoopbackTransport delivers after the configured latency") {
  net::SimLoop loop;
  net::LoopbackTransport t(loop, 0.25);
  double at = -1;
  t.bind("b", [&](const frp::Envelope&) { at = loop.now(); });
  loop.schedule(1.0, [&] { t.send(note("a", "b", "m")); });
  loop.run_until(5);
  CHECK(at == doctest::Approx(1.25));
}

TEST_CASE("parse_endpoint") {
  auto ep = net::parse_endpoint("localhost:8080");
  CHECK(ep.host == "localhost");
  CHECK(ep.port == 8080);
  CHECK(net::parse_endpoint(":12").host == "127.0.0.1");
  for (const char* bad : {"nohost", "h:", "h:70000", "h:12x", "h:-1"}) {
    CHECK_THROWS_AS(net::parse_endpoint(bad), Error);
  }
}

TEST_CASE("FrameServer answers request() and maps error responses") {
  net::FrameServer server;
  server.start({"127.0.0.1", 0}, [](const frp::Envelope& e, const std::shared_ptr<net::Connection>& c) {
    frp::Response r;
    if (e.header.message_id == "bad") {
      r.ok = false;
      r.error = "UnknownService";
      r.message = "S9";
    } else {
      r.payload = {{"echo", e.header.message_id}};
    }
    c->write(frp::make_envelope(e.header.recipient, e.header.sender, e.header.session_id, "re", r));
  });
  REQUIRE(server.port() != 0);
  net::Endpoint ep{"127.0.0.1", server.port()};
  auto reply = net::request(ep, note("c", "srv", "m1"));
  CHECK(std::get<frp::Response>(reply.body).payload["echo"] == "m1");
  try {
    net::request(ep, note("c", "srv", "bad"));
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::UnknownService);
    CHECK(e.detail() == "S9");
  }

  net::FrameServer clash;
  CHECK_THROWS_AS(clash.start(ep, [](const frp::Envelope&, const std::shared_ptr<net::Connection>&) {}), Error);
  server.stop();
  CHECK_THROWS_AS(net::request(ep, note("c", "srv", "m2"), 0.5), Error);
}

TEST_CASE("TcpTransport routes between two processes' worth of endpoints") {
  net::RealtimeLoop loop;
  net::TcpTransport left(loop), right(loop);
  left.listen({"127.0.0.1", 0});
  right.listen({"127.0.0.1", 0});
  left.add_route("R", {"127.0.0.1", right.port()});
  right.add_route("L", {"127.0.0.1", left.port()});

  std::promise<std::vector<std::string>> done;
  std::vector<std::string> got;
  right.bind("R", [&](const frp::Envelope& e) {
    got.push_back(e.header.message_id);
    if (got.size() == 20) right.send(note("R", "L", "ack"));
  });
  left.bind("L", [&](const frp::Envelope& e) { done.set_value({e.header.message_id}); });
  for (int i = 0; i < 20; ++i) left.send(note("L", "R", std::to_string(i)));
  auto fut = done.get_future();
  REQUIRE(fut.wait_for(std::chrono::seconds(5)) == std::future_status::ready);
  CHECK(fut.get() == std::vector<std::string>{"ack"});
  loop.stop();
  for (int i = 0; i < 20; ++i) CHECK(got[i] == std::to_string(i));
  left.stop();
  right.stop();
}
