#include <doctest.h>

#include <queue>
#include <random>
#include <set>

#include "random_envelopes.hpp"
#include "somrs/error.hpp"
#include "somrs/frp.hpp"

using namespace somrs;
using namespace somrs::frp;

namespace {

Errc code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return Errc::IoError;
}

std::string frame(const std::string& doc) {
  std::string out(4, '\0');
  const auto n = static_cast<std::uint32_t>(doc.size());
  out[0] = static_cast<char>(n >> 24);
  out[1] = static_cast<char>(n >> 16);
  out[2] = static_cast<char>(n >> 8);
  out[3] = static_cast<char>(n);
  return out + doc;
}

Envelope arrange() {
  return make_envelope("tm", "sm1", "txn-1/TransferObject-1", "tm-1",
                       Arrange{entish::parse("Jar002 isOn ?Shelf"), entish::parse("Jar002 isOn Platform001")});
}

}  // namespace

TEST_CASE("Arrange encodes formulas as canonical text") {
  auto bytes = encode(arrange());
  auto j = nlohmann::json::parse(bytes.substr(4));
  CHECK(j["body"]["precondition"] == "Jar002 isOn ?Shelf");
  CHECK(j["body"]["effect"] == "Jar002 isOn Platform001");
  CHECK(j["header"]["messageType"] == "Arrange");
  CHECK(j["header"]["version"] == "somrs-frp/1");
  CHECK(decode(bytes) == arrange());
}

TEST_CASE("Terms frame decodes price and maxTime") {
  auto e = make_envelope("sm1", "tm", "s", "sm1-1", Terms{entish::parse("Jar002 isOn Platform001"), 10, 60});
  auto back = decode(encode(e));
  const auto& t = std::get<Terms>(back.body);
  CHECK(t.price == 10);
  CHECK(t.max_time == 60);
}

TEST_CASE("codec errors") {
  auto bytes = encode(arrange());
  CHECK(code_of([&] { decode(bytes.substr(0, bytes.size() - 1)); }) == Errc::FrameError);
  CHECK(code_of([&] { decode(bytes.substr(0, 3)); }) == Errc::FrameError);
  CHECK(code_of([&] { decode(bytes + "x"); }) == Errc::FrameError);

  auto j = to_json(arrange());
  j["header"]["messageType"] = "Foo";
  CHECK(code_of([&] { decode(frame(j.dump())); }) == Errc::UnknownMessageType);
  j = to_json(arrange());
  j["header"]["version"] = "somrs-frp/2";
  CHECK(code_of([&] { decode(frame(j.dump())); }) == Errc::VersionMismatch);
  j = to_json(arrange());
  j["body"]["effect"] = "Jar002 isOn";
  CHECK(code_of([&] { decode(frame(j.dump())); }) == Errc::MalformedDocument);
  j = to_json(arrange());
  j["header"].erase("sessionId");
  CHECK(code_of([&] { decode(frame(j.dump())); }) == Errc::MalformedDocument);
  CHECK(code_of([&] { decode(frame("{not json")); }) == Errc::MalformedDocument);

  auto bad_terms = make_envelope("a", "b", "s", "m", Terms{entish::parse("true"), -1, 5});
  CHECK(code_of([&] { encode(bad_terms); }) == Errc::MalformedDocument);
  j = to_json(make_envelope("a", "b", "s", "m", Terms{entish::parse("true"), 1, 5}));
  j["body"]["maxTime"] = 0;
  CHECK(code_of([&] { decode(frame(j.dump())); }) == Errc::MalformedDocument);

  auto big = make_envelope("a", "b", "s", "m", Refuse{std::string(2u << 20, 'x')});
  CHECK(code_of([&] { encode(big); }) == Errc::OversizeMessage);
  std::string huge_prefix("\x7f\x00\x00\x00", 4);
  CHECK(code_of([&] { decode(huge_prefix); }) == Errc::OversizeMessage);
}

TEST_CASE("randomized envelopes roundtrip bit-exactly") {
  std::mt19937 rng(4242);
  for (int i = 0; i < 500; ++i) {
    auto e = randenv::random_envelope(rng);
    auto bytes = encode(e);
    auto back = decode(bytes);
    CHECK(back == e);
    CHECK(encode(back) == bytes);
  }
}

TEST_CASE("FrameReader splits a byte stream at arbitrary boundaries") {
  std::mt19937 rng(8);
  std::vector<Envelope> sent;
  std::string stream;
  for (int i = 0; i < 40; ++i) {
    sent.push_back(randenv::random_envelope(rng));
    stream += encode(sent.back());
  }
  FrameReader reader;
  std::vector<Envelope> got;
  std::size_t pos = 0;
  while (pos < stream.size()) {
    const std::size_t n = std::min<std::size_t>(stream.size() - pos, 1 + rng() % 97);
    reader.feed(std::string_view(stream).substr(pos, n));
    pos += n;
    while (auto e = reader.next()) got.push_back(std::move(*e));
  }
  CHECK(got == sent);
  CHECK(reader.buffered() == 0);
}

TEST_CASE("participant walks Arrange, Terms, Accept") {
  Session s("x", Role::Participant);
  CHECK(s.apply(Direction::Receive, MessageType::Arrange, "1").to == SessionState::ArrangeReceived);
  CHECK(s.apply(Direction::Send, MessageType::Terms, "a").to == SessionState::Quoted);
  CHECK(s.apply(Direction::Receive, MessageType::Accept, "2").to == SessionState::Arranged);

  Session q("y", Role::Participant);
  q.apply(Direction::Receive, MessageType::Arrange, "1");
  q.apply(Direction::Send, MessageType::Terms, "a");
  CHECK(q.apply(Direction::Receive, MessageType::Cancel, "2").to == SessionState::Cancelled);
}

TEST_CASE("coordinator completes then ends") {
  Session s("x", Role::Coordinator);
  for (auto [d, t] : std::vector<std::pair<Direction, MessageType>>{{Direction::Send, MessageType::Arrange},
                                                                   {Direction::Receive, MessageType::Terms},
                                                                   {Direction::Send, MessageType::Accept},
                                                                   {Direction::Send, MessageType::Execute}}) {
    REQUIRE(s.apply(d, t, std::to_string(static_cast<int>(t))).ok());
  }
  CHECK(s.state() == SessionState::Executing);
  CHECK(s.apply(Direction::Receive, MessageType::Completed, "c").to == SessionState::Completed);
  CHECK(s.apply(Direction::Send, MessageType::End, "e").to == SessionState::Ended);
  CHECK(s.ended());
}

TEST_CASE("violations and duplicates leave the state untouched") {
  Session s("x", Role::Coordinator);
  auto bad = s.apply(Direction::Send, MessageType::Execute, "1");
  CHECK(bad.kind == Outcome::Kind::ProtocolViolation);
  CHECK(s.state() == SessionState::Idle);
  CHECK(s.apply(Direction::Send, MessageType::End, "1").kind == Outcome::Kind::ProtocolViolation);
  // Wrong direction for the role.
  CHECK_FALSE(s.apply(Direction::Send, MessageType::Terms, "1").ok());
  CHECK(s.apply(Direction::Send, MessageType::Arrange, "1").ok());
  CHECK(s.apply(Direction::Send, MessageType::Arrange, "1").kind == Outcome::Kind::Duplicate);
  CHECK(s.state() == SessionState::ArrangeSent);
  // The same id in the other direction is a different message.
  CHECK(s.apply(Direction::Receive, MessageType::Terms, "1").to == SessionState::Quoted);
}

TEST_CASE("End is accepted from every non-Idle state and Ended is final") {
  for (auto role : {Role::Coordinator, Role::Participant}) {
    for (int i = 0; i <= static_cast<int>(SessionState::Ended); ++i) {
      auto s = static_cast<SessionState>(i);
      auto d = role == Role::Coordinator ? Direction::Send : Direction::Receive;
      auto next = next_state(role, s, d, MessageType::End);
      if (s == SessionState::Idle || s == SessionState::Ended) {
        CHECK_FALSE(next);
      } else {
        CHECK(next == SessionState::Ended);
      }
    }
    for (int t = 0; t <= static_cast<int>(MessageType::End); ++t) {
      for (auto d : {Direction::Send, Direction::Receive}) {
        CHECK_FALSE(next_state(role, SessionState::Ended, d, static_cast<MessageType>(t)));
      }
    }
  }
}

TEST_CASE("coordinator and participant machines are duals") {
  // Explore every pair of states reachable with in-order delivery. Each send
  // on one side must be a legal receive on the other side.
  using Pair = std::tuple<SessionState, SessionState, bool>;
  std::set<Pair> seen;
  std::queue<Pair> work;
  work.push({SessionState::Idle, SessionState::Idle, false});
  seen.insert(work.front());
  int checked = 0;
  while (!work.empty()) {
    auto [c, p, stopped] = work.front();
    work.pop();
    for (int ti = 0; ti <= static_cast<int>(MessageType::End); ++ti) {
      const auto t = static_cast<MessageType>(ti);
      const bool from_coordinator = sender_role(t) == Role::Coordinator;
      auto sent = from_coordinator ? next_state(Role::Coordinator, c, Direction::Send, t, stopped)
                                   : next_state(Role::Participant, p, Direction::Send, t);
      if (!sent) continue;
      auto received = from_coordinator ? next_state(Role::Participant, p, Direction::Receive, t)
                                       : next_state(Role::Coordinator, c, Direction::Receive, t, stopped);
      CHECK_MESSAGE(received.has_value(), to_string(t), " from ", to_string(c), "/", to_string(p));
      ++checked;
      if (!received) continue;
      Pair next = from_coordinator ? Pair{*sent, *received, stopped || (t == MessageType::Stop && c == SessionState::Executing)}
                                   : Pair{*received, *sent, stopped};
      if (seen.insert(next).second) work.push(next);
    }
  }
  CHECK(checked > 20);
  // Without crossings the two sides agree on the state, modulo the
  // direction-specific arranging states.
  for (const auto& [c, p, stopped] : seen) {
    if (c == SessionState::ArrangeSent) {
      CHECK(p == SessionState::ArrangeReceived);
    } else {
      CHECK(c == p);
    }
  }
}

TEST_CASE("a Stop crossing a Completed report is tolerated on both sides") {
  Session c("s", Role::Coordinator);
  Session p("s", Role::Participant);
  auto step = [&](Session& from, Session& to, MessageType t, const std::string& id) {
    REQUIRE(from.apply(Direction::Send, t, id).ok());
    REQUIRE(to.apply(Direction::Receive, t, id).ok());
  };
  step(c, p, MessageType::Arrange, "c1");
  step(p, c, MessageType::Terms, "p1");
  step(c, p, MessageType::Accept, "c2");
  step(c, p, MessageType::Execute, "c3");
  // Both sides send before seeing the other's message.
  REQUIRE(c.apply(Direction::Send, MessageType::Stop, "c4").ok());
  REQUIRE(p.apply(Direction::Send, MessageType::Completed, "p2").ok());
  CHECK(p.apply(Direction::Receive, MessageType::Stop, "c4").to == SessionState::Completed);
  CHECK(c.apply(Direction::Receive, MessageType::Completed, "p2").to == SessionState::Completed);
  step(c, p, MessageType::Compensate, "c5");
  step(p, c, MessageType::Compensated, "p3");
  step(c, p, MessageType::End, "c6");
  CHECK(c.ended());
  CHECK(p.ended());

  // A Cancelled session that was never stopped rejects a late Completed.
  Session q("q", Role::Coordinator);
  q.apply(Direction::Send, MessageType::Arrange, "1");
  q.apply(Direction::Receive, MessageType::Terms, "1");
  q.apply(Direction::Send, MessageType::Cancel, "2");
  CHECK_FALSE(q.apply(Direction::Receive, MessageType::Completed, "2").ok());
}

TEST_CASE("re-arrangement after Cancel reuses the session") {
  Session p("s", Role::Participant);
  p.apply(Direction::Receive, MessageType::Arrange, "1");
  p.apply(Direction::Send, MessageType::Terms, "a");
  p.apply(Direction::Receive, MessageType::Cancel, "2");
  CHECK(p.apply(Direction::Receive, MessageType::Arrange, "3").to == SessionState::ArrangeReceived);
  CHECK(p.apply(Direction::Send, MessageType::Terms, "b").to == SessionState::Quoted);
}

TEST_CASE("a quote crossing an early Cancel is absorbed") {
  Session c("s", Role::Coordinator);
  Session p("s", Role::Participant);
  REQUIRE(c.apply(Direction::Send, MessageType::Arrange, "c1").ok());
  REQUIRE(p.apply(Direction::Receive, MessageType::Arrange, "c1").ok());
  REQUIRE(c.apply(Direction::Send, MessageType::Cancel, "c2").ok());
  REQUIRE(p.apply(Direction::Send, MessageType::Terms, "p1").ok());
  CHECK(p.apply(Direction::Receive, MessageType::Cancel, "c2").to == SessionState::Cancelled);
  CHECK(c.apply(Direction::Receive, MessageType::Terms, "p1").to == SessionState::Cancelled);
  // A session cancelled after quoting still rejects a second quote.
  Session q("q", Role::Coordinator);
  q.apply(Direction::Send, MessageType::Arrange, "1");
  q.apply(Direction::Receive, MessageType::Terms, "1");
  q.apply(Direction::Send, MessageType::Cancel, "2");
  CHECK_FALSE(q.apply(Direction::Receive, MessageType::Terms, "3").ok());
  CHECK(next_state(Role::Coordinator, SessionState::Cancelled, Direction::Receive, MessageType::Refuse, false, true) ==
        SessionState::Cancelled);
}
