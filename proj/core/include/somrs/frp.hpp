#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <variant>

#include <nlohmann/json.hpp>

#include "somrs/entish.hpp"

/// Failure Recovery Protocol: envelopes, wire codec and the per-session
/// state machine shared by coordinators and participants.
namespace somrs::frp {

inline constexpr std::string_view kProtocolVersion = "somrs-frp/1";
inline constexpr std::size_t kMaxMessageBytes = 1u << 20;

enum class MessageType {
  Arrange,
  Terms,
  Refuse,
  Accept,
  Cancel,
  Execute,
  Completed,
  Failed,
  Stop,
  Compensate,
  Compensated,
  End,
  // Administrative requests to the registry and repository.
  Publish,
  Unpublish,
  Discover,
  GetSnapshot,
  Commit,
  Subscribe,
  Response,
  MapEvent,
};

std::string_view to_string(MessageType t);
std::optional<MessageType> parse_message_type(std::string_view text);
/// True for the twelve messages exchanged within a service session.
bool is_session_message(MessageType t);

using entish::Formula;

struct Arrange {
  Formula precondition;
  Formula effect;
  bool operator==(const Arrange&) const = default;
};
struct Terms {
  Formula commitment;
  double price = 0;
  double max_time = 1;
  bool operator==(const Terms&) const = default;
};
struct Refuse {
  std::string reason;
  bool operator==(const Refuse&) const = default;
};
struct Accept {
  bool operator==(const Accept&) const = default;
};
struct Cancel {
  bool operator==(const Cancel&) const = default;
};
struct Execute {
  Formula precondition;
  std::map<std::string, std::string> inputs;
  bool operator==(const Execute&) const = default;
};
struct Completed {
  Formula result_situation;
  bool operator==(const Completed&) const = default;
};
struct Failed {
  std::optional<Formula> failure_description;
  std::string reason;
  bool operator==(const Failed&) const = default;
};
struct Stop {
  bool operator==(const Stop&) const = default;
};
struct Compensate {
  Formula target_situation;
  bool operator==(const Compensate&) const = default;
};
struct Compensated {
  Formula result_situation;
  bool operator==(const Compensated&) const = default;
};
struct End {
  bool operator==(const End&) const = default;
};
struct Publish {
  nlohmann::json record;
  bool operator==(const Publish&) const = default;
};
struct Unpublish {
  std::string service_id;
  bool operator==(const Unpublish&) const = default;
};
struct Discover {
  Formula effect;
  std::optional<Formula> precondition;
  std::optional<std::string> kind;
  bool operator==(const Discover&) const = default;
};
struct GetSnapshot {
  bool operator==(const GetSnapshot&) const = default;
};
struct Commit {
  nlohmann::json delta;
  std::uint64_t expected_version = 0;
  bool operator==(const Commit&) const = default;
};
struct Subscribe {
  std::uint64_t from_version = 0;
  bool operator==(const Subscribe&) const = default;
};
struct Response {
  bool ok = true;
  std::string error;  // Errc name when !ok
  std::string message;
  nlohmann::json payload;
  bool operator==(const Response&) const = default;
};
struct MapEvent {
  std::uint64_t version = 0;
  nlohmann::json delta;
  bool operator==(const MapEvent&) const = default;
};

/// Alternatives follow the MessageType order.
using Body = std::variant<Arrange, Terms, Refuse, Accept, Cancel, Execute, Completed, Failed, Stop, Compensate,
                          Compensated, End, Publish, Unpublish, Discover, GetSnapshot, Commit, Subscribe, Response,
                          MapEvent>;

MessageType type_of(const Body& body);

struct Header {
  std::string sender;
  std::string recipient;
  MessageType type = MessageType::End;
  std::string message_id;
  std::string session_id;
  std::string version{kProtocolVersion};
  bool operator==(const Header&) const = default;
};

struct Envelope {
  Header header;
  Body body;
  bool operator==(const Envelope&) const = default;
};

Envelope make_envelope(std::string sender, std::string recipient, std::string session_id, std::string message_id,
                       Body body);

/// One-line description of a body for logs and transaction histories.
std::string summarize(const Body& body);

// ---------------------------------------------------------------------------
// Codec
// ---------------------------------------------------------------------------

nlohmann::json to_json(const Envelope& e);
/// Throws MalformedDocument, UnknownMessageType, VersionMismatch.
Envelope from_json(const nlohmann::json& j);

/// 4-byte big-endian length followed by the JSON document. Throws
/// OversizeMessage, MalformedDocument (invalid Terms values).
std::string encode(const Envelope& e);
/// Decodes exactly one frame. Throws FrameError, MalformedDocument,
/// UnknownMessageType, VersionMismatch, OversizeMessage.
Envelope decode(std::string_view bytes);

/// Incremental frame splitter for byte streams.
class FrameReader {
 public:
  void feed(std::string_view bytes);
  /// Next complete frame's payload decoded, or nullopt when more bytes are
  /// needed. Throws like decode.
  std::optional<Envelope> next();
  std::size_t buffered() const { return buffer_.size(); }

 private:
  std::string buffer_;
};

// ---------------------------------------------------------------------------
// Session state machine
// ---------------------------------------------------------------------------

enum class Role { Coordinator, Participant };
enum class Direction { Send, Receive };

enum class SessionState {
  Idle,
  ArrangeSent,
  ArrangeReceived,
  Quoted,
  Refused,
  Arranged,
  Executing,
  Completed,
  Failed,
  Compensating,
  Compensated,
  Cancelled,
  Ended,
};

std::string_view to_string(Role r);
std::string_view to_string(Direction d);
std::string_view to_string(SessionState s);

/// Role that originates messages of type `t` within a session.
Role sender_role(MessageType t);

/// Pure transition table. `stopped` marks a session whose execution was
/// interrupted by Stop, which admits a late Completed or Failed crossing it.
/// `withdrawn` likewise admits a late Terms or Refuse crossing a Cancel.
std::optional<SessionState> next_state(Role role, SessionState s, Direction d, MessageType t, bool stopped = false,
                                       bool withdrawn = false);

struct Outcome {
  enum class Kind { Applied, Duplicate, ProtocolViolation };
  Kind kind = Kind::Applied;
  SessionState from = SessionState::Idle;
  SessionState to = SessionState::Idle;
  std::string detail;

  bool ok() const { return kind != Kind::ProtocolViolation; }
};

/// One side's view of a session. Drive it with every message sent or
/// received on that session; violations leave the state untouched.
class Session {
 public:
  Session() = default;
  Session(std::string id, Role role) : id_(std::move(id)), role_(role) {}

  Outcome apply(Direction d, MessageType t, const std::string& message_id);
  Outcome on_send(const Envelope& e) { return apply(Direction::Send, e.header.type, e.header.message_id); }
  Outcome on_receive(const Envelope& e) { return apply(Direction::Receive, e.header.type, e.header.message_id); }

  const std::string& id() const { return id_; }
  Role role() const { return role_; }
  SessionState state() const { return state_; }
  const std::string& last_message_id() const { return last_message_id_; }
  bool ended() const { return state_ == SessionState::Ended; }

 private:
  std::string id_;
  Role role_ = Role::Coordinator;
  SessionState state_ = SessionState::Idle;
  std::string last_message_id_;
  bool stopped_ = false;
  bool withdrawn_ = false;
  std::set<std::pair<Direction, std::string>> seen_;
};

}  // namespace somrs::frp
