#include "somrs/frp.hpp"

#include <array>
#include <cmath>

#include "somrs/error.hpp"

namespace somrs::frp {

namespace {

constexpr std::array<std::string_view, 20> kTypeNames{
    "Arrange", "Terms",       "Refuse",      "Accept",    "Cancel",  "Execute",     "Completed",
    "Failed",  "Stop",        "Compensate",  "Compensated", "End",   "Publish",     "Unpublish",
    "Discover", "GetSnapshot", "Commit",     "Subscribe", "Response", "MapEvent"};

static_assert(std::variant_size_v<Body> == kTypeNames.size());

}  // namespace

std::string_view to_string(MessageType t) { return kTypeNames[static_cast<std::size_t>(t)]; }

std::optional<MessageType> parse_message_type(std::string_view text) {
  for (std::size_t i = 0; i < kTypeNames.size(); ++i) {
    if (kTypeNames[i] == text) return static_cast<MessageType>(i);
  }
  return std::nullopt;
}

bool is_session_message(MessageType t) { return static_cast<int>(t) <= static_cast<int>(MessageType::End); }

MessageType type_of(const Body& body) { return static_cast<MessageType>(body.index()); }

Envelope make_envelope(std::string sender, std::string recipient, std::string session_id, std::string message_id,
                       Body body) {
  Envelope e;
  e.header.sender = std::move(sender);
  e.header.recipient = std::move(recipient);
  e.header.type = type_of(body);
  e.header.message_id = std::move(message_id);
  e.header.session_id = std::move(session_id);
  e.body = std::move(body);
  return e;
}

std::string summarize(const Body& body) {
  using entish::print;
  return std::visit(
      [](const auto& b) -> std::string {
        using B = std::decay_t<decltype(b)>;
        if constexpr (std::is_same_v<B, Arrange>) {
          return "pre: " + print(b.precondition) + "; eff: " + print(b.effect);
        } else if constexpr (std::is_same_v<B, Terms>) {
          return print(b.commitment) + "; price " + ontology::format_number(b.price) + "; maxTime " +
                 ontology::format_number(b.max_time);
        } else if constexpr (std::is_same_v<B, Refuse>) {
          return b.reason;
        } else if constexpr (std::is_same_v<B, Execute>) {
          return "pre: " + print(b.precondition);
        } else if constexpr (std::is_same_v<B, Completed> || std::is_same_v<B, Compensated>) {
          return print(b.result_situation);
        } else if constexpr (std::is_same_v<B, Failed>) {
          return b.failure_description ? print(*b.failure_description) + "; " + b.reason : b.reason;
        } else if constexpr (std::is_same_v<B, Compensate>) {
          return print(b.target_situation);
        } else if constexpr (std::is_same_v<B, Unpublish>) {
          return b.service_id;
        } else if constexpr (std::is_same_v<B, Discover>) {
          return print(b.effect);
        } else if constexpr (std::is_same_v<B, Response>) {
          return b.ok ? "ok" : b.error + ": " + b.message;
        } else if constexpr (std::is_same_v<B, MapEvent>) {
          return "version " + std::to_string(b.version);
        } else {
          return "";
        }
      },
      body);
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

namespace {

[[noreturn]] void malformed(const std::string& what) { throw Error(Errc::MalformedDocument, what); }

void check_terms(const Terms& t) {
  if (!std::isfinite(t.price) || t.price < 0) malformed("Terms.price must be >= 0");
  if (!std::isfinite(t.max_time) || t.max_time <= 0) malformed("Terms.maxTime must be > 0");
}

const nlohmann::json& field(const nlohmann::json& j, const char* name) {
  if (!j.is_object() || !j.contains(name)) malformed(std::string("missing field ") + name);
  return j.at(name);
}

std::string text(const nlohmann::json& j, const char* name) {
  const auto& v = field(j, name);
  if (!v.is_string()) malformed(std::string(name) + " must be a string");
  return v.get<std::string>();
}

double number(const nlohmann::json& j, const char* name) {
  const auto& v = field(j, name);
  if (!v.is_number()) malformed(std::string(name) + " must be a number");
  return v.get<double>();
}

std::uint64_t count(const nlohmann::json& j, const char* name) {
  const auto& v = field(j, name);
  if (!v.is_number_unsigned()) malformed(std::string(name) + " must be a nonnegative integer");
  return v.get<std::uint64_t>();
}

Formula formula(const nlohmann::json& j, const char* name) {
  try {
    return entish::parse(text(j, name));
  } catch (const entish::SyntaxError& e) {
    malformed(std::string(name) + ": " + e.what());
  }
}

nlohmann::json body_to_json(const Body& body) {
  using entish::print;
  return std::visit(
      [](const auto& b) -> nlohmann::json {
        using B = std::decay_t<decltype(b)>;
        nlohmann::json j = nlohmann::json::object();
        if constexpr (std::is_same_v<B, Arrange>) {
          j["precondition"] = print(b.precondition);
          j["effect"] = print(b.effect);
        } else if constexpr (std::is_same_v<B, Terms>) {
          j["commitment"] = print(b.commitment);
          j["price"] = b.price;
          j["maxTime"] = b.max_time;
        } else if constexpr (std::is_same_v<B, Refuse>) {
          j["reason"] = b.reason;
        } else if constexpr (std::is_same_v<B, Execute>) {
          j["precondition"] = print(b.precondition);
          j["inputs"] = b.inputs;
        } else if constexpr (std::is_same_v<B, Completed> || std::is_same_v<B, Compensated>) {
          j["resultSituation"] = print(b.result_situation);
        } else if constexpr (std::is_same_v<B, Failed>) {
          if (b.failure_description) j["failureDescription"] = print(*b.failure_description);
          j["reason"] = b.reason;
        } else if constexpr (std::is_same_v<B, Compensate>) {
          j["targetSituation"] = print(b.target_situation);
        } else if constexpr (std::is_same_v<B, Publish>) {
          j["record"] = b.record;
        } else if constexpr (std::is_same_v<B, Unpublish>) {
          j["serviceId"] = b.service_id;
        } else if constexpr (std::is_same_v<B, Discover>) {
          j["effect"] = print(b.effect);
          if (b.precondition) j["precondition"] = print(*b.precondition);
          if (b.kind) j["kind"] = *b.kind;
        } else if constexpr (std::is_same_v<B, Commit>) {
          j["delta"] = b.delta;
          j["expectedVersion"] = b.expected_version;
        } else if constexpr (std::is_same_v<B, Subscribe>) {
          j["fromVersion"] = b.from_version;
        } else if constexpr (std::is_same_v<B, Response>) {
          j["ok"] = b.ok;
          j["error"] = b.error;
          j["message"] = b.message;
          j["payload"] = b.payload;
        } else if constexpr (std::is_same_v<B, MapEvent>) {
          j["version"] = b.version;
          j["delta"] = b.delta;
        }
        return j;
      },
      body);
}

Body body_from_json(MessageType type, const nlohmann::json& j) {
  if (!j.is_object()) malformed("body must be an object");
  switch (type) {
    case MessageType::Arrange:
      return Arrange{formula(j, "precondition"), formula(j, "effect")};
    case MessageType::Terms: {
      Terms t{formula(j, "commitment"), number(j, "price"), number(j, "maxTime")};
      check_terms(t);
      return t;
    }
    case MessageType::Refuse:
      return Refuse{text(j, "reason")};
    case MessageType::Accept:
      return Accept{};
    case MessageType::Cancel:
      return Cancel{};
    case MessageType::Execute: {
      Execute e{formula(j, "precondition"), {}};
      const auto& inputs = field(j, "inputs");
      if (!inputs.is_object()) malformed("inputs must be an object");
      for (const auto& [k, v] : inputs.items()) {
        if (!v.is_string()) malformed("input values must be strings");
        e.inputs.emplace(k, v.get<std::string>());
      }
      return e;
    }
    case MessageType::Completed:
      return Completed{formula(j, "resultSituation")};
    case MessageType::Failed: {
      Failed f;
      if (j.contains("failureDescription")) f.failure_description = formula(j, "failureDescription");
      f.reason = text(j, "reason");
      return f;
    }
    case MessageType::Stop:
      return Stop{};
    case MessageType::Compensate:
      return Compensate{formula(j, "targetSituation")};
    case MessageType::Compensated:
      return Compensated{formula(j, "resultSituation")};
    case MessageType::End:
      return End{};
    case MessageType::Publish:
      return Publish{field(j, "record")};
    case MessageType::Unpublish:
      return Unpublish{text(j, "serviceId")};
    case MessageType::Discover: {
      Discover d{formula(j, "effect"), std::nullopt, std::nullopt};
      if (j.contains("precondition")) d.precondition = formula(j, "precondition");
      if (j.contains("kind")) d.kind = text(j, "kind");
      return d;
    }
    case MessageType::GetSnapshot:
      return GetSnapshot{};
    case MessageType::Commit:
      return Commit{field(j, "delta"), count(j, "expectedVersion")};
    case MessageType::Subscribe:
      return Subscribe{count(j, "fromVersion")};
    case MessageType::Response: {
      const auto& ok = field(j, "ok");
      if (!ok.is_boolean()) malformed("ok must be a boolean");
      return Response{ok.get<bool>(), text(j, "error"), text(j, "message"), field(j, "payload")};
    }
    case MessageType::MapEvent:
      return MapEvent{count(j, "version"), field(j, "delta")};
  }
  malformed("unhandled message type");
}

}  // namespace

nlohmann::json to_json(const Envelope& e) {
  if (const auto* t = std::get_if<Terms>(&e.body)) check_terms(*t);
  if (type_of(e.body) != e.header.type) malformed("header type does not match body");
  return {{"header",
           {{"sender", e.header.sender},
            {"recipient", e.header.recipient},
            {"messageType", to_string(e.header.type)},
            {"messageId", e.header.message_id},
            {"sessionId", e.header.session_id},
            {"version", e.header.version}}},
          {"body", body_to_json(e.body)}};
}

Envelope from_json(const nlohmann::json& j) {
  const auto& h = field(j, "header");
  Envelope e;
  e.header.version = text(h, "version");
  if (e.header.version != kProtocolVersion) {
    throw Error(Errc::VersionMismatch, "got " + e.header.version + ", expected " + std::string(kProtocolVersion));
  }
  const auto type_name = text(h, "messageType");
  const auto type = parse_message_type(type_name);
  if (!type) throw Error(Errc::UnknownMessageType, type_name);
  e.header.type = *type;
  e.header.sender = text(h, "sender");
  e.header.recipient = text(h, "recipient");
  e.header.message_id = text(h, "messageId");
  e.header.session_id = text(h, "sessionId");
  e.body = body_from_json(*type, field(j, "body"));
  return e;
}

std::string encode(const Envelope& e) {
  const std::string doc = to_json(e).dump();
  if (doc.size() > kMaxMessageBytes) {
    throw Error(Errc::OversizeMessage, std::to_string(doc.size()) + " bytes");
  }
  const auto n = static_cast<std::uint32_t>(doc.size());
  std::string out;
  out.reserve(doc.size() + 4);
  out.push_back(static_cast<char>((n >> 24) & 0xff));
  out.push_back(static_cast<char>((n >> 16) & 0xff));
  out.push_back(static_cast<char>((n >> 8) & 0xff));
  out.push_back(static_cast<char>(n & 0xff));
  out += doc;
  return out;
}

namespace {

std::uint32_t read_length(std::string_view bytes) {
  std::uint32_t n = 0;
  for (int i = 0; i < 4; ++i) n = (n << 8) | static_cast<unsigned char>(bytes[static_cast<std::size_t>(i)]);
  return n;
}

Envelope decode_document(std::string_view doc) {
  nlohmann::json j = nlohmann::json::parse(doc, nullptr, false);
  if (j.is_discarded()) malformed("payload is not valid JSON");
  return from_json(j);
}

}  // namespace

Envelope decode(std::string_view bytes) {
  if (bytes.size() < 4) throw Error(Errc::FrameError, "frame shorter than its length prefix");
  const auto n = read_length(bytes);
  if (n > kMaxMessageBytes) throw Error(Errc::OversizeMessage, std::to_string(n) + " bytes");
  if (bytes.size() - 4 != n) {
    throw Error(Errc::FrameError,
                "length prefix says " + std::to_string(n) + " bytes, frame holds " + std::to_string(bytes.size() - 4));
  }
  return decode_document(bytes.substr(4));
}

void FrameReader::feed(std::string_view bytes) { buffer_.append(bytes); }

std::optional<Envelope> FrameReader::next() {
  if (buffer_.size() < 4) return std::nullopt;
  const auto n = read_length(buffer_);
  if (n > kMaxMessageBytes) throw Error(Errc::OversizeMessage, std::to_string(n) + " bytes");
  if (buffer_.size() < 4 + static_cast<std::size_t>(n)) return std::nullopt;
  std::string doc = buffer_.substr(4, n);
  buffer_.erase(0, 4 + static_cast<std::size_t>(n));
  return decode_document(doc);
}

// ---------------------------------------------------------------------------
// State machine
// ---------------------------------------------------------------------------

std::string_view to_string(Role r) { return r == Role::Coordinator ? "coordinator" : "participant"; }
std::string_view to_string(Direction d) { return d == Direction::Send ? "send" : "receive"; }

std::string_view to_string(SessionState s) {
  switch (s) {
    case SessionState::Idle: return "Idle";
    case SessionState::ArrangeSent: return "ArrangeSent";
    case SessionState::ArrangeReceived: return "ArrangeReceived";
    case SessionState::Quoted: return "Quoted";
    case SessionState::Refused: return "Refused";
    case SessionState::Arranged: return "Arranged";
    case SessionState::Executing: return "Executing";
    case SessionState::Completed: return "Completed";
    case SessionState::Failed: return "Failed";
    case SessionState::Compensating: return "Compensating";
    case SessionState::Compensated: return "Compensated";
    case SessionState::Cancelled: return "Cancelled";
    case SessionState::Ended: return "Ended";
  }
  return "?";
}

Role sender_role(MessageType t) {
  switch (t) {
    case MessageType::Terms:
    case MessageType::Refuse:
    case MessageType::Completed:
    case MessageType::Failed:
    case MessageType::Compensated:
      return Role::Participant;
    default:
      return Role::Coordinator;
  }
}

std::optional<SessionState> next_state(Role role, SessionState s, Direction d, MessageType t, bool stopped, bool withdrawn) {
  using S = SessionState;
  using M = MessageType;
  if (!is_session_message(t)) return std::nullopt;
  const Role origin = d == Direction::Send ? role : (role == Role::Coordinator ? Role::Participant : Role::Coordinator);
  if (origin != sender_role(t)) return std::nullopt;
  if (s == S::Ended) return std::nullopt;
  if (t == M::End) return s == S::Idle ? std::nullopt : std::optional(S::Ended);

  const bool arranging = s == S::ArrangeSent || s == S::ArrangeReceived;
  switch (t) {
    case M::Arrange:
      if (s == S::Idle || s == S::Refused || s == S::Cancelled) {
        return role == Role::Coordinator ? S::ArrangeSent : S::ArrangeReceived;
      }
      break;
    case M::Terms:
      if (arranging) return S::Quoted;
      if (s == S::Cancelled && withdrawn) return s;
      break;
    case M::Refuse:
      if (arranging) return S::Refused;
      if (s == S::Cancelled && withdrawn) return s;
      break;
    case M::Accept:
      if (s == S::Quoted) return S::Arranged;
      break;
    case M::Cancel:
      if (arranging || s == S::Quoted || s == S::Arranged) return S::Cancelled;
      break;
    case M::Execute:
      if (s == S::Arranged) return S::Executing;
      break;
    case M::Completed:
      if (s == S::Executing || (s == S::Cancelled && stopped)) return S::Completed;
      break;
    case M::Failed:
      if (s == S::Executing || s == S::Compensating || (s == S::Cancelled && stopped)) return S::Failed;
      break;
    case M::Stop:
      if (s == S::Executing) return S::Cancelled;
      // A Stop crossing the participant's own final report changes nothing.
      if (s == S::Completed || s == S::Failed) return s;
      break;
    case M::Compensate:
      if (s == S::Completed || s == S::Failed || s == S::Cancelled) return S::Compensating;
      break;
    case M::Compensated:
      if (s == S::Compensating) return S::Compensated;
      break;
    default:
      break;
  }
  return std::nullopt;
}

Outcome Session::apply(Direction d, MessageType t, const std::string& message_id) {
  Outcome out;
  out.from = state_;
  out.to = state_;
  if (!message_id.empty() && seen_.contains({d, message_id})) {
    out.kind = Outcome::Kind::Duplicate;
    return out;
  }
  auto next = next_state(role_, state_, d, t, stopped_, withdrawn_);
  if (!next) {
    out.kind = Outcome::Kind::ProtocolViolation;
    out.detail = std::string(to_string(role_)) + " in " + std::string(to_string(state_)) + " cannot " +
                 std::string(to_string(d)) + " " + std::string(to_string(t));
    return out;
  }
  if (t == MessageType::Stop && state_ == SessionState::Executing) stopped_ = true;
  if (t == MessageType::Cancel && (state_ == SessionState::ArrangeSent || state_ == SessionState::ArrangeReceived)) {
    withdrawn_ = true;
  }
  if (t == MessageType::Arrange) stopped_ = withdrawn_ = false;
  if (!message_id.empty()) seen_.insert({d, message_id});
  state_ = *next;
  last_message_id_ = message_id;
  out.to = state_;
  return out;
}

}  // namespace somrs::frp
