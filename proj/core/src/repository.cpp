#include "somrs/repository.hpp"

#include <fstream>

#include "somrs/error.hpp"
#include "somrs/world_io.hpp"

namespace somrs::repository {

namespace {

ontology::Value coerce(const ontology::Value& v, const ontology::AttributeDef* def) {
  if (def == nullptr) return v;
  if (def->kind == ontology::AttributeKind::Text) {
    if (const auto* s = std::get_if<ontology::Symbol>(&v)) return s->name;
  } else if (def->kind == ontology::AttributeKind::Enumeration) {
    if (const auto* s = std::get_if<std::string>(&v)) return ontology::Symbol{*s};
  }
  return v;
}

frp::Envelope reply_to(const frp::Envelope& req, frp::Response body) {
  return frp::make_envelope(req.header.recipient, req.header.sender, req.header.message_id,
                            req.header.recipient + "-re-" + req.header.message_id, std::move(body));
}

}  // namespace

MapDelta situation_to_delta(const entish::Formula& situation, const WorldMap& map, const ontology::Ontology& ont) {
  if (!entish::is_ground(situation)) {
    throw Error(Errc::MalformedFormula, "situation must be ground: " + entish::print(situation));
  }
  const auto branches = entish::dnf(situation);
  if (branches.size() != 1) {
    throw Error(Errc::MalformedFormula, "situation must be a conjunction: " + entish::print(situation));
  }
  MapDelta delta;
  std::map<std::pair<std::string, std::string>, ontology::Value> attrs;
  std::set<ontology::RelationInstance> added;
  for (const auto& atom : branches.front()) {
    if (const auto* a = std::get_if<entish::AttributeAtom>(&atom)) {
      if (a->cmp != entish::Comparator::Eq) continue;
      const auto& obj = map.at(a->object.name);
      attrs[{obj.id, a->path}] = coerce(a->value, ont.find_attribute(obj.type_name, a->path));
    } else {
      const auto& r = std::get<entish::RelationAtom>(atom);
      ontology::RelationInstance inst{r.relation, {}};
      for (const auto& t : r.terms) {
        if (!map.contains(t.name)) throw Error(Errc::UnknownObject, t.name);
        inst.args.push_back(t.name);
      }
      added.insert(std::move(inst));
    }
  }
  for (const auto& [key, value] : attrs) {
    const auto* cur = map.attribute(key.first, key.second);
    if (cur != nullptr && *cur == value) continue;
    delta.set_attributes.push_back({key.first, key.second, value, std::nullopt});
  }
  std::set<ontology::RelationInstance> removed;
  for (const auto& [owner, inst] : map.relations()) {
    if (added.contains(inst)) continue;
    for (const auto& a : added) {
      if (a.name == inst.name && !a.args.empty() && !inst.args.empty() && a.args.front() == inst.args.front()) {
        removed.insert(inst);
      }
    }
  }
  for (const auto& inst : removed) delta.remove_relations.push_back({"", inst});
  for (const auto& inst : added) {
    if (!map.has_relation(inst)) delta.add_relations.push_back({"", inst});
  }
  return ontology::record_priors(map, std::move(delta));
}

nlohmann::json map_to_json(const WorldMap& map) {
  return {{"version", map.version()}, {"root", ontology::object_to_json(map.root())}};
}

WorldMap map_from_json(const nlohmann::json& j) {
  try {
    return WorldMap(ontology::object_from_json(j.at("root")), j.at("version").get<std::uint64_t>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::MalformedDocument, e.what());
  }
}

Repository::Repository(ontology::Ontology ont, WorldMap initial, std::filesystem::path state_dir,
                       std::size_t log_capacity)
    : ont_(std::move(ont)), dir_(std::move(state_dir)), capacity_(log_capacity), base_(std::move(initial)) {
  if (!dir_.empty()) {
    std::filesystem::create_directories(dir_);
    const auto snap = dir_ / "snapshot.json";
    if (std::filesystem::exists(snap)) {
      std::ifstream in(snap);
      auto j = nlohmann::json::parse(in, nullptr, false);
      if (j.is_discarded()) throw Error(Errc::IoError, snap.string() + " is unreadable");
      base_ = map_from_json(j);
    }
  }
  current_ = base_;
  if (dir_.empty()) return;
  std::ifstream in(dir_ / "deltas.jsonl");
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    // A torn final line from a crash mid-append is ignored.
    if (j.is_discarded()) break;
    LoggedDelta entry{j.at("version").get<std::uint64_t>(), ontology::delta_from_json(j.at("delta"))};
    if (entry.version <= current_.version()) continue;
    current_ = ontology::apply_delta(current_, entry.delta, ont_);
    log_.push_back(std::move(entry));
    ++file_entries_;
  }
  trim_locked();
  if (!std::filesystem::exists(dir_ / "snapshot.json")) write_snapshot_locked();
}

WorldMap Repository::snapshot() const {
  std::lock_guard lock(mu_);
  return current_;
}

WorldMap Repository::base() const {
  std::lock_guard lock(mu_);
  return base_;
}

std::uint64_t Repository::version() const {
  std::lock_guard lock(mu_);
  return current_.version();
}

void Repository::write_snapshot_locked() const {
  const auto tmp = dir_ / "snapshot.json.tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error(Errc::IoError, "cannot write " + tmp.string());
    out << map_to_json(base_).dump() << "\n";
  }
  std::filesystem::rename(tmp, dir_ / "snapshot.json");
}

void Repository::trim_locked() {
  while (log_.size() > capacity_) {
    base_ = ontology::apply_delta(base_, log_.front().delta, ont_);
    log_.pop_front();
  }
}

void Repository::persist_locked(const LoggedDelta& entry) {
  if (dir_.empty()) return;
  const auto path = dir_ / "deltas.jsonl";
  auto line = [](const LoggedDelta& e) {
    return nlohmann::json{{"version", e.version}, {"delta", ontology::delta_to_json(e.delta)}}.dump() + "\n";
  };
  if (file_entries_ >= 2 * capacity_) {
    write_snapshot_locked();
    std::ofstream out(path, std::ios::trunc);
    for (const auto& e : log_) out << line(e);
    file_entries_ = log_.size();
    return;
  }
  std::ofstream out(path, std::ios::app);
  if (!out) throw Error(Errc::IoError, "cannot append to " + path.string());
  out << line(entry);
  ++file_entries_;
}

std::uint64_t Repository::commit(const MapDelta& delta, std::optional<std::uint64_t> expected_version) {
  std::lock_guard lock(mu_);
  if (expected_version && *expected_version != current_.version()) {
    throw Error(Errc::VersionConflict, "expected version " + std::to_string(*expected_version) + ", current is " +
                                           std::to_string(current_.version()));
  }
  auto recorded = ontology::record_priors(current_, delta);
  auto next = ontology::apply_delta(current_, recorded, ont_);
  current_ = std::move(next);
  log_.push_back({current_.version(), std::move(recorded)});
  trim_locked();
  persist_locked(log_.back());
  for (const auto& [id, fn] : listeners_) fn(log_.back());
  return current_.version();
}

void Repository::check_replayable_locked(std::uint64_t from_version) const {
  if (from_version > current_.version()) {
    throw Error(Errc::VersionTooOld, "version " + std::to_string(from_version) + " is ahead of " +
                                         std::to_string(current_.version()));
  }
  if (from_version < base_.version()) {
    throw Error(Errc::VersionTooOld, "deltas before version " + std::to_string(base_.version()) +
                                         " are no longer retained");
  }
}

std::vector<LoggedDelta> Repository::log_since(std::uint64_t from_version) const {
  std::lock_guard lock(mu_);
  check_replayable_locked(from_version);
  std::vector<LoggedDelta> out;
  for (const auto& e : log_) {
    if (e.version > from_version) out.push_back(e);
  }
  return out;
}

Repository::SubscriptionId Repository::subscribe(std::uint64_t from_version, Listener listener) {
  std::lock_guard lock(mu_);
  check_replayable_locked(from_version);
  for (const auto& e : log_) {
    if (e.version > from_version) listener(e);
  }
  const auto id = next_sub_++;
  listeners_.emplace(id, std::move(listener));
  return id;
}

void Repository::unsubscribe(SubscriptionId id) {
  std::lock_guard lock(mu_);
  listeners_.erase(id);
}

frp::Envelope Repository::handle(const frp::Envelope& req) {
  frp::Response res;
  try {
    if (std::holds_alternative<frp::GetSnapshot>(req.body)) {
      res.payload = map_to_json(snapshot());
    } else if (const auto* c = std::get_if<frp::Commit>(&req.body)) {
      res.payload = {{"version", commit(ontology::delta_from_json(c->delta), c->expected_version)}};
    } else if (const auto* s = std::get_if<frp::Subscribe>(&req.body)) {
      nlohmann::json events = nlohmann::json::array();
      for (const auto& e : log_since(s->from_version)) {
        events.push_back({{"version", e.version}, {"delta", ontology::delta_to_json(e.delta)}});
      }
      res.payload = {{"version", version()}, {"events", events}};
    } else {
      throw Error(Errc::UnknownMessageType,
                  "repository does not serve " + std::string(frp::to_string(req.header.type)));
    }
  } catch (const Error& e) {
    res.ok = false;
    res.error = std::string(to_string(e.code()));
    res.message = e.detail();
  }
  return reply_to(req, std::move(res));
}

WorldMap RemoteRepository::snapshot() const {
  const auto id = ids_.next();
  auto reply = net::request(ep_, frp::make_envelope(address_, "repository", id, id, frp::GetSnapshot{}));
  return map_from_json(std::get<frp::Response>(reply.body).payload);
}

std::uint64_t RemoteRepository::commit(const MapDelta& delta, std::optional<std::uint64_t> expected_version) {
  // The wire format always carries an expected version; without one, retry
  // against the latest map.
  for (int attempt = 0;; ++attempt) {
    const auto expected = expected_version ? *expected_version : snapshot().version();
    const auto id = ids_.next();
    try {
      auto reply = net::request(ep_, frp::make_envelope(address_, "repository", id, id,
                                                        frp::Commit{ontology::delta_to_json(delta), expected}));
      return std::get<frp::Response>(reply.body).payload.at("version").get<std::uint64_t>();
    } catch (const Error& e) {
      if (expected_version || e.code() != Errc::VersionConflict || attempt >= 8) throw;
    }
  }
}

}  // namespace somrs::repository
