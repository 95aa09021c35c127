#include "somrs/registry.hpp"

#include <fstream>
#include <mutex>

#include "somrs/error.hpp"

namespace somrs::registry {

std::string_view to_string(ServiceKind k) {
  switch (k) {
    case ServiceKind::Physical:
      return "physical";
    case ServiceKind::Cognitive:
      return "cognitive";
    case ServiceKind::Software:
      return "software";
  }
  return "?";
}

ServiceKind parse_service_kind(std::string_view text) {
  if (text == "physical") return ServiceKind::Physical;
  if (text == "cognitive") return ServiceKind::Cognitive;
  if (text == "software") return ServiceKind::Software;
  throw Error(Errc::MalformedTemplate, "unknown service kind " + std::string(text));
}

nlohmann::json to_json(const ServiceRecord& r) {
  return {{"serviceId", r.service_id},
          {"serviceType", r.type_name},
          {"kind", to_string(r.kind)},
          {"precondition", entish::print(r.precondition)},
          {"effect", entish::print(r.effect)},
          {"attributes",
           {{"operationRange", r.attributes.operation_range},
            {"cost", r.attributes.cost},
            {"averageTime", r.attributes.average_time}}},
          {"managerAddress", r.manager_address}};
}

ServiceRecord record_from_json(const nlohmann::json& j) {
  try {
    ServiceRecord r;
    r.service_id = j.at("serviceId").get<std::string>();
    r.type_name = j.at("serviceType").get<std::string>();
    r.kind = parse_service_kind(j.at("kind").get<std::string>());
    r.precondition = entish::parse(j.at("precondition").get<std::string>());
    r.effect = entish::parse(j.at("effect").get<std::string>());
    if (j.contains("attributes")) {
      const auto& a = j.at("attributes");
      r.attributes.operation_range = a.value("operationRange", 0.0);
      r.attributes.cost = a.value("cost", 0.0);
      r.attributes.average_time = a.value("averageTime", 0.0);
    }
    r.manager_address = j.value("managerAddress", "");
    return r;
  } catch (const Error& e) {
    if (e.code() == Errc::MalformedTemplate) throw;
    throw Error(Errc::MalformedTemplate, e.what());
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::MalformedTemplate, e.what());
  }
}

bool effect_matches(const entish::Formula& effect_template, const entish::Formula& goal) {
  const auto goal_atoms = entish::atoms(goal);
  for (const auto& p : entish::atoms(effect_template)) {
    for (const auto& g : goal_atoms) {
      if (entish::unify_atoms(p, g)) return true;
    }
  }
  return false;
}

namespace {

std::vector<ServiceRecord> select(const std::map<std::string, ServiceRecord>& records, const entish::Formula& goal,
                                  std::optional<ServiceKind> kind) {
  std::vector<ServiceRecord> out;
  for (const auto& [id, rec] : records) {
    if (kind && rec.kind != *kind) continue;
    if (goal.is_true() || effect_matches(rec.effect, goal)) out.push_back(rec);
  }
  return out;
}

frp::Envelope reply_to(const frp::Envelope& req, frp::Response body) {
  return frp::make_envelope(req.header.recipient, req.header.sender, req.header.message_id,
                            req.header.recipient + "-re-" + req.header.message_id, std::move(body));
}

}  // namespace

Registry::Registry(std::optional<ontology::Ontology> ont, std::filesystem::path snapshot)
    : ont_(std::move(ont)), snapshot_(std::move(snapshot)) {
  if (snapshot_.empty() || !std::filesystem::exists(snapshot_)) return;
  std::ifstream in(snapshot_);
  nlohmann::json doc = nlohmann::json::parse(in, nullptr, false);
  if (doc.is_discarded() || !doc.is_array()) {
    throw Error(Errc::IoError, "registry snapshot " + snapshot_.string() + " is unreadable");
  }
  for (const auto& j : doc) {
    auto rec = record_from_json(j);
    records_.emplace(rec.service_id, std::move(rec));
  }
}

void Registry::save_locked() const {
  if (snapshot_.empty()) return;
  nlohmann::json doc = nlohmann::json::array();
  for (const auto& [id, rec] : records_) doc.push_back(to_json(rec));
  const auto tmp = snapshot_.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error(Errc::IoError, "cannot write " + tmp);
    out << doc.dump(2) << "\n";
  }
  std::filesystem::rename(tmp, snapshot_);
}

std::string Registry::publish(ServiceRecord rec) {
  if (rec.service_id.empty()) throw Error(Errc::MalformedTemplate, "serviceId must be nonempty");
  if (rec.type_name.empty()) throw Error(Errc::MalformedTemplate, rec.service_id + ": serviceType must be nonempty");
  const auto& a = rec.attributes;
  if (a.operation_range < 0 || a.cost < 0 || a.average_time < 0) {
    throw Error(Errc::MalformedTemplate, rec.service_id + ": attributes must be nonnegative");
  }
  if (ont_) {
    try {
      entish::check(rec.precondition, *ont_);
      entish::check(rec.effect, *ont_);
    } catch (const Error& e) {
      throw Error(Errc::MalformedTemplate, rec.service_id + ": " + e.what());
    }
  }
  std::unique_lock lock(mu_);
  if (records_.contains(rec.service_id)) throw Error(Errc::DuplicateServiceId, rec.service_id);
  auto id = rec.service_id;
  records_.emplace(id, std::move(rec));
  save_locked();
  return id;
}

void Registry::unpublish(const std::string& service_id) {
  std::unique_lock lock(mu_);
  if (records_.erase(service_id) == 0) throw Error(Errc::UnknownService, service_id);
  save_locked();
}

std::vector<ServiceRecord> Registry::discover(const entish::Formula& goal_effect,
                                              const std::optional<entish::Formula>& precondition,
                                              std::optional<ServiceKind> kind) const {
  if (ont_) {
    try {
      entish::check(goal_effect, *ont_);
      if (precondition) entish::check(*precondition, *ont_);
    } catch (const Error& e) {
      throw Error(Errc::MalformedFormula, e.what());
    }
  }
  std::shared_lock lock(mu_);
  return select(records_, goal_effect, kind);
}

std::optional<ServiceRecord> Registry::find(const std::string& service_id) const {
  std::shared_lock lock(mu_);
  auto it = records_.find(service_id);
  if (it == records_.end()) return std::nullopt;
  return it->second;
}

std::size_t Registry::size() const {
  std::shared_lock lock(mu_);
  return records_.size();
}

frp::Envelope Registry::handle(const frp::Envelope& req) {
  frp::Response res;
  try {
    if (const auto* p = std::get_if<frp::Publish>(&req.body)) {
      res.payload = {{"serviceId", publish(record_from_json(p->record))}};
    } else if (const auto* u = std::get_if<frp::Unpublish>(&req.body)) {
      unpublish(u->service_id);
      res.payload = {{"serviceId", u->service_id}};
    } else if (const auto* d = std::get_if<frp::Discover>(&req.body)) {
      std::optional<ServiceKind> kind;
      if (d->kind) kind = parse_service_kind(*d->kind);
      nlohmann::json list = nlohmann::json::array();
      for (const auto& r : discover(d->effect, d->precondition, kind)) list.push_back(to_json(r));
      res.payload = {{"records", list}};
    } else {
      throw Error(Errc::UnknownMessageType, "registry does not serve " + std::string(frp::to_string(req.header.type)));
    }
  } catch (const Error& e) {
    res.ok = false;
    res.error = std::string(to_string(e.code()));
    res.message = e.detail();
  }
  return reply_to(req, std::move(res));
}

std::vector<ServiceRecord> RemoteRegistry::discover(const entish::Formula& goal_effect,
                                                    const std::optional<entish::Formula>& precondition,
                                                    std::optional<ServiceKind> kind) const {
  frp::Discover body{goal_effect, precondition, std::nullopt};
  if (kind) body.kind = std::string(to_string(*kind));
  const auto id = ids_.next();
  auto reply = net::request(ep_, frp::make_envelope(address_, "registry", id, id, body));
  std::vector<ServiceRecord> out;
  for (const auto& j : std::get<frp::Response>(reply.body).payload.at("records")) out.push_back(record_from_json(j));
  return out;
}

std::string RemoteRegistry::publish(const ServiceRecord& rec) {
  const auto id = ids_.next();
  auto reply = net::request(ep_, frp::make_envelope(address_, "registry", id, id, frp::Publish{to_json(rec)}));
  return std::get<frp::Response>(reply.body).payload.at("serviceId").get<std::string>();
}

void RemoteRegistry::unpublish(const std::string& service_id) {
  const auto id = ids_.next();
  net::request(ep_, frp::make_envelope(address_, "registry", id, id, frp::Unpublish{service_id}));
}

ServiceRecord transfer_object_template(std::string service_id, std::string manager_address) {
  ServiceRecord r;
  r.service_id = std::move(service_id);
  r.type_name = "TransferObject";
  r.kind = ServiceKind::Physical;
  r.precondition = entish::parse("?Obj isOn ?From");
  r.effect = entish::parse("?Obj isOn ?To");
  r.manager_address = std::move(manager_address);
  return r;
}

ServiceRecord recognize_template(std::string service_id, std::string manager_address) {
  ServiceRecord r;
  r.service_id = std::move(service_id);
  r.type_name = "Recognize";
  r.kind = ServiceKind::Cognitive;
  r.precondition = entish::True{};
  r.effect = entish::parse("?Obj isObservedBy ?Observer");
  r.manager_address = std::move(manager_address);
  return r;
}

}  // namespace somrs::registry
