#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "somrs/entish.hpp"
#include "somrs/frp.hpp"
#include "somrs/net.hpp"
#include "somrs/ontology.hpp"

namespace somrs::registry {

enum class ServiceKind { Physical, Cognitive, Software };

std::string_view to_string(ServiceKind k);
/// Throws MalformedTemplate.
ServiceKind parse_service_kind(std::string_view text);

struct ServiceAttributes {
  double operation_range = 0;
  double cost = 0;
  double average_time = 0;
  bool operator==(const ServiceAttributes&) const = default;
};

struct ServiceRecord {
  std::string service_id;
  std::string type_name;
  ServiceKind kind = ServiceKind::Physical;
  entish::Formula precondition;
  entish::Formula effect;
  ServiceAttributes attributes;
  std::string manager_address;
  bool operator==(const ServiceRecord&) const = default;
};

nlohmann::json to_json(const ServiceRecord& r);
/// Throws MalformedTemplate.
ServiceRecord record_from_json(const nlohmann::json& j);

/// True when some atom of `effect_template` unifies with some atom of `goal`.
bool effect_matches(const entish::Formula& effect_template, const entish::Formula& goal);

/// Read access used by the task manager; implemented locally and remotely.
class Directory {
 public:
  virtual ~Directory() = default;
  /// Records whose effect template matches `goal_effect`, sorted by id. A
  /// goal of `true` lists every record. Throws MalformedFormula.
  virtual std::vector<ServiceRecord> discover(const entish::Formula& goal_effect,
                                              const std::optional<entish::Formula>& precondition = std::nullopt,
                                              std::optional<ServiceKind> kind = std::nullopt) const = 0;
};

class Registry : public Directory {
 public:
  /// With an ontology, templates and queries are type-checked against it.
  /// With a snapshot path, existing records load from it and every mutation
  /// rewrites it.
  explicit Registry(std::optional<ontology::Ontology> ont = std::nullopt, std::filesystem::path snapshot = {});

  /// Returns the service id. Throws DuplicateServiceId, MalformedTemplate.
  std::string publish(ServiceRecord rec);
  /// Throws UnknownService.
  void unpublish(const std::string& service_id);

  std::vector<ServiceRecord> discover(const entish::Formula& goal_effect,
                                      const std::optional<entish::Formula>& precondition = std::nullopt,
                                      std::optional<ServiceKind> kind = std::nullopt) const override;
  std::optional<ServiceRecord> find(const std::string& service_id) const;
  std::size_t size() const;

  /// Serves Publish, Unpublish and Discover requests; errors become failed
  /// Responses.
  frp::Envelope handle(const frp::Envelope& request);

 private:
  void save_locked() const;

  std::optional<ontology::Ontology> ont_;
  std::filesystem::path snapshot_;
  mutable std::shared_mutex mu_;
  std::map<std::string, ServiceRecord> records_;
};

/// Directory backed by a registry in another process.
class RemoteRegistry : public Directory {
 public:
  explicit RemoteRegistry(net::Endpoint ep, std::string client_address = "registry-client")
      : ep_(std::move(ep)), address_(std::move(client_address)), ids_(address_) {}

  std::vector<ServiceRecord> discover(const entish::Formula& goal_effect,
                                      const std::optional<entish::Formula>& precondition = std::nullopt,
                                      std::optional<ServiceKind> kind = std::nullopt) const override;
  std::string publish(const ServiceRecord& rec);
  void unpublish(const std::string& service_id);

 private:
  net::Endpoint ep_;
  std::string address_;
  mutable net::IdGenerator ids_;
};

/// Standard templates for the service types used by the scenarios.
ServiceRecord transfer_object_template(std::string service_id, std::string manager_address);
ServiceRecord recognize_template(std::string service_id, std::string manager_address);

}  // namespace somrs::registry
