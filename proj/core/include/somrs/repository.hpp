#pragma once

#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>

#include "somrs/entish.hpp"
#include "somrs/frp.hpp"
#include "somrs/net.hpp"
#include "somrs/ontology.hpp"

namespace somrs::repository {

using ontology::MapDelta;
using ontology::WorldMap;

/// A committed delta, with priors recorded, and the version it produced.
struct LoggedDelta {
  std::uint64_t version = 0;
  MapDelta delta;
};

/// Turns a ground conjunctive situation into a delta against `map`.
/// Attribute equalities set values; a relation atom adds the instance and
/// drops other instances of the same relation with the same first argument.
/// Comparisons other than `=` carry no state and are skipped. Throws
/// MalformedFormula for variables or disjunctions, UnknownObject.
MapDelta situation_to_delta(const entish::Formula& situation, const WorldMap& map, const ontology::Ontology& ont);

/// Map access used by the task manager; implemented locally and remotely.
class Store {
 public:
  virtual ~Store() = default;
  virtual const ontology::Ontology& ontology() const = 0;
  virtual WorldMap snapshot() const = 0;
  /// Returns the new version. Throws VersionConflict when `expected_version`
  /// is given and differs from the current version.
  virtual std::uint64_t commit(const MapDelta& delta, std::optional<std::uint64_t> expected_version = std::nullopt) = 0;
};

class Repository : public Store {
 public:
  using Listener = std::function<void(const LoggedDelta&)>;
  using SubscriptionId = std::uint64_t;

  /// With a state directory, a previously saved map and delta log there take
  /// precedence over `initial`, and every commit is persisted.
  Repository(ontology::Ontology ont, WorldMap initial, std::filesystem::path state_dir = {},
             std::size_t log_capacity = 10000);

  const ontology::Ontology& ontology() const override { return ont_; }
  WorldMap snapshot() const override;
  std::uint64_t version() const;
  std::uint64_t commit(const MapDelta& delta, std::optional<std::uint64_t> expected_version = std::nullopt) override;

  /// Replays every delta after `from_version`, then streams new ones in
  /// version order. Listeners run under the repository lock and must not
  /// call back into it. Throws VersionTooOld.
  SubscriptionId subscribe(std::uint64_t from_version, Listener listener);
  void unsubscribe(SubscriptionId id);

  /// Retained deltas with version > `from_version`. Throws VersionTooOld.
  std::vector<LoggedDelta> log_since(std::uint64_t from_version) const;
  /// The map the log starts from; replaying log_since(base_version()) on it
  /// reproduces snapshot().
  WorldMap base() const;

  /// Serves GetSnapshot, Commit and Subscribe (replay only) requests.
  frp::Envelope handle(const frp::Envelope& request);

 private:
  void check_replayable_locked(std::uint64_t from_version) const;
  void trim_locked();
  void persist_locked(const LoggedDelta& entry);
  void write_snapshot_locked() const;

  ontology::Ontology ont_;
  std::filesystem::path dir_;
  std::size_t capacity_;
  mutable std::mutex mu_;
  WorldMap base_;
  WorldMap current_;
  std::deque<LoggedDelta> log_;
  std::map<SubscriptionId, Listener> listeners_;
  SubscriptionId next_sub_ = 1;
  std::size_t file_entries_ = 0;
};

nlohmann::json map_to_json(const WorldMap& map);
WorldMap map_from_json(const nlohmann::json& j);

/// Store backed by a repository in another process.
class RemoteRepository : public Store {
 public:
  RemoteRepository(net::Endpoint ep, ontology::Ontology ont, std::string client_address = "repository-client")
      : ep_(std::move(ep)), ont_(std::move(ont)), address_(std::move(client_address)), ids_(address_) {}

  const ontology::Ontology& ontology() const override { return ont_; }
  WorldMap snapshot() const override;
  std::uint64_t commit(const MapDelta& delta, std::optional<std::uint64_t> expected_version = std::nullopt) override;

 private:
  net::Endpoint ep_;
  ontology::Ontology ont_;
  std::string address_;
  mutable net::IdGenerator ids_;
};

}  // namespace somrs::repository
