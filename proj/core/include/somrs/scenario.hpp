#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "somrs/net.hpp"
#include "somrs/ontology.hpp"
#include "somrs/registry.hpp"
#include "somrs/repository.hpp"
#include "somrs/simworld.hpp"
#include "somrs/taskman.hpp"
#include "somrs/world_io.hpp"

/// Whole-system configuration and the in-process scenario runner.
namespace somrs::scenario {

struct ServeConfig {
  std::optional<std::string> registry;    // FRP endpoints, host:port
  std::optional<std::string> repository;
  std::optional<std::string> services;
  std::optional<std::string> taskman;
  std::optional<std::string> http;
  std::filesystem::path state_dir;
  double time_scale = 1;  // simulated seconds per wall second
};

struct Config {
  std::string name = "custom";
  std::filesystem::path world;
  std::uint64_t seed = 1;
  double latency = 0.01;
  double jitter = 0;
  std::optional<std::string> precondition;
  std::string effect;
  std::optional<taskman::Status> expect;  // defaults to Completed
  double time_limit = 3600;
  taskman::Config taskman;
  std::vector<sim::ServiceConfig> services;
  std::vector<sim::Fault> faults;
  ServeConfig serve;
};

/// Relative paths resolve against `base_dir`. Throws BadConfig.
Config parse_config(const std::string& yaml, const std::filesystem::path& base_dir);
Config load_config(const std::filesystem::path& path);
/// Ports given in SOMRS_REGISTRY_PORT, SOMRS_REPOSITORY_PORT,
/// SOMRS_SERVICES_PORT, SOMRS_TASKMAN_PORT and SOMRS_HTTP_PORT replace
/// those of the configured endpoints.
void apply_port_overrides(ServeConfig& serve);

struct TraceLine {
  double time = 0;
  std::string from;
  std::string to;
  std::string session_id;
  std::string type;
};

/// One tab-separated line per envelope: time, from->to, session, type.
std::string format_trace(const std::vector<TraceLine>& trace);
/// Session messages of a transaction as seen by the task manager.
std::vector<TraceLine> trace_of(const taskman::Transaction& t, const std::string& tm_address);

struct RunResult {
  std::string transaction_id;
  taskman::Status status = taskman::Status::Planning;
  std::string reason;
  bool expected = false;  // status matches the configured expectation
  taskman::Transaction transaction;
  std::vector<TraceLine> trace;
  ontology::Ontology ontology;
  ontology::WorldMap initial_map;
  ontology::WorldMap final_map;     // repository
  ontology::WorldMap ground_truth;  // simulator
  std::vector<repository::LoggedDelta> log;
  /// Final participant-side session states, keyed by service then session.
  std::map<std::string, std::map<std::string, frp::SessionState>> service_sessions;
  std::size_t service_violations = 0;
  double sim_time = 0;
};

/// Every component wired in-process over a loopback transport. The clock is
/// the owned simulated loop unless another loop is given. Nothing is
/// submitted on construction.
class System {
 public:
  explicit System(const Config& cfg, net::EventLoop* external = nullptr);
  System(const System&) = delete;
  System& operator=(const System&) = delete;

  /// Parses the configured task and submits it. Throws BadConfig.
  std::string submit_task();
  /// Runs until every transaction is terminal or the time limit passes,
  /// then lets in-flight messages settle for a simulated second. Only for
  /// the owned simulated loop.
  void run_to_end();
  RunResult result(const std::string& transaction_id) const;

  Config cfg;
  ontology::WorldDocument doc;
  net::SimLoop loop;
  net::EventLoop& clock;
  net::LoopbackTransport bus;
  registry::Registry registry;
  repository::Repository repository;
  sim::SimWorld world;
  std::vector<std::unique_ptr<sim::ServiceManager>> managers;
  taskman::TaskManager tm;
};

/// Runs every component in-process on a simulated clock until the task's
/// transaction is terminal, then lets in-flight messages settle.
RunResult run(const Config& cfg);

}  // namespace somrs::scenario
