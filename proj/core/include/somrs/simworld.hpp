#pragma once

#include <array>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "somrs/entish.hpp"
#include "somrs/frp.hpp"
#include "somrs/net.hpp"
#include "somrs/ontology.hpp"
#include "somrs/registry.hpp"

namespace somrs::sim {

struct Vec3 {
  double x = 0, y = 0, z = 0;
  bool operator==(const Vec3&) const = default;
};

enum class FaultKind { DriveFailure, CommLoss };
std::string_view to_string(FaultKind k);

/// Axis-aligned box; missing bounds are unbounded.
struct Region {
  std::array<std::optional<double>, 3> min{};
  std::array<std::optional<double>, 3> max{};
  bool contains(const Vec3& p) const;
};

/// Fires at `at_time`, or when the robot enters `region` (while carrying,
/// if `while_carrying`), or at the first grip when only `while_carrying` is set.
struct FaultTrigger {
  std::optional<double> at_time;
  std::optional<Region> region;
  bool while_carrying = false;
};

struct Fault {
  std::string robot;
  FaultKind kind = FaultKind::DriveFailure;
  FaultTrigger trigger;
};

struct WorldEvent {
  enum class Kind { Arrival, Grip, Release, Place, Fault, Observe };
  double time = 0;
  Kind kind = Kind::Arrival;
  std::string robot;
  std::string object;
  std::string detail;
};
std::string_view to_string(WorldEvent::Kind k);

/// What a robot reports when a behavior ends.
struct Outcome {
  bool ok = true;
  entish::Formula situation;
  std::string reason;
};
using OutcomeHandler = std::function<void(const Outcome&)>;

struct RobotView {
  std::string id;
  Vec3 position;
  double speed = 0;
  double gripper_range = 0;
  std::vector<std::string> capabilities;
  std::optional<std::string> carried;
  bool drive_ok = true;
  bool comm_ok = true;
  bool busy = false;
};

/// Ground truth of the simulated lab. Robots are the objects carrying a
/// `Capabilities` attribute; everything with Position attributes has a pose.
class SimWorld {
 public:
  /// Throws InvalidWorld.
  static SimWorld load(const ontology::WorldMap& map, const ontology::Ontology& ont, std::vector<Fault> faults = {});

  /// Current ground truth, positions included.
  ontology::WorldMap state() const;
  const ontology::Ontology& ontology() const { return ont_; }
  double now() const { return now_; }
  std::vector<std::string> robots() const;
  RobotView robot(const std::string& id) const;
  Vec3 position(const std::string& object_id) const;

  /// Advances the clock by dt > 0.
  std::vector<WorldEvent> step(double dt);
  std::vector<WorldEvent> advance_to(double t);
  /// Earliest pending internal event, if any.
  std::optional<double> next_event_time() const;

  /// Approach, grip, carry, place. Throws MissingCapability, ObjectMissing.
  /// Gripper and drive problems are reported through `done`.
  void execute_transfer(const std::string& robot, const std::string& object, const std::string& destination,
                        OutcomeHandler done);
  /// Moves `object` to a bare position (compensation without a support).
  void execute_move_to(const std::string& robot, const std::string& object, const Vec3& target,
                       OutcomeHandler done);
  /// Travels to the first queried object and reports the ground truth of
  /// every object named in `query`. Throws MissingCapability,
  /// UnknownObjectInQuery.
  void execute_recognize(const std::string& robot, const entish::Formula& query, OutcomeHandler done);
  /// Stops the current behavior and releases any carried object in place.
  void halt(const std::string& robot);

  /// Ground position and support relations of `object`.
  entish::Formula describe(const std::string& object) const;

  /// Drives the world from an event loop: commands catch the clock up first
  /// and internal events are scheduled on the loop.
  void attach(net::EventLoop& loop);
  void set_event_listener(std::function<void(const WorldEvent&)> fn) { listener_ = std::move(fn); }

 private:
  enum class Phase { Idle, Approach, Carry, Travel, Observe };
  struct Robot {
    std::string id;
    Vec3 pos;
    double speed = 1;
    double gripper = 0;
    std::vector<std::string> caps;
    std::optional<std::string> carried;
    bool drive_ok = true;
    bool comm_ok = true;
    Phase phase = Phase::Idle;
    std::optional<Vec3> waypoint;
    std::string object;       // behavior subject
    std::string destination;  // support to place on, empty for bare target
    Vec3 target;              // bare target or observation point
    entish::Formula query;
    OutcomeHandler done;
  };
  struct PendingFault {
    Fault fault;
    bool fired = false;
  };

  SimWorld() = default;
  Robot& robot_ref(const std::string& id);
  const Robot* find_robot(const std::string& id) const;
  bool has_pose(const std::string& id) const;
  void require_capability(const Robot& r, const std::string& cap) const;
  double arrival_time(const Robot& r) const;
  std::optional<double> fault_time(const PendingFault& f) const;
  void move_all(double t);
  void fire(PendingFault& f, std::vector<WorldEvent>& ev);
  void arrive(Robot& r, std::vector<WorldEvent>& ev);
  void finish(Robot& r, Outcome o);
  void release(Robot& r, std::vector<WorldEvent>& ev);
  void set_pose(const std::string& id, const Vec3& p);
  void catch_up();
  void reschedule();
  void emit(std::vector<WorldEvent>& ev, WorldEvent e);

  ontology::Ontology ont_;
  ontology::WorldMap map_;
  std::map<std::string, Robot> robots_;
  std::vector<PendingFault> faults_;
  double now_ = 0;
  net::EventLoop* loop_ = nullptr;
  net::TimerId timer_ = 0;
  bool in_advance_ = false;
  std::function<void(const WorldEvent&)> listener_;
  std::vector<std::function<void()>> deferred_;
};

/// Static per-service configuration of a Service Manager.
struct ServiceConfig {
  std::string service_id;
  std::string type_name;  // TransferObject or Recognize
  std::string robot;
  double price = 0;
  double max_time = 1;
  double operation_range = 0;  // 0 means unlimited
  bool refuse_all = false;
  std::string address;  // defaults to service_id
};

/// FRP participant for one service, translating Execute into robot
/// behaviors. Talks to its robot only through SimWorld's behavior API.
class ServiceManager {
 public:
  ServiceManager(ServiceConfig cfg, SimWorld& world, net::Transport& transport);
  ~ServiceManager();
  ServiceManager(const ServiceManager&) = delete;
  ServiceManager& operator=(const ServiceManager&) = delete;

  const ServiceConfig& config() const { return cfg_; }
  const std::string& address() const { return cfg_.address; }
  registry::ServiceRecord record() const;
  const std::map<std::string, frp::Session>& sessions() const { return sessions_; }
  /// Protocol violations observed on incoming messages.
  std::size_t violations() const { return violations_; }

 private:
  struct Context {
    std::string coordinator;
    frp::Formula precondition;
    frp::Formula effect;
    std::string object;
    std::string destination;
    std::uint64_t epoch = 0;  // invalidates outcomes of a stopped behavior
  };

  void on_message(const frp::Envelope& e);
  void reply(const frp::Envelope& to, frp::Body body);
  std::optional<std::string> infeasible(const Context& c) const;
  void compensate(const std::string& session, const frp::Formula& target);

  ServiceConfig cfg_;
  SimWorld& world_;
  net::Transport& transport_;
  net::IdGenerator ids_;
  std::map<std::string, frp::Session> sessions_;
  std::map<std::string, Context> contexts_;
  std::size_t violations_ = 0;
  std::uint64_t epoch_ = 0;
};

registry::ServiceRecord record_for(const ServiceConfig& cfg);

}  // namespace somrs::sim
