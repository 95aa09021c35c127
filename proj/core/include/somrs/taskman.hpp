#pragma once

#include <condition_variable>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "somrs/entish.hpp"
#include "somrs/frp.hpp"
#include "somrs/net.hpp"
#include "somrs/planner.hpp"
#include "somrs/registry.hpp"
#include "somrs/repository.hpp"

namespace somrs::taskman {

enum class Status { Planning, Arranging, Executing, Recovering, Compensating, Completed, Aborted, Cancelled };
std::string_view to_string(Status s);
bool is_terminal(Status s);

struct SelectionPolicy {
  double price_weight = 1;
  double time_weight = 0;
};

struct RecoveryPolicy {
  int max_replans = 1;
  int max_substitutions_per_node = 2;
  bool cognitive_fallback = true;
};

struct Config {
  std::string address = "TM";
  double quote_timeout = 5;
  double heartbeat_timeout = 10;  // added to a service's maxTime
  double stop_grace = 1;          // wait after Stop before compensating
  SelectionPolicy selection;
  RecoveryPolicy recovery;
  planner::Options planning;
};

/// Throws BadConfig.
void validate(const Config& cfg);

struct Quote {
  std::string service_id;
  double price = 0;
  double max_time = 0;
};

/// Lowest priceWeight*price + timeWeight*maxTime, ties to the lower service
/// id. Empty when there are no quotes.
std::optional<Quote> select_winner(const std::vector<Quote>& quotes, const SelectionPolicy& policy);

struct Task {
  std::optional<entish::Formula> precondition;
  entish::Formula effect;
};

/// One entry of a transaction's append-only history.
struct Event {
  std::uint64_t seq = 0;
  double timestamp = 0;
  std::string direction;  // sent, received or internal
  std::string message_type;
  std::string session_id;
  std::string peer;
  std::string summary;
  std::optional<frp::Envelope> envelope;
};
nlohmann::json to_json(const Event& e);

enum class NodeState { Pending, Arranging, Arranged, Executing, Done, Failed, Superseded };
std::string_view to_string(NodeState s);

struct Node {
  std::size_t id = 0;
  std::string type_name;
  entish::Formula precondition;  // sent with Arrange and Execute
  entish::Formula effect;
  std::vector<std::size_t> after;  // node ids that must be Done first
  NodeState state = NodeState::Pending;
  std::optional<std::size_t> probe_for;  // recognition helper for that node
  std::string service_id;                // chosen participant
  std::string session_id;
  double max_time = 0;
  std::set<std::string> excluded;
  int substitutions = 0;
  std::optional<entish::Formula> result;
  entish::Formula prior;  // ground situation before execution, the compensation target
  // arrangement in progress
  std::set<std::string> awaiting;
  std::vector<Quote> quotes;
  net::TimerId timer = 0;
};

struct Participant {
  std::string session_id;
  std::string service_id;
  std::string address;
  std::size_t node = 0;
  frp::Session session;
};

struct Transaction {
  std::string id;
  Task task;
  Status status = Status::Planning;
  std::string reason;
  std::optional<planner::Plan> plan;
  std::vector<Node> nodes;
  std::vector<Participant> participants;  // creation order
  std::vector<Event> history;
  std::set<std::string> failed_services;  // never asked again in this transaction
  int replans = 0;
  bool cancelling = false;
  double created_at = 0;
  std::optional<double> finished_at;
  std::uint64_t completion_version = 0;
  // compensation queue, node ids in the order they are compensated
  std::vector<std::size_t> compensation;
  std::optional<std::size_t> compensating;
  Status after_compensation = Status::Aborted;
  std::size_t protocol_violations = 0;
};

/// Coordinator of FRP transactions. Public methods may be called from any
/// thread; message handling and timers run on the given event loop.
class TaskManager {
 public:
  TaskManager(Config cfg, net::EventLoop& loop, net::Transport& transport, const registry::Directory& directory,
              repository::Store& store);
  ~TaskManager();
  TaskManager(const TaskManager&) = delete;
  TaskManager& operator=(const TaskManager&) = delete;

  /// Returns the new transaction id; planning starts on the loop.
  std::string submit(Task task);
  /// Throws UnknownTransaction, AlreadyTerminal.
  void cancel(const std::string& id);

  std::vector<std::string> ids() const;
  /// Copy of a transaction. Throws UnknownTransaction.
  Transaction get(const std::string& id) const;
  std::optional<Status> status(const std::string& id) const;
  /// History entries with seq > from_seq, waiting up to `timeout` seconds of
  /// wall time for at least one. Throws UnknownTransaction.
  std::vector<Event> events_since(const std::string& id, std::uint64_t from_seq, double timeout = 0) const;
  bool all_terminal() const;

  nlohmann::json summary_json(const std::string& id) const;
  nlohmann::json detail_json(const std::string& id) const;

  const Config& config() const { return cfg_; }

 private:
  Transaction& txn(const std::string& id);
  void on_message(const frp::Envelope& e);
  void start(const std::string& id);
  void set_status(Transaction& t, Status s, const std::string& reason = {});
  void log(Transaction& t, Event e);
  void send(Transaction& t, Participant& p, frp::Body body);
  Participant& session_for(Transaction& t, const Node& n, const registry::ServiceRecord& rec);
  Participant* find_participant(Transaction& t, const std::string& session_id);

  void adopt_plan(Transaction& t, const planner::Plan& plan);
  void arrange(Transaction& t, std::size_t node);
  void close_arrangement(Transaction& t, std::size_t node);
  void arrangement_failed(Transaction& t, std::size_t node, const std::string& why);
  void dispatch(Transaction& t);
  void execute(Transaction& t, std::size_t node);
  void on_completed(Transaction& t, std::size_t node, const entish::Formula& situation);
  void on_failed(Transaction& t, std::size_t node, const std::optional<entish::Formula>& situation,
                 const std::string& why);
  void on_silence(Transaction& t, std::size_t node);
  void recover(Transaction& t, std::size_t node, const std::optional<entish::Formula>& situation);
  bool replan(Transaction& t, const std::string& why);
  void commit_situation(Transaction& t, const entish::Formula& situation);
  void finish_success(Transaction& t);
  void compensate_then(Transaction& t, Status final_status, const std::string& reason);
  void compensate_next(Transaction& t);
  void terminate(Transaction& t, Status s, const std::string& reason);
  void cancel_now(const std::string& id);
  void stop_timer(Node& n);

  Config cfg_;
  net::EventLoop& loop_;
  net::Transport& transport_;
  const registry::Directory& directory_;
  repository::Store& store_;
  net::IdGenerator ids_;
  mutable std::recursive_mutex mu_;
  mutable std::condition_variable_any changed_;
  std::map<std::string, Transaction> txns_;
  std::vector<std::string> order_;
  std::map<std::string, std::string> session_owner_;  // session id -> transaction id
  std::uint64_t next_txn_ = 1;
};

}  // namespace somrs::taskman
