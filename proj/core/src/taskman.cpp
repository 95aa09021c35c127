#include "somrs/taskman.hpp"

#include <algorithm>
#include <chrono>

#include "somrs/error.hpp"

namespace somrs::taskman {

namespace {

bool plan_node(const Node& n) { return !n.probe_for && n.state != NodeState::Superseded; }

// The object a node acts on: first ground subject of its effect.
std::optional<std::string> subject_of(const entish::Formula& effect) {
  for (const auto& atom : entish::atoms(effect)) {
    if (const auto* r = std::get_if<entish::RelationAtom>(&atom)) {
      if (!r->terms.empty() && !r->terms[0].is_variable()) return r->terms[0].name;
    } else {
      const auto& a = std::get<entish::AttributeAtom>(atom);
      if (!a.object.is_variable()) return a.object.name;
    }
  }
  return std::nullopt;
}

entish::Formula without_observation(const entish::Formula& f) {
  std::vector<entish::Formula> keep;
  for (const auto& atom : entish::atoms(f)) {
    const auto* r = std::get_if<entish::RelationAtom>(&atom);
    if (r != nullptr && r->relation == "isObservedBy") continue;
    std::visit([&](const auto& a) { keep.emplace_back(a); }, atom);
  }
  return entish::all_of(keep);
}

}  // namespace

std::string_view to_string(Status s) {
  switch (s) {
    case Status::Planning:
      return "Planning";
    case Status::Arranging:
      return "Arranging";
    case Status::Executing:
      return "Executing";
    case Status::Recovering:
      return "Recovering";
    case Status::Compensating:
      return "Compensating";
    case Status::Completed:
      return "Completed";
    case Status::Aborted:
      return "Aborted";
    case Status::Cancelled:
      return "Cancelled";
  }
  return "?";
}

bool is_terminal(Status s) { return s == Status::Completed || s == Status::Aborted || s == Status::Cancelled; }

std::string_view to_string(NodeState s) {
  switch (s) {
    case NodeState::Pending:
      return "Pending";
    case NodeState::Arranging:
      return "Arranging";
    case NodeState::Arranged:
      return "Arranged";
    case NodeState::Executing:
      return "Executing";
    case NodeState::Done:
      return "Done";
    case NodeState::Failed:
      return "Failed";
    case NodeState::Superseded:
      return "Superseded";
  }
  return "?";
}

void validate(const Config& cfg) {
  if (cfg.address.empty()) throw Error(Errc::BadConfig, "task manager address is empty");
  if (cfg.quote_timeout <= 0 || cfg.heartbeat_timeout <= 0 || cfg.stop_grace < 0) {
    throw Error(Errc::BadConfig, "timeouts must be positive");
  }
  const auto& w = cfg.selection;
  if (w.price_weight < 0 || w.time_weight < 0 || (w.price_weight == 0 && w.time_weight == 0)) {
    throw Error(Errc::BadConfig, "selection weights must be >= 0 and not both zero");
  }
  const auto& r = cfg.recovery;
  if (r.max_replans < 0 || r.max_substitutions_per_node < 0) throw Error(Errc::BadConfig, "recovery counts must be >= 0");
}

std::optional<Quote> select_winner(const std::vector<Quote>& quotes, const SelectionPolicy& policy) {
  std::optional<Quote> best;
  double best_score = 0;
  for (const auto& q : quotes) {
    const double score = policy.price_weight * q.price + policy.time_weight * q.max_time;
    if (!best || score < best_score || (score == best_score && q.service_id < best->service_id)) {
      best = q;
      best_score = score;
    }
  }
  return best;
}

nlohmann::json to_json(const Event& e) {
  return {{"seq", e.seq},          {"timestamp", e.timestamp}, {"direction", e.direction},
          {"messageType", e.message_type}, {"sessionId", e.session_id}, {"peer", e.peer},
          {"bodySummary", e.summary}};
}

// ---------------------------------------------------------------------------

TaskManager::TaskManager(Config cfg, net::EventLoop& loop, net::Transport& transport,
                         const registry::Directory& directory, repository::Store& store)
    : cfg_(std::move(cfg)), loop_(loop), transport_(transport), directory_(directory), store_(store), ids_(cfg_.address) {
  validate(cfg_);
  transport_.bind(cfg_.address, [this](const frp::Envelope& e) { on_message(e); });
}

TaskManager::~TaskManager() {
  transport_.unbind(cfg_.address);
  std::lock_guard lk(mu_);
  for (auto& [id, t] : txns_) {
    for (auto& n : t.nodes) stop_timer(n);
  }
}

Transaction& TaskManager::txn(const std::string& id) {
  auto it = txns_.find(id);
  if (it == txns_.end()) throw Error(Errc::UnknownTransaction, id);
  return it->second;
}

std::string TaskManager::submit(Task task) {
  std::lock_guard lk(mu_);
  const std::string id = "T" + std::to_string(next_txn_++);
  Transaction t;
  t.id = id;
  t.task = std::move(task);
  t.created_at = loop_.now();
  auto& ref = txns_.emplace(id, std::move(t)).first->second;
  order_.push_back(id);
  set_status(ref, Status::Planning);
  loop_.post([this, id] { start(id); });
  return id;
}

void TaskManager::cancel(const std::string& id) {
  std::lock_guard lk(mu_);
  auto& t = txn(id);
  if (is_terminal(t.status)) throw Error(Errc::AlreadyTerminal, id + " is " + std::string(to_string(t.status)));
  if (t.cancelling) return;
  t.cancelling = true;
  loop_.post([this, id] { cancel_now(id); });
}

std::vector<std::string> TaskManager::ids() const {
  std::lock_guard lk(mu_);
  return order_;
}

Transaction TaskManager::get(const std::string& id) const {
  std::lock_guard lk(mu_);
  return const_cast<TaskManager*>(this)->txn(id);
}

std::optional<Status> TaskManager::status(const std::string& id) const {
  std::lock_guard lk(mu_);
  auto it = txns_.find(id);
  if (it == txns_.end()) return std::nullopt;
  return it->second.status;
}

bool TaskManager::all_terminal() const {
  std::lock_guard lk(mu_);
  return std::all_of(txns_.begin(), txns_.end(), [](const auto& kv) { return is_terminal(kv.second.status); });
}

std::vector<Event> TaskManager::events_since(const std::string& id, std::uint64_t from_seq, double timeout) const {
  std::unique_lock lk(mu_);
  auto& t = const_cast<TaskManager*>(this)->txn(id);
  if (timeout > 0) {
    changed_.wait_for(lk, std::chrono::duration<double>(timeout),
                      [&] { return t.history.size() > from_seq || is_terminal(t.status); });
  }
  std::vector<Event> out;
  for (std::size_t i = from_seq; i < t.history.size(); ++i) out.push_back(t.history[i]);
  return out;
}

nlohmann::json TaskManager::summary_json(const std::string& id) const {
  std::lock_guard lk(mu_);
  const auto& t = const_cast<TaskManager*>(this)->txn(id);
  nlohmann::json j{{"transactionId", t.id},
                   {"status", to_string(t.status)},
                   {"reason", t.reason},
                   {"effect", entish::print(t.task.effect)},
                   {"createdAt", t.created_at},
                   {"events", t.history.size()}};
  j["precondition"] = t.task.precondition ? nlohmann::json(entish::print(*t.task.precondition)) : nlohmann::json();
  j["finishedAt"] = t.finished_at ? nlohmann::json(*t.finished_at) : nlohmann::json();
  return j;
}

nlohmann::json TaskManager::detail_json(const std::string& id) const {
  std::lock_guard lk(mu_);
  auto j = summary_json(id);
  const auto& t = const_cast<TaskManager*>(this)->txn(id);
  auto nodes = nlohmann::json::array();
  auto edges = nlohmann::json::array();
  for (const auto& n : t.nodes) {
    nlohmann::json v{{"id", n.id},
                     {"type", n.type_name},
                     {"precondition", entish::print(n.precondition)},
                     {"effect", entish::print(n.effect)},
                     {"state", to_string(n.state)},
                     {"serviceId", n.service_id},
                     {"sessionId", n.session_id}};
    if (n.probe_for) v["probeFor"] = *n.probe_for;
    nodes.push_back(v);
    for (auto a : n.after) edges.push_back({a, n.id});
  }
  j["plan"] = {{"nodes", nodes}, {"edges", edges}, {"text", t.plan ? t.plan->text : ""}};
  auto parts = nlohmann::json::array();
  for (const auto& p : t.participants) {
    parts.push_back({{"sessionId", p.session_id},
                     {"serviceId", p.service_id},
                     {"node", p.node},
                     {"state", to_string(p.session.state())}});
  }
  j["participants"] = parts;
  j["replans"] = t.replans;
  return j;
}

// ---------------------------------------------------------------------------
// Bookkeeping
// ---------------------------------------------------------------------------

void TaskManager::log(Transaction& t, Event e) {
  e.seq = t.history.size() + 1;
  e.timestamp = loop_.now();
  t.history.push_back(std::move(e));
  changed_.notify_all();
}

void TaskManager::set_status(Transaction& t, Status s, const std::string& reason) {
  t.status = s;
  if (!reason.empty()) t.reason = reason;
  std::string text(to_string(s));
  if (!reason.empty()) text += ": " + reason;
  log(t, {0, 0, "internal", "Status", "", "", text, std::nullopt});
}

void TaskManager::send(Transaction& t, Participant& p, frp::Body body) {
  auto env = frp::make_envelope(cfg_.address, p.address, p.session_id, ids_.next(), std::move(body));
  const auto out = p.session.on_send(env);
  if (!out.ok()) {
    ++t.protocol_violations;
    log(t, {0, 0, "internal", "ProtocolViolation", p.session_id, p.service_id, out.detail, std::nullopt});
    return;
  }
  log(t, {0, 0, "sent", std::string(frp::to_string(env.header.type)), p.session_id, p.service_id,
          frp::summarize(env.body), env});
  transport_.send(env);
}

Participant& TaskManager::session_for(Transaction& t, const Node& n, const registry::ServiceRecord& rec) {
  int generation = 0;
  for (auto& p : t.participants) {
    if (p.node != n.id || p.service_id != rec.service_id) continue;
    ++generation;
    const auto s = p.session.state();
    // A refused or cancelled session is re-arranged in place.
    if (s == frp::SessionState::Idle || s == frp::SessionState::Refused || s == frp::SessionState::Cancelled) {
      if (!p.session.ended()) return p;
    }
  }
  Participant p;
  p.session_id = t.id + "-" + std::to_string(n.id) + "-" + rec.service_id;
  if (generation > 0) p.session_id += "-" + std::to_string(generation + 1);
  p.service_id = rec.service_id;
  p.address = rec.manager_address;
  p.node = n.id;
  p.session = frp::Session(p.session_id, frp::Role::Coordinator);
  session_owner_[p.session_id] = t.id;
  t.participants.push_back(std::move(p));
  return t.participants.back();
}

Participant* TaskManager::find_participant(Transaction& t, const std::string& session_id) {
  for (auto& p : t.participants) {
    if (p.session_id == session_id) return &p;
  }
  return nullptr;
}

void TaskManager::stop_timer(Node& n) {
  if (n.timer != 0) loop_.cancel(n.timer);
  n.timer = 0;
}

void TaskManager::commit_situation(Transaction& t, const entish::Formula& situation) {
  try {
    const auto map = store_.snapshot();
    const auto delta = repository::situation_to_delta(situation, map, store_.ontology());
    if (delta.empty()) return;
    const auto v = store_.commit(delta);
    log(t, {0, 0, "internal", "Commit", "", "", "map version " + std::to_string(v), std::nullopt});
  } catch (const Error& e) {
    log(t, {0, 0, "internal", "CommitRejected", "", "", e.what(), std::nullopt});
  }
}

// ---------------------------------------------------------------------------
// Planning and arrangement
// ---------------------------------------------------------------------------

void TaskManager::start(const std::string& id) {
  std::lock_guard lk(mu_);
  auto& t = txn(id);
  if (is_terminal(t.status)) return;
  if (t.cancelling) return cancel_now(id);
  const auto& ont = store_.ontology();
  const auto map = store_.snapshot();
  try {
    entish::check(t.task.effect, ont, &map);
    if (t.task.precondition) entish::check(*t.task.precondition, ont, &map);
  } catch (const Error& e) {
    return terminate(t, Status::Aborted, "MalformedFormula: " + std::string(e.what()));
  }
  if (t.task.precondition && entish::find_bindings(*t.task.precondition, map, ont).empty()) {
    return terminate(t, Status::Aborted, "NoPlanFound: task precondition does not hold");
  }
  std::vector<registry::ServiceRecord> records;
  try {
    records = directory_.discover(entish::True{});
  } catch (const Error& e) {
    return terminate(t, Status::Aborted, std::string("NoPlanFound: ") + e.what());
  }
  planner::Result res;
  try {
    res = planner::plan(t.task.effect, map, ont, planner::group_actions(records), cfg_.planning);
  } catch (const Error& e) {
    return terminate(t, Status::Aborted, std::string(e.what()));
  }
  if (res.plans.empty()) return terminate(t, Status::Aborted, "NoPlanFound: no plan within the step bound");
  const auto& plan = res.plans.front();
  log(t, {0, 0, "internal", "Plan", "", "", plan.text.empty() ? "empty plan" : plan.text, std::nullopt});
  if (plan.steps.empty()) return finish_success(t);
  adopt_plan(t, plan);
  // A one-step plan serves the task directly, so the task's own precondition
  // is what the services are asked about.
  if (plan.steps.size() == 1 && t.task.precondition) t.nodes.back().precondition = *t.task.precondition;
  set_status(t, Status::Arranging);
  dispatch(t);
}

void TaskManager::adopt_plan(Transaction& t, const planner::Plan& plan) {
  const std::size_t base = t.nodes.size();
  t.plan = plan;
  for (std::size_t i = 0; i < plan.steps.size(); ++i) {
    Node n;
    n.id = base + i;
    n.type_name = plan.steps[i].type_name;
    n.precondition = plan.steps[i].precondition;
    n.effect = plan.steps[i].effect;
    n.excluded = t.failed_services;
    t.nodes.push_back(std::move(n));
  }
  for (const auto& [a, b] : plan.order) t.nodes[base + b].after.push_back(base + a);
}

void TaskManager::arrange(Transaction& t, std::size_t node) {
  std::vector<registry::ServiceRecord> candidates;
  {
    const Node& n = t.nodes[node];
    try {
      auto found = n.probe_for ? directory_.discover(entish::True{}, std::nullopt, registry::ServiceKind::Cognitive)
                               : directory_.discover(n.effect);
      for (auto& r : found) {
        if (r.type_name == n.type_name && !n.excluded.contains(r.service_id) &&
            !t.failed_services.contains(r.service_id)) {
          candidates.push_back(std::move(r));
        }
      }
    } catch (const Error& e) {
      log(t, {0, 0, "internal", "DiscoverFailed", "", "", e.what(), std::nullopt});
    }
  }
  if (candidates.empty()) return arrangement_failed(t, node, "NoCandidates");
  Node& n = t.nodes[node];
  n.state = NodeState::Arranging;
  n.quotes.clear();
  n.awaiting.clear();
  n.service_id.clear();
  n.session_id.clear();
  std::vector<std::string> sessions;
  for (const auto& rec : candidates) sessions.push_back(session_for(t, t.nodes[node], rec).session_id);
  for (const auto& sid : sessions) {
    t.nodes[node].awaiting.insert(sid);
    send(t, *find_participant(t, sid), frp::Arrange{t.nodes[node].precondition, t.nodes[node].effect});
  }
  const std::string tid = t.id;
  t.nodes[node].timer = loop_.schedule(cfg_.quote_timeout, [this, tid, node] {
    std::lock_guard lk(mu_);
    auto& tt = txn(tid);
    tt.nodes[node].timer = 0;
    if (tt.nodes[node].state == NodeState::Arranging && !is_terminal(tt.status)) close_arrangement(tt, node);
  });
}

void TaskManager::close_arrangement(Transaction& t, std::size_t node) {
  stop_timer(t.nodes[node]);
  // Silent candidates are released.
  for (const auto& sid : std::set<std::string>(t.nodes[node].awaiting)) {
    if (auto* p = find_participant(t, sid)) send(t, *p, frp::Cancel{});
  }
  t.nodes[node].awaiting.clear();
  const auto winner = select_winner(t.nodes[node].quotes, cfg_.selection);
  if (!winner) {
    t.nodes[node].state = NodeState::Pending;
    return arrangement_failed(t, node, "AllRefusedOrTimedOut");
  }
  for (auto& p : t.participants) {
    if (p.node != node || p.service_id != winner->service_id) continue;
    if (p.session.state() != frp::SessionState::Quoted) continue;
    send(t, p, frp::Accept{});
    Node& n = t.nodes[node];
    n.service_id = p.service_id;
    n.session_id = p.session_id;
    n.max_time = winner->max_time;
    n.state = NodeState::Arranged;
    break;
  }
  for (auto& p : t.participants) {
    if (p.node == node && p.session_id != t.nodes[node].session_id && p.session.state() == frp::SessionState::Quoted) {
      send(t, p, frp::Cancel{});
    }
  }
  if (t.nodes[node].probe_for) return execute(t, node);
  dispatch(t);
}

void TaskManager::arrangement_failed(Transaction& t, std::size_t node, const std::string& why) {
  log(t, {0, 0, "internal", why, "", "", "node " + std::to_string(node), std::nullopt});
  if (t.cancelling) return;
  if (auto target = t.nodes[node].probe_for) {
    // No observer: continue with what is known.
    t.nodes[node].state = NodeState::Superseded;
    return recover(t, *target, std::nullopt);
  }
  t.nodes[node].state = NodeState::Failed;
  set_status(t, Status::Recovering, why);
  if (replan(t, why)) return;
  compensate_then(t, Status::Aborted, "RecoveryExhausted: " + why);
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

void TaskManager::dispatch(Transaction& t) {
  if (t.cancelling || is_terminal(t.status) || t.status == Status::Compensating) return;
  bool all_done = true, all_arranged = true;
  for (const auto& n : t.nodes) {
    if (!plan_node(n)) continue;
    all_done = all_done && n.state == NodeState::Done;
    all_arranged = all_arranged && (n.state == NodeState::Arranged || n.state == NodeState::Executing ||
                                    n.state == NodeState::Done);
  }
  if (all_done) return finish_success(t);
  if (!all_arranged) {
    // Nodes are arranged one at a time in plan order, so a service's quote
    // for one node is settled before it is asked about the next.
    for (std::size_t i = 0; i < t.nodes.size(); ++i) {
      if (!plan_node(t.nodes[i])) continue;
      if (t.nodes[i].state == NodeState::Arranging) return;
      if (t.nodes[i].state == NodeState::Pending) return arrange(t, i);
    }
    return;
  }
  if (t.status != Status::Executing) set_status(t, Status::Executing);
  for (std::size_t i = 0; i < t.nodes.size(); ++i) {
    const Node& n = t.nodes[i];
    if (!plan_node(n) || n.state != NodeState::Arranged) continue;
    const bool ready = std::all_of(n.after.begin(), n.after.end(),
                                   [&](std::size_t a) { return t.nodes[a].state == NodeState::Done; });
    if (ready) execute(t, i);
  }
}

void TaskManager::execute(Transaction& t, std::size_t node) {
  Node& n = t.nodes[node];
  const auto map = store_.snapshot();
  n.prior = n.precondition;
  try {
    auto b = entish::find_bindings(n.precondition, map, store_.ontology());
    if (!b.empty()) n.prior = entish::substitute(n.precondition, b.front());
  } catch (const Error&) {
  }
  auto* p = find_participant(t, n.session_id);
  n.state = NodeState::Executing;
  send(t, *p, frp::Execute{n.precondition, {}});
  const std::string tid = t.id;
  n.timer = loop_.schedule(n.max_time + cfg_.heartbeat_timeout, [this, tid, node] {
    std::lock_guard lk(mu_);
    auto& tt = txn(tid);
    tt.nodes[node].timer = 0;
    on_silence(tt, node);
  });
}

void TaskManager::on_completed(Transaction& t, std::size_t node, const entish::Formula& situation) {
  stop_timer(t.nodes[node]);
  t.nodes[node].state = NodeState::Done;
  t.nodes[node].result = situation;
  commit_situation(t, situation);
  if (t.cancelling || t.status == Status::Compensating) return;
  if (auto target = t.nodes[node].probe_for) return recover(t, *target, without_observation(situation));
  dispatch(t);
}

void TaskManager::on_failed(Transaction& t, std::size_t node, const std::optional<entish::Formula>& situation,
                            const std::string& why) {
  stop_timer(t.nodes[node]);
  Node& n = t.nodes[node];
  n.state = NodeState::Failed;
  n.excluded.insert(n.service_id);
  t.failed_services.insert(n.service_id);
  log(t, {0, 0, "internal", "NodeFailed", n.session_id, n.service_id, why, std::nullopt});
  if (situation) commit_situation(t, *situation);
  if (t.cancelling || t.status == Status::Compensating) return;
  if (auto target = n.probe_for) {
    n.state = NodeState::Superseded;
    return recover(t, *target, std::nullopt);
  }
  recover(t, node, situation);
}

void TaskManager::on_silence(Transaction& t, std::size_t node) {
  Node& n = t.nodes[node];
  if (n.state != NodeState::Executing || is_terminal(t.status)) return;
  log(t, {0, 0, "internal", "Silence", n.session_id, n.service_id, "no report within maxTime + heartbeat",
          std::nullopt});
  if (auto* p = find_participant(t, n.session_id)) send(t, *p, frp::Stop{});
  n.state = NodeState::Failed;
  n.excluded.insert(n.service_id);
  t.failed_services.insert(n.service_id);
  if (t.cancelling) return;
  if (n.probe_for) {
    const auto target = *n.probe_for;
    n.state = NodeState::Superseded;
    return recover(t, target, std::nullopt);
  }
  set_status(t, Status::Recovering, "silence from " + n.service_id);
  const auto subject = subject_of(n.effect);
  if (!cfg_.recovery.cognitive_fallback || !subject) return recover(t, node, std::nullopt);
  Node probe;
  probe.id = t.nodes.size();
  probe.type_name = "Recognize";
  probe.precondition = entish::True{};
  probe.effect = entish::RelationAtom{
      "isObservedBy", {entish::Term::object(*subject), entish::Term::variable("Observer")}};
  probe.probe_for = node;
  probe.excluded = t.failed_services;
  t.nodes.push_back(std::move(probe));
  arrange(t, t.nodes.size() - 1);
}

void TaskManager::recover(Transaction& t, std::size_t node, const std::optional<entish::Formula>& situation) {
  if (t.status != Status::Recovering) set_status(t, Status::Recovering);
  Node& n = t.nodes[node];
  if (situation && !situation->is_true()) n.precondition = *situation;
  if (n.substitutions < cfg_.recovery.max_substitutions_per_node) {
    ++n.substitutions;
    log(t, {0, 0, "internal", "Substitute", "", "", "node " + std::to_string(node), std::nullopt});
    return arrange(t, node);
  }
  if (replan(t, "substitutions exhausted")) return;
  compensate_then(t, Status::Aborted, "RecoveryExhausted: no substitute for node " + std::to_string(node));
}

bool TaskManager::replan(Transaction& t, const std::string& why) {
  if (t.replans >= cfg_.recovery.max_replans) return false;
  ++t.replans;
  log(t, {0, 0, "internal", "Replan", "", "", why, std::nullopt});
  planner::Result res;
  try {
    auto records = directory_.discover(entish::True{});
    std::erase_if(records, [&](const auto& r) { return t.failed_services.contains(r.service_id); });
    res = planner::plan(t.task.effect, store_.snapshot(), store_.ontology(), planner::group_actions(records),
                        cfg_.planning);
  } catch (const Error& e) {
    log(t, {0, 0, "internal", "NoPlanFound", "", "", e.what(), std::nullopt});
    return false;
  }
  if (res.plans.empty()) {
    log(t, {0, 0, "internal", "NoPlanFound", "", "", "no plan from the current situation", std::nullopt});
    return false;
  }
  for (std::size_t i = 0; i < t.nodes.size(); ++i) {
    Node& n = t.nodes[i];
    if (!plan_node(n) || n.state == NodeState::Done) continue;
    stop_timer(n);
    for (auto& p : t.participants) {
      if (p.node != i) continue;
      const auto s = p.session.state();
      if (s == frp::SessionState::ArrangeSent || s == frp::SessionState::Quoted || s == frp::SessionState::Arranged) {
        send(t, p, frp::Cancel{});
      } else if (s == frp::SessionState::Executing) {
        send(t, p, frp::Stop{});
      }
    }
    n.awaiting.clear();
    n.state = NodeState::Superseded;
  }
  const auto& plan = res.plans.front();
  log(t, {0, 0, "internal", "Plan", "", "", plan.text.empty() ? "empty plan" : plan.text, std::nullopt});
  if (plan.steps.empty()) {
    finish_success(t);
    return true;
  }
  adopt_plan(t, plan);
  set_status(t, Status::Arranging);
  dispatch(t);
  return true;
}

void TaskManager::finish_success(Transaction& t) {
  const auto map = store_.snapshot();
  bool holds = false;
  try {
    holds = !entish::find_bindings(t.task.effect, map, store_.ontology()).empty();
  } catch (const Error&) {
  }
  if (holds) {
    t.completion_version = map.version();
    return terminate(t, Status::Completed, "");
  }
  log(t, {0, 0, "internal", "GoalNotSatisfied", "", "", entish::print(t.task.effect), std::nullopt});
  if (replan(t, "goal not satisfied after execution")) return;
  compensate_then(t, Status::Aborted, "RecoveryExhausted: goal not satisfied");
}

// ---------------------------------------------------------------------------
// Compensation, cancellation, termination
// ---------------------------------------------------------------------------

void TaskManager::compensate_then(Transaction& t, Status final_status, const std::string& reason) {
  t.compensation.clear();
  for (std::size_t i = t.nodes.size(); i-- > 0;) {
    const Node& n = t.nodes[i];
    if (n.probe_for || n.session_id.empty()) continue;
    // Done nodes are undone; so are stopped ones during a cancellation.
    const bool stopped = t.cancelling && n.state == NodeState::Failed && !t.failed_services.contains(n.service_id);
    if (n.state == NodeState::Done || stopped) t.compensation.push_back(i);
  }
  if (t.compensation.empty()) return terminate(t, final_status, reason);
  t.after_compensation = final_status;
  if (t.status != Status::Compensating) {
    set_status(t, Status::Compensating, reason);
  } else {
    t.reason = reason;
  }
  compensate_next(t);
}

void TaskManager::compensate_next(Transaction& t) {
  t.compensating.reset();
  while (!t.compensation.empty()) {
    const std::size_t node = t.compensation.front();
    t.compensation.erase(t.compensation.begin());
    Node& n = t.nodes[node];
    auto* p = find_participant(t, n.session_id);
    const auto s = p->session.state();
    if (s != frp::SessionState::Completed && s != frp::SessionState::Failed && s != frp::SessionState::Cancelled) {
      continue;
    }
    t.compensating = node;
    send(t, *p, frp::Compensate{n.prior});
    const std::string tid = t.id;
    n.timer = loop_.schedule(n.max_time + cfg_.heartbeat_timeout, [this, tid, node] {
      std::lock_guard lk(mu_);
      auto& tt = txn(tid);
      tt.nodes[node].timer = 0;
      if (tt.compensating == node) {
        log(tt, {0, 0, "internal", "Silence", tt.nodes[node].session_id, tt.nodes[node].service_id,
                 "no compensation report", std::nullopt});
        compensate_next(tt);
      }
    });
    return;
  }
  terminate(t, t.after_compensation, t.reason);
}

void TaskManager::terminate(Transaction& t, Status s, const std::string& reason) {
  if (is_terminal(t.status)) return;
  for (auto& n : t.nodes) stop_timer(n);
  for (auto& p : t.participants) {
    const auto st = p.session.state();
    if (st != frp::SessionState::Idle && st != frp::SessionState::Ended) send(t, p, frp::End{});
  }
  t.finished_at = loop_.now();
  t.reason = reason;
  set_status(t, s, reason);
}

void TaskManager::cancel_now(const std::string& id) {
  std::lock_guard lk(mu_);
  auto& t = txn(id);
  if (is_terminal(t.status)) return;
  t.cancelling = true;
  log(t, {0, 0, "internal", "CancelRequested", "", "", "", std::nullopt});
  if (t.status == Status::Compensating) {
    t.after_compensation = Status::Cancelled;
    return;
  }
  bool stopped = false;
  bool withdrawn = false;
  for (std::size_t i = 0; i < t.nodes.size(); ++i) {
    Node& n = t.nodes[i];
    stop_timer(n);
    n.awaiting.clear();
    for (auto& p : t.participants) {
      if (p.node != i) continue;
      const auto s = p.session.state();
      if (s == frp::SessionState::ArrangeSent || s == frp::SessionState::Quoted || s == frp::SessionState::Arranged) {
        withdrawn = withdrawn || s == frp::SessionState::ArrangeSent;
        send(t, p, frp::Cancel{});
      } else if (s == frp::SessionState::Executing) {
        send(t, p, frp::Stop{});
        n.state = NodeState::Failed;
        stopped = true;
      }
    }
    if (n.state == NodeState::Arranging || n.state == NodeState::Arranged || n.state == NodeState::Pending) {
      n.state = NodeState::Superseded;
    }
  }
  if (!stopped && !withdrawn) return compensate_then(t, Status::Cancelled, "cancelled by client");
  // Give replies already on the wire time to land before End.
  if (stopped) set_status(t, Status::Compensating, "cancelled by client");
  loop_.schedule(cfg_.stop_grace, [this, id] {
    std::lock_guard lk2(mu_);
    auto& tt = txn(id);
    if (is_terminal(tt.status)) return;
    compensate_then(tt, Status::Cancelled, "cancelled by client");
  });
}

// ---------------------------------------------------------------------------
// Incoming messages
// ---------------------------------------------------------------------------

void TaskManager::on_message(const frp::Envelope& e) {
  std::lock_guard lk(mu_);
  auto owner = session_owner_.find(e.header.session_id);
  if (owner == session_owner_.end()) return;
  auto& t = txn(owner->second);
  Participant* p = find_participant(t, e.header.session_id);
  if (p == nullptr) return;
  if (p->session.ended()) {
    log(t, {0, 0, "internal", "LateMessage", p->session_id, p->service_id,
            std::string(frp::to_string(e.header.type)) + " after End", std::nullopt});
    return;
  }
  const auto out = p->session.on_receive(e);
  if (out.kind == frp::Outcome::Kind::Duplicate) return;
  if (!out.ok()) {
    ++t.protocol_violations;
    log(t, {0, 0, "internal", "ProtocolViolation", p->session_id, p->service_id, out.detail, std::nullopt});
    return;
  }
  log(t, {0, 0, "received", std::string(frp::to_string(e.header.type)), p->session_id, p->service_id,
          frp::summarize(e.body), e});
  const std::size_t node = p->node;
  const std::string sid = p->session_id;
  Node& n = t.nodes[node];

  if (const auto* terms = std::get_if<frp::Terms>(&e.body)) {
    if (n.state == NodeState::Arranging && n.awaiting.erase(sid) && !t.cancelling) {
      n.quotes.push_back({p->service_id, terms->price, terms->max_time});
      if (n.awaiting.empty()) close_arrangement(t, node);
    } else if (p->session.state() == frp::SessionState::Quoted) {
      send(t, *p, frp::Cancel{});
    }
    return;
  }
  if (std::holds_alternative<frp::Refuse>(e.body)) {
    if (n.state == NodeState::Arranging && n.awaiting.erase(sid)) {
      n.excluded.insert(p->service_id);
      if (n.awaiting.empty() && !t.cancelling) close_arrangement(t, node);
    }
    return;
  }
  if (const auto* done = std::get_if<frp::Completed>(&e.body)) {
    if (n.session_id == sid && n.state == NodeState::Executing) return on_completed(t, node, done->result_situation);
    // A report crossing our Stop still tells us where things are.
    commit_situation(t, done->result_situation);
    if (n.session_id == sid && t.cancelling) {
      n.state = NodeState::Done;
      n.result = done->result_situation;
    }
    return;
  }
  if (const auto* failed = std::get_if<frp::Failed>(&e.body)) {
    if (t.compensating == node && n.session_id == sid) {
      stop_timer(n);
      log(t, {0, 0, "internal", "CompensationFailed", sid, p->service_id, failed->reason, std::nullopt});
      if (failed->failure_description) commit_situation(t, *failed->failure_description);
      return compensate_next(t);
    }
    if (n.session_id == sid && n.state == NodeState::Executing) {
      return on_failed(t, node, failed->failure_description, failed->reason);
    }
    if (failed->failure_description) commit_situation(t, *failed->failure_description);
    return;
  }
  if (const auto* comp = std::get_if<frp::Compensated>(&e.body)) {
    if (t.compensating == node && n.session_id == sid) {
      stop_timer(n);
      commit_situation(t, comp->result_situation);
      compensate_next(t);
    }
    return;
  }
}

}  // namespace somrs::taskman
