#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <random>

#include "fixtures.hpp"
#include "somrs/entish.hpp"
#include "somrs/error.hpp"
#include "somrs/scenario.hpp"
#include "somrs/taskman.hpp"

using namespace somrs;
using taskman::Quote;
using taskman::SelectionPolicy;
using taskman::Status;

namespace {

scenario::Config scenario_config(const std::string& name) {
  return scenario::load_config(fixtures::scenario_path(name + ".yaml"));
}

std::vector<std::string> types(const std::vector<scenario::TraceLine>& trace) {
  std::vector<std::string> out;
  for (const auto& l : trace) out.push_back(l.type + " " + (l.from == "TM" ? l.to : l.from));
  return out;
}

bool all_ended(const scenario::RunResult& r) {
  for (const auto& [svc, sessions] : r.service_sessions) {
    for (const auto& [sid, s] : sessions) {
      if (s != frp::SessionState::Ended) return false;
    }
  }
  return true;
}

bool holds(const scenario::RunResult& r, const std::string& text, bool ground_truth = false) {
  return entish::holds(entish::parse(text), ground_truth ? r.ground_truth : r.final_map, r.ontology);
}

bool same(const ontology::WorldMap& a, const ontology::WorldMap& b, const scenario::RunResult& r) {
  return ontology::emit_world(r.ontology, a) == ontology::emit_world(r.ontology, b);
}

}  // namespace

TEST_CASE("the cheaper quote wins under the price policy") {
  std::vector<Quote> q{{"SM1", 10, 60}, {"SM2", 50, 40}};
  CHECK(taskman::select_winner(q, {})->service_id == "SM1");
  CHECK(taskman::select_winner(q, {0, 1})->service_id == "SM2");
  CHECK(taskman::select_winner(q, {1, 2})->service_id == "SM1");  // 130 vs 130, lower id
  CHECK(taskman::select_winner({{"B", 5, 1}, {"A", 5, 1}}, {})->service_id == "A");
  CHECK_FALSE(taskman::select_winner({}, {}));
}

TEST_CASE("selection matches a brute-force argmin and ignores weight scaling") {
  std::mt19937 rng(11);
  std::uniform_real_distribution<double> price(0, 100);
  for (int round = 0; round < 500; ++round) {
    std::vector<Quote> q;
    const int n = 1 + static_cast<int>(rng() % 6);
    for (int i = 0; i < n; ++i) {
      // Coarse values make ties common.
      q.push_back({"S" + std::to_string(rng() % 20), std::floor(price(rng) / 10), std::floor(price(rng) / 10)});
    }
    SelectionPolicy p{static_cast<double>(rng() % 3), static_cast<double>(rng() % 3)};
    if (p.price_weight == 0 && p.time_weight == 0) p.price_weight = 1;
    const Quote* best = nullptr;
    for (const auto& x : q) {
      const double c = p.price_weight * x.price + p.time_weight * x.max_time;
      const double bc = best ? p.price_weight * best->price + p.time_weight * best->max_time : 0;
      if (!best || c < bc || (c == bc && x.service_id < best->service_id)) best = &x;
    }
    const auto w = taskman::select_winner(q, p);
    REQUIRE(w);
    CHECK(w->service_id == best->service_id);
    const SelectionPolicy scaled{p.price_weight * 4, p.time_weight * 4};
    CHECK(taskman::select_winner(q, scaled)->service_id == w->service_id);
  }
}

TEST_CASE("task manager config validation") {
  taskman::Config c;
  CHECK_NOTHROW(taskman::validate(c));
  auto bad = [](auto mutate) {
    taskman::Config c;
    mutate(c);
    try {
      taskman::validate(c);
    } catch (const Error& e) {
      return e.code() == Errc::BadConfig;
    }
    return false;
  };
  CHECK(bad([](auto& c) { c.address.clear(); }));
  CHECK(bad([](auto& c) { c.quote_timeout = 0; }));
  CHECK(bad([](auto& c) { c.selection = {0, 0}; }));
  CHECK(bad([](auto& c) { c.selection = {-1, 1}; }));
  CHECK(bad([](auto& c) { c.recovery.max_replans = -1; }));
}

TEST_CASE("scenario config parsing") {
  const auto c = scenario_config("scenario1b");
  CHECK(c.name == "scenario1b");
  CHECK(c.services.size() == 2);
  CHECK(c.services[0].price == 10);
  REQUIRE(c.faults.size() == 1);
  CHECK(c.faults[0].kind == sim::FaultKind::DriveFailure);
  CHECK(c.faults[0].trigger.while_carrying);
  CHECK(std::filesystem::exists(c.world));

  const auto base = fixtures::scenario_path("");
  auto rejects = [&](const std::string& yaml) {
    try {
      scenario::parse_config(yaml, base);
    } catch (const Error& e) {
      return e.code() == Errc::BadConfig;
    }
    return false;
  };
  const std::string head = "world: worlds/lab.yaml\ntask:\n  effect: Jar002 isOn Platform001\n";
  CHECK_FALSE(rejects(head));
  CHECK(rejects(head + "bogus: 1\n"));
  CHECK(rejects("world: worlds/lab.yaml\n"));
  CHECK(rejects(head + "faults:\n  - {robot: Robot001, kind: meltdown}\n"));
  CHECK(rejects(head + "services:\n  - {id: SM1, type: TransferObject, robot: Robot001, colour: red}\n"));
  CHECK(rejects(head + "taskman:\n  selection: {priceWeight: 0, timeWeight: 0}\n"));
  CHECK(rejects(head + "expect: Finished\n"));
  CHECK(rejects("world: [\n"));

  scenario::ServeConfig serve;
  serve.taskman = "127.0.0.1:7104";
  ::setenv("SOMRS_TASKMAN_PORT", "9000", 1);
  scenario::apply_port_overrides(serve);
  ::unsetenv("SOMRS_TASKMAN_PORT");
  CHECK(serve.taskman == "127.0.0.1:9000");
}

TEST_CASE("nominal transfer picks the cheaper service") {
  const auto r = scenario::run(scenario_config("scenario1"));
  CHECK(r.status == Status::Completed);
  CHECK(r.reason.empty());
  CHECK(types(r.trace) == std::vector<std::string>{"Arrange SM1", "Arrange SM2", "Terms SM1", "Terms SM2", "Accept SM1",
                                                   "Cancel SM2", "Execute SM1", "Completed SM1", "End SM1", "End SM2"});
  CHECK(holds(r, "Jar002 isOn Platform001"));
  CHECK(holds(r, "Jar002 isOn Platform001", true));
  CHECK(holds(r, "Jar001 isOn Shelf03"));
  CHECK(all_ended(r));
  CHECK(r.service_violations == 0);
  CHECK(r.transaction.protocol_violations == 0);
  CHECK(r.transaction.completion_version == r.log.back().version);
}

TEST_CASE("drive failure while carrying falls back to the other service") {
  const auto r = scenario::run(scenario_config("scenario1b"));
  CHECK(r.status == Status::Completed);
  CHECK(types(r.trace) == std::vector<std::string>{"Arrange SM1", "Arrange SM2", "Terms SM1", "Terms SM2",
                                                   "Accept SM1", "Cancel SM2", "Execute SM1", "Failed SM1",
                                                   "Arrange SM2", "Terms SM2", "Accept SM2", "Execute SM2",
                                                   "Completed SM2", "End SM1", "End SM2"});
  CHECK(holds(r, "Jar002 isOn Platform001"));
  CHECK(all_ended(r));
  CHECK(r.service_violations == 0);
  auto replayed = r.initial_map;
  for (const auto& d : r.log) replayed = ontology::apply_delta(replayed, d.delta, r.ontology);
  CHECK(same(replayed, r.final_map, r));
}

TEST_CASE("scenario runs are deterministic") {
  const auto a = scenario::run(scenario_config("scenario1b"));
  const auto b = scenario::run(scenario_config("scenario1b"));
  CHECK(scenario::format_trace(a.trace) == scenario::format_trace(b.trace));
  CHECK(same(a.final_map, b.final_map, a));
}

TEST_CASE("history replays through fresh session machines without violations") {
  for (const auto* name : {"scenario1", "scenario1b", "fault_matrix/comm_loss", "fault_matrix/refuse_all"}) {
    CAPTURE(name);
    const auto r = scenario::run(scenario_config(name));
    std::map<std::string, frp::Session> sessions;
    int replayed = 0;
    for (const auto& e : r.transaction.history) {
      if (!e.envelope) continue;
      auto& s = sessions.try_emplace(e.session_id, e.session_id, frp::Role::Coordinator).first->second;
      const auto out = e.direction == "sent" ? s.on_send(*e.envelope) : s.on_receive(*e.envelope);
      CHECK_MESSAGE(out.kind == frp::Outcome::Kind::Applied, out.detail);
      // Applying the same envelope again is a no-op.
      const auto again = e.direction == "sent" ? s.on_send(*e.envelope) : s.on_receive(*e.envelope);
      CHECK(again.kind == frp::Outcome::Kind::Duplicate);
      CHECK(again.to == out.to);
      ++replayed;
    }
    CHECK(replayed > 0);
    for (const auto& [sid, s] : sessions) CHECK(s.ended());
  }
}

TEST_CASE("an effect that already holds completes without messages") {
  auto c = scenario_config("scenario1");
  c.effect = "Jar002 isOn Shelf03";
  const auto r = scenario::run(c);
  CHECK(r.status == Status::Completed);
  CHECK(r.trace.empty());
}

TEST_CASE("tasks that cannot start abort with a reason") {
  auto c = scenario_config("scenario1");
  c.effect = "Jar999 isOn Platform001";
  auto r = scenario::run(c);
  CHECK(r.status == Status::Aborted);
  CHECK(r.reason.rfind("MalformedFormula", 0) == 0);

  c = scenario_config("scenario1");
  c.precondition = "Jar002 isOn Platform001";
  r = scenario::run(c);
  CHECK(r.status == Status::Aborted);
  CHECK(r.reason.rfind("NoPlanFound", 0) == 0);

  c = scenario_config("scenario1");
  c.services.clear();
  r = scenario::run(c);
  CHECK(r.status == Status::Aborted);
  CHECK(r.reason.rfind("NoPlanFound", 0) == 0);
  CHECK(r.trace.empty());
}

TEST_CASE("cancel during arrangement withdraws every request") {
  scenario::System sys(scenario_config("scenario1"));
  const auto id = sys.submit_task();
  sys.loop.run_until(0.005);
  CHECK(sys.tm.status(id) == Status::Arranging);
  sys.tm.cancel(id);
  sys.run_to_end();
  const auto r = sys.result(id);
  CHECK(r.status == Status::Cancelled);
  // The quotes cross our Cancel and are absorbed.
  CHECK(types(r.trace) == std::vector<std::string>{"Arrange SM1", "Arrange SM2", "Cancel SM1", "Cancel SM2",
                                                   "Terms SM1", "Terms SM2", "End SM1", "End SM2"});
  CHECK(r.transaction.protocol_violations == 0);
  CHECK(r.service_violations == 0);
  CHECK(all_ended(r));
  CHECK(same(r.final_map, r.initial_map, r));
}

TEST_CASE("cancel during execution stops then compensates") {
  scenario::System sys(scenario_config("scenario1"));
  const auto id = sys.submit_task();
  sys.loop.run_until(8);
  CHECK(sys.tm.status(id) == Status::Executing);
  sys.tm.cancel(id);
  sys.run_to_end();
  const auto r = sys.result(id);
  CHECK(r.status == Status::Cancelled);
  CHECK(r.reason == "cancelled by client");
  const auto t = types(r.trace);
  const std::vector<std::string> tail{"Stop SM1", "Compensate SM1", "Compensated SM1", "End SM1", "End SM2"};
  REQUIRE(t.size() >= tail.size());
  CHECK(std::vector<std::string>(t.end() - tail.size(), t.end()) == tail);
  CHECK(holds(r, "Jar002 isOn Shelf03"));
  CHECK(holds(r, "Jar002 isOn Shelf03", true));
  CHECK(all_ended(r));
  CHECK(r.transaction.protocol_violations == 0);
  CHECK(r.service_violations == 0);
}

TEST_CASE("cancel rejects unknown and finished transactions") {
  scenario::System sys(scenario_config("scenario1"));
  const auto id = sys.submit_task();
  sys.run_to_end();
  REQUIRE(sys.tm.status(id) == Status::Completed);
  auto code = [&](const std::string& which) {
    try {
      sys.tm.cancel(which);
    } catch (const Error& e) {
      return e.code();
    }
    return Errc::IoError;
  };
  CHECK(code(id) == Errc::AlreadyTerminal);
  CHECK(code("T404") == Errc::UnknownTransaction);
  CHECK_FALSE(sys.tm.status("T404"));
}

TEST_CASE("history is append-only and served incrementally") {
  scenario::System sys(scenario_config("scenario1"));
  const auto id = sys.submit_task();
  sys.run_to_end();
  const auto all = sys.tm.events_since(id, 0);
  REQUIRE(all.size() > 5);
  for (std::size_t i = 0; i < all.size(); ++i) CHECK(all[i].seq == i + 1);
  for (std::size_t i = 1; i < all.size(); ++i) CHECK(all[i].timestamp >= all[i - 1].timestamp);
  const auto tail = sys.tm.events_since(id, 3);
  CHECK(tail.size() == all.size() - 3);
  CHECK(tail.front().seq == 4);
  CHECK(sys.tm.events_since(id, all.size(), 0.01).empty());
  CHECK(all.back().message_type == "Status");

  const auto j = taskman::to_json(all.front());
  for (const auto* k : {"seq", "timestamp", "direction", "messageType", "sessionId", "peer", "bodySummary"}) {
    CHECK(j.contains(k));
  }
  const auto summary = sys.tm.summary_json(id);
  CHECK(summary["status"] == "Completed");
  CHECK(sys.tm.detail_json(id)["participants"].size() == 2);
}

TEST_CASE("two independent transfers run on both robots") {
  auto c = scenario_config("scenario1");
  c.precondition.reset();
  c.effect = "Jar002 isOn Platform001 AND Jar001 isOn Platform001";
  const auto r = scenario::run(c);
  CHECK(r.status == Status::Completed);
  REQUIRE(r.transaction.nodes.size() == 2);
  CHECK(r.transaction.nodes[0].service_id == "SM1");
  // SM1 already holds a commitment when asked about the second jar.
  CHECK(r.transaction.nodes[1].service_id == "SM2");
  CHECK(holds(r, "Jar002 isOn Platform001 AND Jar001 isOn Platform001", true));
  CHECK(all_ended(r));
}

TEST_CASE("cancel after the first of two nodes compensates it") {
  auto c = scenario_config("scenario1");
  c.precondition.reset();
  c.effect = "Jar002 isOn Platform001 AND Jar001 isOn Platform001";
  scenario::System sys(c);
  const auto id = sys.submit_task();
  sys.loop.run_until(22);
  {
    const auto t = sys.tm.get(id);
    REQUIRE(t.nodes.size() == 2);
    REQUIRE(t.nodes[0].state == taskman::NodeState::Done);
    REQUIRE(t.nodes[1].state == taskman::NodeState::Executing);
  }
  sys.tm.cancel(id);
  sys.run_to_end();
  const auto r = sys.result(id);
  CHECK(r.status == Status::Cancelled);
  const auto t = types(r.trace);
  const auto stop = std::find(t.begin(), t.end(), "Stop SM2");
  const auto comp2 = std::find(t.begin(), t.end(), "Compensate SM2");
  const auto comp1 = std::find(t.begin(), t.end(), "Compensate SM1");
  CHECK(stop < comp2);
  // Reverse order of completion: the later node first.
  CHECK(comp2 < comp1);
  CHECK(comp1 != t.end());
  CHECK(holds(r, "Jar002 isOn Shelf03 AND Jar001 isOn Shelf03"));
  CHECK(holds(r, "Jar002 isOn Shelf03 AND Jar001 isOn Shelf03", true));
  CHECK(all_ended(r));
  CHECK(r.service_violations == 0);
  CHECK(r.transaction.protocol_violations == 0);
}

TEST_CASE("failure without a substitute and without replans aborts") {
  auto c = scenario_config("scenario1b");
  c.services.pop_back();
  c.taskman.recovery.max_replans = 0;
  const auto r = scenario::run(c);
  CHECK(r.status == Status::Aborted);
  CHECK(r.reason.rfind("RecoveryExhausted", 0) == 0);
  CHECK(types(r.trace).back() == "End SM1");
  CHECK(all_ended(r));
  // The repository learnt where the jar was dropped.
  CHECK(holds(r, "Jar002.PositionX = 12.5"));
}
