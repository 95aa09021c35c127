#include "somrs/scenario.hpp"

#include <cstdlib>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "somrs/error.hpp"
#include "somrs/net.hpp"
#include "somrs/registry.hpp"
#include "somrs/world_io.hpp"

namespace somrs::scenario {

namespace {

[[noreturn]] void bad(const std::string& msg) { throw Error(Errc::BadConfig, msg); }

template <class T>
T get(const YAML::Node& node, const std::string& key, T fallback) {
  const auto v = node[key];
  if (!v) return fallback;
  try {
    return v.as<T>();
  } catch (const YAML::Exception&) {
    bad("bad value for '" + key + "'");
  }
}

void check_keys(const YAML::Node& node, const std::string& where, std::set<std::string> allowed) {
  if (!node.IsMap()) bad(where + " must be a mapping");
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    if (!allowed.contains(key)) bad("unknown key '" + key + "' in " + where);
  }
}

taskman::Status parse_status(const std::string& s) {
  using taskman::Status;
  for (auto st : {Status::Completed, Status::Aborted, Status::Cancelled}) {
    if (s == taskman::to_string(st)) return st;
  }
  bad("expect must be Completed, Aborted or Cancelled, got " + s);
}

sim::Fault parse_fault(const YAML::Node& n) {
  check_keys(n, "fault", {"robot", "kind", "at", "whileCarrying", "region"});
  sim::Fault f;
  f.robot = get<std::string>(n, "robot", "");
  if (f.robot.empty()) bad("fault without robot");
  const auto kind = get<std::string>(n, "kind", "");
  if (kind == "driveFailure") {
    f.kind = sim::FaultKind::DriveFailure;
  } else if (kind == "commLoss") {
    f.kind = sim::FaultKind::CommLoss;
  } else {
    bad("fault kind must be driveFailure or commLoss, got '" + kind + "'");
  }
  if (n["at"]) f.trigger.at_time = get<double>(n, "at", 0);
  f.trigger.while_carrying = get<bool>(n, "whileCarrying", false);
  if (const auto r = n["region"]) {
    check_keys(r, "region", {"minX", "maxX", "minY", "maxY", "minZ", "maxZ"});
    sim::Region region;
    const char* axes = "XYZ";
    for (int a = 0; a < 3; ++a) {
      const std::string ax(1, axes[a]);
      if (r["min" + ax]) region.min[a] = get<double>(r, "min" + ax, 0);
      if (r["max" + ax]) region.max[a] = get<double>(r, "max" + ax, 0);
    }
    f.trigger.region = region;
  }
  if (!f.trigger.at_time && !f.trigger.region && !f.trigger.while_carrying) bad("fault for " + f.robot + " has no trigger");
  return f;
}

sim::ServiceConfig parse_service(const YAML::Node& n) {
  check_keys(n, "service", {"id", "type", "robot", "price", "maxTime", "operationRange", "refuseAll", "address"});
  sim::ServiceConfig s;
  s.service_id = get<std::string>(n, "id", "");
  s.type_name = get<std::string>(n, "type", "");
  s.robot = get<std::string>(n, "robot", "");
  if (s.service_id.empty() || s.type_name.empty() || s.robot.empty()) bad("service needs id, type and robot");
  s.price = get<double>(n, "price", 0);
  s.max_time = get<double>(n, "maxTime", 60);
  s.operation_range = get<double>(n, "operationRange", 0);
  s.refuse_all = get<bool>(n, "refuseAll", false);
  s.address = get<std::string>(n, "address", s.service_id);
  if (s.price < 0 || s.max_time <= 0 || s.operation_range < 0) bad("service " + s.service_id + " has bad numbers");
  return s;
}

std::optional<std::string> endpoint(const YAML::Node& n, const std::string& key) {
  if (!n[key]) return std::nullopt;
  auto text = get<std::string>(n, key, "");
  net::parse_endpoint(text);
  return text;
}

}  // namespace

Config parse_config(const std::string& yaml, const std::filesystem::path& base_dir) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml);
  } catch (const YAML::Exception& e) {
    bad(std::string("config is not valid YAML: ") + e.what());
  }
  check_keys(root, "config",
             {"name", "world", "seed", "network", "task", "expect", "timeLimit", "taskman", "services", "faults",
              "serve"});
  Config c;
  c.name = get<std::string>(root, "name", "custom");
  const auto world = get<std::string>(root, "world", "");
  if (world.empty()) bad("config needs a world");
  c.world = std::filesystem::path(world).is_absolute() ? std::filesystem::path(world) : base_dir / world;
  c.seed = get<std::uint64_t>(root, "seed", 1);
  if (const auto net = root["network"]) {
    check_keys(net, "network", {"latency", "jitter"});
    c.latency = get<double>(net, "latency", c.latency);
    c.jitter = get<double>(net, "jitter", c.jitter);
    if (c.latency < 0 || c.jitter < 0) bad("network latency and jitter must be >= 0");
  }
  const auto task = root["task"];
  if (!task) bad("config needs a task");
  check_keys(task, "task", {"precondition", "effect"});
  if (task["precondition"]) c.precondition = get<std::string>(task, "precondition", "");
  c.effect = get<std::string>(task, "effect", "");
  if (c.effect.empty()) bad("task needs an effect");
  if (root["expect"]) c.expect = parse_status(get<std::string>(root, "expect", ""));
  c.time_limit = get<double>(root, "timeLimit", c.time_limit);
  if (c.time_limit <= 0) bad("timeLimit must be positive");

  if (const auto tm = root["taskman"]) {
    check_keys(tm, "taskman", {"address", "quoteTimeout", "heartbeatTimeout", "stopGrace", "selection", "recovery",
                               "maxSteps"});
    auto& t = c.taskman;
    t.address = get<std::string>(tm, "address", t.address);
    t.quote_timeout = get<double>(tm, "quoteTimeout", t.quote_timeout);
    t.heartbeat_timeout = get<double>(tm, "heartbeatTimeout", t.heartbeat_timeout);
    t.stop_grace = get<double>(tm, "stopGrace", t.stop_grace);
    t.planning.max_steps = get<std::size_t>(tm, "maxSteps", t.planning.max_steps);
    if (const auto s = tm["selection"]) {
      check_keys(s, "selection", {"priceWeight", "timeWeight"});
      t.selection.price_weight = get<double>(s, "priceWeight", t.selection.price_weight);
      t.selection.time_weight = get<double>(s, "timeWeight", t.selection.time_weight);
    }
    if (const auto r = tm["recovery"]) {
      check_keys(r, "recovery", {"maxReplans", "maxSubstitutionsPerNode", "cognitiveFallback"});
      t.recovery.max_replans = get<int>(r, "maxReplans", t.recovery.max_replans);
      t.recovery.max_substitutions_per_node = get<int>(r, "maxSubstitutionsPerNode", t.recovery.max_substitutions_per_node);
      t.recovery.cognitive_fallback = get<bool>(r, "cognitiveFallback", t.recovery.cognitive_fallback);
    }
  }
  taskman::validate(c.taskman);

  std::set<std::string> seen;
  if (const auto svcs = root["services"]) {
    if (!svcs.IsSequence()) bad("services must be a list");
    for (const auto& s : svcs) {
      c.services.push_back(parse_service(s));
      if (!seen.insert(c.services.back().service_id).second) bad("duplicate service " + c.services.back().service_id);
      if (c.services.back().address == c.taskman.address) bad("service address clashes with the task manager");
    }
  }
  if (const auto faults = root["faults"]) {
    if (!faults.IsSequence()) bad("faults must be a list");
    for (const auto& f : faults) c.faults.push_back(parse_fault(f));
  }
  if (const auto s = root["serve"]) {
    check_keys(s, "serve", {"registry", "repository", "services", "taskman", "http", "stateDir", "timeScale"});
    try {
      c.serve.registry = endpoint(s, "registry");
      c.serve.repository = endpoint(s, "repository");
      c.serve.services = endpoint(s, "services");
      c.serve.taskman = endpoint(s, "taskman");
      c.serve.http = endpoint(s, "http");
    } catch (const Error& e) {
      bad(e.detail());
    }
    const auto dir = get<std::string>(s, "stateDir", "");
    if (!dir.empty()) c.serve.state_dir = std::filesystem::path(dir).is_absolute() ? std::filesystem::path(dir) : base_dir / dir;
    c.serve.time_scale = get<double>(s, "timeScale", 1);
    if (c.serve.time_scale <= 0) bad("timeScale must be positive");
  }
  return c;
}

Config load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) bad("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.parent_path());
}

void apply_port_overrides(ServeConfig& serve) {
  auto override = [](std::optional<std::string>& ep, const char* var) {
    const char* v = std::getenv(var);
    if (v == nullptr || *v == '\0') return;
    auto parsed = net::parse_endpoint(ep ? *ep : std::string("127.0.0.1:0"));
    try {
      const int port = std::stoi(v);
      if (port < 0 || port > 65535) throw std::out_of_range(v);
      parsed.port = static_cast<std::uint16_t>(port);
    } catch (const std::exception&) {
      bad(std::string(var) + " is not a port number");
    }
    ep = parsed.to_string();
  };
  override(serve.registry, "SOMRS_REGISTRY_PORT");
  override(serve.repository, "SOMRS_REPOSITORY_PORT");
  override(serve.services, "SOMRS_SERVICES_PORT");
  override(serve.taskman, "SOMRS_TASKMAN_PORT");
  override(serve.http, "SOMRS_HTTP_PORT");
}

std::string format_trace(const std::vector<TraceLine>& trace) {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(3);
  for (const auto& l : trace) out << l.time << '\t' << l.from << "->" << l.to << '\t' << l.session_id << '\t' << l.type << '\n';
  return out.str();
}

std::vector<TraceLine> trace_of(const taskman::Transaction& t, const std::string& tm_address) {
  std::vector<TraceLine> out;
  for (const auto& e : t.history) {
    if (!e.envelope) continue;
    const auto& h = e.envelope->header;
    if (!frp::is_session_message(h.type)) continue;
    out.push_back({e.timestamp, e.direction == "sent" ? tm_address : h.sender,
                   e.direction == "sent" ? h.recipient : tm_address, h.session_id, e.message_type});
  }
  return out;
}

System::System(const Config& c, net::EventLoop* external)
    : cfg(c),
      doc(ontology::load_world_file(c.world)),
      clock(external != nullptr ? *external : loop),
      bus(clock, c.latency, c.jitter, c.seed),
      registry(doc.ontology),
      repository(doc.ontology, doc.map),
      world(sim::SimWorld::load(doc.map, doc.ontology, c.faults)),
      tm(c.taskman, clock, bus, registry, repository) {
  world.attach(clock);
  for (const auto& s : cfg.services) {
    managers.push_back(std::make_unique<sim::ServiceManager>(s, world, bus));
    registry.publish(managers.back()->record());
  }
}

std::string System::submit_task() {
  taskman::Task task;
  try {
    if (cfg.precondition) task.precondition = entish::parse(*cfg.precondition);
    task.effect = entish::parse(cfg.effect);
  } catch (const Error& e) {
    throw Error(Errc::BadConfig, std::string("task does not parse: ") + e.what());
  }
  return tm.submit(task);
}

void System::run_to_end() {
  loop.run_while_pending([&] { return tm.all_terminal(); }, cfg.time_limit);
  loop.run_until(loop.now() + 1);
}

RunResult System::result(const std::string& transaction_id) const {
  RunResult res;
  res.ontology = doc.ontology;
  res.initial_map = doc.map;
  res.transaction_id = transaction_id;
  res.transaction = tm.get(transaction_id);
  res.status = res.transaction.status;
  res.reason = res.transaction.reason;
  res.expected = taskman::is_terminal(res.status) && res.status == cfg.expect.value_or(taskman::Status::Completed);
  res.trace = trace_of(res.transaction, cfg.taskman.address);
  res.final_map = repository.snapshot();
  res.ground_truth = world.state();
  res.log = repository.log_since(0);
  for (const auto& m : managers) {
    for (const auto& [sid, s] : m->sessions()) res.service_sessions[m->config().service_id][sid] = s.state();
    res.service_violations += m->violations();
  }
  res.sim_time = clock.now();
  return res;
}

RunResult run(const Config& cfg) {
  System sys(cfg);
  const auto id = sys.submit_task();
  sys.run_to_end();
  return sys.result(id);
}

}  // namespace somrs::scenario
