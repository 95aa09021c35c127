#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <httplib.h>

#include "somrs/error.hpp"
#include "somrs/net.hpp"
#include "somrs/registry.hpp"
#include "somrs/repository.hpp"
#include "somrs/scenario.hpp"
#include "somrs/simworld.hpp"
#include "somrs/taskman.hpp"
#include "somrs/taskman_http.hpp"
#include "somrs/world_io.hpp"

using namespace somrs;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kUnexpected = 2;
constexpr int kConfigError = 3;

std::atomic<bool> interrupted{false};

void on_signal(int) { interrupted = true; }

void wait_for_interrupt() {
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  while (!interrupted) std::this_thread::sleep_for(std::chrono::milliseconds(50));
}

fs::path scenario_dir() {
  if (const char* env = std::getenv("SOMRS_SCENARIO_DIR")) return env;
  return SOMRS_DEFAULT_SCENARIO_DIR;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::IoError, "cannot write " + path.string());
  out << text;
}

net::Endpoint required(const std::optional<std::string>& ep, const std::string& what) {
  if (!ep) throw Error(Errc::BadConfig, "serve." + what + " endpoint is not configured");
  return net::parse_endpoint(*ep);
}

// ---------------------------------------------------------------------------
// run_scenario
// ---------------------------------------------------------------------------

struct RunOptions {
  std::string scenario = "scenario1";
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string trace_out;
  std::string map_out;
};

int run_scenario(const RunOptions& o) {
  scenario::Config cfg;
  try {
    const fs::path path = !o.config.empty() ? fs::path(o.config) : scenario_dir() / (o.scenario + ".yaml");
    if (o.scenario == "custom" && o.config.empty()) throw Error(Errc::BadConfig, "custom scenario needs --config");
    cfg = scenario::load_config(path);
    if (o.seed) cfg.seed = *o.seed;
  } catch (const Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  }
  scenario::RunResult r;
  try {
    r = scenario::run(cfg);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code() == Errc::BadConfig || e.code() == Errc::InvalidWorld ? kConfigError : kUnexpected;
  }
  const auto trace = scenario::format_trace(r.trace);
  if (!o.trace_out.empty()) {
    write_file(o.trace_out, trace);
  } else {
    std::cout << trace;
  }
  if (!o.map_out.empty()) write_file(o.map_out, ontology::emit_world(r.ontology, r.final_map));
  std::cerr << cfg.name << ": " << taskman::to_string(r.status);
  if (!r.reason.empty()) std::cerr << " (" << r.reason << ")";
  std::cerr << " at t=" << r.sim_time << "\n";
  return r.expected ? kOk : kUnexpected;
}

// ---------------------------------------------------------------------------
// serve
// ---------------------------------------------------------------------------

struct ServeOptions {
  std::string component = "all";
  std::string config;
  std::string listen;
};

fs::path state_path(const scenario::ServeConfig& s, const std::string& name) {
  if (s.state_dir.empty()) return {};
  fs::create_directories(s.state_dir / name);
  return s.state_dir / name;
}

void serve_registry(const scenario::Config& cfg, const net::Endpoint& ep) {
  const auto doc = ontology::load_world_file(cfg.world);
  const auto dir = state_path(cfg.serve, "registry");
  registry::Registry reg(doc.ontology, dir.empty() ? fs::path() : dir / "records.json");
  net::FrameServer server;
  server.start(ep, [&](const frp::Envelope& e, const std::shared_ptr<net::Connection>& c) { c->write(reg.handle(e)); });
  std::cerr << "registry listening on " << ep.host << ":" << server.port() << "\n";
  wait_for_interrupt();
  server.stop();
}

void serve_repository(const scenario::Config& cfg, const net::Endpoint& ep) {
  const auto doc = ontology::load_world_file(cfg.world);
  repository::Repository repo(doc.ontology, doc.map, state_path(cfg.serve, "repository"));
  net::FrameServer server;
  server.start(ep, [&](const frp::Envelope& e, const std::shared_ptr<net::Connection>& c) { c->write(repo.handle(e)); });
  std::cerr << "repository listening on " << ep.host << ":" << server.port() << " at version " << repo.version()
            << "\n";
  wait_for_interrupt();
  server.stop();
}

void serve_services(const scenario::Config& cfg, const net::Endpoint& ep) {
  const auto doc = ontology::load_world_file(cfg.world);
  net::RealtimeLoop rt;
  net::ScaledLoop clock(rt, cfg.serve.time_scale);
  net::TcpTransport tcp(clock);
  tcp.listen(ep);
  tcp.add_route(cfg.taskman.address, required(cfg.serve.taskman, "taskman"));
  auto world = sim::SimWorld::load(doc.map, doc.ontology, cfg.faults);
  world.attach(clock);
  registry::RemoteRegistry reg(required(cfg.serve.registry, "registry"), "services");
  std::vector<std::unique_ptr<sim::ServiceManager>> managers;
  for (const auto& s : cfg.services) {
    managers.push_back(std::make_unique<sim::ServiceManager>(s, world, tcp));
    reg.publish(managers.back()->record());
    std::cerr << "published " << s.service_id << " (" << s.type_name << " on " << s.robot << ")\n";
  }
  std::cerr << "services listening on " << ep.host << ":" << tcp.port() << "\n";
  wait_for_interrupt();
  for (const auto& m : managers) {
    try {
      reg.unpublish(m->config().service_id);
    } catch (const Error& e) {
      std::cerr << "unpublish " << m->config().service_id << ": " << e.what() << "\n";
    }
  }
  tcp.stop();
  rt.stop();
}

// Cancels whatever is still running and waits for it to wind down.
void drain(taskman::TaskManager& tm, double wall_limit) {
  for (const auto& id : tm.ids()) {
    try {
      tm.cancel(id);
      std::cerr << "cancelling " << id << "\n";
    } catch (const Error&) {
    }
  }
  const auto until = std::chrono::steady_clock::now() + std::chrono::duration<double>(wall_limit);
  while (!tm.all_terminal() && std::chrono::steady_clock::now() < until) {
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
}

void serve_taskman(const scenario::Config& cfg, const net::Endpoint& ep) {
  const auto doc = ontology::load_world_file(cfg.world);
  net::RealtimeLoop rt;
  net::ScaledLoop clock(rt, cfg.serve.time_scale);
  net::TcpTransport tcp(clock);
  tcp.listen(ep);
  const auto services = required(cfg.serve.services, "services");
  for (const auto& s : cfg.services) tcp.add_route(s.address.empty() ? s.service_id : s.address, services);
  registry::RemoteRegistry reg(required(cfg.serve.registry, "registry"), cfg.taskman.address + "-registry");
  repository::RemoteRepository repo(required(cfg.serve.repository, "repository"), doc.ontology,
                                    cfg.taskman.address + "-repository");
  taskman::TaskManager tm(cfg.taskman, clock, tcp, reg, repo);
  taskman::HttpApi api(tm);
  const auto http = required(cfg.serve.http, "http");
  const int port = api.start(http.host, http.port);
  std::cerr << "task manager listening on " << ep.host << ":" << tcp.port() << ", HTTP on " << http.host << ":"
            << port << "\n";
  wait_for_interrupt();
  drain(tm, 10);
  api.stop();
  tcp.stop();
  rt.stop();
}

void serve_all(const scenario::Config& cfg) {
  net::RealtimeLoop rt;
  net::ScaledLoop clock(rt, cfg.serve.time_scale);
  scenario::System sys(cfg, &clock);
  taskman::HttpApi api(sys.tm);
  const auto http = required(cfg.serve.http, "http");
  const int port = api.start(http.host, http.port);
  std::cerr << "all components in-process, HTTP on " << http.host << ":" << port << ", time scale "
            << cfg.serve.time_scale << "\n";
  wait_for_interrupt();
  drain(sys.tm, 10);
  api.stop();
  rt.stop();
}

int serve(const ServeOptions& o) {
  scenario::Config cfg;
  try {
    cfg = scenario::load_config(o.config);
    scenario::apply_port_overrides(cfg.serve);
    if (!o.listen.empty()) {
      net::parse_endpoint(o.listen);
      if (o.component == "registry") cfg.serve.registry = o.listen;
      if (o.component == "repository") cfg.serve.repository = o.listen;
      if (o.component == "services") cfg.serve.services = o.listen;
      if (o.component == "taskman") cfg.serve.taskman = o.listen;
      if (o.component == "all") cfg.serve.http = o.listen;
    }
    if (cfg.serve.time_scale <= 0) throw Error(Errc::BadConfig, "serve.timeScale must be positive");
    if (o.component == "registry") {
      serve_registry(cfg, required(cfg.serve.registry, "registry"));
    } else if (o.component == "repository") {
      serve_repository(cfg, required(cfg.serve.repository, "repository"));
    } else if (o.component == "services") {
      serve_services(cfg, required(cfg.serve.services, "services"));
    } else if (o.component == "taskman") {
      serve_taskman(cfg, required(cfg.serve.taskman, "taskman"));
    } else {
      serve_all(cfg);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (e.code() == Errc::BadConfig || e.code() == Errc::InvalidWorld) return kConfigError;
    return e.code() == Errc::PortInUse ? kConfigError : kUnexpected;
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// submit
// ---------------------------------------------------------------------------

struct SubmitOptions {
  std::string url = "127.0.0.1:8080";
  std::string precondition;
  std::string effect;
  bool follow = false;
};

int submit(const SubmitOptions& o) {
  net::Endpoint ep;
  try {
    ep = net::parse_endpoint(o.url);
  } catch (const Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  }
  httplib::Client cli(ep.host, ep.port);
  cli.set_read_timeout(3600, 0);
  nlohmann::json body{{"effect", o.effect}};
  if (!o.precondition.empty()) body["precondition"] = o.precondition;
  auto res = cli.Post("/tasks", body.dump(), "application/json");
  if (!res) {
    std::cerr << "cannot reach " << o.url << "\n";
    return kUnexpected;
  }
  if (res->status != 201) {
    std::cerr << "rejected (" << res->status << "): " << res->body << "\n";
    return kConfigError;
  }
  const std::string id = nlohmann::json::parse(res->body)["transactionId"];
  std::cout << id << "\n";
  if (!o.follow) return kOk;

  std::string buf, final_status;
  cli.Get("/transactions/" + id + "/events", [&](const char* data, std::size_t n) {
    buf.append(data, n);
    for (std::size_t cut; (cut = buf.find("\n\n")) != std::string::npos;) {
      const std::string block = buf.substr(0, cut);
      buf.erase(0, cut + 2);
      const auto data_at = block.find("data: ");
      if (data_at == std::string::npos) continue;
      const auto j = nlohmann::json::parse(block.substr(data_at + 6));
      if (block.find("event: end") != std::string::npos) {
        final_status = j["status"];
        continue;
      }
      std::cout << j["seq"] << "\t" << j["timestamp"] << "\t" << j["direction"].get<std::string>() << "\t"
                << j["messageType"].get<std::string>() << "\t" << j["sessionId"].get<std::string>() << "\t"
                << j["bodySummary"].get<std::string>() << "\n";
    }
    return true;
  });
  std::cerr << id << ": " << (final_status.empty() ? "stream closed" : final_status) << "\n";
  return final_status == "Completed" ? kOk : kUnexpected;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Service-oriented multi-robot orchestration"};
  app.require_subcommand(1);

  RunOptions run;
  auto* run_cmd = app.add_subcommand("run_scenario", "Run a scenario in-process on a simulated clock");
  run_cmd->add_option("scenario_name", run.scenario, "scenario1, scenario1b or custom");
  run_cmd->add_option("--scenario", run.scenario, "scenario1, scenario1b or custom");
  run_cmd->add_option("--config", run.config, "scenario config file");
  run_cmd->add_option("--seed", run.seed, "network jitter seed");
  run_cmd->add_option("--trace-out", run.trace_out, "write the message trace here instead of stdout");
  run_cmd->add_option("--map-out", run.map_out, "write the final repository map here");

  ServeOptions srv;
  auto* serve_cmd = app.add_subcommand("serve", "Run one component, or all of them, until interrupted");
  serve_cmd->add_option("--component", srv.component)
      ->check(CLI::IsMember({"registry", "repository", "services", "taskman", "all"}));
  serve_cmd->add_option("--config", srv.config)->required();
  serve_cmd->add_option("--listen", srv.listen, "host:port replacing the component's configured endpoint");

  SubmitOptions sub;
  auto* submit_cmd = app.add_subcommand("submit", "Submit a task to a running task manager");
  submit_cmd->add_option("--url", sub.url, "host:port of the HTTP API");
  submit_cmd->add_option("--precondition", sub.precondition);
  submit_cmd->add_option("--effect", sub.effect)->required();
  submit_cmd->add_flag("--follow", sub.follow, "stream events until the transaction ends");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }
  try {
    if (*run_cmd) return run_scenario(run);
    if (*serve_cmd) return serve(srv);
    return submit(sub);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUnexpected;
  }
}
