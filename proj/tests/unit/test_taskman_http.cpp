#include <doctest.h>

#include <httplib.h>

#include <chrono>
#include <thread>

#include "fixtures.hpp"
#include "somrs/scenario.hpp"
#include "somrs/taskman_http.hpp"

using namespace somrs;
using nlohmann::json;

namespace {

struct Stream {
  std::vector<json> events;
  std::vector<std::uint64_t> ids;
  std::optional<json> end;
};

// Minimal server-sent events reader: blocks until the server closes.
Stream read_stream(httplib::Client& cli, const std::string& path, const httplib::Headers& headers = {}) {
  Stream s;
  std::string buf;
  auto res = cli.Get(path, headers, [&](const char* data, std::size_t n) {
    buf.append(data, n);
    std::size_t cut;
    while ((cut = buf.find("\n\n")) != std::string::npos) {
      const std::string block = buf.substr(0, cut);
      buf.erase(0, cut + 2);
      std::string event = "message", data_line;
      std::istringstream lines(block);
      for (std::string line; std::getline(lines, line);) {
        if (line.rfind("event: ", 0) == 0) event = line.substr(7);
        if (line.rfind("data: ", 0) == 0) data_line = line.substr(6);
        if (line.rfind("id: ", 0) == 0) s.ids.push_back(std::stoull(line.substr(4)));
      }
      if (event == "history") s.events.push_back(json::parse(data_line));
      if (event == "end") s.end = json::parse(data_line);
    }
    return true;
  });
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(res->get_header_value("Content-Type") == "text/event-stream");
  return s;
}

taskman::Status wait_terminal(taskman::TaskManager& tm, const std::string& id) {
  for (int i = 0; i < 500; ++i) {
    const auto s = tm.status(id);
    if (s && taskman::is_terminal(*s)) return *s;
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  return *tm.status(id);
}

}  // namespace

TEST_CASE("client API over HTTP") {
  net::RealtimeLoop rt;
  net::ScaledLoop fast(rt, 200);
  auto cfg = scenario::load_config(fixtures::scenario_path("scenario1.yaml"));
  scenario::System sys(cfg, &fast);
  taskman::HttpApi api(sys.tm);
  const int port = api.start("127.0.0.1", 0);
  httplib::Client cli("127.0.0.1", port);
  cli.set_read_timeout(10, 0);

  auto res = cli.Post("/tasks", "{not json", "application/json");
  REQUIRE(res);
  CHECK(res->status == 400);
  CHECK(json::parse(res->body)["error"] == "MalformedTask");
  res = cli.Post("/tasks", json{{"effect", "Jar002 isOn"}}.dump(), "application/json");
  CHECK(res->status == 400);
  CHECK(json::parse(res->body)["error"] == "SyntaxError");
  CHECK(cli.Post("/tasks", json{{"precondition", 3}, {"effect", "Jar002 isOn Platform001"}}.dump(),
                 "application/json")
            ->status == 400);
  CHECK(sys.tm.ids().empty());

  res = cli.Post("/tasks", json{{"precondition", "Jar002 isOn ?Shelf"}, {"effect", "Jar002 isOn Platform001"}}.dump(),
                 "application/json");
  REQUIRE(res->status == 201);
  CHECK(res->get_header_value("Access-Control-Allow-Origin") == "*");
  const std::string id = json::parse(res->body)["transactionId"];

  const auto all = read_stream(cli, "/transactions/" + id + "/events");
  REQUIRE(all.end);
  CHECK((*all.end)["status"] == "Completed");
  REQUIRE(all.events.size() > 10);
  for (std::size_t i = 0; i < all.events.size(); ++i) {
    CHECK(all.events[i]["seq"] == i + 1);
    CHECK(all.ids[i] == i + 1);
    for (const auto* k : {"seq", "timestamp", "direction", "messageType", "sessionId", "bodySummary"}) {
      CHECK(all.events[i].contains(k));
    }
  }
  std::vector<std::string> sent;
  for (const auto& e : all.events) {
    if (e["direction"] != "internal") sent.push_back(e["messageType"]);
  }
  CHECK(sent == std::vector<std::string>{"Arrange", "Arrange", "Terms", "Terms", "Accept", "Cancel", "Execute",
                                         "Completed", "End", "End"});

  // Resuming skips what the client already has, by query or header.
  auto resumed = read_stream(cli, "/transactions/" + id + "/events?fromSeq=5");
  REQUIRE_FALSE(resumed.events.empty());
  CHECK(resumed.events.front()["seq"] == 6);
  resumed = read_stream(cli, "/transactions/" + id + "/events", {{"Last-Event-ID", "7"}});
  CHECK(resumed.events.front()["seq"] == 8);

  res = cli.Get("/transactions");
  REQUIRE(res->status == 200);
  CHECK(json::parse(res->body).size() == 1);
  res = cli.Get("/transactions/" + id);
  REQUIRE(res->status == 200);
  const auto detail = json::parse(res->body);
  CHECK(detail["status"] == "Completed");
  CHECK(detail["participants"].size() == 2);
  CHECK(detail["plan"]["nodes"].size() == 1);

  CHECK(cli.Get("/transactions/T999")->status == 404);
  CHECK(cli.Get("/transactions/T999/events")->status == 404);
  CHECK(cli.Post("/transactions/T999/cancel")->status == 404);
  res = cli.Post("/transactions/" + id + "/cancel");
  CHECK(res->status == 409);
  CHECK(json::parse(res->body)["error"] == "AlreadyTerminal");

  res = cli.Options("/tasks");
  REQUIRE(res);
  CHECK(res->status == 204);
  CHECK(res->get_header_value("Access-Control-Allow-Methods").find("POST") != std::string::npos);

  // A second task, cancelled while it runs.
  res = cli.Post("/tasks", json{{"effect", "Jar001 isOn Platform001"}}.dump(), "application/json");
  REQUIRE(res->status == 201);
  const std::string second = json::parse(res->body)["transactionId"];
  CHECK(second != id);
  CHECK(cli.Post("/transactions/" + second + "/cancel")->status == 202);
  CHECK(wait_terminal(sys.tm, second) == taskman::Status::Cancelled);
  const auto cancelled = read_stream(cli, "/transactions/" + second + "/events");
  REQUIRE(cancelled.end);
  CHECK((*cancelled.end)["status"] == "Cancelled");

  api.stop();
  rt.stop();
}

TEST_CASE("binding a taken port reports PortInUse") {
  net::RealtimeLoop rt;
  net::LoopbackTransport bus(rt);
  auto doc = fixtures::lab();
  registry::Registry reg(doc.ontology);
  repository::Repository repo(doc.ontology, doc.map);
  taskman::TaskManager tm({}, rt, bus, reg, repo);
  taskman::HttpApi a(tm), b(tm);
  const int port = a.start("127.0.0.1", 0);
  try {
    b.start("127.0.0.1", port);
    FAIL("second bind succeeded");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::PortInUse);
  }
  a.stop();
  rt.stop();
}
