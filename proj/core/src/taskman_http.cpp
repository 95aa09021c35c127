#include "somrs/taskman_http.hpp"

#include <atomic>
#include <thread>

#include <httplib.h>

#include "somrs/entish.hpp"
#include "somrs/error.hpp"

namespace somrs::taskman {

namespace {

void json_reply(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void error_reply(httplib::Response& res, int status, const std::string& code, const std::string& message) {
  json_reply(res, status, {{"error", code}, {"message", message}});
}

int status_for(Errc c) {
  switch (c) {
    case Errc::UnknownTransaction:
      return 404;
    case Errc::AlreadyTerminal:
      return 409;
    default:
      return 400;
  }
}

std::string sse(const Event& e) {
  return "id: " + std::to_string(e.seq) + "\nevent: history\ndata: " + to_json(e).dump() + "\n\n";
}

}  // namespace

struct HttpApi::Impl {
  TaskManager& tm;
  httplib::Server server;
  std::thread thread;
  std::atomic<bool> stopping{false};

  explicit Impl(TaskManager& m) : tm(m) { routes(); }

  void routes() {
    // Without SO_REUSEPORT, so a second server on the port fails to bind.
    server.set_socket_options([](socket_t sock) {
      int yes = 1;
      ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
    });
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                {"Access-Control-Allow-Headers", "Content-Type, Last-Event-ID"}});
    server.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    server.Post("/tasks", [this](const httplib::Request& req, httplib::Response& res) {
      nlohmann::json body;
      try {
        body = nlohmann::json::parse(req.body);
      } catch (const nlohmann::json::exception& e) {
        return error_reply(res, 400, "MalformedTask", std::string("body is not JSON: ") + e.what());
      }
      if (!body.is_object() || !body.contains("effect") || !body["effect"].is_string()) {
        return error_reply(res, 400, "MalformedTask", "effect must be a string");
      }
      Task task;
      try {
        task.effect = entish::parse(body["effect"].get<std::string>());
        if (body.contains("precondition") && !body["precondition"].is_null()) {
          if (!body["precondition"].is_string()) {
            return error_reply(res, 400, "MalformedTask", "precondition must be a string");
          }
          const auto pre = body["precondition"].get<std::string>();
          if (!pre.empty()) task.precondition = entish::parse(pre);
        }
      } catch (const Error& e) {
        return error_reply(res, 400, std::string(to_string(e.code())), e.detail());
      }
      const auto id = tm.submit(std::move(task));
      res.set_header("Location", "/transactions/" + id);
      json_reply(res, 201, {{"transactionId", id}});
    });

    server.Get("/transactions", [this](const httplib::Request&, httplib::Response& res) {
      auto list = nlohmann::json::array();
      for (const auto& id : tm.ids()) list.push_back(tm.summary_json(id));
      json_reply(res, 200, list);
    });

    server.Get(R"(/transactions/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      try {
        json_reply(res, 200, tm.detail_json(req.matches[1]));
      } catch (const Error& e) {
        error_reply(res, status_for(e.code()), std::string(to_string(e.code())), e.detail());
      }
    });

    server.Post(R"(/transactions/([^/]+)/cancel)", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      try {
        tm.cancel(id);
        json_reply(res, 202, {{"transactionId", id}});
      } catch (const Error& e) {
        error_reply(res, status_for(e.code()), std::string(to_string(e.code())), e.detail());
      }
    });

    server.Get(R"(/transactions/([^/]+)/events)", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      if (!tm.status(id)) return error_reply(res, 404, "UnknownTransaction", "no transaction " + id);
      std::uint64_t from = 0;
      try {
        if (req.has_param("fromSeq")) {
          from = std::stoull(req.get_param_value("fromSeq"));
        } else if (req.has_header("Last-Event-ID")) {
          from = std::stoull(req.get_header_value("Last-Event-ID"));
        }
      } catch (const std::exception&) {
        return error_reply(res, 400, "BadRequest", "fromSeq must be a number");
      }
      res.set_header("Cache-Control", "no-cache");
      auto next = std::make_shared<std::uint64_t>(from);
      res.set_chunked_content_provider("text/event-stream", [this, id, next](std::size_t, httplib::DataSink& sink) {
        if (stopping) {
          sink.done();
          return true;
        }
        const auto events = tm.events_since(id, *next, 0.25);
        std::string out;
        for (const auto& e : events) {
          out += sse(e);
          *next = e.seq;
        }
        if (events.empty()) {
          const auto s = tm.status(id);
          if (s && is_terminal(*s)) {
            const auto summary = tm.summary_json(id);
            out = "event: end\ndata: " + nlohmann::json{{"status", summary["status"]}, {"reason", summary["reason"]}}.dump() +
                  "\n\n";
            if (!sink.write(out.data(), out.size())) return false;
            sink.done();
            return true;
          }
          out = ": keepalive\n\n";
        }
        return sink.write(out.data(), out.size());
      });
    });
  }
};

HttpApi::HttpApi(TaskManager& tm) : impl_(std::make_unique<Impl>(tm)) {}

HttpApi::~HttpApi() { stop(); }

int HttpApi::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw Error(Errc::PortInUse, "cannot bind " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

void HttpApi::stop() {
  if (!impl_) return;
  impl_->stopping = true;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace somrs::taskman
