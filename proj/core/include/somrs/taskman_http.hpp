#pragma once

#include <memory>
#include <string>

#include "somrs/taskman.hpp"

namespace somrs::taskman {

/// Client API of a task manager over HTTP:
///
///   POST /tasks                      {precondition?, effect} -> 201 {transactionId}
///   GET  /transactions               summaries
///   GET  /transactions/{id}          status, plan and participants
///   GET  /transactions/{id}/events   text/event-stream of history entries
///   POST /transactions/{id}/cancel   202, 404 or 409
///
/// The event stream resumes after `fromSeq` or the Last-Event-ID header and
/// closes with an `end` event once the transaction is terminal.
class HttpApi {
 public:
  explicit HttpApi(TaskManager& tm);
  ~HttpApi();
  HttpApi(const HttpApi&) = delete;
  HttpApi& operator=(const HttpApi&) = delete;

  /// Binds and serves on a background thread. Port 0 picks a free port.
  /// Returns the bound port. Throws PortInUse.
  int start(const std::string& host, int port);
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace somrs::taskman
