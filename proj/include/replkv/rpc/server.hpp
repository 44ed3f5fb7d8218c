#pragma once

#include <atomic>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "replkv/rpc/message.hpp"
#include "replkv/rpc/scheduler.hpp"
#include "replkv/transport.hpp"

namespace replkv::rpc {

struct ServerOptions {
  size_t workers = 2;
  size_t spinners = 1;
  size_t task_threshold = 4;
  std::chrono::microseconds idle_sleep{100};
  size_t client_buffer_bytes = kDefaultClientBuffer;  // request ring per connection
  bool record_schedule = false;
  /// Ops run directly on the polling thread instead of the worker pool.
  /// Meant for short handlers that never wait on another server.
  std::function<bool(Op)> inline_op;
};

struct Request {
  Op op = Op::kPing;
  uint64_t req_id = 0;
  Bytes payload;
  uint32_t connection = 0;
  /// The connection the request arrived on; valid while the handler runs.
  transport::Connection* conn = nullptr;
};

/// Returns the reply payload; a thrown replkv::Error becomes an error reply.
using Handler = std::function<Bytes(const Request&)>;

struct ServerStats {
  uint64_t connections = 0;
  uint64_t requests = 0;
  uint64_t resets = 0;
  uint64_t replies = 0;
  uint64_t continuations = 0;
  uint64_t errors = 0;
  SchedulerStats scheduler;
};

/// Accepts connections, detects requests by polling each connection's
/// request ring, and runs them on the worker pool. Replies are written
/// straight into the slot each client reserved.
class RpcServer {
 public:
  RpcServer(transport::Nic& nic, const std::string& address, Handler handler, ServerOptions options = {});
  ~RpcServer();

  RpcServer(const RpcServer&) = delete;
  RpcServer& operator=(const RpcServer&) = delete;

  void stop();
  std::string address() const { return address_; }
  ServerStats stats() const;
  std::vector<ScheduleEvent> schedule_log() const { return pool_.events(); }
  const ServerOptions& options() const { return options_; }

 private:
  struct Conn;

  void accept_loop();
  void spin_loop(size_t index);
  void count_resets(Conn& c);
  void execute(const std::shared_ptr<Conn>& conn, ReceivedMessage msg);
  void send_reply(Conn& conn, const MessageHeader& req, Bytes payload, uint8_t flags);
  void send_chunked(Conn& conn, const MessageHeader& req, Bytes payload);

  Handler handler_;
  ServerOptions options_;
  std::shared_ptr<transport::Doorbell> bell_;
  std::unique_ptr<transport::Listener> listener_;
  std::string address_;
  WorkerPool pool_;

  mutable std::mutex conns_mu_;
  std::vector<std::shared_ptr<Conn>> conns_;
  uint32_t next_conn_ = 1;

  std::atomic<bool> stopping_{false};
  std::thread acceptor_;
  std::vector<std::thread> spinners_;

  std::atomic<uint64_t> requests_{0}, resets_seen_{0}, replies_{0}, continuations_{0}, errors_{0};
};

}  // namespace replkv::rpc
