#pragma once

#include <atomic>
#include <chrono>
#include <map>
#include <memory>
#include <mutex>
#include <string>

#include "replkv/rpc/message.hpp"
#include "replkv/transport.hpp"

namespace replkv::rpc {

struct ClientOptions {
  size_t buffer_bytes = kDefaultClientBuffer;  // reply ring in local memory
  size_t default_reply_bytes = 1024;           // payload room reserved per call
  std::chrono::milliseconds timeout{5000};
  std::chrono::milliseconds connect_timeout{2000};
};

struct ClientStats {
  uint64_t calls = 0;
  uint64_t resets = 0;
  uint64_t continuations = 0;
  uint64_t space_waits = 0;
};

/// One connection to an RpcServer. Requests go into the server's ring at
/// positions this client tracks; each request names the slot in the local
/// reply ring where the server writes its answer. Safe for concurrent use.
/// A timeout closes the connection, since the server may still write into
/// the abandoned slot.
class RpcClient {
 public:
  RpcClient(transport::Nic& nic, const std::string& address, ClientOptions options = {});
  ~RpcClient();

  RpcClient(const RpcClient&) = delete;
  RpcClient& operator=(const RpcClient&) = delete;

  struct Ticket {
    uint64_t req_id = 0;
  };

  /// Sends a request without waiting for its reply.
  Ticket send(Op op, ByteView payload, size_t expected_reply = 0);
  /// Waits for a reply; fetches continuation chunks as needed. Error replies
  /// are rethrown as replkv::Error.
  Bytes wait(const Ticket& t);
  Bytes call(Op op, ByteView payload, size_t expected_reply = 0) { return wait(send(op, payload, expected_reply)); }

  /// Largest request message accepted: half the server ring, so a request
  /// always fits once the ring drains, wherever the rendezvous sits.
  size_t max_request_bytes() const { return request_ring_.size() / 2 / kMessageSegment * kMessageSegment; }
  size_t max_request_payload() const { return payload_capacity(max_request_bytes()); }

  bool closed() const { return conn_->closed(); }
  void close() { conn_->close(); }
  transport::Connection& connection() { return *conn_; }
  const std::string& address() const { return address_; }
  ClientStats stats() const;

 private:
  struct Outstanding {
    uint64_t request_offset = 0;
    std::optional<uint64_t> request_skip;
    uint64_t reply_offset = 0;
    uint32_t reply_len = 0;
    std::optional<ReceivedMessage> reply;
  };

  void harvest_locked();
  void release_locked(Outstanding& o);
  Bytes wait_one(uint64_t req_id, uint8_t* flags_out);

  std::string address_;
  ClientOptions options_;
  std::shared_ptr<transport::Doorbell> bell_;
  transport::ConnectionPtr conn_;
  std::shared_ptr<transport::RegisteredBuffer> reply_buffer_;

  mutable std::mutex mu_;
  RingAllocator request_ring_;
  RingAllocator reply_ring_;
  std::map<uint64_t, Outstanding> outstanding_;
  uint64_t next_req_ = 1;
  ClientStats stats_;
};

}  // namespace replkv::rpc
