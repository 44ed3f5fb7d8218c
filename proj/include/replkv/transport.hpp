#pragma once

// Emulated one-sided-write fabric. A connection carries remote writes into
// buffers the peer registered; the peer's application code never runs on
// arrival and only sees the bytes when it polls its own memory.
//
// Socket framing, per write: [buf_id:u32][offset:u64][len:u32][payload].
// buf_id 0xFFFFFFFF carries control records (buffer registration notices).

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>

#include "replkv/common.hpp"

namespace replkv::transport {

using BufferId = uint32_t;
constexpr BufferId kBootstrapBuffer = 0;
constexpr size_t kFrameHeaderSize = 16;

/// Wakes pollers when a remote write lands in any buffer attached to it.
class Doorbell {
 public:
  uint64_t sequence() const;
  void ring();
  /// Blocks until the sequence moves past `seen` or the timeout expires.
  /// Returns the current sequence.
  uint64_t wait(uint64_t seen, std::chrono::microseconds timeout) const;

 private:
  mutable std::mutex mu_;
  mutable std::condition_variable cv_;
  uint64_t seq_ = 0;
};

/// Memory exposed to remote writes. The owner reads it by polling.
class RegisteredBuffer {
 public:
  RegisteredBuffer(BufferId id, size_t size, std::shared_ptr<Doorbell> bell);

  BufferId id() const { return id_; }
  size_t size() const { return data_.size(); }

  void read(uint64_t off, MutableByteView out) const;
  Bytes read(uint64_t off, size_t len) const;
  uint8_t byte_at(uint64_t off) const;
  /// Owner-side store (zeroing consumed messages, staging replies).
  void write_local(uint64_t off, ByteView bytes);
  void zero(uint64_t off, size_t len);

  /// Applies a remote write. Called by the fabric only.
  void apply_remote(uint64_t off, ByteView bytes);
  uint64_t remote_writes() const { return remote_writes_.load(); }
  const std::shared_ptr<Doorbell>& doorbell() const { return bell_; }

 private:
  void check(uint64_t off, size_t len) const;

  BufferId id_;
  mutable std::mutex mu_;
  Bytes data_;
  std::shared_ptr<Doorbell> bell_;
  std::atomic<uint64_t> remote_writes_{0};
};

enum class CompletionStatus : uint8_t { kOk, kOutOfBounds, kInvalidBuffer, kConnectionClosed };

const char* completion_status_name(CompletionStatus s);

struct CompletionEvent {
  uint64_t request_id = 0;
  CompletionStatus status = CompletionStatus::kOk;

  bool ok() const { return status == CompletionStatus::kOk; }
  /// Throws the matching error for a failed completion.
  void check() const;
};

/// Per-node traffic, counted in whole frames (header plus payload).
struct TrafficStats {
  uint64_t tx_bytes = 0;
  uint64_t rx_bytes = 0;
  uint64_t tx_frames = 0;
  uint64_t rx_frames = 0;
  uint64_t dropped_frames = 0;

  uint64_t total() const { return tx_bytes + rx_bytes; }
  TrafficStats operator-(const TrafficStats& o) const {
    return {tx_bytes - o.tx_bytes, rx_bytes - o.rx_bytes, tx_frames - o.tx_frames, rx_frames - o.rx_frames,
            dropped_frames - o.dropped_frames};
  }
};

class TrafficCounters {
 public:
  void on_tx(size_t payload);
  void on_rx(size_t payload);
  void on_drop() { dropped_.fetch_add(1, std::memory_order_relaxed); }
  TrafficStats snapshot() const;

 private:
  std::atomic<uint64_t> tx_bytes_{0}, rx_bytes_{0}, tx_frames_{0}, rx_frames_{0}, dropped_{0};
};

class Connection {
 public:
  virtual ~Connection() = default;

  /// Registers local memory the peer may write into. The peer learns the id
  /// through some message of the caller's choosing.
  virtual std::shared_ptr<RegisteredBuffer> register_buffer(size_t length, std::shared_ptr<Doorbell> bell = nullptr);
  virtual void deregister_buffer(BufferId id);
  std::shared_ptr<RegisteredBuffer> local_buffer(BufferId id) const;

  /// Writes `bytes` into the peer's buffer at `offset`. Writes issued on one
  /// connection are applied in issue order.
  virtual CompletionEvent remote_write(BufferId remote, uint64_t offset, ByteView bytes) = 0;

  /// Length of a peer buffer as last announced, or 0 if unknown/deregistered.
  size_t remote_buffer_size(BufferId id) const;

  virtual void close() = 0;
  virtual bool closed() const = 0;

  const std::string& peer() const { return peer_; }

 protected:
  explicit Connection(std::string peer) : peer_(std::move(peer)) {}

  /// Backend hook: tell the peer about a (de)registration. length 0 = removed.
  virtual void announce(BufferId id, size_t length) = 0;
  void note_remote_buffer(BufferId id, size_t length);
  std::shared_ptr<RegisteredBuffer> add_local(BufferId id, size_t length, std::shared_ptr<Doorbell> bell);

  mutable std::mutex buffers_mu_;
  std::unordered_map<BufferId, std::shared_ptr<RegisteredBuffer>> local_;
  std::unordered_map<BufferId, size_t> remote_;
  BufferId next_id_ = kBootstrapBuffer + 1;
  std::atomic<uint64_t> next_request_{1};
  std::string peer_;
};

using ConnectionPtr = std::shared_ptr<Connection>;

class Listener {
 public:
  virtual ~Listener() = default;
  /// Waits for an inbound connection; null on timeout or after close().
  virtual ConnectionPtr accept(std::chrono::milliseconds timeout) = 0;
  virtual void close() = 0;
  virtual std::string address() const = 0;
};

/// A node's network interface. Traffic of every connection it opens or
/// accepts is counted here.
class Nic {
 public:
  virtual ~Nic() = default;

  /// Each side of a new connection registers its bootstrap buffer (id 0)
  /// of the given length before the connection is returned.
  /// `bell`, if given, is attached to every bootstrap buffer on this side.
  virtual std::unique_ptr<Listener> listen(const std::string& address, size_t bootstrap_bytes,
                                           std::shared_ptr<Doorbell> bell = nullptr) = 0;
  virtual ConnectionPtr connect(const std::string& address, size_t bootstrap_bytes, std::chrono::milliseconds timeout,
                                std::shared_ptr<Doorbell> bell = nullptr) = 0;
  /// Closes every connection and listener of this node (crash emulation).
  virtual void shutdown() = 0;

  const std::string& name() const { return name_; }
  TrafficStats stats() const { return counters_->snapshot(); }
  const std::shared_ptr<TrafficCounters>& counters() const { return counters_; }

 protected:
  explicit Nic(std::string name) : name_(std::move(name)), counters_(std::make_shared<TrafficCounters>()) {}

  std::string name_;
  std::shared_ptr<TrafficCounters> counters_;
};

// --- in-process backend -------------------------------------------------------

struct InProcOptions {
  std::chrono::microseconds write_latency{0};
};

class InProcFabric;

/// Creates a NIC attached to a shared in-process fabric.
std::unique_ptr<Nic> make_inproc_nic(const std::shared_ptr<InProcFabric>& fabric, std::string name);

/// Address space for in-process NICs.
class InProcFabric : public std::enable_shared_from_this<InProcFabric> {
 public:
  static std::shared_ptr<InProcFabric> create(InProcOptions options = {});

  InProcOptions options() const;
  void set_write_latency(std::chrono::microseconds latency);
  /// Extra latency for writes delivered to one node.
  void set_node_latency(const std::string& node, std::chrono::microseconds latency);
  std::chrono::microseconds latency_to(const std::string& node) const;

  struct Impl;
  Impl& impl() { return *impl_; }

 private:
  explicit InProcFabric(InProcOptions options);
  std::shared_ptr<Impl> impl_;
};

// --- socket backend -----------------------------------------------------------

/// TCP loopback/LAN backend; addresses are "host:port" (port 0 = ephemeral
/// when listening; the listener reports the bound address).
std::unique_ptr<Nic> make_socket_nic(std::string name);

}  // namespace replkv::transport
