#pragma once

// Primary-backup replication of one region.
//
// Value-log records are remote-written into a buffer each backup registered
// on the primary's connection, at the record's offset within its log
// segment. When the primary seals a segment it sends FLUSH_LOG and every
// backup persists the buffer as its own log segment. Levels are kept up to
// date either by shipping every compacted level (send_index) or by backups
// ingesting flushed segments into their own L0 (build_index).
//
// Payloads (little-endian):
//   REPL_BUFFER_INFO  [region:u32]                          -> [buf_id:u32][len:u64]
//   FLUSH_LOG         [region:u32][primary_start:u64][used:u64][segment_index:u64][flags:u8]
//   INDEX_BEGIN       [region:u32][segment_count:u32]       -> [buf_id:u32]
//   INDEX_SEGMENT     [region:u32][seq:u32][length:u64]     (serialized segment at buffer offset 0)
//   INDEX_FINALIZE    [region:u32][manifest:48]             -> [local_root:u64]
//   INDEX_ABORT       [region:u32]

#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "replkv/index_wire.hpp"
#include "replkv/lsm/engine.hpp"
#include "replkv/rpc/client.hpp"
#include "replkv/rpc/server.hpp"

namespace replkv::replication {

enum class Mode : uint8_t { kNone = 0, kSendIndex = 1, kBuildIndex = 2 };

const char* mode_name(Mode mode);
/// Accepts "none", "send_index", "build_index". Throws kConfig.
Mode parse_mode(std::string_view name);

/// Engine options every member of a region uses in `mode`. Build Index runs
/// with half the L0 budget, so that primary plus backup L0 memory matches
/// one full-size L0.
lsm::EngineOptions engine_options(Mode mode, const lsm::EngineOptions& base);

namespace flush_flags {
constexpr uint8_t kCatchUp = 0x01;      // segment copied to a new member; no ingest
constexpr uint8_t kCatchUpDone = 0x02;  // new member is complete; rebuild L0 if building
}  // namespace flush_flags

struct FlushLogRequest {
  uint32_t region = 0;
  DeviceOffset primary_start;
  uint64_t used = 0;
  uint64_t segment_index = 0;
  uint8_t flags = 0;

  Bytes encode() const;
  static FlushLogRequest decode(ByteView payload);
};

struct IndexSegmentRequest {
  uint32_t region = 0;
  uint32_t seq = 0;
  uint64_t length = 0;

  Bytes encode() const;
  static IndexSegmentRequest decode(ByteView payload);
};

/// Region id every replication payload starts with.
uint32_t payload_region(ByteView payload);

bool is_replication_op(rpc::Op op);

struct BackupStats {
  uint64_t flushed_segments = 0;
  uint64_t flushed_bytes = 0;
  uint64_t shipped_segments = 0;  // level segments received
  uint64_t installed_levels = 0;
  uint64_t aborted_transfers = 0;
  uint64_t compactions = 0;       // compactions the backup ran itself
  uint64_t l0_peak_entries = 0;
  uint64_t ingested_records = 0;
};

/// Backup side of one region.
class BackupRegion {
 public:
  BackupRegion(uint32_t region, Device& device, Mode mode, const lsm::EngineOptions& base);
  ~BackupRegion();

  BackupRegion(const BackupRegion&) = delete;
  BackupRegion& operator=(const BackupRegion&) = delete;

  /// Dispatches one replication request. `req.conn` must be set.
  Bytes handle(const rpc::Request& req);

  /// Registers the replication buffer on `conn`, replacing any earlier one.
  std::shared_ptr<transport::RegisteredBuffer> attach(transport::Connection& conn);
  void flush_log(const FlushLogRequest& req);
  transport::BufferId index_begin(transport::Connection& conn, uint32_t segment_count);
  void index_segment(const IndexSegmentRequest& req);
  DeviceOffset index_finalize(const CompactionManifest& manifest);
  void index_abort();

  /// Bytes of whole records currently held in the replication buffer.
  uint64_t buffer_fill() const;
  std::shared_ptr<transport::RegisteredBuffer> buffer() const;

  struct Promotion {
    std::unique_ptr<lsm::Engine> engine;
    uint64_t tail_bytes = 0;      // moved from the replication buffer into the log
    uint64_t replayed_bytes = 0;  // log bytes read to rebuild L0
  };
  /// Turns the replica into a primary engine: the unflushed buffer becomes
  /// the open log tail and L0 is rebuilt from the log after the level
  /// watermark. The region object is unusable afterwards.
  Promotion promote();

  uint32_t region() const { return region_; }
  Mode mode() const { return mode_; }
  lsm::Engine& engine() { return *engine_; }
  const LogSegmentMap& log_map() const { return log_map_; }
  BackupStats stats() const;

 private:
  uint64_t buffer_fill_locked() const;
  void release_index_buffer(transport::Connection& conn);

  const uint32_t region_;
  Device& device_;
  const Mode mode_;
  mutable std::mutex mu_;
  std::unique_ptr<lsm::Engine> engine_;
  LogSegmentMap log_map_;
  std::shared_ptr<transport::RegisteredBuffer> buffer_;
  std::shared_ptr<transport::RegisteredBuffer> index_buffer_;
  transport::Connection* index_conn_ = nullptr;
  std::unique_ptr<IndexTransfer> transfer_;
  BackupStats stats_;
};

struct PrimaryStats {
  uint64_t writes = 0;
  uint64_t replicated_records = 0;
  uint64_t replicated_bytes = 0;  // record bytes remote-written, summed over backups
  uint64_t flushes_sent = 0;
  uint64_t index_transfers = 0;
  uint64_t shipped_segments = 0;
  uint64_t shipped_bytes = 0;     // serialized segment bytes written, summed over backups
  uint64_t backup_failures = 0;
};

/// Primary side of one region: owns the engine and drives its backups.
/// Writes are serialized; reads go straight to the engine.
class PrimaryRegion {
 public:
  PrimaryRegion(uint32_t region, Device& device, Mode mode, const lsm::EngineOptions& base);
  /// Takes over an engine recovered by BackupRegion::promote.
  PrimaryRegion(uint32_t region, Mode mode, std::unique_ptr<lsm::Engine> engine);
  ~PrimaryRegion();

  PrimaryRegion(const PrimaryRegion&) = delete;
  PrimaryRegion& operator=(const PrimaryRegion&) = delete;

  /// Acknowledged once every backup holds the record in memory. Throws
  /// BackupUnreachable (and acknowledges nothing) while a backup has failed
  /// and is still part of the replica set.
  void put(std::string_view key, std::string_view value);
  void del(std::string_view key);
  std::optional<std::string> get(std::string_view key) const { return engine_->get(key); }
  std::vector<std::pair<std::string, std::string>> scan(std::string_view start, size_t count) const {
    return engine_->scan(start, count);
  }
  /// Forces an L0 flush (and the resulting shipping).
  void flush();

  /// Copies the region to a backup that just opened it and adds it to the
  /// replica set. Writes wait meanwhile; reads continue.
  void add_backup(uint32_t server_id, std::shared_ptr<rpc::RpcClient> client);
  void remove_backup(uint32_t server_id);
  std::vector<uint32_t> backups() const;
  std::vector<uint32_t> failed_backups() const;

  uint32_t region() const { return region_; }
  Mode mode() const { return mode_; }
  lsm::Engine& engine() { return *engine_; }
  const lsm::Engine& engine() const { return *engine_; }
  PrimaryStats stats() const;

 private:
  struct Link {
    uint32_t server_id = 0;
    std::shared_ptr<rpc::RpcClient> client;
    transport::BufferId buffer = 0;
    bool failed = false;
  };

  void install_hooks();
  void write(std::string_view key, std::string_view value, bool tombstone);
  void throw_if_degraded_locked() const;
  void fail(Link& link, const std::exception& e);
  void on_record(DeviceOffset ptr, const Bytes& record);
  void on_sealed(const lsm::SealedSegment& sealed);
  void on_compaction(const lsm::CompactionJob& job);
  void send_flush(Link& link, const FlushLogRequest& req);
  void ship(Link& link, const TransferPlan& plan);

  const uint32_t region_;
  const Mode mode_;
  std::unique_ptr<lsm::Engine> engine_;

  std::mutex write_mu_;         // serializes writes and membership changes
  mutable std::mutex links_mu_;  // guards links_ for readers outside write_mu_
  std::vector<Link> links_;
  PrimaryStats stats_;
};

}  // namespace replkv::replication
