#pragma once

#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "replkv/device.hpp"
#include "replkv/lsm/level.hpp"
#include "replkv/lsm/value_log.hpp"

namespace replkv::lsm {

struct EngineOptions {
  uint32_t growth_factor = 4;
  uint64_t l0_capacity_keys = 64 * 1024;
  /// Keep in-memory images of freshly built level segments on the job, so
  /// they can be shipped without reading them back from the device.
  bool retain_level_images = false;
  /// Seal the open log segment before every L0 flush, so the flushed level
  /// only references sealed (and therefore replicated) log segments.
  bool seal_log_on_l0_flush = false;

  void validate() const;
};

/// A committed compaction: the new target level plus what is needed to ship it.
struct CompactionJob {
  uint32_t source_level = 0;  // 0 = L0 flush
  uint32_t target_level = 1;
  LevelPtr level;             // null when every entry was purged
  std::vector<std::pair<Segment, std::shared_ptr<const Bytes>>> images;
  LogPosition covered;        // every record before this position lives in levels >= 1
};

struct EngineHooks {
  std::function<void(const SealedSegment&)> on_log_sealed;
  std::function<void(DeviceOffset, const Bytes&)> on_record_appended;
  std::function<void(const CompactionJob&)> on_compaction;
};

struct EngineStats {
  uint64_t compactions = 0;  // every merge, including L0 flushes
  uint64_t l0_flushes = 0;
  uint64_t l0_entries = 0;
  uint64_t l0_peak_entries = 0;
  uint64_t ingested_records = 0;
  uint64_t installed_levels = 0;
  std::vector<uint64_t> level_entries;  // index 0 unused
};

struct PutResult {
  DeviceOffset ptr;
  uint32_t record_size = 0;
};

/// Single-region LSM store with key-value separation. L0 is an in-memory
/// sorted map from full key to value-log pointer; levels 1..n are B+-trees of
/// <key prefix, pointer> leaves on the device.
///
/// One writer at a time (puts, deletes, ingest, installs are serialized);
/// gets and scans run concurrently and observe whole levels only. Compaction
/// runs on the writer's thread and swaps the target level in at commit.
class Engine {
 public:
  Engine(Device& device, EngineOptions options, EngineHooks hooks = {});
  ~Engine();

  Engine(const Engine&) = delete;
  Engine& operator=(const Engine&) = delete;

  PutResult put(std::string_view key, std::string_view value);
  PutResult del(std::string_view key);
  std::optional<std::string> get(std::string_view key) const;
  std::vector<std::pair<std::string, std::string>> scan(std::string_view start_key, size_t count) const;

  /// Merges L0 into L1 and cascades deeper while levels exceed capacity.
  /// Returns the L0 -> L1 job (no-op job with null level if L0 was empty).
  CompactionJob flush_l0();
  /// Merges L_i into L_{i+1}. Returns nothing if L_i is empty.
  std::optional<CompactionJob> compact(uint32_t level);

  // Log access used by replicas.
  DeviceOffset log_start_segment();
  void log_append_raw(ByteView bytes, DeviceOffset at);
  std::optional<SealedSegment> log_seal();
  LogRecord log_read(DeviceOffset ptr) const { return log_.read(ptr); }
  const ValueLog& log() const { return log_; }

  /// Inserts every record of log segment `index` into L0 (backup-side index
  /// building). Returns the number of records ingested.
  uint64_t ingest_log_segment(uint64_t index);

  /// Installs a level built elsewhere as L_target; L_source (if >= 1) is
  /// cleared, mirroring the compaction that produced it.
  void install_level(uint32_t source_level, uint32_t target_level, LevelPtr level, LogPosition covered);

  /// Rebuilds L0 from every log record after the covered position. Returns the
  /// number of log bytes replayed.
  uint64_t replay_log();

  LogPosition covered_position() const;
  std::vector<LevelPtr> levels() const;  // index 0 unused
  uint64_t level_capacity(uint32_t level) const;
  EngineStats stats() const;
  const EngineOptions& options() const { return options_; }
  void set_hooks(EngineHooks hooks);
  Device& device() const { return device_; }

 private:
  struct L0Value {
    DeviceOffset ptr;
    bool tombstone = false;
  };
  using L0Map = std::map<std::string, L0Value, std::less<>>;

  PutResult write(std::string_view key, std::string_view value, bool tombstone);
  void insert_l0_locked(std::string key, L0Value v, LogPosition next_position);
  CompactionJob flush_l0_locked(LogPosition covered);
  std::optional<CompactionJob> compact_locked(uint32_t level);
  void cascade_locked();
  bool is_last_populated(uint32_t level) const;
  KeyResolver resolver() const;

  Device& device_;
  EngineOptions options_;
  EngineHooks hooks_;
  ValueLog log_;

  std::mutex writer_mu_;
  mutable std::mutex state_mu_;
  L0Map l0_;
  std::shared_ptr<const L0Map> imm_l0_;
  std::vector<LevelPtr> levels_{nullptr};
  LogPosition covered_;
  EngineStats stats_;
};

}  // namespace replkv::lsm
