#pragma once

// Level shipping. A committed compaction is turned into a stream of
// serialized segments (dependency order) followed by a manifest; the
// receiving side rewrites every pointer into its own address space.
//
// SerializedSegment:
//   [kind:u8][reserved:3][primary_start:u64][seq:u32][payload:segment_size]
// CompactionManifest (48 B):
//   [region:u32][source_level:u8][target_level:u8][height:u8][reserved:1]
//   [segment_count:u32][reserved:4][primary_root:u64][entry_count:u64]
//   [covered_segment:u64][covered_offset:u64]

#include <memory>
#include <optional>
#include <unordered_map>
#include <vector>

#include "replkv/device.hpp"
#include "replkv/lsm/engine.hpp"

namespace replkv {

/// Segment start translation table (primary start -> local start).
class SegmentMap {
 public:
  void insert(DeviceOffset primary_start, DeviceOffset local_start);
  std::optional<DeviceOffset> find(DeviceOffset primary_start) const;
  bool erase(DeviceOffset primary_start);
  void clear() { map_.clear(); }
  size_t size() const { return map_.size(); }
  bool empty() const { return map_.empty(); }
  /// Reverse table (local start -> primary start).
  SegmentMap inverse() const;

  auto begin() const { return map_.begin(); }
  auto end() const { return map_.end(); }

 private:
  std::unordered_map<uint64_t, uint64_t> map_;
};

using LogSegmentMap = SegmentMap;
using IndexMap = SegmentMap;

/// map[segment_start_of(ptr)] + within_segment(ptr). Throws MissingMapping.
DeviceOffset translate_pointer(DeviceOffset ptr, const SegmentMap& map, uint64_t segment_size);

inline DeviceOffset translate_log_pointer(DeviceOffset ptr, const LogSegmentMap& map, uint64_t segment_size) {
  return translate_pointer(ptr, map, segment_size);
}
inline DeviceOffset translate_index_pointer(DeviceOffset ptr, const IndexMap& map, uint64_t segment_size) {
  return translate_pointer(ptr, map, segment_size);
}

enum class WireSegmentKind : uint8_t { kLeaf = 1, kInternal = 2 };

constexpr size_t kSerializedSegmentHeaderSize = 16;
constexpr size_t kManifestSize = 48;

/// Bytes up to the end of the last non-empty node of a level segment image.
uint64_t used_node_bytes(ByteView image);

struct SerializedSegment {
  WireSegmentKind kind = WireSegmentKind::kLeaf;
  DeviceOffset primary_start;
  uint32_t seq = 0;
  std::shared_ptr<const Bytes> payload;  // exactly segment_size bytes

  Bytes encode() const;
  static SerializedSegment decode(ByteView wire, uint64_t segment_size);
};

struct CompactionManifest {
  uint32_t region = 0;
  uint8_t source_level = 0;
  uint8_t target_level = 1;
  uint8_t height = 0;
  uint32_t segment_count = 0;  // 0 = the target level is empty after the merge
  DeviceOffset primary_root;
  uint64_t entry_count = 0;
  lsm::LogPosition covered;

  Bytes encode() const;
  static CompactionManifest decode(ByteView wire);
};

struct TransferPlan {
  std::vector<SerializedSegment> segments;  // leaves first, then internals
  CompactionManifest manifest;
};

/// Primary side: segments of the job's level in dependency order plus the
/// manifest. Uses the job's retained images, reading from the device only
/// for segments without one.
TransferPlan plan_transfer(const lsm::CompactionJob& job, uint32_t region, Device& device);

struct TransferStats {
  uint64_t segments = 0;
  uint64_t rewritten_log_pointers = 0;
  uint64_t rewritten_index_pointers = 0;
  uint64_t bytes_written = 0;
};

/// Backup side of one level transfer. Segments are allocated as they arrive
/// and handed to the new level at finalize; an abandoned transfer returns
/// them to the device and leaves the engine untouched.
class IndexTransfer {
 public:
  IndexTransfer(lsm::Engine& engine, const LogSegmentMap& log_map);
  ~IndexTransfer();

  IndexTransfer(const IndexTransfer&) = delete;
  IndexTransfer& operator=(const IndexTransfer&) = delete;

  Segment apply(const SerializedSegment& seg);
  /// Installs the rewritten level into the engine. Returns its local root.
  DeviceOffset finalize(const CompactionManifest& manifest);
  void abort();

  uint32_t applied() const { return next_seq_; }
  bool finalized() const { return finalized_; }
  const IndexMap& index_map() const { return index_map_; }
  const TransferStats& stats() const { return stats_; }

 private:
  Segment apply_leaf(const SerializedSegment& seg);
  Segment apply_internal(const SerializedSegment& seg);
  Segment store(SegmentKind kind, const SerializedSegment& seg, const Bytes& image);

  lsm::Engine& engine_;
  Device& device_;
  const LogSegmentMap& log_map_;
  IndexMap index_map_;
  std::vector<Segment> leaves_;
  std::vector<Segment> internals_;
  std::unordered_map<uint64_t, uint64_t> used_;
  uint32_t next_seq_ = 0;
  bool finalized_ = false;
  TransferStats stats_;
};

}  // namespace replkv
