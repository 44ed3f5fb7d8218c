#pragma once

#include <compare>
#include <functional>
#include <mutex>
#include <optional>
#include <unordered_map>
#include <vector>

#include "replkv/device.hpp"
#include "replkv/lsm/format.hpp"

namespace replkv::lsm {

/// Position in the log: segment ordinal (append order) plus within-segment offset.
struct LogPosition {
  uint64_t segment_index = 0;
  uint64_t offset = 0;

  friend auto operator<=>(const LogPosition&, const LogPosition&) = default;
};

struct SealedSegment {
  Segment segment;
  uint64_t index = 0;  // ordinal in the log
  uint64_t used = 0;   // bytes of records; the rest of the segment is zero
};

/// Append-only value log over device segments. The tail segment is staged in
/// memory and written to the device in one piece when it is sealed.
class ValueLog {
 public:
  struct Appended {
    DeviceOffset ptr;
    Bytes record;
    std::optional<SealedSegment> sealed;  // set when this append rolled the tail over
  };

  explicit ValueLog(Device& device);
  ~ValueLog();

  ValueLog(const ValueLog&) = delete;
  ValueLog& operator=(const ValueLog&) = delete;

  Appended append(std::string_view key, std::string_view value, bool tombstone);

  /// Starts a fresh tail segment. Seals the current tail first if it holds data.
  DeviceOffset start_segment();

  /// Copies pre-encoded bytes verbatim into the tail at `at`, which must be the
  /// current tail position.
  void append_raw(ByteView bytes, DeviceOffset at);

  /// Writes the tail to the device. Returns nothing if the tail is empty.
  std::optional<SealedSegment> seal();

  LogRecord read(DeviceOffset ptr) const;
  std::string read_key(DeviceOffset ptr) const;

  using RecordVisitor = std::function<void(DeviceOffset, LogPosition, const LogRecord&)>;

  /// Visits every record at or after `from` and before segment `end_segment`,
  /// in log order. The position passed along is the one just past the record.
  void for_each_record(LogPosition from, const RecordVisitor& fn, uint64_t end_segment = UINT64_MAX) const;

  /// Bytes of records at or after `from` (what a replay of that range reads).
  uint64_t bytes_after(LogPosition from) const;

  LogPosition end_position() const;
  std::optional<DeviceOffset> tail() const;
  uint64_t segment_count() const;
  std::vector<SealedSegment> segments() const;  // includes the open tail, if any
  Bytes segment_bytes(uint64_t index) const;    // used bytes of one segment

  Device& device() const { return device_; }

 private:
  struct SegmentInfo {
    Segment segment;
    uint64_t used = 0;
    bool sealed = false;
  };

  std::optional<SealedSegment> seal_locked();
  void open_tail_locked();
  const SegmentInfo* find_locked(DeviceOffset seg_start, uint64_t* index) const;
  void read_bytes(DeviceOffset off, MutableByteView out) const;

  Device& device_;
  const uint64_t segment_size_;

  mutable std::mutex mu_;
  std::vector<SegmentInfo> segments_;
  std::unordered_map<uint64_t, uint64_t> index_of_;  // segment start -> ordinal
  Bytes tail_;  // staging image of segments_.back() while it is open
};

}  // namespace replkv::lsm
