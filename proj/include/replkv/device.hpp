#pragma once

#include <atomic>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <set>
#include <vector>

#include "replkv/common.hpp"

namespace replkv {

/// Byte offset into a device's flat address space.
struct DeviceOffset {
  uint64_t value = 0;

  friend auto operator<=>(const DeviceOffset&, const DeviceOffset&) = default;
  DeviceOffset operator+(uint64_t delta) const { return DeviceOffset{value + delta}; }
};

enum class SegmentKind : uint8_t {
  kFree = 0,
  kValueLog = 1,
  kIndexLeaf = 2,
  kIndexInternal = 3,
};

struct Segment {
  DeviceOffset start;
  uint64_t size = 0;
  SegmentKind kind = SegmentKind::kFree;

  friend bool operator==(const Segment&, const Segment&) = default;
};

struct DeviceStats {
  uint64_t bytes_read = 0;
  uint64_t bytes_written = 0;

  uint64_t traffic() const { return bytes_read + bytes_written; }
  DeviceStats operator-(const DeviceStats& o) const {
    return {bytes_read - o.bytes_read, bytes_written - o.bytes_written};
  }
};

// Segment arithmetic. The segment size must be a power of two; the start of
// the segment holding `off` is then a mask of its high bits.
inline DeviceOffset segment_start_of(DeviceOffset off, uint64_t segment_size) {
  return DeviceOffset{off.value & ~(segment_size - 1)};
}

inline uint64_t within_segment(DeviceOffset off, uint64_t segment_size) {
  return off.value & (segment_size - 1);
}

/// Segment-allocated block device with exact I/O accounting. Backends only
/// provide raw byte movement; allocation, bounds checks and counters live here.
///
/// Allocation always hands out the lowest free address, which keeps layouts
/// deterministic across runs.
class Device {
 public:
  Device(uint64_t capacity, uint64_t segment_size);
  virtual ~Device() = default;

  Device(const Device&) = delete;
  Device& operator=(const Device&) = delete;

  uint64_t capacity() const { return capacity_; }
  uint64_t segment_size() const { return segment_size_; }
  uint64_t segment_count() const { return capacity_ / segment_size_; }

  Segment allocate_segment(SegmentKind kind);
  void free_segment(const Segment& seg);
  SegmentKind kind_of(DeviceOffset segment_start) const;
  uint64_t free_segment_count() const;
  uint64_t allocated_segment_count() const;

  void write_at(DeviceOffset off, ByteView bytes);
  void read_at(DeviceOffset off, MutableByteView out);
  Bytes read_at(DeviceOffset off, size_t len);

  DeviceOffset segment_start_of(DeviceOffset off) const {
    return replkv::segment_start_of(off, segment_size_);
  }
  uint64_t within_segment(DeviceOffset off) const { return replkv::within_segment(off, segment_size_); }

  DeviceStats stats() const {
    return {bytes_read_.load(std::memory_order_relaxed), bytes_written_.load(std::memory_order_relaxed)};
  }

  virtual void flush() {}

 protected:
  virtual void raw_write(uint64_t off, ByteView bytes) = 0;
  virtual void raw_read(uint64_t off, MutableByteView out) = 0;

 private:
  void check_range(DeviceOffset off, size_t len) const;

  const uint64_t capacity_;
  const uint64_t segment_size_;

  mutable std::mutex alloc_mu_;
  std::vector<SegmentKind> kinds_;
  std::set<uint64_t> freed_;   // segment indices below high_water_
  uint64_t high_water_ = 0;    // segments at or above this index were never handed out
  uint64_t allocated_ = 0;

  std::atomic<uint64_t> bytes_read_{0};
  std::atomic<uint64_t> bytes_written_{0};
};

/// Device held in memory. Segments are materialized on first touch, zero-filled.
class MemoryDevice final : public Device {
 public:
  MemoryDevice(uint64_t capacity, uint64_t segment_size);

 protected:
  void raw_write(uint64_t off, ByteView bytes) override;
  void raw_read(uint64_t off, MutableByteView out) override;

 private:
  uint8_t* chunk(uint64_t index);

  std::mutex chunk_mu_;
  std::vector<std::atomic<uint8_t*>> chunks_;
  std::vector<std::unique_ptr<uint8_t[]>> owned_;
};

/// Device backed by a single flat file, sized to capacity (sparse).
class FileDevice final : public Device {
 public:
  FileDevice(const std::filesystem::path& path, uint64_t capacity, uint64_t segment_size);
  ~FileDevice() override;

  void flush() override;

 protected:
  void raw_write(uint64_t off, ByteView bytes) override;
  void raw_read(uint64_t off, MutableByteView out) override;

 private:
  int fd_ = -1;
};

}  // namespace replkv
