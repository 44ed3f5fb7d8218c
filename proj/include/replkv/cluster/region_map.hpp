#pragma once

// Region metadata. An entry encodes to 64 bytes:
//   [start_key:24][end_key:24][primary:u32][backup0:u32][backup1:u32]
//   [region_id:u16][backup_count:u8][flags:u8]
// Keys are zero-padded. An empty start key is the beginning of the keyspace
// and an empty end key its end. The map encodes as
//   [version:u64][count:u32] followed by the entries.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "replkv/common.hpp"

namespace replkv::cluster {

constexpr size_t kRegionEntrySize = 64;
constexpr size_t kMaxBoundaryKey = 24;
constexpr size_t kMaxBackups = 2;
constexpr size_t kRegionMapHeaderSize = 12;
constexpr uint32_t kNoServer = 0xFFFFFFFF;

namespace region_flags {
constexpr uint8_t kDegraded = 0x01;  // fewer backups than configured
constexpr uint8_t kLost = 0x02;      // primary and every backup failed
}  // namespace region_flags

struct RegionEntry {
  uint16_t id = 0;
  std::string start_key;  // inclusive
  std::string end_key;    // exclusive; empty = unbounded
  uint32_t primary = kNoServer;
  std::vector<uint32_t> backups;
  uint8_t flags = 0;

  bool contains(std::string_view key) const;
  bool degraded() const { return flags & region_flags::kDegraded; }
  bool lost() const { return flags & region_flags::kLost; }
  /// Members in role order: primary first.
  std::vector<uint32_t> members() const;

  /// Throws InvalidArgument for keys that do not fit or end in a zero byte,
  /// or for more than two backups.
  void encode(MutableByteView out) const;
  Bytes encode() const;
  static RegionEntry decode(ByteView in);

  bool operator==(const RegionEntry&) const = default;
};

class RegionMap {
 public:
  RegionMap() = default;
  RegionMap(uint64_t version, std::vector<RegionEntry> entries);

  uint64_t version() const { return version_; }
  void set_version(uint64_t v) { version_ = v; }
  const std::vector<RegionEntry>& entries() const { return entries_; }
  std::vector<RegionEntry>& entries() { return entries_; }
  size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  /// The single entry whose range holds `key`.
  const RegionEntry& lookup(std::string_view key) const;
  const RegionEntry* find(uint16_t id) const;
  RegionEntry* find(uint16_t id);

  /// Sorted, contiguous, covering and ids unique. Throws InvalidArgument.
  void validate() const;

  Bytes encode() const;
  static RegionMap decode(ByteView in);

  bool operator==(const RegionMap&) const = default;

 private:
  uint64_t version_ = 0;
  std::vector<RegionEntry> entries_;
};

/// Boundaries that split keys of the form prefix + 20-digit decimal of a
/// 64-bit number into `n` equal ranges. Returns n+1 keys, first and last empty.
std::vector<std::string> uniform_boundaries(size_t n, const std::string& prefix);

/// Places `regions` ranges over `servers`: region i has primary
/// servers[i % S] and backups the next `backups` servers in ring order.
RegionMap make_region_map(size_t regions, const std::vector<uint32_t>& servers, size_t backups,
                          const std::string& key_prefix);

}  // namespace replkv::cluster
