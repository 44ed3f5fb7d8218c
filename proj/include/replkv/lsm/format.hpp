#pragma once

// On-device formats, format version 1. All integers little-endian.
//
// Value-log record:
//   [key_len:u32][value_len:u32][key][value]
//   bit 31 of value_len marks a tombstone; the low 31 bits hold the length.
//   Records never straddle a segment; unused segment tails are zero, so a
//   zero key_len terminates iteration and is rejected by decode.
//
// B+-tree node (kNodeSize bytes, packed back to back inside a segment):
//   header [type:u8][reserved:u8][count:u16][reserved:u32]
//   leaf:      count x [prefix:12][flags:u8][reserved:3][value_loc:u64]
//   internal:  [child0:u64] then count x [key_len:u8][key][child:u64]
//              count is the number of pivots; children = count + 1.

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

#include "replkv/common.hpp"
#include "replkv/device.hpp"

namespace replkv::lsm {

constexpr uint32_t kFormatVersion = 1;

constexpr size_t kMaxKeySize = 255;
constexpr size_t kMaxValueSize = 64 * 1024;

constexpr size_t kRecordHeaderSize = 8;
constexpr uint32_t kTombstoneBit = 1u << 31;

constexpr size_t kKeyPrefixSize = 12;
constexpr size_t kNodeSize = 4096;
constexpr size_t kNodeHeaderSize = 8;
constexpr size_t kLeafEntrySize = 24;
constexpr size_t kLeafCapacity = (kNodeSize - kNodeHeaderSize) / kLeafEntrySize;

enum class NodeType : uint8_t { kEmpty = 0, kLeaf = 1, kInternal = 2 };

using KeyPrefix = std::array<uint8_t, kKeyPrefixSize>;

/// First kKeyPrefixSize bytes of `key`, zero padded. Prefix order is a
/// non-strict projection of full-key order.
KeyPrefix make_prefix(std::string_view key);

struct LogRecord {
  std::string key;
  std::string value;
  bool tombstone = false;
};

inline size_t record_size(size_t key_len, size_t value_len) { return kRecordHeaderSize + key_len + value_len; }

void validate_kv(std::string_view key, std::string_view value);

Bytes encode_record(std::string_view key, std::string_view value, bool tombstone);

struct RecordHeader {
  uint32_t key_len = 0;
  uint32_t value_len = 0;
  bool tombstone = false;

  size_t total() const { return record_size(key_len, value_len); }
};

/// Validates a header read at within-segment offset `within`. Throws CorruptRecord.
RecordHeader decode_record_header(ByteView header, uint64_t within, uint64_t segment_size);

struct LeafEntry {
  KeyPrefix prefix{};
  DeviceOffset value_loc;
  bool tombstone = false;
};

// Node accessors operate on exactly kNodeSize bytes.
NodeType node_type(ByteView node);
uint16_t node_count(ByteView node);

LeafEntry leaf_entry(ByteView node, size_t i);
void write_leaf_header(MutableByteView node, uint16_t count);
void write_leaf_entry(MutableByteView node, size_t i, const LeafEntry& e);

struct InternalNode {
  std::vector<std::string> pivots;
  std::vector<DeviceOffset> children;  // pivots.size() + 1
};

InternalNode parse_internal(ByteView node);
size_t internal_entry_size(size_t key_len);

/// Applies `fn` to each value-log pointer of a leaf node in place.
template <typename Fn>
void rewrite_leaf_pointers(MutableByteView node, Fn&& fn) {
  const uint16_t n = node_count(node);
  for (size_t i = 0; i < n; ++i) {
    uint8_t* slot = node.data() + kNodeHeaderSize + i * kLeafEntrySize + 16;
    store_le<uint64_t>(slot, fn(DeviceOffset{load_le<uint64_t>(slot)}).value);
  }
}

/// Applies `fn` to each child pointer of an internal node in place.
template <typename Fn>
void rewrite_internal_pointers(MutableByteView node, Fn&& fn) {
  const uint16_t n = node_count(node);
  size_t pos = kNodeHeaderSize;
  auto rewrite = [&](size_t at) {
    uint8_t* slot = node.data() + at;
    store_le<uint64_t>(slot, fn(DeviceOffset{load_le<uint64_t>(slot)}).value);
  };
  rewrite(pos);
  pos += 8;
  for (size_t i = 0; i < n; ++i) {
    const size_t klen = node[pos];
    pos += 1 + klen;
    rewrite(pos);
    pos += 8;
  }
}

}  // namespace replkv::lsm
