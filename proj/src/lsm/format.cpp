#include "replkv/lsm/format.hpp"

#include <algorithm>

#include <fmt/format.h>

namespace replkv::lsm {

KeyPrefix make_prefix(std::string_view key) {
  KeyPrefix p{};
  std::copy_n(key.begin(), std::min(key.size(), kKeyPrefixSize), p.begin());
  return p;
}

void validate_kv(std::string_view key, std::string_view value) {
  if (key.empty() || key.size() > kMaxKeySize) {
    raise(ErrorCode::kInvalidArgument, fmt::format("key length {} outside 1..{}", key.size(), kMaxKeySize));
  }
  if (value.size() > kMaxValueSize) {
    raise(ErrorCode::kInvalidArgument, fmt::format("value length {} exceeds {}", value.size(), kMaxValueSize));
  }
}

Bytes encode_record(std::string_view key, std::string_view value, bool tombstone) {
  Bytes out(record_size(key.size(), value.size()));
  store_le<uint32_t>(out.data(), static_cast<uint32_t>(key.size()));
  store_le<uint32_t>(out.data() + 4, static_cast<uint32_t>(value.size()) | (tombstone ? kTombstoneBit : 0u));
  std::copy(key.begin(), key.end(), out.begin() + kRecordHeaderSize);
  std::copy(value.begin(), value.end(), out.begin() + kRecordHeaderSize + key.size());
  return out;
}

RecordHeader decode_record_header(ByteView header, uint64_t within, uint64_t segment_size) {
  if (header.size() < kRecordHeaderSize) raise(ErrorCode::kCorruptRecord, "short record header");
  RecordHeader h;
  h.key_len = load_le<uint32_t>(header.data());
  const uint32_t raw = load_le<uint32_t>(header.data() + 4);
  h.tombstone = (raw & kTombstoneBit) != 0;
  h.value_len = raw & ~kTombstoneBit;
  if (h.key_len == 0 || h.key_len > kMaxKeySize || h.value_len > kMaxValueSize ||
      within + h.total() > segment_size) {
    raise(ErrorCode::kCorruptRecord,
          fmt::format("bad record header at within-segment offset {:#x} (key_len={}, value_len={})", within,
                      h.key_len, h.value_len));
  }
  return h;
}

NodeType node_type(ByteView node) { return static_cast<NodeType>(node[0]); }

uint16_t node_count(ByteView node) { return load_le<uint16_t>(node.data() + 2); }

LeafEntry leaf_entry(ByteView node, size_t i) {
  const uint8_t* p = node.data() + kNodeHeaderSize + i * kLeafEntrySize;
  LeafEntry e;
  std::copy_n(p, kKeyPrefixSize, e.prefix.begin());
  e.tombstone = (p[12] & 1) != 0;
  e.value_loc = DeviceOffset{load_le<uint64_t>(p + 16)};
  return e;
}

void write_leaf_header(MutableByteView node, uint16_t count) {
  node[0] = static_cast<uint8_t>(NodeType::kLeaf);
  node[1] = 0;
  store_le<uint16_t>(node.data() + 2, count);
  store_le<uint32_t>(node.data() + 4, 0);
}

void write_leaf_entry(MutableByteView node, size_t i, const LeafEntry& e) {
  uint8_t* p = node.data() + kNodeHeaderSize + i * kLeafEntrySize;
  std::copy(e.prefix.begin(), e.prefix.end(), p);
  p[12] = e.tombstone ? 1 : 0;
  p[13] = p[14] = p[15] = 0;
  store_le<uint64_t>(p + 16, e.value_loc.value);
}

size_t internal_entry_size(size_t key_len) { return 1 + key_len + 8; }

InternalNode parse_internal(ByteView node) {
  if (node_type(node) != NodeType::kInternal) raise(ErrorCode::kCorruptRecord, "expected internal node");
  InternalNode out;
  const uint16_t n = node_count(node);
  size_t pos = kNodeHeaderSize;
  out.children.reserve(n + 1u);
  out.pivots.reserve(n);
  out.children.push_back(DeviceOffset{load_le<uint64_t>(node.data() + pos)});
  pos += 8;
  for (size_t i = 0; i < n; ++i) {
    const size_t klen = node[pos++];
    if (pos + klen + 8 > node.size()) raise(ErrorCode::kCorruptRecord, "internal node overflows");
    out.pivots.emplace_back(reinterpret_cast<const char*>(node.data() + pos), klen);
    pos += klen;
    out.children.push_back(DeviceOffset{load_le<uint64_t>(node.data() + pos)});
    pos += 8;
  }
  return out;
}

}  // namespace replkv::lsm
