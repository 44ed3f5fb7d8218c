#include "replkv/cluster/region_map.hpp"

#include <algorithm>

#include <fmt/format.h>

namespace replkv::cluster {

namespace {

void put_key(uint8_t* dst, const std::string& key) {
  if (key.size() > kMaxBoundaryKey) {
    raise(ErrorCode::kInvalidArgument, fmt::format("region boundary of {} bytes exceeds {}", key.size(), kMaxBoundaryKey));
  }
  if (!key.empty() && key.back() == '\0') raise(ErrorCode::kInvalidArgument, "region boundary ends in a zero byte");
  std::memset(dst, 0, kMaxBoundaryKey);
  std::memcpy(dst, key.data(), key.size());
}

std::string get_key(const uint8_t* src) {
  size_t n = kMaxBoundaryKey;
  while (n > 0 && src[n - 1] == 0) --n;
  return {reinterpret_cast<const char*>(src), n};
}

}  // namespace

bool RegionEntry::contains(std::string_view key) const {
  return key >= start_key && (end_key.empty() || key < end_key);
}

std::vector<uint32_t> RegionEntry::members() const {
  std::vector<uint32_t> out{primary};
  out.insert(out.end(), backups.begin(), backups.end());
  return out;
}

void RegionEntry::encode(MutableByteView out) const {
  if (out.size() < kRegionEntrySize) raise(ErrorCode::kOutOfBounds, "region entry buffer too small");
  if (backups.size() > kMaxBackups) raise(ErrorCode::kInvalidArgument, "a region has at most two backups");
  uint8_t* p = out.data();
  put_key(p, start_key);
  put_key(p + 24, end_key);
  store_le<uint32_t>(p + 48, primary);
  store_le<uint32_t>(p + 52, backups.size() > 0 ? backups[0] : kNoServer);
  store_le<uint32_t>(p + 56, backups.size() > 1 ? backups[1] : kNoServer);
  store_le<uint16_t>(p + 60, id);
  p[62] = static_cast<uint8_t>(backups.size());
  p[63] = flags;
}

Bytes RegionEntry::encode() const {
  Bytes out(kRegionEntrySize);
  encode(out);
  return out;
}

RegionEntry RegionEntry::decode(ByteView in) {
  if (in.size() < kRegionEntrySize) raise(ErrorCode::kProtocol, "truncated region entry");
  const uint8_t* p = in.data();
  RegionEntry e;
  e.start_key = get_key(p);
  e.end_key = get_key(p + 24);
  e.primary = load_le<uint32_t>(p + 48);
  const uint8_t n = p[62];
  if (n > kMaxBackups) raise(ErrorCode::kProtocol, "bad backup count in region entry");
  if (n > 0) e.backups.push_back(load_le<uint32_t>(p + 52));
  if (n > 1) e.backups.push_back(load_le<uint32_t>(p + 56));
  e.id = load_le<uint16_t>(p + 60);
  e.flags = p[63];
  return e;
}

RegionMap::RegionMap(uint64_t version, std::vector<RegionEntry> entries)
    : version_(version), entries_(std::move(entries)) {}

const RegionEntry& RegionMap::lookup(std::string_view key) const {
  if (entries_.empty()) raise(ErrorCode::kInvalidArgument, "empty region map");
  // Last entry whose start <= key.
  auto it = std::upper_bound(entries_.begin(), entries_.end(), key,
                             [](std::string_view k, const RegionEntry& e) { return k < e.start_key; });
  if (it == entries_.begin()) raise(ErrorCode::kInvalidArgument, "key precedes the first region");
  --it;
  if (!it->contains(key)) raise(ErrorCode::kInvalidArgument, "key falls in a gap of the region map");
  return *it;
}

const RegionEntry* RegionMap::find(uint16_t id) const {
  for (const auto& e : entries_) {
    if (e.id == id) return &e;
  }
  return nullptr;
}

RegionEntry* RegionMap::find(uint16_t id) {
  for (auto& e : entries_) {
    if (e.id == id) return &e;
  }
  return nullptr;
}

void RegionMap::validate() const {
  if (entries_.empty()) return;
  if (!entries_.front().start_key.empty()) raise(ErrorCode::kInvalidArgument, "first region must start unbounded");
  if (!entries_.back().end_key.empty()) raise(ErrorCode::kInvalidArgument, "last region must end unbounded");
  std::vector<uint16_t> ids;
  for (size_t i = 0; i < entries_.size(); ++i) {
    const RegionEntry& e = entries_[i];
    if (i + 1 < entries_.size()) {
      if (e.end_key != entries_[i + 1].start_key) {
        raise(ErrorCode::kInvalidArgument, fmt::format("region {} does not meet its successor", e.id));
      }
      if (e.end_key <= e.start_key) raise(ErrorCode::kInvalidArgument, fmt::format("region {} is empty", e.id));
    }
    if (e.backups.size() > kMaxBackups) raise(ErrorCode::kInvalidArgument, "a region has at most two backups");
    ids.push_back(e.id);
  }
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) raise(ErrorCode::kInvalidArgument, "duplicate region id");
}

Bytes RegionMap::encode() const {
  Bytes out(kRegionMapHeaderSize + kRegionEntrySize * entries_.size());
  store_le<uint64_t>(out.data(), version_);
  store_le<uint32_t>(out.data() + 8, static_cast<uint32_t>(entries_.size()));
  for (size_t i = 0; i < entries_.size(); ++i) {
    entries_[i].encode(MutableByteView(out).subspan(kRegionMapHeaderSize + i * kRegionEntrySize, kRegionEntrySize));
  }
  return out;
}

RegionMap RegionMap::decode(ByteView in) {
  if (in.size() < kRegionMapHeaderSize) raise(ErrorCode::kProtocol, "truncated region map");
  const auto version = load_le<uint64_t>(in.data());
  const auto count = load_le<uint32_t>(in.data() + 8);
  if (in.size() != kRegionMapHeaderSize + uint64_t{count} * kRegionEntrySize) {
    raise(ErrorCode::kProtocol, "region map length does not match its count");
  }
  std::vector<RegionEntry> entries;
  entries.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    entries.push_back(RegionEntry::decode(in.subspan(kRegionMapHeaderSize + i * kRegionEntrySize, kRegionEntrySize)));
  }
  return RegionMap(version, std::move(entries));
}

std::vector<std::string> uniform_boundaries(size_t n, const std::string& prefix) {
  if (n == 0) raise(ErrorCode::kInvalidArgument, "zero regions");
  std::vector<std::string> out(n + 1);
  for (size_t i = 1; i < n; ++i) {
    const auto point = static_cast<uint64_t>((static_cast<unsigned __int128>(i) << 64) / n);
    out[i] = fmt::format("{}{:020}", prefix, point);
  }
  return out;
}

RegionMap make_region_map(size_t regions, const std::vector<uint32_t>& servers, size_t backups,
                          const std::string& key_prefix) {
  if (regions == 0) return {};
  if (servers.empty()) raise(ErrorCode::kConfig, "no servers");
  if (regions > 0xFFFF) raise(ErrorCode::kConfig, "too many regions");
  backups = std::min({backups, servers.size() - 1, kMaxBackups});
  const auto bounds = uniform_boundaries(regions, key_prefix);
  std::vector<RegionEntry> entries;
  for (size_t i = 0; i < regions; ++i) {
    RegionEntry e;
    e.id = static_cast<uint16_t>(i);
    e.start_key = bounds[i];
    e.end_key = bounds[i + 1];
    e.primary = servers[i % servers.size()];
    for (size_t b = 1; b <= backups; ++b) e.backups.push_back(servers[(i + b) % servers.size()]);
    entries.push_back(std::move(e));
  }
  RegionMap map(1, std::move(entries));
  map.validate();
  return map;
}

}  // namespace replkv::cluster
