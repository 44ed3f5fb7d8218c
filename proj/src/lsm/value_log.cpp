#include "replkv/lsm/value_log.hpp"

#include <algorithm>

#include <fmt/format.h>

namespace replkv::lsm {

namespace {
// Log segments go to the device in direct-I/O sized pieces.
constexpr uint64_t kLogWriteUnit = 4096;
}  // namespace

ValueLog::ValueLog(Device& device) : device_(device), segment_size_(device.segment_size()) {}

ValueLog::~ValueLog() {
  for (const SegmentInfo& info : segments_) device_.free_segment(info.segment);
}

void ValueLog::open_tail_locked() {
  Segment seg = device_.allocate_segment(SegmentKind::kValueLog);
  index_of_[seg.start.value] = segments_.size();
  segments_.push_back(SegmentInfo{seg, 0, false});
  tail_.assign(segment_size_, 0);
}

std::optional<SealedSegment> ValueLog::seal_locked() {
  if (segments_.empty() || segments_.back().sealed || segments_.back().used == 0) return std::nullopt;
  SegmentInfo& info = segments_.back();
  const uint64_t len = std::min(round_up(info.used, kLogWriteUnit), segment_size_);
  device_.write_at(info.segment.start, ByteView(tail_.data(), len));
  info.sealed = true;
  tail_.clear();
  tail_.shrink_to_fit();
  return SealedSegment{info.segment, segments_.size() - 1, info.used};
}

ValueLog::Appended ValueLog::append(std::string_view key, std::string_view value, bool tombstone) {
  validate_kv(key, value);
  Appended out;
  out.record = encode_record(key, value, tombstone);
  if (out.record.size() > segment_size_) {
    raise(ErrorCode::kInvalidArgument,
          fmt::format("record of {} bytes cannot fit a {} byte segment", out.record.size(), segment_size_));
  }
  std::lock_guard lock(mu_);
  if (segments_.empty() || segments_.back().sealed) {
    open_tail_locked();
  } else if (segments_.back().used + out.record.size() > segment_size_) {
    out.sealed = seal_locked();
    open_tail_locked();
  }
  SegmentInfo& info = segments_.back();
  std::copy(out.record.begin(), out.record.end(), tail_.begin() + static_cast<ptrdiff_t>(info.used));
  out.ptr = info.segment.start + info.used;
  info.used += out.record.size();
  return out;
}

DeviceOffset ValueLog::start_segment() {
  std::lock_guard lock(mu_);
  if (!segments_.empty() && !segments_.back().sealed) {
    if (segments_.back().used == 0) return segments_.back().segment.start;
    seal_locked();
  }
  open_tail_locked();
  return segments_.back().segment.start;
}

void ValueLog::append_raw(ByteView bytes, DeviceOffset at) {
  std::lock_guard lock(mu_);
  if (segments_.empty() || segments_.back().sealed) raise(ErrorCode::kInvalidArgument, "no open tail segment");
  SegmentInfo& info = segments_.back();
  if (at != info.segment.start + info.used) {
    raise(ErrorCode::kInvalidArgument,
          fmt::format("raw append at {:#x} but tail is at {:#x}", at.value, (info.segment.start + info.used).value));
  }
  if (info.used + bytes.size() > segment_size_) raise(ErrorCode::kOutOfBounds, "raw append overflows segment");
  std::copy(bytes.begin(), bytes.end(), tail_.begin() + static_cast<ptrdiff_t>(info.used));
  info.used += bytes.size();
}

std::optional<SealedSegment> ValueLog::seal() {
  std::lock_guard lock(mu_);
  return seal_locked();
}

const ValueLog::SegmentInfo* ValueLog::find_locked(DeviceOffset seg_start, uint64_t* index) const {
  auto it = index_of_.find(seg_start.value);
  if (it == index_of_.end()) return nullptr;
  if (index != nullptr) *index = it->second;
  return &segments_[it->second];
}

void ValueLog::read_bytes(DeviceOffset off, MutableByteView out) const {
  const DeviceOffset start = device_.segment_start_of(off);
  const uint64_t within = device_.within_segment(off);
  {
    std::lock_guard lock(mu_);
    const SegmentInfo* info = find_locked(start, nullptr);
    if (info == nullptr) {
      raise(ErrorCode::kCorruptRecord, fmt::format("{:#x} is not in a value-log segment", off.value));
    }
    if (!info->sealed) {
      if (within + out.size() > segment_size_) raise(ErrorCode::kCorruptRecord, "read crosses segment end");
      std::copy_n(tail_.begin() + static_cast<ptrdiff_t>(within), out.size(), out.begin());
      return;
    }
  }
  device_.read_at(off, out);
}

LogRecord ValueLog::read(DeviceOffset ptr) const {
  uint8_t hdr[kRecordHeaderSize];
  read_bytes(ptr, MutableByteView(hdr, sizeof(hdr)));
  const RecordHeader h = decode_record_header(ByteView(hdr, sizeof(hdr)), device_.within_segment(ptr), segment_size_);
  Bytes body(h.key_len + h.value_len);
  read_bytes(ptr + kRecordHeaderSize, MutableByteView(body));
  LogRecord rec;
  rec.key.assign(reinterpret_cast<const char*>(body.data()), h.key_len);
  rec.value.assign(reinterpret_cast<const char*>(body.data()) + h.key_len, h.value_len);
  rec.tombstone = h.tombstone;
  return rec;
}

std::string ValueLog::read_key(DeviceOffset ptr) const {
  uint8_t hdr[kRecordHeaderSize];
  read_bytes(ptr, MutableByteView(hdr, sizeof(hdr)));
  const RecordHeader h = decode_record_header(ByteView(hdr, sizeof(hdr)), device_.within_segment(ptr), segment_size_);
  std::string key(h.key_len, '\0');
  read_bytes(ptr + kRecordHeaderSize, MutableByteView(reinterpret_cast<uint8_t*>(key.data()), key.size()));
  return key;
}

Bytes ValueLog::segment_bytes(uint64_t index) const {
  Segment seg;
  uint64_t used;
  {
    std::lock_guard lock(mu_);
    const SegmentInfo& info = segments_.at(index);
    if (!info.sealed) return Bytes(tail_.begin(), tail_.begin() + static_cast<ptrdiff_t>(info.used));
    seg = info.segment;
    used = info.used;
  }
  return device_.read_at(seg.start, used);
}

void ValueLog::for_each_record(LogPosition from, const RecordVisitor& fn, uint64_t end_segment) const {
  const uint64_t count = std::min(segment_count(), end_segment);
  for (uint64_t i = from.segment_index; i < count; ++i) {
    Segment seg;
    {
      std::lock_guard lock(mu_);
      seg = segments_[i].segment;
    }
    const Bytes bytes = segment_bytes(i);
    uint64_t pos = (i == from.segment_index) ? from.offset : 0;
    while (pos + kRecordHeaderSize <= bytes.size()) {
      const RecordHeader h = decode_record_header(ByteView(bytes).subspan(pos), pos, segment_size_);
      if (pos + h.total() > bytes.size()) raise(ErrorCode::kCorruptRecord, "record truncated by segment end");
      LogRecord rec;
      const char* base = reinterpret_cast<const char*>(bytes.data() + pos + kRecordHeaderSize);
      rec.key.assign(base, h.key_len);
      rec.value.assign(base + h.key_len, h.value_len);
      rec.tombstone = h.tombstone;
      const DeviceOffset ptr = seg.start + pos;
      pos += h.total();
      fn(ptr, LogPosition{i, pos}, rec);
    }
  }
}

uint64_t ValueLog::bytes_after(LogPosition from) const {
  std::lock_guard lock(mu_);
  uint64_t total = 0;
  for (uint64_t i = from.segment_index; i < segments_.size(); ++i) {
    const uint64_t skip = (i == from.segment_index) ? std::min(from.offset, segments_[i].used) : 0;
    total += segments_[i].used - skip;
  }
  return total;
}

LogPosition ValueLog::end_position() const {
  std::lock_guard lock(mu_);
  if (segments_.empty()) return {};
  const SegmentInfo& last = segments_.back();
  if (last.sealed) return {segments_.size(), 0};
  return {segments_.size() - 1, last.used};
}

std::optional<DeviceOffset> ValueLog::tail() const {
  std::lock_guard lock(mu_);
  if (segments_.empty() || segments_.back().sealed) return std::nullopt;
  return segments_.back().segment.start + segments_.back().used;
}

uint64_t ValueLog::segment_count() const {
  std::lock_guard lock(mu_);
  return segments_.size();
}

std::vector<SealedSegment> ValueLog::segments() const {
  std::lock_guard lock(mu_);
  std::vector<SealedSegment> out;
  out.reserve(segments_.size());
  for (size_t i = 0; i < segments_.size(); ++i) out.push_back({segments_[i].segment, i, segments_[i].used});
  return out;
}

}  // namespace replkv::lsm
