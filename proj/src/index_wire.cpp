#include "replkv/index_wire.hpp"

#include <fmt/format.h>

namespace replkv {

void SegmentMap::insert(DeviceOffset primary_start, DeviceOffset local_start) {
  auto [it, inserted] = map_.emplace(primary_start.value, local_start.value);
  if (!inserted && it->second != local_start.value) {
    raise(ErrorCode::kInvalidArgument,
          fmt::format("segment {:#x} already mapped to {:#x}", primary_start.value, it->second));
  }
}

std::optional<DeviceOffset> SegmentMap::find(DeviceOffset primary_start) const {
  auto it = map_.find(primary_start.value);
  if (it == map_.end()) return std::nullopt;
  return DeviceOffset{it->second};
}

bool SegmentMap::erase(DeviceOffset primary_start) { return map_.erase(primary_start.value) > 0; }

SegmentMap SegmentMap::inverse() const {
  SegmentMap out;
  for (const auto& [from, to] : map_) out.insert(DeviceOffset{to}, DeviceOffset{from});
  return out;
}

DeviceOffset translate_pointer(DeviceOffset ptr, const SegmentMap& map, uint64_t segment_size) {
  const DeviceOffset start = segment_start_of(ptr, segment_size);
  auto local = map.find(start);
  if (!local) raise(ErrorCode::kMissingMapping, fmt::format("no mapping for segment {:#x}", start.value));
  return *local + within_segment(ptr, segment_size);
}

// --- wire formats -----------------------------------------------------------

Bytes SerializedSegment::encode() const {
  ByteWriter w;
  w.put<uint8_t>(static_cast<uint8_t>(kind));
  w.put_bytes(Bytes(3, 0));
  w.put<uint64_t>(primary_start.value);
  w.put<uint32_t>(seq);
  if (payload) w.put_bytes(*payload);
  return w.take();
}

SerializedSegment SerializedSegment::decode(ByteView wire, uint64_t segment_size) {
  ByteReader r(wire);
  SerializedSegment s;
  const auto kind = r.get<uint8_t>();
  if (kind != static_cast<uint8_t>(WireSegmentKind::kLeaf) && kind != static_cast<uint8_t>(WireSegmentKind::kInternal)) {
    raise(ErrorCode::kProtocol, fmt::format("bad segment kind {}", kind));
  }
  s.kind = static_cast<WireSegmentKind>(kind);
  r.get_bytes(3);
  s.primary_start = DeviceOffset{r.get<uint64_t>()};
  s.seq = r.get<uint32_t>();
  if (r.remaining() != segment_size) {
    raise(ErrorCode::kProtocol, fmt::format("segment payload is {} bytes, expected {}", r.remaining(), segment_size));
  }
  const ByteView body = r.get_bytes(segment_size);
  s.payload = std::make_shared<const Bytes>(body.begin(), body.end());
  return s;
}

Bytes CompactionManifest::encode() const {
  ByteWriter w;
  w.put<uint32_t>(region);
  w.put<uint8_t>(source_level);
  w.put<uint8_t>(target_level);
  w.put<uint8_t>(height);
  w.put<uint8_t>(0);
  w.put<uint32_t>(segment_count);
  w.put<uint32_t>(0);
  w.put<uint64_t>(primary_root.value);
  w.put<uint64_t>(entry_count);
  w.put<uint64_t>(covered.segment_index);
  w.put<uint64_t>(covered.offset);
  return w.take();
}

CompactionManifest CompactionManifest::decode(ByteView wire) {
  if (wire.size() != kManifestSize) raise(ErrorCode::kProtocol, fmt::format("manifest of {} bytes", wire.size()));
  ByteReader r(wire);
  CompactionManifest m;
  m.region = r.get<uint32_t>();
  m.source_level = r.get<uint8_t>();
  m.target_level = r.get<uint8_t>();
  m.height = r.get<uint8_t>();
  r.get<uint8_t>();
  m.segment_count = r.get<uint32_t>();
  r.get<uint32_t>();
  m.primary_root = DeviceOffset{r.get<uint64_t>()};
  m.entry_count = r.get<uint64_t>();
  m.covered.segment_index = r.get<uint64_t>();
  m.covered.offset = r.get<uint64_t>();
  return m;
}

// --- primary side -----------------------------------------------------------

TransferPlan plan_transfer(const lsm::CompactionJob& job, uint32_t region, Device& device) {
  TransferPlan plan;
  CompactionManifest& m = plan.manifest;
  m.region = region;
  m.source_level = static_cast<uint8_t>(job.source_level);
  m.target_level = static_cast<uint8_t>(job.target_level);
  m.covered = job.covered;
  if (!job.level) return plan;

  m.height = static_cast<uint8_t>(job.level->height());
  m.primary_root = job.level->root();
  m.entry_count = job.level->entry_count();

  std::unordered_map<uint64_t, std::shared_ptr<const Bytes>> images;
  for (const auto& [seg, img] : job.images) {
    if (img) images.emplace(seg.start.value, img);
  }
  for (const Segment& seg : job.level->segments_in_dependency_order()) {
    SerializedSegment s;
    s.kind = seg.kind == SegmentKind::kIndexInternal ? WireSegmentKind::kInternal : WireSegmentKind::kLeaf;
    s.primary_start = seg.start;
    s.seq = static_cast<uint32_t>(plan.segments.size());
    auto it = images.find(seg.start.value);
    if (it != images.end()) {
      s.payload = it->second;
    } else {
      auto image = std::make_shared<Bytes>(seg.size, 0);
      device.read_at(seg.start, MutableByteView(image->data(), job.level->used_bytes(seg)));
      s.payload = std::move(image);
    }
    plan.segments.push_back(std::move(s));
  }
  m.segment_count = static_cast<uint32_t>(plan.segments.size());
  return plan;
}

// --- backup side ------------------------------------------------------------

uint64_t used_node_bytes(ByteView image) {
  uint64_t used = 0;
  for (uint64_t off = 0; off + lsm::kNodeSize <= image.size(); off += lsm::kNodeSize) {
    if (lsm::node_type(image.subspan(off, lsm::kNodeSize)) != lsm::NodeType::kEmpty) used = off + lsm::kNodeSize;
  }
  return used;
}

IndexTransfer::IndexTransfer(lsm::Engine& engine, const LogSegmentMap& log_map)
    : engine_(engine), device_(engine.device()), log_map_(log_map) {}

IndexTransfer::~IndexTransfer() {
  if (!finalized_) abort();
}

void IndexTransfer::abort() {
  if (finalized_) return;
  for (const Segment& s : leaves_) device_.free_segment(s);
  for (const Segment& s : internals_) device_.free_segment(s);
  leaves_.clear();
  internals_.clear();
  index_map_.clear();
}

Segment IndexTransfer::apply(const SerializedSegment& seg) {
  if (finalized_) raise(ErrorCode::kAlreadyFinalized, "transfer already finalized");
  if (seg.seq != next_seq_) {
    raise(ErrorCode::kProtocol, fmt::format("segment seq {} arrived, expected {}", seg.seq, next_seq_));
  }
  if (!seg.payload || seg.payload->size() != device_.segment_size()) {
    raise(ErrorCode::kProtocol, "segment payload does not match the segment size");
  }
  Segment out = seg.kind == WireSegmentKind::kLeaf ? apply_leaf(seg) : apply_internal(seg);
  ++next_seq_;
  ++stats_.segments;
  return out;
}

Segment IndexTransfer::store(SegmentKind kind, const SerializedSegment& seg, const Bytes& image) {
  Segment local = device_.allocate_segment(kind);
  (kind == SegmentKind::kIndexLeaf ? leaves_ : internals_).push_back(local);
  index_map_.insert(seg.primary_start, local.start);
  const uint64_t used = used_node_bytes(image);
  device_.write_at(local.start, ByteView(image.data(), used));
  used_[local.start.value] = used;
  stats_.bytes_written += used;
  return local;
}

Segment IndexTransfer::apply_leaf(const SerializedSegment& seg) {
  Bytes image = *seg.payload;
  const uint64_t seg_size = device_.segment_size();
  for (uint64_t off = 0; off + lsm::kNodeSize <= image.size(); off += lsm::kNodeSize) {
    MutableByteView node(image.data() + off, lsm::kNodeSize);
    const lsm::NodeType type = lsm::node_type(node);
    if (type == lsm::NodeType::kEmpty) continue;
    if (type != lsm::NodeType::kLeaf) raise(ErrorCode::kProtocol, "internal node inside a leaf segment");
    lsm::rewrite_leaf_pointers(node, [&](DeviceOffset p) {
      ++stats_.rewritten_log_pointers;
      return translate_log_pointer(p, log_map_, seg_size);
    });
  }
  return store(SegmentKind::kIndexLeaf, seg, image);
}

Segment IndexTransfer::apply_internal(const SerializedSegment& seg) {
  Bytes image = *seg.payload;
  const uint64_t seg_size = device_.segment_size();
  // Parents may sit in the same segment as their children.
  Segment local = device_.allocate_segment(SegmentKind::kIndexInternal);
  internals_.push_back(local);
  index_map_.insert(seg.primary_start, local.start);
  for (uint64_t off = 0; off + lsm::kNodeSize <= image.size(); off += lsm::kNodeSize) {
    MutableByteView node(image.data() + off, lsm::kNodeSize);
    const lsm::NodeType type = lsm::node_type(node);
    if (type == lsm::NodeType::kEmpty) continue;
    if (type != lsm::NodeType::kInternal) raise(ErrorCode::kProtocol, "leaf node inside an internal segment");
    lsm::rewrite_internal_pointers(node, [&](DeviceOffset p) {
      ++stats_.rewritten_index_pointers;
      return translate_index_pointer(p, index_map_, seg_size);
    });
  }
  const uint64_t used = used_node_bytes(image);
  device_.write_at(local.start, ByteView(image.data(), used));
  used_[local.start.value] = used;
  stats_.bytes_written += used;
  return local;
}

DeviceOffset IndexTransfer::finalize(const CompactionManifest& manifest) {
  if (finalized_) raise(ErrorCode::kAlreadyFinalized, "transfer already finalized");
  if (manifest.segment_count != next_seq_) {
    raise(ErrorCode::kIncompleteTransfer,
          fmt::format("{} of {} segments applied", next_seq_, manifest.segment_count));
  }
  lsm::LevelPtr level;
  DeviceOffset root;
  if (manifest.segment_count > 0) {
    root = translate_index_pointer(manifest.primary_root, index_map_, device_.segment_size());
    lsm::Level::Shape shape;
    shape.number = manifest.target_level;
    shape.leaf_segments = leaves_;
    shape.internal_segments = internals_;
    shape.used = used_;
    shape.root = root;
    shape.entry_count = manifest.entry_count;
    shape.height = manifest.height;
    level = std::make_shared<lsm::Level>(device_, std::move(shape));
  }
  leaves_.clear();
  internals_.clear();
  used_.clear();
  finalized_ = true;
  index_map_.clear();
  engine_.install_level(manifest.source_level, manifest.target_level, std::move(level), manifest.covered);
  return root;
}

}  // namespace replkv
