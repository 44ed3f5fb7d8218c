#include "replkv/lsm/level.hpp"

#include <algorithm>

#include <fmt/format.h>

namespace replkv::lsm {

namespace {

int compare_prefix(const KeyPrefix& a, const KeyPrefix& b) {
  return std::memcmp(a.data(), b.data(), kKeyPrefixSize);
}

// First leaf entry whose prefix is >= `prefix`.
size_t lower_bound_prefix(ByteView leaf, size_t count, const KeyPrefix& prefix) {
  size_t lo = 0, hi = count;
  while (lo < hi) {
    const size_t mid = (lo + hi) / 2;
    if (compare_prefix(leaf_entry(leaf, mid).prefix, prefix) < 0) {
      lo = mid + 1;
    } else {
      hi = mid;
    }
  }
  return lo;
}

size_t child_index(const InternalNode& node, std::string_view key) {
  auto it = std::upper_bound(node.pivots.begin(), node.pivots.end(), key,
                             [](std::string_view k, const std::string& p) { return k < std::string_view(p); });
  return static_cast<size_t>(it - node.pivots.begin());
}

}  // namespace

// --- Level ----------------------------------------------------------------

Level::Level(Device& device, Shape shape) : device_(device), shape_(std::move(shape)) {}

Level::~Level() {
  for (const Segment& s : shape_.leaf_segments) device_.free_segment(s);
  for (const Segment& s : shape_.internal_segments) device_.free_segment(s);
}

std::vector<Segment> Level::segments_in_dependency_order() const {
  std::vector<Segment> out = shape_.leaf_segments;
  out.insert(out.end(), shape_.internal_segments.begin(), shape_.internal_segments.end());
  return out;
}

uint64_t Level::used_bytes(const Segment& seg) const {
  auto it = shape_.used.find(seg.start.value);
  return it == shape_.used.end() ? seg.size : it->second;
}

Bytes Level::read_node(DeviceOffset off) const { return device_.read_at(off, kNodeSize); }

std::optional<LeafEntry> Level::find(std::string_view key, const KeyResolver& resolve) const {
  DeviceOffset node_off = shape_.root;
  Bytes node = read_node(node_off);
  while (node_type(node) == NodeType::kInternal) {
    const InternalNode in = parse_internal(node);
    node_off = in.children[child_index(in, key)];
    node = read_node(node_off);
  }
  if (node_type(node) != NodeType::kLeaf) {
    raise(ErrorCode::kCorruptRecord, fmt::format("node at {:#x} is not a leaf", node_off.value));
  }
  const size_t count = node_count(node);
  const KeyPrefix prefix = make_prefix(key);
  for (size_t i = lower_bound_prefix(node, count, prefix); i < count; ++i) {
    const LeafEntry e = leaf_entry(node, i);
    if (compare_prefix(e.prefix, prefix) != 0) break;
    const std::string full = resolve(e.value_loc);
    if (full == key) return e;
    if (full > key) break;
  }
  return std::nullopt;
}

// --- LevelIterator --------------------------------------------------------

LevelIterator::LevelIterator(LevelPtr level, KeyResolver resolve)
    : level_(std::move(level)), resolve_(std::move(resolve)) {}

void LevelIterator::load_leaf(DeviceOffset node, size_t pos) {
  leaf_ = level_->read_node(node);
  if (node_type(leaf_) != NodeType::kLeaf) {
    raise(ErrorCode::kCorruptRecord, fmt::format("node at {:#x} is not a leaf", node.value));
  }
  leaf_count_ = node_count(leaf_);
  pos_ = pos;
}

void LevelIterator::descend_leftmost(DeviceOffset node_off) {
  for (;;) {
    Bytes node = level_->read_node(node_off);
    if (node_type(node) != NodeType::kInternal) break;
    InternalNode in = parse_internal(node);
    node_off = in.children.front();
    stack_.push_back(Frame{std::move(in.children), 0});
  }
  load_leaf(node_off, 0);
}

// Moves forward until positioned on an entry or past the end.
void LevelIterator::settle() {
  while (pos_ >= leaf_count_) {
    while (!stack_.empty() && stack_.back().index + 1 >= stack_.back().children.size()) stack_.pop_back();
    if (stack_.empty()) {
      valid_ = false;
      return;
    }
    Frame& f = stack_.back();
    ++f.index;
    descend_leftmost(f.children[f.index]);
  }
  valid_ = true;
  entry_ = leaf_entry(leaf_, pos_);
  key_.reset();
}

void LevelIterator::seek_to_first() {
  stack_.clear();
  descend_leftmost(level_->root());
  settle();
}

void LevelIterator::seek(std::string_view key) {
  stack_.clear();
  DeviceOffset node_off = level_->root();
  for (;;) {
    Bytes node = level_->read_node(node_off);
    if (node_type(node) != NodeType::kInternal) break;
    InternalNode in = parse_internal(node);
    const size_t idx = child_index(in, key);
    node_off = in.children[idx];
    stack_.push_back(Frame{std::move(in.children), idx});
  }
  load_leaf(node_off, 0);
  const KeyPrefix prefix = make_prefix(key);
  pos_ = lower_bound_prefix(leaf_, leaf_count_, prefix);
  settle();
  while (valid_ && compare_prefix(entry_.prefix, prefix) == 0 && this->key() < key) next();
}

const std::string& LevelIterator::key() {
  if (!key_) key_ = resolve_(entry_.value_loc);
  return *key_;
}

void LevelIterator::next() {
  ++pos_;
  settle();
}

// --- LevelBuilder ---------------------------------------------------------

/// Places fixed-size nodes into segments of one kind, allocating as needed.
class LevelBuilder::SegmentWriter {
 public:
  SegmentWriter(Device& device, SegmentKind kind, bool retain) : device_(device), kind_(kind), retain_(retain) {}

  ~SegmentWriter() {
    if (!committed_) {
      for (auto& [seg, img] : segments_) device_.free_segment(seg);
    }
  }

  DeviceOffset place(ByteView node) {
    if (segments_.empty() || used_ + kNodeSize > device_.segment_size()) {
      flush();
      Segment seg = device_.allocate_segment(kind_);
      segments_.emplace_back(seg, nullptr);
      image_ = std::make_shared<Bytes>(device_.segment_size(), 0);
      used_ = 0;
    }
    const DeviceOffset at = segments_.back().first.start + used_;
    std::copy(node.begin(), node.end(), image_->begin() + static_cast<ptrdiff_t>(used_));
    used_ += kNodeSize;
    return at;
  }

  void flush() {
    if (!image_) return;
    device_.write_at(segments_.back().first.start, ByteView(image_->data(), used_));
    used_by_segment_[segments_.back().first.start.value] = used_;
    if (retain_) segments_.back().second = std::move(image_);
    image_.reset();
  }

  std::vector<std::pair<Segment, std::shared_ptr<const Bytes>>> commit() {
    flush();
    committed_ = true;
    return std::move(segments_);
  }

 private:
  Device& device_;
  SegmentKind kind_;
  bool retain_;
  std::vector<std::pair<Segment, std::shared_ptr<const Bytes>>> segments_;
  std::shared_ptr<Bytes> image_;

 public:
  std::unordered_map<uint64_t, uint64_t> used_by_segment_;

 private:
  uint64_t used_ = 0;
  bool committed_ = false;
};

LevelBuilder::LevelBuilder(Device& device, uint32_t level_number, KeyResolver resolve, bool retain_images)
    : device_(device),
      number_(level_number),
      resolve_(std::move(resolve)),
      retain_(retain_images),
      leaves_(std::make_unique<SegmentWriter>(device, SegmentKind::kIndexLeaf, retain_images)),
      internals_(std::make_unique<SegmentWriter>(device, SegmentKind::kIndexInternal, retain_images)),
      leaf_(kNodeSize, 0) {}

LevelBuilder::~LevelBuilder() = default;

void LevelBuilder::add(const LeafEntry& entry, std::optional<std::string> full_key) {
  if (leaf_count_ == kLeafCapacity) emit_leaf();
  if (leaf_count_ == 0) leaf_first_ = ChildRef{DeviceOffset{}, entry.value_loc, std::move(full_key)};
  write_leaf_entry(leaf_, leaf_count_++, entry);
  ++entries_;
}

void LevelBuilder::emit_leaf() {
  write_leaf_header(leaf_, leaf_count_);
  leaf_first_->node = leaves_->place(leaf_);
  level_refs_.push_back(std::move(*leaf_first_));
  leaf_first_.reset();
  std::fill(leaf_.begin(), leaf_.end(), 0);
  leaf_count_ = 0;
}

const std::string& LevelBuilder::first_key(ChildRef& ref) {
  if (!ref.first_key) ref.first_key = resolve_(ref.first_value_loc);
  return *ref.first_key;
}

BuiltLevel LevelBuilder::finish() {
  finished_ = true;
  if (leaf_count_ > 0) emit_leaf();
  if (level_refs_.empty()) return {};

  uint32_t height = 1;
  std::vector<ChildRef> refs = std::move(level_refs_);
  while (refs.size() > 1) {
    std::vector<ChildRef> parents;
    size_t i = 0;
    while (i < refs.size()) {
      Bytes node(kNodeSize, 0);
      node[0] = static_cast<uint8_t>(NodeType::kInternal);
      size_t pos = kNodeHeaderSize;
      store_le<uint64_t>(node.data() + pos, refs[i].node.value);
      pos += 8;
      ChildRef parent{DeviceOffset{}, refs[i].first_value_loc, refs[i].first_key};
      ++i;
      uint16_t pivots = 0;
      while (i < refs.size()) {
        const std::string& pivot = first_key(refs[i]);
        if (pos + internal_entry_size(pivot.size()) > kNodeSize) break;
        node[pos++] = static_cast<uint8_t>(pivot.size());
        std::copy(pivot.begin(), pivot.end(), node.begin() + static_cast<ptrdiff_t>(pos));
        pos += pivot.size();
        store_le<uint64_t>(node.data() + pos, refs[i].node.value);
        pos += 8;
        ++pivots;
        ++i;
      }
      store_le<uint16_t>(node.data() + 2, pivots);
      parent.node = internals_->place(node);
      parents.push_back(std::move(parent));
    }
    refs = std::move(parents);
    ++height;
  }

  Level::Shape shape;
  shape.number = number_;
  shape.root = refs.front().node;
  shape.entry_count = entries_;
  shape.height = height;

  BuiltLevel out;
  for (auto& [seg, img] : leaves_->commit()) {
    shape.leaf_segments.push_back(seg);
    out.images.emplace_back(seg, std::move(img));
  }
  for (auto& [seg, img] : internals_->commit()) {
    shape.internal_segments.push_back(seg);
    out.images.emplace_back(seg, std::move(img));
  }
  shape.used = std::move(leaves_->used_by_segment_);
  shape.used.merge(internals_->used_by_segment_);
  if (!retain_) out.images.clear();
  out.level = std::make_shared<Level>(device_, std::move(shape));
  return out;
}

}  // namespace replkv::lsm
