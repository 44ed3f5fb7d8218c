#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "replkv/device.hpp"
#include "replkv/lsm/format.hpp"

namespace replkv::lsm {

/// Resolves the full key of the record a value-log pointer addresses.
using KeyResolver = std::function<std::string(DeviceOffset)>;

/// An on-device B+-tree holding one LSM level. Owns its segments: they return
/// to the device when the last reference goes away, so readers and in-flight
/// transfers holding a reference keep the level intact.
class Level {
 public:
  struct Shape {
    uint32_t number = 0;
    std::vector<Segment> leaf_segments;      // allocation order
    std::vector<Segment> internal_segments;  // allocation order
    std::unordered_map<uint64_t, uint64_t> used;  // segment start -> bytes of nodes written
    DeviceOffset root;
    uint64_t entry_count = 0;
    uint32_t height = 1;  // 1 = root is a leaf
  };

  Level(Device& device, Shape shape);
  ~Level();

  Level(const Level&) = delete;
  Level& operator=(const Level&) = delete;

  uint32_t number() const { return shape_.number; }
  DeviceOffset root() const { return shape_.root; }
  uint64_t entry_count() const { return shape_.entry_count; }
  uint32_t height() const { return shape_.height; }
  const Shape& shape() const { return shape_; }
  Device& device() const { return device_; }

  /// Leaf segments first, then internal segments, each in allocation order.
  /// Every node only references nodes placed earlier in this order.
  std::vector<Segment> segments_in_dependency_order() const;
  /// Bytes at the start of `seg` holding nodes; the rest is not part of the level.
  uint64_t used_bytes(const Segment& seg) const;
  uint64_t segment_count() const { return shape_.leaf_segments.size() + shape_.internal_segments.size(); }

  /// Exact-match lookup. Key prefix ties are resolved through `resolve`.
  std::optional<LeafEntry> find(std::string_view key, const KeyResolver& resolve) const;

  Bytes read_node(DeviceOffset off) const;

 private:
  Device& device_;
  Shape shape_;
};

using LevelPtr = std::shared_ptr<const Level>;

/// In-order cursor over a level's leaf entries.
class LevelIterator {
 public:
  LevelIterator(LevelPtr level, KeyResolver resolve);

  void seek_to_first();
  /// Positions at the first entry whose full key is >= key.
  void seek(std::string_view key);

  bool valid() const { return valid_; }
  const LeafEntry& entry() const { return entry_; }
  /// Full key of the current entry, read through the resolver on first use.
  const std::string& key();
  void next();

 private:
  struct Frame {
    std::vector<DeviceOffset> children;
    size_t index = 0;
  };

  void descend_leftmost(DeviceOffset node);
  void load_leaf(DeviceOffset node, size_t pos);
  void settle();

  LevelPtr level_;
  KeyResolver resolve_;
  std::vector<Frame> stack_;
  Bytes leaf_;
  size_t leaf_count_ = 0;
  size_t pos_ = 0;
  bool valid_ = false;
  LeafEntry entry_;
  std::optional<std::string> key_;
};

struct BuiltLevel {
  std::shared_ptr<Level> level;  // null when no entries were added
  /// In-memory image of every segment, in dependency order, when retained.
  std::vector<std::pair<Segment, std::shared_ptr<const Bytes>>> images;
};

/// Bulk-loads a level bottom-up from entries supplied in ascending key order.
/// Nodes go to freshly allocated segments; nothing is modified in place.
class LevelBuilder {
 public:
  LevelBuilder(Device& device, uint32_t level_number, KeyResolver resolve, bool retain_images);
  ~LevelBuilder();

  /// `full_key` may be empty when the caller does not know it; it is then
  /// resolved from the log only if the entry starts a leaf.
  void add(const LeafEntry& entry, std::optional<std::string> full_key);
  uint64_t entry_count() const { return entries_; }

  BuiltLevel finish();

 private:
  struct ChildRef {
    DeviceOffset node;
    DeviceOffset first_value_loc;
    std::optional<std::string> first_key;
  };

  class SegmentWriter;

  void emit_leaf();
  const std::string& first_key(ChildRef& ref);

  Device& device_;
  uint32_t number_;
  KeyResolver resolve_;
  bool retain_;
  std::unique_ptr<SegmentWriter> leaves_;
  std::unique_ptr<SegmentWriter> internals_;

  Bytes leaf_;
  uint16_t leaf_count_ = 0;
  std::optional<ChildRef> leaf_first_;
  std::vector<ChildRef> level_refs_;
  uint64_t entries_ = 0;
  bool finished_ = false;
};

}  // namespace replkv::lsm
