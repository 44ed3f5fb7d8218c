#include "replkv/lsm/level.hpp"

#include <map>
#include <set>

#include "replkv/lsm/value_log.hpp"
#include "test_util.hpp"

namespace replkv::lsm {
namespace {

constexpr uint64_t kSeg = 64 * 1024;

struct Fixture {
  MemoryDevice dev{1024 * kSeg, kSeg};
  ValueLog log{dev};
  std::map<std::string, DeviceOffset> keys;

  KeyResolver resolver() {
    return [this](DeviceOffset p) { return log.read_key(p); };
  }

  void add_key(const std::string& k) { keys[k] = log.append(k, "v:" + k, false).ptr; }

  BuiltLevel build(uint32_t number = 1, bool retain = false) {
    LevelBuilder b(dev, number, resolver(), retain);
    for (const auto& [k, p] : keys) b.add(LeafEntry{make_prefix(k), p, false}, k);
    return b.finish();
  }
};

TEST(NodeFormatTest, LeafCapacity) { EXPECT_EQ(kLeafCapacity, 170u); }

TEST(NodeFormatTest, LeafEntryRoundTrip) {
  Bytes node(kNodeSize, 0);
  LeafEntry e{make_prefix("abcdefghijklmnop"), DeviceOffset{0x123456789}, true};
  write_leaf_header(node, 1);
  write_leaf_entry(node, 0, e);
  EXPECT_EQ(node_type(node), NodeType::kLeaf);
  EXPECT_EQ(node_count(node), 1);
  const LeafEntry got = leaf_entry(node, 0);
  EXPECT_EQ(got.prefix, make_prefix("abcdefghijkl"));
  EXPECT_EQ(got.value_loc.value, 0x123456789u);
  EXPECT_TRUE(got.tombstone);
  rewrite_leaf_pointers(node, [](DeviceOffset p) { return DeviceOffset{p.value + 1}; });
  EXPECT_EQ(leaf_entry(node, 0).value_loc.value, 0x12345678Au);
}

TEST(NodeFormatTest, PrefixIsZeroPadded) {
  const KeyPrefix p = make_prefix("ab");
  EXPECT_EQ(p[0], 'a');
  EXPECT_EQ(p[1], 'b');
  for (size_t i = 2; i < kKeyPrefixSize; ++i) EXPECT_EQ(p[i], 0);
}

TEST(LevelTest, EmptyBuilderYieldsNoLevel) {
  Fixture f;
  EXPECT_EQ(f.build().level, nullptr);
}

class LevelSizeTest : public ::testing::TestWithParam<int> {};

TEST_P(LevelSizeTest, EveryKeyFoundAndIteratedInOrder) {
  Fixture f;
  const int n = GetParam();
  for (int i = 0; i < n; ++i) f.add_key(testing::numbered_key(i * 7919 % 1000003));
  auto built = f.build();
  ASSERT_NE(built.level, nullptr);
  const Level& level = *built.level;
  EXPECT_EQ(level.entry_count(), static_cast<uint64_t>(n));
  const uint64_t leaves = (n + kLeafCapacity - 1) / kLeafCapacity;
  EXPECT_EQ(level.shape().leaf_segments.size(), (leaves * kNodeSize + kSeg - 1) / kSeg);
  if (leaves == 1) EXPECT_EQ(level.height(), 1u);

  for (const auto& [k, p] : f.keys) {
    auto e = level.find(k, f.resolver());
    ASSERT_TRUE(e) << k;
    EXPECT_EQ(e->value_loc, p);
  }
  EXPECT_FALSE(level.find("zzz", f.resolver()));
  EXPECT_FALSE(level.find("key", f.resolver()));

  LevelIterator it(built.level, f.resolver());
  it.seek_to_first();
  auto expect = f.keys.begin();
  for (; it.valid(); it.next(), ++expect) {
    ASSERT_NE(expect, f.keys.end());
    EXPECT_EQ(it.key(), expect->first);
    EXPECT_EQ(it.entry().value_loc, expect->second);
  }
  EXPECT_EQ(expect, f.keys.end());
}

INSTANTIATE_TEST_SUITE_P(Sizes, LevelSizeTest, ::testing::Values(1, 169, 170, 171, 3000, 50000));

TEST(LevelTest, SeekLandsOnFirstKeyNotLess) {
  Fixture f;
  for (int i = 0; i < 5000; i += 2) f.add_key(testing::numbered_key(i));
  auto built = f.build();
  LevelIterator it(built.level, f.resolver());
  for (int probe : {0, 1, 2, 777, 4997, 4998}) {
    it.seek(testing::numbered_key(probe));
    ASSERT_TRUE(it.valid());
    EXPECT_EQ(it.key(), f.keys.lower_bound(testing::numbered_key(probe))->first);
  }
  it.seek(testing::numbered_key(4999));
  EXPECT_FALSE(it.valid());
}

// Keys that share a 12-byte prefix must be told apart through the log.
TEST(LevelTest, PrefixTiesResolvedByFullKey) {
  Fixture f;
  const std::string common = "sharedprefix";
  for (int i = 0; i < 1000; ++i) f.add_key(common + testing::numbered_key(i, 5));
  f.add_key("a");
  f.add_key("zz");
  auto built = f.build();
  for (const auto& [k, p] : f.keys) {
    auto e = built.level->find(k, f.resolver());
    ASSERT_TRUE(e) << k;
    EXPECT_EQ(e->value_loc, p);
  }
  EXPECT_FALSE(built.level->find(common, f.resolver()));
  EXPECT_FALSE(built.level->find(common + "key99999", f.resolver()));
  LevelIterator it(built.level, f.resolver());
  it.seek(common + "key00500");
  ASSERT_TRUE(it.valid());
  EXPECT_EQ(it.key(), common + "key00500");
}

// Bottom-up construction: every pointer targets a segment earlier in shipping order.
TEST(LevelTest, DependencyOrderReferencesEarlierSegmentsOnly) {
  Fixture f;
  for (int i = 0; i < 40000; ++i) f.add_key(testing::numbered_key(i));
  auto built = f.build(2, true);
  const auto order = built.level->segments_in_dependency_order();
  ASSERT_EQ(order.size(), built.images.size());
  std::set<uint64_t> seen;
  for (size_t s = 0; s < order.size(); ++s) {
    EXPECT_EQ(order[s].start, built.images[s].first.start);
    ASSERT_TRUE(built.images[s].second);
    const Bytes& img = *built.images[s].second;
    EXPECT_EQ(img, f.dev.read_at(order[s].start, kSeg));
    for (uint64_t off = 0; off < kSeg; off += kNodeSize) {
      ByteView node(img.data() + off, kNodeSize);
      if (node_type(node) != NodeType::kInternal) continue;
      for (const DeviceOffset child : parse_internal(node).children) {
        EXPECT_TRUE(seen.count(f.dev.segment_start_of(child).value) || f.dev.segment_start_of(child) == order[s].start);
        if (f.dev.segment_start_of(child) == order[s].start) EXPECT_LT(f.dev.within_segment(child), off);
      }
    }
    seen.insert(order[s].start.value);
  }
  EXPECT_EQ(order.front().kind, SegmentKind::kIndexLeaf);
  EXPECT_EQ(order.back().kind, SegmentKind::kIndexInternal);
}

TEST(LevelTest, DroppingLevelFreesSegments) {
  Fixture f;
  for (int i = 0; i < 20000; ++i) f.add_key(testing::numbered_key(i));
  const uint64_t before = f.dev.free_segment_count();
  {
    auto built = f.build();
    EXPECT_EQ(f.dev.free_segment_count(), before - built.level->segment_count());
  }
  EXPECT_EQ(f.dev.free_segment_count(), before);
}

TEST(LevelTest, AbandonedBuilderFreesSegments) {
  Fixture f;
  for (int i = 0; i < 20000; ++i) f.add_key(testing::numbered_key(i));
  const uint64_t before = f.dev.free_segment_count();
  {
    LevelBuilder b(f.dev, 1, f.resolver(), false);
    for (const auto& [k, p] : f.keys) b.add(LeafEntry{make_prefix(k), p, false}, k);
  }
  EXPECT_EQ(f.dev.free_segment_count(), before);
}

}  // namespace
}  // namespace replkv::lsm
