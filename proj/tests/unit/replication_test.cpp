#include <atomic>
#include <map>
#include <random>

#include "replkv/replication.hpp"
#include "test_util.hpp"

namespace replkv::replication {
namespace {

using namespace std::chrono_literals;
using testing::numbered_key;

constexpr uint64_t kSegment = 64 * 1024;

lsm::EngineOptions small_engine() {
  lsm::EngineOptions o;
  o.growth_factor = 4;
  o.l0_capacity_keys = 200;
  return o;
}

// A server hosting backup regions, handling replication ops inline.
struct BackupHost {
  MemoryDevice device{1ull << 30, kSegment};
  std::unique_ptr<transport::Nic> nic;
  std::mutex mu;
  std::map<uint32_t, std::shared_ptr<BackupRegion>> regions;
  std::atomic<int> fail_index_segment_at{-1};
  std::atomic<int> index_segments_seen{0};
  std::unique_ptr<rpc::RpcServer> server;

  BackupHost(const std::shared_ptr<transport::InProcFabric>& fabric, const std::string& name) {
    nic = transport::make_inproc_nic(fabric, name);
    rpc::ServerOptions so;
    so.inline_op = is_replication_op;
    server = std::make_unique<rpc::RpcServer>(*nic, name + ":1", [this](const rpc::Request& r) { return handle(r); }, so);
  }

  Bytes handle(const rpc::Request& r) {
    if (r.op == rpc::Op::kIndexSegment) {
      const int n = index_segments_seen.fetch_add(1);
      if (n == fail_index_segment_at.load()) raise(ErrorCode::kUnreachable, "injected fault");
    }
    return region(payload_region(r.payload)).handle(r);
  }

  BackupRegion& open(uint32_t id, Mode mode, lsm::EngineOptions base = small_engine()) {
    std::lock_guard lock(mu);
    auto& slot = regions[id];
    slot = std::make_shared<BackupRegion>(id, device, mode, base);
    return *slot;
  }

  BackupRegion& region(uint32_t id) {
    std::lock_guard lock(mu);
    auto it = regions.find(id);
    if (it == regions.end()) raise(ErrorCode::kInvalidArgument, "no such region");
    return *it->second;
  }
};

struct Cluster {
  std::shared_ptr<transport::InProcFabric> fabric = transport::InProcFabric::create();
  MemoryDevice device{1ull << 30, kSegment};
  std::unique_ptr<transport::Nic> nic = transport::make_inproc_nic(fabric, "p");
  std::vector<std::unique_ptr<BackupHost>> hosts;
  std::unique_ptr<PrimaryRegion> primary;
  std::map<std::string, std::string> shadow;

  Cluster(Mode mode, size_t backups, lsm::EngineOptions base = small_engine()) {
    primary = std::make_unique<PrimaryRegion>(7, device, mode, base);
    for (size_t i = 0; i < backups; ++i) add_host(mode, base);
  }

  BackupHost& add_host(Mode mode, lsm::EngineOptions base = small_engine()) {
    const uint32_t id = static_cast<uint32_t>(hosts.size() + 1);
    hosts.push_back(std::make_unique<BackupHost>(fabric, "b" + std::to_string(id)));
    hosts.back()->open(7, mode, base);
    primary->add_backup(id, client(id));
    return *hosts.back();
  }

  std::shared_ptr<rpc::RpcClient> client(uint32_t id) {
    return std::make_shared<rpc::RpcClient>(*nic, "b" + std::to_string(id) + ":1");
  }

  BackupRegion& backup(size_t i) { return hosts.at(i)->region(7); }

  void put(const std::string& k, const std::string& v) {
    primary->put(k, v);
    shadow[k] = v;
  }

  void load(size_t n, uint64_t seed = 1) {
    std::mt19937_64 rng(seed);
    for (size_t i = 0; i < n; ++i) put(numbered_key(rng() % (n * 2)), testing::random_string(rng, 10, 300));
  }
};

// --- value-log replication --------------------------------------------------------

TEST(ReplicatePutTest, BufferHoldsRecordAtItsOffset) {
  Cluster c(Mode::kSendIndex, 1);
  c.put("alpha", "one");
  c.put("beta", "two");
  const Bytes tail = c.primary->engine().log().segment_bytes(c.primary->engine().log().segment_count() - 1);
  ASSERT_EQ(tail.size(), 2 * 8 + 5 + 3 + 4 + 3);
  auto buf = c.backup(0).buffer();
  EXPECT_EQ(buf->read(0, tail.size()), tail);
  EXPECT_EQ(c.backup(0).buffer_fill(), tail.size());
  EXPECT_EQ(c.primary->stats().replicated_records, 2u);
}

TEST(ReplicatePutTest, AckWaitsForSlowestBackup) {
  Cluster c(Mode::kSendIndex, 2);
  c.fabric->set_node_latency("b2", 30ms);
  const auto t0 = std::chrono::steady_clock::now();
  c.put("k", "v");
  EXPECT_GE(std::chrono::steady_clock::now() - t0, 30ms);
  for (size_t i = 0; i < 2; ++i) EXPECT_EQ(c.backup(i).buffer_fill(), 8u + 1 + 1);
}

TEST(ReplicatePutTest, NoReplicationSendsNothing) {
  auto fabric = transport::InProcFabric::create();
  MemoryDevice dev(1ull << 28, kSegment);
  PrimaryRegion p(1, dev, Mode::kNone, small_engine());
  for (int i = 0; i < 1000; ++i) p.put(numbered_key(i), "v");
  EXPECT_EQ(p.stats().replicated_records, 0u);
  EXPECT_EQ(p.stats().flushes_sent, 0u);
  auto nic = transport::make_inproc_nic(fabric, "x");
  EXPECT_THROW_CODE(p.add_backup(2, nullptr), ErrorCode::kConfig);
}

TEST(FlushLogTest, OneSegmentFillAddsOneMapEntry) {
  Cluster c(Mode::kSendIndex, 1, [] {
    auto o = small_engine();
    o.l0_capacity_keys = 100000;
    return o;
  }());
  const std::string value(1000, 'x');
  size_t i = 0;
  while (c.primary->engine().log().segment_count() < 2) c.put(numbered_key(i++), value);
  const auto segs = c.primary->engine().log().segments();
  BackupRegion& b = c.backup(0);
  ASSERT_EQ(b.log_map().size(), 1u);
  const size_t first_fill = i;
  const auto local = b.log_map().find(segs[0].segment.start);
  ASSERT_TRUE(local);
  EXPECT_EQ(b.engine().log().segment_bytes(0), c.primary->engine().log().segment_bytes(0));
  EXPECT_EQ(b.engine().log().segments()[0].segment.start, *local);
  // The buffer now only holds the record that opened the second segment.
  EXPECT_EQ(b.buffer_fill(), 8 + numbered_key(0).size() + value.size());

  // A second fill adds a second entry, allocated after the first.
  while (c.primary->engine().log().segment_count() < 3) c.put(numbered_key(i++), value);
  EXPECT_EQ(i - first_fill, first_fill - 1);
  ASSERT_EQ(b.log_map().size(), 2u);
  const auto second = c.primary->engine().log().segments()[1].segment.start;
  EXPECT_GT(b.log_map().find(second)->value, local->value);
}

TEST(FlushLogTest, LogsStayByteIdentical) {
  Cluster c(Mode::kBuildIndex, 2);
  c.load(3000);
  auto& plog = c.primary->engine().log();
  const uint64_t sealed = plog.segment_count() - 1;
  ASSERT_GE(sealed, 3u);
  for (size_t h = 0; h < 2; ++h) {
    BackupRegion& b = c.backup(h);
    ASSERT_EQ(b.engine().log().segment_count(), sealed);
    for (uint64_t i = 0; i < sealed; ++i) {
      EXPECT_EQ(b.engine().log().segment_bytes(i), plog.segment_bytes(i)) << i;
      EXPECT_EQ(*b.log_map().find(plog.segments()[i].segment.start), b.engine().log().segments()[i].segment.start);
    }
  }
}

TEST(FlushLogTest, EmptyFlushIsNoOp) {
  Cluster c(Mode::kSendIndex, 1);
  FlushLogRequest req;
  req.region = 7;
  c.backup(0).flush_log(req);
  EXPECT_EQ(c.backup(0).stats().flushed_segments, 0u);
  EXPECT_EQ(c.backup(0).engine().log().segment_count(), 0u);
}

// --- build index ----------------------------------------------------------------

TEST(BuildIndexTest, FlushedSegmentIsIngested) {
  auto base = small_engine();
  base.l0_capacity_keys = 100000;
  Cluster c(Mode::kBuildIndex, 1, base);
  const std::string value(500, 'y');
  size_t i = 0;
  while (c.primary->engine().log().segment_count() < 2) c.put(numbered_key(i++), value);
  // i - 1 records landed in the first segment.
  EXPECT_EQ(c.backup(0).stats().ingested_records, i - 1);
  EXPECT_EQ(c.backup(0).engine().stats().l0_entries, i - 1);
  EXPECT_EQ(c.backup(0).stats().compactions, 0u);
}

TEST(BuildIndexTest, BackupCompactsOnOverflow) {
  Cluster c(Mode::kBuildIndex, 1);
  c.load(4000);
  const BackupStats s = c.backup(0).stats();
  EXPECT_GT(s.compactions, 0u);
  EXPECT_GT(s.l0_peak_entries, 0u);
  EXPECT_EQ(s.installed_levels, 0u);
  EXPECT_EQ(c.primary->stats().index_transfers, 0u);
}

// --- send index -------------------------------------------------------------------

void expect_backup_matches(Cluster& c, BackupRegion& b, bool flushed_only) {
  const lsm::LogPosition covered = b.engine().covered_position();
  size_t checked = 0;
  for (const auto& [k, v] : c.shadow) {
    auto got = b.engine().get(k);
    if (!flushed_only) {
      ASSERT_TRUE(got) << k;
      ASSERT_EQ(*got, v) << k;
      ++checked;
    } else if (got) {
      ++checked;
    }
  }
  (void)covered;
  EXPECT_GT(checked, 0u);
}

TEST(SendIndexTest, FlushGivesBackupL1WithoutL0) {
  Cluster c(Mode::kSendIndex, 1, [] {
    auto o = small_engine();
    o.l0_capacity_keys = 100000;
    return o;
  }());
  for (int i = 0; i < 150; ++i) c.put(numbered_key(i), "value" + std::to_string(i));
  c.primary->flush();
  BackupRegion& b = c.backup(0);
  const auto levels = b.engine().levels();
  ASSERT_GE(levels.size(), 2u);
  ASSERT_TRUE(levels[1]);
  EXPECT_EQ(levels[1]->entry_count(), 150u);
  EXPECT_EQ(b.engine().stats().l0_peak_entries, 0u);
  EXPECT_EQ(b.stats().compactions, 0u);
  expect_backup_matches(c, b, false);
  const auto scan = b.engine().scan("", 1000);
  EXPECT_EQ(scan, c.primary->scan("", 1000));
}

TEST(SendIndexTest, ConsecutiveCompactionsReplaceLevels) {
  Cluster c(Mode::kSendIndex, 2);
  c.load(6000, 3);
  c.primary->flush();
  const auto plevels = c.primary->engine().levels();
  ASSERT_GE(plevels.size(), 3u);
  for (size_t h = 0; h < 2; ++h) {
    BackupRegion& b = c.backup(h);
    const auto blevels = b.engine().levels();
    ASSERT_EQ(blevels.size(), plevels.size());
    for (size_t i = 1; i < plevels.size(); ++i) {
      ASSERT_EQ(!blevels[i], !plevels[i]) << i;
      if (plevels[i]) {
        EXPECT_EQ(blevels[i]->entry_count(), plevels[i]->entry_count());
      }
    }
    EXPECT_EQ(b.stats().compactions, 0u);
    EXPECT_EQ(b.stats().l0_peak_entries, 0u);
    EXPECT_EQ(b.engine().covered_position(), c.primary->engine().covered_position());
    expect_backup_matches(c, b, false);
  }
  EXPECT_EQ(c.primary->stats().backup_failures, 0u);
  EXPECT_GT(c.primary->stats().index_transfers, 0u);
}

TEST(SendIndexTest, FailedShipAbortsAndRetriesAfterRecovery) {
  Cluster c(Mode::kSendIndex, 1);
  c.load(500, 5);
  BackupHost& h = *c.hosts[0];
  const auto before = c.backup(0).engine().levels();
  h.fail_index_segment_at = h.index_segments_seen.load();
  // Write until the next shipment hits the fault.
  std::mt19937_64 rng(9);
  bool refused = false;
  for (int i = 0; i < 5000 && !refused; ++i) {
    try {
      c.put(numbered_key(100000 + i), "v");
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kBackupUnreachable);
      refused = true;
    }
  }
  ASSERT_TRUE(refused);
  EXPECT_EQ(c.backup(0).stats().aborted_transfers, 1u);
  EXPECT_EQ(c.primary->failed_backups(), std::vector<uint32_t>{1});
  EXPECT_THROW_CODE(c.primary->put("x", "y"), ErrorCode::kBackupUnreachable);

  // Recovery: the member is rebuilt from scratch and rejoins.
  c.primary->remove_backup(1);
  h.fail_index_segment_at = -1;
  h.open(7, Mode::kSendIndex);
  c.primary->add_backup(1, c.client(1));
  c.put("after", "recovery");
  c.primary->flush();
  expect_backup_matches(c, c.backup(0), false);
}

// --- membership changes -----------------------------------------------------------

class ReplacementTest : public ::testing::TestWithParam<Mode> {};

TEST_P(ReplacementTest, LateBackupCatchesUp) {
  Cluster c(GetParam(), 1);
  c.load(3000, 11);
  BackupHost& late = c.add_host(GetParam());
  (void)late;
  c.load(1000, 12);
  c.primary->flush();
  // Each replica, once promoted, holds every acknowledged write.
  for (size_t h = 0; h < 2; ++h) {
    auto promo = c.backup(h).promote();
    for (const auto& [k, v] : c.shadow) {
      auto got = promo.engine->get(k);
      ASSERT_TRUE(got) << "host " << h << " key " << k;
      ASSERT_EQ(*got, v);
    }
  }
}

TEST_P(ReplacementTest, PromotedBackupServesEveryAcknowledgedWrite) {
  Cluster c(GetParam(), 1);
  c.load(2500, 21);
  BackupRegion& b = c.backup(0);
  const uint64_t fill = b.buffer_fill();
  const uint64_t expected_replay =
      b.engine().log().bytes_after(b.engine().covered_position()) + fill;
  auto promo = b.promote();
  EXPECT_EQ(promo.tail_bytes, fill);
  EXPECT_EQ(promo.replayed_bytes, expected_replay);
  PrimaryRegion np(7, GetParam(), std::move(promo.engine));
  for (const auto& [k, v] : c.shadow) {
    auto got = np.get(k);
    ASSERT_TRUE(got) << k;
    ASSERT_EQ(*got, v) << k;
  }
  np.put("new", "primary");
  EXPECT_EQ(*np.get("new"), "primary");
}

INSTANTIATE_TEST_SUITE_P(Modes, ReplacementTest, ::testing::Values(Mode::kSendIndex, Mode::kBuildIndex),
                         [](const auto& info) { return std::string(mode_name(info.param)); });

TEST(ModeTest, NamesRoundTrip) {
  for (Mode m : {Mode::kNone, Mode::kSendIndex, Mode::kBuildIndex}) EXPECT_EQ(parse_mode(mode_name(m)), m);
  EXPECT_THROW_CODE(parse_mode("chain"), ErrorCode::kConfig);
  EXPECT_EQ(engine_options(Mode::kBuildIndex, small_engine()).l0_capacity_keys, 100u);
  EXPECT_TRUE(engine_options(Mode::kSendIndex, small_engine()).seal_log_on_l0_flush);
}

}  // namespace
}  // namespace replkv::replication
