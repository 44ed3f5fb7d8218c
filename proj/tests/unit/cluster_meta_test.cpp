#include <atomic>
#include <random>
#include <set>
#include <thread>

#include <fmt/format.h>

#include "replkv/cluster/coordinator.hpp"
#include "replkv/cluster/coordinator_rpc.hpp"
#include "replkv/cluster/protocol.hpp"
#include "replkv/cluster/region_map.hpp"
#include "test_util.hpp"

namespace replkv::cluster {
namespace {

using namespace std::chrono_literals;

RegionEntry random_entry(std::mt19937_64& rng) {
  auto key = [&] {
    std::string k = testing::random_string(rng, 0, kMaxBoundaryKey);
    while (!k.empty() && k.back() == '\0') k.pop_back();
    return k;
  };
  RegionEntry e;
  e.id = static_cast<uint16_t>(rng());
  e.start_key = key();
  e.end_key = key();
  e.primary = static_cast<uint32_t>(rng());
  for (size_t i = 0, n = rng() % 3; i < n; ++i) e.backups.push_back(static_cast<uint32_t>(rng()));
  e.flags = static_cast<uint8_t>(rng() % 4);
  return e;
}

TEST(RegionEntryTest, EncodesToSixtyFourBytesAndRoundTrips) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 2000; ++i) {
    const RegionEntry e = random_entry(rng);
    const Bytes b = e.encode();
    ASSERT_EQ(b.size(), 64u);
    EXPECT_EQ(RegionEntry::decode(b), e);
  }
}

TEST(RegionEntryTest, FieldOffsets) {
  RegionEntry e;
  e.id = 0x0102;
  e.start_key = "abc";
  e.end_key = "abd";
  e.primary = 7;
  e.backups = {8, 9};
  e.flags = region_flags::kDegraded;
  const Bytes b = e.encode();
  EXPECT_EQ(b[0], 'a');
  EXPECT_EQ(b[3], 0);
  EXPECT_EQ(b[24], 'a');
  EXPECT_EQ(load_le<uint32_t>(&b[48]), 7u);
  EXPECT_EQ(load_le<uint32_t>(&b[52]), 8u);
  EXPECT_EQ(load_le<uint32_t>(&b[56]), 9u);
  EXPECT_EQ(load_le<uint16_t>(&b[60]), 0x0102);
  EXPECT_EQ(b[62], 2);
  EXPECT_EQ(b[63], region_flags::kDegraded);
}

TEST(RegionEntryTest, RejectsOversizedBoundaries) {
  RegionEntry e;
  e.start_key = std::string(25, 'k');
  EXPECT_THROW_CODE(e.encode(), ErrorCode::kInvalidArgument);
  e.start_key = std::string("ab\0", 3);
  EXPECT_THROW_CODE(e.encode(), ErrorCode::kInvalidArgument);
  e.start_key = "a";
  e.backups = {1, 2, 3};
  EXPECT_THROW_CODE(e.encode(), ErrorCode::kInvalidArgument);
}

TEST(RegionMapTest, TenThousandRegionsTake640KB) {
  std::vector<uint32_t> servers{1, 2, 3};
  const RegionMap m = make_region_map(10000, servers, 2, "user");
  const Bytes b = m.encode();
  EXPECT_EQ(b.size() - kRegionMapHeaderSize, 640000u);
  EXPECT_EQ(RegionMap::decode(b), m);
}

TEST(RegionMapTest, LayoutOfThirtyTwoRegionsOverTwoServers) {
  const RegionMap m = make_region_map(32, {1, 2}, 1, "user");
  std::map<uint32_t, int> primaries, backups;
  for (const auto& e : m.entries()) {
    ++primaries[e.primary];
    ASSERT_EQ(e.backups.size(), 1u);
    ++backups[e.backups[0]];
    EXPECT_NE(e.primary, e.backups[0]);
  }
  EXPECT_EQ(primaries[1], 16);
  EXPECT_EQ(primaries[2], 16);
  EXPECT_EQ(backups[1], 16);
  EXPECT_EQ(backups[2], 16);
}

TEST(RegionMapTest, EmptyMap) {
  const RegionMap m = make_region_map(0, {1}, 1, "user");
  EXPECT_TRUE(m.empty());
  EXPECT_EQ(RegionMap::decode(m.encode()).size(), 0u);
}

TEST(RegionMapTest, UniformBoundariesSplitTheHashSpace) {
  const auto b = uniform_boundaries(4, "user");
  ASSERT_EQ(b.size(), 5u);
  EXPECT_EQ(b[0], "");
  EXPECT_EQ(b[2], "user09223372036854775808");
  EXPECT_EQ(b[4], "");
}

// Every key falls in exactly one region; lookup agrees with a linear scan.
TEST(RegionMapTest, LookupPartitionsTheKeyspace) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    std::set<std::string> cuts;
    const size_t n = 1 + rng() % 40;
    while (cuts.size() < n - 1) cuts.insert(testing::random_string(rng, 1, 6));
    std::vector<std::string> bounds{""};
    bounds.insert(bounds.end(), cuts.begin(), cuts.end());
    bounds.push_back("");
    std::vector<RegionEntry> entries;
    for (size_t i = 0; i < n; ++i) {
      RegionEntry e;
      e.id = static_cast<uint16_t>(i);
      e.start_key = bounds[i];
      e.end_key = bounds[i + 1];
      e.primary = 1;
      entries.push_back(e);
    }
    RegionMap m(1, entries);
    m.validate();
    for (int q = 0; q < 500; ++q) {
      const std::string key = testing::random_string(rng, 0, 8);
      int matches = 0;
      uint16_t expected = 0;
      for (const auto& e : entries) {
        if (key >= e.start_key && (e.end_key.empty() || key < e.end_key)) {
          ++matches;
          expected = e.id;
        }
      }
      ASSERT_EQ(matches, 1);
      EXPECT_EQ(m.lookup(key).id, expected);
    }
  }
}

TEST(RegionMapTest, ValidateRejectsGaps) {
  RegionEntry a, b;
  a.id = 0;
  a.end_key = "m";
  b.id = 1;
  b.start_key = "n";
  EXPECT_THROW_CODE(RegionMap(1, {a, b}).validate(), ErrorCode::kInvalidArgument);
  b.start_key = "m";
  RegionMap(1, {a, b}).validate();
  b.id = 0;
  EXPECT_THROW_CODE(RegionMap(1, {a, b}).validate(), ErrorCode::kInvalidArgument);
}

TEST(ProtocolTest, OpenRegionRoundTrip) {
  OpenRegionRequest q;
  q.entry.id = 3;
  q.entry.start_key = "a";
  q.entry.primary = 1;
  q.entry.backups = {2};
  q.role = Role::kBackup;
  q.mode = replication::Mode::kBuildIndex;
  q.map_version = 9;
  q.peers = {{1, "server-1"}};
  const OpenRegionRequest d = OpenRegionRequest::decode(q.encode());
  EXPECT_EQ(d.entry, q.entry);
  EXPECT_EQ(d.role, Role::kBackup);
  EXPECT_EQ(d.mode, replication::Mode::kBuildIndex);
  EXPECT_EQ(d.map_version, 9u);
  ASSERT_EQ(d.peers.size(), 1u);
  EXPECT_EQ(d.peers[0].address, "server-1");
}

TEST(ProtocolTest, RedirectCarriesMapVersion) {
  EXPECT_EQ(redirect_version(Error(ErrorCode::kRedirect, "not primary; map version 42")), 42u);
  EXPECT_EQ(redirect_version(Error(ErrorCode::kTimeout, "map version 42")), 0u);
}

// --- coordinator ----------------------------------------------------------------

struct ManualCoordinator {
  std::shared_ptr<ManualClock> clock = std::make_shared<ManualClock>();
  Coordinator coord{CoordinatorOptions{100ms, false}, clock};
};

TEST(CoordinatorTest, EphemeralNodeExpiresWithItsSession) {
  ManualCoordinator m;
  const SessionId s = m.coord.open_session();
  m.coord.create("/servers/1", "addr", node_flags::kEphemeral, s);
  std::vector<std::string> deleted;
  m.coord.watch("/servers", [&](WatchEvent ev, const std::string& p) {
    if (ev == WatchEvent::kDeleted) deleted.push_back(p);
  });
  m.clock->advance(60ms);
  m.coord.heartbeat(s);
  m.clock->advance(60ms);
  EXPECT_EQ(m.coord.expire_sessions(), 0u);
  EXPECT_TRUE(m.coord.get("/servers/1"));
  m.clock->advance(50ms);
  EXPECT_EQ(m.coord.expire_sessions(), 1u);
  EXPECT_FALSE(m.coord.get("/servers/1"));
  EXPECT_EQ(deleted, std::vector<std::string>{"/servers/1"});
  EXPECT_THROW_CODE(m.coord.heartbeat(s), ErrorCode::kNoNode);
}

TEST(CoordinatorTest, DuplicateRegistrationFails) {
  ManualCoordinator m;
  const SessionId s = m.coord.open_session();
  m.coord.create("/servers/1", "a", node_flags::kEphemeral, s);
  EXPECT_THROW_CODE(m.coord.create("/servers/1", "b", node_flags::kEphemeral, s), ErrorCode::kNodeExists);
}

TEST(CoordinatorTest, GracefulCloseDeletesAtOnce) {
  ManualCoordinator m;
  const SessionId s = m.coord.open_session();
  m.coord.create("/servers/1", "a", node_flags::kEphemeral, s);
  m.coord.create("/persistent", "p", 0);
  int fired = 0;
  m.coord.watch("/servers/1", [&](WatchEvent ev, const std::string&) { fired += ev == WatchEvent::kDeleted; });
  m.coord.close_session(s);
  EXPECT_EQ(fired, 1);
  EXPECT_FALSE(m.coord.get("/servers/1"));
  EXPECT_TRUE(m.coord.get("/persistent"));
}

TEST(CoordinatorTest, SequentialNodesAndChildren) {
  ManualCoordinator m;
  const std::string a = m.coord.create("/q/n_", "", node_flags::kSequential);
  const std::string b = m.coord.create("/q/n_", "", node_flags::kSequential);
  EXPECT_EQ(a, "/q/n_0000000000");
  EXPECT_EQ(b, "/q/n_0000000001");
  EXPECT_EQ(m.coord.children("/q"), (std::vector<std::string>{"n_0000000000", "n_0000000001"}));
  m.coord.remove(a);
  EXPECT_EQ(m.coord.create("/q/n_", "", node_flags::kSequential), "/q/n_0000000002");
  EXPECT_THROW_CODE(m.coord.remove("/nope"), ErrorCode::kNoNode);
  EXPECT_THROW_CODE(m.coord.create("bad", "", 0), ErrorCode::kInvalidArgument);
}

TEST(CoordinatorTest, UnavailableCoordinatorRefusesEveryCall) {
  ManualCoordinator m;
  m.coord.set_available(false);
  EXPECT_THROW_CODE(m.coord.open_session(), ErrorCode::kCoordinatorUnavailable);
  EXPECT_THROW_CODE(m.coord.get("/x"), ErrorCode::kCoordinatorUnavailable);
  m.coord.set_available(true);
  EXPECT_NO_THROW(m.coord.open_session());
}

TEST(CoordinatorTest, SnapshotListsNodesAndSessions) {
  ManualCoordinator m;
  const SessionId s = m.coord.open_session();
  m.coord.create("/servers/4", "x", node_flags::kEphemeral, s);
  const auto j = m.coord.snapshot();
  EXPECT_EQ(j["session_timeout_ms"], 100);
  EXPECT_EQ(j["sessions"].size(), 1u);
  bool found = false;
  for (const auto& n : j["nodes"]) found = found || (n["path"] == "/servers/4" && n["ephemeral_owner"] == s);
  EXPECT_TRUE(found);
}

// Real clock: a watcher sees the deletion about one session timeout after the
// heartbeats stop.
TEST(CoordinatorTest, WatchFiresAfterSessionTimeout) {
  auto coord = std::make_shared<Coordinator>(CoordinatorOptions{100ms, true});
  auto keeper = std::make_unique<SessionKeeper>(coord, 20ms);
  coord->create("/servers/1", "a", node_flags::kEphemeral, keeper->session());
  std::atomic<int64_t> fired_at{0};
  coord->watch("/servers/1", [&](WatchEvent ev, const std::string&) {
    if (ev == WatchEvent::kDeleted) {
      fired_at = std::chrono::steady_clock::now().time_since_epoch().count();
    }
  });
  std::this_thread::sleep_for(250ms);
  EXPECT_TRUE(coord->get("/servers/1")) << "heartbeats keep the node alive";
  const auto stopped = std::chrono::steady_clock::now();
  keeper->abandon();
  while (fired_at == 0 && std::chrono::steady_clock::now() - stopped < 2s) std::this_thread::sleep_for(2ms);
  ASSERT_NE(fired_at, 0);
  const auto elapsed = std::chrono::steady_clock::time_point(std::chrono::steady_clock::duration(fired_at.load())) - stopped;
  EXPECT_GE(elapsed, 80ms);
  EXPECT_LT(elapsed, 600ms);
}

// --- election -------------------------------------------------------------------

TEST(ElectionTest, ConcurrentCandidatesElectOneLeader) {
  for (int trial = 0; trial < 100; ++trial) {
    auto coord = std::make_shared<Coordinator>(CoordinatorOptions{1000ms, false});
    constexpr int kCandidates = 4;
    std::vector<std::unique_ptr<Election>> elections;
    for (int i = 0; i < kCandidates; ++i) {
      elections.push_back(std::make_unique<Election>(coord, coord->open_session(), "/master", fmt::format("c{}", i)));
    }
    std::atomic<int> leaders{0};
    std::vector<std::thread> threads;
    for (auto& e : elections) {
      threads.emplace_back([&e, &leaders] {
        e->join();
        std::this_thread::yield();
        if (e->check()) ++leaders;
      });
    }
    for (auto& t : threads) t.join();
    int now_leading = 0;
    for (auto& e : elections) now_leading += e->check() ? 1 : 0;
    ASSERT_EQ(now_leading, 1) << "trial " << trial;
    ASSERT_EQ(leaders.load(), 1);
  }
}

TEST(ElectionTest, EpochAdvancesWhenLeaderGoes) {
  auto coord = std::make_shared<Coordinator>(CoordinatorOptions{1000ms, false});
  const SessionId s1 = coord->open_session(), s2 = coord->open_session();
  Election a(coord, s1, "/master", "a"), b(coord, s2, "/master", "b");
  a.join();
  b.join();
  EXPECT_TRUE(a.check());
  EXPECT_FALSE(b.check());
  EXPECT_EQ(a.epoch(), 1u);
  EXPECT_EQ(b.current_leader(), "a");
  coord->close_session(s1);
  EXPECT_FALSE(a.check());
  EXPECT_TRUE(b.check());
  EXPECT_EQ(b.epoch(), 2u);
}

TEST(ElectionTest, LoneCandidateLeads) {
  auto coord = std::make_shared<Coordinator>(CoordinatorOptions{1000ms, false});
  Election a(coord, coord->open_session(), "/master", "a");
  EXPECT_FALSE(a.current_leader());
  EXPECT_TRUE(a.check());
}

// --- coordinator over rpc -------------------------------------------------------

TEST(RemoteCoordinatorTest, OperationsMatchTheEmbeddedCoordinator) {
  auto fabric = transport::InProcFabric::create();
  auto snic = transport::make_inproc_nic(fabric, "coord");
  auto cnic = transport::make_inproc_nic(fabric, "client");
  auto coord = std::make_shared<Coordinator>(CoordinatorOptions{200ms, true});
  CoordinatorServer server(*snic, "coord:1", coord);
  auto remote = std::make_shared<RemoteCoordinator>(*cnic, server.address());

  const SessionId s = remote->open_session();
  EXPECT_EQ(remote->create("/servers/3", "server-3", node_flags::kEphemeral, s), "/servers/3");
  EXPECT_EQ(remote->get("/servers/3"), "server-3");
  EXPECT_FALSE(remote->get("/missing"));
  EXPECT_EQ(remote->children("/servers"), std::vector<std::string>{"3"});
  remote->set("/regionmap", std::string("\x01\x00\x02", 3));
  EXPECT_EQ(remote->get("/regionmap")->size(), 3u);
  EXPECT_THROW_CODE(remote->create("/servers/3", "", node_flags::kEphemeral, s), ErrorCode::kNodeExists);
  EXPECT_EQ(remote->snapshot()["sessions"].size(), 1u);
  remote->close_session(s);
  EXPECT_FALSE(coord->get("/servers/3"));

  server.stop();
  EXPECT_THROW_CODE(remote->get("/x"), ErrorCode::kCoordinatorUnavailable);
}

}  // namespace
}  // namespace replkv::cluster
