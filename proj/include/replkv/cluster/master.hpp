#pragma once

#include <atomic>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "replkv/cluster/coordinator.hpp"
#include "replkv/cluster/protocol.hpp"
#include "replkv/cluster/region_map.hpp"
#include "replkv/rpc/client.hpp"

namespace replkv::cluster {

constexpr const char* kRegionMapPath = "/regionmap";
constexpr const char* kElectionRoot = "/master";

/// Region map as stored in the coordinator (hex of the binary encoding).
void store_region_map(CoordinationClient& coord, const RegionMap& map);
std::optional<RegionMap> load_region_map(CoordinationClient& coord);

/// Registered servers and their addresses.
std::map<uint32_t, std::string> live_servers(CoordinationClient& coord);

struct MasterOptions {
  std::vector<uint32_t> servers;  // configured servers, used to lay out a new map
  size_t regions = 32;
  size_t backups_per_region = 1;
  replication::Mode mode = replication::Mode::kSendIndex;
  std::string key_prefix = "user";
  rpc::ClientOptions client{.timeout = Millis(60000)};
  /// How long bootstrap waits for every configured server to register.
  Millis bootstrap_wait{2000};
};

struct MasterEvent {
  uint64_t epoch = 0;
  std::string master;
  std::string action;
  int64_t region = -1;
  uint64_t map_version = 0;
};

/// Shared, thread-safe record of what masters did; used to check that no
/// two masters act within one epoch.
class MasterEventLog {
 public:
  void add(MasterEvent e);
  std::vector<MasterEvent> events() const;

 private:
  mutable std::mutex mu_;
  std::vector<MasterEvent> events_;
};

struct RecoveryReport {
  size_t promoted = 0;
  size_t backups_removed = 0;
  size_t backups_added = 0;
  size_t degraded = 0;
  size_t lost = 0;
  bool map_changed = false;
};

/// Orchestrates regions: lays out and opens them, and repairs region groups
/// after server failures. Recovery of distinct regions runs concurrently.
class Master {
 public:
  Master(std::shared_ptr<CoordinationClient> coord, transport::Nic& nic, MasterOptions options,
         std::string id = "master", uint64_t epoch = 0, std::shared_ptr<MasterEventLog> log = nullptr);

  /// Adopts the stored map, or creates one and opens every region (backups
  /// first). Regions missing a member are flagged degraded.
  RegionMap bootstrap();
  /// One detection and repair pass over every region.
  RecoveryReport check_failures();

  RegionMap map() const;
  /// Consulted before each map update; a master that lost its lead stops.
  std::function<bool()> still_leader;

 private:
  struct Outcome {
    RegionEntry entry;
    size_t promoted = 0, removed = 0, added = 0;
    bool changed = false;
  };

  std::shared_ptr<rpc::RpcClient> client(uint32_t server, const std::map<uint32_t, std::string>& live);
  void send_open(uint32_t server, const RegionEntry& e, Role role, uint64_t version,
                 const std::map<uint32_t, std::string>& live, rpc::Op op = rpc::Op::kOpenRegion);
  Outcome repair_members(RegionEntry e, const std::map<uint32_t, std::string>& live, uint64_t version);
  Outcome add_backups(RegionEntry e, const std::map<uint32_t, std::string>& live, uint64_t version);
  void publish(RegionMap& map);
  void record(const std::string& action, int64_t region, uint64_t version);
  size_t desired_backups() const;

  std::shared_ptr<CoordinationClient> coord_;
  transport::Nic& nic_;
  MasterOptions options_;
  std::string id_;
  uint64_t epoch_;
  std::shared_ptr<MasterEventLog> log_;

  mutable std::mutex mu_;
  RegionMap map_;
  std::mutex clients_mu_;
  std::map<uint32_t, std::shared_ptr<rpc::RpcClient>> clients_;
};

/// Runs the election and, while leading, the master loop.
class MasterRunner {
 public:
  MasterRunner(std::shared_ptr<CoordinationClient> coord, SessionId session, transport::Nic& nic,
               MasterOptions options, std::string id, Millis poll = Millis(50),
               std::shared_ptr<MasterEventLog> log = nullptr);
  ~MasterRunner();

  void start();
  void stop();
  bool leader() const { return leader_.load(); }
  uint64_t epoch() const { return epoch_.load(); }
  /// Passes completed while leading.
  uint64_t passes() const { return passes_.load(); }
  const std::string& id() const { return id_; }

 private:
  void loop();

  std::shared_ptr<CoordinationClient> coord_;
  transport::Nic& nic_;
  MasterOptions options_;
  std::string id_;
  Millis poll_;
  std::shared_ptr<MasterEventLog> log_;
  Election election_;
  std::unique_ptr<Master> master_;
  std::atomic<bool> leader_{false};
  std::atomic<uint64_t> epoch_{0};
  std::atomic<uint64_t> passes_{0};
  std::atomic<bool> stopping_{false};
  std::thread thread_;
};

}  // namespace replkv::cluster
