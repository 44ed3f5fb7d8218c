#pragma once

// Whole cluster in one process over the in-process fabric: a coordinator,
// N region servers (each a master candidate) and client NICs.

#include <functional>
#include <map>
#include <memory>

#include "replkv/cluster/client.hpp"
#include "replkv/cluster/coordinator.hpp"
#include "replkv/cluster/master.hpp"
#include "replkv/cluster/server.hpp"

namespace replkv::cluster {

struct SimOptions {
  size_t servers = 2;
  size_t regions = 32;
  size_t backups_per_region = 1;
  replication::Mode mode = replication::Mode::kSendIndex;
  lsm::EngineOptions engine;
  uint64_t segment_size = 64 * 1024;
  uint64_t device_capacity = 1ull << 30;
  rpc::ServerOptions rpc;
  rpc::ClientOptions client_rpc;
  Millis session_timeout{200};
  Millis heartbeat{40};
  Millis master_poll{20};
  std::string key_prefix = "user";
  transport::InProcOptions fabric;
  KvClientOptions client;
};

struct ClusterTotals {
  DeviceStats device;
  transport::TrafficStats nic;  // server NICs only
};

class SimCluster {
 public:
  explicit SimCluster(SimOptions options);
  ~SimCluster();

  SimCluster(const SimCluster&) = delete;
  SimCluster& operator=(const SimCluster&) = delete;

  /// Starts every server and waits until a master has published the map.
  void start(Millis timeout = Millis(10000));

  const SimOptions& options() const { return options_; }
  std::vector<uint32_t> server_ids() const;
  RegionServer& server(uint32_t id);
  bool alive(uint32_t id) const;
  std::shared_ptr<Coordinator> coordinator() const { return coord_; }
  std::shared_ptr<MasterEventLog> events() const { return events_; }
  const std::shared_ptr<transport::InProcFabric>& fabric() const { return fabric_; }

  /// Shared client on the client NIC.
  KvClient& client() { return *client_; }
  std::unique_ptr<KvClient> new_client();

  /// Crash emulation: heartbeats stop, the NIC goes down, the master
  /// candidate on that server stops.
  void kill(uint32_t id);
  /// Graceful shutdown of one server.
  void stop(uint32_t id);

  RegionMap map() const;
  /// Polls the stored map until `pred` holds.
  bool wait_for_map(const std::function<bool(const RegionMap&)>& pred, Millis timeout);
  /// Id of the server whose candidate leads, if any.
  std::optional<uint32_t> master() const;

  /// Forces an L0 flush of every primary region.
  void flush_all();
  ClusterTotals totals() const;

 private:
  struct Node {
    std::unique_ptr<transport::Nic> nic;
    std::unique_ptr<RegionServer> server;
    std::unique_ptr<MasterRunner> runner;
    bool alive = false;
  };

  SimOptions options_;
  std::shared_ptr<transport::InProcFabric> fabric_;
  std::shared_ptr<Coordinator> coord_;
  std::shared_ptr<MasterEventLog> events_;
  std::map<uint32_t, Node> nodes_;
  std::unique_ptr<transport::Nic> client_nic_;
  std::unique_ptr<KvClient> client_;
};

}  // namespace replkv::cluster
