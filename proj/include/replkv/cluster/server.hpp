#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <string>

#include <nlohmann/json.hpp>

#include "replkv/cluster/coordinator.hpp"
#include "replkv/cluster/protocol.hpp"
#include "replkv/device.hpp"
#include "replkv/replication.hpp"
#include "replkv/rpc/client.hpp"
#include "replkv/rpc/server.hpp"

namespace replkv::cluster {

struct ServerConfig {
  uint32_t id = 0;
  std::string address;                 // listen address
  uint64_t device_capacity = 1ull << 30;
  uint64_t segment_size = 64 * 1024;
  std::string device_path;             // empty = memory device
  lsm::EngineOptions engine;
  rpc::ServerOptions rpc;
  rpc::ClientOptions peer;             // connections to other servers
  Millis heartbeat{100};
};

/// A server process: one device shared by every region it hosts, an rpc
/// endpoint, and an ephemeral registration kept alive by heartbeats.
class RegionServer {
 public:
  RegionServer(ServerConfig config, transport::Nic& nic, std::shared_ptr<CoordinationClient> coord);
  ~RegionServer();

  RegionServer(const RegionServer&) = delete;
  RegionServer& operator=(const RegionServer&) = delete;

  /// Listens and registers. Throws NodeExists if the id is taken.
  void start();
  /// Graceful: deregisters at once, then stops serving.
  void stop();
  /// Stops heartbeats without deregistering and drops off the network.
  void crash();
  bool running() const { return running_; }

  uint32_t id() const { return config_.id; }
  std::string address() const;
  Device& device() { return *device_; }
  transport::Nic& nic() { return nic_; }
  SessionId session() const;

  std::shared_ptr<replication::PrimaryRegion> primary(uint32_t region) const;
  std::shared_ptr<replication::BackupRegion> backup(uint32_t region) const;
  std::vector<uint32_t> primary_regions() const;
  std::vector<uint32_t> backup_regions() const;
  uint64_t map_version() const;

  nlohmann::json stats() const;
  nlohmann::json region_stats(uint32_t region) const;

  Bytes handle(const rpc::Request& req);

 private:
  struct Served {
    RegionEntry entry;
    std::shared_ptr<replication::PrimaryRegion> primary;
    std::shared_ptr<replication::BackupRegion> backup;
  };

  std::shared_ptr<replication::PrimaryRegion> primary_for(uint32_t region, std::string_view key) const;
  void open_region(const OpenRegionRequest& req);
  void promote(const OpenRegionRequest& req);
  void reconcile(const std::shared_ptr<replication::PrimaryRegion>& region, const OpenRegionRequest& req);
  void close_region(uint32_t region);
  void flush_region(uint32_t region);
  std::shared_ptr<rpc::RpcClient> peer(const Peer& p);
  void note_version(uint64_t v);

  ServerConfig config_;
  transport::Nic& nic_;
  std::shared_ptr<CoordinationClient> coord_;
  std::unique_ptr<Device> device_;
  std::unique_ptr<rpc::RpcServer> rpc_;
  std::unique_ptr<SessionKeeper> keeper_;
  bool running_ = false;

  mutable std::mutex mu_;
  std::map<uint32_t, Served> regions_;
  uint64_t map_version_ = 0;

  std::mutex peers_mu_;
  std::map<uint32_t, std::shared_ptr<rpc::RpcClient>> peers_;
};

}  // namespace replkv::cluster
