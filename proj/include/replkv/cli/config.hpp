#pragma once

// Cluster configuration shared by every binary.

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "replkv/cluster/master.hpp"
#include "replkv/cluster/server.hpp"

namespace replkv::cli {

using cluster::Millis;

struct ServerEntry {
  uint32_t id = 0;
  std::string address = "127.0.0.1:0";  // listen address; port 0 = ephemeral
  std::string device_path;              // empty = memory device
};

struct ClusterConfig {
  std::string coordinator = "127.0.0.1:7400";
  Millis session_timeout{500};
  Millis heartbeat{100};
  std::vector<ServerEntry> servers;
  size_t regions = 32;
  size_t backups_per_region = 1;
  replication::Mode mode = replication::Mode::kSendIndex;
  lsm::EngineOptions engine;
  uint64_t segment_size = 64 * 1024;
  uint64_t device_capacity = 1ull << 30;
  rpc::ServerOptions rpc;
  Millis master_poll{50};
  Millis bootstrap_wait{2000};

  void validate() const;
  const ServerEntry& server(uint32_t id) const;

  cluster::ServerConfig server_config(uint32_t id) const;
  cluster::MasterOptions master_options() const;
};

/// Environment overrides: REPLKV_CONFIG__a__b=value sets key "b" of object
/// "a". Values that parse as JSON are used as such, anything else as a string.
void apply_env_overrides(nlohmann::json& j, char** envp);

/// Unknown keys are rejected. Throws Config on any invalid field.
ClusterConfig parse_cluster_config(const nlohmann::json& j);
ClusterConfig load_cluster_config(const std::string& path, char** envp = nullptr);
nlohmann::json to_json(const ClusterConfig& c);

/// Installs the default logger: "text" or "json" lines on stderr.
void setup_logging(const std::string& format, const std::string& level);

}  // namespace replkv::cli
