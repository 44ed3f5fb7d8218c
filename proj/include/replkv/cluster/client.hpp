#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include "replkv/cluster/coordinator.hpp"
#include "replkv/cluster/protocol.hpp"
#include "replkv/cluster/region_map.hpp"
#include "replkv/rpc/client.hpp"

namespace replkv::cluster {

struct KvClientOptions {
  rpc::ClientOptions rpc;
  /// Give up on an operation after retrying this long.
  Millis retry_timeout{10000};
  Millis backoff_min{1};
  Millis backoff_max{50};
};

struct KvClientStats {
  uint64_t ops = 0;
  uint64_t retries = 0;
  uint64_t redirects = 0;
  uint64_t refreshes = 0;
};

/// Routes requests with a cached region map. Redirects and connection
/// failures refresh the map and retry until the operation succeeds or the
/// retry timeout passes. Safe for concurrent use.
class KvClient {
 public:
  KvClient(std::shared_ptr<CoordinationClient> coord, transport::Nic& nic, KvClientOptions options = {});

  void put(std::string_view key, std::string_view value);
  std::optional<std::string> get(std::string_view key);
  void del(std::string_view key);
  /// Up to `count` pairs from `start` on, crossing region boundaries.
  KvPairs scan(std::string_view start, size_t count);

  void refresh();
  RegionMap map() const;
  KvClientStats stats() const;

 private:
  template <typename Fn>
  auto with_retry(std::string_view key, Fn&& fn);
  std::shared_ptr<rpc::RpcClient> connection(uint32_t server);
  void drop(uint32_t server);

  std::shared_ptr<CoordinationClient> coord_;
  transport::Nic& nic_;
  KvClientOptions options_;

  mutable std::mutex mu_;
  RegionMap map_;
  bool have_map_ = false;
  std::map<uint32_t, std::string> addresses_;
  std::map<uint32_t, std::shared_ptr<rpc::RpcClient>> conns_;
  KvClientStats stats_;
};

}  // namespace replkv::cluster
