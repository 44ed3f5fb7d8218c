#include "replkv/cluster/client.hpp"

#include <thread>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "replkv/cluster/master.hpp"

namespace replkv::cluster {

namespace {

bool retryable(ErrorCode c) {
  switch (c) {
    case ErrorCode::kRedirect:
    case ErrorCode::kConnectionClosed:
    case ErrorCode::kUnreachable:
    case ErrorCode::kRefused:
    case ErrorCode::kTimeout:
    case ErrorCode::kBackupUnreachable:
    case ErrorCode::kServerUnreachable:
    case ErrorCode::kCoordinatorUnavailable:
      return true;
    default:
      return false;
  }
}

}  // namespace

KvClient::KvClient(std::shared_ptr<CoordinationClient> coord, transport::Nic& nic, KvClientOptions options)
    : coord_(std::move(coord)), nic_(nic), options_(options) {}

void KvClient::refresh() {
  auto map = load_region_map(*coord_);
  auto addrs = live_servers(*coord_);
  std::lock_guard lock(mu_);
  ++stats_.refreshes;
  addresses_ = std::move(addrs);
  if (map) {
    map_ = std::move(*map);
    have_map_ = true;
  }
}

RegionMap KvClient::map() const {
  std::lock_guard lock(mu_);
  return map_;
}

KvClientStats KvClient::stats() const {
  std::lock_guard lock(mu_);
  return stats_;
}

std::shared_ptr<rpc::RpcClient> KvClient::connection(uint32_t server) {
  std::string address;
  {
    std::lock_guard lock(mu_);
    auto it = conns_.find(server);
    if (it != conns_.end() && !it->second->closed()) return it->second;
    auto a = addresses_.find(server);
    if (a == addresses_.end()) raise(ErrorCode::kServerUnreachable, fmt::format("server {} is not registered", server));
    address = a->second;
  }
  auto c = std::make_shared<rpc::RpcClient>(nic_, address, options_.rpc);
  std::lock_guard lock(mu_);
  conns_[server] = c;
  return c;
}

void KvClient::drop(uint32_t server) {
  std::lock_guard lock(mu_);
  conns_.erase(server);
}

template <typename Fn>
auto KvClient::with_retry(std::string_view key, Fn&& fn) {
  const auto deadline = std::chrono::steady_clock::now() + options_.retry_timeout;
  Millis backoff = options_.backoff_min;
  bool need_refresh = false;
  int redirects_in_row = 0;
  {
    std::lock_guard lock(mu_);
    ++stats_.ops;
    need_refresh = !have_map_;
  }
  for (;;) {
    uint32_t server = kNoServer;
    try {
      if (need_refresh) refresh();
      RegionEntry entry;
      {
        std::lock_guard lock(mu_);
        if (!have_map_) raise(ErrorCode::kCoordinatorUnavailable, "no region map yet");
        entry = map_.lookup(key);
      }
      if (entry.lost()) raise(ErrorCode::kNoBackupAlive, fmt::format("region {} is lost", entry.id));
      server = entry.primary;
      return fn(*connection(server), entry);
    } catch (const Error& e) {
      if (!retryable(e.code()) || std::chrono::steady_clock::now() >= deadline) throw;
      {
        std::lock_guard lock(mu_);
        ++stats_.retries;
        if (e.code() == ErrorCode::kRedirect) ++stats_.redirects;
      }
      if (e.code() != ErrorCode::kRedirect && server != kNoServer) drop(server);
      if (e.code() != ErrorCode::kRedirect || ++redirects_in_row > 1) {
        std::this_thread::sleep_for(backoff);
        backoff = std::min(backoff * 2, options_.backoff_max);
      }
      need_refresh = true;
    }
  }
}

void KvClient::put(std::string_view key, std::string_view value) {
  with_retry(key, [&](rpc::RpcClient& c, const RegionEntry& e) {
    c.call(rpc::Op::kPut, encode_put(e.id, key, value));
    return 0;
  });
}

std::optional<std::string> KvClient::get(std::string_view key) {
  return with_retry(key, [&](rpc::RpcClient& c, const RegionEntry& e) -> std::optional<std::string> {
    const Bytes reply = c.call(rpc::Op::kGet, encode_key(e.id, key), key.size() + 1100);
    ByteReader r(reply);
    if (r.get<uint8_t>() == 0) return std::nullopt;
    return r.get_string();
  });
}

void KvClient::del(std::string_view key) {
  with_retry(key, [&](rpc::RpcClient& c, const RegionEntry& e) {
    c.call(rpc::Op::kDelete, encode_key(e.id, key));
    return 0;
  });
}

KvPairs KvClient::scan(std::string_view start, size_t count) {
  KvPairs out;
  std::string from(start);
  while (out.size() < count) {
    auto [pairs, end] = with_retry(from, [&](rpc::RpcClient& c, const RegionEntry& e) {
      const auto want = static_cast<uint32_t>(count - out.size());
      const Bytes reply = c.call(rpc::Op::kScan, encode_scan(e.id, from, want));
      return std::make_pair(decode_pairs(reply), e.end_key);
    });
    out.insert(out.end(), std::make_move_iterator(pairs.begin()), std::make_move_iterator(pairs.end()));
    if (end.empty()) break;
    from = end;
  }
  return out;
}

}  // namespace replkv::cluster
