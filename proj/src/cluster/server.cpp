#include "replkv/cluster/server.hpp"

#include <algorithm>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace replkv::cluster {

using replication::BackupRegion;
using replication::PrimaryRegion;

RegionServer::RegionServer(ServerConfig config, transport::Nic& nic, std::shared_ptr<CoordinationClient> coord)
    : config_(std::move(config)), nic_(nic), coord_(std::move(coord)) {
  config_.engine.validate();
  if (config_.device_path.empty()) {
    device_ = std::make_unique<MemoryDevice>(config_.device_capacity, config_.segment_size);
  } else {
    device_ = std::make_unique<FileDevice>(config_.device_path, config_.device_capacity, config_.segment_size);
  }
}

RegionServer::~RegionServer() {
  if (running_) stop();
  if (rpc_) rpc_->stop();
  std::lock_guard lock(mu_);
  regions_.clear();
}

void RegionServer::start() {
  if (running_) return;
  rpc::ServerOptions opts = config_.rpc;
  opts.inline_op = [](rpc::Op op) { return replication::is_replication_op(op); };
  rpc_ = std::make_unique<rpc::RpcServer>(
      nic_, config_.address, [this](const rpc::Request& req) { return handle(req); }, opts);
  keeper_ = std::make_unique<SessionKeeper>(coord_, config_.heartbeat);
  try {
    coord_->create(server_node(config_.id), rpc_->address(), node_flags::kEphemeral, keeper_->session());
  } catch (...) {
    keeper_->close();
    rpc_->stop();
    throw;
  }
  running_ = true;
  spdlog::info("server {} serving at {}", config_.id, rpc_->address());
}

void RegionServer::stop() {
  if (!running_) return;
  running_ = false;
  keeper_->close();
  rpc_->stop();
  spdlog::info("server {} stopped", config_.id);
}

void RegionServer::crash() {
  if (!running_) return;
  running_ = false;
  keeper_->abandon();
  nic_.shutdown();
  rpc_->stop();
  spdlog::warn("server {} crashed", config_.id);
}

std::string RegionServer::address() const { return rpc_ ? rpc_->address() : config_.address; }

SessionId RegionServer::session() const { return keeper_ ? keeper_->session() : 0; }

std::shared_ptr<PrimaryRegion> RegionServer::primary(uint32_t region) const {
  std::lock_guard lock(mu_);
  auto it = regions_.find(region);
  return it == regions_.end() ? nullptr : it->second.primary;
}

std::shared_ptr<BackupRegion> RegionServer::backup(uint32_t region) const {
  std::lock_guard lock(mu_);
  auto it = regions_.find(region);
  return it == regions_.end() ? nullptr : it->second.backup;
}

std::vector<uint32_t> RegionServer::primary_regions() const {
  std::lock_guard lock(mu_);
  std::vector<uint32_t> out;
  for (const auto& [id, s] : regions_) {
    if (s.primary) out.push_back(id);
  }
  return out;
}

std::vector<uint32_t> RegionServer::backup_regions() const {
  std::lock_guard lock(mu_);
  std::vector<uint32_t> out;
  for (const auto& [id, s] : regions_) {
    if (s.backup) out.push_back(id);
  }
  return out;
}

uint64_t RegionServer::map_version() const {
  std::lock_guard lock(mu_);
  return map_version_;
}

void RegionServer::note_version(uint64_t v) {
  std::lock_guard lock(mu_);
  map_version_ = std::max(map_version_, v);
}

std::shared_ptr<PrimaryRegion> RegionServer::primary_for(uint32_t region, std::string_view key) const {
  std::lock_guard lock(mu_);
  auto it = regions_.find(region);
  if (it == regions_.end() || !it->second.primary || !it->second.entry.contains(key)) {
    raise(ErrorCode::kRedirect, fmt::format("server {} is not primary of region {} for this key; map version {}",
                                            config_.id, region, map_version_));
  }
  return it->second.primary;
}

Bytes RegionServer::handle(const rpc::Request& req) {
  switch (req.op) {
    case rpc::Op::kPing:
      return {};
    case rpc::Op::kPut: {
      ByteReader r(req.payload);
      const auto region = r.get<uint32_t>();
      const std::string key = r.get_string();
      const ByteView value = r.get_bytes(r.get<uint32_t>());
      primary_for(region, key)->put(key, std::string_view(reinterpret_cast<const char*>(value.data()), value.size()));
      return {};
    }
    case rpc::Op::kGet: {
      ByteReader r(req.payload);
      const auto region = r.get<uint32_t>();
      const std::string key = r.get_string();
      const auto v = primary_for(region, key)->get(key);
      ByteWriter w;
      w.put<uint8_t>(v ? 1 : 0);
      if (v) w.put_string(*v);
      return w.take();
    }
    case rpc::Op::kDelete: {
      ByteReader r(req.payload);
      const auto region = r.get<uint32_t>();
      const std::string key = r.get_string();
      primary_for(region, key)->del(key);
      return {};
    }
    case rpc::Op::kScan: {
      ByteReader r(req.payload);
      const auto region = r.get<uint32_t>();
      std::string start = r.get_string();
      const auto count = r.get<uint32_t>();
      RegionEntry entry;
      std::shared_ptr<PrimaryRegion> p;
      {
        std::lock_guard lock(mu_);
        auto it = regions_.find(region);
        if (it == regions_.end() || !it->second.primary) {
          raise(ErrorCode::kRedirect, fmt::format("server {} is not primary of region {}; map version {}",
                                                  config_.id, region, map_version_));
        }
        entry = it->second.entry;
        p = it->second.primary;
      }
      start = std::max(start, entry.start_key);
      KvPairs pairs = p->scan(start, count);
      if (!entry.end_key.empty()) {
        std::erase_if(pairs, [&](const auto& kv) { return kv.first >= entry.end_key; });
      }
      return encode_pairs(pairs);
    }
    case rpc::Op::kOpenRegion:
      open_region(OpenRegionRequest::decode(req.payload));
      return {};
    case rpc::Op::kPromote:
      promote(OpenRegionRequest::decode(req.payload));
      return {};
    case rpc::Op::kCloseRegion:
      close_region(ByteReader(req.payload).get<uint32_t>());
      return {};
    case rpc::Op::kFlushRegion:
      flush_region(ByteReader(req.payload).get<uint32_t>());
      return {};
    case rpc::Op::kRegionStats: {
      ByteWriter w;
      w.put_string(region_stats(ByteReader(req.payload).get<uint32_t>()).dump());
      return w.take();
    }
    case rpc::Op::kServerStats: {
      ByteWriter w;
      w.put_string(stats().dump());
      return w.take();
    }
    default:
      break;
  }
  if (replication::is_replication_op(req.op)) {
    const uint32_t region = replication::payload_region(req.payload);
    auto b = backup(region);
    if (!b) raise(ErrorCode::kInvalidArgument, fmt::format("server {} is not a backup of region {}", config_.id, region));
    return b->handle(req);
  }
  raise(ErrorCode::kProtocol, fmt::format("server cannot handle {}", rpc::op_name(req.op)));
}

std::shared_ptr<rpc::RpcClient> RegionServer::peer(const Peer& p) {
  std::lock_guard lock(peers_mu_);
  auto& c = peers_[p.id];
  if (!c || c->closed() || c->address() != p.address) {
    c = std::make_shared<rpc::RpcClient>(nic_, p.address, config_.peer);
  }
  return c;
}

void RegionServer::open_region(const OpenRegionRequest& req) {
  note_version(req.map_version);
  const uint32_t id = req.entry.id;
  if (req.role == Role::kBackup) {
    auto fresh = std::make_shared<BackupRegion>(id, *device_, req.mode, config_.engine);
    std::shared_ptr<BackupRegion> old;
    {
      std::lock_guard lock(mu_);
      Served& s = regions_[id];
      if (s.primary) raise(ErrorCode::kInvalidArgument, fmt::format("server {} is primary of region {}", config_.id, id));
      old = std::move(s.backup);
      s.backup = std::move(fresh);
      s.entry = req.entry;
    }
    spdlog::info("server {}: region {} opened as backup ({})", config_.id, id, replication::mode_name(req.mode));
    return;
  }
  std::shared_ptr<PrimaryRegion> p;
  {
    std::lock_guard lock(mu_);
    Served& s = regions_[id];
    if (s.backup) raise(ErrorCode::kInvalidArgument, fmt::format("server {} is a backup of region {}", config_.id, id));
    if (!s.primary) {
      s.primary = std::make_shared<PrimaryRegion>(id, *device_, req.mode, config_.engine);
      spdlog::info("server {}: region {} opened as primary ({})", config_.id, id, replication::mode_name(req.mode));
    }
    s.entry = req.entry;
    p = s.primary;
  }
  reconcile(p, req);
}

void RegionServer::promote(const OpenRegionRequest& req) {
  note_version(req.map_version);
  const uint32_t id = req.entry.id;
  std::shared_ptr<BackupRegion> b;
  {
    std::lock_guard lock(mu_);
    auto it = regions_.find(id);
    if (it != regions_.end() && it->second.primary) {
      it->second.entry = req.entry;
      b = nullptr;
    } else if (it == regions_.end() || !it->second.backup) {
      raise(ErrorCode::kInvalidArgument, fmt::format("server {} holds no replica of region {}", config_.id, id));
    } else {
      b = it->second.backup;
    }
  }
  std::shared_ptr<PrimaryRegion> p;
  if (b) {
    BackupRegion::Promotion promo = b->promote();
    p = std::make_shared<PrimaryRegion>(id, b->mode(), std::move(promo.engine));
    std::lock_guard lock(mu_);
    Served& s = regions_[id];
    s.backup.reset();
    s.primary = p;
    s.entry = req.entry;
  } else {
    p = primary(id);
  }
  reconcile(p, req);
}

void RegionServer::reconcile(const std::shared_ptr<PrimaryRegion>& region, const OpenRegionRequest& req) {
  const std::vector<uint32_t> current = region->backups();
  const std::vector<uint32_t>& desired = req.entry.backups;
  for (uint32_t s : current) {
    if (std::find(desired.begin(), desired.end(), s) == desired.end()) region->remove_backup(s);
  }
  for (uint32_t s : desired) {
    if (std::find(current.begin(), current.end(), s) != current.end()) continue;
    auto it = std::find_if(req.peers.begin(), req.peers.end(), [&](const Peer& p) { return p.id == s; });
    if (it == req.peers.end()) raise(ErrorCode::kProtocol, fmt::format("no address for backup server {}", s));
    try {
      region->add_backup(s, peer(*it));
    } catch (const Error& e) {
      raise(ErrorCode::kServerUnreachable, fmt::format("adding backup {} to region {}: {}", s, region->region(), e.what()));
    }
  }
}

void RegionServer::close_region(uint32_t region) {
  Served gone;
  {
    std::lock_guard lock(mu_);
    auto it = regions_.find(region);
    if (it == regions_.end()) return;
    gone = std::move(it->second);
    regions_.erase(it);
  }
  spdlog::info("server {}: region {} closed", config_.id, region);
}

void RegionServer::flush_region(uint32_t region) {
  std::vector<std::shared_ptr<PrimaryRegion>> targets;
  {
    std::lock_guard lock(mu_);
    for (const auto& [id, s] : regions_) {
      if (s.primary && (region == kAllRegions || region == id)) targets.push_back(s.primary);
    }
  }
  for (auto& p : targets) p->flush();
}

namespace {

nlohmann::json engine_json(const lsm::EngineStats& es) {
  return {{"compactions", es.compactions},
          {"l0_flushes", es.l0_flushes},
          {"l0_entries", es.l0_entries},
          {"l0_peak_entries", es.l0_peak_entries},
          {"ingested_records", es.ingested_records},
          {"installed_levels", es.installed_levels},
          {"level_entries", es.level_entries}};
}

}  // namespace

nlohmann::json RegionServer::region_stats(uint32_t region) const {
  Served s;
  {
    std::lock_guard lock(mu_);
    auto it = regions_.find(region);
    if (it == regions_.end()) raise(ErrorCode::kInvalidArgument, fmt::format("region {} is not open here", region));
    s = it->second;
  }
  nlohmann::json j{{"region", region}};
  if (s.primary) {
    const auto ps = s.primary->stats();
    j["role"] = "primary";
    j["mode"] = replication::mode_name(s.primary->mode());
    j["engine"] = engine_json(s.primary->engine().stats());
    j["backups"] = s.primary->backups();
    j["failed_backups"] = s.primary->failed_backups();
    j["replication"] = {{"writes", ps.writes},
                        {"replicated_records", ps.replicated_records},
                        {"replicated_bytes", ps.replicated_bytes},
                        {"flushes_sent", ps.flushes_sent},
                        {"index_transfers", ps.index_transfers},
                        {"shipped_segments", ps.shipped_segments},
                        {"shipped_bytes", ps.shipped_bytes},
                        {"backup_failures", ps.backup_failures}};
  } else if (s.backup) {
    const auto bs = s.backup->stats();
    j["role"] = "backup";
    j["mode"] = replication::mode_name(s.backup->mode());
    j["engine"] = engine_json(s.backup->engine().stats());
    j["replication"] = {{"flushed_segments", bs.flushed_segments},
                        {"flushed_bytes", bs.flushed_bytes},
                        {"shipped_segments", bs.shipped_segments},
                        {"installed_levels", bs.installed_levels},
                        {"aborted_transfers", bs.aborted_transfers},
                        {"compactions", bs.compactions},
                        {"l0_peak_entries", bs.l0_peak_entries},
                        {"ingested_records", bs.ingested_records}};
  }
  return j;
}

nlohmann::json RegionServer::stats() const {
  std::vector<uint32_t> ids;
  uint64_t version;
  {
    std::lock_guard lock(mu_);
    for (const auto& [id, s] : regions_) ids.push_back(id);
    version = map_version_;
  }
  nlohmann::json regions = nlohmann::json::array();
  uint64_t backup_compactions = 0, backup_l0_peak = 0, primary_compactions = 0;
  for (uint32_t id : ids) {
    nlohmann::json r;
    try {
      r = region_stats(id);
    } catch (const Error&) {
      continue;
    }
    if (r.value("role", "") == "backup") {
      backup_compactions += r["engine"]["compactions"].get<uint64_t>();
      backup_l0_peak += r["engine"]["l0_peak_entries"].get<uint64_t>();
    } else if (r.value("role", "") == "primary") {
      primary_compactions += r["engine"]["compactions"].get<uint64_t>();
    }
    regions.push_back(std::move(r));
  }
  const DeviceStats ds = device_->stats();
  const transport::TrafficStats ns = nic_.stats();
  nlohmann::json j{{"id", config_.id},
                   {"address", address()},
                   {"map_version", version},
                   {"device",
                    {{"bytes_read", ds.bytes_read},
                     {"bytes_written", ds.bytes_written},
                     {"allocated_segments", device_->allocated_segment_count()}}},
                   {"nic", {{"tx_bytes", ns.tx_bytes}, {"rx_bytes", ns.rx_bytes}}},
                   {"primary_compactions", primary_compactions},
                   {"backup_compactions", backup_compactions},
                   {"backup_l0_peak_entries", backup_l0_peak},
                   {"regions", regions}};
  if (rpc_) {
    const auto rs = rpc_->stats();
    j["rpc"] = {{"requests", rs.requests}, {"replies", rs.replies}, {"resets", rs.resets}, {"errors", rs.errors}};
  }
  return j;
}

}  // namespace replkv::cluster
