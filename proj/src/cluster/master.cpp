#include "replkv/cluster/master.hpp"

#include <algorithm>
#include <future>
#include <set>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace replkv::cluster {

namespace {

std::string to_hex(ByteView b) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(b.size() * 2, '0');
  for (size_t i = 0; i < b.size(); ++i) {
    out[2 * i] = kDigits[b[i] >> 4];
    out[2 * i + 1] = kDigits[b[i] & 15];
  }
  return out;
}

Bytes from_hex(std::string_view s) {
  if (s.size() % 2) raise(ErrorCode::kProtocol, "odd-length hex string");
  auto nibble = [](char c) -> uint8_t {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    raise(ErrorCode::kProtocol, "bad hex digit");
  };
  Bytes out(s.size() / 2);
  for (size_t i = 0; i < out.size(); ++i) out[i] = (nibble(s[2 * i]) << 4) | nibble(s[2 * i + 1]);
  return out;
}

bool has(const std::vector<uint32_t>& v, uint32_t x) { return std::find(v.begin(), v.end(), x) != v.end(); }

}  // namespace

void store_region_map(CoordinationClient& coord, const RegionMap& map) {
  coord.set(kRegionMapPath, to_hex(map.encode()));
}

std::optional<RegionMap> load_region_map(CoordinationClient& coord) {
  const auto hex = coord.get(kRegionMapPath);
  if (!hex) return std::nullopt;
  return RegionMap::decode(from_hex(*hex));
}

std::map<uint32_t, std::string> live_servers(CoordinationClient& coord) {
  std::map<uint32_t, std::string> out;
  for (const std::string& name : coord.children(kServersPath)) {
    uint32_t id;
    try {
      id = static_cast<uint32_t>(std::stoul(name));
    } catch (const std::exception&) {
      continue;
    }
    if (auto addr = coord.get(fmt::format("{}/{}", kServersPath, name))) out[id] = *addr;
  }
  return out;
}

void MasterEventLog::add(MasterEvent e) {
  std::lock_guard lock(mu_);
  events_.push_back(std::move(e));
}

std::vector<MasterEvent> MasterEventLog::events() const {
  std::lock_guard lock(mu_);
  return events_;
}

Master::Master(std::shared_ptr<CoordinationClient> coord, transport::Nic& nic, MasterOptions options, std::string id,
               uint64_t epoch, std::shared_ptr<MasterEventLog> log)
    : coord_(std::move(coord)),
      nic_(nic),
      options_(std::move(options)),
      id_(std::move(id)),
      epoch_(epoch),
      log_(std::move(log)) {}

RegionMap Master::map() const {
  std::lock_guard lock(mu_);
  return map_;
}

size_t Master::desired_backups() const {
  const size_t others = options_.servers.empty() ? 0 : options_.servers.size() - 1;
  return std::min({options_.backups_per_region, kMaxBackups, others});
}

void Master::record(const std::string& action, int64_t region, uint64_t version) {
  spdlog::info("master {} (epoch {}): {}{}", id_, epoch_, action,
               region >= 0 ? fmt::format(" region {}", region) : std::string());
  if (log_) log_->add({epoch_, id_, action, region, version});
}

std::shared_ptr<rpc::RpcClient> Master::client(uint32_t server, const std::map<uint32_t, std::string>& live) {
  auto it = live.find(server);
  if (it == live.end()) raise(ErrorCode::kServerUnreachable, fmt::format("server {} is not registered", server));
  std::lock_guard lock(clients_mu_);
  auto& c = clients_[server];
  if (!c || c->closed() || c->address() != it->second) {
    try {
      c = std::make_shared<rpc::RpcClient>(nic_, it->second, options_.client);
    } catch (const Error& e) {
      c.reset();
      raise(ErrorCode::kServerUnreachable, fmt::format("server {}: {}", server, e.what()));
    }
  }
  return c;
}

void Master::send_open(uint32_t server, const RegionEntry& e, Role role, uint64_t version,
                       const std::map<uint32_t, std::string>& live, rpc::Op op) {
  OpenRegionRequest req;
  req.entry = e;
  req.role = role;
  req.mode = options_.mode;
  req.map_version = version;
  for (uint32_t m : e.members()) {
    if (m == server) continue;
    if (auto it = live.find(m); it != live.end()) req.peers.push_back({m, it->second});
  }
  auto c = client(server, live);
  try {
    c->call(op, req.encode());
  } catch (const Error& e2) {
    if (e2.code() == ErrorCode::kConnectionClosed || e2.code() == ErrorCode::kTimeout ||
        e2.code() == ErrorCode::kUnreachable) {
      raise(ErrorCode::kServerUnreachable, fmt::format("server {}: {}", server, e2.what()));
    }
    throw;
  }
}

void Master::publish(RegionMap& map) {
  if (still_leader && !still_leader()) raise(ErrorCode::kCoordinatorUnavailable, "no longer the master");
  map.set_version(map.version() + 1);
  store_region_map(*coord_, map);
  {
    std::lock_guard lock(mu_);
    map_ = map;
  }
  record(fmt::format("published map version {}", map.version()), -1, map.version());
}

RegionMap Master::bootstrap() {
  if (auto stored = load_region_map(*coord_)) {
    std::lock_guard lock(mu_);
    map_ = *stored;
    spdlog::info("master {}: adopted region map version {}", id_, map_.version());
    return map_;
  }
  std::vector<uint32_t> servers = options_.servers;
  std::sort(servers.begin(), servers.end());
  const auto deadline = std::chrono::steady_clock::now() + options_.bootstrap_wait;
  std::map<uint32_t, std::string> live = live_servers(*coord_);
  while (std::chrono::steady_clock::now() < deadline &&
         !std::all_of(servers.begin(), servers.end(), [&](uint32_t s) { return live.count(s); })) {
    std::this_thread::sleep_for(Millis(10));
    live = live_servers(*coord_);
  }
  RegionMap map = make_region_map(options_.regions, servers, desired_backups(), options_.key_prefix);
  map.set_version(0);
  const uint64_t version = 1;
  record("bootstrap", -1, version);

  std::vector<std::future<RegionEntry>> work;
  for (const RegionEntry& e0 : map.entries()) {
    work.push_back(std::async(std::launch::async, [this, e0, &live, version] {
      RegionEntry e = e0;
      std::vector<uint32_t> opened;
      for (uint32_t b : e.backups) {
        try {
          send_open(b, e, Role::kBackup, version, live);
          opened.push_back(b);
        } catch (const Error& err) {
          spdlog::warn("bootstrap: region {} backup {}: {}", e.id, b, err.what());
        }
      }
      const size_t wanted = e.backups.size();
      e.backups = opened;
      bool primary_ok = false;
      try {
        send_open(e.primary, e, Role::kPrimary, version, live);
        primary_ok = true;
      } catch (const Error& err) {
        spdlog::warn("bootstrap: region {} primary {}: {}", e.id, e.primary, err.what());
      }
      if (!primary_ok || e.backups.size() < wanted) e.flags |= region_flags::kDegraded;
      return e;
    }));
  }
  for (size_t i = 0; i < work.size(); ++i) {
    map.entries()[i] = work[i].get();
    if (map.entries()[i].degraded()) record("flagged degraded", map.entries()[i].id, version);
  }
  publish(map);
  return map;
}

Master::Outcome Master::repair_members(RegionEntry e, const std::map<uint32_t, std::string>& live,
                                       uint64_t version) {
  Outcome out;
  std::vector<uint32_t> alive;
  for (uint32_t b : e.backups) {
    if (live.count(b)) alive.push_back(b);
  }
  if (!live.count(e.primary)) {
    if (alive.empty()) {
      e.flags |= region_flags::kLost | region_flags::kDegraded;
      spdlog::error("region {}: {}", e.id,
                    Error(ErrorCode::kNoBackupAlive, "primary failed with no live backup; region lost").what());
      record("region lost", e.id, version);
      out.entry = e;
      out.changed = true;
      return out;
    }
    const uint32_t np = *std::min_element(alive.begin(), alive.end());
    RegionEntry ne = e;
    ne.primary = np;
    ne.backups.clear();
    send_open(np, ne, Role::kPrimary, version, live, rpc::Op::kPromote);
    record(fmt::format("promoted server {} (was {})", np, e.primary), e.id, version);
    for (uint32_t s : alive) {
      if (s == np) continue;
      try {
        client(s, live)->call(rpc::Op::kCloseRegion, encode_region(e.id));
      } catch (const Error& err) {
        spdlog::warn("region {}: closing stale replica on {}: {}", e.id, s, err.what());
      }
    }
    e = ne;
    out.promoted = 1;
    out.changed = true;
  } else if (alive.size() < e.backups.size()) {
    RegionEntry ne = e;
    ne.backups = alive;
    send_open(e.primary, ne, Role::kPrimary, version, live);
    out.removed = e.backups.size() - alive.size();
    record(fmt::format("removed {} failed backup(s)", out.removed), e.id, version);
    e = ne;
    out.changed = true;
  }
  if (e.backups.size() < desired_backups()) e.flags |= region_flags::kDegraded;
  out.entry = e;
  return out;
}

Master::Outcome Master::add_backups(RegionEntry e, const std::map<uint32_t, std::string>& live, uint64_t version) {
  Outcome out;
  const size_t want = desired_backups();
  for (const auto& [cand, addr] : live) {
    if (e.backups.size() >= want) break;
    if (has(e.members(), cand)) continue;
    try {
      send_open(cand, e, Role::kBackup, version, live);
      RegionEntry ne = e;
      ne.backups.push_back(cand);
      send_open(e.primary, ne, Role::kPrimary, version, live);
      e = ne;
      ++out.added;
      record(fmt::format("server {} joined as backup", cand), e.id, version);
    } catch (const Error& err) {
      spdlog::warn("region {}: adding backup {} failed: {}", e.id, cand, err.what());
    }
  }
  const uint8_t before = e.flags;
  if (e.backups.size() >= want) {
    e.flags &= ~region_flags::kDegraded;
  } else {
    e.flags |= region_flags::kDegraded;
  }
  out.changed = out.added > 0 || before != e.flags;
  out.entry = e;
  return out;
}

RecoveryReport Master::check_failures() {
  RecoveryReport report;
  RegionMap map = this->map();
  const auto live = live_servers(*coord_);
  const uint64_t next = map.version() + 1;

  // Phase 1: promotions and removal of failed backups, so every region has a
  // serving primary as soon as possible.
  std::vector<std::pair<size_t, std::future<Outcome>>> work;
  for (size_t i = 0; i < map.size(); ++i) {
    const RegionEntry& e = map.entries()[i];
    if (e.lost()) continue;
    bool broken = !live.count(e.primary);
    for (uint32_t b : e.backups) broken = broken || !live.count(b);
    if (!broken) continue;
    work.emplace_back(i, std::async(std::launch::async, [this, e, &live, next] { return repair_members(e, live, next); }));
  }
  bool changed = false;
  for (auto& [i, f] : work) {
    try {
      Outcome o = f.get();
      if (!o.changed) continue;
      map.entries()[i] = o.entry;
      report.promoted += o.promoted;
      report.backups_removed += o.removed;
      changed = true;
    } catch (const Error& err) {
      spdlog::warn("region {}: repair failed, will retry: {}", map.entries()[i].id, err.what());
    }
  }
  if (changed) {
    publish(map);
    report.map_changed = true;
  }

  // Phase 2: bring groups back to full size from servers outside them.
  const uint64_t next2 = map.version() + 1;
  work.clear();
  changed = false;
  for (size_t i = 0; i < map.size(); ++i) {
    const RegionEntry& e = map.entries()[i];
    if (e.lost() || !live.count(e.primary) || e.backups.size() >= desired_backups()) continue;
    const bool spare = std::any_of(live.begin(), live.end(), [&](const auto& kv) { return !has(e.members(), kv.first); });
    if (!spare) {
      if (!e.degraded()) {
        map.entries()[i].flags |= region_flags::kDegraded;
        spdlog::warn("region {}: {}", e.id, Error(ErrorCode::kNoSpareServer, "no server left to host a backup").what());
        changed = true;
      }
      continue;
    }
    work.emplace_back(i, std::async(std::launch::async, [this, e, &live, next2] { return add_backups(e, live, next2); }));
  }
  for (auto& [i, f] : work) {
    try {
      Outcome o = f.get();
      if (!o.changed) continue;
      map.entries()[i] = o.entry;
      report.backups_added += o.added;
      changed = true;
    } catch (const Error& err) {
      spdlog::warn("region {}: adding backups failed, will retry: {}", map.entries()[i].id, err.what());
    }
  }
  if (changed) {
    publish(map);
    report.map_changed = true;
  }
  for (const RegionEntry& e : map.entries()) {
    report.degraded += e.degraded() ? 1 : 0;
    report.lost += e.lost() ? 1 : 0;
  }
  return report;
}

// --- MasterRunner -----------------------------------------------------------------

MasterRunner::MasterRunner(std::shared_ptr<CoordinationClient> coord, SessionId session, transport::Nic& nic,
                           MasterOptions options, std::string id, Millis poll, std::shared_ptr<MasterEventLog> log)
    : coord_(coord),
      nic_(nic),
      options_(std::move(options)),
      id_(std::move(id)),
      poll_(poll),
      log_(std::move(log)),
      election_(std::move(coord), session, kElectionRoot, id_) {}

MasterRunner::~MasterRunner() { stop(); }

void MasterRunner::start() {
  if (thread_.joinable()) return;
  stopping_ = false;
  thread_ = std::thread([this] { loop(); });
}

void MasterRunner::stop() {
  stopping_ = true;
  if (thread_.joinable()) thread_.join();
  leader_ = false;
}

void MasterRunner::loop() {
  while (!stopping_) {
    try {
      if (election_.check()) {
        if (!master_ || epoch_.load() != election_.epoch()) {
          epoch_ = election_.epoch();
          if (log_) log_->add({epoch_, id_, "elected", -1, 0});
          spdlog::info("{} elected master for epoch {}", id_, epoch_.load());
          master_ = std::make_unique<Master>(coord_, nic_, options_, id_, epoch_, log_);
          master_->still_leader = [this] { return election_.check(); };
          leader_ = true;
          try {
            master_->bootstrap();
          } catch (...) {
            master_.reset();
            throw;
          }
        }
        master_->check_failures();
        ++passes_;
      } else {
        leader_ = false;
        master_.reset();
      }
    } catch (const Error& e) {
      spdlog::debug("master loop {}: {}", id_, e.what());
    }
    for (Millis slept{0}; slept < poll_ && !stopping_; slept += Millis(5)) std::this_thread::sleep_for(Millis(5));
  }
}

}  // namespace replkv::cluster
