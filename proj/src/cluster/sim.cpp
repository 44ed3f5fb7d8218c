#include "replkv/cluster/sim.hpp"

#include <thread>

#include <fmt/format.h>

namespace replkv::cluster {

SimCluster::SimCluster(SimOptions options)
    : options_(std::move(options)),
      fabric_(transport::InProcFabric::create(options_.fabric)),
      coord_(std::make_shared<Coordinator>(CoordinatorOptions{options_.session_timeout, true})),
      events_(std::make_shared<MasterEventLog>()) {
  if (options_.servers == 0) raise(ErrorCode::kConfig, "a cluster needs at least one server");
  for (uint32_t id = 1; id <= options_.servers; ++id) {
    Node& n = nodes_[id];
    n.nic = transport::make_inproc_nic(fabric_, fmt::format("server-{}", id));
    ServerConfig sc;
    sc.id = id;
    sc.address = fmt::format("server-{}", id);
    sc.device_capacity = options_.device_capacity;
    sc.segment_size = options_.segment_size;
    sc.engine = options_.engine;
    sc.rpc = options_.rpc;
    sc.peer = options_.client_rpc;
    sc.heartbeat = options_.heartbeat;
    n.server = std::make_unique<RegionServer>(sc, *n.nic, coord_);
  }
  client_nic_ = transport::make_inproc_nic(fabric_, "client");
  KvClientOptions co = options_.client;
  co.rpc = options_.client_rpc;
  options_.client = co;
  client_ = std::make_unique<KvClient>(coord_, *client_nic_, co);
}

SimCluster::~SimCluster() {
  client_.reset();
  for (auto& [id, n] : nodes_) {
    if (n.runner) n.runner->stop();
  }
  for (auto& [id, n] : nodes_) {
    if (n.alive) n.server->stop();
  }
  nodes_.clear();
}

void SimCluster::start(Millis timeout) {
  MasterOptions mo;
  for (const auto& [id, n] : nodes_) mo.servers.push_back(id);
  mo.regions = options_.regions;
  mo.backups_per_region = options_.mode == replication::Mode::kNone ? 0 : options_.backups_per_region;
  mo.mode = options_.mode;
  mo.key_prefix = options_.key_prefix;
  for (auto& [id, n] : nodes_) {
    n.server->start();
    n.alive = true;
  }
  for (auto& [id, n] : nodes_) {
    n.runner = std::make_unique<MasterRunner>(coord_, n.server->session(), *n.nic, mo, fmt::format("server-{}", id),
                                              options_.master_poll, events_);
    n.runner->start();
  }
  if (!wait_for_map([](const RegionMap& m) { return m.version() > 0; }, timeout)) {
    raise(ErrorCode::kTimeout, "no master published a region map");
  }
  client_->refresh();
}

std::vector<uint32_t> SimCluster::server_ids() const {
  std::vector<uint32_t> out;
  for (const auto& [id, n] : nodes_) out.push_back(id);
  return out;
}

RegionServer& SimCluster::server(uint32_t id) {
  auto it = nodes_.find(id);
  if (it == nodes_.end()) raise(ErrorCode::kInvalidArgument, fmt::format("no server {}", id));
  return *it->second.server;
}

bool SimCluster::alive(uint32_t id) const {
  auto it = nodes_.find(id);
  return it != nodes_.end() && it->second.alive;
}

std::unique_ptr<KvClient> SimCluster::new_client() {
  return std::make_unique<KvClient>(coord_, *client_nic_, options_.client);
}

void SimCluster::kill(uint32_t id) {
  Node& n = nodes_.at(id);
  if (!n.alive) return;
  n.alive = false;
  n.server->crash();
  if (n.runner) n.runner->stop();
}

void SimCluster::stop(uint32_t id) {
  Node& n = nodes_.at(id);
  if (!n.alive) return;
  n.alive = false;
  if (n.runner) n.runner->stop();
  n.server->stop();
}

RegionMap SimCluster::map() const {
  auto m = load_region_map(*coord_);
  return m ? *m : RegionMap{};
}

bool SimCluster::wait_for_map(const std::function<bool(const RegionMap&)>& pred, Millis timeout) {
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  for (;;) {
    if (auto m = load_region_map(*coord_); m && pred(*m)) return true;
    if (std::chrono::steady_clock::now() >= deadline) return false;
    std::this_thread::sleep_for(Millis(5));
  }
}

std::optional<uint32_t> SimCluster::master() const {
  for (const auto& [id, n] : nodes_) {
    if (n.alive && n.runner && n.runner->leader()) return id;
  }
  return std::nullopt;
}

void SimCluster::flush_all() {
  for (auto& [id, n] : nodes_) {
    if (!n.alive) continue;
    for (uint32_t r : n.server->primary_regions()) {
      if (auto p = n.server->primary(r)) p->flush();
    }
  }
}

ClusterTotals SimCluster::totals() const {
  ClusterTotals t;
  for (const auto& [id, n] : nodes_) {
    const DeviceStats d = n.server->device().stats();
    t.device.bytes_read += d.bytes_read;
    t.device.bytes_written += d.bytes_written;
    const transport::TrafficStats s = n.nic->stats();
    t.nic.tx_bytes += s.tx_bytes;
    t.nic.rx_bytes += s.rx_bytes;
    t.nic.tx_frames += s.tx_frames;
    t.nic.rx_frames += s.rx_frames;
  }
  return t;
}

}  // namespace replkv::cluster
