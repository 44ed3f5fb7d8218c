// replkv: coordinator, region server, master, topology, workload and bench
// commands. See README.md for the exit-code contract.

#include <pthread.h>
#include <signal.h>

#include <chrono>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "replkv/bench/experiment.hpp"
#include "replkv/cli/config.hpp"
#include "replkv/cluster/client.hpp"
#include "replkv/cluster/coordinator_rpc.hpp"
#include "replkv/cluster/master.hpp"
#include "replkv/cluster/server.hpp"
#include "replkv/transport.hpp"

extern char** environ;

namespace {

using namespace replkv;

enum Exit : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kCoordinatorDown = 3,
  kVerifyFailed = 4,
  kAddressInUse = 5,
};

int exit_code_for(const Error& e) {
  switch (e.code()) {
    case ErrorCode::kConfig:
    case ErrorCode::kInvalidArgument:
      return kUsage;
    case ErrorCode::kCoordinatorUnavailable:
      return kCoordinatorDown;
    case ErrorCode::kRefused:
      return kAddressInUse;
    default:
      return kFailure;
  }
}

sigset_t shutdown_signals() {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGTERM);
  sigaddset(&set, SIGINT);
  return set;
}

// Must run before any thread starts, so that every thread inherits the mask.
void block_shutdown_signals() {
  const sigset_t set = shutdown_signals();
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
}

int wait_for_shutdown() {
  const sigset_t set = shutdown_signals();
  int sig = 0;
  sigwait(&set, &sig);
  spdlog::info("received {}, shutting down", sig == SIGTERM ? "SIGTERM" : "SIGINT");
  return sig;
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) raise(ErrorCode::kInvalidArgument, fmt::format("cannot write {}", path));
  out << content;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  size_t pos = 0;
  while (pos <= s.size()) {
    const size_t comma = s.find(',', pos);
    const std::string item = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (!item.empty()) out.push_back(item);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

int cmd_coordinator(const cli::ClusterConfig& cfg, const std::string& listen, const std::string& address_file) {
  auto nic = transport::make_socket_nic("coordinator");
  auto coord = std::make_shared<cluster::Coordinator>(cluster::CoordinatorOptions{cfg.session_timeout, true});
  cluster::CoordinatorServer server(*nic, listen.empty() ? cfg.coordinator : listen, coord, cfg.rpc);
  spdlog::info("coordinator listening at {}", server.address());
  if (!address_file.empty()) write_file(address_file, server.address());
  wait_for_shutdown();
  server.stop();
  return kOk;
}

std::shared_ptr<cluster::RemoteCoordinator> remote_coordinator(transport::Nic& nic, const cli::ClusterConfig& cfg,
                                                               const std::string& override_address) {
  return std::make_shared<cluster::RemoteCoordinator>(nic, override_address.empty() ? cfg.coordinator
                                                                                    : override_address);
}

int cmd_server(const cli::ClusterConfig& cfg, uint32_t id, bool run_master, const std::string& coordinator) {
  auto nic = transport::make_socket_nic(fmt::format("server-{}", id));
  auto coord = remote_coordinator(*nic, cfg, coordinator);
  cluster::RegionServer server(cfg.server_config(id), *nic, coord);
  server.start();
  std::unique_ptr<cluster::MasterRunner> runner;
  if (run_master) {
    runner = std::make_unique<cluster::MasterRunner>(coord, server.session(), *nic, cfg.master_options(),
                                                     fmt::format("server-{}", id), cfg.master_poll);
    runner->start();
  }
  wait_for_shutdown();
  if (runner) runner->stop();
  server.stop();
  return kOk;
}

int cmd_master(const cli::ClusterConfig& cfg, const std::string& name, const std::string& coordinator) {
  auto nic = transport::make_socket_nic(name);
  auto coord = remote_coordinator(*nic, cfg, coordinator);
  cluster::SessionKeeper keeper(coord, cfg.heartbeat);
  cluster::MasterRunner runner(coord, keeper.session(), *nic, cfg.master_options(), name, cfg.master_poll);
  runner.start();
  wait_for_shutdown();
  runner.stop();
  keeper.close();
  return kOk;
}

int cmd_topology(const cli::ClusterConfig& cfg, bool as_json, const std::string& coordinator) {
  auto nic = transport::make_socket_nic("topology");
  auto coord = remote_coordinator(*nic, cfg, coordinator);
  const auto live = cluster::live_servers(*coord);
  const auto map = cluster::load_region_map(*coord).value_or(cluster::RegionMap{});
  std::map<uint32_t, std::pair<size_t, size_t>> roles;
  for (const auto& e : map.entries()) {
    ++roles[e.primary].first;
    for (uint32_t b : e.backups) ++roles[b].second;
  }
  if (as_json) {
    nlohmann::json regions = nlohmann::json::array();
    for (const auto& e : map.entries()) {
      regions.push_back({{"id", e.id},
                         {"start", e.start_key},
                         {"end", e.end_key},
                         {"primary", e.primary},
                         {"backups", e.backups},
                         {"degraded", e.degraded()},
                         {"lost", e.lost()}});
    }
    nlohmann::json servers = nlohmann::json::array();
    for (const auto& [id, r] : roles) {
      servers.push_back({{"id", id}, {"primary", r.first}, {"backup", r.second}, {"alive", live.count(id) > 0}});
    }
    std::cout << nlohmann::json{{"version", map.version()}, {"regions", regions}, {"servers", servers}}.dump(2)
              << "\n";
    return kOk;
  }
  fmt::print("map version {}, {} regions, {} live servers\n", map.version(), map.size(), live.size());
  fmt::print("{:>6}  {:<24}  {:<24}  {:>7}  {:<12}  {}\n", "region", "start", "end", "primary", "backups", "health");
  for (const auto& e : map.entries()) {
    std::string backups;
    for (uint32_t b : e.backups) backups += (backups.empty() ? "" : ",") + std::to_string(b);
    const char* health = e.lost() ? "lost" : e.degraded() ? "degraded" : "ok";
    fmt::print("{:>6}  {:<24}  {:<24}  {:>7}  {:<12}  {}\n", e.id, e.start_key.empty() ? "-" : e.start_key,
               e.end_key.empty() ? "-" : e.end_key, e.primary, backups.empty() ? "-" : backups, health);
  }
  for (const auto& [id, r] : roles) {
    fmt::print("server {}: {} primary, {} backup{}\n", id, r.first, r.second, live.count(id) ? "" : " (down)");
  }
  return kOk;
}

struct WorkloadOpts {
  std::string workload = "loadA";
  std::string mix = "SD";
  uint64_t ops = 1000;
  uint64_t records = 0;
  uint64_t seed = 42;
  bool verify = false;
  int64_t wait_ms = 10000;
};

int cmd_workload(const cli::ClusterConfig& cfg, const WorkloadOpts& o, const std::string& coordinator) {
  auto nic = transport::make_socket_nic("client");
  auto coord = remote_coordinator(*nic, cfg, coordinator);
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(o.wait_ms);
  while (true) {
    try {
      if (cluster::load_region_map(*coord)) break;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kCoordinatorUnavailable) throw;
    }
    if (std::chrono::steady_clock::now() > deadline) raise(ErrorCode::kTimeout, "no region map was published");
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
  cluster::KvClient client(coord, *nic);
  const bench::Phase phase = bench::parse_phase(o.workload);
  const bench::SizeMix mix = bench::parse_size_mix(o.mix);
  bench::WorkloadSpec spec{phase, o.records ? o.records : o.ops, o.ops, 1};
  bench::OpGenerator gen(spec, mix, o.seed);
  std::map<uint64_t, std::string> written;
  uint64_t ops = 0, misses = 0, dataset = 0;
  const auto t0 = std::chrono::steady_clock::now();
  while (!gen.done()) {
    const bench::Op op = gen.next();
    const std::string key = bench::key_for(op.index);
    if (op.type == bench::OpType::kRead) {
      const auto v = client.get(key);
      if (!v) ++misses;
      dataset += key.size() + (v ? v->size() : 0);
    } else {
      std::string value = bench::value_for(op.index, op.kv_size, ops);
      client.put(key, value);
      dataset += key.size() + value.size();
      if (o.verify) written[op.index] = std::move(value);
    }
    ++ops;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  uint64_t mismatches = 0;
  for (const auto& [index, value] : written) {
    if (client.get(bench::key_for(index)) != value) ++mismatches;
  }
  nlohmann::json out{{"workload", bench::phase_name(phase)},
                     {"ops", ops},
                     {"misses", misses},
                     {"dataset_bytes", dataset},
                     {"seconds", secs},
                     {"throughput", secs > 0 ? ops / secs : 0.0},
                     {"verified", written.size()},
                     {"mismatches", mismatches},
                     {"retries", client.stats().retries}};
  std::cout << out.dump() << "\n";
  return mismatches == 0 ? kOk : kVerifyFailed;
}

struct BenchOpts {
  std::string config;
  std::string workload = "loadA";
  std::string dist = "SD";
  std::string mode = "send_index";
  uint32_t growth_factor = 4;
  uint64_t ops = 100000;
  uint64_t records = 0;
  uint64_t l0_keys = 1024;
  size_t regions = 32;
  size_t servers = 2;
  uint32_t threads = 1;
  uint64_t seed = 42;
  int64_t kill_at_op = -1;
  bool verify = false;
  bool flush = false;
  std::string out;
  std::string csv;
  std::string param;
  std::string values;
};

bench::ExperimentConfig experiment_config(const BenchOpts& o, const CLI::App& app) {
  bench::ExperimentConfig c;
  if (!o.config.empty()) {
    std::ifstream in(o.config);
    if (!in) raise(ErrorCode::kConfig, fmt::format("cannot open {}", o.config));
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) raise(ErrorCode::kConfig, fmt::format("{} is not valid JSON", o.config));
    c = bench::config_from_json(j);
  }
  auto given = [&](const char* name) { return app.count(name) > 0 || o.config.empty(); };
  if (given("--workload")) {
    c.phases.clear();
    for (const auto& p : split_list(o.workload)) c.phases.push_back(bench::parse_phase(p));
  }
  if (given("--dist")) c.mix = bench::parse_size_mix(o.dist);
  if (given("--mode")) c.mode = replication::parse_mode(o.mode);
  if (given("--growth-factor")) c.growth_factor = o.growth_factor;
  if (given("--ops")) {
    c.operations = o.ops;
    c.records = o.ops;
  }
  if (o.records > 0) c.records = o.records;
  if (given("--l0-keys")) c.l0_keys = o.l0_keys;
  if (given("--regions")) c.regions = o.regions;
  if (given("--servers")) c.servers = o.servers;
  if (given("--threads")) c.threads = o.threads;
  if (given("--seed")) c.seed = o.seed;
  if (o.kill_at_op >= 0) c.kill_at_op = static_cast<uint64_t>(o.kill_at_op);
  if (o.verify) c.verify = true;
  if (o.flush) c.flush_after_phase = true;
  c.validate();
  return c;
}

void emit_reports(const std::vector<bench::MetricsReport>& reports, const BenchOpts& o) {
  nlohmann::json all = nlohmann::json::array();
  for (const auto& r : reports) all.push_back(bench::to_json(r));
  const nlohmann::json doc = reports.size() == 1 ? all[0] : all;
  if (!o.out.empty()) write_file(o.out, doc.dump(2) + "\n");
  std::string csv = bench::csv_header() + "\n";
  for (const auto& r : reports) {
    for (const auto& row : bench::csv_rows(r)) csv += row + "\n";
  }
  if (!o.csv.empty()) write_file(o.csv, csv);
  std::cout << csv;
}

int cmd_bench(const BenchOpts& o, const CLI::App& app, bool sweep) {
  const bench::ExperimentConfig c = experiment_config(o, app);
  std::vector<bench::MetricsReport> reports;
  if (sweep) {
    reports = bench::sweep(c, o.param, split_list(o.values));
  } else {
    reports.push_back(bench::run_experiment(c));
  }
  emit_reports(reports, o);
  for (const auto& r : reports) {
    if (r.verify && r.verify->mismatches > 0) {
      spdlog::error("{} acknowledged writes did not read back", r.verify->mismatches);
      return kVerifyFailed;
    }
  }
  return kOk;
}

void add_bench_options(CLI::App* cmd, BenchOpts& o) {
  cmd->add_option("--config", o.config, "experiment JSON; flags given explicitly override it");
  cmd->add_option("--workload", o.workload, "phases, e.g. loadA or loadA,runC");
  cmd->add_option("--dist", o.dist, "KV size mix: S, M, L, SD, MD, LD or s-m-l");
  cmd->add_option("--mode", o.mode, "none, send_index or build_index");
  cmd->add_option("--growth-factor", o.growth_factor);
  cmd->add_option("--ops", o.ops, "records to load and ops per run phase");
  cmd->add_option("--records", o.records, "records to load, if different from --ops");
  cmd->add_option("--l0-keys", o.l0_keys, "L0 capacity per region in keys");
  cmd->add_option("--regions", o.regions);
  cmd->add_option("--servers", o.servers);
  cmd->add_option("--threads", o.threads, "client threads");
  cmd->add_option("--seed", o.seed);
  cmd->add_option("--kill-at-op", o.kill_at_op, "crash the first region's primary after this many ops");
  cmd->add_flag("--verify", o.verify, "read back every acknowledged write at the end");
  cmd->add_flag("--flush", o.flush, "flush L0 after each phase");
  cmd->add_option("--out", o.out, "JSON report path");
  cmd->add_option("--csv", o.csv, "CSV report path");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"replkv: replicated LSM key-value store"};
  app.require_subcommand(1);
  std::string log_format = "text", log_level = "info", config_path, coordinator;
  app.add_option("--log-format", log_format, "text or json")->check(CLI::IsMember({"text", "json"}));
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off");

  auto add_config = [&](CLI::App* cmd, bool required) {
    auto* opt = cmd->add_option("--config", config_path, "cluster configuration (JSON)");
    if (required) opt->required();
    cmd->add_option("--coordinator", coordinator, "coordinator address, overriding the config");
  };

  std::string listen, address_file;
  auto* coord_cmd = app.add_subcommand("coordinator", "run the coordination service");
  add_config(coord_cmd, true);
  coord_cmd->add_option("--listen", listen, "listen address, overriding the config");
  coord_cmd->add_option("--address-file", address_file, "write the bound address here");

  uint32_t server_id = 0;
  bool no_master = false;
  auto* server_cmd = app.add_subcommand("server", "run a region server");
  add_config(server_cmd, true);
  server_cmd->add_option("--id", server_id, "server id from the config")->required();
  server_cmd->add_flag("--no-master", no_master, "do not stand for master election");

  std::string master_name = "master";
  auto* master_cmd = app.add_subcommand("master", "run a standalone master candidate");
  add_config(master_cmd, true);
  master_cmd->add_option("--name", master_name, "candidate name");

  bool as_json = false;
  auto* topo_cmd = app.add_subcommand("topology", "print the region map");
  add_config(topo_cmd, true);
  topo_cmd->add_flag("--json", as_json);

  auto* check_cmd = app.add_subcommand("config-check", "validate a configuration and print it normalized");
  check_cmd->add_option("--config", config_path)->required();

  WorkloadOpts wo;
  auto* wl_cmd = app.add_subcommand("workload", "run a workload against a running cluster");
  add_config(wl_cmd, true);
  wl_cmd->add_option("--workload", wo.workload);
  wl_cmd->add_option("--dist", wo.mix);
  wl_cmd->add_option("--ops", wo.ops);
  wl_cmd->add_option("--records", wo.records, "records loaded earlier (run phases)");
  wl_cmd->add_option("--seed", wo.seed);
  wl_cmd->add_flag("--verify", wo.verify);
  wl_cmd->add_option("--wait-ms", wo.wait_ms, "how long to wait for a region map");

  BenchOpts bo;
  auto* bench_cmd = app.add_subcommand("bench", "in-process benchmark experiments");
  bench_cmd->require_subcommand(1);
  auto* run_cmd = bench_cmd->add_subcommand("run", "run one experiment");
  add_bench_options(run_cmd, bo);
  auto* sweep_cmd = bench_cmd->add_subcommand("sweep", "run one experiment per parameter value");
  add_bench_options(sweep_cmd, bo);
  sweep_cmd->add_option("--param", bo.param, "mode, growth_factor, small_pct, l0_keys, mix, threads, records, seed")
      ->required();
  sweep_cmd->add_option("--values", bo.values, "comma-separated values")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  const bool daemon = coord_cmd->parsed() || server_cmd->parsed() || master_cmd->parsed();
  if (daemon) block_shutdown_signals();

  try {
    cli::setup_logging(log_format, log_level);
    if (bench_cmd->parsed()) {
      return cmd_bench(bo, run_cmd->parsed() ? *run_cmd : *sweep_cmd, sweep_cmd->parsed());
    }
    const cli::ClusterConfig cfg = cli::load_cluster_config(config_path, environ);
    if (check_cmd->parsed()) {
      std::cout << cli::to_json(cfg).dump(2) << "\n";
      return kOk;
    }
    if (coord_cmd->parsed()) return cmd_coordinator(cfg, listen, address_file);
    if (server_cmd->parsed()) return cmd_server(cfg, server_id, !no_master, coordinator);
    if (master_cmd->parsed()) return cmd_master(cfg, master_name, coordinator);
    if (topo_cmd->parsed()) return cmd_topology(cfg, as_json, coordinator);
    if (wl_cmd->parsed()) return cmd_workload(cfg, wo, coordinator);
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return exit_code_for(e);
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kFailure;
  }
  return kUsage;
}
