#include "replkv/bench/experiment.hpp"

#include <atomic>
#include <chrono>
#include <mutex>
#include <thread>
#include <unordered_map>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "replkv/bench/metrics.hpp"
#include "replkv/cluster/sim.hpp"

#ifndef REPLKV_BUILD_ID
#define REPLKV_BUILD_ID "unknown"
#endif

namespace replkv::bench {

using Clock = std::chrono::steady_clock;

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& what) { raise(ErrorCode::kConfig, what); };
  if (servers == 0) fail("servers must be positive");
  if (regions == 0) fail("regions must be positive");
  if (growth_factor < 2) fail(fmt::format("growth factor {} is below 2", growth_factor));
  if (l0_keys < 2) fail("l0_keys must be at least 2");
  if (segment_size == 0 || (segment_size & (segment_size - 1)) != 0) fail("segment size must be a power of two");
  if (threads == 0) fail("threads must be positive");
  if (phases.empty()) fail("no phases");
  if (workers == 0 || spinners == 0) fail("workers and spinners must be positive");
  if (kill_at_op && servers < 2) fail("killing a server needs at least two");
  if (kill_server > servers) fail(fmt::format("no server {}", kill_server));
  mix.validate();
}

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json phases = nlohmann::json::array();
  for (Phase p : c.phases) phases.push_back(phase_name(p));
  nlohmann::json j{{"label", c.label},
                   {"servers", c.servers},
                   {"regions", c.regions},
                   {"mode", replication::mode_name(c.mode)},
                   {"growth_factor", c.growth_factor},
                   {"l0_keys", c.l0_keys},
                   {"segment_size", c.segment_size},
                   {"device_capacity", c.device_capacity},
                   {"mix", c.mix.name()},
                   {"phases", phases},
                   {"records", c.records},
                   {"operations", c.operations},
                   {"threads", c.threads},
                   {"seed", c.seed},
                   {"workers", c.workers},
                   {"spinners", c.spinners},
                   {"kill_at_op", c.kill_at_op ? nlohmann::json(*c.kill_at_op) : nlohmann::json(nullptr)},
                   {"kill_server", c.kill_server},
                   {"verify", c.verify},
                   {"flush_after_phase", c.flush_after_phase},
                   {"nominal_hz", c.nominal_hz}};
  return j;
}

ExperimentConfig config_from_json(const nlohmann::json& j, ExperimentConfig c) {
  if (!j.is_object()) raise(ErrorCode::kConfig, "experiment config must be an object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "label") c.label = v.get<std::string>();
      else if (key == "servers") c.servers = v.get<size_t>();
      else if (key == "regions") c.regions = v.get<size_t>();
      else if (key == "mode") c.mode = replication::parse_mode(v.get<std::string>());
      else if (key == "growth_factor") c.growth_factor = v.get<uint32_t>();
      else if (key == "l0_keys") c.l0_keys = v.get<uint64_t>();
      else if (key == "segment_size") c.segment_size = v.get<uint64_t>();
      else if (key == "device_capacity") c.device_capacity = v.get<uint64_t>();
      else if (key == "mix") c.mix = parse_size_mix(v.get<std::string>());
      else if (key == "phases") {
        c.phases.clear();
        for (const auto& p : v) c.phases.push_back(parse_phase(p.get<std::string>()));
      } else if (key == "records") c.records = v.get<uint64_t>();
      else if (key == "operations") c.operations = v.get<uint64_t>();
      else if (key == "threads") c.threads = v.get<uint32_t>();
      else if (key == "seed") c.seed = v.get<uint64_t>();
      else if (key == "workers") c.workers = v.get<size_t>();
      else if (key == "spinners") c.spinners = v.get<size_t>();
      else if (key == "kill_at_op") {
        c.kill_at_op = v.is_null() ? std::nullopt : std::optional<uint64_t>(v.get<uint64_t>());
      } else if (key == "kill_server") c.kill_server = v.get<uint32_t>();
      else if (key == "verify") c.verify = v.get<bool>();
      else if (key == "flush_after_phase") c.flush_after_phase = v.get<bool>();
      else if (key == "nominal_hz") c.nominal_hz = v.get<double>();
      else raise(ErrorCode::kConfig, fmt::format("unknown experiment key '{}'", key));
    } catch (const nlohmann::json::exception& e) {
      raise(ErrorCode::kConfig, fmt::format("experiment key '{}': {}", key, e.what()));
    } catch (const Error& e) {
      if (e.code() == ErrorCode::kConfig) throw;
      raise(ErrorCode::kConfig, fmt::format("experiment key '{}': {}", key, e.what()));
    }
  }
  c.validate();
  return c;
}

std::string fingerprint(const ExperimentConfig& c) {
  nlohmann::json j = to_json(c);
  j.erase("label");
  const std::string s = j.dump();
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return fmt::format("{:016x}", h);
}

std::string build_id() { return REPLKV_BUILD_ID; }

const PhaseReport& MetricsReport::phase(Phase p) const {
  for (const auto& r : phases) {
    if (r.phase == p) return r;
  }
  raise(ErrorCode::kInvalidArgument, fmt::format("report has no phase {}", phase_name(p)));
}

namespace {

struct Written {
  uint32_t kv_size;
  uint64_t version;
};

struct ThreadResult {
  LatencyHistogram latency;
  uint64_t ops = 0, reads = 0, writes = 0, misses = 0, failed = 0, dataset = 0, inserted = 0;
  std::unordered_map<uint64_t, Written> acked;
};

cluster::SimOptions sim_options(const ExperimentConfig& c) {
  cluster::SimOptions o;
  o.servers = c.servers;
  o.regions = c.regions;
  o.backups_per_region = c.mode == replication::Mode::kNone ? 0 : 1;
  o.mode = c.mode;
  o.engine.growth_factor = c.growth_factor;
  o.engine.l0_capacity_keys = c.l0_keys;
  o.segment_size = c.segment_size;
  o.device_capacity = c.device_capacity;
  o.rpc.workers = c.workers;
  o.rpc.spinners = c.spinners;
  return o;
}

LatencySummary summarize(const LatencyHistogram& h) {
  return {h.mean_us(),         h.percentile_us(0.50),   h.percentile_us(0.99),
          h.percentile_us(0.999), h.percentile_us(0.9999), h.max_us()};
}

}  // namespace

MetricsReport run_experiment(const ExperimentConfig& config, const InspectFn& inspect) {
  config.validate();
  MetricsReport report;
  report.config = config;
  report.fingerprint = fingerprint(config);
  report.build_id = build_id();
  const double hz = config.nominal_hz > 0 ? config.nominal_hz : nominal_hz();

  cluster::SimCluster cluster(sim_options(config));
  cluster.start();

  std::atomic<uint64_t> completed{0};
  std::mutex kill_mu;
  auto maybe_kill = [&](uint64_t done) {
    if (!config.kill_at_op || done != *config.kill_at_op) return;
    std::lock_guard lock(kill_mu);
    const cluster::RegionMap m = cluster.map();
    const uint32_t victim = config.kill_server != 0 ? config.kill_server : m.entries().at(0).primary;
    spdlog::info("bench: crashing server {} after {} ops", victim, done);
    cluster.kill(victim);
    report.failover = FailoverReport{victim, done, m.version(), 0};
  };

  std::vector<std::unordered_map<uint64_t, Written>> acked(config.threads);
  uint64_t records = config.records;
  uint32_t phase_ordinal = 0;
  for (Phase phase : config.phases) {
    ++phase_ordinal;
    WorkloadSpec spec{phase, phase == Phase::kLoadA ? config.records : records, config.operations, config.threads};
    std::vector<ThreadResult> results(config.threads);

    const cluster::ClusterTotals before = cluster.totals();
    const double cpu0 = process_cpu_seconds();
    const auto t0 = Clock::now();
    std::vector<std::thread> threads;
    for (uint32_t t = 0; t < config.threads; ++t) {
      threads.emplace_back([&, t] {
        ThreadResult& r = results[t];
        auto client = cluster.new_client();
        OpGenerator gen(spec, config.mix, config.seed + phase_ordinal * 7919, t);
        uint64_t n = 0;
        while (!gen.done()) {
          const Op op = gen.next();
          const std::string key = key_for(op.index);
          const uint64_t version = (uint64_t{phase_ordinal} << 40) | n++;
          const auto start = Clock::now();
          try {
            if (op.type == OpType::kRead) {
              ++r.reads;
              const auto v = client->get(key);
              r.dataset += key.size() + (v ? v->size() : 0);
              if (!v) ++r.misses;
            } else {
              const std::string value = value_for(op.index, op.kv_size, version);
              client->put(key, value);
              ++r.writes;
              if (op.type == OpType::kInsert) ++r.inserted;
              r.dataset += key.size() + value.size();
              if (config.verify) acked[t][op.index] = {op.kv_size, version};
            }
          } catch (const Error& e) {
            ++r.failed;
            spdlog::debug("bench: {} failed: {}", key, e.what());
          }
          r.latency.record_ns(
              std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - start).count());
          ++r.ops;
          maybe_kill(completed.fetch_add(1) + 1);
        }
      });
    }
    for (auto& th : threads) th.join();
    if (config.flush_after_phase) cluster.flush_all();
    const double seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    const double cpu = process_cpu_seconds() - cpu0;
    const cluster::ClusterTotals after = cluster.totals();

    PhaseReport pr;
    pr.phase = phase;
    LatencyHistogram merged;
    for (const auto& r : results) {
      merged.merge(r.latency);
      pr.ops += r.ops;
      pr.reads += r.reads;
      pr.writes += r.writes;
      pr.misses += r.misses;
      pr.failed_ops += r.failed;
      pr.dataset_bytes += r.dataset;
      if (phase == Phase::kRunD) records += r.inserted;
    }
    const DeviceStats dev = after.device - before.device;
    pr.device_read = dev.bytes_read;
    pr.device_written = dev.bytes_written;
    pr.net_bytes = (after.nic - before.nic).total();
    pr.seconds = seconds;
    pr.cpu_seconds = cpu;
    pr.throughput = seconds > 0 ? static_cast<double>(pr.ops) / seconds : 0;
    if (pr.ops > 0) pr.cycles_per_op = efficiency(cpu, hz, pr.ops);
    if (pr.dataset_bytes > 0) {
      pr.io_amp = io_amplification(dev.traffic(), pr.dataset_bytes);
      pr.net_amp = network_amplification(pr.net_bytes, pr.dataset_bytes);
    }
    pr.latency = summarize(merged);
    spdlog::info("bench: {} {} ops in {:.2f}s, io_amp {:.3f}, net_amp {:.3f}", phase_name(phase), pr.ops, seconds,
                 pr.io_amp, pr.net_amp);
    report.phases.push_back(pr);
  }

  if (report.failover) report.failover->map_version_after = cluster.map().version();

  if (config.verify) {
    VerifyReport v;
    cluster::KvClient& client = cluster.client();
    for (const auto& per_thread : acked) {
      for (const auto& [index, w] : per_thread) {
        const std::string key = key_for(index);
        ++v.checked;
        std::optional<std::string> got;
        try {
          got = client.get(key);
        } catch (const Error&) {
        }
        if (got != value_for(index, w.kv_size, w.version)) {
          ++v.mismatches;
          if (v.sample.size() < 8) v.sample.push_back(key);
        }
      }
    }
    report.verify = v;
  }

  report.servers = nlohmann::json::array();
  for (uint32_t id : cluster.server_ids()) {
    nlohmann::json s = cluster.server(id).stats();
    s["alive"] = cluster.alive(id);
    report.servers.push_back(std::move(s));
  }
  if (inspect) inspect(cluster);
  return report;
}

ExperimentConfig with_param(ExperimentConfig c, const std::string& param, const std::string& value) {
  try {
    if (param == "mode") c.mode = replication::parse_mode(value);
    else if (param == "growth_factor") c.growth_factor = static_cast<uint32_t>(std::stoul(value));
    else if (param == "small_pct") c.mix = small_share_mix(static_cast<uint32_t>(std::stoul(value)));
    else if (param == "l0_keys") c.l0_keys = std::stoull(value);
    else if (param == "mix") c.mix = parse_size_mix(value);
    else if (param == "threads") c.threads = static_cast<uint32_t>(std::stoul(value));
    else if (param == "records") c.records = std::stoull(value);
    else if (param == "seed") c.seed = std::stoull(value);
    else raise(ErrorCode::kConfig, fmt::format("cannot sweep '{}'", param));
  } catch (const std::logic_error&) {
    raise(ErrorCode::kConfig, fmt::format("bad value '{}' for {}", value, param));
  }
  c.label = c.label.empty() ? fmt::format("{}={}", param, value) : fmt::format("{} {}={}", c.label, param, value);
  return c;
}

std::vector<MetricsReport> sweep(const ExperimentConfig& base, const std::string& param,
                                 const std::vector<std::string>& values) {
  std::vector<ExperimentConfig> configs;
  for (const auto& v : values) configs.push_back(with_param(base, param, v));
  std::vector<MetricsReport> out;
  for (const auto& c : configs) out.push_back(run_experiment(c));
  return out;
}

nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json phases = nlohmann::json::array();
  for (const auto& p : r.phases) {
    phases.push_back({{"phase", phase_name(p.phase)},
                      {"ops", p.ops},
                      {"reads", p.reads},
                      {"writes", p.writes},
                      {"misses", p.misses},
                      {"failed_ops", p.failed_ops},
                      {"dataset_bytes", p.dataset_bytes},
                      {"device_read", p.device_read},
                      {"device_written", p.device_written},
                      {"net_bytes", p.net_bytes},
                      {"seconds", p.seconds},
                      {"cpu_seconds", p.cpu_seconds},
                      {"throughput", p.throughput},
                      {"cycles_per_op", p.cycles_per_op},
                      {"io_amp", p.io_amp},
                      {"net_amp", p.net_amp},
                      {"latency_us",
                       {{"mean", p.latency.mean_us},
                        {"p50", p.latency.p50_us},
                        {"p99", p.latency.p99_us},
                        {"p999", p.latency.p999_us},
                        {"p9999", p.latency.p9999_us},
                        {"max", p.latency.max_us}}}});
  }
  nlohmann::json j{{"config", to_json(r.config)},
                   {"fingerprint", r.fingerprint},
                   {"build_id", r.build_id},
                   {"phases", phases},
                   {"servers", r.servers}};
  if (r.verify) {
    j["verify"] = {{"checked", r.verify->checked}, {"mismatches", r.verify->mismatches}, {"sample", r.verify->sample}};
  }
  if (r.failover) {
    j["failover"] = {{"killed", r.failover->killed},
                     {"at_op", r.failover->at_op},
                     {"map_version_before", r.failover->map_version_before},
                     {"map_version_after", r.failover->map_version_after}};
  }
  return j;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

}  // namespace

std::string csv_header() {
  return "label,fingerprint,build_id,mode,servers,regions,growth_factor,l0_keys,mix,threads,seed,phase,ops,"
         "failed_ops,dataset_bytes,device_read,device_written,net_bytes,seconds,throughput,cpu_seconds,"
         "cycles_per_op,io_amp,net_amp,lat_mean_us,lat_p50_us,lat_p99_us,lat_p999_us,lat_p9999_us,lat_max_us";
}

std::vector<std::string> csv_rows(const MetricsReport& r) {
  std::vector<std::string> rows;
  const auto& c = r.config;
  for (const auto& p : r.phases) {
    rows.push_back(fmt::format(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:.6f},{:.1f},{:.6f},{:.1f},{:.6f},{:.6f},{:.2f},{},{},{},{},{}",
        csv_field(c.label), r.fingerprint, csv_field(r.build_id), replication::mode_name(c.mode), c.servers,
        c.regions, c.growth_factor, c.l0_keys, c.mix.name(), c.threads, c.seed, phase_name(p.phase), p.ops,
        p.failed_ops, p.dataset_bytes, p.device_read, p.device_written, p.net_bytes, p.seconds, p.throughput,
        p.cpu_seconds, p.cycles_per_op, p.io_amp, p.net_amp, p.latency.mean_us, p.latency.p50_us,
        p.latency.p99_us, p.latency.p999_us, p.latency.p9999_us, p.latency.max_us));
  }
  return rows;
}

}  // namespace replkv::bench
