#pragma once

// Runs workload phases against an in-process cluster and reports metrics
// computed from the device and NIC counters of every server.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "replkv/bench/workload.hpp"
#include "replkv/replication.hpp"

namespace replkv::cluster {
class SimCluster;
}

namespace replkv::bench {

struct ExperimentConfig {
  std::string label;
  size_t servers = 2;
  size_t regions = 32;
  replication::Mode mode = replication::Mode::kSendIndex;
  uint32_t growth_factor = 4;
  uint64_t l0_keys = 1024;  // per region; halved for build_index
  uint64_t segment_size = 64 * 1024;
  uint64_t device_capacity = 8ull << 30;
  SizeMix mix{60, 20, 20};
  std::vector<Phase> phases{Phase::kLoadA};
  uint64_t records = 100000;
  uint64_t operations = 100000;  // per run phase
  uint32_t threads = 1;
  uint64_t seed = 42;
  size_t workers = 2;
  size_t spinners = 1;
  /// Crash a server once this many ops (counted over all phases) completed.
  std::optional<uint64_t> kill_at_op;
  /// Server to crash; 0 = the primary of the first region.
  uint32_t kill_server = 0;
  /// Read back every acknowledged write after the last phase.
  bool verify = false;
  /// Flush every primary L0 after each phase, so counters include it.
  bool flush_after_phase = false;
  /// 0 = detect from /proc/cpuinfo.
  double nominal_hz = 0;

  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
/// Unknown keys are rejected.
ExperimentConfig config_from_json(const nlohmann::json& j, ExperimentConfig base = {});
/// Stable short hash of the configuration (label excluded).
std::string fingerprint(const ExperimentConfig& c);
/// Version string of this build.
std::string build_id();

struct LatencySummary {
  double mean_us = 0;
  uint64_t p50_us = 0, p99_us = 0, p999_us = 0, p9999_us = 0, max_us = 0;
};

struct PhaseReport {
  Phase phase = Phase::kLoadA;
  uint64_t ops = 0;
  uint64_t reads = 0, writes = 0, misses = 0;
  uint64_t failed_ops = 0;
  uint64_t dataset_bytes = 0;
  uint64_t device_read = 0, device_written = 0;
  uint64_t net_bytes = 0;
  double seconds = 0;
  double cpu_seconds = 0;
  double throughput = 0;
  double cycles_per_op = 0;
  double io_amp = 0;
  double net_amp = 0;
  LatencySummary latency;
};

struct VerifyReport {
  uint64_t checked = 0;
  uint64_t mismatches = 0;
  std::vector<std::string> sample;  // a few offending keys
};

struct FailoverReport {
  uint32_t killed = 0;
  uint64_t at_op = 0;
  uint64_t map_version_before = 0;
  uint64_t map_version_after = 0;
};

struct MetricsReport {
  ExperimentConfig config;
  std::string fingerprint;
  std::string build_id;
  std::vector<PhaseReport> phases;
  nlohmann::json servers;  // per-server counters at the end of the run
  std::optional<VerifyReport> verify;
  std::optional<FailoverReport> failover;

  const PhaseReport& phase(Phase p) const;
};

/// Called after the last phase with the cluster still up.
using InspectFn = std::function<void(cluster::SimCluster&)>;

MetricsReport run_experiment(const ExperimentConfig& config, const InspectFn& inspect = {});

/// Runs `base` once per value of `param`: mode, growth_factor, small_pct,
/// l0_keys, mix, threads, records or seed.
std::vector<MetricsReport> sweep(const ExperimentConfig& base, const std::string& param,
                                 const std::vector<std::string>& values);
ExperimentConfig with_param(ExperimentConfig c, const std::string& param, const std::string& value);

nlohmann::json to_json(const MetricsReport& r);
/// One row per phase; columns are described in docs/metrics.md.
std::string csv_header();
std::vector<std::string> csv_rows(const MetricsReport& r);

}  // namespace replkv::bench
