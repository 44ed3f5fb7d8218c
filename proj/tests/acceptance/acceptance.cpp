// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any failed. `acceptance N...` runs a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <mutex>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "replkv/bench/experiment.hpp"
#include "replkv/bench/metrics.hpp"
#include "replkv/cluster/sim.hpp"
#include "replkv/index_wire.hpp"
#include "replkv/lsm/engine.hpp"
#include "replkv/rpc/client.hpp"
#include "replkv/rpc/scheduler.hpp"
#include "replkv/rpc/server.hpp"

using namespace replkv;
using namespace std::chrono_literals;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

bench::ExperimentConfig load_config(replication::Mode mode) {
  bench::ExperimentConfig c;
  c.mode = mode;
  c.records = 100000;
  c.mix = bench::parse_size_mix("SD");
  c.phases = {bench::Phase::kLoadA};
  return c;
}

uint64_t server_sum(const bench::MetricsReport& r, const char* field) {
  uint64_t sum = 0;
  for (const auto& s : r.servers) sum += s.value(field, uint64_t{0});
  return sum;
}

// Shared by criteria 1-4: one LoadA per mode.
struct ModeRuns {
  std::map<replication::Mode, bench::MetricsReport> reports;
  uint64_t equivalence_checked = 0;
  uint64_t equivalence_mismatches = 0;
  std::string first_mismatch;
};

ModeRuns& mode_runs() {
  static ModeRuns runs = [] {
    ModeRuns out;
    for (auto mode : {replication::Mode::kNone, replication::Mode::kSendIndex, replication::Mode::kBuildIndex}) {
      bench::InspectFn inspect;
      if (mode == replication::Mode::kSendIndex) {
        inspect = [&out, records = load_config(mode).records](cluster::SimCluster& c) {
          c.flush_all();
          const cluster::RegionMap map = c.map();
          for (uint64_t i = 0; i < records; ++i) {
            const std::string key = bench::key_for(i);
            const auto& entry = map.lookup(key);
            const auto primary = c.server(entry.primary).primary(entry.id);
            const std::optional<std::string> want = primary ? primary->get(key) : std::nullopt;
            for (uint32_t b : entry.backups) {
              const auto backup = c.server(b).backup(entry.id);
              const std::optional<std::string> got = backup ? backup->engine().get(key) : std::nullopt;
              ++out.equivalence_checked;
              if (!want || got != want) {
                if (out.equivalence_mismatches++ == 0) out.first_mismatch = key;
              }
            }
          }
        };
      }
      out.reports.emplace(mode, bench::run_experiment(load_config(mode), inspect));
    }
    return out;
  }();
  return runs;
}

Outcome rewrite_equivalence() {
  auto& r = mode_runs();
  const bool ok = r.equivalence_checked == 100000 && r.equivalence_mismatches == 0;
  return {ok, fmt::format("{} backup lookups, {} mismatches{}", r.equivalence_checked, r.equivalence_mismatches,
                          r.first_mismatch.empty() ? "" : " (first " + r.first_mismatch + ")")};
}

Outcome backup_compaction_free() {
  auto& r = mode_runs();
  const auto& send = r.reports.at(replication::Mode::kSendIndex);
  const auto& build = r.reports.at(replication::Mode::kBuildIndex);
  const uint64_t sc = server_sum(send, "backup_compactions"), sl = server_sum(send, "backup_l0_peak_entries");
  const uint64_t bc = server_sum(build, "backup_compactions"), bl = server_sum(build, "backup_l0_peak_entries");
  const bool ok = sc == 0 && sl == 0 && bc > 0 && bl > 0;
  return {ok, fmt::format("send: compactions {} l0 peak {}; build: compactions {} l0 peak {}", sc, sl, bc, bl)};
}

Outcome io_ordering() {
  auto& r = mode_runs();
  const double none = r.reports.at(replication::Mode::kNone).phase(bench::Phase::kLoadA).io_amp;
  const double send = r.reports.at(replication::Mode::kSendIndex).phase(bench::Phase::kLoadA).io_amp;
  const double build = r.reports.at(replication::Mode::kBuildIndex).phase(bench::Phase::kLoadA).io_amp;
  const bool ok = none < send && send < build && build / send >= 1.3;
  return {ok, fmt::format("io amp none {:.3f} send {:.3f} build {:.3f}, build/send {:.3f}", none, send, build,
                          build / send)};
}

Outcome network_ratio() {
  auto& r = mode_runs();
  const double send = r.reports.at(replication::Mode::kSendIndex).phase(bench::Phase::kLoadA).net_amp;
  const double build = r.reports.at(replication::Mode::kBuildIndex).phase(bench::Phase::kLoadA).net_amp;
  const bool ok = build > 0 && send / build <= 1.5;
  return {ok, fmt::format("net amp send {:.3f} build {:.3f}, ratio {:.3f}", send, build, send / build)};
}

Outcome growth_trend() {
  const std::vector<uint32_t> factors{4, 8, 12, 16};
  auto base = load_config(replication::Mode::kSendIndex);
  base.regions = 4;
  base.l0_keys = 256;
  const uint64_t keys_per_region = base.records / base.regions;
  std::vector<double> overhead, diff;
  for (uint32_t f : factors) {
    overhead.push_back(bench::space_overhead(f, base.l0_keys, keys_per_region));
    double io[2];
    int i = 0;
    for (auto mode : {replication::Mode::kSendIndex, replication::Mode::kBuildIndex}) {
      auto c = base;
      c.mode = mode;
      c.growth_factor = f;
      io[i++] = bench::run_experiment(c).phase(bench::Phase::kLoadA).io_amp;
    }
    diff.push_back(io[1] - io[0]);
  }
  bool ok = true;
  for (size_t i = 1; i < factors.size(); ++i) {
    ok = ok && overhead[i] < overhead[i - 1] && diff[i] >= diff[i - 1];
  }
  std::string detail;
  for (size_t i = 0; i < factors.size(); ++i) {
    detail += fmt::format("{}f={} overhead {:.4f} io diff {:.3f}", i ? "; " : "", factors[i], overhead[i], diff[i]);
  }
  return {ok, detail};
}

Outcome failover_safety() {
  constexpr int kTrials = 20;
  int good = 0;
  uint64_t mismatches = 0, failed = 0, checked = 0;
  std::string bad;
  for (int t = 0; t < kTrials; ++t) {
    auto c = load_config(replication::Mode::kSendIndex);
    c.seed = 1000 + t;
    c.kill_at_op = 50000;
    c.verify = true;
    bool serves = false;
    const auto r = bench::run_experiment(c, [&](cluster::SimCluster& sim) {
      const auto map = sim.map();
      const auto& first = map.entries().at(0);
      const std::string probe = first.start_key.empty() ? "a" : first.start_key;
      try {
        sim.client().put(probe, "after-failover");
        serves = sim.client().get(probe) == std::optional<std::string>("after-failover");
      } catch (const Error&) {
        serves = false;
      }
    });
    const bool ok = r.verify && r.failover && r.verify->mismatches == 0 &&
                    r.failover->map_version_after > r.failover->map_version_before && serves;
    if (r.verify) {
      mismatches += r.verify->mismatches;
      checked += r.verify->checked;
    }
    failed += r.phase(bench::Phase::kLoadA).failed_ops;
    if (ok) {
      ++good;
    } else if (bad.empty()) {
      bad = fmt::format(", first bad seed {}", c.seed);
    }
  }
  return {good == kTrials, fmt::format("{}/{} trials clean, {} acked writes checked, {} lost, {} unacked ops{}", good,
                                       kTrials, checked, mismatches, failed, bad)};
}

Outcome message_fuzz() {
  constexpr uint64_t kMessages = 100000;
  constexpr int kConnections = 2;
  std::mutex mu;
  std::vector<std::vector<uint64_t>> order(kConnections);
  rpc::Handler handler = [&](const rpc::Request& r) {
    const uint64_t conn = load_le<uint64_t>(r.payload.data() + 8);
    {
      std::lock_guard lock(mu);
      order.at(conn).push_back(load_le<uint64_t>(r.payload.data()));
    }
    return Bytes(r.payload.begin(), r.payload.begin() + 16);
  };
  rpc::ServerOptions so;
  so.workers = 1;
  so.client_buffer_bytes = 16 * 1024;
  auto fabric = transport::InProcFabric::create();
  auto server_nic = transport::make_inproc_nic(fabric, "s");
  auto client_nic = transport::make_inproc_nic(fabric, "c");
  rpc::RpcServer server(*server_nic, "s:1", handler, so);

  uint64_t unaligned = 0, bad_replies = 0, resets = 0;
  std::mutex stats_mu;
  std::vector<std::thread> threads;
  for (int conn = 0; conn < kConnections; ++conn) {
    threads.emplace_back([&, conn] {
      rpc::ClientOptions co;
      co.buffer_bytes = 16 * 1024;
      rpc::RpcClient client(*client_nic, server.address(), co);
      std::mt19937_64 rng(91 + conn);
      const size_t max_payload = client.max_request_payload();
      uint64_t local_unaligned = 0, local_bad = 0;
      for (uint64_t i = 0; i < kMessages; ++i) {
        Bytes p(16 + rng() % (max_payload - 16));
        store_le<uint64_t>(p.data(), i);
        store_le<uint64_t>(p.data() + 8, static_cast<uint64_t>(conn));
        if (rpc::message_size(p.size()) % 128 != 0) ++local_unaligned;
        const Bytes r = client.call(rpc::Op::kPut, p);
        if (r.size() != 16 || load_le<uint64_t>(r.data()) != i) ++local_bad;
      }
      std::lock_guard lock(stats_mu);
      unaligned += local_unaligned;
      bad_replies += local_bad;
      resets += client.stats().resets;
    });
  }
  for (auto& t : threads) t.join();

  uint64_t out_of_order = 0, delivered = 0;
  for (const auto& o : order) {
    delivered += o.size();
    for (uint64_t i = 0; i < o.size(); ++i) out_of_order += o[i] != i;
    if (o.size() != kMessages) ++out_of_order;
  }
  const bool ok = delivered == kMessages * kConnections && out_of_order == 0 && bad_replies == 0 &&
                  unaligned == 0 && resets > 0;
  return {ok, fmt::format("{} connections x {} messages, {} delivered, {} out of order, {} bad replies, "
                          "{} ring resets, {} unaligned sizes",
                          kConnections, kMessages, delivered, out_of_order, bad_replies, resets, unaligned)};
}

Outcome translation_oracle() {
  constexpr uint64_t kSeg = 64 * 1024;
  constexpr uint64_t kSegments = 256;
  std::mt19937_64 rng(2024);
  uint64_t wrong = 0, cases = 0;
  for (int round = 0; round < 100; ++round) {
    SegmentMap map;
    std::map<uint64_t, uint64_t> oracle;  // segment index -> local segment index
    std::vector<uint64_t> locals(kSegments);
    for (uint64_t i = 0; i < kSegments; ++i) locals[i] = i;
    std::shuffle(locals.begin(), locals.end(), rng);
    for (uint64_t s = 0; s < kSegments; ++s) {
      if (rng() % 4 == 0) continue;  // absent on this replica
      oracle[s] = locals[s];
      map.insert(DeviceOffset{s * kSeg}, DeviceOffset{locals[s] * kSeg});
    }
    for (int k = 0; k < 100; ++k, ++cases) {
      const uint64_t ptr = rng() % (kSegments * kSeg);
      const uint64_t seg = ptr / kSeg;
      const auto it = oracle.find(seg);
      try {
        const DeviceOffset got = translate_pointer(DeviceOffset{ptr}, map, kSeg);
        if (it == oracle.end() || got.value != it->second * kSeg + ptr % kSeg) ++wrong;
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kMissingMapping || it != oracle.end()) ++wrong;
      }
    }
  }
  return {cases == 10000 && wrong == 0, fmt::format("{} cases, {} disagreements with the oracle", cases, wrong)};
}

Outcome engine_oracle() {
  constexpr uint64_t kSeg = 64 * 1024;
  MemoryDevice dev(1024 * kSeg, kSeg);
  lsm::EngineOptions o;
  o.l0_capacity_keys = 256;
  o.growth_factor = 4;
  lsm::Engine engine(dev, o);
  std::map<std::string, std::string> shadow;
  std::mt19937_64 rng(7);
  uint64_t wrong = 0;
  auto key_of = [](uint64_t k) { return fmt::format("k{:06}", k); };
  for (int i = 0; i < 10000; ++i) {
    const std::string key = key_of(rng() % 3000);
    switch (rng() % 10) {
      case 0:
      case 1:
      case 2:
      case 3: {
        std::string v(1 + rng() % 200, static_cast<char>('a' + rng() % 26));
        engine.put(key, v);
        shadow[key] = v;
        break;
      }
      case 4:
        engine.del(key);
        shadow.erase(key);
        break;
      case 5: {
        const size_t n = 1 + rng() % 20;
        const auto got = engine.scan(key, n);
        std::vector<std::pair<std::string, std::string>> want;
        for (auto it = shadow.lower_bound(key); it != shadow.end() && want.size() < n; ++it) want.push_back(*it);
        if (got != want) ++wrong;
        break;
      }
      default: {
        const auto it = shadow.find(key);
        const auto got = engine.get(key);
        if (it == shadow.end() ? got.has_value() : got != it->second) ++wrong;
      }
    }
  }
  for (const auto& [k, v] : shadow) {
    if (engine.get(k) != v) ++wrong;
  }
  const auto st = engine.stats();
  const bool ok = wrong == 0 && st.l0_flushes >= 3;
  return {ok, fmt::format("10000 ops, {} disagreements, {} L0 spills, {} levels", wrong, st.l0_flushes,
                          st.level_entries.empty() ? 0 : st.level_entries.size() - 1)};
}

Outcome scheduler_policy() {
  constexpr size_t kThreshold = 4;
  uint64_t violations = 0, wakes = 0, decisions = 0;

  // Scripted states against the policy directly.
  const rpc::SchedulerPolicy policy(kThreshold);
  std::mt19937_64 rng(5);
  for (int i = 0; i < 20000; ++i, ++decisions) {
    std::vector<rpc::WorkerState> ws(1 + rng() % 6);
    for (auto& w : ws) {
      w.sleeping = rng() % 3 == 0;
      w.queue_len = w.sleeping ? 0 : rng() % (2 * kThreshold);
    }
    const size_t current = rng() % ws.size();
    const auto d = policy.choose(current, ws);
    bool all_running_busy = true, any_sleeping = false;
    for (const auto& w : ws) {
      if (w.sleeping) any_sleeping = true;
      else if (w.queue_len < kThreshold) all_running_busy = false;
    }
    if (d.wake) {
      ++wakes;
      if (!all_running_busy || !ws.at(d.worker).sleeping) ++violations;
    } else if (any_sleeping && all_running_busy) {
      ++violations;
    } else if (ws.at(d.worker).sleeping) {
      ++violations;
    }
    if (!ws[current].sleeping && ws[current].queue_len < kThreshold && d.worker != current) ++violations;
  }

  // Live pool: bursts of slow tasks, then idle gaps.
  rpc::WorkerPool pool(4, kThreshold, 100us, true);
  for (int burst = 0; burst < 20; ++burst) {
    const int n = 1 + static_cast<int>(rng() % 40);
    for (int i = 0; i < n; ++i) pool.submit([] { std::this_thread::sleep_for(50us); });
    std::this_thread::sleep_for(std::chrono::milliseconds(rng() % 3));
  }
  std::this_thread::sleep_for(50ms);
  for (const auto& ev : pool.events()) {
    ++decisions;
    if (!ev.decision.wake) continue;
    ++wakes;
    for (const auto& w : ev.before) {
      if (!w.sleeping && w.queue_len < kThreshold) ++violations;
    }
  }
  size_t asleep = 0;
  for (const auto& w : pool.states()) asleep += w.sleeping;
  const auto stats = pool.stats();
  pool.stop();

  // A long idle interval must keep workers awake.
  rpc::WorkerPool patient(2, kThreshold, std::chrono::seconds(5), false);
  patient.submit([] {});
  std::this_thread::sleep_for(30ms);
  size_t patient_asleep = 0;
  for (const auto& w : patient.states()) patient_asleep += w.sleeping;
  patient.stop();

  const bool ok = violations == 0 && asleep == pool.size() && stats.sleeps > 0 && patient_asleep == 0;
  return {ok, fmt::format("{} decisions, {} wake-ups, {} violations; idle 100us pool: {}/{} asleep, {} sleeps; "
                          "idle 5s pool: {} asleep",
                          decisions, wakes, violations, asleep, pool.size(), stats.sleeps, patient_asleep)};
}

Outcome read_neutrality() {
  const std::vector<replication::Mode> modes{replication::Mode::kNone, replication::Mode::kSendIndex,
                                             replication::Mode::kBuildIndex};
  constexpr int kReps = 3;
  std::vector<std::vector<double>> tput(modes.size());
  for (int rep = 0; rep < kReps; ++rep) {
    for (size_t k = 0; k < modes.size(); ++k) {
      const size_t m = (k + rep) % modes.size();  // rotate so drift hits every mode alike
      auto c = load_config(modes[m]);
      c.phases = {bench::Phase::kLoadA, bench::Phase::kRunC, bench::Phase::kRunC};
      c.operations = 100000;
      c.seed = 42 + rep;
      const auto r = bench::run_experiment(c);
      for (const auto& p : r.phases) {
        if (p.phase == bench::Phase::kRunC) tput[m].push_back(p.throughput);
      }
    }
  }
  double lo = 0, hi = 0;
  std::string detail;
  for (size_t m = 0; m < modes.size(); ++m) {
    auto& v = tput[m];
    std::sort(v.begin(), v.end());
    const double median = v[v.size() / 2];
    lo = m == 0 ? median : std::min(lo, median);
    hi = std::max(hi, median);
    detail += fmt::format("{} {:.0f} ops/s, ", replication::mode_name(modes[m]), median);
  }
  const double spread = (hi - lo) / hi;
  detail += fmt::format("spread {:.1f}%", spread * 100);
  return {spread <= 0.10, detail};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_level(spdlog::level::warn);
  const std::vector<Criterion> all{
      {1, "backup index equivalence", rewrite_equivalence},
      {2, "no backup compaction in send mode", backup_compaction_free},
      {3, "device traffic ordering", io_ordering},
      {4, "network traffic ratio", network_ratio},
      {5, "growth factor trend", growth_trend},
      {6, "failover without loss", failover_safety},
      {7, "message exactly-once in order", message_fuzz},
      {8, "pointer translation", translation_oracle},
      {9, "engine against shadow map", engine_oracle},
      {10, "worker scheduling", scheduler_policy},
      {11, "read throughput across modes", read_neutrality},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoi(argv[i]));

  int failed = 0;
  for (const auto& c : all) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, fmt::format("exception: {}", e.what())};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failed += !o.pass;
    fmt::print("{} [{:2}] {}: {} ({:.1f}s)\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail, secs);
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
