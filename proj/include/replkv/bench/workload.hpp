#pragma once

// YCSB-style operation streams with per-op KV sizes.

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace replkv::bench {

enum class Phase : uint8_t { kLoadA, kRunA, kRunB, kRunC, kRunD };

const char* phase_name(Phase p);
Phase parse_phase(std::string_view name);

enum class OpType : uint8_t { kInsert, kRead, kUpdate };

/// Total KV pair sizes (key + value) of the three size classes.
constexpr uint32_t kSmallKv = 33;
constexpr uint32_t kMediumKv = 123;
constexpr uint32_t kLargeKv = 1023;
constexpr size_t kKeySize = 24;

struct SizeMix {
  uint32_t small = 100, medium = 0, large = 0;  // percentages

  void validate() const;
  std::string name() const;
};

/// Presets S, M, L, SD, MD, LD, or an explicit "s-m-l" triple.
SizeMix parse_size_mix(std::string_view name);
/// `small_pct` percent small pairs, the rest split evenly between M and L.
SizeMix small_share_mix(uint32_t small_pct);

struct WorkloadSpec {
  Phase phase = Phase::kLoadA;
  uint64_t record_count = 100000;     // keys present after load
  uint64_t operation_count = 100000;  // run phases only; load issues record_count inserts
  uint32_t threads = 1;
};

/// Read percentage of each phase (the rest are updates, or inserts for RunD).
uint32_t read_percent(Phase p);

/// Fixed-width key for a record index; uniform over the 64-bit key space
/// so that uniform region boundaries spread records evenly.
std::string key_for(uint64_t index, std::string_view prefix = "user");
/// Deterministic value bytes: a function of the record, its size and a
/// version so that readers can verify content.
std::string value_for(uint64_t index, uint32_t kv_size, uint64_t version = 0);

struct Op {
  OpType type = OpType::kInsert;
  uint64_t index = 0;
  uint32_t kv_size = 0;  // for reads: 0
};

/// YCSB zipfian over [0, n); item 0 is the most popular. `grow` extends the
/// item count incrementally.
class ZipfianGenerator {
 public:
  explicit ZipfianGenerator(uint64_t n, double theta = 0.99);
  uint64_t next(std::mt19937_64& rng);
  void grow(uint64_t n);
  uint64_t items() const { return n_; }

 private:
  double zeta(uint64_t from, uint64_t to) const;
  void update_eta();

  uint64_t n_;
  double theta_, alpha_, zeta2_, zetan_, eta_;
};

/// Operation stream for one client thread. Thread t of T owns record
/// indexes congruent to t mod T, so concurrent streams never touch the same
/// key and the final state does not depend on interleaving. Op mixes and
/// size mixes are exact within every block of 100 ops.
class OpGenerator {
 public:
  OpGenerator(const WorkloadSpec& spec, const SizeMix& mix, uint64_t seed, uint32_t thread = 0);

  bool done() const { return issued_ >= total_; }
  Op next();
  uint64_t total() const { return total_; }

 private:
  uint64_t owned(uint64_t global_count) const;
  uint64_t pick_existing();
  uint32_t pick_size();
  OpType pick_type();

  WorkloadSpec spec_;
  SizeMix mix_;
  uint32_t thread_;
  std::mt19937_64 rng_;
  uint64_t total_ = 0;
  uint64_t issued_ = 0;
  uint64_t local_records_ = 0;  // records of this thread present so far
  ZipfianGenerator zipf_;
  std::array<OpType, 100> type_deck_{};
  std::array<uint32_t, 100> size_deck_{};
  size_t type_pos_ = 100, size_pos_ = 100;
};

/// Whole-phase stream for all threads, concatenated thread by thread.
std::vector<Op> generate_ops(const WorkloadSpec& spec, const SizeMix& mix, uint64_t seed);

}  // namespace replkv::bench
