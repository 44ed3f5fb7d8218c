#pragma once

#include <cstdint>
#include <vector>

namespace replkv::bench {

/// Device bytes read plus written, over the bytes of all KV requests.
double io_amplification(uint64_t device_traffic, uint64_t dataset_size);
/// Bytes sent and received by the server NICs, over the same dataset size.
double network_amplification(uint64_t network_traffic, uint64_t dataset_size);
/// CPU cycles per operation: cpu seconds * nominal clock / ops.
double efficiency(double cpu_seconds, double nominal_hz, uint64_t ops);

/// Nominal clock of this machine from /proc/cpuinfo, or 1 GHz.
double nominal_hz();
/// CPU time consumed by this process so far.
double process_cpu_seconds();

/// Share of an LSM index spent on levels above the last one, with the last
/// level sized to hold `keys` and each level above it 1/f of the one below,
/// down to the L0 capacity.
double space_overhead(uint32_t growth_factor, uint64_t l0_keys, uint64_t keys);

/// Latency histogram with 1 us buckets up to `max_us`; larger samples land
/// in an overflow bucket but still count toward the maximum.
class LatencyHistogram {
 public:
  explicit LatencyHistogram(uint64_t max_us = 200000);

  void record_ns(uint64_t ns);
  void merge(const LatencyHistogram& other);

  uint64_t count() const { return count_; }
  uint64_t max_us() const { return max_seen_us_; }
  double mean_us() const;
  /// Smallest bucket value v with at least p of the samples <= v.
  uint64_t percentile_us(double p) const;

 private:
  std::vector<uint64_t> buckets_;  // last one is the overflow bucket
  uint64_t count_ = 0;
  uint64_t sum_us_ = 0;
  uint64_t max_seen_us_ = 0;
};

}  // namespace replkv::bench
