#include "replkv/bench/metrics.hpp"

#include <time.h>

#include <cmath>
#include <fstream>
#include <regex>
#include <string>

#include <fmt/format.h>

#include "replkv/common.hpp"

namespace replkv::bench {

double io_amplification(uint64_t device_traffic, uint64_t dataset_size) {
  if (dataset_size == 0) raise(ErrorCode::kZeroDataset, "io amplification over an empty dataset");
  return static_cast<double>(device_traffic) / static_cast<double>(dataset_size);
}

double network_amplification(uint64_t network_traffic, uint64_t dataset_size) {
  if (dataset_size == 0) raise(ErrorCode::kZeroDataset, "network amplification over an empty dataset");
  return static_cast<double>(network_traffic) / static_cast<double>(dataset_size);
}

double efficiency(double cpu_seconds, double nominal_hz, uint64_t ops) {
  if (ops == 0) raise(ErrorCode::kZeroOps, "efficiency over zero operations");
  return cpu_seconds * nominal_hz / static_cast<double>(ops);
}

double nominal_hz() {
  std::ifstream in("/proc/cpuinfo");
  std::string line;
  const std::regex ghz(R"(@\s*([0-9.]+)\s*GHz)");
  const std::regex mhz(R"(^cpu MHz\s*:\s*([0-9.]+))");
  double fallback = 0;
  std::smatch m;
  while (std::getline(in, line)) {
    if (std::regex_search(line, m, ghz)) return std::stod(m[1]) * 1e9;
    if (fallback == 0 && std::regex_search(line, m, mhz)) fallback = std::stod(m[1]) * 1e6;
  }
  return fallback > 0 ? fallback : 1e9;
}

double process_cpu_seconds() {
  timespec ts{};
  clock_gettime(CLOCK_PROCESS_CPUTIME_ID, &ts);
  return static_cast<double>(ts.tv_sec) + static_cast<double>(ts.tv_nsec) * 1e-9;
}

double space_overhead(uint32_t growth_factor, uint64_t l0_keys, uint64_t keys) {
  if (growth_factor < 2) raise(ErrorCode::kInvalidArgument, "growth factor below 2");
  if (l0_keys == 0 || keys == 0) raise(ErrorCode::kInvalidArgument, "empty index");
  double level = static_cast<double>(keys);
  const double last = level;
  double upper = 0;
  while (level / growth_factor >= static_cast<double>(l0_keys)) {
    level /= growth_factor;
    upper += level;
  }
  upper += static_cast<double>(l0_keys);
  return upper / (upper + last);
}

LatencyHistogram::LatencyHistogram(uint64_t max_us) : buckets_(max_us + 1, 0) {}

void LatencyHistogram::record_ns(uint64_t ns) {
  const uint64_t us = ns / 1000;
  ++buckets_[std::min<uint64_t>(us, buckets_.size() - 1)];
  ++count_;
  sum_us_ += us;
  max_seen_us_ = std::max(max_seen_us_, us);
}

void LatencyHistogram::merge(const LatencyHistogram& other) {
  if (other.buckets_.size() != buckets_.size()) raise(ErrorCode::kInvalidArgument, "histogram shapes differ");
  for (size_t i = 0; i < buckets_.size(); ++i) buckets_[i] += other.buckets_[i];
  count_ += other.count_;
  sum_us_ += other.sum_us_;
  max_seen_us_ = std::max(max_seen_us_, other.max_seen_us_);
}

double LatencyHistogram::mean_us() const {
  return count_ == 0 ? 0.0 : static_cast<double>(sum_us_) / static_cast<double>(count_);
}

uint64_t LatencyHistogram::percentile_us(double p) const {
  if (count_ == 0) return 0;
  const auto need = static_cast<uint64_t>(std::ceil(p * static_cast<double>(count_)));
  uint64_t seen = 0;
  for (size_t i = 0; i + 1 < buckets_.size(); ++i) {
    seen += buckets_[i];
    if (seen >= need && seen > 0) return i;
  }
  return max_seen_us_;
}

}  // namespace replkv::bench
