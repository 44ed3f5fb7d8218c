#include "replkv/bench/workload.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <fmt/format.h>

#include "replkv/common.hpp"

namespace replkv::bench {

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace

const char* phase_name(Phase p) {
  switch (p) {
    case Phase::kLoadA: return "loadA";
    case Phase::kRunA: return "runA";
    case Phase::kRunB: return "runB";
    case Phase::kRunC: return "runC";
    case Phase::kRunD: return "runD";
  }
  return "?";
}

Phase parse_phase(std::string_view name) {
  std::string n(name);
  std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) { return std::tolower(c); });
  if (n == "loada") return Phase::kLoadA;
  if (n == "runa") return Phase::kRunA;
  if (n == "runb") return Phase::kRunB;
  if (n == "runc") return Phase::kRunC;
  if (n == "rund") return Phase::kRunD;
  raise(ErrorCode::kInvalidArgument, fmt::format("unknown workload '{}'", name));
}

uint32_t read_percent(Phase p) {
  switch (p) {
    case Phase::kLoadA: return 0;
    case Phase::kRunA: return 50;
    case Phase::kRunB: return 95;
    case Phase::kRunC: return 100;
    case Phase::kRunD: return 95;
  }
  return 0;
}

void SizeMix::validate() const {
  if (small + medium + large != 100) {
    raise(ErrorCode::kInvalidArgument, fmt::format("size mix {} does not sum to 100", name()));
  }
}

std::string SizeMix::name() const { return fmt::format("{}-{}-{}", small, medium, large); }

SizeMix parse_size_mix(std::string_view name) {
  std::string n(name);
  std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) { return std::toupper(c); });
  SizeMix m;
  if (n == "S") {
    m = {100, 0, 0};
  } else if (n == "M") {
    m = {0, 100, 0};
  } else if (n == "L") {
    m = {0, 0, 100};
  } else if (n == "SD") {
    m = {60, 20, 20};
  } else if (n == "MD") {
    m = {20, 60, 20};
  } else if (n == "LD") {
    m = {20, 20, 60};
  } else {
    unsigned s = 0, md = 0, l = 0;
    char tail = 0;
    if (std::sscanf(n.c_str(), "%u-%u-%u%c", &s, &md, &l, &tail) != 3) {
      raise(ErrorCode::kInvalidArgument, fmt::format("unknown size mix '{}'", name));
    }
    m = {s, md, l};
  }
  m.validate();
  return m;
}

SizeMix small_share_mix(uint32_t small_pct) {
  if (small_pct > 100) raise(ErrorCode::kInvalidArgument, "small share above 100%");
  const uint32_t rest = 100 - small_pct;
  return {small_pct, rest - rest / 2, rest / 2};
}

std::string key_for(uint64_t index, std::string_view prefix) {
  return fmt::format("{}{:020}", prefix, splitmix64(index));
}

std::string value_for(uint64_t index, uint32_t kv_size, uint64_t version) {
  const size_t len = kv_size > kKeySize ? kv_size - kKeySize : 1;
  std::string v(len, '\0');
  uint64_t x = splitmix64(index ^ (version << 40) ^ (uint64_t{kv_size} << 20));
  for (size_t i = 0; i < len; ++i) {
    if (i % 8 == 0) x = splitmix64(x);
    v[i] = static_cast<char>('a' + (x >> (8 * (i % 8))) % 26);
  }
  return v;
}

ZipfianGenerator::ZipfianGenerator(uint64_t n, double theta)
    : n_(std::max<uint64_t>(n, 1)), theta_(theta), alpha_(1.0 / (1.0 - theta)) {
  zeta2_ = zeta(0, 2);
  zetan_ = zeta(0, n_);
  update_eta();
}

double ZipfianGenerator::zeta(uint64_t from, uint64_t to) const {
  double sum = 0;
  for (uint64_t i = from; i < to; ++i) sum += 1.0 / std::pow(static_cast<double>(i + 1), theta_);
  return sum;
}

void ZipfianGenerator::update_eta() {
  eta_ = (1.0 - std::pow(2.0 / static_cast<double>(n_), 1.0 - theta_)) / (1.0 - zeta2_ / zetan_);
}

void ZipfianGenerator::grow(uint64_t n) {
  if (n <= n_) return;
  zetan_ += zeta(n_, n);
  n_ = n;
  update_eta();
}

uint64_t ZipfianGenerator::next(std::mt19937_64& rng) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  const double uz = u * zetan_;
  if (uz < 1.0) return 0;
  if (uz < 1.0 + std::pow(0.5, theta_)) return std::min<uint64_t>(1, n_ - 1);
  const auto r = static_cast<uint64_t>(static_cast<double>(n_) * std::pow(eta_ * u - eta_ + 1.0, alpha_));
  return std::min(r, n_ - 1);
}

OpGenerator::OpGenerator(const WorkloadSpec& spec, const SizeMix& mix, uint64_t seed, uint32_t thread)
    : spec_(spec), mix_(mix), thread_(thread), rng_(splitmix64(seed) ^ splitmix64(thread + 1)), zipf_(1) {
  mix_.validate();
  if (spec_.threads == 0 || thread_ >= spec_.threads) raise(ErrorCode::kInvalidArgument, "bad thread index");
  if (spec_.phase == Phase::kLoadA) {
    total_ = owned(spec_.record_count);
    return;
  }
  if (spec_.record_count < spec_.threads) {
    raise(ErrorCode::kInvalidArgument, "run phases need at least one record per thread");
  }
  total_ = spec_.operation_count / spec_.threads + (thread_ < spec_.operation_count % spec_.threads ? 1 : 0);
  local_records_ = owned(spec_.record_count);
  zipf_ = ZipfianGenerator(local_records_);
}

uint64_t OpGenerator::owned(uint64_t count) const {
  return count > thread_ ? (count - thread_ - 1) / spec_.threads + 1 : 0;
}

uint64_t OpGenerator::pick_existing() {
  const uint64_t rank = zipf_.next(rng_);
  uint64_t local;
  if (spec_.phase == Phase::kRunD) {
    local = local_records_ - 1 - rank;
  } else {
    local = splitmix64(rank) % local_records_;
  }
  return local * spec_.threads + thread_;
}

uint32_t OpGenerator::pick_size() {
  if (size_pos_ == size_deck_.size()) {
    size_t i = 0;
    for (uint32_t k = 0; k < mix_.small; ++k) size_deck_[i++] = kSmallKv;
    for (uint32_t k = 0; k < mix_.medium; ++k) size_deck_[i++] = kMediumKv;
    for (uint32_t k = 0; k < mix_.large; ++k) size_deck_[i++] = kLargeKv;
    std::shuffle(size_deck_.begin(), size_deck_.end(), rng_);
    size_pos_ = 0;
  }
  return size_deck_[size_pos_++];
}

OpType OpGenerator::pick_type() {
  if (type_pos_ == type_deck_.size()) {
    const uint32_t reads = read_percent(spec_.phase);
    const OpType write = spec_.phase == Phase::kRunD ? OpType::kInsert : OpType::kUpdate;
    for (size_t i = 0; i < type_deck_.size(); ++i) type_deck_[i] = i < reads ? OpType::kRead : write;
    std::shuffle(type_deck_.begin(), type_deck_.end(), rng_);
    type_pos_ = 0;
  }
  return type_deck_[type_pos_++];
}

Op OpGenerator::next() {
  if (done()) raise(ErrorCode::kInvalidArgument, "operation stream exhausted");
  Op op;
  if (spec_.phase == Phase::kLoadA) {
    op = {OpType::kInsert, issued_ * spec_.threads + thread_, pick_size()};
  } else {
    op.type = pick_type();
    if (op.type == OpType::kInsert) {
      op.index = local_records_ * spec_.threads + thread_;
      ++local_records_;
      zipf_.grow(local_records_);
    } else {
      op.index = pick_existing();
    }
    if (op.type != OpType::kRead) op.kv_size = pick_size();
  }
  ++issued_;
  return op;
}

std::vector<Op> generate_ops(const WorkloadSpec& spec, const SizeMix& mix, uint64_t seed) {
  std::vector<Op> ops;
  for (uint32_t t = 0; t < spec.threads; ++t) {
    OpGenerator g(spec, mix, seed, t);
    while (!g.done()) ops.push_back(g.next());
  }
  return ops;
}

}  // namespace replkv::bench
