#include "replkv/lsm/engine.hpp"

#include <algorithm>

#include <fmt/format.h>

namespace replkv::lsm {

void EngineOptions::validate() const {
  if (growth_factor < 2 || growth_factor > 16) {
    raise(ErrorCode::kConfig, fmt::format("growth factor {} outside 2..16", growth_factor));
  }
  if (l0_capacity_keys == 0) raise(ErrorCode::kConfig, "L0 capacity must be positive");
}

namespace {

// A sorted stream of leaf entries feeding a merge.
class MergeSource {
 public:
  virtual ~MergeSource() = default;
  virtual bool valid() const = 0;
  virtual const LeafEntry& entry() const = 0;
  virtual const std::string& key() = 0;
  virtual bool key_known() const = 0;
  virtual void next() = 0;
};

class MapSource final : public MergeSource {
 public:
  template <typename Map>
  explicit MapSource(const Map& map) {
    items_.reserve(map.size());
    for (const auto& [k, v] : map) {
      items_.push_back({k, LeafEntry{make_prefix(k), v.ptr, v.tombstone}});
    }
  }
  bool valid() const override { return pos_ < items_.size(); }
  const LeafEntry& entry() const override { return items_[pos_].second; }
  const std::string& key() override { return items_[pos_].first; }
  bool key_known() const override { return true; }
  void next() override { ++pos_; }

 private:
  std::vector<std::pair<std::string, LeafEntry>> items_;
  size_t pos_ = 0;
};

class LevelSource final : public MergeSource {
 public:
  LevelSource(LevelPtr level, KeyResolver resolve) : it_(std::move(level), std::move(resolve)) {
    it_.seek_to_first();
  }
  bool valid() const override { return it_.valid(); }
  const LeafEntry& entry() const override { return it_.entry(); }
  const std::string& key() override { return it_.key(); }
  bool key_known() const override { return false; }
  void next() override { it_.next(); }

 private:
  LevelIterator it_;
};

class EmptySource final : public MergeSource {
 public:
  bool valid() const override { return false; }
  const LeafEntry& entry() const override { raise(ErrorCode::kInvalidArgument, "empty source"); }
  const std::string& key() override { raise(ErrorCode::kInvalidArgument, "empty source"); }
  bool key_known() const override { return false; }
  void next() override {}
};

// Orders the heads of two sources; prefix first, full keys only on a tie.
int compare_heads(MergeSource& a, MergeSource& b) {
  const int c = std::memcmp(a.entry().prefix.data(), b.entry().prefix.data(), kKeyPrefixSize);
  if (c != 0) return c;
  return a.key().compare(b.key());
}

void merge_into(MergeSource& newer, MergeSource& older, LevelBuilder& out, bool purge_tombstones) {
  auto emit = [&](MergeSource& s, bool key_resolved) {
    const LeafEntry& e = s.entry();
    if (purge_tombstones && e.tombstone) return;
    std::optional<std::string> key;
    if (s.key_known() || key_resolved) key = s.key();
    out.add(e, std::move(key));
  };
  while (newer.valid() || older.valid()) {
    if (!older.valid()) {
      emit(newer, false);
      newer.next();
    } else if (!newer.valid()) {
      emit(older, false);
      older.next();
    } else {
      const bool tie = std::memcmp(newer.entry().prefix.data(), older.entry().prefix.data(), kKeyPrefixSize) == 0;
      const int c = compare_heads(newer, older);
      if (c < 0) {
        emit(newer, tie);
        newer.next();
      } else if (c > 0) {
        emit(older, tie);
        older.next();
      } else {
        emit(newer, tie);
        newer.next();
        older.next();
      }
    }
  }
}

std::unique_ptr<MergeSource> level_source(const LevelPtr& level, const KeyResolver& resolve) {
  if (!level) return std::make_unique<EmptySource>();
  return std::make_unique<LevelSource>(level, resolve);
}

}  // namespace

Engine::Engine(Device& device, EngineOptions options, EngineHooks hooks)
    : device_(device), options_(options), hooks_(std::move(hooks)), log_(device) {
  options_.validate();
}

Engine::~Engine() = default;

void Engine::set_hooks(EngineHooks hooks) {
  std::lock_guard wlock(writer_mu_);
  hooks_ = std::move(hooks);
}

KeyResolver Engine::resolver() const {
  return [this](DeviceOffset ptr) { return log_.read_key(ptr); };
}

uint64_t Engine::level_capacity(uint32_t level) const {
  uint64_t cap = options_.l0_capacity_keys;
  for (uint32_t i = 0; i < level; ++i) cap *= options_.growth_factor;
  return cap;
}

PutResult Engine::put(std::string_view key, std::string_view value) { return write(key, value, false); }

PutResult Engine::del(std::string_view key) { return write(key, {}, true); }

PutResult Engine::write(std::string_view key, std::string_view value, bool tombstone) {
  std::lock_guard wlock(writer_mu_);
  ValueLog::Appended a = log_.append(key, value, tombstone);
  if (a.sealed && hooks_.on_log_sealed) hooks_.on_log_sealed(*a.sealed);
  if (hooks_.on_record_appended) hooks_.on_record_appended(a.ptr, a.record);
  insert_l0_locked(std::string(key), L0Value{a.ptr, tombstone}, log_.end_position());
  return PutResult{a.ptr, static_cast<uint32_t>(a.record.size())};
}

void Engine::insert_l0_locked(std::string key, L0Value v, LogPosition next_position) {
  size_t size;
  {
    std::lock_guard lock(state_mu_);
    l0_.insert_or_assign(std::move(key), v);
    size = l0_.size();
    stats_.l0_entries = size;
    stats_.l0_peak_entries = std::max<uint64_t>(stats_.l0_peak_entries, size);
  }
  if (size >= options_.l0_capacity_keys) {
    if (options_.seal_log_on_l0_flush) {
      if (auto sealed = log_.seal(); sealed && hooks_.on_log_sealed) hooks_.on_log_sealed(*sealed);
    }
    flush_l0_locked(next_position);
    cascade_locked();
  }
}

std::optional<std::string> Engine::get(std::string_view key) const {
  std::optional<L0Value> hit;
  std::vector<LevelPtr> version;
  {
    std::lock_guard lock(state_mu_);
    if (auto it = l0_.find(key); it != l0_.end()) {
      hit = it->second;
    } else if (imm_l0_) {
      if (auto it2 = imm_l0_->find(key); it2 != imm_l0_->end()) hit = it2->second;
    }
    if (!hit) version = levels_;
  }
  if (hit) {
    if (hit->tombstone) return std::nullopt;
    return log_.read(hit->ptr).value;
  }
  const KeyResolver resolve = resolver();
  for (size_t i = 1; i < version.size(); ++i) {
    if (!version[i]) continue;
    if (auto e = version[i]->find(key, resolve)) {
      if (e->tombstone) return std::nullopt;
      return log_.read(e->value_loc).value;
    }
  }
  return std::nullopt;
}

std::vector<std::pair<std::string, std::string>> Engine::scan(std::string_view start_key, size_t count) const {
  std::vector<std::pair<std::string, std::string>> out;
  if (count == 0) return out;

  // Memory components are copied up to the count-th live key; nothing beyond
  // it can make the result.
  auto copy_range = [&](const L0Map& m) {
    std::vector<std::pair<std::string, L0Value>> items;
    size_t live = 0;
    for (auto it = m.lower_bound(start_key); it != m.end() && live < count; ++it) {
      items.emplace_back(it->first, it->second);
      if (!it->second.tombstone) ++live;
    }
    return items;
  };

  struct Cursor {
    std::vector<std::pair<std::string, L0Value>> mem;
    size_t pos = 0;
    std::unique_ptr<LevelIterator> level;

    bool valid() const { return level ? level->valid() : pos < mem.size(); }
    const std::string& key() { return level ? level->key() : mem[pos].first; }
    DeviceOffset ptr() const { return level ? level->entry().value_loc : mem[pos].second.ptr; }
    bool tombstone() const { return level ? level->entry().tombstone : mem[pos].second.tombstone; }
    void next() {
      if (level) {
        level->next();
      } else {
        ++pos;
      }
    }
  };

  std::vector<Cursor> cursors;  // newest first
  std::vector<LevelPtr> version;
  {
    std::lock_guard lock(state_mu_);
    cursors.push_back(Cursor{copy_range(l0_), 0, nullptr});
    if (imm_l0_) cursors.push_back(Cursor{copy_range(*imm_l0_), 0, nullptr});
    version = levels_;
  }
  const KeyResolver resolve = resolver();
  for (size_t i = 1; i < version.size(); ++i) {
    if (!version[i]) continue;
    Cursor c;
    c.level = std::make_unique<LevelIterator>(version[i], resolve);
    c.level->seek(start_key);
    cursors.push_back(std::move(c));
  }

  while (out.size() < count) {
    int winner = -1;
    for (size_t i = 0; i < cursors.size(); ++i) {
      if (!cursors[i].valid()) continue;
      if (winner < 0 || cursors[i].key() < cursors[static_cast<size_t>(winner)].key()) winner = static_cast<int>(i);
    }
    if (winner < 0) break;
    Cursor& w = cursors[static_cast<size_t>(winner)];
    const std::string key = w.key();
    const bool tombstone = w.tombstone();
    const DeviceOffset ptr = w.ptr();
    for (auto& c : cursors) {
      if (c.valid() && c.key() == key) c.next();
    }
    if (!tombstone) out.emplace_back(key, log_.read(ptr).value);
  }
  return out;
}

bool Engine::is_last_populated(uint32_t level) const {
  for (size_t i = level + 1; i < levels_.size(); ++i) {
    if (levels_[i]) return false;
  }
  return true;
}

CompactionJob Engine::flush_l0() {
  std::lock_guard wlock(writer_mu_);
  LogPosition covered = log_.end_position();
  if (options_.seal_log_on_l0_flush) {
    if (auto sealed = log_.seal(); sealed && hooks_.on_log_sealed) hooks_.on_log_sealed(*sealed);
    covered = log_.end_position();
  }
  CompactionJob job = flush_l0_locked(covered);
  cascade_locked();
  return job;
}

CompactionJob Engine::flush_l0_locked(LogPosition covered) {
  std::shared_ptr<const L0Map> frozen;
  LevelPtr l1;
  {
    std::lock_guard lock(state_mu_);
    frozen = std::make_shared<const L0Map>(std::move(l0_));
    l0_.clear();
    imm_l0_ = frozen;
    stats_.l0_entries = 0;
    if (levels_.size() < 2) levels_.resize(2);
    l1 = levels_[1];
  }

  CompactionJob job;
  job.source_level = 0;
  job.target_level = 1;
  job.covered = covered;
  if (frozen->empty()) {
    std::lock_guard lock(state_mu_);
    imm_l0_.reset();
    covered_ = std::max(covered_, covered);
    job.level = l1;
    return job;
  }

  const KeyResolver resolve = resolver();
  LevelBuilder builder(device_, 1, resolve, options_.retain_level_images);
  MapSource newer(*frozen);
  auto older = level_source(l1, resolve);
  merge_into(newer, *older, builder, is_last_populated(1));
  BuiltLevel built = builder.finish();

  job.level = built.level;
  job.images = std::move(built.images);
  {
    std::lock_guard lock(state_mu_);
    levels_[1] = built.level;
    imm_l0_.reset();
    covered_ = std::max(covered_, covered);
    ++stats_.compactions;
    ++stats_.l0_flushes;
  }
  if (hooks_.on_compaction) hooks_.on_compaction(job);
  return job;
}

std::optional<CompactionJob> Engine::compact(uint32_t level) {
  std::lock_guard wlock(writer_mu_);
  return compact_locked(level);
}

std::optional<CompactionJob> Engine::compact_locked(uint32_t level) {
  if (level == 0) raise(ErrorCode::kInvalidArgument, "use flush_l0 for L0");
  LevelPtr src, dst;
  {
    std::lock_guard lock(state_mu_);
    if (level >= levels_.size() || !levels_[level]) return std::nullopt;
    if (levels_.size() < level + 2) levels_.resize(level + 2);
    src = levels_[level];
    dst = levels_[level + 1];
  }
  const KeyResolver resolve = resolver();
  LevelBuilder builder(device_, level + 1, resolve, options_.retain_level_images);
  LevelSource newer(src, resolve);
  auto older = level_source(dst, resolve);
  merge_into(newer, *older, builder, is_last_populated(level + 1));
  BuiltLevel built = builder.finish();

  CompactionJob job;
  job.source_level = level;
  job.target_level = level + 1;
  job.level = built.level;
  job.images = std::move(built.images);
  {
    std::lock_guard lock(state_mu_);
    levels_[level + 1] = built.level;
    levels_[level] = nullptr;
    job.covered = covered_;
    ++stats_.compactions;
  }
  src.reset();
  dst.reset();
  if (hooks_.on_compaction) hooks_.on_compaction(job);
  return job;
}

void Engine::cascade_locked() {
  for (uint32_t i = 1;; ++i) {
    LevelPtr lvl;
    {
      std::lock_guard lock(state_mu_);
      if (i >= levels_.size()) return;
      lvl = levels_[i];
    }
    if (lvl && lvl->entry_count() > level_capacity(i)) compact_locked(i);
  }
}

DeviceOffset Engine::log_start_segment() {
  std::lock_guard wlock(writer_mu_);
  return log_.start_segment();
}

void Engine::log_append_raw(ByteView bytes, DeviceOffset at) {
  std::lock_guard wlock(writer_mu_);
  log_.append_raw(bytes, at);
}

std::optional<SealedSegment> Engine::log_seal() {
  std::lock_guard wlock(writer_mu_);
  return log_.seal();
}

uint64_t Engine::ingest_log_segment(uint64_t index) {
  std::lock_guard wlock(writer_mu_);
  uint64_t n = 0;
  log_.for_each_record(
      LogPosition{index, 0},
      [&](DeviceOffset ptr, LogPosition next, const LogRecord& rec) {
        insert_l0_locked(rec.key, L0Value{ptr, rec.tombstone}, next);
        ++n;
      },
      index + 1);
  std::lock_guard lock(state_mu_);
  stats_.ingested_records += n;
  return n;
}

uint64_t Engine::replay_log() {
  std::lock_guard wlock(writer_mu_);
  LogPosition from;
  {
    std::lock_guard lock(state_mu_);
    l0_.clear();
    stats_.l0_entries = 0;
    from = covered_;
  }
  const uint64_t bytes = log_.bytes_after(from);
  log_.for_each_record(from, [&](DeviceOffset ptr, LogPosition next, const LogRecord& rec) {
    insert_l0_locked(rec.key, L0Value{ptr, rec.tombstone}, next);
  });
  return bytes;
}

void Engine::install_level(uint32_t source_level, uint32_t target_level, LevelPtr level, LogPosition covered) {
  if (target_level == 0) raise(ErrorCode::kInvalidArgument, "cannot install L0");
  std::lock_guard wlock(writer_mu_);
  std::lock_guard lock(state_mu_);
  if (levels_.size() < target_level + 1u) levels_.resize(target_level + 1u);
  levels_[target_level] = std::move(level);
  if (source_level >= 1 && source_level < levels_.size()) levels_[source_level] = nullptr;
  covered_ = std::max(covered_, covered);
  ++stats_.installed_levels;
}

LogPosition Engine::covered_position() const {
  std::lock_guard lock(state_mu_);
  return covered_;
}

std::vector<LevelPtr> Engine::levels() const {
  std::lock_guard lock(state_mu_);
  return levels_;
}

EngineStats Engine::stats() const {
  std::lock_guard lock(state_mu_);
  EngineStats s = stats_;
  s.level_entries.assign(levels_.size(), 0);
  for (size_t i = 1; i < levels_.size(); ++i) {
    if (levels_[i]) s.level_entries[i] = levels_[i]->entry_count();
  }
  return s;
}

}  // namespace replkv::lsm
