#include <algorithm>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "replkv/replication.hpp"

namespace replkv::replication {

PrimaryRegion::PrimaryRegion(uint32_t region, Device& device, Mode mode, const lsm::EngineOptions& base)
    : region_(region), mode_(mode), engine_(std::make_unique<lsm::Engine>(device, engine_options(mode, base))) {
  install_hooks();
}

PrimaryRegion::PrimaryRegion(uint32_t region, Mode mode, std::unique_ptr<lsm::Engine> engine)
    : region_(region), mode_(mode), engine_(std::move(engine)) {
  install_hooks();
}

PrimaryRegion::~PrimaryRegion() { engine_->set_hooks({}); }

void PrimaryRegion::install_hooks() {
  lsm::EngineHooks hooks;
  hooks.on_record_appended = [this](DeviceOffset ptr, const Bytes& rec) { on_record(ptr, rec); };
  hooks.on_log_sealed = [this](const lsm::SealedSegment& s) { on_sealed(s); };
  if (mode_ == Mode::kSendIndex) hooks.on_compaction = [this](const lsm::CompactionJob& j) { on_compaction(j); };
  engine_->set_hooks(std::move(hooks));
}

void PrimaryRegion::throw_if_degraded_locked() const {
  std::lock_guard lock(links_mu_);
  for (const Link& l : links_) {
    if (l.failed) {
      raise(ErrorCode::kBackupUnreachable,
            fmt::format("region {}: backup server {} is unreachable", region_, l.server_id));
    }
  }
}

void PrimaryRegion::fail(Link& link, const std::exception& e) {
  std::lock_guard lock(links_mu_);
  if (!link.failed) {
    spdlog::warn("region {}: backup server {} failed: {}", region_, link.server_id, e.what());
    link.failed = true;
    ++stats_.backup_failures;
  }
}

void PrimaryRegion::write(std::string_view key, std::string_view value, bool tombstone) {
  std::lock_guard wlock(write_mu_);
  throw_if_degraded_locked();
  if (tombstone) {
    engine_->del(key);
  } else {
    engine_->put(key, value);
  }
  {
    std::lock_guard lock(links_mu_);
    ++stats_.writes;
  }
  throw_if_degraded_locked();
}

void PrimaryRegion::put(std::string_view key, std::string_view value) { write(key, value, false); }

void PrimaryRegion::del(std::string_view key) { write(key, {}, true); }

void PrimaryRegion::flush() {
  std::lock_guard wlock(write_mu_);
  engine_->flush_l0();
  throw_if_degraded_locked();
}

void PrimaryRegion::on_record(DeviceOffset ptr, const Bytes& record) {
  const uint64_t within = engine_->device().within_segment(ptr);
  for (Link& l : links_) {
    if (l.failed) continue;
    try {
      l.client->connection().remote_write(l.buffer, within, record).check();
      std::lock_guard lock(links_mu_);
      ++stats_.replicated_records;
      stats_.replicated_bytes += record.size();
    } catch (const std::exception& e) {
      fail(l, e);
    }
  }
}

void PrimaryRegion::send_flush(Link& link, const FlushLogRequest& req) {
  link.client->call(rpc::Op::kFlushLog, req.encode());
  std::lock_guard lock(links_mu_);
  ++stats_.flushes_sent;
}

void PrimaryRegion::on_sealed(const lsm::SealedSegment& sealed) {
  FlushLogRequest req;
  req.region = region_;
  req.primary_start = sealed.segment.start;
  req.used = sealed.used;
  req.segment_index = sealed.index;
  for (Link& l : links_) {
    if (l.failed) continue;
    try {
      send_flush(l, req);
    } catch (const std::exception& e) {
      fail(l, e);
    }
  }
}

void PrimaryRegion::ship(Link& link, const TransferPlan& plan) {
  rpc::RpcClient& c = *link.client;
  ByteWriter begin;
  begin.put<uint32_t>(region_);
  begin.put<uint32_t>(plan.manifest.segment_count);
  const Bytes reply = c.call(rpc::Op::kIndexBegin, begin.take());
  const auto buffer = ByteReader(reply).get<uint32_t>();
  try {
    for (const SerializedSegment& seg : plan.segments) {
      const Bytes wire = seg.encode();
      const uint64_t length = kSerializedSegmentHeaderSize + used_node_bytes(*seg.payload);
      c.connection().remote_write(buffer, 0, ByteView(wire.data(), length)).check();
      c.call(rpc::Op::kIndexSegment, IndexSegmentRequest{region_, seg.seq, length}.encode());
      std::lock_guard lock(links_mu_);
      ++stats_.shipped_segments;
      stats_.shipped_bytes += length;
    }
    ByteWriter fin;
    fin.put<uint32_t>(region_);
    fin.put_bytes(plan.manifest.encode());
    c.call(rpc::Op::kIndexFinalize, fin.take());
  } catch (const Error&) {
    if (!c.closed()) {
      ByteWriter abort;
      abort.put<uint32_t>(region_);
      try {
        c.call(rpc::Op::kIndexAbort, abort.take());
      } catch (const Error&) {
      }
    }
    throw;
  }
  std::lock_guard lock(links_mu_);
  ++stats_.index_transfers;
}

void PrimaryRegion::on_compaction(const lsm::CompactionJob& job) {
  bool any = false;
  for (const Link& l : links_) any = any || !l.failed;
  if (!any) return;
  const TransferPlan plan = plan_transfer(job, region_, engine_->device());
  for (Link& l : links_) {
    if (l.failed) continue;
    try {
      ship(l, plan);
    } catch (const std::exception& e) {
      fail(l, e);
    }
  }
}

void PrimaryRegion::add_backup(uint32_t server_id, std::shared_ptr<rpc::RpcClient> client) {
  if (mode_ == Mode::kNone) raise(ErrorCode::kConfig, "replication is disabled");
  std::lock_guard wlock(write_mu_);
  for (const Link& l : links_) {
    if (l.server_id == server_id) raise(ErrorCode::kInvalidArgument, fmt::format("server {} is already a backup", server_id));
  }
  ByteWriter info;
  info.put<uint32_t>(region_);
  const Bytes reply = client->call(rpc::Op::kReplBufferInfo, info.take());
  Link link;
  link.server_id = server_id;
  link.client = std::move(client);
  link.buffer = ByteReader(reply).get<uint32_t>();

  // Seal the tail so every record lives in a segment that can be copied;
  // current members flush it as usual.
  if (auto sealed = engine_->log_seal()) on_sealed(*sealed);

  rpc::RpcClient& c = *link.client;
  for (const lsm::SealedSegment& s : engine_->log().segments()) {
    const Bytes bytes = engine_->log().segment_bytes(s.index);
    if (bytes.empty()) continue;
    c.connection().remote_write(link.buffer, 0, bytes).check();
    FlushLogRequest req;
    req.region = region_;
    req.primary_start = s.segment.start;
    req.used = bytes.size();
    req.segment_index = s.index;
    req.flags = flush_flags::kCatchUp;
    send_flush(link, req);
  }
  const lsm::LogPosition covered = engine_->covered_position();
  const std::vector<lsm::LevelPtr> levels = engine_->levels();
  for (uint32_t i = 1; i < levels.size(); ++i) {
    if (!levels[i]) continue;
    lsm::CompactionJob job;
    job.source_level = 0;
    job.target_level = i;
    job.level = levels[i];
    job.covered = covered;
    ship(link, plan_transfer(job, region_, engine_->device()));
  }
  FlushLogRequest done;
  done.region = region_;
  done.flags = flush_flags::kCatchUpDone;
  send_flush(link, done);

  std::lock_guard lock(links_mu_);
  links_.push_back(std::move(link));
  spdlog::info("region {}: server {} joined as backup", region_, server_id);
}

void PrimaryRegion::remove_backup(uint32_t server_id) {
  std::lock_guard wlock(write_mu_);
  std::lock_guard lock(links_mu_);
  std::erase_if(links_, [&](const Link& l) { return l.server_id == server_id; });
}

std::vector<uint32_t> PrimaryRegion::backups() const {
  std::lock_guard lock(links_mu_);
  std::vector<uint32_t> out;
  for (const Link& l : links_) out.push_back(l.server_id);
  return out;
}

std::vector<uint32_t> PrimaryRegion::failed_backups() const {
  std::lock_guard lock(links_mu_);
  std::vector<uint32_t> out;
  for (const Link& l : links_) {
    if (l.failed) out.push_back(l.server_id);
  }
  return out;
}

PrimaryStats PrimaryRegion::stats() const {
  std::lock_guard lock(links_mu_);
  return stats_;
}

}  // namespace replkv::replication
