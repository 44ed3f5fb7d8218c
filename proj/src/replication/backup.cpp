#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "replkv/replication.hpp"

namespace replkv::replication {

BackupRegion::BackupRegion(uint32_t region, Device& device, Mode mode, const lsm::EngineOptions& base)
    : region_(region),
      device_(device),
      mode_(mode),
      engine_(std::make_unique<lsm::Engine>(device, engine_options(mode, base))) {
  if (mode == Mode::kNone) raise(ErrorCode::kConfig, "a region without replication has no backups");
}

BackupRegion::~BackupRegion() = default;

Bytes BackupRegion::handle(const rpc::Request& req) {
  if (req.conn == nullptr) raise(ErrorCode::kProtocol, "replication request without a connection");
  switch (req.op) {
    case rpc::Op::kReplBufferInfo: {
      auto buf = attach(*req.conn);
      ByteWriter w;
      w.put<uint32_t>(buf->id());
      w.put<uint64_t>(buf->size());
      return w.take();
    }
    case rpc::Op::kFlushLog:
      flush_log(FlushLogRequest::decode(req.payload));
      return {};
    case rpc::Op::kIndexBegin: {
      ByteReader r(req.payload);
      r.get<uint32_t>();
      const transport::BufferId id = index_begin(*req.conn, r.get<uint32_t>());
      ByteWriter w;
      w.put<uint32_t>(id);
      return w.take();
    }
    case rpc::Op::kIndexSegment:
      index_segment(IndexSegmentRequest::decode(req.payload));
      return {};
    case rpc::Op::kIndexFinalize: {
      if (req.payload.size() != 4 + kManifestSize) raise(ErrorCode::kProtocol, "bad INDEX_FINALIZE payload");
      const DeviceOffset root = index_finalize(CompactionManifest::decode(ByteView(req.payload).subspan(4)));
      release_index_buffer(*req.conn);
      ByteWriter w;
      w.put<uint64_t>(root.value);
      return w.take();
    }
    case rpc::Op::kIndexAbort:
      index_abort();
      release_index_buffer(*req.conn);
      return {};
    default:
      raise(ErrorCode::kProtocol, fmt::format("{} is not a replication op", rpc::op_name(req.op)));
  }
}

std::shared_ptr<transport::RegisteredBuffer> BackupRegion::attach(transport::Connection& conn) {
  std::lock_guard lock(mu_);
  if (!engine_) raise(ErrorCode::kInvalidArgument, "region was promoted");
  buffer_ = conn.register_buffer(device_.segment_size());
  return buffer_;
}

void BackupRegion::flush_log(const FlushLogRequest& req) {
  std::lock_guard lock(mu_);
  if (!engine_) raise(ErrorCode::kInvalidArgument, "region was promoted");
  if (req.flags & flush_flags::kCatchUpDone) {
    if (mode_ == Mode::kBuildIndex) engine_->replay_log();
    return;
  }
  if (!buffer_) raise(ErrorCode::kProtocol, "FLUSH_LOG before the replication buffer exists");
  if (req.used > buffer_->size()) raise(ErrorCode::kProtocol, "FLUSH_LOG longer than the buffer");
  if (req.used == 0) return;
  const uint64_t expected = engine_->log().segment_count();
  if (req.segment_index != expected) {
    raise(ErrorCode::kProtocol,
          fmt::format("region {}: flush of primary segment #{} but the local log has {} segments", region_,
                      req.segment_index, expected));
  }
  const Bytes bytes = buffer_->read(0, req.used);
  const DeviceOffset local = engine_->log_start_segment();
  engine_->log_append_raw(bytes, local);
  // Ingest while the segment is still the in-memory tail.
  if (mode_ == Mode::kBuildIndex && !(req.flags & flush_flags::kCatchUp)) {
    stats_.ingested_records += engine_->ingest_log_segment(req.segment_index);
  }
  engine_->log_seal();
  log_map_.insert(req.primary_start, local);
  buffer_->zero(0, req.used);
  ++stats_.flushed_segments;
  stats_.flushed_bytes += req.used;
}

transport::BufferId BackupRegion::index_begin(transport::Connection& conn, uint32_t segment_count) {
  std::lock_guard lock(mu_);
  if (!engine_) raise(ErrorCode::kInvalidArgument, "region was promoted");
  if (transfer_) {
    transfer_.reset();
    ++stats_.aborted_transfers;
  }
  if (index_buffer_ && index_conn_ == &conn) conn.deregister_buffer(index_buffer_->id());
  index_buffer_ = conn.register_buffer(kSerializedSegmentHeaderSize + device_.segment_size());
  index_conn_ = &conn;
  transfer_ = std::make_unique<IndexTransfer>(*engine_, log_map_);
  (void)segment_count;
  return index_buffer_->id();
}

void BackupRegion::index_segment(const IndexSegmentRequest& req) {
  std::lock_guard lock(mu_);
  if (!transfer_) raise(ErrorCode::kProtocol, "INDEX_SEGMENT without INDEX_BEGIN");
  if (req.length < kSerializedSegmentHeaderSize || req.length > index_buffer_->size()) {
    raise(ErrorCode::kProtocol, fmt::format("bad serialized segment length {}", req.length));
  }
  Bytes wire(index_buffer_->size(), 0);
  index_buffer_->read(0, MutableByteView(wire.data(), req.length));
  const SerializedSegment seg = SerializedSegment::decode(wire, device_.segment_size());
  if (seg.seq != req.seq) raise(ErrorCode::kProtocol, fmt::format("segment seq {} != {}", seg.seq, req.seq));
  transfer_->apply(seg);
  ++stats_.shipped_segments;
}

DeviceOffset BackupRegion::index_finalize(const CompactionManifest& manifest) {
  std::lock_guard lock(mu_);
  if (!transfer_) raise(ErrorCode::kProtocol, "INDEX_FINALIZE without INDEX_BEGIN");
  const DeviceOffset root = transfer_->finalize(manifest);
  transfer_.reset();
  ++stats_.installed_levels;
  return root;
}

void BackupRegion::index_abort() {
  std::lock_guard lock(mu_);
  if (transfer_) {
    transfer_.reset();
    ++stats_.aborted_transfers;
  }
}

void BackupRegion::release_index_buffer(transport::Connection& conn) {
  std::lock_guard lock(mu_);
  if (index_buffer_ && index_conn_ == &conn) conn.deregister_buffer(index_buffer_->id());
  index_buffer_.reset();
  index_conn_ = nullptr;
}

uint64_t BackupRegion::buffer_fill_locked() const {
  if (!buffer_) return 0;
  const uint64_t size = buffer_->size();
  uint64_t pos = 0;
  uint8_t hdr[lsm::kRecordHeaderSize];
  while (pos + lsm::kRecordHeaderSize <= size) {
    buffer_->read(pos, MutableByteView(hdr, sizeof(hdr)));
    if (load_le<uint32_t>(hdr) == 0) break;
    lsm::RecordHeader h;
    try {
      h = lsm::decode_record_header(ByteView(hdr, sizeof(hdr)), pos, size);
    } catch (const Error&) {
      break;
    }
    if (pos + h.total() > size) break;
    pos += h.total();
  }
  return pos;
}

uint64_t BackupRegion::buffer_fill() const {
  std::lock_guard lock(mu_);
  return buffer_fill_locked();
}

std::shared_ptr<transport::RegisteredBuffer> BackupRegion::buffer() const {
  std::lock_guard lock(mu_);
  return buffer_;
}

BackupRegion::Promotion BackupRegion::promote() {
  std::lock_guard lock(mu_);
  if (!engine_) raise(ErrorCode::kInvalidArgument, "region was promoted");
  Promotion p;
  transfer_.reset();
  p.tail_bytes = buffer_fill_locked();
  if (p.tail_bytes > 0) {
    const Bytes tail = buffer_->read(0, p.tail_bytes);
    const DeviceOffset at = engine_->log_start_segment();
    engine_->log_append_raw(tail, at);
  }
  p.replayed_bytes = engine_->replay_log();
  spdlog::info("region {}: promoted, {} tail bytes, {} log bytes replayed", region_, p.tail_bytes,
               p.replayed_bytes);
  p.engine = std::move(engine_);
  buffer_.reset();
  index_buffer_.reset();
  return p;
}

BackupStats BackupRegion::stats() const {
  std::lock_guard lock(mu_);
  BackupStats s = stats_;
  if (engine_) {
    const lsm::EngineStats es = engine_->stats();
    s.compactions = es.compactions;
    s.l0_peak_entries = es.l0_peak_entries;
  }
  return s;
}

}  // namespace replkv::replication
