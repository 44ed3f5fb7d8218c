#include <fmt/format.h>

#include "replkv/replication.hpp"

namespace replkv::replication {

const char* mode_name(Mode mode) {
  switch (mode) {
    case Mode::kNone: return "none";
    case Mode::kSendIndex: return "send_index";
    case Mode::kBuildIndex: return "build_index";
  }
  return "unknown";
}

Mode parse_mode(std::string_view name) {
  if (name == "none") return Mode::kNone;
  if (name == "send_index" || name == "send") return Mode::kSendIndex;
  if (name == "build_index" || name == "build") return Mode::kBuildIndex;
  raise(ErrorCode::kConfig, fmt::format("unknown replication mode '{}'", name));
}

lsm::EngineOptions engine_options(Mode mode, const lsm::EngineOptions& base) {
  lsm::EngineOptions o = base;
  switch (mode) {
    case Mode::kNone:
      break;
    case Mode::kSendIndex:
      o.retain_level_images = true;
      o.seal_log_on_l0_flush = true;
      break;
    case Mode::kBuildIndex:
      o.l0_capacity_keys = std::max<uint64_t>(1, base.l0_capacity_keys / 2);
      break;
  }
  return o;
}

Bytes FlushLogRequest::encode() const {
  ByteWriter w;
  w.put<uint32_t>(region);
  w.put<uint64_t>(primary_start.value);
  w.put<uint64_t>(used);
  w.put<uint64_t>(segment_index);
  w.put<uint8_t>(flags);
  return w.take();
}

FlushLogRequest FlushLogRequest::decode(ByteView payload) {
  ByteReader r(payload);
  FlushLogRequest q;
  q.region = r.get<uint32_t>();
  q.primary_start = DeviceOffset{r.get<uint64_t>()};
  q.used = r.get<uint64_t>();
  q.segment_index = r.get<uint64_t>();
  q.flags = r.get<uint8_t>();
  return q;
}

Bytes IndexSegmentRequest::encode() const {
  ByteWriter w;
  w.put<uint32_t>(region);
  w.put<uint32_t>(seq);
  w.put<uint64_t>(length);
  return w.take();
}

IndexSegmentRequest IndexSegmentRequest::decode(ByteView payload) {
  ByteReader r(payload);
  IndexSegmentRequest q;
  q.region = r.get<uint32_t>();
  q.seq = r.get<uint32_t>();
  q.length = r.get<uint64_t>();
  return q;
}

uint32_t payload_region(ByteView payload) {
  if (payload.size() < 4) raise(ErrorCode::kProtocol, "payload too short for a region id");
  return load_le<uint32_t>(payload.data());
}

bool is_replication_op(rpc::Op op) {
  switch (op) {
    case rpc::Op::kReplBufferInfo:
    case rpc::Op::kFlushLog:
    case rpc::Op::kIndexBegin:
    case rpc::Op::kIndexSegment:
    case rpc::Op::kIndexFinalize:
    case rpc::Op::kIndexAbort:
      return true;
    default:
      return false;
  }
}

}  // namespace replkv::replication
