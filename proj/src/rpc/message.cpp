#include "replkv/rpc/message.hpp"

#include <algorithm>

#include <fmt/format.h>

namespace replkv::rpc {

const char* op_name(Op op) {
  switch (op) {
    case Op::kPing: return "PING";
    case Op::kPut: return "PUT";
    case Op::kGet: return "GET";
    case Op::kDelete: return "DELETE";
    case Op::kScan: return "SCAN";
    case Op::kFlushLog: return "FLUSH_LOG";
    case Op::kIndexBegin: return "INDEX_BEGIN";
    case Op::kIndexSegment: return "INDEX_SEGMENT";
    case Op::kIndexFinalize: return "INDEX_FINALIZE";
    case Op::kResetRendezvous: return "RESET_RENDEZVOUS";
    case Op::kOpenRegion: return "OPEN_REGION";
    case Op::kContinue: return "CONTINUE";
    case Op::kReplBufferInfo: return "REPL_BUFFER_INFO";
    case Op::kLogCopy: return "LOG_COPY";
    case Op::kPromote: return "PROMOTE";
    case Op::kCloseRegion: return "CLOSE_REGION";
    case Op::kRegionStats: return "REGION_STATS";
    case Op::kCoordinator: return "COORDINATOR";
    case Op::kServerStats: return "SERVER_STATS";
    case Op::kIndexAbort: return "INDEX_ABORT";
    case Op::kFlushRegion: return "FLUSH_REGION";
  }
  return "UNKNOWN";
}

void encode_header(const MessageHeader& h, MutableByteView out) {
  if (out.size() < kHeaderSize) raise(ErrorCode::kInvalidArgument, "header buffer too small");
  std::fill_n(out.begin(), kHeaderSize, uint8_t{0});
  uint8_t* p = out.data();
  store_le<uint32_t>(p, h.payload_len);
  p[4] = static_cast<uint8_t>(h.op);
  p[5] = h.flags;
  store_le<uint64_t>(p + 8, h.reply_offset);
  store_le<uint32_t>(p + 16, h.reply_len);
  store_le<uint64_t>(p + 20, h.req_id);
  p[kReceiveFieldOffset] = kReceiveMagic;
}

MessageHeader decode_header(ByteView in) {
  if (in.size() < kHeaderSize) raise(ErrorCode::kProtocol, "truncated header");
  MessageHeader h;
  const uint8_t* p = in.data();
  h.payload_len = load_le<uint32_t>(p);
  h.op = static_cast<Op>(p[4]);
  h.flags = p[5];
  h.reply_offset = load_le<uint64_t>(p + 8);
  h.reply_len = load_le<uint32_t>(p + 16);
  h.req_id = load_le<uint64_t>(p + 20);
  return h;
}

Bytes encode_message(const MessageHeader& h, ByteView payload) {
  MessageHeader hdr = h;
  hdr.payload_len = static_cast<uint32_t>(payload.size());
  Bytes out(message_size(payload.size()), 0);
  encode_header(hdr, out);
  std::copy(payload.begin(), payload.end(), out.begin() + kHeaderSize);
  out[kHeaderSize + payload.size()] = kTailMarker;
  return out;
}

Bytes encode_error(ErrorCode code, std::string_view message) {
  ByteWriter w;
  w.put<uint16_t>(static_cast<uint16_t>(code));
  w.put_bytes(as_bytes(message));
  return w.take();
}

void raise_error_payload(ByteView payload) {
  if (payload.size() < 2) raise(ErrorCode::kProtocol, "malformed error reply");
  const auto code = static_cast<ErrorCode>(load_le<uint16_t>(payload.data()));
  raise(code, to_string(payload.subspan(2)));
}

// --- Receiver -------------------------------------------------------------------

Receiver::Receiver(std::shared_ptr<transport::RegisteredBuffer> buffer) : buffer_(std::move(buffer)) {
  if (buffer_->size() % kMessageSegment != 0 || buffer_->size() < kMessageSegment) {
    raise(ErrorCode::kInvalidArgument,
          fmt::format("buffer of {} bytes is not a multiple of {}", buffer_->size(), kMessageSegment));
  }
}

void Receiver::consume(uint64_t at, size_t size, size_t tail_at) {
  for (uint64_t off = at; off < at + size; off += kMessageSegment) buffer_->zero(off + kReceiveFieldOffset, 1);
  buffer_->zero(tail_at, 1);
}

std::optional<ReceivedMessage> Receiver::poll() {
  for (;;) {
    const uint64_t rv = rendezvous_;
    if (buffer_->byte_at(rv + kReceiveFieldOffset) != kReceiveMagic) return std::nullopt;
    uint8_t raw[kHeaderSize];
    buffer_->read(rv, MutableByteView(raw, kHeaderSize));
    const MessageHeader h = decode_header(ByteView(raw, kHeaderSize));
    const size_t total = message_size(h.payload_len);
    if (rv + total > buffer_->size()) {
      raise(ErrorCode::kProtocol, fmt::format("message of {} bytes at {} overruns the buffer", total, rv));
    }
    const size_t tail_at = rv + kHeaderSize + h.payload_len;
    if (buffer_->byte_at(tail_at) != kTailMarker) return std::nullopt;

    ReceivedMessage m;
    m.header = h;
    m.offset = rv;
    m.size = total;
    m.payload = buffer_->read(rv + kHeaderSize, h.payload_len);
    consume(rv, total, tail_at);
    if (h.op == Op::kResetRendezvous) {
      rendezvous_ = 0;
      ++resets_;
      continue;
    }
    rendezvous_ = rv + total == buffer_->size() ? 0 : rv + total;
    ++received_;
    return m;
  }
}

std::optional<ReceivedMessage> poll_slot(transport::RegisteredBuffer& buffer, uint64_t offset, size_t slot_len) {
  if (buffer.byte_at(offset + kReceiveFieldOffset) != kReceiveMagic) return std::nullopt;
  uint8_t raw[kHeaderSize];
  buffer.read(offset, MutableByteView(raw, kHeaderSize));
  const MessageHeader h = decode_header(ByteView(raw, kHeaderSize));
  if (kHeaderSize + h.payload_len + kTailSize > slot_len) {
    raise(ErrorCode::kProtocol, fmt::format("reply of {} bytes overruns its {} byte slot", h.payload_len, slot_len));
  }
  const size_t tail_at = offset + kHeaderSize + h.payload_len;
  if (buffer.byte_at(tail_at) != kTailMarker) return std::nullopt;
  ReceivedMessage m;
  m.header = h;
  m.offset = offset;
  m.size = message_size(h.payload_len);
  m.payload = buffer.read(offset + kHeaderSize, h.payload_len);
  for (uint64_t off = offset; off < offset + m.size; off += kMessageSegment) buffer.zero(off + kReceiveFieldOffset, 1);
  buffer.zero(tail_at, 1);
  return m;
}

// --- RingAllocator ----------------------------------------------------------------

RingAllocator::RingAllocator(uint64_t size) : size_(size) {}

uint64_t RingAllocator::in_use() const {
  uint64_t n = 0;
  for (const Entry& e : entries_) n += e.size;
  return n;
}

std::optional<RingAllocator::Placement> RingAllocator::allocate(uint64_t n) {
  if (n == 0 || n > size_) return std::nullopt;
  Placement p;
  p.size = n;
  if (entries_.empty()) {
    if (n <= size_ - tail_) {
      p.offset = tail_;
    } else if (n <= tail_) {
      p.skipped_at = tail_;
      p.skipped_len = size_ - tail_;
      p.offset = 0;
    } else {
      return std::nullopt;  // would overlap the reset marker at the tail
    }
  } else {
    const uint64_t head = entries_.front().offset;
    if (tail_ > head) {
      if (n <= size_ - tail_) {
        p.offset = tail_;
      } else if (n <= head) {
        p.skipped_at = tail_;
        p.skipped_len = size_ - tail_;
        p.offset = 0;
      } else {
        return std::nullopt;
      }
    } else if (tail_ < head) {
      if (n > head - tail_) return std::nullopt;
      p.offset = tail_;
    } else {
      return std::nullopt;  // full
    }
  }
  if (p.skipped_at) entries_.push_back({*p.skipped_at, p.skipped_len, false});
  entries_.push_back({p.offset, n, false});
  tail_ = p.offset + n == size_ ? 0 : p.offset + n;
  return p;
}

void RingAllocator::release(uint64_t offset) {
  auto it = std::find_if(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.offset == offset && !e.released; });
  if (it == entries_.end()) raise(ErrorCode::kInvalidArgument, fmt::format("no live reservation at {}", offset));
  it->released = true;
  size_t drop = 0;
  while (drop < entries_.size() && entries_[drop].released) ++drop;
  entries_.erase(entries_.begin(), entries_.begin() + static_cast<ptrdiff_t>(drop));
}

}  // namespace replkv::rpc
