#pragma once

// Messages in the paired circular buffers.
//
// Header (32 B):
//   [payload_len:u32][op:u8][flags:u8][reserved:2][reply_offset:u64]
//   [reply_len:u32][req_id:u64][pad:3][receive_field:u8]
// followed by the payload and a one-byte tail marker, zero padded to a
// multiple of kMessageSegment. A message can only start on a segment
// boundary, so the receive field of the next message is always at some
// boundary + 31.

#include <cstdint>
#include <optional>
#include <string>

#include "replkv/common.hpp"
#include "replkv/transport.hpp"

namespace replkv::rpc {

constexpr size_t kMessageSegment = 128;
constexpr size_t kHeaderSize = 32;
constexpr size_t kReceiveFieldOffset = kHeaderSize - 1;
constexpr uint8_t kReceiveMagic = 0xC5;
constexpr uint8_t kTailMarker = 0xC5;
constexpr size_t kTailSize = 1;

constexpr size_t kDefaultClientBuffer = 256 * 1024;
constexpr size_t kMinClientBuffer = 16 * 1024;

enum class Op : uint8_t {
  kPing = 0,
  kPut = 1,
  kGet = 2,
  kDelete = 3,
  kScan = 4,
  kFlushLog = 5,
  kIndexBegin = 6,
  kIndexSegment = 7,
  kIndexFinalize = 8,
  kResetRendezvous = 9,
  kOpenRegion = 10,
  kContinue = 11,
  kReplBufferInfo = 12,
  kLogCopy = 13,
  kPromote = 14,
  kCloseRegion = 15,
  kRegionStats = 16,
  kCoordinator = 17,
  kServerStats = 18,
  kIndexAbort = 19,
  kFlushRegion = 20,
};

const char* op_name(Op op);

namespace flags {
constexpr uint8_t kContinuation = 0x01;  // more reply data to fetch
constexpr uint8_t kError = 0x02;         // payload = [code:u16][message]
}  // namespace flags

struct MessageHeader {
  uint32_t payload_len = 0;
  Op op = Op::kPing;
  uint8_t flags = 0;
  uint64_t reply_offset = 0;
  uint32_t reply_len = 0;
  uint64_t req_id = 0;
};

/// Header + payload + tail, rounded up to the message segment size.
inline size_t message_size(size_t payload_len) {
  return round_up(kHeaderSize + payload_len + kTailSize, kMessageSegment);
}

/// Largest payload a message of `total` bytes can carry.
inline size_t payload_capacity(size_t total) {
  return total < kHeaderSize + kTailSize ? 0 : total - kHeaderSize - kTailSize;
}

void encode_header(const MessageHeader& h, MutableByteView out);
MessageHeader decode_header(ByteView in);

/// Full on-wire image with the receive field and tail marker set.
Bytes encode_message(const MessageHeader& h, ByteView payload);

Bytes encode_error(ErrorCode code, std::string_view message);
[[noreturn]] void raise_error_payload(ByteView payload);

struct ReceivedMessage {
  MessageHeader header;
  Bytes payload;
  uint64_t offset = 0;  // where the message started
  size_t size = 0;      // quantized footprint
};

/// Server-side receive path over one circular buffer: detects a message at
/// the rendezvous point, waits for its tail, consumes it, zeroes the
/// rendezvous points it covered and moves on. Reset messages are handled
/// here and never surface.
class Receiver {
 public:
  explicit Receiver(std::shared_ptr<transport::RegisteredBuffer> buffer);

  std::optional<ReceivedMessage> poll();

  uint64_t rendezvous() const { return rendezvous_; }
  uint64_t resets() const { return resets_; }
  uint64_t received() const { return received_; }
  const std::shared_ptr<transport::RegisteredBuffer>& buffer() const { return buffer_; }

 private:
  void consume(uint64_t at, size_t size, size_t tail_at);

  std::shared_ptr<transport::RegisteredBuffer> buffer_;
  uint64_t rendezvous_ = 0;
  uint64_t resets_ = 0;
  uint64_t received_ = 0;
};

/// Polls a reply slot the caller reserved in its own buffer. Returns the
/// message once header and tail are both present, and zeroes the slot's
/// rendezvous points and tail.
std::optional<ReceivedMessage> poll_slot(transport::RegisteredBuffer& buffer, uint64_t offset, size_t slot_len);

/// Space reservations in a circular buffer, released in any order.
/// Allocation never splits: when the tail cannot hold a request, the tail
/// remainder becomes a skip region and allocation restarts at offset 0.
class RingAllocator {
 public:
  explicit RingAllocator(uint64_t size);

  struct Placement {
    uint64_t offset = 0;
    uint64_t size = 0;
    std::optional<uint64_t> skipped_at;  // start of a tail remainder left unused
    uint64_t skipped_len = 0;
  };

  /// Nothing if the space is not available right now.
  std::optional<Placement> allocate(uint64_t size);
  void release(uint64_t offset);

  uint64_t size() const { return size_; }
  uint64_t tail() const { return tail_; }
  uint64_t in_use() const;
  bool empty() const { return entries_.empty(); }

 private:
  struct Entry {
    uint64_t offset;
    uint64_t size;
    bool released;
  };

  uint64_t size_;
  uint64_t tail_ = 0;
  std::vector<Entry> entries_;  // allocation order; front is the oldest
};

}  // namespace replkv::rpc
