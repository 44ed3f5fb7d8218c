#include <algorithm>
#include <cstring>

#include <fmt/format.h>

#include "replkv/transport.hpp"

namespace replkv::transport {

// --- Doorbell -------------------------------------------------------------------

uint64_t Doorbell::sequence() const {
  std::lock_guard lock(mu_);
  return seq_;
}

void Doorbell::ring() {
  {
    std::lock_guard lock(mu_);
    ++seq_;
  }
  cv_.notify_all();
}

uint64_t Doorbell::wait(uint64_t seen, std::chrono::microseconds timeout) const {
  std::unique_lock lock(mu_);
  cv_.wait_for(lock, timeout, [&] { return seq_ != seen; });
  return seq_;
}

// --- RegisteredBuffer -----------------------------------------------------------

RegisteredBuffer::RegisteredBuffer(BufferId id, size_t size, std::shared_ptr<Doorbell> bell)
    : id_(id), data_(size, 0), bell_(std::move(bell)) {}

void RegisteredBuffer::check(uint64_t off, size_t len) const {
  if (off > data_.size() || len > data_.size() - off) {
    raise(ErrorCode::kOutOfBounds,
          fmt::format("[{}, {}) outside buffer {} of {} bytes", off, off + len, id_, data_.size()));
  }
}

void RegisteredBuffer::read(uint64_t off, MutableByteView out) const {
  check(off, out.size());
  std::lock_guard lock(mu_);
  std::memcpy(out.data(), data_.data() + off, out.size());
}

Bytes RegisteredBuffer::read(uint64_t off, size_t len) const {
  Bytes out(len);
  read(off, MutableByteView(out));
  return out;
}

uint8_t RegisteredBuffer::byte_at(uint64_t off) const {
  check(off, 1);
  std::lock_guard lock(mu_);
  return data_[off];
}

void RegisteredBuffer::write_local(uint64_t off, ByteView bytes) {
  check(off, bytes.size());
  std::lock_guard lock(mu_);
  std::memcpy(data_.data() + off, bytes.data(), bytes.size());
}

void RegisteredBuffer::zero(uint64_t off, size_t len) {
  check(off, len);
  std::lock_guard lock(mu_);
  std::memset(data_.data() + off, 0, len);
}

void RegisteredBuffer::apply_remote(uint64_t off, ByteView bytes) {
  check(off, bytes.size());
  {
    std::lock_guard lock(mu_);
    std::memcpy(data_.data() + off, bytes.data(), bytes.size());
  }
  remote_writes_.fetch_add(1, std::memory_order_relaxed);
  if (bell_) bell_->ring();
}

// --- completions and counters -----------------------------------------------------

const char* completion_status_name(CompletionStatus s) {
  switch (s) {
    case CompletionStatus::kOk: return "ok";
    case CompletionStatus::kOutOfBounds: return "out_of_bounds";
    case CompletionStatus::kInvalidBuffer: return "invalid_buffer";
    case CompletionStatus::kConnectionClosed: return "connection_closed";
  }
  return "unknown";
}

void CompletionEvent::check() const {
  switch (status) {
    case CompletionStatus::kOk: return;
    case CompletionStatus::kOutOfBounds: raise(ErrorCode::kOutOfBounds, "remote write outside the buffer");
    case CompletionStatus::kInvalidBuffer: raise(ErrorCode::kConnectionClosed, "remote buffer is not registered");
    case CompletionStatus::kConnectionClosed: raise(ErrorCode::kConnectionClosed, "connection closed");
  }
}

void TrafficCounters::on_tx(size_t payload) {
  tx_bytes_.fetch_add(kFrameHeaderSize + payload, std::memory_order_relaxed);
  tx_frames_.fetch_add(1, std::memory_order_relaxed);
}

void TrafficCounters::on_rx(size_t payload) {
  rx_bytes_.fetch_add(kFrameHeaderSize + payload, std::memory_order_relaxed);
  rx_frames_.fetch_add(1, std::memory_order_relaxed);
}

TrafficStats TrafficCounters::snapshot() const {
  return {tx_bytes_.load(), rx_bytes_.load(), tx_frames_.load(), rx_frames_.load(), dropped_.load()};
}

// --- Connection -------------------------------------------------------------------

std::shared_ptr<RegisteredBuffer> Connection::add_local(BufferId id, size_t length, std::shared_ptr<Doorbell> bell) {
  auto buf = std::make_shared<RegisteredBuffer>(id, length, std::move(bell));
  std::lock_guard lock(buffers_mu_);
  local_[id] = buf;
  return buf;
}

std::shared_ptr<RegisteredBuffer> Connection::register_buffer(size_t length, std::shared_ptr<Doorbell> bell) {
  if (closed()) raise(ErrorCode::kConnectionClosed, "register on a closed connection");
  if (length == 0) raise(ErrorCode::kInvalidArgument, "empty buffer");
  BufferId id;
  {
    std::lock_guard lock(buffers_mu_);
    id = next_id_++;
  }
  auto buf = add_local(id, length, std::move(bell));
  announce(id, length);
  return buf;
}

void Connection::deregister_buffer(BufferId id) {
  {
    std::lock_guard lock(buffers_mu_);
    if (local_.erase(id) == 0) return;
  }
  if (!closed()) announce(id, 0);
}

std::shared_ptr<RegisteredBuffer> Connection::local_buffer(BufferId id) const {
  std::lock_guard lock(buffers_mu_);
  auto it = local_.find(id);
  return it == local_.end() ? nullptr : it->second;
}

size_t Connection::remote_buffer_size(BufferId id) const {
  std::lock_guard lock(buffers_mu_);
  auto it = remote_.find(id);
  return it == remote_.end() ? 0 : it->second;
}

void Connection::note_remote_buffer(BufferId id, size_t length) {
  std::lock_guard lock(buffers_mu_);
  if (length == 0) {
    remote_.erase(id);
  } else {
    remote_[id] = length;
  }
}

}  // namespace replkv::transport
