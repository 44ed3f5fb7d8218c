#include "replkv/rpc/client.hpp"

#include <fmt/format.h>

namespace replkv::rpc {

RpcClient::RpcClient(transport::Nic& nic, const std::string& address, ClientOptions options)
    : address_(address),
      options_(options),
      bell_(std::make_shared<transport::Doorbell>()),
      conn_(nic.connect(address, round_up(std::max(options.buffer_bytes, kMinClientBuffer), kMessageSegment),
                        options.connect_timeout, bell_)),
      reply_buffer_(conn_->local_buffer(transport::kBootstrapBuffer)),
      request_ring_(conn_->remote_buffer_size(transport::kBootstrapBuffer)),
      reply_ring_(reply_buffer_->size()) {}

RpcClient::~RpcClient() { conn_->close(); }

ClientStats RpcClient::stats() const {
  std::lock_guard lock(mu_);
  return stats_;
}

void RpcClient::release_locked(Outstanding& o) {
  if (o.request_skip) request_ring_.release(*o.request_skip);
  request_ring_.release(o.request_offset);
  reply_ring_.release(o.reply_offset);
}

// Collects every reply that has landed, so slots free up even when the
// caller that owns them is not waiting yet.
void RpcClient::harvest_locked() {
  for (auto& [id, o] : outstanding_) {
    if (o.reply) continue;
    if (auto m = poll_slot(*reply_buffer_, o.reply_offset, o.reply_len)) {
      o.reply = std::move(m);
      release_locked(o);
    }
  }
}

RpcClient::Ticket RpcClient::send(Op op, ByteView payload, size_t expected_reply) {
  const size_t request_size = message_size(payload.size());
  if (request_size > max_request_bytes()) {
    raise(ErrorCode::kBufferFull,
          fmt::format("{} byte request exceeds half of the {} byte ring", request_size, request_ring_.size()));
  }
  size_t reply_size = message_size(expected_reply == 0 ? options_.default_reply_bytes : expected_reply);
  reply_size = std::min(reply_size, std::max(kMessageSegment, round_up(reply_ring_.size() / 2, kMessageSegment) - kMessageSegment));

  const auto deadline = std::chrono::steady_clock::now() + options_.timeout;
  std::unique_lock lock(mu_);
  for (;;) {
    if (conn_->closed()) raise(ErrorCode::kConnectionClosed, fmt::format("connection to {} closed", address_));
    const uint64_t seen = bell_->sequence();
    harvest_locked();
    auto reply = reply_ring_.allocate(reply_size);
    if (reply) {
      if (reply->skipped_at) reply_ring_.release(*reply->skipped_at);
      auto request = request_ring_.allocate(request_size);
      if (request) {
        const uint64_t req_id = next_req_++;
        Outstanding o;
        o.request_offset = request->offset;
        o.reply_offset = reply->offset;
        o.reply_len = static_cast<uint32_t>(reply_size);
        if (request->skipped_at) {
          // Tell the server its next rendezvous is back at the start.
          MessageHeader rh;
          rh.op = Op::kResetRendezvous;
          rh.req_id = req_id;
          conn_->remote_write(transport::kBootstrapBuffer, *request->skipped_at, encode_message(rh, {})).check();
          o.request_skip = request->skipped_at;
          ++stats_.resets;
        }
        MessageHeader h;
        h.op = op;
        h.reply_offset = reply->offset;
        h.reply_len = static_cast<uint32_t>(reply_size);
        h.req_id = req_id;
        outstanding_.emplace(req_id, o);
        ++stats_.calls;
        const auto ev = conn_->remote_write(transport::kBootstrapBuffer, request->offset, encode_message(h, payload));
        if (!ev.ok()) {
          conn_->close();
          ev.check();
        }
        return Ticket{req_id};
      }
      reply_ring_.release(reply->offset);
    }
    ++stats_.space_waits;
    lock.unlock();
    if (std::chrono::steady_clock::now() >= deadline) {
      conn_->close();
      raise(ErrorCode::kTimeout, fmt::format("no buffer space towards {}", address_));
    }
    bell_->wait(seen, std::chrono::milliseconds(1));
    lock.lock();
  }
}

Bytes RpcClient::wait_one(uint64_t req_id, uint8_t* flags_out) {
  const auto deadline = std::chrono::steady_clock::now() + options_.timeout;
  std::unique_lock lock(mu_);
  for (;;) {
    const uint64_t seen = bell_->sequence();
    auto it = outstanding_.find(req_id);
    if (it == outstanding_.end()) raise(ErrorCode::kInvalidArgument, fmt::format("unknown request {}", req_id));
    if (!it->second.reply) {
      if (auto m = poll_slot(*reply_buffer_, it->second.reply_offset, it->second.reply_len)) {
        it->second.reply = std::move(m);
        release_locked(it->second);
      }
    }
    if (it->second.reply) {
      ReceivedMessage m = std::move(*it->second.reply);
      outstanding_.erase(it);
      lock.unlock();
      *flags_out = m.header.flags;
      if (m.header.flags & flags::kError) raise_error_payload(m.payload);
      return std::move(m.payload);
    }
    if (conn_->closed()) raise(ErrorCode::kConnectionClosed, fmt::format("connection to {} closed", address_));
    lock.unlock();
    if (std::chrono::steady_clock::now() >= deadline) {
      conn_->close();
      raise(ErrorCode::kTimeout, fmt::format("request {} to {} timed out", req_id, address_));
    }
    bell_->wait(seen, std::chrono::milliseconds(1));
    lock.lock();
  }
}

Bytes RpcClient::wait(const Ticket& t) {
  uint8_t fl = 0;
  Bytes out = wait_one(t.req_id, &fl);
  while (fl & flags::kContinuation) {
    ByteWriter w;
    w.put<uint64_t>(t.req_id);
    const Ticket next = send(Op::kContinue, w.take(), options_.default_reply_bytes * 4);
    {
      std::lock_guard lock(mu_);
      ++stats_.continuations;
    }
    Bytes more = wait_one(next.req_id, &fl);
    out.insert(out.end(), more.begin(), more.end());
  }
  return out;
}

}  // namespace replkv::rpc
