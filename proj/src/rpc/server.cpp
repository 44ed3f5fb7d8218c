#include "replkv/rpc/server.hpp"

#include <spdlog/spdlog.h>

namespace replkv::rpc {

struct RpcServer::Conn {
  uint32_t id = 0;
  transport::ConnectionPtr conn;
  Receiver receiver;
  std::mutex pending_mu;
  std::unordered_map<uint64_t, Bytes> pending;  // req_id -> reply bytes not yet fetched
  uint64_t resets_counted = 0;

  Conn(uint32_t i, transport::ConnectionPtr c)
      : id(i), conn(std::move(c)), receiver(conn->local_buffer(transport::kBootstrapBuffer)) {}
};

RpcServer::RpcServer(transport::Nic& nic, const std::string& address, Handler handler, ServerOptions options)
    : handler_(std::move(handler)),
      options_(options),
      bell_(std::make_shared<transport::Doorbell>()),
      listener_(nic.listen(address, round_up(options.client_buffer_bytes, kMessageSegment), bell_)),
      address_(listener_->address()),
      pool_(options.workers, options.task_threshold, options.idle_sleep, options.record_schedule) {
  acceptor_ = std::thread([this] { accept_loop(); });
  const size_t n = std::max<size_t>(1, options_.spinners);
  for (size_t i = 0; i < n; ++i) spinners_.emplace_back([this, i] { spin_loop(i); });
}

RpcServer::~RpcServer() { stop(); }

void RpcServer::stop() {
  if (stopping_.exchange(true)) return;
  listener_->close();
  bell_->ring();
  if (acceptor_.joinable()) acceptor_.join();
  for (auto& t : spinners_) t.join();
  pool_.stop();
  std::lock_guard lock(conns_mu_);
  for (auto& c : conns_) c->conn->close();
  conns_.clear();
}

void RpcServer::accept_loop() {
  while (!stopping_.load()) {
    transport::ConnectionPtr c = listener_->accept(std::chrono::milliseconds(50));
    if (!c) continue;
    std::lock_guard lock(conns_mu_);
    conns_.push_back(std::make_shared<Conn>(next_conn_++, std::move(c)));
    bell_->ring();
  }
}

void RpcServer::spin_loop(size_t index) {
  const size_t n = std::max<size_t>(1, options_.spinners);
  std::vector<std::shared_ptr<Conn>> mine;
  while (!stopping_.load()) {
    const uint64_t seen = bell_->sequence();
    mine.clear();
    {
      std::lock_guard lock(conns_mu_);
      for (const auto& c : conns_) {
        if (c->id % n == index) mine.push_back(c);
      }
    }
    bool any = false;
    for (auto& c : mine) {
      try {
        while (auto msg = c->receiver.poll()) {
          any = true;
          count_resets(*c);
          requests_.fetch_add(1);
          if (options_.inline_op && options_.inline_op(msg->header.op)) {
            execute(c, std::move(*msg));
          } else {
            pool_.submit([this, c, m = std::move(*msg)]() mutable { execute(c, std::move(m)); });
          }
        }
      } catch (const Error& e) {
        spdlog::warn("closing connection {}: {}", c->id, e.what());
        c->conn->close();
      }
      count_resets(*c);
    }
    {
      std::lock_guard lock(conns_mu_);
      std::erase_if(conns_, [](const std::shared_ptr<Conn>& c) { return c->conn->closed(); });
    }
    if (!any) bell_->wait(seen, std::chrono::milliseconds(2));
  }
}

void RpcServer::count_resets(Conn& c) {
  const uint64_t r = c.receiver.resets();
  if (r != c.resets_counted) {
    resets_seen_.fetch_add(r - c.resets_counted);
    c.resets_counted = r;
  }
}

void RpcServer::execute(const std::shared_ptr<Conn>& conn, ReceivedMessage msg) {
  const MessageHeader& h = msg.header;
  if (h.op == Op::kContinue) {
    ByteReader r(msg.payload);
    const uint64_t orig = r.get<uint64_t>();
    Bytes rest;
    {
      std::lock_guard lock(conn->pending_mu);
      auto it = conn->pending.find(orig);
      if (it == conn->pending.end()) {
        send_reply(*conn, h, encode_error(ErrorCode::kProtocol, "nothing to continue"), flags::kError);
        return;
      }
      rest = std::move(it->second);
      conn->pending.erase(it);
    }
    continuations_.fetch_add(1);
    // Remaining bytes stay keyed by the original request id.
    const size_t cap = payload_capacity(h.reply_len);
    if (rest.size() > cap) {
      Bytes head(rest.begin(), rest.begin() + static_cast<ptrdiff_t>(cap));
      {
        std::lock_guard lock(conn->pending_mu);
        conn->pending[orig] = Bytes(rest.begin() + static_cast<ptrdiff_t>(cap), rest.end());
      }
      send_reply(*conn, h, std::move(head), flags::kContinuation);
    } else {
      send_reply(*conn, h, std::move(rest), 0);
    }
    return;
  }

  Request req;
  req.op = h.op;
  req.req_id = h.req_id;
  req.payload = std::move(msg.payload);
  req.connection = conn->id;
  req.conn = conn->conn.get();
  Bytes reply;
  try {
    reply = handler_(req);
  } catch (const Error& e) {
    errors_.fetch_add(1);
    std::string what = e.what();
    const std::string prefix = std::string(error_code_name(e.code())) + ": ";
    if (what.rfind(prefix, 0) == 0) what.erase(0, prefix.size());
    const size_t cap = payload_capacity(h.reply_len);
    if (what.size() + 2 > cap) what.resize(cap > 2 ? cap - 2 : 0);
    send_reply(*conn, h, encode_error(e.code(), what), flags::kError);
    return;
  } catch (const std::exception& e) {
    errors_.fetch_add(1);
    std::string what = e.what();
    const size_t cap = payload_capacity(h.reply_len);
    if (what.size() + 2 > cap) what.resize(cap > 2 ? cap - 2 : 0);
    send_reply(*conn, h, encode_error(ErrorCode::kProtocol, what), flags::kError);
    return;
  }
  send_chunked(*conn, h, std::move(reply));
}

void RpcServer::send_chunked(Conn& conn, const MessageHeader& req, Bytes payload) {
  const size_t cap = payload_capacity(req.reply_len);
  if (payload.size() <= cap) {
    send_reply(conn, req, std::move(payload), 0);
    return;
  }
  Bytes head(payload.begin(), payload.begin() + static_cast<ptrdiff_t>(cap));
  {
    std::lock_guard lock(conn.pending_mu);
    conn.pending[req.req_id] = Bytes(payload.begin() + static_cast<ptrdiff_t>(cap), payload.end());
  }
  send_reply(conn, req, std::move(head), flags::kContinuation);
}

void RpcServer::send_reply(Conn& conn, const MessageHeader& req, Bytes payload, uint8_t fl) {
  MessageHeader h;
  h.op = req.op;
  h.flags = fl;
  h.req_id = req.req_id;
  const Bytes wire = encode_message(h, payload);
  if (wire.size() > req.reply_len) {
    spdlog::warn("reply of {} bytes does not fit slot of {}", wire.size(), req.reply_len);
    return;
  }
  conn.conn->remote_write(transport::kBootstrapBuffer, req.reply_offset, wire);
  replies_.fetch_add(1);
}

ServerStats RpcServer::stats() const {
  ServerStats s;
  {
    std::lock_guard lock(conns_mu_);
    s.connections = conns_.size();
  }
  s.requests = requests_.load();
  s.resets = resets_seen_.load();
  s.replies = replies_.load();
  s.continuations = continuations_.load();
  s.errors = errors_.load();
  s.scheduler = pool_.stats();
  return s;
}

}  // namespace replkv::rpc
