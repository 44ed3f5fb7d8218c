#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <thread>
#include <vector>

#include <fmt/format.h>

#include "replkv/transport.hpp"

namespace replkv::transport {

namespace {

constexpr uint32_t kHandshakeMagic = 0x31564B52;  // "RKV1"
constexpr BufferId kControlBuffer = 0xFFFFFFFFu;
constexpr size_t kControlPayload = 12;

std::pair<std::string, std::string> split_address(const std::string& address) {
  const auto colon = address.rfind(':');
  if (colon == std::string::npos) raise(ErrorCode::kInvalidArgument, fmt::format("bad address '{}'", address));
  return {address.substr(0, colon), address.substr(colon + 1)};
}

bool send_all(int fd, const uint8_t* data, size_t len) {
  while (len > 0) {
    const ssize_t n = ::send(fd, data, len, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    data += n;
    len -= static_cast<size_t>(n);
  }
  return true;
}

bool recv_all(int fd, uint8_t* data, size_t len) {
  while (len > 0) {
    const ssize_t n = ::recv(fd, data, len, 0);
    if (n == 0) return false;
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    data += n;
    len -= static_cast<size_t>(n);
  }
  return true;
}

bool wait_readable(int fd, std::chrono::milliseconds timeout) {
  pollfd p{fd, POLLIN, 0};
  return ::poll(&p, 1, static_cast<int>(timeout.count())) > 0;
}

// Exchanges [magic:u32][bootstrap_len:u64]; returns the peer's bootstrap length.
size_t handshake(int fd, size_t bootstrap, std::chrono::milliseconds timeout) {
  uint8_t out[12];
  store_le<uint32_t>(out, kHandshakeMagic);
  store_le<uint64_t>(out + 4, bootstrap);
  if (!send_all(fd, out, sizeof(out))) raise(ErrorCode::kConnectionClosed, "handshake send failed");
  if (!wait_readable(fd, timeout)) raise(ErrorCode::kTimeout, "handshake timed out");
  uint8_t in[12];
  if (!recv_all(fd, in, sizeof(in))) raise(ErrorCode::kConnectionClosed, "handshake receive failed");
  if (load_le<uint32_t>(in) != kHandshakeMagic) raise(ErrorCode::kProtocol, "bad handshake magic");
  return load_le<uint64_t>(in + 4);
}

struct Tracking {
  std::mutex mu;
  std::vector<std::weak_ptr<Connection>> conns;
  std::vector<Listener*> listeners;
};

class SocketConnection final : public Connection {
 public:
  SocketConnection(int fd, std::string peer, std::shared_ptr<TrafficCounters> counters, size_t local_bootstrap,
                   size_t remote_bootstrap, std::shared_ptr<Doorbell> bell)
      : Connection(std::move(peer)), fd_(fd), counters_(std::move(counters)) {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    add_local(kBootstrapBuffer, local_bootstrap, std::move(bell));
    note_remote_buffer(kBootstrapBuffer, remote_bootstrap);
    reader_ = std::thread([this] { read_loop(); });
  }

  ~SocketConnection() override {
    close();
    if (reader_.joinable()) reader_.join();
    ::close(fd_);
  }

  CompletionEvent remote_write(BufferId remote, uint64_t offset, ByteView bytes) override {
    CompletionEvent ev;
    ev.request_id = next_request_.fetch_add(1);
    if (closed()) {
      ev.status = CompletionStatus::kConnectionClosed;
      return ev;
    }
    const size_t len = remote_buffer_size(remote);
    if (len == 0) {
      ev.status = CompletionStatus::kInvalidBuffer;
      return ev;
    }
    if (offset > len || bytes.size() > len - offset) {
      ev.status = CompletionStatus::kOutOfBounds;
      return ev;
    }
    if (!send_frame(remote, offset, bytes)) ev.status = CompletionStatus::kConnectionClosed;
    return ev;
  }

  void close() override {
    if (!closed_.exchange(true)) ::shutdown(fd_, SHUT_RDWR);
  }

  bool closed() const override { return closed_.load(); }

 protected:
  void announce(BufferId id, size_t length) override {
    uint8_t payload[kControlPayload];
    store_le<uint32_t>(payload, id);
    store_le<uint64_t>(payload + 4, length);
    send_frame(kControlBuffer, 0, ByteView(payload, sizeof(payload)));
  }

 private:
  bool send_frame(BufferId id, uint64_t offset, ByteView bytes) {
    Bytes frame(kFrameHeaderSize + bytes.size());
    store_le<uint32_t>(frame.data(), id);
    store_le<uint64_t>(frame.data() + 4, offset);
    store_le<uint32_t>(frame.data() + 12, static_cast<uint32_t>(bytes.size()));
    std::memcpy(frame.data() + kFrameHeaderSize, bytes.data(), bytes.size());
    std::lock_guard lock(send_mu_);
    if (!send_all(fd_, frame.data(), frame.size())) {
      close();
      return false;
    }
    counters_->on_tx(bytes.size());
    return true;
  }

  // The receive side of the NIC: applies frames to local buffers.
  void read_loop() {
    Bytes payload;
    for (;;) {
      uint8_t hdr[kFrameHeaderSize];
      if (!recv_all(fd_, hdr, sizeof(hdr))) break;
      const BufferId id = load_le<uint32_t>(hdr);
      const uint64_t offset = load_le<uint64_t>(hdr + 4);
      const uint32_t len = load_le<uint32_t>(hdr + 12);
      payload.resize(len);
      if (!recv_all(fd_, payload.data(), len)) break;
      counters_->on_rx(len);
      if (id == kControlBuffer) {
        if (len == kControlPayload) note_remote_buffer(load_le<uint32_t>(payload.data()), load_le<uint64_t>(payload.data() + 4));
        continue;
      }
      auto buf = local_buffer(id);
      if (!buf || offset > buf->size() || len > buf->size() - offset) {
        counters_->on_drop();
        continue;
      }
      buf->apply_remote(offset, payload);
    }
    closed_.store(true);
  }

  int fd_;
  std::shared_ptr<TrafficCounters> counters_;
  std::mutex send_mu_;
  std::atomic<bool> closed_{false};
  std::thread reader_;
};

class SocketListener final : public Listener {
 public:
  SocketListener(int fd, std::string address, size_t bootstrap, std::shared_ptr<TrafficCounters> counters,
                 std::shared_ptr<Tracking> tracking, std::shared_ptr<Doorbell> bell)
      : bell_(std::move(bell)),
        fd_(fd),
        address_(std::move(address)),
        bootstrap_(bootstrap),
        counters_(std::move(counters)),
        tracking_(std::move(tracking)) {}

  ~SocketListener() override {
    close();
    {
      std::lock_guard lock(tracking_->mu);
      std::erase(tracking_->listeners, this);
    }
    ::close(fd_);
  }

  ConnectionPtr accept(std::chrono::milliseconds timeout) override {
    if (closed_.load()) return nullptr;
    if (!wait_readable(fd_, timeout) || closed_.load()) return nullptr;
    sockaddr_storage addr{};
    socklen_t alen = sizeof(addr);
    const int cfd = ::accept(fd_, reinterpret_cast<sockaddr*>(&addr), &alen);
    if (cfd < 0) return nullptr;
    try {
      const size_t remote_bootstrap = handshake(cfd, bootstrap_, std::chrono::milliseconds(5000));
      auto conn = std::make_shared<SocketConnection>(cfd, "inbound", counters_, bootstrap_, remote_bootstrap, bell_);
      std::lock_guard lock(tracking_->mu);
      tracking_->conns.push_back(conn);
      return conn;
    } catch (const Error&) {
      ::close(cfd);
      return nullptr;
    }
  }

  void close() override {
    if (!closed_.exchange(true)) ::shutdown(fd_, SHUT_RDWR);
  }

  std::string address() const override { return address_; }

 private:
  std::shared_ptr<Doorbell> bell_;
  int fd_;
  std::string address_;
  size_t bootstrap_;
  std::shared_ptr<TrafficCounters> counters_;
  std::shared_ptr<Tracking> tracking_;
  std::atomic<bool> closed_{false};
};

class SocketNic final : public Nic {
 public:
  explicit SocketNic(std::string name) : Nic(std::move(name)) {}
  ~SocketNic() override { shutdown(); }

  std::unique_ptr<Listener> listen(const std::string& address, size_t bootstrap_bytes,
                                   std::shared_ptr<Doorbell> bell) override {
    auto [host, port] = split_address(address);
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    hints.ai_flags = AI_PASSIVE;
    addrinfo* res = nullptr;
    if (::getaddrinfo(host.empty() ? nullptr : host.c_str(), port.c_str(), &hints, &res) != 0 || res == nullptr) {
      raise(ErrorCode::kInvalidArgument, fmt::format("cannot resolve {}", address));
    }
    const int fd = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    const int rc = ::bind(fd, res->ai_addr, res->ai_addrlen);
    ::freeaddrinfo(res);
    if (rc != 0 || ::listen(fd, 128) != 0) {
      const int err = errno;
      ::close(fd);
      raise(err == EADDRINUSE ? ErrorCode::kRefused : ErrorCode::kInvalidArgument,
            fmt::format("cannot listen on {}: {}", address, std::strerror(err)));
    }
    sockaddr_in bound{};
    socklen_t blen = sizeof(bound);
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&bound), &blen);
    const std::string actual = fmt::format("{}:{}", host.empty() ? "0.0.0.0" : host, ntohs(bound.sin_port));
    auto l = std::make_unique<SocketListener>(fd, actual, bootstrap_bytes, counters_, tracking_, std::move(bell));
    std::lock_guard lock(tracking_->mu);
    tracking_->listeners.push_back(l.get());
    return l;
  }

  ConnectionPtr connect(const std::string& address, size_t bootstrap_bytes, std::chrono::milliseconds timeout,
                        std::shared_ptr<Doorbell> bell) override {
    auto [host, port] = split_address(address);
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (::getaddrinfo(host.c_str(), port.c_str(), &hints, &res) != 0 || res == nullptr) {
      raise(ErrorCode::kUnreachable, fmt::format("cannot resolve {}", address));
    }
    const int fd = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    const int rc = ::connect(fd, res->ai_addr, res->ai_addrlen);
    ::freeaddrinfo(res);
    if (rc != 0) {
      const int err = errno;
      ::close(fd);
      raise(err == ECONNREFUSED ? ErrorCode::kUnreachable : ErrorCode::kRefused,
            fmt::format("connect {}: {}", address, std::strerror(err)));
    }
    size_t remote_bootstrap;
    try {
      remote_bootstrap = handshake(fd, bootstrap_bytes, timeout);
    } catch (const Error&) {
      ::close(fd);
      raise(ErrorCode::kUnreachable, fmt::format("handshake with {} failed", address));
    }
    auto conn = std::make_shared<SocketConnection>(fd, address, counters_, bootstrap_bytes, remote_bootstrap, std::move(bell));
    std::lock_guard lock(tracking_->mu);
    tracking_->conns.push_back(conn);
    return conn;
  }

  void shutdown() override {
    std::vector<std::weak_ptr<Connection>> conns;
    {
      std::lock_guard lock(tracking_->mu);
      for (Listener* l : tracking_->listeners) l->close();
      conns.swap(tracking_->conns);
    }
    for (auto& w : conns) {
      if (auto c = w.lock()) c->close();
    }
  }

 private:
  std::shared_ptr<Tracking> tracking_ = std::make_shared<Tracking>();
};

}  // namespace

std::unique_ptr<Nic> make_socket_nic(std::string name) { return std::make_unique<SocketNic>(std::move(name)); }

}  // namespace replkv::transport
