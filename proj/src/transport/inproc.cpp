#include <deque>
#include <thread>
#include <vector>

#include <fmt/format.h>

#include "replkv/transport.hpp"

namespace replkv::transport {

namespace {

class InProcConnection;
class InProcListener;

// Shared state of one connection; each side holds it.
struct Link {
  std::mutex mu;
  InProcConnection* ends[2] = {nullptr, nullptr};
  std::shared_ptr<TrafficCounters> counters[2];
  std::string nodes[2];
  bool closed = false;
  std::mutex direction_mu[2];  // keeps each direction in issue order
};

// Connections opened or accepted by one node.
struct Tracking {
  std::mutex mu;
  std::vector<std::weak_ptr<Connection>> conns;
  std::vector<Listener*> listeners;

  void add(const ConnectionPtr& c) {
    std::lock_guard lock(mu);
    conns.push_back(c);
  }
};

}  // namespace

struct InProcFabric::Impl {
  mutable std::mutex mu;
  InProcOptions options;
  std::unordered_map<std::string, std::chrono::microseconds> node_latency;
  std::unordered_map<std::string, InProcListener*> listeners;
};

namespace {

class InProcConnection final : public Connection {
 public:
  InProcConnection(std::shared_ptr<Link> link, int side, std::weak_ptr<InProcFabric> fabric)
      : Connection(link->nodes[1 - side]), link_(std::move(link)), side_(side), fabric_(std::move(fabric)) {
    link_->ends[side_] = this;
  }

  ~InProcConnection() override {
    std::lock_guard lock(link_->mu);
    link_->ends[side_] = nullptr;
    link_->closed = true;
  }

  void bootstrap(size_t length, std::shared_ptr<Doorbell> bell) { add_local(kBootstrapBuffer, length, std::move(bell)); }
  void learn_bootstrap(size_t length) { note_remote_buffer(kBootstrapBuffer, length); }

  CompletionEvent remote_write(BufferId remote, uint64_t offset, ByteView bytes) override {
    CompletionEvent ev;
    ev.request_id = next_request_.fetch_add(1);
    const size_t len = remote_buffer_size(remote);
    if (closed()) {
      ev.status = CompletionStatus::kConnectionClosed;
      return ev;
    }
    if (len == 0) {
      ev.status = CompletionStatus::kInvalidBuffer;
      return ev;
    }
    if (offset > len || bytes.size() > len - offset) {
      ev.status = CompletionStatus::kOutOfBounds;
      return ev;
    }
    std::lock_guard order(link_->direction_mu[side_]);
    std::chrono::microseconds delay{0};
    if (auto fabric = fabric_.lock()) delay = fabric->latency_to(link_->nodes[1 - side_]);
    if (delay.count() > 0) std::this_thread::sleep_for(delay);

    std::shared_ptr<RegisteredBuffer> target;
    {
      std::lock_guard lock(link_->mu);
      InProcConnection* peer = link_->ends[1 - side_];
      if (link_->closed || peer == nullptr) {
        ev.status = CompletionStatus::kConnectionClosed;
        return ev;
      }
      target = peer->local_buffer(remote);
    }
    if (!target) {
      ev.status = CompletionStatus::kInvalidBuffer;
      return ev;
    }
    if (offset > target->size() || bytes.size() > target->size() - offset) {
      ev.status = CompletionStatus::kOutOfBounds;
      return ev;
    }
    target->apply_remote(offset, bytes);
    link_->counters[side_]->on_tx(bytes.size());
    link_->counters[1 - side_]->on_rx(bytes.size());
    return ev;
  }

  void close() override {
    std::lock_guard lock(link_->mu);
    link_->closed = true;
  }

  bool closed() const override {
    std::lock_guard lock(link_->mu);
    return link_->closed;
  }

 protected:
  void announce(BufferId id, size_t length) override {
    std::lock_guard lock(link_->mu);
    InProcConnection* peer = link_->ends[1 - side_];
    if (peer != nullptr) peer->note_remote_buffer(id, length);
  }

 private:
  std::shared_ptr<Link> link_;
  int side_;
  std::weak_ptr<InProcFabric> fabric_;
};

class InProcListener final : public Listener {
 public:
  InProcListener(std::shared_ptr<InProcFabric> fabric, std::string address, std::string node, size_t bootstrap,
                 std::shared_ptr<TrafficCounters> counters, std::shared_ptr<Tracking> tracking,
                 std::shared_ptr<Doorbell> bell)
      : bell_(std::move(bell)),
        fabric_(std::move(fabric)),
        address_(std::move(address)),
        node_(std::move(node)),
        bootstrap_(bootstrap),
        counters_(std::move(counters)),
        tracking_(std::move(tracking)) {}

  ~InProcListener() override {
    close();
    std::lock_guard lock(tracking_->mu);
    std::erase(tracking_->listeners, this);
  }

  ConnectionPtr accept(std::chrono::milliseconds timeout) override {
    std::unique_lock lock(mu_);
    cv_.wait_for(lock, timeout, [&] { return closed_ || !pending_.empty(); });
    if (closed_ || pending_.empty()) return nullptr;
    ConnectionPtr c = std::move(pending_.front());
    pending_.pop_front();
    return c;
  }

  void close() override {
    {
      std::lock_guard lock(mu_);
      if (closed_) return;
      closed_ = true;
      pending_.clear();
    }
    cv_.notify_all();
    auto& impl = fabric_->impl();
    std::lock_guard lock(impl.mu);
    auto it = impl.listeners.find(address_);
    if (it != impl.listeners.end() && it->second == this) impl.listeners.erase(it);
  }

  std::string address() const override { return address_; }

  // Called by a connecting NIC with the fabric lock held.
  std::shared_ptr<InProcConnection> offer(const std::string& client_node, size_t client_bootstrap,
                                          std::shared_ptr<Doorbell> client_bell,
                                          const std::shared_ptr<TrafficCounters>& client_counters,
                                          std::shared_ptr<InProcConnection>* server_side,
                                          std::shared_ptr<Tracking>* server_tracking) {
    auto link = std::make_shared<Link>();
    link->counters[0] = client_counters;
    link->counters[1] = counters_;
    link->nodes[0] = client_node;
    link->nodes[1] = node_;
    auto client = std::make_shared<InProcConnection>(link, 0, fabric_);
    auto server = std::make_shared<InProcConnection>(link, 1, fabric_);
    client->bootstrap(client_bootstrap, std::move(client_bell));
    server->bootstrap(bootstrap_, bell_);
    client->learn_bootstrap(bootstrap_);
    server->learn_bootstrap(client_bootstrap);
    {
      std::lock_guard lock(mu_);
      if (closed_) raise(ErrorCode::kRefused, fmt::format("{} is not accepting", address_));
      pending_.push_back(server);
    }
    cv_.notify_all();
    *server_side = server;
    *server_tracking = tracking_;
    return client;
  }

 private:
  std::shared_ptr<Doorbell> bell_;
  std::shared_ptr<InProcFabric> fabric_;
  std::string address_;
  std::string node_;
  size_t bootstrap_;
  std::shared_ptr<TrafficCounters> counters_;
  std::shared_ptr<Tracking> tracking_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<ConnectionPtr> pending_;
  bool closed_ = false;
};

class InProcNic final : public Nic {
 public:
  InProcNic(std::shared_ptr<InProcFabric> fabric, std::string name) : Nic(std::move(name)), fabric_(std::move(fabric)) {}

  ~InProcNic() override { shutdown(); }

  std::unique_ptr<Listener> listen(const std::string& address, size_t bootstrap_bytes,
                                   std::shared_ptr<Doorbell> bell) override {
    auto& impl = fabric_->impl();
    std::lock_guard lock(impl.mu);
    if (impl.listeners.count(address)) raise(ErrorCode::kInvalidArgument, fmt::format("{} already in use", address));
    auto l = std::make_unique<InProcListener>(fabric_, address, name_, bootstrap_bytes, counters_, tracking_, std::move(bell));
    impl.listeners[address] = l.get();
    std::lock_guard own(tracking_->mu);
    tracking_->listeners.push_back(l.get());
    return l;
  }

  ConnectionPtr connect(const std::string& address, size_t bootstrap_bytes, std::chrono::milliseconds,
                        std::shared_ptr<Doorbell> bell) override {
    auto& impl = fabric_->impl();
    std::shared_ptr<InProcConnection> client, server;
    std::shared_ptr<Tracking> server_tracking;
    {
      std::lock_guard lock(impl.mu);
      auto it = impl.listeners.find(address);
      if (it == impl.listeners.end()) raise(ErrorCode::kUnreachable, fmt::format("nothing listens on {}", address));
      client = it->second->offer(name_, bootstrap_bytes, std::move(bell), counters_, &server, &server_tracking);
    }
    server_tracking->add(server);
    tracking_->add(client);
    return client;
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
  std::shared_ptr<InProcFabric> fabric_;
  std::shared_ptr<Tracking> tracking_ = std::make_shared<Tracking>();
};

}  // namespace

InProcFabric::InProcFabric(InProcOptions options) : impl_(std::make_shared<Impl>()) { impl_->options = options; }

std::shared_ptr<InProcFabric> InProcFabric::create(InProcOptions options) {
  return std::shared_ptr<InProcFabric>(new InProcFabric(options));
}

InProcOptions InProcFabric::options() const {
  std::lock_guard lock(impl_->mu);
  return impl_->options;
}

void InProcFabric::set_write_latency(std::chrono::microseconds latency) {
  std::lock_guard lock(impl_->mu);
  impl_->options.write_latency = latency;
}

void InProcFabric::set_node_latency(const std::string& node, std::chrono::microseconds latency) {
  std::lock_guard lock(impl_->mu);
  impl_->node_latency[node] = latency;
}

std::chrono::microseconds InProcFabric::latency_to(const std::string& node) const {
  std::lock_guard lock(impl_->mu);
  auto it = impl_->node_latency.find(node);
  return impl_->options.write_latency + (it == impl_->node_latency.end() ? std::chrono::microseconds{0} : it->second);
}

std::unique_ptr<Nic> make_inproc_nic(const std::shared_ptr<InProcFabric>& fabric, std::string name) {
  return std::make_unique<InProcNic>(fabric, std::move(name));
}

}  // namespace replkv::transport
