#include "replkv/transport.hpp"
#include <set>

#include <random>
#include <thread>

#include "test_util.hpp"

namespace replkv::transport {
namespace {

using namespace std::chrono_literals;

template <typename Pred>
bool eventually(Pred pred, std::chrono::milliseconds limit = 5000ms) {
  const auto deadline = std::chrono::steady_clock::now() + limit;
  while (std::chrono::steady_clock::now() < deadline) {
    if (pred()) return true;
    std::this_thread::sleep_for(100us);
  }
  return pred();
}

enum class Backend { kInProc, kSocket };

class TransportTest : public ::testing::TestWithParam<Backend> {
 protected:
  void SetUp() override {
    if (GetParam() == Backend::kInProc) {
      fabric_ = InProcFabric::create();
      server_nic_ = make_inproc_nic(fabric_, "server");
      client_nic_ = make_inproc_nic(fabric_, "client");
      listener_ = server_nic_->listen("server:1", 4096);
    } else {
      server_nic_ = make_socket_nic("server");
      client_nic_ = make_socket_nic("client");
      listener_ = server_nic_->listen("127.0.0.1:0", 4096);
    }
  }

  std::pair<ConnectionPtr, ConnectionPtr> pair(size_t client_bootstrap = 4096) {
    ConnectionPtr c;
    std::thread t([&] { c = client_nic_->connect(listener_->address(), client_bootstrap, 2000ms); });
    ConnectionPtr s = listener_->accept(2000ms);
    t.join();
    EXPECT_TRUE(s);
    EXPECT_TRUE(c);
    return {c, s};
  }

  std::shared_ptr<InProcFabric> fabric_;
  std::unique_ptr<Nic> server_nic_;
  std::unique_ptr<Nic> client_nic_;
  std::unique_ptr<Listener> listener_;
};

TEST_P(TransportTest, HelloLandsInBootstrapBuffer) {
  auto [c, s] = pair();
  EXPECT_EQ(c->remote_buffer_size(kBootstrapBuffer), 4096u);
  const auto ev = c->remote_write(kBootstrapBuffer, 0, as_bytes("hello"));
  EXPECT_TRUE(ev.ok());
  auto buf = s->local_buffer(kBootstrapBuffer);
  ASSERT_TRUE(eventually([&] { return buf->byte_at(4) == 'o'; }));
  EXPECT_EQ(to_string(buf->read(0, 5)), "hello");
}

TEST_P(TransportTest, RegisteredClientBufferUsableByServer) {
  auto [c, s] = pair();
  auto buf = c->register_buffer(256 * 1024);
  ASSERT_TRUE(eventually([&, s = s, id = buf->id()] { return s->remote_buffer_size(id) == 256 * 1024; }));
  EXPECT_TRUE(s->remote_write(buf->id(), 256 * 1024 - 3, as_bytes("end")).ok());
  ASSERT_TRUE(eventually([&] { return buf->byte_at(256 * 1024 - 1) == 'd'; }));
}

TEST_P(TransportTest, WriteAfterDeregisterFails) {
  auto [c, s] = pair();
  auto buf = s->register_buffer(1024);
  const BufferId id = buf->id();
  ASSERT_TRUE(eventually([&, c = c] { return c->remote_buffer_size(id) == 1024; }));
  s->deregister_buffer(id);
  ASSERT_TRUE(eventually([&, c = c] { return c->remote_buffer_size(id) == 0; }));
  const auto ev = c->remote_write(id, 0, as_bytes("x"));
  EXPECT_EQ(ev.status, CompletionStatus::kInvalidBuffer);
  EXPECT_THROW_CODE(ev.check(), ErrorCode::kConnectionClosed);
}

TEST_P(TransportTest, TwoBuffersIndependent) {
  auto [c, s] = pair();
  auto a = s->register_buffer(512);
  auto b = s->register_buffer(512);
  ASSERT_TRUE(eventually([&, c = c] { return c->remote_buffer_size(b->id()) == 512; }));
  c->remote_write(a->id(), 10, as_bytes("aaaa"));
  c->remote_write(b->id(), 10, as_bytes("bbbb"));
  ASSERT_TRUE(eventually([&] { return a->byte_at(13) == 'a' && b->byte_at(13) == 'b'; }));
  EXPECT_EQ(to_string(a->read(10, 4)), "aaaa");
  EXPECT_EQ(to_string(b->read(10, 4)), "bbbb");
  EXPECT_EQ(a->read(0, 10), Bytes(10, 0));
}

TEST_P(TransportTest, WriteCrossingEndIsOutOfBounds) {
  auto [c, s] = pair();
  const auto ev = c->remote_write(kBootstrapBuffer, 4094, as_bytes("xyz"));
  EXPECT_EQ(ev.status, CompletionStatus::kOutOfBounds);
  EXPECT_THROW_CODE(ev.check(), ErrorCode::kOutOfBounds);
}

// A poller that sees counter k must also see every record written before it.
TEST_P(TransportTest, WritesObservedInIssueOrder) {
  auto [c, s] = pair(64);
  auto buf = s->register_buffer(8 + 8 * 4000);
  ASSERT_TRUE(eventually([&, c = c] { return c->remote_buffer_size(buf->id()) > 0; }));
  std::atomic<bool> done{false};
  std::atomic<uint64_t> violations{0};
  std::thread poller([&] {
    while (!done.load()) {
      const uint64_t k = load_le<uint64_t>(buf->read(0, 8).data());
      if (k > 0 && load_le<uint64_t>(buf->read(8 + 8 * (k - 1), 8).data()) != k) ++violations;
    }
  });
  uint8_t word[8];
  for (uint64_t k = 1; k <= 4000; ++k) {
    store_le<uint64_t>(word, k);
    c->remote_write(buf->id(), 8 + 8 * (k - 1), ByteView(word, 8));
    c->remote_write(buf->id(), 0, ByteView(word, 8));
  }
  ASSERT_TRUE(eventually([&] { return load_le<uint64_t>(buf->read(0, 8).data()) == 4000; }));
  done = true;
  poller.join();
  EXPECT_EQ(violations.load(), 0u);
}

TEST_P(TransportTest, RandomPayloadsArriveExactly) {
  auto [c, s] = pair(64);
  auto buf = s->register_buffer(64 * 1024);
  ASSERT_TRUE(eventually([&, c = c] { return c->remote_buffer_size(buf->id()) > 0; }));
  std::mt19937_64 rng(99);
  Bytes shadow(64 * 1024, 0);
  for (int i = 0; i < 300; ++i) {
    const size_t len = rng() % 2048;
    const uint64_t off = rng() % (shadow.size() - len);
    Bytes data(len);
    for (auto& x : data) x = static_cast<uint8_t>(rng());
    ASSERT_TRUE(c->remote_write(buf->id(), off, data).ok());
    std::copy(data.begin(), data.end(), shadow.begin() + static_cast<ptrdiff_t>(off));
  }
  uint8_t end[1] = {1};
  c->remote_write(kBootstrapBuffer, 0, ByteView(end, 1));
  auto boot = s->local_buffer(kBootstrapBuffer);
  ASSERT_TRUE(eventually([&] { return boot->byte_at(0) == 1; }));
  EXPECT_EQ(buf->read(0, shadow.size()), shadow);
}

TEST_P(TransportTest, ReceiverWithoutPollerAccumulatesWrites) {
  auto [c, s] = pair();
  auto buf = s->local_buffer(kBootstrapBuffer);
  for (int i = 0; i < 10; ++i) c->remote_write(kBootstrapBuffer, static_cast<uint64_t>(i), as_bytes("z"));
  ASSERT_TRUE(eventually([&] { return buf->remote_writes() == 10; }));
  EXPECT_EQ(to_string(buf->read(0, 10)), "zzzzzzzzzz");
}

TEST_P(TransportTest, TrafficCountsFrames) {
  auto [c, s] = pair();
  const TrafficStats c0 = client_nic_->stats();
  const TrafficStats s0 = server_nic_->stats();
  c->remote_write(kBootstrapBuffer, 0, Bytes(100, 1));
  ASSERT_TRUE(eventually([&] { return (server_nic_->stats() - s0).rx_bytes == 116; }));
  EXPECT_EQ((client_nic_->stats() - c0).tx_bytes, 116u);
  EXPECT_EQ((client_nic_->stats() - c0).tx_frames, 1u);
}

TEST_P(TransportTest, ConnectToNothingIsUnreachable) {
  const std::string addr = GetParam() == Backend::kInProc ? "nobody:1" : "127.0.0.1:1";
  EXPECT_THROW_CODE(client_nic_->connect(addr, 64, 500ms), ErrorCode::kUnreachable);
}

TEST_P(TransportTest, ShutdownClosesConnections) {
  auto [c, s] = pair();
  server_nic_->shutdown();
  ASSERT_TRUE(eventually([&, c = c] {
    return c->remote_write(kBootstrapBuffer, 0, as_bytes("x")).status == CompletionStatus::kConnectionClosed;
  }));
  EXPECT_FALSE(listener_->accept(10ms));
}

TEST_P(TransportTest, SixtyFourConnectionsEcho) {
  constexpr int kConns = 64;
  std::vector<ConnectionPtr> clients(kConns), servers(kConns);
  std::thread acceptor([&] {
    for (int i = 0; i < kConns; ++i) servers[i] = listener_->accept(5000ms);
  });
  for (int i = 0; i < kConns; ++i) clients[i] = client_nic_->connect(listener_->address(), 64, 5000ms);
  acceptor.join();
  // Pairing by message: each client writes its index; the server echoes it back.
  for (int i = 0; i < kConns; ++i) {
    uint8_t b[1] = {static_cast<uint8_t>(i + 1)};
    ASSERT_TRUE(clients[i]->remote_write(kBootstrapBuffer, 0, ByteView(b, 1)).ok());
  }
  for (int i = 0; i < kConns; ++i) {
    ASSERT_TRUE(servers[i]);
    auto buf = servers[i]->local_buffer(kBootstrapBuffer);
    ASSERT_TRUE(eventually([&] { return buf->byte_at(0) != 0; }));
    uint8_t b[1] = {buf->byte_at(0)};
    ASSERT_TRUE(servers[i]->remote_write(kBootstrapBuffer, 1, ByteView(b, 1)).ok());
  }
  std::set<int> seen;
  for (int i = 0; i < kConns; ++i) {
    auto buf = clients[i]->local_buffer(kBootstrapBuffer);
    ASSERT_TRUE(eventually([&] { return buf->byte_at(1) != 0; }));
    EXPECT_EQ(buf->byte_at(1), i + 1);
    seen.insert(buf->byte_at(1));
  }
  EXPECT_EQ(seen.size(), static_cast<size_t>(kConns));
}

INSTANTIATE_TEST_SUITE_P(Backends, TransportTest, ::testing::Values(Backend::kInProc, Backend::kSocket),
                         [](const auto& info) { return info.param == Backend::kInProc ? "InProc" : "Socket"; });

TEST(InProcTransportTest, LatencyInjectionDelaysCompletion) {
  auto fabric = InProcFabric::create();
  auto a = make_inproc_nic(fabric, "a");
  auto b = make_inproc_nic(fabric, "b");
  auto l = b->listen("b:1", 64);
  auto c = a->connect("b:1", 64, 100ms);
  fabric->set_node_latency("b", 3ms);
  const auto t0 = std::chrono::steady_clock::now();
  EXPECT_TRUE(c->remote_write(kBootstrapBuffer, 0, as_bytes("x")).ok());
  EXPECT_GE(std::chrono::steady_clock::now() - t0, 3ms);
}

TEST(InProcTransportTest, DoorbellWakesPoller) {
  auto fabric = InProcFabric::create();
  auto a = make_inproc_nic(fabric, "a");
  auto b = make_inproc_nic(fabric, "b");
  auto l = b->listen("b:1", 64);
  auto c = a->connect("b:1", 64, 100ms);
  auto s = l->accept(100ms);
  auto bell = std::make_shared<Doorbell>();
  auto buf = s->register_buffer(64, bell);
  const uint64_t seen = bell->sequence();
  std::thread writer([&] {
    std::this_thread::sleep_for(2ms);
    c->remote_write(buf->id(), 0, as_bytes("q"));
  });
  EXPECT_NE(bell->wait(seen, 2s), seen);
  writer.join();
  EXPECT_EQ(buf->byte_at(0), 'q');
}

}  // namespace
}  // namespace replkv::transport
