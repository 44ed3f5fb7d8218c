#include <deque>
#include <fmt/format.h>
#include <random>
#include <set>
#include <thread>

#include "replkv/rpc/client.hpp"
#include "replkv/rpc/server.hpp"
#include "test_util.hpp"

namespace replkv::rpc {
namespace {

using namespace std::chrono_literals;

size_t oracle_size(size_t payload) { return (kHeaderSize + payload + kTailSize + 127) / 128 * 128; }

TEST(MessageTest, SizesAreQuantized) {
  EXPECT_EQ(message_size(0), 128u);
  EXPECT_EQ(message_size(95), 128u);
  EXPECT_EQ(message_size(96), 256u);
  EXPECT_EQ(message_size(500), oracle_size(500));
  EXPECT_EQ(message_size(500), 640u);
  for (size_t n = 0; n < 5000; ++n) {
    ASSERT_EQ(message_size(n) % kMessageSegment, 0u);
    ASSERT_EQ(message_size(n), oracle_size(n));
  }
}

TEST(MessageTest, HeaderLayout) {
  MessageHeader h;
  h.op = Op::kGet;
  h.flags = 3;
  h.reply_offset = 0x1234;
  h.reply_len = 512;
  h.req_id = 77;
  const Bytes wire = encode_message(h, as_bytes("abc"));
  ASSERT_EQ(wire.size(), 128u);
  EXPECT_EQ(load_le<uint32_t>(wire.data()), 3u);
  EXPECT_EQ(wire[4], static_cast<uint8_t>(Op::kGet));
  EXPECT_EQ(wire[5], 3);
  EXPECT_EQ(load_le<uint64_t>(wire.data() + 8), 0x1234u);
  EXPECT_EQ(load_le<uint32_t>(wire.data() + 16), 512u);
  EXPECT_EQ(load_le<uint64_t>(wire.data() + 20), 77u);
  EXPECT_EQ(wire[31], kReceiveMagic);
  EXPECT_EQ(to_string(ByteView(wire).subspan(32, 3)), "abc");
  EXPECT_EQ(wire[35], kTailMarker);
  const MessageHeader back = decode_header(wire);
  EXPECT_EQ(back.payload_len, 3u);
  EXPECT_EQ(back.req_id, 77u);
  EXPECT_EQ(back.reply_offset, 0x1234u);
}

std::shared_ptr<transport::RegisteredBuffer> ring(size_t n) {
  return std::make_shared<transport::RegisteredBuffer>(0, n, nullptr);
}

Bytes msg(uint64_t id, size_t payload_len, Op op = Op::kPut) {
  MessageHeader h;
  h.op = op;
  h.req_id = id;
  Bytes p(payload_len, static_cast<uint8_t>(id));
  return encode_message(h, p);
}

TEST(ReceiverTest, EmptyBufferYieldsNothing) {
  Receiver r(ring(1024));
  EXPECT_FALSE(r.poll());
}

TEST(ReceiverTest, WaitsForTailAfterHeader) {
  auto buf = ring(1024);
  Receiver r(buf);
  const Bytes m = msg(1, 200);
  buf->write_local(0, ByteView(m).first(kHeaderSize));
  EXPECT_FALSE(r.poll());
  EXPECT_EQ(r.rendezvous(), 0u);
  buf->write_local(kHeaderSize, ByteView(m).subspan(kHeaderSize));
  auto got = r.poll();
  ASSERT_TRUE(got);
  EXPECT_EQ(got->header.req_id, 1u);
  EXPECT_EQ(got->payload.size(), 200u);
  EXPECT_EQ(r.rendezvous(), message_size(200));
}

TEST(ReceiverTest, BackToBackInOrderAndZeroed) {
  auto buf = ring(4096);
  Receiver r(buf);
  const Bytes a = msg(1, 10), b = msg(2, 300);
  buf->write_local(0, a);
  buf->write_local(a.size(), b);
  auto m1 = r.poll();
  auto m2 = r.poll();
  ASSERT_TRUE(m1 && m2);
  EXPECT_EQ(m1->header.req_id, 1u);
  EXPECT_EQ(m2->header.req_id, 2u);
  EXPECT_EQ(r.rendezvous(), a.size() + b.size());
  EXPECT_FALSE(r.poll());
  for (uint64_t off = 0; off < a.size() + b.size(); off += kMessageSegment) {
    EXPECT_NE(buf->byte_at(off + kReceiveFieldOffset), kReceiveMagic) << off;
  }
  EXPECT_EQ(buf->byte_at(a.size() + kHeaderSize + 300), 0);
}

TEST(ReceiverTest, ExactFillWrapsImplicitly) {
  auto buf = ring(512);
  Receiver r(buf);
  buf->write_local(0, msg(1, 400));  // 512 bytes
  ASSERT_TRUE(r.poll());
  EXPECT_EQ(r.rendezvous(), 0u);
  buf->write_local(0, msg(2, 10));
  auto m = r.poll();
  ASSERT_TRUE(m);
  EXPECT_EQ(m->header.req_id, 2u);
  EXPECT_EQ(r.resets(), 0u);
}

TEST(ReceiverTest, ResetMovesRendezvousToStart) {
  auto buf = ring(1024);
  Receiver r(buf);
  buf->write_local(0, msg(1, 800));  // 896 bytes, 128 left at the tail
  ASSERT_TRUE(r.poll());
  EXPECT_EQ(r.rendezvous(), 896u);
  // Next message needs 256 bytes: a reset goes in the tail, the message at 0.
  buf->write_local(896, msg(0, 0, Op::kResetRendezvous));
  buf->write_local(0, msg(2, 150));
  auto m = r.poll();
  ASSERT_TRUE(m);
  EXPECT_EQ(m->header.req_id, 2u);
  EXPECT_EQ(m->offset, 0u);
  EXPECT_EQ(r.resets(), 1u);
}

TEST(RingAllocatorTest, ScriptedWrapAndFlowControl) {
  RingAllocator a(1024);
  auto p1 = a.allocate(896);
  ASSERT_TRUE(p1);
  EXPECT_EQ(p1->offset, 0u);
  // 128 free at the tail, 0 at the start: must wait.
  EXPECT_FALSE(a.allocate(256));
  a.release(0);
  auto p2 = a.allocate(256);
  ASSERT_TRUE(p2);
  EXPECT_EQ(p2->offset, 0u);
  ASSERT_TRUE(p2->skipped_at);
  EXPECT_EQ(*p2->skipped_at, 896u);
  EXPECT_EQ(p2->skipped_len, 128u);
  auto p3 = a.allocate(512);
  ASSERT_TRUE(p3);
  EXPECT_EQ(p3->offset, 256u);
  EXPECT_FALSE(a.allocate(256));  // only 128 left before the skip region
  a.release(*p2->skipped_at);
  a.release(p2->offset);
  a.release(p3->offset);
  EXPECT_TRUE(a.empty());
}

TEST(RingAllocatorTest, EmptyRingNeverOverlapsResetMarker) {
  RingAllocator a(1024);
  auto p1 = a.allocate(384);
  a.release(p1->offset);
  EXPECT_FALSE(a.allocate(768));  // would cover the reset written at 384
  auto p2 = a.allocate(256);
  ASSERT_TRUE(p2);
  EXPECT_EQ(p2->offset, 384u);
  a.release(p2->offset);
  auto p3 = a.allocate(512);  // 384 left at the tail, 640 before the marker
  ASSERT_TRUE(p3);
  EXPECT_EQ(p3->offset, 0u);
  EXPECT_EQ(*p3->skipped_at, 640u);
}

TEST(RingAllocatorTest, ExactFillNeedsNoSkip) {
  RingAllocator a(1024);
  auto p1 = a.allocate(512);
  auto p2 = a.allocate(512);
  ASSERT_TRUE(p1 && p2);
  EXPECT_FALSE(p2->skipped_at);
  EXPECT_EQ(a.tail(), 0u);
  EXPECT_FALSE(a.allocate(128));
  a.release(p1->offset);
  auto p3 = a.allocate(128);
  ASSERT_TRUE(p3);
  EXPECT_EQ(p3->offset, 0u);
  EXPECT_FALSE(p3->skipped_at);
}

// --- scheduler policy ---------------------------------------------------------------

TEST(SchedulerPolicyTest, IdlePoolUsesCurrentWorker) {
  SchedulerPolicy p(4);
  const auto d = p.choose(0, {{0, false}, {0, false}});
  EXPECT_EQ(d.worker, 0u);
  EXPECT_EQ(d.reason, ScheduleReason::kCurrent);
  EXPECT_FALSE(d.wake);
}

TEST(SchedulerPolicyTest, CurrentAtThresholdRoutesToRunningWorker) {
  SchedulerPolicy p(4);
  const auto d = p.choose(0, {{4, false}, {4, false}, {1, false}, {0, true}});
  EXPECT_EQ(d.worker, 2u);
  EXPECT_EQ(d.reason, ScheduleReason::kRunning);
  EXPECT_FALSE(d.wake);
}

TEST(SchedulerPolicyTest, AllRunningBusyWakesOneSleeper) {
  SchedulerPolicy p(4);
  const auto d = p.choose(1, {{4, false}, {5, false}, {0, true}, {0, true}});
  EXPECT_EQ(d.worker, 2u);
  EXPECT_TRUE(d.wake);
  EXPECT_EQ(d.reason, ScheduleReason::kWake);
}

TEST(SchedulerPolicyTest, EveryoneBusyPicksLeastLoaded) {
  SchedulerPolicy p(2);
  const auto d = p.choose(0, {{5, false}, {3, false}, {4, false}});
  EXPECT_EQ(d.worker, 1u);
  EXPECT_EQ(d.reason, ScheduleReason::kLeastLoaded);
  EXPECT_FALSE(d.wake);
}

TEST(SchedulerPolicyTest, SleepingCurrentIsWokenWhenNobodyRuns) {
  SchedulerPolicy p(4);
  const auto d = p.choose(1, {{0, true}, {0, true}});
  EXPECT_EQ(d.worker, 1u);
  EXPECT_TRUE(d.wake);
}

// --- end to end -------------------------------------------------------------------

enum class Backend { kInProc, kSocket };

struct Harness {
  std::shared_ptr<transport::InProcFabric> fabric;
  std::unique_ptr<transport::Nic> server_nic, client_nic;
  std::unique_ptr<RpcServer> server;

  Harness(Backend b, Handler h, ServerOptions so) {
    if (b == Backend::kInProc) {
      fabric = transport::InProcFabric::create();
      server_nic = transport::make_inproc_nic(fabric, "s");
      client_nic = transport::make_inproc_nic(fabric, "c");
      server = std::make_unique<RpcServer>(*server_nic, "s:1", std::move(h), so);
    } else {
      server_nic = transport::make_socket_nic("s");
      client_nic = transport::make_socket_nic("c");
      server = std::make_unique<RpcServer>(*server_nic, "127.0.0.1:0", std::move(h), so);
    }
  }

  std::unique_ptr<RpcClient> client(ClientOptions co = {}) {
    return std::make_unique<RpcClient>(*client_nic, server->address(), co);
  }
};

Bytes echo(const Request& r) {
  if (r.op == Op::kDelete) raise(ErrorCode::kRedirect, "try elsewhere");
  if (r.op == Op::kScan) {
    // Reply of the size named in the payload.
    const uint32_t n = load_le<uint32_t>(r.payload.data());
    Bytes out(n);
    for (uint32_t i = 0; i < n; ++i) out[i] = static_cast<uint8_t>(i * 31 + 7);
    return out;
  }
  return r.payload;
}

class RpcTest : public ::testing::TestWithParam<Backend> {};

TEST_P(RpcTest, SingleByteRoundTrip) {
  Harness h(GetParam(), echo, {});
  auto c = h.client();
  EXPECT_EQ(to_string(c->call(Op::kGet, as_bytes("k"))), "k");
  EXPECT_EQ(h.server->stats().requests, 1u);
}

TEST_P(RpcTest, ErrorRepliesAreRethrown) {
  Harness h(GetParam(), echo, {});
  auto c = h.client();
  EXPECT_THROW_CODE(c->call(Op::kDelete, as_bytes("k")), ErrorCode::kRedirect);
  EXPECT_EQ(to_string(c->call(Op::kGet, as_bytes("after"))), "after");
}

TEST_P(RpcTest, OversizedReplyUsesContinuation) {
  Harness h(GetParam(), echo, {});
  ClientOptions co;
  co.default_reply_bytes = 256;
  auto c = h.client(co);
  for (uint32_t n : {0u, 95u, 2000u, 30000u}) {
    uint8_t p[4];
    store_le<uint32_t>(p, n);
    const Bytes got = c->call(Op::kScan, ByteView(p, 4));
    ASSERT_EQ(got.size(), n);
    for (uint32_t i = 0; i < n; ++i) ASSERT_EQ(got[i], static_cast<uint8_t>(i * 31 + 7));
  }
  EXPECT_GT(c->stats().continuations, 0u);
}

TEST_P(RpcTest, RandomSizesExactlyOnceInOrder) {
  std::mutex mu;
  std::vector<uint64_t> order;
  Handler h = [&](const Request& r) {
    std::lock_guard lock(mu);
    order.push_back(load_le<uint64_t>(r.payload.data()));
    return Bytes(r.payload.begin(), r.payload.begin() + 8);
  };
  ServerOptions so;
  so.workers = 1;  // tasks then run in creation order
  so.client_buffer_bytes = 16 * 1024;
  Harness hs(GetParam(), h, so);
  ClientOptions co;
  co.buffer_bytes = 16 * 1024;
  auto c = hs.client(co);
  std::mt19937_64 rng(17);
  const size_t max_payload = c->max_request_payload();
  for (uint64_t i = 0; i < 600; ++i) {
    Bytes p(8 + rng() % (max_payload - 8));
    store_le<uint64_t>(p.data(), i);
    const Bytes r = c->call(Op::kPut, p);
    ASSERT_EQ(load_le<uint64_t>(r.data()), i);
  }
  ASSERT_EQ(order.size(), 600u);
  for (uint64_t i = 0; i < order.size(); ++i) ASSERT_EQ(order[i], i);
  EXPECT_GT(c->stats().resets, 0u);
  EXPECT_EQ(hs.server->stats().resets, c->stats().resets);
}

// Many requests in flight: the client must never overwrite an unconsumed slot.
TEST_P(RpcTest, PipelinedRequestsNeverOverwrite) {
  ServerOptions so;
  so.client_buffer_bytes = 16 * 1024;
  Harness hs(GetParam(), echo, so);
  ClientOptions co;
  co.buffer_bytes = 16 * 1024;
  auto c = hs.client(co);
  std::mt19937_64 rng(23);
  std::deque<std::pair<RpcClient::Ticket, Bytes>> inflight;
  for (int i = 0; i < 2000; ++i) {
    Bytes p(1 + rng() % 3000);
    for (auto& b : p) b = static_cast<uint8_t>(rng());
    inflight.emplace_back(c->send(Op::kPut, p, p.size()), p);
    if (inflight.size() > 6 || rng() % 3 == 0) {
      ASSERT_EQ(c->wait(inflight.front().first), inflight.front().second);
      inflight.pop_front();
    }
  }
  while (!inflight.empty()) {
    ASSERT_EQ(c->wait(inflight.front().first), inflight.front().second);
    inflight.pop_front();
  }
}

TEST_P(RpcTest, ConcurrentClientsAndThreads) {
  ServerOptions so;
  so.workers = 3;
  Harness hs(GetParam(), echo, so);
  std::vector<std::unique_ptr<RpcClient>> clients;
  for (int i = 0; i < 4; ++i) clients.push_back(hs.client());
  std::atomic<int> bad{0};
  std::vector<std::thread> threads;
  for (int t = 0; t < 8; ++t) {
    threads.emplace_back([&, t] {
      RpcClient& c = *clients[static_cast<size_t>(t % 4)];
      for (int i = 0; i < 200; ++i) {
        const std::string s = fmt::format("t{}-{}", t, i);
        if (to_string(c.call(Op::kGet, as_bytes(s))) != s) ++bad;
      }
    });
  }
  for (auto& th : threads) th.join();
  EXPECT_EQ(bad.load(), 0);
  EXPECT_EQ(hs.server->stats().requests, 1600u);
}

TEST_P(RpcTest, TimeoutWhenServerStops) {
  Harness hs(GetParam(), [](const Request&) -> Bytes {
    std::this_thread::sleep_for(300ms);
    return {};
  }, {});
  ClientOptions co;
  co.timeout = 50ms;
  auto c = hs.client(co);
  EXPECT_THROW_CODE(c->call(Op::kGet, as_bytes("x")), ErrorCode::kTimeout);
  EXPECT_TRUE(c->closed());
}

INSTANTIATE_TEST_SUITE_P(Backends, RpcTest, ::testing::Values(Backend::kInProc, Backend::kSocket),
                         [](const auto& info) { return info.param == Backend::kInProc ? "InProc" : "Socket"; });

// Wake-ups only happen when every running worker is at or over the threshold.
TEST(SchedulerTraceTest, WakeupsAreMinimal) {
  ServerOptions so;
  so.workers = 4;
  so.task_threshold = 2;
  so.record_schedule = true;
  Harness hs(Backend::kInProc, [](const Request& r) {
    std::this_thread::sleep_for(std::chrono::microseconds(r.payload.size() * 10));
    return Bytes{};
  }, so);
  std::vector<std::unique_ptr<RpcClient>> clients;
  for (int i = 0; i < 6; ++i) clients.push_back(hs.client());
  std::vector<std::thread> threads;
  for (int t = 0; t < 6; ++t) {
    threads.emplace_back([&, t] {
      for (int i = 0; i < 60; ++i) {
        clients[static_cast<size_t>(t)]->call(Op::kPut, Bytes(static_cast<size_t>((i * 7 + t) % 40)));
        if (i % 20 == 0) std::this_thread::sleep_for(2ms);
      }
    });
  }
  for (auto& th : threads) th.join();
  const auto log = hs.server->schedule_log();
  ASSERT_EQ(log.size(), 360u);
  for (const auto& ev : log) {
    if (!ev.decision.wake) continue;
    for (const auto& w : ev.before) {
      if (!w.sleeping) EXPECT_GE(w.queue_len, so.task_threshold) << "event " << ev.seq;
    }
  }
}

}  // namespace
}  // namespace replkv::rpc
