#include "replkv/cluster/coordinator_rpc.hpp"

#include <fmt/format.h>

namespace replkv::cluster {

namespace {

void put_sub(ByteWriter& w, CoordOp op) { w.put<uint8_t>(static_cast<uint8_t>(op)); }

}  // namespace

Bytes handle_coordinator_request(Coordinator& coord, ByteView payload) {
  ByteReader r(payload);
  const auto op = static_cast<CoordOp>(r.get<uint8_t>());
  ByteWriter w;
  switch (op) {
    case CoordOp::kOpenSession:
      w.put<uint64_t>(coord.open_session());
      break;
    case CoordOp::kHeartbeat:
      coord.heartbeat(r.get<uint64_t>());
      break;
    case CoordOp::kCloseSession:
      coord.close_session(r.get<uint64_t>());
      break;
    case CoordOp::kCreate: {
      const std::string path = r.get_string();
      const std::string data = r.get_string();
      const auto flags = r.get<uint8_t>();
      const auto session = r.get<uint64_t>();
      w.put_string(coord.create(path, data, flags, session));
      break;
    }
    case CoordOp::kSet: {
      const std::string path = r.get_string();
      coord.set(path, r.get_string());
      break;
    }
    case CoordOp::kGet: {
      const auto v = coord.get(r.get_string());
      w.put<uint8_t>(v ? 1 : 0);
      if (v) w.put_string(*v);
      break;
    }
    case CoordOp::kRemove:
      coord.remove(r.get_string());
      break;
    case CoordOp::kChildren: {
      const auto kids = coord.children(r.get_string());
      w.put<uint32_t>(static_cast<uint32_t>(kids.size()));
      for (const auto& k : kids) w.put_string(k);
      break;
    }
    case CoordOp::kSnapshot:
      w.put_string(coord.snapshot().dump());
      break;
    default:
      raise(ErrorCode::kProtocol, fmt::format("unknown coordinator op {}", static_cast<int>(op)));
  }
  return w.take();
}

CoordinatorServer::CoordinatorServer(transport::Nic& nic, const std::string& address,
                                     std::shared_ptr<Coordinator> coord, rpc::ServerOptions options)
    : coord_(std::move(coord)) {
  options.inline_op = [](rpc::Op op) { return op == rpc::Op::kCoordinator; };
  server_ = std::make_unique<rpc::RpcServer>(
      nic, address,
      [this](const rpc::Request& req) -> Bytes {
        if (req.op == rpc::Op::kPing) return {};
        if (req.op != rpc::Op::kCoordinator) raise(ErrorCode::kProtocol, "not a coordinator request");
        return handle_coordinator_request(*coord_, req.payload);
      },
      options);
}

RemoteCoordinator::RemoteCoordinator(transport::Nic& nic, std::string address, rpc::ClientOptions options)
    : nic_(nic), address_(std::move(address)), options_(options) {}

Bytes RemoteCoordinator::call(ByteWriter& w) {
  std::shared_ptr<rpc::RpcClient> c;
  try {
    {
      std::lock_guard lock(mu_);
      if (!client_ || client_->closed()) client_ = std::make_shared<rpc::RpcClient>(nic_, address_, options_);
      c = client_;
    }
    return c->call(rpc::Op::kCoordinator, w.bytes());
  } catch (const Error& e) {
    switch (e.code()) {
      case ErrorCode::kConnectionClosed:
      case ErrorCode::kUnreachable:
      case ErrorCode::kRefused:
      case ErrorCode::kTimeout:
        raise(ErrorCode::kCoordinatorUnavailable, e.what());
      default:
        throw;
    }
  }
}

SessionId RemoteCoordinator::open_session() {
  ByteWriter w;
  put_sub(w, CoordOp::kOpenSession);
  const Bytes r = call(w);
  return ByteReader(r).get<uint64_t>();
}

void RemoteCoordinator::heartbeat(SessionId session) {
  ByteWriter w;
  put_sub(w, CoordOp::kHeartbeat);
  w.put<uint64_t>(session);
  call(w);
}

void RemoteCoordinator::close_session(SessionId session) {
  ByteWriter w;
  put_sub(w, CoordOp::kCloseSession);
  w.put<uint64_t>(session);
  call(w);
}

std::string RemoteCoordinator::create(const std::string& path, const std::string& data, uint8_t flags,
                                      SessionId session) {
  ByteWriter w;
  put_sub(w, CoordOp::kCreate);
  w.put_string(path).put_string(data).put<uint8_t>(flags).put<uint64_t>(session);
  const Bytes r = call(w);
  return ByteReader(r).get_string();
}

void RemoteCoordinator::set(const std::string& path, const std::string& data) {
  ByteWriter w;
  put_sub(w, CoordOp::kSet);
  w.put_string(path).put_string(data);
  call(w);
}

std::optional<std::string> RemoteCoordinator::get(const std::string& path) {
  ByteWriter w;
  put_sub(w, CoordOp::kGet);
  w.put_string(path);
  const Bytes r = call(w);
  ByteReader rd(r);
  if (rd.get<uint8_t>() == 0) return std::nullopt;
  return rd.get_string();
}

void RemoteCoordinator::remove(const std::string& path) {
  ByteWriter w;
  put_sub(w, CoordOp::kRemove);
  w.put_string(path);
  call(w);
}

std::vector<std::string> RemoteCoordinator::children(const std::string& path) {
  ByteWriter w;
  put_sub(w, CoordOp::kChildren);
  w.put_string(path);
  const Bytes r = call(w);
  ByteReader rd(r);
  std::vector<std::string> out(rd.get<uint32_t>());
  for (auto& s : out) s = rd.get_string();
  return out;
}

nlohmann::json RemoteCoordinator::snapshot() {
  ByteWriter w;
  put_sub(w, CoordOp::kSnapshot);
  const Bytes r = call(w);
  return nlohmann::json::parse(ByteReader(r).get_string());
}

}  // namespace replkv::cluster
