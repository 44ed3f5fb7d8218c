#pragma once

// Coordinator over rpc, for multi-process deployments. Every call is one
// COORDINATOR request whose payload starts with a sub-op byte.

#include <memory>
#include <mutex>

#include "replkv/cluster/coordinator.hpp"
#include "replkv/rpc/client.hpp"
#include "replkv/rpc/server.hpp"

namespace replkv::cluster {

enum class CoordOp : uint8_t {
  kOpenSession = 0,
  kHeartbeat = 1,
  kCloseSession = 2,
  kCreate = 3,
  kSet = 4,
  kGet = 5,
  kRemove = 6,
  kChildren = 7,
  kSnapshot = 8,
};

/// Serves one Coordinator; returns the reply payload of a COORDINATOR request.
Bytes handle_coordinator_request(Coordinator& coord, ByteView payload);

/// Standalone coordinator process body: an RpcServer answering COORDINATOR
/// requests inline.
class CoordinatorServer {
 public:
  CoordinatorServer(transport::Nic& nic, const std::string& address, std::shared_ptr<Coordinator> coord,
                    rpc::ServerOptions options = {});
  std::string address() const { return server_->address(); }
  Coordinator& coordinator() { return *coord_; }
  void stop() { server_->stop(); }

 private:
  std::shared_ptr<Coordinator> coord_;
  std::unique_ptr<rpc::RpcServer> server_;
};

/// Client side; connection failures surface as CoordinatorUnavailable and the
/// next call reconnects.
class RemoteCoordinator final : public CoordinationClient {
 public:
  RemoteCoordinator(transport::Nic& nic, std::string address, rpc::ClientOptions options = {});

  SessionId open_session() override;
  void heartbeat(SessionId session) override;
  void close_session(SessionId session) override;
  std::string create(const std::string& path, const std::string& data, uint8_t flags,
                     SessionId session = 0) override;
  void set(const std::string& path, const std::string& data) override;
  std::optional<std::string> get(const std::string& path) override;
  void remove(const std::string& path) override;
  std::vector<std::string> children(const std::string& path) override;
  nlohmann::json snapshot();

 private:
  Bytes call(ByteWriter& w);

  transport::Nic& nic_;
  std::string address_;
  rpc::ClientOptions options_;
  std::mutex mu_;
  std::shared_ptr<rpc::RpcClient> client_;
};

}  // namespace replkv::cluster
