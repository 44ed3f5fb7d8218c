#pragma once

// Coordination service: a tree of named nodes with sessions, ephemeral and
// sequential nodes, and watches. Paths are "/"-separated; parents are
// created implicitly as persistent nodes.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "replkv/common.hpp"

namespace replkv::cluster {

using Millis = std::chrono::milliseconds;

class Clock {
 public:
  virtual ~Clock() = default;
  virtual Millis now() const = 0;
};

class SystemClock final : public Clock {
 public:
  Millis now() const override;
};

/// Test clock; time moves only through advance().
class ManualClock final : public Clock {
 public:
  Millis now() const override { return Millis(now_.load()); }
  void advance(Millis d) { now_.fetch_add(d.count()); }

 private:
  std::atomic<int64_t> now_{0};
};

namespace node_flags {
constexpr uint8_t kEphemeral = 0x01;
constexpr uint8_t kSequential = 0x02;
}  // namespace node_flags

using SessionId = uint64_t;

/// Operations shared by the embedded coordinator and its rpc client.
class CoordinationClient {
 public:
  virtual ~CoordinationClient() = default;

  virtual SessionId open_session() = 0;
  /// Throws kNoNode once the session has expired.
  virtual void heartbeat(SessionId session) = 0;
  /// Graceful close: the session's ephemeral nodes go away at once.
  virtual void close_session(SessionId session) = 0;

  /// Returns the created path (with the sequence suffix for sequential
  /// nodes). Ephemeral nodes need a session. Throws kNodeExists.
  virtual std::string create(const std::string& path, const std::string& data, uint8_t flags,
                             SessionId session = 0) = 0;
  /// Creates or overwrites a persistent node.
  virtual void set(const std::string& path, const std::string& data) = 0;
  virtual std::optional<std::string> get(const std::string& path) = 0;
  /// Throws kNoNode.
  virtual void remove(const std::string& path) = 0;
  /// Child names (not full paths), sorted.
  virtual std::vector<std::string> children(const std::string& path) = 0;
};

struct CoordinatorOptions {
  Millis session_timeout{500};
  /// Run a thread that expires sessions; otherwise call expire_sessions().
  bool reaper = true;
};

enum class WatchEvent : uint8_t { kCreated, kDeleted, kChanged };

/// Called with the path of the node that changed. Watches on a path also see
/// changes of its direct children.
using WatchCallback = std::function<void(WatchEvent, const std::string& path)>;

/// In-process coordinator. All operations are applied in one serial order;
/// watch callbacks run after the operation, outside the internal lock.
class Coordinator final : public CoordinationClient {
 public:
  explicit Coordinator(CoordinatorOptions options = {}, std::shared_ptr<Clock> clock = nullptr);
  ~Coordinator() override;

  SessionId open_session() override;
  void heartbeat(SessionId session) override;
  void close_session(SessionId session) override;
  std::string create(const std::string& path, const std::string& data, uint8_t flags,
                     SessionId session = 0) override;
  void set(const std::string& path, const std::string& data) override;
  std::optional<std::string> get(const std::string& path) override;
  void remove(const std::string& path) override;
  std::vector<std::string> children(const std::string& path) override;

  uint64_t watch(const std::string& path, WatchCallback cb);
  void unwatch(uint64_t id);

  /// Deletes sessions (and their ephemeral nodes) that missed the timeout.
  /// Returns the number of sessions expired.
  size_t expire_sessions();

  /// Fault injection: while unavailable every call throws CoordinatorUnavailable.
  void set_available(bool available) { available_.store(available); }
  bool session_alive(SessionId session) const;
  const CoordinatorOptions& options() const { return options_; }
  nlohmann::json snapshot() const;

 private:
  struct Node {
    std::string data;
    SessionId owner = 0;
    uint64_t version = 0;
  };
  struct Session {
    Millis last_heartbeat{0};
  };
  struct Pending {
    WatchEvent event;
    std::string path;
  };

  void check_available() const;
  void ensure_parents_locked(const std::string& path, std::vector<Pending>& events);
  void erase_locked(const std::string& path, std::vector<Pending>& events);
  void notify(const std::vector<Pending>& events);
  size_t expire_locked(std::vector<Pending>& events);
  void reaper_loop();

  CoordinatorOptions options_;
  std::shared_ptr<Clock> clock_;
  std::atomic<bool> available_{true};

  mutable std::mutex mu_;
  std::map<std::string, Node> nodes_;
  std::map<SessionId, Session> sessions_;
  std::map<std::string, uint64_t> sequence_;  // parent path -> next sequence number
  SessionId next_session_ = 1;

  std::mutex watch_mu_;
  std::map<uint64_t, std::pair<std::string, WatchCallback>> watches_;
  uint64_t next_watch_ = 1;

  std::mutex reaper_mu_;
  std::condition_variable reaper_cv_;
  bool stopping_ = false;
  std::thread reaper_;
};

/// Keeps a session alive from a background thread.
class SessionKeeper {
 public:
  SessionKeeper(std::shared_ptr<CoordinationClient> coord, Millis interval);
  ~SessionKeeper();

  SessionId session() const { return session_; }
  bool expired() const { return expired_.load(); }
  /// Stops heartbeating without telling the coordinator (crash emulation).
  void abandon();
  /// Stops heartbeating and closes the session.
  void close();

 private:
  void loop();
  void stop_thread();

  std::shared_ptr<CoordinationClient> coord_;
  Millis interval_;
  SessionId session_;
  std::atomic<bool> expired_{false};
  std::mutex mu_;
  std::condition_variable cv_;
  bool stopping_ = false;
  std::thread thread_;
};

/// Leader election over sequential ephemeral nodes under `root`: the
/// candidate with the lowest sequence number leads. Each new leader takes a
/// fresh epoch from a sequential node under `root`/epochs.
class Election {
 public:
  Election(std::shared_ptr<CoordinationClient> coord, SessionId session, std::string root, std::string candidate_id);

  /// Enters the election (idempotent).
  void join();
  /// Re-reads the candidate list. Returns true while this candidate leads.
  bool check();
  bool leader() const { return leader_; }
  uint64_t epoch() const { return epoch_; }
  /// Id of the current leader, if any candidate is registered.
  std::optional<std::string> current_leader();
  void leave();

 private:
  std::shared_ptr<CoordinationClient> coord_;
  SessionId session_;
  std::string root_;
  std::string id_;
  std::string my_node_;
  bool leader_ = false;
  uint64_t epoch_ = 0;
};

/// Splits a path into its parent and last component.
std::pair<std::string, std::string> split_path(const std::string& path);

}  // namespace replkv::cluster
