#include "replkv/cluster/coordinator.hpp"

#include <algorithm>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace replkv::cluster {

namespace {

constexpr int kSequenceDigits = 10;

void check_path(const std::string& path) {
  if (path.empty() || path[0] != '/' || (path.size() > 1 && path.back() == '/') ||
      path.find("//") != std::string::npos) {
    raise(ErrorCode::kInvalidArgument, fmt::format("bad coordinator path '{}'", path));
  }
}

bool is_child(const std::string& parent, const std::string& path) {
  const std::string prefix = parent == "/" ? "/" : parent + "/";
  return path.size() > prefix.size() && path.compare(0, prefix.size(), prefix) == 0 &&
         path.find('/', prefix.size()) == std::string::npos;
}

}  // namespace

std::pair<std::string, std::string> split_path(const std::string& path) {
  const size_t slash = path.rfind('/');
  if (slash == std::string::npos) return {"", path};
  return {slash == 0 ? "/" : path.substr(0, slash), path.substr(slash + 1)};
}

Millis SystemClock::now() const {
  return std::chrono::duration_cast<Millis>(std::chrono::steady_clock::now().time_since_epoch());
}

Coordinator::Coordinator(CoordinatorOptions options, std::shared_ptr<Clock> clock)
    : options_(options), clock_(clock ? std::move(clock) : std::make_shared<SystemClock>()) {
  nodes_["/"] = Node{};
  if (options_.reaper) reaper_ = std::thread([this] { reaper_loop(); });
}

Coordinator::~Coordinator() {
  {
    std::lock_guard lock(reaper_mu_);
    stopping_ = true;
  }
  reaper_cv_.notify_all();
  if (reaper_.joinable()) reaper_.join();
}

void Coordinator::check_available() const {
  if (!available_.load()) raise(ErrorCode::kCoordinatorUnavailable, "coordinator is unavailable");
}

SessionId Coordinator::open_session() {
  check_available();
  std::lock_guard lock(mu_);
  const SessionId id = next_session_++;
  sessions_[id] = Session{clock_->now()};
  return id;
}

void Coordinator::heartbeat(SessionId session) {
  check_available();
  std::lock_guard lock(mu_);
  auto it = sessions_.find(session);
  if (it == sessions_.end()) raise(ErrorCode::kNoNode, fmt::format("session {} expired", session));
  it->second.last_heartbeat = clock_->now();
}

void Coordinator::close_session(SessionId session) {
  check_available();
  std::vector<Pending> events;
  {
    std::lock_guard lock(mu_);
    if (sessions_.erase(session) == 0) return;
    std::vector<std::string> owned;
    for (const auto& [path, node] : nodes_) {
      if (node.owner == session) owned.push_back(path);
    }
    for (const auto& p : owned) erase_locked(p, events);
  }
  notify(events);
}

bool Coordinator::session_alive(SessionId session) const {
  std::lock_guard lock(mu_);
  return sessions_.count(session) != 0;
}

void Coordinator::ensure_parents_locked(const std::string& path, std::vector<Pending>& events) {
  const std::string parent = split_path(path).first;
  if (parent.empty() || nodes_.count(parent)) return;
  ensure_parents_locked(parent, events);
  nodes_[parent] = Node{};
  events.push_back({WatchEvent::kCreated, parent});
}

std::string Coordinator::create(const std::string& path, const std::string& data, uint8_t flags,
                                SessionId session) {
  check_available();
  check_path(path);
  std::vector<Pending> events;
  std::string actual = path;
  {
    std::lock_guard lock(mu_);
    const bool ephemeral = flags & node_flags::kEphemeral;
    if (ephemeral && !sessions_.count(session)) {
      raise(ErrorCode::kNoNode, fmt::format("session {} does not exist", session));
    }
    const std::string parent = split_path(path).first;
    auto pit = nodes_.find(parent);
    if (pit != nodes_.end() && pit->second.owner != 0) {
      raise(ErrorCode::kInvalidArgument, "ephemeral nodes cannot have children");
    }
    if (flags & node_flags::kSequential) {
      const uint64_t seq = sequence_[parent]++;
      actual = fmt::format("{}{:0{}}", path, seq, kSequenceDigits);
    }
    if (nodes_.count(actual)) raise(ErrorCode::kNodeExists, fmt::format("node {} exists", actual));
    ensure_parents_locked(actual, events);
    nodes_[actual] = Node{data, ephemeral ? session : 0, 0};
    events.push_back({WatchEvent::kCreated, actual});
  }
  notify(events);
  return actual;
}

void Coordinator::set(const std::string& path, const std::string& data) {
  check_available();
  check_path(path);
  std::vector<Pending> events;
  {
    std::lock_guard lock(mu_);
    auto it = nodes_.find(path);
    if (it == nodes_.end()) {
      ensure_parents_locked(path, events);
      nodes_[path] = Node{data, 0, 0};
      events.push_back({WatchEvent::kCreated, path});
    } else {
      it->second.data = data;
      ++it->second.version;
      events.push_back({WatchEvent::kChanged, path});
    }
  }
  notify(events);
}

std::optional<std::string> Coordinator::get(const std::string& path) {
  check_available();
  std::lock_guard lock(mu_);
  auto it = nodes_.find(path);
  if (it == nodes_.end()) return std::nullopt;
  return it->second.data;
}

void Coordinator::erase_locked(const std::string& path, std::vector<Pending>& events) {
  auto it = nodes_.find(path);
  if (it == nodes_.end()) return;
  // Children first.
  const std::string prefix = path == "/" ? "/" : path + "/";
  std::vector<std::string> below;
  for (auto c = nodes_.lower_bound(prefix); c != nodes_.end() && c->first.compare(0, prefix.size(), prefix) == 0;
       ++c) {
    below.push_back(c->first);
  }
  for (auto b = below.rbegin(); b != below.rend(); ++b) {
    nodes_.erase(*b);
    events.push_back({WatchEvent::kDeleted, *b});
  }
  nodes_.erase(path);
  events.push_back({WatchEvent::kDeleted, path});
}

void Coordinator::remove(const std::string& path) {
  check_available();
  check_path(path);
  if (path == "/") raise(ErrorCode::kInvalidArgument, "cannot remove the root");
  std::vector<Pending> events;
  {
    std::lock_guard lock(mu_);
    if (!nodes_.count(path)) raise(ErrorCode::kNoNode, fmt::format("node {} does not exist", path));
    erase_locked(path, events);
  }
  notify(events);
}

std::vector<std::string> Coordinator::children(const std::string& path) {
  check_available();
  std::lock_guard lock(mu_);
  std::vector<std::string> out;
  const std::string prefix = path == "/" ? "/" : path + "/";
  for (auto it = nodes_.lower_bound(prefix); it != nodes_.end() && it->first.compare(0, prefix.size(), prefix) == 0;
       ++it) {
    if (is_child(path, it->first)) out.push_back(it->first.substr(prefix.size()));
  }
  return out;
}

uint64_t Coordinator::watch(const std::string& path, WatchCallback cb) {
  std::lock_guard lock(watch_mu_);
  const uint64_t id = next_watch_++;
  watches_[id] = {path, std::move(cb)};
  return id;
}

void Coordinator::unwatch(uint64_t id) {
  std::lock_guard lock(watch_mu_);
  watches_.erase(id);
}

void Coordinator::notify(const std::vector<Pending>& events) {
  if (events.empty()) return;
  std::vector<std::pair<WatchCallback, Pending>> calls;
  {
    std::lock_guard lock(watch_mu_);
    for (const Pending& e : events) {
      for (const auto& [id, w] : watches_) {
        if (w.first == e.path || is_child(w.first, e.path)) calls.emplace_back(w.second, e);
      }
    }
  }
  for (auto& [cb, e] : calls) cb(e.event, e.path);
}

size_t Coordinator::expire_locked(std::vector<Pending>& events) {
  const Millis now = clock_->now();
  std::vector<SessionId> dead;
  for (const auto& [id, s] : sessions_) {
    if (now - s.last_heartbeat > options_.session_timeout) dead.push_back(id);
  }
  for (SessionId id : dead) {
    sessions_.erase(id);
    std::vector<std::string> owned;
    for (const auto& [path, node] : nodes_) {
      if (node.owner == id) owned.push_back(path);
    }
    for (const auto& p : owned) erase_locked(p, events);
    spdlog::info("coordinator: session {} expired, {} ephemeral nodes removed", id, owned.size());
  }
  return dead.size();
}

size_t Coordinator::expire_sessions() {
  std::vector<Pending> events;
  size_t n;
  {
    std::lock_guard lock(mu_);
    n = expire_locked(events);
  }
  notify(events);
  return n;
}

void Coordinator::reaper_loop() {
  const Millis period = std::max<Millis>(Millis(1), options_.session_timeout / 10);
  std::unique_lock lock(reaper_mu_);
  while (!stopping_) {
    reaper_cv_.wait_for(lock, period, [this] { return stopping_; });
    if (stopping_) break;
    lock.unlock();
    expire_sessions();
    lock.lock();
  }
}

nlohmann::json Coordinator::snapshot() const {
  std::lock_guard lock(mu_);
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& [path, node] : nodes_) {
    nodes.push_back({{"path", path}, {"data", node.data}, {"ephemeral_owner", node.owner}, {"version", node.version}});
  }
  nlohmann::json sessions = nlohmann::json::array();
  const Millis now = clock_->now();
  for (const auto& [id, s] : sessions_) {
    sessions.push_back({{"id", id}, {"idle_ms", (now - s.last_heartbeat).count()}});
  }
  return {{"session_timeout_ms", options_.session_timeout.count()}, {"nodes", nodes}, {"sessions", sessions}};
}

// --- SessionKeeper --------------------------------------------------------------

SessionKeeper::SessionKeeper(std::shared_ptr<CoordinationClient> coord, Millis interval)
    : coord_(std::move(coord)), interval_(interval), session_(coord_->open_session()) {
  thread_ = std::thread([this] { loop(); });
}

SessionKeeper::~SessionKeeper() { stop_thread(); }

void SessionKeeper::loop() {
  std::unique_lock lock(mu_);
  while (!stopping_) {
    cv_.wait_for(lock, interval_, [this] { return stopping_; });
    if (stopping_) break;
    lock.unlock();
    try {
      coord_->heartbeat(session_);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::kNoNode) {
        expired_.store(true);
        spdlog::warn("session {} expired", session_);
        return;
      }
      spdlog::debug("heartbeat failed: {}", e.what());
    }
    lock.lock();
  }
}

void SessionKeeper::stop_thread() {
  {
    std::lock_guard lock(mu_);
    stopping_ = true;
  }
  cv_.notify_all();
  if (thread_.joinable()) thread_.join();
}

void SessionKeeper::abandon() { stop_thread(); }

void SessionKeeper::close() {
  stop_thread();
  try {
    coord_->close_session(session_);
  } catch (const Error& e) {
    spdlog::debug("close session {}: {}", session_, e.what());
  }
}

// --- Election -------------------------------------------------------------------

Election::Election(std::shared_ptr<CoordinationClient> coord, SessionId session, std::string root,
                   std::string candidate_id)
    : coord_(std::move(coord)), session_(session), root_(std::move(root)), id_(std::move(candidate_id)) {}

void Election::join() {
  if (!my_node_.empty()) return;
  my_node_ = coord_->create(root_ + "/candidates/c_", id_, node_flags::kEphemeral | node_flags::kSequential,
                            session_);
}

bool Election::check() {
  join();
  const auto kids = coord_->children(root_ + "/candidates");
  const std::string mine = split_path(my_node_).second;
  if (std::find(kids.begin(), kids.end(), mine) == kids.end()) {
    // Our node is gone (session expired); we can never lead again with it.
    leader_ = false;
    return false;
  }
  const bool lead = !kids.empty() && kids.front() == mine;
  if (lead && !leader_) {
    const std::string e = coord_->create(root_ + "/epochs/e_", id_, node_flags::kSequential);
    epoch_ = std::stoull(split_path(e).second.substr(2)) + 1;
    coord_->set(root_ + "/leader", fmt::format("{} {}", id_, epoch_));
  }
  leader_ = lead;
  return leader_;
}

std::optional<std::string> Election::current_leader() {
  const auto kids = coord_->children(root_ + "/candidates");
  if (kids.empty()) return std::nullopt;
  return coord_->get(root_ + "/candidates/" + kids.front());
}

void Election::leave() {
  if (my_node_.empty()) return;
  try {
    coord_->remove(my_node_);
  } catch (const Error&) {
  }
  my_node_.clear();
  leader_ = false;
}

}  // namespace replkv::cluster
