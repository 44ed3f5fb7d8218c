#include "replkv/cli/config.hpp"

#include <fstream>
#include <set>

#include <fmt/format.h>
#include <spdlog/pattern_formatter.h>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

namespace replkv::cli {

namespace {

[[noreturn]] void bad(const std::string& what) { raise(ErrorCode::kConfig, what); }

void check_keys(const nlohmann::json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) bad(fmt::format("{} must be an object", where));
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, v] : obj.items()) {
    if (!ok.count(key)) bad(fmt::format("unknown key '{}{}'", where.empty() ? "" : where + ".", key));
  }
}

template <typename T>
void read(const nlohmann::json& obj, const char* key, T& out, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  try {
    out = it->get<T>();
  } catch (const nlohmann::json::exception&) {
    bad(fmt::format("'{}{}' has the wrong type", where.empty() ? "" : where + ".", key));
  }
}

void read_ms(const nlohmann::json& obj, const char* key, Millis& out, const std::string& where) {
  int64_t ms = out.count();
  read(obj, key, ms, where);
  out = Millis(ms);
}

}  // namespace

void ClusterConfig::validate() const {
  if (coordinator.empty()) bad("coordinator.address is empty");
  if (session_timeout.count() <= 0) bad("coordinator.session_timeout_ms must be positive");
  if (heartbeat.count() <= 0 || heartbeat >= session_timeout) {
    bad("coordinator.heartbeat_ms must be positive and below the session timeout");
  }
  if (servers.empty()) bad("no servers configured");
  std::set<uint32_t> ids;
  for (const auto& s : servers) {
    if (s.id == 0) bad("server ids start at 1");
    if (!ids.insert(s.id).second) bad(fmt::format("server id {} appears twice", s.id));
    if (s.address.empty()) bad(fmt::format("server {} has no address", s.id));
  }
  if (regions == 0) bad("regions must be positive");
  if (backups_per_region > 2) bad("at most 2 backups per region");
  engine.validate();
  if (segment_size < 4096 || (segment_size & (segment_size - 1)) != 0) {
    bad("engine.segment_size must be a power of two of at least 4096");
  }
  if (device_capacity < segment_size * 4) bad("engine.device_capacity is below four segments");
  if (rpc.workers == 0 || rpc.spinners == 0) bad("rpc.workers and rpc.spinners must be positive");
  if (rpc.client_buffer_bytes < 16 * 1024 || rpc.client_buffer_bytes > 256 * 1024) {
    bad("rpc.client_buffer_bytes must be within 16 KiB..256 KiB");
  }
  if (master_poll.count() <= 0) bad("master.poll_ms must be positive");
}

const ServerEntry& ClusterConfig::server(uint32_t id) const {
  for (const auto& s : servers) {
    if (s.id == id) return s;
  }
  bad(fmt::format("server {} is not in the configuration", id));
}

cluster::ServerConfig ClusterConfig::server_config(uint32_t id) const {
  const ServerEntry& e = server(id);
  cluster::ServerConfig sc;
  sc.id = id;
  sc.address = e.address;
  sc.device_path = e.device_path;
  sc.device_capacity = device_capacity;
  sc.segment_size = segment_size;
  sc.engine = engine;
  sc.rpc = rpc;
  sc.heartbeat = heartbeat;
  return sc;
}

cluster::MasterOptions ClusterConfig::master_options() const {
  cluster::MasterOptions mo;
  for (const auto& s : servers) mo.servers.push_back(s.id);
  mo.regions = regions;
  mo.backups_per_region = mode == replication::Mode::kNone ? 0 : backups_per_region;
  mo.mode = mode;
  mo.bootstrap_wait = bootstrap_wait;
  return mo;
}

void apply_env_overrides(nlohmann::json& j, char** envp) {
  if (envp == nullptr) return;
  const std::string prefix = "REPLKV_CONFIG__";
  for (char** e = envp; *e != nullptr; ++e) {
    const std::string entry(*e);
    if (entry.rfind(prefix, 0) != 0) continue;
    const size_t eq = entry.find('=');
    if (eq == std::string::npos) continue;
    const std::string path = entry.substr(prefix.size(), eq - prefix.size());
    const std::string raw = entry.substr(eq + 1);
    nlohmann::json* node = &j;
    size_t pos = 0;
    while (true) {
      const size_t next = path.find("__", pos);
      const std::string part = path.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
      if (part.empty()) bad(fmt::format("bad override variable {}", entry.substr(0, eq)));
      if (next == std::string::npos) {
        nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
        (*node)[part] = value.is_discarded() ? nlohmann::json(raw) : value;
        break;
      }
      node = &(*node)[part];
      pos = next + 2;
    }
  }
}

ClusterConfig parse_cluster_config(const nlohmann::json& j) {
  ClusterConfig c;
  check_keys(j, "", {"coordinator", "servers", "regions", "backups_per_region", "mode", "engine", "rpc", "master"});
  if (auto it = j.find("coordinator"); it != j.end()) {
    check_keys(*it, "coordinator", {"address", "session_timeout_ms", "heartbeat_ms"});
    read(*it, "address", c.coordinator, "coordinator");
    read_ms(*it, "session_timeout_ms", c.session_timeout, "coordinator");
    read_ms(*it, "heartbeat_ms", c.heartbeat, "coordinator");
  }
  if (auto it = j.find("servers"); it != j.end()) {
    if (!it->is_array()) bad("servers must be an array");
    for (const auto& s : *it) {
      check_keys(s, "servers[]", {"id", "address", "device_path"});
      ServerEntry e;
      read(s, "id", e.id, "servers[]");
      read(s, "address", e.address, "servers[]");
      read(s, "device_path", e.device_path, "servers[]");
      c.servers.push_back(e);
    }
  }
  read(j, "regions", c.regions, "");
  read(j, "backups_per_region", c.backups_per_region, "");
  if (auto it = j.find("mode"); it != j.end()) {
    try {
      c.mode = replication::parse_mode(it->get<std::string>());
    } catch (const std::exception& e) {
      bad(fmt::format("mode: {}", e.what()));
    }
  }
  if (auto it = j.find("engine"); it != j.end()) {
    check_keys(*it, "engine", {"growth_factor", "l0_keys", "segment_size", "device_capacity"});
    read(*it, "growth_factor", c.engine.growth_factor, "engine");
    read(*it, "l0_keys", c.engine.l0_capacity_keys, "engine");
    read(*it, "segment_size", c.segment_size, "engine");
    read(*it, "device_capacity", c.device_capacity, "engine");
  }
  if (auto it = j.find("rpc"); it != j.end()) {
    check_keys(*it, "rpc", {"workers", "spinners", "task_threshold", "client_buffer_bytes", "idle_sleep_us"});
    read(*it, "workers", c.rpc.workers, "rpc");
    read(*it, "spinners", c.rpc.spinners, "rpc");
    read(*it, "task_threshold", c.rpc.task_threshold, "rpc");
    read(*it, "client_buffer_bytes", c.rpc.client_buffer_bytes, "rpc");
    int64_t idle = c.rpc.idle_sleep.count();
    read(*it, "idle_sleep_us", idle, "rpc");
    c.rpc.idle_sleep = std::chrono::microseconds(idle);
  }
  if (auto it = j.find("master"); it != j.end()) {
    check_keys(*it, "master", {"poll_ms", "bootstrap_wait_ms"});
    read_ms(*it, "poll_ms", c.master_poll, "master");
    read_ms(*it, "bootstrap_wait_ms", c.bootstrap_wait, "master");
  }
  c.validate();
  return c;
}

ClusterConfig load_cluster_config(const std::string& path, char** envp) {
  std::ifstream in(path);
  if (!in) bad(fmt::format("cannot open {}", path));
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) bad(fmt::format("{} is not valid JSON", path));
  apply_env_overrides(j, envp);
  return parse_cluster_config(j);
}

nlohmann::json to_json(const ClusterConfig& c) {
  nlohmann::json servers = nlohmann::json::array();
  for (const auto& s : c.servers) {
    nlohmann::json e{{"id", s.id}, {"address", s.address}};
    if (!s.device_path.empty()) e["device_path"] = s.device_path;
    servers.push_back(e);
  }
  return {{"coordinator",
           {{"address", c.coordinator},
            {"session_timeout_ms", c.session_timeout.count()},
            {"heartbeat_ms", c.heartbeat.count()}}},
          {"servers", servers},
          {"regions", c.regions},
          {"backups_per_region", c.backups_per_region},
          {"mode", replication::mode_name(c.mode)},
          {"engine",
           {{"growth_factor", c.engine.growth_factor},
            {"l0_keys", c.engine.l0_capacity_keys},
            {"segment_size", c.segment_size},
            {"device_capacity", c.device_capacity}}},
          {"rpc",
           {{"workers", c.rpc.workers},
            {"spinners", c.rpc.spinners},
            {"task_threshold", c.rpc.task_threshold},
            {"client_buffer_bytes", c.rpc.client_buffer_bytes},
            {"idle_sleep_us", c.rpc.idle_sleep.count()}}},
          {"master", {{"poll_ms", c.master_poll.count()}, {"bootstrap_wait_ms", c.bootstrap_wait.count()}}}};
}

namespace {

class JsonMessageFlag final : public spdlog::custom_flag_formatter {
 public:
  void format(const spdlog::details::log_msg& msg, const std::tm&, spdlog::memory_buf_t& dest) override {
    const std::string escaped = nlohmann::json(std::string(msg.payload.data(), msg.payload.size())).dump();
    dest.append(escaped.data(), escaped.data() + escaped.size());
  }
  std::unique_ptr<custom_flag_formatter> clone() const override { return std::make_unique<JsonMessageFlag>(); }
};

}  // namespace

void setup_logging(const std::string& format, const std::string& level) {
  spdlog::drop("replkv");
  auto logger = spdlog::stderr_logger_mt("replkv");
  spdlog::set_default_logger(logger);
  if (format == "json") {
    auto formatter = std::make_unique<spdlog::pattern_formatter>(spdlog::pattern_time_type::utc);
    formatter->add_flag<JsonMessageFlag>('*').set_pattern(
        R"({"ts":"%Y-%m-%dT%H:%M:%S.%fZ","level":"%l","pid":%P,"thread":%t,"msg":%*})");
    spdlog::set_formatter(std::move(formatter));
  } else if (format != "text") {
    bad(fmt::format("unknown log format '{}'", format));
  }
  const auto lvl = spdlog::level::from_str(level);
  if (lvl == spdlog::level::off && level != "off") bad(fmt::format("unknown log level '{}'", level));
  spdlog::set_level(lvl);
}

}  // namespace replkv::cli
