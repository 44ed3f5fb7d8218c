#include <fstream>

#include <spdlog/spdlog.h>

#include "replkv/cli/config.hpp"
#include "test_util.hpp"

namespace replkv::cli {
namespace {

nlohmann::json example() {
  std::ifstream in(std::string(REPLKV_SOURCE_DIR) + "/docs/examples/cluster.json");
  return nlohmann::json::parse(in);
}

TEST(ClusterConfigTest, ExampleParses) {
  const ClusterConfig c = parse_cluster_config(example());
  EXPECT_EQ(c.servers.size(), 2u);
  EXPECT_EQ(c.regions, 32u);
  EXPECT_EQ(c.mode, replication::Mode::kSendIndex);
  EXPECT_EQ(c.engine.growth_factor, 4u);
  EXPECT_EQ(c.rpc.client_buffer_bytes, 256u * 1024);
  EXPECT_EQ(parse_cluster_config(to_json(c)).regions, c.regions);
  EXPECT_EQ(to_json(parse_cluster_config(to_json(c))), to_json(c));
}

TEST(ClusterConfigTest, RejectsUnknownKeys) {
  nlohmann::json j = example();
  j["colour"] = "blue";
  EXPECT_THROW_CODE(parse_cluster_config(j), ErrorCode::kConfig);
  j = example();
  j["engine"]["bloom_bits"] = 10;
  EXPECT_THROW_CODE(parse_cluster_config(j), ErrorCode::kConfig);
  j = example();
  j["servers"][0]["port"] = 1;
  EXPECT_THROW_CODE(parse_cluster_config(j), ErrorCode::kConfig);
}

TEST(ClusterConfigTest, RejectsInvalidValues) {
  auto with = [](const std::function<void(nlohmann::json&)>& edit) {
    nlohmann::json j = example();
    edit(j);
    return j;
  };
  EXPECT_THROW_CODE(parse_cluster_config(with([](auto& j) { j["engine"]["growth_factor"] = 1; })),
                    ErrorCode::kConfig);
  EXPECT_THROW_CODE(parse_cluster_config(with([](auto& j) { j["engine"]["growth_factor"] = "4"; })),
                    ErrorCode::kConfig);
  EXPECT_THROW_CODE(parse_cluster_config(with([](auto& j) { j["engine"]["segment_size"] = 65535; })),
                    ErrorCode::kConfig);
  EXPECT_THROW_CODE(parse_cluster_config(with([](auto& j) { j["servers"][1]["id"] = 1; })), ErrorCode::kConfig);
  EXPECT_THROW_CODE(parse_cluster_config(with([](auto& j) { j["servers"] = nlohmann::json::array(); })),
                    ErrorCode::kConfig);
  EXPECT_THROW_CODE(parse_cluster_config(with([](auto& j) { j["coordinator"]["heartbeat_ms"] = 500; })),
                    ErrorCode::kConfig);
  EXPECT_THROW_CODE(parse_cluster_config(with([](auto& j) { j["rpc"]["client_buffer_bytes"] = 4096; })),
                    ErrorCode::kConfig);
  EXPECT_THROW_CODE(parse_cluster_config(with([](auto& j) { j["mode"] = "mirror"; })), ErrorCode::kConfig);
  EXPECT_THROW_CODE(parse_cluster_config(with([](auto& j) { j["backups_per_region"] = 3; })), ErrorCode::kConfig);
  EXPECT_THROW_CODE(load_cluster_config("/nonexistent/cluster.json"), ErrorCode::kConfig);
}

TEST(ClusterConfigTest, EnvironmentOverrides) {
  nlohmann::json j = example();
  std::string a = "REPLKV_CONFIG__engine__growth_factor=8";
  std::string b = "REPLKV_CONFIG__mode=build_index";
  std::string c = "REPLKV_CONFIG__coordinator__address=10.0.0.1:9000";
  std::string d = "UNRELATED=1";
  char* env[] = {a.data(), b.data(), c.data(), d.data(), nullptr};
  apply_env_overrides(j, env);
  const ClusterConfig cfg = parse_cluster_config(j);
  EXPECT_EQ(cfg.engine.growth_factor, 8u);
  EXPECT_EQ(cfg.mode, replication::Mode::kBuildIndex);
  EXPECT_EQ(cfg.coordinator, "10.0.0.1:9000");

  std::string typo = "REPLKV_CONFIG__engine__growth=8";
  char* env2[] = {typo.data(), nullptr};
  nlohmann::json k = example();
  apply_env_overrides(k, env2);
  EXPECT_THROW_CODE(parse_cluster_config(k), ErrorCode::kConfig);
}

TEST(ClusterConfigTest, DerivedServerAndMasterOptions) {
  nlohmann::json j = example();
  j["servers"][1]["device_path"] = "/tmp/dev2";
  ClusterConfig c = parse_cluster_config(j);
  const cluster::ServerConfig sc = c.server_config(2);
  EXPECT_EQ(sc.id, 2u);
  EXPECT_EQ(sc.device_path, "/tmp/dev2");
  EXPECT_EQ(sc.heartbeat, c.heartbeat);
  EXPECT_THROW_CODE(c.server_config(9), ErrorCode::kConfig);
  EXPECT_EQ(c.master_options().servers, (std::vector<uint32_t>{1, 2}));
  EXPECT_EQ(c.master_options().backups_per_region, 1u);
  c.mode = replication::Mode::kNone;
  EXPECT_EQ(c.master_options().backups_per_region, 0u);
}

TEST(LoggingTest, JsonLinesEscapeMessages) {
  setup_logging("json", "info");
  ::testing::internal::CaptureStderr();
  spdlog::info("quote \" and newline \n inside");
  spdlog::debug("filtered");
  spdlog::default_logger()->flush();
  const std::string out = ::testing::internal::GetCapturedStderr();
  ASSERT_FALSE(out.empty());
  const auto line = nlohmann::json::parse(out.substr(0, out.find_last_of('}') + 1));
  EXPECT_EQ(line["level"], "info");
  EXPECT_EQ(line["msg"], "quote \" and newline \n inside");
  EXPECT_THROW_CODE(setup_logging("xml", "info"), ErrorCode::kConfig);
  EXPECT_THROW_CODE(setup_logging("text", "loud"), ErrorCode::kConfig);
  setup_logging("text", "warn");
}

}  // namespace
}  // namespace replkv::cli
