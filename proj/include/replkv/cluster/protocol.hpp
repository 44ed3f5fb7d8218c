#pragma once

// Client and control payloads of a region server (little-endian, strings
// carry a u32 length):
//   PUT           [region:u32][key][value]
//   GET           [region:u32][key]                   -> [found:u8][value]
//   DELETE        [region:u32][key]
//   SCAN          [region:u32][start][count:u32]      -> [n:u32]([key][value])*
//   OPEN_REGION   [entry:64][role:u8][mode:u8][map_version:u64][n:u32]([server:u32][address])*
//   PROMOTE       same as OPEN_REGION; role must be primary
//   CLOSE_REGION  [region:u32]
//   FLUSH_REGION  [region:u32]  (kAllRegions flushes every primary)
//   REGION_STATS  [region:u32]                        -> [json]
//   SERVER_STATS  []                                  -> [json]
// A request for a region the server is not primary of fails with Redirect;
// the message ends with the newest map version the server has seen.

#include <string>
#include <utility>
#include <vector>

#include "replkv/cluster/region_map.hpp"
#include "replkv/replication.hpp"

namespace replkv::cluster {

constexpr uint32_t kAllRegions = 0xFFFFFFFF;

/// Path of a server's registration node; its data is the rpc address.
std::string server_node(uint32_t id);
constexpr const char* kServersPath = "/servers";

enum class Role : uint8_t { kPrimary = 0, kBackup = 1 };

struct Peer {
  uint32_t id = 0;
  std::string address;
};

struct OpenRegionRequest {
  RegionEntry entry;
  Role role = Role::kPrimary;
  replication::Mode mode = replication::Mode::kNone;
  uint64_t map_version = 0;
  std::vector<Peer> peers;  // addresses of the entry's other members

  Bytes encode() const;
  static OpenRegionRequest decode(ByteView payload);
};

Bytes encode_put(uint32_t region, std::string_view key, std::string_view value);
Bytes encode_key(uint32_t region, std::string_view key);
Bytes encode_scan(uint32_t region, std::string_view start, uint32_t count);
Bytes encode_region(uint32_t region);

using KvPairs = std::vector<std::pair<std::string, std::string>>;
Bytes encode_pairs(const KvPairs& pairs);
KvPairs decode_pairs(ByteView payload);

/// Map version carried by a Redirect error message, or 0.
uint64_t redirect_version(const Error& e);

}  // namespace replkv::cluster
