#include "replkv/cluster/protocol.hpp"

#include <charconv>

#include <fmt/format.h>

namespace replkv::cluster {

std::string server_node(uint32_t id) { return fmt::format("{}/{}", kServersPath, id); }

Bytes OpenRegionRequest::encode() const {
  ByteWriter w;
  w.put_bytes(entry.encode());
  w.put<uint8_t>(static_cast<uint8_t>(role));
  w.put<uint8_t>(static_cast<uint8_t>(mode));
  w.put<uint64_t>(map_version);
  w.put<uint32_t>(static_cast<uint32_t>(peers.size()));
  for (const Peer& p : peers) {
    w.put<uint32_t>(p.id);
    w.put_string(p.address);
  }
  return w.take();
}

OpenRegionRequest OpenRegionRequest::decode(ByteView payload) {
  ByteReader r(payload);
  OpenRegionRequest q;
  q.entry = RegionEntry::decode(r.get_bytes(kRegionEntrySize));
  const auto role = r.get<uint8_t>();
  if (role > 1) raise(ErrorCode::kProtocol, "bad region role");
  q.role = static_cast<Role>(role);
  const auto mode = r.get<uint8_t>();
  if (mode > 2) raise(ErrorCode::kProtocol, "bad replication mode");
  q.mode = static_cast<replication::Mode>(mode);
  q.map_version = r.get<uint64_t>();
  q.peers.resize(r.get<uint32_t>());
  for (Peer& p : q.peers) {
    p.id = r.get<uint32_t>();
    p.address = r.get_string();
  }
  return q;
}

Bytes encode_put(uint32_t region, std::string_view key, std::string_view value) {
  ByteWriter w(12 + key.size() + value.size());
  w.put<uint32_t>(region).put_string(key).put_string(value);
  return w.take();
}

Bytes encode_key(uint32_t region, std::string_view key) {
  ByteWriter w;
  w.put<uint32_t>(region).put_string(key);
  return w.take();
}

Bytes encode_scan(uint32_t region, std::string_view start, uint32_t count) {
  ByteWriter w;
  w.put<uint32_t>(region).put_string(start).put<uint32_t>(count);
  return w.take();
}

Bytes encode_region(uint32_t region) {
  ByteWriter w;
  w.put<uint32_t>(region);
  return w.take();
}

Bytes encode_pairs(const KvPairs& pairs) {
  ByteWriter w;
  w.put<uint32_t>(static_cast<uint32_t>(pairs.size()));
  for (const auto& [k, v] : pairs) w.put_string(k).put_string(v);
  return w.take();
}

KvPairs decode_pairs(ByteView payload) {
  ByteReader r(payload);
  KvPairs out(r.get<uint32_t>());
  for (auto& [k, v] : out) {
    k = r.get_string();
    v = r.get_string();
  }
  return out;
}

uint64_t redirect_version(const Error& e) {
  if (e.code() != ErrorCode::kRedirect) return 0;
  const std::string_view what = e.what();
  const size_t sp = what.rfind(' ');
  if (sp == std::string_view::npos) return 0;
  uint64_t v = 0;
  std::from_chars(what.data() + sp + 1, what.data() + what.size(), v);
  return v;
}

}  // namespace replkv::cluster
