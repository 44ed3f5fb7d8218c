#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace replkv {

using Bytes = std::vector<uint8_t>;
using ByteView = std::span<const uint8_t>;
using MutableByteView = std::span<uint8_t>;

enum class ErrorCode {
  kDeviceFull,
  kDoubleFree,
  kOutOfBounds,
  kInvalidArgument,
  kCorruptRecord,
  kMissingMapping,
  kIncompleteTransfer,
  kAlreadyFinalized,
  kBackupUnreachable,
  kConnectionClosed,
  kUnreachable,
  kRefused,
  kTimeout,
  kBufferFull,
  kCoordinatorUnavailable,
  kNodeExists,
  kNoNode,
  kServerUnreachable,
  kNoSpareServer,
  kNoBackupAlive,
  kZeroDataset,
  kZeroOps,
  kConfig,
  kProtocol,
  kRedirect,
};

std::string_view error_code_name(ErrorCode code);

/// Every failure surfaced by the library carries one of the codes above.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline ByteView as_bytes(std::string_view s) {
  return {reinterpret_cast<const uint8_t*>(s.data()), s.size()};
}

inline std::string to_string(ByteView b) { return {reinterpret_cast<const char*>(b.data()), b.size()}; }

// Little-endian fixed-width helpers. All on-device and on-wire formats use them.
template <typename T>
inline void store_le(uint8_t* dst, T v) {
  static_assert(std::is_unsigned_v<T>);
  for (size_t i = 0; i < sizeof(T); ++i) dst[i] = static_cast<uint8_t>(v >> (8 * i));
}

template <typename T>
inline T load_le(const uint8_t* src) {
  static_assert(std::is_unsigned_v<T>);
  T v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(src[i]) << (8 * i);
  return v;
}

class ByteWriter {
 public:
  ByteWriter() = default;
  explicit ByteWriter(size_t reserve) { buf_.reserve(reserve); }

  template <typename T>
  ByteWriter& put(T v) {
    const size_t at = buf_.size();
    buf_.resize(at + sizeof(T));
    store_le<T>(buf_.data() + at, v);
    return *this;
  }

  ByteWriter& put_bytes(ByteView b) {
    buf_.insert(buf_.end(), b.begin(), b.end());
    return *this;
  }

  // u32 length prefix followed by the bytes.
  ByteWriter& put_string(std::string_view s) {
    put<uint32_t>(static_cast<uint32_t>(s.size()));
    return put_bytes(as_bytes(s));
  }

  size_t size() const { return buf_.size(); }
  Bytes take() { return std::move(buf_); }
  const Bytes& bytes() const { return buf_; }

 private:
  Bytes buf_;
};

class ByteReader {
 public:
  explicit ByteReader(ByteView b) : data_(b) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v = load_le<T>(data_.data() + pos_);
    pos_ += sizeof(T);
    return v;
  }

  ByteView get_bytes(size_t n) {
    need(n);
    ByteView v = data_.subspan(pos_, n);
    pos_ += n;
    return v;
  }

  std::string get_string() {
    const uint32_t n = get<uint32_t>();
    return to_string(get_bytes(n));
  }

  size_t remaining() const { return data_.size() - pos_; }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(size_t n) const {
    if (data_.size() - pos_ < n) raise(ErrorCode::kProtocol, "truncated message");
  }

  ByteView data_;
  size_t pos_ = 0;
};

constexpr uint64_t round_up(uint64_t v, uint64_t unit) { return (v + unit - 1) / unit * unit; }

constexpr bool is_power_of_two(uint64_t v) { return v != 0 && (v & (v - 1)) == 0; }

}  // namespace replkv
