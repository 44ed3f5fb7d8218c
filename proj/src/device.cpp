#include "replkv/device.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include <fmt/format.h>

namespace replkv {

Device::Device(uint64_t capacity, uint64_t segment_size)
    : capacity_(capacity), segment_size_(segment_size) {
  if (!is_power_of_two(segment_size)) {
    raise(ErrorCode::kInvalidArgument, fmt::format("segment size {} is not a power of two", segment_size));
  }
  if (capacity == 0 || capacity % segment_size != 0) {
    raise(ErrorCode::kInvalidArgument,
          fmt::format("capacity {} is not a positive multiple of segment size {}", capacity, segment_size));
  }
  kinds_.assign(capacity / segment_size, SegmentKind::kFree);
}

Segment Device::allocate_segment(SegmentKind kind) {
  if (kind == SegmentKind::kFree) raise(ErrorCode::kInvalidArgument, "cannot allocate a free segment");
  std::lock_guard lock(alloc_mu_);
  uint64_t index;
  if (!freed_.empty()) {
    index = *freed_.begin();
    freed_.erase(freed_.begin());
  } else if (high_water_ < kinds_.size()) {
    index = high_water_++;
  } else {
    raise(ErrorCode::kDeviceFull, fmt::format("all {} segments in use", kinds_.size()));
  }
  kinds_[index] = kind;
  ++allocated_;
  return Segment{DeviceOffset{index * segment_size_}, segment_size_, kind};
}

void Device::free_segment(const Segment& seg) {
  if (seg.start.value % segment_size_ != 0 || seg.start.value >= capacity_) {
    raise(ErrorCode::kInvalidArgument, fmt::format("{:#x} is not a segment start", seg.start.value));
  }
  const uint64_t index = seg.start.value / segment_size_;
  std::lock_guard lock(alloc_mu_);
  if (kinds_[index] == SegmentKind::kFree) {
    raise(ErrorCode::kDoubleFree, fmt::format("segment {:#x} is already free", seg.start.value));
  }
  kinds_[index] = SegmentKind::kFree;
  freed_.insert(index);
  --allocated_;
}

SegmentKind Device::kind_of(DeviceOffset segment_start) const {
  std::lock_guard lock(alloc_mu_);
  return kinds_.at(segment_start.value / segment_size_);
}

uint64_t Device::free_segment_count() const {
  std::lock_guard lock(alloc_mu_);
  return kinds_.size() - allocated_;
}

uint64_t Device::allocated_segment_count() const {
  std::lock_guard lock(alloc_mu_);
  return allocated_;
}

void Device::check_range(DeviceOffset off, size_t len) const {
  if (off.value > capacity_ || len > capacity_ - off.value) {
    raise(ErrorCode::kOutOfBounds,
          fmt::format("[{:#x}, +{}) exceeds device capacity {:#x}", off.value, len, capacity_));
  }
}

void Device::write_at(DeviceOffset off, ByteView bytes) {
  check_range(off, bytes.size());
  raw_write(off.value, bytes);
  bytes_written_.fetch_add(bytes.size(), std::memory_order_relaxed);
}

void Device::read_at(DeviceOffset off, MutableByteView out) {
  check_range(off, out.size());
  raw_read(off.value, out);
  bytes_read_.fetch_add(out.size(), std::memory_order_relaxed);
}

Bytes Device::read_at(DeviceOffset off, size_t len) {
  Bytes out(len);
  read_at(off, MutableByteView(out));
  return out;
}

// --- MemoryDevice ---------------------------------------------------------

MemoryDevice::MemoryDevice(uint64_t capacity, uint64_t segment_size)
    : Device(capacity, segment_size), chunks_(capacity / segment_size) {
  for (auto& c : chunks_) c.store(nullptr, std::memory_order_relaxed);
}

uint8_t* MemoryDevice::chunk(uint64_t index) {
  uint8_t* p = chunks_[index].load(std::memory_order_acquire);
  if (p != nullptr) return p;
  std::lock_guard lock(chunk_mu_);
  p = chunks_[index].load(std::memory_order_relaxed);
  if (p == nullptr) {
    owned_.push_back(std::make_unique<uint8_t[]>(segment_size()));  // value-initialized: zeros
    p = owned_.back().get();
    chunks_[index].store(p, std::memory_order_release);
  }
  return p;
}

void MemoryDevice::raw_write(uint64_t off, ByteView bytes) {
  const uint64_t seg = segment_size();
  size_t done = 0;
  while (done < bytes.size()) {
    const uint64_t pos = off + done;
    const uint64_t within = pos % seg;
    const size_t n = std::min<uint64_t>(bytes.size() - done, seg - within);
    std::memcpy(chunk(pos / seg) + within, bytes.data() + done, n);
    done += n;
  }
}

void MemoryDevice::raw_read(uint64_t off, MutableByteView out) {
  const uint64_t seg = segment_size();
  size_t done = 0;
  while (done < out.size()) {
    const uint64_t pos = off + done;
    const uint64_t within = pos % seg;
    const size_t n = std::min<uint64_t>(out.size() - done, seg - within);
    std::memcpy(out.data() + done, chunk(pos / seg) + within, n);
    done += n;
  }
}

// --- FileDevice -----------------------------------------------------------

FileDevice::FileDevice(const std::filesystem::path& path, uint64_t capacity, uint64_t segment_size)
    : Device(capacity, segment_size) {
  fd_ = ::open(path.c_str(), O_RDWR | O_CREAT, 0644);
  if (fd_ < 0) {
    raise(ErrorCode::kInvalidArgument, fmt::format("open {}: {}", path.string(), std::strerror(errno)));
  }
  if (::ftruncate(fd_, static_cast<off_t>(capacity)) != 0) {
    const int err = errno;
    ::close(fd_);
    raise(ErrorCode::kInvalidArgument, fmt::format("truncate {}: {}", path.string(), std::strerror(err)));
  }
}

FileDevice::~FileDevice() {
  if (fd_ >= 0) ::close(fd_);
}

void FileDevice::flush() { ::fdatasync(fd_); }

void FileDevice::raw_write(uint64_t off, ByteView bytes) {
  size_t done = 0;
  while (done < bytes.size()) {
    const ssize_t n = ::pwrite(fd_, bytes.data() + done, bytes.size() - done, static_cast<off_t>(off + done));
    if (n < 0) {
      if (errno == EINTR) continue;
      raise(ErrorCode::kOutOfBounds, fmt::format("pwrite: {}", std::strerror(errno)));
    }
    done += static_cast<size_t>(n);
  }
}

void FileDevice::raw_read(uint64_t off, MutableByteView out) {
  size_t done = 0;
  while (done < out.size()) {
    const ssize_t n = ::pread(fd_, out.data() + done, out.size() - done, static_cast<off_t>(off + done));
    if (n < 0) {
      if (errno == EINTR) continue;
      raise(ErrorCode::kOutOfBounds, fmt::format("pread: {}", std::strerror(errno)));
    }
    if (n == 0) {  // past EOF of a sparse file; reads as zeros
      std::memset(out.data() + done, 0, out.size() - done);
      return;
    }
    done += static_cast<size_t>(n);
  }
}

}  // namespace replkv
