#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

namespace replkv::rpc {

struct WorkerState {
  size_t queue_len = 0;
  bool sleeping = false;
};

enum class ScheduleReason : uint8_t { kCurrent, kRunning, kWake, kLeastLoaded };

struct ScheduleDecision {
  size_t worker = 0;
  ScheduleReason reason = ScheduleReason::kCurrent;
  bool wake = false;
};

/// Task placement: the current worker while its queue is under the
/// threshold, else a running worker under the threshold, else a sleeping
/// worker is woken, else the least loaded worker.
class SchedulerPolicy {
 public:
  explicit SchedulerPolicy(size_t threshold) : threshold_(threshold) {}

  ScheduleDecision choose(size_t current, const std::vector<WorkerState>& workers) const;
  size_t threshold() const { return threshold_; }

 private:
  size_t threshold_;
};

struct ScheduleEvent {
  uint64_t seq = 0;
  ScheduleDecision decision;
  std::vector<WorkerState> before;
};

struct SchedulerStats {
  uint64_t tasks = 0;
  uint64_t wakeups = 0;
  uint64_t sleeps = 0;
};

/// Workers with private task queues. A worker that stays idle for
/// `idle_sleep` goes to sleep until a task is routed to it.
class WorkerPool {
 public:
  using Task = std::function<void()>;

  WorkerPool(size_t workers, size_t threshold, std::chrono::microseconds idle_sleep, bool record_events);
  ~WorkerPool();

  WorkerPool(const WorkerPool&) = delete;
  WorkerPool& operator=(const WorkerPool&) = delete;

  /// Called by a spinning thread.
  ScheduleDecision submit(Task task);
  void stop();

  SchedulerStats stats() const;
  std::vector<ScheduleEvent> events() const;
  std::vector<WorkerState> states() const;
  size_t size() const { return workers_.size(); }

 private:
  struct Worker {
    std::mutex mu;
    std::condition_variable cv;
    std::deque<Task> queue;
    std::atomic<size_t> queued{0};
    std::atomic<bool> sleeping{false};
    std::thread thread;
  };

  void run(Worker& w);

  SchedulerPolicy policy_;
  std::chrono::microseconds idle_sleep_;
  bool record_;
  std::vector<std::unique_ptr<Worker>> workers_;
  std::atomic<bool> stopping_{false};

  mutable std::mutex mu_;  // serializes submitters and the event log
  size_t current_ = 0;
  uint64_t seq_ = 0;
  std::vector<ScheduleEvent> events_;
  std::atomic<uint64_t> tasks_{0}, wakeups_{0}, sleeps_{0};
};

}  // namespace replkv::rpc
