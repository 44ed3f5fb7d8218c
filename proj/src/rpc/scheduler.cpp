#include "replkv/rpc/scheduler.hpp"

namespace replkv::rpc {

ScheduleDecision SchedulerPolicy::choose(size_t current, const std::vector<WorkerState>& workers) const {
  ScheduleDecision d;
  if (current < workers.size() && !workers[current].sleeping && workers[current].queue_len < threshold_) {
    d.worker = current;
    d.reason = ScheduleReason::kCurrent;
    return d;
  }
  bool found = false;
  for (size_t i = 0; i < workers.size(); ++i) {
    if (workers[i].sleeping || workers[i].queue_len >= threshold_) continue;
    if (!found || workers[i].queue_len < workers[d.worker].queue_len) {
      d.worker = i;
      found = true;
    }
  }
  if (found) {
    d.reason = ScheduleReason::kRunning;
    return d;
  }
  // Prefer waking the current worker, then the lowest-numbered sleeper.
  if (current < workers.size() && workers[current].sleeping) {
    d.worker = current;
    d.reason = ScheduleReason::kWake;
    d.wake = true;
    return d;
  }
  for (size_t i = 0; i < workers.size(); ++i) {
    if (workers[i].sleeping) {
      d.worker = i;
      d.reason = ScheduleReason::kWake;
      d.wake = true;
      return d;
    }
  }
  d.reason = ScheduleReason::kLeastLoaded;
  for (size_t i = 1; i < workers.size(); ++i) {
    if (workers[i].queue_len < workers[d.worker].queue_len) d.worker = i;
  }
  return d;
}

WorkerPool::WorkerPool(size_t workers, size_t threshold, std::chrono::microseconds idle_sleep, bool record_events)
    : policy_(threshold), idle_sleep_(idle_sleep), record_(record_events) {
  if (workers == 0) workers = 1;
  for (size_t i = 0; i < workers; ++i) workers_.push_back(std::make_unique<Worker>());
  for (auto& w : workers_) {
    Worker* raw = w.get();
    w->thread = std::thread([this, raw] { run(*raw); });
  }
}

WorkerPool::~WorkerPool() { stop(); }

void WorkerPool::stop() {
  if (stopping_.exchange(true)) return;
  for (auto& w : workers_) {
    {
      std::lock_guard lock(w->mu);
    }
    w->cv.notify_all();
  }
  for (auto& w : workers_) {
    if (w->thread.joinable()) w->thread.join();
  }
}

std::vector<WorkerState> WorkerPool::states() const {
  std::vector<WorkerState> out;
  out.reserve(workers_.size());
  for (const auto& w : workers_) out.push_back({w->queued.load(), w->sleeping.load()});
  return out;
}

ScheduleDecision WorkerPool::submit(Task task) {
  std::lock_guard lock(mu_);
  const std::vector<WorkerState> before = states();
  const ScheduleDecision d = policy_.choose(current_, before);
  current_ = d.worker;
  Worker& w = *workers_[d.worker];
  {
    std::lock_guard wl(w.mu);
    w.queue.push_back(std::move(task));
    w.queued.fetch_add(1);
  }
  w.cv.notify_one();
  tasks_.fetch_add(1);
  if (d.wake) wakeups_.fetch_add(1);
  if (record_) events_.push_back(ScheduleEvent{seq_, d, before});
  ++seq_;
  return d;
}

void WorkerPool::run(Worker& w) {
  std::unique_lock lock(w.mu);
  for (;;) {
    if (w.queue.empty()) {
      w.cv.wait_for(lock, idle_sleep_, [&] { return stopping_.load() || !w.queue.empty(); });
      if (w.queue.empty() && !stopping_.load()) {
        w.sleeping.store(true);
        sleeps_.fetch_add(1);
        w.cv.wait(lock, [&] { return stopping_.load() || !w.queue.empty(); });
        w.sleeping.store(false);
      }
    }
    if (w.queue.empty()) {
      if (stopping_.load()) return;
      continue;
    }
    Task t = std::move(w.queue.front());
    w.queue.pop_front();
    w.queued.fetch_sub(1);
    lock.unlock();
    t();
    lock.lock();
  }
}

SchedulerStats WorkerPool::stats() const { return {tasks_.load(), wakeups_.load(), sleeps_.load()}; }

std::vector<ScheduleEvent> WorkerPool::events() const {
  std::lock_guard lock(mu_);
  return events_;
}

}  // namespace replkv::rpc
