#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace drascore {

// Persistent worker pool. parallel_for partitions [0, n) into one contiguous
// chunk per worker, so every index is processed by exactly one thread and
// results are identical for any thread count as long as chunks only write
// their own slots.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  void set_threads(int n) {
    std::lock_guard<std::mutex> lock(api_mu_);
    if (n < 1) n = 1;
    if (n == threads_) return;
    stop_workers();
    threads_ = n;
    start_workers();
  }

  int threads() const { return threads_; }

  void parallel_for(std::int64_t n,
                    const std::function<void(std::int64_t, std::int64_t)>& body) {
    if (n <= 0) return;
    // nested calls (from inside a running job) execute inline
    if (nesting_depth() > 0) {
      body(0, n);
      return;
    }
    ++nesting_depth();
    struct DepthGuard {
      ~DepthGuard() { --nesting_depth(); }
    } guard;
    std::lock_guard<std::mutex> lock(api_mu_);
    int nt = threads_;
    if (nt <= 1 || n == 1) {
      body(0, n);
      return;
    }
    std::int64_t chunk = (n + nt - 1) / nt;
    {
      std::unique_lock<std::mutex> lk(mu_);
      job_ = &body;
      job_n_ = n;
      job_chunk_ = chunk;
      pending_ = 0;
      for (int t = 1; t < nt; ++t) {
        if (t * chunk < n) ++pending_;
      }
      ++generation_;
    }
    cv_.notify_all();
    body(0, std::min<std::int64_t>(chunk, n));
    std::unique_lock<std::mutex> lk(mu_);
    done_cv_.wait(lk, [&] { return pending_ == 0; });
    job_ = nullptr;
  }

  ~ThreadPool() { stop_workers(); }

 private:
  ThreadPool() { start_workers(); }

  static int& nesting_depth() {
    thread_local int depth = 0;
    return depth;
  }

  void start_workers() {
    stop_ = false;
    for (int t = 1; t < threads_; ++t) {
      workers_.emplace_back([this, t] { worker_loop(t); });
    }
  }

  void stop_workers() {
    {
      std::unique_lock<std::mutex> lk(mu_);
      stop_ = true;
      ++generation_;
    }
    cv_.notify_all();
    for (auto& w : workers_) w.join();
    workers_.clear();
  }

  void worker_loop(int index) {
    std::uint64_t seen = 0;
    for (;;) {
      const std::function<void(std::int64_t, std::int64_t)>* job = nullptr;
      std::int64_t lo = 0, hi = 0;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
        seen = generation_;
        if (stop_) return;
        if (!job_) continue;
        lo = index * job_chunk_;
        hi = std::min<std::int64_t>(lo + job_chunk_, job_n_);
        if (lo >= job_n_) continue;
        job = job_;
      }
      ++nesting_depth();
      (*job)(lo, hi);
      --nesting_depth();
      {
        std::unique_lock<std::mutex> lk(mu_);
        if (--pending_ == 0) done_cv_.notify_one();
      }
    }
  }

  std::mutex api_mu_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  std::vector<std::thread> workers_;
  const std::function<void(std::int64_t, std::int64_t)>* job_{nullptr};
  std::int64_t job_n_{0};
  std::int64_t job_chunk_{0};
  int pending_{0};
  std::uint64_t generation_{0};
  bool stop_{false};
  int threads_{1};
};

inline void set_worker_threads(int n) { ThreadPool::instance().set_threads(n); }

inline void parallel_for(std::int64_t n,
                         const std::function<void(std::int64_t, std::int64_t)>& body) {
  ThreadPool::instance().parallel_for(n, body);
}

}  // namespace drascore
