#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace vesselforge {

// ---------------------------------------------------------------------------
// Error taxonomy. Everything thrown by the library derives from Error so
// callers can catch one base; the CLI maps the concrete types to exit codes.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dimension/shape violations (mismatched axes, impossible output extents).
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid parameter values (rates, ranges, empty inputs).
class ValueError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents (bad magic, truncation, version mismatch).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Filesystem-level failures, with path context in the message.
class IoError : public Error {
 public:
  using Error::Error;
};

namespace detail {

template <class... Args>
std::string msg(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

}  // namespace detail

enum class Mode { kTrain, kEval };

// ---------------------------------------------------------------------------
// Multiply-accumulate counter. Convolution and linear ops register their MAC
// totals here; one relaxed atomic add per op call, so it stays on.
// ---------------------------------------------------------------------------

class OpCounter {
 public:
  static void add(std::uint64_t macs) {
    counter().fetch_add(macs, std::memory_order_relaxed);
  }
  static void reset() { counter().store(0, std::memory_order_relaxed); }
  static std::uint64_t macs() { return counter().load(std::memory_order_relaxed); }

 private:
  static std::atomic<std::uint64_t>& counter() {
    static std::atomic<std::uint64_t> c{0};
    return c;
  }
};

// ---------------------------------------------------------------------------
// Worker pool for data-parallel loops. Each index range is owned by exactly
// one worker and reduced in a fixed order, so results are bit-identical for
// any worker count. VESSELFORGE_THREADS caps the pool size.
// ---------------------------------------------------------------------------

inline int max_threads() {
  static const int cached = [] {
    if (const char* env = std::getenv("VESSELFORGE_THREADS")) {
      const long v = std::strtol(env, nullptr, 10);
      if (v >= 1 && v <= 256) return static_cast<int>(v);
    }
    const unsigned hc = std::thread::hardware_concurrency();
    if (hc == 0) return 1;
    return static_cast<int>(hc > 16 ? 16 : hc);
  }();
  return cached;
}

namespace detail {

inline bool& in_parallel_region() {
  thread_local bool flag = false;
  return flag;
}

class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool(max_threads() - 1);
    return pool;
  }

  // Runs job(chunk) for chunk in [0, n_chunks); the caller participates.
  void run(std::int64_t n_chunks, const std::function<void(std::int64_t)>& job) {
    if (n_chunks <= 0) return;
    std::unique_lock<std::mutex> gate(submit_mutex_);
    {
      std::lock_guard<std::mutex> lk(mutex_);
      job_ = &job;
      total_chunks_ = n_chunks;
      next_chunk_.store(0, std::memory_order_relaxed);
      done_chunks_.store(0, std::memory_order_relaxed);
      ++generation_;
    }
    cv_work_.notify_all();
    work(job, n_chunks);
    std::unique_lock<std::mutex> lk(mutex_);
    cv_done_.wait(lk, [&] { return done_chunks_.load() == total_chunks_; });
    job_ = nullptr;
  }

  int workers() const { return static_cast<int>(threads_.size()); }

  ~ThreadPool() {
    {
      std::lock_guard<std::mutex> lk(mutex_);
      stop_ = true;
      ++generation_;
    }
    cv_work_.notify_all();
    for (auto& t : threads_) t.join();
  }

 private:
  explicit ThreadPool(int n_workers) {
    for (int i = 0; i < n_workers; ++i) {
      threads_.emplace_back([this] { worker_loop(); });
    }
  }

  void worker_loop() {
    in_parallel_region() = true;
    std::uint64_t seen = 0;
    for (;;) {
      const std::function<void(std::int64_t)>* job = nullptr;
      std::int64_t total = 0;
      {
        std::unique_lock<std::mutex> lk(mutex_);
        cv_work_.wait(lk, [&] { return stop_ || generation_ != seen; });
        if (stop_) return;
        seen = generation_;
        job = job_;
        total = total_chunks_;
      }
      if (job) work(*job, total);
    }
  }

  void work(const std::function<void(std::int64_t)>& job, std::int64_t total) {
    const bool outer = !in_parallel_region();
    if (outer) in_parallel_region() = true;
    for (;;) {
      const std::int64_t c = next_chunk_.fetch_add(1, std::memory_order_relaxed);
      if (c >= total) break;
      job(c);
      if (done_chunks_.fetch_add(1) + 1 == total) {
        std::lock_guard<std::mutex> lk(mutex_);
        cv_done_.notify_all();
      }
    }
    if (outer) in_parallel_region() = false;
  }

  std::vector<std::thread> threads_;
  std::mutex submit_mutex_;
  std::mutex mutex_;
  std::condition_variable cv_work_, cv_done_;
  const std::function<void(std::int64_t)>* job_ = nullptr;
  std::int64_t total_chunks_ = 0;
  std::atomic<std::int64_t> next_chunk_{0};
  std::atomic<std::int64_t> done_chunks_{0};
  std::uint64_t generation_ = 0;
  bool stop_ = false;
};

}  // namespace detail

// Splits [0, n) into chunks and calls fn(begin, end) for each. fn must write
// only to locations owned by its range. Falls back to a single inline call
// when the work is small or we are already inside a parallel region.
template <class F>
void parallel_for(std::int64_t n, F&& fn, std::int64_t grain = 1) {
  if (n <= 0) return;
  const int threads = max_threads();
  if (threads <= 1 || detail::in_parallel_region() || n <= grain) {
    fn(std::int64_t{0}, n);
    return;
  }
  std::int64_t n_chunks = std::min<std::int64_t>(threads * 4, (n + grain - 1) / grain);
  if (n_chunks <= 1) {
    fn(std::int64_t{0}, n);
    return;
  }
  const std::function<void(std::int64_t)> job = [&](std::int64_t c) {
    const std::int64_t begin = c * n / n_chunks;
    const std::int64_t end = (c + 1) * n / n_chunks;
    if (begin < end) fn(begin, end);
  };
  detail::ThreadPool::instance().run(n_chunks, job);
}

}  // namespace vesselforge
