#include "bimii/parallel.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace bimii {
namespace {

int env_thread_cap() {
  if (const char* v = std::getenv("BIMII_THREADS")) {
    int n = std::atoi(v);
    if (n >= 1) return n;
  }
  return 1 << 30;
}

class Pool {
 public:
  Pool() {
    int hw = (int)std::thread::hardware_concurrency();
    if (hw < 1) hw = 1;
    n_workers_ = std::min(hw, env_thread_cap());
    for (int i = 1; i < n_workers_; ++i)
      threads_.emplace_back([this, i] { worker_loop(i); });
  }

  ~Pool() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  int size() const { return n_workers_; }

  void run(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    int parts = (int)std::min<int64_t>(n_workers_, n);
    if (parts <= 1) {
      fn(0, n);
      return;
    }
    {
      std::lock_guard<std::mutex> lk(mu_);
      job_fn_ = &fn;
      job_n_ = n;
      job_parts_ = parts;
      pending_ = parts - 1;
      ++epoch_;
    }
    cv_.notify_all();
    run_part(0);
    std::unique_lock<std::mutex> lk(mu_);
    done_cv_.wait(lk, [this] { return pending_ == 0; });
    job_fn_ = nullptr;
  }

 private:
  void run_part(int part) {
    int64_t chunk = (job_n_ + job_parts_ - 1) / job_parts_;
    int64_t lo = (int64_t)part * chunk;
    int64_t hi = std::min<int64_t>(lo + chunk, job_n_);
    if (lo < hi) (*job_fn_)(lo, hi);
  }

  void worker_loop(int index) {
    uint64_t seen = 0;
    for (;;) {
      std::unique_lock<std::mutex> lk(mu_);
      cv_.wait(lk, [&] { return stop_ || epoch_ != seen; });
      if (stop_) return;
      seen = epoch_;
      int part = index;
      bool mine = part < job_parts_;
      lk.unlock();
      if (mine) run_part(part);
      lk.lock();
      if (mine && --pending_ == 0) done_cv_.notify_all();
    }
  }

  std::mutex mu_;
  std::condition_variable cv_, done_cv_;
  std::vector<std::thread> threads_;
  const std::function<void(int64_t, int64_t)>* job_fn_ = nullptr;
  int64_t job_n_ = 0;
  int job_parts_ = 0;
  int pending_ = 0;
  uint64_t epoch_ = 0;
  bool stop_ = false;
  int n_workers_ = 1;
};

Pool& pool() {
  static Pool p;
  return p;
}

}  // namespace

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& chunk) {
  if (n <= 0) return;
  if (n < 2 || pool().size() < 2) {
    chunk(0, n);
    return;
  }
  pool().run(n, chunk);
}

int worker_count() { return pool().size(); }

}  // namespace bimii
