#include "miniclip/common.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>

namespace miniclip {
namespace {

class ThreadPool {
  public:
    explicit ThreadPool(int workers) : workers_(workers) {
        for (int i = 1; i < workers_; ++i) {
            threads_.emplace_back([this, i] { worker_loop(i); });
        }
    }

    ~ThreadPool() {
        {
            std::unique_lock lock(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

    int workers() const { return workers_; }

    // Runs fn(worker_index) on every worker including the caller; returns
    // when all are done.
    void run(const std::function<void(int)>& fn) {
        {
            std::unique_lock lock(mu_);
            job_ = &fn;
            ++generation_;
            pending_ = workers_ - 1;
        }
        cv_.notify_all();
        fn(0);
        std::unique_lock lock(mu_);
        done_cv_.wait(lock, [this] { return pending_ == 0; });
        job_ = nullptr;
    }

  private:
    void worker_loop(int index) {
        uint64_t seen = 0;
        while (true) {
            const std::function<void(int)>* job = nullptr;
            {
                std::unique_lock lock(mu_);
                cv_.wait(lock, [&] { return stop_ || generation_ != seen; });
                if (stop_) return;
                seen = generation_;
                job = job_;
            }
            (*job)(index);
            {
                std::unique_lock lock(mu_);
                if (--pending_ == 0) done_cv_.notify_all();
            }
        }
    }

    int workers_;
    std::vector<std::thread> threads_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    const std::function<void(int)>* job_ = nullptr;
    uint64_t generation_ = 0;
    int pending_ = 0;
    bool stop_ = false;
};

int detect_threads() {
    if (const char* env = std::getenv("MINICLIP_THREADS")) {
        int v = std::atoi(env);
        if (v >= 1) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

ThreadPool& pool() {
    static ThreadPool p(detect_threads());
    return p;
}

}  // namespace

int thread_count() { return pool().workers(); }

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& chunk_fn) {
    if (n <= 0) return;
    const int workers = pool().workers();
    // Not worth the handoff below a few thousand elements of work.
    if (workers == 1 || n < 2048) {
        chunk_fn(0, n);
        return;
    }
    const int64_t chunk = (n + workers - 1) / workers;
    pool().run([&](int w) {
        const int64_t lo = w * chunk;
        const int64_t hi = std::min<int64_t>(n, lo + chunk);
        if (lo < hi) chunk_fn(lo, hi);
    });
}

}  // namespace miniclip
