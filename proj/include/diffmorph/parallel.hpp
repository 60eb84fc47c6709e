#pragma once

#include <algorithm>
#include <condition_variable>
#include <cstddef>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace diffmorph {

/// Number of worker threads used by the numeric kernels. Honors the
/// DIFFMORPH_THREADS environment variable as an upper bound.
inline std::size_t thread_count() {
    static const std::size_t count = [] {
        std::size_t n = std::max<std::size_t>(1, std::thread::hardware_concurrency());
        if (const char* env = std::getenv("DIFFMORPH_THREADS")) {
            char* end = nullptr;
            long cap = std::strtol(env, &end, 10);
            if (end != env && cap > 0) n = std::min<std::size_t>(n, static_cast<std::size_t>(cap));
        }
        return n;
    }();
    return count;
}

namespace detail {

class ThreadPool {
public:
    explicit ThreadPool(std::size_t workers) {
        for (std::size_t i = 0; i < workers; ++i) {
            threads_.emplace_back([this] { run(); });
        }
    }

    ~ThreadPool() {
        {
            std::lock_guard lock(mutex_);
            stop_ = true;
        }
        wake_.notify_all();
        for (auto& t : threads_) t.join();
    }

    ThreadPool(const ThreadPool&) = delete;
    ThreadPool& operator=(const ThreadPool&) = delete;

    // Runs job(i) for i in [0, jobs) and blocks until all are done. Job i is
    // always the same slice of work, so results do not depend on scheduling.
    void run_jobs(std::size_t jobs, const std::function<void(std::size_t)>& job) {
        std::unique_lock lock(mutex_);
        job_ = &job;
        next_ = 0;
        total_ = jobs;
        pending_ = jobs;
        ++generation_;
        wake_.notify_all();
        lock.unlock();
        drain();
        lock.lock();
        done_.wait(lock, [this] { return pending_ == 0; });
        job_ = nullptr;
    }

private:
    void drain() {
        for (;;) {
            std::size_t idx;
            const std::function<void(std::size_t)>* job;
            {
                std::lock_guard lock(mutex_);
                if (job_ == nullptr || next_ >= total_) return;
                idx = next_++;
                job = job_;
            }
            (*job)(idx);
            std::lock_guard lock(mutex_);
            if (--pending_ == 0) done_.notify_all();
        }
    }

    void run() {
        std::size_t seen = 0;
        for (;;) {
            {
                std::unique_lock lock(mutex_);
                wake_.wait(lock, [&] { return stop_ || generation_ != seen; });
                if (stop_) return;
                seen = generation_;
            }
            drain();
        }
    }

    std::vector<std::thread> threads_;
    std::mutex mutex_;
    std::condition_variable wake_;
    std::condition_variable done_;
    const std::function<void(std::size_t)>* job_ = nullptr;
    std::size_t next_ = 0;
    std::size_t total_ = 0;
    std::size_t pending_ = 0;
    std::size_t generation_ = 0;
    bool stop_ = false;
};

inline ThreadPool& pool() {
    static ThreadPool instance(thread_count() - 1);
    return instance;
}

}  // namespace detail

/// Calls fn(begin, end) over contiguous chunks of [0, n). Chunk boundaries
/// depend only on n and the thread count, never on timing.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn, std::size_t min_chunk = 1) {
    const std::size_t threads = thread_count();
    if (threads <= 1 || n <= min_chunk) {
        if (n > 0) fn(std::size_t{0}, n);
        return;
    }
    const std::size_t chunks = std::min(threads, (n + min_chunk - 1) / min_chunk);
    const std::size_t step = (n + chunks - 1) / chunks;
    std::function<void(std::size_t)> job = [&](std::size_t c) {
        const std::size_t b = c * step;
        const std::size_t e = std::min(n, b + step);
        if (b < e) fn(b, e);
    };
    detail::pool().run_jobs(chunks, job);
}

}  // namespace diffmorph
