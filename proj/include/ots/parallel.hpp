// Fixed-width worker pool for data-parallel element loops inside matrix
// kernels. Work is split into shape-dependent blocks, never thread-count
// dependent blocks, so results are bitwise identical for any pool width.
#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace ots {

namespace detail {

class MathPool {
public:
    static MathPool& instance() {
        static MathPool pool;
        return pool;
    }

    MathPool(const MathPool&) = delete;
    MathPool& operator=(const MathPool&) = delete;

    int width() const { return width_.load(std::memory_order_relaxed); }

    void resize(int n) {
        const int hw = static_cast<int>(std::thread::hardware_concurrency());
        if (n < 1) n = 1;
        if (hw > 0 && n > hw) n = hw;
        std::lock_guard<std::mutex> lk(control_);
        width_.store(n, std::memory_order_relaxed);
        while (static_cast<int>(workers_.size()) < n - 1) {
            workers_.emplace_back([this] { worker_loop(); });
        }
    }

    // Runs fn(0..count-1); blocks until every index is done. Serial when the
    // pool width is 1 or another job is already in flight (kernels may be
    // reached from evaluation shard threads). fn must not throw.
    void parallel_for(std::int64_t count, const std::function<void(std::int64_t)>& fn) {
        if (count <= 0) return;
        const int w = width();
        if (w == 1 || count == 1 || workers_.empty() || busy_.exchange(true)) {
            for (std::int64_t i = 0; i < count; ++i) fn(i);
            return;
        }
        std::unique_lock<std::mutex> lk(mutex_);
        job_ = &fn;
        count_ = count;
        next_.store(0, std::memory_order_relaxed);
        pending_ = count;
        ++generation_;
        lk.unlock();
        work_cv_.notify_all();

        drain(fn);

        lk.lock();
        done_cv_.wait(lk, [this] { return pending_ == 0; });
        job_ = nullptr;
        lk.unlock();
        busy_.store(false);
    }

private:
    MathPool() = default;

    ~MathPool() {
        {
            std::lock_guard<std::mutex> lk(mutex_);
            stop_ = true;
            ++generation_;
        }
        work_cv_.notify_all();
        for (auto& t : workers_) t.join();
    }

    void drain(const std::function<void(std::int64_t)>& fn) {
        while (true) {
            const std::int64_t i = next_.fetch_add(1, std::memory_order_relaxed);
            if (i >= count_) break;
            fn(i);
            std::lock_guard<std::mutex> lk(mutex_);
            if (--pending_ == 0) done_cv_.notify_all();
        }
    }

    void worker_loop() {
        std::uint64_t seen = 0;
        while (true) {
            const std::function<void(std::int64_t)>* job = nullptr;
            {
                std::unique_lock<std::mutex> lk(mutex_);
                work_cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
                seen = generation_;
                if (stop_) return;
                job = job_;
            }
            if (job) drain(*job);
        }
    }

    std::mutex control_;
    std::mutex mutex_;
    std::condition_variable work_cv_;
    std::condition_variable done_cv_;
    std::vector<std::thread> workers_;
    std::atomic<int> width_{1};
    std::atomic<bool> busy_{false};
    std::atomic<std::int64_t> next_{0};
    std::int64_t count_ = 0;
    std::int64_t pending_ = 0;
    std::uint64_t generation_ = 0;
    const std::function<void(std::int64_t)>* job_ = nullptr;
    bool stop_ = false;
};

inline void parallel_for(std::int64_t count, const std::function<void(std::int64_t)>& fn) {
    MathPool::instance().parallel_for(count, fn);
}

}  // namespace detail

// Width of the internal math pool used by large matrix products. Results do
// not depend on the width; only wall time does.
inline int math_threads() { return detail::MathPool::instance().width(); }
inline void set_math_threads(int n) { detail::MathPool::instance().resize(n); }

}  // namespace ots
