#pragma once

// A minimal persistent worker pool for data-parallel index ranges. Each lane
// processes one statically assigned contiguous range per job, so results
// never depend on the schedule.

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace stbreg {

class WorkerPool {
public:
    // lanes = total parallel lanes including the caller; lanes <= 1 runs inline.
    explicit WorkerPool(int lanes) {
        const int helpers = lanes > 1 ? lanes - 1 : 0;
        threads_.reserve(helpers);
        for (int i = 0; i < helpers; ++i)
            threads_.emplace_back([this, i] { worker_loop(i + 1); });
    }

    WorkerPool(const WorkerPool&) = delete;
    WorkerPool& operator=(const WorkerPool&) = delete;

    ~WorkerPool() {
        {
            std::lock_guard<std::mutex> lock(mu_);
            stop_ = true;
            ++generation_;
        }
        cv_work_.notify_all();
        for (auto& t : threads_) t.join();
    }

    int lanes() const { return static_cast<int>(threads_.size()) + 1; }

    // Runs fn(begin, end) over [0, count) split across the lanes and blocks
    // until every range finished. fn must be safe on disjoint ranges.
    void run(int count, const std::function<void(int, int)>& fn) {
        if (count <= 0) return;
        const int nlanes = lanes();
        if (nlanes == 1) {
            fn(0, count);
            return;
        }
        {
            std::lock_guard<std::mutex> lock(mu_);
            fn_ = &fn;
            count_ = count;
            pending_ = nlanes - 1;
            ++generation_;
        }
        cv_work_.notify_all();
        const auto [b, e] = lane_range(0);
        if (b < e) fn(b, e);
        std::unique_lock<std::mutex> lock(mu_);
        cv_done_.wait(lock, [this] { return pending_ == 0; });
        fn_ = nullptr;
    }

private:
    std::pair<int, int> lane_range(int lane) const {
        const long long n = count_;
        const int nlanes = static_cast<int>(threads_.size()) + 1;
        return {static_cast<int>(n * lane / nlanes), static_cast<int>(n * (lane + 1) / nlanes)};
    }

    void worker_loop(int lane) {
        std::uint64_t seen = 0;
        for (;;) {
            const std::function<void(int, int)>* fn = nullptr;
            int b = 0, e = 0;
            {
                std::unique_lock<std::mutex> lock(mu_);
                cv_work_.wait(lock, [&] { return generation_ != seen; });
                seen = generation_;
                if (stop_) return;
                fn = fn_;
                std::tie(b, e) = lane_range(lane);
            }
            if (b < e) (*fn)(b, e);
            {
                std::lock_guard<std::mutex> lock(mu_);
                if (--pending_ == 0) cv_done_.notify_all();
            }
        }
    }

    std::vector<std::thread> threads_;
    std::mutex mu_;
    std::condition_variable cv_work_, cv_done_;
    std::uint64_t generation_ = 0;
    bool stop_ = false;
    const std::function<void(int, int)>* fn_ = nullptr;
    int count_ = 0;
    int pending_ = 0;
};

}  // namespace stbreg
