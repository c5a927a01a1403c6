#pragma once

// Mini-batch partitioning and the worker pool that evaluates batches
// concurrently. Results are folded in ascending batch order no matter which
// worker finishes first.

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <optional>
#include <thread>
#include <type_traits>
#include <vector>

#include "hfcnn/tensor.hpp"

namespace hfcnn {

struct BatchRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const noexcept { return end - begin; }
  friend bool operator==(const BatchRange&, const BatchRange&) = default;
};

struct BatchPlan {
  std::size_t total = 0;
  std::size_t batch_size = 0;
  std::size_t workers = 1;
  std::vector<BatchRange> batches;
};

inline BatchPlan make_plan(std::size_t n, std::size_t batch_size, std::size_t workers = 1) {
  if (n == 0 || batch_size == 0 || workers == 0)
    throw Error(Errc::invalid_argument, "make_plan needs N, batch size and workers >= 1");
  BatchPlan plan{n, batch_size, workers, {}};
  plan.batches.reserve((n + batch_size - 1) / batch_size);
  for (std::size_t b = 0; b < n; b += batch_size) plan.batches.push_back({b, std::min(n, b + batch_size)});
  return plan;
}

enum class ExecMode { serial, parallel };

inline std::size_t hardware_workers() {
  const unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : n;
}

/// Fixed-size thread pool. The calling thread takes part in every job as
/// worker 0, so `workers == 1` never starts a thread.
class Executor {
 public:
  explicit Executor(std::size_t workers = hardware_workers(), ExecMode mode = ExecMode::parallel)
      : workers_(mode == ExecMode::serial ? 1 : workers), mode_(mode) {
    if (workers == 0) throw Error(Errc::invalid_argument, "executor needs at least one worker");
    for (std::size_t id = 1; id < workers_; ++id) threads_.emplace_back([this, id] { loop(id); });
  }

  static Executor serial() { return Executor(1, ExecMode::serial); }

  Executor(const Executor&) = delete;
  Executor& operator=(const Executor&) = delete;

  ~Executor() {
    {
      std::lock_guard lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  std::size_t workers() const noexcept { return workers_; }
  ExecMode mode() const noexcept { return mode_; }

  /// Runs `fn(worker_id)` once on every worker and waits for all of them.
  void run_on_all(const std::function<void(std::size_t)>& fn) {
    if (workers_ == 1) {
      fn(0);
      return;
    }
    {
      std::lock_guard lk(mu_);
      job_ = &fn;
      remaining_ = workers_ - 1;
      ++generation_;
    }
    cv_.notify_all();
    std::exception_ptr err;
    try {
      fn(0);
    } catch (...) {
      err = std::current_exception();
    }
    std::unique_lock lk(mu_);
    done_cv_.wait(lk, [&] { return remaining_ == 0; });
    job_ = nullptr;
    if (err) std::rethrow_exception(err);
  }

 private:
  void loop(std::size_t id) {
    std::uint64_t seen = 0;
    for (;;) {
      const std::function<void(std::size_t)>* job = nullptr;
      {
        std::unique_lock lk(mu_);
        cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
        if (stop_) return;
        seen = generation_;
        job = job_;
      }
      (*job)(id);  // jobs submitted here never throw; map_reduce_batches catches inside
      {
        std::lock_guard lk(mu_);
        if (--remaining_ == 0) done_cv_.notify_all();
      }
    }
  }

  std::size_t workers_;
  ExecMode mode_;
  std::vector<std::thread> threads_;
  std::mutex mu_;
  std::condition_variable cv_, done_cv_;
  const std::function<void(std::size_t)>* job_ = nullptr;
  std::size_t remaining_ = 0;
  std::uint64_t generation_ = 0;
  bool stop_ = false;
};

/// Evaluates `task(batch_index, range, worker_id)` for every batch and
/// folds the partials into `init` with `combine(acc, partial)` strictly in
/// ascending batch order. Batches are claimed in order, and at most a small
/// window of finished-but-unfolded partials is held at once. The first error
/// by batch order is rethrown; batches not yet claimed are cancelled.
template <class Acc, class Task, class Combine>
Acc map_reduce_batches(Executor& exec, const BatchPlan& plan, Acc init, Task&& task, Combine&& combine) {
  const std::size_t n = plan.batches.size();
  const std::size_t window = 2 * exec.workers() + 2;
  using Part = std::decay_t<std::invoke_result_t<Task&, std::size_t, const BatchRange&, std::size_t>>;
  std::vector<std::optional<Part>> slots(n);
  std::size_t next_claim = 0, next_fold = 0;
  std::size_t first_error = n;
  std::exception_ptr error;
  std::mutex mu;
  std::condition_variable cv;

  auto fold_ready = [&] {
    while (next_fold < n && slots[next_fold]) {
      combine(init, *slots[next_fold]);
      slots[next_fold].reset();
      ++next_fold;
    }
  };

  auto worker = [&](std::size_t wid) {
    for (;;) {
      std::size_t b = 0;
      {
        std::unique_lock lk(mu);
        cv.wait(lk, [&] { return next_claim >= n || first_error < n || next_claim < next_fold + window; });
        if (next_claim >= n || first_error < n) return;
        b = next_claim++;
      }
      std::optional<Part> part;
      std::exception_ptr err;
      try {
        part.emplace(task(b, plan.batches[b], wid));
      } catch (...) {
        err = std::current_exception();
      }
      std::lock_guard lk(mu);
      if (err) {
        if (b < first_error) {
          first_error = b;
          error = err;
        }
      } else if (first_error == n) {
        slots[b] = std::move(part);
        try {
          fold_ready();
        } catch (...) {
          first_error = std::min(first_error, next_fold);
          error = std::current_exception();
        }
      }
      cv.notify_all();
    }
  };

  exec.run_on_all(worker);
  if (error) std::rethrow_exception(error);
  return init;
}

}  // namespace hfcnn
