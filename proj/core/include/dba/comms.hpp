#pragma once

#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <exception>
#include <functional>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <typeindex>
#include <typeinfo>
#include <vector>

#include "dba/errors.hpp"

namespace dba {

/// Collective communication across K in-process worker contexts: all-reduce
/// (sum) and barrier with a deterministic reduction order.
///
/// Every collective must be entered by all K ranks, with matching call
/// sequence, element type and buffer length; violations are detected and
/// turned into CollectiveError instead of hangs (a missing rank trips the
/// timeout with a diagnostic naming the absent ranks).
///
/// allreduce_sum sums the rank-local buffers element-wise in ascending rank
/// order with fixed association: every rank computes the identical sum from
/// the same deposited sources, so the results are bit-identical across ranks
/// and across runs for a fixed K. Results for different K differ by float
/// reassociation only.
class WorkerGroup {
 public:
  explicit WorkerGroup(
      int workers,
      std::chrono::milliseconds timeout = std::chrono::milliseconds(60000))
      : workers_(workers),
        timeout_(timeout),
        arrived_(workers, false),
        slots_(workers),
        sequence_(workers, 0),
        scratch_(workers) {
    if (workers < 1)
      throw InvalidArgumentError("worker group needs at least one rank");
  }

  int workers() const { return workers_; }

  /// Number of collectives this rank has completed (its call-sequence
  /// position).
  std::uint64_t sequence(int rank) const { return sequence_[rank]; }

  /// Blocks until all ranks have entered. Detects sequence mismatches (a rank
  /// entering a different collective) and absent ranks (timeout).
  void barrier(int rank) {
    deposit(rank, Kind::barrier, 0, std::type_index(typeid(void)), nullptr);
    rendezvous(rank);
    validate(rank, Kind::barrier, 0, std::type_index(typeid(void)));
    rendezvous(rank);  // slots must survive until everyone validated
  }

  /// data := sum over all ranks of their data buffers; every rank receives
  /// the bit-identical result.
  template <typename T>
  void allreduce_sum(int rank, std::span<T> data) {
    deposit(rank, Kind::allreduce, data.size(), std::type_index(typeid(T)),
            data.data());
    rendezvous(rank);
    validate(rank, Kind::allreduce, data.size(), std::type_index(typeid(T)));

    auto& scratch = scratch_[rank];
    scratch.resize(data.size() * sizeof(T));
    T* acc = reinterpret_cast<T*>(scratch.data());
    std::memcpy(acc, slots_[0].ptr, data.size() * sizeof(T));
    for (int r = 1; r < workers_; ++r) {
      const T* src = static_cast<const T*>(slots_[r].ptr);
      for (std::size_t i = 0; i < data.size(); ++i) acc[i] += src[i];
    }
    rendezvous(rank);  // all ranks finished reading the deposited sources
    std::memcpy(data.data(), acc, data.size() * sizeof(T));
  }

  /// Convenience scalar all-reduce.
  template <typename T>
  T allreduce_sum(int rank, T value) {
    allreduce_sum(rank, std::span<T>(&value, 1));
    return value;
  }

  /// Wakes every waiting rank and makes all pending and future collectives
  /// throw. Called when a rank fails so the others do not wait for a partner
  /// that will never arrive.
  void abort(const std::string& reason,
             const std::exception_ptr& cause = nullptr) {
    std::lock_guard<std::mutex> lock(mutex_);
    if (!first_failure_ && cause) first_failure_ = cause;
    if (!aborted_) {
      aborted_ = true;
      abort_reason_ = reason;
    }
    cv_.notify_all();
  }

  bool aborted() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return aborted_;
  }

  std::exception_ptr first_failure() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return first_failure_;
  }

 private:
  enum class Kind : std::uint8_t { barrier, allreduce };

  struct Slot {
    Kind kind = Kind::barrier;
    std::size_t length = 0;
    std::type_index type = std::type_index(typeid(void));
    const void* ptr = nullptr;
    std::uint64_t sequence = 0;
  };

  void deposit(int rank, Kind kind, std::size_t length, std::type_index type,
               const void* ptr) {
    std::lock_guard<std::mutex> lock(mutex_);
    if (aborted_) throw CollectiveError("collective aborted: " + abort_reason_);
    slots_[rank] = Slot{kind, length, type, ptr, ++sequence_[rank]};
  }

  // Reusable generation barrier with timeout diagnostics.
  void rendezvous(int rank) {
    std::unique_lock<std::mutex> lock(mutex_);
    if (aborted_) throw CollectiveError("collective aborted: " + abort_reason_);
    arrived_[rank] = true;
    if (++count_ == workers_) {
      count_ = 0;
      std::fill(arrived_.begin(), arrived_.end(), false);
      ++generation_;
      cv_.notify_all();
      return;
    }
    const std::uint64_t gen = generation_;
    while (generation_ == gen && !aborted_) {
      if (cv_.wait_for(lock, timeout_) == std::cv_status::timeout &&
          generation_ == gen && !aborted_) {
        std::string missing;
        for (int r = 0; r < workers_; ++r) {
          if (!arrived_[r]) missing += (missing.empty() ? "" : ", ") +
                                       std::to_string(r);
        }
        aborted_ = true;
        abort_reason_ = "collective timeout at sequence " +
                        std::to_string(sequence_[rank]) +
                        "; still waiting on ranks: " + missing;
        cv_.notify_all();
        throw CollectiveError(abort_reason_);
      }
    }
    if (aborted_) throw CollectiveError("collective aborted: " + abort_reason_);
  }

  void validate(int rank, Kind kind, std::size_t length,
                std::type_index type) {
    std::unique_lock<std::mutex> lock(mutex_);
    if (aborted_) throw CollectiveError("collective aborted: " + abort_reason_);
    const std::uint64_t seq = sequence_[rank];
    for (int r = 0; r < workers_; ++r) {
      const Slot& s = slots_[r];
      std::string problem;
      if (s.sequence != seq)
        problem = "is at call sequence " + std::to_string(s.sequence) +
                  ", this rank at " + std::to_string(seq);
      else if (s.kind != kind)
        problem = "entered a different collective kind";
      else if (s.type != type)
        problem = "passed a different element type";
      else if (s.length != length)
        problem = "passed length " + std::to_string(s.length) +
                  ", this rank passed " + std::to_string(length);
      if (!problem.empty()) {
        aborted_ = true;
        abort_reason_ =
            "collective mismatch: rank " + std::to_string(r) + " " + problem;
        cv_.notify_all();
        throw CollectiveError(abort_reason_);
      }
    }
  }

  const int workers_;
  const std::chrono::milliseconds timeout_;

  mutable std::mutex mutex_;
  std::condition_variable cv_;
  int count_ = 0;
  std::uint64_t generation_ = 0;
  std::vector<bool> arrived_;
  std::vector<Slot> slots_;
  std::vector<std::uint64_t> sequence_;
  std::vector<std::vector<std::byte>> scratch_;
  bool aborted_ = false;
  std::string abort_reason_;
  std::exception_ptr first_failure_;
};

/// Runs body(rank) on one thread per rank. If a rank throws, the group is
/// aborted so the remaining ranks unblock, and the originating exception is
/// rethrown after all threads have joined.
template <typename Fn>
void run_on_workers(WorkerGroup& group, Fn&& body) {
  const int k = group.workers();
  std::vector<std::thread> threads;
  threads.reserve(k);
  for (int rank = 0; rank < k; ++rank) {
    threads.emplace_back([&group, &body, rank] {
      try {
        body(rank);
      } catch (const std::exception& e) {
        group.abort("rank " + std::to_string(rank) + " failed: " + e.what(),
                    std::current_exception());
      } catch (...) {
        group.abort("rank " + std::to_string(rank) + " failed",
                    std::current_exception());
      }
    });
  }
  for (auto& t : threads) t.join();
  if (auto failure = group.first_failure()) std::rethrow_exception(failure);
}

}  // namespace dba
