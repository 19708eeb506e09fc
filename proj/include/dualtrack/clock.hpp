#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <queue>
#include <unordered_map>
#include <vector>

#include "dualtrack/common.hpp"

namespace dualtrack {

using TimerId = std::uint64_t;

/// Discrete-event scheduler driving the virtual clock.
///
/// Callbacks due at the same tick run in scheduling order. Every latency in
/// the engine (perception, backends, tools, timeouts) is charged by scheduling
/// a callback, so timings are exact and replayable. The scheduler is not
/// thread-safe; the live service serializes access with its own mutex.
class Scheduler {
 public:
  using Callback = std::function<void()>;

  Millis now() const noexcept { return now_; }

  TimerId at(Millis when, Callback fn);
  TimerId after(Millis delay, Callback fn) { return at(now_ + delay, std::move(fn)); }
  /// Returns false when the timer already fired or was cancelled.
  bool cancel(TimerId id);

  /// Runs the earliest pending callback. Returns false when idle.
  bool step();
  /// Runs until no callbacks remain. Returns the number executed.
  std::size_t run();
  /// Runs every callback due at or before `until`, then sets now() to `until`.
  std::size_t run_until(Millis until);

  std::optional<Millis> next_due() const;
  bool idle() const { return next_due() == std::nullopt; }
  std::size_t pending() const { return live_.size(); }

 private:
  struct Item {
    Millis when;
    std::uint64_t order;
    TimerId id;
    bool operator>(const Item& o) const {
      return when != o.when ? when > o.when : order > o.order;
    }
  };

  void drop_cancelled() const;

  Millis now_ = 0;
  std::uint64_t next_order_ = 0;
  TimerId next_id_ = 1;
  mutable std::priority_queue<Item, std::vector<Item>, std::greater<>> queue_;
  std::unordered_map<TimerId, Callback> live_;
};

}  // namespace dualtrack
