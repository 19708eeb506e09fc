#include "dualtrack/clock.hpp"

#include <unordered_map>

namespace dualtrack {

TimerId Scheduler::at(Millis when, Callback fn) {
  if (when < now_) when = now_;
  TimerId id = next_id_++;
  queue_.push(Item{when, next_order_++, id});
  live_.emplace(id, std::move(fn));
  return id;
}

bool Scheduler::cancel(TimerId id) { return live_.erase(id) > 0; }

void Scheduler::drop_cancelled() const {
  while (!queue_.empty() && !live_.count(queue_.top().id)) queue_.pop();
}

std::optional<Millis> Scheduler::next_due() const {
  drop_cancelled();
  if (queue_.empty()) return std::nullopt;
  return queue_.top().when;
}

bool Scheduler::step() {
  drop_cancelled();
  if (queue_.empty()) return false;
  Item item = queue_.top();
  queue_.pop();
  auto it = live_.find(item.id);
  Callback fn = std::move(it->second);
  live_.erase(it);
  now_ = item.when;
  fn();
  return true;
}

std::size_t Scheduler::run() {
  std::size_t n = 0;
  while (step()) ++n;
  return n;
}

std::size_t Scheduler::run_until(Millis until) {
  std::size_t n = 0;
  for (;;) {
    auto due = next_due();
    if (!due || *due > until) break;
    step();
    ++n;
  }
  if (until > now_) now_ = until;
  return n;
}

}  // namespace dualtrack
