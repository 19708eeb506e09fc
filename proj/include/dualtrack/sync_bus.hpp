#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dualtrack/common.hpp"
#include "dualtrack/shared_state.hpp"

namespace dualtrack {

using json = nlohmann::json;

enum class EventKind { progress, artifact, clarification, final_result, failure };
std::string_view to_string(EventKind k);
EventKind parse_event_kind(std::string_view s);
inline bool is_terminal(EventKind k) { return k == EventKind::final_result || k == EventKind::failure; }

struct StateUpdateEvent {
  std::string event_id;
  std::string session_id;
  std::string task_id;
  EventKind kind = EventKind::progress;
  json payload;
  std::int64_t causal_seq = 1;  // dense per task, starting at 1
  Millis emitted_at = 0;

  bool operator==(const StateUpdateEvent&) const = default;
};

void to_json(json& j, const StateUpdateEvent& e);
void from_json(const json& j, StateUpdateEvent& e);

enum class EmitStatus { queued, duplicate, rejected };

struct EmitResult {
  EmitStatus status = EmitStatus::queued;
  std::string diagnostic;
};

/// Per-session ordered delivery of state-update events.
///
/// Events are deduplicated by id, released per task in causal_seq order
/// (out-of-order arrivals wait in a buffer), and appended to a per-session
/// replay log that late subscribers read from the start.
class EventBus {
 public:
  using Subscriber = std::function<void(const StateUpdateEvent&)>;
  using SubscriptionId = std::uint64_t;

  explicit EventBus(SessionStore& store);

  EmitResult emit(const StateUpdateEvent& event);

  /// Replays the session's delivered events from `from_index`, then stays
  /// subscribed to the live tail.
  SubscriptionId subscribe(const std::string& session_id, Subscriber fn, std::size_t from_index = 0);
  void unsubscribe(SubscriptionId id);

  /// Delivered events in delivery order.
  std::vector<StateUpdateEvent> feed(const std::string& session_id, std::size_t from_index = 0) const;
  std::size_t duplicates_seen() const;

 private:
  struct TaskStream {
    std::int64_t next_seq = 1;
    std::map<std::int64_t, StateUpdateEvent> buffer;
    std::optional<std::int64_t> terminal_seq;
  };
  struct Sub {
    std::string session_id;
    Subscriber fn;
  };

  void deliver(const StateUpdateEvent& e);

  SessionStore& store_;
  mutable std::recursive_mutex mu_;
  std::set<std::string> seen_ids_;
  std::map<std::string, TaskStream> streams_;  // key: session|task
  std::map<std::string, std::vector<StateUpdateEvent>> logs_;
  std::map<SubscriptionId, Sub> subs_;
  SubscriptionId next_sub_ = 1;
  std::size_t duplicates_ = 0;
};

struct IntegrationOptions {
  bool surface_artifacts = true;
};

/// Session-side consumer turning delivered events into transcript entries
/// exactly once (keyed by event id) and maintaining the plan view.
class Integrator {
 public:
  explicit Integrator(SessionStore& store, IntegrationOptions options = {});

  std::optional<TranscriptEntry> integrate(const StateUpdateEvent& event);

  /// Transcript integration for this task waits until release_task() is
  /// called (used to keep a turn's bridge ahead of its deliverable).
  void hold_task(const std::string& task_id);
  void release_task(const std::string& task_id);

  /// Latest step-state snapshot per task, from progress events.
  json plan_view(const std::string& session_id) const;
  std::size_t duplicate_attempts() const { return duplicate_attempts_; }

  /// Called after each transcript entry the integrator appends.
  using AppliedFn = std::function<void(const StateUpdateEvent&, const TranscriptEntry&)>;
  void set_on_applied(AppliedFn fn) { on_applied_ = std::move(fn); }

 private:
  std::optional<TranscriptEntry> apply(const StateUpdateEvent& event);

  SessionStore& store_;
  IntegrationOptions options_;
  mutable std::mutex mu_;
  std::set<std::string> held_;
  std::map<std::string, std::vector<StateUpdateEvent>> deferred_;
  std::map<std::string, std::map<std::string, json>> plans_;  // session -> task -> view
  std::size_t duplicate_attempts_ = 0;
  AppliedFn on_applied_;
};

}  // namespace dualtrack
