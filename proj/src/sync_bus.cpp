#include "dualtrack/sync_bus.hpp"

namespace dualtrack {

std::string_view to_string(EventKind k) {
  switch (k) {
    case EventKind::progress: return "progress";
    case EventKind::artifact: return "artifact";
    case EventKind::clarification: return "clarification";
    case EventKind::final_result: return "final";
    case EventKind::failure: return "failure";
  }
  return "progress";
}

EventKind parse_event_kind(std::string_view s) {
  if (s == "progress") return EventKind::progress;
  if (s == "artifact") return EventKind::artifact;
  if (s == "clarification") return EventKind::clarification;
  if (s == "final") return EventKind::final_result;
  if (s == "failure") return EventKind::failure;
  throw Error(ErrorKind::invalid_argument, "unknown event kind: " + std::string(s));
}

void to_json(json& j, const StateUpdateEvent& e) {
  j = json{{"event_id", e.event_id},   {"session_id", e.session_id}, {"task_id", e.task_id},
           {"kind", to_string(e.kind)}, {"payload", e.payload},       {"causal_seq", e.causal_seq},
           {"emitted_at", e.emitted_at}};
}

void from_json(const json& j, StateUpdateEvent& e) {
  e.event_id = j.at("event_id").get<std::string>();
  e.session_id = j.at("session_id").get<std::string>();
  e.task_id = j.at("task_id").get<std::string>();
  e.kind = parse_event_kind(j.at("kind").get<std::string>());
  e.payload = j.at("payload");
  e.causal_seq = j.at("causal_seq").get<std::int64_t>();
  e.emitted_at = j.at("emitted_at").get<Millis>();
}

EventBus::EventBus(SessionStore& store) : store_(store) {}

EmitResult EventBus::emit(const StateUpdateEvent& e) {
  std::lock_guard g(mu_);
  if (seen_ids_.count(e.event_id)) {
    ++duplicates_;
    return {EmitStatus::duplicate, "duplicate event id " + e.event_id};
  }
  if (!store_.has_session(e.session_id))
    return {EmitStatus::rejected, "unknown session " + e.session_id};
  if (!store_.is_pending(e.session_id, e.task_id))
    return {EmitStatus::rejected, "task " + e.task_id + " is not pending in " + e.session_id};

  auto& stream = streams_[e.session_id + "|" + e.task_id];
  if (e.causal_seq < stream.next_seq || stream.buffer.count(e.causal_seq))
    return {EmitStatus::rejected, "causal_seq " + std::to_string(e.causal_seq) + " already used"};
  if (stream.terminal_seq) {
    if (is_terminal(e.kind))
      return {EmitStatus::rejected, "task " + e.task_id + " already has a terminal event"};
    if (e.causal_seq > *stream.terminal_seq)
      return {EmitStatus::rejected, "event after terminal for task " + e.task_id};
  }
  if (is_terminal(e.kind)) {
    for (const auto& [seq, _] : stream.buffer)
      if (seq > e.causal_seq)
        return {EmitStatus::rejected, "terminal event precedes buffered events"};
    stream.terminal_seq = e.causal_seq;
  }

  seen_ids_.insert(e.event_id);
  stream.buffer.emplace(e.causal_seq, e);
  for (auto it = stream.buffer.find(stream.next_seq); it != stream.buffer.end();
       it = stream.buffer.find(stream.next_seq)) {
    auto ev = std::move(it->second);
    stream.buffer.erase(it);
    ++stream.next_seq;
    deliver(ev);
  }
  return {EmitStatus::queued, {}};
}

void EventBus::deliver(const StateUpdateEvent& e) {
  logs_[e.session_id].push_back(e);
  // Copy: a subscriber may subscribe or unsubscribe while being called.
  auto subs = subs_;
  for (const auto& [_, sub] : subs)
    if (sub.session_id == e.session_id) sub.fn(e);
}

EventBus::SubscriptionId EventBus::subscribe(const std::string& session_id, Subscriber fn,
                                             std::size_t from_index) {
  std::lock_guard g(mu_);
  auto it = logs_.find(session_id);
  if (it != logs_.end())
    for (std::size_t i = from_index; i < it->second.size(); ++i) fn(it->second[i]);
  auto id = next_sub_++;
  subs_.emplace(id, Sub{session_id, std::move(fn)});
  return id;
}

void EventBus::unsubscribe(SubscriptionId id) {
  std::lock_guard g(mu_);
  subs_.erase(id);
}

std::vector<StateUpdateEvent> EventBus::feed(const std::string& session_id,
                                             std::size_t from_index) const {
  std::lock_guard g(mu_);
  auto it = logs_.find(session_id);
  if (it == logs_.end() || from_index >= it->second.size()) return {};
  return {it->second.begin() + static_cast<std::ptrdiff_t>(from_index), it->second.end()};
}

std::size_t EventBus::duplicates_seen() const {
  std::lock_guard g(mu_);
  return duplicates_;
}

// ---------------------------------------------------------------------------

Integrator::Integrator(SessionStore& store, IntegrationOptions options)
    : store_(store), options_(options) {}

void Integrator::hold_task(const std::string& task_id) {
  std::lock_guard g(mu_);
  held_.insert(task_id);
}

void Integrator::release_task(const std::string& task_id) {
  std::vector<StateUpdateEvent> pending;
  {
    std::lock_guard g(mu_);
    held_.erase(task_id);
    auto it = deferred_.find(task_id);
    if (it == deferred_.end()) return;
    pending = std::move(it->second);
    deferred_.erase(it);
  }
  for (const auto& e : pending) apply(e);
}

std::optional<TranscriptEntry> Integrator::integrate(const StateUpdateEvent& e) {
  {
    std::lock_guard g(mu_);
    if (e.payload.is_object() && e.payload.contains("plan"))
      plans_[e.session_id][e.task_id] = e.payload["plan"];
    if (e.kind == EventKind::progress) return std::nullopt;
    if (held_.count(e.task_id)) {
      deferred_[e.task_id].push_back(e);
      return std::nullopt;
    }
  }
  return apply(e);
}

std::optional<TranscriptEntry> Integrator::apply(const StateUpdateEvent& e) {
  if (e.kind == EventKind::progress) return std::nullopt;
  if (e.kind == EventKind::artifact && !options_.surface_artifacts) return std::nullopt;
  if (store_.has_event_entry(e.session_id, e.event_id)) {
    std::lock_guard g(mu_);
    ++duplicate_attempts_;
    return std::nullopt;
  }
  EntryDraft d;
  d.timestamp = e.emitted_at;
  d.source_event_id = e.event_id;
  d.content = e.payload.is_object() ? e.payload.value("text", std::string{}) : e.payload.dump();
  switch (e.kind) {
    case EventKind::final_result:
    case EventKind::failure:
      d.role = Role::system_integration;
      d.kind = EntryKind::deliverable;
      break;
    case EventKind::clarification:
      d.role = Role::assistant;
      d.kind = EntryKind::clarification;
      break;
    default:
      d.role = Role::system_integration;
      d.kind = EntryKind::progress_note;
      break;
  }
  std::int64_t seq;
  try {
    seq = store_.append_transcript(e.session_id, d);
  } catch (const Error& err) {
    if (err.kind() != ErrorKind::conflict) throw;
    std::lock_guard g(mu_);
    ++duplicate_attempts_;
    return std::nullopt;
  }
  if (is_terminal(e.kind)) store_.remove_pending_task(e.session_id, e.task_id);
  TranscriptEntry entry;
  entry.seq = seq;
  entry.role = d.role;
  entry.kind = d.kind;
  entry.content = d.content;
  entry.source_event_id = d.source_event_id;
  entry.timestamp = d.timestamp;
  if (on_applied_) on_applied_(e, entry);
  return entry;
}

json Integrator::plan_view(const std::string& session_id) const {
  std::lock_guard g(mu_);
  json out = json::object();
  auto it = plans_.find(session_id);
  if (it != plans_.end())
    for (const auto& [task, view] : it->second) out[task] = view;
  return out;
}

}  // namespace dualtrack
