#include "dualtrack/shared_state.hpp"

#include <algorithm>
#include <cstdio>

namespace dualtrack {

namespace fs = std::filesystem;

std::string_view to_string(Role r) {
  switch (r) {
    case Role::user: return "user";
    case Role::assistant: return "assistant";
    case Role::system_integration: return "system-integration";
  }
  return "user";
}

std::string_view to_string(EntryKind k) {
  switch (k) {
    case EntryKind::turn: return "turn";
    case EntryKind::bridge: return "bridge";
    case EntryKind::deliverable: return "deliverable";
    case EntryKind::clarification: return "clarification";
    case EntryKind::progress_note: return "progress-note";
  }
  return "turn";
}

Role parse_role(std::string_view s) {
  if (s == "user") return Role::user;
  if (s == "assistant") return Role::assistant;
  if (s == "system-integration") return Role::system_integration;
  throw Error(ErrorKind::invalid_argument, "unknown role: " + std::string(s));
}

EntryKind parse_entry_kind(std::string_view s) {
  if (s == "turn") return EntryKind::turn;
  if (s == "bridge") return EntryKind::bridge;
  if (s == "deliverable") return EntryKind::deliverable;
  if (s == "clarification") return EntryKind::clarification;
  if (s == "progress-note") return EntryKind::progress_note;
  throw Error(ErrorKind::invalid_argument, "unknown entry kind: " + std::string(s));
}

std::string_view to_string(NuggetScope s) { return s == NuggetScope::user ? "user" : "agent"; }

void to_json(json& j, const TranscriptEntry& e) {
  j = json{{"seq", e.seq},
           {"role", to_string(e.role)},
           {"kind", to_string(e.kind)},
           {"content", e.content},
           {"source_event_id", e.source_event_id ? json(*e.source_event_id) : json(nullptr)},
           {"timestamp", e.timestamp}};
}

void from_json(const json& j, TranscriptEntry& e) {
  e.seq = j.at("seq").get<std::int64_t>();
  e.role = parse_role(j.at("role").get<std::string>());
  e.kind = parse_entry_kind(j.at("kind").get<std::string>());
  e.content = j.at("content").get<std::string>();
  const auto& src = j.at("source_event_id");
  e.source_event_id = src.is_null() ? std::nullopt : std::optional(src.get<std::string>());
  e.timestamp = j.at("timestamp").get<Millis>();
}

void to_json(json& j, const KnowledgeNugget& n) {
  j = json{{"nugget_id", n.nugget_id},
           {"statement", n.statement},
           {"scope", to_string(n.scope)},
           {"provenance", n.provenance},
           {"created_at", n.created_at}};
}

std::int64_t profile_entry_tokens(const std::string& key, const std::string& value) {
  return estimate_tokens(key + ": " + value);
}

SessionStore::SessionStore(std::optional<fs::path> log_dir) : log_dir_(std::move(log_dir)) {
  if (log_dir_) {
    fs::create_directories(*log_dir_);
    restore_from(*log_dir_);
  }
}

void SessionStore::register_persona(AgentMemory memory) {
  if (memory.persona.name.empty() && memory.persona.descriptor.empty())
    throw Error(ErrorKind::configuration, "persona must not be empty: " + memory.persona_id);
  std::unique_lock lock(mu_);
  auto id = memory.persona_id;
  agents_[id] = std::move(memory);
}

bool SessionStore::has_persona(const std::string& persona_id) const {
  std::shared_lock lock(mu_);
  return agents_.count(persona_id) > 0;
}

AgentMemory SessionStore::agent_memory(const std::string& persona_id) const {
  std::shared_lock lock(mu_);
  auto it = agents_.find(persona_id);
  if (it == agents_.end()) throw Error(ErrorKind::configuration, "unknown persona: " + persona_id);
  return it->second;
}

std::vector<std::string> SessionStore::persona_ids() const {
  std::shared_lock lock(mu_);
  std::vector<std::string> out;
  for (const auto& [id, _] : agents_) out.push_back(id);
  return out;
}

UserMemory SessionStore::user_memory(const std::string& user_id) const {
  std::shared_lock lock(mu_);
  auto it = users_.find(user_id);
  return it == users_.end() ? UserMemory{} : it->second;
}

void SessionStore::set_profile(const std::string& user_id, const std::string& key,
                               const std::string& value) {
  {
    std::unique_lock lock(mu_);
    users_[user_id].profile[key] = value;
  }
  bump();
}

void SessionStore::add_history(const std::string& user_id, HistoryFact fact) {
  {
    std::unique_lock lock(mu_);
    users_[user_id].history.push_back(std::move(fact));
  }
  bump();
}

SessionState SessionStore::create_session(const std::string& user_id,
                                          const std::string& persona_id, Millis now) {
  auto session = std::make_shared<Session>();
  {
    std::unique_lock lock(mu_);
    if (!agents_.count(persona_id))
      throw Error(ErrorKind::configuration, "unknown persona: " + persona_id);
    char buf[32];
    std::snprintf(buf, sizeof buf, "s-%06llu", static_cast<unsigned long long>(next_session_++));
    auto& st = session->state;
    st.session_id = buf;
    st.user_id = user_id;
    st.persona_id = persona_id;
    st.created_at = now;
    st.last_active_at = now;
    auto& refs = users_[user_id].session_refs;
    refs.push_back(st.session_id);
    if (refs.size() > 16) refs.erase(refs.begin());
    if (log_dir_) {
      session->log.open(*log_dir_ / (st.session_id + ".log.jsonl"), std::ios::app);
      write_meta(st);
    }
    sessions_.emplace(st.session_id, session);
  }
  bump();
  std::lock_guard g(session->mu);
  return session->state;
}

bool SessionStore::has_session(const std::string& session_id) const {
  std::shared_lock lock(mu_);
  return sessions_.count(session_id) > 0;
}

std::shared_ptr<SessionStore::Session> SessionStore::find(const std::string& session_id) const {
  std::shared_lock lock(mu_);
  auto it = sessions_.find(session_id);
  if (it == sessions_.end()) throw Error(ErrorKind::not_found, "unknown session: " + session_id);
  return it->second;
}

SessionState SessionStore::snapshot(const std::string& session_id) const {
  auto s = find(session_id);
  std::lock_guard g(s->mu);
  return s->state;
}

std::vector<TranscriptEntry> SessionStore::transcript(const std::string& session_id,
                                                      std::int64_t from_seq) const {
  auto s = find(session_id);
  std::lock_guard g(s->mu);
  const auto& t = s->state.transcript;
  if (from_seq <= 0) return t;
  if (from_seq >= static_cast<std::int64_t>(t.size())) return {};
  return {t.begin() + from_seq, t.end()};
}

std::vector<std::string> SessionStore::session_ids() const {
  std::shared_lock lock(mu_);
  std::vector<std::string> out;
  for (const auto& [id, _] : sessions_) out.push_back(id);
  std::sort(out.begin(), out.end());
  return out;
}

void SessionStore::close_session(const std::string& session_id) {
  auto s = find(session_id);
  {
    std::lock_guard g(s->mu);
    s->state.closed = true;
  }
  bump();
}

std::int64_t SessionStore::append_transcript(const std::string& session_id, EntryDraft draft) {
  auto s = find(session_id);
  std::int64_t seq;
  {
    std::lock_guard g(s->mu);
    auto& st = s->state;
    if (draft.kind == EntryKind::deliverable && !draft.source_event_id)
      throw Error(ErrorKind::invalid_argument, "deliverable entry requires a source event id");
    if (draft.source_event_id && s->event_entries.count(*draft.source_event_id))
      throw Error(ErrorKind::conflict, "event already integrated: " + *draft.source_event_id);
    TranscriptEntry e;
    e.seq = seq = st.next_seq();
    e.role = draft.role;
    e.kind = draft.kind;
    e.content = std::move(draft.content);
    e.source_event_id = std::move(draft.source_event_id);
    e.timestamp = std::max(draft.timestamp, st.last_active_at);
    st.last_active_at = std::max(st.last_active_at, e.timestamp);
    if (e.source_event_id) s->event_entries.insert(*e.source_event_id);
    if (s->log.is_open()) {
      s->log << json(e).dump() << '\n';
      s->log.flush();
    }
    st.transcript.push_back(std::move(e));
  }
  bump();
  return seq;
}

bool SessionStore::has_event_entry(const std::string& session_id,
                                   const std::string& event_id) const {
  auto s = find(session_id);
  std::lock_guard g(s->mu);
  return s->event_entries.count(event_id) > 0;
}

ContextBundle SessionStore::read_context(const std::string& session_id,
                                         std::int64_t token_budget) const {
  if (token_budget <= 0) throw Error(ErrorKind::invalid_argument, "token budget must be positive");
  auto snap = snapshot(session_id);
  auto mem = user_memory(snap.user_id);

  ContextBundle bundle;
  for (const auto& [k, v] : mem.profile) {
    bundle.profile.emplace_back(k, v);
    bundle.token_estimate += profile_entry_tokens(k, v);
  }
  // Newest entries win: take the longest suffix that fits what the profile left over.
  std::int64_t remaining = token_budget - bundle.token_estimate;
  auto& t = snap.transcript;
  std::size_t first = t.size();
  while (first > 0) {
    auto cost = estimate_tokens(t[first - 1].content);
    if (cost > remaining) break;
    remaining -= cost;
    bundle.token_estimate += cost;
    --first;
  }
  bundle.entries.assign(t.begin() + static_cast<std::ptrdiff_t>(first), t.end());
  return bundle;
}

bool SessionStore::commit_nugget(NuggetScope scope, const std::string& owner_id,
                                 KnowledgeNugget nugget) {
  if (nugget.nugget_id.empty() || nugget.statement.empty() || nugget.provenance.empty())
    throw Error(ErrorKind::invalid_argument, "nugget requires id, statement and provenance");
  auto key = text::normalize(nugget.statement);
  bool accepted = false;
  {
    std::unique_lock lock(mu_);
    if (scope == NuggetScope::user) {
      auto& hist = users_[owner_id].history;
      bool dup = std::any_of(hist.begin(), hist.end(), [&](const HistoryFact& f) {
        return text::normalize(f.statement) == key || f.nugget_id == nugget.nugget_id;
      });
      if (!dup) {
        hist.push_back({nugget.nugget_id, nugget.statement, nugget.provenance, nugget.created_at});
        accepted = true;
      }
    } else {
      auto it = agents_.find(owner_id);
      if (it == agents_.end()) throw Error(ErrorKind::configuration, "unknown persona: " + owner_id);
      auto& ns = it->second.nuggets;
      bool dup = std::any_of(ns.begin(), ns.end(), [&](const KnowledgeNugget& n) {
        return text::normalize(n.statement) == key || n.nugget_id == nugget.nugget_id;
      });
      if (!dup) {
        nugget.scope = NuggetScope::agent;
        ns.push_back(std::move(nugget));
        accepted = true;
      }
    }
  }
  if (accepted) bump();
  return accepted;
}

void SessionStore::add_pending_task(const std::string& session_id, const std::string& task_id) {
  auto s = find(session_id);
  {
    std::lock_guard g(s->mu);
    s->state.pending_tasks.insert(task_id);
  }
  bump();
}

void SessionStore::remove_pending_task(const std::string& session_id, const std::string& task_id) {
  auto s = find(session_id);
  {
    std::lock_guard g(s->mu);
    s->state.pending_tasks.erase(task_id);
  }
  bump();
}

bool SessionStore::is_pending(const std::string& session_id, const std::string& task_id) const {
  auto s = find(session_id);
  std::lock_guard g(s->mu);
  return s->state.pending_tasks.count(task_id) > 0;
}

void SessionStore::add_trace(const std::string& session_id, TraceItem item) {
  auto s = find(session_id);
  std::lock_guard g(s->mu);
  s->state.working_memory.push_back(std::move(item));
}

void SessionStore::update_working_memory(
    const std::string& session_id, const std::function<void(std::vector<TraceItem>&)>& fn) {
  auto s = find(session_id);
  std::lock_guard g(s->mu);
  fn(s->state.working_memory);
}

std::uint64_t SessionStore::version() const {
  std::lock_guard g(version_mu_);
  return version_;
}

bool SessionStore::wait_for_change(std::uint64_t seen, std::chrono::milliseconds timeout) const {
  std::unique_lock g(version_mu_);
  return version_cv_.wait_for(g, timeout, [&] { return version_ != seen; });
}

void SessionStore::notify_change() { bump(); }

void SessionStore::bump() {
  {
    std::lock_guard g(version_mu_);
    ++version_;
  }
  version_cv_.notify_all();
}

void SessionStore::write_meta(const SessionState& s) const {
  std::ofstream meta(*log_dir_ / (s.session_id + ".meta.json"), std::ios::trunc);
  meta << json{{"session_id", s.session_id},
               {"user_id", s.user_id},
               {"persona_id", s.persona_id},
               {"created_at", s.created_at}}
              .dump()
       << '\n';
}

void SessionStore::restore_from(const fs::path& dir) {
  for (const auto& item : fs::directory_iterator(dir)) {
    auto name = item.path().filename().string();
    const std::string suffix = ".meta.json";
    if (name.size() <= suffix.size() || name.compare(name.size() - suffix.size(), suffix.size(), suffix))
      continue;
    std::ifstream in(item.path());
    json meta = json::parse(in);
    auto session = std::make_shared<Session>();
    auto& st = session->state;
    st.session_id = meta.at("session_id").get<std::string>();
    st.user_id = meta.at("user_id").get<std::string>();
    st.persona_id = meta.at("persona_id").get<std::string>();
    st.created_at = st.last_active_at = meta.at("created_at").get<Millis>();
    auto log_path = dir / (st.session_id + ".log.jsonl");
    std::ifstream log(log_path);
    std::string line;
    while (std::getline(log, line)) {
      if (line.empty()) continue;
      auto e = json::parse(line).get<TranscriptEntry>();
      if (e.seq != st.next_seq()) break;  // torn tail
      if (e.source_event_id) session->event_entries.insert(*e.source_event_id);
      st.last_active_at = std::max(st.last_active_at, e.timestamp);
      st.transcript.push_back(std::move(e));
    }
    session->log.open(log_path, std::ios::app);
    unsigned long long n = 0;
    if (std::sscanf(st.session_id.c_str(), "s-%llu", &n) == 1 && n >= next_session_)
      next_session_ = n + 1;
    users_[st.user_id].session_refs.push_back(st.session_id);
    sessions_.emplace(st.session_id, std::move(session));
  }
}

}  // namespace dualtrack
