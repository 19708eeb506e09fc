#pragma once

#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dualtrack/common.hpp"

namespace dualtrack {

using json = nlohmann::json;

enum class Role { user, assistant, system_integration };
enum class EntryKind { turn, bridge, deliverable, clarification, progress_note };

std::string_view to_string(Role r);
std::string_view to_string(EntryKind k);
Role parse_role(std::string_view s);
EntryKind parse_entry_kind(std::string_view s);

struct TranscriptEntry {
  std::int64_t seq = 0;
  Role role = Role::user;
  EntryKind kind = EntryKind::turn;
  std::string content;
  std::optional<std::string> source_event_id;
  Millis timestamp = 0;

  bool operator==(const TranscriptEntry&) const = default;
};

void to_json(json& j, const TranscriptEntry& e);
void from_json(const json& j, TranscriptEntry& e);

/// A transcript entry before the session writer assigns its sequence number.
struct EntryDraft {
  Role role = Role::user;
  EntryKind kind = EntryKind::turn;
  std::string content;
  std::optional<std::string> source_event_id;
  Millis timestamp = 0;
};

/// One item of the agent's working-memory trajectory.
struct TraceItem {
  std::string task_id;
  std::string step_id;
  std::string payload;  // raw text, or the summary when folded
  std::int64_t token_estimate = 0;
  bool folded = false;
  std::string archive_ref;  // set iff folded
};

enum class NuggetScope { user, agent };
std::string_view to_string(NuggetScope s);

struct KnowledgeNugget {
  std::string nugget_id;
  std::string statement;
  NuggetScope scope = NuggetScope::user;
  std::string provenance;  // episode id
  Millis created_at = 0;
};

void to_json(json& j, const KnowledgeNugget& n);

struct HistoryFact {
  std::string nugget_id;
  std::string statement;
  std::string provenance;
  Millis created_at = 0;
};

struct UserMemory {
  std::map<std::string, std::string> profile;
  std::vector<HistoryFact> history;
  std::vector<std::string> session_refs;
};

struct Persona {
  std::string name;
  std::string descriptor;
  std::vector<std::string> traits;
};

struct Document {
  std::string doc_id;
  std::string text;
};

struct AgentMemory {
  std::string persona_id;
  Persona persona;
  std::vector<Document> knowledge_base;
  std::vector<KnowledgeNugget> nuggets;
};

struct SessionState {
  std::string session_id;
  std::string user_id;
  std::string persona_id;
  std::vector<TranscriptEntry> transcript;
  std::vector<TraceItem> working_memory;
  std::set<std::string> pending_tasks;
  Millis created_at = 0;
  Millis last_active_at = 0;
  bool closed = false;

  std::int64_t next_seq() const { return static_cast<std::int64_t>(transcript.size()); }
};

struct ContextBundle {
  std::vector<std::pair<std::string, std::string>> profile;
  std::vector<TranscriptEntry> entries;  // oldest first
  std::int64_t token_estimate = 0;
};

std::int64_t profile_entry_tokens(const std::string& key, const std::string& value);

/// Owner of all per-session state and of the long-term user/agent memories.
///
/// Each session has a single serialized writer (its mutex); sessions mutate
/// independently. Readers get copies, which are consistent snapshots.
class SessionStore {
 public:
  /// With a log directory, every transcript append is mirrored to
  /// `<dir>/<session_id>.log.jsonl` and sessions found there are restored.
  explicit SessionStore(std::optional<std::filesystem::path> log_dir = std::nullopt);

  void register_persona(AgentMemory memory);
  bool has_persona(const std::string& persona_id) const;
  AgentMemory agent_memory(const std::string& persona_id) const;
  std::vector<std::string> persona_ids() const;

  UserMemory user_memory(const std::string& user_id) const;
  void set_profile(const std::string& user_id, const std::string& key, const std::string& value);
  void add_history(const std::string& user_id, HistoryFact fact);

  SessionState create_session(const std::string& user_id, const std::string& persona_id,
                              Millis now = 0);
  bool has_session(const std::string& session_id) const;
  SessionState snapshot(const std::string& session_id) const;
  std::vector<TranscriptEntry> transcript(const std::string& session_id,
                                          std::int64_t from_seq = 0) const;
  std::vector<std::string> session_ids() const;
  void close_session(const std::string& session_id);

  std::int64_t append_transcript(const std::string& session_id, EntryDraft draft);
  /// True when a transcript entry sourced from this event already exists.
  bool has_event_entry(const std::string& session_id, const std::string& event_id) const;

  ContextBundle read_context(const std::string& session_id, std::int64_t token_budget) const;

  bool commit_nugget(NuggetScope scope, const std::string& owner_id, KnowledgeNugget nugget);

  void add_pending_task(const std::string& session_id, const std::string& task_id);
  void remove_pending_task(const std::string& session_id, const std::string& task_id);
  bool is_pending(const std::string& session_id, const std::string& task_id) const;

  void add_trace(const std::string& session_id, TraceItem item);
  void update_working_memory(const std::string& session_id,
                             const std::function<void(std::vector<TraceItem>&)>& fn);

  /// Monotone counter bumped on every mutation; lets stream readers block for news.
  std::uint64_t version() const;
  bool wait_for_change(std::uint64_t seen, std::chrono::milliseconds timeout) const;
  void notify_change();

 private:
  struct Session {
    mutable std::mutex mu;
    SessionState state;
    std::set<std::string> event_entries;
    std::ofstream log;
  };

  std::shared_ptr<Session> find(const std::string& session_id) const;
  void restore_from(const std::filesystem::path& dir);
  void write_meta(const SessionState& s) const;
  void bump();

  std::optional<std::filesystem::path> log_dir_;
  mutable std::shared_mutex mu_;
  std::unordered_map<std::string, std::shared_ptr<Session>> sessions_;
  std::map<std::string, AgentMemory> agents_;
  std::map<std::string, UserMemory> users_;
  std::uint64_t next_session_ = 1;

  mutable std::mutex version_mu_;
  mutable std::condition_variable version_cv_;
  std::uint64_t version_ = 0;
};

}  // namespace dualtrack
