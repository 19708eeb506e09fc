#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dualtrack/engine.hpp"

namespace dualtrack {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// corpus

struct ScriptedTurn {
  std::string text;            // spoken (audio) or typed
  bool audio = true;
  FrameDescriptor frame;       // empty: no video this turn
  /// Submitted, bound to the suspended task, when this turn leaves a
  /// clarification pending.
  std::optional<std::string> clarification_answer;
};

struct ToolCall {
  std::string tool;
  ArgMap args;

  bool operator==(const ToolCall&) const = default;
};

/// tool(k=v,...) with keys sorted and values normalized (lowercase, trimmed,
/// inner whitespace collapsed).
std::string canonical_call(const ToolCall& call);

namespace tags {
inline constexpr const char* unambiguous = "unambiguous";
inline constexpr const char* long_horizon = "long-horizon";
inline constexpr const char* cross_domain = "cross-domain";
inline constexpr const char* ambiguous = "ambiguous";
}  // namespace tags

struct BenchmarkCase {
  std::string case_id;
  std::vector<ScriptedTurn> turns;
  std::vector<Mode> routing_gt;                        // one per scripted turn
  std::vector<std::vector<ToolCall>> execution_gt;     // acceptable variants; empty for chat-only cases
  std::vector<std::string> response_gt;                // key points
  std::set<std::string> tags;
  std::vector<std::pair<std::string, std::string>> profile;
  std::vector<std::string> history;

  bool has_tag(const std::string& t) const { return tags.count(t) > 0; }
};

void to_json(json& j, const ScriptedTurn& t);
void from_json(const json& j, ScriptedTurn& t);
void to_json(json& j, const ToolCall& c);
void from_json(const json& j, ToolCall& c);
void to_json(json& j, const BenchmarkCase& c);
void from_json(const json& j, BenchmarkCase& c);

/// Problems with one case; empty when it is valid.
std::vector<std::string> validate_case(const BenchmarkCase& c, const ToolRegistry& catalog);
/// Throws invalid_argument listing every offending case.
void validate_corpus(const std::vector<BenchmarkCase>& corpus, const ToolRegistry& catalog);

std::vector<BenchmarkCase> load_corpus(const std::filesystem::path& path);
void save_corpus(const std::vector<BenchmarkCase>& corpus, const std::filesystem::path& path);

/// The bundled 200-case corpus. Deterministic for a seed.
std::vector<BenchmarkCase> generate_corpus(std::uint64_t seed = 42);

/// The trip-planning case used throughout the docs and tests.
BenchmarkCase trip_case();

// ---------------------------------------------------------------------------
// offline metrics

/// Nearest-rank percentile over unsorted values; nullopt when empty.
std::optional<Millis> percentile(std::vector<Millis> values, double p);

/// Mode agreement per turn. Throws invalid_argument on a length mismatch;
/// nullopt when both are empty.
std::optional<double> dispatch_precision(const std::vector<Mode>& decisions, const std::vector<Mode>& routing_gt);

/// True iff the invoked call set equals one of the variant sets exactly.
bool matches_variant(const std::vector<ToolCall>& invoked, const std::vector<std::vector<ToolCall>>& variants);

/// Cases with no execution GT are not scored. Throws invalid_argument on a
/// length mismatch; nullopt when nothing is scored.
std::optional<double> success_rate(const std::vector<std::vector<ToolCall>>& invoked,
                                   const std::vector<std::vector<std::vector<ToolCall>>>& execution_gt);

using FidelityJudge = std::function<bool(const std::string& response, const std::vector<std::string>& points)>;

/// Every key point is a normalized substring of the response.
bool substring_fidelity(const std::string& response, const std::vector<std::string>& points);

/// Cases with no key points are not scored.
std::optional<double> fidelity(const std::vector<std::string>& responses,
                               const std::vector<std::vector<std::string>>& key_points,
                               const FidelityJudge& judge = substring_fidelity);

// ---------------------------------------------------------------------------
// online metrics

enum class ActivityKind { turn, click, share, like, terminate };
std::string_view to_string(ActivityKind k);
ActivityKind parse_activity_kind(std::string_view s);

struct ActivityRecord {
  std::string user_id;
  Millis timestamp_ms = 0;
  ActivityKind kind = ActivityKind::turn;
  std::string extra;
};

/// CSV with header user_id,timestamp_ms,event_kind,extra. Throws io or
/// invalid_argument with the line number.
std::vector<ActivityRecord> load_activity_csv(const std::filesystem::path& path);
std::vector<ActivityRecord> parse_activity_csv(std::istream& in);

struct ActivitySession {
  std::string user_id;
  std::vector<ActivityRecord> events;
};

/// Splits each user's events (kept in input order) wherever the gap to the
/// previous event exceeds the limit. Sessions come out grouped by user in
/// order of first appearance.
std::vector<ActivitySession> segment_sessions(const std::vector<ActivityRecord>& activity, double gap_minutes = 30);
/// Mean number of turn events per session; nullopt without sessions.
std::optional<double> avg_turns(const std::vector<ActivitySession>& sessions);

inline constexpr Millis kDayMs = 86'400'000;

/// 100 * |U_t and U_t+7| / |U_t| where U_d holds users with a turn event on
/// day d (day = floor(timestamp / 1 day)). nullopt when U_t is empty.
std::optional<double> retention7(const std::vector<ActivityRecord>& activity, std::int64_t day_t);

struct TurnSignal {
  Millis dwell_ms = 0;
  std::int64_t length_tokens = 0;
  bool explicit_positive = false;
  bool terminated = false;
  bool negative_sentiment = false;
  bool requery = false;
};

struct GtrConfig {
  Millis base_ms = 1500;
  Millis per_token_ms = 40;
  Millis threshold(std::int64_t length_tokens) const { return base_ms + per_token_ms * length_tokens; }
};

bool is_good_turn(const TurnSignal& t, const GtrConfig& cfg = {});
std::optional<double> gtr(const std::vector<TurnSignal>& records, const GtrConfig& cfg = {});

/// One session annotated for the completion proxy: its tier, whether a
/// service card was clicked after the deliverable, and for each following
/// user turn whether it corrected or reformulated the request.
struct ProxySession {
  int tier = 1;
  bool card_click = false;
  std::vector<bool> corrections_after;
};

bool proxy_completed(const ProxySession& s);
/// Tier-1 sessions are skipped; nullopt when none remain.
std::optional<double> task_completion_proxy(const std::vector<ProxySession>& sessions);

// ---------------------------------------------------------------------------
// bench runner

struct LatencySummary {
  std::optional<Millis> p50, p95, p99, max;
  std::size_t count = 0;
};

LatencySummary summarize(const std::vector<Millis>& values);
void to_json(json& j, const LatencySummary& s);

struct CaseVerdict {
  std::string case_id;
  std::set<std::string> tags;
  std::vector<std::string> modes;     // decided, per scripted turn
  std::vector<std::string> statuses;  // per scripted turn
  bool routing_ok = true;
  std::vector<std::string> tool_calls;  // canonical, sorted
  std::optional<bool> success;
  std::optional<bool> fidelity_hit;
  std::vector<Millis> ttft;  // every submitted turn, answers included
  std::vector<Millis> e2e;
  std::string response;
};

void to_json(json& j, const CaseVerdict& v);

struct InvariantChecks {
  std::size_t ttft_violations = 0;       // first entry later than the budget, or missing
  std::size_t order_violations = 0;      // deliverable before its bridge
  std::size_t duplicate_deliverables = 0;
  std::size_t parallel_checked = 0;
  std::size_t parallel_violations = 0;   // makespan above critical path + 1 ms

  bool ok() const {
    return ttft_violations == 0 && order_violations == 0 && duplicate_deliverables == 0 &&
           parallel_violations == 0;
  }
};

struct MetricsReport {
  std::size_t cases = 0;
  std::size_t turns = 0;
  std::uint64_t seed = 0;
  std::string perception;
  Millis ttft_budget_ms = 0;
  std::optional<double> p_disp;
  std::optional<double> p_disp_unambiguous;
  std::optional<double> success_rate;
  std::optional<double> fidelity;
  LatencySummary ttft;
  LatencySummary e2e_all;      // every completed turn, failures included
  LatencySummary e2e_success;  // chat turns and successful tasks only
  InvariantChecks checks;
  std::vector<CaseVerdict> verdicts;
};

void to_json(json& j, const MetricsReport& r);
/// Canonical serialization used for report files.
std::string report_text(const MetricsReport& r);
/// Human-readable summary table.
std::string report_table(const MetricsReport& r);

/// Replays one case; exposed for tests that need the engine afterwards.
struct CaseRun {
  std::unique_ptr<Engine> engine;
  std::string session_id;
  CaseVerdict verdict;
  std::vector<Mode> decisions;
};

struct BenchOptions {
  Millis turn_gap_ms = 2000;  // idle time between scripted turns
  FidelityJudge judge = substring_fidelity;
  EngineParts parts;  // shared by every case's engine
  /// Called after each case with its finished run (episode logging etc).
  std::function<void(const BenchmarkCase&, CaseRun&)> on_case;
};

/// Replays every case on a fresh engine and session under the virtual clock.
/// Throws invalid_argument when the corpus does not validate.
MetricsReport run_bench(const std::vector<BenchmarkCase>& corpus, EngineConfig config, std::uint64_t seed,
                        const BenchOptions& options = {});

CaseRun run_case(const BenchmarkCase& c, const EngineConfig& config, const BenchOptions& options = {});

/// Turns a scripted turn into engine payloads (audio transcript or text, plus
/// one video frame when given).
TurnInput scripted_input(const ScriptedTurn& t, Millis origin_ms = 0);

}  // namespace dualtrack
