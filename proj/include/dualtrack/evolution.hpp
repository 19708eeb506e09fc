#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dualtrack/augmentation.hpp"
#include "dualtrack/backend.hpp"
#include "dualtrack/engine.hpp"
#include "dualtrack/router.hpp"
#include "dualtrack/shared_state.hpp"

namespace dualtrack {

using json = nlohmann::json;

struct OutcomeSignals {
  bool followed_up = false;
  double user_sentiment = 0;
  int corrections = 0;
};

struct Episode {
  std::string episode_id;
  std::string session_id;
  std::string user_id;
  std::vector<TranscriptEntry> turns;
  std::vector<json> traces;  // serialized execution traces
  std::vector<RoutingDecision> routing_decisions;
  std::vector<TraceItem> working_memory;  // raw or folded branches of this window's tasks
  OutcomeSignals outcome;
  std::optional<std::vector<std::string>> expected_tools;  // ground truth, when known
};

void to_json(json& j, const Episode& e);
void from_json(const json& j, Episode& e);

/// Slices user turns [first, last) of one session into an episode. Throws
/// invalid_argument when the window holds no completed turn.
Episode log_episode(const SessionStore& store, const std::vector<TurnRecord>& session_turns,
                    std::size_t first, std::size_t last);

/// Writes <dir>/episodes/<episode_id>.json (sorted keys) and returns the path.
std::filesystem::path save_episode(const Episode& e, const std::filesystem::path& dir);
Episode load_episode(const std::filesystem::path& path);
std::vector<Episode> load_episodes(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// judging

struct JudgeVerdict {
  bool engagement = false;
  bool compliance = false;
  double sentiment = 0;
  std::string reasoning;
};

void to_json(json& j, const JudgeVerdict& v);

/// Signed lexicon score, (pos - neg) / max(1, pos + neg).
double sentiment_score(const std::string& text);
bool is_terminal_reply(const std::string& text);

class Judge {
 public:
  virtual ~Judge() = default;
  virtual JudgeVerdict judge(const Episode& episode) = 0;
};

/// engagement: a non-terminal user turn follows an assistant reply;
/// compliance: every invoked tool is in the plan skeleton (or ground truth)
/// with schema-valid args; sentiment: lexicon score over user turns.
class ReferenceJudge final : public Judge {
 public:
  explicit ReferenceJudge(const ToolRegistry* catalog = nullptr) : catalog_(catalog) {}
  JudgeVerdict judge(const Episode& episode) override;

 private:
  const ToolRegistry* catalog_;
};

/// Scoring rubric emitted by model judges.
struct RubricScore {
  int persona_score = 0;  // 1..5
  int empathy_score = 0;  // 1..5
  bool fidelity_hit = false;
  std::string reasoning;
};

/// Throws SchemaViolation on malformed output, missing or unknown fields,
/// wrong types or scores outside 1..5.
RubricScore validate_rubric(std::string_view raw);

class ModelJudge final : public Judge {
 public:
  explicit ModelJudge(std::shared_ptr<TextCompletion> backend) : backend_(std::move(backend)) {}
  JudgeVerdict judge(const Episode& episode) override;

 private:
  std::shared_ptr<TextCompletion> backend_;
};

// ---------------------------------------------------------------------------
// curation and export

struct CurationResult {
  std::vector<Episode> silver;
  std::vector<Episode> gold_candidates;  // flagged for human review
};

bool passes(const JudgeVerdict& v, double sentiment_threshold = 0.0);

/// Seeded sample of k indices out of n, returned in ascending order.
std::vector<std::size_t> seeded_sample(std::size_t n, std::size_t k, std::uint64_t seed);

CurationResult curate(const std::vector<Episode>& episodes, const std::vector<JudgeVerdict>& verdicts,
                      double sample_rate, std::uint64_t seed, double sentiment_threshold = 0.0);

/// "conversation" when chat decisions dominate, else "collaboration".
std::string stratum(const Episode& e);

/// Newline-delimited records after a header record. Throws io error when the
/// path cannot be written. Returns the number of records (header excluded).
std::size_t export_sft(const std::vector<Episode>& episodes, const std::vector<JudgeVerdict>& verdicts,
                       const std::filesystem::path& path);

std::string stage_name(int version);  // evo-v1, evo-v2, ...

// ---------------------------------------------------------------------------
// context folding

struct FoldedBranch {
  std::string branch_id;
  std::string summary;
  std::string archive_ref;
  std::int64_t original_tokens = 0;
  std::int64_t folded_tokens = 0;
};

/// Append-only archive file addressed by "<offset>:<length>" locators.
class TraceArchive {
 public:
  explicit TraceArchive(std::filesystem::path path);
  std::string append(const std::string& raw);
  std::string read(const std::string& ref) const;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// Folds one branch in place when it exceeds the cap; nullopt when it is
/// already folded or under the cap.
std::optional<FoldedBranch> fold(TraceItem& item, std::int64_t token_cap, TraceArchive& archive);
std::string unfold(const TraceItem& item, const TraceArchive& archive);

/// Folds every over-cap branch of a session's working memory.
std::vector<FoldedBranch> fold_working_memory(SessionStore& store, const std::string& session_id,
                                              std::int64_t token_cap, TraceArchive& archive);

std::int64_t working_memory_tokens(const std::vector<TraceItem>& items);

// ---------------------------------------------------------------------------
// distillation

std::vector<KnowledgeNugget> distill(const Episode& episode, Millis now = 0);

/// Commits nuggets through the session store; returns how many were new.
std::size_t commit_nuggets(SessionStore& store, const Episode& episode,
                           const std::vector<KnowledgeNugget>& nuggets);

// ---------------------------------------------------------------------------

struct FlywheelOptions {
  double sample_rate = 0.1;
  std::uint64_t seed = 42;
  double sentiment_threshold = 0.0;
  int version = 1;
  std::filesystem::path out_dir = "evo";
};

struct FlywheelReport {
  std::size_t episodes = 0;
  std::size_t silver = 0;
  std::size_t gold_candidates = 0;
  std::size_t nuggets = 0;
  std::filesystem::path silver_path;
  std::filesystem::path gold_path;
};

/// judge -> curate -> export (silver and gold candidates) -> distill.
FlywheelReport run_flywheel(const std::vector<Episode>& episodes, Judge& judge, const FlywheelOptions& opt,
                            SessionStore* store = nullptr);

}  // namespace dualtrack
