#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <shared_mutex>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "dualtrack/clock.hpp"
#include "dualtrack/common.hpp"

namespace dualtrack {

using json = nlohmann::json;

enum class LatencyKind { fixed, lognormal, pareto };

/// Latency distribution for a simulated tool, in virtual milliseconds.
/// fixed: a = ms. lognormal: a = mu, b = sigma (of ln ms). pareto: a = scale ms, b = shape.
struct LatencyModel {
  LatencyKind kind = LatencyKind::fixed;
  double a = 0;
  double b = 0;

  static LatencyModel fixed(Millis ms) { return {LatencyKind::fixed, static_cast<double>(ms), 0}; }
  static LatencyModel lognormal(double mu, double sigma) { return {LatencyKind::lognormal, mu, sigma}; }
  static LatencyModel pareto(double scale, double shape) { return {LatencyKind::pareto, scale, shape}; }

  Millis sample(std::mt19937_64& rng) const;
};

void to_json(json& j, const LatencyModel& m);
void from_json(const json& j, LatencyModel& m);

struct ArgSpec {
  std::string type = "string";  // string | int | number | bool
  bool required = true;
};

struct ToolDescriptor {
  std::string tool_id;
  std::string description;
  std::map<std::string, ArgSpec> arg_schema;
  std::map<std::string, std::string> result_schema;
  LatencyModel latency;
  double failure_rate = 0.0;
};

void to_json(json& j, const ToolDescriptor& d);
void from_json(const json& j, ToolDescriptor& d);

/// Context passed to a tool: arguments plus a read-only slice of session facts.
struct ExecutionEnvelope {
  std::string envelope_id;
  std::string tool_id;
  ArgMap args;
  std::vector<std::string> context_slice;
  Millis issued_at = 0;
  std::optional<Millis> deadline_ms;
};

void to_json(json& j, const ExecutionEnvelope& e);

struct ToolResult {
  std::string tool_id;
  json payload;
  std::string summary;
  Millis latency_ms = 0;
};

enum class FailureCause { validity, timeout, error, refused };
std::string_view to_string(FailureCause c);

struct ToolFailure {
  FailureCause cause = FailureCause::error;
  std::string message;
  Millis latency_ms = 0;
};

using ToolOutcome = std::variant<ToolResult, ToolFailure>;

void to_json(json& j, const ToolOutcome& o);

/// Deterministic simulated implementation: payload from args and a seed.
/// The payload should carry a "summary" string.
using ToolHandler = std::function<json(const ArgMap& args, std::uint64_t seed)>;

/// Tool registry behind the unified execution interface. Read-mostly and
/// safe to share across threads.
class ToolRegistry {
 public:
  explicit ToolRegistry(std::uint64_t seed = 42) : seed_(seed) {}

  /// Throws registration error on a duplicate id or an invalid descriptor.
  void register_tool(ToolDescriptor descriptor, ToolHandler handler = nullptr);
  bool has(const std::string& tool_id) const;
  ToolDescriptor descriptor(const std::string& tool_id) const;
  std::vector<ToolDescriptor> catalog() const;
  std::size_t size() const;

  /// Throws validity error when args do not match the tool's schema.
  void validate_args(const std::string& tool_id, const ArgMap& args) const;

  /// Invokes a tool on the virtual clock. `done` fires exactly once unless
  /// the tool is stalled and no deadline is set. Invalid args fail at +0 ms.
  void invoke(const ExecutionEnvelope& envelope, Scheduler& clock,
              std::function<void(ToolOutcome)> done) const;

  /// Sampled latency for an envelope; identical for identical envelope ids.
  Millis sample_latency(const ExecutionEnvelope& envelope) const;

  void set_seed(std::uint64_t seed) { seed_ = seed; }
  std::uint64_t seed() const { return seed_; }

  /// Fault injection: a stalled tool never answers.
  void set_stalled(const std::string& tool_id, bool stalled);
  bool stalled(const std::string& tool_id) const;

  void set_latency(const std::string& tool_id, LatencyModel model);

  json catalog_json() const;
  /// Registers every descriptor of a catalog file (JSON array). Known built-in
  /// ids get their simulated handler; others echo their arguments.
  void load_catalog(const json& catalog);

 private:
  struct Entry {
    ToolDescriptor descriptor;
    ToolHandler handler;
  };

  mutable std::shared_mutex mu_;
  std::map<std::string, Entry> tools_;
  std::set<std::string> stalled_;
  std::uint64_t seed_;
};

/// Built-in simulated tools with canned deterministic corpora.
std::vector<std::pair<ToolDescriptor, ToolHandler>> builtin_tools();
ToolHandler builtin_handler(const std::string& tool_id);
void register_builtin_tools(ToolRegistry& registry);

// ---------------------------------------------------------------------------
// delegation between agents

struct DelegationContract {
  std::string contract_id;
  std::string delegate_profile_id;
  std::string task_statement;
  std::map<std::string, std::string> expected_result_schema;  // key -> type
  Millis deadline_ms = 0;
  ArgMap args;
  int depth = 0;  // nesting depth of the delegating task
};

enum class SubAgentStatus { ok, failed, timeout, refused };
std::string_view to_string(SubAgentStatus s);

struct SubAgentResult {
  SubAgentStatus status = SubAgentStatus::ok;
  json payload;
  std::string summary;
  std::string message;
};

/// Runs a nested task under a delegate profile; implemented by the slow track.
class SubAgentRunner {
 public:
  virtual ~SubAgentRunner() = default;
  virtual bool has_profile(const std::string& profile_id) const = 0;
  virtual void run(const DelegationContract& contract, Scheduler& clock,
                   std::function<void(SubAgentResult)> done) = 0;
};

struct DelegationLimits {
  int max_depth = 2;
  int max_live_subtasks = 64;
};

class Delegator {
 public:
  explicit Delegator(DelegationLimits limits = {}) : limits_(limits) {}

  /// Delegates a contract. Refused when the depth cap or global live cap would
  /// be exceeded or the profile is unknown; times out at the contract deadline;
  /// results missing expected keys are coerced to failures.
  void delegate(const DelegationContract& contract, SubAgentRunner& runner, Scheduler& clock,
                std::function<void(SubAgentResult)> done);

  int live() const { return live_; }
  int peak_live() const { return peak_; }
  const DelegationLimits& limits() const { return limits_; }

 private:
  DelegationLimits limits_;
  int live_ = 0;
  int peak_ = 0;
};

// ---------------------------------------------------------------------------
// retrieval

enum class SourceKind { knowledge_base, user_history, agent_memory, hot_feed };
std::string_view to_string(SourceKind s);

struct Snippet {
  SourceKind source = SourceKind::knowledge_base;
  std::string doc_id;
  std::string text;
  double score = 0;
};

struct RetrievalCorpus {
  std::map<SourceKind, std::vector<std::pair<std::string, std::string>>> docs;  // (id, text)

  void add(SourceKind source, std::string id, std::string text) {
    docs[source].emplace_back(std::move(id), std::move(text));
  }
};

/// Top-k snippets by term-frequency cosine; ties keep source then insertion
/// order. Zero-score documents are not returned.
std::vector<Snippet> retrieve(const std::string& query, const RetrievalCorpus& corpus,
                              const std::set<SourceKind>& sources, std::size_t k = 5);

}  // namespace dualtrack
