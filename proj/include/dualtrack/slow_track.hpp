#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dualtrack/augmentation.hpp"
#include "dualtrack/backend.hpp"
#include "dualtrack/clock.hpp"
#include "dualtrack/router.hpp"
#include "dualtrack/shared_state.hpp"
#include "dualtrack/similarity.hpp"

namespace dualtrack {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// agent profiles and dispatch

struct AgentProfile {
  std::string profile_id;
  std::string description;
  std::vector<std::string> capability_tags;
  std::vector<std::string> knowledge_refs;
  std::string embedder_key = "tf-cosine";
  bool generalist = false;
};

class ProfileRegistry {
 public:
  /// Throws registration error on duplicate ids.
  void add(AgentProfile profile);
  bool has(const std::string& id) const { return profiles_.count(id) > 0; }
  const AgentProfile& get(const std::string& id) const;
  std::vector<AgentProfile> all() const;
  bool empty() const { return profiles_.empty(); }
  std::optional<std::string> generalist() const { return generalist_; }

  /// Fault injection: a stalled profile never returns delegated work.
  void set_stalled(const std::string& id, bool stalled);
  bool stalled(const std::string& id) const { return stalled_.count(id) > 0; }

  static ProfileRegistry defaults();

 private:
  std::map<std::string, AgentProfile> profiles_;
  std::vector<std::string> order_;
  std::optional<std::string> generalist_;
  std::set<std::string> stalled_;
};

TermVector profile_vector(const AgentProfile& p);

/// Index of the highest-cosine candidate, first one on ties; nullopt when
/// every score is zero.
std::optional<std::size_t> argmax_cosine(const TermVector& query,
                                         const std::vector<TermVector>& candidates);

/// Selects the specialist whose description and tags best match the query.
/// Empty registry -> dispatch error; zero similarity -> generalist profile.
AgentProfile dispatch(const std::string& query, const ProfileRegistry& registry);
AgentProfile dispatch(const RoutingDecision& decision, const std::string& query,
                      const ProfileRegistry& registry);

// ---------------------------------------------------------------------------
// task graph

enum class StepState { pending, running, done, failed, skipped };
std::string_view to_string(StepState s);

/// Prefix marking a step handled by delegation to another agent profile.
inline constexpr std::string_view kAgentToolPrefix = "agent:";

struct PlanStep {
  std::string step_id;
  std::string tool;
  ArgMap args;
  StepState state = StepState::pending;
  std::optional<ToolResult> result;
  std::string failure;  // cause when failed / skipped
  Millis started_at = -1;
  Millis ended_at = -1;
};

void to_json(json& j, const PlanStep& s);

struct TaskGraph {
  std::string task_id;
  std::vector<PlanStep> steps;
  std::vector<std::pair<std::string, std::string>> edges;  // from -> to

  const PlanStep* find(const std::string& step_id) const;
  PlanStep* find(const std::string& step_id);
  std::vector<std::string> parents(const std::string& step_id) const;
  std::vector<std::string> children(const std::string& step_id) const;

  /// Throws plan-validation error: no steps, duplicate ids, dangling edges,
  /// cycles, or (when given) tools missing from the catalog / profile registry.
  void validate(const ToolRegistry* catalog = nullptr, const ProfileRegistry* profiles = nullptr) const;
  /// Kahn's algorithm, ties broken by plan order. Throws on cycles.
  std::vector<std::string> topological_order() const;

  /// Figure-style plan items (step numbers in plan order).
  std::vector<PlanItem> to_plan_items() const;
};

/// Step ids referenced by `$<step>.<field>` argument values.
std::vector<std::string> arg_references(const ArgMap& args);

/// Builds a graph from plan items; step N gets id "sN" and edges come from
/// `$sN.field` references between steps.
TaskGraph graph_from_plan_items(const std::string& task_id, const std::vector<PlanItem>& items);

// ---------------------------------------------------------------------------
// constraints

struct Candidate {
  std::string name;
  std::vector<std::string> tags;
  double score = 0;

  bool operator==(const Candidate&) const = default;
};

std::vector<Candidate> candidates_from_json(const json& arr);
json candidates_to_json(const std::vector<Candidate>& cs);

struct Constraint {
  enum class Kind { dislike, require } kind = Kind::dislike;
  std::string attribute;

  bool violated_by(const Candidate& c) const;
  std::string describe() const;
  bool operator==(const Constraint&) const = default;
};

/// Drops every candidate violating any constraint, preserving order.
std::vector<Candidate> apply_constraints(const std::vector<Candidate>& candidates,
                                         const std::vector<Constraint>& constraints);

/// Dislike/require predicates from profile entries and history statements
/// ("dislikes X", "Dislikes: X", "requires X", "is a vegetarian").
std::vector<Constraint> constraints_from_memory(const UserMemory& memory);

// ---------------------------------------------------------------------------
// planning

struct PlanRequest {
  std::string task_id;
  std::string utterance;
  AgentProfile profile;
  ArgMap context_args;  // delegation arguments, if any
  std::vector<std::string> extra_tools;  // tool intents detected by the router
};

class Planner {
 public:
  virtual ~Planner() = default;
  virtual TaskGraph plan(const PlanRequest& request) = 0;
};

/// Declarative per-profile plan templates with argument extraction rules.
class TemplatePlanner final : public Planner {
 public:
  TaskGraph plan(const PlanRequest& request) override;
};

/// Asks a text-completion backend for a plan array ({step, tool, args});
/// dependencies come from `$sN.field` references.
class ModelPlanner final : public Planner {
 public:
  explicit ModelPlanner(std::shared_ptr<TextCompletion> backend);
  TaskGraph plan(const PlanRequest& request) override;

 private:
  std::shared_ptr<TextCompletion> backend_;
};

/// Structural checks plus argument schemas (references checked as typed
/// placeholders). Throws plan-validation error.
void validate_plan(const TaskGraph& graph, const ToolRegistry& catalog, const ProfileRegistry& profiles);

/// Plans, then validates against the catalog. Throws plan-validation error.
TaskGraph plan(Planner& planner, const PlanRequest& request, const ToolRegistry& catalog,
               const ProfileRegistry& profiles);

/// Flat plan skeleton for a routing decision: the planned graph with
/// delegation steps expanded into the delegate's own leaf tools.
std::vector<PlanItem> plan_skeleton(Planner& planner, const PlanRequest& request,
                                    const ProfileRegistry& profiles, int max_depth = 2);

// ---------------------------------------------------------------------------
// execution

struct ExecutorConfig {
  Millis step_timeout_ms = 8000;
  int concurrency_cap = 4;
  std::size_t ambiguity_min_candidates = 5;  // clarification needs more than this many
  double ambiguity_margin = 0.05;            // and a top-2 gap below this
  int clarification_turn_limit = 2;
};

enum class TaskStatus { running, suspended, succeeded, partial_failure, failed, abandoned };
std::string_view to_string(TaskStatus s);

struct InvocationRecord {
  std::string tool;
  ArgMap args;
  bool operator==(const InvocationRecord&) const = default;
};

struct ExecutionTrace {
  std::string task_id;
  std::string profile_id;
  TaskStatus status = TaskStatus::running;
  std::vector<PlanStep> steps;
  std::vector<std::pair<std::string, std::string>> edges;
  std::vector<std::pair<std::string, std::string>> context;  // step -> summary, completion order
  std::vector<Constraint> constraints;
  std::vector<std::string> constraint_log;  // e.g. "dislike(raw fish) removed Sushi Omakase"
  std::vector<InvocationRecord> invocations;  // leaf tool calls, nested included
  Millis started_at = 0;
  Millis ended_at = 0;

  Millis makespan() const { return ended_at - started_at; }
  /// Longest path through the recorded step durations.
  Millis critical_path() const;
};

void to_json(json& j, const ExecutionTrace& t);

struct ClarificationRequest {
  std::string task_id;
  std::string step_id;
  std::string question;
  std::string reason;  // "ambiguous" | "no-candidates"
};

class TaskRun;

struct TaskHooks {
  std::function<void(const TaskRun&, const PlanStep&)> on_step_started;
  std::function<void(const TaskRun&, const PlanStep&)> on_step_terminal;
  std::function<void(const TaskRun&, const ClarificationRequest&)> on_clarification;
  std::function<void(const ExecutionTrace&)> on_finished;
};

class SlowTrack;

/// One executing task: releases ready steps up to the concurrency cap, writes
/// results back into the task context, isolates failures (descendants of a
/// failed step are skipped, siblings continue) and times out stalled steps.
class TaskRun : public std::enable_shared_from_this<TaskRun> {
 public:
  TaskRun(SlowTrack& track, TaskGraph graph, std::string profile_id,
          std::vector<Constraint> constraints, int depth, TaskHooks hooks);

  void start();
  /// Binds the user's answer into the suspended step's args and resumes it.
  void resume(const std::string& answer);
  /// Fails the suspended step and finishes the task as abandoned.
  void abandon();

  const ExecutionTrace& trace() const { return trace_; }
  const TaskGraph& graph() const { return graph_; }
  TaskStatus status() const { return trace_.status; }
  bool suspended() const { return trace_.status == TaskStatus::suspended; }
  const std::optional<ClarificationRequest>& clarification() const { return clarification_; }
  int depth() const { return depth_; }
  json plan_snapshot() const;

 private:
  void pump();
  void launch(PlanStep& step);
  void dispatch_step(const std::string& step_id);
  void on_outcome(const std::string& step_id, int attempt, ToolOutcome outcome);
  void complete(PlanStep& step, ToolResult result);
  void fail(PlanStep& step, std::string cause);
  void skip_descendants(const std::string& step_id);
  bool process_candidates(PlanStep& step, ToolResult& result);
  void suspend(PlanStep& step, ToolResult result, std::string reason, std::string question);
  void sync();
  void finish();
  std::optional<std::string> resolve_args(const PlanStep& step, ArgMap& out) const;

  SlowTrack& track_;
  TaskGraph graph_;
  ExecutionTrace trace_;
  int depth_;
  TaskHooks hooks_;
  int running_ = 0;
  bool finished_ = false;
  std::map<std::string, int> attempts_;
  std::map<std::string, TimerId> timers_;
  std::map<std::string, json> outputs_;  // step -> payload, for $ references
  std::map<std::string, ToolResult> parked_;  // suspended step's last result
  std::set<std::string> relaxed_;  // steps whose constraints the user waived
  std::optional<ClarificationRequest> clarification_;
  bool abandoned_ = false;
};

/// Renders a terminal trace as the user-facing deliverable.
struct Deliverable {
  std::string text;
  TaskStatus status = TaskStatus::succeeded;
  std::vector<std::string> completed;
  std::vector<std::string> failed;
  std::vector<std::string> skipped;
};

Deliverable generate(const ExecutionTrace& trace, const std::string& modality_hint = "text");

/// Owner of task execution: holds the tool registry, profiles, planner and
/// delegation machinery, and runs nested tasks for delegated contracts.
class SlowTrack final : public SubAgentRunner {
 public:
  SlowTrack(Scheduler& clock, ToolRegistry& tools, ProfileRegistry& profiles,
            std::shared_ptr<Planner> planner, ExecutorConfig config = {},
            DelegationLimits limits = {});

  std::shared_ptr<TaskRun> start(TaskGraph graph, const std::string& profile_id,
                                 std::vector<Constraint> constraints, TaskHooks hooks,
                                 int depth = 0);

  bool has_profile(const std::string& profile_id) const override;
  void run(const DelegationContract& contract, Scheduler& clock,
           std::function<void(SubAgentResult)> done) override;

  Scheduler& clock() { return clock_; }
  ToolRegistry& tools() { return tools_; }
  ProfileRegistry& profiles() { return profiles_; }
  Planner& planner() { return *planner_; }
  Delegator& delegator() { return delegator_; }
  const ExecutorConfig& config() const { return config_; }

 private:
  Scheduler& clock_;
  ToolRegistry& tools_;
  ProfileRegistry& profiles_;
  std::shared_ptr<Planner> planner_;
  ExecutorConfig config_;
  Delegator delegator_;
};

}  // namespace dualtrack
