#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dualtrack/augmentation.hpp"
#include "dualtrack/clock.hpp"
#include "dualtrack/fast_track.hpp"
#include "dualtrack/perception.hpp"
#include "dualtrack/router.hpp"
#include "dualtrack/shared_state.hpp"
#include "dualtrack/slow_track.hpp"
#include "dualtrack/sync_bus.hpp"

namespace dualtrack {

struct EngineConfig {
  PerceptionConfig perception;
  Millis ttft_budget_ms = 500;
  Millis router_latency_ms = 5;
  Millis bridge_latency_ms = 5;
  Millis responder_latency_ms = 10;
  Millis planner_latency_ms = 20;
  Millis generator_latency_ms = 30;
  std::int64_t context_budget_tokens = 1024;
  ExecutorConfig executor;
  DelegationLimits delegation;
  IntegrationOptions integration;
  std::uint64_t seed = 42;
  std::optional<std::string> log_dir;
  std::map<std::string, LatencyModel> tool_latency;  // overrides of the built-in latency models
};

/// Pluggable backends; null members get the reference implementation.
struct EngineParts {
  std::shared_ptr<Classifier> classifier;
  std::shared_ptr<Responder> responder;
  std::shared_ptr<Planner> planner;
  std::shared_ptr<Perceptor> perceptor;
};

struct TurnInput {
  std::vector<ModalityPayload> payloads;
  /// Explicitly answers the pending clarification of this task.
  std::optional<std::string> answers_task;
};

inline TurnInput text_turn(std::string text) {
  TurnInput t;
  ModalityPayload p;
  p.modality = Modality::text;
  p.text = std::move(text);
  t.payloads.push_back(std::move(p));
  return t;
}

struct TurnRecord {
  std::string session_id;
  int index = 0;
  Millis started_at = 0;
  RequestObject request;
  RoutingDecision decision;
  std::optional<std::string> profile_id;
  std::optional<std::string> task_id;
  bool clarification_answer = false;
  std::optional<Millis> first_response_at;
  ResponseKind first_kind = ResponseKind::direct;
  std::optional<Millis> completed_at;
  std::string status = "running";  // chat | success | partial-failure | failure | abandoned | answered
  std::optional<ExecutionTrace> trace;

  std::optional<Millis> ttft() const {
    if (!first_response_at) return std::nullopt;
    return *first_response_at - started_at;
  }
  std::optional<Millis> e2e() const {
    if (!completed_at) return std::nullopt;
    return *completed_at - started_at;
  }
};

void to_json(json& j, const TurnRecord& r);

/// The dual-track orchestrator. Each submitted turn is perceived and routed;
/// the fast track answers within the budget while tool and agent work runs on
/// the slow track and comes back through the event bus. Single-threaded:
/// callers drive the virtual clock with run()/run_until().
class Engine {
 public:
  using EventSink = std::function<void(const StateUpdateEvent&)>;

  explicit Engine(EngineConfig config = {}, EngineParts parts = {});
  ~Engine();
  Engine(const Engine&) = delete;
  Engine& operator=(const Engine&) = delete;

  std::string create_session(const std::string& user_id, const std::string& persona_id = "default");
  /// Schedules the turn at the current virtual time; returns its index in turns().
  /// Throws invalid_turn for an empty turn and not_found for unknown sessions.
  std::size_t submit_turn(const std::string& session_id, TurnInput input);

  std::size_t run() { return clock_.run(); }
  std::size_t run_until(Millis t) { return clock_.run_until(t); }
  Millis now() const { return clock_.now(); }

  /// Events leave the engine through this sink (default: the bus). The fault
  /// harness swaps it to duplicate and reorder deliveries.
  void set_event_sink(EventSink sink) { sink_ = std::move(sink); }
  void emit_to_bus(const StateUpdateEvent& e);

  const std::vector<TurnRecord>& turns() const { return turns_; }
  std::vector<TurnRecord> turns(const std::string& session_id) const;
  std::optional<std::string> pending_clarification(const std::string& session_id) const;
  std::shared_ptr<TaskRun> task(const std::string& task_id) const;

  Scheduler& clock() { return clock_; }
  SessionStore& store() { return *store_; }
  EventBus& bus() { return *bus_; }
  Integrator& integrator() { return *integrator_; }
  ToolRegistry& tools() { return tools_; }
  ProfileRegistry& profiles() { return profiles_; }
  SlowTrack& slow_track() { return *slow_; }
  const EngineConfig& config() const { return config_; }
  const PerceptionGateway& perception() const { return perception_; }

 private:
  struct Pending {
    std::string task_id;
    int unanswered_turns = 0;
  };

  void start_task(std::size_t turn, Millis at);
  void emit(const std::string& session_id, const std::string& task_id, EventKind kind, json payload);
  void append_assistant(std::size_t turn, const ResponsePlan& plan, EntryKind kind, bool first);

  EngineConfig config_;
  Scheduler clock_;
  ToolRegistry tools_;
  ProfileRegistry profiles_;
  std::unique_ptr<SessionStore> store_;
  std::unique_ptr<EventBus> bus_;
  std::unique_ptr<Integrator> integrator_;
  std::unique_ptr<SlowTrack> slow_;
  PerceptionGateway perception_;
  std::shared_ptr<ConversationRouter> router_;
  std::shared_ptr<Responder> responder_;
  EventSink sink_;

  std::vector<TurnRecord> turns_;
  std::map<std::string, std::size_t> task_turn_;
  std::map<std::string, std::shared_ptr<TaskRun>> tasks_;
  std::map<std::string, std::int64_t> causal_;
  std::map<std::string, Pending> clarifications_;  // session -> suspended task
  std::map<std::string, int> turn_counter_;
  std::map<std::string, std::uint64_t> subscriptions_;
};

/// Persona installed by every engine under the id "default".
AgentMemory default_persona();

}  // namespace dualtrack
