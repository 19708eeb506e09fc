#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>

#include "dualtrack/backend.hpp"
#include "dualtrack/common.hpp"
#include "dualtrack/perception.hpp"
#include "dualtrack/router.hpp"
#include "dualtrack/shared_state.hpp"

namespace dualtrack {

enum class ResponseKind { direct, bridge, fallback_ack };
std::string_view to_string(ResponseKind k);

struct ResponsePlan {
  ResponseKind kind = ResponseKind::direct;
  std::string text;
  Millis deadline_ms = 500;
  Millis produced_at = 0;
};

struct ResponderInput {
  const RequestObject& request;
  const ContextBundle& context;
  const Persona& persona;
};

struct ResponderReply {
  std::string text;
  Millis latency_ms = 0;
};

/// Text-in/text-out responder with a latency contract. May throw.
class Responder {
 public:
  virtual ~Responder() = default;
  virtual ResponderReply respond(const ResponderInput& in) = 0;
};

/// Reference responder: persona greeting, empathy cues from the utterance and
/// visual tags, and at least one profile fact when the profile has any.
class TemplateResponder final : public Responder {
 public:
  explicit TemplateResponder(Millis latency_ms = 10) : latency_ms_(latency_ms) {}
  ResponderReply respond(const ResponderInput& in) override;

 private:
  Millis latency_ms_;
};

/// Test and fault-injection responder driven by a function.
class ScriptedResponder final : public Responder {
 public:
  using Fn = std::function<ResponderReply(const ResponderInput&)>;
  explicit ScriptedResponder(Fn fn) : fn_(std::move(fn)) {}
  ResponderReply respond(const ResponderInput& in) override { return fn_(in); }

 private:
  Fn fn_;
};

/// Wraps a text-completion backend; the latency is the configured contract.
class ModelResponder final : public Responder {
 public:
  ModelResponder(std::shared_ptr<TextCompletion> backend, Millis latency_ms)
      : backend_(std::move(backend)), latency_ms_(latency_ms) {}
  ResponderReply respond(const ResponderInput& in) override;

 private:
  std::shared_ptr<TextCompletion> backend_;
  Millis latency_ms_;
};

bool wants_empathy(const RequestObject& request);
std::string respond_direct_text(const RequestObject& request, const ContextBundle& context,
                                const Persona& persona);

/// Acknowledgement naming the task; never waits on slow-track work.
ResponsePlan bridge(const RequestObject& request, const RoutingDecision& decision);

struct BudgetOutcome {
  ResponsePlan first;
  std::optional<ResponsePlan> follow_up;  // late direct reply after a fallback-ack
};

inline constexpr std::string_view kFallbackAck = "One moment, let me think about that...";

/// Deadline race between a backend result ready at `ready_at` (nullopt when
/// the backend errored) and the timer at turn_start + budget.
BudgetOutcome enforce_budget(Millis turn_start, Millis budget_ms, Millis backend_started_at,
                             std::optional<ResponderReply> reply, ResponseKind kind);

}  // namespace dualtrack
