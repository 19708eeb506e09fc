#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "dualtrack/backend.hpp"
#include "dualtrack/common.hpp"
#include "dualtrack/perception.hpp"
#include "dualtrack/shared_state.hpp"

namespace dualtrack {

using json = nlohmann::json;

enum class Mode { chat, tool, agent };
std::string_view to_string(Mode m);
std::optional<Mode> parse_mode(std::string_view s);
inline int tier_of(Mode m) { return static_cast<int>(m) + 1; }

struct PlanItem {
  int step = 1;
  std::string tool;
  ArgMap args;

  bool operator==(const PlanItem&) const = default;
};

/// Routing contract emitted per turn. Wire fields: thought, mode,
/// routing_target, plan. `confidence` is internal only.
struct RoutingDecision {
  std::string thought;
  Mode mode = Mode::chat;
  std::optional<std::string> routing_target;
  std::optional<std::vector<PlanItem>> plan;
  double confidence = 1.0;

  int tier() const { return tier_of(mode); }
  /// Equality over the wire fields.
  bool same_wire(const RoutingDecision& o) const {
    return thought == o.thought && mode == o.mode && routing_target == o.routing_target &&
           plan == o.plan;
  }
};

json to_wire(const RoutingDecision& d);
std::string serialize_decision(const RoutingDecision& d);

/// Parses a backend's raw output against the decision schema. Throws
/// SchemaViolation (with byte offset) on malformed JSON, unknown fields, bad
/// enum values, or broken mode/target/plan invariants.
RoutingDecision validate_decision(std::string_view raw_text);

/// Argument extraction rules shared by the router and the reference planner.
ArgMap extract_tool_args(const std::string& tool, const std::string& utterance);
std::optional<std::string> extract_destination(const std::string& utterance);

struct KeywordTables {
  /// (keyword or phrase, tool id); phrases match as normalized substrings.
  std::vector<std::pair<std::string, std::string>> tool_intents;
  std::vector<std::string> domain_requests;

  static KeywordTables defaults();
};

class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual RoutingDecision classify(const RequestObject& request, const ContextBundle& context) = 0;
};

/// Ordered rule cascade: domain keywords or more than one tool intent route
/// to agent, a single tool intent routes to tool, anything else is chat.
class ReferenceClassifier final : public Classifier {
 public:
  using TargetSelector = std::function<std::string(const std::string& utterance)>;

  explicit ReferenceClassifier(TargetSelector select_target,
                               KeywordTables tables = KeywordTables::defaults());

  RoutingDecision classify(const RequestObject& request, const ContextBundle& context) override;

  /// Distinct tool ids whose intents appear in the utterance, in table order.
  std::vector<std::string> tool_hits(const std::string& utterance) const;
  std::vector<std::string> domain_hits(const std::string& utterance) const;

 private:
  TargetSelector select_target_;
  KeywordTables tables_;
};

/// Classifier that asks a text-completion backend for a decision object.
class ModelClassifier final : public Classifier {
 public:
  explicit ModelClassifier(std::shared_ptr<TextCompletion> backend);
  RoutingDecision classify(const RequestObject& request, const ContextBundle& context) override;

  static std::string build_prompt(const RequestObject& request, const ContextBundle& context);

 private:
  std::shared_ptr<TextCompletion> backend_;
};

/// Total classification: any classifier failure degrades to chat with confidence 0.
class ConversationRouter {
 public:
  explicit ConversationRouter(std::shared_ptr<Classifier> classifier);
  RoutingDecision classify(const RequestObject& request, const ContextBundle& context) const;

 private:
  std::shared_ptr<Classifier> classifier_;
};

}  // namespace dualtrack
