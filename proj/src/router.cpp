#include "dualtrack/router.hpp"

#include <algorithm>
#include <regex>
#include <set>

namespace dualtrack {

std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::chat: return "chat";
    case Mode::tool: return "tool";
    case Mode::agent: return "agent";
  }
  return "chat";
}

std::optional<Mode> parse_mode(std::string_view s) {
  if (s == "chat") return Mode::chat;
  if (s == "tool") return Mode::tool;
  if (s == "agent") return Mode::agent;
  return std::nullopt;
}

namespace {

nlohmann::ordered_json wire_object(const RoutingDecision& d) {
  nlohmann::ordered_json j;
  j["thought"] = d.thought;
  j["mode"] = to_string(d.mode);
  if (d.routing_target) j["routing_target"] = *d.routing_target;
  if (d.plan) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& item : *d.plan) {
      nlohmann::ordered_json it;
      it["step"] = item.step;
      it["tool"] = item.tool;
      it["args"] = nlohmann::ordered_json::object();
      for (const auto& [k, v] : item.args) it["args"][k] = v;
      arr.push_back(std::move(it));
    }
    j["plan"] = std::move(arr);
  }
  return j;
}

std::size_t key_offset(std::string_view raw, std::string_view key) {
  auto pos = raw.find("\"" + std::string(key) + "\"");
  return pos == std::string_view::npos ? 0 : pos;
}

std::string scalar_to_string(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

}  // namespace

json to_wire(const RoutingDecision& d) { return json::parse(wire_object(d).dump()); }

std::string serialize_decision(const RoutingDecision& d) { return wire_object(d).dump(); }

RoutingDecision validate_decision(std::string_view raw) {
  json j;
  try {
    j = json::parse(raw.begin(), raw.end());
  } catch (const json::parse_error& e) {
    throw SchemaViolation(std::string("malformed decision payload: ") + e.what(), e.byte);
  }
  if (!j.is_object()) throw SchemaViolation("decision must be a JSON object", 0);

  static const std::set<std::string> kAllowed{"thought", "mode", "routing_target", "plan"};
  for (const auto& [k, _] : j.items())
    if (!kAllowed.count(k)) throw SchemaViolation("unknown field '" + k + "'", key_offset(raw, k));

  RoutingDecision d;
  if (!j.contains("mode") || !j["mode"].is_string())
    throw SchemaViolation("missing or non-string 'mode'", key_offset(raw, "mode"));
  auto mode = parse_mode(j["mode"].get<std::string>());
  if (!mode)
    throw SchemaViolation("mode must be one of chat|tool|agent, got '" +
                              j["mode"].get<std::string>() + "'",
                          key_offset(raw, "mode"));
  d.mode = *mode;

  if (j.contains("thought")) {
    if (!j["thought"].is_string())
      throw SchemaViolation("'thought' must be a string", key_offset(raw, "thought"));
    d.thought = j["thought"].get<std::string>();
  }

  if (j.contains("routing_target") && !j["routing_target"].is_null()) {
    if (!j["routing_target"].is_string() || j["routing_target"].get<std::string>().empty())
      throw SchemaViolation("'routing_target' must be a non-empty string",
                            key_offset(raw, "routing_target"));
    d.routing_target = j["routing_target"].get<std::string>();
  }
  if (d.mode == Mode::agent && !d.routing_target)
    throw SchemaViolation("mode=agent requires 'routing_target'", key_offset(raw, "mode"));
  if (d.mode != Mode::agent && d.routing_target)
    throw SchemaViolation("'routing_target' is only valid for mode=agent",
                          key_offset(raw, "routing_target"));

  if (j.contains("plan") && !j["plan"].is_null()) {
    auto off = key_offset(raw, "plan");
    if (d.mode == Mode::chat) throw SchemaViolation("mode=chat must not carry a plan", off);
    if (!j["plan"].is_array()) throw SchemaViolation("'plan' must be an array", off);
    std::vector<PlanItem> plan;
    int expected = 1;
    for (const auto& item : j["plan"]) {
      if (!item.is_object()) throw SchemaViolation("plan items must be objects", off);
      for (const auto& [k, _] : item.items())
        if (k != "step" && k != "tool" && k != "args")
          throw SchemaViolation("unknown plan item field '" + k + "'", key_offset(raw, k));
      if (!item.contains("step") || !item["step"].is_number_integer())
        throw SchemaViolation("plan item needs integer 'step'", key_offset(raw, "step"));
      if (!item.contains("tool") || !item["tool"].is_string() ||
          item["tool"].get<std::string>().empty())
        throw SchemaViolation("plan item needs non-empty 'tool'", key_offset(raw, "tool"));
      PlanItem p;
      p.step = item["step"].get<int>();
      if (p.step != expected)
        throw SchemaViolation("plan steps must start at 1 and be contiguous",
                              key_offset(raw, "step"));
      ++expected;
      p.tool = item["tool"].get<std::string>();
      if (item.contains("args")) {
        if (!item["args"].is_object())
          throw SchemaViolation("'args' must be an object", key_offset(raw, "args"));
        for (const auto& [k, v] : item["args"].items()) {
          if (v.is_structured())
            throw SchemaViolation("argument '" + k + "' must be a scalar", key_offset(raw, k));
          p.args[k] = scalar_to_string(v);
        }
      }
      plan.push_back(std::move(p));
    }
    d.plan = std::move(plan);
  }
  d.confidence = 1.0;
  return d;
}

// ---------------------------------------------------------------------------
// argument extraction

namespace {

std::optional<std::string> capitalized_after(const std::string& utterance, const char* preps) {
  std::regex re(std::string("\\b(?:") + preps + ")\\s+([A-Z][a-zA-Z]+(?:\\s+[A-Z][a-zA-Z]+)*)");
  std::smatch m;
  if (std::regex_search(utterance, m, re)) return m[1].str();
  return std::nullopt;
}

std::string tail_after(const std::string& utterance, const std::vector<std::string>& markers) {
  auto norm = text::normalize(utterance);
  for (const auto& marker : markers) {
    auto pos = norm.find(marker);
    if (pos != std::string::npos) {
      auto rest = text::trim(norm.substr(pos + marker.size()));
      while (!rest.empty() && (rest.back() == '?' || rest.back() == '.' || rest.back() == '!'))
        rest.pop_back();
      if (!rest.empty()) return rest;
    }
  }
  auto whole = norm;
  while (!whole.empty() && (whole.back() == '?' || whole.back() == '.' || whole.back() == '!'))
    whole.pop_back();
  return whole;
}

}  // namespace

std::optional<std::string> extract_destination(const std::string& utterance) {
  return capitalized_after(utterance, "to|visit|visiting");
}

ArgMap extract_tool_args(const std::string& tool, const std::string& utterance) {
  ArgMap args;
  if (tool == "weather") {
    auto city = capitalized_after(utterance, "in|for|at");
    if (!city) city = extract_destination(utterance);
    args["city"] = city.value_or("local");
  } else if (tool == "stock_quote") {
    std::regex sym("\\b([A-Z]{2,5})\\b");
    std::smatch m;
    args["symbol"] = std::regex_search(utterance, m, sym) ? m[1].str() : "INDEX";
  } else if (tool == "calendar") {
    static const char* kDays[] = {"today",    "tomorrow", "monday", "tuesday", "wednesday",
                                  "thursday", "friday",   "saturday", "sunday", "weekend"};
    args["date"] = "today";
    auto toks = text::tokens(utterance);
    for (const char* d : kDays)
      if (std::find(toks.begin(), toks.end(), d) != toks.end()) {
        args["date"] = d;
        break;
      }
  } else if (tool == "search") {
    args["query"] = tail_after(utterance, {"search for ", "look up ", "news about ", "news on "});
  } else if (tool == "image_gen" || tool == "music_gen") {
    args["prompt"] = tail_after(utterance, {"picture of ", "image of ", "song about ", "music about ",
                                            "draw ", "compose "});
  } else if (tool == "flight_search") {
    args["dest"] = extract_destination(utterance).value_or("anywhere");
  } else if (tool == "activity_search" || tool == "dining_search") {
    auto dest = extract_destination(utterance);
    if (!dest) dest = capitalized_after(utterance, "in|at|near");
    args["dest"] = dest.value_or("anywhere");
  } else if (tool == "hotel_book") {
    auto low = text::lower(utterance);
    if (text::contains(low, "onsen")) args["type"] = "Onsen";
    else if (text::contains(low, "ryokan")) args["type"] = "Ryokan";
    else if (text::contains(low, "hostel")) args["type"] = "Hostel";
    else args["type"] = "Standard";
  }
  return args;
}

// ---------------------------------------------------------------------------
// classifiers

KeywordTables KeywordTables::defaults() {
  KeywordTables t;
  t.tool_intents = {
      {"weather", "weather"},         {"forecast", "weather"},      {"temperature", "weather"},
      {"rain", "weather"},            {"umbrella", "weather"},      {"stock", "stock_quote"},
      {"stocks", "stock_quote"},      {"share price", "stock_quote"}, {"nasdaq", "stock_quote"},
      {"calendar", "calendar"},       {"meeting", "calendar"},      {"meetings", "calendar"},
      {"appointment", "calendar"},    {"appointments", "calendar"}, {"news", "search"},
      {"headlines", "search"},        {"search for", "search"},     {"look up", "search"},
      {"draw", "image_gen"},          {"picture of", "image_gen"},  {"image of", "image_gen"},
      {"song", "music_gen"},          {"melody", "music_gen"},      {"compose", "music_gen"},
  };
  t.domain_requests = {"plan",    "planning", "itinerary", "trip",      "travel",   "vacation",
                       "consult", "consultation", "advice", "advise",   "legal",    "lawyer",
                       "contract", "lease",   "medical",   "symptom",   "symptoms", "doctor",
                       "diagnosis", "headache", "fever",   "analyze",   "analysis", "video",
                       "clip",    "recording", "restaurant", "dinner"};
  return t;
}

namespace {

bool matches(const std::vector<std::string>& toks, const std::string& joined,
             const std::string& keyword) {
  if (keyword.find(' ') != std::string::npos)
    return (" " + joined + " ").find(" " + keyword + " ") != std::string::npos;
  return std::find(toks.begin(), toks.end(), keyword) != toks.end();
}

}  // namespace

ReferenceClassifier::ReferenceClassifier(TargetSelector select_target, KeywordTables tables)
    : select_target_(std::move(select_target)), tables_(std::move(tables)) {}

std::vector<std::string> ReferenceClassifier::tool_hits(const std::string& utterance) const {
  auto toks = text::tokens(utterance);
  auto joined = text::join(toks, " ");
  std::vector<std::string> out;
  for (const auto& [kw, tool] : tables_.tool_intents)
    if (matches(toks, joined, kw) && std::find(out.begin(), out.end(), tool) == out.end())
      out.push_back(tool);
  return out;
}

std::vector<std::string> ReferenceClassifier::domain_hits(const std::string& utterance) const {
  auto toks = text::tokens(utterance);
  auto joined = text::join(toks, " ");
  std::vector<std::string> out;
  for (const auto& kw : tables_.domain_requests)
    if (matches(toks, joined, kw)) out.push_back(kw);
  return out;
}

RoutingDecision ReferenceClassifier::classify(const RequestObject& request, const ContextBundle&) {
  RoutingDecision d;
  const auto& u = request.utterance;
  auto tools = tool_hits(u);
  auto domains = domain_hits(u);

  if (!domains.empty() || tools.size() > 1) {
    d.mode = Mode::agent;
    d.routing_target = select_target_ ? select_target_(u) : std::string("Generalist");
    d.thought = domains.empty() ? "multiple tool intents -> Tier-3"
                                : "domain request (" + domains.front() + ") -> Tier-3";
    d.confidence = 1.0;
  } else if (tools.size() == 1) {
    d.mode = Mode::tool;
    d.thought = "tool intent (" + tools.front() + ") -> Tier-2";
    d.plan = std::vector<PlanItem>{{1, tools.front(), extract_tool_args(tools.front(), u)}};
    d.confidence = 1.0;
  } else {
    d.mode = Mode::chat;
    d.thought = "chit-chat or memory question -> Tier-1";
    d.confidence = 0.5;
  }
  return d;
}

ModelClassifier::ModelClassifier(std::shared_ptr<TextCompletion> backend)
    : backend_(std::move(backend)) {}

std::string ModelClassifier::build_prompt(const RequestObject& request,
                                          const ContextBundle& context) {
  std::string p;
  p += "You route user queries for a digital human assistant.\n";
  p += "Pick exactly one mode:\n";
  p += "  chat  - small talk, greetings, questions answerable from memory\n";
  p += "  tool  - one direct lookup (weather, stock quote, calendar, search)\n";
  p += "  agent - multi-step or expert work; name the agent in routing_target\n";
  p += "For tool/agent, list executable steps in plan as {step, tool, args}.\n";
  p += "Answer with a single JSON object with keys thought, mode, routing_target, plan.\n\n";
  p += "Profile:\n";
  for (const auto& [k, v] : context.profile) p += "  " + k + ": " + v + "\n";
  p += "Recent turns:\n";
  for (const auto& e : context.entries)
    p += "  [" + std::string(to_string(e.role)) + "] " + e.content + "\n";
  if (!request.visual_tags.empty()) p += "Visual tags: " + text::join(request.visual_tags, ", ") + "\n";
  p += "Query: " + request.utterance + "\n";
  return p;
}

RoutingDecision ModelClassifier::classify(const RequestObject& request,
                                          const ContextBundle& context) {
  return validate_decision(backend_->complete(build_prompt(request, context)));
}

ConversationRouter::ConversationRouter(std::shared_ptr<Classifier> classifier)
    : classifier_(std::move(classifier)) {}

RoutingDecision ConversationRouter::classify(const RequestObject& request,
                                             const ContextBundle& context) const {
  try {
    return classifier_->classify(request, context);
  } catch (const std::exception& e) {
    RoutingDecision d;
    d.mode = Mode::chat;
    d.confidence = 0.0;
    d.thought = std::string("classifier fallback: ") + e.what();
    return d;
  }
}

}  // namespace dualtrack
