#include "dualtrack/fast_track.hpp"

#include <algorithm>
#include <regex>

namespace dualtrack {

std::string_view to_string(ResponseKind k) {
  switch (k) {
    case ResponseKind::direct: return "direct";
    case ResponseKind::bridge: return "bridge";
    case ResponseKind::fallback_ack: return "fallback-ack";
  }
  return "direct";
}

namespace {

bool has_any(const std::vector<std::string>& toks, std::initializer_list<const char*> words) {
  for (const char* w : words)
    if (std::find(toks.begin(), toks.end(), w) != toks.end()) return true;
  return false;
}

bool is_greeting(const std::vector<std::string>& toks) {
  return has_any(toks, {"hello", "hi", "hey", "morning", "evening"}) && toks.size() <= 6;
}

std::string strip_punct(std::string s) {
  while (!s.empty() && std::string(".,;!? ").find(s.back()) != std::string::npos) s.pop_back();
  return s;
}

// First-person request rewritten as the assistant would repeat it back.
std::string task_phrase(const std::string& utterance) {
  // the request is usually the last clause ("Exhausted... Plan a trip")
  std::string s = strip_punct(text::trim(utterance));
  static const std::regex clause_break("(\\.\\.\\.|[.!?;])\\s+");
  std::sregex_token_iterator it(s.begin(), s.end(), clause_break, -1), end;
  std::string last;
  for (; it != end; ++it)
    if (!text::trim(it->str()).empty()) last = text::trim(it->str());
  if (!last.empty()) s = strip_punct(last);
  static const std::regex lead(
      "^(?:(?:please|hey|hi|ok|okay|so|well)[, ]+)*(?:(?:can|could|would|will) you (?:please )?|i want (?:you )?to "
      "|i need (?:you )?to |i'd like (?:you )?to |help me (?:to )?|please )?",
      std::regex::icase);
  s = std::regex_replace(s, lead, "", std::regex_constants::format_first_only);
  static const std::regex my("\\bmy\\b", std::regex::icase);
  static const std::regex me("\\bme\\b", std::regex::icase);
  static const std::regex i_am("\\bI'm\\b|\\bI am\\b");
  s = std::regex_replace(s, my, "your");
  s = std::regex_replace(s, me, "you");
  s = std::regex_replace(s, i_am, "you're");
  if (!s.empty()) s[0] = static_cast<char>(std::tolower(static_cast<unsigned char>(s[0])));
  return s;
}

std::string tool_phrase(const std::string& tool) {
  if (tool == "weather" || tool == "search") return "I will check the latest reports for you...";
  if (tool == "stock_quote") return "I will check the latest market data for you...";
  if (tool == "calendar") return "I will look at your calendar for you...";
  if (tool == "image_gen") return "I will start sketching that picture for you...";
  if (tool == "music_gen") return "I will start composing that for you...";
  return "I will look into that for you...";
}

}  // namespace

bool wants_empathy(const RequestObject& request) {
  auto toks = text::tokens(request.utterance);
  if (has_any(toks, {"exhausted", "tired", "stressed", "sad", "exhausting", "worn", "upset", "overwhelmed"}))
    return true;
  for (const auto& tag : request.visual_tags) {
    auto t = text::lower(tag);
    if (text::contains(t, "slumped") || text::contains(t, "tired") || text::contains(t, "frown")) return true;
  }
  return false;
}

std::string respond_direct_text(const RequestObject& request, const ContextBundle& context,
                                const Persona& persona) {
  auto toks = text::tokens(request.utterance);
  std::string name = persona.name.empty() ? "your assistant" : persona.name;
  std::string out;
  bool empathy = wants_empathy(request);
  if (empathy)
    out = "That sounds like a long day, you must be exhausted.";
  else if (is_greeting(toks))
    out = "Hi, " + name + " here! How can I help you today?";
  else
    out = "Sure, let's talk about " + strip_punct(text::trim(request.utterance)) + ".";

  std::optional<std::string> hobby;
  for (const auto& [k, v] : context.profile)
    if (text::lower(k) == "hobby" || text::lower(k) == "hobbies") hobby = v;
  if (hobby) {
    auto h = text::lower(*hobby);
    out += empathy ? " How about some " + h + " to unwind? You always seem happier after a game."
                   : " Have you had time for " + h + " lately?";
  } else if (!context.profile.empty()) {
    const auto& [k, v] = context.profile.front();
    out += " I remember your " + text::lower(k) + " is " + v + ".";
  }
  if (!persona.traits.empty() && !empathy && !is_greeting(toks))
    out += " (" + name + ", " + persona.traits.front() + ")";
  return out;
}

ResponderReply TemplateResponder::respond(const ResponderInput& in) {
  return {respond_direct_text(in.request, in.context, in.persona), latency_ms_};
}

ResponderReply ModelResponder::respond(const ResponderInput& in) {
  std::string prompt = "You are " + in.persona.name + ", " + in.persona.descriptor + ".\n";
  for (const auto& [k, v] : in.context.profile) prompt += "User " + k + ": " + v + "\n";
  for (const auto& e : in.context.entries) prompt += std::string(to_string(e.role)) + ": " + e.content + "\n";
  if (!in.request.visual_tags.empty())
    prompt += "Visual cues: " + text::join(in.request.visual_tags, ", ") + "\n";
  prompt += "user: " + in.request.utterance + "\nReply briefly, in character.";
  return {backend_->complete(prompt), latency_ms_};
}

ResponsePlan bridge(const RequestObject& request, const RoutingDecision& decision) {
  ResponsePlan p;
  p.kind = ResponseKind::bridge;
  if (decision.mode == Mode::tool && decision.plan && !decision.plan->empty()) {
    p.text = tool_phrase(decision.plan->front().tool);
  } else {
    p.text = std::string(wants_empathy(request) ? "That sounds exhausting, let me take this off your plate. " : "") +
             "I've received your request to " + task_phrase(request.utterance) +
             ". I'm working on it and will get back to you shortly.";
  }
  return p;
}

BudgetOutcome enforce_budget(Millis turn_start, Millis budget_ms, Millis backend_started_at,
                             std::optional<ResponderReply> reply, ResponseKind kind) {
  Millis deadline = turn_start + budget_ms;
  auto fallback = [&](Millis at) {
    return ResponsePlan{ResponseKind::fallback_ack, std::string(kFallbackAck), budget_ms, at};
  };
  BudgetOutcome out;
  if (!reply) {
    out.first = fallback(std::clamp(backend_started_at, turn_start, deadline));
    return out;
  }
  Millis ready = backend_started_at + std::max<Millis>(0, reply->latency_ms);
  if (ready <= deadline) {
    out.first = ResponsePlan{kind, reply->text, budget_ms, ready};
    return out;
  }
  out.first = fallback(deadline);
  out.follow_up = ResponsePlan{kind, reply->text, budget_ms, ready};
  return out;
}

}  // namespace dualtrack
