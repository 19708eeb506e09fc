#include "dualtrack/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <map>

namespace dualtrack {

namespace {

[[noreturn]] void bad(const std::string& key, const std::string& value, const std::string& why) {
  throw Error(ErrorKind::configuration, key + " = '" + value + "': " + why);
}

std::int64_t to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    auto n = std::stoll(v, &used);
    if (used != v.size()) bad(key, v, "not an integer");
    return n;
  } catch (const std::logic_error&) {
    bad(key, v, "not an integer");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    auto d = std::stod(v, &used);
    if (used != v.size()) bad(key, v, "not a number");
    return d;
  } catch (const std::logic_error&) {
    bad(key, v, "not a number");
  }
}

std::string one_of(const std::string& key, const std::string& v, std::initializer_list<const char*> options) {
  for (const char* o : options)
    if (v == o) return v;
  std::string list;
  for (const char* o : options) list += std::string(list.empty() ? "" : "|") + o;
  bad(key, v, "expected " + list);
}

// fixed:MS | lognormal:MU:SIGMA | pareto:SCALE:SHAPE
LatencyModel parse_latency(const std::string& key, const std::string& v) {
  std::string spaced = v;
  std::replace(spaced.begin(), spaced.end(), ':', ' ');
  auto parts = text::split_words(spaced);
  if (parts.empty()) bad(key, v, "empty latency model");
  if (parts[0] == "fixed" && parts.size() == 2) return LatencyModel::fixed(to_int(key, parts[1]));
  if (parts[0] == "lognormal" && parts.size() == 3)
    return LatencyModel::lognormal(to_double(key, parts[1]), to_double(key, parts[2]));
  if (parts[0] == "pareto" && parts.size() == 3)
    return LatencyModel::pareto(to_double(key, parts[1]), to_double(key, parts[2]));
  bad(key, v, "expected fixed:MS, lognormal:MU:SIGMA or pareto:SCALE:SHAPE");
}

struct Key {
  const char* help;
  std::function<void(Settings&, const std::string&, const std::string&)> apply;
};

const std::map<std::string, Key>& keys() {
  using S = Settings;
  using V = const std::string&;
  static const std::map<std::string, Key> k{
      {"seed", {"RNG seed for tools and sampling", [](S& s, V key, V v) {
         s.engine.seed = static_cast<std::uint64_t>(to_int(key, v));
       }}},
      {"perception", {"decoupled | monolithic", [](S& s, V key, V v) {
         s.engine.perception.paradigm = parse_paradigm(one_of(key, v, {"decoupled", "monolithic"}));
       }}},
      {"perception.decoupled_ms", {"per-turn perception charge, decoupled", [](S& s, V key, V v) {
         s.engine.perception.decoupled_ms = to_int(key, v);
       }}},
      {"perception.monolithic_ms", {"per-turn perception charge, monolithic", [](S& s, V key, V v) {
         s.engine.perception.monolithic_ms = to_int(key, v);
       }}},
      {"ttft_budget_ms", {"first-response budget from turn arrival", [](S& s, V key, V v) {
         s.engine.ttft_budget_ms = to_int(key, v);
       }}},
      {"router_latency_ms", {"classifier charge", [](S& s, V key, V v) { s.engine.router_latency_ms = to_int(key, v); }}},
      {"bridge_latency_ms", {"bridge template charge", [](S& s, V key, V v) {
         s.engine.bridge_latency_ms = to_int(key, v);
       }}},
      {"responder_latency_ms", {"direct responder charge", [](S& s, V key, V v) {
         s.engine.responder_latency_ms = to_int(key, v);
       }}},
      {"planner_latency_ms", {"planner charge", [](S& s, V key, V v) { s.engine.planner_latency_ms = to_int(key, v); }}},
      {"generator_latency_ms", {"deliverable generation charge", [](S& s, V key, V v) {
         s.engine.generator_latency_ms = to_int(key, v);
       }}},
      {"context_budget_tokens", {"token budget for the context window", [](S& s, V key, V v) {
         s.engine.context_budget_tokens = to_int(key, v);
       }}},
      {"step_timeout_ms", {"per-step timeout", [](S& s, V key, V v) { s.engine.executor.step_timeout_ms = to_int(key, v); }}},
      {"concurrency_cap", {"max concurrently running steps per task", [](S& s, V key, V v) {
         s.engine.executor.concurrency_cap = static_cast<int>(to_int(key, v));
       }}},
      {"ambiguity_min_candidates", {"clarify only above this many candidates", [](S& s, V key, V v) {
         s.engine.executor.ambiguity_min_candidates = static_cast<std::size_t>(to_int(key, v));
       }}},
      {"ambiguity_margin", {"clarify when the top-2 score gap is below this", [](S& s, V key, V v) {
         s.engine.executor.ambiguity_margin = to_double(key, v);
       }}},
      {"clarification_turn_limit", {"unanswered turns before a clarification is abandoned", [](S& s, V key, V v) {
         s.engine.executor.clarification_turn_limit = static_cast<int>(to_int(key, v));
       }}},
      {"delegation_max_depth", {"nesting cap for sub-agent delegation", [](S& s, V key, V v) {
         s.engine.delegation.max_depth = static_cast<int>(to_int(key, v));
       }}},
      {"log_dir", {"session log directory (empty: in memory)", [](S& s, V, V v) {
         if (v.empty()) s.engine.log_dir.reset();
         else s.engine.log_dir = v;
       }}},
      {"classifier", {"reference | model", [](S& s, V key, V v) { s.classifier = one_of(key, v, {"reference", "model"}); }}},
      {"responder", {"template | model", [](S& s, V key, V v) { s.responder = one_of(key, v, {"template", "model"}); }}},
      {"planner", {"template | model", [](S& s, V key, V v) { s.planner = one_of(key, v, {"template", "model"}); }}},
      {"perceptor", {"stub | http", [](S& s, V key, V v) { s.perceptor = one_of(key, v, {"stub", "http"}); }}},
      {"model_url", {"base URL of the chat-completion endpoint", [](S& s, V, V v) { s.model_url = v; }}},
      {"model_name", {"model name sent to the endpoint", [](S& s, V, V v) { s.model_name = v; }}},
      {"perceptor_url", {"base URL of the captioning service", [](S& s, V, V v) { s.perceptor_url = v; }}},
      {"corpus", {"benchmark corpus path", [](S& s, V, V v) { s.corpus = v; }}},
      {"turn_gap_ms", {"idle virtual time between scripted turns", [](S& s, V key, V v) { s.turn_gap_ms = to_int(key, v); }}},
      {"sample_rate", {"gold-candidate sampling rate", [](S& s, V key, V v) { s.sample_rate = to_double(key, v); }}},
      {"sentiment_threshold", {"minimum sentiment for silver episodes", [](S& s, V key, V v) {
         s.sentiment_threshold = to_double(key, v);
       }}},
      {"flywheel_version", {"stage number for flywheel outputs", [](S& s, V key, V v) {
         s.flywheel_version = static_cast<int>(to_int(key, v));
       }}},
      {"host", {"service bind address", [](S& s, V, V v) { s.host = v; }}},
      {"time_scale", {"virtual ms per wall ms in the live service", [](S& s, V key, V v) {
         s.time_scale = to_double(key, v);
         if (s.time_scale <= 0) bad(key, v, "must be positive");
       }}},
      {"port", {"service port", [](S& s, V key, V v) { s.port = static_cast<int>(to_int(key, v)); }}},
  };
  return k;
}

}  // namespace

void set_setting(Settings& s, const std::string& key, const std::string& value) {
  const std::string prefix = "tool.", suffix = ".latency";
  if (key.size() > prefix.size() + suffix.size() && key.rfind(prefix, 0) == 0 &&
      key.compare(key.size() - suffix.size(), suffix.size(), suffix) == 0) {
    auto id = key.substr(prefix.size(), key.size() - prefix.size() - suffix.size());
    s.engine.tool_latency[id] = parse_latency(key, value);
    return;
  }
  auto it = keys().find(key);
  if (it == keys().end()) throw Error(ErrorKind::configuration, "unknown config key: " + key);
  it->second.apply(s, key, value);
}

Settings parse_settings(std::istream& in, Settings base) {
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    auto t = text::trim(line);
    if (t.empty()) continue;
    auto eq = t.find('=');
    if (eq == std::string::npos)
      throw Error(ErrorKind::configuration, "config line " + std::to_string(lineno) + ": expected key = value");
    try {
      set_setting(base, text::trim(t.substr(0, eq)), text::trim(t.substr(eq + 1)));
    } catch (const Error& e) {
      throw Error(ErrorKind::configuration, "config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

Settings load_settings(const std::filesystem::path& path, Settings base) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::configuration, "cannot read config file: " + path.string());
  return parse_settings(in, std::move(base));
}

std::vector<std::pair<std::string, std::string>> setting_keys() {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [k, v] : keys()) out.emplace_back(k, v.help);
  out.emplace_back("tool.<id>.latency", "fixed:MS | lognormal:MU:SIGMA | pareto:SCALE:SHAPE");
  return out;
}

EngineParts make_parts(const Settings& s) {
  EngineParts parts;
  std::shared_ptr<TextCompletion> model;
  auto need_model = [&] {
    if (s.model_url.empty()) throw Error(ErrorKind::configuration, "model backend selected but model_url is empty");
    if (!model) model = std::make_shared<HttpCompletion>(s.model_url, s.model_name);
    return model;
  };
  if (s.classifier == "model") parts.classifier = std::make_shared<ModelClassifier>(need_model());
  if (s.responder == "model")
    parts.responder = std::make_shared<ModelResponder>(need_model(), s.engine.responder_latency_ms);
  if (s.planner == "model") parts.planner = std::make_shared<ModelPlanner>(need_model());
  if (s.perceptor == "http") {
    if (s.perceptor_url.empty()) throw Error(ErrorKind::configuration, "perceptor = http needs perceptor_url");
    parts.perceptor = std::make_shared<HttpPerceptor>(s.perceptor_url);
  }
  return parts;
}

}  // namespace dualtrack
