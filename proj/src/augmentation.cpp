#include "dualtrack/augmentation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <mutex>

#include "dualtrack/similarity.hpp"

namespace dualtrack {

Millis LatencyModel::sample(std::mt19937_64& rng) const {
  double ms = 0;
  switch (kind) {
    case LatencyKind::fixed:
      ms = a;
      break;
    case LatencyKind::lognormal:
      ms = std::lognormal_distribution<double>(a, b)(rng);
      break;
    case LatencyKind::pareto: {
      double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
      if (u <= 0) u = 1e-12;
      ms = a * std::pow(u, -1.0 / b);
      break;
    }
  }
  return std::max<Millis>(0, std::llround(ms));
}

void to_json(json& j, const LatencyModel& m) {
  switch (m.kind) {
    case LatencyKind::fixed:
      j = json{{"kind", "fixed"}, {"params", {{"ms", m.a}}}};
      break;
    case LatencyKind::lognormal:
      j = json{{"kind", "lognormal"}, {"params", {{"mu", m.a}, {"sigma", m.b}}}};
      break;
    case LatencyKind::pareto:
      j = json{{"kind", "pareto"}, {"params", {{"scale", m.a}, {"shape", m.b}}}};
      break;
  }
}

void from_json(const json& j, LatencyModel& m) {
  auto kind = j.at("kind").get<std::string>();
  const auto& p = j.at("params");
  if (kind == "fixed") {
    m = LatencyModel::fixed(p.at("ms").get<Millis>());
  } else if (kind == "lognormal") {
    m = LatencyModel::lognormal(p.at("mu").get<double>(), p.at("sigma").get<double>());
  } else if (kind == "pareto") {
    m = LatencyModel::pareto(p.at("scale").get<double>(), p.at("shape").get<double>());
  } else {
    throw Error(ErrorKind::configuration, "unknown latency model: " + kind);
  }
}

void to_json(json& j, const ToolDescriptor& d) {
  json args = json::object();
  for (const auto& [name, spec] : d.arg_schema) args[name] = spec.required ? spec.type : spec.type + "?";
  j = json{{"tool_id", d.tool_id},
           {"description", d.description},
           {"arg_schema", args},
           {"result_schema", d.result_schema},
           {"latency_model", d.latency},
           {"failure_rate", d.failure_rate}};
}

void from_json(const json& j, ToolDescriptor& d) {
  d.tool_id = j.at("tool_id").get<std::string>();
  d.description = j.value("description", "");
  d.arg_schema.clear();
  for (const auto& [name, type] : j.at("arg_schema").items()) {
    auto t = type.get<std::string>();
    ArgSpec spec;
    if (!t.empty() && t.back() == '?') {
      spec.required = false;
      t.pop_back();
    }
    spec.type = t;
    d.arg_schema[name] = spec;
  }
  d.result_schema = j.at("result_schema").get<std::map<std::string, std::string>>();
  d.latency = j.at("latency_model").get<LatencyModel>();
  d.failure_rate = j.value("failure_rate", 0.0);
}

void to_json(json& j, const ExecutionEnvelope& e) {
  j = json{{"envelope_id", e.envelope_id},
           {"tool_id", e.tool_id},
           {"args", e.args},
           {"context_slice", e.context_slice},
           {"issued_at", e.issued_at},
           {"deadline_ms", e.deadline_ms ? json(*e.deadline_ms) : json(nullptr)}};
}

std::string_view to_string(FailureCause c) {
  switch (c) {
    case FailureCause::validity: return "validity";
    case FailureCause::timeout: return "timeout";
    case FailureCause::error: return "error";
    case FailureCause::refused: return "refused";
  }
  return "error";
}

void to_json(json& j, const ToolOutcome& o) {
  if (const auto* r = std::get_if<ToolResult>(&o)) {
    j = json{{"status", "ok"},
             {"tool_id", r->tool_id},
             {"payload", r->payload},
             {"summary", r->summary},
             {"latency_ms", r->latency_ms}};
  } else {
    const auto& f = std::get<ToolFailure>(o);
    j = json{{"status", "failed"},
             {"cause", to_string(f.cause)},
             {"message", f.message},
             {"latency_ms", f.latency_ms}};
  }
}

// ---------------------------------------------------------------------------
// registry

void ToolRegistry::register_tool(ToolDescriptor descriptor, ToolHandler handler) {
  if (descriptor.tool_id.empty())
    throw Error(ErrorKind::registration, "tool id must not be empty");
  if (descriptor.arg_schema.empty() || descriptor.result_schema.empty())
    throw Error(ErrorKind::registration, "tool schemas must not be empty: " + descriptor.tool_id);
  if (!(descriptor.failure_rate >= 0.0 && descriptor.failure_rate <= 1.0))
    throw Error(ErrorKind::registration, "failure_rate outside [0,1]: " + descriptor.tool_id);
  if (!handler) {
    handler = [id = descriptor.tool_id](const ArgMap& args, std::uint64_t) {
      json p{{"args", args}};
      std::vector<std::string> parts;
      for (const auto& [k, v] : args) parts.push_back(k + "=" + v);
      p["summary"] = id + "(" + text::join(parts, ", ") + ")";
      return p;
    };
  }
  std::unique_lock lock(mu_);
  if (tools_.count(descriptor.tool_id))
    throw Error(ErrorKind::registration, "duplicate tool id: " + descriptor.tool_id);
  auto id = descriptor.tool_id;
  tools_.emplace(id, Entry{std::move(descriptor), std::move(handler)});
}

bool ToolRegistry::has(const std::string& tool_id) const {
  std::shared_lock lock(mu_);
  return tools_.count(tool_id) > 0;
}

ToolDescriptor ToolRegistry::descriptor(const std::string& tool_id) const {
  std::shared_lock lock(mu_);
  auto it = tools_.find(tool_id);
  if (it == tools_.end()) throw Error(ErrorKind::not_found, "unknown tool: " + tool_id);
  return it->second.descriptor;
}

std::vector<ToolDescriptor> ToolRegistry::catalog() const {
  std::shared_lock lock(mu_);
  std::vector<ToolDescriptor> out;
  for (const auto& [_, e] : tools_) out.push_back(e.descriptor);
  return out;
}

std::size_t ToolRegistry::size() const {
  std::shared_lock lock(mu_);
  return tools_.size();
}

namespace {

bool type_ok(const std::string& type, const std::string& value) {
  if (type == "string") return true;
  if (type == "int") {
    if (value.empty()) return false;
    std::size_t i = (value[0] == '-') ? 1 : 0;
    if (i == value.size()) return false;
    return std::all_of(value.begin() + static_cast<std::ptrdiff_t>(i), value.end(),
                       [](char c) { return c >= '0' && c <= '9'; });
  }
  if (type == "number") {
    char* end = nullptr;
    std::strtod(value.c_str(), &end);
    return !value.empty() && end && *end == '\0';
  }
  if (type == "bool") return value == "true" || value == "false";
  return false;
}

}  // namespace

void ToolRegistry::validate_args(const std::string& tool_id, const ArgMap& args) const {
  auto d = descriptor(tool_id);
  for (const auto& [name, spec] : d.arg_schema) {
    auto it = args.find(name);
    if (it == args.end()) {
      if (spec.required)
        throw Error(ErrorKind::validity, tool_id + ": missing required argument '" + name + "'");
      continue;
    }
    if (!type_ok(spec.type, it->second))
      throw Error(ErrorKind::validity,
                  tool_id + ": argument '" + name + "' is not a valid " + spec.type);
  }
  for (const auto& [name, _] : args)
    if (!d.arg_schema.count(name))
      throw Error(ErrorKind::validity, tool_id + ": unexpected argument '" + name + "'");
}

Millis ToolRegistry::sample_latency(const ExecutionEnvelope& envelope) const {
  auto d = descriptor(envelope.tool_id);
  std::mt19937_64 rng(fnv1a(envelope.envelope_id, seed_));
  return d.latency.sample(rng);
}

void ToolRegistry::invoke(const ExecutionEnvelope& envelope, Scheduler& clock,
                          std::function<void(ToolOutcome)> done) const {
  Entry entry;
  bool is_stalled = false;
  {
    std::shared_lock lock(mu_);
    auto it = tools_.find(envelope.tool_id);
    if (it != tools_.end()) {
      entry = it->second;
      is_stalled = stalled_.count(envelope.tool_id) > 0;
    }
  }
  if (!entry.handler) {
    clock.after(0, [done, id = envelope.tool_id] {
      done(ToolFailure{FailureCause::validity, "unknown tool: " + id, 0});
    });
    return;
  }
  try {
    validate_args(envelope.tool_id, envelope.args);
  } catch (const Error& e) {
    clock.after(0, [done, msg = std::string(e.what())] {
      done(ToolFailure{FailureCause::validity, msg, 0});
    });
    return;
  }

  std::mt19937_64 rng(fnv1a(envelope.envelope_id, seed_));
  Millis latency = entry.descriptor.latency.sample(rng);
  bool fails = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < entry.descriptor.failure_rate;
  std::uint64_t result_seed = rng();

  if (envelope.deadline_ms && (is_stalled || latency > *envelope.deadline_ms)) {
    Millis d = *envelope.deadline_ms;
    clock.after(d, [done, d, id = envelope.tool_id] {
      done(ToolFailure{FailureCause::timeout, id + " exceeded deadline", d});
    });
    return;
  }
  if (is_stalled) return;

  clock.after(latency, [done, latency, fails, result_seed, entry, args = envelope.args] {
    if (fails) {
      done(ToolFailure{FailureCause::error, entry.descriptor.tool_id + " failed", latency});
      return;
    }
    ToolResult r;
    r.tool_id = entry.descriptor.tool_id;
    r.payload = entry.handler(args, result_seed);
    r.summary = r.payload.value("summary", r.tool_id);
    r.latency_ms = latency;
    done(std::move(r));
  });
}

void ToolRegistry::set_stalled(const std::string& tool_id, bool stalled) {
  std::unique_lock lock(mu_);
  if (stalled) stalled_.insert(tool_id);
  else stalled_.erase(tool_id);
}

bool ToolRegistry::stalled(const std::string& tool_id) const {
  std::shared_lock lock(mu_);
  return stalled_.count(tool_id) > 0;
}

void ToolRegistry::set_latency(const std::string& tool_id, LatencyModel model) {
  std::unique_lock lock(mu_);
  auto it = tools_.find(tool_id);
  if (it == tools_.end()) throw Error(ErrorKind::not_found, "unknown tool: " + tool_id);
  it->second.descriptor.latency = model;
}

json ToolRegistry::catalog_json() const {
  json arr = json::array();
  for (const auto& d : catalog()) arr.push_back(d);
  return arr;
}

void ToolRegistry::load_catalog(const json& catalog) {
  if (!catalog.is_array()) throw Error(ErrorKind::configuration, "tool catalog must be a JSON array");
  for (const auto& item : catalog) {
    auto d = item.get<ToolDescriptor>();
    auto handler = builtin_handler(d.tool_id);
    register_tool(std::move(d), std::move(handler));
  }
}

// ---------------------------------------------------------------------------
// simulated tools

namespace {

template <std::size_t N>
const char* pick(const char* const (&options)[N], std::uint64_t h) {
  return options[h % N];
}

json candidate(const std::string& name, std::vector<std::string> tags, double score) {
  return json{{"name", name}, {"tags", std::move(tags)}, {"score", score}};
}

std::string title_case(const std::string& s) {
  std::string out = s;
  bool up = true;
  for (auto& c : out) {
    if (up && c >= 'a' && c <= 'z') c = static_cast<char>(c - 'a' + 'A');
    up = (c == ' ');
  }
  return out;
}

bool vague_reference(const std::string& query) {
  static const char* kVague[] = {"that video", "that clip", "that recording", "that song",
                                 "that show", "that episode"};
  auto q = text::lower(query);
  return std::any_of(std::begin(kVague), std::end(kVague),
                     [&](const char* v) { return text::contains(q, v); });
}

json weather(const ArgMap& a, std::uint64_t) {
  static const char* const kCond[] = {"sunny", "cloudy", "light rain", "clear", "windy"};
  const auto& city = a.at("city");
  auto h = fnv1a(city);
  int high = 12 + static_cast<int>(h % 19);
  std::string cond = pick(kCond, h);
  return json{{"city", city},
              {"condition", cond},
              {"high_c", high},
              {"summary", "Weather in " + city + ": " + cond + ", high " + std::to_string(high) + "C"}};
}

json stock_quote(const ArgMap& a, std::uint64_t) {
  const auto& sym = a.at("symbol");
  auto h = fnv1a(sym);
  double price = 20.0 + static_cast<double>(h % 48000) / 100.0;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", price);
  return json{{"symbol", sym}, {"price", price}, {"summary", sym + " trades at " + buf}};
}

json calendar(const ArgMap& a, std::uint64_t) {
  static const char* const kEvents[] = {"team standup 09:30", "design review 14:00",
                                        "dentist 16:30", "dinner with friends 19:00"};
  const auto& date = a.at("date");
  auto h = fnv1a(date);
  std::vector<std::string> events{kEvents[h % 4], kEvents[(h / 4) % 4]};
  if (events[0] == events[1]) events.pop_back();
  return json{{"date", date},
              {"events", events},
              {"summary", "Calendar for " + date + ": " + text::join(events, ", ")}};
}

json search(const ArgMap& a, std::uint64_t) {
  const auto& query = a.at("query");
  auto it = a.find("clarification");
  json cands = json::array();
  std::string summary;
  if (it != a.end() && !it->second.empty()) {
    cands.push_back(candidate("Match for '" + it->second + "'", {"video"}, 0.97));
    summary = "Found: video about " + it->second;
  } else if (vague_reference(query)) {
    for (int i = 0; i < 12; ++i)
      cands.push_back(candidate("Candidate video #" + std::to_string(i + 1), {"video"},
                                0.91 - 0.001 * i));
    summary = "12 similar results for '" + query + "'";
  } else {
    auto h = fnv1a(query);
    for (int i = 0; i < 3; ++i)
      cands.push_back(candidate("Article " + std::to_string(h % 97 + i) + " on " + query, {"article"},
                                0.9 - 0.2 * i));
    summary = "Top result for '" + query + "': Article " + std::to_string(h % 97) + " on " + query;
  }
  return json{{"query", query}, {"candidates", cands}, {"summary", summary}};
}

json flight_search(const ArgMap& a, std::uint64_t) {
  const auto& dest = a.at("dest");
  auto h = fnv1a(dest);
  std::string flight = "DT" + std::to_string(100 + h % 900);
  return json{{"dest", dest},
              {"flight", flight},
              {"depart", "09:40"},
              {"summary", "Flight to " + dest + ": " + flight + " departing 09:40"}};
}

json hotel_book(const ArgMap& a, std::uint64_t) {
  const auto& type = a.at("type");
  std::string ref = "HB-" + std::to_string(1000 + fnv1a(type) % 9000);
  return json{{"type", type},
              {"booking", ref},
              {"summary", "Booked " + type + " hotel (" + ref + ")"}};
}

json activity_search(const ArgMap& a, std::uint64_t) {
  static const char* const kActs[] = {"city walking tour", "museum pass", "river cruise",
                                      "food market visit"};
  const auto& dest = a.at("dest");
  std::string act = dest == "Tokyo" ? "Basketball game at Yoyogi Arena"
                                    : title_case(pick(kActs, fnv1a(dest)));
  json cands = json::array({candidate(act, {"activity"}, 0.9)});
  return json{{"dest", dest},
              {"candidates", cands},
              {"selection", act},
              {"summary", "Activity in " + dest + ": " + act}};
}

json dining_search(const ArgMap& a, std::uint64_t) {
  const auto& dest = a.at("dest");
  json cands = json::array();
  if (dest == "Tokyo") {
    cands.push_back(candidate("Sushi Omakase", {"raw fish", "seafood", "japanese"}, 0.95));
    cands.push_back(candidate("Wagyu Beef", {"beef", "meat", "japanese"}, 0.9));
    cands.push_back(candidate("Tempura Bar", {"seafood", "fried", "japanese"}, 0.8));
  } else {
    auto h = fnv1a(dest);
    cands.push_back(candidate(dest + " Bistro", {"meat", "local"}, 0.9));
    cands.push_back(candidate(dest + " Garden Kitchen", {"vegetarian", "local"}, 0.85 - (h % 5) * 0.01));
  }
  return json{{"dest", dest},
              {"candidates", cands},
              {"summary", "Dining options in " + dest + ": " + cands[0]["name"].get<std::string>()}};
}

json media_gen(const std::string& kind, const ArgMap& a, std::uint64_t seed) {
  const auto& prompt = a.at("prompt");
  std::string file = kind + "-" + hex_id(fnv1a(prompt, seed)).substr(0, 8) +
                     (kind == "image" ? ".png" : ".mp3");
  return json{{"prompt", prompt},
              {"file", file},
              {"summary", "Generated " + kind + " for '" + prompt + "' (" + file + ")"}};
}

ToolDescriptor desc(std::string id, std::string description, std::map<std::string, ArgSpec> args,
                    std::map<std::string, std::string> result, LatencyModel latency) {
  ToolDescriptor d;
  d.tool_id = std::move(id);
  d.description = std::move(description);
  d.arg_schema = std::move(args);
  d.result_schema = std::move(result);
  d.latency = latency;
  return d;
}

}  // namespace

ToolHandler builtin_handler(const std::string& id) {
  if (id == "weather") return weather;
  if (id == "stock_quote") return stock_quote;
  if (id == "calendar") return calendar;
  if (id == "search") return search;
  if (id == "flight_search") return flight_search;
  if (id == "hotel_book") return hotel_book;
  if (id == "activity_search") return activity_search;
  if (id == "dining_search") return dining_search;
  if (id == "image_gen") return [](const ArgMap& a, std::uint64_t s) { return media_gen("image", a, s); };
  if (id == "music_gen") return [](const ArgMap& a, std::uint64_t s) { return media_gen("music", a, s); };
  return nullptr;
}

std::vector<std::pair<ToolDescriptor, ToolHandler>> builtin_tools() {
  const ArgSpec str{"string", true};
  const ArgSpec opt{"string", false};
  std::vector<ToolDescriptor> ds{
      desc("search", "web and media search", {{"query", str}, {"clarification", opt}},
           {{"candidates", "array"}, {"summary", "string"}}, LatencyModel::lognormal(6.5, 1.2)),
      desc("weather", "weather report for a city", {{"city", str}},
           {{"condition", "string"}, {"summary", "string"}}, LatencyModel::fixed(200)),
      desc("stock_quote", "latest stock price", {{"symbol", str}},
           {{"price", "number"}, {"summary", "string"}}, LatencyModel::fixed(180)),
      desc("calendar", "calendar entries for a date", {{"date", str}},
           {{"events", "array"}, {"summary", "string"}}, LatencyModel::fixed(150)),
      desc("flight_search", "flight options to a destination", {{"dest", str}},
           {{"flight", "string"}, {"summary", "string"}}, LatencyModel::fixed(300)),
      desc("hotel_book", "hotel booking by accommodation type", {{"type", str}},
           {{"booking", "string"}, {"summary", "string"}}, LatencyModel::fixed(400)),
      desc("activity_search", "activities at a destination", {{"dest", str}},
           {{"candidates", "array"}, {"summary", "string"}}, LatencyModel::fixed(350)),
      desc("dining_search", "restaurants at a destination", {{"dest", str}},
           {{"candidates", "array"}, {"summary", "string"}}, LatencyModel::fixed(250)),
      desc("image_gen", "image generation", {{"prompt", str}},
           {{"file", "string"}, {"summary", "string"}}, LatencyModel::lognormal(7.0, 0.9)),
      desc("music_gen", "music generation", {{"prompt", str}},
           {{"file", "string"}, {"summary", "string"}}, LatencyModel::lognormal(7.0, 0.9)),
  };
  std::vector<std::pair<ToolDescriptor, ToolHandler>> out;
  for (auto& d : ds) {
    auto h = builtin_handler(d.tool_id);
    out.emplace_back(std::move(d), std::move(h));
  }
  return out;
}

void register_builtin_tools(ToolRegistry& registry) {
  for (auto& [d, h] : builtin_tools()) registry.register_tool(d, h);
}

// ---------------------------------------------------------------------------
// delegation

std::string_view to_string(SubAgentStatus s) {
  switch (s) {
    case SubAgentStatus::ok: return "ok";
    case SubAgentStatus::failed: return "failed";
    case SubAgentStatus::timeout: return "timeout";
    case SubAgentStatus::refused: return "refused";
  }
  return "failed";
}

void Delegator::delegate(const DelegationContract& contract, SubAgentRunner& runner,
                         Scheduler& clock, std::function<void(SubAgentResult)> done) {
  auto refuse = [&](std::string why) {
    clock.after(0, [done, why = std::move(why)] {
      done(SubAgentResult{SubAgentStatus::refused, json(nullptr), "", why});
    });
  };
  if (contract.deadline_ms <= 0) return refuse("contract deadline must be positive");
  if (contract.depth + 1 > limits_.max_depth)
    return refuse("delegation depth cap " + std::to_string(limits_.max_depth) + " reached");
  if (live_ >= limits_.max_live_subtasks) return refuse("live sub-task cap reached");
  if (!runner.has_profile(contract.delegate_profile_id))
    return refuse("unknown delegate profile: " + contract.delegate_profile_id);

  ++live_;
  peak_ = std::max(peak_, live_);
  auto settled = std::make_shared<bool>(false);
  auto timer = std::make_shared<TimerId>(0);
  auto finish = [this, settled, timer, &clock, done](SubAgentResult r) {
    if (*settled) return;
    *settled = true;
    --live_;
    clock.cancel(*timer);
    done(std::move(r));
  };
  *timer = clock.after(contract.deadline_ms, [finish, contract] {
    finish(SubAgentResult{SubAgentStatus::timeout, json(nullptr), "",
                          contract.delegate_profile_id + " missed its deadline"});
  });
  runner.run(contract, clock, [finish, schema = contract.expected_result_schema](SubAgentResult r) {
    if (r.status == SubAgentStatus::ok) {
      for (const auto& [key, _] : schema) {
        if (!r.payload.is_object() || !r.payload.contains(key)) {
          r.status = SubAgentStatus::failed;
          r.message = "result missing expected field '" + key + "'";
          break;
        }
      }
    }
    finish(std::move(r));
  });
}

// ---------------------------------------------------------------------------
// retrieval

std::string_view to_string(SourceKind s) {
  switch (s) {
    case SourceKind::knowledge_base: return "knowledge_base";
    case SourceKind::user_history: return "user_history";
    case SourceKind::agent_memory: return "agent_memory";
    case SourceKind::hot_feed: return "hot_feed";
  }
  return "knowledge_base";
}

std::vector<Snippet> retrieve(const std::string& query, const RetrievalCorpus& corpus,
                              const std::set<SourceKind>& sources, std::size_t k) {
  if (text::trim(query).empty()) throw Error(ErrorKind::invalid_argument, "query must not be empty");
  auto q = term_vector(query);
  std::vector<Snippet> scored;
  for (const auto& [source, docs] : corpus.docs) {
    if (!sources.count(source)) continue;
    for (const auto& [id, body] : docs) {
      double s = cosine(q, term_vector(body));
      if (s > 0) scored.push_back(Snippet{source, id, body, s});
    }
  }
  std::stable_sort(scored.begin(), scored.end(),
                   [](const Snippet& a, const Snippet& b) { return a.score > b.score; });
  if (scored.size() > k) scored.resize(k);
  return scored;
}

}  // namespace dualtrack
