#include "dualtrack/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

namespace dualtrack {

std::string canonical_call(const ToolCall& call) {
  std::string out = text::normalize(call.tool) + "(";
  bool first = true;
  for (const auto& [k, v] : call.args) {  // std::map keeps keys sorted
    if (!first) out += ",";
    first = false;
    out += text::normalize(k) + "=" + text::normalize(v);
  }
  return out + ")";
}

namespace {

std::set<std::string> canonical_set(const std::vector<ToolCall>& calls) {
  std::set<std::string> s;
  for (const auto& c : calls) s.insert(canonical_call(c));
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// serialization

void to_json(json& j, const ScriptedTurn& t) {
  j = json{{"text", t.text}, {"audio", t.audio}};
  if (!t.frame.empty()) j["frame"] = t.frame;
  if (t.clarification_answer) j["clarification_answer"] = *t.clarification_answer;
}

void from_json(const json& j, ScriptedTurn& t) {
  t.text = j.at("text").get<std::string>();
  t.audio = j.value("audio", true);
  t.frame = j.value("frame", FrameDescriptor{});
  t.clarification_answer.reset();
  if (j.contains("clarification_answer") && !j["clarification_answer"].is_null())
    t.clarification_answer = j["clarification_answer"].get<std::string>();
}

void to_json(json& j, const ToolCall& c) { j = json{{"tool", c.tool}, {"args", c.args}}; }

void from_json(const json& j, ToolCall& c) {
  c.tool = j.at("tool").get<std::string>();
  c.args.clear();
  const json args = j.value("args", json::object());
  for (const auto& [k, v] : args.items())
    c.args[k] = v.is_string() ? v.get<std::string>() : v.dump();
}

void to_json(json& j, const BenchmarkCase& c) {
  json modes = json::array();
  for (auto m : c.routing_gt) modes.push_back(std::string(to_string(m)));
  json profile = json::array();
  for (const auto& [k, v] : c.profile) profile.push_back(json::array({k, v}));
  j = json{{"case_id", c.case_id},       {"turns", c.turns},
           {"routing_gt", modes},        {"execution_gt", c.execution_gt},
           {"response_gt", c.response_gt}, {"tags", c.tags},
           {"profile", profile},         {"history", c.history}};
}

void from_json(const json& j, BenchmarkCase& c) {
  c.case_id = j.at("case_id").get<std::string>();
  c.turns = j.at("turns").get<std::vector<ScriptedTurn>>();
  c.routing_gt.clear();
  for (const auto& m : j.at("routing_gt")) {
    auto mode = parse_mode(m.get<std::string>());
    if (!mode) throw Error(ErrorKind::invalid_argument, c.case_id + ": unknown mode " + m.dump());
    c.routing_gt.push_back(*mode);
  }
  c.execution_gt = j.value("execution_gt", std::vector<std::vector<ToolCall>>{});
  c.response_gt = j.value("response_gt", std::vector<std::string>{});
  c.tags = j.value("tags", std::set<std::string>{});
  c.profile.clear();
  for (const auto& p : j.value("profile", json::array()))
    c.profile.emplace_back(p.at(0).get<std::string>(), p.at(1).get<std::string>());
  c.history = j.value("history", std::vector<std::string>{});
}

std::vector<std::string> validate_case(const BenchmarkCase& c, const ToolRegistry& catalog) {
  std::vector<std::string> issues;
  if (c.case_id.empty()) issues.push_back("empty case_id");
  if (c.turns.empty()) issues.push_back("no turns");
  if (c.routing_gt.size() != c.turns.size())
    issues.push_back("routing_gt has " + std::to_string(c.routing_gt.size()) + " labels for " +
                     std::to_string(c.turns.size()) + " turns");
  for (std::size_t i = 0; i < c.turns.size(); ++i)
    if (text::trim(c.turns[i].text).empty() && c.turns[i].frame.empty())
      issues.push_back("turn " + std::to_string(i) + " is empty");
  for (const auto& variant : c.execution_gt)
    for (const auto& call : variant)
      if (!catalog.has(call.tool)) issues.push_back("unknown GT tool '" + call.tool + "'");
  static const std::set<std::string> known{tags::unambiguous, tags::long_horizon, tags::cross_domain,
                                           tags::ambiguous};
  for (const auto& t : c.tags)
    if (!known.count(t)) issues.push_back("unknown tag '" + t + "'");
  if (c.has_tag(tags::long_horizon) && c.turns.size() <= 8)
    issues.push_back("long-horizon case with " + std::to_string(c.turns.size()) + " turns");
  if (c.has_tag(tags::cross_domain)) {
    bool two = std::any_of(c.execution_gt.begin(), c.execution_gt.end(), [](const auto& v) {
      std::set<std::string> tools;
      for (const auto& call : v) tools.insert(call.tool);
      return tools.size() >= 2;
    });
    if (!two) issues.push_back("cross-domain case without two distinct GT tools");
  }
  if (c.has_tag(tags::ambiguous) &&
      std::none_of(c.turns.begin(), c.turns.end(), [](const auto& t) { return t.clarification_answer.has_value(); }))
    issues.push_back("ambiguous case without a scripted clarification answer");
  if (c.has_tag(tags::ambiguous) && c.has_tag(tags::unambiguous))
    issues.push_back("tagged both ambiguous and unambiguous");
  return issues;
}

void validate_corpus(const std::vector<BenchmarkCase>& corpus, const ToolRegistry& catalog) {
  std::vector<std::string> lines;
  std::set<std::string> ids;
  for (const auto& c : corpus) {
    auto issues = validate_case(c, catalog);
    if (!ids.insert(c.case_id).second) issues.push_back("duplicate case_id");
    for (const auto& i : issues) lines.push_back(c.case_id + ": " + i);
  }
  if (!lines.empty())
    throw Error(ErrorKind::invalid_argument, "corpus validation failed:\n  " + text::join(lines, "\n  "));
}

std::vector<BenchmarkCase> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot read corpus: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::invalid_argument, path.string() + ": " + e.what());
  }
  if (!j.is_array()) throw Error(ErrorKind::invalid_argument, path.string() + ": corpus must be a JSON array");
  try {
    return j.get<std::vector<BenchmarkCase>>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::invalid_argument, path.string() + ": " + e.what());
  }
}

void save_corpus(const std::vector<BenchmarkCase>& corpus, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::io, "cannot write corpus: " + path.string());
  out << json(corpus).dump(1) << "\n";
}

// ---------------------------------------------------------------------------
// corpus generator

namespace {

struct Item {
  std::string text;
  Mode mode = Mode::chat;
  std::vector<ToolCall> calls;
  std::vector<std::string> points;
};

// Lowercased, whitespace collapsed, trailing ?.! dropped: what the search
// tool receives when the utterance has no search marker.
std::string whole_query(const std::string& utterance) {
  auto s = text::normalize(utterance);
  while (!s.empty() && (s.back() == '?' || s.back() == '.' || s.back() == '!')) s.pop_back();
  return s;
}

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  template <typename T>
  const T& pick(const std::vector<T>& v) { return v[rng_() % v.size()]; }
  std::size_t below(std::size_t n) { return rng_() % n; }

  const std::vector<std::string> cities{"Paris",  "Rome",    "Berlin", "Madrid", "Lisbon", "Vienna",
                                        "Prague", "Sydney",  "Toronto", "Seoul", "Oslo",   "Dublin",
                                        "Athens", "Bangkok", "Boston", "Denver", "Kyoto",  "Lima"};
  const std::vector<std::string> symbols{"AAPL", "MSFT", "NVDA", "TSLA", "AMZN", "GOOG", "IBM", "ORCL"};
  const std::vector<std::string> days{"monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"};
  const std::vector<std::string> topics{"electric cars",   "solar panels",     "the history of jazz",
                                        "marathon training", "deep sea creatures", "home gardening",
                                        "quantum computing", "coffee brewing",   "mountain biking",
                                        "ancient libraries"};
  const std::vector<std::string> scenes{"a red fox",        "a lighthouse at dusk", "a cat wearing a hat",
                                        "a quiet mountain lake", "a paper boat",     "an old bicycle"};
  const std::vector<std::string> moods{"the ocean", "summer nights", "city lights", "an old friend", "first snow"};
  const std::vector<std::string> postures{"relaxed posture", "smiling", "leaning forward", "sitting at a desk",
                                          "holding a mug"};

  Item chat() {
    static const std::vector<std::string> lines{
        "Hello there",
        "Hi, how are you today?",
        "Good morning!",
        "Tell me something fun about yourself",
        "What is your favorite color?",
        "Do you remember what I like?",
        "Thanks, that was really helpful",
        "I had a nice walk in the park today",
        "What do you like to do for fun?",
        "Can you tell me a joke?",
        "I feel great today",
        "Who are you?",
        "Let's just talk for a bit",
        "What did we talk about earlier?",
        "My cat knocked over a glass again",
        "I finally finished that book",
        "That sounds lovely",
        "Good evening, how was your day?",
        "I think I will go to bed early tonight",
        "You are very kind"};
    return {pick(lines), Mode::chat, {}, {}};
  }

  Item tool() {
    switch (below(7)) {
      case 0: {
        auto c = pick(cities);
        std::string t = below(2) ? "What's the weather in " + c + "?" : "Will it rain in " + c + " tomorrow?";
        return {t, Mode::tool, {{"weather", {{"city", c}}}}, {"Weather in " + c}};
      }
      case 1: {
        auto s = pick(symbols);
        std::string t = below(2) ? "What's the stock price of " + s + "?" : "How is " + s + " doing on the Nasdaq?";
        return {t, Mode::tool, {{"stock_quote", {{"symbol", s}}}}, {s + " trades at"}};
      }
      case 2: {
        auto d = pick(days);
        std::string t = below(2) ? "What's on my calendar for " + d + "?" : "Do I have any meetings on " + d + "?";
        return {t, Mode::tool, {{"calendar", {{"date", d}}}}, {"Calendar for " + d}};
      }
      case 3: {
        auto topic = pick(topics);
        std::string t = below(2) ? "Search for " + topic : "Look up " + topic + " for me";
        std::string q = t.rfind("Look", 0) == 0 ? topic + " for me" : topic;
        return {t, Mode::tool, {{"search", {{"query", q}}}}, {"Top result for '" + q + "'"}};
      }
      case 4: {
        auto topic = pick(topics);
        return {"Any news about " + topic + "?", Mode::tool, {{"search", {{"query", topic}}}},
                {"Top result for '" + topic + "'"}};
      }
      case 5: {
        auto s = pick(scenes);
        return {"Draw a picture of " + s, Mode::tool, {{"image_gen", {{"prompt", s}}}},
                {"Generated image for '" + s + "'"}};
      }
      default: {
        auto m = pick(moods);
        return {"Compose a song about " + m, Mode::tool, {{"music_gen", {{"prompt", m}}}},
                {"Generated music for '" + m + "'"}};
      }
    }
  }

  // single-specialist requests
  Item agent() {
    switch (below(5)) {
      case 0: {
        static const std::vector<std::string> symptoms{"headache", "fever", "sore throat", "back pain"};
        auto t = "I have a " + pick(symptoms) + " and need medical advice";
        return {t, Mode::agent, {{"search", {{"query", whole_query(t)}}}}, {"Top result for"}};
      }
      case 1: {
        static const std::vector<std::string> lines{"I need legal advice about my apartment lease",
                                                    "Can my landlord break a lease contract early?",
                                                    "Should I consult a lawyer before signing this contract?"};
        auto t = pick(lines);
        return {t, Mode::agent, {{"search", {{"query", whole_query(t)}}}}, {"Top result for"}};
      }
      case 2: {
        auto c = pick(cities);
        auto t = "Recommend a restaurant for dinner in " + c;
        return {t, Mode::agent, {{"dining_search", {{"dest", c}}}}, {"Dining options in " + c}};
      }
      case 3: {
        auto topic = pick(topics);
        auto t = "Find the video about " + topic + " I watched yesterday";
        return {t, Mode::agent, {{"search", {{"query", whole_query(t)}}}}, {"Top result for"}};
      }
      default: {
        auto c = pick(cities);
        auto t = "Plan a trip to " + c;
        return {t, Mode::agent,
                {{"flight_search", {{"dest", c}}}, {"activity_search", {{"dest", c}}}, {"dining_search", {{"dest", c}}}},
                {"Flight to " + c, "Dining options in " + c}};
      }
    }
  }

  // requests that need at least two distinct tools
  Item multi() {
    switch (below(5)) {
      case 0:
      case 1: {
        auto c = pick(cities);
        static const std::vector<std::pair<std::string, std::string>> stays{
            {"onsen", "Onsen"}, {"ryokan", "Ryokan"}, {"hostel", "Hostel"}, {"hotel", "Standard"}};
        std::vector<ToolCall> calls{{"flight_search", {{"dest", c}}},
                                    {"activity_search", {{"dest", c}}},
                                    {"dining_search", {{"dest", c}}}};
        std::string t = "Plan a trip to " + c;
        std::vector<std::string> points{"Flight to " + c, "Dining options in " + c};
        if (below(2)) {
          const auto& [word, type] = pick(stays);
          t += word == "hotel" ? " and book a hotel" : " and book a " + word + " hotel";
          calls.push_back({"hotel_book", {{"type", type}}});
          points.push_back("Booked " + type + " hotel");
        }
        return {t, Mode::agent, calls, points};
      }
      case 2: {
        auto s = pick(symbols);
        auto t = "Analyze the market data for " + s + " stock";
        return {t, Mode::agent, {{"stock_quote", {{"symbol", s}}}, {"search", {{"query", whole_query(t)}}}},
                {s + " trades at"}};
      }
      case 3: {
        auto c = pick(cities);
        auto d = pick(days);
        auto t = "Check the weather in " + c + " and my calendar for " + d;
        return {t, Mode::agent, {{"weather", {{"city", c}}}, {"calendar", {{"date", d}}}},
                {"Weather in " + c, "Calendar for " + d}};
      }
      default: {
        auto c = pick(cities);
        auto topic = pick(topics);
        auto t = "What's the weather in " + c + " and any news about " + topic + "?";
        return {t, Mode::agent, {{"weather", {{"city", c}}}, {"search", {{"query", topic}}}},
                {"Weather in " + c}};
      }
    }
  }

  ScriptedTurn turn(const std::string& text) {
    ScriptedTurn t;
    t.text = text;
    t.audio = true;
    t.frame = {{"subject", "user"}, {"posture", pick(postures)}};
    return t;
  }

  BenchmarkCase assemble(std::string id, const std::vector<Item>& items) {
    BenchmarkCase c;
    c.case_id = std::move(id);
    std::vector<ToolCall> calls;
    std::set<std::string> seen;
    for (const auto& it : items) {
      c.turns.push_back(turn(it.text));
      c.routing_gt.push_back(it.mode);
      for (const auto& call : it.calls)
        if (seen.insert(canonical_call(call)).second) calls.push_back(call);
      for (const auto& p : it.points)
        if (std::find(c.response_gt.begin(), c.response_gt.end(), p) == c.response_gt.end())
          c.response_gt.push_back(p);
    }
    if (!calls.empty()) c.execution_gt.push_back(std::move(calls));
    return c;
  }

 private:
  std::mt19937_64 rng_;
};

void tag_by_shape(BenchmarkCase& c) {
  bool clarifies = std::any_of(c.turns.begin(), c.turns.end(),
                               [](const auto& t) { return t.clarification_answer.has_value(); });
  c.tags.insert(clarifies ? tags::ambiguous : tags::unambiguous);
  if (c.turns.size() > 8) c.tags.insert(tags::long_horizon);
  for (const auto& v : c.execution_gt) {
    std::set<std::string> tools;
    for (const auto& call : v) tools.insert(call.tool);
    if (tools.size() >= 2) c.tags.insert(tags::cross_domain);
  }
}

std::string numbered(const std::string& prefix, int n) {
  std::ostringstream os;
  os << prefix << "-" << std::setw(3) << std::setfill('0') << n;
  return os.str();
}

}  // namespace

BenchmarkCase trip_case() {
  BenchmarkCase c;
  c.case_id = "trip-tokyo";
  ScriptedTurn t;
  t.text = "Exhausted... Plan a trip to Tokyo";
  t.audio = true;
  t.frame = {{"subject", "user"}, {"posture", "slumped posture"}};
  c.turns.push_back(t);
  c.routing_gt = {Mode::agent};
  c.execution_gt = {{{"flight_search", {{"dest", "Tokyo"}}},
                     {"activity_search", {{"dest", "Tokyo"}}},
                     {"dining_search", {{"dest", "Tokyo"}}}}};
  c.response_gt = {"Wagyu Beef"};
  c.profile = {{"Hobby", "Basketball"}};
  c.history = {"User dislikes raw fish"};
  tag_by_shape(c);
  return c;
}

std::vector<BenchmarkCase> generate_corpus(std::uint64_t seed) {
  Gen g(seed);
  std::vector<BenchmarkCase> out;
  out.push_back(trip_case());

  for (int i = 1; i <= 30; ++i) {
    std::vector<Item> items{g.chat()};
    if (g.below(2)) items.push_back(g.chat());
    out.push_back(g.assemble(numbered("chat", i), items));
  }
  for (int i = 1; i <= 40; ++i) {
    std::vector<Item> items;
    if (g.below(3) == 0) items.push_back(g.chat());
    items.push_back(g.tool());
    out.push_back(g.assemble(numbered("tool", i), items));
  }
  for (int i = 1; i <= 39; ++i) {
    std::vector<Item> items;
    if (g.below(3) == 0) items.push_back(g.chat());
    items.push_back(g.agent());
    out.push_back(g.assemble(numbered("agent", i), items));
  }
  for (int i = 1; i <= 35; ++i) out.push_back(g.assemble(numbered("cross", i), {g.multi()}));
  for (int i = 1; i <= 35; ++i) {
    std::size_t n = 9 + g.below(4);
    std::vector<Item> items;
    for (std::size_t k = 0; k < n; ++k) {
      auto r = g.below(20);
      items.push_back(r < 10 ? g.chat() : r < 17 ? g.tool() : r < 19 ? g.agent() : g.multi());
    }
    out.push_back(g.assemble(numbered("long", i), items));
  }
  static const std::vector<std::string> kinds{"video", "clip", "recording"};
  for (int i = 1; i <= 20; ++i) {
    std::vector<Item> items;
    if (g.below(2)) items.push_back(g.chat());
    auto topic = g.pick(g.topics);
    auto text = "Can you find that " + g.pick(kinds) + " about " + topic + " we watched last week?";
    auto answer = "The one about " + topic + " from the weekend channel";
    items.push_back({text, Mode::agent,
                     {{"search", {{"query", whole_query(text)}}},
                      {"search", {{"query", whole_query(text)}, {"clarification", answer}}}},
                     {"Found: video about " + answer}});
    auto c = g.assemble(numbered("ambiguous", i), items);
    c.turns.back().clarification_answer = answer;
    out.push_back(std::move(c));
  }
  for (auto& c : out)
    if (c.tags.empty()) tag_by_shape(c);
  return out;
}

// ---------------------------------------------------------------------------
// offline metrics

std::optional<Millis> percentile(std::vector<Millis> values, double p) {
  if (values.empty()) return std::nullopt;
  std::sort(values.begin(), values.end());
  auto n = static_cast<double>(values.size());
  auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * n));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

std::optional<double> dispatch_precision(const std::vector<Mode>& decisions, const std::vector<Mode>& routing_gt) {
  if (decisions.size() != routing_gt.size())
    throw Error(ErrorKind::invalid_argument, "dispatch_precision: " + std::to_string(decisions.size()) +
                                                 " decisions vs " + std::to_string(routing_gt.size()) + " labels");
  if (decisions.empty()) return std::nullopt;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < decisions.size(); ++i) hits += decisions[i] == routing_gt[i];
  return static_cast<double>(hits) / static_cast<double>(decisions.size());
}

bool matches_variant(const std::vector<ToolCall>& invoked, const std::vector<std::vector<ToolCall>>& variants) {
  auto got = canonical_set(invoked);
  return std::any_of(variants.begin(), variants.end(), [&](const auto& v) { return canonical_set(v) == got; });
}

std::optional<double> success_rate(const std::vector<std::vector<ToolCall>>& invoked,
                                   const std::vector<std::vector<std::vector<ToolCall>>>& execution_gt) {
  if (invoked.size() != execution_gt.size())
    throw Error(ErrorKind::invalid_argument, "success_rate: traces and GT differ in length");
  std::size_t scored = 0, ok = 0;
  for (std::size_t i = 0; i < invoked.size(); ++i) {
    if (execution_gt[i].empty()) continue;
    ++scored;
    ok += matches_variant(invoked[i], execution_gt[i]);
  }
  if (!scored) return std::nullopt;
  return static_cast<double>(ok) / static_cast<double>(scored);
}

bool substring_fidelity(const std::string& response, const std::vector<std::string>& points) {
  auto r = text::normalize(response);
  if (r.empty()) return false;
  return std::all_of(points.begin(), points.end(),
                     [&](const std::string& p) { return r.find(text::normalize(p)) != std::string::npos; });
}

std::optional<double> fidelity(const std::vector<std::string>& responses,
                               const std::vector<std::vector<std::string>>& key_points, const FidelityJudge& judge) {
  if (responses.size() != key_points.size())
    throw Error(ErrorKind::invalid_argument, "fidelity: responses and key points differ in length");
  std::size_t scored = 0, hits = 0;
  for (std::size_t i = 0; i < responses.size(); ++i) {
    if (key_points[i].empty()) continue;
    ++scored;
    hits += judge(responses[i], key_points[i]);
  }
  if (!scored) return std::nullopt;
  return static_cast<double>(hits) / static_cast<double>(scored);
}

// ---------------------------------------------------------------------------
// online metrics

std::string_view to_string(ActivityKind k) {
  switch (k) {
    case ActivityKind::turn: return "turn";
    case ActivityKind::click: return "click";
    case ActivityKind::share: return "share";
    case ActivityKind::like: return "like";
    case ActivityKind::terminate: return "terminate";
  }
  return "turn";
}

ActivityKind parse_activity_kind(std::string_view s) {
  auto l = text::lower(text::trim(s));
  if (l == "turn") return ActivityKind::turn;
  if (l == "click") return ActivityKind::click;
  if (l == "share") return ActivityKind::share;
  if (l == "like") return ActivityKind::like;
  if (l == "terminate") return ActivityKind::terminate;
  throw Error(ErrorKind::invalid_argument, "unknown event kind: " + std::string(s));
}

std::vector<ActivityRecord> parse_activity_csv(std::istream& in) {
  std::vector<ActivityRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (text::trim(line).empty()) continue;
    if (lineno == 1 && text::lower(line).rfind("user_id", 0) == 0) continue;  // header
    std::vector<std::string> cols;
    std::size_t start = 0;
    for (int k = 0; k < 3; ++k) {
      auto comma = line.find(',', start);
      if (comma == std::string::npos) {
        cols.push_back(line.substr(start));
        start = line.size() + 1;
        break;
      }
      cols.push_back(line.substr(start, comma - start));
      start = comma + 1;
    }
    if (cols.size() < 3)
      throw Error(ErrorKind::invalid_argument, "activity line " + std::to_string(lineno) + ": expected 3-4 columns");
    ActivityRecord r;
    r.user_id = text::trim(cols[0]);
    try {
      std::size_t used = 0;
      auto ts = text::trim(cols[1]);
      r.timestamp_ms = std::stoll(ts, &used);
      if (used != ts.size()) throw std::invalid_argument("trailing characters");
      r.kind = parse_activity_kind(cols[2]);
    } catch (const std::exception& e) {
      throw Error(ErrorKind::invalid_argument, "activity line " + std::to_string(lineno) + ": " + e.what());
    }
    if (start <= line.size()) r.extra = line.substr(start);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<ActivityRecord> load_activity_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot read activity log: " + path.string());
  return parse_activity_csv(in);
}

std::vector<ActivitySession> segment_sessions(const std::vector<ActivityRecord>& activity, double gap_minutes) {
  const double gap_ms = gap_minutes * 60'000.0;
  std::vector<ActivitySession> out;
  std::vector<std::string> order;
  std::map<std::string, std::vector<const ActivityRecord*>> by_user;
  for (const auto& r : activity) {
    if (!by_user.count(r.user_id)) order.push_back(r.user_id);
    by_user[r.user_id].push_back(&r);
  }
  for (const auto& user : order) {
    const ActivityRecord* prev = nullptr;
    for (const auto* r : by_user[user]) {
      if (!prev || static_cast<double>(r->timestamp_ms - prev->timestamp_ms) > gap_ms)
        out.push_back(ActivitySession{user, {}});
      out.back().events.push_back(*r);
      prev = r;
    }
  }
  return out;
}

std::optional<double> avg_turns(const std::vector<ActivitySession>& sessions) {
  if (sessions.empty()) return std::nullopt;
  std::size_t turns = 0;
  for (const auto& s : sessions)
    for (const auto& e : s.events) turns += e.kind == ActivityKind::turn;
  return static_cast<double>(turns) / static_cast<double>(sessions.size());
}

std::optional<double> retention7(const std::vector<ActivityRecord>& activity, std::int64_t day_t) {
  auto day_of = [](Millis ts) {
    return ts >= 0 ? ts / kDayMs : -((-ts + kDayMs - 1) / kDayMs);
  };
  std::set<std::string> now, later;
  for (const auto& r : activity) {
    if (r.kind != ActivityKind::turn) continue;
    auto d = day_of(r.timestamp_ms);
    if (d == day_t) now.insert(r.user_id);
    if (d == day_t + 7) later.insert(r.user_id);
  }
  if (now.empty()) return std::nullopt;
  std::size_t both = 0;
  for (const auto& u : now) both += later.count(u);
  return 100.0 * static_cast<double>(both) / static_cast<double>(now.size());
}

bool is_good_turn(const TurnSignal& t, const GtrConfig& cfg) {
  bool engaged = t.dwell_ms > cfg.threshold(t.length_tokens) || t.explicit_positive;
  bool negative = t.terminated || t.negative_sentiment || t.requery;
  return engaged && !negative;
}

std::optional<double> gtr(const std::vector<TurnSignal>& records, const GtrConfig& cfg) {
  if (records.empty()) return std::nullopt;
  std::size_t good = 0;
  for (const auto& r : records) good += is_good_turn(r, cfg);
  return static_cast<double>(good) / static_cast<double>(records.size());
}

bool proxy_completed(const ProxySession& s) {
  if (s.card_click) return true;
  for (std::size_t i = 0; i < s.corrections_after.size() && i < 2; ++i)
    if (s.corrections_after[i]) return false;
  return true;
}

std::optional<double> task_completion_proxy(const std::vector<ProxySession>& sessions) {
  std::size_t scored = 0, done = 0;
  for (const auto& s : sessions) {
    if (s.tier < 2) continue;
    ++scored;
    done += proxy_completed(s);
  }
  if (!scored) return std::nullopt;
  return static_cast<double>(done) / static_cast<double>(scored);
}

// ---------------------------------------------------------------------------
// bench runner

LatencySummary summarize(const std::vector<Millis>& values) {
  LatencySummary s;
  s.count = values.size();
  s.p50 = percentile(values, 50);
  s.p95 = percentile(values, 95);
  s.p99 = percentile(values, 99);
  s.max = percentile(values, 100);
  return s;
}

namespace {

json opt(const std::optional<Millis>& v) { return v ? json(*v) : json(nullptr); }
json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
json opt(const std::optional<bool>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

void to_json(json& j, const LatencySummary& s) {
  j = json{{"p50", opt(s.p50)}, {"p95", opt(s.p95)}, {"p99", opt(s.p99)}, {"max", opt(s.max)}, {"count", s.count}};
}

void to_json(json& j, const CaseVerdict& v) {
  j = json{{"case_id", v.case_id},   {"tags", v.tags},         {"modes", v.modes},
           {"statuses", v.statuses}, {"routing_ok", v.routing_ok}, {"tool_calls", v.tool_calls},
           {"success", opt(v.success)}, {"fidelity_hit", opt(v.fidelity_hit)},
           {"ttft_ms", v.ttft},      {"e2e_ms", v.e2e},        {"response", v.response}};
}

void to_json(json& j, const MetricsReport& r) {
  j = json{{"cases", r.cases},
           {"turns", r.turns},
           {"seed", r.seed},
           {"perception", r.perception},
           {"ttft_budget_ms", r.ttft_budget_ms},
           {"P_disp", opt(r.p_disp)},
           {"P_disp_unambiguous", opt(r.p_disp_unambiguous)},
           {"SR", opt(r.success_rate)},
           {"fidelity", opt(r.fidelity)},
           {"latency", {{"ttft", r.ttft}, {"e2e_all", r.e2e_all}, {"e2e_success", r.e2e_success}}},
           {"checks",
            {{"ttft_violations", r.checks.ttft_violations},
             {"order_violations", r.checks.order_violations},
             {"duplicate_deliverables", r.checks.duplicate_deliverables},
             {"parallel_checked", r.checks.parallel_checked},
             {"parallel_violations", r.checks.parallel_violations},
             {"ok", r.checks.ok()}}},
           {"verdicts", r.verdicts}};
  json undefined = json::array();
  if (!r.p_disp) undefined.push_back("P_disp");
  if (!r.p_disp_unambiguous) undefined.push_back("P_disp_unambiguous");
  if (!r.success_rate) undefined.push_back("SR");
  if (!r.fidelity) undefined.push_back("fidelity");
  if (!r.ttft.p50) undefined.push_back("latency");
  j["undefined"] = undefined;
}

std::string report_text(const MetricsReport& r) { return json(r).dump(2) + "\n"; }

std::string report_table(const MetricsReport& r) {
  auto frac = [](const std::optional<double>& v) {
    if (!v) return std::string("undefined");
    std::ostringstream os;
    os << std::fixed << std::setprecision(3) << *v;
    return os.str();
  };
  auto ms = [](const std::optional<Millis>& v) { return v ? std::to_string(*v) : std::string("-"); };
  std::ostringstream os;
  os << "cases " << r.cases << ", turns " << r.turns << ", seed " << r.seed << ", perception " << r.perception
     << "\n";
  os << std::left << std::setw(22) << "metric" << "value\n";
  os << std::setw(22) << "P_disp" << frac(r.p_disp) << "\n";
  os << std::setw(22) << "P_disp (unambiguous)" << frac(r.p_disp_unambiguous) << "\n";
  os << std::setw(22) << "SR" << frac(r.success_rate) << "\n";
  os << std::setw(22) << "fidelity" << frac(r.fidelity) << "\n";
  os << std::setw(22) << "latency (ms)" << std::setw(8) << "p50" << std::setw(8) << "p95" << std::setw(8) << "p99"
     << "max\n";
  auto row = [&](const char* name, const LatencySummary& s) {
    os << std::setw(22) << name << std::setw(8) << ms(s.p50) << std::setw(8) << ms(s.p95) << std::setw(8)
       << ms(s.p99) << ms(s.max) << "\n";
  };
  row("ttft", r.ttft);
  row("e2e (all)", r.e2e_all);
  row("e2e (success)", r.e2e_success);
  os << "checks: ttft " << r.checks.ttft_violations << ", order " << r.checks.order_violations << ", duplicates "
     << r.checks.duplicate_deliverables << ", parallel " << r.checks.parallel_violations << "/"
     << r.checks.parallel_checked << (r.checks.ok() ? "  [ok]" : "  [FAILED]") << "\n";
  return os.str();
}

TurnInput scripted_input(const ScriptedTurn& t, Millis origin_ms) {
  TurnInput in;
  if (!t.text.empty()) {
    ModalityPayload p;
    p.modality = t.audio ? Modality::audio : Modality::text;
    p.text = t.text;
    p.origin_ms = origin_ms;
    in.payloads.push_back(std::move(p));
  }
  if (!t.frame.empty()) {
    ModalityPayload v;
    v.modality = Modality::video;
    v.frames.push_back(t.frame);
    v.origin_ms = origin_ms;
    in.payloads.push_back(std::move(v));
  }
  return in;
}

namespace {

// Two steps are independent when neither reaches the other.
bool has_independent_pair(const ExecutionTrace& t) {
  TaskGraph g;
  g.steps = t.steps;
  g.edges = t.edges;
  std::map<std::string, std::set<std::string>> reach;
  auto order = g.topological_order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto& r = reach[*it];
    for (const auto& c : g.children(*it)) {
      r.insert(c);
      r.insert(reach[c].begin(), reach[c].end());
    }
  }
  for (std::size_t i = 0; i < order.size(); ++i)
    for (std::size_t k = i + 1; k < order.size(); ++k)
      if (!reach[order[i]].count(order[k]) && !reach[order[k]].count(order[i])) return true;
  return false;
}

}  // namespace

CaseRun run_case(const BenchmarkCase& c, const EngineConfig& config, const BenchOptions& options) {
  CaseRun run;
  run.engine = std::make_unique<Engine>(config, options.parts);
  auto& e = *run.engine;
  const std::string user = "user-" + c.case_id;
  for (const auto& [k, v] : c.profile) e.store().set_profile(user, k, v);
  for (std::size_t i = 0; i < c.history.size(); ++i)
    e.store().add_history(user, HistoryFact{"seed-" + std::to_string(i), c.history[i], "corpus", 0});
  run.session_id = e.create_session(user);
  const auto& sid = run.session_id;

  auto& v = run.verdict;
  v.case_id = c.case_id;
  v.tags = c.tags;
  std::vector<std::size_t> scripted;
  for (const auto& t : c.turns) {
    auto idx = e.submit_turn(sid, scripted_input(t, e.now()));
    scripted.push_back(idx);
    e.run();
    if (t.clarification_answer) {
      if (auto pending = e.pending_clarification(sid)) {
        ScriptedTurn a;
        a.text = *t.clarification_answer;
        auto in = scripted_input(a, e.now());
        in.answers_task = *pending;
        e.submit_turn(sid, std::move(in));
        e.run();
      }
    }
    e.run_until(e.now() + options.turn_gap_ms);
  }

  const auto& recs = e.turns();
  for (auto idx : scripted) {
    run.decisions.push_back(recs[idx].decision.mode);
    v.modes.emplace_back(to_string(recs[idx].decision.mode));
    v.statuses.push_back(recs[idx].status);
  }
  for (std::size_t i = 0; i < run.decisions.size() && i < c.routing_gt.size(); ++i)
    if (run.decisions[i] != c.routing_gt[i]) v.routing_ok = false;

  std::vector<ToolCall> invoked;
  std::set<std::string> seen_tasks;
  for (const auto& r : recs) {
    if (auto t = r.ttft()) v.ttft.push_back(*t);
    if (auto d = r.e2e()) v.e2e.push_back(*d);
    if (r.trace && seen_tasks.insert(r.trace->task_id).second)
      for (const auto& inv : r.trace->invocations) invoked.push_back({inv.tool, inv.args});
  }
  std::set<std::string> calls;
  for (const auto& call : invoked) calls.insert(canonical_call(call));
  v.tool_calls.assign(calls.begin(), calls.end());
  if (!c.execution_gt.empty()) v.success = matches_variant(invoked, c.execution_gt);

  std::vector<std::string> replies;
  for (const auto& entry : e.store().transcript(sid))
    if (entry.kind == EntryKind::deliverable || (entry.role == Role::assistant && entry.kind == EntryKind::turn))
      replies.push_back(entry.content);
  v.response = text::join(replies, "\n");
  if (!c.response_gt.empty()) v.fidelity_hit = options.judge(v.response, c.response_gt);
  return run;
}

namespace {

void check_case(const CaseRun& run, Millis budget, InvariantChecks& checks) {
  const auto& e = *run.engine;
  auto transcript = run.engine->store().transcript(run.session_id);
  std::vector<const TranscriptEntry*> user_entries;
  for (const auto& x : transcript)
    if (x.role == Role::user) user_entries.push_back(&x);

  std::size_t k = 0;
  for (const auto& r : e.turns()) {
    if (r.session_id != run.session_id) continue;
    if (!r.ttft() || *r.ttft() > budget) ++checks.ttft_violations;
    const TranscriptEntry* user_entry = k < user_entries.size() ? user_entries[k] : nullptr;
    ++k;
    if (!r.task_id || r.clarification_answer) continue;
    const TranscriptEntry* bridge = nullptr;
    std::size_t deliverables = 0;
    const TranscriptEntry* first_deliverable = nullptr;
    for (const auto& x : transcript) {
      if (!bridge && user_entry && x.seq > user_entry->seq && x.role == Role::assistant &&
          x.kind == EntryKind::bridge)
        bridge = &x;
      if (x.kind == EntryKind::deliverable && x.source_event_id &&
          x.source_event_id->rfind(*r.task_id + "#", 0) == 0) {
        ++deliverables;
        if (!first_deliverable) first_deliverable = &x;
      }
    }
    if (deliverables > 1) checks.duplicate_deliverables += deliverables - 1;
    if (first_deliverable && (!bridge || bridge->seq > first_deliverable->seq)) ++checks.order_violations;
    if (r.trace && !r.trace->steps.empty() && has_independent_pair(*r.trace)) {
      bool clarified = std::any_of(e.turns().begin(), e.turns().end(), [&](const TurnRecord& o) {
        return o.clarification_answer && o.task_id == r.task_id;
      });
      if (clarified) continue;  // user think time is not step work
      ++checks.parallel_checked;
      if (r.trace->makespan() > r.trace->critical_path() + 1) ++checks.parallel_violations;
    }
  }
}

}  // namespace

MetricsReport run_bench(const std::vector<BenchmarkCase>& corpus, EngineConfig config, std::uint64_t seed,
                        const BenchOptions& options) {
  config.seed = seed;
  {
    ToolRegistry catalog(seed);
    register_builtin_tools(catalog);
    validate_corpus(corpus, catalog);
  }
  MetricsReport rep;
  rep.cases = corpus.size();
  rep.seed = seed;
  rep.perception = std::string(to_string(config.perception.paradigm));
  rep.ttft_budget_ms = config.ttft_budget_ms;

  std::vector<Mode> all_dec, all_gt, unamb_dec, unamb_gt;
  std::vector<std::vector<ToolCall>> invoked;
  std::vector<std::vector<std::vector<ToolCall>>> exec_gt;
  std::vector<std::string> responses;
  std::vector<std::vector<std::string>> points;
  std::vector<Millis> ttft, e2e_all, e2e_ok;

  for (const auto& c : corpus) {
    auto run = run_case(c, config, options);
    check_case(run, config.ttft_budget_ms, rep.checks);
    all_dec.insert(all_dec.end(), run.decisions.begin(), run.decisions.end());
    all_gt.insert(all_gt.end(), c.routing_gt.begin(), c.routing_gt.end());
    if (c.has_tag(tags::unambiguous)) {
      unamb_dec.insert(unamb_dec.end(), run.decisions.begin(), run.decisions.end());
      unamb_gt.insert(unamb_gt.end(), c.routing_gt.begin(), c.routing_gt.end());
    }
    std::vector<ToolCall> calls;
    for (const auto& r : run.engine->turns())
      if (r.trace && !r.clarification_answer)
        for (const auto& inv : r.trace->invocations) calls.push_back({inv.tool, inv.args});
    invoked.push_back(std::move(calls));
    exec_gt.push_back(c.execution_gt);
    responses.push_back(run.verdict.response);
    points.push_back(c.response_gt);
    std::map<std::string, std::string> task_status;
    for (const auto& r : run.engine->turns())
      if (r.task_id && !r.clarification_answer) task_status[*r.task_id] = r.status;
    for (const auto& r : run.engine->turns()) {
      ++rep.turns;
      if (auto t = r.ttft()) ttft.push_back(*t);
      if (auto d = r.e2e()) {
        e2e_all.push_back(*d);
        auto status = r.clarification_answer && r.task_id ? task_status[*r.task_id] : r.status;
        if (status == "chat" || status == "success") e2e_ok.push_back(*d);
      }
    }
    if (options.on_case) options.on_case(c, run);
    rep.verdicts.push_back(std::move(run.verdict));
  }
  rep.p_disp = dispatch_precision(all_dec, all_gt);
  rep.p_disp_unambiguous = dispatch_precision(unamb_dec, unamb_gt);
  rep.success_rate = success_rate(invoked, exec_gt);
  rep.fidelity = fidelity(responses, points, options.judge);
  rep.ttft = summarize(ttft);
  rep.e2e_all = summarize(e2e_all);
  rep.e2e_success = summarize(e2e_ok);
  return rep;
}

}  // namespace dualtrack
