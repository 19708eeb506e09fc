#include "dualtrack/slow_track.hpp"

#include <algorithm>
#include <deque>
#include <regex>

namespace dualtrack {

// ---------------------------------------------------------------------------
// profiles

void ProfileRegistry::add(AgentProfile profile) {
  if (profile.profile_id.empty())
    throw Error(ErrorKind::registration, "profile id must not be empty");
  if (profiles_.count(profile.profile_id))
    throw Error(ErrorKind::registration, "duplicate profile: " + profile.profile_id);
  if (profile.generalist) generalist_ = profile.profile_id;
  order_.push_back(profile.profile_id);
  profiles_.emplace(profile.profile_id, std::move(profile));
}

const AgentProfile& ProfileRegistry::get(const std::string& id) const {
  auto it = profiles_.find(id);
  if (it == profiles_.end()) throw Error(ErrorKind::not_found, "unknown profile: " + id);
  return it->second;
}

std::vector<AgentProfile> ProfileRegistry::all() const {
  std::vector<AgentProfile> out;
  for (const auto& id : order_) out.push_back(profiles_.at(id));
  return out;
}

void ProfileRegistry::set_stalled(const std::string& id, bool stalled) {
  if (stalled) stalled_.insert(id);
  else stalled_.erase(id);
}

ProfileRegistry ProfileRegistry::defaults() {
  ProfileRegistry r;
  r.add({"TravelPlanner",
         "travel planner for trips itineraries vacations flights hotels and activities at a destination",
         {"travel", "trip", "plan", "itinerary", "flight", "hotel", "tokyo", "vacation", "visit"},
         {},
         "tf-cosine"});
  r.add({"MedicalExpert",
         "medical expert for symptoms health questions diagnosis and treatment",
         {"medical", "doctor", "symptom", "symptoms", "headache", "fever", "health", "diagnosis",
          "medicine"},
         {},
         "tf-cosine"});
  r.add({"LegalAdvisor",
         "legal advisor for contracts leases rights disputes and law",
         {"legal", "lawyer", "contract", "lease", "law", "rights", "landlord", "consult"},
         {},
         "tf-cosine"});
  r.add({"FoodExpert",
         "food expert for restaurants dining dinner cuisine and meal shortlists",
         {"food", "restaurant", "restaurants", "dining", "dinner", "lunch", "cuisine", "meal"},
         {},
         "tf-cosine"});
  r.add({"MediaCurator",
         "media curator for finding videos clips recordings songs and shows watched before",
         {"video", "videos", "clip", "recording", "watched", "show", "find", "media"},
         {},
         "tf-cosine"});
  r.add({"DataAnalyst",
         "data analyst for analysis of numbers reports charts and market data",
         {"analyze", "analysis", "data", "report", "chart", "numbers", "market"},
         {},
         "tf-cosine"});
  r.add({"Generalist", "general assistant", {}, {}, "tf-cosine", true});
  return r;
}

TermVector profile_vector(const AgentProfile& p) {
  return content_vector(p.description + " " + text::join(p.capability_tags, " "));
}

std::optional<std::size_t> argmax_cosine(const TermVector& query,
                                         const std::vector<TermVector>& candidates) {
  std::optional<std::size_t> best;
  double best_score = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    double s = cosine(query, candidates[i]);
    if (s > best_score + 1e-12) {
      best_score = s;
      best = i;
    }
  }
  return best;
}

AgentProfile dispatch(const std::string& query, const ProfileRegistry& registry) {
  if (registry.empty()) throw Error(ErrorKind::dispatch, "no agent profiles registered");
  std::vector<AgentProfile> specialists;
  std::vector<TermVector> vecs;
  for (auto& p : registry.all()) {
    if (p.generalist) continue;
    vecs.push_back(profile_vector(p));
    specialists.push_back(std::move(p));
  }
  if (auto i = argmax_cosine(content_vector(query), vecs)) return specialists[*i];
  if (auto g = registry.generalist()) return registry.get(*g);
  throw Error(ErrorKind::dispatch, "no profile matches and no generalist is registered");
}

AgentProfile dispatch(const RoutingDecision& decision, const std::string& query,
                      const ProfileRegistry& registry) {
  if (decision.routing_target && registry.has(*decision.routing_target))
    return registry.get(*decision.routing_target);
  return dispatch(query, registry);
}

// ---------------------------------------------------------------------------
// task graph

std::string_view to_string(StepState s) {
  switch (s) {
    case StepState::pending: return "pending";
    case StepState::running: return "running";
    case StepState::done: return "done";
    case StepState::failed: return "failed";
    case StepState::skipped: return "skipped";
  }
  return "pending";
}

void to_json(json& j, const PlanStep& s) {
  j = json{{"step_id", s.step_id},
           {"tool", s.tool},
           {"args", s.args},
           {"state", to_string(s.state)},
           {"started_at", s.started_at},
           {"ended_at", s.ended_at}};
  if (s.result) {
    j["summary"] = s.result->summary;
    j["payload"] = s.result->payload;
  }
  if (!s.failure.empty()) j["failure"] = s.failure;
}

const PlanStep* TaskGraph::find(const std::string& step_id) const {
  for (const auto& s : steps)
    if (s.step_id == step_id) return &s;
  return nullptr;
}

PlanStep* TaskGraph::find(const std::string& step_id) {
  for (auto& s : steps)
    if (s.step_id == step_id) return &s;
  return nullptr;
}

std::vector<std::string> TaskGraph::parents(const std::string& step_id) const {
  std::vector<std::string> out;
  for (const auto& [from, to] : edges)
    if (to == step_id) out.push_back(from);
  return out;
}

std::vector<std::string> TaskGraph::children(const std::string& step_id) const {
  std::vector<std::string> out;
  for (const auto& [from, to] : edges)
    if (from == step_id) out.push_back(to);
  return out;
}

std::vector<std::string> TaskGraph::topological_order() const {
  std::map<std::string, int> indeg;
  for (const auto& s : steps) indeg[s.step_id] = 0;
  for (const auto& [from, to] : edges) ++indeg[to];
  std::vector<std::string> out;
  std::set<std::string> emitted;
  while (out.size() < steps.size()) {
    bool progressed = false;
    for (const auto& s : steps) {
      if (emitted.count(s.step_id) || indeg[s.step_id] != 0) continue;
      emitted.insert(s.step_id);
      out.push_back(s.step_id);
      for (const auto& c : children(s.step_id)) --indeg[c];
      progressed = true;
      break;
    }
    if (!progressed) throw Error(ErrorKind::plan_validation, "task graph has a cycle");
  }
  return out;
}

void TaskGraph::validate(const ToolRegistry* catalog, const ProfileRegistry* profiles) const {
  if (steps.empty()) throw Error(ErrorKind::plan_validation, "plan has no steps");
  std::set<std::string> ids;
  for (const auto& s : steps) {
    if (s.step_id.empty()) throw Error(ErrorKind::plan_validation, "step without id");
    if (!ids.insert(s.step_id).second)
      throw Error(ErrorKind::plan_validation, "duplicate step id: " + s.step_id);
  }
  for (const auto& [from, to] : edges) {
    if (!ids.count(from) || !ids.count(to))
      throw Error(ErrorKind::plan_validation, "edge references unknown step: " + from + " -> " + to);
    if (from == to) throw Error(ErrorKind::plan_validation, "self edge on " + from);
  }
  for (const auto& s : steps) {
    if (s.tool.rfind(kAgentToolPrefix, 0) == 0) {
      auto who = s.tool.substr(kAgentToolPrefix.size());
      if (profiles && !profiles->has(who))
        throw Error(ErrorKind::plan_validation, "unknown delegate profile: " + who);
    } else if (catalog && !catalog->has(s.tool)) {
      throw Error(ErrorKind::plan_validation, "unknown tool: " + s.tool);
    }
    for (const auto& ref : arg_references(s.args)) {
      if (!ids.count(ref))
        throw Error(ErrorKind::plan_validation, s.step_id + " references unknown step " + ref);
      auto ps = parents(s.step_id);
      if (std::find(ps.begin(), ps.end(), ref) == ps.end())
        throw Error(ErrorKind::plan_validation, s.step_id + " uses " + ref + " without depending on it");
    }
  }
  topological_order();
}

std::vector<PlanItem> TaskGraph::to_plan_items() const {
  std::vector<PlanItem> out;
  int n = 1;
  for (const auto& s : steps) out.push_back(PlanItem{n++, s.tool, s.args});
  return out;
}

namespace {

const std::regex& ref_pattern() {
  static const std::regex re("^\\$([A-Za-z0-9_]+)\\.([A-Za-z0-9_]+)$");
  return re;
}

void link_references(TaskGraph& g) {
  for (const auto& s : g.steps)
    for (const auto& ref : arg_references(s.args)) {
      std::pair<std::string, std::string> e{ref, s.step_id};
      if (std::find(g.edges.begin(), g.edges.end(), e) == g.edges.end()) g.edges.push_back(e);
    }
}

std::string strip_trailing(std::string s) {
  while (!s.empty() && std::string(".,;!? ").find(s.back()) != std::string::npos) s.pop_back();
  return text::trim(s);
}

}  // namespace

std::vector<std::string> arg_references(const ArgMap& args) {
  std::vector<std::string> out;
  for (const auto& [_, v] : args) {
    std::smatch m;
    if (std::regex_match(v, m, ref_pattern())) {
      auto id = m[1].str();
      if (std::find(out.begin(), out.end(), id) == out.end()) out.push_back(id);
    }
  }
  return out;
}

TaskGraph graph_from_plan_items(const std::string& task_id, const std::vector<PlanItem>& items) {
  TaskGraph g;
  g.task_id = task_id;
  for (const auto& it : items) {
    PlanStep s;
    s.step_id = "s" + std::to_string(it.step);
    s.tool = it.tool;
    s.args = it.args;
    g.steps.push_back(std::move(s));
  }
  link_references(g);
  return g;
}

// ---------------------------------------------------------------------------
// constraints

std::vector<Candidate> candidates_from_json(const json& arr) {
  std::vector<Candidate> out;
  if (!arr.is_array()) return out;
  for (const auto& c : arr) {
    Candidate x;
    x.name = c.value("name", std::string{});
    if (c.contains("tags") && c["tags"].is_array())
      for (const auto& t : c["tags"]) x.tags.push_back(t.get<std::string>());
    x.score = c.value("score", 0.0);
    out.push_back(std::move(x));
  }
  return out;
}

json candidates_to_json(const std::vector<Candidate>& cs) {
  json arr = json::array();
  for (const auto& c : cs) arr.push_back(json{{"name", c.name}, {"tags", c.tags}, {"score", c.score}});
  return arr;
}

bool Constraint::violated_by(const Candidate& c) const {
  auto want = text::lower(attribute);
  bool has = std::any_of(c.tags.begin(), c.tags.end(),
                         [&](const std::string& t) { return text::lower(t) == want; });
  return kind == Kind::dislike ? has : !has;
}

std::string Constraint::describe() const {
  return std::string(kind == Kind::dislike ? "dislike(" : "require(") + attribute + ")";
}

std::vector<Candidate> apply_constraints(const std::vector<Candidate>& candidates,
                                         const std::vector<Constraint>& constraints) {
  std::vector<Candidate> out;
  for (const auto& c : candidates)
    if (std::none_of(constraints.begin(), constraints.end(),
                     [&](const Constraint& k) { return k.violated_by(c); }))
      out.push_back(c);
  return out;
}

std::vector<Constraint> constraints_from_memory(const UserMemory& memory) {
  std::vector<Constraint> out;
  auto add = [&](Constraint::Kind kind, std::string attr) {
    attr = strip_trailing(text::lower(text::trim(attr)));
    if (attr.empty()) return;
    Constraint c{kind, attr};
    if (std::find(out.begin(), out.end(), c) == out.end()) out.push_back(std::move(c));
  };
  auto add_list = [&](Constraint::Kind kind, const std::string& list) {
    static const std::regex sep("\\s*(?:,|;|\\band\\b)\\s*");
    auto low = text::lower(list);
    for (std::sregex_token_iterator it(low.begin(), low.end(), sep, -1), end; it != end; ++it)
      add(kind, it->str());
  };

  for (const auto& [key, value] : memory.profile) {
    auto k = text::lower(text::trim(key));
    if (k == "dislikes" || k == "dislike" || k == "avoid" || k == "allergies")
      add_list(Constraint::Kind::dislike, value);
    else if (k == "requires" || k == "require")
      add_list(Constraint::Kind::require, value);
    else if (k == "diet" && text::contains(text::lower(value), "vegetarian"))
      add(Constraint::Kind::dislike, "meat");
  }

  static const std::regex dislike_re("\\b(?:dislikes|hates|avoids|is allergic to|allergic to)\\s+([a-z][a-z \\-]*)");
  static const std::regex require_re("\\b(?:requires|needs)\\s+([a-z][a-z \\-]*)");
  static const std::regex veg_re("\\b(?:is (?:a )?)?vegetarian\\b");
  for (const auto& fact : memory.history) {
    auto low = text::lower(fact.statement);
    std::smatch m;
    if (std::regex_search(low, m, dislike_re)) add(Constraint::Kind::dislike, m[1].str());
    if (std::regex_search(low, m, require_re)) add(Constraint::Kind::require, m[1].str());
    if (std::regex_search(low, veg_re)) add(Constraint::Kind::dislike, "meat");
  }
  return out;
}

// ---------------------------------------------------------------------------
// planning

TaskGraph TemplatePlanner::plan(const PlanRequest& r) {
  TaskGraph g;
  g.task_id = r.task_id;
  auto args_for = [&](const std::string& tool) {
    auto a = extract_tool_args(tool, r.utterance);
    for (auto& [k, v] : a) {
      auto it = r.context_args.find(k);
      if (it != r.context_args.end() && !it->second.empty()) v = it->second;
    }
    return a;
  };
  auto add = [&](std::string tool, ArgMap args) {
    PlanStep s;
    s.step_id = "s" + std::to_string(g.steps.size() + 1);
    s.tool = std::move(tool);
    s.args = std::move(args);
    g.steps.push_back(std::move(s));
    return g.steps.back().step_id;
  };

  const auto& id = r.profile.profile_id;
  auto low = text::lower(r.utterance);
  std::set<std::string> covered;
  if (id == "TravelPlanner") {
    auto flight = add("flight_search", args_for("flight_search"));
    auto activity = add("activity_search", args_for("activity_search"));
    if (text::contains(low, "hotel") || text::contains(low, "onsen") || text::contains(low, "ryokan") ||
        text::contains(low, "hostel"))
      add("hotel_book", args_for("hotel_book"));
    // dining is chosen after the flight and the activity are known
    add("agent:FoodExpert", {{"dest", "$" + flight + ".dest"}, {"activity", "$" + activity + ".selection"}});
    covered = {"flight_search", "activity_search", "hotel_book", "dining_search"};
  } else if (id == "FoodExpert") {
    add("dining_search", args_for("dining_search"));
    covered = {"dining_search"};
  } else if (id == "DataAnalyst") {
    add("stock_quote", args_for("stock_quote"));
    add("search", args_for("search"));
    covered = {"stock_quote", "search"};
  } else if (id == "MedicalExpert" || id == "LegalAdvisor" || id == "MediaCurator") {
    add("search", args_for("search"));
    covered = {"search"};
  }
  for (const auto& tool : r.extra_tools)
    if (!covered.count(tool)) {
      add(tool, args_for(tool));
      covered.insert(tool);
    }
  if (g.steps.empty()) add("search", args_for("search"));
  link_references(g);
  return g;
}

ModelPlanner::ModelPlanner(std::shared_ptr<TextCompletion> backend) : backend_(std::move(backend)) {}

TaskGraph ModelPlanner::plan(const PlanRequest& r) {
  std::string prompt =
      "You are the planner for the agent profile " + r.profile.profile_id + " (" + r.profile.description +
      ").\nReturn only a JSON array of steps, each {\"step\": <int>, \"tool\": <tool id>, \"args\": "
      "{<name>: <string>}}. Use \"$sN.field\" to consume a field of step N's result.\nRequest: " +
      r.utterance + "\n";
  for (const auto& [k, v] : r.context_args) prompt += "Context " + k + ": " + v + "\n";
  json doc;
  try {
    doc = json::parse(backend_->complete(prompt));
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::plan_validation, std::string("planner output is not JSON: ") + e.what());
  }
  if (doc.is_object() && doc.contains("plan")) doc = doc["plan"];
  if (!doc.is_array()) throw Error(ErrorKind::plan_validation, "planner output must be a plan array");
  std::vector<PlanItem> items;
  for (const auto& it : doc) {
    if (!it.is_object() || !it.contains("step") || !it["step"].is_number_integer() || !it.contains("tool") ||
        !it["tool"].is_string())
      throw Error(ErrorKind::plan_validation, "malformed plan item: " + it.dump());
    PlanItem p;
    p.step = it["step"].get<int>();
    p.tool = it["tool"].get<std::string>();
    if (it.contains("args")) {
      if (!it["args"].is_object()) throw Error(ErrorKind::plan_validation, "args must be an object");
      for (const auto& [k, v] : it["args"].items())
        p.args[k] = v.is_string() ? v.get<std::string>() : v.dump();
    }
    items.push_back(std::move(p));
  }
  return graph_from_plan_items(r.task_id, items);
}

TaskGraph plan(Planner& planner, const PlanRequest& request, const ToolRegistry& catalog,
               const ProfileRegistry& profiles) {
  auto g = planner.plan(request);
  g.task_id = request.task_id;
  validate_plan(g, catalog, profiles);
  return g;
}

void validate_plan(const TaskGraph& g, const ToolRegistry& catalog, const ProfileRegistry& profiles) {
  g.validate(&catalog, &profiles);
  // references are resolved at run time; check them as typed placeholders
  for (const auto& s : g.steps) {
    if (s.tool.rfind(kAgentToolPrefix, 0) == 0) continue;
    auto schema = catalog.descriptor(s.tool).arg_schema;
    ArgMap probe = s.args;
    for (auto& [k, v] : probe) {
      if (arg_references({{k, v}}).empty() || !schema.count(k)) continue;
      const auto& t = schema.at(k).type;
      v = t == "bool" ? "true" : t == "string" ? "ref" : "0";
    }
    try {
      catalog.validate_args(s.tool, probe);
    } catch (const Error& e) {
      throw Error(ErrorKind::plan_validation, s.step_id + ": " + e.what());
    }
  }
}

namespace {

void expand(Planner& planner, const PlanRequest& request, const ProfileRegistry& profiles, int depth,
            int max_depth, std::vector<PlanItem>& out) {
  auto g = planner.plan(request);
  for (const auto& s : g.steps) {
    if (s.tool.rfind(kAgentToolPrefix, 0) == 0) {
      auto who = s.tool.substr(kAgentToolPrefix.size());
      if (depth < max_depth && profiles.has(who)) {
        PlanRequest nested;
        nested.task_id = request.task_id + "/" + s.step_id;
        nested.utterance = request.utterance;
        nested.profile = profiles.get(who);
        nested.context_args = s.args;
        expand(planner, nested, profiles, depth + 1, max_depth, out);
        continue;
      }
    }
    out.push_back(PlanItem{static_cast<int>(out.size()) + 1, s.tool, s.args});
  }
}

}  // namespace

std::vector<PlanItem> plan_skeleton(Planner& planner, const PlanRequest& request,
                                    const ProfileRegistry& profiles, int max_depth) {
  std::vector<PlanItem> out;
  expand(planner, request, profiles, 0, max_depth, out);
  return out;
}

// ---------------------------------------------------------------------------
// execution

std::string_view to_string(TaskStatus s) {
  switch (s) {
    case TaskStatus::running: return "running";
    case TaskStatus::suspended: return "suspended";
    case TaskStatus::succeeded: return "success";
    case TaskStatus::partial_failure: return "partial-failure";
    case TaskStatus::failed: return "failure";
    case TaskStatus::abandoned: return "abandoned";
  }
  return "running";
}

Millis ExecutionTrace::critical_path() const {
  TaskGraph g;
  g.steps = steps;
  g.edges = edges;
  std::map<std::string, Millis> finish;
  Millis best = 0;
  for (const auto& id : g.topological_order()) {
    const auto* s = g.find(id);
    Millis dur = (s->started_at >= 0 && s->ended_at >= s->started_at) ? s->ended_at - s->started_at : 0;
    Millis start = 0;
    for (const auto& p : g.parents(id)) start = std::max(start, finish[p]);
    finish[id] = start + dur;
    best = std::max(best, finish[id]);
  }
  return best;
}

void to_json(json& j, const ExecutionTrace& t) {
  json edges = json::array();
  for (const auto& [a, b] : t.edges) edges.push_back({a, b});
  json ctx = json::array();
  for (const auto& [a, b] : t.context) ctx.push_back({{"step_id", a}, {"summary", b}});
  json cons = json::array();
  for (const auto& c : t.constraints) cons.push_back(c.describe());
  json inv = json::array();
  for (const auto& i : t.invocations) inv.push_back({{"tool", i.tool}, {"args", i.args}});
  j = json{{"task_id", t.task_id},
           {"profile_id", t.profile_id},
           {"status", to_string(t.status)},
           {"steps", t.steps},
           {"edges", edges},
           {"context", ctx},
           {"constraints", cons},
           {"constraint_log", t.constraint_log},
           {"invocations", inv},
           {"started_at", t.started_at},
           {"ended_at", t.ended_at}};
}

TaskRun::TaskRun(SlowTrack& track, TaskGraph graph, std::string profile_id,
                 std::vector<Constraint> constraints, int depth, TaskHooks hooks)
    : track_(track), graph_(std::move(graph)), depth_(depth), hooks_(std::move(hooks)) {
  trace_.task_id = graph_.task_id;
  trace_.profile_id = std::move(profile_id);
  trace_.constraints = std::move(constraints);
  trace_.edges = graph_.edges;
  trace_.steps = graph_.steps;
}

void TaskRun::sync() { trace_.steps = graph_.steps; }

json TaskRun::plan_snapshot() const {
  json arr = json::array();
  for (const auto& s : graph_.steps) {
    json j{{"step_id", s.step_id}, {"tool", s.tool}, {"state", to_string(s.state)}};
    if (s.result) j["summary"] = s.result->summary;
    if (!s.failure.empty()) j["failure"] = s.failure;
    arr.push_back(std::move(j));
  }
  return arr;
}

void TaskRun::start() {
  trace_.started_at = track_.clock().now();
  trace_.status = TaskStatus::running;
  pump();
}

void TaskRun::pump() {
  if (finished_) return;
  const int cap = std::max(1, track_.config().concurrency_cap);
  for (auto& s : graph_.steps) {
    if (running_ >= cap) break;
    if (s.state != StepState::pending) continue;
    auto ps = graph_.parents(s.step_id);
    if (std::all_of(ps.begin(), ps.end(),
                    [&](const std::string& p) { return graph_.find(p)->state == StepState::done; }))
      launch(s);
  }
  if (running_ > 0) return;
  bool all_terminal = std::all_of(graph_.steps.begin(), graph_.steps.end(), [](const PlanStep& s) {
    return s.state == StepState::done || s.state == StepState::failed || s.state == StepState::skipped;
  });
  if (all_terminal) finish();
}

void TaskRun::launch(PlanStep& step) {
  step.state = StepState::running;
  step.started_at = track_.clock().now();
  ++running_;
  sync();
  if (hooks_.on_step_started) hooks_.on_step_started(*this, step);
  dispatch_step(step.step_id);
}

std::optional<std::string> TaskRun::resolve_args(const PlanStep& step, ArgMap& out) const {
  out = step.args;
  for (auto& [k, v] : out) {
    std::smatch m;
    std::string raw = v;
    if (!std::regex_match(raw, m, ref_pattern())) continue;
    auto it = outputs_.find(m[1].str());
    if (it == outputs_.end() || !it->second.is_object() || !it->second.contains(m[2].str()))
      return "unresolved reference " + raw;
    const auto& val = it->second[m[2].str()];
    v = val.is_string() ? val.get<std::string>() : val.dump();
  }
  return std::nullopt;
}

void TaskRun::dispatch_step(const std::string& step_id) {
  auto& clock = track_.clock();
  auto* step = graph_.find(step_id);
  int attempt = ++attempts_[step_id];
  auto self = shared_from_this();
  std::string envelope_id = graph_.task_id + "/" + step_id + "#" + std::to_string(attempt);

  ArgMap args;
  if (auto err = resolve_args(*step, args)) {
    clock.after(0, [self, step_id, attempt, msg = *err] {
      self->on_outcome(step_id, attempt, ToolFailure{FailureCause::validity, msg, 0});
    });
    return;
  }

  Millis timeout = track_.config().step_timeout_ms;
  timers_[step_id] = clock.after(timeout, [self, step_id, attempt, timeout] {
    self->on_outcome(step_id, attempt,
                     ToolFailure{FailureCause::timeout,
                                 "no result within " + std::to_string(timeout) + " ms", timeout});
  });

  if (step->tool.rfind(kAgentToolPrefix, 0) == 0) {
    DelegationContract c;
    c.contract_id = envelope_id;
    c.delegate_profile_id = step->tool.substr(kAgentToolPrefix.size());
    std::vector<std::string> parts;
    for (const auto& [k, v] : args) parts.push_back(k + "=" + v);
    c.task_statement = "Shortlist for " + c.delegate_profile_id + " (" + text::join(parts, ", ") + ")";
    c.expected_result_schema = {{"summary", "string"}};
    c.deadline_ms = timeout;
    c.args = args;
    c.depth = depth_;
    Millis issued = clock.now();
    track_.delegator().delegate(c, track_, clock, [self, step_id, attempt, issued, &clock](SubAgentResult r) {
      Millis took = clock.now() - issued;
      if (r.status == SubAgentStatus::ok) {
        ToolResult tr;
        tr.tool_id = self->graph_.find(step_id)->tool;
        tr.payload = std::move(r.payload);
        tr.summary = tr.payload.value("summary", r.summary);
        tr.latency_ms = took;
        self->on_outcome(step_id, attempt, std::move(tr));
      } else {
        FailureCause cause = r.status == SubAgentStatus::timeout   ? FailureCause::timeout
                             : r.status == SubAgentStatus::refused ? FailureCause::refused
                                                                   : FailureCause::error;
        self->on_outcome(step_id, attempt, ToolFailure{cause, r.message, took});
      }
    });
    return;
  }

  trace_.invocations.push_back({step->tool, args});
  ExecutionEnvelope env;
  env.envelope_id = envelope_id;
  env.tool_id = step->tool;
  env.args = std::move(args);
  for (const auto& c : trace_.constraints) env.context_slice.push_back(c.describe());
  env.issued_at = clock.now();
  track_.tools().invoke(env, clock, [self, step_id, attempt](ToolOutcome o) {
    self->on_outcome(step_id, attempt, std::move(o));
  });
}

void TaskRun::on_outcome(const std::string& step_id, int attempt, ToolOutcome outcome) {
  if (finished_) return;
  auto* step = graph_.find(step_id);
  if (!step || step->state != StepState::running || attempts_[step_id] != attempt) return;
  if (clarification_ && clarification_->step_id == step_id) return;
  auto t = timers_.find(step_id);
  if (t != timers_.end()) {
    track_.clock().cancel(t->second);
    timers_.erase(t);
  }

  if (auto* f = std::get_if<ToolFailure>(&outcome)) {
    fail(*step, std::string(to_string(f->cause)) + ": " + f->message);
  } else {
    auto result = std::get<ToolResult>(std::move(outcome));
    if (step->tool.rfind(kAgentToolPrefix, 0) == 0 && result.payload.is_object() &&
        result.payload.contains("invocations")) {
      for (const auto& inv : result.payload["invocations"])
        trace_.invocations.push_back({inv.at("tool").get<std::string>(), inv.at("args").get<ArgMap>()});
      result.payload.erase("invocations");
    }
    if (!process_candidates(*step, result)) return;
    complete(*step, std::move(result));
  }
  pump();
}

bool TaskRun::process_candidates(PlanStep& step, ToolResult& result) {
  auto& p = result.payload;
  if (!p.is_object() || !p.contains("candidates") || !p["candidates"].is_array()) return true;
  auto all = candidates_from_json(p["candidates"]);
  if (all.empty()) return true;

  bool relaxed = relaxed_.count(step.step_id) > 0;
  std::vector<Candidate> kept = relaxed ? all : apply_constraints(all, trace_.constraints);
  if (!relaxed)
    for (const auto& c : all)
      if (std::find(kept.begin(), kept.end(), c) == kept.end())
        for (const auto& k : trace_.constraints)
          if (k.violated_by(c)) {
            trace_.constraint_log.push_back(k.describe() + " removed " + c.name);
            break;
          }

  if (kept.empty()) {
    std::vector<std::string> names;
    for (const auto& k : trace_.constraints) names.push_back(k.describe());
    suspend(step, result, "no-candidates",
            "None of the " + std::to_string(all.size()) + " options fit your preferences (" +
                text::join(names, ", ") + "). Should I ignore them for this request?");
    return false;
  }

  auto ranked = kept;
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
  const auto& cfg = track_.config();
  if (!relaxed && ranked.size() > cfg.ambiguity_min_candidates &&
      ranked[0].score - ranked[1].score < cfg.ambiguity_margin) {
    auto about = step.args.count("query") ? step.args.at("query") : step.tool;
    suspend(step, result, "ambiguous",
            "I found " + std::to_string(ranked.size()) + " close matches for '" + about +
                "'. Which one do you mean? A detail like the topic or where you saw it would help.");
    return false;
  }

  auto before = all.front().name;
  auto chosen = kept.front().name;
  p["candidates"] = candidates_to_json(kept);
  p["selection"] = chosen;
  if (before != chosen) {
    auto summary = p.value("summary", result.summary);
    for (auto pos = summary.find(before); pos != std::string::npos; pos = summary.find(before, pos + chosen.size()))
      summary.replace(pos, before.size(), chosen);
    p["summary"] = summary;
  }
  result.summary = p.value("summary", result.summary);
  return true;
}

void TaskRun::suspend(PlanStep& step, ToolResult result, std::string reason, std::string question) {
  parked_[step.step_id] = std::move(result);
  clarification_ = ClarificationRequest{graph_.task_id, step.step_id, std::move(question), std::move(reason)};
  trace_.status = TaskStatus::suspended;
  sync();
  if (hooks_.on_clarification) hooks_.on_clarification(*this, *clarification_);
}

void TaskRun::resume(const std::string& answer) {
  if (!clarification_) throw Error(ErrorKind::invalid_argument, "task has no pending clarification");
  auto req = *clarification_;
  clarification_.reset();
  trace_.status = TaskStatus::running;
  auto* step = graph_.find(req.step_id);
  step->args["clarification"] = answer;
  sync();

  bool takes_answer = false;
  if (track_.tools().has(step->tool)) takes_answer = track_.tools().descriptor(step->tool).arg_schema.count("clarification") > 0;
  else if (step->tool.rfind(kAgentToolPrefix, 0) == 0) takes_answer = true;
  if (req.reason == "ambiguous" && takes_answer) {
    dispatch_step(step->step_id);
    return;
  }

  static const std::regex yes("\\b(yes|yeah|yep|ok|okay|sure|fine|go ahead|ignore|relax)\\b");
  auto low = text::lower(answer);
  if (std::regex_search(low, yes)) {
    relaxed_.insert(step->step_id);
    trace_.constraint_log.push_back("constraints waived for " + step->step_id);
    auto result = parked_[step->step_id];
    if (process_candidates(*step, result)) complete(*step, std::move(result));
  } else {
    fail(*step, "refused: no acceptable candidates");
  }
  pump();
}

void TaskRun::abandon() {
  if (!clarification_) return;
  auto* step = graph_.find(clarification_->step_id);
  clarification_.reset();
  abandoned_ = true;
  trace_.status = TaskStatus::running;
  fail(*step, "abandoned: clarification not answered");
  pump();
}

void TaskRun::complete(PlanStep& step, ToolResult result) {
  step.state = StepState::done;
  step.ended_at = track_.clock().now();
  outputs_[step.step_id] = result.payload;
  trace_.context.emplace_back(step.step_id, result.summary);
  step.result = std::move(result);
  --running_;
  sync();
  if (hooks_.on_step_terminal) hooks_.on_step_terminal(*this, step);
}

void TaskRun::fail(PlanStep& step, std::string cause) {
  step.state = StepState::failed;
  step.ended_at = track_.clock().now();
  step.failure = std::move(cause);
  trace_.context.emplace_back(step.step_id, "failed: " + step.failure);
  --running_;
  skip_descendants(step.step_id);
  sync();
  if (hooks_.on_step_terminal) hooks_.on_step_terminal(*this, step);
}

void TaskRun::skip_descendants(const std::string& step_id) {
  std::deque<std::string> q{step_id};
  while (!q.empty()) {
    auto id = q.front();
    q.pop_front();
    for (const auto& c : graph_.children(id)) {
      auto* s = graph_.find(c);
      if (s->state != StepState::pending) continue;
      s->state = StepState::skipped;
      s->failure = "skipped: depends on " + step_id;
      q.push_back(c);
    }
  }
}

void TaskRun::finish() {
  finished_ = true;
  for (auto& [_, id] : timers_) track_.clock().cancel(id);
  timers_.clear();
  trace_.ended_at = track_.clock().now();
  sync();
  auto done = std::count_if(graph_.steps.begin(), graph_.steps.end(),
                            [](const PlanStep& s) { return s.state == StepState::done; });
  if (abandoned_) trace_.status = TaskStatus::abandoned;
  else if (done == static_cast<long>(graph_.steps.size())) trace_.status = TaskStatus::succeeded;
  else if (done == 0) trace_.status = TaskStatus::failed;
  else trace_.status = TaskStatus::partial_failure;
  if (hooks_.on_finished) hooks_.on_finished(trace_);
}

// ---------------------------------------------------------------------------
// generation

namespace {

std::string step_label(const PlanStep& s) {
  if (s.tool.rfind(kAgentToolPrefix, 0) == 0) return s.tool.substr(kAgentToolPrefix.size());
  return s.tool;
}

}  // namespace

Deliverable generate(const ExecutionTrace& trace, const std::string& modality_hint) {
  Deliverable d;
  d.status = trace.status;
  for (const auto& s : trace.steps) {
    if (s.state == StepState::done) d.completed.push_back(s.result ? s.result->summary : step_label(s));
    else if (s.state == StepState::failed) d.failed.push_back(step_label(s) + " (" + s.failure + ")");
    else if (s.state == StepState::skipped) d.skipped.push_back(step_label(s));
  }

  std::string out;
  if (modality_hint == "visual") out += "[visual card]\n";
  switch (trace.status) {
    case TaskStatus::succeeded: out += "Here is what I prepared for you:"; break;
    case TaskStatus::partial_failure: out += "I finished part of your request:"; break;
    case TaskStatus::abandoned: out += "I set this request aside since the open question was not answered."; break;
    default: out += "Sorry, I could not complete your request."; break;
  }
  for (const auto& c : d.completed) out += "\n- " + c;
  if (!d.failed.empty()) {
    out += "\nNot completed:";
    for (const auto& f : d.failed) out += "\n- " + f;
  }
  if (!d.skipped.empty()) out += "\nSkipped because an earlier step failed: " + text::join(d.skipped, ", ");
  d.text = std::move(out);
  return d;
}

// ---------------------------------------------------------------------------

SlowTrack::SlowTrack(Scheduler& clock, ToolRegistry& tools, ProfileRegistry& profiles,
                     std::shared_ptr<Planner> planner, ExecutorConfig config, DelegationLimits limits)
    : clock_(clock),
      tools_(tools),
      profiles_(profiles),
      planner_(planner ? std::move(planner) : std::make_shared<TemplatePlanner>()),
      config_(config),
      delegator_(limits) {}

std::shared_ptr<TaskRun> SlowTrack::start(TaskGraph graph, const std::string& profile_id,
                                          std::vector<Constraint> constraints, TaskHooks hooks, int depth) {
  auto run = std::make_shared<TaskRun>(*this, std::move(graph), profile_id, std::move(constraints), depth,
                                       std::move(hooks));
  run->start();
  return run;
}

bool SlowTrack::has_profile(const std::string& profile_id) const { return profiles_.has(profile_id); }

void SlowTrack::run(const DelegationContract& contract, Scheduler& clock,
                    std::function<void(SubAgentResult)> done) {
  if (profiles_.stalled(contract.delegate_profile_id)) return;
  PlanRequest req;
  req.task_id = contract.contract_id;
  req.utterance = contract.task_statement;
  req.profile = profiles_.get(contract.delegate_profile_id);
  req.context_args = contract.args;
  TaskGraph g;
  try {
    g = plan(*planner_, req, tools_, profiles_);
  } catch (const Error& e) {
    clock.after(0, [done, msg = std::string(e.what())] {
      done(SubAgentResult{SubAgentStatus::failed, json(nullptr), "", msg});
    });
    return;
  }
  TaskHooks hooks;
  hooks.on_finished = [done](const ExecutionTrace& t) {
    SubAgentResult r;
    r.status = t.status == TaskStatus::succeeded ? SubAgentStatus::ok : SubAgentStatus::failed;
    json payload = json::object();
    for (const auto& s : t.steps)
      if (s.state == StepState::done && s.result && s.result->payload.is_object())
        payload.update(s.result->payload);
    json inv = json::array();
    for (const auto& i : t.invocations) inv.push_back({{"tool", i.tool}, {"args", i.args}});
    payload["invocations"] = inv;
    r.payload = std::move(payload);
    r.summary = generate(t).text;
    if (r.status != SubAgentStatus::ok) r.message = r.summary;
    done(std::move(r));
  };
  start(std::move(g), contract.delegate_profile_id, {}, std::move(hooks), contract.depth + 1);
}

}  // namespace dualtrack
