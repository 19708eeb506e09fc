#include "dualtrack/engine.hpp"

#include <algorithm>

namespace dualtrack {

namespace {

PlanRequest agent_request(const std::string& task_id, const std::string& utterance, const AgentProfile& profile) {
  static const ReferenceClassifier keywords([](const std::string&) { return std::string(); });
  PlanRequest req;
  req.task_id = task_id;
  req.utterance = utterance;
  req.profile = profile;
  req.extra_tools = keywords.tool_hits(utterance);
  return req;
}

// Agent decisions without a plan get the planner's skeleton, so every
// decision names the tools it expects to use.
class SkeletonFill final : public Classifier {
 public:
  SkeletonFill(std::shared_ptr<Classifier> inner, Planner& planner, const ProfileRegistry& profiles)
      : inner_(std::move(inner)), planner_(planner), profiles_(profiles) {}

  RoutingDecision classify(const RequestObject& request, const ContextBundle& context) override {
    auto d = inner_->classify(request, context);
    if (d.mode != Mode::agent || d.plan) return d;
    try {
      auto profile = dispatch(d, request.utterance, profiles_);
      auto items = plan_skeleton(planner_, agent_request("skeleton", request.utterance, profile), profiles_);
      if (!items.empty()) d.plan = std::move(items);
    } catch (const Error&) {
    }
    return d;
  }

 private:
  std::shared_ptr<Classifier> inner_;
  Planner& planner_;
  const ProfileRegistry& profiles_;
};

}  // namespace

AgentMemory default_persona() {
  AgentMemory m;
  m.persona_id = "default";
  m.persona = Persona{"Aria", "a warm, attentive digital companion", {"warm", "curious"}};
  return m;
}

void to_json(json& j, const TurnRecord& r) {
  j = json{{"session_id", r.session_id},
           {"index", r.index},
           {"started_at", r.started_at},
           {"utterance", r.request.utterance},
           {"decision", to_wire(r.decision)},
           {"clarification_answer", r.clarification_answer},
           {"first_kind", to_string(r.first_kind)},
           {"status", r.status}};
  j["profile_id"] = r.profile_id ? json(*r.profile_id) : json(nullptr);
  j["task_id"] = r.task_id ? json(*r.task_id) : json(nullptr);
  j["ttft_ms"] = r.ttft() ? json(*r.ttft()) : json(nullptr);
  j["e2e_ms"] = r.e2e() ? json(*r.e2e()) : json(nullptr);
  if (r.trace) j["trace"] = *r.trace;
}

Engine::Engine(EngineConfig config, EngineParts parts)
    : config_(std::move(config)),
      tools_(config_.seed),
      profiles_(ProfileRegistry::defaults()),
      perception_(config_.perception, parts.perceptor) {
  register_builtin_tools(tools_);
  for (const auto& [id, model] : config_.tool_latency) tools_.set_latency(id, model);
  std::optional<std::filesystem::path> dir;
  if (config_.log_dir) dir = *config_.log_dir;
  store_ = std::make_unique<SessionStore>(dir);
  if (!store_->has_persona("default")) store_->register_persona(default_persona());
  bus_ = std::make_unique<EventBus>(*store_);
  integrator_ = std::make_unique<Integrator>(*store_, config_.integration);
  integrator_->set_on_applied([this](const StateUpdateEvent& e, const TranscriptEntry&) {
    if (!is_terminal(e.kind)) return;
    auto it = task_turn_.find(e.task_id);
    if (it == task_turn_.end()) return;
    auto status = e.payload.is_object() ? e.payload.value("status", std::string("failure")) : "failure";
    for (auto& r : turns_)
      if (r.task_id == e.task_id && !r.completed_at) {
        r.completed_at = clock_.now();
        r.status = r.clarification_answer ? "answered" : status;
      }
  });
  slow_ = std::make_unique<SlowTrack>(clock_, tools_, profiles_, parts.planner, config_.executor,
                                      config_.delegation);
  auto classifier = parts.classifier;
  if (!classifier)
    classifier = std::make_shared<ReferenceClassifier>(
        [this](const std::string& utterance) { return dispatch(utterance, profiles_).profile_id; });
  router_ = std::make_shared<ConversationRouter>(
      std::make_shared<SkeletonFill>(classifier, slow_->planner(), profiles_));
  responder_ = parts.responder ? parts.responder
                               : std::make_shared<TemplateResponder>(config_.responder_latency_ms);

  // sessions restored from the log keep their turn numbering, and the clock
  // resumes after their last entry
  Millis last = 0;
  for (const auto& sid : store_->session_ids()) {
    auto snap = store_->snapshot(sid);
    int users = 0;
    for (const auto& e : snap.transcript) {
      users += e.role == Role::user;
      last = std::max(last, e.timestamp);
    }
    turn_counter_[sid] = users;
    subscriptions_[sid] = bus_->subscribe(sid, [this](const StateUpdateEvent& e) { integrator_->integrate(e); });
  }
  if (last > 0) clock_.run_until(last);
}

Engine::~Engine() {
  for (const auto& [_, id] : subscriptions_) bus_->unsubscribe(id);
}

std::string Engine::create_session(const std::string& user_id, const std::string& persona_id) {
  auto s = store_->create_session(user_id, persona_id, clock_.now());
  subscriptions_[s.session_id] =
      bus_->subscribe(s.session_id, [this](const StateUpdateEvent& e) { integrator_->integrate(e); });
  return s.session_id;
}

void Engine::emit_to_bus(const StateUpdateEvent& e) { bus_->emit(e); }

void Engine::emit(const std::string& session_id, const std::string& task_id, EventKind kind, json payload) {
  StateUpdateEvent e;
  e.causal_seq = ++causal_[task_id];
  e.event_id = task_id + "#" + std::to_string(e.causal_seq);
  e.session_id = session_id;
  e.task_id = task_id;
  e.kind = kind;
  e.payload = std::move(payload);
  e.emitted_at = clock_.now();
  if (sink_) sink_(e);
  else emit_to_bus(e);
}

void Engine::append_assistant(std::size_t turn, const ResponsePlan& plan, EntryKind kind, bool first) {
  auto& rec = turns_[turn];
  EntryDraft d;
  d.role = Role::assistant;
  d.kind = kind;
  d.content = plan.text;
  d.timestamp = plan.produced_at;
  store_->append_transcript(rec.session_id, d);
  if (first) {
    rec.first_response_at = plan.produced_at;
    rec.first_kind = plan.kind;
  }
}

std::size_t Engine::submit_turn(const std::string& session_id, TurnInput input) {
  if (!store_->has_session(session_id)) throw Error(ErrorKind::not_found, "unknown session: " + session_id);
  const Millis t0 = clock_.now();
  auto perceived = perception_.perceive(input.payloads, session_id);
  auto context = store_->read_context(session_id, config_.context_budget_tokens);

  EntryDraft user;
  user.role = Role::user;
  user.kind = EntryKind::turn;
  user.content = perceived.request.utterance;
  user.timestamp = t0;
  store_->append_transcript(session_id, user);

  const std::size_t idx = turns_.size();
  TurnRecord rec;
  rec.session_id = session_id;
  rec.index = turn_counter_[session_id]++;
  rec.started_at = t0;
  rec.request = perceived.request;
  rec.decision = router_->classify(rec.request, context);
  const Millis routed_at = t0 + perceived.latency_ms + config_.router_latency_ms;
  const Millis budget = config_.ttft_budget_ms;

  // A suspended task either takes this turn as its answer or counts it
  // toward abandonment.
  std::optional<std::string> resume_task;
  if (auto pc = clarifications_.find(session_id); pc != clarifications_.end()) {
    bool bound = input.answers_task && *input.answers_task == pc->second.task_id;
    if (bound || (!input.answers_task && rec.decision.mode == Mode::chat)) {
      resume_task = pc->second.task_id;
      clarifications_.erase(pc);
    } else if (++pc->second.unanswered_turns >= config_.executor.clarification_turn_limit) {
      auto run = tasks_.at(pc->second.task_id);
      clarifications_.erase(pc);
      clock_.at(t0, [run] { run->abandon(); });
    }
  }
  turns_.push_back(std::move(rec));
  auto& r = turns_.back();

  if (resume_task) {
    r.clarification_answer = true;
    r.task_id = *resume_task;
    r.profile_id = tasks_.at(*resume_task)->trace().profile_id;
    integrator_->hold_task(*resume_task);
    auto out = enforce_budget(t0, budget, routed_at,
                              ResponderReply{"Thanks, that helps. Picking up where I left off.",
                                             config_.bridge_latency_ms},
                              ResponseKind::bridge);
    clock_.at(out.first.produced_at, [this, idx, out, id = *resume_task] {
      append_assistant(idx, out.first, EntryKind::bridge, true);
      if (out.follow_up) append_assistant(idx, *out.follow_up, EntryKind::bridge, false);
      integrator_->release_task(id);
    });
    clock_.at(routed_at, [this, id = *resume_task, answer = r.request.utterance] {
      tasks_.at(id)->resume(answer);
    });
    return idx;
  }

  if (r.decision.mode == Mode::chat) {
    r.status = "chat";
    auto persona = store_->agent_memory(store_->snapshot(session_id).persona_id).persona;
    std::optional<ResponderReply> reply;
    try {
      reply = responder_->respond(ResponderInput{r.request, context, persona});
    } catch (const std::exception&) {
      reply.reset();
    }
    auto out = enforce_budget(t0, budget, routed_at, reply, ResponseKind::direct);
    clock_.at(out.first.produced_at, [this, idx, out] {
      bool direct = out.first.kind == ResponseKind::direct;
      append_assistant(idx, out.first, direct ? EntryKind::turn : EntryKind::bridge, true);
      if (direct || !out.follow_up) turns_[idx].completed_at = out.first.produced_at;
    });
    if (out.follow_up)
      clock_.at(out.follow_up->produced_at, [this, idx, f = *out.follow_up] {
        append_assistant(idx, f, EntryKind::turn, false);
        turns_[idx].completed_at = f.produced_at;
      });
    return idx;
  }

  std::string task_id = session_id + "/t" + std::to_string(r.index);
  r.task_id = task_id;
  task_turn_[task_id] = idx;
  store_->add_pending_task(session_id, task_id);
  integrator_->hold_task(task_id);
  auto ack = bridge(r.request, r.decision);
  auto out = enforce_budget(t0, budget, routed_at, ResponderReply{ack.text, config_.bridge_latency_ms},
                            ResponseKind::bridge);
  clock_.at(out.first.produced_at, [this, idx, out, task_id] {
    append_assistant(idx, out.first, EntryKind::bridge, true);
    if (!out.follow_up) integrator_->release_task(task_id);
  });
  if (out.follow_up)
    clock_.at(out.follow_up->produced_at, [this, idx, f = *out.follow_up, task_id] {
      append_assistant(idx, f, EntryKind::bridge, false);
      integrator_->release_task(task_id);
    });
  clock_.at(routed_at, [this, idx, routed_at] { start_task(idx, routed_at); });
  return idx;
}

void Engine::start_task(std::size_t idx, Millis at) {
  auto& r = turns_[idx];
  const std::string sid = r.session_id;
  const std::string task_id = *r.task_id;
  TaskGraph graph;
  std::string profile_id = "ToolExecutor";
  try {
    if (r.decision.mode == Mode::tool) {
      if (!r.decision.plan || r.decision.plan->empty())
        throw Error(ErrorKind::plan_validation, "tool decision without a plan");
      graph = graph_from_plan_items(task_id, *r.decision.plan);
      validate_plan(graph, tools_, profiles_);
    } else {
      auto profile = dispatch(r.decision, r.request.utterance, profiles_);
      profile_id = profile.profile_id;
      graph = plan(slow_->planner(), agent_request(task_id, r.request.utterance, profile), tools_, profiles_);
    }
  } catch (const Error& e) {
    r.status = "failure";
    clock_.at(at + config_.planner_latency_ms, [this, sid, task_id, msg = std::string(e.what())] {
      emit(sid, task_id, EventKind::failure,
           json{{"text", "Sorry, I could not work out a plan for that (" + msg + ")."},
                {"status", "failure"}});
    });
    return;
  }
  r.profile_id = profile_id;

  bool visual = std::any_of(graph.steps.begin(), graph.steps.end(),
                            [](const PlanStep& s) { return s.tool == "image_gen"; });
  auto constraints = constraints_from_memory(store_->user_memory(store_->snapshot(sid).user_id));

  TaskHooks hooks;
  hooks.on_step_terminal = [this, sid, task_id](const TaskRun& run, const PlanStep& step) {
    emit(sid, task_id, EventKind::progress,
         json{{"step_id", step.step_id}, {"state", to_string(step.state)}, {"plan", run.plan_snapshot()}});
    json record = step;
    auto payload = record.dump();
    store_->add_trace(sid, TraceItem{task_id, step.step_id, payload, estimate_tokens(payload), false, {}});
    if (step.state == StepState::done && step.result &&
        (step.tool == "image_gen" || step.tool == "music_gen"))
      emit(sid, task_id, EventKind::artifact, json{{"text", step.result->summary}, {"step_id", step.step_id}});
  };
  hooks.on_clarification = [this, sid, task_id](const TaskRun& run, const ClarificationRequest& q) {
    clarifications_[sid] = Pending{task_id, 0};
    emit(sid, task_id, EventKind::clarification,
         json{{"text", q.question}, {"step_id", q.step_id}, {"reason", q.reason}, {"plan", run.plan_snapshot()}});
  };
  hooks.on_finished = [this, sid, task_id, visual](const ExecutionTrace& trace) {
    for (auto& t : turns_)
      if (t.task_id == task_id) t.trace = trace;
    if (auto pc = clarifications_.find(sid); pc != clarifications_.end() && pc->second.task_id == task_id)
      clarifications_.erase(pc);
    auto deliverable = generate(trace, visual ? "visual" : "text");
    bool ok = trace.status == TaskStatus::succeeded || trace.status == TaskStatus::partial_failure;
    clock_.after(config_.generator_latency_ms, [this, sid, task_id, ok, d = std::move(deliverable), trace] {
      json steps = json::array();
      for (const auto& s : trace.steps)
        steps.push_back({{"step_id", s.step_id}, {"tool", s.tool}, {"state", to_string(s.state)}});
      emit(sid, task_id, ok ? EventKind::final_result : EventKind::failure,
           json{{"text", d.text}, {"status", to_string(trace.status)}, {"plan", steps}});
    });
  };

  clock_.at(at + config_.planner_latency_ms,
            [this, graph = std::move(graph), profile_id, constraints = std::move(constraints),
             hooks = std::move(hooks), task_id]() mutable {
              tasks_[task_id] = slow_->start(std::move(graph), profile_id, std::move(constraints),
                                             std::move(hooks));
            });
}

std::vector<TurnRecord> Engine::turns(const std::string& session_id) const {
  std::vector<TurnRecord> out;
  for (const auto& t : turns_)
    if (t.session_id == session_id) out.push_back(t);
  return out;
}

std::optional<std::string> Engine::pending_clarification(const std::string& session_id) const {
  auto it = clarifications_.find(session_id);
  if (it == clarifications_.end()) return std::nullopt;
  return it->second.task_id;
}

std::shared_ptr<TaskRun> Engine::task(const std::string& task_id) const {
  auto it = tasks_.find(task_id);
  return it == tasks_.end() ? nullptr : it->second;
}

}  // namespace dualtrack
