#include "dualtrack/service.hpp"

#include <httplib.h>

namespace dualtrack {

std::string sse_frame(const std::string& event, const json& data, std::optional<std::int64_t> id) {
  std::string out;
  if (id) out += "id: " + std::to_string(*id) + "\n";
  out += "event: " + event + "\n";
  out += "data: " + data.dump() + "\n\n";
  return out;
}

namespace {

int status_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::not_found: return 404;
    case ErrorKind::closed:
    case ErrorKind::conflict: return 409;
    case ErrorKind::invalid_argument:
    case ErrorKind::invalid_turn:
    case ErrorKind::schema_violation:
    case ErrorKind::validity:
    case ErrorKind::configuration: return 400;
    default: return 500;
  }
}

std::int64_t parse_seq(const std::string& raw) {
  if (raw.empty()) return 0;
  try {
    std::size_t used = 0;
    auto n = std::stoll(raw, &used);
    if (used != raw.size()) throw std::invalid_argument(raw);
    if (n < 0) throw Error(ErrorKind::invalid_argument, "from_seq must not be negative: " + raw);
    return n;
  } catch (const std::logic_error&) {
    throw Error(ErrorKind::invalid_argument, "from_seq is not an integer: " + raw);
  }
}

}  // namespace

Service::Service(Settings settings, EngineParts parts)
    : settings_(std::move(settings)), engine_(std::make_unique<Engine>(settings_.engine, std::move(parts))) {
  wall_start_ = std::chrono::steady_clock::now();
  virtual_start_ = engine_->now();
}

Service::~Service() { stop(); }

Millis Service::virtual_now() const {
  auto wall = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - wall_start_).count();
  return virtual_start_ + static_cast<Millis>(wall * settings_.time_scale);
}

void Service::tick() {
  auto t = virtual_now();
  std::lock_guard g(mu_);
  if (t > engine_->now()) engine_->run_until(t);
}

ApiResponse Service::error(const std::exception& e) const {
  if (auto* err = dynamic_cast<const Error*>(&e))
    return {status_for(err->kind()), json{{"error", err->what()}, {"kind", to_string(err->kind())}}};
  return {500, json{{"error", e.what()}, {"kind", "internal"}}};
}

void Service::check_open(const std::string& sid) const {
  if (!engine_->store().has_session(sid)) throw Error(ErrorKind::not_found, "unknown session: " + sid);
  if (engine_->store().snapshot(sid).closed) throw Error(ErrorKind::closed, "session is closed: " + sid);
}

ApiResponse Service::health() { return {200, json{{"status", "ok"}, {"virtual_ms", virtual_now()}}}; }

ApiResponse Service::open_session(const json& body) {
  try {
    if (!body.is_object()) throw Error(ErrorKind::invalid_argument, "body must be a JSON object");
    auto user = body.value("user_id", std::string("anonymous"));
    auto persona = body.value("persona_id", std::string("default"));
    std::lock_guard g(mu_);
    if (!engine_->store().has_persona(persona)) throw Error(ErrorKind::not_found, "unknown persona: " + persona);
    auto sid = engine_->create_session(user, persona);
    return {201, json{{"session_id", sid}}};
  } catch (const std::exception& e) {
    return error(e);
  }
}

ApiResponse Service::post_turn(const std::string& sid, const json& body) {
  try {
    if (!body.is_object()) throw Error(ErrorKind::invalid_argument, "body must be a JSON object");
    if (!body.contains("client_turn_id") || !body["client_turn_id"].is_string() ||
        body["client_turn_id"].get<std::string>().empty())
      throw Error(ErrorKind::invalid_argument, "client_turn_id is required");
    auto client_id = body["client_turn_id"].get<std::string>();

    TurnInput in;
    if (body.contains("payloads")) {
      try {
        in.payloads = body["payloads"].get<std::vector<ModalityPayload>>();
      } catch (const json::exception& e) {
        throw Error(ErrorKind::invalid_argument, std::string("bad payloads: ") + e.what());
      }
    } else if (body.contains("text") && body["text"].is_string()) {
      in = text_turn(body["text"].get<std::string>());
    }
    if (body.contains("answers_task") && body["answers_task"].is_string())
      in.answers_task = body["answers_task"].get<std::string>();

    auto t = virtual_now();
    std::lock_guard g(mu_);
    check_open(sid);
    if (auto it = replies_[sid].find(client_id); it != replies_[sid].end()) return {200, it->second};
    if (t > engine_->now()) engine_->run_until(t);
    auto idx = engine_->submit_turn(sid, std::move(in));
    const auto& r = engine_->turns()[idx];
    json reply{{"accepted_at", r.started_at},
               {"turn_index", r.index},
               {"routing", to_wire(r.decision)},
               {"task_id", r.task_id ? json(*r.task_id) : json(nullptr)}};
    replies_[sid][client_id] = reply;
    return {200, reply};
  } catch (const std::exception& e) {
    return error(e);
  }
}

ApiResponse Service::transcript(const std::string& sid, const std::string& from_seq) {
  try {
    auto from = parse_seq(from_seq);
    if (!engine_->store().has_session(sid)) throw Error(ErrorKind::not_found, "unknown session: " + sid);
    return {200, json(engine_->store().transcript(sid, from))};
  } catch (const std::exception& e) {
    return error(e);
  }
}

ApiResponse Service::plan(const std::string& sid) {
  try {
    if (!engine_->store().has_session(sid)) throw Error(ErrorKind::not_found, "unknown session: " + sid);
    return {200, engine_->integrator().plan_view(sid)};
  } catch (const std::exception& e) {
    return error(e);
  }
}

ApiResponse Service::memory(const std::string& sid) {
  try {
    if (!engine_->store().has_session(sid)) throw Error(ErrorKind::not_found, "unknown session: " + sid);
    auto snap = engine_->store().snapshot(sid);
    auto user = engine_->store().user_memory(snap.user_id);
    auto agent = engine_->store().agent_memory(snap.persona_id);
    json history = json::array();
    for (const auto& h : user.history)
      history.push_back({{"nugget_id", h.nugget_id}, {"statement", h.statement}, {"provenance", h.provenance}});
    return {200, json{{"user_id", snap.user_id},
                      {"persona_id", snap.persona_id},
                      {"profile", user.profile},
                      {"history", history},
                      {"nuggets", agent.nuggets}}};
  } catch (const std::exception& e) {
    return error(e);
  }
}

ApiResponse Service::close_session(const std::string& sid) {
  try {
    std::lock_guard g(mu_);
    if (!engine_->store().has_session(sid)) throw Error(ErrorKind::not_found, "unknown session: " + sid);
    engine_->store().close_session(sid);
    return {200, json{{"session_id", sid}, {"closed", true}}};
  } catch (const std::exception& e) {
    return error(e);
  }
}

std::pair<StreamCursor, std::vector<std::string>> Service::open_stream(const std::string& sid,
                                                                       const std::string& from_seq) {
  auto from = parse_seq(from_seq);
  if (!engine_->store().has_session(sid)) throw Error(ErrorKind::not_found, "unknown session: " + sid);
  auto size = static_cast<std::int64_t>(engine_->store().transcript(sid).size());
  if (from > size)
    throw Error(ErrorKind::invalid_argument,
                "from_seq " + std::to_string(from) + " is past the end of the transcript (" + std::to_string(size) + ")");
  StreamCursor cur;
  cur.next_seq = from;
  // state events before the connection are summarized by the plan frame
  cur.next_event = engine_->bus().feed(sid).size();
  std::vector<std::string> frames{sse_frame("plan", engine_->integrator().plan_view(sid))};
  auto more = poll_stream(sid, cur);
  frames.insert(frames.end(), more.begin(), more.end());
  return {cur, frames};
}

std::vector<std::string> Service::poll_stream(const std::string& sid, StreamCursor& cur) {
  std::vector<std::string> frames;
  for (const auto& e : engine_->bus().feed(sid, cur.next_event)) {
    ++cur.next_event;
    frames.push_back(sse_frame("state", json(e)));
  }
  for (const auto& entry : engine_->store().transcript(sid, cur.next_seq)) {
    frames.push_back(sse_frame(entry.kind == EntryKind::clarification ? "clarification" : "entry", json(entry), entry.seq));
    cur.next_seq = entry.seq + 1;
  }
  return frames;
}

void Service::wait_for_news(std::chrono::milliseconds timeout) {
  engine_->store().wait_for_change(engine_->store().version(), timeout);
}

void Service::routes() {
  auto& s = *http_;
  auto reply = [](httplib::Response& res, const ApiResponse& r) {
    res.status = r.status;
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_content(r.body.dump(), "application/json");
  };
  auto body_of = [](const httplib::Request& req) {
    if (req.body.empty()) return json::object();
    auto j = json::parse(req.body, nullptr, false);
    if (j.is_discarded()) return json();  // not an object, rejected by the handler
    return j;
  };
  s.Get("/healthz", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, health()); });
  s.Post("/sessions", [this, reply, body_of](const httplib::Request& req, httplib::Response& res) {
    reply(res, open_session(body_of(req)));
  });
  s.Post(R"(/sessions/([^/]+)/turns)", [this, reply, body_of](const httplib::Request& req, httplib::Response& res) {
    reply(res, post_turn(req.matches[1], body_of(req)));
  });
  s.Get(R"(/sessions/([^/]+)/transcript)", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, transcript(req.matches[1], req.get_param_value("from_seq")));
  });
  s.Get(R"(/sessions/([^/]+)/plan)", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, plan(req.matches[1]));
  });
  s.Get(R"(/sessions/([^/]+)/memory)", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, memory(req.matches[1]));
  });
  s.Delete(R"(/sessions/([^/]+))", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, close_session(req.matches[1]));
  });
  s.Get(R"(/sessions/([^/]+)/stream)", [this](const httplib::Request& req, httplib::Response& res) {
    std::string sid = req.matches[1];
    std::string from = req.get_param_value("from_seq");
    if (from.empty() && req.has_header("Last-Event-ID")) {
      try {
        from = std::to_string(std::stoll(req.get_header_value("Last-Event-ID")) + 1);
      } catch (const std::logic_error&) {
        from = req.get_header_value("Last-Event-ID");  // reported as a bad from_seq
      }
    }
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_header("Cache-Control", "no-cache");
    std::shared_ptr<std::pair<StreamCursor, std::vector<std::string>>> opened;
    std::string failure;
    try {
      opened = std::make_shared<std::pair<StreamCursor, std::vector<std::string>>>(open_stream(sid, from));
    } catch (const std::exception& e) {
      failure = sse_frame("error", json{{"error", e.what()}});
    }
    if (!opened) {
      res.set_content(failure, "text/event-stream");  // error frame, then the response ends
      return;
    }
    res.set_chunked_content_provider("text/event-stream", [this, sid, opened](std::size_t, httplib::DataSink& sink) {
      auto& [cursor, pending] = *opened;
      for (const auto& f : pending)
        if (!sink.write(f.data(), f.size())) return false;
      pending.clear();
      if (!running_) {
        sink.done();
        return true;
      }
      wait_for_news(std::chrono::milliseconds(50));
      pending = poll_stream(sid, cursor);
      if (pending.empty() && !sink.is_writable()) return false;
      return true;
    });
  });
}

int Service::start() {
  if (running_) throw Error(ErrorKind::conflict, "service already running");
  http_ = std::make_unique<httplib::Server>();
  routes();
  int port = settings_.port;
  if (port == 0) {
    port = http_->bind_to_any_port(settings_.host);
    if (port < 0) throw Error(ErrorKind::io, "cannot bind " + settings_.host);
  } else if (!http_->bind_to_port(settings_.host, port)) {
    throw Error(ErrorKind::io, "cannot bind " + settings_.host + ":" + std::to_string(port));
  }
  running_ = true;
  http_thread_ = std::thread([this] { http_->listen_after_bind(); });
  driver_ = std::thread([this] {
    while (running_) {
      tick();
      std::this_thread::sleep_for(std::chrono::milliseconds(2));
    }
  });
  http_->wait_until_ready();
  return port;
}

void Service::stop() {
  if (!running_.exchange(false)) return;
  engine_->store().notify_change();
  if (http_) http_->stop();
  if (http_thread_.joinable()) http_thread_.join();
  if (driver_.joinable()) driver_.join();
}

void Service::wait() {
  while (running_) std::this_thread::sleep_for(std::chrono::milliseconds(100));
}

}  // namespace dualtrack
