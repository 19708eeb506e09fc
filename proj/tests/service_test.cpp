#include <gtest/gtest.h>

#include <httplib.h>

#include <chrono>
#include <sstream>
#include <thread>

#include "dualtrack/config.hpp"
#include "dualtrack/service.hpp"

using namespace dualtrack;
using namespace std::chrono_literals;

namespace {

Settings fast_settings() {
  Settings s;
  s.port = 0;
  s.time_scale = 200;  // 200 virtual ms per wall ms
  return s;
}

// ticks the service until pred holds or the wall deadline passes
template <typename Pred>
bool eventually(Service& svc, Pred pred, std::chrono::milliseconds limit = 5000ms) {
  auto until = std::chrono::steady_clock::now() + limit;
  while (std::chrono::steady_clock::now() < until) {
    svc.tick();
    if (pred()) return true;
    std::this_thread::sleep_for(2ms);
  }
  return false;
}

bool has_deliverable(const json& transcript) {
  for (const auto& e : transcript)
    if (e["kind"] == "deliverable") return true;
  return false;
}

}  // namespace

// --- config ----------------------------------------------------------------

TEST(Config, ParsesKeysCommentsAndToolLatency) {
  std::istringstream in(R"(
# comment line
seed = 7
perception = monolithic   # trailing comment
ttft_budget_ms = 400
concurrency_cap = 2
tool.weather.latency = lognormal:5.5:1.2
time_scale = 10
)");
  auto s = parse_settings(in);
  EXPECT_EQ(s.engine.seed, 7u);
  EXPECT_EQ(s.engine.perception.paradigm, PerceptionParadigm::monolithic);
  EXPECT_EQ(s.engine.ttft_budget_ms, 400);
  EXPECT_EQ(s.engine.executor.concurrency_cap, 2);
  EXPECT_EQ(s.engine.tool_latency.at("weather").kind, LatencyKind::lognormal);
  EXPECT_DOUBLE_EQ(s.time_scale, 10);
}

TEST(Config, ErrorsCarryLineNumbers) {
  auto fails_at = [](const std::string& text) -> std::string {
    std::istringstream in(text);
    try {
      parse_settings(in);
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::configuration);
      return e.what();
    }
    return "";
  };
  EXPECT_NE(fails_at("seed = 1\nbogus_key = 3\n").find("line 2"), std::string::npos);
  EXPECT_NE(fails_at("ttft_budget_ms = fast\n").find("line 1"), std::string::npos);
  EXPECT_NE(fails_at("perception = telepathic\n").find("line 1"), std::string::npos);
  EXPECT_NE(fails_at("just words\n").find("line 1"), std::string::npos);
  EXPECT_NE(fails_at("tool.weather.latency = gaussian:1\n").find("line 1"), std::string::npos);
  EXPECT_THROW(load_settings("/nonexistent/dualtrack.conf"), Error);
}

TEST(Config, EveryListedKeyIsAccepted) {
  auto keys = setting_keys();
  EXPECT_GT(keys.size(), 20u);
  for (const auto& [k, help] : keys) {
    EXPECT_FALSE(help.empty()) << k;
  }
  Settings s;
  EXPECT_NO_THROW(set_setting(s, "classifier", "model"));
  EXPECT_THROW(set_setting(s, "classifier", "oracle"), Error);
}

TEST(Config, ExternalBackendsNeedUrls) {
  Settings s;
  EXPECT_NO_THROW(make_parts(s));
  s.classifier = "model";
  EXPECT_THROW(make_parts(s), Error);
  s.model_url = "http://127.0.0.1:1";
  auto parts = make_parts(s);
  EXPECT_TRUE(parts.classifier);
  EXPECT_FALSE(parts.responder);
  Settings p;
  p.perceptor = "http";
  EXPECT_THROW(make_parts(p), Error);
}

// --- model backend against a local mock endpoint ----------------------------

TEST(Backend, HttpCompletionSpeaksChatCompletions) {
  httplib::Server mock;
  json seen;
  mock.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    seen = json::parse(req.body);
    res.set_content(json{{"choices", {{{"message", {{"content", "hi back"}}}}}}}.dump(), "application/json");
  });
  mock.Post("/caption", [](const httplib::Request& req, httplib::Response& res) {
    auto frame = json::parse(req.body);
    res.set_content(json{{"caption", "a person " + frame.value("action", std::string{})}}.dump(), "application/json");
  });
  int port = mock.bind_to_any_port("127.0.0.1");
  std::thread t([&] { mock.listen_after_bind(); });
  mock.wait_until_ready();
  std::string base = "http://127.0.0.1:" + std::to_string(port);

  HttpCompletion c(base, "tiny");
  EXPECT_EQ(c.complete("hello"), "hi back");
  EXPECT_EQ(seen["model"], "tiny");
  EXPECT_EQ(seen["messages"][0]["content"], "hello");

  HttpPerceptor p(base);
  EXPECT_EQ(p.caption({{"subject", "user"}, {"action", "waving"}}), "a person waving");

  mock.stop();
  t.join();
  EXPECT_THROW(HttpCompletion(base, "tiny").complete("x"), Error);
}

// --- service API (in process) ------------------------------------------------

TEST(Service, SessionLifecycle) {
  Service svc(fast_settings());
  auto opened = svc.open_session(json{{"user_id", "alice"}});
  ASSERT_EQ(opened.status, 201);
  std::string sid = opened.body["session_id"];

  EXPECT_EQ(svc.open_session(json{{"persona_id", "nobody"}}).status, 404);
  EXPECT_EQ(svc.open_session(json::array()).status, 400);

  auto turn = svc.post_turn(sid, json{{"client_turn_id", "c1"}, {"text", "Plan a trip to Tokyo"}});
  ASSERT_EQ(turn.status, 200);
  EXPECT_EQ(turn.body["routing"]["mode"], "agent");
  EXPECT_TRUE(turn.body["task_id"].is_string());
  // idempotent replay
  auto again = svc.post_turn(sid, json{{"client_turn_id", "c1"}, {"text", "Plan a trip to Tokyo"}});
  EXPECT_EQ(again.body, turn.body);
  EXPECT_EQ(svc.post_turn(sid, json{{"text", "no id"}}).status, 400);
  EXPECT_EQ(svc.post_turn(sid, json{{"client_turn_id", "c2"}, {"text", "   "}}).status, 400);
  EXPECT_EQ(svc.post_turn("s-999999", json{{"client_turn_id", "c3"}, {"text", "hi"}}).status, 404);

  ASSERT_TRUE(eventually(svc, [&] { return has_deliverable(svc.transcript(sid).body); }));
  auto tr = svc.transcript(sid).body;
  EXPECT_EQ(tr[0]["role"], "user");
  EXPECT_EQ(tr[1]["kind"], "bridge");
  EXPECT_EQ(svc.transcript(sid, "2").body.size(), tr.size() - 2);
  EXPECT_EQ(svc.transcript(sid, "x").status, 400);
  EXPECT_EQ(svc.transcript(sid, "-1").status, 400);

  auto plan = svc.plan(sid);
  EXPECT_EQ(plan.status, 200);
  EXPECT_TRUE(plan.body.contains(turn.body["task_id"].get<std::string>()));
  EXPECT_EQ(svc.memory(sid).body["user_id"], "alice");
  EXPECT_EQ(svc.health().body["status"], "ok");

  EXPECT_EQ(svc.close_session(sid).status, 200);
  EXPECT_EQ(svc.post_turn(sid, json{{"client_turn_id", "c9"}, {"text", "hi"}}).status, 409);
  EXPECT_EQ(svc.transcript(sid).status, 200);  // still readable
}

TEST(Service, StreamFramesReplayAndFollow) {
  Service svc(fast_settings());
  std::string sid = svc.open_session(json::object()).body["session_id"];
  svc.post_turn(sid, json{{"client_turn_id", "a"}, {"text", "hello"}});
  ASSERT_TRUE(eventually(svc, [&] { return svc.transcript(sid).body.size() >= 2; }));

  auto [cursor, frames] = svc.open_stream(sid, "0");
  ASSERT_GE(frames.size(), 3u);
  EXPECT_EQ(frames[0].rfind("event: plan\n", 0), 0u);
  EXPECT_EQ(frames[1].rfind("id: 0\nevent: entry\n", 0), 0u);

  svc.post_turn(sid, json{{"client_turn_id", "b"}, {"text", "what's the weather in Beijing"}});
  std::vector<std::string> later;
  ASSERT_TRUE(eventually(svc, [&] {
    for (auto& f : svc.poll_stream(sid, cursor)) later.push_back(f);
    return std::any_of(later.begin(), later.end(),
                       [](const std::string& f) { return f.find("\"deliverable\"") != std::string::npos; });
  }));
  EXPECT_TRUE(std::any_of(later.begin(), later.end(),
                          [](const std::string& f) { return f.rfind("event: state\n", 0) == 0; }));
  EXPECT_THROW(svc.open_stream(sid, "999"), Error);
  EXPECT_THROW(svc.open_stream("s-424242", ""), Error);
}

TEST(Service, SseFrameFormat) {
  EXPECT_EQ(sse_frame("entry", json{{"a", 1}}, 3), "id: 3\nevent: entry\ndata: {\"a\":1}\n\n");
  EXPECT_EQ(sse_frame("plan", json::object()), "event: plan\ndata: {}\n\n");
}

// --- over HTTP ---------------------------------------------------------------

TEST(Http, EndpointsAndStream) {
  Service svc(fast_settings());
  int port = svc.start();
  ASSERT_GT(port, 0);
  httplib::Client cli("127.0.0.1", port);

  auto health = cli.Get("/healthz");
  ASSERT_TRUE(health);
  EXPECT_EQ(health->status, 200);
  EXPECT_EQ(health->get_header_value("Access-Control-Allow-Origin"), "*");

  auto bad = cli.Post("/sessions", "{not json", "application/json");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 400);

  auto opened = cli.Post("/sessions", R"({"user_id":"bob"})", "application/json");
  ASSERT_TRUE(opened);
  ASSERT_EQ(opened->status, 201);
  std::string sid = json::parse(opened->body)["session_id"];

  auto turn = cli.Post("/sessions/" + sid + "/turns",
                       R"({"client_turn_id":"t1","text":"Plan a trip to Tokyo"})", "application/json");
  ASSERT_TRUE(turn);
  EXPECT_EQ(turn->status, 200);

  // stream until the deliverable entry arrives
  std::string received;
  httplib::Client streamer("127.0.0.1", port);
  streamer.set_read_timeout(10, 0);
  auto res = streamer.Get("/sessions/" + sid + "/stream?from_seq=0", [&](const char* data, size_t n) {
    received.append(data, n);
    return received.find("\"deliverable\"") == std::string::npos;
  });
  EXPECT_NE(received.find("event: plan"), std::string::npos);
  EXPECT_NE(received.find("event: entry"), std::string::npos);
  EXPECT_NE(received.find("\"deliverable\""), std::string::npos);

  auto err_stream = cli.Get("/sessions/" + sid + "/stream?from_seq=banana");
  ASSERT_TRUE(err_stream);
  EXPECT_EQ(err_stream->body.rfind("event: error\n", 0), 0u);

  auto transcript = cli.Get("/sessions/" + sid + "/transcript?from_seq=1");
  ASSERT_TRUE(transcript);
  EXPECT_EQ(transcript->status, 200);
  EXPECT_EQ(json::parse(transcript->body)[0]["seq"], 1);

  EXPECT_EQ(cli.Get("/sessions/" + sid + "/plan")->status, 200);
  EXPECT_EQ(cli.Get("/sessions/" + sid + "/memory")->status, 200);
  EXPECT_EQ(cli.Get("/sessions/s-000404/plan")->status, 404);
  EXPECT_EQ(cli.Delete("/sessions/" + sid)->status, 200);
  EXPECT_EQ(cli.Post("/sessions/" + sid + "/turns", R"({"client_turn_id":"t2","text":"hi"})", "application/json")->status,
            409);
  svc.stop();
  EXPECT_FALSE(svc.running());
}
