#include <gtest/gtest.h>

#include <random>
#include <set>

#include "dualtrack/engine.hpp"
#include "dualtrack/fast_track.hpp"
#include "dualtrack/perception.hpp"
#include "dualtrack/router.hpp"

using namespace dualtrack;

namespace {

ModalityPayload text_payload(std::string s) {
  ModalityPayload p;
  p.modality = Modality::text;
  p.text = std::move(s);
  return p;
}

ModalityPayload audio_payload(std::string s) {
  ModalityPayload p;
  p.modality = Modality::audio;
  p.text = std::move(s);
  return p;
}

ModalityPayload video_payload(std::vector<FrameDescriptor> frames) {
  ModalityPayload p;
  p.modality = Modality::video;
  p.frames = std::move(frames);
  return p;
}

RequestObject request(std::string utterance, std::vector<std::string> tags = {}) {
  RequestObject r;
  r.session_id = "s";
  r.utterance = std::move(utterance);
  r.visual_tags = std::move(tags);
  return r;
}

ReferenceClassifier classifier() {
  auto profiles = std::make_shared<ProfileRegistry>(ProfileRegistry::defaults());
  return ReferenceClassifier([profiles](const std::string& u) { return dispatch(u, *profiles).profile_id; });
}

}  // namespace

// --- perception ------------------------------------------------------------

TEST(Perception, CaptionIsTemplateOverTags) {
  EXPECT_EQ(caption_stub({{"subject", "user"}, {"action", "waving"}}), "user waving");
  EXPECT_EQ(caption_stub({}), "");
}

TEST(Perception, ParadigmConstants) {
  PerceptionGateway decoupled;
  std::vector<ModalityPayload> turn{audio_payload("hello"), video_payload({{{"subject", "user"}}})};
  EXPECT_EQ(decoupled.perception_latency(turn), 480);
  PerceptionGateway mono({PerceptionParadigm::monolithic});
  EXPECT_EQ(mono.perception_latency(turn), 2100);
}

TEST(Perception, EmptyDescriptorAndTextOnlyChargeNothing) {
  PerceptionGateway g;
  EXPECT_EQ(g.perception_latency({text_payload("hi")}), 0);
  EXPECT_EQ(g.perception_latency({text_payload("hi"), video_payload({{}})}), 0);
}

TEST(Perception, TextTurnNormalizes) {
  PerceptionGateway g;
  auto r = g.normalize({text_payload("hi")}, "s1");
  EXPECT_EQ(r.utterance, "hi");
  EXPECT_TRUE(r.visual_tags.empty());
  EXPECT_EQ(r.session_id, "s1");
}

TEST(Perception, TripTurnKeepsUtteranceVerbatimAndTags) {
  PerceptionGateway g;
  auto r = g.normalize({audio_payload("Exhausted... Plan a trip"),
                        video_payload({{{"subject", "user"}, {"posture", "slumped posture"}}})},
                       "s1");
  EXPECT_EQ(r.utterance, "Exhausted... Plan a trip");
  EXPECT_EQ(r.visual_tags, std::vector<std::string>{"slumped posture"});
}

TEST(Perception, DuplicateTagsAreUnique) {
  PerceptionGateway g;
  std::mt19937 rng(5);
  const std::vector<std::string> vocab{"waving", "smiling", "kitchen", "cup", "outdoors", "slumped posture"};
  for (int round = 0; round < 50; ++round) {
    std::vector<FrameDescriptor> frames;
    std::set<std::string> oracle;
    int n = 1 + static_cast<int>(rng() % 5);
    for (int f = 0; f < n; ++f) {
      FrameDescriptor d{{"subject", "user"}};
      d["action"] = vocab[rng() % vocab.size()];
      d["environment"] = vocab[rng() % vocab.size()];
      oracle.insert(d["action"]);
      oracle.insert(d["environment"]);
      frames.push_back(d);
    }
    auto r = g.normalize({text_payload("look"), video_payload(frames)}, "s");
    std::set<std::string> got(r.visual_tags.begin(), r.visual_tags.end());
    EXPECT_EQ(got.size(), r.visual_tags.size());
    EXPECT_EQ(got, oracle);
    EXPECT_EQ(g.normalize({text_payload("look"), video_payload(frames)}, "s"), r);
  }
}

TEST(Perception, AllEmptyIsInvalidTurn) {
  PerceptionGateway g;
  try {
    g.normalize({text_payload("  "), video_payload({})}, "s");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::invalid_turn);
  }
  EXPECT_THROW(g.normalize({}, "s"), Error);
}

TEST(Perception, PayloadJsonRoundTrip) {
  auto p = video_payload({{{"subject", "user"}, {"action", "waving"}}});
  p.origin_ms = 17;
  auto back = json(p).get<ModalityPayload>();
  EXPECT_EQ(back.modality, Modality::video);
  EXPECT_EQ(back.frames, p.frames);
  EXPECT_EQ(back.origin_ms, 17);
}

// --- routing ---------------------------------------------------------------

TEST(Router, GreetingIsChat) {
  auto c = classifier();
  auto d = c.classify(request("hello there"), {});
  EXPECT_EQ(d.mode, Mode::chat);
  EXPECT_EQ(d.tier(), 1);
  EXPECT_FALSE(d.plan);
}

TEST(Router, WeatherIsTool) {
  auto c = classifier();
  auto d = c.classify(request("what's the weather in Beijing"), {});
  EXPECT_EQ(d.mode, Mode::tool);
  EXPECT_EQ(d.tier(), 2);
  ASSERT_TRUE(d.plan);
  ASSERT_EQ(d.plan->size(), 1u);
  EXPECT_EQ(d.plan->front().tool, "weather");
  EXPECT_EQ(d.plan->front().args.at("city"), "Beijing");
}

TEST(Router, TripIsAgentForTravelPlanner) {
  auto c = classifier();
  auto d = c.classify(request("plan a trip to Tokyo"), {});
  EXPECT_EQ(d.mode, Mode::agent);
  EXPECT_EQ(d.tier(), 3);
  EXPECT_EQ(d.routing_target, "TravelPlanner");
}

TEST(Router, BothTablesMatchingRoutesAgent) {
  auto c = classifier();
  EXPECT_EQ(c.classify(request("plan a trip and check the weather"), {}).mode, Mode::agent);
  // two distinct tool intents also need more than one step
  EXPECT_EQ(c.classify(request("weather and my calendar for tomorrow"), {}).mode, Mode::agent);
}

TEST(Router, ConfidenceByRule) {
  auto c = classifier();
  EXPECT_DOUBLE_EQ(c.classify(request("tell me something nice"), {}).confidence, 0.5);
  EXPECT_DOUBLE_EQ(c.classify(request("weather in Rome"), {}).confidence, 1.0);
}

TEST(Router, BackendFailureFallsBackToChat) {
  struct Broken : Classifier {
    RoutingDecision classify(const RequestObject&, const ContextBundle&) override {
      throw std::runtime_error("backend down");
    }
  };
  ConversationRouter r(std::make_shared<Broken>());
  auto d = r.classify(request("plan a trip"), {});
  EXPECT_EQ(d.mode, Mode::chat);
  EXPECT_DOUBLE_EQ(d.confidence, 0.0);
}

TEST(Router, ModelClassifierReadsCannedDecision) {
  auto fake = std::make_shared<CannedCompletion>();
  fake->push(R"({"thought":"travel","mode":"agent","routing_target":"TravelPlanner"})");
  fake->push("not json at all");
  ConversationRouter r(std::make_shared<ModelClassifier>(fake));
  auto d = r.classify(request("plan a trip"), {});
  EXPECT_EQ(d.mode, Mode::agent);
  EXPECT_NE(fake->last_prompt().find("plan a trip"), std::string::npos);
  auto bad = r.classify(request("plan a trip"), {});
  EXPECT_EQ(bad.mode, Mode::chat);
  EXPECT_DOUBLE_EQ(bad.confidence, 0.0);
}

TEST(Decision, SampleAgentObjectValidates) {
  const std::string raw = R"({
    "thought": "User requests travel plan -> Tier-3",
    "mode": "agent",
    "routing_target": "TravelPlanner",
    "plan": [
      {"step": 1, "tool": "flight_search", "args": {"dest": "Tokyo"}},
      {"step": 2, "tool": "hotel_book", "args": {"type": "Onsen"}}
    ]
  })";
  auto d = validate_decision(raw);
  EXPECT_EQ(d.mode, Mode::agent);
  EXPECT_EQ(d.tier(), 3);
  ASSERT_TRUE(d.plan);
  ASSERT_EQ(d.plan->size(), 2u);
  EXPECT_EQ((*d.plan)[0].tool, "flight_search");
  EXPECT_EQ((*d.plan)[1].args.at("type"), "Onsen");
}

TEST(Decision, MinimalChat) {
  auto d = validate_decision(R"({"mode":"chat","thought":"hi"})");
  EXPECT_EQ(d.tier(), 1);
  EXPECT_FALSE(d.plan);
  EXPECT_FALSE(d.routing_target);
}

TEST(Decision, RejectionsCarryOffsets) {
  auto offset_of = [](const std::string& raw) -> std::optional<std::size_t> {
    try {
      validate_decision(raw);
    } catch (const SchemaViolation& e) {
      return e.offset();
    }
    return std::nullopt;
  };
  EXPECT_EQ(offset_of(R"({"mode":"fly"})"), 1u);
  EXPECT_TRUE(offset_of(R"({"mode":"chat", "confidence": 1})").has_value());
  EXPECT_EQ(*offset_of(R"({"mode":"chat", "confidence": 1})"), 16u);  // opening quote of the key
  // truncated JSON: position at or near the end
  std::string cut = R"({"mode":"agent","routing_target":"X")";
  auto off = offset_of(cut);
  ASSERT_TRUE(off);
  EXPECT_GE(*off, cut.size() - 1);
  EXPECT_TRUE(offset_of(R"({"mode":"agent"})"));                                     // target missing
  EXPECT_TRUE(offset_of(R"({"mode":"chat","plan":[]})"));                            // chat with plan
  EXPECT_TRUE(offset_of(R"({"mode":"tool","plan":[{"step":2,"tool":"weather"}]})"));  // not from 1
  EXPECT_TRUE(offset_of(R"({"mode":"tool","routing_target":"X"})"));
  EXPECT_TRUE(offset_of("[1,2]"));
}

TEST(Decision, RoundTripProperty) {
  std::mt19937 rng(42);
  const std::vector<std::string> tools{"flight_search", "hotel_book", "weather", "search", "dining_search"};
  for (int i = 0; i < 500; ++i) {
    RoutingDecision d;
    d.mode = static_cast<Mode>(rng() % 3);
    d.thought = "t" + std::to_string(rng() % 1000) + " \"quoted\" \\ ünï";
    if (d.mode == Mode::agent) d.routing_target = "Profile" + std::to_string(rng() % 5);
    if (d.mode != Mode::chat && rng() % 4 != 0) {
      std::vector<PlanItem> plan;
      int n = static_cast<int>(rng() % 5);
      for (int s = 1; s <= n; ++s) {
        PlanItem p{s, tools[rng() % tools.size()], {}};
        int args = static_cast<int>(rng() % 3);
        for (int a = 0; a < args; ++a) p.args["k" + std::to_string(a)] = "v" + std::to_string(rng() % 50);
        plan.push_back(p);
      }
      d.plan = plan;
    }
    auto back = validate_decision(serialize_decision(d));
    EXPECT_TRUE(back.same_wire(d)) << serialize_decision(d);
    EXPECT_EQ(serialize_decision(back), serialize_decision(d));
  }
}

TEST(Decision, WireHasExactlyContractFields) {
  RoutingDecision d;
  d.mode = Mode::agent;
  d.routing_target = "TravelPlanner";
  d.plan = std::vector<PlanItem>{{1, "flight_search", {{"dest", "Tokyo"}}}};
  auto j = to_wire(d);
  std::set<std::string> keys;
  for (auto& [k, v] : j.items()) keys.insert(k);
  EXPECT_EQ(keys, (std::set<std::string>{"thought", "mode", "routing_target", "plan"}));
  EXPECT_EQ(j["plan"][0], (json{{"step", 1}, {"tool", "flight_search"}, {"args", {{"dest", "Tokyo"}}}}));
}

// --- fast track ------------------------------------------------------------

TEST(FastTrack, TripWithHobbyGetsEmpathyMentioningBasketball) {
  ContextBundle ctx;
  ctx.profile = {{"Hobby", "Basketball"}};
  Persona p{"Aria", "warm companion", {"empathetic"}};
  auto text = respond_direct_text(request("Exhausted... Plan a trip to Tokyo", {"slumped posture"}), ctx, p);
  EXPECT_NE(text::lower(text).find("basketball"), std::string::npos);
  EXPECT_NE(text::lower(text).find("exhausted"), std::string::npos);
}

TEST(FastTrack, GreetingInPersonaVoiceAndDeterministic) {
  Persona p{"Aria", "warm companion", {"warm"}};
  TemplateResponder r;
  ContextBundle ctx;
  auto req = request("hello");
  auto a = r.respond({req, ctx, p});
  auto b = r.respond({req, ctx, p});
  EXPECT_NE(a.text.find("Aria"), std::string::npos);
  EXPECT_EQ(a.text, b.text);
}

TEST(FastTrack, ProfileFactReferencedWhenAvailable) {
  Persona p{"Aria", "warm companion", {"warm"}};
  ContextBundle ctx;
  ctx.profile = {{"City", "Lyon"}};
  auto text = respond_direct_text(request("tell me a story"), ctx, p);
  EXPECT_NE(text.find("Lyon"), std::string::npos);
}

TEST(FastTrack, BridgeTexts) {
  RoutingDecision trip;
  trip.mode = Mode::agent;
  trip.routing_target = "TravelPlanner";
  auto b = bridge(request("Plan a trip to Tokyo"), trip);
  EXPECT_EQ(b.kind, ResponseKind::bridge);
  EXPECT_EQ(b.text.rfind("I've received your request", 0), 0u);
  EXPECT_NE(b.text.find("trip to Tokyo"), std::string::npos);

  RoutingDecision weather;
  weather.mode = Mode::tool;
  weather.plan = std::vector<PlanItem>{{1, "weather", {{"city", "Beijing"}}}};
  EXPECT_EQ(bridge(request("weather in Beijing"), weather).text, "I will check the latest reports for you...");
}

TEST(FastTrack, BudgetPassThroughUnderDeadline) {
  auto o = enforce_budget(0, 500, 0, ResponderReply{"hi", 120}, ResponseKind::direct);
  EXPECT_EQ(o.first.kind, ResponseKind::direct);
  EXPECT_EQ(o.first.produced_at, 120);
  EXPECT_FALSE(o.follow_up);
}

TEST(FastTrack, BudgetFallbackThenFollowUp) {
  auto o = enforce_budget(1000, 500, 1000, ResponderReply{"late", 3000}, ResponseKind::direct);
  EXPECT_EQ(o.first.kind, ResponseKind::fallback_ack);
  EXPECT_EQ(o.first.produced_at, 1500);
  ASSERT_TRUE(o.follow_up);
  EXPECT_EQ(o.follow_up->produced_at, 4000);
  EXPECT_EQ(o.follow_up->text, "late");
}

TEST(FastTrack, BackendErrorAcksImmediately) {
  auto o = enforce_budget(0, 500, 485, std::nullopt, ResponseKind::direct);
  EXPECT_EQ(o.first.kind, ResponseKind::fallback_ack);
  EXPECT_EQ(o.first.produced_at, 485);
}

TEST(FastTrack, BudgetProperty) {
  std::mt19937 rng(11);
  for (int i = 0; i < 1000; ++i) {
    Millis start = rng() % 10000, budget = 1 + rng() % 1000, began = start + rng() % 600;
    std::optional<ResponderReply> reply;
    if (rng() % 5) reply = ResponderReply{"x", static_cast<Millis>(rng() % 4000)};
    auto o = enforce_budget(start, budget, began, reply, ResponseKind::direct);
    EXPECT_LE(o.first.produced_at - start, budget);
    if (reply && began + reply->latency_ms <= start + budget) {
      EXPECT_EQ(o.first.kind, ResponseKind::direct);
    } else {
      EXPECT_EQ(o.first.kind, ResponseKind::fallback_ack);
    }
  }
}

TEST(FastTrack, SlowResponderInEngineGetsAckAtDeadlineAndFollowUp) {
  EngineParts parts;
  parts.responder = std::make_shared<ScriptedResponder>([](const ResponderInput&) { return ResponderReply{"late hello", 3000}; });
  Engine e({}, parts);
  auto sid = e.create_session("u");
  auto idx = e.submit_turn(sid, text_turn("hello"));
  e.run();
  auto tr = e.store().transcript(sid);
  ASSERT_EQ(tr.size(), 3u);
  EXPECT_EQ(tr[1].content, std::string(kFallbackAck));
  EXPECT_EQ(tr[1].timestamp, 500);
  EXPECT_EQ(tr[2].content, "late hello");
  EXPECT_EQ(e.turns()[idx].ttft(), 500);
}

TEST(FastTrack, ThrowingResponderStillAnswersWithinBudget) {
  EngineParts parts;
  parts.responder = std::make_shared<ScriptedResponder>(
      [](const ResponderInput&) -> ResponderReply { throw std::runtime_error("down"); });
  Engine e({}, parts);
  auto sid = e.create_session("u");
  auto idx = e.submit_turn(sid, text_turn("hello"));
  e.run();
  ASSERT_TRUE(e.turns()[idx].ttft());
  EXPECT_LE(*e.turns()[idx].ttft(), 500);
  EXPECT_EQ(e.store().transcript(sid)[1].content, std::string(kFallbackAck));
}

TEST(FastTrack, BridgeDoesNotWaitForStalledSlowTrack) {
  Engine e;
  for (const auto& t : e.tools().catalog()) e.tools().set_stalled(t.tool_id, true);
  auto sid = e.create_session("u");
  auto idx = e.submit_turn(sid, text_turn("Plan a trip to Tokyo"));
  e.run_until(600);
  auto tr = e.store().transcript(sid);
  ASSERT_GE(tr.size(), 2u);
  EXPECT_EQ(tr[1].kind, EntryKind::bridge);
  EXPECT_LE(*e.turns()[idx].ttft(), 500);
}
