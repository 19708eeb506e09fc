#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "dualtrack/augmentation.hpp"
#include "dualtrack/similarity.hpp"

using namespace dualtrack;

namespace {

ToolDescriptor simple(std::string id, Millis ms = 100) {
  ToolDescriptor d;
  d.tool_id = std::move(id);
  d.description = "test";
  d.arg_schema = {{"q", ArgSpec{"string", true}}, {"n", ArgSpec{"int", false}}};
  d.result_schema = {{"summary", "string"}};
  d.latency = LatencyModel::fixed(ms);
  return d;
}

ExecutionEnvelope env(std::string tool, ArgMap args, std::string id = "t/s1#1") {
  ExecutionEnvelope e;
  e.envelope_id = std::move(id);
  e.tool_id = std::move(tool);
  e.args = std::move(args);
  return e;
}

struct Captured {
  std::optional<ToolOutcome> outcome;
  Millis at = -1;
  int calls = 0;
};

Captured invoke(const ToolRegistry& r, const ExecutionEnvelope& e, Scheduler& clock) {
  auto c = std::make_shared<Captured>();
  r.invoke(e, clock, [c, &clock](ToolOutcome o) {
    c->outcome = std::move(o);
    c->at = clock.now();
    c->calls++;
  });
  clock.run();
  return *c;
}

struct FakeRunner : SubAgentRunner {
  Millis after_ms = 100;
  json payload = json{{"summary", "done"}};
  bool never = false;
  bool has_profile(const std::string& id) const override { return id == "FoodExpert"; }
  void run(const DelegationContract&, Scheduler& clock, std::function<void(SubAgentResult)> done) override {
    if (never) return;
    auto p = payload;
    clock.after(after_ms, [done, p] { done(SubAgentResult{SubAgentStatus::ok, p, "done", ""}); });
  }
};

DelegationContract contract(int depth = 0, Millis deadline = 1000) {
  DelegationContract c;
  c.contract_id = "c1";
  c.delegate_profile_id = "FoodExpert";
  c.task_statement = "find dinner";
  c.expected_result_schema = {{"summary", "string"}};
  c.deadline_ms = deadline;
  c.depth = depth;
  return c;
}

}  // namespace

// --- registry --------------------------------------------------------------

TEST(Registry, RegisterAndDuplicate) {
  ToolRegistry r;
  r.register_tool(simple("a"));
  EXPECT_TRUE(r.has("a"));
  try {
    r.register_tool(simple("a"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::registration);
  }
  EXPECT_EQ(r.size(), 1u);
}

TEST(Registry, InvalidDescriptorsRejected) {
  ToolRegistry r;
  auto no_args = simple("x");
  no_args.arg_schema.clear();
  EXPECT_THROW(r.register_tool(no_args), Error);
  auto no_result = simple("y");
  no_result.result_schema.clear();
  EXPECT_THROW(r.register_tool(no_result), Error);
  auto bad_rate = simple("z");
  bad_rate.failure_rate = 1.5;
  EXPECT_THROW(r.register_tool(bad_rate), Error);
  EXPECT_EQ(r.size(), 0u);
}

TEST(Registry, FiftyToolsAllCallableByName) {
  ToolRegistry r;
  for (int i = 0; i < 50; ++i) r.register_tool(simple("tool" + std::to_string(i), 10 + i));
  EXPECT_EQ(r.catalog().size(), 50u);
  Scheduler clock;
  for (int i = 0; i < 50; ++i) {
    auto id = "tool" + std::to_string(i);
    auto c = invoke(r, env(id, {{"q", "x"}}, id + "#1"), clock);
    ASSERT_TRUE(std::holds_alternative<ToolResult>(*c.outcome));
    EXPECT_EQ(std::get<ToolResult>(*c.outcome).tool_id, id);
    EXPECT_EQ(std::get<ToolResult>(*c.outcome).latency_ms, 10 + i);
  }
}

TEST(Registry, DescriptorJsonRoundTrip) {
  auto d = simple("a", 42);
  d.latency = LatencyModel::lognormal(5.5, 1.2);
  d.failure_rate = 0.25;
  auto back = json(d).get<ToolDescriptor>();
  EXPECT_EQ(back.tool_id, "a");
  EXPECT_EQ(back.latency.kind, LatencyKind::lognormal);
  EXPECT_DOUBLE_EQ(back.latency.a, 5.5);
  EXPECT_DOUBLE_EQ(back.latency.b, 1.2);
  EXPECT_DOUBLE_EQ(back.failure_rate, 0.25);
  EXPECT_EQ(back.arg_schema.at("n").type, "int");
  EXPECT_FALSE(back.arg_schema.at("n").required);
}

TEST(Registry, LoadCatalogUsesBuiltinHandlers) {
  ToolRegistry src;
  register_builtin_tools(src);
  ToolRegistry r;
  r.load_catalog(src.catalog_json());
  EXPECT_EQ(r.size(), src.size());
  Scheduler clock;
  auto c = invoke(r, env("weather", {{"city", "Beijing"}}), clock);
  ASSERT_TRUE(std::holds_alternative<ToolResult>(*c.outcome));
  EXPECT_NE(std::get<ToolResult>(*c.outcome).summary.find("Beijing"), std::string::npos);
  EXPECT_THROW(r.load_catalog(json::object()), Error);
}

// --- invocation ------------------------------------------------------------

TEST(Invoke, WeatherFixedLatency) {
  ToolRegistry r;
  register_builtin_tools(r);
  Scheduler clock;
  auto c = invoke(r, env("weather", {{"city", "Beijing"}}), clock);
  ASSERT_TRUE(std::holds_alternative<ToolResult>(*c.outcome));
  const auto& res = std::get<ToolResult>(*c.outcome);
  EXPECT_EQ(c.at, 200);
  EXPECT_EQ(res.latency_ms, 200);
  EXPECT_TRUE(res.payload.contains("condition"));
  EXPECT_EQ(c.calls, 1);
}

TEST(Invoke, MissingArgumentFailsImmediately) {
  ToolRegistry r;
  register_builtin_tools(r);
  Scheduler clock;
  auto c = invoke(r, env("weather", {}), clock);
  ASSERT_TRUE(std::holds_alternative<ToolFailure>(*c.outcome));
  EXPECT_EQ(std::get<ToolFailure>(*c.outcome).cause, FailureCause::validity);
  EXPECT_EQ(std::get<ToolFailure>(*c.outcome).latency_ms, 0);
  EXPECT_EQ(c.at, 0);
}

TEST(Invoke, TypeAndUnexpectedArgumentChecks) {
  ToolRegistry r;
  r.register_tool(simple("a"));
  EXPECT_NO_THROW(r.validate_args("a", {{"q", "x"}, {"n", "-3"}}));
  EXPECT_THROW(r.validate_args("a", {{"q", "x"}, {"n", "3.5"}}), Error);
  EXPECT_THROW(r.validate_args("a", {{"q", "x"}, {"zz", "1"}}), Error);
  EXPECT_THROW(r.validate_args("nope", {}), Error);
}

TEST(Invoke, UnknownToolFailsWithValidity) {
  ToolRegistry r;
  Scheduler clock;
  auto c = invoke(r, env("ghost", {}), clock);
  EXPECT_EQ(std::get<ToolFailure>(*c.outcome).cause, FailureCause::validity);
}

TEST(Invoke, StalledWithoutDeadlineNeverAnswers) {
  ToolRegistry r;
  r.register_tool(simple("a"));
  r.set_stalled("a", true);
  Scheduler clock;
  auto c = invoke(r, env("a", {{"q", "x"}}), clock);
  EXPECT_EQ(c.calls, 0);
  EXPECT_TRUE(clock.idle());
}

TEST(Invoke, DeadlineProducesTimeout) {
  ToolRegistry r;
  r.register_tool(simple("a", 5000));
  Scheduler clock;
  auto e = env("a", {{"q", "x"}});
  e.deadline_ms = 800;
  auto c = invoke(r, e, clock);
  ASSERT_TRUE(std::holds_alternative<ToolFailure>(*c.outcome));
  EXPECT_EQ(std::get<ToolFailure>(*c.outcome).cause, FailureCause::timeout);
  EXPECT_EQ(c.at, 800);
}

TEST(Invoke, FailureRateOneAlwaysErrors) {
  ToolRegistry r;
  auto d = simple("a");
  d.failure_rate = 1.0;
  r.register_tool(d);
  Scheduler clock;
  for (int i = 0; i < 20; ++i) {
    auto c = invoke(r, env("a", {{"q", "x"}}, "e" + std::to_string(i)), clock);
    EXPECT_EQ(std::get<ToolFailure>(*c.outcome).cause, FailureCause::error);
  }
}

TEST(Invoke, LatencyIsReproduciblePerEnvelope) {
  ToolRegistry a(7), b(7), c(8);
  for (auto* r : {&a, &b, &c}) {
    auto d = simple("x");
    d.latency = LatencyModel::lognormal(5.5, 1.2);
    r->register_tool(d);
  }
  int differ = 0;
  for (int i = 0; i < 50; ++i) {
    auto e = env("x", {{"q", "1"}}, "task/s" + std::to_string(i) + "#1");
    EXPECT_EQ(a.sample_latency(e), b.sample_latency(e));
    differ += a.sample_latency(e) != c.sample_latency(e);
  }
  EXPECT_GT(differ, 40);
}

// heavy tail: the log-normal's own quantiles give p99/median = exp(2.326 * sigma)
TEST(Latency, LognormalTailMatchesClosedForm) {
  const double mu = 5.5, sigma = 1.2;
  std::mt19937_64 rng(42);
  auto m = LatencyModel::lognormal(mu, sigma);
  std::vector<Millis> xs;
  for (int i = 0; i < 20000; ++i) xs.push_back(m.sample(rng));
  std::sort(xs.begin(), xs.end());
  double median = static_cast<double>(xs[xs.size() / 2]);
  double p99 = static_cast<double>(xs[xs.size() * 99 / 100]);
  EXPECT_NEAR(median, std::exp(mu), std::exp(mu) * 0.05);
  EXPECT_NEAR(p99, std::exp(mu + 2.3263 * sigma), std::exp(mu + 2.3263 * sigma) * 0.12);
  EXPECT_GE(p99, 5 * median);
}

TEST(Latency, ParetoLowerBoundAndJson) {
  std::mt19937_64 rng(1);
  auto m = LatencyModel::pareto(100, 1.5);
  for (int i = 0; i < 1000; ++i) EXPECT_GE(m.sample(rng), 100);
  auto back = json(m).get<LatencyModel>();
  EXPECT_EQ(back.kind, LatencyKind::pareto);
  EXPECT_DOUBLE_EQ(back.b, 1.5);
  EXPECT_EQ(LatencyModel::fixed(7).sample(rng), 7);
}

// --- delegation ------------------------------------------------------------

TEST(Delegation, CompletesWithinDeadline) {
  Scheduler clock;
  FakeRunner runner;
  Delegator d;
  std::optional<SubAgentResult> got;
  d.delegate(contract(), runner, clock, [&](SubAgentResult r) { got = r; });
  EXPECT_EQ(d.live(), 1);
  clock.run();
  ASSERT_TRUE(got);
  EXPECT_EQ(got->status, SubAgentStatus::ok);
  EXPECT_EQ(d.live(), 0);
  EXPECT_EQ(clock.now(), 100);
}

TEST(Delegation, DepthCapRefuses) {
  Scheduler clock;
  FakeRunner runner;
  Delegator d({2, 64});
  std::vector<SubAgentStatus> seen;
  for (int depth : {0, 1, 2, 3})
    d.delegate(contract(depth), runner, clock, [&](SubAgentResult r) { seen.push_back(r.status); });
  clock.run();
  std::sort(seen.begin(), seen.end());
  EXPECT_EQ(std::count(seen.begin(), seen.end(), SubAgentStatus::ok), 2);
  EXPECT_EQ(std::count(seen.begin(), seen.end(), SubAgentStatus::refused), 2);
}

TEST(Delegation, LiveCapRefuses) {
  Scheduler clock;
  FakeRunner runner;
  Delegator d({2, 3});
  int refused = 0;
  for (int i = 0; i < 5; ++i)
    d.delegate(contract(), runner, clock, [&](SubAgentResult r) { refused += r.status == SubAgentStatus::refused; });
  clock.run();
  EXPECT_EQ(refused, 2);
  EXPECT_EQ(d.peak_live(), 3);
}

TEST(Delegation, UnknownProfileAndBadDeadlineRefused) {
  Scheduler clock;
  FakeRunner runner;
  Delegator d;
  auto c = contract();
  c.delegate_profile_id = "Nobody";
  std::vector<SubAgentStatus> seen;
  d.delegate(c, runner, clock, [&](SubAgentResult r) { seen.push_back(r.status); });
  d.delegate(contract(0, 0), runner, clock, [&](SubAgentResult r) { seen.push_back(r.status); });
  clock.run();
  EXPECT_EQ(seen, (std::vector<SubAgentStatus>{SubAgentStatus::refused, SubAgentStatus::refused}));
}

TEST(Delegation, StalledDelegateTimesOutOnce) {
  Scheduler clock;
  FakeRunner runner;
  runner.never = true;
  Delegator d;
  int calls = 0;
  std::optional<SubAgentResult> got;
  d.delegate(contract(0, 700), runner, clock, [&](SubAgentResult r) {
    got = r;
    ++calls;
  });
  clock.run();
  EXPECT_EQ(calls, 1);
  EXPECT_EQ(got->status, SubAgentStatus::timeout);
  EXPECT_EQ(clock.now(), 700);
  EXPECT_EQ(d.live(), 0);
}

TEST(Delegation, LateResultAfterTimeoutIgnored) {
  Scheduler clock;
  FakeRunner runner;
  runner.after_ms = 2000;
  Delegator d;
  int calls = 0;
  d.delegate(contract(0, 500), runner, clock, [&](SubAgentResult r) {
    ++calls;
    EXPECT_EQ(r.status, SubAgentStatus::timeout);
  });
  clock.run();
  EXPECT_EQ(calls, 1);
}

TEST(Delegation, MissingExpectedKeyCoercedToFailure) {
  Scheduler clock;
  FakeRunner runner;
  runner.payload = json{{"other", 1}};
  Delegator d;
  std::optional<SubAgentResult> got;
  d.delegate(contract(), runner, clock, [&](SubAgentResult r) { got = r; });
  clock.run();
  EXPECT_EQ(got->status, SubAgentStatus::failed);
  EXPECT_NE(got->message.find("summary"), std::string::npos);
}

// --- retrieval -------------------------------------------------------------

TEST(Retrieval, MatchesBruteForceRanking) {
  std::mt19937 rng(3);
  const std::vector<std::string> words{"tokyo", "sushi", "ramen", "museum", "train", "hotel", "rain", "park"};
  const std::vector<SourceKind> kinds{SourceKind::knowledge_base, SourceKind::user_history,
                                      SourceKind::agent_memory, SourceKind::hot_feed};
  for (int round = 0; round < 100; ++round) {
    RetrievalCorpus corpus;
    for (int i = 0; i < 12; ++i) {
      std::string t;
      for (int w = 0; w < 4; ++w) t += words[rng() % words.size()] + " ";
      corpus.add(kinds[rng() % kinds.size()], "d" + std::to_string(i), t);
    }
    std::string q = words[rng() % words.size()] + " " + words[rng() % words.size()];
    std::set<SourceKind> sources{kinds[rng() % 4], kinds[rng() % 4]};
    std::size_t k = 1 + rng() % 5;

    std::vector<Snippet> oracle;
    for (auto kind : kinds) {
      if (!sources.count(kind) || !corpus.docs.count(kind)) continue;
      for (const auto& [id, t] : corpus.docs.at(kind)) {
        double s = cosine(term_vector(q), term_vector(t));
        if (s > 0) oracle.push_back({kind, id, t, s});
      }
    }
    std::stable_sort(oracle.begin(), oracle.end(), [](const Snippet& a, const Snippet& b) { return a.score > b.score; });
    if (oracle.size() > k) oracle.resize(k);

    auto got = retrieve(q, corpus, sources, k);
    ASSERT_EQ(got.size(), oracle.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_NEAR(got[i].score, oracle[i].score, 1e-12);
      EXPECT_EQ(got[i].doc_id, oracle[i].doc_id);
    }
  }
}

TEST(Retrieval, EmptyQueryRejected) {
  EXPECT_THROW(retrieve("  ", {}, {SourceKind::knowledge_base}), Error);
  EXPECT_TRUE(retrieve("tokyo", {}, {SourceKind::knowledge_base}).empty());
}
