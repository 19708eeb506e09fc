#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "dualtrack/engine.hpp"
#include "dualtrack/sync_bus.hpp"

using namespace dualtrack;

namespace {

struct Rig {
  std::unique_ptr<SessionStore> store = std::make_unique<SessionStore>();
  std::unique_ptr<EventBus> bus;
  std::unique_ptr<Integrator> integrator;
  std::string sid;

  Rig() {
    AgentMemory m;
    m.persona_id = "p";
    m.persona = {"Aria", "warm companion", {"warm"}};
    store->register_persona(m);
    sid = store->create_session("u", "p").session_id;
    bus = std::make_unique<EventBus>(*store);
    integrator = std::make_unique<Integrator>(*store);
    bus->subscribe(sid, [this](const StateUpdateEvent& e) { integrator->integrate(e); });
  }

  std::string task(const std::string& id) {
    store->add_pending_task(sid, id);
    return id;
  }
};

StateUpdateEvent ev(const std::string& sid, const std::string& task, std::int64_t seq, EventKind kind,
                    std::string text = "") {
  StateUpdateEvent e;
  e.event_id = task + "#" + std::to_string(seq);
  e.session_id = sid;
  e.task_id = task;
  e.causal_seq = seq;
  e.kind = kind;
  e.payload = json{{"text", text.empty() ? e.event_id : text}};
  e.emitted_at = seq * 10;
  return e;
}

}  // namespace

TEST(Bus, InOrderDeliveryAndTranscript) {
  Rig r;
  auto t = r.task("t1");
  EXPECT_EQ(r.bus->emit(ev(r.sid, t, 1, EventKind::progress)).status, EmitStatus::queued);
  EXPECT_EQ(r.bus->emit(ev(r.sid, t, 2, EventKind::artifact, "photo")).status, EmitStatus::queued);
  EXPECT_EQ(r.bus->emit(ev(r.sid, t, 3, EventKind::final_result, "done")).status, EmitStatus::queued);
  auto feed = r.bus->feed(r.sid);
  ASSERT_EQ(feed.size(), 3u);
  auto tr = r.store->transcript(r.sid);
  ASSERT_EQ(tr.size(), 2u);  // progress is not a transcript entry
  EXPECT_EQ(tr[0].kind, EntryKind::progress_note);
  EXPECT_EQ(tr[1].kind, EntryKind::deliverable);
  EXPECT_EQ(tr[1].content, "done");
  EXPECT_EQ(tr[1].source_event_id, "t1#3");
  EXPECT_FALSE(r.store->is_pending(r.sid, t));
}

TEST(Bus, DuplicateIdIsDiscarded) {
  Rig r;
  auto t = r.task("t1");
  auto e = ev(r.sid, t, 1, EventKind::final_result);
  EXPECT_EQ(r.bus->emit(e).status, EmitStatus::queued);
  auto dup = r.bus->emit(e);
  EXPECT_EQ(dup.status, EmitStatus::duplicate);
  EXPECT_FALSE(dup.diagnostic.empty());
  EXPECT_EQ(r.bus->duplicates_seen(), 1u);
  EXPECT_EQ(r.store->transcript(r.sid).size(), 1u);
}

TEST(Bus, OutOfOrderIsBufferedUntilGapFills) {
  Rig r;
  auto t = r.task("t1");
  r.bus->emit(ev(r.sid, t, 3, EventKind::final_result));
  r.bus->emit(ev(r.sid, t, 2, EventKind::artifact));
  EXPECT_TRUE(r.bus->feed(r.sid).empty());
  r.bus->emit(ev(r.sid, t, 1, EventKind::progress));
  auto feed = r.bus->feed(r.sid);
  ASSERT_EQ(feed.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(feed[i].causal_seq, static_cast<std::int64_t>(i + 1));
}

TEST(Bus, RejectsUnknownSessionAndTask) {
  Rig r;
  EXPECT_EQ(r.bus->emit(ev("nope", "t", 1, EventKind::progress)).status, EmitStatus::rejected);
  EXPECT_EQ(r.bus->emit(ev(r.sid, "not-pending", 1, EventKind::progress)).status, EmitStatus::rejected);
}

TEST(Bus, TerminalRules) {
  Rig r;
  auto t = r.task("t1");
  auto e1 = ev(r.sid, t, 1, EventKind::progress);
  r.bus->emit(e1);
  auto reuse = ev(r.sid, t, 1, EventKind::progress);
  reuse.event_id = "other";
  EXPECT_EQ(r.bus->emit(reuse).status, EmitStatus::rejected);

  // terminal at 3 while 4 is buffered
  auto t2 = r.task("t2");
  r.bus->emit(ev(r.sid, t2, 4, EventKind::progress));
  EXPECT_EQ(r.bus->emit(ev(r.sid, t2, 3, EventKind::final_result)).status, EmitStatus::rejected);

  // second terminal and events past the terminal
  auto t3 = r.task("t3");
  r.bus->emit(ev(r.sid, t3, 2, EventKind::failure));
  auto again = ev(r.sid, t3, 3, EventKind::final_result);
  EXPECT_EQ(r.bus->emit(again).status, EmitStatus::rejected);
  EXPECT_EQ(r.bus->emit(ev(r.sid, t3, 5, EventKind::progress)).status, EmitStatus::rejected);
}

TEST(Bus, LateSubscriberReplaysThenFollows) {
  Rig r;
  auto t = r.task("t1");
  r.bus->emit(ev(r.sid, t, 1, EventKind::progress));
  r.bus->emit(ev(r.sid, t, 2, EventKind::artifact));
  std::vector<std::string> seen;
  auto id = r.bus->subscribe(r.sid, [&](const StateUpdateEvent& e) { seen.push_back(e.event_id); });
  EXPECT_EQ(seen, (std::vector<std::string>{"t1#1", "t1#2"}));
  r.bus->emit(ev(r.sid, t, 3, EventKind::final_result));
  EXPECT_EQ(seen.size(), 3u);
  r.bus->unsubscribe(id);
  std::vector<std::string> tail;
  r.bus->subscribe(r.sid, [&](const StateUpdateEvent& e) { tail.push_back(e.event_id); }, 2);
  EXPECT_EQ(tail, std::vector<std::string>{"t1#3"});
}

TEST(Bus, EventJsonRoundTrip) {
  auto e = ev("s", "t", 4, EventKind::clarification, "which one?");
  auto back = json(e).get<StateUpdateEvent>();
  EXPECT_EQ(back, e);
  EXPECT_EQ(json(e)["kind"], "clarification");
  EXPECT_THROW(parse_event_kind("bogus"), Error);
}

// Every task emits a dense sequence ending in a terminal event; the whole set
// is duplicated and shuffled. Each task must reach the transcript exactly
// once per non-progress event, in causal order.
TEST(Bus, DuplicatedShuffledStreamsIntegrateExactlyOnce) {
  std::mt19937_64 rng(42);
  for (int round = 0; round < 20; ++round) {
    Rig r;
    std::vector<StateUpdateEvent> all;
    std::map<std::string, std::int64_t> last;
    std::size_t visible = 0;
    for (int k = 0; k < 50; ++k) {
      auto t = r.task("t" + std::to_string(k));
      int n = 1 + static_cast<int>(rng() % 5);
      for (int s = 1; s <= n; ++s) {
        EventKind kind = s == n ? (rng() % 2 ? EventKind::final_result : EventKind::failure)
                                : (rng() % 2 ? EventKind::progress : EventKind::artifact);
        visible += kind != EventKind::progress;
        all.push_back(ev(r.sid, t, s, kind));
      }
      last[t] = n;
    }
    auto doubled = all;
    doubled.insert(doubled.end(), all.begin(), all.end());
    std::shuffle(doubled.begin(), doubled.end(), rng);
    std::size_t dups = 0;
    for (const auto& e : doubled) {
      auto res = r.bus->emit(e);
      ASSERT_NE(res.status, EmitStatus::rejected) << res.diagnostic;
      dups += res.status == EmitStatus::duplicate;
    }
    EXPECT_EQ(dups, all.size());

    auto tr = r.store->transcript(r.sid);
    EXPECT_EQ(tr.size(), visible);
    std::set<std::string> ids;
    std::map<std::string, std::int64_t> seen_seq;
    for (const auto& x : tr) {
      ASSERT_TRUE(x.source_event_id);
      const auto& id = *x.source_event_id;
      EXPECT_TRUE(ids.insert(id).second);
      auto hash = id.find('#');
      auto task = id.substr(0, hash);
      auto seq = std::stoll(id.substr(hash + 1));
      EXPECT_GT(seq, seen_seq[task]);
      seen_seq[task] = seq;
    }
    for (const auto& [t, n] : last) EXPECT_FALSE(r.store->is_pending(r.sid, t));
  }
}

TEST(Integrator, DirectReplayIsNoOp) {
  Rig r;
  auto t = r.task("t1");
  auto e = ev(r.sid, t, 1, EventKind::artifact);
  EXPECT_TRUE(r.integrator->integrate(e));
  EXPECT_FALSE(r.integrator->integrate(e));
  EXPECT_EQ(r.integrator->duplicate_attempts(), 1u);
  EXPECT_EQ(r.store->transcript(r.sid).size(), 1u);
}

TEST(Integrator, HeldTaskDefersUntilRelease) {
  Rig r;
  auto t = r.task("t1");
  r.integrator->hold_task(t);
  r.bus->emit(ev(r.sid, t, 1, EventKind::final_result));
  EXPECT_TRUE(r.store->transcript(r.sid).empty());
  r.integrator->release_task(t);
  EXPECT_EQ(r.store->transcript(r.sid).size(), 1u);
}

TEST(Integrator, PlanViewTracksLatestSnapshot) {
  Rig r;
  auto t = r.task("t1");
  auto e1 = ev(r.sid, t, 1, EventKind::progress);
  e1.payload = json{{"plan", {{{"step", "s1"}, {"state", "running"}}}}};
  auto e2 = ev(r.sid, t, 2, EventKind::progress);
  e2.payload = json{{"plan", {{{"step", "s1"}, {"state", "done"}}}}};
  r.bus->emit(e1);
  r.bus->emit(e2);
  EXPECT_EQ(r.integrator->plan_view(r.sid)["t1"][0]["state"], "done");
}

TEST(Integrator, ArtifactsCanBeSuppressed) {
  auto store = std::make_unique<SessionStore>();
  AgentMemory m;
  m.persona_id = "p";
  m.persona = {"Aria", "warm companion", {"warm"}};
  store->register_persona(m);
  auto sid = store->create_session("u", "p").session_id;
  store->add_pending_task(sid, "t");
  Integrator in(*store, IntegrationOptions{false});
  EXPECT_FALSE(in.integrate(ev(sid, "t", 1, EventKind::artifact)));
  EXPECT_TRUE(in.integrate(ev(sid, "t", 2, EventKind::final_result)));
}

// Engine with a sink that delivers every event twice, holding back each
// session's events and releasing them reversed.
TEST(Bus, EngineUnderDuplicationKeepsOneDeliverablePerTask) {
  Engine e;
  std::vector<StateUpdateEvent> held;
  e.set_event_sink([&](const StateUpdateEvent& ev) {
    held.push_back(ev);
    held.push_back(ev);
  });
  std::vector<std::string> sids;
  for (int i = 0; i < 5; ++i) {
    sids.push_back(e.create_session("u" + std::to_string(i)));
    e.submit_turn(sids.back(), text_turn("Plan a trip to Tokyo"));
  }
  e.run();
  std::reverse(held.begin(), held.end());
  for (const auto& ev : held) e.emit_to_bus(ev);
  for (const auto& sid : sids) {
    int deliverables = 0;
    std::set<std::string> ids;
    for (const auto& x : e.store().transcript(sid)) {
      deliverables += x.kind == EntryKind::deliverable;
      if (x.source_event_id) EXPECT_TRUE(ids.insert(*x.source_event_id).second);
    }
    EXPECT_EQ(deliverables, 1) << sid;
  }
}
