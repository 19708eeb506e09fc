#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <random>
#include <set>
#include <thread>

#include "dualtrack/clock.hpp"
#include "dualtrack/common.hpp"
#include "dualtrack/shared_state.hpp"

using namespace dualtrack;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("dualtrack-" + name + "-" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

AgentMemory persona(const std::string& id) {
  AgentMemory m;
  m.persona_id = id;
  m.persona = {"Aria", "warm companion", {"warm"}};
  return m;
}

std::unique_ptr<SessionStore> make_store(std::optional<fs::path> dir = std::nullopt) {
  auto s = std::make_unique<SessionStore>(std::move(dir));
  s->register_persona(persona("companion"));
  return s;
}

EntryDraft user_draft(std::string text) {
  EntryDraft d;
  d.role = Role::user;
  d.kind = EntryKind::turn;
  d.content = std::move(text);
  return d;
}

}  // namespace

// --- text helpers ----------------------------------------------------------

TEST(Text, NormalizeCollapsesWhitespaceAndCase) {
  EXPECT_EQ(text::normalize("  Plan  a\tTRIP \n"), "plan a trip");
  EXPECT_EQ(text::normalize(""), "");
}

TEST(Text, TokensSplitOnPunctuation) {
  EXPECT_EQ(text::tokens("Hello, World! x-y"), (std::vector<std::string>{"hello", "world", "x", "y"}));
}

TEST(Tokens, EstimateIsWordsTimesOnePointThreeRoundedUp) {
  EXPECT_EQ(estimate_tokens(""), 0);
  EXPECT_EQ(estimate_tokens("one"), 2);            // 1.3
  EXPECT_EQ(estimate_tokens("a b c d e f g"), 10);  // 9.1
  EXPECT_EQ(estimate_tokens("a b c d e f g h i j"), 13);
  std::mt19937 rng(7);
  for (int i = 0; i < 200; ++i) {
    int words = static_cast<int>(rng() % 400);
    std::string s;
    for (int w = 0; w < words; ++w) s += "w ";
    // integer oracle: ceil(13 * words / 10)
    EXPECT_EQ(estimate_tokens(s), (13LL * words + 9) / 10) << words;
  }
}

TEST(Tokens, TruncateKeepsLongestFittingPrefix) {
  std::string s = "a b c d e f g h i j";
  auto t = truncate_to_tokens(s, 10);
  EXPECT_EQ(t, "a b c d e f g");
  EXPECT_LE(estimate_tokens(t), 10);
  EXPECT_GT(estimate_tokens(t + " h"), 10);
}

TEST(Ids, Fnv1aMatchesReferenceVectors) {
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a("foobar"), 0x85944171f73967e8ULL);
  EXPECT_EQ(hex_id(0xabcULL).size(), 16u);
}

// --- scheduler -------------------------------------------------------------

TEST(Scheduler, RunsInTimeThenSchedulingOrder) {
  Scheduler s;
  std::vector<int> order;
  s.at(20, [&] { order.push_back(3); });
  s.at(10, [&] { order.push_back(1); });
  s.at(10, [&] { order.push_back(2); });
  EXPECT_EQ(s.run(), 3u);
  EXPECT_EQ(order, (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(s.now(), 20);
}

TEST(Scheduler, CancelPreventsCallback) {
  Scheduler s;
  bool fired = false;
  auto id = s.after(5, [&] { fired = true; });
  EXPECT_TRUE(s.cancel(id));
  EXPECT_FALSE(s.cancel(id));
  s.run();
  EXPECT_FALSE(fired);
  EXPECT_TRUE(s.idle());
}

TEST(Scheduler, RunUntilStopsAtBoundaryAndSetsNow) {
  Scheduler s;
  int n = 0;
  s.at(100, [&] { ++n; });
  s.at(101, [&] { ++n; });
  EXPECT_EQ(s.run_until(100), 1u);
  EXPECT_EQ(s.now(), 100);
  EXPECT_EQ(n, 1);
  EXPECT_EQ(s.next_due(), 101);
}

TEST(Scheduler, CallbacksMayScheduleMore) {
  Scheduler s;
  std::vector<Millis> seen;
  std::function<void()> tick = [&] {
    seen.push_back(s.now());
    if (seen.size() < 5) s.after(7, tick);
  };
  s.after(7, tick);
  s.run();
  EXPECT_EQ(seen, (std::vector<Millis>{7, 14, 21, 28, 35}));
}

// --- session store ---------------------------------------------------------

TEST(SessionStore, CreateSessionStartsEmpty) {
  auto st_ptr = make_store();
  auto& st = *st_ptr;
  auto s = st.create_session("u1", "companion");
  EXPECT_TRUE(s.transcript.empty());
  EXPECT_EQ(s.next_seq(), 0);
  EXPECT_TRUE(s.pending_tasks.empty());
}

TEST(SessionStore, UnknownPersonaIsConfigurationError) {
  auto st_ptr = make_store();
  auto& st = *st_ptr;
  try {
    st.create_session("u1", "ghost-persona");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::configuration);
    EXPECT_NE(std::string(e.what()).find("ghost-persona"), std::string::npos);
  }
}

TEST(SessionStore, ThousandCreationsGiveDistinctIds) {
  auto st_ptr = make_store();
  auto& st = *st_ptr;
  std::set<std::string> ids;
  for (int i = 0; i < 1000; ++i) ids.insert(st.create_session("u1", "companion").session_id);
  EXPECT_EQ(ids.size(), 1000u);
}

TEST(SessionStore, TwoSessionsHaveIndependentTranscripts) {
  auto st_ptr = make_store();
  auto& st = *st_ptr;
  auto a = st.create_session("u1", "companion").session_id;
  auto b = st.create_session("u1", "companion").session_id;
  st.append_transcript(a, user_draft("x"));
  EXPECT_EQ(st.transcript(a).size(), 1u);
  EXPECT_TRUE(st.transcript(b).empty());
}

TEST(SessionStore, AppendAssignsGapFreeSeqs) {
  auto st_ptr = make_store();
  auto& st = *st_ptr;
  auto sid = st.create_session("u1", "companion").session_id;
  EXPECT_EQ(st.append_transcript(sid, user_draft("a")), 0);
  EXPECT_EQ(st.append_transcript(sid, user_draft("b")), 1);
  EXPECT_EQ(st.append_transcript(sid, user_draft("c")), 2);
  EXPECT_THROW(st.append_transcript("nope", user_draft("d")), Error);
}

TEST(SessionStore, ConcurrentWritersProduceDenseRun) {
  auto st_ptr = make_store();
  auto& st = *st_ptr;
  auto sid = st.create_session("u1", "companion").session_id;
  std::vector<std::thread> producers;
  std::vector<std::vector<std::int64_t>> got(4);
  for (int p = 0; p < 4; ++p)
    producers.emplace_back([&, p] {
      for (int i = 0; i < 25; ++i) got[p].push_back(st.append_transcript(sid, user_draft("p" + std::to_string(p))));
    });
  for (auto& t : producers) t.join();
  std::vector<std::int64_t> all;
  for (auto& g : got) all.insert(all.end(), g.begin(), g.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < all.size(); ++i) EXPECT_EQ(all[i], static_cast<std::int64_t>(i));
  auto tr = st.transcript(sid);
  ASSERT_EQ(tr.size(), 100u);
  for (std::size_t i = 0; i < tr.size(); ++i) EXPECT_EQ(tr[i].seq, static_cast<std::int64_t>(i));
}

TEST(SessionStore, DeliverableNeedsEventIdAndIsUniquePerEvent) {
  auto st_ptr = make_store();
  auto& st = *st_ptr;
  auto sid = st.create_session("u1", "companion").session_id;
  EntryDraft d;
  d.role = Role::system_integration;
  d.kind = EntryKind::deliverable;
  d.content = "done";
  EXPECT_THROW(st.append_transcript(sid, d), Error);
  d.source_event_id = "t1#3";
  st.append_transcript(sid, d);
  EXPECT_TRUE(st.has_event_entry(sid, "t1#3"));
  try {
    st.append_transcript(sid, d);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::conflict);
  }
}

TEST(SessionStore, ContextWithProfileOnly) {
  auto st_ptr = make_store();
  auto& st = *st_ptr;
  st.set_profile("u1", "Hobby", "Basketball");
  auto sid = st.create_session("u1", "companion").session_id;
  auto b = st.read_context(sid, 100);
  EXPECT_TRUE(b.entries.empty());
  ASSERT_EQ(b.profile.size(), 1u);
  EXPECT_EQ(b.profile[0], (std::pair<std::string, std::string>{"Hobby", "Basketball"}));
}

TEST(SessionStore, ContextKeepsNewestSuffixWithinBudget) {
  auto st_ptr = make_store();
  auto& st = *st_ptr;
  auto sid = st.create_session("u2", "companion").session_id;
  for (int i = 0; i < 50; ++i) st.append_transcript(sid, user_draft("w" + std::to_string(i) + " b c d e f g"));
  auto b = st.read_context(sid, 100);
  ASSERT_EQ(b.entries.size(), 10u);
  EXPECT_EQ(b.entries.front().seq, 40);
  EXPECT_EQ(b.entries.back().seq, 49);
  EXPECT_EQ(b.token_estimate, 100);
}

TEST(SessionStore, ContextNeverExceedsBudgetProperty) {
  std::mt19937 rng(42);
  for (int round = 0; round < 50; ++round) {
    auto st_ptr = make_store();
  auto& st = *st_ptr;
    auto sid = st.create_session("u", "companion").session_id;
    int n = static_cast<int>(rng() % 40);
    std::vector<std::int64_t> costs;
    for (int i = 0; i < n; ++i) {
      int words = 1 + static_cast<int>(rng() % 30);
      std::string s;
      for (int w = 0; w < words; ++w) s += "x ";
      costs.push_back(estimate_tokens(s));
      st.append_transcript(sid, user_draft(s));
    }
    std::int64_t budget = 1 + static_cast<std::int64_t>(rng() % 200);
    auto b = st.read_context(sid, budget);
    EXPECT_LE(b.token_estimate, budget);
    // greedy suffix oracle
    std::size_t keep = 0;
    std::int64_t used = 0;
    for (int i = n - 1; i >= 0 && used + costs[i] <= budget; --i) used += costs[i], ++keep;
    EXPECT_EQ(b.entries.size(), keep);
    auto again = st.read_context(sid, budget);
    EXPECT_EQ(again.entries, b.entries);
  }
}

TEST(SessionStore, ReadContextRejectsNonPositiveBudget) {
  auto st_ptr = make_store();
  auto& st = *st_ptr;
  auto sid = st.create_session("u", "companion").session_id;
  EXPECT_THROW(st.read_context(sid, 0), Error);
}

TEST(SessionStore, NuggetCommitIsIdempotentByStatement) {
  auto st_ptr = make_store();
  auto& st = *st_ptr;
  KnowledgeNugget n{"kn-1", "User is a vegetarian", NuggetScope::user, "ep-1", 0};
  EXPECT_TRUE(st.commit_nugget(NuggetScope::user, "u1", n));
  EXPECT_FALSE(st.commit_nugget(NuggetScope::user, "u1", n));
  KnowledgeNugget same_text{"kn-2", "  user IS a vegetarian ", NuggetScope::user, "ep-2", 0};
  EXPECT_FALSE(st.commit_nugget(NuggetScope::user, "u1", same_text));
  KnowledgeNugget other{"kn-3", "User likes jazz", NuggetScope::user, "ep-2", 0};
  EXPECT_TRUE(st.commit_nugget(NuggetScope::user, "u1", other));
  EXPECT_EQ(st.user_memory("u1").history.size(), 2u);
}

TEST(SessionStore, NuggetStoreCardinalityEqualsDistinctStatements) {
  std::mt19937 rng(3);
  auto st_ptr = make_store();
  auto& st = *st_ptr;
  std::set<std::string> distinct;
  for (int i = 0; i < 300; ++i) {
    auto statement = "fact " + std::to_string(rng() % 60);
    distinct.insert(statement);
    st.commit_nugget(NuggetScope::agent, "companion",
                     {"kn-" + std::to_string(i), statement, NuggetScope::agent, "ep", 0});
  }
  EXPECT_EQ(st.agent_memory("companion").nuggets.size(), distinct.size());
}

TEST(SessionStore, PendingTasks) {
  auto st_ptr = make_store();
  auto& st = *st_ptr;
  auto sid = st.create_session("u", "companion").session_id;
  st.add_pending_task(sid, "t1");
  EXPECT_TRUE(st.is_pending(sid, "t1"));
  st.remove_pending_task(sid, "t1");
  EXPECT_FALSE(st.is_pending(sid, "t1"));
}

TEST(SessionStore, LogFileHoldsExactlyEntryFieldsAndRestores) {
  auto dir = fresh_dir("log");
  std::string sid;
  {
    auto st_ptr = make_store(dir);
  auto& st = *st_ptr;
    sid = st.create_session("u1", "companion", 5).session_id;
    st.append_transcript(sid, user_draft("hello"));
    EntryDraft d;
    d.role = Role::system_integration;
    d.kind = EntryKind::deliverable;
    d.content = "result";
    d.source_event_id = "t#2";
    d.timestamp = 40;
    st.append_transcript(sid, d);
  }
  std::ifstream in(dir / (sid + ".log.jsonl"));
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    auto j = json::parse(line);
    std::set<std::string> keys;
    for (auto& [k, v] : j.items()) keys.insert(k);
    EXPECT_EQ(keys, (std::set<std::string>{"seq", "role", "kind", "content", "source_event_id", "timestamp"}));
    ++lines;
  }
  EXPECT_EQ(lines, 2);

  auto restored_ptr = make_store(dir);
  auto& restored = *restored_ptr;
  ASSERT_TRUE(restored.has_session(sid));
  auto tr = restored.transcript(sid);
  ASSERT_EQ(tr.size(), 2u);
  EXPECT_EQ(tr[1].content, "result");
  EXPECT_EQ(tr[1].source_event_id, "t#2");
  EXPECT_TRUE(restored.has_event_entry(sid, "t#2"));
  EXPECT_EQ(restored.append_transcript(sid, user_draft("again")), 2);
  fs::remove_all(dir);
}

TEST(SessionStore, EntryJsonRoundTrip) {
  TranscriptEntry e{4, Role::assistant, EntryKind::bridge, "on it", std::nullopt, 12};
  EXPECT_EQ(json(e).get<TranscriptEntry>(), e);
  EXPECT_EQ(json(e)["role"], "assistant");
  TranscriptEntry s{5, Role::system_integration, EntryKind::progress_note, "x", "t#1", 13};
  EXPECT_EQ(json(s)["role"], "system-integration");
  EXPECT_EQ(json(s)["kind"], "progress-note");
  EXPECT_EQ(json(s).get<TranscriptEntry>(), s);
}
