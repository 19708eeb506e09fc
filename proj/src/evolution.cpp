#include "dualtrack/evolution.hpp"

#include <algorithm>
#include <fstream>
#include <regex>
#include <set>

namespace dualtrack {

namespace {

json decision_json(const RoutingDecision& d) { return to_wire(d); }

RoutingDecision decision_from(const json& j) { return validate_decision(j.dump()); }

json trace_item_json(const TraceItem& t) {
  return json{{"task_id", t.task_id},
              {"step_id", t.step_id},
              {"payload", t.payload},
              {"token_estimate", t.token_estimate},
              {"folded", t.folded},
              {"archive_ref", t.archive_ref}};
}

TraceItem trace_item_from(const json& j) {
  TraceItem t;
  t.task_id = j.at("task_id").get<std::string>();
  t.step_id = j.at("step_id").get<std::string>();
  t.payload = j.at("payload").get<std::string>();
  t.token_estimate = j.at("token_estimate").get<std::int64_t>();
  t.folded = j.at("folded").get<bool>();
  t.archive_ref = j.at("archive_ref").get<std::string>();
  return t;
}

const std::set<std::string>& positive_words() {
  static const std::set<std::string> w = {"great", "good",  "thanks", "thank",     "love",  "perfect",
                                          "nice",  "happy", "awesome", "excellent", "cool",  "wonderful",
                                          "yes",   "helpful", "amazing", "glad",    "fantastic", "like"};
  return w;
}

const std::set<std::string>& negative_words() {
  static const std::set<std::string> w = {"bad",   "wrong", "hate",     "terrible", "awful",   "no",
                                          "not",   "useless", "annoying", "worse",  "worst",   "sad",
                                          "angry", "exhausted", "tired",  "slow",   "horrible", "dislike"};
  return w;
}

bool is_correction(const std::string& text) {
  auto low = text::lower(text);
  static const std::regex re("^(no\\b|nope\\b|not that\\b|that's wrong|thats wrong|wrong\\b|i meant\\b|actually\\b)|"
                             "\\bnot what i (asked|meant|wanted)\\b");
  return std::regex_search(text::trim(low), re);
}

}  // namespace

void to_json(json& j, const Episode& e) {
  json turns = json::array();
  for (const auto& t : e.turns) turns.push_back(t);
  json decisions = json::array();
  for (const auto& d : e.routing_decisions) decisions.push_back(decision_json(d));
  json wm = json::array();
  for (const auto& t : e.working_memory) wm.push_back(trace_item_json(t));
  j = json{{"episode_id", e.episode_id},
           {"session_id", e.session_id},
           {"user_id", e.user_id},
           {"turns", turns},
           {"traces", e.traces},
           {"routing_decisions", decisions},
           {"working_memory", wm},
           {"outcome_signals",
            {{"followed_up", e.outcome.followed_up},
             {"user_sentiment", e.outcome.user_sentiment},
             {"corrections", e.outcome.corrections}}}};
  j["expected_tools"] = e.expected_tools ? json(*e.expected_tools) : json(nullptr);
}

void from_json(const json& j, Episode& e) {
  e.episode_id = j.at("episode_id").get<std::string>();
  e.session_id = j.at("session_id").get<std::string>();
  e.user_id = j.value("user_id", std::string{});
  e.turns.clear();
  for (const auto& t : j.at("turns")) e.turns.push_back(t.get<TranscriptEntry>());
  e.traces = j.at("traces").get<std::vector<json>>();
  e.routing_decisions.clear();
  for (const auto& d : j.at("routing_decisions")) e.routing_decisions.push_back(decision_from(d));
  e.working_memory.clear();
  if (j.contains("working_memory"))
    for (const auto& t : j["working_memory"]) e.working_memory.push_back(trace_item_from(t));
  const auto& o = j.at("outcome_signals");
  e.outcome.followed_up = o.at("followed_up").get<bool>();
  e.outcome.user_sentiment = o.at("user_sentiment").get<double>();
  e.outcome.corrections = o.at("corrections").get<int>();
  if (j.contains("expected_tools") && !j["expected_tools"].is_null())
    e.expected_tools = j["expected_tools"].get<std::vector<std::string>>();
  else
    e.expected_tools.reset();
}

Episode log_episode(const SessionStore& store, const std::vector<TurnRecord>& session_turns, std::size_t first,
                    std::size_t last) {
  last = std::min(last, session_turns.size());
  if (first >= last) throw Error(ErrorKind::invalid_argument, "episode window is empty");
  bool any_done = false;
  for (std::size_t i = first; i < last; ++i)
    any_done = any_done || session_turns[i].first_response_at.has_value();
  if (!any_done) throw Error(ErrorKind::invalid_argument, "episode window has no completed turn");

  const auto& sid = session_turns[first].session_id;
  auto state = store.snapshot(sid);
  Episode e;
  e.session_id = sid;
  e.user_id = state.user_id;
  e.episode_id = "ep-" + hex_id(fnv1a(state.user_id + "/" + sid + ":" + std::to_string(first) + "-" + std::to_string(last)));

  // user entries mark turn boundaries
  std::size_t user_seen = 0;
  bool inside = false;
  for (const auto& entry : state.transcript) {
    if (entry.role == Role::user) {
      inside = user_seen >= first && user_seen < last;
      ++user_seen;
    }
    if (inside) e.turns.push_back(entry);
  }

  std::set<std::string> tasks;
  for (std::size_t i = first; i < last; ++i) {
    const auto& r = session_turns[i];
    e.routing_decisions.push_back(r.decision);
    if (r.trace && !r.clarification_answer) e.traces.push_back(*r.trace);
    if (r.task_id) tasks.insert(*r.task_id);
  }
  for (const auto& t : state.working_memory)
    if (tasks.count(t.task_id)) e.working_memory.push_back(t);

  bool seen_assistant = false;
  std::string user_text;
  for (const auto& t : e.turns) {
    if (t.role != Role::user) {
      seen_assistant = true;
      continue;
    }
    user_text += t.content + " ";
    if (seen_assistant && !is_terminal_reply(t.content)) e.outcome.followed_up = true;
    if (seen_assistant && is_correction(t.content)) ++e.outcome.corrections;
  }
  e.outcome.user_sentiment = sentiment_score(user_text);
  return e;
}

std::filesystem::path save_episode(const Episode& e, const std::filesystem::path& dir) {
  auto folder = dir / "episodes";
  std::filesystem::create_directories(folder);
  auto path = folder / (e.episode_id + ".json");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
  out << json(e).dump(2) << "\n";
  return path;
}

Episode load_episode(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot read " + path.string());
  return json::parse(in).get<Episode>();
}

std::vector<Episode> load_episodes(const std::filesystem::path& dir) {
  auto folder = dir / "episodes";
  std::vector<std::filesystem::path> files;
  if (std::filesystem::exists(folder))
    for (const auto& f : std::filesystem::directory_iterator(folder))
      if (f.path().extension() == ".json") files.push_back(f.path());
  std::sort(files.begin(), files.end());
  std::vector<Episode> out;
  for (const auto& f : files) out.push_back(load_episode(f));
  return out;
}

// ---------------------------------------------------------------------------

void to_json(json& j, const JudgeVerdict& v) {
  j = json{{"engagement", v.engagement},
           {"compliance", v.compliance},
           {"sentiment", v.sentiment},
           {"reasoning", v.reasoning}};
}

double sentiment_score(const std::string& text) {
  int pos = 0, neg = 0;
  for (const auto& tok : text::tokens(text)) {
    if (positive_words().count(tok)) ++pos;
    if (negative_words().count(tok)) ++neg;
  }
  double s = static_cast<double>(pos - neg) / std::max(1, pos + neg);
  return std::clamp(s, -1.0, 1.0);
}

bool is_terminal_reply(const std::string& text) {
  auto toks = text::tokens(text);
  if (toks.empty()) return true;
  return toks.size() == 1 && (toks[0] == "bye" || toks[0] == "stop" || toks[0] == "cancel");
}

JudgeVerdict ReferenceJudge::judge(const Episode& e) {
  JudgeVerdict v;
  std::vector<std::string> notes;

  bool seen_assistant = false;
  for (const auto& t : e.turns) {
    if (t.role != Role::user) seen_assistant = true;
    else if (seen_assistant && !is_terminal_reply(t.content)) v.engagement = true;
  }
  notes.push_back(v.engagement ? "user followed up" : "no follow-up turn");

  std::set<std::string> allowed;
  if (e.expected_tools) allowed.insert(e.expected_tools->begin(), e.expected_tools->end());
  else
    for (const auto& d : e.routing_decisions)
      if (d.plan)
        for (const auto& p : *d.plan) allowed.insert(p.tool);
  v.compliance = true;
  for (const auto& tr : e.traces) {
    if (!tr.contains("invocations")) continue;
    for (const auto& inv : tr["invocations"]) {
      auto tool = inv.at("tool").get<std::string>();
      if (!allowed.count(tool)) {
        v.compliance = false;
        notes.push_back(tool + " was not in the plan");
        continue;
      }
      if (catalog_) {
        try {
          catalog_->validate_args(tool, inv.at("args").get<ArgMap>());
        } catch (const Error& err) {
          v.compliance = false;
          notes.push_back(std::string("invalid args: ") + err.what());
        }
      }
    }
  }
  if (v.compliance) notes.push_back("tool calls match the plan");

  std::string user_text;
  for (const auto& t : e.turns)
    if (t.role == Role::user) user_text += t.content + " ";
  v.sentiment = sentiment_score(user_text);
  notes.push_back("sentiment " + std::to_string(v.sentiment));
  v.reasoning = text::join(notes, "; ");
  return v;
}

RubricScore validate_rubric(std::string_view raw) {
  json j;
  try {
    j = json::parse(raw);
  } catch (const json::parse_error& e) {
    throw SchemaViolation(std::string("judge output is not JSON: ") + e.what(), e.byte);
  }
  auto offset_of = [&](const std::string& key) -> std::size_t {
    auto pos = raw.find("\"" + key + "\"");
    return pos == std::string_view::npos ? 0 : pos;
  };
  if (!j.is_object()) throw SchemaViolation("judge output must be an object", 0);
  static const std::set<std::string> fields = {"persona_score", "empathy_score", "fidelity_hit", "reasoning"};
  for (const auto& [k, _] : j.items())
    if (!fields.count(k)) throw SchemaViolation("unknown field: " + k, offset_of(k));
  for (const auto& k : fields)
    if (!j.contains(k)) throw SchemaViolation("missing field: " + k, 0);
  RubricScore r;
  for (const char* k : {"persona_score", "empathy_score"}) {
    if (!j[k].is_number_integer()) throw SchemaViolation(std::string(k) + " must be an integer", offset_of(k));
    int s = j[k].get<int>();
    if (s < 1 || s > 5) throw SchemaViolation(std::string(k) + " must be within 1..5", offset_of(k));
  }
  if (!j["fidelity_hit"].is_boolean()) throw SchemaViolation("fidelity_hit must be a boolean", offset_of("fidelity_hit"));
  if (!j["reasoning"].is_string()) throw SchemaViolation("reasoning must be a string", offset_of("reasoning"));
  r.persona_score = j["persona_score"].get<int>();
  r.empathy_score = j["empathy_score"].get<int>();
  r.fidelity_hit = j["fidelity_hit"].get<bool>();
  r.reasoning = j["reasoning"].get<std::string>();
  return r;
}

JudgeVerdict ModelJudge::judge(const Episode& e) {
  std::string prompt =
      "Rate the assistant in this conversation. Answer with JSON only: "
      "{\"persona_score\": 1-5, \"empathy_score\": 1-5, \"fidelity_hit\": true|false, \"reasoning\": \"...\"}\n";
  for (const auto& t : e.turns) prompt += std::string(to_string(t.role)) + ": " + t.content + "\n";
  auto rubric = validate_rubric(backend_->complete(prompt));
  JudgeVerdict v = ReferenceJudge().judge(e);
  v.compliance = rubric.fidelity_hit;
  v.sentiment = std::clamp((rubric.empathy_score - 3) / 2.0, -1.0, 1.0);
  v.reasoning = rubric.reasoning;
  return v;
}

// ---------------------------------------------------------------------------

bool passes(const JudgeVerdict& v, double threshold) {
  return v.engagement && v.compliance && v.sentiment >= threshold;
}

std::vector<std::size_t> seeded_sample(std::size_t n, std::size_t k, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  k = std::min(k, n);
  std::mt19937_64 rng(seed);
  // partial Fisher-Yates with a plain modulo draw, identical on every platform
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t j = i + static_cast<std::size_t>(rng() % (n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

CurationResult curate(const std::vector<Episode>& episodes, const std::vector<JudgeVerdict>& verdicts,
                      double sample_rate, std::uint64_t seed, double threshold) {
  if (episodes.size() != verdicts.size())
    throw Error(ErrorKind::invalid_argument, "curate needs one verdict per episode");
  if (sample_rate < 0 || sample_rate > 1) throw Error(ErrorKind::invalid_argument, "sample rate must be in [0,1]");
  CurationResult out;
  for (std::size_t i = 0; i < episodes.size(); ++i)
    if (passes(verdicts[i], threshold)) out.silver.push_back(episodes[i]);
  auto k = static_cast<std::size_t>(std::llround(sample_rate * static_cast<double>(out.silver.size())));
  for (auto i : seeded_sample(out.silver.size(), k, seed)) out.gold_candidates.push_back(out.silver[i]);
  return out;
}

std::string stratum(const Episode& e) {
  int chat = 0, other = 0;
  for (const auto& d : e.routing_decisions) (d.mode == Mode::chat ? chat : other)++;
  return chat > other ? "conversation" : "collaboration";
}

std::size_t export_sft(const std::vector<Episode>& episodes, const std::vector<JudgeVerdict>& verdicts,
                       const std::filesystem::path& path) {
  if (!verdicts.empty() && verdicts.size() != episodes.size())
    throw Error(ErrorKind::invalid_argument, "export needs one verdict per episode");
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
  out << json{{"format", "dualtrack-sft"}, {"version", 1}, {"records", episodes.size()}}.dump() << "\n";
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const auto& e = episodes[i];
    json input = json::array();
    std::string deliverable;
    for (const auto& t : e.turns) {
      if (t.role == Role::user) input.push_back(t.content);
      if (t.kind == EntryKind::deliverable || (t.role == Role::assistant && t.kind == EntryKind::turn))
        deliverable = t.content;
    }
    json decisions = json::array();
    for (const auto& d : e.routing_decisions) decisions.push_back(to_wire(d));
    json plan = json::array();
    for (const auto& t : e.working_memory) {
      json item{{"branch_id", t.task_id + "/" + t.step_id}, {"folded", t.folded}};
      if (t.folded) {
        item["summary"] = t.payload;
        item["archive_ref"] = t.archive_ref;
      } else {
        item["raw"] = t.payload;
      }
      plan.push_back(std::move(item));
    }
    json rec{{"episode_id", e.episode_id},
             {"stratum", stratum(e)},
             {"input_context", input},
             {"routing_decision", decisions},
             {"plan", plan},
             {"deliverable", deliverable}};
    rec["verdict"] = verdicts.empty() ? json(nullptr) : json(verdicts[i]);
    out << rec.dump() << "\n";
  }
  if (!out) throw Error(ErrorKind::io, "write failed for " + path.string());
  return episodes.size();
}

std::string stage_name(int version) { return "evo-v" + std::to_string(version); }

// ---------------------------------------------------------------------------

TraceArchive::TraceArchive(std::filesystem::path path) : path_(std::move(path)) {
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  std::ofstream touch(path_, std::ios::binary | std::ios::app);
  if (!touch) throw Error(ErrorKind::io, "cannot open archive " + path_.string());
}

std::string TraceArchive::append(const std::string& raw) {
  std::ofstream out(path_, std::ios::binary | std::ios::app);
  if (!out) throw Error(ErrorKind::io, "cannot append to archive " + path_.string());
  auto offset = std::filesystem::file_size(path_);
  out.write(raw.data(), static_cast<std::streamsize>(raw.size()));
  out.flush();
  if (!out) throw Error(ErrorKind::io, "archive write failed");
  return std::to_string(offset) + ":" + std::to_string(raw.size());
}

std::string TraceArchive::read(const std::string& ref) const {
  auto colon = ref.find(':');
  if (colon == std::string::npos) throw Error(ErrorKind::invalid_argument, "bad archive ref: " + ref);
  std::uint64_t offset = std::stoull(ref.substr(0, colon));
  std::uint64_t length = std::stoull(ref.substr(colon + 1));
  std::ifstream in(path_, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot read archive " + path_.string());
  in.seekg(static_cast<std::streamoff>(offset));
  std::string buf(length, '\0');
  in.read(buf.data(), static_cast<std::streamsize>(length));
  if (static_cast<std::uint64_t>(in.gcount()) != length)
    throw Error(ErrorKind::io, "archive ref out of range: " + ref);
  return buf;
}

std::optional<FoldedBranch> fold(TraceItem& item, std::int64_t cap, TraceArchive& archive) {
  if (item.folded) return std::nullopt;
  auto original = estimate_tokens(item.payload);
  item.token_estimate = original;
  if (original <= cap) return std::nullopt;

  // summary: step, tool, terminal state and the head of the result
  std::string summary;
  try {
    auto j = json::parse(item.payload);
    summary = item.step_id;
    if (j.is_object()) {
      if (j.contains("tool")) summary += " " + j["tool"].get<std::string>();
      if (j.contains("state")) summary += " " + j["state"].get<std::string>();
      std::string head = j.value("summary", j.value("failure", std::string{}));
      if (!head.empty()) summary += ": " + head;
    }
  } catch (const json::exception&) {
    summary = item.step_id + ": " + item.payload;
  }
  summary = truncate_to_tokens(summary, cap);

  FoldedBranch b;
  b.branch_id = item.task_id + "/" + item.step_id;
  b.archive_ref = archive.append(item.payload);
  b.summary = summary;
  b.original_tokens = original;
  b.folded_tokens = estimate_tokens(summary);
  item.payload = summary;
  item.token_estimate = b.folded_tokens;
  item.folded = true;
  item.archive_ref = b.archive_ref;
  return b;
}

std::string unfold(const TraceItem& item, const TraceArchive& archive) {
  if (!item.folded) return item.payload;
  return archive.read(item.archive_ref);
}

std::vector<FoldedBranch> fold_working_memory(SessionStore& store, const std::string& session_id,
                                              std::int64_t cap, TraceArchive& archive) {
  std::vector<FoldedBranch> out;
  store.update_working_memory(session_id, [&](std::vector<TraceItem>& items) {
    for (auto& it : items)
      if (auto b = fold(it, cap, archive)) out.push_back(std::move(*b));
  });
  return out;
}

std::int64_t working_memory_tokens(const std::vector<TraceItem>& items) {
  std::int64_t n = 0;
  for (const auto& t : items) n += t.token_estimate;
  return n;
}

// ---------------------------------------------------------------------------

std::vector<KnowledgeNugget> distill(const Episode& e, Millis now) {
  std::vector<KnowledgeNugget> out;
  auto add = [&](std::string statement) {
    if (statement.size() > 200) statement.resize(200);
    for (const auto& n : out)
      if (text::normalize(n.statement) == text::normalize(statement)) return;
    KnowledgeNugget n;
    n.statement = statement;
    n.scope = NuggetScope::user;
    n.provenance = e.episode_id;
    n.created_at = now;
    n.nugget_id = "kn-" + hex_id(fnv1a(text::normalize(statement), fnv1a(e.user_id)));
    out.push_back(std::move(n));
  };
  auto clean = [](std::string s) {
    while (!s.empty() && std::string(".,;!? ").find(s.back()) != std::string::npos) s.pop_back();
    return text::trim(s);
  };

  static const std::regex dislike("\\b(?:i\\s+)?(?:dislike|dislikes|hate|don't like|do not like)\\s+([a-z][a-z \\-]{1,60})");
  static const std::regex prefer("\\b(?:i\\s+)?(?:prefer|prefers)\\s+([a-z][a-z \\-]{1,80})");
  static const std::regex is_a("\\b(?:i am|i'm|user is)\\s+(?:a|an)\\s+([a-z][a-z\\-]{1,30})");
  for (const auto& t : e.turns) {
    if (t.role != Role::user) continue;
    auto low = text::lower(t.content);
    std::smatch m;
    if (std::regex_search(low, m, dislike)) add("User dislikes " + clean(m[1].str()));
    if (std::regex_search(low, m, prefer)) add("User prefers " + clean(m[1].str()));
    if (std::regex_search(low, m, is_a)) add("User is a " + clean(m[1].str()));
  }

  static const std::regex cons("^(dislike|require)\\((.+)\\)$");
  for (const auto& tr : e.traces) {
    if (!tr.contains("constraint_log") || !tr.contains("constraints")) continue;
    // only constraints that actually shaped a result
    std::set<std::string> used;
    for (const auto& line : tr["constraint_log"]) {
      auto s = line.get<std::string>();
      auto sp = s.find(" removed ");
      if (sp != std::string::npos) used.insert(s.substr(0, sp));
    }
    for (const auto& c : tr["constraints"]) {
      auto s = c.get<std::string>();
      std::smatch m;
      if (!used.count(s) || !std::regex_match(s, m, cons)) continue;
      add(std::string(m[1].str() == "dislike" ? "User dislikes " : "User requires ") + m[2].str());
    }
  }
  return out;
}

std::size_t commit_nuggets(SessionStore& store, const Episode& e, const std::vector<KnowledgeNugget>& nuggets) {
  std::size_t fresh = 0;
  for (const auto& n : nuggets)
    if (store.commit_nugget(n.scope, n.scope == NuggetScope::user ? e.user_id : "default", n)) ++fresh;
  return fresh;
}

// ---------------------------------------------------------------------------

FlywheelReport run_flywheel(const std::vector<Episode>& episodes, Judge& judge, const FlywheelOptions& opt,
                            SessionStore* store) {
  FlywheelReport r;
  r.episodes = episodes.size();
  std::vector<JudgeVerdict> verdicts;
  for (const auto& e : episodes) verdicts.push_back(judge.judge(e));
  auto cur = curate(episodes, verdicts, opt.sample_rate, opt.seed, opt.sentiment_threshold);

  auto verdict_of = [&](const std::vector<Episode>& subset) {
    std::vector<JudgeVerdict> vs;
    for (const auto& s : subset)
      for (std::size_t i = 0; i < episodes.size(); ++i)
        if (episodes[i].episode_id == s.episode_id) {
          vs.push_back(verdicts[i]);
          break;
        }
    return vs;
  };
  auto dir = opt.out_dir / stage_name(opt.version);
  r.silver_path = dir / "silver.jsonl";
  r.gold_path = dir / "gold_candidates.jsonl";
  r.silver = export_sft(cur.silver, verdict_of(cur.silver), r.silver_path);
  r.gold_candidates = export_sft(cur.gold_candidates, verdict_of(cur.gold_candidates), r.gold_path);
  for (const auto& e : cur.silver) {
    auto nuggets = distill(e);
    r.nuggets += store ? commit_nuggets(*store, e, nuggets) : nuggets.size();
  }
  return r;
}

}  // namespace dualtrack
