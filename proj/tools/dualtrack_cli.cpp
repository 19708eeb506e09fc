// dualtrack: terminal chat, benchmark, flywheel, corpus generation, service.
#include <csignal>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "dualtrack/config.hpp"
#include "dualtrack/evolution.hpp"
#include "dualtrack/harness.hpp"
#include "dualtrack/service.hpp"

using namespace dualtrack;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<Millis> budget_ms;
  std::string perception;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "flat key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "RNG seed");
  cmd->add_option("--budget-ms", c.budget_ms, "first-response budget");
  cmd->add_option("--perception", c.perception, "decoupled | monolithic")
      ->check(CLI::IsMember({"decoupled", "monolithic"}));
}

// flags override the file
Settings resolve(const Common& c) {
  Settings s = c.config.empty() ? Settings{} : load_settings(c.config);
  if (c.seed) s.engine.seed = *c.seed;
  if (c.budget_ms) s.engine.ttft_budget_ms = *c.budget_ms;
  if (!c.perception.empty()) s.engine.perception.paradigm = parse_paradigm(c.perception);
  return s;
}

void print_entry(const TranscriptEntry& e) {
  std::cout << "[" << e.timestamp << " ms] " << to_string(e.role) << "/" << to_string(e.kind) << ": " << e.content
            << "\n";
}

int cmd_chat(const Settings& s, const std::string& user, const std::string& episodes_dir) {
  EngineParts parts = make_parts(s);
  if (s.classifier == "model" || s.responder == "model" || s.planner == "model") {
    try {
      HttpCompletion(s.model_url, s.model_name).complete("ping");
    } catch (const std::exception& e) {
      std::cerr << "backend unreachable: " << e.what() << "\n";
      return 2;
    }
  }
  Engine engine(s.engine, parts);
  auto sid = engine.create_session(user);
  std::int64_t printed = 0;
  std::size_t events = 0;
  std::cout << "session " << sid << " (type /quit to leave)\n";
  std::string line;
  while (std::cout << "> " << std::flush, std::getline(std::cin, line)) {
    if (text::trim(line) == "/quit") break;
    if (text::trim(line).empty()) continue;
    auto in = text_turn(line);
    if (auto pending = engine.pending_clarification(sid)) in.answers_task = *pending;
    std::size_t idx;
    try {
      idx = engine.submit_turn(sid, std::move(in));
    } catch (const Error& e) {
      std::cerr << "error: " << e.what() << "\n";
      continue;
    }
    engine.run();
    for (const auto& ev : engine.bus().feed(sid, events)) {
      ++events;
      if (ev.kind == EventKind::progress && ev.payload.is_object())
        std::cout << "  . " << ev.task_id << " " << ev.payload.value("step_id", "") << " -> "
                  << ev.payload.value("state", "") << " @" << ev.emitted_at << " ms\n";
    }
    for (const auto& e : engine.store().transcript(sid, printed)) {
      if (e.role != Role::user) print_entry(e);
      printed = e.seq + 1;
    }
    const auto& r = engine.turns()[idx];
    if (r.ttft())
      std::cout << "  (" << to_string(r.decision.mode) << ", first response after " << *r.ttft() << " ms, budget "
                << s.engine.ttft_budget_ms << " ms)\n";
    engine.run_until(engine.now() + 1000);
  }
  auto turns = engine.turns(sid);
  engine.store().close_session(sid);
  if (!turns.empty()) {
    try {
      auto ep = log_episode(engine.store(), turns, 0, turns.size());
      auto path = save_episode(ep, episodes_dir);
      std::cout << "episode logged: " << path.string() << "\n";
    } catch (const Error& e) {
      std::cerr << "episode not logged: " << e.what() << "\n";
    }
  }
  return 0;
}

int cmd_bench(const Settings& s, const std::string& corpus_path, const std::string& out,
              const std::string& episodes_dir) {
  if (!std::filesystem::exists(corpus_path)) {
    std::cerr << "usage error: corpus file not found: " << corpus_path << "\n";
    return 2;
  }
  std::vector<BenchmarkCase> corpus;
  try {
    corpus = load_corpus(corpus_path);
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }
  BenchOptions opt;
  opt.turn_gap_ms = s.turn_gap_ms;
  opt.parts = make_parts(s);
  if (!episodes_dir.empty())
    opt.on_case = [&](const BenchmarkCase&, CaseRun& run) {
      auto turns = run.engine->turns(run.session_id);
      save_episode(log_episode(run.engine->store(), turns, 0, turns.size()), episodes_dir);
    };
  MetricsReport rep;
  try {
    rep = run_bench(corpus, s.engine, s.engine.seed, opt);
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }
  if (!out.empty()) {
    std::filesystem::path p(out);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary);
    if (!f) {
      std::cerr << "cannot write " << out << "\n";
      return 2;
    }
    f << report_text(rep);
  }
  std::cout << report_table(rep);
  return rep.checks.ok() ? 0 : 1;
}

int cmd_flywheel(const Settings& s, const std::string& episodes_dir, const std::string& out_dir,
                 std::optional<int> version) {
  auto episodes = load_episodes(episodes_dir);
  if (episodes.empty()) std::cerr << "warning: no episodes in " << episodes_dir << "\n";
  FlywheelOptions opt;
  opt.sample_rate = s.sample_rate;
  opt.seed = s.engine.seed;
  opt.sentiment_threshold = s.sentiment_threshold;
  opt.out_dir = out_dir;
  // successive runs stage evo-v1, evo-v2, ...
  opt.version = version.value_or(0);
  if (!version) {
    opt.version = 1;
    while (std::filesystem::exists(opt.out_dir / stage_name(opt.version))) ++opt.version;
  }
  ToolRegistry catalog;
  register_builtin_tools(catalog);
  ReferenceJudge judge(&catalog);
  auto rep = run_flywheel(episodes, judge, opt);
  std::cout << "stage " << stage_name(opt.version) << "\n"
            << "episodes        " << rep.episodes << "\n"
            << "silver          " << rep.silver << "  " << rep.silver_path.string() << "\n"
            << "gold candidates " << rep.gold_candidates << "  " << rep.gold_path.string() << "\n"
            << "nuggets         " << rep.nuggets << "\n";
  return 0;
}

volatile std::sig_atomic_t g_stop = 0;

int cmd_serve(const Settings& s) {
  Service svc(s, make_parts(s));
  int port = svc.start();
  std::cout << "listening on http://" << s.host << ":" << port << std::endl;
  std::signal(SIGINT, [](int) { g_stop = 1; });
  std::signal(SIGTERM, [](int) { g_stop = 1; });
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  svc.stop();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dual-track conversational orchestration engine"};
  app.require_subcommand(1);

  Common common;
  std::string user = "local-user", episodes = "episodes", corpus, out, out_dir = "evo", host;
  std::optional<int> version, port;

  auto* chat = app.add_subcommand("chat", "interactive terminal session");
  add_common(chat, common);
  chat->add_option("--user", user, "user id");
  chat->add_option("--episodes", episodes, "where the closing episode is logged");

  auto* bench = app.add_subcommand("bench", "replay a corpus under the virtual clock");
  add_common(bench, common);
  bench->add_option("--corpus", corpus, "corpus JSON (default from config)");
  bench->add_option("--out", out, "report file");
  std::string bench_episodes;
  bench->add_option("--episodes", bench_episodes, "log one episode per case into this directory");

  auto* fly = app.add_subcommand("flywheel", "judge, curate and export logged episodes");
  add_common(fly, common);
  fly->add_option("--episodes", episodes, "episode store")->required();
  fly->add_option("--out", out_dir, "output root");
  fly->add_option("--version", version, "stage number (default: next free)");

  auto* serve = app.add_subcommand("serve", "HTTP service with a live event stream");
  add_common(serve, common);
  serve->add_option("--host", host, "bind address");
  serve->add_option("--port", port, "port (0 picks one)");

  auto* gen = app.add_subcommand("gen-corpus", "write the bundled benchmark corpus");
  add_common(gen, common);
  std::string gen_out = "data/corpus.json";
  gen->add_option("--out", gen_out, "output path");

  auto* keys = app.add_subcommand("config-keys", "list accepted config keys");

  CLI11_PARSE(app, argc, argv);

  try {
    Settings s = resolve(common);
    if (*chat) return cmd_chat(s, user, episodes);
    if (*bench) return cmd_bench(s, corpus.empty() ? s.corpus : corpus, out, bench_episodes);
    if (*fly) return cmd_flywheel(s, episodes, out_dir, version);
    if (*serve) {
      if (!host.empty()) s.host = host;
      if (port) s.port = *port;
      return cmd_serve(s);
    }
    if (*gen) {
      save_corpus(generate_corpus(s.engine.seed), gen_out);
      std::cout << "wrote " << gen_out << "\n";
      return 0;
    }
    if (*keys) {
      for (const auto& [k, help] : setting_keys()) std::cout << k << "\t" << help << "\n";
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
