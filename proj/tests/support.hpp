// Shared fixtures for the unit and acceptance tests.
#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "dualtrack/augmentation.hpp"
#include "dualtrack/clock.hpp"
#include "dualtrack/slow_track.hpp"

namespace testsupport {

using namespace dualtrack;

// Scheduler + tools + profiles + slow track, with helpers for fixed-latency tools.
struct World {
  Scheduler clock;
  ToolRegistry tools{42};
  ProfileRegistry profiles = ProfileRegistry::defaults();
  std::unique_ptr<SlowTrack> track;

  explicit World(ExecutorConfig cfg = {}, DelegationLimits limits = {}) {
    register_builtin_tools(tools);
    track = std::make_unique<SlowTrack>(clock, tools, profiles, nullptr, cfg, limits);
  }

  // "fixed_<ms>": takes x, echoes it back as value.
  std::string fixed_tool(Millis ms) {
    std::string id = "fixed_" + std::to_string(ms);
    if (!tools.has(id)) {
      ToolDescriptor d;
      d.tool_id = id;
      d.description = "fixed latency test tool";
      d.arg_schema = {{"x", ArgSpec{"string", true}}};
      d.result_schema = {{"value", "string"}, {"summary", "string"}};
      d.latency = LatencyModel::fixed(ms);
      tools.register_tool(d, [id](const ArgMap& a, std::uint64_t) {
        return json{{"value", a.at("x")}, {"summary", id + ":" + a.at("x")}};
      });
    }
    return id;
  }

  ExecutionTrace run(TaskGraph g, std::vector<Constraint> constraints = {}) {
    std::optional<ExecutionTrace> out;
    TaskHooks hooks;
    hooks.on_finished = [&](const ExecutionTrace& t) { out = t; };
    auto r = track->start(std::move(g), "Generalist", std::move(constraints), hooks);
    clock.run();
    if (!out) return r->trace();
    return *out;
  }
};

inline PlanStep step(std::string id, std::string tool, ArgMap args = {{"x", "1"}}) {
  PlanStep s;
  s.step_id = std::move(id);
  s.tool = std::move(tool);
  s.args = std::move(args);
  return s;
}

// Size of the largest antichain of a DAG: n minus a maximum matching in the
// bipartite graph of its transitive closure (Dilworth).
inline int dag_width(int n, const std::vector<std::pair<int, int>>& edges) {
  std::vector<std::vector<bool>> reach(n, std::vector<bool>(n, false));
  for (auto [a, b] : edges) reach[a][b] = true;
  for (int k = 0; k < n; ++k)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (reach[i][k] && reach[k][j]) reach[i][j] = true;
  std::vector<int> match(n, -1);
  std::function<bool(int, std::vector<bool>&)> augment = [&](int u, std::vector<bool>& seen) {
    for (int v = 0; v < n; ++v)
      if (reach[u][v] && !seen[v]) {
        seen[v] = true;
        if (match[v] < 0 || augment(match[v], seen)) {
          match[v] = u;
          return true;
        }
      }
    return false;
  };
  int m = 0;
  for (int u = 0; u < n; ++u) {
    std::vector<bool> seen(n, false);
    if (augment(u, seen)) ++m;
  }
  return n - m;
}

struct RandomDag {
  int n = 0;
  std::vector<std::pair<int, int>> edges;  // i < j
  std::vector<Millis> duration;
};

inline RandomDag random_dag(std::mt19937_64& rng, int max_steps, int max_width) {
  for (;;) {
    RandomDag d;
    d.n = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(max_steps));
    for (int j = 0; j < d.n; ++j)
      for (int i = 0; i < j; ++i)
        if (rng() % 3 == 0) d.edges.emplace_back(i, j);
    for (int i = 0; i < d.n; ++i) d.duration.push_back(50 + static_cast<Millis>(rng() % 20) * 50);
    if (dag_width(d.n, d.edges) <= max_width) return d;
  }
}

// Longest path by simple relaxation in index order (edges go low -> high).
inline Millis longest_path(const RandomDag& d) {
  std::vector<Millis> finish(d.n, 0);
  Millis best = 0;
  for (int j = 0; j < d.n; ++j) {
    Millis start = 0;
    for (auto [a, b] : d.edges)
      if (b == j) start = std::max(start, finish[a]);
    finish[j] = start + d.duration[j];
    best = std::max(best, finish[j]);
  }
  return best;
}

inline TaskGraph to_graph(World& w, const RandomDag& d, const std::string& task_id) {
  TaskGraph g;
  g.task_id = task_id;
  for (int i = 0; i < d.n; ++i) g.steps.push_back(step("s" + std::to_string(i + 1), w.fixed_tool(d.duration[i])));
  for (auto [a, b] : d.edges) g.edges.emplace_back("s" + std::to_string(a + 1), "s" + std::to_string(b + 1));
  return g;
}

}  // namespace testsupport
