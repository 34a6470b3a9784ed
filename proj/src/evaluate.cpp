#include "fairnav/evaluate.hpp"

#include <algorithm>
#include <atomic>
#include <iostream>
#include <mutex>
#include <stdexcept>
#include <thread>

#include <json.hpp>

namespace fairnav {

DelayStats delay_stats(std::span<const double> delays) {
  if (delays.empty()) throw std::invalid_argument("delay_stats: no delays");
  const auto n = static_cast<double>(delays.size());
  double sum = 0.0;
  double maxd = delays[0];
  for (double d : delays) {
    sum += d;
    maxd = std::max(maxd, d);
  }
  const double mean = sum / n;
  double sq = 0.0;
  for (double d : delays) sq += (d - mean) * (d - mean);
  return {sq / n, maxd, mean};
}

Scenario evaluation_scenario(const EvalSettings& s, std::uint64_t episode) {
  for (std::uint64_t attempt = 0;; ++attempt) {
    const std::uint64_t seed = hash_key({s.seed, 0x6576616cULL, episode, attempt});
    try {
      return generate_scenario(s.family, s.n_agents, s.n_obstacles, seed, s.map_size);
    } catch (const GenerationFailed&) {
      if (attempt >= 16) throw;
    }
  }
}

EpisodeMetrics evaluate_episode(const PolicyBundle& bundle, const EvalSettings& s,
                                std::uint64_t episode) {
  const Limits lim{s.map_size};
  const PolicyRunner runner(bundle, lim, s.residual_fraction);
  const Scenario scenario = evaluation_scenario(s, episode);

  EpisodeOptions options;
  options.protocol.controller = s.controller;
  options.protocol.ablations = s.ablations;
  options.protocol.constants = s.fairness;
  options.protocol.deterministic = true;
  options.dwa = s.dwa;
  options.t_max = s.t_max;
  options.key = {s.seed, episode};
  options.record_trace = false;
  const EpisodeResult result = run_episode(runner, scenario, options);

  EpisodeMetrics m;
  m.index = episode;
  m.success = result.success;
  m.failure = result.failure;
  m.goal_times = result.goal_times;
  if (!result.success) return m;
  m.makespan = result.makespan();

  const SolitaryPolicy mu = [&runner](const Observation& o, Vec2) {
    return runner.solitary(o, nullptr).action;
  };
  std::vector<double> delays;
  for (int i = 0; i < scenario.n_agents(); ++i) {
    try {
      const int l_mu = solitary_rollout(scenario, i, mu, s.delay_mode, s.dwa, s.t_max);
      m.solitary_times.emplace_back(l_mu);
      delays.push_back(static_cast<double>(*result.goal_times[static_cast<std::size_t>(i)] - l_mu));
    } catch (const SolitaryTimeout& e) {
      m.solitary_times.emplace_back(std::nullopt);
      ++m.solitary_timeouts;
      std::clog << "episode " << episode << ": " << e.what() << "; agent excluded from delays\n";
    }
  }
  if (!delays.empty()) m.delays = delay_stats(delays);
  return m;
}

MetricsReport aggregate(const EvalSettings& settings, std::span<const EpisodeMetrics> episodes) {
  std::vector<const EpisodeMetrics*> sorted;
  for (const auto& e : episodes) sorted.push_back(&e);
  std::sort(sorted.begin(), sorted.end(),
            [](const EpisodeMetrics* a, const EpisodeMetrics* b) { return a->index < b->index; });

  MetricsReport r;
  r.settings = settings;
  r.n_episodes = static_cast<int>(sorted.size());
  double ms = 0.0;
  double vd = 0.0;
  double maxd = 0.0;
  double meand = 0.0;
  int with_delays = 0;
  for (const auto* e : sorted) {
    r.solitary_timeouts += e->solitary_timeouts;
    if (e->failure == FailureCause::crash) ++r.crash_failures;
    if (e->failure == FailureCause::timeout) ++r.timeout_failures;
    if (!e->success) continue;
    ++r.n_successes;
    ms += e->makespan;
    if (e->delays) {
      ++with_delays;
      vd += e->delays->vd;
      maxd += e->delays->maxd;
      meand += e->delays->meand;
    }
  }
  r.sr = r.n_episodes == 0 ? 0.0 : 100.0 * r.n_successes / r.n_episodes;
  if (r.n_successes > 0) r.ms = ms / r.n_successes;
  if (with_delays > 0) {
    r.vd = vd / with_delays;
    r.maxd = maxd / with_delays;
    r.meand = meand / with_delays;
  }
  return r;
}

MetricsReport evaluate(const PolicyBundle& bundle, const EvalSettings& settings) {
  if (settings.n_episodes < 0) throw std::invalid_argument("episode count must be non-negative");
  if (settings.workers < 1) throw std::invalid_argument("worker count must be positive");
  const auto n = static_cast<std::size_t>(settings.n_episodes);
  std::vector<EpisodeMetrics> results(n);
  if (settings.workers == 1) {
    for (std::size_t k = 0; k < n; ++k) results[k] = evaluate_episode(bundle, settings, k);
  } else {
    std::atomic<std::size_t> next{0};
    std::mutex error_mutex;
    std::exception_ptr error;
    auto work = [&] {
      for (std::size_t k = next++; k < n; k = next++) {
        try {
          results[k] = evaluate_episode(bundle, settings, k);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    };
    std::vector<std::thread> threads;
    for (int w = 0; w < settings.workers; ++w) threads.emplace_back(work);
    for (auto& t : threads) t.join();
    if (error) std::rethrow_exception(error);
  }
  return aggregate(settings, results);
}

std::string report_json(const MetricsReport& r) {
  using nlohmann::ordered_json;
  auto opt = [](const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); };
  const EvalSettings& s = r.settings;
  ordered_json j;
  j["controller"] = std::string(to_string(s.controller));
  j["family"] = std::string(to_string(s.family));
  j["agents"] = s.n_agents;
  j["obstacles"] = s.n_obstacles;
  j["seed"] = s.seed;
  j["t_max"] = s.t_max;
  j["ablations"] = {{"no_improvement", s.ablations.no_improvement},
                    {"full_comm", s.ablations.full_comm},
                    {"fixed_priority", s.ablations.fixed_priority}};
  j["delay_baseline"] = std::string(to_string(s.delay_mode));
  j["n_episodes"] = r.n_episodes;
  j["n_successes"] = r.n_successes;
  j["SR"] = r.sr;
  j["MS"] = opt(r.ms);
  j["VD"] = opt(r.vd);
  j["MAXD"] = opt(r.maxd);
  j["MEAND"] = opt(r.meand);
  j["failures"] = {{"crash", r.crash_failures}, {"timeout", r.timeout_failures}};
  j["solitary_timeouts"] = r.solitary_timeouts;
  return j.dump(2) + "\n";
}

}  // namespace fairnav
