#include "cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "criteria.hpp"
#include "fairnav/config.hpp"
#include "fairnav/evaluate.hpp"
#include "fairnav/text.hpp"

namespace fairnav {

namespace {

struct TrainArgs {
  std::string config;
  std::string resume;
  bool dump{false};
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::vector<std::string> overrides;
};

struct EvalArgs {
  std::string ckpt;
  std::string family{"Uniform"};
  int agents{2};
  int obstacles{25};
  int episodes{100};
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string controller{"ncf2"};
  std::string delay_baseline{"removed"};
  bool no_improvement{false};
  bool full_comm{false};
  bool fixed_priority{false};
  int workers{1};
  int t_max{kDefaultTMax};
  double residual_fraction{0.2};
};

struct RolloutArgs {
  std::string ckpt;
  std::string scenario;
  std::string trace;
  std::string controller{"ncf2"};
  std::optional<std::uint64_t> seed;
  bool stochastic{false};
  int t_max{kDefaultTMax};
  double residual_fraction{0.2};
};

struct ScenarioArgs {
  std::string family{"Uniform"};
  int agents{2};
  int obstacles{25};
  std::optional<std::uint64_t> seed;
  double map_size{128.0};
  std::string out;
};

struct PlotArgs {
  std::string trace;
  std::string out;
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << text;
  if (!os) throw std::runtime_error("write failed for " + path);
}

PolicyBundle bundle_for(const std::string& ckpt, Controller controller) {
  if (!ckpt.empty()) return load_bundle(ckpt);
  if (controller != Controller::dwa) {
    throw std::runtime_error("--ckpt is required unless --controller dwa");
  }
  return PolicyBundle(BundleConfig{}, 0);
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
  ConfigMap map;
  if (!a.config.empty()) map = ConfigMap::load(a.config);
  for (const auto& kv : a.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    map.set(std::string(text::trim(std::string_view(kv).substr(0, eq))),
            std::string(text::trim(std::string_view(kv).substr(eq + 1))));
  }
  if (a.seed) map.set("learn.seed", std::to_string(*a.seed));
  if (a.workers) map.set("learn.workers", std::to_string(*a.workers));
  const PipelineConfig config = pipeline_config(map);
  if (a.dump) {
    out << dump_config(config);
    return 0;
  }
  std::optional<std::string> resume;
  if (!a.resume.empty()) resume = a.resume;
  const PipelineResult result = run_pipeline(config, resume, &out);
  out << "training finished after " << result.progress.episodes_done << " episodes";
  if (!config.checkpoint_path.empty()) out << "; policy saved to " << config.checkpoint_path;
  out << '\n';
  return 0;
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  EvalSettings s;
  s.family = parse_family(a.family);
  s.n_agents = a.agents;
  s.n_obstacles = a.obstacles;
  s.n_episodes = a.episodes;
  s.seed = a.seed ? *a.seed : default_seed();
  s.controller = parse_controller(a.controller);
  s.delay_mode = parse_solitary_mode(a.delay_baseline);
  s.ablations.no_improvement = a.no_improvement;
  s.ablations.full_comm = a.full_comm;
  s.ablations.fixed_priority = a.fixed_priority;
  s.workers = a.workers;
  s.t_max = a.t_max;
  s.residual_fraction = a.residual_fraction;
  const PolicyBundle bundle = bundle_for(a.ckpt, s.controller);
  const std::string report = report_json(evaluate(bundle, s));
  if (a.out.empty()) {
    out << report;
  } else {
    write_text(a.out, report);
  }
  return 0;
}

int cmd_rollout(const RolloutArgs& a, std::ostream& out) {
  const Controller controller = parse_controller(a.controller);
  const PolicyBundle bundle = bundle_for(a.ckpt, controller);
  const Scenario scenario = load_scenario(a.scenario);
  const PolicyRunner runner(bundle, Limits{scenario.world.map_size}, a.residual_fraction);
  EpisodeOptions opt;
  opt.protocol.controller = controller;
  opt.protocol.deterministic = !a.stochastic;
  opt.t_max = a.t_max;
  opt.key = {a.seed ? *a.seed : default_seed(), 0};
  const EpisodeResult result = run_episode(runner, scenario, opt);
  std::ostringstream trace;
  write_trace(trace, scenario, result.trace);
  write_text(a.trace, trace.str());
  out << (result.success ? "success" : "failure");
  if (result.success) out << ", makespan " << result.makespan();
  if (!result.success) out << " (" << to_string(result.failure) << ")";
  out << '\n';
  return 0;
}

int cmd_scenario(const ScenarioArgs& a, std::ostream& out) {
  const Scenario sc = generate_scenario(parse_family(a.family), a.agents, a.obstacles,
                                        a.seed ? *a.seed : default_seed(), a.map_size);
  if (a.out.empty()) {
    write_scenario(out, sc);
  } else {
    save_scenario(a.out, sc);
  }
  return 0;
}

int cmd_plot(const PlotArgs& a) {
  std::ifstream is(a.trace);
  if (!is) throw std::runtime_error("cannot read " + a.trace);
  write_text(a.out, render_svg(read_trace(is)));
  return 0;
}

int cmd_selftest(bool all, std::ostream& out) {
  int failed = 0;
  for (const auto& c : acceptance::criteria()) {
    if (c.slow && !all) continue;
    const acceptance::Outcome r = c.run();
    if (!r.pass) ++failed;
    out << (r.pass ? "PASS " : "FAIL ") << c.id << ' ' << c.name << ": " << r.detail << '\n';
  }
  return failed == 0 ? 0 : 1;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Fair multi-agent navigation: training, evaluation, and plotting", "fairnav"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "run the three training phases");
  t->add_option("--config", train.config, "config file with section.key = value lines")->check(CLI::ExistingFile);
  t->add_option("--resume", train.resume, "checkpoint to resume from")->check(CLI::ExistingFile);
  t->add_flag("--dump-config", train.dump, "print the effective config and exit");
  t->add_option("--seed", train.seed, "override learn.seed");
  t->add_option("--workers", train.workers, "override learn.workers");
  t->add_option("--set", train.overrides, "extra key=value overrides");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "evaluate a policy on held-out episodes");
  e->add_option("--ckpt", ev.ckpt, "policy checkpoint (optional for --controller dwa)")->check(CLI::ExistingFile);
  e->add_option("--family", ev.family, "Uniform or Corner")->capture_default_str();
  e->add_option("--agents", ev.agents)->capture_default_str()->check(CLI::Range(1, 32));
  e->add_option("--obstacles", ev.obstacles)->capture_default_str()->check(CLI::NonNegativeNumber);
  e->add_option("--episodes", ev.episodes)->capture_default_str()->check(CLI::NonNegativeNumber);
  e->add_option("--seed", ev.seed, "defaults to FAIRNAV_SEED or 1");
  e->add_option("--out", ev.out, "report path (stdout when omitted)");
  e->add_option("--controller", ev.controller, "ncf2, nav_only, solitary or dwa")->capture_default_str();
  e->add_option("--delay-baseline", ev.delay_baseline, "removed or frozen")->capture_default_str();
  e->add_flag("--no-improvement", ev.no_improvement);
  e->add_flag("--full-comm", ev.full_comm);
  e->add_flag("--fixed-priority", ev.fixed_priority);
  e->add_option("--workers", ev.workers)->capture_default_str()->check(CLI::PositiveNumber);
  e->add_option("--t-max", ev.t_max)->capture_default_str()->check(CLI::PositiveNumber);
  e->add_option("--residual-fraction", ev.residual_fraction)->capture_default_str();

  RolloutArgs ro;
  auto* r = app.add_subcommand("rollout", "run one episode and write its trajectory log");
  r->add_option("--ckpt", ro.ckpt, "policy checkpoint (optional for --controller dwa)")->check(CLI::ExistingFile);
  r->add_option("--scenario", ro.scenario)->required()->check(CLI::ExistingFile);
  r->add_option("--trace", ro.trace)->required();
  r->add_option("--controller", ro.controller)->capture_default_str();
  r->add_option("--seed", ro.seed);
  r->add_flag("--stochastic", ro.stochastic, "sample actions instead of taking the mode");
  r->add_option("--t-max", ro.t_max)->capture_default_str()->check(CLI::PositiveNumber);
  r->add_option("--residual-fraction", ro.residual_fraction)->capture_default_str();

  ScenarioArgs sa;
  auto* s = app.add_subcommand("scenario", "generate a scenario file");
  s->add_option("--family", sa.family)->capture_default_str();
  s->add_option("--agents", sa.agents)->capture_default_str()->check(CLI::Range(1, 32));
  s->add_option("--obstacles", sa.obstacles)->capture_default_str()->check(CLI::NonNegativeNumber);
  s->add_option("--seed", sa.seed);
  s->add_option("--map-size", sa.map_size)->capture_default_str()->check(CLI::PositiveNumber);
  s->add_option("--out", sa.out, "scenario path (stdout when omitted)");

  PlotArgs pa;
  auto* p = app.add_subcommand("plot", "render a trajectory log as SVG");
  p->add_option("--trace", pa.trace)->required()->check(CLI::ExistingFile);
  p->add_option("--out", pa.out)->required();

  bool all = false;
  auto* st = app.add_subcommand("selftest", "run the oracle and property checks");
  st->add_flag("--all", all, "include the training smoke and determinism runs");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& ex) {
    return app.exit(ex, out, err);
  }

  try {
    if (t->parsed()) return cmd_train(train, out);
    if (e->parsed()) return cmd_eval(ev, out);
    if (r->parsed()) return cmd_rollout(ro, out);
    if (s->parsed()) return cmd_scenario(sa, out);
    if (p->parsed()) return cmd_plot(pa);
    if (st->parsed()) return cmd_selftest(all, out);
  } catch (const std::exception& ex) {
    err << "fairnav: " << ex.what() << '\n';
    return 1;
  }
  return 1;
}

}  // namespace fairnav
