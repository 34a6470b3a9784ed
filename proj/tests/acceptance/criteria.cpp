#include "criteria.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "fairnav/evaluate.hpp"
#include "fairnav/ncf2.hpp"
#include "fairnav/text.hpp"
#include "oracles.hpp"

namespace fairnav::acceptance {

namespace {

using Clock = std::chrono::steady_clock;
using Mat = ad::Matrix<double>;
using DTape = ad::Tape<double>;

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

void randomize_layer(Linear<float>& l, Rng& rng, double bound) {
  uniform_init(l.weight.value, bound, rng);
  uniform_init(l.bias.value, bound, rng);
}

}  // namespace

BundleConfig small_bundle_config() {
  BundleConfig c;
  c.hidden = 32;
  c.head = 8;
  c.key_dim = 8;
  return c;
}

PolicyBundle random_bundle(std::uint64_t seed) {
  PolicyBundle b(small_bundle_config(), seed);
  Rng rng{seed, 0x72616e64};
  randomize_layer(b.solitary_actor.out, rng, 0.5);
  randomize_layer(b.nav_actor.out, rng, 0.5);
  randomize_layer(b.cf2_actor.out, rng, 1.0);
  return b;
}

PipelineConfig desk_profile() {
  PipelineConfig c;
  c.family = Family::uniform;
  c.n_agents = 2;
  c.n_obstacles = 5;
  c.seed = 1;
  c.workers = 1;
  c.solitary_iterations = 20'000;
  c.nav_iterations = 20'000;
  c.joint_iterations = 20'000;
  c.buffer_capacity = 50'000;
  c.sac.critic_warmup = 2'000;
  c.log_interval = 500;
  c.checkpoint_interval = 5'000;
  return c;
}

namespace {

// ---------------------------------------------------------------------------

Outcome variance_identity() {
  const auto start = Clock::now();
  Rng rng{0x41707041};
  const FairnessConstants plain{1.0, 0.0};
  double worst = 0.0;
  for (int trial = 0; trial < 10'000; ++trial) {
    const int k = 2 + static_cast<int>(rng.below(15));
    const int n = k + 1;
    std::vector<double> rho(static_cast<std::size_t>(n));
    std::vector<double> xi(static_cast<std::size_t>(n));
    for (auto& r : rho) r = rng.uniform(0.01, 10.0);
    for (auto& x : xi) x = rng.uniform(0.05, 2.0);
    const int i = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
    std::vector<int> nbrs;
    for (int j = 0; j < n; ++j) {
      if (j != i) nbrs.push_back(j);
    }
    const double lhs = fairness_efficiency_reward(0, rho, i, xi, nbrs, plain, true);

    const double den = std::accumulate(rho.begin(), rho.end(), 0.0);
    std::vector<double> rho_bar(rho.size());
    for (std::size_t j = 0; j < rho.size(); ++j) rho_bar[j] = rho[j] / den;
    const double sum_xi = std::accumulate(xi.begin(), xi.end(), 0.0);
    const double big_k = sum_xi * sum_xi / (2.0 * xi[static_cast<std::size_t>(i)]);
    const auto dual = oracle::weighted_variance(rho_bar, xi, i);
    const double closed = oracle::weighted_variance_gradient(rho_bar, xi, i);
    worst = std::max({worst, std::abs(lhs + big_k * dual.d_rho_i), std::abs(lhs + big_k * closed)});
  }
  const double secs = seconds_since(start);
  return {worst <= 1e-9 && secs < 5.0,
          "max |lhs + K dV| = " + fmt(worst) + " over 10000 instances in " + fmt(secs) + " s"};
}

Outcome reward_gate() {
  Rng rng{0x67617465};
  int nonzero = 0;
  for (int trial = 0; trial < 10'000; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(16));
    std::vector<double> rho(static_cast<std::size_t>(n));
    std::vector<double> xi(static_cast<std::size_t>(n));
    for (auto& r : rho) r = rng.uniform(-5.0, 5.0);
    for (auto& x : xi) x = rng.uniform(-2.0, 2.0);
    const int i = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
    std::vector<int> nbrs;
    for (int j = 0; j < n; ++j) {
      if (j != i) nbrs.push_back(j);
    }
    const FairnessConstants c{rng.uniform(0.0, 2.0), rng.uniform(0.0, 2.0)};
    if (fairness_efficiency_reward(1, rho, i, xi, nbrs, c, true) != 0.0) ++nonzero;
  }
  const std::vector<double> rho{1.0, 2.0, 3.0};
  const std::vector<double> xi{0.0, 0.5, 1.0};
  const std::vector<int> nbrs{1, 2};
  const double fixture = fairness_efficiency_reward(0, rho, 0, xi, nbrs, {0.5, 0.1}, true);
  const double expected = (0.5 * 2.5 - 0.1 * 1.0) / 6.0;
  const double err = std::abs(fixture - expected);
  return {nonzero == 0 && err <= 1e-12, std::to_string(nonzero) + " nonzero rewards with f=1; fixture " +
                                            text::format_double(fixture) + " (error " + fmt(err) + ")"};
}

// Runs episodes until `steps` protocol steps were observed.
template <typename Visit>
void protocol_steps(const PolicyBundle& bundle, int steps, std::uint64_t seed, const ProtocolConfig& cfg,
                    double map_size, int min_agents, int max_agents, int obstacles, Visit&& visit) {
  const Limits lim{map_size};
  const PolicyRunner runner(bundle, lim, 0.2);
  int seen = 0;
  for (std::uint64_t ep = 0; seen < steps; ++ep) {
    Rng pick{seed, ep};
    const int n = min_agents + static_cast<int>(pick.below(static_cast<std::uint64_t>(max_agents - min_agents + 1)));
    Scenario sc;
    try {
      sc = generate_scenario(Family::uniform, n, obstacles, hash_key({seed, ep}), map_size);
    } catch (const GenerationFailed&) {
      continue;
    }
    EpisodeOptions opt;
    opt.protocol = cfg;
    opt.key = {seed, ep};
    opt.record_trace = false;
    run_episode(runner, sc, opt, [&](const ProtocolStep& step, const StepResult& res, const ProtocolStep*) {
      if (seen < steps) visit(step, res);
      ++seen;
    });
  }
}

Outcome stopped_agents_stay() {
  const PolicyBundle bundle = random_bundle(3);
  ProtocolConfig cfg;
  int stopped = 0;
  int moved = 0;
  protocol_steps(bundle, 1000, 0x73746179, cfg, 64.0, 2, 6, 2,
                 [&](const ProtocolStep& step, const StepResult& res) {
                   for (std::size_t i = 0; i < step.agents.size(); ++i) {
                     const AgentStep& a = step.agents[i];
                     if (!a.active || a.f != 0) continue;
                     ++stopped;
                     if (!(res.next[i].pose == a.obs.pose)) ++moved;
                   }
                 });
  return {stopped > 0 && moved == 0,
          std::to_string(stopped) + " stopped agent-steps over 1000 protocol steps, " + std::to_string(moved) +
              " moved"};
}

Outcome patience_telescoping() {
  // Zero residual outputs: navigation and solitary actions are both the DWA
  // suggestion, so every agent acts exactly as its solitary policy.
  PolicyBundle bundle(small_bundle_config(), 5);
  Rng rng{0x74656c65};
  uniform_init(bundle.solitary_critics[0].out.weight.value, 1.0, rng);
  uniform_init(bundle.solitary_critics[1].out.weight.value, 1.0, rng);
  const Limits lim{64.0};
  const PolicyRunner runner(bundle, lim, 0.2);
  ProtocolConfig cfg;
  cfg.deterministic = true;
  int steps = 0;
  int nonzero = 0;
  int deviations = 0;
  for (std::uint64_t ep = 0; ep < 20; ++ep) {
    const Scenario sc = generate_scenario(Family::uniform, 4, 2, hash_key({0x74656c65, ep}), 64.0);
    EpisodeOptions opt;
    opt.protocol = cfg;
    opt.key = {7, ep};
    opt.record_trace = false;
    run_episode(runner, sc, opt, [&](const ProtocolStep& step, const StepResult&, const ProtocolStep* next) {
      ++steps;
      for (const auto& a : step.agents) {
        if (a.active && !(a.action == a.solitary_action)) ++deviations;
      }
      if (next != nullptr) {
        for (const auto& a : next->agents) {
          if (a.rho != 0.0) ++nonzero;
        }
      }
    });
  }
  return {deviations == 0 && nonzero == 0,
          std::to_string(steps) + " steps, " + std::to_string(deviations) + " deviations from the solitary action, " +
              std::to_string(nonzero) + " nonzero patience values"};
}

Outcome kinematics_oracle() {
  Rng rng{0x6b696e};
  const Limits lim{128.0};
  double worst = 0.0;
  for (int trial = 0; trial < 10'000; ++trial) {
    const Pose p{rng.uniform(0.0, 128.0), rng.uniform(0.0, 128.0), rng.uniform(-3.14159, 3.14159)};
    const Action a{rng.uniform(0.0, lim.v_max()), rng.uniform(-Limits::w_max(), Limits::w_max())};
    const Pose exact = step_kinematics(p, a);
    const Pose euler = oracle::euler_step(p, a, 1000);
    worst = std::max(worst, std::hypot(exact.x - euler.x, exact.y - euler.y));
  }
  const Pose q = step_kinematics({0, 0, 0}, {1.0, std::numbers::pi / 2});
  const double inv = 2.0 / std::numbers::pi;
  const double case_err =
      std::max({std::abs(q.x - inv), std::abs(q.y - inv), std::abs(q.theta - std::numbers::pi / 2)});
  return {worst < 1e-3 && case_err <= 1e-9,
          "max position error " + fmt(worst) + " over 10000 samples; quarter-turn case error " + fmt(case_err)};
}

Outcome lidar_oracle() {
  Rng rng{0x6c696461};
  double worst = 0.0;
  for (int world_id = 0; world_id < 100; ++world_id) {
    WorldMap world;
    const int n_obs = 5 + static_cast<int>(rng.below(21));
    for (int k = 0; k < n_obs; ++k) {
      world.obstacles.push_back({rng.uniform(0, 128), rng.uniform(0, 128), rng.uniform(6.4, 10.24)});
    }
    std::vector<Circle> others;
    for (int k = 0; k < 3; ++k) others.push_back({rng.uniform(0, 128), rng.uniform(0, 128), 2.56});
    const Pose pose{rng.uniform(0, 128), rng.uniform(0, 128), rng.uniform(-3.14159, 3.14159)};
    const LidarScan got = lidar_scan(pose, world, others);
    const LidarScan want = oracle::raymarch_lidar(pose, world, others);
    for (int b = 0; b < kLidarBeams; ++b) {
      worst = std::max(worst, std::abs(got[static_cast<std::size_t>(b)] - want[static_cast<std::size_t>(b)]));
    }
  }
  return {worst <= 1e-3, "max beam difference " + fmt(worst) + " over 100 worlds"};
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradInstance {
  std::vector<Mat> inputs;
  Segments seg;
  std::vector<int> index;
};

struct GradFixture {
  const char* name;
  std::function<GradInstance(Rng&)> make;
  std::function<Var(DTape&, const std::vector<Var>&, const GradInstance&)> build;
};

Mat random_mat(Rng& rng, int r, int c, double lo = -1.0, double hi = 1.0) {
  Mat m(r, c);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = rng.uniform(lo, hi);
  return m;
}

// Entries with magnitude in [0.1, 1] and random sign, away from kinks at 0.
Mat off_zero(Rng& rng, int r, int c) {
  Mat m(r, c);
  for (Eigen::Index k = 0; k < m.size(); ++k) {
    m.data()[k] = rng.uniform(0.1, 1.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
  }
  return m;
}

int dim(Rng& rng, int lo, int hi) { return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))); }

Segments random_segments(Rng& rng, int count, int max_size) {
  Segments s;
  for (int b = 0; b < count; ++b) s.push(static_cast<int>(rng.below(static_cast<std::uint64_t>(max_size + 1))));
  return s;
}

std::vector<GradFixture> grad_fixtures() {
  using V = std::vector<Var>;
  using I = GradInstance;
  std::vector<GradFixture> f;
  auto two = [](int r, int c) {
    return [r, c](Rng& rng) {
      const int rr = r > 0 ? r : dim(rng, 1, 4);
      const int cc = c > 0 ? c : dim(rng, 1, 4);
      return I{{random_mat(rng, rr, cc), random_mat(rng, rr, cc)}, {}, {}};
    };
  };
  auto one = [](Mat (*gen)(Rng&, int, int)) {
    return [gen](Rng& rng) { return I{{gen(rng, dim(rng, 1, 4), dim(rng, 1, 4))}, {}, {}}; };
  };
  auto uniform = +[](Rng& rng, int r, int c) { return random_mat(rng, r, c); };
  auto positive = +[](Rng& rng, int r, int c) { return random_mat(rng, r, c, 0.5, 2.0); };
  auto kinked = +[](Rng& rng, int r, int c) { return off_zero(rng, r, c); };

  f.push_back({"matmul",
               [](Rng& rng) {
                 const int a = dim(rng, 1, 4), b = dim(rng, 1, 4), c = dim(rng, 1, 4);
                 return I{{random_mat(rng, a, b), random_mat(rng, b, c)}, {}, {}};
               },
               [](DTape& t, const V& x, const I&) { return t.matmul(x[0], x[1]); }});
  f.push_back({"affine",
               [](Rng& rng) {
                 const int a = dim(rng, 1, 4), b = dim(rng, 1, 4), c = dim(rng, 1, 4);
                 return I{{random_mat(rng, a, b), random_mat(rng, b, c), random_mat(rng, 1, c)}, {}, {}};
               },
               [](DTape& t, const V& x, const I&) { return t.affine(x[0], x[1], x[2]); }});
  f.push_back({"add", two(0, 0), [](DTape& t, const V& x, const I&) { return t.add(x[0], x[1]); }});
  f.push_back({"sub", two(0, 0), [](DTape& t, const V& x, const I&) { return t.sub(x[0], x[1]); }});
  f.push_back({"mul", two(0, 0), [](DTape& t, const V& x, const I&) { return t.mul(x[0], x[1]); }});
  f.push_back({"scale", one(uniform), [](DTape& t, const V& x, const I&) { return t.scale(x[0], -1.7); }});
  f.push_back({"add_scalar", one(uniform), [](DTape& t, const V& x, const I&) { return t.add_scalar(x[0], 0.3); }});
  f.push_back({"mul_col",
               [](Rng& rng) {
                 const int r = dim(rng, 1, 4);
                 return I{{random_mat(rng, r, dim(rng, 1, 4)), random_mat(rng, r, 1)}, {}, {}};
               },
               [](DTape& t, const V& x, const I&) { return t.mul_col(x[0], x[1]); }});
  f.push_back({"add_col",
               [](Rng& rng) {
                 const int r = dim(rng, 1, 4);
                 return I{{random_mat(rng, r, dim(rng, 1, 4)), random_mat(rng, r, 1)}, {}, {}};
               },
               [](DTape& t, const V& x, const I&) { return t.add_col(x[0], x[1]); }});
  f.push_back({"relu", one(kinked), [](DTape& t, const V& x, const I&) { return t.relu(x[0]); }});
  f.push_back({"tanh", one(uniform), [](DTape& t, const V& x, const I&) { return t.tanh(x[0]); }});
  f.push_back({"exp", one(uniform), [](DTape& t, const V& x, const I&) { return t.exp(x[0]); }});
  f.push_back({"log", one(positive), [](DTape& t, const V& x, const I&) { return t.log(x[0]); }});
  f.push_back({"softplus", one(uniform), [](DTape& t, const V& x, const I&) { return t.softplus(x[0]); }});
  f.push_back({"square", one(uniform), [](DTape& t, const V& x, const I&) { return t.square(x[0]); }});
  f.push_back({"minimum",
               [](Rng& rng) {
                 const int r = dim(rng, 1, 4), c = dim(rng, 1, 4);
                 Mat a = random_mat(rng, r, c);
                 Mat b = a + off_zero(rng, r, c);
                 return I{{a, b}, {}, {}};
               },
               [](DTape& t, const V& x, const I&) { return t.minimum(x[0], x[1]); }});
  f.push_back({"clamp",
               [](Rng& rng) {
                 Mat a = off_zero(rng, dim(rng, 1, 4), dim(rng, 1, 4));
                 for (Eigen::Index k = 0; k < a.size(); ++k) {
                   if (std::abs(std::abs(a.data()[k]) - 0.5) < 0.05) a.data()[k] *= 1.3;
                 }
                 return I{{a}, {}, {}};
               },
               [](DTape& t, const V& x, const I&) { return t.clamp(x[0], -0.5, 0.5); }});
  f.push_back({"softmax_rows", one(uniform), [](DTape& t, const V& x, const I&) { return t.softmax_rows(x[0]); }});
  f.push_back({"log_softmax_rows", one(uniform),
               [](DTape& t, const V& x, const I&) { return t.log_softmax_rows(x[0]); }});
  f.push_back({"concat_cols",
               [](Rng& rng) {
                 const int r = dim(rng, 1, 4);
                 return I{{random_mat(rng, r, dim(rng, 1, 3)), random_mat(rng, r, dim(rng, 1, 3)),
                           random_mat(rng, r, dim(rng, 1, 3))},
                          {},
                          {}};
               },
               [](DTape& t, const V& x, const I&) { return t.concat_cols({x[0], x[1], x[2]}); }});
  f.push_back({"slice_cols",
               [](Rng& rng) { return I{{random_mat(rng, dim(rng, 1, 4), dim(rng, 3, 5))}, {}, {}}; },
               [](DTape& t, const V& x, const I&) { return t.slice_cols(x[0], 1, 2); }});
  f.push_back({"sum_cols", one(uniform), [](DTape& t, const V& x, const I&) { return t.sum_cols(x[0]); }});
  f.push_back({"sum", one(uniform), [](DTape& t, const V& x, const I&) { return t.sum(x[0]); }});
  f.push_back({"mean", one(uniform), [](DTape& t, const V& x, const I&) { return t.mean(x[0]); }});
  f.push_back({"pick",
               [](Rng& rng) {
                 const int r = dim(rng, 1, 4), c = dim(rng, 2, 4);
                 I inst{{random_mat(rng, r, c)}, {}, {}};
                 for (int k = 0; k < r; ++k) inst.index.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(c))));
                 return inst;
               },
               [](DTape& t, const V& x, const I& inst) { return t.pick(x[0], inst.index); }});
  f.push_back({"segment_mean",
               [](Rng& rng) {
                 I inst;
                 inst.seg = random_segments(rng, dim(rng, 1, 4), 4);
                 inst.inputs = {random_mat(rng, inst.seg.rows(), dim(rng, 1, 4))};
                 return inst;
               },
               [](DTape& t, const V& x, const I& inst) { return t.segment_mean(x[0], inst.seg); }});
  f.push_back({"segment_attention",
               [](Rng& rng) {
                 I inst;
                 inst.seg = random_segments(rng, dim(rng, 1, 4), 5);
                 const int d = dim(rng, 1, 4);
                 inst.inputs = {random_mat(rng, inst.seg.count(), d), random_mat(rng, inst.seg.rows(), d),
                                random_mat(rng, inst.seg.rows(), dim(rng, 1, 4))};
                 return inst;
               },
               [](DTape& t, const V& x, const I& inst) {
                 return t.segment_attention(x[0], x[1], x[2], inst.seg, 0.7);
               }});
  // Log-density of a tanh-squashed Gaussian sample u = mean + exp(log_std) z,
  // written with the same operators the learner uses.
  f.push_back({"squashed_gaussian_log_prob",
               [](Rng& rng) {
                 const int r = dim(rng, 1, 4);
                 return I{{random_mat(rng, r, 2), random_mat(rng, r, 2, -1.5, 0.5), random_mat(rng, r, 2, -2, 2)},
                          {},
                          {}};
               },
               [](DTape& t, const V& x, const I&) {
                 const Var u = t.add(x[0], t.mul(t.exp(x[1]), x[2]));
                 const Var gauss = t.scale(t.square(x[2]), -0.5);
                 Var lp = t.sub(t.sum_cols(gauss), t.sum_cols(x[1]));
                 lp = t.add(lp, t.scale(t.sum_cols(u), 2.0));
                 lp = t.add(lp, t.scale(t.sum_cols(t.softplus(t.scale(u, -2.0))), 2.0));
                 return lp;
               }});
  return f;
}

double rel_error(double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-3}); }

// Worst relative error of input gradients for one fixture instance.
double check_instance(const GradFixture& fx, const GradInstance& inst, Rng& rng) {
  Mat weights;
  auto loss_of = [&](const std::vector<Mat>& xs, std::vector<Mat>* grads) {
    DTape t;
    std::vector<Var> vars;
    for (const auto& x : xs) vars.push_back(t.variable(x));
    const Var out = fx.build(t, vars, inst);
    if (weights.size() == 0) weights = random_mat(rng, static_cast<int>(t.value(out).rows()),
                                                  static_cast<int>(t.value(out).cols()));
    const Var loss = t.sum(t.mul(out, t.constant(weights)));
    const double value = t.value(loss)(0, 0);
    if (grads != nullptr) {
      t.backward(loss);
      for (Var v : vars) grads->push_back(t.grad(v));
    }
    return value;
  };
  std::vector<Mat> analytic;
  loss_of(inst.inputs, &analytic);
  double worst = 0.0;
  std::vector<Mat> xs = inst.inputs;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    for (Eigen::Index e = 0; e < xs[k].size(); ++e) {
      const double x0 = xs[k].data()[e];
      const double h = 1e-6;
      xs[k].data()[e] = x0 + h;
      const double up = loss_of(xs, nullptr);
      xs[k].data()[e] = x0 - h;
      const double down = loss_of(xs, nullptr);
      xs[k].data()[e] = x0;
      worst = std::max(worst, rel_error(analytic[k].data()[e], (up - down) / (2.0 * h)));
    }
  }
  return worst;
}

// Parameter gradients of whole modules against finite differences.
template <typename Forward>
double check_module(std::vector<Parameter<double>*> params, Forward&& forward) {
  for (auto* p : params) p->zero_grad();
  {
    DTape t;
    const Var loss = forward(t, true);
    t.backward(loss);
  }
  double worst = 0.0;
  for (auto* p : params) {
    for (Eigen::Index e = 0; e < p->value.size(); ++e) {
      const double x0 = p->value.data()[e];
      const double h = 1e-6;
      p->value.data()[e] = x0 + h;
      DTape t1;
      const double up = t1.value(forward(t1, false))(0, 0);
      p->value.data()[e] = x0 - h;
      DTape t2;
      const double down = t2.value(forward(t2, false))(0, 0);
      p->value.data()[e] = x0;
      worst = std::max(worst, rel_error(p->grad.data()[e], (up - down) / (2.0 * h)));
    }
  }
  return worst;
}

Outcome gradient_check() {
  Rng rng{0x67726164};
  double worst = 0.0;
  std::string worst_name = "-";
  int checked = 0;
  for (const auto& fx : grad_fixtures()) {
    for (int k = 0; k < 100; ++k) {
      const GradInstance inst = fx.make(rng);
      const double e = check_instance(fx, inst, rng);
      ++checked;
      if (e > worst) {
        worst = e;
        worst_name = fx.name;
      }
    }
  }

  // Module-level fixtures: linear layer, MLP with every activation, attention
  // block, and a full network with a message encoder.
  for (int k = 0; k < 100; ++k) {
    Rng init{0x6d6f64, static_cast<std::uint64_t>(k)};
    const int in = dim(rng, 1, 4);
    const int batch = dim(rng, 1, 3);
    const Mat x = random_mat(rng, batch, in);

    Mlp<double> mlp("mlp", {in, {4, 3, 3, 2}, {Activation::relu, Activation::tanh, Activation::none, Activation::softmax}},
                    init);
    const Mat w_mlp = random_mat(rng, batch, 2);
    std::vector<Parameter<double>*> ps;
    mlp.collect(ps);
    const double e_mlp = check_module(ps, [&](DTape& t, bool trainable) {
      const Binder<double> bind{t, trainable};
      return t.sum(t.mul(mlp.forward(bind, t.constant(x)), t.constant(w_mlp)));
    });

    AttentionBlock<double> block("att", in, 3, init);
    const Segments seg = random_segments(rng, batch, 4);
    const Mat rows = random_mat(rng, seg.rows(), in);
    const Mat w_att = random_mat(rng, batch, 3);
    ps.clear();
    block.collect(ps);
    const double e_att = check_module(ps, [&](DTape& t, bool trainable) {
      const Binder<double> bind{t, trainable};
      return t.sum(t.mul(block.forward(bind, t.constant(rows), seg), t.constant(w_att)));
    });

    NetworkShape shape;
    shape.obs = in;
    shape.extra = 1;
    shape.msg_current = 3;
    shape.msg_next = 2;
    shape.hidden = 4;
    shape.head = 3;
    shape.key_dim = 2;
    shape.out = 2;
    Network<double> net("net", shape, init);
    MessageBatch<double> msgs;
    msgs.segments = random_segments(rng, batch, 3);
    msgs.current = random_mat(rng, msgs.segments.rows(), 3);
    msgs.next = random_mat(rng, msgs.segments.rows(), 2);
    const Mat xin = random_mat(rng, batch, in + 1);
    const Mat w_net = random_mat(rng, batch, 2);
    const double e_net = check_module(net.parameters(), [&](DTape& t, bool trainable) {
      const Binder<double> bind{t, trainable};
      return t.sum(t.mul(net.forward(bind, t.constant(xin), &msgs), t.constant(w_net)));
    });

    checked += 3;
    for (auto [e, name] : {std::pair{e_mlp, "mlp"}, std::pair{e_att, "attention"}, std::pair{e_net, "network"}}) {
      if (e > worst) {
        worst = e;
        worst_name = name;
      }
    }
  }
  return {worst <= 1e-4, std::to_string(checked) + " fixtures, worst relative error " + fmt(worst) + " (" +
                             worst_name + ")"};
}

Outcome attention_permutation() {
  Rng rng{0x7065726d};
  double worst = 0.0;
  int cases = 0;
  for (int k = 0; k <= 8; ++k) {
    for (int trial = 0; trial < 50; ++trial) {
      Rng init{0x617474, static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(trial)};
      MessageEncoder<float> enc("enc", 3, 3, 24, init);
      MessageBatch<float> msgs;
      msgs.segments.push(k);
      msgs.current = random_mat(rng, k, 3).cast<float>();
      msgs.next = random_mat(rng, k, 3).cast<float>();
      std::vector<int> perm(static_cast<std::size_t>(k));
      std::iota(perm.begin(), perm.end(), 0);
      for (int a = k - 1; a > 0; --a) {
        std::swap(perm[static_cast<std::size_t>(a)], perm[rng.below(static_cast<std::uint64_t>(a + 1))]);
      }
      MessageBatch<float> shuffled = msgs;
      for (int r = 0; r < k; ++r) {
        shuffled.current.row(r) = msgs.current.row(perm[static_cast<std::size_t>(r)]);
        shuffled.next.row(r) = msgs.next.row(perm[static_cast<std::size_t>(r)]);
      }
      ad::Tape<float> t1;
      ad::Tape<float> t2;
      const Tensor a = t1.value(enc.forward({t1, false}, msgs));
      const Tensor b = t2.value(enc.forward({t2, false}, shuffled));
      worst = std::max(worst, static_cast<double>((a - b).cwiseAbs().maxCoeff()));
      if (k == 0 && a.cwiseAbs().maxCoeff() != 0.0f) worst = std::max(worst, 1.0);
      ++cases;
    }
  }
  return {worst <= 1e-6, std::to_string(cases) + " cases for K = 0..8, max output change " + fmt(worst)};
}

Outcome nav_only_equivalence() {
  const PolicyBundle bundle = random_bundle(11);
  const Limits lim{64.0};
  const PolicyRunner runner(bundle, lim, 0.2);
  int episodes = 0;
  int differing = 0;
  std::size_t rows = 0;
  for (std::uint64_t ep = 0; ep < 30; ++ep) {
    const Scenario sc = generate_scenario(Family::uniform, 4, 2, hash_key({0x6e61762d, ep}), 64.0);
    EpisodeOptions a;
    a.protocol.controller = Controller::ncf2;
    a.protocol.force_move = true;
    a.key = {21, ep};
    EpisodeOptions b = a;
    b.protocol.controller = Controller::nav_only;
    b.protocol.force_move = false;
    const EpisodeResult ra = run_episode(runner, sc, a);
    const EpisodeResult rb = run_episode(runner, sc, b);
    ++episodes;
    rows += ra.trace.size();
    if (!(ra.trace == rb.trace) || ra.goal_times != rb.goal_times) ++differing;
  }
  return {differing == 0, std::to_string(episodes) + " stochastic episodes (" + std::to_string(rows) +
                              " trace rows), " + std::to_string(differing) + " differ"};
}

Outcome dwa_empty_maps() {
  const PolicyBundle bundle(small_bundle_config(), 1);
  const Limits lim{128.0};
  const PolicyRunner runner(bundle, lim, 0.2);
  int success = 0;
  int within = 0;
  int worst_slack = -1000;
  for (std::uint64_t k = 0; k < 100; ++k) {
    const Scenario sc = generate_scenario(Family::uniform, 1, 0, hash_key({0x64776130, k}), 128.0);
    EpisodeOptions opt;
    opt.protocol.controller = Controller::dwa;
    opt.key = {1, k};
    opt.record_trace = false;
    const EpisodeResult r = run_episode(runner, sc, opt);
    if (!r.success) continue;
    ++success;
    const Vec2 start = sc.starts[0].position();
    const int bound = static_cast<int>(std::ceil((sc.goals[0] - start).norm() / lim.v_max())) + 3;
    worst_slack = std::max(worst_slack, r.makespan() - bound);
    if (r.makespan() <= bound) ++within;
  }
  return {success == 100 && within == 100,
          std::to_string(success) + "/100 reached the goal, " + std::to_string(within) +
              " within the makespan bound (worst makespan - bound = " + std::to_string(worst_slack) + ")"};
}

Outcome desk_training_smoke() {
  const auto start = Clock::now();
  PipelineConfig cfg = desk_profile();
  cfg.checkpoint_path.clear();
  cfg.log_path.clear();
  PipelineResult result;
  try {
    result = run_pipeline(cfg);
  } catch (const TrainingDiverged& e) {
    return {false, std::string("training diverged: ") + e.what()};
  }
  const double train_secs = seconds_since(start);

  EvalSettings es;
  es.family = cfg.family;
  es.n_agents = cfg.n_agents;
  es.n_obstacles = cfg.n_obstacles;
  es.n_episodes = 50;
  es.seed = 1000;
  es.residual_fraction = cfg.residual_fraction;
  es.controller = Controller::ncf2;
  const MetricsReport trained = evaluate(result.bundle, es);
  es.controller = Controller::dwa;
  const MetricsReport base = evaluate(result.bundle, es);
  const double secs = seconds_since(start);
  return {trained.sr >= base.sr && secs <= 3600.0,
          "trained SR " + fmt(trained.sr) + " vs DWA SR " + fmt(base.sr) + " on 50 held-out episodes; training " +
              fmt(train_secs) + " s, total " + fmt(secs) + " s"};
}

Outcome ablation_toggles() {
  const PolicyBundle bundle = random_bundle(17);
  int bad_priority = 0;
  int bad_xi = 0;
  int bad_reward = 0;
  int bad_comm = 0;
  int stopped = 0;
  int steps = 0;

  ProtocolConfig fixed;
  fixed.ablations.fixed_priority = true;
  protocol_steps(bundle, 300, 0x66697864, fixed, 64.0, 3, 6, 2, [&](const ProtocolStep& step, const StepResult&) {
    ++steps;
    for (std::size_t i = 0; i < step.agents.size(); ++i) {
      if (step.agents[i].rho != static_cast<double>(i)) ++bad_priority;
    }
  });

  ProtocolConfig no_imp;
  no_imp.ablations.no_improvement = true;
  protocol_steps(bundle, 300, 0x6e6f696d, no_imp, 48.0, 3, 6, 1, [&](const ProtocolStep& step, const StepResult&) {
    ++steps;
    std::vector<double> rho;
    std::vector<double> ones(step.agents.size(), 1.0);
    for (const auto& a : step.agents) rho.push_back(a.rho);
    for (std::size_t i = 0; i < step.agents.size(); ++i) {
      const AgentStep& a = step.agents[i];
      if (!a.active) continue;
      if (a.xi != 1.0) ++bad_xi;
      if (a.f == 0) ++stopped;
      const double want = fairness_efficiency_reward(a.f, rho, static_cast<int>(i), ones, a.nbrs, no_imp.constants, true);
      if (a.r_tilde != want) ++bad_reward;
    }
  });

  ProtocolConfig full;
  full.ablations.full_comm = true;
  protocol_steps(bundle, 300, 0x66756c6c, full, 128.0, 3, 8, 5, [&](const ProtocolStep& step, const StepResult&) {
    ++steps;
    int active = 0;
    for (const auto& a : step.agents) active += a.active ? 1 : 0;
    for (const auto& a : step.agents) {
      if (a.active && static_cast<int>(a.nbrs.size()) != active - 1) ++bad_comm;
    }
  });

  const bool pass = bad_priority == 0 && bad_xi == 0 && bad_reward == 0 && bad_comm == 0 && stopped > 0;
  return {pass, std::to_string(steps) + " steps: priority mismatches " + std::to_string(bad_priority) +
                    ", improvement mismatches " + std::to_string(bad_xi + bad_reward) + " (" +
                    std::to_string(stopped) + " stopped agent-steps), neighbor-count mismatches " +
                    std::to_string(bad_comm)};
}

PipelineConfig determinism_profile() {
  PipelineConfig c;
  c.family = Family::uniform;
  c.n_agents = 2;
  c.n_obstacles = 5;
  c.seed = 42;
  c.workers = 1;
  c.solitary_iterations = 400;
  c.nav_iterations = 300;
  c.joint_iterations = 300;
  c.buffer_capacity = 5'000;
  c.log_interval = 10;
  c.sac.batch = 64;
  c.sac.critic_warmup = 100;
  c.nets = small_bundle_config();
  return c;
}

Outcome determinism() {
  const PipelineConfig cfg = determinism_profile();
  const PipelineResult a = run_pipeline(cfg);
  const PipelineResult b = run_pipeline(cfg);
  const bool logs_equal = a.log_lines == b.log_lines && !a.log_lines.empty();

  EvalSettings es;
  es.n_obstacles = 5;
  es.n_episodes = 10;
  es.seed = 7;
  es.residual_fraction = cfg.residual_fraction;
  const std::string r1 = report_json(evaluate(a.bundle, es));
  const std::string r2 = report_json(evaluate(b.bundle, es));
  es.workers = 3;
  const std::string r3 = report_json(evaluate(a.bundle, es));
  const bool reports_equal = r1 == r2 && r1 == r3;
  return {logs_equal && reports_equal,
          std::to_string(a.log_lines.size()) + " log lines over 1000 iterations " +
              (logs_equal ? "identical" : "differ") + "; reports " + (reports_equal ? "identical" : "differ") +
              " (1 and 3 evaluation workers)"};
}

}  // namespace

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> list = {
      {1, "variance-gradient identity", false, variance_identity},
      {2, "fairness reward gate and fixture", false, reward_gate},
      {3, "stopped agents keep their pose", false, stopped_agents_stay},
      {4, "patience telescoping", false, patience_telescoping},
      {5, "kinematics vs Euler", false, kinematics_oracle},
      {6, "lidar vs ray-march", false, lidar_oracle},
      {7, "gradient check", false, gradient_check},
      {8, "attention permutation invariance", false, attention_permutation},
      {9, "nav-only equivalence", false, nav_only_equivalence},
      {10, "DWA safety in empty maps", false, dwa_empty_maps},
      {11, "desk-scale training smoke", true, desk_training_smoke},
      {12, "ablation toggles", false, ablation_toggles},
      {13, "determinism", true, determinism},
  };
  return list;
}

}  // namespace fairnav::acceptance
