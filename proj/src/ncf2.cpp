#include "fairnav/ncf2.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace fairnav {

double update_patience(PatienceLedger& ledger, int i, const Observation& obs,
                       const Action& solitary_action, const Action& taken_action,
                       const CriticFn& q_mu) {
  double& rho = ledger.rho.at(static_cast<std::size_t>(i));
  rho += q_mu(obs, solitary_action) - q_mu(obs, taken_action);
  return rho;
}

double patience_denominator(std::span<const double> rho, int i, std::span<const int> nbrs) {
  double sum = rho[static_cast<std::size_t>(i)];
  for (int j : nbrs) sum += rho[static_cast<std::size_t>(j)];
  return sum;
}

double relative_patience(std::span<const double> rho, int i, int j, std::span<const int> nbrs) {
  const double den = patience_denominator(rho, i, nbrs);
  if (den == 0.0) return 0.0;
  return (rho[static_cast<std::size_t>(j)] - rho[static_cast<std::size_t>(i)]) / den;
}

std::vector<PatienceMessage> build_patience_messages(std::span<const AgentState> states,
                                                     std::span<const double> rho,
                                                     std::span<const Pose> predicted, int i,
                                                     std::span<const int> nbrs) {
  const Pose& self = states[static_cast<std::size_t>(i)].pose;
  std::vector<PatienceMessage> out;
  out.reserve(nbrs.size());
  for (int j : nbrs) {
    const auto ju = static_cast<std::size_t>(j);
    const double rel = relative_patience(rho, i, j, nbrs);
    out.push_back({relative_offset(states[ju].pose, self), rel,
                   relative_offset(predicted[ju], self), rel});
  }
  return out;
}

std::vector<StateMessage> build_state_messages(std::span<const AgentState> states,
                                               std::span<const Pose> predicted,
                                               std::span<const int> f, int i,
                                               std::span<const int> nbrs) {
  const Pose& self = states[static_cast<std::size_t>(i)].pose;
  std::vector<StateMessage> out;
  out.reserve(nbrs.size());
  for (int j : nbrs) {
    const auto ju = static_cast<std::size_t>(j);
    if (f[ju] == 0) {
      out.push_back({});
    } else {
      out.push_back({relative_offset(states[ju].pose, self), relative_offset(predicted[ju], self)});
    }
  }
  return out;
}

double improvement(const CriticFn& q_mu, const Observation& obs, const Action& taken,
                   const Action& default_action) {
  return q_mu(obs, taken) - q_mu(obs, default_action);
}

double fairness_efficiency_reward(int f_i, std::span<const double> rho, int i,
                                  std::span<const double> xi, std::span<const int> nbrs,
                                  const FairnessConstants& constants, bool include_self) {
  if (f_i != 0) return 0.0;
  const double rho_i = rho[static_cast<std::size_t>(i)];
  double den = include_self ? rho_i : 0.0;
  double weighted = 0.0;
  for (int j : nbrs) {
    const auto ju = static_cast<std::size_t>(j);
    den += rho[ju];
    weighted += (rho[ju] - rho_i) * xi[ju];
  }
  if (den == 0.0) return 0.0;
  return (constants.alpha * weighted - constants.beta * rho_i) / den;
}

// ---------------------------------------------------------------------------

MessageBatchBuilder::MessageBatchBuilder(int current_dim, int next_dim, double scale)
    : current_dim_(current_dim), next_dim_(next_dim), scale_(scale) {}

void MessageBatchBuilder::add(std::span<const PatienceMessage> msgs, const MessageLayout& layout) {
  if (current_dim_ != layout.patience_current() || next_dim_ != layout.patience_next()) {
    throw ShapeError("message builder: patience layout does not match the batch");
  }
  const auto s = static_cast<float>(1.0 / scale_);
  for (const auto& m : msgs) {
    const auto rel = static_cast<float>(std::clamp(m.rel_patience, -1.0, 1.0));
    current_.insert(current_.end(), {static_cast<float>(m.delta_now.x) * s,
                                     static_cast<float>(m.delta_now.y) * s, rel});
    next_.push_back(static_cast<float>(m.delta_next.x) * s);
    next_.push_back(static_cast<float>(m.delta_next.y) * s);
    if (layout.duplicate_patience) {
      next_.push_back(static_cast<float>(std::clamp(m.rel_patience_2, -1.0, 1.0)));
    }
  }
  segments_.push(static_cast<int>(msgs.size()));
}

void MessageBatchBuilder::add(std::span<const StateMessage> msgs) {
  if (current_dim_ != MessageLayout::state_current() || next_dim_ != MessageLayout::state_next()) {
    throw ShapeError("message builder: state layout does not match the batch");
  }
  const auto s = static_cast<float>(1.0 / scale_);
  for (const auto& m : msgs) {
    current_.push_back(static_cast<float>(m.gated_delta_now.x) * s);
    current_.push_back(static_cast<float>(m.gated_delta_now.y) * s);
    next_.push_back(static_cast<float>(m.gated_delta_next.x) * s);
    next_.push_back(static_cast<float>(m.gated_delta_next.y) * s);
  }
  segments_.push(static_cast<int>(msgs.size()));
}

MessageBatch<float> MessageBatchBuilder::build() const {
  MessageBatch<float> b;
  const int rows = segments_.rows();
  b.current = Eigen::Map<const Tensor>(current_.data(), rows, current_dim_);
  b.next = Eigen::Map<const Tensor>(next_.data(), rows, next_dim_);
  b.segments = segments_;
  return b;
}

Action compose_residual(const Action& base, const Action& residual, const Limits& lim) {
  return clamp_action({base.v + residual.v, base.w + residual.w}, lim);
}

// ---------------------------------------------------------------------------

namespace {

Tensor feature_matrix(std::span<const Observation> obs, double map_size, int extra) {
  Tensor x(static_cast<Eigen::Index>(obs.size()), kObservationFeatures + extra);
  for (std::size_t b = 0; b < obs.size(); ++b) {
    const auto f = observation_features(obs[b], map_size);
    for (int k = 0; k < kObservationFeatures; ++k) {
      x(static_cast<Eigen::Index>(b), k) = f[static_cast<std::size_t>(k)];
    }
  }
  return x;
}

}  // namespace

PolicyRunner::PolicyRunner(const PolicyBundle& bundle, const Limits& limits,
                           double residual_fraction)
    : bundle_(bundle), limits_(limits), residual_fraction_(residual_fraction) {}

std::vector<std::array<float, 4>> PolicyRunner::continuous_heads(
    const Network<float>& net, std::span<const Observation> obs,
    const MessageBatch<float>* msgs) const {
  ad::Tape<float> tape;
  const Binder<float> bind{tape, false};
  const Var out = net.forward(bind, tape.constant(feature_matrix(obs, limits_.map_size, 0)), msgs);
  const Tensor& y = tape.value(out);
  std::vector<std::array<float, 4>> heads(obs.size());
  for (std::size_t b = 0; b < obs.size(); ++b) {
    for (int k = 0; k < 4; ++k) heads[b][static_cast<std::size_t>(k)] = y(static_cast<Eigen::Index>(b), k);
  }
  return heads;
}

ContinuousSample PolicyRunner::solitary(const Observation& obs, Rng* rng) const {
  std::array<Rng*, 1> rngs{rng};
  return solitary(std::span<const Observation>(&obs, 1), rngs)[0];
}

std::vector<ContinuousSample> PolicyRunner::solitary(std::span<const Observation> obs,
                                                     std::span<Rng*> rngs) const {
  if (obs.empty()) return {};
  const auto heads = continuous_heads(bundle_.solitary_actor, obs, nullptr);
  const ActionBox box = residual_box();
  std::vector<ContinuousSample> out(obs.size());
  for (std::size_t b = 0; b < obs.size(); ++b) {
    out[b] = sample_continuous(heads[b], rngs[b], box);
    out[b].action = compose_residual(obs[b].dwa_suggestion, out[b].action, limits_);
  }
  return out;
}

std::vector<double> PolicyRunner::q_mu(std::span<const Observation> obs,
                                       std::span<const Action> actions) const {
  if (obs.size() != actions.size()) throw ShapeError("q_mu: one action per observation");
  if (obs.empty()) return {};
  Tensor x = feature_matrix(obs, limits_.map_size, 2);
  for (std::size_t b = 0; b < obs.size(); ++b) {
    const auto r = static_cast<Eigen::Index>(b);
    x(r, kObservationFeatures) = static_cast<float>(actions[b].v / limits_.v_max());
    x(r, kObservationFeatures + 1) = static_cast<float>(actions[b].w / Limits::w_max());
  }
  ad::Tape<float> tape;
  const Binder<float> bind{tape, false};
  const Var in = tape.constant(std::move(x));
  const Tensor q0 = tape.value(bundle_.solitary_critics[0].forward(bind, in, nullptr));
  const Tensor& q1 = tape.value(bundle_.solitary_critics[1].forward(bind, in, nullptr));
  std::vector<double> out(obs.size());
  for (std::size_t b = 0; b < obs.size(); ++b) {
    const auto r = static_cast<Eigen::Index>(b);
    out[b] = std::min(q0(r, 0), q1(r, 0));
  }
  return out;
}

double PolicyRunner::q_mu(const Observation& obs, const Action& action) const {
  return q_mu(std::span<const Observation>(&obs, 1), std::span<const Action>(&action, 1))[0];
}

CriticFn PolicyRunner::q_mu_fn() const {
  return [this](const Observation& o, const Action& a) { return q_mu(o, a); };
}

std::vector<BinarySample> PolicyRunner::cf2(std::span<const Observation> obs,
                                            std::span<const std::vector<PatienceMessage>> msgs,
                                            std::span<Rng*> rngs) const {
  if (obs.empty()) return {};
  const MessageLayout& layout = bundle_.config.layout;
  MessageBatchBuilder builder(layout.patience_current(), layout.patience_next(),
                              message_scale(limits_));
  for (const auto& m : msgs) builder.add(m, layout);
  const MessageBatch<float> batch = builder.build();

  ad::Tape<float> tape;
  const Binder<float> bind{tape, false};
  const Var out = bundle_.cf2_actor.forward(
      bind, tape.constant(feature_matrix(obs, limits_.map_size, 0)), &batch);
  const Tensor& y = tape.value(out);
  std::vector<BinarySample> samples(obs.size());
  for (std::size_t b = 0; b < obs.size(); ++b) {
    const auto r = static_cast<Eigen::Index>(b);
    const std::array<float, 2> logits{y(r, 0), y(r, 1)};
    samples[b] = sample_binary(logits, rngs[b]);
  }
  return samples;
}

std::vector<ContinuousSample> PolicyRunner::nav(std::span<const Observation> obs,
                                                std::span<const std::vector<StateMessage>> msgs,
                                                std::span<Rng*> rngs) const {
  if (obs.empty()) return {};
  MessageBatchBuilder builder(MessageLayout::state_current(), MessageLayout::state_next(),
                              message_scale(limits_));
  for (const auto& m : msgs) builder.add(m);
  const MessageBatch<float> batch = builder.build();
  const auto heads = continuous_heads(bundle_.nav_actor, obs, &batch);
  const ActionBox box = residual_box();
  std::vector<ContinuousSample> out(obs.size());
  for (std::size_t b = 0; b < obs.size(); ++b) {
    out[b] = sample_continuous(heads[b], rngs[b], box);
    out[b].action = compose_residual(obs[b].dwa_suggestion, out[b].action, limits_);
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string_view to_string(Controller controller) {
  switch (controller) {
    case Controller::ncf2: return "ncf2";
    case Controller::nav_only: return "nav_only";
    case Controller::solitary: return "solitary";
    case Controller::dwa: return "dwa";
  }
  return "?";
}

Controller parse_controller(std::string_view text) {
  for (Controller c : {Controller::ncf2, Controller::nav_only, Controller::solitary, Controller::dwa}) {
    if (text == to_string(c)) return c;
  }
  throw std::invalid_argument("unknown controller '" + std::string(text) + "'");
}

namespace {

// Keyed streams, or nulls in deterministic mode.
struct RngSet {
  std::vector<Rng> storage;
  std::vector<Rng*> ptrs;

  RngSet(std::span<const int> agents, int t, const RngKey& key, RngPurpose purpose,
         bool deterministic) {
    storage.reserve(agents.size());
    for (int i : agents) {
      if (deterministic) {
        ptrs.push_back(nullptr);
      } else {
        storage.push_back(key.make(i, t, purpose));
        ptrs.push_back(&storage.back());
      }
    }
  }
};

}  // namespace

ProtocolStep step_protocol(const PolicyRunner& runner, const Scenario& scenario,
                           std::span<const AgentState> states, const PatienceLedger& ledger,
                           int t, const RngKey& key, const ProtocolConfig& config,
                           const DwaConfig& dwa) {
  const int n = scenario.n_agents();
  const Limits lim = runner.limits();
  ProtocolStep step;
  step.t = t;
  step.agents.resize(static_cast<std::size_t>(n));
  step.joint_action.assign(static_cast<std::size_t>(n), Action{});

  std::vector<double> rho(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    rho[static_cast<std::size_t>(i)] = config.ablations.fixed_priority
                                           ? static_cast<double>(i)
                                           : ledger.rho.at(static_cast<std::size_t>(i));
  }

  std::vector<int> active;
  std::vector<Observation> obs;
  std::vector<Pose> predicted(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto iu = static_cast<std::size_t>(i);
    AgentStep& a = step.agents[iu];
    a.rho = rho[iu];
    predicted[iu] = states[iu].pose;
    a.predicted = states[iu].pose;
    if (!states[iu].active()) continue;
    a.active = true;
    a.obs = observe(scenario.world, states, i, scenario.goals[iu], dwa);
    if (config.ablations.full_comm) {
      for (int j = 0; j < n; ++j) {
        if (j != i && states[static_cast<std::size_t>(j)].active()) a.nbrs.push_back(j);
      }
    } else {
      a.nbrs = neighbors(states, i, lim.comm_range());
    }
    active.push_back(i);
    obs.push_back(a.obs);
  }
  if (active.empty()) return step;

  auto finish = [&](std::size_t k, const Action& act) {
    const auto iu = static_cast<std::size_t>(active[k]);
    step.agents[iu].action = act;
    step.joint_action[iu] = act;
  };

  if (config.controller == Controller::dwa) {
    for (std::size_t k = 0; k < active.size(); ++k) {
      AgentStep& a = step.agents[static_cast<std::size_t>(active[k])];
      a.nu.action = a.obs.dwa_suggestion;
      a.default_action = a.nu.action;
      finish(k, a.nu.action);
    }
    return step;
  }

  if (config.controller == Controller::solitary) {
    RngSet rngs(active, t, key, RngPurpose::solitary, config.deterministic);
    const auto samples = runner.solitary(obs, rngs.ptrs);
    for (std::size_t k = 0; k < active.size(); ++k) {
      AgentStep& a = step.agents[static_cast<std::size_t>(active[k])];
      a.nu = samples[k];
      a.default_action = a.nu.action;
      finish(k, a.nu.action);
    }
    return step;
  }

  // Single-agent prediction from the deterministic solitary action.
  std::vector<Rng*> no_rng(active.size(), nullptr);
  const auto solitary = runner.solitary(obs, no_rng);
  for (std::size_t k = 0; k < active.size(); ++k) {
    const auto iu = static_cast<std::size_t>(active[k]);
    step.agents[iu].solitary_action = solitary[k].action;
    predicted[iu] = step_kinematics(states[iu].pose, solitary[k].action);
    step.agents[iu].predicted = predicted[iu];
  }

  const bool cooperative = config.controller == Controller::ncf2;
  std::vector<int> f(static_cast<std::size_t>(n), 1);
  if (cooperative) {
    std::vector<std::vector<PatienceMessage>> pmsgs;
    for (int i : active) {
      auto& a = step.agents[static_cast<std::size_t>(i)];
      a.patience_msgs = build_patience_messages(states, rho, predicted, i, a.nbrs);
      pmsgs.push_back(a.patience_msgs);
    }
    RngSet rngs(active, t, key, RngPurpose::cf2, config.deterministic);
    const auto decisions = runner.cf2(obs, pmsgs, rngs.ptrs);
    for (std::size_t k = 0; k < active.size(); ++k) {
      const auto iu = static_cast<std::size_t>(active[k]);
      step.agents[iu].cf2 = decisions[k];
      f[iu] = config.force_move ? 1 : decisions[k].f;
      step.agents[iu].f = f[iu];
    }
  }

  std::vector<std::vector<StateMessage>> smsgs;
  for (int i : active) {
    auto& a = step.agents[static_cast<std::size_t>(i)];
    a.state_msgs = build_state_messages(states, predicted, f, i, a.nbrs);
    smsgs.push_back(a.state_msgs);
  }
  {
    RngSet rngs(active, t, key, RngPurpose::nav, config.deterministic);
    const auto nu = runner.nav(obs, smsgs, rngs.ptrs);
    for (std::size_t k = 0; k < active.size(); ++k) {
      const auto iu = static_cast<std::size_t>(active[k]);
      AgentStep& a = step.agents[iu];
      a.nu = nu[k];
      a.default_action = nu[k].action;
      finish(k, f[iu] == 1 ? nu[k].action : Action{});
    }
  }
  if (!cooperative) return step;

  // Default actions: same streams, every sender ungated.
  const std::vector<int> all_move(static_cast<std::size_t>(n), 1);
  std::vector<std::vector<StateMessage>> ungated;
  bool any_gated = false;
  for (int i : active) {
    const auto& a = step.agents[static_cast<std::size_t>(i)];
    ungated.push_back(build_state_messages(states, predicted, all_move, i, a.nbrs));
    any_gated = any_gated || std::any_of(a.nbrs.begin(), a.nbrs.end(),
                                         [&](int j) { return f[static_cast<std::size_t>(j)] == 0; });
  }
  if (any_gated) {
    RngSet rngs(active, t, key, RngPurpose::nav, config.deterministic);
    const auto bar = runner.nav(obs, ungated, rngs.ptrs);
    for (std::size_t k = 0; k < active.size(); ++k) {
      step.agents[static_cast<std::size_t>(active[k])].default_action = bar[k].action;
    }
  }

  // Q_mu at a_hat, a, and a_bar in one batch.
  std::vector<Observation> q_obs;
  std::vector<Action> q_act;
  for (int i : active) {
    const auto& a = step.agents[static_cast<std::size_t>(i)];
    for (const Action& act : {a.solitary_action, a.action, a.default_action}) {
      q_obs.push_back(a.obs);
      q_act.push_back(act);
    }
  }
  const auto q = runner.q_mu(q_obs, q_act);
  std::vector<double> xi(static_cast<std::size_t>(n), 0.0);
  for (std::size_t k = 0; k < active.size(); ++k) {
    const auto iu = static_cast<std::size_t>(active[k]);
    AgentStep& a = step.agents[iu];
    // Batched rows can round differently, so equal actions share one value.
    a.q_solitary = q[3 * k];
    a.q_taken = a.action == a.solitary_action ? a.q_solitary : q[3 * k + 1];
    const double q_default = a.default_action == a.action ? a.q_taken : q[3 * k + 2];
    a.xi = config.ablations.no_improvement ? 1.0 : a.q_taken - q_default;
    xi[iu] = a.xi;
  }
  for (int i : active) {
    AgentStep& a = step.agents[static_cast<std::size_t>(i)];
    a.r_tilde = fairness_efficiency_reward(a.f, rho, i, xi, a.nbrs, config.constants,
                                           config.reward_include_self);
  }
  return step;
}

void advance_patience(PatienceLedger& ledger, const ProtocolStep& step,
                      const ProtocolConfig& config) {
  if (config.controller != Controller::ncf2) return;
  for (std::size_t i = 0; i < step.agents.size(); ++i) {
    const AgentStep& a = step.agents[i];
    if (a.active) ledger.rho[i] += a.q_solitary - a.q_taken;
  }
}

// ---------------------------------------------------------------------------

EpisodeResult run_episode(const PolicyRunner& runner, const Scenario& scenario,
                          const EpisodeOptions& options, const StepObserver& observer) {
  const int n = scenario.n_agents();
  std::vector<AgentState> states = initial_states(scenario);
  PatienceLedger ledger(n);
  std::vector<TraceRecord> trace;

  int t = 0;
  ProtocolStep step =
      step_protocol(runner, scenario, states, ledger, t, options.key, options.protocol, options.dwa);
  while (true) {
    StepResult res = env_step(scenario.world, scenario.goals, states, step.joint_action, t,
                              options.rewards);
    if (options.record_trace) {
      for (int i = 0; i < n; ++i) {
        const auto iu = static_cast<std::size_t>(i);
        const AgentStep& a = step.agents[iu];
        const Pose& p = states[iu].pose;
        trace.push_back({t, i, p.x, p.y, p.theta, a.f, a.action.v, a.action.w, res.rewards[iu],
                         a.r_tilde, res.next[iu].status});
      }
    }
    advance_patience(ledger, step, options.protocol);
    states = std::move(res.next);
    ++t;

    const bool any_active = std::any_of(states.begin(), states.end(),
                                        [](const AgentState& s) { return s.active(); });
    const bool last = !any_active || t >= options.t_max;
    ProtocolStep next;
    const bool need_next = any_active && (!last || observer);
    if (need_next) {
      next = step_protocol(runner, scenario, states, ledger, t, options.key, options.protocol,
                           options.dwa);
    }
    res.next = states;
    if (observer) observer(step, res, need_next ? &next : nullptr);
    if (last) break;
    step = std::move(next);
  }

  if (options.record_trace) {
    for (int i = 0; i < n; ++i) {
      const auto& s = states[static_cast<std::size_t>(i)];
      trace.push_back({t, i, s.pose.x, s.pose.y, s.pose.theta, 1, 0.0, 0.0, 0.0, 0.0, s.status});
    }
  }
  return summarize_episode(states, std::move(trace), options.t_max);
}

}  // namespace fairnav
