#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "fairnav/envcore.hpp"
#include "fairnav/nets.hpp"

namespace fairnav {

struct FairnessConstants {
  double alpha{0.5};
  double beta{0.1};
};

struct AblationFlags {
  bool no_improvement{false};  // xi == 1 in the fairness-efficiency reward
  bool full_comm{false};       // every other active agent is a neighbor
  bool fixed_priority{false};  // rho^i == i (0-based index)
};

/// Running patience per agent: the accumulated action-value gap between the
/// solitary action and the executed one. Starts at zero.
struct PatienceLedger {
  std::vector<double> rho;

  PatienceLedger() = default;
  explicit PatienceLedger(int n_agents) : rho(static_cast<std::size_t>(n_agents), 0.0) {}
};

/// Q_mu(o, a) evaluated on the agent's own observation (the goal is part of o).
using CriticFn = std::function<double(const Observation&, const Action&)>;

/// rho^i += Q(o, a_hat) - Q(o, a). Returns the new value.
double update_patience(PatienceLedger& ledger, int i, const Observation& obs,
                       const Action& solitary_action, const Action& taken_action,
                       const CriticFn& q_mu);

/// Sum of rho over the neighbors and agent i itself.
double patience_denominator(std::span<const double> rho, int i, std::span<const int> nbrs);

/// (rho^j - rho^i) / denominator, or 0 when the denominator is 0.
double relative_patience(std::span<const double> rho, int i, int j, std::span<const int> nbrs);

struct PatienceMessage {
  Vec2 delta_now;
  double rel_patience{0.0};
  Vec2 delta_next;
  double rel_patience_2{0.0};
};

struct StateMessage {
  Vec2 gated_delta_now;
  Vec2 gated_delta_next;
};

/// Messages j -> i for every j in `nbrs`, in that order. `predicted[j]` is
/// agent j's pose after its solitary action.
std::vector<PatienceMessage> build_patience_messages(std::span<const AgentState> states,
                                                     std::span<const double> rho,
                                                     std::span<const Pose> predicted, int i,
                                                     std::span<const int> nbrs);

/// Offsets gated by the sender's decision: all-zero rows from f = 0 senders.
std::vector<StateMessage> build_state_messages(std::span<const AgentState> states,
                                               std::span<const Pose> predicted,
                                               std::span<const int> f, int i,
                                               std::span<const int> nbrs);

/// xi = Q(o, a) - Q(o, a_bar).
double improvement(const CriticFn& q_mu, const Observation& obs, const Action& taken,
                   const Action& default_action);

/// (1 - f) * (alpha * sum_j (rho^j - rho^i) xi^j - beta * rho^i) / denominator.
/// `xi` is indexed by agent. The denominator sums over nbrs plus i when
/// `include_self`, otherwise over nbrs only; a zero denominator yields 0.
double fairness_efficiency_reward(int f_i, std::span<const double> rho, int i,
                                  std::span<const double> xi, std::span<const int> nbrs,
                                  const FairnessConstants& constants, bool include_self = true);

// ---------------------------------------------------------------------------
// Network input encoding

/// Message rows are scaled by this length before encoding.
inline double message_scale(const Limits& lim) { return lim.comm_range(); }

/// Accumulates one message set per sample. Offsets are divided by `scale`;
/// relative patience is clipped to [-1, 1] so a near-zero patience sum cannot
/// blow up the encoder input.
class MessageBatchBuilder {
 public:
  MessageBatchBuilder(int current_dim, int next_dim, double scale);

  void add(std::span<const PatienceMessage> msgs, const MessageLayout& layout);
  void add(std::span<const StateMessage> msgs);
  MessageBatch<float> build() const;

 private:
  int current_dim_;
  int next_dim_;
  double scale_;
  std::vector<float> current_;
  std::vector<float> next_;
  Segments segments_;
};

/// Residual sample added to the base action and clamped into the limits.
Action compose_residual(const Action& base, const Action& residual, const Limits& lim);

/// Batched inference against one immutable bundle. Safe to share across
/// threads; every call builds its own tape.
class PolicyRunner {
 public:
  PolicyRunner(const PolicyBundle& bundle, const Limits& limits, double residual_fraction);

  const PolicyBundle& bundle() const { return bundle_; }
  const Limits& limits() const { return limits_; }
  ActionBox residual_box() const { return ActionBox::residual(limits_, residual_fraction_); }

  /// Solitary policy action; null rng means deterministic. The sample's
  /// action field is the final composed action.
  ContinuousSample solitary(const Observation& obs, Rng* rng) const;
  std::vector<ContinuousSample> solitary(std::span<const Observation> obs,
                                         std::span<Rng*> rngs) const;

  /// Q_mu as the minimum of the twin solitary critics, one value per row.
  std::vector<double> q_mu(std::span<const Observation> obs, std::span<const Action> actions) const;
  double q_mu(const Observation& obs, const Action& action) const;
  CriticFn q_mu_fn() const;

  std::vector<BinarySample> cf2(std::span<const Observation> obs,
                                std::span<const std::vector<PatienceMessage>> msgs,
                                std::span<Rng*> rngs) const;

  /// Navigation samples composed onto each observation's DWA suggestion.
  std::vector<ContinuousSample> nav(std::span<const Observation> obs,
                                    std::span<const std::vector<StateMessage>> msgs,
                                    std::span<Rng*> rngs) const;

 private:
  std::vector<std::array<float, 4>> continuous_heads(const Network<float>& net,
                                                     std::span<const Observation> obs,
                                                     const MessageBatch<float>* msgs) const;

  const PolicyBundle& bundle_;
  Limits limits_;
  double residual_fraction_;
};

// ---------------------------------------------------------------------------
// Protocol

enum class Controller {
  ncf2,      // patience messages -> CF2 -> state messages -> navigation
  nav_only,  // navigation module with every agent allowed to move
  solitary,  // solitary policy per agent, no messages
  dwa,       // DWA suggestion only
};

std::string_view to_string(Controller controller);
/// Accepts "ncf2", "nav_only", "solitary", "dwa".
Controller parse_controller(std::string_view text);

struct ProtocolConfig {
  Controller controller{Controller::ncf2};
  FairnessConstants constants;
  AblationFlags ablations;
  bool deterministic{false};
  bool force_move{false};       // ncf2 only: override every f with 1
  bool reward_include_self{true};
};

/// Everything produced for one agent during one protocol step.
struct AgentStep {
  bool active{false};
  Observation obs;
  std::vector<int> nbrs;
  Action solitary_action;   // a_hat
  Pose predicted;           // pose after a_hat
  double rho{0.0};
  std::vector<PatienceMessage> patience_msgs;
  BinarySample cf2;
  int f{1};
  std::vector<StateMessage> state_msgs;
  ContinuousSample nu;      // navigation (or solitary) sample, composed action
  Action action;            // executed: f * nu
  Action default_action;    // a_bar
  double q_solitary{0.0};    // Q_mu(o, a_hat)
  double q_taken{0.0};       // Q_mu(o, a)
  double xi{0.0};
  double r_tilde{0.0};
};

struct ProtocolStep {
  int t{0};
  std::vector<AgentStep> agents;
  std::vector<Action> joint_action;
};

/// Purpose tags for keyed random streams.
enum class RngPurpose : std::uint64_t { cf2 = 1, nav = 2, solitary = 3 };

struct RngKey {
  std::uint64_t seed{0};
  std::uint64_t episode{0};

  Rng make(int agent, int t, RngPurpose purpose) const {
    return Rng{seed, episode, static_cast<std::uint64_t>(agent), static_cast<std::uint64_t>(t),
               static_cast<std::uint64_t>(purpose)};
  }
};

/// One protocol pass at time t over the current joint state.
ProtocolStep step_protocol(const PolicyRunner& runner, const Scenario& scenario,
                           std::span<const AgentState> states, const PatienceLedger& ledger,
                           int t, const RngKey& key, const ProtocolConfig& config,
                           const DwaConfig& dwa);

/// Applies the patience update for every agent that acted in `step`, using
/// the action values recorded during the pass.
void advance_patience(PatienceLedger& ledger, const ProtocolStep& step,
                      const ProtocolConfig& config);

// ---------------------------------------------------------------------------
// Episodes

struct EpisodeOptions {
  ProtocolConfig protocol;
  DwaConfig dwa;
  RewardConstants rewards;
  int t_max{kDefaultTMax};
  RngKey key;
  bool record_trace{true};
};

/// Called after every environment step with the protocol pass that chose the
/// actions, the environment outcome, and the following pass (null when no
/// agent is still active).
using StepObserver =
    std::function<void(const ProtocolStep& step, const StepResult& result, const ProtocolStep* next)>;

/// Runs a full episode. Crashed agents freeze while the others continue until
/// every agent is absorbed or t_max steps have been taken.
EpisodeResult run_episode(const PolicyRunner& runner, const Scenario& scenario,
                          const EpisodeOptions& options, const StepObserver& observer = {});

}  // namespace fairnav
