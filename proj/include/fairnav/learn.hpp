#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <iosfwd>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "fairnav/envcore.hpp"
#include "fairnav/ncf2.hpp"
#include "fairnav/nets.hpp"

namespace fairnav {

enum class Stream { solitary = 0, nav = 1, cf2 = 2 };
inline constexpr int kStreamCount = 3;
std::string_view to_string(Stream stream);

/// Message rows for one sample, already scaled the way MessageBatchBuilder
/// scales them (row-major, `rows` rows each).
struct PackedMessages {
  std::vector<float> current;
  std::vector<float> next;
  int rows{0};
};

struct Transition {
  Stream stream{Stream::nav};
  ObservationFeatures obs{};
  PackedMessages msgs;
  Action base;      // DWA suggestion the residual was added to
  Action action;    // executed action (continuous streams)
  int f{1};         // decision (cf2 stream)
  double reward{0.0};
  ObservationFeatures next_obs{};
  PackedMessages next_msgs;
  Action next_base;
  bool done{false};
};

/// Per-stream FIFO rings. Pushes may come from any thread; sampling is
/// uniform with replacement within one stream.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity_per_stream);

  void push(Transition t);
  std::size_t size(Stream stream) const;
  std::size_t capacity() const { return capacity_; }
  /// Index positions are drawn before copying, so the result depends only on
  /// the buffer contents and `rng`.
  std::vector<Transition> sample(Stream stream, int count, Rng& rng) const;
  /// Oldest-first view of one stream, for tests.
  std::vector<Transition> contents(Stream stream) const;

 private:
  struct Ring {
    std::vector<Transition> items;
    std::size_t head{0};  // next slot to overwrite once full
  };

  std::size_t capacity_;
  mutable std::mutex mutex_;
  std::array<Ring, kStreamCount> rings_;
};

/// Dense training batch assembled from transitions of one stream.
struct Batch {
  Tensor obs;
  Tensor next_obs;
  std::optional<MessageBatch<float>> msgs;
  std::optional<MessageBatch<float>> next_msgs;
  Tensor action;      // B x 2 in scaled units (v / v_max, w / w_max)
  std::vector<int> f;
  Tensor base;        // B x 2 scaled
  Tensor next_base;   // B x 2 scaled
  Tensor reward;      // B x 1
  Tensor not_done;    // B x 1

  int size() const { return static_cast<int>(obs.rows()); }
};

/// Message dimensions per stream (0 when the stream carries none).
struct MessageDims {
  int current{0};
  int next{0};
};
MessageDims stream_message_dims(Stream stream, const MessageLayout& layout);

Batch make_batch(std::span<const Transition> items, const MessageDims& dims, const Limits& lim);

PackedMessages pack_messages(std::span<const PatienceMessage> msgs, const MessageLayout& layout,
                             double scale);
PackedMessages pack_messages(std::span<const StateMessage> msgs, double scale);

// ---------------------------------------------------------------------------
// Optimization

struct AdamConfig {
  double lr{1e-3};
  double beta1{0.9};
  double beta2{0.999};
  double eps{1e-8};
};

/// Adaptive-moment optimizer over a fixed parameter list.
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<Parameter<float>*> params, AdamConfig config);

  void zero_grad();
  void step();
  long steps() const { return t_; }
  void set_steps(long t) { t_ = t; }

  /// Moment tensors in parameter order, for checkpointing.
  std::vector<NamedTensor> state(const std::string& prefix) const;
  void load_state(const std::string& prefix, std::span<const NamedTensor> tensors);

 private:
  std::vector<Parameter<float>*> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  AdamConfig config_;
  long t_{0};
};

/// Adam on a single scalar (the log-temperature).
struct ScalarAdam {
  AdamConfig config;
  double m{0.0};
  double v{0.0};
  long t{0};

  double step(double value, double grad);
};

struct SacConfig {
  double discount{0.95};
  double initial_temperature{0.01};
  double tau{0.005};
  int target_interval{1};
  double lr{1e-3};
  int batch{256};
  long critic_warmup{10'000};
  double target_entropy_continuous{-2.0};
  double target_entropy_discrete{0.3 * 0.6931471805599453};
  double grad_clip{10.0};  // global L2 norm per network; 0 disables

  void validate() const;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Learner-side state for one actor and its twin critics. The networks live
/// in the learner's PolicyBundle; targets and optimizer moments live here.
struct SacState {
  Network<float>* actor{nullptr};
  std::array<Network<float>*, 2> critics{};
  std::array<Network<float>, 2> targets;
  Adam actor_opt;
  Adam critic_opt;
  double log_temperature{0.0};
  ScalarAdam temperature_opt;
  long iterations{0};

  SacState() = default;
  SacState(Network<float>& actor, std::array<Network<float>, 2>& critics, const SacConfig& config);

  double temperature() const;
};

struct SacLosses {
  double critic_loss{0.0};
  double actor_loss{0.0};
  double temperature{0.0};  // value used in this update
  double entropy{0.0};      // mean policy entropy estimate
  bool actor_updated{false};
};

/// target <- (1 - tau) * target + tau * online, per parameter.
void polyak_update(Network<float>& target, const Network<float>& online, double tau);

/// Twin-critic soft actor-critic on a tanh-squashed residual over the base
/// action. Only critics update for the first `critic_warmup` iterations.
SacLosses sac_update_continuous(SacState& state, const Batch& batch, const SacConfig& config,
                                double residual_fraction, Rng& rng);

/// Expectation-form soft actor-critic over two discrete actions.
SacLosses sac_update_discrete(SacState& state, const Batch& batch, const SacConfig& config);

// ---------------------------------------------------------------------------
// Pipeline

struct PipelineConfig {
  Family family{Family::uniform};
  int n_agents{2};
  int n_obstacles{5};
  double map_size{128.0};
  std::uint64_t seed{1};
  int workers{1};
  int t_max{kDefaultTMax};

  long solitary_iterations{1'000'000};
  long nav_iterations{1'000'000};
  long joint_iterations{1'000'000};
  double updates_per_transition{1.0};

  std::size_t buffer_capacity{1'500'000};
  long checkpoint_interval{10'000};
  long log_interval{100};
  int sr_window{100};
  int max_worker_restarts{8};

  double residual_fraction{0.2};
  double fairness_reward_clip{1.0};

  SacConfig sac;
  BundleConfig nets;
  DwaConfig dwa;
  RewardConstants rewards;
  FairnessConstants fairness;
  AblationFlags ablations;

  std::string checkpoint_path;  // empty disables checkpoints
  std::string log_path;         // empty disables the log file

  void validate() const;
};

struct PipelineProgress {
  int phase{0};
  long iteration{0};        // gradient steps completed in the current phase
  long episodes_done{0};    // across all phases
  std::uint64_t next_episode{0};
};

struct PipelineResult {
  PolicyBundle bundle;
  PipelineProgress progress;
  std::vector<std::string> log_lines;
};

/// Immutable parameter snapshot published by the learner.
class SnapshotSlot {
 public:
  void publish(std::shared_ptr<const PolicyBundle> snapshot);
  std::shared_ptr<const PolicyBundle> load() const;

 private:
  mutable std::mutex mutex_;
  std::shared_ptr<const PolicyBundle> current_;
};

/// Turns one episode's protocol steps into replay transitions for the
/// streams trained in `phase`.
std::vector<Transition> episode_transitions(int phase, const ProtocolStep& step,
                                            const StepResult& result, const ProtocolStep* next,
                                            const PolicyBundle& bundle, const Limits& lim,
                                            double fairness_reward_clip);

/// Scenario family and agent count used in `phase` (phase 0 is solitary).
Scenario training_scenario(const PipelineConfig& config, int phase, std::uint64_t episode);
ProtocolConfig training_protocol(const PipelineConfig& config, int phase);

/// Runs phases 0-2. With one worker, rollouts and updates alternate in
/// lockstep and the whole run is deterministic. With `resume`, training
/// restarts from that checkpoint's phase and iteration.
PipelineResult run_pipeline(const PipelineConfig& config,
                            const std::optional<std::string>& resume = std::nullopt,
                            std::ostream* progress = nullptr);

}  // namespace fairnav
