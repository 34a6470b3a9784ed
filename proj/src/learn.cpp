#include "fairnav/learn.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <ostream>
#include <sstream>
#include <thread>

#include "fairnav/text.hpp"

namespace fairnav {

std::string_view to_string(Stream stream) {
  switch (stream) {
    case Stream::solitary: return "solitary";
    case Stream::nav: return "nav";
    case Stream::cf2: return "cf2";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Replay

ReplayBuffer::ReplayBuffer(std::size_t capacity_per_stream) : capacity_(capacity_per_stream) {
  if (capacity_ == 0) throw std::invalid_argument("replay capacity must be positive");
}

void ReplayBuffer::push(Transition t) {
  std::lock_guard lock(mutex_);
  Ring& r = rings_[static_cast<std::size_t>(t.stream)];
  if (r.items.size() < capacity_) {
    r.items.push_back(std::move(t));
  } else {
    r.items[r.head] = std::move(t);
    r.head = (r.head + 1) % capacity_;
  }
}

std::size_t ReplayBuffer::size(Stream stream) const {
  std::lock_guard lock(mutex_);
  return rings_[static_cast<std::size_t>(stream)].items.size();
}

std::vector<Transition> ReplayBuffer::sample(Stream stream, int count, Rng& rng) const {
  std::lock_guard lock(mutex_);
  const Ring& r = rings_[static_cast<std::size_t>(stream)];
  if (r.items.size() < static_cast<std::size_t>(count)) {
    throw std::logic_error("replay: stream " + std::string(to_string(stream)) +
                           " holds fewer transitions than the batch size");
  }
  std::vector<Transition> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k) out.push_back(r.items[rng.below(r.items.size())]);
  return out;
}

std::vector<Transition> ReplayBuffer::contents(Stream stream) const {
  std::lock_guard lock(mutex_);
  const Ring& r = rings_[static_cast<std::size_t>(stream)];
  std::vector<Transition> out;
  out.reserve(r.items.size());
  for (std::size_t k = 0; k < r.items.size(); ++k) {
    out.push_back(r.items[(r.head + k) % r.items.size()]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batches

MessageDims stream_message_dims(Stream stream, const MessageLayout& layout) {
  switch (stream) {
    case Stream::solitary: return {};
    case Stream::nav: return {MessageLayout::state_current(), MessageLayout::state_next()};
    case Stream::cf2: return {layout.patience_current(), layout.patience_next()};
  }
  return {};
}

namespace {

PackedMessages pack(const MessageBatch<float>& b) {
  PackedMessages p;
  p.rows = static_cast<int>(b.current.rows());
  p.current.assign(b.current.data(), b.current.data() + b.current.size());
  p.next.assign(b.next.data(), b.next.data() + b.next.size());
  return p;
}

MessageBatch<float> unpack(std::span<const PackedMessages* const> items, const MessageDims& dims) {
  int rows = 0;
  for (const auto* p : items) rows += p->rows;
  MessageBatch<float> b;
  b.current.resize(rows, dims.current);
  b.next.resize(rows, dims.next);
  int r = 0;
  for (const auto* p : items) {
    if (static_cast<int>(p->current.size()) != p->rows * dims.current ||
        static_cast<int>(p->next.size()) != p->rows * dims.next) {
      throw ShapeError("batch: message rows do not match the stream layout");
    }
    std::copy(p->current.begin(), p->current.end(), b.current.data() + r * dims.current);
    std::copy(p->next.begin(), p->next.end(), b.next.data() + r * dims.next);
    b.segments.push(p->rows);
    r += p->rows;
  }
  return b;
}

}  // namespace

PackedMessages pack_messages(std::span<const PatienceMessage> msgs, const MessageLayout& layout,
                             double scale) {
  MessageBatchBuilder b(layout.patience_current(), layout.patience_next(), scale);
  b.add(msgs, layout);
  return pack(b.build());
}

PackedMessages pack_messages(std::span<const StateMessage> msgs, double scale) {
  MessageBatchBuilder b(MessageLayout::state_current(), MessageLayout::state_next(), scale);
  b.add(msgs);
  return pack(b.build());
}

Batch make_batch(std::span<const Transition> items, const MessageDims& dims, const Limits& lim) {
  const auto n = static_cast<Eigen::Index>(items.size());
  Batch b;
  b.obs.resize(n, kObservationFeatures);
  b.next_obs.resize(n, kObservationFeatures);
  b.action.resize(n, 2);
  b.base.resize(n, 2);
  b.next_base.resize(n, 2);
  b.reward.resize(n, 1);
  b.not_done.resize(n, 1);
  b.f.resize(items.size());
  const double vs = 1.0 / lim.v_max();
  const double ws = 1.0 / Limits::w_max();
  std::vector<const PackedMessages*> cur;
  std::vector<const PackedMessages*> nxt;
  for (Eigen::Index r = 0; r < n; ++r) {
    const Transition& t = items[static_cast<std::size_t>(r)];
    for (int k = 0; k < kObservationFeatures; ++k) {
      b.obs(r, k) = t.obs[static_cast<std::size_t>(k)];
      b.next_obs(r, k) = t.next_obs[static_cast<std::size_t>(k)];
    }
    b.action(r, 0) = static_cast<float>(t.action.v * vs);
    b.action(r, 1) = static_cast<float>(t.action.w * ws);
    b.base(r, 0) = static_cast<float>(t.base.v * vs);
    b.base(r, 1) = static_cast<float>(t.base.w * ws);
    b.next_base(r, 0) = static_cast<float>(t.next_base.v * vs);
    b.next_base(r, 1) = static_cast<float>(t.next_base.w * ws);
    b.reward(r, 0) = static_cast<float>(t.reward);
    b.not_done(r, 0) = t.done ? 0.0f : 1.0f;
    b.f[static_cast<std::size_t>(r)] = t.f;
    cur.push_back(&t.msgs);
    nxt.push_back(&t.next_msgs);
  }
  if (dims.current > 0) {
    b.msgs = unpack(cur, dims);
    b.next_msgs = unpack(nxt, dims);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Optimizers

Adam::Adam(std::vector<Parameter<float>*> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  for (const auto* p : params_) {
    m_.push_back(Tensor::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Tensor::Zero(p->value.rows(), p->value.cols()));
  }
}

void Adam::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

void Adam::step() {
  ++t_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const auto c1 = static_cast<float>(1.0 / (1.0 - std::pow(b1, static_cast<double>(t_))));
  const auto c2 = static_cast<float>(1.0 / (1.0 - std::pow(b2, static_cast<double>(t_))));
  const auto lr = static_cast<float>(config_.lr);
  const auto eps = static_cast<float>(config_.eps);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Parameter<float>& p = *params_[k];
    if (p.grad.size() != p.value.size()) continue;
    auto m = m_[k].array();
    auto v = v_[k].array();
    const auto g = p.grad.array();
    m = static_cast<float>(b1) * m + static_cast<float>(1.0 - b1) * g;
    v = static_cast<float>(b2) * v + static_cast<float>(1.0 - b2) * g.square();
    p.value.array() -= lr * (m * c1) / ((v * c2).sqrt() + eps);
  }
}

std::vector<NamedTensor> Adam::state(const std::string& prefix) const {
  std::vector<NamedTensor> out;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    out.push_back({prefix + ".m." + params_[k]->name, m_[k]});
    out.push_back({prefix + ".v." + params_[k]->name, v_[k]});
  }
  return out;
}

void Adam::load_state(const std::string& prefix, std::span<const NamedTensor> tensors) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t.value;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    for (auto [moments, tag] : {std::pair{&m_, ".m."}, std::pair{&v_, ".v."}}) {
      const auto it = by_name.find(prefix + tag + params_[k]->name);
      if (it == by_name.end()) throw std::runtime_error("checkpoint: missing optimizer state");
      (*moments)[k] = *it->second;
    }
  }
}

double ScalarAdam::step(double value, double grad) {
  ++t;
  m = config.beta1 * m + (1.0 - config.beta1) * grad;
  v = config.beta2 * v + (1.0 - config.beta2) * grad * grad;
  const double mh = m / (1.0 - std::pow(config.beta1, static_cast<double>(t)));
  const double vh = v / (1.0 - std::pow(config.beta2, static_cast<double>(t)));
  return value - config.lr * mh / (std::sqrt(vh) + config.eps);
}

// ---------------------------------------------------------------------------
// SAC

void SacConfig::validate() const {
  if (!(discount > 0.0 && discount <= 1.0)) throw std::invalid_argument("sac.discount must be in (0, 1]");
  if (!(initial_temperature > 0.0)) throw std::invalid_argument("sac.initial_temperature must be positive");
  if (!(tau > 0.0 && tau <= 1.0)) throw std::invalid_argument("sac.tau must be in (0, 1]");
  if (target_interval < 1) throw std::invalid_argument("sac.target_interval must be positive");
  if (!(lr > 0.0)) throw std::invalid_argument("sac.lr must be positive");
  if (batch < 1) throw std::invalid_argument("sac.batch must be positive");
  if (critic_warmup < 0) throw std::invalid_argument("sac.critic_warmup must be non-negative");
  if (grad_clip < 0.0) throw std::invalid_argument("sac.grad_clip must be non-negative");
}

SacState::SacState(Network<float>& a, std::array<Network<float>, 2>& c, const SacConfig& config)
    : actor(&a),
      critics{&c[0], &c[1]},
      targets{c[0], c[1]},
      log_temperature(std::log(config.initial_temperature)) {
  const AdamConfig opt{config.lr};
  actor_opt = Adam(a.parameters(), opt);
  auto cp = c[0].parameters();
  const auto cp1 = c[1].parameters();
  cp.insert(cp.end(), cp1.begin(), cp1.end());
  critic_opt = Adam(cp, opt);
  temperature_opt.config = opt;
}

double SacState::temperature() const { return std::exp(log_temperature); }

void polyak_update(Network<float>& target, const Network<float>& online, double tau) {
  auto tp = target.parameters();
  const auto op = online.parameters();
  if (tp.size() != op.size()) throw ShapeError("polyak: networks differ");
  const auto a = static_cast<float>(tau);
  for (std::size_t k = 0; k < tp.size(); ++k) {
    tp[k]->value = (1.0f - a) * tp[k]->value + a * op[k]->value;
  }
}

namespace {

Tensor values_of(const Network<float>& net, const Tensor& x, const MessageBatch<float>* msgs) {
  ad::Tape<float> tape;
  const Binder<float> bind{tape, false};
  return tape.value(net.forward(bind, tape.constant(x), msgs));
}

Tensor hcat(const Tensor& a, const Tensor& b) {
  Tensor out(a.rows(), a.cols() + b.cols());
  out << a, b;
  return out;
}

const MessageBatch<float>* ptr(const std::optional<MessageBatch<float>>& m) {
  return m ? &*m : nullptr;
}

void clip_gradients(const std::vector<Parameter<float>*>& params, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (const auto* p : params) {
    if (p->grad.size() == p->value.size()) sq += static_cast<double>(p->grad.squaredNorm());
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const auto s = static_cast<float>(max_norm / norm);
    for (auto* p : params) {
      if (p->grad.size() == p->value.size()) p->grad *= s;
    }
  }
}

void require_finite(double value, const char* what, long iteration) {
  if (!std::isfinite(value)) {
    throw TrainingDiverged(std::string(what) + " is not finite at iteration " +
                           std::to_string(iteration));
  }
}

void require_finite(const std::vector<Parameter<float>*>& params, long iteration) {
  for (const auto* p : params) {
    if (!p->value.allFinite()) {
      throw TrainingDiverged("parameter " + p->name + " became non-finite at iteration " +
                             std::to_string(iteration));
    }
  }
}

std::vector<Parameter<float>*> critic_params(SacState& s) {
  auto ps = s.critics[0]->parameters();
  const auto p1 = s.critics[1]->parameters();
  ps.insert(ps.end(), p1.begin(), p1.end());
  return ps;
}

double critic_step(SacState& s, const Var q0, const Var q1, ad::Tape<float>& tape,
                   const Tensor& target, const SacConfig& config) {
  const Var y = tape.constant(target);
  const Var l0 = tape.mean(tape.square(tape.sub(q0, y)));
  const Var l1 = tape.mean(tape.square(tape.sub(q1, y)));
  const Var loss = tape.add(l0, l1);
  const double value = 0.5 * static_cast<double>(tape.value(loss)(0, 0));
  require_finite(value, "critic loss", s.iterations);
  s.critic_opt.zero_grad();
  tape.backward(loss);
  clip_gradients(s.critics[0]->parameters(), config.grad_clip);
  clip_gradients(s.critics[1]->parameters(), config.grad_clip);
  s.critic_opt.step();
  require_finite(critic_params(s), s.iterations);
  return value;
}

void finish_update(SacState& s, const SacConfig& config) {
  if (s.iterations % config.target_interval == 0) {
    polyak_update(s.targets[0], *s.critics[0], config.tau);
    polyak_update(s.targets[1], *s.critics[1], config.tau);
  }
}

constexpr double kHalfLog2Pi = 0.91893853320467274178;

}  // namespace

SacLosses sac_update_continuous(SacState& s, const Batch& b, const SacConfig& config,
                                double residual_fraction, Rng& rng) {
  const Eigen::Index n = b.size();
  const double alpha = s.temperature();
  const double gamma = config.discount;
  SacLosses out;
  out.temperature = alpha;

  // Squashed residual in scaled units: base + fraction * tanh(u), clamped.
  // Log-densities are those of tanh(u) on [-1, 1]^2, independent of the
  // residual bound.
  auto squash = [&](const Tensor& head, const Tensor& base, Tensor& action, Tensor& log_prob) {
    action.resize(n, 2);
    log_prob.resize(n, 1);
    for (Eigen::Index r = 0; r < n; ++r) {
      double lp = 0.0;
      for (int d = 0; d < 2; ++d) {
        const double ls = std::clamp(static_cast<double>(head(r, d + 2)), kLogStdMin, kLogStdMax);
        const double z = rng.normal();
        const double u = head(r, d) + std::exp(ls) * z;
        const double th = std::tanh(u);
        const double a = base(r, d) + residual_fraction * th;
        action(r, d) = static_cast<float>(d == 0 ? std::clamp(a, 0.0, 1.0) : std::clamp(a, -1.0, 1.0));
        lp += -0.5 * z * z - kHalfLog2Pi - ls -
              2.0 * (std::numbers::ln2 - u - std::log1p(std::exp(-2.0 * u)));
      }
      log_prob(r, 0) = static_cast<float>(lp);
    }
  };

  // Bellman target from the target critics.
  Tensor target(n, 1);
  {
    const Tensor head = values_of(*s.actor, b.next_obs, ptr(b.next_msgs));
    Tensor next_action;
    Tensor next_lp;
    squash(head, b.next_base, next_action, next_lp);
    const Tensor in = hcat(b.next_obs, next_action);
    const Tensor q0 = values_of(s.targets[0], in, ptr(b.next_msgs));
    const Tensor q1 = values_of(s.targets[1], in, ptr(b.next_msgs));
    for (Eigen::Index r = 0; r < n; ++r) {
      const double v = std::min(q0(r, 0), q1(r, 0)) - alpha * next_lp(r, 0);
      target(r, 0) = static_cast<float>(b.reward(r, 0) + gamma * b.not_done(r, 0) * v);
    }
  }

  {
    ad::Tape<float> tape;
    const Binder<float> bind{tape, true};
    const Var in = tape.constant(hcat(b.obs, b.action));
    const Var q0 = s.critics[0]->forward(bind, in, ptr(b.msgs));
    const Var q1 = s.critics[1]->forward(bind, in, ptr(b.msgs));
    out.critic_loss = critic_step(s, q0, q1, tape, target, config);
  }

  ++s.iterations;
  if (s.iterations > config.critic_warmup) {
    ad::Tape<float> tape;
    const Binder<float> train{tape, true};
    const Binder<float> fixed{tape, false};
    const Var obs = tape.constant(b.obs);
    const Var head = s.actor->forward(train, obs, ptr(b.msgs));
    const Var mean = tape.slice_cols(head, 0, 2);
    const Var log_std = tape.clamp(tape.slice_cols(head, 2, 2), static_cast<float>(kLogStdMin),
                                   static_cast<float>(kLogStdMax));
    Tensor z(n, 2);
    Tensor lp_const(n, 1);
    for (Eigen::Index r = 0; r < n; ++r) {
      double c = 0.0;
      for (int d = 0; d < 2; ++d) {
        const double zd = rng.normal();
        z(r, d) = static_cast<float>(zd);
        c += -0.5 * zd * zd - kHalfLog2Pi - 2.0 * std::numbers::ln2;
      }
      lp_const(r, 0) = static_cast<float>(c);
    }
    const Var u = tape.add(mean, tape.mul(tape.exp(log_std), tape.constant(z)));
    const Var pre = tape.add(tape.constant(b.base),
                             tape.scale(tape.tanh(u), static_cast<float>(residual_fraction)));
    const Var action = tape.concat_cols({tape.clamp(tape.slice_cols(pre, 0, 1), 0.0f, 1.0f),
                                         tape.clamp(tape.slice_cols(pre, 1, 1), -1.0f, 1.0f)});
    // log pi = c - sum(log_std) + 2 sum(u) + 2 sum(softplus(-2u))
    Var log_prob = tape.sub(tape.constant(lp_const), tape.sum_cols(log_std));
    log_prob = tape.add(log_prob, tape.scale(tape.sum_cols(u), 2.0f));
    log_prob = tape.add(log_prob, tape.scale(tape.sum_cols(tape.softplus(tape.scale(u, -2.0f))), 2.0f));

    const Var in = tape.concat_cols({obs, action});
    const Var q = tape.minimum(s.critics[0]->forward(fixed, in, ptr(b.msgs)),
                               s.critics[1]->forward(fixed, in, ptr(b.msgs)));
    const Var loss = tape.mean(tape.sub(tape.scale(log_prob, static_cast<float>(alpha)), q));
    out.actor_loss = tape.value(loss)(0, 0);
    require_finite(out.actor_loss, "actor loss", s.iterations);
    const double mean_lp = tape.value(log_prob).mean();
    out.entropy = -mean_lp;

    s.actor_opt.zero_grad();
    tape.backward(loss);
    clip_gradients(s.actor->parameters(), config.grad_clip);
    s.actor_opt.step();
    require_finite(s.actor->parameters(), s.iterations);

    const double grad = -(mean_lp + config.target_entropy_continuous);
    s.log_temperature = s.temperature_opt.step(s.log_temperature, grad);
    out.actor_updated = true;
  }
  finish_update(s, config);
  return out;
}

SacLosses sac_update_discrete(SacState& s, const Batch& b, const SacConfig& config) {
  const Eigen::Index n = b.size();
  const double alpha = s.temperature();
  SacLosses out;
  out.temperature = alpha;

  Tensor target(n, 1);
  {
    const Tensor logits = values_of(*s.actor, b.next_obs, ptr(b.next_msgs));
    const Tensor q0 = values_of(s.targets[0], b.next_obs, ptr(b.next_msgs));
    const Tensor q1 = values_of(s.targets[1], b.next_obs, ptr(b.next_msgs));
    for (Eigen::Index r = 0; r < n; ++r) {
      const double m = std::max(logits(r, 0), logits(r, 1));
      const double e0 = std::exp(logits(r, 0) - m);
      const double e1 = std::exp(logits(r, 1) - m);
      const double lse = m + std::log(e0 + e1);
      double v = 0.0;
      for (int a = 0; a < 2; ++a) {
        const double lp = logits(r, a) - lse;
        v += std::exp(lp) * (std::min(q0(r, a), q1(r, a)) - alpha * lp);
      }
      target(r, 0) = static_cast<float>(b.reward(r, 0) + config.discount * b.not_done(r, 0) * v);
    }
  }

  {
    ad::Tape<float> tape;
    const Binder<float> bind{tape, true};
    const Var obs = tape.constant(b.obs);
    const Var q0 = tape.pick(s.critics[0]->forward(bind, obs, ptr(b.msgs)), b.f);
    const Var q1 = tape.pick(s.critics[1]->forward(bind, obs, ptr(b.msgs)), b.f);
    out.critic_loss = critic_step(s, q0, q1, tape, target, config);
  }

  ++s.iterations;
  if (s.iterations > config.critic_warmup) {
    const Tensor q0 = values_of(*s.critics[0], b.obs, ptr(b.msgs));
    const Tensor q1 = values_of(*s.critics[1], b.obs, ptr(b.msgs));
    const Tensor q = q0.cwiseMin(q1);

    ad::Tape<float> tape;
    const Binder<float> train{tape, true};
    const Var logits = s.actor->forward(train, tape.constant(b.obs), ptr(b.msgs));
    const Var p = tape.softmax_rows(logits);
    const Var lp = tape.log_softmax_rows(logits);
    const Var inner = tape.mul(p, tape.sub(tape.scale(lp, static_cast<float>(alpha)), tape.constant(q)));
    const Var loss = tape.mean(tape.sum_cols(inner));
    out.actor_loss = tape.value(loss)(0, 0);
    require_finite(out.actor_loss, "actor loss", s.iterations);
    const Tensor& pv = tape.value(p);
    const Tensor& lpv = tape.value(lp);
    out.entropy = -(pv.cwiseProduct(lpv)).rowwise().sum().mean();

    s.actor_opt.zero_grad();
    tape.backward(loss);
    clip_gradients(s.actor->parameters(), config.grad_clip);
    s.actor_opt.step();
    require_finite(s.actor->parameters(), s.iterations);

    const double grad = out.entropy - config.target_entropy_discrete;
    s.log_temperature = s.temperature_opt.step(s.log_temperature, grad);
    out.actor_updated = true;
  }
  finish_update(s, config);
  return out;
}

// ---------------------------------------------------------------------------
// Pipeline

void PipelineConfig::validate() const {
  if (n_agents < 1 || n_agents > 32) throw std::invalid_argument("env.agents must be in [1, 32]");
  if (n_obstacles < 0) throw std::invalid_argument("env.obstacles must be non-negative");
  if (!(map_size > 0.0)) throw std::invalid_argument("env.map_size must be positive");
  if (workers < 1) throw std::invalid_argument("learn.workers must be positive");
  if (t_max < 1) throw std::invalid_argument("env.t_max must be positive");
  if (solitary_iterations < 0 || nav_iterations < 0 || joint_iterations < 0) {
    throw std::invalid_argument("phase iterations must be non-negative");
  }
  if (!(updates_per_transition > 0.0)) {
    throw std::invalid_argument("learn.updates_per_transition must be positive");
  }
  if (buffer_capacity == 0) throw std::invalid_argument("learn.buffer_capacity must be positive");
  if (buffer_capacity < static_cast<std::size_t>(sac.batch)) {
    throw std::invalid_argument("learn.buffer_capacity must hold at least one batch");
  }
  if (checkpoint_interval < 1 || log_interval < 1 || sr_window < 1) {
    throw std::invalid_argument("learn intervals must be positive");
  }
  if (!(residual_fraction > 0.0 && residual_fraction <= 1.0)) {
    throw std::invalid_argument("nets.residual_fraction must be in (0, 1]");
  }
  if (!(fairness_reward_clip > 0.0)) {
    throw std::invalid_argument("learn.fairness_reward_clip must be positive");
  }
  if (fairness.alpha < 0.0 || fairness.beta < 0.0) {
    throw std::invalid_argument("ncf2.alpha and ncf2.beta must be non-negative");
  }
  sac.validate();
  dwa.validate();
}

void SnapshotSlot::publish(std::shared_ptr<const PolicyBundle> snapshot) {
  std::lock_guard lock(mutex_);
  current_ = std::move(snapshot);
}

std::shared_ptr<const PolicyBundle> SnapshotSlot::load() const {
  std::lock_guard lock(mutex_);
  return current_;
}

std::vector<Transition> episode_transitions(int phase, const ProtocolStep& step,
                                            const StepResult& result, const ProtocolStep* next,
                                            const PolicyBundle& bundle, const Limits& lim,
                                            double fairness_reward_clip) {
  const double scale = message_scale(lim);
  const MessageLayout& layout = bundle.config.layout;
  std::vector<Transition> out;
  for (std::size_t i = 0; i < step.agents.size(); ++i) {
    const AgentStep& a = step.agents[i];
    if (!a.active) continue;
    const bool done = result.done[i];
    const AgentStep* n = (!done && next != nullptr) ? &next->agents[i] : nullptr;
    if (!done && n == nullptr) {
      throw std::logic_error("transition: missing next step for an active agent");
    }

    Transition t;
    t.obs = observation_features(a.obs, lim.map_size);
    t.base = a.obs.dwa_suggestion;
    t.action = a.action;
    t.f = a.f;
    t.reward = result.rewards[i];
    t.done = done;
    t.next_obs = n ? observation_features(n->obs, lim.map_size) : t.obs;
    t.next_base = n ? n->obs.dwa_suggestion : t.base;

    if (phase == 0) {
      t.stream = Stream::solitary;
      out.push_back(std::move(t));
      continue;
    }
    if (phase == 1 || a.f == 1) {
      Transition nav = t;
      nav.stream = Stream::nav;
      nav.msgs = pack_messages(a.state_msgs, scale);
      nav.next_msgs = pack_messages(n ? n->state_msgs : a.state_msgs, scale);
      out.push_back(std::move(nav));
    }
    if (phase == 2) {
      Transition cf2 = std::move(t);
      cf2.stream = Stream::cf2;
      cf2.reward = std::clamp(a.r_tilde, -fairness_reward_clip, fairness_reward_clip);
      cf2.msgs = pack_messages(a.patience_msgs, layout, scale);
      cf2.next_msgs = pack_messages(n ? n->patience_msgs : a.patience_msgs, layout, scale);
      out.push_back(std::move(cf2));
    }
  }
  return out;
}

Scenario training_scenario(const PipelineConfig& config, int phase, std::uint64_t episode) {
  const int n = phase == 0 ? 1 : config.n_agents;
  for (std::uint64_t attempt = 0;; ++attempt) {
    const std::uint64_t seed = hash_key({config.seed, 0x7472616eULL, episode, attempt});
    try {
      return generate_scenario(config.family, n, config.n_obstacles, seed, config.map_size);
    } catch (const GenerationFailed&) {
      if (attempt >= 16) throw;
    }
  }
}

ProtocolConfig training_protocol(const PipelineConfig& config, int phase) {
  ProtocolConfig p;
  p.controller = phase == 0 ? Controller::solitary
                            : (phase == 1 ? Controller::nav_only : Controller::ncf2);
  p.constants = config.fairness;
  p.ablations = config.ablations;
  p.deterministic = false;
  return p;
}

namespace {

constexpr std::array<const char*, 3> kPhaseNames{"solitary", "navigation warm-up", "joint"};

struct EpisodeOutcome {
  std::vector<Transition> transitions;
  bool success{false};
};

EpisodeOutcome collect_episode(const PipelineConfig& config, const PolicyBundle& bundle, int phase,
                               std::uint64_t episode) {
  const Limits lim{config.map_size};
  const Scenario scenario = training_scenario(config, phase, episode);
  const PolicyRunner runner(bundle, lim, config.residual_fraction);
  EpisodeOptions options;
  options.protocol = training_protocol(config, phase);
  options.dwa = config.dwa;
  options.rewards = config.rewards;
  options.t_max = config.t_max;
  options.key = {config.seed, episode};
  options.record_trace = false;
  EpisodeOutcome out;
  const auto result = run_episode(
      runner, scenario, options,
      [&](const ProtocolStep& step, const StepResult& res, const ProtocolStep* next) {
        auto ts = episode_transitions(phase, step, res, next, bundle, lim,
                                      config.fairness_reward_clip);
        std::move(ts.begin(), ts.end(), std::back_inserter(out.transitions));
      });
  out.success = result.success;
  return out;
}

std::vector<Stream> phase_streams(int phase) {
  switch (phase) {
    case 0: return {Stream::solitary};
    case 1: return {Stream::nav};
    default: return {Stream::nav, Stream::cf2};
  }
}

long phase_length(const PipelineConfig& c, int phase) {
  return phase == 0 ? c.solitary_iterations : (phase == 1 ? c.nav_iterations : c.joint_iterations);
}

class Learner {
 public:
  Learner(const PipelineConfig& config, PolicyBundle bundle)
      : config_(config),
        bundle_(std::make_unique<PolicyBundle>(std::move(bundle))),
        lim_{config.map_size},
        replay_(config.buffer_capacity) {
    sac_[0] = SacState(bundle_->solitary_actor, bundle_->solitary_critics, config.sac);
    sac_[1] = SacState(bundle_->nav_actor, bundle_->nav_critics, config.sac);
    sac_[2] = SacState(bundle_->cf2_actor, bundle_->cf2_critics, config.sac);
  }

  PolicyBundle& bundle() { return *bundle_; }
  ReplayBuffer& replay() { return replay_; }
  PipelineProgress& progress() { return progress_; }

  std::shared_ptr<const PolicyBundle> snapshot() const {
    return std::make_shared<const PolicyBundle>(*bundle_);
  }

  bool ready(int phase) const {
    for (Stream s : phase_streams(phase)) {
      if (replay_.size(s) >= static_cast<std::size_t>(config_.sac.batch)) return true;
    }
    return false;
  }

  /// One learner iteration over every stream of the phase with enough data.
  std::vector<std::pair<Stream, SacLosses>> update(int phase, long global_iteration) {
    std::vector<std::pair<Stream, SacLosses>> losses;
    for (Stream s : phase_streams(phase)) {
      if (replay_.size(s) < static_cast<std::size_t>(config_.sac.batch)) continue;
      Rng rng{config_.seed, 0x6c6561726eULL, static_cast<std::uint64_t>(global_iteration),
              static_cast<std::uint64_t>(s)};
      const auto items = replay_.sample(s, config_.sac.batch, rng);
      const Batch batch = make_batch(items, stream_message_dims(s, bundle_->config.layout), lim_);
      SacState& st = sac_[static_cast<std::size_t>(s)];
      if (s == Stream::cf2) {
        losses.emplace_back(s, sac_update_discrete(st, batch, config_.sac));
      } else {
        losses.emplace_back(s, sac_update_continuous(st, batch, config_.sac,
                                                     config_.residual_fraction, rng));
      }
    }
    return losses;
  }

  void save(const std::string& path) const {
    std::vector<NamedTensor> tensors = bundle_tensors(*bundle_);
    for (int k = 0; k < kStreamCount; ++k) {
      const SacState& s = sac_[static_cast<std::size_t>(k)];
      const std::string prefix = "learner." + std::string(to_string(static_cast<Stream>(k)));
      for (int c = 0; c < 2; ++c) {
        for (const auto* p : s.targets[static_cast<std::size_t>(c)].parameters()) {
          tensors.push_back({prefix + ".target" + std::to_string(c) + "." + p->name, p->value});
        }
      }
      for (auto& t : s.actor_opt.state(prefix + ".actor_opt")) tensors.push_back(std::move(t));
      for (auto& t : s.critic_opt.state(prefix + ".critic_opt")) tensors.push_back(std::move(t));
    }
    const std::string tmp = path + ".tmp";
    {
      std::ofstream os(tmp, std::ios::binary);
      if (!os) throw std::runtime_error("cannot write " + tmp);
      write_checkpoint(os, tensors);
    }
    std::filesystem::rename(tmp, path);

    std::ostringstream meta;
    meta << "phase " << progress_.phase << '\n'
         << "iteration " << progress_.iteration << '\n'
         << "episodes_done " << progress_.episodes_done << '\n'
         << "next_episode " << progress_.next_episode << '\n';
    for (int k = 0; k < kStreamCount; ++k) {
      const SacState& s = sac_[static_cast<std::size_t>(k)];
      const std::string name(to_string(static_cast<Stream>(k)));
      meta << name << ".iterations " << s.iterations << '\n'
           << name << ".log_temperature " << text::format_double(s.log_temperature) << '\n'
           << name << ".temperature_adam " << text::format_double(s.temperature_opt.m) << ' '
           << text::format_double(s.temperature_opt.v) << ' ' << s.temperature_opt.t << '\n'
           << name << ".adam_steps " << s.actor_opt.steps() << ' ' << s.critic_opt.steps() << '\n';
    }
    const std::string meta_tmp = path + ".progress.tmp";
    {
      std::ofstream os(meta_tmp);
      if (!os) throw std::runtime_error("cannot write " + meta_tmp);
      os << meta.str();
    }
    std::filesystem::rename(meta_tmp, path + ".progress");
  }

  void load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read checkpoint " + path);
    const auto tensors = read_checkpoint(is);
    load_bundle_tensors(*bundle_, tensors);
    std::map<std::string, const Tensor*> by_name;
    for (const auto& t : tensors) by_name[t.name] = &t.value;

    std::ifstream ms(path + ".progress");
    if (!ms) throw std::runtime_error("cannot read " + path + ".progress");
    std::map<std::string, std::vector<std::string>> meta;
    for (std::string line; std::getline(ms, line);) {
      const auto parts = text::split(line);
      if (parts.empty()) continue;
      auto& v = meta[std::string(parts[0])];
      for (std::size_t k = 1; k < parts.size(); ++k) v.emplace_back(parts[k]);
    }
    auto field = [&](const std::string& key, std::size_t idx = 0) -> const std::string& {
      const auto it = meta.find(key);
      if (it == meta.end() || it->second.size() <= idx) {
        throw std::runtime_error("checkpoint progress: missing " + key);
      }
      return it->second[idx];
    };
    progress_.phase = text::parse_int<int>(field("phase"));
    progress_.iteration = text::parse_int<long>(field("iteration"));
    progress_.episodes_done = text::parse_int<long>(field("episodes_done"));
    progress_.next_episode = text::parse_int<std::uint64_t>(field("next_episode"));

    for (int k = 0; k < kStreamCount; ++k) {
      SacState& s = sac_[static_cast<std::size_t>(k)];
      const std::string name(to_string(static_cast<Stream>(k)));
      const std::string prefix = "learner." + name;
      for (int c = 0; c < 2; ++c) {
        for (auto* p : s.targets[static_cast<std::size_t>(c)].parameters()) {
          const auto it = by_name.find(prefix + ".target" + std::to_string(c) + "." + p->name);
          if (it == by_name.end()) throw std::runtime_error("checkpoint: missing target network");
          p->value = *it->second;
        }
      }
      s.actor_opt.load_state(prefix + ".actor_opt", tensors);
      s.critic_opt.load_state(prefix + ".critic_opt", tensors);
      s.iterations = text::parse_int<long>(field(name + ".iterations"));
      s.log_temperature = text::parse_double(field(name + ".log_temperature"));
      s.temperature_opt.m = text::parse_double(field(name + ".temperature_adam", 0));
      s.temperature_opt.v = text::parse_double(field(name + ".temperature_adam", 1));
      s.temperature_opt.t = text::parse_int<long>(field(name + ".temperature_adam", 2));
      s.actor_opt.set_steps(text::parse_int<long>(field(name + ".adam_steps", 0)));
      s.critic_opt.set_steps(text::parse_int<long>(field(name + ".adam_steps", 1)));
    }
  }

 private:
  const PipelineConfig& config_;
  std::unique_ptr<PolicyBundle> bundle_;
  Limits lim_;
  ReplayBuffer replay_;
  std::array<SacState, kStreamCount> sac_;
  PipelineProgress progress_;
};

}  // namespace

PipelineResult run_pipeline(const PipelineConfig& config, const std::optional<std::string>& resume,
                            std::ostream* progress_out) {
  config.validate();
  Learner learner(config, PolicyBundle(config.nets, config.seed));
  if (resume) learner.load(*resume);
  PipelineProgress& prog = learner.progress();

  PipelineResult result;
  std::ofstream log_file;
  auto log_line = [&](const std::string& line) {
    result.log_lines.push_back(line);
    if (log_file) log_file << line << '\n';
  };
  if (!config.log_path.empty()) {
    log_file.open(config.log_path, resume ? std::ios::app : std::ios::trunc);
    if (!log_file) throw std::runtime_error("cannot write " + config.log_path);
  }
  if (!resume) {
    log_line("# fairnav training log");
    log_line("# iteration counts learner gradient steps across phases 0 (solitary), 1 "
             "(navigation warm-up), 2 (joint)");
    log_line("# iteration, stream, critic_loss, actor_loss, temperature, episodes_done, sr_window");
  }

  long phase_offset = 0;
  for (int p = 0; p < prog.phase; ++p) phase_offset += phase_length(config, p);

  std::deque<bool> window;
  auto record_episode = [&](bool success) {
    ++prog.episodes_done;
    window.push_back(success);
    if (static_cast<int>(window.size()) > config.sr_window) window.pop_front();
  };
  auto window_rate = [&] {
    if (window.empty()) return 0.0;
    const auto hits = std::count(window.begin(), window.end(), true);
    return static_cast<double>(hits) / static_cast<double>(window.size());
  };

  auto after_update = [&](const std::vector<std::pair<Stream, SacLosses>>& losses) {
    ++prog.iteration;
    const long global = phase_offset + prog.iteration;
    if (global % config.log_interval == 0 || prog.iteration == 1) {
      for (const auto& [stream, l] : losses) {
        log_line(std::to_string(global) + ", " + std::string(to_string(stream)) + ", " +
                 text::format_double(l.critic_loss) + ", " + text::format_double(l.actor_loss) +
                 ", " + text::format_double(l.temperature) + ", " +
                 std::to_string(prog.episodes_done) + ", " + text::format_double(window_rate()));
      }
      if (log_file) log_file.flush();
    }
    if (!config.checkpoint_path.empty() && global % config.checkpoint_interval == 0) {
      learner.save(config.checkpoint_path);
    }
  };

  for (; prog.phase <= 2; ++prog.phase) {
    const int phase = prog.phase;
    const long length = phase_length(config, phase);
    window.clear();
    if (progress_out) {
      *progress_out << "phase " << phase << " (" << kPhaseNames[static_cast<std::size_t>(phase)]
                    << "): " << length << " iterations\n";
    }

    if (config.workers == 1) {
      double pending = 0.0;
      while (prog.iteration < length) {
        const auto snapshot = learner.snapshot();
        const EpisodeOutcome ep = collect_episode(config, *snapshot, phase, prog.next_episode++);
        record_episode(ep.success);
        for (const auto& t : ep.transitions) learner.replay().push(t);
        if (!learner.ready(phase)) continue;
        pending += config.updates_per_transition * static_cast<double>(ep.transitions.size());
        while (pending >= 1.0 && prog.iteration < length) {
          after_update(learner.update(phase, phase_offset + prog.iteration + 1));
          pending -= 1.0;
        }
      }
    } else {
      SnapshotSlot slot;
      slot.publish(learner.snapshot());
      std::atomic<bool> stop{false};
      std::atomic<long> produced{0};
      std::atomic<int> restarts{0};
      std::atomic<std::uint64_t> next_episode{prog.next_episode};
      std::mutex stats_mutex;
      std::vector<bool> outcomes;
      std::string fatal;

      auto worker = [&] {
        while (!stop.load()) {
          try {
            const auto snapshot = slot.load();
            const EpisodeOutcome ep = collect_episode(config, *snapshot, phase, next_episode++);
            for (const auto& t : ep.transitions) learner.replay().push(t);
            produced += static_cast<long>(ep.transitions.size());
            std::lock_guard lock(stats_mutex);
            outcomes.push_back(ep.success);
          } catch (const std::exception& e) {
            const int n = ++restarts;
            std::lock_guard lock(stats_mutex);
            if (progress_out) *progress_out << "worker restarted after error: " << e.what() << '\n';
            if (n > config.max_worker_restarts) {
              fatal = e.what();
              stop = true;
            }
          }
        }
      };
      std::vector<std::thread> threads;
      for (int w = 0; w < config.workers; ++w) threads.emplace_back(worker);

      long consumed = 0;
      try {
        while (prog.iteration < length) {
          {
            std::lock_guard lock(stats_mutex);
            if (!fatal.empty()) break;
            for (bool s : outcomes) record_episode(s);
            outcomes.clear();
          }
          const double budget = config.updates_per_transition * static_cast<double>(produced.load());
          if (!learner.ready(phase) || static_cast<double>(consumed) >= budget) {
            std::this_thread::sleep_for(std::chrono::milliseconds(1));
            continue;
          }
          after_update(learner.update(phase, phase_offset + prog.iteration + 1));
          ++consumed;
          if (prog.iteration % 50 == 0) slot.publish(learner.snapshot());
        }
      } catch (...) {
        stop = true;
        for (auto& t : threads) t.join();
        throw;
      }
      stop = true;
      for (auto& t : threads) t.join();
      prog.next_episode = next_episode.load();
      if (!fatal.empty()) throw std::runtime_error("rollout workers kept failing: " + fatal);
    }

    if (progress_out) {
      *progress_out << "phase " << phase << " done after " << prog.episodes_done
                    << " episodes, recent success rate " << window_rate() << '\n';
    }
    phase_offset += length;
    prog.iteration = 0;
    if (!config.checkpoint_path.empty()) {
      // Record the next phase as the resume point.
      ++prog.phase;
      learner.save(config.checkpoint_path);
      --prog.phase;
    }
  }

  result.bundle = learner.bundle();
  result.progress = prog;
  return result;
}

}  // namespace fairnav
