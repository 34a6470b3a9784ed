#pragma once

#include <cmath>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fairnav/autodiff.hpp"
#include "fairnav/envcore.hpp"
#include "fairnav/geom2d.hpp"
#include "fairnav/rng.hpp"

namespace fairnav {

using ad::Parameter;
using ad::Segments;
using ad::ShapeError;
using ad::Var;
using Tensor = ad::Matrix<float>;

enum class Activation { none, relu, tanh, softmax };

/// Layer widths with one activation per layer.
struct MlpSpec {
  int input{0};
  std::vector<int> widths;
  std::vector<Activation> activations;

  int output() const { return widths.empty() ? input : widths.back(); }
};

/// Routes parameters into a tape: trainable leaves for the learner's private
/// copy, read-only references for published snapshots.
template <typename T>
struct Binder {
  ad::Tape<T>& tape;
  bool trainable{false};

  Var operator()(const Parameter<T>& p) const {
    // Only the learner binds trainably, and it owns a mutable copy.
    return tape.param(const_cast<Parameter<T>&>(p), trainable);
  }
};

template <typename T>
void uniform_init(ad::Matrix<T>& m, double bound, Rng& rng) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
  }
}

template <typename T>
struct Linear {
  Parameter<T> weight;
  Parameter<T> bias;

  Linear() = default;
  Linear(const std::string& name, int in, int out, Rng& rng)
      : weight(name + ".weight", ad::Matrix<T>(in, out)),
        bias(name + ".bias", ad::Matrix<T>(1, out)) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    uniform_init(weight.value, bound, rng);
    uniform_init(bias.value, bound, rng);
  }

  int in() const { return static_cast<int>(weight.value.rows()); }
  int out() const { return static_cast<int>(weight.value.cols()); }

  Var forward(const Binder<T>& bind, Var x) const {
    return bind.tape.affine(x, bind(weight), bind(bias));
  }

  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

template <typename T>
Var activate(ad::Tape<T>& tape, Var x, Activation a) {
  switch (a) {
    case Activation::relu: return tape.relu(x);
    case Activation::tanh: return tape.tanh(x);
    case Activation::softmax: return tape.softmax_rows(x);
    case Activation::none: break;
  }
  return x;
}

template <typename T>
struct Mlp {
  MlpSpec spec;
  std::vector<Linear<T>> layers;

  Mlp() = default;
  Mlp(const std::string& name, MlpSpec s, Rng& rng) : spec(std::move(s)) {
    if (spec.widths.size() != spec.activations.size()) {
      throw ShapeError("MlpSpec: one activation per layer");
    }
    int in = spec.input;
    for (std::size_t k = 0; k < spec.widths.size(); ++k) {
      layers.emplace_back(name + "." + std::to_string(k), in, spec.widths[k], rng);
      in = spec.widths[k];
    }
  }

  Var forward(const Binder<T>& bind, Var x) const {
    if (bind.tape.value(x).cols() != spec.input) {
      throw ShapeError("mlp: expected input width " + std::to_string(spec.input) + ", got " +
                       std::to_string(bind.tape.value(x).cols()));
    }
    for (std::size_t k = 0; k < layers.size(); ++k) {
      x = activate(bind.tape, layers[k].forward(bind, x), spec.activations[k]);
    }
    return x;
  }

  void collect(std::vector<Parameter<T>*>& out) {
    for (auto& l : layers) l.collect(out);
  }
};

/// Scaled dot-product attention over a variable-size message set. The single
/// query is the mean of the projected query rows, so the output is one
/// key_dim vector per sample regardless of the set size.
template <typename T>
struct AttentionBlock {
  Linear<T> query;
  Linear<T> key;
  Linear<T> value;

  AttentionBlock() = default;
  AttentionBlock(const std::string& name, int in, int key_dim, Rng& rng)
      : query(name + ".query", in, key_dim, rng),
        key(name + ".key", in, key_dim, rng),
        value(name + ".value", in, key_dim, rng) {}

  int key_dim() const { return query.out(); }

  Var forward(const Binder<T>& bind, Var rows, const Segments& seg) const {
    auto& t = bind.tape;
    const Var q = t.segment_mean(query.forward(bind, rows), seg);
    const Var k = key.forward(bind, rows);
    const Var v = value.forward(bind, rows);
    return t.segment_attention(q, k, v, seg, T(1) / std::sqrt(static_cast<T>(key_dim())));
  }

  void collect(std::vector<Parameter<T>*>& out) {
    query.collect(out);
    key.collect(out);
    value.collect(out);
  }
};

/// Packed message sets for a batch: rows of sample b are
/// [segments.begin(b), segments.begin(b) + segments.size(b)).
template <typename T>
struct MessageBatch {
  ad::Matrix<T> current;  // stream built from offsets at time t
  ad::Matrix<T> next;     // stream built from predicted next offsets
  Segments segments;
};

/// Two independent attention blocks, one per message stream, concatenated.
template <typename T>
struct MessageEncoder {
  AttentionBlock<T> current;
  AttentionBlock<T> next;

  MessageEncoder() = default;
  MessageEncoder(const std::string& name, int current_dim, int next_dim, int key_dim, Rng& rng)
      : current(name + ".current", current_dim, key_dim, rng),
        next(name + ".next", next_dim, key_dim, rng) {}

  int output() const { return current.key_dim() + next.key_dim(); }

  Var forward(const Binder<T>& bind, const MessageBatch<T>& msgs) const {
    auto& t = bind.tape;
    const Var c = current.forward(bind, t.constant(msgs.current), msgs.segments);
    const Var n = next.forward(bind, t.constant(msgs.next), msgs.segments);
    return t.concat_cols({c, n});
  }

  void collect(std::vector<Parameter<T>*>& out) {
    current.collect(out);
    next.collect(out);
  }
};

struct NetworkShape {
  int obs{kObservationFeatures};
  int extra{0};         // appended to the observation (critic action input)
  int msg_current{0};   // 0 disables the message encoder
  int msg_next{0};
  int hidden{256};
  int head{24};
  int key_dim{24};
  int out{1};
};

/// Observation trunk, optional message encoder, fusion layer, head, and a
/// linear output layer:
///   trunk  FC(hidden)-ReLU over [obs; extra]
///   fuse   FC(hidden)-ReLU over [trunk; encoded messages]
///   head   FC(hidden)-ReLU-FC(head)
///   out    FC(out)
template <typename T>
struct Network {
  NetworkShape shape;
  Mlp<T> trunk;
  std::optional<MessageEncoder<T>> encoder;
  Mlp<T> fuse;
  Mlp<T> head;
  Linear<T> out;

  Network() = default;
  Network(const std::string& name, const NetworkShape& s, Rng& rng) : shape(s) {
    trunk = Mlp<T>(name + ".trunk", {s.obs + s.extra, {s.hidden}, {Activation::relu}}, rng);
    int fused = s.hidden;
    if (s.msg_current > 0) {
      encoder.emplace(name + ".encoder", s.msg_current, s.msg_next, s.key_dim, rng);
      fused += encoder->output();
    }
    fuse = Mlp<T>(name + ".fuse", {fused, {s.hidden}, {Activation::relu}}, rng);
    head = Mlp<T>(name + ".head", {s.hidden, {s.hidden, s.head}, {Activation::relu, Activation::none}},
                  rng);
    out = Linear<T>(name + ".out", s.head, s.out, rng);
  }

  bool uses_messages() const { return encoder.has_value(); }

  /// `input` is B x (obs + extra); `msgs` must be given iff the network
  /// encodes messages.
  Var forward(const Binder<T>& bind, Var input, const MessageBatch<T>* msgs) const {
    auto& t = bind.tape;
    Var h = trunk.forward(bind, input);
    if (encoder) {
      if (msgs == nullptr) throw ShapeError("network: message batch required");
      if (msgs->segments.count() != t.value(input).rows()) {
        throw ShapeError("network: message segments do not match batch");
      }
      h = t.concat_cols({h, encoder->forward(bind, *msgs)});
    }
    return out.forward(bind, head.forward(bind, fuse.forward(bind, h)));
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> ps;
    trunk.collect(ps);
    if (encoder) encoder->collect(ps);
    fuse.collect(ps);
    head.collect(ps);
    out.collect(ps);
    return ps;
  }
  std::vector<const Parameter<T>*> parameters() const {
    auto ps = const_cast<Network*>(this)->parameters();
    return {ps.begin(), ps.end()};
  }
};

// ---------------------------------------------------------------------------
// Stochastic heads

/// Axis-aligned action box used by the tanh squashing map.
struct ActionBox {
  Action lo;
  Action hi;

  static ActionBox full(const Limits& lim) {
    return {{0.0, -Limits::w_max()}, {lim.v_max(), Limits::w_max()}};
  }
  /// Symmetric residual range around a base action.
  static ActionBox residual(const Limits& lim, double fraction) {
    return {{-fraction * lim.v_max(), -fraction * Limits::w_max()},
            {fraction * lim.v_max(), fraction * Limits::w_max()}};
  }
};

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;

struct ContinuousSample {
  Action action;
  double log_prob{0.0};  // density of `action` in action units; 0 when deterministic
};

/// Tanh-squashed Gaussian mapped into `box`. `head` holds (mean_v, mean_w,
/// log_std_v, log_std_w); log-stds are clamped to [kLogStdMin, kLogStdMax].
/// A null `rng` selects the deterministic squashed mean.
ContinuousSample sample_continuous(std::span<const float> head, Rng* rng, const ActionBox& box);

struct BinarySample {
  int f{1};
  double log_prob{0.0};
  double prob_move{0.5};
};

/// Categorical over two logits, index 1 meaning "move". A null `rng` picks the
/// argmax with ties going to f = 1.
BinarySample sample_binary(std::span<const float> logits, Rng* rng);

// ---------------------------------------------------------------------------
// Policy bundle

struct MessageLayout {
  /// Patience rows carry the relative patience in both streams
  /// when true; otherwise only in the current stream.
  bool duplicate_patience{true};

  int patience_current() const { return 3; }
  int patience_next() const { return duplicate_patience ? 3 : 2; }
  static constexpr int state_current() { return 2; }
  static constexpr int state_next() { return 2; }
};

struct BundleConfig {
  int hidden{256};
  int head{24};
  int key_dim{24};
  double init_log_std{-1.0};
  MessageLayout layout;
};

/// Every network of the cooperative policy and its solitary reference:
/// solitary actor + twin critics, residual navigation actor + twin critics,
/// binary CF2 actor + twin critics. Actors encode their own message sets.
struct PolicyBundle {
  BundleConfig config;
  Network<float> solitary_actor;
  std::array<Network<float>, 2> solitary_critics;
  Network<float> nav_actor;
  std::array<Network<float>, 2> nav_critics;
  Network<float> cf2_actor;
  std::array<Network<float>, 2> cf2_critics;

  PolicyBundle() = default;
  PolicyBundle(const BundleConfig& config, std::uint64_t seed);

  std::vector<Parameter<float>*> parameters();
  std::vector<const Parameter<float>*> parameters() const;
};

/// Zeroes the residual mean and CF2 logits so the policy starts as DWA with
/// ties resolved toward moving.
void zero_policy_outputs(Network<float>& actor, double init_log_std);

// ---------------------------------------------------------------------------
// Checkpoints

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Version byte, then a text header of "name rows cols" lines, then
/// little-endian float32 payloads in header order.
void write_checkpoint(std::ostream& os, std::span<const NamedTensor> tensors);
std::vector<NamedTensor> read_checkpoint(std::istream& is);

std::vector<NamedTensor> bundle_tensors(const PolicyBundle& bundle);
/// Overwrites matching parameters; throws when a name or shape is missing.
void load_bundle_tensors(PolicyBundle& bundle, std::span<const NamedTensor> tensors);

/// Recovers widths and message layout from tensor shapes.
BundleConfig infer_bundle_config(std::span<const NamedTensor> tensors);

void save_bundle(const std::string& path, const PolicyBundle& bundle);
PolicyBundle load_bundle(const std::string& path);

}  // namespace fairnav
