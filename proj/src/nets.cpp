#include "fairnav/nets.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include "fairnav/text.hpp"

namespace fairnav {

namespace {

constexpr std::uint8_t kCheckpointVersion = 1;
constexpr std::string_view kCheckpointMagic = "fairnav-checkpoint";

double gaussian_log_density(double z) {
  return -0.5 * z * z - 0.5 * std::log(2.0 * std::numbers::pi);
}

// log(1 - tanh(u)^2) without cancellation.
double log_one_minus_tanh_sq(double u) {
  const double a = std::abs(u);
  return 2.0 * (std::log(2.0) - a - std::log1p(std::exp(-2.0 * a)));
}

}  // namespace

ContinuousSample sample_continuous(std::span<const float> head, Rng* rng,
                                   const ActionBox& box) {
  if (head.size() != 4) throw ShapeError("sample_continuous: head must have 4 entries");
  const double lo[2] = {box.lo.v, box.lo.w};
  const double hi[2] = {box.hi.v, box.hi.w};
  double out[2];
  ContinuousSample s;
  for (int d = 0; d < 2; ++d) {
    const double mean = head[static_cast<std::size_t>(d)];
    const double log_std =
        std::clamp(static_cast<double>(head[static_cast<std::size_t>(d + 2)]), kLogStdMin, kLogStdMax);
    const double half = 0.5 * (hi[d] - lo[d]);
    double u = mean;
    if (rng != nullptr) {
      const double z = rng->normal();
      u = mean + std::exp(log_std) * z;
      s.log_prob += gaussian_log_density(z) - log_std - log_one_minus_tanh_sq(u) - std::log(half);
    }
    out[d] = lo[d] + half * (std::tanh(u) + 1.0);
  }
  s.action = {out[0], out[1]};
  return s;
}

BinarySample sample_binary(std::span<const float> logits, Rng* rng) {
  if (logits.size() != 2) throw ShapeError("sample_binary: expected 2 logits");
  const double l0 = logits[0];
  const double l1 = logits[1];
  const double m = std::max(l0, l1);
  const double e0 = std::exp(l0 - m);
  const double e1 = std::exp(l1 - m);
  const double p1 = e1 / (e0 + e1);
  BinarySample s;
  s.prob_move = p1;
  if (rng == nullptr) {
    s.f = l1 >= l0 ? 1 : 0;
  } else {
    s.f = rng->uniform() < p1 ? 1 : 0;
  }
  s.log_prob = std::log(s.f == 1 ? p1 : 1.0 - p1);
  return s;
}

void zero_policy_outputs(Network<float>& actor, double init_log_std) {
  auto& w = actor.out.weight.value;
  auto& b = actor.out.bias.value;
  w.setZero();
  b.setZero();
  if (b.cols() == 4) {
    b(0, 2) = static_cast<float>(init_log_std);
    b(0, 3) = static_cast<float>(init_log_std);
  }
}

PolicyBundle::PolicyBundle(const BundleConfig& cfg, std::uint64_t seed) : config(cfg) {
  auto shape = [&](int extra, int msg_c, int msg_n, int out) {
    NetworkShape s;
    s.extra = extra;
    s.msg_current = msg_c;
    s.msg_next = msg_n;
    s.hidden = cfg.hidden;
    s.head = cfg.head;
    s.key_dim = cfg.key_dim;
    s.out = out;
    return s;
  };
  const int pc = cfg.layout.patience_current();
  const int pn = cfg.layout.patience_next();
  const int sc = MessageLayout::state_current();
  const int sn = MessageLayout::state_next();

  std::uint64_t stream = 0;
  auto make = [&](const std::string& name, const NetworkShape& s) {
    Rng rng{seed, 0x4e455453ULL, ++stream};
    return Network<float>(name, s, rng);
  };
  solitary_actor = make("solitary.actor", shape(0, 0, 0, 4));
  solitary_critics[0] = make("solitary.critic0", shape(2, 0, 0, 1));
  solitary_critics[1] = make("solitary.critic1", shape(2, 0, 0, 1));
  nav_actor = make("nav.actor", shape(0, sc, sn, 4));
  nav_critics[0] = make("nav.critic0", shape(2, sc, sn, 1));
  nav_critics[1] = make("nav.critic1", shape(2, sc, sn, 1));
  cf2_actor = make("cf2.actor", shape(0, pc, pn, 2));
  cf2_critics[0] = make("cf2.critic0", shape(0, pc, pn, 2));
  cf2_critics[1] = make("cf2.critic1", shape(0, pc, pn, 2));

  zero_policy_outputs(solitary_actor, cfg.init_log_std);
  zero_policy_outputs(nav_actor, cfg.init_log_std);
  zero_policy_outputs(cf2_actor, cfg.init_log_std);
}

std::vector<Parameter<float>*> PolicyBundle::parameters() {
  std::vector<Parameter<float>*> ps;
  for (Network<float>* n :
       {&solitary_actor, &solitary_critics[0], &solitary_critics[1], &nav_actor, &nav_critics[0],
        &nav_critics[1], &cf2_actor, &cf2_critics[0], &cf2_critics[1]}) {
    auto p = n->parameters();
    ps.insert(ps.end(), p.begin(), p.end());
  }
  return ps;
}

std::vector<const Parameter<float>*> PolicyBundle::parameters() const {
  auto ps = const_cast<PolicyBundle*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

void write_checkpoint(std::ostream& os, std::span<const NamedTensor> tensors) {
  std::ostringstream header;
  header << kCheckpointMagic << '\n' << tensors.size() << '\n';
  for (const auto& t : tensors) {
    if (t.name.empty() || t.name.find_first_of(" \n\t") != std::string::npos) {
      throw std::invalid_argument("checkpoint: invalid tensor name '" + t.name + "'");
    }
    header << t.name << ' ' << t.value.rows() << ' ' << t.value.cols() << '\n';
  }
  header << "payload\n";
  os.put(static_cast<char>(kCheckpointVersion));
  const std::string h = header.str();
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  std::vector<char> buf;
  for (const auto& t : tensors) {
    buf.resize(static_cast<std::size_t>(t.value.size()) * 4);
    for (Eigen::Index i = 0; i < t.value.size(); ++i) {
      auto bits = std::bit_cast<std::uint32_t>(t.value.data()[i]);
      for (int b = 0; b < 4; ++b) {
        buf[static_cast<std::size_t>(i) * 4 + static_cast<std::size_t>(b)] =
            static_cast<char>((bits >> (8 * b)) & 0xffu);
      }
    }
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed");
}

std::vector<NamedTensor> read_checkpoint(std::istream& is) {
  const int version = is.get();
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  std::string line;
  if (!std::getline(is, line) || line != kCheckpointMagic) {
    throw std::runtime_error("checkpoint: bad magic");
  }
  std::getline(is, line);
  const auto count = text::parse_int<std::size_t>(line);
  std::vector<NamedTensor> out(count);
  for (auto& t : out) {
    if (!std::getline(is, line)) throw std::runtime_error("checkpoint: truncated header");
    const auto f = text::split(line);
    if (f.size() != 3) throw std::runtime_error("checkpoint: bad header line '" + line + "'");
    t.name = std::string(f[0]);
    t.value.resize(text::parse_int<Eigen::Index>(f[1]), text::parse_int<Eigen::Index>(f[2]));
  }
  if (!std::getline(is, line) || line != "payload") {
    throw std::runtime_error("checkpoint: missing payload marker");
  }
  std::vector<unsigned char> buf;
  for (auto& t : out) {
    buf.resize(static_cast<std::size_t>(t.value.size()) * 4);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (is.gcount() != static_cast<std::streamsize>(buf.size())) {
      throw std::runtime_error("checkpoint: truncated payload for " + t.name);
    }
    for (Eigen::Index i = 0; i < t.value.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) {
        bits |= static_cast<std::uint32_t>(buf[static_cast<std::size_t>(i) * 4 + static_cast<std::size_t>(b)])
                << (8 * b);
      }
      t.value.data()[i] = std::bit_cast<float>(bits);
    }
  }
  return out;
}

std::vector<NamedTensor> bundle_tensors(const PolicyBundle& bundle) {
  std::vector<NamedTensor> out;
  for (const auto* p : bundle.parameters()) out.push_back({p->name, p->value});
  return out;
}

void load_bundle_tensors(PolicyBundle& bundle, std::span<const NamedTensor> tensors) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t.value;
  for (auto* p : bundle.parameters()) {
    const auto it = by_name.find(p->name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint: missing tensor " + p->name);
    if (it->second->rows() != p->value.rows() || it->second->cols() != p->value.cols()) {
      throw ShapeError("checkpoint: shape mismatch for " + p->name);
    }
    p->value = *it->second;
  }
}

BundleConfig infer_bundle_config(std::span<const NamedTensor> tensors) {
  auto find = [&](const std::string& name) -> const Tensor& {
    for (const auto& t : tensors) {
      if (t.name == name) return t.value;
    }
    throw std::runtime_error("checkpoint: missing tensor " + name);
  };
  BundleConfig cfg;
  cfg.hidden = static_cast<int>(find("nav.actor.trunk.0.weight").cols());
  cfg.head = static_cast<int>(find("nav.actor.head.1.weight").cols());
  cfg.key_dim = static_cast<int>(find("nav.actor.encoder.current.query.weight").cols());
  cfg.layout.duplicate_patience = find("cf2.actor.encoder.next.query.weight").rows() == 3;
  cfg.init_log_std = find("nav.actor.out.bias")(0, 2);
  return cfg;
}

void save_bundle(const std::string& path, const PolicyBundle& bundle) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  write_checkpoint(os, bundle_tensors(bundle));
}

PolicyBundle load_bundle(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  const auto tensors = read_checkpoint(is);
  PolicyBundle bundle(infer_bundle_config(tensors), 0);
  load_bundle_tensors(bundle, tensors);
  return bundle;
}

}  // namespace fairnav
