#include "fairnav/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <istream>
#include <sstream>
#include <vector>

#include "fairnav/text.hpp"

namespace fairnav {

ConfigMap ConfigMap::parse(std::istream& is, const std::string& source) {
  ConfigMap map;
  int line_no = 0;
  for (std::string line; std::getline(is, line);) {
    ++line_no;
    std::string_view s = line;
    if (const auto hash = s.find('#'); hash != std::string_view::npos) s = s.substr(0, hash);
    s = text::trim(s);
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    const auto key = text::trim(s.substr(0, eq));
    if (key.empty()) throw ConfigError(source + ":" + std::to_string(line_no) + ": empty key");
    map.values_[std::string(key)] = std::string(text::trim(s.substr(eq + 1)));
  }
  return map;
}

ConfigMap ConfigMap::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path);
  return parse(is, path);
}

std::optional<std::string> ConfigMap::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

std::uint64_t default_seed() {
  if (const char* env = std::getenv("FAIRNAV_SEED"); env != nullptr && *env != '\0') {
    try {
      return text::parse_int<std::uint64_t>(env);
    } catch (const std::exception&) {
      throw ConfigError("FAIRNAV_SEED must be a non-negative integer, got '" + std::string(env) + "'");
    }
  }
  return 1;
}

bool parse_bool(std::string_view text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw std::invalid_argument("not a boolean: '" + std::string(text) + "'");
}

namespace {

// One row per key: how to read it into a config and how to print it back.
struct Field {
  const char* key;
  std::function<void(PipelineConfig&, std::string_view)> read;
  std::function<std::string(const PipelineConfig&)> write;
};

template <typename T>
Field number(const char* key, T PipelineConfig::*member) {
  return {key,
          [member](PipelineConfig& c, std::string_view v) {
            if constexpr (std::is_floating_point_v<T>) {
              c.*member = text::parse_double(v);
            } else {
              c.*member = text::parse_int<T>(v);
            }
          },
          [member](const PipelineConfig& c) {
            if constexpr (std::is_floating_point_v<T>) {
              return text::format_double(c.*member);
            } else {
              return std::to_string(c.*member);
            }
          }};
}

template <typename S, typename T>
Field nested(const char* key, S PipelineConfig::*section, T S::*member) {
  return {key,
          [section, member](PipelineConfig& c, std::string_view v) {
            if constexpr (std::is_same_v<T, bool>) {
              c.*section.*member = parse_bool(text::trim(v));
            } else if constexpr (std::is_floating_point_v<T>) {
              c.*section.*member = text::parse_double(v);
            } else {
              c.*section.*member = text::parse_int<T>(v);
            }
          },
          [section, member](const PipelineConfig& c) {
            if constexpr (std::is_same_v<T, bool>) {
              return std::string(c.*section.*member ? "true" : "false");
            } else if constexpr (std::is_floating_point_v<T>) {
              return text::format_double(c.*section.*member);
            } else {
              return std::to_string(c.*section.*member);
            }
          }};
}

Field path(const char* key, std::string PipelineConfig::*member) {
  return {key, [member](PipelineConfig& c, std::string_view v) { c.*member = std::string(v); },
          [member](const PipelineConfig& c) { return c.*member; }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"env.family",
                 [](PipelineConfig& c, std::string_view v) { c.family = parse_family(v); },
                 [](const PipelineConfig& c) { return std::string(to_string(c.family)); }});
    f.push_back(number("env.agents", &PipelineConfig::n_agents));
    f.push_back(number("env.obstacles", &PipelineConfig::n_obstacles));
    f.push_back(number("env.map_size", &PipelineConfig::map_size));
    f.push_back(number("env.t_max", &PipelineConfig::t_max));
    f.push_back(nested("reward.goal", &PipelineConfig::rewards, &RewardConstants::goal));
    f.push_back(nested("reward.crash", &PipelineConfig::rewards, &RewardConstants::crash));
    f.push_back(nested("reward.time", &PipelineConfig::rewards, &RewardConstants::time));

    f.push_back(nested("dwa.v_samples", &PipelineConfig::dwa, &DwaConfig::v_samples));
    f.push_back(nested("dwa.w_samples", &PipelineConfig::dwa, &DwaConfig::w_samples));
    f.push_back(nested("dwa.horizon", &PipelineConfig::dwa, &DwaConfig::horizon));
    f.push_back(nested("dwa.w_heading", &PipelineConfig::dwa, &DwaConfig::w_heading));
    f.push_back(nested("dwa.w_clearance", &PipelineConfig::dwa, &DwaConfig::w_clearance));
    f.push_back(nested("dwa.w_velocity", &PipelineConfig::dwa, &DwaConfig::w_velocity));

    f.push_back(nested("ncf2.alpha", &PipelineConfig::fairness, &FairnessConstants::alpha));
    f.push_back(nested("ncf2.beta", &PipelineConfig::fairness, &FairnessConstants::beta));
    f.push_back(nested("ncf2.no_improvement", &PipelineConfig::ablations, &AblationFlags::no_improvement));
    f.push_back(nested("ncf2.full_comm", &PipelineConfig::ablations, &AblationFlags::full_comm));
    f.push_back(nested("ncf2.fixed_priority", &PipelineConfig::ablations, &AblationFlags::fixed_priority));
    f.push_back({"ncf2.duplicate_patience",
                 [](PipelineConfig& c, std::string_view v) {
                   c.nets.layout.duplicate_patience = parse_bool(text::trim(v));
                 },
                 [](const PipelineConfig& c) {
                   return std::string(c.nets.layout.duplicate_patience ? "true" : "false");
                 }});

    f.push_back(nested("nets.hidden", &PipelineConfig::nets, &BundleConfig::hidden));
    f.push_back(nested("nets.head", &PipelineConfig::nets, &BundleConfig::head));
    f.push_back(nested("nets.key_dim", &PipelineConfig::nets, &BundleConfig::key_dim));
    f.push_back(nested("nets.init_log_std", &PipelineConfig::nets, &BundleConfig::init_log_std));
    f.push_back(number("nets.residual_fraction", &PipelineConfig::residual_fraction));

    f.push_back(nested("sac.discount", &PipelineConfig::sac, &SacConfig::discount));
    f.push_back(nested("sac.initial_temperature", &PipelineConfig::sac, &SacConfig::initial_temperature));
    f.push_back(nested("sac.tau", &PipelineConfig::sac, &SacConfig::tau));
    f.push_back(nested("sac.target_interval", &PipelineConfig::sac, &SacConfig::target_interval));
    f.push_back(nested("sac.lr", &PipelineConfig::sac, &SacConfig::lr));
    f.push_back(nested("sac.batch", &PipelineConfig::sac, &SacConfig::batch));
    f.push_back(nested("sac.critic_warmup", &PipelineConfig::sac, &SacConfig::critic_warmup));
    f.push_back(nested("sac.target_entropy_continuous", &PipelineConfig::sac,
                       &SacConfig::target_entropy_continuous));
    f.push_back(nested("sac.target_entropy_discrete", &PipelineConfig::sac,
                       &SacConfig::target_entropy_discrete));
    f.push_back(nested("sac.grad_clip", &PipelineConfig::sac, &SacConfig::grad_clip));

    f.push_back(number("learn.seed", &PipelineConfig::seed));
    f.push_back(number("learn.workers", &PipelineConfig::workers));
    f.push_back(number("learn.solitary_iterations", &PipelineConfig::solitary_iterations));
    f.push_back(number("learn.nav_iterations", &PipelineConfig::nav_iterations));
    f.push_back(number("learn.joint_iterations", &PipelineConfig::joint_iterations));
    f.push_back(number("learn.updates_per_transition", &PipelineConfig::updates_per_transition));
    f.push_back(number("learn.buffer_capacity", &PipelineConfig::buffer_capacity));
    f.push_back(number("learn.checkpoint_interval", &PipelineConfig::checkpoint_interval));
    f.push_back(number("learn.log_interval", &PipelineConfig::log_interval));
    f.push_back(number("learn.sr_window", &PipelineConfig::sr_window));
    f.push_back(number("learn.max_worker_restarts", &PipelineConfig::max_worker_restarts));
    f.push_back(number("learn.fairness_reward_clip", &PipelineConfig::fairness_reward_clip));
    f.push_back(path("learn.checkpoint", &PipelineConfig::checkpoint_path));
    f.push_back(path("learn.log", &PipelineConfig::log_path));
    return f;
  }();
  return table;
}

}  // namespace

PipelineConfig pipeline_config(const ConfigMap& map) {
  PipelineConfig c;
  c.seed = default_seed();
  c.checkpoint_path = "fairnav.ckpt";
  c.log_path = "train.log";
  for (const auto& [key, value] : map.values()) {
    const auto it = std::find_if(fields().begin(), fields().end(),
                                 [&](const Field& f) { return key == f.key; });
    if (it == fields().end()) throw ConfigError("unknown config key '" + key + "'");
    try {
      it->read(c, value);
    } catch (const std::exception& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
  }
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

std::string dump_config(const PipelineConfig& config) {
  std::ostringstream os;
  std::string section;
  for (const auto& f : fields()) {
    const std::string key = f.key;
    const std::string s = key.substr(0, key.find('.'));
    if (s != section) {
      if (!section.empty()) os << '\n';
      section = s;
    }
    os << key << " = " << f.write(config) << '\n';
  }
  return os.str();
}

}  // namespace fairnav
