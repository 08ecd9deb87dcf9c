#pragma once

#include <cctype>
#include <cstdio>
#include <fstream>
#include <limits>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "fblab/cmp/cmp.hpp"
#include "fblab/core/error.hpp"
#include "fblab/latent/latent.hpp"
#include "fblab/train/trainer.hpp"

namespace fblab::harness {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

enum class EnvKind { three_state, five_state, random, file };
enum class RhoKind { uniform, file };

inline std::string env_kind_name(EnvKind k) {
  switch (k) {
    case EnvKind::three_state: return "three_state";
    case EnvKind::five_state: return "five_state";
    case EnvKind::random: return "random";
    case EnvKind::file: return "file";
  }
  return "three_state";
}

inline std::string prior_name(latent::PriorVariant v) {
  return v == latent::PriorVariant::cauchy_scaled ? "cauchy_scaled" : "sphere";
}

/// Everything a run needs, with documented defaults for every field. Parsed
/// from flat `key = value` text under sections [env], [train], [eval];
/// unknown keys and sections are hard errors reported with line and column.
struct ExperimentConfig {
  EnvKind env_kind = EnvKind::three_state;
  std::uint64_t env_seed = 1;
  int n_states = 3;
  int n_actions = 3;
  double concentration = 1.0;
  std::string env_file;
  RhoKind rho_kind = RhoKind::uniform;
  std::string rho_file;

  train::TrainConfig train;

  std::string output_dir = "out";
  std::string d_list;  // comma-separated dims for theory-check; empty = "2,<n>"
};

namespace detail {

[[noreturn]] inline void fail_at(const std::string& name, int line, int col,
                                 const std::string& msg) {
  throw ConfigError(name + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " +
                    msg);
}

inline std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

inline double parse_double_value(const std::string& name, int line, int col,
                                 const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    fail_at(name, line, col, "invalid number '" + value + "' for key '" + key + "'");
  }
}

inline long long parse_ll_value(const std::string& name, int line, int col,
                                const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    fail_at(name, line, col, "invalid integer '" + value + "' for key '" + key + "'");
  }
}

inline int parse_int_value(const std::string& name, int line, int col,
                           const std::string& key, const std::string& value) {
  const long long v = parse_ll_value(name, line, col, key, value);
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
    fail_at(name, line, col, "integer out of range for key '" + key + "'");
  return static_cast<int>(v);
}

inline std::uint64_t parse_u64_value(const std::string& name, int line, int col,
                                     const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return static_cast<std::uint64_t>(v);
  } catch (const std::exception&) {
    fail_at(name, line, col, "invalid unsigned integer '" + value + "' for key '" + key +
                                 "'");
  }
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t comma = s.find(',', start);
    const std::string item =
        trim(comma == std::string::npos ? s.substr(start) : s.substr(start, comma - start));
    if (!item.empty()) out.push_back(item);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace detail

/// Parses a config stream. `name` labels parse errors (usually the file path).
inline ExperimentConfig parse_config(std::istream& is, const std::string& name) {
  ExperimentConfig cfg;
  std::string raw;
  std::string section;
  int line_no = 0;
  while (std::getline(is, raw)) {
    ++line_no;
    std::string line = raw;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::size_t first = 0;
    while (first < line.size() && std::isspace(static_cast<unsigned char>(line[first])))
      ++first;
    if (first == line.size()) continue;
    const int col = static_cast<int>(first) + 1;
    const std::string body = detail::trim(line.substr(first));

    if (body.front() == '[') {
      if (body.back() != ']')
        detail::fail_at(name, line_no, col, "unterminated section header '" + body + "'");
      section = detail::trim(body.substr(1, body.size() - 2));
      if (section != "env" && section != "train" && section != "eval")
        detail::fail_at(name, line_no, col,
                        "unknown section '[" + section + "]' (expected [env], [train], [eval])");
      continue;
    }

    const auto eq = body.find('=');
    if (eq == std::string::npos)
      detail::fail_at(name, line_no, col, "expected 'key = value', got '" + body + "'");
    const std::string key = detail::trim(body.substr(0, eq));
    const std::string value = detail::trim(body.substr(eq + 1));
    if (key.empty()) detail::fail_at(name, line_no, col, "empty key");
    if (section.empty())
      detail::fail_at(name, line_no, col,
                      "key '" + key + "' appears before any [section] header");

    const auto num = [&] { return detail::parse_double_value(name, line_no, col, key, value); };
    const auto integer = [&] { return detail::parse_int_value(name, line_no, col, key, value); };
    const auto longint = [&] { return detail::parse_ll_value(name, line_no, col, key, value); };
    const auto u64 = [&] { return detail::parse_u64_value(name, line_no, col, key, value); };
    const auto bad_enum = [&](const char* expected) {
      detail::fail_at(name, line_no, col,
                      "invalid value '" + value + "' for key '" + key + "' (expected " +
                          expected + ")");
    };

    if (section == "env") {
      if (key == "kind") {
        if (value == "three_state") cfg.env_kind = EnvKind::three_state;
        else if (value == "five_state") cfg.env_kind = EnvKind::five_state;
        else if (value == "random") cfg.env_kind = EnvKind::random;
        else if (value == "file") cfg.env_kind = EnvKind::file;
        else bad_enum("three_state | five_state | random | file");
      } else if (key == "env_seed") {
        cfg.env_seed = u64();
      } else if (key == "n_states") {
        cfg.n_states = integer();
      } else if (key == "n_actions") {
        cfg.n_actions = integer();
      } else if (key == "concentration") {
        cfg.concentration = num();
      } else if (key == "file") {
        cfg.env_file = value;
      } else if (key == "rho") {
        if (value == "uniform") cfg.rho_kind = RhoKind::uniform;
        else if (value == "file") cfg.rho_kind = RhoKind::file;
        else bad_enum("uniform | file");
      } else if (key == "rho_file") {
        cfg.rho_file = value;
      } else {
        detail::fail_at(name, line_no, col, "unknown key '" + key + "' in section [env]");
      }
    } else if (section == "train") {
      try {
        if (key == "algo") cfg.train.algo = model::parse_algo(value);
        else if (key == "param_kind") cfg.train.param_kind = model::parse_param_kind(value);
        else if (key == "loss_mode") cfg.train.loss_mode = train::parse_loss_mode(value);
        else if (key == "steps") cfg.train.steps = longint();
        else if (key == "batch_size") cfg.train.batch_size = integer();
        else if (key == "lr") cfg.train.lr = num();
        else if (key == "weight_decay") cfg.train.weight_decay = num();
        else if (key == "adamw_eps") cfg.train.adamw_eps = num();
        else if (key == "gamma") cfg.train.gamma = num();
        else if (key == "tau_policy_train") cfg.train.tau_policy_train = num();
        else if (key == "lambda_ortho") cfg.train.lambda_ortho = num();
        else if (key == "target_polyak") cfg.train.target_polyak = num();
        else if (key == "seed") cfg.train.seed = u64();
        else if (key == "d") cfg.train.d = integer();
        else if (key == "dataset_transitions") cfg.train.dataset_transitions = integer();
        else if (key == "prior") {
          if (value == "cauchy_scaled") cfg.train.prior = latent::PriorVariant::cauchy_scaled;
          else if (value == "sphere") cfg.train.prior = latent::PriorVariant::sphere;
          else bad_enum("cauchy_scaled | sphere");
        } else {
          detail::fail_at(name, line_no, col, "unknown key '" + key + "' in section [train]");
        }
      } catch (const ConfigError& e) {
        const std::string what = e.what();
        if (what.rfind(name + ":", 0) == 0) throw;  // already located
        detail::fail_at(name, line_no, col, what);
      }
    } else {  // eval
      if (key == "eval_interval") cfg.train.eval_interval = longint();
      else if (key == "eval_latents") cfg.train.eval_latents = integer();
      else if (key == "tau_policy_eval") cfg.train.tau_policy_eval = num();
      else if (key == "output_dir") cfg.output_dir = value;
      else if (key == "d_list") cfg.d_list = value;
      else detail::fail_at(name, line_no, col, "unknown key '" + key + "' in section [eval]");
    }
  }
  return cfg;
}

inline ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  return parse_config(is, path);
}

/// Builds the configured environment.
inline cmp::Cmp build_env(const ExperimentConfig& cfg) {
  switch (cfg.env_kind) {
    case EnvKind::three_state: return cmp::build_three_state_cmp();
    case EnvKind::five_state: return cmp::build_five_state_circular_cmp();
    case EnvKind::random:
      return cmp::random_cmp(cfg.env_seed, cfg.n_states, cfg.n_actions, cfg.concentration);
    case EnvKind::file:
      if (cfg.env_file.empty())
        throw ConfigError("config: [env] kind = file requires the 'file' key");
      return cmp::load_cmp_file(cfg.env_file);
  }
  throw ConfigError("config: unreachable env kind");
}

/// Builds the configured state-action marginal (full support, sums to 1).
/// File format: |S*A| whitespace-separated decimals, '#' comments allowed.
inline Vec build_rho(const ExperimentConfig& cfg, const cmp::Cmp& env) {
  if (cfg.rho_kind == RhoKind::uniform) return cmp::uniform_rho(env.num_pairs());
  if (cfg.rho_file.empty())
    throw ConfigError("config: [env] rho = file requires the 'rho_file' key");
  std::ifstream is(cfg.rho_file);
  if (!is) throw ConfigError("cannot open rho file: " + cfg.rho_file);
  cmp::detail::TokenReader tr(is);
  Vec rho(env.num_pairs());
  for (int i = 0; i < env.num_pairs(); ++i) rho(i) = tr.require_double("rho entry");
  std::string extra;
  if (tr.next(extra))
    throw ConfigError("rho file parse error at line " + std::to_string(tr.line_no()) +
                      ": trailing content '" + extra + "'");
  cmp::validate_rho(rho);
  return rho;
}

/// Resolved dimension list for theory checks: the configured comma list, or
/// {2, n} by default. Every entry must lie in [1, n].
inline std::vector<int> resolve_d_list(const ExperimentConfig& cfg, int n) {
  std::vector<int> out;
  if (cfg.d_list.empty()) {
    if (n > 2) out.push_back(2);
    out.push_back(n);
  } else {
    for (const std::string& item : detail::split_list(cfg.d_list)) {
      try {
        std::size_t used = 0;
        const int v = std::stoi(item, &used);
        if (used != item.size()) throw std::invalid_argument(item);
        out.push_back(v);
      } catch (const std::exception&) {
        throw ConfigError("config: invalid d_list entry '" + item + "'");
      }
    }
  }
  for (int v : out)
    if (v < 1 || v > n)
      throw ConfigError("config: d_list entry " + std::to_string(v) +
                        " out of range [1, " + std::to_string(n) + "]");
  return out;
}

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

/// Writes the fully-resolved configuration (every effective value, defaults
/// included) in the same format the parser reads, so a run is replayable from
/// its artifacts alone. Sentinels are replaced by their effective values.
inline void write_resolved(const ExperimentConfig& cfg, const cmp::Cmp& env,
                           std::ostream& os) {
  const int n = env.num_pairs();
  const double gamma_eff = cfg.train.gamma > 0.0 ? cfg.train.gamma : env.gamma;
  const int d_eff = cfg.train.d > 0 ? cfg.train.d : n;
  const std::vector<int> d_list = resolve_d_list(cfg, n);

  os << "[env]\n";
  os << "kind = " << env_kind_name(cfg.env_kind) << '\n';
  os << "env_seed = " << cfg.env_seed << '\n';
  os << "n_states = " << env.num_states << '\n';
  os << "n_actions = " << env.num_actions << '\n';
  os << "concentration = " << detail::fmt_double(cfg.concentration) << '\n';
  os << "file = " << cfg.env_file << '\n';
  os << "rho = " << (cfg.rho_kind == RhoKind::uniform ? "uniform" : "file") << '\n';
  os << "rho_file = " << cfg.rho_file << '\n';
  os << '\n';
  os << "[train]\n";
  os << "algo = " << model::algo_name(cfg.train.algo) << '\n';
  os << "param_kind = " << model::param_kind_name(cfg.train.effective_param_kind()) << '\n';
  os << "loss_mode = " << train::loss_mode_name(cfg.train.loss_mode) << '\n';
  os << "steps = " << cfg.train.steps << '\n';
  os << "batch_size = " << cfg.train.batch_size << '\n';
  os << "lr = " << detail::fmt_double(cfg.train.lr) << '\n';
  os << "weight_decay = " << detail::fmt_double(cfg.train.weight_decay) << '\n';
  os << "adamw_eps = " << detail::fmt_double(cfg.train.adamw_eps) << '\n';
  os << "gamma = " << detail::fmt_double(gamma_eff) << '\n';
  os << "tau_policy_train = " << detail::fmt_double(cfg.train.tau_policy_train) << '\n';
  os << "lambda_ortho = " << detail::fmt_double(cfg.train.lambda_ortho) << '\n';
  os << "target_polyak = " << detail::fmt_double(cfg.train.target_polyak) << '\n';
  os << "seed = " << cfg.train.seed << '\n';
  os << "d = " << d_eff << '\n';
  os << "dataset_transitions = " << cfg.train.dataset_transitions << '\n';
  os << "prior = " << prior_name(cfg.train.prior) << '\n';
  os << '\n';
  os << "[eval]\n";
  os << "eval_interval = " << cfg.train.eval_interval << '\n';
  os << "eval_latents = " << cfg.train.eval_latents << '\n';
  os << "tau_policy_eval = " << detail::fmt_double(cfg.train.tau_policy_eval) << '\n';
  os << "output_dir = " << cfg.output_dir << '\n';
  os << "d_list = ";
  for (std::size_t i = 0; i < d_list.size(); ++i) os << (i ? "," : "") << d_list[i];
  os << '\n';
}

}  // namespace fblab::harness
