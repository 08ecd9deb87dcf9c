#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "fblab/core/error.hpp"
#include "fblab/core/rng.hpp"

namespace fblab::cmp {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

/// Normative flattening of (state, action) pairs. Every |S*A|-indexed matrix
/// and vector in this repository uses this ordering.
inline int flat_index(int state, int action, int num_actions) {
  return state * num_actions + action;
}
inline int state_of(int flat, int num_actions) { return flat / num_actions; }
inline int action_of(int flat, int num_actions) { return flat % num_actions; }

/// A finite controlled Markov process: transitions, an initial distribution,
/// and a discount -- no reward function.
struct Cmp {
  int num_states = 0;
  int num_actions = 0;
  /// Row flat_index(s, a) holds p(. | s, a) over next states (|S*A| x |S|).
  Mat transition;
  Vec initial_dist;
  double gamma = 0.0;

  int num_pairs() const { return num_states * num_actions; }

  double p(int s, int a, int s_next) const {
    return transition(flat_index(s, a, num_actions), s_next);
  }

  /// Enforces the structural invariants; throws ConfigError on violation.
  void validate() const {
    if (num_states < 1 || num_actions < 1)
      throw ConfigError("cmp: num_states and num_actions must be >= 1");
    if (!(gamma >= 0.0) || !(gamma < 1.0))
      throw ConfigError("cmp: gamma must lie in [0, 1)");
    if (transition.rows() != num_pairs() || transition.cols() != num_states)
      throw ConfigError("cmp: transition shape mismatch");
    if (initial_dist.size() != num_states)
      throw ConfigError("cmp: initial distribution length mismatch");
    for (int row = 0; row < transition.rows(); ++row) {
      double sum = 0.0;
      for (int s2 = 0; s2 < num_states; ++s2) {
        const double v = transition(row, s2);
        if (!(v >= 0.0) || !std::isfinite(v))
          throw ConfigError("cmp: transition probabilities must be finite and >= 0");
        sum += v;
      }
      if (std::abs(sum - 1.0) > 1e-12)
        throw ConfigError("cmp: transition row does not sum to 1");
    }
    double init_sum = 0.0;
    for (int s = 0; s < num_states; ++s) {
      const double v = initial_dist(s);
      if (!(v >= 0.0) || !std::isfinite(v))
        throw ConfigError("cmp: initial distribution entries must be finite and >= 0");
      init_sum += v;
    }
    if (std::abs(init_sum - 1.0) > 1e-12)
      throw ConfigError("cmp: initial distribution does not sum to 1");
  }
};

/// A stationary stochastic policy; probs(s, a) = pi(a | s).
struct Policy {
  Mat probs;  // |S| x |A|

  int num_states() const { return static_cast<int>(probs.rows()); }
  int num_actions() const { return static_cast<int>(probs.cols()); }

  void validate() const {
    for (int s = 0; s < probs.rows(); ++s) {
      double sum = 0.0;
      for (int a = 0; a < probs.cols(); ++a) {
        if (!(probs(s, a) >= 0.0)) throw ConfigError("policy: probabilities must be >= 0");
        sum += probs(s, a);
      }
      if (std::abs(sum - 1.0) > 1e-12) throw ConfigError("policy: row does not sum to 1");
    }
  }
};

inline Policy uniform_policy(int num_states, int num_actions) {
  Policy pi;
  pi.probs = Mat::Constant(num_states, num_actions, 1.0 / num_actions);
  return pi;
}

/// Full-support marginal over (s, a) pairs; defaults to uniform.
inline Vec uniform_rho(int num_pairs) {
  return Vec::Constant(num_pairs, 1.0 / num_pairs);
}

inline void validate_rho(const Vec& rho) {
  double sum = 0.0;
  for (int i = 0; i < rho.size(); ++i) {
    if (!(rho(i) > 0.0)) throw ConfigError("rho: entries must be strictly positive");
    sum += rho(i);
  }
  if (std::abs(sum - 1.0) > 1e-12) throw ConfigError("rho: does not sum to 1");
}

/// Three states, three actions: from s0, action a_i moves deterministically to
/// s_i (a0 stays put); s1 and s2 absorb under every action. Start state s0.
inline Cmp build_three_state_cmp() {
  Cmp c;
  c.num_states = 3;
  c.num_actions = 3;
  c.gamma = 0.9;
  c.transition = Mat::Zero(9, 3);
  for (int a = 0; a < 3; ++a) {
    c.transition(flat_index(0, a, 3), a) = 1.0;  // s0 --a_i--> s_i
    c.transition(flat_index(1, a, 3), 1) = 1.0;  // s1 absorbing
    c.transition(flat_index(2, a, 3), 2) = 1.0;  // s2 absorbing
  }
  c.initial_dist = Vec::Zero(3);
  c.initial_dist(0) = 1.0;
  c.validate();
  return c;
}

/// Five states on a ring, two actions: a0 advances (i+1 mod 5)
/// deterministically; a1 retreats (i-1 mod 5) with probability 0.7 and stays
/// with probability 0.3. Start state s0.
inline Cmp build_five_state_circular_cmp() {
  Cmp c;
  c.num_states = 5;
  c.num_actions = 2;
  c.gamma = 0.9;
  c.transition = Mat::Zero(10, 5);
  for (int s = 0; s < 5; ++s) {
    c.transition(flat_index(s, 0, 2), (s + 1) % 5) = 1.0;
    c.transition(flat_index(s, 1, 2), (s + 4) % 5) = 0.7;
    c.transition(flat_index(s, 1, 2), s) += 0.3;
  }
  c.initial_dist = Vec::Zero(5);
  c.initial_dist(0) = 1.0;
  c.validate();
  return c;
}

/// Seeded random CMP: every transition row and the initial distribution are
/// symmetric Dirichlet(concentration) draws; the discount is sampled uniformly
/// from [0.5, 0.95] unless `gamma` >= 0 pins it.
inline Cmp random_cmp(std::uint64_t seed, int n_states, int n_actions,
                      double concentration, double gamma = -1.0) {
  if (n_states < 1 || n_actions < 1)
    throw ConfigError("random_cmp: n_states and n_actions must be >= 1");
  core::SplitMix64 rng(core::SplitMix64::mix(seed));
  Cmp c;
  c.num_states = n_states;
  c.num_actions = n_actions;
  c.gamma = gamma >= 0.0 ? gamma : rng.uniform(0.5, 0.95);
  c.transition = Mat::Zero(n_states * n_actions, n_states);
  for (int row = 0; row < c.transition.rows(); ++row) {
    const auto probs = rng.dirichlet(concentration, n_states);
    for (int s2 = 0; s2 < n_states; ++s2) c.transition(row, s2) = probs[s2];
  }
  const auto init = rng.dirichlet(concentration, n_states);
  c.initial_dist = Vec::Zero(n_states);
  for (int s = 0; s < n_states; ++s) c.initial_dist(s) = init[s];
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Text format
//
//   cmp v1 <n_states> <n_actions> <gamma>
//   <|S| next-state probabilities>      one line per (s, a), flat order
//   ...
//   <|S| initial-distribution entries>
//
// Whitespace-separated decimals; `#` starts a comment anywhere on a line.
// ---------------------------------------------------------------------------

inline void save_cmp(const Cmp& c, std::ostream& os) {
  os << "cmp v1 " << c.num_states << ' ' << c.num_actions << ' ';
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.16e", c.gamma);
  os << buf << '\n';
  for (int row = 0; row < c.transition.rows(); ++row) {
    for (int s2 = 0; s2 < c.num_states; ++s2) {
      std::snprintf(buf, sizeof buf, "%.16e", c.transition(row, s2));
      os << (s2 ? " " : "") << buf;
    }
    os << '\n';
  }
  for (int s = 0; s < c.num_states; ++s) {
    std::snprintf(buf, sizeof buf, "%.16e", c.initial_dist(s));
    os << (s ? " " : "") << buf;
  }
  os << '\n';
}

inline void save_cmp_file(const Cmp& c, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ConfigError("save_cmp: cannot open " + path);
  save_cmp(c, os);
}

namespace detail {
/// Pulls whitespace-separated tokens from a stream, tracking line numbers and
/// stripping `#` comments, for parse errors that point at their source line.
class TokenReader {
 public:
  explicit TokenReader(std::istream& is) : is_(is) {}

  bool next(std::string& tok) {
    while (pos_ >= line_.size()) {
      if (!std::getline(is_, line_)) return false;
      ++line_no_;
      const auto hash = line_.find('#');
      if (hash != std::string::npos) line_.resize(hash);
      pos_ = 0;
      skip_ws();
    }
    const auto start = pos_;
    while (pos_ < line_.size() && !std::isspace(static_cast<unsigned char>(line_[pos_]))) ++pos_;
    tok = line_.substr(start, pos_ - start);
    skip_ws();
    return true;
  }

  std::string require(const char* what) {
    std::string tok;
    if (!next(tok))
      throw ConfigError("cmp parse error: unexpected end of input, expected " +
                        std::string(what));
    return tok;
  }

  double require_double(const char* what) {
    const std::string tok = require(what);
    try {
      std::size_t used = 0;
      const double v = std::stod(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("cmp parse error at line " + std::to_string(line_no_) +
                        ": bad number '" + tok + "' for " + what);
    }
  }

  int require_int(const char* what) {
    const double v = require_double(what);
    const int i = static_cast<int>(v);
    if (static_cast<double>(i) != v)
      throw ConfigError("cmp parse error at line " + std::to_string(line_no_) +
                        ": expected integer for " + std::string(what));
    return i;
  }

  int line_no() const { return line_no_; }

 private:
  void skip_ws() {
    while (pos_ < line_.size() && std::isspace(static_cast<unsigned char>(line_[pos_]))) ++pos_;
  }

  std::istream& is_;
  std::string line_;
  std::size_t pos_ = 0;
  int line_no_ = 0;
};
}  // namespace detail

inline Cmp load_cmp(std::istream& is) {
  detail::TokenReader tr(is);
  if (tr.require("format tag 'cmp'") != "cmp")
    throw ConfigError("cmp parse error: file does not start with 'cmp'");
  if (tr.require("version tag 'v1'") != "v1")
    throw ConfigError("cmp parse error: unsupported version (expected v1)");
  Cmp c;
  c.num_states = tr.require_int("n_states");
  c.num_actions = tr.require_int("n_actions");
  c.gamma = tr.require_double("gamma");
  if (c.num_states < 1 || c.num_actions < 1)
    throw ConfigError("cmp parse error: n_states and n_actions must be >= 1");
  c.transition = Mat::Zero(c.num_pairs(), c.num_states);
  for (int row = 0; row < c.num_pairs(); ++row)
    for (int s2 = 0; s2 < c.num_states; ++s2)
      c.transition(row, s2) = tr.require_double("transition probability");
  c.initial_dist = Vec::Zero(c.num_states);
  for (int s = 0; s < c.num_states; ++s)
    c.initial_dist(s) = tr.require_double("initial distribution entry");
  std::string extra;
  if (tr.next(extra))
    throw ConfigError("cmp parse error at line " + std::to_string(tr.line_no()) +
                      ": trailing content '" + extra + "'");
  c.validate();
  return c;
}

inline Cmp load_cmp_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("load_cmp: cannot open " + path);
  return load_cmp(is);
}

}  // namespace fblab::cmp
