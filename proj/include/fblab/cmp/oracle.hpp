#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <cmath>
#include <limits>

#include "fblab/cmp/cmp.hpp"
#include "fblab/core/error.hpp"

namespace fblab::cmp {

/// Policy-coupled transition matrix over (s, a) pairs:
/// P[(s,a), (s',a')] = p(s'|s,a) * pi(a'|s'). Row-stochastic by construction.
inline Mat build_transition_matrix(const Cmp& c, const Policy& pi) {
  if (pi.num_states() != c.num_states || pi.num_actions() != c.num_actions)
    throw ConfigError("build_transition_matrix: policy shape mismatch");
  const int n = c.num_pairs();
  Mat p = Mat::Zero(n, n);
  for (int row = 0; row < n; ++row) {
    for (int s2 = 0; s2 < c.num_states; ++s2) {
      const double ps = c.transition(row, s2);
      if (ps == 0.0) continue;
      for (int a2 = 0; a2 < c.num_actions; ++a2)
        p(row, flat_index(s2, a2, c.num_actions)) = ps * pi.probs(s2, a2);
    }
  }
  return p;
}

/// Normalized successor measure M = (1-gamma) * (I - gamma*P)^{-1}, computed
/// by a direct dense LU solve. Each row of M is the discounted occupancy
/// distribution over future (s, a) pairs and sums to 1.
inline Mat successor_measure_from_p(const Mat& p, double gamma) {
  const int n = static_cast<int>(p.rows());
  Mat a = Mat::Identity(n, n) - gamma * p;
  Eigen::PartialPivLU<Mat> lu(a);
  Mat m = lu.solve(Mat::Identity(n, n) * (1.0 - gamma));
  if (!m.allFinite()) throw NumericError("successor_measure: dense solve produced non-finite values");
  return m;
}

inline Mat successor_measure(const Cmp& c, const Policy& pi) {
  return successor_measure_from_p(build_transition_matrix(c, pi), c.gamma);
}

/// Matrix infinity-norm (max absolute row sum) of the fixed-point residual
/// M - (1-gamma)I - gamma*P*M.
inline double bellman_residual(const Mat& m, const Cmp& c, const Policy& pi) {
  const int n = c.num_pairs();
  const Mat p = build_transition_matrix(c, pi);
  const Mat r = m - (1.0 - c.gamma) * Mat::Identity(n, n) - c.gamma * (p * m);
  return r.cwiseAbs().rowwise().sum().maxCoeff();
}

/// Normalized Q-values: q = M * r. Equals (1-gamma) times the textbook
/// discounted sum, so a constant reward c yields q = c * ones exactly.
inline Vec q_from_successor(const Mat& m, const Vec& r) {
  if (m.cols() != r.size()) throw ConfigError("q_from_successor: dimension mismatch");
  return m * r;
}

enum class ViMode { evaluate, optimal };

/// Value iteration on the normalized backup
///   Q(s,a) <- (1-gamma) r(s,a) + gamma * E_{s'}[ agg_{a'} Q(s',a') ],
/// where agg is max (optimal) or the policy expectation (evaluate). Stops when
/// the sup-norm residual drops to 1e-12; throws after 1e5 sweeps.
inline Vec value_iteration(const Cmp& c, const Vec& r, ViMode mode,
                           const Policy* pi = nullptr) {
  const int n = c.num_pairs();
  if (r.size() != n) throw ConfigError("value_iteration: reward length mismatch");
  if (!r.allFinite()) throw NumericError("value_iteration: non-finite reward");
  if (mode == ViMode::evaluate && pi == nullptr)
    throw ConfigError("value_iteration: evaluate mode requires a policy");
  Vec q = Vec::Zero(n);
  Vec q_next(n);
  Vec state_val(c.num_states);
  for (long sweep = 0; sweep < 100000; ++sweep) {
    for (int s = 0; s < c.num_states; ++s) {
      if (mode == ViMode::optimal) {
        double best = -std::numeric_limits<double>::infinity();
        for (int a = 0; a < c.num_actions; ++a)
          best = std::max(best, q(flat_index(s, a, c.num_actions)));
        state_val(s) = best;
      } else {
        double acc = 0.0;
        for (int a = 0; a < c.num_actions; ++a)
          acc += pi->probs(s, a) * q(flat_index(s, a, c.num_actions));
        state_val(s) = acc;
      }
    }
    for (int row = 0; row < n; ++row) {
      double next = 0.0;
      for (int s2 = 0; s2 < c.num_states; ++s2) {
        const double p = c.transition(row, s2);
        if (p != 0.0) next += p * state_val(s2);
      }
      q_next(row) = (1.0 - c.gamma) * r(row) + c.gamma * next;
    }
    const double residual = (q_next - q).cwiseAbs().maxCoeff();
    q.swap(q_next);
    if (residual <= 1e-12) return q;
  }
  throw NumericError("value_iteration: no convergence within 1e5 sweeps");
}

/// Boltzmann policy over per-(s,a) scores: pi(a|s) proportional to
/// exp(tau * score(s,a)), stabilized by per-state max subtraction.
inline Policy softmax_policy(const Vec& scores, double tau, int num_states,
                             int num_actions) {
  if (!(tau > 0.0)) throw ConfigError("softmax_policy: tau must be positive");
  if (scores.size() != num_states * num_actions)
    throw ConfigError("softmax_policy: score length mismatch");
  if (!scores.allFinite()) throw NumericError("softmax_policy: non-finite scores");
  Policy pi;
  pi.probs = Mat::Zero(num_states, num_actions);
  for (int s = 0; s < num_states; ++s) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int a = 0; a < num_actions; ++a)
      mx = std::max(mx, tau * scores(flat_index(s, a, num_actions)));
    double sum = 0.0;
    for (int a = 0; a < num_actions; ++a) {
      const double e = std::exp(tau * scores(flat_index(s, a, num_actions)) - mx);
      pi.probs(s, a) = e;
      sum += e;
    }
    pi.probs.row(s) /= sum;
  }
  return pi;
}

/// Per-state argmax of the flat score vector; ties break toward the lowest
/// action index so downstream comparisons are deterministic.
inline int greedy_action(const Vec& scores, int s, int num_actions) {
  int best = 0;
  double best_v = scores(flat_index(s, 0, num_actions));
  for (int a = 1; a < num_actions; ++a) {
    const double v = scores(flat_index(s, a, num_actions));
    if (v > best_v) {
      best_v = v;
      best = a;
    }
  }
  return best;
}

inline Policy greedy_policy(const Vec& q, int num_states, int num_actions) {
  if (q.size() != num_states * num_actions)
    throw ConfigError("greedy_policy: score length mismatch");
  Policy pi;
  pi.probs = Mat::Zero(num_states, num_actions);
  for (int s = 0; s < num_states; ++s) pi.probs(s, greedy_action(q, s, num_actions)) = 1.0;
  return pi;
}

/// Greedy step on the behavioral policy's Q-values; in general NOT optimal.
inline Policy one_step_improved_policy(const Cmp& c, const Policy& behavioral,
                                       const Vec& r) {
  const Vec q = value_iteration(c, r, ViMode::evaluate, &behavioral);
  return greedy_policy(q, c.num_states, c.num_actions);
}

/// One application of the successor-measure-ratio backup to the product
/// f * b, with the backup's policy induced by f itself (greedy over f*z):
///   out = (1-gamma) * diag(1/rho) + gamma * P^{pi(f,z)} * (f*b).
inline Mat fb_bellman_operator(const Mat& f_table, const Mat& b, const Cmp& c,
                               const Vec& rho, const Vec& z) {
  const int n = c.num_pairs();
  if (f_table.rows() != n || b.cols() != n || f_table.cols() != b.rows() ||
      z.size() != f_table.cols() || rho.size() != n)
    throw ConfigError("fb_bellman_operator: shape mismatch");
  const Vec scores = f_table * z;
  const Policy pi = greedy_policy(scores, c.num_states, c.num_actions);
  const Mat p = build_transition_matrix(c, pi);
  Mat out = c.gamma * (p * (f_table * b));
  for (int i = 0; i < n; ++i) out(i, i) += (1.0 - c.gamma) / rho(i);
  return out;
}

/// Numerical rank: number of singular values above
/// sigma_max * max(rows, cols) * machine_eps * 64 (slack for solve error).
inline int numerical_rank(const Mat& m, Vec* singular_values = nullptr) {
  if (m.rows() == 0 || m.cols() == 0) return 0;
  Eigen::JacobiSVD<Mat> svd(m);
  const Vec& sv = svd.singularValues();
  if (singular_values) *singular_values = sv;
  const double thresh = sv(0) * std::max(m.rows(), m.cols()) *
                        std::numeric_limits<double>::epsilon() * 64.0;
  int rank = 0;
  for (int i = 0; i < sv.size(); ++i)
    if (sv(i) > thresh) ++rank;
  return rank;
}

}  // namespace fblab::cmp
