#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <vector>

#include "fblab/cmp/cmp.hpp"
#include "fblab/cmp/oracle.hpp"
#include "fblab/core/error.hpp"
#include "fblab/core/rng.hpp"
#include "fblab/model/model.hpp"

namespace fblab::analysis {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

struct RankReport {
  int rank = 0;
  Vec singular_values;
};

inline RankReport rank_report(const Mat& m) {
  RankReport r;
  r.rank = cmp::numerical_rank(m, &r.singular_values);
  return r;
}

/// Moore-Penrose pseudoinverse with the repo's numerical-rank threshold.
inline Mat pseudoinverse(const Mat& m) {
  Eigen::JacobiSVD<Mat> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vec& sv = svd.singularValues();
  const double tol = sv.size() == 0
                         ? 0.0
                         : sv(0) * static_cast<double>(std::max(m.rows(), m.cols())) *
                               std::numeric_limits<double>::epsilon() * 64.0;
  Vec inv = Vec::Zero(sv.size());
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) > tol) inv(i) = 1.0 / sv(i);
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

struct PseudoinvReport {
  double max_pairwise = 0.0;  // Frobenius distance between per-latent results
  double max_vs_b = 0.0;      // Frobenius distance of each result to B
};

/// Per probe latent, the pseudoinverse of the forward matrix applied to the
/// induced-greedy successor ratio should reproduce one shared backward
/// matrix. ForwardFn: raw latent -> F matrix.
template <class ForwardFn>
inline PseudoinvReport pseudoinverse_consistency(const ForwardFn& f_of_z, const Mat& b,
                                                 const cmp::Cmp& c, const Mat& probes,
                                                 const Vec& rho) {
  if (probes.rows() < 1) throw ConfigError("pseudoinverse_consistency: no probe latents");
  const Mat inv_rho = rho.cwiseInverse().asDiagonal();
  std::vector<Mat> results;
  results.reserve(static_cast<std::size_t>(probes.rows()));
  for (Eigen::Index i = 0; i < probes.rows(); ++i) {
    const Vec z = probes.row(i).transpose();
    const Mat f = f_of_z(z);
    const cmp::Policy pol =
        cmp::greedy_policy(f * z, c.num_states, c.num_actions);
    const Mat m = cmp::successor_measure(c, pol);
    results.push_back(pseudoinverse(f) * m * inv_rho);
  }
  PseudoinvReport rep;
  for (std::size_t i = 0; i < results.size(); ++i) {
    rep.max_vs_b = std::max(rep.max_vs_b, (results[i] - b).norm());
    for (std::size_t j = i + 1; j < results.size(); ++j)
      rep.max_pairwise = std::max(rep.max_pairwise, (results[i] - results[j]).norm());
  }
  return rep;
}

struct NullRewardResult {
  Vec r_null;
  double z_norm = 0.0;          // |B (r_null . rho)|, should vanish
  double achieved_error = 0.0;  // sup norm of the oracle Q the model misses
  double scale = 0.0;
};

/// For a rank-deficient backward matrix (d < n), constructs a reward in the
/// null space of B diag(rho): its latent is zero, so the model's Q prediction
/// is identically zero while the true optimal Q grows linearly in the scale.
inline NullRewardResult null_reward_attack(const Mat& b, const Vec& rho, const cmp::Cmp& c,
                                           double scale) {
  const int n = c.num_pairs();
  if (b.cols() != n) throw ConfigError("null_reward_attack: B has wrong column count");
  if (b.rows() >= n)
    throw ConfigError("null_reward_attack: requires d < n (rank-deficient B)");
  const Mat w = b * rho.asDiagonal();
  Eigen::JacobiSVD<Mat> svd(w, Eigen::ComputeFullV);
  const Vec v = svd.matrixV().col(n - 1);  // unit null direction
  if ((w * v).norm() > 1e-8)
    throw NumericError("null_reward_attack: null space not found");
  NullRewardResult out;
  out.scale = scale;
  out.r_null = scale * v;
  out.z_norm = (b * out.r_null.cwiseProduct(rho)).norm();
  const Vec q = cmp::value_iteration(c, out.r_null, cmp::ViMode::optimal);
  out.achieved_error = q.cwiseAbs().maxCoeff();
  return out;
}

/// Scale that pushes the attack's oracle error to at least `target_error`.
inline double null_attack_scale(const Mat& b, const Vec& rho, const cmp::Cmp& c,
                                double target_error) {
  const NullRewardResult probe = null_reward_attack(b, rho, c, 1.0);
  if (probe.achieved_error <= 0.0)
    throw NumericError("null_attack_scale: degenerate null reward (zero oracle Q)");
  return target_error / probe.achieved_error;
}

struct WitnessRecord {
  bool found = false;
  int tries = 0;
  Mat q_rot, f1, b1;
  Vec z;
  int flip_state = -1;
  double lhs_norm = 0.0;  // sup distance between operator outputs
  double rhs_norm = 0.0;  // sup distance between operator inputs
};

/// Searches for two factorizations of the same ratio matrix whose induced
/// greedy policies differ, so the representation-level Bellman backup maps
/// equal inputs to different outputs — the operator cannot be a contraction
/// in any norm. Uses d = n and an orthonormal latent rotation.
inline WitnessRecord noncontraction_witness(const cmp::Cmp& c, const Vec& rho,
                                            core::SplitMix64& rng, int max_tries) {
  WitnessRecord rec;
  const int n = c.num_pairs();
  if (c.num_actions < 2) {
    rec.tries = 0;
    return rec;  // argmax over one action can never flip
  }
  for (int t = 1; t <= max_tries; ++t) {
    rec.tries = t;
    Mat f1(n, n), b1(n, n);
    for (Eigen::Index i = 0; i < f1.size(); ++i) f1.data()[i] = rng.normal();
    for (Eigen::Index i = 0; i < b1.size(); ++i) b1.data()[i] = rng.normal();
    Vec z(n);
    for (int i = 0; i < n; ++i) z(i) = rng.normal();
    const Mat q_rot = model::random_rotation(n, rng);
    const Mat f2 = f1 * q_rot.transpose();
    const Mat b2 = q_rot * b1;

    const Vec scores1 = f1 * z;
    const Vec scores2 = f2 * z;
    int flip = -1;
    for (int s = 0; s < c.num_states && flip < 0; ++s)
      if (cmp::greedy_action(scores1, s, c.num_actions) !=
          cmp::greedy_action(scores2, s, c.num_actions))
        flip = s;
    if (flip < 0) continue;

    const double rhs = (f1 * b1 - f2 * b2).cwiseAbs().maxCoeff();
    const Mat t1 = cmp::fb_bellman_operator(f1, b1, c, rho, z);
    const Mat t2 = cmp::fb_bellman_operator(f2, b2, c, rho, z);
    const double lhs = (t1 - t2).cwiseAbs().maxCoeff();
    if (rhs <= 1e-12 && lhs > 1e-6) {
      rec.found = true;
      rec.q_rot = q_rot;
      rec.f1 = std::move(f1);
      rec.b1 = std::move(b1);
      rec.z = std::move(z);
      rec.flip_state = flip;
      rec.lhs_norm = lhs;
      rec.rhs_norm = rhs;
      return rec;
    }
  }
  return rec;
}

/// Minimum Frobenius-squared error of any rank-d approximation of the target:
/// the tail sum of squared singular values beyond the first d.
inline double eckart_young_floor(const Mat& target, int d) {
  Eigen::JacobiSVD<Mat> svd(target);
  const Vec& sv = svd.singularValues();
  double acc = 0.0;
  for (Eigen::Index i = d; i < sv.size(); ++i) acc += sv(i) * sv(i);
  return acc;
}

}  // namespace fblab::analysis
