#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <cmath>

#include "fblab/cmp/cmp.hpp"
#include "fblab/core/error.hpp"
#include "fblab/core/rng.hpp"

namespace fblab::latent {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

enum class PriorVariant { cauchy_scaled, sphere };

/// A batch of task latents, one per row.
struct LatentBatch {
  Mat z;  // n x d
  PriorVariant variant = PriorVariant::cauchy_scaled;
  bool preprocessed = false;

  int count() const { return static_cast<int>(z.rows()); }
  int dim() const { return static_cast<int>(z.cols()); }
};

/// Core latent constructor shared by both prior variants: a Gaussian
/// direction x scaled onto the sqrt(d)-sphere, then stretched by u
/// (u = 1 for the sphere prior, u ~ Cauchy(0, 0.5) for the scaled prior):
///   z = sqrt(d) * u * x / ||x||.
inline Vec make_latent(const Vec& x, double u) {
  const double norm = x.norm();
  if (!(norm > 0.0)) throw NumericError("make_latent: zero direction vector");
  return (std::sqrt(static_cast<double>(x.size())) * u / norm) * x;
}

/// Samples n latents of dimension d. The sphere variant places every row on
/// the radius-sqrt(d) sphere; cauchy_scaled stretches each row by an
/// independent Cauchy(0, 0.5) factor. Deterministic given the generator state.
inline LatentBatch sample_prior(int d, int n, PriorVariant variant, core::SplitMix64& rng) {
  if (d < 1 || n < 1) throw ConfigError("sample_prior: d and n must be >= 1");
  LatentBatch batch;
  batch.variant = variant;
  batch.z = Mat::Zero(n, d);
  Vec x(d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) x(j) = rng.normal();
    const double u = variant == PriorVariant::sphere ? 1.0 : rng.cauchy(0.5);
    batch.z.row(i) = make_latent(x, u).transpose();
  }
  return batch;
}

/// Bijective squashing map z / sqrt(1 + ||z||^2 / d): sends all of R^d into
/// the open ball of radius sqrt(d). Applied to latents before they enter the
/// forward network; the raw latent is kept for all linear algebra.
inline Vec preprocess_latent(const Vec& z) {
  const double d = static_cast<double>(z.size());
  return z / std::sqrt(1.0 + z.squaredNorm() / d);
}

inline Mat preprocess_rows(const Mat& z) {
  Mat out(z.rows(), z.cols());
  const double d = static_cast<double>(z.cols());
  for (int i = 0; i < z.rows(); ++i)
    out.row(i) = z.row(i) / std::sqrt(1.0 + z.row(i).squaredNorm() / d);
  return out;
}

/// Task inference: z_r = B * (r .* rho), the rho-weighted backward embedding
/// of the reward vector.
inline Vec reward_to_latent(const Mat& b, const Vec& r, const Vec& rho) {
  if (b.cols() != r.size() || r.size() != rho.size())
    throw ConfigError("reward_to_latent: dimension mismatch");
  return b * r.cwiseProduct(rho);
}

/// Inverts reward_to_latent when d = |S*A| and B is well-conditioned.
/// Factored once so a fixed B can decode many latents cheaply.
class RewardLatentSolver {
 public:
  RewardLatentSolver(const Mat& b, const Vec& rho)
      : rho_(rho), svd_(b, Eigen::ComputeThinU | Eigen::ComputeThinV) {
    if (b.rows() != b.cols()) throw ConfigError("latent_to_reward: B must be square (d = |S*A|)");
    if (b.cols() != rho.size()) throw ConfigError("latent_to_reward: rho dimension mismatch");
    const Vec& sv = svd_.singularValues();
    const double smin = sv(sv.size() - 1);
    cond_ = smin > 0.0 ? sv(0) / smin : std::numeric_limits<double>::infinity();
  }

  double condition_number() const { return cond_; }
  bool usable() const { return cond_ <= 1e12; }

  /// r = (B^{-1} z) ./ rho.
  Vec reward(const Vec& z) const {
    if (!usable())
      throw NumericError("latent_to_reward: B is singular or ill-conditioned (cond > 1e12)");
    return svd_.solve(z).cwiseQuotient(rho_);
  }

 private:
  Vec rho_;
  Eigen::JacobiSVD<Mat> svd_;
  double cond_ = 0.0;
};

inline Vec latent_to_reward(const Mat& b, const Vec& z, const Vec& rho) {
  return RewardLatentSolver(b, rho).reward(z);
}

/// Softmax reweighting of reward samples: w = softmax(tau_reward * r),
/// output r~_i = w_i * r_i. Stabilized by max subtraction.
inline Vec reward_weighting(const Vec& rewards, double tau_reward) {
  if (!(tau_reward > 0.0)) throw ConfigError("reward_weighting: tau_reward must be positive");
  if (!rewards.allFinite()) throw NumericError("reward_weighting: non-finite rewards");
  const double mx = (tau_reward * rewards).maxCoeff();
  Vec w = (tau_reward * rewards).array() - mx;
  w = w.array().exp();
  w /= w.sum();
  return w.cwiseProduct(rewards);
}

/// Row-wise Bernoulli mixture: each output row comes from `derived` with
/// probability p, otherwise from `prior` (row indices advance independently
/// per source, consuming one uniform per output row).
inline LatentBatch mix_latents(const LatentBatch& prior, const LatentBatch& derived,
                               double p, core::SplitMix64& rng) {
  if (prior.dim() != derived.dim()) throw ConfigError("mix_latents: dimension mismatch");
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("mix_latents: p must lie in [0, 1]");
  const int n = prior.count();
  LatentBatch out;
  out.variant = prior.variant;
  out.z = Mat::Zero(n, prior.dim());
  int from_derived = 0, from_prior = 0;
  for (int i = 0; i < n; ++i) {
    if (rng.uniform() < p && derived.count() > 0) {
      out.z.row(i) = derived.z.row(from_derived % derived.count());
      ++from_derived;
    } else {
      out.z.row(i) = prior.z.row(from_prior % prior.count());
      ++from_prior;
    }
  }
  return out;
}

/// Derived latents for mixing: normalized, rescaled backward columns
/// sqrt(d) * B(s,a) / ||B(s,a)|| for the given flat (s,a) indices.
inline LatentBatch derived_latents_from_backward(const Mat& b,
                                                 const std::vector<int>& flat_indices) {
  LatentBatch out;
  const int d = static_cast<int>(b.rows());
  out.z = Mat::Zero(static_cast<int>(flat_indices.size()), d);
  for (std::size_t i = 0; i < flat_indices.size(); ++i) {
    const Vec col = b.col(flat_indices[i]);
    out.z.row(static_cast<int>(i)) = make_latent(col, 1.0).transpose();
  }
  return out;
}

}  // namespace fblab::latent
