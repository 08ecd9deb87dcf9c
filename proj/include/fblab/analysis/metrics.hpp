#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "fblab/cmp/cmp.hpp"
#include "fblab/cmp/oracle.hpp"
#include "fblab/core/error.hpp"
#include "fblab/latent/latent.hpp"
#include "fblab/model/model.hpp"

namespace fblab::analysis {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

/// Which oracle the Q / policy metrics compare against: the value-iteration
/// optimum of the decoded reward, or the fixed behavioral policy's Q.
enum class OracleMode { optimal, behavioral };

struct MetricsValues {
  double eps_smr = 0.0;
  double eps_q = 0.0;
  double kl_policy = 0.0;
  double eps_equiv = 0.0;
};

/// Everything an evaluation pass needs besides the model: environment, state
/// -action weighting, oracle mode, the fixed evaluation latents (raw, one per
/// row), and the per-latent equivariance coefficients.
struct EvalContext {
  cmp::Cmp env;
  Vec rho;
  OracleMode mode = OracleMode::optimal;
  cmp::Policy behavioral;  // used in behavioral mode
  Mat m_behavioral;        // successor measure of the behavioral policy
  double tau_eval = 1.0;
  Mat eval_z;              // nz x d raw latents
  Vec nu, xi;              // equivariance coefficients, one pair per latent

  static EvalContext make(const cmp::Cmp& env, const Vec& rho, OracleMode mode,
                          double tau_eval, Mat eval_z, Vec nu, Vec xi) {
    EvalContext c;
    c.env = env;
    c.rho = rho;
    c.mode = mode;
    c.tau_eval = tau_eval;
    c.eval_z = std::move(eval_z);
    c.nu = std::move(nu);
    c.xi = std::move(xi);
    if (mode == OracleMode::behavioral) {
      c.behavioral = cmp::uniform_policy(env.num_states, env.num_actions);
      c.m_behavioral = cmp::successor_measure(env, c.behavioral);
    }
    return c;
  }
};

/// Per-latent equivariance coefficients: nu ~ U(0.5, 2), xi ~ U(-1, 1).
inline void sample_equiv_coefficients(int count, core::SplitMix64& rng, Vec& nu, Vec& xi) {
  nu.resize(count);
  xi.resize(count);
  for (int i = 0; i < count; ++i) {
    nu(i) = rng.uniform(0.5, 2.0);
    xi(i) = rng.uniform(-1.0, 1.0);
  }
}

namespace detail {

inline int eval_thread_count(int latents) {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw < 1) hw = 1;
  if (const char* env = std::getenv("FBLAB_THREADS")) {
    try {
      const int cap = std::stoi(env);
      if (cap >= 1) hw = std::min(hw, cap);
    } catch (const std::exception&) {
      // Unparseable cap: ignore, keep hardware default.
    }
  }
  return std::max(1, std::min(hw, latents));
}

/// Forward KL between two per-state action distributions, probabilities
/// floored at 1e-12 inside the logs only.
inline double state_kl(const Eigen::Ref<const Eigen::RowVectorXd>& p,
                       const Eigen::Ref<const Eigen::RowVectorXd>& q) {
  constexpr double kFloor = 1e-12;
  double acc = 0.0;
  for (Eigen::Index a = 0; a < p.size(); ++a)
    acc += p(a) * (std::log(std::max(p(a), kFloor)) - std::log(std::max(q(a), kFloor)));
  return acc;
}

/// One latent's worth of metric terms. ForwardFn: raw latent -> F matrix.
template <class ForwardFn>
inline void eval_one_latent(const ForwardFn& f_of_z, const Mat& b, const EvalContext& ctx,
                            const Mat& behavioral_target, const latent::RewardLatentSolver* solver,
                            const Vec& z_one, int i, double& smr, double& q_err, double& kl,
                            double& equiv) {
  const Vec z = ctx.eval_z.row(i).transpose();
  const Mat f = f_of_z(z);
  const Vec scores = f * z;
  const cmp::Policy induced =
      cmp::softmax_policy(scores, ctx.tau_eval, ctx.env.num_states, ctx.env.num_actions);

  if (ctx.mode == OracleMode::optimal) {
    const Mat target = cmp::successor_measure(ctx.env, induced) *
                       ctx.rho.cwiseInverse().asDiagonal();
    smr = (f * b - target).squaredNorm();
  } else {
    smr = (f * b - behavioral_target).squaredNorm();
  }

  if (solver != nullptr) {
    const Vec r = solver->reward(z);
    Vec q_oracle;
    if (ctx.mode == OracleMode::optimal)
      q_oracle = cmp::value_iteration(ctx.env, r, cmp::ViMode::optimal);
    else
      q_oracle = ctx.m_behavioral * r;
    q_err = (scores - q_oracle).squaredNorm();
    const cmp::Policy ref = cmp::softmax_policy(q_oracle, ctx.tau_eval, ctx.env.num_states,
                                                ctx.env.num_actions);
    double acc = 0.0;
    for (int s = 0; s < ctx.env.num_states; ++s)
      acc += state_kl(induced.probs.row(s), ref.probs.row(s));
    kl = acc / static_cast<double>(ctx.env.num_states);
  } else {
    q_err = std::numeric_limits<double>::quiet_NaN();
    kl = std::numeric_limits<double>::quiet_NaN();
  }

  const Vec z_shift = ctx.nu(i) * z + ctx.xi(i) * z_one;
  const Vec q_shift = f_of_z(z_shift) * z_shift;
  const Vec expected = ctx.nu(i) * scores + Vec::Constant(scores.size(), ctx.xi(i));
  equiv = (q_shift - expected).squaredNorm();
}

/// Mean metrics over the evaluation latents. Fans out across latents when
/// FBLAB_THREADS permits; the reduction order is fixed regardless.
template <class ForwardFn>
inline MetricsValues evaluate_core(const ForwardFn& f_of_z, const Mat& b,
                                   const EvalContext& ctx) {
  const int nz = static_cast<int>(ctx.eval_z.rows());
  if (nz < 1) throw ConfigError("evaluate_metrics: empty evaluation latent set");
  if (ctx.nu.size() != nz || ctx.xi.size() != nz)
    throw ConfigError("evaluate_metrics: equivariance coefficient count mismatch");

  Mat behavioral_target;
  if (ctx.mode == OracleMode::behavioral)
    behavioral_target = ctx.m_behavioral * ctx.rho.cwiseInverse().asDiagonal();

  // Reward decoding needs a square, well-conditioned B.
  std::optional<latent::RewardLatentSolver> solver;
  if (b.rows() == b.cols()) solver.emplace(b, ctx.rho);
  const latent::RewardLatentSolver* solver_ptr =
      solver.has_value() && solver->usable() ? &*solver : nullptr;

  const Vec z_one = b * ctx.rho;

  std::vector<double> smr(static_cast<std::size_t>(nz)), q(static_cast<std::size_t>(nz)),
      kl(static_cast<std::size_t>(nz)), equiv(static_cast<std::size_t>(nz));
  const int threads = eval_thread_count(nz);
  auto worker = [&](int lo, int hi) {
    for (int i = lo; i < hi; ++i)
      eval_one_latent(f_of_z, b, ctx, behavioral_target, solver_ptr, z_one, i,
                      smr[static_cast<std::size_t>(i)], q[static_cast<std::size_t>(i)],
                      kl[static_cast<std::size_t>(i)], equiv[static_cast<std::size_t>(i)]);
  };
  if (threads == 1) {
    worker(0, nz);
  } else {
    std::vector<std::thread> pool;
    const int chunk = (nz + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
      const int lo = t * chunk;
      const int hi = std::min(nz, lo + chunk);
      if (lo < hi) pool.emplace_back(worker, lo, hi);
    }
    for (std::thread& th : pool) th.join();
  }

  MetricsValues out;
  double s_smr = 0.0, s_q = 0.0, s_kl = 0.0, s_eq = 0.0;
  for (int i = 0; i < nz; ++i) {
    s_smr += smr[static_cast<std::size_t>(i)];
    s_q += q[static_cast<std::size_t>(i)];
    s_kl += kl[static_cast<std::size_t>(i)];
    s_eq += equiv[static_cast<std::size_t>(i)];
  }
  out.eps_smr = s_smr / nz;
  out.eps_q = s_q / nz;
  // Clamp rounding-level negative KL to zero, but let NaN (decode
  // unavailable) pass through instead of masquerading as a perfect match.
  const double mean_kl = s_kl / nz;
  out.kl_policy = std::isnan(mean_kl) ? mean_kl : std::max(0.0, mean_kl);
  out.eps_equiv = s_eq / nz;
  return out;
}

}  // namespace detail

inline MetricsValues evaluate_metrics(const model::FbModel& m, const EvalContext& ctx) {
  return detail::evaluate_core([&m](const Vec& z) { return m.forward_matrix(z); },
                               m.backward_matrix(), ctx);
}

inline MetricsValues evaluate_metrics(const model::OneStepModel& m, const EvalContext& ctx) {
  const Mat f = m.forward_matrix();
  return detail::evaluate_core([&f](const Vec&) { return f; }, m.backward_matrix(), ctx);
}

/// Latent-free linearity identity: for a fixed linear head, the prediction at
/// nu z + xi z_one minus (nu Q(z) + xi Q(z_one)) vanishes to roundoff. This
/// isolates what linearity alone guarantees, independent of whether Q(z_one)
/// equals the all-ones vector.
inline double equiv_linearity_residual(const Mat& f, const Mat& eval_z, const Vec& nu,
                                       const Vec& xi, const Vec& z_one) {
  double acc = 0.0;
  const Vec q_one = f * z_one;
  for (Eigen::Index i = 0; i < eval_z.rows(); ++i) {
    const Vec z = eval_z.row(i).transpose();
    const Vec lhs = f * (nu(i) * z + xi(i) * z_one);
    acc += (lhs - nu(i) * (f * z) - xi(i) * q_one).squaredNorm();
  }
  return acc / static_cast<double>(eval_z.rows());
}

}  // namespace fblab::analysis
