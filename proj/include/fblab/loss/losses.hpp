#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <vector>

#include "fblab/cmp/cmp.hpp"
#include "fblab/cmp/oracle.hpp"
#include "fblab/core/error.hpp"
#include "fblab/core/rng.hpp"
#include "fblab/grad/tape.hpp"
#include "fblab/latent/latent.hpp"
#include "fblab/model/model.hpp"

namespace fblab::loss {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using grad::Act;
using grad::Tape;

// ---------------------------------------------------------------------------
// Targets and pure loss values
// ---------------------------------------------------------------------------

/// Successor-measure ratio of a policy: M^pi diag(rho)^{-1}.
inline Mat ratio_target(const cmp::Cmp& c, const cmp::Policy& policy, const Vec& rho) {
  return cmp::successor_measure(c, policy) * rho.cwiseInverse().asDiagonal();
}

/// Frobenius-squared regression of F B against a fixed ratio matrix.
inline double mc_onestep_loss_value(const Mat& f, const Mat& b, const Mat& target) {
  return (f * b - target).squaredNorm();
}

/// Latent-conditioned regression: mean over the latent batch (rows of z_raw)
/// of the Frobenius-squared error of F_z B against the ratio of the policy
/// the model itself induces at the training temperature. The target is a
/// function of the current parameters but treated as a constant (no gradient
/// flows through it); this evaluator returns the value only.
inline double mc_fb_loss_value(const model::FbModel& m, const cmp::Cmp& c, const Mat& z_raw,
                               const Vec& rho) {
  if (z_raw.cols() != m.d) throw ConfigError("mc_fb_loss_value: latent dim mismatch");
  const Mat b = m.backward_matrix();
  const Mat inv_rho = rho.cwiseInverse().asDiagonal();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < z_raw.rows(); ++i) {
    const Vec z = z_raw.row(i).transpose();
    const Mat f = m.forward_matrix(z);
    const cmp::Policy pol = model::induced_policy(f, z, m.tau_policy_train, c.num_states,
                                                  c.num_actions);
    const Mat target = cmp::successor_measure(c, pol) * inv_rho;
    acc += (f * b - target).squaredNorm();
  }
  return acc / static_cast<double>(z_raw.rows());
}

/// Orthonormality regularizer, computed exactly: the rho x rho expectation of
/// squared column dot products minus twice the rho expectation of squared
/// column norms (columns of B index state-action pairs).
inline double ortho_loss_value(const Mat& b, const Vec& rho) {
  if (b.cols() != rho.size()) throw ConfigError("ortho_loss_value: shape mismatch");
  const Mat g = b.transpose() * b;
  const Vec sr = rho.cwiseSqrt();
  const double term1 = (sr * sr.transpose()).cwiseProduct(g).squaredNorm();
  const double term2 = rho.dot(g.diagonal());
  return term1 - 2.0 * term2;
}

// ---------------------------------------------------------------------------
// Behavioral dataset
// ---------------------------------------------------------------------------

struct Transition {
  int s = 0, a = 0, s_next = 0, a_next = 0;
};

struct Dataset {
  std::vector<Transition> items;
};

namespace detail {

/// Samples an index from a non-negative weight row that sums to ~1.
template <class Row>
inline int sample_index(const Row& weights, core::SplitMix64& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  int last_positive = 0;
  for (Eigen::Index i = 0; i < weights.size(); ++i) {
    const double w = weights(i);
    if (w > 0.0) last_positive = static_cast<int>(i);
    acc += w;
    if (u < acc) return static_cast<int>(i);
  }
  return last_positive;
}

}  // namespace detail

/// Behavioral-policy rollouts. Chains restart from the initial distribution
/// with probability 1 - gamma per step, so the visitation matches the
/// discounted occupancy and absorbing states cannot capture the stream. Each
/// stored tuple's next action is drawn from the behavioral policy.
inline Dataset generate_dataset(const cmp::Cmp& c, const cmp::Policy& behavioral, int n,
                                core::SplitMix64& rng) {
  if (n < 1) throw ConfigError("generate_dataset: need n >= 1");
  Dataset out;
  out.items.reserve(static_cast<std::size_t>(n));
  int s = detail::sample_index(c.initial_dist, rng);
  int a = detail::sample_index(behavioral.probs.row(s), rng);
  while (static_cast<int>(out.items.size()) < n) {
    const int s_next = detail::sample_index(c.transition.row(cmp::flat_index(s, a, c.num_actions)), rng);
    const int a_next = detail::sample_index(behavioral.probs.row(s_next), rng);
    out.items.push_back({s, a, s_next, a_next});
    if (rng.uniform() < 1.0 - c.gamma) {
      s = detail::sample_index(c.initial_dist, rng);
      a = detail::sample_index(behavioral.probs.row(s), rng);
    } else {
      s = s_next;
      a = a_next;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Temporal-difference batches
// ---------------------------------------------------------------------------

/// Index form of a TD batch: flat current pair, flat next pair, flat future
/// pair, and a weight per tuple (1/m for sampled batches, joint probabilities
/// for exhaustive enumeration).
struct TdBatch {
  std::vector<int> current, next, future;
  Vec weights;
  int size() const { return static_cast<int>(current.size()); }
};

/// Enumerates every positive-probability (current, next, future) tuple under
/// a distribution mu over current pairs, the given next-action policy, and
/// future pairs drawn from rho.
inline TdBatch exhaustive_td_batch(const cmp::Cmp& c, const Vec& mu,
                                   const cmp::Policy& next_policy, const Vec& rho) {
  const int n = c.num_pairs();
  if (mu.size() != n || rho.size() != n)
    throw ConfigError("exhaustive_td_batch: weight vector size mismatch");
  TdBatch b;
  std::vector<double> w;
  for (int sa = 0; sa < n; ++sa) {
    if (mu(sa) <= 0.0) continue;
    const int s = cmp::state_of(sa, c.num_actions);
    const int a = cmp::action_of(sa, c.num_actions);
    for (int sn = 0; sn < c.num_states; ++sn) {
      const double p = c.p(s, a, sn);
      if (p <= 0.0) continue;
      for (int an = 0; an < c.num_actions; ++an) {
        const double pi = next_policy.probs(sn, an);
        if (pi <= 0.0) continue;
        for (int xf = 0; xf < n; ++xf) {
          if (rho(xf) <= 0.0) continue;
          b.current.push_back(sa);
          b.next.push_back(cmp::flat_index(sn, an, c.num_actions));
          b.future.push_back(xf);
          w.push_back(mu(sa) * p * pi * rho(xf));
        }
      }
    }
  }
  b.weights = Eigen::Map<const Vec>(w.data(), static_cast<Eigen::Index>(w.size()));
  return b;
}

/// Bootstrap constants gamma * Ft(next pair, :) . Bt(:, future pair) computed
/// from the target factors; the differentiable loss treats them as data.
inline Vec td_targets(const Mat& ft, const Mat& bt, const std::vector<int>& next,
                      const std::vector<int>& future, double gamma) {
  Vec t(static_cast<Eigen::Index>(next.size()));
  for (std::size_t i = 0; i < next.size(); ++i)
    t(static_cast<Eigen::Index>(i)) =
        gamma * ft.row(next[i]).dot(bt.col(future[i]));
  return t;
}

/// Pure value of the TD objective on an index batch:
/// sum_t w_t [ 1/2 (F_row(cur) . B_col(fut) - tvec_t)^2 ]
///   - (1 - gamma) sum_t w_t F_row(cur) . B_col(cur).
inline double td_loss_value(const Mat& f, const Mat& b, const TdBatch& batch,
                            const Vec& tvec, double gamma) {
  double s1 = 0.0, s2 = 0.0;
  for (int t = 0; t < batch.size(); ++t) {
    const double pred = f.row(batch.current[static_cast<std::size_t>(t)])
                            .dot(b.col(batch.future[static_cast<std::size_t>(t)]));
    const double diff = pred - tvec(t);
    s1 += batch.weights(t) * diff * diff;
    s2 += batch.weights(t) * f.row(batch.current[static_cast<std::size_t>(t)])
                                 .dot(b.col(batch.current[static_cast<std::size_t>(t)]));
  }
  return 0.5 * s1 - (1.0 - gamma) * s2;
}

/// Exhaustive TD value with explicit target factors.
inline double exhaustive_td_loss_value(const Mat& f, const Mat& b, const Mat& ft,
                                       const Mat& bt, const cmp::Cmp& c, const Vec& mu,
                                       const cmp::Policy& next_policy, const Vec& rho) {
  const TdBatch batch = exhaustive_td_batch(c, mu, next_policy, rho);
  const Vec tvec = td_targets(ft, bt, batch.next, batch.future, c.gamma);
  return td_loss_value(f, b, batch, tvec, c.gamma);
}

// ---------------------------------------------------------------------------
// Polyak target updates
// ---------------------------------------------------------------------------

inline void polyak_update(model::OneStepModel& target, const model::OneStepModel& online,
                          double tau) {
  if (target.kind != online.kind || target.n != online.n || target.d != online.d)
    throw ConfigError("polyak_update: parameterization mismatch");
  auto lerp = [tau](auto& t, const auto& o) { t = (1.0 - tau) * t + tau * o; };
  if (target.kind == model::ParamKind::svd_cayley) {
    lerp(target.f_u_skew, online.f_u_skew);
    lerp(target.f_sv, online.f_sv);
    lerp(target.f_v_skew, online.f_v_skew);
    lerp(target.b_u_skew, online.b_u_skew);
    lerp(target.b_sv, online.b_sv);
    lerp(target.b_v_skew, online.b_v_skew);
  } else {
    lerp(target.f_mat, online.f_mat);
    lerp(target.b_mat, online.b_mat);
  }
}

inline void polyak_update(model::FbModel& target, const model::FbModel& online, double tau) {
  if (target.n != online.n || target.d != online.d)
    throw ConfigError("polyak_update: parameterization mismatch");
  auto lerp = [tau](auto& t, const auto& o) { t = (1.0 - tau) * t + tau * o; };
  const model::Mlp* on[3] = {&online.fwd_u, &online.fwd_sv, &online.fwd_v};
  model::Mlp* tg[3] = {&target.fwd_u, &target.fwd_sv, &target.fwd_v};
  for (int k = 0; k < 3; ++k)
    for (int l = 0; l < model::Mlp::kLayers; ++l) {
      lerp(tg[k]->w[static_cast<std::size_t>(l)], on[k]->w[static_cast<std::size_t>(l)]);
      lerp(tg[k]->b[static_cast<std::size_t>(l)], on[k]->b[static_cast<std::size_t>(l)]);
    }
  lerp(target.bwd_u_skew, online.bwd_u_skew);
  lerp(target.bwd_sv, online.bwd_sv);
  lerp(target.bwd_v_skew, online.bwd_v_skew);
}

// ---------------------------------------------------------------------------
// Differentiable graphs
// ---------------------------------------------------------------------------

namespace detail {

struct FactorNodes {
  int u_skew = -1, sv = -1, v_skew = -1, out = -1;
};

/// U Sigma V^T with learnable packed factors; rows x cols output, batch 1.
inline FactorNodes build_factor(Tape& t, const Eigen::RowVectorXd& u_skew,
                                const Eigen::RowVectorXd& sv,
                                const Eigen::RowVectorXd& v_skew, int rows, int cols) {
  FactorNodes f;
  f.u_skew = t.param(u_skew);
  f.sv = t.param(sv);
  f.v_skew = t.param(v_skew);
  const int u = t.cayley(t.skew_rows(f.u_skew, rows));
  const int v = t.cayley(t.skew_rows(f.v_skew, cols));
  const int sv_act = t.activation(f.sv, Act::softplus_floor);
  f.out = t.matmul(t.cols_scaled(u, sv_act, cols), v, false, true);
  return f;
}

struct MlpNodes {
  std::vector<int> w, b;
  int out = -1;
};

/// Shared MLP structure on a (batch x in) input matrix node.
inline MlpNodes build_mlp(Tape& t, const model::Mlp& m, int in_node) {
  MlpNodes r;
  int x = in_node;
  for (int l = 0; l < model::Mlp::kLayers; ++l) {
    r.w.push_back(t.param(m.w[static_cast<std::size_t>(l)]));
    r.b.push_back(t.param(m.b[static_cast<std::size_t>(l)]));
    x = t.add_rowvec(t.matmul(x, r.w.back()), r.b.back());
    if (l < model::Mlp::kLayers - 1) x = t.activation(x, Act::gelu);
  }
  r.out = x;
  return r;
}

/// Exact orthonormality regularizer on a (d x n) backward node.
inline int attach_ortho(Tape& t, int b_node, const Vec& rho) {
  const Vec sr = rho.cwiseSqrt();
  const int g = t.matmul(b_node, b_node, true, false);
  const int t1 = t.frob_sq(t.mul(g, t.constant(sr * sr.transpose())));
  const int bd = t.matmul(b_node, t.constant(Mat(sr.asDiagonal())));
  const int t2 = t.frob_sq(bd);
  return t.sub(t1, t.scale(t2, 2.0));
}

/// loss = main + lambda * ortho(b_node), skipping the subgraph at lambda = 0.
inline int combine_with_ortho(Tape& t, int main_loss, int b_node, double lambda,
                              const Vec& rho) {
  if (lambda == 0.0) return main_loss;
  return t.add(main_loss, t.scale(attach_ortho(t, b_node, rho), lambda));
}

/// Weighted TD objective over gathered row-column dot products.
struct TdLossNodes {
  int d_main = -1;   // rowdot_gather for (current, future)
  int d_diag = -1;   // rowdot_gather for (current, current)
  int tvec = -1, w = -1, loss = -1;
};

inline TdLossNodes build_td_loss(Tape& t, int f_node, int b_node, int batch_size,
                                 double gamma) {
  TdLossNodes r;
  const int bt = t.transpose(b_node);
  const std::vector<int> zeros(static_cast<std::size_t>(batch_size), 0);
  r.d_main = t.rowdot_gather(f_node, bt, zeros, zeros);
  r.d_diag = t.rowdot_gather(f_node, bt, zeros, zeros);
  r.tvec = t.constant(Mat::Zero(batch_size, 1));
  r.w = t.constant(Mat::Constant(batch_size, 1, 1.0 / batch_size));
  const int diff = t.sub(r.d_main, r.tvec);
  const int s1 = t.sum(t.mul(t.mul(diff, diff), r.w));
  const int s2 = t.sum(t.mul(r.d_diag, r.w));
  r.loss = t.sub(t.scale(s1, 0.5), t.scale(s2, 1.0 - gamma));
  return r;
}

}  // namespace detail

/// Supervised regression graph for the latent-free model: |F B - target|_F^2
/// (+ lambda * ortho). No per-step inputs — one step is forward + backward.
class OneStepMcGraph {
 public:
  OneStepMcGraph(const model::OneStepModel& m, const Mat& target, double lambda_ortho,
                 const Vec& rho)
      : kind_(m.kind) {
    if (target.rows() != m.n || target.cols() != m.n)
      throw ConfigError("OneStepMcGraph: target must be n x n");
    build_params(m);
    const int prod = tape_.matmul(f_node_, b_node_);
    const int err = tape_.sub(prod, tape_.constant(target));
    const int main = tape_.frob_sq(err);
    loss_ = detail::combine_with_ortho(tape_, main, b_node_, lambda_ortho, rho);
  }

  Tape& tape() { return tape_; }
  int loss_id() const { return loss_; }
  const std::vector<int>& params() const { return params_; }

  double forward_loss() {
    tape_.forward();
    return tape_.scalar(loss_);
  }
  void backward() { tape_.backward(loss_); }

  const Mat& forward_value() const { return tape_.value(f_node_); }
  const Mat& backward_value() const { return tape_.value(b_node_); }

  void sync_to(model::OneStepModel& out) const {
    if (out.kind != kind_) throw ConfigError("sync_to: parameterization mismatch");
    if (kind_ == model::ParamKind::svd_cayley) {
      out.f_u_skew = tape_.value(f_factor_.u_skew).row(0);
      out.f_sv = tape_.value(f_factor_.sv).row(0);
      out.f_v_skew = tape_.value(f_factor_.v_skew).row(0);
      out.b_u_skew = tape_.value(b_factor_.u_skew).row(0);
      out.b_sv = tape_.value(b_factor_.sv).row(0);
      out.b_v_skew = tape_.value(b_factor_.v_skew).row(0);
    } else {
      out.f_mat = tape_.value(f_plain_);
      out.b_mat = tape_.value(b_plain_);
    }
  }

 protected:
  OneStepMcGraph() = default;

  void build_params(const model::OneStepModel& m) {
    if (m.kind == model::ParamKind::svd_cayley) {
      f_factor_ = detail::build_factor(tape_, m.f_u_skew, m.f_sv, m.f_v_skew, m.n, m.d);
      b_factor_ = detail::build_factor(tape_, m.b_u_skew, m.b_sv, m.b_v_skew, m.d, m.n);
      f_node_ = f_factor_.out;
      b_node_ = b_factor_.out;
      params_ = {f_factor_.u_skew, f_factor_.sv, f_factor_.v_skew,
                 b_factor_.u_skew, b_factor_.sv, b_factor_.v_skew};
    } else {
      f_plain_ = tape_.param(m.f_mat);
      b_plain_ = tape_.param(m.b_mat);
      f_node_ = f_plain_;
      b_node_ = b_plain_;
      params_ = {f_plain_, b_plain_};
    }
  }

  Tape tape_;
  model::ParamKind kind_ = model::ParamKind::plain;
  detail::FactorNodes f_factor_, b_factor_;
  int f_plain_ = -1, b_plain_ = -1;
  int f_node_ = -1, b_node_ = -1;
  int loss_ = -1;
  std::vector<int> params_;
};

/// TD graph for the latent-free model. Per step: set_batch with gathered
/// indices, precomputed bootstrap constants, and tuple weights.
class OneStepTdGraph : public OneStepMcGraph {
 public:
  OneStepTdGraph(const model::OneStepModel& m, int batch_size, double gamma,
                 double lambda_ortho, const Vec& rho)
      : batch_(batch_size) {
    if (batch_size < 1) throw ConfigError("OneStepTdGraph: empty batch");
    kind_ = m.kind;
    build_params(m);
    td_ = detail::build_td_loss(tape_, f_node_, b_node_, batch_size, gamma);
    loss_ = detail::combine_with_ortho(tape_, td_.loss, b_node_, lambda_ortho, rho);
  }

  void set_batch(const TdBatch& b, const Vec& tvec) {
    if (b.size() != batch_ || tvec.size() != batch_)
      throw ConfigError("OneStepTdGraph: batch size mismatch");
    tape_.set_gather(td_.d_main, b.current, b.future);
    tape_.set_gather(td_.d_diag, b.current, b.current);
    tape_.leaf_item(td_.tvec) = tvec;
    tape_.leaf_item(td_.w) = b.weights;
  }

 private:
  int batch_ = 0;
  detail::TdLossNodes td_;
};

/// Latent-conditioned MC graph. Two-phase stepping: set_latents and
/// forward_to_f first, then derive per-latent constant targets from the
/// current forward values, then finish_forward / backward.
class FbMcGraph {
 public:
  FbMcGraph(const model::FbModel& m, const cmp::Cmp& c, int latent_batch,
            double lambda_ortho, const Vec& rho)
      : env_(c), rho_(rho), n_(m.n), d_(m.d), nz_(latent_batch),
        tau_train_(m.tau_policy_train), inv_rho_diag_(rho.cwiseInverse().asDiagonal()) {
    if (latent_batch < 1) throw ConfigError("FbMcGraph: empty latent batch");
    zin_ = tape_.constant(Mat::Zero(nz_, d_));
    build_forward(m);
    build_backward(m);
    prod_ = tape_.matmul(f_node_, b_node_);
    std::vector<Mat> zero_targets(static_cast<std::size_t>(nz_), Mat::Zero(n_, n_));
    target_ = tape_.constant_slab(std::move(zero_targets));
    const int per_latent = tape_.frob_sq(tape_.sub(prod_, target_));
    const int main = tape_.batch_mean(per_latent);
    loss_ = detail::combine_with_ortho(tape_, main, b_node_, lambda_ortho, rho);
  }

  Tape& tape() { return tape_; }
  int loss_id() const { return loss_; }
  const std::vector<int>& params() const { return params_; }
  int latent_batch() const { return nz_; }

  /// Raw latents, one per row; the graph input takes the preprocessed form.
  void set_latents(const Mat& z_raw) {
    if (z_raw.rows() != nz_ || z_raw.cols() != d_)
      throw ConfigError("FbMcGraph: latent batch shape mismatch");
    z_raw_ = z_raw;
    tape_.set_value(zin_, latent::preprocess_rows(z_raw));
  }

  void forward_to_f() { tape_.forward_range(0, f_node_); }
  const std::vector<Mat>& f_values() const { return tape_.val(f_node_); }

  /// Derives the per-latent ratio targets from the current forward values
  /// (softmax policy at the training temperature, exact dense solve) and
  /// stores them as constants.
  void compute_and_set_targets() {
    for (int i = 0; i < nz_; ++i) {
      const Mat& f = tape_.val(f_node_)[static_cast<std::size_t>(i)];
      const Vec z = z_raw_.row(i).transpose();
      const cmp::Policy pol =
          model::induced_policy(f, z, tau_train_, env_.num_states, env_.num_actions);
      tape_.leaf_item(target_, i) = cmp::successor_measure(env_, pol) * inv_rho_diag_;
    }
  }

  void finish_forward() { tape_.forward_range(f_node_ + 1, tape_.size() - 1); }
  double loss_value() const { return tape_.scalar(loss_); }
  void backward() { tape_.backward(loss_); }

  /// Full MC objective at the current parameters for a given latent set.
  double loss_at(const Mat& z_raw) {
    set_latents(z_raw);
    forward_to_f();
    compute_and_set_targets();
    finish_forward();
    return loss_value();
  }

  void sync_to(model::FbModel& out) const {
    out.n = n_;
    out.d = d_;
    const detail::MlpNodes* nets[3] = {&u_net_, &sv_net_, &v_net_};
    model::Mlp* mlps[3] = {&out.fwd_u, &out.fwd_sv, &out.fwd_v};
    for (int k = 0; k < 3; ++k) {
      mlps[k]->w.clear();
      mlps[k]->b.clear();
      for (int l = 0; l < model::Mlp::kLayers; ++l) {
        mlps[k]->w.push_back(tape_.value(nets[k]->w[static_cast<std::size_t>(l)]));
        mlps[k]->b.push_back(tape_.value(nets[k]->b[static_cast<std::size_t>(l)]));
      }
    }
    out.bwd_u_skew = tape_.value(bwd_.u_skew).row(0);
    out.bwd_sv = tape_.value(bwd_.sv).row(0);
    out.bwd_v_skew = tape_.value(bwd_.v_skew).row(0);
  }

 protected:
  void build_forward(const model::FbModel& m) {
    u_net_ = detail::build_mlp(tape_, m.fwd_u, zin_);
    sv_net_ = detail::build_mlp(tape_, m.fwd_sv, zin_);
    v_net_ = detail::build_mlp(tape_, m.fwd_v, zin_);
    const int u_rot = tape_.cayley(tape_.skew_rows(u_net_.out, n_));
    const int sv_act = tape_.activation(sv_net_.out, Act::softplus_floor);
    const int v_rot = tape_.cayley(tape_.skew_rows(v_net_.out, d_));
    f_node_ = tape_.matmul(tape_.cols_scaled(u_rot, sv_act, d_), v_rot, false, true);
    for (const detail::MlpNodes* net : {&u_net_, &sv_net_, &v_net_})
      for (int l = 0; l < model::Mlp::kLayers; ++l) {
        params_.push_back(net->w[static_cast<std::size_t>(l)]);
        params_.push_back(net->b[static_cast<std::size_t>(l)]);
      }
  }

  // Backward factors are created after the forward pipeline so that
  // forward_range(f_node_ + 1, ...) re-evaluates them.
  void build_backward(const model::FbModel& m) {
    bwd_ = detail::build_factor(tape_, m.bwd_u_skew, m.bwd_sv, m.bwd_v_skew, d_, n_);
    b_node_ = bwd_.out;
    params_.push_back(bwd_.u_skew);
    params_.push_back(bwd_.sv);
    params_.push_back(bwd_.v_skew);
  }

  Tape tape_;
  cmp::Cmp env_;
  Vec rho_;
  int n_ = 0, d_ = 0, nz_ = 0;
  double tau_train_ = 5e-3;
  Mat inv_rho_diag_;
  Mat z_raw_;
  detail::MlpNodes u_net_, sv_net_, v_net_;
  detail::FactorNodes bwd_;
  int zin_ = -1, f_node_ = -1, b_node_ = -1, prod_ = -1, target_ = -1, loss_ = -1;
  std::vector<int> params_;
};

/// Latent-conditioned TD graph: one latent per tuple (the forward slab is
/// indexed per tuple), bootstrap constants precomputed from a target snapshot.
class FbTdGraph {
 public:
  FbTdGraph(const model::FbModel& m, int batch_size, double gamma, double lambda_ortho,
            const Vec& rho)
      : n_(m.n), d_(m.d), nz_(batch_size) {
    if (batch_size < 1) throw ConfigError("FbTdGraph: empty batch");
    zin_ = tape_.constant(Mat::Zero(nz_, d_));
    build_forward(m);
    build_backward(m);
    td_ = detail::build_td_loss(tape_, f_node_, b_node_, nz_, gamma);
    loss_ = detail::combine_with_ortho(tape_, td_.loss, b_node_, lambda_ortho, rho);
  }

  Tape& tape() { return tape_; }
  int loss_id() const { return loss_; }
  const std::vector<int>& params() const { return params_; }

  void set_latents(const Mat& z_raw) {
    if (z_raw.rows() != nz_ || z_raw.cols() != d_)
      throw ConfigError("FbTdGraph: latent batch shape mismatch");
    z_raw_ = z_raw;
    tape_.set_value(zin_, latent::preprocess_rows(z_raw));
  }

  void forward_to_f() { tape_.forward_range(0, f_node_); }
  const std::vector<Mat>& f_values() const { return tape_.val(f_node_); }
  const Mat& z_raw() const { return z_raw_; }

  void set_batch(const TdBatch& b, const Vec& tvec) {
    if (b.size() != nz_ || tvec.size() != nz_)
      throw ConfigError("FbTdGraph: batch size mismatch");
    tape_.set_gather(td_.d_main, b.current, b.future);
    tape_.set_gather(td_.d_diag, b.current, b.current);
    tape_.leaf_item(td_.tvec) = tvec;
    tape_.leaf_item(td_.w) = b.weights;
  }

  void finish_forward() { tape_.forward_range(f_node_ + 1, tape_.size() - 1); }
  double loss_value() const { return tape_.scalar(loss_); }
  void backward() { tape_.backward(loss_); }

  void sync_to(model::FbModel& out) const {
    out.n = n_;
    out.d = d_;
    const detail::MlpNodes* nets[3] = {&u_net_, &sv_net_, &v_net_};
    model::Mlp* mlps[3] = {&out.fwd_u, &out.fwd_sv, &out.fwd_v};
    for (int k = 0; k < 3; ++k) {
      mlps[k]->w.clear();
      mlps[k]->b.clear();
      for (int l = 0; l < model::Mlp::kLayers; ++l) {
        mlps[k]->w.push_back(tape_.value(nets[k]->w[static_cast<std::size_t>(l)]));
        mlps[k]->b.push_back(tape_.value(nets[k]->b[static_cast<std::size_t>(l)]));
      }
    }
    out.bwd_u_skew = tape_.value(bwd_.u_skew).row(0);
    out.bwd_sv = tape_.value(bwd_.sv).row(0);
    out.bwd_v_skew = tape_.value(bwd_.v_skew).row(0);
  }

 private:
  void build_forward(const model::FbModel& m) {
    u_net_ = detail::build_mlp(tape_, m.fwd_u, zin_);
    sv_net_ = detail::build_mlp(tape_, m.fwd_sv, zin_);
    v_net_ = detail::build_mlp(tape_, m.fwd_v, zin_);
    const int u_rot = tape_.cayley(tape_.skew_rows(u_net_.out, n_));
    const int sv_act = tape_.activation(sv_net_.out, Act::softplus_floor);
    const int v_rot = tape_.cayley(tape_.skew_rows(v_net_.out, d_));
    f_node_ = tape_.matmul(tape_.cols_scaled(u_rot, sv_act, d_), v_rot, false, true);
    for (const detail::MlpNodes* net : {&u_net_, &sv_net_, &v_net_})
      for (int l = 0; l < model::Mlp::kLayers; ++l) {
        params_.push_back(net->w[static_cast<std::size_t>(l)]);
        params_.push_back(net->b[static_cast<std::size_t>(l)]);
      }
  }

  void build_backward(const model::FbModel& m) {
    bwd_ = detail::build_factor(tape_, m.bwd_u_skew, m.bwd_sv, m.bwd_v_skew, d_, n_);
    b_node_ = bwd_.out;
    params_.push_back(bwd_.u_skew);
    params_.push_back(bwd_.sv);
    params_.push_back(bwd_.v_skew);
  }

  Tape tape_;
  int n_ = 0, d_ = 0, nz_ = 0;
  Mat z_raw_;
  detail::MlpNodes u_net_, sv_net_, v_net_;
  detail::FactorNodes bwd_;
  detail::TdLossNodes td_;
  int zin_ = -1, f_node_ = -1, b_node_ = -1, loss_ = -1;
  std::vector<int> params_;
};

/// Standalone regularizer graph (for gradient verification).
class OrthoGraph {
 public:
  OrthoGraph(const Mat& b, const Vec& rho) {
    b_param_ = tape_.param(b);
    loss_ = detail::attach_ortho(tape_, b_param_, rho);
  }
  Tape& tape() { return tape_; }
  int loss_id() const { return loss_; }
  int b_param() const { return b_param_; }

 private:
  Tape tape_;
  int b_param_ = -1, loss_ = -1;
};

}  // namespace fblab::loss
