#pragma once

#include <cmath>
#include <optional>
#include <variant>
#include <vector>

#include "fblab/analysis/metrics.hpp"
#include "fblab/cmp/cmp.hpp"
#include "fblab/cmp/oracle.hpp"
#include "fblab/core/error.hpp"
#include "fblab/core/rng.hpp"
#include "fblab/grad/adamw.hpp"
#include "fblab/latent/latent.hpp"
#include "fblab/loss/losses.hpp"
#include "fblab/model/model.hpp"

namespace fblab::train {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

enum class LossMode { mc, td };

inline std::string loss_mode_name(LossMode m) { return m == LossMode::mc ? "mc" : "td"; }
inline LossMode parse_loss_mode(const std::string& s) {
  if (s == "mc") return LossMode::mc;
  if (s == "td") return LossMode::td;
  throw ConfigError("unknown loss_mode '" + s + "' (expected mc or td)");
}

struct TrainConfig {
  model::Algo algo = model::Algo::onestep_fb;
  // Unset means algo-dependent: fb uses the factorized (svd_cayley) form it
  // requires; one-step defaults to the faster plain matrices.
  std::optional<model::ParamKind> param_kind;
  LossMode loss_mode = LossMode::mc;
  long long steps = 100000;
  int batch_size = 512;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double adamw_eps = 1e-5;
  double gamma = -1.0;  // sentinel: inherit the environment's discount
  double tau_policy_train = 5e-3;
  double tau_policy_eval = 1.0;
  double lambda_ortho = 0.0;
  double target_polyak = 0.01;
  std::uint64_t seed = 1;
  int d = -1;  // sentinel: state-action pair count
  int dataset_transitions = 100000;
  latent::PriorVariant prior = latent::PriorVariant::cauchy_scaled;
  long long eval_interval = 1000;
  int eval_latents = 1000;

  void validate() const {
    if (steps < 0) throw ConfigError("train config: steps must be >= 0");
    if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
    if (lr <= 0.0) throw ConfigError("train config: lr must be positive");
    if (weight_decay < 0.0) throw ConfigError("train config: weight_decay must be >= 0");
    if (adamw_eps <= 0.0) throw ConfigError("train config: adamw_eps must be positive");
    if (gamma != -1.0 && (gamma <= 0.0 || gamma >= 1.0))
      throw ConfigError("train config: gamma must lie in (0,1) or be -1 to inherit");
    if (tau_policy_train <= 0.0 || tau_policy_eval <= 0.0)
      throw ConfigError("train config: policy temperatures must be positive");
    if (lambda_ortho < 0.0) throw ConfigError("train config: lambda_ortho must be >= 0");
    if (target_polyak <= 0.0 || target_polyak > 1.0)
      throw ConfigError("train config: target_polyak must lie in (0,1]");
    if (d != -1 && d < 1) throw ConfigError("train config: d must be >= 1 or -1");
    if (dataset_transitions < 1)
      throw ConfigError("train config: dataset_transitions must be >= 1");
    if (eval_interval < 1) throw ConfigError("train config: eval_interval must be >= 1");
    if (eval_latents < 1) throw ConfigError("train config: eval_latents must be >= 1");
    if (algo == model::Algo::fb && param_kind && *param_kind != model::ParamKind::svd_cayley)
      throw ConfigError("train config: algo fb supports param_kind svd_cayley only");
  }

  model::ParamKind effective_param_kind() const {
    if (param_kind) return *param_kind;
    return algo == model::Algo::fb ? model::ParamKind::svd_cayley : model::ParamKind::plain;
  }
};

struct MetricsRecord {
  long long step = 0;
  double loss = 0.0;
  double eps_smr = 0.0;
  double eps_q = 0.0;
  double kl_policy = 0.0;
  double eps_equiv = 0.0;
};

struct TrainResult {
  std::variant<model::FbModel, model::OneStepModel> final_model;
  std::vector<MetricsRecord> records;
  bool aborted = false;
  long long last_good_step = 0;
};

/// Evaluation inputs derived deterministically from the run seed: latents from
/// the kEvalLatents stream, equivariance coefficients from kEquivParams.
inline analysis::EvalContext make_eval_context(const cmp::Cmp& env, const Vec& rho,
                                               const TrainConfig& cfg, int d,
                                               analysis::OracleMode mode) {
  core::SplitMix64 z_rng(core::derive(cfg.seed, core::stream::kEvalLatents));
  const latent::LatentBatch z = latent::sample_prior(d, cfg.eval_latents, cfg.prior, z_rng);
  core::SplitMix64 eq_rng(core::derive(cfg.seed, core::stream::kEquivParams));
  Vec nu, xi;
  analysis::sample_equiv_coefficients(cfg.eval_latents, eq_rng, nu, xi);
  return analysis::EvalContext::make(env, rho, mode, cfg.tau_policy_eval, z.z,
                                     std::move(nu), std::move(xi));
}

namespace detail {

inline grad::AdamWConfig adamw_config(const TrainConfig& cfg) {
  grad::AdamWConfig a;
  a.lr = cfg.lr;
  a.weight_decay = cfg.weight_decay;
  a.eps = cfg.adamw_eps;
  return a;
}

template <class Model>
inline void record_eval(std::vector<MetricsRecord>& records, long long step, double loss,
                        const Model& m, const analysis::EvalContext& ctx) {
  const analysis::MetricsValues v = analysis::evaluate_metrics(m, ctx);
  records.push_back({step, loss, v.eps_smr, v.eps_q, v.kl_policy, v.eps_equiv});
}

/// Uniform tuple draw from the dataset plus an independent future pair from
/// rho, one (dataset index, future index) pair per batch element.
inline loss::TdBatch sample_td_batch(const loss::Dataset& data, int batch, const Vec& rho,
                                     int num_actions, core::SplitMix64& rng) {
  loss::TdBatch b;
  b.current.reserve(static_cast<std::size_t>(batch));
  b.next.reserve(static_cast<std::size_t>(batch));
  b.future.reserve(static_cast<std::size_t>(batch));
  for (int t = 0; t < batch; ++t) {
    const std::size_t idx = static_cast<std::size_t>(
        rng.uniform() * static_cast<double>(data.items.size()));
    const loss::Transition& tr = data.items[std::min(idx, data.items.size() - 1)];
    b.current.push_back(cmp::flat_index(tr.s, tr.a, num_actions));
    b.next.push_back(cmp::flat_index(tr.s_next, tr.a_next, num_actions));
    b.future.push_back(loss::detail::sample_index(rho, rng));
  }
  b.weights = Vec::Constant(batch, 1.0 / batch);
  return b;
}

}  // namespace detail

/// Runs one training configuration to completion (or NaN abort) and returns
/// the final model plus one metrics record per evaluation point (step 0,
/// every eval_interval, and the final step). Fully deterministic per seed.
inline TrainResult train(const cmp::Cmp& env_in, const Vec& rho, const TrainConfig& cfg) {
  cfg.validate();
  cmp::Cmp env = env_in;
  if (cfg.gamma > 0.0) env.gamma = cfg.gamma;
  const int n = env.num_pairs();
  const int d = cfg.d > 0 ? cfg.d : n;
  if (rho.size() != n) throw ConfigError("train: rho length must equal |S*A|");
  cmp::validate_rho(rho);

  const analysis::OracleMode mode = cfg.algo == model::Algo::fb
                                        ? analysis::OracleMode::optimal
                                        : analysis::OracleMode::behavioral;
  const analysis::EvalContext ctx = make_eval_context(env, rho, cfg, d, mode);

  core::SplitMix64 train_rng(core::derive(cfg.seed, core::stream::kTrainLatents));
  core::SplitMix64 data_rng(core::derive(cfg.seed, core::stream::kDataset));

  TrainResult out;
  const auto should_eval = [&](long long step) {
    return step % cfg.eval_interval == 0 || step == cfg.steps;
  };

  if (cfg.algo == model::Algo::onestep_fb && cfg.loss_mode == LossMode::mc) {
    model::OneStepModel cur = model::OneStepModel::init(n, d, cfg.seed, cfg.effective_param_kind());
    const cmp::Policy behavioral = cmp::uniform_policy(env.num_states, env.num_actions);
    const Mat target = loss::ratio_target(env, behavioral, rho);
    loss::OneStepMcGraph g(cur, target, cfg.lambda_ortho, rho);
    grad::AdamW opt(g.tape(), g.params(), detail::adamw_config(cfg));
    detail::record_eval(out.records, 0, g.forward_loss(), cur, ctx);
    for (long long step = 1; step <= cfg.steps; ++step) {
      const double loss_val = g.forward_loss();
      if (!std::isfinite(loss_val)) {
        out.aborted = true;
        out.last_good_step = step - 1;
        break;
      }
      g.backward();
      opt.step();
      out.last_good_step = step;
      if (should_eval(step)) {
        g.sync_to(cur);
        detail::record_eval(out.records, step, loss_val, cur, ctx);
      }
    }
    g.sync_to(cur);
    out.final_model = cur;
    return out;
  }

  if (cfg.algo == model::Algo::onestep_fb && cfg.loss_mode == LossMode::td) {
    model::OneStepModel cur = model::OneStepModel::init(n, d, cfg.seed, cfg.effective_param_kind());
    model::OneStepModel target_m = cur;
    model::OneStepModel online_tmp = cur;
    const cmp::Policy behavioral = cmp::uniform_policy(env.num_states, env.num_actions);
    const loss::Dataset data =
        loss::generate_dataset(env, behavioral, cfg.dataset_transitions, data_rng);
    const Mat mc_target = loss::ratio_target(env, behavioral, rho);
    loss::OneStepTdGraph g(cur, cfg.batch_size, env.gamma, cfg.lambda_ortho, rho);
    grad::AdamW opt(g.tape(), g.params(), detail::adamw_config(cfg));
    detail::record_eval(
        out.records, 0,
        loss::mc_onestep_loss_value(cur.forward_matrix(), cur.backward_matrix(), mc_target),
        cur, ctx);
    for (long long step = 1; step <= cfg.steps; ++step) {
      const loss::TdBatch batch =
          detail::sample_td_batch(data, cfg.batch_size, rho, env.num_actions, train_rng);
      const Vec tvec = loss::td_targets(target_m.forward_matrix(), target_m.backward_matrix(),
                                        batch.next, batch.future, env.gamma);
      g.set_batch(batch, tvec);
      const double loss_val = g.forward_loss();
      if (!std::isfinite(loss_val)) {
        out.aborted = true;
        out.last_good_step = step - 1;
        break;
      }
      g.backward();
      opt.step();
      g.sync_to(online_tmp);
      loss::polyak_update(target_m, online_tmp, cfg.target_polyak);
      out.last_good_step = step;
      if (should_eval(step)) {
        g.sync_to(cur);
        detail::record_eval(out.records, step, loss_val, cur, ctx);
      }
    }
    g.sync_to(cur);
    out.final_model = cur;
    return out;
  }

  if (cfg.algo == model::Algo::fb && cfg.loss_mode == LossMode::mc) {
    model::FbModel cur = model::FbModel::init(n, d, cfg.seed);
    cur.tau_policy_train = cfg.tau_policy_train;
    cur.tau_policy_eval = cfg.tau_policy_eval;
    loss::FbMcGraph g(cur, env, cfg.batch_size, cfg.lambda_ortho, rho);
    grad::AdamW opt(g.tape(), g.params(), detail::adamw_config(cfg));
    detail::record_eval(out.records, 0, loss::mc_fb_loss_value(cur, env, ctx.eval_z, rho),
                        cur, ctx);
    for (long long step = 1; step <= cfg.steps; ++step) {
      const latent::LatentBatch zb =
          latent::sample_prior(d, cfg.batch_size, cfg.prior, train_rng);
      g.set_latents(zb.z);
      g.forward_to_f();
      g.compute_and_set_targets();
      g.finish_forward();
      const double loss_val = g.loss_value();
      if (!std::isfinite(loss_val)) {
        out.aborted = true;
        out.last_good_step = step - 1;
        break;
      }
      g.backward();
      opt.step();
      out.last_good_step = step;
      if (should_eval(step)) {
        g.sync_to(cur);
        detail::record_eval(out.records, step, loss_val, cur, ctx);
      }
    }
    g.sync_to(cur);
    out.final_model = cur;
    return out;
  }

  // fb + td
  model::FbModel cur = model::FbModel::init(n, d, cfg.seed);
  cur.tau_policy_train = cfg.tau_policy_train;
  cur.tau_policy_eval = cfg.tau_policy_eval;
  model::FbModel target_m = cur;
  model::FbModel online_tmp = cur;
  const cmp::Policy behavioral = cmp::uniform_policy(env.num_states, env.num_actions);
  const loss::Dataset data =
      loss::generate_dataset(env, behavioral, cfg.dataset_transitions, data_rng);
  loss::FbTdGraph g(cur, cfg.batch_size, env.gamma, cfg.lambda_ortho, rho);
  grad::AdamW opt(g.tape(), g.params(), detail::adamw_config(cfg));
  detail::record_eval(out.records, 0, loss::mc_fb_loss_value(cur, env, ctx.eval_z, rho), cur,
                      ctx);
  for (long long step = 1; step <= cfg.steps; ++step) {
    const latent::LatentBatch zb =
        latent::sample_prior(d, cfg.batch_size, cfg.prior, train_rng);
    loss::TdBatch batch =
        detail::sample_td_batch(data, cfg.batch_size, rho, env.num_actions, train_rng);
    g.set_latents(zb.z);
    g.forward_to_f();
    // Next actions are resampled from the policy the current forward values
    // induce at the training temperature, one per tuple.
    const std::vector<Mat>& f_vals = g.f_values();
    const Mat b_targ = target_m.backward_matrix();
    Vec tvec(cfg.batch_size);
    for (int t = 0; t < cfg.batch_size; ++t) {
      const Vec z = zb.z.row(t).transpose();
      const int s_next =
          cmp::state_of(batch.next[static_cast<std::size_t>(t)], env.num_actions);
      const cmp::Policy pol = model::induced_policy(
          f_vals[static_cast<std::size_t>(t)], z, cfg.tau_policy_train, env.num_states,
          env.num_actions);
      const int a_next = loss::detail::sample_index(pol.probs.row(s_next), train_rng);
      batch.next[static_cast<std::size_t>(t)] =
          cmp::flat_index(s_next, a_next, env.num_actions);
      const Mat f_targ = target_m.forward_matrix(z);
      tvec(t) = env.gamma *
                f_targ.row(batch.next[static_cast<std::size_t>(t)])
                    .dot(b_targ.col(batch.future[static_cast<std::size_t>(t)]));
    }
    g.set_batch(batch, tvec);
    g.finish_forward();
    const double loss_val = g.loss_value();
    if (!std::isfinite(loss_val)) {
      out.aborted = true;
      out.last_good_step = step - 1;
      break;
    }
    g.backward();
    opt.step();
    g.sync_to(online_tmp);
    loss::polyak_update(target_m, online_tmp, cfg.target_polyak);
    out.last_good_step = step;
    if (should_eval(step)) {
      g.sync_to(cur);
      detail::record_eval(out.records, step, loss_val, cur, ctx);
    }
  }
  g.sync_to(cur);
  out.final_model = cur;
  return out;
}

}  // namespace fblab::train
