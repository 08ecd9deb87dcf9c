#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <cmath>
#include <sstream>

#include "fblab/cmp/cmp.hpp"
#include "fblab/cmp/oracle.hpp"
#include "fblab/core/error.hpp"
#include "fblab/core/rng.hpp"
#include "fblab/grad/tape.hpp"
#include "fblab/latent/latent.hpp"
#include "fblab/loss/losses.hpp"
#include "fblab/model/model.hpp"

namespace {

using Eigen::MatrixXd;
using Eigen::RowVectorXd;
using Eigen::VectorXd;
namespace cmp = fblab::cmp;
namespace model = fblab::model;
namespace loss = fblab::loss;
using fblab::core::SplitMix64;

TEST(SkewCayley, PackedExpansion) {
  RowVectorXd p(3);
  p << 1.0, 2.0, 3.0;
  const MatrixXd a = model::skew_from_packed(p, 3);
  EXPECT_DOUBLE_EQ(a(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(a(0, 2), 2.0);
  EXPECT_DOUBLE_EQ(a(1, 2), 3.0);
  EXPECT_LE((a + a.transpose()).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(model::skew_param_count(9), 36);
  EXPECT_THROW(model::skew_from_packed(p, 4), fblab::ConfigError);
}

TEST(SkewCayley, ZeroGivesIdentityAndOrthonormality) {
  EXPECT_LE((model::cayley(MatrixXd::Zero(4, 4)) - MatrixXd::Identity(4, 4))
                .cwiseAbs()
                .maxCoeff(),
            0.0);
  SplitMix64 g(1);
  RowVectorXd p(model::skew_param_count(5));
  for (int i = 0; i < p.size(); ++i) p(i) = g.normal();
  const MatrixXd q = model::cayley_from_packed(p, 5);
  EXPECT_LE((q * q.transpose() - MatrixXd::Identity(5, 5)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(std::abs(q.determinant()), 1.0, 1e-12);
}

TEST(SvdCompose, RectangularDiagonalProduct) {
  SplitMix64 g(2);
  const MatrixXd u = model::random_rotation(4, g);
  const MatrixXd v = model::random_rotation(3, g);
  RowVectorXd sv(3);
  sv << 0.5, -1.0, 2.0;  // pre-activations, mapped through the floored softplus
  const MatrixXd f = model::svd_compose(u, sv, v, 3);
  EXPECT_EQ(f.rows(), 4);
  EXPECT_EQ(f.cols(), 3);
  MatrixXd core = MatrixXd::Zero(4, 3);
  for (int j = 0; j < 3; ++j)
    core.col(j) =
        u.col(j) * fblab::grad::act_eval(fblab::grad::Act::softplus_floor, sv(j));
  EXPECT_LE((f - core * v.transpose()).cwiseAbs().maxCoeff(), 1e-14);
  // Positive singular floor keeps full column rank even at very negative
  // pre-activations.
  RowVectorXd low = RowVectorXd::Constant(3, -50.0);
  const MatrixXd f_low = model::svd_compose(u, low, v, 3);
  EXPECT_EQ(cmp::numerical_rank(f_low), 3);
}

TEST(Mlp, InitShapesAndZeroHead) {
  SplitMix64 g(3);
  const model::Mlp m = model::Mlp::init(9, 36, g);
  ASSERT_EQ(m.w.size(), 4u);
  EXPECT_EQ(m.w[0].rows(), 9);
  EXPECT_EQ(m.w[0].cols(), 32);
  EXPECT_EQ(m.w[3].rows(), 32);
  EXPECT_EQ(m.w[3].cols(), 36);
  EXPECT_EQ(m.w[3].cwiseAbs().maxCoeff(), 0.0);  // zero head
  for (const auto& b : m.b) EXPECT_EQ(b.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT(m.w[0].cwiseAbs().maxCoeff(), 0.0);
  // Zero head makes the output zero for every input.
  RowVectorXd in = RowVectorXd::Constant(9, 1.3);
  EXPECT_EQ(m.forward(in).cwiseAbs().maxCoeff(), 0.0);
}

TEST(FbModel, InitIsSeededAndLatentIndependent) {
  const model::FbModel a = model::FbModel::init(9, 9, 7);
  const model::FbModel b = model::FbModel::init(9, 9, 7);
  EXPECT_EQ((a.fwd_u.w[0] - b.fwd_u.w[0]).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ((a.fwd_v.w[2] - b.fwd_v.w[2]).cwiseAbs().maxCoeff(), 0.0);
  const model::FbModel c = model::FbModel::init(9, 9, 8);
  EXPECT_GT((a.fwd_u.w[0] - c.fwd_u.w[0]).cwiseAbs().maxCoeff(), 1e-9);

  // Zero heads: F_z is the same sigma-diagonal matrix for every latent.
  VectorXd z1 = VectorXd::Ones(9), z2 = -3.0 * VectorXd::Ones(9);
  const MatrixXd f1 = a.forward_matrix(z1);
  const MatrixXd f2 = a.forward_matrix(z2);
  EXPECT_EQ((f1 - f2).cwiseAbs().maxCoeff(), 0.0);
  const double sigma0 = fblab::grad::act_eval(fblab::grad::Act::softplus_floor, 0.0);
  EXPECT_LE((f1 - sigma0 * MatrixXd::Identity(9, 9)).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LE((a.backward_matrix() - sigma0 * MatrixXd::Identity(9, 9))
                .cwiseAbs()
                .maxCoeff(),
            1e-14);
}

TEST(FbModel, RankFloorHolds) {
  // Even with randomized parameters, the floored singular values keep
  // rank(F_z) = min(n, d) and rank(B) = min(d, n).
  SplitMix64 g(4);
  for (const int d : {2, 5, 9}) {
    model::FbModel m = model::FbModel::init(9, d, 11);
    for (auto* net : {&m.fwd_u, &m.fwd_sv, &m.fwd_v})
      for (auto& w : net->w)
        for (int i = 0; i < w.size(); ++i) w(i / w.cols(), i % w.cols()) += 0.3 * g.normal();
    for (int i = 0; i < m.bwd_sv.size(); ++i) m.bwd_sv(i) = -20.0 + g.normal();
    for (int i = 0; i < m.bwd_u_skew.size(); ++i) m.bwd_u_skew(i) = g.normal();
    VectorXd z(d);
    for (int i = 0; i < d; ++i) z(i) = g.normal();
    EXPECT_EQ(cmp::numerical_rank(m.forward_matrix(z)), std::min(9, d));
    EXPECT_EQ(cmp::numerical_rank(m.backward_matrix()), std::min(9, d));
  }
}

TEST(FbModel, DistinctLatentsStayDistinct) {
  // After perturbing the heads, the squashing preprocessor keeps z and 2z
  // distinguishable (they map to different network inputs).
  model::FbModel m = model::FbModel::init(4, 4, 5);
  SplitMix64 g(6);
  for (auto& w : m.fwd_sv.w)
    for (int i = 0; i < w.size(); ++i) w(i / w.cols(), i % w.cols()) += 0.5 * g.normal();
  VectorXd z = VectorXd::Ones(4);
  EXPECT_GT((m.forward_matrix(z) - m.forward_matrix(2.0 * z)).cwiseAbs().maxCoeff(),
            1e-12);
}

TEST(OneStepModel, InitBothKinds) {
  const model::OneStepModel s = model::OneStepModel::init(9, 9, 3, model::ParamKind::svd_cayley);
  const double sigma0 = fblab::grad::act_eval(fblab::grad::Act::softplus_floor, 0.0);
  EXPECT_LE((s.forward_matrix() - sigma0 * MatrixXd::Identity(9, 9)).cwiseAbs().maxCoeff(),
            1e-14);

  const model::OneStepModel p = model::OneStepModel::init(9, 4, 3, model::ParamKind::plain);
  EXPECT_EQ(p.forward_matrix().rows(), 9);
  EXPECT_EQ(p.forward_matrix().cols(), 4);
  EXPECT_EQ(p.backward_matrix().rows(), 4);
  const model::OneStepModel p2 = model::OneStepModel::init(9, 4, 3, model::ParamKind::plain);
  EXPECT_EQ((p.f_mat - p2.f_mat).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ((p.b_mat - p2.b_mat).cwiseAbs().maxCoeff(), 0.0);
  // 1/sqrt(fan-in) scaling: empirical std close to the target.
  EXPECT_NEAR(p.f_mat.norm() / std::sqrt(9.0 * 4.0), 1.0 / std::sqrt(4.0), 0.15);
  EXPECT_THROW(model::OneStepModel::init(9, 0, 3, model::ParamKind::plain),
               fblab::ConfigError);
}

TEST(InducedPolicy, SoftmaxOfScores) {
  const model::OneStepModel s = model::OneStepModel::init(6, 6, 3, model::ParamKind::svd_cayley);
  // Identity-like F: scores proportional to z itself.
  VectorXd z(6);
  z << 5.0, 0.0, 0.0, 0.0, 0.0, 0.0;  // state 0 prefers action 0 (2 states x 3 actions)
  const cmp::Policy pi = model::induced_policy(s.forward_matrix(), z, 50.0, 2, 3);
  EXPECT_GT(pi.probs(0, 0), 0.999);
  // q_prediction at z = 0 vanishes.
  EXPECT_EQ(model::q_prediction(s.forward_matrix(), VectorXd::Zero(6)).cwiseAbs().maxCoeff(),
            0.0);
}

TEST(GroundTruthOneStep, ExactFactorization) {
  for (const auto& env : {cmp::build_three_state_cmp(), cmp::build_five_state_circular_cmp()}) {
    const int n = env.num_pairs();
    const cmp::Policy uni = cmp::uniform_policy(env.num_states, env.num_actions);
    const VectorXd rho = cmp::uniform_rho(n);
    const model::OneStepModel gt = model::ground_truth_onestep(env, uni, rho, n);
    const MatrixXd target =
        cmp::successor_measure(env, uni) * rho.cwiseInverse().asDiagonal();
    EXPECT_LE((gt.forward_matrix() * gt.backward_matrix() - target).cwiseAbs().maxCoeff(),
              1e-10);
    // Orthonormal backward rows.
    const MatrixXd b = gt.backward_matrix();
    EXPECT_LE((b * b.transpose() - MatrixXd::Identity(n, n)).cwiseAbs().maxCoeff(), 1e-10);
    // Relative loss at the ground truth is numerically zero.
    const double l = loss::mc_onestep_loss_value(gt.forward_matrix(), b, target);
    EXPECT_LE(l / target.squaredNorm(), 1e-12);
  }
}

TEST(GroundTruthOneStep, RotationsPreserveTheProduct) {
  const cmp::Cmp env = cmp::build_three_state_cmp();
  const cmp::Policy uni = cmp::uniform_policy(3, 3);
  const VectorXd rho = cmp::uniform_rho(9);
  const model::OneStepModel gt = model::ground_truth_onestep(env, uni, rho, 9);
  SplitMix64 g(9);
  const MatrixXd q = model::random_rotation(9, g);
  const model::OneStepModel rot = model::rotate_onestep(gt, q);
  EXPECT_LE((rot.forward_matrix() * rot.backward_matrix() -
             gt.forward_matrix() * gt.backward_matrix())
                .cwiseAbs()
                .maxCoeff(),
            1e-10);
  // The factors themselves differ: the factorization is not unique.
  EXPECT_GT((rot.forward_matrix() - gt.forward_matrix()).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_THROW(model::rotate_onestep(gt, MatrixXd::Identity(3, 3)), fblab::ConfigError);
}

TEST(GroundTruthOneStep, BehavioralFixedPointAndQDecoding) {
  const cmp::Cmp env = cmp::build_three_state_cmp();
  const cmp::Policy uni = cmp::uniform_policy(3, 3);
  const VectorXd rho = cmp::uniform_rho(9);
  const model::OneStepModel gt = model::ground_truth_onestep(env, uni, rho, 9);
  const MatrixXd ratio = gt.forward_matrix() * gt.backward_matrix();

  // Fixed point of the behavioral ratio backup.
  const MatrixXd p = cmp::build_transition_matrix(env, uni);
  MatrixXd backup = env.gamma * (p * ratio);
  for (int i = 0; i < 9; ++i) backup(i, i) += (1.0 - env.gamma) / rho(i);
  EXPECT_LE((backup - ratio).cwiseAbs().maxCoeff(), 1e-8);

  // Task latents decode to behavioral Q-values; the all-ones reward latent
  // decodes to the all-ones Q-vector.
  SplitMix64 g(10);
  VectorXd r(9);
  for (int i = 0; i < 9; ++i) r(i) = g.normal();
  const VectorXd z_r = fblab::latent::reward_to_latent(gt.backward_matrix(), r, rho);
  const VectorXd q_beh = cmp::value_iteration(env, r, cmp::ViMode::evaluate, &uni);
  EXPECT_LE((model::q_prediction(gt.forward_matrix(), z_r) - q_beh).cwiseAbs().maxCoeff(),
            1e-8);
  const VectorXd z_one =
      fblab::latent::reward_to_latent(gt.backward_matrix(), VectorXd::Ones(9), rho);
  EXPECT_LE((model::q_prediction(gt.forward_matrix(), z_one) - VectorXd::Ones(9))
                .cwiseAbs()
                .maxCoeff(),
            1e-8);
}

TEST(GroundTruthFb, OptimalQAndAffineArgmaxInvariance) {
  const cmp::Cmp env = cmp::build_three_state_cmp();
  const VectorXd rho = cmp::uniform_rho(9);
  const model::GroundTruthFb gt = model::GroundTruthFb::build(env, rho);

  // B has orthonormal rows, so reward_of inverts reward_to_latent.
  EXPECT_LE((gt.b * gt.b.transpose() - MatrixXd::Identity(9, 9)).cwiseAbs().maxCoeff(),
            1e-12);
  SplitMix64 g(11);
  VectorXd r(9);
  for (int i = 0; i < 9; ++i) r(i) = g.normal();
  const VectorXd z = fblab::latent::reward_to_latent(gt.b, r, rho);
  EXPECT_LE((gt.reward_of(z) - r).cwiseAbs().maxCoeff(), 1e-9);

  // F_z z is the optimal Q-vector of the decoded reward.
  const VectorXd q_star = cmp::value_iteration(env, r, cmp::ViMode::optimal);
  EXPECT_LE((model::q_prediction(gt.forward_matrix(z), z) - q_star).cwiseAbs().maxCoeff(),
            1e-8);

  // Positive affine changes of the latent leave every state's argmax intact.
  const VectorXd z_one = fblab::latent::reward_to_latent(gt.b, VectorXd::Ones(9), rho);
  const VectorXd z_aff = 1.7 * z + (-0.6) * z_one;
  const VectorXd s0 = model::q_prediction(gt.forward_matrix(z), z);
  const VectorXd s1 = model::q_prediction(gt.forward_matrix(z_aff), z_aff);
  for (int s = 0; s < 3; ++s)
    EXPECT_EQ(cmp::greedy_action(s0, s, 3), cmp::greedy_action(s1, s, 3));
}

TEST(Checkpoint, RoundTripFb) {
  model::FbModel m = model::FbModel::init(6, 4, 13);
  SplitMix64 g(12);
  for (auto& w : m.fwd_u.w)
    for (int i = 0; i < w.size(); ++i) w(i / w.cols(), i % w.cols()) += 0.1 * g.normal();
  for (int i = 0; i < m.bwd_sv.size(); ++i) m.bwd_sv(i) = g.normal();
  std::stringstream ss;
  model::save_checkpoint(m, 2, 3, ss);
  int ns = 0, na = 0;
  const model::FbModel back = model::load_fb_checkpoint(ss, &ns, &na);
  EXPECT_EQ(ns, 2);
  EXPECT_EQ(na, 3);
  EXPECT_EQ(back.n, 6);
  EXPECT_EQ(back.d, 4);
  for (std::size_t l = 0; l < 4; ++l) {
    EXPECT_EQ((back.fwd_u.w[l] - m.fwd_u.w[l]).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ((back.fwd_sv.w[l] - m.fwd_sv.w[l]).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ((back.fwd_v.w[l] - m.fwd_v.w[l]).cwiseAbs().maxCoeff(), 0.0);
  }
  EXPECT_EQ((back.bwd_sv - m.bwd_sv).cwiseAbs().maxCoeff(), 0.0);
  VectorXd z(4);
  z << 0.3, -1.0, 2.0, 0.1;
  EXPECT_EQ((back.forward_matrix(z) - m.forward_matrix(z)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Checkpoint, RoundTripOneStepBothKinds) {
  for (const auto kind : {model::ParamKind::svd_cayley, model::ParamKind::plain}) {
    model::OneStepModel m = model::OneStepModel::init(6, 3, 17, kind);
    if (kind == model::ParamKind::svd_cayley) {
      SplitMix64 g(13);
      for (int i = 0; i < m.f_u_skew.size(); ++i) m.f_u_skew(i) = g.normal();
      for (int i = 0; i < m.b_sv.size(); ++i) m.b_sv(i) = g.normal();
    }
    std::stringstream ss;
    model::save_checkpoint(m, 3, 2, ss);
    const model::OneStepModel back = model::load_onestep_checkpoint(ss);
    EXPECT_EQ(back.kind, kind);
    EXPECT_EQ((back.forward_matrix() - m.forward_matrix()).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ((back.backward_matrix() - m.backward_matrix()).cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(Checkpoint, PeekAndErrorPaths) {
  const model::OneStepModel m = model::OneStepModel::init(9, 9, 1, model::ParamKind::plain);
  const std::string path = testing::TempDir() + "peek_test.fbckpt";
  model::save_checkpoint_file(m, 3, 3, path);
  const model::CheckpointInfo info = model::peek_checkpoint(path);
  EXPECT_EQ(info.algo, model::Algo::onestep_fb);
  EXPECT_EQ(info.kind, model::ParamKind::plain);
  EXPECT_EQ(info.d, 9);
  EXPECT_EQ(info.n_states, 3);
  EXPECT_EQ(info.n_actions, 3);

  // Wrong-algo loader refuses the file.
  {
    std::stringstream ss;
    model::save_checkpoint(m, 3, 3, ss);
    EXPECT_THROW(model::load_fb_checkpoint(ss), fblab::ConfigError);
  }
  // Truncation is detected.
  {
    std::stringstream full;
    model::save_checkpoint(m, 3, 3, full);
    std::string text = full.str();
    text.resize(text.size() / 2);
    std::stringstream cut(text);
    EXPECT_THROW(model::load_onestep_checkpoint(cut), fblab::ConfigError);
  }
  // Trailing garbage is rejected.
  {
    std::stringstream extra;
    model::save_checkpoint(m, 3, 3, extra);
    extra << " 1.0";
    std::stringstream re(extra.str());
    EXPECT_THROW(model::load_onestep_checkpoint(re), fblab::ConfigError);
  }
  EXPECT_THROW(model::peek_checkpoint("/nonexistent/x.fbckpt"), fblab::ConfigError);
}

}  // namespace
