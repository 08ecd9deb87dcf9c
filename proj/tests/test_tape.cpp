#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "fblab/core/error.hpp"
#include "fblab/core/rng.hpp"
#include "fblab/grad/adamw.hpp"
#include "fblab/grad/check.hpp"
#include "fblab/grad/tape.hpp"

namespace {

using Eigen::MatrixXd;
namespace grad = fblab::grad;
using grad::Act;
using grad::Tape;
using fblab::core::SplitMix64;

MatrixXd random_mat(int r, int c, SplitMix64& g, double scale = 1.0) {
  MatrixXd m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = scale * g.normal();
  return m;
}

constexpr double kFdTol = 1e-6;

TEST(TapeOps, MatmulAllTransposeCombos) {
  SplitMix64 g(1);
  for (const bool ta : {false, true}) {
    for (const bool tb : {false, true}) {
      Tape t;
      const int a = t.param(random_mat(ta ? 4 : 3, ta ? 3 : 4, g));
      const int b = t.param(random_mat(tb ? 5 : 4, tb ? 4 : 5, g));
      const int c = t.constant(random_mat(3, 5, g));
      const int loss = t.frob_sq(t.sub(t.matmul(a, b, ta, tb), c));
      const auto res = grad::finite_diff_check(t, loss, {a, b});
      EXPECT_LE(res.max_rel_error, kFdTol) << "ta=" << ta << " tb=" << tb;
    }
  }
}

TEST(TapeOps, MatmulGradientClosedForm) {
  // d/dA ||A B - C||_F^2 = 2 (A B - C) B^T, exact up to roundoff.
  SplitMix64 g(2);
  Tape t;
  const MatrixXd av = random_mat(3, 4, g), bv = random_mat(4, 5, g), cv = random_mat(3, 5, g);
  const int a = t.param(av);
  const int b = t.constant(bv);
  const int c = t.constant(cv);
  const int loss = t.frob_sq(t.sub(t.matmul(a, b), c));
  t.forward();
  t.backward(loss);
  const MatrixXd expect = 2.0 * (av * bv - cv) * bv.transpose();
  EXPECT_LE((t.adjoint(a) - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(TapeOps, ElementwiseBinaryAndScale) {
  SplitMix64 g(3);
  Tape t;
  const int a = t.param(random_mat(3, 3, g));
  const int b = t.param(random_mat(3, 3, g));
  const int expr = t.scale(t.mul(t.add(a, b), t.sub(a, b)), 0.7);
  const int loss = t.frob_sq(expr);
  const auto res = grad::finite_diff_check(t, loss, {a, b});
  EXPECT_LE(res.max_rel_error, kFdTol);
}

TEST(TapeOps, ActivationsDifferentiate) {
  SplitMix64 g(4);
  for (const Act k : {Act::relu, Act::gelu, Act::softplus, Act::tanh_act,
                      Act::softplus_floor}) {
    Tape t;
    // Keep relu inputs away from the kink at zero.
    MatrixXd v = random_mat(4, 4, g);
    for (int i = 0; i < v.size(); ++i)
      if (std::abs(v(i / 4, i % 4)) < 0.05) v(i / 4, i % 4) = 0.5;
    const int a = t.param(v);
    const int w = t.constant(random_mat(4, 4, g));
    const int loss = t.sum(t.mul(t.activation(a, k), w));
    const auto res = grad::finite_diff_check(t, loss, {a});
    EXPECT_LE(res.max_rel_error, kFdTol) << "activation " << static_cast<int>(k);
  }
}

TEST(TapeOps, ActivationValues) {
  EXPECT_DOUBLE_EQ(grad::act_eval(Act::relu, -2.0), 0.0);
  EXPECT_DOUBLE_EQ(grad::act_eval(Act::relu, 2.0), 2.0);
  // GELU with the exact-erf gate.
  EXPECT_NEAR(grad::act_eval(Act::gelu, 1.0), 0.5 * (1.0 + std::erf(M_SQRT1_2)), 1e-15);
  EXPECT_NEAR(grad::act_eval(Act::gelu, 0.0), 0.0, 1e-15);
  EXPECT_NEAR(grad::act_eval(Act::softplus, 0.0), std::log(2.0), 1e-15);
  // The floored softplus clamps far-negative inputs to the positive floor.
  EXPECT_DOUBLE_EQ(grad::act_eval(Act::softplus_floor, -40.0), grad::kSoftplusFloor);
  EXPECT_NEAR(grad::act_eval(Act::softplus_floor, 3.0), grad::act_eval(Act::softplus, 3.0),
              1e-15);
  EXPECT_DOUBLE_EQ(grad::act_deriv(Act::softplus_floor, -40.0), 0.0);
}

TEST(TapeOps, TransposeAndRowSoftmax) {
  SplitMix64 g(5);
  Tape t;
  const int a = t.param(random_mat(3, 4, g));
  const int w = t.constant(random_mat(4, 3, g));
  const int loss = t.frob_sq(t.sub(t.transpose(a), w));
  const auto res = grad::finite_diff_check(t, loss, {a});
  EXPECT_LE(res.max_rel_error, kFdTol);

  Tape t2;
  const int b = t2.param(random_mat(4, 5, g));
  const int w2 = t2.constant(random_mat(4, 5, g));
  const int sm = t2.row_softmax(b);
  const int loss2 = t2.sum(t2.mul(sm, w2));
  const auto res2 = grad::finite_diff_check(t2, loss2, {b});
  EXPECT_LE(res2.max_rel_error, kFdTol);
  // Rows of the softmax are probability vectors.
  t2.forward();
  const MatrixXd& s = t2.value(sm);
  for (int r = 0; r < s.rows(); ++r) {
    EXPECT_NEAR(s.row(r).sum(), 1.0, 1e-12);
    EXPECT_GT(s.row(r).minCoeff(), 0.0);
  }
}

TEST(TapeOps, Reductions) {
  SplitMix64 g(6);
  Tape t;
  const MatrixXd v = random_mat(3, 5, g);
  const int a = t.param(v);
  const int s = t.sum(a);
  const int m = t.mean(a);
  const int f = t.frob_sq(a);
  t.forward();
  EXPECT_NEAR(t.scalar(s), v.sum(), 1e-12);
  EXPECT_NEAR(t.scalar(m), v.mean(), 1e-12);
  EXPECT_NEAR(t.scalar(f), v.squaredNorm(), 1e-12);
  for (const int loss : {s, m, f}) {
    const auto res = grad::finite_diff_check(t, loss, {a});
    EXPECT_LE(res.max_rel_error, kFdTol);
  }
}

TEST(TapeOps, BatchBroadcastAndBatchMean) {
  // A batch-1 parameter broadcast against a batch-3 constant slab; batch_mean
  // averages the per-item results.
  SplitMix64 g(7);
  Tape t;
  const MatrixXd p = random_mat(2, 3, g);
  std::vector<MatrixXd> slab = {random_mat(2, 3, g), random_mat(2, 3, g),
                                random_mat(2, 3, g)};
  const int a = t.param(p);
  const int c = t.constant_slab(slab);
  const int prod = t.mul(a, c);
  const int per_item = t.frob_sq(prod);
  EXPECT_EQ(t.batch(per_item), 3);
  const int loss = t.batch_mean(per_item);
  t.forward();
  double manual = 0.0;
  for (const MatrixXd& s : slab) manual += p.cwiseProduct(s).squaredNorm();
  manual /= 3.0;
  EXPECT_NEAR(t.scalar(loss), manual, 1e-12);
  const auto res = grad::finite_diff_check(t, loss, {a});
  EXPECT_LE(res.max_rel_error, kFdTol);
}

TEST(TapeOps, SkewRowsAndCayley) {
  SplitMix64 g(8);
  Tape t;
  const int k = 3;
  const int packed = t.param(random_mat(1, k * (k - 1) / 2, g, 0.5));
  const int skew = t.skew_rows(packed, k);
  const int q = t.cayley(skew);
  const int target = t.constant(random_mat(k, k, g));
  const int loss = t.frob_sq(t.sub(q, target));
  const auto res = grad::finite_diff_check(t, loss, {packed});
  EXPECT_LE(res.max_rel_error, kFdTol);

  // Skew structure and orthonormality of the transform.
  t.forward();
  const MatrixXd& s = t.value(skew);
  EXPECT_LE((s + s.transpose()).cwiseAbs().maxCoeff(), 1e-15);
  const MatrixXd& qv = t.value(q);
  EXPECT_LE((qv * qv.transpose() - MatrixXd::Identity(k, k)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(TapeOps, CayleyTwoByTwoClosedForm) {
  // For A = [[0, a], [-a, 0]] the transform is
  // (I - A)(I + A)^{-1} = [[1 - a^2, -2a], [2a, 1 - a^2]] / (1 + a^2).
  const double a = 0.37;
  Tape t;
  MatrixXd packed(1, 1);
  packed(0, 0) = a;
  const int q = t.cayley(t.skew_rows(t.param(packed), 2));
  t.forward();
  const MatrixXd& qv = t.value(q);
  const double denom = 1.0 + a * a;
  EXPECT_NEAR(qv(0, 0), (1.0 - a * a) / denom, 1e-14);
  EXPECT_NEAR(qv(0, 1), -2.0 * a / denom, 1e-14);
  EXPECT_NEAR(qv(1, 0), 2.0 * a / denom, 1e-14);
  EXPECT_NEAR(qv(1, 1), (1.0 - a * a) / denom, 1e-14);
}

TEST(TapeOps, ColsScaled) {
  // out = A with column j scaled by sv(0, j), padded with zero columns.
  SplitMix64 g(9);
  Tape t;
  const MatrixXd av = random_mat(3, 2, g);
  const MatrixXd sv = random_mat(1, 2, g);
  const int a = t.param(av);
  const int s = t.param(sv);
  const int out = t.cols_scaled(a, s, 4);
  const int w = t.constant(random_mat(3, 4, g));
  const int loss = t.sum(t.mul(out, w));
  t.forward();
  const MatrixXd& o = t.value(out);
  EXPECT_EQ(o.cols(), 4);
  for (int j = 0; j < 2; ++j)
    EXPECT_LE((o.col(j) - sv(0, j) * av.col(j)).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LE(o.col(2).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_LE(o.col(3).cwiseAbs().maxCoeff(), 0.0);
  const auto res = grad::finite_diff_check(t, loss, {a, s});
  EXPECT_LE(res.max_rel_error, kFdTol);
}

TEST(TapeOps, AddRowvec) {
  SplitMix64 g(10);
  Tape t;
  const int a = t.param(random_mat(4, 3, g));
  const int r = t.param(random_mat(1, 3, g));
  const int out = t.add_rowvec(a, r);
  const int loss = t.frob_sq(t.sub(out, t.constant(random_mat(4, 3, g))));
  const auto res = grad::finite_diff_check(t, loss, {a, r});
  EXPECT_LE(res.max_rel_error, kFdTol);
}

TEST(TapeOps, RowdotGather) {
  SplitMix64 g(11);
  Tape t;
  const MatrixXd av = random_mat(4, 3, g);
  std::vector<MatrixXd> bs = {random_mat(5, 3, g), random_mat(5, 3, g),
                              random_mat(5, 3, g)};
  const int a = t.param(av);  // batch 1, broadcasts
  const int b = t.constant_slab(bs);
  const std::vector<int> ia = {0, 2, 1}, ib = {4, 0, 3};
  const int out = t.rowdot_gather(a, b, ia, ib);
  const int loss = t.frob_sq(out);
  t.forward();
  const MatrixXd& o = t.value(out);
  ASSERT_EQ(o.rows(), 3);
  for (int i = 0; i < 3; ++i)
    EXPECT_NEAR(o(i, 0), av.row(ia[i]).dot(bs[static_cast<std::size_t>(i)].row(ib[i])),
                1e-13);
  const auto res = grad::finite_diff_check(t, loss, {a});
  EXPECT_LE(res.max_rel_error, kFdTol);

  // set_gather swaps the index lists in place.
  t.set_gather(out, {1, 1, 1}, {0, 0, 0});
  t.forward();
  for (int i = 0; i < 3; ++i)
    EXPECT_NEAR(t.value(out)(i, 0), av.row(1).dot(bs[static_cast<std::size_t>(i)].row(0)),
                1e-13);
}

TEST(TapeExec, ForwardRangeRecomputesSuffix) {
  SplitMix64 g(12);
  Tape t;
  const int a = t.param(random_mat(2, 2, g));
  const int c = t.constant(random_mat(2, 2, g));
  const int prod = t.matmul(a, c);
  const int loss = t.frob_sq(prod);
  t.forward();
  const double l0 = t.scalar(loss);
  // Change the constant and recompute only the nodes after it.
  t.set_value(c, 2.0 * t.value(c));
  t.forward_after(c);
  const double l1 = t.scalar(loss);
  EXPECT_GT(std::abs(l1 - l0), 1e-12);
  // Full forward agrees.
  t.forward();
  EXPECT_DOUBLE_EQ(t.scalar(loss), l1);
}

TEST(TapeExec, BackwardIsRepeatable) {
  SplitMix64 g(13);
  Tape t;
  const int a = t.param(random_mat(3, 3, g));
  const int loss = t.frob_sq(t.matmul(a, a, false, true));
  t.forward();
  t.backward(loss);
  const MatrixXd g1 = t.adjoint(a);
  t.backward(loss);
  const MatrixXd g2 = t.adjoint(a);
  EXPECT_EQ((g1 - g2).cwiseAbs().maxCoeff(), 0.0);
}

TEST(TapeExec, ErrorPaths) {
  Tape t;
  const int a = t.param(MatrixXd::Ones(2, 2));
  const int m = t.matmul(a, a);
  EXPECT_THROW(t.backward(m), fblab::ConfigError);  // not scalar
  EXPECT_THROW(t.set_value(m, MatrixXd::Ones(2, 2)), fblab::ConfigError);
  EXPECT_THROW(t.set_value(a, MatrixXd::Ones(3, 3)), fblab::ConfigError);
  EXPECT_THROW(t.scalar(a), fblab::ConfigError);
  const int c = t.constant(MatrixXd::Ones(1, 1));
  const int s = t.sum(c);
  t.forward();
  EXPECT_THROW(t.backward(s), fblab::ConfigError);  // no parameter dependency
}

TEST(TapeExec, PreciseEvaluationMatchesDoubleForward) {
  // Build one graph that routes through every op kind, then check that the
  // extended-precision re-evaluation reproduces the double forward to within
  // double rounding and leaves the stored values untouched.
  SplitMix64 g(21);
  Tape t;
  const int packed = t.param(random_mat(2, 6, g, 0.4));    // batch of 2 skew 4x4
  const int rot = t.cayley(t.skew_rows(packed, 4));
  const int sv = t.param(random_mat(2, 3, g, 0.3));
  const int scaled = t.cols_scaled(rot, sv, 3);            // batch 2, 4x3
  const int w = t.param(random_mat(3, 5, g));
  const int h1 = t.activation(t.matmul(scaled, w), Act::gelu);
  const int bias = t.param(random_mat(1, 5, g, 0.2));
  const int sm = t.row_softmax(t.add_rowvec(h1, bias));
  const int keys = t.constant(random_mat(4, 5, g));
  const int dots = t.rowdot_gather(sm, keys, {0, 2}, {3, 1});
  const int deep = t.frob_sq(t.transpose(dots));

  const int y = t.param(random_mat(3, 4, g));
  const int c = t.constant(random_mat(3, 4, g));
  const int mixed = t.mul(t.add(y, c), t.sub(y, c));
  const int acts = t.activation(t.activation(t.activation(mixed, Act::tanh_act), Act::softplus),
                         Act::softplus_floor);
  const int elem = t.add(t.sum(t.activation(acts, Act::relu)), t.mean(mixed));

  std::vector<MatrixXd> slab = {random_mat(2, 2, g), random_mat(2, 2, g),
                                random_mat(2, 2, g)};
  const int cs = t.constant_slab(slab);
  const int bm = t.frob_sq(t.batch_mean(t.mul(cs, t.param(random_mat(2, 2, g)))));

  const int loss = t.add(t.add(deep, t.scale(elem, 0.7)), bm);
  t.forward();
  const double direct = t.scalar(loss);
  const MatrixXd sm_before = t.value(sm);
  const long double precise = t.eval_scalar_precise(loss);
  EXPECT_NEAR(static_cast<double>(precise), direct,
              1e-12 * std::max(1.0, std::abs(direct)));
  // The stored double values were not disturbed.
  EXPECT_EQ((t.value(sm) - sm_before).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(t.scalar(loss), direct);
  EXPECT_THROW(t.eval_scalar_precise(sm), fblab::ConfigError);  // not scalar

  // Both probes verify the analytic gradient on this graph.
  const std::vector<int> params = {packed, sv, w, bias, y};
  const auto plain = grad::finite_diff_check(t, loss, params);
  EXPECT_LE(plain.max_rel_error, kFdTol);
  const auto sharp = grad::precise_diff_check(t, loss, params);
  EXPECT_LE(sharp.max_rel_error, kFdTol);
  EXPECT_NEAR(sharp.max_abs_analytic, plain.max_abs_analytic, 0.0);
}

TEST(AdamW, FirstStepClosedForm) {
  // With fresh moments the first update is
  //   p <- p (1 - lr wd) - lr g / (|g| + eps), elementwise.
  Tape t;
  MatrixXd p0(1, 3);
  p0 << 1.0, -2.0, 0.5;
  const int a = t.param(p0);
  const MatrixXd w = MatrixXd::Constant(1, 3, 1.0);
  const int loss = t.sum(t.mul(a, t.constant(w)));  // gradient = all ones
  grad::AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.01;
  cfg.eps = 1e-5;
  grad::AdamW opt(t, {a}, cfg);
  EXPECT_EQ(opt.step_count(), 0);
  t.forward();
  t.backward(loss);
  opt.step();
  EXPECT_EQ(opt.step_count(), 1);
  for (int j = 0; j < 3; ++j) {
    const double expect = p0(0, j) * (1.0 - cfg.lr * cfg.weight_decay) -
                          cfg.lr * 1.0 / (1.0 + cfg.eps);
    EXPECT_NEAR(t.value(a)(0, j), expect, 1e-15);
  }
}

TEST(AdamW, ConvergesOnQuadratic) {
  // Minimize ||a - c||^2; AdamW with zero decay should settle near c.
  SplitMix64 g(14);
  Tape t;
  const MatrixXd target = random_mat(2, 2, g);
  const int a = t.param(MatrixXd::Zero(2, 2));
  const int loss = t.frob_sq(t.sub(a, t.constant(target)));
  grad::AdamWConfig cfg;
  cfg.lr = 0.05;
  cfg.weight_decay = 0.0;
  grad::AdamW opt(t, {a}, cfg);
  for (int i = 0; i < 2000; ++i) {
    t.forward();
    t.backward(loss);
    opt.step();
  }
  t.forward();
  EXPECT_LE((t.value(a) - target).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(AdamW, DeterministicAcrossRuns) {
  auto run = [] {
    Tape t;
    MatrixXd p(1, 2);
    p << 0.3, -0.4;
    const int a = t.param(p);
    const int loss = t.frob_sq(t.matmul(a, a, false, true));
    grad::AdamW opt(t, {a});
    for (int i = 0; i < 50; ++i) {
      t.forward();
      t.backward(loss);
      opt.step();
    }
    return MatrixXd(t.value(a));
  };
  const MatrixXd x = run(), y = run();
  EXPECT_EQ((x - y).cwiseAbs().maxCoeff(), 0.0);
}

}  // namespace
