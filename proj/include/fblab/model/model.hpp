#pragma once

#include <Eigen/Dense>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fblab/cmp/cmp.hpp"
#include "fblab/cmp/oracle.hpp"
#include "fblab/core/error.hpp"
#include "fblab/core/rng.hpp"
#include "fblab/grad/tape.hpp"
#include "fblab/latent/latent.hpp"

namespace fblab::model {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

enum class Algo { fb, onestep_fb };
enum class ParamKind { svd_cayley, plain };

inline std::string algo_name(Algo a) { return a == Algo::fb ? "fb" : "onestep_fb"; }
inline std::string param_kind_name(ParamKind k) {
  return k == ParamKind::svd_cayley ? "svd_cayley" : "plain";
}
inline Algo parse_algo(const std::string& s) {
  if (s == "fb") return Algo::fb;
  if (s == "onestep_fb") return Algo::onestep_fb;
  throw ConfigError("unknown algo '" + s + "' (expected fb or onestep_fb)");
}
inline ParamKind parse_param_kind(const std::string& s) {
  if (s == "svd_cayley") return ParamKind::svd_cayley;
  if (s == "plain") return ParamKind::plain;
  throw ConfigError("unknown param_kind '" + s + "' (expected svd_cayley or plain)");
}

inline int skew_param_count(int k) { return k * (k - 1) / 2; }

/// Expands a packed row (strict upper triangle, row-major) into the full
/// skew-symmetric matrix.
inline Mat skew_from_packed(const Eigen::RowVectorXd& p, int k) {
  if (p.size() != skew_param_count(k))
    throw ConfigError("skew_from_packed: wrong packed length");
  Mat a = Mat::Zero(k, k);
  int idx = 0;
  for (int r = 0; r < k; ++r)
    for (int c = r + 1; c < k; ++c, ++idx) {
      a(r, c) = p(idx);
      a(c, r) = -p(idx);
    }
  return a;
}

/// Cayley transform (I - A)(I + A)^{-1}; orthonormal for skew-symmetric A.
inline Mat cayley(const Mat& a) {
  const Eigen::Index k = a.rows();
  Eigen::PartialPivLU<Mat> lu(Mat::Identity(k, k) + a);
  Mat inv = lu.solve(Mat::Identity(k, k));
  if (!inv.allFinite()) throw NumericError("cayley: I + A is singular");
  return (Mat::Identity(k, k) - a) * inv;
}

inline Mat cayley_from_packed(const Eigen::RowVectorXd& p, int k) {
  return cayley(skew_from_packed(p, k));
}

/// rows x cols product U * Sigma * V^T where Sigma is the rectangular diagonal
/// of softplus-floored pre-activations (one per usable diagonal entry).
inline Mat svd_compose(const Mat& u, const Eigen::RowVectorXd& sv_preact, const Mat& v,
                       int out_cols) {
  const int usable = static_cast<int>(
      std::min<Eigen::Index>(std::min<Eigen::Index>(u.cols(), sv_preact.size()), out_cols));
  Mat core = Mat::Zero(u.rows(), out_cols);
  for (int j = 0; j < usable; ++j)
    core.col(j) = grad::act_eval(grad::Act::softplus_floor, sv_preact(j)) * u.col(j);
  return core * v.transpose();
}

// ---------------------------------------------------------------------------
// MLP
// ---------------------------------------------------------------------------

/// Weights for a fixed-depth MLP: three hidden layers of width 32 with GELU,
/// then a linear head. Weight layout is (in x out); inputs are row vectors.
struct Mlp {
  std::vector<Mat> w;  // w0..w3
  std::vector<Mat> b;  // b0..b3, each 1 x out

  static constexpr int kHidden = 32;
  static constexpr int kLayers = 4;

  static Mlp init(int in_dim, int out_dim, core::SplitMix64& rng) {
    Mlp m;
    const int dims[kLayers + 1] = {in_dim, kHidden, kHidden, kHidden, out_dim};
    for (int l = 0; l < kLayers; ++l) {
      Mat w(dims[l], dims[l + 1]);
      if (l < kLayers - 1) {
        const double scale = 1.0 / std::sqrt(static_cast<double>(dims[l]));
        for (Eigen::Index r = 0; r < w.rows(); ++r)
          for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = scale * rng.normal();
      } else {
        // Zero head: factor pre-activations start at 0 (identity factors),
        // independent of the network input until training moves the head.
        w.setZero();
      }
      m.w.push_back(std::move(w));
      m.b.emplace_back(Mat::Zero(1, dims[l + 1]));
    }
    return m;
  }

  Eigen::RowVectorXd forward(const Eigen::RowVectorXd& in) const {
    Eigen::RowVectorXd x = in;
    for (int l = 0; l < kLayers; ++l) {
      x = x * w[static_cast<std::size_t>(l)] + b[static_cast<std::size_t>(l)].row(0);
      if (l < kLayers - 1)
        x = x.unaryExpr([](double v) { return grad::act_eval(grad::Act::gelu, v); });
    }
    return x;
  }
};

// ---------------------------------------------------------------------------
// Latent-conditioned model
// ---------------------------------------------------------------------------

/// Latent-conditioned representation: three independent MLPs map the
/// preprocessed latent to the factor parameters of F_z = U_F Sigma_F V_F^T
/// (orthonormal U_F, V_F via the Cayley transform of predicted skew
/// parameters, positive singular values via a floored softplus). The backward
/// matrix B = U_B Sigma_B V_B^T is parameterized the same way with directly
/// learnable factor parameters.
struct FbModel {
  int n = 0;  // state-action pair count
  int d = 0;
  double tau_policy_train = 5e-3;
  double tau_policy_eval = 1.0;

  Mlp fwd_u, fwd_sv, fwd_v;
  Eigen::RowVectorXd bwd_u_skew;  // packed skew of U_B (d x d)
  Eigen::RowVectorXd bwd_sv;      // min(d, n) pre-activations
  Eigen::RowVectorXd bwd_v_skew;  // packed skew of V_B (n x n)

  static FbModel init(int n_pairs, int d, std::uint64_t seed) {
    if (d < 1) throw ConfigError("model init: d must be >= 1");
    FbModel m;
    m.n = n_pairs;
    m.d = d;
    core::SplitMix64 rng(core::derive(seed, core::stream::kModelInit));
    m.fwd_u = Mlp::init(d, skew_param_count(n_pairs), rng);
    m.fwd_sv = Mlp::init(d, n_pairs, rng);
    m.fwd_v = Mlp::init(d, skew_param_count(d), rng);
    m.bwd_u_skew = Eigen::RowVectorXd::Zero(skew_param_count(d));
    m.bwd_sv = Eigen::RowVectorXd::Zero(std::min(d, n_pairs));
    m.bwd_v_skew = Eigen::RowVectorXd::Zero(skew_param_count(n_pairs));
    return m;
  }

  /// F_z for a raw latent (preprocessing applied internally). Shape n x d.
  Mat forward_matrix(const Vec& z) const {
    const Vec zt = latent::preprocess_latent(z);
    const Eigen::RowVectorXd in = zt.transpose();
    const Mat u = cayley_from_packed(fwd_u.forward(in), n);
    const Eigen::RowVectorXd sv = fwd_sv.forward(in);
    const Mat v = cayley_from_packed(fwd_v.forward(in), d);
    return svd_compose(u, sv, v, d);
  }

  /// B, shape d x n.
  Mat backward_matrix() const {
    const Mat u = cayley_from_packed(bwd_u_skew, d);
    const Mat v = cayley_from_packed(bwd_v_skew, n);
    return svd_compose(u, bwd_sv, v, n);
  }
};

// ---------------------------------------------------------------------------
// Latent-free model
// ---------------------------------------------------------------------------

/// Latent-free behavioral representation: F (n x d) and B (d x n), either as
/// the same orthonormal-factor parameterization as FbModel (svd_cayley) or as
/// unconstrained matrices (plain).
struct OneStepModel {
  int n = 0;
  int d = 0;
  ParamKind kind = ParamKind::plain;

  // svd_cayley parameters
  Eigen::RowVectorXd f_u_skew, f_sv, f_v_skew;
  Eigen::RowVectorXd b_u_skew, b_sv, b_v_skew;
  // plain parameters
  Mat f_mat, b_mat;

  static OneStepModel init(int n_pairs, int d, std::uint64_t seed, ParamKind kind) {
    if (d < 1) throw ConfigError("model init: d must be >= 1");
    OneStepModel m;
    m.n = n_pairs;
    m.d = d;
    m.kind = kind;
    core::SplitMix64 rng(core::derive(seed, core::stream::kModelInit));
    if (kind == ParamKind::svd_cayley) {
      // Zero pre-activations: identity rotations, uniform positive singular
      // values — the deterministic analog of the zero-head network init.
      m.f_u_skew = Eigen::RowVectorXd::Zero(skew_param_count(n_pairs));
      m.f_sv = Eigen::RowVectorXd::Zero(std::min(n_pairs, d));
      m.f_v_skew = Eigen::RowVectorXd::Zero(skew_param_count(d));
      m.b_u_skew = Eigen::RowVectorXd::Zero(skew_param_count(d));
      m.b_sv = Eigen::RowVectorXd::Zero(std::min(d, n_pairs));
      m.b_v_skew = Eigen::RowVectorXd::Zero(skew_param_count(n_pairs));
    } else {
      m.f_mat = Mat(n_pairs, d);
      m.b_mat = Mat(d, n_pairs);
      const double fs = 1.0 / std::sqrt(static_cast<double>(d));
      for (Eigen::Index r = 0; r < m.f_mat.rows(); ++r)
        for (Eigen::Index c = 0; c < m.f_mat.cols(); ++c) m.f_mat(r, c) = fs * rng.normal();
      const double bs = 1.0 / std::sqrt(static_cast<double>(n_pairs));
      for (Eigen::Index r = 0; r < m.b_mat.rows(); ++r)
        for (Eigen::Index c = 0; c < m.b_mat.cols(); ++c) m.b_mat(r, c) = bs * rng.normal();
    }
    return m;
  }

  Mat forward_matrix() const {
    if (kind == ParamKind::plain) return f_mat;
    return svd_compose(cayley_from_packed(f_u_skew, n), f_sv, cayley_from_packed(f_v_skew, d),
                       d);
  }

  Mat backward_matrix() const {
    if (kind == ParamKind::plain) return b_mat;
    return svd_compose(cayley_from_packed(b_u_skew, d), b_sv, cayley_from_packed(b_v_skew, n),
                       n);
  }
};

/// Q prediction for a raw latent: F_z z (latent-conditioned) or F z.
inline Vec q_prediction(const Mat& forward, const Vec& z) { return forward * z; }

/// Softmax policy over per-state scores F(s,a,z)^T z.
inline cmp::Policy induced_policy(const Mat& forward, const Vec& z, double tau,
                                  int n_states, int n_actions) {
  return cmp::softmax_policy(q_prediction(forward, z), tau, n_states, n_actions);
}

// ---------------------------------------------------------------------------
// Ground truths
// ---------------------------------------------------------------------------

/// Exact latent-free representation from the SVD of the behavioral ratio
/// T = M^{pi_beta} diag(rho)^{-1}: F = U Sigma (first d columns), B = V^T
/// (first d rows). For d = n the product reproduces T to machine precision;
/// for d < n it is the best rank-d approximation.
inline OneStepModel ground_truth_onestep(const cmp::Cmp& c, const cmp::Policy& behavioral,
                                         const Vec& rho, int d) {
  const Mat m = cmp::successor_measure(c, behavioral);
  const Mat target = m * rho.cwiseInverse().asDiagonal();
  Eigen::JacobiSVD<Mat> svd(target, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (!svd.matrixU().allFinite()) throw NumericError("ground_truth_onestep: SVD failed");
  const int n = c.num_pairs();
  if (d < 1 || d > n) throw ConfigError("ground_truth_onestep: d out of range");
  OneStepModel out;
  out.n = n;
  out.d = d;
  out.kind = ParamKind::plain;
  out.f_mat = svd.matrixU().leftCols(d) * svd.singularValues().head(d).asDiagonal();
  out.b_mat = svd.matrixV().leftCols(d).transpose();
  return out;
}

/// Orthonormal d x d rotation from a random packed skew via Cayley.
inline Mat random_rotation(int d, core::SplitMix64& rng) {
  Eigen::RowVectorXd p(skew_param_count(d));
  for (Eigen::Index i = 0; i < p.size(); ++i) p(i) = rng.normal();
  return cayley_from_packed(p, d);
}

/// Applies an invertible latent-space change of basis: F' = F Q^T, B' = Q B.
/// For orthonormal Q the product F'B' equals FB exactly (the factorization is
/// not unique).
inline OneStepModel rotate_onestep(const OneStepModel& m, const Mat& q) {
  if (q.rows() != m.d || q.cols() != m.d)
    throw ConfigError("rotate_onestep: rotation must be d x d");
  OneStepModel out;
  out.n = m.n;
  out.d = m.d;
  out.kind = ParamKind::plain;
  out.f_mat = m.forward_matrix() * q.transpose();
  out.b_mat = q * m.backward_matrix();
  return out;
}

/// Exact latent-conditioned representation on a fixed CMP: B is the top-d
/// right-singular-vector matrix of the behavioral ratio, and F_z is the
/// induced-optimal successor ratio times B^{-1} (requires d = n so B is
/// square orthonormal). Policies are greedy w.r.t. the value-iteration
/// optimum of the decoded reward, which is exactly the policy the model
/// itself induces at its own ground truth.
struct GroundTruthFb {
  cmp::Cmp env;
  Vec rho;
  Mat b;      // d x n, orthonormal rows
  Mat b_inv;  // n x d

  static GroundTruthFb build(const cmp::Cmp& c, const Vec& rho) {
    GroundTruthFb g;
    g.env = c;
    g.rho = rho;
    const cmp::Policy uni = cmp::uniform_policy(c.num_states, c.num_actions);
    const Mat m = cmp::successor_measure(c, uni);
    const Mat target = m * rho.cwiseInverse().asDiagonal();
    Eigen::JacobiSVD<Mat> svd(target, Eigen::ComputeFullV);
    g.b = svd.matrixV().transpose();
    g.b_inv = svd.matrixV();
    return g;
  }

  /// Decoded reward for a latent: (B^{-1} z) / rho elementwise.
  Vec reward_of(const Vec& z) const { return (b_inv * z).cwiseQuotient(rho); }

  /// Greedy policy that is optimal for the decoded reward.
  cmp::Policy policy_of(const Vec& z) const {
    const Vec q = cmp::value_iteration(env, reward_of(z), cmp::ViMode::optimal);
    return cmp::greedy_policy(q, env.num_states, env.num_actions);
  }

  Mat forward_matrix(const Vec& z) const {
    const Mat m = cmp::successor_measure(env, policy_of(z));
    return m * rho.cwiseInverse().asDiagonal() * b_inv;
  }
};

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
//
// Text format. Header: `fbckpt v1 <algo> <param_kind> <d> <n_states>
// <n_actions>`, then one `tensor <name> <rows> <cols>` block per parameter in
// a fixed order, values row-major with 17 significant digits (exact
// round-trip for doubles).
// ---------------------------------------------------------------------------

namespace detail {

inline void write_tensor(std::ostream& os, const std::string& name, const Mat& m) {
  os << "tensor " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
  char buf[40];
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      std::snprintf(buf, sizeof buf, "%.16e", m(r, c));
      os << buf << (c + 1 == m.cols() ? "" : " ");
    }
    os << '\n';
  }
}

inline Mat read_tensor(cmp::detail::TokenReader& tr, const std::string& expect_name,
                       Eigen::Index rows, Eigen::Index cols) {
  const std::string kw = tr.require("'tensor'");
  if (kw != "tensor")
    throw ConfigError("checkpoint parse error at line " + std::to_string(tr.line_no()) +
                      ": expected 'tensor', got '" + kw + "'");
  const std::string name = tr.require("tensor name");
  if (name != expect_name)
    throw ConfigError("checkpoint parse error at line " + std::to_string(tr.line_no()) +
                      ": expected tensor '" + expect_name + "', got '" + name + "'");
  const int r = tr.require_int("tensor rows");
  const int c = tr.require_int("tensor cols");
  if (r != rows || c != cols)
    throw ConfigError("checkpoint parse error: tensor '" + expect_name +
                      "' has shape " + std::to_string(r) + "x" + std::to_string(c) +
                      ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = tr.require_double("tensor value");
  return m;
}

inline void expect_end(cmp::detail::TokenReader& tr) {
  std::string tok;
  if (tr.next(tok))
    throw ConfigError("checkpoint parse error at line " + std::to_string(tr.line_no()) +
                      ": trailing content '" + tok + "'");
}

struct Header {
  std::string algo, kind;
  int d = 0, n_states = 0, n_actions = 0;
};

inline Header read_header(cmp::detail::TokenReader& tr) {
  const std::string magic = tr.require("'fbckpt'");
  const std::string version = tr.require("version");
  if (magic != "fbckpt" || version != "v1")
    throw ConfigError("checkpoint parse error: bad header '" + magic + " " + version + "'");
  Header h;
  h.algo = tr.require("algo");
  h.kind = tr.require("param_kind");
  h.d = tr.require_int("d");
  h.n_states = tr.require_int("n_states");
  h.n_actions = tr.require_int("n_actions");
  if (h.d < 1 || h.n_states < 1 || h.n_actions < 1)
    throw ConfigError("checkpoint parse error: non-positive dimensions in header");
  return h;
}

}  // namespace detail

struct CheckpointInfo {
  Algo algo = Algo::fb;
  ParamKind kind = ParamKind::svd_cayley;
  int d = 0, n_states = 0, n_actions = 0;
};

/// Reads only the header so callers can dispatch on algo before loading.
inline CheckpointInfo peek_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open checkpoint file: " + path);
  cmp::detail::TokenReader tr(is);
  const detail::Header h = detail::read_header(tr);
  return {parse_algo(h.algo), parse_param_kind(h.kind), h.d, h.n_states, h.n_actions};
}

inline void save_checkpoint(const FbModel& m, int n_states, int n_actions, std::ostream& os) {
  os << "fbckpt v1 fb svd_cayley " << m.d << ' ' << n_states << ' ' << n_actions << '\n';
  const char* nets[3] = {"fwd_u", "fwd_sv", "fwd_v"};
  const Mlp* mlps[3] = {&m.fwd_u, &m.fwd_sv, &m.fwd_v};
  for (int k = 0; k < 3; ++k)
    for (int l = 0; l < Mlp::kLayers; ++l) {
      detail::write_tensor(os, std::string(nets[k]) + ".w" + std::to_string(l),
                           mlps[k]->w[static_cast<std::size_t>(l)]);
      detail::write_tensor(os, std::string(nets[k]) + ".b" + std::to_string(l),
                           mlps[k]->b[static_cast<std::size_t>(l)]);
    }
  detail::write_tensor(os, "bwd.u_skew", m.bwd_u_skew);
  detail::write_tensor(os, "bwd.sv", m.bwd_sv);
  detail::write_tensor(os, "bwd.v_skew", m.bwd_v_skew);
}

inline void save_checkpoint(const OneStepModel& m, int n_states, int n_actions,
                            std::ostream& os) {
  os << "fbckpt v1 onestep_fb " << param_kind_name(m.kind) << ' ' << m.d << ' ' << n_states
     << ' ' << n_actions << '\n';
  if (m.kind == ParamKind::svd_cayley) {
    detail::write_tensor(os, "f.u_skew", m.f_u_skew);
    detail::write_tensor(os, "f.sv", m.f_sv);
    detail::write_tensor(os, "f.v_skew", m.f_v_skew);
    detail::write_tensor(os, "b.u_skew", m.b_u_skew);
    detail::write_tensor(os, "b.sv", m.b_sv);
    detail::write_tensor(os, "b.v_skew", m.b_v_skew);
  } else {
    detail::write_tensor(os, "f.mat", m.f_mat);
    detail::write_tensor(os, "b.mat", m.b_mat);
  }
}

template <class Model>
inline void save_checkpoint_file(const Model& m, int n_states, int n_actions,
                                 const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write checkpoint file: " + path);
  save_checkpoint(m, n_states, n_actions, os);
  os.flush();
  if (!os) throw ConfigError("failed writing checkpoint file: " + path);
}

/// Loads a latent-conditioned checkpoint; n_states/n_actions are returned via
/// the out parameters when non-null.
inline FbModel load_fb_checkpoint(std::istream& is, int* n_states_out = nullptr,
                                  int* n_actions_out = nullptr) {
  cmp::detail::TokenReader tr(is);
  const detail::Header h = detail::read_header(tr);
  if (h.algo != "fb")
    throw ConfigError("checkpoint algo mismatch: expected fb, got " + h.algo);
  if (h.kind != "svd_cayley")
    throw ConfigError("checkpoint param_kind mismatch: fb supports svd_cayley only");
  const int n = h.n_states * h.n_actions;
  FbModel m;
  m.n = n;
  m.d = h.d;
  const char* nets[3] = {"fwd_u", "fwd_sv", "fwd_v"};
  Mlp* mlps[3] = {&m.fwd_u, &m.fwd_sv, &m.fwd_v};
  const int outs[3] = {skew_param_count(n), n, skew_param_count(h.d)};
  for (int k = 0; k < 3; ++k) {
    const int dims[Mlp::kLayers + 1] = {h.d, Mlp::kHidden, Mlp::kHidden, Mlp::kHidden,
                                        outs[k]};
    for (int l = 0; l < Mlp::kLayers; ++l) {
      mlps[k]->w.push_back(detail::read_tensor(tr, std::string(nets[k]) + ".w" +
                                                       std::to_string(l),
                                               dims[l], dims[l + 1]));
      mlps[k]->b.push_back(detail::read_tensor(tr, std::string(nets[k]) + ".b" +
                                                       std::to_string(l),
                                               1, dims[l + 1]));
    }
  }
  m.bwd_u_skew = detail::read_tensor(tr, "bwd.u_skew", 1, skew_param_count(h.d));
  m.bwd_sv = detail::read_tensor(tr, "bwd.sv", 1, std::min(h.d, n));
  m.bwd_v_skew = detail::read_tensor(tr, "bwd.v_skew", 1, skew_param_count(n));
  detail::expect_end(tr);
  if (n_states_out) *n_states_out = h.n_states;
  if (n_actions_out) *n_actions_out = h.n_actions;
  return m;
}

inline OneStepModel load_onestep_checkpoint(std::istream& is, int* n_states_out = nullptr,
                                            int* n_actions_out = nullptr) {
  cmp::detail::TokenReader tr(is);
  const detail::Header h = detail::read_header(tr);
  if (h.algo != "onestep_fb")
    throw ConfigError("checkpoint algo mismatch: expected onestep_fb, got " + h.algo);
  const int n = h.n_states * h.n_actions;
  OneStepModel m;
  m.n = n;
  m.d = h.d;
  m.kind = parse_param_kind(h.kind);
  if (m.kind == ParamKind::svd_cayley) {
    m.f_u_skew = detail::read_tensor(tr, "f.u_skew", 1, skew_param_count(n));
    m.f_sv = detail::read_tensor(tr, "f.sv", 1, std::min(n, h.d));
    m.f_v_skew = detail::read_tensor(tr, "f.v_skew", 1, skew_param_count(h.d));
    m.b_u_skew = detail::read_tensor(tr, "b.u_skew", 1, skew_param_count(h.d));
    m.b_sv = detail::read_tensor(tr, "b.sv", 1, std::min(h.d, n));
    m.b_v_skew = detail::read_tensor(tr, "b.v_skew", 1, skew_param_count(n));
  } else {
    m.f_mat = detail::read_tensor(tr, "f.mat", n, h.d);
    m.b_mat = detail::read_tensor(tr, "b.mat", h.d, n);
  }
  detail::expect_end(tr);
  if (n_states_out) *n_states_out = h.n_states;
  if (n_actions_out) *n_actions_out = h.n_actions;
  return m;
}

inline FbModel load_fb_checkpoint_file(const std::string& path, int* ns = nullptr,
                                       int* na = nullptr) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open checkpoint file: " + path);
  return load_fb_checkpoint(is, ns, na);
}

inline OneStepModel load_onestep_checkpoint_file(const std::string& path, int* ns = nullptr,
                                                 int* na = nullptr) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open checkpoint file: " + path);
  return load_onestep_checkpoint(is, ns, na);
}

}  // namespace fblab::model
