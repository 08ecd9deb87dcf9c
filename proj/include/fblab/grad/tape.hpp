#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "fblab/core/error.hpp"

namespace fblab::grad {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using MatLd = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;

// ---------------------------------------------------------------------------
// Elementwise activations
// ---------------------------------------------------------------------------

enum class Act { relu, gelu, softplus, tanh_act, softplus_floor };

/// Hard positivity floor for singular-value activations.
inline constexpr double kSoftplusFloor = 1e-6;

inline double softplus_stable(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

inline double act_eval(Act k, double x) {
  switch (k) {
    case Act::relu:
      return x > 0.0 ? x : 0.0;
    case Act::gelu:
      return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
    case Act::softplus:
      return softplus_stable(x);
    case Act::tanh_act:
      return std::tanh(x);
    case Act::softplus_floor:
      return std::max(softplus_stable(x), kSoftplusFloor);
  }
  return 0.0;
}

inline long double softplus_stable_ld(long double x) {
  return std::max(x, 0.0L) + std::log1p(std::exp(-std::fabs(x)));
}

/// The same activation map evaluated in extended precision (used by the
/// high-precision loss re-evaluation below, never by training).
inline long double act_eval_ld(Act k, long double x) {
  constexpr long double inv_sqrt2 = 0.7071067811865475244008443621048490L;
  switch (k) {
    case Act::relu:
      return x > 0.0L ? x : 0.0L;
    case Act::gelu:
      return 0.5L * x * (1.0L + std::erf(x * inv_sqrt2));
    case Act::softplus:
      return softplus_stable_ld(x);
    case Act::tanh_act:
      return std::tanh(x);
    case Act::softplus_floor:
      return std::max(softplus_stable_ld(x), static_cast<long double>(kSoftplusFloor));
  }
  return 0.0L;
}

inline double act_deriv(Act k, double x) {
  switch (k) {
    case Act::relu:
      return x > 0.0 ? 1.0 : 0.0;
    case Act::gelu:
      return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) +
             x * std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    case Act::softplus:
      return 1.0 / (1.0 + std::exp(-x));
    case Act::tanh_act: {
      const double t = std::tanh(x);
      return 1.0 - t * t;
    }
    case Act::softplus_floor:
      // Zero in the clamped region: the floor is a hard max.
      return softplus_stable(x) > kSoftplusFloor ? 1.0 / (1.0 + std::exp(-x)) : 0.0;
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------
//
// Reverse-mode differentiation over dense matrices. Node values are *slabs*:
// batches of same-shaped matrices (batch size 1 broadcasts against any batch),
// so one graph evaluates a whole latent batch with a handful of nodes. The
// graph is built once; forward() recomputes every non-leaf value in creation
// order into preallocated storage, so a training loop never reallocates.
// ---------------------------------------------------------------------------

enum class Op {
  param,
  constant,
  matmul,        // opA(a) * opB(b), optional transposes
  add,
  sub,
  mul,           // elementwise product
  scale,         // alpha * a
  act,           // elementwise activation
  transpose,
  row_softmax,
  sum,           // per-item sum of entries -> 1x1
  mean,          // per-item mean of entries -> 1x1
  frob_sq,       // per-item squared Frobenius norm -> 1x1
  batch_mean,    // mean across the batch -> single item
  skew_rows,     // rows of packed params -> slab of skew-symmetric matrices
  cayley,        // per item: (I - A)(I + A)^{-1}
  cols_scaled,   // per item: columns of a scaled by a row of the sv matrix
  add_rowvec,    // per item: add a 1 x k row vector to every row
  rowdot_gather  // batched row-row dot products -> single (m x 1)
};

struct Node {
  Op op = Op::constant;
  int a = -1, b = -1;
  bool trans_a = false, trans_b = false;
  double alpha = 0.0;
  Act activation = Act::relu;
  int aux = 0;                  // skew_rows: matrix size; cols_scaled: out cols
  std::vector<int> idx_a, idx_b;  // rowdot_gather row indices
  bool requires_grad = false;
  std::vector<Mat> val;
  std::vector<Mat> adj;
  std::vector<Mat> cache;  // cayley: (I + A)^{-1} per item
};

class Tape {
 public:
  int param(const Mat& v) { return push_leaf(Op::param, {v}, true); }
  int constant(const Mat& v) { return push_leaf(Op::constant, {v}, false); }
  int constant_slab(std::vector<Mat> v) {
    if (v.empty()) throw ConfigError("tape: empty slab");
    return push_leaf(Op::constant, std::move(v), false);
  }
  int scalar_constant(double v) { return constant(Mat::Constant(1, 1, v)); }

  int matmul(int a, int b, bool trans_a = false, bool trans_b = false) {
    Node n;
    n.op = Op::matmul;
    n.a = a;
    n.b = b;
    n.trans_a = trans_a;
    n.trans_b = trans_b;
    return push(std::move(n));
  }
  int add(int a, int b) { return push_binary(Op::add, a, b); }
  int sub(int a, int b) { return push_binary(Op::sub, a, b); }
  int mul(int a, int b) { return push_binary(Op::mul, a, b); }
  int scale(int a, double alpha) {
    Node n;
    n.op = Op::scale;
    n.a = a;
    n.alpha = alpha;
    return push(std::move(n));
  }
  int activation(int a, Act k) {
    Node n;
    n.op = Op::act;
    n.a = a;
    n.activation = k;
    return push(std::move(n));
  }
  int transpose(int a) {
    Node n;
    n.op = Op::transpose;
    n.a = a;
    return push(std::move(n));
  }
  int row_softmax(int a) {
    Node n;
    n.op = Op::row_softmax;
    n.a = a;
    return push(std::move(n));
  }
  int sum(int a) { return push_unary(Op::sum, a); }
  int mean(int a) { return push_unary(Op::mean, a); }
  int frob_sq(int a) { return push_unary(Op::frob_sq, a); }
  int batch_mean(int a) { return push_unary(Op::batch_mean, a); }

  /// Expands each row of a (m x k(k-1)/2) matrix into a k x k skew-symmetric
  /// matrix: strict upper triangle row-major, A[i][j] = +p, A[j][i] = -p.
  int skew_rows(int a, int k) {
    Node n;
    n.op = Op::skew_rows;
    n.a = a;
    n.aux = k;
    return push(std::move(n));
  }

  /// Per item: Q = (I - A)(I + A)^{-1}. Orthonormal whenever A is skew.
  int cayley(int a) { return push_unary(Op::cayley, a); }

  /// Per item i: out has `out_cols` columns; column j is sv(row_i, j) times
  /// column j of the input (zero where the input or sv runs out of columns).
  /// The sv node must be a single matrix whose row count is the input batch
  /// size or 1. Fuses the product with a rectangular diagonal matrix.
  int cols_scaled(int a, int sv, int out_cols) {
    Node n;
    n.op = Op::cols_scaled;
    n.a = a;
    n.b = sv;
    n.aux = out_cols;
    return push(std::move(n));
  }

  /// Per item: adds a single 1 x k row vector to every row.
  int add_rowvec(int a, int b) { return push_binary(Op::add_rowvec, a, b); }

  /// out(t) = dot(a_item(t).row(idx_a[t]), b_item(t).row(idx_b[t])), a single
  /// (m x 1) matrix. Inputs may be slabs with batch m or broadcast batch 1.
  int rowdot_gather(int a, int b, std::vector<int> idx_a, std::vector<int> idx_b) {
    if (idx_a.size() != idx_b.size() || idx_a.empty())
      throw ConfigError("tape: rowdot_gather needs matching non-empty index lists");
    Node n;
    n.op = Op::rowdot_gather;
    n.a = a;
    n.b = b;
    n.idx_a = std::move(idx_a);
    n.idx_b = std::move(idx_b);
    return push(std::move(n));
  }

  // -- value access ---------------------------------------------------------

  int size() const { return static_cast<int>(nodes_.size()); }
  int batch(int id) const { return static_cast<int>(nodes_[id].val.size()); }
  const std::vector<Mat>& val(int id) const { return nodes_[id].val; }
  const Mat& value(int id) const { return nodes_[id].val[0]; }
  const std::vector<Mat>& adj(int id) const { return nodes_[id].adj; }
  const Mat& adjoint(int id) const { return nodes_[id].adj[0]; }
  double scalar(int id) const {
    const Node& n = nodes_[id];
    if (n.val.size() != 1 || n.val[0].size() != 1)
      throw ConfigError("tape: node is not scalar");
    return n.val[0](0, 0);
  }

  /// Overwrites a leaf value in place; the shape is fixed at creation.
  void set_value(int id, const Mat& v) {
    Node& n = node_for_set(id);
    if (n.val.size() != 1 || v.rows() != n.val[0].rows() || v.cols() != n.val[0].cols())
      throw ConfigError("tape: set_value shape mismatch");
    n.val[0] = v;
  }

  void set_slab(int id, const std::vector<Mat>& v) {
    Node& n = node_for_set(id);
    if (v.size() != n.val.size()) throw ConfigError("tape: set_slab batch mismatch");
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (v[i].rows() != n.val[i].rows() || v[i].cols() != n.val[i].cols())
        throw ConfigError("tape: set_slab shape mismatch");
      n.val[i] = v[i];
    }
  }

  /// Mutable access to one leaf slab item (for writing values in place).
  Mat& leaf_item(int id, int i = 0) {
    Node& n = node_for_set(id);
    return n.val[static_cast<std::size_t>(i)];
  }

  /// Replaces the gather indices of a rowdot_gather node (same count).
  void set_gather(int id, const std::vector<int>& idx_a, const std::vector<int>& idx_b) {
    Node& n = nodes_.at(id);
    if (n.op != Op::rowdot_gather) throw ConfigError("tape: set_gather on wrong node");
    if (idx_a.size() != n.idx_a.size() || idx_b.size() != n.idx_b.size())
      throw ConfigError("tape: set_gather size mismatch");
    n.idx_a = idx_a;
    n.idx_b = idx_b;
  }

  // -- execution ------------------------------------------------------------

  /// Recomputes every non-leaf node in creation order.
  void forward() { forward_range(0, size() - 1); }
  void forward_upto(int id) { forward_range(0, id); }
  void forward_after(int id) { forward_range(id + 1, size() - 1); }

  void forward_range(int lo, int hi) {
    for (int i = std::max(lo, 0); i <= hi && i < size(); ++i)
      if (nodes_[i].op != Op::param && nodes_[i].op != Op::constant) eval_node(i);
  }

  /// Reverse pass from a scalar loss node; adjoints are zeroed first.
  void backward(int loss) {
    Node& l = nodes_.at(loss);
    if (l.val.size() != 1 || l.val[0].rows() != 1 || l.val[0].cols() != 1)
      throw ConfigError("tape: backward requires a scalar loss node");
    if (!l.requires_grad)
      throw ConfigError("tape: loss does not depend on any parameter");
    for (Node& n : nodes_)
      if (n.requires_grad)
        for (Mat& g : n.adj) g.setZero();
    l.adj[0](0, 0) = 1.0;
    for (int i = loss; i >= 0; --i)
      if (nodes_[i].requires_grad) backprop_node(i);
  }

  /// Re-evaluates the graph up to `target` in extended (long double)
  /// precision and returns its scalar value. Deep compositions accumulate
  /// enough double rounding that central differences of the double forward
  /// cannot resolve small gradient coordinates; verification probes therefore
  /// difference this evaluation instead. The pass reads leaf values from the
  /// stored double slabs, works in a local workspace, and leaves every node
  /// value and adjoint untouched.
  long double eval_scalar_precise(int target) const {
    check_id(target);
    std::vector<std::vector<MatLd>> vals(static_cast<std::size_t>(target) + 1);
    for (int id = 0; id <= target; ++id) eval_node_precise(id, vals);
    const std::vector<MatLd>& out = vals[static_cast<std::size_t>(target)];
    if (out.size() != 1 || out[0].size() != 1)
      throw ConfigError("tape: node is not scalar");
    return out[0](0, 0);
  }

 private:
  std::vector<Node> nodes_;

  Node& node_for_set(int id) {
    Node& n = nodes_.at(id);
    if (n.op != Op::param && n.op != Op::constant)
      throw ConfigError("tape: only leaf values can be overwritten");
    return n;
  }

  int push_leaf(Op op, std::vector<Mat> v, bool grad) {
    Node n;
    n.op = op;
    n.requires_grad = grad;
    n.val = std::move(v);
    if (grad) {
      n.adj.reserve(n.val.size());
      for (const Mat& m : n.val) n.adj.emplace_back(Mat::Zero(m.rows(), m.cols()));
    }
    nodes_.push_back(std::move(n));
    return size() - 1;
  }

  int push_unary(Op op, int a) {
    Node n;
    n.op = op;
    n.a = a;
    return push(std::move(n));
  }

  int push_binary(Op op, int a, int b) {
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    return push(std::move(n));
  }

  int push(Node&& n) {
    check_id(n.a);
    if (n.b >= 0) check_id(n.b);
    n.requires_grad = nodes_[n.a].requires_grad ||
                      (n.b >= 0 && nodes_[n.b].requires_grad);
    nodes_.push_back(std::move(n));
    const int id = size() - 1;
    eval_node(id);
    Node& self = nodes_[id];
    if (self.requires_grad) {
      self.adj.clear();
      self.adj.reserve(self.val.size());
      for (const Mat& m : self.val) self.adj.emplace_back(Mat::Zero(m.rows(), m.cols()));
    }
    return id;
  }

  void check_id(int id) const {
    if (id < 0 || id >= size()) throw ConfigError("tape: invalid input node id");
  }

  static int out_batch(const Node& x, const Node& y) {
    const int ba = static_cast<int>(x.val.size());
    const int bb = static_cast<int>(y.val.size());
    if (ba != bb && ba != 1 && bb != 1)
      throw ConfigError("tape: incompatible batch sizes");
    return std::max(ba, bb);
  }

  static const Mat& item(const Node& x, int i) {
    return x.val[x.val.size() == 1 ? 0 : static_cast<std::size_t>(i)];
  }

  Mat& adj_item(Node& x, int i) {
    return x.adj[x.adj.size() == 1 ? 0 : static_cast<std::size_t>(i)];
  }

  void ensure_shape(Node& n, int batch, Eigen::Index rows, Eigen::Index cols) {
    if (static_cast<int>(n.val.size()) != batch) n.val.resize(static_cast<std::size_t>(batch));
    for (Mat& m : n.val)
      if (m.rows() != rows || m.cols() != cols) m = Mat::Zero(rows, cols);
  }

  // -- forward kernels ------------------------------------------------------

  void eval_node(int id) {
    Node& n = nodes_[id];
    const Node* pa = n.a >= 0 ? &nodes_[n.a] : nullptr;
    const Node* pb = n.b >= 0 ? &nodes_[n.b] : nullptr;
    switch (n.op) {
      case Op::param:
      case Op::constant:
        return;
      case Op::matmul: {
        const int batch = out_batch(*pa, *pb);
        const Eigen::Index rows = n.trans_a ? item(*pa, 0).cols() : item(*pa, 0).rows();
        const Eigen::Index inner_a = n.trans_a ? item(*pa, 0).rows() : item(*pa, 0).cols();
        const Eigen::Index inner_b = n.trans_b ? item(*pb, 0).cols() : item(*pb, 0).rows();
        const Eigen::Index cols = n.trans_b ? item(*pb, 0).rows() : item(*pb, 0).cols();
        if (inner_a != inner_b) throw ConfigError("tape: matmul inner dimension mismatch");
        ensure_shape(n, batch, rows, cols);
        for (int i = 0; i < batch; ++i) {
          const Mat& a = item(*pa, i);
          const Mat& b = item(*pb, i);
          if (!n.trans_a && !n.trans_b)
            n.val[i].noalias() = a * b;
          else if (n.trans_a && !n.trans_b)
            n.val[i].noalias() = a.transpose() * b;
          else if (!n.trans_a && n.trans_b)
            n.val[i].noalias() = a * b.transpose();
          else
            n.val[i].noalias() = a.transpose() * b.transpose();
        }
        return;
      }
      case Op::add:
      case Op::sub:
      case Op::mul: {
        const int batch = out_batch(*pa, *pb);
        const Mat& a0 = item(*pa, 0);
        const Mat& b0 = item(*pb, 0);
        if (a0.rows() != b0.rows() || a0.cols() != b0.cols())
          throw ConfigError("tape: elementwise shape mismatch");
        ensure_shape(n, batch, a0.rows(), a0.cols());
        for (int i = 0; i < batch; ++i) {
          const Mat& a = item(*pa, i);
          const Mat& b = item(*pb, i);
          if (n.op == Op::add)
            n.val[i] = a + b;
          else if (n.op == Op::sub)
            n.val[i] = a - b;
          else
            n.val[i] = a.cwiseProduct(b);
        }
        return;
      }
      case Op::scale: {
        const int batch = static_cast<int>(pa->val.size());
        ensure_shape(n, batch, item(*pa, 0).rows(), item(*pa, 0).cols());
        for (int i = 0; i < batch; ++i) n.val[i] = n.alpha * item(*pa, i);
        return;
      }
      case Op::act: {
        const int batch = static_cast<int>(pa->val.size());
        ensure_shape(n, batch, item(*pa, 0).rows(), item(*pa, 0).cols());
        const Act k = n.activation;
        for (int i = 0; i < batch; ++i)
          n.val[i] = item(*pa, i).unaryExpr([k](double x) { return act_eval(k, x); });
        return;
      }
      case Op::transpose: {
        const int batch = static_cast<int>(pa->val.size());
        ensure_shape(n, batch, item(*pa, 0).cols(), item(*pa, 0).rows());
        for (int i = 0; i < batch; ++i) n.val[i] = item(*pa, i).transpose();
        return;
      }
      case Op::row_softmax: {
        const int batch = static_cast<int>(pa->val.size());
        const Mat& a0 = item(*pa, 0);
        ensure_shape(n, batch, a0.rows(), a0.cols());
        for (int i = 0; i < batch; ++i) {
          const Mat& a = item(*pa, i);
          for (Eigen::Index r = 0; r < a.rows(); ++r) {
            const double mx = a.row(r).maxCoeff();
            n.val[i].row(r) = (a.row(r).array() - mx).exp();
            n.val[i].row(r) /= n.val[i].row(r).sum();
          }
        }
        return;
      }
      case Op::sum:
      case Op::mean:
      case Op::frob_sq: {
        const int batch = static_cast<int>(pa->val.size());
        ensure_shape(n, batch, 1, 1);
        for (int i = 0; i < batch; ++i) {
          const Mat& a = item(*pa, i);
          double v = 0.0;
          if (n.op == Op::sum)
            v = a.sum();
          else if (n.op == Op::mean)
            v = a.mean();
          else
            v = a.squaredNorm();
          n.val[i](0, 0) = v;
        }
        return;
      }
      case Op::batch_mean: {
        const int batch = static_cast<int>(pa->val.size());
        const Mat& a0 = item(*pa, 0);
        ensure_shape(n, 1, a0.rows(), a0.cols());
        n.val[0].setZero();
        for (int i = 0; i < batch; ++i) n.val[0] += pa->val[i];
        n.val[0] /= static_cast<double>(batch);
        return;
      }
      case Op::skew_rows: {
        const int k = n.aux;
        const Mat& a = item(*pa, 0);
        if (pa->val.size() != 1) throw ConfigError("tape: skew_rows input must be a single matrix");
        if (a.cols() != static_cast<Eigen::Index>(k) * (k - 1) / 2)
          throw ConfigError("tape: skew_rows column count must be k(k-1)/2");
        const int batch = static_cast<int>(a.rows());
        ensure_shape(n, batch, k, k);
        for (int i = 0; i < batch; ++i) {
          Mat& out = n.val[i];
          out.setZero();
          int idx = 0;
          for (int r = 0; r < k; ++r)
            for (int c = r + 1; c < k; ++c, ++idx) {
              out(r, c) = a(i, idx);
              out(c, r) = -a(i, idx);
            }
        }
        return;
      }
      case Op::cayley: {
        const int batch = static_cast<int>(pa->val.size());
        const Eigen::Index k = item(*pa, 0).rows();
        if (item(*pa, 0).cols() != k) throw ConfigError("tape: cayley input must be square");
        ensure_shape(n, batch, k, k);
        if (static_cast<int>(n.cache.size()) != batch)
          n.cache.assign(static_cast<std::size_t>(batch), Mat::Zero(k, k));
        Mat ipa(k, k);
        for (int i = 0; i < batch; ++i) {
          const Mat& a = pa->val[static_cast<std::size_t>(i)];
          ipa = Mat::Identity(k, k) + a;
          Eigen::PartialPivLU<Mat> lu(ipa);
          n.cache[i] = lu.solve(Mat::Identity(k, k));
          if (!n.cache[i].allFinite())
            throw NumericError("tape: cayley inverse is singular");
          n.val[i].noalias() = (Mat::Identity(k, k) - a) * n.cache[i];
        }
        return;
      }
      case Op::cols_scaled: {
        if (pb->val.size() != 1)
          throw ConfigError("tape: cols_scaled sv input must be a single matrix");
        const Mat& sv = pb->val[0];
        const int batch = static_cast<int>(pa->val.size());
        if (sv.rows() != batch && sv.rows() != 1)
          throw ConfigError("tape: cols_scaled sv row count must match the batch or be 1");
        const Mat& a0 = item(*pa, 0);
        const int usable = static_cast<int>(
            std::min<Eigen::Index>(std::min<Eigen::Index>(a0.cols(), sv.cols()), n.aux));
        ensure_shape(n, batch, a0.rows(), n.aux);
        for (int i = 0; i < batch; ++i) {
          const Mat& a = item(*pa, i);
          const int svr = sv.rows() == 1 ? 0 : i;
          n.val[i].setZero();
          for (int j = 0; j < usable; ++j) n.val[i].col(j) = sv(svr, j) * a.col(j);
        }
        return;
      }
      case Op::add_rowvec: {
        if (pb->val.size() != 1 || pb->val[0].rows() != 1)
          throw ConfigError("tape: add_rowvec second input must be a single row vector");
        const Mat& a0 = item(*pa, 0);
        if (pb->val[0].cols() != a0.cols())
          throw ConfigError("tape: add_rowvec width mismatch");
        const int batch = static_cast<int>(pa->val.size());
        ensure_shape(n, batch, a0.rows(), a0.cols());
        for (int i = 0; i < batch; ++i)
          n.val[i] = item(*pa, i).rowwise() + pb->val[0].row(0);
        return;
      }
      case Op::rowdot_gather: {
        const int m = static_cast<int>(n.idx_a.size());
        const int ba = static_cast<int>(pa->val.size());
        const int bb = static_cast<int>(pb->val.size());
        if ((ba != 1 && ba != m) || (bb != 1 && bb != m))
          throw ConfigError("tape: rowdot_gather batch must be 1 or the index count");
        if (item(*pa, 0).cols() != item(*pb, 0).cols())
          throw ConfigError("tape: rowdot_gather row length mismatch");
        ensure_shape(n, 1, m, 1);
        for (int t = 0; t < m; ++t) {
          const Mat& a = item(*pa, t);
          const Mat& b = item(*pb, t);
          if (n.idx_a[t] < 0 || n.idx_a[t] >= a.rows() || n.idx_b[t] < 0 ||
              n.idx_b[t] >= b.rows())
            throw ConfigError("tape: rowdot_gather index out of range");
          n.val[0](t, 0) = a.row(n.idx_a[t]).dot(b.row(n.idx_b[t]));
        }
        return;
      }
    }
  }

  // -- extended-precision forward kernels -------------------------------------
  //
  // Mirror of eval_node over long double slabs. Shapes were already validated
  // by the double pass that built or last ran the graph, so this pass only
  // repeats the arithmetic. Plain assignment (no preallocation) keeps it
  // simple; the path is for verification, not training throughput.

  static const MatLd& item_ld(const std::vector<MatLd>& x, int i) {
    return x[x.size() == 1 ? 0 : static_cast<std::size_t>(i)];
  }

  void eval_node_precise(int id, std::vector<std::vector<MatLd>>& vals) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    std::vector<MatLd>& out = vals[static_cast<std::size_t>(id)];
    if (n.op == Op::param || n.op == Op::constant) {
      out.resize(n.val.size());
      for (std::size_t i = 0; i < n.val.size(); ++i)
        out[i] = n.val[i].cast<long double>();
      return;
    }
    const std::vector<MatLd>& va = vals[static_cast<std::size_t>(n.a)];
    const std::vector<MatLd>* vb =
        n.b >= 0 ? &vals[static_cast<std::size_t>(n.b)] : nullptr;
    switch (n.op) {
      case Op::param:
      case Op::constant:
        return;
      case Op::matmul: {
        const int batch = static_cast<int>(std::max(va.size(), vb->size()));
        out.resize(static_cast<std::size_t>(batch));
        for (int i = 0; i < batch; ++i) {
          const MatLd& a = item_ld(va, i);
          const MatLd& b = item_ld(*vb, i);
          if (!n.trans_a && !n.trans_b)
            out[i] = a * b;
          else if (n.trans_a && !n.trans_b)
            out[i] = a.transpose() * b;
          else if (!n.trans_a && n.trans_b)
            out[i] = a * b.transpose();
          else
            out[i] = a.transpose() * b.transpose();
        }
        return;
      }
      case Op::add:
      case Op::sub:
      case Op::mul: {
        const int batch = static_cast<int>(std::max(va.size(), vb->size()));
        out.resize(static_cast<std::size_t>(batch));
        for (int i = 0; i < batch; ++i) {
          const MatLd& a = item_ld(va, i);
          const MatLd& b = item_ld(*vb, i);
          if (n.op == Op::add)
            out[i] = a + b;
          else if (n.op == Op::sub)
            out[i] = a - b;
          else
            out[i] = a.cwiseProduct(b);
        }
        return;
      }
      case Op::scale: {
        out.resize(va.size());
        for (std::size_t i = 0; i < va.size(); ++i)
          out[i] = static_cast<long double>(n.alpha) * va[i];
        return;
      }
      case Op::act: {
        const Act k = n.activation;
        out.resize(va.size());
        for (std::size_t i = 0; i < va.size(); ++i)
          out[i] = va[i].unaryExpr([k](long double x) { return act_eval_ld(k, x); });
        return;
      }
      case Op::transpose: {
        out.resize(va.size());
        for (std::size_t i = 0; i < va.size(); ++i) out[i] = va[i].transpose();
        return;
      }
      case Op::row_softmax: {
        out.resize(va.size());
        for (std::size_t i = 0; i < va.size(); ++i) {
          const MatLd& a = va[i];
          out[i].resize(a.rows(), a.cols());
          for (Eigen::Index r = 0; r < a.rows(); ++r) {
            const long double mx = a.row(r).maxCoeff();
            out[i].row(r) = (a.row(r).array() - mx).exp();
            out[i].row(r) /= out[i].row(r).sum();
          }
        }
        return;
      }
      case Op::sum:
      case Op::mean:
      case Op::frob_sq: {
        out.resize(va.size());
        for (std::size_t i = 0; i < va.size(); ++i) {
          long double v = 0.0L;
          if (n.op == Op::sum)
            v = va[i].sum();
          else if (n.op == Op::mean)
            v = va[i].mean();
          else
            v = va[i].squaredNorm();
          out[i] = MatLd::Constant(1, 1, v);
        }
        return;
      }
      case Op::batch_mean: {
        out.resize(1);
        out[0] = MatLd::Zero(va[0].rows(), va[0].cols());
        for (const MatLd& a : va) out[0] += a;
        out[0] /= static_cast<long double>(va.size());
        return;
      }
      case Op::skew_rows: {
        const int k = n.aux;
        const MatLd& a = va[0];
        out.resize(static_cast<std::size_t>(a.rows()));
        for (Eigen::Index i = 0; i < a.rows(); ++i) {
          MatLd& m = out[static_cast<std::size_t>(i)];
          m = MatLd::Zero(k, k);
          int idx = 0;
          for (int r = 0; r < k; ++r)
            for (int c = r + 1; c < k; ++c, ++idx) {
              m(r, c) = a(i, idx);
              m(c, r) = -a(i, idx);
            }
        }
        return;
      }
      case Op::cayley: {
        const Eigen::Index k = va[0].rows();
        out.resize(va.size());
        for (std::size_t i = 0; i < va.size(); ++i) {
          const MatLd& a = va[i];
          Eigen::PartialPivLU<MatLd> lu(MatLd::Identity(k, k) + a);
          const MatLd inv = lu.solve(MatLd::Identity(k, k));
          if (!inv.allFinite()) throw NumericError("tape: cayley inverse is singular");
          out[i] = (MatLd::Identity(k, k) - a) * inv;
        }
        return;
      }
      case Op::cols_scaled: {
        const MatLd& sv = (*vb)[0];
        out.resize(va.size());
        for (std::size_t i = 0; i < va.size(); ++i) {
          const MatLd& a = va[i];
          const int usable = static_cast<int>(
              std::min<Eigen::Index>(std::min<Eigen::Index>(a.cols(), sv.cols()), n.aux));
          const Eigen::Index svr = sv.rows() == 1 ? 0 : static_cast<Eigen::Index>(i);
          out[i] = MatLd::Zero(a.rows(), n.aux);
          for (int j = 0; j < usable; ++j) out[i].col(j) = sv(svr, j) * a.col(j);
        }
        return;
      }
      case Op::add_rowvec: {
        const MatLd& rv = (*vb)[0];
        out.resize(va.size());
        for (std::size_t i = 0; i < va.size(); ++i)
          out[i] = va[i].rowwise() + rv.row(0);
        return;
      }
      case Op::rowdot_gather: {
        const int m = static_cast<int>(n.idx_a.size());
        out.resize(1);
        out[0] = MatLd::Zero(m, 1);
        for (int t = 0; t < m; ++t) {
          const MatLd& a = item_ld(va, t);
          const MatLd& b = item_ld(*vb, t);
          if (n.idx_a[t] < 0 || n.idx_a[t] >= a.rows() || n.idx_b[t] < 0 ||
              n.idx_b[t] >= b.rows())
            throw ConfigError("tape: rowdot_gather index out of range");
          out[0](t, 0) = a.row(n.idx_a[t]).dot(b.row(n.idx_b[t]));
        }
        return;
      }
    }
  }

  // -- backward kernels -----------------------------------------------------

  void backprop_node(int id) {
    Node& n = nodes_[id];
    if (n.op == Op::param || n.op == Op::constant) return;
    Node& na = nodes_[n.a];
    Node* nb = n.b >= 0 ? &nodes_[n.b] : nullptr;
    const bool ga = na.requires_grad;
    const bool gb = nb && nb->requires_grad;
    switch (n.op) {
      case Op::param:
      case Op::constant:
        return;
      case Op::matmul: {
        const int batch = static_cast<int>(n.val.size());
        for (int i = 0; i < batch; ++i) {
          const Mat& g = n.adj[i];
          const Mat& a = item(na, i);
          const Mat& b = item(*nb, i);
          if (!n.trans_a && !n.trans_b) {
            if (ga) adj_item(na, i).noalias() += g * b.transpose();
            if (gb) adj_item(*nb, i).noalias() += a.transpose() * g;
          } else if (n.trans_a && !n.trans_b) {
            if (ga) adj_item(na, i).noalias() += b * g.transpose();
            if (gb) adj_item(*nb, i).noalias() += a * g;
          } else if (!n.trans_a && n.trans_b) {
            if (ga) adj_item(na, i).noalias() += g * b;
            if (gb) adj_item(*nb, i).noalias() += g.transpose() * a;
          } else {
            if (ga) adj_item(na, i).noalias() += b.transpose() * g.transpose();
            if (gb) adj_item(*nb, i).noalias() += g.transpose() * a.transpose();
          }
        }
        return;
      }
      case Op::add:
      case Op::sub: {
        const int batch = static_cast<int>(n.val.size());
        for (int i = 0; i < batch; ++i) {
          if (ga) adj_item(na, i) += n.adj[i];
          if (gb) {
            if (n.op == Op::add)
              adj_item(*nb, i) += n.adj[i];
            else
              adj_item(*nb, i) -= n.adj[i];
          }
        }
        return;
      }
      case Op::mul: {
        const int batch = static_cast<int>(n.val.size());
        for (int i = 0; i < batch; ++i) {
          if (ga) adj_item(na, i) += n.adj[i].cwiseProduct(item(*nb, i));
          if (gb) adj_item(*nb, i) += n.adj[i].cwiseProduct(item(na, i));
        }
        return;
      }
      case Op::scale: {
        if (!ga) return;
        for (std::size_t i = 0; i < n.val.size(); ++i)
          adj_item(na, static_cast<int>(i)) += n.alpha * n.adj[i];
        return;
      }
      case Op::act: {
        if (!ga) return;
        const Act k = n.activation;
        for (std::size_t i = 0; i < n.val.size(); ++i) {
          const Mat& x = item(na, static_cast<int>(i));
          adj_item(na, static_cast<int>(i)) +=
              n.adj[i].cwiseProduct(x.unaryExpr([k](double v) { return act_deriv(k, v); }));
        }
        return;
      }
      case Op::transpose: {
        if (!ga) return;
        for (std::size_t i = 0; i < n.val.size(); ++i)
          adj_item(na, static_cast<int>(i)) += n.adj[i].transpose();
        return;
      }
      case Op::row_softmax: {
        if (!ga) return;
        for (std::size_t i = 0; i < n.val.size(); ++i) {
          const Mat& s = n.val[i];
          const Mat& g = n.adj[i];
          Mat& out = adj_item(na, static_cast<int>(i));
          for (Eigen::Index r = 0; r < s.rows(); ++r) {
            const double dot = s.row(r).dot(g.row(r));
            out.row(r).array() += s.row(r).array() * (g.row(r).array() - dot);
          }
        }
        return;
      }
      case Op::sum: {
        if (!ga) return;
        for (std::size_t i = 0; i < n.val.size(); ++i)
          adj_item(na, static_cast<int>(i)).array() += n.adj[i](0, 0);
        return;
      }
      case Op::mean: {
        if (!ga) return;
        for (std::size_t i = 0; i < n.val.size(); ++i) {
          const Mat& x = item(na, static_cast<int>(i));
          adj_item(na, static_cast<int>(i)).array() +=
              n.adj[i](0, 0) / static_cast<double>(x.size());
        }
        return;
      }
      case Op::frob_sq: {
        if (!ga) return;
        for (std::size_t i = 0; i < n.val.size(); ++i)
          adj_item(na, static_cast<int>(i)) +=
              (2.0 * n.adj[i](0, 0)) * item(na, static_cast<int>(i));
        return;
      }
      case Op::batch_mean: {
        if (!ga) return;
        const double inv = 1.0 / static_cast<double>(na.val.size());
        for (std::size_t i = 0; i < na.val.size(); ++i)
          adj_item(na, static_cast<int>(i)) += inv * n.adj[0];
        return;
      }
      case Op::skew_rows: {
        if (!ga) return;
        const int k = n.aux;
        Mat& out = na.adj[0];
        for (std::size_t i = 0; i < n.val.size(); ++i) {
          const Mat& g = n.adj[i];
          int idx = 0;
          for (int r = 0; r < k; ++r)
            for (int c = r + 1; c < k; ++c, ++idx)
              out(static_cast<Eigen::Index>(i), idx) += g(r, c) - g(c, r);
        }
        return;
      }
      case Op::cayley: {
        if (!ga) return;
        for (std::size_t i = 0; i < n.val.size(); ++i) {
          const Mat& q = n.val[i];
          const Mat& k_inv = n.cache[i];
          const Mat& g = n.adj[i];
          // dL/dA = -(I + Q)^T * G * K^T with K = (I + A)^{-1}.
          adj_item(na, static_cast<int>(i)).noalias() -=
              (Mat::Identity(q.rows(), q.cols()) + q).transpose() * g * k_inv.transpose();
        }
        return;
      }
      case Op::cols_scaled: {
        const Mat& sv = nb->val[0];
        const int batch = static_cast<int>(n.val.size());
        const Mat& a0 = item(na, 0);
        const int usable = static_cast<int>(
            std::min<Eigen::Index>(std::min<Eigen::Index>(a0.cols(), sv.cols()), n.aux));
        for (int i = 0; i < batch; ++i) {
          const Mat& g = n.adj[i];
          const int svr = sv.rows() == 1 ? 0 : i;
          for (int j = 0; j < usable; ++j) {
            if (ga) adj_item(na, i).col(j) += sv(svr, j) * g.col(j);
            if (gb) nb->adj[0](svr, j) += item(na, i).col(j).dot(g.col(j));
          }
        }
        return;
      }
      case Op::add_rowvec: {
        const int batch = static_cast<int>(n.val.size());
        for (int i = 0; i < batch; ++i) {
          if (ga) adj_item(na, i) += n.adj[i];
          if (gb) nb->adj[0].row(0) += n.adj[i].colwise().sum();
        }
        return;
      }
      case Op::rowdot_gather: {
        const int m = static_cast<int>(n.idx_a.size());
        for (int t = 0; t < m; ++t) {
          const double g = n.adj[0](t, 0);
          if (g == 0.0) continue;
          if (ga) adj_item(na, t).row(n.idx_a[t]) += g * item(*nb, t).row(n.idx_b[t]);
          if (gb) adj_item(*nb, t).row(n.idx_b[t]) += g * item(na, t).row(n.idx_a[t]);
        }
        return;
      }
    }
  }
};

}  // namespace fblab::grad
