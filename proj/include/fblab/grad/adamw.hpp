#pragma once

#include <cmath>
#include <vector>

#include "fblab/grad/tape.hpp"

namespace fblab::grad {

/// Decoupled-weight-decay Adam. Decay multiplies the parameter by
/// (1 - lr * weight_decay) before the moment update; both moments are
/// bias-corrected, so the very first step moves each coordinate by
/// lr / (1 + eps) times the gradient sign (for unit gradients).
struct AdamWConfig {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-5;
};

class AdamW {
 public:
  AdamW(Tape& tape, std::vector<int> params, AdamWConfig cfg = {})
      : tape_(&tape), params_(std::move(params)), cfg_(cfg) {
    m1_.reserve(params_.size());
    m2_.reserve(params_.size());
    for (int id : params_) {
      const Mat& v = tape_->value(id);
      m1_.emplace_back(Mat::Zero(v.rows(), v.cols()));
      m2_.emplace_back(Mat::Zero(v.rows(), v.cols()));
    }
  }

  const std::vector<int>& params() const { return params_; }
  long long step_count() const { return t_; }

  /// Applies one update from the adjoints currently stored on the tape.
  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      const int id = params_[k];
      const Mat& g = tape_->adjoint(id);
      Mat& p = tape_->leaf_item(id);
      if (cfg_.weight_decay != 0.0) p *= (1.0 - cfg_.lr * cfg_.weight_decay);
      m1_[k] = cfg_.beta1 * m1_[k] + (1.0 - cfg_.beta1) * g;
      m2_[k] = cfg_.beta2 * m2_[k] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
      p.array() -= cfg_.lr * (m1_[k].array() / bc1) /
                   ((m2_[k].array() / bc2).sqrt() + cfg_.eps);
    }
  }

 private:
  Tape* tape_;
  std::vector<int> params_;
  AdamWConfig cfg_;
  std::vector<Mat> m1_, m2_;
  long long t_ = 0;
};

}  // namespace fblab::grad
