#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "fblab/grad/tape.hpp"

namespace fblab::grad {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_analytic = 0.0;
  int worst_param = -1;
  Eigen::Index worst_row = -1, worst_col = -1;
};

/// Central-difference verification of the tape gradient of a scalar loss with
/// respect to the listed parameter nodes. Relative error uses the larger of
/// the analytic and numeric magnitudes (floored) as denominator. The loss is
/// re-evaluated via tape.forward(), and parameters are restored afterwards.
inline GradCheckResult finite_diff_check(Tape& tape, int loss,
                                         const std::vector<int>& params,
                                         double h = 1e-5) {
  tape.forward();
  tape.backward(loss);
  std::vector<Mat> analytic;
  analytic.reserve(params.size());
  for (int id : params) analytic.push_back(tape.adjoint(id));

  GradCheckResult res;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const int id = params[k];
    Mat& p = tape.leaf_item(id);
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      for (Eigen::Index c = 0; c < p.cols(); ++c) {
        const double orig = p(r, c);
        p(r, c) = orig + h;
        tape.forward();
        const double up = tape.scalar(loss);
        p(r, c) = orig - h;
        tape.forward();
        const double down = tape.scalar(loss);
        p(r, c) = orig;
        const double numeric = (up - down) / (2.0 * h);
        const double a = analytic[k](r, c);
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
        const double rel = std::abs(a - numeric) / denom;
        res.max_abs_analytic = std::max(res.max_abs_analytic, std::abs(a));
        if (rel > res.max_rel_error) {
          res.max_rel_error = rel;
          res.worst_param = static_cast<int>(k);
          res.worst_row = r;
          res.worst_col = c;
        }
      }
    }
  }
  tape.forward();
  return res;
}

/// Central-difference verification against the tape's extended-precision
/// re-evaluation. Double-precision rounding inside a deep composition puts a
/// noise floor of roughly |loss| * 1e-16 / h on a plain central difference,
/// which swamps gradient coordinates much smaller than the loss; differencing
/// eval_scalar_precise removes that floor so such coordinates stay checkable.
/// Truncation error still depends on the local third derivative, so each
/// coordinate keeps its best step from a fixed grid (early exit once the
/// error is clearly below any useful tolerance). A wrong analytic gradient
/// disagrees at every step, so the per-coordinate minimum cannot mask a bug.
/// Parameters are restored and the double values are never disturbed, because
/// the probes run entirely in the side workspace.
inline GradCheckResult precise_diff_check(Tape& tape, int loss,
                                          const std::vector<int>& params) {
  static const double steps[] = {1e-5, 1e-4, 1e-3, 1e-2};
  tape.forward();
  tape.backward(loss);
  std::vector<Mat> analytic;
  analytic.reserve(params.size());
  for (int id : params) analytic.push_back(tape.adjoint(id));

  GradCheckResult res;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const int id = params[k];
    Mat& p = tape.leaf_item(id);
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      for (Eigen::Index c = 0; c < p.cols(); ++c) {
        const double orig = p(r, c);
        const double a = analytic[k](r, c);
        double best = std::numeric_limits<double>::infinity();
        for (double h : steps) {
          p(r, c) = orig + h;
          const long double up = tape.eval_scalar_precise(loss);
          p(r, c) = orig - h;
          const long double down = tape.eval_scalar_precise(loss);
          p(r, c) = orig;
          const double numeric =
              static_cast<double>((up - down) / (2.0L * static_cast<long double>(h)));
          const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
          best = std::min(best, std::abs(a - numeric) / denom);
          if (best <= 1e-7) break;
        }
        res.max_abs_analytic = std::max(res.max_abs_analytic, std::abs(a));
        if (best > res.max_rel_error) {
          res.max_rel_error = best;
          res.worst_param = static_cast<int>(k);
          res.worst_row = r;
          res.worst_col = c;
        }
      }
    }
  }
  return res;
}

}  // namespace fblab::grad
