#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "fblab/analysis/metrics.hpp"
#include "fblab/analysis/theory.hpp"
#include "fblab/harness/config.hpp"
#include "fblab/loss/losses.hpp"
#include "fblab/model/model.hpp"
#include "fblab/train/trainer.hpp"

namespace fblab::harness {

inline constexpr const char* kMetricsHeader = "step,loss,eps_smr,eps_q,kl_policy,eps_equiv";

namespace detail {

inline std::string join(const std::string& dir, const std::string& leaf) {
  return (std::filesystem::path(dir) / leaf).string();
}

inline std::string fmt_metric(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.11e", v);
  return buf;
}

inline std::string fmt_short(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

inline std::string sanitize_component(const std::string& s) {
  std::string out;
  for (char ch : s) {
    const bool ok = std::isalnum(static_cast<unsigned char>(ch)) || ch == '.' || ch == '-' ||
                    ch == '+';
    out.push_back(ok ? ch : '_');
  }
  return out.empty() ? std::string("value") : out;
}

}  // namespace detail

inline void write_metrics_csv(const std::vector<train::MetricsRecord>& records,
                              std::ostream& os) {
  os << kMetricsHeader << '\n';
  for (const train::MetricsRecord& r : records) {
    os << r.step << ',' << detail::fmt_metric(r.loss) << ',' << detail::fmt_metric(r.eps_smr)
       << ',' << detail::fmt_metric(r.eps_q) << ',' << detail::fmt_metric(r.kl_policy) << ','
       << detail::fmt_metric(r.eps_equiv) << '\n';
  }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct RunOutcome {
  int exit_code = 0;
  bool have_final = false;                // final_record holds the last eval row
  train::MetricsRecord final_record;
  long long last_good_step = 0;
  std::string message;
};

/// Executes one fully-resolved experiment: writes config.resolved,
/// metrics.csv, and (on clean completion) final.fbckpt into cfg.output_dir.
inline RunOutcome run_one(const ExperimentConfig& cfg, std::ostream& err) {
  RunOutcome out;
  try {
    const cmp::Cmp env = build_env(cfg);
    const Vec rho = build_rho(cfg, env);
    cfg.train.validate();
    std::filesystem::create_directories(cfg.output_dir);
    {
      std::ofstream os(detail::join(cfg.output_dir, "config.resolved"));
      if (!os) throw ConfigError("cannot write config.resolved in " + cfg.output_dir);
      write_resolved(cfg, env, os);
    }
    const train::TrainResult res = train::train(env, rho, cfg.train);
    {
      std::ofstream os(detail::join(cfg.output_dir, "metrics.csv"));
      if (!os) throw ConfigError("cannot write metrics.csv in " + cfg.output_dir);
      write_metrics_csv(res.records, os);
    }
    if (!res.records.empty()) {
      out.have_final = true;
      out.final_record = res.records.back();
    }
    out.last_good_step = res.last_good_step;
    if (res.aborted) {
      out.exit_code = 3;
      out.message = "numeric abort: non-finite loss; last good step " +
                    std::to_string(res.last_good_step);
      err << out.message << '\n';
      return out;
    }
    std::visit(
        [&](const auto& m) {
          model::save_checkpoint_file(m, env.num_states, env.num_actions,
                                      detail::join(cfg.output_dir, "final.fbckpt"));
        },
        res.final_model);
  } catch (const ConfigError& e) {
    out.exit_code = 2;
    out.message = e.what();
    err << "config error: " << e.what() << '\n';
  } catch (const NumericError& e) {
    out.exit_code = 3;
    out.message = e.what();
    err << "numeric error: " << e.what() << '\n';
  }
  return out;
}

inline int run_experiment(const std::string& config_path, const std::uint64_t* seed_override,
                          const std::string& out_override, std::ostream& err) {
  ExperimentConfig cfg;
  try {
    cfg = parse_config_file(config_path);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  }
  if (seed_override) cfg.train.seed = *seed_override;
  if (!out_override.empty()) cfg.output_dir = out_override;
  return run_one(cfg, err).exit_code;
}

// ---------------------------------------------------------------------------
// theory-check
// ---------------------------------------------------------------------------

namespace detail {

struct CheckLine {
  bool pass = true;
  std::string text;
};

inline CheckLine check_rank_law(std::uint64_t seed) {
  core::SplitMix64 rng(core::derive(seed, 7001));
  int full = 0;
  double min_sigma = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 20; ++i) {
    const int ns = 2 + static_cast<int>(rng.uniform() * 5.0);
    const int na = 2 + static_cast<int>(rng.uniform() * 3.0);
    const cmp::Cmp c = cmp::random_cmp(rng.next_u64(), ns, na, 1.0);
    const cmp::Policy pi = cmp::uniform_policy(ns, na);
    const analysis::RankReport rep = analysis::rank_report(cmp::successor_measure(c, pi));
    if (rep.rank == c.num_pairs()) ++full;
    min_sigma = std::min(min_sigma, rep.singular_values(rep.singular_values.size() - 1));
  }
  CheckLine line;
  line.pass = full == 20;
  line.text = "rank-law: " + std::to_string(full) +
              "/20 random CMPs have a full-rank successor measure (min sigma_min " +
              fmt_short(min_sigma) + ")";
  return line;
}

inline CheckLine check_pinv_consistency(const cmp::Cmp& env, const Vec& rho,
                                        std::uint64_t seed) {
  const model::GroundTruthFb gt = model::GroundTruthFb::build(env, rho);
  core::SplitMix64 rng(core::derive(seed, 7002));
  const latent::LatentBatch probes =
      latent::sample_prior(env.num_pairs(), 8, latent::PriorVariant::cauchy_scaled, rng);
  const analysis::PseudoinvReport rep = analysis::pseudoinverse_consistency(
      [&gt](const Vec& z) { return gt.forward_matrix(z); }, gt.b, env, probes.z, rho);
  CheckLine line;
  line.pass = rep.max_pairwise <= 1e-8 && rep.max_vs_b <= 1e-8;
  line.text = "pinv-consistency: 8 probes, max pairwise " + fmt_short(rep.max_pairwise) +
              ", max vs B " + fmt_short(rep.max_vs_b) + " (tol 1e-8)";
  return line;
}

inline CheckLine check_null_reward(const cmp::Cmp& env, const Vec& rho, int d) {
  const cmp::Policy uni = cmp::uniform_policy(env.num_states, env.num_actions);
  const Mat b = model::ground_truth_onestep(env, uni, rho, d).b_mat;
  const double scale = analysis::null_attack_scale(b, rho, env, 100.0);
  const analysis::NullRewardResult r1 = analysis::null_reward_attack(b, rho, env, scale);
  const analysis::NullRewardResult r2 =
      analysis::null_reward_attack(b, rho, env, 2.0 * scale);
  const double doubling_rel =
      std::abs(r2.achieved_error - 2.0 * r1.achieved_error) / (2.0 * r1.achieved_error);
  CheckLine line;
  line.pass = r1.z_norm <= 1e-10 && r1.achieved_error >= 100.0 * (1.0 - 1e-9) &&
              doubling_rel <= 1e-6;
  line.text = "null-reward d=" + std::to_string(d) + ": |z_r| " + fmt_short(r1.z_norm) +
              ", oracle Q error " + fmt_short(r1.achieved_error) + " at scale " +
              fmt_short(scale) + ", doubling rel err " + fmt_short(doubling_rel);
  return line;
}

inline CheckLine check_witness(const cmp::Cmp& env, const Vec& rho, std::uint64_t seed) {
  core::SplitMix64 rng(core::derive(seed, 7003));
  const analysis::WitnessRecord rec = analysis::noncontraction_witness(env, rho, rng, 10000);
  CheckLine line;
  line.pass = rec.found;
  if (rec.found) {
    line.text = "witness: found in " + std::to_string(rec.tries) + " tries, input gap " +
                fmt_short(rec.rhs_norm) + ", output gap " + fmt_short(rec.lhs_norm);
  } else {
    line.text = "witness: not found within " + std::to_string(rec.tries) + " tries";
  }
  return line;
}

inline CheckLine check_svd_ground_truth(const cmp::Cmp& env, const Vec& rho,
                                        std::uint64_t seed) {
  const int n = env.num_pairs();
  const cmp::Policy uni = cmp::uniform_policy(env.num_states, env.num_actions);
  const Mat target = loss::ratio_target(env, uni, rho);
  const model::OneStepModel gt = model::ground_truth_onestep(env, uni, rho, n);
  const double denom = target.squaredNorm();
  const double rel =
      loss::mc_onestep_loss_value(gt.forward_matrix(), gt.backward_matrix(), target) / denom;
  const Mat b = gt.backward_matrix();
  const double bbt_err =
      (b * b.transpose() - Mat::Identity(n, n)).cwiseAbs().maxCoeff();
  core::SplitMix64 rng(core::derive(seed, 7004));
  const model::OneStepModel rot = model::rotate_onestep(gt, model::random_rotation(n, rng));
  const double rel_rot =
      loss::mc_onestep_loss_value(rot.forward_matrix(), rot.backward_matrix(), target) /
      denom;
  CheckLine line;
  line.pass = rel <= 1e-12 && bbt_err <= 1e-10 && rel_rot <= 1e-12;
  line.text = "svd-ground-truth d=" + std::to_string(n) + ": rel loss " + fmt_short(rel) +
              ", |B B^T - I| " + fmt_short(bbt_err) + ", rotated rel loss " +
              fmt_short(rel_rot);
  return line;
}

inline CheckLine check_eckart_young(const cmp::Cmp& env, const Vec& rho, int d) {
  const cmp::Policy uni = cmp::uniform_policy(env.num_states, env.num_actions);
  const Mat target = loss::ratio_target(env, uni, rho);
  const double floor = analysis::eckart_young_floor(target, d);
  const model::OneStepModel gt = model::ground_truth_onestep(env, uni, rho, d);
  const double loss_d =
      loss::mc_onestep_loss_value(gt.forward_matrix(), gt.backward_matrix(), target);
  const double gap = std::abs(loss_d - floor);
  CheckLine line;
  line.pass = gap <= 1e-8 * std::max(1.0, floor);
  line.text = "eckart-young d=" + std::to_string(d) + ": floor " + fmt_short(floor) +
              ", rank-d oracle loss " + fmt_short(loss_d) + ", gap " + fmt_short(gap);
  return line;
}

}  // namespace detail

/// Writes the full theory-check report; returns true iff every check passed.
inline bool theory_check_report(const cmp::Cmp& env, const Vec& rho,
                                const std::vector<int>& d_list, std::uint64_t seed,
                                std::ostream& os) {
  const int n = env.num_pairs();
  os << "theory-check: env " << env.num_states << " states x " << env.num_actions
     << " actions (n=" << n << ", gamma " << detail::fmt_short(env.gamma) << "), seed "
     << seed << ", d_list ";
  for (std::size_t i = 0; i < d_list.size(); ++i) os << (i ? "," : "") << d_list[i];
  os << "\n\n";

  std::vector<detail::CheckLine> lines;
  lines.push_back(detail::check_rank_law(seed));
  lines.push_back(detail::check_pinv_consistency(env, rho, seed));
  bool any_small_d = false, any_full_d = false;
  for (int d : d_list) {
    if (d < n) {
      any_small_d = true;
      lines.push_back(detail::check_null_reward(env, rho, d));
    }
    if (d == n) any_full_d = true;
  }
  lines.push_back(detail::check_witness(env, rho, seed));
  if (any_full_d) lines.push_back(detail::check_svd_ground_truth(env, rho, seed));
  for (int d : d_list) lines.push_back(detail::check_eckart_young(env, rho, d));

  int passed = 0;
  for (const detail::CheckLine& line : lines) {
    os << (line.pass ? "[PASS] " : "[FAIL] ") << line.text << '\n';
    if (line.pass) ++passed;
  }
  if (!any_small_d)
    os << "[SKIP] null-reward: no d < n in d_list (attack needs a rank-deficient B)\n";
  if (!any_full_d) os << "[SKIP] svd-ground-truth: d_list does not include d = n\n";
  const bool all = passed == static_cast<int>(lines.size());
  os << "\nresult: " << (all ? "PASS" : "FAIL") << " (" << passed << '/' << lines.size()
     << " checks)\n";
  return all;
}

inline int run_theory_checks(const std::string& config_path,
                             const std::uint64_t* seed_override, const std::string& out_dir,
                             std::ostream& out, std::ostream& err) {
  try {
    ExperimentConfig cfg;
    if (!config_path.empty()) cfg = parse_config_file(config_path);
    if (seed_override) cfg.train.seed = *seed_override;
    const cmp::Cmp env = build_env(cfg);
    const Vec rho = build_rho(cfg, env);
    const std::vector<int> d_list = resolve_d_list(cfg, env.num_pairs());
    std::ostringstream report;
    const bool all = theory_check_report(env, rho, d_list, cfg.train.seed, report);
    out << report.str();
    if (!out_dir.empty()) {
      std::filesystem::create_directories(out_dir);
      std::ofstream os(detail::join(out_dir, "theory_report.txt"));
      if (!os) throw ConfigError("cannot write theory_report.txt in " + out_dir);
      os << report.str();
    }
    return all ? 0 : 4;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return 3;
  }
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

inline int run_sweep(const std::string& config_path, const std::string& param,
                     const std::vector<std::string>& values,
                     const std::uint64_t* seed_override, const std::string& out_dir,
                     std::ostream& out, std::ostream& err) {
  if (values.empty()) {
    err << "config error: sweep requires a non-empty --values list\n";
    return 2;
  }
  if (param != "lr" && param != "tau_policy_train") {
    err << "config error: sweep --param must be lr or tau_policy_train, got '" << param
        << "'\n";
    return 2;
  }
  ExperimentConfig base;
  std::vector<double> parsed;
  try {
    base = parse_config_file(config_path);
    for (const std::string& v : values) {
      std::size_t used = 0;
      double x = 0.0;
      try {
        x = std::stod(v, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != v.size() || !(x > 0.0))
        throw ConfigError("sweep: invalid value '" + v + "' for " + param +
                          " (expected a positive number)");
      parsed.push_back(x);
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  }
  if (seed_override) base.train.seed = *seed_override;
  const std::string root = out_dir.empty() ? std::string("sweep") : out_dir;

  try {
    std::filesystem::create_directories(root);
    std::ofstream summary(detail::join(root, "summary.csv"));
    if (!summary) throw ConfigError("cannot write summary.csv in " + root);
    summary << "value,status," << kMetricsHeader << '\n';
    for (std::size_t i = 0; i < values.size(); ++i) {
      ExperimentConfig cfg = base;
      if (param == "lr") cfg.train.lr = parsed[i];
      else cfg.train.tau_policy_train = parsed[i];
      cfg.output_dir =
          detail::join(root, param + "_" + detail::sanitize_component(values[i]));
      const RunOutcome o = run_one(cfg, err);
      const char* status = o.exit_code == 0  ? "ok"
                           : o.exit_code == 3 ? "numeric_abort"
                                              : "config_error";
      const train::MetricsRecord r =
          o.have_final ? o.final_record : train::MetricsRecord{-1,
                                                               std::nan(""),
                                                               std::nan(""),
                                                               std::nan(""),
                                                               std::nan(""),
                                                               std::nan("")};
      summary << values[i] << ',' << status << ',' << r.step << ','
              << detail::fmt_metric(r.loss) << ',' << detail::fmt_metric(r.eps_smr) << ','
              << detail::fmt_metric(r.eps_q) << ',' << detail::fmt_metric(r.kl_policy) << ','
              << detail::fmt_metric(r.eps_equiv) << '\n';
      out << param << " = " << values[i] << ": " << status << '\n';
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// aggregate
// ---------------------------------------------------------------------------

namespace detail {

struct MetricsTable {
  std::vector<long long> steps;
  std::vector<std::array<double, 5>> rows;  // loss, eps_smr, eps_q, kl, eps_equiv
};

inline MetricsTable read_metrics_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open metrics file: " + path);
  MetricsTable t;
  std::string line;
  if (!std::getline(is, line) || line != kMetricsHeader)
    throw ConfigError("metrics file " + path + ": bad header (expected '" +
                      std::string(kMetricsHeader) + "')");
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::array<std::string, 6> fields;
    std::size_t start = 0;
    for (int f = 0; f < 6; ++f) {
      const std::size_t comma = line.find(',', start);
      if (f < 5 && comma == std::string::npos)
        throw ConfigError("metrics file " + path + ": line " + std::to_string(line_no) +
                          " has fewer than 6 fields");
      if (f == 5 && comma != std::string::npos)
        throw ConfigError("metrics file " + path + ": line " + std::to_string(line_no) +
                          " has more than 6 fields");
      fields[static_cast<std::size_t>(f)] =
          comma == std::string::npos ? line.substr(start) : line.substr(start, comma - start);
      start = comma + 1;
    }
    try {
      t.steps.push_back(std::stoll(fields[0]));
      std::array<double, 5> row{};
      for (int f = 0; f < 5; ++f) row[static_cast<std::size_t>(f)] =
          std::stod(fields[static_cast<std::size_t>(f) + 1]);
      t.rows.push_back(row);
    } catch (const std::exception&) {
      throw ConfigError("metrics file " + path + ": line " + std::to_string(line_no) +
                        " is not numeric");
    }
  }
  return t;
}

}  // namespace detail

/// Per-step mean and sample standard deviation over several metrics files.
/// All inputs must share the same step column (same eval schedule).
inline int run_aggregate(const std::vector<std::string>& inputs, const std::string& out_dir,
                         std::ostream& out, std::ostream& err) {
  if (inputs.empty()) {
    err << "config error: aggregate requires at least one metrics.csv path\n";
    return 2;
  }
  try {
    std::vector<detail::MetricsTable> tables;
    tables.reserve(inputs.size());
    for (const std::string& path : inputs) tables.push_back(detail::read_metrics_csv(path));
    for (std::size_t k = 1; k < tables.size(); ++k)
      if (tables[k].steps != tables[0].steps)
        throw ConfigError("aggregate: step column of " + inputs[k] + " differs from " +
                          inputs[0]);
    const std::string root = out_dir.empty() ? std::string(".") : out_dir;
    std::filesystem::create_directories(root);
    const std::string out_path = detail::join(root, "aggregate.csv");
    std::ofstream os(out_path);
    if (!os) throw ConfigError("cannot write " + out_path);
    os << "step,loss_mean,loss_std,eps_smr_mean,eps_smr_std,eps_q_mean,eps_q_std,"
          "kl_policy_mean,kl_policy_std,eps_equiv_mean,eps_equiv_std\n";
    const double cnt = static_cast<double>(tables.size());
    for (std::size_t row = 0; row < tables[0].steps.size(); ++row) {
      os << tables[0].steps[row];
      for (int f = 0; f < 5; ++f) {
        double mean = 0.0;
        for (const detail::MetricsTable& t : tables)
          mean += t.rows[row][static_cast<std::size_t>(f)];
        mean /= cnt;
        double var = 0.0;
        for (const detail::MetricsTable& t : tables) {
          const double diff = t.rows[row][static_cast<std::size_t>(f)] - mean;
          var += diff * diff;
        }
        const double std_dev = tables.size() > 1 ? std::sqrt(var / (cnt - 1.0)) : 0.0;
        os << ',' << detail::fmt_metric(mean) << ',' << detail::fmt_metric(std_dev);
      }
      os << '\n';
    }
    out << "wrote " << out_path << " (" << tables.size() << " inputs, "
        << tables[0].steps.size() << " rows)\n";
    return 0;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  }
}

// ---------------------------------------------------------------------------
// eval-checkpoint
// ---------------------------------------------------------------------------

/// Re-evaluates a saved model on the configured environment with the
/// configured evaluation protocol (seed-derived latents). Prints one CSV row.
inline int run_eval_checkpoint(const std::string& ckpt_path, const std::string& config_path,
                               const std::uint64_t* seed_override, const std::string& out_dir,
                               std::ostream& out, std::ostream& err) {
  try {
    ExperimentConfig cfg;
    if (!config_path.empty()) cfg = parse_config_file(config_path);
    if (seed_override) cfg.train.seed = *seed_override;
    const cmp::Cmp env = build_env(cfg);
    const Vec rho = build_rho(cfg, env);
    const model::CheckpointInfo info = model::peek_checkpoint(ckpt_path);
    if (info.n_states != env.num_states || info.n_actions != env.num_actions)
      throw ConfigError("eval-checkpoint: checkpoint dimensions (" +
                        std::to_string(info.n_states) + "x" + std::to_string(info.n_actions) +
                        ") do not match the configured environment (" +
                        std::to_string(env.num_states) + "x" +
                        std::to_string(env.num_actions) + ")");
    const analysis::OracleMode mode = info.algo == model::Algo::fb
                                          ? analysis::OracleMode::optimal
                                          : analysis::OracleMode::behavioral;
    const analysis::EvalContext ctx =
        train::make_eval_context(env, rho, cfg.train, info.d, mode);
    analysis::MetricsValues v;
    if (info.algo == model::Algo::fb) {
      v = analysis::evaluate_metrics(model::load_fb_checkpoint_file(ckpt_path), ctx);
    } else {
      v = analysis::evaluate_metrics(model::load_onestep_checkpoint_file(ckpt_path), ctx);
    }
    std::ostringstream row;
    row << "eps_smr,eps_q,kl_policy,eps_equiv\n"
        << detail::fmt_metric(v.eps_smr) << ',' << detail::fmt_metric(v.eps_q) << ','
        << detail::fmt_metric(v.kl_policy) << ',' << detail::fmt_metric(v.eps_equiv) << '\n';
    out << row.str();
    if (!out_dir.empty()) {
      std::filesystem::create_directories(out_dir);
      std::ofstream os(detail::join(out_dir, "eval.csv"));
      if (!os) throw ConfigError("cannot write eval.csv in " + out_dir);
      os << row.str();
    }
    return 0;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return 3;
  }
}

}  // namespace fblab::harness
