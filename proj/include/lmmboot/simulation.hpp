#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "lmmboot/bootstrap.hpp"
#include "lmmboot/inference.hpp"
#include "lmmboot/parallel.hpp"
#include "lmmboot/rng.hpp"
#include "lmmboot/types.hpp"

namespace lmmboot {

enum class SizeSetting : std::uint8_t { s1 = 1, s2 = 2, s3 = 3 };
enum class Distribution : std::uint8_t { normal = 0, student_t6 = 1, chi_square5 = 2 };

struct SettingSizes {
  std::size_t m;
  Eigen::Index n_j;
};

inline SettingSizes setting_sizes(SizeSetting s) {
  switch (s) {
    case SizeSetting::s1: return {25, 5};
    case SizeSetting::s2: return {50, 10};
    case SizeSetting::s3: return {75, 15};
  }
  throw ValidationError("unknown size setting");
}

inline const char* to_string(Distribution d) {
  switch (d) {
    case Distribution::normal: return "normal";
    case Distribution::student_t6: return "t6";
    case Distribution::chi_square5: return "chi25";
  }
  return "?";
}

inline const char* table_label(Distribution d) {
  switch (d) {
    case Distribution::normal: return "N";
    case Distribution::student_t6: return "t6";
    case Distribution::chi_square5: return "chi25";
  }
  return "?";
}

/// Monte Carlo configuration: one (setting, error law, random-effect law) cell.
struct DgpConfig {
  SizeSetting setting = SizeSetting::s1;
  Distribution error_dist = Distribution::normal;
  Distribution raneff_dist = Distribution::normal;
  double error_var = 1.0;
  double raneff_var = 0.5;
  Vector beta = (Vector(2) << 1.0, 1.0).finished();
  int s_runs = 1000;
  int b_boot = 1000;
  int c_inner = 1;
  double alpha = 0.05;
  std::uint64_t seed = 0;

  void check() const {
    if (!(error_var > 0.0) || !(raneff_var > 0.0)) {
      throw ValidationError("target variances must be positive");
    }
    if (s_runs < 1) throw ValidationError("s_runs must be >= 1");
    if (b_boot < 1) throw ValidationError("b_boot must be >= 1");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("alpha must be in (0, 1)");
    if (beta.size() != 2) throw ValidationError("beta must have length 2 for this DGP");
  }
};

/// Draws from the base law, centred to mean zero and rescaled to target_var.
/// Standardization constants: normal (0, 1); t6 (0, 6/4); chi^2_5 (5, 10).
inline Vector draw_centered_scaled(Distribution dist, double target_var, Eigen::Index count,
                                   std::mt19937_64& rng) {
  if (!(target_var > 0.0)) throw ValidationError("target_var must be positive");
  Vector out(count);
  const double sd = std::sqrt(target_var);
  switch (dist) {
    case Distribution::normal: {
      std::normal_distribution<double> law(0.0, 1.0);
      for (Eigen::Index i = 0; i < count; ++i) out(i) = sd * law(rng);
      break;
    }
    case Distribution::student_t6: {
      std::student_t_distribution<double> law(6.0);
      const double scale = sd / std::sqrt(1.5);
      for (Eigen::Index i = 0; i < count; ++i) out(i) = scale * law(rng);
      break;
    }
    case Distribution::chi_square5: {
      std::chi_squared_distribution<double> law(5.0);
      const double scale = sd / std::sqrt(10.0);
      for (Eigen::Index i = 0; i < count; ++i) out(i) = scale * (law(rng) - 5.0);
      break;
    }
  }
  return out;
}

struct GeneratedData {
  ClusteredDataset data;
  MixedEffectTarget target;  // k_j = (1, mean of x_ij2), l_j = 1
  Vector theta_true;         // k_j' beta + u_j
  Vector u_true;
};

/// Random-intercept DGP: y_ij = beta_1 + beta_2 x_ij2 + u_j + e_ij with
/// x_ij2 ~ U(0,1). Draw order: all x (cluster-major), then u, then e.
inline GeneratedData generate_dgp(const DgpConfig& config, std::mt19937_64& rng) {
  config.check();
  const auto sizes = setting_sizes(config.setting);
  const std::size_t m = sizes.m;
  const Eigen::Index n_j = sizes.n_j;
  const auto n = static_cast<Eigen::Index>(m) * n_j;

  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Matrix x2(n_j, static_cast<Eigen::Index>(m));
  for (std::size_t j = 0; j < m; ++j) {
    for (Eigen::Index i = 0; i < n_j; ++i) x2(i, static_cast<Eigen::Index>(j)) = unif(rng);
  }
  const Vector u = draw_centered_scaled(config.raneff_dist, config.raneff_var,
                                        static_cast<Eigen::Index>(m), rng);
  const Vector e = draw_centered_scaled(config.error_dist, config.error_var, n, rng);

  std::vector<ClusterBlock> blocks;
  blocks.reserve(m);
  MixedEffectTarget target;
  target.k.resize(m);
  target.l.resize(m);
  Vector theta_true(static_cast<Eigen::Index>(m));
  for (std::size_t j = 0; j < m; ++j) {
    const auto ji = static_cast<Eigen::Index>(j);
    ClusterBlock b;
    b.cluster_id = std::to_string(j + 1);
    b.X.resize(n_j, 2);
    b.X.col(0).setOnes();
    b.X.col(1) = x2.col(ji);
    b.Z = Matrix::Ones(n_j, 1);
    b.y = b.X * config.beta + Vector::Constant(n_j, u(ji)) + e.segment(ji * n_j, n_j);
    blocks.push_back(std::move(b));
    target.k[j] = (Vector(2) << 1.0, x2.col(ji).mean()).finished();
    target.l[j] = Vector::Ones(1);
    theta_true(ji) = target.k[j].dot(config.beta) + u(ji);
  }
  return GeneratedData{ClusteredDataset(std::move(blocks)), std::move(target),
                       std::move(theta_true), u};
}

/// Per-run tallies for one interval set against the known truth.
struct RunTallies {
  std::vector<bool> hit;  // per cluster
  bool all_hit = true;
  Vector width;  // rho_j = 2 q sigma_j
};

inline RunTallies evaluate_run(const IntervalSet& intervals, const Vector& theta_true) {
  if (theta_true.size() != intervals.center.size()) {
    throw ValidationError("truth vector has wrong length");
  }
  RunTallies t;
  const auto m = intervals.center.size();
  t.hit.resize(static_cast<std::size_t>(m));
  t.width = 2.0 * intervals.half_width;
  for (Eigen::Index j = 0; j < m; ++j) {
    const bool in = intervals.contains(j, theta_true(j));
    t.hit[static_cast<std::size_t>(j)] = in;
    if (!in) t.all_hit = false;
  }
  return t;
}

/// One table cell: empirical coverage, width, and width variance for a
/// (distribution pair, setting, method, sigma choice), individual and
/// simultaneous intervals side by side.
struct ReportRow {
  Distribution error_dist = Distribution::normal;
  Distribution raneff_dist = Distribution::normal;
  double error_var = 1.0;
  double raneff_var = 0.5;
  SizeSetting setting = SizeSetting::s1;
  IntervalMethod method = IntervalMethod::asymptotic_normal;
  SigmaChoice sigma_choice = SigmaChoice::g1;
  int s_runs = 0;
  int b_boot = 0;
  double alpha = 0.05;
  double cov_ind = 0.0;
  double cov_sim = 0.0;
  double width_ind = 0.0;
  double width_sim = 0.0;
  double varwidth_ind = 0.0;
  double varwidth_sim = 0.0;
  int regenerated_runs = 0;
  int failed_runs = 0;
};

struct SimulationReport {
  std::vector<ReportRow> rows;
};

namespace detail {

struct ComboTally {
  int ind_hits = 0;
  int sim_all_hits = 0;
  Matrix width_ind;  // S_eff x m
  Matrix width_sim;  // S_eff x m
};

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t index,
                                 std::uint64_t subindex = 0) {
  std::uint64_t h = splitmix64(seed ^ 0x243f6a8885a308d3ULL);
  h = splitmix64(h ^ tag);
  h = splitmix64(h ^ index);
  return splitmix64(h ^ subindex);
}

}  // namespace detail

/// Full Monte Carlo study for one DGP cell: for every run, fit, build
/// intervals for each requested method and sigma choice, and tally the four
/// metrics. Asymptotic intervals use z_{1-alpha/2} (individual) and the
/// Bonferroni z_{1-alpha/2m} (simultaneous); they are produced only for the
/// analytic sigma choices (g1, mse_l), mirroring the tables this reproduces.
/// Runs whose fit fails are regenerated with a fresh seed offset (counted);
/// more than 2% unrecoverable runs is a hard error.
inline SimulationReport run_study(const DgpConfig& config,
                                  const std::vector<IntervalMethod>& methods,
                                  const std::vector<SigmaChoice>& sigma_choices,
                                  unsigned workers = 1) {
  config.check();
  if (methods.empty() || sigma_choices.empty()) {
    throw ValidationError("need at least one method and one sigma choice");
  }
  const auto sizes = setting_sizes(config.setting);
  const auto m = static_cast<Eigen::Index>(sizes.m);
  const int s_runs = config.s_runs;

  const bool want_semi =
      std::find(methods.begin(), methods.end(), IntervalMethod::semiparametric_boot) !=
      methods.end();
  const bool want_para =
      std::find(methods.begin(), methods.end(), IntervalMethod::parametric_boot) != methods.end();
  const bool want_asym =
      std::find(methods.begin(), methods.end(), IntervalMethod::asymptotic_normal) !=
      methods.end();
  const bool need_mse_l = std::find(sigma_choices.begin(), sigma_choices.end(),
                                    SigmaChoice::mse_l) != sigma_choices.end();
  const bool need_inner = std::find(sigma_choices.begin(), sigma_choices.end(),
                                    SigmaChoice::mse_bc) != sigma_choices.end();

  auto analytic = [](SigmaChoice c) {
    return c == SigmaChoice::g1 || c == SigmaChoice::mse_l;
  };

  // Per-run slots: [method][choice] -> tallies, stored run-major for a
  // deterministic ordered reduction afterwards.
  struct RunResult {
    bool ok = false;
    int regenerated = 0;
    std::vector<int> ind_hits;        // per combo
    std::vector<char> sim_all;        // per combo
    std::vector<Vector> widths_ind;   // per combo, length m
    std::vector<Vector> widths_sim;   // per combo, length m
  };

  std::vector<std::pair<IntervalMethod, SigmaChoice>> combos;
  for (const auto method : methods) {
    for (const auto choice : sigma_choices) {
      if (method == IntervalMethod::asymptotic_normal && !analytic(choice)) continue;
      combos.emplace_back(method, choice);
    }
  }
  if (combos.empty()) throw ValidationError("no computable method/sigma combinations");

  const double z_ind = normal_quantile(1.0 - config.alpha / 2.0);
  const double z_sim =
      normal_quantile(1.0 - config.alpha / (2.0 * static_cast<double>(sizes.m)));

  std::vector<RunResult> results(static_cast<std::size_t>(s_runs));

  parallel_for_strided(static_cast<std::size_t>(s_runs), workers, [&](unsigned, std::size_t s) {
    auto& res = results[s];
    res.ind_hits.assign(combos.size(), 0);
    res.sim_all.assign(combos.size(), 0);
    res.widths_ind.assign(combos.size(), Vector());
    res.widths_sim.assign(combos.size(), Vector());

    for (int retry = 0; retry < 20 && !res.ok; ++retry) {
      res.regenerated = retry;
      auto rng = make_stream(config.seed, rng_tag::kSimulationRun,
                             static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(retry));
      GeneratedData gen = generate_dgp(config, rng);
      try {
        SuffStats ss(gen.data);
        RemlConfig reml;
        FitResult fit = detail::fit_from_stats(ss, reml);
        const Vector theta_hat = predict_theta(fit, gen.target);
        const Vector g1_hat = detail::g1_from_stats(ss, fit.delta_hat, gen.target);
        const Vector g2_hat =
            detail::g2_from_stats(ss, fit.delta_hat, gen.target, fit.gls_information);
        Vector mse_l_hat;
        if (need_mse_l) {
          const auto info = detail::fisher_from_stats(ss, fit.delta_hat);
          bool warn = false;
          mse_l_hat =
              g1_hat + g2_hat +
              2.0 * detail::g3_from_stats(ss, fit.delta_hat, gen.target, info, &warn);
        }
        auto sigma_for = [&](SigmaChoice c) -> Vector {
          if (c == SigmaChoice::g1) return g1_hat.cwiseMax(1e-300).cwiseSqrt();
          return mse_l_hat.cwiseMax(1e-300).cwiseSqrt();
        };

        // Bootstrap record passes, one per requested scheme.
        BootstrapDistribution dist_semi, dist_para;
        DoubleBootstrapRecords inner_semi, inner_para;
        BootstrapConfig bcfg;
        bcfg.b_outer = config.b_boot;
        bcfg.alpha = config.alpha;
        bcfg.refit = reml;
        bcfg.record_mse_l = need_mse_l;
        bcfg.c_inner = need_inner ? config.c_inner : 0;
        bcfg.workers = 1;  // runs are already parallel
        if (want_semi) {
          bcfg.scheme = Scheme::semiparametric;
          bcfg.sigma_choice = sigma_choices.front();
          bcfg.seed = detail::derive_seed(config.seed, rng_tag::kStudyScheme,
                                          static_cast<std::uint64_t>(s),
                                          2 * static_cast<std::uint64_t>(retry));
          std::tie(dist_semi, inner_semi) =
              detail::run_bootstrap_impl(gen.data, fit, gen.target, bcfg);
        }
        if (want_para) {
          bcfg.scheme = Scheme::parametric;
          bcfg.sigma_choice = sigma_choices.front();
          bcfg.seed = detail::derive_seed(config.seed, rng_tag::kStudyScheme,
                                          static_cast<std::uint64_t>(s),
                                          2 * static_cast<std::uint64_t>(retry) + 1);
          std::tie(dist_para, inner_para) =
              detail::run_bootstrap_impl(gen.data, fit, gen.target, bcfg);
        }

        for (std::size_t ci = 0; ci < combos.size(); ++ci) {
          const auto [method, choice] = combos[ci];
          IntervalSet ind, sim;
          if (method == IntervalMethod::asymptotic_normal) {
            const Vector sigma = sigma_for(choice);
            ind = individual_intervals(theta_hat, sigma, Vector::Constant(m, z_ind),
                                       IntervalMethod::asymptotic_normal, config.alpha);
            sim = simultaneous_intervals(theta_hat, sigma, z_sim, IntervalMethod::bonferroni,
                                         config.alpha);
          } else {
            const bool semi = method == IntervalMethod::semiparametric_boot;
            const auto& dist = semi ? dist_semi : dist_para;
            const auto& inner = semi ? inner_semi : inner_para;
            const auto stats =
                detail::studentize(dist, choice, g1_hat, g2_hat, mse_l_hat,
                                   inner.empty() ? nullptr : &inner, false);
            Vector crit_ind(m);
            for (Eigen::Index j = 0; j < m; ++j) {
              crit_ind(j) =
                  quantile_order_stat(Vector(stats.t_star.col(j).cwiseAbs()), config.alpha);
            }
            const double crit_sim = quantile_order_stat(stats.m_star, config.alpha);
            ind = individual_intervals(theta_hat, stats.sigma_hat, crit_ind, method,
                                       config.alpha);
            sim = simultaneous_intervals(theta_hat, stats.sigma_hat, crit_sim, method,
                                         config.alpha);
          }
          const auto tally_ind = evaluate_run(ind, gen.theta_true);
          const auto tally_sim = evaluate_run(sim, gen.theta_true);
          int hits = 0;
          for (bool h : tally_ind.hit) hits += h ? 1 : 0;
          res.ind_hits[ci] = hits;
          res.sim_all[ci] = tally_sim.all_hit ? 1 : 0;
          res.widths_ind[ci] = tally_ind.width;
          res.widths_sim[ci] = tally_sim.width;
        }
        res.ok = true;
      } catch (const NumericalError&) {
        continue;  // regenerate with the next seed offset
      }
    }
  });

  int failed = 0;
  int regenerated = 0;
  for (const auto& r : results) {
    if (!r.ok) ++failed;
    regenerated += r.regenerated;
  }
  if (static_cast<double>(failed) > 0.02 * static_cast<double>(s_runs)) {
    throw NumericalError("simulation failure budget exceeded: " + std::to_string(failed) +
                         " of " + std::to_string(s_runs) + " runs failed");
  }
  const int s_eff = s_runs - failed;
  if (s_eff == 0) throw NumericalError("all simulation runs failed");

  SimulationReport report;
  for (std::size_t ci = 0; ci < combos.size(); ++ci) {
    ReportRow row;
    row.error_dist = config.error_dist;
    row.raneff_dist = config.raneff_dist;
    row.error_var = config.error_var;
    row.raneff_var = config.raneff_var;
    row.setting = config.setting;
    row.method = combos[ci].first;
    row.sigma_choice = combos[ci].second;
    row.s_runs = s_eff;
    row.b_boot = config.b_boot;
    row.alpha = config.alpha;
    row.regenerated_runs = regenerated;
    row.failed_runs = failed;

    Matrix w_ind(s_eff, m), w_sim(s_eff, m);
    Eigen::Index r = 0;
    long ind_hits = 0;
    long sim_hits = 0;
    for (const auto& res : results) {
      if (!res.ok) continue;
      ind_hits += res.ind_hits[ci];
      sim_hits += res.sim_all[ci];
      w_ind.row(r) = res.widths_ind[ci].transpose();
      w_sim.row(r) = res.widths_sim[ci].transpose();
      ++r;
    }
    const double ms = static_cast<double>(m) * static_cast<double>(s_eff);
    row.cov_ind = static_cast<double>(ind_hits) / ms;
    row.cov_sim = static_cast<double>(sim_hits) / static_cast<double>(s_eff);
    row.width_ind = w_ind.mean();
    row.width_sim = w_sim.mean();
    auto varwidth = [&](const Matrix& w) {
      // 1/(m(S-1)) sum_j sum_s (rho_js - mean_j rho)^2
      if (s_eff < 2) return 0.0;
      const Eigen::RowVectorXd col_means = w.colwise().mean();
      const double ssq = (w.rowwise() - col_means).squaredNorm();
      return ssq / (static_cast<double>(m) * static_cast<double>(s_eff - 1));
    };
    row.varwidth_ind = varwidth(w_ind);
    row.varwidth_sim = varwidth(w_sim);
    report.rows.push_back(row);
  }
  return report;
}

enum class ReportStyle : std::uint8_t { markdown = 0, csv = 1 };

namespace detail {

inline std::string fmt(double v, const char* spec = "%.17g") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

inline long times1000(double v) { return std::lround(v * 1000.0); }

inline std::string dist_label(Distribution d, double var) {
  return std::string(table_label(d)) + "(" + fmt(var, "%g") + ")";
}

inline char method_letter(IntervalMethod m) {
  switch (m) {
    case IntervalMethod::asymptotic_normal:
    case IntervalMethod::bonferroni: return 'A';
    case IntervalMethod::semiparametric_boot: return 'S';
    case IntervalMethod::parametric_boot: return 'P';
  }
  return '?';
}

}  // namespace detail

/// Renders the report. Markdown mimics the paper's tables (entries multiplied
/// by 1000 and rounded to integers, settings as columns) for either the
/// individual or the simultaneous interval family; CSV carries every metric at
/// full precision.
inline std::string format_report(const SimulationReport& report, ReportStyle style,
                                 IntervalKind kind = IntervalKind::individual) {
  if (report.rows.empty()) throw ValidationError("empty report");
  std::string out;
  if (style == ReportStyle::csv) {
    out +=
        "error_dist,error_var,raneff_dist,raneff_var,setting,method,sigma_choice,s_runs,"
        "b_boot,alpha,cov_ind,cov_sim,width_ind,width_sim,varwidth_ind,varwidth_sim,"
        "regenerated_runs,failed_runs\n";
    for (const auto& r : report.rows) {
      out += std::string(to_string(r.error_dist)) + "," + detail::fmt(r.error_var) + "," +
             to_string(r.raneff_dist) + "," + detail::fmt(r.raneff_var) + "," +
             std::to_string(static_cast<int>(r.setting)) + "," + to_string(r.method) + "," +
             to_string(r.sigma_choice) + "," + std::to_string(r.s_runs) + "," +
             std::to_string(r.b_boot) + "," + detail::fmt(r.alpha) + "," +
             detail::fmt(r.cov_ind) + "," + detail::fmt(r.cov_sim) + "," +
             detail::fmt(r.width_ind) + "," + detail::fmt(r.width_sim) + "," +
             detail::fmt(r.varwidth_ind) + "," + detail::fmt(r.varwidth_sim) + "," +
             std::to_string(r.regenerated_runs) + "," + std::to_string(r.failed_runs) + "\n";
    }
    return out;
  }

  // Collect settings present, in order.
  std::vector<SizeSetting> settings;
  for (const auto& r : report.rows) {
    if (std::find(settings.begin(), settings.end(), r.setting) == settings.end()) {
      settings.push_back(r.setting);
    }
  }
  std::sort(settings.begin(), settings.end(),
            [](SizeSetting a, SizeSetting b) { return static_cast<int>(a) < static_cast<int>(b); });

  // Group rows by (pair label, method) keeping first-appearance order of pairs.
  struct Key {
    std::string e_label, u_label;
    IntervalMethod method;
    SigmaChoice choice;
  };
  std::vector<Key> keys;
  auto key_index = [&](const ReportRow& r) {
    for (std::size_t i = 0; i < keys.size(); ++i) {
      if (keys[i].e_label == detail::dist_label(r.error_dist, r.error_var) &&
          keys[i].u_label == detail::dist_label(r.raneff_dist, r.raneff_var) &&
          keys[i].method == r.method && keys[i].choice == r.sigma_choice) {
        return i;
      }
    }
    keys.push_back({detail::dist_label(r.error_dist, r.error_var),
                    detail::dist_label(r.raneff_dist, r.raneff_var), r.method, r.sigma_choice});
    return keys.size() - 1;
  };
  std::map<std::pair<std::size_t, int>, const ReportRow*> cells;
  for (const auto& r : report.rows) {
    cells[{key_index(r), static_cast<int>(r.setting)}] = &r;
  }

  const bool individual = kind == IntervalKind::individual;
  out += "| e_ij | u_j | M |";
  for (auto s : settings) out += " Cov S" + std::to_string(static_cast<int>(s)) + " |";
  for (auto s : settings) out += " Len S" + std::to_string(static_cast<int>(s)) + " |";
  for (auto s : settings) out += " VarLen S" + std::to_string(static_cast<int>(s)) + " |";
  out += "\n|";
  for (std::size_t i = 0; i < 3 + 3 * settings.size(); ++i) out += "---|";
  out += "\n";
  for (std::size_t i = 0; i < keys.size(); ++i) {
    out += "| " + keys[i].e_label + " | " + keys[i].u_label + " | ";
    out += detail::method_letter(keys[i].method);
    out += " |";
    auto cell = [&](int s) -> const ReportRow* {
      auto it = cells.find({i, s});
      return it == cells.end() ? nullptr : it->second;
    };
    for (auto s : settings) {
      const auto* r = cell(static_cast<int>(s));
      out += r ? " " + std::to_string(detail::times1000(individual ? r->cov_ind : r->cov_sim)) +
                     " |"
               : " - |";
    }
    for (auto s : settings) {
      const auto* r = cell(static_cast<int>(s));
      out += r ? " " +
                     std::to_string(detail::times1000(individual ? r->width_ind : r->width_sim)) +
                     " |"
               : " - |";
    }
    for (auto s : settings) {
      const auto* r = cell(static_cast<int>(s));
      out += r ? " " +
                     std::to_string(
                         detail::times1000(individual ? r->varwidth_ind : r->varwidth_sim)) +
                     " |"
               : " - |";
    }
    out += "\n";
  }
  return out;
}

/// Merge helper for multi-cell studies (several distribution pairs/settings).
inline void append_report(SimulationReport& into, const SimulationReport& from) {
  into.rows.insert(into.rows.end(), from.rows.begin(), from.rows.end());
}

}  // namespace lmmboot
