#pragma once

#include <Eigen/Cholesky>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lmmboot/types.hpp"

namespace lmmboot {

struct RemlConfig {
  enum class Optimizer { nelder_mead_log_scale, golden_section_on_ratio };
  enum class Likelihood { reml, ml };

  int max_iterations = 200;
  double rel_tolerance = 1e-9;     // on log-scale parameters
  double sigma_u2_floor = -1.0;    // < 0 means auto: 1e-10 * sample variance of y
  Optimizer optimizer = Optimizer::nelder_mead_log_scale;
  Likelihood likelihood = Likelihood::reml;
};

/// Per-cluster cross products. The design part (Z'Z, Z'X, X'X) is computed once
/// and shared by every bootstrap refit; only the response part (Z'y, X'y, y'y)
/// changes with y. All GLS/REML evaluations run on these, using
/// V_j^-1 = (I - sigma_u2 Z_j B_j^-1 Z_j') / sigma_e2 with
/// B_j = sigma_e2 I + sigma_u2 Z_j'Z_j, so no n_j x n_j matrix is ever formed.
class SuffStats {
 public:
  struct Cluster {
    Eigen::Index n = 0;
    Eigen::Index q = 0;
    Matrix czz;        // q x q
    Matrix czx;        // q x (p+1)
    Matrix cxx;        // (p+1) x (p+1)
    Matrix czx_outer;  // czx' czx, prescaled for the q == 1 fast path
    Vector czy;        // q
    Vector cxy;        // p+1
    double cyy = 0.0;
  };

  explicit SuffStats(const ClusteredDataset& data) : data_(&data) {
    clusters_.resize(data.m());
    for (std::size_t j = 0; j < data.m(); ++j) {
      const auto& c = data.cluster(j);
      auto& s = clusters_[j];
      s.n = c.n();
      s.q = c.q();
      s.czz.noalias() = c.Z.transpose() * c.Z;
      s.czx.noalias() = c.Z.transpose() * c.X;
      s.cxx.noalias() = c.X.transpose() * c.X;
      if (s.q == 1) s.czx_outer.noalias() = c.X.transpose() * c.Z * c.Z.transpose() * c.X;
    }
    update_response(data.stacked_y());
  }

  /// Replaces the response part with a new stacked y of the same layout.
  void update_response(const Vector& y_stacked) {
    double sum = 0.0;
    double sumsq = 0.0;
    for (std::size_t j = 0; j < data_->m(); ++j) {
      const auto& c = data_->cluster(j);
      auto& s = clusters_[j];
      const auto seg = y_stacked.segment(static_cast<Eigen::Index>(data_->offset(j)), c.n());
      s.czy.noalias() = c.Z.transpose() * seg;
      s.cxy.noalias() = c.X.transpose() * seg;
      s.cyy = seg.squaredNorm();
      sum += seg.sum();
      sumsq += s.cyy;
    }
    const double n = static_cast<double>(data_->total_n());
    y_variance_ = n > 1 ? std::max(0.0, (sumsq - sum * sum / n) / (n - 1.0)) : 0.0;
  }

  const ClusteredDataset& data() const { return *data_; }
  const std::vector<Cluster>& clusters() const { return clusters_; }
  double y_variance() const { return y_variance_; }
  Eigen::Index fixed_dim() const { return data_->fixed_dim(); }
  double total_n() const { return static_cast<double>(data_->total_n()); }

 private:
  const ClusteredDataset* data_;
  std::vector<Cluster> clusters_;
  double y_variance_ = 0.0;
};

namespace detail {

struct GlsEvaluation {
  double loglik = -std::numeric_limits<double>::infinity();
  Vector beta;
  Matrix information;  // sum_j X_j' V_j^-1 X_j
  double logdet_v = 0.0;
  double logdet_w = 0.0;
  double ypy = 0.0;  // y'Py for REML, r'V^-1 r for ML
  bool ok = false;
};

/// GLS solve and profile log-likelihood at fixed delta, via cross products.
inline GlsEvaluation evaluate_gls(const SuffStats& ss, const VarianceParams& delta,
                                  RemlConfig::Likelihood lik) {
  GlsEvaluation out;
  const double se2 = delta.sigma_e2;
  const double su2 = delta.sigma_u2;
  if (!(se2 > 0.0) || su2 < 0.0 || !std::isfinite(se2) || !std::isfinite(su2)) return out;

  const Eigen::Index p1 = ss.fixed_dim();
  Matrix w = Matrix::Zero(p1, p1);
  Vector v = Vector::Zero(p1);
  double s = 0.0;
  double logdet_v = 0.0;
  const double log_se2 = std::log(se2);

  for (const auto& c : ss.clusters()) {
    if (c.q == 1) {
      // Scalar fast path; this is the hot loop of every bootstrap refit.
      const double b = se2 + su2 * c.czz(0, 0);
      const double f = su2 / b;
      w.noalias() += (c.cxx - f * c.czx_outer) / se2;
      v.noalias() += (c.cxy - (f * c.czy(0)) * c.czx.row(0).transpose()) / se2;
      s += (c.cyy - f * c.czy(0) * c.czy(0)) / se2;
      logdet_v += (static_cast<double>(c.n) - 1.0) * log_se2 + std::log(b);
    } else {
      Matrix b = su2 * c.czz;
      b.diagonal().array() += se2;
      Eigen::LLT<Matrix> llt(b);
      if (llt.info() != Eigen::Success) return out;
      const Matrix binv_czx = llt.solve(c.czx);
      const Vector binv_czy = llt.solve(c.czy);
      w.noalias() += (c.cxx - su2 * c.czx.transpose() * binv_czx) / se2;
      v.noalias() += (c.cxy - su2 * c.czx.transpose() * binv_czy) / se2;
      s += (c.cyy - su2 * c.czy.dot(binv_czy)) / se2;
      double logdet_b = 0.0;
      for (Eigen::Index i = 0; i < c.q; ++i) logdet_b += 2.0 * std::log(llt.matrixLLT()(i, i));
      logdet_v += (static_cast<double>(c.n - c.q)) * log_se2 + logdet_b;
    }
  }

  Eigen::LDLT<Matrix> ldlt(w);
  if (ldlt.info() != Eigen::Success) return out;
  const Vector d = ldlt.vectorD();
  if ((d.array() <= 0.0).any()) return out;
  out.beta = ldlt.solve(v);
  out.information = w;
  out.logdet_v = logdet_v;
  out.logdet_w = d.array().log().sum();
  out.ypy = s - v.dot(out.beta);

  constexpr double log2pi = 1.8378770664093454836;
  const double n = ss.total_n();
  if (lik == RemlConfig::Likelihood::reml) {
    const double df = n - static_cast<double>(p1);
    out.loglik = -0.5 * (df * log2pi + logdet_v + out.logdet_w + out.ypy);
  } else {
    out.loglik = -0.5 * (n * log2pi + logdet_v + out.ypy);
  }
  out.ok = std::isfinite(out.loglik);
  return out;
}

/// BLUP at fixed delta given beta: u_j = sigma_u2 B_j^-1 Z_j'(y_j - X_j beta).
inline std::vector<Vector> blup_from_stats(const SuffStats& ss, const VarianceParams& delta,
                                           const Vector& beta) {
  std::vector<Vector> u(ss.clusters().size());
  for (std::size_t j = 0; j < ss.clusters().size(); ++j) {
    const auto& c = ss.clusters()[j];
    const Vector zr = c.czy - c.czx * beta;
    if (delta.sigma_u2 == 0.0) {
      u[j] = Vector::Zero(c.q);
    } else if (c.q == 1) {
      u[j] = Vector::Constant(1, delta.sigma_u2 * zr(0) /
                                     (delta.sigma_e2 + delta.sigma_u2 * c.czz(0, 0)));
    } else {
      Matrix b = delta.sigma_u2 * c.czz;
      b.diagonal().array() += delta.sigma_e2;
      u[j] = delta.sigma_u2 * b.llt().solve(zr);
    }
  }
  return u;
}

struct NelderMeadResult {
  std::array<double, 2> x{};
  double fval = std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool converged = false;
};

/// Standard Nelder-Mead on R^2 (reflection 1, expansion 2, contraction 1/2,
/// shrink 1/2). Converges when the simplex collapses below xtol in max norm
/// and the function spread is negligible.
template <typename F>
NelderMeadResult nelder_mead_2d(const F& f, std::array<double, 2> start, double step,
                                double xtol, int max_iter) {
  using Point = std::array<double, 2>;
  std::array<Point, 3> xs{start, {start[0] + step, start[1]}, {start[0], start[1] + step}};
  std::array<double, 3> fs{f(xs[0]), f(xs[1]), f(xs[2])};
  NelderMeadResult res;

  auto order = [&]() {
    for (int i = 0; i < 3; ++i) {
      for (int k = i + 1; k < 3; ++k) {
        if (fs[k] < fs[i]) {
          std::swap(fs[i], fs[k]);
          std::swap(xs[i], xs[k]);
        }
      }
    }
  };

  int iter = 0;
  for (; iter < max_iter; ++iter) {
    order();
    const double xspread =
        std::max(std::max(std::abs(xs[1][0] - xs[0][0]), std::abs(xs[2][0] - xs[0][0])),
                 std::max(std::abs(xs[1][1] - xs[0][1]), std::abs(xs[2][1] - xs[0][1])));
    const double fspread = std::abs(fs[2] - fs[0]);
    if (xspread < xtol && fspread < 1e-12 * (std::abs(fs[0]) + 1.0)) {
      res.converged = true;
      break;
    }
    const Point centroid{(xs[0][0] + xs[1][0]) / 2.0, (xs[0][1] + xs[1][1]) / 2.0};
    auto at = [&](double t) {
      return Point{centroid[0] + t * (centroid[0] - xs[2][0]),
                   centroid[1] + t * (centroid[1] - xs[2][1])};
    };
    const Point xr = at(1.0);
    const double fr = f(xr);
    if (fr < fs[0]) {
      const Point xe = at(2.0);
      const double fe = f(xe);
      if (fe < fr) {
        xs[2] = xe;
        fs[2] = fe;
      } else {
        xs[2] = xr;
        fs[2] = fr;
      }
    } else if (fr < fs[1]) {
      xs[2] = xr;
      fs[2] = fr;
    } else {
      const Point xc = at(fr < fs[2] ? 0.5 : -0.5);
      const double fc = f(xc);
      if (fc < std::min(fr, fs[2])) {
        xs[2] = xc;
        fs[2] = fc;
      } else {
        for (int i = 1; i < 3; ++i) {
          xs[i] = {xs[0][0] + 0.5 * (xs[i][0] - xs[0][0]), xs[0][1] + 0.5 * (xs[i][1] - xs[0][1])};
          fs[i] = f(xs[i]);
        }
      }
    }
  }
  order();
  res.x = xs[0];
  res.fval = fs[0];
  res.iterations = iter;
  return res;
}

/// Golden-section maximization of g on [lo, hi]; assumes unimodality.
template <typename G>
double golden_section_max(const G& g, double lo, double hi, double xtol, int max_iter,
                          int* iterations) {
  const double invphi = 0.6180339887498949;
  double a = lo;
  double b = hi;
  double c = b - invphi * (b - a);
  double d = a + invphi * (b - a);
  double gc = g(c);
  double gd = g(d);
  int iter = 0;
  while (b - a > xtol && iter < max_iter) {
    if (gc > gd) {
      b = d;
      d = c;
      gd = gc;
      c = b - invphi * (b - a);
      gc = g(c);
    } else {
      a = c;
      c = d;
      gc = gd;
      d = a + invphi * (b - a);
      gd = g(d);
    }
    ++iter;
  }
  if (iterations) *iterations += iter;
  return 0.5 * (a + b);
}

inline double clamped_exp(double x) { return std::exp(std::clamp(x, -700.0, 700.0)); }

/// Moment-based starting value: OLS residuals split into within- and
/// between-cluster variation.
inline VarianceParams moment_start(const SuffStats& ss) {
  VarianceParams start{std::max(ss.y_variance(), 1e-12), 0.0};
  auto ols = evaluate_gls(ss, VarianceParams{1.0, 0.0}, RemlConfig::Likelihood::ml);
  if (!ols.ok) return start;
  const auto& data = ss.data();
  double ssw = 0.0;
  double sum_inv_n = 0.0;
  std::vector<double> cluster_means;
  cluster_means.reserve(data.m());
  for (std::size_t j = 0; j < data.m(); ++j) {
    const auto& c = data.cluster(j);
    const Vector r = c.y - c.X * ols.beta;
    const double mean = r.mean();
    ssw += (r.array() - mean).square().sum();
    cluster_means.push_back(mean);
    sum_inv_n += 1.0 / static_cast<double>(c.n());
  }
  const double m = static_cast<double>(data.m());
  const double n = ss.total_n();
  const double s_within = n > m ? ssw / (n - m) : ss.y_variance();
  double mean_of_means = 0.0;
  for (double v : cluster_means) mean_of_means += v;
  mean_of_means /= m;
  double s_between = 0.0;
  for (double v : cluster_means) s_between += (v - mean_of_means) * (v - mean_of_means);
  s_between = m > 1 ? s_between / (m - 1.0) : 0.0;
  start.sigma_e2 = std::max(s_within, 1e-8 * std::max(ss.y_variance(), 1.0));
  start.sigma_u2 = std::max(s_between - s_within * sum_inv_n / m, 0.0);
  return start;
}

}  // namespace detail

/// GLS estimate of beta at fixed variance parameters, with the information
/// matrix sum_j X_j' V_j^-1 X_j returned for reuse.
inline std::pair<Vector, Matrix> gls_beta(const ClusteredDataset& data,
                                          const VarianceParams& delta) {
  if (!delta.valid()) throw ValidationError("invalid variance parameters");
  SuffStats ss(data);
  auto eval = detail::evaluate_gls(ss, delta, RemlConfig::Likelihood::ml);
  if (!eval.ok) throw ValidationError("rank deficient: singular GLS information matrix");
  return {eval.beta, eval.information};
}

/// BLUP of the random effects at fixed delta and beta.
inline std::vector<Vector> blup_u(const ClusteredDataset& data, const VarianceParams& delta,
                                  const Vector& beta) {
  if (!delta.valid()) throw ValidationError("invalid variance parameters");
  if (beta.size() != data.fixed_dim()) throw ValidationError("beta has wrong length");
  SuffStats ss(data);
  return detail::blup_from_stats(ss, delta, beta);
}

namespace detail {

/// REML/ML fit on prebuilt sufficient statistics. `hint` seeds an extra
/// optimizer start (used by bootstrap refits, which start at the parent fit).
inline FitResult fit_from_stats(const SuffStats& ss, const RemlConfig& config,
                                const VarianceParams* hint = nullptr) {
  const double var_y = std::max(ss.y_variance(), 1e-300);
  const double floor =
      config.sigma_u2_floor >= 0.0 ? config.sigma_u2_floor : 1e-10 * ss.y_variance();
  const double floor_pos = std::max(floor, 1e-300);

  auto objective = [&](const std::array<double, 2>& x) {
    VarianceParams delta{clamped_exp(x[0]), clamped_exp(x[1])};
    auto eval = evaluate_gls(ss, delta, config.likelihood);
    return eval.ok ? -eval.loglik : std::numeric_limits<double>::infinity();
  };

  int iterations = 0;
  VarianceParams best{var_y, var_y / 2.0};
  double best_f = std::numeric_limits<double>::infinity();
  bool converged = false;

  if (config.optimizer == RemlConfig::Optimizer::nelder_mead_log_scale) {
    // A hint (bootstrap refits start at the parent fit) replaces the
    // multi-start list; the polish pass below still guards against a sloppy
    // first descent.
    std::vector<VarianceParams> starts;
    if (hint && hint->valid()) {
      starts.push_back(*hint);
    } else {
      starts.push_back(moment_start(ss));
      starts.push_back(VarianceParams{var_y, var_y / 2.0});
    }
    for (const auto& s0 : starts) {
      const std::array<double, 2> x0{std::log(std::max(s0.sigma_e2, 1e-8 * var_y)),
                                     std::log(std::max(s0.sigma_u2, floor_pos))};
      auto r = nelder_mead_2d(objective, x0, 0.5, config.rel_tolerance, config.max_iterations);
      iterations += r.iterations;
      if (r.fval < best_f) {
        best_f = r.fval;
        best = VarianceParams{clamped_exp(r.x[0]), clamped_exp(r.x[1])};
        converged = r.converged;
      }
    }
    // Polish pass with a tight simplex around the winner.
    {
      const std::array<double, 2> x0{std::log(std::max(best.sigma_e2, 1e-300)),
                                     std::log(std::max(best.sigma_u2, floor_pos))};
      auto r = nelder_mead_2d(objective, x0, 0.02, config.rel_tolerance, config.max_iterations);
      iterations += r.iterations;
      if (r.fval <= best_f) {
        best_f = r.fval;
        best = VarianceParams{clamped_exp(r.x[0]), clamped_exp(r.x[1])};
        converged = converged || r.converged;
      }
    }
  } else {
    // Profile out sigma_e2 given the ratio psi = sigma_u2/sigma_e2 and run a
    // 1-d golden-section search on log psi.
    const Eigen::Index p1 = ss.fixed_dim();
    const double n = ss.total_n();
    const double df = config.likelihood == RemlConfig::Likelihood::reml
                          ? n - static_cast<double>(p1)
                          : n;
    auto profile = [&](double log_psi) {
      const double psi = clamped_exp(log_psi);
      Matrix w = Matrix::Zero(p1, p1);
      Vector v = Vector::Zero(p1);
      double s = 0.0;
      double logdet_vt = 0.0;
      for (const auto& c : ss.clusters()) {
        Matrix b = psi * c.czz;
        b.diagonal().array() += 1.0;
        Eigen::LLT<Matrix> llt(b);
        if (llt.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
        w.noalias() += c.cxx - psi * c.czx.transpose() * llt.solve(c.czx);
        v.noalias() += c.cxy - psi * c.czx.transpose() * llt.solve(c.czy);
        s += c.cyy - psi * c.czy.dot(llt.solve(c.czy));
        for (Eigen::Index i = 0; i < c.q; ++i) logdet_vt += 2.0 * std::log(llt.matrixLLT()(i, i));
      }
      Eigen::LDLT<Matrix> ldlt(w);
      const Vector d = ldlt.vectorD();
      if (ldlt.info() != Eigen::Success || (d.array() <= 0.0).any())
        return -std::numeric_limits<double>::infinity();
      const double ypy = s - v.dot(ldlt.solve(v));
      if (!(ypy > 0.0)) return -std::numeric_limits<double>::infinity();
      const double se2 = ypy / df;
      double ll = -0.5 * (df * std::log(se2) + logdet_vt);
      if (config.likelihood == RemlConfig::Likelihood::reml) ll -= 0.5 * d.array().log().sum();
      return ll;
    };
    const double lo = std::log(1e-12);
    const double hi = std::log(1e12);
    const int grid = 49;
    int best_i = 0;
    double best_g = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < grid; ++i) {
      const double t = lo + (hi - lo) * i / (grid - 1);
      const double g = profile(t);
      ++iterations;
      if (g > best_g) {
        best_g = g;
        best_i = i;
      }
    }
    const double step = (hi - lo) / (grid - 1);
    const double a = lo + step * std::max(0, best_i - 1);
    const double b = lo + step * std::min(grid - 1, best_i + 1);
    const double log_psi =
        golden_section_max(profile, a, b, config.rel_tolerance, 300, &iterations);
    const double psi = clamped_exp(log_psi);
    // Recover sigma_e2 at the chosen ratio.
    VarianceParams ratio_delta{1.0, psi};
    auto eval = evaluate_gls(ss, ratio_delta, config.likelihood);
    if (!eval.ok) throw NumericalError("variance-ratio profile evaluation failed");
    const double se2 = eval.ypy / df;
    best = VarianceParams{se2, psi * se2};
    best_f = -profile(log_psi);
    converged = true;
  }

  if (!std::isfinite(best_f)) {
    throw NumericalError("variance-component optimization failed: objective not finite");
  }
  if (!converged) {
    throw NumericalError("variance-component optimization did not converge after " +
                         std::to_string(iterations) + " iterations; last delta = (" +
                         std::to_string(best.sigma_e2) + ", " + std::to_string(best.sigma_u2) +
                         ")");
  }

  FitResult fit;
  fit.boundary_flag = best.sigma_u2 <= floor;
  fit.delta_hat = VarianceParams{std::max(best.sigma_e2, 1e-300),
                                 fit.boundary_flag ? floor : best.sigma_u2};
  auto eval = evaluate_gls(ss, fit.delta_hat, config.likelihood);
  if (!eval.ok) throw NumericalError("likelihood evaluation failed at the optimum");
  fit.beta_hat = eval.beta;
  fit.gls_information = eval.information;
  fit.reml_loglik = eval.loglik;
  fit.u_hat = blup_from_stats(ss, fit.delta_hat, fit.beta_hat);
  fit.iterations = iterations;
  return fit;
}

}  // namespace detail

/// Two-stage fit: REML (or ML) for delta on the log scale, then GLS for beta
/// and BLUP for u at delta_hat. sigma_u2 is clamped at the floor and flagged
/// when the optimum sits on the boundary.
inline FitResult reml_fit(const ClusteredDataset& data, const RemlConfig& config = {}) {
  auto report = validate_dataset(data);
  if (!report.ok()) throw ValidationError("invalid dataset: " + report.summary());
  SuffStats ss(data);
  return detail::fit_from_stats(ss, config);
}

/// theta_hat_j = k_j' beta_hat + l_j' u_hat_j.
inline Vector predict_theta(const FitResult& fit, const MixedEffectTarget& target) {
  if (target.k.size() != fit.u_hat.size() || target.l.size() != fit.u_hat.size()) {
    throw ValidationError("target has wrong number of clusters");
  }
  Vector theta(static_cast<Eigen::Index>(target.k.size()));
  for (std::size_t j = 0; j < target.k.size(); ++j) {
    if (target.k[j].size() != fit.beta_hat.size() ||
        target.l[j].size() != fit.u_hat[j].size()) {
      throw ValidationError("target dimensions do not match fit");
    }
    theta(static_cast<Eigen::Index>(j)) =
        target.k[j].dot(fit.beta_hat) + target.l[j].dot(fit.u_hat[j]);
  }
  return theta;
}

/// Conditional residuals e_hat = y - X beta_hat - Z u_hat (stacked), with the
/// predicted random effects alongside.
inline std::pair<Vector, std::vector<Vector>> conditional_residuals(const ClusteredDataset& data,
                                                                    const FitResult& fit) {
  Vector e(static_cast<Eigen::Index>(data.total_n()));
  for (std::size_t j = 0; j < data.m(); ++j) {
    const auto& c = data.cluster(j);
    e.segment(static_cast<Eigen::Index>(data.offset(j)), c.n()) =
        c.y - c.X * fit.beta_hat - c.Z * fit.u_hat[j];
  }
  return {e, fit.u_hat};
}

}  // namespace lmmboot
