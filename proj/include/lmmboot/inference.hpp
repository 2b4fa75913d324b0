#pragma once

#include <boost/math/distributions/normal.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "lmmboot/bootstrap.hpp"
#include "lmmboot/estimation.hpp"
#include "lmmboot/types.hpp"

namespace lmmboot {

enum class IntervalKind : std::uint8_t { individual = 0, simultaneous = 1 };
enum class IntervalMethod : std::uint8_t {
  semiparametric_boot = 0,
  parametric_boot = 1,
  asymptotic_normal = 2,
  bonferroni = 3
};

inline const char* to_string(IntervalKind k) {
  return k == IntervalKind::individual ? "individual" : "simultaneous";
}

inline const char* to_string(IntervalMethod m) {
  switch (m) {
    case IntervalMethod::semiparametric_boot: return "semiparametric";
    case IntervalMethod::parametric_boot: return "parametric";
    case IntervalMethod::asymptotic_normal: return "asymptotic";
    case IntervalMethod::bonferroni: return "bonferroni";
  }
  return "?";
}

inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw ValidationError("quantile probability must be in (0, 1)");
  return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

/// Per-cluster intervals theta_hat_j +- critical_j * sigma_j.
struct IntervalSet {
  IntervalKind kind = IntervalKind::individual;
  IntervalMethod method = IntervalMethod::asymptotic_normal;
  double alpha = 0.05;
  Vector center;
  Vector sigma;
  Vector critical;  // per-cluster (a shared value repeated for simultaneous sets)
  Vector half_width;
  Vector lower;
  Vector upper;

  bool contains(Eigen::Index j, double value) const {
    return value >= lower(j) && value <= upper(j);
  }
  bool contains_all(const Vector& values) const {
    for (Eigen::Index j = 0; j < center.size(); ++j) {
      if (!contains(j, values(j))) return false;
    }
    return true;
  }
};

namespace detail {

inline IntervalSet make_intervals(const Vector& theta_hat, const Vector& sigma,
                                  const Vector& critical, IntervalKind kind,
                                  IntervalMethod method, double alpha) {
  if (sigma.size() != theta_hat.size() || critical.size() != theta_hat.size()) {
    throw ValidationError("interval inputs have mismatched lengths");
  }
  if ((sigma.array() <= 0.0).any()) {
    throw ValidationError("interval scale sigma must be positive for every cluster");
  }
  if ((critical.array() < 0.0).any()) {
    throw ValidationError("critical values must be non-negative");
  }
  IntervalSet out;
  out.kind = kind;
  out.method = method;
  out.alpha = alpha;
  out.center = theta_hat;
  out.sigma = sigma;
  out.critical = critical;
  out.half_width = critical.cwiseProduct(sigma);
  out.lower = out.center - out.half_width;
  out.upper = out.center + out.half_width;
  return out;
}

}  // namespace detail

/// Individual intervals with per-cluster critical values.
inline IntervalSet individual_intervals(const FitResult& fit, const MixedEffectTarget& target,
                                        const Vector& sigma, const Vector& critical,
                                        IntervalMethod method, double alpha) {
  return detail::make_intervals(predict_theta(fit, target), sigma, critical,
                                IntervalKind::individual, method, alpha);
}

inline IntervalSet individual_intervals(const Vector& theta_hat, const Vector& sigma,
                                        const Vector& critical, IntervalMethod method,
                                        double alpha) {
  return detail::make_intervals(theta_hat, sigma, critical, IntervalKind::individual, method,
                                alpha);
}

/// Simultaneous intervals: one critical value shared by every cluster.
inline IntervalSet simultaneous_intervals(const FitResult& fit, const MixedEffectTarget& target,
                                          const Vector& sigma, double q_alpha,
                                          IntervalMethod method, double alpha) {
  const Vector theta_hat = predict_theta(fit, target);
  return detail::make_intervals(theta_hat, sigma,
                                Vector::Constant(theta_hat.size(), q_alpha),
                                IntervalKind::simultaneous, method, alpha);
}

inline IntervalSet simultaneous_intervals(const Vector& theta_hat, const Vector& sigma,
                                          double q_alpha, IntervalMethod method, double alpha) {
  return detail::make_intervals(theta_hat, sigma,
                                Vector::Constant(theta_hat.size(), q_alpha),
                                IntervalKind::simultaneous, method, alpha);
}

/// Critical values from a bootstrap distribution: per-cluster order statistics
/// of |t*_j| and the shared order statistic of M*.
struct BootstrapCriticalValues {
  Vector individual;   // q*_{j,alpha}
  double simultaneous;  // q*_alpha
};

inline BootstrapCriticalValues bootstrap_critical_values(const BootstrapDistribution& dist,
                                                         double alpha) {
  BootstrapCriticalValues out;
  const Eigen::Index m = dist.t_star.cols();
  out.individual.resize(m);
  for (Eigen::Index j = 0; j < m; ++j) {
    out.individual(j) = quantile_order_stat(Vector(dist.t_star.col(j).cwiseAbs()), alpha);
  }
  out.simultaneous = quantile_order_stat(dist.m_star, alpha);
  return out;
}

/// Reference t-statistics against a known truth (simulation use):
/// t_j = (theta_hat_j - theta_j) / sigma_j and M = max_j |t_j|.
struct ReferenceStatistics {
  Vector t;
  double m_stat = 0.0;
};

inline ReferenceStatistics reference_statistics(const Vector& theta_hat, const Vector& theta_true,
                                                const Vector& sigma) {
  if (theta_true.size() != theta_hat.size() || sigma.size() != theta_hat.size()) {
    throw ValidationError("reference statistic inputs have mismatched lengths");
  }
  if ((sigma.array() <= 0.0).any()) throw ValidationError("sigma must be positive");
  ReferenceStatistics out;
  out.t = (theta_hat - theta_true).cwiseQuotient(sigma);
  out.m_stat = out.t.size() > 0 ? out.t.cwiseAbs().maxCoeff() : 0.0;
  return out;
}

inline ReferenceStatistics reference_statistics(const FitResult& fit,
                                                const MixedEffectTarget& target,
                                                const Vector& sigma, const Vector& theta_true) {
  return reference_statistics(predict_theta(fit, target), theta_true, sigma);
}

/// Two-sided individual and multiple tests of A theta = c with bootstrap
/// critical values.
struct TestResult {
  Matrix a;
  Vector c;
  Vector theta_h_hat;       // A theta_hat
  Vector sigma_h;           // contrast-level plug-in scale
  Vector t_h;               // (theta_h_hat - c) / sigma_h
  double m_h = 0.0;         // max_j |t_h|
  Vector critical_individual;
  double critical_global = 0.0;
  std::vector<bool> reject_individual;
  bool reject_global = false;
};

/// Contrast-level sigma via the independent-cluster plug-in
/// sigma_H_j^2 = sum_k A_jk^2 sigma_k^2 (exact for row-selection contrasts).
inline Vector contrast_sigma(const Matrix& a, const Vector& sigma) {
  return (a.array().square().matrix() * sigma.array().square().matrix()).cwiseSqrt();
}

inline TestResult hypothesis_test(const FitResult& fit, const MixedEffectTarget& target,
                                  const BootstrapDistribution& boot, const Matrix& a,
                                  const Vector& c, double alpha) {
  const auto m = static_cast<Eigen::Index>(target.k.size());
  if (a.cols() != m) throw ValidationError("contrast matrix has wrong number of columns");
  if (a.rows() > m) throw ValidationError("more contrasts than clusters");
  if (c.size() != a.rows()) throw ValidationError("constant vector length must match contrasts");
  if (detail::numeric_rank(a.transpose()) < a.rows()) {
    throw ValidationError("rank deficient: contrast matrix does not have full row rank");
  }
  if (boot.t_star.cols() != m) throw ValidationError("bootstrap distribution has wrong width");

  TestResult out;
  out.a = a;
  out.c = c;
  out.theta_h_hat = a * predict_theta(fit, target);
  out.sigma_h = contrast_sigma(a, boot.sigma_hat);
  if ((out.sigma_h.array() <= 0.0).any()) {
    throw ValidationError("contrast sigma must be positive");
  }
  out.t_h = (out.theta_h_hat - c).cwiseQuotient(out.sigma_h);
  out.m_h = out.t_h.size() > 0 ? out.t_h.cwiseAbs().maxCoeff() : 0.0;

  // Bootstrap null statistics: t*_{H_0 j} = (A theta_hat* - A theta*)_j / sigma*_H_j.
  const Matrix diff = (boot.theta_hat_star - boot.theta_star) * a.transpose();  // B x m'
  const Matrix sigma_star_h =
      (boot.sigma_star.array().square().matrix() * a.array().square().matrix().transpose())
          .cwiseSqrt();
  const Matrix t_h0 = diff.cwiseQuotient(sigma_star_h).cwiseAbs();

  out.critical_individual.resize(a.rows());
  for (Eigen::Index j = 0; j < a.rows(); ++j) {
    out.critical_individual(j) = quantile_order_stat(Vector(t_h0.col(j)), alpha);
  }
  out.critical_global = quantile_order_stat(Vector(t_h0.rowwise().maxCoeff()), alpha);

  out.reject_individual.resize(static_cast<std::size_t>(a.rows()));
  for (Eigen::Index j = 0; j < a.rows(); ++j) {
    out.reject_individual[static_cast<std::size_t>(j)] =
        std::abs(out.t_h(j)) >= out.critical_individual(j);
  }
  out.reject_global = out.m_h >= out.critical_global;
  return out;
}

}  // namespace lmmboot
