#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "lmmboot/estimation.hpp"
#include "lmmboot/parallel.hpp"
#include "lmmboot/rng.hpp"
#include "lmmboot/types.hpp"
#include "lmmboot/variability.hpp"

namespace lmmboot {

enum class Scheme : std::uint8_t { semiparametric = 0, parametric = 1 };
enum class ScalingMode : std::uint8_t { scalar_moment_match = 0, matrix_symmetrized = 1 };
enum class SigmaChoice : std::uint8_t {
  g1 = 0,
  mse_l = 1,
  mse_b1 = 2,
  mse_3t = 3,
  mse_spa = 4,
  mse_bc = 5
};

inline const char* to_string(Scheme s) {
  return s == Scheme::semiparametric ? "semiparametric" : "parametric";
}

inline const char* to_string(SigmaChoice c) {
  switch (c) {
    case SigmaChoice::g1: return "g1";
    case SigmaChoice::mse_l: return "mse_l";
    case SigmaChoice::mse_b1: return "mse_b1";
    case SigmaChoice::mse_3t: return "mse_3t";
    case SigmaChoice::mse_spa: return "mse_spa";
    case SigmaChoice::mse_bc: return "mse_bc";
  }
  return "?";
}

struct BootstrapConfig {
  int b_outer = 1000;
  int c_inner = 1;  // inner replicates per outer replicate (double bootstrap)
  double alpha = 0.05;
  Scheme scheme = Scheme::semiparametric;
  SigmaChoice sigma_choice = SigmaChoice::g1;
  std::uint64_t seed = 0;
  ScalingMode scaling = ScalingMode::scalar_moment_match;
  // Evaluate sigma*_j at the original delta_hat instead of the replicate's
  // delta_hat* (applies to the analytic choices g1 and mse_l).
  bool studentize_at_original_delta = false;
  bool record_mse_l = false;  // keep per-replicate mse_l values (implied by sigma_choice)
  unsigned workers = 1;
  RemlConfig refit;

  void check() const {
    if (b_outer < 1) throw ValidationError("b_outer must be >= 1");
    if (c_inner < 0) throw ValidationError("c_inner must be >= 0");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("alpha must be in (0, 1)");
  }
};

/// Residual pools ready for resampling: raw conditional residuals and
/// predicted random effects, plus their rescaled and centred versions.
struct ResidualPools {
  Vector e_raw;
  std::vector<Vector> u_raw;
  Vector e_scaled_centered;
  std::vector<Vector> u_scaled_centered;
  ScalingMode mode = ScalingMode::scalar_moment_match;
  bool degenerate_u = false;  // boundary fit: u pool is all zeros
};

namespace detail {

/// Symmetric pseudo-inverse square root via eigendecomposition; eigenvalues
/// below tol * lambda_max are dropped.
inline Matrix pseudo_inv_sqrt(const Matrix& a, double tol = 1e-12) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(a);
  const Vector& ev = es.eigenvalues();
  const double cutoff = tol * std::max(ev.cwiseAbs().maxCoeff(), 1e-300);
  Vector d(ev.size());
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    d(i) = ev(i) > cutoff ? 1.0 / std::sqrt(ev(i)) : 0.0;
  }
  return es.eigenvectors() * d.asDiagonal() * es.eigenvectors().transpose();
}

inline ResidualPools build_pools(const ClusteredDataset& data, const FitResult& fit,
                                 ScalingMode mode) {
  ResidualPools pools;
  pools.mode = mode;
  auto [e_raw, u_raw] = conditional_residuals(data, fit);
  pools.e_raw = std::move(e_raw);
  pools.u_raw = std::move(u_raw);

  const std::size_t m = data.m();
  const double n = static_cast<double>(data.total_n());
  const double se2 = fit.delta_hat.sigma_e2;
  const double su2 = fit.delta_hat.sigma_u2;

  double u_sumsq = 0.0;
  for (const auto& u : pools.u_raw) u_sumsq += u.squaredNorm();
  pools.degenerate_u = fit.boundary_flag || u_sumsq <= 0.0;

  if (mode == ScalingMode::scalar_moment_match) {
    // e_s = e * sqrt(n sigma_e2 / sum e^2); u scaled per coordinate so the
    // pooled second moment matches sigma_u2.
    const double e_sumsq = pools.e_raw.squaredNorm();
    pools.e_scaled_centered =
        e_sumsq > 0.0 ? Vector(pools.e_raw * std::sqrt(n * se2 / e_sumsq))
                      : Vector(Vector::Zero(pools.e_raw.size()));
    pools.u_scaled_centered.resize(m);
    Eigen::Index max_q = 0;
    for (std::size_t j = 0; j < m; ++j) {
      pools.u_scaled_centered[j] = Vector::Zero(pools.u_raw[j].size());
      max_q = std::max(max_q, pools.u_raw[j].size());
    }
    if (!pools.degenerate_u) {
      for (Eigen::Index r = 0; r < max_q; ++r) {
        double sumsq = 0.0;
        double count = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
          if (pools.u_raw[j].size() > r) {
            sumsq += pools.u_raw[j](r) * pools.u_raw[j](r);
            count += 1.0;
          }
        }
        const double factor = sumsq > 0.0 ? std::sqrt(count * su2 / sumsq) : 0.0;
        for (std::size_t j = 0; j < m; ++j) {
          if (pools.u_raw[j].size() > r) pools.u_scaled_centered[j](r) = factor * pools.u_raw[j](r);
        }
      }
    }
  } else {
    // Matrix mode: u_s = G^1/2 C_u^-1/2 u with C_u = sym(G Z' V^-1 (I-H) Z G),
    // e_s = R^1/2 C_e^-1/2 e with C_e = sym(R V^-1 (I-H) R). The hat-type
    // projection H = X (X'V^-1X)^-1 X'V^-1 couples clusters, so this builds
    // stacked dense matrices; intended for moderate n.
    const auto n_idx = static_cast<Eigen::Index>(data.total_n());
    Eigen::Index q_total = 0;
    for (std::size_t j = 0; j < m; ++j) q_total += data.cluster(j).q();
    Matrix x(n_idx, data.fixed_dim());
    Matrix z = Matrix::Zero(n_idx, q_total);
    Matrix vinv = Matrix::Zero(n_idx, n_idx);
    Vector u_stacked(q_total);
    Eigen::Index qoff = 0;
    for (std::size_t j = 0; j < m; ++j) {
      const auto& c = data.cluster(j);
      const auto off = static_cast<Eigen::Index>(data.offset(j));
      x.middleRows(off, c.n()) = c.X;
      z.block(off, qoff, c.n(), c.q()) = c.Z;
      Matrix b = su2 * (c.Z.transpose() * c.Z);
      b.diagonal().array() += se2;
      Matrix vi = -su2 * (c.Z * b.llt().solve(c.Z.transpose()));
      vi.diagonal().array() += 1.0;
      vinv.block(off, off, c.n(), c.n()) = vi / se2;
      u_stacked.segment(qoff, c.q()) = pools.u_raw[j];
      qoff += c.q();
    }
    const Matrix vix = vinv * x;
    const Matrix w = x.transpose() * vix;
    const Matrix ih = Matrix::Identity(n_idx, n_idx) - x * w.ldlt().solve(vix.transpose());
    const Matrix vinv_ih = vinv * ih;
    const Matrix ce = se2 * se2 * 0.5 * (vinv_ih + vinv_ih.transpose());
    const Matrix zt_vinv_ih_z = z.transpose() * vinv_ih * z;
    const Matrix cu = su2 * su2 * 0.5 * (zt_vinv_ih_z + zt_vinv_ih_z.transpose());
    pools.e_scaled_centered = std::sqrt(se2) * (pseudo_inv_sqrt(ce) * pools.e_raw);
    Vector u_s = pools.degenerate_u
                     ? Vector(Vector::Zero(q_total))
                     : Vector(std::sqrt(su2) * (pseudo_inv_sqrt(cu) * u_stacked));
    pools.u_scaled_centered.resize(m);
    qoff = 0;
    for (std::size_t j = 0; j < m; ++j) {
      pools.u_scaled_centered[j] = u_s.segment(qoff, data.cluster(j).q());
      qoff += data.cluster(j).q();
    }
  }

  // Centre: subtract the empirical mean (globally for e, per coordinate for u).
  pools.e_scaled_centered.array() -= pools.e_scaled_centered.mean();
  Eigen::Index max_q = 0;
  for (const auto& u : pools.u_scaled_centered) max_q = std::max(max_q, u.size());
  for (Eigen::Index r = 0; r < max_q; ++r) {
    double sum = 0.0;
    double count = 0.0;
    for (const auto& u : pools.u_scaled_centered) {
      if (u.size() > r) {
        sum += u(r);
        count += 1.0;
      }
    }
    const double mean = count > 0.0 ? sum / count : 0.0;
    for (auto& u : pools.u_scaled_centered) {
      if (u.size() > r) u(r) -= mean;
    }
  }
  return pools;
}

}  // namespace detail

/// Rescales and centres the conditional residuals and predicted random effects
/// so resampling reproduces the fitted variances without shrinkage bias.
inline ResidualPools scale_center_residuals(const ClusteredDataset& data, const FitResult& fit,
                                            ScalingMode mode = ScalingMode::scalar_moment_match) {
  return detail::build_pools(data, fit, mode);
}

/// One bootstrap data draw: resampled random effects and the generated response.
struct BootstrapSample {
  Vector y_star;                // stacked
  std::vector<Vector> u_star;   // per cluster
};

/// Draws u* and e* with replacement from the centred pools and assembles
/// y* = X beta_hat + Z u* + e*. Draw order: u coordinates cluster-major,
/// then e entries in stacked order.
inline BootstrapSample draw_semiparametric(const ResidualPools& pools, const FitResult& fit,
                                           const ClusteredDataset& data, std::mt19937_64& rng) {
  const std::size_t m = data.m();
  BootstrapSample s;
  s.u_star.resize(m);
  s.y_star.resize(static_cast<Eigen::Index>(data.total_n()));

  Eigen::Index max_q = 0;
  for (std::size_t j = 0; j < m; ++j) max_q = std::max(max_q, data.cluster(j).q());
  // Coordinate pools: clusters with q_j > r contribute to pool r.
  std::vector<std::vector<double>> pool_by_coord(static_cast<std::size_t>(max_q));
  for (Eigen::Index r = 0; r < max_q; ++r) {
    for (const auto& u : pools.u_scaled_centered) {
      if (u.size() > r) pool_by_coord[static_cast<std::size_t>(r)].push_back(u(r));
    }
  }
  for (std::size_t j = 0; j < m; ++j) {
    const auto q = data.cluster(j).q();
    s.u_star[j].resize(q);
    for (Eigen::Index r = 0; r < q; ++r) {
      const auto& pool = pool_by_coord[static_cast<std::size_t>(r)];
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      s.u_star[j](r) = pool[pick(rng)];
    }
  }
  const auto n = static_cast<Eigen::Index>(data.total_n());
  std::uniform_int_distribution<Eigen::Index> pick_e(0, pools.e_scaled_centered.size() - 1);
  Vector e_star(n);
  for (Eigen::Index i = 0; i < n; ++i) e_star(i) = pools.e_scaled_centered(pick_e(rng));
  for (std::size_t j = 0; j < m; ++j) {
    const auto& c = data.cluster(j);
    const auto off = static_cast<Eigen::Index>(data.offset(j));
    s.y_star.segment(off, c.n()) =
        c.X * fit.beta_hat + c.Z * s.u_star[j] + e_star.segment(off, c.n());
  }
  return s;
}

/// Parametric baseline: u*_j ~ N(0, sigma_u2 I), e* ~ N(0, sigma_e2 I).
inline BootstrapSample draw_parametric(const FitResult& fit, const ClusteredDataset& data,
                                       std::mt19937_64& rng) {
  const std::size_t m = data.m();
  BootstrapSample s;
  s.u_star.resize(m);
  s.y_star.resize(static_cast<Eigen::Index>(data.total_n()));
  const double sd_u = std::sqrt(fit.delta_hat.sigma_u2);
  const double sd_e = std::sqrt(fit.delta_hat.sigma_e2);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t j = 0; j < m; ++j) {
    const auto q = data.cluster(j).q();
    s.u_star[j].resize(q);
    for (Eigen::Index r = 0; r < q; ++r) s.u_star[j](r) = sd_u * gauss(rng);
  }
  const auto n = static_cast<Eigen::Index>(data.total_n());
  Vector e_star(n);
  for (Eigen::Index i = 0; i < n; ++i) e_star(i) = sd_e * gauss(rng);
  for (std::size_t j = 0; j < m; ++j) {
    const auto& c = data.cluster(j);
    const auto off = static_cast<Eigen::Index>(data.offset(j));
    s.y_star.segment(off, c.n()) =
        c.X * fit.beta_hat + c.Z * s.u_star[j] + e_star.segment(off, c.n());
  }
  return s;
}

/// Order statistic acting as the (1-alpha) critical value: index
/// floor((1-alpha) B) + 1 (1-based), capped at B. The tiny nudge keeps exact
/// rational products like 0.95 * 20 from flooring one short.
inline double quantile_order_stat(std::vector<double> values, double alpha) {
  if (values.empty()) throw ValidationError("quantile of empty sample");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("alpha must be in (0, 1)");
  const auto b = static_cast<double>(values.size());
  auto idx = static_cast<std::size_t>(std::floor((1.0 - alpha) * b + 1e-9)) + 1;
  idx = std::min<std::size_t>(idx, values.size());
  std::sort(values.begin(), values.end());
  return values[idx - 1];
}

inline std::size_t quantile_order_stat_index(std::size_t b, double alpha) {
  const auto idx =
      static_cast<std::size_t>(std::floor((1.0 - alpha) * static_cast<double>(b) + 1e-9)) + 1;
  return std::min(idx, b);
}

inline double quantile_order_stat(const Vector& values, double alpha) {
  return quantile_order_stat(std::vector<double>(values.data(), values.data() + values.size()),
                             alpha);
}

/// Inner-level records of a double bootstrap: one (B_eff x m) matrix pair per
/// inner index c, aligned with the outer distribution's rows.
struct DoubleBootstrapRecords {
  std::vector<Matrix> theta_star;      // theta**
  std::vector<Matrix> theta_hat_star;  // theta_hat**
  bool empty() const { return theta_star.empty(); }
};

/// Replicate store of the bootstrap: per-replicate parameter estimates and
/// per-cluster theta records (column j holds cluster j across replicates),
/// plus the studentized statistics for the configured sigma choice.
struct BootstrapDistribution {
  int b_requested = 0;
  int failed_count = 0;
  double alpha = 0.05;
  Scheme scheme = Scheme::semiparametric;
  SigmaChoice sigma_choice = SigmaChoice::g1;
  std::uint64_t seed = 0;

  std::vector<std::int32_t> replicate_index;  // original replicate ids of stored rows

  Matrix delta_star;        // B_eff x 2  (sigma_e2*, sigma_u2*)
  Matrix beta_star;         // B_eff x (p+1)
  Matrix theta_star;        // B_eff x m
  Matrix theta_tilde_star;  // B_eff x m
  Matrix theta_hat_star;    // B_eff x m
  Matrix g1_star;           // B_eff x m, evaluated at delta_hat*
  Matrix g2_star;           // B_eff x m, evaluated at delta_hat*
  Matrix mse_l_star;        // B_eff x m when recorded, else 0 x 0

  Matrix sigma_star;  // B_eff x m, denominators used in t*
  Matrix t_star;      // B_eff x m
  Vector m_star;      // B_eff

  Vector sigma_hat;  // per-cluster reference denominator (floored if needed)
  Vector mse_raw;    // per-cluster raw MSE estimate for the configured choice
  bool negative_mse_flag = false;

  int rows() const { return static_cast<int>(theta_hat_star.rows()); }
};

/// t*/M* statistics of a replicate store under a given sigma choice.
struct StudentizedStatistics {
  Vector sigma_hat;
  Vector mse_raw;
  Matrix sigma_star;
  Matrix t_star;
  Vector m_star;
  bool negative_mse = false;
};

namespace detail {

/// Builds t*, M* and the reference denominators for `choice` from stored
/// replicate records. The analytic choices (g1, mse_l) studentize each
/// replicate at its own delta_hat*; the bootstrap-MSE choices use the final
/// estimate computed from the whole replicate store as a fixed denominator.
inline StudentizedStatistics studentize(const BootstrapDistribution& rec, SigmaChoice choice,
                                        const Vector& g1_hat, const Vector& g2_hat,
                                        const Vector& mse_l_hat,
                                        const DoubleBootstrapRecords* inner,
                                        bool at_original_delta) {
  const Eigen::Index b_eff = rec.theta_hat_star.rows();
  const Eigen::Index m = rec.theta_hat_star.cols();
  StudentizedStatistics out;

  auto positive = [](double v) { return std::max(v, 1e-300); };

  switch (choice) {
    case SigmaChoice::g1:
      out.mse_raw = g1_hat;
      out.sigma_star = at_original_delta
                           ? Matrix(g1_hat.transpose().cwiseMax(1e-300).cwiseSqrt().replicate(
                                 b_eff, 1))
                           : Matrix(rec.g1_star.cwiseMax(1e-300).cwiseSqrt());
      break;
    case SigmaChoice::mse_l: {
      if (rec.mse_l_star.size() == 0 && !at_original_delta) {
        throw ValidationError("mse_l replicate values were not recorded");
      }
      out.mse_raw = mse_l_hat;
      out.sigma_star = at_original_delta
                           ? Matrix(mse_l_hat.transpose().cwiseMax(1e-300).cwiseSqrt().replicate(
                                 b_eff, 1))
                           : Matrix(rec.mse_l_star.cwiseMax(1e-300).cwiseSqrt());
      break;
    }
    case SigmaChoice::mse_b1:
    case SigmaChoice::mse_3t:
    case SigmaChoice::mse_spa:
    case SigmaChoice::mse_bc: {
      bool neg = false;
      if (choice == SigmaChoice::mse_b1) {
        out.mse_raw = mse_b1(rec);
      } else if (choice == SigmaChoice::mse_3t) {
        out.mse_raw = mse_3t(rec);
      } else if (choice == SigmaChoice::mse_spa) {
        out.mse_raw = mse_spa(rec, g1_hat, g2_hat, &neg);
      } else {
        if (!inner || inner->empty()) {
          throw ValidationError("mse_bc requires inner (double-bootstrap) replicates");
        }
        out.mse_raw = mse_bc(rec, *inner, &neg);
      }
      out.negative_mse = neg;
      // Floor at g1(delta_hat) where the corrected estimate went non-positive.
      Vector denom = out.mse_raw;
      for (Eigen::Index j = 0; j < m; ++j) {
        if (!(denom(j) > 0.0)) denom(j) = positive(g1_hat(j));
        if ((choice == SigmaChoice::mse_spa || choice == SigmaChoice::mse_bc) &&
            denom(j) < g1_hat(j)) {
          denom(j) = positive(g1_hat(j));
        }
      }
      Vector sigma_fixed = denom.cwiseMax(1e-300).cwiseSqrt();
      out.sigma_star = sigma_fixed.transpose().replicate(b_eff, 1);
      out.sigma_hat = sigma_fixed;
      break;
    }
  }

  if (out.sigma_hat.size() == 0) {
    // Analytic choices: the reference denominator is the estimate at delta_hat.
    out.sigma_hat = out.mse_raw.cwiseMax(1e-300).cwiseSqrt();
  }
  out.t_star = (rec.theta_hat_star - rec.theta_star).cwiseQuotient(out.sigma_star);
  out.m_star = out.t_star.cwiseAbs().rowwise().maxCoeff();
  return out;
}

struct ReplicateSlot {
  bool ok = false;
  Eigen::Vector2d delta;
  Vector beta;
  Vector theta_s, theta_t, theta_h, g1s, g2s, msels;
  std::vector<Vector> inner_theta_ss, inner_theta_hat_ss;  // per inner index
};

}  // namespace detail

namespace detail {

/// Shared engine: resample, regenerate, refit, studentize. Replicates whose
/// refit fails are redrawn up to 10 times, then dropped; more than 5% drops is
/// a hard error. With c_inner >= 1 each replicate also rebuilds pools from its
/// own fit and draws nested samples (the double bootstrap).
inline std::pair<BootstrapDistribution, DoubleBootstrapRecords> run_bootstrap_impl(
    const ClusteredDataset& data, const FitResult& fit, const MixedEffectTarget& target,
    const BootstrapConfig& config) {
  config.check();
  target.check_against(data);
  const std::size_t m = data.m();
  const auto m_idx = static_cast<Eigen::Index>(m);
  const int b_total = config.b_outer;
  const bool want_inner = config.c_inner >= 1;
  const bool record_mse_l = config.record_mse_l || config.sigma_choice == SigmaChoice::mse_l;

  SuffStats base_ss(data);
  const Vector g1_hat = detail::g1_from_stats(base_ss, fit.delta_hat, target);
  const Vector g2_hat =
      detail::g2_from_stats(base_ss, fit.delta_hat, target, fit.gls_information);
  Vector mse_l_hat;
  if (record_mse_l) {
    const auto info = detail::fisher_from_stats(base_ss, fit.delta_hat);
    bool warn = false;
    mse_l_hat = g1_hat + g2_hat +
                2.0 * detail::g3_from_stats(base_ss, fit.delta_hat, target, info, &warn);
  }

  ResidualPools pools;
  if (config.scheme == Scheme::semiparametric) {
    pools = scale_center_residuals(data, fit, config.scaling);
  }

  std::vector<detail::ReplicateSlot> slots(static_cast<std::size_t>(b_total));
  const unsigned workers = std::max(1u, config.workers);
  // Worker-private sufficient statistics: only the response part is rewritten
  // per replicate, the design cross products are shared copies.
  std::vector<SuffStats> scratch(
      std::min<std::size_t>(workers, static_cast<std::size_t>(b_total)), base_ss);

  parallel_for_strided(
      static_cast<std::size_t>(b_total), workers, [&](unsigned w, std::size_t b) {
        auto& slot = slots[b];
        SuffStats& local_ss = scratch[w];
        for (int attempt = 0; attempt < 10 && !slot.ok; ++attempt) {
          auto rng = make_stream(config.seed, rng_tag::kBootstrapOuter,
                                 static_cast<std::uint64_t>(b),
                                 static_cast<std::uint64_t>(attempt));
          BootstrapSample sample = config.scheme == Scheme::semiparametric
                                       ? draw_semiparametric(pools, fit, data, rng)
                                       : draw_parametric(fit, data, rng);
          local_ss.update_response(sample.y_star);
          FitResult refit;
          try {
            refit = detail::fit_from_stats(local_ss, config.refit, &fit.delta_hat);
          } catch (const NumericalError&) {
            continue;
          }
          // GLS/BLUP on the bootstrap sample at the original delta_hat.
          auto tilde = detail::evaluate_gls(local_ss, fit.delta_hat, config.refit.likelihood);
          if (!tilde.ok) continue;
          const auto u_tilde = detail::blup_from_stats(local_ss, fit.delta_hat, tilde.beta);

          slot.delta = Eigen::Vector2d(refit.delta_hat.sigma_e2, refit.delta_hat.sigma_u2);
          slot.beta = refit.beta_hat;
          slot.theta_s.resize(m_idx);
          slot.theta_t.resize(m_idx);
          slot.theta_h.resize(m_idx);
          for (std::size_t j = 0; j < m; ++j) {
            const auto ji = static_cast<Eigen::Index>(j);
            slot.theta_s(ji) = target.k[j].dot(fit.beta_hat) + target.l[j].dot(sample.u_star[j]);
            slot.theta_t(ji) = target.k[j].dot(tilde.beta) + target.l[j].dot(u_tilde[j]);
            slot.theta_h(ji) =
                target.k[j].dot(refit.beta_hat) + target.l[j].dot(refit.u_hat[j]);
          }
          slot.g1s = detail::g1_from_stats(local_ss, refit.delta_hat, target);
          slot.g2s = detail::g2_from_stats(local_ss, refit.delta_hat, target,
                                           refit.gls_information);
          if (record_mse_l) {
            const auto info_star = detail::fisher_from_stats(local_ss, refit.delta_hat);
            bool warn = false;
            slot.msels =
                slot.g1s + slot.g2s +
                2.0 * detail::g3_from_stats(local_ss, refit.delta_hat, target, info_star, &warn);
          }

          if (want_inner) {
            // Nested level: pools rebuilt from the bootstrap fit.
            ResidualPools star_pools;
            ClusteredDataset star_data = data.with_response(sample.y_star);
            if (config.scheme == Scheme::semiparametric) {
              star_pools = scale_center_residuals(star_data, refit, config.scaling);
            }
            slot.inner_theta_ss.assign(static_cast<std::size_t>(config.c_inner), Vector());
            slot.inner_theta_hat_ss.assign(static_cast<std::size_t>(config.c_inner), Vector());
            bool inner_ok = true;
            SuffStats inner_ss = base_ss;
            for (int c = 0; c < config.c_inner && inner_ok; ++c) {
              bool done = false;
              for (int ia = 0; ia < 10 && !done; ++ia) {
                auto rng_in = make_stream(config.seed, rng_tag::kBootstrapInner,
                                          static_cast<std::uint64_t>(b),
                                          static_cast<std::uint64_t>(c) * 16 +
                                              static_cast<std::uint64_t>(ia));
                BootstrapSample inner_sample =
                    config.scheme == Scheme::semiparametric
                        ? draw_semiparametric(star_pools, refit, star_data, rng_in)
                        : draw_parametric(refit, star_data, rng_in);
                inner_ss.update_response(inner_sample.y_star);
                FitResult inner_fit;
                try {
                  inner_fit = detail::fit_from_stats(inner_ss, config.refit, &refit.delta_hat);
                } catch (const NumericalError&) {
                  continue;
                }
                auto& ts = slot.inner_theta_ss[static_cast<std::size_t>(c)];
                auto& th = slot.inner_theta_hat_ss[static_cast<std::size_t>(c)];
                ts.resize(m_idx);
                th.resize(m_idx);
                for (std::size_t j = 0; j < m; ++j) {
                  const auto ji = static_cast<Eigen::Index>(j);
                  ts(ji) = target.k[j].dot(refit.beta_hat) +
                           target.l[j].dot(inner_sample.u_star[j]);
                  th(ji) = target.k[j].dot(inner_fit.beta_hat) +
                           target.l[j].dot(inner_fit.u_hat[j]);
                }
                done = true;
              }
              if (!done) inner_ok = false;
            }
            if (!inner_ok) continue;  // redraw the whole outer replicate
          }
          slot.ok = true;
        }
      });

  int failed = 0;
  for (const auto& s : slots) {
    if (!s.ok) ++failed;
  }
  if (static_cast<double>(failed) > 0.05 * static_cast<double>(b_total)) {
    throw NumericalError("bootstrap failure budget exceeded: " + std::to_string(failed) +
                         " of " + std::to_string(b_total) + " replicates failed to refit");
  }
  const int b_eff = b_total - failed;
  if (b_eff == 0) throw NumericalError("all bootstrap replicates failed");

  BootstrapDistribution dist;
  dist.b_requested = b_total;
  dist.failed_count = failed;
  dist.alpha = config.alpha;
  dist.scheme = config.scheme;
  dist.sigma_choice = config.sigma_choice;
  dist.seed = config.seed;
  const Eigen::Index p1 = data.fixed_dim();
  dist.replicate_index.reserve(static_cast<std::size_t>(b_eff));
  dist.delta_star.resize(b_eff, 2);
  dist.beta_star.resize(b_eff, p1);
  dist.theta_star.resize(b_eff, m_idx);
  dist.theta_tilde_star.resize(b_eff, m_idx);
  dist.theta_hat_star.resize(b_eff, m_idx);
  dist.g1_star.resize(b_eff, m_idx);
  dist.g2_star.resize(b_eff, m_idx);
  if (record_mse_l) dist.mse_l_star.resize(b_eff, m_idx);

  DoubleBootstrapRecords inner;
  const bool have_inner = want_inner;
  if (have_inner) {
    inner.theta_star.assign(static_cast<std::size_t>(config.c_inner),
                            Matrix(b_eff, m_idx));
    inner.theta_hat_star.assign(static_cast<std::size_t>(config.c_inner),
                                Matrix(b_eff, m_idx));
  }

  Eigen::Index row = 0;
  for (std::size_t b = 0; b < slots.size(); ++b) {
    const auto& s = slots[b];
    if (!s.ok) continue;
    dist.replicate_index.push_back(static_cast<std::int32_t>(b));
    dist.delta_star.row(row) = s.delta.transpose();
    dist.beta_star.row(row) = s.beta.transpose();
    dist.theta_star.row(row) = s.theta_s.transpose();
    dist.theta_tilde_star.row(row) = s.theta_t.transpose();
    dist.theta_hat_star.row(row) = s.theta_h.transpose();
    dist.g1_star.row(row) = s.g1s.transpose();
    dist.g2_star.row(row) = s.g2s.transpose();
    if (record_mse_l) dist.mse_l_star.row(row) = s.msels.transpose();
    if (have_inner) {
      for (int c = 0; c < config.c_inner; ++c) {
        inner.theta_star[static_cast<std::size_t>(c)].row(row) =
            s.inner_theta_ss[static_cast<std::size_t>(c)].transpose();
        inner.theta_hat_star[static_cast<std::size_t>(c)].row(row) =
            s.inner_theta_hat_ss[static_cast<std::size_t>(c)].transpose();
      }
    }
    ++row;
  }

  auto stats = detail::studentize(dist, config.sigma_choice, g1_hat, g2_hat, mse_l_hat,
                                  have_inner ? &inner : nullptr,
                                  config.studentize_at_original_delta);
  dist.sigma_hat = stats.sigma_hat;
  dist.mse_raw = stats.mse_raw;
  dist.sigma_star = std::move(stats.sigma_star);
  dist.t_star = std::move(stats.t_star);
  dist.m_star = std::move(stats.m_star);
  dist.negative_mse_flag = stats.negative_mse;
  return {std::move(dist), std::move(inner)};
}

}  // namespace detail

/// Single-level bootstrap. For sigma_choice == mse_bc the nested level is run
/// implicitly with config.c_inner inner replicates.
inline BootstrapDistribution run_bootstrap(const ClusteredDataset& data, const FitResult& fit,
                                           const MixedEffectTarget& target,
                                           const BootstrapConfig& config) {
  BootstrapConfig cfg = config;
  if (cfg.sigma_choice == SigmaChoice::mse_bc) {
    if (cfg.c_inner < 1) throw ValidationError("mse_bc requires c_inner >= 1");
  } else {
    cfg.c_inner = 0;
  }
  auto [dist, inner] = detail::run_bootstrap_impl(data, fit, target, cfg);
  (void)inner;
  return std::move(dist);
}

/// Double bootstrap: every outer replicate carries c_inner nested replicates,
/// returned alongside the outer distribution for MSE**_B2-style estimators.
inline std::pair<BootstrapDistribution, DoubleBootstrapRecords> run_double_bootstrap(
    const ClusteredDataset& data, const FitResult& fit, const MixedEffectTarget& target,
    const BootstrapConfig& config) {
  if (config.c_inner < 1) throw ValidationError("double bootstrap requires c_inner >= 1");
  return detail::run_bootstrap_impl(data, fit, target, config);
}

// --- Replicate dump ----------------------------------------------------------

namespace detail {

inline void write_matrix(std::ofstream& os, const Matrix& m) {
  const std::uint64_t rows = static_cast<std::uint64_t>(m.rows());
  const std::uint64_t cols = static_cast<std::uint64_t>(m.cols());
  os.write(reinterpret_cast<const char*>(&rows), sizeof(rows));
  os.write(reinterpret_cast<const char*>(&cols), sizeof(cols));
  os.write(reinterpret_cast<const char*>(m.data()),
           static_cast<std::streamsize>(sizeof(double) * m.size()));
}

inline Matrix read_matrix(std::ifstream& is) {
  std::uint64_t rows = 0, cols = 0;
  is.read(reinterpret_cast<char*>(&rows), sizeof(rows));
  is.read(reinterpret_cast<char*>(&cols), sizeof(cols));
  if (!is || rows > (1u << 30) || cols > (1u << 30)) throw IoError("corrupt replicate dump");
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  is.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(double) * m.size()));
  if (!is) throw IoError("corrupt replicate dump");
  return m;
}

inline constexpr char kDumpMagic[8] = {'L', 'M', 'B', 'D', 'U', 'M', 'P', '1'};

}  // namespace detail

/// Binary columnar dump of a replicate store (plus inner records, if any).
inline void save_distribution(const std::string& path, const BootstrapDistribution& dist,
                              const DoubleBootstrapRecords* inner = nullptr) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os.write(detail::kDumpMagic, sizeof(detail::kDumpMagic));
  const std::uint32_t version = 1;
  const auto b_req = static_cast<std::uint32_t>(dist.b_requested);
  const auto failed = static_cast<std::uint32_t>(dist.failed_count);
  const auto m = static_cast<std::uint32_t>(dist.theta_star.cols());
  const auto scheme = static_cast<std::uint8_t>(dist.scheme);
  const auto choice = static_cast<std::uint8_t>(dist.sigma_choice);
  const std::uint8_t neg = dist.negative_mse_flag ? 1 : 0;
  const std::uint8_t has_inner = inner && !inner->empty() ? 1 : 0;
  os.write(reinterpret_cast<const char*>(&version), sizeof(version));
  os.write(reinterpret_cast<const char*>(&b_req), sizeof(b_req));
  os.write(reinterpret_cast<const char*>(&failed), sizeof(failed));
  os.write(reinterpret_cast<const char*>(&m), sizeof(m));
  os.write(reinterpret_cast<const char*>(&dist.alpha), sizeof(dist.alpha));
  os.write(reinterpret_cast<const char*>(&scheme), sizeof(scheme));
  os.write(reinterpret_cast<const char*>(&choice), sizeof(choice));
  os.write(reinterpret_cast<const char*>(&neg), sizeof(neg));
  os.write(reinterpret_cast<const char*>(&has_inner), sizeof(has_inner));
  os.write(reinterpret_cast<const char*>(&dist.seed), sizeof(dist.seed));
  const auto n_rows = static_cast<std::uint64_t>(dist.replicate_index.size());
  os.write(reinterpret_cast<const char*>(&n_rows), sizeof(n_rows));
  os.write(reinterpret_cast<const char*>(dist.replicate_index.data()),
           static_cast<std::streamsize>(sizeof(std::int32_t) * dist.replicate_index.size()));
  detail::write_matrix(os, dist.delta_star);
  detail::write_matrix(os, dist.beta_star);
  detail::write_matrix(os, dist.theta_star);
  detail::write_matrix(os, dist.theta_tilde_star);
  detail::write_matrix(os, dist.theta_hat_star);
  detail::write_matrix(os, dist.g1_star);
  detail::write_matrix(os, dist.g2_star);
  detail::write_matrix(os, dist.mse_l_star);
  detail::write_matrix(os, dist.sigma_star);
  detail::write_matrix(os, dist.t_star);
  detail::write_matrix(os, Matrix(dist.m_star));
  detail::write_matrix(os, Matrix(dist.sigma_hat));
  detail::write_matrix(os, Matrix(dist.mse_raw));
  if (has_inner) {
    const auto c_inner = static_cast<std::uint32_t>(inner->theta_star.size());
    os.write(reinterpret_cast<const char*>(&c_inner), sizeof(c_inner));
    for (std::size_t c = 0; c < inner->theta_star.size(); ++c) {
      detail::write_matrix(os, inner->theta_star[c]);
      detail::write_matrix(os, inner->theta_hat_star[c]);
    }
  }
  if (!os) throw IoError("failed while writing '" + path + "'");
}

inline std::pair<BootstrapDistribution, DoubleBootstrapRecords> load_distribution(
    const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "'");
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, detail::kDumpMagic, sizeof(magic)) != 0) {
    throw IoError("'" + path + "' is not a replicate dump");
  }
  std::uint32_t version = 0, b_req = 0, failed = 0, m = 0;
  std::uint8_t scheme = 0, choice = 0, neg = 0, has_inner = 0;
  BootstrapDistribution dist;
  is.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (version != 1) throw IoError("unsupported replicate dump version");
  is.read(reinterpret_cast<char*>(&b_req), sizeof(b_req));
  is.read(reinterpret_cast<char*>(&failed), sizeof(failed));
  is.read(reinterpret_cast<char*>(&m), sizeof(m));
  is.read(reinterpret_cast<char*>(&dist.alpha), sizeof(dist.alpha));
  is.read(reinterpret_cast<char*>(&scheme), sizeof(scheme));
  is.read(reinterpret_cast<char*>(&choice), sizeof(choice));
  is.read(reinterpret_cast<char*>(&neg), sizeof(neg));
  is.read(reinterpret_cast<char*>(&has_inner), sizeof(has_inner));
  is.read(reinterpret_cast<char*>(&dist.seed), sizeof(dist.seed));
  dist.b_requested = static_cast<int>(b_req);
  dist.failed_count = static_cast<int>(failed);
  dist.scheme = static_cast<Scheme>(scheme);
  dist.sigma_choice = static_cast<SigmaChoice>(choice);
  dist.negative_mse_flag = neg != 0;
  std::uint64_t n_rows = 0;
  is.read(reinterpret_cast<char*>(&n_rows), sizeof(n_rows));
  if (!is || n_rows > (1u << 30)) throw IoError("corrupt replicate dump");
  dist.replicate_index.resize(n_rows);
  is.read(reinterpret_cast<char*>(dist.replicate_index.data()),
          static_cast<std::streamsize>(sizeof(std::int32_t) * n_rows));
  dist.delta_star = detail::read_matrix(is);
  dist.beta_star = detail::read_matrix(is);
  dist.theta_star = detail::read_matrix(is);
  dist.theta_tilde_star = detail::read_matrix(is);
  dist.theta_hat_star = detail::read_matrix(is);
  dist.g1_star = detail::read_matrix(is);
  dist.g2_star = detail::read_matrix(is);
  dist.mse_l_star = detail::read_matrix(is);
  dist.sigma_star = detail::read_matrix(is);
  dist.t_star = detail::read_matrix(is);
  dist.m_star = detail::read_matrix(is);
  dist.sigma_hat = detail::read_matrix(is);
  dist.mse_raw = detail::read_matrix(is);
  DoubleBootstrapRecords inner;
  if (has_inner) {
    std::uint32_t c_inner = 0;
    is.read(reinterpret_cast<char*>(&c_inner), sizeof(c_inner));
    if (!is || c_inner > (1u << 20)) throw IoError("corrupt replicate dump");
    inner.theta_star.resize(c_inner);
    inner.theta_hat_star.resize(c_inner);
    for (std::uint32_t c = 0; c < c_inner; ++c) {
      inner.theta_star[c] = detail::read_matrix(is);
      inner.theta_hat_star[c] = detail::read_matrix(is);
    }
  }
  return {std::move(dist), std::move(inner)};
}

}  // namespace lmmboot
