#pragma once

#include <cmath>
#include <vector>

#include "lmmboot/estimation.hpp"
#include "lmmboot/types.hpp"

namespace lmmboot {

/// Expected REML information for delta = (sigma_e2, sigma_u2) and its inverse
/// V_A(delta), the asymptotic covariance of delta_hat.
struct FisherInformation {
  Eigen::Matrix2d info = Eigen::Matrix2d::Zero();
  Eigen::Matrix2d v_a = Eigen::Matrix2d::Zero();
  bool singular = false;
};

namespace detail {

/// GLS information sum_j X_j' V_j^-1 X_j from design cross products only.
inline Matrix gls_information_from_stats(const SuffStats& ss, const VarianceParams& delta) {
  const Eigen::Index p1 = ss.fixed_dim();
  Matrix w = Matrix::Zero(p1, p1);
  for (const auto& c : ss.clusters()) {
    Matrix b = delta.sigma_u2 * c.czz;
    b.diagonal().array() += delta.sigma_e2;
    Eigen::LLT<Matrix> llt(b);
    w.noalias() +=
        (c.cxx - delta.sigma_u2 * c.czx.transpose() * llt.solve(c.czx)) / delta.sigma_e2;
  }
  return w;
}

/// g1_j = l' (G - G Z' V^-1 Z G) l, which reduces to
/// sigma_u2 * sigma_e2 * l' B^-1 l for the two-component model.
inline Vector g1_from_stats(const SuffStats& ss, const VarianceParams& delta,
                            const MixedEffectTarget& target) {
  const auto m = static_cast<Eigen::Index>(ss.clusters().size());
  Vector out(m);
  for (Eigen::Index j = 0; j < m; ++j) {
    const auto& c = ss.clusters()[static_cast<std::size_t>(j)];
    const auto& l = target.l[static_cast<std::size_t>(j)];
    if (c.q == 1) {
      const double b = delta.sigma_e2 + delta.sigma_u2 * c.czz(0, 0);
      out(j) = delta.sigma_u2 * delta.sigma_e2 * l(0) * l(0) / b;
    } else {
      Matrix b = delta.sigma_u2 * c.czz;
      b.diagonal().array() += delta.sigma_e2;
      out(j) = delta.sigma_u2 * delta.sigma_e2 * l.dot(b.llt().solve(l));
    }
  }
  return out;
}

/// g2_j = b_j' (sum X'V^-1X)^-1 b_j with b_j = k_j - X_j' o_j and
/// o_j = sigma_u2 Z_j B_j^-1 l_j.
inline Vector g2_from_stats(const SuffStats& ss, const VarianceParams& delta,
                            const MixedEffectTarget& target, const Matrix& gls_information) {
  const auto m = static_cast<Eigen::Index>(ss.clusters().size());
  Eigen::LDLT<Matrix> wldlt(gls_information);
  if (wldlt.info() != Eigen::Success || (wldlt.vectorD().array() <= 0.0).any()) {
    throw ValidationError("rank deficient: singular GLS information matrix");
  }
  Vector out(m);
  for (Eigen::Index j = 0; j < m; ++j) {
    const auto& c = ss.clusters()[static_cast<std::size_t>(j)];
    const auto& k = target.k[static_cast<std::size_t>(j)];
    const auto& l = target.l[static_cast<std::size_t>(j)];
    Vector bj;
    if (c.q == 1) {
      const double b = delta.sigma_e2 + delta.sigma_u2 * c.czz(0, 0);
      bj = k - (delta.sigma_u2 * l(0) / b) * c.czx.row(0).transpose();
    } else {
      Matrix b = delta.sigma_u2 * c.czz;
      b.diagonal().array() += delta.sigma_e2;
      bj = k - delta.sigma_u2 * c.czx.transpose() * b.llt().solve(l);
    }
    out(j) = bj.dot(wldlt.solve(bj));
  }
  return out;
}

/// g3_j = tr{ (d o_j'/d delta) V_j (d o_j'/d delta)' V_A }. For the
/// two-component model d o_j'/d sigma_e2 = -sigma_u2 w_j' and
/// d o_j'/d sigma_u2 = sigma_e2 w_j' with w_j = Z_j B_j^-2 l_j, so the trace
/// collapses to (w'Vw) * (c' V_A c) with c = (-sigma_u2, sigma_e2)'.
inline Vector g3_from_stats(const SuffStats& ss, const VarianceParams& delta,
                            const MixedEffectTarget& target, const FisherInformation& info,
                            bool* warning = nullptr) {
  const auto m = static_cast<Eigen::Index>(ss.clusters().size());
  if (info.singular) {
    if (warning) *warning = true;
    return Vector::Zero(m);
  }
  const double se2 = delta.sigma_e2;
  const double su2 = delta.sigma_u2;
  const Eigen::Vector2d c_vec(-su2, se2);
  const double cva = c_vec.dot(info.v_a * c_vec);
  Vector out(m);
  for (Eigen::Index j = 0; j < m; ++j) {
    const auto& c = ss.clusters()[static_cast<std::size_t>(j)];
    const auto& l = target.l[static_cast<std::size_t>(j)];
    Matrix b = su2 * c.czz;
    b.diagonal().array() += se2;
    Eigen::LLT<Matrix> llt(b);
    const Vector u1 = llt.solve(llt.solve(l));  // B^-2 l
    const Vector czz_u1 = c.czz * u1;
    const double wvw = se2 * u1.dot(czz_u1) + su2 * czz_u1.squaredNorm();
    out(j) = wvw * cva;
  }
  return out;
}

inline FisherInformation fisher_from_stats(const SuffStats& ss, const VarianceParams& delta) {
  const auto& data = ss.data();
  const Eigen::Index p1 = ss.fixed_dim();
  const double se2 = delta.sigma_e2;
  const double su2 = delta.sigma_u2;

  double t_ii = 0.0, t_iz = 0.0, t_zz = 0.0;
  Matrix s_i = Matrix::Zero(p1, p1);
  Matrix s_z = Matrix::Zero(p1, p1);
  Matrix n_ii = Matrix::Zero(p1, p1);
  Matrix n_iz = Matrix::Zero(p1, p1);
  Matrix n_zz = Matrix::Zero(p1, p1);
  Matrix w = Matrix::Zero(p1, p1);

  for (std::size_t j = 0; j < data.m(); ++j) {
    const auto& c = data.cluster(j);
    Matrix b = su2 * (c.Z.transpose() * c.Z);
    b.diagonal().array() += se2;
    Matrix vi = -su2 * (c.Z * b.llt().solve(c.Z.transpose()));
    vi.diagonal().array() += 1.0;
    vi /= se2;

    const Matrix vix = vi * c.X;
    const Matrix viz = vi * c.Z;
    const Matrix ztvix = c.Z.transpose() * vix;
    const Matrix ztviz = c.Z.transpose() * viz;
    const Matrix v2x = vi * vix;

    w.noalias() += c.X.transpose() * vix;
    t_ii += vi.squaredNorm();
    t_iz += viz.squaredNorm();
    t_zz += ztviz.squaredNorm();
    s_i.noalias() += vix.transpose() * vix;
    s_z.noalias() += ztvix.transpose() * ztvix;
    n_ii.noalias() += vix.transpose() * v2x;
    n_iz.noalias() += (c.Z.transpose() * v2x).transpose() * ztvix;
    n_zz.noalias() += ztvix.transpose() * ztviz * ztvix;
  }

  Eigen::LDLT<Matrix> wldlt(w);
  const Matrix winv_si = wldlt.solve(s_i);
  const Matrix winv_sz = wldlt.solve(s_z);

  FisherInformation out;
  out.info(0, 0) = 0.5 * (t_ii - 2.0 * wldlt.solve(n_ii).trace() + (winv_si * winv_si).trace());
  out.info(1, 1) = 0.5 * (t_zz - 2.0 * wldlt.solve(n_zz).trace() + (winv_sz * winv_sz).trace());
  out.info(0, 1) = 0.5 * (t_iz - wldlt.solve(n_iz).trace() -
                          wldlt.solve(n_iz.transpose()).trace() + (winv_si * winv_sz).trace());
  out.info(1, 0) = out.info(0, 1);

  const double det = out.info.determinant();
  const double scale = std::abs(out.info(0, 0) * out.info(1, 1));
  if (!(det > 1e-12 * std::max(scale, 1e-300))) {
    out.singular = true;
  } else {
    out.v_a = out.info.inverse();
  }
  return out;
}

}  // namespace detail

inline Vector g1(const ClusteredDataset& data, const VarianceParams& delta,
                 const MixedEffectTarget& target) {
  target.check_against(data);
  SuffStats ss(data);
  return detail::g1_from_stats(ss, delta, target);
}

inline Vector g2(const ClusteredDataset& data, const VarianceParams& delta,
                 const MixedEffectTarget& target) {
  target.check_against(data);
  SuffStats ss(data);
  return detail::g2_from_stats(ss, delta, target,
                               detail::gls_information_from_stats(ss, delta));
}

inline FisherInformation fisher_information_reml(const ClusteredDataset& data,
                                                 const VarianceParams& delta) {
  if (!delta.valid()) throw ValidationError("invalid variance parameters");
  SuffStats ss(data);
  return detail::fisher_from_stats(ss, delta);
}

inline Vector g3(const ClusteredDataset& data, const VarianceParams& delta,
                 const MixedEffectTarget& target, const FisherInformation& info,
                 bool* warning = nullptr) {
  target.check_against(data);
  SuffStats ss(data);
  return detail::g3_from_stats(ss, delta, target, info, warning);
}

/// Analytic MSE pieces: mse_l = g1 + g2 + 2 g3.
struct MseComponents {
  Vector g1;
  Vector g2;
  Vector g3;
  Vector mse_l;
  bool g3_warning = false;
};

inline MseComponents mse_components(const ClusteredDataset& data, const VarianceParams& delta,
                                    const MixedEffectTarget& target) {
  target.check_against(data);
  SuffStats ss(data);
  MseComponents out;
  out.g1 = detail::g1_from_stats(ss, delta, target);
  out.g2 = detail::g2_from_stats(ss, delta, target,
                                 detail::gls_information_from_stats(ss, delta));
  const auto info = detail::fisher_from_stats(ss, delta);
  out.g3 = detail::g3_from_stats(ss, delta, target, info, &out.g3_warning);
  out.mse_l = out.g1 + out.g2 + 2.0 * out.g3;
  return out;
}

// --- Bootstrap MSE estimators -----------------------------------------------
//
// These operate on replicate records (B_eff x m matrices of theta values per
// cluster); any store with the named fields works, in particular
// BootstrapDistribution.

/// Plain bootstrap MSE: mean over replicates of (theta_hat* - theta*)^2.
template <typename Dist>
Vector mse_b1(const Dist& boot) {
  if (boot.theta_hat_star.rows() < 2) throw ValidationError("mse_b1 needs at least 2 replicates");
  return (boot.theta_hat_star - boot.theta_star)
      .array()
      .square()
      .colwise()
      .mean()
      .matrix()
      .transpose();
}

/// Three-term bootstrap MSE: each term of the decomposition estimated
/// separately, then summed.
template <typename Dist>
Vector mse_3t(const Dist& boot) {
  if (boot.theta_hat_star.rows() < 2) throw ValidationError("mse_3t needs at least 2 replicates");
  const Eigen::ArrayXXd d1 = (boot.theta_tilde_star - boot.theta_star).array();
  const Eigen::ArrayXXd d2 = (boot.theta_hat_star - boot.theta_tilde_star).array();
  const Vector t1 = d1.square().colwise().mean().matrix().transpose();
  const Vector t2 = d2.square().colwise().mean().matrix().transpose();
  const Vector t3 = (d1 * d2).colwise().mean().matrix().transpose();
  return t1 + t2 + 2.0 * t3;
}

/// Bias-reduced estimator: analytic g1 + g2 doubled, the bootstrap expectation
/// of g1 + g2 subtracted, and the intractable terms estimated by bootstrap.
/// Can be negative in finite samples; reported as-is with `negative_flag` set.
template <typename Dist>
Vector mse_spa(const Dist& boot, const Vector& g1_hat, const Vector& g2_hat,
               bool* negative_flag = nullptr) {
  if (boot.theta_hat_star.rows() < 2) throw ValidationError("mse_spa needs at least 2 replicates");
  const Eigen::ArrayXXd d1 = (boot.theta_tilde_star - boot.theta_star).array();
  const Eigen::ArrayXXd d2 = (boot.theta_hat_star - boot.theta_tilde_star).array();
  const Vector boot_g = (boot.g1_star + boot.g2_star).colwise().mean().transpose();
  const Vector t2 = d2.square().colwise().mean().matrix().transpose();
  const Vector t3 = (d1 * d2).colwise().mean().matrix().transpose();
  Vector out = 2.0 * (g1_hat + g2_hat) - boot_g + t2 + 2.0 * t3;
  if (negative_flag) *negative_flag = (out.array() < 0.0).any();
  return out;
}

/// Double-bootstrap bias correction: 2 MSE*_B1 - MSE**_B2, where MSE**_B2
/// averages (theta_hat** - theta**)^2 over all outer x inner replicates.
template <typename Dist, typename InnerRecords>
Vector mse_bc(const Dist& outer, const InnerRecords& inner, bool* negative_flag = nullptr) {
  if (inner.theta_star.empty()) throw ValidationError("mse_bc needs inner replicates");
  const Eigen::Index m = outer.theta_star.cols();
  Vector b2 = Vector::Zero(m);
  double count = 0.0;
  for (std::size_t c = 0; c < inner.theta_star.size(); ++c) {
    b2 += (inner.theta_hat_star[c] - inner.theta_star[c])
              .array()
              .square()
              .colwise()
              .sum()
              .matrix()
              .transpose();
    count += static_cast<double>(inner.theta_star[c].rows());
  }
  b2 /= count;
  Vector out = 2.0 * mse_b1(outer) - b2;
  if (negative_flag) *negative_flag = (out.array() < 0.0).any();
  return out;
}

}  // namespace lmmboot
