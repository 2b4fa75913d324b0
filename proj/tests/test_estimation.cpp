#include <lmmboot/estimation.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracle_helpers.hpp"

using namespace lmmboot;

namespace {

ClusteredDataset one_cluster_intercept(std::initializer_list<double> ys) {
  std::vector<ClusterBlock> blocks(1);
  blocks[0].cluster_id = "a";
  blocks[0].y = Eigen::Map<const Vector>(std::data(ys), static_cast<Eigen::Index>(ys.size()));
  blocks[0].X = Matrix::Ones(static_cast<Eigen::Index>(ys.size()), 1);
  blocks[0].Z = Matrix::Ones(static_cast<Eigen::Index>(ys.size()), 1);
  return ClusteredDataset(std::move(blocks));
}

TEST(GlsBeta, IdentityCovarianceIsOls) {
  const auto data = one_cluster_intercept({2.0, 4.0});
  const auto [beta, info] = gls_beta(data, VarianceParams{1.0, 0.0});
  EXPECT_NEAR(beta(0), 3.0, 1e-12);
  EXPECT_NEAR(info(0, 0), 2.0, 1e-12);
}

TEST(GlsBeta, BalancedDesignGivesGrandMeanForAnyDelta) {
  const auto data = oracle::balanced_oneway(7, 6, 4, 2.5, 1.0, 0.7);
  double grand = 0.0;
  for (std::size_t j = 0; j < data.m(); ++j) grand += data.cluster(j).y.sum();
  grand /= static_cast<double>(data.total_n());
  for (const auto& delta :
       {VarianceParams{1.0, 0.0}, VarianceParams{0.3, 2.0}, VarianceParams{5.0, 0.01}}) {
    const auto [beta, info] = gls_beta(data, delta);
    EXPECT_NEAR(beta(0), grand, 1e-10);
  }
}

TEST(GlsBeta, MatchesDenseOracle) {
  for (std::uint64_t seed = 1; seed <= 12; ++seed) {
    oracle::InstanceOptions opt;
    opt.q = seed % 3 == 0 ? 2 : 1;
    opt.p1 = seed % 2 == 0 ? 2 : 3;
    const auto data = oracle::random_instance(seed, opt);
    auto rng = make_stream(seed, 0x676c73ULL);
    std::uniform_real_distribution<double> unif(0.2, 2.5);
    const VarianceParams delta{unif(rng), unif(rng)};
    const auto [beta, info] = gls_beta(data, delta);
    const auto dense = oracle::dense_gls(data, delta);
    EXPECT_LT((beta - dense.beta).norm() / dense.beta.norm(), 1e-10) << "seed " << seed;
    EXPECT_LT((info - dense.info).norm() / dense.info.norm(), 1e-10) << "seed " << seed;
  }
}

TEST(GlsBeta, RankDeficientInformationThrows) {
  std::vector<ClusterBlock> blocks(2);
  for (int j = 0; j < 2; ++j) {
    blocks[j].cluster_id = "c" + std::to_string(j);
    blocks[j].y = (Vector(2) << 1.0, 2.0).finished();
    blocks[j].X.resize(2, 2);
    blocks[j].X.setOnes();  // duplicated columns
    blocks[j].Z = Matrix::Ones(2, 1);
  }
  const ClusteredDataset data(std::move(blocks));
  EXPECT_THROW(gls_beta(data, VarianceParams{1.0, 0.5}), ValidationError);
}

TEST(BlupU, ZeroVarianceMeansZeroPrediction) {
  const auto data = oracle::balanced_oneway(3, 4, 3, 0.0, 1.0, 0.5);
  const auto u = blup_u(data, VarianceParams{1.3, 0.0}, Vector::Zero(1));
  for (const auto& uj : u) EXPECT_DOUBLE_EQ(uj(0), 0.0);
}

// Balanced shrinkage: u_j = n_j sigma_u2 / (sigma_e2 + n_j sigma_u2) * rbar.
TEST(BlupU, ClosedFormShrinkage) {
  const auto data = one_cluster_intercept({1.0, 1.0});
  const auto u = blup_u(data, VarianceParams{1.0, 1.0}, Vector::Zero(1));
  EXPECT_NEAR(u[0](0), 2.0 / 3.0, 1e-12);
}

TEST(BlupU, MatchesDenseOracle) {
  for (std::uint64_t seed = 21; seed <= 30; ++seed) {
    oracle::InstanceOptions opt;
    opt.q = seed % 2 == 0 ? 2 : 1;
    const auto data = oracle::random_instance(seed, opt);
    auto rng = make_stream(seed, 0x626c7570ULL);
    std::uniform_real_distribution<double> unif(0.2, 2.5);
    const VarianceParams delta{unif(rng), unif(rng)};
    const auto [beta, info] = gls_beta(data, delta);
    const auto u = blup_u(data, delta, beta);
    const auto dense = oracle::dense_blup(data, delta, beta);
    for (std::size_t j = 0; j < data.m(); ++j) {
      EXPECT_LT((u[j] - dense[j]).norm(), 1e-10 * (1.0 + dense[j].norm())) << "seed " << seed;
    }
  }
}

TEST(BlupU, ShrinkageMonotoneInSigmaU2) {
  const auto data = one_cluster_intercept({1.5, 1.5, 1.5});
  double prev = 0.0;
  for (double su2 : {0.0, 0.1, 0.5, 1.0, 5.0, 50.0}) {
    const auto u = blup_u(data, VarianceParams{1.0, su2}, Vector::Zero(1));
    EXPECT_GE(std::abs(u[0](0)) + 1e-15, prev);
    prev = std::abs(u[0](0));
  }
}

TEST(RemlFit, MatchesAnovaClosedFormOnBalancedData) {
  int checked = 0;
  for (std::uint64_t seed = 100; seed < 110; ++seed) {
    const auto data = oracle::balanced_oneway(seed, 10, 5, 1.0, 1.0, 0.5);
    const auto fit = reml_fit(data);
    const auto anova = oracle::anova_reml(data);
    if (anova.truncated) continue;  // boundary handled in its own test
    EXPECT_NEAR(fit.delta_hat.sigma_e2, anova.sigma_e2, 1e-6) << "seed " << seed;
    EXPECT_NEAR(fit.delta_hat.sigma_u2, anova.sigma_u2, 1e-6) << "seed " << seed;
    EXPECT_FALSE(fit.boundary_flag);
    ++checked;
  }
  EXPECT_GE(checked, 5);
}

TEST(RemlFit, GoldenSectionOptimizerAgrees) {
  for (std::uint64_t seed = 200; seed < 204; ++seed) {
    const auto data = oracle::balanced_oneway(seed, 8, 6, -1.0, 2.0, 1.0);
    RemlConfig nm;
    RemlConfig golden;
    golden.optimizer = RemlConfig::Optimizer::golden_section_on_ratio;
    const auto fit_nm = reml_fit(data, nm);
    const auto fit_gs = reml_fit(data, golden);
    EXPECT_NEAR(fit_nm.delta_hat.sigma_e2, fit_gs.delta_hat.sigma_e2,
                1e-5 * fit_nm.delta_hat.sigma_e2 + 1e-9);
    EXPECT_NEAR(fit_nm.delta_hat.sigma_u2, fit_gs.delta_hat.sigma_u2,
                1e-5 * fit_nm.delta_hat.sigma_e2 + 1e-9);
  }
}

TEST(RemlFit, DegenerateBetweenClusterVariationHitsBoundary) {
  // u_j == 0 and almost no between-cluster noise.
  auto rng = make_stream(5, 0x626f756eULL);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<ClusterBlock> blocks;
  for (int j = 0; j < 10; ++j) {
    ClusterBlock b;
    b.cluster_id = "c" + std::to_string(j);
    b.X = Matrix::Ones(5, 1);
    b.Z = Matrix::Ones(5, 1);
    b.y.resize(5);
    for (int i = 0; i < 5; ++i) b.y(i) = 2.0 + gauss(rng);
    // Force all cluster means identical: remove the empirical mean.
    b.y.array() -= b.y.mean() - 2.0;
    blocks.push_back(std::move(b));
  }
  const ClusteredDataset data(std::move(blocks));
  const auto fit = reml_fit(data);
  EXPECT_TRUE(fit.boundary_flag);
  const auto anova = oracle::anova_reml(data);
  EXPECT_TRUE(anova.truncated);
}

TEST(RemlFit, RecoversTruthOnLargeSimulatedData) {
  // Single seeded consistency check: m = 300, n_j = 20, delta = (1, 0.5).
  auto rng = make_stream(31415, 0x636f6e73ULL);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<ClusterBlock> blocks;
  for (int j = 0; j < 300; ++j) {
    ClusterBlock b;
    b.cluster_id = std::to_string(j);
    b.X.resize(20, 2);
    b.X.col(0).setOnes();
    for (int i = 0; i < 20; ++i) b.X(i, 1) = unif(rng);
    b.Z = Matrix::Ones(20, 1);
    const double u = std::sqrt(0.5) * gauss(rng);
    b.y.resize(20);
    for (int i = 0; i < 20; ++i) b.y(i) = 1.0 + b.X(i, 1) + u + gauss(rng);
    blocks.push_back(std::move(b));
  }
  const auto fit = reml_fit(ClusteredDataset(std::move(blocks)));
  EXPECT_NEAR(fit.delta_hat.sigma_e2, 1.0, 0.1);
  EXPECT_NEAR(fit.delta_hat.sigma_u2, 0.5, 0.1);
  EXPECT_NEAR(fit.beta_hat(0), 1.0, 0.15);
  EXPECT_NEAR(fit.beta_hat(1), 1.0, 0.2);
}

TEST(RemlFit, NonConvergenceThrows) {
  const auto data = oracle::balanced_oneway(8, 6, 4, 0.5, 1.0, 0.8);
  RemlConfig config;
  config.max_iterations = 1;
  config.rel_tolerance = 1e-14;
  EXPECT_THROW(reml_fit(data, config), NumericalError);
}

TEST(RemlFit, GlsOrthogonalityAtOptimum) {
  for (std::uint64_t seed = 300; seed < 305; ++seed) {
    const auto data = oracle::random_instance(seed);
    const auto fit = reml_fit(data);
    // sum_j X_j' V_j^-1 (y_j - X_j beta_hat) via the dense oracle pieces.
    const Matrix x = oracle::stacked_x(data);
    const Vector y = data.stacked_y();
    const Matrix vinv = oracle::dense_v_stacked(data, fit.delta_hat).inverse();
    const Vector score = x.transpose() * (vinv * (y - x * fit.beta_hat));
    const double scale = (x.transpose() * (vinv * y)).norm();
    EXPECT_LT(score.norm(), 1e-8 * std::max(scale, 1.0)) << "seed " << seed;
  }
}

TEST(RemlFit, LocalOptimumAgainstRandomPerturbations) {
  const auto data = oracle::random_instance(77);
  const auto fit = reml_fit(data);
  SuffStats ss(data);
  const double at_opt =
      detail::evaluate_gls(ss, fit.delta_hat, RemlConfig::Likelihood::reml).loglik;
  auto rng = make_stream(77, 0x70657274ULL);
  std::uniform_real_distribution<double> unif(-0.5, 0.5);
  for (int i = 0; i < 50; ++i) {
    VarianceParams delta{fit.delta_hat.sigma_e2 * std::exp(unif(rng)),
                         std::max(fit.delta_hat.sigma_u2 * std::exp(unif(rng)), 1e-12)};
    const double ll = detail::evaluate_gls(ss, delta, RemlConfig::Likelihood::reml).loglik;
    EXPECT_LE(ll, at_opt + 1e-7);
  }
}

TEST(RemlFit, ReportedLoglikMatchesDenseOracle) {
  const auto data = oracle::random_instance(55);
  const auto fit = reml_fit(data);
  EXPECT_NEAR(fit.reml_loglik, oracle::dense_reml_loglik(data, fit.delta_hat),
              1e-8 * std::abs(fit.reml_loglik));
}

TEST(RemlFit, MlFlagMaximizesMlObjective) {
  const auto data = oracle::balanced_oneway(9, 8, 5, 1.0, 1.0, 0.5);
  RemlConfig config;
  config.likelihood = RemlConfig::Likelihood::ml;
  const auto fit = reml_fit(data, config);
  SuffStats ss(data);
  const double at_opt = detail::evaluate_gls(ss, fit.delta_hat, RemlConfig::Likelihood::ml).loglik;
  auto rng = make_stream(9, 0x6d6cULL);
  std::uniform_real_distribution<double> unif(-0.4, 0.4);
  for (int i = 0; i < 25; ++i) {
    VarianceParams delta{fit.delta_hat.sigma_e2 * std::exp(unif(rng)),
                         std::max(fit.delta_hat.sigma_u2 * std::exp(unif(rng)), 1e-12)};
    EXPECT_LE(detail::evaluate_gls(ss, delta, RemlConfig::Likelihood::ml).loglik, at_opt + 1e-7);
  }
}

// Woodbury-path determinants and inverses against dense assembly.
TEST(Estimation, WoodburyAgreesWithDense) {
  for (std::uint64_t seed = 400; seed < 406; ++seed) {
    oracle::InstanceOptions opt;
    opt.q = seed % 2 == 0 ? 2 : 1;
    opt.n_max = 6;
    const auto data = oracle::random_instance(seed, opt);
    auto rng = make_stream(seed, 0x776f6f64ULL);
    std::uniform_real_distribution<double> unif(0.3, 2.0);
    const VarianceParams delta{unif(rng), unif(rng)};
    SuffStats ss(data);
    const auto eval = detail::evaluate_gls(ss, delta, RemlConfig::Likelihood::reml);
    // log|V| against the dense stacked determinant.
    double dense_logdet = 0.0;
    for (std::size_t j = 0; j < data.m(); ++j) {
      dense_logdet += std::log(dense_covariance(data.cluster(j), delta).determinant());
    }
    EXPECT_NEAR(eval.logdet_v, dense_logdet, 1e-10 * std::abs(dense_logdet) + 1e-10);
    // V_j^-1 via the Woodbury identity against dense inversion.
    for (std::size_t j = 0; j < data.m(); ++j) {
      const auto& c = data.cluster(j);
      Matrix b = delta.sigma_u2 * (c.Z.transpose() * c.Z);
      b.diagonal().array() += delta.sigma_e2;
      Matrix woodbury = -delta.sigma_u2 * (c.Z * b.inverse() * c.Z.transpose());
      woodbury.diagonal().array() += 1.0;
      woodbury /= delta.sigma_e2;
      const Matrix dense_inv = dense_covariance(c, delta).inverse();
      EXPECT_LT((woodbury - dense_inv).norm(), 1e-10 * dense_inv.norm());
    }
  }
}

TEST(PredictTheta, TrivialAndRandomCases) {
  const auto data = oracle::random_instance(501);
  const auto fit = reml_fit(data);
  // l = 0: pure fixed part.
  MixedEffectTarget t0;
  t0.k.assign(data.m(), Vector::Ones(data.fixed_dim()));
  t0.l.assign(data.m(), Vector::Zero(1));
  for (std::size_t j = 0; j < data.m(); ++j) t0.l[j] = Vector::Zero(data.cluster(j).q());
  const Vector theta0 = predict_theta(fit, t0);
  for (Eigen::Index j = 0; j < theta0.size(); ++j) {
    EXPECT_NEAR(theta0(j), fit.beta_hat.sum(), 1e-12);
  }
  // k = 0, l = e1: the random intercept itself.
  MixedEffectTarget t1;
  t1.k.assign(data.m(), Vector::Zero(data.fixed_dim()));
  t1.l.resize(data.m());
  for (std::size_t j = 0; j < data.m(); ++j) {
    t1.l[j] = Vector::Zero(data.cluster(j).q());
    t1.l[j](0) = 1.0;
  }
  const Vector theta1 = predict_theta(fit, t1);
  for (std::size_t j = 0; j < data.m(); ++j) {
    EXPECT_DOUBLE_EQ(theta1(static_cast<Eigen::Index>(j)), fit.u_hat[j](0));
  }
  // Random target: explicit dot products.
  const auto tr = oracle::random_target(data, 501);
  const Vector theta = predict_theta(fit, tr);
  for (std::size_t j = 0; j < data.m(); ++j) {
    double expected = 0.0;
    for (Eigen::Index i = 0; i < fit.beta_hat.size(); ++i) {
      expected += tr.k[j](i) * fit.beta_hat(i);
    }
    for (Eigen::Index i = 0; i < fit.u_hat[j].size(); ++i) {
      expected += tr.l[j](i) * fit.u_hat[j](i);
    }
    EXPECT_NEAR(theta(static_cast<Eigen::Index>(j)), expected, 1e-12);
  }
  // Dimension mismatch.
  MixedEffectTarget bad = tr;
  bad.k[0] = Vector::Ones(data.fixed_dim() + 1);
  EXPECT_THROW(predict_theta(fit, bad), ValidationError);
}

TEST(ConditionalResiduals, TrivialAndDenseCases) {
  // Perfect fit: y constructed from the fitted surface gives zero residuals.
  auto data = oracle::random_instance(601);
  auto fit = reml_fit(data);
  Vector y_perfect(static_cast<Eigen::Index>(data.total_n()));
  for (std::size_t j = 0; j < data.m(); ++j) {
    const auto& c = data.cluster(j);
    y_perfect.segment(static_cast<Eigen::Index>(data.offset(j)), c.n()) =
        c.X * fit.beta_hat + c.Z * fit.u_hat[j];
  }
  const auto perfect = data.with_response(y_perfect);
  const auto [e0, u0] = conditional_residuals(perfect, fit);
  EXPECT_LT(e0.cwiseAbs().maxCoeff(), 1e-12);

  // sigma_u2 = 0: residuals equal OLS residuals at beta_hat.
  FitResult ols_fit = fit;
  ols_fit.delta_hat = VarianceParams{1.0, 0.0};
  ols_fit.u_hat = blup_u(data, ols_fit.delta_hat, fit.beta_hat);
  const auto [e1, u1] = conditional_residuals(data, ols_fit);
  const Vector ols_resid = data.stacked_y() - oracle::stacked_x(data) * fit.beta_hat;
  EXPECT_LT((e1 - ols_resid).cwiseAbs().maxCoeff(), 1e-12);

  // Random case against dense evaluation.
  const auto [e2, u2] = conditional_residuals(data, fit);
  const Matrix z = oracle::stacked_z(data);
  Vector u_stacked(z.cols());
  Eigen::Index qoff = 0;
  for (std::size_t j = 0; j < data.m(); ++j) {
    u_stacked.segment(qoff, data.cluster(j).q()) = fit.u_hat[j];
    qoff += data.cluster(j).q();
  }
  const Vector dense =
      data.stacked_y() - oracle::stacked_x(data) * fit.beta_hat - z * u_stacked;
  EXPECT_LT((e2 - dense).cwiseAbs().maxCoeff(), 1e-12);
}

}  // namespace
