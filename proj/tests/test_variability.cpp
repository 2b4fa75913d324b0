#include <lmmboot/variability.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracle_helpers.hpp"

using namespace lmmboot;

namespace {

MixedEffectTarget unit_target(const ClusteredDataset& data) {
  MixedEffectTarget t;
  t.k.resize(data.m());
  t.l.resize(data.m());
  for (std::size_t j = 0; j < data.m(); ++j) {
    t.k[j] = Vector::Zero(data.fixed_dim());
    t.k[j](0) = 1.0;
    t.l[j] = Vector::Ones(data.cluster(j).q());
  }
  return t;
}

TEST(G1, ZeroWhenNoRandomVariance) {
  const auto data = oracle::balanced_oneway(1, 5, 4, 0.0, 1.0, 0.5);
  const auto t = unit_target(data);
  const Vector v = g1(data, VarianceParams{1.0, 0.0}, t);
  EXPECT_LT(v.cwiseAbs().maxCoeff(), 1e-15);
}

// Random intercept with l = 1: g1 = sigma_u2 sigma_e2 / (sigma_e2 + n_j sigma_u2).
TEST(G1, ClosedFormRandomIntercept) {
  const auto data = oracle::balanced_oneway(2, 4, 1, 0.0, 1.0, 0.5);
  const auto t = unit_target(data);
  const Vector v = g1(data, VarianceParams{1.0, 1.0}, t);
  for (Eigen::Index j = 0; j < v.size(); ++j) EXPECT_NEAR(v(j), 0.5, 1e-12);

  const auto data2 = oracle::balanced_oneway(3, 4, 7, 0.0, 1.0, 0.5);
  const Vector v2 = g1(data2, VarianceParams{2.0, 0.8}, unit_target(data2));
  for (Eigen::Index j = 0; j < v2.size(); ++j) {
    EXPECT_NEAR(v2(j), 0.8 * 2.0 / (2.0 + 7.0 * 0.8), 1e-12);
  }
}

TEST(G1, MatchesDenseOracle) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    oracle::InstanceOptions opt;
    opt.q = seed % 2 == 0 ? 2 : 1;
    const auto data = oracle::random_instance(seed, opt);
    const auto t = oracle::random_target(data, seed + 1000);
    auto rng = make_stream(seed, 0x6731ULL);
    std::uniform_real_distribution<double> unif(0.2, 2.0);
    const VarianceParams delta{unif(rng), unif(rng)};
    const Vector mine = g1(data, delta, t);
    const Vector dense = oracle::dense_g1(data, delta, t);
    EXPECT_LT((mine - dense).cwiseAbs().maxCoeff(), 1e-12 * (1.0 + dense.cwiseAbs().maxCoeff()))
        << "seed " << seed;
  }
}

TEST(G2, SelectsBetaVarianceWhenLIsZero) {
  const auto data = oracle::balanced_oneway(4, 5, 4, 1.0, 1.0, 0.5);
  MixedEffectTarget t = unit_target(data);
  for (auto& l : t.l) l.setZero();
  const VarianceParams delta{1.3, 0.4};
  const Vector v = g2(data, delta, t);
  const Matrix winv = oracle::dense_gls(data, delta).info.inverse();
  for (Eigen::Index j = 0; j < v.size(); ++j) EXPECT_NEAR(v(j), winv(0, 0), 1e-12);
}

TEST(G2, BalancedInterceptOnlyReducesToOneOverN) {
  const auto data = oracle::balanced_oneway(5, 5, 4, 1.0, 1.0, 0.5);
  MixedEffectTarget t = unit_target(data);
  for (auto& l : t.l) l.setZero();
  const Vector v = g2(data, VarianceParams{1.0, 0.0}, t);
  for (Eigen::Index j = 0; j < v.size(); ++j) {
    EXPECT_NEAR(v(j), 1.0 / static_cast<double>(data.total_n()), 1e-12);
  }
}

TEST(G2, MatchesDenseOracle) {
  for (std::uint64_t seed = 31; seed <= 40; ++seed) {
    oracle::InstanceOptions opt;
    opt.q = seed % 2 == 0 ? 2 : 1;
    opt.p1 = 2;
    const auto data = oracle::random_instance(seed, opt);
    const auto t = oracle::random_target(data, seed + 2000);
    auto rng = make_stream(seed, 0x6732ULL);
    std::uniform_real_distribution<double> unif(0.2, 2.0);
    const VarianceParams delta{unif(rng), unif(rng)};
    const Vector mine = g2(data, delta, t);
    const Vector dense = oracle::dense_g2(data, delta, t);
    EXPECT_LT((mine - dense).cwiseAbs().maxCoeff(), 1e-10 * (1.0 + dense.cwiseAbs().maxCoeff()))
        << "seed " << seed;
  }
}

TEST(FisherInformation, SymmetricAndMatchesDenseTraces) {
  for (std::uint64_t seed = 51; seed <= 56; ++seed) {
    oracle::InstanceOptions opt;
    opt.q = seed % 2 == 0 ? 2 : 1;
    const auto data = oracle::random_instance(seed, opt);
    auto rng = make_stream(seed, 0x66697368ULL);
    std::uniform_real_distribution<double> unif(0.3, 1.8);
    const VarianceParams delta{unif(rng), unif(rng)};
    const auto info = fisher_information_reml(data, delta);
    EXPECT_DOUBLE_EQ(info.info(0, 1), info.info(1, 0));
    const Eigen::Matrix2d dense = oracle::dense_fisher(data, delta);
    EXPECT_LT((info.info - dense).norm(), 1e-8 * dense.norm()) << "seed " << seed;
    if (!info.singular) {
      EXPECT_LT((info.info * info.v_a - Eigen::Matrix2d::Identity()).norm(), 1e-8);
    }
  }
}

TEST(FisherInformation, InterceptOnlyNoRandomVariance) {
  // sigma_u2 = 0, balanced intercept-only: I_ee = (n - 1) / (2 sigma_e4).
  const auto data = oracle::balanced_oneway(6, 6, 5, 1.0, 1.0, 0.5);
  const double se2 = 1.7;
  const auto info = fisher_information_reml(data, VarianceParams{se2, 0.0});
  const double n = static_cast<double>(data.total_n());
  EXPECT_NEAR(info.info(0, 0), (n - 1.0) / (2.0 * se2 * se2), 1e-8);
  const Eigen::Matrix2d dense = oracle::dense_fisher(data, VarianceParams{se2, 0.0});
  EXPECT_LT((info.info - dense).norm(), 1e-8 * dense.norm());
}

TEST(FisherInformation, DoublingDataDoublesInformation) {
  const auto data = oracle::random_instance(61);
  std::vector<ClusterBlock> doubled;
  for (std::size_t j = 0; j < data.m(); ++j) {
    doubled.push_back(data.cluster(j));
    auto copy = data.cluster(j);
    copy.cluster_id += "_copy";
    doubled.push_back(std::move(copy));
  }
  const ClusteredDataset data2(std::move(doubled));
  const VarianceParams delta{1.1, 0.6};
  const auto i1 = fisher_information_reml(data, delta);
  const auto i2 = fisher_information_reml(data2, delta);
  // Exactly double up to the fixed-effect adjustment, which shrinks as data
  // grow; recomputation oracle with a loose relative tolerance.
  EXPECT_LT((i2.info - 2.0 * i1.info).norm(), 0.15 * i1.info.norm());
}

TEST(G3, ZeroWhenLIsZero) {
  const auto data = oracle::random_instance(71);
  MixedEffectTarget t = oracle::random_target(data, 71);
  for (auto& l : t.l) l.setZero();
  const VarianceParams delta{1.0, 0.5};
  const auto info = fisher_information_reml(data, delta);
  const Vector v = g3(data, delta, t, info);
  EXPECT_LT(v.cwiseAbs().maxCoeff(), 1e-15);
}

// Analytic derivative route against central finite differences, and the trace
// formula against brute-force assembly.
TEST(G3, AnalyticDerivativesMatchFiniteDifferences) {
  for (std::uint64_t seed = 81; seed <= 92; ++seed) {
    oracle::InstanceOptions opt;
    opt.q = seed % 3 == 0 ? 2 : 1;
    const auto data = oracle::random_instance(seed, opt);
    const auto t = oracle::random_target(data, seed + 3000);
    auto rng = make_stream(seed, 0x6733ULL);
    std::uniform_real_distribution<double> unif(0.4, 1.6);
    const VarianceParams delta{unif(rng), unif(rng)};
    const auto info = fisher_information_reml(data, delta);
    ASSERT_FALSE(info.singular);
    const Vector mine = g3(data, delta, t, info);
    const Vector fd = oracle::dense_g3(data, delta, t, info.v_a);
    EXPECT_LT((mine - fd).cwiseAbs().maxCoeff(), 1e-6) << "seed " << seed;
  }
}

TEST(G3, SingularInformationGivesZeroWithWarning) {
  const auto data = oracle::random_instance(95);
  const auto t = oracle::random_target(data, 95);
  FisherInformation info;
  info.singular = true;
  bool warning = false;
  const Vector v = g3(data, VarianceParams{1.0, 0.5}, t, info, &warning);
  EXPECT_TRUE(warning);
  EXPECT_LT(v.cwiseAbs().maxCoeff(), 1e-15);
}

TEST(MseComponents, BoundsAndPositivity) {
  for (std::uint64_t seed = 101; seed <= 108; ++seed) {
    const auto data = oracle::random_instance(seed);
    const auto t = oracle::random_target(data, seed + 4000);
    auto rng = make_stream(seed, 0x6d7365ULL);
    std::uniform_real_distribution<double> unif(0.3, 1.5);
    const VarianceParams delta{unif(rng), unif(rng)};
    const auto comps = mse_components(data, delta, t);
    for (Eigen::Index j = 0; j < comps.g1.size(); ++j) {
      EXPECT_GE(comps.g1(j), 0.0);
      EXPECT_GE(comps.g2(j), 0.0);
      EXPECT_GE(comps.g3(j), -1e-12);  // both trace factors are PSD forms
      // g1 <= sigma_u2 ||l||^2 for the isotropic model.
      EXPECT_LE(comps.g1(j), delta.sigma_u2 * t.l[static_cast<std::size_t>(j)].squaredNorm() +
                                 1e-12);
      EXPECT_GE(comps.mse_l(j), comps.g1(j) + comps.g2(j) - 1e-12);
    }
  }
}

TEST(MseComponents, G1MonotoneInSigmaU2) {
  const auto data = oracle::random_instance(111);
  const auto t = unit_target(data);
  Vector prev = Vector::Zero(static_cast<Eigen::Index>(data.m()));
  for (double su2 : {0.0, 0.05, 0.2, 0.8, 2.0, 10.0}) {
    const Vector cur = g1(data, VarianceParams{1.0, su2}, t);
    for (Eigen::Index j = 0; j < cur.size(); ++j) EXPECT_GE(cur(j) + 1e-14, prev(j));
    prev = cur;
  }
}

// Record-level estimators on hand-set replicate stores.
struct FakeDist {
  Matrix theta_star;
  Matrix theta_tilde_star;
  Matrix theta_hat_star;
  Matrix g1_star;
  Matrix g2_star;
};

TEST(MseB1, HandComputedValues) {
  FakeDist d;
  d.theta_star.resize(2, 1);
  d.theta_hat_star.resize(2, 1);
  // identical replicates -> 0
  d.theta_star << 1.0, 1.0;
  d.theta_hat_star << 1.0, 1.0;
  EXPECT_DOUBLE_EQ(mse_b1(d)(0), 0.0);
  // differences (1, -1) -> mean of squares = 1
  d.theta_hat_star << 2.0, 0.0;
  EXPECT_DOUBLE_EQ(mse_b1(d)(0), 1.0);
}

TEST(MseB1, NeedsTwoReplicates) {
  FakeDist d;
  d.theta_star = Matrix::Zero(1, 1);
  d.theta_hat_star = Matrix::Zero(1, 1);
  EXPECT_THROW(mse_b1(d), ValidationError);
}

TEST(Mse3T, ReducesToTildeMseWhenHatEqualsTilde) {
  FakeDist d;
  d.theta_star.resize(3, 1);
  d.theta_star << 0.0, 1.0, -1.0;
  d.theta_tilde_star.resize(3, 1);
  d.theta_tilde_star << 0.5, 1.5, -0.5;
  d.theta_hat_star = d.theta_tilde_star;
  // MSE_B(tilde) = mean(0.25) = 0.25, other terms vanish.
  EXPECT_NEAR(mse_3t(d)(0), 0.25, 1e-15);
}

TEST(Mse3T, HandComputedThreeReplicates) {
  FakeDist d;
  d.theta_star.resize(3, 1);
  d.theta_tilde_star.resize(3, 1);
  d.theta_hat_star.resize(3, 1);
  d.theta_star << 0.0, 0.0, 0.0;
  d.theta_tilde_star << 1.0, -1.0, 0.5;
  d.theta_hat_star << 1.5, -0.5, 0.0;
  const double t1 = (1.0 + 1.0 + 0.25) / 3.0;
  const double t2 = (0.25 + 0.25 + 0.25) / 3.0;
  const double t3 = (1.0 * 0.5 + (-1.0) * 0.5 + 0.5 * (-0.5)) / 3.0;
  EXPECT_NEAR(mse_3t(d)(0), t1 + t2 + 2.0 * t3, 1e-15);
}

// Algebraic identity: the three-term decomposition recombines to mse_b1.
TEST(Mse3T, RecombinationIdentityWithMseB1) {
  auto rng = make_stream(7, 0x726563ULL);
  std::normal_distribution<double> gauss(0.0, 1.0);
  FakeDist d;
  const int b = 200, m = 7;
  d.theta_star.resize(b, m);
  d.theta_tilde_star.resize(b, m);
  d.theta_hat_star.resize(b, m);
  for (int i = 0; i < b; ++i) {
    for (int j = 0; j < m; ++j) {
      d.theta_star(i, j) = gauss(rng);
      d.theta_tilde_star(i, j) = gauss(rng);
      d.theta_hat_star(i, j) = gauss(rng);
    }
  }
  const Vector v3t = mse_3t(d);
  const Vector vb1 = mse_b1(d);
  EXPECT_LT((v3t - vb1).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(MseSpa, DegenerateBootstrapGivesG1PlusG2) {
  FakeDist d;
  const int b = 4, m = 2;
  d.theta_star = Matrix::Zero(b, m);
  d.theta_tilde_star = Matrix::Zero(b, m);
  d.theta_hat_star = Matrix::Zero(b, m);
  Vector g1v(m), g2v(m);
  g1v << 0.4, 0.9;
  g2v << 0.1, 0.2;
  d.g1_star = g1v.transpose().replicate(b, 1);
  d.g2_star = g2v.transpose().replicate(b, 1);
  bool neg = false;
  const Vector v = mse_spa(d, g1v, g2v, &neg);
  EXPECT_FALSE(neg);
  EXPECT_NEAR(v(0), 0.5, 1e-15);
  EXPECT_NEAR(v(1), 1.1, 1e-15);
}

TEST(MseSpa, HandComputedTwoReplicates) {
  FakeDist d;
  d.theta_star.resize(2, 1);
  d.theta_tilde_star.resize(2, 1);
  d.theta_hat_star.resize(2, 1);
  d.theta_star << 0.0, 0.0;
  d.theta_tilde_star << 0.2, -0.2;
  d.theta_hat_star << 0.5, 0.1;
  d.g1_star.resize(2, 1);
  d.g1_star << 0.3, 0.5;
  d.g2_star.resize(2, 1);
  d.g2_star << 0.1, 0.1;
  Vector g1v(1), g2v(1);
  g1v << 0.45;
  g2v << 0.05;
  const double boot_g = (0.4 + 0.6) / 2.0;
  const double t2 = (0.09 + 0.09) / 2.0;
  const double t3 = (0.2 * 0.3 + (-0.2) * 0.3) / 2.0;
  const Vector v = mse_spa(d, g1v, g2v);
  EXPECT_NEAR(v(0), 2.0 * 0.5 - boot_g + t2 + 2.0 * t3, 1e-15);
}

struct FakeInner {
  std::vector<Matrix> theta_star;
  std::vector<Matrix> theta_hat_star;
  bool empty() const { return theta_star.empty(); }
};

TEST(MseBc, InnerIdenticalToOuterReducesToB1) {
  FakeDist d;
  d.theta_star.resize(3, 1);
  d.theta_star << 0.0, 1.0, 2.0;
  d.theta_hat_star.resize(3, 1);
  d.theta_hat_star << 1.0, 1.0, 1.0;
  FakeInner inner;
  inner.theta_star = {d.theta_star};
  inner.theta_hat_star = {d.theta_hat_star};
  EXPECT_NEAR(mse_bc(d, inner)(0), mse_b1(d)(0), 1e-15);
}

TEST(MseBc, HandComputedBiasCorrection) {
  // 2 * 4 - 3 = 5.
  FakeDist d;
  d.theta_star = Matrix::Zero(2, 1);
  d.theta_hat_star.resize(2, 1);
  d.theta_hat_star << 2.0, 2.0;  // b1 = 4
  FakeInner inner;
  inner.theta_star = {Matrix::Zero(2, 1)};
  Matrix ih(2, 1);
  ih << std::sqrt(3.0), std::sqrt(3.0);  // b2 = 3
  inner.theta_hat_star = {ih};
  bool neg = false;
  EXPECT_NEAR(mse_bc(d, inner, &neg)(0), 5.0, 1e-12);
  EXPECT_FALSE(neg);
}

TEST(MseBc, MissingInnerThrows) {
  FakeDist d;
  d.theta_star = Matrix::Zero(2, 1);
  d.theta_hat_star = Matrix::Zero(2, 1);
  FakeInner inner;
  EXPECT_THROW(mse_bc(d, inner), ValidationError);
}

}  // namespace
