#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace lmmboot {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Input data or configuration violates a documented precondition.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A numerical procedure failed (non-convergence, singularity, failure budget).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File input/output failure.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Variance components delta = (sigma_e2, sigma_u2) of the two-component model
/// with R_j = sigma_e2 * I and G_j = sigma_u2 * I, so V_j = sigma_e2 I + sigma_u2 Z_j Z_j'.
struct VarianceParams {
  double sigma_e2 = 1.0;
  double sigma_u2 = 0.0;

  bool valid() const {
    return std::isfinite(sigma_e2) && std::isfinite(sigma_u2) && sigma_e2 > 0.0 &&
           sigma_u2 >= 0.0;
  }
};

/// One cluster block: response y_j (n_j), fixed design X_j (n_j x (p+1)),
/// random design Z_j (n_j x q_j).
struct ClusterBlock {
  std::string cluster_id;
  Vector y;
  Matrix X;
  Matrix Z;

  Eigen::Index n() const { return y.size(); }
  Eigen::Index q() const { return Z.cols(); }
};

/// Clustered dataset stored as contiguous per-cluster blocks. Immutable after
/// construction; all row counts within a block must agree (throws otherwise).
/// Data-quality conditions (rank, finiteness, m >= 2, ...) are reported by
/// validate_dataset and enforced at fit time, not here.
class ClusteredDataset {
 public:
  explicit ClusteredDataset(std::vector<ClusterBlock> clusters)
      : clusters_(std::move(clusters)) {
    n_total_ = 0;
    offsets_.reserve(clusters_.size());
    for (const auto& c : clusters_) {
      if (c.X.rows() != c.n() || c.Z.rows() != c.n()) {
        throw ValidationError("cluster '" + c.cluster_id +
                              "': X/Z row counts do not match length of y");
      }
      offsets_.push_back(n_total_);
      n_total_ += static_cast<std::size_t>(c.n());
    }
  }

  std::size_t m() const { return clusters_.size(); }
  std::size_t total_n() const { return n_total_; }
  /// Number of fixed-effect columns (p+1); 0 for an empty dataset.
  Eigen::Index fixed_dim() const { return clusters_.empty() ? 0 : clusters_.front().X.cols(); }
  const ClusterBlock& cluster(std::size_t j) const { return clusters_[j]; }
  const std::vector<ClusterBlock>& clusters() const { return clusters_; }
  /// Offset of cluster j in the stacked response vector.
  std::size_t offset(std::size_t j) const { return offsets_[j]; }

  Vector stacked_y() const {
    Vector y(static_cast<Eigen::Index>(n_total_));
    for (std::size_t j = 0; j < clusters_.size(); ++j) {
      y.segment(static_cast<Eigen::Index>(offsets_[j]), clusters_[j].n()) = clusters_[j].y;
    }
    return y;
  }

  /// Same design with a replacement stacked response (used by the bootstrap).
  ClusteredDataset with_response(const Vector& y_stacked) const {
    if (y_stacked.size() != static_cast<Eigen::Index>(n_total_)) {
      throw ValidationError("replacement response has wrong length");
    }
    std::vector<ClusterBlock> blocks = clusters_;
    for (std::size_t j = 0; j < blocks.size(); ++j) {
      blocks[j].y = y_stacked.segment(static_cast<Eigen::Index>(offsets_[j]), blocks[j].n());
    }
    return ClusteredDataset(std::move(blocks));
  }

 private:
  std::vector<ClusterBlock> clusters_;
  std::vector<std::size_t> offsets_;
  std::size_t n_total_ = 0;
};

/// Dense per-cluster covariance V_j = sigma_e2 I + sigma_u2 Z_j Z_j'.
inline Matrix dense_covariance(const ClusterBlock& c, const VarianceParams& delta) {
  Matrix v = delta.sigma_u2 * (c.Z * c.Z.transpose());
  v.diagonal().array() += delta.sigma_e2;
  return v;
}

/// Cluster-level inference target theta_j = k_j' beta + l_j' u_j.
struct MixedEffectTarget {
  std::vector<Vector> k;  // per cluster, length p+1
  std::vector<Vector> l;  // per cluster, length q_j

  void check_against(const ClusteredDataset& data) const {
    if (k.size() != data.m() || l.size() != data.m()) {
      throw ValidationError("target has wrong number of clusters");
    }
    for (std::size_t j = 0; j < data.m(); ++j) {
      if (k[j].size() != data.fixed_dim() || l[j].size() != data.cluster(j).q()) {
        throw ValidationError("target dimensions do not match dataset");
      }
      if (!k[j].allFinite() || !l[j].allFinite()) {
        throw ValidationError("target contains non-finite entries");
      }
    }
  }
};

struct ValidationIssue {
  std::string code;    // short machine-readable tag
  std::string detail;  // human-readable message
};

struct ValidationReport {
  std::vector<ValidationIssue> issues;
  bool ok() const { return issues.empty(); }
  std::string summary() const {
    std::string s;
    for (const auto& i : issues) {
      if (!s.empty()) s += "; ";
      s += i.code + ": " + i.detail;
    }
    return s;
  }
};

namespace detail {

/// Rank via singular values with relative tolerance 1e-10 * largest singular value.
inline Eigen::Index numeric_rank(const Matrix& a) {
  if (a.rows() == 0 || a.cols() == 0) return 0;
  Eigen::JacobiSVD<Matrix> svd(a);
  const auto& sv = svd.singularValues();
  const double tol = 1e-10 * sv(0);
  Eigen::Index r = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) {
    if (sv(i) > tol) ++r;
  }
  return r;
}

}  // namespace detail

/// Reports all violations of the dataset invariants; never throws.
inline ValidationReport validate_dataset(const ClusteredDataset& data) {
  ValidationReport report;
  if (data.m() < 2) {
    report.issues.push_back({"too_few_clusters",
                             "need at least 2 clusters, got " + std::to_string(data.m())});
  }
  const Eigen::Index p1 = data.fixed_dim();
  if (data.m() > 0 && p1 < 1) {
    report.issues.push_back({"no_fixed_effects", "X must have at least one column"});
  }
  bool finite = true;
  bool columns_consistent = true;
  std::size_t n_nondegenerate = 0;
  for (std::size_t j = 0; j < data.m(); ++j) {
    const auto& c = data.cluster(j);
    if (c.n() == 0) {
      report.issues.push_back({"empty_cluster", "cluster '" + c.cluster_id + "' has no rows"});
      continue;
    }
    ++n_nondegenerate;
    if (c.X.cols() != p1) columns_consistent = false;
    if (!c.y.allFinite() || !c.X.allFinite() || !c.Z.allFinite()) finite = false;
  }
  if (!columns_consistent) {
    report.issues.push_back(
        {"inconsistent_columns", "fixed-effect column count differs across clusters"});
  }
  if (!finite) {
    report.issues.push_back({"non_finite", "dataset contains NaN or infinite values"});
  }
  // Rank checks only make sense on structurally sound data.
  if (columns_consistent && finite && n_nondegenerate == data.m() && data.m() > 0) {
    Matrix x_stacked(static_cast<Eigen::Index>(data.total_n()), p1);
    for (std::size_t j = 0; j < data.m(); ++j) {
      const auto& c = data.cluster(j);
      x_stacked.middleRows(static_cast<Eigen::Index>(data.offset(j)), c.n()) = c.X;
    }
    if (detail::numeric_rank(x_stacked) < p1) {
      report.issues.push_back({"rank_deficient", "stacked fixed-effect design X is rank deficient"});
    }
    // Block-diagonal Z has full column rank iff every block does.
    for (std::size_t j = 0; j < data.m(); ++j) {
      const auto& c = data.cluster(j);
      if (c.q() > 0 && detail::numeric_rank(c.Z) < c.q()) {
        report.issues.push_back({"rank_deficient",
                                 "random-effect design Z of cluster '" + c.cluster_id +
                                     "' is rank deficient"});
      }
    }
  }
  return report;
}

/// One observation row for random-intercept model assembly.
struct DataRow {
  std::string cluster_id;
  double y = 0.0;
  std::vector<double> covariates;
};

/// Assembles a random-intercept dataset: X_j = [1 | covariates], Z_j = column of
/// ones (q_j = 1). Clusters are ordered by first appearance in `rows`.
inline ClusteredDataset build_random_intercept(const std::vector<DataRow>& rows) {
  if (rows.empty()) throw ValidationError("no data rows");
  const std::size_t arity = rows.front().covariates.size();
  std::vector<std::string> order;
  std::unordered_map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].covariates.size() != arity) {
      throw ValidationError("row " + std::to_string(i + 1) + ": expected " +
                            std::to_string(arity) + " covariates, got " +
                            std::to_string(rows[i].covariates.size()));
    }
    auto [it, inserted] = groups.try_emplace(rows[i].cluster_id);
    if (inserted) order.push_back(rows[i].cluster_id);
    it->second.push_back(i);
  }
  std::vector<ClusterBlock> blocks;
  blocks.reserve(order.size());
  for (const auto& id : order) {
    const auto& idx = groups[id];
    ClusterBlock b;
    b.cluster_id = id;
    const auto nj = static_cast<Eigen::Index>(idx.size());
    b.y.resize(nj);
    b.X.resize(nj, static_cast<Eigen::Index>(arity) + 1);
    b.Z = Matrix::Ones(nj, 1);
    for (Eigen::Index r = 0; r < nj; ++r) {
      const DataRow& row = rows[idx[static_cast<std::size_t>(r)]];
      b.y(r) = row.y;
      b.X(r, 0) = 1.0;
      for (std::size_t c = 0; c < arity; ++c) {
        b.X(r, static_cast<Eigen::Index>(c) + 1) = row.covariates[c];
      }
    }
    blocks.push_back(std::move(b));
  }
  return ClusteredDataset(std::move(blocks));
}

/// Fitted model: GLS estimate, REML variance components, predicted random
/// effects, and reusable GLS information sum_j X_j' V_j^-1 X_j.
struct FitResult {
  Vector beta_hat;
  VarianceParams delta_hat;
  std::vector<Vector> u_hat;
  Matrix gls_information;
  double reml_loglik = 0.0;
  bool boundary_flag = false;
  int iterations = 0;
};

}  // namespace lmmboot
