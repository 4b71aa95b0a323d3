#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "geofaith/error.hpp"

namespace geofaith {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct VarianceCurve {
  std::vector<double> eigenvalues;  ///< descending, clamped at 0
  std::vector<double> ratios;       ///< ratios[k-1] = VR(k), k = 1..k_max
};

struct PcaProjection {
  Vector mean;
  Matrix components;  ///< D x k, orthonormal columns
  Matrix projected;   ///< N x k
  std::vector<double> eigenvalues;  ///< all D eigenvalues, descending

  /// Projects new rows (N x D) onto the fitted components.
  Matrix transform(const Matrix& points) const {
    return (points.rowwise() - mean.transpose()) * components;
  }
};

struct TwoNNEstimate {
  double d_hat = 0.0;
  std::size_t n_retained = 0;
};

namespace detail {

/// Switch-over point from the D x D covariance to the N x N Gram matrix.
inline constexpr long kCovarianceDimLimit = 1024;

struct Spectrum {
  std::vector<double> values;  ///< descending
  Matrix vectors;              ///< D x r, column j pairs with values[j]
};

/// Eigen-decomposition of the sample covariance (N - 1 denominator) of the
/// centered data. When D exceeds the limit the N x N Gram matrix is
/// decomposed instead and its eigenvectors are mapped back to feature space.
inline Spectrum covariance_spectrum(const Matrix& centered) {
  const long n = centered.rows();
  const long d = centered.cols();
  const double denom = static_cast<double>(n - 1);
  Spectrum out;
  if (d <= kCovarianceDimLimit) {
    const Matrix cov = (centered.transpose() * centered) / denom;
    Eigen::SelfAdjointEigenSolver<Matrix> solver(cov);
    const Vector& vals = solver.eigenvalues();  // ascending
    out.values.resize(static_cast<std::size_t>(d));
    out.vectors.resize(d, d);
    for (long j = 0; j < d; ++j) {
      out.values[static_cast<std::size_t>(j)] = std::max(0.0, vals(d - 1 - j));
      out.vectors.col(j) = solver.eigenvectors().col(d - 1 - j);
    }
    return out;
  }
  const Matrix gram = (centered * centered.transpose()) / denom;
  Eigen::SelfAdjointEigenSolver<Matrix> solver(gram);
  const Vector& vals = solver.eigenvalues();
  out.values.assign(static_cast<std::size_t>(d), 0.0);
  out.vectors = Matrix::Zero(d, n);
  const double floor = 1e-10 * std::max(1.0, vals(n - 1));
  for (long j = 0; j < n; ++j) {
    const double lambda = vals(n - 1 - j);
    out.values[static_cast<std::size_t>(j)] = std::max(0.0, lambda);
    if (lambda > floor) {
      Vector v = centered.transpose() * solver.eigenvectors().col(n - 1 - j);
      out.vectors.col(j) = v / v.norm();
    }
  }
  return out;
}

/// Makes the largest-magnitude entry of each column positive (first index
/// wins ties).
inline void fix_signs(Matrix& components) {
  for (long j = 0; j < components.cols(); ++j) {
    Eigen::Index arg = 0;
    components.col(j).cwiseAbs().maxCoeff(&arg);
    if (components(arg, j) < 0.0) components.col(j) *= -1.0;
  }
}

}  // namespace detail

/// Cumulative explained-variance ratios of the empirical covariance.
inline VarianceCurve explained_variance(const Matrix& points, std::size_t k_max) {
  if (points.rows() < 2) fail(ErrorCode::TooFewSamples, "explained_variance needs at least 2 samples");
  const Matrix centered = points.rowwise() - points.colwise().mean();
  auto spectrum = detail::covariance_spectrum(centered);

  VarianceCurve curve;
  curve.eigenvalues = std::move(spectrum.values);
  double total = 0.0;
  for (double v : curve.eigenvalues) total += v;
  k_max = std::min(k_max, curve.eigenvalues.size());
  curve.ratios.reserve(k_max);
  double running = 0.0;
  for (std::size_t k = 0; k < k_max; ++k) {
    running += curve.eigenvalues[k];
    curve.ratios.push_back(total > 0.0 ? std::min(1.0, running / total) : 1.0);
  }
  return curve;
}

/// Variance curve from a known covariance matrix (no sampling).
inline VarianceCurve explained_variance_from_covariance(const Matrix& covariance, std::size_t k_max) {
  Eigen::SelfAdjointEigenSolver<Matrix> solver(covariance);
  const long d = covariance.rows();
  VarianceCurve curve;
  for (long j = d - 1; j >= 0; --j) curve.eigenvalues.push_back(std::max(0.0, solver.eigenvalues()(j)));
  double total = 0.0;
  for (double v : curve.eigenvalues) total += v;
  double running = 0.0;
  for (std::size_t k = 0; k < std::min<std::size_t>(k_max, curve.eigenvalues.size()); ++k) {
    running += curve.eigenvalues[k];
    curve.ratios.push_back(std::min(1.0, running / total));
  }
  return curve;
}

/// Rank-k PCA with deterministic component signs.
inline PcaProjection pca_fit_transform(const Matrix& points, std::size_t k) {
  const long n = points.rows();
  const long d = points.cols();
  if (k < 1 || static_cast<long>(k) > std::min(n - 1, d)) {
    fail(ErrorCode::RankTooLarge, "PCA rank " + std::to_string(k) + " outside [1, min(N-1, D)] = [1, " +
                                      std::to_string(std::min(n - 1, d)) + "]");
  }
  PcaProjection pca;
  pca.mean = points.colwise().mean().transpose();
  const Matrix centered = points.rowwise() - pca.mean.transpose();
  auto spectrum = detail::covariance_spectrum(centered);
  pca.eigenvalues = std::move(spectrum.values);
  pca.components = spectrum.vectors.leftCols(static_cast<long>(k));
  detail::fix_signs(pca.components);
  pca.projected = centered * pca.components;
  return pca;
}

/// Closed-form TwoNN MLE over precomputed ratios; ratios <= 1 are discarded.
inline TwoNNEstimate twonn_from_ratios(std::span<const double> ratios) {
  double log_sum = 0.0;
  std::size_t n = 0;
  for (double mu : ratios) {
    if (!(mu > 1.0) || !std::isfinite(mu)) continue;
    log_sum += std::log(mu);
    ++n;
  }
  if (n == 0 || !(log_sum > 0.0)) fail(ErrorCode::DegenerateCloud, "every TwoNN ratio was discarded");
  return {static_cast<double>(n) / log_sum, n};
}

/// Second-to-first nearest-neighbor distance ratio for every point, using
/// exact brute-force Euclidean neighbor search. Points whose nearest
/// neighbor coincides with them get ratio 0 (discarded downstream).
inline std::vector<double> twonn_ratios(const Matrix& points) {
  const long n = points.rows();
  const Vector sq = points.rowwise().squaredNorm();
  std::vector<double> ratios(static_cast<std::size_t>(n), 0.0);
  constexpr long kBlock = 256;
  for (long start = 0; start < n; start += kBlock) {
    const long rows = std::min(kBlock, n - start);
    // Squared distances via the Gram expansion, then refined exactly for the
    // two nearest candidates so rotations and scalings do not perturb them.
    const Matrix cross = points.middleRows(start, rows) * points.transpose();
    for (long r = 0; r < rows; ++r) {
      const long i = start + r;
      long best1 = -1, best2 = -1;
      double d1 = std::numeric_limits<double>::infinity(), d2 = d1;
      for (long j = 0; j < n; ++j) {
        if (j == i) continue;
        const double dist = sq(i) + sq(j) - 2.0 * cross(r, j);
        if (dist < d1) {
          d2 = d1;
          best2 = best1;
          d1 = dist;
          best1 = j;
        } else if (dist < d2) {
          d2 = dist;
          best2 = j;
        }
      }
      if (best2 < 0) continue;
      // The approximate ordering can only be wrong for near-ties; rescan a
      // small candidate band exactly.
      const double band = d2 + 1e-9 * (sq(i) + 1.0);
      double e1 = std::numeric_limits<double>::infinity(), e2 = e1;
      for (long j = 0; j < n; ++j) {
        if (j == i) continue;
        const double approx = sq(i) + sq(j) - 2.0 * cross(r, j);
        if (approx > band) continue;
        const double exact = (points.row(i) - points.row(j)).norm();
        if (exact < e1) {
          e2 = e1;
          e1 = exact;
        } else if (exact < e2) {
          e2 = exact;
        }
      }
      ratios[static_cast<std::size_t>(i)] = e1 > 0.0 ? e2 / e1 : 0.0;
    }
  }
  return ratios;
}

/// TwoNN intrinsic-dimension estimate of a point cloud (rows are points).
inline TwoNNEstimate twonn_estimate(const Matrix& points) {
  if (points.rows() < 3) fail(ErrorCode::TooFewSamples, "TwoNN needs at least 3 points");
  const auto ratios = twonn_ratios(points);
  return twonn_from_ratios(ratios);
}

}  // namespace geofaith
