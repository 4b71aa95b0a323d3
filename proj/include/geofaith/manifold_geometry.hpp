#pragma once

// Riemannian and information-geometric quantities on the VAE latent space:
// pullback metric, k-NN geodesic graph, distortion ratio, ensemble total
// variance, Fisher-Rao distance between diagonal Gaussians, and the
// trajectory-level contrast feature.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <functional>
#include <limits>
#include <queue>
#include <set>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "geofaith/error.hpp"
#include "geofaith/latent_vae.hpp"
#include "geofaith/parallel.hpp"

namespace geofaith {

// ---------------------------------------------------------------------------
// Pullback metric

/// Anything exposing the Jacobian of a decoder map at a latent point.
template <typename C>
concept DecoderChart = requires(const C& chart, const Vector& z) {
  { chart.jacobian(z) } -> std::convertible_to<Matrix>;
};

/// A trained decoder viewed as the map z -> [mu(z); s(z)].
struct VaeDecoderChart {
  const TrainedVae* vae = nullptr;
  ScaleHead head = ScaleHead::Sigma;

  Matrix jacobian(const Vector& z) const { return decoder_jacobian(*vae, z, head); }
};

struct PullbackMetric {
  Matrix g;  ///< d_z x d_z
};

/// G(z) = (1/M) sum_a J_a(z)^T J_a(z).
template <DecoderChart Chart>
PullbackMetric pullback_metric(std::span<const Chart> charts, const Vector& z) {
  if (charts.empty()) fail(ErrorCode::UntrainedEnsemble, "pullback metric needs at least one decoder");
  Matrix g = Matrix::Zero(z.size(), z.size());
  for (const auto& chart : charts) {
    const Matrix j = chart.jacobian(z);
    if (!j.allFinite()) fail(ErrorCode::NonFiniteJacobian, "decoder Jacobian is not finite");
    g.noalias() += j.transpose() * j;
  }
  g /= static_cast<double>(charts.size());
  // Symmetrize away rounding asymmetry.
  return {0.5 * (g + g.transpose())};
}

inline std::vector<VaeDecoderChart> decoder_charts(const VaeEnsemble& ensemble, ScaleHead head = ScaleHead::Sigma) {
  std::vector<VaeDecoderChart> charts;
  for (const auto& m : ensemble.members) charts.push_back({&m, head});
  return charts;
}

inline PullbackMetric pullback_metric(const VaeEnsemble& ensemble, const Vector& z, ScaleHead head = ScaleHead::Sigma) {
  const auto charts = decoder_charts(ensemble, head);
  return pullback_metric(std::span<const VaeDecoderChart>(charts), z);
}

/// Central-difference Jacobian of f at z, for cross-checking analytic ones.
template <typename F>
Matrix finite_difference_jacobian(F&& f, const Vector& z, double step = 1e-5) {
  const Vector f0 = f(z);
  Matrix jac(f0.size(), z.size());
  for (long c = 0; c < z.size(); ++c) {
    Vector plus = z, minus = z;
    plus(c) += step;
    minus(c) -= step;
    jac.col(c) = (f(plus) - f(minus)) / (2.0 * step);
  }
  return jac;
}

using MetricField = std::function<Matrix(const Vector&)>;

inline MetricField metric_field(const VaeEnsemble& ensemble, ScaleHead head = ScaleHead::Sigma) {
  auto charts = decoder_charts(ensemble, head);
  return [charts = std::move(charts)](const Vector& z) {
    return pullback_metric(std::span<const VaeDecoderChart>(charts), z).g;
  };
}

inline MetricField identity_metric() {
  return [](const Vector& z) { return Matrix(Matrix::Identity(z.size(), z.size())); };
}

/// Discretized line element between two latent points, evaluated at the midpoint.
inline double edge_weight(const Vector& zi, const Vector& zj, const MetricField& metric, double eps) {
  const Vector delta = zj - zi;
  const Vector mid = 0.5 * (zi + zj);
  const double quad = delta.dot(metric(mid) * delta);
  return std::sqrt(std::max(0.0, quad) + eps);
}

// ---------------------------------------------------------------------------
// Geodesic graph

struct GraphEdge {
  std::size_t to = 0;
  double weight = 0.0;
};

struct GeodesicGraph {
  Matrix nodes;  ///< N x d_z latent points
  std::vector<std::vector<GraphEdge>> adjacency;  ///< sorted by neighbor index
  double eps = 1e-8;

  std::size_t size() const { return adjacency.size(); }
  bool isolated(std::size_t i) const { return adjacency[i].empty(); }
  std::size_t edge_count() const {
    std::size_t n = 0;
    for (const auto& a : adjacency) n += a.size();
    return n / 2;
  }
  double euclidean(std::size_t i, std::size_t j) const {
    return (nodes.row(static_cast<long>(i)) - nodes.row(static_cast<long>(j))).norm();
  }
};

struct GraphParams {
  std::size_t k = 10;
  double eps = 1e-8;
};

/// Indices of the k nearest other points of row i (Euclidean; ties broken by
/// smaller index).
inline std::vector<std::size_t> nearest_neighbors(const Matrix& points, std::size_t i, std::size_t k) {
  const long n = points.rows();
  std::vector<std::pair<double, std::size_t>> cand;
  cand.reserve(static_cast<std::size_t>(n));
  for (long j = 0; j < n; ++j) {
    if (static_cast<std::size_t>(j) == i) continue;
    cand.emplace_back((points.row(j) - points.row(static_cast<long>(i))).squaredNorm(), static_cast<std::size_t>(j));
  }
  k = std::min(k, cand.size());
  std::partial_sort(cand.begin(), cand.begin() + static_cast<long>(k), cand.end());
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r < k; ++r) out.push_back(cand[r].second);
  return out;
}

/// Symmetric k-NN graph (union of directed k-NN relations) with pullback
/// edge weights.
inline GeodesicGraph build_geodesic_graph(const Matrix& latents, const MetricField& metric, const GraphParams& params,
                                          unsigned threads = 1) {
  const auto n = static_cast<std::size_t>(latents.rows());
  if (n < 2) fail(ErrorCode::TooFewPoints, "geodesic graph needs at least 2 points");
  if (params.k < 1 || params.k >= n) {
    fail(ErrorCode::TooFewPoints, "k = " + std::to_string(params.k) + " must lie in [1, N-1] for N = " + std::to_string(n));
  }
  std::vector<std::vector<std::size_t>> knn(n);
  parallel_for(n, threads, [&](std::size_t i) { knn[i] = nearest_neighbors(latents, i, params.k); });

  std::set<std::pair<std::size_t, std::size_t>> undirected;
  for (std::size_t i = 0; i < n; ++i) {
    for (auto j : knn[i]) undirected.emplace(std::min(i, j), std::max(i, j));
  }
  const std::vector<std::pair<std::size_t, std::size_t>> edges(undirected.begin(), undirected.end());
  std::vector<double> weights(edges.size());
  parallel_for(edges.size(), threads, [&](std::size_t e) {
    const auto [i, j] = edges[e];
    weights[e] = edge_weight(latents.row(static_cast<long>(i)).transpose(), latents.row(static_cast<long>(j)).transpose(),
                             metric, params.eps);
  });

  GeodesicGraph g;
  g.nodes = latents;
  g.eps = params.eps;
  g.adjacency.resize(n);
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const auto [i, j] = edges[e];
    g.adjacency[i].push_back({j, weights[e]});
    g.adjacency[j].push_back({i, weights[e]});
  }
  for (auto& adj : g.adjacency) {
    std::sort(adj.begin(), adj.end(), [](const GraphEdge& a, const GraphEdge& b) { return a.to < b.to; });
  }
  return g;
}

/// Single-source shortest-path lengths by label-setting with a binary heap.
/// Unreachable nodes get +infinity. Equal tentative distances pop in
/// ascending node order.
inline std::vector<double> shortest_paths(const GeodesicGraph& graph, std::size_t source) {
  const std::size_t n = graph.size();
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  std::vector<bool> settled(n, false);
  using Entry = std::pair<double, std::size_t>;
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> heap;
  dist[source] = 0.0;
  heap.emplace(0.0, source);
  while (!heap.empty()) {
    const auto [d, u] = heap.top();
    heap.pop();
    if (settled[u]) continue;
    settled[u] = true;
    for (const auto& e : graph.adjacency[u]) {
      const double alt = d + e.weight;
      if (alt < dist[e.to]) {
        dist[e.to] = alt;
        heap.emplace(alt, e.to);
      }
    }
  }
  return dist;
}

inline double geodesic_distance(const GeodesicGraph& graph, std::size_t i, std::size_t j) {
  if (i >= graph.size() || j >= graph.size()) fail(ErrorCode::OutOfRange, "node index out of range");
  if (i == j) return 0.0;
  const double d = shortest_paths(graph, i)[j];
  if (!std::isfinite(d)) {
    fail(ErrorCode::Disconnected, "nodes " + std::to_string(i) + " and " + std::to_string(j) + " are disconnected");
  }
  return d;
}

/// Number of connected components (isolated nodes count as components).
inline std::size_t connected_components(const GeodesicGraph& graph) {
  std::vector<bool> seen(graph.size(), false);
  std::size_t components = 0;
  for (std::size_t s = 0; s < graph.size(); ++s) {
    if (seen[s]) continue;
    ++components;
    std::vector<std::size_t> stack{s};
    seen[s] = true;
    while (!stack.empty()) {
      const auto u = stack.back();
      stack.pop_back();
      for (const auto& e : graph.adjacency[u]) {
        if (!seen[e.to]) {
          seen[e.to] = true;
          stack.push_back(e.to);
        }
      }
    }
  }
  return components;
}

/// rho = d_geo / d_euc between two graph nodes.
inline double distortion_ratio(const GeodesicGraph& graph, std::size_t i, std::size_t j) {
  const double euc = graph.euclidean(i, j);
  if (!(euc > 0.0)) fail(ErrorCode::CoincidentPoints, "nodes " + std::to_string(i) + " and " + std::to_string(j) + " coincide");
  return geodesic_distance(graph, i, j) / euc;
}

// ---------------------------------------------------------------------------
// Ensemble uncertainty and Fisher-Rao distance

struct UncertaintySummary {
  Vector mean;      ///< ensemble-mean posterior mean
  Vector variance;  ///< aggregated per-dimension variance
  double uncertainty = 0.0;  ///< U = mean log variance
};

/// Law of total variance over member posteriors: mean of member variances
/// plus population variance of member means.
inline UncertaintySummary total_variance(std::span<const GaussianPosterior> members) {
  if (members.empty()) fail(ErrorCode::UntrainedEnsemble, "total variance over an empty ensemble");
  const long d = members.front().mean.size();
  const double m = static_cast<double>(members.size());
  Vector mean = Vector::Zero(d);
  Vector within = Vector::Zero(d);
  for (const auto& p : members) {
    mean += p.mean;
    within += p.logvar.array().exp().matrix();
  }
  mean /= m;
  within /= m;
  Vector between = Vector::Zero(d);
  for (const auto& p : members) between += (p.mean - mean).array().square().matrix();
  between /= m;
  UncertaintySummary s;
  s.mean = mean;
  s.variance = within + between;
  s.uncertainty = s.variance.array().log().mean();
  return s;
}

/// Encodes preprocessed-or-raw hidden rows with every member and aggregates.
/// `hidden_rows` are raw hidden states; each member applies its own
/// preprocessing.
inline std::vector<UncertaintySummary> ensemble_summaries(const VaeEnsemble& ensemble, const Matrix& hidden_rows) {
  if (ensemble.empty()) fail(ErrorCode::UntrainedEnsemble, "ensemble has no members");
  std::vector<std::pair<Matrix, Matrix>> per_member;
  for (const auto& vae : ensemble.members) per_member.push_back(encode_rows(vae, vae.preprocess(hidden_rows)));
  std::vector<UncertaintySummary> out;
  out.reserve(static_cast<std::size_t>(hidden_rows.rows()));
  std::vector<GaussianPosterior> posts(ensemble.size());
  for (long r = 0; r < hidden_rows.rows(); ++r) {
    for (std::size_t a = 0; a < ensemble.size(); ++a) {
      posts[a] = {per_member[a].first.row(r).transpose(), per_member[a].second.row(r).transpose()};
    }
    out.push_back(total_variance(posts));
  }
  return out;
}

/// Closed-form Fisher-Rao distance between diagonal Gaussians,
/// sqrt(sum_i 2 arccosh^2(V_i)).
inline double fisher_rao_distance(const Vector& mean_a, const Vector& var_a, const Vector& mean_b, const Vector& var_b) {
  double sum = 0.0;
  for (long i = 0; i < mean_a.size(); ++i) {
    if (!(var_a(i) > 0.0) || !(var_b(i) > 0.0)) {
      fail(ErrorCode::NonPositiveVariance, "Fisher-Rao distance needs positive variances");
    }
    const double sa = std::sqrt(var_a(i)), sb = std::sqrt(var_b(i));
    const double dm = mean_a(i) - mean_b(i), ds = sa - sb;
    // V - 1, so that arccosh(V) = log1p(x + sqrt(x (x + 2))) keeps precision near V = 1.
    const double x = (ds * ds + dm * dm) / (2.0 * sa * sb);
    const double a = std::log1p(x + std::sqrt(x * (x + 2.0)));
    sum += 2.0 * a * a;
  }
  return std::sqrt(sum);
}

inline double fisher_rao_distance(const UncertaintySummary& a, const UncertaintySummary& b) {
  return fisher_rao_distance(a.mean, a.variance, b.mean, b.variance);
}

// ---------------------------------------------------------------------------
// Trajectory geometry

enum class PairMode { Consecutive, All };

inline std::vector<std::pair<std::size_t, std::size_t>> step_pairs(std::size_t steps, PairMode mode) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  if (mode == PairMode::Consecutive) {
    for (std::size_t t = 0; t + 1 < steps; ++t) pairs.emplace_back(t, t + 1);
  } else {
    for (std::size_t a = 0; a < steps; ++a) {
      for (std::size_t b = a + 1; b < steps; ++b) pairs.emplace_back(a, b);
    }
  }
  return pairs;
}

struct TrajectoryGeometry {
  double rho = 1.0;
  double dfr = 0.0;
  double ubar = 0.0;
  double contrast = 0.0;
  std::size_t rho_pairs = 0;  ///< pairs that contributed to rho

  /// C = d_FR / exp(U), the information-geometric contrast.
  static double contrast_of(double dfr, double ubar) { return dfr / std::exp(ubar); }
};

/// Averages over the trajectory's step pairs. `nodes[t]` is the graph node of
/// step t and `steps[t]` its ensemble summary. Coincident or disconnected
/// pairs are skipped for rho; when none remain, rho is 1.
inline TrajectoryGeometry trajectory_geometry(const GeodesicGraph& graph, std::span<const std::size_t> nodes,
                                              std::span<const UncertaintySummary> steps, PairMode mode) {
  if (steps.size() < 2 || nodes.size() != steps.size()) {
    fail(ErrorCode::SingleStepTrajectory, "trajectory geometry needs at least 2 steps");
  }
  const auto pairs = step_pairs(steps.size(), mode);
  TrajectoryGeometry g;
  double rho_sum = 0.0, dfr_sum = 0.0;
  std::vector<std::vector<double>> dist_cache(steps.size());
  for (const auto& [a, b] : pairs) {
    dfr_sum += fisher_rao_distance(steps[a], steps[b]);
    const double euc = graph.euclidean(nodes[a], nodes[b]);
    if (!(euc > 0.0)) continue;
    if (dist_cache[a].empty()) dist_cache[a] = shortest_paths(graph, nodes[a]);
    const double geo = dist_cache[a][nodes[b]];
    if (!std::isfinite(geo)) continue;
    rho_sum += geo / euc;
    ++g.rho_pairs;
  }
  g.rho = g.rho_pairs > 0 ? rho_sum / static_cast<double>(g.rho_pairs) : 1.0;
  g.dfr = dfr_sum / static_cast<double>(pairs.size());
  double u = 0.0;
  for (const auto& s : steps) u += s.uncertainty;
  g.ubar = u / static_cast<double>(steps.size());
  g.contrast = TrajectoryGeometry::contrast_of(g.dfr, g.ubar);
  return g;
}

/// Stacks ensemble-mean latents into an N x d_z matrix.
inline Matrix latent_matrix(std::span<const UncertaintySummary> summaries) {
  if (summaries.empty()) return Matrix(0, 0);
  Matrix z(static_cast<long>(summaries.size()), summaries.front().mean.size());
  for (std::size_t i = 0; i < summaries.size(); ++i) z.row(static_cast<long>(i)) = summaries[i].mean.transpose();
  return z;
}

}  // namespace geofaith
