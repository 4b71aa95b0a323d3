#include <cmath>
#include <functional>
#include <numbers>

#include <gtest/gtest.h>

#include "fixture_gen.hpp"
#include "geometry_oracles.hpp"
#include "geofaith/manifold_geometry.hpp"
#include "test_support.hpp"

namespace geofaith {
namespace {

using testing::circle;
using testing::circle_ensemble;
using testing::enumerate_paths;
using testing::graph_from_edges;
using testing::HalfPlaneMetric;
using testing::integrated_fisher_rao;

struct LinearChart {
  Matrix j;
  Matrix jacobian(const Vector&) const { return j; }
};

Matrix stacked(const Matrix& mean_jac, long out_dim) {
  Matrix j = Matrix::Zero(mean_jac.rows() + out_dim, mean_jac.cols());
  j.topRows(mean_jac.rows()) = mean_jac;
  return j;
}

TEST(PullbackMetric, LinearDecoderScalesIdentity) {
  const std::vector<LinearChart> one{{stacked(2.0 * Matrix::Identity(3, 3), 3)}};
  EXPECT_EQ(pullback_metric(std::span<const LinearChart>(one), Vector::Zero(3)).g, 4.0 * Matrix::Identity(3, 3));
  const std::vector<LinearChart> identity{{stacked(Matrix::Identity(2, 2), 2)}};
  EXPECT_EQ(pullback_metric(std::span<const LinearChart>(identity), Vector::Zero(2)).g, Matrix::Identity(2, 2));
}

TEST(PullbackMetric, AveragesOverMembers) {
  const std::vector<LinearChart> two{{stacked(Matrix::Identity(2, 2), 2)},
                                     {stacked(std::sqrt(3.0) * Matrix::Identity(2, 2), 2)}};
  const Matrix g = pullback_metric(std::span<const LinearChart>(two), Vector::Zero(2)).g;
  EXPECT_LT((g - 2.0 * Matrix::Identity(2, 2)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(PullbackMetric, EmptyEnsembleFails) {
  const std::vector<LinearChart> none;
  EXPECT_GEOFAITH_ERROR(pullback_metric(std::span<const LinearChart>(none), Vector::Zero(2)), UntrainedEnsemble);
}

TrainedVae random_decoder(std::uint64_t seed) {
  Rng rng(seed);
  TrainedVae vae;
  vae.config.hidden_widths = {6, 5};
  vae.params = init_parameters(4, {6, 5}, 3, rng);
  vae.standardization = {Vector::Zero(4), Vector::Ones(4), 1e-8};
  return vae;
}

TEST(DecoderJacobian, MatchesFiniteDifferencesForBothScaleHeads) {
  for (auto head : {ScaleHead::Sigma, ScaleHead::LogVariance}) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const auto vae = random_decoder(seed);
      Rng rng(seed + 50);
      Vector z(3);
      for (long i = 0; i < 3; ++i) z(i) = rng.normal();
      const Matrix analytic = decoder_jacobian(vae, z, head);
      const Matrix numeric =
          finite_difference_jacobian([&](const Vector& p) { return decoder_map(vae, p, head); }, z, 1e-5);
      EXPECT_LT((analytic - numeric).norm() / (analytic.norm() + numeric.norm()), 1e-4) << "seed " << seed;
    }
  }
}

TEST(PullbackMetric, TrainedEnsembleIsSymmetricPsd) {
  Rng rng(2);
  const auto ens = circle_ensemble(circle(200, 2.0, 8, 0.02, rng), 3);
  const auto field = metric_field(ens);
  for (int i = 0; i < 1000; ++i) {
    Vector z(2);
    z << rng.normal(0.0, 2.0), rng.normal(0.0, 2.0);
    const Matrix g = field(z);
    EXPECT_LT((g - g.transpose()).cwiseAbs().maxCoeff(), 1e-9);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(g);
    EXPECT_GE(eig.eigenvalues().minCoeff(), -1e-9);
  }
}

TEST(EdgeWeight, HandCases) {
  Vector a = Vector::Zero(2), b(2);
  b << 1.0, 0.0;
  EXPECT_DOUBLE_EQ(edge_weight(a, b, identity_metric(), 0.0), 1.0);
  const MetricField four = [](const Vector& z) { return Matrix(4.0 * Matrix::Identity(z.size(), z.size())); };
  EXPECT_DOUBLE_EQ(edge_weight(a, b, four, 0.0), 2.0);
  EXPECT_DOUBLE_EQ(edge_weight(a, a, identity_metric(), 1e-12), 1e-6);
}

TEST(EdgeWeight, MetricIsEvaluatedAtMidpoint) {
  const MetricField scaled = [](const Vector& z) { return Matrix(z(0) * z(0) * Matrix::Identity(1, 1)); };
  Vector a(1), b(1);
  a << 1.0;
  b << 3.0;
  EXPECT_DOUBLE_EQ(edge_weight(a, b, scaled, 0.0), 4.0);
}

TEST(GeodesicGraph, CollinearPointsWithKOneFormAPath) {
  Matrix z(3, 1);
  z << 0.0, 1.0, 2.0;
  const auto g = build_geodesic_graph(z, identity_metric(), {1, 0.0});
  EXPECT_EQ(g.edge_count(), 2u);
  EXPECT_TRUE(g.adjacency[0].size() == 1 && g.adjacency[0][0].to == 1);
  EXPECT_DOUBLE_EQ(g.adjacency[0][0].weight, g.adjacency[2][0].weight);
  EXPECT_DOUBLE_EQ(distortion_ratio(g, 0, 2), 1.0);
  EXPECT_DOUBLE_EQ(distortion_ratio(g, 0, 1), 1.0);
}

TEST(GeodesicGraph, KOfNMinusOneIsComplete) {
  Rng rng(3);
  const Matrix z = detail::normal_matrix(10, 3, rng);
  const auto g = build_geodesic_graph(z, identity_metric(), {9, 1e-8});
  EXPECT_EQ(g.edge_count(), 45u);
}

TEST(GeodesicGraph, WeightsAreSymmetricAndFloored) {
  Rng rng(4);
  const Matrix z = detail::normal_matrix(40, 2, rng);
  const auto g = build_geodesic_graph(z, identity_metric(), {4, 1e-8});
  for (std::size_t i = 0; i < g.size(); ++i) {
    EXPECT_FALSE(g.isolated(i));
    for (const auto& e : g.adjacency[i]) {
      EXPECT_GE(e.weight, std::sqrt(1e-8));
      const auto& back = g.adjacency[e.to];
      const auto it = std::find_if(back.begin(), back.end(), [&](const GraphEdge& b) { return b.to == i; });
      ASSERT_NE(it, back.end());
      EXPECT_EQ(it->weight, e.weight);
    }
  }
}

TEST(GeodesicGraph, InvalidSizesAreRejected) {
  EXPECT_GEOFAITH_ERROR(build_geodesic_graph(Matrix::Zero(1, 2), identity_metric(), {1, 1e-8}), TooFewPoints);
  EXPECT_GEOFAITH_ERROR(build_geodesic_graph(Matrix::Random(3, 2), identity_metric(), {3, 1e-8}), TooFewPoints);
}

TEST(GeodesicGraph, VaeEmbeddedCircleIsConnected) {
  Rng rng(5);
  const Matrix x = circle(200, 2.0, 8, 0.02, rng);
  const auto ens = circle_ensemble(x, 1);
  const auto summaries = ensemble_summaries(ens, x);
  const auto g = build_geodesic_graph(latent_matrix(summaries), metric_field(ens), {5, 1e-8});
  EXPECT_EQ(connected_components(g), 1u);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_FALSE(g.isolated(i));
}

TEST(GeodesicDistance, ThreeNodeHandCase) {
  const auto g = graph_from_edges(3, {{0, 1, 1.0}, {1, 2, 1.0}, {0, 2, 3.0}});
  EXPECT_EQ(geodesic_distance(g, 0, 2), 2.0);
  EXPECT_EQ(geodesic_distance(g, 1, 1), 0.0);
}

TEST(GeodesicDistance, DisconnectedComponentsFail) {
  const auto g = graph_from_edges(4, {{0, 1, 1.0}, {2, 3, 1.0}});
  EXPECT_GEOFAITH_ERROR(geodesic_distance(g, 0, 3), Disconnected);
  EXPECT_EQ(connected_components(g), 2u);
}

TEST(GeodesicDistance, EqualsExhaustiveEnumerationOnRandomSmallGraphs) {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.index(7);
    std::vector<std::tuple<std::size_t, std::size_t, double>> edges;
    for (std::size_t a = 0; a < n; ++a) {
      for (std::size_t b = a + 1; b < n; ++b) {
        if (rng.uniform() < 0.5) edges.emplace_back(a, b, rng.uniform(0.01, 5.0));
      }
    }
    const auto g = graph_from_edges(n, edges);
    for (std::size_t s = 0; s < n; ++s) {
      const auto dist = shortest_paths(g, s);
      for (std::size_t t = 0; t < n; ++t) {
        const double brute = s == t ? 0.0 : enumerate_paths(g, s, t);
        EXPECT_EQ(dist[t], brute) << "trial " << trial << " " << s << "->" << t;
      }
    }
  }
}

TEST(DistortionRatio, IdentityMetricNeverBelowOne) {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix z = detail::normal_matrix(60, 3, rng);
    const auto g = build_geodesic_graph(z, identity_metric(), {3, 0.0});
    for (std::size_t s = 0; s < g.size(); ++s) {
      const auto dist = shortest_paths(g, s);
      for (std::size_t t = 0; t < g.size(); ++t) {
        if (t == s || !std::isfinite(dist[t])) continue;
        EXPECT_GE(dist[t] / g.euclidean(s, t), 1.0 - 1e-12);
      }
    }
  }
}

TEST(DistortionRatio, AdjacentNodesUnderFlatMetricGiveOne) {
  Matrix z(2, 2);
  z << 0.0, 0.0, 3.0, 4.0;
  const auto g = build_geodesic_graph(z, identity_metric(), {1, 0.0});
  EXPECT_DOUBLE_EQ(distortion_ratio(g, 0, 1), 1.0);
}

TEST(DistortionRatio, CircleAntipodesApproachHalfPi) {
  const long n = 400;
  Matrix z(n, 2);
  for (long i = 0; i < n; ++i) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n);
    z.row(i) << std::cos(a), std::sin(a);
  }
  const auto g = build_geodesic_graph(z, identity_metric(), {2, 0.0});
  EXPECT_NEAR(distortion_ratio(g, 0, n / 2), std::numbers::pi / 2.0, 0.05 * std::numbers::pi / 2.0);
}

TEST(DistortionRatio, CoincidentNodesFail) {
  Matrix z(3, 1);
  z << 0.0, 0.0, 1.0;
  const auto g = build_geodesic_graph(z, identity_metric(), {2, 1e-8});
  EXPECT_GEOFAITH_ERROR(distortion_ratio(g, 0, 1), CoincidentPoints);
}

GaussianPosterior posterior(std::vector<double> mean, std::vector<double> var) {
  GaussianPosterior p{Vector(static_cast<long>(mean.size())), Vector(static_cast<long>(var.size()))};
  for (std::size_t i = 0; i < mean.size(); ++i) {
    p.mean(static_cast<long>(i)) = mean[i];
    p.logvar(static_cast<long>(i)) = std::log(var[i]);
  }
  return p;
}

TEST(TotalVariance, HandCases) {
  const std::vector<GaussianPosterior> two{posterior({0.0}, {1.0}), posterior({2.0}, {1.0})};
  EXPECT_NEAR(total_variance(two).variance(0), 2.0, 1e-15);
  const std::vector<GaussianPosterior> one{posterior({0.3, 1.0}, {0.5, 2.0})};
  const auto s = total_variance(one);
  EXPECT_NEAR(s.variance(0), 0.5, 1e-15);
  EXPECT_NEAR(s.variance(1), 2.0, 1e-15);
  const std::vector<GaussianPosterior> e{posterior({0.0, 0.0}, {std::exp(2.0), std::exp(4.0)})};
  EXPECT_NEAR(total_variance(e).uncertainty, 3.0, 1e-12);
  EXPECT_GEOFAITH_ERROR(total_variance(std::span<const GaussianPosterior>()), UntrainedEnsemble);
}

TEST(FisherRao, HandCasesAndAxioms) {
  Vector m(1), v(1), m2(1);
  m << 0.0;
  v << 1.0;
  m2 << std::sqrt(2.0);
  EXPECT_EQ(fisher_rao_distance(m, v, m, v), 0.0);
  const double d = fisher_rao_distance(m, v, m2, v);
  EXPECT_NEAR(d, std::sqrt(2.0) * std::acosh(2.0), 1e-12);
  EXPECT_NEAR(d, 1.8624, 1e-4);
  Vector bad(1);
  bad << 0.0;
  EXPECT_GEOFAITH_ERROR(fisher_rao_distance(m, bad, m, v), NonPositiveVariance);
}

TEST(FisherRao, SymmetricAndZeroOnlyAtIdentity) {
  Rng rng(8);
  for (int i = 0; i < 200; ++i) {
    Vector ma(3), mb(3), va(3), vb(3);
    for (long j = 0; j < 3; ++j) {
      ma(j) = rng.normal();
      mb(j) = rng.normal();
      va(j) = rng.uniform(0.1, 3.0);
      vb(j) = rng.uniform(0.1, 3.0);
    }
    EXPECT_EQ(fisher_rao_distance(ma, va, mb, vb), fisher_rao_distance(mb, vb, ma, va));
    EXPECT_EQ(fisher_rao_distance(ma, va, ma, va), 0.0);
    EXPECT_GT(fisher_rao_distance(ma, va, mb, vb), 0.0);
  }
}

double closed_form_1d(double mu0, double s0, double mu1, double s1) {
  Vector ma(1), mb(1), va(1), vb(1);
  ma << mu0;
  mb << mu1;
  va << s0 * s0;
  vb << s1 * s1;
  return fisher_rao_distance(ma, va, mb, vb);
}

// Compares the closed form against shooting on a half-plane metric over random
// univariate endpoints; equal_means pins mu1 to mu0.
void expect_matches_geodesic(HalfPlaneMetric metric, bool equal_means, std::uint64_t seed) {
  Rng rng(seed);
  for (int i = 0; i < 100; ++i) {
    const double mu0 = rng.uniform(-1.5, 1.5), mu1 = equal_means ? mu0 : rng.uniform(-1.5, 1.5);
    const double s0 = rng.uniform(0.4, 2.0), s1 = rng.uniform(0.4, 2.0);
    double residual = 1.0;
    const double numeric = integrated_fisher_rao(mu0, s0, mu1, s1, &residual, metric);
    EXPECT_LT(residual, 1e-8) << i;
    EXPECT_NEAR(closed_form_1d(mu0, s0, mu1, s1), numeric, 1e-3) << i;
  }
}

TEST(FisherRao, UnivariateMatchesNumericalGeodesic) { expect_matches_geodesic(testing::kFisherMetric, false, 9); }

TEST(FisherRao, MatchesFisherGeodesicWhenMeansCoincide) { expect_matches_geodesic(testing::kFisherMetric, true, 10); }

TEST(FisherRao, ClosedFormIsGeodesicDistanceOfScaledHalfPlane) { expect_matches_geodesic({2.0, 2.0}, false, 11); }

TEST(FisherRao, WorkedValueUnderFisherMetric) {
  double residual = 1.0;
  EXPECT_NEAR(integrated_fisher_rao(0.0, 1.0, std::sqrt(2.0), 1.0, &residual), std::sqrt(2.0) * std::acosh(1.5), 1e-6);
  EXPECT_LT(residual, 1e-8);
}

TEST(TrajectoryGeometry, ContrastHandCase) {
  EXPECT_NEAR(TrajectoryGeometry::contrast_of(2.0, -1.0), 2.0 * std::numbers::e, 1e-12);
  EXPECT_NEAR(TrajectoryGeometry::contrast_of(2.0, -1.0), 5.4366, 1e-4);
}

UncertaintySummary summary(double mean, double var) {
  UncertaintySummary s;
  s.mean = Vector::Constant(2, mean);
  s.variance = Vector::Constant(2, var);
  s.uncertainty = std::log(var);
  return s;
}

TEST(TrajectoryGeometry, IdenticalStepsHaveZeroContrast) {
  Matrix z(3, 2);
  z << 0, 0, 1, 0, 2, 0;
  const auto g = build_geodesic_graph(z, identity_metric(), {2, 1e-8});
  const std::vector<UncertaintySummary> steps(3, summary(0.5, 0.7));
  const std::vector<std::size_t> same{1, 1, 1};
  const auto geo = trajectory_geometry(g, same, steps, PairMode::All);
  EXPECT_EQ(geo.dfr, 0.0);
  EXPECT_EQ(geo.contrast, 0.0);
  EXPECT_EQ(geo.rho_pairs, 0u);
}

TEST(TrajectoryGeometry, FieldsAreConsistentAndPairModesDiffer) {
  Matrix z(4, 2);
  z << 0, 0, 1, 0, 1, 1, 0, 1;
  const auto g = build_geodesic_graph(z, identity_metric(), {1, 0.0});
  const std::vector<UncertaintySummary> steps{summary(0.0, 1.0), summary(0.5, 0.8), summary(1.0, 1.2),
                                              summary(1.5, 0.9)};
  const std::vector<std::size_t> nodes{0, 1, 2, 3};
  const auto consecutive = trajectory_geometry(g, nodes, steps, PairMode::Consecutive);
  const auto all = trajectory_geometry(g, nodes, steps, PairMode::All);
  EXPECT_EQ(consecutive.rho_pairs, 3u);
  EXPECT_EQ(all.rho_pairs, 6u);
  EXPECT_DOUBLE_EQ(all.contrast, all.dfr / std::exp(all.ubar));
  double u = 0.0;
  for (const auto& s : steps) u += s.uncertainty;
  EXPECT_DOUBLE_EQ(all.ubar, u / 4.0);
  // k = 1 links 0-1, 1-2 and 0-3, so step 2 reaches step 3 the long way round.
  EXPECT_DOUBLE_EQ(consecutive.rho, 5.0 / 3.0);
  EXPECT_DOUBLE_EQ(all.rho, (6.0 + 2.0 * std::sqrt(2.0)) / 6.0);
}

TEST(TrajectoryGeometry, SingleStepFails) {
  Matrix z(2, 1);
  z << 0, 1;
  const auto g = build_geodesic_graph(z, identity_metric(), {1, 1e-8});
  const std::vector<UncertaintySummary> steps{summary(0.0, 1.0)};
  const std::vector<std::size_t> nodes{0};
  EXPECT_GEOFAITH_ERROR(trajectory_geometry(g, nodes, steps, PairMode::All), SingleStepTrajectory);
}

}  // namespace
}  // namespace geofaith
