#pragma once

// Detector construction: density clustering of trajectories in (rho, C)
// space, step-level fused scoring, and the bootstrapping loop that grows the
// labeled step set with high-confidence samples only.

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "geofaith/entropy_dynamics.hpp"
#include "geofaith/error.hpp"
#include "geofaith/manifold_geometry.hpp"
#include "geofaith/trace_store.hpp"

namespace geofaith {

// ---------------------------------------------------------------------------
// Density clustering

struct ClusterParams {
  double radius = 0.5;
  std::size_t min_pts = 5;
  double suspicion_margin = 0.5;  ///< standardized rho units below the median
  bool standardize = true;
};

struct ClusterAssignment {
  static constexpr int kNoise = -1;

  std::vector<int> cluster;             ///< per point; kNoise for noise
  std::vector<bool> core;               ///< per point
  std::vector<bool> suspicious_cluster; ///< per cluster id
  std::vector<bool> suspicious;         ///< per point: noise or in a suspicious cluster
  std::vector<std::pair<double, double>> standardized;  ///< clustering coordinates

  std::size_t cluster_count() const { return suspicious_cluster.size(); }
  std::size_t noise_count() const {
    return static_cast<std::size_t>(std::count(cluster.begin(), cluster.end(), kNoise));
  }
};

namespace detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

/// Density-reachability clustering over (rho, C) rows. A point is core when
/// at least min_pts points (itself included) lie within `radius`; clusters
/// are grown from cores in ascending index order with FIFO expansion, so a
/// border point joins the first cluster that reaches it. Noise points and
/// clusters whose mean standardized rho lies more than `suspicion_margin`
/// below the dataset median are suspicious.
inline ClusterAssignment density_cluster(std::span<const std::pair<double, double>> features,
                                         const ClusterParams& params) {
  const std::size_t n = features.size();
  ClusterAssignment out;
  out.cluster.assign(n, ClusterAssignment::kNoise);
  out.core.assign(n, false);
  out.suspicious.assign(n, false);
  out.standardized.assign(features.begin(), features.end());
  if (n == 0) return out;

  if (params.standardize) {
    double mx = 0, my = 0;
    for (const auto& [x, y] : features) {
      mx += x;
      my += y;
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double vx = 0, vy = 0;
    for (const auto& [x, y] : features) {
      vx += (x - mx) * (x - mx);
      vy += (y - my) * (y - my);
    }
    const double sx = std::sqrt(vx / static_cast<double>(n));
    const double sy = std::sqrt(vy / static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
      out.standardized[i] = {sx > 0 ? (features[i].first - mx) / sx : 0.0,
                             sy > 0 ? (features[i].second - my) / sy : 0.0};
    }
  }
  const auto& pts = out.standardized;
  const double r2 = params.radius * params.radius;
  std::vector<std::vector<std::size_t>> neighbors(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double dx = pts[i].first - pts[j].first;
      const double dy = pts[i].second - pts[j].second;
      if (dx * dx + dy * dy <= r2) neighbors[i].push_back(j);
    }
    out.core[i] = neighbors[i].size() >= params.min_pts;
  }

  int next_id = 0;
  for (std::size_t seed = 0; seed < n; ++seed) {
    if (!out.core[seed] || out.cluster[seed] != ClusterAssignment::kNoise) continue;
    const int id = next_id++;
    std::deque<std::size_t> queue{seed};
    out.cluster[seed] = id;
    while (!queue.empty()) {
      const std::size_t u = queue.front();
      queue.pop_front();
      if (!out.core[u]) continue;
      for (std::size_t v : neighbors[u]) {
        if (out.cluster[v] != ClusterAssignment::kNoise) continue;
        out.cluster[v] = id;
        queue.push_back(v);
      }
    }
  }

  std::vector<double> rhos;
  for (const auto& p : pts) rhos.push_back(p.first);
  const double med = detail::median(rhos);
  out.suspicious_cluster.assign(static_cast<std::size_t>(next_id), false);
  for (int id = 0; id < next_id; ++id) {
    double sum = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (out.cluster[i] == id) {
        sum += pts[i].first;
        ++count;
      }
    }
    out.suspicious_cluster[static_cast<std::size_t>(id)] = sum / static_cast<double>(count) < med - params.suspicion_margin;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const int c = out.cluster[i];
    out.suspicious[i] = c == ClusterAssignment::kNoise || out.suspicious_cluster[static_cast<std::size_t>(c)];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Step features

struct StepFeatures {
  double rho_local = 1.0;
  double s_temp = 1.0;
  double dfr_local = 0.0;
  double u_local = 0.0;

  std::array<double, 4> as_array() const { return {rho_local, s_temp, dfr_local, u_local}; }
};

/// Predictive entropy of every step's answer distribution.
inline std::vector<double> entropy_trace(const Trajectory& t) {
  std::vector<double> trace;
  trace.reserve(t.steps.size());
  for (const auto& s : t.steps) {
    if (s.answer_dist.empty()) {
      fail(ErrorCode::EntropyUnavailable, "trajectory " + t.id + " has no answer distributions (K = 0)");
    }
    std::vector<double> p(s.answer_dist.begin(), s.answer_dist.end());
    trace.push_back(predictive_entropy(p));
  }
  return trace;
}

inline Matrix hidden_rows(const Trajectory& t) {
  const long d = t.steps.empty() ? 0 : static_cast<long>(t.steps.front().hidden_state.size());
  Matrix rows(static_cast<long>(t.steps.size()), d);
  for (std::size_t i = 0; i < t.steps.size(); ++i) {
    for (long j = 0; j < d; ++j) rows(static_cast<long>(i), j) = t.steps[i].hidden_state[static_cast<std::size_t>(j)];
  }
  return rows;
}

struct FeatureParams {
  GraphParams graph;
  PatternConfig pattern;
  ScaleHead scale_head = ScaleHead::Sigma;
};

/// Geometric step features of one trajectory. Local rho and d_FR use the
/// pair (t-1, t) on a k-NN graph over the trajectory's own latents (pair
/// (0, 1) for the first step); k is capped at T-1. s_temp is left at 1.
inline std::vector<StepFeatures> step_geometry_features(const VaeEnsemble& ensemble, const Trajectory& t,
                                                        const FeatureParams& params) {
  const auto summaries = ensemble_summaries(ensemble, hidden_rows(t));
  const std::size_t steps = t.steps.size();
  std::vector<StepFeatures> out(steps);
  for (std::size_t i = 0; i < steps; ++i) out[i].u_local = summaries[i].uncertainty;
  if (steps < 2) return out;

  GraphParams gp = params.graph;
  gp.k = std::min(gp.k, steps - 1);
  const Matrix latents = latent_matrix(summaries);
  const auto graph = build_geodesic_graph(latents, metric_field(ensemble, params.scale_head), gp);
  std::vector<std::vector<double>> dist(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    const std::size_t a = i == 0 ? 0 : i - 1;
    const std::size_t b = i == 0 ? 1 : i;
    out[i].dfr_local = fisher_rao_distance(summaries[a], summaries[b]);
    const double euc = graph.euclidean(a, b);
    if (!(euc > 0.0)) continue;
    if (dist[a].empty()) dist[a] = shortest_paths(graph, a);
    if (std::isfinite(dist[a][b])) out[i].rho_local = dist[a][b] / euc;
  }
  return out;
}

/// Geometric step features plus the temporal reliability score.
inline std::vector<StepFeatures> trajectory_step_features(const VaeEnsemble& ensemble, const Trajectory& t,
                                                          const FeatureParams& params) {
  const auto trace = entropy_trace(t);
  const auto temporal = temporal_scores(trace, params.pattern);
  auto out = step_geometry_features(ensemble, t, params);
  for (std::size_t i = 0; i < out.size(); ++i) out[i].s_temp = temporal[i].s_temp;
  return out;
}

// ---------------------------------------------------------------------------
// Detectors

struct StepContext {
  std::string_view trajectory_id;
  std::string_view query;
  std::span<const Step> prefix;  ///< steps 0..t
  StepFeatures features;

  std::size_t step() const { return prefix.empty() ? 0 : prefix.size() - 1; }
};

/// Scores a reasoning step's faithfulness in [0, 1].
class Detector {
 public:
  virtual ~Detector() = default;
  virtual double score(const StepContext& ctx) = 0;
  virtual std::string name() const = 0;
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct LogisticTrainOptions {
  std::size_t iterations = 2000;
  double learning_rate = 0.5;
  double l2 = 1e-3;
};

/// Logistic model over (rho_local, s_temp, dfr_local, u_local). Training keeps
/// the rho and s_temp weights nonnegative, so scores are nondecreasing in
/// both features.
class BaselineDetector final : public Detector {
 public:
  static constexpr std::size_t kFeatures = 4;

  BaselineDetector() = default;

  static BaselineDetector zero() {
    BaselineDetector d;
    d.trained_ = true;
    return d;
  }

  static BaselineDetector from_weights(std::array<double, kFeatures> weights, double bias,
                                       std::array<double, kFeatures> mean = {}, std::array<double, kFeatures> scale = {1, 1, 1, 1}) {
    BaselineDetector d;
    d.weights_ = weights;
    d.bias_ = bias;
    d.mean_ = mean;
    d.scale_ = scale;
    d.trained_ = true;
    return d;
  }

  bool trained() const { return trained_; }
  const std::array<double, kFeatures>& weights() const { return weights_; }
  double bias() const { return bias_; }

  double score_features(const StepFeatures& f) const {
    if (!trained_) fail(ErrorCode::UntrainedDetector, "baseline detector has no weights");
    const auto x = f.as_array();
    double logit = bias_;
    for (std::size_t i = 0; i < kFeatures; ++i) logit += weights_[i] * (x[i] - mean_[i]) / scale_[i];
    return sigmoid(logit);
  }

  double score(const StepContext& ctx) override { return score_features(ctx.features); }
  std::string name() const override { return "baseline"; }

  /// Full-batch gradient descent on the mean logistic loss; label true means
  /// faithful.
  void train(std::span<const StepFeatures> features, const std::vector<bool>& labels,
             const LogisticTrainOptions& opt = {}) {
    const std::size_t n = features.size();
    if (n == 0 || labels.size() != n) fail(ErrorCode::UntrainedDetector, "no labeled steps to train the baseline detector");
    std::vector<std::array<double, kFeatures>> x(n);
    for (std::size_t i = 0; i < n; ++i) x[i] = features[i].as_array();
    for (std::size_t k = 0; k < kFeatures; ++k) {
      double m = 0, v = 0;
      for (const auto& row : x) m += row[k];
      m /= static_cast<double>(n);
      for (const auto& row : x) v += (row[k] - m) * (row[k] - m);
      const double s = std::sqrt(v / static_cast<double>(n));
      mean_[k] = m;
      scale_[k] = s > 1e-12 ? s : 1.0;
    }
    for (auto& row : x) {
      for (std::size_t k = 0; k < kFeatures; ++k) row[k] = (row[k] - mean_[k]) / scale_[k];
    }
    weights_.fill(0.0);
    bias_ = 0.0;
    for (std::size_t it = 0; it < opt.iterations; ++it) {
      std::array<double, kFeatures> gw{};
      double gb = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double logit = bias_;
        for (std::size_t k = 0; k < kFeatures; ++k) logit += weights_[k] * x[i][k];
        const double err = sigmoid(logit) - (labels[i] ? 1.0 : 0.0);
        for (std::size_t k = 0; k < kFeatures; ++k) gw[k] += err * x[i][k];
        gb += err;
      }
      for (std::size_t k = 0; k < kFeatures; ++k) {
        weights_[k] -= opt.learning_rate * (gw[k] / static_cast<double>(n) + opt.l2 * weights_[k]);
      }
      bias_ -= opt.learning_rate * gb / static_cast<double>(n);
      weights_[0] = std::max(0.0, weights_[0]);
      weights_[1] = std::max(0.0, weights_[1]);
    }
    trained_ = true;
  }

  nlohmann::ordered_json to_json() const {
    return {{"kind", "baseline-logistic"}, {"weights", weights_}, {"bias", bias_}, {"mean", mean_}, {"scale", scale_}};
  }

  static BaselineDetector from_json(const nlohmann::json& j) {
    return from_weights(j.at("weights").get<std::array<double, kFeatures>>(), j.at("bias").get<double>(),
                        j.at("mean").get<std::array<double, kFeatures>>(),
                        j.at("scale").get<std::array<double, kFeatures>>());
  }

 private:
  std::array<double, kFeatures> weights_{};
  double bias_ = 0.0;
  std::array<double, kFeatures> mean_{};
  std::array<double, kFeatures> scale_{1, 1, 1, 1};
  bool trained_ = false;
};

/// Fixed-score detector; handy for tests and ablations.
class ConstantDetector final : public Detector {
 public:
  explicit ConstantDetector(double value) : value_(value) {}
  double score(const StepContext&) override { return value_; }
  std::string name() const override { return "constant"; }

 private:
  double value_;
};

// ---------------------------------------------------------------------------
// Fusion, refinement, bootstrapping

struct RefineConfig {
  double alpha = 0.7;
  double eta = 0.5;
  double decision_threshold = 0.5;  ///< s_det above this labels a step faithful
};

/// s = alpha * s_det + (1 - alpha) * s_temp.
inline double fused_score(double s_det, double s_temp, double alpha) {
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in_unit(s_det) || !in_unit(s_temp) || !in_unit(alpha)) {
    fail(ErrorCode::OutOfRange, "fused_score inputs must lie in [0, 1]");
  }
  return alpha * s_det + (1.0 - alpha) * s_temp;
}

struct AnnotatedStep {
  std::string trajectory_id;
  std::size_t step = 0;
  double s_det = 0.0;
  double s_temp = 0.0;
  double s_fused = 0.0;
  bool retained = false;
  StepLabel label = StepLabel::Uncertain;
  int cluster = ClusterAssignment::kNoise;
};

/// A trajectory queued for refinement with its precomputed step features.
struct ScoredTrajectory {
  const Trajectory* trajectory = nullptr;
  std::vector<StepFeatures> features;
  int cluster = ClusterAssignment::kNoise;
};

/// Scores every step of every given trajectory; retained iff s_t > eta.
inline std::vector<AnnotatedStep> refine_group(std::span<const ScoredTrajectory> suspicious, Detector& detector,
                                               const RefineConfig& cfg) {
  std::vector<AnnotatedStep> out;
  for (const auto& st : suspicious) {
    const Trajectory& t = *st.trajectory;
    for (std::size_t i = 0; i < t.steps.size(); ++i) {
      StepContext ctx{t.id, t.query, std::span<const Step>(t.steps.data(), i + 1), st.features[i]};
      const double s_det = detector.score(ctx);
      if (!(s_det >= 0.0 && s_det <= 1.0)) {
        fail(ErrorCode::DetectorFailure, detector.name() + " returned score outside [0, 1]");
      }
      AnnotatedStep a;
      a.trajectory_id = t.id;
      a.step = i;
      a.s_det = s_det;
      a.s_temp = st.features[i].s_temp;
      a.s_fused = fused_score(s_det, a.s_temp, cfg.alpha);
      a.retained = a.s_fused > cfg.eta;
      a.label = s_det > cfg.decision_threshold ? StepLabel::Faithful : StepLabel::Unfaithful;
      a.cluster = st.cluster;
      out.push_back(std::move(a));
    }
  }
  return out;
}

struct BootstrapSample {
  std::string trajectory_id;
  std::size_t step = 0;
  StepLabel label = StepLabel::Uncertain;
  std::size_t round = 0;  ///< 0 for seed annotations
  std::optional<double> s_det;
  std::optional<double> s_temp;
  std::optional<double> s_fused;
  int cluster = ClusterAssignment::kNoise;
};

struct BootstrapState {
  std::size_t round = 0;
  std::vector<BootstrapSample> samples;

  bool contains(const std::string& id, std::size_t step) const {
    return std::any_of(samples.begin(), samples.end(),
                       [&](const BootstrapSample& s) { return s.trajectory_id == id && s.step == step; });
  }

  std::set<std::pair<std::string, std::size_t>> keys() const {
    std::set<std::pair<std::string, std::size_t>> k;
    for (const auto& s : samples) k.emplace(s.trajectory_id, s.step);
    return k;
  }
};

/// Seed set D^(0): every step carrying a faithful/unfaithful annotation.
inline BootstrapState seed_state(const Dataset& ds) {
  BootstrapState state;
  for (const auto& t : ds.trajectories) {
    for (const auto& s : t.steps) {
      if (s.label && *s.label != StepLabel::Uncertain) state.samples.push_back({t.id, s.index, *s.label, 0, {}, {}, {}, ClusterAssignment::kNoise});
    }
  }
  return state;
}

/// D^(r) = D^(r-1) + {refined steps with s_t > eta}, deduplicated by
/// (trajectory id, step). Returns the refined annotations through `annotated`
/// when non-null.
inline BootstrapState bootstrap_round(const BootstrapState& state, std::span<const ScoredTrajectory> suspicious,
                                      Detector& detector, const RefineConfig& cfg,
                                      std::vector<AnnotatedStep>* annotated = nullptr) {
  BootstrapState next = state;
  next.round = state.round + 1;
  auto keys = state.keys();
  const auto refined = refine_group(suspicious, detector, cfg);
  for (const auto& a : refined) {
    if (!a.retained) continue;
    if (!keys.emplace(a.trajectory_id, a.step).second) continue;
    next.samples.push_back({a.trajectory_id, a.step, a.label, next.round, a.s_det, a.s_temp, a.s_fused, a.cluster});
  }
  if (annotated) *annotated = refined;
  return next;
}

inline nlohmann::ordered_json to_json(const BootstrapState& state) {
  nlohmann::ordered_json samples = nlohmann::ordered_json::array();
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr); };
  for (const auto& s : state.samples) {
    samples.push_back({{"traj_id", s.trajectory_id},
                       {"step", s.step},
                       {"label", to_string(s.label)},
                       {"round", s.round},
                       {"s_det", opt(s.s_det)},
                       {"s_temp", opt(s.s_temp)},
                       {"s_fused", opt(s.s_fused)},
                       {"cluster", s.cluster}});
  }
  return {{"version", 1}, {"round", state.round}, {"samples", samples}};
}

inline BootstrapState bootstrap_state_from_json(const nlohmann::json& j) {
  BootstrapState state;
  state.round = j.at("round").get<std::size_t>();
  auto opt = [](const nlohmann::json& v) { return v.is_null() ? std::optional<double>{} : std::optional<double>(v.get<double>()); };
  for (const auto& s : j.at("samples")) {
    const auto label = parse_step_label(s.at("label").get<std::string>());
    if (!label) fail(ErrorCode::CorruptBinary, "bad label in bootstrap state");
    state.samples.push_back({s.at("traj_id").get<std::string>(), s.at("step").get<std::size_t>(), *label,
                             s.at("round").get<std::size_t>(), opt(s.at("s_det")), opt(s.at("s_temp")),
                             opt(s.at("s_fused")), s.at("cluster").get<int>()});
  }
  return state;
}

}  // namespace geofaith
