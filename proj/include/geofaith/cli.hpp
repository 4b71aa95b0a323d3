#pragma once

// The geofaith command-line tool. Every subcommand reads its inputs from
// files, writes its outputs atomically into --output, and leaves a run.json
// describing the configuration next to them.
//
// Exit codes: 0 success, 1 analysis failure, 2 usage or I/O failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "geofaith/csv.hpp"
#include "geofaith/ensemble_store.hpp"
#include "geofaith/entropy_dynamics.hpp"
#include "geofaith/error.hpp"
#include "geofaith/external_detector.hpp"
#include "geofaith/faithfulness_pipeline.hpp"
#include "geofaith/latent_vae.hpp"
#include "geofaith/manifold_geometry.hpp"
#include "geofaith/parallel.hpp"
#include "geofaith/reward_engine.hpp"
#include "geofaith/spectral_dimension.hpp"
#include "geofaith/svg_plot.hpp"
#include "geofaith/trace_store.hpp"

namespace geofaith::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

inline constexpr const char* kToolVersion = "0.1.0";

struct Common {
  unsigned threads = 1;
  std::uint64_t seed = 0;
  std::ostream* out = &std::cout;
  std::ostream* err = &std::cerr;
};

inline std::string num(double v) { return csv::format_double(v); }

inline std::string short_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

inline void write_run_manifest(const fs::path& dir, const std::string& subcommand, const Common& c,
                               const json& config, const std::vector<std::string>& outputs) {
  const json record = {{"tool", "geofaith"},   {"version", kToolVersion}, {"subcommand", subcommand},
                       {"seed", c.seed},       {"threads", c.threads},    {"config", config},
                       {"outputs", outputs}};
  io::write_text_atomic(dir / "run.json", record.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Shared option groups

struct GraphOptions {
  std::size_t k = 10;
  double eps = 1e-8;
  std::string scale_head = "sigma";

  void add(CLI::App* app) {
    app->add_option("--k", k, "Neighbors per node in the latent k-NN graph")->check(CLI::PositiveNumber);
    app->add_option("--eps", eps, "Numerical constant added under the edge-length square root")
        ->check(CLI::NonNegativeNumber);
    app->add_option("--scale-head", scale_head, "Decoder scale output differentiated for the metric")
        ->check(CLI::IsMember({"sigma", "logvar"}));
  }

  GraphParams params() const { return {k, eps}; }
  ScaleHead head() const { return scale_head == "sigma" ? ScaleHead::Sigma : ScaleHead::LogVariance; }
  json to_json() const { return {{"k", k}, {"eps", eps}, {"scale_head", scale_head}}; }
};

struct PatternOptions {
  PatternConfig cfg;

  void add(CLI::App* app) {
    app->add_option("--window", cfg.window, "Entropy pattern window w")->check(CLI::Range(2, 100000));
    app->add_option("--flat-threshold", cfg.flat_threshold, "Flatness threshold")->check(CLI::PositiveNumber);
    app->add_option("--spike-threshold", cfg.spike_threshold, "Spike threshold")->check(CLI::PositiveNumber);
    app->add_option("--flat-weight", cfg.flat_weight, "Flatness penalty weight")->check(CLI::Range(0.0, 1.0));
    app->add_option("--spike-weight", cfg.spike_weight, "Spike penalty weight")->check(CLI::Range(0.0, 1.0));
    app->add_option("--osc-weight", cfg.osc_weight, "Oscillation penalty weight")->check(CLI::Range(0.0, 1.0));
  }

  json to_json() const {
    return {{"window", cfg.window},           {"flat_threshold", cfg.flat_threshold},
            {"spike_threshold", cfg.spike_threshold}, {"flat_weight", cfg.flat_weight},
            {"spike_weight", cfg.spike_weight}, {"osc_weight", cfg.osc_weight}};
  }
};

struct DetectorOptions {
  std::string kind = "baseline";
  std::string weights;
  std::string command;
  double alpha = 0.7;
  double eta = 0.5;
  double threshold = 0.5;

  void add(CLI::App* app, bool fusion) {
    app->add_option("--detector", kind, "Step detector")->check(CLI::IsMember({"baseline", "external"}));
    app->add_option("--detector-weights", weights,
                    "Baseline weights JSON; when absent the baseline is trained on the labeled steps");
    app->add_option("--detector-cmd", command, "Shell command of an external line-protocol detector");
    app->add_option("--threshold", threshold, "s_det above this labels a step faithful")->check(CLI::Range(0.0, 1.0));
    if (fusion) {
      app->add_option("--alpha", alpha, "Fusion weight of the detector score")->check(CLI::Range(0.0, 1.0));
      app->add_option("--eta", eta, "Retention threshold on the fused score (strict)")->check(CLI::Range(0.0, 1.0));
    }
  }

  RefineConfig refine() const { return {alpha, eta, threshold}; }
  json to_json() const {
    return {{"detector", kind}, {"detector_weights", weights}, {"detector_cmd", command},
            {"alpha", alpha},   {"eta", eta},                  {"threshold", threshold}};
  }
};

// ---------------------------------------------------------------------------
// Step feature tables

using StepKey = std::pair<std::string, std::size_t>;
using FeatureTable = std::map<StepKey, StepFeatures>;

inline FeatureTable load_step_features(const fs::path& step_geometry, const fs::path& entropy) {
  FeatureTable table;
  const auto geo = csv::Table::load(step_geometry);
  const auto id = geo.column("traj_id"), step = geo.column("step");
  const auto rho = geo.column("rho_local"), dfr = geo.column("dfr_local"), u = geo.column("u_local");
  for (std::size_t r = 0; r < geo.rows.size(); ++r) {
    StepFeatures f;
    f.rho_local = geo.number(r, rho);
    f.dfr_local = geo.number(r, dfr);
    f.u_local = geo.number(r, u);
    table[{geo.rows[r][id], static_cast<std::size_t>(geo.number(r, step))}] = f;
  }
  const auto ent = csv::Table::load(entropy);
  const auto eid = ent.column("traj_id"), estep = ent.column("step"), s_temp = ent.column("s_temp");
  for (std::size_t r = 0; r < ent.rows.size(); ++r) {
    const StepKey key{ent.rows[r][eid], static_cast<std::size_t>(ent.number(r, estep))};
    auto it = table.find(key);
    if (it == table.end()) fail(ErrorCode::IoFailure, "entropy row " + key.first + ":" + std::to_string(key.second) +
                                                          " has no step-geometry row");
    it->second.s_temp = ent.number(r, s_temp);
  }
  return table;
}

inline std::vector<StepFeatures> features_of(const FeatureTable& table, const Trajectory& t) {
  std::vector<StepFeatures> out;
  for (std::size_t i = 0; i < t.steps.size(); ++i) {
    auto it = table.find({t.id, i});
    if (it == table.end()) {
      fail(ErrorCode::IoFailure, "no step features for " + t.id + " step " + std::to_string(i));
    }
    out.push_back(it->second);
  }
  return out;
}

struct SuspiciousEntry {
  std::string id;
  int cluster = ClusterAssignment::kNoise;
};

inline std::vector<SuspiciousEntry> load_suspicious(const fs::path& clusters) {
  const auto t = csv::Table::load(clusters);
  const auto id = t.column("traj_id"), cl = t.column("cluster"), sus = t.column("suspicious");
  std::vector<SuspiciousEntry> out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    if (t.rows[r][sus] == "1") out.push_back({t.rows[r][id], static_cast<int>(t.number(r, cl))});
  }
  return out;
}

inline std::vector<ScoredTrajectory> scored_trajectories(const Dataset& ds, const std::vector<SuspiciousEntry>& entries,
                                                         const FeatureTable& features) {
  std::map<std::string, const Trajectory*> by_id;
  for (const auto& t : ds.trajectories) by_id[t.id] = &t;
  std::vector<ScoredTrajectory> out;
  for (const auto& e : entries) {
    auto it = by_id.find(e.id);
    if (it == by_id.end()) fail(ErrorCode::IoFailure, "cluster table names unknown trajectory " + e.id);
    out.push_back({it->second, features_of(features, *it->second), e.cluster});
  }
  return out;
}

/// Labeled (faithful/unfaithful) samples with their features.
struct TrainingSet {
  std::vector<StepFeatures> features;
  std::vector<bool> labels;
};

inline BaselineDetector train_baseline(const TrainingSet& set) {
  if (set.features.empty()) {
    fail(ErrorCode::UntrainedDetector, "no labeled steps to train the baseline detector; pass --detector-weights");
  }
  BaselineDetector det;
  det.train(set.features, set.labels);
  return det;
}

inline BaselineDetector load_baseline(const fs::path& path) {
  const auto bytes = io::read_file(path, ErrorCode::IoFailure);
  try {
    return BaselineDetector::from_json(nlohmann::json::parse(bytes.begin(), bytes.end()));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::IoFailure, path.string() + ": " + e.what());
  }
}

inline void require_output(const std::string& output) {
  if (output.empty()) fail(ErrorCode::Usage, "--output is required");
  io::ensure_directory(output);
}

// ---------------------------------------------------------------------------
// validate

struct ValidateOptions {
  std::string input;
  std::string output;
};

inline int cmd_validate(const ValidateOptions& o, const Common& c) {
  const Dataset ds = load_dataset(o.input);
  const auto reports = validate_dataset(ds);
  csv::Writer w({"traj_id", "code", "step", "detail"});
  std::size_t total = 0;
  for (const auto& [id, report] : reports) {
    for (const auto& v : report.violations) {
      ++total;
      const std::string step = v.step ? std::to_string(*v.step) : "";
      w.row({id, to_string(v.code), step, v.detail});
      *c.out << id << "\t" << to_string(v.code) << "\t" << (step.empty() ? "-" : step) << "\t" << v.detail << "\n";
    }
  }
  *c.out << ds.trajectories.size() << " trajectories, " << total << " violations\n";
  if (!o.output.empty()) {
    require_output(o.output);
    w.save(fs::path(o.output) / "validation.csv");
    write_run_manifest(o.output, "validate", c, {{"input", o.input}}, {"validation.csv"});
  }
  return total == 0 ? 0 : 1;
}

// ---------------------------------------------------------------------------
// pca

struct PcaOptions {
  std::string input;
  std::string output;
  std::size_t k_max = 50;
  std::size_t components = 2;
};

/// Trajectories split by the backbone layer their hidden states come from,
/// in ascending layer order.
inline std::map<int, Dataset> split_by_layer(const Dataset& ds) {
  std::map<int, Dataset> out;
  for (const auto& t : ds.trajectories) {
    auto& g = out[t.layer_index];
    g.ambient_dim = ds.ambient_dim;
    g.answer_set = ds.answer_set;
    g.trajectories.push_back(t);
  }
  return out;
}

inline int cmd_pca(const PcaOptions& o, const Common& c) {
  require_output(o.output);
  const Dataset ds = load_dataset(o.input);
  csv::Writer vr({"layer", "k", "eigenvalue", "vr"});
  for (const auto& [layer, g] : split_by_layer(ds)) {
    const auto curve = explained_variance(stack_hidden_states<Matrix>(g), o.k_max);
    for (std::size_t k = 0; k < curve.ratios.size(); ++k) {
      vr.row({std::to_string(layer), std::to_string(k + 1), num(curve.eigenvalues[k]), num(curve.ratios[k])});
      if (k < 10) *c.out << "layer " << layer << "\tVR(" << k + 1 << ") = " << short_num(curve.ratios[k]) << "\n";
    }
  }
  const Matrix x = stack_hidden_states<Matrix>(ds);
  const auto pca = pca_fit_transform(x, o.components);
  std::vector<std::string> header{"traj_id", "step"};
  for (std::size_t j = 0; j < o.components; ++j) header.push_back("pc" + std::to_string(j + 1));
  csv::Writer proj(header);
  long r = 0;
  for (const auto& t : ds.trajectories) {
    for (std::size_t i = 0; i < t.steps.size(); ++i, ++r) {
      std::vector<std::string> row{t.id, std::to_string(i)};
      for (long j = 0; j < pca.projected.cols(); ++j) row.push_back(num(pca.projected(r, j)));
      proj.row(row);
    }
  }
  vr.save(fs::path(o.output) / "variance.csv");
  proj.save(fs::path(o.output) / "projection.csv");
  write_run_manifest(o.output, "pca", c,
                     {{"input", o.input}, {"k_max", o.k_max}, {"components", o.components}},
                     {"variance.csv", "projection.csv"});
  return 0;
}

// ---------------------------------------------------------------------------
// twonn

struct TwoNNOptions {
  std::string input;
  std::string output;
  std::size_t pca = 0;
};

inline int cmd_twonn(const TwoNNOptions& o, const Common& c) {
  const Dataset ds = load_dataset(o.input);
  csv::Writer w({"layer", "group", "n", "d_hat", "n_retained"});
  *c.out << "layer\tgroup\tn\tretained\td_hat\n";
  for (const auto& [layer, by_layer] : split_by_layer(ds)) {
    std::vector<std::pair<std::string, Dataset>> groups{{"all", by_layer}};
    std::map<std::string, Dataset> by_domain;
    for (const auto& t : by_layer.trajectories) {
      auto& g = by_domain[to_string(t.domain)];
      g.ambient_dim = ds.ambient_dim;
      g.trajectories.push_back(t);
    }
    if (by_domain.size() > 1) {
      for (auto& [k, v] : by_domain) groups.emplace_back(k, std::move(v));
    }
    for (const auto& [name, g] : groups) {
      Matrix x = stack_hidden_states<Matrix>(g);
      if (o.pca > 0) x = pca_fit_transform(x, std::min<std::size_t>(o.pca, static_cast<std::size_t>(x.cols()))).projected;
      const auto est = twonn_estimate(x);
      w.row({std::to_string(layer), name, std::to_string(x.rows()), num(est.d_hat), std::to_string(est.n_retained)});
      *c.out << layer << "\t" << name << "\t" << x.rows() << "\t" << est.n_retained << "\t" << short_num(est.d_hat)
             << "\n";
    }
  }
  if (!o.output.empty()) {
    require_output(o.output);
    w.save(fs::path(o.output) / "twonn.csv");
    write_run_manifest(o.output, "twonn", c, {{"input", o.input}, {"pca", o.pca}}, {"twonn.csv"});
  }
  return 0;
}

// ---------------------------------------------------------------------------
// train-vae

struct TrainOptions {
  std::string input;
  std::string output;
  std::size_t members = 5;
  bool pool = false;
  VaeConfig cfg;
};

inline int cmd_train_vae(TrainOptions o, const Common& c) {
  require_output(o.output);
  o.cfg.seed = c.seed;
  o.cfg.validate();
  const Dataset ds = load_dataset(o.input);
  std::map<std::string, Dataset> groups;
  for (const auto& t : ds.trajectories) {
    auto& g = groups[o.pool ? std::string(kPooledGroup) : to_string(t.domain)];
    g.ambient_dim = ds.ambient_dim;
    g.trajectories.push_back(t);
  }
  EnsembleStore store;
  csv::Writer log({"group", "member", "epoch", "beta", "learning_rate", "train_loss", "validation_loss"});
  for (const auto& [key, g] : groups) {
    const Matrix x = stack_hidden_states<Matrix>(g);
    *c.out << "training " << o.members << " members for group '" << key << "' on " << x.rows() << " states\n";
    auto ensemble = train_ensemble(x, o.cfg, o.members, c.threads);
    for (std::size_t a = 0; a < ensemble.size(); ++a) {
      for (const auto& e : ensemble.members[a].log) {
        log.row({key, std::to_string(a), std::to_string(e.epoch), num(e.beta), num(e.learning_rate), num(e.train_loss),
                 num(e.validation_loss)});
      }
      const auto& last = ensemble.members[a].log.back();
      *c.out << "  member " << a << ": " << ensemble.members[a].log.size() << " epochs, best epoch "
             << ensemble.members[a].best_epoch << ", final validation loss " << short_num(last.validation_loss)
             << "\n";
    }
    store.groups.emplace(key, std::move(ensemble));
  }
  save_ensemble_store(store, o.output);
  log.save(fs::path(o.output) / "training_log.csv");
  write_run_manifest(o.output, "train-vae", c,
                     {{"input", o.input}, {"members", o.members}, {"pool", o.pool}, {"vae", to_json(o.cfg)}},
                     {"ensemble.json", "training_log.csv"});
  return 0;
}

// ---------------------------------------------------------------------------
// geometry

struct GeometryOptions {
  std::string input;
  std::string ensemble;
  std::string output;
  std::string pairs = "all";
  GraphOptions graph;
};

inline int cmd_geometry(const GeometryOptions& o, const Common& c) {
  require_output(o.output);
  const Dataset ds = load_dataset(o.input);
  const EnsembleStore store = load_ensemble_store(o.ensemble);
  const PairMode mode = o.pairs == "all" ? PairMode::All : PairMode::Consecutive;
  const std::size_t n = ds.trajectories.size();

  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) groups[store.key_for(ds.trajectories[i].domain)].push_back(i);

  std::vector<std::optional<TrajectoryGeometry>> geometry(n);
  std::vector<std::vector<StepFeatures>> step_features(n);
  for (const auto& [key, members] : groups) {
    const VaeEnsemble& ensemble = store.groups.at(key);
    std::vector<std::vector<UncertaintySummary>> summaries(members.size());
    parallel_for(members.size(), c.threads, [&](std::size_t m) {
      summaries[m] = ensemble_summaries(ensemble, hidden_rows(ds.trajectories[members[m]]));
    });
    std::vector<UncertaintySummary> all;
    std::vector<std::vector<std::size_t>> nodes(members.size());
    for (std::size_t m = 0; m < members.size(); ++m) {
      for (const auto& s : summaries[m]) {
        nodes[m].push_back(all.size());
        all.push_back(s);
      }
    }
    const auto graph = build_geodesic_graph(latent_matrix(all), metric_field(ensemble, o.graph.head()),
                                            o.graph.params(), c.threads);
    FeatureParams fp;
    fp.graph = o.graph.params();
    fp.scale_head = o.graph.head();
    parallel_for(members.size(), c.threads, [&](std::size_t m) {
      const auto& t = ds.trajectories[members[m]];
      if (t.steps.size() >= 2) geometry[members[m]] = trajectory_geometry(graph, nodes[m], summaries[m], mode);
      step_features[members[m]] = step_geometry_features(ensemble, t, fp);
    });
  }

  csv::Writer traj({"traj_id", "query", "domain", "steps", "rho", "dfr", "ubar", "contrast", "rho_pairs"});
  csv::Writer steps({"traj_id", "step", "rho_local", "dfr_local", "u_local"});
  std::size_t skipped = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& t = ds.trajectories[i];
    if (geometry[i]) {
      const auto& g = *geometry[i];
      traj.row({t.id, t.query, to_string(t.domain), std::to_string(t.steps.size()), num(g.rho), num(g.dfr),
                num(g.ubar), num(g.contrast), std::to_string(g.rho_pairs)});
    } else {
      ++skipped;
      *c.err << "note: " << t.id << " has a single step; omitted from trajectory geometry\n";
    }
    for (std::size_t s = 0; s < step_features[i].size(); ++s) {
      const auto& f = step_features[i][s];
      steps.row({t.id, std::to_string(s), num(f.rho_local), num(f.dfr_local), num(f.u_local)});
    }
  }
  traj.save(fs::path(o.output) / "geometry.csv");
  steps.save(fs::path(o.output) / "step_geometry.csv");
  *c.out << n - skipped << " trajectories scored in " << groups.size() << " ensemble group(s)\n";
  write_run_manifest(o.output, "geometry", c,
                     {{"input", o.input}, {"ensemble", o.ensemble}, {"pairs", o.pairs}, {"graph", o.graph.to_json()}},
                     {"geometry.csv", "step_geometry.csv"});
  return 0;
}

// ---------------------------------------------------------------------------
// entropy

struct EntropyOptions {
  std::string input;
  std::string output;
  PatternOptions pattern;
};

inline int cmd_entropy(const EntropyOptions& o, const Common& c) {
  require_output(o.output);
  o.pattern.cfg.validate();
  const Dataset ds = load_dataset(o.input);
  const std::size_t n = ds.trajectories.size();
  std::vector<std::vector<double>> traces(n);
  std::vector<std::vector<StepTemporalScore>> scores(n);
  parallel_for(n, c.threads, [&](std::size_t i) {
    traces[i] = entropy_trace(ds.trajectories[i]);
    scores[i] = temporal_scores(traces[i], o.pattern.cfg);
  });
  csv::Writer w({"traj_id", "step", "entropy", "flat", "spike", "oscillation", "penalty", "s_temp"});
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t s = 0; s < traces[i].size(); ++s) {
      const auto& sc = scores[i][s];
      w.row({ds.trajectories[i].id, std::to_string(s), num(traces[i][s]), std::to_string(sc.flat),
             std::to_string(sc.spike), num(sc.oscillation), num(sc.penalty), num(sc.s_temp)});
      total += sc.s_temp;
      ++count;
    }
  }
  w.save(fs::path(o.output) / "entropy.csv");
  *c.out << count << " steps, mean s_temp " << short_num(count ? total / static_cast<double>(count) : 0.0) << "\n";
  write_run_manifest(o.output, "entropy", c, {{"input", o.input}, {"pattern", o.pattern.to_json()}}, {"entropy.csv"});
  return 0;
}

// ---------------------------------------------------------------------------
// cluster

struct ClusterOptions {
  std::string geometry;
  std::string output;
  ClusterParams params;
  bool per_query = false;
};

inline int cmd_cluster(const ClusterOptions& o, const Common& c) {
  require_output(o.output);
  const auto table = csv::Table::load(o.geometry);
  const auto id = table.column("traj_id"), query = table.column("query");
  const auto rho = table.column("rho"), contrast = table.column("contrast");
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    groups[o.per_query ? table.rows[r][query] : std::string()].push_back(r);
  }
  const std::size_t n = table.rows.size();
  std::vector<int> cluster(n, ClusterAssignment::kNoise);
  std::vector<bool> core(n), suspicious(n);
  std::vector<std::pair<double, double>> standardized(n);
  int offset = 0;
  std::size_t suspicious_clusters = 0;
  for (const auto& [key, rows] : groups) {
    std::vector<std::pair<double, double>> features;
    for (auto r : rows) features.emplace_back(table.number(r, rho), table.number(r, contrast));
    const auto a = density_cluster(features, o.params);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      cluster[rows[i]] = a.cluster[i] == ClusterAssignment::kNoise ? ClusterAssignment::kNoise : a.cluster[i] + offset;
      core[rows[i]] = a.core[i];
      suspicious[rows[i]] = a.suspicious[i];
      standardized[rows[i]] = a.standardized[i];
    }
    offset += static_cast<int>(a.cluster_count());
    for (bool s : a.suspicious_cluster) suspicious_clusters += s;
  }
  csv::Writer w({"traj_id", "query", "rho", "contrast", "rho_std", "contrast_std", "cluster", "core", "suspicious"});
  std::size_t noise = 0, flagged = 0;
  for (std::size_t r = 0; r < n; ++r) {
    noise += cluster[r] == ClusterAssignment::kNoise;
    flagged += suspicious[r];
    w.row({table.rows[r][id], table.rows[r][query], table.rows[r][rho], table.rows[r][contrast],
           num(standardized[r].first), num(standardized[r].second), std::to_string(cluster[r]),
           core[r] ? "1" : "0", suspicious[r] ? "1" : "0"});
  }
  w.save(fs::path(o.output) / "clusters.csv");
  *c.out << offset << " clusters (" << suspicious_clusters << " suspicious), " << noise << " noise, " << flagged
         << " of " << n << " trajectories flagged\n";
  write_run_manifest(o.output, "cluster", c,
                     {{"geometry", o.geometry},
                      {"radius", o.params.radius},
                      {"min_pts", o.params.min_pts},
                      {"suspicion_margin", o.params.suspicion_margin},
                      {"per_query", o.per_query}},
                     {"clusters.csv"});
  return 0;
}

// ---------------------------------------------------------------------------
// refine and bootstrap

struct RefineOptions {
  std::string input;
  std::string clusters;
  std::string step_geometry;
  std::string entropy;
  std::string output;
  DetectorOptions detector;
  std::size_t rounds = 3;
  std::string state;
};

inline TrainingSet seed_training_set(const Dataset& ds, const FeatureTable& features) {
  TrainingSet set;
  for (const auto& t : ds.trajectories) {
    for (std::size_t i = 0; i < t.steps.size(); ++i) {
      const auto& label = t.steps[i].label;
      if (!label || *label == StepLabel::Uncertain) continue;
      auto it = features.find({t.id, i});
      if (it == features.end()) continue;
      set.features.push_back(it->second);
      set.labels.push_back(*label == StepLabel::Faithful);
    }
  }
  return set;
}

inline TrainingSet state_training_set(const BootstrapState& state, const FeatureTable& features) {
  TrainingSet set;
  for (const auto& s : state.samples) {
    if (s.label == StepLabel::Uncertain) continue;
    auto it = features.find({s.trajectory_id, s.step});
    if (it == features.end()) continue;
    set.features.push_back(it->second);
    set.labels.push_back(s.label == StepLabel::Faithful);
  }
  return set;
}

inline std::unique_ptr<Detector> make_detector(const DetectorOptions& o, const TrainingSet& training,
                                               std::optional<BaselineDetector>* trained = nullptr) {
  if (o.kind == "external") {
    if (o.command.empty()) fail(ErrorCode::Usage, "--detector external needs --detector-cmd");
    return std::make_unique<ExternalProcessDetector>(o.command);
  }
  auto det = o.weights.empty() ? train_baseline(training) : load_baseline(o.weights);
  if (trained) *trained = det;
  return std::make_unique<BaselineDetector>(det);
}

inline void annotated_row(csv::Writer& w, const AnnotatedStep& a, std::size_t round) {
  w.row({a.trajectory_id, std::to_string(a.step), num(a.s_det), num(a.s_temp), num(a.s_fused), a.retained ? "1" : "0",
         to_string(a.label), std::to_string(round)});
}

inline const std::vector<std::string>& annotated_header() {
  static const std::vector<std::string> h{"traj_id", "step", "s_det", "s_temp", "s_fused", "retained", "label", "round"};
  return h;
}

inline int cmd_refine(const RefineOptions& o, const Common& c) {
  require_output(o.output);
  const Dataset ds = load_dataset(o.input);
  const auto features = load_step_features(o.step_geometry, o.entropy);
  const auto suspicious = scored_trajectories(ds, load_suspicious(o.clusters), features);
  std::optional<BaselineDetector> trained;
  auto detector = make_detector(o.detector, seed_training_set(ds, features), &trained);
  const auto annotated = refine_group(suspicious, *detector, o.detector.refine());
  csv::Writer w(annotated_header());
  std::size_t retained = 0;
  for (const auto& a : annotated) {
    annotated_row(w, a, 1);
    retained += a.retained;
  }
  w.save(fs::path(o.output) / "annotated.csv");
  std::vector<std::string> outputs{"annotated.csv"};
  if (trained) {
    io::write_text_atomic(fs::path(o.output) / "detector.json", trained->to_json().dump(2) + "\n");
    outputs.push_back("detector.json");
  }
  *c.out << suspicious.size() << " suspicious trajectories, " << annotated.size() << " steps scored, " << retained
         << " retained\n";
  write_run_manifest(o.output, "refine", c,
                     {{"input", o.input},
                      {"clusters", o.clusters},
                      {"step_geometry", o.step_geometry},
                      {"entropy", o.entropy},
                      {"detector", o.detector.to_json()}},
                     outputs);
  return 0;
}

inline int cmd_bootstrap(const RefineOptions& o, const Common& c) {
  require_output(o.output);
  const Dataset ds = load_dataset(o.input);
  const auto features = load_step_features(o.step_geometry, o.entropy);
  const auto suspicious = scored_trajectories(ds, load_suspicious(o.clusters), features);
  BootstrapState state;
  if (o.state.empty()) {
    state = seed_state(ds);
  } else {
    const auto bytes = io::read_file(o.state, ErrorCode::IoFailure);
    try {
      state = bootstrap_state_from_json(nlohmann::json::parse(bytes.begin(), bytes.end()));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::IoFailure, o.state + ": " + e.what());
    }
  }
  csv::Writer w(annotated_header());
  std::vector<std::string> outputs{"bootstrap_state.json", "bootstrap.csv"};
  *c.out << "round " << state.round << ": " << state.samples.size() << " samples\n";
  std::unique_ptr<Detector> external;
  for (std::size_t r = 0; r < o.rounds; ++r) {
    std::unique_ptr<Detector> detector;
    Detector* active = nullptr;
    if (o.detector.kind == "external") {
      if (!external) external = make_detector(o.detector, {});
      active = external.get();
    } else {
      // The baseline is refit on the current dataset before each round unless
      // fixed weights were supplied.
      std::optional<BaselineDetector> trained;
      detector = make_detector(o.detector, state_training_set(state, features), &trained);
      active = detector.get();
      const std::string name = "detector_round" + std::to_string(state.round + 1) + ".json";
      io::write_text_atomic(fs::path(o.output) / name, trained->to_json().dump(2) + "\n");
      outputs.push_back(name);
    }
    std::vector<AnnotatedStep> annotated;
    const std::size_t before = state.samples.size();
    state = bootstrap_round(state, suspicious, *active, o.detector.refine(), &annotated);
    for (const auto& a : annotated) annotated_row(w, a, state.round);
    *c.out << "round " << state.round << ": " << state.samples.size() << " samples (+"
           << state.samples.size() - before << ")\n";
  }
  io::write_text_atomic(fs::path(o.output) / "bootstrap_state.json", to_json(state).dump(2) + "\n");
  w.save(fs::path(o.output) / "bootstrap.csv");
  json cfg = {{"input", o.input},       {"clusters", o.clusters}, {"step_geometry", o.step_geometry},
              {"entropy", o.entropy},   {"rounds", o.rounds},     {"state", o.state},
              {"detector", o.detector.to_json()}};
  write_run_manifest(o.output, "bootstrap", c, cfg, outputs);
  return 0;
}

// ---------------------------------------------------------------------------
// reward

struct RewardOptions {
  std::string input;
  std::string ensemble;
  std::string output;
  DetectorOptions detector;
  GraphOptions graph;
  PatternOptions pattern;
  RewardWeights weights;
  std::string manifold = "final";
};

inline int cmd_reward(const RewardOptions& o, const Common& c) {
  require_output(o.output);
  o.weights.validate();
  o.pattern.cfg.validate();
  const Dataset ds = load_dataset(o.input);
  const EnsembleStore store = load_ensemble_store(o.ensemble);
  RewardFlowConfig cfg;
  cfg.weights = o.weights;
  cfg.pattern = o.pattern.cfg;
  cfg.features.graph = o.graph.params();
  cfg.features.scale_head = o.graph.head();
  cfg.features.pattern = o.pattern.cfg;
  cfg.decision_threshold = o.detector.threshold;
  cfg.manifold = o.manifold == "final" ? ManifoldReading::FinalStep : ManifoldReading::MeanOverSteps;

  TrainingSet training;
  if (o.detector.kind == "baseline" && o.detector.weights.empty()) {
    for (const auto& t : ds.trajectories) {
      const bool labeled = std::any_of(t.steps.begin(), t.steps.end(), [](const Step& s) {
        return s.label && *s.label != StepLabel::Uncertain;
      });
      if (!labeled) continue;
      const auto f = trajectory_step_features(store.for_domain(t.domain), t, cfg.features);
      for (std::size_t i = 0; i < t.steps.size(); ++i) {
        const auto& label = t.steps[i].label;
        if (!label || *label == StepLabel::Uncertain) continue;
        training.features.push_back(f[i]);
        training.labels.push_back(*label == StepLabel::Faithful);
      }
    }
  }
  std::optional<BaselineDetector> trained;
  auto detector = make_detector(o.detector, training, &trained);

  const std::size_t n = ds.trajectories.size();
  std::vector<RewardFlowResult> results(n);
  const unsigned threads = o.detector.kind == "external" ? 1u : c.threads;
  parallel_for(n, threads, [&](std::size_t i) {
    const auto& t = ds.trajectories[i];
    results[i] = reward_flow(t, ds.answer_set, store.for_domain(t.domain), *detector, cfg);
  });

  std::vector<std::string> order;
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) {
    auto& g = groups[ds.trajectories[i].query];
    if (g.empty()) order.push_back(ds.trajectories[i].query);
    g.push_back(i);
  }
  for (const auto& q : order) {
    const auto& idx = groups[q];
    if (idx.size() < 2) {
      *c.err << "note: query group of " << ds.trajectories[idx.front()].id << " has one rollout; advantage set to 0\n";
      continue;
    }
    std::vector<RewardBreakdown> group;
    for (auto i : idx) group.push_back(results[i].breakdown);
    assign_advantages(group);
    for (std::size_t j = 0; j < idx.size(); ++j) results[idx[j]].breakdown.advantage = group[j].advantage;
  }

  csv::Writer rewards({"traj_id", "r_out", "r_proc", "r_ent", "r_mani", "total", "advantage"});
  csv::Writer steps({"traj_id", "step", "entropy", "self_information", "s_det", "label", "s_temp", "uncertainty"});
  for (const auto& r : results) {
    const auto& b = r.breakdown;
    rewards.row({r.trajectory_id, num(b.r_out), num(b.r_proc), num(b.r_ent), num(b.r_mani), num(b.total),
                 num(b.advantage)});
    for (const auto& s : r.steps) {
      steps.row({r.trajectory_id, std::to_string(s.step), num(s.entropy),
                 s.self_information ? num(*s.self_information) : "", num(s.s_det), to_string(s.label), num(s.s_temp),
                 num(s.uncertainty)});
    }
    *c.out << r.trajectory_id << "\ttotal " << short_num(b.total) << "\tadvantage " << short_num(b.advantage) << "\n";
  }
  rewards.save(fs::path(o.output) / "rewards.csv");
  steps.save(fs::path(o.output) / "reward_steps.csv");
  std::vector<std::string> outputs{"rewards.csv", "reward_steps.csv"};
  if (trained && o.detector.weights.empty()) {
    io::write_text_atomic(fs::path(o.output) / "detector.json", trained->to_json().dump(2) + "\n");
    outputs.push_back("detector.json");
  }
  write_run_manifest(o.output, "reward", c,
                     {{"input", o.input},
                      {"ensemble", o.ensemble},
                      {"detector", o.detector.to_json()},
                      {"graph", o.graph.to_json()},
                      {"pattern", o.pattern.to_json()},
                      {"lambda_out", o.weights.outcome},
                      {"lambda_proc", o.weights.process},
                      {"lambda_ent", o.weights.entropy},
                      {"lambda_mani", o.weights.manifold},
                      {"manifold_reading", o.manifold}},
                     outputs);
  return 0;
}

// ---------------------------------------------------------------------------
// grpo-loss

struct GrpoOptions {
  std::string input;
  std::string rewards;
  std::string output;
  double beta_kl = 0.01;
};

inline int cmd_grpo_loss(const GrpoOptions& o, const Common& c) {
  const Dataset ds = load_dataset(o.input);
  const auto table = csv::Table::load(o.rewards);
  const auto id = table.column("traj_id"), total = table.column("total");
  std::map<std::string, double> reward_of;
  for (std::size_t r = 0; r < table.rows.size(); ++r) reward_of[table.rows[r][id]] = table.number(r, total);
  std::vector<std::string> order;
  std::map<std::string, RolloutGroup> groups;
  for (const auto& t : ds.trajectories) {
    auto it = reward_of.find(t.id);
    if (it == reward_of.end()) fail(ErrorCode::IoFailure, "rewards table lacks trajectory " + t.id);
    auto& g = groups[t.query];
    if (g.rewards.empty()) {
      order.push_back(t.query);
      g.query_id = t.query;
    }
    g.rewards.push_back(it->second);
    g.logprobs.push_back(t.policy_logprob);
    g.ref_logprobs.push_back(t.ref_logprob);
  }
  csv::Writer w({"query", "group_size", "loss"});
  *c.out << "group_size\tloss\tquery\n";
  for (const auto& q : order) {
    const auto& g = groups[q];
    const double loss = grpo_loss(g, o.beta_kl);
    w.row({q, std::to_string(g.rewards.size()), num(loss)});
    *c.out << g.rewards.size() << "\t" << short_num(loss) << "\t" << q << "\n";
  }
  if (!o.output.empty()) {
    require_output(o.output);
    w.save(fs::path(o.output) / "grpo_loss.csv");
    write_run_manifest(o.output, "grpo-loss", c, {{"input", o.input}, {"rewards", o.rewards}, {"beta_kl", o.beta_kl}},
                       {"grpo_loss.csv"});
  }
  return 0;
}

// ---------------------------------------------------------------------------
// plot-data

struct PlotOptions {
  std::string input;
  std::string output;
  std::string geometry;
  std::string clusters;
  std::size_t k_max = 20;
  std::size_t max_curves = 40;
};

inline int cmd_plot_data(const PlotOptions& o, const Common& c) {
  require_output(o.output);
  const fs::path out(o.output);
  const Dataset ds = load_dataset(o.input);
  std::vector<std::string> outputs;
  auto save = [&](const std::string& name, const std::string& text) {
    io::write_text_atomic(out / name, text);
    outputs.push_back(name);
  };

  const Matrix x = stack_hidden_states<Matrix>(ds);
  const auto curve = explained_variance(x, o.k_max);
  csv::Writer vr({"k", "vr"});
  plot::Series vr_series{"VR(k)", {}};
  for (std::size_t k = 0; k < curve.ratios.size(); ++k) {
    vr.row({std::to_string(k + 1), num(curve.ratios[k])});
    vr_series.points.emplace_back(static_cast<double>(k + 1), curve.ratios[k]);
  }
  save("vr_curve.csv", vr.str());
  save("vr_curve.svg", plot::line_chart("Explained variance", "components k", "VR(k)", {vr_series}));

  if (x.rows() >= 3 && x.cols() >= 2) {
    const auto pca = pca_fit_transform(x, 2);
    csv::Writer sc({"traj_id", "step", "label", "pc1", "pc2"});
    std::map<std::string, plot::Series> by_label;
    long r = 0;
    for (const auto& t : ds.trajectories) {
      for (std::size_t i = 0; i < t.steps.size(); ++i, ++r) {
        const std::string label = t.steps[i].label ? to_string(*t.steps[i].label) : "unlabeled";
        sc.row({t.id, std::to_string(i), label, num(pca.projected(r, 0)), num(pca.projected(r, 1))});
        by_label[label].name = label;
        by_label[label].points.emplace_back(pca.projected(r, 0), pca.projected(r, 1));
      }
    }
    std::vector<plot::Series> groups;
    for (auto& [k, s] : by_label) groups.push_back(std::move(s));
    save("pca_scatter.csv", sc.str());
    save("pca_scatter.svg", plot::scatter_chart("Hidden states, first two principal components", "PC1", "PC2", groups));
  }

  if (ds.answer_count() > 0) {
    csv::Writer ent({"traj_id", "step", "entropy"});
    std::vector<plot::Series> curves;
    for (const auto& t : ds.trajectories) {
      const auto trace = entropy_trace(t);
      plot::Series s{t.id, {}};
      for (std::size_t i = 0; i < trace.size(); ++i) {
        ent.row({t.id, std::to_string(i), num(trace[i])});
        s.points.emplace_back(static_cast<double>(i), trace[i]);
      }
      if (curves.size() < o.max_curves) curves.push_back(std::move(s));
    }
    save("entropy_curves.csv", ent.str());
    save("entropy_curves.svg", plot::line_chart("Predictive entropy by step", "step", "H", curves, false));
  }

  if (!o.geometry.empty()) {
    const auto geo = csv::Table::load(o.geometry);
    const auto id = geo.column("traj_id"), rho = geo.column("rho"), contrast = geo.column("contrast");
    std::map<std::string, std::string> flag;
    if (!o.clusters.empty()) {
      const auto cl = csv::Table::load(o.clusters);
      const auto cid = cl.column("traj_id"), sus = cl.column("suspicious");
      for (const auto& row : cl.rows) flag[row[cid]] = row[sus] == "1" ? "suspicious" : "typical";
    }
    csv::Writer sc({"traj_id", "rho", "contrast", "group"});
    std::map<std::string, plot::Series> groups;
    for (std::size_t r = 0; r < geo.rows.size(); ++r) {
      const auto& tid = geo.rows[r][id];
      const std::string g = flag.count(tid) ? flag[tid] : "all";
      sc.row({tid, geo.rows[r][rho], geo.rows[r][contrast], g});
      groups[g].name = g;
      groups[g].points.emplace_back(geo.number(r, rho), geo.number(r, contrast));
    }
    std::vector<plot::Series> series;
    for (auto& [k, s] : groups) series.push_back(std::move(s));
    save("rho_c_scatter.csv", sc.str());
    save("rho_c_scatter.svg", plot::scatter_chart("Trajectory geometry", "distortion ratio rho", "contrast C", series));
  }
  *c.out << outputs.size() << " plot files written\n";
  write_run_manifest(o.output, "plot-data", c,
                     {{"input", o.input}, {"geometry", o.geometry}, {"clusters", o.clusters}, {"k_max", o.k_max}},
                     outputs);
  return 0;
}

// ---------------------------------------------------------------------------
// Entry point

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Spatio-temporal chain-of-thought faithfulness analysis", "geofaith"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1, 1);
  app.fallthrough();
  app.set_version_flag("--version", kToolVersion);

  Common common;
  common.out = &out;
  common.err = &err;
  common.threads = default_thread_count();
  app.add_option("--threads", common.threads, "Worker threads (fallback: GEOFAITH_THREADS, else 1)")
      ->check(CLI::PositiveNumber);
  app.add_option("--seed", common.seed, "Random seed recorded with every run and used for training");

  ValidateOptions validate;
  auto* validate_cmd = app.add_subcommand("validate", "Check a dataset against the trace format invariants");
  validate_cmd->add_option("--input", validate.input, "Dataset directory")->required();
  validate_cmd->add_option("--output", validate.output, "Directory for validation.csv");

  PcaOptions pca;
  auto* pca_cmd = app.add_subcommand("pca", "Explained-variance curve and low-rank projection of hidden states");
  pca_cmd->add_option("--input", pca.input, "Dataset directory")->required();
  pca_cmd->add_option("--output", pca.output, "Output directory")->required();
  pca_cmd->add_option("--k-max", pca.k_max, "Largest k in the variance curve")->check(CLI::PositiveNumber);
  pca_cmd->add_option("--components", pca.components, "Projection rank")->check(CLI::PositiveNumber);

  TwoNNOptions twonn;
  auto* twonn_cmd = app.add_subcommand("twonn", "TwoNN intrinsic dimension of hidden states, overall and per domain");
  twonn_cmd->add_option("--input", twonn.input, "Dataset directory")->required();
  twonn_cmd->add_option("--output", twonn.output, "Directory for twonn.csv");
  twonn_cmd->add_option("--pca", twonn.pca, "Project onto this many principal components first (0 keeps raw states)");

  TrainOptions train;
  auto* train_cmd = app.add_subcommand("train-vae", "Train VAE ensembles (one per domain unless --pool)");
  train_cmd->add_option("--input", train.input, "Dataset directory")->required();
  train_cmd->add_option("--output", train.output, "Ensemble directory")->required();
  train_cmd->add_option("--members", train.members, "Ensemble size M")->check(CLI::PositiveNumber);
  train_cmd->add_flag("--pool", train.pool, "Train one ensemble on all domains");
  train_cmd->add_option("--input-dim", train.cfg.input_dim, "PCA target dimension for wider hidden states")
      ->check(CLI::PositiveNumber);
  train_cmd->add_option("--hidden-widths", train.cfg.hidden_widths, "Encoder hidden widths")->delimiter(',');
  train_cmd->add_option("--latent-dim", train.cfg.latent_dim, "Latent dimension d_z")->check(CLI::PositiveNumber);
  train_cmd->add_option("--beta-max", train.cfg.beta_max, "Final KL weight")->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--warmup-epochs", train.cfg.warmup_epochs, "KL warmup length T_warm");
  train_cmd->add_option("--learning-rate", train.cfg.learning_rate, "AdamW learning rate")->check(CLI::PositiveNumber);
  train_cmd->add_option("--weight-decay", train.cfg.weight_decay, "AdamW decoupled weight decay")
      ->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--grad-clip", train.cfg.grad_clip_norm, "Global gradient-norm clip")
      ->check(CLI::PositiveNumber);
  train_cmd->add_option("--epochs", train.cfg.max_epochs, "Maximum epochs")->check(CLI::PositiveNumber);
  train_cmd->add_option("--batch-size", train.cfg.batch_size, "Minibatch size")->check(CLI::PositiveNumber);
  train_cmd->add_option("--validation-fraction", train.cfg.validation_fraction, "Held-out fraction")
      ->check(CLI::Range(0.0, 1.0));
  train_cmd->add_option("--logvar-min", train.cfg.logvar_min, "Lower clip of the decoder log-variance");
  train_cmd->add_option("--logvar-max", train.cfg.logvar_max, "Upper clip of the decoder log-variance");
  train_cmd->add_option("--plateau-factor", train.cfg.plateau_factor, "Learning-rate reduction factor on plateau")
      ->check(CLI::Range(0.0, 1.0));
  train_cmd->add_option("--plateau-patience", train.cfg.plateau_patience, "Plateau patience in epochs");
  train_cmd->add_option("--early-stop-patience", train.cfg.early_stop_patience, "Early-stopping patience in epochs")
      ->check(CLI::PositiveNumber);

  GeometryOptions geometry;
  auto* geometry_cmd = app.add_subcommand("geometry", "Trajectory distortion ratio, Fisher-Rao distance and contrast");
  geometry_cmd->add_option("--input", geometry.input, "Dataset directory")->required();
  geometry_cmd->add_option("--ensemble", geometry.ensemble, "Ensemble directory")->required();
  geometry_cmd->add_option("--output", geometry.output, "Output directory")->required();
  geometry_cmd->add_option("--pairs", geometry.pairs, "Within-trajectory step pairs averaged")
      ->check(CLI::IsMember({"all", "consecutive"}));
  geometry.graph.add(geometry_cmd);

  EntropyOptions entropy;
  auto* entropy_cmd = app.add_subcommand("entropy", "Predictive entropy traces and temporal reliability scores");
  entropy_cmd->add_option("--input", entropy.input, "Dataset directory")->required();
  entropy_cmd->add_option("--output", entropy.output, "Output directory")->required();
  entropy.pattern.add(entropy_cmd);

  ClusterOptions cluster;
  auto* cluster_cmd = app.add_subcommand("cluster", "Density clustering of trajectories in (rho, C) space");
  cluster_cmd->add_option("--geometry", cluster.geometry, "geometry.csv from the geometry command")->required();
  cluster_cmd->add_option("--output", cluster.output, "Output directory")->required();
  cluster_cmd->add_option("--radius", cluster.params.radius, "Neighborhood radius in standardized units")
      ->check(CLI::PositiveNumber);
  cluster_cmd->add_option("--min-pts", cluster.params.min_pts, "Neighbors (self included) that make a core point")
      ->check(CLI::PositiveNumber);
  cluster_cmd->add_option("--margin", cluster.params.suspicion_margin,
                          "Standardized rho below the median that marks a cluster suspicious");
  cluster_cmd->add_flag("--per-query", cluster.per_query, "Cluster each query's rollouts separately");

  RefineOptions refine;
  auto* refine_cmd = app.add_subcommand("refine", "Step-level scoring of suspicious trajectories");
  RefineOptions boot;
  auto* boot_cmd = app.add_subcommand("bootstrap", "Iterative high-confidence expansion of the labeled step set");
  for (auto [cmd, opt] : {std::pair{refine_cmd, &refine}, std::pair{boot_cmd, &boot}}) {
    cmd->add_option("--input", opt->input, "Dataset directory")->required();
    cmd->add_option("--clusters", opt->clusters, "clusters.csv from the cluster command")->required();
    cmd->add_option("--step-geometry", opt->step_geometry, "step_geometry.csv from the geometry command")->required();
    cmd->add_option("--entropy", opt->entropy, "entropy.csv from the entropy command")->required();
    cmd->add_option("--output", opt->output, "Output directory")->required();
    opt->detector.add(cmd, true);
  }
  boot_cmd->add_option("--rounds", boot.rounds, "Bootstrapping rounds");
  boot_cmd->add_option("--state", boot.state, "Resume from a bootstrap_state.json");

  RewardOptions reward;
  auto* reward_cmd = app.add_subcommand("reward", "Outcome, process, entropy and manifold rewards with advantages");
  reward_cmd->add_option("--input", reward.input, "Dataset directory")->required();
  reward_cmd->add_option("--ensemble", reward.ensemble, "Ensemble directory")->required();
  reward_cmd->add_option("--output", reward.output, "Output directory")->required();
  reward.detector.add(reward_cmd, false);
  reward.graph.add(reward_cmd);
  reward.pattern.add(reward_cmd);
  reward_cmd->add_option("--lambda-out", reward.weights.outcome, "Outcome reward weight")->check(CLI::NonNegativeNumber);
  reward_cmd->add_option("--lambda-proc", reward.weights.process, "Process reward weight")->check(CLI::NonNegativeNumber);
  reward_cmd->add_option("--lambda-ent", reward.weights.entropy, "Entropy reward weight")->check(CLI::NonNegativeNumber);
  reward_cmd->add_option("--lambda-mani", reward.weights.manifold, "Manifold reward weight")
      ->check(CLI::NonNegativeNumber);
  reward_cmd->add_option("--manifold-reading", reward.manifold, "Latent used for the manifold reward")
      ->check(CLI::IsMember({"final", "mean"}));

  GrpoOptions grpo;
  auto* grpo_cmd = app.add_subcommand("grpo-loss", "GRPO objective per query group from rewards and log-probabilities");
  grpo_cmd->add_option("--input", grpo.input, "Dataset directory (supplies log-probabilities)")->required();
  grpo_cmd->add_option("--rewards", grpo.rewards, "rewards.csv from the reward command")->required();
  grpo_cmd->add_option("--output", grpo.output, "Directory for grpo_loss.csv");
  grpo_cmd->add_option("--beta-kl", grpo.beta_kl, "KL coefficient")->check(CLI::NonNegativeNumber);

  PlotOptions plot_opts;
  auto* plot_cmd = app.add_subcommand("plot-data", "CSV and SVG plot series");
  plot_cmd->add_option("--input", plot_opts.input, "Dataset directory")->required();
  plot_cmd->add_option("--output", plot_opts.output, "Output directory")->required();
  plot_cmd->add_option("--geometry", plot_opts.geometry, "geometry.csv for the (rho, C) scatter");
  plot_cmd->add_option("--clusters", plot_opts.clusters, "clusters.csv to color the scatter");
  plot_cmd->add_option("--k-max", plot_opts.k_max, "Largest k in the variance curve")->check(CLI::PositiveNumber);
  plot_cmd->add_option("--max-curves", plot_opts.max_curves, "Entropy curves drawn in the SVG");

  std::vector<std::string> storage{"geofaith"};
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : storage) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*validate_cmd) return cmd_validate(validate, common);
    if (*pca_cmd) return cmd_pca(pca, common);
    if (*twonn_cmd) return cmd_twonn(twonn, common);
    if (*train_cmd) return cmd_train_vae(train, common);
    if (*geometry_cmd) return cmd_geometry(geometry, common);
    if (*entropy_cmd) return cmd_entropy(entropy, common);
    if (*cluster_cmd) return cmd_cluster(cluster, common);
    if (*refine_cmd) return cmd_refine(refine, common);
    if (*boot_cmd) return cmd_bootstrap(boot, common);
    if (*reward_cmd) return cmd_reward(reward, common);
    if (*grpo_cmd) return cmd_grpo_loss(grpo, common);
    if (*plot_cmd) return cmd_plot_data(plot_opts, common);
  } catch (const Error& e) {
    err << "geofaith: " << e.what() << "\n";
    return e.is_usage_or_io() || e.code() == ErrorCode::InvalidConfig ? 2 : 1;
  } catch (const fs::filesystem_error& e) {
    err << "geofaith: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "geofaith: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace geofaith::cli
