#pragma once

// Step-level predictive entropy and the temporal reliability score built from
// flatness, spike, and oscillation penalties.
//
// Step indices are 0-based. A penalty whose window does not fit inside the
// trace evaluates to 0.

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "geofaith/error.hpp"

namespace geofaith {

struct PatternConfig {
  std::size_t window = 5;
  double flat_threshold = 0.1;
  double spike_threshold = 1.0;
  double flat_weight = 0.2;
  double spike_weight = 0.3;
  double osc_weight = 0.5;

  void validate() const {
    if (window < 2) fail(ErrorCode::InvalidConfig, "entropy window must be at least 2");
    if (!(flat_threshold > 0.0) || !(spike_threshold > 0.0)) {
      fail(ErrorCode::InvalidConfig, "entropy thresholds must be positive");
    }
    if (flat_weight < 0.0 || spike_weight < 0.0 || osc_weight < 0.0 ||
        std::abs(flat_weight + spike_weight + osc_weight - 1.0) > 1e-9) {
      fail(ErrorCode::InvalidConfig, "penalty weights must be nonnegative and sum to 1");
    }
  }
};

struct StepTemporalScore {
  int flat = 0;
  int spike = 0;
  double oscillation = 0.0;
  double penalty = 0.0;
  double s_temp = 1.0;
};

/// Shannon entropy (natural log) of a probability vector. Entries summing to
/// 1 within 1e-6 are renormalized before use.
template <typename Range>
double predictive_entropy(const Range& dist) {
  double sum = 0.0;
  std::size_t n = 0;
  for (double p : dist) {
    if (p < 0.0 || !std::isfinite(p)) fail(ErrorCode::InvalidDistribution, "negative or non-finite probability");
    sum += p;
    ++n;
  }
  if (n == 0) fail(ErrorCode::EntropyUnavailable, "no answer distribution (K = 0)");
  if (!(sum > 0.0)) fail(ErrorCode::InvalidDistribution, "probabilities sum to zero");
  if (std::abs(sum - 1.0) > 1e-6) fail(ErrorCode::InvalidDistribution, "probabilities sum to " + std::to_string(sum));
  double h = 0.0;
  for (double p : dist) {
    const double q = p / sum;
    if (q > 0.0) h -= q * std::log(q);
  }
  return h;
}

/// 1 iff the mean |H_k - H_{k-1}| over k = t-w+1..t is below the threshold.
inline int flatness(std::span<const double> trace, std::size_t t, const PatternConfig& cfg) {
  const std::size_t w = cfg.window;
  if (t < w || t >= trace.size()) return 0;
  double sum = 0.0;
  for (std::size_t k = t - w + 1; k <= t; ++k) sum += std::abs(trace[k] - trace[k - 1]);
  return sum / static_cast<double>(w) < cfg.flat_threshold ? 1 : 0;
}

/// 1 iff |H_t - H_{t-1}| exceeds the spike threshold.
inline int spike(std::span<const double> trace, std::size_t t, const PatternConfig& cfg) {
  if (t < 1 || t >= trace.size()) return 0;
  return std::abs(trace[t] - trace[t - 1]) > cfg.spike_threshold ? 1 : 0;
}

/// Fraction of sign flips dH_k * dH_{k-1} < 0 over k = t-w+2..t, divided by w-1.
inline double oscillation(std::span<const double> trace, std::size_t t, const PatternConfig& cfg) {
  const std::size_t w = cfg.window;
  if (t < w || t >= trace.size()) return 0.0;
  std::size_t flips = 0;
  for (std::size_t k = t - w + 2; k <= t; ++k) {
    const double cur = trace[k] - trace[k - 1];
    const double prev = trace[k - 1] - trace[k - 2];
    flips += cur * prev < 0.0;
  }
  return static_cast<double>(flips) / static_cast<double>(w - 1);
}

inline StepTemporalScore combine_penalties(int flat, int spk, double osc, const PatternConfig& cfg) {
  StepTemporalScore s;
  s.flat = flat;
  s.spike = spk;
  s.oscillation = osc;
  s.penalty = cfg.flat_weight * flat + cfg.spike_weight * spk + cfg.osc_weight * osc;
  s.s_temp = 1.0 - s.penalty;
  return s;
}

inline StepTemporalScore temporal_score(std::span<const double> trace, std::size_t t, const PatternConfig& cfg) {
  return combine_penalties(flatness(trace, t, cfg), spike(trace, t, cfg), oscillation(trace, t, cfg), cfg);
}

inline std::vector<StepTemporalScore> temporal_scores(std::span<const double> trace, const PatternConfig& cfg) {
  std::vector<StepTemporalScore> out;
  out.reserve(trace.size());
  for (std::size_t t = 0; t < trace.size(); ++t) out.push_back(temporal_score(trace, t, cfg));
  return out;
}

}  // namespace geofaith
