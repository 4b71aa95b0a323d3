#pragma once

// Hierarchical reward composition (outcome, process, entropy, manifold),
// group-relative advantages, and the GRPO objective evaluated on supplied
// log-probabilities.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "geofaith/entropy_dynamics.hpp"
#include "geofaith/error.hpp"
#include "geofaith/faithfulness_pipeline.hpp"
#include "geofaith/latent_vae.hpp"
#include "geofaith/manifold_geometry.hpp"
#include "geofaith/trace_store.hpp"

namespace geofaith {

struct RewardWeights {
  double outcome = 1.0;
  double process = 0.5;
  double entropy = 0.3;
  double manifold = 0.2;
  double beta_kl = 0.01;

  void validate() const {
    if (outcome < 0 || process < 0 || entropy < 0 || manifold < 0 || beta_kl < 0) {
      fail(ErrorCode::InvalidConfig, "reward weights must be nonnegative");
    }
  }
};

struct RewardComponents {
  double r_out = 0.0;
  double r_proc = 0.0;
  double r_ent = 0.0;
  double r_mani = 0.0;
};

struct RewardBreakdown {
  double r_out = 0.0;
  double r_proc = 0.0;
  double r_ent = 0.0;
  double r_mani = 0.0;
  double total = 0.0;
  double advantage = 0.0;

  bool operator==(const RewardBreakdown&) const = default;
};

// ---------------------------------------------------------------------------
// Answer matching

enum class Matcher { Exact, Numeric };

/// Trims, lowercases, and collapses internal whitespace runs to one space.
inline std::string normalize_answer(std::string_view s) {
  std::string out;
  bool pending_space = false;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

__extension__ typedef __int128 Int128;

/// Exact fraction kept in lowest terms with a positive denominator.
struct Rational {
  Int128 num = 0;
  Int128 den = 1;

  void reduce() {
    if (den < 0) {
      num = -num;
      den = -den;
    }
    Int128 a = num < 0 ? -num : num, b = den;
    while (b != 0) {
      const Int128 t = a % b;
      a = b;
      b = t;
    }
    if (a > 1) {
      num /= a;
      den /= a;
    }
  }

  bool operator==(const Rational&) const = default;
};

/// Parses integers, decimals, and "a/b" fractions exactly; commas used as
/// thousands separators and a trailing period are ignored. Parts longer than
/// 18 digits are rejected.
inline std::optional<Rational> parse_rational(std::string_view text) {
  std::string s;
  for (char c : normalize_answer(text)) {
    if (c != ',' && c != ' ') s.push_back(c);
  }
  if (!s.empty() && s.back() == '.') s.pop_back();
  auto parse_decimal = [](std::string_view t) -> std::optional<Rational> {
    bool negative = false;
    if (!t.empty() && (t.front() == '-' || t.front() == '+')) {
      negative = t.front() == '-';
      t.remove_prefix(1);
    }
    if (t.empty()) return std::nullopt;
    Rational r;
    bool seen_dot = false;
    bool seen_digit = false;
    int digits = 0;
    for (char c : t) {
      if (c == '.') {
        if (seen_dot) return std::nullopt;
        seen_dot = true;
        continue;
      }
      if (c < '0' || c > '9') return std::nullopt;
      seen_digit = true;
      if (++digits > 18) return std::nullopt;
      r.num = r.num * 10 + (c - '0');
      if (seen_dot) r.den *= 10;
    }
    if (!seen_digit) return std::nullopt;
    if (negative) r.num = -r.num;
    r.reduce();
    return r;
  };
  const auto slash = s.find('/');
  if (slash == std::string::npos) return parse_decimal(s);
  const auto a = parse_decimal(std::string_view(s).substr(0, slash));
  const auto b = parse_decimal(std::string_view(s).substr(slash + 1));
  if (!a || !b || b->num == 0) return std::nullopt;
  Rational r{a->num * b->den, a->den * b->num};
  r.reduce();
  return r;
}

inline bool answers_match(std::string_view predicted, std::string_view gold, Matcher matcher) {
  if (matcher == Matcher::Numeric) {
    const auto p = parse_rational(predicted);
    const auto g = parse_rational(gold);
    if (p && g) return *p == *g;
  }
  return normalize_answer(predicted) == normalize_answer(gold);
}

inline Matcher matcher_for(DomainTag tag) { return tag == DomainTag::Math ? Matcher::Numeric : Matcher::Exact; }

// ---------------------------------------------------------------------------
// Components

/// +1 when the answers match, else -1. Blank answers count as missing.
inline double outcome_reward(std::string_view predicted, std::string_view gold, Matcher matcher = Matcher::Exact) {
  if (normalize_answer(predicted).empty() || normalize_answer(gold).empty()) {
    fail(ErrorCode::MissingAnswer, "outcome reward needs both predicted and gold answers");
  }
  return answers_match(predicted, gold, matcher) ? 1.0 : -1.0;
}

/// Mean of +1 (faithful) / -1 (unfaithful) step rewards.
inline double process_reward(std::span<const StepLabel> labels) {
  if (labels.empty()) fail(ErrorCode::EmptySteps, "process reward needs at least one step");
  double sum = 0.0;
  for (auto l : labels) {
    if (l == StepLabel::Uncertain) fail(ErrorCode::InvalidConfig, "process reward needs binary step labels");
    sum += l == StepLabel::Faithful ? 1.0 : -1.0;
  }
  return sum / static_cast<double>(labels.size());
}

/// Mean s_temp over the trace's steps.
inline double entropy_reward(std::span<const double> trace, const PatternConfig& cfg) {
  if (trace.empty()) fail(ErrorCode::EmptySteps, "entropy reward needs at least one step");
  const auto scores = temporal_scores(trace, cfg);
  double sum = 0.0;
  for (const auto& s : scores) sum += s.s_temp;
  return sum / static_cast<double>(scores.size());
}

inline double manifold_reward_from_uncertainty(double u) { return -u; }

/// -U(z) for the encoder-mean latent of one hidden state.
inline double manifold_reward(const VaeEnsemble& ensemble, const Vector& hidden_state) {
  if (ensemble.members.empty()) fail(ErrorCode::UntrainedEnsemble, "manifold reward needs a trained ensemble");
  Matrix row(1, hidden_state.size());
  row.row(0) = hidden_state.transpose();
  return -ensemble_summaries(ensemble, row).front().uncertainty;
}

inline RewardBreakdown total_reward(const RewardComponents& c, const RewardWeights& w = {}) {
  RewardBreakdown b;
  b.r_out = c.r_out;
  b.r_proc = c.r_proc;
  b.r_ent = c.r_ent;
  b.r_mani = c.r_mani;
  b.total = w.outcome * c.r_out + w.process * c.r_proc + w.entropy * c.r_ent + w.manifold * c.r_mani;
  return b;
}

// ---------------------------------------------------------------------------
// Group normalization and GRPO loss

inline constexpr double kAdvantageStdFloor = 1e-8;

/// (R_i - mean) / (std + 1e-8) with the population standard deviation.
inline std::vector<double> group_normalize(std::span<const double> rewards) {
  const std::size_t b = rewards.size();
  if (b < 2) fail(ErrorCode::GroupTooSmall, "group normalization needs at least 2 rewards");
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(b);
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / static_cast<double>(b));
  std::vector<double> out;
  out.reserve(b);
  for (double r : rewards) out.push_back((r - mean) / (sd + kAdvantageStdFloor));
  return out;
}

struct RolloutGroup {
  std::string query_id;
  std::vector<double> rewards;
  std::vector<std::optional<double>> logprobs;
  std::vector<std::optional<double>> ref_logprobs;
};

/// -mean(A_i * logp_i) + beta_KL * mean(logp_i - ref_i).
inline double grpo_loss(std::span<const double> advantages, std::span<const std::optional<double>> logprobs,
                        std::span<const std::optional<double>> ref_logprobs, double beta_kl) {
  const std::size_t b = advantages.size();
  if (logprobs.size() != b || ref_logprobs.size() != b) {
    fail(ErrorCode::MissingLogProb, "one policy and one reference log-probability per trajectory are required");
  }
  if (b == 0) fail(ErrorCode::GroupTooSmall, "empty rollout group");
  double policy = 0.0;
  double kl = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (!logprobs[i] || !ref_logprobs[i]) {
      fail(ErrorCode::MissingLogProb, "trajectory " + std::to_string(i) + " lacks a log-probability");
    }
    policy += advantages[i] * *logprobs[i];
    kl += *logprobs[i] - *ref_logprobs[i];
  }
  return -policy / static_cast<double>(b) + beta_kl * kl / static_cast<double>(b);
}

inline double grpo_loss(const RolloutGroup& group, double beta_kl) {
  const auto adv = group_normalize(group.rewards);
  return grpo_loss(adv, group.logprobs, group.ref_logprobs, beta_kl);
}

// ---------------------------------------------------------------------------
// Reward flow

enum class ManifoldReading { FinalStep, MeanOverSteps };

struct RewardFlowConfig {
  RewardWeights weights;
  PatternConfig pattern;
  FeatureParams features;
  double decision_threshold = 0.5;
  ManifoldReading manifold = ManifoldReading::FinalStep;
  std::optional<Matcher> matcher;  ///< defaults to the domain's matcher
};

struct RewardStepLog {
  std::size_t step = 0;
  double entropy = 0.0;
  std::optional<double> self_information;  ///< -log p(gold); diagnostic only
  double s_det = 0.0;
  StepLabel label = StepLabel::Uncertain;
  double s_temp = 0.0;
  double uncertainty = 0.0;
};

struct RewardFlowResult {
  std::string trajectory_id;
  RewardBreakdown breakdown;
  std::vector<RewardStepLog> steps;
};

namespace detail {

template <typename Fn>
auto in_stage(const char* stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error& e) {
    throw Error(e.code(), std::string(stage) + " stage: " + e.message());
  }
}

}  // namespace detail

/// Outcome check, per-step entropy and answer self-information, detector
/// step labels, process reward, latent uncertainty of the final step,
/// temporal scores, and the weighted total. Errors name the failing stage.
inline RewardFlowResult reward_flow(const Trajectory& t, std::span<const std::string> answer_set,
                                    const VaeEnsemble& ensemble, Detector& detector, const RewardFlowConfig& cfg) {
  RewardFlowResult out;
  out.trajectory_id = t.id;
  if (t.steps.empty()) fail(ErrorCode::EmptySteps, "validation stage: trajectory " + t.id + " has no steps");
  const Matcher matcher = cfg.matcher.value_or(matcher_for(t.domain));
  RewardComponents c;
  c.r_out = detail::in_stage("outcome", [&] { return outcome_reward(t.predicted_answer, t.gold_answer, matcher); });

  const auto trace = detail::in_stage("entropy", [&] { return entropy_trace(t); });
  std::optional<std::size_t> gold_index;
  {
    for (std::size_t a = 0; a < answer_set.size(); ++a) {
      if (answers_match(answer_set[a], t.gold_answer, matcher)) {
        gold_index = a;
        break;
      }
    }
  }

  const auto features = detail::in_stage("geometry", [&] {
    FeatureParams fp = cfg.features;
    fp.pattern = cfg.pattern;
    return trajectory_step_features(ensemble, t, fp);
  });
  const auto summaries = detail::in_stage("manifold", [&] {
    if (ensemble.members.empty()) fail(ErrorCode::UntrainedEnsemble, "no trained ensemble");
    return ensemble_summaries(ensemble, hidden_rows(t));
  });

  std::vector<StepLabel> labels;
  for (std::size_t i = 0; i < t.steps.size(); ++i) {
    RewardStepLog log;
    log.step = i;
    log.entropy = trace[i];
    if (gold_index) {
      const double p = t.steps[i].answer_dist[*gold_index];
      log.self_information = p > 0.0 ? -std::log(p) : std::numeric_limits<double>::infinity();
    }
    StepContext ctx{t.id, t.query, std::span<const Step>(t.steps.data(), i + 1), features[i]};
    log.s_det = detail::in_stage("detector", [&] {
      const double s = detector.score(ctx);
      if (!(s >= 0.0 && s <= 1.0)) fail(ErrorCode::DetectorFailure, "score outside [0, 1]");
      return s;
    });
    log.label = log.s_det > cfg.decision_threshold ? StepLabel::Faithful : StepLabel::Unfaithful;
    log.s_temp = features[i].s_temp;
    log.uncertainty = summaries[i].uncertainty;
    labels.push_back(log.label);
    out.steps.push_back(log);
  }
  c.r_proc = process_reward(labels);
  if (cfg.manifold == ManifoldReading::FinalStep) {
    c.r_mani = manifold_reward_from_uncertainty(summaries.back().uncertainty);
  } else {
    double sum = 0.0;
    for (const auto& s : summaries) sum += s.uncertainty;
    c.r_mani = manifold_reward_from_uncertainty(sum / static_cast<double>(summaries.size()));
  }
  c.r_ent = entropy_reward(trace, cfg.pattern);
  out.breakdown = total_reward(c, cfg.weights);
  return out;
}

/// Fills in group-normalized advantages in place.
inline void assign_advantages(std::span<RewardBreakdown> group) {
  std::vector<double> totals;
  for (const auto& b : group) totals.push_back(b.total);
  const auto adv = group_normalize(totals);
  for (std::size_t i = 0; i < group.size(); ++i) group[i].advantage = adv[i];
}

}  // namespace geofaith
