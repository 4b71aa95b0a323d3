#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>

#include <gtest/gtest.h>

#include "geofaith/csv.hpp"
#include "geofaith/ensemble_store.hpp"
#include "geofaith/random.hpp"
#include "geofaith/reward_engine.hpp"
#include "test_support.hpp"

namespace geofaith {
namespace {

using Opt = std::optional<double>;

TEST(OutcomeReward, HandCases) {
  EXPECT_EQ(outcome_reward("42", "42"), 1.0);
  EXPECT_EQ(outcome_reward("41", "42"), -1.0);
  EXPECT_EQ(outcome_reward(" 42 ", "42"), 1.0);
  EXPECT_EQ(outcome_reward("Paris  France", "paris france"), 1.0);
  EXPECT_GEOFAITH_ERROR(outcome_reward("", "42"), MissingAnswer);
  EXPECT_GEOFAITH_ERROR(outcome_reward("42", "   "), MissingAnswer);
}

TEST(AnswerMatching, NumericMatcherComparesExactRationals) {
  EXPECT_TRUE(answers_match("0.5", "1/2", Matcher::Numeric));
  EXPECT_TRUE(answers_match("2.50", "5/2", Matcher::Numeric));
  EXPECT_TRUE(answers_match("1,000", "1000.", Matcher::Numeric));
  EXPECT_TRUE(answers_match("-3/6", "-0.5", Matcher::Numeric));
  EXPECT_TRUE(answers_match("6/-4", "-1.5", Matcher::Numeric));
  EXPECT_FALSE(answers_match("0.3333333333", "1/3", Matcher::Numeric));
  EXPECT_FALSE(answers_match("0.5", "1/2", Matcher::Exact));
  EXPECT_TRUE(answers_match("x = 3", "X = 3", Matcher::Numeric));
  EXPECT_FALSE(answers_match("1/0", "2/0", Matcher::Numeric));
  EXPECT_EQ(matcher_for(DomainTag::Math), Matcher::Numeric);
  EXPECT_EQ(matcher_for(DomainTag::Knowledge), Matcher::Exact);
}

TEST(AnswerMatching, ParseRationalReducesAndBoundsDigits) {
  const auto r = parse_rational("0.250");
  ASSERT_TRUE(r.has_value());
  EXPECT_TRUE(r->num == 1 && r->den == 4);
  EXPECT_TRUE(parse_rational("999999999999999999").has_value());
  EXPECT_FALSE(parse_rational("9999999999999999999").has_value());
  EXPECT_FALSE(parse_rational("1.2.3").has_value());
  EXPECT_FALSE(parse_rational("-").has_value());
  EXPECT_FALSE(parse_rational("abc").has_value());
}

TEST(ProcessReward, HandCases) {
  using L = StepLabel;
  const std::vector<L> mixed{L::Faithful, L::Faithful, L::Unfaithful, L::Faithful};
  EXPECT_EQ(process_reward(mixed), 0.5);
  const std::vector<L> all{L::Faithful, L::Faithful};
  EXPECT_EQ(process_reward(all), 1.0);
  const std::vector<L> balanced{L::Faithful, L::Unfaithful};
  EXPECT_EQ(process_reward(balanced), 0.0);
  EXPECT_GEOFAITH_ERROR(process_reward(std::span<const L>()), EmptySteps);
}

TEST(EntropyReward, MeanTemporalScore) {
  EXPECT_EQ(entropy_reward(std::vector<double>{0, 0.5, 1, 1.5}, {}), 1.0);
  EXPECT_EQ(entropy_reward(std::vector<double>{0.3}, {}), 1.0);
  // Steps 0..4 unpenalized, step 5 flat: (5 * 1 + 0.8) / 6.
  EXPECT_NEAR(entropy_reward(std::vector<double>{1, 1, 1, 1, 1, 1}, {}), 5.8 / 6.0, 1e-12);
  PatternConfig w2;
  w2.window = 2;
  // Only step 2 has a full window, and it is flat.
  EXPECT_NEAR(entropy_reward(std::vector<double>{0, 0, 0}, w2), 2.8 / 3.0, 1e-12);
  EXPECT_GEOFAITH_ERROR(entropy_reward(std::span<const double>(), {}), EmptySteps);
}

TEST(ManifoldReward, SignFlipOfUncertainty) {
  EXPECT_EQ(manifold_reward_from_uncertainty(-2.0), 2.0);
  EXPECT_EQ(manifold_reward_from_uncertainty(0.0), 0.0);
  EXPECT_GEOFAITH_ERROR(manifold_reward(VaeEnsemble{}, Vector::Zero(3)), UntrainedEnsemble);
}

TEST(ManifoldReward, MatchesEnsembleSummary) {
  const auto store = load_ensemble_store(testing::fixtures_dir() / "golden" / "ckpt");
  const Dataset ds = load_dataset(testing::fixtures_dir() / "golden");
  const auto& t = ds.trajectories.front();
  const auto& ens = store.for_domain(t.domain);
  const auto& h = t.steps.back().hidden_state;
  Vector x(static_cast<long>(h.size()));
  for (std::size_t j = 0; j < h.size(); ++j) x(static_cast<long>(j)) = h[j];
  Matrix row(1, x.size());
  row.row(0) = x.transpose();
  EXPECT_EQ(manifold_reward(ens, x), -ensemble_summaries(ens, row)[0].uncertainty);
}

TEST(TotalReward, HandCases) {
  EXPECT_NEAR(total_reward({1, 1, 1, 2}).total, 2.2, 1e-12);
  EXPECT_EQ(total_reward({-1, 0, 0, 0}).total, -1.0);
  EXPECT_NEAR(total_reward({1, 1, 1, 0}).total, 1.8, 1e-12);
  RewardWeights outcome_only;
  outcome_only.process = outcome_only.entropy = outcome_only.manifold = 0.0;
  EXPECT_EQ(total_reward({0.7, 0.3, 0.9, -4.0}, outcome_only).total, 0.7);
}

TEST(TotalReward, LinearInEachComponent) {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const RewardComponents c{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(), rng.normal()};
    RewardWeights w;
    const double base = total_reward(c, w).total;
    w.process *= 2.0;
    EXPECT_NEAR(total_reward(c, w).total - base, 0.5 * c.r_proc, 1e-12);
    const auto b = total_reward(c);
    EXPECT_EQ(b.total, 1.0 * c.r_out + 0.5 * c.r_proc + 0.3 * c.r_ent + 0.2 * c.r_mani);
  }
}

TEST(RewardWeights, NegativeWeightsAreRejected) {
  RewardWeights w;
  w.entropy = -0.1;
  EXPECT_GEOFAITH_ERROR(w.validate(), InvalidConfig);
}

TEST(GroupNormalize, HandCases) {
  const auto a = group_normalize(std::vector<double>{1, -1});
  EXPECT_NEAR(a[0], 1.0, 1e-7);
  EXPECT_NEAR(a[1], -1.0, 1e-7);
  const auto b = group_normalize(std::vector<double>{3, 3, 3});
  for (double v : b) EXPECT_EQ(v, 0.0);
  const auto c = group_normalize(std::vector<double>{2, 0, -2});
  EXPECT_NEAR(c[0], 1.2247, 1e-4);
  EXPECT_EQ(c[1], 0.0);
  EXPECT_NEAR(c[2], -1.2247, 1e-4);
  EXPECT_GEOFAITH_ERROR(group_normalize(std::vector<double>{1}), GroupTooSmall);
}

TEST(GroupNormalize, ZeroMeanUnitStdAndRankPreserving) {
  Rng rng(2);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<double> r(2 + rng.index(15));
    for (auto& v : r) v = rng.normal(0.0, rng.uniform(0.1, 5.0));
    const auto a = group_normalize(r);
    const double mean = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(a.size());
    double var = 0.0;
    for (double v : a) var += (v - mean) * (v - mean);
    EXPECT_NEAR(mean, 0.0, 1e-9);
    EXPECT_NEAR(std::sqrt(var / static_cast<double>(a.size())), 1.0, 1e-6);
    EXPECT_EQ(std::max_element(a.begin(), a.end()) - a.begin(), std::max_element(r.begin(), r.end()) - r.begin());
    for (std::size_t i = 0; i < r.size(); ++i) {
      for (std::size_t j = 0; j < r.size(); ++j) {
        if (r[i] < r[j]) {
          EXPECT_LT(a[i], a[j]);
        }
      }
    }
  }
}

TEST(GrpoLoss, HandCases) {
  const std::vector<double> adv{1, -1};
  const std::vector<Opt> lp{-1.0, -2.0};
  EXPECT_EQ(grpo_loss(adv, lp, lp, 0.0), -0.5);
  const std::vector<Opt> ref{-1.5, -2.5};
  EXPECT_EQ(grpo_loss(std::vector<double>{0, 0}, lp, ref, 0.1), 0.1 * 0.5);
  EXPECT_EQ(grpo_loss(adv, lp, lp, 0.3), -0.5);
}

TEST(GrpoLoss, MissingLogProbabilitiesFail) {
  const std::vector<double> adv{1, -1};
  const std::vector<Opt> lp{-1.0, std::nullopt};
  const std::vector<Opt> ref{-1.0, -1.0};
  EXPECT_GEOFAITH_ERROR(grpo_loss(adv, lp, ref, 0.01), MissingLogProb);
  EXPECT_GEOFAITH_ERROR(grpo_loss(adv, std::vector<Opt>{-1.0}, ref, 0.01), MissingLogProb);
}

TEST(GrpoLoss, GroupOverloadNormalizesFirst) {
  RolloutGroup g{"q", {2, 0, -2}, {-1.0, -1.0, -3.0}, {-1.0, -1.0, -3.0}};
  const auto adv = group_normalize(g.rewards);
  EXPECT_EQ(grpo_loss(g, 0.01), -(adv[0] * -1.0 + adv[1] * -1.0 + adv[2] * -3.0) / 3.0);
}

// Labels steps by a fixed decision and scores features deterministically.
class FixedDetector final : public Detector {
 public:
  explicit FixedDetector(double s) : s_(s) {}
  double score(const StepContext&) override { return s_; }
  std::string name() const override { return "fixed"; }

 private:
  double s_;
};

VaeEnsemble tiny_ensemble(long d_in) {
  VaeEnsemble e;
  Rng rng(5);
  TrainedVae vae;
  vae.config.hidden_widths = {4};
  vae.params = init_parameters(d_in, {4}, 2, rng);
  vae.standardization = {Vector::Zero(d_in), Vector::Ones(d_in), 1e-8};
  e.members.push_back(vae);
  return e;
}

Trajectory stable_trajectory() {
  Trajectory t;
  t.id = "s";
  t.query = "q";
  t.gold_answer = "B";
  t.predicted_answer = "b";
  const std::vector<std::vector<float>> dists{{0.5f, 0.5f}, {0.25f, 0.75f}, {0.0f, 1.0f}};
  for (std::size_t i = 0; i < dists.size(); ++i) {
    Step s;
    s.index = static_cast<std::uint32_t>(i);
    s.hidden_state = {static_cast<float>(i), 0.5f, -0.25f * static_cast<float>(i)};
    s.answer_dist = dists[i];
    t.steps.push_back(s);
  }
  return t;
}

TEST(RewardFlow, ComposesComponentsAndLogsSteps) {
  const auto t = stable_trajectory();
  const auto ens = tiny_ensemble(3);
  const std::vector<std::string> answers{"A", "B"};
  FixedDetector det(0.9);
  const auto r = reward_flow(t, answers, ens, det, {});
  EXPECT_EQ(r.breakdown.r_out, 1.0);
  EXPECT_EQ(r.breakdown.r_proc, 1.0);
  EXPECT_EQ(r.breakdown.r_ent, 1.0);
  const auto summaries = ensemble_summaries(ens, hidden_rows(t));
  EXPECT_EQ(r.breakdown.r_mani, -summaries.back().uncertainty);
  EXPECT_EQ(r.breakdown.total, 1.0 + 0.5 + 0.3 + 0.2 * r.breakdown.r_mani);
  ASSERT_EQ(r.steps.size(), 3u);
  EXPECT_NEAR(*r.steps[0].self_information, std::log(2.0), 1e-12);
  EXPECT_EQ(*r.steps[2].self_information, 0.0);
  EXPECT_EQ(r.steps[1].label, StepLabel::Faithful);

  RewardFlowConfig mean_cfg;
  mean_cfg.manifold = ManifoldReading::MeanOverSteps;
  const auto m = reward_flow(t, answers, ens, det, mean_cfg);
  double u = 0.0;
  for (const auto& s : summaries) u += s.uncertainty;
  EXPECT_EQ(m.breakdown.r_mani, -(u / 3.0));
}

TEST(RewardFlow, AllFaithfulStableCorrectWithZeroUncertaintyTotalsOnePointEight) {
  const auto b = total_reward({outcome_reward("A", "a"), 1.0, entropy_reward(std::vector<double>{0.6, 0.3}, {}),
                               manifold_reward_from_uncertainty(0.0)});
  EXPECT_NEAR(b.total, 1.8, 1e-12);
}

TEST(RewardFlow, ErrorsNameTheFailingStage) {
  auto t = stable_trajectory();
  for (auto& s : t.steps) s.answer_dist.clear();
  const std::vector<std::string> answers;
  FixedDetector det(0.9);
  try {
    reward_flow(t, answers, tiny_ensemble(3), det, {});
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EntropyUnavailable);
    EXPECT_NE(std::string(e.what()).find("entropy stage"), std::string::npos);
  }
  auto missing = stable_trajectory();
  missing.predicted_answer = "";
  try {
    reward_flow(missing, std::vector<std::string>{"A", "B"}, tiny_ensemble(3), det, {});
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MissingAnswer);
    EXPECT_NE(std::string(e.what()).find("outcome stage"), std::string::npos);
  }
  FixedDetector bad(2.0);
  EXPECT_GEOFAITH_ERROR(reward_flow(stable_trajectory(), std::vector<std::string>{"A", "B"}, tiny_ensemble(3), bad, {}),
                        DetectorFailure);
}

TEST(RewardFlow, ComponentBoundsOnFixtureTrajectories) {
  const auto store = load_ensemble_store(testing::fixtures_dir() / "golden" / "ckpt");
  const Dataset ds = load_dataset(testing::fixtures_dir() / "golden");
  Rng rng(3);
  for (int trial = 0; trial < 4; ++trial) {
    FixedDetector det(rng.uniform());
    for (const auto& t : ds.trajectories) {
      const auto r = reward_flow(t, ds.answer_set, store.for_domain(t.domain), det, {});
      EXPECT_GE(r.breakdown.r_proc, -1.0);
      EXPECT_LE(r.breakdown.r_proc, 1.0);
      EXPECT_GE(r.breakdown.r_ent, 0.0);
      EXPECT_LE(r.breakdown.r_ent, 1.0);
      EXPECT_TRUE(r.breakdown.r_out == 1.0 || r.breakdown.r_out == -1.0);
    }
  }
}

TEST(RewardFlow, GoldenReplayIsBitExact) {
  const auto dir = testing::fixtures_dir() / "golden";
  const Dataset ds = load_dataset(dir);
  const auto store = load_ensemble_store(dir / "ckpt");
  std::ifstream in(dir / "detector.json");
  auto det = BaselineDetector::from_json(nlohmann::json::parse(in));
  std::vector<RewardBreakdown> results;
  for (const auto& t : ds.trajectories) {
    const auto a = reward_flow(t, ds.answer_set, store.for_domain(t.domain), det, {});
    const auto b = reward_flow(t, ds.answer_set, store.for_domain(t.domain), det, {});
    EXPECT_EQ(a.breakdown, b.breakdown);
    results.push_back(a.breakdown);
  }
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < ds.trajectories.size(); ++i) groups[ds.trajectories[i].query].push_back(i);
  for (const auto& [q, idx] : groups) {
    std::vector<RewardBreakdown> g;
    for (auto i : idx) g.push_back(results[i]);
    assign_advantages(g);
    for (std::size_t j = 0; j < idx.size(); ++j) results[idx[j]].advantage = g[j].advantage;
  }
  const auto expected = csv::Table::load(dir / "expected_rewards.csv");
  ASSERT_EQ(expected.rows.size(), ds.trajectories.size());
  for (std::size_t r = 0; r < expected.rows.size(); ++r) {
    const auto& b = results[r];
    EXPECT_EQ(expected.rows[r][expected.column("traj_id")], ds.trajectories[r].id);
    EXPECT_EQ(expected.number(r, expected.column("r_out")), b.r_out);
    EXPECT_EQ(expected.number(r, expected.column("r_proc")), b.r_proc);
    EXPECT_EQ(expected.number(r, expected.column("r_ent")), b.r_ent);
    EXPECT_EQ(expected.number(r, expected.column("r_mani")), b.r_mani);
    EXPECT_EQ(expected.number(r, expected.column("total")), b.total);
    EXPECT_EQ(expected.number(r, expected.column("advantage")), b.advantage);
  }
}

}  // namespace
}  // namespace geofaith
