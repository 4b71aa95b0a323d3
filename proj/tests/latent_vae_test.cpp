#include <cmath>
#include <fstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "geofaith/ensemble_store.hpp"
#include "geofaith/latent_vae.hpp"
#include "geofaith/trace_store.hpp"
#include "test_support.hpp"

namespace geofaith {
namespace {

using testing::TempDir;

TrainedVae small_model(std::uint64_t seed, long d_in = 6, std::vector<std::size_t> widths = {5, 4}, long d_z = 3) {
  Rng rng(seed);
  TrainedVae vae;
  vae.config.input_dim = static_cast<std::size_t>(d_in);
  vae.config.hidden_widths = widths;
  vae.config.latent_dim = static_cast<std::size_t>(d_z);
  vae.params = init_parameters(d_in, widths, d_z, rng);
  vae.standardization = {Vector::Zero(d_in), Vector::Ones(d_in), 1e-8};
  return vae;
}

Matrix normal_rows(long rows, long cols, Rng& rng) { return detail::normal_matrix(rows, cols, rng); }

void zero_head(Dense& d) {
  d.weight.setZero();
  d.bias.setZero();
}

TEST(Standardize, ConstantColumnBecomesZero) {
  Matrix x(3, 2);
  x << 1, 5, 2, 5, 3, 5;
  const auto [z, stats] = standardize(x);
  EXPECT_EQ(stats.scale(1), 0.0);
  for (long i = 0; i < 3; ++i) EXPECT_EQ(z(i, 1), 0.0);
}

TEST(Standardize, TwoValueColumnMapsToPlusMinusOne) {
  Matrix x(2, 1);
  x << 0, 2;
  const auto [z, stats] = standardize(x);
  EXPECT_EQ(stats.mean(0), 1.0);
  EXPECT_DOUBLE_EQ(z(0, 0), -1.0 / (1.0 + 1e-8));
  EXPECT_DOUBLE_EQ(z(1, 0), 1.0 / (1.0 + 1e-8));
}

TEST(Standardize, IdempotentUpToEpsilon) {
  Rng rng(1);
  const auto first = standardize(normal_rows(50, 4, rng)).first;
  const auto second = standardize(first).first;
  EXPECT_LT((first - second).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Standardize, SingleRowIsTooFew) { EXPECT_GEOFAITH_ERROR(standardize(Matrix::Ones(1, 3)), TooFewSamples); }

TEST(Encode, ZeroHeadsGiveZeroPosterior) {
  auto vae = small_model(2);
  zero_head(vae.params.encoder.mean_head);
  zero_head(vae.params.encoder.logvar_head);
  const auto post = encode(vae, Vector::LinSpaced(6, -1.0, 2.0));
  EXPECT_EQ(post.mean, Vector::Zero(3));
  EXPECT_EQ(post.logvar, Vector::Zero(3));
}

TEST(Encode, WrongLengthIsDimensionMismatch) {
  const auto vae = small_model(3);
  EXPECT_GEOFAITH_ERROR(encode(vae, Vector::Zero(5)), DimensionMismatch);
  EXPECT_GEOFAITH_ERROR(decode(vae, Vector::Zero(4)), DimensionMismatch);
}

TEST(Encode, GoldenCheckpointReproducesFrozenLatent) {
  const auto root = testing::fixtures_dir() / "golden";
  std::ifstream in(root / "expected_latent.json");
  const auto expected = nlohmann::json::parse(in);
  const auto vae = load_vae(root / "ckpt" / expected.at("member").get<std::string>());
  const Dataset ds = load_dataset(root);
  const auto& hidden = ds.trajectories.front().steps.front().hidden_state;
  Matrix row(1, static_cast<long>(hidden.size()));
  for (std::size_t j = 0; j < hidden.size(); ++j) row(0, static_cast<long>(j)) = hidden[j];
  const Vector mu = encode(vae, vae.preprocess(row).row(0).transpose()).mean;
  const auto golden = expected.at("mu").get<std::vector<double>>();
  ASSERT_EQ(static_cast<std::size_t>(mu.size()), golden.size());
  for (std::size_t i = 0; i < golden.size(); ++i) EXPECT_EQ(mu(static_cast<long>(i)), golden[i]) << i;
}

TEST(Encode, LayerNormThenGeluOrderMatchesHandComputation) {
  TrainedVae vae = small_model(4, 2, {2}, 1);
  auto& block = vae.params.encoder.blocks[0];
  block.linear.weight << 1, 0, 0, 1;
  block.linear.bias.setZero();
  block.norm.gain.setOnes();
  block.norm.shift.setZero();
  vae.params.encoder.mean_head.weight << 1, 0;
  vae.params.encoder.mean_head.bias.setZero();
  Vector x(2);
  x << 3.0, 1.0;
  // Normalized pre-activations are (+1, -1) up to the layer-norm epsilon.
  const double h = 1.0 / std::sqrt(1.0 + 1e-5);
  const double expected = 0.5 * h * (1.0 + std::erf(h / std::sqrt(2.0)));
  EXPECT_NEAR(encode(vae, x).mean(0), expected, 1e-12);
}

TEST(Reparameterize, HandCases) {
  GaussianPosterior p{Vector::LinSpaced(3, 1.0, 3.0), Vector::Zero(3)};
  EXPECT_EQ(reparameterize(p, Vector::Zero(3)), p.mean);
  EXPECT_EQ(reparameterize(p, Vector::Ones(3)), (p.mean.array() + 1.0).matrix());
  GaussianPosterior q{Vector::Zero(3), Vector::Constant(3, std::log(4.0))};
  Vector noise = Vector::Zero(3);
  noise(0) = 1.0;
  EXPECT_NEAR(reparameterize(q, noise)(0), 2.0, 1e-15);
}

TEST(Decode, LogVarianceIsClippedToInterval) {
  auto vae = small_model(5);
  vae.params.decoder.logvar_head.weight.setZero();
  vae.params.decoder.logvar_head.bias.setConstant(6.0);
  vae.params.decoder.logvar_head.bias(1) = -10.0;
  const auto lik = decode(vae, Vector::Zero(3));
  EXPECT_EQ(lik.logvar(0), 4.0);
  EXPECT_EQ(lik.logvar(1), -4.0);
}

TEST(Decode, ZeroWeightMeanHeadReturnsBias) {
  auto vae = small_model(6);
  vae.params.decoder.mean_head.weight.setZero();
  const auto lik = decode(vae, Vector::Ones(3));
  EXPECT_EQ(lik.mean, vae.params.decoder.mean_head.bias);
}

TEST(ElboLoss, HandEvaluatedTerms) {
  EXPECT_DOUBLE_EQ(kl_term(Vector::Zero(4), Vector::Zero(4)), 0.0);
  EXPECT_DOUBLE_EQ(kl_term(Vector::Ones(1), Vector::Zero(1)), 0.5);
  Vector x = Vector::Zero(3), mean = Vector::Zero(3);
  EXPECT_DOUBLE_EQ(reconstruction_term(x, mean, Vector::Zero(3)), 0.0);
  mean(1) = 2.0;
  EXPECT_DOUBLE_EQ(reconstruction_term(x, mean, Vector::Zero(3)), 2.0);
}

TEST(ElboLoss, IdentityReconstructionAtPriorIsZero) {
  // Encoder outputs the prior; decoder ignores z and returns x exactly with unit variance.
  auto vae = small_model(7, 2, {2}, 1);
  zero_head(vae.params.encoder.mean_head);
  zero_head(vae.params.encoder.logvar_head);
  zero_head(vae.params.decoder.logvar_head);
  Vector x(2);
  x << 0.3, -1.2;
  vae.params.decoder.mean_head.weight.setZero();
  vae.params.decoder.mean_head.bias = x;
  const auto t = elbo_loss(vae, x, 0.5, Vector::Zero(1));
  EXPECT_DOUBLE_EQ(t.recon, 0.0);
  EXPECT_DOUBLE_EQ(t.kl, 0.0);
  EXPECT_DOUBLE_EQ(t.total, 0.0);
}

TEST(ElboLoss, KlIsNonNegative) {
  Rng rng(8);
  for (int i = 0; i < 200; ++i) {
    Vector mu(4), lv(4);
    for (long j = 0; j < 4; ++j) {
      mu(j) = rng.normal(0.0, 3.0);
      lv(j) = rng.normal(0.0, 3.0);
    }
    EXPECT_GE(kl_term(mu, lv), -1e-9);
  }
}

// Central finite differences of the mean batch loss, compared tensor by tensor.
void expect_gradient_matches(const TrainedVae& vae, const Matrix& batch, const Matrix& noise, double beta) {
  const auto analytic = loss_and_gradient(vae.params, vae.config, batch, noise, beta).grad;
  std::vector<Vector> flat_analytic;
  for_each_tensor(analytic, [&](const std::string&, const auto& t) {
    flat_analytic.emplace_back(Eigen::Map<const Vector>(t.data(), t.size()));
  });
  VaeParameters probe = vae.params;
  std::vector<std::pair<std::string, double*>> entries;
  std::vector<long> sizes;
  for_each_tensor(probe, [&](const std::string& name, auto& t) {
    entries.emplace_back(name, t.data());
    sizes.push_back(t.size());
  });
  const double h = 1e-5;
  for (std::size_t k = 0; k < entries.size(); ++k) {
    Vector numeric(sizes[k]);
    for (long i = 0; i < sizes[k]; ++i) {
      double& p = entries[k].second[i];
      const double saved = p;
      p = saved + h;
      const double up = loss_and_gradient(probe, vae.config, batch, noise, beta).loss;
      p = saved - h;
      const double down = loss_and_gradient(probe, vae.config, batch, noise, beta).loss;
      p = saved;
      numeric(i) = (up - down) / (2.0 * h);
    }
    const double scale = std::max(flat_analytic[k].norm() + numeric.norm(), 1e-8);
    EXPECT_LT((flat_analytic[k] - numeric).norm() / scale, 1e-4) << entries[k].first;
  }
}

TEST(Gradient, MatchesCentralFiniteDifferences) {
  for (std::uint64_t seed = 10; seed < 15; ++seed) {
    const auto vae = small_model(seed);
    Rng rng(seed + 100);
    const Matrix batch = normal_rows(4, 6, rng);
    const Matrix noise = normal_rows(4, 3, rng);
    expect_gradient_matches(vae, batch, noise, 0.3);
  }
}

TEST(Gradient, ClippedLogVarianceContributesNoGradient) {
  auto vae = small_model(20);
  vae.params.decoder.logvar_head.bias.setConstant(9.0);
  Rng rng(21);
  const Matrix batch = normal_rows(3, 6, rng);
  const Matrix noise = normal_rows(3, 3, rng);
  const auto g = gradient(vae, batch, 0.5, noise);
  EXPECT_EQ(g.decoder.logvar_head.weight.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g.decoder.logvar_head.bias.cwiseAbs().maxCoeff(), 0.0);
  expect_gradient_matches(vae, batch, noise, 0.5);
}

TEST(Gradient, ZeroResidualHeadsAreStationary) {
  auto vae = small_model(22, 2, {2}, 1);
  zero_head(vae.params.encoder.mean_head);
  zero_head(vae.params.encoder.logvar_head);
  zero_head(vae.params.decoder.logvar_head);
  Vector x(2);
  x << 0.7, -0.4;
  vae.params.decoder.mean_head.weight.setZero();
  vae.params.decoder.mean_head.bias = x;
  const auto g = gradient(vae, x.transpose(), 0.5, Matrix::Zero(1, 1));
  EXPECT_EQ(g.decoder.mean_head.bias.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g.decoder.mean_head.weight.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Gradient, DuplicatedBatchEqualsSinglePoint) {
  const auto vae = small_model(23);
  Rng rng(24);
  const Matrix x = normal_rows(1, 6, rng), n = normal_rows(1, 3, rng);
  Matrix x2(2, 6), n2(2, 3);
  x2 << x, x;
  n2 << n, n;
  const auto single = gradient(vae, x, 0.2, n);
  const auto doubled = gradient(vae, x2, 0.2, n2);
  zip_tensors(single, doubled, [](auto a, auto b) { EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-12); });
}

TEST(Gradient, EmptyBatchIsRejected) {
  const auto vae = small_model(25);
  EXPECT_GEOFAITH_ERROR(gradient(vae, Matrix(0, 6), 0.5, Matrix(0, 3)), EmptyData);
}

TEST(WarmupBeta, ScheduleValues) {
  EXPECT_DOUBLE_EQ(warmup_beta(10, 0.5, 20), 0.25);
  EXPECT_DOUBLE_EQ(warmup_beta(20, 0.5, 20), 0.5);
  double prev = 0.0;
  for (std::size_t t = 1; t <= 60; ++t) {
    const double b = warmup_beta(t, 0.5, 20);
    EXPECT_GE(b, prev);
    if (t >= 20) {
      EXPECT_EQ(b, 0.5);
    }
    prev = b;
  }
}

TEST(VaeConfig, InvalidSettingsAreRejected) {
  VaeConfig c;
  c.validation_fraction = 1.0;
  EXPECT_GEOFAITH_ERROR(c.validate(), InvalidConfig);
  c = {};
  c.logvar_min = 4.0;
  EXPECT_GEOFAITH_ERROR(c.validate(), InvalidConfig);
  c = {};
  c.latent_dim = 0;
  EXPECT_GEOFAITH_ERROR(c.validate(), InvalidConfig);
  c = {};
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(to_json(vae_config_from_json(to_json(c))), to_json(c));
}

Matrix mixture(long n, Rng& rng) {
  Matrix centers(3, 16);
  for (long c = 0; c < 3; ++c) {
    for (long j = 0; j < 16; ++j) centers(c, j) = rng.normal(0.0, 3.0);
  }
  Matrix x(n, 16);
  for (long i = 0; i < n; ++i) {
    const long c = static_cast<long>(rng.index(3));
    for (long j = 0; j < 16; ++j) x(i, j) = centers(c, j) + rng.normal(0.0, 0.5);
  }
  return x;
}

VaeConfig quick_config() {
  VaeConfig c;
  c.hidden_widths = {32, 16};
  c.latent_dim = 4;
  c.max_epochs = 30;
  c.batch_size = 256;
  c.seed = 3;
  return c;
}

TEST(TrainVae, ReducesValidationLossOnGaussianMixture) {
  Rng rng(30);
  const Matrix x = mixture(2000, rng);
  const auto vae = train_vae(x, quick_config());
  ASSERT_GE(vae.log.size(), 2u);
  EXPECT_LT(vae.log.back().validation_loss, vae.log.front().validation_loss);
  EXPECT_DOUBLE_EQ(vae.log.front().beta, 0.5 / 20.0);
}

TEST(TrainVae, DeterministicForFixedSeed) {
  Rng rng(31);
  const Matrix x = mixture(200, rng);
  auto cfg = quick_config();
  cfg.max_epochs = 8;
  const auto a = train_vae(x, cfg);
  const auto b = train_vae(x, cfg);
  EXPECT_EQ(a.log, b.log);
  EXPECT_EQ(a.params, b.params);
  cfg.seed = 4;
  EXPECT_NE(train_vae(x, cfg).params, a.params);
}

TEST(TrainVae, WideInputIsProjectedFirst) {
  Rng rng(32);
  const Matrix x = normal_rows(60, 12, rng);
  auto cfg = quick_config();
  cfg.input_dim = 5;
  cfg.max_epochs = 3;
  const auto vae = train_vae(x, cfg);
  ASSERT_TRUE(vae.pca.has_value());
  EXPECT_EQ(vae.input_dim(), 5);
  EXPECT_EQ(vae.ambient_dim(), 12);
  EXPECT_EQ(vae.preprocess(x.topRows(2)).cols(), 5);
}

TEST(TrainVae, TooFewRowsAreRejected) {
  EXPECT_GEOFAITH_ERROR(train_vae(Matrix::Random(10, 3), quick_config()), TooFewSamples);
  EXPECT_GEOFAITH_ERROR(train_vae(Matrix(0, 3), quick_config()), EmptyData);
}

TEST(Checkpoint, SaveLoadReproducesEncodeExactly) {
  TempDir dir;
  Rng rng(33);
  const Matrix x = mixture(120, rng);
  auto cfg = quick_config();
  cfg.max_epochs = 5;
  const auto vae = train_vae(x, cfg);
  save_vae(vae, dir / "m.gfva");
  const auto back = load_vae(dir / "m.gfva");
  EXPECT_EQ(back.params, vae.params);
  EXPECT_EQ(back.standardization, vae.standardization);
  EXPECT_EQ(back.log, vae.log);
  const Matrix in = vae.preprocess(x.topRows(5));
  for (long i = 0; i < 5; ++i) {
    EXPECT_EQ(encode(back, in.row(i).transpose()).mean, encode(vae, in.row(i).transpose()).mean);
  }
}

TEST(Checkpoint, CorruptFileIsRejected) {
  TempDir dir;
  std::ofstream(dir / "bad.gfva") << "GFVA but not really";
  EXPECT_GEOFAITH_ERROR(load_vae(dir / "bad.gfva"), CorruptBinary);
}

TEST(Ensemble, MembersUseConsecutiveSeeds) {
  Rng rng(34);
  const Matrix x = mixture(100, rng);
  auto cfg = quick_config();
  cfg.max_epochs = 3;
  const auto ens = train_ensemble(x, cfg, 3, 2);
  ASSERT_EQ(ens.size(), 3u);
  for (std::size_t a = 0; a < 3; ++a) {
    auto c = cfg;
    c.seed = cfg.seed + a;
    EXPECT_EQ(ens.members[a].params, train_vae(x, c).params);
  }
  EXPECT_GEOFAITH_ERROR(train_ensemble(x, cfg, 0), InvalidConfig);
}

TEST(EnsembleStore, RoundTripAndDomainFallback) {
  TempDir dir;
  Rng rng(35);
  const Matrix x = mixture(100, rng);
  auto cfg = quick_config();
  cfg.max_epochs = 2;
  EnsembleStore store;
  store.groups["math"] = train_ensemble(x, cfg, 2);
  save_ensemble_store(store, dir.path());
  const auto back = load_ensemble_store(dir.path());
  EXPECT_EQ(back.key_for(DomainTag::Math), "math");
  EXPECT_GEOFAITH_ERROR(back.key_for(DomainTag::Agent), UntrainedEnsemble);
  EXPECT_EQ(back.groups.at("math").members[1].params, store.groups["math"].members[1].params);
  store.groups[kPooledGroup] = store.groups["math"];
  EXPECT_EQ(store.key_for(DomainTag::Agent), kPooledGroup);
}

}  // namespace
}  // namespace geofaith
