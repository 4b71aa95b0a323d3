#pragma once

// beta-VAE with diagonal Gaussian encoder and decoder heads.
//
// Both networks are MLPs of blocks (linear -> layer norm -> GELU) followed by
// a mean head and a log-variance head. Gradients are computed by hand-written
// reverse-mode passes specific to this architecture; the decoder also has a
// forward-mode Jacobian used by the pullback metric.
//
// Public matrices hold one sample per row. Internally batches are stored one
// sample per column.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "geofaith/binary_io.hpp"
#include "geofaith/error.hpp"
#include "geofaith/parallel.hpp"
#include "geofaith/random.hpp"
#include "geofaith/spectral_dimension.hpp"

namespace geofaith {

struct VaeConfig {
  std::size_t input_dim = 256;  ///< PCA target when the data is wider than this
  std::vector<std::size_t> hidden_widths{256, 128, 64};
  std::size_t latent_dim = 32;
  double beta_max = 0.5;
  std::size_t warmup_epochs = 20;
  double learning_rate = 1e-3;
  double weight_decay = 1e-5;
  double grad_clip_norm = 1.0;
  std::size_t max_epochs = 200;
  std::size_t batch_size = 1024;
  double validation_fraction = 0.10;
  double logvar_min = -4.0;
  double logvar_max = 4.0;
  std::uint64_t seed = 0;

  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double plateau_factor = 0.5;
  std::size_t plateau_patience = 10;
  double plateau_threshold = 1e-4;
  std::size_t early_stop_patience = 20;

  void validate() const {
    auto bad = [](const std::string& what) { fail(ErrorCode::InvalidConfig, what); };
    if (input_dim == 0 || latent_dim == 0) bad("dimensions must be positive");
    for (auto w : hidden_widths) {
      if (w == 0) bad("hidden widths must be positive");
    }
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) bad("validation_fraction must be in (0, 1)");
    if (!(logvar_min < logvar_max)) bad("decoder log-variance clip interval is empty");
    if (batch_size == 0) bad("batch_size must be positive");
    if (!(beta_max >= 0.0)) bad("beta_max must be nonnegative");
    if (!(learning_rate > 0.0)) bad("learning_rate must be positive");
    if (!(grad_clip_norm > 0.0)) bad("grad_clip_norm must be positive");
  }
};

inline nlohmann::ordered_json to_json(const VaeConfig& c) {
  return {{"input_dim", c.input_dim},
          {"hidden_widths", c.hidden_widths},
          {"latent_dim", c.latent_dim},
          {"beta_max", c.beta_max},
          {"warmup_epochs", c.warmup_epochs},
          {"learning_rate", c.learning_rate},
          {"weight_decay", c.weight_decay},
          {"grad_clip_norm", c.grad_clip_norm},
          {"max_epochs", c.max_epochs},
          {"batch_size", c.batch_size},
          {"validation_fraction", c.validation_fraction},
          {"logvar_min", c.logvar_min},
          {"logvar_max", c.logvar_max},
          {"seed", c.seed},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps},
          {"plateau_factor", c.plateau_factor},
          {"plateau_patience", c.plateau_patience},
          {"plateau_threshold", c.plateau_threshold},
          {"early_stop_patience", c.early_stop_patience}};
}

inline VaeConfig vae_config_from_json(const nlohmann::json& j) {
  VaeConfig c;
  c.input_dim = j.at("input_dim").get<std::size_t>();
  c.hidden_widths = j.at("hidden_widths").get<std::vector<std::size_t>>();
  c.latent_dim = j.at("latent_dim").get<std::size_t>();
  c.beta_max = j.at("beta_max").get<double>();
  c.warmup_epochs = j.at("warmup_epochs").get<std::size_t>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.grad_clip_norm = j.at("grad_clip_norm").get<double>();
  c.max_epochs = j.at("max_epochs").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.validation_fraction = j.at("validation_fraction").get<double>();
  c.logvar_min = j.at("logvar_min").get<double>();
  c.logvar_max = j.at("logvar_max").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.adam_beta1 = j.at("adam_beta1").get<double>();
  c.adam_beta2 = j.at("adam_beta2").get<double>();
  c.adam_eps = j.at("adam_eps").get<double>();
  c.plateau_factor = j.at("plateau_factor").get<double>();
  c.plateau_patience = j.at("plateau_patience").get<std::size_t>();
  c.plateau_threshold = j.at("plateau_threshold").get<double>();
  c.early_stop_patience = j.at("early_stop_patience").get<std::size_t>();
  return c;
}

/// KL weight at 1-based epoch t: beta_max * min(1, t / T_warm).
inline double warmup_beta(std::size_t epoch, double beta_max, std::size_t warmup_epochs) {
  if (warmup_epochs == 0) return beta_max;
  return beta_max * std::min(1.0, static_cast<double>(epoch) / static_cast<double>(warmup_epochs));
}

// ---------------------------------------------------------------------------
// Parameters

struct Dense {
  Matrix weight;  ///< out x in
  Vector bias;

  bool operator==(const Dense&) const = default;
};

struct LayerNormParams {
  Vector gain;
  Vector shift;

  bool operator==(const LayerNormParams&) const = default;
};

struct HiddenBlock {
  Dense linear;
  LayerNormParams norm;

  bool operator==(const HiddenBlock&) const = default;
};

struct GaussianMlp {
  std::vector<HiddenBlock> blocks;
  Dense mean_head;
  Dense logvar_head;

  long input_dim() const { return blocks.empty() ? mean_head.weight.cols() : blocks.front().linear.weight.cols(); }
  long output_dim() const { return mean_head.weight.rows(); }

  bool operator==(const GaussianMlp&) const = default;
};

struct VaeParameters {
  GaussianMlp encoder;
  GaussianMlp decoder;

  bool operator==(const VaeParameters&) const = default;
};

/// Visits every tensor in a fixed order: encoder blocks, encoder heads,
/// decoder blocks, decoder heads. `fn(name, tensor)` receives a Matrix or a
/// Vector (const-qualified when `params` is).
template <typename Params, typename Fn>
void for_each_tensor(Params& params, Fn&& fn) {
  auto visit_mlp = [&](auto& mlp, const std::string& prefix) {
    for (std::size_t i = 0; i < mlp.blocks.size(); ++i) {
      const std::string b = prefix + ".block" + std::to_string(i);
      fn(b + ".weight", mlp.blocks[i].linear.weight);
      fn(b + ".bias", mlp.blocks[i].linear.bias);
      fn(b + ".norm_gain", mlp.blocks[i].norm.gain);
      fn(b + ".norm_shift", mlp.blocks[i].norm.shift);
    }
    fn(prefix + ".mean.weight", mlp.mean_head.weight);
    fn(prefix + ".mean.bias", mlp.mean_head.bias);
    fn(prefix + ".logvar.weight", mlp.logvar_head.weight);
    fn(prefix + ".logvar.bias", mlp.logvar_head.bias);
  };
  visit_mlp(params.encoder, "encoder");
  visit_mlp(params.decoder, "decoder");
}

/// Applies fn(a_tensor, b_tensor) pairwise over two parameter sets of the
/// same architecture.
template <typename A, typename B, typename Fn>
void zip_tensors(A& a, B& b, Fn&& fn) {
  std::vector<double*> a_data;
  std::vector<long> sizes;
  for_each_tensor(a, [&](const std::string&, auto& t) {
    a_data.push_back(const_cast<double*>(t.data()));
    sizes.push_back(static_cast<long>(t.size()));
  });
  std::size_t i = 0;
  for_each_tensor(b, [&](const std::string&, auto& t) {
    fn(Eigen::Map<Vector>(a_data[i], sizes[i]), Eigen::Map<Vector>(const_cast<double*>(t.data()), t.size()));
    ++i;
  });
}

inline std::size_t parameter_count(const VaeParameters& p) {
  std::size_t n = 0;
  for_each_tensor(p, [&](const std::string&, const auto& t) { n += static_cast<std::size_t>(t.size()); });
  return n;
}

/// Same shapes as `p`, all zeros.
inline VaeParameters zeros_like(const VaeParameters& p) {
  VaeParameters out = p;
  for_each_tensor(out, [](const std::string&, auto& t) { t.setZero(); });
  return out;
}

namespace detail {

inline Dense init_dense(long in, long out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Dense d{Matrix(out, in), Vector(out)};
  for (long r = 0; r < out; ++r) {
    for (long c = 0; c < in; ++c) d.weight(r, c) = rng.uniform(-bound, bound);
  }
  for (long r = 0; r < out; ++r) d.bias(r) = rng.uniform(-bound, bound);
  return d;
}

inline GaussianMlp init_mlp(long in, const std::vector<std::size_t>& widths, long out, Rng& rng) {
  GaussianMlp mlp;
  long prev = in;
  for (auto w : widths) {
    const long width = static_cast<long>(w);
    HiddenBlock block{init_dense(prev, width, rng), {Vector::Ones(width), Vector::Zero(width)}};
    mlp.blocks.push_back(std::move(block));
    prev = width;
  }
  mlp.mean_head = init_dense(prev, out, rng);
  mlp.logvar_head = init_dense(prev, out, rng);
  return mlp;
}

}  // namespace detail

/// Fresh parameters for a d_in -> d_z -> d_in model. The decoder mirrors the
/// encoder's hidden widths in reverse.
inline VaeParameters init_parameters(long input_dim, const std::vector<std::size_t>& widths, long latent_dim, Rng& rng) {
  std::vector<std::size_t> reversed(widths.rbegin(), widths.rend());
  VaeParameters p;
  p.encoder = detail::init_mlp(input_dim, widths, latent_dim, rng);
  p.decoder = detail::init_mlp(latent_dim, reversed, input_dim, rng);
  return p;
}

// ---------------------------------------------------------------------------
// Forward / backward passes

inline constexpr double kLayerNormEps = 1e-5;

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

inline double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

struct BlockCache {
  Matrix input;   ///< in x B
  Matrix xhat;    ///< normalized pre-activation
  Vector inv_std; ///< per column
  Matrix normed;  ///< gain * xhat + shift (GELU input)
};

struct MlpCache {
  std::vector<BlockCache> blocks;
  Matrix features;    ///< last hidden output
  Matrix mean;
  Matrix raw_logvar;  ///< head output before any clamp
};

inline MlpCache mlp_forward(const GaussianMlp& mlp, const Matrix& x) {
  MlpCache cache;
  Matrix h = x;
  for (const auto& block : mlp.blocks) {
    BlockCache bc;
    bc.input = h;
    Matrix pre = block.linear.weight * h;
    pre.colwise() += block.linear.bias;
    const double width = static_cast<double>(pre.rows());
    bc.xhat.resize(pre.rows(), pre.cols());
    bc.inv_std.resize(pre.cols());
    for (long c = 0; c < pre.cols(); ++c) {
      const double mean = pre.col(c).mean();
      const double var = (pre.col(c).array() - mean).square().sum() / width;
      const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
      bc.inv_std(c) = inv;
      bc.xhat.col(c) = (pre.col(c).array() - mean) * inv;
    }
    bc.normed = (bc.xhat.array().colwise() * block.norm.gain.array()).colwise() + block.norm.shift.array();
    h = bc.normed.unaryExpr([](double v) { return gelu(v); });
    cache.blocks.push_back(std::move(bc));
  }
  cache.features = h;
  cache.mean = mlp.mean_head.weight * h;
  cache.mean.colwise() += mlp.mean_head.bias;
  cache.raw_logvar = mlp.logvar_head.weight * h;
  cache.raw_logvar.colwise() += mlp.logvar_head.bias;
  return cache;
}

/// Accumulates parameter gradients into `grad` and returns d(loss)/d(input).
inline Matrix mlp_backward(const GaussianMlp& mlp, const MlpCache& cache, const Matrix& d_mean,
                           const Matrix& d_raw_logvar, GaussianMlp& grad) {
  grad.mean_head.weight += d_mean * cache.features.transpose();
  grad.mean_head.bias += d_mean.rowwise().sum();
  grad.logvar_head.weight += d_raw_logvar * cache.features.transpose();
  grad.logvar_head.bias += d_raw_logvar.rowwise().sum();
  Matrix dh = mlp.mean_head.weight.transpose() * d_mean + mlp.logvar_head.weight.transpose() * d_raw_logvar;

  for (std::size_t b = mlp.blocks.size(); b-- > 0;) {
    const auto& block = mlp.blocks[b];
    const auto& bc = cache.blocks[b];
    auto& g = grad.blocks[b];
    const Matrix dy = dh.array() * bc.normed.unaryExpr([](double v) { return gelu_derivative(v); }).array();
    g.norm.gain += (dy.array() * bc.xhat.array()).rowwise().sum().matrix();
    g.norm.shift += dy.rowwise().sum();
    const Matrix dxhat = dy.array().colwise() * block.norm.gain.array();
    const double width = static_cast<double>(dxhat.rows());
    Matrix dpre(dxhat.rows(), dxhat.cols());
    for (long c = 0; c < dxhat.cols(); ++c) {
      const double sum = dxhat.col(c).sum();
      const double dot = dxhat.col(c).dot(bc.xhat.col(c));
      dpre.col(c) = (bc.inv_std(c) / width) *
                    (width * dxhat.col(c).array() - sum - bc.xhat.col(c).array() * dot).matrix();
    }
    g.linear.weight += dpre * bc.input.transpose();
    g.linear.bias += dpre.rowwise().sum();
    dh = block.linear.weight.transpose() * dpre;
  }
  return dh;
}

// ---------------------------------------------------------------------------
// Preprocessing

struct Standardization {
  Vector mean;
  Vector scale;
  double eps = 1e-8;

  /// (x - mean) / (scale + eps), row-wise.
  Matrix apply(const Matrix& rows) const {
    return (rows.rowwise() - mean.transpose()).array().rowwise() / (scale.array() + eps).transpose();
  }

  bool operator==(const Standardization&) const = default;
};

/// Per-column standardization with population scale.
inline std::pair<Matrix, Standardization> standardize(const Matrix& features) {
  if (features.rows() < 2) fail(ErrorCode::TooFewSamples, "standardize needs at least 2 rows");
  Standardization stats;
  stats.mean = features.colwise().mean().transpose();
  const Matrix centered = features.rowwise() - stats.mean.transpose();
  stats.scale = (centered.array().square().colwise().sum() / static_cast<double>(features.rows())).sqrt().transpose();
  return {stats.apply(features), stats};
}

struct LinearProjection {
  Vector mean;
  Matrix components;  ///< D x k

  Matrix apply(const Matrix& rows) const { return (rows.rowwise() - mean.transpose()) * components; }

  bool operator==(const LinearProjection&) const = default;
};

// ---------------------------------------------------------------------------
// Model

struct GaussianPosterior {
  Vector mean;
  Vector logvar;
};

struct GaussianLikelihood {
  Vector mean;
  Vector logvar;  ///< clamped to the configured interval
};

struct TrainingEpoch {
  std::size_t epoch = 0;
  double beta = 0.0;
  double learning_rate = 0.0;
  double train_loss = 0.0;
  double validation_loss = 0.0;

  bool operator==(const TrainingEpoch&) const = default;
};

struct TrainedVae {
  VaeConfig config;
  VaeParameters params;
  Standardization standardization;
  std::optional<LinearProjection> pca;
  std::vector<TrainingEpoch> log;
  std::size_t best_epoch = 0;

  long input_dim() const { return params.encoder.input_dim(); }
  long latent_dim() const { return params.encoder.output_dim(); }
  long ambient_dim() const { return pca ? pca->components.rows() : standardization.mean.size(); }

  /// Raw hidden states (rows) to model inputs: optional PCA, then standardization.
  Matrix preprocess(const Matrix& hidden_rows) const {
    if (hidden_rows.cols() != ambient_dim()) {
      fail(ErrorCode::DimensionMismatch, "expected " + std::to_string(ambient_dim()) + " features, got " +
                                             std::to_string(hidden_rows.cols()));
    }
    return standardization.apply(pca ? pca->apply(hidden_rows) : hidden_rows);
  }
};

inline void require_dim(long actual, long expected, const char* what) {
  if (actual != expected) {
    fail(ErrorCode::DimensionMismatch,
         std::string(what) + " has dimension " + std::to_string(actual) + ", expected " + std::to_string(expected));
  }
}

inline GaussianPosterior encode(const TrainedVae& vae, const Vector& x) {
  require_dim(x.size(), vae.input_dim(), "encoder input");
  const MlpCache c = mlp_forward(vae.params.encoder, x);
  return {c.mean.col(0), c.raw_logvar.col(0)};
}

/// Batch encoder pass; returns (means, logvars) with one sample per row.
inline std::pair<Matrix, Matrix> encode_rows(const TrainedVae& vae, const Matrix& x_rows) {
  require_dim(x_rows.cols(), vae.input_dim(), "encoder input");
  const MlpCache c = mlp_forward(vae.params.encoder, x_rows.transpose());
  return {c.mean.transpose(), c.raw_logvar.transpose()};
}

inline Vector reparameterize(const GaussianPosterior& posterior, const Vector& noise) {
  require_dim(noise.size(), posterior.mean.size(), "noise");
  return posterior.mean.array() + (0.5 * posterior.logvar.array()).exp() * noise.array();
}

inline Matrix clamp_logvar(const Matrix& raw, double lo, double hi) {
  return raw.cwiseMax(lo).cwiseMin(hi);
}

inline GaussianLikelihood decode(const TrainedVae& vae, const Vector& z) {
  require_dim(z.size(), vae.latent_dim(), "latent");
  const MlpCache c = mlp_forward(vae.params.decoder, z);
  return {c.mean.col(0), clamp_logvar(c.raw_logvar, vae.config.logvar_min, vae.config.logvar_max).col(0)};
}

struct ElboTerms {
  double total = 0.0;
  double recon = 0.0;
  double kl = 0.0;
};

/// Gaussian negative log-likelihood without the constant term.
inline double reconstruction_term(const Vector& x, const Vector& mean, const Vector& logvar) {
  return 0.5 * (logvar.array() + (x - mean).array().square() * (-logvar.array()).exp()).sum();
}

/// KL(N(mean, exp(logvar)) || N(0, I)).
inline double kl_term(const Vector& mean, const Vector& logvar) {
  return -0.5 * (1.0 + logvar.array() - mean.array().square() - logvar.array().exp()).sum();
}

namespace detail {

struct BatchPass {
  MlpCache enc;
  MlpCache dec;
  Matrix z;
  Matrix dec_logvar;
  Vector recon;  ///< per sample
  Vector kl;
};

/// x, noise: one sample per column.
inline BatchPass batch_forward(const VaeParameters& p, const VaeConfig& cfg, const Matrix& x, const Matrix& noise) {
  BatchPass out;
  out.enc = mlp_forward(p.encoder, x);
  out.z = out.enc.mean.array() + (0.5 * out.enc.raw_logvar.array()).exp() * noise.array();
  out.dec = mlp_forward(p.decoder, out.z);
  out.dec_logvar = clamp_logvar(out.dec.raw_logvar, cfg.logvar_min, cfg.logvar_max);
  const Matrix resid = x - out.dec.mean;
  out.recon = 0.5 * (out.dec_logvar.array() + resid.array().square() * (-out.dec_logvar.array()).exp())
                        .colwise()
                        .sum()
                        .transpose();
  const auto& mu = out.enc.mean.array();
  const auto& lv = out.enc.raw_logvar.array();
  out.kl = (-0.5 * (1.0 + lv - mu.square() - lv.exp())).colwise().sum().transpose();
  return out;
}

}  // namespace detail

/// Single-sample ELBO pieces with explicit reparameterization noise.
inline ElboTerms elbo_loss(const TrainedVae& vae, const Vector& x, double beta, const Vector& noise) {
  require_dim(x.size(), vae.input_dim(), "input");
  require_dim(noise.size(), vae.latent_dim(), "noise");
  const auto pass = detail::batch_forward(vae.params, vae.config, x, noise);
  ElboTerms t{pass.recon(0) + beta * pass.kl(0), pass.recon(0), pass.kl(0)};
  if (!std::isfinite(t.total)) fail(ErrorCode::NonFiniteLoss, "ELBO is not finite");
  return t;
}

struct LossAndGradient {
  double loss = 0.0;  ///< mean over the batch
  double recon = 0.0;
  double kl = 0.0;
  VaeParameters grad;
};

/// Exact gradient of the mean batch loss. `x_rows` and `noise_rows` hold one
/// sample per row. Decoder log-variance entries outside the clip interval
/// receive zero gradient.
inline LossAndGradient loss_and_gradient(const VaeParameters& p, const VaeConfig& cfg, const Matrix& x_rows,
                                         const Matrix& noise_rows, double beta) {
  if (x_rows.rows() == 0) fail(ErrorCode::EmptyData, "gradient of an empty batch");
  const Matrix x = x_rows.transpose();
  const Matrix noise = noise_rows.transpose();
  const auto pass = detail::batch_forward(p, cfg, x, noise);
  const double inv_b = 1.0 / static_cast<double>(x.cols());

  LossAndGradient out;
  out.recon = pass.recon.mean();
  out.kl = pass.kl.mean();
  out.loss = out.recon + beta * out.kl;
  if (!std::isfinite(out.loss)) fail(ErrorCode::NonFiniteLoss, "batch loss is not finite");
  out.grad = zeros_like(p);

  const Matrix inv_var = (-pass.dec_logvar.array()).exp();
  const Matrix resid = x - pass.dec.mean;
  const Matrix d_dec_mean = -(resid.array() * inv_var.array()) * inv_b;
  Matrix d_dec_raw = 0.5 * (1.0 - resid.array().square() * inv_var.array()) * inv_b;
  for (long i = 0; i < d_dec_raw.size(); ++i) {
    const double raw = pass.dec.raw_logvar.data()[i];
    if (raw < cfg.logvar_min || raw > cfg.logvar_max) d_dec_raw.data()[i] = 0.0;
  }
  const Matrix dz = mlp_backward(p.decoder, pass.dec, d_dec_mean, d_dec_raw, out.grad.decoder);

  const auto& mu = pass.enc.mean.array();
  const auto& lv = pass.enc.raw_logvar.array();
  const Matrix half_std = 0.5 * (0.5 * lv).exp();
  const Matrix d_enc_mean = dz.array() + beta * mu * inv_b;
  const Matrix d_enc_lv = dz.array() * noise.array() * half_std.array() + beta * 0.5 * (lv.exp() - 1.0) * inv_b;
  mlp_backward(p.encoder, pass.enc, d_enc_mean, d_enc_lv, out.grad.encoder);

  bool finite = true;
  for_each_tensor(out.grad, [&](const std::string&, const auto& t) { finite = finite && t.allFinite(); });
  if (!finite) fail(ErrorCode::NonFiniteGradient, "gradient contains non-finite entries");
  return out;
}

inline VaeParameters gradient(const TrainedVae& vae, const Matrix& batch_rows, double beta, const Matrix& noise_rows) {
  require_dim(batch_rows.cols(), vae.input_dim(), "batch");
  require_dim(noise_rows.cols(), vae.latent_dim(), "noise");
  return loss_and_gradient(vae.params, vae.config, batch_rows, noise_rows, beta).grad;
}

// ---------------------------------------------------------------------------
// Decoder Jacobian

/// Which parameterization of the decoder's scale head enters the pullback map.
enum class ScaleHead { Sigma, LogVariance };

/// Jacobian of z -> [mu_x(z); s(z)] at z, shape (2 d_in) x d_z, where s is
/// sigma = exp(logvar / 2) or the clamped log-variance itself. Computed by
/// forward-mode propagation of the d_z coordinate tangents.
inline Matrix decoder_jacobian(const TrainedVae& vae, const Vector& z, ScaleHead head = ScaleHead::Sigma) {
  require_dim(z.size(), vae.latent_dim(), "latent");
  const GaussianMlp& mlp = vae.params.decoder;
  const long dz = z.size();
  Vector h = z;
  Matrix tangent = Matrix::Identity(dz, dz);
  for (const auto& block : mlp.blocks) {
    Vector pre = block.linear.weight * h + block.linear.bias;
    Matrix dpre = block.linear.weight * tangent;
    const double width = static_cast<double>(pre.size());
    const double mean = pre.mean();
    const double var = (pre.array() - mean).square().sum() / width;
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    const Vector xhat = (pre.array() - mean) * inv;
    Matrix dxhat(dpre.rows(), dz);
    for (long c = 0; c < dz; ++c) {
      const double m = dpre.col(c).mean();
      const double proj = xhat.dot(dpre.col(c)) / width;
      dxhat.col(c) = inv * (dpre.col(c).array() - m - xhat.array() * proj);
    }
    const Vector normed = block.norm.gain.array() * xhat.array() + block.norm.shift.array();
    const Vector slope = normed.unaryExpr([](double v) { return gelu_derivative(v); });
    tangent = (dxhat.array().colwise() * (block.norm.gain.array() * slope.array())).matrix();
    h = normed.unaryExpr([](double v) { return gelu(v); });
  }
  const long out_dim = mlp.output_dim();
  Matrix jac(2 * out_dim, dz);
  jac.topRows(out_dim) = mlp.mean_head.weight * tangent;
  const Vector raw = mlp.logvar_head.weight * h + mlp.logvar_head.bias;
  Matrix dlog = mlp.logvar_head.weight * tangent;
  for (long r = 0; r < out_dim; ++r) {
    if (raw(r) < vae.config.logvar_min || raw(r) > vae.config.logvar_max) dlog.row(r).setZero();
  }
  if (head == ScaleHead::Sigma) {
    const Vector sigma = (0.5 * raw.cwiseMax(vae.config.logvar_min).cwiseMin(vae.config.logvar_max).array()).exp();
    dlog = (dlog.array().colwise() * (0.5 * sigma.array())).matrix();
  }
  jac.bottomRows(out_dim) = dlog;
  if (!jac.allFinite()) fail(ErrorCode::NonFiniteJacobian, "decoder Jacobian is not finite");
  return jac;
}

/// The map whose Jacobian decoder_jacobian returns, for finite-difference checks.
inline Vector decoder_map(const TrainedVae& vae, const Vector& z, ScaleHead head = ScaleHead::Sigma) {
  const GaussianLikelihood lik = decode(vae, z);
  Vector out(2 * lik.mean.size());
  out.head(lik.mean.size()) = lik.mean;
  out.tail(lik.mean.size()) = head == ScaleHead::Sigma ? Vector((0.5 * lik.logvar.array()).exp()) : lik.logvar;
  return out;
}

// ---------------------------------------------------------------------------
// Training

namespace detail {

struct AdamWState {
  VaeParameters m;
  VaeParameters v;
  std::size_t step = 0;
};

inline void adamw_step(VaeParameters& params, const VaeParameters& grad, AdamWState& state, const VaeConfig& cfg,
                       double lr) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(state.step));
  std::vector<Eigen::Map<Vector>> p_maps, g_maps, m_maps, v_maps;
  auto collect = [](auto& set, std::vector<Eigen::Map<Vector>>& out) {
    for_each_tensor(set, [&](const std::string&, auto& t) {
      out.emplace_back(const_cast<double*>(t.data()), t.size());
    });
  };
  collect(params, p_maps);
  collect(grad, g_maps);
  collect(state.m, m_maps);
  collect(state.v, v_maps);
  for (std::size_t i = 0; i < p_maps.size(); ++i) {
    auto& p = p_maps[i];
    const auto& g = g_maps[i];
    m_maps[i] = cfg.adam_beta1 * m_maps[i] + (1.0 - cfg.adam_beta1) * g;
    v_maps[i] = cfg.adam_beta2 * v_maps[i] + (1.0 - cfg.adam_beta2) * g.cwiseProduct(g);
    p *= (1.0 - lr * cfg.weight_decay);
    p.array() -= lr * (m_maps[i].array() / bc1) / ((v_maps[i].array() / bc2).sqrt() + cfg.adam_eps);
  }
}

inline double global_norm(const VaeParameters& grad) {
  double sq = 0.0;
  for_each_tensor(grad, [&](const std::string&, const auto& t) { sq += t.squaredNorm(); });
  return std::sqrt(sq);
}

inline void clip_gradient(VaeParameters& grad, double max_norm) {
  const double norm = global_norm(grad);
  if (norm > max_norm) {
    const double scale = max_norm / (norm + 1e-6);
    for_each_tensor(grad, [&](const std::string&, auto& t) { t *= scale; });
  }
}

inline Matrix normal_matrix(long rows, long cols, Rng& rng) {
  Matrix m(rows, cols);
  for (long r = 0; r < rows; ++r) {
    for (long c = 0; c < cols; ++c) m(r, c) = rng.normal();
  }
  return m;
}

inline void round_to_f32(Matrix& m) {
  for (long i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(m.data()[i]);
}
inline void round_to_f32(Vector& v) {
  for (long i = 0; i < v.size(); ++i) v.data()[i] = static_cast<float>(v.data()[i]);
}

}  // namespace detail

/// Rounds every stored tensor to float32 precision so the checkpoint format
/// round-trips the in-memory model exactly.
inline void quantize_to_f32(TrainedVae& vae) {
  for_each_tensor(vae.params, [](const std::string&, auto& t) { detail::round_to_f32(t); });
  detail::round_to_f32(vae.standardization.mean);
  detail::round_to_f32(vae.standardization.scale);
  if (vae.pca) {
    detail::round_to_f32(vae.pca->mean);
    detail::round_to_f32(vae.pca->components);
  }
}

/// Trains one model on raw rows. Wide inputs are PCA-reduced to
/// config.input_dim first; the result is then standardized. Deterministic for
/// a fixed seed.
inline TrainedVae train_vae(const Matrix& data, const VaeConfig& config) {
  config.validate();
  const long n = data.rows();
  if (n == 0) fail(ErrorCode::EmptyData, "no training rows");
  if (static_cast<double>(n) < 2.0 / config.validation_fraction) {
    fail(ErrorCode::TooFewSamples, "need at least " + std::to_string(2.0 / config.validation_fraction) +
                                       " rows for the validation split, got " + std::to_string(n));
  }

  TrainedVae vae;
  vae.config = config;
  Matrix features = data;
  if (data.cols() > static_cast<long>(config.input_dim)) {
    const auto pca = pca_fit_transform(data, config.input_dim);
    vae.pca = LinearProjection{pca.mean, pca.components};
    features = pca.projected;
  }
  auto [inputs, stats] = standardize(features);
  vae.standardization = stats;

  Rng rng(config.seed);
  std::vector<long> order(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  rng.shuffle(order);
  const long n_val = std::max<long>(1, static_cast<long>(std::floor(static_cast<double>(n) * config.validation_fraction)));
  const long n_train = n - n_val;
  Matrix train(n_train, inputs.cols()), val(n_val, inputs.cols());
  for (long i = 0; i < n_train; ++i) train.row(i) = inputs.row(order[static_cast<std::size_t>(i)]);
  for (long i = 0; i < n_val; ++i) val.row(i) = inputs.row(order[static_cast<std::size_t>(n_train + i)]);

  const long d_in = inputs.cols();
  const long d_z = static_cast<long>(config.latent_dim);
  vae.params = init_parameters(d_in, config.hidden_widths, d_z, rng);
  const Matrix val_noise = detail::normal_matrix(n_val, d_z, rng);

  detail::AdamWState adam{zeros_like(vae.params), zeros_like(vae.params), 0};
  double lr = config.learning_rate;
  double best_val = std::numeric_limits<double>::infinity();
  VaeParameters best_params = vae.params;
  std::size_t since_best = 0;
  double plateau_best = std::numeric_limits<double>::infinity();
  std::size_t plateau_wait = 0;

  std::vector<long> train_order(static_cast<std::size_t>(n_train));
  for (long i = 0; i < n_train; ++i) train_order[static_cast<std::size_t>(i)] = i;
  const long batch = static_cast<long>(config.batch_size);

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const double beta = warmup_beta(epoch, config.beta_max, config.warmup_epochs);
    rng.shuffle(train_order);
    double loss_sum = 0.0;
    for (long start = 0; start < n_train; start += batch) {
      const long rows = std::min(batch, n_train - start);
      Matrix xb(rows, d_in);
      for (long r = 0; r < rows; ++r) xb.row(r) = train.row(train_order[static_cast<std::size_t>(start + r)]);
      const Matrix noise = detail::normal_matrix(rows, d_z, rng);
      auto step = loss_and_gradient(vae.params, config, xb, noise, beta);
      loss_sum += step.loss * static_cast<double>(rows);
      detail::clip_gradient(step.grad, config.grad_clip_norm);
      detail::adamw_step(vae.params, step.grad, adam, config, lr);
    }
    const auto val_pass = detail::batch_forward(vae.params, config, val.transpose(), val_noise.transpose());
    const double val_loss = (val_pass.recon + beta * val_pass.kl).mean();
    if (!std::isfinite(val_loss)) fail(ErrorCode::NonFiniteLoss, "validation loss diverged at epoch " + std::to_string(epoch));
    vae.log.push_back({epoch, beta, lr, loss_sum / static_cast<double>(n_train), val_loss});

    // The objective only becomes stationary once beta stops changing, so the
    // plateau and early-stopping monitors start at the end of warmup.
    if (epoch < config.warmup_epochs) continue;
    if (val_loss < best_val) {
      best_val = val_loss;
      best_params = vae.params;
      vae.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= config.early_stop_patience) {
      break;
    }
    if (val_loss < plateau_best - std::abs(plateau_best) * config.plateau_threshold || !std::isfinite(plateau_best)) {
      plateau_best = val_loss;
      plateau_wait = 0;
    } else if (++plateau_wait > config.plateau_patience) {
      lr *= config.plateau_factor;
      plateau_wait = 0;
    }
  }
  if (vae.best_epoch > 0) vae.params = best_params;
  quantize_to_f32(vae);
  return vae;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// "GFVA" | u32 version | u32 header_len | header JSON | tensors
//
// Each tensor is u32 rows | u32 cols | f32[rows*cols] row-major, written in
// order: standardization mean, scale, [pca mean, pca components], then the
// parameters in for_each_tensor order.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_tensor(io::ByteWriter& w, const Matrix& m) {
  w.put_u32(static_cast<std::uint32_t>(m.rows()));
  w.put_u32(static_cast<std::uint32_t>(m.cols()));
  for (long r = 0; r < m.rows(); ++r) {
    for (long c = 0; c < m.cols(); ++c) w.put_f32(static_cast<float>(m(r, c)));
  }
}

template <typename T>
void get_tensor(io::ByteReader& r, T& out, const std::string& name) {
  const long rows = r.get_u32();
  const long cols = r.get_u32();
  if (rows != out.rows() || cols != out.cols()) {
    fail(ErrorCode::CorruptBinary, "tensor " + name + " has shape " + std::to_string(rows) + "x" +
                                       std::to_string(cols) + ", expected " + std::to_string(out.rows()) + "x" +
                                       std::to_string(out.cols()));
  }
  for (long i = 0; i < rows; ++i) {
    for (long j = 0; j < cols; ++j) out(i, j) = r.get_f32();
  }
}

}  // namespace detail

inline std::vector<char> serialize_vae(const TrainedVae& vae) {
  nlohmann::ordered_json log = nlohmann::ordered_json::array();
  for (const auto& e : vae.log) {
    log.push_back({e.epoch, e.beta, e.learning_rate, e.train_loss, e.validation_loss});
  }
  const nlohmann::ordered_json header = {
      {"config", to_json(vae.config)},
      {"input_dim", vae.input_dim()},
      {"latent_dim", vae.latent_dim()},
      {"ambient_dim", vae.ambient_dim()},
      {"has_pca", vae.pca.has_value()},
      {"standardization_eps", vae.standardization.eps},
      {"best_epoch", vae.best_epoch},
      {"log", log},
  };
  const std::string text = header.dump();
  io::ByteWriter w;
  w.put_raw("GFVA");
  w.put_u32(kCheckpointVersion);
  w.put_u32(static_cast<std::uint32_t>(text.size()));
  w.put_raw(text);
  detail::put_tensor(w, vae.standardization.mean);
  detail::put_tensor(w, vae.standardization.scale);
  if (vae.pca) {
    detail::put_tensor(w, vae.pca->mean);
    detail::put_tensor(w, vae.pca->components);
  }
  for_each_tensor(vae.params, [&](const std::string&, const auto& t) { detail::put_tensor(w, t); });
  return w.bytes();
}

inline TrainedVae deserialize_vae(std::span<const char> bytes, const std::string& context) {
  io::ByteReader r(bytes, context);
  if (r.get_raw(4) != "GFVA") fail(ErrorCode::CorruptBinary, context + ": bad checkpoint magic");
  const auto version = r.get_u32();
  if (version != kCheckpointVersion) fail(ErrorCode::CorruptBinary, context + ": unsupported checkpoint version");
  const auto len = r.get_u32();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.get_raw(len));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::CorruptBinary, context + ": " + e.what());
  }
  TrainedVae vae;
  vae.config = vae_config_from_json(header.at("config"));
  const long d_in = header.at("input_dim").get<long>();
  const long d_z = header.at("latent_dim").get<long>();
  const long ambient = header.at("ambient_dim").get<long>();
  vae.standardization.eps = header.at("standardization_eps").get<double>();
  vae.best_epoch = header.at("best_epoch").get<std::size_t>();
  for (const auto& e : header.at("log")) {
    vae.log.push_back({e[0].get<std::size_t>(), e[1].get<double>(), e[2].get<double>(), e[3].get<double>(),
                       e[4].get<double>()});
  }
  vae.standardization.mean.resize(d_in);
  vae.standardization.scale.resize(d_in);
  detail::get_tensor(r, vae.standardization.mean, "standardization.mean");
  detail::get_tensor(r, vae.standardization.scale, "standardization.scale");
  if (header.at("has_pca").get<bool>()) {
    LinearProjection pca{Vector(ambient), Matrix(ambient, d_in)};
    detail::get_tensor(r, pca.mean, "pca.mean");
    detail::get_tensor(r, pca.components, "pca.components");
    vae.pca = std::move(pca);
  }
  Rng shape_only(0);
  vae.params = init_parameters(d_in, vae.config.hidden_widths, d_z, shape_only);
  for_each_tensor(vae.params, [&](const std::string& name, auto& t) { detail::get_tensor(r, t, name); });
  if (r.remaining() != 0) fail(ErrorCode::CorruptBinary, context + ": trailing bytes in checkpoint");
  return vae;
}

inline void save_vae(const TrainedVae& vae, const std::filesystem::path& path) {
  io::write_file_atomic(path, serialize_vae(vae));
}

inline TrainedVae load_vae(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path, ErrorCode::IoFailure);
  return deserialize_vae(bytes, path.string());
}

// ---------------------------------------------------------------------------
// Ensembles

struct VaeEnsemble {
  std::vector<TrainedVae> members;

  std::size_t size() const { return members.size(); }
  bool empty() const { return members.empty(); }
  long latent_dim() const { return members.front().latent_dim(); }
};

/// Trains M members with seeds seed, seed+1, ..., seed+M-1. Members are
/// independent, so they may train concurrently without affecting results.
inline VaeEnsemble train_ensemble(const Matrix& data, const VaeConfig& config, std::size_t members,
                                  unsigned threads = 1) {
  if (members == 0) fail(ErrorCode::InvalidConfig, "ensemble size must be at least 1");
  VaeEnsemble ensemble;
  ensemble.members.resize(members);
  parallel_for(members, threads, [&](std::size_t a) {
    VaeConfig c = config;
    c.seed = config.seed + a;
    ensemble.members[a] = train_vae(data, c);
  });
  return ensemble;
}

}  // namespace geofaith
