#pragma once

// Synthetic trajectory datasets used as bundled fixtures and by the tests.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "geofaith/random.hpp"
#include "geofaith/spectral_dimension.hpp"
#include "geofaith/trace_store.hpp"

namespace geofaith::fixtures {

/// Haar-random orthogonal matrix (QR of a Gaussian matrix with sign fix).
inline Matrix random_rotation(long n, Rng& rng) {
  Matrix g(n, n);
  for (long i = 0; i < n; ++i) {
    for (long j = 0; j < n; ++j) g(i, j) = rng.normal();
  }
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ();
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (long j = 0; j < n; ++j) {
    if (r(j, j) < 0) q.col(j) *= -1.0;
  }
  return q;
}

/// N points uniform on [0,1]^d, zero-padded to `ambient` dims and rotated.
inline Matrix rotated_hypercube(std::size_t n, long d, long ambient, Rng& rng) {
  Matrix x = Matrix::Zero(static_cast<long>(n), ambient);
  for (long i = 0; i < static_cast<long>(n); ++i) {
    for (long j = 0; j < d; ++j) x(i, j) = rng.uniform();
  }
  return x * random_rotation(ambient, rng).transpose();
}

/// Softmax over logits, as floats.
inline std::vector<float> softmax(const std::vector<double>& logits) {
  double mx = logits.front();
  for (double l : logits) mx = std::max(mx, l);
  double sum = 0.0;
  std::vector<double> e;
  for (double l : logits) {
    e.push_back(std::exp(l - mx));
    sum += e.back();
  }
  std::vector<float> out;
  for (double v : e) out.push_back(static_cast<float>(v / sum));
  // Push rounding error into the largest entry so the row sums to 1 in float.
  double fs = 0.0;
  std::size_t arg = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    fs += out[i];
    if (out[i] > out[arg]) arg = i;
  }
  out[arg] = static_cast<float>(out[arg] + (1.0 - fs));
  return out;
}

/// Answer distribution whose mass on `answer` follows `confidence` in [0, 1].
inline std::vector<float> answer_distribution(std::size_t k, std::size_t answer, double confidence) {
  std::vector<double> logits(k, 0.0);
  logits[answer] = 6.0 * confidence;
  return softmax(logits);
}

inline Step make_step(std::uint32_t index, const Vector& hidden, std::vector<float> dist, std::optional<StepLabel> label) {
  Step s;
  s.index = index;
  s.text = "Step " + std::to_string(index + 1) + ".";
  for (long j = 0; j < hidden.size(); ++j) s.hidden_state.push_back(static_cast<float>(hidden(j)));
  s.answer_dist = std::move(dist);
  s.label = label;
  return s;
}

inline const std::vector<std::string>& letter_answers() {
  static const std::vector<std::string> a{"A", "B", "C", "D"};
  return a;
}

// ---------------------------------------------------------------------------
// Planted fixture: faithful rollouts trace arcs of a shared circle with
// steadily sharpening answer beliefs; unfaithful rollouts cut straight chords
// across its interior while their beliefs oscillate.

struct PlantedParams {
  std::size_t queries = 10;
  std::size_t rollouts = 8;
  std::size_t unfaithful_per_query = 2;
  std::size_t steps = 12;
  long ambient = 16;
  double radius = 3.0;
  double sweep = 4.7;
  double chord_span = 1.9;
  double noise = 0.03;
  std::size_t labeled_queries = 3;
  std::uint64_t seed = 7;
};

inline Dataset make_planted(const PlantedParams& p) {
  Rng rng(p.seed);
  const Matrix rot = random_rotation(p.ambient, rng);
  const std::size_t k = letter_answers().size();
  Dataset ds;
  ds.ambient_dim = static_cast<std::uint32_t>(p.ambient);
  ds.answer_set = letter_answers();
  auto on_circle = [&](double angle) {
    Vector v = Vector::Zero(p.ambient);
    v(0) = p.radius * std::cos(angle);
    v(1) = p.radius * std::sin(angle);
    return v;
  };
  auto embed = [&](const Vector& local) {
    Vector x = rot * local;
    for (long j = 0; j < x.size(); ++j) x(j) += p.noise * rng.normal();
    return x;
  };
  for (std::size_t q = 0; q < p.queries; ++q) {
    const std::size_t gold = q % k;
    for (std::size_t r = 0; r < p.rollouts; ++r) {
      const bool unfaithful = r >= p.rollouts - p.unfaithful_per_query;
      const bool labeled = q < p.labeled_queries;
      Trajectory t;
      char id[32];
      std::snprintf(id, sizeof id, "q%02zu_r%02zu", q, r);
      t.id = id;
      t.query = "planted query " + std::to_string(q);
      t.gold_answer = letter_answers()[gold];
      t.domain = DomainTag::Synthetic;
      t.layer_index = 16;
      t.metadata["planted"] = unfaithful ? "unfaithful" : "faithful";
      const double start = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const Vector from = on_circle(start), to = on_circle(start + p.chord_span);
      const std::size_t wrong = (gold + 1 + r % (k - 1)) % k;
      for (std::size_t s = 0; s < p.steps; ++s) {
        const double frac = static_cast<double>(s) / static_cast<double>(p.steps - 1);
        Vector local;
        std::vector<float> dist;
        if (!unfaithful) {
          local = on_circle(start + p.sweep * frac);
          dist = answer_distribution(k, gold, 0.1 + 0.8 * frac);
        } else {
          local = from + frac * (to - from);
          const bool swing = s % 2 == 0;
          dist = answer_distribution(k, swing ? wrong : gold, swing ? 0.85 : 0.05);
        }
        std::optional<StepLabel> label;
        if (labeled) label = unfaithful ? StepLabel::Unfaithful : StepLabel::Faithful;
        t.steps.push_back(make_step(static_cast<std::uint32_t>(s), embed(local), dist, label));
      }
      t.predicted_answer = unfaithful ? letter_answers()[wrong] : t.gold_answer;
      t.policy_logprob = -10.0 - static_cast<double>(r);
      t.ref_logprob = -10.5 - static_cast<double>(r);
      ds.trajectories.push_back(std::move(t));
    }
  }
  return ds;
}

}  // namespace geofaith::fixtures
