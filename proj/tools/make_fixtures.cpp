// Regenerates the bundled fixtures under a target directory:
//   flat2d/   12 trajectories, D=8, K=4, states on a plane
//   cube2d/   states uniform on a rotated unit square in 64 dimensions
//   planted/  faithful arcs versus unfaithful chords (see fixture_gen.hpp)
//   golden/   small dataset, ckpt/ ensemble and frozen reward outputs

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "fixture_gen.hpp"
#include "geofaith/cli.hpp"

namespace fs = std::filesystem;
using namespace geofaith;

namespace {

Dataset make_flat2d() {
  Rng rng(21);
  const long ambient = 8;
  const Matrix basis = fixtures::random_rotation(ambient, rng).leftCols(2);
  Dataset ds;
  ds.ambient_dim = ambient;
  ds.answer_set = fixtures::letter_answers();
  for (std::size_t i = 0; i < 12; ++i) {
    Trajectory t;
    t.id = "flat" + std::to_string(i);
    t.query = "flat query " + std::to_string(i / 3);
    t.domain = i < 6 ? DomainTag::Reasoning : DomainTag::Knowledge;
    t.layer_index = 8;
    const std::size_t gold = (i / 3) % 4;
    t.gold_answer = ds.answer_set[gold];
    t.predicted_answer = ds.answer_set[i % 3 == 2 ? (gold + 1) % 4 : gold];
    Vector p(2);
    p << rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0);
    Vector v(2);
    v << rng.normal(0.0, 0.3), rng.normal(0.0, 0.3);
    for (std::uint32_t s = 0; s < 6; ++s) {
      const Vector h = basis * (p + static_cast<double>(s) * v);
      const double conf = 0.15 * static_cast<double>(s + 1);
      std::optional<StepLabel> label;
      if (i < 4) label = i % 3 == 2 && s >= 3 ? StepLabel::Unfaithful : StepLabel::Faithful;
      t.steps.push_back(fixtures::make_step(s, h, fixtures::answer_distribution(4, gold, conf), label));
    }
    t.policy_logprob = -5.0 - 0.25 * static_cast<double>(i);
    t.ref_logprob = -5.2 - 0.25 * static_cast<double>(i);
    ds.trajectories.push_back(std::move(t));
  }
  return ds;
}

Dataset make_cube2d() {
  Rng rng(5);
  const Matrix x = fixtures::rotated_hypercube(1000, 2, 64, rng);
  Dataset ds;
  ds.ambient_dim = 64;
  ds.answer_set = fixtures::letter_answers();
  for (long i = 0; i < 40; ++i) {
    Trajectory t;
    t.id = "cube" + std::to_string(i);
    t.query = "cube query " + std::to_string(i);
    t.gold_answer = "A";
    t.predicted_answer = "A";
    t.domain = DomainTag::Synthetic;
    for (long s = 0; s < 25; ++s) {
      const Vector h = x.row(i * 25 + s).transpose();
      t.steps.push_back(fixtures::make_step(static_cast<std::uint32_t>(s), h,
                                            fixtures::answer_distribution(4, 0, 0.1 + 0.03 * s), std::nullopt));
    }
    ds.trajectories.push_back(std::move(t));
  }
  return ds;
}

fixtures::PlantedParams golden_params() {
  fixtures::PlantedParams p;
  p.queries = 2;
  p.rollouts = 4;
  p.unfaithful_per_query = 1;
  p.steps = 8;
  p.ambient = 8;
  p.labeled_queries = 1;
  p.seed = 11;
  return p;
}

void run_or_die(const std::vector<std::string>& args) {
  std::ostringstream sink;
  if (cli::run(args, sink, std::cerr) != 0) {
    std::cerr << "make_fixtures: '" << args.front() << "' failed\n";
    std::exit(1);
  }
}

void make_golden(const fs::path& root) {
  write_dataset(fixtures::make_planted(golden_params()), root);
  const auto ckpt = root / "ckpt";
  run_or_die({"train-vae", "--input", root.string(), "--output", ckpt.string(), "--pool", "--members", "2",
              "--hidden-widths", "32,16", "--latent-dim", "4", "--epochs", "40", "--seed", "3"});
  const auto scratch = fs::temp_directory_path() / "geofaith_golden_reward";
  fs::remove_all(scratch);
  run_or_die({"reward", "--input", root.string(), "--ensemble", ckpt.string(), "--output", scratch.string(),
              "--detector", "baseline"});
  fs::copy_file(scratch / "rewards.csv", root / "expected_rewards.csv", fs::copy_options::overwrite_existing);
  fs::copy_file(scratch / "reward_steps.csv", root / "expected_reward_steps.csv",
                fs::copy_options::overwrite_existing);
  fs::copy_file(scratch / "detector.json", root / "detector.json", fs::copy_options::overwrite_existing);
  fs::remove_all(scratch);
  fs::remove(ckpt / "run.json");
  fs::remove(ckpt / "training_log.csv");

  const Dataset ds = load_dataset(root);
  const auto store = load_ensemble_store(ckpt);
  const auto& vae = store.groups.at(kPooledGroup).members.front();
  const auto& hidden = ds.trajectories.front().steps.front().hidden_state;
  Matrix row(1, static_cast<long>(hidden.size()));
  for (std::size_t j = 0; j < hidden.size(); ++j) row(0, static_cast<long>(j)) = hidden[j];
  const Vector mu = encode(vae, vae.preprocess(row).row(0).transpose()).mean;
  nlohmann::ordered_json latent = {{"member", member_file_name(kPooledGroup, 0)},
                                   {"trajectory", ds.trajectories.front().id},
                                   {"step", 0},
                                   {"mu", std::vector<double>(mu.data(), mu.data() + mu.size())}};
  io::write_text_atomic(root / "expected_latent.json", latent.dump(2) + "\n");
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: make_fixtures <fixtures-dir>\n";
    return 2;
  }
  const fs::path root = argv[1];
  for (const char* name : {"flat2d", "cube2d", "planted", "golden"}) fs::remove_all(root / name);
  write_dataset(make_flat2d(), root / "flat2d");
  write_dataset(make_cube2d(), root / "cube2d");
  write_dataset(fixtures::make_planted({}), root / "planted");
  make_golden(root / "golden");
  std::cout << "fixtures written to " << root << "\n";
  return 0;
}
