#pragma once

// Trajectory interchange format.
//
// A dataset is a directory holding `manifest.json` plus one GFTR binary per
// trajectory. GFTR layout, all little-endian:
//
//   "GFTR" | u32 version | u32 T | u32 D | u32 K | f32[T*D] hidden | f32[T*K] answers
//
// Both matrices are row-major (one row per step). K = 0 means the dataset
// carries no answer distributions.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "geofaith/binary_io.hpp"
#include "geofaith/error.hpp"

namespace geofaith {

inline constexpr std::uint32_t kGftrVersion = 1;
inline constexpr std::uint32_t kManifestVersion = 1;
inline constexpr char kGftrMagic[4] = {'G', 'F', 'T', 'R'};
inline constexpr const char* kManifestName = "manifest.json";

enum class StepLabel { Faithful, Unfaithful, Uncertain };

enum class DomainTag { Math, Reasoning, Knowledge, Agent, Synthetic };

inline std::string to_string(StepLabel label) {
  switch (label) {
    case StepLabel::Faithful: return "faithful";
    case StepLabel::Unfaithful: return "unfaithful";
    case StepLabel::Uncertain: return "uncertain";
  }
  return "uncertain";
}

inline std::optional<StepLabel> parse_step_label(std::string_view text) {
  if (text == "faithful") return StepLabel::Faithful;
  if (text == "unfaithful") return StepLabel::Unfaithful;
  if (text == "uncertain") return StepLabel::Uncertain;
  return std::nullopt;
}

inline std::string to_string(DomainTag tag) {
  switch (tag) {
    case DomainTag::Math: return "math";
    case DomainTag::Reasoning: return "reasoning";
    case DomainTag::Knowledge: return "knowledge";
    case DomainTag::Agent: return "agent";
    case DomainTag::Synthetic: return "synthetic";
  }
  return "synthetic";
}

inline std::optional<DomainTag> parse_domain_tag(std::string_view text) {
  if (text == "math") return DomainTag::Math;
  if (text == "reasoning") return DomainTag::Reasoning;
  if (text == "knowledge") return DomainTag::Knowledge;
  if (text == "agent") return DomainTag::Agent;
  if (text == "synthetic") return DomainTag::Synthetic;
  return std::nullopt;
}

struct Step {
  std::uint32_t index = 0;
  std::string text;
  std::vector<float> hidden_state;
  std::vector<float> answer_dist;  ///< empty when the dataset has K = 0
  std::optional<StepLabel> label;

  bool operator==(const Step&) const = default;
};

struct Trajectory {
  std::string id;
  std::string query;
  std::vector<Step> steps;
  std::string gold_answer;
  std::string predicted_answer;
  DomainTag domain = DomainTag::Synthetic;
  int layer_index = 0;
  /// Sequence log-probabilities under the policy and reference models, when
  /// the producer supplied them (consumed by grpo-loss only).
  std::optional<double> policy_logprob;
  std::optional<double> ref_logprob;
  std::map<std::string, std::string> metadata;

  std::size_t size() const { return steps.size(); }

  bool operator==(const Trajectory&) const = default;
};

struct Dataset {
  std::uint32_t version = kManifestVersion;
  std::uint32_t ambient_dim = 0;
  std::vector<std::string> answer_set;
  std::vector<Trajectory> trajectories;

  std::size_t answer_count() const { return answer_set.size(); }

  bool operator==(const Dataset&) const = default;
};

// ---------------------------------------------------------------------------
// Validation

enum class ViolationCode {
  EmptyTrajectory,
  IndexGap,
  HiddenDimMismatch,
  AnswerDimMismatch,
  DistributionNotNormalized,
  NonFiniteValue,
};

inline std::string to_string(ViolationCode code) {
  switch (code) {
    case ViolationCode::EmptyTrajectory: return "EmptyTrajectory";
    case ViolationCode::IndexGap: return "IndexGap";
    case ViolationCode::HiddenDimMismatch: return "HiddenDimMismatch";
    case ViolationCode::AnswerDimMismatch: return "AnswerDimMismatch";
    case ViolationCode::DistributionNotNormalized: return "DistributionNotNormalized";
    case ViolationCode::NonFiniteValue: return "NonFiniteValue";
  }
  return "Unknown";
}

struct Violation {
  ViolationCode code;
  std::optional<std::uint32_t> step;
  std::string detail;
};

struct ValidationReport {
  std::vector<Violation> violations;

  bool ok() const { return violations.empty(); }
  std::size_t count(ViolationCode code) const {
    std::size_t n = 0;
    for (const auto& v : violations) n += v.code == code;
    return n;
  }
};

inline constexpr double kDistributionTolerance = 1e-6;

/// Lists every violated invariant; never throws. Index gaps are reported once,
/// at the first out-of-sequence step.
inline ValidationReport validate_trajectory(const Trajectory& t, std::size_t ambient_dim, std::size_t answer_count) {
  ValidationReport report;
  auto add = [&](ViolationCode code, std::optional<std::uint32_t> step, std::string detail) {
    report.violations.push_back({code, step, std::move(detail)});
  };
  if (t.steps.empty()) add(ViolationCode::EmptyTrajectory, std::nullopt, "trajectory " + t.id + " has no steps");

  for (std::size_t i = 0; i < t.steps.size(); ++i) {
    if (t.steps[i].index != i) {
      add(ViolationCode::IndexGap, t.steps[i].index,
          "expected index " + std::to_string(i) + ", found " + std::to_string(t.steps[i].index));
      break;
    }
  }

  for (std::size_t i = 0; i < t.steps.size(); ++i) {
    const Step& s = t.steps[i];
    const auto pos = static_cast<std::uint32_t>(i);
    if (s.hidden_state.size() != ambient_dim) {
      add(ViolationCode::HiddenDimMismatch, pos,
          "hidden state has " + std::to_string(s.hidden_state.size()) + " values, expected " +
              std::to_string(ambient_dim));
    }
    bool finite = true;
    for (float v : s.hidden_state) finite = finite && std::isfinite(v);
    for (float v : s.answer_dist) finite = finite && std::isfinite(v);
    if (!finite) {
      add(ViolationCode::NonFiniteValue, pos, "non-finite payload value");
      continue;
    }
    if (s.answer_dist.size() != answer_count) {
      add(ViolationCode::AnswerDimMismatch, pos,
          "answer distribution has " + std::to_string(s.answer_dist.size()) + " entries, expected " +
              std::to_string(answer_count));
    } else if (answer_count > 0) {
      double sum = 0.0;
      bool negative = false;
      for (float p : s.answer_dist) {
        sum += p;
        negative = negative || p < 0.0f;
      }
      if (negative || std::abs(sum - 1.0) > kDistributionTolerance) {
        add(ViolationCode::DistributionNotNormalized, pos,
            negative ? "negative probability" : "sums to " + std::to_string(sum));
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// GFTR binary records

inline std::vector<char> encode_gftr(const Trajectory& t, std::uint32_t ambient_dim, std::uint32_t answer_count) {
  io::ByteWriter w;
  w.put_raw(std::string_view(kGftrMagic, 4));
  w.put_u32(kGftrVersion);
  w.put_u32(static_cast<std::uint32_t>(t.steps.size()));
  w.put_u32(ambient_dim);
  w.put_u32(answer_count);
  for (const Step& s : t.steps) w.put_f32s(s.hidden_state);
  for (const Step& s : t.steps) w.put_f32s(s.answer_dist);
  return w.bytes();
}

struct GftrHeader {
  std::uint32_t version = 0;
  std::uint32_t steps = 0;
  std::uint32_t ambient_dim = 0;
  std::uint32_t answer_count = 0;
};

inline std::size_t gftr_byte_length(std::size_t steps, std::size_t ambient_dim, std::size_t answer_count) {
  return 20 + 4 * steps * (ambient_dim + answer_count);
}

// ---------------------------------------------------------------------------
// Manifest + dataset

namespace detail {

inline std::string gftr_file_name(std::size_t position) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "traj_%05zu.gftr", position);
  return buf;
}

inline nlohmann::ordered_json label_summary(const Trajectory& t) {
  std::size_t faithful = 0, unfaithful = 0, uncertain = 0, unlabeled = 0;
  for (const Step& s : t.steps) {
    if (!s.label) {
      ++unlabeled;
      continue;
    }
    switch (*s.label) {
      case StepLabel::Faithful: ++faithful; break;
      case StepLabel::Unfaithful: ++unfaithful; break;
      case StepLabel::Uncertain: ++uncertain; break;
    }
  }
  return {{"faithful", faithful}, {"unfaithful", unfaithful}, {"uncertain", uncertain}, {"unlabeled", unlabeled}};
}

template <typename T>
T manifest_get(const nlohmann::json& node, const char* key, const std::string& where) {
  if (!node.contains(key)) fail(ErrorCode::CorruptBinary, where + ": manifest entry lacks '" + key + "'");
  try {
    return node.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::CorruptBinary, where + ": bad manifest field '" + key + "': " + e.what());
  }
}

}  // namespace detail

/// Serializes the dataset directory. Binaries are written first and the
/// manifest last, each via temp-file + rename; the manifest is the commit
/// point, so a reader never sees a manifest naming a half-written file.
inline void write_dataset(const Dataset& dataset, const std::filesystem::path& root) {
  io::ensure_directory(root);
  const auto answer_count = static_cast<std::uint32_t>(dataset.answer_count());

  nlohmann::ordered_json entries = nlohmann::ordered_json::array();
  for (const Trajectory& t : dataset.trajectories) {
    for (const Step& s : t.steps) {
      if (s.hidden_state.size() != dataset.ambient_dim || s.answer_dist.size() != answer_count) {
        fail(ErrorCode::DimensionMismatch, "trajectory " + t.id + " step " + std::to_string(s.index) +
                                               " does not match the dataset D/K");
      }
    }
  }
  for (std::size_t i = 0; i < dataset.trajectories.size(); ++i) {
    const Trajectory& t = dataset.trajectories[i];
    const std::string file = detail::gftr_file_name(i);
    const std::vector<char> bytes = encode_gftr(t, dataset.ambient_dim, answer_count);
    io::write_file_atomic(root / file, bytes);

    nlohmann::ordered_json steps = nlohmann::ordered_json::array();
    for (const Step& s : t.steps) {
      steps.push_back({{"text", s.text}, {"label", s.label ? nlohmann::ordered_json(to_string(*s.label)) : nullptr}});
    }
    nlohmann::ordered_json entry = {
        {"id", t.id},
        {"path", file},
        {"byte_length", bytes.size()},
        {"num_steps", t.steps.size()},
        {"query", t.query},
        {"gold_answer", t.gold_answer},
        {"predicted_answer", t.predicted_answer},
        {"domain_tag", to_string(t.domain)},
        {"layer_index", t.layer_index},
        {"label_summary", detail::label_summary(t)},
        {"steps", steps},
    };
    if (t.policy_logprob) entry["policy_logprob"] = *t.policy_logprob;
    if (t.ref_logprob) entry["ref_logprob"] = *t.ref_logprob;
    if (!t.metadata.empty()) entry["metadata"] = t.metadata;
    entries.push_back(std::move(entry));
  }

  nlohmann::ordered_json manifest = {
      {"format", "geofaith-dataset"},
      {"version", dataset.version},
      {"ambient_dim", dataset.ambient_dim},
      {"answer_set", dataset.answer_set},
      {"trajectories", entries},
  };
  io::write_text_atomic(root / kManifestName, manifest.dump(2) + "\n");
}

/// Decodes the whole dataset or throws; no partially loaded dataset escapes.
inline Dataset load_dataset(const std::filesystem::path& root) {
  const auto manifest_path = root / kManifestName;
  if (!std::filesystem::is_regular_file(manifest_path)) {
    fail(ErrorCode::MissingManifest, "no " + std::string(kManifestName) + " in " + root.string());
  }
  const std::vector<char> manifest_bytes = io::read_file(manifest_path, ErrorCode::MissingManifest);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(manifest_bytes.begin(), manifest_bytes.end());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::CorruptBinary, manifest_path.string() + ": " + e.what());
  }

  Dataset ds;
  const std::string where = manifest_path.string();
  ds.version = detail::manifest_get<std::uint32_t>(manifest, "version", where);
  ds.ambient_dim = detail::manifest_get<std::uint32_t>(manifest, "ambient_dim", where);
  ds.answer_set = detail::manifest_get<std::vector<std::string>>(manifest, "answer_set", where);
  const auto& entries = manifest.at("trajectories");
  const auto answer_count = static_cast<std::uint32_t>(ds.answer_set.size());

  for (const auto& entry : entries) {
    Trajectory t;
    t.id = detail::manifest_get<std::string>(entry, "id", where);
    const std::string context = "trajectory " + t.id;
    const auto rel_path = detail::manifest_get<std::string>(entry, "path", context);
    const auto declared_steps = detail::manifest_get<std::uint32_t>(entry, "num_steps", context);
    const auto declared_bytes = detail::manifest_get<std::size_t>(entry, "byte_length", context);
    t.query = detail::manifest_get<std::string>(entry, "query", context);
    t.gold_answer = detail::manifest_get<std::string>(entry, "gold_answer", context);
    t.predicted_answer = detail::manifest_get<std::string>(entry, "predicted_answer", context);
    const auto tag = detail::manifest_get<std::string>(entry, "domain_tag", context);
    const auto domain = parse_domain_tag(tag);
    if (!domain) fail(ErrorCode::CorruptBinary, context + ": unknown domain_tag '" + tag + "'");
    t.domain = *domain;
    t.layer_index = detail::manifest_get<int>(entry, "layer_index", context);
    if (entry.contains("policy_logprob")) t.policy_logprob = entry.at("policy_logprob").get<double>();
    if (entry.contains("ref_logprob")) t.ref_logprob = entry.at("ref_logprob").get<double>();
    if (entry.contains("metadata")) t.metadata = entry.at("metadata").get<std::map<std::string, std::string>>();

    const auto file_path = root / rel_path;
    if (!std::filesystem::is_regular_file(file_path)) {
      fail(ErrorCode::CorruptBinary, context + ": missing binary " + file_path.string());
    }
    const std::vector<char> bytes = io::read_file(file_path, ErrorCode::CorruptBinary);
    io::ByteReader r(bytes, context);
    if (r.get_raw(4) != std::string_view(kGftrMagic, 4)) fail(ErrorCode::CorruptBinary, context + ": bad magic");
    GftrHeader h;
    h.version = r.get_u32();
    h.steps = r.get_u32();
    h.ambient_dim = r.get_u32();
    h.answer_count = r.get_u32();
    if (h.version != kGftrVersion) {
      fail(ErrorCode::CorruptBinary, context + ": unsupported GFTR version " + std::to_string(h.version));
    }
    if (h.ambient_dim != ds.ambient_dim || h.answer_count != answer_count) {
      fail(ErrorCode::DimensionMismatch, context + ": header D=" + std::to_string(h.ambient_dim) +
                                             " K=" + std::to_string(h.answer_count) + ", manifest D=" +
                                             std::to_string(ds.ambient_dim) + " K=" + std::to_string(answer_count));
    }
    if (h.steps != declared_steps) {
      fail(ErrorCode::CorruptBinary, context + ": header declares " + std::to_string(h.steps) +
                                         " steps, manifest " + std::to_string(declared_steps));
    }
    const std::size_t expected = gftr_byte_length(h.steps, h.ambient_dim, h.answer_count);
    if (bytes.size() != expected || declared_bytes != expected) {
      fail(ErrorCode::CorruptBinary, context + ": expected " + std::to_string(expected) + " bytes, file has " +
                                         std::to_string(bytes.size()));
    }

    const auto& step_entries = entry.contains("steps") ? entry.at("steps") : nlohmann::json::array();
    if (!step_entries.empty() && step_entries.size() != h.steps) {
      fail(ErrorCode::CorruptBinary, context + ": step metadata count differs from binary");
    }
    t.steps.resize(h.steps);
    for (std::uint32_t i = 0; i < h.steps; ++i) {
      Step& s = t.steps[i];
      s.index = i;
      s.hidden_state.resize(h.ambient_dim);
      r.get_f32s(s.hidden_state);
      if (!step_entries.empty()) {
        const auto& se = step_entries[i];
        s.text = se.value("text", std::string{});
        if (se.contains("label") && !se.at("label").is_null()) {
          const auto label_text = se.at("label").get<std::string>();
          s.label = parse_step_label(label_text);
          if (!s.label) fail(ErrorCode::CorruptBinary, context + ": unknown step label '" + label_text + "'");
        }
      }
    }
    for (std::uint32_t i = 0; i < h.steps; ++i) {
      t.steps[i].answer_dist.resize(h.answer_count);
      r.get_f32s(t.steps[i].answer_dist);
    }
    ds.trajectories.push_back(std::move(t));
  }
  return ds;
}

/// Validates every trajectory against the dataset's D and K.
inline std::vector<std::pair<std::string, ValidationReport>> validate_dataset(const Dataset& ds) {
  std::vector<std::pair<std::string, ValidationReport>> out;
  for (const auto& t : ds.trajectories) out.emplace_back(t.id, validate_trajectory(t, ds.ambient_dim, ds.answer_count()));
  return out;
}

/// All hidden states stacked row-wise, in trajectory then step order.
template <typename Matrix>
Matrix stack_hidden_states(const Dataset& ds) {
  std::size_t rows = 0;
  for (const auto& t : ds.trajectories) rows += t.steps.size();
  Matrix out(static_cast<long>(rows), static_cast<long>(ds.ambient_dim));
  long r = 0;
  for (const auto& t : ds.trajectories) {
    for (const auto& s : t.steps) {
      for (std::size_t j = 0; j < ds.ambient_dim; ++j) out(r, static_cast<long>(j)) = s.hidden_state[j];
      ++r;
    }
  }
  return out;
}

}  // namespace geofaith
