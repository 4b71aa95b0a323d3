#pragma once

// Directory of trained ensembles, one per domain tag or a single pooled
// ensemble under the key "all":
//
//   ensemble.json          {"format", "version", "groups": {key: [files]}}
//   <key>_m<a>.gfva        member checkpoints

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "geofaith/binary_io.hpp"
#include "geofaith/error.hpp"
#include "geofaith/latent_vae.hpp"
#include "geofaith/trace_store.hpp"

namespace geofaith {

inline constexpr const char* kEnsembleIndexName = "ensemble.json";
inline constexpr const char* kPooledGroup = "all";

struct EnsembleStore {
  std::map<std::string, VaeEnsemble> groups;

  /// The ensemble trained for this domain, else the pooled one.
  std::string key_for(DomainTag domain) const {
    const auto tag = to_string(domain);
    if (groups.count(tag)) return tag;
    if (groups.count(kPooledGroup)) return kPooledGroup;
    fail(ErrorCode::UntrainedEnsemble, "no ensemble for domain '" + tag + "' and no pooled ensemble");
  }

  const VaeEnsemble& for_domain(DomainTag domain) const { return groups.at(key_for(domain)); }
};

inline std::string member_file_name(const std::string& group, std::size_t member) {
  return group + "_m" + std::to_string(member) + ".gfva";
}

inline void save_ensemble_store(const EnsembleStore& store, const std::filesystem::path& dir) {
  io::ensure_directory(dir);
  nlohmann::ordered_json groups = nlohmann::ordered_json::object();
  for (const auto& [key, ensemble] : store.groups) {
    std::vector<std::string> files;
    for (std::size_t a = 0; a < ensemble.size(); ++a) {
      files.push_back(member_file_name(key, a));
      save_vae(ensemble.members[a], dir / files.back());
    }
    groups[key] = files;
  }
  const nlohmann::ordered_json index = {{"format", "geofaith-ensemble"}, {"version", 1}, {"groups", groups}};
  io::write_text_atomic(dir / kEnsembleIndexName, index.dump(2) + "\n");
}

inline EnsembleStore load_ensemble_store(const std::filesystem::path& dir) {
  const auto bytes = io::read_file(dir / kEnsembleIndexName, ErrorCode::IoFailure);
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::CorruptBinary, (dir / kEnsembleIndexName).string() + ": " + e.what());
  }
  EnsembleStore store;
  try {
    for (const auto& [key, files] : index.at("groups").items()) {
      VaeEnsemble ensemble;
      for (const auto& f : files) ensemble.members.push_back(load_vae(dir / f.get<std::string>()));
      if (ensemble.empty()) fail(ErrorCode::UntrainedEnsemble, "ensemble group '" + key + "' has no members");
      store.groups.emplace(key, std::move(ensemble));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::CorruptBinary, (dir / kEnsembleIndexName).string() + ": " + e.what());
  }
  if (store.groups.empty()) fail(ErrorCode::UntrainedEnsemble, "ensemble directory lists no groups");
  return store;
}

}  // namespace geofaith
