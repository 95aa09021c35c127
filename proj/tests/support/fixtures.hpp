#pragma once

#include <filesystem>
#include <string>

#include "somrs/world_io.hpp"

namespace fixtures {

inline std::filesystem::path scenario_path(const std::string& rel) {
  return std::filesystem::path(SOMRS_SCENARIO_DIR) / rel;
}

inline somrs::ontology::WorldDocument lab() { return somrs::ontology::load_world_file(scenario_path("worlds/lab.yaml")); }

inline somrs::ontology::WorldDocument lab_patrol() {
  return somrs::ontology::load_world_file(scenario_path("worlds/lab_patrol.yaml"));
}

}  // namespace fixtures
