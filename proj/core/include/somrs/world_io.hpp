#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "somrs/ontology.hpp"

namespace somrs::ontology {

/// One world document: type definitions followed by the root object instance.
struct WorldDocument {
  Ontology ontology;
  WorldMap map;
};

/// Parses the YAML world format. Attribute values are typed by the ontology.
/// Throws InvalidWorld for structural problems and for maps that fail
/// validation when `validate` is set; ontology errors propagate unchanged.
WorldDocument parse_world(std::string_view text, bool validate = true);
std::string emit_world(const Ontology& ont, const WorldMap& map);

WorldDocument load_world_file(const std::filesystem::path& path, bool validate = true);
void save_world_file(const std::filesystem::path& path, const Ontology& ont, const WorldMap& map);

// JSON forms used on the wire. Values map to numbers, strings (text) and
// {"symbol": name} objects.
nlohmann::json value_to_json(const Value& v);
Value value_from_json(const nlohmann::json& j);
nlohmann::json object_to_json(const WorldObject& obj);
WorldObject object_from_json(const nlohmann::json& j);
nlohmann::json delta_to_json(const MapDelta& delta);
MapDelta delta_from_json(const nlohmann::json& j);

}  // namespace somrs::ontology
