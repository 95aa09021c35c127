#include <doctest.h>

#include <filesystem>

#include "fixtures.hpp"
#include "somrs/error.hpp"
#include "somrs/world_io.hpp"

using namespace somrs;
using namespace somrs::ontology;

TEST_CASE("lab world loads with the scenario objects") {
  auto doc = fixtures::lab();
  for (const char* id : {"Lab001", "Robot001", "Robot002", "Shelf03", "Platform001", "Jar002"}) {
    CHECK(doc.map.contains(id));
  }
  CHECK(doc.map.has_relation({"isOn", {"Jar002", "Shelf03"}}));
  CHECK(doc.map.parent_of("Jar002") == "Lab001");
  CHECK(std::get<Symbol>(*doc.map.attribute("Jar002", "Color")).name == "Red");
  CHECK(std::get<std::string>(*doc.map.attribute("Robot001", "Capabilities")) == "TransferObject");
  CHECK(doc.ontology.tolerance_for("PositionX") == doctest::Approx(0.05));
}

TEST_CASE("load, save, load yields an identical model") {
  for (auto* load : {&fixtures::lab, &fixtures::lab_patrol}) {
    auto doc = load();
    auto text = emit_world(doc.ontology, doc.map);
    auto again = parse_world(text);
    CHECK(again.ontology == doc.ontology);
    CHECK(again.map.same_content(doc.map));
    CHECK(again.map.version() == doc.map.version());
    CHECK(emit_world(again.ontology, again.map) == text);
  }
}

TEST_CASE("file save and load") {
  auto doc = fixtures::lab();
  auto path = std::filesystem::temp_directory_path() / "somrs_world_io_test.yaml";
  save_world_file(path, doc.ontology, doc.map);
  auto back = load_world_file(path);
  CHECK(back.map.same_content(doc.map));
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_world_file(path), Error);
}

TEST_CASE("invalid worlds are rejected") {
  auto code = [](const std::string& text) {
    try {
      parse_world(text);
    } catch (const Error& e) {
      return e.code();
    }
    return Errc::IoError;
  };
  CHECK(code("{") == Errc::InvalidWorld);
  CHECK(code("types: []") == Errc::InvalidWorld);
  const std::string base = R"(
types:
  - name: Box
    parent: PhysicalObject
    attributes:
      - {name: Size, kind: numeric, range: [0, 1]}
  - name: Room
    parent: AbstractObject
    subobjects: [Box]
map:
  root:
    id: R
    type: Room
    subobjects:
)";
  CHECK(code(base + "      - {id: B, type: Box, attributes: {Size: 0.5}}\n") == Errc::IoError);
  CHECK(code(base + "      - {id: B, type: Box, attributes: {Size: 5}}\n") == Errc::InvalidWorld);
  CHECK(code(base + "      - {id: B, type: Box, attributes: {Size: big}}\n") == Errc::InvalidWorld);
  CHECK(code(base + "      - {id: B, type: Box, attributes: {Size: 1}}\n      - {id: B, type: Box, attributes: {Size: 1}}\n") ==
        Errc::InvalidWorld);
  CHECK(parse_world(base + "      - {id: B, type: Box, attributes: {Size: 5}}\n", false).map.contains("B"));
}

TEST_CASE("JSON forms roundtrip") {
  auto doc = fixtures::lab();
  for (const Value& v : {Value(12.5), Value(std::string("text")), Value(Symbol{"Red"})}) {
    CHECK(value_from_json(value_to_json(v)) == v);
  }
  CHECK(object_from_json(object_to_json(doc.map.root())) == doc.map.root());

  MapDelta d;
  d.set_attributes.push_back({"Jar002", "PositionX", 12.5, 2.0});
  d.set_attributes.push_back({"Jar002", "Color", std::nullopt, Symbol{"Red"}});
  d.add_relations.push_back({"Lab001", {"isOn", {"Jar002", "Platform001"}}});
  d.remove_relations.push_back({"Lab001", {"isOn", {"Jar002", "Shelf03"}}});
  d.add_objects.push_back({"Lab001", 3, doc.map.at("Jar001")});
  d.remove_objects.push_back({"Lab001", 1, doc.map.at("Robot002")});
  CHECK(delta_from_json(delta_to_json(d)) == d);
}
