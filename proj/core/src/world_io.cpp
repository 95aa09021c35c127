#include "somrs/world_io.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "somrs/error.hpp"

namespace somrs::ontology {

namespace {

[[noreturn]] void bad(const std::string& what) { throw Error(Errc::InvalidWorld, what); }

std::string scalar(const YAML::Node& node, const char* field) {
  if (!node || !node.IsScalar()) {
    bad(std::string("expected scalar field '") + field + "'");
  }
  return node.as<std::string>();
}

double number(const YAML::Node& node, const std::string& what) {
  if (!node || !node.IsScalar()) {
    bad("expected a number for " + what);
  }
  const auto text = node.as<std::string>();
  double v = 0;
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || end != text.data() + text.size()) {
    bad("expected a number for " + what + ", got '" + text + "'");
  }
  return v;
}

std::vector<std::string> strings(const YAML::Node& node) {
  std::vector<std::string> out;
  if (!node) {
    return out;
  }
  if (!node.IsSequence()) {
    bad("expected a list");
  }
  for (const auto& item : node) {
    out.push_back(item.as<std::string>());
  }
  return out;
}

AttributeKind kind_from(const std::string& text) {
  if (text == "numeric") return AttributeKind::Numeric;
  if (text == "text") return AttributeKind::Text;
  if (text == "enumeration") return AttributeKind::Enumeration;
  if (text == "complex") return AttributeKind::Complex;
  bad("unknown attribute kind '" + text + "'");
}

AttributeDef read_attribute(const YAML::Node& node) {
  AttributeDef a;
  a.name = scalar(node["name"], "name");
  a.kind = kind_from(scalar(node["kind"], "kind"));
  if (node["unit"]) a.unit = node["unit"].as<std::string>();
  a.values = strings(node["values"]);
  a.allowed = strings(node["allowed"]);
  if (const auto r = node["range"]) {
    if (!r.IsSequence() || r.size() != 2) bad(a.name + ": range needs [lower, upper]");
    a.range = NumericRange{number(r[0], a.name), number(r[1], a.name)};
  }
  if (node["tolerance"]) a.tolerance = number(node["tolerance"], a.name + ".tolerance");
  if (const auto subs = node["attributes"]) {
    for (const auto& s : subs) {
      a.sub_attributes.push_back(read_attribute(s));
    }
  }
  return a;
}

Constraint read_constraint(const YAML::Node& node) {
  Constraint c;
  if (node["label"]) c.label = node["label"].as<std::string>();
  if (node["relation"]) {
    c.rule = RelationConstraint{node["relation"].as<std::string>(), strings(node["between"])};
  } else if (node["range"]) {
    const auto r = node["range"];
    if (!r.IsSequence() || r.size() != 2) bad("constraint range needs [lower, upper]");
    const auto attr = scalar(node["attribute"], "attribute");
    c.rule = RangeConstraint{attr, NumericRange{number(r[0], attr), number(r[1], attr)}};
  } else if (node["in"]) {
    c.rule = MembershipConstraint{scalar(node["attribute"], "attribute"), strings(node["in"])};
  } else {
    bad("constraint needs one of 'range', 'in' or 'relation'");
  }
  return c;
}

Value read_value(const YAML::Node& node, const AttributeDef* def, const std::string& path) {
  if (!node.IsScalar()) bad("attribute " + path + " must be a scalar");
  const auto text = node.as<std::string>();
  if (def != nullptr) {
    switch (def->kind) {
      case AttributeKind::Numeric:
        return number(node, path);
      case AttributeKind::Text:
        return text;
      case AttributeKind::Enumeration:
        return Symbol{text};
      case AttributeKind::Complex:
        break;
    }
  }
  double v = 0;
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec == std::errc{} && end == text.data() + text.size()) {
    return v;
  }
  return text;
}

WorldObject read_object(const YAML::Node& node, const Ontology& ont) {
  WorldObject obj;
  obj.id = scalar(node["id"], "id");
  obj.type_name = scalar(node["type"], "type");
  const bool known = ont.has_type(obj.type_name);
  if (const auto attrs = node["attributes"]) {
    if (!attrs.IsMap()) bad(obj.id + ": attributes must be a mapping");
    for (const auto& kv : attrs) {
      const auto path = kv.first.as<std::string>();
      const AttributeDef* def = known ? ont.find_attribute(obj.type_name, path) : nullptr;
      obj.attributes.emplace(path, read_value(kv.second, def, obj.id + "." + path));
    }
  }
  if (const auto rels = node["relations"]) {
    for (const auto& r : rels) {
      auto parts = strings(r);
      if (parts.size() < 2) bad(obj.id + ": relation needs a name and arguments");
      RelationInstance inst{parts.front(), {parts.begin() + 1, parts.end()}};
      obj.relations.insert(std::move(inst));
    }
  }
  if (const auto subs = node["subobjects"]) {
    for (const auto& s : subs) {
      obj.subobjects.push_back(read_object(s, ont));
    }
  }
  return obj;
}

void emit_value(YAML::Emitter& out, const Value& v) {
  if (const auto* d = std::get_if<double>(&v)) {
    out << format_number(*d);
  } else if (const auto* s = std::get_if<Symbol>(&v)) {
    out << s->name;
  } else {
    out << YAML::DoubleQuoted << std::get<std::string>(v);
  }
}

void emit_strings(YAML::Emitter& out, const std::vector<std::string>& items) {
  out << YAML::Flow << YAML::BeginSeq;
  for (const auto& s : items) out << s;
  out << YAML::EndSeq;
}

void emit_attribute(YAML::Emitter& out, const AttributeDef& a) {
  const bool simple = a.sub_attributes.empty();
  if (simple) out << YAML::Flow;
  out << YAML::BeginMap;
  out << YAML::Key << "name" << YAML::Value << a.name;
  out << YAML::Key << "kind" << YAML::Value << std::string(to_string(a.kind));
  if (!a.unit.empty()) out << YAML::Key << "unit" << YAML::Value << a.unit;
  if (!a.values.empty()) {
    out << YAML::Key << "values" << YAML::Value;
    emit_strings(out, a.values);
  }
  if (!a.allowed.empty()) {
    out << YAML::Key << "allowed" << YAML::Value;
    emit_strings(out, a.allowed);
  }
  if (a.range) {
    out << YAML::Key << "range" << YAML::Value << YAML::Flow << YAML::BeginSeq << format_number(a.range->lower)
        << format_number(a.range->upper) << YAML::EndSeq;
  }
  if (a.tolerance) out << YAML::Key << "tolerance" << YAML::Value << format_number(*a.tolerance);
  if (!simple) {
    out << YAML::Key << "attributes" << YAML::Value << YAML::BeginSeq;
    for (const auto& s : a.sub_attributes) emit_attribute(out, s);
    out << YAML::EndSeq;
  }
  out << YAML::EndMap;
}

void emit_object(YAML::Emitter& out, const WorldObject& obj) {
  out << YAML::BeginMap;
  out << YAML::Key << "id" << YAML::Value << obj.id;
  out << YAML::Key << "type" << YAML::Value << obj.type_name;
  if (!obj.attributes.empty()) {
    out << YAML::Key << "attributes" << YAML::Value << YAML::BeginMap;
    for (const auto& [path, v] : obj.attributes) {
      out << YAML::Key << path << YAML::Value;
      emit_value(out, v);
    }
    out << YAML::EndMap;
  }
  if (!obj.relations.empty()) {
    out << YAML::Key << "relations" << YAML::Value << YAML::BeginSeq;
    for (const auto& rel : obj.relations) {
      std::vector<std::string> parts{rel.name};
      parts.insert(parts.end(), rel.args.begin(), rel.args.end());
      emit_strings(out, parts);
    }
    out << YAML::EndSeq;
  }
  if (!obj.subobjects.empty()) {
    out << YAML::Key << "subobjects" << YAML::Value << YAML::BeginSeq;
    for (const auto& s : obj.subobjects) emit_object(out, s);
    out << YAML::EndSeq;
  }
  out << YAML::EndMap;
}

}  // namespace

WorldDocument parse_world(std::string_view text, bool validate) {
  YAML::Node doc;
  try {
    doc = YAML::Load(std::string(text));
  } catch (const YAML::Exception& e) {
    bad(std::string("YAML: ") + e.what());
  }
  if (!doc.IsMap()) bad("world document must be a mapping");

  Ontology ont;
  try {
    // Relations may name types declared later and type constraints may name
    // relations, so each relation is defined as soon as its argument types exist.
    std::vector<RelationDef> pending;
    if (const auto rels = doc["relations"]) {
      for (const auto& r : rels) {
        RelationDef def;
        def.name = scalar(r["name"], "name");
        def.arity = r["arity"] ? static_cast<std::size_t>(number(r["arity"], def.name)) : 2;
        def.arg_types = strings(r["args"]);
        pending.push_back(std::move(def));
      }
    }
    auto flush = [&] {
      std::erase_if(pending, [&](const RelationDef& def) {
        bool ready = std::all_of(def.arg_types.begin(), def.arg_types.end(),
                                 [&](const std::string& t) { return ont.has_type(t); });
        if (ready) ont.define_relation(def);
        return ready;
      });
    };
    flush();
    if (const auto types = doc["types"]) {
      for (const auto& t : types) {
        ObjectTypeDef def;
        def.name = scalar(t["name"], "name");
        def.parent = scalar(t["parent"], "parent");
        if (const auto attrs = t["attributes"]) {
          for (const auto& a : attrs) def.attributes.push_back(read_attribute(a));
        }
        def.subobject_types = strings(t["subobjects"]);
        if (const auto cs = t["constraints"]) {
          for (const auto& c : cs) def.constraints.push_back(read_constraint(c));
        }
        ont.define_type(std::move(def));
        flush();
      }
    }
    for (const auto& def : pending) ont.define_relation(def);
  } catch (const YAML::Exception& e) {
    bad(std::string("YAML: ") + e.what());
  }

  const auto map_node = doc["map"];
  if (!map_node || !map_node["root"]) bad("world document needs map.root");
  std::uint64_t version = 0;
  if (map_node["version"]) version = static_cast<std::uint64_t>(number(map_node["version"], "map.version"));
  WorldMap map;
  try {
    map = WorldMap(read_object(map_node["root"], ont), version);
  } catch (const YAML::Exception& e) {
    bad(std::string("YAML: ") + e.what());
  }
  if (validate) {
    if (!ont.has_type(map.root().type_name) || !ont.is_abstract(map.root().type_name)) {
      bad("map root must be an abstract object");
    }
    auto report = validate_map(map, ont);
    if (!report.empty()) {
      std::string msg = "world fails validation:";
      for (const auto& issue : report) {
        msg += " [" + std::string(to_string(issue.kind)) + " " + issue.object_id + " " + issue.detail + "]";
      }
      bad(msg);
    }
  }
  return WorldDocument{std::move(ont), std::move(map)};
}

std::string emit_world(const Ontology& ont, const WorldMap& map) {
  YAML::Emitter out;
  out << YAML::BeginMap;
  if (!ont.relations().empty()) {
    out << YAML::Key << "relations" << YAML::Value << YAML::BeginSeq;
    for (const auto& r : ont.relations()) {
      out << YAML::Flow << YAML::BeginMap << YAML::Key << "name" << YAML::Value << r.name << YAML::Key << "arity"
          << YAML::Value << r.arity << YAML::Key << "args" << YAML::Value;
      emit_strings(out, r.arg_types);
      out << YAML::EndMap;
    }
    out << YAML::EndSeq;
  }
  if (!ont.types().empty()) {
    out << YAML::Key << "types" << YAML::Value << YAML::BeginSeq;
    for (const auto& t : ont.types()) {
      out << YAML::BeginMap;
      out << YAML::Key << "name" << YAML::Value << t.name;
      out << YAML::Key << "parent" << YAML::Value << t.parent;
      if (!t.attributes.empty()) {
        out << YAML::Key << "attributes" << YAML::Value << YAML::BeginSeq;
        for (const auto& a : t.attributes) emit_attribute(out, a);
        out << YAML::EndSeq;
      }
      if (!t.subobject_types.empty()) {
        out << YAML::Key << "subobjects" << YAML::Value;
        emit_strings(out, t.subobject_types);
      }
      if (!t.constraints.empty()) {
        out << YAML::Key << "constraints" << YAML::Value << YAML::BeginSeq;
        for (const auto& c : t.constraints) {
          out << YAML::Flow << YAML::BeginMap;
          if (!c.label.empty()) out << YAML::Key << "label" << YAML::Value << c.label;
          if (const auto* r = std::get_if<RangeConstraint>(&c.rule)) {
            out << YAML::Key << "attribute" << YAML::Value << r->attribute << YAML::Key << "range" << YAML::Value
                << YAML::Flow << YAML::BeginSeq << format_number(r->range.lower) << format_number(r->range.upper)
                << YAML::EndSeq;
          } else if (const auto* m = std::get_if<MembershipConstraint>(&c.rule)) {
            out << YAML::Key << "attribute" << YAML::Value << m->attribute << YAML::Key << "in" << YAML::Value;
            emit_strings(out, m->values);
          } else {
            const auto& rc = std::get<RelationConstraint>(c.rule);
            out << YAML::Key << "relation" << YAML::Value << rc.relation << YAML::Key << "between" << YAML::Value;
            emit_strings(out, rc.arg_types);
          }
          out << YAML::EndMap;
        }
        out << YAML::EndSeq;
      }
      out << YAML::EndMap;
    }
    out << YAML::EndSeq;
  }
  out << YAML::Key << "map" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "version" << YAML::Value << map.version();
  out << YAML::Key << "root" << YAML::Value;
  emit_object(out, map.root());
  out << YAML::EndMap;
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

WorldDocument load_world_file(const std::filesystem::path& path, bool validate) {
  std::ifstream in(path);
  if (!in) {
    throw Error(Errc::IoError, "cannot open " + path.string());
  }
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_world(buf.str(), validate);
}

void save_world_file(const std::filesystem::path& path, const Ontology& ont, const WorldMap& map) {
  std::ofstream out(path);
  if (!out) {
    throw Error(Errc::IoError, "cannot write " + path.string());
  }
  out << emit_world(ont, map);
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

nlohmann::json value_to_json(const Value& v) {
  if (const auto* d = std::get_if<double>(&v)) return *d;
  if (const auto* s = std::get_if<Symbol>(&v)) return nlohmann::json{{"symbol", s->name}};
  return std::get<std::string>(v);
}

Value value_from_json(const nlohmann::json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) return j.get<std::string>();
  if (j.is_object() && j.contains("symbol")) return Symbol{j.at("symbol").get<std::string>()};
  throw Error(Errc::MalformedDocument, "not an attribute value: " + j.dump());
}

nlohmann::json object_to_json(const WorldObject& obj) {
  nlohmann::json attrs = nlohmann::json::object();
  for (const auto& [path, v] : obj.attributes) attrs[path] = value_to_json(v);
  nlohmann::json rels = nlohmann::json::array();
  for (const auto& r : obj.relations) rels.push_back({{"name", r.name}, {"args", r.args}});
  nlohmann::json subs = nlohmann::json::array();
  for (const auto& s : obj.subobjects) subs.push_back(object_to_json(s));
  return {{"id", obj.id}, {"type", obj.type_name}, {"attributes", attrs}, {"relations", rels}, {"subobjects", subs}};
}

WorldObject object_from_json(const nlohmann::json& j) {
  WorldObject obj;
  obj.id = j.at("id").get<std::string>();
  obj.type_name = j.at("type").get<std::string>();
  for (const auto& [path, v] : j.at("attributes").items()) obj.attributes.emplace(path, value_from_json(v));
  for (const auto& r : j.at("relations")) {
    obj.relations.insert({r.at("name").get<std::string>(), r.at("args").get<std::vector<std::string>>()});
  }
  for (const auto& s : j.at("subobjects")) obj.subobjects.push_back(object_from_json(s));
  return obj;
}

namespace {

nlohmann::json optional_value(const std::optional<Value>& v) { return v ? value_to_json(*v) : nlohmann::json(); }

std::optional<Value> optional_value_from(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return value_from_json(j);
}

nlohmann::json relation_change(const RelationChange& rc) {
  return {{"owner", rc.owner}, {"name", rc.relation.name}, {"args", rc.relation.args}};
}

RelationChange relation_change_from(const nlohmann::json& j) {
  return {j.at("owner").get<std::string>(),
          {j.at("name").get<std::string>(), j.at("args").get<std::vector<std::string>>()}};
}

nlohmann::json object_change(const ObjectChange& oc) {
  return {{"parent", oc.parent}, {"position", oc.position}, {"object", object_to_json(oc.object)}};
}

ObjectChange object_change_from(const nlohmann::json& j) {
  return {j.at("parent").get<std::string>(), j.at("position").get<std::size_t>(), object_from_json(j.at("object"))};
}

}  // namespace

nlohmann::json delta_to_json(const MapDelta& delta) {
  nlohmann::json out;
  out["setAttributes"] = nlohmann::json::array();
  for (const auto& c : delta.set_attributes) {
    out["setAttributes"].push_back({{"object", c.object_id},
                                    {"attribute", c.attribute},
                                    {"value", optional_value(c.value)},
                                    {"prior", optional_value(c.prior)}});
  }
  out["addRelations"] = nlohmann::json::array();
  for (const auto& rc : delta.add_relations) out["addRelations"].push_back(relation_change(rc));
  out["removeRelations"] = nlohmann::json::array();
  for (const auto& rc : delta.remove_relations) out["removeRelations"].push_back(relation_change(rc));
  out["addObjects"] = nlohmann::json::array();
  for (const auto& oc : delta.add_objects) out["addObjects"].push_back(object_change(oc));
  out["removeObjects"] = nlohmann::json::array();
  for (const auto& oc : delta.remove_objects) out["removeObjects"].push_back(object_change(oc));
  return out;
}

MapDelta delta_from_json(const nlohmann::json& j) {
  try {
    MapDelta d;
    for (const auto& c : j.at("setAttributes")) {
      d.set_attributes.push_back({c.at("object").get<std::string>(), c.at("attribute").get<std::string>(),
                                  optional_value_from(c.at("value")), optional_value_from(c.at("prior"))});
    }
    for (const auto& rc : j.at("addRelations")) d.add_relations.push_back(relation_change_from(rc));
    for (const auto& rc : j.at("removeRelations")) d.remove_relations.push_back(relation_change_from(rc));
    for (const auto& oc : j.at("addObjects")) d.add_objects.push_back(object_change_from(oc));
    for (const auto& oc : j.at("removeObjects")) d.remove_objects.push_back(object_change_from(oc));
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::MalformedDocument, std::string("delta: ") + e.what());
  }
}

}  // namespace somrs::ontology
