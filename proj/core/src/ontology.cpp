#include "somrs/ontology.hpp"

#include <algorithm>
#include <charconv>
#include <functional>

#include "somrs/error.hpp"

namespace somrs::ontology {

std::string format_number(double value) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  if (ec != std::errc{}) {
    return "nan";
  }
  return std::string(buf, end);
}

std::string to_literal(const Value& value) {
  if (const auto* d = std::get_if<double>(&value)) {
    return format_number(*d);
  }
  if (const auto* s = std::get_if<Symbol>(&value)) {
    return s->name;
  }
  const auto& text = std::get<std::string>(value);
  std::string out = "\"";
  for (char c : text) {
    if (c == '"' || c == '\\') {
      out.push_back('\\');
    }
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

std::string_view to_string(AttributeKind kind) {
  switch (kind) {
    case AttributeKind::Numeric:
      return "numeric";
    case AttributeKind::Text:
      return "text";
    case AttributeKind::Enumeration:
      return "enumeration";
    case AttributeKind::Complex:
      return "complex";
  }
  return "?";
}

std::string_view to_string(IssueKind kind) {
  switch (kind) {
    case IssueKind::MissingAttribute:
      return "MissingAttribute";
    case IssueKind::UnknownAttribute:
      return "UnknownAttribute";
    case IssueKind::TypeMismatch:
      return "TypeMismatch";
    case IssueKind::ConstraintViolated:
      return "ConstraintViolated";
    case IssueKind::MissingSubobject:
      return "MissingSubobject";
    case IssueKind::UnexpectedSubobject:
      return "UnexpectedSubobject";
    case IssueKind::RelationMissing:
      return "RelationMissing";
    case IssueKind::UnknownRelation:
      return "UnknownRelation";
    case IssueKind::ArityMismatch:
      return "ArityMismatch";
    case IssueKind::RelationArgumentType:
      return "RelationArgumentType";
    case IssueKind::DanglingReference:
      return "DanglingReference";
    case IssueKind::DuplicateId:
      return "DuplicateId";
    case IssueKind::UnknownType:
      return "UnknownType";
  }
  return "?";
}

std::string to_string(const RelationInstance& rel) {
  std::string out = rel.name + "(";
  for (std::size_t i = 0; i < rel.args.size(); ++i) {
    if (i > 0) {
      out += ", ";
    }
    out += rel.args[i];
  }
  return out + ")";
}

// ---------------------------------------------------------------------------
// Ontology
// ---------------------------------------------------------------------------

Ontology::Ontology() {
  builtins_.push_back(ObjectTypeDef{.name = std::string(kRootType)});
  builtins_.push_back(ObjectTypeDef{.name = std::string(kPhysicalType), .parent = std::string(kRootType)});
  builtins_.push_back(ObjectTypeDef{
      .name = std::string(kAbstractType), .parent = std::string(kRootType), .abstract_type = true});
}

const ObjectTypeDef* Ontology::find(std::string_view name) const {
  for (const auto& t : builtins_) {
    if (t.name == name) {
      return &t;
    }
  }
  for (const auto& t : types_) {
    if (t.name == name) {
      return &t;
    }
  }
  return nullptr;
}

bool Ontology::has_type(std::string_view name) const { return find(name) != nullptr; }

bool Ontology::is_builtin(std::string_view name) const {
  return name == kRootType || name == kPhysicalType || name == kAbstractType;
}

const ObjectTypeDef& Ontology::type(std::string_view name) const {
  const auto* t = find(name);
  if (t == nullptr) {
    throw Error(Errc::UnknownType, std::string(name));
  }
  return *t;
}

const RelationDef* Ontology::find_relation(std::string_view name) const {
  for (const auto& r : relations_) {
    if (r.name == name) {
      return &r;
    }
  }
  return nullptr;
}

std::vector<std::string> Ontology::lineage(std::string_view type_name) const {
  std::vector<std::string> chain;
  const auto* t = &type(type_name);
  while (true) {
    chain.push_back(t->name);
    if (t->parent.empty()) {
      break;
    }
    t = &type(t->parent);
  }
  std::reverse(chain.begin(), chain.end());
  return chain;
}

bool Ontology::is_subtype(std::string_view type_name, std::string_view ancestor) const {
  if (!has_type(ancestor)) {
    throw Error(Errc::UnknownType, std::string(ancestor));
  }
  const auto* t = &type(type_name);
  while (true) {
    if (t->name == ancestor) {
      return true;
    }
    if (t->parent.empty()) {
      return false;
    }
    t = &type(t->parent);
  }
}

bool Ontology::is_abstract(std::string_view type_name) const {
  return is_subtype(type_name, kAbstractType);
}

bool Ontology::is_elementary(std::string_view type_name) const {
  if (type_name == kPhysicalType || !is_subtype(type_name, kPhysicalType)) {
    return false;
  }
  return std::none_of(types_.begin(), types_.end(),
                      [&](const ObjectTypeDef& t) { return t.parent == type_name; });
}

std::vector<const AttributeDef*> Ontology::attributes_of(std::string_view type_name) const {
  std::vector<const AttributeDef*> out;
  for (const auto& name : lineage(type_name)) {
    for (const auto& a : type(name).attributes) {
      out.push_back(&a);
    }
  }
  return out;
}

namespace {

const AttributeDef* resolve_in(const std::vector<const AttributeDef*>& attrs, std::string_view path) {
  auto dot = path.find('.');
  std::string_view head = path.substr(0, dot);
  for (const auto* a : attrs) {
    if (a->name != head) {
      continue;
    }
    if (dot == std::string_view::npos) {
      return a;
    }
    std::string_view tail = path.substr(dot + 1);
    for (const auto& sub : a->sub_attributes) {
      if (sub.name == tail) {
        return &sub;
      }
    }
    return nullptr;
  }
  return nullptr;
}

}  // namespace

const AttributeDef* Ontology::find_attribute(std::string_view type_name, std::string_view path) const {
  return resolve_in(attributes_of(type_name), path);
}

const AttributeDef* Ontology::find_attribute_any(std::string_view path) const {
  for (const auto& t : types_) {
    std::vector<const AttributeDef*> own;
    for (const auto& a : t.attributes) {
      own.push_back(&a);
    }
    if (const auto* a = resolve_in(own, path)) {
      return a;
    }
  }
  return nullptr;
}

std::vector<const Constraint*> Ontology::constraints_of(std::string_view type_name) const {
  std::vector<const Constraint*> out;
  for (const auto& name : lineage(type_name)) {
    for (const auto& c : type(name).constraints) {
      out.push_back(&c);
    }
  }
  return out;
}

std::vector<std::string> Ontology::subobject_types_of(std::string_view type_name) const {
  std::vector<std::string> out;
  for (const auto& name : lineage(type_name)) {
    for (const auto& s : type(name).subobject_types) {
      out.push_back(s);
    }
  }
  return out;
}

double Ontology::tolerance_for(std::string_view path) const {
  if (const auto* a = find_attribute_any(path); a != nullptr && a->tolerance) {
    return *a->tolerance;
  }
  return kDefaultTolerance;
}

namespace {

void check_attribute(const AttributeDef& a, bool nested) {
  if (a.name.empty() || a.name.find('.') != std::string::npos) {
    throw Error(Errc::InvalidAttribute, "attribute name '" + a.name + "' is not an identifier");
  }
  switch (a.kind) {
    case AttributeKind::Complex: {
      if (nested) {
        throw Error(Errc::InvalidAttribute, a.name + ": complex attributes nest one level only");
      }
      if (a.sub_attributes.empty()) {
        throw Error(Errc::InvalidAttribute, a.name + ": complex attribute needs a sub-attribute");
      }
      std::set<std::string> seen;
      for (const auto& sub : a.sub_attributes) {
        check_attribute(sub, true);
        if (!seen.insert(sub.name).second) {
          throw Error(Errc::DuplicateName, a.name + "." + sub.name);
        }
      }
      break;
    }
    case AttributeKind::Numeric:
      if (a.range && a.range->lower > a.range->upper) {
        throw Error(Errc::InvalidAttribute, a.name + ": range lower bound exceeds upper bound");
      }
      if (a.tolerance && *a.tolerance < 0) {
        throw Error(Errc::InvalidAttribute, a.name + ": negative tolerance");
      }
      break;
    case AttributeKind::Enumeration: {
      if (a.values.empty()) {
        throw Error(Errc::InvalidAttribute, a.name + ": enumeration without values");
      }
      std::set<std::string> distinct(a.values.begin(), a.values.end());
      if (distinct.size() != a.values.size()) {
        throw Error(Errc::InvalidAttribute, a.name + ": enumeration values must be distinct");
      }
      for (const auto& v : a.allowed) {
        if (!distinct.contains(v)) {
          throw Error(Errc::InvalidAttribute, a.name + ": allowed value '" + v + "' not declared");
        }
      }
      break;
    }
    case AttributeKind::Text:
      break;
  }
}

}  // namespace

void Ontology::define_type(ObjectTypeDef def) {
  if (def.name.empty()) {
    throw Error(Errc::InvalidAttribute, "type name must be nonempty");
  }
  if (def.parent == def.name) {
    throw Error(Errc::CycleDetected, def.name + " cannot inherit from itself");
  }
  if (has_type(def.name)) {
    throw Error(Errc::DuplicateName, def.name);
  }
  if (!has_type(def.parent)) {
    throw Error(Errc::UnknownParent, def.parent.empty() ? "<none>" : def.parent);
  }
  if (def.parent == kRootType) {
    throw Error(Errc::UnknownParent,
                def.name + ": types derive from PhysicalObject or AbstractObject, not Object");
  }
  def.abstract_type = is_subtype(def.parent, kAbstractType);

  for (const auto& s : def.subobject_types) {
    if (!has_type(s)) {
      throw Error(Errc::UnknownType, def.name + " sub-object type " + s);
    }
  }
  if (!def.abstract_type && !def.subobject_types.empty()) {
    throw Error(Errc::ElementaryWithSubobjects, def.name);
  }
  if (def.abstract_type && def.subobject_types.empty() && subobject_types_of(def.parent).empty()) {
    throw Error(Errc::AbstractWithoutSubobjects, def.name);
  }

  std::set<std::string> names;
  for (const auto* inherited : attributes_of(def.parent)) {
    names.insert(inherited->name);
  }
  for (const auto& a : def.attributes) {
    check_attribute(a, false);
    if (!names.insert(a.name).second) {
      throw Error(Errc::DuplicateName, def.name + "." + a.name);
    }
  }

  auto chain = attributes_of(def.parent);
  for (const auto& a : def.attributes) {
    chain.push_back(&a);
  }
  for (const auto& c : def.constraints) {
    if (const auto* r = std::get_if<RangeConstraint>(&c.rule)) {
      const auto* a = resolve_in(chain, r->attribute);
      if (a == nullptr || a->kind != AttributeKind::Numeric) {
        throw Error(Errc::UnknownAttribute, def.name + " constraint on " + r->attribute);
      }
      if (r->range.lower > r->range.upper) {
        throw Error(Errc::InvalidAttribute, def.name + " constraint range on " + r->attribute);
      }
    } else if (const auto* m = std::get_if<MembershipConstraint>(&c.rule)) {
      const auto* a = resolve_in(chain, m->attribute);
      if (a == nullptr || a->kind == AttributeKind::Complex) {
        throw Error(Errc::UnknownAttribute, def.name + " constraint on " + m->attribute);
      }
    } else {
      const auto& rel = std::get<RelationConstraint>(c.rule);
      const auto* rd = find_relation(rel.relation);
      if (rd == nullptr) {
        throw Error(Errc::UnknownRelation, def.name + " constraint on " + rel.relation);
      }
      if (rd->arity != rel.arg_types.size()) {
        throw Error(Errc::ArityMismatch, def.name + " constraint on " + rel.relation);
      }
      for (const auto& t : rel.arg_types) {
        if (!has_type(t)) {
          throw Error(Errc::UnknownType, def.name + " constraint argument " + t);
        }
      }
    }
  }
  types_.push_back(std::move(def));
}

void Ontology::define_relation(RelationDef def) {
  if (def.name.empty()) {
    throw Error(Errc::InvalidAttribute, "relation name must be nonempty");
  }
  if (find_relation(def.name) != nullptr) {
    throw Error(Errc::DuplicateName, def.name);
  }
  if (def.arity == 0) {
    throw Error(Errc::InvalidAttribute, def.name + ": arity must be positive");
  }
  if (def.arg_types.empty()) {
    def.arg_types.assign(def.arity, std::string(kRootType));
  }
  if (def.arg_types.size() != def.arity) {
    throw Error(Errc::ArityMismatch, def.name);
  }
  for (const auto& t : def.arg_types) {
    if (!has_type(t)) {
      throw Error(Errc::UnknownType, def.name + " argument type " + t);
    }
  }
  relations_.push_back(std::move(def));
}

Ontology define_type(const ObjectTypeDef& def, Ontology ont) {
  ont.define_type(def);
  return ont;
}

bool is_subtype(std::string_view a, std::string_view b, const Ontology& ont) {
  return ont.is_subtype(a, b);
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

namespace {

using TypeResolver = std::function<const std::string*(std::string_view id)>;

std::string describe(const Value& v) { return to_literal(v); }

void check_value(const WorldObject& obj, const std::string& path, const AttributeDef& def, const Value& v,
                 ValidationReport& report) {
  switch (def.kind) {
    case AttributeKind::Numeric: {
      const auto* d = std::get_if<double>(&v);
      if (d == nullptr) {
        report.push_back({IssueKind::TypeMismatch, obj.id, path + " expects a number, got " + describe(v)});
        return;
      }
      if (def.range && !def.range->contains(*d)) {
        report.push_back({IssueKind::ConstraintViolated, obj.id,
                          path + " = " + format_number(*d) + " outside [" + format_number(def.range->lower) +
                              ", " + format_number(def.range->upper) + "]"});
      }
      return;
    }
    case AttributeKind::Text:
      if (!std::holds_alternative<std::string>(v)) {
        report.push_back({IssueKind::TypeMismatch, obj.id, path + " expects text, got " + describe(v)});
      }
      return;
    case AttributeKind::Enumeration: {
      const auto* s = std::get_if<Symbol>(&v);
      if (s == nullptr || std::find(def.values.begin(), def.values.end(), s->name) == def.values.end()) {
        report.push_back({IssueKind::TypeMismatch, obj.id, path + " expects one of its tokens, got " + describe(v)});
        return;
      }
      if (!def.allowed.empty() && std::find(def.allowed.begin(), def.allowed.end(), s->name) == def.allowed.end()) {
        report.push_back({IssueKind::ConstraintViolated, obj.id, path + " = " + s->name + " not permitted"});
      }
      return;
    }
    case AttributeKind::Complex:
      report.push_back({IssueKind::TypeMismatch, obj.id, path + " is complex; set its sub-attributes"});
      return;
  }
}

std::string value_name(const Value& v) {
  if (const auto* s = std::get_if<Symbol>(&v)) {
    return s->name;
  }
  if (const auto* t = std::get_if<std::string>(&v)) {
    return *t;
  }
  return format_number(std::get<double>(v));
}

void validate_into(const WorldObject& obj, const Ontology& ont, const TypeResolver& resolve,
                   ValidationReport& report) {
  if (!ont.has_type(obj.type_name)) {
    report.push_back({IssueKind::UnknownType, obj.id, obj.type_name});
    return;
  }

  // Attributes: every declared path needs a value, every value a declared path.
  std::map<std::string, const AttributeDef*> expected;
  for (const auto* a : ont.attributes_of(obj.type_name)) {
    if (a->kind == AttributeKind::Complex) {
      for (const auto& sub : a->sub_attributes) {
        expected.emplace(a->name + "." + sub.name, &sub);
      }
    } else {
      expected.emplace(a->name, a);
    }
  }
  for (const auto& [path, def] : expected) {
    auto it = obj.attributes.find(path);
    if (it == obj.attributes.end()) {
      report.push_back({IssueKind::MissingAttribute, obj.id, path});
    } else {
      check_value(obj, path, *def, it->second, report);
    }
  }
  for (const auto& [path, value] : obj.attributes) {
    if (!expected.contains(path)) {
      report.push_back({IssueKind::UnknownAttribute, obj.id, path});
    }
  }

  // Constraints declared along the chain.
  for (const auto* c : ont.constraints_of(obj.type_name)) {
    const std::string label = c->label.empty() ? std::string("constraint") : c->label;
    if (const auto* r = std::get_if<RangeConstraint>(&c->rule)) {
      auto it = obj.attributes.find(r->attribute);
      if (it == obj.attributes.end()) {
        continue;  // already reported as missing
      }
      const auto* d = std::get_if<double>(&it->second);
      if (d == nullptr || !r->range.contains(*d)) {
        report.push_back({IssueKind::ConstraintViolated, obj.id, label + ": " + r->attribute});
      }
    } else if (const auto* m = std::get_if<MembershipConstraint>(&c->rule)) {
      auto it = obj.attributes.find(m->attribute);
      if (it == obj.attributes.end()) {
        continue;
      }
      const auto name = value_name(it->second);
      if (std::find(m->values.begin(), m->values.end(), name) == m->values.end()) {
        report.push_back({IssueKind::ConstraintViolated, obj.id, label + ": " + m->attribute});
      }
    } else {
      const auto& rc = std::get<RelationConstraint>(c->rule);
      std::map<std::string, std::string> children;
      for (const auto& sub : obj.subobjects) {
        children.emplace(sub.id, sub.type_name);
      }
      bool found = false;
      for (const auto& rel : obj.relations) {
        if (rel.name != rc.relation || rel.args.size() != rc.arg_types.size()) {
          continue;
        }
        bool ok = true;
        for (std::size_t i = 0; i < rel.args.size() && ok; ++i) {
          auto child = children.find(rel.args[i]);
          ok = child != children.end() && ont.has_type(child->second) &&
               ont.is_subtype(child->second, rc.arg_types[i]);
        }
        if (ok) {
          found = true;
          break;
        }
      }
      if (!found) {
        report.push_back({IssueKind::RelationMissing, obj.id, label + ": " + rc.relation});
      }
    }
  }

  // Sub-objects.
  if (!ont.is_abstract(obj.type_name) && !obj.subobjects.empty()) {
    report.push_back({IssueKind::UnexpectedSubobject, obj.id, "physical objects carry no sub-objects"});
  }
  for (const auto& required : ont.subobject_types_of(obj.type_name)) {
    bool present = std::any_of(obj.subobjects.begin(), obj.subobjects.end(), [&](const WorldObject& sub) {
      return ont.has_type(sub.type_name) && ont.is_subtype(sub.type_name, required);
    });
    if (!present) {
      report.push_back({IssueKind::MissingSubobject, obj.id, required});
    }
  }

  // Relations held by this object.
  for (const auto& rel : obj.relations) {
    const auto* def = ont.find_relation(rel.name);
    if (def == nullptr) {
      report.push_back({IssueKind::UnknownRelation, obj.id, rel.name});
      continue;
    }
    if (def->arity != rel.args.size()) {
      report.push_back({IssueKind::ArityMismatch, obj.id, to_string(rel)});
      continue;
    }
    for (std::size_t i = 0; i < rel.args.size(); ++i) {
      const auto* arg_type = resolve(rel.args[i]);
      if (arg_type == nullptr) {
        report.push_back({IssueKind::DanglingReference, obj.id, to_string(rel)});
      } else if (!ont.has_type(*arg_type) || !ont.is_subtype(*arg_type, def->arg_types[i])) {
        report.push_back({IssueKind::RelationArgumentType, obj.id, to_string(rel)});
      }
    }
  }

  for (const auto& sub : obj.subobjects) {
    validate_into(sub, ont, resolve, report);
  }
}

void collect_types(const WorldObject& obj, std::map<std::string, std::string, std::less<>>& out,
                   std::vector<std::string>& duplicates) {
  if (!out.emplace(obj.id, obj.type_name).second) {
    duplicates.push_back(obj.id);
  }
  for (const auto& sub : obj.subobjects) {
    collect_types(sub, out, duplicates);
  }
}

}  // namespace

ValidationReport validate_object(const WorldObject& obj, const Ontology& ont) {
  if (!ont.has_type(obj.type_name)) {
    throw Error(Errc::UnknownType, obj.type_name);
  }
  std::map<std::string, std::string, std::less<>> types;
  std::vector<std::string> duplicates;
  collect_types(obj, types, duplicates);
  ValidationReport report;
  for (const auto& id : duplicates) {
    report.push_back({IssueKind::DuplicateId, id, "id appears more than once"});
  }
  validate_into(
      obj, ont,
      [&](std::string_view id) -> const std::string* {
        auto it = types.find(id);
        return it == types.end() ? nullptr : &it->second;
      },
      report);
  return report;
}

ValidationReport validate_map(const WorldMap& map, const Ontology& ont) {
  ValidationReport report;
  validate_into(
      map.root(), ont,
      [&](std::string_view id) -> const std::string* {
        const auto* o = map.find(id);
        return o == nullptr ? nullptr : &o->type_name;
      },
      report);
  return report;
}

// ---------------------------------------------------------------------------
// WorldMap
// ---------------------------------------------------------------------------

WorldMap::WorldMap(WorldObject root, std::uint64_t version) : root_(std::move(root)), version_(version) {
  reindex();
}

void WorldMap::reindex() {
  index_.clear();
  parents_.clear();
  relation_owners_.clear();
  std::vector<std::size_t> path;
  std::function<void(const WorldObject&, const std::string&)> walk = [&](const WorldObject& obj,
                                                                         const std::string& parent) {
    if (!index_.emplace(obj.id, path).second) {
      throw Error(Errc::InvalidWorld, "duplicate object id " + obj.id);
    }
    parents_.emplace(obj.id, parent);
    for (const auto& rel : obj.relations) {
      relation_owners_.emplace(rel, obj.id);
    }
    for (std::size_t i = 0; i < obj.subobjects.size(); ++i) {
      path.push_back(i);
      walk(obj.subobjects[i], obj.id);
      path.pop_back();
    }
  };
  walk(root_, "");
}

const WorldObject* WorldMap::find(std::string_view id) const {
  auto it = index_.find(id);
  if (it == index_.end()) {
    return nullptr;
  }
  const WorldObject* cur = &root_;
  for (auto i : it->second) {
    cur = &cur->subobjects[i];
  }
  return cur;
}

WorldObject* WorldMap::find_mutable(std::string_view id) {
  return const_cast<WorldObject*>(std::as_const(*this).find(id));
}

const WorldObject& WorldMap::at(std::string_view id) const {
  const auto* o = find(id);
  if (o == nullptr) {
    throw Error(Errc::UnknownObject, std::string(id));
  }
  return *o;
}

std::vector<std::string> WorldMap::ids() const {
  std::vector<std::string> out;
  out.reserve(index_.size());
  for (const auto& [id, path] : index_) {
    out.push_back(id);
  }
  return out;
}

std::string WorldMap::parent_of(std::string_view id) const {
  auto it = parents_.find(id);
  if (it == parents_.end()) {
    throw Error(Errc::UnknownObject, std::string(id));
  }
  return it->second;
}

bool WorldMap::has_relation(const RelationInstance& rel) const { return relation_owners_.contains(rel); }

std::vector<std::pair<std::string, RelationInstance>> WorldMap::relations() const {
  std::vector<std::pair<std::string, RelationInstance>> out;
  out.reserve(relation_owners_.size());
  for (const auto& [rel, owner] : relation_owners_) {
    out.emplace_back(owner, rel);
  }
  return out;
}

std::optional<std::string> WorldMap::relation_owner(const RelationInstance& rel) const {
  auto it = relation_owners_.find(rel);
  if (it == relation_owners_.end()) {
    return std::nullopt;
  }
  return it->second;
}

const Value* WorldMap::attribute(std::string_view id, std::string_view path) const {
  const auto* o = find(id);
  if (o == nullptr) {
    return nullptr;
  }
  auto it = o->attributes.find(std::string(path));
  return it == o->attributes.end() ? nullptr : &it->second;
}

// ---------------------------------------------------------------------------
// Deltas
// ---------------------------------------------------------------------------

MapDelta record_priors(const WorldMap& map, MapDelta delta) {
  std::map<std::string, WorldObject*> added;
  for (auto& add : delta.add_objects) {
    if (!map.contains(add.parent)) {
      bool parent_added = std::any_of(delta.add_objects.begin(), delta.add_objects.end(),
                                      [&](const ObjectChange& o) { return o.object.id == add.parent; });
      if (!parent_added) {
        throw Error(Errc::UnknownObject, "parent " + add.parent);
      }
    }
    if (const auto* parent = map.find(add.parent); parent != nullptr && add.position > parent->subobjects.size()) {
      add.position = parent->subobjects.size();
    }
    added.emplace(add.object.id, &add.object);
  }

  // Attribute changes on freshly added objects become part of the object.
  std::vector<AttributeChange> kept;
  std::map<std::pair<std::string, std::string>, std::optional<Value>> overlay;
  for (auto& change : delta.set_attributes) {
    if (auto it = added.find(change.object_id); it != added.end()) {
      if (change.value) {
        it->second->attributes[change.attribute] = *change.value;
      } else {
        it->second->attributes.erase(change.attribute);
      }
      continue;
    }
    if (!map.contains(change.object_id)) {
      throw Error(Errc::UnknownObject, change.object_id);
    }
    auto key = std::make_pair(change.object_id, change.attribute);
    if (auto it = overlay.find(key); it != overlay.end()) {
      change.prior = it->second;
    } else if (const auto* v = map.attribute(change.object_id, change.attribute)) {
      change.prior = *v;
    } else {
      change.prior.reset();
    }
    overlay[key] = change.value;
    kept.push_back(std::move(change));
  }
  delta.set_attributes = std::move(kept);

  for (auto& rc : delta.remove_relations) {
    auto owner = map.relation_owner(rc.relation);
    if (!owner) {
      throw Error(Errc::UnknownObject, "relation " + to_string(rc.relation) + " not present");
    }
    rc.owner = *owner;
  }
  for (auto& rc : delta.add_relations) {
    if (rc.owner.empty()) {
      rc.owner = map.root().id;
    }
  }
  for (auto& rm : delta.remove_objects) {
    const auto& obj = map.at(rm.object.id);
    if (obj.id == map.root().id) {
      throw Error(Errc::TypeViolationAfterApply, "cannot remove the root object");
    }
    rm.parent = map.parent_of(obj.id);
    const auto& siblings = map.at(rm.parent).subobjects;
    for (std::size_t i = 0; i < siblings.size(); ++i) {
      if (siblings[i].id == obj.id) {
        rm.position = i;
      }
    }
    rm.object = obj;
  }
  return delta;
}

WorldMap apply_delta(const WorldMap& map, const MapDelta& delta, const Ontology& ont) {
  WorldMap out = map;

  for (const auto& rc : delta.remove_relations) {
    auto owner = rc.owner.empty() ? out.relation_owner(rc.relation) : std::optional<std::string>(rc.owner);
    WorldObject* holder = owner ? out.find_mutable(*owner) : nullptr;
    if (holder == nullptr || holder->relations.erase(rc.relation) == 0) {
      throw Error(Errc::UnknownObject, "relation " + to_string(rc.relation) + " not present");
    }
  }
  out.reindex();

  for (const auto& rm : delta.remove_objects) {
    if (!out.contains(rm.object.id)) {
      throw Error(Errc::UnknownObject, rm.object.id);
    }
    auto parent_id = out.parent_of(rm.object.id);
    if (parent_id.empty()) {
      throw Error(Errc::TypeViolationAfterApply, "cannot remove the root object");
    }
    auto& siblings = out.find_mutable(parent_id)->subobjects;
    std::erase_if(siblings, [&](const WorldObject& o) { return o.id == rm.object.id; });
    out.reindex();
  }

  for (const auto& add : delta.add_objects) {
    WorldObject* parent = out.find_mutable(add.parent);
    if (parent == nullptr) {
      throw Error(Errc::UnknownObject, "parent " + add.parent);
    }
    auto pos = std::min(add.position, parent->subobjects.size());
    parent->subobjects.insert(parent->subobjects.begin() + static_cast<std::ptrdiff_t>(pos), add.object);
    try {
      out.reindex();
    } catch (const Error& e) {
      throw Error(Errc::TypeViolationAfterApply, e.what());
    }
  }

  for (const auto& change : delta.set_attributes) {
    WorldObject* obj = out.find_mutable(change.object_id);
    if (obj == nullptr) {
      throw Error(Errc::UnknownObject, change.object_id);
    }
    if (change.value) {
      obj->attributes[change.attribute] = *change.value;
    } else {
      obj->attributes.erase(change.attribute);
    }
  }

  for (const auto& rc : delta.add_relations) {
    for (const auto& arg : rc.relation.args) {
      if (!out.contains(arg)) {
        throw Error(Errc::UnknownObject, arg);
      }
    }
    WorldObject* holder = out.find_mutable(rc.owner.empty() ? out.root().id : rc.owner);
    if (holder == nullptr) {
      throw Error(Errc::UnknownObject, rc.owner);
    }
    holder->relations.insert(rc.relation);
  }
  out.reindex();

  auto report = validate_map(out, ont);
  if (!report.empty()) {
    const auto& first = report.front();
    throw Error(Errc::TypeViolationAfterApply,
                std::string(to_string(first.kind)) + " on " + first.object_id + ": " + first.detail);
  }
  out.set_version(map.version() + 1);
  return out;
}

MapDelta invert(const MapDelta& delta) {
  MapDelta inv;
  inv.add_relations = delta.remove_relations;
  inv.remove_relations = delta.add_relations;
  inv.remove_objects = delta.add_objects;
  inv.add_objects = delta.remove_objects;
  std::stable_sort(inv.add_objects.begin(), inv.add_objects.end(),
                   [](const ObjectChange& a, const ObjectChange& b) { return a.position < b.position; });
  for (auto it = delta.set_attributes.rbegin(); it != delta.set_attributes.rend(); ++it) {
    inv.set_attributes.push_back(AttributeChange{it->object_id, it->attribute, it->prior, it->value});
  }
  return inv;
}

}  // namespace somrs::ontology
