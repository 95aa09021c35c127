#pragma once

#include <compare>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace somrs::ontology {

// ---------------------------------------------------------------------------
// Attribute values
// ---------------------------------------------------------------------------

/// An enumeration token such as `Cuboid`. Distinct from free text.
struct Symbol {
  std::string name;
  auto operator<=>(const Symbol&) const = default;
};

using Value = std::variant<double, std::string, Symbol>;

/// Shortest decimal text that reads back to the same double.
std::string format_number(double value);

/// Canonical literal text: numbers shortest-roundtrip, text double-quoted with
/// `\"` and `\\` escapes, symbols bare.
std::string to_literal(const Value& value);

// ---------------------------------------------------------------------------
// Type system
// ---------------------------------------------------------------------------

enum class AttributeKind { Numeric, Text, Enumeration, Complex };

std::string_view to_string(AttributeKind kind);

struct NumericRange {
  double lower = 0.0;
  double upper = 0.0;
  bool contains(double v) const { return v >= lower && v <= upper; }
  bool operator==(const NumericRange&) const = default;
};

struct AttributeDef {
  std::string name;
  AttributeKind kind = AttributeKind::Numeric;
  std::string unit;                       // numeric only
  std::vector<std::string> values;        // enumeration only: declared tokens
  std::vector<AttributeDef> sub_attributes;  // complex only, one level deep
  std::optional<NumericRange> range;      // numeric only
  std::vector<std::string> allowed;       // enumeration only: permitted subset
  std::optional<double> tolerance;        // numeric comparison tolerance

  bool operator==(const AttributeDef&) const = default;
};

struct RelationDef {
  std::string name;
  std::size_t arity = 2;
  std::vector<std::string> arg_types;  // one per argument
  bool operator==(const RelationDef&) const = default;
};

struct RangeConstraint {
  std::string attribute;  // dotted path, e.g. Shape.Height
  NumericRange range;
  bool operator==(const RangeConstraint&) const = default;
};

struct MembershipConstraint {
  std::string attribute;
  std::vector<std::string> values;
  bool operator==(const MembershipConstraint&) const = default;
};

/// A relation that must hold among obligatory sub-objects of the given types.
struct RelationConstraint {
  std::string relation;
  std::vector<std::string> arg_types;
  bool operator==(const RelationConstraint&) const = default;
};

struct Constraint {
  std::string label;
  std::variant<RangeConstraint, MembershipConstraint, RelationConstraint> rule;
  bool operator==(const Constraint&) const = default;
};

struct ObjectTypeDef {
  std::string name;
  std::string parent;
  std::vector<AttributeDef> attributes;
  std::vector<std::string> subobject_types;
  std::vector<Constraint> constraints;
  /// Derived on definition: true for descendants of AbstractObject.
  bool abstract_type = false;

  bool operator==(const ObjectTypeDef&) const = default;
};

inline constexpr std::string_view kRootType = "Object";
inline constexpr std::string_view kPhysicalType = "PhysicalObject";
inline constexpr std::string_view kAbstractType = "AbstractObject";

/// Numeric tolerance used when an attribute declares none.
inline constexpr double kDefaultTolerance = 1e-3;

/// Type hierarchy plus relation vocabulary. Single inheritance rooted at
/// `Object`, whose two children `PhysicalObject` and `AbstractObject` are
/// always present.
class Ontology {
 public:
  Ontology();

  /// Adds a type. Throws CycleDetected, DuplicateName, UnknownParent,
  /// ElementaryWithSubobjects, AbstractWithoutSubobjects, InvalidAttribute,
  /// UnknownAttribute, UnknownRelation, UnknownType.
  void define_type(ObjectTypeDef def);

  /// Throws DuplicateName, InvalidAttribute (arity), UnknownType.
  void define_relation(RelationDef def);

  bool has_type(std::string_view name) const;
  const ObjectTypeDef& type(std::string_view name) const;
  const RelationDef* find_relation(std::string_view name) const;

  /// Reflexive: true iff `ancestor` lies on the parent chain of `type_name`.
  bool is_subtype(std::string_view type_name, std::string_view ancestor) const;
  bool is_abstract(std::string_view type_name) const;
  /// Leaf descendant of PhysicalObject.
  bool is_elementary(std::string_view type_name) const;
  bool is_builtin(std::string_view type_name) const;

  /// Root-first chain of type names ending in `type_name`.
  std::vector<std::string> lineage(std::string_view type_name) const;

  /// Every attribute declared along the chain, ancestors first.
  std::vector<const AttributeDef*> attributes_of(std::string_view type_name) const;
  /// Resolves `Attr` or `Complex.Sub` along the chain; nullptr if absent.
  const AttributeDef* find_attribute(std::string_view type_name, std::string_view path) const;
  /// Resolves a path against every declared type.
  const AttributeDef* find_attribute_any(std::string_view path) const;
  /// Every constraint along the chain, ancestors first.
  std::vector<const Constraint*> constraints_of(std::string_view type_name) const;
  std::vector<std::string> subobject_types_of(std::string_view type_name) const;

  /// Tolerance for numeric comparison of `path`.
  double tolerance_for(std::string_view path) const;

  /// User-defined types in definition order (builtins excluded).
  const std::vector<ObjectTypeDef>& types() const { return types_; }
  const std::vector<RelationDef>& relations() const { return relations_; }

  bool operator==(const Ontology& other) const {
    return types_ == other.types_ && relations_ == other.relations_;
  }

 private:
  const ObjectTypeDef* find(std::string_view name) const;

  std::vector<ObjectTypeDef> builtins_;
  std::vector<ObjectTypeDef> types_;
  std::vector<RelationDef> relations_;
};

/// Value-returning form of Ontology::define_type.
Ontology define_type(const ObjectTypeDef& def, Ontology ont);
bool is_subtype(std::string_view a, std::string_view b, const Ontology& ont);

// ---------------------------------------------------------------------------
// Instances
// ---------------------------------------------------------------------------

struct RelationInstance {
  std::string name;
  std::vector<std::string> args;
  auto operator<=>(const RelationInstance&) const = default;
};

std::string to_string(const RelationInstance& rel);

/// Attribute values are keyed by dotted path; complex attributes store one
/// entry per sub-attribute (`Shape.Height`).
struct WorldObject {
  std::string id;
  std::string type_name;
  std::map<std::string, Value> attributes;
  std::vector<WorldObject> subobjects;
  std::set<RelationInstance> relations;

  bool operator==(const WorldObject&) const = default;
};

enum class IssueKind {
  MissingAttribute,
  UnknownAttribute,
  TypeMismatch,
  ConstraintViolated,
  MissingSubobject,
  UnexpectedSubobject,
  RelationMissing,
  UnknownRelation,
  ArityMismatch,
  RelationArgumentType,
  DanglingReference,
  DuplicateId,
  UnknownType,
};

std::string_view to_string(IssueKind kind);

struct Issue {
  IssueKind kind;
  std::string object_id;
  std::string detail;
  bool operator==(const Issue&) const = default;
};

using ValidationReport = std::vector<Issue>;

/// Validates `obj` and its sub-objects. Relation arguments resolve within the
/// object's own subtree. Throws UnknownType if obj's type is undeclared.
ValidationReport validate_object(const WorldObject& obj, const Ontology& ont);

/// Instance of the environment rooted at an abstract object, with an id index.
class WorldMap {
 public:
  WorldMap() = default;
  /// Throws InvalidWorld on duplicate ids.
  explicit WorldMap(WorldObject root, std::uint64_t version = 0);

  const WorldObject& root() const { return root_; }
  std::uint64_t version() const { return version_; }
  void set_version(std::uint64_t v) { version_ = v; }

  const WorldObject* find(std::string_view id) const;
  /// Throws UnknownObject.
  const WorldObject& at(std::string_view id) const;
  bool contains(std::string_view id) const { return find(id) != nullptr; }
  /// All ids, sorted.
  std::vector<std::string> ids() const;
  /// Parent id of a non-root object; empty for the root.
  std::string parent_of(std::string_view id) const;

  bool has_relation(const RelationInstance& rel) const;
  /// Every relation instance in the map with the id of the object holding it.
  std::vector<std::pair<std::string, RelationInstance>> relations() const;
  /// Id of the object holding `rel`, if present.
  std::optional<std::string> relation_owner(const RelationInstance& rel) const;

  /// Looks up an attribute; nullptr when absent.
  const Value* attribute(std::string_view id, std::string_view path) const;

  /// Content equality, ignoring the version counter.
  bool same_content(const WorldMap& other) const { return root_ == other.root_; }

  WorldObject* find_mutable(std::string_view id);
  WorldObject& root_mutable() { return root_; }
  /// Must be called after structural edits through root_mutable/find_mutable.
  void reindex();

 private:
  WorldObject root_;
  std::uint64_t version_ = 0;
  std::map<std::string, std::vector<std::size_t>, std::less<>> index_;
  std::map<std::string, std::string, std::less<>> parents_;
  std::map<RelationInstance, std::string> relation_owners_;
};

/// Full-map validation: every object against its type, relation arguments
/// resolving anywhere in the map, and unique ids.
ValidationReport validate_map(const WorldMap& map, const Ontology& ont);

// ---------------------------------------------------------------------------
// Deltas
// ---------------------------------------------------------------------------

struct AttributeChange {
  std::string object_id;
  std::string attribute;
  std::optional<Value> value;  // nullopt removes the attribute
  std::optional<Value> prior;  // nullopt when previously absent
  bool operator==(const AttributeChange&) const = default;
};

struct RelationChange {
  std::string owner;  // object holding the instance; empty means the root
  RelationInstance relation;
  bool operator==(const RelationChange&) const = default;
};

struct ObjectChange {
  std::string parent;
  /// Index among the parent's sub-objects; out-of-range values append.
  std::size_t position = std::numeric_limits<std::size_t>::max();
  WorldObject object;
  bool operator==(const ObjectChange&) const = default;
};

struct MapDelta {
  std::vector<AttributeChange> set_attributes;
  std::vector<RelationChange> add_relations;
  std::vector<RelationChange> remove_relations;
  std::vector<ObjectChange> add_objects;
  std::vector<ObjectChange> remove_objects;

  bool empty() const {
    return set_attributes.empty() && add_relations.empty() && remove_relations.empty() &&
           add_objects.empty() && remove_objects.empty();
  }
  bool operator==(const MapDelta&) const = default;
};

/// Fills priors, relation owners, positions and removed-object contents from
/// `map` so the delta becomes invertible. Throws UnknownObject.
MapDelta record_priors(const WorldMap& map, MapDelta delta);

/// Applies a delta (after record_priors) and bumps the version. Throws
/// UnknownObject, TypeViolationAfterApply.
WorldMap apply_delta(const WorldMap& map, const MapDelta& delta, const Ontology& ont);

/// Delta undoing `delta`; requires recorded priors.
MapDelta invert(const MapDelta& delta);

}  // namespace somrs::ontology
