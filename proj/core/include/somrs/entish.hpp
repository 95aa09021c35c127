#pragma once

#include <compare>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "somrs/error.hpp"
#include "somrs/ontology.hpp"

/// Quantifier-free situation language used for preconditions, effects,
/// commitments and failure descriptions.
///
/// Grammar (AND binds tighter than OR, keywords are case-insensitive):
///
///     formula := conj ("OR" conj)*
///     conj    := atom ("AND" atom)*
///     atom    := "true" | "(" formula ")"
///              | term RELATION term
///              | term "." path CMP literal
///     term    := IDENT | "?" IDENT
///     path    := IDENT ("." IDENT)?
///     CMP     := "=" | "!=" | "<" | "<=" | ">" | ">=" | "≠" | "≤" | "≥"
///     literal := NUMBER | STRING | IDENT
namespace somrs::entish {

using ontology::Value;

struct Term {
  enum class Kind { Object, Variable };
  Kind kind = Kind::Object;
  std::string name;

  static Term object(std::string id) { return {Kind::Object, std::move(id)}; }
  static Term variable(std::string name) { return {Kind::Variable, std::move(name)}; }
  bool is_variable() const { return kind == Kind::Variable; }
  auto operator<=>(const Term&) const = default;
};

/// `?Name` for variables, the bare id for objects.
std::string to_string(const Term& t);

enum class Comparator { Eq, Ne, Lt, Le, Gt, Ge };
std::string_view to_string(Comparator c);

struct RelationAtom {
  std::string relation;
  std::vector<Term> terms;
  auto operator<=>(const RelationAtom&) const = default;
};

struct AttributeAtom {
  Term object;
  std::string path;
  Comparator cmp = Comparator::Eq;
  Value value;
  auto operator<=>(const AttributeAtom&) const = default;
};

struct True {
  auto operator<=>(const True&) const = default;
};

struct Formula;

struct Conjunction {
  std::vector<Formula> children;
};

struct Disjunction {
  std::vector<Formula> children;
};

struct Formula {
  std::variant<True, RelationAtom, AttributeAtom, Conjunction, Disjunction> node;

  Formula() = default;
  Formula(True t) : node(t) {}
  Formula(RelationAtom a) : node(std::move(a)) {}
  Formula(AttributeAtom a) : node(std::move(a)) {}
  Formula(Conjunction c) : node(std::move(c)) {}
  Formula(Disjunction d) : node(std::move(d)) {}

  bool is_true() const { return std::holds_alternative<True>(node); }
};

bool operator==(const Formula& a, const Formula& b);
bool operator==(const Conjunction& a, const Conjunction& b);
bool operator==(const Disjunction& a, const Disjunction& b);

using Atom = std::variant<RelationAtom, AttributeAtom>;

Formula to_formula(const Atom& atom);

/// Conjunction of `parts`, collapsing to True (empty) or the single child.
Formula all_of(std::vector<Formula> parts);
/// Disjunction of `parts`, collapsing the single-child case.
Formula any_of(std::vector<Formula> parts);

// ---------------------------------------------------------------------------
// Text
// ---------------------------------------------------------------------------

class SyntaxError : public Error {
 public:
  SyntaxError(std::size_t position, std::string expected, const std::string& found);

  std::size_t position() const noexcept { return position_; }
  const std::string& expected() const noexcept { return expected_; }

 private:
  std::size_t position_;
  std::string expected_;
};

/// Throws SyntaxError.
Formula parse(std::string_view text);
/// Parses a single atom; throws SyntaxError when the text is anything else.
Atom parse_atom(std::string_view text);

/// Canonical text; parse(print(f)) == f for every formula built by parse,
/// all_of or any_of.
std::string print(const Formula& f);
std::string print(const Atom& a);

// ---------------------------------------------------------------------------
// Structure
// ---------------------------------------------------------------------------

/// Variable names occurring in `f`, sorted and unique.
std::vector<std::string> variables(const Formula& f);
std::vector<std::string> variables(const Atom& a);
bool is_ground(const Formula& f);

/// Atoms in left-to-right order.
std::vector<Atom> atoms(const Formula& f);

/// Disjunctive normal form as alternatives of atom lists. True contributes an
/// empty alternative.
std::vector<std::vector<Atom>> dnf(const Formula& f);

/// Object ids named by ground terms, sorted and unique.
std::vector<std::string> object_ids(const Formula& f);

// ---------------------------------------------------------------------------
// Bindings
// ---------------------------------------------------------------------------

/// Variable name (without `?`) to replacement term.
using Binding = std::map<std::string, Term>;

std::string to_string(const Binding& b);

Term substitute(const Term& t, const Binding& b);
Atom substitute(const Atom& a, const Binding& b);
Formula substitute(const Formula& f, const Binding& b);

/// Most general binding over the pattern's variables that makes `pattern`
/// structurally equal to `target`. Variables in `target` are treated as
/// opaque names. Numeric literals match within 1e-9.
std::optional<Binding> unify_atoms(const Atom& pattern, const Atom& target);

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Checks relation names, arities and attribute paths against `ont`, and,
/// when `map` is given, that every ground term names an existing object.
/// Throws UnknownRelation, ArityMismatch, UnknownAttribute, UnknownObject.
void check(const Formula& f, const ontology::Ontology& ont, const ontology::WorldMap* map = nullptr);

/// Truth of a ground atom. Atoms with variables, or naming absent objects or
/// attributes, evaluate false.
bool holds(const Atom& a, const ontology::WorldMap& map, const ontology::Ontology& ont);
bool holds(const Formula& f, const ontology::WorldMap& map, const ontology::Ontology& ont);

/// `actual CMP expected` as evaluated by holds(); numbers equal within `tol`.
bool compare_values(const Value& actual, Comparator cmp, const Value& expected, double tol);

/// All assignments of f's variables to map object ids under which f holds,
/// ordered lexicographically by (variable name, object id). A ground formula
/// yields {{}} when it holds and {} otherwise. Throws UnknownRelation,
/// ArityMismatch, UnknownAttribute.
std::vector<Binding> find_bindings(const Formula& f, const ontology::WorldMap& map,
                                   const ontology::Ontology& ont);

}  // namespace somrs::entish
