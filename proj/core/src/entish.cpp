#include "somrs/entish.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <set>

namespace somrs::entish {

using ontology::Symbol;

// ---------------------------------------------------------------------------
// Basics
// ---------------------------------------------------------------------------

std::string to_string(const Term& t) { return t.is_variable() ? "?" + t.name : t.name; }

std::string_view to_string(Comparator c) {
  switch (c) {
    case Comparator::Eq:
      return "=";
    case Comparator::Ne:
      return "!=";
    case Comparator::Lt:
      return "<";
    case Comparator::Le:
      return "<=";
    case Comparator::Gt:
      return ">";
    case Comparator::Ge:
      return ">=";
  }
  return "?";
}

bool operator==(const Conjunction& a, const Conjunction& b) { return a.children == b.children; }
bool operator==(const Disjunction& a, const Disjunction& b) { return a.children == b.children; }
bool operator==(const Formula& a, const Formula& b) { return a.node == b.node; }

Formula to_formula(const Atom& atom) {
  return std::visit([](const auto& a) { return Formula(a); }, atom);
}

Formula all_of(std::vector<Formula> parts) {
  std::erase_if(parts, [](const Formula& f) { return f.is_true(); });
  if (parts.empty()) return True{};
  if (parts.size() == 1) return std::move(parts.front());
  return Conjunction{std::move(parts)};
}

Formula any_of(std::vector<Formula> parts) {
  if (parts.empty()) return True{};
  if (parts.size() == 1) return std::move(parts.front());
  return Disjunction{std::move(parts)};
}

SyntaxError::SyntaxError(std::size_t position, std::string expected, const std::string& found)
    : Error(Errc::SyntaxError,
            "at offset " + std::to_string(position) + ": expected " + expected + ", found " + found),
      position_(position),
      expected_(std::move(expected)) {}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

namespace {

enum class Tok { Ident, Variable, Number, String, LParen, RParen, Dot, Cmp, End };

struct Token {
  Tok kind;
  std::string text;
  std::size_t pos;
  double number = 0;
  Comparator cmp = Comparator::Eq;
};

bool ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
bool ident_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

bool iequals(std::string_view a, std::string_view b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) {
           return std::tolower(static_cast<unsigned char>(x)) == std::tolower(static_cast<unsigned char>(y));
         });
}

std::vector<Token> lex(std::string_view s) {
  std::vector<Token> out;
  std::size_t i = 0;
  auto starts = [&](std::string_view lit) { return s.substr(i, lit.size()) == lit; };
  while (i < s.size()) {
    char c = s[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
      continue;
    }
    const std::size_t start = i;
    if (ident_start(c)) {
      while (i < s.size() && ident_char(s[i])) ++i;
      out.push_back({Tok::Ident, std::string(s.substr(start, i - start)), start});
      continue;
    }
    if (c == '?') {
      ++i;
      if (i >= s.size() || !ident_start(s[i])) {
        throw SyntaxError(i, "variable name", i < s.size() ? std::string(1, s[i]) : "end of input");
      }
      while (i < s.size() && ident_char(s[i])) ++i;
      out.push_back({Tok::Variable, std::string(s.substr(start + 1, i - start - 1)), start});
      continue;
    }
    if (std::isdigit(static_cast<unsigned char>(c)) ||
        ((c == '-' || c == '+') && i + 1 < s.size() && std::isdigit(static_cast<unsigned char>(s[i + 1])))) {
      double v = 0;
      const char* first = s.data() + i + (c == '+' ? 1 : 0);
      auto [end, ec] = std::from_chars(first, s.data() + s.size(), v);
      if (ec != std::errc{}) {
        throw SyntaxError(start, "number", std::string(1, c));
      }
      i = static_cast<std::size_t>(end - s.data());
      Token t{Tok::Number, std::string(s.substr(start, i - start)), start};
      t.number = v;
      out.push_back(std::move(t));
      continue;
    }
    if (c == '"') {
      ++i;
      std::string text;
      bool closed = false;
      while (i < s.size()) {
        if (s[i] == '\\' && i + 1 < s.size()) {
          text.push_back(s[i + 1]);
          i += 2;
        } else if (s[i] == '"') {
          ++i;
          closed = true;
          break;
        } else {
          text.push_back(s[i++]);
        }
      }
      if (!closed) throw SyntaxError(s.size(), "closing quote", "end of input");
      out.push_back({Tok::String, std::move(text), start});
      continue;
    }
    auto cmp = [&](std::size_t len, Comparator op) {
      Token t{Tok::Cmp, std::string(s.substr(start, len)), start};
      t.cmp = op;
      out.push_back(std::move(t));
      i += len;
    };
    if (starts("!=")) { cmp(2, Comparator::Ne); continue; }
    if (starts("<=")) { cmp(2, Comparator::Le); continue; }
    if (starts(">=")) { cmp(2, Comparator::Ge); continue; }
    if (starts("≠")) { cmp(3, Comparator::Ne); continue; }
    if (starts("≤")) { cmp(3, Comparator::Le); continue; }
    if (starts("≥")) { cmp(3, Comparator::Ge); continue; }
    if (c == '=') { cmp(1, Comparator::Eq); continue; }
    if (c == '<') { cmp(1, Comparator::Lt); continue; }
    if (c == '>') { cmp(1, Comparator::Gt); continue; }
    if (c == '(') { out.push_back({Tok::LParen, "(", start}); ++i; continue; }
    if (c == ')') { out.push_back({Tok::RParen, ")", start}); ++i; continue; }
    if (c == '.') { out.push_back({Tok::Dot, ".", start}); ++i; continue; }
    throw SyntaxError(start, "token", std::string(1, c));
  }
  out.push_back({Tok::End, "", s.size()});
  return out;
}

bool is_keyword(const Token& t) {
  return t.kind == Tok::Ident && (iequals(t.text, "and") || iequals(t.text, "or") || iequals(t.text, "true"));
}

class Parser {
 public:
  explicit Parser(std::string_view text) : toks_(lex(text)) {}

  Formula formula() {
    std::vector<Formula> parts{conjunction()};
    while (keyword("or")) {
      ++pos_;
      parts.push_back(conjunction());
    }
    return parts.size() == 1 ? std::move(parts.front()) : Formula(Disjunction{std::move(parts)});
  }

  void expect_end() {
    if (peek().kind != Tok::End) fail("AND, OR or end of input");
  }

  const Token& peek() const { return toks_[pos_]; }

 private:
  Formula conjunction() {
    std::vector<Formula> parts{atom()};
    while (keyword("and")) {
      ++pos_;
      parts.push_back(atom());
    }
    return parts.size() == 1 ? std::move(parts.front()) : Formula(Conjunction{std::move(parts)});
  }

  Formula atom() {
    const Token& t = peek();
    if (t.kind == Tok::LParen) {
      ++pos_;
      Formula inner = formula();
      if (peek().kind != Tok::RParen) fail("')'");
      ++pos_;
      return inner;
    }
    if (t.kind == Tok::Ident && iequals(t.text, "true")) {
      ++pos_;
      return True{};
    }
    Term subject = term();
    if (peek().kind == Tok::Dot) {
      ++pos_;
      std::string path = ident("attribute name");
      if (peek().kind == Tok::Dot) {
        ++pos_;
        path += "." + ident("sub-attribute name");
      }
      if (peek().kind != Tok::Cmp) fail("comparison operator");
      Comparator cmp = peek().cmp;
      ++pos_;
      return AttributeAtom{std::move(subject), std::move(path), cmp, literal()};
    }
    if (peek().kind != Tok::Ident || is_keyword(peek())) fail("relation name or '.'");
    std::string rel = peek().text;
    ++pos_;
    Term object = term();
    return RelationAtom{std::move(rel), {std::move(subject), std::move(object)}};
  }

  Term term() {
    const Token& t = peek();
    if (t.kind == Tok::Variable) {
      ++pos_;
      return Term::variable(t.text);
    }
    if (t.kind == Tok::Ident && !is_keyword(t)) {
      ++pos_;
      return Term::object(t.text);
    }
    fail("object id or variable");
  }

  Value literal() {
    const Token& t = peek();
    ++pos_;
    switch (t.kind) {
      case Tok::Number:
        return t.number;
      case Tok::String:
        return t.text;
      case Tok::Ident:
        return Symbol{t.text};
      default:
        --pos_;
        fail("literal");
    }
  }

  std::string ident(const char* what) {
    if (peek().kind != Tok::Ident) fail(what);
    return toks_[pos_++].text;
  }

  bool keyword(std::string_view kw) const { return peek().kind == Tok::Ident && iequals(peek().text, kw); }

  [[noreturn]] void fail(const std::string& expected) const {
    const Token& t = peek();
    throw SyntaxError(t.pos, expected, t.kind == Tok::End ? "end of input" : "'" + t.text + "'");
  }

  std::vector<Token> toks_;
  std::size_t pos_ = 0;
};

}  // namespace

Formula parse(std::string_view text) {
  Parser p(text);
  Formula f = p.formula();
  p.expect_end();
  return f;
}

Atom parse_atom(std::string_view text) {
  Formula f = parse(text);
  if (const auto* r = std::get_if<RelationAtom>(&f.node)) return *r;
  if (const auto* a = std::get_if<AttributeAtom>(&f.node)) return *a;
  throw SyntaxError(0, "a single atom", "'" + std::string(text) + "'");
}

// ---------------------------------------------------------------------------
// Printer
// ---------------------------------------------------------------------------

namespace {

void print_into(const Formula& f, std::string& out);

void print_atom(const Atom& a, std::string& out) {
  if (const auto* r = std::get_if<RelationAtom>(&a)) {
    if (r->terms.size() == 2) {
      out += to_string(r->terms[0]) + " " + r->relation + " " + to_string(r->terms[1]);
    } else {
      // Only binary relations have surface syntax; others print for diagnostics.
      out += r->relation + "(";
      for (std::size_t i = 0; i < r->terms.size(); ++i) {
        if (i > 0) out += ", ";
        out += to_string(r->terms[i]);
      }
      out += ")";
    }
    return;
  }
  const auto& at = std::get<AttributeAtom>(a);
  out += to_string(at.object) + "." + at.path + " " + std::string(to_string(at.cmp)) + " " +
         ontology::to_literal(at.value);
}

void print_child(const Formula& child, bool parenthesize, std::string& out) {
  if (parenthesize) out += "(";
  print_into(child, out);
  if (parenthesize) out += ")";
}

void print_into(const Formula& f, std::string& out) {
  std::visit(
      [&](const auto& n) {
        using N = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<N, True>) {
          out += "true";
        } else if constexpr (std::is_same_v<N, RelationAtom> || std::is_same_v<N, AttributeAtom>) {
          print_atom(n, out);
        } else if constexpr (std::is_same_v<N, Conjunction>) {
          if (n.children.empty()) {
            out += "true";
            return;
          }
          for (std::size_t i = 0; i < n.children.size(); ++i) {
            if (i > 0) out += " AND ";
            const auto& c = n.children[i].node;
            print_child(n.children[i],
                        std::holds_alternative<Conjunction>(c) || std::holds_alternative<Disjunction>(c), out);
          }
        } else {
          if (n.children.empty()) {
            out += "true";
            return;
          }
          for (std::size_t i = 0; i < n.children.size(); ++i) {
            if (i > 0) out += " OR ";
            print_child(n.children[i], std::holds_alternative<Disjunction>(n.children[i].node), out);
          }
        }
      },
      f.node);
}

}  // namespace

std::string print(const Formula& f) {
  std::string out;
  print_into(f, out);
  return out;
}

std::string print(const Atom& a) {
  std::string out;
  print_atom(a, out);
  return out;
}

// ---------------------------------------------------------------------------
// Structure
// ---------------------------------------------------------------------------

namespace {

template <typename Fn>
void for_each_atom(const Formula& f, Fn&& fn) {
  std::visit(
      [&](const auto& n) {
        using N = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<N, RelationAtom> || std::is_same_v<N, AttributeAtom>) {
          fn(Atom(n));
        } else if constexpr (std::is_same_v<N, Conjunction> || std::is_same_v<N, Disjunction>) {
          for (const auto& c : n.children) for_each_atom(c, fn);
        }
      },
      f.node);
}

void atom_terms(const Atom& a, std::vector<const Term*>& out) {
  if (const auto* r = std::get_if<RelationAtom>(&a)) {
    for (const auto& t : r->terms) out.push_back(&t);
  } else {
    out.push_back(&std::get<AttributeAtom>(a).object);
  }
}

}  // namespace

std::vector<Atom> atoms(const Formula& f) {
  std::vector<Atom> out;
  for_each_atom(f, [&](Atom a) { out.push_back(std::move(a)); });
  return out;
}

std::vector<std::string> variables(const Atom& a) {
  std::vector<const Term*> terms;
  atom_terms(a, terms);
  std::set<std::string> names;
  for (const auto* t : terms) {
    if (t->is_variable()) names.insert(t->name);
  }
  return {names.begin(), names.end()};
}

std::vector<std::string> variables(const Formula& f) {
  std::set<std::string> names;
  for_each_atom(f, [&](const Atom& a) {
    for (auto& v : variables(a)) names.insert(std::move(v));
  });
  return {names.begin(), names.end()};
}

bool is_ground(const Formula& f) { return variables(f).empty(); }

std::vector<std::string> object_ids(const Formula& f) {
  std::set<std::string> ids;
  for_each_atom(f, [&](const Atom& a) {
    std::vector<const Term*> terms;
    atom_terms(a, terms);
    for (const auto* t : terms) {
      if (!t->is_variable()) ids.insert(t->name);
    }
  });
  return {ids.begin(), ids.end()};
}

std::vector<std::vector<Atom>> dnf(const Formula& f) {
  return std::visit(
      [&](const auto& n) -> std::vector<std::vector<Atom>> {
        using N = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<N, True>) {
          return {{}};
        } else if constexpr (std::is_same_v<N, RelationAtom> || std::is_same_v<N, AttributeAtom>) {
          return {{Atom(n)}};
        } else if constexpr (std::is_same_v<N, Disjunction>) {
          std::vector<std::vector<Atom>> out;
          for (const auto& c : n.children) {
            for (auto& alt : dnf(c)) out.push_back(std::move(alt));
          }
          return out;
        } else {
          std::vector<std::vector<Atom>> acc{{}};
          for (const auto& c : n.children) {
            std::vector<std::vector<Atom>> next;
            for (const auto& left : acc) {
              for (const auto& right : dnf(c)) {
                auto merged = left;
                merged.insert(merged.end(), right.begin(), right.end());
                next.push_back(std::move(merged));
              }
            }
            acc = std::move(next);
          }
          return acc;
        }
      },
      f.node);
}

// ---------------------------------------------------------------------------
// Bindings
// ---------------------------------------------------------------------------

std::string to_string(const Binding& b) {
  std::string out = "{";
  bool first = true;
  for (const auto& [name, term] : b) {
    if (!first) out += ", ";
    first = false;
    out += name + ": " + to_string(term);
  }
  return out + "}";
}

Term substitute(const Term& t, const Binding& b) {
  Term cur = t;
  // Follow variable chains; the hop limit guards against cyclic bindings.
  for (std::size_t hops = 0; cur.is_variable() && hops <= b.size(); ++hops) {
    auto it = b.find(cur.name);
    if (it == b.end() || it->second == cur) break;
    cur = it->second;
  }
  return cur;
}

Atom substitute(const Atom& a, const Binding& b) {
  if (const auto* r = std::get_if<RelationAtom>(&a)) {
    RelationAtom out = *r;
    for (auto& t : out.terms) t = substitute(t, b);
    return out;
  }
  AttributeAtom out = std::get<AttributeAtom>(a);
  out.object = substitute(out.object, b);
  return out;
}

Formula substitute(const Formula& f, const Binding& b) {
  if (b.empty()) return f;
  return std::visit(
      [&](const auto& n) -> Formula {
        using N = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<N, True>) {
          return n;
        } else if constexpr (std::is_same_v<N, RelationAtom> || std::is_same_v<N, AttributeAtom>) {
          return to_formula(substitute(Atom(n), b));
        } else {
          N out;
          out.children.reserve(n.children.size());
          for (const auto& c : n.children) out.children.push_back(substitute(c, b));
          return out;
        }
      },
      f.node);
}

namespace {

bool bind_term(const Term& pattern, const Term& target, Binding& b) {
  if (!pattern.is_variable()) return pattern == target;
  auto [it, inserted] = b.emplace(pattern.name, target);
  return inserted || it->second == target;
}

bool same_literal(const Value& a, const Value& b) {
  const auto* x = std::get_if<double>(&a);
  const auto* y = std::get_if<double>(&b);
  if (x != nullptr && y != nullptr) return std::fabs(*x - *y) <= 1e-9;
  return a == b;
}

}  // namespace

std::optional<Binding> unify_atoms(const Atom& pattern, const Atom& target) {
  Binding b;
  if (const auto* p = std::get_if<RelationAtom>(&pattern)) {
    const auto* t = std::get_if<RelationAtom>(&target);
    if (t == nullptr || p->relation != t->relation || p->terms.size() != t->terms.size()) return std::nullopt;
    for (std::size_t i = 0; i < p->terms.size(); ++i) {
      if (!bind_term(p->terms[i], t->terms[i], b)) return std::nullopt;
    }
    return b;
  }
  const auto& p = std::get<AttributeAtom>(pattern);
  const auto* t = std::get_if<AttributeAtom>(&target);
  if (t == nullptr || p.path != t->path || p.cmp != t->cmp || !same_literal(p.value, t->value)) {
    return std::nullopt;
  }
  if (!bind_term(p.object, t->object, b)) return std::nullopt;
  return b;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

void check(const Formula& f, const ontology::Ontology& ont, const ontology::WorldMap* map) {
  for (const auto& a : atoms(f)) {
    if (const auto* r = std::get_if<RelationAtom>(&a)) {
      const auto* def = ont.find_relation(r->relation);
      if (def == nullptr) throw Error(Errc::UnknownRelation, r->relation);
      if (def->arity != r->terms.size()) throw Error(Errc::ArityMismatch, print(a));
      if (map != nullptr) {
        for (const auto& t : r->terms) {
          if (!t.is_variable() && !map->contains(t.name)) throw Error(Errc::UnknownObject, t.name);
        }
      }
    } else {
      const auto& at = std::get<AttributeAtom>(a);
      if (ont.find_attribute_any(at.path) == nullptr) throw Error(Errc::UnknownAttribute, at.path);
      if (map != nullptr && !at.object.is_variable()) {
        const auto* obj = map->find(at.object.name);
        if (obj == nullptr) throw Error(Errc::UnknownObject, at.object.name);
        if (ont.find_attribute(obj->type_name, at.path) == nullptr) {
          throw Error(Errc::UnknownAttribute, at.object.name + "." + at.path);
        }
      }
    }
  }
}

namespace {

enum class Tri { False, True, Unknown };

std::string value_text(const Value& v) {
  if (const auto* s = std::get_if<Symbol>(&v)) return s->name;
  return std::get<std::string>(v);
}

bool compare(const Value& actual, Comparator cmp, const Value& expected, double tol) {
  const auto* a = std::get_if<double>(&actual);
  const auto* e = std::get_if<double>(&expected);
  if ((a == nullptr) != (e == nullptr)) return false;
  if (a != nullptr) {
    const bool eq = std::fabs(*a - *e) <= tol;
    switch (cmp) {
      case Comparator::Eq: return eq;
      case Comparator::Ne: return !eq;
      case Comparator::Lt: return *a < *e && !eq;
      case Comparator::Le: return *a < *e || eq;
      case Comparator::Gt: return *a > *e && !eq;
      case Comparator::Ge: return *a > *e || eq;
    }
    return false;
  }
  const auto x = value_text(actual);
  const auto y = value_text(expected);
  switch (cmp) {
    case Comparator::Eq: return x == y;
    case Comparator::Ne: return x != y;
    case Comparator::Lt: return x < y;
    case Comparator::Le: return x <= y;
    case Comparator::Gt: return x > y;
    case Comparator::Ge: return x >= y;
  }
  return false;
}

struct Evaluator {
  const ontology::WorldMap& map;
  const ontology::Ontology& ont;
  std::map<std::string, double> tolerances;

  double tolerance(const std::string& path) {
    auto it = tolerances.find(path);
    if (it == tolerances.end()) it = tolerances.emplace(path, ont.tolerance_for(path)).first;
    return it->second;
  }

  // Resolves a term under a partial binding; nullopt while unbound.
  static std::optional<std::string> resolve(const Term& t, const Binding& b) {
    if (!t.is_variable()) return t.name;
    auto it = b.find(t.name);
    if (it == b.end() || it->second.is_variable()) return std::nullopt;
    return it->second.name;
  }

  Tri atom(const Atom& a, const Binding& b) {
    if (const auto* r = std::get_if<RelationAtom>(&a)) {
      ontology::RelationInstance inst{r->relation, {}};
      inst.args.reserve(r->terms.size());
      for (const auto& t : r->terms) {
        auto id = resolve(t, b);
        if (!id) return Tri::Unknown;
        inst.args.push_back(std::move(*id));
      }
      return map.has_relation(inst) ? Tri::True : Tri::False;
    }
    const auto& at = std::get<AttributeAtom>(a);
    auto id = resolve(at.object, b);
    if (!id) return Tri::Unknown;
    const auto* v = map.attribute(*id, at.path);
    if (v == nullptr) return Tri::False;
    return compare(*v, at.cmp, at.value, tolerance(at.path)) ? Tri::True : Tri::False;
  }

  Tri formula(const Formula& f, const Binding& b) {
    return std::visit(
        [&](const auto& n) -> Tri {
          using N = std::decay_t<decltype(n)>;
          if constexpr (std::is_same_v<N, True>) {
            return Tri::True;
          } else if constexpr (std::is_same_v<N, RelationAtom> || std::is_same_v<N, AttributeAtom>) {
            return atom(Atom(n), b);
          } else if constexpr (std::is_same_v<N, Conjunction>) {
            Tri acc = Tri::True;
            for (const auto& c : n.children) {
              Tri v = formula(c, b);
              if (v == Tri::False) return Tri::False;
              if (v == Tri::Unknown) acc = Tri::Unknown;
            }
            return acc;
          } else {
            Tri acc = Tri::False;
            for (const auto& c : n.children) {
              Tri v = formula(c, b);
              if (v == Tri::True) return Tri::True;
              if (v == Tri::Unknown) acc = Tri::Unknown;
            }
            return acc;
          }
        },
        f.node);
  }
};

}  // namespace

bool holds(const Atom& a, const ontology::WorldMap& map, const ontology::Ontology& ont) {
  Evaluator ev{map, ont, {}};
  return ev.atom(a, {}) == Tri::True;
}

bool holds(const Formula& f, const ontology::WorldMap& map, const ontology::Ontology& ont) {
  Evaluator ev{map, ont, {}};
  return ev.formula(f, {}) == Tri::True;
}

std::vector<Binding> find_bindings(const Formula& f, const ontology::WorldMap& map,
                                   const ontology::Ontology& ont) {
  check(f, ont);
  const auto vars = variables(f);
  const auto ids = map.ids();
  Evaluator ev{map, ont, {}};
  std::vector<Binding> out;
  Binding current;

  // Depth-first over variables in name order and ids in sorted order, so
  // results come out lexicographically; three-valued evaluation prunes
  // prefixes that already falsify f.
  auto search = [&](auto& self, std::size_t depth) -> void {
    Tri v = ev.formula(f, current);
    if (v == Tri::False) return;
    if (depth == vars.size()) {
      if (v == Tri::True) out.push_back(current);
      return;
    }
    for (const auto& id : ids) {
      current[vars[depth]] = Term::object(id);
      self(self, depth + 1);
    }
    current.erase(vars[depth]);
  };
  search(search, 0);
  return out;
}

bool compare_values(const Value& actual, Comparator cmp, const Value& expected, double tol) {
  return compare(actual, cmp, expected, tol);
}

}  // namespace somrs::entish
