#pragma once

// Random service sets over the random worlds, plus an exhaustive forward
// search that decides whether a short plan exists. The search keeps its own
// state representation and evaluator.

#include <deque>
#include <set>
#include <tuple>

#include "random_worlds.hpp"
#include "somrs/planner.hpp"

namespace randsvc {

using namespace somrs;
using randworld::Symbol;
using randworld::Value;

struct Problem {
  randworld::World world;
  std::vector<planner::Action> actions;
  entish::Formula goal;
};

inline entish::Term pick_term(std::mt19937& rng, const std::vector<std::string>& vars,
                              const std::vector<std::string>& ids) {
  if (!vars.empty() && rng() % 3 != 0) return entish::Term::variable(vars[rng() % vars.size()]);
  return entish::Term::object(ids[rng() % ids.size()]);
}

inline entish::Formula relation(std::mt19937& rng, const std::vector<std::string>& vars,
                                const std::vector<std::string>& ids) {
  return entish::RelationAtom{rng() % 2 ? "isOn" : "isNear", {pick_term(rng, vars, ids), pick_term(rng, vars, ids)}};
}

inline entish::Formula attribute(std::mt19937& rng, const std::vector<std::string>& vars,
                                 const std::vector<std::string>& ids, bool equality_only) {
  entish::AttributeAtom a;
  a.object = pick_term(rng, vars, ids);
  a.cmp = equality_only ? entish::Comparator::Eq : static_cast<entish::Comparator>(rng() % 6);
  if (rng() % 2) {
    a.path = "Size";
    a.value = static_cast<double>(rng() % 4);
  } else {
    a.path = "Color";
    a.value = Symbol{randworld::colors()[rng() % 3]};
  }
  return a;
}

inline entish::Formula atom(std::mt19937& rng, const std::vector<std::string>& vars,
                            const std::vector<std::string>& ids, bool equality_only) {
  return rng() % 3 == 0 ? attribute(rng, vars, ids, equality_only) : relation(rng, vars, ids);
}

inline Problem make_problem(std::mt19937& rng, int max_types = 3) {
  Problem p{randworld::make_world(rng, 5), {}, {}};
  const auto ids = p.world.map.ids();
  const std::vector<std::string> vars{"X", "Y"};
  const int n_actions = 1 + static_cast<int>(rng() % max_types);
  for (int i = 0; i < n_actions; ++i) {
    planner::Action a;
    a.type_name = "Svc" + std::to_string(i);
    std::vector<entish::Formula> pre;
    for (int k = 0, m = rng() % 3; k < m; ++k) pre.push_back(atom(rng, vars, ids, false));
    if (pre.size() == 2 && rng() % 4 == 0) {
      a.precondition = entish::any_of(pre);
    } else {
      a.precondition = entish::all_of(pre);
    }
    std::vector<entish::Formula> eff;
    for (int k = 0, m = 1 + rng() % 2; k < m; ++k) eff.push_back(atom(rng, vars, ids, true));
    a.effect = entish::all_of(eff);
    a.cost = 1 + rng() % 5;
    a.time = 1 + rng() % 5;
    a.candidates = {"S" + std::to_string(i)};
    p.actions.push_back(std::move(a));
  }
  std::vector<entish::Formula> goal;
  for (int k = 0, m = 1 + rng() % 2; k < m; ++k) goal.push_back(atom(rng, {}, ids, rng() % 2 == 0));
  p.goal = entish::all_of(goal);
  return p;
}

// ---------------------------------------------------------------------------
// Exhaustive search
// ---------------------------------------------------------------------------

struct State {
  std::set<std::tuple<std::string, std::string, std::string>> rels;
  std::map<std::pair<std::string, std::string>, Value> attrs;
  auto operator<=>(const State&) const = default;
};

inline State from_map(const ontology::WorldMap& map) {
  State s;
  for (const auto& [owner, inst] : map.relations()) s.rels.insert({inst.name, inst.args[0], inst.args[1]});
  for (const auto& id : map.ids()) {
    for (const auto& [path, v] : map.at(id).attributes) s.attrs[{id, path}] = v;
  }
  return s;
}

inline bool eval(const entish::Formula& f, const State& s, const ontology::Ontology& ont) {
  using namespace entish;
  if (f.is_true()) return true;
  if (const auto* c = std::get_if<Conjunction>(&f.node)) {
    return std::all_of(c->children.begin(), c->children.end(), [&](const auto& k) { return eval(k, s, ont); });
  }
  if (const auto* d = std::get_if<Disjunction>(&f.node)) {
    return std::any_of(d->children.begin(), d->children.end(), [&](const auto& k) { return eval(k, s, ont); });
  }
  if (const auto* r = std::get_if<RelationAtom>(&f.node)) {
    return s.rels.contains({r->relation, r->terms[0].name, r->terms[1].name});
  }
  const auto& a = std::get<AttributeAtom>(f.node);
  auto it = s.attrs.find({a.object.name, a.path});
  return it != s.attrs.end() && randworld::reference_compare(it->second, a.cmp, a.value, ont.tolerance_for(a.path));
}

// Effects are conjunctions of relation atoms and attribute equalities.
inline void apply(const entish::Formula& f, State& s, const std::set<std::string>& ids) {
  using namespace entish;
  if (const auto* c = std::get_if<Conjunction>(&f.node)) {
    for (const auto& k : c->children) apply(k, s, ids);
    return;
  }
  if (const auto* r = std::get_if<RelationAtom>(&f.node)) {
    std::erase_if(s.rels, [&](const auto& t) { return std::get<0>(t) == r->relation && std::get<1>(t) == r->terms[0].name; });
    s.rels.insert({r->relation, r->terms[0].name, r->terms[1].name});
    return;
  }
  if (const auto* a = std::get_if<AttributeAtom>(&f.node)) {
    if (ids.contains(a->object.name)) s.attrs[{a->object.name, a->path}] = a->value;
  }
}

struct GroundStep {
  entish::Formula pre;
  entish::Formula eff;
};

inline std::vector<GroundStep> ground_steps(const Problem& p) {
  const auto ids = p.world.map.ids();
  std::vector<GroundStep> out;
  for (const auto& a : p.actions) {
    std::set<std::string> vs;
    for (const auto& v : entish::variables(a.precondition)) vs.insert(v);
    for (const auto& v : entish::variables(a.effect)) vs.insert(v);
    std::vector<std::string> vars(vs.begin(), vs.end());
    std::size_t total = 1;
    for (std::size_t i = 0; i < vars.size(); ++i) total *= ids.size();
    for (std::size_t code = 0; code < total; ++code) {
      entish::Binding b;
      std::size_t rest = code;
      for (const auto& v : vars) {
        b[v] = entish::Term::object(ids[rest % ids.size()]);
        rest /= ids.size();
      }
      out.push_back({entish::substitute(a.precondition, b), entish::substitute(a.effect, b)});
    }
  }
  return out;
}

/// Length of the shortest step sequence reaching the goal, or -1 when none
/// has at most `max_depth` steps.
inline int shortest_plan(const Problem& p, int max_depth) {
  const auto& ont = p.world.ont;
  const auto steps = ground_steps(p);
  const auto idv = p.world.map.ids();
  const std::set<std::string> ids(idv.begin(), idv.end());
  std::set<State> seen;
  std::vector<State> frontier{from_map(p.world.map)};
  seen.insert(frontier.front());
  for (int depth = 0; depth <= max_depth; ++depth) {
    std::vector<State> next;
    for (const auto& s : frontier) {
      if (eval(p.goal, s, ont)) return depth;
      if (depth == max_depth) continue;
      for (const auto& g : steps) {
        if (!eval(g.pre, s, ont)) continue;
        State t = s;
        apply(g.eff, t, ids);
        if (seen.insert(t).second) next.push_back(std::move(t));
      }
    }
    frontier = std::move(next);
  }
  return -1;
}

/// Independent validation of a returned plan: every order-respecting
/// sequence meets each precondition and ends in the goal.
inline bool valid_under_all_orders(const planner::Plan& plan, const Problem& p) {
  const auto& ont = p.world.ont;
  const auto idv = p.world.map.ids();
  const std::set<std::string> ids(idv.begin(), idv.end());
  std::vector<std::size_t> perm(plan.steps.size());
  std::iota(perm.begin(), perm.end(), 0);
  do {
    std::vector<std::size_t> at(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) at[perm[i]] = i;
    bool respects = true;
    for (const auto& [a, b] : plan.order) respects = respects && at[a] < at[b];
    if (!respects) continue;
    State s = from_map(p.world.map);
    for (auto i : perm) {
      if (!eval(plan.steps[i].precondition, s, ont)) return false;
      apply(plan.steps[i].effect, s, ids);
    }
    if (!eval(p.goal, s, ont)) return false;
  } while (std::next_permutation(perm.begin(), perm.end()));
  return true;
}

}  // namespace randsvc
