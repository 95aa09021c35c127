#include "somrs/planner.hpp"

#include <algorithm>
#include <functional>
#include <map>
#include <numeric>
#include <set>

#include "somrs/error.hpp"

namespace somrs::planner {

using entish::Atom;
using entish::AttributeAtom;
using entish::Binding;
using entish::RelationAtom;
using entish::Term;

std::vector<Action> group_actions(const std::vector<registry::ServiceRecord>& records) {
  std::map<std::tuple<std::string, int, std::string, std::string>, Action> groups;
  for (const auto& r : records) {
    auto key = std::make_tuple(r.type_name, static_cast<int>(r.kind), entish::print(r.precondition),
                               entish::print(r.effect));
    auto [it, fresh] = groups.try_emplace(key);
    Action& a = it->second;
    if (fresh) {
      a = Action{r.type_name, r.kind, r.precondition, r.effect, r.attributes.cost, r.attributes.average_time, {}};
    }
    a.cost = std::min(a.cost, r.attributes.cost);
    a.time = std::min(a.time, r.attributes.average_time);
    a.candidates.push_back(r.service_id);
  }
  std::vector<Action> out;
  for (auto& [k, a] : groups) {
    std::sort(a.candidates.begin(), a.candidates.end());
    out.push_back(std::move(a));
  }
  return out;
}

std::vector<std::size_t> Plan::ready(const std::vector<bool>& done) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    if (done[i]) continue;
    bool blocked = false;
    for (const auto& [a, b] : order) blocked = blocked || (b == i && !done[a]);
    if (!blocked) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> Plan::reverse_topological() const {
  // Steps are stored in topological order already.
  std::vector<std::size_t> out(steps.size());
  std::iota(out.rbegin(), out.rend(), 0);
  return out;
}

void advance(ontology::WorldMap& state, const entish::Formula& effect) {
  const auto branches = entish::dnf(effect);
  if (branches.size() != 1) return;
  for (const auto& atom : branches.front()) {
    if (const auto* a = std::get_if<AttributeAtom>(&atom)) {
      if (a->cmp != entish::Comparator::Eq || a->object.is_variable()) continue;
      if (auto* obj = state.find_mutable(a->object.name)) obj->attributes[a->path] = a->value;
      continue;
    }
    const auto& r = std::get<RelationAtom>(atom);
    if (std::any_of(r.terms.begin(), r.terms.end(), [](const Term& t) { return t.is_variable(); })) continue;
    ontology::RelationInstance inst{r.relation, {}};
    for (const auto& t : r.terms) inst.args.push_back(t.name);
    for (const auto& [owner, existing] : state.relations()) {
      if (existing.name == inst.name && !existing.args.empty() && existing.args.front() == inst.args.front()) {
        state.find_mutable(owner)->relations.erase(existing);
      }
    }
    state.root_mutable().relations.insert(inst);
    state.reindex();
  }
}

CheckResult check_plan(const Plan& p, const entish::Formula& goal, const ontology::WorldMap& world,
                       const ontology::Ontology& ont) {
  const std::size_t n = p.steps.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (!entish::is_ground(p.steps[i].precondition) || !entish::is_ground(p.steps[i].effect)) {
      return {false, "step " + std::to_string(i) + " is not ground"};
    }
  }
  std::vector<std::vector<std::size_t>> preds(n);
  for (const auto& [a, b] : p.order) {
    if (a >= n || b >= n || a == b) return {false, "bad ordering edge"};
    preds[b].push_back(a);
  }
  std::vector<std::size_t> seq;
  std::vector<bool> used(n, false);
  CheckResult result;
  std::size_t linearizations = 0;
  constexpr std::size_t kMaxLinearizations = 20000;

  std::function<void()> rec = [&] {
    if (!result.ok || linearizations >= kMaxLinearizations) return;
    if (seq.size() == n) {
      ++linearizations;
      ontology::WorldMap state = world;
      for (auto i : seq) {
        if (!entish::holds(p.steps[i].precondition, state, ont)) {
          result = {false, "precondition of step " + std::to_string(i) + " (" + p.steps[i].type_name +
                               ") fails: " + entish::print(p.steps[i].precondition)};
          return;
        }
        advance(state, p.steps[i].effect);
      }
      if (!entish::holds(goal, state, ont)) result = {false, "goal does not hold after the plan"};
      return;
    }
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (used[i]) continue;
      if (std::any_of(preds[i].begin(), preds[i].end(), [&](std::size_t j) { return !used[j]; })) continue;
      any = true;
      used[i] = true;
      seq.push_back(i);
      rec();
      seq.pop_back();
      used[i] = false;
    }
    if (!any) result = {false, "ordering has a cycle"};
  };
  rec();
  return result;
}

namespace {

constexpr int kInit = 0;
constexpr int kGoal = 1;

struct StepInst {
  int action = -1;
  std::vector<Atom> pre;
  std::vector<Atom> eff;
};

struct Link {
  int producer;
  Atom atom;
  int consumer;
};

struct Open {
  Atom atom;
  int consumer;
};

struct Node {
  std::vector<StepInst> steps;
  std::vector<Open> open;
  std::vector<Link> links;
  std::set<std::pair<int, int>> order;
  Binding binding;
};

Term walk(Term t, const Binding& b) {
  for (int hops = 0; t.is_variable() && hops < 1000; ++hops) {
    auto it = b.find(t.name);
    if (it == b.end()) break;
    t = it->second;
  }
  return t;
}

bool unify_terms(const Term& x, const Term& y, Binding& b) {
  const Term a = walk(x, b);
  const Term c = walk(y, b);
  if (a == c) return true;
  if (a.is_variable()) {
    b[a.name] = c;
    return true;
  }
  if (c.is_variable()) {
    b[c.name] = a;
    return true;
  }
  return false;
}

bool same_value(const entish::Value& a, const entish::Value& b) {
  if (std::holds_alternative<double>(a) && std::holds_alternative<double>(b)) {
    return std::fabs(std::get<double>(a) - std::get<double>(b)) <= 1e-9;
  }
  return entish::compare_values(a, entish::Comparator::Eq, b, 0);
}

class Search {
 public:
  Search(const ontology::WorldMap& world, const ontology::Ontology& ont, const std::vector<Action>& actions,
         const entish::Formula& goal, const Options& opts, Result& out)
      : world_(world), ont_(ont), actions_(actions), goal_(goal), opts_(opts), out_(out), ids_(world.ids()) {
    for (const auto& a : actions_) {
      branches_.push_back(entish::dnf(a.precondition));
      effects_.push_back(entish::atoms(a.effect));
    }
  }

  void run(const std::vector<Atom>& goal_branch, std::size_t depth) {
    depth_ = depth;
    Node root;
    root.steps.resize(2);
    root.order.insert({kInit, kGoal});
    for (const auto& a : goal_branch) root.open.push_back({a, kGoal});
    dfs(std::move(root));
  }

  bool stopped() const { return out_.budget_exhausted || found_.size() >= opts_.max_plans; }
  std::map<std::string, Plan>& found() { return found_; }

 private:
  bool before(const Node& n, int a, int b) const {
    if (a == b) return false;
    std::vector<int> stack{a};
    std::set<int> seen{a};
    while (!stack.empty()) {
      int x = stack.back();
      stack.pop_back();
      for (auto it = n.order.lower_bound({x, INT32_MIN}); it != n.order.end() && it->first == x; ++it) {
        if (it->second == b) return true;
        if (seen.insert(it->second).second) stack.push_back(it->second);
      }
    }
    return false;
  }

  bool add_order(Node& n, int a, int b) const {
    if (a == b || before(n, b, a)) return false;
    n.order.insert({a, b});
    return true;
  }

  bool supports(const Atom& eff, const Atom& cond, Binding& b) const {
    if (const auto* er = std::get_if<RelationAtom>(&eff)) {
      const auto* cr = std::get_if<RelationAtom>(&cond);
      if (cr == nullptr || cr->relation != er->relation || cr->terms.size() != er->terms.size()) return false;
      Binding trial = b;
      for (std::size_t i = 0; i < er->terms.size(); ++i) {
        if (!unify_terms(er->terms[i], cr->terms[i], trial)) return false;
      }
      b = std::move(trial);
      return true;
    }
    const auto& ea = std::get<AttributeAtom>(eff);
    const auto* ca = std::get_if<AttributeAtom>(&cond);
    if (ca == nullptr || ca->path != ea.path || ea.cmp != entish::Comparator::Eq) return false;
    const bool ok = (ca->cmp == entish::Comparator::Eq && same_value(ea.value, ca->value)) ||
                    entish::compare_values(ea.value, ca->cmp, ca->value, ont_.tolerance_for(ca->path));
    if (!ok) return false;
    Binding trial = b;
    if (!unify_terms(ea.object, ca->object, trial)) return false;
    b = std::move(trial);
    return true;
  }

  // Definite clobbering only; undecided cases wait for more bindings.
  bool clobbers(const Atom& eff, const Atom& cond, const Binding& b) const {
    if (const auto* er = std::get_if<RelationAtom>(&eff)) {
      const auto* cr = std::get_if<RelationAtom>(&cond);
      if (cr == nullptr || cr->relation != er->relation || er->terms.empty() ||
          cr->terms.size() != er->terms.size()) {
        return false;
      }
      const Term s1 = walk(er->terms[0], b), s2 = walk(cr->terms[0], b);
      if (s1.is_variable() || s2.is_variable() || s1 != s2) return false;
      for (std::size_t i = 1; i < er->terms.size(); ++i) {
        const Term x = walk(er->terms[i], b), y = walk(cr->terms[i], b);
        if (!x.is_variable() && !y.is_variable() && x != y) return true;
      }
      return false;
    }
    const auto& ea = std::get<AttributeAtom>(eff);
    const auto* ca = std::get_if<AttributeAtom>(&cond);
    if (ca == nullptr || ca->path != ea.path || ea.cmp != entish::Comparator::Eq) return false;
    const Term o1 = walk(ea.object, b), o2 = walk(ca->object, b);
    if (o1.is_variable() || o2.is_variable() || o1 != o2) return false;
    return !entish::compare_values(ea.value, ca->cmp, ca->value, ont_.tolerance_for(ca->path));
  }

  struct Threat {
    int step;
    std::size_t link;
  };

  std::optional<Threat> find_threat(const Node& n) const {
    for (std::size_t l = 0; l < n.links.size(); ++l) {
      const auto& link = n.links[l];
      for (int s = 2; s < static_cast<int>(n.steps.size()); ++s) {
        if (s == link.producer || s == link.consumer) continue;
        if (before(n, s, link.producer) || before(n, link.consumer, s)) continue;
        for (const auto& e : n.steps[s].eff) {
          if (clobbers(e, link.atom, n.binding)) return Threat{s, l};
        }
      }
    }
    return std::nullopt;
  }

  Atom resolved(const Atom& a, const Binding& b) const {
    auto r = a;
    auto fix = [&](Term& t) { t = walk(t, b); };
    if (auto* rel = std::get_if<RelationAtom>(&r)) {
      for (auto& t : rel->terms) fix(t);
    } else {
      fix(std::get<AttributeAtom>(r).object);
    }
    return r;
  }

  std::optional<std::string> first_unbound(const Node& n) const {
    for (std::size_t s = 2; s < n.steps.size(); ++s) {
      for (const auto* list : {&n.steps[s].pre, &n.steps[s].eff}) {
        for (const auto& a : *list) {
          for (const auto& v : entish::variables(resolved(a, n.binding))) return v;
        }
      }
    }
    for (const auto& l : n.links) {
      for (const auto& v : entish::variables(resolved(l.atom, n.binding))) return v;
    }
    return std::nullopt;
  }

  StepInst instantiate(int action, std::size_t branch, int index) const {
    StepInst s;
    s.action = action;
    Binding rename;
    auto add = [&](const Atom& a) {
      for (const auto& v : entish::variables(a)) {
        rename.emplace(v, Term::variable(v + "@" + std::to_string(index)));
      }
    };
    for (const auto& a : branches_[action][branch]) add(a);
    for (const auto& a : effects_[action]) add(a);
    for (const auto& a : branches_[action][branch]) s.pre.push_back(entish::substitute(a, rename));
    for (const auto& a : effects_[action]) s.eff.push_back(entish::substitute(a, rename));
    return s;
  }

  void dfs(Node n) {
    if (stopped()) return;
    if (++out_.nodes_expanded > opts_.node_budget) {
      out_.budget_exhausted = true;
      return;
    }
    if (auto t = find_threat(n)) {
      const auto& link = n.links[t->link];
      if (link.producer != kInit) {
        Node d = n;
        if (add_order(d, t->step, link.producer)) dfs(std::move(d));
      }
      if (link.consumer != kGoal) {
        Node p = std::move(n);
        if (add_order(p, link.consumer, t->step)) dfs(std::move(p));
      }
      return;
    }
    if (n.open.empty()) {
      if (auto var = first_unbound(n)) {
        for (const auto& id : ids_) {
          Node g = n;
          g.binding[*var] = Term::object(id);
          dfs(std::move(g));
        }
        return;
      }
      emit(n);
      return;
    }

    const Open cond = n.open.back();
    n.open.pop_back();
    const Atom target = resolved(cond.atom, n.binding);

    // From the initial world.
    for (const auto& b : entish::find_bindings(entish::to_formula(target), world_, ont_)) {
      Node x = n;
      for (const auto& [var, term] : b) x.binding[var] = term;
      x.links.push_back({kInit, cond.atom, cond.consumer});
      dfs(std::move(x));
      if (stopped()) return;
    }

    // From a step already in the plan.
    for (int s = 2; s < static_cast<int>(n.steps.size()); ++s) {
      if (s == cond.consumer || before(n, cond.consumer, s)) continue;
      for (const auto& e : n.steps[s].eff) {
        Node x = n;
        if (!supports(e, cond.atom, x.binding)) continue;
        if (!add_order(x, s, cond.consumer)) continue;
        x.links.push_back({s, cond.atom, cond.consumer});
        dfs(std::move(x));
        if (stopped()) return;
      }
    }

    // From a new step.
    if (n.steps.size() - 2 >= depth_) return;
    const int index = static_cast<int>(n.steps.size());
    for (int a = 0; a < static_cast<int>(actions_.size()); ++a) {
      for (std::size_t br = 0; br < branches_[a].size(); ++br) {
        const StepInst inst = instantiate(a, br, index);
        for (const auto& e : inst.eff) {
          Node x = n;
          if (!supports(e, cond.atom, x.binding)) continue;
          x.steps.push_back(inst);
          x.order.insert({kInit, index});
          x.order.insert({index, kGoal});
          if (!add_order(x, index, cond.consumer)) continue;
          x.links.push_back({index, cond.atom, cond.consumer});
          for (const auto& p : inst.pre) x.open.push_back({p, index});
          dfs(std::move(x));
          if (stopped()) return;
        }
      }
    }
  }

  void emit(const Node& n) {
    const int count = static_cast<int>(n.steps.size()) - 2;
    std::vector<PlanStep> raw;
    std::vector<std::string> texts;
    for (int s = 2; s < static_cast<int>(n.steps.size()); ++s) {
      const auto& inst = n.steps[s];
      const auto& act = actions_[inst.action];
      std::vector<entish::Formula> pre, eff;
      for (const auto& a : inst.pre) pre.push_back(entish::to_formula(resolved(a, n.binding)));
      for (const auto& a : inst.eff) eff.push_back(entish::to_formula(resolved(a, n.binding)));
      PlanStep step{act.type_name, entish::all_of(pre), entish::all_of(eff), act.cost, act.time, act.candidates};
      texts.push_back(step.type_name + "(" + entish::print(step.precondition) + " -> " +
                      entish::print(step.effect) + ")");
      raw.push_back(std::move(step));
    }
    // Canonical topological order: earliest available step by text.
    std::vector<int> pos(count, -1), seq;
    std::vector<bool> placed(count, false);
    for (int k = 0; k < count; ++k) {
      int best = -1;
      for (int i = 0; i < count; ++i) {
        if (placed[i]) continue;
        bool blocked = false;
        for (int j = 0; j < count && !blocked; ++j) blocked = !placed[j] && j != i && before(n, j + 2, i + 2);
        if (!blocked && (best < 0 || texts[i] < texts[best])) best = i;
      }
      placed[best] = true;
      pos[best] = static_cast<int>(seq.size());
      seq.push_back(best);
    }
    Plan p;
    for (int i : seq) p.steps.push_back(raw[i]);
    // Transitive reduction of the ordering among real steps.
    for (int i = 0; i < count; ++i) {
      for (int j = 0; j < count; ++j) {
        if (!before(n, i + 2, j + 2)) continue;
        bool implied = false;
        for (int k = 0; k < count && !implied; ++k) {
          implied = k != i && k != j && before(n, i + 2, k + 2) && before(n, k + 2, j + 2);
        }
        if (!implied) p.order.emplace_back(pos[i], pos[j]);
      }
    }
    std::sort(p.order.begin(), p.order.end());
    std::vector<double> finish(p.steps.size(), 0);
    for (std::size_t i = 0; i < p.steps.size(); ++i) {
      double start = 0;
      for (const auto& [a, b] : p.order) {
        if (b == i) start = std::max(start, finish[a]);
      }
      finish[i] = start + p.steps[i].time;
      p.time = std::max(p.time, finish[i]);
      p.cost += p.steps[i].cost;
    }
    p.nodes = p.steps.size();
    for (std::size_t i = 0; i < seq.size(); ++i) p.text += (i ? "; " : "") + texts[seq[i]];
    for (const auto& [a, b] : p.order) p.text += " [" + std::to_string(a) + "<" + std::to_string(b) + "]";
    if (found_.contains(p.text)) return;
    if (!check_plan(p, goal_, world_, ont_).ok) return;
    found_.emplace(p.text, std::move(p));
  }

  const ontology::WorldMap& world_;
  const ontology::Ontology& ont_;
  const std::vector<Action>& actions_;
  const entish::Formula& goal_;
  const Options& opts_;
  Result& out_;
  std::vector<std::string> ids_;
  std::vector<std::vector<std::vector<Atom>>> branches_;
  std::vector<std::vector<Atom>> effects_;
  std::size_t depth_ = 0;
  std::map<std::string, Plan> found_;
};

}  // namespace

Result plan(const entish::Formula& goal, const ontology::WorldMap& world, const ontology::Ontology& ont,
            const std::vector<Action>& actions, const Options& opts) {
  try {
    entish::check(goal, ont);
    for (const auto& a : actions) {
      entish::check(a.precondition, ont);
      entish::check(a.effect, ont);
    }
  } catch (const Error& e) {
    throw Error(Errc::MalformedFormula, e.what());
  }
  Result out;
  Search search(world, ont, actions, goal, opts, out);
  const auto branches = entish::dnf(goal);
  for (std::size_t depth = 0; depth <= opts.max_steps; ++depth) {
    for (const auto& branch : branches) {
      search.run(branch, depth);
      if (search.stopped()) break;
    }
    if (!search.found().empty() || out.budget_exhausted) break;
  }
  for (auto& [text, p] : search.found()) out.plans.push_back(std::move(p));
  std::sort(out.plans.begin(), out.plans.end(), [](const Plan& a, const Plan& b) {
    return std::tie(a.cost, a.time, a.nodes, a.text) < std::tie(b.cost, b.time, b.nodes, b.text);
  });
  if (out.plans.size() > opts.max_plans) out.plans.resize(opts.max_plans);
  return out;
}

}  // namespace somrs::planner
