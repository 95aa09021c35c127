#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "somrs/entish.hpp"
#include "somrs/ontology.hpp"
#include "somrs/registry.hpp"

namespace somrs::planner {

/// Service records sharing a type and templates collapse into one action;
/// cost and time estimates are the minimum over its candidates.
struct Action {
  std::string type_name;
  registry::ServiceKind kind = registry::ServiceKind::Physical;
  entish::Formula precondition;
  entish::Formula effect;
  double cost = 0;
  double time = 0;
  std::vector<std::string> candidates;  // service ids, sorted
};

std::vector<Action> group_actions(const std::vector<registry::ServiceRecord>& records);

struct PlanStep {
  std::string type_name;
  entish::Formula precondition;  // ground
  entish::Formula effect;        // ground
  double cost = 0;
  double time = 0;
  std::vector<std::string> candidates;
};

/// Steps are listed in a canonical topological order; `order` holds
/// (before, after) index pairs.
struct Plan {
  std::vector<PlanStep> steps;
  std::vector<std::pair<std::size_t, std::size_t>> order;
  double cost = 0;
  double time = 0;  // critical path
  std::size_t nodes = 0;
  std::string text;

  /// Indices of steps with no unfinished predecessor among `done`.
  std::vector<std::size_t> ready(const std::vector<bool>& done) const;
  /// Steps in reverse topological order, for compensation.
  std::vector<std::size_t> reverse_topological() const;
};

struct Options {
  std::size_t max_steps = 4;
  std::size_t max_plans = 16;
  std::size_t node_budget = 200000;
};

struct Result {
  std::vector<Plan> plans;  // ranked by (cost, time, nodes, text)
  std::size_t nodes_expanded = 0;
  bool budget_exhausted = false;
};

/// Partial-order causal-link planning from `world` towards `goal`, with
/// iterative deepening on the number of steps. A goal already true yields a
/// single empty plan. Throws MalformedFormula when the goal does not check
/// against the ontology.
Result plan(const entish::Formula& goal, const ontology::WorldMap& world, const ontology::Ontology& ont,
            const std::vector<Action>& actions, const Options& opts = {});

/// Applies a ground conjunctive effect the way the repository does: attribute
/// equalities set values, relation atoms replace instances of the same
/// relation with the same first argument. Other atoms are ignored.
void advance(ontology::WorldMap& state, const entish::Formula& effect);

struct CheckResult {
  bool ok = true;
  std::string reason;
};

/// Every linearization of the plan, simulated from `world` with advance(),
/// meets each step's precondition and ends with `goal` holding.
CheckResult check_plan(const Plan& p, const entish::Formula& goal, const ontology::WorldMap& world,
                       const ontology::Ontology& ont);

}  // namespace somrs::planner
