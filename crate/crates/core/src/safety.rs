//! Spatial safety reasoning over the navigation graph: safe-node filtering,
//! reposition plan validation and hazard-avoiding shortest routes.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{NavGraph, NodeId, Point2D};
use crate::vlm::{Assignment, RepositionPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockingRule {
    /// Two robots resolve to the same node.
    #[default]
    SameNode,
    /// Same node, or nodes joined by an edge.
    SameOrAdjacent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SafetyPolicy {
    pub hazard_radius: f64,
    pub person_radius: f64,
    pub exit_radius: f64,
    pub blocking_rule: BlockingRule,
}

impl Default for SafetyPolicy {
    fn default() -> Self {
        Self {
            hazard_radius: 2.0,
            person_radius: 2.0,
            exit_radius: 1.5,
            blocking_rule: BlockingRule::SameNode,
        }
    }
}

impl SafetyPolicy {
    pub fn validate(&self) -> Result<(), String> {
        for (name, r) in [
            ("hazard_radius", self.hazard_radius),
            ("person_radius", self.person_radius),
            ("exit_radius", self.exit_radius),
        ] {
            if !(r > 0.0 && r.is_finite()) {
                return Err(format!("{name} must be positive, got {r}"));
            }
        }
        Ok(())
    }
}

/// Nodes strictly farther than the respective radius from every hazard,
/// every tracked worker and every exit.
pub fn filter_safe_nodes(
    graph: &NavGraph,
    hazards: &[Point2D],
    workers: &[Point2D],
    exits: &[Point2D],
    policy: &SafetyPolicy,
) -> Vec<NodeId> {
    let clear = |p: &Point2D, points: &[Point2D], radius: f64| points.iter().all(|q| p.distance(q) > radius);
    graph
        .nodes()
        .filter(|(_, p)| {
            clear(p, hazards, policy.hazard_radius)
                && clear(p, workers, policy.person_radius)
                && clear(p, exits, policy.exit_radius)
        })
        .map(|(id, _)| id)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanError {
    /// Robots blocking each other.
    E1,
    /// Suggested node does not exist.
    E2,
    /// Robot left too close to the hazard.
    E3,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanOutcome {
    Success,
    Errors(BTreeSet<PlanError>),
}

impl PlanOutcome {
    pub fn is_success(&self) -> bool {
        matches!(self, PlanOutcome::Success)
    }

    pub fn errors(&self) -> BTreeSet<PlanError> {
        match self {
            PlanOutcome::Success => BTreeSet::new(),
            PlanOutcome::Errors(e) => e.clone(),
        }
    }

    pub fn contains(&self, e: PlanError) -> bool {
        matches!(self, PlanOutcome::Errors(set) if set.contains(&e))
    }
}

/// Checks a parsed plan. `robots` holds each robot's current node, indexed
/// like the plan (`robots[k-1]` is `ROBOT<k>`); `Stay` resolves to it.
pub fn validate_plan(
    plan: &RepositionPlan,
    graph: &NavGraph,
    hazard: Point2D,
    robots: &[NodeId],
    policy: &SafetyPolicy,
) -> PlanOutcome {
    debug_assert!(plan.parse_ok, "validate_plan expects a parsed plan");
    let mut errors = BTreeSet::new();
    let mut resolved: Vec<NodeId> = Vec::with_capacity(robots.len());
    for (i, current) in robots.iter().enumerate() {
        let node = match plan.assignments.get(&(i as u32 + 1)) {
            Some(Assignment::Node(n)) => *n,
            Some(Assignment::Stay) | None => *current,
        };
        if !graph.contains(node) {
            errors.insert(PlanError::E2);
        } else if let Some(p) = graph.position(node) {
            if p.distance(&hazard) <= policy.hazard_radius {
                errors.insert(PlanError::E3);
            }
        }
        resolved.push(node);
    }
    'pairs: for (i, a) in resolved.iter().enumerate() {
        for b in &resolved[i + 1..] {
            let blocked = a == b || (policy.blocking_rule == BlockingRule::SameOrAdjacent && graph.has_edge(*a, *b));
            if blocked {
                errors.insert(PlanError::E1);
                break 'pairs;
            }
        }
    }
    if errors.is_empty() {
        PlanOutcome::Success
    } else {
        PlanOutcome::Errors(errors)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RouteError {
    #[error("node {0} is not in the graph")]
    UnknownNode(NodeId),
    #[error("destination {0} is excluded")]
    ExcludedTarget(NodeId),
    #[error("no route from {from} to {to} avoiding the excluded nodes")]
    NoRoute { from: NodeId, to: NodeId },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Frontier {
    cost: f64,
    node: NodeId,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Shortest path by total Euclidean edge length that never enters an
/// excluded node. The start node is allowed even when excluded, so a robot
/// standing inside a perimeter can still leave it.
pub fn plan_route(
    graph: &NavGraph,
    from: NodeId,
    to: NodeId,
    excluded: &BTreeSet<NodeId>,
) -> Result<Vec<NodeId>, RouteError> {
    for n in [from, to] {
        if !graph.contains(n) {
            return Err(RouteError::UnknownNode(n));
        }
    }
    if from == to {
        return Ok(vec![from]);
    }
    if excluded.contains(&to) {
        return Err(RouteError::ExcludedTarget(to));
    }
    let mut dist: BTreeMap<NodeId, f64> = BTreeMap::from([(from, 0.0)]);
    let mut prev: BTreeMap<NodeId, NodeId> = BTreeMap::new();
    let mut heap = BinaryHeap::from([Frontier { cost: 0.0, node: from }]);
    while let Some(Frontier { cost, node }) = heap.pop() {
        if node == to {
            let mut path = vec![to];
            let mut cur = to;
            while let Some(p) = prev.get(&cur) {
                path.push(*p);
                cur = *p;
            }
            path.reverse();
            return Ok(path);
        }
        if cost > dist.get(&node).copied().unwrap_or(f64::INFINITY) {
            continue;
        }
        for next in graph.neighbors(node) {
            if excluded.contains(&next) {
                continue;
            }
            let step = graph.edge_length(node, next).unwrap_or(f64::INFINITY);
            let candidate = cost + step;
            if candidate < dist.get(&next).copied().unwrap_or(f64::INFINITY) {
                dist.insert(next, candidate);
                prev.insert(next, node);
                heap.push(Frontier { cost: candidate, node: next });
            }
        }
    }
    Err(RouteError::NoRoute { from, to })
}

/// Total Euclidean length of a node path.
pub fn path_length(graph: &NavGraph, path: &[NodeId]) -> f64 {
    path.windows(2)
        .map(|w| graph.edge_length(w[0], w[1]).unwrap_or(f64::INFINITY))
        .sum()
}
