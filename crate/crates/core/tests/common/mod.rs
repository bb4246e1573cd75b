//! Brute-force oracles and generators shared by the property and
//! acceptance suites.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use labguard_core::coordinator::{Action, ActionRecord, Event, InjectKind, Injection};
use labguard_core::model::{NavGraph, NodeId, Point2D};
use labguard_core::safety::{BlockingRule, PlanError, SafetyPolicy};
use labguard_core::vlm::Assignment;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Connected graph with nodes `1..=n` scattered over a 10 m square: a random
/// spanning tree plus up to `extra` further edges.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, extra: usize) -> NavGraph {
    let nodes: Vec<(NodeId, Point2D)> = (1..=n as NodeId)
        .map(|id| (id, Point2D::new(rng.random_range(0.0..10.0), rng.random_range(0.0..10.0))))
        .collect();
    let mut edges = BTreeSet::new();
    for i in 2..=n as NodeId {
        let parent = rng.random_range(1..i);
        edges.insert((parent, i));
    }
    if n > 1 {
        for _ in 0..extra {
            let a = rng.random_range(1..=n as NodeId);
            let b = rng.random_range(1..=n as NodeId);
            if a != b {
                edges.insert((a.min(b), a.max(b)));
            }
        }
    }
    NavGraph::new(nodes, edges).expect("generated graph is well formed")
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Plan checker written against the error definitions directly.
pub fn oracle_validate(
    assignments: &BTreeMap<u32, Assignment>,
    graph: &NavGraph,
    hazard: Point2D,
    robots: &[NodeId],
    policy: &SafetyPolicy,
) -> BTreeSet<PlanError> {
    let positions: BTreeMap<NodeId, (f64, f64)> = graph.nodes().map(|(id, p)| (id, (p.x, p.y))).collect();
    let edges: BTreeSet<(NodeId, NodeId)> = graph.edges().flat_map(|(a, b)| [(a, b), (b, a)]).collect();
    let mut targets = Vec::new();
    for (k, current) in robots.iter().enumerate() {
        let t = match assignments.get(&(k as u32 + 1)) {
            Some(Assignment::Node(n)) => *n,
            _ => *current,
        };
        targets.push(t);
    }
    let mut errors = BTreeSet::new();
    if targets.iter().any(|t| !positions.contains_key(t)) {
        errors.insert(PlanError::E2);
    }
    if targets
        .iter()
        .filter_map(|t| positions.get(t))
        .any(|p| dist(*p, (hazard.x, hazard.y)) <= policy.hazard_radius)
    {
        errors.insert(PlanError::E3);
    }
    let distinct: BTreeSet<_> = targets.iter().collect();
    let mut blocked = distinct.len() < targets.len();
    if policy.blocking_rule == BlockingRule::SameOrAdjacent {
        for a in &targets {
            for b in &targets {
                if edges.contains(&(*a, *b)) {
                    blocked = true;
                }
            }
        }
    }
    if blocked {
        errors.insert(PlanError::E1);
    }
    errors
}

/// Distance filter recomputed point by point.
pub fn oracle_safe_nodes(
    graph: &NavGraph,
    hazards: &[Point2D],
    workers: &[Point2D],
    exits: &[Point2D],
    policy: &SafetyPolicy,
) -> Vec<NodeId> {
    let mut out = Vec::new();
    for (id, p) in graph.nodes() {
        let mut ok = true;
        for (set, r) in [
            (hazards, policy.hazard_radius),
            (workers, policy.person_radius),
            (exits, policy.exit_radius),
        ] {
            for q in set {
                if dist((p.x, p.y), (q.x, q.y)) <= r {
                    ok = false;
                }
            }
        }
        if ok {
            out.push(id);
        }
    }
    out
}

/// Shortest admissible path length by enumerating every simple path.
pub fn oracle_shortest(graph: &NavGraph, from: NodeId, to: NodeId, excluded: &BTreeSet<NodeId>) -> Option<f64> {
    fn dfs(
        graph: &NavGraph,
        at: NodeId,
        to: NodeId,
        excluded: &BTreeSet<NodeId>,
        seen: &mut BTreeSet<NodeId>,
        len: f64,
        best: &mut Option<f64>,
    ) {
        if at == to {
            if best.is_none_or(|b| len < b) {
                *best = Some(len);
            }
            return;
        }
        let here = graph.position(at).unwrap();
        let next: Vec<NodeId> = graph.neighbors(at).collect();
        for n in next {
            if seen.contains(&n) || excluded.contains(&n) {
                continue;
            }
            let p = graph.position(n).unwrap();
            seen.insert(n);
            dfs(graph, n, to, excluded, seen, len + dist((here.x, here.y), (p.x, p.y)), best);
            seen.remove(&n);
        }
    }
    if from == to {
        return Some(0.0);
    }
    if excluded.contains(&to) {
        return None;
    }
    let mut best = None;
    let mut seen = BTreeSet::from([from]);
    dfs(graph, from, to, excluded, &mut seen, 0.0, &mut best);
    best
}

/// Hand-rolled scanner for the tolerant reply grammar: every
/// `robot<ws>*<digits>` mention must continue with `<ws>*:<ws>*` and either
/// `[<ws>*<digits><ws>*]` or bare digits not followed by a letter, digit,
/// underscore or `.<digit>`.
pub fn oracle_parse(raw: &str, robot_count: usize) -> Option<BTreeMap<u32, NodeId>> {
    let chars: Vec<char> = raw.chars().collect();
    let lower: Vec<char> = chars.iter().map(|c| c.to_ascii_lowercase()).collect();
    let word: Vec<char> = "robot".chars().collect();
    let skip_ws = |mut i: usize| {
        while i < chars.len() && chars[i].is_whitespace() {
            i += 1;
        }
        i
    };
    let digits = |mut i: usize| {
        let start = i;
        while i < chars.len() && chars[i].is_ascii_digit() {
            i += 1;
        }
        (chars[start..i].iter().collect::<String>(), i)
    };
    let mut found = BTreeMap::new();
    let mut i = 0;
    while i < chars.len() {
        if !lower[i..].starts_with(&word) {
            i += 1;
            continue;
        }
        let (index, after_index) = digits(skip_ws(i + word.len()));
        if index.is_empty() {
            i += 1;
            continue;
        }
        let index: u32 = index.parse().ok()?;
        if index == 0 || index as usize > robot_count {
            return None;
        }
        let mut j = skip_ws(after_index);
        if chars.get(j) != Some(&':') {
            return None;
        }
        j = skip_ws(j + 1);
        let node: String;
        if chars.get(j) == Some(&'[') {
            let (d, k) = digits(skip_ws(j + 1));
            let k = skip_ws(k);
            if d.is_empty() || chars.get(k) != Some(&']') {
                return None;
            }
            node = d;
        } else {
            let (d, k) = digits(j);
            if d.is_empty() {
                return None;
            }
            match chars.get(k) {
                Some(c) if c.is_alphanumeric() || *c == '_' => return None,
                Some('.') if chars.get(k + 1).is_some_and(|c| c.is_ascii_digit()) => return None,
                _ => {}
            }
            node = d;
        }
        let node: NodeId = node.parse().ok()?;
        if found.insert(index, node).is_some() {
            return None;
        }
        i = after_index;
    }
    (found.len() == robot_count).then_some(found)
}

/// Random event schedule over the demo lab for freeze and determinism
/// checks: PPE and accident toggles for three workers, fire readings and
/// one-second ticks.
pub fn random_schedule(seed: u64, steps: usize) -> Vec<Event> {
    let mut r = rng(seed);
    let workers = [("W1", 2.5, 3.0), ("W2", 9.5, 5.0), ("W3", 6.0, 7.0)];
    let mut t = 0.0;
    let mut events = Vec::new();
    for _ in 0..steps {
        t += r.random_range(0..4) as f64;
        let roll = r.random_range(0..10);
        let event = match roll {
            0..=3 => {
                let (id, x, y) = workers[r.random_range(0..workers.len())];
                let kind = if roll == 3 { InjectKind::Accident } else { InjectKind::Ppe };
                Event::Inject {
                    t,
                    injection: Injection {
                        kind,
                        target: id.into(),
                        value: Some(if r.random_bool(0.6) { 1.0 } else { 0.0 }),
                        x: Some(x),
                        y: Some(y),
                    },
                }
            }
            4 | 5 => Event::Thermal {
                t,
                zone: "T1".into(),
                reading: r.random_range(30.0..90.0),
            },
            _ => Event::Tick { t },
        };
        events.push(event);
    }
    events
}

/// Motion commands issued while a freeze was in effect.
pub fn motion_while_frozen(log: &[ActionRecord]) -> Vec<&ActionRecord> {
    let mut frozen = false;
    let mut bad = Vec::new();
    for r in log {
        match r.action {
            Action::Freeze { .. } => frozen = true,
            Action::Resume { .. } => frozen = false,
            _ if frozen && r.action.is_motion() => bad.push(r),
            _ => {}
        }
    }
    bad
}

/// Chi-square statistic of points binned into a `bins` x `bins` grid.
pub fn chi_square(points: &[Point2D], width: f64, height: f64, bins: usize) -> f64 {
    let mut counts = vec![0usize; bins * bins];
    for p in points {
        let i = ((p.x / width * bins as f64) as usize).min(bins - 1);
        let j = ((p.y / height * bins as f64) as usize).min(bins - 1);
        counts[j * bins + i] += 1;
    }
    let expected = points.len() as f64 / (bins * bins) as f64;
    counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
}
