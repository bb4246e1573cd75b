//! Shared world vocabulary: the lab map, navigation graph, tracked workers,
//! robots and hazard events.
//!
//! Coordinates are meters with the origin at the southwest corner of the
//! lab, x pointing east and y pointing north.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Navigation node number. `0` is reserved for "stay" in reposition replies.
pub type NodeId = u32;

/// Default horizontal field of view for RGB-D stations (about 87 degrees).
pub const DEFAULT_HFOV: f64 = 1.518;
pub const DEFAULT_THERMAL_THRESHOLD: f64 = 55.0;
pub const IR_SENSOR_MIN: f64 = 20.0;
pub const IR_SENSOR_MAX: f64 = 400.0;

const DEMO_MAP: &str = include_str!("../assets/acl_demo_map.json");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

impl Point2D {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl fmt::Display for Point2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.2}, {:.2})", self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StationKind {
    #[serde(rename = "RGBD")]
    Rgbd,
    #[serde(rename = "IR")]
    Ir,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationPose {
    pub id: String,
    pub position: Point2D,
    /// Optical axis direction, radians counter-clockwise from east.
    pub heading: f64,
    pub kind: StationKind,
    /// Horizontal field of view in radians. Only meaningful for RGB-D stations.
    pub hfov: f64,
}

impl StationPose {
    /// RGB-D stations carry the speakers used for verbal warnings.
    pub fn has_speakers(&self) -> bool {
        self.kind == StationKind::Rgbd
    }
}

/// Outcome of feeding one temperature reading into a zone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReadingOutcome {
    pub alarmed: bool,
    pub was_alarmed: bool,
    pub saturated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThermalZone {
    pub id: String,
    pub position: Point2D,
    pub threshold: f64,
    pub sensor_min: f64,
    pub sensor_max: f64,
    /// Last reading, `None` until the first one arrives.
    pub current: Option<f64>,
    pub alarmed: bool,
    /// Last reading was above the camera's operating range.
    pub saturated: bool,
}

impl ThermalZone {
    pub fn new(id: impl Into<String>, position: Point2D, threshold: f64) -> Self {
        Self {
            id: id.into(),
            position,
            threshold,
            sensor_min: IR_SENSOR_MIN,
            sensor_max: IR_SENSOR_MAX,
            current: None,
            alarmed: false,
            saturated: false,
        }
    }

    /// Alarm is a strict comparison: a reading equal to the threshold is calm.
    pub fn record(&mut self, reading: f64) -> ReadingOutcome {
        let was_alarmed = self.alarmed;
        self.current = Some(reading);
        self.alarmed = reading > self.threshold;
        self.saturated = reading > self.sensor_max;
        ReadingOutcome {
            alarmed: self.alarmed,
            was_alarmed,
            saturated: self.saturated,
        }
    }
}

/// Undirected navigation graph over numbered waypoints.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NavGraph {
    nodes: BTreeMap<NodeId, Point2D>,
    edges: BTreeSet<(NodeId, NodeId)>,
    adjacency: BTreeMap<NodeId, BTreeSet<NodeId>>,
}

fn edge_key(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl NavGraph {
    /// Builds a graph, checking that every edge references existing nodes.
    /// Connectivity is checked separately by [`NavGraph::is_connected`].
    pub fn new(
        nodes: impl IntoIterator<Item = (NodeId, Point2D)>,
        edges: impl IntoIterator<Item = (NodeId, NodeId)>,
    ) -> Result<Self, MapError> {
        let mut graph = NavGraph::default();
        for (id, p) in nodes {
            if graph.nodes.insert(id, p).is_some() {
                return Err(MapError::invariant(format!("node {id}"), "duplicate node id"));
            }
            graph.adjacency.insert(id, BTreeSet::new());
        }
        for (a, b) in edges {
            for end in [a, b] {
                if !graph.nodes.contains_key(&end) {
                    return Err(MapError::invariant(
                        format!("node {end}"),
                        format!("edge ({a},{b}) references missing node {end}"),
                    ));
                }
            }
            if a == b {
                return Err(MapError::invariant(format!("edge ({a},{b})"), "self loop"));
            }
            graph.edges.insert(edge_key(a, b));
            graph.adjacency.entry(a).or_default().insert(b);
            graph.adjacency.entry(b).or_default().insert(a);
        }
        Ok(graph)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn position(&self, id: NodeId) -> Option<Point2D> {
        self.nodes.get(&id).copied()
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, Point2D)> + '_ {
        self.nodes.iter().map(|(id, p)| (*id, *p))
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    /// Each undirected edge exactly once, smaller id first.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.edges.iter().copied()
    }

    pub fn neighbors(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.adjacency.get(&id).into_iter().flatten().copied()
    }

    pub fn has_edge(&self, a: NodeId, b: NodeId) -> bool {
        self.edges.contains(&edge_key(a, b))
    }

    /// Euclidean length of the edge between two nodes, if both exist.
    pub fn edge_length(&self, a: NodeId, b: NodeId) -> Option<f64> {
        Some(self.position(a)?.distance(&self.position(b)?))
    }

    pub fn is_connected(&self) -> bool {
        let Some(start) = self.nodes.keys().next().copied() else {
            return true;
        };
        let mut seen = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(n) = queue.pop_front() {
            for m in self.neighbors(n) {
                if seen.insert(m) {
                    queue.push_back(m);
                }
            }
        }
        seen.len() == self.nodes.len()
    }

    /// Node closest to a point; ties go to the smaller id.
    pub fn nearest_node(&self, p: &Point2D) -> Option<NodeId> {
        self.nodes
            .iter()
            .min_by(|(ia, a), (ib, b)| {
                a.distance(p)
                    .total_cmp(&b.distance(p))
                    .then_with(|| ia.cmp(ib))
            })
            .map(|(id, _)| *id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotSpawn {
    pub id: String,
    pub node: NodeId,
}

/// Static description of the lab.
#[derive(Debug, Clone, PartialEq)]
pub struct LabMap {
    pub width: f64,
    pub height: f64,
    pub exits: Vec<Point2D>,
    pub stations: Vec<StationPose>,
    pub thermal_zones: Vec<ThermalZone>,
    pub graph: NavGraph,
    pub robots: Vec<RobotSpawn>,
}

impl LabMap {
    /// The bundled three-robot demo lab: two RGB-D stations, one IR station
    /// watching a hotplate, twelve navigation nodes.
    pub fn demo() -> Self {
        load_map(DEMO_MAP).expect("bundled demo map is valid")
    }

    pub fn contains(&self, p: &Point2D) -> bool {
        p.x >= 0.0 && p.x <= self.width && p.y >= 0.0 && p.y <= self.height
    }

    pub fn clamp(&self, p: Point2D) -> Point2D {
        Point2D::new(p.x.clamp(0.0, self.width), p.y.clamp(0.0, self.height))
    }

    pub fn diagonal(&self) -> f64 {
        self.width.hypot(self.height)
    }

    pub fn station(&self, id: &str) -> Option<&StationPose> {
        self.stations.iter().find(|s| s.id == id)
    }

    pub fn zone(&self, id: &str) -> Option<&ThermalZone> {
        self.thermal_zones.iter().find(|z| z.id == id)
    }

    pub fn to_document(&self) -> MapDocument {
        MapDocument {
            width: self.width,
            height: self.height,
            exits: self.exits.iter().map(|p| XY { x: p.x, y: p.y }).collect(),
            stations: self
                .stations
                .iter()
                .map(|s| StationDoc {
                    id: s.id.clone(),
                    x: s.position.x,
                    y: s.position.y,
                    heading: s.heading,
                    kind: s.kind,
                    hfov: (s.kind == StationKind::Rgbd).then_some(s.hfov),
                })
                .collect(),
            thermal_zones: self
                .thermal_zones
                .iter()
                .map(|z| ZoneDoc {
                    id: z.id.clone(),
                    x: z.position.x,
                    y: z.position.y,
                    threshold: Some(z.threshold),
                })
                .collect(),
            nodes: self
                .graph
                .nodes()
                .map(|(id, p)| NodeDoc { id, x: p.x, y: p.y })
                .collect(),
            edges: self.graph.edges().map(|(a, b)| [a, b]).collect(),
            robots: self.robots.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XY {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationDoc {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub kind: StationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hfov: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneDoc {
    pub id: String,
    pub x: f64,
    pub y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDoc {
    pub id: NodeId,
    pub x: f64,
    pub y: f64,
}

/// On-disk map file layout (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapDocument {
    pub width: f64,
    pub height: f64,
    pub exits: Vec<XY>,
    #[serde(default)]
    pub stations: Vec<StationDoc>,
    #[serde(default)]
    pub thermal_zones: Vec<ZoneDoc>,
    pub nodes: Vec<NodeDoc>,
    #[serde(default)]
    pub edges: Vec<[NodeId; 2]>,
    #[serde(default)]
    pub robots: Vec<RobotSpawn>,
}

#[derive(Debug, Error)]
pub enum MapError {
    #[error("map parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid map at {element}: {reason}")]
    Invariant { element: String, reason: String },
}

impl MapError {
    fn invariant(element: impl Into<String>, reason: impl Into<String>) -> Self {
        MapError::Invariant {
            element: element.into(),
            reason: reason.into(),
        }
    }
}

/// Parses and validates a JSON map file.
pub fn load_map(text: &str) -> Result<LabMap, MapError> {
    let doc: MapDocument = serde_json::from_str(text)?;
    LabMap::try_from(doc)
}

impl TryFrom<MapDocument> for LabMap {
    type Error = MapError;

    fn try_from(doc: MapDocument) -> Result<Self, MapError> {
        if !(doc.width.is_finite() && doc.width > 0.0 && doc.height.is_finite() && doc.height > 0.0)
        {
            return Err(MapError::invariant("width/height", "dimensions must be positive"));
        }
        let in_bounds = |x: f64, y: f64| {
            x.is_finite() && y.is_finite() && (0.0..=doc.width).contains(&x) && (0.0..=doc.height).contains(&y)
        };

        if doc.exits.is_empty() {
            return Err(MapError::invariant("exits", "at least one exit is required"));
        }
        for (i, e) in doc.exits.iter().enumerate() {
            if !in_bounds(e.x, e.y) {
                return Err(MapError::invariant(format!("exit {i}"), "outside map bounds"));
            }
        }

        let mut stations = Vec::with_capacity(doc.stations.len());
        let mut seen = BTreeSet::new();
        for s in &doc.stations {
            let element = format!("station {}", s.id);
            if !seen.insert(s.id.as_str()) {
                return Err(MapError::invariant(element, "duplicate station id"));
            }
            if !in_bounds(s.x, s.y) {
                return Err(MapError::invariant(element, "outside map bounds"));
            }
            if !(-PI..=PI).contains(&s.heading) {
                return Err(MapError::invariant(element, "heading must lie in [-pi, pi]"));
            }
            let hfov = s.hfov.unwrap_or(DEFAULT_HFOV);
            if s.kind == StationKind::Rgbd && !(hfov > 0.0 && hfov < PI) {
                return Err(MapError::invariant(element, "hfov must lie in (0, pi)"));
            }
            stations.push(StationPose {
                id: s.id.clone(),
                position: Point2D::new(s.x, s.y),
                heading: s.heading,
                kind: s.kind,
                hfov,
            });
        }

        let mut zones = Vec::with_capacity(doc.thermal_zones.len());
        let mut seen = BTreeSet::new();
        for z in &doc.thermal_zones {
            let element = format!("thermal zone {}", z.id);
            if !seen.insert(z.id.as_str()) {
                return Err(MapError::invariant(element, "duplicate zone id"));
            }
            if !in_bounds(z.x, z.y) {
                return Err(MapError::invariant(element, "outside map bounds"));
            }
            let threshold = z.threshold.unwrap_or(DEFAULT_THERMAL_THRESHOLD);
            if !(threshold > IR_SENSOR_MIN && threshold <= IR_SENSOR_MAX) {
                return Err(MapError::invariant(
                    element,
                    format!("threshold must lie in ({IR_SENSOR_MIN}, {IR_SENSOR_MAX}]"),
                ));
            }
            zones.push(ThermalZone::new(z.id.clone(), Point2D::new(z.x, z.y), threshold));
        }

        if doc.nodes.is_empty() {
            return Err(MapError::invariant("nodes", "navigation graph needs at least one node"));
        }
        for n in &doc.nodes {
            if n.id == 0 {
                return Err(MapError::invariant("node 0", "id 0 is reserved for 'stay'"));
            }
            if !in_bounds(n.x, n.y) {
                return Err(MapError::invariant(format!("node {}", n.id), "outside map bounds"));
            }
        }
        let graph = NavGraph::new(
            doc.nodes.iter().map(|n| (n.id, Point2D::new(n.x, n.y))),
            doc.edges.iter().map(|[a, b]| (*a, *b)),
        )?;
        if !graph.is_connected() {
            return Err(MapError::invariant("edges", "navigation graph is disconnected"));
        }

        let mut seen = BTreeSet::new();
        for r in &doc.robots {
            let element = format!("robot {}", r.id);
            if !seen.insert(r.id.as_str()) {
                return Err(MapError::invariant(element, "duplicate robot id"));
            }
            if !graph.contains(r.node) {
                return Err(MapError::invariant(
                    element,
                    format!("starts at missing node {}", r.node),
                ));
            }
        }

        Ok(LabMap {
            width: doc.width,
            height: doc.height,
            exits: doc.exits.iter().map(|e| Point2D::new(e.x, e.y)).collect(),
            stations,
            thermal_zones: zones,
            graph,
            robots: doc.robots,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PpeStatus {
    Wearing,
    NotWearing,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Posture {
    Upright,
    Prone,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeepleColor {
    Grey,
    Yellow,
    Red,
}

/// Prone dominates missing PPE; unknown states render grey.
pub fn meeple_color(ppe: PpeStatus, posture: Posture) -> MeepleColor {
    match (ppe, posture) {
        (_, Posture::Prone) => MeepleColor::Red,
        (PpeStatus::NotWearing, _) => MeepleColor::Yellow,
        _ => MeepleColor::Grey,
    }
}

/// A tracked, anonymized person.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkerTrack {
    pub id: String,
    pub position: Point2D,
    ppe: PpeStatus,
    posture: Posture,
    color: MeepleColor,
}

impl WorkerTrack {
    pub fn new(id: impl Into<String>, position: Point2D) -> Self {
        Self {
            id: id.into(),
            position,
            ppe: PpeStatus::Unknown,
            posture: Posture::Unknown,
            color: MeepleColor::Grey,
        }
    }

    pub fn ppe(&self) -> PpeStatus {
        self.ppe
    }

    pub fn posture(&self) -> Posture {
        self.posture
    }

    pub fn color(&self) -> MeepleColor {
        self.color
    }

    pub fn set_ppe(&mut self, ppe: PpeStatus) {
        self.ppe = ppe;
        self.color = meeple_color(self.ppe, self.posture);
    }

    pub fn set_posture(&mut self, posture: Posture) {
        self.posture = posture;
        self.color = meeple_color(self.ppe, self.posture);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobotState {
    pub id: String,
    pub at_node: NodeId,
    /// Remaining nodes to visit, not including `at_node`.
    pub path: Vec<NodeId>,
    pub frozen: bool,
    pub target: Option<NodeId>,
    /// Meters travelled along the edge towards `path[0]`.
    pub progress: f64,
}

impl RobotState {
    pub fn new(id: impl Into<String>, at_node: NodeId) -> Self {
        Self {
            id: id.into(),
            at_node,
            path: Vec::new(),
            frozen: false,
            target: None,
            progress: 0.0,
        }
    }

    pub fn is_moving(&self) -> bool {
        !self.path.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HazardKind {
    PpeViolation,
    Accident,
    Fire,
}

impl fmt::Display for HazardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HazardKind::PpeViolation => "ppe_violation",
            HazardKind::Accident => "accident",
            HazardKind::Fire => "fire",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HazardSubject {
    Worker(String),
    Zone(String),
}

impl HazardSubject {
    pub fn id(&self) -> &str {
        match self {
            HazardSubject::Worker(id) | HazardSubject::Zone(id) => id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardEvent {
    pub kind: HazardKind,
    pub subject: HazardSubject,
    pub location: Point2D,
    /// Simulation seconds.
    pub timestamp: f64,
}

impl HazardEvent {
    pub fn fire(zone: impl Into<String>, location: Point2D, timestamp: f64) -> Self {
        Self {
            kind: HazardKind::Fire,
            subject: HazardSubject::Zone(zone.into()),
            location,
            timestamp,
        }
    }

    pub fn worker(kind: HazardKind, worker: impl Into<String>, location: Point2D, timestamp: f64) -> Self {
        debug_assert!(kind != HazardKind::Fire, "fire hazards carry a zone id");
        Self {
            kind,
            subject: HazardSubject::Worker(worker.into()),
            location,
            timestamp,
        }
    }
}
