//! The safety state machine: consumes detections, thermal readings and
//! injections, runs the PPE, accident and fire flows, moves robots and emits
//! the action log.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info};

use crate::model::{
    HazardEvent, HazardKind, HazardSubject, LabMap, MeepleColor, NodeId, Point2D, Posture, PpeStatus, RobotState,
    StationKind, ThermalZone, WorkerTrack, IR_SENSOR_MAX, IR_SENSOR_MIN,
};
use crate::notify::{self, DeliveryReceipt, NotificationPayload, MANUAL_INTERVENTION, WARNING_PHRASES};
use crate::perception::{
    classify, project_detection, Debouncer, DetectionFrame, Dimension, PerceptionError, Q4Combine, Responses,
    Strategy, Verdict, DEFAULT_DEBOUNCE,
};
use crate::render::{self, MapSnapshot, RenderConfig, Renderer, Scene};
use crate::safety::{filter_safe_nodes, plan_route, validate_plan, PlanError, PlanOutcome, SafetyPolicy};
use crate::vlm::{
    build_classification_prompt, build_reposition_prompt, parse_reposition_with, Condition, ParseMode, PromptConfig,
    RepositionPlan, RobotBrief, VlmBackend, VlmError, VlmReply, VlmRequest,
};

pub const DEFAULT_COUNTDOWN: f64 = 600.0;
pub const DEFAULT_WARNING_INTERVAL: f64 = 30.0;
pub const DEFAULT_FIRE_HOLD_DOWN: f64 = 60.0;
pub const DEFAULT_ROBOT_SPEED: f64 = 1.0;
pub const DEFAULT_ASSOCIATION_RADIUS: f64 = 1.0;
pub const DEFAULT_SNAPSHOT_BASE: &str = "http://127.0.0.1:8080/snapshots";
const SNAPSHOT_HISTORY: usize = 64;
const EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Seconds a PPE violation may persist before escalation.
    pub countdown: f64,
    pub warning_interval: f64,
    pub thermal_threshold: f64,
    pub prompt_condition: Condition,
    /// Real seconds per simulated second.
    pub clock_scale: f64,
    pub ppe_strategy: Option<Strategy>,
    pub posture_strategy: Option<Strategy>,
    pub q4_combine: Q4Combine,
    pub debounce: usize,
    pub safety: SafetyPolicy,
    pub parse_mode: ParseMode,
    /// Seconds an alarmed zone must stay calm before its fire resolves.
    pub fire_hold_down: f64,
    /// Meters per simulated second.
    pub robot_speed: f64,
    /// Detections closer than this to a track join it.
    pub association_radius: f64,
    /// Extra reposition queries after a rejected plan.
    pub reposition_retries: u32,
    pub snapshot_base_url: String,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            countdown: DEFAULT_COUNTDOWN,
            warning_interval: DEFAULT_WARNING_INTERVAL,
            thermal_threshold: crate::model::DEFAULT_THERMAL_THRESHOLD,
            prompt_condition: Condition::C3,
            clock_scale: 1.0,
            ppe_strategy: Some(Strategy::Q4),
            posture_strategy: Some(Strategy::Q10),
            q4_combine: Q4Combine::Majority,
            debounce: DEFAULT_DEBOUNCE,
            safety: SafetyPolicy::default(),
            parse_mode: ParseMode::Tolerant,
            fire_hold_down: DEFAULT_FIRE_HOLD_DOWN,
            robot_speed: DEFAULT_ROBOT_SPEED,
            association_radius: DEFAULT_ASSOCIATION_RADIUS,
            reposition_retries: 0,
            snapshot_base_url: DEFAULT_SNAPSHOT_BASE.to_string(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<(), String> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(format!("{name} must be positive, got {v}"))
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), String> {
        positive("countdown", self.countdown)?;
        positive("warning_interval", self.warning_interval)?;
        positive("clock_scale", self.clock_scale)?;
        positive("robot_speed", self.robot_speed)?;
        positive("association_radius", self.association_radius)?;
        if !(IR_SENSOR_MIN..=IR_SENSOR_MAX).contains(&self.thermal_threshold) {
            return Err(format!(
                "thermal_threshold must lie in [{IR_SENSOR_MIN}, {IR_SENSOR_MAX}], got {}",
                self.thermal_threshold
            ));
        }
        if !(self.fire_hold_down >= 0.0 && self.fire_hold_down.is_finite()) {
            return Err(format!("fire_hold_down must be non-negative, got {}", self.fire_hold_down));
        }
        if self.debounce == 0 {
            return Err("debounce must be at least 1".into());
        }
        if let Some(s) = self.ppe_strategy {
            if s.dimension() != Dimension::Ppe {
                return Err(format!("ppe_strategy {s} does not classify PPE"));
            }
        }
        if let Some(s) = self.posture_strategy {
            if s.dimension() != Dimension::Posture {
                return Err(format!("posture_strategy {s} does not classify posture"));
            }
        }
        self.safety.validate()
    }
}

/// Partial update of [`PolicyConfig`]; absent fields are left unchanged.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigPatch {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub countdown: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning_interval: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thermal_threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_condition: Option<Condition>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clock_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ppe_strategy: Option<Strategy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub posture_strategy: Option<Strategy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q4_combine: Option<Q4Combine>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub debounce: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub safety: Option<SafetyPolicy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parse_mode: Option<ParseMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fire_hold_down: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub robot_speed: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub association_radius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reposition_retries: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot_base_url: Option<String>,
}

impl ConfigPatch {
    pub fn apply(&self, base: &PolicyConfig) -> Result<PolicyConfig, String> {
        let mut c = base.clone();
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = &self.$f {
                    c.$f = v.clone();
                }
            )*};
        }
        set!(
            countdown,
            warning_interval,
            thermal_threshold,
            prompt_condition,
            clock_scale,
            q4_combine,
            debounce,
            safety,
            parse_mode,
            fire_hold_down,
            robot_speed,
            association_radius,
            reposition_retries,
            snapshot_base_url
        );
        if self.ppe_strategy.is_some() {
            c.ppe_strategy = self.ppe_strategy;
        }
        if self.posture_strategy.is_some() {
            c.posture_strategy = self.posture_strategy;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectKind {
    Fire,
    Ppe,
    Accident,
}

/// Operator or scenario hazard injection. For `ppe` and `accident`, `value`
/// 1 (default) raises the hazard and 0 clears it; for `fire` it is the
/// reading in °C, defaulting to ten degrees above the zone threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Injection {
    pub kind: InjectKind,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    /// Position for a worker not tracked yet.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Frame(DetectionFrame),
    Thermal { t: f64, zone: String, reading: f64 },
    Inject { t: f64, injection: Injection },
    Tick { t: f64 },
    Ack { t: f64, incident_id: u64, operator: Option<String>, note: Option<String> },
    Receipt { t: f64, receipt: DeliveryReceipt },
    Configure { t: f64, patch: ConfigPatch },
}

impl Event {
    pub fn t(&self) -> f64 {
        match self {
            Event::Frame(f) => f.t,
            Event::Thermal { t, .. }
            | Event::Inject { t, .. }
            | Event::Tick { t }
            | Event::Ack { t, .. }
            | Event::Receipt { t, .. }
            | Event::Configure { t, .. } => *t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", content = "detail")]
pub enum Action {
    Freeze {
        robots: Vec<String>,
    },
    Resume {
        robots: Vec<String>,
    },
    Warn {
        station: String,
        worker: String,
        phrase: String,
    },
    Meeple {
        worker: String,
        color: MeepleColor,
    },
    Alarm {
        zone: String,
        reading: f64,
        threshold: f64,
        saturated: bool,
    },
    Prompt {
        condition: Condition,
        fingerprint: String,
        listed_nodes: Option<Vec<NodeId>>,
        generation: u64,
        attempt: u32,
    },
    Parse {
        ok: bool,
        raw: String,
        /// Robot index → node number, 0 meaning stay.
        assignments: BTreeMap<u32, NodeId>,
        latency: f64,
    },
    Validate {
        success: bool,
        errors: Vec<PlanError>,
    },
    MoveTo {
        robot: String,
        node: NodeId,
        path: Vec<NodeId>,
    },
    /// Planned move held back while the fleet is frozen.
    Defer {
        robot: String,
        node: NodeId,
    },
    Advance {
        robot: String,
        node: NodeId,
        arrived: bool,
    },
    Fallback {
        reason: String,
        robot: Option<String>,
    },
    Notify {
        escalation: bool,
        payload: NotificationPayload,
    },
    Delivered {
        attempts: u32,
    },
    NotifyFailed {
        attempts: u32,
        error: String,
    },
    Resolve {
        reason: String,
    },
    Ack {
        operator: Option<String>,
        note: Option<String>,
    },
    Inject {
        kind: InjectKind,
        target: String,
        value: Option<f64>,
    },
    Configure {
        patch: ConfigPatch,
    },
    BackendError {
        fingerprint: String,
        error: String,
    },
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Freeze { .. } => "Freeze",
            Action::Resume { .. } => "Resume",
            Action::Warn { .. } => "Warn",
            Action::Meeple { .. } => "Meeple",
            Action::Alarm { .. } => "Alarm",
            Action::Prompt { .. } => "Prompt",
            Action::Parse { .. } => "Parse",
            Action::Validate { .. } => "Validate",
            Action::MoveTo { .. } => "MoveTo",
            Action::Defer { .. } => "Defer",
            Action::Advance { .. } => "Advance",
            Action::Fallback { .. } => "Fallback",
            Action::Notify { .. } => "Notify",
            Action::Delivered { .. } => "Delivered",
            Action::NotifyFailed { .. } => "NotifyFailed",
            Action::Resolve { .. } => "Resolve",
            Action::Ack { .. } => "Ack",
            Action::Inject { .. } => "Inject",
            Action::Configure { .. } => "Configure",
            Action::BackendError { .. } => "BackendError",
        }
    }

    /// Robot motion commands.
    pub fn is_motion(&self) -> bool {
        matches!(self, Action::MoveTo { .. } | Action::Advance { .. })
    }
}

/// One action-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub t: f64,
    pub incident_id: Option<u64>,
    #[serde(flatten)]
    pub action: Action,
}

impl ActionRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("action records serialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncidentState {
    Active,
    CountdownRunning,
    Escalated,
    Resolved,
}

impl IncidentState {
    pub fn is_open(self) -> bool {
        self != IncidentState::Resolved
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Incident {
    pub id: u64,
    pub hazard: HazardEvent,
    pub state: IncidentState,
    pub deadline: Option<f64>,
    pub acknowledged: bool,
    pub resolved_at: Option<f64>,
    pub actions: Vec<ActionRecord>,
    #[serde(skip)]
    next_warning: Option<f64>,
    #[serde(skip)]
    warnings: usize,
    #[serde(skip)]
    notified: bool,
    #[serde(skip)]
    calm_since: Option<f64>,
}

impl Incident {
    fn new(id: u64, hazard: HazardEvent, state: IncidentState) -> Self {
        Self {
            id,
            hazard,
            state,
            deadline: None,
            acknowledged: false,
            resolved_at: None,
            actions: Vec::new(),
            next_warning: None,
            warnings: 0,
            notified: false,
            calm_since: None,
        }
    }

    pub fn kind(&self) -> HazardKind {
        self.hazard.kind
    }

    pub fn notifications(&self) -> impl Iterator<Item = &ActionRecord> {
        self.actions.iter().filter(|a| matches!(a.action, Action::Notify { .. }))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoordinatorError {
    #[error("unknown station {0}")]
    UnknownStation(String),
    #[error("unknown thermal zone {0}")]
    UnknownZone(String),
    #[error("unknown worker {0}")]
    UnknownWorker(String),
    #[error("unknown incident {0}")]
    UnknownIncident(u64),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error("invalid injection: {0}")]
    InvalidInjection(String),
    #[error("invalid thermal reading {0}")]
    InvalidReading(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl CoordinatorError {
    /// Lookup failures, as opposed to malformed input.
    pub fn is_not_found(&self) -> bool {
        matches!(
            self,
            CoordinatorError::UnknownStation(_)
                | CoordinatorError::UnknownZone(_)
                | CoordinatorError::UnknownWorker(_)
                | CoordinatorError::UnknownIncident(_)
        )
    }
}

/// Classification outcome for one frame and strategy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameRecord {
    pub t: f64,
    pub station: String,
    pub worker: String,
    pub strategy: Strategy,
    pub dimension: Dimension,
    pub verdict: Option<Verdict>,
    pub backend_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobotView {
    pub id: String,
    pub node: NodeId,
    pub position: Point2D,
    pub path: Vec<NodeId>,
    pub target: Option<NodeId>,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IncidentView {
    pub id: u64,
    pub kind: HazardKind,
    pub subject: HazardSubject,
    pub location: Point2D,
    pub opened_at: f64,
    pub state: IncidentState,
    pub deadline: Option<f64>,
    pub acknowledged: bool,
    pub resolved_at: Option<f64>,
}

/// Published world snapshot.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorldState {
    pub t: f64,
    pub frozen: bool,
    pub workers: Vec<WorkerTrack>,
    pub robots: Vec<RobotView>,
    pub zones: Vec<ThermalZone>,
    pub incidents: Vec<IncidentView>,
    pub snapshot_generation: u64,
    pub actions_emitted: u64,
}

/// What a reposition query needs from the world.
#[derive(Debug, Clone, Copy)]
pub struct RepositionContext<'a> {
    pub map: &'a LabMap,
    pub zones: &'a [ThermalZone],
    pub workers: &'a [WorkerTrack],
    pub robots: &'a [RobotState],
    /// Fire markers not tied to a monitored zone.
    pub fires: &'a [Point2D],
    /// Centers of every active safety perimeter.
    pub hazards: &'a [Point2D],
    pub condition: Condition,
    pub safety: &'a SafetyPolicy,
    pub parse_mode: ParseMode,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttemptOutcome {
    NoSafeNodes,
    Backend(VlmError),
    Unparseable,
    Invalid(BTreeSet<PlanError>),
    Valid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepositionAttempt {
    pub snapshot: MapSnapshot,
    pub request: Option<VlmRequest>,
    pub reply: Option<VlmReply>,
    pub plan: Option<RepositionPlan>,
    pub outcome: AttemptOutcome,
}

impl RepositionAttempt {
    pub fn fallback_reason(&self) -> Option<String> {
        match &self.outcome {
            AttemptOutcome::Valid => None,
            AttemptOutcome::NoSafeNodes => Some("no navigation node lies outside the safety perimeters".into()),
            AttemptOutcome::Backend(e) => Some(format!("model backend failed: {e}")),
            AttemptOutcome::Unparseable => Some("model reply did not follow the requested format".into()),
            AttemptOutcome::Invalid(errors) => Some(format!(
                "suggested plan failed validation ({})",
                errors.iter().map(|e| format!("{e:?}").to_lowercase()).collect::<Vec<_>>().join(", ")
            )),
        }
    }
}

pub fn robot_briefs(map: &LabMap, robots: &[RobotState]) -> Vec<RobotBrief> {
    robots
        .iter()
        .enumerate()
        .map(|(i, r)| RobotBrief {
            index: i as u32 + 1,
            id: r.id.clone(),
            node: r.at_node,
            position: render::robot_position(map, r),
        })
        .collect()
}

/// Scene text placed in reposition prompts.
pub fn describe_scene(map: &LabMap, zones: &[ThermalZone], workers: &[WorkerTrack], fires: &[Point2D]) -> String {
    let mut lines = vec![format!("The lab floor is {:.1} m by {:.1} m.", map.width, map.height)];
    for w in workers {
        let state = match w.color() {
            MeepleColor::Grey => "lab coat detected or not yet assessed",
            MeepleColor::Yellow => "lab coat not detected",
            MeepleColor::Red => "possible accident",
        };
        lines.push(format!("- Person {} at {}: {}.", w.id, w.position, state));
    }
    for z in zones {
        match (z.current, z.alarmed) {
            (Some(t), true) => lines.push(format!("- Hot spot {} at {}: {:.1} °C, above the alarm threshold.", z.id, z.position, t)),
            (Some(t), false) => lines.push(format!("- Hot spot {} at {}: {:.1} °C.", z.id, z.position, t)),
            (None, _) => lines.push(format!("- Hot spot {} at {}: no reading yet.", z.id, z.position)),
        }
    }
    for f in fires {
        lines.push(format!("- Fire at {f}."));
    }
    for e in &map.exits {
        lines.push(format!("- Exit at {e}."));
    }
    lines.join("\n")
}

/// Renders the scene, prompts the backend for robot positions, parses and
/// validates the reply against `hazard`.
pub fn attempt_reposition(
    ctx: &RepositionContext<'_>,
    hazard: &HazardEvent,
    renderer: &mut Renderer,
    backend: &mut dyn VlmBackend,
) -> RepositionAttempt {
    let snapshot = renderer.render_2d(&Scene {
        map: ctx.map,
        zones: ctx.zones,
        workers: ctx.workers,
        robots: ctx.robots,
        fires: ctx.fires,
    });
    let worker_positions: Vec<Point2D> = ctx.workers.iter().map(|w| w.position).collect();
    let safe = filter_safe_nodes(&ctx.map.graph, ctx.hazards, &worker_positions, &ctx.map.exits, ctx.safety);
    let all: Vec<NodeId> = ctx.map.graph.node_ids().collect();
    let config = PromptConfig::new(
        ctx.condition,
        snapshot.image.clone(),
        &all,
        &safe,
        describe_scene(ctx.map, ctx.zones, ctx.workers, ctx.fires),
    );
    let briefs = robot_briefs(ctx.map, ctx.robots);
    let mut attempt = RepositionAttempt {
        snapshot,
        request: None,
        reply: None,
        plan: None,
        outcome: AttemptOutcome::NoSafeNodes,
    };
    let request = match build_reposition_prompt(&config, hazard, &briefs) {
        Ok(r) => r,
        Err(VlmError::NoSafeNodes) => return attempt,
        Err(e) => {
            attempt.outcome = AttemptOutcome::Backend(e);
            return attempt;
        }
    };
    let reply = backend.complete(&request);
    attempt.request = Some(request);
    let reply = match reply {
        Ok(r) => r,
        Err(e) => {
            attempt.outcome = AttemptOutcome::Backend(e);
            return attempt;
        }
    };
    let plan = parse_reposition_with(&reply.text, ctx.robots.len(), ctx.parse_mode);
    attempt.outcome = if !plan.parse_ok {
        AttemptOutcome::Unparseable
    } else {
        let nodes: Vec<NodeId> = ctx.robots.iter().map(|r| r.at_node).collect();
        match validate_plan(&plan, &ctx.map.graph, hazard.location, &nodes, ctx.safety) {
            PlanOutcome::Success => AttemptOutcome::Valid,
            PlanOutcome::Errors(e) => AttemptOutcome::Invalid(e),
        }
    };
    attempt.reply = Some(reply);
    attempt.plan = Some(plan);
    attempt
}

struct WorkerSlot {
    track: WorkerTrack,
    ppe: Debouncer<PpeStatus>,
    posture: Debouncer<Posture>,
}

impl WorkerSlot {
    fn new(id: &str, position: Point2D, debounce: usize) -> Self {
        Self {
            track: WorkerTrack::new(id, position),
            ppe: Debouncer::new(PpeStatus::Unknown, debounce),
            posture: Debouncer::new(Posture::Unknown, debounce),
        }
    }
}

pub struct Coordinator {
    map: LabMap,
    config: PolicyConfig,
    backend: Box<dyn VlmBackend>,
    renderer: Renderer,
    now: f64,
    zones: Vec<ThermalZone>,
    workers: BTreeMap<String, WorkerSlot>,
    robots: Vec<RobotState>,
    robot_incident: Vec<Option<u64>>,
    incidents: BTreeMap<u64, Incident>,
    next_incident: u64,
    next_worker: u64,
    frozen: bool,
    deferred: BTreeMap<usize, (u64, NodeId)>,
    pending: Vec<ActionRecord>,
    emitted: u64,
    snapshots: BTreeMap<u64, Vec<u8>>,
    record_frames: bool,
    frames: Vec<FrameRecord>,
}

impl Coordinator {
    pub fn new(map: LabMap, config: PolicyConfig, backend: Box<dyn VlmBackend>) -> Result<Self, CoordinatorError> {
        config.validate().map_err(CoordinatorError::Config)?;
        let robots: Vec<RobotState> = map.robots.iter().map(|r| RobotState::new(r.id.clone(), r.node)).collect();
        Ok(Self {
            zones: map.thermal_zones.clone(),
            robot_incident: vec![None; robots.len()],
            robots,
            map,
            config,
            backend,
            renderer: Renderer::new(RenderConfig::default()),
            now: 0.0,
            workers: BTreeMap::new(),
            incidents: BTreeMap::new(),
            next_incident: 1,
            next_worker: 1,
            frozen: false,
            deferred: BTreeMap::new(),
            pending: Vec::new(),
            emitted: 0,
            snapshots: BTreeMap::new(),
            record_frames: false,
            frames: Vec::new(),
        })
    }

    /// Keeps per-frame classification records for grading.
    pub fn set_record_frames(&mut self, on: bool) {
        self.record_frames = on;
    }

    pub fn take_frame_records(&mut self) -> Vec<FrameRecord> {
        std::mem::take(&mut self.frames)
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn map(&self) -> &LabMap {
        &self.map
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn robots(&self) -> &[RobotState] {
        &self.robots
    }

    pub fn zones(&self) -> &[ThermalZone] {
        &self.zones
    }

    pub fn worker(&self, id: &str) -> Option<&WorkerTrack> {
        self.workers.get(id).map(|w| &w.track)
    }

    pub fn workers(&self) -> Vec<WorkerTrack> {
        self.workers.values().map(|w| w.track.clone()).collect()
    }

    pub fn incident(&self, id: u64) -> Option<&Incident> {
        self.incidents.get(&id)
    }

    pub fn incidents(&self) -> impl Iterator<Item = &Incident> {
        self.incidents.values()
    }

    pub fn snapshot_png(&self, generation: u64) -> Option<&[u8]> {
        self.snapshots.get(&generation).map(Vec::as_slice)
    }

    pub fn snapshot_generation(&self) -> u64 {
        self.renderer.generation()
    }

    /// Current world drawn without consuming a snapshot generation.
    pub fn render_live(&self) -> Vec<u8> {
        let workers = self.workers();
        render::render_png(
            &Scene {
                map: &self.map,
                zones: &self.zones,
                workers: &workers,
                robots: &self.robots,
                fires: &[],
            },
            &self.renderer.config(),
        )
        .0
    }

    pub fn state(&self) -> WorldState {
        WorldState {
            t: self.now,
            frozen: self.frozen,
            workers: self.workers(),
            robots: self
                .robots
                .iter()
                .map(|r| RobotView {
                    id: r.id.clone(),
                    node: r.at_node,
                    position: render::robot_position(&self.map, r),
                    path: r.path.clone(),
                    target: r.target,
                    frozen: r.frozen,
                })
                .collect(),
            zones: self.zones.clone(),
            incidents: self
                .incidents
                .values()
                .map(|i| IncidentView {
                    id: i.id,
                    kind: i.hazard.kind,
                    subject: i.hazard.subject.clone(),
                    location: i.hazard.location,
                    opened_at: i.hazard.timestamp,
                    state: i.state,
                    deadline: i.deadline,
                    acknowledged: i.acknowledged,
                    resolved_at: i.resolved_at,
                })
                .collect(),
            snapshot_generation: self.renderer.generation(),
            actions_emitted: self.emitted,
        }
    }

    /// Applies one event and returns the actions it produced. Events older
    /// than the current time are applied at the current time.
    pub fn handle(&mut self, event: Event) -> Result<Vec<ActionRecord>, CoordinatorError> {
        let t = if event.t().is_finite() { event.t().max(self.now) } else { self.now };
        let result = match event {
            Event::Frame(frame) => self.on_frame(t, frame),
            Event::Thermal { zone, reading, .. } => self.on_thermal(t, &zone, reading),
            Event::Inject { injection, .. } => self.on_inject(t, injection),
            Event::Tick { .. } => {
                self.advance(t);
                Ok(())
            }
            Event::Ack {
                incident_id,
                operator,
                note,
                ..
            } => self.on_ack(t, incident_id, operator, note),
            Event::Receipt { receipt, .. } => self.on_receipt(t, receipt),
            Event::Configure { patch, .. } => self.on_configure(t, patch),
        };
        let out = std::mem::take(&mut self.pending);
        result.map(|_| out)
    }

    fn emit(&mut self, incident_id: Option<u64>, action: Action) {
        let record = ActionRecord {
            t: self.now,
            incident_id,
            action,
        };
        debug!(action = record.action.name(), incident = ?incident_id, t = self.now, "action");
        if let Some(inc) = incident_id.and_then(|id| self.incidents.get_mut(&id)) {
            inc.actions.push(record.clone());
        }
        self.emitted += 1;
        self.pending.push(record);
    }

    fn open_incident(&mut self, hazard: HazardEvent, state: IncidentState) -> u64 {
        let id = self.next_incident;
        self.next_incident += 1;
        info!(id, kind = %hazard.kind, subject = hazard.subject.id(), "incident opened");
        self.incidents.insert(id, Incident::new(id, hazard, state));
        id
    }

    fn open_for(&self, kind: HazardKind, subject: &str) -> Option<u64> {
        self.incidents
            .values()
            .find(|i| i.state.is_open() && i.hazard.kind == kind && i.hazard.subject.id() == subject)
            .map(|i| i.id)
    }

    fn resolve(&mut self, id: u64, reason: &str) {
        if let Some(inc) = self.incidents.get_mut(&id) {
            inc.state = IncidentState::Resolved;
            inc.resolved_at = Some(self.now);
            inc.deadline = None;
            inc.next_warning = None;
        }
        self.deferred.retain(|_, (inc, _)| *inc != id);
        self.emit(Some(id), Action::Resolve { reason: reason.to_string() });
    }

    // ---- time ----

    fn advance(&mut self, t: f64) {
        let dt = t - self.now;
        self.now = t;
        let open: Vec<u64> = self.incidents.values().filter(|i| i.state.is_open()).map(|i| i.id).collect();
        for id in open {
            let inc = &self.incidents[&id];
            match inc.hazard.kind {
                HazardKind::PpeViolation => {
                    if inc.state == IncidentState::CountdownRunning && inc.deadline.is_some_and(|d| t + EPS >= d) {
                        let inc = self.incidents.get_mut(&id).expect("open incident");
                        inc.state = IncidentState::Escalated;
                        self.notify(id, true, None);
                    }
                    let inc = &self.incidents[&id];
                    if let Some(next) = inc.next_warning {
                        if t + EPS >= next {
                            self.warn(id);
                            let interval = self.config.warning_interval;
                            let steps = ((t - next) / interval).floor() + 1.0;
                            let inc = self.incidents.get_mut(&id).expect("open incident");
                            inc.next_warning = Some(next + steps * interval);
                        }
                    }
                }
                HazardKind::Fire => {
                    if inc.calm_since.is_some_and(|c| t - c + EPS >= self.config.fire_hold_down) {
                        self.resolve(id, "temperature stayed below the threshold for the hold-down period");
                    }
                }
                HazardKind::Accident => {}
            }
        }
        if dt > 0.0 {
            self.step_motion(dt);
        }
    }

    fn step_motion(&mut self, dt: f64) {
        if self.frozen {
            return;
        }
        for i in 0..self.robots.len() {
            let mut budget = self.config.robot_speed * dt;
            while budget > 0.0 && !self.robots[i].path.is_empty() {
                let robot = &mut self.robots[i];
                let next = robot.path[0];
                let len = self.map.graph.edge_length(robot.at_node, next).unwrap_or(0.0);
                let remaining = len - robot.progress;
                if budget + EPS >= remaining {
                    budget -= remaining.max(0.0);
                    robot.at_node = next;
                    robot.path.remove(0);
                    robot.progress = 0.0;
                    let arrived = robot.path.is_empty();
                    if arrived {
                        robot.target = None;
                    }
                    let id = robot.id.clone();
                    let incident = self.robot_incident[i];
                    if arrived {
                        self.robot_incident[i] = None;
                    }
                    self.emit(incident, Action::Advance { robot: id, node: next, arrived });
                } else {
                    robot.progress += budget;
                    budget = 0.0;
                }
            }
        }
    }

    // ---- fleet ----

    fn freeze_all(&mut self, incident: u64) {
        self.frozen = true;
        for r in &mut self.robots {
            r.frozen = true;
        }
        let robots = self.robots.iter().map(|r| r.id.clone()).collect();
        self.emit(Some(incident), Action::Freeze { robots });
    }

    fn resume_all(&mut self, incident: u64) {
        self.frozen = false;
        for r in &mut self.robots {
            r.frozen = false;
        }
        let robots = self.robots.iter().map(|r| r.id.clone()).collect();
        self.emit(Some(incident), Action::Resume { robots });
        for (idx, (inc, node)) in std::mem::take(&mut self.deferred) {
            self.start_move(inc, idx, node);
        }
    }

    /// Nodes robots must not pass through: active hazard perimeters and
    /// the surroundings of flagged workers.
    fn route_exclusions(&self) -> BTreeSet<NodeId> {
        let hazards: Vec<Point2D> = self
            .incidents
            .values()
            .filter(|i| i.state.is_open() && i.hazard.kind != HazardKind::PpeViolation)
            .map(|i| i.hazard.location)
            .collect();
        let flagged: Vec<Point2D> = self
            .workers
            .values()
            .filter(|w| w.track.color() != MeepleColor::Grey)
            .map(|w| w.track.position)
            .collect();
        let s = &self.config.safety;
        self.map
            .graph
            .nodes()
            .filter(|(_, p)| {
                hazards.iter().any(|h| p.distance(h) <= s.hazard_radius)
                    || flagged.iter().any(|w| p.distance(w) <= s.person_radius)
            })
            .map(|(id, _)| id)
            .collect()
    }

    fn start_move(&mut self, incident: u64, idx: usize, node: NodeId) {
        debug_assert!(!self.frozen);
        let excluded = self.route_exclusions();
        let robot_id = self.robots[idx].id.clone();
        let from = self.robots[idx].at_node;
        match plan_route(&self.map.graph, from, node, &excluded) {
            Ok(path) => {
                let robot = &mut self.robots[idx];
                let keep_progress = robot.path.first() == path.get(1);
                if !keep_progress {
                    robot.progress = 0.0;
                }
                robot.path = path[1..].to_vec();
                robot.target = (!robot.path.is_empty()).then_some(node);
                self.robot_incident[idx] = Some(incident);
                self.emit(Some(incident), Action::MoveTo { robot: robot_id, node, path });
            }
            Err(e) => self.emit(
                Some(incident),
                Action::Fallback {
                    reason: format!("no safe route: {e}"),
                    robot: Some(robot_id),
                },
            ),
        }
    }

    // ---- flows ----

    fn warn(&mut self, incident: u64) {
        let inc = &self.incidents[&incident];
        let worker = inc.hazard.subject.id().to_string();
        let position = self.workers.get(&worker).map(|w| w.track.position).unwrap_or(inc.hazard.location);
        let phrase = WARNING_PHRASES[inc.warnings % WARNING_PHRASES.len()];
        let station = self
            .map
            .stations
            .iter()
            .filter(|s| s.kind == StationKind::Rgbd)
            .min_by(|a, b| a.position.distance(&position).total_cmp(&b.position.distance(&position)));
        let Some(event) = station.and_then(|s| notify::speak(s, phrase, self.now).ok()) else {
            return;
        };
        self.incidents.get_mut(&incident).expect("incident").warnings += 1;
        self.emit(
            Some(incident),
            Action::Warn {
                station: event.station,
                worker,
                phrase: event.phrase,
            },
        );
    }

    fn render_snapshot(&mut self) -> u64 {
        let workers = self.workers();
        let snap = self.renderer.render_2d(&Scene {
            map: &self.map,
            zones: &self.zones,
            workers: &workers,
            robots: &self.robots,
            fires: &[],
        });
        self.store_snapshot(snap.generation, snap.image);
        snap.generation
    }

    fn store_snapshot(&mut self, generation: u64, png: Vec<u8>) {
        self.snapshots.insert(generation, png);
        while self.snapshots.len() > SNAPSHOT_HISTORY {
            self.snapshots.pop_first();
        }
    }

    fn snapshot_url(&self, generation: u64) -> String {
        format!("{}/{generation}.png", self.config.snapshot_base_url.trim_end_matches('/'))
    }

    fn notify(&mut self, incident: u64, escalation: bool, annotation: Option<String>) {
        if self.incidents[&incident].notified {
            return;
        }
        let generation = self.render_snapshot();
        let inc = self.incidents.get_mut(&incident).expect("incident");
        inc.notified = true;
        let hazard = inc.hazard.clone();
        let mut text = match hazard.kind {
            HazardKind::PpeViolation => format!(
                "PPE non-compliance: person {} near {} has not been wearing a lab coat for {:.0} s.",
                hazard.subject.id(),
                hazard.location,
                self.now - hazard.timestamp
            ),
            HazardKind::Accident => format!(
                "Possible accident: person {} may be injured at {}.",
                hazard.subject.id(),
                hazard.location
            ),
            HazardKind::Fire => {
                let zone = self.zones.iter().find(|z| z.id == hazard.subject.id());
                let reading = zone.and_then(|z| z.current).unwrap_or(f64::NAN);
                let threshold = zone.map(|z| z.threshold).unwrap_or(f64::NAN);
                format!(
                    "Possible fire at hot spot {} {}: {reading:.1} °C exceeds the {threshold:.1} °C threshold.",
                    hazard.subject.id(),
                    hazard.location
                )
            }
        };
        if let Some(reason) = annotation {
            text.push_str(&format!(" {}: {reason}.", capitalize(MANUAL_INTERVENTION)));
        }
        let payload = NotificationPayload::new(
            incident,
            hazard.kind,
            text,
            hazard.location,
            self.snapshot_url(generation),
            self.now,
        );
        self.emit(Some(incident), Action::Notify { escalation, payload });
    }

    /// Queries, validates and executes a reposition plan; returns the
    /// fallback reason when robots hold position.
    fn reposition(&mut self, incident: u64) -> Option<String> {
        let hazard = self.incidents[&incident].hazard.clone();
        let mut reason = None;
        for attempt_no in 0..=self.config.reposition_retries {
            let workers = self.workers();
            let hazards: Vec<Point2D> = self
                .incidents
                .values()
                .filter(|i| i.state.is_open() && i.hazard.kind != HazardKind::PpeViolation)
                .map(|i| i.hazard.location)
                .collect();
            let ctx = RepositionContext {
                map: &self.map,
                zones: &self.zones,
                workers: &workers,
                robots: &self.robots,
                fires: &[],
                hazards: &hazards,
                condition: self.config.prompt_condition,
                safety: &self.config.safety,
                parse_mode: self.config.parse_mode,
            };
            let attempt = attempt_reposition(&ctx, &hazard, &mut self.renderer, self.backend.as_mut());
            let generation = attempt.snapshot.generation;
            self.store_snapshot(generation, attempt.snapshot.image.clone());
            if let Some(req) = &attempt.request {
                self.emit(
                    Some(incident),
                    Action::Prompt {
                        condition: self.config.prompt_condition,
                        fingerprint: req.fingerprint.clone(),
                        listed_nodes: req.listed_nodes.clone(),
                        generation,
                        attempt: attempt_no,
                    },
                );
            }
            if let AttemptOutcome::Backend(e) = &attempt.outcome {
                let fingerprint = attempt.request.as_ref().map(|r| r.fingerprint.clone()).unwrap_or_default();
                self.emit(
                    Some(incident),
                    Action::BackendError {
                        fingerprint,
                        error: e.to_string(),
                    },
                );
            }
            if let (Some(plan), Some(reply)) = (&attempt.plan, &attempt.reply) {
                self.emit(
                    Some(incident),
                    Action::Parse {
                        ok: plan.parse_ok,
                        raw: plan.raw.clone(),
                        assignments: plan.assignments.iter().map(|(k, a)| (*k, a.number())).collect(),
                        latency: reply.latency,
                    },
                );
                if plan.parse_ok {
                    let errors = match &attempt.outcome {
                        AttemptOutcome::Invalid(e) => e.iter().copied().collect(),
                        _ => Vec::new(),
                    };
                    self.emit(
                        Some(incident),
                        Action::Validate {
                            success: errors.is_empty(),
                            errors,
                        },
                    );
                }
            }
            reason = attempt.fallback_reason();
            match (&attempt.outcome, attempt.plan) {
                (AttemptOutcome::Valid, Some(plan)) => {
                    self.execute_plan(incident, &plan);
                    return None;
                }
                (AttemptOutcome::NoSafeNodes, _) => break,
                _ => {}
            }
        }
        let reason = reason.unwrap_or_else(|| "no plan".into());
        self.emit(
            Some(incident),
            Action::Fallback {
                reason: format!("{reason}; robots hold position"),
                robot: None,
            },
        );
        Some(reason)
    }

    fn execute_plan(&mut self, incident: u64, plan: &RepositionPlan) {
        for idx in 0..self.robots.len() {
            let Some(node) = plan.assignments.get(&(idx as u32 + 1)).map(|a| a.number()) else {
                continue;
            };
            if node == 0 || node == self.robots[idx].at_node && self.robots[idx].path.is_empty() {
                continue;
            }
            if self.frozen {
                self.deferred.insert(idx, (incident, node));
                let robot = self.robots[idx].id.clone();
                self.emit(Some(incident), Action::Defer { robot, node });
            } else {
                self.start_move(incident, idx, node);
            }
        }
    }

    fn ensure_worker(&mut self, id: &str, position: Point2D) {
        let debounce = self.config.debounce;
        self.workers
            .entry(id.to_string())
            .or_insert_with(|| WorkerSlot::new(id, position, debounce))
            .track
            .position = position;
    }

    fn associate(&mut self, hint: Option<&str>, position: Point2D) -> String {
        let id = match hint {
            Some(h) => h.to_string(),
            None => {
                let nearest = self
                    .workers
                    .values()
                    .map(|w| (w.track.position.distance(&position), &w.track.id))
                    .filter(|(d, _)| *d <= self.config.association_radius)
                    .min_by(|a, b| a.0.total_cmp(&b.0));
                match nearest {
                    Some((_, id)) => id.clone(),
                    None => loop {
                        let candidate = format!("W{}", self.next_worker);
                        self.next_worker += 1;
                        if !self.workers.contains_key(&candidate) {
                            break candidate;
                        }
                    },
                }
            }
        };
        self.ensure_worker(&id, position);
        id
    }

    fn set_ppe(&mut self, worker: &str, status: PpeStatus) {
        let slot = self.workers.get_mut(worker).expect("tracked worker");
        let prev = slot.track.ppe();
        if prev == status {
            return;
        }
        let old_color = slot.track.color();
        slot.track.set_ppe(status);
        let incident = match status {
            PpeStatus::NotWearing => Some(self.on_ppe_violation(worker)),
            PpeStatus::Wearing if prev == PpeStatus::NotWearing => self.on_ppe_compliance(worker),
            _ => None,
        };
        self.emit_color_change(worker, old_color, incident);
    }

    fn set_posture(&mut self, worker: &str, posture: Posture) {
        let slot = self.workers.get_mut(worker).expect("tracked worker");
        let prev = slot.track.posture();
        if prev == posture {
            return;
        }
        let old_color = slot.track.color();
        slot.track.set_posture(posture);
        if posture == Posture::Prone {
            self.on_accident(worker, old_color);
            return;
        }
        let mut incident = None;
        if posture == Posture::Upright && prev == Posture::Prone {
            incident = self.open_for(HazardKind::Accident, worker);
            if let Some(id) = incident {
                self.resolve(id, "person is upright again");
            }
        }
        self.emit_color_change(worker, old_color, incident);
    }

    fn emit_color_change(&mut self, worker: &str, old: MeepleColor, incident: Option<u64>) {
        let Some(color) = self.workers.get(worker).map(|w| w.track.color()) else {
            return;
        };
        if color != old {
            self.emit(
                incident,
                Action::Meeple {
                    worker: worker.to_string(),
                    color,
                },
            );
        }
    }

    fn on_ppe_violation(&mut self, worker: &str) -> u64 {
        if let Some(id) = self.open_for(HazardKind::PpeViolation, worker) {
            return id;
        }
        let position = self.workers[worker].track.position;
        let id = self.open_incident(
            HazardEvent::worker(HazardKind::PpeViolation, worker, position, self.now),
            IncidentState::CountdownRunning,
        );
        let inc = self.incidents.get_mut(&id).expect("new incident");
        inc.deadline = Some(self.now + self.config.countdown);
        inc.next_warning = Some(self.now + self.config.warning_interval);
        if !self.frozen {
            self.freeze_all(id);
        }
        self.warn(id);
        id
    }

    fn on_ppe_compliance(&mut self, worker: &str) -> Option<u64> {
        let id = self.open_for(HazardKind::PpeViolation, worker)?;
        self.resolve(id, "lab coat detected again");
        let still_open = self
            .incidents
            .values()
            .any(|i| i.state.is_open() && i.hazard.kind == HazardKind::PpeViolation);
        if self.frozen && !still_open {
            self.resume_all(id);
        }
        Some(id)
    }

    /// Opens the accident incident, emits the red meeple, repositions and
    /// notifies.
    fn on_accident(&mut self, worker: &str, old_color: MeepleColor) {
        if let Some(id) = self.open_for(HazardKind::Accident, worker) {
            self.emit_color_change(worker, old_color, Some(id));
            return;
        }
        let position = self.workers[worker].track.position;
        let id = self.open_incident(
            HazardEvent::worker(HazardKind::Accident, worker, position, self.now),
            IncidentState::Active,
        );
        self.emit_color_change(worker, old_color, Some(id));
        let fallback = self.reposition(id);
        self.notify(id, false, fallback);
    }

    fn on_frame(&mut self, t: f64, frame: DetectionFrame) -> Result<(), CoordinatorError> {
        let station = self
            .map
            .station(&frame.station)
            .ok_or_else(|| CoordinatorError::UnknownStation(frame.station.clone()))?;
        let position = self.map.clamp(project_detection(station, frame.pixel_x, frame.range)?);
        self.advance(t);
        let worker = self.associate(frame.person_hint.as_deref(), position);
        let strategies: Vec<Strategy> = [self.config.ppe_strategy, self.config.posture_strategy]
            .into_iter()
            .flatten()
            .collect();
        for strategy in strategies {
            let (verdict, backend_error) = self.classify_frame(&frame, strategy);
            if self.record_frames && (verdict.is_some() || backend_error.is_some()) {
                self.frames.push(FrameRecord {
                    t,
                    station: frame.station.clone(),
                    worker: worker.clone(),
                    strategy,
                    dimension: strategy.dimension(),
                    verdict,
                    backend_error,
                });
            }
            let Some(v) = verdict.filter(|v| !v.hallucination) else {
                continue;
            };
            let slot = self.workers.get_mut(&worker).expect("associated worker");
            match strategy.dimension() {
                Dimension::Ppe => {
                    if let Some(s) = slot.ppe.push(v.ppe_status()) {
                        self.set_ppe(&worker, s);
                    }
                }
                Dimension::Posture => {
                    if let Some(s) = slot.posture.push(v.posture()) {
                        self.set_posture(&worker, s);
                    }
                }
            }
        }
        Ok(())
    }

    /// Uses the frame's recorded replies when they cover the strategy,
    /// otherwise asks the backend.
    fn classify_frame(&mut self, frame: &DetectionFrame, strategy: Strategy) -> (Option<Verdict>, Option<String>) {
        let combine = self.config.q4_combine;
        if !frame.responses.is_empty() {
            if !strategy.is_answered_by(&frame.responses) {
                return (None, None);
            }
            return (classify(&frame.responses, strategy, combine).ok(), None);
        }
        let mut responses = Responses::new();
        let mut latency = 0.0;
        for request in build_classification_prompt(strategy, frame) {
            match self.backend.complete(&request) {
                Ok(reply) => {
                    latency += reply.latency;
                    responses.insert(request.fingerprint, reply.text);
                }
                Err(e) => {
                    let error = e.to_string();
                    self.emit(
                        None,
                        Action::BackendError {
                            fingerprint: request.fingerprint,
                            error: error.clone(),
                        },
                    );
                    return (None, Some(error));
                }
            }
        }
        (classify(&responses, strategy, combine).ok().map(|v| v.with_latency(latency)), None)
    }

    fn zone_index(&self, zone: &str) -> Result<usize, CoordinatorError> {
        self.zones
            .iter()
            .position(|z| z.id == zone)
            .ok_or_else(|| CoordinatorError::UnknownZone(zone.to_string()))
    }

    fn on_thermal(&mut self, t: f64, zone: &str, reading: f64) -> Result<(), CoordinatorError> {
        let idx = self.zone_index(zone)?;
        if !reading.is_finite() {
            return Err(CoordinatorError::InvalidReading(reading));
        }
        self.advance(t);
        self.thermal_reading(idx, reading);
        Ok(())
    }

    fn thermal_reading(&mut self, idx: usize, reading: f64) {
        let outcome = self.zones[idx].record(reading);
        let zone = self.zones[idx].clone();
        let open = self.open_for(HazardKind::Fire, &zone.id);
        match (outcome.alarmed, open) {
            (true, Some(id)) => {
                self.incidents.get_mut(&id).expect("open incident").calm_since = None;
            }
            (true, None) => {
                let id = self.open_incident(HazardEvent::fire(&zone.id, zone.position, self.now), IncidentState::Active);
                self.emit(
                    Some(id),
                    Action::Alarm {
                        zone: zone.id.clone(),
                        reading,
                        threshold: zone.threshold,
                        saturated: outcome.saturated,
                    },
                );
                let fallback = self.reposition(id);
                self.notify(id, false, fallback);
            }
            (false, Some(id)) => {
                let inc = self.incidents.get_mut(&id).expect("open incident");
                if inc.calm_since.is_none() {
                    inc.calm_since = Some(self.now);
                }
                if self.config.fire_hold_down <= 0.0 {
                    self.resolve(id, "temperature stayed below the threshold for the hold-down period");
                }
            }
            (false, None) => {}
        }
    }

    fn on_inject(&mut self, t: f64, inj: Injection) -> Result<(), CoordinatorError> {
        if let Some(v) = inj.value {
            if !v.is_finite() {
                return Err(CoordinatorError::InvalidInjection(format!("value must be finite, got {v}")));
            }
        }
        if inj.x.is_some() != inj.y.is_some() {
            return Err(CoordinatorError::InvalidInjection("x and y must be given together".into()));
        }
        let flag = match inj.kind {
            InjectKind::Fire => None,
            InjectKind::Ppe | InjectKind::Accident => match inj.value.unwrap_or(1.0) {
                v if v == 1.0 => Some(true),
                v if v == 0.0 => Some(false),
                v => {
                    return Err(CoordinatorError::InvalidInjection(format!(
                        "value for {:?} must be 0 or 1, got {v}",
                        inj.kind
                    )))
                }
            },
        };
        match inj.kind {
            InjectKind::Fire => {
                let idx = self.zone_index(&inj.target)?;
                let reading = inj.value.unwrap_or(self.zones[idx].threshold + 10.0);
                self.advance(t);
                self.emit_inject(&inj, Some(reading));
                self.thermal_reading(idx, reading);
            }
            InjectKind::Ppe | InjectKind::Accident => {
                let raised = flag.expect("flag for worker injections");
                let position = match (inj.x, inj.y, self.workers.get(&inj.target)) {
                    (Some(x), Some(y), _) => self.map.clamp(Point2D::new(x, y)),
                    (_, _, Some(w)) => w.track.position,
                    _ => return Err(CoordinatorError::UnknownWorker(inj.target.clone())),
                };
                self.advance(t);
                self.emit_inject(&inj, inj.value);
                self.ensure_worker(&inj.target, position);
                let slot = self.workers.get_mut(&inj.target).expect("worker");
                if inj.kind == InjectKind::Ppe {
                    let s = if raised { PpeStatus::NotWearing } else { PpeStatus::Wearing };
                    slot.ppe.force(s);
                    self.set_ppe(&inj.target, s);
                } else {
                    let p = if raised { Posture::Prone } else { Posture::Upright };
                    slot.posture.force(p);
                    self.set_posture(&inj.target, p);
                }
            }
        }
        Ok(())
    }

    fn emit_inject(&mut self, inj: &Injection, value: Option<f64>) {
        self.emit(
            None,
            Action::Inject {
                kind: inj.kind,
                target: inj.target.clone(),
                value,
            },
        );
    }

    fn on_ack(
        &mut self,
        t: f64,
        incident: u64,
        operator: Option<String>,
        note: Option<String>,
    ) -> Result<(), CoordinatorError> {
        if !self.incidents.contains_key(&incident) {
            return Err(CoordinatorError::UnknownIncident(incident));
        }
        self.advance(t);
        self.incidents.get_mut(&incident).expect("incident").acknowledged = true;
        self.emit(Some(incident), Action::Ack { operator, note });
        Ok(())
    }

    fn on_receipt(&mut self, t: f64, receipt: DeliveryReceipt) -> Result<(), CoordinatorError> {
        let id = receipt.incident_id();
        if !self.incidents.contains_key(&id) {
            return Err(CoordinatorError::UnknownIncident(id));
        }
        self.advance(t);
        match receipt {
            DeliveryReceipt::Delivered { attempts, .. } => self.emit(Some(id), Action::Delivered { attempts }),
            DeliveryReceipt::Failed { attempts, error, .. } => {
                self.emit(Some(id), Action::NotifyFailed { attempts, error })
            }
            DeliveryReceipt::Duplicate { .. } => {}
        }
        Ok(())
    }

    fn on_configure(&mut self, t: f64, patch: ConfigPatch) -> Result<(), CoordinatorError> {
        let config = patch.apply(&self.config).map_err(CoordinatorError::Config)?;
        self.advance(t);
        if let Some(th) = patch.thermal_threshold {
            for z in &mut self.zones {
                z.threshold = th;
            }
        }
        if config.debounce != self.config.debounce {
            for slot in self.workers.values_mut() {
                slot.ppe = Debouncer::new(slot.ppe.stable(), config.debounce);
                slot.posture = Debouncer::new(slot.posture.stable(), config.debounce);
            }
        }
        self.config = config;
        self.emit(None, Action::Configure { patch });
        Ok(())
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vlm::{MockBackend, MockScript, ScriptEntry};

    fn coordinator(script: Vec<ScriptEntry>) -> Coordinator {
        Coordinator::new(
            LabMap::demo(),
            PolicyConfig::default(),
            Box::new(MockBackend::new(MockScript::new(script))),
        )
        .unwrap()
    }

    fn inject(c: &mut Coordinator, t: f64, kind: InjectKind, target: &str, value: Option<f64>, at: Option<(f64, f64)>) -> Vec<ActionRecord> {
        c.handle(Event::Inject {
            t,
            injection: Injection {
                kind,
                target: target.into(),
                value,
                x: at.map(|p| p.0),
                y: at.map(|p| p.1),
            },
        })
        .unwrap()
    }

    fn run_ticks(c: &mut Coordinator, from: u32, to: u32) -> Vec<ActionRecord> {
        (from..=to).flat_map(|t| c.handle(Event::Tick { t: t as f64 }).unwrap()).collect()
    }

    fn names(log: &[ActionRecord]) -> Vec<&'static str> {
        log.iter().map(|r| r.action.name()).collect()
    }

    fn count(log: &[ActionRecord], name: &str) -> usize {
        log.iter().filter(|r| r.action.name() == name).count()
    }

    #[test]
    fn persistent_violation_escalates_once_at_countdown() {
        let mut c = coordinator(vec![]);
        let mut log = inject(&mut c, 0.0, InjectKind::Ppe, "W1", None, Some((3.0, 3.0)));
        assert_eq!(names(&log)[..4], ["Inject", "Freeze", "Warn", "Meeple"]);
        assert_eq!(c.worker("W1").unwrap().color(), MeepleColor::Yellow);
        log.extend(run_ticks(&mut c, 1, 900));
        let notes: Vec<_> = log.iter().filter(|r| matches!(r.action, Action::Notify { .. })).collect();
        assert_eq!(notes.len(), 1);
        assert_eq!(notes[0].t, 600.0);
        assert!(matches!(&notes[0].action, Action::Notify { escalation: true, payload } if payload.kind == HazardKind::PpeViolation));
        assert_eq!(c.incident(1).unwrap().state, IncidentState::Escalated);
        // warnings every 30 s, cycling the phrase pool
        let warns: Vec<_> = log
            .iter()
            .filter_map(|r| match &r.action {
                Action::Warn { phrase, station, .. } => Some((r.t, phrase.clone(), station.clone())),
                _ => None,
            })
            .collect();
        assert_eq!(warns.len(), 31);
        assert_eq!(warns[1].0, 30.0);
        assert_eq!(warns[3].1, WARNING_PHRASES[0]);
        assert_eq!(warns[2].1, WARNING_PHRASES[2]);
        assert_eq!(warns[0].2, "CE-RGBD-1");
    }

    #[test]
    fn compliance_before_deadline_cancels_everything() {
        let mut c = coordinator(vec![]);
        let mut log = inject(&mut c, 0.0, InjectKind::Ppe, "W1", None, Some((3.0, 3.0)));
        log.extend(run_ticks(&mut c, 1, 299));
        log.extend(inject(&mut c, 300.0, InjectKind::Ppe, "W1", Some(0.0), None));
        let after = log.len();
        log.extend(run_ticks(&mut c, 301, 1200));
        assert_eq!(count(&log, "Notify"), 0);
        assert_eq!(log[after..].iter().filter(|r| r.action.name() == "Warn").count(), 0);
        assert_eq!(count(&log, "Resume"), 1);
        assert_eq!(c.worker("W1").unwrap().color(), MeepleColor::Grey);
        assert!(!c.frozen());
        assert_eq!(c.incident(1).unwrap().state, IncidentState::Resolved);
    }

    #[test]
    fn new_violation_restarts_the_countdown() {
        let mut c = coordinator(vec![]);
        inject(&mut c, 0.0, InjectKind::Ppe, "W1", None, Some((3.0, 3.0)));
        run_ticks(&mut c, 1, 400);
        inject(&mut c, 400.0, InjectKind::Ppe, "W1", Some(0.0), None);
        inject(&mut c, 450.0, InjectKind::Ppe, "W1", Some(1.0), None);
        let log = run_ticks(&mut c, 451, 1100);
        let notes: Vec<_> = log.iter().filter(|r| r.action.name() == "Notify").collect();
        assert_eq!(notes.len(), 1);
        assert_eq!(notes[0].t, 1050.0);
        assert_eq!(notes[0].incident_id, Some(2));
    }

    #[test]
    fn two_workers_share_one_freeze() {
        let mut c = coordinator(vec![]);
        let mut log = inject(&mut c, 0.0, InjectKind::Ppe, "W1", None, Some((3.0, 3.0)));
        log.extend(inject(&mut c, 5.0, InjectKind::Ppe, "W2", None, Some((9.0, 5.0))));
        assert_eq!(count(&log, "Freeze"), 1);
        assert_eq!(c.incidents().filter(|i| i.state.is_open()).count(), 2);
        log.extend(inject(&mut c, 10.0, InjectKind::Ppe, "W1", Some(0.0), None));
        assert!(c.frozen());
        log.extend(inject(&mut c, 20.0, InjectKind::Ppe, "W2", Some(0.0), None));
        assert!(!c.frozen());
        assert_eq!(count(&log, "Resume"), 1);
    }

    fn fire_script(reply: &str) -> Vec<ScriptEntry> {
        vec![ScriptEntry::text("reposition/*/*", reply)]
    }

    #[test]
    fn fire_flow_sequence() {
        let mut c = coordinator(fire_script("ROBOT1: [2], ROBOT2: [7], ROBOT3: [11]"));
        let log = c
            .handle(Event::Thermal {
                t: 1.0,
                zone: "T1".into(),
                reading: 55.1,
            })
            .unwrap();
        assert_eq!(
            names(&log),
            ["Alarm", "Prompt", "Parse", "Validate", "MoveTo", "MoveTo", "MoveTo", "Notify"]
        );
        assert!(log.iter().all(|r| r.incident_id == Some(1)));
        let Action::Notify { payload, .. } = &log[7].action else { unreachable!() };
        assert_eq!(payload.snapshot_url, format!("{DEFAULT_SNAPSHOT_BASE}/2.png"));
        assert!(c.snapshot_png(2).is_some());
        assert!(!payload.text.contains(MANUAL_INTERVENTION));
        // robots drive their routes and stop at the targets
        let moves = run_ticks(&mut c, 2, 40);
        assert!(moves.iter().all(|r| r.action.name() == "Advance"));
        let nodes: Vec<_> = c.robots().iter().map(|r| r.at_node).collect();
        assert_eq!(nodes, [2, 7, 11]);
        assert!(c.robots().iter().all(|r| !r.is_moving()));
    }

    #[test]
    fn thermal_boundaries() {
        let mut c = coordinator(fire_script("ROBOT1: [0], ROBOT2: [0], ROBOT3: [0]"));
        for reading in [54.9, 55.0] {
            let log = c.handle(Event::Thermal { t: 0.0, zone: "T1".into(), reading }).unwrap();
            assert!(log.is_empty());
        }
        let log = c.handle(Event::Thermal { t: 1.0, zone: "T1".into(), reading: 401.0 }).unwrap();
        assert!(matches!(log[0].action, Action::Alarm { saturated: true, .. }));
        assert!(c.zones()[0].saturated);
        assert_eq!(
            c.handle(Event::Thermal { t: 1.0, zone: "T9".into(), reading: 60.0 }),
            Err(CoordinatorError::UnknownZone("T9".into()))
        );
    }

    #[test]
    fn fire_resolves_after_hold_down() {
        let mut c = coordinator(fire_script("ROBOT1: [0], ROBOT2: [0], ROBOT3: [0]"));
        c.handle(Event::Thermal { t: 0.0, zone: "T1".into(), reading: 80.0 }).unwrap();
        c.handle(Event::Thermal { t: 10.0, zone: "T1".into(), reading: 40.0 }).unwrap();
        c.handle(Event::Thermal { t: 30.0, zone: "T1".into(), reading: 70.0 }).unwrap();
        c.handle(Event::Thermal { t: 40.0, zone: "T1".into(), reading: 40.0 }).unwrap();
        assert!(c.incident(1).unwrap().state.is_open());
        let log = run_ticks(&mut c, 41, 100);
        assert_eq!(names(&log), ["Resolve"]);
        assert_eq!(log[0].t, 100.0);
    }

    #[test]
    fn invalid_plan_falls_back_and_annotates() {
        // node 3 sits 1 m from the hot spot: e3
        let mut c = coordinator(fire_script("ROBOT1: [3], ROBOT2: [7], ROBOT3: [11]"));
        let log = c.handle(Event::Thermal { t: 0.0, zone: "T1".into(), reading: 70.0 }).unwrap();
        assert_eq!(names(&log), ["Alarm", "Prompt", "Parse", "Validate", "Fallback", "Notify"]);
        assert!(matches!(&log[3].action, Action::Validate { success: false, errors } if errors == &[PlanError::E3]));
        let Action::Notify { payload, .. } = &log[5].action else { unreachable!() };
        assert!(payload.text.contains("Manual intervention required"), "{}", payload.text);
        assert_eq!(count(&log, "MoveTo"), 0);
    }

    #[test]
    fn unparseable_reply_falls_back() {
        let mut c = coordinator(fire_script("Move the robots away from the fire."));
        let log = c.handle(Event::Thermal { t: 0.0, zone: "T1".into(), reading: 70.0 }).unwrap();
        assert_eq!(names(&log), ["Alarm", "Prompt", "Parse", "Fallback", "Notify"]);
        assert!(matches!(log[2].action, Action::Parse { ok: false, .. }));
    }

    #[test]
    fn retries_requery_after_rejection() {
        let mut c = Coordinator::new(
            LabMap::demo(),
            PolicyConfig {
                reposition_retries: 1,
                ..PolicyConfig::default()
            },
            Box::new(MockBackend::new(MockScript::new(vec![ScriptEntry::sequence(
                "reposition/c3/fire",
                vec!["nonsense".into(), "ROBOT1: [2], ROBOT2: [7], ROBOT3: [11]".into()],
            )]))),
        )
        .unwrap();
        let log = c.handle(Event::Thermal { t: 0.0, zone: "T1".into(), reading: 70.0 }).unwrap();
        assert_eq!(count(&log, "Prompt"), 2);
        assert_eq!(count(&log, "MoveTo"), 3);
        assert_eq!(count(&log, "Fallback"), 0);
    }

    #[test]
    fn accident_flow_moves_robots_and_notifies() {
        let mut c = coordinator(vec![ScriptEntry::text("reposition/c3/accident", "ROBOT1: [2], ROBOT2: [7], ROBOT3: [11]")]);
        let log = inject(&mut c, 0.0, InjectKind::Accident, "W1", None, Some((10.0, 7.0)));
        assert_eq!(
            names(&log),
            ["Inject", "Meeple", "Prompt", "Parse", "Validate", "MoveTo", "MoveTo", "MoveTo", "Notify"]
        );
        let Action::MoveTo { path, .. } = &log[6].action else { unreachable!() };
        assert!(!path.contains(&9) && !path.contains(&10), "{path:?}");
        assert_eq!(c.worker("W1").unwrap().color(), MeepleColor::Red);
        let log = inject(&mut c, 5.0, InjectKind::Accident, "W1", Some(0.0), None);
        assert!(names(&log).contains(&"Resolve"));
    }

    #[test]
    fn frozen_fleet_defers_moves_until_resume() {
        let mut c = coordinator(fire_script("ROBOT1: [2], ROBOT2: [7], ROBOT3: [11]"));
        let mut log = inject(&mut c, 0.0, InjectKind::Ppe, "W1", None, Some((1.0, 7.5)));
        log.extend(c.handle(Event::Thermal { t: 1.0, zone: "T1".into(), reading: 70.0 }).unwrap());
        log.extend(run_ticks(&mut c, 2, 50));
        assert_eq!(count(&log, "Defer"), 3);
        assert!(log.iter().all(|r| !r.action.is_motion()));
        log = inject(&mut c, 51.0, InjectKind::Ppe, "W1", Some(0.0), None);
        assert_eq!(names(&log)[..3], ["Inject", "Resolve", "Resume"]);
        assert_eq!(count(&log, "MoveTo"), 3);
    }

    #[test]
    fn frames_are_debounced_and_associated() {
        let mut c = coordinator(vec![]);
        c.set_record_frames(true);
        let frame = |t: f64, ppe: &str| {
            let mut responses = Responses::new();
            responses.insert("Q4.1".into(), ppe.into());
            responses.insert("Q4.2".into(), ppe.into());
            responses.insert("Q4.3".into(), "A person in a blue shirt".into());
            Event::Frame(DetectionFrame {
                station: "CE-RGBD-1".into(),
                t,
                person_hint: None,
                pixel_x: 0.5,
                range: 3.0 + t * 0.01,
                responses,
            })
        };
        let mut log = Vec::new();
        for t in 0..2 {
            log.extend(c.handle(frame(t as f64, "NO")).unwrap());
        }
        assert_eq!(count(&log, "Freeze"), 0);
        log.extend(c.handle(frame(2.0, "NO")).unwrap());
        assert_eq!(count(&log, "Freeze"), 1);
        assert_eq!(c.workers().len(), 1);
        assert_eq!(c.workers()[0].id, "W1");
        let records = c.take_frame_records();
        assert_eq!(records.len(), 3);
        assert!(records.iter().all(|r| r.strategy == Strategy::Q4));
    }

    #[test]
    fn frames_query_the_backend_without_recorded_replies() {
        let mut c = coordinator(vec![
            ScriptEntry::text("Q4.1", "NO").with_latency(0.5),
            ScriptEntry::text("Q4.2", "NO").with_latency(0.5),
            ScriptEntry::text("Q4.3", "A person with a black shirt").with_latency(0.5),
            ScriptEntry::text("Q10.1", "YES"),
            ScriptEntry::text("Q10.2", "YES"),
            ScriptEntry::text("Q10.3", "standing"),
        ]);
        c.set_record_frames(true);
        let frame = DetectionFrame {
            station: "CE-RGBD-2".into(),
            t: 0.0,
            person_hint: Some("alice".into()),
            pixel_x: 0.2,
            range: 2.0,
            responses: Responses::new(),
        };
        c.handle(Event::Frame(frame)).unwrap();
        let records = c.take_frame_records();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].verdict.unwrap().latency, 1.5);
        assert_eq!(records[1].verdict.unwrap().posture(), Posture::Upright);
        assert!(c.worker("alice").is_some());
    }

    #[test]
    fn injection_errors() {
        let mut c = coordinator(vec![]);
        let err = c
            .handle(Event::Inject {
                t: 0.0,
                injection: Injection {
                    kind: InjectKind::Ppe,
                    target: "ghost".into(),
                    value: None,
                    x: None,
                    y: None,
                },
            })
            .unwrap_err();
        assert!(err.is_not_found());
        let err = c
            .handle(Event::Inject {
                t: 0.0,
                injection: Injection {
                    kind: InjectKind::Accident,
                    target: "W1".into(),
                    value: Some(3.0),
                    x: Some(1.0),
                    y: Some(1.0),
                },
            })
            .unwrap_err();
        assert!(matches!(err, CoordinatorError::InvalidInjection(_)));
        assert!(c.handle(Event::Ack { t: 0.0, incident_id: 4, operator: None, note: None }).unwrap_err().is_not_found());
    }

    #[test]
    fn config_patch_applies_and_validates() {
        let mut c = coordinator(fire_script("ROBOT1: [0], ROBOT2: [0], ROBOT3: [0]"));
        let patch: ConfigPatch = serde_json::from_str(r#"{"countdown": 5, "thermal_threshold": 80}"#).unwrap();
        c.handle(Event::Configure { t: 0.0, patch }).unwrap();
        assert_eq!(c.config().countdown, 5.0);
        assert_eq!(c.zones()[0].threshold, 80.0);
        assert!(c.handle(Event::Thermal { t: 0.0, zone: "T1".into(), reading: 70.0 }).unwrap().is_empty());
        let bad: ConfigPatch = serde_json::from_str(r#"{"warning_interval": 0}"#).unwrap();
        assert!(matches!(c.handle(Event::Configure { t: 0.0, patch: bad }), Err(CoordinatorError::Config(_))));
        assert!(serde_json::from_str::<ConfigPatch>(r#"{"bogus": 1}"#).is_err());
        inject(&mut c, 1.0, InjectKind::Ppe, "W1", None, Some((2.0, 2.0)));
        let log = run_ticks(&mut c, 2, 10);
        assert_eq!(log.iter().find(|r| r.action.name() == "Notify").unwrap().t, 6.0);
    }

    #[test]
    fn receipts_and_acks_are_logged() {
        let mut c = coordinator(fire_script("ROBOT1: [0], ROBOT2: [0], ROBOT3: [0]"));
        c.handle(Event::Thermal { t: 0.0, zone: "T1".into(), reading: 70.0 }).unwrap();
        let log = c
            .handle(Event::Receipt {
                t: 1.0,
                receipt: DeliveryReceipt::Failed {
                    incident_id: 1,
                    attempts: 4,
                    error: "HTTP 503".into(),
                },
            })
            .unwrap();
        assert_eq!(names(&log), ["NotifyFailed"]);
        let log = c.handle(Event::Ack { t: 2.0, incident_id: 1, operator: Some("op".into()), note: None }).unwrap();
        assert_eq!(names(&log), ["Ack"]);
        assert!(c.incident(1).unwrap().acknowledged);
    }

    #[test]
    fn action_record_wire_format() {
        let r = ActionRecord {
            t: 1.5,
            incident_id: Some(3),
            action: Action::MoveTo {
                robot: "KMR1".into(),
                node: 2,
                path: vec![1, 2],
            },
        };
        let line = r.to_json_line();
        assert_eq!(line, r#"{"t":1.5,"incident_id":3,"action":"MoveTo","detail":{"robot":"KMR1","node":2,"path":[1,2]}}"#);
        let back: ActionRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn state_reports_colors_and_incidents() {
        let mut c = coordinator(vec![]);
        inject(&mut c, 0.0, InjectKind::Ppe, "W1", None, Some((3.0, 3.0)));
        let v = serde_json::to_value(c.state()).unwrap();
        assert_eq!(v["workers"][0]["color"], "yellow");
        assert_eq!(v["incidents"][0]["state"], "countdown_running");
        assert_eq!(v["incidents"][0]["deadline"], 600.0);
        assert_eq!(v["frozen"], true);
    }

    #[test]
    fn no_incidents_no_commands() {
        let mut c = coordinator(vec![]);
        assert!(run_ticks(&mut c, 0, 100).is_empty());
    }
}
