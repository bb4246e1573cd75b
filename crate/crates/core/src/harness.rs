//! Scenario replay, frame grading and reposition trials.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordinator::{
    attempt_reposition, ActionRecord, AttemptOutcome, ConfigPatch, Coordinator, CoordinatorError, Event, InjectKind,
    Injection, PolicyConfig, RepositionContext,
};
use crate::model::{load_map, HazardEvent, HazardKind, LabMap, MapError, Point2D, Posture, PpeStatus, RobotState, WorkerTrack};
use crate::perception::{DetectionFrame, Dimension, Label, Responses, Strategy, Verdict};
use crate::render::Renderer;
use crate::safety::{PlanError, SafetyPolicy};
use crate::vlm::{Condition, MockScript, ParseMode, VlmBackend, VlmError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptRef {
    Path(String),
    Inline(serde_json::Value),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameLabel {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ppe: Option<PpeStatus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub posture: Option<Posture>,
}

impl FrameLabel {
    /// Ground truth in verdict terms for one dimension.
    pub fn truth(&self, dimension: Dimension) -> Option<Label> {
        match dimension {
            Dimension::Ppe => match self.ppe? {
                PpeStatus::Wearing => Some(Label::Positive),
                PpeStatus::NotWearing => Some(Label::Negative),
                PpeStatus::Unknown => None,
            },
            Dimension::Posture => match self.posture? {
                Posture::Prone => Some(Label::Positive),
                Posture::Upright => Some(Label::Negative),
                Posture::Unknown => None,
            },
        }
    }
}

/// One line of a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioRecord {
    Header {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        map: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        script: Option<ScriptRef>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        policy: Option<ConfigPatch>,
    },
    Frame {
        station: String,
        t: f64,
        #[serde(default, skip_serializing_if = "Option::is_none", alias = "person")]
        person_hint: Option<String>,
        pixel_x: f64,
        range: f64,
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        responses: Responses,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<FrameLabel>,
    },
    Thermal {
        t: f64,
        zone: String,
        reading: f64,
    },
    Inject {
        t: f64,
        kind: InjectKind,
        target: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        value: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        x: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        y: Option<f64>,
    },
    Ack {
        t: f64,
        incident_id: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        operator: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        note: Option<String>,
    },
    End {
        t: f64,
    },
}

impl ScenarioRecord {
    fn t(&self) -> Option<f64> {
        match self {
            ScenarioRecord::Header { .. } => None,
            ScenarioRecord::Frame { t, .. }
            | ScenarioRecord::Thermal { t, .. }
            | ScenarioRecord::Inject { t, .. }
            | ScenarioRecord::Ack { t, .. }
            | ScenarioRecord::End { t } => Some(*t),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimedEvent {
    /// 1-based line in the source file.
    pub line: usize,
    pub event: Event,
    pub label: Option<FrameLabel>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scenario {
    pub map: Option<String>,
    pub script: Option<ScriptRef>,
    pub policy: ConfigPatch,
    pub timeline: Vec<TimedEvent>,
    pub end: Option<f64>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("map: {0}")]
    Map(#[from] MapError),
    #[error("mock script: {0}")]
    Script(#[from] VlmError),
    #[error("line {line}: {source}")]
    Event {
        line: usize,
        source: CoordinatorError,
    },
    #[error("invalid policy: {0}")]
    Policy(String),
}

fn parse_err(line: usize, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Parse {
        line,
        message: message.into(),
    }
}

impl Scenario {
    /// Parses JSON-lines; blank lines and lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let mut scenario = Scenario::default();
        let mut last_t = f64::NEG_INFINITY;
        let mut seen_event = false;
        let mut seen_header = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if scenario.end.is_some() {
                return Err(parse_err(line, "record after end"));
            }
            let record: ScenarioRecord = serde_json::from_str(trimmed).map_err(|e| parse_err(line, e.to_string()))?;
            if let Some(t) = record.t() {
                if !t.is_finite() || t < 0.0 {
                    return Err(parse_err(line, format!("timestamp must be finite and non-negative, got {t}")));
                }
                if t < last_t {
                    return Err(parse_err(line, format!("timestamp {t} is earlier than the previous {last_t}")));
                }
                last_t = t;
            }
            let (event, label) = match record {
                ScenarioRecord::Header { map, script, policy } => {
                    if seen_header || seen_event {
                        return Err(parse_err(line, "header must be the first record and appear once"));
                    }
                    seen_header = true;
                    scenario.map = map;
                    scenario.script = script;
                    scenario.policy = policy.unwrap_or_default();
                    continue;
                }
                ScenarioRecord::End { t } => {
                    scenario.end = Some(t);
                    continue;
                }
                ScenarioRecord::Frame {
                    station,
                    t,
                    person_hint,
                    pixel_x,
                    range,
                    responses,
                    label,
                } => (
                    Event::Frame(DetectionFrame {
                        station,
                        t,
                        person_hint,
                        pixel_x,
                        range,
                        responses,
                    }),
                    label,
                ),
                ScenarioRecord::Thermal { t, zone, reading } => (Event::Thermal { t, zone, reading }, None),
                ScenarioRecord::Inject {
                    t,
                    kind,
                    target,
                    value,
                    x,
                    y,
                } => (
                    Event::Inject {
                        t,
                        injection: Injection {
                            kind,
                            target,
                            value,
                            x,
                            y,
                        },
                    },
                    None,
                ),
                ScenarioRecord::Ack {
                    t,
                    incident_id,
                    operator,
                    note,
                } => (
                    Event::Ack {
                        t,
                        incident_id,
                        operator,
                        note,
                    },
                    None,
                ),
            };
            seen_event = true;
            scenario.timeline.push(TimedEvent { line, event, label });
        }
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = read(path)?;
        Self::parse(&text)
    }

    /// Last timestamp of the scenario.
    pub fn duration(&self) -> f64 {
        let last = self.timeline.last().map(|e| e.event.t()).unwrap_or(0.0);
        self.end.unwrap_or(last).max(last)
    }

    /// Map named by the header, relative to `base`; the demo lab when absent.
    pub fn resolve_map(&self, base: &Path) -> Result<LabMap, ScenarioError> {
        match self.map.as_deref() {
            None | Some("demo") => Ok(LabMap::demo()),
            Some(p) => Ok(load_map(&read(&base.join(p))?)?),
        }
    }

    pub fn resolve_script(&self, base: &Path) -> Result<Option<MockScript>, ScenarioError> {
        match &self.script {
            None => Ok(None),
            Some(ScriptRef::Path(p)) => Ok(Some(MockScript::from_json(&read(&base.join(p))?)?)),
            Some(ScriptRef::Inline(v)) => Ok(Some(MockScript::from_json(&v.to_string())?)),
        }
    }
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HallucinationMode {
    /// Hallucinated frames count as incorrect.
    #[default]
    CountIncorrect,
    /// Hallucinated frames are left out of the accuracy denominator.
    Excluded,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradeError {
    #[error("{verdicts} verdicts but {labels} labels")]
    LengthMismatch { verdicts: usize, labels: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grade {
    pub total: usize,
    pub correct: usize,
    pub hallucinations: usize,
    /// Percent.
    pub accuracy: f64,
    /// Percent of all frames.
    pub hallucination_rate: f64,
    /// Seconds per frame.
    pub mean_latency: f64,
}

pub fn grade_frames(verdicts: &[Verdict], labels: &[Label], mode: HallucinationMode) -> Result<Grade, GradeError> {
    if verdicts.len() != labels.len() {
        return Err(GradeError::LengthMismatch {
            verdicts: verdicts.len(),
            labels: labels.len(),
        });
    }
    let total = verdicts.len();
    let hallucinations = verdicts.iter().filter(|v| v.hallucination).count();
    let correct = verdicts
        .iter()
        .zip(labels)
        .filter(|(v, l)| !v.hallucination && v.label == **l)
        .count();
    let denominator = match mode {
        HallucinationMode::CountIncorrect => total,
        HallucinationMode::Excluded => total - hallucinations,
    };
    let pct = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 * 100.0 / d as f64 };
    Ok(Grade {
        total,
        correct,
        hallucinations,
        accuracy: pct(correct, denominator),
        hallucination_rate: pct(hallucinations, total),
        mean_latency: if total == 0 {
            0.0
        } else {
            verdicts.iter().map(|v| v.latency).sum::<f64>() / total as f64
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameMetrics {
    pub mode: HallucinationMode,
    #[serde(flatten)]
    pub overall: Grade,
    pub by_strategy: BTreeMap<Strategy, Grade>,
    /// Classifications lost to backend failures; not graded.
    pub backend_errors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    pub trial: usize,
    pub location: Point2D,
    pub listed_nodes: Option<Vec<u32>>,
    pub raw: Option<String>,
    pub parse_ok: bool,
    pub errors: Vec<PlanError>,
    pub success: bool,
    pub outcome: String,
    pub latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialSummary {
    pub condition: Condition,
    pub hazard: HazardKind,
    pub n: usize,
    pub seed: u64,
    pub successes: usize,
    pub success_rate: f64,
    pub e1: usize,
    pub e2: usize,
    pub e3: usize,
    pub hallucinations: usize,
    pub hallucination_rate: f64,
    pub backend_errors: usize,
    pub no_safe_nodes: usize,
    pub mean_latency: f64,
    pub results: Vec<TrialResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub actions: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frames: Option<FrameMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<TrialSummary>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    /// Plain-text table for terminals.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        if let Some(n) = self.actions {
            let _ = writeln!(s, "actions logged: {n}");
        }
        if let Some(f) = &self.frames {
            let _ = writeln!(s, "{:<10} {:>7} {:>10} {:>8} {:>10}", "strategy", "frames", "accuracy", "hall.", "time (s)");
            for (strategy, g) in &f.by_strategy {
                let _ = writeln!(
                    s,
                    "{:<10} {:>7} {:>9.1}% {:>7.1}% {:>10.3}",
                    strategy.to_string(),
                    g.total,
                    g.accuracy,
                    g.hallucination_rate,
                    g.mean_latency
                );
            }
            let g = &f.overall;
            let _ = writeln!(
                s,
                "{:<10} {:>7} {:>9.1}% {:>7.1}% {:>10.3}",
                "all", g.total, g.accuracy, g.hallucination_rate, g.mean_latency
            );
            if f.backend_errors > 0 {
                let _ = writeln!(s, "backend errors (not graded): {}", f.backend_errors);
            }
        }
        if let Some(t) = &self.trials {
            let _ = writeln!(
                s,
                "{:<6} {:<10} {:>4} {:>4} {:>4} {:>6} {:>12}",
                "cond", "hazard", "e1", "e2", "e3", "hall.", "success"
            );
            let _ = writeln!(
                s,
                "{:<6} {:<10} {:>4} {:>4} {:>4} {:>6} {:>12}",
                t.condition.to_string(),
                t.hazard.to_string(),
                t.e1,
                t.e2,
                t.e3,
                t.hallucinations,
                format!("{}/{}", t.successes, t.n)
            );
            if t.backend_errors + t.no_safe_nodes > 0 {
                let _ = writeln!(s, "backend errors: {}, no safe nodes: {}", t.backend_errors, t.no_safe_nodes);
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayOptions {
    /// Simulation speed-up over the scaled clock; 0 runs as fast as possible.
    pub speed: f64,
    pub seed: u64,
    pub mode: HallucinationMode,
    /// Seconds between generated ticks.
    pub tick: f64,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self {
            speed: 0.0,
            seed: 0,
            mode: HallucinationMode::CountIncorrect,
            tick: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutput {
    pub actions: Vec<ActionRecord>,
    pub report: MetricsReport,
}

impl ReplayOutput {
    pub fn action_log(&self) -> String {
        self.actions.iter().map(|a| a.to_json_line() + "\n").collect()
    }
}

/// Feeds the scenario through a fresh coordinator, inserting ticks between
/// events, and grades labelled frames.
pub fn replay(
    scenario: &Scenario,
    map: LabMap,
    policy: PolicyConfig,
    backend: Box<dyn VlmBackend>,
    options: ReplayOptions,
) -> Result<ReplayOutput, ScenarioError> {
    let policy = scenario.policy.apply(&policy).map_err(ScenarioError::Policy)?;
    let real_per_sim = policy.clock_scale;
    let mut coordinator =
        Coordinator::new(map, policy, backend).map_err(|e| ScenarioError::Policy(e.to_string()))?;
    coordinator.set_record_frames(true);
    let mut actions = Vec::new();
    let mut verdicts = Vec::new();
    let mut labels = Vec::new();
    let mut strategies = Vec::new();
    let mut backend_errors = 0;
    let mut clock = 0.0;
    let pace = |from: f64, to: f64| {
        if options.speed > 0.0 && to > from {
            thread::sleep(Duration::from_secs_f64((to - from) * real_per_sim / options.speed));
        }
    };
    let tick_until = |coordinator: &mut Coordinator, clock: &mut f64, until: f64, actions: &mut Vec<ActionRecord>| {
        while *clock + options.tick <= until {
            let next = *clock + options.tick;
            pace(*clock, next);
            *clock = next;
            actions.extend(coordinator.handle(Event::Tick { t: next }).expect("ticks never fail"));
        }
    };
    for item in &scenario.timeline {
        let t = item.event.t();
        tick_until(&mut coordinator, &mut clock, t, &mut actions);
        pace(clock, t);
        clock = clock.max(t);
        let produced = coordinator
            .handle(item.event.clone())
            .map_err(|source| ScenarioError::Event { line: item.line, source })?;
        actions.extend(produced);
        for record in coordinator.take_frame_records() {
            if record.backend_error.is_some() {
                backend_errors += 1;
                continue;
            }
            let (Some(verdict), Some(truth)) = (record.verdict, item.label.and_then(|l| l.truth(record.dimension))) else {
                continue;
            };
            verdicts.push(verdict);
            labels.push(truth);
            strategies.push(record.strategy);
        }
    }
    tick_until(&mut coordinator, &mut clock, scenario.duration(), &mut actions);
    let frames = if verdicts.is_empty() && backend_errors == 0 {
        None
    } else {
        let overall = grade_frames(&verdicts, &labels, options.mode).expect("paired verdicts");
        let mut by_strategy = BTreeMap::new();
        for s in strategies.iter().copied().collect::<std::collections::BTreeSet<_>>() {
            let (v, l): (Vec<Verdict>, Vec<Label>) = verdicts
                .iter()
                .zip(&labels)
                .zip(&strategies)
                .filter(|(_, st)| **st == s)
                .map(|((v, l), _)| (*v, *l))
                .unzip();
            by_strategy.insert(s, grade_frames(&v, &l, options.mode).expect("paired verdicts"));
        }
        Some(FrameMetrics {
            mode: options.mode,
            overall,
            by_strategy,
            backend_errors,
        })
    };
    let report = MetricsReport {
        seed: Some(options.seed),
        actions: Some(actions.len()),
        frames,
        trials: None,
    };
    Ok(ReplayOutput { actions, report })
}

/// Uniform hazard positions over the map floor.
pub fn sample_hazard_locations(map: &LabMap, n: usize, seed: u64) -> Vec<Point2D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Point2D::new(rng.random_range(0.0..=map.width), rng.random_range(0.0..=map.height)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialOptions {
    pub seed: u64,
    pub safety: SafetyPolicy,
    pub parse_mode: ParseMode,
}

impl Default for TrialOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            safety: SafetyPolicy::default(),
            parse_mode: ParseMode::Tolerant,
        }
    }
}

/// Independent reposition trials: each places one hazard at random, renders
/// the lab, prompts the backend and validates the reply.
pub fn run_reposition_trials(
    map: &LabMap,
    condition: Condition,
    hazard_kind: HazardKind,
    n: usize,
    backend: &mut dyn VlmBackend,
    options: TrialOptions,
) -> TrialSummary {
    assert!(n >= 1, "at least one trial");
    let robots: Vec<RobotState> = map.robots.iter().map(|r| RobotState::new(r.id.clone(), r.node)).collect();
    let mut renderer = Renderer::default();
    let mut results = Vec::with_capacity(n);
    for (i, location) in sample_hazard_locations(map, n, options.seed).into_iter().enumerate() {
        let mut workers = Vec::new();
        let mut fires = Vec::new();
        let hazard = match hazard_kind {
            HazardKind::Fire => {
                fires.push(location);
                HazardEvent::fire(format!("F{}", i + 1), location, 0.0)
            }
            kind => {
                let id = format!("P{}", i + 1);
                let mut w = WorkerTrack::new(&id, location);
                if kind == HazardKind::Accident {
                    w.set_posture(Posture::Prone);
                } else {
                    w.set_ppe(PpeStatus::NotWearing);
                }
                workers.push(w);
                HazardEvent::worker(kind, id, location, 0.0)
            }
        };
        let ctx = RepositionContext {
            map,
            zones: &[],
            workers: &workers,
            robots: &robots,
            fires: &fires,
            hazards: &[location],
            condition,
            safety: &options.safety,
            parse_mode: options.parse_mode,
        };
        let attempt = attempt_reposition(&ctx, &hazard, &mut renderer, backend);
        let errors = match &attempt.outcome {
            AttemptOutcome::Invalid(e) => e.iter().copied().collect(),
            _ => Vec::new(),
        };
        results.push(TrialResult {
            trial: i + 1,
            location,
            listed_nodes: attempt.request.as_ref().and_then(|r| r.listed_nodes.clone()),
            raw: attempt.reply.as_ref().map(|r| r.text.clone()),
            parse_ok: attempt.plan.as_ref().is_some_and(|p| p.parse_ok),
            success: attempt.outcome == AttemptOutcome::Valid,
            outcome: match &attempt.outcome {
                AttemptOutcome::Valid => "success".to_string(),
                AttemptOutcome::Invalid(_) => "invalid".to_string(),
                AttemptOutcome::Unparseable => "hallucination".to_string(),
                AttemptOutcome::NoSafeNodes => "no_safe_nodes".to_string(),
                AttemptOutcome::Backend(e) => format!("backend_error: {e}"),
            },
            latency: attempt.reply.as_ref().map(|r| r.latency).unwrap_or(0.0),
            errors,
        });
    }
    let count_err = |e: PlanError| results.iter().filter(|r| r.errors.contains(&e)).count();
    let successes = results.iter().filter(|r| r.success).count();
    let hallucinations = results.iter().filter(|r| r.outcome == "hallucination").count();
    TrialSummary {
        condition,
        hazard: hazard_kind,
        n,
        seed: options.seed,
        successes,
        success_rate: successes as f64 / n as f64,
        e1: count_err(PlanError::E1),
        e2: count_err(PlanError::E2),
        e3: count_err(PlanError::E3),
        hallucinations,
        hallucination_rate: hallucinations as f64 * 100.0 / n as f64,
        backend_errors: results.iter().filter(|r| r.outcome.starts_with("backend_error")).count(),
        no_safe_nodes: results.iter().filter(|r| r.outcome == "no_safe_nodes").count(),
        mean_latency: results.iter().map(|r| r.latency).sum::<f64>() / n as f64,
        results,
    }
}
