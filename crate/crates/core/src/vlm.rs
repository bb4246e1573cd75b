//! Prompt construction, model backends and reply parsing.
//!
//! Two kinds of requests go to a vision-language model: classification
//! prompts (one request per prompt of a [`Strategy`]) and reposition prompts
//! that ask for one navigation node per robot. Replies are plain text;
//! parsing and validation are separate stages so that format violations and
//! nonexistent nodes are counted apart.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use base64::Engine as _;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{HazardEvent, HazardKind, NodeId, Point2D};
use crate::perception::{DetectionFrame, Strategy};
use crate::render;

pub const REPOSITION_TEMPLATE: &str = include_str!("../templates/reposition_v1.txt");
pub const REPOSITION_TEMPLATE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    /// No node list in the prompt.
    C1,
    /// Every graph node listed.
    C2,
    /// Only nodes outside the safety perimeters listed.
    C3,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::C1 => "c1",
            Condition::C2 => "c2",
            Condition::C3 => "c3",
        })
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "c1" => Ok(Condition::C1),
            "c2" => Ok(Condition::C2),
            "c3" => Ok(Condition::C3),
            other => Err(format!("unknown prompting condition {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageInput {
    None,
    /// Opaque reference to a camera frame held by the station.
    Reference(String),
    #[serde(skip)]
    Png(Vec<u8>),
}

/// One query to a model backend.
#[derive(Debug, Clone, PartialEq)]
pub struct VlmRequest {
    /// Key the mock backend scripts against: a prompt id such as `Q4.2`, or
    /// `reposition/<condition>/<hazard kind>`.
    pub fingerprint: String,
    pub prompt: String,
    pub image: ImageInput,
    /// Nodes offered to the model, when the condition lists any.
    pub listed_nodes: Option<Vec<NodeId>>,
    pub robot_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VlmReply {
    pub text: String,
    /// Seconds, measured for live backends and scripted for the mock.
    pub latency: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VlmError {
    #[error("no scripted reply for request {0}")]
    UnscriptedRequest(String),
    #[error("mock script error: {0}")]
    Script(String),
    #[error("model endpoint timed out after {0:?}")]
    Timeout(Duration),
    #[error("model endpoint error: {0}")]
    Http(String),
    #[error("could not decode model reply: {0}")]
    Decode(String),
    #[error("c3 prompt requested but no node lies outside the safety perimeters")]
    NoSafeNodes,
}

pub trait VlmBackend: Send {
    fn complete(&mut self, request: &VlmRequest) -> Result<VlmReply, VlmError>;
}

impl<B: VlmBackend + ?Sized> VlmBackend for Box<B> {
    fn complete(&mut self, request: &VlmRequest) -> Result<VlmReply, VlmError> {
        (**self).complete(request)
    }
}

/// Requests for every prompt of a strategy, in prompt order.
pub fn build_classification_prompt(strategy: Strategy, frame: &DetectionFrame) -> Vec<VlmRequest> {
    let image = ImageInput::Reference(format!("frame://{}/{:.3}", frame.station, frame.t));
    strategy
        .prompts()
        .iter()
        .map(|p| VlmRequest {
            fingerprint: p.id.to_string(),
            prompt: p.text.to_string(),
            image: image.clone(),
            listed_nodes: None,
            robot_count: 0,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobotBrief {
    /// 1-based position in the reply format (`ROBOT<index>`).
    pub index: u32,
    pub id: String,
    pub node: NodeId,
    pub position: Point2D,
}

/// Everything a reposition prompt is generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptConfig {
    pub condition: Condition,
    pub map_image: Vec<u8>,
    pub node_list: Option<Vec<NodeId>>,
    /// Scene text: people, fire markers and other map elements.
    pub description: String,
}

impl PromptConfig {
    /// Fills `node_list` as the condition requires.
    pub fn new(
        condition: Condition,
        map_image: Vec<u8>,
        all_nodes: &[NodeId],
        safe_nodes: &[NodeId],
        description: String,
    ) -> Self {
        let node_list = match condition {
            Condition::C1 => None,
            Condition::C2 => Some(all_nodes.to_vec()),
            Condition::C3 => Some(safe_nodes.to_vec()),
        };
        Self {
            condition,
            map_image,
            node_list,
            description,
        }
    }
}

pub fn reposition_fingerprint(condition: Condition, kind: HazardKind) -> String {
    format!("reposition/{condition}/{kind}")
}

fn placeholder(i: usize) -> String {
    const NAMES: [&str; 3] = ["X", "Y", "Z"];
    NAMES.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("N{}", i + 1))
}

/// `ROBOT1: [X], ROBOT2: [Y], ROBOT3: [Z]` for three robots.
pub fn reply_format(robot_count: usize) -> String {
    (0..robot_count)
        .map(|i| format!("ROBOT{}: [{}]", i + 1, placeholder(i)))
        .collect::<Vec<_>>()
        .join(", ")
}

fn join_nodes(nodes: &[NodeId]) -> String {
    nodes.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(", ")
}

pub fn build_reposition_prompt(
    config: &PromptConfig,
    hazard: &HazardEvent,
    robots: &[RobotBrief],
) -> Result<VlmRequest, VlmError> {
    let nodes = match (config.condition, &config.node_list) {
        (Condition::C1, _) | (_, None) => String::new(),
        (Condition::C3, Some(list)) if list.is_empty() => return Err(VlmError::NoSafeNodes),
        (Condition::C2, Some(list)) => format!("Valid navigation nodes: {}.\n", join_nodes(list)),
        (Condition::C3, Some(list)) => format!(
            "Safe navigation nodes (outside every safety perimeter): {}.\n",
            join_nodes(list)
        ),
    };
    let (hazard_text, hazard_short) = match hazard.kind {
        HazardKind::Fire => (
            format!(
                "possible fire detected at hot spot {} located at {}.",
                hazard.subject.id(),
                hazard.location
            ),
            "fire",
        ),
        HazardKind::Accident => (
            format!(
                "possible accident: person {} may be injured at {}.",
                hazard.subject.id(),
                hazard.location
            ),
            "injured person",
        ),
        HazardKind::PpeViolation => (
            format!(
                "person {} at {} is not wearing a lab coat.",
                hazard.subject.id(),
                hazard.location
            ),
            "person without protective equipment",
        ),
    };
    let robot_lines = robots
        .iter()
        .map(|r| format!("- ROBOT{} ({}) is at node {} {}", r.index, r.id, r.node, r.position))
        .collect::<Vec<_>>()
        .join("\n");
    let prompt = REPOSITION_TEMPLATE
        .replace("{legend}", &render::legend_text())
        .replace("{hazard}", &hazard_text)
        .replace("{scene}", config.description.trim_end())
        .replace("{robots}", &robot_lines)
        .replace("{nodes}", &nodes)
        .replace("{hazard_short}", hazard_short)
        .replace("{format}", &reply_format(robots.len()));
    Ok(VlmRequest {
        fingerprint: reposition_fingerprint(config.condition, hazard.kind),
        prompt,
        image: ImageInput::Png(config.map_image.clone()),
        listed_nodes: config.node_list.clone(),
        robot_count: robots.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    Node(NodeId),
    Stay,
}

impl Assignment {
    pub fn from_number(n: NodeId) -> Self {
        if n == 0 {
            Assignment::Stay
        } else {
            Assignment::Node(n)
        }
    }

    pub fn number(self) -> NodeId {
        match self {
            Assignment::Node(n) => n,
            Assignment::Stay => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepositionPlan {
    /// Robot index (1-based, as in `ROBOT<k>`) → assignment.
    pub assignments: BTreeMap<u32, Assignment>,
    pub raw: String,
    pub parse_ok: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    /// Case-insensitive, optional brackets, free text around the entries.
    #[default]
    Tolerant,
    /// Exactly the canonical format, nothing else.
    Strict,
}

/// Renders assignments in the canonical reply format.
pub fn format_assignments(assignments: &BTreeMap<u32, Assignment>) -> String {
    assignments
        .iter()
        .map(|(k, a)| format!("ROBOT{k}: [{}]", a.number()))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn parse_reposition(raw: &str, robot_count: usize) -> RepositionPlan {
    parse_reposition_with(raw, robot_count, ParseMode::Tolerant)
}

pub fn parse_reposition_with(raw: &str, robot_count: usize, mode: ParseMode) -> RepositionPlan {
    let entries = scan_entries(raw, robot_count);
    let parse_ok = match (&entries, mode) {
        (Some(found), ParseMode::Tolerant) => found.len() == robot_count,
        (Some(found), ParseMode::Strict) => found.len() == robot_count && format_assignments(found) == raw.trim(),
        (None, _) => false,
    };
    RepositionPlan {
        assignments: if parse_ok { entries.unwrap_or_default() } else { BTreeMap::new() },
        raw: raw.to_string(),
        parse_ok,
    }
}

fn mention_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)robot\s*(\d+)").unwrap())
}

fn value_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*:\s*(?:\[\s*(\d+)\s*\]|(\d+))").unwrap())
}

/// Every `ROBOT<k>` mention must be a complete entry with a distinct index
/// in `1..=robot_count`; anything else makes the reply unparseable.
fn scan_entries(raw: &str, robot_count: usize) -> Option<BTreeMap<u32, Assignment>> {
    let mut found = BTreeMap::new();
    for m in mention_re().captures_iter(raw) {
        let whole = m.get(0)?;
        let index: u32 = m[1].parse().ok()?;
        if index == 0 || index as usize > robot_count {
            return None;
        }
        let rest = &raw[whole.end()..];
        let value = value_re().captures(rest)?;
        let (digits, bracketed) = match (value.get(1), value.get(2)) {
            (Some(d), _) => (d.as_str(), true),
            (None, Some(d)) => (d.as_str(), false),
            _ => return None,
        };
        if !bracketed {
            let after = &rest[value.get(0)?.end()..];
            let mut chars = after.chars();
            match chars.next() {
                Some(c) if c.is_alphanumeric() || c == '_' => return None,
                Some('.') if chars.next().is_some_and(|c| c.is_ascii_digit()) => return None,
                _ => {}
            }
        }
        let node: NodeId = digits.parse().ok()?;
        if found.insert(index, Assignment::from_number(node)).is_some() {
            return None;
        }
    }
    Some(found)
}

/// A reply fragment in a mock script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum ReplyDoc {
    One { response: String },
    Many { responses: Vec<String> },
    Pick { pick_listed_nodes: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EntryDoc {
    fingerprint: String,
    #[serde(flatten)]
    reply: ReplyDoc,
    #[serde(default)]
    latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScriptDoc {
    entries: Vec<EntryDoc>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScriptReply {
    Text(String),
    /// Consumed in order; running out is an unscripted request.
    Sequence(Vec<String>),
    /// Assigns robots to distinct nodes taken evenly from the node list
    /// carried by the request.
    PickListedNodes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptEntry {
    /// `/`-separated pattern; a `*` segment matches any one segment.
    pub fingerprint: String,
    pub reply: ScriptReply,
    pub latency: f64,
}

impl ScriptEntry {
    pub fn text(fingerprint: impl Into<String>, reply: impl Into<String>) -> Self {
        Self {
            fingerprint: fingerprint.into(),
            reply: ScriptReply::Text(reply.into()),
            latency: 0.0,
        }
    }

    pub fn sequence(fingerprint: impl Into<String>, replies: Vec<String>) -> Self {
        Self {
            fingerprint: fingerprint.into(),
            reply: ScriptReply::Sequence(replies),
            latency: 0.0,
        }
    }

    pub fn pick_listed(fingerprint: impl Into<String>) -> Self {
        Self {
            fingerprint: fingerprint.into(),
            reply: ScriptReply::PickListedNodes,
            latency: 0.0,
        }
    }

    pub fn with_latency(mut self, latency: f64) -> Self {
        self.latency = latency;
        self
    }

    fn matches(&self, fingerprint: &str) -> bool {
        let pattern: Vec<&str> = self.fingerprint.split('/').collect();
        let actual: Vec<&str> = fingerprint.split('/').collect();
        pattern.len() == actual.len() && pattern.iter().zip(&actual).all(|(p, a)| *p == "*" || p == a)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MockScript {
    pub entries: Vec<ScriptEntry>,
}

impl MockScript {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        Self { entries }
    }

    /// Parses the JSON script file:
    /// `{"entries": [{"fingerprint": "Q1", "response": "YES", "latency": 2.5}, ...]}`.
    /// An entry carries one of `response`, `responses` or `pick_listed_nodes`.
    pub fn from_json(text: &str) -> Result<Self, VlmError> {
        let doc: ScriptDoc = serde_json::from_str(text).map_err(|e| VlmError::Script(e.to_string()))?;
        let entries = doc
            .entries
            .into_iter()
            .map(|e| {
                let reply = match e.reply {
                    ReplyDoc::One { response } => ScriptReply::Text(response),
                    ReplyDoc::Many { responses } => ScriptReply::Sequence(responses),
                    ReplyDoc::Pick { pick_listed_nodes: true } => ScriptReply::PickListedNodes,
                    ReplyDoc::Pick { pick_listed_nodes: false } => {
                        return Err(VlmError::Script(format!("entry {} has no reply", e.fingerprint)))
                    }
                };
                Ok(ScriptEntry {
                    fingerprint: e.fingerprint,
                    reply,
                    latency: e.latency,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { entries })
    }

    pub fn to_json(&self) -> String {
        let doc = ScriptDoc {
            entries: self
                .entries
                .iter()
                .map(|e| EntryDoc {
                    fingerprint: e.fingerprint.clone(),
                    reply: match &e.reply {
                        ScriptReply::Text(t) => ReplyDoc::One { response: t.clone() },
                        ScriptReply::Sequence(v) => ReplyDoc::Many { responses: v.clone() },
                        ScriptReply::PickListedNodes => ReplyDoc::Pick { pick_listed_nodes: true },
                    },
                    latency: e.latency,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("script serializes")
    }
}

/// Deterministic, scripted backend for tests and replays.
#[derive(Debug, Clone)]
pub struct MockBackend {
    script: MockScript,
    cursors: Vec<usize>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        let cursors = vec![0; script.entries.len()];
        Self { script, cursors }
    }
}

fn pick_listed(listed: &[NodeId], robot_count: usize) -> String {
    let assignments = (0..robot_count)
        .map(|i| {
            let node = if listed.len() >= robot_count {
                listed[i * listed.len() / robot_count]
            } else {
                listed.get(i).copied().unwrap_or(0)
            };
            (i as u32 + 1, Assignment::from_number(node))
        })
        .collect();
    format_assignments(&assignments)
}

impl VlmBackend for MockBackend {
    fn complete(&mut self, request: &VlmRequest) -> Result<VlmReply, VlmError> {
        let (i, entry) = self
            .script
            .entries
            .iter()
            .enumerate()
            .find(|(_, e)| e.matches(&request.fingerprint))
            .ok_or_else(|| VlmError::UnscriptedRequest(request.fingerprint.clone()))?;
        let text = match &entry.reply {
            ScriptReply::Text(t) => t.clone(),
            ScriptReply::Sequence(replies) => {
                let reply = replies
                    .get(self.cursors[i])
                    .cloned()
                    .ok_or_else(|| VlmError::UnscriptedRequest(format!("{} (sequence exhausted)", request.fingerprint)))?;
                self.cursors[i] += 1;
                reply
            }
            ScriptReply::PickListedNodes => {
                let listed = request.listed_nodes.as_deref().ok_or_else(|| {
                    VlmError::Script(format!("{} carries no node list to pick from", request.fingerprint))
                })?;
                pick_listed(listed, request.robot_count)
            }
        };
        Ok(VlmReply {
            text,
            latency: entry.latency,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveConfig {
    /// Generate endpoint, e.g. `http://127.0.0.1:11434/api/generate`.
    pub endpoint: String,
    pub model: String,
    #[serde(with = "secs")]
    pub timeout: Duration,
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs_f64(f64::deserialize(d)?))
    }
}

#[derive(Serialize)]
struct GenerateBody<'a> {
    model: &'a str,
    prompt: &'a str,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    images: Vec<String>,
    stream: bool,
}

#[derive(Deserialize)]
struct GenerateReply {
    response: String,
}

/// Client for a chat-with-image endpoint of a local model server: the body
/// carries model, prompt and base64 images, the reply a `response` string.
pub struct LiveBackend {
    config: LiveConfig,
    agent: ureq::Agent,
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        Self { config, agent }
    }
}

impl VlmBackend for LiveBackend {
    fn complete(&mut self, request: &VlmRequest) -> Result<VlmReply, VlmError> {
        let images = match &request.image {
            ImageInput::Png(bytes) => vec![base64::engine::general_purpose::STANDARD.encode(bytes)],
            _ => Vec::new(),
        };
        let body = GenerateBody {
            model: &self.config.model,
            prompt: &request.prompt,
            images,
            stream: false,
        };
        let started = Instant::now();
        let result = self.agent.post(&self.config.endpoint).send_json(&body);
        let mut response = match result {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(VlmError::Timeout(self.config.timeout)),
            Err(e) => return Err(VlmError::Http(e.to_string())),
        };
        let reply: GenerateReply = response.body_mut().read_json().map_err(|e| match e {
            ureq::Error::Timeout(_) => VlmError::Timeout(self.config.timeout),
            other => VlmError::Decode(other.to_string()),
        })?;
        Ok(VlmReply {
            text: reply.response,
            latency: started.elapsed().as_secs_f64(),
        })
    }
}
