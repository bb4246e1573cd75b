//! Station observations to worker state: detection projection, the Q1-Q10
//! query strategies and their keyword decision rules, and debouncing.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Point2D, Posture, PpeStatus, StationKind, StationPose};

/// Prompt id → model reply text. Single-prompt strategies use their own id
/// (`"Q7"`); multi-prompt strategies number their prompts (`"Q4.1"`..`"Q4.3"`).
pub type Responses = BTreeMap<String, String>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerceptionError {
    #[error("station {0} is not an RGB-D station")]
    NotRgbd(String),
    #[error("depth range must be positive, got {0}")]
    InvalidRange(f64),
    #[error("pixel_x must lie in [0, 1], got {0}")]
    InvalidPixel(f64),
    #[error("missing response for prompt {0}")]
    MissingResponse(String),
    #[error("strategy {0} does not classify {1}")]
    WrongDimension(Strategy, &'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFrame {
    pub station: String,
    pub t: f64,
    /// Simulator ground-truth identity of the detected person.
    #[serde(default, skip_serializing_if = "Option::is_none", alias = "person")]
    pub person_hint: Option<String>,
    pub pixel_x: f64,
    pub range: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub responses: Responses,
}

/// Map position of a person seen at `pixel_x` (0 = left image edge) and
/// `range` meters by an RGB-D station.
pub fn project_detection(
    station: &StationPose,
    pixel_x: f64,
    range: f64,
) -> Result<Point2D, PerceptionError> {
    if station.kind != StationKind::Rgbd {
        return Err(PerceptionError::NotRgbd(station.id.clone()));
    }
    if !(range > 0.0 && range.is_finite()) {
        return Err(PerceptionError::InvalidRange(range));
    }
    if !(0.0..=1.0).contains(&pixel_x) {
        return Err(PerceptionError::InvalidPixel(pixel_x));
    }
    let bearing = station.heading + (0.5 - pixel_x) * station.hfov;
    Ok(Point2D::new(
        station.position.x + range * bearing.cos(),
        station.position.y + range * bearing.sin(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Ppe,
    Posture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptSpec {
    pub id: &'static str,
    pub text: &'static str,
    /// The prompt instructs a YES/NO reply.
    pub yes_no: bool,
}

const fn yes_no(id: &'static str, text: &'static str) -> PromptSpec {
    PromptSpec { id, text, yes_no: true }
}

const fn open(id: &'static str, text: &'static str) -> PromptSpec {
    PromptSpec { id, text, yes_no: false }
}

const Q1: [PromptSpec; 1] = [yes_no("Q1", "Is the person wearing a lab coat? ONLY reply with YES or NO.")];
const Q2: [PromptSpec; 1] = [yes_no("Q2", "Is the person wearing a WHITE lab coat? ONLY reply with YES or NO.")];
const Q3: [PromptSpec; 1] = [open("Q3", "What is the person wearing?")];
const Q4: [PromptSpec; 3] = [
    yes_no("Q4.1", "Is the person wearing a lab coat?"),
    yes_no("Q4.2", "Is the person wearing a white lab coat?"),
    open("Q4.3", "What is the person wearing?"),
];
const Q5: [PromptSpec; 1] = [yes_no("Q5", "Is the person prone? ONLY reply with YES or NO.")];
const Q6: [PromptSpec; 1] = [yes_no(
    "Q6",
    "Is the person LYING on the floor or KNEELING or SITTING or CROUCHING or BENDING OVER or SQUATTING DOWN? ONLY reply with YES or NO.",
)];
const Q7: [PromptSpec; 1] = [yes_no("Q7", "Is the person standing? ONLY reply with YES or NO.")];
const Q8: [PromptSpec; 1] = [yes_no("Q8", "Is the person standing or walking? ONLY reply with YES or NO.")];
const Q9: [PromptSpec; 1] = [open("Q9", "What is the person doing?")];
const Q10: [PromptSpec; 3] = [
    yes_no("Q10.1", "Is the person standing? ONLY reply with YES or NO."),
    yes_no("Q10.2", "Is the person walking? ONLY reply with YES or NO."),
    open("Q10.3", "What is the person doing?"),
];

/// Lab coat keywords, most frequent first.
pub const PPE_KEYWORDS: [&str; 3] = ["WHITE", "LAB COAT", "COAT"];
pub const PRONE_KEYWORDS: [&str; 6] = ["KNEELING", "SITTING", "CROUCHING", "BENDING", "SQUATTING", "LYING"];
pub const UPRIGHT_KEYWORDS: [&str; 6] = ["WALKING", "STANDING", "CHECKING", "EXAMINING", "LOOKING", "WORKING"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    Q1,
    Q2,
    Q3,
    Q4,
    Q5,
    Q6,
    Q7,
    Q8,
    Q9,
    Q10,
}

impl Strategy {
    pub const ALL: [Strategy; 10] = [
        Strategy::Q1,
        Strategy::Q2,
        Strategy::Q3,
        Strategy::Q4,
        Strategy::Q5,
        Strategy::Q6,
        Strategy::Q7,
        Strategy::Q8,
        Strategy::Q9,
        Strategy::Q10,
    ];

    pub fn prompts(self) -> &'static [PromptSpec] {
        match self {
            Strategy::Q1 => &Q1,
            Strategy::Q2 => &Q2,
            Strategy::Q3 => &Q3,
            Strategy::Q4 => &Q4,
            Strategy::Q5 => &Q5,
            Strategy::Q6 => &Q6,
            Strategy::Q7 => &Q7,
            Strategy::Q8 => &Q8,
            Strategy::Q9 => &Q9,
            Strategy::Q10 => &Q10,
        }
    }

    pub fn dimension(self) -> Dimension {
        match self {
            Strategy::Q1 | Strategy::Q2 | Strategy::Q3 | Strategy::Q4 => Dimension::Ppe,
            _ => Dimension::Posture,
        }
    }

    /// True when every prompt of the strategy has a reply.
    pub fn is_answered_by(self, responses: &Responses) -> bool {
        self.prompts().iter().all(|p| responses.contains_key(p.id))
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|q| q.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown query strategy {s:?}"))
    }
}

/// Positive means the queried condition holds: PPE present for Q1-Q4,
/// prone for Q5-Q10.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Verdict {
    pub label: Label,
    /// Reply broke the query format; `label` then holds the Negative fallback
    /// and the coordinator ignores the verdict for state transitions.
    pub hallucination: bool,
    pub latency: f64,
    /// Keyword that decided a free-form reply, earliest in list order.
    pub matched_keyword: Option<&'static str>,
}

impl Verdict {
    fn decided(label: Label, matched_keyword: Option<&'static str>) -> Self {
        Self {
            label,
            hallucination: false,
            latency: 0.0,
            matched_keyword,
        }
    }

    fn hallucinated() -> Self {
        Self {
            label: Label::Negative,
            hallucination: true,
            latency: 0.0,
            matched_keyword: None,
        }
    }

    pub fn with_latency(mut self, latency: f64) -> Self {
        self.latency = latency;
        self
    }

    pub fn ppe_status(&self) -> PpeStatus {
        match self.label {
            Label::Positive => PpeStatus::Wearing,
            Label::Negative => PpeStatus::NotWearing,
        }
    }

    pub fn posture(&self) -> Posture {
        match self.label {
            Label::Positive => Posture::Prone,
            Label::Negative => Posture::Upright,
        }
    }
}

/// How the three Q4 answers are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Q4Combine {
    /// Majority of resolved answers, ties count as wearing.
    #[default]
    Majority,
    /// First resolved answer in prompt order decides.
    Priority,
}

/// Reads a YES/NO reply from its first word. Leading quotes, brackets and
/// markup are skipped; anything whose first word is not YES or NO is a
/// format violation.
pub fn read_yes_no(text: &str) -> Option<bool> {
    let rest = text.trim_start_matches(|c: char| !c.is_alphanumeric());
    let word: String = rest.chars().take_while(|c| c.is_alphabetic()).collect();
    match word.to_ascii_uppercase().as_str() {
        "YES" => Some(true),
        "NO" => Some(false),
        _ => None,
    }
}

/// First keyword (in list order) contained in the text, case-insensitive.
pub fn first_keyword(text: &str, keywords: &[&'static str]) -> Option<&'static str> {
    let upper = text.to_uppercase();
    keywords.iter().copied().find(|k| upper.contains(k))
}

fn response<'a>(responses: &'a Responses, id: &str) -> Result<&'a str, PerceptionError> {
    responses
        .get(id)
        .map(String::as_str)
        .ok_or_else(|| PerceptionError::MissingResponse(id.to_string()))
}

/// Q3 keyword rule. Empty replies are format violations.
fn lab_coat_keywords(text: &str) -> Verdict {
    if text.trim().is_empty() {
        return Verdict::hallucinated();
    }
    match first_keyword(text, &PPE_KEYWORDS) {
        Some(k) => Verdict::decided(Label::Positive, Some(k)),
        None => Verdict::decided(Label::Negative, None),
    }
}

/// Q9 keyword rule. Prone terms are checked before upright terms.
fn posture_keywords(text: &str) -> Verdict {
    if let Some(k) = first_keyword(text, &PRONE_KEYWORDS) {
        Verdict::decided(Label::Positive, Some(k))
    } else if let Some(k) = first_keyword(text, &UPRIGHT_KEYWORDS) {
        Verdict::decided(Label::Negative, Some(k))
    } else {
        Verdict::hallucinated()
    }
}

fn yes_no_verdict(text: &str, yes: Label) -> Verdict {
    let no = match yes {
        Label::Positive => Label::Negative,
        Label::Negative => Label::Positive,
    };
    match read_yes_no(text) {
        Some(true) => Verdict::decided(yes, None),
        Some(false) => Verdict::decided(no, None),
        None => Verdict::hallucinated(),
    }
}

pub fn classify_ppe(responses: &Responses, strategy: Strategy) -> Result<Verdict, PerceptionError> {
    classify_ppe_with(responses, strategy, Q4Combine::default())
}

pub fn classify_ppe_with(
    responses: &Responses,
    strategy: Strategy,
    combine: Q4Combine,
) -> Result<Verdict, PerceptionError> {
    let prompts = strategy.prompts();
    match strategy {
        Strategy::Q1 | Strategy::Q2 => Ok(yes_no_verdict(response(responses, prompts[0].id)?, Label::Positive)),
        Strategy::Q3 => Ok(lab_coat_keywords(response(responses, prompts[0].id)?)),
        Strategy::Q4 => {
            let texts = prompts
                .iter()
                .map(|p| response(responses, p.id))
                .collect::<Result<Vec<_>, _>>()?;
            let mut votes: Vec<(Label, Option<&'static str>)> = Vec::with_capacity(3);
            for text in &texts[..2] {
                match read_yes_no(text) {
                    Some(true) => votes.push((Label::Positive, None)),
                    Some(false) => votes.push((Label::Negative, None)),
                    None => {}
                }
            }
            let free = lab_coat_keywords(texts[2]);
            if !free.hallucination {
                votes.push((free.label, free.matched_keyword));
            }
            if votes.is_empty() {
                return Ok(Verdict::hallucinated());
            }
            let keyword = free.matched_keyword;
            let label = match combine {
                Q4Combine::Priority => votes[0].0,
                Q4Combine::Majority => {
                    let wearing = votes.iter().filter(|(l, _)| *l == Label::Positive).count();
                    if wearing * 2 >= votes.len() {
                        Label::Positive
                    } else {
                        Label::Negative
                    }
                }
            };
            Ok(Verdict::decided(label, keyword))
        }
        other => Err(PerceptionError::WrongDimension(other, "PPE")),
    }
}

pub fn classify_posture(responses: &Responses, strategy: Strategy) -> Result<Verdict, PerceptionError> {
    let prompts = strategy.prompts();
    match strategy {
        Strategy::Q5 | Strategy::Q6 => Ok(yes_no_verdict(response(responses, prompts[0].id)?, Label::Positive)),
        Strategy::Q7 | Strategy::Q8 => Ok(yes_no_verdict(response(responses, prompts[0].id)?, Label::Negative)),
        Strategy::Q9 => Ok(posture_keywords(response(responses, prompts[0].id)?)),
        Strategy::Q10 => {
            let standing = response(responses, prompts[0].id)?;
            let walking = response(responses, prompts[1].id)?;
            let doing = response(responses, prompts[2].id)?;
            let verdict = match read_yes_no(standing) {
                Some(true) => Verdict::decided(Label::Negative, None),
                Some(false) => match read_yes_no(walking) {
                    Some(true) => Verdict::decided(Label::Negative, None),
                    Some(false) => Verdict::decided(Label::Positive, None),
                    None => posture_keywords(doing),
                },
                None => posture_keywords(doing),
            };
            Ok(verdict)
        }
        other => Err(PerceptionError::WrongDimension(other, "posture")),
    }
}

/// Dispatches on the strategy's dimension.
pub fn classify(responses: &Responses, strategy: Strategy, combine: Q4Combine) -> Result<Verdict, PerceptionError> {
    match strategy.dimension() {
        Dimension::Ppe => classify_ppe_with(responses, strategy, combine),
        Dimension::Posture => classify_posture(responses, strategy),
    }
}

pub const DEFAULT_DEBOUNCE: usize = 3;

/// Stable state that only flips after `required` consecutive identical
/// observations that differ from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Debouncer<S> {
    stable: S,
    candidate: Option<S>,
    streak: usize,
    required: usize,
}

impl<S: Copy + PartialEq> Debouncer<S> {
    pub fn new(initial: S, required: usize) -> Self {
        assert!(required >= 1, "debounce length must be at least 1");
        Self {
            stable: initial,
            candidate: None,
            streak: 0,
            required,
        }
    }

    pub fn stable(&self) -> S {
        self.stable
    }

    /// Feeds one observation; returns the new stable state if it flipped.
    pub fn push(&mut self, observed: S) -> Option<S> {
        if observed == self.stable {
            self.candidate = None;
            self.streak = 0;
            return None;
        }
        if self.candidate == Some(observed) {
            self.streak += 1;
        } else {
            self.candidate = Some(observed);
            self.streak = 1;
        }
        if self.streak >= self.required {
            self.stable = observed;
            self.candidate = None;
            self.streak = 0;
            Some(observed)
        } else {
            None
        }
    }

    /// Overrides the stable state, e.g. for operator injections.
    pub fn force(&mut self, state: S) {
        self.stable = state;
        self.candidate = None;
        self.streak = 0;
    }
}

/// Stable state after feeding `history` into a fresh debouncer.
pub fn debounce<S: Copy + PartialEq>(initial: S, history: &[S], required: usize) -> S {
    let mut d = Debouncer::new(initial, required);
    for s in history {
        d.push(*s);
    }
    d.stable()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rgbd(x: f64, y: f64, heading: f64) -> StationPose {
        StationPose {
            id: "S".into(),
            position: Point2D::new(x, y),
            heading,
            kind: StationKind::Rgbd,
            hfov: 1.518,
        }
    }

    fn resp(pairs: &[(&str, &str)]) -> Responses {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn projection_examples() {
        let p = project_detection(&rgbd(0.0, 0.0, 0.0), 0.5, 3.0).unwrap();
        assert!((p.x - 3.0).abs() < 1e-12 && p.y.abs() < 1e-12);
        let p = project_detection(&rgbd(0.0, 0.0, std::f64::consts::FRAC_PI_2), 0.5, 2.0).unwrap();
        assert!(p.x.abs() < 1e-12 && (p.y - 2.0).abs() < 1e-12);
        // Left image edge looks half a field of view counter-clockwise.
        let p = project_detection(&rgbd(1.0, 1.0, 0.0), 0.0, 2.0).unwrap();
        assert!((p.x - (1.0 + 2.0 * 0.759f64.cos())).abs() < 1e-12);
        assert!((p.y - (1.0 + 2.0 * 0.759f64.sin())).abs() < 1e-12);
    }

    #[test]
    fn projection_errors() {
        let mut ir = rgbd(0.0, 0.0, 0.0);
        ir.kind = StationKind::Ir;
        assert!(matches!(project_detection(&ir, 0.5, 1.0), Err(PerceptionError::NotRgbd(_))));
        assert_eq!(
            project_detection(&rgbd(0.0, 0.0, 0.0), 0.5, 0.0),
            Err(PerceptionError::InvalidRange(0.0))
        );
        assert!(project_detection(&rgbd(0.0, 0.0, 0.0), 1.5, 1.0).is_err());
    }

    #[test]
    fn strategy_prompt_counts() {
        for q in Strategy::ALL {
            let n = q.prompts().len();
            match q {
                Strategy::Q4 | Strategy::Q10 => assert_eq!(n, 3),
                _ => assert_eq!(n, 1),
            }
        }
        assert!(!Strategy::Q3.prompts()[0].yes_no);
        assert!(!Strategy::Q9.prompts()[0].yes_no);
        assert!(Strategy::Q10.prompts()[..2].iter().all(|p| p.yes_no));
        assert_eq!("q10".parse::<Strategy>(), Ok(Strategy::Q10));
    }

    #[test]
    fn q3_keyword_rule() {
        let v = classify_ppe(&resp(&[("Q3", "The person is wearing a white lab coat and glasses")]), Strategy::Q3).unwrap();
        assert_eq!(v.label, Label::Positive);
        assert_eq!(v.matched_keyword, Some("WHITE"));
        let v = classify_ppe(&resp(&[("Q3", "a lab coat")]), Strategy::Q3).unwrap();
        assert_eq!(v.matched_keyword, Some("LAB COAT"));
        let v = classify_ppe(&resp(&[("Q3", "jeans and a t-shirt")]), Strategy::Q3).unwrap();
        assert_eq!((v.label, v.hallucination), (Label::Negative, false));
    }

    #[test]
    fn q1_yes_and_hallucination() {
        let v = classify_ppe(&resp(&[("Q1", "YES")]), Strategy::Q1).unwrap();
        assert_eq!(v.ppe_status(), PpeStatus::Wearing);
        let v = classify_ppe(&resp(&[("Q1", "The image shows a laboratory bench")]), Strategy::Q1).unwrap();
        assert!(v.hallucination);
        assert_eq!(v.ppe_status(), PpeStatus::NotWearing);
    }

    #[test]
    fn q4_majority_and_ties() {
        let r = resp(&[("Q4.1", "No."), ("Q4.2", "No"), ("Q4.3", "A white coat")]);
        assert_eq!(classify_ppe(&r, Strategy::Q4).unwrap().label, Label::Negative);
        // One vote each way after an unresolved answer: tie goes to wearing.
        let r = resp(&[("Q4.1", "It is hard to say"), ("Q4.2", "No"), ("Q4.3", "A white coat")]);
        assert_eq!(classify_ppe(&r, Strategy::Q4).unwrap().label, Label::Positive);
        let r = resp(&[("Q4.1", "No"), ("Q4.2", "Yes"), ("Q4.3", "A white coat")]);
        assert_eq!(classify_ppe_with(&r, Strategy::Q4, Q4Combine::Priority).unwrap().label, Label::Negative);
        let r = resp(&[("Q4.1", "maybe"), ("Q4.2", "unclear"), ("Q4.3", "  ")]);
        assert!(classify_ppe(&r, Strategy::Q4).unwrap().hallucination);
    }

    #[test]
    fn missing_response_is_an_error() {
        let r = resp(&[("Q4.1", "YES")]);
        assert_eq!(
            classify_ppe(&r, Strategy::Q4),
            Err(PerceptionError::MissingResponse("Q4.2".into()))
        );
        assert!(matches!(
            classify_posture(&resp(&[("Q1", "YES")]), Strategy::Q1),
            Err(PerceptionError::WrongDimension(..))
        ));
    }

    #[test]
    fn posture_rules() {
        let v = classify_posture(&resp(&[("Q9", "The person is kneeling on the floor")]), Strategy::Q9).unwrap();
        assert_eq!((v.posture(), v.matched_keyword), (Posture::Prone, Some("KNEELING")));
        let v = classify_posture(&resp(&[("Q7", "YES")]), Strategy::Q7).unwrap();
        assert_eq!(v.posture(), Posture::Upright);
        let v = classify_posture(&resp(&[("Q6", "NO")]), Strategy::Q6).unwrap();
        assert_eq!(v.posture(), Posture::Upright);
        let r = resp(&[("Q10.1", "NO"), ("Q10.2", "NO"), ("Q10.3", "crouching near a cabinet")]);
        assert_eq!(classify_posture(&r, Strategy::Q10).unwrap().posture(), Posture::Prone);
        let r = resp(&[("Q10.1", "I cannot tell"), ("Q10.2", "NO"), ("Q10.3", "walking to the bench")]);
        let v = classify_posture(&r, Strategy::Q10).unwrap();
        assert_eq!((v.posture(), v.hallucination), (Posture::Upright, false));
        let r = resp(&[("Q10.1", "I cannot tell"), ("Q10.2", "NO"), ("Q10.3", "a blurry picture")]);
        assert!(classify_posture(&r, Strategy::Q10).unwrap().hallucination);
    }

    #[test]
    fn debounce_rules() {
        use PpeStatus::*;
        assert_eq!(debounce(Unknown, &[NotWearing], 3), Unknown);
        assert_eq!(debounce(Unknown, &[NotWearing; 3], 3), NotWearing);
        let alternating: Vec<_> = (0..20).map(|i| if i % 2 == 0 { NotWearing } else { Wearing }).collect();
        assert_eq!(debounce(Unknown, &alternating, 3), Unknown);
        let mut d = Debouncer::new(Wearing, 1);
        assert_eq!(d.push(NotWearing), Some(NotWearing));
        assert_eq!(d.push(NotWearing), None);
    }
}
