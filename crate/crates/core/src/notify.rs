//! Incident notifications over a webhook, and verbal warnings on station
//! speakers.

use std::collections::BTreeSet;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::model::{HazardKind, Point2D, StationPose, XY};

/// Verbal reminders, cycled in order.
pub const WARNING_PHRASES: [&str; 3] = [
    "Your life matters, always wear PPE!",
    "Wearing PPE can save your life, wear it always",
    "PPE is your first line of protection, don't forget to wear it!",
];

pub const MANUAL_INTERVENTION: &str = "manual intervention required";

/// Webhook request body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NotificationPayload {
    pub incident_id: u64,
    pub kind: HazardKind,
    pub text: String,
    pub location: XY,
    pub snapshot_url: String,
    pub t: f64,
}

impl NotificationPayload {
    pub fn new(incident_id: u64, kind: HazardKind, text: String, location: Point2D, snapshot_url: String, t: f64) -> Self {
        Self {
            incident_id,
            kind,
            text,
            location: XY {
                x: location.x,
                y: location.y,
            },
            snapshot_url,
            t,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NotifyError {
    #[error("station {0} has no speakers")]
    NoSpeakers(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeakerEvent {
    pub station: String,
    pub phrase: String,
    pub t: f64,
}

/// Speaker event for an RGB-D station. Audio itself is not synthesized.
pub fn speak(station: &StationPose, phrase: &str, t: f64) -> Result<SpeakerEvent, NotifyError> {
    if !station.has_speakers() {
        return Err(NotifyError::NoSpeakers(station.id.clone()));
    }
    Ok(SpeakerEvent {
        station: station.id.clone(),
        phrase: phrase.to_string(),
        t,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub initial_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_delay: Duration::from_millis(250),
            max_delay: Duration::from_secs(5),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based), doubling each time.
    pub fn delay_for(&self, retry: u32) -> Duration {
        let factor = 2u32.saturating_pow(retry);
        self.initial_delay.saturating_mul(factor).min(self.max_delay)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum DeliveryReceipt {
    Delivered { incident_id: u64, attempts: u32 },
    Failed { incident_id: u64, attempts: u32, error: String },
    Duplicate { incident_id: u64 },
}

impl DeliveryReceipt {
    pub fn incident_id(&self) -> u64 {
        match self {
            DeliveryReceipt::Delivered { incident_id, .. }
            | DeliveryReceipt::Failed { incident_id, .. }
            | DeliveryReceipt::Duplicate { incident_id } => *incident_id,
        }
    }
}

pub trait WebhookTransport: Send {
    /// Posts the JSON body; returns the HTTP status or a transport error.
    fn post_json(&self, url: &str, payload: &NotificationPayload) -> Result<u16, String>;
}

pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(10))
    }
}

impl WebhookTransport for HttpTransport {
    fn post_json(&self, url: &str, payload: &NotificationPayload) -> Result<u16, String> {
        self.agent
            .post(url)
            .send_json(payload)
            .map(|r| r.status().as_u16())
            .map_err(|e| e.to_string())
    }
}

/// Delivers each incident at most once, retrying with exponential backoff.
pub struct WebhookNotifier<T = HttpTransport> {
    url: String,
    transport: T,
    retry: RetryPolicy,
    delivered: BTreeSet<u64>,
}

impl WebhookNotifier<HttpTransport> {
    pub fn http(url: impl Into<String>, retry: RetryPolicy) -> Self {
        Self::new(url, HttpTransport::default(), retry)
    }
}

impl<T: WebhookTransport> WebhookNotifier<T> {
    pub fn new(url: impl Into<String>, transport: T, retry: RetryPolicy) -> Self {
        Self {
            url: url.into(),
            transport,
            retry,
            delivered: BTreeSet::new(),
        }
    }

    pub fn deliver(&mut self, payload: &NotificationPayload) -> DeliveryReceipt {
        let incident_id = payload.incident_id;
        if self.delivered.contains(&incident_id) {
            return DeliveryReceipt::Duplicate { incident_id };
        }
        let mut last_error = String::new();
        for attempt in 0..=self.retry.max_retries {
            if attempt > 0 {
                thread::sleep(self.retry.delay_for(attempt - 1));
            }
            match self.transport.post_json(&self.url, payload) {
                Ok(status) if (200..300).contains(&status) => {
                    self.delivered.insert(incident_id);
                    debug!(incident_id, attempt, "notification delivered");
                    return DeliveryReceipt::Delivered {
                        incident_id,
                        attempts: attempt + 1,
                    };
                }
                Ok(status) => last_error = format!("HTTP {status}"),
                Err(e) => last_error = e,
            }
            warn!(incident_id, attempt, error = %last_error, "notification attempt failed");
        }
        DeliveryReceipt::Failed {
            incident_id,
            attempts: self.retry.max_retries + 1,
            error: last_error,
        }
    }
}

/// Runs deliveries on a background thread so callers never block on the
/// network. Each payload produces one receipt passed to `on_receipt`.
pub fn spawn_delivery_worker<T, F>(
    mut notifier: WebhookNotifier<T>,
    on_receipt: F,
) -> (mpsc::Sender<NotificationPayload>, thread::JoinHandle<()>)
where
    T: WebhookTransport + 'static,
    F: Fn(DeliveryReceipt) + Send + 'static,
{
    let (tx, rx) = mpsc::channel::<NotificationPayload>();
    let handle = thread::Builder::new()
        .name("webhook-delivery".into())
        .spawn(move || {
            for payload in rx {
                on_receipt(notifier.deliver(&payload));
            }
        })
        .expect("spawn delivery thread");
    (tx, handle)
}
