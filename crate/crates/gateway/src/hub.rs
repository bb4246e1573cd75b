//! Sequenced fan-out of action records and state deltas to stream clients,
//! with a bounded backlog for reconnect-and-resume.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex, MutexGuard};

use labguard_core::coordinator::{ActionRecord, PolicyConfig};
use serde_json::{Map, Value};
use tokio::sync::broadcast;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Action,
    State,
}

impl StreamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StreamKind::Action => "action",
            StreamKind::State => "state",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamEvent {
    pub seq: u64,
    pub kind: StreamKind,
    pub data: String,
}

/// What a new subscriber receives before live events.
#[derive(Debug)]
pub struct Subscription {
    /// Full state when the client is new or asked for events that have
    /// already left the backlog.
    pub snapshot: Option<String>,
    pub backlog: Vec<Arc<StreamEvent>>,
    pub receiver: broadcast::Receiver<Arc<StreamEvent>>,
    pub last_seq: u64,
}

struct Inner {
    seq: u64,
    ring: VecDeque<Arc<StreamEvent>>,
    capacity: usize,
    tx: Option<broadcast::Sender<Arc<StreamEvent>>>,
    state: Value,
    config: PolicyConfig,
}

pub struct Hub {
    inner: Mutex<Inner>,
}

impl Hub {
    pub fn new(state: Value, config: PolicyConfig, capacity: usize) -> Self {
        let capacity = capacity.max(1);
        let (tx, _) = broadcast::channel(capacity.min(1024));
        Self {
            inner: Mutex::new(Inner {
                seq: 0,
                ring: VecDeque::with_capacity(capacity),
                capacity,
                tx: Some(tx),
                state,
                config,
            }),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Publishes the records, then the changed part of `state`, and makes
    /// `state` the current snapshot.
    pub fn publish(&self, records: &[ActionRecord], state: Value, config: &PolicyConfig) {
        let mut inner = self.lock();
        for r in records {
            inner.push(StreamKind::Action, r.to_json_line());
        }
        if let Some(delta) = state_delta(&inner.state, &state) {
            inner.push(StreamKind::State, delta.to_string());
        }
        inner.state = state;
        if inner.config != *config {
            inner.config = config.clone();
        }
    }

    pub fn state(&self) -> (u64, Value) {
        let inner = self.lock();
        (inner.seq, inner.state.clone())
    }

    pub fn config(&self) -> PolicyConfig {
        self.lock().config.clone()
    }

    pub fn seq(&self) -> u64 {
        self.lock().seq
    }

    /// Subscribes, resuming after `last_event_id` when the backlog still
    /// holds everything since then.
    pub fn subscribe(&self, last_event_id: Option<u64>) -> Option<Subscription> {
        let inner = self.lock();
        let receiver = inner.tx.as_ref()?.subscribe();
        let oldest = inner.ring.front().map(|e| e.seq).unwrap_or(inner.seq + 1);
        let resumable = last_event_id.filter(|&id| id <= inner.seq && id + 1 >= oldest);
        Some(match resumable {
            Some(id) => Subscription {
                snapshot: None,
                backlog: inner.ring.iter().filter(|e| e.seq > id).cloned().collect(),
                receiver,
                last_seq: id,
            },
            None => Subscription {
                snapshot: Some(inner.snapshot_json()),
                backlog: Vec::new(),
                receiver,
                last_seq: inner.seq,
            },
        })
    }

    /// Ends every open stream.
    pub fn close(&self) {
        self.lock().tx = None;
    }
}

impl Inner {
    fn push(&mut self, kind: StreamKind, data: String) {
        self.seq += 1;
        let event = Arc::new(StreamEvent {
            seq: self.seq,
            kind,
            data,
        });
        if self.ring.len() == self.capacity {
            self.ring.pop_front();
        }
        self.ring.push_back(event.clone());
        if let Some(tx) = &self.tx {
            // no receivers is fine
            let _ = tx.send(event);
        }
    }

    fn snapshot_json(&self) -> String {
        with_seq(self.seq, self.state.clone()).to_string()
    }
}

/// Adds the stream position to a state object.
pub fn with_seq(seq: u64, state: Value) -> Value {
    match state {
        Value::Object(mut m) => {
            m.insert("seq".into(), Value::from(seq));
            Value::Object(m)
        }
        other => other,
    }
}

/// Top-level fields of `next` that differ from `prev`, plus `t`. `None` when
/// only the clock moved.
pub fn state_delta(prev: &Value, next: &Value) -> Option<Value> {
    let (Value::Object(prev), Value::Object(next)) = (prev, next) else {
        return Some(next.clone());
    };
    let mut delta = Map::new();
    for (k, v) in next {
        if k != "t" && prev.get(k) != Some(v) {
            delta.insert(k.clone(), v.clone());
        }
    }
    if delta.is_empty() {
        return None;
    }
    if let Some(t) = next.get("t") {
        delta.insert("t".into(), t.clone());
    }
    Some(Value::Object(delta))
}
