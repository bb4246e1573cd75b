//! The coordinator's event loop: a dedicated thread that owns the
//! coordinator, stamps queued inputs with the scaled clock, ticks it and
//! publishes every result to the hub.

use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use labguard_core::coordinator::{Action, ActionRecord, ConfigPatch, Coordinator, CoordinatorError, Event, Injection};
use labguard_core::notify::{DeliveryReceipt, NotificationPayload};
use tokio::sync::oneshot;
use tracing::{debug, warn};

use crate::hub::Hub;

/// Inputs that enter the coordinator queue; the engine assigns `t`.
#[derive(Debug, Clone)]
pub enum Input {
    Inject(Injection),
    Ack {
        incident_id: u64,
        operator: Option<String>,
        note: Option<String>,
    },
    Configure(ConfigPatch),
    Receipt(DeliveryReceipt),
}

pub type Reply = oneshot::Sender<Result<Vec<ActionRecord>, CoordinatorError>>;

pub enum Command {
    Submit(Input, Option<Reply>),
    RenderLive(oneshot::Sender<Vec<u8>>),
    Snapshot(u64, oneshot::Sender<Option<Vec<u8>>>),
    Shutdown,
}

/// Simulation time from wall time: `sim = anchor + real elapsed / scale`,
/// where the scale is real seconds per simulated second.
#[derive(Debug, Clone, Copy)]
pub struct SimClock {
    anchor_real: Instant,
    anchor_sim: f64,
    scale: f64,
}

impl SimClock {
    pub fn new(scale: f64) -> Self {
        Self {
            anchor_real: Instant::now(),
            anchor_sim: 0.0,
            scale,
        }
    }

    pub fn now(&self) -> f64 {
        self.anchor_sim + self.anchor_real.elapsed().as_secs_f64() / self.scale
    }

    pub fn rescale(&mut self, scale: f64) {
        if scale != self.scale {
            self.anchor_sim = self.now();
            self.anchor_real = Instant::now();
            self.scale = scale;
        }
    }

    /// Real time between ticks: one simulated second, kept between 5 ms and
    /// 250 ms.
    pub fn tick_period(&self) -> Duration {
        Duration::from_secs_f64(self.scale.clamp(0.005, 0.25))
    }
}

pub struct Engine {
    coordinator: Coordinator,
    clock: SimClock,
    hub: Arc<Hub>,
    webhook: Option<mpsc::Sender<NotificationPayload>>,
}

impl Engine {
    pub fn new(coordinator: Coordinator, hub: Arc<Hub>, webhook: Option<mpsc::Sender<NotificationPayload>>) -> Self {
        let clock = SimClock::new(coordinator.config().clock_scale);
        Self {
            coordinator,
            clock,
            hub,
            webhook,
        }
    }

    pub fn spawn(self, rx: mpsc::Receiver<Command>) -> thread::JoinHandle<()> {
        thread::Builder::new()
            .name("coordinator".into())
            .spawn(move || self.run(rx))
            .expect("spawn coordinator thread")
    }

    fn run(mut self, rx: mpsc::Receiver<Command>) {
        let mut last_tick = Instant::now();
        loop {
            let period = self.clock.tick_period();
            let wait = period.saturating_sub(last_tick.elapsed());
            match rx.recv_timeout(wait) {
                Ok(Command::Shutdown) | Err(RecvTimeoutError::Disconnected) => break,
                Ok(cmd) => self.command(cmd),
                Err(RecvTimeoutError::Timeout) => {}
            }
            if last_tick.elapsed() >= self.clock.tick_period() {
                last_tick = Instant::now();
                let t = self.clock.now();
                let _ = self.apply(Event::Tick { t });
            }
        }
        self.hub.close();
        debug!("coordinator loop stopped");
    }

    fn command(&mut self, cmd: Command) {
        match cmd {
            Command::Submit(input, reply) => {
                let t = self.clock.now();
                let event = match input {
                    Input::Inject(injection) => Event::Inject { t, injection },
                    Input::Ack {
                        incident_id,
                        operator,
                        note,
                    } => Event::Ack {
                        t,
                        incident_id,
                        operator,
                        note,
                    },
                    Input::Configure(patch) => Event::Configure { t, patch },
                    Input::Receipt(receipt) => Event::Receipt { t, receipt },
                };
                let result = self.apply(event);
                if let Some(reply) = reply {
                    let _ = reply.send(result);
                }
            }
            Command::RenderLive(reply) => {
                let _ = reply.send(self.coordinator.render_live());
            }
            Command::Snapshot(generation, reply) => {
                let _ = reply.send(self.coordinator.snapshot_png(generation).map(<[u8]>::to_vec));
            }
            Command::Shutdown => {}
        }
    }

    fn apply(&mut self, event: Event) -> Result<Vec<ActionRecord>, CoordinatorError> {
        let result = self.coordinator.handle(event);
        let records = match &result {
            Ok(r) => r.as_slice(),
            Err(e) => {
                debug!(error = %e, "event rejected");
                &[]
            }
        };
        for r in records {
            if let (Action::Notify { payload, .. }, Some(tx)) = (&r.action, &self.webhook) {
                if tx.send(payload.clone()).is_err() {
                    warn!(incident = payload.incident_id, "webhook worker is gone");
                }
            }
        }
        self.clock.rescale(self.coordinator.config().clock_scale);
        let state = serde_json::to_value(self.coordinator.state()).expect("state serializes");
        self.hub.publish(records, state, self.coordinator.config());
        result
    }
}
