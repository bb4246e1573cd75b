use std::io::{BufRead, BufReader};
use std::sync::mpsc::{self, Receiver};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use axum::routing::post;
use axum::{Json, Router};
use labguard_core::coordinator::{Coordinator, PolicyConfig};
use labguard_core::model::LabMap;
use labguard_core::notify::RetryPolicy;
use labguard_core::vlm::{MockBackend, MockScript, ScriptEntry};
use labguard_gateway::{start, Gateway, GatewayConfig};
use serde_json::{json, Value};
use tokio::runtime::Runtime;

struct Served {
    rt: Runtime,
    gateway: Option<Gateway>,
    base: String,
}

impl Drop for Served {
    fn drop(&mut self) {
        if let Some(g) = self.gateway.take() {
            let _ = self.rt.block_on(g.shutdown());
        }
    }
}

fn serve_with(policy: PolicyConfig, webhook: Option<String>, rt: Runtime) -> Served {
    let backend = MockBackend::new(MockScript::new(vec![ScriptEntry::text(
        "reposition/*/*",
        "ROBOT1: [2], ROBOT2: [7], ROBOT3: [11]",
    )]));
    let coordinator = Coordinator::new(LabMap::demo(), policy, Box::new(backend)).unwrap();
    let config = GatewayConfig {
        port: 0,
        webhook,
        retry: RetryPolicy {
            max_retries: 1,
            initial_delay: Duration::from_millis(10),
            max_delay: Duration::from_millis(10),
        },
        ..GatewayConfig::default()
    };
    let gateway = rt.block_on(start(coordinator, config)).unwrap();
    let base = format!("http://{}", gateway.addr());
    Served {
        rt,
        gateway: Some(gateway),
        base,
    }
}

fn serve() -> Served {
    serve_with(PolicyConfig::default(), None, runtime())
}

fn runtime() -> Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .unwrap()
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

fn get(url: &str) -> (u16, Vec<u8>) {
    let mut r = agent().get(url).call().unwrap();
    let status = r.status().as_u16();
    (status, r.body_mut().read_to_vec().unwrap())
}

fn get_json(url: &str) -> Value {
    let (status, body) = get(url);
    assert_eq!(status, 200, "{url}");
    serde_json::from_slice(&body).unwrap()
}

fn send(method: &str, url: &str, body: &str) -> (u16, Value) {
    let a = agent();
    let req = match method {
        "POST" => a.post(url),
        "PATCH" => a.patch(url),
        _ => unreachable!(),
    };
    let mut r = req.header("content-type", "application/json").send(body).unwrap();
    let status = r.status().as_u16();
    (status, r.body_mut().read_json().unwrap_or(Value::Null))
}

#[derive(Debug, Clone)]
struct Msg {
    id: Option<u64>,
    event: String,
    data: Value,
}

fn subscribe(base: &str, last_event_id: Option<u64>) -> Receiver<Msg> {
    let mut req = agent().get(format!("{base}/events"));
    if let Some(id) = last_event_id {
        req = req.header("Last-Event-ID", id.to_string());
    }
    let response = req.call().unwrap();
    assert_eq!(response.status().as_u16(), 200);
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let reader = BufReader::new(response.into_body().into_reader());
        let mut msg = Msg {
            id: None,
            event: "message".into(),
            data: Value::Null,
        };
        for line in reader.lines() {
            let Ok(line) = line else { return };
            if line.is_empty() {
                if !msg.data.is_null() && tx.send(msg.clone()).is_err() {
                    return;
                }
                msg = Msg {
                    id: None,
                    event: "message".into(),
                    data: Value::Null,
                };
            } else if let Some(v) = line.strip_prefix("id:") {
                msg.id = v.trim().parse().ok();
            } else if let Some(v) = line.strip_prefix("event:") {
                msg.event = v.trim().to_string();
            } else if let Some(v) = line.strip_prefix("data:") {
                msg.data = serde_json::from_str(v.trim()).unwrap();
            }
        }
    });
    rx
}

/// Collects messages until `done` holds for one of them.
fn until(rx: &Receiver<Msg>, done: impl Fn(&Msg) -> bool) -> Vec<Msg> {
    let deadline = Instant::now() + Duration::from_secs(15);
    let mut seen = Vec::new();
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        let msg = rx.recv_timeout(left).unwrap_or_else(|_| panic!("timed out; saw {seen:#?}"));
        let stop = done(&msg);
        seen.push(msg);
        if stop {
            return seen;
        }
    }
}

fn action_names(msgs: &[Msg]) -> Vec<String> {
    msgs.iter()
        .filter(|m| m.event == "action")
        .map(|m| m.data["action"].as_str().unwrap().to_string())
        .collect()
}

fn is_action(m: &Msg, name: &str) -> bool {
    m.event == "action" && m.data["action"] == name
}

#[test]
fn fire_injection_streams_alarm_reposition_and_notify() {
    let s = serve();
    let rx = subscribe(&s.base, None);
    let first = rx.recv_timeout(Duration::from_secs(5)).unwrap();
    assert_eq!(first.event, "snapshot");
    assert_eq!(first.data["frozen"], false);

    let (status, body) = send("POST", &format!("{}/inject", s.base), r#"{"kind":"fire","target":"T1","value":60}"#);
    assert_eq!(status, 200, "{body}");
    let msgs = until(&rx, |m| is_action(m, "Notify"));
    let names = action_names(&msgs);
    let flow: Vec<&str> = names
        .iter()
        .map(String::as_str)
        .filter(|n| ["Alarm", "Prompt", "Parse", "Validate", "MoveTo", "Notify"].contains(n))
        .collect();
    assert_eq!(flow, ["Alarm", "Prompt", "Parse", "Validate", "MoveTo", "MoveTo", "MoveTo", "Notify"]);

    // ids are gapless after the snapshot position
    let mut expected = first.id.unwrap() + 1;
    for m in &msgs {
        assert_eq!(m.id, Some(expected), "{m:?}");
        expected += 1;
    }

    let notify = msgs.iter().find(|m| is_action(m, "Notify")).unwrap();
    let url = notify.data["detail"]["payload"]["snapshot_url"].as_str().unwrap();
    assert!(url.starts_with(&s.base), "{url}");
    let (status, png) = get(url);
    assert_eq!(status, 200);
    assert!(png.starts_with(b"\x89PNG"));

    let state = get_json(&format!("{}/state", s.base));
    assert_eq!(state["zones"][0]["alarmed"], true);
    assert!(state["seq"].as_u64().unwrap() >= notify.id.unwrap());
}

#[test]
fn ppe_injection_shows_yellow_worker() {
    let s = serve();
    let (status, _) = send("POST", &format!("{}/inject", s.base), r#"{"kind":"ppe","target":"W1","x":2.5,"y":3.0}"#);
    assert_eq!(status, 200);
    let state = get_json(&format!("{}/state", s.base));
    let w = state["workers"].as_array().unwrap().iter().find(|w| w["id"] == "W1").unwrap();
    assert_eq!(w["color"], "yellow");
    assert_eq!(state["frozen"], true);
    let inc = &state["incidents"][0];
    assert_eq!(inc["state"], "countdown_running");

    let (status, body) = send("POST", &format!("{}/ack", s.base), &json!({"incident_id": inc["id"], "operator": "ana"}).to_string());
    assert_eq!(status, 200, "{body}");
    assert_eq!(body["actions"][0]["action"], "Ack");
    let state = get_json(&format!("{}/state", s.base));
    assert_eq!(state["incidents"][0]["acknowledged"], true);
}

#[test]
fn patched_countdown_escalates_on_the_scaled_clock() {
    let s = serve();
    let (status, config) = send("PATCH", &format!("{}/config", s.base), r#"{"countdown":5,"clock_scale":0.02}"#);
    assert_eq!(status, 200);
    assert_eq!(config["countdown"], 5.0);
    assert_eq!(get_json(&format!("{}/config", s.base))["clock_scale"], 0.02);

    let rx = subscribe(&s.base, None);
    let (_, body) = send("POST", &format!("{}/inject", s.base), r#"{"kind":"ppe","target":"W1","x":2.5,"y":3.0}"#);
    let started = body["actions"].as_array().unwrap().iter().find(|a| a["action"] == "Freeze").unwrap()["t"]
        .as_f64()
        .unwrap();
    let msgs = until(&rx, |m| is_action(m, "Notify"));
    let notify = msgs.last().unwrap();
    assert_eq!(notify.data["detail"]["escalation"], true);
    let waited = notify.data["t"].as_f64().unwrap() - started;
    // one simulated second between ticks at this scale
    assert!((5.0..=6.5).contains(&waited), "escalated after {waited}");
}

#[test]
fn bad_requests_map_to_422_and_unknown_targets_to_404() {
    let s = serve();
    let inject = format!("{}/inject", s.base);
    for body in [
        "not json",
        r#"{"kind":"flood","target":"T1"}"#,
        r#"{"kind":"fire"}"#,
        r#"{"kind":"fire","target":"T1","value":"hot"}"#,
        r#"{"kind":"fire","target":"T1","colour":"red"}"#,
    ] {
        let (status, err) = send("POST", &inject, body);
        assert_eq!(status, 422, "{body}");
        assert!(err["error"].as_str().is_some_and(|e| !e.is_empty()));
    }
    assert_eq!(send("POST", &inject, r#"{"kind":"fire","target":"T9","value":70}"#).0, 404);
    assert_eq!(send("POST", &inject, r#"{"kind":"ppe","target":"W7"}"#).0, 404);

    let config = format!("{}/config", s.base);
    assert_eq!(send("PATCH", &config, r#"{"countdown":-1}"#).0, 422);
    assert_eq!(send("PATCH", &config, r#"{"tempo":3}"#).0, 422);
    assert_eq!(get_json(&config)["countdown"], 600.0);

    let ack = format!("{}/ack", s.base);
    assert_eq!(send("POST", &ack, r#"{"incident_id":42}"#).0, 404);
    assert_eq!(send("POST", &ack, r#"{"incident":42}"#).0, 422);

    assert_eq!(get(&format!("{}/snapshots/7.png", s.base)).0, 404);
    assert_eq!(get(&format!("{}/snapshots/seven.png", s.base)).0, 404);
    let (status, png) = get(&format!("{}/map.png", s.base));
    assert_eq!(status, 200);
    assert!(png.starts_with(b"\x89PNG"));
    let map = get_json(&format!("{}/map", s.base));
    assert_eq!(map["nodes"].as_array().unwrap().len(), 12);
}

#[test]
fn stream_resumes_after_last_event_id() {
    let s = serve();
    let inject = format!("{}/inject", s.base);
    let rx = subscribe(&s.base, None);
    let start = rx.recv_timeout(Duration::from_secs(5)).unwrap().id.unwrap();
    send("POST", &inject, r#"{"kind":"ppe","target":"W1","x":2.5,"y":3.0}"#);
    let first = until(&rx, |m| is_action(m, "Meeple"));
    drop(rx);
    let resume_from = first[0].id.unwrap();
    assert_eq!(resume_from, start + 1);
    send("POST", &inject, r#"{"kind":"accident","target":"W2","x":9.5,"y":5.0}"#);

    let rx = subscribe(&s.base, Some(resume_from));
    let msgs = until(&rx, |m| m.event == "action" && m.data["action"] == "Meeple" && m.data["detail"]["worker"] == "W2");
    assert!(msgs.iter().all(|m| m.event != "snapshot"));
    let ids: Vec<u64> = msgs.iter().map(|m| m.id.unwrap()).collect();
    let contiguous: Vec<u64> = (resume_from + 1..resume_from + 1 + ids.len() as u64).collect();
    assert_eq!(ids, contiguous);
    let names = action_names(&msgs);
    assert!(names.contains(&"Warn".to_string()) && names.iter().filter(|n| *n == "Meeple").count() == 2, "{names:?}");

    // a position past the head falls back to a fresh snapshot
    let rx = subscribe(&s.base, Some(1_000_000));
    assert_eq!(rx.recv_timeout(Duration::from_secs(5)).unwrap().event, "snapshot");
}

#[test]
fn notifications_reach_the_webhook_once() {
    let rt = runtime();
    let received: Arc<Mutex<Vec<Value>>> = Arc::default();
    let sink = received.clone();
    let hook = rt.block_on(async move {
        let app = Router::new().route(
            "/hook",
            post(move |Json(body): Json<Value>| {
                let sink = sink.clone();
                async move {
                    sink.lock().unwrap().push(body);
                    "ok"
                }
            }),
        );
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move { axum::serve(listener, app).await });
        format!("http://{addr}/hook")
    });
    let s = serve_with(PolicyConfig::default(), Some(hook), rt);
    let rx = subscribe(&s.base, None);
    send("POST", &format!("{}/inject", s.base), r#"{"kind":"fire","target":"T1","value":80}"#);
    let msgs = until(&rx, |m| is_action(m, "Delivered"));
    let delivered = msgs.last().unwrap();
    assert_eq!(delivered.data["detail"]["attempts"], 1);
    let bodies = received.lock().unwrap().clone();
    assert_eq!(bodies.len(), 1);
    let body = &bodies[0];
    assert_eq!(body["kind"], "fire");
    assert_eq!(body["incident_id"], delivered.data["incident_id"]);
    assert_eq!(body["location"], json!({"x": 6.5, "y": 1.0}));
    assert!(body["snapshot_url"].as_str().unwrap().ends_with(".png"));
}
