use std::fs;

use labguard_core::coordinator::PolicyConfig;
use labguard_core::harness::{replay, ReplayOptions, Scenario, ScenarioError};
use labguard_core::model::{LabMap, MapError};
use labguard_core::vlm::{MockBackend, MockScript, ScriptEntry, ScriptReply};

#[test]
fn scenario_resolves_map_and_script_relative_to_itself() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc = LabMap::demo().to_document();
    doc.robots.truncate(2);
    fs::create_dir(dir.path().join("maps")).unwrap();
    fs::write(dir.path().join("maps/two_robots.json"), serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    let script = MockScript::new(vec![
        ScriptEntry::text("reposition/*/fire", "ROBOT1: [2], ROBOT2: [7]").with_latency(0.8),
        ScriptEntry::sequence("Q1", vec!["YES".into(), "NO".into()]),
        ScriptEntry::pick_listed("reposition/c3/accident"),
    ]);
    fs::write(dir.path().join("script.json"), script.to_json()).unwrap();
    let path = dir.path().join("run.jsonl");
    fs::write(
        &path,
        concat!(
            "{\"type\":\"header\",\"map\":\"maps/two_robots.json\",\"script\":\"script.json\",\"policy\":{\"countdown\":30}}\n",
            "{\"type\":\"thermal\",\"t\":2,\"zone\":\"T1\",\"reading\":75}\n",
            "{\"type\":\"end\",\"t\":10}\n",
        ),
    )
    .unwrap();

    let scenario = Scenario::load(&path).unwrap();
    let map = scenario.resolve_map(dir.path()).unwrap();
    assert_eq!(map.robots.len(), 2);
    let loaded = scenario.resolve_script(dir.path()).unwrap().unwrap();
    assert_eq!(loaded, script);
    assert!(matches!(loaded.entries[2].reply, ScriptReply::PickListedNodes));

    let out = replay(
        &scenario,
        map,
        PolicyConfig::default(),
        Box::new(MockBackend::new(loaded)),
        ReplayOptions::default(),
    )
    .unwrap();
    let moves = out.actions.iter().filter(|a| a.action.name() == "MoveTo").count();
    assert_eq!(moves, 2);
    assert!(out.action_log().lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));
}

#[test]
fn inline_scripts_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let inline = r#"{"type":"header","script":{"entries":[{"fingerprint":"Q1","response":"NO"}]}}"#;
    let s = Scenario::parse(inline).unwrap();
    let script = s.resolve_script(dir.path()).unwrap().unwrap();
    assert_eq!(script.entries[0].reply, ScriptReply::Text("NO".into()));

    let s = Scenario::parse(r#"{"type":"header","map":"absent.json"}"#).unwrap();
    match s.resolve_map(dir.path()) {
        Err(ScenarioError::Io { path, .. }) => assert!(path.ends_with("absent.json")),
        other => panic!("{:?}", other.map(|_| ())),
    }

    fs::write(dir.path().join("bad.json"), r#"{"width": 5}"#).unwrap();
    let s = Scenario::parse(r#"{"type":"header","map":"bad.json"}"#).unwrap();
    assert!(matches!(s.resolve_map(dir.path()), Err(ScenarioError::Map(MapError::Parse(_)))));

    fs::write(dir.path().join("script.json"), r#"{"entries":[{"fingerprint":"Q1"}]}"#).unwrap();
    let s = Scenario::parse(r#"{"type":"header","script":"script.json"}"#).unwrap();
    assert!(matches!(s.resolve_script(dir.path()), Err(ScenarioError::Script(_))));
}
