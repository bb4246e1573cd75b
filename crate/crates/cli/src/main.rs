use std::fs;
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use labguard_core::coordinator::{ConfigPatch, Coordinator, PolicyConfig};
use labguard_core::harness::{
    replay, run_reposition_trials, HallucinationMode, MetricsReport, ReplayOptions, Scenario, TrialOptions,
};
use labguard_core::model::{load_map, HazardKind, LabMap};
use labguard_core::vlm::{Condition, LiveBackend, LiveConfig, MockBackend, MockScript, ParseMode, ScriptEntry, VlmBackend};
use labguard_gateway::{GatewayConfig, DEFAULT_PORT};

#[derive(Parser)]
#[command(name = "labguard", version, about = "Safety orchestration for self-driving labs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a JSON-lines scenario and grade its labelled frames.
    Replay(ReplayArgs),
    /// Run independent reposition trials against a backend.
    Trials(TrialArgs),
    /// Run the coordinator live behind the HTTP gateway.
    Serve(ServeArgs),
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Map file, or `demo`; overrides the scenario header.
    #[arg(long)]
    map: Option<String>,
    /// Mock script; overrides the scenario header.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Policy file (JSON), applied before the scenario's own overrides.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Multiple of the scaled clock; 0 replays as fast as possible.
    #[arg(long, default_value_t = 0.0)]
    speed: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Metrics report (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Action log (JSON lines).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Leave hallucinated frames out of the accuracy denominator.
    #[arg(long)]
    exclude_hallucinations: bool,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConditionArg {
    C1,
    C2,
    C3,
}

impl From<ConditionArg> for Condition {
    fn from(c: ConditionArg) -> Self {
        match c {
            ConditionArg::C1 => Condition::C1,
            ConditionArg::C2 => Condition::C2,
            ConditionArg::C3 => Condition::C3,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum HazardArg {
    Fire,
    Accident,
    Ppe,
}

impl From<HazardArg> for HazardKind {
    fn from(h: HazardArg) -> Self {
        match h {
            HazardArg::Fire => HazardKind::Fire,
            HazardArg::Accident => HazardKind::Accident,
            HazardArg::Ppe => HazardKind::PpeViolation,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum BackendArg {
    Mock,
    Live,
}

#[derive(Args)]
struct BackendOpts {
    #[arg(long, value_enum, default_value = "mock")]
    backend: BackendArg,
    /// Mock script (JSON).
    #[arg(long)]
    script: Option<PathBuf>,
    /// Generate endpoint of the live model server.
    #[arg(long, default_value = "http://127.0.0.1:11434/api/generate")]
    endpoint: String,
    #[arg(long, default_value = "llava-phi3")]
    model: String,
    /// Live request timeout in seconds.
    #[arg(long, default_value_t = 60.0)]
    timeout: f64,
}

#[derive(Args)]
struct TrialArgs {
    #[arg(long, value_enum, default_value = "c3")]
    condition: ConditionArg,
    #[arg(long, value_enum, default_value = "fire")]
    hazard: HazardArg,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[command(flatten)]
    backend: BackendOpts,
    /// Map file, or `demo`.
    #[arg(long, default_value = "demo")]
    map: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Accept only the canonical reply format.
    #[arg(long)]
    strict_parse: bool,
    #[arg(long)]
    hazard_radius: Option<f64>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    bind: IpAddr,
    #[arg(long, default_value_t = DEFAULT_PORT)]
    port: u16,
    /// Map file, or `demo`.
    #[arg(long, default_value = "demo")]
    map: String,
    #[arg(long)]
    policy: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendOpts,
    /// Incident notifications are POSTed here.
    #[arg(long, env = "LABGUARD_WEBHOOK")]
    webhook: Option<String>,
    /// Real seconds per simulated second.
    #[arg(long)]
    clock_scale: Option<f64>,
    /// PPE countdown in simulated seconds.
    #[arg(long)]
    countdown: Option<f64>,
    #[arg(long, value_enum)]
    condition: Option<ConditionArg>,
}

type Fallible<T> = Result<T, String>;

fn read(path: &Path) -> Fallible<String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn open_map(spec: &str) -> Fallible<LabMap> {
    if spec == "demo" {
        return Ok(LabMap::demo());
    }
    load_map(&read(Path::new(spec))?).map_err(|e| format!("{spec}: {e}"))
}

fn open_policy(path: Option<&Path>) -> Fallible<PolicyConfig> {
    let Some(path) = path else {
        return Ok(PolicyConfig::default());
    };
    let patch: ConfigPatch = serde_json::from_str(&read(path)?).map_err(|e| format!("{}: {e}", path.display()))?;
    patch.apply(&PolicyConfig::default()).map_err(|e| format!("{}: {e}", path.display()))
}

fn open_script(path: &Path) -> Fallible<MockScript> {
    MockScript::from_json(&read(path)?).map_err(|e| format!("{}: {e}", path.display()))
}

fn backend(opts: &BackendOpts, default_script: impl FnOnce() -> MockScript) -> Fallible<Box<dyn VlmBackend>> {
    match opts.backend {
        BackendArg::Live => {
            if !(opts.timeout.is_finite() && opts.timeout > 0.0) {
                return Err("--timeout must be positive".into());
            }
            Ok(Box::new(LiveBackend::new(LiveConfig {
                endpoint: opts.endpoint.clone(),
                model: opts.model.clone(),
                timeout: Duration::from_secs_f64(opts.timeout),
            })))
        }
        BackendArg::Mock => {
            let script = match &opts.script {
                Some(p) => open_script(p)?,
                None => default_script(),
            };
            Ok(Box::new(MockBackend::new(script)))
        }
    }
}

fn write(path: &Path, contents: &str) -> Fallible<()> {
    fs::write(path, contents).map_err(|e| format!("{}: {e}", path.display()))
}

fn emit(report: &MetricsReport, path: Option<&Path>, json: bool) -> Fallible<()> {
    if let Some(p) = path {
        write(p, &report.to_json())?;
    }
    if json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn run_replay(args: ReplayArgs) -> Fallible<()> {
    if !(args.speed.is_finite() && args.speed >= 0.0) {
        return Err("--speed must be zero or positive".into());
    }
    let scenario = Scenario::load(&args.scenario).map_err(|e| format!("{}: {e}", args.scenario.display()))?;
    let base = args.scenario.parent().unwrap_or(Path::new("."));
    let located = |e: labguard_core::harness::ScenarioError| format!("{}: {e}", args.scenario.display());
    let map = match &args.map {
        Some(m) => open_map(m)?,
        None => scenario.resolve_map(base).map_err(located)?,
    };
    let script = match &args.script {
        Some(p) => open_script(p)?,
        None => scenario.resolve_script(base).map_err(located)?.unwrap_or_default(),
    };
    let policy = open_policy(args.policy.as_deref())?;
    let options = ReplayOptions {
        speed: args.speed,
        seed: args.seed,
        mode: if args.exclude_hallucinations {
            HallucinationMode::Excluded
        } else {
            HallucinationMode::CountIncorrect
        },
        ..ReplayOptions::default()
    };
    let out = replay(&scenario, map, policy, Box::new(MockBackend::new(script)), options).map_err(located)?;
    if let Some(p) = &args.log {
        write(p, &out.action_log())?;
    }
    emit(&out.report, args.report.as_deref(), args.json)
}

fn run_trials(args: TrialArgs) -> Fallible<()> {
    if args.n == 0 {
        return Err("--n must be at least 1".into());
    }
    let map = open_map(&args.map)?;
    let mut backend = backend(&args.backend, MockScript::default)?;
    let mut options = TrialOptions {
        seed: args.seed,
        parse_mode: if args.strict_parse {
            ParseMode::Strict
        } else {
            ParseMode::Tolerant
        },
        ..TrialOptions::default()
    };
    if let Some(r) = args.hazard_radius {
        if !(r.is_finite() && r > 0.0) {
            return Err("--hazard-radius must be positive".into());
        }
        options.safety.hazard_radius = r;
    }
    let summary = run_reposition_trials(
        &map,
        args.condition.into(),
        args.hazard.into(),
        args.n,
        backend.as_mut(),
        options,
    );
    let report = MetricsReport {
        seed: Some(args.seed),
        trials: Some(summary),
        ..MetricsReport::default()
    };
    emit(&report, args.report.as_deref(), args.json)
}

fn run_serve(args: ServeArgs) -> Fallible<()> {
    let map = open_map(&args.map)?;
    let patch = ConfigPatch {
        clock_scale: args.clock_scale,
        countdown: args.countdown,
        prompt_condition: args.condition.map(Into::into),
        ..ConfigPatch::default()
    };
    let policy = patch.apply(&open_policy(args.policy.as_deref())?)?;
    let backend = backend(&args.backend, || {
        MockScript::new(vec![ScriptEntry::pick_listed("reposition/*/*")])
    })?;
    let coordinator = Coordinator::new(map, policy, backend).map_err(|e| e.to_string())?;
    let config = GatewayConfig {
        bind: args.bind,
        port: args.port,
        webhook: args.webhook,
        ..GatewayConfig::default()
    };
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    rt.block_on(async {
        let gateway = labguard_gateway::start(coordinator, config).await.map_err(|e| e.to_string())?;
        println!("listening on http://{}", gateway.addr());
        tokio::signal::ctrl_c().await.map_err(|e| e.to_string())?;
        gateway.shutdown().await.map_err(|e| e.to_string())
    })
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Replay(a) => run_replay(a),
        Command::Trials(a) => run_trials(a),
        Command::Serve(a) => run_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
