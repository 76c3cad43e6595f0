use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use chaoskit_core::audit::{verify, AuditChain, VerifyOutcome};
use chaoskit_core::catalog::{self, CatalogError};
use chaoskit_core::hypothesis::MetricSource;
use chaoskit_core::injection::{Driver, DriverCapabilities};
use chaoskit_core::maturity::{assess_maturity, parse_backlog, prioritize_backlog, RunHistoryEntry};
use chaoskit_core::model::{Experiment, RouteConfig};
use chaoskit_core::netproxy::{proxy_capabilities, start_proxy, ProbeSource, ProxyDriver, ProxyRoute};
use chaoskit_core::orchestrator::{run_experiment, ExperimentResult, RunOptions};
use chaoskit_core::parse::{canonical_json, parse_document, parse_experiment};
use chaoskit_core::report::{render_report, ReportFormat};
use chaoskit_core::sim::{share, SimDriver, SimSource, Topology, World};
use chaoskit_core::store::{ResultStore, RunFilter, StoreError};
use chaoskit_core::validate::{validate_experiment, ValidationPolicy};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

const EXIT_INVALID: u8 = 3;
const EXIT_DRIVER: u8 = 4;
const EXIT_INTERNAL: u8 = 5;

#[derive(Parser)]
#[command(name = "chaoskit", version, about = "Run and audit chaos experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DriverKind {
    Sim,
    Proxy,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Md,
}

#[derive(Subcommand)]
enum Command {
    /// Check an experiment against a driver's capabilities.
    Validate {
        experiment: PathBuf,
        #[arg(long, value_enum, default_value = "sim")]
        driver: DriverKind,
    },
    /// Execute an experiment and store the result, audit chain and report.
    Run {
        experiment: PathBuf,
        #[arg(long, value_enum, default_value = "sim")]
        driver: DriverKind,
        #[arg(long)]
        topology: Option<PathBuf>,
        #[arg(long)]
        routes: Option<PathBuf>,
        #[arg(long, env = "CHAOS_STORE")]
        store: Option<PathBuf>,
    },
    /// Standalone simulator.
    Sim {
        #[command(subcommand)]
        command: SimCommand,
    },
    /// Built-in scenario catalog.
    Catalog {
        #[command(subcommand)]
        command: CatalogCommand,
    },
    /// Render the report of a stored run.
    Report {
        run_id: String,
        #[arg(long, env = "CHAOS_STORE")]
        store: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "md")]
        format: Format,
    },
    /// Audit chain tools.
    Audit {
        #[command(subcommand)]
        command: AuditCommand,
    },
    /// Weakness backlog tools.
    Backlog {
        #[command(subcommand)]
        command: BacklogCommand,
    },
    /// Assess maturity from the runs in a store.
    Maturity {
        #[arg(long, env = "CHAOS_STORE")]
        store: Option<PathBuf>,
    },
    /// Re-execute a stored sim run and compare trace digests.
    Replay {
        run_id: String,
        #[arg(long, env = "CHAOS_STORE")]
        store: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum SimCommand {
    Run {
        #[arg(long)]
        topology: PathBuf,
        #[arg(long)]
        duration_ms: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CatalogCommand {
    List,
    Show {
        id: String,
    },
    /// Instantiate a scenario as an experiment document.
    New {
        id: String,
        /// `name=value`, repeatable.
        #[arg(long = "param", value_name = "K=V")]
        params: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum AuditCommand {
    Verify { chain: PathBuf },
}

#[derive(Subcommand)]
enum BacklogCommand {
    Prioritize { file: PathBuf },
}

/// A failed command: exit code plus a message for stderr.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn invalid(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_INVALID,
            message: message.into(),
        }
    }

    fn driver(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_DRIVER,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_INTERNAL,
            message: message.into(),
        }
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownRun(_) => Failure::invalid(e.to_string()),
            _ => Failure::internal(e.to_string()),
        }
    }
}

type Outcome = Result<u8, Failure>;

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

fn load_experiment(path: &Path) -> Result<Experiment, Failure> {
    parse_experiment(&read(path)?).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

fn load_topology(path: &Path) -> Result<Topology, Failure> {
    parse_document(&read(path)?).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

fn open_store(store: Option<PathBuf>) -> Result<ResultStore, Failure> {
    let root = store.ok_or_else(|| Failure::invalid("no store: pass --store or set CHAOS_STORE"))?;
    Ok(ResultStore::open(root)?)
}

fn print_json<T: serde::Serialize + ?Sized>(value: &T) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(&canonical_json(value));
    let _ = out.write_all(b"\n");
}

fn now_us() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_micros() as u64)
}

fn capabilities(kind: DriverKind) -> DriverCapabilities {
    match kind {
        DriverKind::Sim => DriverCapabilities::all_kinds(),
        DriverKind::Proxy => proxy_capabilities(),
    }
}

fn validate(path: &Path, driver: DriverKind) -> Outcome {
    let exp = load_experiment(path)?;
    let report = validate_experiment(&exp, &capabilities(driver), &ValidationPolicy::default());
    print_json(&report);
    Ok(if report.passed { 0 } else { EXIT_INVALID })
}

fn sim_run(exp: &Experiment, topology: Topology, started_at_us: u64) -> Result<(ExperimentResult, AuditChain), Failure> {
    let world = World::build(topology.clone(), exp.seed).map_err(|e| Failure::invalid(format!("topology: {e}")))?;
    let world = share(world);
    let mut driver = SimDriver::new(world.clone());
    let mut source = SimSource::new(world);
    let mut audit = AuditChain::in_memory();
    let opts = RunOptions {
        started_at_us,
        ..RunOptions::default()
    };
    let mut result = run_experiment(exp, &mut driver, &mut source, &mut audit, opts);
    result.topology = Some(topology);
    Ok((result, audit))
}

fn proxy_run(exp: &Experiment, routes: Vec<RouteConfig>, started_at_us: u64) -> Result<(ExperimentResult, AuditChain), Failure> {
    let proxy = start_proxy(routes.iter().map(ProxyRoute::from).collect()).map_err(|e| Failure::driver(e.to_string()))?;
    let mut targets: BTreeMap<String, SocketAddr> = BTreeMap::new();
    for r in &routes {
        let addr = proxy.listen_addr(&r.name).map_err(|e| Failure::driver(e.to_string()))?;
        targets.insert(r.name.clone(), addr);
        targets.entry(exp.target.service.clone()).or_insert(addr);
    }
    let mut driver = ProxyDriver::new(proxy, exp.target.service.clone());
    let mut source = ProbeSource::new(targets);
    let mut audit = AuditChain::in_memory();
    let opts = RunOptions {
        started_at_us,
        ..RunOptions::default()
    };
    let result = run_experiment(exp, &mut driver, &mut source as &mut dyn MetricSource, &mut audit, opts);
    let _ = driver.revert_all();
    Ok((result, audit))
}

fn run(
    path: &Path,
    driver: DriverKind,
    topology: Option<PathBuf>,
    routes: Option<PathBuf>,
    store: Option<PathBuf>,
) -> Outcome {
    let exp = load_experiment(path)?;
    let store = open_store(store)?;
    let started = now_us();
    let (result, audit) = match driver {
        DriverKind::Sim => {
            let topo = topology.ok_or_else(|| Failure::invalid("--driver sim needs --topology"))?;
            sim_run(&exp, load_topology(&topo)?, started)?
        }
        DriverKind::Proxy => {
            let routes = match (routes, &exp.target.routes) {
                (Some(file), _) => parse_document::<Vec<RouteConfig>>(&read(&file)?)
                    .map_err(|e| Failure::invalid(format!("{}: {e}", file.display())))?,
                (None, Some(r)) => r.clone(),
                (None, None) => return Err(Failure::invalid("--driver proxy needs --routes or target.routes")),
            };
            proxy_run(&exp, routes, started)?
        }
    };
    let run_id = store.save(&result, Some(&audit.to_jsonl()))?;
    let md = store.write_report(&run_id, "md", render_report(&result, ReportFormat::Markdown).as_bytes())?;
    store.write_report(&run_id, "json", render_report(&result, ReportFormat::Json).as_bytes())?;
    let code = result.status.exit_code() as u8;
    print_json(&json!({
        "run_id": run_id,
        "status": result.status,
        "exit_code": code,
        "report": md.display().to_string(),
        "audit_head": result.audit_head,
        "trace_digest": result.trace_digest,
    }));
    Ok(code)
}

fn sim_standalone(topology: &Path, duration_ms: u64, seed: u64, out: Option<PathBuf>) -> Outcome {
    let mut world =
        World::build(load_topology(topology)?, seed).map_err(|e| Failure::invalid(format!("topology: {e}")))?;
    world.run(duration_ms);
    let trace = world.trace();
    if let Some(out) = out {
        fs::write(&out, trace.to_jsonl()).map_err(|e| Failure::internal(format!("{}: {e}", out.display())))?;
    }
    print_json(&json!({
        "events": trace.len(),
        "end_us": world.now_us(),
        "summary": trace.summary(),
        "digest": trace.digest(),
    }));
    Ok(0)
}

fn catalog_failure(e: CatalogError) -> Failure {
    Failure::invalid(e.to_string())
}

fn catalog_cmd(cmd: CatalogCommand) -> Outcome {
    match cmd {
        CatalogCommand::List => {
            let rows: Vec<_> = catalog::list_scenarios()
                .into_iter()
                .map(|s| json!({ "id": s.id, "title": s.title, "description": s.description }))
                .collect();
            print_json(&rows);
        }
        CatalogCommand::Show { id } => print_json(&catalog::scenario(&id).map_err(catalog_failure)?),
        CatalogCommand::New { id, params, out } => {
            let mut map = BTreeMap::new();
            for p in params {
                let (k, v) = p
                    .split_once('=')
                    .ok_or_else(|| Failure::invalid(format!("--param `{p}` is not name=value")))?;
                map.insert(k.to_string(), v.to_string());
            }
            let exp = catalog::instantiate(&id, &map).map_err(catalog_failure)?;
            match out {
                Some(path) => {
                    fs::write(&path, canonical_json(&exp))
                        .map_err(|e| Failure::internal(format!("{}: {e}", path.display())))?;
                }
                None => print_json(&exp),
            }
        }
    }
    Ok(0)
}

fn report(run_id: &str, store: Option<PathBuf>, format: Format) -> Outcome {
    let store = open_store(store)?;
    let result = store.load(run_id)?;
    let format = match format {
        Format::Json => ReportFormat::Json,
        Format::Md => ReportFormat::Markdown,
    };
    let body = render_report(&result, format);
    print!("{body}");
    if !body.ends_with('\n') {
        println!();
    }
    Ok(0)
}

fn audit_verify(chain: &Path) -> Outcome {
    let bytes = fs::read(chain).map_err(|e| Failure::invalid(format!("{}: {e}", chain.display())))?;
    let outcome = verify(&bytes);
    print_json(&outcome);
    Ok(match outcome {
        VerifyOutcome::Ok { .. } => 0,
        VerifyOutcome::Tampered { .. } => 1,
    })
}

fn backlog(file: &Path) -> Outcome {
    let entries = parse_backlog(&read(file)?).map_err(|e| Failure::invalid(e.to_string()))?;
    let ranked: Vec<_> = prioritize_backlog(entries)
        .into_iter()
        .map(|e| json!({ "score": e.score(), "entry": e }))
        .collect();
    print_json(&ranked);
    Ok(0)
}

fn maturity(store: Option<PathBuf>) -> Outcome {
    let store = open_store(store)?;
    let mut history = Vec::new();
    for summary in store.query(&RunFilter::default())? {
        history.push(RunHistoryEntry::from_result(&store.load(&summary.run_id)?));
    }
    print_json(&assess_maturity(&history));
    Ok(0)
}

fn replay(run_id: &str, store: Option<PathBuf>) -> Outcome {
    let store = open_store(store)?;
    let original = store.load(run_id)?;
    let topology = match (&original.topology, original.driver.as_str()) {
        (Some(t), "sim") => t.clone(),
        _ => return Err(Failure::driver(format!("run `{run_id}` was not a simulator run; only sim runs replay"))),
    };
    let (again, _) = sim_run(&original.experiment, topology, original.started_at_us)?;
    let matches = again.trace_digest == original.trace_digest;
    print_json(&json!({
        "run_id": run_id,
        "original": original.trace_digest,
        "replayed": again.trace_digest,
        "matches": matches,
        "status": again.status,
    }));
    Ok(if matches { 0 } else { 1 })
}

fn dispatch(cli: Cli) -> Outcome {
    match cli.command {
        Command::Validate { experiment, driver } => validate(&experiment, driver),
        Command::Run {
            experiment,
            driver,
            topology,
            routes,
            store,
        } => run(&experiment, driver, topology, routes, store),
        Command::Sim {
            command:
                SimCommand::Run {
                    topology,
                    duration_ms,
                    seed,
                    out,
                },
        } => sim_standalone(&topology, duration_ms, seed, out),
        Command::Catalog { command } => catalog_cmd(command),
        Command::Report { run_id, store, format } => report(&run_id, store, format),
        Command::Audit {
            command: AuditCommand::Verify { chain },
        } => audit_verify(&chain),
        Command::Backlog {
            command: BacklogCommand::Prioritize { file },
        } => backlog(&file),
        Command::Maturity { store } => maturity(store),
        Command::Replay { run_id, store } => replay(&run_id, store),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match std::panic::catch_unwind(|| dispatch(cli)) {
        Ok(Ok(code)) => ExitCode::from(code),
        Ok(Err(f)) => {
            eprintln!("chaoskit: {}", f.message);
            ExitCode::from(f.code)
        }
        Err(_) => ExitCode::from(EXIT_INTERNAL),
    }
}
