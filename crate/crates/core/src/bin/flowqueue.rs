//! Command-line entry point.
//!
//! Exit codes: 0 success, 2 configuration error, 3 protocol or network
//! error, 4 simulator invariant violation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand};

use flowqueue::config::{load_scenario, ConfigError, RunConfig};
use flowqueue::controller::Controller;
use flowqueue::net::{self, RemoteStorage};
use flowqueue::planner::PlanRequest;
use flowqueue::sim::{export_trace, run_sim, Mode, SimError, SimReport, TraceFormat};
use flowqueue::storage::{StorageUnit, StoreError};
use flowqueue::types::Epoch;
use flowqueue::wire::DEFAULT_MAX_FRAME;

#[derive(Parser)]
#[command(name = "flowqueue", version, about = "Streaming sample store, weight coordinator and pipeline simulator")]
struct Cli {
    /// Log filter (env_logger syntax). Overrides the config's log_level.
    #[arg(long, env = "FLOWQUEUE_LOG", global = true)]
    log: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run storage unit `--unit` of the config's topology.
    ServeStorage {
        #[arg(long)]
        config: PathBuf,
        /// Index into `topology.storage`.
        #[arg(long, default_value_t = 0)]
        unit: u32,
    },
    /// Run the controller for `--task` and register it with every storage unit.
    ServeController {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        task: String,
        /// How long to keep retrying registration while storage starts up.
        #[arg(long, default_value_t = 30_000)]
        register_timeout_ms: u64,
    },
    /// Run the weight coordinator from the config's `[coordinator]` table.
    ServeCoordinator {
        #[arg(long)]
        config: PathBuf,
    },
    /// Simulate a scenario and print a summary.
    RunSim {
        /// Scenario file, or a run config with a `[scenario]` table.
        #[arg(long)]
        scenario: PathBuf,
        /// Override the pipeline mode.
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        staleness: Option<u64>,
        /// Write the full report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write the Gantt trace.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// json_lines or chrome_trace.
        #[arg(long, default_value = "chrome_trace")]
        trace_format: TraceFormat,
    },
    /// Search device allocations for a plan request file.
    Plan {
        #[arg(long)]
        request: PathBuf,
        /// Override the device budget.
        #[arg(long)]
        budget: Option<u32>,
        /// Write the plan (allocation, finalists, report) as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export a Gantt trace from a saved report (`.json`) or a scenario file.
    TraceExport {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// json_lines or chrome_trace.
        #[arg(long, default_value = "chrome_trace")]
        format: TraceFormat,
    },
}

#[derive(Debug)]
enum Fail {
    Config(String),
    Protocol(String),
    Invariant(String),
}

impl Fail {
    fn code(&self) -> u8 {
        match self {
            Fail::Config(_) => 2,
            Fail::Protocol(_) => 3,
            Fail::Invariant(_) => 4,
        }
    }
}

impl std::fmt::Display for Fail {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Fail::Config(m) => write!(f, "config error: {m}"),
            Fail::Protocol(m) => write!(f, "protocol error: {m}"),
            Fail::Invariant(m) => write!(f, "invariant violation: {m}"),
        }
    }
}

impl From<ConfigError> for Fail {
    fn from(e: ConfigError) -> Self {
        Fail::Config(e.to_string())
    }
}

impl From<SimError> for Fail {
    fn from(e: SimError) -> Self {
        match e {
            SimError::ScenarioInvalid(m) => Fail::Config(m),
            other => Fail::Invariant(other.to_string()),
        }
    }
}

fn io_fail(what: &str, e: std::io::Error) -> Fail {
    Fail::Protocol(format!("{what}: {e}"))
}

fn init_log(filter: Option<&str>, fallback: &str) {
    let mut b = env_logger::Builder::new();
    b.parse_filters(filter.unwrap_or(fallback));
    let _ = b.try_init();
}

fn load_config(path: &Path, log: Option<&str>) -> Result<RunConfig, Fail> {
    let cfg = RunConfig::load(path);
    init_log(log, cfg.as_ref().map(|c| c.log_level.as_str()).unwrap_or("info"));
    Ok(cfg?)
}

fn serve_forever(addr: &str, handler: net::Handler) -> Result<(), Fail> {
    let listener = net::bind(addr).map_err(|e| io_fail(addr, e))?;
    let h = net::serve(listener, DEFAULT_MAX_FRAME, handler).map_err(|e| io_fail(addr, e))?;
    log::info!("listening on {}", h.addr());
    h.wait();
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<(), Fail> {
    std::fs::write(path, text).map_err(|e| Fail::Config(format!("cannot write {}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), Fail> {
    let log = cli.log.as_deref();
    match cli.cmd {
        Cmd::ServeStorage { config, unit } => {
            let cfg = load_config(&config, log)?;
            let addr = cfg
                .topology
                .storage
                .get(unit as usize)
                .ok_or_else(|| Fail::Config(format!("no storage unit {unit}")))?
                .clone();
            let rows = cfg.partition().rows_of(unit);
            let su = Arc::new(StorageUnit::new(unit, Epoch(0), rows));
            serve_forever(&addr, net::storage_handler(su))
        }
        Cmd::ServeController {
            config,
            task,
            register_timeout_ms,
        } => {
            let cfg = load_config(&config, log)?;
            let entry = cfg.task(&task)?.clone();
            let spec = entry.spec().map_err(ConfigError::from)?;
            let ctl = Controller::with_endpoint(spec, Epoch(0), cfg.topology.global_batch, entry.endpoint.clone())
                .map_err(|e| Fail::Config(e.to_string()))?;
            let listener = net::bind(&entry.endpoint).map_err(|e| io_fail(&entry.endpoint, e))?;
            let h = net::serve(listener, DEFAULT_MAX_FRAME, net::controller_handler(Arc::new(ctl)))
                .map_err(|e| io_fail(&entry.endpoint, e))?;
            let deadline = Instant::now() + Duration::from_millis(register_timeout_ms);
            for (i, ep) in cfg.topology.storage.iter().enumerate() {
                let unit = RemoteStorage::new(i as u32, ep.clone());
                loop {
                    match unit.register(&entry.endpoint) {
                        Ok(()) | Err(StoreError::AlreadyRegistered(_)) => break,
                        Err(StoreError::Transport(e)) if Instant::now() < deadline => {
                            log::debug!("storage {ep} not up yet: {e}");
                            std::thread::sleep(Duration::from_millis(100));
                        }
                        Err(e) => return Err(Fail::Protocol(format!("register with {ep}: {e}"))),
                    }
                }
                log::info!("registered with storage unit {i} at {ep}");
            }
            log::info!("controller {task} listening on {}", h.addr());
            h.wait();
            Ok(())
        }
        Cmd::ServeCoordinator { config } => {
            let cfg = load_config(&config, log)?;
            let c = cfg.coordinator()?.clone();
            let coord = Arc::new(c.build().map_err(|e| Fail::Config(e.to_string()))?);
            serve_forever(&c.endpoint, net::coordinator_handler(coord, c.sync_timeout()))
        }
        Cmd::RunSim {
            scenario,
            mode,
            iterations,
            seed,
            staleness,
            report,
            trace,
            trace_format,
        } => {
            init_log(log, "warn");
            let mut sc = load_scenario(&scenario)?;
            if let Some(m) = mode {
                sc.mode = m;
            }
            if let Some(n) = iterations {
                sc.iterations = n;
            }
            if let Some(s) = seed {
                sc.seed = s;
            }
            if let Some(s) = staleness {
                sc.staleness = s;
            }
            let r = run_sim(&sc)?;
            println!("{}", r.summary());
            if let Some(p) = report {
                write_file(&p, &r.to_json())?;
            }
            if let Some(p) = trace {
                export_trace(&r, &p, trace_format).map_err(|e| Fail::Config(format!("{}: {e}", p.display())))?;
            }
            Ok(())
        }
        Cmd::Plan { request, budget, out } => {
            init_log(log, "warn");
            let text = std::fs::read_to_string(&request)
                .map_err(|e| Fail::Config(format!("cannot read {}: {e}", request.display())))?;
            let mut req: PlanRequest = toml::from_str(&text).map_err(|e| Fail::Config(e.to_string()))?;
            if let Some(b) = budget {
                req.budget = b;
            }
            let p = req.run().map_err(|e| match e {
                flowqueue::planner::PlanError::Sim(s) => Fail::from(s),
                other => Fail::Config(other.to_string()),
            })?;
            print!("{}", p.table(&req.tasks));
            println!("best: {}", p.allocation.describe(&req.tasks));
            if let Some(o) = out {
                write_file(&o, &serde_json::to_string_pretty(&p).expect("plan serialises"))?;
            }
            Ok(())
        }
        Cmd::TraceExport { input, out, format } => {
            init_log(log, "warn");
            let r: SimReport = if input.extension().is_some_and(|e| e == "json") {
                let text = std::fs::read_to_string(&input)
                    .map_err(|e| Fail::Config(format!("cannot read {}: {e}", input.display())))?;
                serde_json::from_str(&text).map_err(|e| Fail::Config(e.to_string()))?
            } else {
                run_sim(&load_scenario(&input)?)?
            };
            export_trace(&r, &out, format).map_err(|e| Fail::Config(format!("{}: {e}", out.display())))?;
            println!("wrote {} segments to {}", r.gantt.segments.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("flowqueue: {e}");
            ExitCode::from(e.code())
        }
    }
}
