//! Command-line driver for the perforated-domain experiments.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use commands::Run;
use config::{ConfigError, RunConfig};
use perforated::Error;

#[derive(Parser, Debug)]
#[command(name = "perforated", version, about = "Reflections, multipole oracle and homogenized solvers for perforated planar flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (sectioned TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; falls back to PERFORATED_OUT, then `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Overrides the `seed` key of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for the numerical kernels.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Gamma decomposition over a lattice sweep.
    Divcurl,
    /// Method of reflections, optionally with the multipole oracle.
    Reflect,
    /// Homogenized Neumann solve or volume-fraction rate sweep.
    Homog,
    /// Vortex-particle runs: free evolution or perforated vs homogenized.
    Euler,
    /// Reflection accuracy against the oracle over `(d, a)` cases.
    Sweep,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Divcurl => "divcurl",
            Command::Reflect => "reflect",
            Command::Homog => "homog",
            Command::Euler => "euler",
            Command::Sweep => "sweep",
        }
    }
}

struct Failure {
    code: u8,
    kind: &'static str,
    invariant: String,
    message: String,
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure { code: 2, kind: "config", invariant: e.invariant, message: e.message }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, invariant) = match &e {
            Error::Violated { invariants, .. } => (2, invariants.join(", ")),
            Error::InvalidConfig(_) => (2, "valid configuration".to_string()),
            Error::InvalidInput(_) => (2, "valid input".to_string()),
            Error::SupportOverlap(_) => (2, "vorticity support disjoint from holes".to_string()),
            Error::Padding(_) => (2, "pad >= 2".to_string()),
            Error::Resolution { .. } => (2, "grid spacing <= a/4".to_string()),
            Error::InsideHole { .. } => (2, "evaluation point in the fluid".to_string()),
            Error::SupportMargin { .. } => (2, "initial support clear of the porous box".to_string()),
            Error::RankDeficient { .. } => (1, "collocation system well conditioned".to_string()),
            Error::NonContraction(_) => (1, "Neumann iteration contracting".to_string()),
            Error::Cfl { .. } => (1, "cfl".to_string()),
            Error::OutOfGrid { .. } => (1, "point inside grid".to_string()),
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => (1, "io".to_string()),
        };
        Failure { code, kind: if code == 2 { "config" } else { "numeric" }, invariant, message: e.to_string() }
    }
}

fn tolerances(cfg: &RunConfig) -> Value {
    json!({
        "neumann_tol": cfg.solver.tol,
        "neumann_max_iter": cfg.solver.max_iter,
        "pad": cfg.solver.pad,
        "reflection_depth": cfg.solver.depth,
        "oracle_order": cfg.solver.order,
        "oracle_points": cfg.solver.points,
        "oracle_max_condition": perforated::oracle::MAX_CONDITION,
        "oracle_max_holes": perforated::oracle::MAX_HOLES,
    })
}

fn run(cli: &Cli, out: &Path) -> Result<Value, Failure> {
    let command = cli.command.name();
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| ConfigError { invariant: "--config given".into(), message: "a configuration file is required".into() })?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError { invariant: "config readable".into(), message: format!("{}: {e}", path.display()) })?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate(command)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(ConfigError { invariant: "--threads >= 1".into(), message: "thread count is zero".into() }.into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure {
            code: 1,
            kind: "numeric",
            invariant: "thread pool".into(),
            message: e.to_string(),
        })?;
    }

    let mut r = Run::new(&cfg, out);
    let results = match cli.command {
        Command::Divcurl => commands::divcurl(&mut r),
        Command::Reflect => commands::reflect(&mut r),
        Command::Homog => commands::homog(&mut r),
        Command::Euler => commands::euler(&mut r),
        Command::Sweep => commands::sweep(&mut r),
    }?;
    let passed = r.checks.iter().all(|c| c.passed);
    Ok(json!({
        "schema": "v1",
        "command": command,
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": cfg.hash_hex(),
        "seed": cfg.seed,
        "tolerances": tolerances(&cfg),
        "config": cfg,
        "results": results,
        "checks": r.checks,
        "passed": passed,
        "artifacts": r.artifacts,
    }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = cli
        .out
        .clone()
        .or_else(|| std::env::var_os("PERFORATED_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    if let Err(e) = std::fs::create_dir_all(&out) {
        eprintln!("cannot create output directory {}: {e}", out.display());
        return ExitCode::from(1);
    }
    match run(&cli, &out) {
        Ok(summary) => {
            let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
            if let Err(e) = std::fs::write(out.join("summary.json"), &text) {
                eprintln!("cannot write summary: {e}");
                return ExitCode::from(1);
            }
            println!("{text}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            let err = json!({
                "schema": "v1",
                "command": cli.command.name(),
                "status": "error",
                "exit_code": f.code,
                "kind": f.kind,
                "invariant": f.invariant,
                "message": f.message,
            });
            let text = serde_json::to_string_pretty(&err).expect("error serializes");
            let _ = std::fs::write(out.join("error.json"), &text);
            eprintln!("{text}");
            ExitCode::from(f.code)
        }
    }
}
