use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use tou_core::experiment::{
    evaluate_instance, price, run_lambda, run_sweep, verify_instance, write_lambda_csv, write_sweep_csv,
    ExperimentConfig, Overrides, SweepAxis, VerifyReport,
};
use tou_core::stage1::{write_trace_csv, Scheme};
use tou_core::stage2::write_responses_csv;
use tou_core::Error;

/// Grid size for the `--verify-grid` oracle.
const VERIFY_GRID_POINTS: usize = 10_000;

#[derive(Parser)]
#[command(name = "tou", version, about = "Time-of-use tariff design under storage investment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Replace every seed list in the configuration with this seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Convert the configured hourly CSV into a scenario set.
    Ingest,
    /// Compute optimal prices for one or both schemes.
    Optimize {
        #[arg(long, value_enum, default_value_t = SchemeArg::Both)]
        scheme: SchemeArg,
        /// Cross-check each scan against a uniform price grid.
        #[arg(long)]
        verify_grid: bool,
    },
    /// Sweep one parameter and write a CSV of means and deviations.
    Sweep {
        /// theta_bar, delta_s, delta_d, lambda, tau, eta or elastic_fraction.
        #[arg(long)]
        axis: String,
    },
    /// Run both schemes and the planner, write the cost ratios.
    Benchmark,
    /// Run the invariant checks on every instance.
    Verify {
        #[arg(long)]
        verify_grid: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Pt,
    Pi,
    Both,
}

impl SchemeArg {
    fn schemes(self) -> Vec<Scheme> {
        match self {
            SchemeArg::Pt => vec![Scheme::Pt],
            SchemeArg::Pi => vec![Scheme::Pi],
            SchemeArg::Both => vec![Scheme::Pt, Scheme::Pi],
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<VerifyFailed>().is_some() {
        return 3;
    }
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::InvariantViolation(_) | Error::Infeasible { .. }) => 3,
        Some(Error::NotConverged { .. }) => 4,
        Some(_) => 2,
        None => 1,
    }
}

/// Raised when a check fails without a library error behind it.
#[derive(Debug)]
struct VerifyFailed(String);

impl std::fmt::Display for VerifyFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "verification failed: {}", self.0)
    }
}

impl std::error::Error for VerifyFailed {}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    let cfg = match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate().context("validating configuration")?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let (name, files) = match &cli.command {
        Command::Ingest => ("ingest", cmd_ingest(&cfg, &cli.out)?),
        Command::Optimize { scheme, verify_grid } => ("optimize", cmd_optimize(&cfg, &cli.out, *scheme, *verify_grid)?),
        Command::Sweep { axis } => ("sweep", cmd_sweep(&cfg, &cli.out, axis)?),
        Command::Benchmark => ("benchmark", cmd_benchmark(&cfg, &cli.out)?),
        Command::Verify { verify_grid } => ("verify", cmd_verify(&cfg, &cli.out, *verify_grid)?),
    };
    write_snapshot(&cfg, &cli.out, name, cli.seed, &files)
}

/// Writes the resolved configuration and the manifest. The timestamp lives
/// only in the manifest so every other file is reproducible byte for byte.
fn write_snapshot(cfg: &ExperimentConfig, out: &Path, command: &str, seed: Option<u64>, files: &[String]) -> Result<()> {
    fs::write(out.join("config.toml"), cfg.to_toml_string()?).context("writing config.toml")?;
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "timestamp_unix": ts,
        "files": files,
    });
    write_json(&out.join("manifest.json"), &manifest)
}

fn write_json<T: serde::Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn file_label(label: &str) -> String {
    label.replace(['/', ' '], "_")
}

fn cmd_ingest(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>> {
    let (set, dropped) = cfg.ingest()?;
    set.write_csv(create(&out.join("scenarios.csv"))?)?;
    write_json(
        &out.join("ingest.json"),
        &json!({
            "entities": set.n_entities(),
            "outcomes": set.n_outcomes(),
            "dropped_days": dropped,
        }),
    )?;
    Ok(vec!["scenarios.csv".into(), "ingest.json".into()])
}

fn cmd_optimize(cfg: &ExperimentConfig, out: &Path, scheme: SchemeArg, verify_grid: bool) -> Result<Vec<String>> {
    let mut files = Vec::new();
    let mut results = Vec::new();
    for inst in cfg.instances(None)? {
        let market = cfg.market(&inst, &Overrides::default())?;
        for s in scheme.schemes() {
            let r = price(cfg, &market, s).with_context(|| format!("pricing {} under {s}", inst.label))?;
            let stem = format!("{}_{s}", file_label(&inst.label));
            write_trace_csv(create(&out.join(format!("trace_{stem}.csv")))?, &r.trace)?;
            write_responses_csv(
                create(&out.join(format!("responses_{stem}.csv")))?,
                market.users().entities(),
                &r.responses,
            )?;
            files.push(format!("trace_{stem}.csv"));
            files.push(format!("responses_{stem}.csv"));
            results.push(json!({ "instance": inst.label, "result": r }));
        }
        if verify_grid {
            let report = verify_instance(cfg, &inst, Some(VERIFY_GRID_POINTS))?;
            let wanted: Vec<String> = scheme.schemes().iter().map(|s| format!("{s}_grid_oracle")).collect();
            if let Some(c) = report.checks.iter().find(|c| wanted.contains(&c.name) && !c.passed) {
                bail!(VerifyFailed(format!("{} {}: {}", inst.label, c.name, c.detail)));
            }
        }
    }
    write_json(&out.join("results.json"), &results)?;
    files.push("results.json".into());
    Ok(files)
}

fn cmd_sweep(cfg: &ExperimentConfig, out: &Path, axis: &str) -> Result<Vec<String>> {
    let axis = SweepAxis::parse(axis)?;
    if axis == SweepAxis::Lambda {
        let map = run_lambda(cfg)?;
        write_lambda_csv(create(&out.join("lambda.csv"))?, &cfg.sweep.p_delta, &cfg.sweep.theta_bar, &map)?;
        return Ok(vec!["lambda.csv".into()]);
    }
    let rows = run_sweep(cfg, axis)?;
    let name = format!("sweep_{}.csv", axis.name());
    write_sweep_csv(create(&out.join(&name))?, axis, &rows)?;
    Ok(vec![name])
}

fn cmd_benchmark(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>> {
    let outcomes = cfg
        .instances(None)?
        .iter()
        .map(|inst| evaluate_instance(cfg, inst, &Overrides::default()))
        .collect::<tou_core::Result<Vec<_>>>()?;
    write_json(&out.join("ratios.json"), &outcomes)?;
    Ok(vec!["ratios.json".into()])
}

fn cmd_verify(cfg: &ExperimentConfig, out: &Path, verify_grid: bool) -> Result<Vec<String>> {
    let grid = verify_grid.then_some(VERIFY_GRID_POINTS);
    let reports = cfg
        .instances(None)?
        .iter()
        .map(|inst| verify_instance(cfg, inst, grid))
        .collect::<tou_core::Result<Vec<VerifyReport>>>()?;
    write_json(&out.join("verify.json"), &reports)?;
    for r in &reports {
        for c in &r.checks {
            println!("{} {} {}", if c.passed { "PASS" } else { "FAIL" }, r.label, c.name);
        }
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        bail!(VerifyFailed(format!("{failed} of {} instances", reports.len())));
    }
    Ok(vec!["verify.json".into()])
}
