use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use driftguard::harness::{batch_runs, run_lifecycle, DataSource, Lifecycle, RunConfig};
use driftguard::Error;

const DEFAULT_CONFIG: &str = include_str!("../../../config/default.toml");

#[derive(Parser)]
#[command(
    name = "driftguard",
    version,
    about = "Drift lifecycle for hierarchical demand forecasting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Log filter (error, warn, info, debug); RUST_LOG takes precedence.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config; the built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic panel.
    Generate(Common),
    /// Load the M5 files named in [data.m5].
    Ingest(Common),
    /// Train the baseline store models and clean forecasts.
    Train(Common),
    /// Apply the configured drift scenario.
    Inject(Common),
    /// Calibrate the detectors (if needed) and sweep the monitored panel.
    Detect(Common),
    /// Attribute the first drift event.
    Diagnose(Common),
    /// Build the retraining plan.
    Plan(Common),
    /// Execute the plan with per-store rollback.
    Retrain(Common),
    /// Compute the report from the logged artifacts.
    Evaluate(Common),
    /// Every stage in order.
    Run(Common),
    /// Repeat the lifecycle over derived seeds and aggregate.
    Batch {
        #[command(flatten)]
        common: Common,
        /// Number of seeds.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Print the annotated default config.
    DefaultConfig,
}

fn load_config(c: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::from_toml(DEFAULT_CONFIG)?,
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.output_dir = out.clone();
    }
    let seed = cfg.seed;
    Ok(cfg.seeded(seed))
}

fn exit_code(e: &Error) -> u8 {
    match e.stage() {
        Some("ingest") => 3,
        Some("train") => 4,
        Some("inject") => 5,
        Some("detect") => 6,
        Some("diagnose") => 7,
        Some("plan") => 8,
        Some("retrain") => 9,
        Some("evaluate") => 10,
        Some(_) => 1,
        None if matches!(e, Error::Config(_)) => 2,
        None => 1,
    }
}

/// Exit code when a batch finishes with failed seeds.
const BATCH_INCOMPLETE: u8 = 11;

fn stage(common: &Common, f: impl FnOnce(&mut Lifecycle) -> Result<String, Error>) -> Result<u8, Error> {
    let mut lc = Lifecycle::new(load_config(common)?)?;
    let msg = f(&mut lc)?;
    println!("{msg}");
    Ok(0)
}

fn data_stage(common: &Common, source: DataSource) -> Result<u8, Error> {
    let cfg = load_config(common)?;
    if cfg.data.source != source {
        let hint = match source {
            DataSource::Synthetic => "generate needs data.source = \"synthetic\"; use ingest for M5 files",
            DataSource::M5 => "ingest needs data.source = \"m5\"; use generate for synthetic data",
        };
        return Err(Error::Config(hint.into()));
    }
    let mut lc = Lifecycle::new(cfg)?;
    lc.data()?;
    println!("panel written to {}", lc.workspace.clean_panel().display());
    Ok(0)
}

fn dispatch(command: &Command) -> Result<u8, Error> {
    match command {
        Command::Generate(c) => data_stage(c, DataSource::Synthetic),
        Command::Ingest(c) => data_stage(c, DataSource::M5),
        Command::Train(c) => stage(c, |lc| {
            lc.train()?;
            Ok(format!(
                "models written to {}",
                lc.workspace.baseline_models().display()
            ))
        }),
        Command::Inject(c) => stage(c, |lc| {
            lc.inject()?;
            Ok(match &lc.config.scenario {
                Some(_) => format!("drifted panel written to {}", lc.workspace.drifted_panel().display()),
                None => "no [scenario]: control run, nothing injected".to_string(),
            })
        }),
        Command::Detect(c) => stage(c, |lc| {
            lc.detect()?;
            let run = &lc.state.detection.as_ref().expect("detected").monitored;
            Ok(match run.first_event() {
                Some(e) => format!("drift event on day {} covering {} series", e.day, e.series_scope.len()),
                None => "no drift event".to_string(),
            })
        }),
        Command::Diagnose(c) => stage(c, |lc| {
            lc.diagnose()?;
            Ok(match lc.state.diagnosis.as_ref().and_then(|d| d.as_ref()) {
                Some(d) => d.map.render(false),
                None => "no drift event to diagnose".to_string(),
            })
        }),
        Command::Plan(c) => stage(c, |lc| {
            lc.plan()?;
            Ok(match lc.state.plan.as_ref().and_then(|p| p.as_ref()) {
                Some(p) => format!(
                    "window {} days, {} series selected, stores {:?}, ROI {:.2}, approved {}",
                    p.window_days,
                    p.selected_series.len(),
                    p.stores,
                    p.roi,
                    p.approved
                ),
                None => "no drift event: nothing to plan".to_string(),
            })
        }),
        Command::Retrain(c) => stage(c, |lc| {
            lc.retrain()?;
            let (_, record, _) = lc.state.deployed.as_ref().expect("retrained");
            let deployed: Vec<&str> = record
                .decisions
                .iter()
                .filter(|d| d.deployed)
                .map(|d| d.store.as_str())
                .collect();
            Ok(format!(
                "deployed {} of {} planned store models",
                deployed.len(),
                record.decisions.len()
            ))
        }),
        Command::Evaluate(c) => stage(c, |lc| Ok(lc.evaluate()?.render())),
        Command::Run(c) => {
            let cfg = load_config(c)?;
            print!("{}", run_lifecycle(&cfg)?.render());
            Ok(0)
        }
        Command::Batch { common, seeds } => {
            let report = batch_runs(&load_config(common)?, *seeds)?;
            print!("{}", report.render());
            Ok(if report.complete { 0 } else { BATCH_INCOMPLETE })
        }
        Command::DefaultConfig => {
            print!("{DEFAULT_CONFIG}");
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .parse_default_env()
        .init();
    match dispatch(&cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
