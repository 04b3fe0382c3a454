mod plot;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use sal_core::annotation::{AnnotationQueue, Annotator, OracleAnnotator, QueueAnnotator};
use sal_core::experiment::{
    aggregate, aggregate_csv, continue_run, summary_csv, AnnotatorMode, Datasets, ExperimentConfig, RunRecord, RunState,
};
use sal_service::{AppState, TOKEN_ENV};

#[derive(Parser)]
#[command(name = "sal", version, about = "Saliency-guided active learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment for one seed, or for every seed in the config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides the config.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Continue a suspended run from its checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Port for the annotation service when the config uses it.
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Run seeds 0..N of each config and aggregate mean and std.
    Sweep {
        #[arg(long, required = true, num_args = 1..)]
        config: Vec<PathBuf>,
        #[arg(long, default_value_t = 8)]
        seeds: u64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Draw PNG plots from a directory of run records.
    Plot {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotKind,
        /// Output file (curve, scatter) or directory (overlay).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Curve metric.
        #[arg(long, value_enum, default_value_t = Metric::Dice)]
        metric: Metric,
        /// Test images per run for overlays.
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Run an experiment with humans answering through the HTTP service.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    Curve,
    Scatter,
    Overlay,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Dice,
    Accuracy,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Cmd::Run { config, seed, output, resume, port } => run(&config, seed, output, resume, port),
        Cmd::Sweep { config, seeds, output } => sweep(&config, seeds, output),
        Cmd::Plot { records, kind, out, metric, count } => {
            let records_list = load_records(&records)?;
            match kind {
                PlotKind::Curve => {
                    let out = out.unwrap_or_else(|| records.join("curve.png"));
                    plot::curve(&records_list, matches!(metric, Metric::Dice), &out)?;
                    println!("{}", out.display());
                }
                PlotKind::Scatter => {
                    let out = out.unwrap_or_else(|| records.join("scatter.png"));
                    plot::scatter(&records_list, &out)?;
                    println!("{}", out.display());
                }
                PlotKind::Overlay => {
                    let out = out.unwrap_or_else(|| records.join("overlays"));
                    for path in plot::overlays(&records, &records_list, count, &out)? {
                        println!("{}", path.display());
                    }
                }
            }
            Ok(())
        }
        Cmd::Serve { config, seed, port, output } => {
            let mut cfg = load_config(&config, output)?;
            cfg.annotator = AnnotatorMode::Service;
            let data = cfg.dataset.load()?;
            let state = RunState::new(&cfg, seed, &data.train)?;
            run_state(state, &data, port)?;
            Ok(())
        }
    }
}

fn load_config(path: &Path, output: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(dir) = output {
        cfg.output = Some(dir);
    }
    if cfg.output.is_none() {
        cfg.output = Some(PathBuf::from("runs").join(&cfg.name));
    }
    Ok(cfg)
}

fn git_revision() -> Option<String> {
    let out = Command::new("git").args(["rev-parse", "HEAD"]).output().ok()?;
    out.status.success().then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

/// Runs a state to completion with the configured annotator, hosting the
/// HTTP service in the background when humans answer.
fn run_state(mut state: RunState, data: &Datasets, port: u16) -> Result<RunRecord> {
    state.git_revision = git_revision();
    let result = match state.config.annotator {
        AnnotatorMode::Oracle => continue_run(state, data, &mut OracleAnnotator),
        AnnotatorMode::Service => {
            let queue = Arc::new(AnnotationQueue::new());
            let app = AppState::new(Arc::clone(&queue), std::env::var(TOKEN_ENV).ok());
            let runtime = tokio::runtime::Runtime::new()?;
            let addr = SocketAddr::from(([0, 0, 0, 0], port));
            let server = runtime.spawn(async move {
                if let Err(e) = sal_service::serve(addr, app).await {
                    log::error!("annotation service stopped: {e}");
                }
            });
            let mut annotator =
                QueueAnnotator::new(queue, Duration::from_secs(state.config.annotation_timeout_secs));
            let result = continue_run(state, data, &mut annotator as &mut dyn Annotator);
            server.abort();
            result
        }
    };
    match result {
        Ok(record) => {
            log::info!(
                "{}: final accuracy {:.3}, Dice {:.3}",
                record.run_id,
                record.final_point().map_or(f64::NAN, |p| p.accuracy),
                record.final_point().map_or(f64::NAN, |p| p.mean_dice)
            );
            Ok(record)
        }
        Err(sal_core::Error::Suspended { checkpoint: Some(path) }) => {
            bail!("annotation timed out; resume with --resume {}", path.display())
        }
        Err(e) => Err(e.into()),
    }
}

fn run(config: &Path, seed: Option<u64>, output: Option<PathBuf>, resume: Option<PathBuf>, port: u16) -> Result<()> {
    let cfg = load_config(config, output)?;
    let data = cfg.dataset.load()?;
    if let Some(checkpoint) = resume {
        let mut state = RunState::load(&checkpoint)?;
        if state.config.hash() != cfg.hash() {
            bail!("checkpoint {} was written by a different configuration", checkpoint.display());
        }
        state.config.output = cfg.output.clone();
        run_state(state, &data, port)?;
        return Ok(());
    }
    let seeds = seed.map(|s| vec![s]).unwrap_or_else(|| cfg.seeds.clone());
    for s in seeds {
        let state = RunState::new(&cfg, s, &data.train)?;
        run_state(state, &data, port)?;
    }
    Ok(())
}

fn sweep(configs: &[PathBuf], seeds: u64, output: Option<PathBuf>) -> Result<()> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let mut reports = Vec::new();
    let mut summary_dir = None;
    for path in configs {
        let mut cfg = load_config(path, None)?;
        if let Some(dir) = &output {
            cfg.output = Some(dir.join(&cfg.name));
        }
        cfg.annotator = AnnotatorMode::Oracle;
        let data = cfg.dataset.load()?;
        let mut records = Vec::new();
        for seed in 0..seeds {
            let state = RunState::new(&cfg, seed, &data.train)?;
            records.push(run_state(state, &data, 0)?);
        }
        let report = aggregate(&records)?;
        let dir = cfg.output.clone().expect("output set by load_config");
        std::fs::write(dir.join("aggregate.json"), serde_json::to_string_pretty(&report)?)?;
        std::fs::write(dir.join("aggregate.csv"), aggregate_csv(&report))?;
        summary_dir.get_or_insert_with(|| output.clone().unwrap_or_else(|| dir.parent().map(Path::to_path_buf).unwrap_or_default()));
        reports.push(report);
    }
    let dir = summary_dir.expect("at least one config");
    let path = dir.join("summary.csv");
    std::fs::write(&path, summary_csv(&reports))?;
    print!("{}", summary_csv(&reports));
    Ok(())
}

/// Every run record in `dir` and its immediate subdirectories.
fn load_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut paths = Vec::new();
    let mut visit = |d: &Path| -> Result<Vec<PathBuf>> {
        let mut subdirs = Vec::new();
        for entry in std::fs::read_dir(d).with_context(|| format!("reading {}", d.display()))? {
            let p = entry?.path();
            if p.is_dir() {
                subdirs.push(p);
            } else if p.extension().is_some_and(|e| e == "json") {
                paths.push(p);
            }
        }
        Ok(subdirs)
    };
    for sub in visit(dir)? {
        visit(&sub)?;
    }
    paths.sort();
    // Other JSON files (models, checkpoints, aggregates) fail to parse as
    // records and are skipped.
    let records: Vec<RunRecord> = paths.iter().filter_map(|p| RunRecord::read_json(p).ok()).collect();
    if records.is_empty() {
        bail!("no run records under {}", dir.display());
    }
    Ok(records)
}
