use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::BOOTSTRAP_STREAM;
use super::report::{bootstrap_mean, EvaluationReport, Interval};
use super::{write_json, write_text, Lifecycle, RunConfig};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub index: usize,
    pub seed: u64,
    pub alpha: Option<f64>,
    pub report: Option<EvaluationReport>,
    pub error: Option<String>,
    pub failed_stage: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityRow {
    /// `None` when the scenario ran as configured.
    pub alpha: Option<f64>,
    pub runs: usize,
    pub detected: usize,
    pub recall: Option<Interval>,
    pub latency_days: Option<Interval>,
    pub baseline_wmape: Option<Interval>,
    pub post_drift_wmape: Option<Interval>,
    pub post_retrain_wmape: Option<Interval>,
    /// Injected series only.
    pub affected_post_drift_wmape: Option<Interval>,
    pub affected_post_retrain_wmape: Option<Interval>,
    pub roi: Option<Interval>,
    pub roi_positive: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub n_seeds: usize,
    /// Every seed and severity finished.
    pub complete: bool,
    pub config_hash: String,
    /// One drift-free control sweep per seed.
    pub control_runs: usize,
    pub control_runs_with_events: usize,
    pub fpr: Option<f64>,
    pub severities: Vec<SeverityRow>,
    pub runs: Vec<SeedRun>,
}

struct SeedResult {
    runs: Vec<SeedRun>,
    control_event: Option<bool>,
}

fn failed(index: usize, seed: u64, alpha: Option<f64>, e: &Error) -> SeedRun {
    SeedRun {
        index,
        seed,
        alpha,
        report: None,
        error: Some(e.to_string()),
        failed_stage: e.stage().map(str::to_string),
    }
}

fn run_seed(config: &RunConfig, index: usize) -> SeedResult {
    let seed = derive_seed(config.seed, index as u64);
    let mut cfg = config.seeded(seed);
    let dir = config.output_dir.join(format!("seed_{index:02}"));
    cfg.output_dir = dir.clone();
    let alphas: Vec<Option<f64>> = if config.batch.severities.is_empty() {
        vec![None]
    } else {
        config.batch.severities.iter().map(|a| Some(*a)).collect()
    };

    let base = (|| -> Result<Lifecycle> {
        let mut lc = Lifecycle::new(cfg.clone())?;
        lc.data()?;
        lc.train()?;
        lc.calibrate()?;
        Ok(lc)
    })();
    let base = match base {
        Ok(b) => b,
        Err(e) => {
            log::warn!("seed {index} failed: {e}");
            return SeedResult {
                runs: alphas.iter().map(|a| failed(index, seed, *a, &e)).collect(),
                control_event: None,
            };
        }
    };
    let control_event = base.state.control.as_ref().map(|c| !c.events.is_empty());

    let runs = alphas
        .iter()
        .map(|alpha| {
            let result = match alpha {
                None => {
                    let mut lc = Lifecycle {
                        config: base.config.clone(),
                        workspace: base.workspace.clone(),
                        state: base.state.clone(),
                    };
                    lc.finish()
                }
                Some(a) => {
                    let mut c = cfg.clone();
                    if let Some(s) = c.scenario.as_mut() {
                        s.alpha = *a;
                    }
                    c.output_dir = dir.join(format!("alpha_{a:.2}"));
                    base.branch(c).and_then(|mut lc| lc.finish())
                }
            };
            match result {
                Ok(report) => SeedRun {
                    index,
                    seed,
                    alpha: *alpha,
                    report: Some(report),
                    error: None,
                    failed_stage: None,
                },
                Err(e) => {
                    log::warn!("seed {index} alpha {alpha:?} failed: {e}");
                    failed(index, seed, *alpha, &e)
                }
            }
        })
        .collect();
    SeedResult { runs, control_event }
}

fn severity_row(alpha: Option<f64>, runs: &[&SeedRun], resamples: usize, seed: u64) -> SeverityRow {
    let reports: Vec<&EvaluationReport> = runs.iter().filter_map(|r| r.report.as_ref()).collect();
    let collect =
        |f: &dyn Fn(&EvaluationReport) -> Option<f64>| -> Vec<f64> { reports.iter().filter_map(|r| f(r)).collect() };
    let ci = |k: u64, v: Vec<f64>| bootstrap_mean(&v, resamples, derive_seed(seed, k));
    let rois = collect(&|r| r.business.roi);
    SeverityRow {
        alpha,
        runs: reports.len(),
        detected: reports.iter().filter(|r| r.detection.recall == Some(1.0)).count(),
        recall: ci(0, collect(&|r| r.detection.recall)),
        latency_days: ci(1, collect(&|r| r.detection.mean_latency_days)),
        baseline_wmape: ci(2, collect(&|r| Some(r.accuracy.baseline_wmape))),
        post_drift_wmape: ci(3, collect(&|r| r.accuracy.post_drift_wmape)),
        post_retrain_wmape: ci(4, collect(&|r| r.accuracy.post_retrain_wmape)),
        affected_post_drift_wmape: ci(6, collect(&|r| r.accuracy.affected.as_ref()?.post_drift_wmape)),
        affected_post_retrain_wmape: ci(7, collect(&|r| r.accuracy.affected.as_ref()?.post_retrain_wmape)),
        roi_positive: rois.iter().filter(|r| **r > 0.0).count(),
        roi: ci(5, rois),
    }
}

/// Runs the lifecycle for `n_seeds` derived seeds (and every configured
/// severity), each in its own subdirectory, and aggregates means with
/// bootstrap intervals. Failed runs are recorded and skipped.
pub fn batch_runs(config: &RunConfig, n_seeds: usize) -> Result<BatchReport> {
    config.validate()?;
    if n_seeds == 0 {
        return Err(Error::Config("n_seeds must be >= 1".into()));
    }
    if !config.batch.severities.is_empty() && config.scenario.is_none() {
        return Err(Error::Config("a severity sweep needs a [scenario]".into()));
    }
    let results: Vec<SeedResult> = (0..n_seeds).into_par_iter().map(|i| run_seed(config, i)).collect();

    let controls: Vec<bool> = results.iter().filter_map(|r| r.control_event).collect();
    let runs: Vec<SeedRun> = results.into_iter().flat_map(|r| r.runs).collect();
    let mut alphas: Vec<Option<f64>> = vec![];
    for r in &runs {
        if !alphas.contains(&r.alpha) {
            alphas.push(r.alpha);
        }
    }
    let boot = derive_seed(config.seed, BOOTSTRAP_STREAM);
    let severities = alphas
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let group: Vec<&SeedRun> = runs.iter().filter(|r| r.alpha == *a).collect();
            severity_row(
                *a,
                &group,
                config.batch.bootstrap_resamples,
                derive_seed(boot, k as u64),
            )
        })
        .collect();
    let with_events = controls.iter().filter(|c| **c).count();
    let report = BatchReport {
        n_seeds,
        complete: runs.iter().all(|r| r.report.is_some()),
        config_hash: config.hash()?,
        control_runs: controls.len(),
        control_runs_with_events: with_events,
        fpr: (!controls.is_empty()).then(|| with_events as f64 / controls.len() as f64),
        severities,
        runs,
    };
    write_json(&config.output_dir.join("batch.json"), &report)?;
    write_text(&config.output_dir.join("batch.txt"), &report.render())?;
    Ok(report)
}

fn cell(i: &Option<Interval>, digits: usize) -> String {
    match i {
        Some(i) => format!("{:.d$} [{:.d$}, {:.d$}]", i.mean, i.lo, i.hi, d = digits),
        None => "-".to_string(),
    }
}

impl BatchReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} seeds{}; control runs with events {}/{}",
            self.n_seeds,
            if self.complete { "" } else { " (incomplete)" },
            self.control_runs_with_events,
            self.control_runs
        );
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:>6} {:>9} {:>20} {:>24} {:>24} {:>24} {:>24} {:>24} {:>8}",
            "alpha",
            "detected",
            "latency (days)",
            "baseline WMAPE",
            "post-drift WMAPE",
            "retrained WMAPE",
            "affected post-drift",
            "affected retrained",
            "ROI > 0"
        );
        for r in &self.severities {
            let _ = writeln!(
                out,
                "{:>6} {:>9} {:>20} {:>24} {:>24} {:>24} {:>24} {:>24} {:>8}",
                r.alpha.map_or_else(|| "-".to_string(), |a| format!("{a:.2}")),
                format!("{}/{}", r.detected, r.runs),
                cell(&r.latency_days, 1),
                cell(&r.baseline_wmape, 4),
                cell(&r.post_drift_wmape, 4),
                cell(&r.post_retrain_wmape, 4),
                cell(&r.affected_post_drift_wmape, 4),
                cell(&r.affected_post_retrain_wmape, 4),
                format!("{}/{}", r.roi_positive, r.runs)
            );
        }
        for r in self.runs.iter().filter(|r| r.error.is_some()) {
            let _ = writeln!(
                out,
                "seed {} alpha {:?} failed in {}: {}",
                r.index,
                r.alpha,
                r.failed_stage.as_deref().unwrap_or("?"),
                r.error.as_deref().unwrap_or("")
            );
        }
        out
    }
}
