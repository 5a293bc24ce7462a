use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Panel;
use crate::detect::DriftEvent;
use crate::error::{Error, Result};
use crate::forecast::{wmape, Forecasts};
use crate::inject::InjectionRecord;
use crate::retrain::{inventory_cost, CostModel, RetrainPlan, StoreDecision};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    /// Absent on control runs.
    pub recall: Option<f64>,
    /// Absent when no event was emitted.
    pub precision: Option<f64>,
    /// Share of matched control runs with any event.
    pub fpr: Option<f64>,
    /// Absent when nothing matched.
    pub mean_latency_days: Option<f64>,
    pub n_events: usize,
    pub n_matched: usize,
    pub first_event_day: Option<u32>,
}

impl DetectionMetrics {
    pub fn check(&self) -> Result<()> {
        for (name, v) in [
            ("recall", self.recall),
            ("precision", self.precision),
            ("fpr", self.fpr),
        ] {
            if v.is_some_and(|v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::validation(format!("{name} outside [0, 1]")));
            }
        }
        if self.mean_latency_days.is_some_and(|l| l < 0.0) {
            return Err(Error::validation("negative latency"));
        }
        Ok(())
    }
}

fn matches(event: &DriftEvent, truth: &InjectionRecord) -> bool {
    event.day >= truth.onset_day && event.series_scope.iter().any(|s| truth.affected_series.contains(s))
}

fn control_fpr(control_runs: &[Vec<DriftEvent>]) -> Option<f64> {
    (!control_runs.is_empty())
        .then(|| control_runs.iter().filter(|r| !r.is_empty()).count() as f64 / control_runs.len() as f64)
}

/// Detection section of a drift run. An event matches when it fires on or
/// after onset and its scope overlaps the affected series.
pub fn compute_detection_metrics(
    events: &[DriftEvent],
    ground_truth: Option<&InjectionRecord>,
    control_runs: &[Vec<DriftEvent>],
) -> Result<DetectionMetrics> {
    let truth = ground_truth.ok_or_else(|| Error::validation("detection metrics need the injection record"))?;
    let matched: Vec<&DriftEvent> = events.iter().filter(|e| matches(e, truth)).collect();
    let latencies: Vec<f64> = matched.iter().map(|e| (e.day - truth.onset_day) as f64).collect();
    Ok(DetectionMetrics {
        // one injected event per run
        recall: Some(if matched.is_empty() { 0.0 } else { 1.0 }),
        precision: (!events.is_empty()).then(|| matched.len() as f64 / events.len() as f64),
        fpr: control_fpr(control_runs),
        mean_latency_days: (!latencies.is_empty()).then(|| latencies.iter().sum::<f64>() / latencies.len() as f64),
        n_events: events.len(),
        n_matched: matched.len(),
        first_event_day: events.first().map(|e| e.day),
    })
}

/// Detection section of a drift-free run: only the false-positive rate.
pub fn control_detection_metrics(events: &[DriftEvent], control_runs: &[Vec<DriftEvent>]) -> DetectionMetrics {
    DetectionMetrics {
        recall: None,
        precision: None,
        fpr: control_fpr(control_runs),
        mean_latency_days: None,
        n_events: events.len(),
        n_matched: 0,
        first_event_day: events.first().map(|e| e.day),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyBlock {
    pub baseline_wmape: f64,
    pub post_drift_wmape: Option<f64>,
    pub post_retrain_wmape: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMetrics {
    pub baseline_window: (u32, u32),
    pub eval_window: (u32, u32),
    pub baseline_wmape: f64,
    pub post_drift_wmape: Option<f64>,
    pub post_retrain_wmape: Option<f64>,
    /// Share of the drift-induced WMAPE increase removed by retraining.
    pub recovery: Option<f64>,
    /// Same metrics restricted to the injected series.
    pub affected: Option<AccuracyBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusinessMetrics {
    /// Newsvendor costs, annualized from their windows.
    pub baseline_cost: f64,
    pub drift_cost: Option<f64>,
    pub retrained_cost: Option<f64>,
    pub compute_cost: Option<f64>,
    /// Plan ROI, projected from the validation window.
    pub roi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainingSummary {
    pub approved: bool,
    pub window_days: u32,
    pub selected_series: usize,
    pub stores_planned: Vec<String>,
    pub stores_deployed: Vec<String>,
    pub stores_rolled_back: Vec<String>,
    pub partial_failure: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub crate_version: String,
    pub panel_format_version: u32,
    pub model_format_version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub detection: DetectionMetrics,
    pub accuracy: AccuracyMetrics,
    pub business: BusinessMetrics,
    pub retraining: Option<RetrainingSummary>,
    pub provenance: Provenance,
}

/// Everything the evaluation reads; each field mirrors a logged artifact.
pub struct EvalInputs<'a> {
    pub clean: &'a Panel,
    /// Drifted panel, or the clean one on control runs.
    pub monitored: &'a Panel,
    pub injection: Option<&'a InjectionRecord>,
    pub clean_forecasts: &'a Forecasts,
    pub monitored_forecasts: &'a Forecasts,
    /// Deployed-model forecasts over the evaluation window.
    pub deployed_forecasts: Option<&'a Forecasts>,
    pub events: &'a [DriftEvent],
    pub control_events: &'a [DriftEvent],
    pub plan: Option<&'a RetrainPlan>,
    pub decisions: &'a [StoreDecision],
    pub cost: &'a CostModel,
    pub baseline_window: (u32, u32),
    pub eval_window: (u32, u32),
    pub provenance: Provenance,
}

/// Actuals, forecasts and prices, one row per series.
type WindowRows = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>);

fn window_rows(panel: &Panel, fc: &Forecasts, series: &[usize], (a, b): (u32, u32)) -> WindowRows {
    let y = series
        .iter()
        .map(|s| (a..=b).map(|d| panel.sales_at(*s, d)).collect())
        .collect();
    let f = series.iter().map(|s| fc.window(*s, a, b).to_vec()).collect();
    let p = series
        .iter()
        .map(|s| (a..=b).map(|d| panel.price_at(*s, d)).collect())
        .collect();
    (y, f, p)
}

fn pooled(panel: &Panel, fc: &Forecasts, series: &[usize], w: (u32, u32)) -> Result<f64> {
    let (y, f, _) = window_rows(panel, fc, series, w);
    wmape(&y.concat(), &f.concat())
}

fn annual_cost(panel: &Panel, fc: &Forecasts, series: &[usize], w: (u32, u32), cost: &CostModel) -> Result<f64> {
    let (y, f, p) = window_rows(panel, fc, series, w);
    Ok(inventory_cost(&y, &f, &p, cost)? * 365.0 / (w.1 - w.0 + 1) as f64)
}

pub fn evaluate(inputs: &EvalInputs) -> Result<EvaluationReport> {
    let all: Vec<usize> = (0..inputs.clean.n_series()).collect();
    let (bw, ew) = (inputs.baseline_window, inputs.eval_window);
    for (fc, w, what) in [
        (inputs.clean_forecasts, bw, "clean"),
        (inputs.monitored_forecasts, ew, "monitored"),
    ] {
        if !fc.covers(w.0, w.1) {
            return Err(Error::validation(format!(
                "{what} forecasts do not cover [{}, {}]",
                w.0, w.1
            )));
        }
    }
    let deployed = inputs.deployed_forecasts.unwrap_or(inputs.monitored_forecasts);
    if !deployed.covers(ew.0, ew.1) {
        return Err(Error::validation(
            "deployed forecasts do not cover the evaluation window",
        ));
    }

    let detection = match inputs.injection {
        Some(truth) => compute_detection_metrics(inputs.events, Some(truth), &[inputs.control_events.to_vec()])?,
        None => control_detection_metrics(inputs.events, &[inputs.control_events.to_vec()]),
    };
    let drifted = inputs.injection.is_some();

    let block = |series: &[usize]| -> Result<AccuracyBlock> {
        Ok(AccuracyBlock {
            baseline_wmape: pooled(inputs.clean, inputs.clean_forecasts, series, bw)?,
            post_drift_wmape: drifted
                .then(|| pooled(inputs.monitored, inputs.monitored_forecasts, series, ew))
                .transpose()?,
            post_retrain_wmape: drifted
                .then(|| pooled(inputs.monitored, deployed, series, ew))
                .transpose()?,
        })
    };
    let overall = block(&all)?;
    let affected = inputs
        .injection
        .map(|t| block(&t.affected_series.iter().copied().collect::<Vec<_>>()))
        .transpose()?;
    let recovery = match (overall.post_drift_wmape, overall.post_retrain_wmape) {
        (Some(d), Some(r)) if d != overall.baseline_wmape => Some((d - r) / (d - overall.baseline_wmape)),
        _ => None,
    };
    let accuracy = AccuracyMetrics {
        baseline_window: bw,
        eval_window: ew,
        baseline_wmape: overall.baseline_wmape,
        post_drift_wmape: overall.post_drift_wmape,
        post_retrain_wmape: overall.post_retrain_wmape,
        recovery,
        affected,
    };

    let business = BusinessMetrics {
        baseline_cost: annual_cost(inputs.clean, inputs.clean_forecasts, &all, bw, inputs.cost)?,
        drift_cost: drifted
            .then(|| annual_cost(inputs.monitored, inputs.monitored_forecasts, &all, ew, inputs.cost))
            .transpose()?,
        retrained_cost: drifted
            .then(|| annual_cost(inputs.monitored, deployed, &all, ew, inputs.cost))
            .transpose()?,
        compute_cost: inputs.plan.map(|p| if p.approved { p.est_compute_cost } else { 0.0 }),
        roi: inputs.plan.map(|p| p.roi),
    };

    let retraining = inputs.plan.map(|p| {
        let pick = |deployed: bool| -> Vec<String> {
            inputs
                .decisions
                .iter()
                .filter(|d| d.deployed == deployed)
                .map(|d| d.store.clone())
                .collect()
        };
        RetrainingSummary {
            approved: p.approved,
            window_days: p.window_days,
            selected_series: p.selected_series.len(),
            stores_planned: p.stores.clone(),
            stores_deployed: pick(true),
            stores_rolled_back: pick(false),
            partial_failure: inputs.decisions.iter().any(|d| d.error.is_some()),
        }
    });

    let report = EvaluationReport {
        detection,
        accuracy,
        business,
        retraining,
        provenance: inputs.provenance.clone(),
    };
    report.detection.check()?;
    Ok(report)
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"))
}

impl EvaluationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<EvaluationReport> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let d = &self.detection;
        let a = &self.accuracy;
        let b = &self.business;
        let _ = writeln!(
            out,
            "seed {}  config {}",
            self.provenance.seed,
            &self.provenance.config_hash[..12]
        );
        let _ = writeln!(out);
        let _ = writeln!(out, "detection");
        let _ = writeln!(out, "  {:<22} {:>12}", "recall", opt(d.recall, 3));
        let _ = writeln!(out, "  {:<22} {:>12}", "precision", opt(d.precision, 3));
        let _ = writeln!(out, "  {:<22} {:>12}", "fpr", opt(d.fpr, 3));
        let _ = writeln!(out, "  {:<22} {:>12}", "latency (days)", opt(d.mean_latency_days, 1));
        let _ = writeln!(out, "  {:<22} {:>12}", "events", d.n_events);
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "accuracy (WMAPE)   {:>10} {:>10} {:>10}",
            "baseline", "drift", "retrained"
        );
        let _ = writeln!(
            out,
            "  {:<16} {:>10} {:>10} {:>10}",
            "all series",
            format!("{:.4}", a.baseline_wmape),
            opt(a.post_drift_wmape, 4),
            opt(a.post_retrain_wmape, 4)
        );
        if let Some(x) = &a.affected {
            let _ = writeln!(
                out,
                "  {:<16} {:>10} {:>10} {:>10}",
                "affected",
                format!("{:.4}", x.baseline_wmape),
                opt(x.post_drift_wmape, 4),
                opt(x.post_retrain_wmape, 4)
            );
        }
        let _ = writeln!(out, "  {:<16} {:>10}", "recovery", opt(a.recovery, 3));
        let _ = writeln!(out);
        let _ = writeln!(out, "business (annualized)");
        let _ = writeln!(
            out,
            "  {:<22} {:>14}",
            "baseline cost",
            format!("{:.2}", b.baseline_cost)
        );
        let _ = writeln!(out, "  {:<22} {:>14}", "drift cost", opt(b.drift_cost, 2));
        let _ = writeln!(out, "  {:<22} {:>14}", "retrained cost", opt(b.retrained_cost, 2));
        let _ = writeln!(out, "  {:<22} {:>14}", "compute cost", opt(b.compute_cost, 4));
        let _ = writeln!(out, "  {:<22} {:>14}", "roi", opt(b.roi, 2));
        if let Some(r) = &self.retraining {
            let _ = writeln!(out);
            let _ = writeln!(
                out,
                "retraining: {} window {}d, {} series selected, deployed [{}], rolled back [{}]",
                if r.approved { "approved" } else { "not approved" },
                r.window_days,
                r.selected_series,
                r.stores_deployed.join(", "),
                r.stores_rolled_back.join(", ")
            );
        }
        out
    }
}

/// Mean with a percentile bootstrap interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub n: usize,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

/// 95% percentile bootstrap interval of the mean. `None` for no values.
pub fn bootstrap_mean(values: &[f64], resamples: usize, seed: u64) -> Option<Interval> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 || resamples == 0 {
        return Some(Interval {
            n,
            mean,
            lo: mean,
            hi: mean,
        });
    }
    let mut r = rng::seeded(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[r.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Some(Interval {
        n,
        mean,
        lo: at(0.025),
        hi: at(0.975),
    })
}
