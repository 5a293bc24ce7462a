//! Cost-aware remediation: training-window choice, top-K series selection,
//! newsvendor inventory cost, ROI gating and store-level retraining with
//! rollback.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Panel;
use crate::error::{Error, Result};
use crate::forecast::{
    feature_row, metric_report, train_model, wmape, FeatureSpec, GbtHyper, GbtModel, MetricReport, ModelSet,
};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub holding_ratio: f64,
    pub stockout_ratio: f64,
    /// Currency per (series x training day). Unset: a full-panel 180-day
    /// retrain costs 1.0.
    pub compute_cost_rate: Option<f64>,
    /// Currency per unit of validation WMAPE in the window objective.
    pub lambda: f64,
    /// Minimum ΔWMAPE for a series to qualify.
    pub tau: f64,
    /// Unset: 20% of the series count.
    pub top_k: Option<usize>,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            holding_ratio: 0.3,
            stockout_ratio: 0.7,
            compute_cost_rate: None,
            lambda: 100.0,
            tau: 0.02,
            top_k: None,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("cost: {m}")));
        if self.holding_ratio < 0.0 || self.stockout_ratio < 0.0 || self.lambda < 0.0 || self.tau < 0.0 {
            return bad("ratios, lambda and tau must be >= 0");
        }
        if (self.holding_ratio + self.stockout_ratio - 1.0).abs() > 1e-12 {
            return bad("holding_ratio + stockout_ratio must equal 1");
        }
        if self.compute_cost_rate.is_some_and(|r| !(r > 0.0)) {
            return bad("compute_cost_rate must be positive");
        }
        if self.top_k == Some(0) {
            return bad("top_k must be >= 1");
        }
        Ok(())
    }

    pub fn rate(&self, n_series: usize) -> f64 {
        self.compute_cost_rate.unwrap_or(1.0 / (n_series.max(1) as f64 * 180.0))
    }

    pub fn k(&self, n_series: usize) -> usize {
        self.top_k.unwrap_or(((n_series as f64 * 0.2).round() as usize).max(1))
    }

    pub fn compute_cost(&self, n_panel_series: usize, n_trained: usize, window: u32) -> f64 {
        self.rate(n_panel_series) * n_trained as f64 * window as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub candidate_windows: Vec<u32>,
    pub validation_days: u32,
    pub probe_series_cap: usize,
    /// Days per year used to annualize the validation-window saving.
    pub annualization_days: f64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            candidate_windows: vec![30, 60, 90, 180],
            validation_days: 14,
            probe_series_cap: 20,
            annualization_days: 365.0,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidate_windows.is_empty() || self.candidate_windows.contains(&0) {
            return Err(Error::Config(
                "plan: candidate windows must be non-empty and positive".into(),
            ));
        }
        if self.validation_days == 0 || self.probe_series_cap == 0 || !(self.annualization_days > 0.0) {
            return Err(Error::Config(
                "plan: validation_days, probe_series_cap and annualization_days must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Validation window `[plan_day - validation_days, plan_day - 1]`.
    pub fn validation(&self, plan_day: u32) -> Result<(u32, u32)> {
        if plan_day <= self.validation_days + 1 {
            return Err(Error::InsufficientData(format!(
                "plan day {plan_day} leaves no validation window"
            )));
        }
        Ok((plan_day - self.validation_days, plan_day - 1))
    }

    /// Training target days for window `w`: the `w` days before validation.
    pub fn training(&self, plan_day: u32, w: u32) -> Option<(u32, u32)> {
        let end = plan_day.checked_sub(self.validation_days + 1)?;
        let start = (end + 1).checked_sub(w)?;
        (start >= 1).then_some((start, end))
    }
}

/// Series with ΔWMAPE > tau, highest first, at most `top_k`. Ties go to
/// the lower series index.
pub fn select_series(delta_wmape: &BTreeMap<usize, f64>, tau: f64, top_k: usize) -> Vec<usize> {
    let mut q: Vec<(usize, f64)> = delta_wmape
        .iter()
        .filter(|(_, d)| **d > tau)
        .map(|(s, d)| (*s, *d))
        .collect();
    q.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    q.truncate(top_k);
    q.into_iter().map(|(s, _)| s).collect()
}

/// Newsvendor cost `Σ price * (stockout * max(y - ŷ, 0) + holding * max(ŷ - y, 0))`.
pub fn inventory_cost(
    actuals: &[Vec<f64>],
    forecasts: &[Vec<f64>],
    prices: &[Vec<f64>],
    cost: &CostModel,
) -> Result<f64> {
    if actuals.len() != forecasts.len() || actuals.len() != prices.len() {
        return Err(Error::validation("inventory cost: series count mismatch"));
    }
    let mut total = 0.0;
    for ((y, f), p) in actuals.iter().zip(forecasts).zip(prices) {
        if y.len() != f.len() || y.len() != p.len() {
            return Err(Error::validation("inventory cost: day count mismatch"));
        }
        for ((y, f), p) in y.iter().zip(f).zip(p) {
            total += p * (cost.stockout_ratio * (y - f).max(0.0) + cost.holding_ratio * (f - y).max(0.0));
        }
    }
    Ok(total)
}

/// `(ΔC_inventory - C_compute) / C_compute`.
pub fn roi(delta_inventory_cost: f64, compute_cost: f64) -> Result<f64> {
    if !(compute_cost > 0.0) {
        return Err(Error::UndefinedMetric(format!("ROI with compute cost {compute_cost}")));
    }
    Ok((delta_inventory_cost - compute_cost) / compute_cost)
}

/// One-step forecasts of a single model for `series` over `[start, end]`, clipped at 0.
pub fn model_forecasts(
    model: &GbtModel,
    panel: &Panel,
    series: &[usize],
    start: u32,
    end: u32,
) -> Result<Vec<Vec<f64>>> {
    let spec = model
        .feature_spec
        .as_ref()
        .ok_or_else(|| Error::validation("model has no feature spec"))?;
    series
        .iter()
        .map(|&s| {
            (start..=end)
                .map(|d| Ok(model.predict(&feature_row(panel, spec, s, d)?)?.max(0.0)))
                .collect()
        })
        .collect()
}

fn actuals(panel: &Panel, series: &[usize], start: u32, end: u32) -> Vec<Vec<f64>> {
    series
        .iter()
        .map(|&s| (start..=end).map(|d| panel.sales_at(s, d)).collect())
        .collect()
}

fn prices(panel: &Panel, series: &[usize], start: u32, end: u32) -> Vec<Vec<f64>> {
    series
        .iter()
        .map(|&s| (start..=end).map(|d| panel.price_at(s, d)).collect())
        .collect()
}

fn pooled_wmape(actual: &[Vec<f64>], forecast: &[Vec<f64>]) -> Result<f64> {
    wmape(&actual.concat(), &forecast.concat())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowProbe {
    pub window_days: u32,
    pub compute_cost: f64,
    pub val_wmape: f64,
    /// `compute_cost + lambda * val_wmape`.
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowChoice {
    pub window_days: u32,
    pub probe_series: Vec<usize>,
    pub probes: Vec<WindowProbe>,
    /// Some candidates lacked history; the largest feasible one was taken.
    pub fallback: bool,
}

/// Picks `argmin_w C_compute(w) + lambda * L_val(w)` with probe models trained
/// on up to `probe_series_cap` scope series. Ties go to the smaller window.
#[allow(clippy::too_many_arguments)]
pub fn select_window(
    panel: &Panel,
    drift_scope: &[usize],
    plan_day: u32,
    cost: &CostModel,
    plan: &PlanConfig,
    spec: &FeatureSpec,
    hyper: &GbtHyper,
    seed: u64,
) -> Result<WindowChoice> {
    plan.validate()?;
    if drift_scope.is_empty() {
        return Err(Error::validation("window selection needs a non-empty drift scope"));
    }
    let (v0, v1) = plan.validation(plan_day)?;
    if !panel.contains_day(v1) {
        return Err(Error::validation(format!(
            "validation window ends after the panel (day {v1})"
        )));
    }
    let mut candidates = plan.candidate_windows.clone();
    candidates.sort_unstable();
    candidates.dedup();
    let feasible: Vec<u32> = candidates
        .iter()
        .copied()
        .filter(|w| plan.training(plan_day, *w).is_some_and(|(a, _)| panel.contains_day(a)))
        .collect();
    let Some(&largest) = feasible.last() else {
        return Err(Error::InsufficientData(format!(
            "no candidate window fits before validation day {v0}"
        )));
    };

    let probe_series: Vec<usize> = if drift_scope.len() <= plan.probe_series_cap {
        drift_scope.to_vec()
    } else {
        let mut idx: Vec<usize> = index::sample(&mut rng::seeded(seed), drift_scope.len(), plan.probe_series_cap)
            .into_iter()
            .map(|i| drift_scope[i])
            .collect();
        idx.sort_unstable();
        idx
    };

    let actual = actuals(panel, &probe_series, v0, v1);
    let probes: Vec<WindowProbe> = feasible
        .par_iter()
        .map(|&w| {
            let (a, b) = plan.training(plan_day, w).expect("feasible");
            let model = train_model(panel, spec, hyper, &probe_series, a, b)?;
            let fc = model_forecasts(&model, panel, &probe_series, v0, v1)?;
            let val_wmape = pooled_wmape(&actual, &fc)?;
            let compute_cost = cost.compute_cost(panel.n_series(), probe_series.len(), w);
            Ok(WindowProbe {
                window_days: w,
                compute_cost,
                val_wmape,
                objective: compute_cost + cost.lambda * val_wmape,
            })
        })
        .collect::<Result<_>>()?;

    let fallback = feasible.len() < candidates.len();
    let window_days = if fallback {
        log::warn!(
            "only {} of {} candidate windows fit; using {largest}",
            feasible.len(),
            candidates.len()
        );
        largest
    } else {
        argmin_window(&probes)
    };
    Ok(WindowChoice {
        window_days,
        probe_series,
        probes,
        fallback,
    })
}

/// Smallest-objective probe; probes are in ascending window order so the
/// strict comparison keeps the smaller window on ties.
pub fn argmin_window(probes: &[WindowProbe]) -> u32 {
    let mut best = &probes[0];
    for p in &probes[1..] {
        if p.objective < best.objective {
            best = p;
        }
    }
    best.window_days
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainPlan {
    pub plan_day: u32,
    pub validation: (u32, u32),
    pub window_days: u32,
    pub window: WindowChoice,
    pub selected_series: Vec<usize>,
    /// Stores whose pooled model covers a selected series.
    pub stores: Vec<String>,
    /// Series served by those stores' models.
    pub retrained_series: usize,
    /// Validation-window newsvendor cost of the selected series under the
    /// current and candidate models.
    pub val_cost_current: f64,
    pub val_cost_candidate: f64,
    pub est_compute_cost: f64,
    /// Validation-window saving, annualized.
    pub est_inventory_saving: f64,
    pub roi: f64,
    pub approved: bool,
}

fn stores_of(panel: &Panel, series: &[usize]) -> Vec<String> {
    series
        .iter()
        .map(|s| panel.keys()[*s].store_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Selected series served by one store model; savings and rollback are
/// judged on these.
fn targets_in(selected: &[usize], store_series: &[usize]) -> Vec<usize> {
    store_series
        .iter()
        .copied()
        .filter(|s| selected.binary_search(s).is_ok())
        .collect()
}

fn candidate_models(
    panel: &Panel,
    stores: &[String],
    window: (u32, u32),
    spec: &FeatureSpec,
    hyper: &GbtHyper,
) -> Vec<(String, Result<GbtModel>)> {
    let groups = panel.store_groups();
    stores
        .par_iter()
        .map(|store| {
            (
                store.clone(),
                train_model(panel, spec, hyper, &groups[store], window.0, window.1),
            )
        })
        .collect()
}

/// Builds the plan: window choice, top-K series, candidate store models on
/// the chosen window and the ROI of replacing them, projected from the
/// validation window.
#[allow(clippy::too_many_arguments)]
pub fn build_plan(
    panel: &Panel,
    models: &ModelSet,
    delta_wmape: &BTreeMap<usize, f64>,
    drift_scope: &[usize],
    plan_day: u32,
    cost: &CostModel,
    plan: &PlanConfig,
    spec: &FeatureSpec,
    hyper: &GbtHyper,
    seed: u64,
) -> Result<RetrainPlan> {
    cost.validate()?;
    let selected = select_series(delta_wmape, cost.tau, cost.k(panel.n_series()));
    let scope: Vec<usize> = if selected.is_empty() {
        drift_scope.to_vec()
    } else {
        selected.clone()
    };
    let window = select_window(panel, &scope, plan_day, cost, plan, spec, hyper, seed)?;
    let validation = plan.validation(plan_day)?;
    let stores = stores_of(panel, &selected);
    let groups = panel.store_groups();
    let mut sorted = selected.clone();
    sorted.sort_unstable();

    let mut val_cost_current = 0.0;
    let mut val_cost_candidate = 0.0;
    let mut retrained_series = 0;
    let train_days = plan.training(plan_day, window.window_days).expect("feasible window");
    for (store, candidate) in candidate_models(panel, &stores, train_days, spec, hyper) {
        let targets = targets_in(&sorted, &groups[&store]);
        let current = models
            .models
            .get(&store)
            .ok_or_else(|| Error::validation(format!("no model for store {store}")))?;
        let y = actuals(panel, &targets, validation.0, validation.1);
        let p = prices(panel, &targets, validation.0, validation.1);
        let cur = inventory_cost(
            &y,
            &model_forecasts(current, panel, &targets, validation.0, validation.1)?,
            &p,
            cost,
        )?;
        // a store whose candidate fails to train contributes no change
        let cand = match candidate {
            Ok(m) => inventory_cost(
                &y,
                &model_forecasts(&m, panel, &targets, validation.0, validation.1)?,
                &p,
                cost,
            )?,
            Err(e) => {
                log::warn!("candidate model for {store} failed: {e}");
                cur
            }
        };
        val_cost_current += cur;
        val_cost_candidate += cand;
        retrained_series += groups[&store].len();
    }
    let est_compute_cost = cost.compute_cost(panel.n_series(), retrained_series, window.window_days);
    let scale = plan.annualization_days / plan.validation_days as f64;
    let est_inventory_saving = (val_cost_current - val_cost_candidate) * scale;
    let (roi, approved) = if selected.is_empty() {
        (0.0, false)
    } else {
        let r = roi(est_inventory_saving, est_compute_cost)?;
        (r, r > 0.0)
    };
    Ok(RetrainPlan {
        plan_day,
        validation,
        window_days: window.window_days,
        window,
        selected_series: selected,
        stores,
        retrained_series,
        val_cost_current,
        val_cost_candidate,
        est_compute_cost,
        est_inventory_saving,
        roi,
        approved,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreDecision {
    pub store: String,
    pub val_wmape_before: Option<f64>,
    pub val_wmape_after: Option<f64>,
    pub deployed: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrainOutcome {
    pub models: ModelSet,
    pub decisions: Vec<StoreDecision>,
    /// Selected series over the evaluation window, before and after.
    pub before: Option<MetricReport>,
    pub after: Option<MetricReport>,
}

impl RetrainOutcome {
    pub fn partial_failure(&self) -> bool {
        self.decisions.iter().any(|d| d.error.is_some())
    }
}

/// Retrains every store model in the plan on the chosen window and deploys
/// it only when validation WMAPE over the store's selected series improves.
pub fn execute_retraining(
    panel: &Panel,
    models: &ModelSet,
    plan: &RetrainPlan,
    plan_config: &PlanConfig,
    spec: &FeatureSpec,
    hyper: &GbtHyper,
    eval_window: Option<(u32, u32)>,
) -> Result<RetrainOutcome> {
    let mut updated = models.clone();
    let mut decisions = vec![];
    if plan.approved {
        let (v0, v1) = plan.validation;
        let train_days = plan_config
            .training(plan.plan_day, plan.window_days)
            .ok_or_else(|| Error::InsufficientData("plan window does not fit the panel".into()))?;
        let groups = panel.store_groups();
        let mut selected = plan.selected_series.clone();
        selected.sort_unstable();
        for (store, candidate) in candidate_models(panel, &plan.stores, train_days, spec, hyper) {
            let targets = targets_in(&selected, &groups[&store]);
            let y = actuals(panel, &targets, v0, v1);
            let current = models
                .models
                .get(&store)
                .ok_or_else(|| Error::validation(format!("no model for store {store}")))?;
            let before = pooled_wmape(&y, &model_forecasts(current, panel, &targets, v0, v1)?)?;
            let decision = match candidate.and_then(|m| {
                let after = pooled_wmape(&y, &model_forecasts(&m, panel, &targets, v0, v1)?)?;
                Ok((m, after))
            }) {
                Ok((m, after)) => {
                    let deployed = after < before;
                    if deployed {
                        updated.models.insert(store.clone(), m);
                    } else {
                        log::info!("rollback {store}: validation WMAPE {after:.4} >= {before:.4}");
                    }
                    StoreDecision {
                        store,
                        val_wmape_before: Some(before),
                        val_wmape_after: Some(after),
                        deployed,
                        error: None,
                    }
                }
                Err(e) => StoreDecision {
                    store,
                    val_wmape_before: Some(before),
                    val_wmape_after: None,
                    deployed: false,
                    error: Some(e.to_string()),
                },
            };
            decisions.push(decision);
        }
    }
    let (before, after) = match eval_window {
        Some((a, b)) if !plan.selected_series.is_empty() => {
            let sel = &plan.selected_series;
            let y = actuals(panel, sel, a, b);
            let f0 = crate::forecast::one_step_forecasts_for(models, panel, sel, a, b)?;
            let f1 = crate::forecast::one_step_forecasts_for(&updated, panel, sel, a, b)?;
            (Some(metric_report(sel, &y, &f0)?), Some(metric_report(sel, &y, &f1)?))
        }
        _ => (None, None),
    };
    Ok(RetrainOutcome {
        models: updated,
        decisions,
        before,
        after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::{key, panel_from};
    use crate::forecast::train_store_models;
    use proptest::prelude::*;

    #[test]
    fn select_series_cases() {
        let d: BTreeMap<usize, f64> = [(0, 0.5), (1, 0.3), (2, 0.1)].into_iter().collect();
        assert_eq!(select_series(&d, 0.2, 2), vec![0, 1]);
        assert_eq!(select_series(&d, 0.6, 2), Vec::<usize>::new());
        assert_eq!(select_series(&d, 0.0, 10), vec![0, 1, 2]);
        let ties: BTreeMap<usize, f64> = [(4, 0.3), (2, 0.3), (7, 0.3)].into_iter().collect();
        assert_eq!(select_series(&ties, 0.1, 2), vec![2, 4]);
    }

    proptest! {
        #[test]
        fn select_series_properties(
            deltas in proptest::collection::btree_map(0usize..100, -1.0f64..1.0, 0..50),
            tau in 0.0f64..0.5,
            k in 1usize..20,
        ) {
            let out = select_series(&deltas, tau, k);
            prop_assert!(out.len() <= k);
            prop_assert!(out.iter().all(|s| deltas[s] > tau));
            prop_assert!(out.windows(2).all(|w| deltas[&w[0]] >= deltas[&w[1]]));
            prop_assert_eq!(out, select_series(&deltas, tau, k));
        }

        #[test]
        fn roi_is_linear_in_saving(c in 0.01f64..100.0, a in -1e3f64..1e3, b in -1e3f64..1e3) {
            let lhs = roi(a + b, c).unwrap() + 1.0;
            let rhs = (roi(a, c).unwrap() + 1.0) + (roi(b, c).unwrap() + 1.0);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
        }

        #[test]
        fn inventory_cost_non_negative(
            y in proptest::collection::vec(0.0f64..50.0, 1..20),
            noise in proptest::collection::vec(-10.0f64..10.0, 20),
        ) {
            let f: Vec<f64> = y.iter().zip(&noise).map(|(a, n)| (a + n).max(0.0)).collect();
            let p = vec![1.5; y.len()];
            let c = inventory_cost(std::slice::from_ref(&y), std::slice::from_ref(&f), std::slice::from_ref(&p), &CostModel::default()).unwrap();
            prop_assert!(c >= 0.0);
            prop_assert_eq!(c == 0.0, y == f);
        }
    }

    #[test]
    fn cost_and_roi_cases() {
        let c = CostModel::default();
        assert_eq!(
            inventory_cost(&[vec![10.0]], &[vec![10.0]], &[vec![2.0]], &c).unwrap(),
            0.0
        );
        assert!((inventory_cost(&[vec![10.0]], &[vec![7.0]], &[vec![2.0]], &c).unwrap() - 4.2).abs() < 1e-12);
        assert!((inventory_cost(&[vec![10.0]], &[vec![13.0]], &[vec![2.0]], &c).unwrap() - 1.8).abs() < 1e-12);
        assert!(inventory_cost(&[vec![10.0]], &[vec![1.0, 2.0]], &[vec![2.0]], &c).is_err());
        assert_eq!(roi(100.0, 10.0).unwrap(), 9.0);
        assert_eq!(roi(10.0, 10.0).unwrap(), 0.0);
        assert!((roi(4.0e6, 9.6e3).unwrap() - 415.6667).abs() < 1e-3);
        assert!(matches!(roi(1.0, 0.0), Err(Error::UndefinedMetric(_))));
        assert!((c.rate(200) * 200.0 * 180.0 - 1.0).abs() < 1e-12);
        assert_eq!(c.k(200), 40);
        let mut bad = c.clone();
        bad.holding_ratio = 0.5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn argmin_limits() {
        let probes = |l: [f64; 4], cost: &CostModel| -> Vec<WindowProbe> {
            [30u32, 60, 90, 180]
                .iter()
                .zip(l)
                .map(|(w, v)| {
                    let c = cost.compute_cost(200, 20, *w);
                    WindowProbe {
                        window_days: *w,
                        compute_cost: c,
                        val_wmape: v,
                        objective: c + cost.lambda * v,
                    }
                })
                .collect()
        };
        let zero = CostModel {
            lambda: 0.0,
            ..CostModel::default()
        };
        assert_eq!(argmin_window(&probes([0.5, 0.1, 0.2, 0.05], &zero)), 30);
        let huge = CostModel {
            lambda: 1e9,
            ..CostModel::default()
        };
        assert_eq!(argmin_window(&probes([0.5, 0.1, 0.2, 0.05], &huge)), 180);
        assert_eq!(argmin_window(&probes([0.3, 0.3, 0.3, 0.3], &CostModel::default())), 30);
    }

    fn shock_panel() -> Panel {
        let mut keys = vec![];
        let mut sales = vec![];
        for st in ["CA_1", "CA_2"] {
            for i in 0..6 {
                keys.push(key(&format!("FOODS_1_{i:03}"), st, "CA", "FOODS", "FOODS_1"));
                let s = keys.len();
                sales.push(
                    (0..300usize)
                        .map(|d| {
                            let base = 20.0 + 3.0 * ((d * 7 + s * 13) % 5) as f64;
                            if st == "CA_1" && d >= 230 {
                                base * 0.5
                            } else {
                                base
                            }
                        })
                        .collect(),
                );
            }
        }
        panel_from(keys, sales)
    }

    fn small_hyper() -> GbtHyper {
        GbtHyper {
            n_trees: 20,
            max_depth: 3,
            learning_rate: 0.3,
            min_leaf: 5,
            seed: 0,
        }
    }

    #[test]
    fn plan_and_execute_on_store_shock() {
        let panel = shock_panel();
        let spec = FeatureSpec::default();
        let hyper = small_hyper();
        let models = train_store_models(&panel, &spec, &hyper, 20, 200).unwrap();
        let plan_day = 290;
        let delta: BTreeMap<usize, f64> = (0..12).map(|s| (s, if s < 6 { 0.4 } else { 0.0 })).collect();
        let cost = CostModel {
            top_k: Some(6),
            ..CostModel::default()
        };
        let pc = PlanConfig::default();
        let plan = build_plan(
            &panel,
            &models,
            &delta,
            &[0, 1, 2],
            plan_day,
            &cost,
            &pc,
            &spec,
            &hyper,
            1,
        )
        .unwrap();
        assert_eq!(plan.selected_series, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(plan.stores, vec!["CA_1".to_string()]);
        assert!(pc.candidate_windows.contains(&plan.window_days));
        assert_eq!(plan.approved, plan.roi > 0.0);
        let recomputed = roi(plan.est_inventory_saving, plan.est_compute_cost).unwrap();
        assert_eq!(recomputed, plan.roi);
        assert!(plan.approved);

        let out = execute_retraining(&panel, &models, &plan, &pc, &spec, &hyper, Some((plan_day, 300))).unwrap();
        assert_eq!(out.models.models["CA_2"], models.models["CA_2"]);
        for d in &out.decisions {
            if d.deployed {
                assert!(d.val_wmape_after.unwrap() < d.val_wmape_before.unwrap());
            }
        }
        assert!(out.after.as_ref().unwrap().wmape < out.before.as_ref().unwrap().wmape);
    }

    #[test]
    fn empty_selection_changes_nothing() {
        let panel = shock_panel();
        let spec = FeatureSpec::default();
        let hyper = small_hyper();
        let models = train_store_models(&panel, &spec, &hyper, 20, 200).unwrap();
        let delta: BTreeMap<usize, f64> = (0..12).map(|s| (s, 0.0)).collect();
        let pc = PlanConfig::default();
        let plan = build_plan(
            &panel,
            &models,
            &delta,
            &[0, 1],
            290,
            &CostModel::default(),
            &pc,
            &spec,
            &hyper,
            0,
        )
        .unwrap();
        assert!(plan.selected_series.is_empty() && !plan.approved);
        let out = execute_retraining(&panel, &models, &plan, &pc, &spec, &hyper, Some((290, 300))).unwrap();
        assert_eq!(out.models, models);
        assert!(out.decisions.is_empty());
    }

    #[test]
    fn window_fallback_when_history_short() {
        let panel = shock_panel();
        let spec = FeatureSpec::default();
        let hyper = small_hyper();
        let pc = PlanConfig::default();
        // plan day 150: 180-day window does not fit
        let w = select_window(&panel, &[0, 1], 150, &CostModel::default(), &pc, &spec, &hyper, 0).unwrap();
        assert!(w.fallback);
        assert_eq!(w.window_days, 90);
        assert!(select_window(&panel, &[0], 40, &CostModel::default(), &pc, &spec, &hyper, 0).is_err());
    }

    #[test]
    fn window_choice_recomputes_from_probes() {
        let panel = shock_panel();
        let spec = FeatureSpec::default();
        let hyper = small_hyper();
        let cost = CostModel::default();
        let w = select_window(&panel, &[0, 1, 2], 290, &cost, &PlanConfig::default(), &spec, &hyper, 3).unwrap();
        for p in &w.probes {
            assert_eq!(p.objective, p.compute_cost + cost.lambda * p.val_wmape);
        }
        let best = w.probes.iter().map(|p| p.objective).fold(f64::INFINITY, f64::min);
        let first_best = w.probes.iter().find(|p| p.objective == best).unwrap();
        assert_eq!(w.window_days, first_best.window_days);
    }
}
