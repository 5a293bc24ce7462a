//! Baseline forecasting: per-store boosted-tree models over lag, calendar,
//! price and rolling features, bottom-up reconciliation and accuracy metrics.

mod features;
mod gbt;
mod metrics;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use features::{build_features, FeatureSpec, FeatureVector, PRICE_RATIO_WINDOW};
pub(crate) use features::{feature_row, mean_std};
pub use gbt::{train_gbt, GbtHyper, GbtModel, Predictor, RegressionTree, TreeNode, MODEL_FORMAT, MODEL_VERSION};
pub use metrics::{mae, metric_report, rmse, wmape, MetricReport};

use crate::data::{Hierarchy, NodeId, Panel};
use crate::error::{Error, Result};

/// One model per store, keyed by store id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelSet {
    pub models: BTreeMap<String, GbtModel>,
}

impl ModelSet {
    pub fn for_series<'a>(&'a self, panel: &Panel, series: usize) -> Result<&'a GbtModel> {
        let store = &panel.keys()[series].store_id;
        self.models
            .get(store)
            .ok_or_else(|| Error::validation(format!("no model for store {store}")))
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (store, m) in &self.models {
            m.save(&dir.join(format!("{store}.json")))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<ModelSet> {
        let mut models = BTreeMap::new();
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let store = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            models.insert(store, GbtModel::load(&path)?);
        }
        if models.is_empty() {
            return Err(Error::validation(format!("no models in {}", dir.display())));
        }
        Ok(ModelSet { models })
    }
}

/// Feature rows and targets for `series` over target days `[start, end]`.
pub fn training_rows(
    panel: &Panel,
    spec: &FeatureSpec,
    series: &[usize],
    start: u32,
    end: u32,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if start > end || !panel.contains_day(start) || !panel.contains_day(end) {
        return Err(Error::validation(format!(
            "training window [{start}, {end}] outside panel"
        )));
    }
    let mut x = Vec::with_capacity(series.len() * (end - start + 1) as usize);
    let mut y = Vec::with_capacity(x.capacity());
    for &s in series {
        for d in start..=end {
            x.push(feature_row(panel, spec, s, d)?);
            y.push(panel.sales_at(s, d));
        }
    }
    Ok((x, y))
}

pub fn train_model(
    panel: &Panel,
    spec: &FeatureSpec,
    hyper: &GbtHyper,
    series: &[usize],
    start: u32,
    end: u32,
) -> Result<GbtModel> {
    spec.validate()?;
    let (x, y) = training_rows(panel, spec, series, start, end)?;
    let mut model = train_gbt(&x, &y, hyper)?;
    model.feature_spec = Some(spec.clone());
    model.trained_window = Some((start, end));
    Ok(model)
}

/// Trains one pooled model per store over target days `[start, end]`.
/// Stores train concurrently; each model is a pure function of its inputs.
pub fn train_store_models(
    panel: &Panel,
    spec: &FeatureSpec,
    hyper: &GbtHyper,
    start: u32,
    end: u32,
) -> Result<ModelSet> {
    let groups: Vec<(String, Vec<usize>)> = panel.store_groups().into_iter().collect();
    let trained: Vec<(String, GbtModel)> = groups
        .par_iter()
        .map(|(store, series)| Ok((store.clone(), train_model(panel, spec, hyper, series, start, end)?)))
        .collect::<Result<_>>()?;
    Ok(ModelSet {
        models: trained.into_iter().collect(),
    })
}

/// Forecast values for every series over a contiguous day range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecasts {
    pub first_day: u32,
    /// `values[series][day - first_day]`.
    pub values: Vec<Vec<f64>>,
}

impl Forecasts {
    pub fn last_day(&self) -> u32 {
        self.first_day + self.values.first().map_or(0, |r| r.len() as u32) - 1
    }

    pub fn covers(&self, start: u32, end: u32) -> bool {
        !self.values.is_empty() && start >= self.first_day && end <= self.last_day()
    }

    pub fn at(&self, series: usize, day: u32) -> f64 {
        self.values[series][(day - self.first_day) as usize]
    }

    pub fn window(&self, series: usize, start: u32, end: u32) -> &[f64] {
        let a = (start - self.first_day) as usize;
        let b = (end - self.first_day) as usize + 1;
        &self.values[series][a..b]
    }
}

/// One-step-ahead forecasts for every day in `[start, end]`, each built from
/// actual history before that day. Negative predictions are clipped to 0.
pub fn one_step_forecasts(models: &ModelSet, panel: &Panel, start: u32, end: u32) -> Result<Forecasts> {
    one_step_forecasts_for(models, panel, &(0..panel.n_series()).collect::<Vec<_>>(), start, end).map(|values| {
        Forecasts {
            first_day: start,
            values,
        }
    })
}

pub(crate) fn one_step_forecasts_for(
    models: &ModelSet,
    panel: &Panel,
    series: &[usize],
    start: u32,
    end: u32,
) -> Result<Vec<Vec<f64>>> {
    if start > end || !panel.contains_day(start) || !panel.contains_day(end) {
        return Err(Error::validation(format!(
            "forecast window [{start}, {end}] outside panel"
        )));
    }
    series
        .par_iter()
        .map(|&s| {
            let model = models.for_series(panel, s)?;
            let spec = model
                .feature_spec
                .as_ref()
                .ok_or_else(|| Error::validation("model has no feature spec"))?;
            (start..=end)
                .map(|d| Ok(model.predict(&feature_row(panel, spec, s, d)?)?.max(0.0)))
                .collect()
        })
        .collect()
}

/// Recursive multi-step forecast: for `horizon` days starting at `origin`,
/// each prediction is appended to the history used for the next day.
/// Output is `[series][h]`, clipped at 0.
pub fn forecast_panel(models: &ModelSet, panel: &Panel, origin: u32, horizon: usize) -> Result<Vec<Vec<f64>>> {
    if horizon == 0 {
        return Err(Error::validation("horizon must be >= 1"));
    }
    let last = origin as u64 + horizon as u64 - 1;
    if !panel.contains_day(origin) || last > panel.last_day() as u64 {
        return Err(Error::validation(format!(
            "horizon {horizon} from day {origin} exceeds calendar ending at {}",
            panel.last_day()
        )));
    }
    (0..panel.n_series())
        .into_par_iter()
        .map(|s| {
            let model = models.for_series(panel, s)?;
            let spec = model
                .feature_spec
                .as_ref()
                .ok_or_else(|| Error::validation("model has no feature spec"))?;
            let c0 = panel.col(origin);
            let mut history = panel.sales()[s][..c0].to_vec();
            let prices = &panel.prices()[s];
            let mut out = Vec::with_capacity(horizon);
            for h in 0..horizon {
                let c = c0 + h;
                let x = spec.row(s as f64, &history, &panel.calendar()[c], prices[c], &prices[..c]);
                let y = model.predict(&x)?.max(0.0);
                history.push(y);
                out.push(y);
            }
            Ok(out)
        })
        .collect()
}

/// Forecasts for every hierarchy node, indexed by node id.
#[derive(Debug, Clone, PartialEq)]
pub struct CoherentForecasts {
    pub nodes: Vec<Vec<f64>>,
}

impl CoherentForecasts {
    pub fn node(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0]
    }
}

/// Bottom-up reconciliation: leaves keep their forecasts, each internal node
/// is the exact sum of its children.
pub fn reconcile_bottom_up(leaf_forecasts: &[Vec<f64>], hierarchy: &Hierarchy) -> Result<CoherentForecasts> {
    if leaf_forecasts.len() != hierarchy.n_series() {
        return Err(Error::validation(format!(
            "{} leaf forecasts for {} series",
            leaf_forecasts.len(),
            hierarchy.n_series()
        )));
    }
    let len = leaf_forecasts.first().map_or(0, |r| r.len());
    if let Some(s) = leaf_forecasts.iter().position(|r| r.len() != len || r.is_empty()) {
        return Err(Error::validation(format!("missing or ragged forecast for series {s}")));
    }
    let mut nodes = vec![Vec::new(); hierarchy.n_nodes()];
    for id in (0..hierarchy.n_nodes()).map(NodeId) {
        // children always precede parents in the node arena
        let node = hierarchy.node(id);
        nodes[id.0] = if node.children.is_empty() {
            leaf_forecasts[node.leaf_series[0]].clone()
        } else {
            let mut acc = nodes[node.children[0].0].clone();
            for c in &node.children[1..] {
                for (a, v) in acc.iter_mut().zip(&nodes[c.0]) {
                    *a += v;
                }
            }
            acc
        };
    }
    Ok(CoherentForecasts { nodes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::{key, panel_from};
    use crate::data::{aggregate_series, build_hierarchy, Branch, Level};
    use crate::ingest::{generate_synthetic, SynthConfig};
    use crate::rng;
    use rand::Rng;

    fn tiny_synth() -> Panel {
        generate_synthetic(&SynthConfig {
            n_stores: 2,
            n_states: 1,
            n_skus_per_store: 3,
            n_days: 120,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn quick() -> GbtHyper {
        GbtHyper {
            n_trees: 20,
            max_depth: 3,
            min_leaf: 5,
            ..GbtHyper::default()
        }
    }

    #[test]
    fn constant_series_forecast_constant() {
        let keys = vec![key("A", "S", "CA", "F", "F_1"), key("B", "S", "CA", "F", "F_1")];
        let p = panel_from(keys, vec![vec![5.0; 60], vec![5.0; 60]]);
        let models = train_store_models(&p, &FeatureSpec::default(), &quick(), 2, 50).unwrap();
        let f = forecast_panel(&models, &p, 51, 1).unwrap();
        assert_eq!(f, vec![vec![5.0], vec![5.0]]);
    }

    #[test]
    fn negative_predictions_clipped() {
        let keys = vec![key("A", "S", "CA", "F", "F_1")];
        let p = panel_from(keys, vec![vec![1.0; 10]]);
        let spec = FeatureSpec::default();
        let model = GbtModel {
            trees: vec![],
            learning_rate: 0.1,
            base_score: -2.0,
            n_features: spec.n_features(),
            feature_spec: Some(spec),
            trained_window: None,
            hyper: GbtHyper::default(),
        };
        let models = ModelSet {
            models: BTreeMap::from([("S".to_string(), model)]),
        };
        assert_eq!(forecast_panel(&models, &p, 5, 2).unwrap(), vec![vec![0.0, 0.0]]);
        assert_eq!(
            one_step_forecasts(&models, &p, 5, 6).unwrap().values,
            vec![vec![0.0, 0.0]]
        );
    }

    #[test]
    fn horizon_three_equals_manual_chaining() {
        let p = tiny_synth();
        let models = train_store_models(&p, &FeatureSpec::default(), &quick(), 30, 100).unwrap();
        let got = forecast_panel(&models, &p, 101, 3).unwrap();
        for s in 0..p.n_series() {
            let model = models.for_series(&p, s).unwrap();
            let spec = model.feature_spec.as_ref().unwrap();
            let mut hist = p.sales()[s][..100].to_vec();
            for h in 0..3 {
                let c = 100 + h;
                let x = spec.row(s as f64, &hist, &p.calendar()[c], p.prices()[s][c], &p.prices()[s][..c]);
                let y = model.predict(&x).unwrap().max(0.0);
                assert_eq!(got[s][h], y);
                hist.push(y);
            }
        }
    }

    #[test]
    fn horizon_beyond_calendar_rejected() {
        let p = tiny_synth();
        let models = train_store_models(&p, &FeatureSpec::default(), &quick(), 30, 100).unwrap();
        assert!(forecast_panel(&models, &p, 118, 4).is_err());
        assert!(forecast_panel(&models, &p, 101, 0).is_err());
        assert!(forecast_panel(&models, &p, 118, 3).is_ok());
    }

    #[test]
    fn model_set_round_trip() {
        let p = tiny_synth();
        let models = train_store_models(&p, &FeatureSpec::default(), &quick(), 30, 100).unwrap();
        let dir = tempfile::tempdir().unwrap();
        models.save_dir(dir.path()).unwrap();
        assert_eq!(ModelSet::load_dir(dir.path()).unwrap(), models);
    }

    #[test]
    fn reconcile_single_and_pair() {
        let h = build_hierarchy(&[key("A", "S", "CA", "F", "F_1")]).unwrap();
        let r = reconcile_bottom_up(&[vec![2.0, 7.0]], &h).unwrap();
        assert_eq!(r.node(h.root(Branch::Geographic)), &[2.0, 7.0]);

        let keys = vec![key("A", "S", "CA", "F", "F_1"), key("B", "S", "CA", "F", "F_1")];
        let h = build_hierarchy(&keys).unwrap();
        let r = reconcile_bottom_up(&[vec![2.0], vec![3.0]], &h).unwrap();
        let store = h.nodes_at(Branch::Geographic, Level::Store)[0];
        assert_eq!(r.node(store), &[5.0]);
        assert!(reconcile_bottom_up(&[vec![2.0]], &h).is_err());
        assert!(reconcile_bottom_up(&[vec![2.0], vec![]], &h).is_err());
    }

    #[test]
    fn reconcile_fifty_leaves_matches_column_sums() {
        let mut r = rng::seeded(42);
        let keys: Vec<_> = (0..50)
            .map(|i| {
                let st = i % 3;
                let cat = i % 4;
                key(
                    &format!("I{i}"),
                    &format!("S{st}_{}", i % 5),
                    &format!("S{st}"),
                    &format!("C{cat}"),
                    &format!("C{cat}_{}", i % 2),
                )
            })
            .collect();
        let h = build_hierarchy(&keys).unwrap();
        // integer-valued forecasts keep the column-sum oracle exact
        let leaves: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..6).map(|_| r.random_range(0..1000) as f64).collect())
            .collect();
        let rec = reconcile_bottom_up(&leaves, &h).unwrap();
        let oracle: Vec<f64> = (0..6).map(|t| leaves.iter().map(|l| l[t]).sum()).collect();
        assert_eq!(rec.node(h.root(Branch::Geographic)), oracle.as_slice());
        assert_eq!(rec.node(h.root(Branch::Product)), oracle.as_slice());
        // leaves unchanged, and reconciliation agrees with panel aggregation
        let p = panel_from(keys, leaves.clone());
        for id in h.branch_nodes(Branch::Geographic) {
            assert_eq!(rec.node(id), aggregate_series(&p, &h, id).unwrap().as_slice());
        }
    }
}
