//! Shapley attribution of forecaster predictions, period-to-period
//! attribution shifts, and hierarchical severity maps.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Branch, Hierarchy, Level, NodeId, Panel};
use crate::error::{Error, Result};
use crate::forecast::{GbtModel, Predictor, TreeNode};
use crate::rng;

/// Largest feature subset handled by full enumeration.
pub const MAX_EXACT_FEATURES: usize = 16;
pub const MIN_PERMUTATIONS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapResult {
    /// One value per model feature; features outside the attributed subset are 0.
    pub phi: Vec<f64>,
    /// g(∅).
    pub base_value: f64,
    /// g(N).
    pub prediction: f64,
}

impl ShapResult {
    pub fn efficiency_gap(&self) -> f64 {
        self.base_value + self.phi.iter().sum::<f64>() - self.prediction
    }
}

fn check_inputs<M: Predictor + ?Sized>(model: &M, instance: &[f64], background: &[Vec<f64>]) -> Result<()> {
    let n = model.n_features();
    if instance.len() != n {
        return Err(Error::validation(format!(
            "instance has {} features, model expects {n}",
            instance.len()
        )));
    }
    if background.is_empty() {
        return Err(Error::validation("background set is empty"));
    }
    if background.iter().any(|b| b.len() != n) {
        return Err(Error::validation("background row width does not match the model"));
    }
    Ok(())
}

/// Interventional value of every coalition of `subset`, indexed by bitmask:
/// features in the coalition come from `instance`, the rest of the subset
/// from each background row in turn, everything else stays at `instance`.
fn coalition_values<M: Predictor + ?Sized>(
    model: &M,
    instance: &[f64],
    background: &[Vec<f64>],
    subset: &[usize],
) -> Vec<f64> {
    let m = subset.len();
    let mut x = instance.to_vec();
    (0..1usize << m)
        .map(|mask| {
            let mut total = 0.0;
            for b in background {
                for (bit, &f) in subset.iter().enumerate() {
                    x[f] = if mask >> bit & 1 == 1 { instance[f] } else { b[f] };
                }
                total += model.predict_row(&x);
            }
            total / background.len() as f64
        })
        .collect()
}

/// Exact Shapley values over `subset` by enumerating all coalitions.
pub fn shapley_exact<M: Predictor + ?Sized>(
    model: &M,
    instance: &[f64],
    background: &[Vec<f64>],
    subset: &[usize],
) -> Result<ShapResult> {
    check_inputs(model, instance, background)?;
    let m = subset.len();
    if m > MAX_EXACT_FEATURES {
        return Err(Error::SubsetTooLarge {
            max: MAX_EXACT_FEATURES,
            got: m,
        });
    }
    if subset.iter().any(|f| *f >= instance.len()) {
        return Err(Error::validation("feature subset index out of range"));
    }
    let mut sorted = subset.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != m {
        return Err(Error::validation("feature subset has duplicates"));
    }

    let g = coalition_values(model, instance, background, subset);
    // weight(s) = s! (m - s - 1)! / m!
    let mut fact = vec![1.0f64; m + 1];
    for i in 1..=m {
        fact[i] = fact[i - 1] * i as f64;
    }
    let weight: Vec<f64> = (0..m).map(|s| fact[s] * fact[m - s - 1] / fact[m]).collect();
    let mut phi = vec![0.0; instance.len()];
    for (bit, &f) in subset.iter().enumerate() {
        let mut acc = 0.0;
        for mask in 0..1usize << m {
            if mask >> bit & 1 == 0 {
                acc += weight[mask.count_ones() as usize] * (g[mask | 1 << bit] - g[mask]);
            }
        }
        phi[f] = acc;
    }
    Ok(ShapResult {
        phi,
        base_value: g[0],
        prediction: g[(1usize << m) - 1],
    })
}

/// Largest subset handled by [`shapley_tree`].
pub const MAX_TREE_FEATURES: usize = 64;

/// Exact interventional Shapley values for a boosted-tree model, equal to
/// [`shapley_exact`] up to rounding but linear in tree size. For one tree and
/// one background row, each reachable leaf is a game `v * [P ⊆ S][Q ∩ S = ∅]`
/// whose Shapley values have a closed form.
pub fn shapley_tree(
    model: &GbtModel,
    instance: &[f64],
    background: &[Vec<f64>],
    subset: &[usize],
) -> Result<ShapResult> {
    check_inputs(model, instance, background)?;
    let m = subset.len();
    if m > MAX_TREE_FEATURES {
        return Err(Error::SubsetTooLarge {
            max: MAX_TREE_FEATURES,
            got: m,
        });
    }
    let mut bit_of = vec![None; instance.len()];
    for (bit, &f) in subset.iter().enumerate() {
        match bit_of.get_mut(f) {
            None => return Err(Error::validation("feature subset index out of range")),
            Some(Some(_)) => return Err(Error::validation("feature subset has duplicates")),
            Some(slot) => *slot = Some(bit),
        }
    }
    let mut fact = vec![1.0f64; m + 1];
    for i in 1..=m {
        fact[i] = fact[i - 1] * i as f64;
    }

    let scale = model.learning_rate / background.len() as f64;
    let mut phi_bits = vec![0.0; m];
    let mut base_value = model.base_score;
    let mut prediction = model.base_score;
    let mut stack = vec![];
    for tree in &model.trees {
        for b in background {
            // (node, must-include mask, must-exclude mask)
            stack.push((0usize, 0u64, 0u64));
            while let Some((i, on, off)) = stack.pop() {
                match &tree.nodes[i] {
                    TreeNode::Leaf { value } => {
                        let w = value * scale;
                        let (p, q) = (on.count_ones() as usize, off.count_ones() as usize);
                        if p == 0 {
                            base_value += w;
                        }
                        if q == 0 {
                            prediction += w;
                        }
                        if p + q == 0 {
                            continue;
                        }
                        let gain = if p > 0 {
                            w * fact[p - 1] * fact[q] / fact[p + q]
                        } else {
                            0.0
                        };
                        let loss = if q > 0 {
                            w * fact[p] * fact[q - 1] / fact[p + q]
                        } else {
                            0.0
                        };
                        for (bit, v) in phi_bits.iter_mut().enumerate() {
                            if on >> bit & 1 == 1 {
                                *v += gain;
                            } else if off >> bit & 1 == 1 {
                                *v -= loss;
                            }
                        }
                    }
                    TreeNode::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        let go = |v: f64| if v < *threshold { *left } else { *right };
                        let from_x = go(instance[*feature]);
                        match bit_of[*feature] {
                            None => stack.push((from_x, on, off)),
                            Some(bit) => {
                                let from_b = go(b[*feature]);
                                if from_x == from_b {
                                    stack.push((from_x, on, off));
                                    continue;
                                }
                                let mask = 1u64 << bit;
                                if off & mask == 0 {
                                    stack.push((from_x, on | mask, off));
                                }
                                if on & mask == 0 {
                                    stack.push((from_b, on, off | mask));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let mut phi = vec![0.0; instance.len()];
    for (bit, &f) in subset.iter().enumerate() {
        phi[f] = phi_bits[bit];
    }
    Ok(ShapResult {
        phi,
        base_value,
        prediction,
    })
}

/// Monte Carlo permutation estimate over all features. Permutation `k`
/// walks from background row `k mod |background|` to the instance. The
/// efficiency residual is spread in proportion to `|phi|`.
pub fn shapley_sampled<M: Predictor + ?Sized>(
    model: &M,
    instance: &[f64],
    background: &[Vec<f64>],
    n_permutations: usize,
    seed: u64,
) -> Result<ShapResult> {
    check_inputs(model, instance, background)?;
    if n_permutations < MIN_PERMUTATIONS {
        return Err(Error::validation(format!(
            "need at least {MIN_PERMUTATIONS} permutations"
        )));
    }
    let n = instance.len();
    let mut r = rng::seeded(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut phi = vec![0.0; n];
    for k in 0..n_permutations {
        order.shuffle(&mut r);
        let mut x = background[k % background.len()].clone();
        let mut prev = model.predict_row(&x);
        for &f in &order {
            x[f] = instance[f];
            let cur = model.predict_row(&x);
            phi[f] += cur - prev;
            prev = cur;
        }
    }
    phi.iter_mut().for_each(|v| *v /= n_permutations as f64);

    let base_value = background.iter().map(|b| model.predict_row(b)).sum::<f64>() / background.len() as f64;
    let prediction = model.predict_row(instance);
    let residual = prediction - base_value - phi.iter().sum::<f64>();
    let mass: f64 = phi.iter().map(|v| v.abs()).sum();
    if mass > 0.0 {
        phi.iter_mut().for_each(|v| *v += residual * v.abs() / mass);
    } else {
        phi.iter_mut().for_each(|v| *v += residual / n as f64);
    }
    Ok(ShapResult {
        phi,
        base_value,
        prediction,
    })
}

/// Features ranked by mean `|phi|` (sampled estimator), top `k`.
pub fn rank_features<M: Predictor + ?Sized>(
    model: &M,
    instances: &[Vec<f64>],
    background: &[Vec<f64>],
    k: usize,
    n_permutations: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if instances.is_empty() {
        return Err(Error::validation("no instances to rank features on"));
    }
    let results: Vec<ShapResult> = instances
        .par_iter()
        .enumerate()
        .map(|(i, x)| shapley_sampled(model, x, background, n_permutations, rng::derive_seed(seed, i as u64)))
        .collect::<Result<_>>()?;
    let mut mean = vec![0.0; model.n_features()];
    for r in &results {
        for (m, p) in mean.iter_mut().zip(&r.phi) {
            *m += p.abs();
        }
    }
    let mut order: Vec<usize> = (0..mean.len()).collect();
    order.sort_by(|a, b| mean[*b].total_cmp(&mean[*a]).then(a.cmp(b)));
    order.truncate(k);
    Ok(order)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaPhi {
    pub feature: String,
    pub baseline_mean_phi: f64,
    pub drift_mean_phi: f64,
    pub delta: f64,
}

/// Uniform sample of at most `cap` instances, in original order.
fn cap_instances(instances: &[Vec<f64>], cap: usize, seed: u64) -> Vec<&Vec<f64>> {
    if instances.len() <= cap {
        return instances.iter().collect();
    }
    let mut picked = index::sample(&mut rng::seeded(seed), instances.len(), cap).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| &instances[i]).collect()
}

fn mean_abs_phi(
    attribute: &(dyn Fn(&[f64]) -> Result<ShapResult> + Sync),
    instances: &[&Vec<f64>],
    subset: &[usize],
) -> Result<Vec<f64>> {
    let results: Vec<ShapResult> = instances.par_iter().map(|x| attribute(x)).collect::<Result<_>>()?;
    let mut mean = vec![0.0; subset.len()];
    for r in &results {
        for (m, f) in mean.iter_mut().zip(subset) {
            *m += r.phi[*f].abs();
        }
    }
    mean.iter_mut().for_each(|m| *m /= results.len() as f64);
    Ok(mean)
}

#[allow(clippy::too_many_arguments)]
fn delta_phi_with(
    attribute: &(dyn Fn(&[f64]) -> Result<ShapResult> + Sync),
    n_features: usize,
    baseline_instances: &[Vec<f64>],
    drift_instances: &[Vec<f64>],
    subset: &[usize],
    names: &[String],
    cap: usize,
    seed: u64,
) -> Result<Vec<DeltaPhi>> {
    if baseline_instances.is_empty() || drift_instances.is_empty() {
        return Err(Error::validation("delta_phi needs instances in both periods"));
    }
    if names.len() != n_features {
        return Err(Error::validation("feature names do not match the model"));
    }
    if cap == 0 {
        return Err(Error::validation("instance cap must be >= 1"));
    }
    let base = mean_abs_phi(attribute, &cap_instances(baseline_instances, cap, seed), subset)?;
    let drift = mean_abs_phi(
        attribute,
        &cap_instances(drift_instances, cap, rng::derive_seed(seed, 1)),
        subset,
    )?;
    let mut out: Vec<DeltaPhi> = subset
        .iter()
        .enumerate()
        .map(|(k, f)| DeltaPhi {
            feature: names[*f].clone(),
            baseline_mean_phi: base[k],
            drift_mean_phi: drift[k],
            delta: drift[k] - base[k],
        })
        .collect();
    out.sort_by(|a, b| b.delta.total_cmp(&a.delta).then_with(|| a.feature.cmp(&b.feature)));
    Ok(out)
}

/// Per-feature `mean|phi|(drift) - mean|phi|(baseline)` over `subset`,
/// sorted by descending delta. Each period is capped at `cap` instances.
#[allow(clippy::too_many_arguments)]
pub fn delta_phi<M: Predictor + ?Sized>(
    model: &M,
    baseline_instances: &[Vec<f64>],
    drift_instances: &[Vec<f64>],
    background: &[Vec<f64>],
    subset: &[usize],
    names: &[String],
    cap: usize,
    seed: u64,
) -> Result<Vec<DeltaPhi>> {
    let attribute = |x: &[f64]| shapley_exact(model, x, background, subset);
    delta_phi_with(
        &attribute,
        model.n_features(),
        baseline_instances,
        drift_instances,
        subset,
        names,
        cap,
        seed,
    )
}

/// [`delta_phi`] computed with [`shapley_tree`].
#[allow(clippy::too_many_arguments)]
pub fn delta_phi_tree(
    model: &GbtModel,
    baseline_instances: &[Vec<f64>],
    drift_instances: &[Vec<f64>],
    background: &[Vec<f64>],
    subset: &[usize],
    names: &[String],
    cap: usize,
    seed: u64,
) -> Result<Vec<DeltaPhi>> {
    let attribute = |x: &[f64]| shapley_tree(model, x, background, subset);
    delta_phi_with(
        &attribute,
        model.n_features,
        baseline_instances,
        drift_instances,
        subset,
        names,
        cap,
        seed,
    )
}

/// Features ranked by mean `|phi|` over all features via [`shapley_tree`], top `k`.
pub fn rank_features_tree(
    model: &GbtModel,
    instances: &[Vec<f64>],
    background: &[Vec<f64>],
    k: usize,
) -> Result<Vec<usize>> {
    if instances.is_empty() {
        return Err(Error::validation("no instances to rank features on"));
    }
    let all: Vec<usize> = (0..model.n_features).collect();
    let refs: Vec<&Vec<f64>> = instances.iter().collect();
    let attribute = |x: &[f64]| shapley_tree(model, x, background, &all);
    let mean = mean_abs_phi(&attribute, &refs, &all)?;
    let mut order = all;
    order.sort_by(|a, b| mean[*b].total_cmp(&mean[*a]).then(a.cmp(b)));
    order.truncate(k);
    Ok(order)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeImpact {
    pub node: NodeId,
    pub branch: Branch,
    pub level: Level,
    pub label: String,
    pub depth: usize,
    /// ΔWMAPE at leaves; sales-weighted mean of children elsewhere.
    pub severity: f64,
    /// Mean daily sales, drift window over baseline window, minus 1.
    pub sales_change: Option<f64>,
    pub top_features: Vec<DeltaPhi>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticMap {
    pub drift_window: (u32, u32),
    /// Both branches in pre-order.
    pub nodes: Vec<NodeImpact>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpactWindows {
    pub baseline: (u32, u32),
    pub drift: (u32, u32),
}

fn window_sum(panel: &Panel, series: &[usize], (a, b): (u32, u32)) -> f64 {
    let mut total = 0.0;
    for &s in series {
        for d in a..=b {
            total += panel.sales_at(s, d);
        }
    }
    total
}

/// Severity map over both branches. Children weigh by their share of
/// actual sales over the drift window (equal weights if those sum to 0).
pub fn hierarchical_impact(
    wmape_baseline: &BTreeMap<usize, f64>,
    wmape_drift: &BTreeMap<usize, f64>,
    hierarchy: &Hierarchy,
    panel: &Panel,
    windows: ImpactWindows,
) -> Result<DiagnosticMap> {
    hierarchy.check_panel(panel)?;
    let expected: Vec<usize> = (0..panel.n_series()).collect();
    if !wmape_baseline.keys().copied().eq(expected.iter().copied())
        || !wmape_drift.keys().copied().eq(expected.iter().copied())
    {
        return Err(Error::validation(
            "per-series metrics must cover exactly the panel's series",
        ));
    }
    for (a, b) in [windows.baseline, windows.drift] {
        if a > b || !panel.contains_day(a) || !panel.contains_day(b) {
            return Err(Error::validation(format!("window [{a}, {b}] outside panel")));
        }
    }
    let mut severity = vec![0.0; hierarchy.n_nodes()];
    let mut sales = vec![0.0; hierarchy.n_nodes()];
    for branch in [Branch::Geographic, Branch::Product] {
        // reverse pre-order visits children before parents
        for id in hierarchy.branch_nodes(branch).into_iter().rev() {
            let node = hierarchy.node(id);
            if node.level == Level::Leaf {
                let s = node.leaf_series[0];
                severity[id.0] = wmape_drift[&s] - wmape_baseline[&s];
                sales[id.0] = window_sum(panel, &[s], windows.drift);
                continue;
            }
            let total: f64 = node.children.iter().map(|c| sales[c.0]).sum();
            let k = node.children.len() as f64;
            severity[id.0] = node
                .children
                .iter()
                .map(|c| severity[c.0] * if total > 0.0 { sales[c.0] / total } else { 1.0 / k })
                .sum();
            sales[id.0] = total;
        }
    }
    let days = |(a, b): (u32, u32)| (b - a + 1) as f64;
    let mut nodes = vec![];
    for branch in [Branch::Geographic, Branch::Product] {
        let mut depth = BTreeMap::new();
        depth.insert(hierarchy.root(branch), 0usize);
        for id in hierarchy.branch_nodes(branch) {
            let node = hierarchy.node(id);
            let d = depth[&id];
            for c in &node.children {
                depth.insert(*c, d + 1);
            }
            let before = window_sum(panel, &node.leaf_series, windows.baseline) / days(windows.baseline);
            let after = sales[id.0] / days(windows.drift);
            nodes.push(NodeImpact {
                node: id,
                branch,
                level: node.level,
                label: node.label.clone(),
                depth: d,
                severity: severity[id.0],
                sales_change: (before > 0.0).then(|| after / before - 1.0),
                top_features: vec![],
            });
        }
    }
    Ok(DiagnosticMap {
        drift_window: windows.drift,
        nodes,
    })
}

impl DiagnosticMap {
    pub fn node(&self, branch: Branch, id: NodeId) -> Option<&NodeImpact> {
        self.nodes.iter().find(|n| n.branch == branch && n.node == id)
    }

    /// Attaches attribution shifts to every node with the given level and label.
    pub fn attach_features(&mut self, level: Level, label: &str, deltas: &[DeltaPhi], keep: usize) {
        for n in self.nodes.iter_mut().filter(|n| n.level == level && n.label == label) {
            n.top_features = deltas.iter().take(keep).cloned().collect();
        }
    }

    /// Aligned-text table per branch. Leaves are omitted unless `with_leaves`.
    pub fn render(&self, with_leaves: bool) -> String {
        let mut out = String::new();
        for branch in [Branch::Geographic, Branch::Product] {
            let title = match branch {
                Branch::Geographic => "geographic",
                Branch::Product => "product",
            };
            let _ = writeln!(out, "{title}");
            let _ = writeln!(out, "  {:<28} {:>10} {:>10}  drivers", "node", "dWMAPE", "sales");
            for n in self.nodes.iter().filter(|n| n.branch == branch) {
                if n.level == Level::Leaf && !with_leaves {
                    continue;
                }
                let name = format!("{}{}", "  ".repeat(n.depth), n.label);
                let change = n
                    .sales_change
                    .map_or_else(|| "n/a".to_string(), |c| format!("{:+.1}%", 100.0 * c));
                let drivers: Vec<String> = n
                    .top_features
                    .iter()
                    .map(|d| format!("{} ({:+.3})", d.feature, d.delta))
                    .collect();
                let _ = writeln!(
                    out,
                    "  {:<28} {:>+9.1}% {:>10}  {}",
                    name,
                    100.0 * n.severity,
                    change,
                    drivers.join(", ")
                );
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_hierarchy;
    use crate::data::tests::{key, panel_from};
    use crate::forecast::{train_gbt, GbtHyper};
    use proptest::prelude::*;
    use rand::Rng;

    struct FnModel<F: Fn(&[f64]) -> f64 + Sync>(usize, F);

    impl<F: Fn(&[f64]) -> f64 + Sync> Predictor for FnModel<F> {
        fn n_features(&self) -> usize {
            self.0
        }
        fn predict_row(&self, x: &[f64]) -> f64 {
            (self.1)(x)
        }
    }

    /// Shapley values straight from the permutation definition: average
    /// marginal contribution over all m! orderings.
    fn permutation_oracle<M: Predictor>(model: &M, x: &[f64], bg: &[Vec<f64>], subset: &[usize]) -> Vec<f64> {
        fn perms(items: &[usize]) -> Vec<Vec<usize>> {
            if items.len() <= 1 {
                return vec![items.to_vec()];
            }
            let mut out = vec![];
            for i in 0..items.len() {
                let mut rest = items.to_vec();
                let head = rest.remove(i);
                for mut p in perms(&rest) {
                    p.insert(0, head);
                    out.push(p);
                }
            }
            out
        }
        let g = |inc: &[usize]| -> f64 {
            bg.iter()
                .map(|b| {
                    let mut z = x.to_vec();
                    for f in subset {
                        if !inc.contains(f) {
                            z[*f] = b[*f];
                        }
                    }
                    model.predict_row(&z)
                })
                .sum::<f64>()
                / bg.len() as f64
        };
        let all = perms(subset);
        let mut phi = vec![0.0; x.len()];
        for p in &all {
            for k in 0..p.len() {
                phi[p[k]] += g(&p[..=k]) - g(&p[..k]);
            }
        }
        phi.iter().map(|v| v / all.len() as f64).collect()
    }

    #[test]
    fn additive_model_closed_form() {
        let m = FnModel(2, |x: &[f64]| 2.0 * x[0] + 3.0 * x[1]);
        let r = shapley_exact(&m, &[1.0, 1.0], &[vec![0.0, 0.0]], &[0, 1]).unwrap();
        assert_eq!(r.phi, vec![2.0, 3.0]);
        assert_eq!(r.base_value, 0.0);
        assert_eq!(r.prediction, 5.0);
        let s = shapley_sampled(&m, &[1.0, 1.0], &[vec![0.0, 0.0]], 200, 3).unwrap();
        assert!((s.phi[0] - 2.0).abs() < 1e-9 && (s.phi[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn instance_equal_to_background_gives_zero() {
        let m = FnModel(3, |x: &[f64]| x[0] * x[1] + x[2].sin());
        let x = vec![0.3, -1.2, 2.0];
        let r = shapley_exact(&m, &x, std::slice::from_ref(&x), &[0, 1, 2]).unwrap();
        assert!(r.phi.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matches_permutation_oracle() {
        let m = FnModel(4, |x: &[f64]| x[0] * x[1] - x[2].max(x[3]) + 0.5 * x[0] * x[2] * x[3]);
        let mut r = rng::seeded(4);
        for _ in 0..20 {
            let x: Vec<f64> = (0..4).map(|_| r.random_range(-2.0..2.0)).collect();
            let bg: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..4).map(|_| r.random_range(-2.0..2.0)).collect())
                .collect();
            let exact = shapley_exact(&m, &x, &bg, &[0, 1, 2, 3]).unwrap();
            let oracle = permutation_oracle(&m, &x, &bg, &[0, 1, 2, 3]);
            for (a, b) in exact.phi.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dummy_and_symmetry() {
        // feature 2 is never read; features 0 and 1 enter symmetrically
        let m = FnModel(3, |x: &[f64]| x[0] * x[1] + x[0] + x[1]);
        let r = shapley_exact(
            &m,
            &[1.0, 1.0, 7.0],
            &[vec![0.0, 0.0, -3.0], vec![-1.0, -1.0, 2.0]],
            &[0, 1, 2],
        )
        .unwrap();
        assert_eq!(r.phi[2], 0.0);
        assert_eq!(r.phi[0], r.phi[1]);
    }

    #[test]
    fn features_outside_subset_are_frozen() {
        let m = FnModel(3, |x: &[f64]| x[0] + 10.0 * x[2]);
        let r = shapley_exact(&m, &[1.0, 0.0, 1.0], &[vec![0.0, 0.0, 0.0]], &[0]).unwrap();
        assert_eq!(r.phi, vec![1.0, 0.0, 0.0]);
        assert_eq!(r.base_value, 10.0);
        assert_eq!(r.prediction, 11.0);
    }

    #[test]
    fn errors() {
        let m = FnModel(20, |x: &[f64]| x.iter().sum());
        let x = vec![0.0; 20];
        let all: Vec<usize> = (0..17).collect();
        assert!(matches!(
            shapley_exact(&m, &x, std::slice::from_ref(&x), &all),
            Err(Error::SubsetTooLarge { max: 16, got: 17 })
        ));
        assert!(shapley_exact(&m, &x, &[], &[0]).is_err());
        assert!(shapley_exact(&m, &x[..3], std::slice::from_ref(&x), &[0]).is_err());
        assert!(shapley_sampled(&m, &x, std::slice::from_ref(&x), 10, 0).is_err());
    }

    fn random_gbt(seed: u64, n_features: usize) -> (crate::forecast::GbtModel, Vec<Vec<f64>>) {
        let mut r = rng::seeded(seed);
        let x: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..n_features).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| 3.0 * v[0] + v[1] * v[2] - 2.0 * v[3].abs() + 0.2 * r.random::<f64>())
            .collect();
        let hyper = GbtHyper {
            n_trees: 30,
            max_depth: 4,
            learning_rate: 0.2,
            min_leaf: 5,
            seed,
        };
        (train_gbt(&x, &y, &hyper).unwrap(), x)
    }

    #[test]
    fn sampled_converges_to_exact() {
        for seed in 0..3 {
            let (model, x) = random_gbt(seed, 8);
            let bg: Vec<Vec<f64>> = x[..20].to_vec();
            let subset: Vec<usize> = (0..8).collect();
            let inst = &x[100 + seed as usize];
            let exact = shapley_exact(&model, inst, &bg, &subset).unwrap();
            let sampled = shapley_sampled(&model, inst, &bg, 2000, seed).unwrap();
            let max_phi = exact.phi.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            let dev: Vec<f64> = exact.phi.iter().zip(&sampled.phi).map(|(a, b)| (a - b).abs()).collect();
            let mean_dev = dev.iter().sum::<f64>() / dev.len() as f64;
            assert!(mean_dev < 0.05 * max_phi, "seed {seed}: {mean_dev} vs {max_phi}");
            assert_eq!(sampled, shapley_sampled(&model, inst, &bg, 2000, seed).unwrap());
            assert!(sampled.efficiency_gap().abs() < 1e-9 * sampled.prediction.abs().max(1.0));
        }
    }

    #[test]
    fn tree_path_matches_enumeration() {
        for seed in 0..4 {
            let (model, x) = random_gbt(seed, 9);
            let bg: Vec<Vec<f64>> = x[..20].to_vec();
            for (k, subset) in [vec![0, 1, 2, 3, 4, 5, 6, 7, 8], vec![3, 0, 7], vec![]]
                .iter()
                .enumerate()
            {
                let inst = &x[150 + k];
                let a = shapley_exact(&model, inst, &bg, subset).unwrap();
                let b = shapley_tree(&model, inst, &bg, subset).unwrap();
                let tol = 1e-9 * a.prediction.abs().max(1.0);
                assert!((a.base_value - b.base_value).abs() < tol);
                assert!((a.prediction - b.prediction).abs() < tol);
                for (p, q) in a.phi.iter().zip(&b.phi) {
                    assert!((p - q).abs() < tol, "seed {seed}: {p} vs {q}");
                }
                assert!(b.efficiency_gap().abs() < tol);
            }
        }
        let (model, x) = random_gbt(0, 9);
        assert!(shapley_tree(&model, &x[0], &x[..2], &[1, 1]).is_err());
        assert!(shapley_tree(&model, &x[0], &x[..2], &[9]).is_err());
        let ranked = rank_features_tree(&model, &x[..30], &x[30..50], 2).unwrap();
        assert_eq!(ranked[0], 0);
    }

    #[test]
    fn ranking_puts_read_features_first() {
        let m = FnModel(5, |x: &[f64]| 5.0 * x[3] + x[1]);
        let mut r = rng::seeded(1);
        let inst: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..5).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let order = rank_features(&m, &inst, &inst[..5], 2, 60, 0).unwrap();
        assert_eq!(order, vec![3, 1]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn exact_efficiency(seed in 0u64..1000, pick in 0usize..300) {
            let (model, x) = random_gbt(seed % 7, 6);
            let bg: Vec<Vec<f64>> = x[..20].to_vec();
            let r = shapley_exact(&model, &x[pick], &bg, &[0, 1, 2, 3, 4, 5]).unwrap();
            prop_assert!(r.efficiency_gap().abs() <= 1e-9 * r.prediction.abs().max(1e-12));
        }
    }

    #[test]
    fn delta_phi_cases() {
        let m = FnModel(2, |x: &[f64]| x[0] * 2.0 + x[1]);
        let names = vec!["a".to_string(), "b".to_string()];
        let period: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 1.0]).collect();
        let bg = vec![vec![0.0, 0.0]];
        let same = delta_phi(&m, &period, &period, &bg, &[0, 1], &names, 50, 0).unwrap();
        assert!(same.iter().all(|d| d.delta == 0.0));
        let shifted: Vec<Vec<f64>> = period.iter().map(|v| vec![v[0] + 3.0, v[1]]).collect();
        let d = delta_phi(&m, &period, &shifted, &bg, &[0, 1], &names, 50, 0).unwrap();
        assert_eq!(d[0].feature, "a");
        for x in &d {
            assert_eq!(x.delta, x.drift_mean_phi - x.baseline_mean_phi);
        }
        assert!((d[0].delta - 6.0).abs() < 1e-12);
        assert!(delta_phi(&m, &[], &period, &bg, &[0], &names, 50, 0).is_err());
        // capping picks a subset deterministically
        let a = delta_phi(&m, &period, &shifted, &bg, &[0, 1], &names, 3, 9).unwrap();
        assert_eq!(a, delta_phi(&m, &period, &shifted, &bg, &[0, 1], &names, 3, 9).unwrap());
    }

    fn two_store_panel() -> Panel {
        let keys = vec![
            key("FOODS_1_001", "CA_1", "CA", "FOODS", "FOODS_1"),
            key("FOODS_1_002", "CA_1", "CA", "FOODS", "FOODS_1"),
            key("FOODS_1_001", "CA_2", "CA", "FOODS", "FOODS_1"),
            key("HOBBIES_1_001", "TX_1", "TX", "HOBBIES", "HOBBIES_1"),
        ];
        let sales = vec![vec![10.0; 20], vec![30.0; 20], vec![5.0; 20], vec![1.0; 20]];
        panel_from(keys, sales)
    }

    const WIN: ImpactWindows = ImpactWindows {
        baseline: (1, 10),
        drift: (11, 20),
    };

    #[test]
    fn uniform_severity_propagates() {
        let p = two_store_panel();
        let h = build_hierarchy(p.keys()).unwrap();
        let base: BTreeMap<usize, f64> = (0..4).map(|s| (s, 0.2)).collect();
        let drift: BTreeMap<usize, f64> = (0..4).map(|s| (s, 0.3)).collect();
        let map = hierarchical_impact(&base, &drift, &h, &p, WIN).unwrap();
        for n in &map.nodes {
            assert!((n.severity - 0.1).abs() < 1e-12, "{} {}", n.label, n.severity);
            assert_eq!(n.sales_change, Some(0.0));
        }
        assert_eq!(
            map.nodes.len(),
            h.branch_nodes(Branch::Geographic).len() + h.branch_nodes(Branch::Product).len()
        );
    }

    #[test]
    fn weighted_mean_is_exact_and_store_stands_out() {
        let p = two_store_panel();
        let h = build_hierarchy(p.keys()).unwrap();
        let base: BTreeMap<usize, f64> = (0..4).map(|s| (s, 0.1)).collect();
        let mut drift = base.clone();
        drift.insert(0, 0.5);
        drift.insert(1, 0.3);
        let map = hierarchical_impact(&base, &drift, &h, &p, WIN).unwrap();
        for branch in [Branch::Geographic, Branch::Product] {
            for id in h.branch_nodes(branch) {
                let node = h.node(id);
                if node.level == Level::Leaf {
                    continue;
                }
                let sev = |c: NodeId| map.node(branch, c).unwrap().severity;
                let sales = |c: NodeId| window_sum(&p, &h.node(c).leaf_series, WIN.drift);
                let total: f64 = node.children.iter().map(|c| sales(*c)).sum();
                let expect: f64 = node.children.iter().map(|c| sev(*c) * (sales(*c) / total)).sum();
                assert_eq!(map.node(branch, id).unwrap().severity, expect);
            }
        }
        let stores = h.nodes_at(Branch::Geographic, Level::Store);
        let sev: Vec<(String, f64)> = stores
            .iter()
            .map(|id| {
                (
                    h.node(*id).label.clone(),
                    map.node(Branch::Geographic, *id).unwrap().severity,
                )
            })
            .collect();
        let ca1 = sev.iter().find(|(l, _)| l == "CA_1").unwrap().1;
        assert!(sev.iter().filter(|(l, _)| l != "CA_1").all(|(_, s)| *s < ca1));
        let text = map.render(false);
        assert!(text.contains("CA_1") && text.contains("geographic") && text.contains("product"));
    }

    #[test]
    fn mismatched_series_rejected() {
        let p = two_store_panel();
        let h = build_hierarchy(p.keys()).unwrap();
        let base: BTreeMap<usize, f64> = (0..3).map(|s| (s, 0.1)).collect();
        let drift: BTreeMap<usize, f64> = (0..4).map(|s| (s, 0.1)).collect();
        assert!(hierarchical_impact(&base, &drift, &h, &p, WIN).is_err());
    }
}
