//! Squared-error gradient boosting over exact greedy regression trees.
//!
//! Trees are grown level by level. Each feature column is sorted once up
//! front; at every level one pass over each sorted column evaluates all
//! candidate thresholds for every open node at the same time.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::features::FeatureSpec;
use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "driftguard-gbt";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbtHyper {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_leaf: usize,
    pub seed: u64,
}

impl Default for GbtHyper {
    fn default() -> Self {
        GbtHyper {
            n_trees: 100,
            max_depth: 6,
            learning_rate: 0.1,
            min_leaf: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    /// Rows with `x[feature] < threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    /// Node 0 is the root.
    pub nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] < *threshold { *left } else { *right },
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf { .. })).count()
    }

    fn validate(&self, n_features: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Format(format!("invalid tree: {m}")));
        if self.nodes.is_empty() {
            return bad("no nodes".into());
        }
        // children must point strictly forward, which rules out cycles
        for (i, n) in self.nodes.iter().enumerate() {
            if let TreeNode::Split {
                feature, left, right, ..
            } = n
            {
                if *feature >= n_features {
                    return bad(format!("feature {feature} out of range"));
                }
                if *left <= i || *right <= i || *left >= self.nodes.len() || *right >= self.nodes.len() {
                    return bad(format!("node {i} has bad children"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub trees: Vec<RegressionTree>,
    pub learning_rate: f64,
    pub base_score: f64,
    pub n_features: usize,
    pub feature_spec: Option<FeatureSpec>,
    pub trained_window: Option<(u32, u32)>,
    pub hyper: GbtHyper,
}

/// Anything that maps a feature row to a prediction.
pub trait Predictor: Sync {
    fn n_features(&self) -> usize;
    fn predict_row(&self, x: &[f64]) -> f64;
}

impl GbtModel {
    /// `base_score + learning_rate * Σ_k tree_k(x)`.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(Error::validation(format!(
                "feature vector has {} values, model expects {}",
                x.len(),
                self.n_features
            )));
        }
        Ok(self.predict_unchecked(x))
    }

    pub(crate) fn predict_unchecked(&self, x: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.evaluate(x)).sum();
        self.base_score + self.learning_rate * sum
    }

    pub fn feature_names(&self) -> Vec<String> {
        match &self.feature_spec {
            Some(spec) => spec.names(),
            None => (0..self.n_features).map(|i| format!("f{i}")).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc<'a> {
            format: &'a str,
            version: u32,
            model: &'a GbtModel,
        }
        Ok(serde_json::to_string(&Doc {
            format: MODEL_FORMAT,
            version: MODEL_VERSION,
            model: self,
        })?)
    }

    pub fn from_json(text: &str) -> Result<GbtModel> {
        #[derive(Deserialize)]
        struct Doc {
            format: String,
            version: u32,
            model: GbtModel,
        }
        let doc: Doc = serde_json::from_str(text)?;
        if doc.format != MODEL_FORMAT {
            return Err(Error::Format(format!("not a model file: {}", doc.format)));
        }
        if doc.version != MODEL_VERSION {
            return Err(Error::VersionMismatch {
                expected: MODEL_VERSION,
                found: doc.version.to_string(),
            });
        }
        for t in &doc.model.trees {
            t.validate(doc.model.n_features)?;
        }
        Ok(doc.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<GbtModel> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        GbtModel::from_json(&text)
    }
}

impl Predictor for GbtModel {
    fn n_features(&self) -> usize {
        self.n_features
    }

    fn predict_row(&self, x: &[f64]) -> f64 {
        self.predict_unchecked(x)
    }
}

pub fn train_gbt(features: &[Vec<f64>], targets: &[f64], hyper: &GbtHyper) -> Result<GbtModel> {
    let n = targets.len();
    if features.len() != n {
        return Err(Error::validation(format!(
            "{} feature rows but {} targets",
            features.len(),
            n
        )));
    }
    if hyper.min_leaf == 0 || hyper.max_depth == 0 {
        return Err(Error::validation("min_leaf and max_depth must be >= 1"));
    }
    if !(hyper.learning_rate > 0.0 && hyper.learning_rate <= 1.0) {
        return Err(Error::validation("learning_rate must lie in (0, 1]"));
    }
    if n < 2 * hyper.min_leaf {
        return Err(Error::InsufficientData(format!(
            "{n} rows, need at least {}",
            2 * hyper.min_leaf
        )));
    }
    let n_features = features[0].len();
    if features.iter().any(|r| r.len() != n_features) {
        return Err(Error::validation("ragged feature matrix"));
    }
    if features.iter().flatten().chain(targets).any(|v| !v.is_finite()) {
        return Err(Error::validation("non-finite value in training data"));
    }

    let mut model = GbtModel {
        trees: Vec::new(),
        learning_rate: hyper.learning_rate,
        base_score: 0.0,
        n_features,
        feature_spec: None,
        trained_window: None,
        hyper: hyper.clone(),
    };
    if targets.iter().all(|t| *t == targets[0]) {
        model.base_score = targets[0];
        return Ok(model);
    }
    model.base_score = targets.iter().sum::<f64>() / n as f64;

    let columns: Vec<Vec<f64>> = (0..n_features)
        .map(|f| features.iter().map(|r| r[f]).collect())
        .collect();
    let sorted: Vec<Vec<u32>> = columns
        .iter()
        .map(|col| {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
            idx
        })
        .collect();

    let mut pred = vec![model.base_score; n];
    let mut residual = vec![0.0; n];
    for _ in 0..hyper.n_trees {
        for i in 0..n {
            residual[i] = targets[i] - pred[i];
        }
        let (tree, leaf_values) = fit_tree(&columns, &sorted, &residual, hyper.max_depth, hyper.min_leaf);
        if tree.nodes.len() == 1 {
            // no admissible split: every further tree would be this same leaf
            break;
        }
        for (p, v) in pred.iter_mut().zip(&leaf_values) {
            *p += hyper.learning_rate * v;
        }
        model.trees.push(tree);
    }
    Ok(model)
}

#[derive(Clone, Copy)]
struct Best {
    gain: f64,
    feature: usize,
    threshold: f64,
}

/// Fits one tree to `grad` and returns it with the leaf value of every row.
fn fit_tree(
    columns: &[Vec<f64>],
    sorted: &[Vec<u32>],
    grad: &[f64],
    max_depth: usize,
    min_leaf: usize,
) -> (RegressionTree, Vec<f64>) {
    let n = grad.len();
    let mut nodes: Vec<TreeNode> = vec![TreeNode::Leaf { value: 0.0 }];
    // open[slot] = tree node index; row_slot[r] = slot of the open node holding r
    let mut open: Vec<usize> = vec![0];
    let mut row_slot: Vec<i32> = vec![0; n];
    let mut row_node: Vec<usize> = vec![0; n];

    for _depth in 0..max_depth {
        if open.is_empty() {
            break;
        }
        let k = open.len();
        let mut sum = vec![0.0; k];
        let mut sum_sq = vec![0.0; k];
        let mut cnt = vec![0usize; k];
        for r in 0..n {
            let s = row_slot[r];
            if s >= 0 {
                let s = s as usize;
                sum[s] += grad[r];
                sum_sq[s] += grad[r] * grad[r];
                cnt[s] += 1;
            }
        }
        let mut best: Vec<Option<Best>> = vec![None; k];
        let mut l_sum = vec![0.0; k];
        let mut l_cnt = vec![0usize; k];
        let mut last = vec![f64::NAN; k];
        for (f, order) in sorted.iter().enumerate() {
            let col = &columns[f];
            l_sum.iter_mut().for_each(|v| *v = 0.0);
            l_cnt.iter_mut().for_each(|v| *v = 0);
            for &r in order {
                let s = row_slot[r as usize];
                if s < 0 {
                    continue;
                }
                let s = s as usize;
                let v = col[r as usize];
                let lc = l_cnt[s];
                if lc >= min_leaf && cnt[s] - lc >= min_leaf && v > last[s] {
                    let rs = sum[s] - l_sum[s];
                    let gain = l_sum[s] * l_sum[s] / lc as f64 + rs * rs / (cnt[s] - lc) as f64
                        - sum[s] * sum[s] / cnt[s] as f64;
                    if best[s].is_none_or(|b| gain > b.gain) {
                        let mid = 0.5 * (last[s] + v);
                        let threshold = if mid > last[s] && mid <= v { mid } else { v };
                        best[s] = Some(Best {
                            gain,
                            feature: f,
                            threshold,
                        });
                    }
                }
                l_sum[s] += grad[r as usize];
                l_cnt[s] += 1;
                last[s] = v;
            }
        }

        let mut next_open = Vec::new();
        let mut slot_children: Vec<Option<(usize, usize)>> = vec![None; k];
        for s in 0..k {
            let node = open[s];
            let tol = 1e-12 * sum_sq[s].max(f64::MIN_POSITIVE);
            match best[s] {
                Some(b) if b.gain > tol => {
                    let left = nodes.len();
                    nodes.push(TreeNode::Leaf { value: 0.0 });
                    nodes.push(TreeNode::Leaf { value: 0.0 });
                    nodes[node] = TreeNode::Split {
                        feature: b.feature,
                        threshold: b.threshold,
                        left,
                        right: left + 1,
                    };
                    slot_children[s] = Some((next_open.len(), next_open.len() + 1));
                    next_open.push(left);
                    next_open.push(left + 1);
                }
                _ => {
                    nodes[node] = TreeNode::Leaf {
                        value: sum[s] / cnt[s] as f64,
                    };
                }
            }
        }
        for r in 0..n {
            let s = row_slot[r];
            if s < 0 {
                continue;
            }
            match slot_children[s as usize] {
                Some((ls, rs)) => {
                    let TreeNode::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } = nodes[open[s as usize]]
                    else {
                        unreachable!()
                    };
                    if columns[feature][r] < threshold {
                        row_slot[r] = ls as i32;
                        row_node[r] = left;
                    } else {
                        row_slot[r] = rs as i32;
                        row_node[r] = right;
                    }
                }
                None => row_slot[r] = -1,
            }
        }
        open = next_open;
    }

    // nodes still open at max depth become leaves
    if !open.is_empty() {
        let mut sum = vec![0.0; open.len()];
        let mut cnt = vec![0usize; open.len()];
        for r in 0..n {
            if row_slot[r] >= 0 {
                sum[row_slot[r] as usize] += grad[r];
                cnt[row_slot[r] as usize] += 1;
            }
        }
        for (s, node) in open.iter().enumerate() {
            nodes[*node] = TreeNode::Leaf {
                value: sum[s] / cnt[s] as f64,
            };
        }
    }
    let leaf_values = row_node
        .iter()
        .map(|i| match nodes[*i] {
            TreeNode::Leaf { value } => value,
            TreeNode::Split { .. } => unreachable!("row assigned to split node"),
        })
        .collect();
    (RegressionTree { nodes }, leaf_values)
}
