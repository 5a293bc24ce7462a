//! Two-sample distribution tests for the statistical detector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to every PSI bin proportion before renormalization.
pub const PSI_EPSILON: f64 = 1e-4;
/// PSI level treated as full evidence of drift for categorical features.
pub const PSI_ALERT: f64 = 0.2;
pub const KS_MIN_SAMPLE: usize = 8;

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// `sup |ECDF_a - ECDF_b|` by a merged sweep over both sorted samples.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let (a, b) = (sorted(a), sorted(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic Kolmogorov tail `Q(λ) = 2 Σ (-1)^{j-1} exp(-2 j² λ²)`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let a2 = -2.0 * lambda * lambda;
    let mut sum = 0.0;
    let mut sign = 2.0;
    let mut prev_term = 0.0;
    for j in 1..=100 {
        let term = sign * (a2 * (j * j) as f64).exp();
        sum += term;
        if term.abs() <= 1e-10 * prev_term || term.abs() <= 1e-12 * sum.abs() {
            return sum.clamp(0.0, 1.0);
        }
        sign = -sign;
        prev_term = term.abs();
    }
    1.0
}

/// Two-sample KS statistic and asymptotic p-value.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < KS_MIN_SAMPLE || b.len() < KS_MIN_SAMPLE {
        return Err(Error::InsufficientData(format!(
            "KS needs {KS_MIN_SAMPLE} values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d = ks_distance(a, b);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let en = (n * m / (n + m)).sqrt();
    let p = kolmogorov_q((en + 0.12 + 0.11 / en) * d);
    Ok((d, p))
}

/// `Σ (p_i - q_i)(ln p_i - ln q_i)` over proportions floored at
/// `PSI_EPSILON` and renormalized. Non-empty bins keep their mass exactly.
pub fn psi_from_proportions(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::validation(
            "PSI proportion vectors must be non-empty and equal length",
        ));
    }
    let smooth = |v: &[f64]| -> Vec<f64> {
        let total: f64 = v.iter().map(|x| x.max(PSI_EPSILON)).sum();
        v.iter().map(|x| x.max(PSI_EPSILON) / total).collect()
    };
    let (p, q) = (smooth(p), smooth(q));
    Ok(p.iter()
        .zip(&q)
        .map(|(a, b)| (a - b) * (a.ln() - b.ln()))
        .sum::<f64>()
        .max(0.0))
}

fn proportions(sample: &[f64], edges: &[f64]) -> Vec<f64> {
    let mut counts = vec![0.0; edges.len() + 1];
    for x in sample {
        counts[edges.partition_point(|e| e < x)] += 1.0;
    }
    let n = sample.len() as f64;
    counts.iter().map(|c| c / n).collect()
}

/// PSI between two continuous samples over `bins` quantile bins.
///
/// Bin edges are quantiles of the pooled sample so that the value does not
/// depend on argument order.
pub fn psi(baseline: &[f64], current: &[f64], bins: usize) -> Result<f64> {
    if baseline.is_empty() || current.is_empty() {
        return Err(Error::validation("PSI needs non-empty samples"));
    }
    if bins < 2 {
        return Err(Error::validation("PSI needs at least 2 bins"));
    }
    let mut pooled: Vec<f64> = baseline.iter().chain(current).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let mut edges: Vec<f64> = (1..bins)
        .map(|k| pooled[(k * pooled.len() / bins).min(pooled.len() - 1)])
        .collect();
    edges.dedup();
    psi_from_proportions(&proportions(baseline, &edges), &proportions(current, &edges))
}

/// PSI between two categorical samples; bins are the union of observed levels.
pub fn psi_categorical(baseline: &[f64], current: &[f64]) -> Result<f64> {
    if baseline.is_empty() || current.is_empty() {
        return Err(Error::validation("PSI needs non-empty samples"));
    }
    let mut levels: Vec<f64> = baseline.iter().chain(current).copied().collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let share = |s: &[f64]| -> Vec<f64> {
        levels
            .iter()
            .map(|l| s.iter().filter(|x| *x == l).count() as f64 / s.len() as f64)
            .collect()
    };
    psi_from_proportions(&share(baseline), &share(current))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Continuous,
    Categorical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatScore {
    /// Max normalized evidence across features, in [0, 1].
    pub e2: f64,
    /// Evidence per feature, same order as the input.
    pub per_feature: Vec<f64>,
}

/// e2 = max over features of `1 - p_KS` (continuous) or `min(PSI / 0.2, 1)`
/// (categorical). Columns of `baseline` and `current` are feature samples.
pub fn statistical_score(baseline: &[Vec<f64>], current: &[Vec<f64>], kinds: &[FeatureKind]) -> Result<StatScore> {
    if baseline.len() != current.len() || baseline.len() != kinds.len() || kinds.is_empty() {
        return Err(Error::validation("statistical detector: feature column mismatch"));
    }
    let per_feature = baseline
        .iter()
        .zip(current)
        .zip(kinds)
        .map(|((b, c), kind)| match kind {
            FeatureKind::Continuous => ks_statistic(b, c).map(|(_, p)| 1.0 - p),
            FeatureKind::Categorical => psi_categorical(b, c).map(|v| (v / PSI_ALERT).min(1.0)),
        })
        .collect::<Result<Vec<f64>>>()?;
    let e2 = per_feature.iter().copied().fold(0.0, f64::max);
    Ok(StatScore { e2, per_feature })
}

/// Per-feature drift evidence for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDrift {
    pub feature: String,
    pub ks_d: f64,
    pub ks_p: f64,
    pub psi: f64,
    /// `ks_p < alpha` or `psi > PSI_ALERT`.
    pub significant: bool,
}

pub fn feature_drift(name: &str, baseline: &[f64], current: &[f64], bins: usize, alpha: f64) -> Result<FeatureDrift> {
    let (ks_d, ks_p) = ks_statistic(baseline, current)?;
    let psi = psi(baseline, current, bins)?;
    Ok(FeatureDrift {
        feature: name.to_string(),
        ks_d,
        ks_p,
        psi,
        significant: ks_p < alpha || psi > PSI_ALERT,
    })
}
