//! Controlled drift scenarios applied to a panel from a known onset day.

use std::collections::BTreeSet;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::Panel;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftKind {
    SeasonalityShift,
    TrendChange,
    LevelShock,
    VolatilitySpike,
    Hierarchical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftScenario {
    pub kind: DriftKind,
    pub onset_day: u32,
    /// Fractional demand cut on holidays.
    #[serde(default = "default_seasonal_factor")]
    pub seasonal_factor: f64,
    /// Units/day decline. `None` calibrates per series so the decline reaches
    /// 25% of the post-onset mean by the last panel day.
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_fraction")]
    pub affected_fraction: f64,
    #[serde(default)]
    pub affected_region: Option<String>,
    #[serde(default)]
    pub seed: u64,
}

fn default_seasonal_factor() -> f64 {
    0.4
}
fn default_alpha() -> f64 {
    0.8
}
fn default_gamma() -> f64 {
    3.0
}
fn default_fraction() -> f64 {
    0.2
}

/// Total relative decline targeted by the calibrated trend slope.
pub const TREND_TOTAL_DECLINE: f64 = 0.25;

impl DriftScenario {
    pub fn new(kind: DriftKind, onset_day: u32) -> Self {
        DriftScenario {
            kind,
            onset_day,
            seasonal_factor: default_seasonal_factor(),
            beta: None,
            alpha: default_alpha(),
            gamma: default_gamma(),
            affected_fraction: default_fraction(),
            affected_region: None,
            seed: 0,
        }
    }

    pub fn validate(&self, panel: &Panel) -> Result<()> {
        let bad = |m: String| Err(Error::validation(format!("scenario: {m}")));
        if !panel.contains_day(self.onset_day) || self.onset_day >= panel.last_day() {
            return bad(format!(
                "onset day {} must lie inside [{}, {})",
                self.onset_day,
                panel.first_day(),
                panel.last_day()
            ));
        }
        if !(self.alpha > 0.0) || !(self.gamma > 0.0) {
            return bad("alpha and gamma must be positive".into());
        }
        if !(self.affected_fraction > 0.0 && self.affected_fraction <= 1.0) {
            return bad("affected_fraction must lie in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.seasonal_factor) {
            return bad("seasonal_factor must lie in [0, 1]".into());
        }
        if let Some(b) = self.beta {
            if !b.is_finite() {
                return bad("beta must be finite".into());
            }
        }
        if self.kind == DriftKind::Hierarchical && self.affected_region.is_none() {
            return bad("hierarchical drift needs affected_region".into());
        }
        Ok(())
    }
}

/// Ground truth for one injected scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionRecord {
    pub kind: DriftKind,
    pub onset_day: u32,
    pub affected_series: BTreeSet<usize>,
    pub scenario: DriftScenario,
    /// Slope used per affected series (trend_change only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trend_slopes: Vec<(usize, f64)>,
}

/// Uniform sample without replacement of `max(1, round(fraction * n))` series,
/// restricted to stores in `region` when given.
pub fn sample_affected(panel: &Panel, fraction: f64, seed: u64, region: Option<&str>) -> Result<BTreeSet<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::validation("fraction must lie in (0, 1]"));
    }
    let candidates: Vec<usize> = (0..panel.n_series())
        .filter(|s| region.is_none_or(|r| panel.keys()[*s].state_id == r))
        .collect();
    if candidates.is_empty() {
        return Err(Error::validation(format!(
            "region {:?} has no stores in this panel",
            region.unwrap_or_default()
        )));
    }
    let n = candidates.len();
    let k = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut r = rng::seeded(seed);
    Ok(index::sample(&mut r, n, k).into_iter().map(|i| candidates[i]).collect())
}

/// Returns a transformed copy of `panel` and the ground-truth record. Only
/// cells of affected series on days `>= onset_day` change; results are
/// clipped at 0.
pub fn inject(panel: &Panel, scenario: &DriftScenario) -> Result<(Panel, InjectionRecord)> {
    scenario.validate(panel)?;
    let region = scenario.affected_region.as_deref();
    let affected = sample_affected(panel, scenario.affected_fraction, scenario.seed, region)?;
    let t0 = scenario.onset_day;
    let c0 = panel.col(t0);
    let remaining = (panel.last_day() - t0) as f64;

    let mut sales = panel.sales().to_vec();
    let mut trend_slopes = Vec::new();
    for &s in &affected {
        let row = &mut sales[s];
        let post = &panel.sales()[s][c0..];
        let post_mean = post.iter().sum::<f64>() / post.len() as f64;
        match scenario.kind {
            DriftKind::SeasonalityShift => {
                for (c, v) in row.iter_mut().enumerate().skip(c0) {
                    let s_t = if panel.calendar()[c].is_holiday { 1.0 } else { 0.0 };
                    *v *= 1.0 - scenario.seasonal_factor * s_t;
                }
            }
            DriftKind::TrendChange => {
                let beta = scenario.beta.unwrap_or(TREND_TOTAL_DECLINE * post_mean / remaining);
                trend_slopes.push((s, beta));
                for (c, v) in row.iter_mut().enumerate().skip(c0) {
                    let t = panel.calendar()[c].day_index;
                    *v -= beta * (t - t0) as f64;
                }
            }
            DriftKind::LevelShock | DriftKind::Hierarchical => {
                for v in row.iter_mut().skip(c0) {
                    *v *= scenario.alpha;
                }
            }
            DriftKind::VolatilitySpike => {
                for v in row.iter_mut().skip(c0) {
                    *v = post_mean + scenario.gamma * (*v - post_mean);
                }
            }
        }
        for v in row.iter_mut().skip(c0) {
            *v = v.max(0.0);
        }
    }
    let drifted = panel.with_sales(sales)?;
    Ok((
        drifted,
        InjectionRecord {
            kind: scenario.kind,
            onset_day: t0,
            affected_series: affected,
            scenario: scenario.clone(),
            trend_slopes,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::{calendar, key};
    use crate::ingest::{generate_synthetic, SynthConfig};
    use proptest::prelude::*;

    fn synth(seed: u64) -> Panel {
        generate_synthetic(&SynthConfig {
            n_stores: 4,
            n_states: 2,
            n_skus_per_store: 25,
            n_days: 120,
            holiday_every_n_days: 7,
            seed,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn flat(values: Vec<f64>, holiday_at: Option<usize>) -> Panel {
        let n = values.len();
        let mut cal = calendar(n);
        if let Some(h) = holiday_at {
            cal[h].is_holiday = true;
        }
        Panel::new(
            vec![key("A", "S", "CA", "F", "F_1")],
            cal,
            vec![values],
            vec![vec![1.0; n]],
        )
        .unwrap()
    }

    fn scenario(kind: DriftKind, t0: u32) -> DriftScenario {
        DriftScenario {
            affected_fraction: 1.0,
            ..DriftScenario::new(kind, t0)
        }
    }

    #[test]
    fn sample_sizes_and_region() {
        let p = synth(0);
        assert_eq!(sample_affected(&p, 1.0, 1, None).unwrap().len(), 100);
        let a = sample_affected(&p, 0.2, 7, None).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a, sample_affected(&p, 0.2, 7, None).unwrap());
        let ca = sample_affected(&p, 0.5, 3, Some("CA")).unwrap();
        assert!(ca.iter().all(|s| p.keys()[*s].state_id == "CA"));
        assert_eq!(ca.len(), 25);
        assert!(sample_affected(&p, 0.5, 3, Some("ZZ")).is_err());
        assert!(sample_affected(&p, 0.0, 3, None).is_err());
        assert_eq!(sample_affected(&p, 0.001, 3, None).unwrap().len(), 1);
    }

    #[test]
    fn level_shock_values() {
        let p = flat(vec![10.0; 10], None);
        let mut sc = scenario(DriftKind::LevelShock, 5);
        sc.alpha = 1.0;
        assert_eq!(inject(&p, &sc).unwrap().0, p);
        sc.alpha = 0.8;
        let (q, rec) = inject(&p, &sc).unwrap();
        assert_eq!(q.sales()[0][..4], [10.0; 4]);
        assert_eq!(q.sales()[0][4..], [8.0; 6]);
        assert_eq!(rec.affected_series, BTreeSet::from([0]));
    }

    #[test]
    fn volatility_spike_value() {
        // post-onset values 7, 3 → ȳ = 5; 7 ↦ 5 + 3·2 = 11
        let p = flat(vec![1.0, 7.0, 3.0], None);
        let (q, _) = inject(&p, &scenario(DriftKind::VolatilitySpike, 2)).unwrap();
        assert_eq!(q.sales()[0], vec![1.0, 11.0, 0.0]);
    }

    #[test]
    fn seasonality_shift_only_on_holidays() {
        let p = flat(vec![10.0; 6], Some(4));
        let (q, _) = inject(&p, &scenario(DriftKind::SeasonalityShift, 2)).unwrap();
        assert_eq!(q.sales()[0], vec![10.0, 10.0, 10.0, 10.0, 6.0, 10.0]);
    }

    #[test]
    fn trend_change_and_clip() {
        let p = flat(vec![10.0; 60], None);
        let mut sc = scenario(DriftKind::TrendChange, 5);
        sc.beta = Some(0.5);
        let (q, rec) = inject(&p, &sc).unwrap();
        assert_eq!(q.sales_at(0, 9), 8.0); // t0 + 4
        assert_eq!(q.sales_at(0, 5), 10.0);
        assert_eq!(q.sales_at(0, 60), 0.0); // 10 - 0.5·55 clipped
        assert_eq!(rec.trend_slopes, vec![(0, 0.5)]);
    }

    #[test]
    fn calibrated_trend_declines_quarter() {
        let p = flat(vec![20.0; 41], None);
        let (q, rec) = inject(&p, &scenario(DriftKind::TrendChange, 21)).unwrap();
        assert!((rec.trend_slopes[0].1 - 0.25 * 20.0 / 20.0).abs() < 1e-15);
        assert!((q.sales_at(0, 41) - 15.0).abs() < 1e-12);
    }

    #[test]
    fn hierarchical_restricted_to_region() {
        let p = synth(1);
        let mut sc = DriftScenario::new(DriftKind::Hierarchical, 60);
        sc.affected_region = Some("TX".into());
        sc.affected_fraction = 0.5;
        let (q, rec) = inject(&p, &sc).unwrap();
        assert!(rec.affected_series.iter().all(|s| p.keys()[*s].state_id == "TX"));
        for s in &rec.affected_series {
            assert_eq!(q.sales_at(*s, 70), (p.sales_at(*s, 70) * 0.8).max(0.0));
        }
        sc.affected_region = None;
        assert!(inject(&p, &sc).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        let p = synth(2);
        for bad in [
            DriftScenario {
                alpha: 0.0,
                ..DriftScenario::new(DriftKind::LevelShock, 50)
            },
            DriftScenario {
                gamma: -1.0,
                ..DriftScenario::new(DriftKind::VolatilitySpike, 50)
            },
            DriftScenario {
                affected_fraction: 1.5,
                ..DriftScenario::new(DriftKind::LevelShock, 50)
            },
            DriftScenario::new(DriftKind::LevelShock, 120),
            DriftScenario::new(DriftKind::LevelShock, 0),
        ] {
            assert!(inject(&p, &bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn level_shock_mean_ratio_and_volatility_moments() {
        let p = synth(4);
        let t0 = 80;
        let c0 = p.col(t0);
        let (q, rec) = inject(
            &p,
            &DriftScenario {
                alpha: 0.7,
                ..DriftScenario::new(DriftKind::LevelShock, t0)
            },
        )
        .unwrap();
        for s in &rec.affected_series {
            let n = (p.n_days() - c0) as f64;
            let before = p.sales()[*s][c0..].iter().sum::<f64>() / n;
            let after = q.sales()[*s][c0..].iter().sum::<f64>() / n;
            assert!((after - 0.7 * before).abs() <= 1e-12 * before);
        }
        // synthetic demand ~100 with small dispersion keeps γ=1.5 clip-inactive
        let (q, rec) = inject(
            &p,
            &DriftScenario {
                gamma: 1.5,
                ..DriftScenario::new(DriftKind::VolatilitySpike, t0)
            },
        )
        .unwrap();
        for s in &rec.affected_series {
            let orig = &p.sales()[*s][c0..];
            let new = &q.sales()[*s][c0..];
            assert!(new.iter().all(|v| *v > 0.0), "clipping triggered");
            let n = orig.len() as f64;
            let m0 = orig.iter().sum::<f64>() / n;
            let m1 = new.iter().sum::<f64>() / n;
            assert!((m1 - m0).abs() <= 1e-12 * m0);
            let v0 = orig.iter().map(|v| (v - m0).powi(2)).sum::<f64>() / n;
            let v1 = new.iter().map(|v| (v - m1).powi(2)).sum::<f64>() / n;
            assert!((v1 - 2.25 * v0).abs() <= 1e-9 * v1);
        }
    }

    fn kinds() -> impl Strategy<Value = DriftKind> {
        prop_oneof![
            Just(DriftKind::SeasonalityShift),
            Just(DriftKind::TrendChange),
            Just(DriftKind::LevelShock),
            Just(DriftKind::VolatilitySpike),
            Just(DriftKind::Hierarchical),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn locality_and_determinism(kind in kinds(), t0 in 2u32..119, frac in 0.01f64..1.0, seed in 0u64..1000) {
            let p = synth(seed % 3);
            let mut sc = DriftScenario::new(kind, t0);
            sc.affected_fraction = frac;
            sc.seed = seed;
            if kind == DriftKind::Hierarchical { sc.affected_region = Some("CA".into()); }
            let (q, rec) = inject(&p, &sc).unwrap();
            let (q2, rec2) = inject(&p, &sc).unwrap();
            prop_assert_eq!(&q, &q2);
            prop_assert_eq!(&rec, &rec2);
            prop_assert!(!rec.affected_series.is_empty());
            let c0 = p.col(t0);
            for s in 0..p.n_series() {
                for c in 0..p.n_days() {
                    let touched = rec.affected_series.contains(&s) && c >= c0;
                    if !touched {
                        prop_assert_eq!(p.sales()[s][c].to_bits(), q.sales()[s][c].to_bits());
                    }
                    prop_assert!(q.sales()[s][c] >= 0.0);
                }
            }
            prop_assert_eq!(p.prices(), q.prices());
        }
    }
}
