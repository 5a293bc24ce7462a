//! Four-detector drift ensemble: error ratio (e1), distribution tests (e2),
//! autoencoder reconstruction (e3) and two-sided CUSUM (e4), combined per
//! series by a quorum vote and aggregated into panel-level events.

mod autoencoder;
mod cusum;
mod stats;

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use autoencoder::{init_autoencoder, train_autoencoder, AeArch, AutoencoderModel, THRESHOLD_QUANTILE};
pub use cusum::{cusum_update, CusumState};
pub use stats::{
    feature_drift, ks_distance, ks_statistic, psi, psi_categorical, psi_from_proportions, statistical_score,
    FeatureDrift, FeatureKind, StatScore, KS_MIN_SAMPLE, PSI_ALERT, PSI_EPSILON,
};

use crate::data::Panel;
use crate::error::{Error, Result};
use crate::forecast::{feature_row, mean_std, FeatureSpec, Forecasts};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub theta_e: f64,
    pub theta_s: f64,
    /// Fixed reconstruction threshold. Unset means each autoencoder's
    /// calibrated 99th percentile.
    pub theta_a: Option<f64>,
    /// CUSUM decision threshold, in baseline residual standard deviations.
    pub theta_c: f64,
    pub recent_window: u32,
    pub baseline_window: u32,
    /// Days left out between the baseline window and detection start.
    pub baseline_gap: u32,
    /// CUSUM slack, in baseline residual standard deviations.
    pub cusum_k: f64,
    pub psi_bins: usize,
    pub ks_alpha: f64,
    pub vote_quorum: usize,
    pub panel_flag_fraction: f64,
    /// Feature names fed to the statistical detector.
    pub monitored_features: Vec<String>,
    pub autoencoder_enabled: bool,
    pub autoencoder: AeArch,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            theta_e: 0.25,
            theta_s: 0.9,
            theta_a: None,
            theta_c: 5.0,
            recent_window: 14,
            baseline_window: 56,
            baseline_gap: 7,
            cusum_k: 0.5,
            psi_bins: 10,
            ks_alpha: 0.1,
            vote_quorum: 3,
            panel_flag_fraction: 0.05,
            monitored_features: vec!["lag_1".into()],
            autoencoder_enabled: true,
            autoencoder: AeArch::default(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("detector: {m}")));
        if self.recent_window < 7 || self.baseline_window < 7 {
            return bad("windows must be >= 7 days");
        }
        if !(1..=4).contains(&self.vote_quorum) {
            return bad("vote_quorum must be in 1..=4");
        }
        let positive = [self.theta_e, self.theta_s, self.theta_c, self.cusum_k];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || self.theta_a.is_some_and(|v| !(v > 0.0)) {
            return bad("thresholds and slack must be positive");
        }
        if !(self.panel_flag_fraction > 0.0 && self.panel_flag_fraction < 1.0) {
            return bad("panel_flag_fraction must lie in (0, 1)");
        }
        if !(self.ks_alpha > 0.0 && self.ks_alpha < 1.0) || self.psi_bins < 2 {
            return bad("ks_alpha must lie in (0, 1) and psi_bins be >= 2");
        }
        if self.monitored_features.is_empty() {
            return bad("monitored_features is empty");
        }
        monitor_spec(&self.monitored_features)?;
        Ok(())
    }

    /// First and last day of the calibration baseline for a sweep starting at `start`.
    pub fn baseline_days(&self, start: u32) -> Result<(u32, u32)> {
        let back = self.baseline_gap + self.baseline_window;
        if start <= back {
            return Err(Error::InsufficientData(format!(
                "detection start {start} leaves no room for a {}-day baseline",
                self.baseline_window
            )));
        }
        Ok((start - back, start - self.baseline_gap - 1))
    }
}

/// Feature spec covering the monitored names, their column indices and kinds.
fn monitor_spec(names: &[String]) -> Result<(FeatureSpec, Vec<usize>, Vec<FeatureKind>)> {
    let mut spec = FeatureSpec {
        lag_days: vec![],
        rolling_windows: vec![],
        include_calendar: false,
        include_price: false,
    };
    let num = |s: &str| s.parse::<u32>().ok().filter(|v| *v > 0);
    for n in names {
        if let Some(l) = n.strip_prefix("lag_").and_then(|r| num(r.trim_end_matches("_missing"))) {
            spec.lag_days.push(l);
        } else if let Some(w) = n
            .strip_prefix("rolling_mean_")
            .or_else(|| n.strip_prefix("rolling_std_"))
            .and_then(num)
        {
            spec.rolling_windows.push(w);
        } else if n.starts_with("dow_") || n == "month" || n == "is_holiday" {
            spec.include_calendar = true;
        } else if n == "price" || n == "price_ratio_28" {
            spec.include_price = true;
        }
    }
    spec.lag_days.sort_unstable();
    spec.lag_days.dedup();
    spec.rolling_windows.sort_unstable();
    spec.rolling_windows.dedup();
    let mut idx = vec![];
    let mut kinds = vec![];
    for n in names {
        let i = spec
            .index_of(n)
            .ok_or_else(|| Error::Config(format!("unknown monitored feature {n}")))?;
        idx.push(i);
        let categorical = n.starts_with("dow_") || n == "month" || n == "is_holiday" || n.ends_with("_missing");
        kinds.push(if categorical {
            FeatureKind::Categorical
        } else {
            FeatureKind::Continuous
        });
    }
    Ok((spec, idx, kinds))
}

/// e1 = RMSE(last `recent_window` residuals) / baseline_rmse - 1.
pub fn error_score(residuals: &[f64], baseline_rmse: f64, recent_window: usize) -> Result<f64> {
    if !(baseline_rmse > 0.0) {
        return Err(Error::DegenerateBaseline(format!("baseline RMSE is {baseline_rmse}")));
    }
    if recent_window == 0 || residuals.len() < recent_window {
        return Err(Error::InsufficientData(format!(
            "{} residuals, recent window needs {recent_window}",
            residuals.len()
        )));
    }
    let tail = &residuals[residuals.len() - recent_window..];
    let rmse = (tail.iter().map(|r| r * r).sum::<f64>() / recent_window as f64).sqrt();
    Ok(rmse / baseline_rmse - 1.0)
}

/// Detector output for one series and day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Score {
    Value(f64),
    /// Not enough data right now; lowers the quorum.
    Abstain,
    /// Detector unavailable for this series; removed from the ensemble.
    Disabled,
}

impl Score {
    pub fn value(&self) -> Option<f64> {
        match self {
            Score::Value(v) => Some(*v),
            _ => None,
        }
    }

    fn from_result(r: Result<f64>) -> Score {
        r.map_or(Score::Abstain, Score::Value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoteOutcome {
    /// `None` for abstaining or disabled detectors.
    pub votes: [Option<bool>; 4],
    pub n_votes: usize,
    /// Quorum after reductions.
    pub quorum: usize,
    /// `None` when no detector produced a score.
    pub decision: Option<bool>,
}

/// Majority vote with `votes_i = e_i > theta_i`.
///
/// Disabled detectors shrink the ensemble (quorum capped by the number of
/// enabled detectors). Each abstention lowers the quorum by one, down to a
/// floor of 2.
pub fn ensemble_vote(scores: &[Score; 4], thresholds: &[f64; 4], quorum: usize) -> VoteOutcome {
    let mut votes = [None; 4];
    let (mut enabled, mut abstain) = (0, 0);
    for (i, s) in scores.iter().enumerate() {
        match s {
            Score::Value(v) => {
                enabled += 1;
                votes[i] = Some(*v > thresholds[i]);
            }
            Score::Abstain => {
                enabled += 1;
                abstain += 1;
            }
            Score::Disabled => {}
        }
    }
    let n_votes = votes.iter().filter(|v| **v == Some(true)).count();
    let base = quorum.min(enabled);
    let eff = base.saturating_sub(abstain).max(base.min(2));
    let decision = (enabled > abstain).then_some(n_votes >= eff);
    VoteOutcome {
        votes,
        n_votes,
        quorum: eff,
        decision,
    }
}

/// Residual statistics from the calibration baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesBaseline {
    pub mu0: f64,
    pub sigma: f64,
    pub rmse: f64,
}

impl SeriesBaseline {
    fn scale(&self) -> f64 {
        if self.sigma > 0.0 {
            self.sigma
        } else {
            1.0
        }
    }
}

/// Calibrated detector state shared by every sweep starting at `start_day`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorBank {
    pub config: DetectorConfig,
    pub start_day: u32,
    pub baselines: Vec<SeriesBaseline>,
    /// Per-store autoencoders; stores without one run with e3 disabled.
    pub autoencoders: BTreeMap<String, AutoencoderModel>,
}

fn residuals(panel: &Panel, forecasts: &Forecasts, s: usize, start: u32, end: u32) -> Vec<f64> {
    (start..=end)
        .map(|d| panel.sales_at(s, d) - forecasts.at(s, d))
        .collect()
}

/// Estimates per-series residual baselines and trains the per-store
/// autoencoders on standardized residual windows that end before the
/// baseline gap.
pub fn calibrate(
    panel: &Panel,
    forecasts: &Forecasts,
    config: &DetectorConfig,
    start_day: u32,
) -> Result<DetectorBank> {
    config.validate()?;
    if forecasts.values.len() != panel.n_series() {
        return Err(Error::validation("forecasts and panel disagree on series count"));
    }
    let (b0, b1) = config.baseline_days(start_day)?;
    if !forecasts.covers(b0, b1) || !panel.contains_day(b0) {
        return Err(Error::validation(format!(
            "forecasts must cover the baseline window [{b0}, {b1}]"
        )));
    }
    let baselines: Vec<SeriesBaseline> = (0..panel.n_series())
        .map(|s| {
            let r = residuals(panel, forecasts, s, b0, b1);
            let (mu0, sigma) = mean_std(&r);
            let rmse = (r.iter().map(|x| x * x).sum::<f64>() / r.len() as f64).sqrt();
            SeriesBaseline { mu0, sigma, rmse }
        })
        .collect();

    let mut autoencoders = BTreeMap::new();
    if config.autoencoder_enabled {
        let w = config.autoencoder.window as u32;
        let groups: Vec<(String, Vec<usize>)> = panel.store_groups().into_iter().collect();
        let trained: Vec<(String, Result<AutoencoderModel>)> = groups
            .par_iter()
            .map(|(store, series)| {
                let mut windows = vec![];
                if b1 + 1 >= forecasts.first_day + w {
                    for &s in series {
                        let base = baselines[s];
                        let z: Vec<f64> = residuals(panel, forecasts, s, forecasts.first_day, b1)
                            .iter()
                            .map(|r| (r - base.mu0) / base.scale())
                            .collect();
                        windows.extend(z.windows(w as usize).map(|x| x.to_vec()));
                    }
                }
                (store.clone(), train_autoencoder(&windows, &config.autoencoder))
            })
            .collect();
        for (store, model) in trained {
            match model {
                Ok(m) => {
                    autoencoders.insert(store, m);
                }
                Err(Error::InsufficientData(msg)) => {
                    log::warn!("autoencoder disabled for store {store}: {msg}");
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(DetectorBank {
        config: config.clone(),
        start_day,
        baselines,
        autoencoders,
    })
}

/// All four detector scores and the vote for one series on one day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesDay {
    pub scores: [Score; 4],
    pub outcome: VoteOutcome,
}

/// Panel-level drift event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftEvent {
    pub day: u32,
    /// Series flagged on the event day or any later swept day.
    pub series_scope: Vec<usize>,
    /// Series flagged on the event day itself.
    pub initial_scope_size: usize,
    /// Mean of each detector's score over the initially flagged series.
    pub scores: [Option<f64>; 4],
    /// Detector `i` voted for at least half of the initially flagged series.
    pub votes: [bool; 4],
    pub quorum: usize,
    pub decision: bool,
}

impl DriftEvent {
    pub fn to_log_line(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Line<'a> {
            scope_size: usize,
            #[serde(flatten)]
            event: &'a DriftEvent,
        }
        Ok(serde_json::to_string(&Line {
            scope_size: self.series_scope.len(),
            event: self,
        })?)
    }
}

pub fn write_event_log(events: &[DriftEvent]) -> Result<String> {
    let mut out = String::new();
    for e in events {
        out.push_str(&e.to_log_line()?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_event_log(text: &str) -> Result<Vec<DriftEvent>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRun {
    pub start_day: u32,
    pub end_day: u32,
    pub events: Vec<DriftEvent>,
    /// Number of flagged series per swept day.
    pub daily_flagged: Vec<usize>,
    /// First flag day per series that was ever flagged.
    pub first_flag: BTreeMap<usize, u32>,
    /// Series whose baseline RMSE was zero (e1 abstains throughout).
    pub review: Vec<usize>,
}

impl DetectionRun {
    pub fn first_event(&self) -> Option<&DriftEvent> {
        self.events.first()
    }
}

/// Calibrates on `[.., start_day)` and sweeps `[start_day, end_day]`.
pub fn detect_panel(
    panel: &Panel,
    forecasts: &Forecasts,
    config: &DetectorConfig,
    start_day: u32,
    end_day: u32,
) -> Result<DetectionRun> {
    let bank = calibrate(panel, forecasts, config, start_day)?;
    sweep(panel, forecasts, &bank, end_day)
}

/// Per-series detector scores for every day in `[bank.start_day, end_day]`.
pub fn score_series(
    panel: &Panel,
    forecasts: &Forecasts,
    bank: &DetectorBank,
    s: usize,
    end_day: u32,
) -> Result<Vec<SeriesDay>> {
    let cfg = &bank.config;
    let start = bank.start_day;
    let (b0, b1) = cfg.baseline_days(start)?;
    let rw = cfg.recent_window;
    let (spec, idx, kinds) = monitor_spec(&cfg.monitored_features)?;
    let base = bank.baselines[s];
    let ae = bank.autoencoders.get(&panel.keys()[s].store_id);

    let first = b0.min(start + 1 - rw);
    let feats: Vec<Vec<f64>> = (first..=end_day)
        .map(|d| feature_row(panel, &spec, s, d).map(|row| idx.iter().map(|i| row[*i]).collect()))
        .collect::<Result<_>>()?;
    let column =
        |lo: u32, hi: u32, f: usize| -> Vec<f64> { (lo..=hi).map(|d| feats[(d - first) as usize][f]).collect() };
    let baseline_cols: Vec<Vec<f64>> = (0..idx.len()).map(|f| column(b0, b1, f)).collect();

    let res_first = forecasts.first_day;
    let r_all = residuals(panel, forecasts, s, res_first, end_day);
    let thresholds_c = cfg.theta_c * base.scale();
    let k = cfg.cusum_k * base.scale();
    let mut cusum = CusumState::new(base.mu0);
    let mut out = Vec::with_capacity((end_day - start + 1) as usize);
    for t in start..=end_day {
        let upto = &r_all[..=(t - res_first) as usize];
        let e1 = Score::from_result(error_score(upto, base.rmse, rw as usize));

        let lo = t + 1 - rw;
        let current: Vec<Vec<f64>> = (0..idx.len()).map(|f| column(lo, t, f)).collect();
        let e2 = Score::from_result(statistical_score(&baseline_cols, &current, &kinds).map(|s| s.e2));

        let (e3, theta_a) = match ae {
            Some(m) if upto.len() >= m.window => {
                let z: Vec<f64> = upto[upto.len() - m.window..]
                    .iter()
                    .map(|r| (r - base.mu0) / base.scale())
                    .collect();
                (
                    Score::from_result(m.reconstruction_error(&z)),
                    cfg.theta_a.unwrap_or(m.theta_a),
                )
            }
            Some(m) => (Score::Abstain, cfg.theta_a.unwrap_or(m.theta_a)),
            None => (Score::Disabled, f64::INFINITY),
        };

        cusum = cusum_update(cusum, upto[upto.len() - 1], k);
        let e4 = Score::Value(cusum.score());

        let scores = [e1, e2, e3, e4];
        let thresholds = [cfg.theta_e, cfg.theta_s, theta_a, thresholds_c];
        out.push(SeriesDay {
            scores,
            outcome: ensemble_vote(&scores, &thresholds, cfg.vote_quorum),
        });
    }
    Ok(out)
}

/// Daily sweep over `[bank.start_day, end_day]`. A single panel event is
/// emitted on the first day more than `panel_flag_fraction` of series are
/// flagged; later flags extend its scope.
pub fn sweep(panel: &Panel, forecasts: &Forecasts, bank: &DetectorBank, end_day: u32) -> Result<DetectionRun> {
    let start = bank.start_day;
    if bank.baselines.len() != panel.n_series() || forecasts.values.len() != panel.n_series() {
        return Err(Error::validation(
            "detector bank, forecasts and panel disagree on series count",
        ));
    }
    if end_day < start || !forecasts.covers(forecasts.first_day, end_day) || !panel.contains_day(end_day) {
        return Err(Error::validation(format!(
            "forecasts and actuals must be aligned over [{start}, {end_day}]"
        )));
    }
    let (b0, _) = bank.config.baseline_days(start)?;
    if forecasts.first_day > b0 || forecasts.first_day > start + 1 - bank.config.recent_window {
        return Err(Error::validation(format!(
            "forecasts start on day {} but detection needs residuals from day {b0}",
            forecasts.first_day
        )));
    }

    let per_series: Vec<Vec<SeriesDay>> = (0..panel.n_series())
        .into_par_iter()
        .map(|s| score_series(panel, forecasts, bank, s, end_day))
        .collect::<Result<_>>()?;

    let n = panel.n_series() as f64;
    let mut daily_flagged = vec![];
    let mut first_flag = BTreeMap::new();
    let mut event: Option<(DriftEvent, BTreeSet<usize>)> = None;
    for (i, t) in (start..=end_day).enumerate() {
        let flagged: Vec<usize> = (0..panel.n_series())
            .filter(|s| per_series[*s][i].outcome.decision == Some(true))
            .collect();
        daily_flagged.push(flagged.len());
        for s in &flagged {
            first_flag.entry(*s).or_insert(t);
        }
        match &mut event {
            Some((_, scope)) => scope.extend(flagged.iter().copied()),
            None if flagged.len() as f64 / n > bank.config.panel_flag_fraction => {
                let days: Vec<&SeriesDay> = flagged.iter().map(|s| &per_series[*s][i]).collect();
                event = Some((panel_event(t, &days), flagged.iter().copied().collect()));
            }
            None => {}
        }
    }
    let events = event
        .map(|(mut e, scope)| {
            e.series_scope = scope.into_iter().collect();
            vec![e]
        })
        .unwrap_or_default();
    Ok(DetectionRun {
        start_day: start,
        end_day,
        events,
        daily_flagged,
        first_flag,
        review: (0..panel.n_series())
            .filter(|s| !(bank.baselines[*s].rmse > 0.0))
            .collect(),
    })
}

fn panel_event(day: u32, flagged: &[&SeriesDay]) -> DriftEvent {
    let mut scores = [None; 4];
    let mut votes = [false; 4];
    for i in 0..4 {
        let vals: Vec<f64> = flagged.iter().filter_map(|d| d.scores[i].value()).collect();
        if !vals.is_empty() {
            scores[i] = Some(vals.iter().sum::<f64>() / vals.len() as f64);
        }
        let yes = flagged.iter().filter(|d| d.outcome.votes[i] == Some(true)).count();
        votes[i] = 2 * yes >= flagged.len();
    }
    let quorum = flagged.iter().map(|d| d.outcome.quorum).min().unwrap_or(0);
    let decision = votes.iter().filter(|v| **v).count() >= quorum;
    DriftEvent {
        day,
        series_scope: vec![],
        initial_scope_size: flagged.len(),
        scores,
        votes,
        quorum,
        decision,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::{key, panel_from};
    use proptest::prelude::*;

    #[test]
    fn error_score_cases() {
        let v = error_score(&[3.0, 4.0], 2.5, 2).unwrap();
        let oracle = ((9.0f64 + 16.0) / 2.0).sqrt() / 2.5 - 1.0;
        assert_eq!(v, oracle);
        assert!((v - 0.4142).abs() < 1e-4);
        assert_eq!(error_score(&[2.0, -2.0], 2.0, 2).unwrap(), 0.0);
        assert_eq!(error_score(&[4.0, -4.0], 2.0, 2).unwrap(), 1.0);
        assert!(matches!(error_score(&[1.0], 0.0, 1), Err(Error::DegenerateBaseline(_))));
        assert!(matches!(error_score(&[1.0], 1.0, 2), Err(Error::InsufficientData(_))));
    }

    fn v(x: f64) -> Score {
        Score::Value(x)
    }

    #[test]
    fn vote_cases() {
        let th = [0.5; 4];
        assert_eq!(
            ensemble_vote(&[v(1.0), v(1.0), v(1.0), v(0.0)], &th, 3).decision,
            Some(true)
        );
        assert_eq!(
            ensemble_vote(&[v(1.0), v(1.0), v(0.0), v(0.0)], &th, 3).decision,
            Some(false)
        );
        let one_abstain = ensemble_vote(&[v(1.0), v(1.0), Score::Abstain, v(0.0)], &th, 3);
        assert_eq!(one_abstain.quorum, 2);
        assert_eq!(one_abstain.decision, Some(true));
        let one_yes = ensemble_vote(&[v(1.0), Score::Abstain, v(0.0), v(0.0)], &th, 3);
        assert_eq!(one_yes.decision, Some(false));
        // floor of 2 survives two abstentions
        let two = ensemble_vote(&[v(1.0), Score::Abstain, Score::Abstain, v(0.0)], &th, 3);
        assert_eq!((two.quorum, two.decision), (2, Some(false)));
        let none = ensemble_vote(&[Score::Abstain; 4], &th, 3);
        assert_eq!(none.decision, None);
        // disabled autoencoder: three detectors, quorum stays 3
        let three = ensemble_vote(&[v(1.0), v(1.0), Score::Disabled, v(0.0)], &th, 3);
        assert_eq!((three.quorum, three.decision), (3, Some(false)));
        let all = ensemble_vote(&[v(1.0), v(1.0), Score::Disabled, v(1.0)], &th, 3);
        assert_eq!(all.decision, Some(true));
        // strict threshold
        assert_eq!(ensemble_vote(&[v(0.5); 4], &th, 1).decision, Some(false));
    }

    fn score_strategy() -> impl Strategy<Value = Score> {
        prop_oneof![
            6 => (0.0f64..2.0).prop_map(Score::Value),
            1 => Just(Score::Abstain),
            1 => Just(Score::Disabled),
        ]
    }

    proptest! {
        #[test]
        fn raising_a_score_never_unflags(
            scores in proptest::array::uniform4(score_strategy()),
            i in 0usize..4,
            bump in 0.0f64..3.0,
            quorum in 1usize..=4,
        ) {
            let th = [1.0; 4];
            let before = ensemble_vote(&scores, &th, quorum);
            let mut raised = scores;
            if let Score::Value(x) = raised[i] {
                raised[i] = Score::Value(x + bump);
            }
            let after = ensemble_vote(&raised, &th, quorum);
            if before.decision == Some(true) {
                prop_assert_eq!(after.decision, Some(true));
            }
        }
    }

    fn flat_panel(n_series: usize, n_days: usize, f: impl Fn(usize, usize) -> f64) -> Panel {
        let keys = (0..n_series)
            .map(|i| {
                key(
                    &format!("FOODS_1_{i:03}"),
                    if i % 2 == 0 { "CA_1" } else { "CA_2" },
                    "CA",
                    "FOODS",
                    "FOODS_1",
                )
            })
            .collect();
        let sales = (0..n_series).map(|s| (0..n_days).map(|d| f(s, d)).collect()).collect();
        panel_from(keys, sales)
    }

    fn small_config() -> DetectorConfig {
        DetectorConfig {
            recent_window: 7,
            baseline_window: 28,
            autoencoder: AeArch {
                window: 7,
                bottleneck: 2,
                epochs: 30,
                step_size: 0.05,
                seed: 0,
            },
            ..DetectorConfig::default()
        }
    }

    /// Deterministic pseudo-noise in [-1, 1].
    fn wobble(s: usize, d: usize) -> f64 {
        let x = ((s * 7919 + d * 104729) % 1000) as f64 / 500.0 - 1.0;
        x * x * x.signum()
    }

    #[test]
    fn sweep_catches_shift_and_respects_onset() {
        let onset = 90u32;
        let panel = flat_panel(20, 130, |s, d| {
            let base = 50.0 + 10.0 * wobble(s, d);
            if s < 10 && d + 1 >= onset as usize {
                base * 0.5
            } else {
                base
            }
        });
        let forecasts = Forecasts {
            first_day: 1,
            values: vec![vec![50.0; 130]; 20],
        };
        let run = detect_panel(&panel, &forecasts, &small_config(), onset, 130).unwrap();
        let ev = run.first_event().expect("event");
        assert!(ev.day >= onset);
        assert!(ev.decision);
        assert_eq!(ev.votes.iter().filter(|v| **v).count() >= ev.quorum, ev.decision);
        assert!(ev.series_scope.iter().any(|s| *s < 10));
        assert_eq!(run.daily_flagged.len(), 41);
        assert_eq!(run.events.len(), 1);

        let line = ev.to_log_line().unwrap();
        assert!(line.contains("\"scope_size\""));
        assert_eq!(
            read_event_log(&write_event_log(&run.events).unwrap()).unwrap(),
            run.events
        );
    }

    #[test]
    fn clean_panel_stays_quiet() {
        let panel = flat_panel(20, 130, |s, d| 50.0 + 10.0 * wobble(s, d));
        let forecasts = Forecasts {
            first_day: 1,
            values: vec![vec![50.0; 130]; 20],
        };
        let run = detect_panel(&panel, &forecasts, &small_config(), 90, 130).unwrap();
        assert!(run.events.is_empty(), "{:?}", run.daily_flagged);
    }

    #[test]
    fn perfect_forecasts_go_to_review() {
        let panel = flat_panel(4, 80, |_, _| 5.0);
        let forecasts = Forecasts {
            first_day: 1,
            values: vec![vec![5.0; 80]; 4],
        };
        let mut cfg = small_config();
        cfg.autoencoder_enabled = false;
        let run = detect_panel(&panel, &forecasts, &cfg, 60, 80).unwrap();
        assert_eq!(run.review, vec![0, 1, 2, 3]);
        assert!(run.events.is_empty());
    }

    #[test]
    fn misaligned_inputs_rejected() {
        let panel = flat_panel(4, 80, |_, _| 5.0);
        let short = Forecasts {
            first_day: 50,
            values: vec![vec![5.0; 20]; 4],
        };
        assert!(detect_panel(&panel, &short, &small_config(), 60, 80).is_err());
        let wrong_rows = Forecasts {
            first_day: 1,
            values: vec![vec![5.0; 80]; 3],
        };
        assert!(detect_panel(&panel, &wrong_rows, &small_config(), 60, 80).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DetectorConfig::default().validate().is_ok());
        let mut c = DetectorConfig::default();
        c.vote_quorum = 5;
        assert!(c.validate().is_err());
        let mut c = DetectorConfig::default();
        c.recent_window = 6;
        assert!(c.validate().is_err());
        let mut c = DetectorConfig::default();
        c.monitored_features = vec!["nonsense".into()];
        assert!(c.validate().is_err());
        let (_, idx, kinds) = monitor_spec(&["is_holiday".into(), "lag_7".into()]).unwrap();
        assert_eq!(kinds, vec![FeatureKind::Categorical, FeatureKind::Continuous]);
        assert_eq!(idx.len(), 2);
    }

    #[test]
    fn statistical_detector_reads_only_features() {
        // residuals differ, sales identical: e2 must not change
        let panel = flat_panel(2, 80, |s, d| 20.0 + 5.0 * wobble(s, d));
        let mut cfg = small_config();
        cfg.autoencoder_enabled = false;
        let a = Forecasts {
            first_day: 1,
            values: vec![vec![20.0; 80]; 2],
        };
        let b = Forecasts {
            first_day: 1,
            values: vec![vec![23.0; 80]; 2],
        };
        let bank_a = calibrate(&panel, &a, &cfg, 60).unwrap();
        let bank_b = calibrate(&panel, &b, &cfg, 60).unwrap();
        let da = score_series(&panel, &a, &bank_a, 0, 80).unwrap();
        let db = score_series(&panel, &b, &bank_b, 0, 80).unwrap();
        for (x, y) in da.iter().zip(&db) {
            assert_eq!(x.scores[1], y.scores[1]);
        }
    }
}
