use serde::{Deserialize, Serialize};

use crate::data::{CalendarDay, Panel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSpec {
    pub lag_days: Vec<u32>,
    pub rolling_windows: Vec<u32>,
    pub include_calendar: bool,
    pub include_price: bool,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            lag_days: vec![1, 7, 28, 364],
            rolling_windows: vec![7, 28],
            include_calendar: true,
            include_price: true,
        }
    }
}

/// Window for the price-ratio denominator.
pub const PRICE_RATIO_WINDOW: usize = 28;

impl FeatureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lag_days.iter().chain(&self.rolling_windows).any(|v| *v == 0) {
            return Err(Error::validation("lags and rolling windows must be >= 1"));
        }
        Ok(())
    }

    /// Feature names in the fixed order used by every row built from this spec.
    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["series_code".to_string()];
        for l in &self.lag_days {
            names.push(format!("lag_{l}"));
            names.push(format!("lag_{l}_missing"));
        }
        for w in &self.rolling_windows {
            names.push(format!("rolling_mean_{w}"));
            names.push(format!("rolling_std_{w}"));
        }
        if self.include_calendar {
            names.extend((0..7).map(|d| format!("dow_{d}")));
            names.push("month".into());
            names.push("is_holiday".into());
        }
        if self.include_price {
            names.push("price".into());
            names.push("price_ratio_28".into());
        }
        names
    }

    pub fn n_features(&self) -> usize {
        1 + 2 * self.lag_days.len()
            + 2 * self.rolling_windows.len()
            + if self.include_calendar { 9 } else { 0 }
            + if self.include_price { 2 } else { 0 }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names().iter().position(|n| n == name)
    }

    /// Builds one feature row for the day following `history`.
    ///
    /// `history` holds the series values for every day before the target day
    /// (oldest first) and `price_history` the matching prices. Nothing at or
    /// after the target day is read besides its calendar entry and price.
    pub fn row(
        &self,
        series_code: f64,
        history: &[f64],
        day: &CalendarDay,
        price: f64,
        price_history: &[f64],
    ) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_features());
        out.push(series_code);
        let n = history.len();
        let trailing_mean = if n == 0 {
            0.0
        } else {
            history.iter().sum::<f64>() / n as f64
        };
        for &l in &self.lag_days {
            let l = l as usize;
            if n >= l {
                out.push(history[n - l]);
                out.push(0.0);
            } else {
                out.push(trailing_mean);
                out.push(1.0);
            }
        }
        for &w in &self.rolling_windows {
            let tail = &history[n.saturating_sub(w as usize)..];
            let (m, s) = mean_std(tail);
            out.push(m);
            out.push(s);
        }
        if self.include_calendar {
            for d in 0..7u8 {
                out.push(if day.day_of_week == d { 1.0 } else { 0.0 });
            }
            out.push(day.month as f64);
            out.push(if day.is_holiday { 1.0 } else { 0.0 });
        }
        if self.include_price {
            out.push(price);
            let tail = &price_history[price_history.len().saturating_sub(PRICE_RATIO_WINDOW)..];
            let ratio = if tail.is_empty() {
                1.0
            } else {
                price / (tail.iter().sum::<f64>() / tail.len() as f64)
            };
            out.push(ratio);
        }
        out
    }
}

/// Population mean and standard deviation; (0, 0) for an empty slice.
pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }
}

/// Features of `series` for target `day`, using panel sales strictly before `day`.
pub fn build_features(panel: &Panel, spec: &FeatureSpec, series: usize, day: u32) -> Result<FeatureVector> {
    Ok(FeatureVector {
        names: spec.names(),
        values: feature_row(panel, spec, series, day)?,
    })
}

pub(crate) fn feature_row(panel: &Panel, spec: &FeatureSpec, series: usize, day: u32) -> Result<Vec<f64>> {
    if day == 0 {
        return Err(Error::validation("day must be >= 1"));
    }
    if !panel.contains_day(day) {
        return Err(Error::validation(format!("day {day} outside panel calendar")));
    }
    if series >= panel.n_series() {
        return Err(Error::validation(format!("series {series} out of range")));
    }
    let c = panel.col(day);
    Ok(spec.row(
        series as f64,
        &panel.sales()[series][..c],
        &panel.calendar()[c],
        panel.prices()[series][c],
        &panel.prices()[series][..c],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::{calendar, key, panel_from};

    fn one(values: Vec<f64>) -> Panel {
        panel_from(vec![key("A", "S", "CA", "F", "F_1")], vec![values])
    }

    #[test]
    fn names_match_values() {
        let spec = FeatureSpec::default();
        assert_eq!(spec.names().len(), spec.n_features());
        let p = one((1..=20).map(|v| v as f64).collect());
        assert_eq!(
            build_features(&p, &spec, 0, 15).unwrap().values.len(),
            spec.n_features()
        );
    }

    #[test]
    fn constant_series() {
        let spec = FeatureSpec::default();
        let p = one(vec![4.0; 40]);
        let f = build_features(&p, &spec, 0, 35).unwrap();
        for l in [1, 7, 28, 364] {
            assert_eq!(f.get(&format!("lag_{l}")), Some(4.0));
        }
        assert_eq!(f.get("lag_364_missing"), Some(1.0));
        assert_eq!(f.get("lag_28_missing"), Some(0.0));
        assert_eq!(f.get("rolling_std_7"), Some(0.0));
        assert_eq!(f.get("rolling_std_28"), Some(0.0));
    }

    #[test]
    fn holiday_flag_passthrough() {
        let spec = FeatureSpec::default();
        let mut cal = calendar(10);
        cal[4].is_holiday = true;
        let p = Panel::new(
            vec![key("A", "S", "CA", "F", "F_1")],
            cal,
            vec![vec![1.0; 10]],
            vec![vec![1.0; 10]],
        )
        .unwrap();
        assert_eq!(build_features(&p, &spec, 0, 5).unwrap().get("is_holiday"), Some(1.0));
        assert_eq!(build_features(&p, &spec, 0, 6).unwrap().get("is_holiday"), Some(0.0));
    }

    #[test]
    fn rolling_mean_window_convention() {
        let p = one((1..=10).map(|v| v as f64).collect());
        let f = build_features(&p, &FeatureSpec::default(), 0, 10).unwrap();
        // brute force over days 3..=9
        let oracle = (3..=9).map(|d| d as f64).sum::<f64>() / 7.0;
        assert_eq!(oracle, 6.0);
        assert_eq!(f.get("rolling_mean_7"), Some(oracle));
    }

    #[test]
    fn day_zero_rejected() {
        let p = one(vec![1.0; 5]);
        assert!(build_features(&p, &FeatureSpec::default(), 0, 0).is_err());
        assert!(build_features(&p, &FeatureSpec::default(), 0, 6).is_err());
    }

    #[test]
    fn no_target_leakage() {
        let spec = FeatureSpec::default();
        let base: Vec<f64> = (0..60).map(|v| (v * 7 % 13) as f64).collect();
        let p = one(base.clone());
        for day in [2u32, 10, 30, 60] {
            let mut probe = base.clone();
            for v in probe.iter_mut().skip(day as usize - 1) {
                *v += 1000.0;
            }
            let q = one(probe);
            assert_eq!(
                build_features(&p, &spec, 0, day).unwrap(),
                build_features(&q, &spec, 0, day).unwrap()
            );
        }
    }

    #[test]
    fn zero_lag_rejected() {
        let spec = FeatureSpec {
            lag_days: vec![0],
            ..FeatureSpec::default()
        };
        assert!(spec.validate().is_err());
    }
}
