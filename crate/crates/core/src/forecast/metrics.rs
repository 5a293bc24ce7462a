use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(actuals: &[f64], forecasts: &[f64]) -> Result<()> {
    if actuals.len() != forecasts.len() {
        return Err(Error::validation(format!(
            "{} actuals vs {} forecasts",
            actuals.len(),
            forecasts.len()
        )));
    }
    if actuals.is_empty() {
        return Err(Error::validation("empty input"));
    }
    Ok(())
}

/// `Σ|y - ŷ| / Σy`. Undefined (error, never 0) when the actuals sum to zero.
pub fn wmape(actuals: &[f64], forecasts: &[f64]) -> Result<f64> {
    check(actuals, forecasts)?;
    let denom: f64 = actuals.iter().sum();
    if !(denom > 0.0) {
        return Err(Error::UndefinedMetric("WMAPE with zero total actuals".into()));
    }
    let num: f64 = actuals.iter().zip(forecasts).map(|(y, f)| (y - f).abs()).sum();
    Ok(num / denom)
}

pub fn mae(actuals: &[f64], forecasts: &[f64]) -> Result<f64> {
    check(actuals, forecasts)?;
    let s: f64 = actuals.iter().zip(forecasts).map(|(y, f)| (y - f).abs()).sum();
    Ok(s / actuals.len() as f64)
}

pub fn rmse(actuals: &[f64], forecasts: &[f64]) -> Result<f64> {
    check(actuals, forecasts)?;
    let s: f64 = actuals.iter().zip(forecasts).map(|(y, f)| (y - f) * (y - f)).sum();
    Ok((s / actuals.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub wmape: f64,
    pub mae: f64,
    pub rmse: f64,
    /// Series whose actuals sum to zero are left out.
    pub per_series_wmape: BTreeMap<usize, f64>,
}

/// Metrics over a set of series; `actuals[i]` and `forecasts[i]` belong to `series[i]`.
pub fn metric_report(series: &[usize], actuals: &[Vec<f64>], forecasts: &[Vec<f64>]) -> Result<MetricReport> {
    if series.len() != actuals.len() || series.len() != forecasts.len() {
        return Err(Error::validation("series / actuals / forecasts count mismatch"));
    }
    let mut per_series_wmape = BTreeMap::new();
    for ((s, y), f) in series.iter().zip(actuals).zip(forecasts) {
        match wmape(y, f) {
            Ok(v) => {
                per_series_wmape.insert(*s, v);
            }
            Err(Error::UndefinedMetric(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let y: Vec<f64> = actuals.iter().flatten().copied().collect();
    let f: Vec<f64> = forecasts.iter().flatten().copied().collect();
    Ok(MetricReport {
        wmape: wmape(&y, &f)?,
        mae: mae(&y, &f)?,
        rmse: rmse(&y, &f)?,
        per_series_wmape,
    })
}
