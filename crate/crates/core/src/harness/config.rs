use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detect::DetectorConfig;
use crate::error::{Error, Result};
use crate::forecast::{FeatureSpec, GbtHyper};
use crate::ingest::SynthConfig;
use crate::inject::DriftScenario;
use crate::retrain::{CostModel, PlanConfig};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    M5,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct M5Paths {
    pub sales: PathBuf,
    pub calendar: PathBuf,
    pub prices: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub synthetic: SynthConfig,
    pub m5: Option<M5Paths>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            synthetic: SynthConfig::default(),
            m5: None,
        }
    }
}

/// Day boundaries of the lifecycle. All days are 1-based panel days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_start: u32,
    pub train_end: u32,
    /// First one-step forecast day; detector baselines need it well before
    /// `detect_start`.
    pub forecast_start: u32,
    pub detect_start: u32,
    pub detect_end: u32,
    /// Retraining decision day; evaluation runs from here to `eval_end`.
    pub plan_day: u32,
    /// Unset: last panel day.
    pub eval_end: Option<u32>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_start: 366,
            train_end: 600,
            forecast_start: 601,
            detect_start: 700,
            detect_end: 749,
            plan_day: 750,
            eval_end: None,
        }
    }
}

impl SplitConfig {
    pub fn eval_window(&self, n_days: u32) -> (u32, u32) {
        (self.plan_day, self.eval_end.unwrap_or(n_days))
    }

    /// Pre-drift accuracy window.
    pub fn baseline_window(&self) -> (u32, u32) {
        (self.forecast_start, self.detect_start - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosisConfig {
    /// Features kept for exact attribution, ranked by mean |phi|.
    pub top_features: usize,
    pub background_rows: usize,
    /// Instances sampled per period.
    pub instance_cap: usize,
    /// Drivers shown per store node.
    pub drivers_shown: usize,
}

impl Default for DiagnosisConfig {
    fn default() -> Self {
        DiagnosisConfig {
            top_features: 12,
            background_rows: 20,
            instance_cap: 50,
            drivers_shown: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    /// Level-shock severities swept per seed; empty runs the scenario as configured.
    pub severities: Vec<f64>,
    pub bootstrap_resamples: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            severities: vec![],
            bootstrap_resamples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub split: SplitConfig,
    /// Absent: drift-free control run.
    #[serde(default)]
    pub scenario: Option<DriftScenario>,
    pub features: FeatureSpec,
    pub gbt: GbtHyper,
    pub detector: DetectorConfig,
    pub diagnosis: DiagnosisConfig,
    pub cost: CostModel,
    pub plan: PlanConfig,
    pub batch: BatchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            split: SplitConfig::default(),
            scenario: Some(DriftScenario::new(crate::inject::DriftKind::LevelShock, 700)),
            features: FeatureSpec::default(),
            gbt: GbtHyper::default(),
            detector: DetectorConfig::default(),
            diagnosis: DiagnosisConfig::default(),
            cost: CostModel::default(),
            plan: PlanConfig::default(),
            batch: BatchConfig::default(),
        }
    }
}

// Stream ids for seeds derived from the global seed.
const SYNTH_STREAM: u64 = 1;
const SCENARIO_STREAM: u64 = 2;
const GBT_STREAM: u64 = 3;
const AUTOENCODER_STREAM: u64 = 4;
pub(crate) const PLAN_STREAM: u64 = 5;
pub(crate) const DIAGNOSIS_STREAM: u64 = 6;
pub(crate) const BOOTSTRAP_STREAM: u64 = 7;

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Copy with every component seed derived from `seed`.
    pub fn seeded(&self, seed: u64) -> RunConfig {
        let mut c = self.clone();
        c.seed = seed;
        c.data.synthetic.seed = derive_seed(seed, SYNTH_STREAM);
        if let Some(s) = c.scenario.as_mut() {
            s.seed = derive_seed(seed, SCENARIO_STREAM);
        }
        c.gbt.seed = derive_seed(seed, GBT_STREAM);
        c.detector.autoencoder.seed = derive_seed(seed, AUTOENCODER_STREAM);
        c
    }

    /// SHA-256 of the serialized config with the output directory blanked,
    /// so reruns into different directories hash alike.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        Ok(hex::encode(Sha256::digest(c.to_toml()?.as_bytes())))
    }

    /// Checks that need no panel.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let s = &self.split;
        if !(s.train_start <= s.train_end
            && s.train_end < s.forecast_start
            && s.forecast_start < s.detect_start
            && s.detect_start <= s.detect_end
            && s.detect_end < s.plan_day)
        {
            return bad(format!(
                "split days must satisfy train_start <= train_end < forecast_start < detect_start <= detect_end < plan_day, got {s:?}"
            ));
        }
        let (b0, _) = self.detector.baseline_days(s.detect_start)?;
        if b0 < s.forecast_start {
            return bad(format!(
                "detector baseline starts on day {b0}, before the first forecast day {}",
                s.forecast_start
            ));
        }
        if let Some(sc) = &self.scenario {
            if sc.onset_day < s.detect_start || sc.onset_day > s.detect_end {
                return bad(format!(
                    "onset day {} outside the monitored range [{}, {}]",
                    sc.onset_day, s.detect_start, s.detect_end
                ));
            }
        }
        if self.data.source == DataSource::M5 && self.data.m5.is_none() {
            return bad("data.source = \"m5\" needs a [data.m5] table".into());
        }
        if self.diagnosis.top_features == 0 || self.diagnosis.background_rows == 0 || self.diagnosis.instance_cap == 0 {
            return bad("diagnosis counts must be >= 1".into());
        }
        if self.batch.severities.iter().any(|a| !(*a > 0.0)) {
            return bad("batch severities must be positive".into());
        }
        self.features.validate()?;
        self.detector.validate()?;
        self.cost.validate()?;
        self.plan.validate()?;
        Ok(())
    }

    /// Checks against the loaded panel length.
    pub fn validate_for_panel(&self, n_days: u32) -> Result<()> {
        let (e0, e1) = self.split.eval_window(n_days);
        if e1 > n_days || e0 > e1 {
            return Err(Error::Config(format!(
                "evaluation window [{e0}, {e1}] does not fit a {n_days}-day panel"
            )));
        }
        let lag = self
            .features
            .lag_days
            .iter()
            .chain(&self.features.rolling_windows)
            .max()
            .copied()
            .unwrap_or(0);
        if self.split.train_start <= lag {
            return Err(Error::Config(format!(
                "train_start {} leaves no history for the {lag}-day features",
                self.split.train_start
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SHIPPED: &str = include_str!("../../../../config/default.toml");

    #[test]
    fn shipped_config_is_the_default() {
        let c = RunConfig::from_toml(SHIPPED).unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn toml_roundtrip_and_hash() {
        let c = RunConfig::default().seeded(3);
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        let mut moved = c.clone();
        moved.output_dir = PathBuf::from("/elsewhere");
        assert_eq!(moved.hash().unwrap(), c.hash().unwrap());
        assert_ne!(RunConfig::default().seeded(4).hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn control_config_and_errors() {
        let c = RunConfig::from_toml("seed = 1\n[split]\nplan_day = 760\n").unwrap();
        assert!(c.scenario.is_none());
        assert_eq!(c.split.plan_day, 760);
        assert!(RunConfig::from_toml("bogus = 1").is_err());

        let mut c = RunConfig::default();
        c.split.detect_end = 800;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.scenario.as_mut().unwrap().onset_day = 650;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.split.forecast_start = 690;
        assert!(c.validate().is_err());
        assert!(RunConfig::default().validate_for_panel(700).is_err());
    }

    #[test]
    fn seeds_are_derived() {
        let a = RunConfig::default().seeded(1);
        let b = RunConfig::default().seeded(2);
        assert_ne!(a.data.synthetic.seed, b.data.synthetic.seed);
        assert_ne!(a.data.synthetic.seed, a.gbt.seed);
        assert_eq!(a, RunConfig::default().seeded(1));
    }
}
