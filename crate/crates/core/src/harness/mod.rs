//! Configuration-driven lifecycle: data, baseline training, injection,
//! detection, diagnosis, planning, retraining and evaluation, each stage
//! reading and writing a shared output directory.

mod batch;
mod config;
mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};

pub use batch::{batch_runs, BatchReport, SeedRun, SeverityRow};
pub use config::{BatchConfig, DataConfig, DataSource, DiagnosisConfig, M5Paths, RunConfig, SplitConfig};
pub use report::{
    bootstrap_mean, compute_detection_metrics, control_detection_metrics, evaluate, AccuracyBlock, AccuracyMetrics,
    BusinessMetrics, DetectionMetrics, EvalInputs, EvaluationReport, Interval, Provenance, RetrainingSummary,
};

use crate::data::{build_hierarchy, Level, Panel};
use crate::detect::{calibrate, read_event_log, sweep, write_event_log, DetectionRun, DetectorBank, DriftEvent};
use crate::diagnose::{
    delta_phi_tree, hierarchical_impact, rank_features_tree, DeltaPhi, DiagnosticMap, ImpactWindows,
};
use crate::error::{Error, Result};
use crate::forecast::{
    feature_row, one_step_forecasts, one_step_forecasts_for, train_store_models, wmape, Forecasts, ModelSet,
    MODEL_VERSION,
};
use crate::ingest::{generate_synthetic, load_m5, load_panel, save_panel, PANEL_VERSION};
use crate::inject::{inject, InjectionRecord};
use crate::retrain::{build_plan, execute_retraining, RetrainPlan, StoreDecision};
use crate::rng::{self, derive_seed};

/// Artifact layout under one output directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn clean_panel(&self) -> PathBuf {
        self.root.join("panel/clean.csv")
    }
    pub fn drifted_panel(&self) -> PathBuf {
        self.root.join("panel/drifted.csv")
    }
    pub fn baseline_models(&self) -> PathBuf {
        self.root.join("models/baseline")
    }
    pub fn deployed_models(&self) -> PathBuf {
        self.root.join("models/deployed")
    }
    pub fn detectors(&self) -> PathBuf {
        self.root.join("models/detectors.json")
    }
    pub fn forecasts(&self, name: &str) -> PathBuf {
        self.root.join(format!("forecasts/{name}.json"))
    }
    pub fn injection(&self) -> PathBuf {
        self.root.join("injection.json")
    }
    pub fn events(&self) -> PathBuf {
        self.root.join("events.log")
    }
    pub fn control_events(&self) -> PathBuf {
        self.root.join("control_events.log")
    }
    /// Full drift-free sweep behind control_events.log.
    pub fn control_run(&self) -> PathBuf {
        self.root.join("control.json")
    }
    pub fn detection(&self) -> PathBuf {
        self.root.join("detection.json")
    }
    pub fn diagnosis(&self) -> PathBuf {
        self.root.join("diagnosis/diagnosis.json")
    }
    pub fn diagnosis_text(&self) -> PathBuf {
        self.root.join("diagnosis/map.txt")
    }
    pub fn plan(&self) -> PathBuf {
        self.root.join("plan/plan.json")
    }
    pub fn decisions(&self) -> PathBuf {
        self.root.join("plan/decisions.json")
    }
    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn report_text(&self) -> PathBuf {
        self.root.join("report.txt")
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&read_text(path)?)?)
}

/// Both detection sweeps of a run, as logged in detection.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub monitored: DetectionRun,
    pub control: DetectionRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreAttribution {
    pub store: String,
    pub n_baseline: usize,
    pub n_drift: usize,
    /// Attributed features in ranking order.
    pub features: Vec<String>,
    pub deltas: Vec<DeltaPhi>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub event_day: u32,
    pub windows: ImpactWindows,
    /// Per-series WMAPE drift minus baseline; series with no sales in a
    /// window count as 0.
    pub delta_wmape: BTreeMap<usize, f64>,
    pub attributions: Vec<StoreAttribution>,
    pub map: DiagnosticMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainRecord {
    pub decisions: Vec<StoreDecision>,
    pub before: Option<crate::forecast::MetricReport>,
    pub after: Option<crate::forecast::MetricReport>,
}

/// In-memory lifecycle state; every field mirrors an artifact and is loaded
/// from the workspace on demand when a stage runs on its own.
#[derive(Debug, Clone, Default)]
pub struct State {
    pub panel: Option<Panel>,
    pub models: Option<ModelSet>,
    pub clean_forecasts: Option<Forecasts>,
    pub bank: Option<DetectorBank>,
    pub control: Option<DetectionRun>,
    /// `None` inside means a control run (no scenario).
    pub injected: Option<Option<(Panel, InjectionRecord)>>,
    pub monitored_forecasts: Option<Forecasts>,
    pub detection: Option<DetectionRecord>,
    pub diagnosis: Option<Option<Diagnosis>>,
    pub plan: Option<Option<RetrainPlan>>,
    pub deployed: Option<(ModelSet, RetrainRecord, Forecasts)>,
    pub report: Option<EvaluationReport>,
}

pub struct Lifecycle {
    pub config: RunConfig,
    pub workspace: Workspace,
    pub state: State,
}

macro_rules! stage {
    ($name:literal, $body:expr) => {
        (|| -> Result<_> { $body })().map_err(|e: Error| e.in_stage($name))
    };
}

impl Lifecycle {
    /// Uses `config` as given; call [`RunConfig::seeded`] first to derive
    /// component seeds.
    pub fn new(config: RunConfig) -> Result<Lifecycle> {
        config.validate()?;
        Ok(Lifecycle {
            workspace: Workspace::new(&config.output_dir),
            config,
            state: State::default(),
        })
    }

    fn panel(&mut self) -> Result<&Panel> {
        if self.state.panel.is_none() {
            self.state.panel = Some(load_panel(&self.workspace.clean_panel())?);
        }
        Ok(self.state.panel.as_ref().expect("loaded"))
    }

    fn models(&mut self) -> Result<&ModelSet> {
        if self.state.models.is_none() {
            self.state.models = Some(ModelSet::load_dir(&self.workspace.baseline_models())?);
        }
        Ok(self.state.models.as_ref().expect("loaded"))
    }

    fn clean_forecasts(&mut self) -> Result<&Forecasts> {
        if self.state.clean_forecasts.is_none() {
            self.state.clean_forecasts = Some(read_json(&self.workspace.forecasts("clean"))?);
        }
        Ok(self.state.clean_forecasts.as_ref().expect("loaded"))
    }

    fn injected(&mut self) -> Result<Option<&(Panel, InjectionRecord)>> {
        if self.state.injected.is_none() {
            self.state.injected = Some(match self.config.scenario {
                None => None,
                Some(_) => Some((
                    load_panel(&self.workspace.drifted_panel())?,
                    read_json(&self.workspace.injection())?,
                )),
            });
        }
        Ok(self.state.injected.as_ref().expect("loaded").as_ref())
    }

    /// Drifted panel on drift runs, the clean panel otherwise.
    fn monitored(&mut self) -> Result<Panel> {
        self.panel()?;
        Ok(match self.injected()? {
            Some((p, _)) => p.clone(),
            None => self.state.panel.clone().expect("loaded"),
        })
    }

    fn monitored_forecasts(&mut self) -> Result<&Forecasts> {
        if self.state.monitored_forecasts.is_none() {
            self.state.monitored_forecasts = Some(read_json(&self.workspace.forecasts("monitored"))?);
        }
        Ok(self.state.monitored_forecasts.as_ref().expect("loaded"))
    }

    fn detection(&mut self) -> Result<&DetectionRecord> {
        if self.state.detection.is_none() {
            self.state.detection = Some(read_json(&self.workspace.detection())?);
        }
        Ok(self.state.detection.as_ref().expect("loaded"))
    }

    fn diagnosis(&mut self) -> Result<Option<&Diagnosis>> {
        if self.state.diagnosis.is_none() {
            self.state.diagnosis = Some(read_json(&self.workspace.diagnosis())?);
        }
        Ok(self.state.diagnosis.as_ref().expect("loaded").as_ref())
    }

    fn plan_record(&mut self) -> Result<Option<&RetrainPlan>> {
        if self.state.plan.is_none() {
            self.state.plan = Some(read_json(&self.workspace.plan())?);
        }
        Ok(self.state.plan.as_ref().expect("loaded").as_ref())
    }

    fn deployed(&mut self) -> Result<&(ModelSet, RetrainRecord, Forecasts)> {
        if self.state.deployed.is_none() {
            self.state.deployed = Some((
                ModelSet::load_dir(&self.workspace.deployed_models())?,
                read_json(&self.workspace.decisions())?,
                read_json(&self.workspace.forecasts("deployed"))?,
            ));
        }
        Ok(self.state.deployed.as_ref().expect("loaded"))
    }

    fn n_days(&mut self) -> Result<u32> {
        Ok(self.panel()?.last_day())
    }

    /// Generates or loads the panel and writes panel/clean.csv.
    pub fn data(&mut self) -> Result<()> {
        stage!("ingest", {
            let panel = match self.config.data.source {
                DataSource::Synthetic => generate_synthetic(&self.config.data.synthetic)?,
                DataSource::M5 => {
                    let m5 = self
                        .config
                        .data
                        .m5
                        .as_ref()
                        .ok_or_else(|| Error::Config("missing [data.m5]".into()))?;
                    load_m5(&m5.sales, &m5.calendar, &m5.prices)?
                }
            };
            self.config.validate_for_panel(panel.last_day())?;
            write_text(&self.workspace.config(), &self.config.to_toml()?)?;
            let path = self.workspace.clean_panel();
            ensure_parent(&path)?;
            save_panel(&panel, &path)?;
            self.state.panel = Some(panel);
            Ok(())
        })
    }

    /// Trains the baseline store models and one-step forecasts from
    /// `forecast_start` to the last day.
    pub fn train(&mut self) -> Result<()> {
        stage!("train", {
            let s = self.config.split.clone();
            let n_days = self.n_days()?;
            self.config.validate_for_panel(n_days)?;
            self.panel()?;
            let panel = self.state.panel.as_ref().expect("loaded");
            let models = train_store_models(
                panel,
                &self.config.features,
                &self.config.gbt,
                s.train_start,
                s.train_end,
            )?;
            let fc = one_step_forecasts(&models, panel, s.forecast_start, panel.last_day())?;
            models.save_dir(&self.workspace.baseline_models())?;
            write_json(&self.workspace.forecasts("clean"), &fc)?;
            self.state.models = Some(models);
            self.state.clean_forecasts = Some(fc);
            Ok(())
        })
    }

    /// Calibrates the detectors on the clean pre-monitoring history and
    /// sweeps the clean panel as the matched control run.
    pub fn calibrate(&mut self) -> Result<()> {
        stage!("detect", {
            self.panel()?;
            self.clean_forecasts()?;
            let panel = self.state.panel.as_ref().expect("loaded");
            let fc = self.state.clean_forecasts.as_ref().expect("loaded");
            let s = &self.config.split;
            let bank = calibrate(panel, fc, &self.config.detector, s.detect_start)?;
            let control = sweep(panel, fc, &bank, s.detect_end)?;
            write_json(&self.workspace.detectors(), &bank)?;
            write_json(&self.workspace.control_run(), &control)?;
            write_text(&self.workspace.control_events(), &write_event_log(&control.events)?)?;
            self.state.bank = Some(bank);
            self.state.control = Some(control);
            Ok(())
        })
    }

    /// Applies the configured scenario; a no-op on control runs.
    pub fn inject(&mut self) -> Result<()> {
        stage!("inject", {
            let Some(scenario) = self.config.scenario.clone() else {
                self.state.injected = Some(None);
                return Ok(());
            };
            let (drifted, record) = inject(self.panel()?, &scenario)?;
            let path = self.workspace.drifted_panel();
            ensure_parent(&path)?;
            save_panel(&drifted, &path)?;
            write_json(&self.workspace.injection(), &record)?;
            self.state.injected = Some(Some((drifted, record)));
            Ok(())
        })
    }

    /// Forecasts the monitored panel and sweeps it.
    pub fn detect(&mut self) -> Result<()> {
        stage!("detect", {
            if self.state.bank.is_none() {
                if self.workspace.detectors().exists() && self.workspace.control_run().exists() {
                    self.state.bank = Some(read_json(&self.workspace.detectors())?);
                    self.state.control = Some(read_json(&self.workspace.control_run())?);
                } else {
                    self.calibrate()?;
                }
            }
            let monitored = self.monitored()?;
            self.models()?;
            self.clean_forecasts()?;
            let clean = self.state.panel.as_ref().expect("loaded");
            let models = self.state.models.as_ref().expect("loaded");
            let clean_fc = self.state.clean_forecasts.as_ref().expect("loaded");
            let bank = self.state.bank.as_ref().expect("calibrated");

            // features only read a series' own history, so unchanged rows
            // keep their clean forecasts
            let first = clean_fc.first_day;
            let changed: Vec<usize> = (0..clean.n_series())
                .filter(|s| clean.sales()[*s] != monitored.sales()[*s])
                .collect();
            let mut fc = clean_fc.clone();
            let fresh = one_step_forecasts_for(models, &monitored, &changed, first, monitored.last_day())?;
            for (s, row) in changed.iter().zip(fresh) {
                fc.values[*s] = row;
            }
            let run = sweep(&monitored, &fc, bank, self.config.split.detect_end)?;
            write_json(&self.workspace.forecasts("monitored"), &fc)?;
            write_text(&self.workspace.events(), &write_event_log(&run.events)?)?;
            let record = DetectionRecord {
                monitored: run,
                control: self.state.control.clone().expect("calibrated"),
            };
            write_json(&self.workspace.detection(), &record)?;
            self.state.monitored_forecasts = Some(fc);
            self.state.detection = Some(record);
            Ok(())
        })
    }

    /// Severity map and attribution shifts for the first event, if any.
    pub fn diagnose(&mut self) -> Result<()> {
        stage!("diagnose", {
            let event = self.detection()?.monitored.events.first().cloned();
            let diagnosis = match event {
                None => None,
                Some(event) => Some(self.diagnose_event(&event)?),
            };
            write_json(&self.workspace.diagnosis(), &diagnosis)?;
            write_text(
                &self.workspace.diagnosis_text(),
                &diagnosis
                    .as_ref()
                    .map_or_else(|| "no drift event\n".to_string(), |d| d.map.render(false)),
            )?;
            self.state.diagnosis = Some(diagnosis);
            Ok(())
        })
    }

    fn diagnose_event(&mut self, event: &DriftEvent) -> Result<Diagnosis> {
        let monitored = self.monitored()?;
        self.models()?;
        self.monitored_forecasts()?;
        let models = self.state.models.as_ref().expect("loaded");
        let fc = self.state.monitored_forecasts.as_ref().expect("loaded");
        let cfg = &self.config;
        let baseline = cfg.detector.baseline_days(cfg.split.detect_start)?;
        let drift = (event.day, cfg.split.plan_day - 1);
        let windows = ImpactWindows { baseline, drift };

        let mut wmape_base = BTreeMap::new();
        let mut wmape_drift = BTreeMap::new();
        for s in 0..monitored.n_series() {
            let w = |(a, b): (u32, u32)| {
                let y: Vec<f64> = (a..=b).map(|d| monitored.sales_at(s, d)).collect();
                wmape(&y, fc.window(s, a, b)).unwrap_or(0.0)
            };
            wmape_base.insert(s, w(baseline));
            wmape_drift.insert(s, w(drift));
        }
        let delta_wmape: BTreeMap<usize, f64> = wmape_drift.iter().map(|(s, d)| (*s, d - wmape_base[s])).collect();
        let hierarchy = build_hierarchy(monitored.keys())?;
        let mut map = hierarchical_impact(&wmape_base, &wmape_drift, &hierarchy, &monitored, windows)?;

        let groups = monitored.store_groups();
        let mut scope_by_store: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for s in &event.series_scope {
            scope_by_store
                .entry(&monitored.keys()[*s].store_id)
                .or_default()
                .push(*s);
        }
        let dcfg = &cfg.diagnosis;
        let seed = derive_seed(cfg.seed, config::DIAGNOSIS_STREAM);
        let mut attributions = vec![];
        for (k, (store, scope)) in scope_by_store.iter().enumerate() {
            let model = models.for_series(&monitored, scope[0])?;
            let spec = model
                .feature_spec
                .as_ref()
                .ok_or_else(|| Error::validation("model has no feature spec"))?;
            let rows = |series: &[usize], (a, b): (u32, u32)| -> Result<Vec<Vec<f64>>> {
                let mut out = vec![];
                for &s in series {
                    for d in a..=b {
                        out.push(feature_row(&monitored, spec, s, d)?);
                    }
                }
                Ok(out)
            };
            let store_seed = derive_seed(seed, k as u64);
            let pool = rows(&groups[*store], baseline)?;
            let n_bg = dcfg.background_rows.min(pool.len());
            let background: Vec<Vec<f64>> = index::sample(&mut rng::seeded(store_seed), pool.len(), n_bg)
                .into_iter()
                .map(|i| pool[i].clone())
                .collect();
            let base_inst = rows(scope, baseline)?;
            let drift_inst = rows(scope, drift)?;
            let n_rank = dcfg.instance_cap.min(base_inst.len());
            let rank_inst: Vec<Vec<f64>> =
                index::sample(&mut rng::seeded(derive_seed(store_seed, 1)), base_inst.len(), n_rank)
                    .into_iter()
                    .map(|i| base_inst[i].clone())
                    .collect();
            let subset = rank_features_tree(model, &rank_inst, &background, dcfg.top_features)?;
            let names = model.feature_names();
            let deltas = delta_phi_tree(
                model,
                &base_inst,
                &drift_inst,
                &background,
                &subset,
                &names,
                dcfg.instance_cap,
                derive_seed(store_seed, 2),
            )?;
            map.attach_features(Level::Store, store, &deltas, dcfg.drivers_shown);
            attributions.push(StoreAttribution {
                store: store.to_string(),
                n_baseline: base_inst.len().min(dcfg.instance_cap),
                n_drift: drift_inst.len().min(dcfg.instance_cap),
                features: subset.iter().map(|i| names[*i].clone()).collect(),
                deltas,
            });
        }
        Ok(Diagnosis {
            event_day: event.day,
            windows,
            delta_wmape,
            attributions,
            map,
        })
    }

    /// Builds the retraining plan when a drift event was diagnosed.
    pub fn plan(&mut self) -> Result<()> {
        stage!("plan", {
            let diagnosis = self.diagnosis()?.cloned();
            let plan = match diagnosis {
                None => None,
                Some(d) => {
                    let scope = self.detection()?.monitored.events[0].series_scope.clone();
                    let monitored = self.monitored()?;
                    self.models()?;
                    let models = self.state.models.as_ref().expect("loaded");
                    let cfg = &self.config;
                    Some(build_plan(
                        &monitored,
                        models,
                        &d.delta_wmape,
                        &scope,
                        cfg.split.plan_day,
                        &cfg.cost,
                        &cfg.plan,
                        &cfg.features,
                        &cfg.gbt,
                        derive_seed(cfg.seed, config::PLAN_STREAM),
                    )?)
                }
            };
            write_json(&self.workspace.plan(), &plan)?;
            self.state.plan = Some(plan);
            Ok(())
        })
    }

    /// Executes an approved plan with rollback and forecasts the evaluation
    /// window with the deployed models.
    pub fn retrain(&mut self) -> Result<()> {
        stage!("retrain", {
            let plan = self.plan_record()?.cloned();
            let monitored = self.monitored()?;
            let n_days = monitored.last_day();
            let models = self.models()?.clone();
            let cfg = &self.config;
            let eval = cfg.split.eval_window(n_days);
            let (deployed, record) = match &plan {
                Some(p) => {
                    let out =
                        execute_retraining(&monitored, &models, p, &cfg.plan, &cfg.features, &cfg.gbt, Some(eval))?;
                    let record = RetrainRecord {
                        decisions: out.decisions,
                        before: out.before,
                        after: out.after,
                    };
                    (out.models, record)
                }
                None => (
                    models,
                    RetrainRecord {
                        decisions: vec![],
                        before: None,
                        after: None,
                    },
                ),
            };
            let fc = one_step_forecasts(&deployed, &monitored, eval.0, eval.1)?;
            deployed.save_dir(&self.workspace.deployed_models())?;
            write_json(&self.workspace.decisions(), &record)?;
            write_json(&self.workspace.forecasts("deployed"), &fc)?;
            self.state.deployed = Some((deployed, record, fc));
            Ok(())
        })
    }

    /// Computes the report from the logged artifacts and writes
    /// report.json and report.txt.
    pub fn evaluate(&mut self) -> Result<EvaluationReport> {
        stage!("evaluate", {
            let n_days = self.n_days()?;
            let monitored = self.monitored()?;
            self.clean_forecasts()?;
            self.monitored_forecasts()?;
            self.plan_record()?;
            self.deployed()?;
            let events = read_event_log(&read_text(&self.workspace.events())?)?;
            let control_events = read_event_log(&read_text(&self.workspace.control_events())?)?;
            let st = &self.state;
            let cfg = &self.config;
            let (_, record, deployed_fc) = st.deployed.as_ref().expect("loaded");
            let inputs = EvalInputs {
                clean: st.panel.as_ref().expect("loaded"),
                monitored: &monitored,
                injection: st.injected.as_ref().expect("loaded").as_ref().map(|(_, r)| r),
                clean_forecasts: st.clean_forecasts.as_ref().expect("loaded"),
                monitored_forecasts: st.monitored_forecasts.as_ref().expect("loaded"),
                deployed_forecasts: Some(deployed_fc),
                events: &events,
                control_events: &control_events,
                plan: st.plan.as_ref().expect("loaded").as_ref(),
                decisions: &record.decisions,
                cost: &cfg.cost,
                baseline_window: cfg.split.baseline_window(),
                eval_window: cfg.split.eval_window(n_days),
                provenance: Provenance {
                    config_hash: cfg.hash()?,
                    seed: cfg.seed,
                    crate_version: env!("CARGO_PKG_VERSION").to_string(),
                    panel_format_version: PANEL_VERSION,
                    model_format_version: MODEL_VERSION,
                },
            };
            let report = evaluate(&inputs)?;
            write_text(&self.workspace.report_json(), &report.to_json()?)?;
            write_text(&self.workspace.report_text(), &report.render())?;
            self.state.report = Some(report.clone());
            Ok(report)
        })
    }

    /// Stages after calibration, in order.
    pub fn finish(&mut self) -> Result<EvaluationReport> {
        self.inject()?;
        self.detect()?;
        self.diagnose()?;
        self.plan()?;
        self.retrain()?;
        self.evaluate()
    }

    /// Rewrites the shared pre-drift artifacts into this workspace, for
    /// lifecycles branched from another one's state.
    fn write_shared(&self) -> Result<()> {
        let st = &self.state;
        let (Some(panel), Some(models), Some(fc), Some(bank), Some(control)) =
            (&st.panel, &st.models, &st.clean_forecasts, &st.bank, &st.control)
        else {
            return Err(Error::validation(
                "branching needs data, train and calibrate to have run",
            ));
        };
        write_text(&self.workspace.config(), &self.config.to_toml()?)?;
        let path = self.workspace.clean_panel();
        ensure_parent(&path)?;
        save_panel(panel, &path)?;
        models.save_dir(&self.workspace.baseline_models())?;
        write_json(&self.workspace.forecasts("clean"), fc)?;
        write_json(&self.workspace.detectors(), bank)?;
        write_json(&self.workspace.control_run(), control)?;
        write_text(&self.workspace.control_events(), &write_event_log(&control.events)?)
    }

    /// New lifecycle sharing this one's pre-drift state under a different
    /// config and output directory. The new config must agree on everything
    /// before injection.
    pub fn branch(&self, config: RunConfig) -> Result<Lifecycle> {
        let mut a = self.config.clone();
        let mut b = config.clone();
        a.scenario = None;
        b.scenario = None;
        a.output_dir = PathBuf::new();
        b.output_dir = PathBuf::new();
        if a != b {
            return Err(Error::validation("branched config differs before injection"));
        }
        let mut out = Lifecycle::new(config)?;
        out.state = State {
            panel: self.state.panel.clone(),
            models: self.state.models.clone(),
            clean_forecasts: self.state.clean_forecasts.clone(),
            bank: self.state.bank.clone(),
            control: self.state.control.clone(),
            ..State::default()
        };
        out.write_shared()?;
        Ok(out)
    }
}

/// Full lifecycle for one config: generate or ingest, train, calibrate,
/// inject, detect, diagnose, plan, retrain and evaluate. Artifacts land in
/// `config.output_dir`; a failing stage leaves earlier artifacts in place.
pub fn run_lifecycle(config: &RunConfig) -> Result<EvaluationReport> {
    let mut lc = Lifecycle::new(config.clone())?;
    lc.data()?;
    lc.train()?;
    lc.calibrate()?;
    lc.finish()
}
