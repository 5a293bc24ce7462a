//! Panel sources: M5-schema CSV ingestion, a seeded synthetic generator and
//! the native versioned panel bundle.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::{CalendarDay, Panel, SeriesKey};
use crate::error::{Error, Result};
use crate::rng;

pub const PANEL_FORMAT: &str = "driftguard-panel";
pub const PANEL_VERSION: u32 = 1;

const STATE_NAMES: [&str; 5] = ["CA", "TX", "WI", "NY", "FL"];
const CATEGORIES: [&str; 3] = ["FOODS", "HOUSEHOLD", "HOBBIES"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_stores: usize,
    pub n_states: usize,
    pub n_skus_per_store: usize,
    pub n_days: usize,
    pub weekly_amplitude: f64,
    pub annual_period_days: usize,
    pub annual_amplitude: f64,
    pub base_demand_mean: f64,
    /// Negative-binomial size parameter; variance is `mu + mu^2 / dispersion`.
    pub noise_dispersion: f64,
    /// 0 disables holidays.
    pub holiday_every_n_days: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_stores: 8,
            n_states: 2,
            n_skus_per_store: 25,
            n_days: 800,
            weekly_amplitude: 0.2,
            annual_period_days: 364,
            annual_amplitude: 0.1,
            base_demand_mean: 1000.0,
            noise_dispersion: 10000.0,
            holiday_every_n_days: 30,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::validation(format!("synthetic config: {m}")));
        if self.n_stores == 0 || self.n_states == 0 || self.n_skus_per_store == 0 {
            return bad("counts must be positive");
        }
        if self.n_states > self.n_stores {
            return bad("n_states must not exceed n_stores");
        }
        if self.n_days < 60 {
            return bad("n_days must be >= 60");
        }
        if self.annual_period_days == 0 {
            return bad("annual_period_days must be positive");
        }
        if !(self.weekly_amplitude >= 0.0 && self.annual_amplitude >= 0.0) {
            return bad("amplitudes must be non-negative");
        }
        if self.weekly_amplitude + self.annual_amplitude >= 1.0 {
            return bad("combined seasonal amplitude must stay below 1");
        }
        if !(self.base_demand_mean > 0.0) || !(self.noise_dispersion > 0.0) {
            return bad("base_demand_mean and noise_dispersion must be positive");
        }
        Ok(())
    }
}

fn synthetic_calendar(n_days: usize, holiday_every: usize) -> Vec<CalendarDay> {
    let start = NaiveDate::from_ymd_opt(2011, 1, 29).expect("valid date");
    (1..=n_days as u32)
        .map(|d| {
            let date = start + Duration::days(d as i64 - 1);
            let is_holiday = holiday_every > 0 && (d as usize).is_multiple_of(holiday_every);
            CalendarDay {
                day_index: d,
                date: date.format("%Y-%m-%d").to_string(),
                day_of_week: date.weekday().num_days_from_monday() as u8,
                month: date.month() as u8,
                is_holiday,
                event_name: is_holiday.then(|| "Holiday".to_string()),
            }
        })
        .collect()
}

fn state_name(i: usize) -> String {
    STATE_NAMES
        .get(i)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("ST{}", i + 1))
}

/// Seeded synthetic panel with negative-binomial daily counts around a
/// weekly × annual seasonal mean. Pure function of `config`.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Panel> {
    config.validate()?;
    let calendar = synthetic_calendar(config.n_days, config.holiday_every_n_days);
    let mut rng = rng::seeded(config.seed);

    let mut per_state = vec![0usize; config.n_states];
    let mut keys = Vec::with_capacity(config.n_stores * config.n_skus_per_store);
    for store in 0..config.n_stores {
        let state = store % config.n_states;
        per_state[state] += 1;
        let state_id = state_name(state);
        let store_id = format!("{state_id}_{}", per_state[state]);
        for j in 0..config.n_skus_per_store {
            let cat = CATEGORIES[j % CATEGORIES.len()];
            let dept = format!("{cat}_{}", (j / CATEGORIES.len()) % 2 + 1);
            keys.push(SeriesKey {
                sku_id: format!("{dept}_{:03}", j + 1),
                store_id: store_id.clone(),
                state_id: state_id.clone(),
                category: cat.to_string(),
                department: dept,
            });
        }
    }

    let step = Normal::new(0.0, 0.01).expect("valid normal");
    let mut sales = Vec::with_capacity(keys.len());
    let mut prices = Vec::with_capacity(keys.len());
    for _ in &keys {
        let weekly_phase = rng.random::<f64>() * 2.0 * PI;
        let annual_phase = rng.random::<f64>() * 2.0 * PI;
        let base_price = 1.0 + 9.0 * rng.random::<f64>();

        let mut price_row = Vec::with_capacity(config.n_days);
        let mut log_mult = 0.0f64;
        for d in 0..config.n_days {
            if d > 0 && d % 7 == 0 {
                log_mult = (log_mult + step.sample(&mut rng)).clamp(-0.5, 0.5);
            }
            let p = (base_price * log_mult.exp() * 100.0).round() / 100.0;
            price_row.push(p.max(0.01));
        }

        let mut row = Vec::with_capacity(config.n_days);
        for day in &calendar {
            let t = day.day_index as f64;
            let weekly = 1.0 + config.weekly_amplitude * (2.0 * PI * t / 7.0 + weekly_phase).sin();
            let annual =
                1.0 + config.annual_amplitude * (2.0 * PI * t / config.annual_period_days as f64 + annual_phase).sin();
            let mean = config.base_demand_mean * weekly * annual;
            let gamma = Gamma::new(config.noise_dispersion, mean / config.noise_dispersion)
                .map_err(|e| Error::validation(format!("gamma: {e}")))?;
            let lambda: f64 = gamma.sample(&mut rng);
            let y = if lambda > 0.0 {
                Poisson::new(lambda)
                    .map_err(|e| Error::validation(format!("poisson: {e}")))?
                    .sample(&mut rng)
            } else {
                0.0
            };
            row.push(y);
        }
        sales.push(row);
        prices.push(price_row);
    }
    Panel::new(keys, calendar, sales, prices)
}

// ---------------------------------------------------------------------------
// M5 ingestion

struct HeaderIndex {
    file: String,
    cols: HashMap<String, usize>,
}

impl HeaderIndex {
    fn new(file: &Path, headers: &csv::StringRecord) -> Self {
        HeaderIndex {
            file: file.display().to_string(),
            cols: headers
                .iter()
                .enumerate()
                .map(|(i, h)| (h.trim().to_string(), i))
                .collect(),
        }
    }

    fn require(&self, name: &str) -> Result<usize> {
        self.cols.get(name).copied().ok_or_else(|| Error::MissingColumn {
            file: self.file.clone(),
            column: name.to_string(),
        })
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(f))
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("cannot parse {what} from `{s}`")))
}

/// Loads the public M5 files into a panel. Columns are located by header
/// name; order in the files is irrelevant.
pub fn load_m5(sales_path: &Path, calendar_path: &Path, prices_path: &Path) -> Result<Panel> {
    // calendar: d -> (date, wm_yr_wk, month, event)
    let mut rdr = open_csv(calendar_path)?;
    let idx = HeaderIndex::new(calendar_path, rdr.headers()?);
    let (c_date, c_week, c_d, c_month, c_event) = (
        idx.require("date")?,
        idx.require("wm_yr_wk")?,
        idx.require("d")?,
        idx.require("month")?,
        idx.require("event_name_1")?,
    );
    let mut cal: HashMap<String, (String, String, u8, Option<String>)> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let event = rec[c_event].trim();
        cal.insert(
            rec[c_d].trim().to_string(),
            (
                rec[c_date].trim().to_string(),
                rec[c_week].trim().to_string(),
                parse_num(&rec[c_month], "month")?,
                (!event.is_empty()).then(|| event.to_string()),
            ),
        );
    }

    let mut rdr = open_csv(sales_path)?;
    let headers = rdr.headers()?.clone();
    let idx = HeaderIndex::new(sales_path, &headers);
    let (s_item, s_dept, s_cat, s_store, s_state) = (
        idx.require("item_id")?,
        idx.require("dept_id")?,
        idx.require("cat_id")?,
        idx.require("store_id")?,
        idx.require("state_id")?,
    );
    let mut day_cols: Vec<(u32, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.trim().strip_prefix("d_")?.parse().ok().map(|d| (d, i)))
        .collect();
    day_cols.sort();
    if day_cols.is_empty() {
        return Err(Error::MissingColumn {
            file: sales_path.display().to_string(),
            column: "d_1".into(),
        });
    }
    for w in day_cols.windows(2) {
        if w[1].0 != w[0].0 + 1 {
            return Err(Error::Format(format!(
                "day columns skip from d_{} to d_{}",
                w[0].0, w[1].0
            )));
        }
    }

    let mut calendar = Vec::with_capacity(day_cols.len());
    let mut weeks = Vec::with_capacity(day_cols.len());
    for &(d, _) in &day_cols {
        let (date, week, month, event) = cal
            .get(&format!("d_{d}"))
            .ok_or_else(|| Error::Format(format!("calendar has no row for d_{d}")))?;
        let parsed =
            NaiveDate::parse_from_str(date, "%Y-%m-%d").map_err(|_| Error::Format(format!("bad date `{date}`")))?;
        calendar.push(CalendarDay {
            day_index: d,
            date: date.clone(),
            day_of_week: parsed.weekday().num_days_from_monday() as u8,
            month: *month,
            is_holiday: event.is_some(),
            event_name: event.clone(),
        });
        weeks.push(week.clone());
    }

    let mut keys = Vec::new();
    let mut sales = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        keys.push(SeriesKey {
            sku_id: rec[s_item].trim().to_string(),
            store_id: rec[s_store].trim().to_string(),
            state_id: rec[s_state].trim().to_string(),
            category: rec[s_cat].trim().to_string(),
            department: rec[s_dept].trim().to_string(),
        });
        let row = day_cols
            .iter()
            .map(|&(_, i)| parse_num::<f64>(&rec[i], "unit sales"))
            .collect::<Result<Vec<_>>>()?;
        sales.push(row);
    }

    let mut rdr = open_csv(prices_path)?;
    let idx = HeaderIndex::new(prices_path, rdr.headers()?);
    let (p_store, p_item, p_week, p_price) = (
        idx.require("store_id")?,
        idx.require("item_id")?,
        idx.require("wm_yr_wk")?,
        idx.require("sell_price")?,
    );
    let mut price_map: HashMap<(String, String, String), f64> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        price_map.insert(
            (
                rec[p_store].trim().to_string(),
                rec[p_item].trim().to_string(),
                rec[p_week].trim().to_string(),
            ),
            parse_num(&rec[p_price], "sell_price")?,
        );
    }

    let mut prices = Vec::with_capacity(keys.len());
    let mut missing = Vec::new();
    for k in &keys {
        let raw: Vec<Option<f64>> = weeks
            .iter()
            .map(|w| {
                price_map
                    .get(&(k.store_id.clone(), k.sku_id.clone(), w.clone()))
                    .copied()
                    .filter(|p| *p > 0.0)
            })
            .collect();
        let Some(first) = raw.iter().flatten().next().copied() else {
            missing.push(k.label());
            prices.push(vec![]);
            continue;
        };
        // back-fill before the first recorded week, forward-fill after
        let mut last = first;
        prices.push(
            raw.into_iter()
                .map(|p| {
                    if let Some(p) = p {
                        last = p;
                    }
                    last
                })
                .collect(),
        );
    }
    if !missing.is_empty() {
        return Err(Error::MissingPrices(missing));
    }
    Panel::new(keys, calendar, sales, prices)
}

// ---------------------------------------------------------------------------
// Native bundle

fn fmt_f64(v: f64) -> String {
    // Display for f64 is the shortest string that parses back to the same bits.
    format!("{v}")
}

/// Writes the panel as a single versioned CSV bundle (UTF-8, LF).
pub fn save_panel(panel: &Panel, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .flexible(true)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(f));
    w.write_record([PANEL_FORMAT, &PANEL_VERSION.to_string()])?;

    w.write_record(["#keys", &panel.n_series().to_string()])?;
    w.write_record(["sku_id", "store_id", "state_id", "category", "department"])?;
    for k in panel.keys() {
        w.write_record([&k.sku_id, &k.store_id, &k.state_id, &k.category, &k.department])?;
    }

    w.write_record(["#calendar", &panel.n_days().to_string()])?;
    w.write_record(["day_index", "date", "day_of_week", "month", "is_holiday", "event_name"])?;
    for d in panel.calendar() {
        w.write_record([
            d.day_index.to_string(),
            d.date.clone(),
            d.day_of_week.to_string(),
            d.month.to_string(),
            (d.is_holiday as u8).to_string(),
            d.event_name.clone().unwrap_or_default(),
        ])?;
    }

    for (name, matrix) in [("#sales", panel.sales()), ("#prices", panel.prices())] {
        w.write_record([name, &matrix.len().to_string()])?;
        for row in matrix {
            w.write_record(row.iter().map(|v| fmt_f64(*v)))?;
        }
    }
    let mut inner = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    inner.flush().map_err(|e| Error::io(path, e))
}

struct BundleReader<R: std::io::Read> {
    records: csv::StringRecordsIntoIter<R>,
}

impl<R: std::io::Read> BundleReader<R> {
    fn next(&mut self, what: &str) -> Result<csv::StringRecord> {
        self.records
            .next()
            .ok_or_else(|| Error::Format(format!("unexpected end of panel file reading {what}")))?
            .map_err(Error::from)
    }

    fn section(&mut self, name: &str) -> Result<usize> {
        let rec = self.next(name)?;
        if rec.get(0) != Some(name) {
            return Err(Error::Format(format!("expected section {name}")));
        }
        parse_num(rec.get(1).unwrap_or(""), "section length")
    }

    fn matrix(&mut self, name: &str) -> Result<Vec<Vec<f64>>> {
        let rows = self.section(name)?;
        (0..rows)
            .map(|_| {
                self.next(name)?
                    .iter()
                    .map(|v| parse_num::<f64>(v, name))
                    .collect::<Result<Vec<_>>>()
            })
            .collect()
    }
}

pub fn load_panel(path: &Path) -> Result<Panel> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = BundleReader {
        records: csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(BufReader::new(f))
            .into_records(),
    };

    let header = rdr.next("header")?;
    if header.get(0) != Some(PANEL_FORMAT) {
        return Err(Error::Format("not a driftguard panel file".into()));
    }
    let version = header.get(1).unwrap_or("");
    if version != PANEL_VERSION.to_string() {
        return Err(Error::VersionMismatch {
            expected: PANEL_VERSION,
            found: version.to_string(),
        });
    }

    let n_keys = rdr.section("#keys")?;
    rdr.next("key header")?;
    let mut keys = Vec::with_capacity(n_keys);
    for _ in 0..n_keys {
        let r = rdr.next("key")?;
        if r.len() != 5 {
            return Err(Error::Format("key row must have 5 fields".into()));
        }
        keys.push(SeriesKey {
            sku_id: r[0].to_string(),
            store_id: r[1].to_string(),
            state_id: r[2].to_string(),
            category: r[3].to_string(),
            department: r[4].to_string(),
        });
    }

    let n_days = rdr.section("#calendar")?;
    rdr.next("calendar header")?;
    let mut calendar = Vec::with_capacity(n_days);
    for _ in 0..n_days {
        let r = rdr.next("calendar day")?;
        if r.len() != 6 {
            return Err(Error::Format("calendar row must have 6 fields".into()));
        }
        calendar.push(CalendarDay {
            day_index: parse_num(&r[0], "day_index")?,
            date: r[1].to_string(),
            day_of_week: parse_num(&r[2], "day_of_week")?,
            month: parse_num(&r[3], "month")?,
            is_holiday: &r[4] == "1",
            event_name: (!r[5].is_empty()).then(|| r[5].to_string()),
        });
    }

    let sales = rdr.matrix("#sales")?;
    let prices = rdr.matrix("#prices")?;
    Panel::new(keys, calendar, sales, prices)
}

/// Per-series counts for the hierarchy levels, handy for summaries.
pub fn level_counts(panel: &Panel) -> BTreeMap<&'static str, usize> {
    use std::collections::BTreeSet;
    let k = panel.keys();
    let count = |f: &dyn Fn(&SeriesKey) -> &str| k.iter().map(f).collect::<BTreeSet<_>>().len();
    BTreeMap::from([
        ("series", k.len()),
        ("states", count(&|k| &k.state_id)),
        ("stores", count(&|k| &k.store_id)),
        ("categories", count(&|k| &k.category)),
        ("departments", count(&|k| &k.department)),
    ])
}
