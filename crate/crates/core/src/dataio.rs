//! Price and macro panel ingestion, feature construction and split layouts.

use std::io::{Read, Write};
use std::ops::Range;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::datagen::{DatasetBundle, Split};
use crate::error::{contract, Error, Result};

/// Trailing return windows used as features.
pub const DEFAULT_WINDOWS: [usize; 5] = [1, 5, 10, 20, 126];

/// Daily close prices, one column per asset.
#[derive(Clone, Debug, PartialEq)]
pub struct PricePanel {
    pub dates: Vec<NaiveDate>,
    pub names: Vec<String>,
    /// `days x assets`, strictly positive.
    pub prices: Matrix,
}

impl PricePanel {
    pub fn new(dates: Vec<NaiveDate>, names: Vec<String>, prices: Matrix) -> Result<Self> {
        contract!(
            prices.rows() == dates.len() && prices.cols() == names.len(),
            "price matrix {:?} does not match {} dates x {} assets",
            prices.shape(),
            dates.len(),
            names.len()
        );
        contract!(
            dates.windows(2).all(|w| w[0] < w[1]),
            "dates must be strictly ascending"
        );
        contract!(
            prices.data().iter().all(|p| p.is_finite() && *p > 0.0),
            "prices must be finite and positive"
        );
        Ok(Self { dates, names, prices })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn asset_index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Contract(format!("asset {name:?} not in panel")))
    }

    /// The panel restricted to its first `n` dates.
    pub fn truncated(&self, n: usize) -> PricePanel {
        PricePanel {
            dates: self.dates[..n].to_vec(),
            names: self.names.clone(),
            prices: self.prices.row_range(0, n),
        }
    }
}

fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|e| Error::Format(format!("bad date {s:?}: {e}")))
}

fn is_missing(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") || t.eq_ignore_ascii_case("null")
}

fn parse_float(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Format(format!("bad number {s:?}")))
}

/// Reads `date,<name1>,...`. Dates on which any asset is missing are dropped,
/// so the panel is the inner join of the asset histories.
pub fn read_prices_csv(reader: impl Read) -> Result<PricePanel> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 2 || !header[0].trim().eq_ignore_ascii_case("date") {
        return Err(Error::Format("price CSV header must be date,<asset>,...".into()));
    }
    let names: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let mut dates = Vec::new();
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Format(format!(
                "row has {} fields, header has {}",
                rec.len(),
                header.len()
            )));
        }
        let date = parse_date(&rec[0])?;
        if rec.iter().skip(1).any(is_missing) {
            continue;
        }
        let row = rec.iter().skip(1).map(parse_float).collect::<Result<Vec<_>>>()?;
        if let Some(bad) = row.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(Error::Format(format!("non-positive price {bad} on {date}")));
        }
        dates.push(date);
        values.extend(row);
    }
    if dates.is_empty() {
        return Err(Error::Format("price CSV has no complete rows".into()));
    }
    if !dates.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Format("price CSV dates must be strictly ascending".into()));
    }
    let prices = Matrix::new(dates.len(), names.len(), values)?;
    PricePanel::new(dates, names, prices)
}

pub fn write_prices_csv(panel: &PricePanel, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["date".to_string()];
    header.extend(panel.names.iter().cloned());
    w.write_record(&header)?;
    for (t, d) in panel.dates.iter().enumerate() {
        let mut rec = vec![d.format("%Y-%m-%d").to_string()];
        rec.extend(panel.prices.row_slice(t).iter().map(|p| p.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Trailing-return features with the benchmark's next-day return as target.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFrame {
    pub dates: Vec<NaiveDate>,
    /// `<asset>_r<window>` in asset-major order.
    pub feature_names: Vec<String>,
    pub features: Matrix,
    /// Benchmark simple return from each date to the next.
    pub target: Vec<f64>,
}

impl FeatureFrame {
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn split(&self, rows: Range<usize>) -> Split {
        Split {
            x: self.features.row_range(rows.start, rows.end),
            y: self.target[rows].to_vec(),
            z: None,
        }
    }
}

fn simple_returns(panel: &PricePanel) -> Matrix {
    let (t, a) = panel.prices.shape();
    let mut r = Matrix::zeros(t, a);
    for i in 1..t {
        for j in 0..a {
            r.set(i, j, panel.prices.get(i, j) / panel.prices.get(i - 1, j) - 1.0);
        }
    }
    r
}

/// Feature `(a, w)` at date `t` is the mean simple return of asset `a` over
/// the `w` days ending at `t`. Rows lacking a full window or a next-day
/// target are dropped.
pub fn build_features(panel: &PricePanel, windows: &[usize], benchmark: &str) -> Result<FeatureFrame> {
    contract!(!windows.is_empty(), "need at least one window");
    contract!(windows.iter().all(|&w| w >= 1), "windows must be positive");
    let max_w = *windows.iter().max().expect("non-empty");
    let n = panel.len();
    contract!(
        n > max_w + 1,
        "window {max_w} exceeds the available history of {n} days"
    );
    let bench = panel.asset_index(benchmark)?;
    let r = simple_returns(panel);
    let n_assets = panel.names.len();
    let rows: Vec<usize> = (max_w..n - 1).collect();
    let width = n_assets * windows.len();
    let mut features = Matrix::zeros(rows.len(), width);
    for (i, &t) in rows.iter().enumerate() {
        for a in 0..n_assets {
            for (wi, &w) in windows.iter().enumerate() {
                let v = (t + 1 - w..=t).map(|s| r.get(s, a)).sum::<f64>() / w as f64;
                features.set(i, a * windows.len() + wi, v);
            }
        }
    }
    let feature_names = panel
        .names
        .iter()
        .flat_map(|a| windows.iter().map(move |w| format!("{a}_r{w}")))
        .collect();
    Ok(FeatureFrame {
        dates: rows.iter().map(|&t| panel.dates[t]).collect(),
        feature_names,
        features,
        target: rows.iter().map(|&t| r.get(t + 1, bench)).collect(),
    })
}

/// Window lengths of a walk-forward layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RollingConfig {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub step: usize,
}

impl Default for RollingConfig {
    fn default() -> Self {
        Self {
            train: 504,
            valid: 60,
            test: 252,
            step: 252,
        }
    }
}

/// Row ranges of one walk-forward window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RollingSplit {
    pub train: Range<usize>,
    pub valid: Range<usize>,
    pub test: Range<usize>,
}

/// Contiguous train/valid/test windows advancing by `step`; a final
/// partial test window is dropped.
pub fn rolling_splits(n_rows: usize, cfg: &RollingConfig) -> Result<Vec<RollingSplit>> {
    contract!(
        cfg.train >= 1 && cfg.valid >= 1 && cfg.test >= 1 && cfg.step >= 1,
        "window lengths and step must be positive"
    );
    let span = cfg.train + cfg.valid + cfg.test;
    contract!(
        n_rows >= span,
        "{n_rows} rows cannot hold one {span}-row rolling window"
    );
    let mut out = Vec::new();
    let mut s = 0;
    while s + span <= n_rows {
        out.push(RollingSplit {
            train: s..s + cfg.train,
            valid: s + cfg.train..s + cfg.train + cfg.valid,
            test: s + cfg.train + cfg.valid..s + span,
        });
        s += cfg.step;
    }
    Ok(out)
}

/// Per-column stationarity transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Level,
    Diff,
    Log,
    LogDiff,
    DoubleDiff,
    PctChange,
}

impl Transform {
    /// Codes 1 to 6 in the order level, diff, log, log-diff, double-diff,
    /// pct-change.
    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            1 => Transform::Level,
            2 => Transform::Diff,
            3 => Transform::Log,
            4 => Transform::LogDiff,
            5 => Transform::DoubleDiff,
            6 => Transform::PctChange,
            other => return Err(Error::Format(format!("unknown transform code {other}"))),
        })
    }

    /// Applies the transform; undefined leading entries and logs of
    /// non-positive values become NaN.
    pub fn apply(self, x: &[f64]) -> Vec<f64> {
        let ln = |v: f64| if v > 0.0 { v.ln() } else { f64::NAN };
        let lag = |t: usize, k: usize| if t >= k { Some(t - k) } else { None };
        (0..x.len())
            .map(|t| match self {
                Transform::Level => x[t],
                Transform::Log => ln(x[t]),
                Transform::Diff => lag(t, 1).map_or(f64::NAN, |s| x[t] - x[s]),
                Transform::LogDiff => lag(t, 1).map_or(f64::NAN, |s| ln(x[t]) - ln(x[s])),
                Transform::DoubleDiff => lag(t, 2).map_or(f64::NAN, |s| x[t] - 2.0 * x[s + 1] + x[s]),
                Transform::PctChange => lag(t, 1).map_or(f64::NAN, |s| x[t] / x[s] - 1.0),
            })
            .collect()
    }
}

/// Monthly macro variables. Missing values are NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct MacroPanel {
    pub dates: Vec<String>,
    pub names: Vec<String>,
    pub values: Matrix,
    pub transforms: Vec<Transform>,
}

impl MacroPanel {
    /// Applies every column's transform and drops rows with any NaN.
    pub fn transformed(&self) -> Result<MacroPanel> {
        let (n, p) = self.values.shape();
        let mut cols = Vec::with_capacity(p);
        for (j, t) in self.transforms.iter().enumerate() {
            cols.push(t.apply(&self.values.column_values(j)));
        }
        let keep: Vec<usize> = (0..n).filter(|&i| cols.iter().all(|c| c[i].is_finite())).collect();
        let mut values = Matrix::zeros(keep.len(), p);
        for (r, &i) in keep.iter().enumerate() {
            for (j, c) in cols.iter().enumerate() {
                values.set(r, j, c[i]);
            }
        }
        Ok(MacroPanel {
            dates: keep.iter().map(|&i| self.dates[i].clone()).collect(),
            names: self.names.clone(),
            values,
            transforms: vec![Transform::Level; p],
        })
    }
}

/// Reads `date,<name>,...` with an optional second row of transform codes,
/// recognised by a first cell that is not a date (for example `transform`).
pub fn read_macro_csv(reader: impl Read) -> Result<MacroPanel> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 2 || !header[0].trim().eq_ignore_ascii_case("date") {
        return Err(Error::Format("macro CSV header must be date,<name>,...".into()));
    }
    let p = header.len() - 1;
    let names: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let mut transforms = vec![Transform::Level; p];
    let mut dates = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Format(format!(
                "row has {} fields, header has {}",
                rec.len(),
                header.len()
            )));
        }
        let first = rec[0].trim();
        let looks_like_date = first.chars().next().is_some_and(|c| c.is_ascii_digit());
        if i == 0 && !looks_like_date {
            transforms = rec
                .iter()
                .skip(1)
                .map(|s| {
                    let code: u8 = s
                        .trim()
                        .parse()
                        .map_err(|_| Error::Format(format!("bad transform code {s:?}")))?;
                    Transform::from_code(code)
                })
                .collect::<Result<_>>()?;
            continue;
        }
        if first.is_empty() {
            return Err(Error::Format("empty date".into()));
        }
        dates.push(first.to_string());
        for s in rec.iter().skip(1) {
            values.push(if is_missing(s) { f64::NAN } else { parse_float(s)? });
        }
    }
    if dates.is_empty() {
        return Err(Error::Format("macro CSV has no data rows".into()));
    }
    Ok(MacroPanel {
        values: Matrix::new(dates.len(), p, values)?,
        dates,
        names,
        transforms,
    })
}

/// Share of rows (chronologically first) forming the train/valid pool.
pub const MACRO_POOL_FRACTION: f64 = 0.6;
/// Share of the pool drawn at random for training.
pub const MACRO_TRAIN_FRACTION: f64 = 0.7;

/// Row indices of the macro layout: `(train, valid, test)`.
pub fn macro_split_rows(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let pool = (n as f64 * MACRO_POOL_FRACTION).floor() as usize;
    let n_train = (pool as f64 * MACRO_TRAIN_FRACTION).floor() as usize;
    contract!(
        n_train >= 1 && pool > n_train && n > pool,
        "{n} rows are too few for a train/valid/test layout"
    );
    let mut idx: Vec<usize> = (0..pool).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = idx[..n_train].to_vec();
    let mut valid = idx[n_train..].to_vec();
    train.sort_unstable();
    valid.sort_unstable();
    Ok((train, valid, (pool..n).collect()))
}

/// Regression of `target` on every other column of the transformed panel.
pub fn macro_splits(panel: &MacroPanel, target: &str, seed: u64) -> Result<DatasetBundle> {
    let t = panel
        .names
        .iter()
        .position(|n| n == target)
        .ok_or_else(|| Error::Contract(format!("target {target:?} not in macro panel")))?;
    let data = panel.transformed()?;
    let (n, p) = data.values.shape();
    contract!(p >= 2, "macro panel needs at least one regressor besides the target");
    let others: Vec<usize> = (0..p).filter(|&j| j != t).collect();
    let x_all = Matrix::from_fn(n, p - 1, |i, j| data.values.get(i, others[j]));
    let y_all = data.values.column_values(t);
    let (train, valid, test) = macro_split_rows(n, seed)?;
    let all = Split::new(x_all, y_all, None)?;
    Ok(DatasetBundle {
        train: all.select(&train),
        valid: all.select(&valid),
        test: all.select(&test),
        f_choices: Vec::new(),
        loadings: None,
    })
}
