//! Rolling ETF backtests and macro regressions.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    fit_model, is_baseline, run_seed, trials_csv, tune_model, ExperimentConfig, Hyper, SearchSpace, TrialRecord,
};
use crate::autodiff::Matrix;
use crate::datagen::{synth_prices_with, Split};
use crate::dataio::{
    build_features, macro_splits, read_macro_csv, read_prices_csv, rolling_splits, FeatureFrame, PricePanel,
    RollingSplit,
};
use crate::error::{Error, Result};
use crate::metrics::{r2_oos, scale_signal, EnhanceConfig, SignalSeries};
use crate::reporting::{fmt_f, mean_se, MacroRow, PortfolioRow, ResultTable};
use crate::training::mse;

/// Train-split standardization applied to every split; predictions are
/// mapped back with `y_mean` and `y_sd`.
struct Standardized {
    train: Split,
    valid: Split,
    test: Split,
    y_mean: f64,
    y_sd: f64,
}

fn standardize(train: &Split, valid: &Split, test: &Split) -> Standardized {
    let n = train.len() as f64;
    let means = train.x.column_means();
    let sds: Vec<f64> = (0..train.x.cols())
        .map(|j| {
            let m = means.get(0, j);
            let v = (0..train.len()).map(|i| (train.x.get(i, j) - m).powi(2)).sum::<f64>() / n;
            if v > 0.0 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let y_mean = train.y.iter().sum::<f64>() / n;
    let y_sd = {
        let v = train.y.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n;
        if v > 0.0 {
            v.sqrt()
        } else {
            1.0
        }
    };
    let apply = |s: &Split| Split {
        x: Matrix::from_fn(s.x.rows(), s.x.cols(), |i, j| {
            (s.x.get(i, j) - means.get(0, j)) / sds[j]
        }),
        y: s.y.iter().map(|y| (y - y_mean) / y_sd).collect(),
        z: s.z.clone(),
    };
    Standardized {
        train: apply(train),
        valid: apply(valid),
        test: apply(test),
        y_mean,
        y_sd,
    }
}

/// A fitted forecaster's in-sample and out-of-sample predictions on the
/// original target scale.
struct Forecast {
    train: Vec<f64>,
    test: Vec<f64>,
    trials: Vec<TrialRecord>,
}

#[allow(clippy::too_many_arguments)]
fn forecast(
    model: &str,
    train: &Split,
    valid: &Split,
    test: &Split,
    default_k: usize,
    space: &SearchSpace,
    cfg: &ExperimentConfig,
    seed: u64,
    context: &str,
) -> Result<Forecast> {
    match model {
        "perfect_foresight" => {
            return Ok(Forecast {
                train: train.y.clone(),
                test: test.y.clone(),
                trials: Vec::new(),
            })
        }
        "zero" => {
            return Ok(Forecast {
                train: vec![0.0; train.len()],
                test: vec![0.0; test.len()],
                trials: Vec::new(),
            })
        }
        _ => {}
    }
    let s = standardize(train, valid, test);
    let mut trials = Vec::new();
    let hyper = if space.budget > 0 && !is_baseline(model) {
        let tuned = tune_model(model, &s.train, &s.valid, default_k, space, &cfg.train, seed, context);
        trials = tuned.trials;
        tuned.best?.0
    } else {
        cfg.hyper.clone()
    };
    let mut fitted = fit_model(model, &s.train, &s.valid, &hyper, default_k, &cfg.train, seed)?;
    let back = |v: Vec<f64>| v.into_iter().map(|f| f * s.y_sd + s.y_mean).collect::<Vec<_>>();
    Ok(Forecast {
        train: back(fitted.predict(&s.train)?),
        test: back(fitted.predict(&s.test)?),
        trials,
    })
}

#[derive(Clone, Debug)]
pub struct BacktestOutput {
    pub results: ResultTable,
    /// Concatenated raw-position series per model.
    pub signals: BTreeMap<String, SignalSeries>,
    pub trials: Vec<TrialRecord>,
    pub n_splits: usize,
}

impl BacktestOutput {
    pub fn signals_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["model", "date", "forecast", "position", "market"])?;
        for (model, s) in &self.signals {
            for t in 0..s.len() {
                w.write_record([
                    model.clone(),
                    s.dates[t].to_string(),
                    fmt_f(s.forecast[t]),
                    fmt_f(s.position[t]),
                    fmt_f(s.market[t]),
                ])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

pub fn load_prices(cfg: &ExperimentConfig) -> Result<PricePanel> {
    match &cfg.backtest.prices {
        Some(path) => read_prices_csv(std::fs::File::open(path)?),
        None => synth_prices_with(&cfg.backtest.synth),
    }
}

/// Positions for one test span: forecasts divided by 1.2 times the largest
/// absolute in-sample forecast, clipped to `[-1, 1]`. A forecaster that is
/// identically zero in-sample takes no positions.
fn positions(fc: &Forecast) -> Result<Vec<f64>> {
    let train_max = fc.train.iter().fold(0.0f64, |m, f| m.max(f.abs()));
    if train_max == 0.0 {
        return Ok(vec![0.0; fc.test.len()]);
    }
    scale_signal(&fc.test, train_max)
}

fn split_series(frame: &FeatureFrame, split: &RollingSplit, fc: &Forecast) -> Result<SignalSeries> {
    SignalSeries::new(
        frame.dates[split.test.clone()].to_vec(),
        fc.test.clone(),
        positions(fc)?,
        frame.target[split.test.clone()].to_vec(),
        1.0,
    )
}

/// Walk-forward backtest: each split is tuned, trained and forecast on its
/// own windows; the test spans are concatenated and scored once.
pub fn run_backtest(cfg: &ExperimentConfig) -> Result<BacktestOutput> {
    let b = &cfg.backtest;
    let panel = load_prices(cfg)?;
    let benchmark = b.benchmark.clone().unwrap_or_else(|| panel.names[0].clone());
    let frame = build_features(&panel, &b.windows, &benchmark)?;
    let mut splits = rolling_splits(frame.len(), &b.rolling)?;
    if let Some(m) = b.max_splits {
        splits.truncate(m);
    }
    let p = frame.features.cols();
    let mut space = cfg.search.clone();
    if space.k.is_empty() {
        space.k = (b.k_range[0]..=b.k_range[1]).filter(|&k| k <= p).collect();
    }
    if space.k.is_empty() {
        space.k = vec![p];
    }
    let default_k = cfg.hyper.k.unwrap_or(b.k_range[0]).min(p);

    let jobs: Vec<(usize, usize)> = (0..cfg.models.len())
        .flat_map(|m| (0..splits.len()).map(move |s| (m, s)))
        .collect();
    let forecasts: Vec<Result<Forecast>> = jobs
        .par_iter()
        .map(|&(m, si)| {
            let split = &splits[si];
            let train = frame.split(split.train.clone());
            let valid = frame.split(split.valid.clone());
            let test = frame.split(split.test.clone());
            let seed = run_seed(cfg.seed, si);
            forecast(
                &cfg.models[m],
                &train,
                &valid,
                &test,
                default_k,
                &space,
                cfg,
                seed,
                &format!("split{si}"),
            )
        })
        .collect();

    let mut rows = Vec::new();
    let mut signals = BTreeMap::new();
    let mut trials = Vec::new();
    let mut per_model: Vec<Vec<Result<Forecast>>> = (0..cfg.models.len()).map(|_| Vec::new()).collect();
    for ((m, _), fc) in jobs.iter().zip(forecasts) {
        per_model[*m].push(fc);
    }
    for (model, fcs) in cfg.models.iter().zip(per_model) {
        let series = fcs
            .into_iter()
            .zip(&splits)
            .try_fold(None::<SignalSeries>, |acc, (fc, split)| {
                let fc = fc?;
                trials.extend(fc.trials.iter().cloned());
                let s = split_series(&frame, split, &fc)?;
                Ok::<_, Error>(Some(match acc {
                    None => s,
                    Some(mut a) => {
                        a.extend(s)?;
                        a
                    }
                }))
            });
        let mut variants: Vec<(&str, Result<SignalSeries>)> = Vec::new();
        match series {
            Ok(Some(s)) => {
                if b.enhance {
                    variants.push(("enhanced", s.enhanced(&EnhanceConfig::default())));
                }
                variants.push(("raw", Ok(s.clone())));
                signals.insert(model.clone(), s);
            }
            Ok(None) => variants.push(("raw", Err(Error::Contract("no rolling splits".into())))),
            Err(e) => {
                let msg = e.to_string();
                variants.push(("raw", Err(Error::Numeric(msg.clone()))));
                if b.enhance {
                    variants.push(("enhanced", Err(Error::Numeric(msg))));
                }
            }
        }
        for (variant, s) in variants {
            let (report, error) = match s.and_then(|s| s.report(0.0)) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            rows.push(PortfolioRow {
                model: model.clone(),
                variant: variant.to_string(),
                report,
                error,
            });
        }
    }
    let mut results = ResultTable::Portfolio(rows);
    results.sort();
    Ok(BacktestOutput {
        results,
        signals,
        trials,
        n_splits: splits.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroSummary {
    pub model: String,
    pub mean_r2_oos: f64,
    pub se: f64,
    pub n: usize,
    pub n_failed: usize,
}

#[derive(Clone, Debug)]
pub struct MacroOutput {
    pub results: ResultTable,
    pub summary: Vec<MacroSummary>,
    pub trials: Vec<TrialRecord>,
}

impl MacroOutput {
    pub fn trials_csv(&self) -> Result<String> {
        trials_csv(&self.trials)
    }
}

/// Forecasts each target column from the others on random splits and
/// scores out-of-sample R² against the train mean.
pub fn run_macro(cfg: &ExperimentConfig) -> Result<MacroOutput> {
    let path = cfg
        .macro_task
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("macro.data is required".into()))?;
    let panel = read_macro_csv(std::fs::File::open(path)?)?;
    let targets = if cfg.macro_task.targets.is_empty() {
        panel.names.clone()
    } else {
        for t in &cfg.macro_task.targets {
            if !panel.names.contains(t) {
                return Err(Error::Config(format!(
                    "macro target '{t}' is not a column of {}",
                    path.display()
                )));
            }
        }
        cfg.macro_task.targets.clone()
    };
    let jobs: Vec<(&String, &String)> = targets
        .iter()
        .flat_map(|t| cfg.models.iter().map(move |m| (t, m)))
        .collect();
    let outputs: Vec<(Vec<MacroRow>, Vec<TrialRecord>)> = jobs
        .par_iter()
        .map(|&(target, model)| macro_task(cfg, &panel, target, model))
        .collect();
    let mut rows = Vec::new();
    let mut trials = Vec::new();
    for (r, t) in outputs {
        rows.extend(r);
        trials.extend(t);
    }
    let mut by_model: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for r in &rows {
        let e = by_model.entry(&r.model).or_default();
        match r.r2_oos {
            Some(v) if r.error.is_none() => e.0.push(v),
            _ => e.1 += 1,
        }
    }
    let summary = by_model
        .into_iter()
        .map(|(model, (v, n_failed))| {
            let (mean, se) = mean_se(&v);
            MacroSummary {
                model: model.to_string(),
                mean_r2_oos: mean,
                se,
                n: v.len(),
                n_failed,
            }
        })
        .collect();
    let mut results = ResultTable::Macro(rows);
    results.sort();
    Ok(MacroOutput {
        results,
        summary,
        trials,
    })
}

fn macro_task(
    cfg: &ExperimentConfig,
    panel: &crate::dataio::MacroPanel,
    target: &str,
    model: &str,
) -> (Vec<MacroRow>, Vec<TrialRecord>) {
    let mut trials = Vec::new();
    let mut hyper: std::result::Result<Hyper, String> = Ok(cfg.hyper.clone());
    if cfg.search.budget > 0 && !is_baseline(model) {
        hyper = macro_splits(panel, target, cfg.seed)
            .map_err(|e| e.to_string())
            .and_then(|b| {
                let s = standardize(&b.train, &b.valid, &b.test);
                let k = default_macro_k(cfg, s.train.x.cols());
                let tuned = tune_model(model, &s.train, &s.valid, k, &cfg.search, &cfg.train, cfg.seed, target);
                trials = tuned.trials;
                tuned.best.map(|(h, _)| h).map_err(|e| e.to_string())
            });
    }
    let rows = (0..cfg.n_seeds)
        .map(|i| {
            let seed = run_seed(cfg.seed, i);
            let res = hyper
                .clone()
                .and_then(|h| macro_run(cfg, panel, target, model, &h, seed).map_err(|e| e.to_string()));
            let (r2, test_mse, error) = match res {
                Ok((r2, m)) => (Some(r2), Some(m), None),
                Err(e) => (None, None, Some(e)),
            };
            MacroRow {
                target: target.to_string(),
                model: model.to_string(),
                seed,
                r2_oos: r2,
                test_mse,
                error,
            }
        })
        .collect();
    (rows, trials)
}

/// Factor dimension for macro tasks when none is configured.
const MACRO_DEFAULT_K: usize = 5;

fn default_macro_k(cfg: &ExperimentConfig, p: usize) -> usize {
    cfg.hyper.k.unwrap_or(MACRO_DEFAULT_K).min(p).max(1)
}

fn macro_run(
    cfg: &ExperimentConfig,
    panel: &crate::dataio::MacroPanel,
    target: &str,
    model: &str,
    hyper: &Hyper,
    seed: u64,
) -> Result<(f64, f64)> {
    let b = macro_splits(panel, target, seed)?;
    let s = standardize(&b.train, &b.valid, &b.test);
    let k = default_macro_k(cfg, s.train.x.cols());
    let mut fitted = fit_model(model, &s.train, &s.valid, hyper, k, &cfg.train, seed)?;
    let pred: Vec<f64> = fitted
        .predict(&s.test)?
        .into_iter()
        .map(|f| f * s.y_sd + s.y_mean)
        .collect();
    let train_mean = b.train.y.iter().sum::<f64>() / b.train.len() as f64;
    Ok((r2_oos(&pred, &b.test.y, train_mean)?, mse(&pred, &b.test.y)))
}
