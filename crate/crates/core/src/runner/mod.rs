//! Experiment orchestration: hyperparameter search, simulation benchmarks,
//! dimension sweeps, rolling backtests and macro regressions, with their
//! on-disk outputs.

mod config;
mod market;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use config::{
    BacktestConfig, ExperimentConfig, Hyper, MacroConfig, SearchSpace, Task, BASELINES, REFERENCE_SIGNALS,
};
pub use market::{run_backtest, run_macro, BacktestOutput, MacroOutput};

use crate::architectures::build_preset;
use crate::baselines::{lasso_select, pcr_select, LassoModel, PcrModel, Selected};
use crate::datagen::{export_csv, generate, DatasetBundle, SimSpec, Split};
use crate::error::{Error, Result};
use crate::reporting::{
    emit_plot, emit_table, fmt_f, summarize, Layout, ModelSummary, PlotOptions, ResultTable, SimRow, Trace,
};
use crate::training::{mse, train, Checkpoint, TrainConfig, TrainOutcome};

/// Coordinate-descent limits used when a baseline is fitted by the runner.
const LASSO_MAX_SWEEPS: usize = 1000;
const LASSO_TOL: f64 = 1e-6;

/// A model fitted on a train/validation pair.
pub enum Fitted {
    Net(Box<TrainOutcome>),
    Lasso(Selected<LassoModel>),
    Pcr(Selected<PcrModel>),
}

impl Fitted {
    pub fn valid_mse(&self) -> f64 {
        match self {
            Fitted::Net(o) => o.best_valid_mse,
            Fitted::Lasso(s) => s.valid_mse,
            Fitted::Pcr(s) => s.valid_mse,
        }
    }

    pub fn predict(&mut self, split: &Split) -> Result<Vec<f64>> {
        match self {
            Fitted::Net(o) => o.network.predict(&split.x, split.z.as_ref()),
            Fitted::Lasso(s) => s.model.predict(&split.x),
            Fitted::Pcr(s) => s.model.predict(&split.x),
        }
    }

    pub fn checkpoint(&self) -> Option<Checkpoint> {
        match self {
            Fitted::Net(o) => Some(Checkpoint::new(o)),
            _ => None,
        }
    }
}

pub fn is_baseline(model: &str) -> bool {
    BASELINES.contains(&model)
}

/// Fits `model` on `train`, selecting by `valid`. Networks use `hyper`;
/// baselines pick their own regularization on the validation split.
pub fn fit_model(
    model: &str,
    train_split: &Split,
    valid: &Split,
    hyper: &Hyper,
    default_k: usize,
    base: &TrainConfig,
    seed: u64,
) -> Result<Fitted> {
    match model {
        "lasso" => lasso_select(train_split, valid, LASSO_MAX_SWEEPS, LASSO_TOL).map(Fitted::Lasso),
        "pcr" => pcr_select(train_split, valid).map(Fitted::Pcr),
        _ => {
            let p = train_split.x.cols();
            let k = match (model, &train_split.z) {
                ("oracleNN", Some(z)) => z.cols(),
                _ => hyper.k.unwrap_or(default_k).min(p),
            };
            let spec = build_preset(model, p, k, hyper.width, hyper.depth, &base.preset_options())?;
            let cfg = TrainConfig {
                lr: hyper.lr,
                batch_size: hyper.batch_size,
                seed,
                ..base.clone()
            };
            train(&spec, train_split, valid, &cfg).map(|o| Fitted::Net(Box::new(o)))
        }
    }
}

/// Draws `budget` configurations: log-uniform learning rate, uniform
/// choices elsewhere. The sequence depends only on `seed`.
pub fn sample_trials(space: &SearchSpace, budget: usize, seed: u64) -> Vec<Hyper> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7E57_5EA2C4);
    let (lo, hi) = (space.lr[0].ln(), space.lr[1].ln());
    (0..budget)
        .map(|_| {
            let lr = if hi > lo {
                rng.random_range(lo..hi).exp()
            } else {
                space.lr[0]
            };
            Hyper {
                lr,
                width: *space.width.choose(&mut rng).expect("validated non-empty"),
                depth: *space.depth.choose(&mut rng).expect("validated non-empty"),
                batch_size: *space.batch_size.choose(&mut rng).expect("validated non-empty"),
                k: space.k.choose(&mut rng).copied(),
            }
        })
        .collect()
}

/// One evaluated hyperparameter configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub context: String,
    pub model: String,
    pub trial: usize,
    pub hyper: Hyper,
    pub valid_mse: Option<f64>,
    pub error: Option<String>,
}

pub fn trials_csv(trials: &[TrialRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "context",
        "model",
        "trial",
        "lr",
        "width",
        "depth",
        "batch_size",
        "k",
        "valid_mse",
        "error",
    ])?;
    for t in trials {
        w.write_record([
            t.context.clone(),
            t.model.clone(),
            t.trial.to_string(),
            fmt_f(t.hyper.lr),
            t.hyper.width.to_string(),
            t.hyper.depth.to_string(),
            t.hyper.batch_size.to_string(),
            t.hyper.k.map(|k| k.to_string()).unwrap_or_default(),
            t.valid_mse.map(fmt_f).unwrap_or_default(),
            t.error.clone().unwrap_or_default(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Result of a search: the winning configuration and every trial.
pub struct Tuned {
    pub best: Result<(Hyper, f64)>,
    pub trials: Vec<TrialRecord>,
}

/// Random search for one model on one train/validation pair. Trials run on
/// the current thread pool; trial `i` trains with seed `seed + i`.
#[allow(clippy::too_many_arguments)]
pub fn tune_model(
    model: &str,
    train_split: &Split,
    valid: &Split,
    default_k: usize,
    space: &SearchSpace,
    base: &TrainConfig,
    seed: u64,
    context: &str,
) -> Tuned {
    let candidates = sample_trials(space, space.budget.max(1), seed);
    let trials: Vec<TrialRecord> = candidates
        .into_par_iter()
        .enumerate()
        .map(|(i, hyper)| {
            let res = fit_model(
                model,
                train_split,
                valid,
                &hyper,
                default_k,
                base,
                seed.wrapping_add(i as u64),
            );
            let (valid_mse, error) = match res {
                Ok(f) => (Some(f.valid_mse()), None),
                Err(e) => (None, Some(e.to_string())),
            };
            TrialRecord {
                context: context.to_string(),
                model: model.to_string(),
                trial: i,
                hyper,
                valid_mse,
                error,
            }
        })
        .collect();
    let best = trials
        .iter()
        .filter_map(|t| t.valid_mse.map(|v| (t, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.trial.cmp(&b.0.trial)))
        .map(|(t, v)| (t.hyper.clone(), v))
        .ok_or_else(|| {
            let reasons: Vec<String> = trials
                .iter()
                .map(|t| format!("trial {}: {}", t.trial, t.error.as_deref().unwrap_or("?")))
                .collect();
            Error::Numeric(format!(
                "all {} trials of {model} failed: {}",
                trials.len(),
                reasons.join("; ")
            ))
        });
    Tuned { best, trials }
}

/// Per-model hyperparameters, or the reason tuning failed.
pub type HyperTable = BTreeMap<String, std::result::Result<Hyper, String>>;

/// Tunes every network model on the dataset drawn with the base seed.
/// Baselines select their own regularization and are not searched.
pub fn tune_sim(cfg: &ExperimentConfig) -> Result<(HyperTable, Vec<TrialRecord>, BTreeMap<String, f64>)> {
    let mut table = HyperTable::new();
    let mut trials = Vec::new();
    let mut scores = BTreeMap::new();
    let needs_search = cfg.search.budget > 0 && cfg.models.iter().any(|m| !is_baseline(m));
    let data = if needs_search {
        Some(generate(&SimSpec {
            seed: cfg.seed,
            ..cfg.sim.clone()
        })?)
    } else {
        None
    };
    for model in &cfg.models {
        if is_baseline(model) {
            continue;
        }
        let Some(data) = &data else {
            table.insert(model.clone(), Ok(cfg.hyper.clone()));
            continue;
        };
        let context = format!("p{}", cfg.sim.p);
        let tuned = tune_model(
            model,
            &data.train,
            &data.valid,
            cfg.sim.k,
            &cfg.search,
            &cfg.train,
            cfg.seed,
            &context,
        );
        trials.extend(tuned.trials);
        match tuned.best {
            Ok((h, v)) => {
                scores.insert(model.clone(), v);
                table.insert(model.clone(), Ok(h));
            }
            Err(e) => {
                table.insert(model.clone(), Err(e.to_string()));
            }
        }
    }
    Ok((table, trials, scores))
}

/// Dataset seed of the `i`-th evaluation run; the base seed is reserved for tuning.
pub fn run_seed(base: u64, i: usize) -> u64 {
    base.wrapping_add(1 + i as u64)
}

/// Output of a simulation benchmark or sweep.
pub struct SimOutput {
    pub results: ResultTable,
    pub summary: Vec<ModelSummary>,
    pub hyper: HyperTable,
    pub trials: Vec<TrialRecord>,
    /// Lowest-validation checkpoint per `(model, p)`.
    pub checkpoints: BTreeMap<(String, usize), Checkpoint>,
}

/// Trains every model on `n_seeds` fresh datasets at each `p`, using
/// hyperparameters tuned once at the configured base dimension.
pub fn run_simulation(cfg: &ExperimentConfig, ps: &[usize]) -> Result<SimOutput> {
    let (hyper, trials, _) = tune_sim(cfg)?;
    let jobs: Vec<(usize, usize)> = ps.iter().flat_map(|&p| (0..cfg.n_seeds).map(move |i| (p, i))).collect();
    let outputs: Vec<Vec<(SimRow, Option<(f64, Checkpoint)>)>> = jobs
        .into_par_iter()
        .map(|(p, i)| {
            let seed = run_seed(cfg.seed, i);
            let spec = SimSpec {
                p,
                seed,
                ..cfg.sim.clone()
            };
            let data = generate(&spec);
            cfg.models
                .iter()
                .map(|model| {
                    let mut row = SimRow {
                        obs_id: spec.obs_id,
                        target_id: spec.target_id,
                        p,
                        model: model.clone(),
                        seed,
                        test_mse: None,
                        valid_mse: None,
                        error: None,
                    };
                    let res = data.as_ref().map_err(Error::to_string).and_then(|data| {
                        let h = match hyper.get(model) {
                            Some(Ok(h)) => h.clone(),
                            Some(Err(e)) => return Err(format!("tuning failed: {e}")),
                            None => cfg.hyper.clone(),
                        };
                        evaluate(model, data, &h, cfg, seed).map_err(|e| e.to_string())
                    });
                    match res {
                        Ok((test, valid, ckpt)) => {
                            row.test_mse = Some(test);
                            row.valid_mse = Some(valid);
                            (row, ckpt.map(|c| (valid, c)))
                        }
                        Err(e) => {
                            row.error = Some(e);
                            (row, None)
                        }
                    }
                })
                .collect()
        })
        .collect();

    let mut rows = Vec::new();
    let mut checkpoints: BTreeMap<(String, usize), (f64, u64, Checkpoint)> = BTreeMap::new();
    for (row, ckpt) in outputs.into_iter().flatten() {
        if let Some((v, c)) = ckpt {
            let key = (row.model.clone(), row.p);
            let better = checkpoints
                .get(&key)
                .is_none_or(|(bv, bs, _)| (v, row.seed) < (*bv, *bs));
            if better && cfg.checkpoints {
                checkpoints.insert(key, (v, row.seed, c));
            }
        }
        rows.push(row);
    }
    let mut results = ResultTable::Simulation(rows);
    results.sort();
    let summary = match &results {
        ResultTable::Simulation(r) => summarize(r),
        _ => unreachable!(),
    };
    Ok(SimOutput {
        results,
        summary,
        hyper,
        trials,
        checkpoints: checkpoints.into_iter().map(|(k, (_, _, c))| (k, c)).collect(),
    })
}

fn evaluate(
    model: &str,
    data: &DatasetBundle,
    hyper: &Hyper,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(f64, f64, Option<Checkpoint>)> {
    let mut fitted = fit_model(model, &data.train, &data.valid, hyper, cfg.sim.k, &cfg.train, seed)?;
    let pred = fitted.predict(&data.test)?;
    let test = mse(&pred, &data.test.y);
    if !test.is_finite() {
        return Err(Error::Numeric(format!("{model}: non-finite test MSE")));
    }
    Ok((test, fitted.valid_mse(), fitted.checkpoint()))
}

/// Summary of a completed task.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub n_rows: usize,
    pub n_failed: usize,
    pub files: Vec<PathBuf>,
}

struct Outputs {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, contents)?;
        self.files.push(path);
        Ok(())
    }

    fn json(&mut self, name: &str, value: &serde_json::Value) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
        text.push('\n');
        self.write(name, text)
    }

    fn plot(&mut self, name: &str, traces: &[Trace], opts: &PlotOptions) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::create_dir_all(path.parent().expect("plot path has a parent"))?;
        let sidecar = emit_plot(traces, &path, opts)?;
        self.files.push(path);
        self.files.push(sidecar);
        Ok(())
    }
}

fn metadata(task: Task) -> serde_json::Value {
    json!({
        "task": task.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "timestamp": chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
    })
}

fn hyper_json(table: &HyperTable) -> serde_json::Value {
    table
        .iter()
        .map(|(m, h)| {
            let v = match h {
                Ok(h) => serde_json::to_value(h).expect("hyper serializes"),
                Err(e) => json!({ "error": e }),
            };
            (m.clone(), v)
        })
        .collect::<serde_json::Map<_, _>>()
        .into()
}

/// Loss and explained-variance traces of a trained network.
pub fn training_traces(ckpt: &Checkpoint) -> Result<(Vec<Trace>, Vec<Trace>)> {
    let epochs: Vec<f64> = ckpt.train_log.epochs.iter().map(|e| e.epoch as f64).collect();
    let mut loss = Vec::new();
    if !epochs.is_empty() {
        loss.push(Trace::new(
            "train",
            epochs.clone(),
            ckpt.train_log.epochs.iter().map(|e| e.train_mse).collect(),
        )?);
        loss.push(Trace::new("valid", epochs, ckpt.train_log.valid_curve())?);
    }
    let mut by_layer: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in &ckpt.train_log.recomputes {
        by_layer.entry(r.layer).or_default().push(r.explained_variance);
    }
    let ev = by_layer
        .into_iter()
        .map(|(layer, v)| {
            Trace::new(
                format!("pca layer {layer}"),
                (1..=v.len()).map(|i| i as f64).collect(),
                v,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((loss, ev))
}

fn write_checkpoint(out: &mut Outputs, stem: &str, ckpt: &Checkpoint) -> Result<()> {
    out.write(&format!("checkpoints/{stem}.json"), ckpt.to_json()?)?;
    let (loss, ev) = training_traces(ckpt)?;
    let positive = loss.iter().all(|t| t.y.iter().all(|&v| v > 0.0));
    if !loss.is_empty() {
        let opts = PlotOptions {
            title: format!("{stem}: training and validation MSE"),
            x_label: "epoch".into(),
            y_label: "MSE".into(),
            log_y: positive,
        };
        out.plot(&format!("plots/{stem}_loss.svg"), &loss, &opts)?;
    }
    if !ev.is_empty() {
        let opts = PlotOptions {
            title: format!("{stem}: explained variance at recomputes"),
            x_label: "recompute".into(),
            y_label: "explained variance".into(),
            log_y: false,
        };
        out.plot(&format!("plots/{stem}_ev.svg"), &ev, &opts)?;
    }
    Ok(())
}

/// Runs `task` and writes its outputs under `out_dir`. `jobs` sets the
/// worker count; results do not depend on it.
pub fn run(task: Task, cfg: &ExperimentConfig, out_dir: &Path, jobs: usize) -> Result<RunReport> {
    cfg.validate(task)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| run_inner(task, cfg, out_dir))
}

fn run_inner(task: Task, cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunReport> {
    let mut out = Outputs::new(out_dir)?;
    let (n_rows, n_failed) = match task {
        Task::Simulate => {
            let spec = SimSpec {
                seed: cfg.seed,
                ..cfg.sim.clone()
            };
            let data = generate(&spec)?;
            export_csv(&data, out_dir, "sim")?;
            for split in ["train", "valid", "test"] {
                out.files.push(out_dir.join(format!("sim_{split}.csv")));
                out.files.push(out_dir.join(format!("sim_{split}_z.csv")));
            }
            out.json(
                "summary.json",
                &json!({
                    "sim": spec,
                    "factor_functions": data.f_choices,
                    "rows": { "train": data.train.len(), "valid": data.valid.len(), "test": data.test.len() },
                    "metadata": metadata(task),
                }),
            )?;
            (0, 0)
        }
        Task::Tune => {
            let (hyper, trials, scores) = tune_sim(cfg)?;
            out.write("trials.csv", trials_csv(&trials)?)?;
            let failed = hyper.values().filter(|h| h.is_err()).count();
            out.json(
                "summary.json",
                &json!({
                    "best": hyper_json(&hyper),
                    "best_valid_mse": scores,
                    "n_trials": trials.len(),
                    "n_failed": failed,
                    "metadata": metadata(task),
                }),
            )?;
            (trials.len(), failed)
        }
        Task::Benchmark | Task::Sweep => {
            let ps = if task == Task::Sweep {
                cfg.sweep_p.clone()
            } else {
                vec![cfg.sim.p]
            };
            let res = run_simulation(cfg, &ps)?;
            out.write("results.csv", res.results.to_csv()?)?;
            out.write("trials.csv", trials_csv(&res.trials)?)?;
            out.write("table3.csv", emit_table(&res.results, Layout::Table3)?)?;
            let ranked = !res.summary.iter().all(|s| s.n == 0);
            if ranked {
                out.write("rank.csv", emit_table(&res.results, Layout::Rank)?)?;
            }
            if task == Task::Sweep {
                write_sweep_plot(&mut out, &res.summary)?;
            }
            for ((model, p), ckpt) in &res.checkpoints {
                write_checkpoint(&mut out, &format!("{model}_p{p}"), ckpt)?;
            }
            let n_failed = res.results.n_failed();
            out.json(
                "summary.json",
                &json!({
                    "models": res.summary,
                    "hyperparameters": hyper_json(&res.hyper),
                    "n_rows": res.results.len(),
                    "n_failed": n_failed,
                    "metadata": metadata(task),
                }),
            )?;
            (res.results.len(), n_failed)
        }
        Task::Backtest => {
            let res = run_backtest(cfg)?;
            out.write("results.csv", res.results.to_csv()?)?;
            out.write("table4.csv", emit_table(&res.results, Layout::Table4)?)?;
            out.write("signals.csv", res.signals_csv()?)?;
            out.write("trials.csv", trials_csv(&res.trials)?)?;
            let n_failed = res.results.n_failed();
            out.json(
                "summary.json",
                &json!({
                    "reports": res.results,
                    "n_splits": res.n_splits,
                    "n_failed": n_failed,
                    "metadata": metadata(task),
                }),
            )?;
            (res.results.len(), n_failed)
        }
        Task::Macro => {
            let res = run_macro(cfg)?;
            out.write("results.csv", res.results.to_csv()?)?;
            out.write("trials.csv", trials_csv(&res.trials)?)?;
            if res.results.len() > res.results.n_failed() {
                out.write("rank.csv", emit_table(&res.results, Layout::Rank)?)?;
            }
            let n_failed = res.results.n_failed();
            out.json(
                "summary.json",
                &json!({
                    "models": res.summary,
                    "n_rows": res.results.len(),
                    "n_failed": n_failed,
                    "metadata": metadata(task),
                }),
            )?;
            (res.results.len(), n_failed)
        }
    };
    Ok(RunReport {
        n_rows,
        n_failed,
        files: out.files,
    })
}

fn write_sweep_plot(out: &mut Outputs, summary: &[ModelSummary]) -> Result<()> {
    let mut by_model: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for s in summary.iter().filter(|s| s.n > 0) {
        by_model.entry(&s.model).or_default().push((s.p as f64, s.mean));
    }
    let traces = by_model
        .into_iter()
        .map(|(m, mut pts)| {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            Trace::new(m, pts.iter().map(|p| p.0).collect(), pts.iter().map(|p| p.1).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    if traces.is_empty() {
        return Ok(());
    }
    let opts = PlotOptions {
        title: "test MSE by input dimension".into(),
        x_label: "p".into(),
        y_label: "mean test MSE".into(),
        log_y: traces.iter().all(|t| t.y.iter().all(|&v| v > 0.0)),
    };
    out.plot("plots/sweep.svg", &traces, &opts)
}
