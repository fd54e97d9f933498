//! Experiment configuration, parsed from JSON with unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::architectures::PRESETS;
use crate::datagen::{PriceSynth, SimSpec};
use crate::dataio::{RollingConfig, DEFAULT_WINDOWS};
use crate::error::{Error, Result};
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Simulate,
    Benchmark,
    Sweep,
    Tune,
    Backtest,
    Macro,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Simulate => "simulate",
            Task::Benchmark => "benchmark",
            Task::Sweep => "sweep",
            Task::Tune => "tune",
            Task::Backtest => "backtest",
            Task::Macro => "macro",
        }
    }
}

/// Linear baselines fitted by validation selection rather than search.
pub const BASELINES: [&str; 2] = ["lasso", "pcr"];
/// Reference signals available to the backtest only.
pub const REFERENCE_SIGNALS: [&str; 2] = ["perfect_foresight", "zero"];

/// One point of the hyperparameter space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub lr: f64,
    pub width: usize,
    pub depth: usize,
    pub batch_size: usize,
    /// Factor dimension; `None` uses the task default.
    pub k: Option<usize>,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            width: 32,
            depth: 2,
            batch_size: 64,
            k: None,
        }
    }
}

/// Ranges for seeded random search. `budget = 0` disables tuning and uses
/// the fixed `hyper` block instead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub budget: usize,
    /// Bounds of the log-uniform learning-rate draw.
    pub lr: [f64; 2],
    pub width: Vec<usize>,
    pub depth: Vec<usize>,
    pub batch_size: Vec<usize>,
    /// Candidate factor dimensions; empty means the task default only.
    pub k: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            budget: 40,
            lr: [1e-4, 1e-2],
            width: vec![16, 32, 64],
            depth: vec![2, 3],
            batch_size: vec![32, 64, 128],
            k: Vec::new(),
        }
    }
}

impl SearchSpace {
    fn validate(&self) -> Result<()> {
        let [lo, hi] = self.lr;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return config_err(format!("search.lr must satisfy 0 < lo <= hi, got [{lo}, {hi}]"));
        }
        for (name, v) in [
            ("width", &self.width),
            ("depth", &self.depth),
            ("batch_size", &self.batch_size),
        ] {
            if v.is_empty() || v.contains(&0) {
                return config_err(format!("search.{name} must be a non-empty list of positive values"));
            }
        }
        if self.k.contains(&0) {
            return config_err("search.k values must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    /// Price CSV; when absent a synthetic panel is generated from `synth`.
    pub prices: Option<PathBuf>,
    pub synth: PriceSynth,
    /// Asset whose next-day return is forecast; defaults to the first column.
    pub benchmark: Option<String>,
    pub windows: Vec<usize>,
    pub rolling: RollingConfig,
    /// Use at most this many rolling splits (the earliest ones).
    pub max_splits: Option<usize>,
    /// Also report vol-targeted, smoothed positions.
    pub enhance: bool,
    /// Candidate factor dimensions when tuning.
    pub k_range: [usize; 2],
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            prices: None,
            synth: PriceSynth::default(),
            benchmark: None,
            windows: DEFAULT_WINDOWS.to_vec(),
            rolling: RollingConfig::default(),
            max_splits: None,
            enhance: true,
            k_range: [11, 22],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MacroConfig {
    pub data: Option<PathBuf>,
    /// Columns to forecast; empty means every column.
    pub targets: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Optional; when present it must agree with the command being run.
    pub task: Option<Task>,
    pub seed: u64,
    pub sim: SimSpec,
    /// Input dimensions for `sweep`.
    pub sweep_p: Vec<usize>,
    pub models: Vec<String>,
    pub n_seeds: usize,
    pub train: TrainConfig,
    pub hyper: Hyper,
    pub search: SearchSpace,
    pub backtest: BacktestConfig,
    #[serde(rename = "macro")]
    pub macro_task: MacroConfig,
    /// Write per-model checkpoints and training plots.
    pub checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: None,
            seed: 0,
            sim: SimSpec::default(),
            sweep_p: vec![500, 1000, 2000],
            models: vec!["vanillaNN".into(), "SPCA_NN_SPCA_ADD".into()],
            n_seeds: 20,
            train: TrainConfig::default(),
            hyper: Hyper::default(),
            search: SearchSpace::default(),
            backtest: BacktestConfig::default(),
            macro_task: MacroConfig::default(),
            checkpoints: true,
        }
    }
}

fn config_err<T>(msg: String) -> Result<T> {
    Err(Error::Config(msg))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.backtest.prices, &mut cfg.macro_task.data]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Checks the configuration for `task` before any work starts.
    pub fn validate(&self, task: Task) -> Result<()> {
        if let Some(t) = self.task {
            if t != task {
                return config_err(format!(
                    "config is for '{}' but '{}' was requested",
                    t.name(),
                    task.name()
                ));
            }
        }
        let wrap = |r: Result<()>| r.map_err(|e| Error::Config(e.to_string()));
        wrap(self.train.validate())?;
        self.search.validate()?;
        if task != Task::Simulate {
            if self.models.is_empty() {
                return config_err("models must not be empty".into());
            }
            for m in &self.models {
                let known = PRESETS.contains(&m.as_str())
                    || BASELINES.contains(&m.as_str())
                    || (task == Task::Backtest && REFERENCE_SIGNALS.contains(&m.as_str()));
                if !known {
                    return config_err(format!("unknown model '{m}' for task '{}'", task.name()));
                }
            }
            let mut sorted = self.models.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != self.models.len() {
                return config_err("models must not repeat".into());
            }
        }
        if self.hyper.lr <= 0.0 || self.hyper.width == 0 || self.hyper.depth == 0 || self.hyper.batch_size == 0 {
            return config_err("hyper values must be positive".into());
        }
        match task {
            Task::Simulate | Task::Benchmark | Task::Tune | Task::Sweep => {
                wrap(self.sim.validate())?;
                if task == Task::Tune && self.search.budget == 0 {
                    return config_err("tune needs search.budget >= 1".into());
                }
                if matches!(task, Task::Benchmark | Task::Sweep) && self.n_seeds == 0 {
                    return config_err("n_seeds must be at least 1".into());
                }
                if task == Task::Sweep {
                    if self.sweep_p.is_empty() {
                        return config_err("sweep_p must not be empty".into());
                    }
                    for &p in &self.sweep_p {
                        wrap(SimSpec { p, ..self.sim.clone() }.validate())?;
                    }
                }
                if self.models.iter().any(|m| m == "oracleNN") && self.sim.k < 3 {
                    return config_err("oracleNN needs k >= 3".into());
                }
            }
            Task::Backtest => {
                let b = &self.backtest;
                if b.windows.is_empty() || b.windows.contains(&0) {
                    return config_err("backtest.windows must be positive".into());
                }
                let [lo, hi] = b.k_range;
                if lo == 0 || lo > hi {
                    return config_err(format!("backtest.k_range must satisfy 1 <= lo <= hi, got [{lo}, {hi}]"));
                }
                if b.max_splits == Some(0) {
                    return config_err("backtest.max_splits must be positive".into());
                }
            }
            Task::Macro => {
                if self.macro_task.data.is_none() {
                    return config_err("macro.data is required".into());
                }
                if self.n_seeds == 0 {
                    return config_err("n_seeds must be at least 1".into());
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"modles": []}"#),
            Err(Error::Config(_))
        ));
        assert!(ExperimentConfig::from_json(r#"{"train": {"lr": 0.01, "momentum": 0.9}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"sim": {"p": 100}}"#).is_ok());
    }

    #[test]
    fn task_mismatch() {
        let cfg = ExperimentConfig::from_json(r#"{"task": "sweep"}"#).unwrap();
        assert!(cfg.validate(Task::Sweep).is_ok());
        assert!(matches!(cfg.validate(Task::Benchmark), Err(Error::Config(_))));
    }

    #[test]
    fn reference_signals_only_in_backtest() {
        let cfg = ExperimentConfig::from_json(r#"{"models": ["zero"]}"#).unwrap();
        assert!(cfg.validate(Task::Backtest).is_ok());
        assert!(cfg.validate(Task::Benchmark).is_err());
    }
}
