//! Simulated factor-model regression data and synthetic price panels.

use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::dataio::PricePanel;
use crate::error::{contract, Error, Result};

/// Scale of the additive target noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseScale {
    Variance(f64),
    StdDev(f64),
}

impl NoiseScale {
    pub fn std_dev(self) -> f64 {
        match self {
            NoiseScale::Variance(v) => v.sqrt(),
            NoiseScale::StdDev(s) => s,
        }
    }
}

impl Default for NoiseScale {
    fn default() -> Self {
        NoiseScale::Variance(0.3)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSpec {
    /// 1: `X = Z B + u`; 2: `X = exp(Z) B + u`.
    pub obs_id: u8,
    pub target_id: u8,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub p: usize,
    pub k: usize,
    pub noise: NoiseScale,
    pub seed: u64,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            obs_id: 1,
            target_id: 1,
            n_train: 500,
            n_valid: 150,
            n_test: 10_000,
            p: 500,
            k: 5,
            noise: NoiseScale::default(),
            seed: 0,
        }
    }
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        contract!(
            matches!(self.obs_id, 1 | 2),
            "obs_id must be 1 or 2, got {}",
            self.obs_id
        );
        contract!(
            self.target_id == 1,
            "only target_id 1 is available, got {}",
            self.target_id
        );
        contract!(
            self.n_train >= 1 && self.n_valid >= 1 && self.n_test >= 1,
            "every split needs at least one row"
        );
        contract!(self.k >= 3, "the target uses three factors, so k must be at least 3");
        contract!(self.p >= self.k, "p ({}) must be at least k ({})", self.p, self.k);
        let sd = self.noise.std_dev();
        contract!(
            sd.is_finite() && sd >= 0.0,
            "noise scale must be finite and non-negative"
        );
        Ok(())
    }
}

/// Component functions of the additive target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorFn {
    /// `cos(πx)`
    Cos,
    /// `sin(x)`
    Sin,
    /// `(1 − |x|)²`
    OneMinusAbsSquared,
    /// `1 / (1 + e^{−x})`
    Sigmoid,
    /// `2√|x| − 1`
    SqrtAbs,
    /// `x²`
    Square,
}

impl FactorFn {
    pub const ALL: [FactorFn; 6] = [
        FactorFn::Cos,
        FactorFn::Sin,
        FactorFn::OneMinusAbsSquared,
        FactorFn::Sigmoid,
        FactorFn::SqrtAbs,
        FactorFn::Square,
    ];

    pub fn eval(self, x: f64) -> f64 {
        match self {
            FactorFn::Cos => (std::f64::consts::PI * x).cos(),
            FactorFn::Sin => x.sin(),
            FactorFn::OneMinusAbsSquared => (1.0 - x.abs()).powi(2),
            FactorFn::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            FactorFn::SqrtAbs => 2.0 * x.abs().sqrt() - 1.0,
            FactorFn::Square => x * x,
        }
    }
}

/// One split of a regression dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub x: Matrix,
    pub y: Vec<f64>,
    /// Latent factors, when known.
    pub z: Option<Matrix>,
}

impl Split {
    pub fn new(x: Matrix, y: Vec<f64>, z: Option<Matrix>) -> Result<Self> {
        contract!(x.rows() == y.len(), "X has {} rows but y has {}", x.rows(), y.len());
        if let Some(z) = &z {
            contract!(z.rows() == y.len(), "Z has {} rows but y has {}", z.rows(), y.len());
        }
        Ok(Self { x, y, z })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Split {
        Split {
            x: self.x.select_rows(rows),
            y: rows.iter().map(|&r| self.y[r]).collect(),
            z: self.z.as_ref().map(|z| z.select_rows(rows)),
        }
    }

    pub fn range(&self, start: usize, end: usize) -> Split {
        Split {
            x: self.x.row_range(start, end),
            y: self.y[start..end].to_vec(),
            z: self.z.as_ref().map(|z| z.row_range(start, end)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub train: Split,
    pub valid: Split,
    pub test: Split,
    pub f_choices: Vec<FactorFn>,
    /// `k x p` loadings, when the data is simulated.
    pub loadings: Option<Matrix>,
}

/// Draws a dataset. Component functions are drawn from the same seed.
pub fn generate(spec: &SimSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let fns: Vec<FactorFn> = (0..3)
        .map(|_| FactorFn::ALL[rng.random_range(0..FactorFn::ALL.len())])
        .collect();
    generate_inner(spec, fns, rng)
}

/// Like [`generate`] with the component functions fixed by the caller.
pub fn generate_with(spec: &SimSpec, fns: [FactorFn; 3]) -> Result<DatasetBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Keep the stream aligned with `generate`.
    for _ in 0..3 {
        let _: usize = rng.random_range(0..FactorFn::ALL.len());
    }
    generate_inner(spec, fns.to_vec(), rng)
}

fn generate_inner(spec: &SimSpec, fns: Vec<FactorFn>, mut rng: ChaCha8Rng) -> Result<DatasetBundle> {
    let root3 = 3f64.sqrt();
    let loadings = Matrix::from_fn(spec.k, spec.p, |_, _| rng.random_range(-root3..=root3));
    let noise = Normal::new(0.0, spec.noise.std_dev()).map_err(|e| Error::Contract(e.to_string()))?;
    let mut split = |n: usize, noisy: bool| -> Result<Split> {
        let z = Matrix::from_fn(n, spec.k, |_, _| rng.random_range(-1.0..=1.0));
        let g = if spec.obs_id == 2 { z.map(f64::exp) } else { z.clone() };
        let mut x = g.matmul(&loadings)?;
        for v in x.data_mut() {
            *v += rng.random_range(-1.0..=1.0);
        }
        let y = (0..n)
            .map(|i| {
                let signal: f64 = fns.iter().enumerate().map(|(j, f)| f.eval(z.get(i, j))).sum();
                if noisy {
                    signal + noise.sample(&mut rng)
                } else {
                    signal
                }
            })
            .collect();
        Split::new(x, y, Some(z))
    };
    let train = split(spec.n_train, true)?;
    let valid = split(spec.n_valid, true)?;
    let test = split(spec.n_test, false)?;
    Ok(DatasetBundle {
        train,
        valid,
        test,
        f_choices: fns,
        loadings: Some(loadings),
    })
}

/// Writes `<prefix>_<split>.csv` (features then `y`) and
/// `<prefix>_<split>_z.csv` (latent factors) for each split.
pub fn export_csv(bundle: &DatasetBundle, dir: &Path, prefix: &str) -> Result<()> {
    for (name, split) in [
        ("train", &bundle.train),
        ("valid", &bundle.valid),
        ("test", &bundle.test),
    ] {
        let mut w = csv::Writer::from_path(dir.join(format!("{prefix}_{name}.csv")))?;
        let mut header: Vec<String> = (1..=split.x.cols()).map(|j| format!("x{j}")).collect();
        header.push("y".into());
        w.write_record(&header)?;
        for (r, y) in split.y.iter().enumerate() {
            let mut rec: Vec<String> = split.x.row_slice(r).iter().map(f64::to_string).collect();
            rec.push(y.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        if let Some(z) = &split.z {
            let mut w = csv::Writer::from_path(dir.join(format!("{prefix}_{name}_z.csv")))?;
            w.write_record((1..=z.cols()).map(|j| format!("z{j}")))?;
            for r in 0..z.rows() {
                w.write_record(z.row_slice(r).iter().map(f64::to_string))?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

/// Parameters of the synthetic price generator. Daily log returns are
/// `drift + loading · factor_vol · f_t + idio_vol · e_t` with standard
/// normal `f_t` shared across assets and independent `e_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriceSynth {
    pub n_days: usize,
    pub n_assets: usize,
    pub seed: u64,
    pub drift: f64,
    pub factor_vol: f64,
    pub idio_vol: f64,
    /// Per-asset factor loadings; `None` draws them from `U[0.5, 1.5]`.
    pub loadings: Option<Vec<f64>>,
    pub start_price: f64,
}

impl Default for PriceSynth {
    fn default() -> Self {
        Self {
            n_days: 1500,
            n_assets: 11,
            seed: 0,
            drift: 2e-4,
            factor_vol: 0.01,
            idio_vol: 0.006,
            loadings: None,
            start_price: 100.0,
        }
    }
}

/// Shortest horizon that supports one rolling split after feature warm-up.
pub const MIN_PRICE_DAYS: usize = 126 + 504 + 60 + 252 + 1;

/// Synthetic price panel with default dynamics.
pub fn synth_prices(n_days: usize, n_assets: usize, seed: u64) -> Result<PricePanel> {
    synth_prices_with(&PriceSynth {
        n_days,
        n_assets,
        seed,
        ..PriceSynth::default()
    })
}

pub fn synth_prices_with(cfg: &PriceSynth) -> Result<PricePanel> {
    contract!(
        cfg.n_days >= MIN_PRICE_DAYS,
        "price horizon {} is too short, need at least {MIN_PRICE_DAYS} days",
        cfg.n_days
    );
    contract!(cfg.n_assets >= 1, "need at least one asset");
    contract!(cfg.start_price > 0.0, "start price must be positive");
    contract!(
        cfg.factor_vol >= 0.0 && cfg.idio_vol >= 0.0,
        "volatilities must be non-negative"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let loadings = match &cfg.loadings {
        Some(l) => {
            contract!(l.len() == cfg.n_assets, "need one loading per asset");
            l.clone()
        }
        None => (0..cfg.n_assets).map(|_| rng.random_range(0.5..1.5)).collect(),
    };
    let mut prices = Matrix::zeros(cfg.n_days, cfg.n_assets);
    let mut level = vec![cfg.start_price; cfg.n_assets];
    for t in 0..cfg.n_days {
        if t > 0 {
            let f: f64 = StandardNormal.sample(&mut rng);
            for (a, l) in level.iter_mut().enumerate() {
                let e: f64 = StandardNormal.sample(&mut rng);
                let r = cfg.drift + loadings[a] * cfg.factor_vol * f + cfg.idio_vol * e;
                *l *= r.exp();
            }
        }
        prices.row_slice_mut(t).copy_from_slice(&level);
    }
    let names = (1..=cfg.n_assets).map(|a| format!("asset{a:02}")).collect();
    PricePanel::new(business_days(cfg.n_days), names, prices)
}

/// Consecutive weekdays starting 2000-01-03.
fn business_days(n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date");
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimSpec {
        SimSpec {
            n_train: 20,
            n_valid: 10,
            n_test: 30,
            p: 12,
            seed: 5,
            ..SimSpec::default()
        }
    }

    #[test]
    fn shapes_and_supports() {
        let b = generate(&small()).unwrap();
        let z = b.train.z.as_ref().unwrap();
        assert_eq!(z.shape(), (20, 5));
        assert_eq!(b.train.x.shape(), (20, 12));
        assert_eq!(b.test.len(), 30);
        let root3 = 3f64.sqrt();
        assert!(b.loadings.unwrap().data().iter().all(|v| v.abs() <= root3));
        assert!(z.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(b.f_choices.len(), 3);
    }

    #[test]
    fn test_split_is_noise_free() {
        let b = generate_with(&small(), [FactorFn::Square; 3]).unwrap();
        let z = b.test.z.as_ref().unwrap();
        for (i, y) in b.test.y.iter().enumerate() {
            let want: f64 = (0..3).map(|j| z.get(i, j).powi(2)).sum();
            assert_eq!(*y, want);
        }
    }

    #[test]
    fn reproducible() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
    }

    #[test]
    fn bad_specs() {
        assert!(generate(&SimSpec { p: 3, ..small() }).is_err());
        assert!(generate(&SimSpec { obs_id: 3, ..small() }).is_err());
        assert!(generate(&SimSpec { n_valid: 0, ..small() }).is_err());
    }

    #[test]
    fn noise_scales() {
        assert_eq!(NoiseScale::Variance(0.25).std_dev(), 0.5);
        assert_eq!(NoiseScale::StdDev(0.3).std_dev(), 0.3);
    }

    #[test]
    fn component_functions() {
        assert_eq!(FactorFn::Cos.eval(1.0), -1.0);
        assert_eq!(FactorFn::OneMinusAbsSquared.eval(-1.0), 0.0);
        assert_eq!(FactorFn::SqrtAbs.eval(0.25), 0.0);
        assert_eq!(FactorFn::Sigmoid.eval(0.0), 0.5);
    }

    #[test]
    fn prices_positive_and_horizon_checked() {
        let panel = synth_prices(MIN_PRICE_DAYS, 3, 1).unwrap();
        assert!(panel.prices.data().iter().all(|&p| p > 0.0));
        assert!(synth_prices(900, 3, 1).is_err());
    }

    #[test]
    fn zero_vol_is_exponential() {
        let cfg = PriceSynth {
            n_days: MIN_PRICE_DAYS,
            n_assets: 2,
            drift: 1e-3,
            factor_vol: 0.0,
            idio_vol: 0.0,
            ..PriceSynth::default()
        };
        let panel = synth_prices_with(&cfg).unwrap();
        for t in [0, 10, 500] {
            let want = 100.0 * (1e-3 * t as f64).exp();
            assert!((panel.prices.get(t, 1) - want).abs() < 1e-9 * want);
        }
    }
}
