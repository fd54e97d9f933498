//! Evaluation formulas: regression error, out-of-sample R² and the trading
//! metrics used for the ETF backtest.
//!
//! Timing: index `t` of a [`SignalSeries`] holds the position taken at the
//! close of day `t` together with the market return of the *following* day,
//! so the strategy return at that index is simply `position[t] * market[t]`
//! and a forecast is compared with the return it was meant to predict.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

pub use crate::training::mse;

/// Trading days per year.
pub const ANNUALIZATION: f64 = 252.0;
/// Signals are divided by this multiple of the train-period maximum.
pub const SIGNAL_HEADROOM: f64 = 1.2;
pub const TARGET_VOL: f64 = 0.20;
pub const SMOOTHING_WINDOW: usize = 20;
pub const VOL_WINDOW: usize = 60;
pub const ENHANCED_CAP: f64 = 2.0;

/// `1 - Σ(ŷ - y)² / Σ(ȳ_train - y)²`.
pub fn r2_oos(pred: &[f64], y: &[f64], train_mean: f64) -> Result<f64> {
    contract!(
        pred.len() == y.len(),
        "{} predictions for {} targets",
        pred.len(),
        y.len()
    );
    let sse: f64 = pred.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum();
    let sst: f64 = y.iter().map(|t| (train_mean - t).powi(2)).sum();
    if sst == 0.0 || !sst.is_finite() {
        return Err(Error::Numeric("R² denominator is zero".into()));
    }
    Ok(1.0 - sse / sst)
}

/// `clip(f / (1.2 * train_max), -1, 1)`.
pub fn scale_signal(forecast: &[f64], train_max: f64) -> Result<Vec<f64>> {
    contract!(
        train_max > 0.0 && train_max.is_finite(),
        "train_max must be positive, got {train_max}"
    );
    let denom = SIGNAL_HEADROOM * train_max;
    Ok(forecast.iter().map(|f| (f / denom).clamp(-1.0, 1.0)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnhanceConfig {
    pub target_vol: f64,
    pub window: usize,
    pub vol_window: usize,
    pub cap: f64,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self {
            target_vol: TARGET_VOL,
            window: SMOOTHING_WINDOW,
            vol_window: VOL_WINDOW,
            cap: ENHANCED_CAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Enhanced {
    pub positions: Vec<f64>,
    /// Volatility-targeting multiplier applied at each step; infinite where
    /// the trailing volatility was zero.
    pub scales: Vec<f64>,
}

/// Smooths positions with a trailing mean (shorter during warm-up), then
/// rescales so the smoothed strategy's trailing annualized volatility hits
/// the target, and clips to `±cap`.
///
/// The volatility at step `t` uses only returns already realized at that
/// point (indices before `t`). With fewer than two such returns the scale is
/// 1; with zero volatility the position goes to the cap in its own direction.
pub fn enhance_position(positions: &[f64], market: &[f64], cfg: &EnhanceConfig) -> Result<Enhanced> {
    let n = positions.len();
    contract!(n == market.len(), "{n} positions for {} returns", market.len());
    contract!(
        cfg.window >= 1 && n > cfg.window,
        "series length {n} must exceed the window {}",
        cfg.window
    );
    contract!(cfg.vol_window >= 2, "volatility window must be at least 2");
    contract!(
        cfg.target_vol > 0.0 && cfg.cap > 0.0,
        "target volatility and cap must be positive"
    );

    let mut smooth = Vec::with_capacity(n);
    let mut acc = 0.0;
    for t in 0..n {
        acc += positions[t];
        if t >= cfg.window {
            acc -= positions[t - cfg.window];
        }
        smooth.push(acc / (t + 1).min(cfg.window) as f64);
    }
    let returns: Vec<f64> = smooth.iter().zip(market).map(|(w, m)| w * m).collect();

    let mut out = Vec::with_capacity(n);
    let mut scales = Vec::with_capacity(n);
    for t in 0..n {
        let hist = &returns[t.saturating_sub(cfg.vol_window)..t];
        let scale = if hist.len() < 2 {
            1.0
        } else {
            let vol = sample_std(hist) * ANNUALIZATION.sqrt();
            if vol > 0.0 {
                cfg.target_vol / vol
            } else {
                f64::INFINITY
            }
        };
        let w = if scale.is_infinite() {
            if smooth[t] == 0.0 {
                0.0
            } else {
                cfg.cap.copysign(smooth[t])
            }
        } else {
            (smooth[t] * scale).clamp(-cfg.cap, cfg.cap)
        };
        out.push(w);
        scales.push(scale);
    }
    Ok(Enhanced { positions: out, scales })
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_std(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Column order of the trading report.
pub const REPORT_COLUMNS: [&str; 7] = ["Ret", "Sharpe", "MaxDD", "Turnover", "Dir", "IC", "AvgPos"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PortfolioReport {
    /// Mean daily return times 252.
    pub ann_return: f64,
    /// `None` when the daily returns have zero variance.
    pub sharpe: Option<f64>,
    /// Largest peak-to-trough loss of the equity curve, as a fraction in `[-1, 0]`.
    pub max_drawdown: f64,
    pub turnover: f64,
    pub dir_accuracy: f64,
    /// `None` when forecasts or returns are constant.
    pub ic: Option<f64>,
    pub avg_position: f64,
}

impl PortfolioReport {
    /// Values in [`REPORT_COLUMNS`] order; undefined entries are NaN.
    pub fn values(&self) -> [f64; 7] {
        [
            self.ann_return,
            self.sharpe.unwrap_or(f64::NAN),
            self.max_drawdown,
            self.turnover,
            self.dir_accuracy,
            self.ic.unwrap_or(f64::NAN),
            self.avg_position,
        ]
    }
}

/// Equity curve starting at 1, floored at 0 once the strategy is wiped out.
pub fn equity_curve(returns: &[f64]) -> Vec<f64> {
    let mut eq = Vec::with_capacity(returns.len() + 1);
    let mut v = 1.0f64;
    eq.push(v);
    for r in returns {
        v = (v * (1.0 + r)).max(0.0);
        eq.push(v);
    }
    eq
}

/// Most negative `P_t / max_{s≤t} P_s - 1` along the curve.
pub fn max_drawdown(equity: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst: f64 = 0.0;
    for &p in equity {
        peak = peak.max(p);
        if peak > 0.0 {
            worst = worst.min(p / peak - 1.0);
        }
    }
    worst
}

/// Computes every trading metric from aligned forecasts, positions and
/// next-day market returns.
///
/// Directional accuracy counts the days on which the position pointed the
/// way the market moved; a flat position or a flat market counts as a match.
pub fn portfolio_metrics(forecast: &[f64], position: &[f64], market: &[f64], rf: f64) -> Result<PortfolioReport> {
    let n = market.len();
    contract!(
        forecast.len() == n && position.len() == n,
        "series lengths differ: {} forecasts, {} positions, {n} returns",
        forecast.len(),
        position.len()
    );
    contract!(n >= 2, "need at least two observations, got {n}");
    let returns: Vec<f64> = position.iter().zip(market).map(|(w, m)| w * m).collect();
    let excess: Vec<f64> = returns.iter().map(|r| r - rf).collect();
    let sd = sample_std(&returns);
    let sharpe = (sd > 0.0).then(|| mean(&excess) / sd * ANNUALIZATION.sqrt());
    let mut prev = 0.0;
    let mut turnover = 0.0;
    for &w in position {
        turnover += (w - prev).abs();
        prev = w;
    }
    let hits = returns.iter().filter(|&&r| r >= 0.0).count();
    Ok(PortfolioReport {
        ann_return: mean(&returns) * ANNUALIZATION,
        sharpe,
        max_drawdown: max_drawdown(&equity_curve(&returns)),
        turnover: turnover / n as f64,
        dir_accuracy: hits as f64 / n as f64,
        ic: pearson(forecast, market),
        avg_position: position.iter().map(|w| w.abs()).sum::<f64>() / n as f64,
    })
}

/// Forecasts, positions and realized next-day returns on common dates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalSeries {
    pub dates: Vec<NaiveDate>,
    pub forecast: Vec<f64>,
    pub position: Vec<f64>,
    pub market: Vec<f64>,
    /// Positions lie in `[-clip, clip]`.
    pub clip: f64,
}

impl SignalSeries {
    pub fn new(
        dates: Vec<NaiveDate>,
        forecast: Vec<f64>,
        position: Vec<f64>,
        market: Vec<f64>,
        clip: f64,
    ) -> Result<Self> {
        let n = dates.len();
        contract!(
            forecast.len() == n && position.len() == n && market.len() == n,
            "signal series fields must have equal lengths"
        );
        contract!(
            position.iter().all(|w| w.abs() <= clip),
            "positions exceed the clip range ±{clip}"
        );
        Ok(Self {
            dates,
            forecast,
            position,
            market,
            clip,
        })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// Appends another span; dates must continue strictly after this one.
    pub fn extend(&mut self, other: SignalSeries) -> Result<()> {
        if let (Some(a), Some(b)) = (self.dates.last(), other.dates.first()) {
            contract!(a < b, "appended span starts at {b}, not after {a}");
        }
        self.clip = self.clip.max(other.clip);
        self.dates.extend(other.dates);
        self.forecast.extend(other.forecast);
        self.position.extend(other.position);
        self.market.extend(other.market);
        Ok(())
    }

    pub fn enhanced(&self, cfg: &EnhanceConfig) -> Result<SignalSeries> {
        let e = enhance_position(&self.position, &self.market, cfg)?;
        SignalSeries::new(
            self.dates.clone(),
            self.forecast.clone(),
            e.positions,
            self.market.clone(),
            cfg.cap,
        )
    }

    pub fn report(&self, rf: f64) -> Result<PortfolioReport> {
        portfolio_metrics(&self.forecast, &self.position, &self.market, rf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drawdown_example() {
        assert_eq!(max_drawdown(&[100.0, 50.0, 75.0]), -0.5);
        assert_eq!(max_drawdown(&equity_curve(&[-0.5, 0.5])), -0.5);
    }

    #[test]
    fn turnover_example() {
        let r = portfolio_metrics(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0], &[0.01, 0.02, -0.01], 0.0).unwrap();
        assert!((r.turnover - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn r2_examples() {
        assert_eq!(r2_oos(&[2.0, 0.0], &[0.0, 2.0], 1.0).unwrap(), -3.0);
        assert_eq!(r2_oos(&[1.0, 1.0], &[0.0, 2.0], 1.0).unwrap(), 0.0);
        assert!(r2_oos(&[1.0], &[1.0], 1.0).is_err());
    }

    #[test]
    fn scale_examples() {
        assert_eq!(scale_signal(&[2.4, 0.0, 0.6], 1.0).unwrap(), vec![1.0, 0.0, 0.5]);
        assert!(scale_signal(&[1.0], 0.0).is_err());
    }

    #[test]
    fn flat_returns_flag_sharpe() {
        let r = portfolio_metrics(&[0.0; 4], &[0.0; 4], &[0.01, -0.02, 0.0, 0.03], 0.0).unwrap();
        assert_eq!(r.sharpe, None);
        assert_eq!(r.ic, None);
        assert_eq!(r.max_drawdown, 0.0);
    }
}
