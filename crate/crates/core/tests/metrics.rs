mod common;

use common::{metric_oracle_suite, oracle, random_series, rng};
use factornet::metrics::*;
use proptest::prelude::*;

#[test]
fn brute_force_references_agree() {
    for (name, misses) in metric_oracle_suite(300, 11, 1e-12) {
        assert_eq!(misses, 0, "{name} disagreed on {misses} series");
    }
}

#[test]
fn perfect_foresight_signal() {
    let mut r = rng(2);
    let s = random_series(&mut r);
    let pos = scale_signal(&s.market, s.market.iter().fold(0.0, |a: f64, b| a.max(b.abs()))).unwrap();
    let rep = portfolio_metrics(&s.market, &pos, &s.market, 0.0).unwrap();
    assert_eq!(rep.dir_accuracy, 1.0);
    assert!((rep.ic.unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(rep.max_drawdown, 0.0);
}

#[test]
fn always_long_earns_the_market() {
    let m = [0.01, -0.02, 0.0, 0.03, -0.01];
    let rep = portfolio_metrics(&[0.1; 5], &[1.0; 5], &m, 0.0).unwrap();
    let mean = m.iter().sum::<f64>() / 5.0;
    assert!((rep.ann_return - 252.0 * mean).abs() < 1e-15);
    // Long every day: the position agrees with the market on up and flat days.
    assert_eq!(rep.dir_accuracy, 3.0 / 5.0);
    assert_eq!(rep.turnover, 1.0 / 5.0);
    assert_eq!(rep.avg_position, 1.0);
}

#[test]
fn zero_signal_is_flat() {
    let m = [0.01, -0.02, 0.005, 0.03];
    let rep = portfolio_metrics(&[0.0; 4], &[0.0; 4], &m, 0.0).unwrap();
    assert_eq!(
        (rep.turnover, rep.ann_return, rep.max_drawdown, rep.avg_position),
        (0.0, 0.0, 0.0, 0.0)
    );
    assert!(equity_curve(&[0.0; 4]).iter().all(|&v| v == 1.0));
}

#[test]
fn forecast_equal_to_market_has_unit_ic() {
    let m = [0.01, -0.02, 0.005, 0.03, -0.004];
    let rep = portfolio_metrics(&m, &[0.5; 5], &m, 0.0).unwrap();
    assert!((rep.ic.unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn length_and_range_contracts() {
    assert!(portfolio_metrics(&[1.0], &[1.0], &[0.1], 0.0).is_err());
    assert!(portfolio_metrics(&[1.0, 2.0], &[1.0], &[0.1, 0.2], 0.0).is_err());
    assert!(SignalSeries::new(vec![], vec![], vec![], vec![], 1.0).is_ok());
    let d = chrono::NaiveDate::from_ymd_opt(2020, 1, 2).unwrap();
    assert!(SignalSeries::new(vec![d], vec![0.0], vec![1.5], vec![0.0], 1.0).is_err());
}

#[test]
fn enhance_fixed_point_at_target_vol() {
    // Alternating ±a returns have sample std a·sqrt(n/(n-1)) over an even window.
    let n = 200;
    let window = 60usize;
    let sd_daily = TARGET_VOL / 252f64.sqrt();
    let a = sd_daily * (((window - 1) as f64) / window as f64).sqrt();
    let m: Vec<f64> = (0..n).map(|t| if t % 2 == 0 { a } else { -a }).collect();
    let e = enhance_position(&vec![1.0; n], &m, &EnhanceConfig::default()).unwrap();
    for t in window..n {
        assert!((e.scales[t] - 1.0).abs() < 1e-12, "t={t} scale={}", e.scales[t]);
        assert!((e.positions[t] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn enhance_doubles_at_half_vol() {
    let n = 200;
    let a = 0.5 * TARGET_VOL / 252f64.sqrt() * (59.0f64 / 60.0).sqrt();
    let m: Vec<f64> = (0..n).map(|t| if t % 2 == 0 { a } else { -a }).collect();
    let cfg = EnhanceConfig {
        cap: 10.0,
        ..EnhanceConfig::default()
    };
    let e = enhance_position(&vec![0.5; n], &m, &cfg).unwrap();
    // Market vol 0.10: a unit position needs scale 2, a half position scale 4.
    let e_unit = enhance_position(&vec![1.0; n], &m, &cfg).unwrap();
    assert!((e_unit.scales[150] - 2.0).abs() < 1e-12);
    assert!((e.scales[150] - 4.0).abs() < 1e-12);
    assert!((e_unit.positions[150] - 2.0).abs() < 1e-12);
}

#[test]
fn enhance_zero_vol_hits_cap() {
    let n = 40;
    let e = enhance_position(&vec![0.3; n], &vec![0.0; n], &EnhanceConfig::default()).unwrap();
    assert!(e.positions[5..].iter().all(|&w| w == 2.0));
    let e = enhance_position(&vec![0.0; n], &vec![0.0; n], &EnhanceConfig::default()).unwrap();
    assert!(e.positions.iter().all(|&w| w == 0.0));
    assert!(enhance_position(&[1.0; 20], &[0.0; 20], &EnhanceConfig::default()).is_err());
}

#[test]
fn enhance_ignores_future_returns() {
    let mut r = rng(9);
    let s = random_series(&mut r);
    if s.market.len() < 60 {
        return;
    }
    let base = enhance_position(&s.position, &s.market, &EnhanceConfig::default()).unwrap();
    let cut = s.market.len() / 2;
    let mut m2 = s.market.clone();
    for v in &mut m2[cut..] {
        *v *= -3.0;
    }
    let other = enhance_position(&s.position, &m2, &EnhanceConfig::default()).unwrap();
    assert_eq!(base.positions[..=cut], other.positions[..=cut]);
}

proptest! {
    #[test]
    fn scale_signal_is_monotone(mut f in prop::collection::vec(-10.0f64..10.0, 1..50), max in 0.01f64..5.0) {
        f.sort_by(|a, b| a.total_cmp(b));
        let w = scale_signal(&f, max).unwrap();
        prop_assert!(w.windows(2).all(|p| p[0] <= p[1]));
        prop_assert!(w.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn report_invariants(seed in 0u64..10_000) {
        let s = random_series(&mut rng(seed));
        let rep = portfolio_metrics(&s.forecast, &s.position, &s.market, 0.0).unwrap();
        prop_assert!((-1.0..=0.0).contains(&rep.max_drawdown));
        prop_assert!((0.0..=1.0).contains(&rep.dir_accuracy));
        if let Some(ic) = rep.ic {
            prop_assert!(ic.abs() <= 1.0);
        }
    }

    #[test]
    fn ic_invariant_to_positive_affine_maps(seed in 0u64..10_000, a in 0.01f64..100.0, b in -5.0f64..5.0) {
        let s = random_series(&mut rng(seed));
        let g: Vec<f64> = s.forecast.iter().map(|f| a * f + b).collect();
        let x = portfolio_metrics(&s.forecast, &s.position, &s.market, 0.0).unwrap().ic;
        let y = portfolio_metrics(&g, &s.position, &s.market, 0.0).unwrap().ic;
        match (x, y) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-9),
            (None, None) => {}
            _ => prop_assert!(false, "IC definedness changed"),
        }
    }

    #[test]
    fn turnover_and_drawdown_ignore_price_level(seed in 0u64..10_000, shift in 1.0f64..1000.0) {
        // Market returns computed from a price path are unchanged by how the
        // path is rescaled; drawdown is computed from returns, not levels.
        let s = random_series(&mut rng(seed));
        let mut prices = vec![100.0f64];
        for m in &s.market {
            let last = *prices.last().unwrap();
            prices.push(last * (1.0 + m));
        }
        let scaled: Vec<f64> = prices.iter().map(|p| p * shift).collect();
        let back: Vec<f64> = scaled.windows(2).map(|w| w[1] / w[0] - 1.0).collect();
        let a = portfolio_metrics(&s.forecast, &s.position, &s.market, 0.0).unwrap();
        let b = portfolio_metrics(&s.forecast, &s.position, &back, 0.0).unwrap();
        prop_assert_eq!(a.turnover, b.turnover);
        prop_assert!((a.max_drawdown - b.max_drawdown).abs() < 1e-12);
        prop_assert!((a.max_drawdown - oracle::max_drawdown(&s.position, &back)).abs() < 1e-12);
    }
}

#[test]
fn r2_examples() {
    assert_eq!(r2_oos(&[0.0, 2.0], &[0.0, 2.0], 1.0).unwrap(), 1.0);
    assert_eq!(r2_oos(&[1.0, 1.0], &[0.0, 2.0], 1.0).unwrap(), 0.0);
    assert_eq!(r2_oos(&[2.0, 0.0], &[0.0, 2.0], 1.0).unwrap(), -3.0);
}
