//! Helpers shared by the integration tests and the acceptance harness:
//! a finite-difference gradient checker and brute-force metric references.
#![allow(dead_code)]

use factornet::{Matrix, NodeId, Result, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Entries pushed at least `margin` away from each kink in `kinks`, so a
/// central difference never straddles a non-differentiable point.
pub fn away_from(rng: &mut impl Rng, rows: usize, cols: usize, kinks: &[f64], margin: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| loop {
        let v: f64 = rng.random_range(-2.0..2.0);
        if kinks.iter().all(|k| (v - k).abs() > margin) {
            break v;
        }
    })
}

/// Builds a scalar loss from the graph output so every output entry gets a
/// distinct weight: `‖out‖² + sum(out · R)`.
fn scalarize(tape: &mut Tape, out: NodeId, weights: &Matrix) -> Result<NodeId> {
    let sq = tape.frobenius_sq(out)?;
    let r = tape.constant(weights.clone());
    let lin = if tape.value(out).cols() == weights.rows() {
        let m = tape.matmul(out, r)?;
        tape.sum(m)?
    } else {
        tape.sum(out)?
    };
    tape.add(sq, lin)
}

/// Compares reverse-mode gradients with central differences at step `h` for
/// every input of `graph`. Returns the worst relative error
/// `‖g_ad − g_fd‖ / max(‖g_ad‖ + ‖g_fd‖, 1e-12)` over inputs.
pub fn grad_check<F>(inputs: &[Matrix], h: f64, seed: u64, graph: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut r = rng(seed);
    let probe = {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|m| tape.param(m.clone())).collect();
        let out = graph(&mut tape, &ids)?;
        tape.value(out).cols()
    };
    let weights = random_matrix(&mut r, probe, 3);
    let eval = |vals: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = vals.iter().map(|m| tape.param(m.clone())).collect();
        let out = graph(&mut tape, &ids)?;
        let loss = scalarize(&mut tape, out, &weights)?;
        tape.scalar(loss)
    };
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let out = graph(&mut tape, &ids)?;
    let loss = scalarize(&mut tape, out, &weights)?;
    tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(ids[i])
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(input.rows(), input.cols()));
        let mut diff_sq = 0.0;
        let mut norm_a = 0.0;
        let mut norm_n = 0.0;
        for r in 0..input.rows() {
            for c in 0..input.cols() {
                let mut plus = inputs.to_vec();
                plus[i].set(r, c, input.get(r, c) + h);
                let mut minus = inputs.to_vec();
                minus[i].set(r, c, input.get(r, c) - h);
                let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
                let a = analytic.get(r, c);
                diff_sq += (a - numeric).powi(2);
                norm_a += a * a;
                norm_n += numeric * numeric;
            }
        }
        let rel = diff_sq.sqrt() / (norm_a.sqrt() + norm_n.sqrt()).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

pub const FD_STEP: f64 = 1e-5;
pub const PRIMITIVE_TOL: f64 = 1e-5;
pub const EIG_TOL: f64 = 1e-4;

/// Symmetric matrix with eigenvalues spread at least `gap` apart.
pub fn spread_symmetric(rng: &mut impl Rng, n: usize, gap: f64) -> Matrix {
    let q = {
        let a = random_matrix(rng, n, n);
        let s = a.add(&a.transpose()).unwrap();
        factornet::autodiff::eig_sym(&s).unwrap().vectors
    };
    let lambdas: Vec<f64> = (0..n)
        .map(|i| (i as f64 + 1.0) * gap + rng.random_range(0.0..gap / 4.0))
        .collect();
    let d = Matrix::from_fn(n, n, |i, j| if i == j { lambdas[i] } else { 0.0 });
    q.matmul(&d).unwrap().matmul_t(&q).unwrap()
}

/// Worst relative error of each primitive over `instances` random draws.
pub fn gradient_suite(instances: usize, base_seed: u64) -> Result<Vec<(&'static str, f64, f64)>> {
    type Case = (&'static str, f64, Box<dyn Fn(&mut ChaCha8Rng, u64) -> Result<f64>>);
    let h = FD_STEP;
    let cases: Vec<Case> = vec![
        (
            "matmul",
            PRIMITIVE_TOL,
            Box::new(move |r, s| {
                let (n, k, m) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
                let ins = [random_matrix(r, n, k), random_matrix(r, k, m)];
                grad_check(&ins, h, s, |t, x| t.matmul(x[0], x[1]))
            }),
        ),
        (
            "add_bias",
            PRIMITIVE_TOL,
            Box::new(move |r, s| {
                let (n, m) = (r.random_range(1..6), r.random_range(1..5));
                let ins = [random_matrix(r, n, m), random_matrix(r, 1, m)];
                grad_check(&ins, h, s, |t, x| t.add_bias(x[0], x[1]))
            }),
        ),
        (
            "add",
            PRIMITIVE_TOL,
            Box::new(move |r, s| {
                let (n, m) = (r.random_range(1..5), r.random_range(1..5));
                let ins = [random_matrix(r, n, m), random_matrix(r, n, m)];
                grad_check(&ins, h, s, |t, x| t.add(x[0], x[1]))
            }),
        ),
        (
            "sub",
            PRIMITIVE_TOL,
            Box::new(move |r, s| {
                let (n, m) = (r.random_range(1..5), r.random_range(1..5));
                let ins = [random_matrix(r, n, m), random_matrix(r, n, m)];
                grad_check(&ins, h, s, |t, x| t.sub(x[0], x[1]))
            }),
        ),
        (
            "scale",
            PRIMITIVE_TOL,
            Box::new(move |r, s| {
                let c: f64 = r.random_range(-3.0..3.0);
                let ins = [random_matrix(r, 3, 4)];
                grad_check(&ins, h, s, move |t, x| t.scale(x[0], c))
            }),
        ),
        (
            "leaky_relu",
            PRIMITIVE_TOL,
            Box::new(move |r, s| {
                let ins = [away_from(r, 4, 3, &[0.0], 1e-3)];
                grad_check(&ins, h, s, |t, x| t.leaky_relu(x[0], 0.01))
            }),
        ),
        (
            "truncate",
            PRIMITIVE_TOL,
            Box::new(move |r, s| {
                let ins = [away_from(r, 4, 3, &[-1.0, 1.0], 1e-3)];
                grad_check(&ins, h, s, |t, x| t.truncate(x[0], 1.0))
            }),
        ),
        (
            "slice_cols",
            PRIMITIVE_TOL,
            Box::new(move |r, s| {
                let m = r.random_range(2..6);
                let a = r.random_range(0..m - 1);
                let b = r.random_range(a + 1..=m);
                let ins = [random_matrix(r, 3, m)];
                grad_check(&ins, h, s, move |t, x| t.slice_cols(x[0], a, b))
            }),
        ),
        (
            "concat_cols",
            PRIMITIVE_TOL,
            Box::new(move |r, s| {
                let (a, b) = (r.random_range(1..4), r.random_range(1..4));
                let ins = [random_matrix(r, 3, a), random_matrix(r, 3, b)];
                grad_check(&ins, h, s, |t, x| t.concat_cols(&[x[0], x[1], x[0]]))
            }),
        ),
        (
            "column_mean",
            PRIMITIVE_TOL,
            Box::new(move |r, s| {
                let n = r.random_range(1..6);
                let ins = [random_matrix(r, n, 3)];
                grad_check(&ins, h, s, |t, x| t.column_mean(x[0]))
            }),
        ),
        (
            "sample_covariance",
            PRIMITIVE_TOL,
            Box::new(move |r, s| {
                let (n, m) = (r.random_range(2..7), r.random_range(1..5));
                let ins = [random_matrix(r, n, m)];
                grad_check(&ins, h, s, |t, x| t.sample_covariance(x[0]))
            }),
        ),
        (
            "diag_extract",
            PRIMITIVE_TOL,
            Box::new(move |r, s| {
                let n = r.random_range(1..5);
                let ins = [random_matrix(r, n, n)];
                grad_check(&ins, h, s, |t, x| t.diag_extract(x[0]))
            }),
        ),
        (
            "frobenius_sq",
            PRIMITIVE_TOL,
            Box::new(move |r, s| {
                let ins = [random_matrix(r, 3, 4)];
                grad_check(&ins, h, s, |t, x| t.frobenius_sq(x[0]))
            }),
        ),
        (
            "mse",
            PRIMITIVE_TOL,
            Box::new(move |r, s| {
                let n = r.random_range(1..8);
                let ins = [random_matrix(r, n, 1), random_matrix(r, n, 1)];
                grad_check(&ins, h, s, |t, x| t.mse(x[0], x[1]))
            }),
        ),
        (
            "sum",
            PRIMITIVE_TOL,
            Box::new(move |r, s| {
                let ins = [random_matrix(r, 3, 2)];
                grad_check(&ins, h, s, |t, x| t.sum(x[0]))
            }),
        ),
        (
            "square",
            PRIMITIVE_TOL,
            Box::new(move |r, s| {
                let ins = [random_matrix(r, 3, 2)];
                grad_check(&ins, h, s, |t, x| t.square(x[0]))
            }),
        ),
        (
            "transpose",
            PRIMITIVE_TOL,
            Box::new(move |r, s| {
                let (n, m) = (r.random_range(1..5), r.random_range(1..5));
                let ins = [random_matrix(r, n, m)];
                grad_check(&ins, h, s, |t, x| t.transpose(x[0]))
            }),
        ),
        (
            "abs_sum",
            PRIMITIVE_TOL,
            Box::new(move |r, s| {
                let ins = [away_from(r, 3, 3, &[0.0], 1e-3)];
                grad_check(&ins, h, s, |t, x| t.abs_sum(x[0]))
            }),
        ),
        (
            "eig_top_k",
            EIG_TOL,
            Box::new(move |r, s| {
                let n = r.random_range(3..6);
                let k = r.random_range(1..=n);
                let ins = [spread_symmetric(r, n, 0.5)];
                grad_check(&ins, h, s, move |t, x| {
                    // Perturbing one entry of S moves A symmetrically.
                    let st = t.transpose(x[0])?;
                    let sum = t.add(x[0], st)?;
                    let a = t.scale(sum, 0.5)?;
                    t.eig_top_k(a, k, 0.7)
                })
            }),
        ),
    ];
    let mut out = Vec::new();
    for (idx, (name, tol, case)) in cases.iter().enumerate() {
        let mut r = rng(base_seed.wrapping_mul(1000).wrapping_add(idx as u64));
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            worst = worst.max(case(&mut r, base_seed + i as u64)?);
        }
        out.push((*name, worst, *tol));
    }
    Ok(out)
}

/// Brute-force references written without sharing code with the library.
pub mod oracle {
    pub fn sharpe(position: &[f64], market: &[f64]) -> Option<f64> {
        let n = position.len();
        let mut r = vec![0.0; n];
        for t in 0..n {
            r[t] = position[t] * market[t];
        }
        let mut total = 0.0;
        for v in &r {
            total += v;
        }
        let avg = total / n as f64;
        let mut ss = 0.0;
        for v in &r {
            ss += (v - avg) * (v - avg);
        }
        let sd = (ss / (n as f64 - 1.0)).sqrt();
        if sd == 0.0 {
            None
        } else {
            Some(avg / sd * 252f64.sqrt())
        }
    }

    pub fn ann_return(position: &[f64], market: &[f64]) -> f64 {
        let mut total = 0.0;
        for t in 0..position.len() {
            total += position[t] * market[t];
        }
        252.0 * total / position.len() as f64
    }

    /// O(n²) scan over every (peak, trough) pair with peak before trough.
    pub fn max_drawdown(position: &[f64], market: &[f64]) -> f64 {
        let mut values = vec![1.0f64];
        for t in 0..position.len() {
            let last = *values.last().unwrap();
            values.push((last * (1.0 + position[t] * market[t])).max(0.0));
        }
        let mut worst = 0.0f64;
        for t in 0..values.len() {
            for s in 0..=t {
                if values[s] > 0.0 {
                    let loss = (values[t] - values[s]) / values[s];
                    if loss < worst {
                        worst = loss;
                    }
                }
            }
        }
        worst
    }

    pub fn turnover(position: &[f64]) -> f64 {
        let mut total = position[0].abs();
        for t in 1..position.len() {
            total += (position[t] - position[t - 1]).abs();
        }
        total / position.len() as f64
    }

    /// Counts days where the position's sign agrees with the market move,
    /// with a flat position or flat market counted as agreement.
    pub fn dir(position: &[f64], market: &[f64]) -> f64 {
        let mut agree = 0;
        for t in 0..position.len() {
            let (w, m) = (position[t], market[t]);
            if w == 0.0 || m == 0.0 || (w > 0.0) == (m > 0.0) {
                agree += 1;
            }
        }
        agree as f64 / position.len() as f64
    }

    pub fn ic(f: &[f64], m: &[f64]) -> Option<f64> {
        let n = f.len() as f64;
        let fbar = f.iter().sum::<f64>() / n;
        let mbar = m.iter().sum::<f64>() / n;
        let mut num = 0.0;
        let mut df = 0.0;
        let mut dm = 0.0;
        for t in 0..f.len() {
            num += (f[t] - fbar) * (m[t] - mbar);
            df += (f[t] - fbar).powi(2);
            dm += (m[t] - mbar).powi(2);
        }
        if df == 0.0 || dm == 0.0 {
            None
        } else {
            Some(num / (df * dm).sqrt())
        }
    }

    pub fn avg_position(position: &[f64]) -> f64 {
        position.iter().map(|w| w.abs()).sum::<f64>() / position.len() as f64
    }

    pub fn r2_oos(pred: &[f64], y: &[f64], train_mean: f64) -> f64 {
        let mut sse = 0.0;
        let mut sst = 0.0;
        for i in 0..y.len() {
            sse += (pred[i] - y[i]) * (pred[i] - y[i]);
            sst += (train_mean - y[i]) * (train_mean - y[i]);
        }
        1.0 - sse / sst
    }
}

/// A random trading series: forecasts, clipped positions (some exactly
/// flat) and next-day market returns.
pub struct RandomSeries {
    pub forecast: Vec<f64>,
    pub position: Vec<f64>,
    pub market: Vec<f64>,
}

pub fn random_series(r: &mut impl Rng) -> RandomSeries {
    let n = r.random_range(2..300);
    let market: Vec<f64> = (0..n)
        .map(|_| {
            if r.random_bool(0.05) {
                0.0
            } else {
                r.random_range(-0.05..0.05)
            }
        })
        .collect();
    let forecast: Vec<f64> = market.iter().map(|m| 0.3 * m + r.random_range(-0.02..0.02)).collect();
    let lever = if r.random_bool(0.5) { 1.0 } else { 2.0 };
    let position: Vec<f64> = forecast
        .iter()
        .map(|f| {
            if r.random_bool(0.1) {
                0.0
            } else {
                (f * 40.0).clamp(-lever, lever)
            }
        })
        .collect();
    RandomSeries {
        forecast,
        position,
        market,
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

fn close_opt(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => close(a, b, tol),
        (None, None) => true,
        _ => false,
    }
}

/// Number of series on which each metric disagreed with its reference.
pub fn metric_oracle_suite(n: usize, seed: u64, tol: f64) -> Vec<(&'static str, usize)> {
    use factornet::metrics::{portfolio_metrics, r2_oos};
    let mut r = rng(seed);
    let mut misses = [0usize; 8];
    for _ in 0..n {
        let s = random_series(&mut r);
        let rep = portfolio_metrics(&s.forecast, &s.position, &s.market, 0.0).expect("valid series");
        let checks = [
            close(rep.ann_return, oracle::ann_return(&s.position, &s.market), tol),
            close_opt(rep.sharpe, oracle::sharpe(&s.position, &s.market), tol),
            close(rep.max_drawdown, oracle::max_drawdown(&s.position, &s.market), tol),
            close(rep.turnover, oracle::turnover(&s.position), tol),
            close(rep.dir_accuracy, oracle::dir(&s.position, &s.market), tol),
            close_opt(rep.ic, oracle::ic(&s.forecast, &s.market), tol),
            close(rep.avg_position, oracle::avg_position(&s.position), tol),
            {
                let train_mean = r.random_range(-0.01..0.01);
                let ours = r2_oos(&s.forecast, &s.market, train_mean);
                match ours {
                    Ok(v) => close(v, oracle::r2_oos(&s.forecast, &s.market, train_mean), tol),
                    Err(_) => false,
                }
            },
        ];
        for (m, ok) in misses.iter_mut().zip(checks) {
            if !ok {
                *m += 1;
            }
        }
    }
    ["Ret", "Sharpe", "MaxDD", "Turnover", "Dir", "IC", "AvgPos", "R2_OOS"]
        .into_iter()
        .zip(misses)
        .collect()
}
