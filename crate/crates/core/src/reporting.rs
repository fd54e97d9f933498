//! Result tables and diagnostic plots. CSV is the artifact of record; the
//! SVG plots are a rendering of the same points.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::metrics::{PortfolioReport, REPORT_COLUMNS};

/// One simulation or sweep run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub obs_id: u8,
    pub target_id: u8,
    pub p: usize,
    pub model: String,
    pub seed: u64,
    pub test_mse: Option<f64>,
    pub valid_mse: Option<f64>,
    pub error: Option<String>,
}

/// One trading report; `variant` distinguishes raw and enhanced positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PortfolioRow {
    pub model: String,
    pub variant: String,
    pub report: Option<PortfolioReport>,
    pub error: Option<String>,
}

/// One macro regression task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroRow {
    pub target: String,
    pub model: String,
    pub seed: u64,
    pub r2_oos: Option<f64>,
    pub test_mse: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "rows", rename_all = "snake_case")]
pub enum ResultTable {
    Simulation(Vec<SimRow>),
    Portfolio(Vec<PortfolioRow>),
    Macro(Vec<MacroRow>),
}

impl ResultTable {
    pub fn len(&self) -> usize {
        match self {
            Self::Simulation(r) => r.len(),
            Self::Portfolio(r) => r.len(),
            Self::Macro(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_failed(&self) -> usize {
        match self {
            Self::Simulation(r) => r.iter().filter(|r| r.error.is_some()).count(),
            Self::Portfolio(r) => r.iter().filter(|r| r.error.is_some()).count(),
            Self::Macro(r) => r.iter().filter(|r| r.error.is_some()).count(),
        }
    }

    /// Canonical row order, independent of completion order.
    pub fn sort(&mut self) {
        match self {
            Self::Simulation(r) => r.sort_by(|a, b| {
                (a.obs_id, a.target_id, a.p, &a.model, a.seed).cmp(&(b.obs_id, b.target_id, b.p, &b.model, b.seed))
            }),
            Self::Portfolio(r) => r.sort_by(|a, b| (&a.variant, &a.model).cmp(&(&b.variant, &b.model))),
            Self::Macro(r) => r.sort_by(|a, b| (&a.target, &a.model, a.seed).cmp(&(&b.target, &b.model, b.seed))),
        }
    }

    /// Per-row CSV, one line per run.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        match self {
            Self::Simulation(rows) => {
                w.write_record([
                    "obs_id",
                    "target_id",
                    "p",
                    "model",
                    "seed",
                    "test_mse",
                    "valid_mse",
                    "error",
                ])?;
                for r in rows {
                    w.write_record([
                        r.obs_id.to_string(),
                        r.target_id.to_string(),
                        r.p.to_string(),
                        r.model.clone(),
                        r.seed.to_string(),
                        fmt_opt(r.test_mse),
                        fmt_opt(r.valid_mse),
                        r.error.clone().unwrap_or_default(),
                    ])?;
                }
            }
            Self::Portfolio(rows) => {
                let mut header = vec!["model", "variant"];
                header.extend(REPORT_COLUMNS);
                header.push("error");
                w.write_record(&header)?;
                for r in rows {
                    let mut rec = vec![r.model.clone(), r.variant.clone()];
                    match &r.report {
                        Some(rep) => rec.extend(rep.values().iter().map(|v| fmt_f(*v))),
                        None => rec.extend(std::iter::repeat_n(String::new(), REPORT_COLUMNS.len())),
                    }
                    rec.push(r.error.clone().unwrap_or_default());
                    w.write_record(&rec)?;
                }
            }
            Self::Macro(rows) => {
                w.write_record(["target", "model", "seed", "r2_oos", "test_mse", "error"])?;
                for r in rows {
                    w.write_record([
                        r.target.clone(),
                        r.model.clone(),
                        r.seed.to_string(),
                        fmt_opt(r.r2_oos),
                        fmt_opt(r.test_mse),
                        r.error.clone().unwrap_or_default(),
                    ])?;
                }
            }
        }
        finish(w)
    }
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| crate::Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Shortest round-trip representation; NaN prints as `NaN`.
pub fn fmt_f(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

/// Mean and standard error (sample standard deviation over `√n`).
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Aggregate of one model on one simulation setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub obs_id: u8,
    pub target_id: u8,
    pub p: usize,
    pub model: String,
    pub mean: f64,
    pub se: f64,
    pub n: usize,
    pub n_failed: usize,
}

/// Means over completed seeds per `(obs_id, target_id, p, model)`, sorted
/// by mean test MSE within each setting.
pub fn summarize(rows: &[SimRow]) -> Vec<ModelSummary> {
    let mut groups: BTreeMap<(u8, u8, usize, &str), (Vec<f64>, usize)> = BTreeMap::new();
    for r in rows {
        let g = groups.entry((r.obs_id, r.target_id, r.p, &r.model)).or_default();
        match (r.test_mse, &r.error) {
            (Some(v), None) => g.0.push(v),
            _ => g.1 += 1,
        }
    }
    let mut out: Vec<ModelSummary> = groups
        .into_iter()
        .map(|((obs_id, target_id, p, model), (vals, n_failed))| {
            let (mean, se) = mean_se(&vals);
            ModelSummary {
                obs_id,
                target_id,
                p,
                model: model.to_string(),
                mean,
                se,
                n: vals.len(),
                n_failed,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        (a.obs_id, a.target_id, a.p)
            .cmp(&(b.obs_id, b.target_id, b.p))
            .then(a.mean.total_cmp(&b.mean))
            .then(a.model.cmp(&b.model))
    });
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Table3,
    Table4,
    Rank,
}

/// Mean rank per model over tasks, where each task ranks models by their
/// mean score (lower is better) and equal scores fall back to model name.
pub fn mean_ranks(scores: &BTreeMap<String, BTreeMap<String, f64>>) -> Vec<(String, f64, usize)> {
    let mut totals: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for per_model in scores.values() {
        let mut order: Vec<(&str, f64)> = per_model.iter().map(|(m, s)| (m.as_str(), *s)).collect();
        order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(b.0)));
        for (rank, (m, _)) in order.into_iter().enumerate() {
            let t = totals.entry(m).or_default();
            t.0 += (rank + 1) as f64;
            t.1 += 1;
        }
    }
    let mut out: Vec<(String, f64, usize)> = totals
        .into_iter()
        .map(|(m, (sum, n))| (m.to_string(), sum / n as f64, n))
        .collect();
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    out
}

/// Renders a result table in one of the published layouts.
pub fn emit_table(results: &ResultTable, layout: Layout) -> Result<String> {
    contract!(!results.is_empty(), "cannot emit an empty result table");
    let mut w = csv::Writer::from_writer(Vec::new());
    match (layout, results) {
        (Layout::Table3, ResultTable::Simulation(rows)) => {
            w.write_record([
                "obs_id",
                "target_id",
                "p",
                "model",
                "mean_test_mse",
                "se",
                "n",
                "n_failed",
            ])?;
            for s in summarize(rows) {
                w.write_record([
                    s.obs_id.to_string(),
                    s.target_id.to_string(),
                    s.p.to_string(),
                    s.model,
                    fmt_f(s.mean),
                    fmt_f(s.se),
                    s.n.to_string(),
                    s.n_failed.to_string(),
                ])?;
            }
        }
        (Layout::Table4, ResultTable::Portfolio(rows)) => {
            let mut table = ResultTable::Portfolio(rows.clone());
            table.sort();
            return table.to_csv();
        }
        (Layout::Rank, table @ (ResultTable::Simulation(_) | ResultTable::Macro(_))) => {
            w.write_record(["model", "mean_rank", "n_tasks"])?;
            for (model, rank, n) in mean_ranks(&task_scores(table)) {
                w.write_record([model, fmt_f(rank), n.to_string()])?;
            }
        }
        (layout, _) => contract!(false, "layout {layout:?} does not apply to this result table"),
    }
    finish(w)
}

/// Per-task mean score with lower meaning better: test MSE for simulations,
/// negated R² for macro tasks.
fn task_scores(table: &ResultTable) -> BTreeMap<String, BTreeMap<String, f64>> {
    let mut acc: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    match table {
        ResultTable::Simulation(rows) => {
            for r in rows.iter().filter(|r| r.error.is_none()) {
                if let Some(v) = r.test_mse {
                    let task = format!("{}-{}-{}", r.obs_id, r.target_id, r.p);
                    acc.entry(task).or_default().entry(r.model.clone()).or_default().push(v);
                }
            }
        }
        ResultTable::Macro(rows) => {
            for r in rows.iter().filter(|r| r.error.is_none()) {
                if let Some(v) = r.r2_oos {
                    acc.entry(r.target.clone())
                        .or_default()
                        .entry(r.model.clone())
                        .or_default()
                        .push(-v);
                }
            }
        }
        ResultTable::Portfolio(_) => {}
    }
    acc.into_iter()
        .map(|(task, models)| (task, models.into_iter().map(|(m, v)| (m, mean_se(&v).0)).collect()))
        .collect()
}

/// A named curve; `x` must be strictly increasing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub name: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Trace {
    pub fn new(name: impl Into<String>, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let t = Self {
            name: name.into(),
            x,
            y,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        contract!(!self.x.is_empty(), "trace '{}' is empty", self.name);
        contract!(
            self.x.len() == self.y.len(),
            "trace '{}' has {} x and {} y values",
            self.name,
            self.x.len(),
            self.y.len()
        );
        contract!(
            self.x.iter().chain(&self.y).all(|v| v.is_finite()),
            "trace '{}' has non-finite values",
            self.name
        );
        contract!(
            self.x.windows(2).all(|w| w[0] < w[1]),
            "trace '{}' x values must strictly increase",
            self.name
        );
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlotOptions {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 450.0;
const MARGIN: [f64; 4] = [40.0, 170.0, 50.0, 70.0]; // top, right, bottom, left
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Sidecar CSV with one `series,x,y` line per plotted point.
pub fn traces_csv(traces: &[Trace]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["series", "x", "y"])?;
    for t in traces {
        for (x, y) in t.x.iter().zip(&t.y) {
            w.write_record([t.name.clone(), fmt_f(*x), fmt_f(*y)])?;
        }
    }
    finish(w)
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Renders traces as an SVG line chart.
pub fn render_svg(traces: &[Trace], opts: &PlotOptions) -> Result<String> {
    contract!(!traces.is_empty(), "a plot needs at least one trace");
    for t in traces {
        t.validate()?;
        if opts.log_y {
            contract!(
                t.y.iter().all(|&v| v > 0.0),
                "trace '{}' has non-positive values on a log axis",
                t.name
            );
        }
    }
    let ty = |v: f64| if opts.log_y { v.log10() } else { v };
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for t in traces {
        for (&x, &y) in t.x.iter().zip(&t.y) {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(ty(y));
            y1 = y1.max(ty(y));
        }
    }
    if x1 == x0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 == y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let [top, right, bottom, left] = MARGIN;
    let (pw, ph) = (WIDTH - left - right, HEIGHT - top - bottom);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        escape_xml(&opts.title)
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let ylabel = if opts.log_y {
            format!("{:.3e}", 10f64.powf(yv))
        } else {
            format!("{yv:.4}")
        };
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{xv:.4}</text>"#,
            sx(xv),
            top + ph + 18.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{ylabel}</text>"#,
            left - 6.0,
            sy(yv) + 4.0
        );
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{:.2}" x2="{}" y2="{:.2}" stroke="#dddddd"/>"##,
            sy(yv),
            left + pw,
            sy(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        HEIGHT - 10.0,
        escape_xml(&opts.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape_xml(&opts.y_label)
    );
    for (i, t) in traces.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> =
            t.x.iter()
                .zip(&t.y)
                .map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(ty(y))))
                .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 14.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape_xml(&t.name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes `path` as SVG and a `.csv` sidecar next to it; returns the sidecar path.
pub fn emit_plot(traces: &[Trace], path: &Path, opts: &PlotOptions) -> Result<PathBuf> {
    let svg = render_svg(traces, opts)?;
    let sidecar = path.with_extension("csv");
    std::fs::write(path, svg)?;
    std::fs::write(&sidecar, traces_csv(traces)?)?;
    Ok(sidecar)
}
