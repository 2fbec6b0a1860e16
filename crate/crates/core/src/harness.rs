//! Experiment harness: the variance-comparison experiment, multi-run
//! convergence comparisons, and CSV/SVG emission.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimator::{
    gamma_star, sample_stats, sample_with_replacement, control_variate_estimate, BatchGradients,
    GammaEstimate, VarianceAccumulator, DEFAULT_GAMMA_EPS,
};
use crate::model::{FiniteSumObjective, RidgeObjective};
use crate::optimize::{run_alg1, run_alg2, run_full_cg, Algorithm, RunConfig, RunTrace};
use crate::search::WolfeParams;
use crate::Scalar;

/// Relative gradient tolerance at which checkpoint collection stops early.
const CG_GRAD_TOL: f64 = 1e-10;

/// Configuration of the estimator-variance experiment.
///
/// A deterministic full-gradient CG run provides iterates ω_0..ω_K
/// (`num_checkpoints` = K) plus the target point ω_{K+1}; `num_batches`
/// mini-batches are drawn once and reused for every checkpoint.
#[derive(Debug, Clone)]
pub struct VarianceExperimentConfig<F> {
    pub lambda: F,
    pub num_checkpoints: usize,
    pub num_batches: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub wolfe: WolfeParams<F>,
    pub gamma_eps: F,
    /// Diagnostic mode: compute both columns with γ = 1 (they must agree).
    pub force_gamma_one: bool,
}

impl<F: Scalar> VarianceExperimentConfig<F> {
    pub fn new(lambda: F) -> Self {
        Self {
            lambda,
            num_checkpoints: 100,
            num_batches: 100,
            batch_size: 64,
            seed: 0,
            wolfe: WolfeParams::default().with_alpha_max(F::from_f64(1e3)),
            gamma_eps: F::from_f64(DEFAULT_GAMMA_EPS),
            force_gamma_one: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_checkpoints == 0 {
            return Err(Error::InvalidArgument("need num_checkpoints >= 1".into()));
        }
        if self.num_batches < 2 {
            return Err(Error::InvalidArgument("need num_batches >= 2".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("need batch_size >= 2".into()));
        }
        self.wolfe.validate()
    }
}

/// Summed-over-coordinates empirical variance of the two estimates targeting
/// the final point, with checkpoint `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceRow {
    pub k: usize,
    pub var_gamma_star: f64,
    pub var_gamma_one: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceTable {
    pub rows: Vec<VarianceRow>,
    /// Checkpoints actually used (fewer than requested when CG converged
    /// early).
    pub checkpoints_used: usize,
    pub truncated: bool,
}

impl VarianceTable {
    pub const CSV_HEADER: &'static str = "k,var_gamma_star,var_gamma_one";

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            writeln!(w, "{},{},{}", r.k, r.var_gamma_star, r.var_gamma_one)?;
        }
        Ok(())
    }
}

/// Runs the variance comparison: for each stored CG iterate ω_k, the full
/// gradient at the target ω_{K+1} is estimated over the reused batches as
/// `∇f_S(ω_{K+1}) − γ (∇f_S(ω_k) − ∇f(ω_k))` with γ ∈ {γ*, 1}, and the
/// population variance over batches (summed over coordinates) is reported
/// per k.
pub fn variance_experiment<F: Scalar, O: FiniteSumObjective<F>>(
    obj: &O,
    cfg: &VarianceExperimentConfig<F>,
) -> Result<VarianceTable> {
    cfg.validate()?;
    let n = obj.n_samples();
    let d = obj.dim();

    let start = Array1::zeros(d);
    let cg = run_full_cg(obj, &start, cfg.num_checkpoints + 1, &cfg.wolfe, CG_GRAD_TOL)?;
    let iterates = cg.iterates;
    let truncated = iterates.len() < cfg.num_checkpoints + 2;
    if truncated {
        log::warn!(
            "deterministic CG converged after {} iterates; using {} checkpoints instead of {}",
            iterates.len(),
            iterates.len().saturating_sub(1),
            cfg.num_checkpoints + 1
        );
    }
    if iterates.len() < 2 {
        return Err(Error::Numeric(
            "objective is stationary at the start; no checkpoints to compare".into(),
        ));
    }
    let (target, checkpoints) = iterates.split_last().expect("at least two iterates");

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batches: Vec<Vec<usize>> = (0..cfg.num_batches)
        .map(|_| sample_with_replacement(&mut rng, n, cfg.batch_size))
        .collect();

    // Gradients at the target do not depend on k; compute them once.
    let x_blocks: Vec<Array2<F>> = batches
        .iter()
        .map(|idx| {
            let mut block = Array2::zeros((idx.len(), d));
            for (row, &i) in idx.iter().enumerate() {
                block.row_mut(row).assign(&obj.grad_i(target, i));
            }
            block
        })
        .collect();

    let ones = GammaEstimate::ones(d);
    let mut rows = Vec::with_capacity(checkpoints.len());
    for (k, w_k) in checkpoints.iter().enumerate() {
        let mu_k = obj.full_grad(w_k);
        let mut acc_star = VarianceAccumulator::new(d);
        let mut acc_one = VarianceAccumulator::new(d);
        for (b, idx) in batches.iter().enumerate() {
            let mut y_block = Array2::zeros((idx.len(), d));
            for (row, &i) in idx.iter().enumerate() {
                y_block.row_mut(row).assign(&obj.grad_i(w_k, i));
            }
            let bg = BatchGradients::new(x_blocks[b].clone(), y_block, idx.clone())?;
            let g_one = control_variate_estimate(&bg, &mu_k, &ones);
            if cfg.force_gamma_one {
                acc_star.push(&g_one);
            } else {
                let (s_xy, s_y2) = sample_stats(&bg)?;
                let gamma = gamma_star(s_xy, s_y2, cfg.gamma_eps);
                acc_star.push(&control_variate_estimate(&bg, &mu_k, &gamma));
            }
            acc_one.push(&g_one);
        }
        rows.push(VarianceRow {
            k,
            var_gamma_star: acc_star.population_variance().sum().as_f64(),
            var_gamma_one: acc_one.population_variance().sum().as_f64(),
        });
    }

    Ok(VarianceTable {
        rows,
        checkpoints_used: checkpoints.len(),
        truncated,
    })
}

/// One labelled run configuration to compare.
#[derive(Debug, Clone)]
pub struct Variant<F> {
    pub label: String,
    pub cfg: RunConfig<F>,
}

impl<F: Scalar> Variant<F> {
    pub fn new(label: impl Into<String>, cfg: RunConfig<F>) -> Self {
        Self {
            label: label.into(),
            cfg,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompareOptions {
    /// Worker threads; 1 keeps runs serial and interleaved (cleanest wall
    /// times).
    pub threads: usize,
    /// "Iterations to threshold" counts iterations until the loss falls to
    /// this fraction of the initial loss.
    pub loss_ratio_threshold: f64,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self {
            threads: 1,
            loss_ratio_threshold: 1e-3,
        }
    }
}

/// Raw outcome of a single (dataset, variant, seed) run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dataset: String,
    pub variant: String,
    pub seed: u64,
    /// None when the run diverged.
    pub trace: Option<RunTrace>,
    pub wall_ms: f64,
}

/// Per-(dataset, variant) summary cell; `failed` when every seed diverged.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantCell {
    pub variant: String,
    pub failed: bool,
    pub final_log10_loss: f64,
    pub iters_to_threshold: Option<usize>,
    pub wall_ms_total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetComparison {
    pub dataset: String,
    /// Iteration axis 0..=iters.
    pub iters: Vec<usize>,
    /// Per non-failed variant: mean log10 loss per iteration over seeds.
    pub curves: Vec<(String, Vec<f64>)>,
    pub cells: Vec<VariantCell>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub datasets: Vec<DatasetComparison>,
}

impl ComparisonReport {
    pub const SUMMARY_HEADER: &'static str =
        "dataset,variant,status,final_log10_loss,iters_to_threshold,wall_ms_total";

    /// Total wall time of the variants whose label satisfies the predicate.
    pub fn wall_ms_where(&self, pred: impl Fn(&str) -> bool) -> f64 {
        self.datasets
            .iter()
            .flat_map(|d| d.cells.iter())
            .filter(|c| pred(&c.variant))
            .map(|c| c.wall_ms_total)
            .sum()
    }

    pub fn write_summary_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::SUMMARY_HEADER)?;
        for ds in &self.datasets {
            for cell in &ds.cells {
                let status = if cell.failed { "failed" } else { "ok" };
                let thr = cell
                    .iters_to_threshold
                    .map(|v| v.to_string())
                    .unwrap_or_default();
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    ds.dataset, cell.variant, status, cell.final_log10_loss, thr, cell.wall_ms_total
                )?;
            }
        }
        Ok(())
    }

    /// Per-dataset CSV: `iter` column plus one mean log10-loss column per
    /// variant.
    pub fn write_dataset_csv<W: Write>(&self, dataset: &str, mut w: W) -> Result<()> {
        let ds = self
            .datasets
            .iter()
            .find(|d| d.dataset == dataset)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown dataset {dataset:?}")))?;
        let labels: Vec<&str> = ds.curves.iter().map(|(l, _)| l.as_str()).collect();
        writeln!(w, "iter,{}", labels.join(","))?;
        for (row, &it) in ds.iters.iter().enumerate() {
            let mut line = it.to_string();
            for (_, curve) in &ds.curves {
                line.push(',');
                line.push_str(&curve[row].to_string());
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Runs every (dataset, variant, seed) combination and aggregates the traces
/// into per-dataset mean log10-loss curves and summary cells.
///
/// `iters` is the shared iteration budget: table runs use it directly, epoch
/// runs keep their configured inner length and round the epoch count up.
/// Diverged runs are recorded as failed cells, not errors.
pub fn compare_convergence<F: Scalar>(
    datasets: &[Arc<Dataset<F>>],
    variants: &[Variant<F>],
    iters: usize,
    seeds: &[u64],
    opts: &CompareOptions,
) -> Result<ComparisonReport> {
    if datasets.is_empty() || variants.is_empty() || seeds.is_empty() || iters == 0 {
        return Err(Error::InvalidArgument(
            "compare needs at least one dataset, variant, seed, and iteration".into(),
        ));
    }
    for spec in variants {
        spec.cfg.validate()?;
        if spec.cfg.algorithm == Algorithm::Alg2 && spec.cfg.inner == 0 {
            return Err(Error::InvalidArgument(format!(
                "variant {:?}: epoch runs need inner >= 1 in a comparison",
                spec.label
            )));
        }
    }

    let mut jobs = Vec::new();
    for ds in datasets {
        for &seed in seeds {
            for spec in variants {
                jobs.push((ds.clone(), spec.clone(), seed));
            }
        }
    }

    let run_one = |(ds, spec, seed): &(Arc<Dataset<F>>, Variant<F>, u64)| -> Result<RunOutcome> {
        let mut cfg = spec.cfg.clone();
        cfg.seed = *seed;
        cfg.eval_every = 1;
        match cfg.algorithm {
            Algorithm::Alg1 => cfg.max_iters = iters,
            Algorithm::Alg2 => cfg.outer = iters.div_ceil(cfg.inner),
        }
        let obj = RidgeObjective::new(ds.clone(), cfg.lambda);
        let started = Instant::now();
        let outcome = match cfg.algorithm {
            Algorithm::Alg1 => run_alg1(&obj, &cfg),
            Algorithm::Alg2 => run_alg2(&obj, &cfg),
        };
        let wall = started.elapsed().as_secs_f64() * 1e3;
        let trace = match outcome {
            Ok(run) => Some(run.trace),
            Err(Error::Diverged { .. }) => None,
            Err(e) => return Err(e),
        };
        Ok(RunOutcome {
            dataset: ds.name().to_string(),
            variant: spec.label.clone(),
            seed: *seed,
            trace,
            wall_ms: wall,
        })
    };

    let outcomes: Vec<RunOutcome> = if opts.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.threads)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(run_one).collect::<Result<Vec<_>>>())?
    } else {
        jobs.iter().map(run_one).collect::<Result<Vec<_>>>()?
    };

    let dataset_names: Vec<String> = datasets.iter().map(|d| d.name().to_string()).collect();
    let variant_labels: Vec<String> = variants.iter().map(|v| v.label.clone()).collect();
    Ok(aggregate_report(
        &outcomes,
        &dataset_names,
        &variant_labels,
        iters,
        opts,
    ))
}

/// Pure aggregation of stored run outcomes into a report; identical inputs
/// reproduce the report exactly.
pub fn aggregate_report(
    outcomes: &[RunOutcome],
    datasets: &[String],
    variants: &[String],
    iters: usize,
    opts: &CompareOptions,
) -> ComparisonReport {
    let mut report = ComparisonReport { datasets: Vec::new() };
    for ds_name in datasets {
        let axis: Vec<usize> = (0..=iters).collect();
        let mut curves = Vec::new();
        let mut cells = Vec::new();
        for label in variants {
            let runs: Vec<&RunOutcome> = outcomes
                .iter()
                .filter(|o| &o.dataset == ds_name && &o.variant == label)
                .collect();
            let wall_ms_total: f64 = runs.iter().map(|o| o.wall_ms).sum();
            let good: Vec<&RunTrace> = runs.iter().filter_map(|o| o.trace.as_ref()).collect();
            if good.is_empty() {
                cells.push(VariantCell {
                    variant: label.clone(),
                    failed: true,
                    final_log10_loss: f64::NAN,
                    iters_to_threshold: None,
                    wall_ms_total,
                });
                continue;
            }
            let mut curve = Vec::with_capacity(axis.len());
            for &t in &axis {
                let mean = good
                    .iter()
                    .map(|tr| log10_loss_at(tr, t))
                    .sum::<f64>()
                    / good.len() as f64;
                curve.push(mean);
            }
            let initial = curve[0];
            let target = initial + opts.loss_ratio_threshold.log10();
            let iters_to_threshold = axis
                .iter()
                .zip(&curve)
                .find(|(_, &v)| v <= target)
                .map(|(&t, _)| t);
            cells.push(VariantCell {
                variant: label.clone(),
                failed: false,
                final_log10_loss: *curve.last().expect("non-empty curve"),
                iters_to_threshold,
                wall_ms_total,
            });
            curves.push((label.clone(), curve));
        }
        report.datasets.push(DatasetComparison {
            dataset: ds_name.clone(),
            iters: axis,
            curves,
            cells,
        });
    }
    report
}

/// log10 of the loss at iteration `t`, carrying the last recorded loss
/// forward past early convergence and flooring at the smallest positive
/// double to stay finite.
fn log10_loss_at(trace: &RunTrace, t: usize) -> f64 {
    let mut loss = trace.records[0].loss;
    for r in &trace.records {
        if r.iter > t {
            break;
        }
        loss = r.loss;
    }
    loss.max(f64::MIN_POSITIVE).log10()
}

/// A named polyline for the SVG writer.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            points,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SvgOptions {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Plot log10 of the y values (requires strictly positive ys).
    pub log_y: bool,
}

impl Default for SvgOptions {
    fn default() -> Self {
        Self {
            title: String::new(),
            x_label: "x".into(),
            y_label: "y".into(),
            log_y: false,
        }
    }
}

const SVG_WIDTH: f64 = 840.0;
const SVG_HEIGHT: f64 = 520.0;
const MARGIN_LEFT: f64 = 72.0;
const MARGIN_RIGHT: f64 = 170.0;
const MARGIN_TOP: f64 = 42.0;
const MARGIN_BOTTOM: f64 = 54.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Renders line series into a standalone SVG string. Deterministic for
/// identical input; rejects empty or non-finite series (log scale also
/// rejects non-positive ys).
pub fn render_svg_lines(series: &[Series], opts: &SvgOptions) -> Result<String> {
    if series.is_empty() {
        return Err(Error::Render("no series to plot".into()));
    }
    let mut transformed: Vec<(String, Vec<(f64, f64)>)> = Vec::with_capacity(series.len());
    for s in series {
        if s.points.is_empty() {
            return Err(Error::Render(format!("series {:?} is empty", s.name)));
        }
        let mut pts = Vec::with_capacity(s.points.len());
        for &(x, y) in &s.points {
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::Render(format!(
                    "series {:?} contains non-finite values",
                    s.name
                )));
            }
            let y = if opts.log_y {
                if y <= 0.0 {
                    return Err(Error::Render(format!(
                        "series {:?} has non-positive value {y} on a log scale",
                        s.name
                    )));
                }
                y.log10()
            } else {
                y
            };
            pts.push((x, y));
        }
        transformed.push((s.name.clone(), pts));
    }

    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for (_, pts) in &transformed {
        for &(x, y) in pts {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    if x_min == x_max {
        x_min -= 0.5;
        x_max += 0.5;
    }
    if y_min == y_max {
        y_min -= 0.5;
        y_max += 0.5;
    }

    let plot_w = SVG_WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = SVG_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let px = |x: f64| MARGIN_LEFT + (x - x_min) / (x_max - x_min) * plot_w;
    let py = |y: f64| MARGIN_TOP + (1.0 - (y - y_min) / (y_max - y_min)) * plot_h;

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_WIDTH}\" height=\"{SVG_HEIGHT}\" viewBox=\"0 0 {SVG_WIDTH} {SVG_HEIGHT}\">\n"
    ));
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    if !opts.title.is_empty() {
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\" font-family=\"sans-serif\">{}</text>\n",
            MARGIN_LEFT + plot_w / 2.0,
            escape_xml(&opts.title)
        ));
    }

    // Axes.
    let x0 = MARGIN_LEFT;
    let y0 = MARGIN_TOP + plot_h;
    out.push_str(&format!(
        "<line x1=\"{x0:.2}\" y1=\"{y0:.2}\" x2=\"{:.2}\" y2=\"{y0:.2}\" stroke=\"black\"/>\n",
        MARGIN_LEFT + plot_w
    ));
    out.push_str(&format!(
        "<line x1=\"{x0:.2}\" y1=\"{:.2}\" x2=\"{x0:.2}\" y2=\"{y0:.2}\" stroke=\"black\"/>\n",
        MARGIN_TOP
    ));

    // Five ticks per axis.
    for i in 0..5 {
        let f = i as f64 / 4.0;
        let xv = x_min + f * (x_max - x_min);
        let xp = px(xv);
        out.push_str(&format!(
            "<line class=\"tick\" x1=\"{xp:.2}\" y1=\"{y0:.2}\" x2=\"{xp:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
            y0 + 6.0
        ));
        out.push_str(&format!(
            "<text x=\"{xp:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"middle\" font-family=\"sans-serif\">{}</text>\n",
            y0 + 20.0,
            fmt_tick(xv)
        ));
        let yv = y_min + f * (y_max - y_min);
        let yp = py(yv);
        out.push_str(&format!(
            "<line class=\"tick\" x1=\"{:.2}\" y1=\"{yp:.2}\" x2=\"{x0:.2}\" y2=\"{yp:.2}\" stroke=\"black\"/>\n",
            x0 - 6.0
        ));
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"end\" font-family=\"sans-serif\">{}</text>\n",
            x0 - 9.0,
            yp + 4.0,
            fmt_tick(yv)
        ));
    }

    // Axis labels.
    out.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\" font-family=\"sans-serif\">{}</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        SVG_HEIGHT - 12.0,
        escape_xml(&opts.x_label)
    ));
    let y_label = if opts.log_y {
        format!("{} (log10)", opts.y_label)
    } else {
        opts.y_label.clone()
    };
    out.push_str(&format!(
        "<text x=\"16\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\" font-family=\"sans-serif\" transform=\"rotate(-90 16 {:.2})\">{}</text>\n",
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        escape_xml(&y_label)
    ));

    // Series polylines and legend.
    for (s_idx, (name, pts)) in transformed.iter().enumerate() {
        let color = PALETTE[s_idx % PALETTE.len()];
        let mut coords = String::new();
        for (i, &(x, y)) in pts.iter().enumerate() {
            if i > 0 {
                coords.push(' ');
            }
            coords.push_str(&format!("{:.2},{:.2}", px(x), py(y)));
        }
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{coords}\"/>\n"
        ));
        let ly = MARGIN_TOP + 14.0 + 18.0 * s_idx as f64;
        let lx = MARGIN_LEFT + plot_w + 14.0;
        out.push_str(&format!(
            "<line x1=\"{lx:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            lx + 22.0
        ));
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" font-family=\"sans-serif\">{}</text>\n",
            lx + 28.0,
            ly + 4.0,
            escape_xml(name)
        ));
    }

    out.push_str("</svg>\n");
    Ok(out)
}

/// Renders and writes line series to `path`. Identical input produces a
/// byte-identical file.
pub fn emit_svg_lines(series: &[Series], opts: &SvgOptions, path: &Path) -> Result<()> {
    let svg = render_svg_lines(series, opts)?;
    let mut file = BufWriter::new(File::create(path)?);
    file.write_all(svg.as_bytes())?;
    Ok(())
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if (1e-3..1e5).contains(&a) {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    } else {
        format!("{v:.3e}")
    }
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes the per-dataset curves, per-dataset SVGs, and the summary CSV into
/// `dir` (created if absent).
pub fn write_report_files(report: &ComparisonReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let summary = File::create(dir.join("summary.csv"))?;
    report.write_summary_csv(BufWriter::new(summary))?;
    for ds in &report.datasets {
        let csv = File::create(dir.join(format!("compare_{}.csv", ds.dataset)))?;
        report.write_dataset_csv(&ds.dataset, BufWriter::new(csv))?;
        if ds.curves.is_empty() {
            continue;
        }
        let series: Vec<Series> = ds
            .curves
            .iter()
            .map(|(label, curve)| {
                Series::new(
                    label.clone(),
                    ds.iters
                        .iter()
                        .zip(curve)
                        .map(|(&t, &v)| (t as f64, v))
                        .collect(),
                )
            })
            .collect();
        let opts = SvgOptions {
            title: ds.dataset.clone(),
            x_label: "iteration".into(),
            y_label: "log10 loss".into(),
            log_y: false,
        };
        emit_svg_lines(&series, &opts, &dir.join(format!("compare_{}.svg", ds.dataset)))?;
    }
    Ok(())
}

/// Convenience used by the CLI and tests: the label/config quadruple of the
/// two table-run and two epoch-run variants sharing one base configuration.
pub fn standard_variants<F: Scalar>(
    base_alg1: RunConfig<F>,
    base_alg2: RunConfig<F>,
) -> Vec<Variant<F>> {
    use crate::optimize::GammaMode;
    let mut scga = base_alg1.clone();
    scga.gamma_mode = GammaMode::One;
    let mut alg1 = base_alg1;
    alg1.gamma_mode = GammaMode::Star;
    let mut cgvr = base_alg2.clone();
    cgvr.gamma_mode = GammaMode::One;
    let mut alg2 = base_alg2;
    alg2.gamma_mode = GammaMode::Star;
    vec![
        Variant::new("scga", scga),
        Variant::new("alg1", alg1),
        Variant::new("cgvr", cgvr),
        Variant::new("alg2", alg2),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_ridge;

    fn small_dataset(seed: u64) -> Arc<Dataset<f64>> {
        let (ds, _) = synth_ridge::<f64>(80, 4, 0.2, seed).unwrap();
        Arc::new(ds)
    }

    #[test]
    fn variance_experiment_minimal_config_runs() {
        let ds = small_dataset(1);
        let obj = RidgeObjective::new(ds, 0.05);
        let mut cfg = VarianceExperimentConfig::new(0.05);
        cfg.num_checkpoints = 1;
        cfg.num_batches = 2;
        cfg.batch_size = 4;
        let table = variance_experiment(&obj, &cfg).unwrap();
        assert!(!table.rows.is_empty());
        assert_eq!(table.rows[0].k, 0);
    }

    #[test]
    fn variance_experiment_forced_gamma_one_columns_agree() {
        let ds = small_dataset(2);
        let obj = RidgeObjective::new(ds, 0.05);
        let mut cfg = VarianceExperimentConfig::new(0.05);
        cfg.num_checkpoints = 5;
        cfg.num_batches = 10;
        cfg.batch_size = 8;
        cfg.force_gamma_one = true;
        let table = variance_experiment(&obj, &cfg).unwrap();
        for row in &table.rows {
            assert_eq!(row.var_gamma_star, row.var_gamma_one, "k={}", row.k);
        }
    }

    #[test]
    fn variance_experiment_rejects_bad_config() {
        let mut cfg = VarianceExperimentConfig::<f64>::new(0.05);
        cfg.num_batches = 1;
        let ds = small_dataset(3);
        let obj = RidgeObjective::new(ds, 0.05);
        assert!(variance_experiment(&obj, &cfg).is_err());
    }

    #[test]
    fn single_variant_report_equals_its_trace() {
        let ds = small_dataset(4);
        let mut cfg = RunConfig::alg1(10);
        cfg.batch_size = 8;
        cfg.lambda = 0.05;
        cfg.wolfe = WolfeParams::default().with_alpha_max(1e3);
        let variants = vec![Variant::new("only", cfg.clone())];
        let report =
            compare_convergence(std::slice::from_ref(&ds), &variants, 10, &[9], &CompareOptions::default())
                .unwrap();

        let obj = RidgeObjective::new(ds, 0.05);
        let mut run_cfg = cfg;
        run_cfg.seed = 9;
        run_cfg.eval_every = 1;
        let run = run_alg1(&obj, &run_cfg).unwrap();

        let curve = &report.datasets[0].curves[0].1;
        for (t, &v) in curve.iter().enumerate() {
            let expect = run.trace.loss_at(t).unwrap().max(f64::MIN_POSITIVE).log10();
            assert_eq!(v, expect, "iter {t}");
        }
    }

    #[test]
    fn aggregation_is_reproducible() {
        let ds = small_dataset(5);
        let mut base = RunConfig::alg1(8);
        base.batch_size = 8;
        base.lambda = 0.05;
        base.wolfe = WolfeParams::default().with_alpha_max(1e3);
        let variants = vec![
            Variant::new("a", base.clone()),
            Variant::new("b", {
                let mut c = base;
                c.gamma_mode = crate::optimize::GammaMode::One;
                c
            }),
        ];
        let r1 = compare_convergence(std::slice::from_ref(&ds), &variants, 8, &[1, 2], &CompareOptions::default())
            .unwrap();
        let r2 = compare_convergence(&[ds], &variants, 8, &[1, 2], &CompareOptions::default())
            .unwrap();
        // Wall times differ between executions; the curves and cells (minus
        // wall) must not.
        for (d1, d2) in r1.datasets.iter().zip(&r2.datasets) {
            assert_eq!(d1.curves, d2.curves);
            for (c1, c2) in d1.cells.iter().zip(&d2.cells) {
                assert_eq!(c1.final_log10_loss, c2.final_log10_loss);
                assert_eq!(c1.iters_to_threshold, c2.iters_to_threshold);
            }
        }
    }

    #[test]
    fn aggregation_of_stored_outcomes_is_pure() {
        let ds = small_dataset(6);
        let mut cfg = RunConfig::alg1(6);
        cfg.batch_size = 8;
        cfg.lambda = 0.05;
        cfg.eval_every = 1;
        cfg.wolfe = WolfeParams::default().with_alpha_max(1e3);
        let obj = RidgeObjective::new(ds.clone(), 0.05);
        let outcomes: Vec<RunOutcome> = [3u64, 4]
            .iter()
            .map(|&seed| {
                let mut c = cfg.clone();
                c.seed = seed;
                RunOutcome {
                    dataset: ds.name().to_string(),
                    variant: "only".into(),
                    seed,
                    trace: Some(run_alg1(&obj, &c).unwrap().trace),
                    wall_ms: 1.5,
                }
            })
            .collect();
        let names = vec![ds.name().to_string()];
        let labels = vec!["only".to_string()];
        let opts = CompareOptions::default();
        let a = aggregate_report(&outcomes, &names, &labels, 6, &opts);
        let b = aggregate_report(&outcomes, &names, &labels, 6, &opts);
        assert_eq!(a, b);
    }

    #[test]
    fn svg_minimal_render_structure() {
        let series = vec![Series::new("s", vec![(0.0, 1.0), (1.0, 0.1)])];
        let opts = SvgOptions {
            log_y: true,
            ..Default::default()
        };
        let svg = render_svg_lines(&series, &opts).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.matches("class=\"tick\"").count() >= 4);
    }

    #[test]
    fn svg_output_is_deterministic() {
        let series = vec![
            Series::new("one", vec![(0.0, 3.0), (1.0, 2.0), (2.0, 2.5)]),
            Series::new("two", vec![(0.0, 1.0), (2.0, 4.0)]),
        ];
        let opts = SvgOptions::default();
        let a = render_svg_lines(&series, &opts).unwrap();
        let b = render_svg_lines(&series, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn svg_rejects_bad_series() {
        let opts = SvgOptions::default();
        assert!(render_svg_lines(&[], &opts).is_err());
        let empty = vec![Series::new("hollow", vec![])];
        match render_svg_lines(&empty, &opts) {
            Err(Error::Render(msg)) => assert!(msg.contains("hollow")),
            other => panic!("expected render error, got {other:?}"),
        }
        let nan = vec![Series::new("bad", vec![(0.0, f64::NAN)])];
        assert!(render_svg_lines(&nan, &opts).is_err());
        let log_zero = vec![Series::new("zeroed", vec![(0.0, 0.0)])];
        let log_opts = SvgOptions {
            log_y: true,
            ..Default::default()
        };
        match render_svg_lines(&log_zero, &log_opts) {
            Err(Error::Render(msg)) => assert!(msg.contains("zeroed")),
            other => panic!("expected render error, got {other:?}"),
        }
    }
}
