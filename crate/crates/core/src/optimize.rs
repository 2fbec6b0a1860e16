//! The two stochastic conjugate gradient loops.
//!
//! `run_alg1` keeps an n × d table of the last-seen gradient of every sample
//! (a rolling per-sample checkpoint, SAGA-style). `run_alg2` nests a
//! mini-batch inner loop inside epochs anchored at a fixed point whose full
//! gradient is recomputed once per epoch (SVRG-style). Both draw batches with
//! replacement, take strong-Wolfe steps along PRP-FR conjugate directions,
//! and form the gradient estimate `x̄ − γ ⊙ (ȳ − μ)` with γ either the
//! variance-minimizing per-coordinate coefficient or the γ = 1 baseline.
//!
//! The line search along a direction evaluates the same mini-batch that
//! produced the estimate defining that direction, with the correction term
//! frozen; the very first step (and the first step of every epoch) has no
//! such batch and searches on the full objective instead.

use std::io::{self, Write};
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::estimator::{
    column_mean, control_correction, gamma_star, sample_stats, sample_with_replacement,
    BatchGradients, GammaEstimate, DEFAULT_GAMMA_EPS,
};
use crate::model::{norm2, FiniteSumObjective};
use crate::search::{strong_wolfe, update_direction, DirectionState, WolfeParams, WolfeStatus};
use crate::Scalar;

/// Full mean recomputation interval for the gradient table, bounding the
/// drift of the incremental mean.
const MEAN_REBUILD_INTERVAL: usize = 1000;

/// Runs abort when the full loss exceeds this multiple of the initial loss.
const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    /// Gradient-table loop (per-sample rolling checkpoints).
    Alg1,
    /// Epoch loop (fixed checkpoint per epoch, full gradient at its start).
    Alg2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaMode {
    /// Per-coordinate variance-minimizing coefficient from batch statistics.
    Star,
    /// γ = 1 everywhere: the plain SVRG/SAGA-style baseline estimate.
    One,
}

/// How an epoch of `run_alg2` picks the point it carries forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochOption {
    /// Option I: the last inner iterate.
    LastIterate,
    /// Option II: a uniformly random inner iterate.
    RandomIterate,
}

#[derive(Debug, Clone)]
pub struct RunConfig<F> {
    pub algorithm: Algorithm,
    pub gamma_mode: GammaMode,
    pub batch_size: usize,
    pub wolfe: WolfeParams<F>,
    /// Iteration count for `Alg1`.
    pub max_iters: usize,
    /// Outer epoch count T for `Alg2`.
    pub outer: usize,
    /// Inner iterations m per epoch for `Alg2` (0 is the degenerate
    /// do-nothing epoch).
    pub inner: usize,
    pub option: EpochOption,
    /// Regularization the harness uses when building the objective; the run
    /// functions themselves read the objective only.
    pub lambda: F,
    pub seed: u64,
    /// Full loss/gradient are evaluated into the trace every this many
    /// iterations (epoch ends always record).
    pub eval_every: usize,
    /// Variance floor below which γ falls back to 1.
    pub gamma_eps: F,
    /// Record per-step data (points, directions, search contexts) for
    /// re-verification; off by default.
    pub record_steps: bool,
}

impl<F: Scalar> RunConfig<F> {
    /// Gradient-table run with default parameters.
    pub fn alg1(max_iters: usize) -> Self {
        Self {
            algorithm: Algorithm::Alg1,
            gamma_mode: GammaMode::Star,
            batch_size: 64,
            wolfe: WolfeParams::default(),
            max_iters,
            outer: 0,
            inner: 0,
            option: EpochOption::LastIterate,
            lambda: F::from_f64(1e-3),
            seed: 0,
            eval_every: 1,
            gamma_eps: F::from_f64(DEFAULT_GAMMA_EPS),
            record_steps: false,
        }
    }

    /// Epoch run with default parameters.
    pub fn alg2(outer: usize, inner: usize) -> Self {
        Self {
            algorithm: Algorithm::Alg2,
            max_iters: 0,
            outer,
            inner,
            ..Self::alg1(0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.wolfe.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.gamma_mode == GammaMode::Star && self.batch_size < 2 {
            return Err(Error::InvalidArgument(
                "gamma star needs batch_size >= 2 (sample statistics divide by |S|-1)".into(),
            ));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidArgument("eval_every must be >= 1".into()));
        }
        // NaN must fail this check too.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.gamma_eps > F::zero()) {
            return Err(Error::InvalidArgument("gamma_eps must be positive".into()));
        }
        if self.algorithm == Algorithm::Alg2 && self.outer == 0 {
            return Err(Error::InvalidArgument("alg2 needs outer >= 1".into()));
        }
        Ok(())
    }

    fn expect_algorithm(&self, alg: Algorithm) -> Result<()> {
        if self.algorithm != alg {
            return Err(Error::InvalidArgument(format!(
                "config is for {:?}, not {:?}",
                self.algorithm, alg
            )));
        }
        self.validate()
    }
}

/// Per-sample last-seen gradients with their incrementally maintained mean.
#[derive(Debug, Clone)]
pub struct GradientTable<F> {
    table: Array2<F>,
    mean: Array1<F>,
    updates_since_rebuild: usize,
}

impl<F: Scalar> GradientTable<F> {
    /// Fills the table with `∇f_i(w)` for every sample, streaming the mean.
    pub fn init<O: FiniteSumObjective<F>>(obj: &O, w: &Array1<F>) -> Self {
        let n = obj.n_samples();
        let d = obj.dim();
        let mut table = Array2::zeros((n, d));
        let mut acc = Array1::zeros(d);
        for i in 0..n {
            let g = obj.grad_i(w, i);
            acc += &g;
            table.row_mut(i).assign(&g);
        }
        let mean = acc * (F::one() / F::from_f64(n as f64));
        Self {
            table,
            mean,
            updates_since_rebuild: 0,
        }
    }

    pub fn mean(&self) -> &Array1<F> {
        &self.mean
    }

    pub fn matrix(&self) -> &Array2<F> {
        &self.table
    }

    /// Overwrites the rows of the batch with fresh gradients (rows outside
    /// the batch are untouched) and updates the mean incrementally, before
    /// the overwrite. Duplicate indices contribute once.
    pub fn apply_batch(&mut self, indices: &[usize], new_grads: &Array2<F>) {
        debug_assert_eq!(indices.len(), new_grads.nrows());
        let n_inv = F::one() / F::from_f64(self.table.nrows() as f64);
        let mut pairs: Vec<(usize, usize)> =
            indices.iter().enumerate().map(|(row, &i)| (i, row)).collect();
        pairs.sort_by_key(|p| p.0);
        pairs.dedup_by_key(|p| p.0);
        for (i, row) in pairs {
            let new_row = new_grads.row(row);
            {
                let old_row = self.table.row(i);
                for r in 0..self.mean.len() {
                    self.mean[r] += (new_row[r] - old_row[r]) * n_inv;
                }
            }
            self.table.row_mut(i).assign(&new_row);
        }
        self.updates_since_rebuild += 1;
        if self.updates_since_rebuild >= MEAN_REBUILD_INTERVAL {
            self.recompute_mean();
        }
    }

    /// Recomputes the mean from the full table.
    pub fn recompute_mean(&mut self) {
        self.mean = column_mean(&self.table);
        self.updates_since_rebuild = 0;
    }

    /// Largest relative deviation between the stored mean and a fresh
    /// recomputation (diagnostic).
    pub fn mean_drift(&self) -> F {
        let fresh = column_mean(&self.table);
        let mut worst = F::zero();
        for r in 0..fresh.len() {
            let denom = fresh[r].abs().max(F::one());
            worst = worst.max((self.mean[r] - fresh[r]).abs() / denom);
        }
        worst
    }
}

/// One trace row. All fields are finite; `wall_ms` is excluded from the
/// determinism contract.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub fallback_count: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
}

impl RunTrace {
    pub const CSV_HEADER: &'static str =
        "iter,loss,grad_norm,alpha,beta,gamma_min,gamma_max,fallback_count,wall_ms";

    fn push(&mut self, rec: TraceRecord) {
        debug_assert!(self.records.last().is_none_or(|r| rec.iter > r.iter));
        self.records.push(rec);
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn loss_at(&self, iter: usize) -> Option<f64> {
        self.records.iter().find(|r| r.iter == iter).map(|r| r.loss)
    }

    /// Equality on everything except wall-clock fields.
    pub fn same_path(&self, other: &RunTrace) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.iter == b.iter
                    && a.loss == b.loss
                    && a.grad_norm == b.grad_norm
                    && a.alpha == b.alpha
                    && a.beta == b.beta
                    && a.gamma_min == b.gamma_min
                    && a.gamma_max == b.gamma_max
                    && a.fallback_count == b.fallback_count
            })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.iter,
                r.loss,
                r.grad_norm,
                r.alpha,
                r.beta,
                r.gamma_min,
                r.gamma_max,
                r.fallback_count,
                r.wall_ms
            )?;
        }
        Ok(())
    }
}

/// What the line search at a step evaluated: the full objective, or a frozen
/// mini-batch with its control correction.
#[derive(Debug, Clone)]
pub enum SearchContext<F> {
    Full,
    Batch {
        indices: Vec<usize>,
        correction: Array1<F>,
    },
}

/// Everything needed to re-verify one accepted step from scratch.
#[derive(Debug, Clone)]
pub struct StepRecord<F> {
    pub iter: usize,
    /// Point the step started from.
    pub omega: Array1<F>,
    pub direction: Array1<F>,
    pub alpha: F,
    pub status: WolfeStatus,
    pub context: SearchContext<F>,
    /// Point after the step.
    pub omega_next: Array1<F>,
}

#[derive(Debug, Clone)]
pub struct RunResult<F> {
    pub trace: RunTrace,
    /// Final iterate.
    pub omega: Array1<F>,
    /// Per-step records; empty unless `record_steps` was set.
    pub steps: Vec<StepRecord<F>>,
    /// The run stopped before its iteration budget because the gradient
    /// estimate vanished (no descent direction left).
    pub converged_early: bool,
}

/// Value and directional derivative of the search function at `w + α d`
/// under a [`SearchContext`].
///
/// The batch search function is the control-variate-corrected batch loss
/// along the ray, `f_S(w + α d) − α cᵀd` with the frozen correction
/// `c = γ ⊙ (ȳ − μ)`; its exact derivative is the gradient-estimate slope
/// `(∇f_S(w + α d) − c)ᵀ d`. Keeping value and slope consistent is what
/// makes the strong Wolfe pair satisfiable along every estimate direction
/// (the uncorrected batch loss can slope uphill along a direction that is
/// descent for the estimate). At α = 0 the value is the plain batch loss and
/// the slope is exactly `gᵀd`.
pub fn search_eval<F: Scalar, O: FiniteSumObjective<F>>(
    obj: &O,
    w: &Array1<F>,
    dir: &Array1<F>,
    ctx: &SearchContext<F>,
    alpha: F,
) -> (F, F) {
    let point = if alpha == F::zero() {
        w.clone()
    } else {
        w + &(dir * alpha)
    };
    match ctx {
        SearchContext::Full => {
            let f = obj.loss(&point);
            let slope = obj.full_grad(&point).dot(dir);
            (f, slope)
        }
        SearchContext::Batch {
            indices,
            correction,
        } => {
            let mut f_acc = F::zero();
            let mut g_acc = Array1::zeros(obj.dim());
            for &i in indices {
                f_acc += obj.loss_i(&point, i);
                g_acc += &obj.grad_i(&point, i);
            }
            let inv = F::one() / F::from_f64(indices.len() as f64);
            let f = f_acc * inv - alpha * correction.dot(dir);
            let g_bar = g_acc * inv;
            (f, (&g_bar - correction).dot(dir))
        }
    }
}

fn wall_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn check_divergence(trace: &RunTrace, iter: usize, loss: f64, grad_norm: f64, cap: f64) -> Result<()> {
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(Error::Diverged {
            iter,
            msg: format!("non-finite loss {loss} or gradient norm {grad_norm}"),
            trace: Box::new(trace.clone()),
        });
    }
    if loss > cap {
        return Err(Error::Diverged {
            iter,
            msg: format!("loss {loss} exceeded {DIVERGENCE_FACTOR} x initial"),
            trace: Box::new(trace.clone()),
        });
    }
    Ok(())
}

/// Gradient-table run starting from the origin.
pub fn run_alg1<F: Scalar, O: FiniteSumObjective<F>>(
    obj: &O,
    cfg: &RunConfig<F>,
) -> Result<RunResult<F>> {
    run_alg1_from(obj, &Array1::zeros(obj.dim()), cfg)
}

/// Gradient-table run from an explicit starting point.
///
/// Each iteration: strong-Wolfe step along the current direction (searched on
/// the batch that produced it), a fresh with-replacement batch at the new
/// point, γ from that batch's statistics (or 1), the estimate
/// `x̄ − γ ⊙ (ȳ − μ)` with ȳ read from the table and μ its pre-update mean,
/// the PRP-FR direction update, and finally the table row overwrite plus
/// incremental mean update. `batch_size >= n` replaces sampling with the
/// deterministic full sweep.
pub fn run_alg1_from<F: Scalar, O: FiniteSumObjective<F>>(
    obj: &O,
    w0: &Array1<F>,
    cfg: &RunConfig<F>,
) -> Result<RunResult<F>> {
    cfg.expect_algorithm(Algorithm::Alg1)?;
    let n = obj.n_samples();
    let d = obj.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = Instant::now();

    let mut table = GradientTable::init(obj, w0);
    let mut w = w0.clone();
    let g0 = table.mean().clone();
    let (mut dir, _) = update_direction(&g0, None);
    let mut state = DirectionState::new(g0.clone(), dir.clone());
    let mut ctx = SearchContext::Full;

    let mut trace = RunTrace::default();
    let loss0 = obj.loss(&w).as_f64();
    let gn0 = norm2(&g0).sqrt().as_f64();
    trace.push(TraceRecord {
        iter: 0,
        loss: loss0,
        grad_norm: gn0,
        alpha: 0.0,
        beta: 0.0,
        gamma_min: 1.0,
        gamma_max: 1.0,
        fallback_count: 0,
        wall_ms: wall_ms(start),
    });
    let cap = DIVERGENCE_FACTOR * loss0.max(f64::MIN_POSITIVE);
    check_divergence(&trace, 0, loss0, gn0, cap)?;

    let mut steps = Vec::new();
    let mut converged_early = false;

    for k in 1..=cfg.max_iters {
        let search = strong_wolfe(|a| search_eval(obj, &w, &dir, &ctx, a), &cfg.wolfe);
        let res = match search {
            Ok(r) => r,
            Err(Error::NotDescentDirection { .. }) => {
                converged_early = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let alpha = res.alpha;
        let w_next = &w + &(&dir * alpha);

        let indices = sample_with_replacement(&mut rng, n, cfg.batch_size);
        let bg = BatchGradients::from_table_rows(obj, &w_next, table.matrix(), &indices)?;
        let gamma = match cfg.gamma_mode {
            GammaMode::Star => {
                let (s_xy, s_y2) = sample_stats(&bg)?;
                gamma_star(s_xy, s_y2, cfg.gamma_eps)
            }
            GammaMode::One => GammaEstimate::ones(d),
        };
        let mu_prev = table.mean().clone();
        let y_bar = bg.y_bar();
        let correction = control_correction(&gamma, &y_bar, &mu_prev);
        let g_next = &bg.x_bar() - &correction;
        let (dir_next, beta) = update_direction(&g_next, Some(&state));
        log::trace!(
            "iter {k}: descent ratio {}",
            (g_next.dot(&dir_next) / norm2(&g_next).max(F::min_positive_value())).as_f64()
        );

        table.apply_batch(&indices, bg.x_grads());

        if cfg.record_steps {
            steps.push(StepRecord {
                iter: k,
                omega: w.clone(),
                direction: dir.clone(),
                alpha,
                status: res.status,
                context: ctx.clone(),
                omega_next: w_next.clone(),
            });
        }

        w = w_next;
        state = DirectionState::new(g_next, dir_next.clone());
        dir = dir_next;
        ctx = SearchContext::Batch {
            indices,
            correction,
        };

        if k.is_multiple_of(cfg.eval_every) || k == cfg.max_iters {
            let loss = obj.loss(&w).as_f64();
            let gn = norm2(&obj.full_grad(&w)).sqrt().as_f64();
            let (gmin, gmax) = gamma.gamma_range();
            trace.push(TraceRecord {
                iter: k,
                loss,
                grad_norm: gn,
                alpha: alpha.as_f64(),
                beta: beta.as_f64(),
                gamma_min: gmin.as_f64(),
                gamma_max: gmax.as_f64(),
                fallback_count: gamma.fallback_count(),
                wall_ms: wall_ms(start),
            });
            check_divergence(&trace, k, loss, gn, cap)?;
        }
    }

    Ok(RunResult {
        trace,
        omega: w,
        steps,
        converged_early,
    })
}

/// Epoch run starting from the origin.
pub fn run_alg2<F: Scalar, O: FiniteSumObjective<F>>(
    obj: &O,
    cfg: &RunConfig<F>,
) -> Result<RunResult<F>> {
    run_alg2_from(obj, &Array1::zeros(obj.dim()), cfg)
}

/// Epoch run from an explicit starting point.
///
/// Every epoch recomputes the full gradient μ at its anchor, seeds the inner
/// loop with the carried-over estimate `h`, and runs m inner iterations whose
/// checkpoint gradients are taken at the anchor. The first inner search of an
/// epoch evaluates the full objective (the carried estimate has no batch);
/// if the carried direction is not a descent direction for the exact
/// gradient, it restarts from steepest descent. Trace rows are indexed by the
/// flat inner-iteration count and epoch ends always record the carried point.
pub fn run_alg2_from<F: Scalar, O: FiniteSumObjective<F>>(
    obj: &O,
    w0: &Array1<F>,
    cfg: &RunConfig<F>,
) -> Result<RunResult<F>> {
    cfg.expect_algorithm(Algorithm::Alg2)?;
    let n = obj.n_samples();
    let d = obj.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = Instant::now();

    let mut x = w0.clone();
    let mut h = obj.full_grad(&x);

    let mut trace = RunTrace::default();
    let loss0 = obj.loss(&x).as_f64();
    let gn0 = norm2(&h).sqrt().as_f64();
    trace.push(TraceRecord {
        iter: 0,
        loss: loss0,
        grad_norm: gn0,
        alpha: 0.0,
        beta: 0.0,
        gamma_min: 1.0,
        gamma_max: 1.0,
        fallback_count: 0,
        wall_ms: wall_ms(start),
    });
    let cap = DIVERGENCE_FACTOR * loss0.max(f64::MIN_POSITIVE);
    check_divergence(&trace, 0, loss0, gn0, cap)?;

    let mut steps = Vec::new();
    let mut converged_early = false;
    let mut global = 0usize;

    'outer: for l in 1..=cfg.outer {
        let mu = if l == 1 { h.clone() } else { obj.full_grad(&x) };
        let anchor = x.clone();
        let mut g = h.clone();
        let mut dir = g.mapv(|v| -v);
        if mu.dot(&dir) >= F::zero() {
            // Carried estimate points uphill for the exact gradient; restart.
            g = mu.clone();
            dir = mu.mapv(|v| -v);
        }
        let mut state = DirectionState::new(g.clone(), dir.clone());
        let mut ctx = SearchContext::Full;
        let mut w = x.clone();
        let mut inner_iterates: Vec<Array1<F>> = Vec::new();
        let mut last_step = (0.0f64, 0.0f64, 1.0f64, 1.0f64, 0usize);

        for k in 1..=cfg.inner {
            global += 1;
            let search = strong_wolfe(|a| search_eval(obj, &w, &dir, &ctx, a), &cfg.wolfe);
            let res = match search {
                Ok(r) => r,
                Err(Error::NotDescentDirection { .. }) => {
                    x = w;
                    converged_early = true;
                    break 'outer;
                }
                Err(e) => return Err(e),
            };
            let alpha = res.alpha;
            let w_next = &w + &(&dir * alpha);

            let indices = sample_with_replacement(&mut rng, n, cfg.batch_size);
            let bg = BatchGradients::at_points(obj, &w_next, &anchor, &indices)?;
            let gamma = match cfg.gamma_mode {
                GammaMode::Star => {
                    let (s_xy, s_y2) = sample_stats(&bg)?;
                    gamma_star(s_xy, s_y2, cfg.gamma_eps)
                }
                GammaMode::One => GammaEstimate::ones(d),
            };
            let y_bar = bg.y_bar();
            let correction = control_correction(&gamma, &y_bar, &mu);
            let g_next = &bg.x_bar() - &correction;
            let (dir_next, beta) = update_direction(&g_next, Some(&state));
            log::trace!(
                "epoch {l} inner {k}: descent ratio {}",
                (g_next.dot(&dir_next) / norm2(&g_next).max(F::min_positive_value())).as_f64()
            );

            if cfg.record_steps {
                steps.push(StepRecord {
                    iter: global,
                    omega: w.clone(),
                    direction: dir.clone(),
                    alpha,
                    status: res.status,
                    context: ctx.clone(),
                    omega_next: w_next.clone(),
                });
            }

            w = w_next;
            g = g_next;
            state = DirectionState::new(g.clone(), dir_next.clone());
            dir = dir_next;
            ctx = SearchContext::Batch {
                indices,
                correction,
            };
            if cfg.option == EpochOption::RandomIterate {
                inner_iterates.push(w.clone());
            }

            let (gmin, gmax) = gamma.gamma_range();
            last_step = (
                alpha.as_f64(),
                beta.as_f64(),
                gmin.as_f64(),
                gmax.as_f64(),
                gamma.fallback_count(),
            );

            if k < cfg.inner && global.is_multiple_of(cfg.eval_every) {
                let loss = obj.loss(&w).as_f64();
                let gn = norm2(&obj.full_grad(&w)).sqrt().as_f64();
                trace.push(TraceRecord {
                    iter: global,
                    loss,
                    grad_norm: gn,
                    alpha: last_step.0,
                    beta: last_step.1,
                    gamma_min: last_step.2,
                    gamma_max: last_step.3,
                    fallback_count: last_step.4,
                    wall_ms: wall_ms(start),
                });
                check_divergence(&trace, global, loss, gn, cap)?;
            }
        }

        h = g;
        if cfg.inner > 0 {
            x = match cfg.option {
                EpochOption::LastIterate => w,
                EpochOption::RandomIterate => {
                    inner_iterates[rng.random_range(0..inner_iterates.len())].clone()
                }
            };
            let loss = obj.loss(&x).as_f64();
            let gn = norm2(&obj.full_grad(&x)).sqrt().as_f64();
            trace.push(TraceRecord {
                iter: global,
                loss,
                grad_norm: gn,
                alpha: last_step.0,
                beta: last_step.1,
                gamma_min: last_step.2,
                gamma_max: last_step.3,
                fallback_count: last_step.4,
                wall_ms: wall_ms(start),
            });
            check_divergence(&trace, global, loss, gn, cap)?;
        }
    }

    Ok(RunResult {
        trace,
        omega: x,
        steps,
        converged_early,
    })
}

/// A deterministic full-gradient PRP-FR conjugate gradient run.
#[derive(Debug, Clone)]
pub struct CgRun<F> {
    /// Visited points ω_0, ω_1, ...
    pub iterates: Vec<Array1<F>>,
    /// ⟨g_k, d_k⟩ / ‖g_k‖² per iterate (−1 at k = 0).
    pub descent_ratios: Vec<F>,
    /// Stopped before the iteration budget at the gradient tolerance.
    pub converged_early: bool,
}

/// Full-batch PRP-FR conjugate gradient with the strong Wolfe search.
///
/// Stops early once `‖∇f‖ <= grad_tol_rel (1 + ‖∇f(w0)‖)`.
pub fn run_full_cg<F: Scalar, O: FiniteSumObjective<F>>(
    obj: &O,
    w0: &Array1<F>,
    max_iters: usize,
    wolfe: &WolfeParams<F>,
    grad_tol_rel: f64,
) -> Result<CgRun<F>> {
    wolfe.validate()?;
    let mut w = w0.clone();
    let mut g = obj.full_grad(&w);
    let tol = F::from_f64(grad_tol_rel) * (F::one() + norm2(&g).sqrt());
    let (mut dir, _) = update_direction(&g, None);
    let mut state = DirectionState::new(g.clone(), dir.clone());

    let mut iterates = vec![w.clone()];
    let mut ratios = vec![g.dot(&dir) / norm2(&g).max(F::min_positive_value())];
    let mut converged_early = false;

    for _ in 1..=max_iters {
        if norm2(&g).sqrt() <= tol {
            converged_early = true;
            break;
        }
        let ctx = SearchContext::Full;
        let res = match strong_wolfe(|a| search_eval(obj, &w, &dir, &ctx, a), wolfe) {
            Ok(r) => r,
            Err(Error::NotDescentDirection { .. }) => {
                converged_early = true;
                break;
            }
            Err(e) => return Err(e),
        };
        w = &w + &(&dir * res.alpha);
        g = obj.full_grad(&w);
        let g2 = norm2(&g);
        if !g2.is_finite() {
            return Err(Error::Numeric("full CG produced non-finite gradient".into()));
        }
        let (dir_next, _) = update_direction(&g, Some(&state));
        state = DirectionState::new(g.clone(), dir_next.clone());
        dir = dir_next;
        iterates.push(w.clone());
        ratios.push(g.dot(&dir) / g2.max(F::min_positive_value()));
    }

    Ok(CgRun {
        iterates,
        descent_ratios: ratios,
        converged_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_ridge;
    use crate::model::RidgeObjective;
    use ndarray::array;
    use std::sync::Arc;

    fn small_objective(n: usize, d: usize, seed: u64, lambda: f64) -> RidgeObjective<f64> {
        let (ds, _) = synth_ridge::<f64>(n, d, 0.1, seed).unwrap();
        RidgeObjective::new(Arc::new(ds), lambda)
    }

    fn test_wolfe() -> WolfeParams<f64> {
        WolfeParams::default().with_alpha_max(1e3)
    }

    #[test]
    fn table_rows_follow_batch_and_mean_stays_consistent() {
        let obj = small_objective(20, 3, 1, 0.1);
        let w0 = Array1::zeros(3);
        let mut table = GradientTable::init(&obj, &w0);

        let w1 = array![0.5, -0.25, 0.1];
        let indices = vec![3, 7, 3, 11];
        let bg = BatchGradients::from_table_rows(&obj, &w1, table.matrix(), &indices).unwrap();
        let before = table.matrix().clone();
        table.apply_batch(&indices, bg.x_grads());

        for i in 0..20 {
            if indices.contains(&i) {
                let expect = obj.grad_i(&w1, i);
                assert_eq!(table.matrix().row(i), expect.view());
            } else {
                assert_eq!(table.matrix().row(i), before.row(i));
            }
        }
        assert!(table.mean_drift() < 1e-8, "drift {}", table.mean_drift());
    }

    #[test]
    fn table_mean_drift_stays_bounded_over_many_updates() {
        let obj = small_objective(30, 4, 2, 0.1);
        let mut table = GradientTable::init(&obj, &Array1::zeros(4));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for step in 0..500 {
            let w = Array1::from_iter((0..4).map(|j| ((step + j) as f64 * 0.01).sin()));
            let idx = sample_with_replacement(&mut rng, 30, 6);
            let bg = BatchGradients::from_table_rows(&obj, &w, table.matrix(), &idx).unwrap();
            table.apply_batch(&idx, bg.x_grads());
        }
        assert!(table.mean_drift() <= 1e-8, "drift {}", table.mean_drift());
    }

    #[test]
    fn alg1_is_deterministic() {
        let obj = small_objective(50, 4, 3, 0.05);
        let mut cfg = RunConfig::alg1(15);
        cfg.batch_size = 8;
        cfg.wolfe = test_wolfe();
        cfg.seed = 42;
        let a = run_alg1(&obj, &cfg).unwrap();
        let b = run_alg1(&obj, &cfg).unwrap();
        assert!(a.trace.same_path(&b.trace));
        assert_eq!(a.omega, b.omega);
    }

    #[test]
    fn alg2_is_deterministic() {
        let obj = small_objective(50, 4, 4, 0.05);
        let mut cfg = RunConfig::alg2(4, 6);
        cfg.batch_size = 8;
        cfg.wolfe = test_wolfe();
        cfg.seed = 7;
        let a = run_alg2(&obj, &cfg).unwrap();
        let b = run_alg2(&obj, &cfg).unwrap();
        assert!(a.trace.same_path(&b.trace));
        assert_eq!(a.omega, b.omega);
    }

    #[test]
    fn alg1_full_batch_matches_deterministic_cg() {
        let obj = small_objective(40, 5, 5, 0.1);
        let mut cfg = RunConfig::alg1(6);
        cfg.batch_size = 40; // full sweep
        cfg.gamma_mode = GammaMode::One;
        cfg.wolfe = test_wolfe();
        cfg.record_steps = true;
        let run = run_alg1(&obj, &cfg).unwrap();

        let cg = run_full_cg(&obj, &Array1::zeros(5), 6, &test_wolfe(), 0.0).unwrap();
        for (step, cg_w) in run.steps.iter().zip(cg.iterates.iter().skip(1)) {
            for j in 0..5 {
                let diff = (step.omega_next[j] - cg_w[j]).abs();
                assert!(
                    diff <= 1e-8 * (1.0 + cg_w[j].abs()),
                    "iter {} coord {j}: {} vs {}",
                    step.iter,
                    step.omega_next[j],
                    cg_w[j]
                );
            }
        }
    }

    #[test]
    fn alg2_empty_inner_loop_returns_start() {
        let obj = small_objective(20, 3, 6, 0.1);
        let mut cfg = RunConfig::alg2(1, 0);
        cfg.wolfe = test_wolfe();
        let run = run_alg2(&obj, &cfg).unwrap();
        assert_eq!(run.omega, Array1::zeros(3));
        assert_eq!(run.trace.records.len(), 1);
        assert_eq!(run.trace.records[0].iter, 0);
    }

    #[test]
    fn alg1_reduces_loss_substantially() {
        let obj = small_objective(200, 10, 7, 0.1);
        let mut cfg = RunConfig::alg1(100);
        cfg.batch_size = 32;
        cfg.wolfe = test_wolfe();
        let run = run_alg1(&obj, &cfg).unwrap();
        let wstar = obj.exact_minimizer().unwrap();
        let fstar = obj.loss(&wstar);
        let gap0 = run.trace.records[0].loss - fstar;
        let gap_end = run.trace.last().unwrap().loss - fstar;
        assert!(
            gap_end <= 1e-4 * gap0,
            "gap went from {gap0} to {gap_end} only"
        );
    }

    #[test]
    fn alg2_option_two_runs() {
        let obj = small_objective(40, 3, 8, 0.1);
        let mut cfg = RunConfig::alg2(3, 5);
        cfg.batch_size = 8;
        cfg.option = EpochOption::RandomIterate;
        cfg.wolfe = test_wolfe();
        let run = run_alg2(&obj, &cfg).unwrap();
        assert_eq!(run.trace.last().unwrap().iter, 15);
    }

    #[test]
    fn star_mode_requires_batch_of_two() {
        let mut cfg = RunConfig::<f64>::alg1(5);
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());
        cfg.gamma_mode = GammaMode::One;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn full_cg_descent_ratios_in_lemma_interval() {
        let obj = small_objective(60, 6, 9, 0.2);
        let wolfe = test_wolfe();
        let cg = run_full_cg(&obj, &Array1::zeros(6), 40, &wolfe, 1e-10).unwrap();
        let s2 = 0.1;
        let lo = -1.0 / (1.0 - s2);
        let hi = (2.0 * s2 - 1.0) / (1.0 - s2);
        for (k, r) in cg.descent_ratios.iter().enumerate() {
            assert!(
                (lo - 1e-9..=hi + 1e-9).contains(r),
                "ratio {r} at iterate {k} outside [{lo}, {hi}]"
            );
        }
    }

    #[test]
    fn diverged_runs_carry_partial_traces() {
        // A wolfe setup that forces huge fixed steps: alpha_min enormous so
        // every accepted step is clamped far beyond the minimizer.
        let obj = small_objective(30, 3, 10, 0.1);
        let mut cfg = RunConfig::alg1(50);
        cfg.batch_size = 4;
        cfg.wolfe = WolfeParams {
            sigma1: 1e-4,
            sigma2: 0.1,
            alpha_init: 1e6,
            alpha_min: 1e6,
            alpha_max: 1e6,
            max_evals: 1,
        };
        match run_alg1(&obj, &cfg) {
            Err(Error::Diverged { iter, trace, .. }) => {
                assert!(iter >= 1);
                assert!(!trace.records.is_empty());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
