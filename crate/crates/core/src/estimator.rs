//! The minimum-variance control-variate gradient estimate.
//!
//! For a mini-batch S drawn with replacement, let `X_j` be the per-sample
//! gradients at the current point and `Y_j` the gradients at a checkpoint.
//! The estimate is `g = x̄ − γ ⊙ (ȳ − μ)` where `μ` is the exact mean of the
//! checkpoint gradients and `γ` is chosen per coordinate as
//! `s_xy / s_y²` — the ratio of sample covariance to sample variance — which
//! minimizes the variance of the estimate. `γ = 1` recovers the SVRG/SAGA
//! estimate, `γ = 0` the plain mini-batch gradient.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::FiniteSumObjective;
use crate::Scalar;

/// Coordinates with sample variance below this default are handled by the
/// γ = 1 fallback instead of a near-zero division.
pub const DEFAULT_GAMMA_EPS: f64 = 1e-12;

/// Per-sample gradients of one mini-batch at two points.
///
/// Row `j` of `x_grads` is the gradient of sample `indices[j]` at the current
/// point; row `j` of `y_grads` is its gradient at the checkpoint. Duplicate
/// indices are allowed (sampling is with replacement).
#[derive(Debug, Clone)]
pub struct BatchGradients<F> {
    x_grads: Array2<F>,
    y_grads: Array2<F>,
    indices: Vec<usize>,
}

impl<F: Scalar> BatchGradients<F> {
    pub fn new(x_grads: Array2<F>, y_grads: Array2<F>, indices: Vec<usize>) -> Result<Self> {
        if x_grads.dim() != y_grads.dim() {
            return Err(Error::InvalidArgument(format!(
                "gradient blocks disagree in shape: {:?} vs {:?}",
                x_grads.dim(),
                y_grads.dim()
            )));
        }
        if indices.len() != x_grads.nrows() {
            return Err(Error::InvalidArgument(format!(
                "index count {} does not match row count {}",
                indices.len(),
                x_grads.nrows()
            )));
        }
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        Ok(Self {
            x_grads: standard_layout(x_grads),
            y_grads: standard_layout(y_grads),
            indices,
        })
    }

    /// Evaluates both gradient blocks at explicit points: `X_j = ∇f_j(w)`,
    /// `Y_j = ∇f_j(checkpoint)`.
    pub fn at_points<O: FiniteSumObjective<F>>(
        obj: &O,
        w: &Array1<F>,
        checkpoint: &Array1<F>,
        indices: &[usize],
    ) -> Result<Self> {
        let d = obj.dim();
        let mut x_grads = Array2::zeros((indices.len(), d));
        let mut y_grads = Array2::zeros((indices.len(), d));
        for (row, &i) in indices.iter().enumerate() {
            x_grads.row_mut(row).assign(&obj.grad_i(w, i));
            y_grads.row_mut(row).assign(&obj.grad_i(checkpoint, i));
        }
        Self::new(x_grads, y_grads, indices.to_vec())
    }

    /// Evaluates `X_j = ∇f_j(w)` and reads `Y_j` out of a stored per-sample
    /// gradient table (row per sample).
    pub fn from_table_rows<O: FiniteSumObjective<F>>(
        obj: &O,
        w: &Array1<F>,
        table: &Array2<F>,
        indices: &[usize],
    ) -> Result<Self> {
        let d = obj.dim();
        let mut x_grads = Array2::zeros((indices.len(), d));
        let mut y_grads = Array2::zeros((indices.len(), d));
        for (row, &i) in indices.iter().enumerate() {
            x_grads.row_mut(row).assign(&obj.grad_i(w, i));
            y_grads.row_mut(row).assign(&table.row(i));
        }
        Self::new(x_grads, y_grads, indices.to_vec())
    }

    pub fn batch_size(&self) -> usize {
        self.indices.len()
    }

    pub fn dim(&self) -> usize {
        self.x_grads.ncols()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn x_grads(&self) -> &Array2<F> {
        &self.x_grads
    }

    pub fn y_grads(&self) -> &Array2<F> {
        &self.y_grads
    }

    /// Mean of the current-point gradients over the batch.
    pub fn x_bar(&self) -> Array1<F> {
        column_mean(&self.x_grads)
    }

    /// Mean of the checkpoint gradients over the batch.
    pub fn y_bar(&self) -> Array1<F> {
        column_mean(&self.y_grads)
    }
}

/// The statistics kernels read rows as slices; row-major layout guarantees
/// that for any input.
fn standard_layout<F: Scalar>(a: Array2<F>) -> Array2<F> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Row mean accumulated in row order (keeps runs reproducible bit for bit).
pub(crate) fn column_mean<F: Scalar>(m: &Array2<F>) -> Array1<F> {
    let mut acc = Array1::zeros(m.ncols());
    for row in m.rows() {
        acc += &row;
    }
    acc * (F::one() / F::from_f64(m.nrows() as f64))
}

/// Per-coordinate control-variate coefficient with its diagnostics.
#[derive(Debug, Clone)]
pub struct GammaEstimate<F> {
    /// γ per coordinate.
    pub gamma: Array1<F>,
    /// Sample covariance per coordinate.
    pub s_xy: Array1<F>,
    /// Sample variance (of the checkpoint gradients) per coordinate.
    pub s_y2: Array1<F>,
    /// Coordinates where the variance fell below eps and γ was forced to 1.
    pub fallback: Vec<bool>,
}

impl<F: Scalar> GammaEstimate<F> {
    /// The γ = 1 estimate (SVRG/SAGA coefficient) with empty diagnostics.
    pub fn ones(d: usize) -> Self {
        Self::constant(d, F::one())
    }

    /// A fixed coefficient on every coordinate.
    pub fn constant(d: usize, value: F) -> Self {
        Self {
            gamma: Array1::from_elem(d, value),
            s_xy: Array1::zeros(d),
            s_y2: Array1::zeros(d),
            fallback: vec![false; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn fallback_count(&self) -> usize {
        self.fallback.iter().filter(|&&b| b).count()
    }

    /// (min, max) of the coefficient vector.
    pub fn gamma_range(&self) -> (F, F) {
        let mut lo = F::infinity();
        let mut hi = F::neg_infinity();
        for &g in self.gamma.iter() {
            lo = lo.min(g);
            hi = hi.max(g);
        }
        (lo, hi)
    }
}

/// Per-coordinate sample covariance of (X, Y) and sample variance of Y over
/// the batch, both with the 1/(|S|−1) divisor.
///
/// Errors when the batch has fewer than two rows.
pub fn sample_stats<F: Scalar>(bg: &BatchGradients<F>) -> Result<(Array1<F>, Array1<F>)> {
    let s = bg.batch_size();
    if s < 2 {
        return Err(Error::InvalidArgument(format!(
            "sample statistics need a batch of at least 2, got {s}"
        )));
    }
    let x_bar = bg.x_bar();
    let y_bar = bg.y_bar();
    let d = bg.dim();
    let xb = x_bar.as_slice().expect("standard layout");
    let yb = y_bar.as_slice().expect("standard layout");
    let mut s_xy = vec![F::zero(); d];
    let mut s_y2 = vec![F::zero(); d];
    for j in 0..s {
        let x_row = bg.x_grads.row(j);
        let y_row = bg.y_grads.row(j);
        let xr = x_row.as_slice().expect("contiguous row");
        let yr = y_row.as_slice().expect("contiguous row");
        for r in 0..d {
            let dx = xr[r] - xb[r];
            let dy = yr[r] - yb[r];
            s_xy[r] = s_xy[r] + dx * dy;
            s_y2[r] = s_y2[r] + dy * dy;
        }
    }
    let inv = F::one() / F::from_f64((s - 1) as f64);
    Ok((
        Array1::from_vec(s_xy) * inv,
        Array1::from_vec(s_y2) * inv,
    ))
}

/// Variance-minimizing coefficient `γ[r] = s_xy[r] / s_y2[r]`, falling back
/// to γ = 1 wherever `s_y2[r] < eps`.
pub fn gamma_star<F: Scalar>(s_xy: Array1<F>, s_y2: Array1<F>, eps: F) -> GammaEstimate<F> {
    assert_eq!(s_xy.len(), s_y2.len(), "stat vectors disagree in length");
    assert!(eps > F::zero(), "eps must be positive");
    let d = s_xy.len();
    let mut gamma = Array1::zeros(d);
    let mut fallback = vec![false; d];
    for r in 0..d {
        if s_y2[r] >= eps {
            gamma[r] = s_xy[r] / s_y2[r];
        } else {
            gamma[r] = F::one();
            fallback[r] = true;
        }
    }
    GammaEstimate {
        gamma,
        s_xy,
        s_y2,
        fallback,
    }
}

/// The correction term `γ ⊙ (ȳ − μ)` subtracted from the batch gradient.
pub fn control_correction<F: Scalar>(
    gamma: &GammaEstimate<F>,
    y_bar: &Array1<F>,
    checkpoint_mean: &Array1<F>,
) -> Array1<F> {
    &gamma.gamma * &(y_bar - checkpoint_mean)
}

/// The full estimate `g = x̄ − γ ⊙ (ȳ − μ)`.
///
/// With γ = 1 this is exactly the SVRG/SAGA estimate; with ȳ = μ the
/// correction vanishes and the plain batch gradient remains.
pub fn control_variate_estimate<F: Scalar>(
    bg: &BatchGradients<F>,
    checkpoint_mean: &Array1<F>,
    gamma: &GammaEstimate<F>,
) -> Array1<F> {
    assert_eq!(checkpoint_mean.len(), bg.dim(), "checkpoint mean dimension");
    assert_eq!(gamma.dim(), bg.dim(), "gamma dimension");
    let x_bar = bg.x_bar();
    let y_bar = bg.y_bar();
    &x_bar - &control_correction(gamma, &y_bar, checkpoint_mean)
}

/// Draws `size` indices from `0..n` independently and uniformly (duplicates
/// allowed). `size == n` is the deterministic full sweep `0..n`.
pub fn sample_with_replacement<R: Rng>(rng: &mut R, n: usize, size: usize) -> Vec<usize> {
    if size >= n {
        return (0..n).collect();
    }
    (0..size).map(|_| rng.random_range(0..n)).collect()
}

/// Empirical per-coordinate variances of the three estimates at a fixed pair
/// of points, over freshly drawn batches.
#[derive(Debug, Clone)]
pub struct VarianceCheck<F> {
    /// Variance of the γ = γ* estimate.
    pub var_gamma_star: Array1<F>,
    /// Variance of the γ = 1 estimate.
    pub var_gamma_one: Array1<F>,
    /// Variance of the plain batch gradient x̄.
    pub var_plain: Array1<F>,
}

impl<F: Scalar> VarianceCheck<F> {
    pub fn totals(&self) -> (F, F, F) {
        (
            self.var_gamma_star.sum(),
            self.var_gamma_one.sum(),
            self.var_plain.sum(),
        )
    }
}

/// Monte-Carlo variance comparison of the three estimates at fixed
/// (current point, checkpoint). Batches are drawn with replacement; the
/// checkpoint mean is the exact full gradient at `phi`. Variances are
/// population variances over the trials, per coordinate.
pub fn mc_variance_check<F: Scalar, O: FiniteSumObjective<F>>(
    obj: &O,
    w: &Array1<F>,
    phi: &Array1<F>,
    batch_size: usize,
    trials: usize,
    seed: u64,
) -> Result<VarianceCheck<F>> {
    if trials < 100 {
        return Err(Error::InvalidArgument(format!(
            "variance check needs at least 100 trials, got {trials}"
        )));
    }
    if batch_size < 2 {
        return Err(Error::InvalidArgument(
            "variance check needs batch_size >= 2".into(),
        ));
    }
    let d = obj.dim();
    let n = obj.n_samples();
    let checkpoint_mean = obj.full_grad(phi);
    let eps = F::from_f64(DEFAULT_GAMMA_EPS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut star = VarianceAccumulator::new(d);
    let mut one = VarianceAccumulator::new(d);
    let mut plain = VarianceAccumulator::new(d);
    let ones = GammaEstimate::ones(d);

    for _ in 0..trials {
        let idx = sample_with_replacement(&mut rng, n, batch_size);
        let bg = BatchGradients::at_points(obj, w, phi, &idx)?;
        let (s_xy, s_y2) = sample_stats(&bg)?;
        let gamma = gamma_star(s_xy, s_y2, eps);
        star.push(&control_variate_estimate(&bg, &checkpoint_mean, &gamma));
        one.push(&control_variate_estimate(&bg, &checkpoint_mean, &ones));
        plain.push(&bg.x_bar());
    }

    Ok(VarianceCheck {
        var_gamma_star: star.population_variance(),
        var_gamma_one: one.population_variance(),
        var_plain: plain.population_variance(),
    })
}

/// Streaming per-coordinate mean/variance (Welford).
pub(crate) struct VarianceAccumulator<F> {
    count: usize,
    mean: Array1<F>,
    m2: Array1<F>,
}

impl<F: Scalar> VarianceAccumulator<F> {
    pub(crate) fn new(d: usize) -> Self {
        Self {
            count: 0,
            mean: Array1::zeros(d),
            m2: Array1::zeros(d),
        }
    }

    pub(crate) fn push(&mut self, v: &Array1<F>) {
        self.count += 1;
        let inv = F::one() / F::from_f64(self.count as f64);
        for r in 0..v.len() {
            let delta = v[r] - self.mean[r];
            self.mean[r] += delta * inv;
            self.m2[r] += delta * (v[r] - self.mean[r]);
        }
    }

    pub(crate) fn population_variance(&self) -> Array1<F> {
        let inv = F::one() / F::from_f64(self.count.max(1) as f64);
        &self.m2 * inv
    }
}
