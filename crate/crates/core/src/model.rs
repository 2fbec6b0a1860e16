//! Finite-sum objectives: the generic interface plus the ridge regression
//! instance used throughout the experiments.

use std::sync::Arc;

use ndarray::{Array1, Array2};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::Scalar;

/// A finite-sum objective `f(w) = (1/n) Σ_i f_i(w)`.
///
/// `loss_i`/`grad_i` index individual samples; the provided `loss`/`full_grad`
/// average them. Implementations may override the aggregates with faster
/// algebra as long as they stay within 1e-10 relative of the averages.
pub trait FiniteSumObjective<F: Scalar>: Sync {
    fn n_samples(&self) -> usize;

    fn dim(&self) -> usize;

    /// Loss of sample `i` at `w`. Panics if `i >= n_samples()`.
    fn loss_i(&self, w: &Array1<F>, i: usize) -> F;

    /// Gradient of sample `i` at `w`. Panics if `i >= n_samples()`.
    fn grad_i(&self, w: &Array1<F>, i: usize) -> Array1<F>;

    fn loss(&self, w: &Array1<F>) -> F {
        let n = self.n_samples();
        let mut acc = F::zero();
        for i in 0..n {
            acc += self.loss_i(w, i);
        }
        acc / F::from_f64(n as f64)
    }

    fn full_grad(&self, w: &Array1<F>) -> Array1<F> {
        let n = self.n_samples();
        let mut acc = Array1::zeros(self.dim());
        for i in 0..n {
            acc += &self.grad_i(w, i);
        }
        acc * (F::one() / F::from_f64(n as f64))
    }
}

/// Ridge regression: `f_i(w) = (y_i − x_i·w)² + λ‖w‖²`.
///
/// The regularizer is part of every per-sample term, so each `f_i` is
/// strongly convex on its own and the average equals the usual ridge loss.
#[derive(Debug, Clone)]
pub struct RidgeObjective<F> {
    data: Arc<Dataset<F>>,
    lambda: F,
}

impl<F: Scalar> RidgeObjective<F> {
    pub fn new(data: Arc<Dataset<F>>, lambda: F) -> Self {
        assert!(
            lambda >= F::zero() && lambda.is_finite(),
            "lambda must be a finite nonnegative real"
        );
        Self { data, lambda }
    }

    pub fn lambda(&self) -> F {
        self.lambda
    }

    pub fn data(&self) -> &Arc<Dataset<F>> {
        &self.data
    }

    /// Strong-convexity and smoothness constants (mu, L).
    ///
    /// The per-sample Hessian is `2 x_i x_iᵀ + 2λI`, hence `mu = 2λ` and
    /// `L = 2 max_i ‖x_i‖² + 2λ`. Warns when λ = 0 (mu degenerates to 0).
    pub fn convexity_constants(&self) -> (F, F) {
        if self.lambda == F::zero() {
            log::warn!("lambda = 0: strong convexity constant mu is 0");
        }
        let two = F::from_f64(2.0);
        let mu = two * self.lambda;
        let mut max_norm2 = F::zero();
        for row in self.data.features().rows() {
            max_norm2 = max_norm2.max(row.dot(&row));
        }
        let l = two * max_norm2 + two * self.lambda;
        (mu, l)
    }

    /// Direct dense solve of the normal equations
    /// `((2/n) XᵀX + 2λI) w = (2/n) Xᵀ y`.
    ///
    /// The result's full gradient has norm at most `1e-8 (1 + ‖y‖)`;
    /// violating that (ill-conditioning, λ = 0 with rank-deficient X)
    /// is reported as a numeric error.
    pub fn exact_minimizer(&self) -> Result<Array1<F>> {
        let x = self.data.features();
        let y = self.data.targets();
        let (n, d) = x.dim();
        let two_over_n = F::from_f64(2.0 / n as f64);
        let two = F::from_f64(2.0);

        let mut a = x.t().dot(x) * two_over_n;
        for j in 0..d {
            a[(j, j)] += two * self.lambda;
        }
        let b = x.t().dot(y) * two_over_n;
        let w = cholesky_solve(a, b)?;

        let grad_norm = norm2(&self.full_grad(&w)).sqrt();
        let bound = F::from_f64(1e-8) * (F::one() + norm2(y).sqrt());
        if !grad_norm.is_finite() || grad_norm > bound {
            return Err(Error::Numeric(format!(
                "normal-equation solve left gradient norm {grad_norm} above bound {bound}"
            )));
        }
        Ok(w)
    }
}

impl<F: Scalar> FiniteSumObjective<F> for RidgeObjective<F> {
    fn n_samples(&self) -> usize {
        self.data.n_samples()
    }

    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn loss_i(&self, w: &Array1<F>, i: usize) -> F {
        let r = self.data.targets()[i] - self.data.features().row(i).dot(w);
        r * r + self.lambda * norm2(w)
    }

    fn grad_i(&self, w: &Array1<F>, i: usize) -> Array1<F> {
        assert!(i < self.n_samples(), "sample index {i} out of range");
        let x = self.data.features().row(i);
        let r = self.data.targets()[i] - x.dot(w);
        let two = F::from_f64(2.0);
        let mut g = x.to_owned() * (-two * r);
        g.scaled_add(two * self.lambda, w);
        g
    }

    fn loss(&self, w: &Array1<F>) -> F {
        let x = self.data.features();
        let y = self.data.targets();
        let residual = y - &x.dot(w);
        let n_inv = F::one() / F::from_f64(self.n_samples() as f64);
        residual.dot(&residual) * n_inv + self.lambda * norm2(w)
    }

    fn full_grad(&self, w: &Array1<F>) -> Array1<F> {
        let x = self.data.features();
        let y = self.data.targets();
        let residual = y - &x.dot(w);
        let two = F::from_f64(2.0);
        let n_inv = F::one() / F::from_f64(self.n_samples() as f64);
        let mut g = x.t().dot(&residual) * (-two * n_inv);
        g.scaled_add(two * self.lambda, w);
        g
    }
}

pub(crate) fn norm2<F: Scalar>(v: &Array1<F>) -> F {
    v.dot(v)
}

/// Solves `A w = b` for symmetric positive definite `A` by an in-place
/// Cholesky factorization. Fails on non-positive pivots or non-finite input.
fn cholesky_solve<F: Scalar>(mut a: Array2<F>, b: Array1<F>) -> Result<Array1<F>> {
    let d = a.nrows();
    assert_eq!(a.ncols(), d);
    assert_eq!(b.len(), d);

    for i in 0..d {
        for j in 0..=i {
            let mut sum = a[(i, j)];
            for k in 0..j {
                sum -= a[(i, k)] * a[(j, k)];
            }
            if i == j {
                // NaN must fail this check too.
                #[allow(clippy::neg_cmp_op_on_partial_ord)]
                if !(sum > F::zero()) || !sum.is_finite() {
                    return Err(Error::Numeric(format!(
                        "Cholesky pivot {i} is not positive: {sum}"
                    )));
                }
                a[(i, j)] = sum.sqrt();
            } else {
                a[(i, j)] = sum / a[(j, j)];
            }
        }
    }

    // L y = b
    let mut y = b;
    for i in 0..d {
        for k in 0..i {
            let t = a[(i, k)] * y[k];
            y[i] -= t;
        }
        y[i] /= a[(i, i)];
    }
    // Lᵀ w = y
    let mut w = y;
    for i in (0..d).rev() {
        for k in (i + 1)..d {
            let t = a[(k, i)] * w[k];
            w[i] -= t;
        }
        w[i] /= a[(i, i)];
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("solve produced non-finite entries".into()));
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_ridge;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ridge(features: Array2<f64>, targets: Array1<f64>, lambda: f64) -> RidgeObjective<f64> {
        let ds = Dataset::new(features, targets, "t").unwrap();
        RidgeObjective::new(Arc::new(ds), lambda)
    }

    #[test]
    fn grad_at_origin_ignores_regularizer() {
        let obj = ridge(array![[1.0, 0.0]], array![1.0], 0.1);
        let g = obj.grad_i(&array![0.0, 0.0], 0);
        assert_eq!(g, array![-2.0, 0.0]);
    }

    #[test]
    fn grad_vanishes_at_zero_residual_without_regularizer() {
        let obj = ridge(array![[1.0, 2.0]], array![5.0], 0.0);
        let w = array![1.0, 2.0]; // x·w = 5 = y
        let g = obj.grad_i(&w, 0);
        assert_abs_diff_eq!(g[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn grad_hand_example_and_finite_differences() {
        // residual 0 − (1,2)·(1,1) = −3; −2(−3)(1,2) + 2·0.5·(1,1) = (7,13)
        let obj = ridge(array![[1.0, 2.0]], array![0.0], 0.5);
        let w = array![1.0, 1.0];
        let g = obj.grad_i(&w, 0);
        assert_abs_diff_eq!(g[0], 7.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[1], 13.0, epsilon = 1e-12);

        let fd = central_diff(&obj, &w, 0);
        for j in 0..2 {
            assert_abs_diff_eq!(g[j], fd[j], epsilon = 1e-5);
        }
    }

    fn central_diff(obj: &RidgeObjective<f64>, w: &Array1<f64>, i: usize) -> Array1<f64> {
        let h = 1e-6;
        let mut out = Array1::zeros(w.len());
        for j in 0..w.len() {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[j] += h;
            wm[j] -= h;
            out[j] = (obj.loss_i(&wp, i) - obj.loss_i(&wm, i)) / (2.0 * h);
        }
        out
    }

    #[test]
    fn grad_matches_finite_differences_on_random_points() {
        let (ds, _) = synth_ridge::<f64>(12, 4, 0.3, 11).unwrap();
        let obj = RidgeObjective::new(Arc::new(ds), 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let w = Array1::from_iter((0..4).map(|_| rng.random_range(-10.0..10.0)));
            let i = rng.random_range(0..12);
            let g = obj.grad_i(&w, i);
            let fd = central_diff(&obj, &w, i);
            for j in 0..4 {
                assert_abs_diff_eq!(g[j], fd[j], epsilon = 1e-5);
            }
        }
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn grad_i_rejects_out_of_range_index() {
        let obj = ridge(array![[1.0]], array![1.0], 0.1);
        let _ = obj.grad_i(&array![0.0], 1);
    }

    #[test]
    fn aggregate_loss_and_grad_match_per_sample_averages() {
        let (ds, _) = synth_ridge::<f64>(30, 5, 0.2, 5).unwrap();
        let obj = RidgeObjective::new(Arc::new(ds), 0.01);
        let w = Array1::from_iter((0..5).map(|j| 0.3 * j as f64 - 0.7));

        let mut loss_sum = 0.0;
        let mut grad_sum = Array1::<f64>::zeros(5);
        for i in 0..30 {
            loss_sum += obj.loss_i(&w, i);
            grad_sum += &obj.grad_i(&w, i);
        }
        let loss_avg = loss_sum / 30.0;
        let grad_avg = grad_sum / 30.0;

        let rel = (obj.loss(&w) - loss_avg).abs() / loss_avg.abs();
        assert!(rel <= 1e-10, "loss mismatch rel={rel}");
        let g = obj.full_grad(&w);
        for j in 0..5 {
            let denom = grad_avg[j].abs().max(1.0);
            assert!(((g[j] - grad_avg[j]) / denom).abs() <= 1e-10);
        }
    }

    #[test]
    fn convexity_constants_zero_features() {
        let obj = ridge(array![[0.0], [0.0]], array![1.0, 2.0], 0.5);
        let (mu, l) = obj.convexity_constants();
        assert_eq!(mu, 1.0);
        assert_eq!(l, 1.0);
    }

    #[test]
    fn convexity_constants_unit_row() {
        // max ‖x_i‖² = 1, λ = 0.1: mu = 0.2, L = 2.2. Cross-checked against the
        // eigenvalues of 2 x xᵀ + 2λ I for x = (1, 0): {2 + 2λ, 2λ}.
        let obj = ridge(array![[1.0, 0.0]], array![1.0], 0.1);
        let (mu, l) = obj.convexity_constants();
        assert_abs_diff_eq!(mu, 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(l, 2.2, epsilon = 1e-15);
        let eig_small = 2.0 * 0.1;
        let eig_large = 2.0 * 1.0 + 2.0 * 0.1;
        assert_abs_diff_eq!(mu, eig_small, epsilon = 1e-15);
        assert_abs_diff_eq!(l, eig_large, epsilon = 1e-15);
    }

    #[test]
    fn convexity_constants_lambda_zero_gives_zero_mu() {
        let obj = ridge(array![[1.0]], array![1.0], 0.0);
        let (mu, l) = obj.convexity_constants();
        assert_eq!(mu, 0.0);
        assert!(l > 0.0);
    }

    #[test]
    fn exact_minimizer_one_dimensional_closed_form() {
        // w* = x y / (x² + λ) = 2 / (1 + 1) = 1
        let obj = ridge(array![[1.0]], array![2.0], 1.0);
        let w = obj.exact_minimizer().unwrap();
        assert_abs_diff_eq!(w[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn exact_minimizer_zero_targets_gives_zero() {
        let obj = ridge(array![[1.0, 2.0], [3.0, -1.0]], array![0.0, 0.0], 0.3);
        let w = obj.exact_minimizer().unwrap();
        assert_abs_diff_eq!(w[0], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(w[1], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn exact_minimizer_gradient_norm_bound() {
        let (ds, _) = synth_ridge::<f64>(50, 6, 0.1, 9).unwrap();
        let y_norm = ds.targets().dot(ds.targets()).sqrt();
        let obj = RidgeObjective::new(Arc::new(ds), 0.05);
        let w = obj.exact_minimizer().unwrap();
        let gnorm = norm2(&obj.full_grad(&w)).sqrt();
        assert!(gnorm <= 1e-8 * (1.0 + y_norm), "gnorm={gnorm}");
    }

    #[test]
    fn gradient_norm_brackets_loss_gap() {
        // 2 mu (f − f*) ≤ ‖∇f‖² ≤ 2 L (f − f*) on random points.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for seed in 0..5 {
            let (ds, _) = synth_ridge::<f64>(40, 4, 0.2, seed).unwrap();
            let obj = RidgeObjective::new(Arc::new(ds), 0.1);
            let (mu, l) = obj.convexity_constants();
            let wstar = obj.exact_minimizer().unwrap();
            let fstar = obj.loss(&wstar);
            for _ in 0..10 {
                let w = Array1::from_iter((0..4).map(|_| rng.random_range(-3.0..3.0)));
                let gap = obj.loss(&w) - fstar;
                let g2 = norm2(&obj.full_grad(&w));
                assert!(2.0 * mu * gap <= g2 * (1.0 + 1e-10), "lower bound failed");
                assert!(g2 <= 2.0 * l * gap * (1.0 + 1e-10), "upper bound failed");
            }
        }
    }
}
