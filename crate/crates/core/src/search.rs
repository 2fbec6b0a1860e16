//! Strong Wolfe line search and conjugate direction updates with the
//! hybrid PRP-FR coefficient.

use ndarray::Array1;

use crate::error::{Error, Result};
use crate::model::norm2;
use crate::Scalar;

/// Strong Wolfe parameters.
///
/// `sigma1` is the sufficient-decrease slope fraction, `sigma2` the curvature
/// bound; `0 < sigma1 < sigma2 < 1` is required and `sigma2 < 1/2` is what the
/// descent-interval analysis needs (validation warns when it is exceeded).
/// Accepted steps are clamped into `[alpha_min, alpha_max]`.
#[derive(Debug, Clone, Copy)]
pub struct WolfeParams<F> {
    pub sigma1: F,
    pub sigma2: F,
    pub alpha_init: F,
    pub alpha_min: F,
    pub alpha_max: F,
    pub max_evals: usize,
}

impl<F: Scalar> Default for WolfeParams<F> {
    fn default() -> Self {
        Self {
            sigma1: F::from_f64(1e-4),
            sigma2: F::from_f64(0.1),
            alpha_init: F::one(),
            alpha_min: F::from_f64(1e-10),
            alpha_max: F::one(),
            max_evals: 20,
        }
    }
}

impl<F: Scalar> WolfeParams<F> {
    pub fn validate(&self) -> Result<()> {
        if !(F::zero() < self.sigma1 && self.sigma1 < self.sigma2 && self.sigma2 < F::one()) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < sigma1 < sigma2 < 1, got sigma1={}, sigma2={}",
                self.sigma1, self.sigma2
            )));
        }
        if self.sigma2 >= F::from_f64(0.5) {
            log::warn!(
                "sigma2 = {} >= 1/2: the descent-direction interval guarantee does not apply",
                self.sigma2
            );
        }
        if !(F::zero() < self.alpha_min
            && self.alpha_min <= self.alpha_init
            && self.alpha_init <= self.alpha_max)
        {
            return Err(Error::InvalidArgument(format!(
                "need 0 < alpha_min <= alpha_init <= alpha_max, got {} / {} / {}",
                self.alpha_min, self.alpha_init, self.alpha_max
            )));
        }
        if self.max_evals == 0 {
            return Err(Error::InvalidArgument("max_evals must be positive".into()));
        }
        Ok(())
    }

    /// Same parameters with a different step-size ceiling (keeps
    /// `alpha_init <= alpha_max`).
    pub fn with_alpha_max(mut self, alpha_max: F) -> Self {
        self.alpha_max = alpha_max;
        self.alpha_init = self.alpha_init.min(alpha_max);
        self
    }
}

/// How the search terminated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WolfeStatus {
    /// Both conditions hold at the returned step.
    Satisfied,
    /// Evaluation budget exhausted; the returned step satisfies sufficient
    /// decrease only.
    SufficientDecrease,
    /// No sufficient-decrease point was found; the returned step is alpha_min.
    Failed,
}

#[derive(Debug, Clone, Copy)]
pub struct LineSearchResult<F> {
    pub alpha: F,
    pub evals: usize,
    pub status: WolfeStatus,
}

/// Finds a step satisfying the strong Wolfe conditions
///
/// ```text
/// phi(a) <= phi(0) + sigma1 * a * phi'(0)      (sufficient decrease)
/// |phi'(a)| <= -sigma2 * phi'(0)               (curvature)
/// ```
///
/// by bracketing with doubling steps and zooming with quadratic
/// interpolation (bisection as safeguard). `phi` returns the value and the
/// derivative; it is evaluated once at zero (not counted against
/// `max_evals`) and must have negative slope there.
pub fn strong_wolfe<F: Scalar>(
    mut phi: impl FnMut(F) -> (F, F),
    params: &WolfeParams<F>,
) -> Result<LineSearchResult<F>> {
    params.validate()?;
    let (phi0, dphi0) = phi(F::zero());
    // A NaN slope must be rejected as well.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(dphi0 < F::zero()) {
        return Err(Error::NotDescentDirection {
            slope: dphi0.as_f64(),
        });
    }

    let suffdec = |a: F, fa: F| fa <= phi0 + params.sigma1 * a * dphi0;
    let curvature = |ga: F| ga.abs() <= -params.sigma2 * dphi0;
    let clamp = |a: F| a.max(params.alpha_min).min(params.alpha_max);

    let mut evals = 0usize;
    // Best point seen that satisfies sufficient decrease, by value.
    let mut best: Option<(F, F)> = None;

    let finish = |best: Option<(F, F)>, evals: usize| match best {
        Some((a, _)) => Ok(LineSearchResult {
            alpha: clamp(a),
            evals,
            status: WolfeStatus::SufficientDecrease,
        }),
        None => Ok(LineSearchResult {
            alpha: params.alpha_min,
            evals,
            status: WolfeStatus::Failed,
        }),
    };

    // Bracketing phase.
    let mut a_prev = F::zero();
    let mut f_prev = phi0;
    let mut g_prev = dphi0;
    let mut a = params.alpha_init.min(params.alpha_max);
    let mut first = true;
    let bracket = loop {
        if evals >= params.max_evals {
            return finish(best, evals);
        }
        let (fa, ga) = phi(a);
        evals += 1;
        if suffdec(a, fa) && best.is_none_or(|(_, fb)| fa < fb) {
            best = Some((a, fa));
        }
        if !suffdec(a, fa) || (!first && fa >= f_prev) {
            break (a_prev, f_prev, g_prev, a, fa);
        }
        if curvature(ga) {
            return Ok(LineSearchResult {
                alpha: clamp(a),
                evals,
                status: WolfeStatus::Satisfied,
            });
        }
        if ga >= F::zero() {
            break (a, fa, ga, a_prev, f_prev);
        }
        if a >= params.alpha_max {
            // Still descending at the ceiling; nothing more to bracket.
            return finish(best, evals);
        }
        a_prev = a;
        f_prev = fa;
        g_prev = ga;
        a = (a + a).min(params.alpha_max);
        first = false;
    };

    // Zoom phase. `lo` always satisfies sufficient decrease and the bracket
    // contains a Wolfe point.
    let (mut a_lo, mut f_lo, mut g_lo, mut a_hi, mut f_hi) = bracket;
    loop {
        if evals >= params.max_evals {
            return finish(best, evals);
        }
        let width = (a_hi - a_lo).abs();
        let scale = F::one().max(a_lo.abs()).max(a_hi.abs());
        if width <= F::epsilon() * scale {
            return finish(best, evals);
        }

        let a_j = interpolate_quadratic(a_lo, f_lo, g_lo, a_hi, f_hi)
            .unwrap_or_else(|| a_lo + (a_hi - a_lo) * F::from_f64(0.5));
        let (fj, gj) = phi(a_j);
        evals += 1;
        if suffdec(a_j, fj) && best.is_none_or(|(_, fb)| fj < fb) {
            best = Some((a_j, fj));
        }

        if !suffdec(a_j, fj) || fj >= f_lo {
            a_hi = a_j;
            f_hi = fj;
        } else {
            if curvature(gj) {
                return Ok(LineSearchResult {
                    alpha: clamp(a_j),
                    evals,
                    status: WolfeStatus::Satisfied,
                });
            }
            if gj * (a_hi - a_lo) >= F::zero() {
                a_hi = a_lo;
                f_hi = f_lo;
            }
            a_lo = a_j;
            f_lo = fj;
            g_lo = gj;
        }
    }
}

/// Minimizer of the quadratic through (a, fa) with slope ga and (b, fb).
/// None when degenerate or outside the safeguarded interior of [a, b].
fn interpolate_quadratic<F: Scalar>(a: F, fa: F, ga: F, b: F, fb: F) -> Option<F> {
    let db = b - a;
    let denom = fb - fa - ga * db;
    if denom == F::zero() || !denom.is_finite() {
        return None;
    }
    let step = -ga * db * db / (denom + denom);
    let cand = a + step;
    if !cand.is_finite() {
        return None;
    }
    let lo = a.min(b);
    let hi = a.max(b);
    let margin = (hi - lo) * F::from_f64(1e-3);
    if cand <= lo + margin || cand >= hi - margin {
        return None;
    }
    Some(cand)
}

/// Previous gradient estimate and direction, as the conjugacy update needs.
#[derive(Debug, Clone)]
pub struct DirectionState<F> {
    pub g_prev: Array1<F>,
    pub d_prev: Array1<F>,
    pub g_prev_norm2: F,
}

impl<F: Scalar> DirectionState<F> {
    pub fn new(g_prev: Array1<F>, d_prev: Array1<F>) -> Self {
        let g_prev_norm2 = norm2(&g_prev);
        Self {
            g_prev,
            d_prev,
            g_prev_norm2,
        }
    }
}

/// Hybrid coefficient `max(0, min(β_PRP, β_FR))` with
/// `β_PRP = gᵀ(g − g_prev)/‖g_prev‖²` and `β_FR = ‖g‖²/‖g_prev‖²`.
///
/// Returns `None` as a restart signal when `‖g_prev‖²` underflows; the caller
/// then takes β = 0 and the steepest-descent direction.
pub fn beta_prp_fr<F: Scalar>(g_new: &Array1<F>, state: &DirectionState<F>) -> Option<F> {
    if state.g_prev_norm2 <= F::from_f64(1e-300) {
        return None;
    }
    let beta_prp = g_new.dot(&(g_new - &state.g_prev)) / state.g_prev_norm2;
    let beta_fr = norm2(g_new) / state.g_prev_norm2;
    Some(F::zero().max(beta_prp.min(beta_fr)))
}

/// Next direction `d = −g + β d_prev`, restarted to steepest descent whenever
/// the result would not be a descent direction for `g`.
///
/// With no previous state (first iteration) the direction is `−g`.
pub fn update_direction<F: Scalar>(
    g_new: &Array1<F>,
    state: Option<&DirectionState<F>>,
) -> (Array1<F>, F) {
    let Some(state) = state else {
        return (g_new.mapv(|v| -v), F::zero());
    };
    let Some(beta) = beta_prp_fr(g_new, state) else {
        return (g_new.mapv(|v| -v), F::zero());
    };
    let mut d = g_new.mapv(|v| -v);
    d.scaled_add(beta, &state.d_prev);
    if g_new.dot(&d) >= F::zero() {
        return (g_new.mapv(|v| -v), F::zero());
    }
    (d, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn quadratic_phi(minimum: f64) -> impl FnMut(f64) -> (f64, f64) {
        move |a: f64| ((a - minimum).powi(2), 2.0 * (a - minimum))
    }

    fn params(alpha_max: f64) -> WolfeParams<f64> {
        WolfeParams {
            sigma1: 1e-4,
            sigma2: 0.1,
            alpha_init: 1.0,
            alpha_min: 1e-10,
            alpha_max,
            max_evals: 25,
        }
    }

    #[test]
    fn quadratic_lands_near_its_minimizer() {
        // |phi'(a)| = |2(a−1)| <= 0.2 forces a in [0.9, 1.1]
        let res = strong_wolfe(quadratic_phi(1.0), &params(2.0)).unwrap();
        assert_eq!(res.status, WolfeStatus::Satisfied);
        assert!((0.9..=1.1).contains(&res.alpha), "alpha={}", res.alpha);
    }

    #[test]
    fn quadratic_with_far_minimizer_needs_expansion() {
        let res = strong_wolfe(quadratic_phi(37.5), &params(100.0)).unwrap();
        assert_eq!(res.status, WolfeStatus::Satisfied);
        let (_, slope) = quadratic_phi(37.5)(res.alpha);
        assert!(slope.abs() <= 0.1 * 2.0 * 37.5);
    }

    #[test]
    fn positive_slope_is_rejected() {
        let res = strong_wolfe(|a: f64| (a, 1.0), &params(1.0));
        assert!(matches!(res, Err(Error::NotDescentDirection { .. })));
    }

    #[test]
    fn capped_search_returns_sufficient_decrease() {
        // Minimizer at 50 but the ceiling is 1: the slope stays negative,
        // sufficient decrease holds everywhere reached.
        let res = strong_wolfe(quadratic_phi(50.0), &params(1.0)).unwrap();
        assert_eq!(res.status, WolfeStatus::SufficientDecrease);
        assert_abs_diff_eq!(res.alpha, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn returned_step_satisfies_both_conditions_when_flagged() {
        for &m in &[0.3, 0.7, 1.0, 2.5, 9.0] {
            let res = strong_wolfe(quadratic_phi(m), &params(64.0)).unwrap();
            assert_eq!(res.status, WolfeStatus::Satisfied, "m={m}");
            let (f, g) = quadratic_phi(m)(res.alpha);
            let (f0, g0) = quadratic_phi(m)(0.0);
            assert!(f <= f0 + 1e-4 * res.alpha * g0);
            assert!(g.abs() <= -0.1 * g0);
        }
    }

    #[test]
    fn curvature_holds_at_exact_minimizer_for_any_sigma2() {
        let mut phi = quadratic_phi(1.0);
        let (_, slope) = phi(1.0);
        assert_eq!(slope, 0.0);
        for &s2 in &[0.9, 0.5, 0.01] {
            assert!(slope.abs() <= s2 * 2.0);
        }
    }

    #[test]
    fn validate_rejects_bad_sigmas_and_alphas() {
        let mut p = params(1.0);
        p.sigma1 = 0.5;
        p.sigma2 = 0.1;
        assert!(p.validate().is_err());
        let mut p = params(1.0);
        p.alpha_min = 0.0;
        assert!(p.validate().is_err());
        let mut p = params(1.0);
        p.alpha_init = 2.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn beta_zero_when_gradient_unchanged() {
        let g = array![1.0, 2.0];
        let state = DirectionState::new(g.clone(), array![-1.0, -2.0]);
        assert_eq!(beta_prp_fr(&g, &state), Some(0.0));
    }

    #[test]
    fn beta_orthogonal_gradients_hand_example() {
        let state = DirectionState::new(array![1.0, 0.0], array![-1.0, 0.0]);
        let beta = beta_prp_fr(&array![0.0, 1.0], &state).unwrap();
        assert_abs_diff_eq!(beta, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn beta_clamped_at_zero_for_negative_prp() {
        // g_new shrinks along g_prev: gᵀ(g − g_prev) < 0
        let state = DirectionState::new(array![2.0, 0.0], array![-2.0, 0.0]);
        let beta = beta_prp_fr(&array![1.0, 0.0], &state).unwrap();
        assert_eq!(beta, 0.0);
    }

    #[test]
    fn beta_restart_signal_on_vanished_gradient() {
        let state = DirectionState::new(array![0.0, 0.0], array![-1.0, 0.0]);
        assert_eq!(beta_prp_fr(&array![1.0, 0.0], &state), None);
    }

    #[test]
    fn direction_without_state_is_steepest_descent() {
        let (d, beta) = update_direction(&array![3.0, -4.0], None);
        assert_eq!(d, array![-3.0, 4.0]);
        assert_eq!(beta, 0.0);
    }

    #[test]
    fn direction_is_always_descent() {
        // Construct a state that would push d uphill without the reset.
        let g_new = array![1.0, 0.0];
        let state = DirectionState::new(array![10.0, 0.0], array![100.0, 0.0]);
        let (d, beta) = update_direction(&g_new, Some(&state));
        assert!(g_new.dot(&d) < 0.0);
        assert_eq!(beta, 0.0);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn beta_bounded_by_fletcher_reeves(
                gp in proptest::collection::vec(-10.0f64..10.0, 3),
                gn in proptest::collection::vec(-10.0f64..10.0, 3),
            ) {
                let g_prev = Array1::from_vec(gp);
                prop_assume!(g_prev.dot(&g_prev) > 1e-6);
                let g_new = Array1::from_vec(gn);
                let state = DirectionState::new(g_prev.clone(), g_prev.mapv(|v| -v));
                let beta = beta_prp_fr(&g_new, &state).unwrap();
                let beta_fr = g_new.dot(&g_new) / g_prev.dot(&g_prev);
                prop_assert!(beta >= 0.0);
                prop_assert!(beta <= beta_fr * (1.0 + 1e-12));
            }

            #[test]
            fn update_direction_always_descends(
                gp in proptest::collection::vec(-5.0f64..5.0, 4),
                gn in proptest::collection::vec(-5.0f64..5.0, 4),
                dp in proptest::collection::vec(-5.0f64..5.0, 4),
            ) {
                let g_prev = Array1::from_vec(gp);
                let g_new = Array1::from_vec(gn);
                prop_assume!(g_new.dot(&g_new) > 1e-9);
                let state = DirectionState::new(g_prev, Array1::from_vec(dp));
                let (d, _) = update_direction(&g_new, Some(&state));
                prop_assert!(g_new.dot(&d) < 0.0);
            }
        }
    }
}
