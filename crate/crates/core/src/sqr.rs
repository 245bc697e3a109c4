//! Box-constrained, weighted, convolution-smoothed quantile regression.
//!
//! Minimizes `(1/n) Σ_s w_s ℓ_{h,τ_s}(θ'x_s; y_s)` over `θ ∈ [-B, B]^r`, where
//! `ℓ` is the smoothed check loss. Steps are damped Newton with the analytic
//! Hessian when it is positive definite and projected gradient otherwise;
//! every trial point is projected onto the box and accepted under an Armijo
//! condition on the exact smoothed objective.

use crate::diagnostics::SolveTally;
use crate::error::{Result, UfmError};
use crate::kernel::{smoothed_all, SmoothKernel};
use crate::linalg::{cholesky_in_place, cholesky_solve};

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACK: usize = 40;
const RIDGE_REL: f64 = 1e-8;

/// One term of the regression.
#[derive(Debug, Clone, PartialEq)]
pub struct SqrObservation {
    pub y: f64,
    pub x: Vec<f64>,
    pub tau: f64,
    pub weight: f64,
}

impl SqrObservation {
    pub fn new(y: f64, x: Vec<f64>, tau: f64) -> Self {
        Self {
            y,
            x,
            tau,
            weight: 1.0,
        }
    }

    pub fn weighted(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }
}

/// Solver settings shared by every call in a fit.
#[derive(Debug, Clone, Copy)]
pub struct SqrSettings<'k> {
    pub kernel: &'k SmoothKernel,
    pub h: f64,
    pub bound: f64,
    pub tol: f64,
    pub max_iters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SqrSolution {
    pub theta: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Some coordinate sits on the box boundary.
    pub active_box: bool,
    /// The Hessian needed a ridge because the design is (near) rank deficient.
    pub degenerate: bool,
    /// `‖θ − Proj(θ − g(θ))‖_∞` at the returned point.
    pub stationarity: f64,
}

impl SqrSolution {
    pub fn tally(&self) -> SolveTally {
        SolveTally {
            solves: 1,
            max_iters: usize::from(!self.converged),
            active_box: usize::from(self.active_box),
            degenerate: usize::from(self.degenerate),
        }
    }
}

/// Quantile level of each observation.
#[derive(Debug, Clone, Copy)]
pub enum Taus<'a> {
    Shared(f64),
    PerObs(&'a [f64]),
}

/// Borrowed regression design: `x` is row-major `n x r`.
#[derive(Debug, Clone, Copy)]
pub struct SqrDesign<'a> {
    pub y: &'a [f64],
    pub x: &'a [f64],
    pub r: usize,
    pub taus: Taus<'a>,
    pub weights: Option<&'a [f64]>,
}

impl SqrDesign<'_> {
    fn n(&self) -> usize {
        self.y.len()
    }

    fn tau(&self, s: usize) -> f64 {
        match self.taus {
            Taus::Shared(t) => t,
            Taus::PerObs(t) => t[s],
        }
    }

    fn weight(&self, s: usize) -> f64 {
        self.weights.map_or(1.0, |w| w[s])
    }
}

struct State {
    value: f64,
    grad: Vec<f64>,
    hess: Vec<f64>,
}

fn evaluate(design: &SqrDesign<'_>, set: &SqrSettings<'_>, theta: &[f64], st: &mut State) -> Result<()> {
    let r = design.r;
    st.value = 0.0;
    st.grad.iter_mut().for_each(|g| *g = 0.0);
    st.hess.iter_mut().for_each(|g| *g = 0.0);
    for s in 0..design.n() {
        let x = &design.x[s * r..(s + 1) * r];
        let c: f64 = x.iter().zip(theta).map(|(a, b)| a * b).sum();
        let w = design.weight(s);
        let (v, g, hs) = smoothed_all(set.kernel, set.h, design.tau(s), c, design.y[s]);
        st.value += w * v;
        let wg = w * g;
        let wh = w * hs;
        for j in 0..r {
            st.grad[j] += wg * x[j];
            let whx = wh * x[j];
            for k in 0..=j {
                st.hess[j * r + k] += whx * x[k];
            }
        }
    }
    let inv_n = 1.0 / design.n() as f64;
    st.value *= inv_n;
    for j in 0..r {
        st.grad[j] *= inv_n;
        for k in 0..=j {
            let v = st.hess[j * r + k] * inv_n;
            st.hess[j * r + k] = v;
            st.hess[k * r + j] = v;
        }
    }
    if !st.value.is_finite() || st.grad.iter().any(|g| !g.is_finite()) {
        return Err(UfmError::NonFinite("smoothed quantile regression objective"));
    }
    Ok(())
}

#[inline]
fn project(v: f64, bound: f64) -> f64 {
    v.clamp(-bound, bound)
}

fn stationarity(theta: &[f64], grad: &[f64], bound: f64) -> f64 {
    theta
        .iter()
        .zip(grad)
        .map(|(t, g)| (t - project(t - g, bound)).abs())
        .fold(0.0, f64::max)
}

/// Solves one smoothed quantile regression on a borrowed design.
pub fn solve_design(design: &SqrDesign<'_>, set: &SqrSettings<'_>, init: &[f64]) -> Result<SqrSolution> {
    let r = design.r;
    let n = design.n();
    if init.len() != r || design.x.len() != n * r {
        return Err(UfmError::DimensionMismatch {
            expected: format!("init of length {r} and {n}x{r} design"),
            actual: format!("init {} and design {}", init.len(), design.x.len()),
        });
    }
    if n == 0 {
        return Err(UfmError::InvalidConfig("empty regression".into()));
    }
    let mut theta: Vec<f64> = init.iter().map(|&v| project(v, set.bound)).collect();
    let mut st = State {
        value: 0.0,
        grad: vec![0.0; r],
        hess: vec![0.0; r * r],
    };
    let mut cand_st = State {
        value: 0.0,
        grad: vec![0.0; r],
        hess: vec![0.0; r * r],
    };
    evaluate(design, set, &theta, &mut st)?;

    // Lipschitz bound on the gradient: sup|k|/h * mean(w ‖x‖²)
    let mut wx2 = 0.0;
    for s in 0..n {
        let x = &design.x[s * r..(s + 1) * r];
        wx2 += design.weight(s) * x.iter().map(|v| v * v).sum::<f64>();
    }
    let lip = (set.kernel.sup_density() / set.h * wx2 / n as f64).max(f64::MIN_POSITIVE);
    let mut grad_step = 1.0 / lip;

    let mut chol = vec![0.0; r * r];
    let mut dir = vec![0.0; r];
    let mut cand = vec![0.0; r];
    let mut degenerate = false;
    let mut pg = stationarity(&theta, &st.grad, set.bound);
    let mut iterations = 0;
    let mut converged = pg <= set.tol;

    while !converged && iterations < set.max_iters {
        iterations += 1;
        let mut accepted = false;

        // Newton direction when the Hessian is positive definite.
        chol.copy_from_slice(&st.hess);
        let mut newton_ok = cholesky_in_place(&mut chol, r);
        if !newton_ok {
            let scale = (0..r).map(|j| st.hess[j * r + j]).sum::<f64>() / r as f64;
            if scale > 0.0 {
                chol.copy_from_slice(&st.hess);
                for j in 0..r {
                    chol[j * r + j] += RIDGE_REL * scale;
                }
                newton_ok = cholesky_in_place(&mut chol, r);
                if newton_ok && hessian_is_psd(&st.hess, r) {
                    degenerate = true;
                }
            }
        }
        if newton_ok {
            for j in 0..r {
                dir[j] = -st.grad[j];
            }
            cholesky_solve(&chol, r, &mut dir);
            let mut step = 1.0;
            for _ in 0..MAX_BACKTRACK {
                for j in 0..r {
                    cand[j] = project(theta[j] + step * dir[j], set.bound);
                }
                if cand == theta {
                    break;
                }
                evaluate(design, set, &cand, &mut cand_st)?;
                if accept(&st, &cand_st, &theta, &cand, pg, set.bound) {
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
        }
        if !accepted {
            let mut step = grad_step * 4.0;
            for _ in 0..MAX_BACKTRACK {
                let step_used = step.max(1.0 / lip);
                for j in 0..r {
                    cand[j] = project(theta[j] - step_used * st.grad[j], set.bound);
                }
                if cand == theta {
                    break;
                }
                evaluate(design, set, &cand, &mut cand_st)?;
                if accept(&st, &cand_st, &theta, &cand, pg, set.bound) || step_used <= 1.0 / lip {
                    grad_step = step_used;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
        }
        if !accepted {
            // no representable progress; the iterate is as good as it gets
            break;
        }
        theta.copy_from_slice(&cand);
        std::mem::swap(&mut st, &mut cand_st);
        pg = stationarity(&theta, &st.grad, set.bound);
        converged = pg <= set.tol;
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(UfmError::NonFinite("smoothed quantile regression iterate"));
    }
    let active_box = theta.iter().any(|v| v.abs() >= set.bound);
    Ok(SqrSolution {
        theta,
        iterations,
        converged,
        active_box,
        degenerate,
        stationarity: pg,
    })
}

fn hessian_is_psd(h: &[f64], r: usize) -> bool {
    let m = nalgebra::DMatrix::from_row_slice(r, r, h);
    m.symmetric_eigenvalues().iter().all(|&v| v >= -1e-12 * m.amax().max(1e-300))
}

fn accept(cur: &State, cand: &State, theta: &[f64], cand_theta: &[f64], pg: f64, bound: f64) -> bool {
    let decrease: f64 = cur
        .grad
        .iter()
        .zip(theta.iter().zip(cand_theta))
        .map(|(g, (a, b))| g * (b - a))
        .sum();
    if cand.value <= cur.value + ARMIJO * decrease {
        return true;
    }
    // At the floating-point floor of the objective, progress is judged by stationarity.
    let slack = 1e-13 * (1.0 + cur.value.abs());
    cand.value <= cur.value + slack && stationarity(cand_theta, &cand.grad, bound) < pg
}

/// Solves the regression on owned observations. Observations are sorted into a
/// canonical order first, so the result does not depend on input ordering.
pub fn solve_sqr(
    obs: &[SqrObservation],
    kernel: &SmoothKernel,
    h: f64,
    bound: f64,
    init: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<SqrSolution> {
    let r = init.len();
    if obs.len() < r {
        return Err(UfmError::InvalidConfig(format!(
            "need at least {r} observations, got {}",
            obs.len()
        )));
    }
    if !(h > 0.0) {
        return Err(UfmError::InvalidConfig("bandwidth must be positive".into()));
    }
    for o in obs {
        if o.x.len() != r {
            return Err(UfmError::DimensionMismatch {
                expected: format!("regressor of length {r}"),
                actual: format!("{}", o.x.len()),
            });
        }
        if !(o.weight > 0.0) {
            return Err(UfmError::InvalidConfig("weights must be positive".into()));
        }
        if !(o.tau > 0.0 && o.tau < 1.0) {
            return Err(UfmError::InvalidConfig("tau must lie in (0,1)".into()));
        }
    }
    let mut sorted: Vec<&SqrObservation> = obs.iter().collect();
    sorted.sort_by(|a, b| {
        a.y.total_cmp(&b.y)
            .then(a.tau.total_cmp(&b.tau))
            .then(a.weight.total_cmp(&b.weight))
            .then_with(|| {
                a.x.iter()
                    .zip(&b.x)
                    .map(|(p, q)| p.total_cmp(q))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    let y: Vec<f64> = sorted.iter().map(|o| o.y).collect();
    let x: Vec<f64> = sorted.iter().flat_map(|o| o.x.iter().copied()).collect();
    let taus: Vec<f64> = sorted.iter().map(|o| o.tau).collect();
    let weights: Vec<f64> = sorted.iter().map(|o| o.weight).collect();
    let design = SqrDesign {
        y: &y,
        x: &x,
        r,
        taus: Taus::PerObs(&taus),
        weights: Some(&weights),
    };
    let settings = SqrSettings {
        kernel,
        h,
        bound,
        tol,
        max_iters,
    };
    solve_design(&design, &settings, init)
}

/// Objective `(1/n) Σ w ℓ(θ'x; y, τ)` on owned observations.
pub fn sqr_objective(obs: &[SqrObservation], kernel: &SmoothKernel, h: f64, theta: &[f64]) -> f64 {
    obs.iter()
        .map(|o| {
            let c: f64 = o.x.iter().zip(theta).map(|(a, b)| a * b).sum();
            o.weight * crate::kernel::smoothed_value(kernel, h, o.tau, c, o.y)
        })
        .sum::<f64>()
        / obs.len() as f64
}
