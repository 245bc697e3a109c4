//! Nuclear-norm penalized common components, the eigenvalue-threshold rank
//! estimate, warm-start factors, and strength-based factor selection.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::Warning;
use crate::error::{Result, UfmError};
use crate::kernel::{smoothed_grad, smoothed_value, std_normal_pdf, SmoothKernel};
use crate::linalg::{singular_values_desc, sym_eigen_desc};
use crate::panel::{EstimatorConfig, FactorEstimate, PanelMatrix, QuantileGrid};
use crate::ufa::normalize_common;

/// Solver settings for [`pel_fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct PelSettings {
    /// Smoothing bandwidth of the second-order kernel.
    pub h: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl PelSettings {
    /// `h = min(N,T)^(-1/5)`, relative tolerance 1e-5, 500 iterations.
    pub fn for_panel(n: usize, t: usize) -> Self {
        Self {
            h: (n.min(t) as f64).powf(-0.2),
            tol: 1e-5,
            max_iters: 500,
        }
    }
}

/// Output of [`pel_fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct PelFit {
    pub common: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    /// Relative change of the last accepted step.
    pub rel_change: f64,
}

/// The penalty level `ψ = C sqrt(log(NT)) max(√N, √T) / (NT)`.
pub fn penalty_level(c: f64, n: usize, t: usize) -> f64 {
    let nt = (n * t) as f64;
    c * nt.ln().sqrt() * (n as f64).sqrt().max((t as f64).sqrt()) / nt
}

/// Interval `[min Y - range, max Y + range]` for the penalized estimator.
pub fn pel_box(y: &DMatrix<f64>) -> (f64, f64) {
    let lo = y.min();
    let hi = y.max();
    let range = (hi - lo).max(1e-12);
    (lo - range, hi + range)
}

/// Singular-value soft thresholding of `a` at `kappa`. Returns the shrunken
/// matrix and its (shrunken, descending) singular values.
pub fn svt(a: &DMatrix<f64>, kappa: f64) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let (n, t) = a.shape();
    // Work with the smaller Gram matrix.
    let wide = t > n;
    let gram = if wide { a * a.transpose() } else { a.transpose() * a };
    let (vals, vecs) = sym_eigen_desc(&gram)?;
    let k = vals.iter().take_while(|&&v| v.max(0.0).sqrt() > kappa).count();
    let mut shrunk = Vec::with_capacity(k);
    if k == 0 {
        return Ok((DMatrix::zeros(n, t), shrunk));
    }
    let v = vecs.columns(0, k).into_owned();
    let mut scaled = v.clone();
    for j in 0..k {
        let s = vals[j].sqrt();
        shrunk.push(s - kappa);
        scaled.column_mut(j).scale_mut((s - kappa) / s);
    }
    let out = if wide {
        // a = U S V', U from the row Gram: result = U diag(1 - κ/s) U' a
        &scaled * (v.transpose() * a)
    } else {
        (a * &scaled) * v.transpose()
    };
    Ok((out, shrunk))
}

fn pel_loss(kernel: &SmoothKernel, h: f64, tau: f64, l: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    l.iter()
        .zip(y.iter())
        .map(|(&c, &v)| smoothed_value(kernel, h, tau, c, v))
        .sum::<f64>()
        / l.len() as f64
}

/// Approximate minimizer of `(1/NT) Σ ℓ_τ(Y - L) + ψ ||L||_*`, with the
/// check loss smoothed by a second-order Gaussian kernel, by accelerated
/// proximal gradient with monotone restarts. The result is clamped to
/// [`pel_box`].
pub fn pel_fit(y: &DMatrix<f64>, tau: f64, c: f64, settings: &PelSettings) -> Result<PelFit> {
    if !(c > 0.0) {
        return Err(UfmError::InvalidConfig("penalty constant C must be positive".into()));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(UfmError::InvalidConfig(format!("tau = {tau} must lie in (0,1)")));
    }
    let (n, t) = y.shape();
    let kernel = SmoothKernel::order2();
    let h = settings.h;
    let psi = penalty_level(c, n, t);
    let nt = (n * t) as f64;
    let step = h * nt / std_normal_pdf(0.0);
    let kappa = step * psi;

    let grad = |z: &DMatrix<f64>| -> DMatrix<f64> {
        z.zip_map(y, |c, v| smoothed_grad(&kernel, h, tau, c, v) / nt)
    };
    let prox = |z: &DMatrix<f64>| -> Result<(DMatrix<f64>, f64)> {
        let g = grad(z);
        let (l, sv) = svt(&(z - g * step), kappa)?;
        let obj = pel_loss(&kernel, h, tau, &l, y) + psi * sv.iter().sum::<f64>();
        Ok((l, obj))
    };

    let mut l = DMatrix::zeros(n, t);
    let mut obj = pel_loss(&kernel, h, tau, &l, y);
    let mut z = l.clone();
    let mut theta = 1.0_f64;
    let mut converged = false;
    let mut iterations = 0;
    let mut restarted = false;
    let mut last_rel = f64::INFINITY;
    for it in 1..=settings.max_iters {
        iterations = it;
        let (l_new, obj_new) = prox(&z)?;
        if obj_new > obj && !restarted {
            // momentum overshot: restart from the last accepted iterate
            theta = 1.0;
            z = l.clone();
            restarted = true;
            continue;
        }
        restarted = false;
        let diff = (&l_new - &l).norm();
        let rel = diff / l.norm().max(1e-12);
        last_rel = rel;
        let theta_new = (1.0 + (1.0 + 4.0 * theta * theta).sqrt()) / 2.0;
        z = &l_new + (&l_new - &l) * ((theta - 1.0) / theta_new);
        theta = theta_new;
        let small = diff <= 1e-12 * (1.0 + l_new.norm());
        l = l_new;
        obj = obj_new;
        if rel < settings.tol || small {
            converged = true;
            break;
        }
    }
    let (lo, hi) = pel_box(y);
    let common = l.map(|v| v.clamp(lo, hi));
    Ok(PelFit {
        common,
        iterations,
        converged,
        objective: obj,
        rel_change: last_rel,
    })
}

/// Eigenvalues `σ̂²_j` of `Σ_m L̂'L̂/(MNT)` and the thresholded rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub eigenvalues: Vec<f64>,
    pub r_hat: usize,
    pub threshold: f64,
    pub penalty_const: f64,
    /// Penalized common components `L̂(τ_m)`, one per level.
    #[serde(skip)]
    pub pel: Vec<DMatrix<f64>>,
    pub warnings: Vec<Warning>,
}

/// Leading `min(N,T)` eigenvalues of `Σ_m L_m'L_m/(MNT)`, descending and
/// floored at zero.
pub fn stacked_eigenvalues(commons: &[DMatrix<f64>]) -> Result<Vec<f64>> {
    let (n, t) = commons[0].shape();
    let scale = (commons.len() * n * t) as f64;
    let gram = commons.iter().fold(DMatrix::zeros(t, t), |acc, l| acc + l.transpose() * l);
    let (vals, _) = sym_eigen_desc(&(gram / scale))?;
    Ok(vals.into_iter().take(n.min(t)).map(|v| v.max(0.0)).collect())
}

/// Penalized fits at every grid level, then `r̂ = #{σ̂²_j ≥ C_r}`.
pub fn estimate_r(y: &DMatrix<f64>, grid: &QuantileGrid, c: f64, c_r: f64) -> Result<RankReport> {
    if !(c_r > 0.0) {
        return Err(UfmError::InvalidConfig("rank threshold C_r must be positive".into()));
    }
    let settings = PelSettings::for_panel(y.nrows(), y.ncols());
    let fits: Vec<Result<PelFit>> = grid
        .levels()
        .par_iter()
        .map(|&tau| pel_fit(y, tau, c, &settings))
        .collect();
    let mut pel = Vec::with_capacity(fits.len());
    let mut warnings = Vec::new();
    for (fit, &tau) in fits.into_iter().zip(grid.levels()) {
        let fit = fit?;
        if !fit.converged {
            warnings.push(Warning::PenalizedNoConverge {
                tau,
                iterations: fit.iterations,
                rel_change: fit.rel_change,
            });
        }
        pel.push(fit.common);
    }
    let eigenvalues = stacked_eigenvalues(&pel)?;
    let r_hat = eigenvalues.iter().filter(|&&v| v >= c_r).count();
    Ok(RankReport {
        eigenvalues,
        r_hat,
        threshold: c_r,
        penalty_const: c,
        pel,
        warnings,
    })
}

/// [`estimate_r`] with the constants taken from `config`.
pub fn estimate_rank(panel: &PanelMatrix, grid: &QuantileGrid, config: &EstimatorConfig) -> Result<RankReport> {
    config.validate()?;
    let c_r = config.rank_threshold_for(panel.n(), panel.t());
    estimate_r(panel.values(), grid, config.penalty_const, c_r)
}

/// Factors and loadings implied by the penalized fits at rank `r`, projected
/// into `[-bound, bound]`.
pub fn warm_start(report: &RankReport, r: usize, bound: f64) -> Result<FactorEstimate> {
    if r == 0 {
        return Err(UfmError::InvalidConfig(
            "warm start needs at least one factor; the rank estimate is 0".into(),
        ));
    }
    let (n, t) = report.pel[0].shape();
    if r > n.min(t) {
        return Err(UfmError::RankTooLarge { rank: r, n, t });
    }
    let (mut est, _) = normalize_common(&report.pel, r)?;
    est.factors.apply(|v| *v = v.clamp(-bound, bound));
    for l in &mut est.loadings {
        l.apply(|v| *v = v.clamp(-bound, bound));
    }
    Ok(est)
}

/// Penalized fits on `y` followed by [`warm_start`] at `r` factors.
pub fn warm_start_for(y: &DMatrix<f64>, grid: &QuantileGrid, config: &EstimatorConfig, r: usize) -> Result<FactorEstimate> {
    let (n, t) = y.shape();
    let report = estimate_r(y, grid, config.penalty_const, config.rank_threshold_for(n, t))?;
    warm_start(&report, r, config.box_for(y))
}

/// Common component examined by [`select_factors`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "level")]
pub enum StrengthTarget {
    Mean,
    /// Index `m` into the grid.
    Quantile(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrengthReport {
    pub target: StrengthTarget,
    pub alpha: f64,
    pub constant: f64,
    pub threshold: f64,
    /// Singular values of the target common component over `√(NT)`.
    pub singular_values: Vec<f64>,
    pub selected: usize,
}

/// Counts factors of strength at least `alpha`: singular values of
/// `Λ F'/√(NT)` at or above `C N^((α-1)/2) / log N`, among the first `r`.
pub fn select_factors(
    estimate: &FactorEstimate,
    mean_loadings: Option<&DMatrix<f64>>,
    target: StrengthTarget,
    alpha: f64,
    c: f64,
) -> Result<StrengthReport> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(UfmError::InvalidConfig(format!("alpha = {alpha} must lie in (0,1]")));
    }
    if !(c > 0.0) {
        return Err(UfmError::InvalidConfig("selector constant C must be positive".into()));
    }
    let loadings = match target {
        StrengthTarget::Mean => mean_loadings.ok_or_else(|| {
            UfmError::InvalidConfig("the mean target needs mean loadings".into())
        })?,
        StrengthTarget::Quantile(m) => estimate.loadings.get(m).ok_or_else(|| {
            UfmError::InvalidConfig(format!("grid index {m} out of range"))
        })?,
    };
    let n = loadings.nrows();
    let t = estimate.t();
    let r = estimate.rank();
    if loadings.ncols() != r {
        return Err(UfmError::DimensionMismatch {
            expected: format!("{n}x{r} loadings"),
            actual: format!("{}x{}", loadings.nrows(), loadings.ncols()),
        });
    }
    let common = loadings * estimate.factors.transpose() / ((n * t) as f64).sqrt();
    let mut sv = singular_values_desc(&common);
    sv.truncate(r);
    let threshold = c * (n as f64).powf((alpha - 1.0) / 2.0) / (n as f64).ln();
    let selected = sv.iter().filter(|&&s| s >= threshold).count();
    Ok(StrengthReport {
        target,
        alpha,
        constant: c,
        threshold,
        singular_values: sv,
        selected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn svt_soft_thresholds_singular_values() {
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 1.0, 0.2]));
        let (out, sv) = svt(&a, 0.5).unwrap();
        assert_eq!(sv.len(), 2);
        assert!((sv[0] - 2.5).abs() < 1e-12 && (sv[1] - 0.5).abs() < 1e-12);
        let sv_out = singular_values_desc(&out);
        assert!((sv_out[0] - 2.5).abs() < 1e-12);
        assert!((sv_out[1] - 0.5).abs() < 1e-12);
        assert!(sv_out[2].abs() < 1e-12);
    }

    #[test]
    fn svt_matches_direct_svd_on_wide_and_tall() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (n, t) in [(5, 8), (8, 5)] {
            let a = DMatrix::from_fn(n, t, |_, _| rng.random_range(-1.0..1.0));
            let kappa = 0.7;
            let (out, _) = svt(&a, kappa).unwrap();
            let svd = a.clone().svd(true, true);
            let shrunk = svd.singular_values.map(|s| (s - kappa).max(0.0));
            let direct = svd.u.unwrap() * DMatrix::from_diagonal(&shrunk) * svd.v_t.unwrap();
            assert!((out - direct).amax() < 1e-10);
        }
    }

    #[test]
    fn huge_penalty_kills_everything() {
        let y = DMatrix::from_fn(10, 12, |i, t| (i as f64 + 1.0) * (t as f64 * 0.3).sin());
        let fit = pel_fit(&y, 0.5, 1e6, &PelSettings::for_panel(10, 12)).unwrap();
        assert!(fit.common.amax() < 1e-12);
    }

    #[test]
    fn zero_panel_gives_rank_zero() {
        let y = DMatrix::zeros(12, 12);
        let grid = QuantileGrid::new(9, 0.04).unwrap();
        let rep = estimate_r(&y, &grid, 0.2, 0.05).unwrap();
        assert_eq!(rep.r_hat, 0);
        assert!(rep.eigenvalues.iter().all(|&v| v < 1e-12));
        assert_eq!(rep.eigenvalues.len(), 12);
    }

    #[test]
    fn noiseless_rank_one_recovered() {
        let (n, t) = (30, 30);
        let y = DMatrix::from_fn(n, t, |i, s| (0.5 + i as f64 / n as f64) * (1.0 + (s as f64 * 0.7).cos()));
        let fit = pel_fit(&y, 0.5, 0.2, &PelSettings::for_panel(n, t)).unwrap();
        let rel = (&fit.common - &y).norm() / y.norm();
        assert!(rel <= 0.15, "relative error {rel}");
    }

    #[test]
    fn eigenvalues_match_stacked_singular_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mats: Vec<_> = (0..3).map(|_| DMatrix::from_fn(6, 7, |_, _| rng.random_range(-1.0..1.0))).collect();
        let eig = stacked_eigenvalues(&mats).unwrap();
        let mut stacked = DMatrix::zeros(18, 7);
        for (m, l) in mats.iter().enumerate() {
            stacked.rows_mut(6 * m, 6).copy_from(l);
        }
        let sv = singular_values_desc(&(stacked / (3.0 * 6.0 * 7.0f64).sqrt()));
        assert_eq!(eig.len(), 6);
        for j in 0..6 {
            assert!((eig[j] - sv[j] * sv[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn warm_start_is_orthonormal() {
        let (n, t) = (20, 16);
        let y = DMatrix::from_fn(n, t, |i, s| (1.0 + i as f64 * 0.1) * (1.0 + s as f64 * 0.05));
        let grid = QuantileGrid::new(3, 0.04).unwrap();
        let rep = estimate_r(&y, &grid, 0.2, 0.01).unwrap();
        let est = warm_start(&rep, 1, 1e3).unwrap();
        assert!(est.factor_orthonormality_error() < 1e-10);
        let rel = (est.common_component(1) - &y).norm() / y.norm();
        assert!(rel < 0.15, "relative error {rel}");
    }

    #[test]
    fn selector_counts_against_threshold() {
        let t = 10;
        let f = DMatrix::from_element(t, 1, 1.0);
        let l = DMatrix::from_element(20, 1, 0.5);
        let est = FactorEstimate {
            factors: f,
            loadings: vec![l.clone()],
            eigenvalues: vec![0.25],
            diagnostics: Default::default(),
        };
        let rep = select_factors(&est, None, StrengthTarget::Quantile(0), 1.0, 1.0).unwrap();
        assert!((rep.singular_values[0] - 0.5).abs() < 1e-12);
        assert!((rep.threshold - 1.0 / 20f64.ln()).abs() < 1e-12);
        assert_eq!(rep.selected, 1);
        let tiny = l * 0.01;
        let rep = select_factors(&est, Some(&tiny), StrengthTarget::Mean, 1.0, 1.0).unwrap();
        assert_eq!(rep.selected, 0);
        assert!(select_factors(&est, None, StrengthTarget::Mean, 1.0, 1.0).is_err());
    }
}
