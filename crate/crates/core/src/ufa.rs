//! Alternating smoothed-QR estimation of one factor matrix shared by all
//! grid levels, followed by the eigen-normalization that pins down rotation.
//!
//! Each sweep first re-solves every factor `f_t` against the previous sweep's
//! loadings (pooling all levels and rows), then every loading `λ_i(τ_m)`
//! against the new factors. The loop stops once the largest change in any
//! common component `λ_i(τ_m)'f_t` drops below `outer_tol`.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::diagnostics::{SolveTally, Warning};
use crate::error::{Result, UfmError};
use crate::idw::WeightTensor;
use crate::kernel::SmoothKernel;
use crate::linalg::{fix_column_signs, min_leading_gap, sym_eigen_desc, to_row_major};
use crate::panel::{EstimatorConfig, FactorEstimate, FitDiagnostics, PanelMatrix, QuantileGrid};
use crate::sqr::{solve_design, SqrDesign, SqrSettings, Taus};

const EIGEN_GAP_WARN: f64 = 1e-10;

/// Runs the alternating estimator on a full panel from `init`.
///
/// When `weights` is given, every `(m, i, t)` term of the objective is scaled
/// by the matching weight, which is how the inverse-density weighted refit runs.
pub fn ufa_fit(
    panel: &PanelMatrix,
    grid: &QuantileGrid,
    config: &EstimatorConfig,
    init: &FactorEstimate,
    weights: Option<&WeightTensor>,
) -> Result<FactorEstimate> {
    panel.require_estimable()?;
    fit_matrix(panel.values(), grid, config, &init.factors, &init.loadings, weights, "ufa")
}

/// Matrix-level entry point shared with the half-panel fits.
pub fn fit_matrix(
    y: &DMatrix<f64>,
    grid: &QuantileGrid,
    config: &EstimatorConfig,
    init_factors: &DMatrix<f64>,
    init_loadings: &[DMatrix<f64>],
    weights: Option<&WeightTensor>,
    stage: &str,
) -> Result<FactorEstimate> {
    config.validate()?;
    let (n, t) = (y.nrows(), y.ncols());
    let m_count = grid.m_count();
    let r = init_factors.ncols();
    if r == 0 {
        return Err(UfmError::InvalidConfig("rank must be positive".into()));
    }
    if let crate::panel::RankChoice::Fixed(cr) = config.rank {
        if cr != r {
            return Err(UfmError::DimensionMismatch {
                expected: format!("initial estimate of rank {cr}"),
                actual: format!("rank {r}"),
            });
        }
    }
    if 2 * r >= n.min(t) {
        return Err(UfmError::RankTooLarge { rank: r, n, t });
    }
    if init_factors.nrows() != t
        || init_loadings.len() != m_count
        || init_loadings.iter().any(|l| l.nrows() != n || l.ncols() != r)
    {
        return Err(UfmError::DimensionMismatch {
            expected: format!("{t}x{r} factors and {m_count} loading matrices of {n}x{r}"),
            actual: format!(
                "{}x{} factors and {} loading matrices",
                init_factors.nrows(),
                init_factors.ncols(),
                init_loadings.len()
            ),
        });
    }
    if let Some(w) = weights {
        if w.shape() != (m_count, n, t) {
            return Err(UfmError::DimensionMismatch {
                expected: format!("weights of shape ({m_count}, {n}, {t})"),
                actual: format!("{:?}", w.shape()),
            });
        }
    }

    let normed = weights.map(|w| w.scaled(1.0 / w.mean()));
    let weights = normed.as_ref();

    let kernel = SmoothKernel::gaussian(config.kernel_order);
    let bound = config.box_for(y);
    let settings = SqrSettings {
        kernel: &kernel,
        h: config.bandwidth(n, t),
        bound,
        tol: config.inner_tol,
        max_iters: config.max_inner_iters,
    };
    let levels = grid.levels();

    // Layouts for the two kinds of subproblem.
    let y_rows = y.transpose(); // column i = row i of Y
    let taus_fac: Vec<f64> = (0..m_count)
        .flat_map(|m| std::iter::repeat_n(levels[m], n))
        .collect();
    let w_by_t: Option<Vec<f64>> = weights.map(|w| {
        let mut out = vec![0.0; t * m_count * n];
        for m in 0..m_count {
            for i in 0..n {
                for (s, v) in w.row(m, i).iter().enumerate() {
                    out[(s * m_count + m) * n + i] = *v;
                }
            }
        }
        out
    });

    let mut factors = init_factors.map(|v| v.clamp(-bound, bound));
    let mut loadings: Vec<DMatrix<f64>> = init_loadings
        .iter()
        .map(|l| l.map(|v| v.clamp(-bound, bound)))
        .collect();
    let mut common_prev: Vec<DMatrix<f64>> =
        loadings.iter().map(|l| l * factors.transpose()).collect();

    let mut diag = FitDiagnostics::default();
    let mut tally = SolveTally::default();
    let mut last_change = f64::INFINITY;
    for sweep in 1..=config.max_outer_iters {
        // step 1.1: factors given the previous loadings
        let x_fac: Vec<f64> = loadings.iter().flat_map(to_row_major).collect();
        let fac_results: Vec<Result<(Vec<f64>, SolveTally)>> = (0..t)
            .into_par_iter()
            .map(|s| {
                let col = y.column(s);
                let ys: Vec<f64> = (0..m_count).flat_map(|_| col.iter().copied()).collect();
                let w = w_by_t.as_ref().map(|w| &w[s * m_count * n..(s + 1) * m_count * n]);
                let design = SqrDesign {
                    y: &ys,
                    x: &x_fac,
                    r,
                    taus: Taus::PerObs(&taus_fac),
                    weights: w,
                };
                let init: Vec<f64> = factors.row(s).iter().copied().collect();
                let sol = solve_design(&design, &settings, &init)?;
                let tally = sol.tally();
                Ok((sol.theta, tally))
            })
            .collect();
        let mut sweep_tally = SolveTally::default();
        for (s, res) in fac_results.into_iter().enumerate() {
            let (theta, tl) = res?;
            sweep_tally.merge(tl);
            for j in 0..r {
                factors[(s, j)] = theta[j];
            }
        }

        // step 1.2: loadings given the new factors
        let x_load = to_row_major(&factors);
        let load_results: Vec<Result<(Vec<f64>, SolveTally)>> = (0..m_count * n)
            .into_par_iter()
            .map(|k| {
                let (m, i) = (k / n, k % n);
                let ys = y_rows.column(i);
                let design = SqrDesign {
                    y: ys.as_slice(),
                    x: &x_load,
                    r,
                    taus: Taus::Shared(levels[m]),
                    weights: weights.map(|w| w.row(m, i)),
                };
                let init: Vec<f64> = loadings[m].row(i).iter().copied().collect();
                let sol = solve_design(&design, &settings, &init)?;
                let tally = sol.tally();
                Ok((sol.theta, tally))
            })
            .collect();
        for (k, res) in load_results.into_iter().enumerate() {
            let (theta, tl) = res?;
            sweep_tally.merge(tl);
            let (m, i) = (k / n, k % n);
            for j in 0..r {
                loadings[m][(i, j)] = theta[j];
            }
        }
        tally = sweep_tally;

        let mut change: f64 = 0.0;
        for m in 0..m_count {
            let common = &loadings[m] * factors.transpose();
            change = change.max((&common - &common_prev[m]).amax());
            common_prev[m] = common;
        }
        last_change = change;
        diag.outer_iterations = sweep;
        if change < config.outer_tol {
            diag.converged = true;
            break;
        }
    }
    diag.last_change = last_change;
    if !diag.converged {
        diag.warnings.push(Warning::NoConverge {
            stage: stage.to_string(),
            iterations: diag.outer_iterations,
            last_change,
        });
    }
    diag.warnings.extend(tally.warnings(stage));

    let mut est = normalize(&loadings, &factors)?;
    est.diagnostics.outer_iterations = diag.outer_iterations;
    est.diagnostics.converged = diag.converged;
    est.diagnostics.last_change = diag.last_change;
    let norm_warnings = std::mem::take(&mut est.diagnostics.warnings);
    est.diagnostics.warnings = diag.warnings;
    est.diagnostics.warnings.extend(norm_warnings);
    Ok(est)
}

/// Rotates `(Λ_temp(·), F_temp)` so that `F'F/T = I_r` and `Σ_m Λ'Λ/(MN)` is
/// diagonal with decreasing entries, keeping every `Λ(τ_m)F'` unchanged.
///
/// The `T x T` matrix `Σ_m L'L/(MNT)` has rank `r`, so its leading eigenpairs
/// are obtained from the `r x r` matrix `R S R'/T`, where `F_temp = QR` and
/// `S = Σ_m Λ_temp'Λ_temp/(MN)`.
pub fn normalize(loadings: &[DMatrix<f64>], factors: &DMatrix<f64>) -> Result<FactorEstimate> {
    let t = factors.nrows();
    let r = factors.ncols();
    if loadings.is_empty() {
        return Err(UfmError::InvalidConfig("no loading matrices to normalize".into()));
    }
    let n = loadings[0].nrows();
    let m_count = loadings.len();
    if t < r {
        return Err(UfmError::EigenFailure(format!("{t}x{r} factor matrix cannot have full column rank")));
    }
    let qr = factors.clone().qr();
    let q = qr.q();
    let rmat = qr.r();
    let diag_max = (0..r).map(|j| rmat[(j, j)].abs()).fold(0.0, f64::max);
    let diag_min = (0..r).map(|j| rmat[(j, j)].abs()).fold(f64::INFINITY, f64::min);
    if !(diag_min > 1e-12 * diag_max.max(f64::MIN_POSITIVE)) || !diag_max.is_finite() {
        return Err(UfmError::EigenFailure("factor matrix is rank deficient".into()));
    }
    let mut s = DMatrix::zeros(r, r);
    for l in loadings {
        s += l.transpose() * l;
    }
    s /= (m_count * n) as f64;
    let a = &rmat * s * rmat.transpose() / t as f64;
    let (vals, vecs) = sym_eigen_desc(&a)?;
    let sqrt_t = (t as f64).sqrt();
    let mut f = &q * &vecs * sqrt_t;
    let signs = fix_column_signs(&mut f);
    // Λ(τ_m) = L(τ_m) F / T = Λ_temp R' V / √T, with the same column signs as F.
    let mut rot = rmat.transpose() * &vecs / sqrt_t;
    for (j, sg) in signs.iter().enumerate() {
        if *sg < 0.0 {
            rot.column_mut(j).neg_mut();
        }
    }
    let new_loadings: Vec<DMatrix<f64>> = loadings.iter().map(|l| l * &rot).collect();
    let mut warnings = Vec::new();
    if r > 1 {
        let gap = min_leading_gap(&vals, r - 1);
        if gap < EIGEN_GAP_WARN {
            warnings.push(Warning::NearDegenerateEigs {
                stage: "normalize".into(),
                gap,
            });
        }
    }
    Ok(FactorEstimate {
        factors: f,
        loadings: new_loadings,
        eigenvalues: vals,
        diagnostics: FitDiagnostics {
            warnings,
            ..FitDiagnostics::default()
        },
    })
}

/// Normalizes full-rank common components `L(τ_m)` (N x T each) by the
/// leading `r` eigenvectors of `Σ_m L'L/(MNT)`. Returns the estimate and all
/// `T` eigenvalues in decreasing order.
pub fn normalize_common(commons: &[DMatrix<f64>], r: usize) -> Result<(FactorEstimate, Vec<f64>)> {
    let m_count = commons.len();
    if m_count == 0 {
        return Err(UfmError::InvalidConfig("no common components".into()));
    }
    let (n, t) = commons[0].shape();
    let mut gram = DMatrix::zeros(t, t);
    for l in commons {
        gram += l.transpose() * l;
    }
    gram /= (m_count * n * t) as f64;
    let (vals, vecs) = sym_eigen_desc(&gram)?;
    let sqrt_t = (t as f64).sqrt();
    let mut f = vecs.columns(0, r) * sqrt_t;
    fix_column_signs(&mut f);
    let loadings: Vec<DMatrix<f64>> = commons.iter().map(|l| l * &f / t as f64).collect();
    let mut warnings = Vec::new();
    if r >= 1 && r < vals.len() {
        let gap = min_leading_gap(&vals, r);
        if gap < EIGEN_GAP_WARN {
            warnings.push(Warning::NearDegenerateEigs {
                stage: "normalize_common".into(),
                gap,
            });
        }
    }
    let est = FactorEstimate {
        factors: f,
        loadings,
        eigenvalues: vals[..r].to_vec(),
        diagnostics: FitDiagnostics {
            warnings,
            ..FitDiagnostics::default()
        },
    };
    Ok((est, vals))
}

/// Summed smoothed objective `(1/M) Σ_m (1/NT) Σ_{i,t} w ℓ_{τ_m}(Y_it − λ_i(τ_m)'f_t)`.
pub fn ufa_objective(
    y: &DMatrix<f64>,
    grid: &QuantileGrid,
    kernel: &SmoothKernel,
    h: f64,
    factors: &DMatrix<f64>,
    loadings: &[DMatrix<f64>],
    weights: Option<&WeightTensor>,
) -> f64 {
    let (n, t) = y.shape();
    let mut total = 0.0;
    for (m, &tau) in grid.levels().iter().enumerate() {
        let common = &loadings[m] * factors.transpose();
        for i in 0..n {
            for s in 0..t {
                let w = weights.map_or(1.0, |w| w.get(m, i, s));
                total += w * crate::kernel::smoothed_value(kernel, h, tau, common[(i, s)], y[(i, s)]);
            }
        }
    }
    total / (grid.m_count() * n * t) as f64
}
