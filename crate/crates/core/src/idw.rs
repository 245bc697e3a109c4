//! Inverse-density weighting: four-region sample splitting, cross-fitted
//! factors and shifted-level loadings, five-point derivative estimates of
//! `1/f_{τ,it}(0)`, and the weighted refit.
//!
//! Quadrant `(a, b)` covers rows `N_a` and columns `T_b`. Its weights use
//! factors estimated on the other row half and loadings regressed on the
//! other column half, so no cell of the quadrant itself is read.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{SolveTally, Warning};
use crate::error::{Result, UfmError};
use crate::kernel::SmoothKernel;
use crate::linalg::to_row_major;
use crate::panel::{EstimatorConfig, FactorEstimate, PanelMatrix, PanelSource, QuantileGrid, Stencil};
use crate::rank::warm_start_for;
use crate::sqr::{solve_design, SqrDesign, SqrSettings, Taus};
use crate::ufa::{fit_matrix, ufa_fit};

/// Share of clipped weights above which a warning is raised.
pub const CLIP_WARN_FRACTION: f64 = 0.1;
pub const CLIP_LO_FACTOR: f64 = 0.05;
pub const CLIP_HI_FACTOR: f64 = 20.0;

/// Row halves `n1 = 0..N/2`, `n2 = N/2..N` and column halves likewise
/// (zero-based, floor split).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndex {
    pub n1: Vec<usize>,
    pub n2: Vec<usize>,
    pub t1: Vec<usize>,
    pub t2: Vec<usize>,
}

impl SplitIndex {
    pub fn new(n: usize, t: usize) -> Result<Self> {
        if n < 4 || t < 4 {
            return Err(UfmError::InvalidPanel(format!(
                "sample splitting needs N >= 4 and T >= 4, got {n}x{t}"
            )));
        }
        Ok(Self {
            n1: (0..n / 2).collect(),
            n2: (n / 2..n).collect(),
            t1: (0..t / 2).collect(),
            t2: (t / 2..t).collect(),
        })
    }

    /// Row half `a` (1 or 2).
    pub fn rows(&self, a: usize) -> &[usize] {
        if a == 1 {
            &self.n1
        } else {
            &self.n2
        }
    }

    /// Column half `b` (1 or 2).
    pub fn cols(&self, b: usize) -> &[usize] {
        if b == 1 {
            &self.t1
        } else {
            &self.t2
        }
    }
}

pub fn split_panel<S: PanelSource + ?Sized>(panel: &S) -> Result<SplitIndex> {
    SplitIndex::new(panel.n(), panel.t())
}

/// Estimated inverse densities indexed `(m, i, t)`, clipped to `[clip_lo, clip_hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    m: usize,
    n: usize,
    t: usize,
    w: Vec<f64>,
    pub clip_lo: f64,
    pub clip_hi: f64,
    /// Fraction of entries moved by clipping.
    pub clipped_fraction: f64,
}

impl WeightTensor {
    /// Unit weights.
    pub fn ones(m: usize, n: usize, t: usize) -> Self {
        Self {
            m,
            n,
            t,
            w: vec![1.0; m * n * t],
            clip_lo: 1.0,
            clip_hi: 1.0,
            clipped_fraction: 0.0,
        }
    }

    /// Wraps already-positive weights laid out `(m, i, t)` with `t` fastest.
    pub fn from_values(m: usize, n: usize, t: usize, w: Vec<f64>) -> Result<Self> {
        if w.len() != m * n * t {
            return Err(UfmError::DimensionMismatch {
                expected: format!("{} weights", m * n * t),
                actual: format!("{}", w.len()),
            });
        }
        if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(UfmError::InvalidConfig("weights must be positive and finite".into()));
        }
        let lo = w.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = w.iter().copied().fold(0.0, f64::max);
        Ok(Self {
            m,
            n,
            t,
            w,
            clip_lo: lo,
            clip_hi: hi,
            clipped_fraction: 0.0,
        })
    }

    /// Clips raw estimates to `[0.05 med, 20 med]`. A non-positive median
    /// makes the bounds meaningless, so unit weights are returned instead.
    pub fn from_raw(m: usize, n: usize, t: usize, raw: Vec<f64>) -> Result<(Self, Vec<Warning>)> {
        if raw.len() != m * n * t {
            return Err(UfmError::DimensionMismatch {
                expected: format!("{} weights", m * n * t),
                actual: format!("{}", raw.len()),
            });
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(UfmError::NonFinite("raw inverse-density weights"));
        }
        let med = median(&raw);
        let mut warnings = Vec::new();
        if !(med > 0.0) {
            warnings.push(Warning::NonPositiveWeightMedian { median: med });
            return Ok((Self::ones(m, n, t), warnings));
        }
        let (lo, hi) = (CLIP_LO_FACTOR * med, CLIP_HI_FACTOR * med);
        let mut clipped = 0usize;
        let w: Vec<f64> = raw
            .into_iter()
            .map(|v| {
                if v < lo || v > hi {
                    clipped += 1;
                }
                v.clamp(lo, hi)
            })
            .collect();
        let fraction = clipped as f64 / w.len() as f64;
        if fraction > CLIP_WARN_FRACTION {
            warnings.push(Warning::ClippedFraction {
                fraction,
                clip_lo: lo,
                clip_hi: hi,
            });
        }
        Ok((
            Self {
                m,
                n,
                t,
                w,
                clip_lo: lo,
                clip_hi: hi,
                clipped_fraction: fraction,
            },
            warnings,
        ))
    }

    /// `(M, N, T)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.m, self.n, self.t)
    }

    pub fn get(&self, m: usize, i: usize, t: usize) -> f64 {
        self.w[(m * self.n + i) * self.t + t]
    }

    /// Weights of row `i` at level `m`, over `t`.
    pub fn row(&self, m: usize, i: usize) -> &[f64] {
        let start = (m * self.n + i) * self.t;
        &self.w[start..start + self.t]
    }

    pub fn values(&self) -> &[f64] {
        &self.w
    }

    /// N x T slice at level `m`.
    pub fn level_matrix(&self, m: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.t, |i, t| self.get(m, i, t))
    }

    /// Every weight multiplied by `c > 0`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.w.iter_mut().for_each(|v| *v *= c);
        out.clip_lo *= c;
        out.clip_hi *= c;
        out
    }

    pub fn mean(&self) -> f64 {
        self.w.iter().sum::<f64>() / self.w.len() as f64
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}

/// Five-point derivative of a loading path from values at the stencil's
/// offsets (in the order of [`Stencil::offsets`]).
pub fn fpdf_derivative(values: &[&[f64]], h_d: f64, stencil: Stencil) -> Vec<f64> {
    let coeffs: &[f64] = match stencil {
        Stencil::Central => &[1.0, -8.0, 8.0, -1.0],
        Stencil::Forward | Stencil::Backward => &[-25.0, 48.0, -36.0, 16.0, -3.0],
    };
    assert_eq!(values.len(), coeffs.len(), "stencil needs {} values", coeffs.len());
    let denom = match stencil {
        Stencil::Backward => -12.0 * h_d,
        _ => 12.0 * h_d,
    };
    let r = values[0].len();
    (0..r)
        .map(|j| coeffs.iter().zip(values).map(|(c, v)| c * v[j]).sum::<f64>() / denom)
        .collect()
}

/// Loadings of the rows `rows` regressed on the columns `cols` against fixed
/// factors, at every shifted level required by the grid's stencils.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedLoadings {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    /// `table[m][k]` is `|rows| x r` at level `τ_m + offsets(m)[k] h_d`.
    pub table: Vec<Vec<DMatrix<f64>>>,
}

impl ShiftedLoadings {
    /// Derivative of `λ_i(·)` at `τ_m` for the row at position `pos` in `rows`.
    pub fn derivative(&self, grid: &QuantileGrid, m: usize, pos: usize) -> Vec<f64> {
        let rows: Vec<Vec<f64>> = self.table[m]
            .iter()
            .map(|l| l.row(pos).iter().copied().collect())
            .collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        fpdf_derivative(&refs, grid.shift(), grid.stencil(m))
    }
}

/// Cross-fitted pieces for all four quadrants.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossFitSet {
    pub split: SplitIndex,
    /// Full-length factors from the top rows `N_1`.
    pub f_top: DMatrix<f64>,
    /// Full-length factors from the bottom rows `N_2`.
    pub f_bottom: DMatrix<f64>,
    pub lam_tl: ShiftedLoadings,
    pub lam_tr: ShiftedLoadings,
    pub lam_bl: ShiftedLoadings,
    pub lam_br: ShiftedLoadings,
    pub warnings: Vec<Warning>,
}

fn all_shifted_levels(grid: &QuantileGrid) -> Result<()> {
    for m in 0..grid.m_count() {
        for &k in grid.stencil(m).offsets() {
            let tau = grid.shifted(m, k);
            if !(tau > 0.0 && tau < 1.0) {
                return Err(UfmError::InvalidConfig(format!(
                    "shifted level {tau} from tau = {} and h_d = {} leaves (0,1)",
                    grid.levels()[m],
                    grid.shift()
                )));
            }
        }
    }
    Ok(())
}

fn subsample_err(e: UfmError) -> UfmError {
    match e {
        UfmError::EigenFailure(msg) => UfmError::SubsampleRankDeficient(msg),
        other => other,
    }
}

/// UFA on the rows `rows` of `source` (all columns), started from the
/// penalized warm start of that sub-panel.
pub fn half_panel_factors<S: PanelSource + ?Sized>(
    source: &S,
    rows: &[usize],
    grid: &QuantileGrid,
    config: &EstimatorConfig,
    r: usize,
    stage: &str,
) -> Result<(DMatrix<f64>, Vec<Warning>)> {
    let cols: Vec<usize> = (0..source.t()).collect();
    let y = source.submatrix(rows, &cols);
    let init = warm_start_for(&y, grid, config, r).map_err(subsample_err)?;
    let est = fit_matrix(&y, grid, config, &init.factors, &init.loadings, None, stage).map_err(subsample_err)?;
    Ok((est.factors, est.diagnostics.warnings))
}

/// Row-wise smoothed QR of `Y[rows, cols]` on `factors[cols, ·]` at every
/// shifted level of the grid.
pub fn shifted_loadings<S: PanelSource + ?Sized>(
    source: &S,
    rows: &[usize],
    cols: &[usize],
    factors: &DMatrix<f64>,
    grid: &QuantileGrid,
    config: &EstimatorConfig,
) -> Result<(ShiftedLoadings, SolveTally)> {
    all_shifted_levels(grid)?;
    let r = factors.ncols();
    let y = source.submatrix(rows, cols);
    let f_sub = DMatrix::from_fn(cols.len(), r, |s, j| factors[(cols[s], j)]);
    let x = to_row_major(&f_sub);
    let kernel = SmoothKernel::gaussian(config.kernel_order);
    let bound = config.box_for(&y);
    let settings = SqrSettings {
        kernel: &kernel,
        h: config.bandwidth(source.n(), source.t()),
        bound,
        tol: config.inner_tol,
        max_iters: config.max_inner_iters,
    };
    // least-squares starting values, one per row
    let gram = f_sub.transpose() * &f_sub;
    let chol = gram.clone().cholesky();
    let y_rows = y.transpose();
    let jobs: Vec<(usize, usize)> = (0..grid.m_count())
        .flat_map(|m| (0..grid.stencil(m).offsets().len()).map(move |k| (m, k)))
        .collect();
    let results: Vec<Result<(DMatrix<f64>, SolveTally)>> = jobs
        .par_iter()
        .map(|&(m, k)| {
            let tau = grid.shifted(m, grid.stencil(m).offsets()[k]);
            let mut out = DMatrix::zeros(rows.len(), r);
            let mut tally = SolveTally::default();
            for pos in 0..rows.len() {
                let ys = y_rows.column(pos);
                let init: Vec<f64> = match &chol {
                    Some(c) => c
                        .solve(&(f_sub.transpose() * ys))
                        .iter()
                        .map(|v| v.clamp(-bound, bound))
                        .collect(),
                    None => vec![0.0; r],
                };
                let design = SqrDesign {
                    y: ys.as_slice(),
                    x: &x,
                    r,
                    taus: Taus::Shared(tau),
                    weights: None,
                };
                let sol = solve_design(&design, &settings, &init)?;
                tally.merge(sol.tally());
                for j in 0..r {
                    out[(pos, j)] = sol.theta[j];
                }
            }
            Ok((out, tally))
        })
        .collect();
    let mut table: Vec<Vec<DMatrix<f64>>> = (0..grid.m_count()).map(|_| Vec::new()).collect();
    let mut tally = SolveTally::default();
    for ((m, _), res) in jobs.into_iter().zip(results) {
        let (mat, tl) = res?;
        tally.merge(tl);
        table[m].push(mat);
    }
    Ok((
        ShiftedLoadings {
            rows: rows.to_vec(),
            cols: cols.to_vec(),
            table,
        },
        tally,
    ))
}

/// Half-panel factors and the four shifted-level loading tables for all rows.
pub fn crossfit_estimates<S: PanelSource + ?Sized>(
    source: &S,
    grid: &QuantileGrid,
    config: &EstimatorConfig,
    split: &SplitIndex,
) -> Result<CrossFitSet> {
    let r = config.fixed_rank()?;
    all_shifted_levels(grid)?;
    let (top, bottom) = rayon::join(
        || half_panel_factors(source, &split.n1, grid, config, r, "crossfit_top"),
        || half_panel_factors(source, &split.n2, grid, config, r, "crossfit_bottom"),
    );
    let (f_top, mut warnings) = top?;
    let (f_bottom, w_bottom) = bottom?;
    warnings.extend(w_bottom);
    let all_rows: Vec<usize> = (0..source.n()).collect();
    let mut tally = SolveTally::default();
    let mut table = |cols: &[usize], f: &DMatrix<f64>| -> Result<ShiftedLoadings> {
        let (tab, tl) = shifted_loadings(source, &all_rows, cols, f, grid, config)?;
        tally.merge(tl);
        Ok(tab)
    };
    let lam_tl = table(&split.t1, &f_top)?;
    let lam_tr = table(&split.t2, &f_top)?;
    let lam_bl = table(&split.t1, &f_bottom)?;
    let lam_br = table(&split.t2, &f_bottom)?;
    warnings.extend(tally.warnings("crossfit_loadings"));
    Ok(CrossFitSet {
        split: split.clone(),
        f_top,
        f_bottom,
        lam_tl,
        lam_tr,
        lam_bl,
        lam_br,
        warnings,
    })
}

/// Raw weights `λ̂⁽¹⁾'_i f̂_t` on quadrant `(a, b)`, one `|N_a| x |T_b|`
/// matrix per level. `table` must hold the quadrant's rows and `factors` is
/// the full-length factor matrix named by the case table.
pub fn quadrant_raw_weights(
    table: &ShiftedLoadings,
    factors: &DMatrix<f64>,
    grid: &QuantileGrid,
    split: &SplitIndex,
    a: usize,
    b: usize,
) -> Vec<DMatrix<f64>> {
    let rows = split.rows(a);
    let cols = split.cols(b);
    (0..grid.m_count())
        .map(|m| {
            let mut out = DMatrix::zeros(rows.len(), cols.len());
            for (p, &i) in rows.iter().enumerate() {
                let pos = table.rows.iter().position(|&row| row == i).expect("row missing from table");
                let d = table.derivative(grid, m, pos);
                for (q, &t) in cols.iter().enumerate() {
                    out[(p, q)] = d.iter().enumerate().map(|(j, dj)| dj * factors[(t, j)]).sum();
                }
            }
            out
        })
        .collect()
}

impl CrossFitSet {
    /// `((w table), v factors)` for quadrant `(a, b)`.
    pub fn case(&self, a: usize, b: usize) -> (&ShiftedLoadings, &DMatrix<f64>) {
        match (a, b) {
            (1, 1) => (&self.lam_br, &self.f_bottom),
            (1, 2) => (&self.lam_bl, &self.f_bottom),
            (2, 1) => (&self.lam_tr, &self.f_top),
            _ => (&self.lam_tl, &self.f_top),
        }
    }
}

/// Weights for quadrant `(a, b)` computed from scratch, touching only the
/// data the case table allows. Matches the corresponding block of
/// [`inverse_density_weights`] before clipping.
pub fn quadrant_weights_from_source<S: PanelSource + ?Sized>(
    source: &S,
    grid: &QuantileGrid,
    config: &EstimatorConfig,
    split: &SplitIndex,
    a: usize,
    b: usize,
) -> Result<Vec<DMatrix<f64>>> {
    let r = config.fixed_rank()?;
    let other_rows = split.rows(3 - a);
    let stage = if a == 1 { "crossfit_bottom" } else { "crossfit_top" };
    let (f_v, _) = half_panel_factors(source, other_rows, grid, config, r, stage)?;
    let (table, _) = shifted_loadings(source, split.rows(a), split.cols(3 - b), &f_v, grid, config)?;
    Ok(quadrant_raw_weights(&table, &f_v, grid, split, a, b))
}

/// Unclipped weights laid out `(m, i, t)`.
pub fn raw_weights(crossfit: &CrossFitSet, grid: &QuantileGrid, n: usize, t: usize) -> Vec<f64> {
    let m_count = grid.m_count();
    let mut raw = vec![0.0; m_count * n * t];
    for a in 1..=2 {
        for b in 1..=2 {
            let (table, f) = crossfit.case(a, b);
            let blocks = quadrant_raw_weights(table, f, grid, &crossfit.split, a, b);
            let rows = crossfit.split.rows(a);
            let cols = crossfit.split.cols(b);
            for (m, blk) in blocks.iter().enumerate() {
                for (p, &i) in rows.iter().enumerate() {
                    for (q, &s) in cols.iter().enumerate() {
                        raw[(m * n + i) * t + s] = blk[(p, q)];
                    }
                }
            }
        }
    }
    raw
}

/// Assembles and clips the inverse-density weights from a cross-fit set.
pub fn inverse_density_weights(
    crossfit: &CrossFitSet,
    grid: &QuantileGrid,
    n: usize,
    t: usize,
) -> Result<(WeightTensor, Vec<Warning>)> {
    let raw = raw_weights(crossfit, grid, n, t);
    WeightTensor::from_raw(grid.m_count(), n, t, raw)
}

/// Weighted refit starting from a given (typically unweighted) estimate.
pub fn idw_ufa_fit_from(
    panel: &PanelMatrix,
    grid: &QuantileGrid,
    config: &EstimatorConfig,
    init: &FactorEstimate,
) -> Result<(FactorEstimate, WeightTensor)> {
    panel.require_estimable()?;
    let split = split_panel(panel)?;
    let crossfit = crossfit_estimates(panel, grid, config, &split)?;
    let (weights, clip_warnings) = inverse_density_weights(&crossfit, grid, panel.n(), panel.t())?;
    let mut est = ufa_fit(panel, grid, config, init, Some(&weights))?;
    let h = config.bandwidth(panel.n(), panel.t());
    let mut warnings = crossfit.warnings;
    if grid.shift() >= h {
        warnings.push(Warning::BandwidthBand { h, h_d: grid.shift() });
    }
    warnings.extend(clip_warnings);
    warnings.append(&mut est.diagnostics.warnings);
    est.diagnostics.warnings = warnings;
    Ok((est, weights))
}

/// Full pipeline: warm start, unweighted fit, cross-fitted weights, weighted refit.
pub fn idw_ufa_fit(
    panel: &PanelMatrix,
    grid: &QuantileGrid,
    config: &EstimatorConfig,
) -> Result<(FactorEstimate, WeightTensor)> {
    let r = config.fixed_rank()?;
    panel.require_estimable()?;
    let init = warm_start_for(panel.values(), grid, config, r)?;
    let ufa = ufa_fit(panel, grid, config, &init, None)?;
    idw_ufa_fit_from(panel, grid, config, &ufa)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_floor_halves() {
        let s = SplitIndex::new(5, 4).unwrap();
        assert_eq!(s.n1, vec![0, 1]);
        assert_eq!(s.n2, vec![2, 3, 4]);
        assert_eq!(s.t1, vec![0, 1]);
        assert_eq!(s.t2, vec![2, 3]);
        let s = SplitIndex::new(50, 50).unwrap();
        assert_eq!((s.n1.len(), s.n2.len(), s.t1.len(), s.t2.len()), (25, 25, 25, 25));
        assert!(SplitIndex::new(3, 8).is_err());
    }

    #[test]
    fn fpdf_constant_and_quartic() {
        let c = [2.5];
        let vals = [&c[..], &c[..], &c[..], &c[..]];
        assert_eq!(fpdf_derivative(&vals, 0.04, Stencil::Central), vec![0.0]);
        let vals5 = [&c[..]; 5];
        assert_eq!(fpdf_derivative(&vals5, 0.04, Stencil::Forward), vec![0.0]);
        assert_eq!(fpdf_derivative(&vals5, 0.04, Stencil::Backward), vec![0.0]);

        let h = 0.04;
        let tau = 0.5;
        let at = |k: i32| vec![(tau + k as f64 * h).powi(3)];
        for stencil in [Stencil::Central, Stencil::Forward, Stencil::Backward] {
            let v: Vec<Vec<f64>> = stencil.offsets().iter().map(|&k| at(k)).collect();
            let refs: Vec<&[f64]> = v.iter().map(Vec::as_slice).collect();
            let d = fpdf_derivative(&refs, h, stencil)[0];
            assert!((d - 0.75).abs() < 1e-10, "{stencil:?}: {d}");
        }
    }

    #[test]
    fn clipping_and_median_fallback() {
        let raw = vec![1.0, 1.0, 1.0, 100.0, 0.0, 1.0, 1.0, 1.0];
        let (w, warns) = WeightTensor::from_raw(1, 2, 4, raw).unwrap();
        assert_eq!(w.clip_lo, 0.05);
        assert_eq!(w.clip_hi, 20.0);
        assert_eq!(w.get(0, 0, 3), 20.0);
        assert_eq!(w.get(0, 1, 0), 0.05);
        assert!((w.clipped_fraction - 0.25).abs() < 1e-15);
        assert!(matches!(warns[0], Warning::ClippedFraction { .. }));

        let (w, warns) = WeightTensor::from_raw(1, 2, 2, vec![0.0; 4]).unwrap();
        assert!(w.values().iter().all(|&v| v == 1.0));
        assert!(matches!(warns[0], Warning::NonPositiveWeightMedian { .. }));
    }

    #[test]
    fn weight_layout() {
        let w = WeightTensor::from_values(2, 2, 3, (1..=12).map(f64::from).collect()).unwrap();
        assert_eq!(w.get(1, 0, 2), 9.0);
        assert_eq!(w.row(0, 1), &[4.0, 5.0, 6.0]);
        assert_eq!(w.level_matrix(1)[(1, 0)], 10.0);
    }
}
