//! Mean loadings and plug-in asymptotic covariances with the resulting
//! standard errors for factors, loadings and common components.
//!
//! Everything is evaluated in the estimator's own rotation: the unknown
//! rotation cancels when the plug-ins use estimated loadings and factors.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UfmError};
use crate::idw::WeightTensor;
use crate::linalg::sym_inverse_floored;
use crate::panel::{FactorEstimate, QuantileGrid};

/// Condition number of `Φ̂` beyond which standard errors are refused.
pub const PHI_MAX_COND: f64 = 1e12;
const PHI_FLOOR_REL: f64 = 1e-12;

/// Least-squares loadings on the estimated factors and their residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanLoadings {
    /// `λ̄_i = Σ_t f_t Y_it / T`, N x r.
    pub lam_bar: DMatrix<f64>,
    /// `ν_it = Y_it - λ̄_i' f_t`.
    pub residuals: DMatrix<f64>,
}

/// Closed-form mean loadings under `F'F/T = I_r`.
pub fn mean_loadings(y: &DMatrix<f64>, estimate: &FactorEstimate) -> Result<MeanLoadings> {
    let f = &estimate.factors;
    if f.nrows() != y.ncols() {
        return Err(UfmError::DimensionMismatch {
            expected: format!("{} factor rows", y.ncols()),
            actual: format!("{}", f.nrows()),
        });
    }
    let lam_bar = y * f / f.nrows() as f64;
    let residuals = y - &lam_bar * f.transpose();
    Ok(MeanLoadings { lam_bar, residuals })
}

/// Plug-in covariance matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariancePack {
    pub levels: Vec<f64>,
    /// `Φ̂ = Σ_{m,i} λ λ'/(MN)`.
    pub phi: DMatrix<f64>,
    pub phi_inv: DMatrix<f64>,
    pub phi_cond: f64,
    /// `Σ̂_{F,t}` for each t.
    pub sigma_f: Vec<DMatrix<f64>>,
    /// `Σ̂_{Λ,τ_m,i}` indexed `[m][i]`.
    pub sigma_l: Vec<Vec<DMatrix<f64>>>,
    /// `Σ̄_{Λ,i}` for each i, when mean loadings were supplied.
    pub sigma_mean: Option<Vec<DMatrix<f64>>>,
}

pub fn phi_hat(estimate: &FactorEstimate) -> DMatrix<f64> {
    estimate.loading_gram()
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let s = (&*m + m.transpose()) * 0.5;
    *m = s;
}

/// `Σ̂_{F,t} = (1/(M²N)) Σ_{m,m',i} (min(τ_m,τ_m') - τ_m τ_m') w_{mit} w_{m'it} λ_i(τ_m) λ_i(τ_m')'`.
pub fn sigma_f_at(estimate: &FactorEstimate, levels: &[f64], weights: &WeightTensor, t: usize) -> DMatrix<f64> {
    let r = estimate.rank();
    let n = estimate.n();
    let m_count = levels.len();
    let mut acc = DMatrix::zeros(r, r);
    let mut u: Vec<DVector<f64>> = Vec::with_capacity(m_count);
    for i in 0..n {
        u.clear();
        for m in 0..m_count {
            let lam = estimate.loadings[m].row(i).transpose();
            u.push(lam * weights.get(m, i, t));
        }
        for m in 0..m_count {
            for mp in 0..m_count {
                let c = levels[m].min(levels[mp]) - levels[m] * levels[mp];
                acc += &u[m] * u[mp].transpose() * c;
            }
        }
    }
    acc /= (m_count * m_count * n) as f64;
    symmetrize(&mut acc);
    acc
}

/// `Σ̂_{Λ,τ_m,i} = τ(1-τ)(1/T) Σ_t w²_{mit} f_t f_t'`.
pub fn sigma_l_at(estimate: &FactorEstimate, tau: f64, weights: &WeightTensor, m: usize, i: usize) -> DMatrix<f64> {
    let f = &estimate.factors;
    let (t, r) = f.shape();
    let mut acc = DMatrix::zeros(r, r);
    for s in 0..t {
        let w = weights.get(m, i, s);
        let ft = f.row(s).transpose();
        acc += &ft * ft.transpose() * (w * w);
    }
    acc *= tau * (1.0 - tau) / t as f64;
    symmetrize(&mut acc);
    acc
}

/// `Σ̄_{Λ,i} = (1/T) Σ_t ν²_it f_t f_t'`.
pub fn sigma_mean_at(estimate: &FactorEstimate, mean: &MeanLoadings, i: usize) -> DMatrix<f64> {
    let f = &estimate.factors;
    let (t, r) = f.shape();
    let mut acc = DMatrix::zeros(r, r);
    for s in 0..t {
        let nu = mean.residuals[(i, s)];
        let ft = f.row(s).transpose();
        acc += &ft * ft.transpose() * (nu * nu);
    }
    acc /= t as f64;
    symmetrize(&mut acc);
    acc
}

pub fn plugin_covariances(
    estimate: &FactorEstimate,
    grid: &QuantileGrid,
    weights: &WeightTensor,
    mean: Option<&MeanLoadings>,
) -> Result<CovariancePack> {
    let (n, t) = (estimate.n(), estimate.t());
    let m_count = grid.m_count();
    if estimate.loadings.len() != m_count {
        return Err(UfmError::DimensionMismatch {
            expected: format!("{m_count} loading matrices"),
            actual: format!("{}", estimate.loadings.len()),
        });
    }
    if weights.shape() != (m_count, n, t) {
        return Err(UfmError::DimensionMismatch {
            expected: format!("weights of shape ({m_count}, {n}, {t})"),
            actual: format!("{:?}", weights.shape()),
        });
    }
    let levels = grid.levels().to_vec();
    let mut phi = phi_hat(estimate);
    symmetrize(&mut phi);
    let (phi_inv, phi_cond) = sym_inverse_floored(&phi, PHI_FLOOR_REL)?;
    if !(phi_cond <= PHI_MAX_COND) {
        return Err(UfmError::SingularPhi(phi_cond));
    }
    let sigma_f: Vec<DMatrix<f64>> = (0..t)
        .into_par_iter()
        .map(|s| sigma_f_at(estimate, &levels, weights, s))
        .collect();
    let sigma_l: Vec<Vec<DMatrix<f64>>> = (0..m_count)
        .map(|m| {
            (0..n)
                .into_par_iter()
                .map(|i| sigma_l_at(estimate, levels[m], weights, m, i))
                .collect()
        })
        .collect();
    let sigma_mean = mean.map(|ml| (0..n).map(|i| sigma_mean_at(estimate, ml, i)).collect());
    Ok(CovariancePack {
        levels,
        phi,
        phi_inv,
        phi_cond,
        sigma_f,
        sigma_l,
        sigma_mean,
    })
}

/// Quantity whose standard error is requested. Indices are zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SeTarget {
    Factor { t: usize },
    Loading { m: usize, i: usize },
    Common { m: usize, i: usize, t: usize },
    MeanLoading { i: usize },
    MeanCommon { i: usize, t: usize },
}

fn factor_cov(covs: &CovariancePack, t: usize) -> DMatrix<f64> {
    &covs.phi_inv * &covs.sigma_f[t] * &covs.phi_inv
}

fn quad(v: &DVector<f64>, m: &DMatrix<f64>) -> f64 {
    (v.transpose() * m * v)[(0, 0)]
}

/// Standard errors: a vector of length r for factors and loadings, a single
/// entry for common components.
pub fn standard_errors(
    estimate: &FactorEstimate,
    covs: &CovariancePack,
    mean: Option<&MeanLoadings>,
    target: SeTarget,
) -> Result<Vec<f64>> {
    let n = estimate.n() as f64;
    let t_len = estimate.t() as f64;
    let need_mean = || -> Result<(&MeanLoadings, &Vec<DMatrix<f64>>)> {
        match (mean, covs.sigma_mean.as_ref()) {
            (Some(m), Some(s)) => Ok((m, s)),
            _ => Err(UfmError::InvalidConfig("mean-loading standard errors need mean loadings".into())),
        }
    };
    let out = match target {
        SeTarget::Factor { t } => {
            let v = factor_cov(covs, t) / n;
            (0..v.nrows()).map(|j| v[(j, j)].max(0.0).sqrt()).collect()
        }
        SeTarget::Loading { m, i } => {
            let v = &covs.sigma_l[m][i] / t_len;
            (0..v.nrows()).map(|j| v[(j, j)].max(0.0).sqrt()).collect()
        }
        SeTarget::Common { m, i, t } => {
            let lam = estimate.loadings[m].row(i).transpose();
            let f = estimate.factors.row(t).transpose();
            let var = quad(&lam, &factor_cov(covs, t)) / n + quad(&f, &covs.sigma_l[m][i]) / t_len;
            vec![var.max(0.0).sqrt()]
        }
        SeTarget::MeanLoading { i } => {
            let (_, sm) = need_mean()?;
            let v = &sm[i] / t_len;
            (0..v.nrows()).map(|j| v[(j, j)].max(0.0).sqrt()).collect()
        }
        SeTarget::MeanCommon { i, t } => {
            let (ml, sm) = need_mean()?;
            let lam = ml.lam_bar.row(i).transpose();
            let f = estimate.factors.row(t).transpose();
            let var = quad(&lam, &factor_cov(covs, t)) / n + quad(&f, &sm[i]) / t_len;
            vec![var.max(0.0).sqrt()]
        }
    };
    Ok(out)
}

/// All standard errors as matrices, for output.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardErrorTables {
    /// T x r.
    pub factors: DMatrix<f64>,
    /// One N x r matrix per level.
    pub loadings: Vec<DMatrix<f64>>,
    /// One N x T matrix per level.
    pub common: Vec<DMatrix<f64>>,
    /// N x r, with mean loadings.
    pub mean_loadings: Option<DMatrix<f64>>,
}

pub fn standard_error_tables(
    estimate: &FactorEstimate,
    covs: &CovariancePack,
    mean: Option<&MeanLoadings>,
) -> Result<StandardErrorTables> {
    let (n, t, r) = (estimate.n(), estimate.t(), estimate.rank());
    let m_count = estimate.loadings.len();
    let mut factors = DMatrix::zeros(t, r);
    for s in 0..t {
        let se = standard_errors(estimate, covs, mean, SeTarget::Factor { t: s })?;
        factors.row_mut(s).copy_from_slice(&se);
    }
    let mut loadings = Vec::with_capacity(m_count);
    let mut common = Vec::with_capacity(m_count);
    for m in 0..m_count {
        let mut lm = DMatrix::zeros(n, r);
        let mut cm = DMatrix::zeros(n, t);
        for i in 0..n {
            let se = standard_errors(estimate, covs, mean, SeTarget::Loading { m, i })?;
            lm.row_mut(i).copy_from_slice(&se);
            for s in 0..t {
                cm[(i, s)] = standard_errors(estimate, covs, mean, SeTarget::Common { m, i, t: s })?[0];
            }
        }
        loadings.push(lm);
        common.push(cm);
    }
    let mean_loadings = match mean {
        Some(_) if covs.sigma_mean.is_some() => {
            let mut ml = DMatrix::zeros(n, r);
            for i in 0..n {
                let se = standard_errors(estimate, covs, mean, SeTarget::MeanLoading { i })?;
                ml.row_mut(i).copy_from_slice(&se);
            }
            Some(ml)
        }
        _ => None,
    };
    Ok(StandardErrorTables {
        factors,
        loadings,
        common,
        mean_loadings,
    })
}
