//! Monte Carlo design: the location-scale DGP with a weak median factor,
//! PCA and single-level QFA baselines, evaluation metrics, and replication
//! drivers that emit CSV tables plus a JSON manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UfmError};
use crate::idw::idw_ufa_fit_from;
use crate::inference::{mean_loadings, plugin_covariances, standard_errors, SeTarget};
use crate::io::write_atomic;
use crate::linalg::{fix_column_signs, sym_eigen_desc};
use crate::panel::{format_float, EstimatorConfig, FactorEstimate, PanelMatrix, QuantileGrid};
use crate::rank::{estimate_r, warm_start, RankReport};
use crate::ufa::{fit_matrix, normalize_common, ufa_fit};

/// Quantile loading multiplier `β(τ) = -0.99 + 2τ`.
pub fn beta(tau: f64) -> f64 {
    -0.99 + 2.0 * tau
}

/// Factor and base loadings of the design.
#[derive(Debug, Clone, PartialEq)]
pub struct DgpTruth {
    /// `f_t ~ U[0,2]`, length T.
    pub factor: DVector<f64>,
    /// `λ_i ~ U[0,2]`, length N.
    pub loading_base: DVector<f64>,
}

impl DgpTruth {
    pub fn draw<R: Rng>(n: usize, t: usize, rng: &mut R) -> Self {
        let factor = DVector::from_fn(t, |_, _| rng.random_range(0.0..2.0));
        let loading_base = DVector::from_fn(n, |_, _| rng.random_range(0.0..2.0));
        Self { factor, loading_base }
    }

    /// Normalized factor `F_0 = √T f/||f||`, T x 1.
    pub fn normalized_factor(&self) -> DMatrix<f64> {
        let t = self.factor.len() as f64;
        let f = &self.factor * (t.sqrt() / self.factor.norm());
        DMatrix::from_column_slice(f.len(), 1, f.as_slice())
    }

    /// Normalized loadings `Λ_0(τ) = β(τ) λ ||f||/√T`, N x 1.
    pub fn normalized_loadings(&self, tau: f64) -> DMatrix<f64> {
        let scale = beta(tau) * self.factor.norm() / (self.factor.len() as f64).sqrt();
        let l = &self.loading_base * scale;
        DMatrix::from_column_slice(l.len(), 1, l.as_slice())
    }

    /// True quantile common component `β(τ) λ_i f_t`.
    pub fn common(&self, tau: f64, i: usize, t: usize) -> f64 {
        beta(tau) * self.loading_base[i] * self.factor[t]
    }

    /// Normalized truth on a grid: `F_0` and `Λ_0(τ_m)`.
    pub fn normalized_truth(&self, grid: &QuantileGrid) -> FactorEstimate {
        let loadings: Vec<DMatrix<f64>> = grid.levels().iter().map(|&tau| self.normalized_loadings(tau)).collect();
        let m = grid.m_count() as f64;
        let n = self.loading_base.len() as f64;
        let gram = loadings.iter().map(|l| l.norm_squared()).sum::<f64>() / (m * n);
        FactorEstimate {
            factors: self.normalized_factor(),
            loadings,
            eigenvalues: vec![gram],
            diagnostics: Default::default(),
        }
    }

    /// Stable fingerprint of the truth for fixed-truth checks.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.factor.iter().chain(self.loading_base.iter()) {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// One simulated panel with everything needed to reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct DgpDraw {
    pub panel: PanelMatrix,
    pub truth: DgpTruth,
    /// `U_it ~ U[0,1]`, N x T.
    pub u: DMatrix<f64>,
}

impl DgpDraw {
    /// Draws `U` row by row and builds `Y_it = β(U_it) λ_i f_t`.
    pub fn with_truth<R: Rng>(truth: DgpTruth, rng: &mut R) -> Result<Self> {
        let (n, t) = (truth.loading_base.len(), truth.factor.len());
        let mut u = DMatrix::zeros(n, t);
        for i in 0..n {
            for s in 0..t {
                u[(i, s)] = rng.random::<f64>();
            }
        }
        let y = DMatrix::from_fn(n, t, |i, s| beta(u[(i, s)]) * truth.loading_base[i] * truth.factor[s]);
        Ok(Self {
            panel: PanelMatrix::from_matrix(y)?,
            truth,
            u,
        })
    }

    pub fn true_factor(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.truth.factor.len(), 1, self.truth.factor.as_slice())
    }
}

/// Seeded draw: truth first, then `U`, from one ChaCha8 stream.
pub fn gen_dgp(n: usize, t: usize, seed: u64) -> Result<DgpDraw> {
    if n < 4 || t < 4 {
        return Err(UfmError::InvalidPanel(format!("the design needs N, T >= 4, got {n}x{t}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = DgpTruth::draw(n, t, &mut rng);
    DgpDraw::with_truth(truth, &mut rng)
}

/// Generator for replication `rep` at size `n`, independent across both.
pub fn rep_rng(seed: u64, n: usize, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((n as u64) << 32) | (rep & 0xFFFF_FFFF));
    rng
}

/// Generator for the fixed truth at size `n`.
pub fn truth_rng(seed: u64, n: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((n as u64) << 32) | 0xFFFF_FFFF);
    rng
}

/// `√T` times the leading `r` eigenvectors of `Y'Y/(NT)`.
pub fn pca_fit(y: &DMatrix<f64>, r: usize) -> Result<DMatrix<f64>> {
    let (n, t) = y.shape();
    if r == 0 || r > n.min(t) {
        return Err(UfmError::RankTooLarge { rank: r, n, t });
    }
    let gram = y.transpose() * y / (n * t) as f64;
    let (_, vecs) = sym_eigen_desc(&gram)?;
    let mut f = vecs.columns(0, r) * (t as f64).sqrt();
    fix_column_signs(&mut f);
    Ok(f)
}

/// Starting values for single-level QFA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QfaInit {
    /// The full-grid penalized warm start, restricted to the level.
    Ufa,
    /// The penalized warm start from the single level alone.
    Tau,
}

/// Single-level initial guess from penalized fits on the full grid.
/// `m` is the level's grid index.
pub fn qfa_initial(report: &RankReport, m: usize, r: usize, bound: f64, init: QfaInit) -> Result<FactorEstimate> {
    match init {
        QfaInit::Ufa => {
            let mut est = warm_start(report, r, bound)?;
            est.loadings = vec![est.loadings.swap_remove(m)];
            Ok(est)
        }
        QfaInit::Tau => {
            let single = RankReport {
                pel: vec![report.pel[m].clone()],
                ..report.clone()
            };
            warm_start(&single, r, bound)
        }
    }
}

/// Alternating smoothed QR at the single level `tau`, normalized with M = 1.
pub fn qfa_fit(
    panel: &PanelMatrix,
    tau: f64,
    config: &EstimatorConfig,
    init: &FactorEstimate,
) -> Result<FactorEstimate> {
    panel.require_estimable()?;
    let grid = QuantileGrid::single(tau, 0.04)?;
    fit_matrix(panel.values(), &grid, config, &init.factors, &init.loadings, None, "qfa")
}

/// Adjusted R² of regressing `truth` (T x 1) on `estimated` (T x k) with an intercept.
pub fn adjusted_r2(truth: &DMatrix<f64>, estimated: &DMatrix<f64>) -> Result<f64> {
    let t = truth.nrows();
    let k = estimated.ncols();
    if estimated.nrows() != t || truth.ncols() != 1 || k == 0 {
        return Err(UfmError::DimensionMismatch {
            expected: format!("{t}x1 truth and {t}xk regressors"),
            actual: format!("{}x{} and {}x{}", truth.nrows(), truth.ncols(), estimated.nrows(), k),
        });
    }
    if t <= k + 1 {
        return Err(UfmError::DegenerateRegressors);
    }
    let center = |m: &DMatrix<f64>| -> DMatrix<f64> {
        let mut c = m.clone();
        for mut col in c.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
        c
    };
    let x = center(estimated);
    let y = center(truth);
    let sst = y.norm_squared();
    let scale = x.amax();
    if !(scale > 0.0) || x.column_iter().any(|c| c.norm() <= 1e-12 * scale * (t as f64).sqrt()) {
        return Err(UfmError::DegenerateRegressors);
    }
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= 1e-10 * smax {
        return Err(UfmError::DegenerateRegressors);
    }
    let beta = svd.solve(&y, 1e-12 * smax).map_err(|e| UfmError::EigenFailure(e.to_string()))?;
    let ssr = (&y - &x * beta).norm_squared();
    let r2 = if sst > 0.0 { 1.0 - ssr / sst } else { 1.0 };
    Ok(1.0 - (1.0 - r2) * (t as f64 - 1.0) / (t as f64 - k as f64 - 1.0))
}

/// `H = F_0' F̃ / T` after flipping each estimated column to agree in sign
/// with the matching true column.
pub fn rotation_scalar(estimated: &DMatrix<f64>, truth: &DMatrix<f64>) -> DMatrix<f64> {
    let t = estimated.nrows() as f64;
    let mut f = estimated.clone();
    for j in 0..f.ncols().min(truth.ncols()) {
        if f.column(j).dot(&truth.column(j)) < 0.0 {
            f.column_mut(j).neg_mut();
        }
    }
    truth.transpose() * f / t
}

/// Replication experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    /// Rank estimate: average, max and min of `r̂`.
    Table1,
    /// Adjusted R² of the true factor for UFA, IDW-UFA, QFA and PCA.
    Table2,
    /// `|H - 1|` for IDW-UFA under fixed truth.
    Table3,
    /// Standardized factor and common components under fixed truth.
    Table4,
}

impl std::str::FromStr for Experiment {
    type Err = UfmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "table1" => Ok(Experiment::Table1),
            "2" | "table2" => Ok(Experiment::Table2),
            "3" | "table3" => Ok(Experiment::Table3),
            "4" | "table4" | "fig1" | "table4_fig1" => Ok(Experiment::Table4),
            other => Err(UfmError::InvalidConfig(format!("unknown experiment {other:?}"))),
        }
    }
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Table1 => "table1",
            Experiment::Table2 => "table2",
            Experiment::Table3 => "table3",
            Experiment::Table4 => "table4",
        }
    }

    fn fixed_truth(self) -> bool {
        matches!(self, Experiment::Table3 | Experiment::Table4)
    }
}

/// Experiment descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSpec {
    pub experiment: Experiment,
    /// Square sizes `N = T`.
    pub sizes: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    pub m_count: usize,
    pub h_d: f64,
    /// Levels at which single-level QFA is run (table 2).
    pub qfa_levels: Vec<f64>,
    /// Levels whose standardized common components are reported (table 4).
    pub std_levels: Vec<f64>,
    pub config: EstimatorConfig,
}

impl McSpec {
    /// Defaults: M = 9, h_d = 0.04, QFA at every decile, standardized levels 0.2, 0.5, 0.8.
    pub fn new(experiment: Experiment, sizes: Vec<usize>, reps: usize, seed: u64) -> Self {
        Self {
            experiment,
            sizes,
            reps,
            seed,
            m_count: 9,
            h_d: 0.04,
            qfa_levels: (1..=9).map(|m| m as f64 / 10.0).collect(),
            std_levels: vec![0.2, 0.5, 0.8],
            config: EstimatorConfig::default(),
        }
    }
}

/// Per-replication record. Fields not produced by the experiment are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RepRecord {
    pub size: usize,
    pub rep: usize,
    pub r_hat: Option<usize>,
    /// `(estimator, tau, adjusted R²)`; `tau` is NaN for level-free estimators.
    pub r2: Vec<(String, f64, f64)>,
    pub h_abs_dev: Option<f64>,
    pub f_std: Option<f64>,
    /// `(tau, standardized common component)`.
    pub l_std: Vec<(f64, f64)>,
    pub truth_fingerprint: Option<u64>,
    pub warnings: Vec<String>,
}

/// Tables produced by a run, as CSV text keyed by file name.
#[derive(Debug, Clone, PartialEq)]
pub struct McResult {
    pub spec: McSpec,
    pub records: Vec<RepRecord>,
    pub tables: Vec<(String, String)>,
    pub elapsed_secs: f64,
}

impl McResult {
    /// Writes every table, the per-rep draws and a manifest to `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (name, body) in &self.tables {
            let p = dir.join(name);
            write_atomic(&p, body.as_bytes())?;
            written.push(p);
        }
        let manifest = serde_json::json!({
            "version": env!("CARGO_PKG_VERSION"),
            "experiment": self.spec.experiment.name(),
            "spec": self.spec,
            "seed": self.spec.seed,
            "timings": { "total_secs": self.elapsed_secs },
            "warnings": self.records.iter().flat_map(|r| r.warnings.iter().cloned()).collect::<Vec<_>>(),
            "files": self.tables.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
        });
        let p = dir.join("manifest.json");
        write_atomic(&p, serde_json::to_string_pretty(&manifest).map_err(|e| UfmError::InvalidConfig(e.to_string()))?.as_bytes())?;
        written.push(p);
        Ok(written)
    }
}

fn level_index(grid: &QuantileGrid, tau: f64) -> Result<usize> {
    grid.levels()
        .iter()
        .position(|&l| (l - tau).abs() < 1e-9)
        .ok_or_else(|| UfmError::InvalidConfig(format!("level {tau} is not on the quantile grid")))
}

fn run_rep(spec: &McSpec, grid: &QuantileGrid, size: usize, rep: usize, truth: Option<&DgpTruth>) -> Result<RepRecord> {
    let mut rng = rep_rng(spec.seed, size, rep as u64);
    let draw = match truth {
        Some(tr) => DgpDraw::with_truth(tr.clone(), &mut rng)?,
        None => {
            let tr = DgpTruth::draw(size, size, &mut rng);
            DgpDraw::with_truth(tr, &mut rng)?
        }
    };
    let panel = &draw.panel;
    let y = panel.values();
    let (n, t) = (panel.n(), panel.t());
    let config = &spec.config;
    let c_r = config.rank_threshold_for(n, t);
    let bound = config.box_for(y);
    let report = estimate_r(y, grid, config.penalty_const, c_r)?;
    let mut rec = RepRecord {
        size,
        rep,
        r_hat: Some(report.r_hat),
        truth_fingerprint: truth.map(DgpTruth::fingerprint),
        ..Default::default()
    };
    rec.warnings.extend(report.warnings.iter().map(|w| w.to_string()));
    if spec.experiment == Experiment::Table1 {
        return Ok(rec);
    }
    let truth_f = draw.true_factor();
    // tables 3 and 4 use the true rank; table 2 uses the estimate, at least 1
    let r = if spec.experiment == Experiment::Table2 { report.r_hat.max(1) } else { 1 };
    let cfg = config.clone().with_rank(r);
    let init = warm_start(&report, r, bound)?;
    let ufa = ufa_fit(panel, grid, &cfg, &init, None)?;
    let (idw, weights) = idw_ufa_fit_from(panel, grid, &cfg, &ufa)?;
    rec.warnings.extend(idw.diagnostics.warnings.iter().map(|w| w.to_string()));
    match spec.experiment {
        Experiment::Table2 => {
            rec.r2.push(("ufa".into(), f64::NAN, adjusted_r2(&truth_f, &ufa.factors)?));
            rec.r2.push(("idw_ufa".into(), f64::NAN, adjusted_r2(&truth_f, &idw.factors)?));
            let pca = pca_fit(y, 1)?;
            rec.r2.push(("pca".into(), f64::NAN, adjusted_r2(&truth_f, &pca)?));
            let qcfg = config.clone().with_rank(1);
            for &tau in &spec.qfa_levels {
                let m = level_index(grid, tau)?;
                for (name, kind) in [("qfa_ini_ufa", QfaInit::Ufa), ("qfa_ini_tau", QfaInit::Tau)] {
                    let start = qfa_initial(&report, m, 1, bound, kind)?;
                    let fit = qfa_fit(panel, tau, &qcfg, &start)?;
                    rec.r2.push((name.into(), tau, adjusted_r2(&truth_f, &fit.factors)?));
                }
            }
        }
        Experiment::Table3 | Experiment::Table4 => {
            let f0 = draw.truth.normalized_factor();
            let h = rotation_scalar(&idw.factors, &f0);
            rec.h_abs_dev = Some((h[(0, 0)] - 1.0).abs());
            if spec.experiment == Experiment::Table4 {
                // align the sign with the truth before standardizing
                let mut est = idw.clone();
                if est.factors.column(0).dot(&f0.column(0)) < 0.0 {
                    est.factors.neg_mut();
                    for l in &mut est.loadings {
                        l.neg_mut();
                    }
                }
                let ml = mean_loadings(y, &est)?;
                let covs = plugin_covariances(&est, grid, &weights, Some(&ml))?;
                // the reported cell is (⌊N/2⌋, ⌊T/2⌋) in one-based indexing
                let (i, s) = (n / 2 - 1, t / 2 - 1);
                let se_f = standard_errors(&est, &covs, None, SeTarget::Factor { t: s })?[0];
                rec.f_std = Some((est.factors[(s, 0)] - f0[(s, 0)]) / se_f);
                for &tau in &spec.std_levels {
                    let m = level_index(grid, tau)?;
                    let se = standard_errors(&est, &covs, None, SeTarget::Common { m, i, t: s })?[0];
                    let fitted = est.loadings[m][(i, 0)] * est.factors[(s, 0)];
                    rec.l_std.push((tau, (fitted - draw.truth.common(tau, i, s)) / se));
                }
            }
        }
        Experiment::Table1 => unreachable!(),
    }
    Ok(rec)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn f(v: f64) -> String {
    format_float(v)
}

fn build_tables(spec: &McSpec, records: &[RepRecord]) -> Vec<(String, String)> {
    let name = spec.experiment.name();
    let mut summary = String::new();
    let mut reps = String::new();
    match spec.experiment {
        Experiment::Table1 => {
            summary.push_str("n,t,reps,average,max,min\n");
            reps.push_str("n,rep,r_hat\n");
            for &size in &spec.sizes {
                let rs: Vec<usize> = records.iter().filter(|r| r.size == size).filter_map(|r| r.r_hat).collect();
                let avg = rs.iter().sum::<usize>() as f64 / rs.len().max(1) as f64;
                let max = rs.iter().copied().max().unwrap_or(0);
                let min = rs.iter().copied().min().unwrap_or(0);
                summary.push_str(&format!("{size},{size},{},{},{max},{min}\n", rs.len(), f(avg)));
            }
            for r in records {
                reps.push_str(&format!("{},{},{}\n", r.size, r.rep, r.r_hat.unwrap_or(0)));
            }
        }
        Experiment::Table2 => {
            summary.push_str("n,t,estimator,tau,reps,mean_adj_r2\n");
            reps.push_str("n,rep,r_hat,estimator,tau,adj_r2\n");
            for &size in &spec.sizes {
                let recs: Vec<&RepRecord> = records.iter().filter(|r| r.size == size).collect();
                let mut keys: Vec<(String, f64)> = Vec::new();
                if let Some(first) = recs.first() {
                    keys = first.r2.iter().map(|(e, tau, _)| (e.clone(), *tau)).collect();
                }
                for (est, tau) in keys {
                    let vals: Vec<f64> = recs
                        .iter()
                        .filter_map(|r| {
                            r.r2.iter()
                                .find(|(e, tt, _)| *e == est && (tt.to_bits() == tau.to_bits()))
                                .map(|x| x.2)
                        })
                        .collect();
                    let (mean, _) = mean_std(&vals);
                    let tau_s = if tau.is_nan() { String::new() } else { f(tau) };
                    summary.push_str(&format!("{size},{size},{est},{tau_s},{},{}\n", vals.len(), f(mean)));
                }
            }
            for r in records {
                for (est, tau, v) in &r.r2 {
                    let tau_s = if tau.is_nan() { String::new() } else { f(*tau) };
                    reps.push_str(&format!("{},{},{},{est},{tau_s},{}\n", r.size, r.rep, r.r_hat.unwrap_or(0), f(*v)));
                }
            }
        }
        Experiment::Table3 => {
            summary.push_str("n,t,reps,mean_abs_h_minus_1\n");
            reps.push_str("n,rep,abs_h_minus_1\n");
            for &size in &spec.sizes {
                let v: Vec<f64> = records.iter().filter(|r| r.size == size).filter_map(|r| r.h_abs_dev).collect();
                summary.push_str(&format!("{size},{size},{},{}\n", v.len(), f(mean_std(&v).0)));
            }
            for r in records {
                reps.push_str(&format!("{},{},{}\n", r.size, r.rep, f(r.h_abs_dev.unwrap_or(f64::NAN))));
            }
        }
        Experiment::Table4 => {
            summary.push_str("n,t,statistic,tau,reps,mean,std\n");
            reps.push_str("n,rep,statistic,tau,value,abs_h_minus_1\n");
            for &size in &spec.sizes {
                let recs: Vec<&RepRecord> = records.iter().filter(|r| r.size == size).collect();
                let fv: Vec<f64> = recs.iter().filter_map(|r| r.f_std).collect();
                let (m, s) = mean_std(&fv);
                summary.push_str(&format!("{size},{size},f_std,,{},{},{}\n", fv.len(), f(m), f(s)));
                for &tau in &spec.std_levels {
                    let lv: Vec<f64> = recs
                        .iter()
                        .filter_map(|r| r.l_std.iter().find(|(tt, _)| (*tt - tau).abs() < 1e-12).map(|x| x.1))
                        .collect();
                    let (m, s) = mean_std(&lv);
                    summary.push_str(&format!("{size},{size},l_std,{},{},{},{}\n", f(tau), lv.len(), f(m), f(s)));
                }
                let hv: Vec<f64> = recs.iter().filter_map(|r| r.h_abs_dev).collect();
                summary.push_str(&format!("{size},{size},abs_h_minus_1,,{},{},{}\n", hv.len(), f(mean_std(&hv).0), f(mean_std(&hv).1)));
            }
            for r in records {
                let h = f(r.h_abs_dev.unwrap_or(f64::NAN));
                if let Some(v) = r.f_std {
                    reps.push_str(&format!("{},{},f_std,,{},{h}\n", r.size, r.rep, f(v)));
                }
                for (tau, v) in &r.l_std {
                    reps.push_str(&format!("{},{},l_std,{},{},{h}\n", r.size, r.rep, f(*tau), f(*v)));
                }
            }
        }
    }
    vec![(format!("{name}.csv"), summary), (format!("{name}_reps.csv"), reps)]
}

/// Runs every replication of `spec` and aggregates in rep order. When
/// `partial_dir` is given, each finished replication is saved there as JSON.
pub fn monte_carlo_run(spec: &McSpec, partial_dir: Option<&Path>) -> Result<McResult> {
    if spec.reps == 0 || spec.sizes.is_empty() {
        return Err(UfmError::InvalidConfig("need at least one size and one replication".into()));
    }
    spec.config.validate()?;
    let grid = QuantileGrid::new(spec.m_count, spec.h_d)?;
    if let Some(dir) = partial_dir {
        std::fs::create_dir_all(dir)?;
    }
    let start = Instant::now();
    let mut records = Vec::with_capacity(spec.sizes.len() * spec.reps);
    for &size in &spec.sizes {
        let truth = spec
            .experiment
            .fixed_truth()
            .then(|| DgpTruth::draw(size, size, &mut truth_rng(spec.seed, size)));
        let recs: Vec<Result<RepRecord>> = (0..spec.reps)
            .into_par_iter()
            .map(|rep| {
                let rec = run_rep(spec, &grid, size, rep, truth.as_ref())?;
                if let Some(dir) = partial_dir {
                    let p = dir.join(format!("{}_n{size}_rep{rep}.json", spec.experiment.name()));
                    let body = serde_json::to_vec(&rec).map_err(|e| UfmError::InvalidConfig(e.to_string()))?;
                    write_atomic(p, &body)?;
                }
                Ok(rec)
            })
            .collect();
        for r in recs {
            records.push(r?);
        }
    }
    let tables = build_tables(spec, &records);
    Ok(McResult {
        spec: spec.clone(),
        records,
        tables,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

/// Normalized truth of `draw` on `grid`, as in the estimator's normalization.
pub fn normalized_truth_by_eigen(draw: &DgpDraw, grid: &QuantileGrid) -> Result<FactorEstimate> {
    let tr = &draw.truth;
    let commons: Vec<DMatrix<f64>> = grid
        .levels()
        .iter()
        .map(|&tau| {
            let l = &tr.loading_base * beta(tau);
            DMatrix::from_column_slice(l.len(), 1, l.as_slice()) * draw.true_factor().transpose()
        })
        .collect();
    Ok(normalize_common(&commons, 1)?.0)
}
