#![allow(dead_code)]

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ufm::idw::WeightTensor;
use ufm::kernel::{smoothed_value, SmoothKernel};
use ufm::panel::PanelSource;
use ufm::sqr::SqrObservation;
use ufm::FactorEstimate;

/// Panel wrapper recording every cell that is read.
pub struct TracingPanel {
    values: DMatrix<f64>,
    touched: Vec<AtomicBool>,
    reads: AtomicUsize,
}

impl TracingPanel {
    pub fn new(values: DMatrix<f64>) -> Self {
        let touched = (0..values.len()).map(|_| AtomicBool::new(false)).collect();
        Self {
            values,
            touched,
            reads: AtomicUsize::new(0),
        }
    }

    pub fn was_read(&self, i: usize, t: usize) -> bool {
        self.touched[i * self.values.ncols() + t].load(Ordering::Relaxed)
    }

    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }
}

impl PanelSource for TracingPanel {
    fn n(&self) -> usize {
        self.values.nrows()
    }

    fn t(&self) -> usize {
        self.values.ncols()
    }

    fn value(&self, i: usize, t: usize) -> f64 {
        self.touched[i * self.values.ncols() + t].store(true, Ordering::Relaxed);
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.values[(i, t)]
    }
}

/// Composite Simpson rule with `panels` (even) subintervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let panels = panels + panels % 2;
    let h = (b - a) / panels as f64;
    let mut acc = f(a) + f(b);
    for k in 1..panels {
        let x = a + k as f64 * h;
        acc += if k % 2 == 1 { 4.0 * f(x) } else { 2.0 * f(x) };
    }
    acc * h / 3.0
}

/// Minimizer of the regression objective over the lattice
/// `{-half_width + k step}^r`, by exhaustive search.
pub fn lattice_argmin(
    obs: &[SqrObservation],
    kernel: &SmoothKernel,
    h: f64,
    r: usize,
    half_width: f64,
    step: f64,
) -> (Vec<f64>, f64) {
    let k_max = (2.0 * half_width / step).round() as usize;
    let coord = |k: usize| -half_width + k as f64 * step;
    let objective = |theta: &[f64]| -> f64 {
        obs.iter()
            .map(|o| {
                let c: f64 = o.x.iter().zip(theta).map(|(a, b)| a * b).sum();
                o.weight * smoothed_value(kernel, h, o.tau, c, o.y)
            })
            .sum::<f64>()
            / obs.len() as f64
    };
    let mut best = (vec![0.0; r], f64::INFINITY);
    let mut theta = vec![0.0; r];
    let total = (k_max + 1).pow(r as u32);
    for idx in 0..total {
        let mut rest = idx;
        for th in theta.iter_mut() {
            *th = coord(rest % (k_max + 1));
            rest /= k_max + 1;
        }
        let v = objective(&theta);
        if v < best.1 {
            best = (theta.clone(), v);
        }
    }
    best
}

/// Random linear quantile design with `r` regressors (intercept first).
pub fn random_sqr_instance(rng: &mut ChaCha8Rng, r: usize, n: usize) -> (Vec<SqrObservation>, Vec<f64>) {
    let truth: Vec<f64> = (0..r).map(|_| rng.random_range(-1.0..1.0)).collect();
    let tau = rng.random_range(0.15..0.85);
    let obs = (0..n)
        .map(|_| {
            let mut x = vec![1.0];
            x.extend((1..r).map(|_| rng.random_range(0.0..2.0)));
            let noise: f64 = rng.random_range(-1.0..1.0);
            let y = x.iter().zip(&truth).map(|(a, b)| a * b).sum::<f64>() + 0.5 * noise;
            SqrObservation::new(y, x, tau).weighted(rng.random_range(0.5..1.5))
        })
        .collect();
    (obs, truth)
}

/// Random rank-`r` estimate with `m_count` loading matrices, for plug-in checks.
pub fn random_estimate(rng: &mut ChaCha8Rng, n: usize, t: usize, r: usize, m_count: usize) -> FactorEstimate {
    let factors = DMatrix::from_fn(t, r, |_, _| rng.random_range(-1.5..1.5));
    let loadings = (0..m_count)
        .map(|_| DMatrix::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    FactorEstimate {
        factors,
        loadings,
        eigenvalues: vec![1.0; r],
        diagnostics: Default::default(),
    }
}

pub fn random_weights(rng: &mut ChaCha8Rng, m: usize, n: usize, t: usize) -> WeightTensor {
    let w = (0..m * n * t).map(|_| rng.random_range(0.2..3.0)).collect();
    WeightTensor::from_values(m, n, t, w).unwrap()
}

/// Entry `(j,k)` of `Σ_{F,t}` as a literal triple sum.
pub fn sigma_f_oracle(est: &FactorEstimate, levels: &[f64], w: &WeightTensor, t: usize, j: usize, k: usize) -> f64 {
    let m_count = levels.len();
    let n = est.n();
    let mut acc = 0.0;
    for m in 0..m_count {
        for mp in 0..m_count {
            for i in 0..n {
                let c = levels[m].min(levels[mp]) - levels[m] * levels[mp];
                acc += c * est.loadings[m][(i, j)] * est.loadings[mp][(i, k)] * w.get(m, i, t) * w.get(mp, i, t);
            }
        }
    }
    acc / (m_count * m_count * n) as f64
}

pub fn sigma_l_oracle(est: &FactorEstimate, tau: f64, w: &WeightTensor, m: usize, i: usize, j: usize, k: usize) -> f64 {
    let t_len = est.t();
    let mut acc = 0.0;
    for s in 0..t_len {
        acc += w.get(m, i, s).powi(2) * est.factors[(s, j)] * est.factors[(s, k)];
    }
    tau * (1.0 - tau) * acc / t_len as f64
}

pub fn phi_oracle(est: &FactorEstimate, j: usize, k: usize) -> f64 {
    let m_count = est.loadings.len();
    let n = est.n();
    let mut acc = 0.0;
    for l in &est.loadings {
        for i in 0..n {
            acc += l[(i, j)] * l[(i, k)];
        }
    }
    acc / (m_count * n) as f64
}

/// `Σ̄_{Λ,i}` entry from residuals of `y` on the estimated factors.
pub fn sigma_mean_oracle(y: &DMatrix<f64>, est: &FactorEstimate, i: usize, j: usize, k: usize) -> f64 {
    let (t_len, r) = est.factors.shape();
    let lam: Vec<f64> = (0..r)
        .map(|q| (0..t_len).map(|s| est.factors[(s, q)] * y[(i, s)]).sum::<f64>() / t_len as f64)
        .collect();
    let mut acc = 0.0;
    for s in 0..t_len {
        let fit: f64 = (0..r).map(|q| lam[q] * est.factors[(s, q)]).sum();
        let nu = y[(i, s)] - fit;
        acc += nu * nu * est.factors[(s, j)] * est.factors[(s, k)];
    }
    acc / t_len as f64
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
