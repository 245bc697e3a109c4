//! Gaussian-based higher-order kernels and the convolution-smoothed check loss.
//!
//! A kernel of even order `γ = 2s` has the form `k(z) = (Σ_{i<s} c_{2i} z^{2i}) φ(z)`
//! with
//!
//! ```text
//! c_{2i} = (-1)^i 2^{i-(2s-1)} (2s)! / (s! (2i+1)! (s-1-i)!)
//! ```
//!
//! which gives `c_0 = 1` for `s = 1` (the normal density) and the usual
//! fourteenth-order coefficients for `s = 7`. The antiderivative `K` and the
//! first partial moment `∫_{-∞}^z v k(v) dv` are closed forms built from the
//! recurrence `∫ z^n φ = -z^{n-1} φ + (n-1) ∫ z^{n-2} φ`, so each evaluation
//! costs one `exp`, one `erfc` and a few Horner steps.

use std::f64::consts::FRAC_1_SQRT_2;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
#[inline]
pub fn std_normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Standard normal CDF.
#[inline]
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

#[inline]
fn horner(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// Values of the kernel pieces at one standardized point `z`.
#[derive(Debug, Clone, Copy)]
pub struct KernelEval {
    /// `k(z)`
    pub density: f64,
    /// `K(z)`
    pub cdf: f64,
    /// `-∫_{-∞}^z v k(v) dv`
    pub neg_partial_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothKernel {
    order: u32,
    coeffs: Vec<f64>,
    // K(z) = cdf_scale Φ(z) - φ(z) z P(z²)
    cdf_scale: f64,
    cdf_odd: Vec<f64>,
    // ∫_{-∞}^z v k(v) dv = -φ(z) R(z²)
    partial_even: Vec<f64>,
    sup_density: f64,
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

impl SmoothKernel {
    /// Gaussian-based kernel of even order `order >= 2`.
    pub fn gaussian(order: u32) -> Self {
        assert!(order >= 2 && order % 2 == 0, "kernel order must be even and >= 2");
        let s = order / 2;
        let coeffs: Vec<f64> = (0..s)
            .map(|i| {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                sign * 2f64.powi(i as i32 - (2 * s as i32 - 1)) * factorial(2 * s)
                    / (factorial(s) * factorial(2 * i + 1) * factorial(s - 1 - i))
            })
            .collect();
        Self::from_coeffs(coeffs)
    }

    /// Fourteenth-order kernel.
    pub fn order14() -> Self {
        Self::gaussian(14)
    }

    /// Standard normal kernel.
    pub fn order2() -> Self {
        Self::gaussian(2)
    }

    fn from_coeffs(coeffs: Vec<f64>) -> Self {
        let s = coeffs.len();
        let order = 2 * s as u32;
        // p_i: odd polynomial stored by powers of z² after factoring one z;
        // q_i: even polynomial stored by powers of z².
        let mut p_prev = vec![0.0; s];
        let mut q_prev = vec![0.0; s + 1];
        q_prev[0] = 1.0;
        let mut a_prev = 1.0;
        let mut cdf_scale = coeffs[0];
        let mut cdf_odd = vec![0.0; s];
        let mut partial_even = vec![0.0; s + 1];
        partial_even[0] = coeffs[0];
        for (i, &c) in coeffs.iter().enumerate().skip(1) {
            let mult = (2 * i - 1) as f64;
            let mut p = vec![0.0; s];
            for j in 0..s {
                p[j] = mult * p_prev[j];
            }
            p[i - 1] += 1.0;
            let mut q = vec![0.0; s + 1];
            for j in 0..=s {
                q[j] = (2 * i) as f64 * q_prev[j];
            }
            q[i] += 1.0;
            let a = mult * a_prev;
            cdf_scale += c * a;
            for j in 0..s {
                cdf_odd[j] += c * p[j];
            }
            for j in 0..=s {
                partial_even[j] += c * q[j];
            }
            p_prev = p;
            q_prev = q;
            a_prev = a;
        }
        let mut kernel = Self {
            order,
            coeffs,
            cdf_scale,
            cdf_odd,
            partial_even,
            sup_density: 0.0,
        };
        let sup = (0..=12_000)
            .map(|j| kernel.density(j as f64 * 1e-3).abs())
            .fold(0.0, f64::max);
        kernel.sup_density = sup;
        kernel
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    /// `c_0, c_2, ..., c_{γ-2}`.
    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// `sup_z |k(z)|`, used to bound curvature of the smoothed loss.
    pub fn sup_density(&self) -> f64 {
        self.sup_density
    }

    /// `k(z)`.
    #[inline]
    pub fn density(&self, z: f64) -> f64 {
        horner(&self.coeffs, z * z) * std_normal_pdf(z)
    }

    /// `K(z) = ∫_{-∞}^z k(v) dv`.
    #[inline]
    pub fn cdf(&self, z: f64) -> f64 {
        self.cdf_scale * std_normal_cdf(z) - std_normal_pdf(z) * z * horner(&self.cdf_odd, z * z)
    }

    /// All kernel pieces needed by the smoothed loss at one point.
    #[inline]
    pub fn eval(&self, z: f64) -> KernelEval {
        let phi = std_normal_pdf(z);
        let w = z * z;
        KernelEval {
            density: horner(&self.coeffs, w) * phi,
            cdf: self.cdf_scale * std_normal_cdf(z) - phi * z * horner(&self.cdf_odd, w),
            neg_partial_mean: phi * horner(&self.partial_even, w),
        }
    }
}

/// `R⁽¹⁾_{h,τ}(c; y) = K((c - y)/h) - τ`: derivative of the smoothed check
/// loss with respect to the fitted value `c`.
#[inline]
pub fn smoothed_grad(kernel: &SmoothKernel, h: f64, tau: f64, c: f64, y: f64) -> f64 {
    kernel.cdf((c - y) / h) - tau
}

/// `k((c - y)/h)/h`; negative in places for kernels of order above two.
#[inline]
pub fn smoothed_hess(kernel: &SmoothKernel, h: f64, _tau: f64, c: f64, y: f64) -> f64 {
    kernel.density((c - y) / h) / h
}

/// `(1/h) ∫ ρ_τ(s) k((s - (y - c))/h) ds`, in closed form.
#[inline]
pub fn smoothed_value(kernel: &SmoothKernel, h: f64, tau: f64, c: f64, y: f64) -> f64 {
    let z = (c - y) / h;
    let e = kernel.eval(z);
    h * (z * (e.cdf - tau) + e.neg_partial_mean)
}

/// Value, first and second derivative in `c` of the smoothed loss.
#[inline]
pub fn smoothed_all(kernel: &SmoothKernel, h: f64, tau: f64, c: f64, y: f64) -> (f64, f64, f64) {
    let z = (c - y) / h;
    let e = kernel.eval(z);
    let grad = e.cdf - tau;
    (h * (z * grad + e.neg_partial_mean), grad, e.density / h)
}

/// Check function `ρ_τ(u) = u (τ - 1{u < 0})`.
#[inline]
pub fn check_loss(tau: f64, u: f64) -> f64 {
    if u < 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::integrate;
    use std::f64::consts::PI;

    #[test]
    fn coefficient_table_matches_closed_form() {
        let k = SmoothKernel::order14();
        assert_eq!(k.coeffs().len(), 7);
        // c_{2i} = (-1)^i 2^{i-13} 14! / (7! (2i+1)! (6-i)!)
        for (i, &c) in k.coeffs().iter().enumerate() {
            let i = i as u32;
            let expect = (-1f64).powi(i as i32) * 2f64.powi(i as i32 - 13) * factorial(14)
                / (factorial(7) * factorial(2 * i + 1) * factorial(6 - i));
            assert!((c - expect).abs() <= 1e-14 * expect.abs());
        }
        assert_eq!(SmoothKernel::order2().coeffs(), &[1.0]);
        let k4 = SmoothKernel::gaussian(4);
        assert!((k4.coeffs()[0] - 1.5).abs() < 1e-15);
        assert!((k4.coeffs()[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn order2_is_standard_normal() {
        let k = SmoothKernel::order2();
        assert!((k.density(0.0) - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-15);
        assert!((k.cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-14);
        assert_eq!(k.cdf(0.0), 0.5);
    }

    #[test]
    fn order14_symmetry_and_center() {
        let k = SmoothKernel::order14();
        for z in [0.3, 1.7, 4.1] {
            assert_eq!(k.density(z), k.density(-z));
        }
        assert!((k.cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((k.cdf(40.0) - 1.0).abs() < 1e-14);
        assert!(k.cdf(-40.0).abs() < 1e-14);
    }

    #[test]
    fn order14_moments() {
        let k = SmoothKernel::order14();
        let total = integrate(&|z| k.density(z), -20.0, 20.0, 1e-11);
        assert!((total - 1.0).abs() < 1e-8, "∫k = {total}");
        for j in 1..14 {
            let m = integrate(&|z| z.powi(j) * k.density(z), -20.0, 20.0, 1e-11);
            assert!(m.abs() < 1e-6, "moment {j} = {m}");
        }
        let m14 = integrate(&|z| z.powi(14) * k.density(z), -20.0, 20.0, 1e-11);
        assert!(m14.abs() > 1e-3);
    }

    #[test]
    fn cdf_is_antiderivative() {
        let k = SmoothKernel::order14();
        let q = integrate(&|z| k.density(z), -40.0, 0.7, 1e-14);
        assert!((k.cdf(0.7) - q).abs() < 1e-9);
    }

    #[test]
    fn smoothed_loss_pieces() {
        let k2 = SmoothKernel::order2();
        let k14 = SmoothKernel::order14();
        assert!((smoothed_grad(&k14, 0.3, 0.2, 1.5, 1.5) - 0.3).abs() < 1e-15);
        assert!((smoothed_grad(&k14, 0.3, 0.2, 1e6, 0.0) - 0.8).abs() < 1e-13);
        let g = smoothed_grad(&k2, 0.5, 0.3, 0.2, 0.0);
        assert!((g - (std_normal_cdf(0.4) - 0.3)).abs() < 1e-15);
        assert!((g - 0.3554).abs() < 1e-4);
        assert!((smoothed_hess(&k2, 1.0, 0.5, 2.0, 2.0) - INV_SQRT_2PI).abs() < 1e-15);
        let h14 = smoothed_hess(&k14, 0.5, 0.5, 1.0, 1.0);
        assert!((h14 - 2.0 * k14.coeffs()[0] * INV_SQRT_2PI).abs() < 1e-14);
    }

    #[test]
    fn smoothed_value_limits_and_oracle() {
        let k14 = SmoothKernel::order14();
        // check-loss limit: tau = 0.5, y - c = 2
        let v = smoothed_value(&k14, 1e-3, 0.5, 0.0, 2.0);
        assert!((v - 1.0).abs() < 1e-10);
        // direct quadrature of the defining integral
        for &(h, tau, c, y) in &[(0.4, 0.3, 0.1, 0.5), (0.7, 0.9, -1.0, 0.2), (0.2, 0.5, 0.0, 0.0)] {
            let u = y - c;
            let f = |z: f64| check_loss(tau, u + h * z) * k14.density(z);
            let kink = -u / h;
            let q = integrate(&f, -40.0, kink, 1e-13) + integrate(&f, kink, 40.0, 1e-13);
            let v = smoothed_value(&k14, h, tau, c, y);
            assert!((v - q).abs() < 1e-10, "{v} vs {q}");
        }
    }
}
