//! Exact Gaussian kernels of linear-quadratic operators
//! `L0 = <Ax, ∇> + ½ <b, ∇>²` in the plane.
//!
//! `q0(t, x, ·)` is the law at time `t` of `dX = AX dt + b dW` started at `x`:
//! mean `e^{tA} x`, covariance `G_t`. The backward Gramian `Γ_t` appears when
//! the kernel is read as a function of the starting point.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{det_cols, Mat2, Vec2};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GaussianError {
    #[error("Kalman rank condition fails: det[b | Ab] = {det:e}")]
    NotControllable { det: f64 },
    #[error("singular Gramian at t = {t}: det = {det:e}")]
    SingularGramian { t: f64, det: f64 },
}

/// Drift matrix and diffusion column of `L0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LQOperator {
    pub a: Mat2,
    pub b: Vec2,
}

impl LQOperator {
    pub fn new(a: Mat2, b: Vec2) -> Result<Self, GaussianError> {
        if !kalman_ok(&a, &b) {
            return Err(GaussianError::NotControllable {
                det: det_cols(&b, &a.mul_vec(&b)),
            });
        }
        Ok(LQOperator { a, b })
    }

    /// `L0 = S x1 ∂2 + ½ ∂1²`.
    pub fn kolmogorov(s: f64) -> Result<Self, GaussianError> {
        LQOperator::new(Mat2::new(0.0, 0.0, s, 0.0), Vec2::new(1.0, 0.0))
    }

    /// `A² = 0`, in which case every Gramian is a cubic polynomial in `t`.
    pub fn is_nilpotent(&self) -> bool {
        self.a.trace() == 0.0 && self.a.det() == 0.0
    }

    pub fn exp(&self, t: f64) -> Mat2 {
        mat_exp(&self.a, t)
    }

    pub fn gamma(&self, t: f64) -> Mat2 {
        gramian_gamma(self, t)
    }

    pub fn g(&self, t: f64) -> Mat2 {
        gramian_g(self, t)
    }

    pub fn kernel(&self, t: f64, x: Vec2, y: Vec2) -> Result<f64, GaussianError> {
        kernel_eval(self, t, x, y)
    }

    /// `q0(1, 0, 0) = 1 / (2π √det G_1)`.
    pub fn diagonal_at_one(&self) -> Result<f64, GaussianError> {
        kernel_eval(self, 1.0, Vec2::ZERO, Vec2::ZERO)
    }
}

/// Kalman rank condition with a scale-free tolerance.
pub fn kalman_ok(a: &Mat2, b: &Vec2) -> bool {
    let ab = a.mul_vec(b);
    let scale = b.norm() * ab.norm();
    if scale == 0.0 || !scale.is_finite() {
        return false;
    }
    det_cols(b, &ab).abs() > 1e-12 * scale
}

/// `e^{tA}` by the 2×2 closed form
/// `e^{M} = e^{τ} (c(δ²) I + s(δ²) (M - τI))`, `τ = tr M / 2`, `δ² = τ² - det M`,
/// where `c = cosh √δ²` and `s = sinh √δ² / √δ²` continue analytically to
/// `δ² ≤ 0`. The defective and nilpotent cases are the `δ² = 0` branch.
pub fn mat_exp(a: &Mat2, t: f64) -> Mat2 {
    let m = a.scale(t);
    let tau = 0.5 * m.trace();
    let n = m - Mat2::IDENTITY.scale(tau);
    let delta2 = -n.det();
    let (c, s) = cosh_sinhc(delta2);
    let out = Mat2::IDENTITY.scale(c) + n.scale(s);
    if tau == 0.0 {
        out
    } else {
        out.scale(tau.exp())
    }
}

/// `(cosh q, sinh q / q)` as functions of `q² = d`.
fn cosh_sinhc(d: f64) -> (f64, f64) {
    if d == 0.0 {
        return (1.0, 1.0);
    }
    if d.abs() < 1e-3 {
        // Taylor in d; 7 terms reach 1e-22
        let mut c = 0.0;
        let mut s = 0.0;
        let mut term = 1.0;
        for k in 0..8 {
            let kf = k as f64;
            c += term;
            s += term / (2.0 * kf + 1.0);
            term *= d / ((2.0 * kf + 1.0) * (2.0 * kf + 2.0));
        }
        return (c, s);
    }
    if d > 0.0 {
        let q = d.sqrt();
        (q.cosh(), q.sinh() / q)
    } else {
        let q = (-d).sqrt();
        (q.cos(), q.sin() / q)
    }
}

/// `Γ_t = ∫₀ᵗ e^{-τA} b b* e^{-τA*} dτ`.
pub fn gramian_gamma(op: &LQOperator, t: f64) -> Mat2 {
    gramian(&op.a.scale(-1.0), &op.b, t)
}

/// `G_t = e^{tA} Γ_t e^{tA*} = ∫₀ᵗ e^{τA} b b* e^{τA*} dτ`.
pub fn gramian_g(op: &LQOperator, t: f64) -> Mat2 {
    gramian(&op.a, &op.b, t)
}

/// `∫₀ᵗ e^{τM} b b* e^{τM*} dτ`.
fn gramian(m: &Mat2, b: &Vec2, t: f64) -> Mat2 {
    if t == 0.0 {
        return Mat2::ZERO;
    }
    if m.trace() == 0.0 && m.det() == 0.0 {
        let mb = m.mul_vec(b);
        let cross = b.outer(&mb) + mb.outer(b);
        return b.outer(b).scale(t) + cross.scale(0.5 * t * t) + mb.outer(&mb).scale(t * t * t / 3.0);
    }
    let integrand = |tau: f64| {
        let v = mat_exp(m, tau).mul_vec(b);
        v.outer(&v)
    };
    let mut panels = 1usize;
    let mut prev = gauss_legendre_panels(&integrand, t, panels);
    loop {
        panels *= 2;
        let next = gauss_legendre_panels(&integrand, t, panels);
        let change = (next - prev).norm();
        if change <= 1e-13 * next.norm() || panels >= 1 << 16 {
            return next.symmetrized();
        }
        prev = next;
    }
}

const GL_NODES: [f64; 5] = [
    0.0,
    0.538_469_310_105_683_1,
    0.906_179_845_938_664,
    -0.538_469_310_105_683_1,
    -0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_47,
    0.236_926_885_056_189_08,
    0.478_628_670_499_366_47,
    0.236_926_885_056_189_08,
];

fn gauss_legendre_panels(f: &impl Fn(f64) -> Mat2, t: f64, panels: usize) -> Mat2 {
    let h = t / panels as f64;
    let mut acc = Mat2::ZERO;
    for k in 0..panels {
        let mid = (k as f64 + 0.5) * h;
        for (x, w) in GL_NODES.iter().zip(GL_WEIGHTS) {
            acc = acc + f(mid + 0.5 * h * x).scale(0.5 * h * w);
        }
    }
    acc
}

/// Inverse of a Gramian with the singularity reported as an error.
pub fn gramian_inverse(g: &Mat2, t: f64) -> Result<Mat2, GaussianError> {
    let det = g.det();
    // Hadamard ratio: invariant under diagonal rescaling, so the t¹ / t³
    // anisotropy of small-time Gramians is not mistaken for rank loss
    if !(det > 1e-12 * g.0[0][0] * g.0[1][1]) || !det.is_finite() {
        return Err(GaussianError::SingularGramian { t, det });
    }
    g.inverse().ok_or(GaussianError::SingularGramian { t, det })
}

/// `q0(t, x, y) = exp(-½ d* G_t⁻¹ d) / (2π √det G_t)` with `d = y - e^{tA} x`.
pub fn kernel_eval(op: &LQOperator, t: f64, x: Vec2, y: Vec2) -> Result<f64, GaussianError> {
    if !(t > 0.0) {
        return Err(GaussianError::SingularGramian { t, det: 0.0 });
    }
    let g = gramian_g(op, t);
    let ginv = gramian_inverse(&g, t)?;
    let d = y - op.exp(t).mul_vec(&x);
    Ok((-0.5 * ginv.quad_form(&d)).exp() / (2.0 * PI * g.det().sqrt()))
}

/// Departure from exact weighted homogeneity of the `S = 1` Kolmogorov kernel:
/// `|ε⁴ p0(ε²t, δ_ε x, δ_ε y) - p0(t, x, y)|` with `δ_ε(x1, x2) = (εx1, ε³x2)`.
pub fn rescale_residual(t: f64, eps: f64, x: Vec2, y: Vec2) -> f64 {
    let op = LQOperator::kolmogorov(1.0).expect("Kolmogorov pair is controllable");
    let dil = |v: Vec2| Vec2::new(eps * v.x1(), eps.powi(3) * v.x2());
    let scaled = kernel_eval(&op, eps * eps * t, dil(x), dil(y));
    let plain = kernel_eval(&op, t, x, y);
    match (scaled, plain) {
        (Ok(a), Ok(b)) => (eps.powi(4) * a - b).abs(),
        _ => f64::NAN,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &Mat2, b: &Mat2, tol: f64) -> bool {
        (*a - *b).norm() <= tol * b.norm().max(1.0)
    }

    #[test]
    fn kalman_cases() {
        let kol = Mat2::new(0.0, 0.0, 1.0, 0.0);
        assert!(kalman_ok(&kol, &Vec2::new(1.0, 0.0)));
        assert!(!kalman_ok(&Mat2::ZERO, &Vec2::new(1.0, 0.0)));
        assert!(kalman_ok(&Mat2::new(0.0, 0.0, -2.0, 0.0), &Vec2::new(1.0, 0.0)));
        assert!(!kalman_ok(&Mat2::IDENTITY, &Vec2::new(1.0, 1.0)));
        assert!(LQOperator::kolmogorov(0.0).is_err());
    }

    #[test]
    fn exponentials() {
        let s = 1.7;
        let t = 0.6;
        let e = mat_exp(&Mat2::new(0.0, 0.0, s, 0.0), t);
        assert_eq!(e, Mat2::new(1.0, 0.0, s * t, 1.0));
        let e = mat_exp(&Mat2::IDENTITY, 1.0);
        assert!(close(&e, &Mat2::IDENTITY.scale(std::f64::consts::E), 1e-15));
        let r = mat_exp(&Mat2::new(0.0, 1.0, -1.0, 0.0), PI / 2.0);
        assert!(close(&r, &Mat2::new(0.0, 1.0, -1.0, 0.0), 1e-15));
        // defective: Jordan block
        let j = mat_exp(&Mat2::new(2.0, 1.0, 0.0, 2.0), 0.5);
        let e1 = 1f64.exp();
        assert!(close(&j, &Mat2::new(e1, 0.5 * e1, 0.0, e1), 1e-15));
        // distinct real eigenvalues
        let d = mat_exp(&Mat2::diag(1.0, -3.0), 0.7);
        assert!(close(&d, &Mat2::diag(0.7f64.exp(), (-2.1f64).exp()), 1e-14));
    }

    #[test]
    fn kolmogorov_gramians() {
        let s = -2.0;
        let op = LQOperator::kolmogorov(s).unwrap();
        for &t in &[0.1, 0.5, 1.0, 3.0] {
            let gam = op.gamma(t);
            let want = Mat2::new(t, -s * t * t / 2.0, -s * t * t / 2.0, s * s * t.powi(3) / 3.0);
            assert!(close(&gam, &want, 1e-15));
            let g = op.g(t);
            let e = op.exp(t);
            assert!(close(&g, &(e * gam * e.transpose()), 1e-14));
        }
        assert_eq!(op.gamma(0.0), Mat2::ZERO);
        assert!((op.g(1.0).det() - s * s / 12.0).abs() < 1e-15);
    }

    #[test]
    fn quadrature_gramian_matches_definition() {
        let op = LQOperator::new(Mat2::new(0.3, 1.0, -1.0, -0.2), Vec2::new(1.0, 0.5)).unwrap();
        let t = 0.8;
        let g = op.g(t);
        let gam = op.gamma(t);
        let e = op.exp(t);
        assert!(close(&g, &(e * gam * e.transpose()), 1e-12));
        // det relation picks up e^{2 t tr A}
        let ratio = g.det() / gam.det();
        assert!((ratio - (2.0 * t * op.a.trace()).exp()).abs() < 1e-12 * ratio);
    }

    #[test]
    fn diagonal_values() {
        let op = LQOperator::kolmogorov(1.0).unwrap();
        let v = op.kernel(1.0, Vec2::ZERO, Vec2::ZERO).unwrap();
        assert!((v - 0.551_328_895_421_792).abs() < 1e-12);
        let v2 = op.kernel(2.0, Vec2::ZERO, Vec2::ZERO).unwrap();
        assert!((v2 - 12f64.sqrt() / (8.0 * PI)).abs() < 1e-15);
        let far = op.kernel(1.0, Vec2::ZERO, Vec2::new(0.5, -0.3)).unwrap();
        assert!(far < v);
        assert!(op.kernel(0.0, Vec2::ZERO, Vec2::ZERO).is_err());
    }

    #[test]
    fn homogeneity() {
        assert!(rescale_residual(1.0, 0.5, Vec2::ZERO, Vec2::ZERO) < 1e-12);
        assert_eq!(rescale_residual(0.7, 1.0, Vec2::new(0.2, 0.1), Vec2::ZERO), 0.0);
        let r = rescale_residual(0.3, 0.2, Vec2::new(0.1, 0.05), Vec2::new(0.0, 0.01));
        assert!(r < 1e-10, "{r}");
    }
}
