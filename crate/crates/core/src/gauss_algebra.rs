//! Gaussian calculus in the plane: products of densities, the splitting of a
//! pair of consecutive kernels, and moments up to order six.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::{gramian_inverse, GaussianError, LQOperator};
use crate::linalg::{Mat2, Vec2};

/// Highest total order of a moment that can be requested.
pub const MAX_MOMENT_ORDER: u32 = 6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlgebraError {
    #[error("precision matrix is singular or not positive definite")]
    SingularPrecision,
    #[error("covariance is not symmetric positive definite (asymmetry {asymmetry:e})")]
    BadCovariance { asymmetry: f64 },
    #[error("moment of order {order} requested, at most {MAX_MOMENT_ORDER} supported")]
    OrderOverflow { order: u32 },
    #[error("degenerate time {which} = {value:e} in kernel splitting")]
    DegenerateTime { which: &'static str, value: f64 },
    #[error(transparent)]
    Kernel(#[from] GaussianError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: Vec2,
    pub cov: Mat2,
}

impl Gaussian {
    /// Symmetrizes `cov`; rejects asymmetry above `1e-12` relative and
    /// non-positive-definite input.
    pub fn new(mean: Vec2, cov: Mat2) -> Result<Self, AlgebraError> {
        Gaussian::with_tolerance(mean, cov, 1e-12)
    }

    pub(crate) fn with_tolerance(mean: Vec2, cov: Mat2, tol: f64) -> Result<Self, AlgebraError> {
        let asymmetry = cov.asymmetry();
        let cov = cov.symmetrized();
        if asymmetry > tol || !is_positive_definite(&cov) {
            return Err(AlgebraError::BadCovariance { asymmetry });
        }
        Ok(Gaussian { mean, cov })
    }

    pub fn centered(cov: Mat2) -> Result<Self, AlgebraError> {
        Gaussian::new(Vec2::ZERO, cov)
    }

    pub fn log_density(&self, v: Vec2) -> f64 {
        let prec = self.cov.inverse().unwrap_or(Mat2::ZERO);
        let d = v - self.mean;
        -0.5 * prec.quad_form(&d) - (2.0 * PI).ln() - 0.5 * self.cov.det().ln()
    }

    pub fn density(&self, v: Vec2) -> f64 {
        self.log_density(v).exp()
    }

    pub fn central_moment(&self, a: u32, b: u32) -> Result<f64, AlgebraError> {
        central_moment(self, a, b)
    }

    pub fn raw_moment(&self, a: u32, b: u32) -> Result<f64, AlgebraError> {
        polynomial_expectation(self, &[(1.0, a, b)])
    }
}

/// A Gaussian density multiplied by `exp(log_weight)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledGaussian {
    pub log_weight: f64,
    pub gaussian: Gaussian,
}

impl ScaledGaussian {
    pub fn eval(&self, v: Vec2) -> f64 {
        (self.log_weight + self.gaussian.log_density(v)).exp()
    }
}

fn is_positive_definite(m: &Mat2) -> bool {
    m.0[0][0] > 0.0 && m.det() > 0.0 && m.is_finite()
}

/// Completion of squares for two Gaussian factors given by mean and precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianProduct {
    pub mean: Vec2,
    pub precision: Mat2,
    /// `(a - b)* 𝒞 (a - b)` with `𝒞 = (𝒜⁻¹ + ℬ⁻¹)⁻¹`.
    pub displaced: f64,
    /// `density_a · density_b = exp(log_const) · density_c`.
    pub log_const: f64,
}

impl GaussianProduct {
    pub fn gaussian(&self) -> Result<Gaussian, AlgebraError> {
        let cov = self.precision.inverse().ok_or(AlgebraError::SingularPrecision)?;
        Gaussian::with_tolerance(self.mean, cov, 1e-10)
    }
}

/// `(v-a)*𝒜(v-a) + (v-b)*ℬ(v-b) = (v-c)*(𝒜+ℬ)(v-c) + (a-b)*𝒞(a-b)`.
pub fn product(
    a_mean: Vec2,
    a_prec: Mat2,
    b_mean: Vec2,
    b_prec: Mat2,
) -> Result<GaussianProduct, AlgebraError> {
    let (pa, pb) = (a_prec.symmetrized(), b_prec.symmetrized());
    if !is_positive_definite(&pa) || !is_positive_definite(&pb) {
        return Err(AlgebraError::SingularPrecision);
    }
    let sum = pa + pb;
    let sum_inv = sum.inverse().ok_or(AlgebraError::SingularPrecision)?;
    let mean = sum_inv.mul_vec(&(pa.mul_vec(&a_mean) + pb.mul_vec(&b_mean)));
    let c = (pa * sum_inv * pb).symmetrized();
    let displaced = c.quad_form(&(a_mean - b_mean));
    let log_const = -0.5 * displaced - (2.0 * PI).ln() + 0.5 * c.det().ln();
    Ok(GaussianProduct {
        mean,
        precision: sum,
        displaced,
        log_const,
    })
}

/// Right-hand side of the splitting
/// `q0(r, z, w) q0(1-s-r, w, 0) = q0(1-s, z, 0) · N(w; ν, Σ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lemma31Split {
    /// `ln q0(1-s, z, 0)`.
    pub z_log_factor: f64,
    /// `q0(1-s, z, 0)`.
    pub z_factor: f64,
    pub w_gaussian: Gaussian,
    /// Relative asymmetry of `Σ` before symmetrization.
    pub asymmetry: f64,
}

/// Kernel-pair splitting. In `w` the pair is Gaussian with precision
/// `P = G_r⁻¹ + F* G_{1-s-r}⁻¹ F`, `F = e^{(1-s-r)A}`, and mean
/// `ν = P⁻¹ G_r⁻¹ e^{rA} z`; the covariance equals
/// `Γ_{1-s-r} e^{-rA*} Γ_{1-s}⁻¹ Γ_r e^{rA*}`, whose asymmetry is reported.
pub fn lemma31_split(op: &LQOperator, s: f64, r: f64, z: Vec2) -> Result<Lemma31Split, AlgebraError> {
    let rest = 1.0 - s - r;
    if !(r >= 1e-10) {
        return Err(AlgebraError::DegenerateTime { which: "r", value: r });
    }
    if !(rest >= 1e-10) {
        return Err(AlgebraError::DegenerateTime { which: "1-s-r", value: rest });
    }
    let t = 1.0 - s;
    let g_r_inv = gramian_inverse(&op.g(r), r)?;
    let g_rest_inv = gramian_inverse(&op.g(rest), rest)?;
    let f = op.exp(rest);
    let prec = (g_r_inv + f.transpose() * g_rest_inv * f).symmetrized();
    let cov = prec.inverse().ok_or(AlgebraError::SingularPrecision)?;
    let mean = cov.mul_vec(&g_r_inv.mul_vec(&op.exp(r).mul_vec(&z)));
    let sigma_raw = op.gamma(rest) * op.exp(-r).transpose() * gramian_inverse(&op.gamma(t), t)? * op.gamma(r) * op.exp(r).transpose();
    let asymmetry = sigma_raw.asymmetry();
    let w_gaussian = Gaussian::with_tolerance(mean, cov, 1e-8)?;
    // q0(1-s, z, 0) in the forward form N(0; e^{tA} z, G_t)
    let g_t = op.g(t);
    let d = op.exp(t).mul_vec(&z);
    let z_log_factor = -0.5 * gramian_inverse(&g_t, t)?.quad_form(&d) - (2.0 * PI).ln() - 0.5 * g_t.det().ln();
    Ok(Lemma31Split {
        z_log_factor,
        z_factor: z_log_factor.exp(),
        w_gaussian,
        asymmetry,
    })
}

/// `E[(w1-m1)^a (w2-m2)^b]` by Isserlis pairing.
pub fn central_moment(g: &Gaussian, a: u32, b: u32) -> Result<f64, AlgebraError> {
    let order = a + b;
    if order > MAX_MOMENT_ORDER {
        return Err(AlgebraError::OrderOverflow { order });
    }
    Ok(isserlis(&g.cov, a, b))
}

/// Zero-mean moment `E[w1^a w2^b]` for covariance `c`; no order check.
pub(crate) fn isserlis(c: &Mat2, a: u32, b: u32) -> f64 {
    if (a + b) % 2 == 1 {
        return 0.0;
    }
    let mut idx = [0usize; 16];
    let n = (a + b) as usize;
    for (k, slot) in idx.iter_mut().enumerate().take(n) {
        *slot = usize::from(k >= a as usize);
    }
    pairings(c, &mut idx[..n])
}

fn pairings(c: &Mat2, idx: &mut [usize]) -> f64 {
    if idx.is_empty() {
        return 1.0;
    }
    let first = idx[0];
    let rest = &mut idx[1..];
    let mut total = 0.0;
    for k in 0..rest.len() {
        let partner = rest[k];
        rest.swap(0, k);
        total += c.0[first][partner] * pairings(c, &mut rest[1..]);
        rest.swap(0, k);
    }
    total
}

/// `E[Σ coeff · w1^a · w2^b]`.
pub fn polynomial_expectation(g: &Gaussian, poly: &[(f64, u32, u32)]) -> Result<f64, AlgebraError> {
    let m = g.mean;
    let mut total = 0.0;
    for &(coeff, a, b) in poly {
        if a + b > MAX_MOMENT_ORDER {
            return Err(AlgebraError::OrderOverflow { order: a + b });
        }
        if coeff == 0.0 {
            continue;
        }
        // binomial expansion of (m1 + c1)^a (m2 + c2)^b around the mean
        let mut term = 0.0;
        for i in 0..=a {
            for j in 0..=b {
                let mu = isserlis(&g.cov, i, j);
                if mu == 0.0 {
                    continue;
                }
                term += binomial(a, i) * binomial(b, j) * m.x1().powi((a - i) as i32) * m.x2().powi((b - j) as i32) * mu;
            }
        }
        total += coeff * term;
    }
    Ok(total)
}

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * f64::from(n - i) / f64::from(i + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coincident_and_displaced_products() {
        let p = product(Vec2::new(0.3, 0.1), Mat2::IDENTITY, Vec2::new(0.3, 0.1), Mat2::IDENTITY).unwrap();
        assert_eq!(p.mean, Vec2::new(0.3, 0.1));
        assert_eq!(p.precision, Mat2::IDENTITY.scale(2.0));
        assert_eq!(p.displaced, 0.0);
        let p = product(Vec2::ZERO, Mat2::IDENTITY, Vec2::new(1.0, 0.0), Mat2::IDENTITY).unwrap();
        assert!((p.mean - Vec2::new(0.5, 0.0)).norm() < 1e-16);
        assert!((p.displaced - 0.5).abs() < 1e-16);
        assert!(product(Vec2::ZERO, Mat2::ZERO, Vec2::ZERO, Mat2::IDENTITY).is_err());
    }

    #[test]
    fn moments() {
        let g = Gaussian::new(Vec2::new(0.4, -1.0), Mat2::new(2.0, 0.3, 0.3, 0.5)).unwrap();
        assert_eq!(g.central_moment(1, 0).unwrap(), 0.0);
        assert_eq!(g.central_moment(2, 1).unwrap(), 0.0);
        assert_eq!(g.central_moment(2, 0).unwrap(), 2.0);
        assert!((g.central_moment(4, 0).unwrap() - 12.0).abs() < 1e-14);
        assert!((g.central_moment(2, 2).unwrap() - (2.0 * 0.5 + 2.0 * 0.09)).abs() < 1e-14);
        assert!((g.central_moment(6, 0).unwrap() - 15.0 * 8.0).abs() < 1e-12);
        assert!(matches!(g.central_moment(4, 3), Err(AlgebraError::OrderOverflow { order: 7 })));
        assert_eq!(polynomial_expectation(&g, &[(1.0, 0, 0)]).unwrap(), 1.0);
        assert_eq!(polynomial_expectation(&g, &[(1.0, 1, 0)]).unwrap(), 0.4);
        assert!((polynomial_expectation(&g, &[(1.0, 2, 0)]).unwrap() - 2.16).abs() < 1e-15);
        assert_eq!(polynomial_expectation(&g, &[]).unwrap(), 0.0);
    }

    #[test]
    fn split_at_zero_has_zero_mean() {
        let op = LQOperator::kolmogorov(1.0).unwrap();
        let sp = lemma31_split(&op, 0.25, 0.25, Vec2::ZERO).unwrap();
        assert_eq!(sp.w_gaussian.mean, Vec2::ZERO);
        assert!(sp.asymmetry < 1e-10);
        assert!(lemma31_split(&op, 0.5, 0.5, Vec2::ZERO).is_err());
        assert!(lemma31_split(&op, 0.5, 0.0, Vec2::ZERO).is_err());
    }
}
