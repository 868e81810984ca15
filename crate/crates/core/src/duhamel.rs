//! Duhamel convolutions of the exact kernel against monomial first-order
//! operators, and the first-order coefficient of the diagonal expansion.
//!
//! Every space integral is Gaussian: after the splitting of
//! [`crate::gauss_algebra`] the integrand in the space variables is a
//! polynomial times a Gaussian density, so only the time variables are
//! integrated numerically. All values are reported normalized by
//! `q0(1, 0, 0)` and raw.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::Var;
use crate::gauss_algebra::{polynomial_expectation, AlgebraError, Gaussian, MAX_MOMENT_ORDER};
use crate::gaussian::{gramian_inverse, GaussianError, LQOperator};
use crate::linalg::{Mat2, Vec2};
use crate::quadrature::{integrate, integrate_simplex, QuadratureError, Tolerance};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DuhamelError {
    #[error("monomial x1^{a} x2^{b} exceeds total degree 3")]
    DegreeTooHigh { a: u32, b: u32 },
    #[error("first-order term does not vanish: {value:e}")]
    FirstOrderNonzero { value: f64 },
    #[error("Taylor data require ∂1 α2(0) ≠ 0")]
    DegenerateS,
    #[error(transparent)]
    Kernel(#[from] GaussianError),
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

/// `coeff · x1^a · x2^b · ∂_{deriv}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonomialOp {
    pub coeff: f64,
    pub a: u32,
    pub b: u32,
    pub deriv: Var,
}

impl MonomialOp {
    pub fn new(coeff: f64, a: u32, b: u32, deriv: Var) -> Result<Self, DuhamelError> {
        if a + b > 3 {
            return Err(DuhamelError::DegreeTooHigh { a, b });
        }
        Ok(MonomialOp { coeff, a, b, deriv })
    }

    /// The same monomial with unit coefficient.
    pub fn unit(&self) -> MonomialOp {
        MonomialOp { coeff: 1.0, ..*self }
    }

    fn key(&self) -> (u32, u32, usize) {
        (self.a, self.b, self.deriv.index())
    }

    fn degree(&self) -> u32 {
        self.a + self.b
    }
}

impl fmt::Display for MonomialOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.coeff != 1.0 {
            write!(f, "{}*", self.coeff)?;
        }
        for (name, e) in [("x1", self.a), ("x2", self.b)] {
            match e {
                0 => {}
                1 => write!(f, "{name}*")?,
                _ => write!(f, "{name}^{e}*")?,
            }
        }
        write!(f, "d{}", self.deriv.index())
    }
}

/// Taylor coefficients of the chart drift `α1 ∂1 + α2 ∂2` at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TaylorData {
    pub alpha1_0: f64,
    pub d1_alpha1_0: f64,
    pub d2_alpha2_0: f64,
    /// `∂1 α2(0)`.
    pub s: f64,
    pub d11_alpha2_0: f64,
    pub d111_alpha2_0: f64,
}

impl TaylorData {
    pub fn kolmogorov(s: f64) -> Self {
        TaylorData {
            s,
            ..TaylorData::default()
        }
    }
}

/// Order-ε and order-ε² parts of the rescaled operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSeries {
    pub x_terms: Vec<MonomialOp>,
    pub y_terms: Vec<MonomialOp>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpansionCoefficient {
    /// `1 / (2π √det G_1)`.
    pub leading: f64,
    pub first_order: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvResult {
    pub normalized: f64,
    pub raw: f64,
    /// Quadrature error estimate on the normalized value.
    pub error: f64,
    pub evaluations: usize,
}

/// `∂_x q0(t, x, y) = grad_log_kernel(t, x, y) · q0(t, x, y)`, i.e.
/// `-Γ_t⁻¹ (x - e^{-tA} y)`.
pub fn grad_log_kernel(op: &LQOperator, t: f64, x: Vec2, y: Vec2) -> Result<Vec2, DuhamelError> {
    let gam = op.gamma(t);
    let inv = gramian_inverse(&gam, t)?;
    let d = x - op.exp(-t).mul_vec(&y);
    Ok(-inv.mul_vec(&d))
}

const CORNER: f64 = 1e-8;

fn clamp_unit(x: f64) -> f64 {
    x.clamp(CORNER, 1.0 - CORNER)
}

/// Covariance of the normalized product `q0(s,0,z) q0(1-s,z,0) / q0(1,0,0)`:
/// `Σ' = (G_s⁻¹ + Γ_{1-s}⁻¹)⁻¹ = G_s e^{-sA*} Γ_1⁻¹ e^{-sA} Γ_{1-s}`.
/// The second form never inverts a small-time Gramian.
pub fn sigma_prime(op: &LQOperator, s: f64) -> Result<Mat2, DuhamelError> {
    let g1_inv = gramian_inverse(&op.gamma(1.0), 1.0)?;
    let e = op.exp(-s);
    Ok((op.g(s) * e.transpose() * g1_inv * e * op.gamma(1.0 - s)).symmetrized())
}

fn normalization(op: &LQOperator) -> Result<f64, DuhamelError> {
    Ok(op.diagonal_at_one()?)
}

fn slot(v: Var) -> usize {
    v.index() - 1
}

/// `(q0 * D q0)(1, 0, 0) = ∫₀¹ ∫ q0(s,0,z) (D q0)(1-s, z, 0) dz ds`.
pub fn conv1(op: &LQOperator, d: &MonomialOp) -> Result<ConvResult, DuhamelError> {
    let order = d.degree() + 1;
    if order > MAX_MOMENT_ORDER {
        return Err(AlgebraError::OrderOverflow { order }.into());
    }
    let mut failure = None;
    let est = integrate(
        |s| match conv1_integrand(op, d, s) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                0.0
            }
        },
        0.0,
        1.0,
        Tolerance {
            abs: 1e-11,
            rel: 0.0,
            max_intervals: 500,
        },
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let est = est?;
    let q = normalization(op)?;
    Ok(ConvResult {
        normalized: est.value,
        raw: est.value * q,
        error: est.error,
        evaluations: est.evaluations,
    })
}

/// `E_{z ~ N(0, Σ')} [c z^m (-Γ_{1-s}⁻¹ z)_i]`.
pub fn conv1_integrand(op: &LQOperator, d: &MonomialOp, s: f64) -> Result<f64, DuhamelError> {
    let s = clamp_unit(s);
    let t = 1.0 - s;
    let sp = Gaussian::with_tolerance(Vec2::ZERO, sigma_prime(op, s)?, 1e-8)?;
    let inv = gramian_inverse(&op.gamma(t), t)?;
    let i = slot(d.deriv);
    let poly = [
        (-d.coeff * inv.0[i][0], d.a + 1, d.b),
        (-d.coeff * inv.0[i][1], d.a, d.b + 1),
    ];
    Ok(polynomial_expectation(&sp, &poly)?)
}

/// `(q0 * D1 q0 * D2 q0)(1, 0, 0)` over the time simplex, with `D1` acting on
/// `q0(r, z, w)` in `z` and `D2` on `q0(1-s-r, w, 0)` in `w`.
pub fn conv2(op: &LQOperator, d1: &MonomialOp, d2: &MonomialOp) -> Result<ConvResult, DuhamelError> {
    let z_order = d1.degree() + d2.degree() + 2;
    if z_order > MAX_MOMENT_ORDER {
        return Err(AlgebraError::OrderOverflow { order: z_order }.into());
    }
    let mut failure = None;
    let est = integrate_simplex(
        |s, r| match conv2_integrand(op, d1, d2, s, r) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                0.0
            }
        },
        Tolerance {
            abs: 1e-9,
            rel: 0.0,
            max_intervals: 400,
        },
        Tolerance {
            abs: 1e-11,
            rel: 0.0,
            max_intervals: 400,
        },
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let est = est?;
    let q = normalization(op)?;
    Ok(ConvResult {
        normalized: est.value,
        raw: est.value * q,
        error: est.error,
        evaluations: est.evaluations,
    })
}

/// Factors of the double-convolution integrand, each linear in `(z, u)`.
#[derive(Debug, Clone, Copy)]
enum Factor {
    /// `z_k`.
    Z(usize),
    /// `w_k = (ν(z) + u)_k`.
    W(usize),
    /// `ℓ1 = -(Γ_{1-s}⁻¹ z)_i + (Γ_r⁻¹ e^{-rA} u)_i`.
    L1(usize),
    /// `ℓ2 = -(e^{-rA*} Γ_{1-s}⁻¹ z + Γ_{1-s-r}⁻¹ u)_j`.
    L2(usize),
}

/// Covariances between factors, written through `M = e^{-sA*} Γ_1⁻¹ e^{-sA}`
/// and the composition rule `Γ_{1-s} = Γ_r + e^{-rA} Γ_{1-s-r} e^{-rA*}`, so
/// that no Gramian of a short time interval is ever inverted.
struct FactorCovariance {
    zz: Mat2,
    zw: Mat2,
    zl1: Mat2,
    zl2: Mat2,
    ww: Mat2,
    wl1: Mat2,
    wl2: Mat2,
    l1l2: Mat2,
}

impl FactorCovariance {
    fn new(op: &LQOperator, s: f64, r: f64) -> Result<Self, DuhamelError> {
        let t = 1.0 - s;
        let rest = t - r;
        let g1_inv = gramian_inverse(&op.gamma(1.0), 1.0)?;
        let es = op.exp(-s);
        let m = (es.transpose() * g1_inv * es).symmetrized();
        let g_s = op.g(s);
        let gam_t = op.gamma(t);
        let gam_rest = op.gamma(rest);
        let e = op.exp(-r);
        let gm = g_s * m;
        let rest_m = gam_rest * e.transpose() * m;
        Ok(FactorCovariance {
            zz: (gm * gam_t).symmetrized(),
            zw: gm * e * gam_rest,
            zl1: -gm,
            zl2: -(gm * e),
            ww: (gam_rest - rest_m * e * gam_rest).symmetrized(),
            wl1: rest_m,
            wl2: rest_m * e - Mat2::IDENTITY,
            l1l2: -(m * e),
        })
    }

    fn get(&self, p: Factor, q: Factor) -> f64 {
        use Factor::*;
        match (p, q) {
            (Z(k), Z(l)) => self.zz.0[k][l],
            (Z(k), W(l)) => self.zw.0[k][l],
            (W(l), Z(k)) => self.zw.0[k][l],
            (Z(k), L1(i)) | (L1(i), Z(k)) => self.zl1.0[k][i],
            (Z(k), L2(j)) | (L2(j), Z(k)) => self.zl2.0[k][j],
            (W(k), W(l)) => self.ww.0[k][l],
            (W(k), L1(i)) | (L1(i), W(k)) => self.wl1.0[k][i],
            (W(k), L2(j)) | (L2(j), W(k)) => self.wl2.0[k][j],
            (L1(i), L2(j)) => self.l1l2.0[i][j],
            (L2(j), L1(i)) => self.l1l2.0[i][j],
            // each derivative factor occurs once
            (L1(_), L1(_)) | (L2(_), L2(_)) => unreachable!("derivative factor paired with itself"),
        }
    }
}

/// Normalized double-convolution integrand at `(s, r)`.
///
/// With `z ~ N(0, Σ')`, `w = ν(z) + u`, `u ~ N(0, Σ)` independent of `z`,
/// the integrand is `E[c1 z^{m1} ℓ1 · c2 w^{m2} ℓ2]` where
/// `ℓ1 = -(Γ_{1-s}⁻¹ z)_i + (Γ_r⁻¹ e^{-rA} u)_i` and
/// `ℓ2 = -(e^{-rA*} Γ_{1-s}⁻¹ z + Γ_{1-s-r}⁻¹ u)_j`. All factors are jointly
/// Gaussian and centred, so the expectation is the hafnian of their
/// covariance matrix.
pub fn conv2_integrand(
    op: &LQOperator,
    d1: &MonomialOp,
    d2: &MonomialOp,
    s: f64,
    r: f64,
) -> Result<f64, DuhamelError> {
    // stay a relative distance CORNER away from every face of the simplex
    let s = clamp_unit(s);
    let t = 1.0 - s;
    let r = t * clamp_unit(r / t);
    let cov = FactorCovariance::new(op, s, r)?;

    let mut factors: Vec<Factor> = Vec::with_capacity(10);
    factors.extend(std::iter::repeat(Factor::Z(0)).take(d1.a as usize));
    factors.extend(std::iter::repeat(Factor::Z(1)).take(d1.b as usize));
    factors.push(Factor::L1(slot(d1.deriv)));
    factors.extend(std::iter::repeat(Factor::W(0)).take(d2.a as usize));
    factors.extend(std::iter::repeat(Factor::W(1)).take(d2.b as usize));
    factors.push(Factor::L2(slot(d2.deriv)));
    let n = factors.len();
    if n % 2 == 1 {
        return Ok(0.0);
    }
    let mut gram = [[0.0; 10]; 10];
    for p in 0..n {
        for q in (p + 1)..n {
            let v = cov.get(factors[p], factors[q]);
            gram[p][q] = v;
            gram[q][p] = v;
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    Ok(d1.coeff * d2.coeff * hafnian(&gram, &mut idx))
}

fn hafnian(gram: &[[f64; 10]; 10], idx: &mut [usize]) -> f64 {
    if idx.is_empty() {
        return 1.0;
    }
    let first = idx[0];
    let rest = &mut idx[1..];
    let mut total = 0.0;
    for k in 0..rest.len() {
        rest.swap(0, k);
        let partner = rest[0];
        total += gram[first][partner] * hafnian(gram, &mut rest[1..]);
        rest.swap(0, k);
    }
    total
}

/// `𝒳` and `𝒴` in monomial form.
pub fn build_perturbation(taylor: &TaylorData) -> Result<PerturbationSeries, DuhamelError> {
    let s = taylor.s;
    if s == 0.0 || !s.is_finite() {
        return Err(DuhamelError::DegenerateS);
    }
    let c = taylor.d11_alpha2_0 / s;
    let x_terms = vec![
        MonomialOp::new(taylor.alpha1_0, 0, 0, Var::X1)?,
        MonomialOp::new(0.5 * taylor.d11_alpha2_0, 2, 0, Var::X2)?,
        MonomialOp::new(-0.5 * c, 0, 0, Var::X1)?,
    ];
    let y_terms = vec![
        MonomialOp::new(taylor.d1_alpha1_0, 1, 0, Var::X1)?,
        MonomialOp::new(taylor.d2_alpha2_0, 0, 1, Var::X2)?,
        MonomialOp::new(taylor.d111_alpha2_0 / 6.0, 3, 0, Var::X2)?,
        MonomialOp::new(-0.5 * (taylor.d111_alpha2_0 / s - c * c), 1, 0, Var::X1)?,
    ];
    Ok(PerturbationSeries { x_terms, y_terms })
}

/// Closed form of the coefficient of `t` in `p(t,0,0) t² 2π √det G_1`.
pub fn second_order_coefficient(taylor: &TaylorData) -> Result<f64, DuhamelError> {
    let s = taylor.s;
    if s == 0.0 || !s.is_finite() {
        return Err(DuhamelError::DegenerateS);
    }
    let a = taylor.alpha1_0;
    let c = taylor.d11_alpha2_0 / s;
    Ok(-0.5 * a * a - 0.5 * (taylor.d1_alpha1_0 + taylor.d2_alpha2_0 - a * c) - 12.0 / 35.0 * c * c
        + 3.0 / 14.0 * (taylor.d111_alpha2_0 / s))
}

/// Leading and first-order coefficients from the closed form.
pub fn expansion_coefficient(taylor: &TaylorData) -> Result<ExpansionCoefficient, DuhamelError> {
    let op = LQOperator::kolmogorov(taylor.s)?;
    Ok(ExpansionCoefficient {
        leading: op.diagonal_at_one()?,
        first_order: second_order_coefficient(taylor)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NumericCoefficient {
    pub value: f64,
    /// `Σ (q0 * 𝒳 q0)(1,0,0)`, normalized; should vanish.
    pub first_order: f64,
    pub error: f64,
}

/// Memo of unit-coefficient convolutions; the series are bilinear in the
/// monomial coefficients.
#[derive(Debug, Default)]
pub struct ConvCache {
    single: BTreeMap<(u32, u32, usize), ConvResult>,
    double: BTreeMap<((u32, u32, usize), (u32, u32, usize)), ConvResult>,
}

impl ConvCache {
    pub fn conv1(&mut self, op: &LQOperator, d: &MonomialOp) -> Result<ConvResult, DuhamelError> {
        if let Some(v) = self.single.get(&d.key()) {
            return Ok(*v);
        }
        let v = conv1(op, &d.unit())?;
        self.single.insert(d.key(), v);
        Ok(v)
    }

    pub fn conv2(&mut self, op: &LQOperator, d1: &MonomialOp, d2: &MonomialOp) -> Result<ConvResult, DuhamelError> {
        let key = (d1.key(), d2.key());
        if let Some(v) = self.double.get(&key) {
            return Ok(*v);
        }
        let v = conv2(op, &d1.unit(), &d2.unit())?;
        self.double.insert(key, v);
        Ok(v)
    }
}

/// `(q0 * 𝒳q0 * 𝒳q0 + q0 * 𝒴q0)(1,0,0) / q0(1,0,0)` by quadrature.
pub fn second_order_coefficient_numeric(
    op: &LQOperator,
    series: &PerturbationSeries,
) -> Result<NumericCoefficient, DuhamelError> {
    let mut cache = ConvCache::default();
    let mut first_order = 0.0;
    let mut error = 0.0;
    for d in series.x_terms.iter().filter(|d| d.coeff != 0.0) {
        let c = cache.conv1(op, d)?;
        first_order += d.coeff * c.normalized;
        error += d.coeff.abs() * c.error;
    }
    if first_order.abs() > 1e-8 + error {
        return Err(DuhamelError::FirstOrderNonzero { value: first_order });
    }
    let mut value = 0.0;
    let mut error = 0.0;
    for d1 in series.x_terms.iter().filter(|d| d.coeff != 0.0) {
        for d2 in series.x_terms.iter().filter(|d| d.coeff != 0.0) {
            let c = cache.conv2(op, d1, d2)?;
            value += d1.coeff * d2.coeff * c.normalized;
            error += (d1.coeff * d2.coeff).abs() * c.error;
        }
    }
    for d in series.y_terms.iter().filter(|d| d.coeff != 0.0) {
        let c = cache.conv1(op, d)?;
        value += d.coeff * c.normalized;
        error += d.coeff.abs() * c.error;
    }
    Ok(NumericCoefficient {
        value,
        first_order,
        error,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemainderProbe {
    pub max: f64,
    pub interior_max: f64,
    /// Maximum over the strip `s ≥ 0.9`.
    pub boundary_max: f64,
}

/// Grid maximum of `P(|z1|, |z2|) · exp(-½ z* Γ_{1-s}⁻¹ z) / (2π √det Γ_{1-s})`
/// over `s ∈ {0, 1/50, …, 49/50}` and a `bound_samples²` grid on `[-2, 2]²`,
/// where `P(y) = Π_k |c_k| (1 + y1 + y2)^{deg_k + 1}` majorizes the product of
/// the three monomial operators and their kernel-derivative factors.
pub fn remainder_probe(
    op: &LQOperator,
    d: [&MonomialOp; 3],
    bound_samples: usize,
) -> Result<RemainderProbe, DuhamelError> {
    const N_S: usize = 50;
    let n = bound_samples.max(2);
    let weight: f64 = d.iter().map(|m| m.coeff.abs()).product();
    let power: i32 = d.iter().map(|m| (m.degree() + 1) as i32).sum();
    let mut interior_max = 0.0f64;
    let mut boundary_max = 0.0f64;
    for k in 0..N_S {
        let s = k as f64 / N_S as f64;
        let t = 1.0 - s;
        let gam = op.gamma(t);
        let inv = gramian_inverse(&gam, t)?;
        let norm = 1.0 / (2.0 * std::f64::consts::PI * gam.det().sqrt());
        let mut row_max = 0.0f64;
        for i1 in 0..n {
            let z1 = -2.0 + 4.0 * i1 as f64 / (n - 1) as f64;
            for i2 in 0..n {
                let z2 = -2.0 + 4.0 * i2 as f64 / (n - 1) as f64;
                let z = Vec2::new(z1, z2);
                let p = weight * (1.0 + z1.abs() + z2.abs()).powi(power);
                let v = p * (-0.5 * inv.quad_form(&z)).exp() * norm;
                row_max = row_max.max(v);
            }
        }
        if s >= 0.9 {
            boundary_max = boundary_max.max(row_max);
        } else {
            interior_max = interior_max.max(row_max);
        }
    }
    Ok(RemainderProbe {
        max: interior_max.max(boundary_max),
        interior_max,
        boundary_max,
    })
}

/// Value of the probe integrand at a single point.
pub fn remainder_integrand(op: &LQOperator, d: [&MonomialOp; 3], s: f64, z: Vec2) -> Result<f64, DuhamelError> {
    let t = 1.0 - s;
    let gam = op.gamma(t);
    let inv = gramian_inverse(&gam, t)?;
    let weight: f64 = d.iter().map(|m| m.coeff.abs()).product();
    let power: i32 = d.iter().map(|m| (m.degree() + 1) as i32).sum();
    let p = weight * (1.0 + z.x1().abs() + z.x2().abs()).powi(power);
    Ok(p * (-0.5 * inv.quad_form(&z)).exp() / (2.0 * std::f64::consts::PI * gam.det().sqrt()))
}
