//! Intrinsic side of the expansion: brackets of the pair `(X0, X1)`, the
//! moving frame `{X1, X2 = [X0, X1]}`, its structure constants, the canonical
//! volume, curvature invariants and the Hamiltonian `H = h0 + ½ h1²`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::duhamel::{second_order_coefficient, DuhamelError, TaylorData};
use crate::expr::{CompiledExpr, Expr, ExprError, Var};
use crate::linalg::{det_cols, Vec2};

/// Relative tolerance for the two hypotheses at the base point.
pub const HYPOTHESIS_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("frame {{X1, [X0, X1]}} is degenerate at ({}, {})", .0.x1(), .0.x2())]
    DegenerateFrame(Vec2),
    #[error("hypothesis (a) fails: X0 is not parallel to X1 at the base point (residual {residual:e})")]
    NotParallel { residual: f64 },
    #[error("hypothesis (b) fails: X1 and [X0, X1] do not span the tangent space (det {det:e})")]
    NotBracketGenerating { det: f64 },
    #[error("pair is not in chart form: X1 must be exactly ∂1")]
    NotChartForm,
    #[error("extremal blew up at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Duhamel(#[from] DuhamelError),
}

fn at(p: Vec2) -> (f64, f64) {
    (p.x1(), p.x2())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub f1: Expr,
    pub f2: Expr,
}

impl VectorField {
    pub fn new(f1: Expr, f2: Expr) -> Self {
        VectorField { f1, f2 }
    }

    pub fn parse(f1: &str, f2: &str) -> Result<Self, ExprError> {
        Ok(VectorField::new(Expr::parse(f1)?, Expr::parse(f2)?))
    }

    /// `∂_{x_k}` for `k ∈ {1, 2}`.
    pub fn coordinate(k: Var) -> Self {
        match k {
            Var::X1 => VectorField::new(Expr::Const(1.0), Expr::Const(0.0)),
            Var::X2 => VectorField::new(Expr::Const(0.0), Expr::Const(1.0)),
        }
    }

    pub fn component(&self, k: usize) -> &Expr {
        if k == 0 {
            &self.f1
        } else {
            &self.f2
        }
    }

    pub fn eval(&self, p: Vec2) -> Result<Vec2, ExprError> {
        Ok(Vec2::new(self.f1.eval(at(p))?, self.f2.eval(at(p))?))
    }

    /// Directional derivative `X(f) = X¹ ∂1 f + X² ∂2 f`.
    pub fn apply(&self, f: &Expr) -> Expr {
        (self.f1.clone() * f.diff(Var::X1) + self.f2.clone() * f.diff(Var::X2)).simplify()
    }

    pub fn simplify(&self) -> Self {
        VectorField::new(self.f1.simplify(), self.f2.simplify())
    }

    pub fn scale(&self, k: &Expr) -> Self {
        VectorField::new(k.clone() * self.f1.clone(), k.clone() * self.f2.clone()).simplify()
    }

    pub fn add(&self, other: &VectorField) -> Self {
        VectorField::new(self.f1.clone() + other.f1.clone(), self.f2.clone() + other.f2.clone()).simplify()
    }

    /// True when the field is exactly `∂1` after simplification.
    pub fn is_d1(&self) -> bool {
        let s = self.simplify();
        s.f1.as_const() == Some(1.0) && s.f2.as_const() == Some(0.0)
    }

    pub fn compile(&self) -> CompiledField {
        CompiledField {
            f1: self.f1.compile(),
            f2: self.f2.compile(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledField {
    pub f1: CompiledExpr,
    pub f2: CompiledExpr,
}

impl CompiledField {
    #[inline]
    pub fn eval(&self, x1: f64, x2: f64) -> (f64, f64) {
        (self.f1.eval(x1, x2), self.f2.eval(x1, x2))
    }
}

/// `[X, Y]^k = X^j ∂_j Y^k - Y^j ∂_j X^k`.
pub fn lie_bracket(x: &VectorField, y: &VectorField) -> VectorField {
    let comp = |yk: &Expr, xk: &Expr| (x.apply(yk) - y.apply(xk)).simplify();
    VectorField::new(comp(&y.f1, &x.f1), comp(&y.f2, &x.f2))
}

/// Drift `X0` and controlled field `X1`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldPair {
    pub x0: VectorField,
    pub x1: VectorField,
}

impl VectorFieldPair {
    pub fn new(x0: VectorField, x1: VectorField) -> Self {
        VectorFieldPair { x0, x1 }
    }

    pub fn parse(x0: [&str; 2], x1: [&str; 2]) -> Result<Self, ExprError> {
        Ok(VectorFieldPair::new(
            VectorField::parse(x0[0], x0[1])?,
            VectorField::parse(x1[0], x1[1])?,
        ))
    }

    /// `X0 = S x1 ∂2`, `X1 = ∂1`.
    pub fn kolmogorov(s: f64) -> Self {
        VectorFieldPair::new(
            VectorField::new(Expr::Const(0.0), Expr::Const(s) * Expr::x1()),
            VectorField::coordinate(Var::X1),
        )
    }

    /// Chart form `X0 = α1 ∂1 + α2 ∂2`, `X1 = ∂1`.
    pub fn chart(alpha1: Expr, alpha2: Expr) -> Self {
        VectorFieldPair::new(VectorField::new(alpha1, alpha2), VectorField::coordinate(Var::X1))
    }

    /// `X2 = [X0, X1]`.
    pub fn x2(&self) -> VectorField {
        lie_bracket(&self.x0, &self.x1)
    }

    pub fn is_chart_form(&self) -> bool {
        self.x1.is_d1()
    }

    /// `det[X1 | X2]` as an expression.
    pub fn frame_determinant(&self) -> Expr {
        let x2 = self.x2();
        det_expr(&self.x1, &x2)
    }
}

fn det_expr(a: &VectorField, b: &VectorField) -> Expr {
    (a.f1.clone() * b.f2.clone() - a.f2.clone() * b.f1.clone()).simplify()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HypothesisCheck {
    /// (b): `X1(x0)` and `[X0, X1](x0)` are independent.
    pub hormander: bool,
    /// (a): `X0(x0) ∧ X1(x0) = 0`.
    pub parallel: bool,
    pub frame_det: f64,
    pub parallel_residual: f64,
}

impl HypothesisCheck {
    pub fn require(&self) -> Result<(), GeometryError> {
        if !self.parallel {
            return Err(GeometryError::NotParallel {
                residual: self.parallel_residual,
            });
        }
        if !self.hormander {
            return Err(GeometryError::NotBracketGenerating { det: self.frame_det });
        }
        Ok(())
    }
}

pub fn check_hypotheses(pair: &VectorFieldPair, x0: Vec2) -> Result<HypothesisCheck, GeometryError> {
    let v0 = pair.x0.eval(x0)?;
    let v1 = pair.x1.eval(x0)?;
    let v2 = pair.x2().eval(x0)?;
    let frame_det = det_cols(&v1, &v2);
    let hormander = v1.norm() > 0.0 && frame_det.abs() > HYPOTHESIS_TOL * v1.norm() * v2.norm();
    let scale = v0.norm() * v1.norm();
    let parallel_residual = if scale == 0.0 {
        0.0
    } else {
        det_cols(&v0, &v1).abs() / scale
    };
    Ok(HypothesisCheck {
        hormander,
        parallel: parallel_residual < HYPOTHESIS_TOL,
        frame_det,
        parallel_residual,
    })
}

/// `[X1, X2] = c12_1 X1 + c12_2 X2`, `[X0, X2] = c02_1 X1 + c02_2 X2`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureConstants {
    pub c12_1: Expr,
    pub c12_2: Expr,
    pub c02_1: Expr,
    pub c02_2: Expr,
}

/// Solves `V = a X1 + b X2` by Cramer's rule.
fn frame_coords(v: &VectorField, x1: &VectorField, x2: &VectorField, det: &Expr) -> (Expr, Expr) {
    let a = (det_expr(v, x2) / det.clone()).simplify();
    let b = (det_expr(x1, v) / det.clone()).simplify();
    (a, b)
}

pub fn structure_constants(pair: &VectorFieldPair) -> StructureConstants {
    let x2 = pair.x2();
    let det = det_expr(&pair.x1, &x2);
    let (c12_1, c12_2) = frame_coords(&lie_bracket(&pair.x1, &x2), &pair.x1, &x2, &det);
    let (c02_1, c02_2) = frame_coords(&lie_bracket(&pair.x0, &x2), &pair.x1, &x2, &det);
    StructureConstants {
        c12_1,
        c12_2,
        c02_1,
        c02_2,
    }
}

fn eval_frame(e: &Expr, p: Vec2) -> Result<f64, GeometryError> {
    match e.eval(at(p)) {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err(GeometryError::DegenerateFrame(p)),
        Err(ExprError::Domain { reason: "division by zero", .. }) => Err(GeometryError::DegenerateFrame(p)),
        Err(e) => Err(e.into()),
    }
}

/// `μ = rho dx1 ∧ dx2`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeDensity {
    pub rho: Expr,
}

impl VolumeDensity {
    pub fn lebesgue() -> Self {
        VolumeDensity { rho: Expr::Const(1.0) }
    }

    pub fn eval(&self, p: Vec2) -> Result<f64, GeometryError> {
        eval_frame(&self.rho, p)
    }
}

/// `rho = ±1 / det[X1 | X2]`, sign fixed so that `rho(x0) > 0`.
pub fn canonical_volume(pair: &VectorFieldPair, x0: Vec2) -> Result<VolumeDensity, GeometryError> {
    let det = pair.frame_determinant();
    let d0 = eval_frame(&det, x0)?;
    if d0 == 0.0 {
        return Err(GeometryError::DegenerateFrame(x0));
    }
    let sign = if d0 > 0.0 { 1.0 } else { -1.0 };
    Ok(VolumeDensity {
        rho: (Expr::Const(sign) / det).simplify(),
    })
}

/// `div_μ X = (1/rho) (∂1(rho X¹) + ∂2(rho X²))`.
pub fn divergence(x: &VectorField, mu: &VolumeDensity) -> Expr {
    let flux = (mu.rho.clone() * x.f1.clone()).diff(Var::X1) + (mu.rho.clone() * x.f2.clone()).diff(Var::X2);
    match mu.rho.as_const() {
        Some(c) if c == 1.0 => flux.simplify(),
        _ => (flux / mu.rho.clone()).simplify(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvatureInvariants {
    pub k1: f64,
    pub k2: f64,
}

/// `K1 = -(c12_2)² + 3 X1(c12_2)`, `K2 = 2 c12_2` at `x0`.
pub fn curvature_invariants(pair: &VectorFieldPair, x0: Vec2) -> Result<CurvatureInvariants, GeometryError> {
    let sc = structure_constants(pair);
    let c = eval_frame(&sc.c12_2, x0)?;
    let x1c = eval_frame(&pair.x1.apply(&sc.c12_2), x0)?;
    Ok(CurvatureInvariants {
        k1: -c * c + 3.0 * x1c,
        k2: 2.0 * c,
    })
}

/// `R22 = k_{11} h1² + k_1 h1 + k_2 h2 + k_0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct R22Coefficients {
    pub h1_squared: f64,
    pub h1: f64,
    pub h2: f64,
    pub constant: f64,
}

impl R22Coefficients {
    pub fn eval(&self, h1: f64, h2: f64) -> f64 {
        self.h1_squared * h1 * h1 + self.h1 * h1 + self.h2 * h2 + self.constant
    }
}

pub fn r22_coefficients(pair: &VectorFieldPair, x0: Vec2) -> Result<R22Coefficients, GeometryError> {
    let sc = structure_constants(pair);
    let ev = |e: &Expr| eval_frame(e, x0);
    let c12_1 = ev(&sc.c12_1)?;
    let c12_2 = ev(&sc.c12_2)?;
    let c02_1 = ev(&sc.c02_1)?;
    let c02_2 = ev(&sc.c02_2)?;
    let x0_c12_2 = ev(&pair.x0.apply(&sc.c12_2))?;
    let x1_c12_2 = ev(&pair.x1.apply(&sc.c12_2))?;
    let x0_c02_2 = ev(&pair.x0.apply(&sc.c02_2))?;
    let x1_c02_2 = ev(&pair.x1.apply(&sc.c02_2))?;
    Ok(R22Coefficients {
        h1_squared: -c12_2 * c12_2 + 3.0 * x1_c12_2,
        h1: -3.0 * c12_1 - 2.0 * c12_2 * c02_2 + 3.0 * x0_c12_2 + 3.0 * x1_c02_2,
        h2: 2.0 * c12_2,
        constant: -2.0 * c02_1 - c02_2 * c02_2 + 3.0 * x0_c02_2,
    })
}

pub fn r22(pair: &VectorFieldPair, x0: Vec2, h1: f64, h2: f64) -> Result<f64, GeometryError> {
    Ok(r22_coefficients(pair, x0)?.eval(h1, h2))
}

/// Terms of the intrinsic coefficient of `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricCoefficient {
    pub k1: f64,
    pub k2: f64,
    /// `div_μ(X0)(x0)`.
    pub div: f64,
    /// `X0(x0) = β X1(x0)`.
    pub beta: f64,
    pub coefficient: f64,
}

/// `-½ div_μ(X0) - ½ |X0|² + K1/14 - K2²/70` at `x0`, with `|X0(x0)| = |β|`.
pub fn coefficient_geometric(pair: &VectorFieldPair, x0: Vec2) -> Result<GeometricCoefficient, GeometryError> {
    check_hypotheses(pair, x0)?.require()?;
    let v0 = pair.x0.eval(x0)?;
    let v1 = pair.x1.eval(x0)?;
    let beta = v0.dot(&v1) / v1.dot(&v1);
    let mu = canonical_volume(pair, x0)?;
    let div = eval_frame(&divergence(&pair.x0, &mu), x0)?;
    let CurvatureInvariants { k1, k2 } = curvature_invariants(pair, x0)?;
    let coefficient = -0.5 * div - 0.5 * beta * beta + k1 / 14.0 - k2 * k2 / 70.0;
    Ok(GeometricCoefficient {
        k1,
        k2,
        div,
        beta,
        coefficient,
    })
}

/// Taylor coefficients of `X0 = α1 ∂1 + α2 ∂2` at `x0` for a pair in chart form.
pub fn taylor_data(pair: &VectorFieldPair, x0: Vec2) -> Result<TaylorData, GeometryError> {
    if !pair.is_chart_form() {
        return Err(GeometryError::NotChartForm);
    }
    let (a1, a2) = (&pair.x0.f1, &pair.x0.f2);
    let ev = |e: &Expr| -> Result<f64, GeometryError> { Ok(e.eval(at(x0))?) };
    Ok(TaylorData {
        alpha1_0: ev(a1)?,
        d1_alpha1_0: ev(&a1.diff(Var::X1))?,
        d2_alpha2_0: ev(&a2.diff(Var::X2))?,
        s: ev(&a2.diff(Var::X1))?,
        d11_alpha2_0: ev(&a2.diff_n(&[Var::X1, Var::X1]))?,
        d111_alpha2_0: ev(&a2.diff_n(&[Var::X1, Var::X1, Var::X1]))?,
    })
}

/// Chart-coordinate form of the coefficient, from Taylor data at `x0`.
pub fn coefficient_coordinate(pair: &VectorFieldPair, x0: Vec2) -> Result<f64, GeometryError> {
    let taylor = taylor_data(pair, x0)?;
    check_hypotheses(pair, x0)?.require()?;
    Ok(second_order_coefficient(&taylor)?)
}

/// `√12 / (2π t²) · (1 + t c)`, the two-term prediction for the μ-density.
pub fn full_asymptotics(pair: &VectorFieldPair, x0: Vec2, t: f64) -> Result<f64, GeometryError> {
    let c = coefficient_geometric(pair, x0)?.coefficient;
    Ok(12f64.sqrt() / (2.0 * PI * t * t) * (1.0 + t * c))
}

/// Canonical coordinates `(x, p)` on the cotangent bundle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CotangentState {
    pub x: Vec2,
    pub p: Vec2,
}

/// Compiled components and Jacobians of a pair, for repeated evaluation.
#[derive(Debug, Clone)]
pub struct HamiltonianSystem {
    x0: CompiledField,
    x1: CompiledField,
    // jac[k] = ∂_k X, as a field
    jac0: [CompiledField; 2],
    jac1: [CompiledField; 2],
}

fn jacobian(x: &VectorField) -> [CompiledField; 2] {
    [Var::X1, Var::X2].map(|v| VectorField::new(x.f1.diff(v), x.f2.diff(v)).compile())
}

fn dot(p: Vec2, (a, b): (f64, f64)) -> f64 {
    p.x1() * a + p.x2() * b
}

impl HamiltonianSystem {
    pub fn new(pair: &VectorFieldPair) -> Self {
        HamiltonianSystem {
            x0: pair.x0.compile(),
            x1: pair.x1.compile(),
            jac0: jacobian(&pair.x0),
            jac1: jacobian(&pair.x1),
        }
    }

    /// `H = <p, X0> + ½ <p, X1>²`.
    pub fn hamiltonian(&self, st: &CotangentState) -> f64 {
        let (a, b) = (st.x.x1(), st.x.x2());
        let h0 = dot(st.p, self.x0.eval(a, b));
        let h1 = dot(st.p, self.x1.eval(a, b));
        h0 + 0.5 * h1 * h1
    }

    /// `ẋ = X0 + h1 X1`, `ṗ_k = -(<p, ∂_k X0> + h1 <p, ∂_k X1>)`.
    pub fn vector_field(&self, st: &CotangentState) -> CotangentState {
        let (a, b) = (st.x.x1(), st.x.x2());
        let v0 = self.x0.eval(a, b);
        let v1 = self.x1.eval(a, b);
        let h1 = dot(st.p, v1);
        let dp = |k: usize| -(dot(st.p, self.jac0[k].eval(a, b)) + h1 * dot(st.p, self.jac1[k].eval(a, b)));
        CotangentState {
            x: Vec2::new(v0.0 + h1 * v1.0, v0.1 + h1 * v1.1),
            p: Vec2::new(dp(0), dp(1)),
        }
    }

    fn rk4_step(&self, st: &CotangentState, h: f64) -> CotangentState {
        let shift = |s: &CotangentState, k: &CotangentState, c: f64| CotangentState {
            x: s.x + k.x.scale(c),
            p: s.p + k.p.scale(c),
        };
        let k1 = self.vector_field(st);
        let k2 = self.vector_field(&shift(st, &k1, 0.5 * h));
        let k3 = self.vector_field(&shift(st, &k2, 0.5 * h));
        let k4 = self.vector_field(&shift(st, &k3, h));
        CotangentState {
            x: st.x + (k1.x + k2.x.scale(2.0) + k3.x.scale(2.0) + k4.x).scale(h / 6.0),
            p: st.p + (k1.p + k2.p.scale(2.0) + k3.p.scale(2.0) + k4.p).scale(h / 6.0),
        }
    }
}

/// Fixed-step RK4 for `λ̇ = H⃗(λ)`; returns `steps + 1` states.
pub fn extremal_flow(
    pair: &VectorFieldPair,
    initial: CotangentState,
    t_final: f64,
    steps: usize,
) -> Result<Vec<CotangentState>, GeometryError> {
    let sys = HamiltonianSystem::new(pair);
    let h = t_final / steps.max(1) as f64;
    let mut out = Vec::with_capacity(steps + 1);
    out.push(initial);
    let mut st = initial;
    for step in 1..=steps.max(1) {
        st = sys.rk4_step(&st, h);
        if !(st.x.is_finite() && st.p.is_finite()) {
            return Err(GeometryError::NonFinite { step });
        }
        out.push(st);
    }
    Ok(out)
}

/// `H = h0 + ½ h1²` at a state.
pub fn hamiltonian(pair: &VectorFieldPair, st: &CotangentState) -> f64 {
    HamiltonianSystem::new(pair).hamiltonian(st)
}

/// `{f, g} = Σ_k ∂_{p_k} f ∂_{x_k} g - ∂_{x_k} f ∂_{p_k} g` for the fibre-linear
/// `f = <p, X>`, `g = <p, Y>`, differentiated symbolically.
pub fn poisson_bracket(x: &VectorField, y: &VectorField, st: &CotangentState) -> Result<f64, GeometryError> {
    let p = st.p;
    let pt = at(st.x);
    let mut total = 0.0;
    for (k, v) in [Var::X1, Var::X2].into_iter().enumerate() {
        let dx_g = p.x1() * y.f1.diff(v).eval(pt)? + p.x2() * y.f2.diff(v).eval(pt)?;
        let dx_f = p.x1() * x.f1.diff(v).eval(pt)? + p.x2() * x.f2.diff(v).eval(pt)?;
        let dp_f = x.component(k).eval(pt)?;
        let dp_g = y.component(k).eval(pt)?;
        total += dp_f * dx_g - dx_f * dp_g;
    }
    Ok(total)
}

/// Residuals of `{h0,h1} = h2`, `{h1,h2} = c12_1 h1 + c12_2 h2`,
/// `{h0,h2} = c02_1 h1 + c02_2 h2`.
pub fn poisson_residuals(pair: &VectorFieldPair, st: &CotangentState) -> Result<(f64, f64, f64), GeometryError> {
    let x2 = pair.x2();
    let sc = structure_constants(pair);
    let h = |x: &VectorField| -> Result<f64, GeometryError> { Ok(st.p.dot(&x.eval(st.x)?)) };
    let (h1, h2) = (h(&pair.x1)?, h(&x2)?);
    let ev = |e: &Expr| eval_frame(e, st.x);
    let r1 = poisson_bracket(&pair.x0, &pair.x1, st)? - h2;
    let r2 = poisson_bracket(&pair.x1, &x2, st)? - (ev(&sc.c12_1)? * h1 + ev(&sc.c12_2)? * h2);
    let r3 = poisson_bracket(&pair.x0, &x2, st)? - (ev(&sc.c02_1)? * h1 + ev(&sc.c02_2)? * h2);
    Ok((r1, r2, r3))
}
