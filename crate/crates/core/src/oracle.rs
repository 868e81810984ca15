//! Independent numerical checks of the expansion: Euler–Maruyama paths of the
//! diffusion, kernel density estimation at the base point, a weighted fit of
//! the first-order coefficient, and an explicit finite-difference solver.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{CompiledExpr, Expr, ExprError, Func, Var};
use crate::gauss_algebra::{product, AlgebraError};
use crate::gaussian::{gramian_inverse, GaussianError, LQOperator};
use crate::geometry::{divergence, GeometryError, VectorField, VectorFieldPair, VolumeDensity};
use crate::linalg::{Mat2, Vec2};

pub const DEFAULT_BLOWUP_RADIUS: f64 = 1e6;
pub const DEFAULT_FRAME_FLOOR: f64 = 0.05;
/// Number of contiguous batches used for batch-means standard errors.
pub const BATCHES: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("path {path} left the ball of radius {radius:e} before t = {t}")]
    BlowUp { path: usize, t: f64, radius: f64 },
    #[error("sample is degenerate ({reason})")]
    DegenerateSample { reason: &'static str },
    #[error("coefficient fit is ill-conditioned: {0}")]
    IllConditionedFit(&'static str),
    #[error("time step {dt:e} exceeds the stability limit {limit:e}")]
    Unstable { dt: f64, limit: f64 },
    #[error("finite-difference grid is invalid: {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Kernel(#[from] GaussianError),
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BandwidthRepr", into = "BandwidthRepr")]
pub enum Bandwidth {
    /// `h = n^{-1/6}` in whitened coordinates.
    Auto,
    Fixed(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BandwidthRepr {
    Value(f64),
    Name(String),
}

impl TryFrom<BandwidthRepr> for Bandwidth {
    type Error = String;

    fn try_from(r: BandwidthRepr) -> Result<Self, String> {
        match r {
            BandwidthRepr::Value(h) => Ok(Bandwidth::Fixed(h)),
            BandwidthRepr::Name(s) if s == "auto" => Ok(Bandwidth::Auto),
            BandwidthRepr::Name(s) => Err(format!("bandwidth must be a number or \"auto\", got {s:?}")),
        }
    }
}

impl From<Bandwidth> for BandwidthRepr {
    fn from(b: Bandwidth) -> Self {
        match b {
            Bandwidth::Auto => BandwidthRepr::Name("auto".into()),
            Bandwidth::Fixed(h) => BandwidthRepr::Value(h),
        }
    }
}

fn default_radius() -> f64 {
    DEFAULT_BLOWUP_RADIUS
}

fn default_floor() -> f64 {
    DEFAULT_FRAME_FLOOR
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_paths: usize,
    pub dt: f64,
    pub t_grid: Vec<f64>,
    pub bandwidth: Bandwidth,
    pub seed: u64,
    #[serde(default = "default_radius")]
    pub blowup_radius: f64,
    /// Paths are stopped once `|det[X1 | X2]|` falls below this fraction of
    /// its value at the starting point.
    #[serde(default = "default_floor")]
    pub frame_floor: f64,
}

impl SimConfig {
    pub fn new(n_paths: usize, dt: f64, t_grid: Vec<f64>, seed: u64) -> Self {
        SimConfig {
            n_paths,
            dt,
            t_grid,
            bandwidth: Bandwidth::Auto,
            seed,
            blowup_radius: DEFAULT_BLOWUP_RADIUS,
            frame_floor: DEFAULT_FRAME_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        let bad = |m: String| Err(OracleError::InvalidConfig(m));
        if self.n_paths == 0 {
            return bad("n_paths must be at least 1".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.t_grid.is_empty() {
            return bad("t_grid is empty".into());
        }
        if !self.t_grid.iter().all(|t| *t > 0.0 && t.is_finite()) {
            return bad("t_grid entries must be positive".into());
        }
        if self.t_grid.windows(2).any(|w| w[1] <= w[0]) {
            return bad("t_grid must be strictly increasing".into());
        }
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return bad(format!("bandwidth must be positive, got {h}"));
            }
        }
        if !(self.blowup_radius > 0.0) {
            return bad("blowup_radius must be positive".into());
        }
        if !(0.0..1.0).contains(&self.frame_floor) {
            return bad("frame_floor must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// `Y0 = X0 + ½ div_μ(X1) X1`, the first-order part of the generator.
///
/// With `μ = dx / |D|`, `D = det[X1 | X2]`, the divergence is
/// `div_μ X1 = div X1 - X1(D) / D`.
pub fn generator_drift(pair: &VectorFieldPair) -> VectorField {
    let det = pair.frame_determinant();
    let mut div = divergence(&pair.x1, &VolumeDensity::lebesgue());
    let along = pair.x1.apply(&det);
    if along.as_const() != Some(0.0) {
        div = (div - along / det).simplify();
    }
    if div.as_const() == Some(0.0) {
        return pair.x0.simplify();
    }
    pair.x0.add(&pair.x1.scale(&(Expr::Const(0.5) * div)))
}

/// `½ (DX1) X1`.
pub fn stratonovich_correction(x1: &VectorField) -> VectorField {
    let comp = |f: &Expr| (Expr::Const(0.5) * x1.apply(f)).simplify();
    VectorField::new(comp(&x1.f1), comp(&x1.f2))
}

/// Itô drift of the simulated diffusion: `Y0 + ½ (DX1) X1`.
pub fn ito_drift(pair: &VectorFieldPair) -> VectorField {
    generator_drift(pair).add(&stratonovich_correction(&pair.x1))
}

/// Endpoints per observation time; stopped paths are recorded as NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct Endpoints {
    pub times: Vec<f64>,
    pub points: Vec<Vec<Vec2>>,
    /// Paths stopped at the frame floor before each time.
    pub stopped: Vec<usize>,
}

impl Endpoints {
    pub fn n_paths(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }
}

/// Worker count from `HYPOHEAT_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("HYPOHEAT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
}

/// Runs `f` on a pool honouring `HYPOHEAT_THREADS`.
pub fn with_pool<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    match thread_cap() {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        None => f(),
    }
}

struct PathKernel {
    drift: [CompiledExpr; 2],
    noise: [CompiledExpr; 2],
    noise_const: Option<(f64, f64)>,
    frame: Option<(CompiledExpr, f64)>,
    radius: f64,
}

impl PathKernel {
    fn new(pair: &VectorFieldPair, x0: Vec2, cfg: &SimConfig) -> Result<Self, OracleError> {
        let drift = ito_drift(pair);
        let noise = pair.x1.simplify();
        let noise_const = match (noise.f1.as_const(), noise.f2.as_const()) {
            (Some(a), Some(b)) => Some((a, b)),
            _ => None,
        };
        let det = pair.frame_determinant();
        let frame = if det.is_constant() || cfg.frame_floor == 0.0 {
            None
        } else {
            let d0 = det.eval((x0.x1(), x0.x2()))?.abs();
            Some((det.compile(), cfg.frame_floor * d0))
        };
        Ok(PathKernel {
            drift: [drift.f1.compile(), drift.f2.compile()],
            noise: [noise.f1.compile(), noise.f2.compile()],
            noise_const,
            frame,
            radius: cfg.blowup_radius,
        })
    }

    /// Fills `out[k]` with the state at `times[k]`; returns the index of the
    /// first time the path was stopped at.
    fn run(
        &self,
        rng: &mut ChaCha8Rng,
        x0: Vec2,
        times: &[f64],
        dt: f64,
        out: &mut [Vec2],
    ) -> Result<Option<usize>, f64> {
        let (mut a, mut b) = (x0.x1(), x0.x2());
        let mut now = 0.0;
        for (k, &t) in times.iter().enumerate() {
            let n = ((t - now) / dt).ceil().max(1.0) as usize;
            let h = (t - now) / n as f64;
            let sh = h.sqrt();
            for _ in 0..n {
                let z: f64 = StandardNormal.sample(rng);
                let (d1, d2) = (self.drift[0].eval(a, b), self.drift[1].eval(a, b));
                let (n1, n2) = match self.noise_const {
                    Some(c) => c,
                    None => (self.noise[0].eval(a, b), self.noise[1].eval(a, b)),
                };
                a += d1 * h + n1 * sh * z;
                b += d2 * h + n2 * sh * z;
                if !(a.is_finite() && b.is_finite()) || a.hypot(b) > self.radius {
                    return Err(t);
                }
                if let Some((det, floor)) = &self.frame {
                    if det.eval(a, b).abs() < *floor {
                        for slot in &mut out[k..] {
                            *slot = Vec2::new(f64::NAN, f64::NAN);
                        }
                        return Ok(Some(k));
                    }
                }
            }
            now = t;
            out[k] = Vec2::new(a, b);
        }
        Ok(None)
    }
}

/// Random stream of path `i`: ChaCha8 keyed by `seed`, stream number `i`.
pub fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// Euler–Maruyama on the Itô form, one independent stream per path.
pub fn simulate_endpoints(pair: &VectorFieldPair, x0: Vec2, cfg: &SimConfig) -> Result<Endpoints, OracleError> {
    cfg.validate()?;
    let kernel = PathKernel::new(pair, x0, cfg)?;
    let nt = cfg.t_grid.len();
    let mut flat = vec![Vec2::ZERO; cfg.n_paths * nt];
    let outcomes: Vec<Result<Option<usize>, (usize, f64)>> = with_pool(|| {
        flat.par_chunks_mut(nt)
            .enumerate()
            .map(|(i, out)| {
                let mut rng = path_rng(cfg.seed, i);
                kernel.run(&mut rng, x0, &cfg.t_grid, cfg.dt, out).map_err(|t| (i, t))
            })
            .collect()
    });
    let mut stopped = vec![0usize; nt];
    for o in &outcomes {
        match o {
            Err((path, t)) => {
                return Err(OracleError::BlowUp {
                    path: *path,
                    t: *t,
                    radius: cfg.blowup_radius,
                })
            }
            Ok(Some(k)) => stopped[*k..].iter_mut().for_each(|s| *s += 1),
            Ok(None) => {}
        }
    }
    let points = (0..nt)
        .map(|k| (0..cfg.n_paths).map(|i| flat[i * nt + k]).collect())
        .collect();
    Ok(Endpoints {
        times: cfg.t_grid.clone(),
        points,
        stopped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub value: f64,
    pub stderr: f64,
    /// Samples that contributed (paths not stopped).
    pub n_effective: usize,
}

fn sample_covariance(points: &[Vec2]) -> Option<(Vec2, Mat2, usize)> {
    let live = points.iter().filter(|p| p.is_finite());
    let (mut n, mut s1, mut s2) = (0usize, 0.0, 0.0);
    for p in live.clone() {
        n += 1;
        s1 += p.x1();
        s2 += p.x2();
    }
    if n < 2 {
        return None;
    }
    let mean = Vec2::new(s1 / n as f64, s2 / n as f64);
    let (mut c11, mut c12, mut c22) = (0.0, 0.0, 0.0);
    for p in live {
        let d = *p - mean;
        c11 += d.x1() * d.x1();
        c12 += d.x1() * d.x2();
        c22 += d.x2() * d.x2();
    }
    let m = (n - 1) as f64;
    Some((mean, Mat2::new(c11 / m, c12 / m, c12 / m, c22 / m), n))
}

/// Gaussian-kernel estimate of the Lebesgue density at `x0`.
///
/// The kernel covariance is `h² Σ̂`, with `Σ̂` the sample covariance of the
/// surviving endpoints, so the bandwidth is expressed in whitened units. The
/// estimate is the two-scale combination `2 p̂_h - p̂_{√2 h}`, which cancels
/// the `O(h²)` smoothing bias. Stopped paths count in the denominator: their
/// mass is lost.
pub fn estimate_density_lebesgue(points: &[Vec2], x0: Vec2, bandwidth: Bandwidth) -> Result<DensityEstimate, OracleError> {
    if points.is_empty() {
        return Err(OracleError::DegenerateSample { reason: "no endpoints" });
    }
    let (_, cov, live) = sample_covariance(points).ok_or(OracleError::DegenerateSample {
        reason: "fewer than two surviving endpoints",
    })?;
    let h = match bandwidth {
        Bandwidth::Auto => (live as f64).powf(-1.0 / 6.0),
        Bandwidth::Fixed(h) => h,
    };
    let kcov = cov.scale(h * h);
    let det = kcov.det();
    if !(det > 1e-300) || !(cov.get(0, 0) > 0.0) {
        return Err(OracleError::DegenerateSample { reason: "zero sample variance" });
    }
    let prec = kcov.inverse().ok_or(OracleError::DegenerateSample {
        reason: "singular sample covariance",
    })?;
    let norm = 1.0 / (2.0 * PI * det.sqrt());
    let n = points.len();
    let kernel_sum = |chunk: &[Vec2]| -> f64 {
        let (mut narrow, mut wide) = (0.0, 0.0);
        for p in chunk.iter().filter(|p| p.is_finite()) {
            let q = -0.5 * prec.quad_form(&(*p - x0));
            narrow += q.exp();
            wide += (0.5 * q).exp();
        }
        norm * (2.0 * narrow - 0.5 * wide)
    };
    let value = kernel_sum(points) / n as f64;
    let stderr = if n >= BATCHES {
        let size = n / BATCHES;
        let batch: Vec<f64> = (0..BATCHES)
            .map(|b| {
                let hi = if b + 1 == BATCHES { n } else { (b + 1) * size };
                let chunk = &points[b * size..hi];
                kernel_sum(chunk) / chunk.len() as f64
            })
            .collect();
        let mean = batch.iter().sum::<f64>() / BATCHES as f64;
        let var = batch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (BATCHES - 1) as f64;
        (var / BATCHES as f64).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(DensityEstimate {
        value,
        stderr,
        n_effective: live,
    })
}

/// Density with respect to the canonical volume `μ = dx / |det[X1 | X2]|`.
pub fn estimate_density(
    points: &[Vec2],
    x0: Vec2,
    pair: &VectorFieldPair,
    bandwidth: Bandwidth,
) -> Result<DensityEstimate, OracleError> {
    let leb = estimate_density_lebesgue(points, x0, bandwidth)?;
    let d = pair.frame_determinant().eval((x0.x1(), x0.x2()))?.abs();
    if d == 0.0 {
        return Err(GeometryError::DegenerateFrame(x0).into());
    }
    // p_μ = p_Leb / rho with rho = 1 / |det|
    Ok(DensityEstimate {
        value: leb.value * d,
        stderr: leb.stderr * d,
        n_effective: leb.n_effective,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientFit {
    pub c: f64,
    pub stderr: f64,
    pub r_squared: f64,
}

/// `r(t) = p_μ(t) · 2π t² / √12`, the ratio to the leading term.
pub fn leading_ratio(t: f64, density: f64) -> f64 {
    density * 2.0 * PI * t * t / 12f64.sqrt()
}

/// Weighted least squares of `r(t) - 1 = c t`, weights `1/stderr²`.
/// If any standard error is zero or missing the fit is unweighted and the
/// standard error comes from the residuals.
pub fn fit_coefficient(times: &[f64], estimates: &[DensityEstimate]) -> Result<CoefficientFit, OracleError> {
    if times.len() != estimates.len() {
        return Err(OracleError::IllConditionedFit("times and estimates differ in length"));
    }
    if times.len() < 3 {
        return Err(OracleError::IllConditionedFit("at least three observation times are needed"));
    }
    if times.iter().all(|t| *t == times[0]) {
        return Err(OracleError::IllConditionedFit("all observation times are equal"));
    }
    let y: Vec<f64> = times.iter().zip(estimates).map(|(t, e)| leading_ratio(*t, e.value) - 1.0).collect();
    let sd: Vec<f64> = times.iter().zip(estimates).map(|(t, e)| leading_ratio(*t, e.stderr)).collect();
    let weighted = sd.iter().all(|s| *s > 0.0 && s.is_finite());
    let w: Vec<f64> = if weighted {
        sd.iter().map(|s| 1.0 / (s * s)).collect()
    } else {
        vec![1.0; times.len()]
    };
    let stt: f64 = w.iter().zip(times).map(|(w, t)| w * t * t).sum();
    let sty: f64 = w.iter().zip(times).zip(&y).map(|((w, t), y)| w * t * y).sum();
    let c = sty / stt;
    let ss_res: f64 = w.iter().zip(times).zip(&y).map(|((w, t), y)| w * (y - c * t).powi(2)).sum();
    let wsum: f64 = w.iter().sum();
    let ybar = w.iter().zip(&y).map(|(w, y)| w * y).sum::<f64>() / wsum;
    let ss_tot: f64 = w.iter().zip(&y).map(|(w, y)| w * (y - ybar).powi(2)).sum();
    let stderr = if weighted {
        (1.0 / stt).sqrt()
    } else {
        (ss_res / (times.len() - 1) as f64 / stt).sqrt()
    };
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(CoefficientFit { c, stderr, r_squared })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FDGrid {
    /// `(x1min, x1max, x2min, x2max)`.
    pub bounds: [f64; 4],
    pub nx1: usize,
    pub nx2: usize,
    pub dt: f64,
}

impl FDGrid {
    pub fn spacing(&self) -> (f64, f64) {
        let [a, b, c, d] = self.bounds;
        ((b - a) / (self.nx1 - 1) as f64, (d - c) / (self.nx2 - 1) as f64)
    }

    pub fn validate(&self, x0: Vec2) -> Result<(), OracleError> {
        let [a, b, c, d] = self.bounds;
        if self.nx1 < 5 || self.nx2 < 5 {
            return Err(OracleError::InvalidGrid("need at least 5 nodes per axis".into()));
        }
        if !(a < b && c < d) {
            return Err(OracleError::InvalidGrid("bounds must be increasing".into()));
        }
        let (h1, h2) = self.spacing();
        if !(x0.x1() > a + 2.0 * h1 && x0.x1() < b - 2.0 * h1 && x0.x2() > c + 2.0 * h2 && x0.x2() < d - 2.0 * h2) {
            return Err(OracleError::InvalidGrid("base point too close to the boundary".into()));
        }
        if !(self.dt > 0.0) {
            return Err(OracleError::InvalidGrid("dt must be positive".into()));
        }
        Ok(())
    }

    fn nodes(&self) -> (Vec<f64>, Vec<f64>) {
        let (h1, h2) = self.spacing();
        let xs = (0..self.nx1).map(|i| self.bounds[0] + i as f64 * h1).collect();
        let ys = (0..self.nx2).map(|j| self.bounds[2] + j as f64 * h2).collect();
        (xs, ys)
    }
}

/// Largest monotone step for the explicit scheme,
/// `dt (1/h1² + max|b1|/h1 + max|b2|/h2) ≤ 1`, over the non-absorbing nodes.
pub fn stability_limit(pair: &VectorFieldPair, x0: Vec2, grid: &FDGrid) -> Result<f64, OracleError> {
    let drift = fd_drift(pair, x0, grid)?;
    Ok(stability_from(&drift, grid))
}

fn stability_from(drift: &[Option<(f64, f64)>], grid: &FDGrid) -> f64 {
    let (h1, h2) = grid.spacing();
    let (m1, m2) = drift
        .iter()
        .flatten()
        .fold((0.0f64, 0.0f64), |(m1, m2), (b1, b2)| (m1.max(b1.abs()), m2.max(b2.abs())));
    1.0 / (1.0 / (h1 * h1) + m1 / h1 + m2 / h2)
}

// `None` marks nodes where |det[X1 | X2]| is below the frame floor; they are
// held at zero, like the stopped paths of the simulation.
fn fd_drift(pair: &VectorFieldPair, x0: Vec2, grid: &FDGrid) -> Result<Vec<Option<(f64, f64)>>, OracleError> {
    if !pair.is_chart_form() {
        return Err(GeometryError::NotChartForm.into());
    }
    let y0 = generator_drift(pair).compile();
    let det = pair.frame_determinant();
    let floor = if det.is_constant() {
        None
    } else {
        Some((det.compile(), DEFAULT_FRAME_FLOOR * det.eval((x0.x1(), x0.x2()))?.abs()))
    };
    let (xs, ys) = grid.nodes();
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &x in &xs {
        for &y in &ys {
            if let Some((d, f)) = &floor {
                if !(d.eval(x, y).abs() >= *f) {
                    out.push(None);
                    continue;
                }
            }
            let (b1, b2) = y0.eval(x, y);
            if !(b1.is_finite() && b2.is_finite()) {
                return Err(GeometryError::DegenerateFrame(Vec2::new(x, y)).into());
            }
            out.push(Some((b1, b2)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdOutcome {
    /// `u(T, x0)`, bilinearly interpolated.
    pub value: f64,
    /// `max|u|` on the outer two node rings over `max|u|`.
    pub boundary_ratio: f64,
    /// Set when `boundary_ratio > 1e-6`.
    pub boundary_warning: bool,
    pub steps: usize,
}

/// Explicit scheme for `∂_t u = Y0·∇u + ½ ∂1² u` (chart form, `X1 = ∂1`),
/// upwind drift, centred diffusion, zero Dirichlet data on the boundary and
/// wherever the frame degenerates.
pub fn fd_evolve(pair: &VectorFieldPair, phi: &Expr, x0: Vec2, t_final: f64, grid: &FDGrid) -> Result<FdOutcome, OracleError> {
    grid.validate(x0)?;
    if !(t_final >= 0.0) {
        return Err(OracleError::InvalidGrid(format!("final time must be non-negative, got {t_final}")));
    }
    let drift = fd_drift(pair, x0, grid)?;
    let limit = stability_from(&drift, grid);
    if grid.dt > limit {
        return Err(OracleError::Unstable { dt: grid.dt, limit });
    }
    let (nx, ny) = (grid.nx1, grid.nx2);
    let (h1, h2) = grid.spacing();
    let (xs, ys) = grid.nodes();
    let phi_c = phi.compile();
    let mut u = vec![0.0; nx * ny];
    for i in 1..nx - 1 {
        for j in 1..ny - 1 {
            let v = phi_c.eval(xs[i], ys[j]);
            if !v.is_finite() {
                return Err(ExprError::Domain {
                    node: phi.to_string(),
                    reason: "non-finite initial value",
                }
                .into());
            }
            if drift[i * ny + j].is_some() {
                u[i * ny + j] = v;
            }
        }
    }
    let steps = if t_final == 0.0 { 0 } else { (t_final / grid.dt).ceil() as usize };
    let dt = if steps == 0 { 0.0 } else { t_final / steps as f64 };
    let (ih1, ih2, idiff) = (1.0 / h1, 1.0 / h2, 0.5 / (h1 * h1));
    let mut next = u.clone();
    for _ in 0..steps {
        next.par_chunks_mut(ny).enumerate().for_each(|(i, row)| {
            if i == 0 || i == nx - 1 {
                return;
            }
            for j in 1..ny - 1 {
                let k = i * ny + j;
                let c = u[k];
                let Some((b1, b2)) = drift[k] else { continue };
                let d1 = if b1 > 0.0 { u[k + ny] - c } else { c - u[k - ny] } * ih1;
                let d2 = if b2 > 0.0 { u[k + 1] - c } else { c - u[k - 1] } * ih2;
                let lap = (u[k + ny] - 2.0 * c + u[k - ny]) * idiff;
                row[j] = c + dt * (b1 * d1 + b2 * d2 + lap);
            }
        });
        std::mem::swap(&mut u, &mut next);
    }
    let umax = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut ring = 0.0f64;
    for i in 0..nx {
        for j in 0..ny {
            if i < 2 || j < 2 || i + 2 >= nx || j + 2 >= ny {
                ring = ring.max(u[i * ny + j].abs());
            }
        }
    }
    let boundary_ratio = if umax > 0.0 { ring / umax } else { 0.0 };
    let fx = (x0.x1() - grid.bounds[0]) / h1;
    let fy = (x0.x2() - grid.bounds[2]) / h2;
    let (i, j) = (fx.floor() as usize, fy.floor() as usize);
    let (a, b) = (fx - i as f64, fy - j as f64);
    let at = |i: usize, j: usize| u[i * ny + j];
    let value = (1.0 - a) * (1.0 - b) * at(i, j) + a * (1.0 - b) * at(i + 1, j) + (1.0 - a) * b * at(i, j + 1) + a * b * at(i + 1, j + 1);
    Ok(FdOutcome {
        value,
        boundary_ratio,
        boundary_warning: boundary_ratio > 1e-6,
        steps,
    })
}

/// `exp(-|y - c|² / (2σ²))` as an expression.
pub fn gaussian_bump(center: Vec2, sigma: f64) -> Expr {
    let d1 = Expr::x1() - Expr::Const(center.x1());
    let d2 = Expr::x2() - Expr::Const(center.x2());
    let q = (d1.powi(2) + d2.powi(2)) / Expr::Const(2.0 * sigma * sigma);
    Expr::apply(Func::Exp, -q).simplify()
}

/// `∫ q0(t, x, y) exp(-|y - c|² / (2σ²)) dy` by completing the square.
pub fn bump_convolution(op: &LQOperator, t: f64, x: Vec2, center: Vec2, sigma: f64) -> Result<f64, OracleError> {
    let g = op.g(t);
    let prec = gramian_inverse(&g, t)?;
    let bump_prec = Mat2::diag(1.0 / (sigma * sigma), 1.0 / (sigma * sigma));
    let prod = product(op.exp(t).mul_vec(&x), prec, center, bump_prec)?;
    // the bump is 2πσ² times a normalized density
    Ok(2.0 * PI * sigma * sigma * prod.log_const.exp())
}

/// Bump width as a fraction of the kernel spread for [`fd_coefficient`].
pub const FD_BUMP_WIDTH: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdCoefficient {
    pub fit: CoefficientFit,
    pub times: Vec<f64>,
    /// Extrapolated `r(t)` per time.
    pub ratios: Vec<f64>,
    pub boundary_warning: bool,
}

/// Linear part of a chart-form pair at `x0`: `X0 = S (x1 - x0_1) ∂2`, `X1 = ∂1`.
pub fn nilpotent_model(pair: &VectorFieldPair, x0: Vec2) -> Result<(VectorFieldPair, f64), OracleError> {
    if !pair.is_chart_form() {
        return Err(GeometryError::NotChartForm.into());
    }
    let s = pair.x0.f2.diff(Var::X1).eval((x0.x1(), x0.x2()))?;
    let drift = Expr::Const(s) * (Expr::x1() - Expr::Const(x0.x1()));
    Ok((VectorFieldPair::chart(Expr::Const(0.0), drift.simplify()), s))
}

// unweighted least squares of r - 1 = c t + d t²
fn fit_linear_quadratic(times: &[f64], ratios: &[f64]) -> Result<CoefficientFit, OracleError> {
    let mut m = [[0.0; 2]; 2];
    let mut v = [0.0; 2];
    for (t, r) in times.iter().zip(ratios) {
        let row = [*t, t * t];
        for i in 0..2 {
            v[i] += row[i] * (r - 1.0);
            for j in 0..2 {
                m[i][j] += row[i] * row[j];
            }
        }
    }
    let normal = Mat2::new(m[0][0], m[0][1], m[1][0], m[1][1]);
    let inv = normal
        .inverse()
        .filter(|_| normal.det() > 1e-14 * m[0][0] * m[1][1])
        .ok_or(OracleError::IllConditionedFit("observation times do not separate t and t²"))?;
    let coef = inv.mul_vec(&Vec2::new(v[0], v[1]));
    let (c, d) = (coef.x1(), coef.x2());
    let ss_res: f64 = times.iter().zip(ratios).map(|(t, r)| (r - 1.0 - c * t - d * t * t).powi(2)).sum();
    let mean = ratios.iter().map(|r| r - 1.0).sum::<f64>() / ratios.len() as f64;
    let ss_tot: f64 = ratios.iter().map(|r| (r - 1.0 - mean).powi(2)).sum();
    let dof = times.len().saturating_sub(2).max(1) as f64;
    Ok(CoefficientFit {
        c,
        stderr: (ss_res / dof * inv.get(0, 0)).sqrt(),
        r_squared: if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 },
    })
}

fn fd_ratio(pair: &VectorFieldPair, model: &VectorFieldPair, x0: Vec2, s: f64, t: f64, n: (usize, usize)) -> Result<(f64, bool), OracleError> {
    let (w1, w2) = (t.sqrt(), s.abs() * t.powf(1.5) / 3f64.sqrt());
    let mut grid = FDGrid {
        bounds: [x0.x1() - 8.0 * w1, x0.x1() + 8.0 * w1, x0.x2() - 12.0 * w2, x0.x2() + 12.0 * w2],
        nx1: n.0,
        nx2: n.1,
        dt: 1.0,
    };
    grid.dt = stability_limit(pair, x0, &grid)?.min(stability_limit(model, x0, &grid)?);
    let mut r = [0.0; 2];
    let mut warn = false;
    for (k, kappa) in [FD_BUMP_WIDTH, FD_BUMP_WIDTH * 2f64.sqrt()].into_iter().enumerate() {
        let d1 = (Expr::x1() - Expr::Const(x0.x1())) / Expr::Const(kappa * w1);
        let d2 = (Expr::x2() - Expr::Const(x0.x2())) / Expr::Const(kappa * w2);
        let phi = Expr::apply(Func::Exp, Expr::Const(-0.5) * (d1.powi(2) + d2.powi(2))).simplify();
        let full = fd_evolve(pair, &phi, x0, t, &grid)?;
        let lin = fd_evolve(model, &phi, x0, t, &grid)?;
        warn |= full.boundary_warning || lin.boundary_warning;
        r[k] = full.value / lin.value;
    }
    Ok((2.0 * r[0] - r[1], warn))
}

/// First-order coefficient from finite differences.
///
/// For each `t`, an anisotropic bump of width `κ` times the kernel spread is
/// evolved for the pair and for its [`nilpotent_model`] on the same grid,
/// dilated by `(√t, t^{3/2})`. The ratio of the two values estimates `r(t)`;
/// widths `κ` and `√2 κ` are combined to cancel the `O(κ²)` smoothing bias,
/// and spacings `h` and `2h` to cancel the first-order scheme error. The
/// values carry no sampling noise, so `r - 1 = c t + d t²` is fitted and `c`
/// reported.
pub fn fd_coefficient(pair: &VectorFieldPair, x0: Vec2, times: &[f64], nodes: (usize, usize)) -> Result<FdCoefficient, OracleError> {
    let (model, s) = nilpotent_model(pair, x0)?;
    if s == 0.0 {
        return Err(GeometryError::NotBracketGenerating { det: 0.0 }.into());
    }
    // spacings h and 2h on the same box
    let fine = (2 * (nodes.0.max(9) / 2) + 1, 2 * (nodes.1.max(9) / 2) + 1);
    let coarse = ((fine.0 + 1) / 2, (fine.1 + 1) / 2);
    let mut ratios = Vec::with_capacity(times.len());
    let mut boundary_warning = false;
    for &t in times {
        let mut per_grid = [0.0; 2];
        for (g, n) in [fine, coarse].into_iter().enumerate() {
            let (r, warn) = fd_ratio(pair, &model, x0, s, t, n)?;
            per_grid[g] = r;
            boundary_warning |= warn;
        }
        ratios.push(2.0 * per_grid[0] - per_grid[1]);
    }
    let fit = if times.len() >= 3 {
        fit_linear_quadratic(times, &ratios)?
    } else {
        return Err(OracleError::IllConditionedFit("at least three observation times are needed"));
    };
    Ok(FdCoefficient {
        fit,
        times: times.to_vec(),
        ratios,
        boundary_warning,
    })
}
