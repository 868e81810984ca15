//! Globally adaptive Gauss–Kronrod (10/21) quadrature on intervals and on the
//! triangle `{s ≥ 0, r ≥ 0, s + r ≤ 1}`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

const XGK: [f64; 11] = [
    0.995_657_163_025_808_080_735_527_280_689_003,
    0.973_906_528_517_171_720_077_964_012_084_452,
    0.930_157_491_355_708_226_001_207_180_059_508,
    0.865_063_366_688_984_510_732_096_688_423_493,
    0.780_817_726_586_416_897_063_717_578_345_042,
    0.679_409_568_299_024_406_234_327_365_114_874,
    0.562_757_134_668_604_683_339_000_099_272_694,
    0.433_395_394_129_247_190_799_265_943_165_784,
    0.294_392_862_701_460_198_131_126_603_103_866,
    0.148_874_338_981_631_210_884_826_001_129_720,
    0.0,
];

const WGK: [f64; 11] = [
    0.011_694_638_867_371_874_278_064_396_062_192,
    0.032_558_162_307_964_727_478_818_972_459_390,
    0.054_755_896_574_351_996_031_381_300_244_580,
    0.075_039_674_810_919_952_767_043_140_916_190,
    0.093_125_454_583_697_605_535_065_465_083_366,
    0.109_387_158_802_297_641_899_210_590_325_805,
    0.123_491_976_262_065_851_077_958_109_831_074,
    0.134_709_217_311_473_325_928_054_001_771_707,
    0.142_775_938_577_060_080_797_094_273_138_717,
    0.147_739_104_901_338_491_374_841_515_972_068,
    0.149_445_554_002_916_905_664_936_468_389_821,
];

// weights of the embedded 10-point Gauss rule on XGK[1], XGK[3], ..., XGK[9]
const WG: [f64; 5] = [
    0.066_671_344_308_688_137_593_568_809_893_332,
    0.149_451_349_150_580_593_145_776_339_657_697,
    0.219_086_362_515_982_043_995_534_934_228_163,
    0.269_266_719_309_996_355_091_226_921_569_469,
    0.295_524_224_714_752_870_173_892_994_651_338,
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuadratureError {
    #[error("quadrature did not converge: estimate {value}, achieved error {error:e} > tolerance {tolerance:e}")]
    NoConvergence { value: f64, error: f64, tolerance: f64 },
    #[error("integrand is not finite at {at}")]
    NonFinite { at: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub abs: f64,
    pub rel: f64,
    pub max_intervals: usize,
}

impl Tolerance {
    pub fn absolute(abs: f64) -> Self {
        Tolerance {
            abs,
            rel: 0.0,
            max_intervals: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, Copy)]
struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Panel {}

impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Panel {
    // largest error first; ties broken by position for a deterministic order
    fn cmp(&self, other: &Self) -> Ordering {
        self.error
            .total_cmp(&other.error)
            .then_with(|| other.a.total_cmp(&self.a))
    }
}

fn gk21(f: &mut impl FnMut(f64) -> f64, a: f64, b: f64) -> Result<Panel, QuadratureError> {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    if !fc.is_finite() {
        return Err(QuadratureError::NonFinite { at: center });
    }
    let mut kronrod = WGK[10] * fc;
    let mut gauss = 0.0;
    for k in 0..10 {
        let dx = half * XGK[k];
        let (x1, x2) = (center - dx, center + dx);
        let (f1, f2) = (f(x1), f(x2));
        if !f1.is_finite() {
            return Err(QuadratureError::NonFinite { at: x1 });
        }
        if !f2.is_finite() {
            return Err(QuadratureError::NonFinite { at: x2 });
        }
        kronrod += WGK[k] * (f1 + f2);
        if k % 2 == 1 {
            gauss += WG[k / 2] * (f1 + f2);
        }
    }
    let value = kronrod * half;
    let error = ((kronrod - gauss) * half).abs();
    Ok(Panel { a, b, value, error })
}

/// `∫_a^b f` to `max(tol.abs, tol.rel·|I|)`.
pub fn integrate(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, tol: Tolerance) -> Result<Estimate, QuadratureError> {
    let mut heap = BinaryHeap::new();
    let first = gk21(&mut f, a, b)?;
    let mut value = first.value;
    let mut error = first.error;
    let mut evaluations = 21;
    heap.push(first);
    let target = |v: f64| tol.abs.max(tol.rel * v.abs());
    while error > target(value) && heap.len() < tol.max_intervals {
        let worst = heap.pop().expect("heap is never empty");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            heap.push(worst);
            break;
        }
        let left = gk21(&mut f, worst.a, mid)?;
        let right = gk21(&mut f, mid, worst.b)?;
        evaluations += 42;
        value += left.value + right.value - worst.value;
        error += left.error + right.error - worst.error;
        heap.push(left);
        heap.push(right);
    }
    // re-sum in positional order so the result does not depend on drift
    // accumulated in the running totals
    let mut panels = heap.into_vec();
    panels.sort_by(|p, q| p.a.total_cmp(&q.a));
    let value: f64 = panels.iter().map(|p| p.value).sum();
    let error: f64 = panels.iter().map(|p| p.error).sum();
    if error > target(value) {
        return Err(QuadratureError::NoConvergence {
            value,
            error,
            tolerance: target(value),
        });
    }
    Ok(Estimate {
        value,
        error,
        evaluations,
    })
}

/// `∫∫_{s+r≤1} f(s, r) dr ds` through the collapsed map `r = (1 - s) v`,
/// integrated as nested one-dimensional rules.
pub fn integrate_simplex(
    mut f: impl FnMut(f64, f64) -> f64,
    outer: Tolerance,
    inner: Tolerance,
) -> Result<Estimate, QuadratureError> {
    let mut evaluations = 0usize;
    let mut inner_error = 0.0f64;
    let mut failure = None;
    let est = integrate(
        |s| {
            if failure.is_some() {
                return 0.0;
            }
            let width = 1.0 - s;
            match integrate(|v| f(s, width * v) * width, 0.0, 1.0, inner) {
                Ok(e) => {
                    evaluations += e.evaluations;
                    inner_error = inner_error.max(e.error);
                    e.value
                }
                Err(e) => {
                    failure = Some(e);
                    0.0
                }
            }
        },
        0.0,
        1.0,
        outer,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let est = est?;
    Ok(Estimate {
        value: est.value,
        error: est.error + inner_error,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kronrod_exact_for_degree_30() {
        let p = gk21(&mut |x: f64| x.powi(30), 0.0, 1.0).unwrap();
        assert!((p.value - 1.0 / 31.0).abs() < 1e-15);
        // the embedded Gauss rule is exact only to degree 19
        let g = gk21(&mut |x: f64| x.powi(18), -1.0, 1.0).unwrap();
        assert!(g.error < 1e-15);
    }

    #[test]
    fn gauss_weights_sum_to_two() {
        let g: f64 = 2.0 * WG.iter().sum::<f64>();
        let k: f64 = 2.0 * WGK[..10].iter().sum::<f64>() + WGK[10];
        assert!((g - 2.0).abs() < 1e-15);
        assert!((k - 2.0).abs() < 1e-15);
    }

    #[test]
    fn endpoint_singularity() {
        let e = integrate(|x| 1.0 / x.sqrt(), 0.0, 1.0, Tolerance::absolute(1e-10)).unwrap();
        assert!((e.value - 2.0).abs() < 1e-9);
        let e = integrate(|x| x.ln(), 0.0, 1.0, Tolerance::absolute(1e-10)).unwrap();
        assert!((e.value + 1.0).abs() < 1e-9);
    }

    #[test]
    fn simplex_monomials() {
        // ∫∫ s^2 r over the triangle = 2! 1! / 5! = 1/60
        let e = integrate_simplex(|s, r| s * s * r, Tolerance::absolute(1e-13), Tolerance::absolute(1e-14)).unwrap();
        assert!((e.value - 1.0 / 60.0).abs() < 1e-14);
    }

    #[test]
    fn reports_non_convergence() {
        let tol = Tolerance {
            abs: 1e-14,
            rel: 0.0,
            max_intervals: 3,
        };
        assert!(matches!(
            integrate(|x| (1.0 / x).sin(), 0.0, 1.0, tol),
            Err(QuadratureError::NoConvergence { .. })
        ));
    }
}
