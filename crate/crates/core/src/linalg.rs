//! Fixed-size 2×2 linear algebra.
//!
//! Everything in this crate lives in the plane, so a pair of tiny `Copy`
//! types is all we need. Matrices are stored row-major.

use std::ops::{Add, Index, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2(pub [f64; 2]);

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Mat2(pub [[f64; 2]; 2]);

impl Vec2 {
    pub const ZERO: Vec2 = Vec2([0.0, 0.0]);

    pub fn new(x1: f64, x2: f64) -> Self {
        Vec2([x1, x2])
    }

    pub fn x1(&self) -> f64 {
        self.0[0]
    }

    pub fn x2(&self) -> f64 {
        self.0[1]
    }

    pub fn dot(&self, other: &Vec2) -> f64 {
        self.0[0] * other.0[0] + self.0[1] * other.0[1]
    }

    pub fn norm(&self) -> f64 {
        self.0[0].hypot(self.0[1])
    }

    pub fn scale(&self, k: f64) -> Vec2 {
        Vec2([k * self.0[0], k * self.0[1]])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Outer product `self · other*`.
    pub fn outer(&self, other: &Vec2) -> Mat2 {
        Mat2([
            [self.0[0] * other.0[0], self.0[0] * other.0[1]],
            [self.0[1] * other.0[0], self.0[1] * other.0[1]],
        ])
    }
}

impl Index<usize> for Vec2 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2([self.0[0] + o.0[0], self.0[1] + o.0[1]])
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2([self.0[0] - o.0[0], self.0[1] - o.0[1]])
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2([-self.0[0], -self.0[1]])
    }
}

/// Determinant of the matrix with columns `a` and `b`.
pub fn det_cols(a: &Vec2, b: &Vec2) -> f64 {
    a.0[0] * b.0[1] - a.0[1] * b.0[0]
}

impl Mat2 {
    pub const ZERO: Mat2 = Mat2([[0.0, 0.0], [0.0, 0.0]]);
    pub const IDENTITY: Mat2 = Mat2([[1.0, 0.0], [0.0, 1.0]]);

    pub fn new(a11: f64, a12: f64, a21: f64, a22: f64) -> Self {
        Mat2([[a11, a12], [a21, a22]])
    }

    pub fn diag(d1: f64, d2: f64) -> Self {
        Mat2([[d1, 0.0], [0.0, d2]])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[i][j]
    }

    pub fn transpose(&self) -> Mat2 {
        let m = &self.0;
        Mat2([[m[0][0], m[1][0]], [m[0][1], m[1][1]]])
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn trace(&self) -> f64 {
        self.0[0][0] + self.0[1][1]
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&self, k: f64) -> Mat2 {
        let m = &self.0;
        Mat2([[k * m[0][0], k * m[0][1]], [k * m[1][0], k * m[1][1]]])
    }

    /// Inverse by the adjugate formula; `None` when the determinant is zero
    /// or not finite.
    pub fn inverse(&self) -> Option<Mat2> {
        let d = self.det();
        if d == 0.0 || !d.is_finite() {
            return None;
        }
        let m = &self.0;
        Some(Mat2([[m[1][1] / d, -m[0][1] / d], [-m[1][0] / d, m[0][0] / d]]))
    }

    pub fn mul_vec(&self, v: &Vec2) -> Vec2 {
        let m = &self.0;
        Vec2([
            m[0][0] * v.0[0] + m[0][1] * v.0[1],
            m[1][0] * v.0[0] + m[1][1] * v.0[1],
        ])
    }

    /// `v* M v`.
    pub fn quad_form(&self, v: &Vec2) -> f64 {
        v.dot(&self.mul_vec(v))
    }

    pub fn column(&self, j: usize) -> Vec2 {
        Vec2([self.0[0][j], self.0[1][j]])
    }

    pub fn row(&self, i: usize) -> Vec2 {
        Vec2(self.0[i])
    }

    /// `(M + M*)/2`.
    pub fn symmetrized(&self) -> Mat2 {
        let off = 0.5 * (self.0[0][1] + self.0[1][0]);
        Mat2([[self.0[0][0], off], [off, self.0[1][1]]])
    }

    /// `|m12 - m21| / ‖M‖`, zero for the zero matrix.
    pub fn asymmetry(&self) -> f64 {
        let n = self.norm();
        if n == 0.0 {
            0.0
        } else {
            (self.0[0][1] - self.0[1][0]).abs() / n
        }
    }

    /// Eigenvalues of a symmetric matrix, ascending.
    pub fn sym_eigenvalues(&self) -> (f64, f64) {
        let a = self.0[0][0];
        let d = self.0[1][1];
        let b = 0.5 * (self.0[0][1] + self.0[1][0]);
        let mean = 0.5 * (a + d);
        let rad = (0.5 * (a - d)).hypot(b);
        // smaller root through the product to avoid cancellation
        let big = if mean >= 0.0 { mean + rad } else { mean - rad };
        let det = a * d - b * b;
        let small = if big != 0.0 { det / big } else { 0.0 };
        if big >= small {
            (small, big)
        } else {
            (big, small)
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

impl Index<(usize, usize)> for Mat2 {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.0[i][j]
    }
}

impl Add for Mat2 {
    type Output = Mat2;
    fn add(self, o: Mat2) -> Mat2 {
        let (a, b) = (&self.0, &o.0);
        Mat2([
            [a[0][0] + b[0][0], a[0][1] + b[0][1]],
            [a[1][0] + b[1][0], a[1][1] + b[1][1]],
        ])
    }
}

impl Sub for Mat2 {
    type Output = Mat2;
    fn sub(self, o: Mat2) -> Mat2 {
        self + o.scale(-1.0)
    }
}

impl Neg for Mat2 {
    type Output = Mat2;
    fn neg(self) -> Mat2 {
        self.scale(-1.0)
    }
}

impl Mul for Mat2 {
    type Output = Mat2;
    fn mul(self, o: Mat2) -> Mat2 {
        let (a, b) = (&self.0, &o.0);
        let mut out = [[0.0; 2]; 2];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        Mat2(out)
    }
}

impl Mul<Vec2> for Mat2 {
    type Output = Vec2;
    fn mul(self, v: Vec2) -> Vec2 {
        self.mul_vec(&v)
    }
}
