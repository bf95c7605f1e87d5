//! Small dense 2×2 linear algebra used throughout the mesh and metric code.
//!
//! Everything here is closed form; no iterative decompositions.

use std::ops::{Add, Mul, Sub};

pub type Vec2 = [f64; 2];

#[inline]
pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn norm(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

#[inline]
pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
pub fn scale(a: Vec2, s: f64) -> Vec2 {
    [a[0] * s, a[1] * s]
}

/// z-component of the cross product.
#[inline]
pub fn cross(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Signed area of the triangle (a, b, c); positive for counter-clockwise order.
#[inline]
pub fn signed_area(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    0.5 * cross(sub(b, a), sub(c, a))
}

/// General 2×2 matrix, row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat2(pub [[f64; 2]; 2]);

impl Mat2 {
    pub const IDENTITY: Mat2 = Mat2([[1.0, 0.0], [0.0, 1.0]]);

    pub fn from_cols(c0: Vec2, c1: Vec2) -> Self {
        Mat2([[c0[0], c1[0]], [c0[1], c1[1]]])
    }

    pub fn col(&self, j: usize) -> Vec2 {
        [self.0[0][j], self.0[1][j]]
    }

    pub fn det(&self) -> f64 {
        self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0]
    }

    pub fn transpose(&self) -> Mat2 {
        Mat2([[self.0[0][0], self.0[1][0]], [self.0[0][1], self.0[1][1]]])
    }

    pub fn inverse(&self) -> Option<Mat2> {
        let d = self.det();
        if d == 0.0 || !d.is_finite() {
            return None;
        }
        let m = &self.0;
        Some(Mat2([
            [m[1][1] / d, -m[0][1] / d],
            [-m[1][0] / d, m[0][0] / d],
        ]))
    }

    pub fn apply(&self, v: Vec2) -> Vec2 {
        [
            self.0[0][0] * v[0] + self.0[0][1] * v[1],
            self.0[1][0] * v[0] + self.0[1][1] * v[1],
        ]
    }

    pub fn frobenius(&self) -> f64 {
        self.0.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `self · selfᵀ` as a symmetric tensor.
    pub fn gram_rows(&self) -> Sym2 {
        let m = &self.0;
        Sym2::new(
            m[0][0] * m[0][0] + m[0][1] * m[0][1],
            m[0][0] * m[1][0] + m[0][1] * m[1][1],
            m[1][0] * m[1][0] + m[1][1] * m[1][1],
        )
    }
}

impl Mul for Mat2 {
    type Output = Mat2;
    fn mul(self, o: Mat2) -> Mat2 {
        let a = &self.0;
        let b = &o.0;
        let mut r = [[0.0; 2]; 2];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        Mat2(r)
    }
}

impl Sub for Mat2 {
    type Output = Mat2;
    fn sub(self, o: Mat2) -> Mat2 {
        let (a, b) = (self.0, o.0);
        Mat2([
            [a[0][0] - b[0][0], a[0][1] - b[0][1]],
            [a[1][0] - b[1][0], a[1][1] - b[1][1]],
        ])
    }
}

/// Symmetric 2×2 tensor stored as its three independent entries.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Sym2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

/// Eigen-decomposition of a [`Sym2`] with `values[0] >= values[1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SymEigen {
    pub values: [f64; 2],
    pub vectors: [Vec2; 2],
}

impl Sym2 {
    pub const fn new(xx: f64, xy: f64, yy: f64) -> Self {
        Sym2 { xx, xy, yy }
    }

    pub fn identity() -> Self {
        Sym2::new(1.0, 0.0, 1.0)
    }

    pub fn scaled_identity(s: f64) -> Self {
        Sym2::new(s, 0.0, s)
    }

    /// `v vᵀ`
    pub fn outer(v: Vec2) -> Self {
        Sym2::new(v[0] * v[0], v[0] * v[1], v[1] * v[1])
    }

    /// `Σ_i values[i] · vectors[i] vectors[i]ᵀ`
    pub fn from_eigen(values: [f64; 2], vectors: [Vec2; 2]) -> Self {
        Sym2::outer(vectors[0]) * values[0] + Sym2::outer(vectors[1]) * values[1]
    }

    pub fn trace(&self) -> f64 {
        self.xx + self.yy
    }

    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    pub fn quad(&self, v: Vec2) -> f64 {
        self.xx * v[0] * v[0] + 2.0 * self.xy * v[0] * v[1] + self.yy * v[1] * v[1]
    }

    pub fn apply(&self, v: Vec2) -> Vec2 {
        [
            self.xx * v[0] + self.xy * v[1],
            self.xy * v[0] + self.yy * v[1],
        ]
    }

    pub fn to_mat(&self) -> Mat2 {
        Mat2([[self.xx, self.xy], [self.xy, self.yy]])
    }

    pub fn is_finite(&self) -> bool {
        self.xx.is_finite() && self.xy.is_finite() && self.yy.is_finite()
    }

    /// Closed-form symmetric eigen-decomposition. Eigenvectors are unit
    /// length, orthogonal, and form a right-handed pair.
    pub fn eigen(&self) -> SymEigen {
        let half_tr = 0.5 * (self.xx + self.yy);
        let half_diff = 0.5 * (self.xx - self.yy);
        let rad = half_diff.hypot(self.xy);
        let values = [half_tr + rad, half_tr - rad];
        let v0 = if rad == 0.0 {
            [1.0, 0.0]
        } else {
            // Angle of the leading eigenvector: tan(2θ) = 2xy / (xx - yy).
            let theta = 0.5 * self.xy.atan2(half_diff);
            [theta.cos(), theta.sin()]
        };
        let v1 = [-v0[1], v0[0]];
        SymEigen {
            values,
            vectors: [v0, v1],
        }
    }

    pub fn map_eigenvalues(&self, f: impl Fn(f64) -> f64) -> Sym2 {
        let e = self.eigen();
        Sym2::from_eigen([f(e.values[0]), f(e.values[1])], e.vectors)
    }

    /// Matrix logarithm; only meaningful for SPD tensors.
    pub fn log(&self) -> Sym2 {
        self.map_eigenvalues(f64::ln)
    }

    pub fn exp(&self) -> Sym2 {
        self.map_eigenvalues(f64::exp)
    }

    /// `s · self · s` for a symmetric `s`.
    pub fn congruent(&self, s: &Sym2) -> Sym2 {
        let m = s.to_mat() * self.to_mat() * s.to_mat();
        Sym2::new(m.0[0][0], 0.5 * (m.0[0][1] + m.0[1][0]), m.0[1][1])
    }

    /// Metric intersection: the largest metric whose unit ball lies inside
    /// both unit balls, via simultaneous reduction.
    pub fn intersect(&self, other: &Sym2) -> Sym2 {
        let half = self.map_eigenvalues(f64::sqrt);
        let inv_half = self.map_eigenvalues(|v| 1.0 / v.sqrt());
        other
            .congruent(&inv_half)
            .map_eigenvalues(|v| v.max(1.0))
            .congruent(&half)
    }

    pub fn is_spd(&self) -> bool {
        self.is_finite() && self.xx > 0.0 && self.det() > 0.0
    }
}

impl Add for Sym2 {
    type Output = Sym2;
    fn add(self, o: Sym2) -> Sym2 {
        Sym2::new(self.xx + o.xx, self.xy + o.xy, self.yy + o.yy)
    }
}

impl Sub for Sym2 {
    type Output = Sym2;
    fn sub(self, o: Sym2) -> Sym2 {
        Sym2::new(self.xx - o.xx, self.xy - o.xy, self.yy - o.yy)
    }
}

impl Mul<f64> for Sym2 {
    type Output = Sym2;
    fn mul(self, s: f64) -> Sym2 {
        Sym2::new(self.xx * s, self.xy * s, self.yy * s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_reconstructs() {
        let s = Sym2::new(3.0, -1.2, 0.5);
        let e = s.eigen();
        assert!(e.values[0] >= e.values[1]);
        let r = Sym2::from_eigen(e.values, e.vectors);
        assert!((r - s).xx.abs() < 1e-14 && (r - s).xy.abs() < 1e-14 && (r - s).yy.abs() < 1e-14);
        assert!(dot(e.vectors[0], e.vectors[1]).abs() < 1e-15);
    }

    #[test]
    fn eigen_of_diagonal() {
        let e = Sym2::new(1.0, 0.0, 4.0).eigen();
        assert_eq!(e.values, [4.0, 1.0]);
        assert!((e.vectors[0][1].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn log_exp_roundtrip() {
        let s = Sym2::new(2.0, 0.3, 0.7);
        let r = s.log().exp();
        assert!((r.xx - s.xx).abs() < 1e-13);
        assert!((r.xy - s.xy).abs() < 1e-13);
        assert!((r.yy - s.yy).abs() < 1e-13);
    }

    #[test]
    fn inverse_times_self() {
        let m = Mat2([[2.0, 1.0], [-0.5, 3.0]]);
        let p = m * m.inverse().unwrap();
        assert!((p - Mat2::IDENTITY).frobenius() < 1e-15);
    }
}
