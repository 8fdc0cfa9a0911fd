//! Fixed-size 3×3 linear algebra.

use core::ops::{Add, Index, IndexMut, Mul, Sub};

use super::Tensor;
use crate::error::{dim_err, Error, Result};

/// Row-major 3×3 matrix.
///
/// Points are row vectors throughout this crate, so a rotation `R` acts as
/// `x·R` and composes left to right.
#[derive(Clone, Copy, Debug, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    pub const ZERO: Mat3 = Mat3([[0.0; 3]; 3]);

    pub fn diag(d: [f64; 3]) -> Self {
        Mat3([[d[0], 0.0, 0.0], [0.0, d[1], 0.0], [0.0, 0.0, d[2]]])
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(dim_err("mat3", alloc::format!("need 9 values, got {}", v.len())));
        }
        let mut m = Mat3::ZERO;
        for i in 0..3 {
            m.0[i].copy_from_slice(&v[i * 3..i * 3 + 3]);
        }
        Ok(m)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.dims() != [3, 3] {
            return Err(dim_err("mat3", alloc::format!("expected 3×3, got {:?}", t.shape())));
        }
        Mat3::from_slice(t.data())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[3, 3], self.flat().to_vec()).expect("3×3 extents")
    }

    /// Row-major values.
    pub fn flat(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        ]
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn trace(&self) -> f64 {
        self.0[0][0] + self.0[1][1] + self.0[2][2]
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut r = *self;
        r.0.iter_mut().flatten().for_each(|v| *v *= s);
        r
    }

    pub fn frobenius(&self) -> f64 {
        libm::sqrt(self.0.iter().flatten().map(|v| v * v).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().fold(0.0, |a, v| a.max(libm::fabs(*v)))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    /// `‖RᵀR − I‖∞` (largest absolute entry).
    pub fn orthonormality_error(&self) -> f64 {
        (self.transpose() * *self - Mat3::IDENTITY).max_abs()
    }

    /// Row-vector action `v·M`.
    pub fn apply_row(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            v[0] * m[0][0] + v[1] * m[1][0] + v[2] * m[2][0],
            v[0] * m[0][1] + v[1] * m[1][1] + v[2] * m[2][1],
            v[0] * m[0][2] + v[1] * m[1][2] + v[2] * m[2][2],
        ]
    }

    /// Rotation by `theta` radians about x, for row vectors.
    pub fn rot_x(theta: f64) -> Self {
        let (s, c) = (libm::sin(theta), libm::cos(theta));
        Mat3([[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]])
    }

    pub fn rot_y(theta: f64) -> Self {
        let (s, c) = (libm::sin(theta), libm::cos(theta));
        Mat3([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])
    }

    /// Rotation by `theta` radians about z, for row vectors: `(1,0,0)·Rz(90°) = (0,1,0)`.
    pub fn rot_z(theta: f64) -> Self {
        let (s, c) = (libm::sin(theta), libm::cos(theta));
        Mat3([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn col(&self, j: usize) -> [f64; 3] {
        [self.0[0][j], self.0[1][j], self.0[2][j]]
    }

    fn set_col(&mut self, j: usize, v: [f64; 3]) {
        for i in 0..3 {
            self.0[i][j] = v[i];
        }
    }
}

impl Index<(usize, usize)> for Mat3 {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.0[i][j]
    }
}

impl IndexMut<(usize, usize)> for Mat3 {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.0[i][j]
    }
}

impl Mul for Mat3 {
    type Output = Mat3;
    fn mul(self, rhs: Mat3) -> Mat3 {
        let mut r = Mat3::ZERO;
        for i in 0..3 {
            for j in 0..3 {
                r.0[i][j] = (0..3).map(|k| self.0[i][k] * rhs.0[k][j]).sum();
            }
        }
        r
    }
}

impl Add for Mat3 {
    type Output = Mat3;
    fn add(self, rhs: Mat3) -> Mat3 {
        let mut r = self;
        for i in 0..3 {
            for j in 0..3 {
                r.0[i][j] += rhs.0[i][j];
            }
        }
        r
    }
}

impl Sub for Mat3 {
    type Output = Mat3;
    fn sub(self, rhs: Mat3) -> Mat3 {
        self + rhs.scale(-1.0)
    }
}

/// `m = u · diag(sigma) · vᵀ` with `sigma` non-negative and descending.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Svd3 {
    pub u: Mat3,
    pub sigma: [f64; 3],
    pub v: Mat3,
}

impl Svd3 {
    pub fn reconstruct(&self) -> Mat3 {
        self.u * Mat3::diag(self.sigma) * self.v.transpose()
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalized(a: [f64; 3]) -> [f64; 3] {
    let n = libm::sqrt(dot(a, a));
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Any unit vector orthogonal to unit `a`.
fn orthogonal_to(a: [f64; 3]) -> [f64; 3] {
    let axis = if libm::fabs(a[0]) < 0.6 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    normalized(cross(a, axis))
}

/// Singular value decomposition of a 3×3 matrix by one-sided (Hestenes)
/// Jacobi rotations.
///
/// Forward-only; no gradient is defined through it.
pub fn svd3(m: &Mat3) -> Result<Svd3> {
    if !m.is_finite() {
        return Err(Error::NonFinite { op: "svd3" });
    }
    let mut a = *m;
    let mut v = Mat3::IDENTITY;
    for _sweep in 0..60 {
        let mut rotated = false;
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let (ap, aq) = (a.col(p), a.col(q));
            let alpha = dot(ap, ap);
            let beta = dot(aq, aq);
            let gamma = dot(ap, aq);
            if gamma == 0.0 || libm::fabs(gamma) <= 1e-15 * libm::sqrt(alpha * beta) {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = libm::copysign(1.0, zeta) / (libm::fabs(zeta) + libm::sqrt(1.0 + zeta * zeta));
            let c = 1.0 / libm::sqrt(1.0 + t * t);
            let s = c * t;
            for mat in [&mut a, &mut v] {
                let (cp, cq) = (mat.col(p), mat.col(q));
                let np = [c * cp[0] - s * cq[0], c * cp[1] - s * cq[1], c * cp[2] - s * cq[2]];
                let nq = [s * cp[0] + c * cq[0], s * cp[1] + c * cq[1], s * cp[2] + c * cq[2]];
                mat.set_col(p, np);
                mat.set_col(q, nq);
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order = [0usize, 1, 2];
    let norms = [0, 1, 2].map(|j| libm::sqrt(dot(a.col(j), a.col(j))));
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap_or(core::cmp::Ordering::Equal));
    let sigma = order.map(|j| norms[j]);
    let mut u = Mat3::ZERO;
    let mut vs = Mat3::ZERO;
    for (dst, &src) in order.iter().enumerate() {
        vs.set_col(dst, v.col(src));
    }
    let tiny = sigma[0] * 1e-15;
    let rank = sigma.iter().filter(|s| **s > tiny && **s > 0.0).count();
    for j in 0..rank {
        let c = a.col(order[j]);
        u.set_col(j, [c[0] / sigma[j], c[1] / sigma[j], c[2] / sigma[j]]);
    }
    match rank {
        0 => u = Mat3::IDENTITY,
        1 => {
            let u0 = u.col(0);
            let u1 = orthogonal_to(u0);
            u.set_col(1, u1);
            u.set_col(2, cross(u0, u1));
        }
        2 => u.set_col(2, normalized(cross(u.col(0), u.col(1)))),
        _ => {}
    }
    let mut sigma = sigma;
    for s in sigma.iter_mut().skip(rank) {
        *s = 0.0;
    }
    Ok(Svd3 { u, sigma, v: vs })
}

/// [`svd3`] on a `3×3` tensor.
pub fn svd3_tensor(m: &Tensor) -> Result<(Tensor, [f64; 3], Tensor)> {
    let s = svd3(&Mat3::from_tensor(m)?)?;
    Ok((s.u.to_tensor(), s.sigma, s.v.to_tensor()))
}
