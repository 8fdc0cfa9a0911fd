//! Point clouds, rigid transforms and rotation utilities.
//!
//! Points are row vectors: a pose `(R, T)` maps a canonical cloud `S` to
//! `X = S·R + 1·T`.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{contract_err, dim_err, Error, Result};
use crate::tensor::kernels;
use crate::tensor::linalg::{svd3, Mat3};
use crate::tensor::Tensor;

pub type Point = [f64; 3];

/// Non-empty set of finite 3-D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(contract_err("point_cloud", "a cloud needs at least one point"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "point_cloud" });
        }
        Ok(PointCloud { points })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape().rank() != 2 || t.dims()[1] != 3 {
            return Err(dim_err("point_cloud", alloc::format!("expected N×3, got {:?}", t.shape())));
        }
        PointCloud::new(t.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.points.len(), 3], self.flat()).expect("N×3 extents")
    }

    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for i in 0..3 {
                c[i] += p[i];
            }
        }
        c.map(|v| v / n)
    }

    /// Sub-cloud of the given indices, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let pts = indices
            .iter()
            .map(|&i| {
                self.points.get(i).copied().ok_or_else(|| {
                    contract_err("select", alloc::format!("index {i} out of range for {} points", self.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        PointCloud::new(pts)
    }
}

/// Rotation (row-vector convention) followed by translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Point,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: Mat3::IDENTITY,
        translation: [0.0; 3],
    };

    pub fn new(rotation: Mat3, translation: Point) -> Self {
        RigidTransform { rotation, translation }
    }

    pub fn rotation(rotation: Mat3) -> Self {
        RigidTransform::new(rotation, [0.0; 3])
    }

    pub fn apply_point(&self, p: Point) -> Point {
        let r = self.rotation.apply_row(p);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * next.rotation,
            translation: next.apply_point(self.translation),
        }
    }

    /// Inverse, valid when the rotation is orthonormal.
    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        let t = rt.apply_row(self.translation);
        RigidTransform {
            rotation: rt,
            translation: [-t[0], -t[1], -t[2]],
        }
    }

    /// Rotation followed by translation as 12 values: `R` row-major, then `T`.
    pub fn to_array(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        out[..9].copy_from_slice(&self.rotation.flat());
        out[9..].copy_from_slice(&self.translation);
        out
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 12 {
            return Err(dim_err("rigid_transform", alloc::format!("need 12 values, got {}", v.len())));
        }
        Ok(RigidTransform {
            rotation: Mat3::from_slice(&v[..9])?,
            translation: [v[9], v[10], v[11]],
        })
    }
}

/// `result[i] = s[i]·R + T`.
pub fn apply_transform(s: &PointCloud, g: &RigidTransform) -> PointCloud {
    PointCloud {
        points: s.points.iter().map(|p| g.apply_point(*p)).collect(),
    }
}

/// Symmetric Chamfer distance: mean squared distance from each point of `x`
/// to its nearest neighbour in `y`, plus the same from `y` to `x`.
pub fn chamfer(x: &PointCloud, y: &PointCloud) -> f64 {
    let (fx, fy) = (x.flat(), y.flat());
    let forward = kernels::nearest(&fx, &fy);
    let backward = kernels::nearest(&fy, &fx);
    let mean = |v: &[(usize, f64)]| v.iter().map(|p| p.1).sum::<f64>() / v.len() as f64;
    mean(&forward) + mean(&backward)
}

/// Indices of the `k` points nearest to `anchor`, nearest first; ties go
/// to the lower index.
pub fn nearest_indices(points: &[Point], anchor: Point, k: usize) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d = kernels::sub(*p, anchor);
            (kernels::dot(d, d), i)
        })
        .collect();
    let k = k.min(order.len());
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < order.len() && k > 0 {
        order.select_nth_unstable_by(k - 1, cmp);
    }
    order.truncate(k);
    order.sort_unstable_by(cmp);
    order.into_iter().map(|p| p.1).collect()
}

/// For every point, its `k` nearest other points (self excluded), flat
/// `N·k`. `k` is clamped to `N - 1`; a single point is its own neighbour.
pub fn neighbor_table(points: &[Point], k: usize) -> (Vec<usize>, usize) {
    let n = points.len();
    if n <= 1 || k == 0 {
        return ((0..n).collect(), 1);
    }
    let k = k.min(n - 1);
    let mut out = Vec::with_capacity(n * k);
    // Sorted by (distance, index); a bounded insertion beats a full
    // selection for small k.
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (i, p) in points.iter().enumerate() {
        best.clear();
        for (j, q) in points.iter().enumerate() {
            if j == i {
                continue;
            }
            let d = kernels::sub(*q, *p);
            let d = kernels::dot(d, d);
            if best.len() == k && d >= best[k - 1].0 {
                continue;
            }
            let at = best.partition_point(|b| b.0 <= d);
            best.insert(at, (d, j));
            best.truncate(k);
        }
        out.extend(best.iter().map(|b| b.1));
    }
    (out, k)
}

/// Geodesic angle between two rotations in degrees, in `[0, 180]`.
pub fn angular_distance(r1: &Mat3, r2: &Mat3) -> Result<f64> {
    for r in [r1, r2] {
        let err = r.orthonormality_error();
        if !(err <= 1e-6) {
            return Err(contract_err(
                "angular_distance",
                alloc::format!("input is not orthonormal (|RᵀR - I| = {err:e})"),
            ));
        }
    }
    let cos = ((r1.transpose() * *r2).trace() - 1.0) / 2.0;
    Ok(libm::acos(cos.clamp(-1.0, 1.0)).to_degrees())
}

/// Haar-uniform rotation via a uniformly random unit quaternion.
pub fn sample_uniform_rotation<R: Rng + ?Sized>(rng: &mut R) -> Mat3 {
    let tau = core::f64::consts::TAU;
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let (a, b) = (libm::sqrt(1.0 - u1), libm::sqrt(u1));
    let (x, y) = (a * libm::sin(tau * u2), a * libm::cos(tau * u2));
    let (z, w) = (b * libm::sin(tau * u3), b * libm::cos(tau * u3));
    Mat3([
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
        ],
        [
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
        ],
        [
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ])
}

/// Translation with each component uniform in `[-range, range]`.
pub fn sample_translation<R: Rng + ?Sized>(rng: &mut R, range: f64) -> Result<Point> {
    if !(range > 0.0) || !range.is_finite() {
        return Err(contract_err("sample_translation", "range must be positive and finite"));
    }
    Ok([0; 3].map(|_| rng.random_range(-range..=range)))
}

/// Uniform rotation plus translation in `[-range, range]³`.
pub fn sample_rigid<R: Rng + ?Sized>(rng: &mut R, range: f64) -> Result<RigidTransform> {
    let rotation = sample_uniform_rotation(rng);
    Ok(RigidTransform::new(rotation, sample_translation(rng, range)?))
}

/// Nearest orthogonal matrix in Frobenius norm, with diagnostics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Orthonormalized {
    pub matrix: Mat3,
    /// `+1` for a proper rotation, `-1` for a reflection.
    pub det: f64,
    pub singular_values: [f64; 3],
}

/// Smallest ratio of the least to the largest singular value accepted by
/// [`closest_orthonormal`]. The projection is scale-free, so the bound is
/// relative: untrained heads emit small but well-conditioned matrices.
pub const MIN_SINGULAR_RATIO: f64 = 1e-10;

/// `R̂ = R̃(R̃ᵀR̃)^{-1/2}`, evaluated as `U·Vᵀ` from the SVD `R̃ = UΣVᵀ`.
///
/// The sign of the determinant is kept: a reflected input gives a
/// reflection, reported through [`Orthonormalized::det`].
pub fn closest_orthonormal_report(m: &Mat3) -> Result<Orthonormalized> {
    let s = svd3(m)?;
    if !(s.sigma[2] > MIN_SINGULAR_RATIO * s.sigma[0]) {
        return Err(Error::DegeneratePose {
            singular_values: s.sigma,
        });
    }
    let matrix = s.u * s.v.transpose();
    Ok(Orthonormalized {
        det: matrix.det(),
        matrix,
        singular_values: s.sigma,
    })
}

pub fn closest_orthonormal(m: &Mat3) -> Result<Mat3> {
    closest_orthonormal_report(m).map(|o| o.matrix)
}
