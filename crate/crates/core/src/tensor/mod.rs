//! Dense double-precision arrays and a reverse-mode tape over them.
//!
//! Tensors are row-major with rank at most four. All differentiable
//! computation goes through a [`Tape`]: every operation appends a node, and
//! [`Tape::backward`] walks the nodes once in reverse insertion order, which
//! is a valid reverse topological order because a node can only refer to
//! nodes created before it.

mod gemm;
pub(crate) mod kernels;
pub mod linalg;
pub(crate) mod tape;

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{dim_err, Error, Result};

pub use tape::{Reduction, Tape, Var};

pub(crate) use gemm::gemm;

/// Largest supported tensor rank.
pub const MAX_RANK: usize = 4;

/// Extents of a tensor, rank `0..=MAX_RANK`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: [usize; MAX_RANK],
    rank: usize,
}

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.len() > MAX_RANK {
            return Err(dim_err(
                "shape",
                alloc::format!("rank {} exceeds {}", dims.len(), MAX_RANK),
            ));
        }
        let mut d = [1; MAX_RANK];
        d[..dims.len()].copy_from_slice(dims);
        Ok(Shape {
            dims: d,
            rank: dims.len(),
        })
    }

    pub fn scalar() -> Self {
        Shape {
            dims: [1; MAX_RANK],
            rank: 0,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.rank]
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn numel(&self) -> usize {
        self.dims().iter().product()
    }

    /// Row-major strides.
    pub fn strides(&self) -> [usize; MAX_RANK] {
        let mut s = [0; MAX_RANK];
        let mut acc = 1;
        for i in (0..self.rank).rev() {
            s[i] = acc;
            acc *= self.dims[i];
        }
        s
    }

    /// Extents left-padded with ones to `MAX_RANK`.
    pub(crate) fn padded(&self) -> [usize; MAX_RANK] {
        let mut p = [1; MAX_RANK];
        let off = MAX_RANK - self.rank;
        p[off..].copy_from_slice(self.dims());
        p
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.dims())
    }
}

/// Dense row-major array of `f64`. Storage is shared between clones and
/// copied on first write.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(dim_err(
                "tensor",
                alloc::format!("extents {:?} need {} values, got {}", dims, shape.numel(), data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_shape(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        Ok(Tensor {
            data: Arc::new(vec![0.0; shape.numel()]),
            shape,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: Arc::new(vec![value]),
        }
    }

    /// 2-D tensor from row slices of equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(dim_err("from_rows", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(&[rows.len(), cols], data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(dim_err("item", alloc::format!("{:?} is not a scalar", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.data.len() {
            return Err(dim_err(
                "reshape",
                alloc::format!("{:?} -> {:?}", self.shape, dims),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        let s = self.shape.strides();
        let off: usize = index.iter().zip(s.iter()).map(|(i, st)| i * st).sum();
        self.data[off]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

/// Result extents of numpy-style broadcasting.
pub(crate) fn broadcast_shapes(a: Shape, b: Shape) -> Result<Shape> {
    let rank = a.rank().max(b.rank());
    let (pa, pb) = (a.padded(), b.padded());
    let mut out = [1; MAX_RANK];
    for i in 0..MAX_RANK {
        out[i] = match (pa[i], pb[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(dim_err(
                    "broadcast",
                    alloc::format!("{:?} vs {:?}", a, b),
                ))
            }
        };
    }
    Shape::new(&out[MAX_RANK - rank..])
}

/// Strides of `src` read through a broadcast to `out` (zero on broadcast axes).
pub(crate) fn broadcast_strides(src: Shape, out: Shape) -> [usize; MAX_RANK] {
    let p = src.padded();
    let rank_src = src.rank();
    let s = src.strides();
    let mut padded_strides = [0; MAX_RANK];
    let off = MAX_RANK - rank_src;
    padded_strides[off..].copy_from_slice(&s[..rank_src]);
    let po = out.padded();
    let mut r = [0; MAX_RANK];
    for i in 0..MAX_RANK {
        r[i] = if p[i] == 1 && po[i] != 1 { 0 } else { padded_strides[i] };
    }
    r
}

/// Visit every output element of a broadcast with its source offsets.
pub(crate) fn for_each_broadcast(
    out: Shape,
    sa: [usize; MAX_RANK],
    sb: [usize; MAX_RANK],
    mut f: impl FnMut(usize, usize, usize),
) {
    let d = out.padded();
    let mut o = 0;
    for i0 in 0..d[0] {
        for i1 in 0..d[1] {
            for i2 in 0..d[2] {
                let base_a = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let base_b = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..d[3] {
                    f(o, base_a + i3 * sa[3], base_b + i3 * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

/// Intermediate results are checked in debug builds only; inputs go
/// through [`require_finite`] in every build.
pub(crate) fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if cfg!(debug_assertions) {
        require_finite(op, data)?;
    }
    Ok(())
}

pub(crate) fn require_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_rejects_rank_five() {
        assert!(Shape::new(&[1, 1, 1, 1, 1]).is_err());
    }

    #[test]
    fn tensor_checks_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn broadcast_rules() {
        let a = Shape::new(&[4, 1, 3]).unwrap();
        let b = Shape::new(&[5, 1]).unwrap();
        assert_eq!(broadcast_shapes(a, b).unwrap().dims(), &[4, 5, 3]);
        let c = Shape::new(&[2, 2]).unwrap();
        assert!(broadcast_shapes(a, c).is_err());
    }
}
