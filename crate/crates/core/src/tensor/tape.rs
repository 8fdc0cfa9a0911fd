use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, V3};
use super::{broadcast_shapes, broadcast_strides, check_finite, require_finite, for_each_broadcast, gemm, Shape, Tensor, MAX_RANK};
use crate::error::{contract_err, dim_err, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    /// Gradient is routed to the first maximal element.
    Max,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine { x: Var, scale: f64 },
    Sqrt(Var),
    Relu(Var),
    MatMul(Var, Var),
    ChannelMix { w: Var, v: Var },
    Transpose(Var),
    Reshape(Var),
    Reduce {
        x: Var,
        axis: usize,
        kind: Reduction,
        argmax: Vec<usize>,
    },
    BroadcastTo(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    RowStochastic(Var),
    Clip {
        q: Var,
        k: Var,
        o: Option<Var>,
        alpha: f64,
        eps: f64,
    },
    FrameProject { z: Var, frame: Var },
    GatherMean { x: Var, index: Vec<usize>, group: usize },
    NormScale {
        x: Var,
        gamma: Var,
        denom: Vec<f64>,
        norms: Vec<f64>,
        batch_stats: bool,
    },
    FrameMax { z: Var, frame: Var, argmax: Vec<usize> },
    Chamfer {
        x: Var,
        y: Var,
        nn_xy: Vec<usize>,
        nn_yx: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of tensor operations for reverse-mode differentiation.
///
/// A tape is single-owner: build it, call [`Tape::backward`] once, read the
/// leaf gradients. A second `backward` without [`Tape::reset_grads`] is an
/// error.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

/// Split `dims` around `axis` into (outer, len, inner) element counts.
fn split_axis(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

fn accum<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        check_finite(name, value.data())?;
        Ok(self.push(value, op, requires_grad))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        require_finite("leaf", value.data())?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Copy of `v`'s value that is cut off from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward root with respect to leaf `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads[v.0].as_ref()?;
        Some(Tensor::from_shape(self.nodes[v.0].value.shape(), g.clone()))
    }

    /// Forget computed gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.backward_done = false;
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let rg = self.rg(a) || self.rg(b);
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
            return Ok((Tensor::from_shape(ta.shape(), data), rg));
        }
        let out = broadcast_shapes(ta.shape(), tb.shape()).map_err(|_| {
            dim_err(name, format!("{:?} vs {:?}", ta.shape(), tb.shape()))
        })?;
        let sa = broadcast_strides(ta.shape(), out);
        let sb = broadcast_strides(tb.shape(), out);
        let mut data = vec![0.0; out.numel()];
        let (da, db) = (ta.data(), tb.data());
        for_each_broadcast(out, sa, sb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
        Ok((Tensor::from_shape(out, data), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        self.push_checked("add", t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push_checked("sub", t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push_checked("mul", t, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("div", a, b, |x, y| x / y)?;
        self.push_checked("div", t, Op::Div(a, b), rg)
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|v| scale * v + shift).collect();
        let t = Tensor::from_shape(tx.shape(), data);
        let rg = self.rg(x);
        self.push_checked("affine", t, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.data().iter().any(|v| *v < 0.0) {
            return Err(contract_err("sqrt", "negative input"));
        }
        let data = tx.data().iter().map(|v| libm::sqrt(*v)).collect();
        let t = Tensor::from_shape(tx.shape(), data);
        let rg = self.rg(x);
        self.push_checked("sqrt", t, Op::Sqrt(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::from_shape(tx.shape(), data);
        let rg = self.rg(x);
        self.push_checked("relu", t, Op::Relu(x), rg)
    }

    /// Batched matrix product over the last two axes, broadcasting the
    /// leading (batch) axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ra, rb) = (ta.shape().rank(), tb.shape().rank());
        if ra < 2 || rb < 2 {
            return Err(dim_err("matmul", "operands must have rank >= 2"));
        }
        let (m, k) = (ta.dims()[ra - 2], ta.dims()[ra - 1]);
        let (k2, n) = (tb.dims()[rb - 2], tb.dims()[rb - 1]);
        if k != k2 {
            return Err(dim_err(
                "matmul",
                format!("inner extents {:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let ba = Shape::new(&ta.dims()[..ra - 2])?;
        let bb = Shape::new(&tb.dims()[..rb - 2])?;
        let bo = broadcast_shapes(ba, bb)
            .map_err(|_| dim_err("matmul", format!("batch {:?} vs {:?}", ba, bb)))?;
        let mut out_dims: Vec<usize> = bo.dims().to_vec();
        out_dims.extend_from_slice(&[m, n]);
        let out_shape = Shape::new(&out_dims)?;
        let mut data = vec![0.0; out_shape.numel()];
        let (da, db) = (ta.data(), tb.data());
        for_each_broadcast(bo, broadcast_strides(ba, bo), broadcast_strides(bb, bo), |o, ia, ib| {
            gemm(
                m,
                k,
                n,
                &da[ia * m * k..(ia + 1) * m * k],
                (k, 1),
                &db[ib * k * n..(ib + 1) * k * n],
                (n, 1),
                0.0,
                &mut data[o * m * n..(o + 1) * m * n],
                (n, 1),
            )
        });
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("matmul", Tensor::from_shape(out_shape, data), Op::MatMul(a, b), rg)
    }

    /// Mix the leading (channel) axis: `w` is `C'×C`, `v` is `C×...`, the
    /// result is `C'×...` with `out[i] = Σ_j w[i,j]·v[j]`.
    pub fn channel_mix(&mut self, w: Var, v: Var) -> Result<Var> {
        let (tw, tv) = (&self.nodes[w.0].value, &self.nodes[v.0].value);
        if tw.shape().rank() != 2 || tv.shape().rank() < 1 || tw.dims()[1] != tv.dims()[0] {
            return Err(dim_err(
                "channel_mix",
                format!("weight {:?} vs features {:?}", tw.shape(), tv.shape()),
            ));
        }
        let (co, ci) = (tw.dims()[0], tw.dims()[1]);
        let m = tv.numel() / ci.max(1);
        let mut out_dims = tv.dims().to_vec();
        out_dims[0] = co;
        let out_shape = Shape::new(&out_dims)?;
        let mut data = vec![0.0; out_shape.numel()];
        gemm(co, ci, m, tw.data(), (ci, 1), tv.data(), (m, 1), 0.0, &mut data, (m, 1));
        let rg = self.rg(w) || self.rg(v);
        self.push_checked("channel_mix", Tensor::from_shape(out_shape, data), Op::ChannelMix { w, v }, rg)
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let r = tx.shape().rank();
        if r < 2 {
            return Err(dim_err("transpose", "rank < 2"));
        }
        let (rows, cols) = (tx.dims()[r - 2], tx.dims()[r - 1]);
        let mut dims = tx.dims().to_vec();
        dims.swap(r - 2, r - 1);
        let data = transpose_data(tx.data(), rows, cols);
        let t = Tensor::new(&dims, data)?;
        let rg = self.rg(x);
        self.push_checked("transpose", t, Op::Transpose(x), rg)
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let t = self.nodes[x.0].value.clone().reshape(dims)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Reduce along `axis`; with `keepdim` the axis stays with extent one.
    pub fn reduce(&mut self, x: Var, axis: usize, kind: Reduction, keepdim: bool) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let dims = tx.dims();
        if axis >= dims.len() {
            return Err(dim_err("reduce", format!("axis {axis} invalid for {:?}", tx.shape())));
        }
        if dims[axis] == 0 {
            return Err(dim_err("reduce", "empty axis"));
        }
        let (outer, len, inner) = split_axis(dims, axis);
        let mut data = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        let src = tx.data();
        match kind {
            Reduction::Sum | Reduction::Mean if inner == 1 => {
                for (d, row) in data.iter_mut().zip(src.chunks_exact(len)) {
                    *d = row.iter().sum();
                }
                if kind == Reduction::Mean {
                    let inv = 1.0 / len as f64;
                    data.iter_mut().for_each(|d| *d *= inv);
                }
            }
            Reduction::Sum | Reduction::Mean => {
                for o in 0..outer {
                    for j in 0..len {
                        let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                        for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                }
                if kind == Reduction::Mean {
                    let inv = 1.0 / len as f64;
                    data.iter_mut().for_each(|d| *d *= inv);
                }
            }
            Reduction::Max => {
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = src[o * len * inner + i];
                        let mut at = 0;
                        for j in 1..len {
                            let v = src[(o * len + j) * inner + i];
                            if v > best {
                                best = v;
                                at = j;
                            }
                        }
                        data[o * inner + i] = best;
                        argmax[o * inner + i] = at;
                    }
                }
            }
        }
        let mut out_dims = dims.to_vec();
        if keepdim {
            out_dims[axis] = 1;
        } else {
            out_dims.remove(axis);
        }
        let t = Tensor::new(&out_dims, data)?;
        let rg = self.rg(x);
        self.push_checked("reduce", t, Op::Reduce { x, axis, kind, argmax }, rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.numel();
        let flat = self.reshape(x, &[n])?;
        self.reduce(flat, 0, Reduction::Sum, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.numel();
        let flat = self.reshape(x, &[n])?;
        self.reduce(flat, 0, Reduction::Mean, false)
    }

    /// Mean squared difference over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(dim_err(
                "mse",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    pub fn broadcast_to(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let out = Shape::new(dims)?;
        let check = broadcast_shapes(tx.shape(), out)?;
        if check != out {
            return Err(dim_err("broadcast_to", format!("{:?} -> {:?}", tx.shape(), dims)));
        }
        let sx = broadcast_strides(tx.shape(), out);
        let mut data = vec![0.0; out.numel()];
        let src = tx.data();
        for_each_broadcast(out, sx, [0; MAX_RANK], |o, ix, _| data[o] = src[ix]);
        let rg = self.rg(x);
        self.push_checked("broadcast_to", Tensor::from_shape(out, data), Op::BroadcastTo(x), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err("concat", "no inputs"))?;
        let base = self.nodes[first.0].value.dims().to_vec();
        if axis >= base.len() {
            return Err(dim_err("concat", format!("axis {axis} invalid")));
        }
        let mut total = 0;
        for p in parts {
            let d = self.nodes[p.0].value.dims();
            let same = d.len() == base.len()
                && d.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(dim_err("concat", format!("{:?} vs {:?}", d, base)));
            }
            total += d[axis];
        }
        let mut out_dims = base.clone();
        out_dims[axis] = total;
        let (outer, _, inner) = split_axis(&out_dims, axis);
        let mut data = vec![0.0; outer * total * inner];
        let mut off = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            let len = t.dims()[axis];
            for o in 0..outer {
                let src = &t.data()[o * len * inner..(o + 1) * len * inner];
                let dst_start = (o * total + off) * inner;
                data[dst_start..dst_start + len * inner].copy_from_slice(src);
            }
            off += len;
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        let t = Tensor::new(&out_dims, data)?;
        self.push_checked(
            "concat",
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let dims = tx.dims();
        if axis >= dims.len() || start + len > dims[axis] {
            return Err(dim_err(
                "slice",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, tx.shape()),
            ));
        }
        let (outer, full, inner) = split_axis(dims, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            data.extend_from_slice(&tx.data()[s..s + len * inner]);
        }
        let mut out_dims = dims.to_vec();
        out_dims[axis] = len;
        let t = Tensor::new(&out_dims, data)?;
        let rg = self.rg(x);
        self.push_checked("slice", t, Op::Slice { x, axis, start }, rg)
    }

    /// Reparameterize a free `R×C` matrix so every row sums to one:
    /// `w = u + (1 - rowsum(u)) / C`.
    pub fn row_stochastic(&mut self, u: Var) -> Result<Var> {
        let tu = &self.nodes[u.0].value;
        if tu.shape().rank() != 2 || tu.dims()[1] == 0 {
            return Err(dim_err("row_stochastic", format!("{:?}", tu.shape())));
        }
        let data = row_stochastic_data(tu.data(), tu.dims()[1]);
        let t = Tensor::from_shape(tu.shape(), data);
        let rg = self.rg(u);
        self.push_checked("row_stochastic", t, Op::RowStochastic(u), rg)
    }

    /// Vector-neuron half-space clipping with an optional learned origin.
    ///
    /// `q` is `C×...×3`; `k` and `o` have the same trailing extents and a
    /// leading extent of either `C` or one (shared across channels). A
    /// missing origin means the zero vector.
    pub fn vn_clip(&mut self, q: Var, k: Var, o: Option<Var>, alpha: f64, eps: f64) -> Result<Var> {
        let (tq, tk) = (&self.nodes[q.0].value, &self.nodes[k.0].value);
        let layout = ClipLayout::new(tq, tk, o.map(|o| &self.nodes[o.0].value))?;
        let (dq, dk) = (tq.data(), tk.data());
        let d_o = o.map(|o| self.nodes[o.0].value.data());
        let mut data = vec![0.0; dq.len()];
        for c in 0..layout.channels {
            for p in 0..layout.points {
                let qi = (c * layout.points + p) * 3;
                let ki = layout.k_index(c, p);
                let qv = v3(dq, qi);
                let kv = v3(dk, ki);
                let ov = d_o.map_or([0.0; 3], |d| v3(d, layout.o_index(c, p)));
                let r = kernels::clip_forward(qv, kv, ov, alpha, eps);
                data[qi..qi + 3].copy_from_slice(&r);
            }
        }
        let rg = self.rg(q) || self.rg(k) || o.is_some_and(|o| self.rg(o));
        let t = Tensor::from_shape(tq.shape(), data);
        self.push_checked("vn_clip", t, Op::Clip { q, k, o, alpha, eps }, rg)
    }

    /// Per-vector inner products against a three-vector frame:
    /// `out[c,p,j] = <z[c,p], frame[j,p]>` for `z: C×...×3`, `frame: 3×...×3`.
    pub fn frame_project(&mut self, z: Var, frame: Var) -> Result<Var> {
        let (tz, tf) = (&self.nodes[z.0].value, &self.nodes[frame.0].value);
        let (c, p) = vec_layout(tz).ok_or_else(|| dim_err("frame_project", "features need trailing extent 3"))?;
        match vec_layout(tf) {
            Some((3, pf)) if pf == p => {}
            _ => {
                return Err(dim_err(
                    "frame_project",
                    format!("frame {:?} vs features {:?}", tf.shape(), tz.shape()),
                ))
            }
        }
        let (dz, df) = (tz.data(), tf.data());
        let mut data = vec![0.0; dz.len()];
        for ci in 0..c {
            for pi in 0..p {
                let zi = (ci * p + pi) * 3;
                let zv = v3(dz, zi);
                for j in 0..3 {
                    data[zi + j] = kernels::dot(zv, v3(df, (j * p + pi) * 3));
                }
            }
        }
        let rg = self.rg(z) || self.rg(frame);
        let t = Tensor::from_shape(tz.shape(), data);
        self.push_checked("frame_project", t, Op::FrameProject { z, frame }, rg)
    }

    /// Rescale each channel of `x: C×N×3` by `gamma[c] / (m[c] + eps)`.
    ///
    /// With `running = None`, `m[c]` is the mean vector norm of channel `c`
    /// over the points of `x` and is differentiated through; otherwise
    /// `m = running` is a constant. Returns the output and the per-channel
    /// mean norms of `x`.
    pub fn norm_scale(&mut self, x: Var, gamma: Var, running: Option<&[f64]>, eps: f64, floor: f64) -> Result<(Var, Vec<f64>)> {
        let (tx, tg) = (&self.nodes[x.0].value, &self.nodes[gamma.0].value);
        let d = tx.dims();
        if d.len() != 3 || d[2] != 3 || tg.numel() != d[0] || running.is_some_and(|r| r.len() != d[0]) {
            return Err(dim_err("norm_scale", format!("features {:?}, scale {:?}", tx.shape(), tg.shape())));
        }
        let (c, n) = (d[0], d[1]);
        let src = tx.data();
        let norms: Vec<f64> = src
            .chunks_exact(3)
            .map(|v| libm::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + floor))
            .collect();
        let means: Vec<f64> = norms.chunks_exact(n).map(|r| r.iter().sum::<f64>() / n as f64).collect();
        let denom: Vec<f64> = match running {
            Some(r) => r.iter().map(|m| m + eps).collect(),
            None => means.iter().map(|m| m + eps).collect(),
        };
        let gam = tg.data();
        let mut data = vec![0.0; src.len()];
        for ch in 0..c {
            let f = gam[ch] / denom[ch];
            let range = ch * n * 3..(ch + 1) * n * 3;
            data[range.clone()].iter_mut().zip(&src[range]).for_each(|(o, v)| *o = v * f);
        }
        let rg = self.rg(x) || self.rg(gamma);
        let op = Op::NormScale {
            x,
            gamma,
            denom,
            norms,
            batch_stats: running.is_none(),
        };
        let out = self.push_checked("norm_scale", Tensor::from_shape(tx.shape(), data), op, rg)?;
        Ok((out, means))
    }

    /// `out[c·3 + j] = max_p <z[c,p], frame[j,p]>` for `z: C×N×3` and
    /// `frame: 3×N×3`; gradient goes to the first maximizing point.
    pub fn frame_max(&mut self, z: Var, frame: Var) -> Result<Var> {
        let (tz, tf) = (&self.nodes[z.0].value, &self.nodes[frame.0].value);
        let (dz, df) = (tz.dims(), tf.dims());
        if dz.len() != 3 || dz[2] != 3 || df != [3, dz[1], 3] || dz[1] == 0 {
            return Err(dim_err("frame_max", format!("features {:?}, frame {:?}", tz.shape(), tf.shape())));
        }
        let (c, n) = (dz[0], dz[1]);
        let (zs, fs) = (tz.data(), tf.data());
        let mut data = vec![f64::NEG_INFINITY; c * 3];
        let mut argmax = vec![0; c * 3];
        for ch in 0..c {
            for p in 0..n {
                let zv = v3(zs, (ch * n + p) * 3);
                for j in 0..3 {
                    let s = kernels::dot(zv, v3(fs, (j * n + p) * 3));
                    if s > data[ch * 3 + j] {
                        data[ch * 3 + j] = s;
                        argmax[ch * 3 + j] = p;
                    }
                }
            }
        }
        let rg = self.rg(z) || self.rg(frame);
        let t = Tensor::new(&[c * 3], data)?;
        self.push_checked("frame_max", t, Op::FrameMax { z, frame, argmax }, rg)
    }

    /// Row gather with averaging: `x` is `R×...`; output row `i` is the mean
    /// of rows `index[i·group .. (i+1)·group]` of `x`.
    pub fn gather_mean(&mut self, x: Var, index: &[usize], group: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let dims = tx.dims();
        if dims.is_empty() || group == 0 || index.len() % group != 0 {
            return Err(dim_err("gather_mean", format!("{:?} with group {group}", tx.shape())));
        }
        if let Some(bad) = index.iter().find(|&&i| i >= dims[0]) {
            return Err(dim_err("gather_mean", format!("row {bad} out of {}", dims[0])));
        }
        let row = tx.numel() / dims[0].max(1);
        let rows = index.len() / group;
        let mut data = vec![0.0; rows * row];
        let src = tx.data();
        let inv = 1.0 / group as f64;
        for (i, out) in data.chunks_mut(row.max(1)).enumerate().take(rows) {
            for &r in &index[i * group..(i + 1) * group] {
                out.iter_mut().zip(&src[r * row..(r + 1) * row]).for_each(|(o, s)| *o += s * inv);
            }
        }
        let mut out_dims = dims.to_vec();
        out_dims[0] = rows;
        let t = Tensor::new(&out_dims, data)?;
        let rg = self.rg(x);
        let op = Op::GatherMean {
            x,
            index: index.to_vec(),
            group,
        };
        self.push_checked("gather_mean", t, op, rg)
    }

    /// Symmetric Chamfer distance between `N×3` and `M×3` point sets.
    pub fn chamfer(&mut self, x: Var, y: Var) -> Result<Var> {
        let (tx, ty) = (&self.nodes[x.0].value, &self.nodes[y.0].value);
        for t in [tx, ty] {
            if t.shape().rank() != 2 || t.dims()[1] != 3 {
                return Err(dim_err("chamfer", format!("expected N×3, got {:?}", t.shape())));
            }
            if t.dims()[0] == 0 {
                return Err(contract_err("chamfer", "empty point set"));
            }
        }
        let fwd = kernels::nearest(tx.data(), ty.data());
        let bwd = kernels::nearest(ty.data(), tx.data());
        let value = mean_of(&fwd) + mean_of(&bwd);
        let rg = self.rg(x) || self.rg(y);
        let op = Op::Chamfer {
            x,
            y,
            nn_xy: fwd.iter().map(|p| p.0).collect(),
            nn_yx: bwd.iter().map(|p| p.0).collect(),
        };
        self.push_checked("chamfer", Tensor::scalar(value), op, rg)
    }

    /// Accumulate `d root / d leaf` into every gradient-tracked leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(contract_err(
                "backward",
                "gradients already computed on this tape; call reset_grads first",
            ));
        }
        if self.nodes[root.0].value.numel() != 1 {
            return Err(contract_err(
                "backward",
                format!("root must be a scalar, got {:?}", self.nodes[root.0].value.shape()),
            ));
        }
        self.backward_done = true;
        self.grads[root.0] = Some(vec![1.0]);
        let Tape { nodes, grads, .. } = self;
        for i in (0..=root.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            if matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(nodes, grads, i, &g);
        }
        Ok(())
    }
}

fn v3(d: &[f64], i: usize) -> V3 {
    [d[i], d[i + 1], d[i + 2]]
}

fn mean_of(pairs: &[(usize, f64)]) -> f64 {
    pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64
}

/// (channels, points) of a `C×...×3` tensor.
fn vec_layout(t: &Tensor) -> Option<(usize, usize)> {
    let d = t.dims();
    if d.len() < 2 || d[d.len() - 1] != 3 || d[0] == 0 {
        return None;
    }
    Some((d[0], t.numel() / (3 * d[0])))
}

struct ClipLayout {
    channels: usize,
    points: usize,
    k_shared: bool,
    o_shared: bool,
}

impl ClipLayout {
    fn new(q: &Tensor, k: &Tensor, o: Option<&Tensor>) -> Result<Self> {
        let (c, p) = vec_layout(q).ok_or_else(|| dim_err("vn_clip", "features need trailing extent 3"))?;
        let check = |t: &Tensor, what: &str| -> Result<bool> {
            match vec_layout(t) {
                Some((1, pt)) if pt == p && t.dims()[1..] == q.dims()[1..] => Ok(true),
                Some((ct, pt)) if ct == c && pt == p && t.dims() == q.dims() => Ok(false),
                _ => Err(dim_err(
                    "vn_clip",
                    format!("{what} {:?} incompatible with features {:?}", t.shape(), q.shape()),
                )),
            }
        };
        let k_shared = check(k, "direction")?;
        let o_shared = match o {
            Some(o) => check(o, "origin")?,
            None => true,
        };
        Ok(ClipLayout {
            channels: c,
            points: p,
            k_shared,
            o_shared,
        })
    }

    fn k_index(&self, c: usize, p: usize) -> usize {
        (if self.k_shared { p } else { c * self.points + p }) * 3
    }

    fn o_index(&self, c: usize, p: usize) -> usize {
        (if self.o_shared { p } else { c * self.points + p }) * 3
    }
}

fn transpose_data(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mat = rows * cols;
    let batches = if mat == 0 { 0 } else { src.len() / mat };
    let mut out = vec![0.0; src.len()];
    for b in 0..batches {
        let s = &src[b * mat..(b + 1) * mat];
        let d = &mut out[b * mat..(b + 1) * mat];
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
    out
}

pub(crate) fn row_stochastic_data(u: &[f64], cols: usize) -> Vec<f64> {
    let mut w = u.to_vec();
    for row in w.chunks_mut(cols) {
        let s: f64 = row.iter().sum();
        let shift = (1.0 - s) / cols as f64;
        row.iter_mut().for_each(|v| *v += shift);
    }
    w
}

fn reduce_broadcast_grad(
    grads: &mut [Option<Vec<f64>>],
    target: Var,
    target_shape: Shape,
    out_shape: Shape,
    g: &[f64],
    scale: impl Fn(usize, usize) -> f64,
) {
    let acc = accum(grads, target, target_shape.numel());
    if target_shape == out_shape {
        for (i, (a, gi)) in acc.iter_mut().zip(g).enumerate() {
            *a += gi * scale(i, i);
        }
        return;
    }
    let st = broadcast_strides(target_shape, out_shape);
    for_each_broadcast(out_shape, st, [0; MAX_RANK], |o, it, _| acc[it] += g[o] * scale(o, it));
}

/// Propagate `g` (gradient of node `i`) into its parents.
fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let out_shape = nodes[i].value.shape();
    let val = |v: Var| &nodes[v.0].value;
    let rg = |v: Var| nodes[v.0].requires_grad;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if rg(*a) {
                reduce_broadcast_grad(grads, *a, val(*a).shape(), out_shape, g, |_, _| 1.0);
            }
            if rg(*b) {
                reduce_broadcast_grad(grads, *b, val(*b).shape(), out_shape, g, |_, _| sign);
            }
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let is_div = matches!(nodes[i].op, Op::Div(..));
            let (ta, tb) = (val(*a), val(*b));
            let sa = broadcast_strides(ta.shape(), out_shape);
            let sb = broadcast_strides(tb.shape(), out_shape);
            let (da, db) = (ta.data(), tb.data());
            if rg(*a) {
                let acc = accum(grads, *a, ta.numel());
                for_each_broadcast(out_shape, sa, sb, |o, ia, ib| {
                    acc[ia] += if is_div { g[o] / db[ib] } else { g[o] * db[ib] };
                });
            }
            if rg(*b) {
                let acc = accum(grads, *b, tb.numel());
                for_each_broadcast(out_shape, sa, sb, |o, ia, ib| {
                    acc[ib] += if is_div {
                        -g[o] * da[ia] / (db[ib] * db[ib])
                    } else {
                        g[o] * da[ia]
                    };
                });
            }
        }
        Op::Affine { x, scale } => {
            let acc = accum(grads, *x, g.len());
            acc.iter_mut().zip(g).for_each(|(a, gi)| *a += scale * gi);
        }
        Op::Sqrt(x) => {
            let y = nodes[i].value.data();
            let acc = accum(grads, *x, g.len());
            for ((a, gi), yi) in acc.iter_mut().zip(g).zip(y) {
                if *yi > 0.0 {
                    *a += gi / (2.0 * yi);
                }
            }
        }
        Op::Relu(x) => {
            let xs = val(*x).data();
            let acc = accum(grads, *x, g.len());
            for ((a, gi), xi) in acc.iter_mut().zip(g).zip(xs) {
                if *xi > 0.0 {
                    *a += gi;
                }
            }
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (ra, rb) = (ta.shape().rank(), tb.shape().rank());
            let (m, k) = (ta.dims()[ra - 2], ta.dims()[ra - 1]);
            let n = tb.dims()[rb - 1];
            let ba = Shape::new(&ta.dims()[..ra - 2]).expect("rank checked in forward");
            let bb = Shape::new(&tb.dims()[..rb - 2]).expect("rank checked in forward");
            let bo = broadcast_shapes(ba, bb).expect("checked in forward");
            let (sa, sb) = (broadcast_strides(ba, bo), broadcast_strides(bb, bo));
            let (da, db) = (ta.data(), tb.data());
            if rg(*a) {
                let acc = accum(grads, *a, ta.numel());
                for_each_broadcast(bo, sa, sb, |o, ia, ib| {
                    // dA = dC · Bᵀ
                    gemm(
                        m,
                        n,
                        k,
                        &g[o * m * n..(o + 1) * m * n],
                        (n, 1),
                        &db[ib * k * n..(ib + 1) * k * n],
                        (1, n),
                        1.0,
                        &mut acc[ia * m * k..(ia + 1) * m * k],
                        (k, 1),
                    )
                });
            }
            if rg(*b) {
                let acc = accum(grads, *b, tb.numel());
                for_each_broadcast(bo, sa, sb, |o, ia, ib| {
                    // dB = Aᵀ · dC
                    gemm(
                        k,
                        m,
                        n,
                        &da[ia * m * k..(ia + 1) * m * k],
                        (1, k),
                        &g[o * m * n..(o + 1) * m * n],
                        (n, 1),
                        1.0,
                        &mut acc[ib * k * n..(ib + 1) * k * n],
                        (n, 1),
                    )
                });
            }
        }
        Op::ChannelMix { w, v } => {
            let (tw, tv) = (val(*w), val(*v));
            let (co, ci) = (tw.dims()[0], tw.dims()[1]);
            let m = tv.numel() / ci.max(1);
            if rg(*w) {
                let acc = accum(grads, *w, tw.numel());
                gemm(co, m, ci, g, (m, 1), tv.data(), (1, m), 1.0, acc, (ci, 1));
            }
            if rg(*v) {
                let acc = accum(grads, *v, tv.numel());
                gemm(ci, co, m, tw.data(), (1, ci), g, (m, 1), 1.0, acc, (m, 1));
            }
        }
        Op::Transpose(x) => {
            let r = out_shape.rank();
            let (rows, cols) = (out_shape.dims()[r - 2], out_shape.dims()[r - 1]);
            let back = transpose_data(g, rows, cols);
            let acc = accum(grads, *x, g.len());
            acc.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
        }
        Op::Reshape(x) | Op::BroadcastTo(x) => {
            let tx = val(*x);
            if matches!(nodes[i].op, Op::Reshape(_)) {
                let acc = accum(grads, *x, g.len());
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            } else {
                reduce_broadcast_grad(grads, *x, tx.shape(), out_shape, g, |_, _| 1.0);
            }
        }
        Op::Reduce {
            x,
            axis,
            kind,
            argmax,
        } => {
            let tx = val(*x);
            let (outer, len, inner) = split_axis(tx.dims(), *axis);
            let acc = accum(grads, *x, tx.numel());
            match kind {
                Reduction::Sum | Reduction::Mean => {
                    let f = if *kind == Reduction::Mean { 1.0 / len as f64 } else { 1.0 };
                    for o in 0..outer {
                        let go = &g[o * inner..(o + 1) * inner];
                        for j in 0..len {
                            let dst = &mut acc[(o * len + j) * inner..(o * len + j + 1) * inner];
                            dst.iter_mut().zip(go).for_each(|(a, b)| *a += b * f);
                        }
                    }
                }
                Reduction::Max => {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let j = argmax[o * inner + ii];
                            acc[(o * len + j) * inner + ii] += g[o * inner + ii];
                        }
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(out_shape.dims(), *axis);
            let mut off = 0;
            for p in parts {
                let len = val(*p).dims()[*axis];
                if rg(*p) {
                    let acc = accum(grads, *p, val(*p).numel());
                    for o in 0..outer {
                        let s = (o * total + off) * inner;
                        let dst = &mut acc[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(&g[s..s + len * inner]).for_each(|(a, b)| *a += b);
                    }
                }
                off += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let tx = val(*x);
            let (outer, full, inner) = split_axis(tx.dims(), *axis);
            let len = out_shape.dims()[*axis];
            let acc = accum(grads, *x, tx.numel());
            for o in 0..outer {
                let s = (o * full + start) * inner;
                let src = &g[o * len * inner..(o + 1) * len * inner];
                acc[s..s + len * inner].iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
        }
        Op::RowStochastic(u) => {
            let cols = val(*u).dims()[1];
            let acc = accum(grads, *u, g.len());
            for (arow, grow) in acc.chunks_mut(cols).zip(g.chunks(cols)) {
                let mean = grow.iter().sum::<f64>() / cols as f64;
                arow.iter_mut().zip(grow).for_each(|(a, gi)| *a += gi - mean);
            }
        }
        Op::Clip { q, k, o, alpha, eps } => {
            let (tq, tk) = (val(*q), val(*k));
            let to = o.map(|o| val(o));
            let layout = ClipLayout::new(tq, tk, to).expect("checked in forward");
            let (dq, dk) = (tq.data(), tk.data());
            let d_o = to.map(|t| t.data());
            let mut gq = vec![0.0; tq.numel()];
            let mut gk = vec![0.0; tk.numel()];
            let mut go = vec![0.0; to.map_or(0, |t| t.numel())];
            for c in 0..layout.channels {
                for p in 0..layout.points {
                    let qi = (c * layout.points + p) * 3;
                    let ki = layout.k_index(c, p);
                    let oi = layout.o_index(c, p);
                    let ov = d_o.map_or([0.0; 3], |d| v3(d, oi));
                    let (a, b, cc) = kernels::clip_backward(v3(dq, qi), v3(dk, ki), ov, *alpha, *eps, v3(g, qi));
                    for j in 0..3 {
                        gq[qi + j] += a[j];
                        gk[ki + j] += b[j];
                        if !go.is_empty() {
                            go[oi + j] += cc[j];
                        }
                    }
                }
            }
            for (var, buf) in [(Some(*q), gq), (Some(*k), gk), (*o, go)] {
                if let Some(var) = var {
                    if rg(var) {
                        let acc = accum(grads, var, buf.len());
                        acc.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
        Op::FrameProject { z, frame } => {
            let (tz, tf) = (val(*z), val(*frame));
            let (c, p) = vec_layout(tz).expect("checked in forward");
            let (dz, df) = (tz.data(), tf.data());
            if rg(*z) {
                let acc = accum(grads, *z, tz.numel());
                for ci in 0..c {
                    for pi in 0..p {
                        let zi = (ci * p + pi) * 3;
                        for j in 0..3 {
                            let gj = g[zi + j];
                            let fi = (j * p + pi) * 3;
                            for m in 0..3 {
                                acc[zi + m] += gj * df[fi + m];
                            }
                        }
                    }
                }
            }
            if rg(*frame) {
                let acc = accum(grads, *frame, tf.numel());
                for ci in 0..c {
                    for pi in 0..p {
                        let zi = (ci * p + pi) * 3;
                        for j in 0..3 {
                            let gj = g[zi + j];
                            let fi = (j * p + pi) * 3;
                            for m in 0..3 {
                                acc[fi + m] += gj * dz[zi + m];
                            }
                        }
                    }
                }
            }
        }
        Op::NormScale {
            x,
            gamma,
            denom,
            norms,
            batch_stats,
        } => {
            let (tx, tg) = (val(*x), val(*gamma));
            let (c, n) = (tx.dims()[0], tx.dims()[1]);
            let (src, gam) = (tx.data(), tg.data());
            // <G, x> per channel
            let gx: Vec<f64> = (0..c)
                .map(|ch| {
                    let r = ch * n * 3..(ch + 1) * n * 3;
                    g[r.clone()].iter().zip(&src[r]).map(|(a, b)| a * b).sum()
                })
                .collect();
            if rg(*gamma) {
                let acc = accum(grads, *gamma, c);
                for ch in 0..c {
                    acc[ch] += gx[ch] / denom[ch];
                }
            }
            if rg(*x) {
                let acc = accum(grads, *x, src.len());
                for ch in 0..c {
                    let f = gam[ch] / denom[ch];
                    let through_mean = if *batch_stats {
                        -gx[ch] * gam[ch] / (denom[ch] * denom[ch] * n as f64)
                    } else {
                        0.0
                    };
                    for p in 0..n {
                        let i = (ch * n + p) * 3;
                        let radial = through_mean / norms[ch * n + p];
                        for m in 0..3 {
                            acc[i + m] += f * g[i + m] + radial * src[i + m];
                        }
                    }
                }
            }
        }
        Op::FrameMax { z, frame, argmax } => {
            let (tz, tf) = (val(*z), val(*frame));
            let n = tz.dims()[1];
            let (zs, fs) = (tz.data(), tf.data());
            if rg(*z) {
                let acc = accum(grads, *z, zs.len());
                for (o, &p) in argmax.iter().enumerate() {
                    let (ch, j) = (o / 3, o % 3);
                    let (zi, fi) = ((ch * n + p) * 3, (j * n + p) * 3);
                    for m in 0..3 {
                        acc[zi + m] += g[o] * fs[fi + m];
                    }
                }
            }
            if rg(*frame) {
                let acc = accum(grads, *frame, fs.len());
                for (o, &p) in argmax.iter().enumerate() {
                    let (ch, j) = (o / 3, o % 3);
                    let (zi, fi) = ((ch * n + p) * 3, (j * n + p) * 3);
                    for m in 0..3 {
                        acc[fi + m] += g[o] * zs[zi + m];
                    }
                }
            }
        }
        Op::GatherMean { x, index, group } => {
            let tx = val(*x);
            let row = tx.numel() / tx.dims()[0].max(1);
            let inv = 1.0 / *group as f64;
            let acc = accum(grads, *x, tx.numel());
            for (i, gi) in g.chunks(row.max(1)).enumerate().take(index.len() / group) {
                for &r in &index[i * group..(i + 1) * group] {
                    acc[r * row..(r + 1) * row].iter_mut().zip(gi).for_each(|(a, b)| *a += b * inv);
                }
            }
        }
        Op::Chamfer { x, y, nn_xy, nn_yx } => {
            let (tx, ty) = (val(*x), val(*y));
            let (dx, dy) = (tx.data(), ty.data());
            let (n, m) = (nn_xy.len(), nn_yx.len());
            let mut gx = vec![0.0; dx.len()];
            let mut gy = vec![0.0; dy.len()];
            for (a, &b) in nn_xy.iter().enumerate() {
                for j in 0..3 {
                    let d = 2.0 * g[0] * (dx[a * 3 + j] - dy[b * 3 + j]) / n as f64;
                    gx[a * 3 + j] += d;
                    gy[b * 3 + j] -= d;
                }
            }
            for (b, &a) in nn_yx.iter().enumerate() {
                for j in 0..3 {
                    let d = 2.0 * g[0] * (dy[b * 3 + j] - dx[a * 3 + j]) / m as f64;
                    gy[b * 3 + j] += d;
                    gx[a * 3 + j] -= d;
                }
            }
            for (var, buf) in [(*x, gx), (*y, gy)] {
                if rg(var) {
                    let acc = accum(grads, var, buf.len());
                    acc.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
}
