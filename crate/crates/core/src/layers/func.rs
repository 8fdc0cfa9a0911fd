//! Layer math on plain vectors, without gradient tracking.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{contract_err, dim_err, Result};
use crate::tensor::kernels::{self, dot, sub, V3};
use crate::tensor::tape::row_stochastic_data;
use crate::tensor::Tensor;

/// Added to `|k - o|` before normalizing the clipping direction.
pub const DIRECTION_EPS: f64 = 1e-8;

/// Default negative slope of the leaky nonlinearities.
pub const DEFAULT_ALPHA: f64 = 0.2;

/// One vector neuron per channel: a `C×3` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorFeature {
    rows: Vec<V3>,
}

impl VectorFeature {
    pub fn new(rows: Vec<V3>) -> Result<Self> {
        if rows.is_empty() {
            return Err(contract_err("vector_feature", "need at least one channel"));
        }
        Ok(VectorFeature { rows })
    }

    pub fn channels(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[V3] {
        &self.rows
    }

    /// Every row mapped through `v·R + T`.
    pub fn map(&self, f: impl Fn(V3) -> V3) -> VectorFeature {
        VectorFeature {
            rows: self.rows.iter().map(|r| f(*r)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &VectorFeature) -> f64 {
        max_abs_diff(&self.rows, &other.rows)
    }
}

/// Per-point vector features, `N×C×3`, point-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorFeatureSet {
    points: usize,
    channels: usize,
    data: Vec<V3>,
}

impl VectorFeatureSet {
    pub fn new(features: Vec<VectorFeature>) -> Result<Self> {
        let channels = features.first().map(VectorFeature::channels).ok_or_else(|| {
            contract_err("vector_feature_set", "need at least one point")
        })?;
        if features.iter().any(|f| f.channels() != channels) {
            return Err(dim_err("vector_feature_set", "channel counts differ between points"));
        }
        Ok(VectorFeatureSet {
            points: features.len(),
            channels,
            data: features.into_iter().flat_map(|f| f.rows).collect(),
        })
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn get(&self, n: usize, c: usize) -> V3 {
        self.data[n * self.channels + c]
    }

    pub fn feature(&self, n: usize) -> VectorFeature {
        VectorFeature {
            rows: self.data[n * self.channels..(n + 1) * self.channels].to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(V3) -> V3) -> VectorFeatureSet {
        VectorFeatureSet {
            data: self.data.iter().map(|v| f(*v)).collect(),
            ..*self
        }
    }

    /// Channel-major `C×N×3` tensor, the layout used on the tape.
    pub fn to_tensor(&self) -> Tensor {
        let (n, c) = (self.points, self.channels);
        let mut out = vec![0.0; n * c * 3];
        for p in 0..n {
            for ch in 0..c {
                out[(ch * n + p) * 3..(ch * n + p) * 3 + 3].copy_from_slice(&self.get(p, ch));
            }
        }
        Tensor::new(&[c, n, 3], out).expect("extents match")
    }

    /// Inverse of [`VectorFeatureSet::to_tensor`].
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let d = t.dims();
        if d.len() != 3 || d[2] != 3 || d[0] == 0 || d[1] == 0 {
            return Err(dim_err("vector_feature_set", format!("expected C×N×3, got {:?}", t.shape())));
        }
        let (c, n) = (d[0], d[1]);
        let src = t.data();
        let mut data = Vec::with_capacity(n * c);
        for p in 0..n {
            for ch in 0..c {
                let i = (ch * n + p) * 3;
                data.push([src[i], src[i + 1], src[i + 2]]);
            }
        }
        Ok(VectorFeatureSet {
            points: n,
            channels: c,
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &VectorFeatureSet) -> f64 {
        max_abs_diff(&self.data, &other.data)
    }
}

fn max_abs_diff(a: &[V3], b: &[V3]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| (0..3).map(move |i| libm::fabs(x[i] - y[i])))
        .fold(0.0, f64::max)
}

/// Weights whose rows each sum to one, stored as a free matrix `U` and
/// evaluated as `W = U + (1 - rowsum(U)) / C`.
#[derive(Clone, Debug, PartialEq)]
pub struct RowStochasticWeights {
    free: Tensor,
}

impl RowStochasticWeights {
    pub fn from_free(free: Tensor) -> Result<Self> {
        if free.shape().rank() != 2 || free.dims()[1] == 0 {
            return Err(dim_err("row_stochastic", format!("expected C'×C, got {:?}", free.shape())));
        }
        Ok(RowStochasticWeights { free })
    }

    /// Free matrix drawn uniformly from `±1/sqrt(C)`.
    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Self> {
        Self::from_free(uniform_init(rows, cols, rng)?)
    }

    pub fn free(&self) -> &Tensor {
        &self.free
    }

    pub fn rows(&self) -> usize {
        self.free.dims()[0]
    }

    pub fn cols(&self) -> usize {
        self.free.dims()[1]
    }

    pub fn effective(&self) -> Tensor {
        let data = row_stochastic_data(self.free.data(), self.cols());
        Tensor::new(self.free.dims(), data).expect("same extents")
    }
}

/// `rows×cols` matrix with entries uniform in `±1/sqrt(cols)`.
pub fn uniform_init<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Tensor> {
    if rows == 0 || cols == 0 {
        return Err(dim_err("init", format!("empty weight {rows}×{cols}")));
    }
    let bound = 1.0 / libm::sqrt(cols as f64);
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(&[rows, cols], data)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(contract_err("leaky_relu", format!("slope {alpha} outside [0, 1)")));
    }
    Ok(())
}

/// Clip `q` to the half-space in front of the plane through `o` with normal
/// `k - o`.
pub fn vnt_relu(q: V3, k: V3, o: V3) -> V3 {
    kernels::clip_forward(q, k, o, 0.0, DIRECTION_EPS)
}

/// `alpha·q + (1 - alpha)·vnt_relu(q, k, o)`.
pub fn vnt_leaky_relu(q: V3, k: V3, o: V3, alpha: f64) -> Result<V3> {
    check_alpha(alpha)?;
    Ok(kernels::clip_forward(q, k, o, alpha, DIRECTION_EPS))
}

/// Rotation-only variant: the plane passes through the origin.
pub fn vn_relu(q: V3, k: V3) -> V3 {
    vnt_relu(q, k, [0.0; 3])
}

pub fn vn_leaky_relu(q: V3, k: V3, alpha: f64) -> Result<V3> {
    vnt_leaky_relu(q, k, [0.0; 3], alpha)
}

fn mix(w: &Tensor, v: &VectorFeature, op: &'static str) -> Result<VectorFeature> {
    if w.shape().rank() != 2 || w.dims()[1] != v.channels() {
        return Err(dim_err(op, format!("weight {:?} vs {} channels", w.shape(), v.channels())));
    }
    let cols = w.dims()[1];
    let rows = w
        .data()
        .chunks_exact(cols)
        .map(|wr| {
            let mut acc = [0.0; 3];
            for (wij, vj) in wr.iter().zip(v.rows()) {
                for m in 0..3 {
                    acc[m] += wij * vj[m];
                }
            }
            acc
        })
        .collect();
    VectorFeature::new(rows)
}

/// `W·V` with row-stochastic `W`.
pub fn vnt_linear(v: &VectorFeature, w: &RowStochasticWeights) -> Result<VectorFeature> {
    mix(&w.effective(), v, "vnt_linear")
}

/// `W·V` with an unconstrained `W`.
pub fn vn_linear(v: &VectorFeature, w: &Tensor) -> Result<VectorFeature> {
    mix(w, v, "vn_linear")
}

/// Output of [`vnt_maxpool`].
#[derive(Clone, Debug, PartialEq)]
pub struct MaxPoolSelection {
    pub feature: VectorFeature,
    /// Selected point per channel.
    pub selected: Vec<usize>,
}

/// Per channel, the feature of the point maximizing
/// `<V_n[c] - (O·V_n)[c], (K·V_n)[c] - (O·V_n)[c]>`; ties go to the
/// smallest point index.
pub fn vnt_maxpool(
    set: &VectorFeatureSet,
    k: &RowStochasticWeights,
    o: &RowStochasticWeights,
) -> Result<MaxPoolSelection> {
    let c = set.channels();
    for w in [k, o] {
        if w.rows() != c || w.cols() != c {
            return Err(dim_err("vnt_maxpool", format!("weights must be {c}×{c}")));
        }
    }
    let (ke, oe) = (k.effective(), o.effective());
    let mut best = vec![(0usize, f64::NEG_INFINITY); c];
    for n in 0..set.points() {
        let v = set.feature(n);
        let kv = vn_linear(&v, &ke)?;
        let ov = vn_linear(&v, &oe)?;
        for ch in 0..c {
            let score = dot(sub(v.rows()[ch], ov.rows()[ch]), sub(kv.rows()[ch], ov.rows()[ch]));
            if score > best[ch].1 {
                best[ch] = (n, score);
            }
        }
    }
    let selected: Vec<usize> = best.iter().map(|b| b.0).collect();
    let rows = selected.iter().enumerate().map(|(ch, &n)| set.get(n, ch)).collect();
    Ok(MaxPoolSelection {
        feature: VectorFeature::new(rows)?,
        selected,
    })
}

/// `set[n] - pooled` for every point; `pooled` has either one channel
/// (subtracted from all channels) or as many channels as `set`.
pub fn translation_invariant(set: &VectorFeatureSet, pooled: &VectorFeature) -> Result<VectorFeatureSet> {
    let pc = pooled.channels();
    if pc != 1 && pc != set.channels() {
        return Err(dim_err(
            "translation_invariant",
            format!("pooled has {pc} channels, features have {}", set.channels()),
        ));
    }
    let mut out = set.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        let p = pooled.rows()[if pc == 1 { 0 } else { i % set.channels }];
        *v = sub(*v, p);
    }
    Ok(out)
}

/// Average over points.
pub fn vn_meanpool(set: &VectorFeatureSet) -> VectorFeature {
    let (n, c) = (set.points(), set.channels());
    let mut rows = vec![[0.0; 3]; c];
    for p in 0..n {
        for (ch, r) in rows.iter_mut().enumerate() {
            let v = set.get(p, ch);
            for m in 0..3 {
                r[m] += v[m] / n as f64;
            }
        }
    }
    VectorFeature { rows }
}

/// Per point, inner products of every channel of `z` with the three frame
/// vectors `frame(z[n])`, flattened channel-major to `C·3` values.
pub fn vn_invariant(
    z: &VectorFeatureSet,
    frame: impl Fn(&VectorFeature) -> Result<VectorFeature>,
) -> Result<Vec<Vec<f64>>> {
    (0..z.points())
        .map(|n| {
            let v = z.feature(n);
            let f = frame(&v)?;
            if f.channels() != 3 {
                return Err(dim_err("vn_invariant", format!("frame has {} channels", f.channels())));
            }
            Ok(v.rows()
                .iter()
                .flat_map(|r| f.rows().iter().map(move |fj| dot(*r, *fj)))
                .collect())
        })
        .collect()
}

/// Added to the mean channel norm before dividing.
pub const BATCHNORM_EPS: f64 = 1e-10;

/// Per-channel mean vector norm over every point of every set in the batch.
pub fn channel_mean_norms(batch: &[VectorFeatureSet]) -> Result<Vec<f64>> {
    let c = batch.first().map(VectorFeatureSet::channels).ok_or_else(|| {
        contract_err("vn_batchnorm", "empty batch")
    })?;
    if batch.iter().any(|s| s.channels() != c) {
        return Err(dim_err("vn_batchnorm", "channel counts differ across the batch"));
    }
    let mut sums = vec![0.0; c];
    let mut count = 0usize;
    for s in batch {
        for p in 0..s.points() {
            for (ch, acc) in sums.iter_mut().enumerate() {
                let v = s.get(p, ch);
                *acc += libm::sqrt(dot(v, v));
            }
        }
        count += s.points();
    }
    Ok(sums.into_iter().map(|s| s / count as f64).collect())
}

/// Rescale each channel so its mean vector norm over the batch becomes
/// `gamma[c]`; directions are untouched.
pub fn vn_batchnorm(batch: &[VectorFeatureSet], gamma: &[f64]) -> Result<Vec<VectorFeatureSet>> {
    let means = channel_mean_norms(batch)?;
    if gamma.len() != means.len() {
        return Err(dim_err("vn_batchnorm", format!("{} scales for {} channels", gamma.len(), means.len())));
    }
    let c = means.len();
    Ok(batch
        .iter()
        .map(|s| {
            let mut out = s.clone();
            for (i, v) in out.data.iter_mut().enumerate() {
                let f = gamma[i % c] / (means[i % c] + BATCHNORM_EPS);
                *v = v.map(|x| x * f);
            }
            out
        })
        .collect())
}
