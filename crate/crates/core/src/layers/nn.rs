//! Trainable layers recorded on a [`Tape`], over channel-major `C×N×3`
//! features.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::contract::Contract;
use super::func::{uniform_init, BATCHNORM_EPS, DEFAULT_ALPHA, DIRECTION_EPS};
use crate::error::{contract_err, dim_err, Result};
use crate::tensor::kernels::{dot, sub};
use crate::tensor::{Reduction, Tape, Tensor, Var};

/// Index of a trainable tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a non-trainable state tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Named {
    pub name: String,
    pub value: Tensor,
}

/// Named parameters and buffers of a model, in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Named>,
    buffers: Vec<Named>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn check_name(&self, name: &str) -> Result<()> {
        if self.params.iter().chain(&self.buffers).any(|p| p.name == name) {
            return Err(contract_err("param_store", format!("duplicate name {name}")));
        }
        Ok(())
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        self.check_name(&name)?;
        self.params.push(Named { name, value });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<BufferId> {
        let name = name.into();
        self.check_name(&name)?;
        self.buffers.push(Named { name, value });
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].value
    }

    pub fn params(&self) -> &[Named] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Named] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Named] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Named] {
        &mut self.buffers
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Batch-norm behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Normalize with statistics of the current cloud.
    #[default]
    Train,
    /// Normalize with running statistics.
    Eval,
}

/// Multiplier applied to row-stochastic weights of a layer under
/// deliberate corruption, breaking the row-sum constraint.
pub const CORRUPTION_SCALE: f64 = 1.5;

/// Forward-pass context: the tape, lazily bound parameters, and batch-norm
/// statistics gathered along the way.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    track: bool,
    mode: Mode,
    record_stats: bool,
    stats: Vec<(BufferId, Tensor)>,
    corrupt: Option<String>,
}

impl<'a> Ctx<'a> {
    /// `track` decides whether bound parameters require gradients.
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode, track: bool) -> Self {
        Ctx {
            tape,
            store,
            bound: vec![None; store.params.len()],
            track,
            mode,
            record_stats: false,
            stats: Vec::new(),
            corrupt: None,
        }
    }

    /// Break the row-sum constraint of the layer called `name`.
    pub fn corrupt(&mut self, name: impl Into<String>) {
        self.corrupt = Some(name.into());
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Whether batch-norm layers in train mode report updated running
    /// statistics.
    pub fn set_record_stats(&mut self, on: bool) {
        self.record_stats = on;
    }

    pub fn take_stats(&mut self) -> Vec<(BufferId, Tensor)> {
        core::mem::take(&mut self.stats)
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let v = self.tape.leaf(self.store.param(id).clone(), self.track)?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    /// Parameters touched so far with their tape handles.
    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().enumerate().filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    fn weight(&mut self, id: ParamId, layer: &str, stochastic: bool) -> Result<Var> {
        let u = self.param(id)?;
        if !stochastic {
            return Ok(u);
        }
        let w = self.tape.row_stochastic(u)?;
        if self.corrupt.as_deref() == Some(layer) {
            return self.tape.scale(w, CORRUPTION_SCALE);
        }
        Ok(w)
    }
}

/// Options of the fused linear + leaky nonlinearity blocks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NonlinearityConfig {
    pub alpha: f64,
    /// One direction (and origin) map shared by all output channels, or
    /// one per output channel.
    pub shared_direction: bool,
}

impl Default for NonlinearityConfig {
    fn default() -> Self {
        NonlinearityConfig {
            alpha: DEFAULT_ALPHA,
            shared_direction: true,
        }
    }
}

/// Registered layer kinds; every kind has a declared contract.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    VntLinear,
    VnLinear,
    VntLinearLeakyRelu,
    VnLinearLeakyRelu,
    VntMaxPool,
    MeanPool,
    TranslationInvariant,
    RotationInvariant,
    VnBatchNorm,
    PoolConcat,
}

impl LayerKind {
    pub const ALL: [LayerKind; 10] = [
        LayerKind::VntLinear,
        LayerKind::VnLinear,
        LayerKind::VntLinearLeakyRelu,
        LayerKind::VnLinearLeakyRelu,
        LayerKind::VntMaxPool,
        LayerKind::MeanPool,
        LayerKind::TranslationInvariant,
        LayerKind::RotationInvariant,
        LayerKind::VnBatchNorm,
        LayerKind::PoolConcat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::VntLinear => "vnt_linear",
            LayerKind::VnLinear => "vn_linear",
            LayerKind::VntLinearLeakyRelu => "vnt_linear_leaky_relu",
            LayerKind::VnLinearLeakyRelu => "vn_linear_leaky_relu",
            LayerKind::VntMaxPool => "vnt_maxpool",
            LayerKind::MeanPool => "mean_pool",
            LayerKind::TranslationInvariant => "translation_invariant",
            LayerKind::RotationInvariant => "rotation_invariant",
            LayerKind::VnBatchNorm => "vn_batchnorm",
            LayerKind::PoolConcat => "pool_concat",
        }
    }

    pub fn from_name(name: &str) -> Option<LayerKind> {
        LayerKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum LayerOp {
    Linear { w: ParamId, stochastic: bool },
    LeakyRelu {
        q: ParamId,
        k: ParamId,
        o: Option<ParamId>,
        alpha: f64,
    },
    MaxPool { k: ParamId, o: ParamId },
    MeanPool,
    TranslationInvariant { head: ParamId },
    RotationInvariant { frame: Vec<Layer> },
    BatchNorm {
        gamma: ParamId,
        running: BufferId,
        momentum: f64,
    },
    PoolConcat { net: Vec<Layer> },
}

/// A layer over `C×N×3` vector features.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    name: String,
    kind: LayerKind,
    cin: usize,
    cout: usize,
    contract: Contract,
    op: LayerOp,
}

/// Floor added to squared norms so the norm stays differentiable at zero.
const NORM_FLOOR: f64 = 1e-24;

impl Layer {
    fn leaf(name: &str, kind: LayerKind, cin: usize, cout: usize, op: LayerOp) -> Layer {
        let contract = match kind {
            LayerKind::VntLinear
            | LayerKind::VntLinearLeakyRelu
            | LayerKind::VntMaxPool
            | LayerKind::MeanPool => Contract::Se3Equivariant,
            LayerKind::VnLinear | LayerKind::VnLinearLeakyRelu => Contract::So3Equivariant,
            LayerKind::TranslationInvariant => Contract::TranslationInvariant,
            // norms ignore rotation; a translation changes them
            LayerKind::VnBatchNorm => Contract::So3Equivariant,
            LayerKind::RotationInvariant => Contract::RotationInvariant,
            LayerKind::PoolConcat => unreachable!("composite"),
        };
        Layer {
            name: name.into(),
            kind,
            cin,
            cout,
            contract,
            op,
        }
    }

    fn linear<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        stochastic: bool,
        rng: &mut R,
    ) -> Result<Layer> {
        let w = store.add(format!("{name}.w"), uniform_init(cout, cin, rng)?)?;
        let kind = if stochastic { LayerKind::VntLinear } else { LayerKind::VnLinear };
        Ok(Layer::leaf(name, kind, cin, cout, LayerOp::Linear { w, stochastic }))
    }

    /// `W·V` with row-stochastic `W`.
    pub fn vnt_linear<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Result<Layer> {
        Layer::linear(store, name, cin, cout, true, rng)
    }

    /// `W·V` with unconstrained `W`.
    pub fn vn_linear<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Result<Layer> {
        Layer::linear(store, name, cin, cout, false, rng)
    }

    fn leaky<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        cfg: NonlinearityConfig,
        with_origin: bool,
        rng: &mut R,
    ) -> Result<Layer> {
        if !(0.0..1.0).contains(&cfg.alpha) {
            return Err(contract_err("leaky_relu", format!("slope {} outside [0, 1)", cfg.alpha)));
        }
        let dir_rows = if cfg.shared_direction { 1 } else { cout };
        let q = store.add(format!("{name}.q"), uniform_init(cout, cin, rng)?)?;
        let k = store.add(format!("{name}.k"), uniform_init(dir_rows, cin, rng)?)?;
        let o = if with_origin {
            Some(store.add(format!("{name}.o"), uniform_init(dir_rows, cin, rng)?)?)
        } else {
            None
        };
        let kind = if with_origin {
            LayerKind::VntLinearLeakyRelu
        } else {
            LayerKind::VnLinearLeakyRelu
        };
        Ok(Layer::leaf(name, kind, cin, cout, LayerOp::LeakyRelu { q, k, o, alpha: cfg.alpha }))
    }

    /// Feature map `Q`, then clipping against direction `K·V` about origin
    /// `O·V`, all row-stochastic.
    pub fn vnt_linear_leaky_relu<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        cfg: NonlinearityConfig,
        rng: &mut R,
    ) -> Result<Layer> {
        Layer::leaky(store, name, cin, cout, cfg, true, rng)
    }

    /// Feature map `Q`, then clipping against direction `K·V` about the
    /// origin; weights unconstrained.
    pub fn vn_linear_leaky_relu<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        cfg: NonlinearityConfig,
        rng: &mut R,
    ) -> Result<Layer> {
        Layer::leaky(store, name, cin, cout, cfg, false, rng)
    }

    pub fn vnt_maxpool<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Result<Layer> {
        let k = store.add(format!("{name}.k"), uniform_init(channels, channels, rng)?)?;
        let o = store.add(format!("{name}.o"), uniform_init(channels, channels, rng)?)?;
        Ok(Layer::leaf(name, LayerKind::VntMaxPool, channels, channels, LayerOp::MaxPool { k, o }))
    }

    pub fn mean_pool(name: &str, channels: usize) -> Layer {
        Layer::leaf(name, LayerKind::MeanPool, channels, channels, LayerOp::MeanPool)
    }

    /// Subtract a one-channel row-stochastic combination from every channel.
    pub fn translation_invariant<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Result<Layer> {
        let head = store.add(format!("{name}.head"), uniform_init(1, channels, rng)?)?;
        Ok(Layer::leaf(
            name,
            LayerKind::TranslationInvariant,
            channels,
            channels,
            LayerOp::TranslationInvariant { head },
        ))
    }

    /// Inner products of every channel with a three-vector frame computed
    /// from the same features by `frame`.
    pub fn rotation_invariant(name: &str, frame: Vec<Layer>) -> Result<Layer> {
        let cin = frame.first().map(Layer::in_channels).ok_or_else(|| {
            contract_err("rotation_invariant", "frame network is empty")
        })?;
        let c = check_stack(&frame, "rotation_invariant")?;
        if frame.last().map(Layer::out_channels) != Some(3) {
            return Err(dim_err("rotation_invariant", "frame network must end with 3 channels"));
        }
        if c.output_action() == super::contract::OutputAction::Fixed {
            return Err(contract_err("rotation_invariant", "frame must rotate with its input"));
        }
        Ok(Layer::leaf(name, LayerKind::RotationInvariant, cin, cin, LayerOp::RotationInvariant { frame }))
    }

    /// Rescale each channel to mean vector norm `gamma`.
    pub fn vn_batchnorm(store: &mut ParamStore, name: &str, channels: usize, momentum: f64) -> Result<Layer> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(contract_err("vn_batchnorm", "momentum outside [0, 1]"));
        }
        let gamma = store.add(format!("{name}.gamma"), Tensor::new(&[channels, 1], vec![1.0; channels])?)?;
        let running = store.add_buffer(format!("{name}.running_norm"), Tensor::new(&[channels, 1], vec![1.0; channels])?)?;
        Ok(Layer::leaf(
            name,
            LayerKind::VnBatchNorm,
            channels,
            channels,
            LayerOp::BatchNorm {
                gamma,
                running,
                momentum,
            },
        ))
    }

    /// Append `net(meanpool(V))`, broadcast over points, to the channels of
    /// `V`. An empty `net` appends the mean itself.
    pub fn pool_concat(name: &str, channels: usize, net: Vec<Layer>) -> Result<Layer> {
        let mut inner = Contract::Se3Equivariant;
        let mut c = channels;
        for l in &net {
            if l.in_channels() != c {
                return Err(dim_err("pool_concat", format!("layer {} expects {} channels, got {c}", l.name, l.cin)));
            }
            inner = inner.then(l.contract);
            c = l.out_channels();
        }
        let contract = Contract::Se3Equivariant.meet(inner).ok_or_else(|| {
            contract_err("pool_concat", "pooled branch must transform like the features")
        })?;
        Ok(Layer {
            name: name.into(),
            kind: LayerKind::PoolConcat,
            cin: channels,
            cout: channels + c,
            contract,
            op: LayerOp::PoolConcat { net },
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn contract(&self) -> Contract {
        self.contract
    }

    pub fn in_channels(&self) -> usize {
        self.cin
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    /// Layers nested inside composites, depth first, including `self`.
    pub fn walk<'s>(&'s self, out: &mut Vec<&'s Layer>) {
        out.push(self);
        match &self.op {
            LayerOp::RotationInvariant { frame: sub } | LayerOp::PoolConcat { net: sub } => {
                sub.iter().for_each(|l| l.walk(out))
            }
            _ => {}
        }
    }

    /// One line per layer (nested layers indented): kind, name, channels.
    pub fn describe(&self, depth: usize, out: &mut String) {
        for _ in 0..depth {
            out.push_str("  ");
        }
        out.push_str(&format!("{} {} {}->{}", self.kind.name(), self.name, self.cin, self.cout));
        if let LayerOp::LeakyRelu { alpha, .. } = self.op {
            out.push_str(&format!(" alpha={alpha}"));
        }
        out.push('\n');
        match &self.op {
            LayerOp::RotationInvariant { frame: sub } | LayerOp::PoolConcat { net: sub } => {
                sub.iter().for_each(|l| l.describe(depth + 1, out))
            }
            _ => {}
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let f = self.forward_features(ctx, Features::Dense(x))?;
        f.materialize(ctx)
    }

    /// Like [`Layer::forward`], keeping the output of a pool-concat layer
    /// factored so the next linear map can act on the pooled channels once.
    pub fn forward_features(&self, ctx: &mut Ctx<'_>, f: Features) -> Result<Features> {
        let (channels, n) = f.extents(ctx)?;
        if channels != self.cin {
            return Err(dim_err(
                "layer",
                format!("{} expects {} channels, got {channels}", self.name, self.cin),
            ));
        }
        match &self.op {
            LayerOp::Linear { w, stochastic } => {
                let w = ctx.weight(*w, &self.name, *stochastic)?;
                f.mix(ctx, w).map(Features::Dense)
            }
            LayerOp::LeakyRelu { q, k, o, alpha } => {
                let stochastic = o.is_some();
                let wq = ctx.weight(*q, &self.name, stochastic)?;
                let wk = ctx.weight(*k, &self.name, stochastic)?;
                let qv = f.mix(ctx, wq)?;
                let kv = f.mix(ctx, wk)?;
                let ov = match o {
                    Some(o) => {
                        let wo = ctx.weight(*o, &self.name, true)?;
                        Some(f.mix(ctx, wo)?)
                    }
                    None => None,
                };
                ctx.tape.vn_clip(qv, kv, ov, *alpha, DIRECTION_EPS).map(Features::Dense)
            }
            LayerOp::PoolConcat { net } => {
                let x = f.materialize(ctx)?;
                let pooled = ctx.tape.reduce(x, 1, Reduction::Mean, true)?;
                let g = run_stack(net, ctx, pooled)?;
                Ok(Features::Pooled { x, g })
            }
            _ => {
                let x = f.materialize(ctx)?;
                self.forward_dense(ctx, x, n).map(Features::Dense)
            }
        }
    }

    fn forward_dense(&self, ctx: &mut Ctx<'_>, x: Var, n: usize) -> Result<Var> {
        match &self.op {
            LayerOp::Linear { .. } | LayerOp::LeakyRelu { .. } | LayerOp::PoolConcat { .. } => {
                unreachable!("handled by forward_features")
            }
            LayerOp::MaxPool { k, o } => {
                let wk = ctx.weight(*k, &self.name, true)?;
                let wo = ctx.weight(*o, &self.name, true)?;
                let kv = ctx.tape.channel_mix(wk, x)?;
                let ov = ctx.tape.channel_mix(wo, x)?;
                let (xv, kd, od) = (ctx.tape.value(x).data(), ctx.tape.value(kv).data(), ctx.tape.value(ov).data());
                let at = |d: &[f64], i: usize| [d[i], d[i + 1], d[i + 2]];
                let mut index = Vec::with_capacity(self.cin);
                for c in 0..self.cin {
                    let mut best = (0, f64::NEG_INFINITY);
                    for p in 0..n {
                        let i = (c * n + p) * 3;
                        let s = dot(sub(at(xv, i), at(od, i)), sub(at(kd, i), at(od, i)));
                        if s > best.1 {
                            best = (p, s);
                        }
                    }
                    index.push(c * n + best.0);
                }
                let flat = ctx.tape.reshape(x, &[self.cin * n, 3])?;
                let picked = ctx.tape.gather_mean(flat, &index, 1)?;
                ctx.tape.reshape(picked, &[self.cin, 1, 3])
            }
            LayerOp::MeanPool => ctx.tape.reduce(x, 1, Reduction::Mean, true),
            LayerOp::TranslationInvariant { .. } => Ok(self.translation_parts(ctx, x)?.0),
            LayerOp::RotationInvariant { frame } => {
                let f = run_stack(frame, ctx, x)?;
                ctx.tape.frame_project(x, f)
            }
            LayerOp::BatchNorm {
                gamma,
                running,
                momentum,
            } => {
                let g = ctx.param(*gamma)?;
                let stored = ctx.store.buffer(*running).data();
                let fixed = (ctx.mode == Mode::Eval).then_some(stored);
                let (out, means) = ctx.tape.norm_scale(x, g, fixed, BATCHNORM_EPS, NORM_FLOOR)?;
                if ctx.mode == Mode::Train && ctx.record_stats {
                    let new: Vec<f64> = stored
                        .iter()
                        .zip(&means)
                        .map(|(r, m)| momentum * r + (1.0 - momentum) * m)
                        .collect();
                    ctx.stats.push((*running, Tensor::new(&[self.cin, 1], new)?));
                }
                Ok(out)
            }
        }
    }

    /// For a rotation-invariant layer, the per-dimension maximum over points
    /// of its output, flattened channel-major to `C·3` values.
    pub fn invariant_max(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let LayerOp::RotationInvariant { frame } = &self.op else {
            return Err(contract_err("invariant_max", format!("{} is a {}", self.name, self.kind.name())));
        };
        let f = run_stack(frame, ctx, x)?;
        ctx.tape.frame_max(x, f)
    }

    /// [`Layer::invariant_max`] given both the explicit features `z` and
    /// the same features `x`, possibly factored.
    pub fn invariant_max_features(&self, ctx: &mut Ctx<'_>, z: Var, x: Features) -> Result<Var> {
        let LayerOp::RotationInvariant { frame } = &self.op else {
            return Err(contract_err("invariant_max", format!("{} is a {}", self.name, self.kind.name())));
        };
        let f = run_stack_features(frame, ctx, x)?.materialize(ctx)?;
        ctx.tape.frame_max(z, f)
    }

    /// For a translation-invariance layer, `(V - H·V, H·V)` where `H·V` is
    /// the one-channel row-stochastic combination being subtracted.
    pub fn translation_parts(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<(Var, Var)> {
        let LayerOp::TranslationInvariant { head } = self.op else {
            return Err(contract_err("translation_parts", format!("{} is a {}", self.name, self.kind.name())));
        };
        let w = ctx.weight(head, &self.name, true)?;
        let pooled = ctx.tape.channel_mix(w, x)?;
        let out = ctx.tape.sub(x, pooled)?;
        Ok((out, pooled))
    }
}

/// Validate channel chaining and fold the contracts of a stack.
pub fn check_stack(layers: &[Layer], what: &'static str) -> Result<Contract> {
    let mut contract = Contract::Se3Equivariant;
    for pair in layers.windows(2) {
        if pair[0].out_channels() != pair[1].in_channels() {
            return Err(dim_err(
                what,
                format!("{} emits {} channels, {} expects {}", pair[0].name, pair[0].cout, pair[1].name, pair[1].cin),
            ));
        }
    }
    for l in layers {
        contract = contract.then(l.contract());
    }
    Ok(contract)
}

/// Apply `layers` in order.
pub fn run_stack(layers: &[Layer], ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
    run_stack_features(layers, ctx, Features::Dense(x))?.materialize(ctx)
}

pub fn run_stack_features(layers: &[Layer], ctx: &mut Ctx<'_>, mut x: Features) -> Result<Features> {
    for l in layers {
        x = l.forward_features(ctx, x)?;
    }
    Ok(x)
}

/// Vector features between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Features {
    /// `C×N×3`.
    Dense(Var),
    /// Channels of `x` (`C×N×3`) followed by those of `g` (`C'×1×3`)
    /// repeated at every point.
    Pooled { x: Var, g: Var },
}

impl Features {
    /// `(channels, points)`.
    fn extents(&self, ctx: &Ctx<'_>) -> Result<(usize, usize)> {
        let check = |v: Var| -> Result<(usize, usize)> {
            let d = ctx.tape.value(v).dims();
            if d.len() != 3 || d[2] != 3 {
                return Err(dim_err("layer", format!("expected C×N×3 features, got {d:?}")));
            }
            Ok((d[0], d[1]))
        };
        match *self {
            Features::Dense(x) => check(x),
            Features::Pooled { x, g } => {
                let (c, n) = check(x)?;
                let (cg, one) = check(g)?;
                if one != 1 {
                    return Err(dim_err("layer", "pooled channels must have one point"));
                }
                Ok((c + cg, n))
            }
        }
    }

    /// The explicit `C×N×3` tensor.
    pub fn materialize(self, ctx: &mut Ctx<'_>) -> Result<Var> {
        match self {
            Features::Dense(x) => Ok(x),
            Features::Pooled { x, g } => {
                let d = ctx.tape.value(x).dims().to_vec();
                let cg = ctx.tape.value(g).dims()[0];
                let b = ctx.tape.broadcast_to(g, &[cg, d[1], 3])?;
                ctx.tape.concat(&[x, b], 0)
            }
        }
    }

    /// `W·V` over channels.
    fn mix(&self, ctx: &mut Ctx<'_>, w: Var) -> Result<Var> {
        match *self {
            Features::Dense(x) => ctx.tape.channel_mix(w, x),
            Features::Pooled { x, g } => {
                let c = ctx.tape.value(x).dims()[0];
                let cg = ctx.tape.value(g).dims()[0];
                let w1 = ctx.tape.slice(w, 1, 0, c)?;
                let w2 = ctx.tape.slice(w, 1, c, cg)?;
                let a = ctx.tape.channel_mix(w1, x)?;
                let b = ctx.tape.channel_mix(w2, g)?;
                ctx.tape.add(a, b)
            }
        }
    }
}
