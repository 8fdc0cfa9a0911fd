//! Shape-pose auto-encoder: an SE(3)-equivariant encoder producing a
//! pose-invariant shape code `Z_s`, a rotation estimate `R̃` and a
//! translation estimate `T̃`, and a patch decoder mapping `Z_s` to a
//! canonical cloud `S̃`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::geometry::{closest_orthonormal_report, neighbor_table, PointCloud, RigidTransform};
use crate::layers::nn::{check_stack, Ctx, Layer, Mode, NonlinearityConfig, ParamId, ParamStore};
use crate::layers::{run_stack, run_stack_features, Contract, Features};
use crate::tensor::linalg::Mat3;
use crate::tensor::{Reduction, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Number of learnable seed sets.
    pub patches: usize,
    /// Width of the hidden layers of each patch network.
    pub hidden: usize,
    pub hidden_layers: usize,
    /// Points in the decoded cloud.
    pub points: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            patches: 10,
            hidden: 256,
            hidden_layers: 3,
            points: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Vector channels of the early layers (64 // 3).
    pub channels: usize,
    /// Channels before the mean-pool concatenation.
    pub wide_channels: usize,
    /// Neighbours averaged into the second input channel.
    pub knn: usize,
    /// Hidden widths of the global feature-transform block.
    pub stn_hidden: Vec<usize>,
    /// Hidden widths of the network producing the invariant frame.
    pub frame_hidden: Vec<usize>,
    pub nonlinearity: NonlinearityConfig,
    pub bn_momentum: f64,
    /// Smallest accepted input cloud.
    pub min_points: usize,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 64 / 3,
            wide_channels: 170,
            knn: 8,
            stn_hidden: vec![170, 85],
            frame_hidden: vec![170, 85],
            nonlinearity: NonlinearityConfig::default(),
            bn_momentum: 0.9,
            min_points: 32,
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Length of the shape code: `2·wide_channels·3`.
    pub fn code_len(&self) -> usize {
        2 * self.wide_channels * 3
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("wide_channels", self.wide_channels),
            ("min_points", self.min_points),
            ("decoder.patches", self.decoder.patches),
            ("decoder.hidden", self.decoder.hidden),
            ("decoder.hidden_layers", self.decoder.hidden_layers),
            ("decoder.points", self.decoder.points),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(contract_err("model_config", format!("{name} must be positive")));
            }
        }
        if self.stn_hidden.iter().chain(&self.frame_hidden).any(|&w| w == 0) {
            return Err(contract_err("model_config", "hidden widths must be positive"));
        }
        if self.decoder.patches > self.decoder.points {
            return Err(contract_err("model_config", "more patches than decoded points"));
        }
        Ok(())
    }
}

struct Patch {
    seeds: ParamId,
    w_seed: ParamId,
    w_code: ParamId,
    b_in: ParamId,
    hidden: Vec<(ParamId, ParamId)>,
    w_out: ParamId,
    b_out: ParamId,
}

/// Encoder outputs on a tape.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    /// SE(3)-equivariant features, `C×N×3`.
    pub x_rt: Var,
    /// One-channel SE(3)-equivariant combination, `1×N×3`.
    pub x_rt_pooled: Var,
    /// Translation-invariant features, `C×N×3`.
    pub y_r: Var,
    /// Rotation-equivariant features after pooling concat, `C'×N×3`.
    pub z_r: Var,
    /// Invariant shape code, flat.
    pub z_s: Var,
    /// Raw rotation estimate, `3×3`.
    pub r: Var,
    /// Translation estimate, `1×3`.
    pub t: Var,
}

/// Encoder, decoder and re-posed reconstruction on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub enc: EncoderVars,
    /// Canonical cloud `S̃`, `M×3`.
    pub shape: Var,
    /// `S̃·R̃ + 1·T̃`, `M×3`.
    pub reconstruction: Var,
}

/// Network outputs for one cloud, as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding {
    pub z_s: Vec<f64>,
    pub r: Mat3,
    pub t: [f64; 3],
}

/// Raw and orthonormalized pose estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseEstimate {
    pub r_raw: Mat3,
    pub t: [f64; 3],
    pub r_hat: Mat3,
    /// Determinant of `r_hat`; `-1` flags a reflection.
    pub det: f64,
}

impl PoseEstimate {
    pub fn transform(&self) -> RigidTransform {
        RigidTransform::new(self.r_hat, self.t)
    }
}

/// Decoded canonical cloud with the patch each point came from.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalShape {
    pub points: PointCloud,
    pub patch_id: Vec<usize>,
}

pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    trunk: Vec<Layer>,
    t_invariant: Layer,
    vn_stack: Vec<Layer>,
    r_invariant: Layer,
    r_head: Layer,
    patches: Vec<Patch>,
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut (impl Rng + ?Sized)) -> Result<Tensor> {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(&[rows, cols], data)
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Model> {
        config.validate()?;
        let mut store = ParamStore::new();
        let s = &mut store;
        let (c, w) = (config.channels, config.wide_channels);
        let nl = config.nonlinearity;
        let trunk = vec![
            Layer::vnt_linear_leaky_relu(s, "enc.vnt1", 3, c, nl, rng)?,
            Layer::vnt_linear_leaky_relu(s, "enc.vnt2", c, c, nl, rng)?,
        ];
        let t_invariant = Layer::translation_invariant(s, "enc.t_inv", c, rng)?;

        let mut stn = Vec::new();
        let mut prev = c;
        for (i, &h) in config.stn_hidden.iter().enumerate() {
            stn.push(Layer::vn_linear_leaky_relu(s, &format!("enc.stn.fc{i}"), prev, h, nl, rng)?);
            prev = h;
        }
        stn.push(Layer::vn_linear(s, "enc.stn.out", prev, c, rng)?);
        let vn_stack = vec![
            Layer::vn_linear_leaky_relu(s, "enc.vn1", c, c, nl, rng)?,
            Layer::pool_concat("enc.stn", c, stn)?,
            Layer::vn_linear_leaky_relu(s, "enc.vn2", 2 * c, 2 * c, nl, rng)?,
            Layer::vn_linear_leaky_relu(s, "enc.vn3", 2 * c, w, nl, rng)?,
            Layer::vn_batchnorm(s, "enc.bn", w, config.bn_momentum)?,
            Layer::pool_concat("enc.pool", w, Vec::new())?,
        ];

        let mut frame = Vec::new();
        let mut prev = 2 * w;
        for (i, &h) in config.frame_hidden.iter().enumerate() {
            frame.push(Layer::vn_linear_leaky_relu(s, &format!("enc.frame.fc{i}"), prev, h, nl, rng)?);
            prev = h;
        }
        frame.push(Layer::vn_linear(s, "enc.frame.out", prev, 3, rng)?);
        let r_invariant = Layer::rotation_invariant("enc.r_inv", frame)?;
        let r_head = Layer::vn_linear(s, "enc.r_head", 2 * w, 3, rng)?;

        let d = &config.decoder;
        let code = config.code_len();
        let per_patch = d.points.div_ceil(d.patches);
        let mut patches = Vec::with_capacity(d.patches);
        for k in 0..d.patches {
            let p = format!("dec.patch{k}");
            let in_bound = 1.0 / libm::sqrt((code + 3) as f64);
            let h_bound = 1.0 / libm::sqrt(d.hidden as f64);
            let seeds = s.add(format!("{p}.seeds"), uniform(3, per_patch, 0.5, rng)?)?;
            let w_seed = s.add(format!("{p}.w_seed"), uniform(d.hidden, 3, in_bound, rng)?)?;
            let w_code = s.add(format!("{p}.w_code"), uniform(d.hidden, code, in_bound, rng)?)?;
            let b_in = s.add(format!("{p}.b_in"), uniform(d.hidden, 1, in_bound, rng)?)?;
            let mut hidden = Vec::new();
            for l in 1..d.hidden_layers {
                hidden.push((
                    s.add(format!("{p}.w{l}"), uniform(d.hidden, d.hidden, h_bound, rng)?)?,
                    s.add(format!("{p}.b{l}"), uniform(d.hidden, 1, h_bound, rng)?)?,
                ));
            }
            let w_out = s.add(format!("{p}.w_out"), uniform(3, d.hidden, h_bound, rng)?)?;
            let b_out = s.add(format!("{p}.b_out"), uniform(3, 1, h_bound, rng)?)?;
            patches.push(Patch {
                seeds,
                w_seed,
                w_code,
                b_in,
                hidden,
                w_out,
                b_out,
            });
        }

        let model = Model {
            config,
            store,
            trunk,
            t_invariant,
            vn_stack,
            r_invariant,
            r_head,
            patches,
        };
        model.check_structure()?;
        Ok(model)
    }

    fn check_structure(&self) -> Result<()> {
        let trunk = check_stack(&self.trunk, "encoder")?;
        let after = trunk.then(self.t_invariant.contract());
        let vn = check_stack(&self.vn_stack, "encoder")?;
        let zr = after.then(vn);
        if zr != Contract::TranslationInvariant || trunk != Contract::Se3Equivariant {
            return Err(contract_err("encoder", format!("unexpected contracts: trunk {trunk}, Z_R {zr}")));
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Every encoder layer, composites included, depth first.
    pub fn encoder_layers(&self) -> Vec<&Layer> {
        let mut out = Vec::new();
        for l in self.trunk.iter().chain([&self.t_invariant]).chain(&self.vn_stack) {
            l.walk(&mut out);
        }
        self.r_invariant.walk(&mut out);
        self.r_head.walk(&mut out);
        out
    }

    /// Text description of the layer graph.
    pub fn layer_graph(&self) -> String {
        let mut out = String::from("encoder\n");
        for l in self.trunk.iter().chain([&self.t_invariant]).chain(&self.vn_stack) {
            l.describe(1, &mut out);
        }
        self.r_invariant.describe(1, &mut out);
        out.push_str("  t_head mean_pool enc.t_inv\n");
        out.push_str("  r_head mean_pool\n");
        self.r_head.describe(2, &mut out);
        out.push_str("  z_s max_pool\n");
        let d = &self.config.decoder;
        out.push_str(&format!(
            "decoder patches={} seeds={} hidden={}x{} points={}\n",
            d.patches,
            d.points.div_ceil(d.patches),
            d.hidden_layers,
            d.hidden,
            d.points
        ));
        out
    }

    fn input_features(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let tx = ctx.tape.value(x);
        if tx.shape().rank() != 2 || tx.dims()[1] != 3 {
            return Err(dim_err("encode", format!("expected N×3 points, got {:?}", tx.shape())));
        }
        let n = tx.dims()[0];
        if n < self.config.min_points {
            return Err(contract_err(
                "encode",
                format!("{n} points, need at least {}", self.config.min_points),
            ));
        }
        let pts: Vec<[f64; 3]> = tx.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let (table, k) = neighbor_table(&pts, self.config.knn);
        let own = ctx.tape.reshape(x, &[1, n, 3])?;
        let local = ctx.tape.gather_mean(x, &table, k)?;
        let local = ctx.tape.reshape(local, &[1, n, 3])?;
        let centroid = ctx.tape.reduce(own, 1, Reduction::Mean, true)?;
        let centroid = ctx.tape.broadcast_to(centroid, &[1, n, 3])?;
        ctx.tape.concat(&[own, local, centroid], 0)
    }

    /// Run the encoder on an `N×3` point tensor.
    pub fn encode(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<EncoderVars> {
        let v = self.input_features(ctx, x)?;
        let x_rt = run_stack(&self.trunk, ctx, v)?;
        let (y_r, x_rt_pooled) = self.t_invariant.translation_parts(ctx, x_rt)?;
        let t = ctx.tape.reduce(x_rt_pooled, 1, Reduction::Mean, false)?;
        let z = run_stack_features(&self.vn_stack, ctx, Features::Dense(y_r))?;
        let z_r = z.materialize(ctx)?;
        let z_s = self.r_invariant.invariant_max_features(ctx, z_r, z)?;

        let pooled = ctx.tape.reduce(z_r, 1, Reduction::Mean, true)?;
        let r = self.r_head.forward(ctx, pooled)?;
        let r = ctx.tape.reshape(r, &[3, 3])?;
        Ok(EncoderVars {
            x_rt,
            x_rt_pooled,
            y_r,
            z_r,
            z_s,
            r,
            t,
        })
    }

    /// Decode a flat shape code into an `M×3` canonical cloud.
    pub fn decode(&self, ctx: &mut Ctx<'_>, z_s: Var) -> Result<Var> {
        let code = self.config.code_len();
        if ctx.tape.value(z_s).numel() != code {
            return Err(dim_err(
                "decode",
                format!("shape code has {} values, expected {code}", ctx.tape.value(z_s).numel()),
            ));
        }
        let z = ctx.tape.reshape(z_s, &[code, 1])?;
        let mut outs = Vec::with_capacity(self.patches.len());
        for p in &self.patches {
            let seeds = ctx.param(p.seeds)?;
            let w_seed = ctx.param(p.w_seed)?;
            let w_code = ctx.param(p.w_code)?;
            let b_in = ctx.param(p.b_in)?;
            let a = ctx.tape.matmul(w_seed, seeds)?;
            let cz = ctx.tape.matmul(w_code, z)?;
            let cz = ctx.tape.add(cz, b_in)?;
            let h = ctx.tape.add(a, cz)?;
            let mut h = ctx.tape.relu(h)?;
            for &(w, b) in &p.hidden {
                let (w, b) = (ctx.param(w)?, ctx.param(b)?);
                let l = ctx.tape.matmul(w, h)?;
                let l = ctx.tape.add(l, b)?;
                h = ctx.tape.relu(l)?;
            }
            let (w, b) = (ctx.param(p.w_out)?, ctx.param(p.b_out)?);
            let o = ctx.tape.matmul(w, h)?;
            let o = ctx.tape.add(o, b)?;
            outs.push(ctx.tape.add(o, seeds)?);
        }
        let all = ctx.tape.concat(&outs, 1)?;
        let all = ctx.tape.slice(all, 1, 0, self.config.decoder.points)?;
        ctx.tape.transpose(all)
    }

    /// Patch index of every decoded point; the last patch is the one
    /// trimmed when the patch count does not divide the point count.
    pub fn patch_ids(&self) -> Vec<usize> {
        let d = &self.config.decoder;
        let per = d.points.div_ceil(d.patches);
        (0..d.points).map(|i| i / per).collect()
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<ForwardVars> {
        let enc = self.encode(ctx, x)?;
        let shape = self.decode(ctx, enc.z_s)?;
        let reconstruction = repose(ctx.tape, shape, enc.r, enc.t)?;
        Ok(ForwardVars {
            enc,
            shape,
            reconstruction,
        })
    }

    /// Encode a cloud without gradient tracking.
    pub fn encode_cloud(&self, x: &PointCloud, mode: Mode) -> Result<Encoding> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.store, mode, false);
        let xv = ctx.tape.constant(x.to_tensor())?;
        let e = self.encode(&mut ctx, xv)?;
        Ok(Encoding {
            z_s: tape.value(e.z_s).data().to_vec(),
            r: Mat3::from_tensor(tape.value(e.r))?,
            t: three(tape.value(e.t).data()),
        })
    }

    /// Decode a shape code without gradient tracking.
    pub fn decode_shape(&self, z_s: &[f64]) -> Result<CanonicalShape> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.store, Mode::Eval, false);
        let z = ctx.tape.constant(Tensor::new(&[z_s.len()], z_s.to_vec())?)?;
        let s = self.decode(&mut ctx, z)?;
        Ok(CanonicalShape {
            points: PointCloud::from_tensor(tape.value(s))?,
            patch_id: self.patch_ids(),
        })
    }

    /// `(closest_orthonormal(R̃), T̃)` in eval mode.
    pub fn infer_pose(&self, x: &PointCloud) -> Result<PoseEstimate> {
        let e = self.encode_cloud(x, Mode::Eval)?;
        pose_from_raw(e.r, e.t)
    }
}

/// Orthonormalize a raw rotation estimate.
pub fn pose_from_raw(r_raw: Mat3, t: [f64; 3]) -> Result<PoseEstimate> {
    let o = closest_orthonormal_report(&r_raw)?;
    Ok(PoseEstimate {
        r_raw,
        t,
        r_hat: o.matrix,
        det: o.det,
    })
}

/// `S·R + 1·T` for `S: M×3`, `R: 3×3`, `T: 1×3`.
pub fn repose(tape: &mut Tape, s: Var, r: Var, t: Var) -> Result<Var> {
    let sr = tape.matmul(s, r)?;
    tape.add(sr, t)
}

fn three(d: &[f64]) -> [f64; 3] {
    [d[0], d[1], d[2]]
}
