//! Optimization loop: per-sample losses, batch-averaged gradients and Adam.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentSpec;
use crate::data::ShapeSample;
use crate::error::{contract_err, Error, Result};
use crate::geometry::{sample_rigid, PointCloud};
use crate::layers::nn::{BufferId, Ctx, Mode, ParamStore};
use crate::loss::{loss_aug_consist, loss_can_consist, loss_ortho, total_loss, LossParts, LossWeights};
use crate::model::{repose, Model};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by `lr_factor`.
    pub lr_drops: Vec<usize>,
    pub lr_factor: f64,
    pub batch_size: usize,
    pub points: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Cut the decoded shape from the graph before re-encoding it for the
    /// canonical-consistency term.
    pub detach_canonical: bool,
    /// Half-width of the translation `T*` drawn for that term.
    pub canonical_translation: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            lr: 1e-3,
            lr_drops: vec![250, 350],
            lr_factor: 0.1,
            batch_size: 32,
            points: 1024,
            seed: 0,
            weights: LossWeights::default(),
            detach_canonical: true,
            canonical_translation: 0.1,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(contract_err("train_config", format!("{what}")));
        if self.epochs == 0 || self.batch_size == 0 || self.points == 0 {
            return bad("epochs, batch size and points must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_factor > 0.0) {
            return bad("learning rate and drop factor must be positive");
        }
        if self.lr_drops.windows(2).any(|w| w[0] >= w[1]) || self.lr_drops.first() == Some(&0) {
            return bad("learning-rate drops must be positive and strictly ascending");
        }
        if !(self.canonical_translation > 0.0) {
            return bad("canonical translation range must be positive");
        }
        self.weights.validate()
    }

    /// Learning rate in effect during `epoch` (zero-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drops.iter().filter(|&&d| epoch >= d).count();
        self.lr * libm::pow(self.lr_factor, drops as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for every parameter of a store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Apply one update; parameters without a gradient keep their value
    /// and moments.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || store.params().len() != self.m.len() {
            return Err(contract_err("adam", "parameter count changed"));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - libm::pow(beta1, self.step as f64);
        let c2 = 1.0 - libm::pow(beta2, self.step as f64);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                *w -= lr * (m[k] / c1) / (libm::sqrt(v[k] / c2) + eps);
            }
        }
        Ok(())
    }
}

/// Per-epoch averages of the loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// One-based epoch number.
    pub epoch: usize,
    pub rec: f64,
    pub ortho: f64,
    pub aug: f64,
    pub can: f64,
    pub total: f64,
    pub lr: f64,
}

fn attribute(term: &'static str, epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { term, epoch },
        e => e,
    }
}

fn cloud_var(tape: &mut Tape, c: &PointCloud) -> Result<Var> {
    tape.constant(c.to_tensor())
}

/// Record the four loss terms for one sample on `ctx`'s tape. Batch-norm
/// statistics are recorded for the main pass only.
pub fn sample_losses<R: Rng + ?Sized>(
    model: &Model,
    ctx: &mut Ctx<'_>,
    sample: &ShapeSample,
    augment: &AugmentSpec,
    config: &TrainConfig,
    epoch: usize,
    rng: &mut R,
) -> Result<LossParts<Var>> {
    let rec_err = attribute("rec", epoch);
    let x = cloud_var(ctx.tape, &sample.cloud)?;
    ctx.set_record_stats(true);
    let f = model.forward(ctx, x).map_err(&rec_err)?;
    ctx.set_record_stats(false);
    let rec = ctx.tape.chamfer(x, f.reconstruction).map_err(&rec_err)?;
    let ortho = loss_ortho(ctx.tape, f.enc.r).map_err(attribute("ortho", epoch))?;

    let aug_err = attribute("aug", epoch);
    let copies = augment.draw(&sample.cloud, sample.dense.as_ref(), rng)?;
    let aug = if copies.is_empty() {
        ctx.tape.constant(Tensor::scalar(0.0))?
    } else {
        let mut poses = Vec::with_capacity(copies.len());
        for (_, c) in &copies {
            let xa = cloud_var(ctx.tape, c)?;
            let e = model.encode(ctx, xa).map_err(&aug_err)?;
            poses.push((e.r, e.t));
        }
        loss_aug_consist(ctx.tape, f.enc.r, f.enc.t, &poses).map_err(&aug_err)?
    };

    let can_err = attribute("can", epoch);
    let g = sample_rigid(rng, config.canonical_translation)?;
    let shape = if config.detach_canonical {
        ctx.tape.detach(f.shape)
    } else {
        f.shape
    };
    let r_star = ctx.tape.constant(g.rotation.to_tensor())?;
    let t_star = ctx.tape.constant(Tensor::new(&[1, 3], g.translation.to_vec())?)?;
    let moved = repose(ctx.tape, shape, r_star, t_star)?;
    let e = model.encode(ctx, moved).map_err(&can_err)?;
    let can = loss_can_consist(ctx.tape, e.r, e.t, r_star, t_star).map_err(&can_err)?;
    Ok(LossParts { rec, ortho, aug, can })
}

/// Loss values, parameter gradients and batch-norm statistics of one
/// sample.
pub struct SampleGrad {
    pub parts: LossParts<f64>,
    pub total: f64,
    pub grads: Vec<(usize, Vec<f64>)>,
    pub stats: Vec<(BufferId, Tensor)>,
}

pub fn sample_gradient<R: Rng + ?Sized>(
    model: &Model,
    sample: &ShapeSample,
    augment: &AugmentSpec,
    config: &TrainConfig,
    epoch: usize,
    rng: &mut R,
) -> Result<SampleGrad> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, model.store(), Mode::Train, true);
    let parts = sample_losses(model, &mut ctx, sample, augment, config, epoch, rng)?;
    let total = total_loss(ctx.tape, &parts, &config.weights).map_err(attribute("total", epoch))?;
    let bound: Vec<_> = ctx.bound().collect();
    let stats = ctx.take_stats();
    drop(ctx);
    tape.backward(total)?;
    let grads = bound
        .into_iter()
        .filter_map(|(id, v)| tape.grad(v).map(|g| (id.index(), g.into_data())))
        .collect();
    Ok(SampleGrad {
        parts: parts.values(&tape),
        total: tape.value(total).data()[0],
        grads,
        stats,
    })
}

/// Model, optimizer and epoch counter of a training run.
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub config: TrainConfig,
    pub augment: AugmentSpec,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, augment: AugmentSpec) -> Result<Self> {
        config.validate()?;
        augment.validate(config.points)?;
        let adam = Adam::new(config.adam, model.store());
        Ok(Trainer {
            model,
            adam,
            config,
            augment,
            epoch: 0,
        })
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Random stream of one epoch, fixed by the seed and the epoch index.
    pub fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        rng
    }

    /// Run one epoch over `data` in a seeded random order.
    pub fn run_epoch(&mut self, data: &[ShapeSample]) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(contract_err("train", "empty dataset"));
        }
        let epoch = self.epoch;
        let lr = self.config.lr_at(epoch);
        let mut rng = self.epoch_rng(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);

        let mut sums = LossParts::<f64>::default();
        let mut total = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            let n_params = self.model.store().params().len();
            let mut grads: Vec<Option<Vec<f64>>> = vec![None; n_params];
            let mut stats: Vec<(BufferId, Tensor)> = Vec::new();
            for &i in batch {
                let s = sample_gradient(&self.model, &data[i], &self.augment, &self.config, epoch + 1, &mut rng)?;
                for (name, v) in s.parts.named() {
                    if !v.is_finite() {
                        return Err(Error::NonFiniteLoss { term: name, epoch: epoch + 1 });
                    }
                }
                sums.rec += s.parts.rec;
                sums.ortho += s.parts.ortho;
                sums.aug += s.parts.aug;
                sums.can += s.parts.can;
                total += s.total;
                for (id, g) in s.grads {
                    match &mut grads[id] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(g),
                    }
                }
                merge_stats(&mut stats, s.stats);
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grads.iter_mut().flatten() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
            self.adam.update(self.model.store_mut(), &grads, lr)?;
            let store = self.model.store_mut();
            for (id, sum) in stats {
                let b = store.buffer_mut(id);
                for (dst, src) in b.data_mut().iter_mut().zip(sum.data()) {
                    *dst = src * scale;
                }
            }
        }
        self.epoch += 1;
        let n = data.len() as f64;
        Ok(EpochMetrics {
            epoch: self.epoch,
            rec: sums.rec / n,
            ortho: sums.ortho / n,
            aug: sums.aug / n,
            can: sums.can / n,
            total: total / n,
            lr,
        })
    }
}

fn merge_stats(acc: &mut Vec<(BufferId, Tensor)>, new: Vec<(BufferId, Tensor)>) {
    for (id, t) in new {
        match acc.iter_mut().find(|(b, _)| *b == id) {
            Some((_, sum)) => sum.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
            None => acc.push((id, t)),
        }
    }
}
