//! Numerical checks of group contracts: both sides of `f(g·V) = g·f(V)`
//! are evaluated for random inputs and random rigid motions.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{sample_rigid, RigidTransform};
use crate::layers::{Contract, Ctx, Layer, LayerKind, Mode, ParamStore};
use crate::model::Model;
use crate::tensor::{Tape, Tensor};

pub const DEFAULT_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_GRAD_TOLERANCE: f64 = 1e-5;
/// Half-width of the random translations, well beyond the data range.
pub const TRANSLATION_RANGE: f64 = 10.0;

/// Encoder outputs checked as a whole.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Shape code `Z_s`.
    ShapeCode,
    /// Translation estimate `T̃`.
    Translation,
    /// Rotation estimate `R̃`.
    Rotation,
}

impl Head {
    pub const ALL: [Head; 3] = [Head::ShapeCode, Head::Translation, Head::Rotation];

    /// Contract the head is built to satisfy.
    pub fn contract(self) -> Contract {
        match self {
            Head::ShapeCode => Contract::Invariant,
            Head::Translation => Contract::Se3Equivariant,
            Head::Rotation => Contract::TranslationInvariant,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Head::ShapeCode => "z_s",
            Head::Translation => "t",
            Head::Rotation => "r",
        }
    }
}

#[derive(Clone, Copy)]
pub enum Target<'a> {
    Layer { layer: &'a Layer, store: &'a ParamStore },
    Head { model: &'a Model, head: Head },
}

#[derive(Clone)]
pub struct ContractCase<'a> {
    pub name: String,
    pub target: Target<'a>,
    pub declared: Contract,
    pub trials: usize,
    pub tolerance: f64,
    /// Points per random input.
    pub points: usize,
    /// Layer whose row sums are deliberately broken, if any.
    pub corrupt: Option<String>,
}

impl<'a> ContractCase<'a> {
    pub fn layer(layer: &'a Layer, store: &'a ParamStore) -> Self {
        ContractCase {
            name: String::from(layer.name()),
            target: Target::Layer { layer, store },
            declared: layer.contract(),
            trials: 100,
            tolerance: DEFAULT_TOLERANCE,
            points: 16,
            corrupt: None,
        }
    }

    pub fn head(model: &'a Model, head: Head) -> Self {
        ContractCase {
            name: format!("encoder.{}", head.name()),
            target: Target::Head { model, head },
            declared: head.contract(),
            trials: 100,
            tolerance: DEFAULT_TOLERANCE,
            points: model.config().min_points.max(64),
            corrupt: None,
        }
    }

    pub fn declare(mut self, contract: Contract) -> Self {
        self.declared = contract;
        self
    }

    pub fn trials(mut self, trials: usize) -> Self {
        self.trials = trials;
        self
    }

    pub fn corrupt(mut self, layer: Option<String>) -> Self {
        self.corrupt = layer;
        self
    }

    pub fn kind(&self) -> Option<LayerKind> {
        match self.target {
            Target::Layer { layer, .. } => Some(layer.kind()),
            Target::Head { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractReport {
    pub name: String,
    pub contract: Contract,
    pub trials: usize,
    pub max_residual: f64,
    pub tolerance: f64,
    /// Seed of the first trial over tolerance.
    pub failing_seed: Option<u64>,
    /// Evaluation error, counted as a failure.
    pub error: Option<String>,
}

impl ContractReport {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.failing_seed.is_none()
    }
}

fn random_tensor<R: Rng + ?Sized>(rng: &mut R, dims: &[usize]) -> Result<Tensor> {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Apply `g` to every trailing 3-vector; translation only when asked.
fn act(t: &Tensor, g: &RigidTransform, translate: bool) -> Tensor {
    let mut out = t.clone();
    for v in out.data_mut().chunks_exact_mut(3) {
        let r = g.rotation.apply_row([v[0], v[1], v[2]]);
        let shift = if translate { g.translation } else { [0.0; 3] };
        for i in 0..3 {
            v[i] = r[i] + shift[i];
        }
    }
    out
}

fn evaluate(case: &ContractCase<'_>, input: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    match case.target {
        Target::Layer { layer, store } => {
            let mut ctx = Ctx::new(&mut tape, store, Mode::Train, false);
            if let Some(c) = &case.corrupt {
                ctx.corrupt(c.clone());
            }
            let x = ctx.tape.constant(input.clone())?;
            let y = layer.forward(&mut ctx, x)?;
            Ok(tape.value(y).clone())
        }
        Target::Head { model, head } => {
            let mut ctx = Ctx::new(&mut tape, model.store(), Mode::Train, false);
            if let Some(c) = &case.corrupt {
                ctx.corrupt(c.clone());
            }
            let x = ctx.tape.constant(input.clone())?;
            let e = model.encode(&mut ctx, x)?;
            let y = match head {
                Head::ShapeCode => e.z_s,
                Head::Translation => e.t,
                Head::Rotation => e.r,
            };
            Ok(tape.value(y).clone())
        }
    }
}

fn input_dims(case: &ContractCase<'_>) -> Vec<usize> {
    match case.target {
        Target::Layer { layer, .. } => alloc::vec![layer.in_channels(), case.points, 3],
        Target::Head { .. } => alloc::vec![case.points, 3],
    }
}

/// One trial: the largest deviation between `f(g·V)` and the declared
/// image of `f(V)`.
pub fn trial_residual(case: &ContractCase<'_>, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = random_tensor(&mut rng, &input_dims(case))?;
    let g = sample_rigid(&mut rng, TRANSLATION_RANGE)?;
    let c = case.declared;
    let moved = act(&input, &g, c.translates_input());
    let before = evaluate(case, &input)?;
    let after = evaluate(case, &moved)?;
    let mut worst = 0.0f64;
    let fixed = c.output_action() == crate::layers::OutputAction::Fixed;
    if fixed {
        for (a, b) in after.data().iter().zip(before.data()) {
            worst = worst.max((a - b).abs());
        }
    } else {
        for (a, b) in after.data().chunks_exact(3).zip(before.data().chunks_exact(3)) {
            let e = c.expected([b[0], b[1], b[2]], &g.rotation, g.translation);
            for i in 0..3 {
                worst = worst.max((a[i] - e[i]).abs());
            }
        }
    }
    Ok(worst)
}

/// Run every trial of a case from its own random stream.
pub fn run_contract(case: &ContractCase<'_>, seed: u64) -> ContractReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ContractReport {
        name: case.name.clone(),
        contract: case.declared,
        trials: case.trials,
        max_residual: 0.0,
        tolerance: case.tolerance,
        failing_seed: None,
        error: None,
    };
    for _ in 0..case.trials {
        let s = rng.next_u64();
        match trial_residual(case, s) {
            Ok(r) => {
                report.max_residual = report.max_residual.max(r);
                // NaN residuals count as failures.
                if !(r < case.tolerance) && report.failing_seed.is_none() {
                    report.failing_seed = Some(s);
                }
            }
            Err(e) => {
                report.error = Some(format!("{e}"));
                report.failing_seed.get_or_insert(s);
                break;
            }
        }
    }
    report
}

/// Standalone layers of the kinds the encoder does not use directly.
pub struct ProbeLayers {
    pub store: ParamStore,
    pub layers: Vec<Layer>,
}

impl ProbeLayers {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let c = channels;
        let layers = alloc::vec![
            Layer::vnt_linear(&mut store, "probe.vnt_linear", c, c + 1, rng)?,
            Layer::vn_linear(&mut store, "probe.vn_linear", c, c + 1, rng)?,
            Layer::vnt_maxpool(&mut store, "probe.vnt_maxpool", c, rng)?,
            Layer::mean_pool("probe.mean_pool", c),
        ];
        Ok(ProbeLayers { store, layers })
    }
}

/// Every encoder layer, the probe layers, and the three encoder heads.
pub fn standard_cases<'a>(model: &'a Model, probes: &'a ProbeLayers) -> Vec<ContractCase<'a>> {
    let mut cases: Vec<ContractCase<'a>> = model
        .encoder_layers()
        .into_iter()
        .map(|l| ContractCase::layer(l, model.store()))
        .collect();
    cases.extend(probes.layers.iter().map(|l| ContractCase::layer(l, &probes.store)));
    cases.extend(Head::ALL.into_iter().map(|h| ContractCase::head(model, h)));
    cases
}

/// Registered layer kinds with no case.
pub fn missing_kinds(cases: &[ContractCase<'_>]) -> Vec<LayerKind> {
    LayerKind::ALL
        .into_iter()
        .filter(|k| !cases.iter().any(|c| c.kind() == Some(*k)))
        .collect()
}

/// Largest relative error between `analytic` and central differences of
/// `f` over the listed coordinates, with `|a - n| / max(|a|, |n|, floor)`.
pub fn finite_difference_error(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    at: &[f64],
    analytic: &[f64],
    step: f64,
    floor: f64,
) -> Result<f64> {
    let mut x = at.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x)?;
        x[i] = orig - step;
        let down = f(&x)?;
        x[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let scale = analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    Ok(worst)
}

/// Relative error of the analytic gradient of the total training loss of
/// one sample against central differences over every model parameter.
/// The same random stream drives augmentation and `(R*, T*)` in every
/// evaluation, so the loss is a fixed function of the parameters.
pub fn total_loss_gradient_error(
    model: &mut Model,
    sample: &crate::data::ShapeSample,
    augment: &crate::augment::AugmentSpec,
    config: &crate::train::TrainConfig,
    seed: u64,
    step: f64,
    floor: f64,
) -> Result<f64> {
    use crate::loss::total_loss;
    use crate::train::{sample_gradient, sample_losses};

    let sg = sample_gradient(model, sample, augment, config, 1, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let sizes: Vec<usize> = model.store().params().iter().map(|p| p.value.numel()).collect();
    let mut analytic: Vec<Vec<f64>> = sizes.iter().map(|&n| alloc::vec![0.0; n]).collect();
    for (id, g) in sg.grads {
        analytic[id] = g;
    }
    let at: Vec<f64> = model.store().params().iter().flat_map(|p| p.value.data().to_vec()).collect();
    let original = model.store().clone();
    let err = finite_difference_error(
        |x| {
            let mut off = 0;
            for p in model.store_mut().params_mut() {
                let n = p.value.numel();
                p.value.data_mut().copy_from_slice(&x[off..off + n]);
                off += n;
            }
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, model.store(), Mode::Train, false);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let parts = sample_losses(model, &mut ctx, sample, augment, config, 1, &mut rng)?;
            let total = total_loss(ctx.tape, &parts, &config.weights)?;
            Ok(tape.value(total).data()[0])
        },
        &at,
        &analytic.concat(),
        step,
        floor,
    );
    *model.store_mut() = original;
    err
}
