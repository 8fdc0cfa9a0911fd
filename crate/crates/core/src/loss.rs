//! Training objectives over tape variables.
//!
//! Rotation estimates are `3×3`, translations `1×3`, clouds `N×3`.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};
use crate::model::repose;
use crate::tensor::{Tape, Tensor, Var};

/// Weights of the orthonormality, augmentation-consistency and
/// canonical-consistency terms relative to reconstruction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub ortho: f64,
    pub aug: f64,
    pub can: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ortho: 0.5,
            aug: 1.0,
            can: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.ortho, self.aug, self.can].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(contract_err("loss_weights", "weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// The four loss terms, either as tape handles or as values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts<T> {
    pub rec: T,
    pub ortho: T,
    pub aug: T,
    pub can: T,
}

impl<T: Copy> LossParts<T> {
    /// `(name, value)` pairs in a fixed order.
    pub fn named(&self) -> [(&'static str, T); 4] {
        [("rec", self.rec), ("ortho", self.ortho), ("aug", self.aug), ("can", self.can)]
    }
}

impl LossParts<Var> {
    pub fn values(&self, tape: &Tape) -> LossParts<f64> {
        let v = |x: Var| tape.value(x).data()[0];
        LossParts {
            rec: v(self.rec),
            ortho: v(self.ortho),
            aug: v(self.aug),
            can: v(self.can),
        }
    }
}

impl LossParts<f64> {
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.rec + w.ortho * self.ortho + w.aug * self.aug + w.can * self.can
    }
}

/// Chamfer distance between `x` and `s̃·r̃ + 1·t̃`.
pub fn loss_rec(tape: &mut Tape, x: Var, shape: Var, r: Var, t: Var) -> Result<Var> {
    let recon = repose(tape, shape, r, t)?;
    tape.chamfer(x, recon)
}

/// `MSE(I − r̃r̃ᵀ) + MSE(I − r̃ᵀr̃)`.
pub fn loss_ortho(tape: &mut Tape, r: Var) -> Result<Var> {
    let eye = tape.constant(identity())?;
    let rt = tape.transpose(r)?;
    let a = tape.matmul(r, rt)?;
    let b = tape.matmul(rt, r)?;
    let la = tape.mse(eye, a)?;
    let lb = tape.mse(eye, b)?;
    tape.add(la, lb)
}

/// Sum over augmented copies of the squared pose disagreement with the
/// original: `Σ MSE(r̃, r̃_A) + MSE(t̃, t̃_A)`.
pub fn loss_aug_consist(tape: &mut Tape, r: Var, t: Var, augmented: &[(Var, Var)]) -> Result<Var> {
    if augmented.is_empty() {
        return Err(contract_err("loss_aug_consist", "no augmented poses"));
    }
    let mut terms = Vec::with_capacity(augmented.len());
    for &(ra, ta) in augmented {
        let lr = tape.mse(r, ra)?;
        let lt = tape.mse(t, ta)?;
        terms.push(tape.add(lr, lt)?);
    }
    sum(tape, &terms)
}

/// Pose disagreement between the estimate for a re-posed canonical shape
/// and the pose `(R*, T*)` that was applied to it.
pub fn loss_can_consist(tape: &mut Tape, r: Var, t: Var, r_star: Var, t_star: Var) -> Result<Var> {
    let lr = tape.mse(r, r_star)?;
    let lt = tape.mse(t, t_star)?;
    tape.add(lr, lt)
}

/// `L_rec + λ1·L_ortho + λ2·L_aug + λ3·L_can`.
pub fn total_loss(tape: &mut Tape, parts: &LossParts<Var>, w: &LossWeights) -> Result<Var> {
    let o = tape.scale(parts.ortho, w.ortho)?;
    let a = tape.scale(parts.aug, w.aug)?;
    let c = tape.scale(parts.can, w.can)?;
    sum(tape, &[parts.rec, o, a, c])
}

fn sum(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

fn identity() -> Tensor {
    Tensor::new(&[3, 3], alloc::vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).expect("3×3")
}
