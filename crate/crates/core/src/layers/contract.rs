//! Group contracts: how a layer's output responds to a rigid motion of its
//! input.

use core::fmt;

use serde::{Deserialize, Serialize};

use crate::tensor::kernels::V3;
use crate::tensor::linalg::Mat3;

/// What happens to the output when every input vector `v` becomes
/// `v·R + T` (or `v·R` for the rotation-only contracts).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Contract {
    /// `f(VR + 1T) = f(V)R + 1T`
    Se3Equivariant,
    /// `f(VR) = f(V)R`
    So3Equivariant,
    /// `f(VR + 1T) = f(V)R`
    TranslationInvariant,
    /// `f(VR) = f(V)`
    RotationInvariant,
    /// `f(VR + 1T) = f(V)`
    Invariant,
}

/// Action of the group on a layer's output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputAction {
    RotateTranslate,
    Rotate,
    Fixed,
}

impl Contract {
    pub const ALL: [Contract; 5] = [
        Contract::Se3Equivariant,
        Contract::So3Equivariant,
        Contract::TranslationInvariant,
        Contract::RotationInvariant,
        Contract::Invariant,
    ];

    /// Whether the input action includes translations.
    pub fn translates_input(self) -> bool {
        matches!(
            self,
            Contract::Se3Equivariant | Contract::TranslationInvariant | Contract::Invariant
        )
    }

    pub fn output_action(self) -> OutputAction {
        match self {
            Contract::Se3Equivariant => OutputAction::RotateTranslate,
            Contract::So3Equivariant | Contract::TranslationInvariant => OutputAction::Rotate,
            Contract::RotationInvariant | Contract::Invariant => OutputAction::Fixed,
        }
    }

    /// Output action when the input is only rotated.
    fn under_rotation(self) -> OutputAction {
        match self.output_action() {
            OutputAction::RotateTranslate => OutputAction::Rotate,
            a => a,
        }
    }

    fn from_parts(translates_input: bool, out: OutputAction) -> Contract {
        match (translates_input, out) {
            (true, OutputAction::RotateTranslate) => Contract::Se3Equivariant,
            (true, OutputAction::Rotate) => Contract::TranslationInvariant,
            (true, OutputAction::Fixed) => Contract::Invariant,
            (false, OutputAction::Fixed) => Contract::RotationInvariant,
            (false, _) => Contract::So3Equivariant,
        }
    }

    /// Contract of `next ∘ self`.
    pub fn then(self, next: Contract) -> Contract {
        match self.output_action() {
            OutputAction::Fixed => self,
            OutputAction::RotateTranslate => next,
            OutputAction::Rotate => Contract::from_parts(self.translates_input(), next.under_rotation()),
        }
    }

    /// Strongest contract satisfied by both, used for channel
    /// concatenation of two branches reading the same input. `None` when
    /// one branch rotates and the other is fixed.
    pub fn meet(self, other: Contract) -> Option<Contract> {
        if self == other {
            return Some(self);
        }
        let (a, b) = (self.under_rotation(), other.under_rotation());
        (a == b).then(|| Contract::from_parts(false, a))
    }

    /// Expected image of output vector `v` under `(R, T)`.
    pub fn expected(self, v: V3, r: &Mat3, t: V3) -> V3 {
        match self.output_action() {
            OutputAction::RotateTranslate => {
                let w = r.apply_row(v);
                [w[0] + t[0], w[1] + t[1], w[2] + t[2]]
            }
            OutputAction::Rotate => r.apply_row(v),
            OutputAction::Fixed => v,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Contract::Se3Equivariant => "se3_equivariant",
            Contract::So3Equivariant => "so3_equivariant",
            Contract::TranslationInvariant => "translation_invariant",
            Contract::RotationInvariant => "rotation_invariant",
            Contract::Invariant => "invariant",
        }
    }
}

impl fmt::Display for Contract {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::Contract::*;

    #[test]
    fn composition_table() {
        assert_eq!(Se3Equivariant.then(Se3Equivariant), Se3Equivariant);
        assert_eq!(Se3Equivariant.then(TranslationInvariant), TranslationInvariant);
        assert_eq!(TranslationInvariant.then(So3Equivariant), TranslationInvariant);
        assert_eq!(TranslationInvariant.then(Se3Equivariant), TranslationInvariant);
        assert_eq!(TranslationInvariant.then(RotationInvariant), Invariant);
        assert_eq!(So3Equivariant.then(RotationInvariant), RotationInvariant);
        assert_eq!(So3Equivariant.then(TranslationInvariant), So3Equivariant);
        assert_eq!(Invariant.then(So3Equivariant), Invariant);
        assert_eq!(RotationInvariant.then(Se3Equivariant), RotationInvariant);
    }

    #[test]
    fn meet_table() {
        assert_eq!(Se3Equivariant.meet(So3Equivariant), Some(So3Equivariant));
        assert_eq!(Se3Equivariant.meet(TranslationInvariant), Some(So3Equivariant));
        assert_eq!(Invariant.meet(RotationInvariant), Some(RotationInvariant));
        assert_eq!(Se3Equivariant.meet(Invariant), None);
    }
}
