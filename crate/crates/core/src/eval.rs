//! Consistency and stability of rotation estimates, in degrees.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};
use crate::geometry::{angular_distance, closest_orthonormal};
use crate::tensor::linalg::Mat3;

/// Histogram bin width in degrees.
pub const BIN_DEGREES: f64 = 5.0;
pub const BINS: usize = 36;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// `√(mean of d_i²)`.
    pub std_degrees: f64,
    /// Deviation of every estimate from the mean pose.
    pub deviations: Vec<f64>,
    /// Unit-mass histogram of the deviations over `[0°, 180°]`.
    pub histogram: Vec<f64>,
    /// Orthonormalized arithmetic mean of the estimates.
    pub mean: Mat3,
}

impl ConsistencyReport {
    /// `(bin centre, mass)` rows.
    pub fn histogram_rows(&self) -> Vec<(f64, f64)> {
        self.histogram
            .iter()
            .enumerate()
            .map(|(i, m)| ((i as f64 + 0.5) * BIN_DEGREES, *m))
            .collect()
    }
}

/// Closest orthonormal matrix to the arithmetic mean of `rs`.
pub fn mean_pose(rs: &[Mat3]) -> Result<Mat3> {
    if rs.is_empty() {
        return Err(contract_err("mean_pose", "no poses"));
    }
    let mut sum = Mat3::ZERO;
    for r in rs {
        sum = sum + *r;
    }
    closest_orthonormal(&sum.scale(1.0 / rs.len() as f64))
}

fn orthonormalize_all(rs: &[Mat3]) -> Result<Vec<Mat3>> {
    rs.iter().map(closest_orthonormal).collect()
}

/// Spread of pose estimates of different aligned instances around their
/// mean pose.
pub fn consistency(poses: &[Mat3]) -> Result<ConsistencyReport> {
    if poses.len() < 2 {
        return Err(contract_err(
            "consistency",
            format!("need at least 2 poses, got {}", poses.len()),
        ));
    }
    let rs = orthonormalize_all(poses)?;
    let mean = mean_pose(&rs)?;
    let deviations = rs
        .iter()
        .map(|r| angular_distance(r, &mean))
        .collect::<Result<Vec<_>>>()?;
    let n = deviations.len() as f64;
    let std_degrees = libm::sqrt(deviations.iter().map(|d| d * d).sum::<f64>() / n);
    Ok(ConsistencyReport {
        std_degrees,
        histogram: histogram(&deviations),
        deviations,
        mean,
    })
}

/// Unit-mass histogram with [`BINS`] bins of [`BIN_DEGREES`].
pub fn histogram(degrees: &[f64]) -> Vec<f64> {
    let mut h = vec![0.0; BINS];
    if degrees.is_empty() {
        return h;
    }
    for d in degrees {
        let b = ((d / BIN_DEGREES) as usize).min(BINS - 1);
        h[b] += 1.0;
    }
    let n = degrees.len() as f64;
    h.iter_mut().for_each(|m| *m /= n);
    h
}

/// Estimates for `k` rigidly moved copies of one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct StabilityGroup {
    /// `R̃_ij`.
    pub estimates: Vec<Mat3>,
    /// Rotation applied to the input of each copy.
    pub applied: Vec<Mat3>,
}

/// `(1/N_t) Σ_i √(Σ_j ∠(R̃_ij, mean_j R̃_ij)²)`.
///
/// With `compensate`, each estimate is first mapped back by its applied
/// rotation (`R̃_ij·Qⱼᵀ`), so an equivariant estimator scores zero.
pub fn stability(groups: &[StabilityGroup], compensate: bool) -> Result<f64> {
    if groups.is_empty() {
        return Err(contract_err("stability", "no instances"));
    }
    let k = groups[0].estimates.len();
    let mut total = 0.0;
    for (i, g) in groups.iter().enumerate() {
        if g.estimates.len() != k || g.applied.len() != k {
            return Err(contract_err(
                "stability",
                format!("instance {i} has {} estimates and {} rotations, expected {k}", g.estimates.len(), g.applied.len()),
            ));
        }
        if k < 2 {
            return Err(contract_err("stability", "need at least 2 copies per instance"));
        }
        let mut rs = orthonormalize_all(&g.estimates)?;
        if compensate {
            for (r, q) in rs.iter_mut().zip(&g.applied) {
                *r = *r * q.transpose();
            }
        }
        let mean = mean_pose(&rs)?;
        let mut sq = 0.0;
        for r in &rs {
            let d = angular_distance(r, &mean)?;
            sq += d * d;
        }
        total += libm::sqrt(sq);
    }
    Ok(total / groups.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_poses_have_zero_spread() {
        let r = Mat3::rot_x(0.4);
        let rep = consistency(&[r, r, r]).unwrap();
        assert!(rep.std_degrees < 1e-6);
        assert_eq!(rep.histogram[0], 1.0);
        assert!(consistency(&[r]).is_err());
    }

    #[test]
    fn histogram_has_unit_mass() {
        let h = histogram(&[0.0, 4.9, 5.0, 179.0, 180.0]);
        assert_eq!(h.len(), BINS);
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(h[0], 0.4);
        assert_eq!(h[35], 0.4);
    }

    #[test]
    fn compensated_stability_of_equivariant_estimates_vanishes() {
        let base = Mat3::rot_y(0.3);
        let applied: Vec<Mat3> = (0..4).map(|j| Mat3::rot_z(j as f64) * Mat3::rot_x(0.5 * j as f64)).collect();
        let g = StabilityGroup {
            estimates: applied.iter().map(|q| base * *q).collect(),
            applied,
        };
        assert!(stability(&[g.clone()], true).unwrap() < 1e-6);
        assert!(stability(&[g.clone()], false).unwrap() > 1.0);
        let ragged = StabilityGroup {
            estimates: g.estimates[..3].to_vec(),
            applied: g.applied.clone(),
        };
        assert!(stability(&[g, ragged], true).is_err());
    }
}
