//! Procedural shape classes with a shared canonical frame: the long axis
//! of every instance runs along `+x` and up is `+z`.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};
use crate::geometry::{apply_transform, sample_rigid, Point, PointCloud, RigidTransform};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Fuselage, wings and tail made of boxes.
    Winged,
    /// Seat, back and four legs made of boxes.
    Seated,
}

impl Family {
    pub fn class_id(self) -> usize {
        match self {
            Family::Winged => 0,
            Family::Seated => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticClassSpec {
    pub family: Family,
    /// Relative jitter of part sizes and placements, in `[0, 1)`.
    pub jitter: f64,
    pub points: usize,
    /// Points in the denser sampling kept for re-sampling; `0` disables it.
    pub dense_points: usize,
    pub instances: usize,
    /// Half-width of the uniform translation applied to each instance.
    pub translation_range: f64,
    /// Apply a random rigid pose to every instance.
    pub posed: bool,
}

impl Default for SyntheticClassSpec {
    fn default() -> Self {
        SyntheticClassSpec {
            family: Family::Winged,
            jitter: 0.2,
            points: 1024,
            dense_points: 2048,
            instances: 200,
            translation_range: 0.1,
            posed: true,
        }
    }
}

impl SyntheticClassSpec {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 || self.points == 0 {
            return Err(contract_err("synthetic_class", "instances and points must be positive"));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(contract_err("synthetic_class", format!("jitter {} not in [0, 1)", self.jitter)));
        }
        if self.dense_points != 0 && self.dense_points < self.points {
            return Err(contract_err("synthetic_class", "dense_points below points"));
        }
        if self.posed && !(self.translation_range > 0.0) {
            return Err(contract_err("synthetic_class", "translation range must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSample {
    /// Posed cloud `X`.
    pub cloud: PointCloud,
    /// Denser sampling of the same posed surface.
    pub dense: Option<PointCloud>,
    /// Points in the canonical frame, when known.
    pub canonical: Option<PointCloud>,
    /// Pose taking `canonical` to `cloud`.
    pub true_pose: Option<RigidTransform>,
    pub class_id: usize,
    pub instance_id: usize,
}

/// Axis-aligned box by centre and half extents.
#[derive(Clone, Copy, Debug)]
struct Part {
    centre: Point,
    half: Point,
}

impl Part {
    fn area(&self) -> [f64; 3] {
        let h = self.half;
        // Pair of faces normal to each axis.
        [8.0 * h[1] * h[2], 8.0 * h[0] * h[2], 8.0 * h[0] * h[1]]
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        let a = self.area();
        let mut u = rng.random::<f64>() * (a[0] + a[1] + a[2]);
        let mut axis = 2;
        for (i, ai) in a.iter().enumerate() {
            if u < *ai {
                axis = i;
                break;
            }
            u -= ai;
        }
        let mut p = [0.0; 3];
        for (j, pj) in p.iter_mut().enumerate() {
            let h = self.half[j];
            *pj = self.centre[j]
                + if j == axis {
                    if rng.random::<bool>() {
                        h
                    } else {
                        -h
                    }
                } else {
                    rng.random_range(-h..=h)
                };
        }
        p
    }
}

fn jittered<R: Rng + ?Sized>(rng: &mut R, v: f64, jitter: f64) -> f64 {
    if jitter == 0.0 {
        return v;
    }
    v * (1.0 + rng.random_range(-jitter..jitter))
}

fn parts<R: Rng + ?Sized>(family: Family, jitter: f64, rng: &mut R) -> Vec<Part> {
    let mut j = |v: f64| jittered(rng, v, jitter);
    match family {
        Family::Winged => {
            let len = j(0.9);
            let fus = j(0.08);
            let span = j(0.7);
            let chord = j(0.16);
            let wing_x = j(0.1);
            let tail_x = -len + j(0.1);
            let fin_h = j(0.18);
            vec_parts(&[
                ([0.0, 0.0, 0.0], [len, fus, fus]),
                ([wing_x, 0.0, 0.0], [chord, span, 0.02]),
                ([tail_x, 0.0, fus + fin_h], [j(0.07), 0.015, fin_h]),
                ([tail_x, 0.0, fus], [j(0.06), j(0.25), 0.015]),
            ])
        }
        Family::Seated => {
            let w = j(0.4);
            let d = j(0.4);
            let seat_z = j(0.1);
            let back_h = j(0.45);
            let leg_h = j(0.45);
            let leg = 0.04;
            let mut ps = vec_parts(&[
                ([0.0, 0.0, seat_z], [d, w, 0.04]),
                ([-d + 0.03, 0.0, seat_z + back_h], [0.03, w, back_h]),
            ]);
            for (sx, sy) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                ps.push(Part {
                    centre: [sx * (d - leg), sy * (w - leg), seat_z - leg_h],
                    half: [leg, leg, leg_h],
                });
            }
            ps
        }
    }
}

fn vec_parts(ps: &[(Point, Point)]) -> Vec<Part> {
    ps.iter().map(|&(centre, half)| Part { centre, half }).collect()
}

fn sample_surface<R: Rng + ?Sized>(parts: &[Part], n: usize, rng: &mut R) -> Result<PointCloud> {
    let areas: Vec<f64> = parts.iter().map(|p| p.area().iter().sum()).collect();
    let total: f64 = areas.iter().sum();
    let mut pts = Vec::with_capacity(n);
    for _ in 0..n {
        let mut u = rng.random::<f64>() * total;
        let mut k = parts.len() - 1;
        for (i, a) in areas.iter().enumerate() {
            if u < *a {
                k = i;
                break;
            }
            u -= a;
        }
        pts.push(parts[k].sample(rng));
    }
    PointCloud::new(pts)
}

/// One instance with index `id` from its own random stream.
pub fn generate_instance(spec: &SyntheticClassSpec, base_seed: u64, id: usize) -> Result<ShapeSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(id as u64);
    let ps = parts(spec.family, spec.jitter, &mut rng);
    let canonical = sample_surface(&ps, spec.points, &mut rng)?;
    let dense = match spec.dense_points {
        0 => None,
        m => Some(sample_surface(&ps, m, &mut rng)?),
    };
    let pose = if spec.posed {
        sample_rigid(&mut rng, spec.translation_range)?
    } else {
        RigidTransform::IDENTITY
    };
    Ok(ShapeSample {
        cloud: apply_transform(&canonical, &pose),
        dense: dense.map(|d| apply_transform(&d, &pose)),
        canonical: Some(canonical),
        true_pose: Some(pose),
        class_id: spec.family.class_id(),
        instance_id: id,
    })
}

/// Every instance of a class; deterministic in the state of `rng`.
pub fn generate_class<R: Rng + ?Sized>(spec: &SyntheticClassSpec, rng: &mut R) -> Result<Vec<ShapeSample>> {
    spec.validate()?;
    let base = rng.random::<u64>();
    (0..spec.instances).map(|i| generate_instance(spec, base, i)).collect()
}
