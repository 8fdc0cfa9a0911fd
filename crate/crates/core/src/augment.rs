//! Pose-preserving augmentations: each maps a cloud to another sampling of
//! the same posed surface.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};
use crate::geometry::{nearest_indices, Point, PointCloud};
use crate::tensor::kernels;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Fps,
    KnnRemoval,
    Noise,
    Resample,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 4] = [
        AugmentKind::Fps,
        AugmentKind::KnnRemoval,
        AugmentKind::Noise,
        AugmentKind::Resample,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentKind::Fps => "fps",
            AugmentKind::KnnRemoval => "knn_removal",
            AugmentKind::Noise => "noise",
            AugmentKind::Resample => "resample",
        }
    }
}

/// Where re-sampled points come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleSource {
    /// A denser sampling of the same surface, when the sample carries one.
    #[default]
    Dense,
    /// Draw with replacement from the input cloud itself.
    Bootstrap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    /// Inclusive range of the FPS subset size.
    pub fps_range: [usize; 2],
    pub knn_count: usize,
    pub noise_sigma: f64,
    pub resample: ResampleSource,
    pub enabled: Vec<AugmentKind>,
    /// Number of augmented copies per sample and step, each of a kind
    /// drawn uniformly from `enabled`. Unset means one copy of every
    /// enabled kind.
    pub per_step: Option<usize>,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            fps_range: [300, 500],
            knn_count: 100,
            noise_sigma: 0.025,
            resample: ResampleSource::Dense,
            enabled: AugmentKind::ALL.to_vec(),
            per_step: None,
        }
    }
}

impl AugmentSpec {
    /// Check the settings against clouds of `n` points.
    pub fn validate(&self, n: usize) -> Result<()> {
        let [lo, hi] = self.fps_range;
        if self.enabled.contains(&AugmentKind::Fps) && !(1 <= lo && lo <= hi && hi <= n) {
            return Err(contract_err(
                "augment_spec",
                format!("fps range [{lo}, {hi}] not within [1, {n}]"),
            ));
        }
        if self.enabled.contains(&AugmentKind::KnnRemoval) && self.knn_count >= n {
            return Err(contract_err(
                "augment_spec",
                format!("knn_count {} must be below {n}", self.knn_count),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(contract_err("augment_spec", "noise sigma must be finite and non-negative"));
        }
        if self.per_step.is_some_and(|k| k > 0) && self.enabled.is_empty() {
            return Err(contract_err("augment_spec", "per_step set with no enabled kinds"));
        }
        Ok(())
    }

    /// Kinds to apply in one step.
    pub fn choose<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<AugmentKind> {
        match self.per_step {
            None => self.enabled.clone(),
            Some(_) if self.enabled.is_empty() => Vec::new(),
            Some(k) => (0..k)
                .map(|_| self.enabled[rng.random_range(0..self.enabled.len())])
                .collect(),
        }
    }

    pub fn apply<R: Rng + ?Sized>(
        &self,
        kind: AugmentKind,
        x: &PointCloud,
        dense: Option<&PointCloud>,
        rng: &mut R,
    ) -> Result<PointCloud> {
        match kind {
            AugmentKind::Fps => {
                let [lo, hi] = self.fps_range;
                let k = rng.random_range(lo..=hi);
                fps(x, k, rng)
            }
            AugmentKind::KnnRemoval => knn_removal(x, self.knn_count, rng),
            AugmentKind::Noise => gaussian_noise(x, self.noise_sigma, rng),
            AugmentKind::Resample => match (self.resample, dense) {
                (ResampleSource::Dense, Some(d)) => resample(d, x.len(), rng),
                _ => bootstrap(x, x.len(), rng),
            },
        }
    }

    /// Augmented copies of `x` for one training step.
    pub fn draw<R: Rng + ?Sized>(
        &self,
        x: &PointCloud,
        dense: Option<&PointCloud>,
        rng: &mut R,
    ) -> Result<Vec<(AugmentKind, PointCloud)>> {
        self.choose(rng)
            .into_iter()
            .map(|k| Ok((k, self.apply(k, x, dense, rng)?)))
            .collect()
    }
}

/// Farthest point sampling of `k` points, starting from a uniformly drawn
/// point.
pub fn fps<R: Rng + ?Sized>(x: &PointCloud, k: usize, rng: &mut R) -> Result<PointCloud> {
    check_count("fps", k, x.len())?;
    let seed = rng.random_range(0..x.len());
    fps_from(x, k, seed)
}

/// Farthest point sampling from a fixed first index. Distances are
/// squared Euclidean; ties go to the lowest index.
pub fn fps_from(x: &PointCloud, k: usize, seed: usize) -> Result<PointCloud> {
    check_count("fps", k, x.len())?;
    if seed >= x.len() {
        return Err(contract_err("fps", format!("seed {seed} out of range")));
    }
    x.select(&fps_indices(x.points(), k, seed))
}

fn fps_indices(pts: &[Point], k: usize, seed: usize) -> Vec<usize> {
    let mut dist = vec![f64::INFINITY; pts.len()];
    let mut chosen = Vec::with_capacity(k);
    let mut cur = seed;
    for _ in 0..k {
        chosen.push(cur);
        dist[cur] = f64::NEG_INFINITY;
        let c = pts[cur];
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, p) in pts.iter().enumerate() {
            if dist[i] != f64::NEG_INFINITY {
                let d = kernels::sub(*p, c);
                dist[i] = dist[i].min(kernels::dot(d, d));
            }
            if dist[i] > best.0 {
                best = (dist[i], i);
            }
        }
        cur = best.1;
    }
    chosen
}

fn check_count(op: &'static str, k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(contract_err(op, format!("count {k} not within [1, {n}]")));
    }
    Ok(())
}

/// Remove the `k` nearest neighbours of a random anchor, the anchor
/// itself included.
pub fn knn_removal<R: Rng + ?Sized>(x: &PointCloud, k: usize, rng: &mut R) -> Result<PointCloud> {
    if k >= x.len() {
        return Err(contract_err("knn_removal", format!("cannot remove {k} of {} points", x.len())));
    }
    let anchor = rng.random_range(0..x.len());
    knn_removal_at(x, k, anchor)
}

pub fn knn_removal_at(x: &PointCloud, k: usize, anchor: usize) -> Result<PointCloud> {
    if k >= x.len() || anchor >= x.len() {
        return Err(contract_err(
            "knn_removal",
            format!("k {k}, anchor {anchor} with {} points", x.len()),
        ));
    }
    let mut removed = vec![false; x.len()];
    for i in nearest_indices(x.points(), x.points()[anchor], k) {
        removed[i] = true;
    }
    let keep: Vec<usize> = (0..x.len()).filter(|&i| !removed[i]).collect();
    x.select(&keep)
}

/// I.i.d. zero-mean Gaussian offsets on every coordinate.
pub fn gaussian_noise<R: Rng + ?Sized>(x: &PointCloud, sigma: f64, rng: &mut R) -> Result<PointCloud> {
    let offsets = noise_offsets(x.len(), sigma, rng)?;
    PointCloud::new(
        x.points()
            .iter()
            .zip(offsets)
            .map(|(p, o)| [p[0] + o[0], p[1] + o[1], p[2] + o[2]])
            .collect(),
    )
}

/// The offsets [`gaussian_noise`] adds, drawn in the same order.
pub fn noise_offsets<R: Rng + ?Sized>(n: usize, sigma: f64, rng: &mut R) -> Result<Vec<Point>> {
    if !(sigma >= 0.0) {
        return Err(contract_err("gaussian_noise", format!("invalid sigma {sigma}")));
    }
    let normal = Normal::new(0.0, sigma)
        .map_err(|_| contract_err("gaussian_noise", format!("invalid sigma {sigma}")))?;
    Ok((0..n)
        .map(|_| [normal.sample(rng), normal.sample(rng), normal.sample(rng)])
        .collect())
}

/// `n` distinct points drawn uniformly from `source`.
pub fn resample<R: Rng + ?Sized>(source: &PointCloud, n: usize, rng: &mut R) -> Result<PointCloud> {
    if n == 0 || n > source.len() {
        return Err(contract_err(
            "resample",
            format!("cannot draw {n} points from a source of {}", source.len()),
        ));
    }
    source.select(&index::sample(rng, source.len(), n).into_vec())
}

/// `n` points drawn with replacement from `x`.
pub fn bootstrap<R: Rng + ?Sized>(x: &PointCloud, n: usize, rng: &mut R) -> Result<PointCloud> {
    if n == 0 {
        return Err(contract_err("resample", "empty draw"));
    }
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..x.len())).collect();
    x.select(&idx)
}
