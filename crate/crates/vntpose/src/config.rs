//! Run configuration, stored as TOML.
//!
//! ```toml
//! seed = 7
//! out = "runs/winged"
//!
//! [model]
//! channels = 21
//! [model.decoder]
//! patches = 10
//!
//! [train]
//! epochs = 50
//! lr_drops = [25, 35]
//!
//! [augment]
//! per_step = 1
//!
//! [data.synthetic]        # or: [data] manifest = "data/manifest.toml"
//! family = "winged"
//! instances = 200
//!
//! [eval]
//! rotations = 10
//! ```
//!
//! Every section and key is optional; omitted values take their defaults.
//! Unknown keys are rejected. Relative paths are resolved against the
//! directory of the config file.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vntpose_core::augment::AugmentSpec;
use vntpose_core::data::SyntheticClassSpec;
use vntpose_core::model::{Model, ModelConfig};
use vntpose_core::train::TrainConfig;

use crate::error::{io_err, Error, Result};

/// Where the training and evaluation clouds come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset written by `gen-data` or assembled by hand.
    pub manifest: Option<PathBuf>,
    /// Class generated in memory from the run seed.
    pub synthetic: Option<SyntheticClassSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            synthetic: Some(SyntheticClassSpec::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Random rigid motions applied to each instance for stability.
    pub rotations: usize,
    /// Half-width of the translations of those motions.
    pub translation_range: f64,
    /// Undo the applied rotation before measuring the spread of the
    /// estimates.
    pub compensate: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            rotations: 10,
            translation_range: 0.1,
            compensate: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; replaces `train.seed` and drives model initialization
    /// and synthetic data.
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentSpec,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentSpec::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Independent random streams derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    ModelInit = 1,
    Data = 2,
    Eval = 3,
    Verify = 4,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config {
            path: origin.to_path_buf(),
            detail: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = RunConfig::from_toml(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(m) = &cfg.data.manifest {
            cfg.data.manifest = Some(base.join(m));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is representable as TOML")
    }

    /// Reject inconsistent settings before any work starts.
    pub fn validate(&self) -> Result<()> {
        let usage = |e: vntpose_core::Error| Error::Usage(e.to_string());
        if i64::try_from(self.seed).is_err() {
            return Err(Error::Usage(format!("seed {} exceeds the TOML integer range", self.seed)));
        }
        self.model.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        self.augment.validate(self.train.points).map_err(usage)?;
        match (&self.data.manifest, &self.data.synthetic) {
            (Some(_), Some(_)) => return Err(Error::Usage("data: give either a manifest or a synthetic spec, not both".into())),
            (None, None) => return Err(Error::Usage("data: no manifest or synthetic spec".into())),
            (None, Some(s)) => s.validate().map_err(usage)?,
            (Some(_), None) => {}
        }
        if self.eval.rotations < 2 {
            return Err(Error::Usage("eval.rotations must be at least 2".into()));
        }
        if !(self.eval.translation_range > 0.0) {
            return Err(Error::Usage("eval.translation_range must be positive".into()));
        }
        Ok(())
    }

    /// Training settings with the master seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn rng(&self, stream: Stream) -> ChaCha8Rng {
        stream_rng(self.seed, stream)
    }

    /// Freshly initialized model.
    pub fn build_model(&self) -> Result<Model> {
        Ok(Model::new(self.model.clone(), &mut self.rng(Stream::ModelInit))?)
    }
}

/// Digest of everything that fixes the parameter layout: the model
/// settings and the layer graph they produce.
pub fn structural_hash(model: &Model) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"vntpose-structure\n");
    h.update(toml::to_string(model.config()).expect("model config is representable as TOML"));
    h.update(b"\n");
    h.update(model.layer_graph());
    h.finalize().into()
}
