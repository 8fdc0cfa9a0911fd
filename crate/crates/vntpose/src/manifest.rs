//! Dataset manifest: a TOML file listing the class specs and seeds a
//! dataset was generated from, and one entry per cloud file.
//!
//! ```toml
//! version = 1
//!
//! [[classes]]
//! name = "winged"
//! seed = 42
//! [classes.spec]
//! family = "winged"
//! instances = 200
//!
//! [[files]]
//! path = "winged/0000.ply"
//! dense = "winged/0000.dense.ply"
//! class_id = 0
//! instance_id = 0
//! pose = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]
//! ```
//!
//! `pose` holds `R` row-major followed by `T`, taking the canonical cloud
//! to the stored one. File paths are relative to the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vntpose_core::data::{ShapeSample, SyntheticClassSpec};
use vntpose_core::geometry::apply_transform;
use vntpose_core::RigidTransform;

use crate::error::{io_err, Error, Result};
use crate::formats::load_cloud;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub name: String,
    pub seed: u64,
    pub spec: SyntheticClassSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense: Option<PathBuf>,
    pub class_id: usize,
    pub instance_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    #[serde(default)]
    pub classes: Vec<ClassEntry>,
    #[serde(default)]
    pub files: Vec<FileEntry>,
}

impl Manifest {
    pub fn new() -> Self {
        Manifest {
            version: MANIFEST_VERSION,
            classes: Vec::new(),
            files: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let m: Manifest = toml::from_str(&text).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Config {
                path: path.to_path_buf(),
                detail: format!("manifest version {} is not supported", m.version),
            });
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).expect("manifest is representable as TOML");
        fs::write(path, text).map_err(io_err(path))
    }

    /// Read every listed cloud, in manifest order. Paths are resolved
    /// against `root`.
    pub fn load_samples(&self, root: &Path) -> Result<Vec<ShapeSample>> {
        self.files.iter().map(|f| f.load(root)).collect()
    }
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest::new()
    }
}

impl FileEntry {
    pub fn load(&self, root: &Path) -> Result<ShapeSample> {
        let path = root.join(&self.path);
        let cloud = load_cloud(&path)?;
        let dense = self.dense.as_ref().map(|d| load_cloud(&root.join(d))).transpose()?;
        let true_pose = self
            .pose
            .as_ref()
            .map(|p| RigidTransform::from_slice(p))
            .transpose()
            .map_err(|e| Error::Config {
                path: path.clone(),
                detail: format!("pose: {e}"),
            })?;
        Ok(ShapeSample {
            canonical: true_pose.map(|g| apply_transform(&cloud, &g.inverse())),
            cloud,
            dense,
            true_pose,
            class_id: self.class_id,
            instance_id: self.instance_id,
        })
    }
}

/// Load the samples of a manifest file.
pub fn load_dataset(manifest: &Path) -> Result<Vec<ShapeSample>> {
    let m = Manifest::load(manifest)?;
    m.load_samples(manifest.parent().unwrap_or(Path::new("")))
}
