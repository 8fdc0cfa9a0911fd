//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! | field          | encoding                                         |
//! |----------------|--------------------------------------------------|
//! | magic          | `VNTPCKPT`                                       |
//! | version        | `u32`                                            |
//! | structure hash | 32 bytes, SHA-256                                |
//! | run config     | `u64` length + UTF-8 TOML                        |
//! | layer graph    | `u64` length + UTF-8                             |
//! | epoch          | `u64`                                            |
//! | parameters     | `u64` count, then per tensor: `u32` name length, |
//! |                | name, `u32` rank, `u64` dims, `f64` values       |
//! | buffers        | same as parameters                               |
//! | optimizer      | `u64` step, `f64` β1 β2 ε, `u64` count, then per |
//! |                | parameter `u64` length + `f64` first moments,    |
//! |                | then the same for second moments                 |
//! | checksum       | SHA-256 of every preceding byte                  |

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use vntpose_core::layers::Named;
use vntpose_core::model::Model;
use vntpose_core::train::{Adam, AdamConfig};

use crate::config::{structural_hash, RunConfig};
use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 8] = b"VNTPCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorEntry {
    fn from_named(n: &Named) -> Self {
        TensorEntry {
            name: n.name.clone(),
            dims: n.value.dims().to_vec(),
            data: n.value.data().to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub structure: [u8; 32],
    pub layer_graph: String,
    /// Completed epochs.
    pub epoch: usize,
    pub params: Vec<TensorEntry>,
    pub buffers: Vec<TensorEntry>,
    pub adam: Adam,
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, model: &Model, adam: &Adam, epoch: usize) -> Self {
        Checkpoint {
            config: config.clone(),
            structure: structural_hash(model),
            layer_graph: model.layer_graph(),
            epoch,
            params: model.store().params().iter().map(TensorEntry::from_named).collect(),
            buffers: model.store().buffers().iter().map(TensorEntry::from_named).collect(),
            adam: adam.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        w.extend_from_slice(&self.structure);
        put_str(&mut w, &self.config.to_toml());
        put_str(&mut w, &self.layer_graph);
        put_u64(&mut w, self.epoch as u64);
        for set in [&self.params, &self.buffers] {
            put_u64(&mut w, set.len() as u64);
            for t in set {
                w.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
                w.extend_from_slice(t.name.as_bytes());
                w.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
                t.dims.iter().for_each(|&d| put_u64(&mut w, d as u64));
                put_f64s(&mut w, &t.data);
            }
        }
        put_u64(&mut w, self.adam.step);
        let AdamConfig { beta1, beta2, eps } = self.adam.config;
        put_f64s(&mut w, &[beta1, beta2, eps]);
        put_u64(&mut w, self.adam.m.len() as u64);
        for moments in [&self.adam.m, &self.adam.v] {
            for m in moments {
                put_u64(&mut w, m.len() as u64);
                put_f64s(&mut w, m);
            }
        }
        let sum: [u8; 32] = Sha256::digest(&w).into();
        w.extend_from_slice(&sum);
        w
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if bytes.len() < MAGIC.len() + 36 || &bytes[..8] != MAGIC {
            return Err(r.fail("not a checkpoint file"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(r.fail("checksum mismatch"));
        }
        r.bytes = body;
        r.pos = 8;
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail(&format!("unsupported version {version}")));
        }
        let structure: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let config_text = r.string()?;
        let config = RunConfig::from_toml(&config_text, path)?;
        let layer_graph = r.string()?;
        let epoch = r.u64()? as usize;
        let mut sets = [Vec::new(), Vec::new()];
        for set in sets.iter_mut() {
            let n = r.len()?;
            for _ in 0..n {
                let name_len = r.u32()? as usize;
                let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| r.fail("tensor name is not UTF-8"))?;
                let rank = r.u32()? as usize;
                let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.fail("tensor extents overflow"))?;
                let data = r.f64s(numel)?;
                set.push(TensorEntry { name, dims, data });
            }
        }
        let [params, buffers] = sets;
        let step = r.u64()?;
        let betas = r.f64s(3)?;
        let n = r.len()?;
        let mut moments = [Vec::new(), Vec::new()];
        for m in moments.iter_mut() {
            for _ in 0..n {
                let len = r.len()?;
                m.push(r.f64s(len)?);
            }
        }
        if r.pos != body.len() {
            return Err(r.fail("trailing bytes"));
        }
        let [m, v] = moments;
        Ok(Checkpoint {
            config,
            structure,
            layer_graph,
            epoch,
            params,
            buffers,
            adam: Adam {
                config: AdamConfig {
                    beta1: betas[0],
                    beta2: betas[1],
                    eps: betas[2],
                },
                step,
                m,
                v,
            },
        })
    }

    /// Write through a temporary file so an interrupted save leaves the
    /// previous checkpoint intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Checkpoint::from_bytes(&bytes, path)
    }

    /// Rebuild the model and optimizer. The stored structure hash must
    /// match the one of the model its config produces.
    pub fn restore(&self, path: &Path) -> Result<(Model, Adam)> {
        let fail = |detail: String| Error::Checkpoint {
            path: path.to_path_buf(),
            detail,
        };
        let mut model = self.config.build_model()?;
        if structural_hash(&model) != self.structure {
            return Err(fail("structure hash does not match the stored model config".into()));
        }
        if model.layer_graph() != self.layer_graph {
            return Err(fail("layer graph differs".into()));
        }
        let store = model.store_mut();
        copy_into(store.params_mut(), &self.params).map_err(&fail)?;
        copy_into(store.buffers_mut(), &self.buffers).map_err(&fail)?;
        let shapes_match = self.adam.m.len() == self.params.len()
            && self.adam.v.len() == self.params.len()
            && self.params.iter().zip(self.adam.m.iter().zip(&self.adam.v)).all(|(p, (m, v))| p.data.len() == m.len() && m.len() == v.len());
        if !shapes_match {
            return Err(fail("optimizer state does not match the parameters".into()));
        }
        Ok((model, self.adam.clone()))
    }

    /// Check that a model built from `config` can take these weights.
    pub fn check_compatible(&self, config: &RunConfig, path: &Path) -> Result<()> {
        let model = config.build_model()?;
        if structural_hash(&model) != self.structure {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                detail: "structure hash does not match the given model config".into(),
            });
        }
        Ok(())
    }
}

fn copy_into(dst: &mut [Named], src: &[TensorEntry]) -> std::result::Result<(), String> {
    if dst.len() != src.len() {
        return Err(format!("expected {} tensors, found {}", dst.len(), src.len()));
    }
    for (d, s) in dst.iter_mut().zip(src) {
        if d.name != s.name || d.value.dims() != s.dims.as_slice() {
            return Err(format!("tensor `{}` {:?} does not match `{}` {:?}", s.name, s.dims, d.name, d.value.dims()));
        }
        d.value.data_mut().copy_from_slice(&s.data);
    }
    Ok(())
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_u64(w, s.len() as u64);
    w.extend_from_slice(s.as_bytes());
}

fn put_f64s(w: &mut Vec<u8>, v: &[f64]) {
    w.reserve(v.len() * 8);
    v.iter().for_each(|x| w.extend_from_slice(&x.to_le_bytes()));
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, detail: &str) -> Error {
        Error::Checkpoint {
            path: PathBuf::from(self.path),
            detail: format!("{detail} at byte offset {}", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.fail("unexpected end of data"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A count that cannot exceed the remaining bytes.
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > (self.bytes.len() - self.pos) as u64 {
            return Err(self.fail("length exceeds file size"));
        }
        Ok(n as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        let raw = self.take(n)?.to_vec();
        String::from_utf8(raw).map_err(|_| self.fail("text is not UTF-8"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or_else(|| self.fail("length overflow"))?;
        let raw = self.take(bytes)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}
