//! Training checkpoints: a flat little-endian f32 container (`tensors.bin`)
//! with a JSON index holding names, shapes, offsets, scalar state and the
//! container's SHA-256.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use mtlaug_core::autodiff::{AdamState, ParamStore, Tensor};
use mtlaug_core::rng::Rng;
use mtlaug_core::train::{History, ScheduleState, Snapshot, TrainerState};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `tensors.bin`.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamScalars {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Index {
    pub format: u32,
    pub config_hash: String,
    pub sha256: String,
    pub tensors: Vec<TensorEntry>,
    pub adam: AdamScalars,
    pub best_adam: AdamScalars,
    pub schedule: ScheduleState,
    pub rng: Rng,
    pub epoch: usize,
    pub done: bool,
    pub input_mean: f64,
    pub input_std: f64,
    pub unlabeled_cursor: usize,
    pub unlabeled_order: Vec<usize>,
    pub history: History,
}

struct Writer {
    bytes: Vec<u8>,
    entries: Vec<TensorEntry>,
}

impl Writer {
    fn push(&mut self, name: String, shape: Vec<usize>, data: &[f32]) {
        self.entries.push(TensorEntry {
            name,
            shape,
            offset: self.bytes.len(),
            len: data.len(),
        });
        for v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (_, p) in store.iter() {
            self.push(format!("{}param/{}", prefix, p.name), p.value.shape().to_vec(), p.value.data());
        }
    }

    fn adam(&mut self, prefix: &str, adam: &AdamState) -> AdamScalars {
        let (m, v, counts) = adam.moments();
        for (i, (a, b)) in m.iter().zip(v).enumerate() {
            self.push(format!("{}adam/m/{}", prefix, i), vec![a.len()], a);
            self.push(format!("{}adam/v/{}", prefix, i), vec![b.len()], b);
        }
        AdamScalars {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            step: adam.step,
            counts: counts.to_vec(),
        }
    }
}

/// Writes `state` into `dir` (created if needed). The index is written
/// last, so a partially written checkpoint fails its checksum.
pub fn save(dir: &Path, state: &TrainerState, config_hash: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut w = Writer {
        bytes: Vec::new(),
        entries: Vec::new(),
    };
    w.store("", &state.params);
    w.push("centers".into(), state.centers.shape().to_vec(), state.centers.data());
    let adam = w.adam("", &state.adam);
    w.store("best/", &state.best.params);
    w.push("best/centers".into(), state.best.centers.shape().to_vec(), state.best.centers.data());
    let best_adam = w.adam("best/", &state.best.adam);
    let index = Index {
        format: FORMAT_VERSION,
        config_hash: config_hash.to_string(),
        sha256: hex::encode(Sha256::digest(&w.bytes)),
        tensors: w.entries,
        adam,
        best_adam,
        schedule: state.schedule.clone(),
        rng: state.rng.clone(),
        epoch: state.epoch,
        done: state.done,
        input_mean: state.input_mean,
        input_std: state.input_std,
        unlabeled_cursor: state.unlabeled_cursor,
        unlabeled_order: state.unlabeled_order.clone(),
        history: state.history.clone(),
    };
    let bin = dir.join("tensors.bin");
    fs::write(&bin, &w.bytes).map_err(Error::io(&bin))?;
    let idx = dir.join("index.json");
    let tmp = dir.join("index.json.tmp");
    fs::write(&tmp, serde_json::to_vec(&index)?).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, &idx).map_err(Error::io(&idx))
}

/// Raw tensors and index of a checkpoint after integrity checks.
pub struct Checkpoint {
    pub index: Index,
    pub tensors: BTreeMap<String, Tensor<f32>>,
    path: std::path::PathBuf,
}

pub fn exists(dir: &Path) -> bool {
    dir.join("index.json").exists()
}

/// Reads and verifies a checkpoint; `expected_hash` must match the hash it
/// was written with.
pub fn load(dir: &Path, expected_hash: &str) -> Result<Checkpoint> {
    let idx_path = dir.join("index.json");
    let bin_path = dir.join("tensors.bin");
    let integrity = |msg: String| Error::Integrity {
        path: dir.to_path_buf(),
        msg,
    };
    let idx_bytes = fs::read(&idx_path).map_err(Error::io(&idx_path))?;
    let index: Index = serde_json::from_slice(&idx_bytes).map_err(|e| integrity(format!("unreadable index: {}", e)))?;
    if index.format != FORMAT_VERSION {
        return Err(integrity(format!("format {} unsupported", index.format)));
    }
    let bytes = fs::read(&bin_path).map_err(Error::io(&bin_path))?;
    if hex::encode(Sha256::digest(&bytes)) != index.sha256 {
        return Err(integrity("tensor container checksum mismatch".into()));
    }
    if index.config_hash != expected_hash {
        return Err(Error::ConfigMismatch {
            stored: index.config_hash.clone(),
            current: expected_hash.to_string(),
        });
    }
    let mut tensors = BTreeMap::new();
    for e in &index.tensors {
        let end = e.offset + 4 * e.len;
        if end > bytes.len() || e.shape.iter().product::<usize>() != e.len {
            return Err(integrity(format!("tensor {} out of range", e.name)));
        }
        let data = bytes[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    Ok(Checkpoint {
        index,
        tensors,
        path: dir.to_path_buf(),
    })
}

impl Checkpoint {
    fn take(&mut self, name: &str) -> Result<Tensor<f32>> {
        self.tensors.remove(name).ok_or_else(|| Error::Integrity {
            path: self.path.clone(),
            msg: format!("missing tensor {}", name),
        })
    }

    fn fill_store(&mut self, prefix: &str, template: &ParamStore<f32>) -> Result<ParamStore<f32>> {
        let mut out = template.clone();
        let names: Vec<(mtlaug_core::autodiff::ParamId, String, Vec<usize>)> =
            template.iter().map(|(id, p)| (id, p.name.clone(), p.value.shape().to_vec())).collect();
        for (id, name, shape) in names {
            let t = self.take(&format!("{}param/{}", prefix, name))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Integrity {
                    path: self.path.clone(),
                    msg: format!("parameter {} has shape {:?}, model expects {:?}", name, t.shape(), shape),
                });
            }
            out.get_mut(id).value = t;
        }
        Ok(out)
    }

    fn fill_adam(&mut self, prefix: &str, scalars: &AdamScalars, template: &AdamState) -> Result<AdamState> {
        let mut a = template.clone();
        a.lr = scalars.lr;
        a.beta1 = scalars.beta1;
        a.beta2 = scalars.beta2;
        a.eps = scalars.eps;
        a.step = scalars.step;
        let n = template.moments().0.len();
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for i in 0..n {
            m.push(self.take(&format!("{}adam/m/{}", prefix, i))?.into_data());
            v.push(self.take(&format!("{}adam/v/{}", prefix, i))?.into_data());
        }
        a.set_moments(m, v, scalars.counts.clone())?;
        Ok(a)
    }

    /// Rebuilds the trainer state using `params` and `adam` as layout
    /// templates (a freshly constructed trainer's).
    pub fn into_state(mut self, params: &ParamStore<f32>, adam: &AdamState) -> Result<TrainerState> {
        let store = self.fill_store("", params)?;
        let centers = self.take("centers")?;
        let a = self.index.adam.clone();
        let adam_now = self.fill_adam("", &a, adam)?;
        let best_params = self.fill_store("best/", params)?;
        let best_centers = self.take("best/centers")?;
        let b = self.index.best_adam.clone();
        let best_adam = self.fill_adam("best/", &b, adam)?;
        let i = self.index;
        Ok(TrainerState {
            params: store,
            centers,
            input_mean: i.input_mean,
            input_std: i.input_std,
            adam: adam_now,
            schedule: i.schedule,
            best: Snapshot {
                params: best_params,
                centers: best_centers,
                adam: best_adam,
            },
            rng: i.rng,
            epoch: i.epoch,
            unlabeled_cursor: i.unlabeled_cursor,
            unlabeled_order: i.unlabeled_order,
            history: i.history,
            done: i.done,
        })
    }
}
