//! On-disk log-Mel feature cache.
//!
//! Each entry is a binary matrix plus a JSON sidecar. Original features use
//! the layout `b"LMSP" | u32 n_mels | u32 n_frames | f32 data`, augmented
//! ones `b"LMSA" | u8 aug_type | u32 n_mels | u32 n_frames | f32 data`,
//! all little-endian and row-major. Entries are written once and never
//! modified.

use std::fs;
use std::path::{Path, PathBuf};

use mtlaug_core::augment::AugmentationType;
use mtlaug_core::corpus::{sanitize_id, Dataset};
use mtlaug_core::dsp::{FeatureConfig, LogMelExtractor, LogMelSpectrogram};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CACHE_ENV: &str = "MTLAUG_CACHE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub id: String,
    pub source_ids: Vec<String>,
    pub feature_hash: String,
    pub aug_type: Option<AugmentationType>,
    pub n_mels: usize,
    pub n_frames: usize,
    pub sha256: String,
}

pub fn encode(spec: &LogMelSpectrogram, aug: Option<AugmentationType>) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 4 * spec.data().len());
    match aug {
        None => out.extend_from_slice(b"LMSP"),
        Some(a) => {
            out.extend_from_slice(b"LMSA");
            out.push(a.index() as u8);
        }
    }
    out.extend_from_slice(&(spec.n_mels() as u32).to_le_bytes());
    out.extend_from_slice(&(spec.n_frames() as u32).to_le_bytes());
    for v in spec.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(LogMelSpectrogram, Option<AugmentationType>)> {
    let bad = |msg: &str| Error::Integrity {
        path: path.to_path_buf(),
        msg: msg.into(),
    };
    let (aug, rest) = match bytes.get(..4) {
        Some(b"LMSP") => (None, &bytes[4..]),
        Some(b"LMSA") => {
            let a = bytes.get(4).ok_or_else(|| bad("truncated header"))?;
            let t = AugmentationType::from_index(*a as usize).ok_or_else(|| bad("unknown augmentation type"))?;
            (Some(t), &bytes[5..])
        }
        _ => return Err(bad("bad magic")),
    };
    if rest.len() < 8 {
        return Err(bad("truncated header"));
    }
    let m = u32::from_le_bytes(rest[0..4].try_into().expect("4 bytes")) as usize;
    let t = u32::from_le_bytes(rest[4..8].try_into().expect("4 bytes")) as usize;
    let body = &rest[8..];
    if body.len() != 4 * m * t {
        return Err(bad("payload length does not match the header"));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((LogMelSpectrogram::new(m, t, data)?, aug))
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of everything that changes feature values.
pub fn feature_hash(cfg: &FeatureConfig) -> String {
    let d = Sha256::digest(serde_json::to_string(cfg).expect("serialise").as_bytes());
    hex::encode(&d[..8])
}

pub struct FeatureCache {
    root: PathBuf,
}

impl FeatureCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// `$MTLAUG_CACHE` when set, else `fallback`.
    pub fn from_env(fallback: &Path) -> Self {
        match std::env::var_os(CACHE_ENV) {
            Some(p) if !p.is_empty() => Self::new(PathBuf::from(p)),
            _ => Self::new(fallback),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn entry(&self, fhash: &str, corpus: &str, id: &str) -> PathBuf {
        self.root.join(fhash).join(sanitize_id(corpus)).join(sanitize_id(id))
    }

    /// Stores `spec` under `id` unless an entry already exists, in which
    /// case the stored entry is verified and returned.
    pub fn put(
        &self,
        fhash: &str,
        corpus: &str,
        id: &str,
        source_ids: &[String],
        spec: &LogMelSpectrogram,
        aug: Option<AugmentationType>,
    ) -> Result<LogMelSpectrogram> {
        let base = self.entry(fhash, corpus, id);
        if let Some(found) = self.get(fhash, corpus, id)? {
            return Ok(found);
        }
        let dir = base.parent().expect("entry has a parent");
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let bytes = encode(spec, aug);
        let side = Sidecar {
            id: id.to_string(),
            source_ids: source_ids.to_vec(),
            feature_hash: fhash.to_string(),
            aug_type: aug,
            n_mels: spec.n_mels(),
            n_frames: spec.n_frames(),
            sha256: sha_hex(&bytes),
        };
        let bin = base.with_extension("lmsp");
        let tmp = base.with_extension("lmsp.tmp");
        fs::write(&tmp, &bytes).map_err(Error::io(&tmp))?;
        fs::rename(&tmp, &bin).map_err(Error::io(&bin))?;
        let js = base.with_extension("json");
        fs::write(&js, serde_json::to_vec_pretty(&side)?).map_err(Error::io(&js))?;
        Ok(spec.clone())
    }

    pub fn get(&self, fhash: &str, corpus: &str, id: &str) -> Result<Option<LogMelSpectrogram>> {
        let base = self.entry(fhash, corpus, id);
        let (bin, js) = (base.with_extension("lmsp"), base.with_extension("json"));
        if !bin.exists() || !js.exists() {
            return Ok(None);
        }
        let bytes = fs::read(&bin).map_err(Error::io(&bin))?;
        let side: Sidecar = serde_json::from_slice(&fs::read(&js).map_err(Error::io(&js))?)?;
        if side.sha256 != sha_hex(&bytes) {
            return Err(Error::Integrity {
                path: bin,
                msg: "checksum mismatch".into(),
            });
        }
        Ok(Some(decode(&bytes, &bin)?.0))
    }

    /// Features of every utterance, computed on a miss.
    pub fn extract_all(&self, data: &Dataset, extractor: &LogMelExtractor) -> Result<Vec<LogMelSpectrogram>> {
        let fhash = feature_hash(extractor.config());
        let name = &data.corpus.name;
        data.corpus
            .utterances()
            .iter()
            .zip(&data.audio)
            .map(|(u, w)| match self.get(&fhash, name, &u.id)? {
                Some(s) => Ok(s),
                None => {
                    let s = extractor.extract(w)?;
                    self.put(&fhash, name, &u.id, std::slice::from_ref(&u.id), &s, None)
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> LogMelSpectrogram {
        LogMelSpectrogram::new(2, 3, vec![0.5, -1.0, 2.0, f32::MIN_POSITIVE, -0.0, 7.25]).unwrap()
    }

    #[test]
    fn codec_round_trip() {
        let p = Path::new("x");
        for aug in [None, Some(AugmentationType::Mixup)] {
            let b = encode(&spec(), aug);
            let (s, a) = decode(&b, p).unwrap();
            assert_eq!(a, aug);
            assert_eq!(s.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), spec().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
        assert!(decode(b"NOPE", p).is_err());
        assert!(decode(&encode(&spec(), None)[..20], p).is_err());
    }

    #[test]
    fn corrupt_entry_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let c = FeatureCache::new(dir.path());
        c.put("h", "c", "u1", &[], &spec(), None).unwrap();
        assert_eq!(c.get("h", "c", "u1").unwrap().unwrap(), spec());
        let bin = dir.path().join("h/c/u1.lmsp");
        let mut b = fs::read(&bin).unwrap();
        b[13] ^= 1;
        fs::write(&bin, b).unwrap();
        assert!(matches!(c.get("h", "c", "u1"), Err(Error::Integrity { .. })));
    }
}
