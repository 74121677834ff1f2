//! Experiment configuration: defaults, file loading, `--set` overrides,
//! schema validation and the config hash.

use std::path::{Path, PathBuf};

use mtlaug_core::corpus::SynthConfig;
use mtlaug_core::dsp::{FeatureConfig, LogMelExtractor, NoiseColor};
use mtlaug_core::eval::Setup;
use mtlaug_core::model::{ConvSpec, ModelConfig};
use mtlaug_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Where a corpus comes from: a manifest when given, else the synthesiser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSource {
    pub manifest: Option<PathBuf>,
    /// Base directory for relative audio paths (manifest directory if unset).
    pub audio_root: Option<PathBuf>,
    /// Fold `excited` into `happy`.
    pub merge_excited: bool,
    pub synth: SynthConfig,
}

impl Default for CorpusSource {
    fn default() -> Self {
        Self {
            manifest: None,
            audio_root: None,
            merge_excited: true,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSource {
    /// Recorded noise files; synthetic coloured noise is used when empty.
    pub files: Vec<PathBuf>,
    pub colors: Vec<NoiseColor>,
    pub seconds: f64,
}

impl Default for NoiseSource {
    fn default() -> Self {
        Self {
            files: Vec::new(),
            colors: vec![NoiseColor::White, NoiseColor::Pink, NoiseColor::Brown],
            seconds: 4.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    Desk,
    Reference,
}

/// Network preset plus optional per-field overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub size: ModelSize,
    /// Ablation model 1 (full) to 5 (plain CNN-BLSTM).
    pub ablation: usize,
    pub encoder: Option<Vec<ConvSpec>>,
    pub ce_units: Option<usize>,
    pub ce_dense: Option<usize>,
    pub ca_units: Option<usize>,
    pub ca_dense: Option<usize>,
    pub ca_dropout: Option<f64>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub w_augtype: Option<f64>,
    pub w_recon: Option<f64>,
    pub recon_sum: Option<bool>,
    pub center_alpha: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            size: ModelSize::Desk,
            ablation: 1,
            encoder: None,
            ce_units: None,
            ce_dense: None,
            ca_units: None,
            ca_dense: None,
            ca_dropout: None,
            lambda1: None,
            lambda2: None,
            w_augtype: None,
            w_recon: None,
            recon_sum: None,
            center_alpha: None,
        }
    }
}

impl ModelSection {
    pub fn build(&self, features: &FeatureConfig) -> mtlaug_core::Result<ModelConfig> {
        let base = match self.size {
            ModelSize::Desk => ModelConfig::desk(features),
            ModelSize::Reference => ModelConfig::reference(features),
        };
        let mut m = base.ablation(self.ablation)?;
        if let Some(e) = &self.encoder {
            m.encoder = e.clone();
        }
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { m.$f = v; } )* };
        }
        set!(ce_units, ce_dense, ca_units, ca_dense, ca_dropout, lambda1, lambda2, w_augtype, w_recon, recon_sum, center_alpha);
        m.validate()?;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub n_repeats: usize,
    pub snrs: Vec<f64>,
    pub attack_eps: f64,
    pub bim_steps: usize,
    pub bim_step_size: Option<f64>,
    pub fractions: Vec<f64>,
    /// Dropped labeled utterances join the unlabeled pool in the fraction study.
    pub pool_rest: bool,
    /// LOSO fold used by `train`.
    pub train_fold: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            n_repeats: 3,
            snrs: vec![0.0, 10.0, 20.0],
            attack_eps: 0.08,
            bim_steps: 10,
            bim_step_size: None,
            fractions: vec![0.1, 0.25, 0.5, 1.0],
            pool_rest: true,
            train_fold: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: CorpusSource,
    /// Cross-corpus target.
    pub target: CorpusSource,
    /// Extra unlabeled speech for semi-supervised runs.
    pub unlabeled: Option<CorpusSource>,
    pub noise: NoiseSource,
    pub features: FeatureConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub protocol: ProtocolConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let corpus = CorpusSource::default();
        let target = CorpusSource {
            synth: corpus.synth.shifted(),
            ..CorpusSource::default()
        };
        Self {
            seed: 0,
            corpus,
            target,
            unlabeled: None,
            noise: NoiseSource::default(),
            features: FeatureConfig::desk(),
            model: ModelSection::default(),
            train: TrainConfig {
                lr: 1e-3,
                max_epochs: 20,
                ..TrainConfig::default()
            },
            protocol: ProtocolConfig::default(),
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses an override value: JSON / TOML literal when it parses, else a
/// bare string.
fn parse_value(raw: &str) -> Value {
    if let Ok(v) = serde_json::from_str::<Value>(raw) {
        return v;
    }
    if let Ok(t) = toml::from_str::<toml::Table>(&format!("v = {}", raw)) {
        if let Ok(Value::Object(mut o)) = serde_json::to_value(t) {
            if let Some(v) = o.remove("v") {
                return v;
            }
        }
    }
    Value::String(raw.to_string())
}

/// Applies `key.path=value`.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| Error::Schema {
        field: spec.to_string(),
        msg: "override must look like key=value".into(),
    })?;
    let mut cur = root;
    let parts: Vec<&str> = key.trim().split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        if p.is_empty() {
            return Err(Error::Schema {
                field: key.to_string(),
                msg: "empty path segment".into(),
            });
        }
        if !cur.is_object() {
            *cur = Value::Object(Default::default());
        }
        let obj = cur.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            obj.insert(p.to_string(), parse_value(raw.trim()));
            return Ok(());
        }
        cur = obj.entry(p.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

fn read_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        serde_json::from_str(&text).map_err(|e| Error::Schema {
            field: "<file>".into(),
            msg: e.to_string(),
        })
    } else {
        let t: toml::Table = toml::from_str(&text).map_err(|e| Error::Schema {
            field: "<file>".into(),
            msg: e.to_string(),
        })?;
        Ok(serde_json::to_value(t)?)
    }
}

impl ExperimentConfig {
    /// Defaults, then the file (TOML, or JSON by extension), then overrides,
    /// then `seed`. Unknown keys and wrong types report their dotted path.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut v = serde_json::to_value(Self::default())?;
        if let Some(p) = path {
            if !p.exists() {
                return Err(Error::Io {
                    path: p.to_path_buf(),
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "config file not found"),
                });
            }
            merge(&mut v, read_file(p)?);
        }
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        if let Some(s) = seed {
            v["seed"] = Value::from(s);
        }
        let cfg: Self = serde_path_to_error::deserialize(v).map_err(|e| Error::Schema {
            field: e.path().to_string(),
            msg: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let schema = |field: &str| {
            let field = field.to_string();
            move |e: mtlaug_core::Error| Error::Schema { field, msg: e.to_string() }
        };
        self.features.validate().map_err(schema("features"))?;
        self.corpus.synth.validate().map_err(schema("corpus.synth"))?;
        self.target.synth.validate().map_err(schema("target.synth"))?;
        self.model.build(&self.features).map_err(schema("model"))?;
        self.train.validate().map_err(schema("train"))?;
        let p = &self.protocol;
        let bad = |field: &str, msg: &str| {
            Err(Error::Schema {
                field: format!("protocol.{}", field),
                msg: msg.into(),
            })
        };
        if p.n_repeats == 0 {
            return bad("n_repeats", "must be at least 1");
        }
        if p.snrs.iter().any(|s| !s.is_finite()) {
            return bad("snrs", "must be finite (clean is always reported)");
        }
        if !(p.attack_eps.is_finite() && p.attack_eps >= 0.0) {
            return bad("attack_eps", "must be finite and non-negative");
        }
        if p.bim_steps == 0 {
            return bad("bim_steps", "must be at least 1");
        }
        if p.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("fractions", "every fraction must lie in (0, 1]");
        }
        if self.noise.files.is_empty() && self.noise.colors.is_empty() {
            return bad("noise", "need noise files or synthetic colours");
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(self.model.build(&self.features)?)
    }

    pub fn setup(&self) -> Result<Setup> {
        Ok(Setup {
            extractor: LogMelExtractor::new(&self.features)?,
            model: self.model_config()?,
            train: self.train.clone(),
            base_seed: self.seed,
            n_repeats: self.protocol.n_repeats,
        })
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.canonical_json().as_bytes());
        hex::encode(&d[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = ExperimentConfig::load(None, &[], None).unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn overrides_and_paths() {
        let c = ExperimentConfig::load(None, &["train.lr=0.01".into(), "model.ablation=4".into(), "corpus.synth.name=abc".into()], Some(9))
            .unwrap();
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.model.ablation, 4);
        assert_eq!(c.corpus.synth.name, "abc");
        assert_eq!(c.seed, 9);
        let e = ExperimentConfig::load(None, &["train.lr=fast".into()], None).unwrap_err();
        match e {
            Error::Schema { field, .. } => assert_eq!(field, "train.lr"),
            other => panic!("{:?}", other),
        }
        let e = ExperimentConfig::load(None, &["train.bogus=1".into()], None).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = ExperimentConfig::load(None, &["model.ablation=4".into(), "model.lambda1=0.5".into()], None).unwrap_err();
        assert!(matches!(e, Error::Schema { ref field, .. } if field == "model"), "{:?}", e);
    }

    #[test]
    fn toml_file_merges_onto_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 5\n[train]\nbatch_size = 16\n").unwrap();
        let c = ExperimentConfig::load(Some(&p), &[], None).unwrap();
        assert_eq!(c.train.batch_size, 16);
        assert_eq!(c.train.lr, 1e-3);
        assert_eq!(c.seed, 5);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
