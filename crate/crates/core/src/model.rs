//! Encoder, decoder, emotion head and augmentation-type head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::augment::N_AUG_TYPES;
use crate::autodiff::layers::{mean_pool, AttentionPool, BiLstm, Conv2d, ConvTranspose2d, Dense};
use crate::autodiff::{Geom, Group, ParamStore, Real, Tape, Tensor, Var};
use crate::corpus::N_CLASSES;
use crate::dsp::{FeatureConfig, LogMelSpectrogram};
use crate::error::{shape, Error, Result};
use crate::rng;

/// One encoder convolution; padding is `kernel / 2` on each axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
}

impl ConvSpec {
    pub fn geom(&self) -> Geom {
        Geom {
            kh: self.kernel[0],
            kw: self.kernel[1],
            sh: self.stride[0],
            sw: self.stride[1],
            ph: self.kernel[0] / 2,
            pw: self.kernel[1] / 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input height (mel channels) and width (frames).
    pub n_mels: usize,
    pub n_frames: usize,
    pub encoder: Vec<ConvSpec>,
    pub ce_units: usize,
    pub ce_dense: usize,
    pub ca_units: usize,
    pub ca_dense: usize,
    pub ca_dropout: f64,
    pub use_attention: bool,
    pub use_center_loss: bool,
    pub use_aux_augtype: bool,
    pub use_aux_reconstruction: bool,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Internal weights of the auxiliary sum.
    pub w_augtype: f64,
    pub w_recon: f64,
    /// Reconstruction error summed over cells instead of averaged.
    pub recon_sum: bool,
    /// Centre update rate.
    pub center_alpha: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::reference(&FeatureConfig::default())
    }
}

impl ModelConfig {
    /// Full-size network: four convolutions (7x7 then 3x3, channels 32, 64,
    /// 64, 128, stride 2 on the first two), BLSTM 128 + dense 128 for the
    /// emotion head, BLSTM 256 + two dense 128 for the augmentation head.
    pub fn reference(features: &FeatureConfig) -> Self {
        let c = |channels, k, s| ConvSpec {
            channels,
            kernel: [k, k],
            stride: [s, s],
        };
        Self {
            n_mels: features.n_mels,
            n_frames: features.n_frames(),
            encoder: vec![c(32, 7, 2), c(64, 3, 2), c(64, 3, 1), c(128, 3, 1)],
            ce_units: 128,
            ce_dense: 128,
            ca_units: 256,
            ca_dense: 128,
            ca_dropout: 0.3,
            use_attention: true,
            use_center_loss: true,
            use_aux_augtype: true,
            use_aux_reconstruction: true,
            lambda1: 0.5,
            lambda2: 0.3,
            w_augtype: 1.0,
            w_recon: 1.0,
            recon_sum: false,
            center_alpha: 0.5,
            init_seed: 0,
        }
    }

    /// Small network for CPU runs on short clips.
    pub fn desk(features: &FeatureConfig) -> Self {
        let c = |channels, k, s| ConvSpec {
            channels,
            kernel: [k, k],
            stride: [s, s],
        };
        Self {
            encoder: vec![c(8, 5, 2), c(8, 3, 2)],
            ce_units: 24,
            ce_dense: 32,
            ca_units: 24,
            ca_dense: 32,
            ..Self::reference(features)
        }
    }

    /// Applies the component switches of ablation model `k` (1 = everything,
    /// 5 = plain encoder + BLSTM with mean pooling). Aux-free models get
    /// `lambda1 = 0`.
    pub fn ablation(mut self, k: usize) -> Result<Self> {
        let (aug, rec, center, att) = match k {
            1 => (true, true, true, true),
            2 => (false, true, true, true),
            3 => (false, false, true, true),
            4 => (false, false, false, true),
            5 => (false, false, false, false),
            _ => return Err(Error::Config(format!("ablation model {} not in 1..=5", k))),
        };
        self.use_aux_augtype = aug;
        self.use_aux_reconstruction = rec;
        self.use_center_loss = center;
        self.use_attention = att;
        if !aug && !rec {
            self.lambda1 = 0.0;
        }
        Ok(self)
    }

    pub fn has_aux(&self) -> bool {
        self.use_aux_augtype || self.use_aux_reconstruction
    }

    /// `(channels, height, width)` of every encoder stage, input first.
    pub fn stage_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut shapes = vec![(1, self.n_mels, self.n_frames)];
        for (i, spec) in self.encoder.iter().enumerate() {
            let &(_, h, w) = shapes.last().expect("non-empty");
            let (ho, wo) = spec
                .geom()
                .conv_out(h, w)
                .ok_or_else(|| Error::Config(format!("encoder layer {} does not fit a {}x{} input", i, h, w)))?;
            shapes.push((spec.channels, ho, wo));
        }
        Ok(shapes)
    }

    /// Latent sequence length and per-step width.
    pub fn latent_shape(&self) -> Result<(usize, usize)> {
        let &(c, h, w) = self.stage_shapes()?.last().expect("non-empty");
        Ok((w, c * h))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.encoder.is_empty() {
            return cfg("encoder needs at least one convolution".into());
        }
        if self.encoder.iter().any(|s| s.channels == 0 || s.kernel.contains(&0) || s.stride.contains(&0)) {
            return cfg("encoder channels, kernels and strides must be positive".into());
        }
        if self.ce_units == 0 || self.ce_dense == 0 || self.ca_units == 0 || self.ca_dense == 0 {
            return cfg("layer widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ca_dropout) {
            return cfg(format!("ca_dropout {} not in [0, 1)", self.ca_dropout));
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("w_augtype", self.w_augtype),
            ("w_recon", self.w_recon),
            ("center_alpha", self.center_alpha),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return cfg(format!("{} must be finite and non-negative, got {}", name, v));
            }
        }
        if self.lambda1 > 0.0 && !self.has_aux() {
            return cfg("lambda1 > 0 but both auxiliary heads are disabled".into());
        }
        self.stage_shapes().map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct AugHead {
    lstm: BiLstm,
    hidden1: Dense,
    hidden2: Dense,
    out: Dense,
}

/// Learnable parameters plus non-graph state (centres, input scaling).
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    encoder: Vec<Conv2d>,
    decoder: Vec<(ConvTranspose2d, (usize, usize))>,
    ce_lstm: BiLstm,
    attention: Option<AttentionPool>,
    ce_hidden: Dense,
    ce_out: Dense,
    ca: Option<AugHead>,
    /// `n_classes x ce_dense` centre-loss centres.
    pub centers: Tensor<T>,
    /// Scalar standardisation applied to every input cell.
    pub input_mean: f64,
    pub input_std: f64,
}

/// Which heads a forward pass evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Heads {
    pub emotion: bool,
    pub augtype: bool,
    pub reconstruction: bool,
}

impl Heads {
    pub const ALL: Heads = Heads {
        emotion: true,
        augtype: true,
        reconstruction: true,
    };
    pub const EMOTION: Heads = Heads {
        emotion: true,
        augtype: false,
        reconstruction: false,
    };
}

/// Graph handles produced by [`Model::forward`].
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    /// Standardised input `[n, 1, mels, frames]`, the reconstruction target.
    pub input: Var,
    /// Latent sequence `[t, n, d]`.
    pub latent: Var,
    pub logits: Option<Var>,
    /// Deep features `[n, ce_dense]` used by the centre loss.
    pub features: Option<Var>,
    pub attention: Option<Var>,
    pub aug_logits: Option<Var>,
    pub reconstruction: Option<Var>,
}

impl<T: Real> Model<T> {
    /// Instantiates only the components the flags ask for. Encoder
    /// initialisation depends on `init_seed` alone, so switching heads on or
    /// off leaves it unchanged.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let shapes = config.stage_shapes()?;
        let (_, width) = config.latent_shape()?;
        let mut store = ParamStore::new();
        let part = |tag: u64| rng::stream(config.init_seed, &[rng::tag::INIT, tag]);

        let mut r = part(0);
        let encoder = config
            .encoder
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                Conv2d::new(&mut store, &format!("encoder.conv{}", i), Group::Encoder, shapes[i].0, spec.channels, spec.geom(), &mut r)
            })
            .collect();

        let mut r = part(1);
        let ce_lstm = BiLstm::new(&mut store, "emotion.blstm", Group::Emotion, width, config.ce_units, &mut r);
        let d = 2 * config.ce_units;
        let attention = if config.use_attention {
            Some(AttentionPool::new(&mut store, "emotion.attention", Group::Emotion, d, &mut part(2)))
        } else {
            None
        };
        let mut r = part(3);
        let ce_hidden = Dense::new(&mut store, "emotion.hidden", Group::Emotion, d, config.ce_dense, &mut r);
        let ce_out = Dense::new(&mut store, "emotion.out", Group::Emotion, config.ce_dense, N_CLASSES, &mut r);

        let ca = if config.use_aux_augtype {
            let mut r = part(4);
            let lstm = BiLstm::new(&mut store, "augtype.blstm", Group::AugType, width, config.ca_units, &mut r);
            let hidden1 = Dense::new(&mut store, "augtype.hidden1", Group::AugType, 2 * config.ca_units, config.ca_dense, &mut r);
            let hidden2 = Dense::new(&mut store, "augtype.hidden2", Group::AugType, config.ca_dense, config.ca_dense, &mut r);
            let out = Dense::new(&mut store, "augtype.out", Group::AugType, config.ca_dense, N_AUG_TYPES, &mut r);
            Some(AugHead { lstm, hidden1, hidden2, out })
        } else {
            None
        };

        let decoder = if config.use_aux_reconstruction {
            let mut r = part(5);
            (0..config.encoder.len())
                .rev()
                .map(|i| {
                    let spec = config.encoder[i];
                    let g = spec.geom();
                    let (_, hi, wi) = shapes[i + 1];
                    let (co, ht, wt) = shapes[i];
                    let (hb, wb) = g.transpose_out(hi, wi, 0, 0).expect("transposed extent");
                    let pad = (ht - hb, wt - wb);
                    let layer = ConvTranspose2d::new(&mut store, &format!("decoder.deconv{}", i), Group::Decoder, spec.channels, co, g, &mut r);
                    (layer, pad)
                })
                .collect()
        } else {
            Vec::new()
        };

        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            decoder,
            ce_lstm,
            attention,
            ce_hidden,
            ce_out,
            ca,
            centers: Tensor::zeros(vec![N_CLASSES, config.ce_dense]),
            input_mean: 0.0,
            input_std: 1.0,
        })
    }

    pub fn has_decoder(&self) -> bool {
        !self.decoder.is_empty()
    }

    pub fn has_augtype_head(&self) -> bool {
        self.ca.is_some()
    }

    /// Number of scalar parameters, centres included.
    pub fn n_parameters(&self) -> usize {
        self.store.numel() + if self.config.use_center_loss { self.centers.len() } else { 0 }
    }

    /// Copies values and state into another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            ce_lstm: self.ce_lstm,
            attention: self.attention,
            ce_hidden: self.ce_hidden,
            ce_out: self.ce_out,
            ca: self.ca.clone(),
            centers: self.centers.cast(),
            input_mean: self.input_mean,
            input_std: self.input_std,
        }
    }

    /// Packs spectrograms into a raw `[n, 1, mels, frames]` batch.
    pub fn batch(&self, specs: &[&LogMelSpectrogram]) -> Result<Tensor<T>> {
        let (m, t) = (self.config.n_mels, self.config.n_frames);
        let mut data = Vec::with_capacity(specs.len() * m * t);
        for s in specs {
            if s.shape() != (m, t) {
                return Err(shape("model input", format!("expected {}x{}, got {:?}", m, t, s.shape())));
            }
            data.extend(s.data().iter().map(|&v| T::of(v as f64)));
        }
        Tensor::new(vec![specs.len(), 1, m, t], data)
    }

    /// Standardises the raw batch node `x` (`(x - mean) / std`).
    fn standardise(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let inv = 1.0 / self.input_std;
        let scaled = tape.scale(x, T::of(inv))?;
        let shift = tape.constant(Tensor::from_fn(vec![self.config.n_frames], |_| T::of(-self.input_mean * inv)));
        tape.add_bias(scaled, shift)
    }

    pub fn encode(&self, tape: &mut Tape<T>, input: Var) -> Result<Var> {
        let s = tape.shape(input).to_vec();
        if s.len() != 4 || s[1] != 1 || s[2] != self.config.n_mels || s[3] != self.config.n_frames {
            return Err(shape(
                "encoder",
                format!("expected [n, 1, {}, {}], got {:?}", self.config.n_mels, self.config.n_frames, s),
            ));
        }
        let mut h = input;
        for conv in &self.encoder {
            h = conv.forward(tape, &self.store, h)?;
            h = tape.relu(h)?;
        }
        Ok(h)
    }

    /// `[n, c, h, w]` feature map to the time-major sequence `[w, n, c*h]`.
    fn to_sequence(tape: &mut Tape<T>, z: Var) -> Result<Var> {
        let s = tape.shape(z).to_vec();
        let p = tape.permute(z, &[3, 0, 1, 2])?;
        tape.reshape(p, vec![s[3], s[0], s[1] * s[2]])
    }

    /// Evaluates the requested heads on a raw batch node `x`
    /// (`[n, 1, mels, frames]`, before standardisation). Dropout draws come
    /// from `rng` only when `train` is set.
    pub fn forward<R: rand::RngCore>(&self, tape: &mut Tape<T>, x: Var, heads: Heads, train: bool, rng: &mut R) -> Result<Outputs> {
        let input = self.standardise(tape, x)?;
        let z = self.encode(tape, input)?;
        let latent = Self::to_sequence(tape, z)?;
        let mut out = Outputs {
            input,
            latent,
            logits: None,
            features: None,
            attention: None,
            aug_logits: None,
            reconstruction: None,
        };
        if heads.emotion {
            let h = self.ce_lstm.forward(tape, &self.store, latent)?.sequence;
            let pooled = match &self.attention {
                Some(att) => {
                    let a = att.forward(tape, &self.store, h)?;
                    out.attention = Some(a.weights);
                    a.pooled
                }
                None => mean_pool(tape, h)?,
            };
            let f = self.ce_hidden.forward(tape, &self.store, pooled)?;
            let f = tape.relu(f)?;
            out.features = Some(f);
            out.logits = Some(self.ce_out.forward(tape, &self.store, f)?);
        }
        if heads.augtype {
            if let Some(ca) = &self.ca {
                let fin = ca.lstm.forward(tape, &self.store, latent)?.final_state;
                let h = ca.hidden1.forward(tape, &self.store, fin)?;
                let h = tape.relu(h)?;
                let h = tape.dropout(h, self.config.ca_dropout, train, rng)?;
                let h = ca.hidden2.forward(tape, &self.store, h)?;
                let h = tape.relu(h)?;
                out.aug_logits = Some(ca.out.forward(tape, &self.store, h)?);
            }
        }
        if heads.reconstruction && !self.decoder.is_empty() {
            let mut h = z;
            let last = self.decoder.len() - 1;
            for (i, (layer, pad)) in self.decoder.iter().enumerate() {
                h = layer.forward(tape, &self.store, h, *pad)?;
                if i != last {
                    h = tape.relu(h)?;
                }
            }
            out.reconstruction = Some(h);
        }
        Ok(out)
    }

    /// Emotion class scores for a batch, dropout off.
    pub fn emotion_logits(&self, specs: &[&LogMelSpectrogram]) -> Result<Vec<[f64; N_CLASSES]>> {
        self.logits_of(specs, Heads::EMOTION, |o| o.logits)
    }

    /// Augmentation-type scores for a batch, dropout off.
    pub fn augtype_logits(&self, specs: &[&LogMelSpectrogram]) -> Result<Vec<[f64; N_AUG_TYPES]>> {
        if self.ca.is_none() {
            return Err(Error::Usage("model has no augmentation-type head".into()));
        }
        let heads = Heads {
            emotion: false,
            augtype: true,
            reconstruction: false,
        };
        self.logits_of(specs, heads, |o| o.aug_logits)
    }

    fn logits_of(&self, specs: &[&LogMelSpectrogram], heads: Heads, pick: impl Fn(&Outputs) -> Option<Var>) -> Result<Vec<[f64; 4]>> {
        let mut tape = Tape::new();
        let x = tape.constant(self.batch(specs)?);
        let mut unused = rng::stream(0, &[]);
        let out = self.forward(&mut tape, x, heads, false, &mut unused)?;
        let v = pick(&out).expect("requested head");
        Ok(tape
            .data(v)
            .chunks(4)
            .map(|r| [r[0].f64(), r[1].f64(), r[2].f64(), r[3].f64()])
            .collect())
    }

    /// Predicted emotion indices, processed in chunks of `batch`.
    pub fn predict(&self, specs: &[&LogMelSpectrogram], batch: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(specs.len());
        for chunk in specs.chunks(batch.max(1)) {
            out.extend(self.emotion_logits(chunk)?.iter().map(argmax));
        }
        Ok(out)
    }

    pub fn predict_augtype(&self, specs: &[&LogMelSpectrogram], batch: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(specs.len());
        for chunk in specs.chunks(batch.max(1)) {
            out.extend(self.augtype_logits(chunk)?.iter().map(argmax));
        }
        Ok(out)
    }

    /// Digest of the emotion-head parameters and the centres.
    pub fn emotion_checksum(&self) -> u64 {
        let mut h = self.store.checksum(Some(Group::Emotion));
        for v in self.centers.data() {
            h = (h ^ v.f64().to_bits()).wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(row: &[f64; 4]) -> usize {
    let mut best = 0;
    for i in 1..4 {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::softmax_in_place;

    fn small() -> ModelConfig {
        let f = FeatureConfig {
            n_mels: 12,
            target_dur_s: 0.2,
            ..FeatureConfig::desk()
        };
        ModelConfig {
            encoder: vec![
                ConvSpec { channels: 3, kernel: [5, 5], stride: [2, 2] },
                ConvSpec { channels: 4, kernel: [3, 3], stride: [2, 2] },
            ],
            ce_units: 4,
            ce_dense: 5,
            ca_units: 6,
            ca_dense: 5,
            ..ModelConfig::desk(&f)
        }
    }

    fn spec(cfg: &ModelConfig, seed: u64) -> LogMelSpectrogram {
        use rand::Rng as _;
        let mut r = rng::stream(seed, &[]);
        LogMelSpectrogram::new(cfg.n_mels, cfg.n_frames, (0..cfg.n_mels * cfg.n_frames).map(|_| r.gen_range(-3.0f32..3.0)).collect()).unwrap()
    }

    #[test]
    fn decoder_closes_the_autoencoder() {
        for frames in [17, 20, 21, 97] {
            let cfg = ModelConfig { n_frames: frames, ..small() };
            let m: Model<f32> = Model::new(&cfg).unwrap();
            let s = spec(&cfg, 1);
            let mut tape = Tape::new();
            let x = tape.constant(m.batch(&[&s, &s]).unwrap());
            let out = m.forward(&mut tape, x, Heads::ALL, false, &mut rng::stream(0, &[])).unwrap();
            let rec = out.reconstruction.unwrap();
            assert_eq!(tape.shape(rec), tape.shape(out.input));
            assert!(tape.value(rec).all_finite());
            let (t, d) = cfg.latent_shape().unwrap();
            assert_eq!(tape.shape(out.latent), &[t, 2, d]);
            let l = tape.data(out.logits.unwrap());
            assert_eq!(&l[..4], &l[4..]);
            assert_eq!(tape.shape(out.features.unwrap()), &[2, 5]);
            assert_eq!(tape.shape(out.aug_logits.unwrap()), &[2, 4]);
        }
    }

    #[test]
    fn eval_mode_is_deterministic_and_softmax_normalised() {
        let cfg = small();
        let m: Model<f32> = Model::new(&cfg).unwrap();
        let (a, b) = (spec(&cfg, 2), spec(&cfg, 3));
        let l1 = m.emotion_logits(&[&a, &b]).unwrap();
        let l2 = m.emotion_logits(&[&a, &b]).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(m.augtype_logits(&[&a]).unwrap(), m.augtype_logits(&[&a]).unwrap());
        for row in l1 {
            let mut p = row.to_vec();
            softmax_in_place(&mut p);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn train_mode_dropout_is_seeded() {
        let cfg = small();
        let m: Model<f32> = Model::new(&cfg).unwrap();
        let s = spec(&cfg, 4);
        let run = |seed| {
            let mut tape = Tape::new();
            let x = tape.constant(m.batch(&[&s]).unwrap());
            let o = m.forward(&mut tape, x, Heads::ALL, true, &mut rng::stream(seed, &[])).unwrap();
            tape.data(o.aug_logits.unwrap()).to_vec()
        };
        assert_eq!(run(5), run(5));
    }

    #[test]
    fn ablation_components_and_parameter_counts() {
        let base = small();
        let counts: Vec<usize> = (1..=5)
            .map(|k| Model::<f32>::new(&base.clone().ablation(k).unwrap()).unwrap().n_parameters())
            .collect();
        assert!(counts.windows(2).all(|w| w[0] > w[1]), "{:?}", counts);
        let full: Model<f32> = Model::new(&base.clone().ablation(1).unwrap()).unwrap();
        assert!(full.has_decoder() && full.has_augtype_head() && full.attention.is_some());
        assert!(full.store.find("emotion.attention.weight").is_some());
        let m5: Model<f32> = Model::new(&base.clone().ablation(5).unwrap()).unwrap();
        assert!(!m5.has_decoder() && !m5.has_augtype_head() && m5.attention.is_none());
        assert_eq!(m5.store.numel_in(Group::Decoder) + m5.store.numel_in(Group::AugType), 0);
        assert!(base.clone().ablation(6).is_err());
    }

    #[test]
    fn encoder_init_independent_of_heads() {
        let base = small();
        let a: Model<f32> = Model::new(&base).unwrap();
        let b: Model<f32> = Model::new(&ModelConfig { use_attention: false, ..base.clone() }).unwrap();
        assert_eq!(a.store.checksum(Some(Group::Encoder)), b.store.checksum(Some(Group::Encoder)));
    }

    #[test]
    fn lambda1_without_aux_is_config_error() {
        let cfg = ModelConfig {
            use_aux_augtype: false,
            use_aux_reconstruction: false,
            lambda1: 0.5,
            ..small()
        };
        assert!(matches!(Model::<f32>::new(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn reference_shapes() {
        let cfg = ModelConfig::reference(&FeatureConfig::default());
        assert_eq!(cfg.n_frames, 747);
        let st = cfg.stage_shapes().unwrap();
        assert_eq!(st[1], (32, 64, 374));
        assert_eq!(cfg.latent_shape().unwrap(), (187, 128 * 32));
    }
}
