//! Speed perturbation, SpecAugment, mixup and augmentation-type-labeled
//! training sets.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Emotion, N_CLASSES};
use crate::dsp::{resample, LogMelExtractor, LogMelSpectrogram, Waveform};
use crate::error::{validation, Error, Result};
use crate::rng;

/// Label of the auxiliary four-way task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum AugmentationType {
    None = 0,
    Speed = 1,
    SpecAugment = 2,
    Mixup = 3,
}

pub const N_AUG_TYPES: usize = 4;

impl AugmentationType {
    pub const ALL: [AugmentationType; N_AUG_TYPES] = [
        AugmentationType::None,
        AugmentationType::Speed,
        AugmentationType::SpecAugment,
        AugmentationType::Mixup,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AugmentationType::None => "none",
            AugmentationType::Speed => "speed",
            AugmentationType::SpecAugment => "specaugment",
            AugmentationType::Mixup => "mixup",
        }
    }
}

/// Value written into masked cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskValue {
    /// Mean of the input spectrogram.
    Mean,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecAugmentParams {
    /// Largest frequency-mask width `F`, in mel channels.
    pub freq_mask_max: usize,
    /// Largest time-mask width, in frames.
    pub time_mask_max: usize,
    pub n_freq_masks: usize,
    pub n_time_masks: usize,
    pub mask_value: MaskValue,
}

impl Default for SpecAugmentParams {
    fn default() -> Self {
        Self {
            freq_mask_max: 27,
            time_mask_max: 100,
            n_freq_masks: 1,
            n_time_masks: 1,
            mask_value: MaskValue::Mean,
        }
    }
}

impl SpecAugmentParams {
    pub fn validate(&self, n_mels: usize, n_frames: usize) -> Result<()> {
        if self.freq_mask_max > n_mels {
            return Err(validation(format!(
                "frequency mask width {} exceeds {} mel channels",
                self.freq_mask_max, n_mels
            )));
        }
        if self.time_mask_max > n_frames {
            return Err(validation(format!(
                "time mask width {} exceeds {} frames",
                self.time_mask_max, n_frames
            )));
        }
        Ok(())
    }

    /// Caps both widths at the given shape.
    pub fn clamped(&self, n_mels: usize, n_frames: usize) -> Self {
        Self {
            freq_mask_max: self.freq_mask_max.min(n_mels),
            time_mask_max: self.time_mask_max.min(n_frames),
            ..self.clone()
        }
    }
}

/// A band `[start, start + width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub start: usize,
    pub width: usize,
}

/// Masks drawn by [`draw_masks`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Masks {
    pub freq: Vec<Mask>,
    pub time: Vec<Mask>,
}

fn draw_band<R: rand::RngCore>(max_width: usize, extent: usize, rng: &mut R) -> Mask {
    let width = rng.gen_range(0..=max_width);
    let start = if width >= extent { 0 } else { rng.gen_range(0..extent - width) };
    Mask { start, width }
}

/// `f ~ U{0..F}`, `f0 ~ U[0, v - f)`, and likewise over frames.
pub fn draw_masks<R: rand::RngCore>(params: &SpecAugmentParams, n_mels: usize, n_frames: usize, rng: &mut R) -> Result<Masks> {
    params.validate(n_mels, n_frames)?;
    let freq = (0..params.n_freq_masks)
        .map(|_| draw_band(params.freq_mask_max, n_mels, rng))
        .collect();
    let time = (0..params.n_time_masks)
        .map(|_| draw_band(params.time_mask_max, n_frames, rng))
        .collect();
    Ok(Masks { freq, time })
}

/// Writes the masks into a copy of `spec`.
pub fn apply_masks(spec: &LogMelSpectrogram, masks: &Masks, value: MaskValue) -> Result<LogMelSpectrogram> {
    let (v, tau) = spec.shape();
    for m in &masks.freq {
        if m.start + m.width > v {
            return Err(validation(format!("frequency mask {:?} exceeds {} channels", m, v)));
        }
    }
    for m in &masks.time {
        if m.start + m.width > tau {
            return Err(validation(format!("time mask {:?} exceeds {} frames", m, tau)));
        }
    }
    let fill = match value {
        MaskValue::Mean => spec.mean(),
        MaskValue::Zero => 0.0,
    };
    let mut out = spec.clone();
    let data = out.data_mut();
    for m in &masks.freq {
        data[m.start * tau..(m.start + m.width) * tau].fill(fill);
    }
    for m in &masks.time {
        for row in data.chunks_mut(tau) {
            row[m.start..m.start + m.width].fill(fill);
        }
    }
    Ok(out)
}

pub fn spec_augment<R: rand::RngCore>(spec: &LogMelSpectrogram, params: &SpecAugmentParams, rng: &mut R) -> Result<LogMelSpectrogram> {
    let (v, tau) = spec.shape();
    let masks = draw_masks(params, v, tau, rng)?;
    apply_masks(spec, &masks, params.mask_value)
}

/// Law of the mixup weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaSource {
    Fixed(f64),
    /// Symmetric `Beta(a, a)`.
    Beta(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixupParams {
    pub lambda: LambdaSource,
}

impl Default for MixupParams {
    fn default() -> Self {
        Self {
            lambda: LambdaSource::Beta(0.2),
        }
    }
}

impl MixupParams {
    pub fn validate(&self) -> Result<()> {
        match self.lambda {
            LambdaSource::Fixed(l) if !(0.0..=1.0).contains(&l) => Err(validation(format!("fixed mixup weight {} not in [0, 1]", l))),
            LambdaSource::Beta(a) if !(a > 0.0 && a.is_finite()) => Err(validation(format!("beta parameter {} must be positive", a))),
            _ => Ok(()),
        }
    }

    pub fn sample<R: rand::RngCore>(&self, rng: &mut R) -> Result<f64> {
        self.validate()?;
        Ok(match self.lambda {
            LambdaSource::Fixed(l) => l,
            LambdaSource::Beta(a) => {
                let beta = Beta::new(a, a).map_err(|e| validation(format!("beta({}): {}", a, e)))?;
                beta.sample(rng).clamp(0.0, 1.0)
            }
        })
    }
}

/// `lambda * a + (1 - lambda) * b`, cellwise, evaluated as
/// `q + mu * (p - q)` with `mu <= 1/2`. Weights above one half swap the
/// operands, so `mixup(a, b, l)` and `mixup(b, a, 1 - l)` evaluate the same
/// expression, and rounding can never leave the segment between the inputs.
/// An even split uses the commutative form.
fn convex(a: &[f32], b: &[f32], lambda: f64) -> Vec<f32> {
    let (p, q, mu) = if lambda > 0.5 { (b, a, 1.0 - lambda) } else { (a, b, lambda) };
    let w = mu as f32;
    if w == 0.5 {
        return p.iter().zip(q).map(|(&x, &y)| 0.5 * x + 0.5 * y).collect();
    }
    p.iter().zip(q).map(|(&x, &y)| y + w * (x - y)).collect()
}

/// Mixes features and soft labels with weight `lambda` on `a`.
pub fn mixup(
    a: (&LogMelSpectrogram, &[f32; N_CLASSES]),
    b: (&LogMelSpectrogram, &[f32; N_CLASSES]),
    lambda: f64,
) -> Result<(LogMelSpectrogram, [f32; N_CLASSES])> {
    if a.0.shape() != b.0.shape() {
        return Err(validation(format!("mixup of shapes {:?} and {:?}", a.0.shape(), b.0.shape())));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(validation(format!("mixup weight {} not in [0, 1]", lambda)));
    }
    let (m, t) = a.0.shape();
    let x = LogMelSpectrogram::new(m, t, convex(a.0.data(), b.0.data(), lambda))?;
    let y = convex(a.1, b.1, lambda);
    Ok((x, [y[0], y[1], y[2], y[3]]))
}

/// Time warp of raw audio by `factor` (see [`resample`]).
pub fn speed_perturb(wave: &Waveform, factor: f64) -> Result<Waveform> {
    resample(wave, factor)
}

/// One unit of multitask training.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSample {
    pub features: LogMelSpectrogram,
    /// Soft emotion target; `None` for unlabeled speech.
    pub emotion: Option<[f32; N_CLASSES]>,
    pub aug_type: AugmentationType,
    pub source_ids: Vec<String>,
}

impl AugmentedSample {
    /// Hard class for the centre loss: present for labeled, non-mixup samples.
    pub fn center_label(&self) -> Option<usize> {
        if self.aug_type == AugmentationType::Mixup {
            return None;
        }
        self.emotion.and_then(|y| y.iter().position(|&v| v == 1.0))
    }
}

/// Which augmented variants to emit per source utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub include_none: bool,
    /// One speed-perturbed copy per factor.
    pub speed_factors: Vec<f64>,
    pub specaugment_copies: usize,
    /// Mixup copies per labeled utterance.
    pub mixup_copies: usize,
    pub specaugment: SpecAugmentParams,
    pub mixup: MixupParams,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            include_none: true,
            speed_factors: vec![0.9, 1.1],
            specaugment_copies: 1,
            mixup_copies: 1,
            specaugment: SpecAugmentParams::default(),
            mixup: MixupParams::default(),
        }
    }
}

impl AugmentPolicy {
    /// Originals only.
    pub fn none() -> Self {
        Self {
            speed_factors: Vec::new(),
            specaugment_copies: 0,
            mixup_copies: 0,
            ..Self::default()
        }
    }

    /// Originals plus a single augmentation type at its default multiplicity.
    pub fn only(kind: AugmentationType) -> Self {
        let d = Self::default();
        let mut p = Self::none();
        match kind {
            AugmentationType::None => {}
            AugmentationType::Speed => p.speed_factors = d.speed_factors,
            AugmentationType::SpecAugment => p.specaugment_copies = d.specaugment_copies,
            AugmentationType::Mixup => p.mixup_copies = d.mixup_copies,
        }
        p
    }

    pub fn types(&self) -> Vec<AugmentationType> {
        let mut t = Vec::new();
        if self.include_none {
            t.push(AugmentationType::None);
        }
        if !self.speed_factors.is_empty() {
            t.push(AugmentationType::Speed);
        }
        if self.specaugment_copies > 0 {
            t.push(AugmentationType::SpecAugment);
        }
        if self.mixup_copies > 0 {
            t.push(AugmentationType::Mixup);
        }
        t
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(f) = self.speed_factors.iter().find(|f| !(f.is_finite() && **f > 0.0)) {
            return Err(validation(format!("speed factor {} must be finite and positive", f)));
        }
        self.mixup.validate()
    }
}

/// Features of every utterance in `data`, in order.
pub fn extract_all(data: &Dataset, extractor: &LogMelExtractor) -> Result<Vec<LogMelSpectrogram>> {
    data.audio.iter().map(|w| extractor.extract(w)).collect()
}

/// Emits originals and augmented variants per `policy`. Every random draw
/// comes from a stream keyed by `(seed, utterance index)`, so the result
/// does not depend on evaluation order. `originals`, when given, must be
/// the unaugmented features of `data` and saves re-extraction.
pub fn build_augmented_set(
    data: &Dataset,
    extractor: &LogMelExtractor,
    policy: &AugmentPolicy,
    seed: u64,
    originals: Option<&[LogMelSpectrogram]>,
) -> Result<Vec<AugmentedSample>> {
    policy.validate()?;
    let owned;
    let feats = match originals {
        Some(f) if f.len() == data.len() => f,
        Some(f) => return Err(validation(format!("{} cached features for {} utterances", f.len(), data.len()))),
        None => {
            owned = extract_all(data, extractor)?;
            &owned[..]
        }
    };
    let utts = data.corpus.utterances();
    let labeled: Vec<usize> = (0..data.len()).filter(|&i| utts[i].emotion.is_some()).collect();
    if policy.mixup_copies > 0 && !labeled.is_empty() && labeled.len() < 2 {
        return Err(Error::Protocol("mixup needs at least two labeled utterances".into()));
    }
    let spec_params = match feats.first() {
        Some(f) => policy.specaugment.clamped(f.n_mels(), f.n_frames()),
        None => policy.specaugment.clone(),
    };
    let target = |e: Option<Emotion>| e.map(Emotion::one_hot);
    let mut out = Vec::new();
    for (i, u) in utts.iter().enumerate() {
        let mut r = rng::stream(seed, &[rng::tag::AUGMENT, i as u64]);
        let emotion = target(u.emotion);
        let ids = vec![u.id.clone()];
        let sample = |features, aug_type| AugmentedSample {
            features,
            emotion,
            aug_type,
            source_ids: ids.clone(),
        };
        if policy.include_none {
            out.push(sample(feats[i].clone(), AugmentationType::None));
        }
        for &factor in &policy.speed_factors {
            let warped = speed_perturb(&data.audio[i], factor)?;
            out.push(sample(extractor.extract(&warped)?, AugmentationType::Speed));
        }
        for _ in 0..policy.specaugment_copies {
            out.push(sample(spec_augment(&feats[i], &spec_params, &mut r)?, AugmentationType::SpecAugment));
        }
        if let Some(y) = emotion {
            for _ in 0..policy.mixup_copies {
                let pick = r.gen_range(0..labeled.len() - 1);
                let pos = labeled.binary_search(&i).expect("labeled index");
                let j = labeled[if pick >= pos { pick + 1 } else { pick }];
                let yj = target(utts[j].emotion).expect("labeled partner");
                let lambda = policy.mixup.sample(&mut r)?;
                let (x, y) = mixup((&feats[i], &y), (&feats[j], &yj), lambda)?;
                out.push(AugmentedSample {
                    features: x,
                    emotion: Some(y),
                    aug_type: AugmentationType::Mixup,
                    source_ids: vec![u.id.clone(), utts[j].id.clone()],
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, SynthConfig};
    use crate::dsp::FeatureConfig;
    use proptest::prelude::*;

    fn spec(m: usize, t: usize, seed: u64) -> LogMelSpectrogram {
        let mut r = rng::stream(seed, &[]);
        LogMelSpectrogram::new(m, t, (0..m * t).map(|_| r.gen_range(-20.0f32..5.0)).collect()).unwrap()
    }

    #[test]
    fn spec_augment_zero_widths_is_identity() {
        let s = spec(128, 50, 1);
        let p = SpecAugmentParams {
            freq_mask_max: 0,
            time_mask_max: 0,
            ..SpecAugmentParams::default()
        };
        let mut r = rng::stream(2, &[]);
        assert_eq!(spec_augment(&s, &p, &mut r).unwrap(), s);
    }

    #[test]
    fn forced_frequency_mask() {
        let s = spec(128, 30, 3);
        let masks = Masks {
            freq: vec![Mask { start: 5, width: 10 }],
            time: vec![],
        };
        let out = apply_masks(&s, &masks, MaskValue::Mean).unwrap();
        let fill = s.mean();
        let mut untouched_rows = 0;
        for m in 0..128 {
            let masked = (5..15).contains(&m);
            for t in 0..30 {
                if masked {
                    assert_eq!(out.get(m, t).to_bits(), fill.to_bits());
                } else {
                    assert_eq!(out.get(m, t).to_bits(), s.get(m, t).to_bits());
                }
            }
            untouched_rows += usize::from(!masked);
        }
        assert_eq!(untouched_rows, 118);
    }

    #[test]
    fn oversized_masks_rejected() {
        let s = spec(10, 10, 4);
        let mut r = rng::stream(2, &[]);
        let p = SpecAugmentParams {
            freq_mask_max: 11,
            ..SpecAugmentParams::default()
        };
        assert!(spec_augment(&s, &p, &mut r).is_err());
    }

    #[test]
    fn mixup_label_arithmetic() {
        let a = spec(4, 4, 5);
        let b = spec(4, 4, 6);
        let (x, y) = mixup((&a, &Emotion::Angry.one_hot()), (&b, &Emotion::Sad.one_hot()), 0.5).unwrap();
        assert_eq!(y, [0.5, 0.0, 0.0, 0.5]);
        assert_eq!(x.shape(), (4, 4));
        let (x1, y1) = mixup((&a, &Emotion::Angry.one_hot()), (&b, &Emotion::Sad.one_hot()), 1.0).unwrap();
        assert_eq!((x1, y1), (a.clone(), Emotion::Angry.one_hot()));
        let c = spec(3, 4, 7);
        assert!(mixup((&a, &[1.0, 0.0, 0.0, 0.0]), (&c, &[1.0, 0.0, 0.0, 0.0]), 0.3).is_err());
    }

    #[test]
    fn policy_histogram() {
        let cfg = SynthConfig {
            n_speakers: 5,
            utterances_per_speaker_per_class: 5,
            duration_s: 0.2,
            ..SynthConfig::default()
        };
        let data = synth_corpus(&cfg).unwrap();
        let fc = FeatureConfig { target_dur_s: 0.2, ..FeatureConfig::desk() };
        let ex = LogMelExtractor::new(&fc).unwrap();
        let set = build_augmented_set(&data, &ex, &AugmentPolicy::default(), 1, None).unwrap();
        assert_eq!(set.len(), 500);
        let mut hist = [0; 4];
        for s in &set {
            hist[s.aug_type.index()] += 1;
            assert_eq!(s.source_ids.len() == 2, s.aug_type == AugmentationType::Mixup);
            let y = s.emotion.unwrap();
            assert!((y.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(hist, [100, 200, 100, 100]);

        let only = build_augmented_set(&data, &ex, &AugmentPolicy::only(AugmentationType::Mixup), 1, None).unwrap();
        assert!(only.iter().all(|s| matches!(s.aug_type, AugmentationType::None | AugmentationType::Mixup)));

        let unl = data.unlabeled();
        let set = build_augmented_set(&unl, &ex, &AugmentPolicy::default(), 1, None).unwrap();
        assert_eq!(set.len(), 400);
        assert!(set.iter().all(|s| s.emotion.is_none() && s.aug_type != AugmentationType::Mixup));
    }

    #[test]
    fn speed_duration_arithmetic() {
        let w = Waveform::new(vec![0.1; 120_000], 16_000).unwrap();
        let slow = speed_perturb(&w, 0.9).unwrap();
        assert_eq!(slow.len(), 133_333);
        assert!((slow.duration_s() - 7.5 / 0.9).abs() < 1e-4);
        let fixed = crate::dsp::pad_or_truncate(&slow, 7.5);
        assert_eq!(fixed.len(), 120_000);
    }

    proptest! {
        #[test]
        fn mixup_symmetric_and_in_hull(seed in 0u64..500, lambda in 0.0f64..=1.0) {
            let a = spec(6, 7, seed);
            let b = spec(6, 7, seed + 1000);
            let ya = Emotion::Happy.one_hot();
            let yb = Emotion::Neutral.one_hot();
            let (x, y) = mixup((&a, &ya), (&b, &yb), lambda).unwrap();
            let (x2, y2) = mixup((&b, &yb), (&a, &ya), 1.0 - lambda).unwrap();
            let bits = |s: &LogMelSpectrogram| s.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&x), bits(&x2));
            prop_assert_eq!(y, y2);
            for ((&v, &p), &q) in x.data().iter().zip(a.data()).zip(b.data()) {
                prop_assert!(v >= p.min(q) && v <= p.max(q));
            }
        }

        #[test]
        fn masks_stay_in_bounds(seed in 0u64..10_000) {
            let p = SpecAugmentParams { freq_mask_max: 27, time_mask_max: 40, n_freq_masks: 2, n_time_masks: 2, ..SpecAugmentParams::default() };
            let mut r = rng::stream(seed, &[]);
            let m = draw_masks(&p, 40, 40, &mut r).unwrap();
            for f in &m.freq { prop_assert!(f.start + f.width <= 40 && f.width <= 27); }
            for t in &m.time { prop_assert!(t.start + t.width <= 40); }
        }
    }
}
