//! Utterance metadata, speaker-aware splits and the synthetic prosody corpus.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{validation, Error, Result};
use crate::rng;

/// The four emotion classes, in label-index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Angry,
    Happy,
    Neutral,
    Sad,
}

pub const N_CLASSES: usize = 4;

impl Emotion {
    pub const ALL: [Emotion; N_CLASSES] = [Emotion::Angry, Emotion::Happy, Emotion::Neutral, Emotion::Sad];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Emotion::Angry => "angry",
            Emotion::Happy => "happy",
            Emotion::Neutral => "neutral",
            Emotion::Sad => "sad",
        }
    }

    /// Parses a manifest emotion cell. `unlabeled` maps to `None`.
    /// `excited` is accepted as happy only when `merge_excited` is set.
    pub fn parse_label(s: &str, merge_excited: bool) -> Result<Option<Self>> {
        match s.trim().to_ascii_lowercase().as_str() {
            "angry" => Ok(Some(Emotion::Angry)),
            "happy" => Ok(Some(Emotion::Happy)),
            "neutral" => Ok(Some(Emotion::Neutral)),
            "sad" => Ok(Some(Emotion::Sad)),
            "unlabeled" => Ok(None),
            "excited" if merge_excited => Ok(Some(Emotion::Happy)),
            other => Err(validation(format!(
                "emotion {:?} is not one of angry, happy, neutral, sad, unlabeled",
                other
            ))),
        }
    }

    pub fn one_hot(self) -> [f32; N_CLASSES] {
        let mut v = [0.0; N_CLASSES];
        v[self.index()] = 1.0;
        v
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn label_str(e: Option<Emotion>) -> &'static str {
    e.map_or("unlabeled", Emotion::as_str)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub audio_path: String,
    pub speaker_id: String,
    /// `None` for unlabeled speech.
    pub emotion: Option<Emotion>,
    pub corpus_tag: String,
}

/// Ordered utterance list with unique ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn new(name: impl Into<String>, utterances: Vec<Utterance>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for u in &utterances {
            if !seen.insert(u.id.as_str()) {
                return Err(validation(format!("duplicate utterance id {:?}", u.id)));
            }
        }
        Ok(Self {
            name: name.into(),
            utterances,
        })
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Sorted distinct speaker ids.
    pub fn speakers(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.utterances.iter().map(|u| u.speaker_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn n_labeled(&self) -> usize {
        self.utterances.iter().filter(|u| u.emotion.is_some()).count()
    }

    /// Sub-corpus in the order of `indices`.
    pub fn select(&self, indices: &[usize]) -> Corpus {
        Corpus {
            name: self.name.clone(),
            utterances: indices.iter().map(|&i| self.utterances[i].clone()).collect(),
        }
    }

    /// Per-class utterance counts (labeled only).
    pub fn class_counts(&self) -> [usize; N_CLASSES] {
        let mut c = [0; N_CLASSES];
        for e in self.utterances.iter().filter_map(|u| u.emotion) {
            c[e.index()] += 1;
        }
        c
    }
}

/// Corpus metadata plus decoded audio, index-aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub corpus: Corpus,
    pub audio: Vec<Waveform>,
}

impl Dataset {
    pub fn new(corpus: Corpus, audio: Vec<Waveform>) -> Result<Self> {
        if corpus.len() != audio.len() {
            return Err(validation(format!(
                "{} utterances but {} waveforms",
                corpus.len(),
                audio.len()
            )));
        }
        Ok(Self { corpus, audio })
    }

    pub fn len(&self) -> usize {
        self.corpus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corpus.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            corpus: self.corpus.select(indices),
            audio: indices.iter().map(|&i| self.audio[i].clone()).collect(),
        }
    }

    /// Same utterances with every emotion label removed.
    pub fn unlabeled(&self) -> Dataset {
        let mut out = self.clone();
        out.corpus.utterances.iter_mut().for_each(|u| u.emotion = None);
        out
    }
}

/// One leave-one-speaker-out fold, as indices into the source corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub speaker: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_loso(corpus: &Corpus) -> Result<Vec<Fold>> {
    let speakers = corpus.speakers();
    if speakers.len() < 2 {
        return Err(Error::Protocol(format!(
            "leave-one-speaker-out needs at least 2 speakers, corpus {:?} has {}",
            corpus.name,
            speakers.len()
        )));
    }
    Ok(speakers
        .into_iter()
        .map(|s| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..corpus.len()).partition(|&i| corpus.utterances[i].speaker_id == s);
            Fold { speaker: s, train, test }
        })
        .collect())
}

/// Random `(val, test)` partition with `|val| = floor(fraction * n)`.
/// With `speaker_disjoint`, whole speakers are assigned to validation until
/// the target count is reached, so the val size may overshoot.
pub fn split_random(
    corpus: &Corpus,
    val_fraction: f64,
    seed: u64,
    speaker_disjoint: bool,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(validation(format!("validation fraction {} not in (0, 1)", val_fraction)));
    }
    let mut r = rng::stream(seed, &[rng::tag::SPLIT]);
    let n = corpus.len();
    let n_val = libm::floor(val_fraction * n as f64) as usize;
    let mut in_val = alloc::vec![false; n];
    if speaker_disjoint {
        let mut speakers = corpus.speakers();
        speakers.shuffle(&mut r);
        let mut count = 0;
        for s in speakers {
            if count >= n_val {
                break;
            }
            for (i, u) in corpus.utterances.iter().enumerate() {
                if u.speaker_id == s {
                    in_val[i] = true;
                    count += 1;
                }
            }
        }
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        order[..n_val].iter().for_each(|&i| in_val[i] = true);
    }
    Ok((0..n).partition(|&i| in_val[i]))
}

/// Speaker-stratified subsample: within every speaker, keeps
/// `ceil(fraction * count)` labeled utterances per class. Returns
/// `(kept, rest)` indices; `rest` holds the dropped labeled utterances.
pub fn subsample_labeled(corpus: &Corpus, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(validation(format!("labeled fraction {} not in (0, 1]", fraction)));
    }
    let mut groups: BTreeMap<(&str, Emotion), Vec<usize>> = BTreeMap::new();
    for (i, u) in corpus.utterances.iter().enumerate() {
        if let Some(e) = u.emotion {
            groups.entry((u.speaker_id.as_str(), e)).or_default().push(i);
        }
    }
    let mut r = rng::stream(seed, &[rng::tag::SUBSAMPLE]);
    let mut keep = alloc::vec![false; corpus.len()];
    for (_, mut idx) in groups {
        if fraction < 1.0 {
            idx.shuffle(&mut r);
        }
        let k = libm::ceil(fraction * idx.len() as f64) as usize;
        idx[..k].iter().for_each(|&i| keep[i] = true);
    }
    let labeled = |i: &usize| corpus.utterances[*i].emotion.is_some();
    let kept = (0..corpus.len()).filter(|i| keep[*i]).collect();
    let rest = (0..corpus.len()).filter(|i| !keep[*i] && labeled(i)).collect();
    Ok((kept, rest))
}

/// Prosodic template of one synthetic emotion class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prototype {
    pub base_f0_hz: f64,
    /// Linear f0 drift over the utterance, Hz per second.
    pub f0_slope_hz_s: f64,
    /// Peak amplitude of the energy envelope.
    pub energy: f64,
    /// Syllable-rate amplitude modulation, Hz.
    pub syllable_rate_hz: f64,
    /// Harmonic `h` has amplitude `h^-tilt`.
    pub spectral_tilt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub name: String,
    pub n_speakers: usize,
    pub utterances_per_speaker_per_class: usize,
    pub duration_s: f64,
    pub seed: u64,
    /// Speaker f0 offsets are spread evenly over `[-spread, +spread]` Hz.
    pub speaker_f0_spread_hz: f64,
    /// Relative standard deviation of per-utterance f0, energy and rate.
    pub jitter: f64,
    pub n_harmonics: usize,
    pub noise_floor: f64,
    /// Indexed by [`Emotion::index`].
    pub prototypes: [Prototype; N_CLASSES],
}

impl Default for SynthConfig {
    fn default() -> Self {
        let p = |base_f0_hz, f0_slope_hz_s, energy, syllable_rate_hz, spectral_tilt| Prototype {
            base_f0_hz,
            f0_slope_hz_s,
            energy,
            syllable_rate_hz,
            spectral_tilt,
        };
        Self {
            name: "synth".into(),
            n_speakers: 4,
            utterances_per_speaker_per_class: 20,
            duration_s: 1.0,
            seed: 7,
            speaker_f0_spread_hz: 15.0,
            jitter: 0.05,
            n_harmonics: 8,
            noise_floor: 0.003,
            prototypes: [
                p(230.0, 40.0, 0.60, 6.0, 0.6),
                p(280.0, 80.0, 0.45, 4.5, 1.0),
                p(170.0, 0.0, 0.30, 3.5, 1.3),
                p(125.0, -25.0, 0.15, 2.0, 1.8),
            ],
        }
    }
}

impl SynthConfig {
    /// A second corpus with moved prototypes and different speakers, used as
    /// the target domain of cross-corpus runs.
    pub fn shifted(&self) -> Self {
        let mut out = self.clone();
        out.name = format!("{}-shifted", self.name);
        out.seed = self.seed ^ 0x5eed_0ff5;
        for p in &mut out.prototypes {
            p.base_f0_hz *= 1.12;
            p.f0_slope_hz_s *= 0.7;
            p.energy *= 0.85;
            p.syllable_rate_hz *= 1.15;
            p.spectral_tilt += 0.2;
        }
        out.speaker_f0_spread_hz *= 1.5;
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_speakers == 0 || self.utterances_per_speaker_per_class == 0 {
            return Err(validation("synthetic corpus needs at least one speaker and one utterance"));
        }
        if !(self.duration_s > 0.0) {
            return Err(validation("duration_s must be positive"));
        }
        if self.n_harmonics == 0 {
            return Err(validation("n_harmonics must be at least 1"));
        }
        for (i, a) in self.prototypes.iter().enumerate() {
            if !(a.base_f0_hz > 0.0 && a.energy > 0.0 && a.energy <= 1.0 && a.syllable_rate_hz > 0.0) {
                return Err(validation(format!("prototype {} has non-positive f0, energy or rate", Emotion::ALL[i])));
            }
            for b in &self.prototypes[i + 1..] {
                if a == b {
                    return Err(validation("class prototypes must be pairwise distinct"));
                }
            }
        }
        Ok(())
    }
}

/// Generates the corpus and its audio. Audio paths are relative
/// (`<id>.wav`). Output is a pure function of the config.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let sr = SAMPLE_RATE as f64;
    let n = libm::round(cfg.duration_s * sr) as usize;
    let mut utterances = Vec::new();
    let mut audio = Vec::new();
    for s in 0..cfg.n_speakers {
        let offset = if cfg.n_speakers == 1 {
            0.0
        } else {
            cfg.speaker_f0_spread_hz * (2.0 * s as f64 / (cfg.n_speakers - 1) as f64 - 1.0)
        };
        for e in Emotion::ALL {
            let proto = cfg.prototypes[e.index()];
            for k in 0..cfg.utterances_per_speaker_per_class {
                let id = format!("{}_s{:02}_{}_{:03}", cfg.name, s, e.as_str(), k);
                let mut r = rng::stream(cfg.seed, &[rng::tag::SYNTH, s as u64, e.index() as u64, k as u64]);
                audio.push(render(&proto, offset, cfg, n, &mut r));
                utterances.push(Utterance {
                    audio_path: format!("{}.wav", id),
                    id,
                    speaker_id: format!("{}_s{:02}", cfg.name, s),
                    emotion: Some(e),
                    corpus_tag: cfg.name.clone(),
                });
            }
        }
    }
    Dataset::new(Corpus::new(cfg.name.clone(), utterances)?, audio)
}

fn render(p: &Prototype, f0_offset: f64, cfg: &SynthConfig, n: usize, r: &mut rng::Rng) -> Waveform {
    let sr = SAMPLE_RATE as f64;
    let mut jit = |scale: f64| -> f64 {
        let z: f64 = StandardNormal.sample(r);
        1.0 + scale * z.clamp(-3.0, 3.0)
    };
    let f0 = (p.base_f0_hz + f0_offset) * jit(cfg.jitter);
    let energy = (p.energy * jit(cfg.jitter)).min(0.9);
    let rate = p.syllable_rate_hz * jit(cfg.jitter);
    let slope = p.f0_slope_hz_s;
    let env_phase = r.gen_range(0.0..2.0 * PI);
    let mut phase = r.gen_range(0.0..2.0 * PI);
    let amps: Vec<f64> = (1..=cfg.n_harmonics).map(|h| libm::pow(h as f64, -p.spectral_tilt)).collect();
    let norm: f64 = amps.iter().sum();
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let f = (f0 + slope * t).max(40.0);
            phase += 2.0 * PI * f / sr;
            let mut v = 0.0;
            for (h, a) in amps.iter().enumerate() {
                if (h + 1) as f64 * f < sr / 2.0 - 500.0 {
                    v += a * libm::sin((h + 1) as f64 * phase);
                }
            }
            let s = libm::sin(PI * rate * t + env_phase);
            let env = energy * (0.35 + 0.65 * s * s);
            let z: f64 = StandardNormal.sample(r);
            (env * v / norm + cfg.noise_floor * z).clamp(-1.0, 1.0) as f32
        })
        .collect();
    Waveform::new(samples, SAMPLE_RATE).expect("synthetic samples are finite")
}

/// Renders an utterance id usable as a file stem.
pub fn sanitize_id(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn utt(id: &str, spk: &str, e: Option<Emotion>) -> Utterance {
        Utterance {
            id: id.into(),
            audio_path: format!("{}.wav", id),
            speaker_id: spk.into(),
            emotion: e,
            corpus_tag: "t".into(),
        }
    }

    #[test]
    fn label_parsing() {
        assert_eq!(Emotion::parse_label("sad", false).unwrap(), Some(Emotion::Sad));
        assert_eq!(Emotion::parse_label("unlabeled", false).unwrap(), None);
        assert!(Emotion::parse_label("excited", false).is_err());
        assert_eq!(Emotion::parse_label("excited", true).unwrap(), Some(Emotion::Happy));
        assert!(Emotion::parse_label("bored", true).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let r = Corpus::new("c", vec![utt("a", "x", None), utt("a", "y", None)]);
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn loso_two_speakers() {
        let c = Corpus::new(
            "c",
            vec![utt("1", "A", Some(Emotion::Sad)), utt("2", "B", None), utt("3", "A", None)],
        )
        .unwrap();
        let folds = split_loso(&c).unwrap();
        assert_eq!(folds.len(), 2);
        assert_eq!(folds[0].speaker, "A");
        assert_eq!(folds[0].test, vec![0, 2]);
        assert_eq!(folds[0].train, vec![1]);
        assert_eq!(folds[1].test, vec![1]);
        let single = Corpus::new("c", vec![utt("1", "A", None)]).unwrap();
        assert!(matches!(split_loso(&single), Err(Error::Protocol(_))));
    }

    #[test]
    fn random_split_sizes() {
        let c = Corpus::new("c", (0..100).map(|i| utt(&format!("{}", i), "s", None)).collect()).unwrap();
        let (v, t) = split_random(&c, 0.3, 1, false).unwrap();
        assert_eq!((v.len(), t.len()), (30, 70));
        assert_eq!(split_random(&c, 0.3, 1, false).unwrap(), (v, t));
        let c7 = c.select(&[0, 1, 2, 3, 4, 5, 6]);
        let (v, t) = split_random(&c7, 0.5, 9, false).unwrap();
        assert_eq!((v.len(), t.len()), (3, 4));
        assert!(split_random(&c, 0.0, 1, false).is_err());
        assert!(split_random(&c, 1.0, 1, false).is_err());
    }

    #[test]
    fn synth_counts_and_determinism() {
        let cfg = SynthConfig {
            utterances_per_speaker_per_class: 5,
            duration_s: 0.2,
            ..SynthConfig::default()
        };
        let a = synth_corpus(&cfg).unwrap();
        assert_eq!(a.len(), 80);
        assert_eq!(a.corpus.speakers().len(), 4);
        assert_eq!(a.corpus.class_counts(), [20; 4]);
        let b = synth_corpus(&cfg).unwrap();
        assert_eq!(a, b);
        let c = synth_corpus(&SynthConfig { seed: 8, ..cfg.clone() }).unwrap();
        assert_ne!(a.audio[0], c.audio[0]);
        assert!(synth_corpus(&SynthConfig { n_speakers: 0, ..cfg.clone() }).is_err());
        assert!(synth_corpus(&SynthConfig { utterances_per_speaker_per_class: 0, ..cfg }).is_err());
    }

    #[test]
    fn subsample_keeps_fraction_per_speaker_and_class() {
        let cfg = SynthConfig {
            utterances_per_speaker_per_class: 4,
            duration_s: 0.05,
            ..SynthConfig::default()
        };
        let d = synth_corpus(&cfg).unwrap();
        let (kept, rest) = subsample_labeled(&d.corpus, 0.25, 3).unwrap();
        assert_eq!(kept.len(), 16);
        assert_eq!(rest.len(), 48);
        let (all, none) = subsample_labeled(&d.corpus, 1.0, 3).unwrap();
        assert_eq!(all, (0..64).collect::<Vec<_>>());
        assert!(none.is_empty());
    }

    fn arb_corpus() -> impl Strategy<Value = Corpus> {
        proptest::collection::vec((0usize..5, 0usize..5), 1..40).prop_map(|rows| {
            Corpus::new(
                "p",
                rows.iter()
                    .enumerate()
                    .map(|(i, (s, e))| utt(&format!("u{}", i), &format!("spk{}", s), Emotion::from_index(*e)))
                    .collect(),
            )
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn loso_folds_partition(c in arb_corpus()) {
            match split_loso(&c) {
                Ok(folds) => {
                    prop_assert_eq!(folds.len(), c.speakers().len());
                    let mut tested = vec![0usize; c.len()];
                    for f in &folds {
                        prop_assert_eq!(f.train.len() + f.test.len(), c.len());
                        for &i in &f.test {
                            tested[i] += 1;
                            prop_assert_eq!(&c.utterances()[i].speaker_id, &f.speaker);
                        }
                        for &i in &f.train {
                            prop_assert!(c.utterances()[i].speaker_id != f.speaker);
                        }
                    }
                    prop_assert!(tested.iter().all(|&t| t == 1));
                }
                Err(_) => prop_assert!(c.speakers().len() < 2),
            }
        }

        #[test]
        fn random_split_is_partition(c in arb_corpus(), frac in 0.05f64..0.95, seed in 0u64..1000) {
            let (v, t) = split_random(&c, frac, seed, false).unwrap();
            prop_assert_eq!(v.len(), libm::floor(frac * c.len() as f64) as usize);
            let mut all: Vec<usize> = v.iter().chain(&t).copied().collect();
            all.sort();
            prop_assert_eq!(all, (0..c.len()).collect::<Vec<_>>());
        }
    }
}
