//! Signal processing: framing, STFT, mel filterbank, log-Mel features,
//! band-limited resampling and SNR-controlled noise mixing.
//!
//! Every function here is pure and RNG-free (noise generation takes an
//! explicit generator).

mod fft;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{validation, Result};
pub use fft::Fft;

/// Canonical sample rate of every waveform entering the pipeline.
pub const SAMPLE_RATE: u32 = 16_000;

/// Mono PCM audio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(validation("waveform has no samples"));
        }
        if sample_rate == 0 {
            return Err(validation("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(validation("waveform contains non-finite samples"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }
}

pub fn rms(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    libm::sqrt(x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64)
}

/// Framing and log-Mel parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    /// Transform size; frames are zero-padded from the window length.
    pub n_fft: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub target_dur_s: f64,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            win_ms: 40.0,
            hop_ms: 10.0,
            n_mels: 128,
            n_fft: 1024,
            fmin: 0.0,
            fmax: 8000.0,
            target_dur_s: 7.5,
            log_floor: 1e-10,
        }
    }
}

impl FeatureConfig {
    /// Reduced preset for quick CPU runs: 1 s clips and 40 mel bands, same
    /// window, hop and transform size.
    pub fn desk() -> Self {
        Self {
            n_mels: 40,
            target_dur_s: 1.0,
            ..Self::default()
        }
    }

    pub fn win_len(&self) -> usize {
        libm::round(self.win_ms * self.sample_rate as f64 / 1000.0) as usize
    }

    pub fn hop_len(&self) -> usize {
        libm::round(self.hop_ms * self.sample_rate as f64 / 1000.0) as usize
    }

    pub fn target_len(&self) -> usize {
        libm::round(self.target_dur_s * self.sample_rate as f64) as usize
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frame count of every feature matrix: frames start at multiples of the
    /// hop and must fit entirely inside the fixed-length signal.
    pub fn n_frames(&self) -> usize {
        (self.target_len() - self.win_len()) / self.hop_len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let (win, hop) = (self.win_len(), self.hop_len());
        if self.sample_rate == 0 || win == 0 || hop == 0 || hop > win {
            return Err(validation(format!("need 0 < hop <= win, got hop {} win {}", hop, win)));
        }
        if self.n_mels == 0 {
            return Err(validation("n_mels must be at least 1"));
        }
        if !self.n_fft.is_power_of_two() || self.n_fft < win {
            return Err(validation(format!("n_fft {} must be a power of two >= window {}", self.n_fft, win)));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return Err(validation(format!("need 0 <= fmin < fmax <= sr/2, got {}..{}", self.fmin, self.fmax)));
        }
        if !(self.target_dur_s > 0.0) || self.target_len() < win {
            return Err(validation("target duration must be positive and hold one window"));
        }
        if !(self.log_floor > 0.0) {
            return Err(validation("log floor must be positive"));
        }
        Ok(())
    }
}

/// Fixed-shape `n_mels x n_frames` log-Mel matrix, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogMelSpectrogram {
    n_mels: usize,
    n_frames: usize,
    data: Vec<f32>,
}

impl LogMelSpectrogram {
    pub fn new(n_mels: usize, n_frames: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n_mels * n_frames {
            return Err(validation(format!(
                "log-Mel buffer of {} cells does not match {}x{}",
                data.len(),
                n_mels,
                n_frames
            )));
        }
        Ok(Self { n_mels, n_frames, data })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_mels, self.n_frames)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, mel: usize, frame: usize) -> f32 {
        self.data[mel * self.n_frames + frame]
    }

    pub fn mean(&self) -> f32 {
        (self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64) as f32
    }
}

/// Fixes the length to `round(target_dur_s * sr)`: truncates the tail or
/// appends zeros.
pub fn pad_or_truncate(wave: &Waveform, target_dur_s: f64) -> Waveform {
    let n = libm::round(target_dur_s * wave.sample_rate as f64) as usize;
    let mut samples = wave.samples.clone();
    samples.resize(n, 0.0);
    Waveform {
        samples,
        sample_rate: wave.sample_rate,
    }
}

/// Symmetric Hamming window.
pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * libm::cos(2.0 * PI * i as f64 / (n - 1) as f64))
        .collect()
}

/// Magnitude spectrogram, `n_bins x frames` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub n_bins: usize,
    pub n_frames: usize,
    pub data: Vec<f64>,
}

impl Spectrogram {
    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.data[bin * self.n_frames + frame]
    }
}

/// Frame `k` covers samples `[k*hop, k*hop + win)`; no centering. Each frame
/// is Hamming-windowed, zero-padded to `n_fft` and transformed.
pub fn stft_magnitude(wave: &Waveform, cfg: &FeatureConfig) -> Result<Spectrogram> {
    let (win, hop, n_fft) = (cfg.win_len(), cfg.hop_len(), cfg.n_fft);
    if wave.len() < win {
        return Err(validation(format!("waveform of {} samples is shorter than one window ({})", wave.len(), win)));
    }
    if !n_fft.is_power_of_two() || n_fft < win || hop == 0 {
        return Err(validation("invalid framing configuration"));
    }
    let n_frames = (wave.len() - win) / hop + 1;
    let n_bins = n_fft / 2 + 1;
    let window = hamming(win);
    let fft = Fft::new(n_fft);
    let mut data = vec![0.0; n_bins * n_frames];
    let mut re = vec![0.0; n_fft];
    let mut im = vec![0.0; n_fft];
    for f in 0..n_frames {
        let frame = &wave.samples[f * hop..f * hop + win];
        re.iter_mut().for_each(|v| *v = 0.0);
        im.iter_mut().for_each(|v| *v = 0.0);
        for (i, (&s, &w)) in frame.iter().zip(&window).enumerate() {
            re[i] = s as f64 * w;
        }
        fft.forward(&mut re, &mut im);
        for b in 0..n_bins {
            data[b * n_frames + f] = libm::sqrt(re[b] * re[b] + im[b] * im[b]);
        }
    }
    Ok(Spectrogram { n_bins, n_frames, data })
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * libm::log10(1.0 + f / 700.0)
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (libm::pow(10.0, m / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, `n_mels x n_bins`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    pub weights: Vec<f64>,
    pub centers_hz: Vec<f64>,
}

pub fn mel_filterbank(cfg: &FeatureConfig, sample_rate: u32) -> MelFilterbank {
    let n_bins = cfg.n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let points: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = |b: usize| b as f64 * sample_rate as f64 / cfg.n_fft as f64;
    let mut weights = vec![0.0; cfg.n_mels * n_bins];
    for m in 0..cfg.n_mels {
        let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
        let row = &mut weights[m * n_bins..(m + 1) * n_bins];
        for (b, w) in row.iter_mut().enumerate() {
            let f = bin_hz(b);
            *w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
        }
        // filters narrower than a bin spacing fall between bins; give them
        // the nearest bin so every band carries energy
        if row.iter().all(|&w| w == 0.0) {
            let nearest = libm::round(center * cfg.n_fft as f64 / sample_rate as f64) as usize;
            row[nearest.min(n_bins - 1)] = 1.0;
        }
    }
    MelFilterbank {
        n_mels: cfg.n_mels,
        n_bins,
        weights,
        centers_hz: points[1..=cfg.n_mels].to_vec(),
    }
}

/// Stateful extractor that caches the window, FFT plan and filterbank.
#[derive(Clone, Debug)]
pub struct LogMelExtractor {
    cfg: FeatureConfig,
    bank: MelFilterbank,
}

impl LogMelExtractor {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            bank: mel_filterbank(cfg, cfg.sample_rate),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    /// pad/truncate, magnitude STFT, power, mel projection, `ln(x + floor)`.
    pub fn extract(&self, wave: &Waveform) -> Result<LogMelSpectrogram> {
        if wave.sample_rate != self.cfg.sample_rate {
            return Err(validation(format!(
                "waveform at {} Hz, features configured for {} Hz",
                wave.sample_rate, self.cfg.sample_rate
            )));
        }
        let fixed = pad_or_truncate(wave, self.cfg.target_dur_s);
        let spec = stft_magnitude(&fixed, &self.cfg)?;
        let power: Vec<f64> = spec.data.iter().map(|m| m * m).collect();
        let (n_mels, n_frames, n_bins) = (self.cfg.n_mels, spec.n_frames, spec.n_bins);
        let mut mel = vec![0.0f64; n_mels * n_frames];
        f64::gemm(false, false, n_mels, n_frames, n_bins, 1.0, &self.bank.weights, &power, 0.0, &mut mel);
        let floor = self.cfg.log_floor;
        let data = mel.iter().map(|&v| libm::log(v + floor) as f32).collect();
        LogMelSpectrogram::new(n_mels, n_frames, data)
    }
}

pub fn log_mel(wave: &Waveform, cfg: &FeatureConfig) -> Result<LogMelSpectrogram> {
    LogMelExtractor::new(cfg)?.extract(wave)
}

const SINC_ZEROS: f64 = 16.0;

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        libm::sin(PI * x) / (PI * x)
    }
}

/// Time-warps `x(t) -> x(factor * t)` by Hann-windowed sinc interpolation.
/// Output duration is the input duration divided by `factor`; the sample
/// rate is unchanged. For `factor > 1` the kernel is widened to low-pass
/// below the new Nyquist.
pub fn resample(wave: &Waveform, factor: f64) -> Result<Waveform> {
    if !factor.is_finite() || factor <= 0.0 {
        return Err(validation(format!("resample factor must be finite and positive, got {}", factor)));
    }
    let n_in = wave.len();
    let n_out = (libm::round(n_in as f64 / factor) as usize).max(1);
    if factor == 1.0 {
        return Ok(wave.clone());
    }
    let cutoff = (1.0 / factor).min(1.0);
    let half = SINC_ZEROS / cutoff;
    let x = &wave.samples;
    let samples = (0..n_out)
        .map(|n| {
            let pos = n as f64 * factor;
            let lo = libm::ceil(pos - half).max(0.0) as usize;
            let hi = (libm::floor(pos + half) as usize).min(n_in - 1);
            let mut acc = 0.0;
            for (k, &v) in x.iter().enumerate().take(hi + 1).skip(lo) {
                let tau = pos - k as f64;
                let window = 0.5 * (1.0 + libm::cos(PI * tau / half));
                acc += v as f64 * cutoff * sinc(cutoff * tau) * window;
            }
            acc as f32
        })
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: wave.sample_rate,
    })
}

/// Sample-rate conversion to `target_rate` through [`resample`].
pub fn resample_to(wave: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(validation("target sample rate must be positive"));
    }
    if wave.sample_rate == target_rate {
        return Ok(wave.clone());
    }
    let mut out = resample(wave, wave.sample_rate as f64 / target_rate as f64)?;
    out.sample_rate = target_rate;
    Ok(out)
}

/// Result of [`mix_at_snr`].
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub mixed: Waveform,
    /// Noise excerpt after scaling, aligned with the clean signal.
    pub scaled_noise: Vec<f32>,
    pub gain: f64,
    /// Whether the sum exceeded [-1, 1] and was rescaled to fit.
    pub rescaled: bool,
}

/// Adds `noise` (looped from `offset`, cut to the clean length) scaled by
/// `g = rms(clean) / (rms(noise) * 10^(snr_db / 20))`. If the sum leaves
/// [-1, 1] the whole mixture is divided by its peak, which keeps the SNR.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64, offset: usize) -> Result<Mixture> {
    if !snr_db.is_finite() {
        return Err(validation("snr must be finite"));
    }
    let excerpt: Vec<f32> = (0..clean.len())
        .map(|i| noise.samples[(offset + i) % noise.len()])
        .collect();
    let (rc, rn) = (clean.rms(), rms(&excerpt));
    if rc == 0.0 {
        return Err(validation("clean signal is silent"));
    }
    if rn == 0.0 {
        return Err(validation("noise excerpt is silent"));
    }
    let gain = rc / (rn * libm::pow(10.0, snr_db / 20.0));
    let scaled_noise: Vec<f32> = excerpt.iter().map(|&v| (v as f64 * gain) as f32).collect();
    let mut mixed: Vec<f64> = clean
        .samples
        .iter()
        .zip(&excerpt)
        .map(|(&c, &n)| c as f64 + gain * n as f64)
        .collect();
    let peak = mixed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let rescaled = peak > 1.0;
    if rescaled {
        mixed.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(Mixture {
        mixed: Waveform {
            samples: mixed.into_iter().map(|v| v as f32).collect(),
            sample_rate: clean.sample_rate,
        },
        scaled_noise,
        gain,
        rescaled,
    })
}

/// Spectral colour of synthetic noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseColor {
    White,
    Pink,
    Brown,
}

/// Unit-RMS coloured noise for when no recorded noise pool is available.
pub fn colored_noise<R: rand::RngCore>(len: usize, sample_rate: u32, color: NoiseColor, rng: &mut R) -> Waveform {
    let mut white = || -> f64 { StandardNormal.sample(rng) };
    let mut out: Vec<f64> = Vec::with_capacity(len);
    match color {
        NoiseColor::White => (0..len).for_each(|_| out.push(white())),
        NoiseColor::Pink => {
            // Kellet's economy pink filter
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            for _ in 0..len {
                let w = white();
                b0 = 0.99765 * b0 + w * 0.0990460;
                b1 = 0.96300 * b1 + w * 0.2965164;
                b2 = 0.57000 * b2 + w * 1.0526913;
                out.push(b0 + b1 + b2 + w * 0.1848);
            }
        }
        NoiseColor::Brown => {
            let mut acc = 0.0;
            for _ in 0..len {
                acc = 0.995 * acc + 0.1 * white();
                out.push(acc);
            }
        }
    }
    let r = libm::sqrt(out.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).max(1e-12);
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())) / r;
    // keep the waveform inside [-1, 1]
    let scale = 1.0 / r / peak.max(1.0);
    Waveform {
        samples: out.into_iter().map(|v| (v * scale) as f32).collect(),
        sample_rate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, secs: f64, amp: f64) -> Waveform {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        Waveform::new(
            (0..n)
                .map(|i| (amp * libm::sin(2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64)) as f32)
                .collect(),
            SAMPLE_RATE,
        )
        .unwrap()
    }

    #[test]
    fn default_frame_count_is_747() {
        let cfg = FeatureConfig::default();
        assert_eq!(cfg.win_len(), 640);
        assert_eq!(cfg.hop_len(), 160);
        assert_eq!(cfg.target_len(), 120_000);
        assert_eq!(cfg.n_frames(), 747);
        assert_eq!(FeatureConfig::desk().n_frames(), 97);
    }

    #[test]
    fn pad_and_truncate() {
        let long = Waveform::new((0..144_000).map(|i| (i % 7) as f32 * 0.1).collect(), SAMPLE_RATE).unwrap();
        let cut = pad_or_truncate(&long, 7.5);
        assert_eq!(cut.len(), 120_000);
        assert_eq!(cut.samples(), &long.samples()[..120_000]);

        let exact = Waveform::new(vec![0.25; 120_000], SAMPLE_RATE).unwrap();
        assert_eq!(pad_or_truncate(&exact, 7.5), exact);

        let short = Waveform::new(vec![0.5; 16_000], SAMPLE_RATE).unwrap();
        let padded = pad_or_truncate(&short, 7.5);
        assert_eq!(padded.len(), 120_000);
        assert!(padded.samples()[16_000..].iter().all(|&v| v == 0.0));
        assert_eq!(padded.samples().len() - 16_000, 104_000);
    }

    #[test]
    fn stft_rejects_short_input_and_zero_is_zero() {
        let cfg = FeatureConfig::default();
        let short = Waveform::new(vec![0.1; 100], SAMPLE_RATE).unwrap();
        assert!(stft_magnitude(&short, &cfg).is_err());
        let z = Waveform::new(vec![0.0; 4000], SAMPLE_RATE).unwrap();
        let s = stft_magnitude(&z, &cfg).unwrap();
        assert!(s.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stft_peak_at_tone_bin() {
        let cfg = FeatureConfig::default();
        let s = stft_magnitude(&tone(1000.0, 0.2, 0.5), &cfg).unwrap();
        let expected = libm::round(1000.0 * cfg.n_fft as f64 / SAMPLE_RATE as f64) as usize;
        for f in 0..s.n_frames {
            let arg = (0..s.n_bins).max_by(|&a, &b| s.get(a, f).total_cmp(&s.get(b, f))).unwrap();
            assert!((arg as i64 - expected as i64).abs() <= 1, "frame {} peak {} vs {}", f, arg, expected);
        }
    }

    #[test]
    fn stft_parseval_on_one_frame() {
        let cfg = FeatureConfig::default();
        let wave = Waveform::new((0..640).map(|i| libm::sin(i as f64 * 0.37) as f32 * 0.3 + 0.01 * (i % 5) as f32).collect(), SAMPLE_RATE).unwrap();
        let s = stft_magnitude(&wave, &cfg).unwrap();
        assert_eq!(s.n_frames, 1);
        let n = cfg.n_fft;
        // one-sided spectrum: interior bins count twice
        let mut spec_energy = s.get(0, 0).powi(2) + s.get(n / 2, 0).powi(2);
        for b in 1..n / 2 {
            spec_energy += 2.0 * s.get(b, 0).powi(2);
        }
        let w = hamming(640);
        let time_energy: f64 = wave.samples().iter().zip(&w).map(|(&x, &w)| (x as f64 * w).powi(2)).sum();
        assert!((spec_energy - n as f64 * time_energy).abs() < 1e-9 * spec_energy);
    }

    #[test]
    fn mel_filterbank_rows_and_centers() {
        let cfg = FeatureConfig::default();
        let fb = mel_filterbank(&cfg, SAMPLE_RATE);
        for m in 0..fb.n_mels {
            let row = &fb.weights[m * fb.n_bins..(m + 1) * fb.n_bins];
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!(row.iter().sum::<f64>() > 0.0, "row {} empty", m);
        }
        assert!(fb.centers_hz.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn two_band_centres_follow_mel_formula() {
        let cfg = FeatureConfig { n_mels: 2, ..FeatureConfig::default() };
        let fb = mel_filterbank(&cfg, SAMPLE_RATE);
        // mel(8000) = 2595 log10(1 + 8000/700) = 2840.0230...
        let top = 2595.0 * libm::log10(1.0 + 8000.0 / 700.0);
        let c1 = 700.0 * (libm::pow(10.0, (top / 3.0) / 2595.0) - 1.0);
        let c2 = 700.0 * (libm::pow(10.0, (2.0 * top / 3.0) / 2595.0) - 1.0);
        assert!((fb.centers_hz[0] - c1).abs() < 1e-9);
        assert!((fb.centers_hz[1] - c2).abs() < 1e-9);
        assert!((hz_to_mel(fb.centers_hz[1]) - 2.0 * hz_to_mel(fb.centers_hz[0])).abs() < 1e-9);
    }

    #[test]
    fn log_mel_of_silence_is_log_floor() {
        let cfg = FeatureConfig::desk();
        let z = Waveform::new(vec![0.0; 8000], SAMPLE_RATE).unwrap();
        let lm = log_mel(&z, &cfg).unwrap();
        assert_eq!(lm.shape(), (40, 97));
        let want = libm::log(1e-10) as f32;
        assert!(lm.data().iter().all(|&v| v == want));
    }

    #[test]
    fn log_mel_tone_lands_in_its_filter() {
        let cfg = FeatureConfig::desk();
        let ex = LogMelExtractor::new(&cfg).unwrap();
        let target = 20;
        let f = ex.filterbank().centers_hz[target];
        let lm = ex.extract(&tone(f, 1.0, 0.5)).unwrap();
        let again = ex.extract(&tone(f, 1.0, 0.5)).unwrap();
        assert_eq!(lm, again);
        let frame = 50;
        let arg = (0..cfg.n_mels).max_by(|&a, &b| lm.get(a, frame).total_cmp(&lm.get(b, frame))).unwrap();
        assert_eq!(arg, target);
    }

    #[test]
    fn resample_identity_and_lengths() {
        let w = tone(440.0, 0.5, 0.5);
        let same = resample(&w, 1.0).unwrap();
        assert_eq!(same.len(), w.len());
        let max_diff = same.samples().iter().zip(w.samples()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(max_diff < 1e-6);
        let long = Waveform::new(vec![0.1; 120_000], SAMPLE_RATE).unwrap();
        let fast = resample(&long, 1.1).unwrap();
        assert!((fast.len() as i64 - 109_091).abs() <= 1);
        assert!(resample(&w, f64::NAN).is_err());
        assert!(resample(&w, 0.0).is_err());
    }

    #[test]
    fn snr_mixing_gain() {
        let clean = tone(300.0, 0.5, 0.2);
        let mut rng = crate::rng::stream(3, &[9]);
        let noise = colored_noise(4000, SAMPLE_RATE, NoiseColor::Pink, &mut rng);
        for snr in [0.0, 10.0, 20.0] {
            let m = mix_at_snr(&clean, &noise, snr, 123).unwrap();
            let measured = 20.0 * libm::log10(clean.rms() / rms(&m.scaled_noise));
            assert!((measured - snr).abs() < 1e-6, "{} vs {}", measured, snr);
        }
        let m20 = mix_at_snr(&clean, &noise, 20.0, 0).unwrap();
        assert!((rms(&m20.scaled_noise) - clean.rms() / 10.0).abs() < 1e-6);
        let silent = Waveform::new(vec![0.0; 100], SAMPLE_RATE).unwrap();
        assert!(mix_at_snr(&silent, &noise, 0.0, 0).is_err());
        assert!(mix_at_snr(&clean, &silent, 0.0, 0).is_err());
    }

    #[test]
    fn snr_gain_scales_with_clean_level() {
        let mut rng = crate::rng::stream(4, &[1]);
        let noise = colored_noise(2000, SAMPLE_RATE, NoiseColor::White, &mut rng);
        let a = mix_at_snr(&tone(200.0, 0.1, 0.1), &noise, 10.0, 0).unwrap();
        let b = mix_at_snr(&tone(200.0, 0.1, 0.3), &noise, 10.0, 0).unwrap();
        assert!((b.gain / a.gain - 3.0).abs() < 1e-5);
    }
}
