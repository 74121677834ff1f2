//! WAV files and corpus manifests.

use std::fs;
use std::path::{Path, PathBuf};

use mtlaug_core::corpus::{label_str, Corpus, Dataset, Emotion, Utterance};
use mtlaug_core::dsp::{resample_to, Waveform, SAMPLE_RATE};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reads a mono or multichannel WAV (channels averaged) and resamples it
/// to 16 kHz.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let wav_err = |e: hound::Error| Error::Wav {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let ch = spec.channels.max(1) as usize;
    let raw: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<Result<_, _>>().map_err(wav_err)?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<Result<_, _>>()
                .map_err(wav_err)?
        }
    };
    let mono: Vec<f32> = raw.chunks(ch).map(|f| f.iter().sum::<f32>() / ch as f32).collect();
    let w = Waveform::new(mono, spec.sample_rate)?;
    Ok(if spec.sample_rate == SAMPLE_RATE { w } else { resample_to(&w, SAMPLE_RATE)? })
}

/// Writes 32-bit float mono.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate(),
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let wav_err = |e: hound::Error| Error::Wav {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in wave.samples() {
        w.write_sample(s).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

/// One manifest row: `id,path,speaker,emotion,corpus`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub path: String,
    pub speaker: String,
    /// Empty for unlabeled speech.
    pub emotion: String,
    pub corpus: String,
}

pub fn read_manifest(path: &Path, merge_excited: bool) -> Result<Corpus> {
    if !path.exists() {
        return Err(Error::MissingCorpus(path.display().to_string()));
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })?;
    let mut utts = Vec::new();
    let mut name = String::new();
    for (i, row) in rdr.deserialize::<ManifestRow>().enumerate() {
        let line = i + 2;
        let bad = |msg: String| Error::Manifest {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let row = row.map_err(|e| bad(e.to_string()))?;
        let emotion = Emotion::parse_label(&row.emotion, merge_excited).map_err(|e| bad(e.to_string()))?;
        if name.is_empty() {
            name = row.corpus.clone();
        }
        utts.push(Utterance {
            id: row.id,
            audio_path: row.path,
            speaker_id: row.speaker,
            emotion,
            corpus_tag: row.corpus,
        });
    }
    Ok(Corpus::new(name, utts)?)
}

pub fn write_manifest(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })?;
    for u in corpus.utterances() {
        w.serialize(ManifestRow {
            id: u.id.clone(),
            path: u.audio_path.clone(),
            speaker: u.speaker_id.clone(),
            emotion: label_str(u.emotion).to_string(),
            corpus: u.corpus_tag.clone(),
        })
        .map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })?;
    }
    w.flush().map_err(Error::io(path))
}

/// Loads a manifest and every referenced file; relative audio paths resolve
/// against `root` (the manifest's directory by default).
pub fn load_dataset(manifest: &Path, root: Option<&Path>, merge_excited: bool) -> Result<Dataset> {
    let corpus = read_manifest(manifest, merge_excited)?;
    let base: PathBuf = match root {
        Some(r) => r.to_path_buf(),
        None => manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let audio = corpus
        .utterances()
        .iter()
        .map(|u| {
            let p = base.join(&u.audio_path);
            if !p.exists() {
                return Err(Error::MissingCorpus(p.display().to_string()));
            }
            read_wav(&p)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(corpus, audio)?)
}

/// Writes `data` as `<dir>/<audio_path>` files plus `<dir>/manifest.csv`.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    for (u, w) in data.corpus.utterances().iter().zip(&data.audio) {
        write_wav(&dir.join(&u.audio_path), w)?;
    }
    let m = dir.join("manifest.csv");
    write_manifest(&m, &data.corpus)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mtlaug_core::corpus::{synth_corpus, SynthConfig};

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_speakers: 2,
            utterances_per_speaker_per_class: 1,
            duration_s: 0.2,
            ..SynthConfig::default()
        };
        let data = synth_corpus(&cfg).unwrap();
        let m = save_dataset(dir.path(), &data).unwrap();
        let back = load_dataset(&m, None, false).unwrap();
        assert_eq!(back.corpus, data.corpus);
        assert_eq!(back.audio, data.audio);
    }

    #[test]
    fn missing_manifest_is_missing_corpus() {
        let e = load_dataset(Path::new("/nonexistent/manifest.csv"), None, false).unwrap_err();
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn int_wav_is_scaled_and_resampled() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        for _ in 0..800 {
            w.write_sample(16384i16).unwrap();
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        let wave = read_wav(&p).unwrap();
        assert_eq!(wave.sample_rate(), 16000);
        assert_eq!(wave.len(), 1600);
        assert!((wave.samples()[800] - 0.25).abs() < 1e-3);
    }
}
