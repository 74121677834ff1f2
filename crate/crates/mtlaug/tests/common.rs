#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// A small but learnable experiment: 3 speakers, 0.5 s clips, 16 mels.
pub const TINY: &str = r#"
seed = 3

[corpus.synth]
n_speakers = 3
utterances_per_speaker_per_class = 3
duration_s = 0.5

[target.synth]
n_speakers = 3
utterances_per_speaker_per_class = 2
duration_s = 0.5

[features]
n_mels = 16
target_dur_s = 0.5

[train]
max_epochs = 2
batch_size = 8

[protocol]
n_repeats = 1
snrs = [10.0]
"#;

pub fn write_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

pub fn mtlaug(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtlaug")).args(args).output().unwrap()
}

pub fn stdout_path(out: &Output) -> PathBuf {
    PathBuf::from(String::from_utf8_lossy(&out.stdout).trim())
}
