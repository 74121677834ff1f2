//! Command-line driver.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use mtlaug_core::attack::AttackParams;
use mtlaug_core::augment::build_augmented_set;
use mtlaug_core::corpus::{synth_corpus, Dataset};
use mtlaug_core::dsp::{colored_noise, Waveform, SAMPLE_RATE};
use mtlaug_core::eval::{
    adversarial_evaluate, cross_corpus_evaluate, loso_condition_evaluate, loso_evaluate, loso_splits, noisy_evaluate,
    study_ablation, study_augmentation_selection, study_label_fraction, test_confusion, ExperimentReport, LabelBudget,
    CLEAN_SNR,
};
use mtlaug_core::rng::{self, tag};
use mtlaug_core::train::Trainer;
use serde_json::json;

use crate::audio::{load_dataset, read_wav, save_dataset};
use crate::cache::{feature_hash, FeatureCache};
use crate::checkpoint;
use crate::config::{CorpusSource, ExperimentConfig};
use crate::error::{Error, Result};
use crate::log;
use crate::report::{self, RunReport};
use crate::runner::PoolRunner;

#[derive(Parser, Debug)]
#[command(name = "mtlaug", version, about = "Multitask speech emotion recognition experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (TOML, or JSON by extension).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Override a config value, e.g. `--set train.lr=0.001`.
    #[arg(long = "set", global = true, value_name = "K=V")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Write the synthetic source and target corpora as WAV + manifest.
    Synth,
    /// Extract log-Mel features into the cache.
    Features,
    /// Generate augmented feature sets into the cache.
    Augment,
    /// Train one LOSO fold with per-epoch checkpoints (resumes if present).
    Train,
    EvalLoso,
    EvalCross,
    EvalNoise,
    EvalAttack,
    StudyAug,
    StudyFraction,
    StudyAblation,
    /// Merge the run reports of this config into summary tables.
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Features => "features",
            Command::Augment => "augment",
            Command::Train => "train",
            Command::EvalLoso => "eval-loso",
            Command::EvalCross => "eval-cross",
            Command::EvalNoise => "eval-noise",
            Command::EvalAttack => "eval-attack",
            Command::StudyAug => "study-aug",
            Command::StudyFraction => "study-fraction",
            Command::StudyAblation => "study-ablation",
            Command::Report => "report",
        }
    }
}

pub struct Context {
    pub config: ExperimentConfig,
    pub hash: String,
    pub out: PathBuf,
    pub runner: PoolRunner,
}

impl Context {
    pub fn run_dir(&self, command: Command) -> PathBuf {
        self.out.join(&self.hash).join(command.name())
    }
}

pub fn load_corpus(src: &CorpusSource) -> Result<Dataset> {
    match &src.manifest {
        Some(m) => load_dataset(m, src.audio_root.as_deref(), src.merge_excited),
        None => Ok(synth_corpus(&src.synth)?),
    }
}

pub fn noise_pool(cfg: &ExperimentConfig) -> Result<Vec<Waveform>> {
    if !cfg.noise.files.is_empty() {
        return cfg
            .noise
            .files
            .iter()
            .map(|p| {
                if !p.exists() {
                    return Err(Error::MissingCorpus(p.display().to_string()));
                }
                read_wav(p)
            })
            .collect();
    }
    let len = (cfg.noise.seconds * SAMPLE_RATE as f64).round() as usize;
    Ok(cfg
        .noise
        .colors
        .iter()
        .enumerate()
        .map(|(i, &c)| colored_noise(len.max(1), SAMPLE_RATE, c, &mut rng::stream(cfg.seed, &[tag::NOISE, 1 << 32 | i as u64])))
        .collect())
}

fn finish(ctx: &Context, command: Command, started: Instant, mut reports: Vec<ExperimentReport>) -> Result<RunReport> {
    let wall = started.elapsed().as_secs_f64();
    for r in &mut reports {
        r.config_hash = ctx.hash.clone();
        r.wall_clock_s = wall;
        for w in &r.warnings {
            log::warn("absent_class", json!({ "protocol": r.protocol, "arm": r.arm, "detail": w }));
        }
    }
    let run = RunReport {
        command: command.name().into(),
        config_hash: ctx.hash.clone(),
        seed: ctx.config.seed,
        wall_clock_s: wall,
        reports,
        ablation: Vec::new(),
    };
    Ok(run)
}

fn write_config(dir: &Path, cfg: &ExperimentConfig, hash: &str) -> Result<()> {
    let doc = json!({ "config_hash": hash, "seed": cfg.seed, "config": cfg });
    report::write_text(dir, "config.json", &serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

fn log_reports(reports: &[ExperimentReport]) {
    for r in reports {
        log::info(
            "result",
            json!({ "protocol": r.protocol, "arm": r.arm, "direction": r.direction, "mean_uar": r.mean_uar, "std_uar": r.std_uar }),
        );
    }
}

/// Runs `command`; artefacts go under `<out>/<config-hash>/<command>/`.
pub fn execute(ctx: &Context, command: Command) -> Result<PathBuf> {
    let dir = ctx.run_dir(command);
    let cfg = &ctx.config;
    let started = Instant::now();
    log::info("start", json!({ "command": command.name(), "config_hash": ctx.hash, "seed": cfg.seed, "dir": dir }));
    if command != Command::Report {
        write_config(&dir, cfg, &ctx.hash)?;
    }
    let setup = cfg.setup()?;
    let mut run = match command {
        Command::Synth => {
            let mut written = Vec::new();
            for src in [&cfg.corpus, &cfg.target] {
                if src.manifest.is_some() {
                    continue;
                }
                let data = synth_corpus(&src.synth)?;
                let m = save_dataset(&dir.join(&src.synth.name), &data)?;
                written.push(json!({ "corpus": src.synth.name, "utterances": data.len(), "manifest": m }));
            }
            let doc = json!({ "config_hash": ctx.hash, "seed": cfg.seed, "corpora": written });
            report::write_text(&dir, "synth.json", &serde_json::to_string_pretty(&doc)?)?;
            None
        }
        Command::Features => {
            let data = load_corpus(&cfg.corpus)?;
            let cache = FeatureCache::from_env(&ctx.out.join("cache"));
            let feats = cache.extract_all(&data, &setup.extractor)?;
            let mut csv = String::from("id,n_mels,n_frames,mean,config_hash,seed\n");
            for (u, f) in data.corpus.utterances().iter().zip(&feats) {
                csv.push_str(&format!("{},{},{},{},{},{}\n", u.id, f.n_mels(), f.n_frames(), f.mean(), ctx.hash, cfg.seed));
            }
            report::write_text(&dir, "features.csv", &csv)?;
            log::info("features", json!({ "cache": cache.root(), "utterances": feats.len() }));
            None
        }
        Command::Augment => {
            let data = load_corpus(&cfg.corpus)?;
            let cache = FeatureCache::from_env(&ctx.out.join("cache"));
            let fhash = feature_hash(&cfg.features);
            let seed = rng::derive_seed(cfg.seed, &[tag::AUGMENT, 0]);
            let set = build_augmented_set(&data, &setup.extractor, &cfg.train.policy, seed, None)?;
            let mut csv = String::from("entry,aug_type,sources,config_hash,seed\n");
            let mut counts = [0usize; 4];
            let name = format!("{}-aug-{}", data.corpus.name, ctx.hash);
            for (k, s) in set.iter().enumerate() {
                let id = format!("{:06}_{}", k, s.aug_type.as_str());
                cache.put(&fhash, &name, &id, &s.source_ids, &s.features, Some(s.aug_type))?;
                counts[s.aug_type.index()] += 1;
                csv.push_str(&format!("{},{},{},{},{}\n", id, s.aug_type.as_str(), s.source_ids.join("+"), ctx.hash, cfg.seed));
            }
            report::write_text(&dir, "augment.csv", &csv)?;
            log::info("augment", json!({ "counts": counts, "cache": cache.root() }));
            None
        }
        Command::Train => Some(train(ctx, &dir, &setup, started)?),
        Command::EvalLoso => {
            let data = load_corpus(&cfg.corpus)?;
            let pool = cfg.unlabeled.as_ref().map(load_corpus).transpose()?;
            let rep = loso_evaluate(&data, pool.as_ref(), &setup, &ctx.runner, LabelBudget::default())?;
            Some(finish(ctx, command, started, vec![rep])?)
        }
        Command::EvalCross => {
            let a = load_corpus(&cfg.corpus)?;
            let b = load_corpus(&cfg.target)?;
            let ab = cross_corpus_evaluate(&a, &b, &setup, &ctx.runner)?;
            let ba = cross_corpus_evaluate(&b, &a, &setup, &ctx.runner)?;
            Some(finish(ctx, command, started, vec![ab, ba])?)
        }
        Command::EvalNoise => {
            let data = load_corpus(&cfg.corpus)?;
            let noise = noise_pool(cfg)?;
            let mut snrs = vec![CLEAN_SNR];
            snrs.extend(&cfg.protocol.snrs);
            let ex = setup.extractor.clone();
            let batch = cfg.train.eval_batch;
            let reps = loso_condition_evaluate(&data, &setup, &ctx.runner, "noise", |m, test, seed| {
                noisy_evaluate(m, test, &noise, &snrs, &ex, seed, batch)
            })?;
            Some(finish(ctx, command, started, reps)?)
        }
        Command::EvalAttack => {
            let data = load_corpus(&cfg.corpus)?;
            let p = &cfg.protocol;
            let attacks = [
                AttackParams::fgsm(p.attack_eps),
                AttackParams {
                    bim_steps: p.bim_steps,
                    bim_step_size: p.bim_step_size,
                    ..AttackParams::bim(p.attack_eps)
                },
            ];
            let ex = setup.extractor.clone();
            let batch = cfg.train.eval_batch;
            let reps = loso_condition_evaluate(&data, &setup, &ctx.runner, "attack", |m, test, _| {
                adversarial_evaluate(m, test, &attacks, &ex, batch)
            })?;
            Some(finish(ctx, command, started, reps)?)
        }
        Command::StudyAug => {
            let data = load_corpus(&cfg.corpus)?;
            let reps = study_augmentation_selection(&data, &setup, &ctx.runner)?;
            report::write_text(&dir, "fig_aug.csv", &report::curve_csv("arm", &reps))?;
            Some(finish(ctx, command, started, reps)?)
        }
        Command::StudyFraction => {
            let data = load_corpus(&cfg.corpus)?;
            let reps = study_label_fraction(&data, &setup, &ctx.runner, &cfg.protocol.fractions, cfg.protocol.pool_rest)?;
            report::write_text(&dir, "fig_fraction.csv", &report::curve_csv("fraction", &reps))?;
            Some(finish(ctx, command, started, reps)?)
        }
        Command::StudyAblation => {
            let a = load_corpus(&cfg.corpus)?;
            let b = load_corpus(&cfg.target)?;
            let mut rows = study_ablation(&a, &b, &setup, &ctx.runner)?;
            for r in &mut rows {
                r.within.config_hash = ctx.hash.clone();
                r.cross.config_hash = ctx.hash.clone();
            }
            let mut run = finish(ctx, command, started, Vec::new())?;
            run.ablation = rows;
            Some(run)
        }
        Command::Report => {
            let runs = report::collect_runs(&ctx.out.join(&ctx.hash))?;
            if runs.is_empty() {
                log::warn("report", json!({ "detail": "no run reports found" }));
            }
            report::write_text(&dir, "summary.csv", &report::summary_csv(&runs))?;
            report::write_text(&dir, "tables.md", &report::tables_markdown(&runs))?;
            if let Some(ab) = runs.iter().find(|r| !r.ablation.is_empty()) {
                report::write_text(&dir, "table7.csv", &report::ablation_csv(&ab.ablation, &ab.config_hash, ab.seed))?;
            }
            None
        }
    };
    if let Some(run) = &mut run {
        log_reports(&run.reports);
        run.wall_clock_s = started.elapsed().as_secs_f64();
        report::write_run(&dir, run)?;
    }
    log::info("done", json!({ "command": command.name(), "seconds": started.elapsed().as_secs_f64() }));
    Ok(dir)
}

/// Trains fold `protocol.train_fold` of repeat 0, checkpointing after
/// every epoch into `<dir>/checkpoint`; an existing checkpoint is resumed.
fn train(ctx: &Context, dir: &Path, setup: &mtlaug_core::eval::Setup, started: Instant) -> Result<RunReport> {
    let cfg = &ctx.config;
    let data = load_corpus(&cfg.corpus)?;
    let pool = cfg.unlabeled.as_ref().map(load_corpus).transpose()?.map(|d| d.unlabeled());
    let splits = loso_splits(&data, 0)?;
    let split = splits.get(cfg.protocol.train_fold).ok_or_else(|| Error::Schema {
        field: "protocol.train_fold".into(),
        msg: format!("only {} folds", splits.len()),
    })?;
    let train = data.select(&split.train);
    let val = data.select(&split.val);
    let test = data.select(&split.test);
    let tc = mtlaug_core::train::TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let ck = dir.join("checkpoint");
    let mut trainer = Trainer::new(&train, &val, pool.as_ref(), &setup.extractor, &setup.model, &tc)?;
    if checkpoint::exists(&ck) {
        let state = checkpoint::load(&ck, &ctx.hash)?.into_state(&trainer.model.store, &trainer.adam)?;
        log::info("resume", json!({ "epoch": state.epoch }));
        trainer = Trainer::resume(&train, &val, pool.as_ref(), &setup.extractor, &setup.model, &tc, state)?;
    }
    while !trainer.is_done() {
        trainer.run_epoch()?;
        let row = trainer.history().rows.last().expect("row");
        log::info("epoch", json!({ "epoch": row.epoch, "lr": row.lr, "l_mt": row.l_mt, "val_uar": row.val_uar, "event": row.event.as_str() }));
        checkpoint::save(&ck, &trainer.state(), &ctx.hash)?;
    }
    report::write_text(dir, "history.csv", &tag_csv(&trainer.history().to_csv(), &ctx.hash, cfg.seed))?;
    let doc = json!({ "config_hash": ctx.hash, "seed": cfg.seed, "history": trainer.history() });
    report::write_text(dir, "history.json", &serde_json::to_string(&doc)?)?;
    let cm = test_confusion(&trainer.model, &test, &setup.extractor, tc.eval_batch)?;
    let rep = ExperimentReport::new(
        "train",
        &split.test_speaker,
        vec![mtlaug_core::eval::RepeatResult {
            repeat: 0,
            seed: cfg.seed,
            uar: cm.uar()?,
            folds: vec![mtlaug_core::eval::FoldResult {
                fold: split.test_speaker.clone(),
                seed: cfg.seed,
                val_speaker: Some(split.val_speaker.clone()),
                n_train: train.len(),
                n_unlabeled: pool.as_ref().map_or(0, |p| p.len()),
                n_test: test.len(),
                epochs: trainer.epoch(),
                uar: cm.uar()?,
                confusion: cm.clone(),
            }],
            confusion: cm,
        }],
    );
    finish(ctx, Command::Train, started, vec![rep])
}

/// Appends `config_hash,seed` columns to every line of a CSV.
fn tag_csv(csv: &str, hash: &str, seed: u64) -> String {
    let mut out = String::with_capacity(csv.len() + 32 * csv.lines().count());
    for (i, line) in csv.lines().enumerate() {
        out.push_str(line);
        if i == 0 {
            out.push_str(",config_hash,seed\n");
        } else {
            out.push_str(&format!(",{},{}\n", hash, seed));
        }
    }
    out
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            log::event("error", "failed", json!({ "kind": e.kind(), "message": e.to_string() }));
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<PathBuf> {
    let config = ExperimentConfig::load(cli.config.as_deref(), &cli.set, cli.seed)?;
    let ctx = Context {
        hash: config.hash(),
        config,
        out: cli.out.clone(),
        runner: PoolRunner::new(cli.jobs),
    };
    execute(&ctx, cli.command)
}
