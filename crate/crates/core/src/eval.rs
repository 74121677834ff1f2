//! Metrics, evaluation protocols and study drivers.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attack::{attack, AttackParams};
use crate::augment::{build_augmented_set, AugmentPolicy, AugmentationType};
use crate::corpus::{split_loso, split_random, subsample_labeled, Dataset, Emotion, N_CLASSES};
use crate::dsp::{mix_at_snr, LogMelExtractor, LogMelSpectrogram, Waveform};
use crate::error::{validation, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::rng::{self, tag};
use crate::train::{fit, History, TrainConfig};

/// `k x k` counts, rows = true class, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(validation("confusion matrix must be square"));
        }
        Ok(Self {
            k,
            counts: rows.concat(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.k + pred] += 1;
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k).map(|r| r.to_vec()).collect()
    }

    pub fn row_total(&self, truth: usize) -> u64 {
        self.counts[truth * self.k..(truth + 1) * self.k].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.k, other.k, "merging confusion matrices of different size");
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    /// True classes with no examples; they are left out of the UAR.
    pub fn absent_classes(&self) -> Vec<usize> {
        (0..self.k).filter(|&c| self.row_total(c) == 0).collect()
    }

    /// Unweighted average recall over the classes that occur.
    pub fn uar(&self) -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for c in 0..self.k {
            let t = self.row_total(c);
            if t > 0 {
                sum += self.get(c, c) as f64 / t as f64;
                n += 1;
            }
        }
        if n == 0 {
            return Err(validation("UAR of an empty confusion matrix"));
        }
        Ok(sum / n as f64)
    }

    pub fn accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            return 0.0;
        }
        (0..self.k).map(|c| self.get(c, c)).sum::<u64>() as f64 / t as f64
    }

    /// Relabels classes: class `c` becomes `perm[c]` in rows and columns.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Self::new(self.k);
        for t in 0..self.k {
            for p in 0..self.k {
                out.counts[perm[t] * self.k + perm[p]] = self.get(t, p);
            }
        }
        out
    }
}

pub fn uar(cm: &ConfusionMatrix) -> Result<f64> {
    cm.uar()
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, libm::sqrt(var))
}

/// One trained model's test outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    /// Test speaker for LOSO, a split name otherwise.
    pub fold: String,
    pub seed: u64,
    pub val_speaker: Option<String>,
    pub n_train: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    pub epochs: usize,
    /// NaN when the fold has no labeled test utterance.
    #[serde(with = "crate::train::nullable")]
    pub uar: f64,
    pub confusion: ConfusionMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatResult {
    pub repeat: usize,
    pub seed: u64,
    /// UAR of the confusion pooled over all folds.
    #[serde(with = "crate::train::nullable")]
    pub uar: f64,
    pub confusion: ConfusionMatrix,
    pub folds: Vec<FoldResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub protocol: String,
    pub arm: String,
    /// `source->target` for cross-corpus runs.
    pub direction: Option<String>,
    pub config_hash: String,
    pub repeats: Vec<RepeatResult>,
    #[serde(with = "crate::train::nullable")]
    pub mean_uar: f64,
    #[serde(with = "crate::train::nullable")]
    pub std_uar: f64,
    pub wall_clock_s: f64,
    pub warnings: Vec<String>,
}

impl ExperimentReport {
    pub fn new(protocol: &str, arm: &str, repeats: Vec<RepeatResult>) -> Self {
        let uars: Vec<f64> = repeats.iter().map(|r| r.uar).collect();
        let (mean_uar, std_uar) = mean_std(&uars);
        let mut warnings = Vec::new();
        for r in &repeats {
            let absent = r.confusion.absent_classes();
            if !absent.is_empty() {
                warnings.push(format!("repeat {}: classes {:?} absent from test data", r.repeat, absent));
            }
            for f in &r.folds {
                let absent = f.confusion.absent_classes();
                if !absent.is_empty() && f.confusion.total() > 0 {
                    warnings.push(format!("repeat {} fold {}: classes {:?} absent", r.repeat, f.fold, absent));
                }
            }
        }
        Self {
            protocol: protocol.to_string(),
            arm: arm.to_string(),
            direction: None,
            config_hash: String::new(),
            repeats,
            mean_uar,
            std_uar,
            wall_clock_s: 0.0,
            warnings,
        }
    }

    pub fn n_models(&self) -> usize {
        self.repeats.iter().map(|r| r.folds.len()).sum()
    }

    /// `protocol,arm,repeat,fold,uar` rows, repeat-level rows use fold `all`.
    pub fn csv_rows(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in &self.repeats {
            for f in &r.folds {
                out.push(format!("{},{},{},{},{}", self.protocol, self.arm, r.repeat, f.fold, f.uar));
            }
            out.push(format!("{},{},{},all,{}", self.protocol, self.arm, r.repeat, r.uar));
        }
        out
    }
}

pub const REPORT_CSV_HEADER: &str = "protocol,arm,repeat,fold,uar";

/// Runs independent tasks; implementations may run them concurrently but
/// must return results in index order.
pub trait Runner: Sync {
    fn run<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

pub struct Sequential;

impl Runner for Sequential {
    fn run<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}

/// Shared configuration of a protocol run.
#[derive(Clone, Debug)]
pub struct Setup {
    pub extractor: LogMelExtractor,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub base_seed: u64,
    pub n_repeats: usize,
}

impl Setup {
    pub fn seed(&self, repeat: usize) -> u64 {
        self.base_seed.wrapping_add(repeat as u64)
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    fn check(&self) -> Result<()> {
        if self.n_repeats == 0 {
            return Err(Error::Config("n_repeats must be at least 1".into()));
        }
        self.model.validate()?;
        self.train.validate()
    }
}

fn labels_of(data: &Dataset) -> Vec<Option<Emotion>> {
    data.corpus.utterances().iter().map(|u| u.emotion).collect()
}

/// Confusion of `model` on the labeled utterances of `test`.
pub fn test_confusion(model: &Model<f32>, test: &Dataset, extractor: &LogMelExtractor, batch: usize) -> Result<ConfusionMatrix> {
    let idx: Vec<usize> = (0..test.len()).filter(|&i| test.corpus.utterances()[i].emotion.is_some()).collect();
    let sub = test.select(&idx);
    let feats = crate::augment::extract_all(&sub, extractor)?;
    confusion_on(model, &feats, &labels_of(&sub), batch)
}

fn confusion_on(model: &Model<f32>, feats: &[LogMelSpectrogram], labels: &[Option<Emotion>], batch: usize) -> Result<ConfusionMatrix> {
    let refs: Vec<&LogMelSpectrogram> = feats.iter().collect();
    let pred = model.predict(&refs, batch)?;
    let mut cm = ConfusionMatrix::new(N_CLASSES);
    for (y, p) in labels.iter().zip(pred) {
        if let Some(y) = y {
            cm.add(y.index(), p);
        }
    }
    Ok(cm)
}

fn ids(data: &Dataset, idx: &[usize]) -> BTreeSet<String> {
    idx.iter().map(|&i| data.corpus.utterances()[i].id.clone()).collect()
}

fn assert_disjoint(data: &Dataset, parts: &[&[usize]]) -> Result<()> {
    for a in 0..parts.len() {
        for b in a + 1..parts.len() {
            let (x, y) = (ids(data, parts[a]), ids(data, parts[b]));
            if let Some(id) = x.intersection(&y).next() {
                return Err(Error::Protocol(format!("utterance {} leaks across splits", id)));
            }
        }
    }
    Ok(())
}

/// How the training portion of a fold is reduced before fitting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelBudget {
    /// Fraction of labeled training utterances kept, per speaker and class.
    pub fraction: f64,
    /// Whether the dropped utterances join the unlabeled pool.
    pub pool_rest: bool,
}

impl Default for LabelBudget {
    fn default() -> Self {
        Self {
            fraction: 1.0,
            pool_rest: false,
        }
    }
}

/// Train / validation / test indices of one LOSO fold. The validation
/// speaker rotates over the training speakers with the repeat index.
pub struct LosoSplit {
    pub test_speaker: String,
    pub val_speaker: String,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn loso_splits(data: &Dataset, repeat: usize) -> Result<Vec<LosoSplit>> {
    let folds = split_loso(&data.corpus)?;
    let utts = data.corpus.utterances();
    folds
        .into_iter()
        .map(|f| {
            let mut speakers: Vec<&str> = f.train.iter().map(|&i| utts[i].speaker_id.as_str()).collect();
            speakers.sort_unstable();
            speakers.dedup();
            if speakers.len() < 2 {
                return Err(Error::Protocol(format!(
                    "fold {} leaves {} training speaker(s); a validation speaker needs at least 2",
                    f.speaker,
                    speakers.len()
                )));
            }
            let val_speaker = speakers[repeat % speakers.len()].to_string();
            let (val, train): (Vec<usize>, Vec<usize>) = f.train.iter().partition(|&&i| utts[i].speaker_id == val_speaker);
            Ok(LosoSplit {
                test_speaker: f.speaker,
                val_speaker,
                train,
                val,
                test: f.test,
            })
        })
        .collect()
}

/// Everything a single trained fold produced.
pub struct FoldRun {
    pub result: FoldResult,
    pub model: Model<f32>,
    pub history: History,
}

/// Trains one LOSO fold and scores it on the held-out speaker.
pub fn run_loso_fold(
    data: &Dataset,
    extra_unlabeled: Option<&Dataset>,
    setup: &Setup,
    split: &LosoSplit,
    seed: u64,
    budget: LabelBudget,
) -> Result<FoldRun> {
    assert_disjoint(data, &[&split.train, &split.val, &split.test])?;
    let train_all = data.select(&split.train);
    let (kept, rest) = subsample_labeled(&train_all.corpus, budget.fraction, rng::derive_seed(seed, &[tag::SUBSAMPLE]))?;
    let unlabeled_in_train: Vec<usize> = (0..train_all.len())
        .filter(|&i| train_all.corpus.utterances()[i].emotion.is_none())
        .collect();
    let mut train_idx = kept;
    train_idx.extend(unlabeled_in_train);
    train_idx.sort_unstable();
    let train = train_all.select(&train_idx);
    let mut pool: Option<Dataset> = extra_unlabeled.map(|d| d.unlabeled());
    if budget.pool_rest && !rest.is_empty() {
        let dropped = train_all.select(&rest).unlabeled();
        pool = Some(match pool {
            Some(p) => concat(&p, &dropped)?,
            None => dropped,
        });
    }
    let val = data.select(&split.val);
    let tc = setup.train_config(seed);
    let (model, history) = fit(&train, &val, pool.as_ref(), &setup.extractor, &setup.model, &tc)?;
    let test = data.select(&split.test);
    let cm = test_confusion(&model, &test, &setup.extractor, tc.eval_batch)?;
    let result = FoldResult {
        fold: split.test_speaker.clone(),
        seed,
        val_speaker: Some(split.val_speaker.clone()),
        n_train: train.len(),
        n_unlabeled: pool.as_ref().map_or(0, |p| p.len()),
        n_test: test.len(),
        epochs: history.rows.len() - 1,
        uar: cm.uar().unwrap_or(f64::NAN),
        confusion: cm,
    };
    Ok(FoldRun { result, model, history })
}

/// Concatenates two datasets (utterance ids must stay unique).
pub fn concat(a: &Dataset, b: &Dataset) -> Result<Dataset> {
    let mut utts = a.corpus.utterances().to_vec();
    utts.extend_from_slice(b.corpus.utterances());
    let mut audio = a.audio.clone();
    audio.extend_from_slice(&b.audio);
    Dataset::new(crate::corpus::Corpus::new(a.corpus.name.clone(), utts)?, audio)
}

fn collect_repeats(setup: &Setup, per_task: Vec<Result<FoldResult>>, n_folds: usize) -> Result<Vec<RepeatResult>> {
    let mut results = per_task.into_iter();
    let mut repeats = Vec::with_capacity(setup.n_repeats);
    for r in 0..setup.n_repeats {
        let folds: Vec<FoldResult> = results.by_ref().take(n_folds).collect::<Result<_>>()?;
        let mut cm = ConfusionMatrix::new(N_CLASSES);
        folds.iter().for_each(|f| cm.merge(&f.confusion));
        repeats.push(RepeatResult {
            repeat: r,
            seed: setup.seed(r),
            uar: cm.uar()?,
            confusion: cm,
            folds,
        });
    }
    Ok(repeats)
}

/// Leave-one-speaker-out over `n_repeats` seeds. Folds and repeats are
/// independent tasks handed to `runner`.
pub fn loso_evaluate<R: Runner>(
    data: &Dataset,
    unlabeled: Option<&Dataset>,
    setup: &Setup,
    runner: &R,
    budget: LabelBudget,
) -> Result<ExperimentReport> {
    setup.check()?;
    let splits: Vec<Vec<LosoSplit>> = (0..setup.n_repeats).map(|r| loso_splits(data, r)).collect::<Result<_>>()?;
    let n_folds = splits[0].len();
    let results = runner.run(setup.n_repeats * n_folds, |t| {
        let (r, f) = (t / n_folds, t % n_folds);
        run_loso_fold(data, unlabeled, setup, &splits[r][f], setup.seed(r), budget).map(|x| x.result)
    });
    let repeats = collect_repeats(setup, results, n_folds)?;
    Ok(ExperimentReport::new("loso", "default", repeats))
}

/// Trains on all of `source`, selects on 30 % of `target` and tests on the
/// other 70 %. The split is fixed by `setup.base_seed`; repeats vary the
/// training seed.
pub fn cross_corpus_evaluate<R: Runner>(
    source: &Dataset,
    target: &Dataset,
    setup: &Setup,
    runner: &R,
) -> Result<ExperimentReport> {
    setup.check()?;
    let (val_idx, test_idx) = split_random(&target.corpus, 0.3, setup.base_seed, false)?;
    let val = target.select(&val_idx);
    let test = target.select(&test_idx);
    let results = runner.run(setup.n_repeats, |r| -> Result<FoldResult> {
        let tc = setup.train_config(setup.seed(r));
        let (model, history) = fit(source, &val, None, &setup.extractor, &setup.model, &tc)?;
        let cm = test_confusion(&model, &test, &setup.extractor, tc.eval_batch)?;
        Ok(FoldResult {
            fold: "test".into(),
            seed: tc.seed,
            val_speaker: None,
            n_train: source.len(),
            n_unlabeled: 0,
            n_test: test.len(),
            epochs: history.rows.len() - 1,
            uar: cm.uar().unwrap_or(f64::NAN),
            confusion: cm,
        })
    });
    let repeats = collect_repeats(setup, results, 1)?;
    let mut rep = ExperimentReport::new("cross_corpus", "default", repeats);
    rep.direction = Some(format!("{}->{}", source.corpus.name, target.corpus.name));
    Ok(rep)
}

/// Clean-condition marker for [`noisy_evaluate`].
pub const CLEAN_SNR: f64 = f64::INFINITY;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    /// `clean`, `snr=10`, `fgsm`, ...
    pub condition: String,
    pub uar: f64,
    pub confusion: ConfusionMatrix,
}

/// Mixes every labeled test utterance with an excerpt of a noise drawn from
/// `noise`, per SNR. An utterance keeps the same excerpt across SNRs so the
/// conditions are paired. `CLEAN_SNR` scores the unmixed audio.
pub fn noisy_evaluate(
    model: &Model<f32>,
    test: &Dataset,
    noise: &[Waveform],
    snrs: &[f64],
    extractor: &LogMelExtractor,
    seed: u64,
    batch: usize,
) -> Result<Vec<ConditionResult>> {
    if noise.is_empty() {
        return Err(Error::Protocol("noise pool is empty".into()));
    }
    if snrs.iter().any(|s| s.is_nan() || *s == f64::NEG_INFINITY) {
        return Err(validation("snr must be a number or +inf"));
    }
    let idx: Vec<usize> = (0..test.len()).filter(|&i| test.corpus.utterances()[i].emotion.is_some()).collect();
    let sub = test.select(&idx);
    let labels = labels_of(&sub);
    let picks: Vec<(usize, usize)> = (0..sub.len())
        .map(|i| {
            let mut r = rng::stream(seed, &[tag::NOISE, i as u64]);
            let k = r.gen_range(0..noise.len());
            let off = r.gen_range(0..noise[k].len());
            (k, off)
        })
        .collect();
    snrs.iter()
        .map(|&snr| {
            let feats = sub
                .audio
                .iter()
                .zip(&picks)
                .map(|(w, &(k, off))| {
                    if snr == CLEAN_SNR {
                        extractor.extract(w)
                    } else {
                        extractor.extract(&mix_at_snr(w, &noise[k], snr, off)?.mixed)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let cm = confusion_on(model, &feats, &labels, batch)?;
            Ok(ConditionResult {
                condition: if snr == CLEAN_SNR { "clean".into() } else { format!("snr={}", snr) },
                uar: cm.uar()?,
                confusion: cm,
            })
        })
        .collect()
}

/// Clean UAR followed by one row per attack.
pub fn adversarial_evaluate(
    model: &Model<f32>,
    test: &Dataset,
    attacks: &[AttackParams],
    extractor: &LogMelExtractor,
    batch: usize,
) -> Result<Vec<ConditionResult>> {
    let idx: Vec<usize> = (0..test.len()).filter(|&i| test.corpus.utterances()[i].emotion.is_some()).collect();
    let sub = test.select(&idx);
    let labels = labels_of(&sub);
    let y: Vec<Emotion> = labels.iter().map(|e| e.expect("labeled")).collect();
    let feats = crate::augment::extract_all(&sub, extractor)?;
    let refs: Vec<&LogMelSpectrogram> = feats.iter().collect();
    let clean = confusion_on(model, &feats, &labels, batch)?;
    let mut out = vec![ConditionResult {
        condition: "clean".into(),
        uar: clean.uar()?,
        confusion: clean,
    }];
    for a in attacks {
        let adv = attack(model, &refs, &y, a, batch)?;
        let cm = confusion_on(model, &adv, &labels, batch)?;
        out.push(ConditionResult {
            condition: format!("{}@{}", a.kind.as_str(), a.eps),
            uar: cm.uar()?,
            confusion: cm,
        });
    }
    Ok(out)
}

/// Accuracy of the augmentation-type head on augmented copies of `test`.
/// Returns the accuracy and the 4x4 confusion over augmentation types.
pub fn augtype_accuracy(
    model: &Model<f32>,
    test: &Dataset,
    extractor: &LogMelExtractor,
    policy: &AugmentPolicy,
    seed: u64,
    batch: usize,
) -> Result<(f64, ConfusionMatrix)> {
    let set = build_augmented_set(test, extractor, policy, seed, None)?;
    let refs: Vec<&LogMelSpectrogram> = set.iter().map(|s| &s.features).collect();
    let pred = model.predict_augtype(&refs, batch)?;
    let mut cm = ConfusionMatrix::new(crate::augment::N_AUG_TYPES);
    for (s, p) in set.iter().zip(pred) {
        cm.add(s.aug_type.index(), p);
    }
    Ok((cm.accuracy(), cm))
}

/// Trains every LOSO fold once and scores the model under each condition
/// returned by `conditions` (for example SNR levels or attacks). Produces
/// one report per condition, named by the condition.
pub fn loso_condition_evaluate<R, F>(data: &Dataset, setup: &Setup, runner: &R, protocol: &str, conditions: F) -> Result<Vec<ExperimentReport>>
where
    R: Runner,
    F: Fn(&Model<f32>, &Dataset, u64) -> Result<Vec<ConditionResult>> + Sync + Send,
{
    setup.check()?;
    let splits: Vec<Vec<LosoSplit>> = (0..setup.n_repeats).map(|r| loso_splits(data, r)).collect::<Result<_>>()?;
    let n_folds = splits[0].len();
    let results = runner.run(setup.n_repeats * n_folds, |t| -> Result<Vec<FoldResult>> {
        let (r, f) = (t / n_folds, t % n_folds);
        let split = &splits[r][f];
        let run = run_loso_fold(data, None, setup, split, setup.seed(r), LabelBudget::default())?;
        let before = run.model.store.checksum(None);
        let test = data.select(&split.test);
        let conds = conditions(&run.model, &test, setup.seed(r))?;
        if run.model.store.checksum(None) != before {
            return Err(Error::Protocol("evaluation modified the model".into()));
        }
        Ok(conds
            .into_iter()
            .map(|c| FoldResult {
                fold: c.condition,
                uar: c.uar,
                confusion: c.confusion,
                ..run.result.clone()
            })
            .collect())
    });
    let per_task: Vec<Vec<FoldResult>> = results.into_iter().collect::<Result<_>>()?;
    let n_cond = per_task.first().map_or(0, |v| v.len());
    if per_task.iter().any(|v| v.len() != n_cond) {
        return Err(Error::Protocol("folds returned different condition sets".into()));
    }
    (0..n_cond)
        .map(|c| {
            let name = per_task[0][c].fold.clone();
            let tasks = per_task
                .iter()
                .enumerate()
                .map(|(t, v)| {
                    Ok(FoldResult {
                        fold: splits[t / n_folds][t % n_folds].test_speaker.clone(),
                        ..v[c].clone()
                    })
                })
                .collect();
            Ok(ExperimentReport::new(protocol, &name, collect_repeats(setup, tasks, n_folds)?))
        })
        .collect()
}

/// Single-augmentation arms (speed, SpecAugment, mixup) against the full
/// policy. Each single arm trains the auxiliary head on originals versus
/// one augmentation type.
pub fn study_augmentation_selection<R: Runner>(data: &Dataset, setup: &Setup, runner: &R) -> Result<Vec<ExperimentReport>> {
    let base = setup.train.policy.clone();
    let arms = [
        ("speed", single(&base, AugmentationType::Speed)),
        ("specaugment", single(&base, AugmentationType::SpecAugment)),
        ("mixup", single(&base, AugmentationType::Mixup)),
        ("all", base.clone()),
    ];
    arms.into_iter()
        .map(|(name, policy)| {
            let s = Setup {
                train: TrainConfig { policy, ..setup.train.clone() },
                ..setup.clone()
            };
            let mut rep = loso_evaluate(data, None, &s, runner, LabelBudget::default())?;
            rep.protocol = "study_aug".into();
            rep.arm = name.into();
            Ok(rep)
        })
        .collect()
}

fn single(base: &AugmentPolicy, kind: AugmentationType) -> AugmentPolicy {
    let mut p = AugmentPolicy::only(kind);
    p.specaugment = base.specaugment.clone();
    p.mixup = base.mixup;
    if kind == AugmentationType::Speed {
        p.speed_factors = base.speed_factors.clone();
    }
    if kind == AugmentationType::SpecAugment {
        p.specaugment_copies = base.specaugment_copies.max(1);
    }
    if kind == AugmentationType::Mixup {
        p.mixup_copies = base.mixup_copies.max(1);
    }
    p
}

/// LOSO at each labeled fraction. With `pool_rest` the dropped utterances
/// stay in training as unlabeled speech.
pub fn study_label_fraction<R: Runner>(
    data: &Dataset,
    setup: &Setup,
    runner: &R,
    fractions: &[f64],
    pool_rest: bool,
) -> Result<Vec<ExperimentReport>> {
    fractions
        .iter()
        .map(|&fraction| {
            let mut rep = loso_evaluate(data, None, setup, runner, LabelBudget { fraction, pool_rest })?;
            rep.protocol = "study_fraction".into();
            rep.arm = format!("{}", fraction);
            Ok(rep)
        })
        .collect()
}

/// One line of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: usize,
    pub augtype: bool,
    pub reconstruction: bool,
    pub center_loss: bool,
    pub attention: bool,
    pub within: ExperimentReport,
    pub cross: ExperimentReport,
}

/// Model configurations 1 to 5 under LOSO on `data` and cross-corpus from
/// `data` to `target`.
pub fn study_ablation<R: Runner>(data: &Dataset, target: &Dataset, setup: &Setup, runner: &R) -> Result<Vec<AblationRow>> {
    (1..=5)
        .map(|k| {
            let mc = setup.model.clone().ablation(k)?;
            let s = Setup {
                model: mc.clone(),
                ..setup.clone()
            };
            let mut within = loso_evaluate(data, None, &s, runner, LabelBudget::default())?;
            within.protocol = "ablation_within".into();
            within.arm = format!("model{}", k);
            let mut cross = cross_corpus_evaluate(data, target, &s, runner)?;
            cross.protocol = "ablation_cross".into();
            cross.arm = format!("model{}", k);
            Ok(AblationRow {
                model: k,
                augtype: mc.use_aux_augtype,
                reconstruction: mc.use_aux_reconstruction,
                center_loss: mc.use_center_loss,
                attention: mc.use_attention,
                within,
                cross,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_class_uar() {
        let cm = ConfusionMatrix::from_rows(&[vec![8, 2], vec![5, 5]]).unwrap();
        assert_eq!(cm.uar().unwrap(), 0.65);
        assert_eq!(cm.accuracy(), 0.65);
    }

    #[test]
    fn perfect_and_empty() {
        let mut cm = ConfusionMatrix::new(4);
        for c in 0..4 {
            cm.add(c, c);
        }
        assert_eq!(cm.uar().unwrap(), 1.0);
        assert!(ConfusionMatrix::new(4).uar().is_err());
    }

    #[test]
    fn absent_class_excluded() {
        let cm = ConfusionMatrix::from_rows(&[vec![3, 1, 0], vec![0, 0, 0], vec![0, 0, 2]]).unwrap();
        assert_eq!(cm.absent_classes(), vec![1]);
        assert_eq!(cm.uar().unwrap(), (0.75 + 1.0) / 2.0);
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - libm::sqrt(5.0 / 3.0)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn uar_permutation_invariant(counts in proptest::collection::vec(0u64..20, 16), seed in 0u64..1000) {
            let rows: Vec<Vec<u64>> = counts.chunks(4).map(|c| c.to_vec()).collect();
            let cm = ConfusionMatrix::from_rows(&rows).unwrap();
            let mut perm = vec![0, 1, 2, 3];
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng::stream(seed, &[]));
            let p = cm.permuted(&perm);
            prop_assert_eq!(p.total(), cm.total());
            match (cm.uar(), p.uar()) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false),
            }
        }
    }
}
