//! Multitask loss, optimisation steps, the plateau schedule and the
//! resumable training loop.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{build_augmented_set, extract_all, AugmentPolicy, AugmentedSample, N_AUG_TYPES};
use crate::autodiff::{AdamState, Group, ParamStore, Tape, Tensor, Var};
use crate::corpus::Dataset;
use crate::dsp::{LogMelExtractor, LogMelSpectrogram};
use crate::error::{Error, Result};
use crate::eval::ConfusionMatrix;
use crate::model::{Heads, Model, ModelConfig, Outputs};
use crate::rng::{self, tag, Rng};

/// Whether a batch carries emotion labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Labeled,
    Unlabeled,
}

/// Every term of the multitask objective for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MtlLossBreakdown {
    pub l_mt: f64,
    pub l_pri: f64,
    pub l_s: f64,
    pub l_c: f64,
    pub l_aux: f64,
    pub l_augtype: f64,
    pub l_recon: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Graph built by [`mtl_loss`].
pub struct LossGraph {
    pub root: Var,
    pub outputs: Outputs,
    pub breakdown: MtlLossBreakdown,
}

fn check_mode(batch: &[&AugmentedSample], mode: Mode) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let labeled = batch.iter().filter(|s| s.emotion.is_some()).count();
    let ok = match mode {
        Mode::Labeled => labeled == batch.len(),
        Mode::Unlabeled => labeled == 0,
    };
    if !ok {
        return Err(Error::Usage(format!(
            "{:?} batch holds {} labeled and {} unlabeled samples",
            mode,
            labeled,
            batch.len() - labeled
        )));
    }
    Ok(())
}

/// Builds `l_mt = l_pri + lambda1 * l_aux` with `l_pri = l_s + lambda2 * l_c`
/// and `l_aux = w_augtype * l_augtype + w_recon * l_recon`. Unlabeled batches
/// evaluate only the auxiliary terms. Terms whose weight is zero are logged
/// but kept out of the differentiated root.
pub fn mtl_loss<R: rand::RngCore>(
    model: &Model<f32>,
    tape: &mut Tape<f32>,
    batch: &[&AugmentedSample],
    mode: Mode,
    train: bool,
    rng: &mut R,
) -> Result<LossGraph> {
    check_mode(batch, mode)?;
    let cfg = &model.config;
    let specs: Vec<&LogMelSpectrogram> = batch.iter().map(|s| &s.features).collect();
    let x = tape.constant(model.batch(&specs)?);
    let heads = Heads {
        emotion: mode == Mode::Labeled,
        augtype: model.has_augtype_head(),
        reconstruction: model.has_decoder(),
    };
    let out = model.forward(tape, x, heads, train, rng)?;
    let (l1, l2) = (cfg.lambda1, cfg.lambda2);
    let mut b = MtlLossBreakdown {
        lambda1: l1,
        lambda2: l2,
        ..Default::default()
    };

    let mut aux_terms = Vec::new();
    if let Some(al) = out.aug_logits {
        let mut targets = vec![0.0f32; batch.len() * N_AUG_TYPES];
        for (i, s) in batch.iter().enumerate() {
            targets[i * N_AUG_TYPES + s.aug_type.index()] = 1.0;
        }
        let l = tape.softmax_cross_entropy(al, &targets)?;
        b.l_augtype = tape.value(l).item() as f64;
        if cfg.w_augtype > 0.0 {
            aux_terms.push(tape.scale(l, cfg.w_augtype as f32)?);
        }
    }
    if let Some(rec) = out.reconstruction {
        let l = tape.mse(rec, out.input, !cfg.recon_sum)?;
        b.l_recon = tape.value(l).item() as f64;
        if cfg.w_recon > 0.0 {
            aux_terms.push(tape.scale(l, cfg.w_recon as f32)?);
        }
    }
    b.l_aux = cfg.w_augtype * b.l_augtype + cfg.w_recon * b.l_recon;
    let aux = match aux_terms.as_slice() {
        [] => None,
        [a] => Some(*a),
        [a, c] => Some(tape.add(*a, *c)?),
        _ => unreachable!(),
    };

    let root = match mode {
        Mode::Labeled => {
            let logits = out.logits.expect("emotion head");
            let targets: Vec<f32> = batch.iter().flat_map(|s| s.emotion.expect("labeled")).collect();
            let ls = tape.softmax_cross_entropy(logits, &targets)?;
            b.l_s = tape.value(ls).item() as f64;
            let mut pri = ls;
            if cfg.use_center_loss {
                let labels: Vec<Option<usize>> = batch.iter().map(|s| s.center_label()).collect();
                let lc = tape.center_loss(out.features.expect("features"), &labels, &model.centers)?;
                b.l_c = tape.value(lc).item() as f64;
                if l2 > 0.0 {
                    let w = tape.scale(lc, l2 as f32)?;
                    pri = tape.add(ls, w)?;
                }
            }
            b.l_pri = tape.value(pri).item() as f64;
            match aux {
                Some(a) if l1 > 0.0 => {
                    let w = tape.scale(a, l1 as f32)?;
                    tape.add(pri, w)?
                }
                _ => pri,
            }
        }
        Mode::Unlabeled => {
            let a = match aux {
                Some(a) if l1 > 0.0 => a,
                _ => return Err(Error::Usage("unlabeled batch without a weighted auxiliary loss".into())),
            };
            tape.scale(a, l1 as f32)?
        }
    };
    b.l_mt = tape.value(root).item() as f64;
    Ok(LossGraph {
        root,
        outputs: out,
        breakdown: b,
    })
}

/// Groups an optimiser step may touch in each mode. Unlabeled batches never
/// reach the emotion head.
pub fn allowed_groups(mode: Mode) -> &'static [Group] {
    match mode {
        Mode::Labeled => &[Group::Encoder, Group::Decoder, Group::Emotion, Group::AugType],
        Mode::Unlabeled => &[Group::Encoder, Group::Decoder, Group::AugType],
    }
}

/// Moves every centre toward the mean deep feature of its class:
/// `c_j -= alpha * sum_i (c_j - f_i) / (1 + n_j)`.
pub fn update_centers(centers: &mut Tensor<f32>, features: &[f32], labels: &[Option<usize>], alpha: f64) {
    let d = centers.shape()[1];
    let k = centers.shape()[0];
    for j in 0..k {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Some(j)).collect();
        if rows.is_empty() {
            continue;
        }
        let c = &mut centers.data_mut()[j * d..(j + 1) * d];
        let denom = 1.0 + rows.len() as f64;
        for (q, cv) in c.iter_mut().enumerate() {
            let sum: f64 = rows.iter().map(|&i| *cv as f64 - features[i * d + q] as f64).sum();
            *cv -= (alpha * sum / denom) as f32;
        }
    }
}

/// One optimiser step on `batch`. Centres move after the parameter update
/// and only on labeled batches.
pub fn train_step<R: rand::RngCore>(
    model: &mut Model<f32>,
    adam: &mut AdamState,
    batch: &[&AugmentedSample],
    mode: Mode,
    rng: &mut R,
) -> Result<MtlLossBreakdown> {
    let mut tape = Tape::new();
    let g = mtl_loss(model, &mut tape, batch, mode, true, rng)?;
    let grads = tape.backward(g.root)?;
    model.store.zero_grad();
    model.store.accumulate(&tape, &grads);
    adam.step(&mut model.store, allowed_groups(mode))?;
    if mode == Mode::Labeled && model.config.use_center_loss {
        let labels: Vec<Option<usize>> = batch.iter().map(|s| s.center_label()).collect();
        let f = tape.data(g.outputs.features.expect("features")).to_vec();
        let alpha = model.config.center_alpha;
        update_centers(&mut model.centers, &f, &labels, alpha);
    }
    Ok(g.breakdown)
}

/// Model-selection metric on the validation set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    Uar,
    Accuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without improvement before the rate is halved.
    pub patience: usize,
    pub lr_decay: f64,
    /// Training halts once the rate drops below this.
    pub min_lr: f64,
    /// Unlabeled batches after each labeled batch.
    pub unlabeled_per_labeled: usize,
    pub selection: Selection,
    pub policy: AugmentPolicy,
    /// Re-draw augmented copies every epoch instead of once per run.
    pub regenerate_augmentations: bool,
    pub seed: u64,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 32,
            max_epochs: 200,
            patience: 5,
            lr_decay: 0.5,
            min_lr: 1e-5,
            unlabeled_per_labeled: 1,
            selection: Selection::Uar,
            policy: AugmentPolicy::default(),
            regenerate_augmentations: false,
            seed: 0,
            eval_batch: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad(format!("lr_decay {} not in (0, 1)", self.lr_decay));
        }
        if !(self.min_lr.is_finite() && self.min_lr >= 0.0) {
            return bad("min_lr must be finite and non-negative".into());
        }
        self.policy.validate()
    }
}

/// What the schedule did at the end of an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Event {
    Improved,
    Plateau,
    /// Rate halved; the caller restores the best snapshot.
    Halved,
    /// Rate fell below the floor; the caller restores the best snapshot and stops.
    Halted,
}

impl Event {
    pub fn as_str(self) -> &'static str {
        match self {
            Event::Improved => "improved",
            Event::Plateau => "plateau",
            Event::Halved => "halved",
            Event::Halted => "halted",
        }
    }
}

/// Halve-on-plateau bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub lr: f64,
    pub best_val: f64,
    pub best_epoch: usize,
    pub epochs_since_improve: usize,
    pub halvings: usize,
    pub halt: bool,
}

impl ScheduleState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            best_val: f64::NEG_INFINITY,
            best_epoch: 0,
            epochs_since_improve: 0,
            halvings: 0,
            halt: false,
        }
    }

    /// Records the validation score of `epoch`. Only a strict improvement
    /// resets the plateau counter.
    pub fn observe(&mut self, epoch: usize, val: f64, patience: usize, decay: f64, min_lr: f64) -> Event {
        if val > self.best_val {
            self.best_val = val;
            self.best_epoch = epoch;
            self.epochs_since_improve = 0;
            return Event::Improved;
        }
        self.epochs_since_improve += 1;
        if self.epochs_since_improve < patience {
            return Event::Plateau;
        }
        self.epochs_since_improve = 0;
        self.lr *= decay;
        self.halvings += 1;
        if self.lr < min_lr {
            self.halt = true;
            Event::Halted
        } else {
            Event::Halved
        }
    }
}

/// Restorable copy of the trainable state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub params: ParamStore<f32>,
    pub centers: Tensor<f32>,
    pub adam: AdamState,
}

/// Serialises NaN as `null` so text formats without NaN round-trip.
pub mod nullable {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            None::<f64>.serialize(s)
        } else {
            Some(*v).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// One line of the training log. Epoch 0 is the untrained baseline and has
/// NaN losses.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub lr: f64,
    #[serde(with = "nullable")]
    pub l_mt: f64,
    #[serde(with = "nullable")]
    pub l_pri: f64,
    #[serde(with = "nullable")]
    pub l_s: f64,
    #[serde(with = "nullable")]
    pub l_c: f64,
    #[serde(with = "nullable")]
    pub l_augtype: f64,
    #[serde(with = "nullable")]
    pub l_recon: f64,
    pub val_uar: f64,
    pub val_accuracy: f64,
    /// Unlabeled stream (zero when no unlabeled batches ran).
    #[serde(with = "nullable")]
    pub u_l_mt: f64,
    #[serde(with = "nullable")]
    pub u_l_augtype: f64,
    #[serde(with = "nullable")]
    pub u_l_recon: f64,
    pub labeled_batches: usize,
    pub unlabeled_batches: usize,
    pub event: Event,
}

pub const HISTORY_HEADER: &str =
    "epoch,lr,l_mt,l_pri,l_s,l_c,l_augtype,l_recon,val_uar,val_accuracy,u_l_mt,u_l_augtype,u_l_recon,labeled_batches,unlabeled_batches,event";

impl PartialEq for HistoryRow {
    /// Bitwise on floats, so NaN rows compare equal to themselves.
    fn eq(&self, o: &Self) -> bool {
        let f = |r: &Self| {
            [
                r.lr, r.l_mt, r.l_pri, r.l_s, r.l_c, r.l_augtype, r.l_recon, r.val_uar, r.val_accuracy, r.u_l_mt, r.u_l_augtype,
                r.u_l_recon,
            ]
            .map(f64::to_bits)
        };
        self.epoch == o.epoch
            && f(self) == f(o)
            && self.labeled_batches == o.labeled_batches
            && self.unlabeled_batches == o.unlabeled_batches
            && self.event == o.event
    }
}

impl HistoryRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:e},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.l_mt,
            self.l_pri,
            self.l_s,
            self.l_c,
            self.l_augtype,
            self.l_recon,
            self.val_uar,
            self.val_accuracy,
            self.u_l_mt,
            self.u_l_augtype,
            self.u_l_recon,
            self.labeled_batches,
            self.unlabeled_batches,
            self.event.as_str()
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub rows: Vec<HistoryRow>,
    /// Every per-batch breakdown, in order.
    pub steps: Vec<(Mode, MtlLossBreakdown)>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv());
            s.push('\n');
        }
        s
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub params: ParamStore<f32>,
    pub centers: Tensor<f32>,
    pub input_mean: f64,
    pub input_std: f64,
    pub adam: AdamState,
    pub schedule: ScheduleState,
    pub best: Snapshot,
    pub rng: Rng,
    pub epoch: usize,
    pub unlabeled_cursor: usize,
    pub unlabeled_order: Vec<usize>,
    pub history: History,
    pub done: bool,
}

/// Validation scores of `model` on labeled features.
pub fn evaluate(model: &Model<f32>, feats: &[LogMelSpectrogram], labels: &[usize], batch: usize) -> Result<ConfusionMatrix> {
    let refs: Vec<&LogMelSpectrogram> = feats.iter().collect();
    let pred = model.predict(&refs, batch)?;
    let mut cm = ConfusionMatrix::new(crate::corpus::N_CLASSES);
    for (&t, &p) in labels.iter().zip(&pred) {
        cm.add(t, p);
    }
    Ok(cm)
}

/// Resumable training loop over fixed train / validation / unlabeled data.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub adam: AdamState,
    pub schedule: ScheduleState,
    best: Snapshot,
    rng: Rng,
    epoch: usize,
    done: bool,
    history: History,
    train_data: Dataset,
    train_feats: Vec<LogMelSpectrogram>,
    unlabeled_data: Option<Dataset>,
    extractor: LogMelExtractor,
    labeled: Vec<AugmentedSample>,
    unlabeled: Vec<AugmentedSample>,
    unlabeled_order: Vec<usize>,
    unlabeled_cursor: usize,
    val_feats: Vec<LogMelSpectrogram>,
    val_labels: Vec<usize>,
}

fn mean_std(feats: &[LogMelSpectrogram]) -> (f64, f64) {
    let (mut n, mut s, mut ss) = (0.0f64, 0.0f64, 0.0f64);
    for f in feats {
        for &v in f.data() {
            n += 1.0;
            s += v as f64;
            ss += (v as f64) * (v as f64);
        }
    }
    if n == 0.0 {
        return (0.0, 1.0);
    }
    let mean = s / n;
    let var = (ss / n - mean * mean).max(0.0);
    let std = libm::sqrt(var);
    (mean, if std > 1e-8 { std } else { 1.0 })
}

impl Trainer {
    /// Prepares features, augmented sets and the untrained model, and scores
    /// the untrained model on validation (epoch 0). The model's `init_seed`
    /// is replaced by the training seed.
    pub fn new(
        train: &Dataset,
        val: &Dataset,
        unlabeled: Option<&Dataset>,
        extractor: &LogMelExtractor,
        model_config: &ModelConfig,
        config: &TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if train.corpus.n_labeled() == 0 {
            return Err(Error::Protocol("training split has no labeled utterances".into()));
        }
        let val_idx: Vec<usize> = (0..val.len()).filter(|&i| val.corpus.utterances()[i].emotion.is_some()).collect();
        if val_idx.is_empty() {
            return Err(Error::Protocol("validation split has no labeled utterances".into()));
        }
        let mut mc = model_config.clone();
        mc.init_seed = rng::derive_seed(config.seed, &[tag::INIT]);
        let mut model: Model<f32> = Model::new(&mc)?;
        let train_feats = extract_all(train, extractor)?;
        let (mean, std) = mean_std(&train_feats);
        model.input_mean = mean;
        model.input_std = std;
        let val_sub = val.select(&val_idx);
        let val_feats = extract_all(&val_sub, extractor)?;
        let val_labels = val_sub
            .corpus
            .utterances()
            .iter()
            .map(|u| u.emotion.expect("labeled").index())
            .collect();
        let adam = AdamState::new(&model.store, config.lr);
        let best = Snapshot {
            params: model.store.clone(),
            centers: model.centers.clone(),
            adam: adam.clone(),
        };
        let mut t = Self {
            config: config.clone(),
            adam,
            schedule: ScheduleState::new(config.lr),
            best,
            rng: rng::stream(config.seed, &[tag::SHUFFLE]),
            epoch: 0,
            done: false,
            history: History::default(),
            train_data: train.clone(),
            train_feats,
            unlabeled_data: unlabeled.cloned(),
            extractor: extractor.clone(),
            labeled: Vec::new(),
            unlabeled: Vec::new(),
            unlabeled_order: Vec::new(),
            unlabeled_cursor: 0,
            val_feats,
            val_labels,
            model,
        };
        t.build_sets(0)?;
        let (uar, acc) = t.validate()?;
        let score = t.score(uar, acc);
        let event = t.schedule.observe(0, score, config.patience, config.lr_decay, config.min_lr);
        t.history.rows.push(HistoryRow {
            epoch: 0,
            lr: config.lr,
            l_mt: f64::NAN,
            l_pri: f64::NAN,
            l_s: f64::NAN,
            l_c: f64::NAN,
            l_augtype: f64::NAN,
            l_recon: f64::NAN,
            val_uar: uar,
            val_accuracy: acc,
            u_l_mt: f64::NAN,
            u_l_augtype: f64::NAN,
            u_l_recon: f64::NAN,
            labeled_batches: 0,
            unlabeled_batches: 0,
            event,
        });
        Ok(t)
    }

    fn uses_unlabeled(&self) -> bool {
        self.model.config.lambda1 > 0.0 && self.model.config.has_aux()
    }

    /// (Re)builds the augmented sets; `round` is 0 for the fixed sets.
    fn build_sets(&mut self, round: u64) -> Result<()> {
        let seed = rng::derive_seed(self.config.seed, &[tag::AUGMENT, round]);
        let all = build_augmented_set(&self.train_data, &self.extractor, &self.config.policy, seed, Some(&self.train_feats))?;
        let (labeled, mut unlabeled): (Vec<_>, Vec<_>) = all.into_iter().partition(|s| s.emotion.is_some());
        if let Some(u) = &self.unlabeled_data {
            let useed = rng::derive_seed(self.config.seed, &[tag::AUGMENT, round, 1]);
            let mut extra = build_augmented_set(&u.unlabeled(), &self.extractor, &self.config.policy, useed, None)?;
            unlabeled.append(&mut extra);
        }
        if !self.uses_unlabeled() {
            unlabeled.clear();
        }
        self.labeled = labeled;
        if self.unlabeled.len() != unlabeled.len() {
            self.unlabeled_order = (0..unlabeled.len()).collect();
            self.unlabeled_cursor = unlabeled.len();
        }
        self.unlabeled = unlabeled;
        Ok(())
    }

    fn score(&self, uar: f64, acc: f64) -> f64 {
        match self.config.selection {
            Selection::Uar => uar,
            Selection::Accuracy => acc,
        }
    }

    fn validate(&self) -> Result<(f64, f64)> {
        let cm = evaluate(&self.model, &self.val_feats, &self.val_labels, self.config.eval_batch)?;
        Ok((cm.uar()?, cm.accuracy()))
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            params: self.model.store.clone(),
            centers: self.model.centers.clone(),
            adam: self.adam.clone(),
        }
    }

    fn restore_best(&mut self) {
        self.model.store.load_values(&self.best.params);
        self.model.centers = self.best.centers.clone();
        self.adam = self.best.adam.clone();
        self.adam.lr = self.schedule.lr;
    }

    fn next_unlabeled_batch(&mut self) -> Vec<usize> {
        let n = self.unlabeled.len();
        let mut out = Vec::with_capacity(self.config.batch_size);
        while out.len() < self.config.batch_size.min(n) {
            if self.unlabeled_cursor >= n {
                self.unlabeled_order.shuffle(&mut self.rng);
                self.unlabeled_cursor = 0;
            }
            out.push(self.unlabeled_order[self.unlabeled_cursor]);
            self.unlabeled_cursor += 1;
        }
        out
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    /// One pass over the labeled set with interleaved unlabeled batches,
    /// followed by validation and the schedule update. Returns whether
    /// training continues.
    pub fn run_epoch(&mut self) -> Result<bool> {
        if self.done {
            return Ok(false);
        }
        self.epoch += 1;
        if self.config.regenerate_augmentations && self.epoch > 1 {
            self.build_sets(self.epoch as u64)?;
        }
        self.adam.lr = self.schedule.lr;
        let lr = self.schedule.lr;
        let mut order: Vec<usize> = (0..self.labeled.len()).collect();
        order.shuffle(&mut self.rng);
        let mut lab = Vec::new();
        let mut unl = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&AugmentedSample> = chunk.iter().map(|&i| &self.labeled[i]).collect();
            let b = train_step(&mut self.model, &mut self.adam, &batch, Mode::Labeled, &mut self.rng)?;
            lab.push(b);
            self.history.steps.push((Mode::Labeled, b));
            if !self.unlabeled.is_empty() {
                for _ in 0..self.config.unlabeled_per_labeled {
                    let idx = self.next_unlabeled_batch();
                    let unl_set = core::mem::take(&mut self.unlabeled);
                    let batch: Vec<&AugmentedSample> = idx.iter().map(|&i| &unl_set[i]).collect();
                    let r = train_step(&mut self.model, &mut self.adam, &batch, Mode::Unlabeled, &mut self.rng);
                    self.unlabeled = unl_set;
                    let b = r?;
                    unl.push(b);
                    self.history.steps.push((Mode::Unlabeled, b));
                }
            }
        }
        let mean = |v: &[MtlLossBreakdown], f: fn(&MtlLossBreakdown) -> f64| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().map(f).sum::<f64>() / v.len() as f64
            }
        };
        let (uar, acc) = self.validate()?;
        let score = self.score(uar, acc);
        let c = &self.config;
        let event = self.schedule.observe(self.epoch, score, c.patience, c.lr_decay, c.min_lr);
        match event {
            Event::Improved => self.best = self.snapshot(),
            Event::Plateau => {}
            Event::Halved => self.restore_best(),
            Event::Halted => {
                self.restore_best();
                self.done = true;
            }
        }
        if self.epoch >= self.config.max_epochs && !self.done {
            self.restore_best();
            self.done = true;
        }
        self.history.rows.push(HistoryRow {
            epoch: self.epoch,
            lr,
            l_mt: mean(&lab, |b| b.l_mt),
            l_pri: mean(&lab, |b| b.l_pri),
            l_s: mean(&lab, |b| b.l_s),
            l_c: mean(&lab, |b| b.l_c),
            l_augtype: mean(&lab, |b| b.l_augtype),
            l_recon: mean(&lab, |b| b.l_recon),
            val_uar: uar,
            val_accuracy: acc,
            u_l_mt: mean(&unl, |b| b.l_mt),
            u_l_augtype: mean(&unl, |b| b.l_augtype),
            u_l_recon: mean(&unl, |b| b.l_recon),
            labeled_batches: lab.len(),
            unlabeled_batches: unl.len(),
            event,
        });
        Ok(!self.done)
    }

    /// Runs to completion and returns the best-validation model.
    pub fn fit(mut self) -> Result<(Model<f32>, History)> {
        while self.run_epoch()? {}
        Ok((self.model, self.history))
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            params: self.model.store.clone(),
            centers: self.model.centers.clone(),
            input_mean: self.model.input_mean,
            input_std: self.model.input_std,
            adam: self.adam.clone(),
            schedule: self.schedule.clone(),
            best: self.best.clone(),
            rng: self.rng.clone(),
            epoch: self.epoch,
            unlabeled_cursor: self.unlabeled_cursor,
            unlabeled_order: self.unlabeled_order.clone(),
            history: self.history.clone(),
            done: self.done,
        }
    }

    /// Rebuilds a trainer over the same data and configuration, then loads
    /// `state` so the next epoch continues the interrupted run exactly.
    pub fn resume(
        train: &Dataset,
        val: &Dataset,
        unlabeled: Option<&Dataset>,
        extractor: &LogMelExtractor,
        model_config: &ModelConfig,
        config: &TrainConfig,
        state: TrainerState,
    ) -> Result<Self> {
        let mut t = Self::new(train, val, unlabeled, extractor, model_config, config)?;
        if state.params.len() != t.model.store.len() {
            return Err(Error::Config("checkpoint does not match the model layout".into()));
        }
        t.model.store.load_values(&state.params);
        t.model.centers = state.centers;
        t.model.input_mean = state.input_mean;
        t.model.input_std = state.input_std;
        t.adam = state.adam;
        t.schedule = state.schedule;
        t.best = state.best;
        t.rng = state.rng;
        t.epoch = state.epoch;
        t.history = state.history;
        t.done = state.done;
        if config.regenerate_augmentations && t.epoch > 1 {
            t.build_sets(t.epoch as u64)?;
        }
        t.unlabeled_cursor = state.unlabeled_cursor;
        t.unlabeled_order = state.unlabeled_order;
        Ok(t)
    }
}

/// Trains on `train`, selects on `val`, optionally adds an unlabeled pool.
pub fn fit(
    train: &Dataset,
    val: &Dataset,
    unlabeled: Option<&Dataset>,
    extractor: &LogMelExtractor,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<(Model<f32>, History)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Protocol("training and validation splits must be non-empty".into()));
    }
    Trainer::new(train, val, unlabeled, extractor, model_config, config)?.fit()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugmentationType;
    use crate::corpus::Emotion;
    use crate::model::ConvSpec;
    use alloc::vec::Vec;
    use rand::Rng as _;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_mels: 8,
            n_frames: 12,
            encoder: vec![ConvSpec { channels: 2, kernel: [3, 3], stride: [2, 2] }],
            ce_units: 3,
            ce_dense: 4,
            ca_units: 3,
            ca_dense: 4,
            ..ModelConfig::default()
        }
    }

    fn sample(seed: u64, label: Option<Emotion>, aug: AugmentationType) -> AugmentedSample {
        let mut r = rng::stream(seed, &[]);
        AugmentedSample {
            features: LogMelSpectrogram::new(8, 12, (0..96).map(|_| r.gen_range(-2.0f32..2.0)).collect()).unwrap(),
            emotion: label.map(Emotion::one_hot),
            aug_type: aug,
            source_ids: vec![format!("{}", seed)],
        }
    }

    fn labeled_batch(seed: u64) -> Vec<AugmentedSample> {
        (0..6)
            .map(|i| sample(seed * 10 + i, Emotion::from_index(i as usize % 4), AugmentationType::from_index(i as usize % 3).unwrap()))
            .collect()
    }

    #[test]
    fn schedule_constant_trace() {
        let mut s = ScheduleState::new(1e-4);
        assert_eq!(s.observe(0, 0.5, 5, 0.5, 1e-5), Event::Improved);
        let mut halved = Vec::new();
        for e in 1..=40 {
            match s.observe(e, 0.5, 5, 0.5, 1e-5) {
                Event::Halved => halved.push(e),
                Event::Halted => {
                    halved.push(e);
                    break;
                }
                _ => {}
            }
        }
        assert_eq!(halved, vec![5, 10, 15, 20]);
        assert!(s.halt);
        assert_eq!(s.lr, 6.25e-6);
    }

    #[test]
    fn mixed_batch_is_usage_error() {
        let m: Model<f32> = Model::new(&tiny_config()).unwrap();
        let a = sample(1, Some(Emotion::Sad), AugmentationType::None);
        let b = sample(2, None, AugmentationType::None);
        let mut tape = Tape::new();
        let r = mtl_loss(&m, &mut tape, &[&a, &b], Mode::Labeled, true, &mut rng::stream(0, &[]));
        assert!(matches!(r, Err(Error::Usage(_))));
        let mut tape = Tape::new();
        let r = mtl_loss(&m, &mut tape, &[&a, &b], Mode::Unlabeled, true, &mut rng::stream(0, &[]));
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn lambda1_zero_gives_primary_only() {
        let cfg = ModelConfig { lambda1: 0.0, ..tiny_config() };
        let m: Model<f32> = Model::new(&cfg).unwrap();
        let batch = labeled_batch(3);
        let refs: Vec<&AugmentedSample> = batch.iter().collect();
        let mut tape = Tape::new();
        let g = mtl_loss(&m, &mut tape, &refs, Mode::Labeled, false, &mut rng::stream(0, &[])).unwrap();
        assert_eq!(g.breakdown.l_mt, g.breakdown.l_pri);
        assert!(g.breakdown.l_aux > 0.0);
    }

    #[test]
    fn unlabeled_step_leaves_emotion_head() {
        let mut m: Model<f32> = Model::new(&tiny_config()).unwrap();
        let mut adam = AdamState::new(&m.store, 1e-2);
        let batch: Vec<AugmentedSample> = (0..5).map(|i| sample(i, None, AugmentationType::from_index(i as usize % 3).unwrap())).collect();
        let refs: Vec<&AugmentedSample> = batch.iter().collect();
        let before = m.emotion_checksum();
        let enc = m.store.checksum(Some(Group::Encoder));
        let b = train_step(&mut m, &mut adam, &refs, Mode::Unlabeled, &mut rng::stream(0, &[])).unwrap();
        assert_eq!((b.l_s, b.l_c, b.l_pri), (0.0, 0.0, 0.0));
        assert!((b.l_mt - b.lambda1 * b.l_aux).abs() < 1e-5);
        assert_eq!(m.emotion_checksum(), before);
        assert_ne!(m.store.checksum(Some(Group::Encoder)), enc);
    }

    #[test]
    fn zero_lambdas_touch_only_encoder_and_emotion() {
        let cfg = ModelConfig { lambda1: 0.0, lambda2: 0.0, ..tiny_config() };
        let mut m: Model<f32> = Model::new(&cfg).unwrap();
        let mut adam = AdamState::new(&m.store, 1e-2);
        let batch = labeled_batch(4);
        let refs: Vec<&AugmentedSample> = batch.iter().collect();
        let sums = |m: &Model<f32>| [Group::Encoder, Group::Decoder, Group::Emotion, Group::AugType].map(|g| m.store.checksum(Some(g)));
        let before = sums(&m);
        train_step(&mut m, &mut adam, &refs, Mode::Labeled, &mut rng::stream(0, &[])).unwrap();
        let after = sums(&m);
        assert_ne!(before[0], after[0]);
        assert_eq!(before[1], after[1]);
        assert_ne!(before[2], after[2]);
        assert_eq!(before[3], after[3]);
    }

    #[test]
    fn repeated_batch_loss_decreases() {
        let mut m: Model<f32> = Model::new(&tiny_config()).unwrap();
        let mut adam = AdamState::new(&m.store, 3e-3);
        let batch = labeled_batch(5);
        let refs: Vec<&AugmentedSample> = batch.iter().collect();
        let mut r = rng::stream(1, &[]);
        let first = train_step(&mut m, &mut adam, &refs, Mode::Labeled, &mut r).unwrap().l_mt;
        let mut last = first;
        for _ in 0..50 {
            last = train_step(&mut m, &mut adam, &refs, Mode::Labeled, &mut r).unwrap().l_mt;
        }
        assert!(last < first, "{} -> {}", first, last);
    }

    #[test]
    fn centers_converge_to_class_means() {
        let mut c = Tensor::new(vec![2, 1], vec![5.0f32, -5.0]).unwrap();
        let f = [1.0f32, 2.0, 3.0, 10.0, 20.0];
        let labels = [Some(0), Some(0), Some(0), Some(1), Some(1)];
        for _ in 0..60 {
            update_centers(&mut c, &f, &labels, 1.0);
        }
        assert!((c.data()[0] - 2.0).abs() < 1e-5);
        assert!((c.data()[1] - 15.0).abs() < 1e-5);
        let mut fixed = Tensor::new(vec![1, 2], vec![1.0f32, 2.0]).unwrap();
        update_centers(&mut fixed, &[1.0, 2.0], &[Some(0)], 0.5);
        assert_eq!(fixed.data(), &[1.0, 2.0]);
    }
}
