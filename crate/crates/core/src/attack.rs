//! White-box FGSM and BIM attacks on the emotion classifier's log-Mel input.

use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::corpus::{Emotion, N_CLASSES};
use crate::dsp::LogMelSpectrogram;
use crate::error::{validation, Result};
use crate::model::{Heads, Model};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Bim,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Bim => "bim",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackParams {
    pub kind: AttackKind,
    pub eps: f64,
    pub bim_steps: usize,
    /// Defaults to `eps / bim_steps`.
    #[serde(default)]
    pub bim_step_size: Option<f64>,
}

impl AttackParams {
    pub fn fgsm(eps: f64) -> Self {
        Self {
            kind: AttackKind::Fgsm,
            eps,
            bim_steps: 10,
            bim_step_size: None,
        }
    }

    pub fn bim(eps: f64) -> Self {
        Self {
            kind: AttackKind::Bim,
            ..Self::fgsm(eps)
        }
    }

    pub fn step_size(&self) -> f64 {
        self.bim_step_size.unwrap_or(self.eps / self.bim_steps.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        check_eps(self.eps)?;
        if self.kind == AttackKind::Bim {
            if self.bim_steps == 0 {
                return Err(validation("bim needs at least one step"));
            }
            let s = self.step_size();
            if !(s.is_finite() && (s > 0.0 || self.eps == 0.0)) {
                return Err(validation(format!("bim step size {} must be positive", s)));
            }
        }
        Ok(())
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(validation(format!("attack budget {} must be finite and non-negative", eps)));
    }
    Ok(())
}

/// Gradient of the emotion cross-entropy with respect to the raw input
/// batch, dropout off. Row `i` belongs to `x[i]`.
pub fn input_gradient(model: &Model<f32>, x: &[&LogMelSpectrogram], labels: &[Emotion]) -> Result<Vec<f32>> {
    if x.len() != labels.len() {
        return Err(validation(format!("{} inputs but {} labels", x.len(), labels.len())));
    }
    let mut tape = Tape::new();
    let input = tape.input(model.batch(x)?);
    let out = model.forward(&mut tape, input, Heads::EMOTION, false, &mut rng::stream(0, &[]))?;
    let targets: Vec<f32> = labels.iter().flat_map(|e| e.one_hot()).collect();
    debug_assert_eq!(targets.len(), x.len() * N_CLASSES);
    let loss = tape.softmax_cross_entropy(out.logits.expect("emotion head"), &targets)?;
    let grads = tape.backward(loss)?;
    Ok(match grads.get(input) {
        Some(g) => g.to_vec(),
        None => alloc::vec![0.0; tape.value(input).len()],
    })
}

fn sign(g: f32) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One ulp from `v` toward `target`.
fn step_toward(v: f32, target: f32) -> f32 {
    if v == target {
        return v;
    }
    let bits = v.to_bits();
    let up = (target > v) == (v >= 0.0);
    if v == 0.0 {
        if target > 0.0 {
            f32::from_bits(1)
        } else {
            -f32::from_bits(1)
        }
    } else if up {
        f32::from_bits(bits + 1)
    } else {
        f32::from_bits(bits - 1)
    }
}

/// Rounds `v` into the closed ball `|r - x0| <= eps` measured in f64.
fn project(x0: f32, v: f64, eps: f64) -> f32 {
    let x = x0 as f64;
    let mut r = v.clamp(x - eps, x + eps) as f32;
    while (r as f64 - x).abs() > eps {
        r = step_toward(r, x0);
    }
    r
}

fn perturb(x0: &LogMelSpectrogram, cur: &LogMelSpectrogram, grad: &[f32], step: f64, eps: f64) -> Result<LogMelSpectrogram> {
    let data = x0
        .data()
        .iter()
        .zip(cur.data())
        .zip(grad)
        .map(|((&a, &c), &g)| project(a, c as f64 + step * sign(g), eps))
        .collect();
    LogMelSpectrogram::new(x0.n_mels(), x0.n_frames(), data)
}

fn per_item(grad: &[f32], i: usize, len: usize) -> &[f32] {
    &grad[i * len..(i + 1) * len]
}

/// `x + eps * sign(grad)`, per utterance; inputs and model are untouched.
pub fn fgsm(model: &Model<f32>, x: &[&LogMelSpectrogram], labels: &[Emotion], eps: f64) -> Result<Vec<LogMelSpectrogram>> {
    check_eps(eps)?;
    if eps == 0.0 {
        return Ok(x.iter().map(|s| (*s).clone()).collect());
    }
    let g = input_gradient(model, x, labels)?;
    let len = model.config.n_mels * model.config.n_frames;
    x.iter()
        .enumerate()
        .map(|(i, s)| perturb(s, s, per_item(&g, i, len), eps, eps))
        .collect()
}

/// Iterated signed-gradient steps, each projected back onto the `eps` ball
/// around the clean input.
pub fn bim(
    model: &Model<f32>,
    x: &[&LogMelSpectrogram],
    labels: &[Emotion],
    eps: f64,
    steps: usize,
    step_size: f64,
) -> Result<Vec<LogMelSpectrogram>> {
    AttackParams {
        kind: AttackKind::Bim,
        eps,
        bim_steps: steps,
        bim_step_size: Some(step_size),
    }
    .validate()?;
    let mut cur: Vec<LogMelSpectrogram> = x.iter().map(|s| (*s).clone()).collect();
    if eps == 0.0 {
        return Ok(cur);
    }
    let len = model.config.n_mels * model.config.n_frames;
    for _ in 0..steps {
        let refs: Vec<&LogMelSpectrogram> = cur.iter().collect();
        let g = input_gradient(model, &refs, labels)?;
        cur = x
            .iter()
            .zip(&cur)
            .enumerate()
            .map(|(i, (x0, c))| perturb(x0, c, per_item(&g, i, len), step_size, eps))
            .collect::<Result<_>>()?;
    }
    Ok(cur)
}

/// Runs `params` over `x` in chunks of `batch` utterances.
pub fn attack(
    model: &Model<f32>,
    x: &[&LogMelSpectrogram],
    labels: &[Emotion],
    params: &AttackParams,
    batch: usize,
) -> Result<Vec<LogMelSpectrogram>> {
    params.validate()?;
    if x.len() != labels.len() {
        return Err(validation(format!("{} inputs but {} labels", x.len(), labels.len())));
    }
    let mut out = Vec::with_capacity(x.len());
    let b = batch.max(1);
    for (xs, ys) in x.chunks(b).zip(labels.chunks(b)) {
        out.extend(match params.kind {
            AttackKind::Fgsm => fgsm(model, xs, ys, params.eps)?,
            AttackKind::Bim => bim(model, xs, ys, params.eps, params.bim_steps, params.step_size())?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConvSpec, ModelConfig};
    use alloc::vec;
    use rand::Rng as _;

    fn setup() -> (Model<f32>, Vec<LogMelSpectrogram>, Vec<Emotion>) {
        let cfg = ModelConfig {
            n_mels: 6,
            n_frames: 10,
            encoder: vec![ConvSpec { channels: 2, kernel: [3, 3], stride: [2, 2] }],
            ce_units: 3,
            ce_dense: 4,
            ca_units: 3,
            ca_dense: 4,
            ..ModelConfig::default()
        };
        let m = Model::new(&cfg).unwrap();
        let mut r = rng::stream(5, &[]);
        let x = (0..3)
            .map(|_| LogMelSpectrogram::new(6, 10, (0..60).map(|_| r.gen_range(-3.0f32..3.0)).collect()).unwrap())
            .collect();
        (m, x, vec![Emotion::Angry, Emotion::Sad, Emotion::Happy])
    }

    #[test]
    fn projection_never_exceeds_budget() {
        for (x0, v, eps) in [(0.1f32, 0.18f64, 0.08f64), (-7.3, -7.38, 0.08), (1e-3, 0.5, 0.08), (3.0, 3.0 + 1e-9, 1e-9)] {
            let r = project(x0, v, eps);
            assert!((r as f64 - x0 as f64).abs() <= eps);
            assert!((r as f64 - v.clamp(x0 as f64 - eps, x0 as f64 + eps)).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_budget_is_identity() {
        let (m, x, y) = setup();
        let refs: Vec<&LogMelSpectrogram> = x.iter().collect();
        assert_eq!(fgsm(&m, &refs, &y, 0.0).unwrap(), x);
        assert_eq!(bim(&m, &refs, &y, 0.0, 10, 0.0).unwrap(), x);
    }

    #[test]
    fn single_step_bim_is_fgsm() {
        let (m, x, y) = setup();
        let refs: Vec<&LogMelSpectrogram> = x.iter().collect();
        assert_eq!(fgsm(&m, &refs, &y, 0.08).unwrap(), bim(&m, &refs, &y, 0.08, 1, 0.08).unwrap());
    }

    #[test]
    fn budget_holds_and_model_untouched() {
        let (m, x, y) = setup();
        let sum = m.store.checksum(None);
        let refs: Vec<&LogMelSpectrogram> = x.iter().collect();
        let adv = bim(&m, &refs, &y, 0.08, 10, 0.03).unwrap();
        for (a, c) in adv.iter().zip(&x) {
            for (&p, &q) in a.data().iter().zip(c.data()) {
                assert!((p as f64 - q as f64).abs() <= 0.08);
            }
        }
        assert_eq!(m.store.checksum(None), sum);
        let f = fgsm(&m, &refs, &y, 0.08).unwrap();
        let g = input_gradient(&m, &refs, &y).unwrap();
        for (i, (a, c)) in f.iter().zip(&x).enumerate() {
            for (k, (&p, &q)) in a.data().iter().zip(c.data()).enumerate() {
                let d = (p as f64 - q as f64).abs();
                if g[i * 60 + k] != 0.0 {
                    assert!((d - 0.08).abs() < 1e-6);
                } else {
                    assert_eq!(d, 0.0);
                }
            }
        }
    }

    #[test]
    fn negative_budget_rejected() {
        let (m, x, y) = setup();
        let refs: Vec<&LogMelSpectrogram> = x.iter().collect();
        assert!(fgsm(&m, &refs, &y, -0.1).is_err());
        assert!(AttackParams { bim_steps: 0, ..AttackParams::bim(0.08) }.validate().is_err());
    }
}
