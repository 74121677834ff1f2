use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::param::{Group, ParamStore};
use super::Real;
use crate::error::{Error, Result};

/// Bias-corrected Adam with per-parameter step counts, so parameters that
/// sit out some steps (the emotion head during unlabeled batches) keep a
/// correct bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    counts: Vec<u64>,
}

impl AdamState {
    pub fn new<T: Real>(store: &ParamStore<T>, lr: f64) -> Self {
        let sizes: Vec<usize> = store.iter().map(|(_, p)| p.value.len()).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            counts: vec![0; sizes.len()],
        }
    }

    /// Per-parameter first moments, second moments and step counts.
    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>], &[u64]) {
        (&self.first, &self.second, &self.counts)
    }

    pub fn set_moments(&mut self, first: Vec<Vec<f32>>, second: Vec<Vec<f32>>, counts: Vec<u64>) -> Result<()> {
        let same = |a: &[Vec<f32>], b: &[Vec<f32>]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len());
        if !same(&first, &self.first) || !same(&second, &self.second) || counts.len() != self.counts.len() {
            return Err(Error::Validation("adam moments do not match the parameter layout".into()));
        }
        self.first = first;
        self.second = second;
        self.counts = counts;
        Ok(())
    }

    /// Updates every parameter that received a gradient and belongs to an
    /// allowed group. Errors when nothing has a gradient.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, allowed: &[Group]) -> Result<usize> {
        if self.lr < 0.0 {
            return Err(Error::Usage("learning rate must be non-negative".into()));
        }
        let ids: Vec<_> = store
            .iter()
            .filter(|(_, p)| p.touched() && allowed.contains(&p.group))
            .map(|(id, _)| id)
            .collect();
        if ids.is_empty() {
            return Err(Error::Usage("adam step without any populated gradient".into()));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        for id in &ids {
            let i = id.0;
            self.counts[i] += 1;
            let t = self.counts[i] as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let p = store.get_mut(*id);
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for ((w, &g), (mi, vi)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = g.f64();
                let mn = b1 * (*mi as f64) + (1.0 - b1) * g;
                let vn = b2 * (*vi as f64) + (1.0 - b2) * g * g;
                *mi = mn as f32;
                *vi = vn as f32;
                let update = self.lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *w -= T::of(update);
            }
        }
        Ok(ids.len())
    }
}
