use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::tape::{Grads, Tape};
use super::{Real, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Which subnetwork a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    Encoder,
    Decoder,
    Emotion,
    AugType,
}

/// Equality compares name, group and value; gradient buffers are scratch.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct Param<T> {
    pub name: String,
    pub group: Group,
    pub value: Tensor<T>,
    #[serde(skip)]
    pub grad: Vec<T>,
    #[serde(skip)]
    touched: bool,
}

impl<T: PartialEq> PartialEq for Param<T> {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.group == other.group && self.value == other.value
    }
}

impl<T: Real> Param<T> {
    /// Whether a gradient has been accumulated since the last `zero_grad`.
    pub fn touched(&self) -> bool {
        self.touched
    }
}

/// Named collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor<T>) -> ParamId {
        let n = value.len();
        self.params.push(Param {
            name: name.into(),
            group,
            value,
            grad: vec![T::zero(); n],
            touched: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn numel_in(&self, group: Group) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    /// Adds (`+=`) the tape's parameter gradients into the store. Calling it
    /// twice without [`ParamStore::zero_grad`] doubles the gradients.
    pub fn accumulate(&mut self, tape: &Tape<T>, grads: &Grads<T>) {
        for (id, var) in tape.param_nodes() {
            if let Some(g) = grads.get(var) {
                let p = &mut self.params[id.0];
                if p.grad.len() != g.len() {
                    p.grad = vec![T::zero(); g.len()];
                }
                p.grad.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                p.touched = true;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
            p.touched = false;
        }
    }

    /// Copies parameter values (not gradients) into another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                    grad: vec![U::zero(); p.value.len()],
                    touched: false,
                })
                .collect(),
        }
    }

    /// Restores values from a snapshot with identical layout.
    pub fn load_values(&mut self, other: &ParamStore<T>) {
        for (p, q) in self.params.iter_mut().zip(&other.params) {
            p.value = q.value.clone();
        }
    }

    /// Order-sensitive FNV-1a digest over the raw bits of the values in
    /// `group` (all groups when `None`).
    pub fn checksum(&self, group: Option<Group>) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params.iter().filter(|p| group.is_none_or(|g| g == p.group)) {
            for v in p.value.data() {
                for byte in v.f64().to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Rebuilds gradient buffers after deserialization.
    pub fn reset_buffers(&mut self) {
        for p in &mut self.params {
            p.grad = vec![T::zero(); p.value.len()];
            p.touched = false;
        }
    }
}
