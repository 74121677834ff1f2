//! Parameterised building blocks composed from tape primitives.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::conv::Geom;
use super::param::{Group, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::{Real, Tensor};
use crate::error::{shape, Result};

fn glorot<T: Real, R: rand::RngCore>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-limit..limit)))
}

/// `rows x cols` matrix with orthonormal rows or columns (whichever is fewer),
/// via modified Gram-Schmidt on a Gaussian draw.
fn orthogonal<R: rand::RngCore>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    let (k, len) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut vecs: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..len).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    for i in 0..k {
        for j in 0..i {
            let dot: f64 = vecs[i].iter().zip(&vecs[j]).map(|(a, b)| a * b).sum();
            let (head, tail) = vecs.split_at_mut(i);
            tail[0].iter_mut().zip(&head[j]).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = vecs[i].iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        vecs[i].iter_mut().for_each(|a| *a /= norm);
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = if rows <= cols { vecs[r][c] } else { vecs[c][r] };
        }
    }
    out
}

/// Fully connected layer `y = x W + b` over the last axis of a 2-D input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new<T: Real, R: rand::RngCore>(
        store: &mut ParamStore<T>,
        name: &str,
        group: Group,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{}.weight", name), group, glorot(vec![inputs, outputs], inputs, outputs, rng));
        let bias = store.add(format!("{}.bias", name), group, Tensor::zeros(vec![outputs]));
        Self { weight, bias, inputs, outputs }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

/// 2-D convolution with bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: Geom,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: rand::RngCore>(
        store: &mut ParamStore<T>,
        name: &str,
        group: Group,
        in_ch: usize,
        out_ch: usize,
        geom: Geom,
        rng: &mut R,
    ) -> Self {
        let k = geom.kh * geom.kw;
        let weight = store.add(
            format!("{}.weight", name),
            group,
            glorot(vec![out_ch, in_ch, geom.kh, geom.kw], in_ch * k, out_ch * k, rng),
        );
        let bias = store.add(format!("{}.bias", name), group, Tensor::zeros(vec![out_ch]));
        Self { weight, bias, geom }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, Some(b), self.geom)
    }
}

/// Transposed 2-D convolution with bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: Geom,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: rand::RngCore>(
        store: &mut ParamStore<T>,
        name: &str,
        group: Group,
        in_ch: usize,
        out_ch: usize,
        geom: Geom,
        rng: &mut R,
    ) -> Self {
        let k = geom.kh * geom.kw;
        let weight = store.add(
            format!("{}.weight", name),
            group,
            glorot(vec![in_ch, out_ch, geom.kh, geom.kw], in_ch * k, out_ch * k, rng),
        );
        let bias = store.add(format!("{}.bias", name), group, Tensor::zeros(vec![out_ch]));
        Self { weight, bias, geom }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        out_pad: (usize, usize),
    ) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv_transpose2d(x, w, Some(b), self.geom, out_pad)
    }
}

/// One direction of an LSTM. Gate order in the packed matrices is
/// input, forget, cell, output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub units: usize,
}

impl LstmCell {
    pub fn new<T: Real, R: rand::RngCore>(
        store: &mut ParamStore<T>,
        name: &str,
        group: Group,
        inputs: usize,
        units: usize,
        rng: &mut R,
    ) -> Self {
        let w_input = store.add(
            format!("{}.w_input", name),
            group,
            glorot(vec![inputs, 4 * units], inputs, 4 * units, rng),
        );
        let mut hidden = vec![0.0; units * 4 * units];
        for gate in 0..4 {
            let block = orthogonal(units, units, rng);
            for r in 0..units {
                for c in 0..units {
                    hidden[r * 4 * units + gate * units + c] = block[r * units + c];
                }
            }
        }
        let w_hidden = store.add(
            format!("{}.w_hidden", name),
            group,
            Tensor::from_fn(vec![units, 4 * units], |i| T::of(hidden[i])),
        );
        let bias = store.add(
            format!("{}.bias", name),
            group,
            Tensor::from_fn(vec![4 * units], |i| if (units..2 * units).contains(&i) { T::one() } else { T::zero() }),
        );
        Self { w_input, w_hidden, bias, units }
    }

    /// Runs over a time-major sequence `[t, n, d]`; returns per-step hidden
    /// states in processing order.
    fn run<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, seq: Var, reverse: bool) -> Result<Vec<Var>> {
        let s = tape.shape(seq).to_vec();
        let (steps, n, d) = (s[0], s[1], s[2]);
        let u = self.units;
        let wi = tape.param(store, self.w_input);
        let wh = tape.param(store, self.w_hidden);
        let b = tape.param(store, self.bias);
        let flat = tape.reshape(seq, vec![steps * n, d])?;
        let projected = tape.matmul(flat, wi)?;
        let projected = tape.add_bias(projected, b)?;
        let mut h: Option<Var> = None;
        let mut c: Option<Var> = None;
        let mut outs = Vec::with_capacity(steps);
        for k in 0..steps {
            let t = if reverse { steps - 1 - k } else { k };
            let mut gates = tape.slice(projected, 0, t * n, (t + 1) * n)?;
            if let Some(hp) = h {
                let rec = tape.matmul(hp, wh)?;
                gates = tape.add(gates, rec)?;
            }
            let sig_in = tape.slice(gates, 1, 0, 2 * u)?;
            let sig_in = tape.sigmoid(sig_in)?;
            let i_g = tape.slice(sig_in, 1, 0, u)?;
            let f_g = tape.slice(sig_in, 1, u, 2 * u)?;
            let g_g = tape.slice(gates, 1, 2 * u, 3 * u)?;
            let g_g = tape.tanh(g_g)?;
            let o_g = tape.slice(gates, 1, 3 * u, 4 * u)?;
            let o_g = tape.sigmoid(o_g)?;
            let ig = tape.mul(i_g, g_g)?;
            let c_new = match c {
                Some(cp) => {
                    let fc = tape.mul(f_g, cp)?;
                    tape.add(fc, ig)?
                }
                None => ig,
            };
            let ct = tape.tanh(c_new)?;
            let h_new = tape.mul(o_g, ct)?;
            outs.push(h_new);
            h = Some(h_new);
            c = Some(c_new);
        }
        Ok(outs)
    }
}

/// Bidirectional LSTM over a time-major sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

/// Outputs of [`BiLstm::forward`].
pub struct BiLstmOut {
    /// `[t, n, 2 * units]`, forward states then backward states per step.
    pub sequence: Var,
    /// `[n, 2 * units]`: last forward state and last backward state (t = 0).
    pub final_state: Var,
}

impl BiLstm {
    pub fn new<T: Real, R: rand::RngCore>(
        store: &mut ParamStore<T>,
        name: &str,
        group: Group,
        inputs: usize,
        units: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            forward: LstmCell::new(store, &format!("{}.fwd", name), group, inputs, units, rng),
            backward: LstmCell::new(store, &format!("{}.bwd", name), group, inputs, units, rng),
        }
    }

    pub fn units(&self) -> usize {
        self.forward.units
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, seq: Var) -> Result<BiLstmOut> {
        let s = tape.shape(seq).to_vec();
        if s.len() != 3 || s[0] == 0 {
            return Err(shape("bilstm", format!("expected [t>=1, n, d], got {:?}", s)));
        }
        let (steps, n) = (s[0], s[1]);
        let u = self.units();
        let fwd = self.forward.run(tape, store, seq, false)?;
        let mut bwd = self.backward.run(tape, store, seq, true)?;
        let last_f = fwd[steps - 1];
        let last_b = bwd[steps - 1];
        bwd.reverse();
        let fs = tape.concat(&fwd, 0)?;
        let fs = tape.reshape(fs, vec![steps, n, u])?;
        let bs = tape.concat(&bwd, 0)?;
        let bs = tape.reshape(bs, vec![steps, n, u])?;
        let sequence = tape.concat(&[fs, bs], 2)?;
        let final_state = tape.concat(&[last_f, last_b], 1)?;
        Ok(BiLstmOut { sequence, final_state })
    }
}

/// Additive attention pooling: `alpha = softmax_t(h_t . w)`,
/// output `sum_t alpha_t h_t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionPool {
    pub weight: ParamId,
    pub dim: usize,
}

/// Pooled vector plus the attention weights `[n, t]`.
pub struct Attended {
    pub pooled: Var,
    pub weights: Var,
}

impl AttentionPool {
    pub fn new<T: Real, R: rand::RngCore>(store: &mut ParamStore<T>, name: &str, group: Group, dim: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{}.weight", name), group, glorot(vec![dim, 1], dim, 1, rng));
        Self { weight, dim }
    }

    /// `h: [t, n, d]` to `[n, d]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, h: Var) -> Result<Attended> {
        let w = tape.param(store, self.weight);
        attention_pool(tape, h, w)
    }
}

/// Attention pooling with an explicit score vector `w: [d, 1]`.
pub fn attention_pool<T: Real>(tape: &mut Tape<T>, h: Var, w: Var) -> Result<Attended> {
    let s = tape.shape(h).to_vec();
    if s.len() != 3 || s[0] == 0 {
        return Err(shape("attention_pool", format!("expected [t>=1, n, d], got {:?}", s)));
    }
    let (steps, n, d) = (s[0], s[1], s[2]);
    let by_batch = tape.permute(h, &[1, 0, 2])?; // [n, t, d]
    let flat = tape.reshape(by_batch, vec![n * steps, d])?;
    let scores = tape.matmul(flat, w)?;
    let scores = tape.reshape(scores, vec![n, steps])?;
    let weights = tape.softmax(scores)?;
    let alpha = tape.reshape(weights, vec![n, 1, steps])?;
    let pooled = tape.batch_matmul(alpha, by_batch)?;
    let pooled = tape.reshape(pooled, vec![n, d])?;
    Ok(Attended { pooled, weights })
}

/// Mean over the time axis of `[t, n, d]`.
pub fn mean_pool<T: Real>(tape: &mut Tape<T>, h: Var) -> Result<Var> {
    tape.mean_axis(h, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn orthogonal_blocks_are_orthonormal() {
        let mut rng = stream(3, &[1]);
        let q = orthogonal(5, 5, &mut rng);
        for i in 0..5 {
            for j in 0..5 {
                let dot: f64 = (0..5).map(|k| q[i * 5 + k] * q[j * 5 + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn bilstm_zero_weights_give_zero_output() {
        let mut rng = stream(1, &[2]);
        let mut store = ParamStore::<f64>::new();
        let lstm = BiLstm::new(&mut store, "l", Group::Emotion, 3, 4, &mut rng);
        for id in (0..store.len()).map(ParamId) {
            store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(vec![5, 2, 3], |i| i as f64 * 0.1));
        let out = lstm.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(out.sequence), &[5, 2, 8]);
        assert!(tape.data(out.sequence).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilstm_single_step_has_double_width() {
        let mut rng = stream(1, &[3]);
        let mut store = ParamStore::<f64>::new();
        let lstm = BiLstm::new(&mut store, "l", Group::Emotion, 2, 3, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(vec![1, 1, 2], |i| i as f64 + 0.5));
        let out = lstm.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(out.sequence), &[1, 1, 6]);
        assert_eq!(tape.data(out.sequence), tape.data(out.final_state));
    }

    #[test]
    fn attention_single_step_and_uniform_weights() {
        let mut tape = Tape::<f64>::new();
        let h1 = tape.constant(Tensor::from_fn(vec![1, 2, 3], |i| i as f64));
        let w = tape.constant(Tensor::from_fn(vec![3, 1], |i| i as f64 - 1.0));
        let a = attention_pool(&mut tape, h1, w).unwrap();
        assert_eq!(tape.data(a.pooled), tape.data(h1));

        let h = tape.constant(Tensor::from_fn(vec![4, 2, 3], |i| (i as f64 * 0.7).sin()));
        let zero = tape.constant(Tensor::zeros(vec![3, 1]));
        let a = attention_pool(&mut tape, h, zero).unwrap();
        let m = mean_pool(&mut tape, h).unwrap();
        for (x, y) in tape.data(a.pooled).iter().zip(tape.data(m)) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(tape.data(a.weights).iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }
}
