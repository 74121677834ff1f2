//! Central finite-difference oracle for gradient tests (test-only).
//!
//! The oracle only ever calls the forward closure; it never looks at the
//! tape's backward pass except to read the analytic gradients it compares.

use alloc::vec::Vec;
use rand::seq::index::sample;
use rand::SeedableRng;

use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::Result;

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is (numerically) zero are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default)]
pub struct Report {
    pub max_rel_err: f64,
    pub coords: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<F>(f: &F, store: &ParamStore<f64>, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let root = f(&mut tape, store, &vars)?;
    Ok(tape.value(root).item())
}

/// Compares analytic gradients of the scalar `f` with respect to every
/// input tensor and every parameter against central differences with step
/// `h`. At most `max_coords` randomly chosen coordinates per tensor are
/// probed.
pub fn check<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    h: f64,
    max_coords: usize,
    seed: u64,
    f: F,
) -> Result<Report>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut store = store.clone();
    store.zero_grad();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let root = f(&mut tape, &store, &vars)?;
    let grads = tape.backward(root)?;
    store.accumulate(&tape, &grads);
    let input_grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).map(|g| g.to_vec()).unwrap_or_else(|| alloc::vec![0.0; t.len()]))
        .collect();

    let mut report = Report::default();
    let mut inputs = inputs.to_vec();
    for (k, g) in input_grads.iter().enumerate() {
        let n = inputs[k].len();
        for idx in sample(&mut rng, n, max_coords.min(n)).into_iter() {
            let orig = inputs[k].data()[idx];
            inputs[k].data_mut()[idx] = orig + h;
            let up = eval(&f, &store, &inputs)?;
            inputs[k].data_mut()[idx] = orig - h;
            let down = eval(&f, &store, &inputs)?;
            inputs[k].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            report.max_rel_err = report.max_rel_err.max(rel_err(g[idx], numeric));
            report.coords += 1;
        }
    }
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let analytic = store.get(id).grad.clone();
        let n = analytic.len();
        for idx in sample(&mut rng, n, max_coords.min(n)).into_iter() {
            let orig = store.get(id).value.data()[idx];
            store.get_mut(id).value.data_mut()[idx] = orig + h;
            let up = eval(&f, &store, &inputs)?;
            store.get_mut(id).value.data_mut()[idx] = orig - h;
            let down = eval(&f, &store, &inputs)?;
            store.get_mut(id).value.data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            report.max_rel_err = report.max_rel_err.max(rel_err(analytic[idx], numeric));
            report.coords += 1;
        }
    }
    Ok(report)
}
