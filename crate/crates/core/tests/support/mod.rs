//! Central finite-difference gradient oracle. Independent of the tape's
//! backward pass: it only ever evaluates forward values.
#![allow(dead_code)]

use miml_core::nn::{ParamId, ParamSet};
use miml_core::tape::{Tape, Var};

pub const STEP: f64 = 1e-6;

/// Relative error with an absolute floor for near-zero gradients.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn eval<F>(params: &ParamSet<f64>, f: &F) -> f64
where
    F: Fn(&mut Tape<'_, f64>) -> Var,
{
    let mut tape = Tape::new(params);
    let out = f(&mut tape);
    tape.value(out).data()[0]
}

/// Largest relative error between backprop and central differences over
/// (up to `max_per_tensor` evenly spaced) entries of each listed parameter.
pub fn max_param_error<F>(params: &ParamSet<f64>, ids: &[ParamId], max_per_tensor: usize, f: F) -> f64
where
    F: Fn(&mut Tape<'_, f64>) -> Var,
{
    let mut tape = Tape::new(params);
    let out = f(&mut tape);
    let grads = tape.backward(out);
    let mut worst = 0.0f64;
    for &id in ids {
        let n = params.value(id).len();
        let stride = (n / max_per_tensor.max(1)).max(1);
        let analytic = grads.param(id).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for i in (0..n).step_by(stride) {
            let mut plus = params.clone();
            plus.value_mut(id).data_mut()[i] += STEP;
            let mut minus = params.clone();
            minus.value_mut(id).data_mut()[i] -= STEP;
            let numeric = (eval(&plus, &f) - eval(&minus, &f)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}

/// Deterministic pseudo-random values in `[-1, 1)` (splitmix64).
pub fn probe_weights(n: usize, seed: u64) -> Vec<f64> {
    let mut state = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    (0..n)
        .map(|_| {
            state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            z ^= z >> 31;
            (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

/// Moves zero-initialized biases off the ReLU kink.
pub fn jitter_biases(params: &mut ParamSet<f64>) {
    for (k, p) in params.iter_mut().enumerate() {
        if p.name.ends_with("bias") {
            let n = p.value.len();
            let v: Vec<f64> = probe_weights(n, 100 + k as u64).iter().map(|x| 0.1 * x).collect();
            p.value.data_mut().copy_from_slice(&v);
        }
    }
}

pub mod modules;
