//! Dense tensors, named parameter sets, Adam, finite-difference checking,
//! seeded randomness and a small reverse-mode tape.
//!
//! All reductions run in index order, so results are bit-stable for a given
//! seed.

mod adam;
mod gradcheck;
mod rng;
pub mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::grad_check;
pub use rng::{child_seed, seeded_rng, Rng};
pub use tensor::{ParameterSet, Tensor};

use crate::error::{Error, Result};

/// Numerically stable log-softmax of one row.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::usage("log_softmax of an empty row"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("log_softmax input is not finite".into()));
    }
    Ok(log_softmax_unchecked(logits))
}

pub(crate) fn log_softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    log_softmax_in_place(&mut out);
    out
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &x in row.iter() {
        sum += (x - max).exp();
    }
    let lse = max + sum.ln();
    for x in row.iter_mut() {
        *x -= lse;
    }
}

/// Logistic sigmoid, accurate in both tails.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log σ(x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}
