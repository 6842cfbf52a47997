//! Fixed-window feed-forward policy: embeddings of the previous `k` tokens,
//! one tanh hidden layer, then logits. Gradients are derived by hand.

use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::numerics::{log_softmax_in_place, ParameterSet, Rng, Tensor};

pub(crate) const EMB: usize = 0;
pub(crate) const W1: usize = 1;
pub(crate) const B1: usize = 2;
pub(crate) const W2: usize = 3;
pub(crate) const B2: usize = 4;

/// Shape parameters of the n-gram network.
#[derive(Debug, Clone, Copy)]
pub(crate) struct NgramDims {
    pub vocab: usize,
    pub k: usize,
    pub embed: usize,
    pub hidden: usize,
    /// Output width: alphabet size for the policy, 1 for a scalar head.
    pub out: usize,
}

impl NgramDims {
    /// Index of the begin-of-sequence / padding token.
    pub fn bos(&self) -> usize {
        self.vocab
    }

    fn input(&self) -> usize {
        self.k * self.embed
    }
}

pub(crate) fn init_params(dims: NgramDims, rng: Option<(&mut Rng, f64)>) -> Result<ParameterSet> {
    let mut p = ParameterSet::new();
    p.insert("ngram.emb", Tensor::zeros(&[dims.vocab + 1, dims.embed]))?;
    p.insert("ngram.w1", Tensor::zeros(&[dims.input(), dims.hidden]))?;
    p.insert("ngram.b1", Tensor::zeros(&[dims.hidden]))?;
    p.insert("ngram.w2", Tensor::zeros(&[dims.hidden, dims.out]))?;
    p.insert("ngram.b2", Tensor::zeros(&[dims.out]))?;
    if let Some((rng, out_scale)) = rng {
        fill_normal(p.tensor_mut(EMB), 1.0, rng);
        fill_normal(p.tensor_mut(W1), 1.0 / (dims.input() as f64).sqrt(), rng);
        fill_normal(p.tensor_mut(W2), out_scale / (dims.hidden as f64).sqrt(), rng);
    }
    Ok(p)
}

pub(crate) fn fill_normal(t: &mut Tensor, std: f64, rng: &mut Rng) {
    let normal = Normal::new(0.0, std).expect("finite std");
    for x in t.data_mut() {
        *x = normal.sample(rng);
    }
}

/// Context token ids for predicting position `t`: the `k` tokens before it,
/// padded on the left with BOS.
pub(crate) fn context(tokens: &[u8], t: usize, dims: &NgramDims, out: &mut [usize]) {
    for (j, slot) in out.iter_mut().enumerate() {
        // slot j holds token t - k + j
        let pos = t as isize - dims.k as isize + j as isize;
        *slot = if pos < 0 { dims.bos() } else { tokens[pos as usize] as usize };
    }
}

/// Activations of one forward pass, kept for the backward pass.
pub(crate) struct Activations {
    pub ctx: Vec<usize>,
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
    pub out: Vec<f64>,
}

impl Activations {
    pub fn new(dims: &NgramDims) -> Self {
        Activations {
            ctx: vec![0; dims.k],
            input: vec![0.0; dims.input()],
            hidden: vec![0.0; dims.hidden],
            out: vec![0.0; dims.out],
        }
    }
}

/// Forward pass for the context already stored in `act.ctx`. Leaves raw
/// output (logits) in `act.out`.
pub(crate) fn forward(p: &ParameterSet, dims: &NgramDims, act: &mut Activations) {
    let emb = p.tensor(EMB);
    for (j, &tok) in act.ctx.iter().enumerate() {
        act.input[j * dims.embed..(j + 1) * dims.embed].copy_from_slice(emb.row(tok));
    }
    let w1 = p.tensor(W1).data();
    act.hidden.copy_from_slice(p.tensor(B1).data());
    for (i, &x) in act.input.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let row = &w1[i * dims.hidden..(i + 1) * dims.hidden];
        for (h, w) in act.hidden.iter_mut().zip(row) {
            *h += x * w;
        }
    }
    for h in act.hidden.iter_mut() {
        *h = h.tanh();
    }
    let w2 = p.tensor(W2).data();
    act.out.copy_from_slice(p.tensor(B2).data());
    for (i, &h) in act.hidden.iter().enumerate() {
        let row = &w2[i * dims.out..(i + 1) * dims.out];
        for (o, w) in act.out.iter_mut().zip(row) {
            *o += h * w;
        }
    }
}

/// Backpropagates `d_out` (gradient w.r.t. the raw outputs) through the
/// stored activations into `grads`.
pub(crate) fn backward(
    p: &ParameterSet,
    dims: &NgramDims,
    act: &Activations,
    d_out: &[f64],
    grads: &mut ParameterSet,
    d_hidden: &mut [f64],
) {
    {
        let gw2 = grads.tensor_mut(W2).data_mut();
        for (i, &h) in act.hidden.iter().enumerate() {
            let row = &mut gw2[i * dims.out..(i + 1) * dims.out];
            for (g, d) in row.iter_mut().zip(d_out) {
                *g += h * d;
            }
        }
    }
    for (g, d) in grads.tensor_mut(B2).data_mut().iter_mut().zip(d_out) {
        *g += d;
    }
    let w2 = p.tensor(W2).data();
    for (i, dz) in d_hidden.iter_mut().enumerate() {
        let row = &w2[i * dims.out..(i + 1) * dims.out];
        let dh: f64 = row.iter().zip(d_out).map(|(w, d)| w * d).sum();
        let h = act.hidden[i];
        *dz = dh * (1.0 - h * h);
    }
    for (g, d) in grads.tensor_mut(B1).data_mut().iter_mut().zip(d_hidden.iter()) {
        *g += d;
    }
    {
        let gw1 = grads.tensor_mut(W1).data_mut();
        for (i, &x) in act.input.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &mut gw1[i * dims.hidden..(i + 1) * dims.hidden];
            for (g, d) in row.iter_mut().zip(d_hidden.iter()) {
                *g += x * d;
            }
        }
    }
    let w1 = p.tensor(W1).data();
    let emb_cols = dims.embed;
    for (j, &tok) in act.ctx.iter().enumerate() {
        for e in 0..emb_cols {
            let i = j * emb_cols + e;
            let row = &w1[i * dims.hidden..(i + 1) * dims.hidden];
            let dx: f64 = row.iter().zip(d_hidden.iter()).map(|(w, d)| w * d).sum();
            grads.tensor_mut(EMB).row_mut(tok)[e] += dx;
        }
    }
}

/// Per-position log-probabilities of `tokens`.
pub(crate) fn token_log_probs(p: &ParameterSet, dims: &NgramDims, tokens: &[u8]) -> Vec<f64> {
    let mut act = Activations::new(dims);
    let mut out = Vec::with_capacity(tokens.len());
    for t in 0..tokens.len() {
        context(tokens, t, dims, &mut act.ctx);
        forward(p, dims, &mut act);
        log_softmax_in_place(&mut act.out);
        out.push(act.out[tokens[t] as usize]);
    }
    out
}

pub(crate) fn next_log_probs(p: &ParameterSet, dims: &NgramDims, prefix: &[u8]) -> Vec<f64> {
    let mut act = Activations::new(dims);
    context(prefix, prefix.len(), dims, &mut act.ctx);
    forward(p, dims, &mut act);
    log_softmax_in_place(&mut act.out);
    act.out
}

/// Adds `coeff * ∇ log π(tokens)` to `grads`; returns `log π(tokens)`.
pub(crate) fn accumulate_grad(
    p: &ParameterSet,
    dims: &NgramDims,
    tokens: &[u8],
    coeff: f64,
    grads: &mut ParameterSet,
) -> f64 {
    let mut act = Activations::new(dims);
    let mut d_out = vec![0.0; dims.out];
    let mut d_hidden = vec![0.0; dims.hidden];
    let mut total = 0.0;
    for t in 0..tokens.len() {
        context(tokens, t, dims, &mut act.ctx);
        forward(p, dims, &mut act);
        log_softmax_in_place(&mut act.out);
        let y = tokens[t] as usize;
        total += act.out[y];
        for (c, d) in d_out.iter_mut().enumerate() {
            let onehot = if c == y { 1.0 } else { 0.0 };
            *d = coeff * (onehot - act.out[c].exp());
        }
        backward(p, dims, &act, &d_out, grads, &mut d_hidden);
    }
    total
}
