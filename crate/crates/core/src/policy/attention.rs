//! Single causal self-attention block (multi-head) with a tanh MLP and
//! residual connections, differentiated on the tape.

use crate::error::Result;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::{ParameterSet, Rng, Tensor};

use super::ngram::fill_normal;

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnDims {
    pub vocab: usize,
    pub length: usize,
    pub d_model: usize,
    pub heads: usize,
}

const TOK: usize = 0;
const POS: usize = 1;
const WQ: usize = 2;
const WK: usize = 3;
const WV: usize = 4;
const WO: usize = 5;
const W1: usize = 6;
const B1: usize = 7;
const W2: usize = 8;
const WOUT: usize = 9;
const BOUT: usize = 10;

pub(crate) fn init_params(dims: AttnDims, rng: Option<(&mut Rng, f64)>) -> Result<ParameterSet> {
    let d = dims.d_model;
    let mut p = ParameterSet::new();
    p.insert("attn.tok", Tensor::zeros(&[dims.vocab + 1, d]))?;
    p.insert("attn.pos", Tensor::zeros(&[dims.length, d]))?;
    for name in ["attn.wq", "attn.wk", "attn.wv", "attn.wo", "attn.w1"] {
        p.insert(name, Tensor::zeros(&[d, d]))?;
    }
    p.insert("attn.b1", Tensor::zeros(&[d]))?;
    p.insert("attn.w2", Tensor::zeros(&[d, d]))?;
    p.insert("attn.wout", Tensor::zeros(&[d, dims.vocab]))?;
    p.insert("attn.bout", Tensor::zeros(&[dims.vocab]))?;
    if let Some((rng, out_scale)) = rng {
        let fan = 1.0 / (d as f64).sqrt();
        fill_normal(p.tensor_mut(TOK), 1.0, rng);
        fill_normal(p.tensor_mut(POS), 1.0, rng);
        for i in [WQ, WK, WV, WO, W1, W2] {
            fill_normal(p.tensor_mut(i), fan, rng);
        }
        fill_normal(p.tensor_mut(WOUT), out_scale * fan, rng);
    }
    Ok(p)
}

/// Builds the forward graph on `input` ids (BOS first). Returns the
/// row-wise log-softmax node, one row per input position.
fn build(tape: &mut Tape, p: &ParameterSet, dims: &AttnDims, input: &[usize]) -> Var {
    let n = input.len();
    let d = dims.d_model;
    let dh = d / dims.heads;
    let tok = tape.param(p, TOK);
    let pos = tape.param(p, POS);
    let wq = tape.param(p, WQ);
    let wk = tape.param(p, WK);
    let wv = tape.param(p, WV);
    let wo = tape.param(p, WO);
    let w1 = tape.param(p, W1);
    let b1 = tape.param(p, B1);
    let w2 = tape.param(p, W2);
    let wout = tape.param(p, WOUT);
    let bout = tape.param(p, BOUT);

    let te = tape.gather(tok, input);
    let positions: Vec<usize> = (0..n).collect();
    let pe = tape.gather(pos, &positions);
    let x = tape.add(te, pe);

    let q = tape.matmul(x, wq);
    let k = tape.matmul(x, wk);
    let v = tape.matmul(x, wv);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(dims.heads);
    for h in 0..dims.heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let scores = tape.matmul_bt(qh, kh);
        let scores = tape.scale(scores, scale);
        let att = tape.causal_softmax(scores);
        heads.push(tape.matmul(att, vh));
    }
    let cat = tape.concat_cols(&heads);
    let proj = tape.matmul(cat, wo);
    let x1 = tape.add(x, proj);

    let m = tape.matmul(x1, w1);
    let m = tape.add_row(m, b1);
    let m = tape.tanh(m);
    let m = tape.matmul(m, w2);
    let x2 = tape.add(x1, m);

    let logits = tape.matmul(x2, wout);
    let logits = tape.add_row(logits, bout);
    tape.log_softmax(logits)
}

fn teacher_input(dims: &AttnDims, tokens: &[u8]) -> Vec<usize> {
    std::iter::once(dims.vocab)
        .chain(tokens[..tokens.len() - 1].iter().map(|&t| t as usize))
        .collect()
}

pub(crate) fn token_log_probs(p: &ParameterSet, dims: &AttnDims, tokens: &[u8]) -> Vec<f64> {
    let mut tape = Tape::new();
    let lp = build(&mut tape, p, dims, &teacher_input(dims, tokens));
    let v = tape.value(lp);
    tokens
        .iter()
        .enumerate()
        .map(|(t, &y)| v.at(t, y as usize))
        .collect()
}

pub(crate) fn next_log_probs(p: &ParameterSet, dims: &AttnDims, prefix: &[u8]) -> Vec<f64> {
    let input: Vec<usize> = std::iter::once(dims.vocab)
        .chain(prefix.iter().map(|&t| t as usize))
        .collect();
    let mut tape = Tape::new();
    let lp = build(&mut tape, p, dims, &input);
    let v = tape.value(lp);
    let last = input.len() - 1;
    (0..dims.vocab).map(|c| v.at(last, c)).collect()
}

pub(crate) fn accumulate_grad(
    p: &ParameterSet,
    dims: &AttnDims,
    tokens: &[u8],
    coeff: f64,
    grads: &mut ParameterSet,
) -> f64 {
    let mut tape = Tape::new();
    let lp = build(&mut tape, p, dims, &teacher_input(dims, tokens));
    let picks: Vec<(usize, usize)> = tokens
        .iter()
        .enumerate()
        .map(|(t, &y)| (t, y as usize))
        .collect();
    let root = tape.pick_sum(lp, &picks);
    let adj = tape.backward(root);
    tape.accumulate_param_grads(&adj, coeff, grads);
    tape.value(root).data[0]
}
