//! Alignment losses with analytic gradients.
//!
//! Every loss here is a function of sequence log-probabilities, so its
//! gradient is a weighted sum of `∇ log π(y)` terms. Each loss computes the
//! per-sequence coefficients and lets the policy accumulate them in pair
//! order.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_sigmoid, sigmoid, softplus, Adam, AdamConfig, ParameterSet, Rng};
use crate::policy::ngram::{self, Activations, NgramDims};
use crate::policy::PolicyModel;
use crate::prefdata::PreferencePair;
use crate::seqcore::{Alphabet, Sequence};

/// Weighting and temperature parameters of the energy-gap-weighted loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysioParams {
    pub beta: f64,
    pub lambda: f64,
    pub mu: f64,
    pub tau: f64,
}

impl PhysioParams {
    /// Defaults matched to integer lattice energy gaps.
    pub fn lattice() -> Self {
        PhysioParams {
            beta: 0.1,
            lambda: 1.0,
            mu: 2.0,
            tau: 0.5,
        }
    }

    /// Defaults for force-field-scale energies.
    pub fn force_field() -> Self {
        PhysioParams {
            beta: 0.1,
            lambda: 1.0,
            mu: 50.0,
            tau: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("objective.{key}"), "must be a positive finite number"))
            }
        };
        positive("beta", self.beta)?;
        positive("lambda", self.lambda)?;
        positive("tau", self.tau)?;
        if !self.mu.is_finite() {
            return Err(Error::config("objective.mu", "must be finite"));
        }
        Ok(())
    }
}

/// How an energy gap becomes a pair weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PsiKind {
    Sigmoid,
    Linear { scale: f64 },
    /// Every pair weighs 1.
    Const1,
}

pub fn delta_e(e_w: f64, e_l: f64) -> f64 {
    (e_l - e_w).max(0.0)
}

/// Bounded sigmoid weight `λ σ((d - μ) / τ)`.
pub fn psi(d: f64, p: &PhysioParams) -> Result<f64> {
    if p.tau <= 0.0 {
        return Err(Error::config("objective.tau", "must be positive"));
    }
    Ok(p.lambda * sigmoid((d - p.mu) / p.tau))
}

/// Unbounded weight proportional to the gap.
pub fn linear_psi(d: f64, scale: f64) -> Result<f64> {
    if scale <= 0.0 {
        return Err(Error::config("objective.linear_scale", "must be positive"));
    }
    Ok(scale * d)
}

/// Default linear slope: agrees with the sigmoid weight at `d = μ`.
pub fn default_linear_scale(p: &PhysioParams) -> f64 {
    p.lambda / (2.0 * p.mu.abs().max(1.0))
}

pub fn pair_weight(kind: PsiKind, d: f64, p: &PhysioParams) -> Result<f64> {
    match kind {
        PsiKind::Sigmoid => psi(d, p),
        PsiKind::Linear { scale } => linear_psi(d, scale),
        PsiKind::Const1 => Ok(1.0),
    }
}

/// Per-pair update magnitude: weight times the error term `σ(-margin)`.
pub fn gradient_gain(d: f64, margin: f64, p: &PhysioParams) -> Result<f64> {
    Ok(psi(d, p)? * sigmoid(-margin))
}

/// Pairs with policy and reference log-probabilities of both members.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub pairs: Vec<PreferencePair>,
    pub policy_w: Vec<f64>,
    pub policy_l: Vec<f64>,
    pub ref_w: Vec<f64>,
    pub ref_l: Vec<f64>,
}

fn log_probs_par(model: &PolicyModel, seqs: &[&Sequence]) -> Result<Vec<f64>> {
    seqs.par_iter().map(|s| model.log_prob(s)).collect()
}

impl PairBatch {
    pub fn new(pairs: Vec<PreferencePair>, policy: &PolicyModel, reference: &PolicyModel) -> Result<Self> {
        let w: Vec<&Sequence> = pairs.iter().map(|p| &p.y_w).collect();
        let l: Vec<&Sequence> = pairs.iter().map(|p| &p.y_l).collect();
        let ref_w = log_probs_par(reference, &w)?;
        let ref_l = log_probs_par(reference, &l)?;
        Self::with_reference(pairs, ref_w, ref_l, policy)
    }

    /// Builds a batch from precomputed reference log-probabilities.
    pub fn with_reference(
        pairs: Vec<PreferencePair>,
        ref_w: Vec<f64>,
        ref_l: Vec<f64>,
        policy: &PolicyModel,
    ) -> Result<Self> {
        if ref_w.len() != pairs.len() || ref_l.len() != pairs.len() {
            return Err(Error::usage("reference log-probabilities do not match the pairs"));
        }
        let w: Vec<&Sequence> = pairs.iter().map(|p| &p.y_w).collect();
        let l: Vec<&Sequence> = pairs.iter().map(|p| &p.y_l).collect();
        let policy_w = log_probs_par(policy, &w)?;
        let policy_l = log_probs_par(policy, &l)?;
        Ok(PairBatch {
            pairs,
            policy_w,
            policy_l,
            ref_w,
            ref_l,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Log-ratio margin `(lw - rw) - (ll - rl)` without the β factor.
    pub fn log_ratio_margin(&self, i: usize) -> f64 {
        (self.policy_w[i] - self.ref_w[i]) - (self.policy_l[i] - self.ref_l[i])
    }

    fn check(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::EmptyDataset("empty preference batch".into()));
        }
        Ok(())
    }
}

pub fn implicit_reward_margin(batch: &PairBatch, i: usize, beta: f64) -> f64 {
    beta * batch.log_ratio_margin(i)
}

/// Loss value and gradient with respect to the trained parameters.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: ParameterSet,
}

/// Accumulates `Σ c_w ∇ log π(y_w) + c_l ∇ log π(y_l)` in pair order.
fn assemble(policy: &PolicyModel, batch: &PairBatch, coeffs: &[(f64, f64)]) -> Result<ParameterSet> {
    let mut grad = policy.params().zeros_like();
    for (p, &(cw, cl)) in batch.pairs.iter().zip(coeffs) {
        if cw != 0.0 {
            policy.accumulate_grad_log_prob(&p.y_w, cw, &mut grad)?;
        }
        if cl != 0.0 {
            policy.accumulate_grad_log_prob(&p.y_l, cl, &mut grad)?;
        }
    }
    Ok(grad)
}

/// `-mean w_i log σ(β h_i)` with per-pair weights held constant.
fn weighted_logistic(policy: &PolicyModel, batch: &PairBatch, beta: f64, weights: &[f64]) -> Result<LossOutput> {
    batch.check()?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut coeffs = Vec::with_capacity(batch.len());
    for (i, &w) in weights.iter().enumerate() {
        let margin = implicit_reward_margin(batch, i, beta);
        loss += -w * log_sigmoid(margin);
        let c = w * sigmoid(-margin) * beta / n;
        coeffs.push((-c, c));
    }
    Ok(LossOutput {
        loss: loss / n,
        grad: assemble(policy, batch, &coeffs)?,
    })
}

/// Energy-gap-weighted preference loss.
pub fn physio_loss(policy: &PolicyModel, batch: &PairBatch, p: &PhysioParams, kind: PsiKind) -> Result<LossOutput> {
    let weights = batch
        .pairs
        .iter()
        .map(|pair| pair_weight(kind, pair.delta_e, p))
        .collect::<Result<Vec<_>>>()?;
    weighted_logistic(policy, batch, p.beta, &weights)
}

pub fn dpo_loss(policy: &PolicyModel, batch: &PairBatch, beta: f64) -> Result<LossOutput> {
    weighted_logistic(policy, batch, beta, &vec![1.0; batch.len()])
}

pub fn ipo_loss(policy: &PolicyModel, batch: &PairBatch, tau_ipo: f64) -> Result<LossOutput> {
    if tau_ipo <= 0.0 {
        return Err(Error::config("objective.tau_ipo", "must be positive"));
    }
    batch.check()?;
    let n = batch.len() as f64;
    let target = 1.0 / (2.0 * tau_ipo);
    let mut loss = 0.0;
    let mut coeffs = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let r = batch.log_ratio_margin(i) - target;
        loss += r * r;
        let c = 2.0 * r / n;
        coeffs.push((c, -c));
    }
    Ok(LossOutput {
        loss: loss / n,
        grad: assemble(policy, batch, &coeffs)?,
    })
}

/// Reference point of the prospect-style loss: clamped mean loser log-ratio.
pub fn kto_reference_point(batch: &PairBatch) -> f64 {
    let n = batch.len() as f64;
    let mean: f64 = (0..batch.len()).map(|i| batch.policy_l[i] - batch.ref_l[i]).sum::<f64>() / n;
    mean.max(0.0)
}

/// Prospect-style loss with the reference point passed in and held fixed.
pub fn kto_loss_at(
    policy: &PolicyModel,
    batch: &PairBatch,
    beta: f64,
    lambda_w: f64,
    lambda_l: f64,
    z0: f64,
) -> Result<LossOutput> {
    batch.check()?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut coeffs = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let sw = sigmoid(beta * (batch.policy_w[i] - batch.ref_w[i] - z0));
        let sl = sigmoid(beta * (batch.policy_l[i] - batch.ref_l[i] - z0));
        loss += lambda_w * (1.0 - sw) + lambda_l * sl;
        coeffs.push((
            -lambda_w * beta * sw * (1.0 - sw) / n,
            lambda_l * beta * sl * (1.0 - sl) / n,
        ));
    }
    Ok(LossOutput {
        loss: loss / n,
        grad: assemble(policy, batch, &coeffs)?,
    })
}

pub fn kto_loss(policy: &PolicyModel, batch: &PairBatch, beta: f64, lambda_w: f64, lambda_l: f64) -> Result<LossOutput> {
    batch.check()?;
    kto_loss_at(policy, batch, beta, lambda_w, lambda_l, kto_reference_point(batch))
}

/// Negative mean log-likelihood of the winners.
pub fn sft_loss(policy: &PolicyModel, winners: &[Sequence]) -> Result<LossOutput> {
    if winners.is_empty() {
        return Err(Error::EmptyDataset("no sequences for likelihood fitting".into()));
    }
    let n = winners.len() as f64;
    let mut grad = policy.params().zeros_like();
    let mut loss = 0.0;
    for s in winners {
        loss -= policy.accumulate_grad_log_prob(s, -1.0 / n, &mut grad)?;
    }
    Ok(LossOutput { loss: loss / n, grad })
}

/// Scalar sequence scorer: the n-gram backbone with a one-unit head whose
/// output is averaged over positions. Each position sees a window ending at
/// itself.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    alphabet: Alphabet,
    length: usize,
    dims_k: usize,
    embed: usize,
    hidden: usize,
    params: ParameterSet,
}

impl RewardModel {
    pub fn new(alphabet: Alphabet, length: usize, k: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if k == 0 || hidden == 0 || length < 2 {
            return Err(Error::usage("reward model needs k, hidden >= 1 and length >= 2"));
        }
        let mut rm = RewardModel {
            alphabet,
            length,
            dims_k: k,
            embed: 8,
            hidden,
            params: ParameterSet::new(),
        };
        rm.params = ngram::init_params(rm.dims(), Some((rng, 1.0)))?;
        Ok(rm)
    }

    /// All-zero parameters: scores every sequence 0.
    pub fn constant(alphabet: Alphabet, length: usize) -> Result<Self> {
        let mut rm = RewardModel {
            alphabet,
            length,
            dims_k: 4,
            embed: 8,
            hidden: 8,
            params: ParameterSet::new(),
        };
        rm.params = ngram::init_params(rm.dims(), None)?;
        Ok(rm)
    }

    fn dims(&self) -> NgramDims {
        NgramDims {
            vocab: self.alphabet.size(),
            k: self.dims_k,
            embed: self.embed,
            hidden: self.hidden,
            out: 1,
        }
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    fn check(&self, s: &Sequence) -> Result<()> {
        if s.alphabet() != self.alphabet || s.len() != self.length {
            return Err(Error::usage(format!(
                "reward model expects {} sequences of length {}",
                self.alphabet.name(),
                self.length
            )));
        }
        Ok(())
    }

    pub fn score(&self, s: &Sequence) -> Result<f64> {
        self.check(s)?;
        let dims = self.dims();
        let mut act = Activations::new(&dims);
        let mut total = 0.0;
        for t in 0..s.len() {
            ngram::context(s.tokens(), t + 1, &dims, &mut act.ctx);
            ngram::forward(&self.params, &dims, &mut act);
            total += act.out[0];
        }
        Ok(total / s.len() as f64)
    }

    /// Adds `coeff * ∇φ r(s)` into `grads`; returns `r(s)`.
    fn accumulate_grad(&self, s: &Sequence, coeff: f64, grads: &mut ParameterSet) -> Result<f64> {
        self.check(s)?;
        let dims = self.dims();
        let mut act = Activations::new(&dims);
        let mut dh = vec![0.0; dims.hidden];
        let d_out = [coeff / s.len() as f64];
        let mut total = 0.0;
        for t in 0..s.len() {
            ngram::context(s.tokens(), t + 1, &dims, &mut act.ctx);
            ngram::forward(&self.params, &dims, &mut act);
            total += act.out[0];
            ngram::backward(&self.params, &dims, &act, &d_out, grads, &mut dh);
        }
        Ok(total / s.len() as f64)
    }

    /// Fraction of pairs the model ranks correctly.
    pub fn accuracy(&self, pairs: &[PreferencePair]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::EmptyDataset("no pairs to score".into()));
        }
        let mut hits = 0usize;
        for p in pairs {
            if self.score(&p.y_w)? > self.score(&p.y_l)? {
                hits += 1;
            }
        }
        Ok(hits as f64 / pairs.len() as f64)
    }
}

/// Pairwise logistic ranking loss of the reward model.
pub fn bt_loss(rm: &RewardModel, pairs: &[PreferencePair]) -> Result<LossOutput> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no pairs for reward fitting".into()));
    }
    let n = pairs.len() as f64;
    let mut grad = rm.params.zeros_like();
    let mut loss = 0.0;
    for p in pairs {
        let margin = rm.score(&p.y_w)? - rm.score(&p.y_l)?;
        loss += softplus(-margin);
        let c = sigmoid(-margin) / n;
        rm.accumulate_grad(&p.y_w, -c, &mut grad)?;
        rm.accumulate_grad(&p.y_l, c, &mut grad)?;
    }
    Ok(LossOutput { loss: loss / n, grad })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BtReport {
    pub steps: usize,
    pub final_loss: f64,
    pub accuracy: f64,
}

/// Fits the reward model with Adam on minibatches of `batch` pairs.
pub fn bt_reward_train(
    pairs: &[PreferencePair],
    rm: &mut RewardModel,
    steps: usize,
    batch: usize,
    adam: AdamConfig,
    rng: &mut Rng,
) -> Result<BtReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no pairs for reward fitting".into()));
    }
    let batch = batch.clamp(1, pairs.len());
    let mut opt = Adam::new(adam, &rm.params);
    for step in 0..steps {
        let idx = sample(rng, pairs.len(), batch);
        let chunk: Vec<PreferencePair> = idx.iter().map(|i| pairs[i].clone()).collect();
        let out = bt_loss(rm, &chunk)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss: out.loss });
        }
        opt.step(&mut rm.params, &out.grad)?;
    }
    Ok(BtReport {
        steps,
        final_loss: bt_loss(rm, pairs)?.loss,
        accuracy: rm.accuracy(pairs)?,
    })
}

/// Exponential moving average of past mean rewards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MovingBaseline {
    pub value: Option<f64>,
    pub decay: f64,
}

impl Default for MovingBaseline {
    fn default() -> Self {
        MovingBaseline {
            value: None,
            decay: 0.9,
        }
    }
}

impl MovingBaseline {
    fn update(&mut self, batch_mean: f64) {
        self.value = Some(match self.value {
            None => batch_mean,
            Some(v) => self.decay * v + (1.0 - self.decay) * batch_mean,
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgSettings {
    pub n_samples: usize,
    pub kl_coef: f64,
    /// Ratio clipping half-width; infinity disables clipping.
    pub clip_eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgDiagnostics {
    pub mean_reward: f64,
    pub mean_shaped_reward: f64,
    pub kl_estimate: f64,
    pub clip_fraction: f64,
    pub baseline: f64,
}

/// One clipped policy-gradient estimate.
///
/// Samples come from `behavior` (the policy itself when `None`). Each
/// sample's reward is the reward-model score minus `kl_coef` times its
/// sequence log-ratio to the reference. The advantage subtracts the moving
/// baseline as it stood before this batch; the baseline is updated after.
/// The returned loss is the negated clipped surrogate.
pub fn pg_step(
    policy: &PolicyModel,
    behavior: Option<&PolicyModel>,
    reference: &PolicyModel,
    rm: &RewardModel,
    settings: &PgSettings,
    baseline: &mut MovingBaseline,
    rng: &mut Rng,
) -> Result<(LossOutput, PgDiagnostics)> {
    if settings.n_samples < 2 {
        return Err(Error::config("objective.pg_samples", "must be at least 2"));
    }
    if settings.kl_coef < 0.0 || settings.clip_eps <= 0.0 || settings.clip_eps.is_nan() {
        return Err(Error::config("objective", "kl_coef must be >= 0 and clip_eps > 0"));
    }
    let sampler = behavior.unwrap_or(policy);
    let samples = sampler.sample(settings.n_samples, rng);
    let rows: Vec<(f64, f64, f64, f64)> = samples
        .par_iter()
        .map(|s| -> Result<_> {
            let lp = policy.log_prob(s)?;
            let lb = match behavior {
                Some(b) => b.log_prob(s)?,
                None => lp,
            };
            Ok((lp, lb, reference.log_prob(s)?, rm.score(s)?))
        })
        .collect::<Result<_>>()?;
    let n = settings.n_samples as f64;
    let shaped: Vec<f64> = rows
        .iter()
        .map(|&(lp, _, lr, r)| r - settings.kl_coef * (lp - lr))
        .collect();
    let batch_mean = shaped.iter().sum::<f64>() / n;
    let b = baseline.value.unwrap_or(batch_mean);
    let mut grad = policy.params().zeros_like();
    let mut objective = 0.0;
    let mut clipped = 0usize;
    let mut kl = 0.0;
    let mut mean_reward = 0.0;
    for (s, (&(lp, lb, lr, r), &reward)) in samples.iter().zip(rows.iter().zip(&shaped)) {
        let adv = reward - b;
        let ratio = (lp - lb).exp();
        let bounded = ratio.clamp(1.0 - settings.clip_eps, 1.0 + settings.clip_eps);
        objective += (ratio * adv).min(bounded * adv);
        let is_clipped = (adv > 0.0 && ratio > 1.0 + settings.clip_eps)
            || (adv < 0.0 && ratio < 1.0 - settings.clip_eps);
        if is_clipped {
            clipped += 1;
        } else if adv != 0.0 {
            policy.accumulate_grad_log_prob(s, -adv * ratio / n, &mut grad)?;
        }
        kl += ratio * (lp - lr);
        mean_reward += r;
    }
    baseline.update(batch_mean);
    Ok((
        LossOutput {
            loss: -objective / n,
            grad,
        },
        PgDiagnostics {
            mean_reward: mean_reward / n,
            mean_shaped_reward: batch_mean,
            kl_estimate: kl / n,
            clip_fraction: clipped as f64 / n,
            baseline: b,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, seeded_rng};
    use crate::policy::{Architecture, PolicyConfig};
    use crate::prefdata::Pairing;
    use proptest::prelude::*;

    type LossFn<'a> = Box<dyn Fn(&PolicyModel, &PairBatch) -> Result<LossOutput> + 'a>;

    fn tiny_config(seed: u64) -> PolicyConfig {
        PolicyConfig {
            alphabet: Alphabet::Hp2,
            length: 6,
            arch: Architecture::Ngram { k: 3, hidden: 5 },
            embed_dim: 3,
            seed,
            init_scale: 0.5,
        }
    }

    fn models(seed: u64) -> (PolicyModel, PolicyModel) {
        let reference = PolicyModel::new(tiny_config(seed)).unwrap().into_frozen();
        let policy = PolicyModel::new(tiny_config(seed + 100)).unwrap();
        (policy, reference)
    }

    fn random_pairs(n: usize, rng: &mut crate::numerics::Rng) -> Vec<PreferencePair> {
        use rand::Rng as _;
        (0..n)
            .map(|_| {
                let tok = |rng: &mut crate::numerics::Rng| (0..6).map(|_| rng.random_range(0..2u8)).collect::<Vec<_>>();
                let w = Sequence::new(Alphabet::Hp2, tok(rng)).unwrap();
                let l = Sequence::new(Alphabet::Hp2, tok(rng)).unwrap();
                let ew = -rng.random_range(0..5);
                let el = -rng.random_range(0..5);
                PreferencePair::new(w, l, ew, el, Pairing::MaxGap)
            })
            .collect()
    }

    #[test]
    fn delta_e_examples() {
        assert_eq!(delta_e(-10.0, -4.0), 6.0);
        assert_eq!(delta_e(-4.0, -10.0), 0.0);
        assert_eq!(delta_e(-3.0, -3.0), 0.0);
    }

    #[test]
    fn psi_spot_values() {
        let p = PhysioParams::force_field();
        assert_eq!(psi(50.0, &p).unwrap(), 0.5);
        assert!((psi(0.0, &p).unwrap() - 0.006693).abs() < 1e-6);
        assert!((psi(100.0, &p).unwrap() - 0.993307).abs() < 1e-6);
        let bad = PhysioParams { tau: 0.0, ..p };
        assert!(matches!(psi(1.0, &bad), Err(Error::Config { .. })));
    }

    #[test]
    fn linear_psi_examples() {
        assert_eq!(linear_psi(0.0, 1.0).unwrap(), 0.0);
        assert_eq!(linear_psi(3.0, 0.5).unwrap(), 1.5);
        let p = PhysioParams::lattice();
        let s = default_linear_scale(&p);
        assert_eq!(linear_psi(p.mu, s).unwrap(), psi(p.mu, &p).unwrap());
        assert!(linear_psi(100.0, s).unwrap() > p.lambda);
        assert!(linear_psi(1.0, 0.0).is_err());
    }

    #[test]
    fn gradient_gain_examples() {
        let p = PhysioParams::force_field();
        assert_eq!(gradient_gain(50.0, 0.0, &p).unwrap(), 0.25);
        assert!((gradient_gain(100.0, 2.0, &p).unwrap() - 0.118405).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn gain_monotone(d in 0.0f64..100.0, dd in 0.01f64..10.0, m in -5.0f64..5.0, dm in 0.01f64..5.0) {
            let p = PhysioParams::force_field();
            prop_assert!(gradient_gain(d + dd, m, &p).unwrap() > gradient_gain(d, m, &p).unwrap());
            prop_assert!(gradient_gain(d, m + dm, &p).unwrap() < gradient_gain(d, m, &p).unwrap());
        }
    }

    #[test]
    fn margin_zero_at_reference_and_linear_in_beta() {
        let (_, reference) = models(1);
        let policy = reference.trainable_copy();
        let pairs = random_pairs(5, &mut seeded_rng(0));
        let batch = PairBatch::new(pairs.clone(), &policy, &reference).unwrap();
        for i in 0..5 {
            assert_eq!(implicit_reward_margin(&batch, i, 0.1), 0.0);
        }
        let (policy, reference) = models(2);
        let batch = PairBatch::new(pairs, &policy, &reference).unwrap();
        for i in 0..5 {
            let a = implicit_reward_margin(&batch, i, 0.1);
            let b = implicit_reward_margin(&batch, i, 0.2);
            assert!((b - 2.0 * a).abs() < 1e-15);
        }
    }

    #[test]
    fn losses_at_reference() {
        let (_, reference) = models(3);
        let policy = reference.trainable_copy();
        let pairs = random_pairs(7, &mut seeded_rng(1));
        let batch = PairBatch::new(pairs.clone(), &policy, &reference).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((dpo_loss(&policy, &batch, 0.1).unwrap().loss - ln2).abs() < 1e-15);
        let p = PhysioParams::lattice();
        let mean_psi: f64 = pairs.iter().map(|q| psi(q.delta_e, &p).unwrap()).sum::<f64>() / 7.0;
        let got = physio_loss(&policy, &batch, &p, PsiKind::Sigmoid).unwrap().loss;
        assert!((got - mean_psi * ln2).abs() < 1e-14);
        assert!((ipo_loss(&policy, &batch, 0.5).unwrap().loss - 1.0).abs() < 1e-15);
        assert!((kto_loss(&policy, &batch, 0.1, 1.0, 2.0).unwrap().loss - 1.5).abs() < 1e-15);
        assert!(ipo_loss(&policy, &batch, 0.0).is_err());
    }

    #[test]
    fn const_weight_reduces_exactly() {
        let (policy, reference) = models(4);
        let batch = PairBatch::new(random_pairs(9, &mut seeded_rng(2)), &policy, &reference).unwrap();
        let a = physio_loss(&policy, &batch, &PhysioParams::lattice(), PsiKind::Const1).unwrap();
        let b = dpo_loss(&policy, &batch, 0.1).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (policy, reference) = models(5);
        let pairs = random_pairs(3, &mut seeded_rng(3));
        let p = PhysioParams { beta: 0.7, ..PhysioParams::lattice() };
        let with = |theta: &ParameterSet| {
            let m = policy.with_params(theta.clone()).unwrap();
            let b = PairBatch::new(pairs.clone(), &m, &reference).unwrap();
            (m, b)
        };
        let z0 = {
            let (_, b) = with(policy.params());
            kto_reference_point(&b)
        };
        let losses: Vec<LossFn> = vec![
            Box::new(|m, b| physio_loss(m, b, &p, PsiKind::Sigmoid)),
            Box::new(|m, b| physio_loss(m, b, &p, PsiKind::Linear { scale: 0.3 })),
            Box::new(|m, b| dpo_loss(m, b, 0.5)),
            Box::new(|m, b| ipo_loss(m, b, 0.25)),
            Box::new(|m, b| kto_loss_at(m, b, 0.5, 1.0, 1.5, z0)),
        ];
        for f in &losses {
            let err = grad_check(
                |theta| {
                    let (m, b) = with(theta);
                    let out = f(&m, &b)?;
                    Ok((out.loss, out.grad))
                },
                policy.params(),
                1e-5,
                400,
                0,
            )
            .unwrap();
            assert!(err < 1e-6, "rel err {err}");
        }
        let winners: Vec<Sequence> = pairs.iter().map(|q| q.y_w.clone()).collect();
        let err = grad_check(
            |theta| {
                let out = sft_loss(&policy.with_params(theta.clone())?, &winners)?;
                Ok((out.loss, out.grad))
            },
            policy.params(),
            1e-5,
            400,
            0,
        )
        .unwrap();
        assert!(err < 1e-6, "sft rel err {err}");
    }

    #[test]
    fn zero_gap_pairs_are_suppressed() {
        let (policy, reference) = models(6);
        let w = Sequence::parse(Alphabet::Hp2, "HHPPHH").unwrap();
        let l = Sequence::parse(Alphabet::Hp2, "PHPHPH").unwrap();
        let pair = PreferencePair::new(w, l, -2, -2, Pairing::MaxGap);
        let batch = PairBatch::new(vec![pair], &policy, &reference).unwrap();
        let p = PhysioParams::force_field();
        let weighted = physio_loss(&policy, &batch, &p, PsiKind::Sigmoid).unwrap().grad.norm();
        let plain = dpo_loss(&policy, &batch, p.beta).unwrap().grad.norm();
        assert!(weighted <= 0.006693 * plain * (1.0 + 1e-9));
    }

    #[test]
    fn sft_uniform_value() {
        let cfg = PolicyConfig { length: 4, ..tiny_config(0) };
        let m = PolicyModel::zeros(cfg).unwrap();
        let s = Sequence::parse(Alphabet::Hp2, "HPHP").unwrap();
        let out = sft_loss(&m, &[s]).unwrap();
        assert!((out.loss - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn dpo_descends_on_one_pair() {
        let (mut policy, reference) = models(7);
        let w = Sequence::parse(Alphabet::Hp2, "HHPPHH").unwrap();
        let l = Sequence::parse(Alphabet::Hp2, "PHPHPP").unwrap();
        let pairs = vec![PreferencePair::new(w, l, -2, 0, Pairing::MaxGap)];
        let b0 = PairBatch::new(pairs.clone(), &policy, &reference).unwrap();
        let out = dpo_loss(&policy, &b0, 0.1).unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 1e-3, ..AdamConfig::default() }, policy.params());
        opt.step(policy.params_mut().unwrap(), &out.grad).unwrap();
        let b1 = PairBatch::new(pairs, &policy, &reference).unwrap();
        assert!(dpo_loss(&policy, &b1, 0.1).unwrap().loss < out.loss);
    }

    #[test]
    fn sft_raises_winner_probability_each_step() {
        let (mut policy, _) = models(8);
        let s = Sequence::parse(Alphabet::Hp2, "HPPHHP").unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 1e-3, ..AdamConfig::default() }, policy.params());
        let mut last = policy.log_prob(&s).unwrap();
        for _ in 0..50 {
            let out = sft_loss(&policy, std::slice::from_ref(&s)).unwrap();
            opt.step(policy.params_mut().unwrap(), &out.grad).unwrap();
            let now = policy.log_prob(&s).unwrap();
            assert!(now > last);
            last = now;
        }
    }

    #[test]
    fn bt_gradient_and_training() {
        let mut rng = seeded_rng(11);
        let rm = RewardModel::new(Alphabet::Hp2, 6, 3, 6, &mut rng).unwrap();
        let pairs = random_pairs(3, &mut rng);
        let err = grad_check(
            |theta| {
                let mut m = rm.clone();
                m.params = theta.clone();
                let out = bt_loss(&m, &pairs)?;
                Ok((out.loss, out.grad))
            },
            rm.params(),
            1e-5,
            400,
            0,
        )
        .unwrap();
        assert!(err < 1e-6, "bt rel err {err}");

        let mut untouched = rm.clone();
        bt_reward_train(&pairs, &mut untouched, 0, 4, AdamConfig::default(), &mut rng).unwrap();
        assert_eq!(untouched, rm);

        let w = Sequence::parse(Alphabet::Hp2, "HHHHHH").unwrap();
        let l = Sequence::parse(Alphabet::Hp2, "PPPPPP").unwrap();
        let one = vec![PreferencePair::new(w, l, -4, 0, Pairing::MaxGap)];
        let mut m = rm.clone();
        let cfg = AdamConfig { lr: 1e-2, ..AdamConfig::default() };
        let report = bt_reward_train(&one, &mut m, 500, 1, cfg, &mut rng).unwrap();
        assert_eq!(report.accuracy, 1.0);
    }

    #[test]
    fn constant_reward_gives_no_gradient() {
        let (_, reference) = models(12);
        let policy = reference.trainable_copy();
        let rm = RewardModel::constant(Alphabet::Hp2, 6).unwrap();
        let settings = PgSettings { n_samples: 64, kl_coef: 0.1, clip_eps: 0.2 };
        let mut base = MovingBaseline::default();
        let mut rng = seeded_rng(0);
        let (out, diag) = pg_step(&policy, None, &reference, &rm, &settings, &mut base, &mut rng).unwrap();
        assert!(out.grad.norm() < 1e-12);
        assert_eq!(diag.clip_fraction, 0.0);
        assert!(diag.kl_estimate.abs() < 1e-12);
    }

    #[test]
    fn unclipped_step_is_reinforce() {
        let (policy, reference) = models(13);
        let mut rng = seeded_rng(1);
        let rm = RewardModel::new(Alphabet::Hp2, 6, 3, 6, &mut rng).unwrap();
        let settings = PgSettings { n_samples: 16, kl_coef: 0.2, clip_eps: f64::INFINITY };
        let mut base = MovingBaseline { value: Some(0.3), decay: 0.9 };
        let (out, diag) =
            pg_step(&policy, None, &reference, &rm, &settings, &mut base, &mut seeded_rng(5)).unwrap();
        // replay the same samples by hand
        let samples = policy.sample(16, &mut seeded_rng(5));
        let mut expect = policy.params().zeros_like();
        for s in &samples {
            let r = rm.score(s).unwrap() - 0.2 * (policy.log_prob(s).unwrap() - reference.log_prob(s).unwrap());
            policy.accumulate_grad_log_prob(s, -(r - 0.3) / 16.0, &mut expect).unwrap();
        }
        let mut diff = out.grad.clone();
        diff.add_scaled(&expect, -1.0).unwrap();
        assert!(diff.max_abs() < 1e-12);
        assert_eq!(diag.clip_fraction, 0.0);
        assert_eq!(diag.baseline, 0.3);
        assert!((base.value.unwrap() - (0.27 + 0.1 * diag.mean_shaped_reward)).abs() < 1e-12);
    }

    #[test]
    fn stale_behavior_policy_gets_clipped() {
        let (policy, reference) = models(14);
        let behavior = PolicyModel::new(tiny_config(77)).unwrap().into_frozen();
        let mut rng = seeded_rng(2);
        let rm = RewardModel::new(Alphabet::Hp2, 6, 3, 6, &mut rng).unwrap();
        let settings = PgSettings { n_samples: 128, kl_coef: 0.0, clip_eps: 0.05 };
        let mut base = MovingBaseline { value: Some(0.0), decay: 0.9 };
        let (_, diag) =
            pg_step(&policy, Some(&behavior), &reference, &rm, &settings, &mut base, &mut rng).unwrap();
        assert!(diag.clip_fraction > 0.0);
        assert!(pg_step(&policy, None, &reference, &rm, &PgSettings { n_samples: 1, ..settings }, &mut base, &mut rng).is_err());
    }
}
