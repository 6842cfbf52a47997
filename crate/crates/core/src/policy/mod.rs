//! Autoregressive categorical policies over fixed-length sequences.
//!
//! The prompt is a fixed begin-of-sequence token; there is no end token, so
//! every sample has exactly `length` residues.

mod attention;
pub mod checkpoint;
pub(crate) mod ngram;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, ParameterSet, Rng};
use crate::seqcore::{Alphabet, Sequence};

use attention::AttnDims;
use ngram::NgramDims;

/// Largest sequence space that may be enumerated exactly.
pub const MAX_ENUMERATION: usize = 65_536;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Architecture {
    /// Window of the last `k` tokens through one hidden layer.
    Ngram { k: usize, hidden: usize },
    /// One causal self-attention block.
    Attn1 { d_model: usize, heads: usize },
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::Ngram { k: 4, hidden: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    #[serde(with = "alphabet_name")]
    pub alphabet: Alphabet,
    pub length: usize,
    pub arch: Architecture,
    pub embed_dim: usize,
    pub seed: u64,
    /// Standard deviation multiplier of the output layer at initialisation.
    pub init_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            alphabet: Alphabet::Hp2,
            length: 12,
            arch: Architecture::default(),
            embed_dim: 8,
            seed: 0,
            init_scale: 0.1,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.length < 2 {
            return Err(Error::config("model.length", "must be at least 2"));
        }
        if self.embed_dim < 1 {
            return Err(Error::config("model.embed_dim", "must be at least 1"));
        }
        match self.arch {
            Architecture::Ngram { k, hidden } => {
                if k < 1 {
                    return Err(Error::config("model.arch.k", "must be at least 1"));
                }
                if hidden < 1 {
                    return Err(Error::config("model.arch.hidden", "must be at least 1"));
                }
            }
            Architecture::Attn1 { d_model, heads } => {
                if d_model < 1 || heads < 1 || d_model % heads != 0 {
                    return Err(Error::config(
                        "model.arch",
                        "d_model must be a positive multiple of heads",
                    ));
                }
            }
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::config("model.init_scale", "must be finite and >= 0"));
        }
        Ok(())
    }

    pub(crate) fn ngram_dims(&self) -> Option<NgramDims> {
        match self.arch {
            Architecture::Ngram { k, hidden } => Some(NgramDims {
                vocab: self.alphabet.size(),
                k,
                embed: self.embed_dim,
                hidden,
                out: self.alphabet.size(),
            }),
            Architecture::Attn1 { .. } => None,
        }
    }

    fn attn_dims(&self) -> Option<AttnDims> {
        match self.arch {
            Architecture::Attn1 { d_model, heads } => Some(AttnDims {
                vocab: self.alphabet.size(),
                length: self.length,
                d_model,
                heads,
            }),
            Architecture::Ngram { .. } => None,
        }
    }

    /// Size of the full sequence space, saturating.
    pub fn space_size(&self) -> usize {
        let a = self.alphabet.size();
        (0..self.length).fold(1usize, |acc, _| acc.saturating_mul(a))
    }
}

pub(crate) mod alphabet_name {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::seqcore::Alphabet;

    pub fn serialize<S: Serializer>(a: &Alphabet, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(a.name())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Alphabet, D::Error> {
        let name = String::deserialize(d)?;
        Alphabet::from_name(&name)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown alphabet {name:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Trainable,
    FrozenReference,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Trainable => "trainable",
            Role::FrozenReference => "frozen",
        }
    }
}

/// π_θ or π_ref: configuration, parameters and role.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    config: PolicyConfig,
    params: ParameterSet,
    role: Role,
}

impl PolicyModel {
    /// Randomly initialised trainable model, seeded from `config.seed`.
    pub fn new(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(config.seed);
        let params = Self::init(&config, Some((&mut rng, config.init_scale)))?;
        Ok(PolicyModel {
            config,
            params,
            role: Role::Trainable,
        })
    }

    /// All-zero parameters: every next-token distribution is uniform.
    pub fn zeros(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        let params = Self::init(&config, None)?;
        Ok(PolicyModel {
            config,
            params,
            role: Role::Trainable,
        })
    }

    fn init(config: &PolicyConfig, rng: Option<(&mut Rng, f64)>) -> Result<ParameterSet> {
        if let Some(d) = config.ngram_dims() {
            ngram::init_params(d, rng)
        } else {
            attention::init_params(config.attn_dims().expect("attn arch"), rng)
        }
    }

    /// Rebuilds a model from stored parameters, checking the layout.
    pub fn from_parts(config: PolicyConfig, params: ParameterSet, role: Role) -> Result<Self> {
        let template = Self::zeros(config)?;
        if !template.params.same_layout(&params) {
            return Err(Error::Validation(
                "parameter layout does not match the model config".into(),
            ));
        }
        if !params.is_finite() {
            return Err(Error::Numeric("parameters contain non-finite values".into()));
        }
        Ok(PolicyModel {
            config,
            params,
            role,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn alphabet(&self) -> Alphabet {
        self.config.alphabet
    }

    pub fn length(&self) -> usize {
        self.config.length
    }

    /// Freezes this model as a reference.
    pub fn into_frozen(mut self) -> Self {
        self.role = Role::FrozenReference;
        self
    }

    /// Trainable copy sharing the current parameters.
    pub fn trainable_copy(&self) -> Self {
        PolicyModel {
            config: self.config,
            params: self.params.clone(),
            role: Role::Trainable,
        }
    }

    /// Same model with parameters replaced (used for perturbation and finite differences).
    pub fn with_params(&self, params: ParameterSet) -> Result<Self> {
        if !self.params.same_layout(&params) {
            return Err(Error::usage("with_params: layout mismatch"));
        }
        Ok(PolicyModel {
            config: self.config,
            params,
            role: self.role,
        })
    }

    /// Mutable access for the optimiser; refused on a frozen reference.
    pub fn params_mut(&mut self) -> Result<&mut ParameterSet> {
        match self.role {
            Role::Trainable => Ok(&mut self.params),
            Role::FrozenReference => Err(Error::usage("frozen reference parameters are read-only")),
        }
    }

    fn check(&self, s: &Sequence) -> Result<()> {
        if s.alphabet() != self.config.alphabet {
            return Err(Error::usage(format!(
                "sequence alphabet {} does not match model alphabet {}",
                s.alphabet(),
                self.config.alphabet
            )));
        }
        if s.len() != self.config.length {
            return Err(Error::usage(format!(
                "sequence length {} does not match model length {}",
                s.len(),
                self.config.length
            )));
        }
        Ok(())
    }

    /// `log p(token_t | BOS, tokens_<t)` for every position.
    pub fn token_log_probs(&self, s: &Sequence) -> Result<Vec<f64>> {
        self.check(s)?;
        Ok(self.token_log_probs_unchecked(s.tokens()))
    }

    fn token_log_probs_unchecked(&self, tokens: &[u8]) -> Vec<f64> {
        if let Some(d) = self.config.ngram_dims() {
            ngram::token_log_probs(&self.params, &d, tokens)
        } else {
            attention::token_log_probs(&self.params, &self.config.attn_dims().unwrap(), tokens)
        }
    }

    pub fn log_prob(&self, s: &Sequence) -> Result<f64> {
        Ok(self.token_log_probs(s)?.iter().sum())
    }

    /// Mean per-token log-likelihood (length-normalised confidence).
    pub fn mean_token_log_prob(&self, s: &Sequence) -> Result<f64> {
        Ok(self.log_prob(s)? / s.len() as f64)
    }

    /// Next-token log-probabilities after `prefix` (shorter than `length`).
    pub fn next_log_probs(&self, prefix: &[u8]) -> Vec<f64> {
        debug_assert!(prefix.len() < self.config.length);
        if let Some(d) = self.config.ngram_dims() {
            ngram::next_log_probs(&self.params, &d, prefix)
        } else {
            attention::next_log_probs(&self.params, &self.config.attn_dims().unwrap(), prefix)
        }
    }

    /// `n` independent ancestral samples.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<Sequence> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    fn sample_one(&self, rng: &mut Rng) -> Sequence {
        let mut tokens = Vec::with_capacity(self.config.length);
        for _ in 0..self.config.length {
            let lp = self.next_log_probs(&tokens);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = lp.len() - 1;
            for (c, l) in lp.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    pick = c;
                    break;
                }
            }
            tokens.push(pick as u8);
        }
        Sequence::new(self.config.alphabet, tokens).expect("sampled tokens are valid")
    }

    /// Adds `coeff * ∇θ log π(s)` into `grads`; returns `log π(s)`.
    pub fn accumulate_grad_log_prob(
        &self,
        s: &Sequence,
        coeff: f64,
        grads: &mut ParameterSet,
    ) -> Result<f64> {
        if self.role == Role::FrozenReference {
            return Err(Error::usage("gradients of a frozen reference are not available"));
        }
        self.check(s)?;
        if !grads.same_layout(&self.params) {
            return Err(Error::usage("gradient buffer layout mismatch"));
        }
        Ok(if let Some(d) = self.config.ngram_dims() {
            ngram::accumulate_grad(&self.params, &d, s.tokens(), coeff, grads)
        } else {
            attention::accumulate_grad(
                &self.params,
                &self.config.attn_dims().unwrap(),
                s.tokens(),
                coeff,
                grads,
            )
        })
    }

    /// Exact ∇θ log π(s).
    pub fn grad_log_prob(&self, s: &Sequence) -> Result<ParameterSet> {
        let mut g = self.params.zeros_like();
        self.accumulate_grad_log_prob(s, 1.0, &mut g)?;
        Ok(g)
    }

    /// Full probability table over every sequence of the model's length.
    pub fn enumerate_distribution(&self) -> Result<DistributionTable> {
        let size = self.config.space_size();
        if size > MAX_ENUMERATION {
            return Err(Error::Capability(format!(
                "sequence space of {size} exceeds the enumeration limit of {MAX_ENUMERATION}"
            )));
        }
        let mut log_probs = Vec::with_capacity(size);
        let mut prefix = Vec::with_capacity(self.config.length);
        self.enumerate_into(&mut prefix, 0.0, &mut log_probs);
        Ok(DistributionTable {
            alphabet: self.config.alphabet,
            length: self.config.length,
            log_probs,
        })
    }

    fn enumerate_into(&self, prefix: &mut Vec<u8>, acc: f64, out: &mut Vec<f64>) {
        if prefix.len() == self.config.length {
            out.push(acc);
            return;
        }
        let lp = self.next_log_probs(prefix);
        for (c, l) in lp.iter().enumerate() {
            prefix.push(c as u8);
            self.enumerate_into(prefix, acc + l, out);
            prefix.pop();
        }
    }
}

/// Log-probabilities of every sequence, in lexicographic (base-|A|) order.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionTable {
    pub alphabet: Alphabet,
    pub length: usize,
    pub log_probs: Vec<f64>,
}

impl DistributionTable {
    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    pub fn sequence(&self, index: usize) -> Sequence {
        all_sequences_index(self.alphabet, self.length, index)
    }

    pub fn probs(&self) -> impl Iterator<Item = f64> + '_ {
        self.log_probs.iter().map(|l| l.exp())
    }

    pub fn total(&self) -> f64 {
        self.probs().sum()
    }
}

/// Sequence at `index` in base-|A| order, first residue most significant.
pub fn all_sequences_index(alphabet: Alphabet, length: usize, mut index: usize) -> Sequence {
    let a = alphabet.size();
    let mut tokens = vec![0u8; length];
    for t in (0..length).rev() {
        tokens[t] = (index % a) as u8;
        index /= a;
    }
    Sequence::new(alphabet, tokens).expect("valid index")
}

/// Every sequence of the given length, in lexicographic order.
pub fn all_sequences(alphabet: Alphabet, length: usize) -> Result<Vec<Sequence>> {
    let size = (0..length).fold(1usize, |acc, _| acc.saturating_mul(alphabet.size()));
    if size > MAX_ENUMERATION {
        return Err(Error::Capability(format!(
            "sequence space of {size} exceeds the enumeration limit of {MAX_ENUMERATION}"
        )));
    }
    Ok((0..size)
        .map(|i| all_sequences_index(alphabet, length, i))
        .collect())
}
