//! Fixed-budget training loops for every objective, step-wise metric logging
//! and reference construction.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{child_seed, seeded_rng, Adam, AdamConfig, Rng};
use crate::objectives::{
    bt_reward_train, default_linear_scale, dpo_loss, ipo_loss, kto_loss, pg_step, physio_loss,
    sft_loss, LossOutput, MovingBaseline, PairBatch, PgSettings, PhysioParams, PsiKind,
    RewardModel,
};
use crate::oracle::{is_foldable, EnergyOracle, FoldCriteria};
use crate::policy::{PolicyModel, MAX_ENUMERATION};
use crate::prefdata::PreferencePair;
use crate::seqcore::Sequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Objective {
    Sft,
    Dpo,
    Ipo,
    Kto,
    Physio,
    PhysioLinear,
    Pg,
}

impl Objective {
    pub const ALL: [Objective; 7] = [
        Objective::Sft,
        Objective::Dpo,
        Objective::Ipo,
        Objective::Kto,
        Objective::Physio,
        Objective::PhysioLinear,
        Objective::Pg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Sft => "sft",
            Objective::Dpo => "dpo",
            Objective::Ipo => "ipo",
            Objective::Kto => "kto",
            Objective::Physio => "physio",
            Objective::PhysioLinear => "physio-linear",
            Objective::Pg => "pg",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|o| o.name() == name).ok_or_else(|| {
            let valid: Vec<&str> = Self::ALL.iter().map(|o| o.name()).collect();
            Error::usage(format!(
                "unknown objective {name:?}; valid names: {}",
                valid.join(", ")
            ))
        })
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Pair weighting selected by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsiName {
    Sigmoid,
    Linear,
    Const1,
}

impl PsiName {
    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(PsiName::Sigmoid),
            "linear" => Ok(PsiName::Linear),
            "const1" => Ok(PsiName::Const1),
            _ => Err(Error::usage(format!(
                "unknown psi {s:?}; valid: sigmoid, linear, const1"
            ))),
        }
    }
}

/// Objective name and hyperparameters. Unset `mu`/`tau` follow the oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub name: String,
    pub psi: PsiName,
    pub beta: f64,
    pub lambda: f64,
    pub mu: Option<f64>,
    pub tau: Option<f64>,
    pub linear_scale: Option<f64>,
    pub tau_ipo: f64,
    pub kto_lambda_w: f64,
    pub kto_lambda_l: f64,
    pub pg_kl_coef: f64,
    pub pg_clip_eps: f64,
    pub pg_samples: usize,
    pub pg_sync_every: usize,
    pub rm_steps: usize,
    pub rm_batch: usize,
    pub rm_lr: f64,
    pub rm_hidden: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            name: "physio".into(),
            psi: PsiName::Sigmoid,
            beta: 0.1,
            lambda: 1.0,
            mu: None,
            tau: None,
            linear_scale: None,
            tau_ipo: 0.1,
            kto_lambda_w: 1.0,
            kto_lambda_l: 1.0,
            pg_kl_coef: 0.05,
            pg_clip_eps: 0.2,
            pg_samples: 64,
            pg_sync_every: 4,
            rm_steps: 1000,
            rm_batch: 64,
            rm_lr: 3e-3,
            rm_hidden: 32,
        }
    }
}

impl ObjectiveConfig {
    pub fn objective(&self) -> Result<Objective> {
        Objective::from_name(&self.name)
    }

    /// Weighting parameters with unset midpoint/sharpness filled per oracle.
    pub fn physio_params(&self, oracle_name: &str) -> PhysioParams {
        let base = if oracle_name == "lattice" {
            PhysioParams::lattice()
        } else {
            PhysioParams::force_field()
        };
        PhysioParams {
            beta: self.beta,
            lambda: self.lambda,
            mu: self.mu.unwrap_or(base.mu),
            tau: self.tau.unwrap_or(base.tau),
        }
    }

    /// Weighting used by the physio objectives (`physio-linear` forces linear).
    pub fn psi_kind(&self, objective: Objective, p: &PhysioParams) -> PsiKind {
        let name = if objective == Objective::PhysioLinear {
            PsiName::Linear
        } else {
            self.psi
        };
        match name {
            PsiName::Sigmoid => PsiKind::Sigmoid,
            PsiName::Const1 => PsiKind::Const1,
            PsiName::Linear => PsiKind::Linear {
                scale: self.linear_scale.unwrap_or_else(|| default_linear_scale(p)),
            },
        }
    }

    pub fn validate(&self, oracle_name: &str) -> Result<()> {
        self.objective()
            .map_err(|e| Error::config("objective.name", e.to_string()))?;
        self.physio_params(oracle_name).validate()?;
        let checks: [(&str, bool); 8] = [
            ("objective.linear_scale", self.linear_scale.is_none_or(|s| s > 0.0)),
            ("objective.tau_ipo", self.tau_ipo > 0.0),
            ("objective.kto_lambda_w", self.kto_lambda_w >= 0.0),
            ("objective.kto_lambda_l", self.kto_lambda_l >= 0.0),
            ("objective.pg_kl_coef", self.pg_kl_coef >= 0.0),
            ("objective.pg_clip_eps", self.pg_clip_eps > 0.0),
            ("objective.pg_samples", self.pg_samples >= 2),
            ("objective.pg_sync_every", self.pg_sync_every >= 1),
        ];
        for (key, ok) in checks {
            if !ok {
                return Err(Error::config(key, "out of range"));
            }
        }
        if self.rm_batch < 1 || self.rm_hidden < 1 || self.rm_lr <= 0.0 {
            return Err(Error::config("objective.rm_*", "reward model settings out of range"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch: usize,
    pub eval_every: usize,
    /// Fresh samples drawn at each logged step.
    pub metric_samples: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            steps: 5000,
            batch: 64,
            eval_every: 250,
            metric_samples: 256,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 1 {
            return Err(Error::config("train.batch", "must be at least 1"));
        }
        if self.eval_every < 1 {
            return Err(Error::config("train.eval_every", "must be at least 1"));
        }
        if self.metric_samples < 1 {
            return Err(Error::config("train.metric_samples", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KlMode {
    Exact,
    MonteCarlo(usize),
}

/// `KL(π_θ ‖ π_ref)` by enumeration or by sampling from the policy.
pub fn kl_to_ref(policy: &PolicyModel, reference: &PolicyModel, mode: KlMode, rng: Option<&mut Rng>) -> Result<f64> {
    match mode {
        KlMode::Exact => {
            let table = policy.enumerate_distribution()?;
            let seqs: Vec<Sequence> = (0..table.len()).map(|i| table.sequence(i)).collect();
            let ref_lp: Vec<f64> = seqs
                .par_iter()
                .map(|s| reference.log_prob(s))
                .collect::<Result<_>>()?;
            let mut kl = 0.0;
            for (lp, lr) in table.log_probs.iter().zip(&ref_lp) {
                kl += lp.exp() * (lp - lr);
            }
            Ok(kl)
        }
        KlMode::MonteCarlo(n) => {
            let rng = rng.ok_or_else(|| Error::usage("sampled KL needs a random generator"))?;
            if n == 0 {
                return Err(Error::usage("sampled KL needs at least one sample"));
            }
            let samples = policy.sample(n, rng);
            let terms: Vec<f64> = samples
                .par_iter()
                .map(|s| Ok(policy.log_prob(s)? - reference.log_prob(s)?))
                .collect::<Result<_>>()?;
            Ok(terms.iter().sum::<f64>() / n as f64)
        }
    }
}

/// Exact KL when the space is enumerable, otherwise a sampled estimate.
pub fn kl_auto(policy: &PolicyModel, reference: &PolicyModel, n: usize, rng: &mut Rng) -> Result<f64> {
    if policy.config().space_size() <= MAX_ENUMERATION {
        kl_to_ref(policy, reference, KlMode::Exact, None)
    } else {
        kl_to_ref(policy, reference, KlMode::MonteCarlo(n), Some(rng))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub energy_per_res: f64,
    pub kl: f64,
    pub foldability: f64,
    pub seconds: f64,
}

pub const TRAIN_LOG_HEADER: &str = "step,loss,energy_per_res,kl,foldability,seconds";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.loss, self.energy_per_res, self.kl, self.foldability, self.seconds
        )
    }
}

/// Appends rows to a CSV file, flushing after each one.
struct LogSink {
    out: BufWriter<File>,
}

impl LogSink {
    fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut sink = LogSink {
            out: BufWriter::new(file),
        };
        sink.line(TRAIN_LOG_HEADER, path)?;
        Ok(sink)
    }

    fn line(&mut self, s: &str, path: &Path) -> Result<()> {
        writeln!(self.out, "{s}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Mean energy per residue and foldable fraction of fresh policy samples.
pub fn sample_metrics(
    policy: &PolicyModel,
    oracle: &dyn EnergyOracle,
    criteria: &FoldCriteria,
    n: usize,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    let samples = policy.sample(n, rng);
    let reports: Vec<_> = samples
        .par_iter()
        .map(|s| oracle.score(s))
        .collect::<Result<_>>()?;
    let energy = reports.iter().map(|r| r.e_per_res()).sum::<f64>() / n as f64;
    let fold = reports
        .iter()
        .filter(|r| is_foldable(r, policy.length(), criteria))
        .count() as f64
        / n as f64;
    Ok((energy, fold))
}

/// Everything a training run needs besides the trainable policy.
pub struct TrainContext<'a> {
    pub reference: &'a PolicyModel,
    pub pairs: &'a [PreferencePair],
    pub oracle: &'a dyn EnergyOracle,
    pub criteria: FoldCriteria,
    pub objective: &'a ObjectiveConfig,
    pub optimizer: AdamConfig,
    pub settings: TrainSettings,
    pub seed: u64,
    /// Record elapsed seconds in the log; zero otherwise.
    pub wall_clock: bool,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub policy: PolicyModel,
    pub log: Vec<LogRow>,
}

/// Runs `settings.steps` optimizer updates on `policy`.
///
/// Rows are logged after every `eval_every`-th update and after the last
/// one; each carries that update's loss and metrics of the updated policy.
/// When `log_path` is given the CSV is written as rows are produced.
pub fn train(mut policy: PolicyModel, ctx: &TrainContext<'_>, log_path: Option<&Path>) -> Result<TrainOutcome> {
    ctx.settings.validate()?;
    ctx.objective.validate(ctx.oracle.name())?;
    let objective = ctx.objective.objective()?;
    if ctx.pairs.is_empty() {
        return Err(Error::EmptyDataset("training split has no pairs".into()));
    }
    let mut sink = match log_path {
        Some(p) => Some(LogSink::create(p)?),
        None => None,
    };
    let started = Instant::now();
    let mut opt = Adam::new(ctx.optimizer, policy.params());
    let mut batch_rng = seeded_rng(child_seed(ctx.seed, 1));
    let mut log = Vec::new();

    let physio = ctx.objective.physio_params(ctx.oracle.name());
    let psi_kind = ctx.objective.psi_kind(objective, &physio);

    // reference log-probs are fixed for the whole run
    let ref_lp: Vec<(f64, f64)> = if objective == Objective::Sft || objective == Objective::Pg {
        Vec::new()
    } else {
        ctx.pairs
            .par_iter()
            .map(|p| Ok((ctx.reference.log_prob(&p.y_w)?, ctx.reference.log_prob(&p.y_l)?)))
            .collect::<Result<_>>()?
    };

    let mut pg_state = if objective == Objective::Pg {
        let mut rm_rng = seeded_rng(child_seed(ctx.seed, 3));
        let mut rm = RewardModel::new(
            policy.alphabet(),
            policy.length(),
            4,
            ctx.objective.rm_hidden,
            &mut rm_rng,
        )?;
        let rm_adam = AdamConfig {
            lr: ctx.objective.rm_lr,
            ..AdamConfig::default()
        };
        bt_reward_train(ctx.pairs, &mut rm, ctx.objective.rm_steps, ctx.objective.rm_batch, rm_adam, &mut rm_rng)?;
        Some((rm, MovingBaseline::default(), policy.clone().into_frozen()))
    } else {
        None
    };

    let mut order: Vec<usize> = (0..ctx.pairs.len()).collect();
    let mut cursor = order.len();
    let batch = ctx.settings.batch.min(ctx.pairs.len());

    for step in 1..=ctx.settings.steps {
        let out: LossOutput = if let Some((rm, baseline, behavior)) = pg_state.as_mut() {
            if (step - 1) % ctx.objective.pg_sync_every == 0 {
                *behavior = policy.clone().into_frozen();
            }
            let settings = PgSettings {
                n_samples: ctx.objective.pg_samples,
                kl_coef: ctx.objective.pg_kl_coef,
                clip_eps: ctx.objective.pg_clip_eps,
            };
            pg_step(&policy, Some(behavior), ctx.reference, rm, &settings, baseline, &mut batch_rng)?.0
        } else {
            let mut idx = Vec::with_capacity(batch);
            while idx.len() < batch {
                if cursor == order.len() {
                    order.shuffle(&mut batch_rng);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            let pairs: Vec<PreferencePair> = idx.iter().map(|&i| ctx.pairs[i].clone()).collect();
            if objective == Objective::Sft {
                let winners: Vec<Sequence> = pairs.into_iter().map(|p| p.y_w).collect();
                sft_loss(&policy, &winners)?
            } else {
                let ref_w = idx.iter().map(|&i| ref_lp[i].0).collect();
                let ref_l = idx.iter().map(|&i| ref_lp[i].1).collect();
                let b = PairBatch::with_reference(pairs, ref_w, ref_l, &policy)?;
                match objective {
                    Objective::Dpo => dpo_loss(&policy, &b, physio.beta)?,
                    Objective::Ipo => ipo_loss(&policy, &b, ctx.objective.tau_ipo)?,
                    Objective::Kto => kto_loss(
                        &policy,
                        &b,
                        physio.beta,
                        ctx.objective.kto_lambda_w,
                        ctx.objective.kto_lambda_l,
                    )?,
                    _ => physio_loss(&policy, &b, &physio, psi_kind)?,
                }
            }
        };
        if !out.loss.is_finite() || !out.grad.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss: out.loss });
        }
        opt.step(policy.params_mut()?, &out.grad)?;
        if !policy.params().is_finite() {
            return Err(Error::NonFiniteLoss { step, loss: out.loss });
        }

        if step % ctx.settings.eval_every == 0 || step == ctx.settings.steps {
            let mut metric_rng = seeded_rng(child_seed(ctx.seed, 1_000_000 + step as u64));
            let (energy, fold) = sample_metrics(
                &policy,
                ctx.oracle,
                &ctx.criteria,
                ctx.settings.metric_samples,
                &mut metric_rng,
            )?;
            let kl = kl_auto(&policy, ctx.reference, ctx.settings.metric_samples, &mut metric_rng)?;
            let row = LogRow {
                step,
                loss: out.loss,
                energy_per_res: energy,
                kl,
                foldability: fold,
                seconds: if ctx.wall_clock {
                    started.elapsed().as_secs_f64()
                } else {
                    0.0
                },
            };
            if ![row.loss, row.energy_per_res, row.kl, row.foldability].iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteLoss { step, loss: row.loss });
            }
            if let (Some(s), Some(p)) = (sink.as_mut(), log_path) {
                s.line(&row.csv(), p)?;
            }
            log.push(row);
        }
    }
    Ok(TrainOutcome { policy, log })
}

/// Maximum-likelihood fit of `policy` to `corpus` with minibatch Adam.
pub fn fit_likelihood(
    policy: &mut PolicyModel,
    corpus: &[Sequence],
    steps: usize,
    batch: usize,
    adam: AdamConfig,
    rng: &mut Rng,
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyDataset("empty likelihood corpus".into()));
    }
    let batch = batch.clamp(1, corpus.len());
    let mut opt = Adam::new(adam, policy.params());
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut last = f64::NAN;
    for step in 1..=steps {
        let mut chunk = Vec::with_capacity(batch);
        while chunk.len() < batch {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            chunk.push(corpus[order[cursor]].clone());
            cursor += 1;
        }
        let out = sft_loss(policy, &chunk)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss: out.loss });
        }
        opt.step(policy.params_mut()?, &out.grad)?;
        last = out.loss;
    }
    Ok(last)
}
