//! Final-model metrics, the energy/confidence plane, the Boltzmann fit and
//! rank statistics.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::oracle::{is_foldable, EnergyOracle, FoldCriteria, FoldReport};
use crate::policy::{all_sequences_index, PolicyModel, MAX_ENUMERATION};
use crate::seqcore::{hamming_identity, Sequence};
use crate::trainer::kl_auto;

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        // a constant input carries no ordering
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Rank correlation with average-rank tie handling. A constant input
/// gives 0.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::usage(format!(
            "spearman: lengths differ ({} vs {})",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::usage("spearman needs at least two points"));
    }
    Ok(pearson(&average_ranks(xs), &average_ranks(ys)))
}

/// `exp(-mean per-token log-likelihood)` of `samples` under `model`.
pub fn perplexity(model: &PolicyModel, samples: &[Sequence]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::usage("perplexity of an empty sample"));
    }
    let per_seq: Vec<f64> = samples
        .par_iter()
        .map(|s| model.mean_token_log_prob(s))
        .collect::<Result<_>>()?;
    Ok((-per_seq.iter().sum::<f64>() / samples.len() as f64).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub seed: u64,
    pub n: usize,
    pub energy_per_res: f64,
    pub foldability: f64,
    /// Perplexity of the samples under the reference.
    pub perplexity: f64,
    /// Mean over samples of each sample's highest identity to the training set.
    pub mean_identity: f64,
    pub max_identity: f64,
    pub kl: f64,
    /// Rank correlation of policy log-probability with negated energy.
    pub spearman_energy: f64,
}

pub const RESULTS_HEADER: &str = "method,seed,energy_per_res,foldability,ppl,max_id,kl,spearman";

impl EvalReport {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.method,
            self.seed,
            self.energy_per_res,
            self.foldability,
            self.perplexity,
            self.mean_identity,
            self.kl,
            self.spearman_energy
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "method          {}", self.method)?;
        writeln!(f, "seed            {}", self.seed)?;
        writeln!(f, "samples         {}", self.n)?;
        writeln!(f, "energy/residue  {:.4}", self.energy_per_res)?;
        writeln!(f, "foldability     {:.4}", self.foldability)?;
        writeln!(f, "perplexity      {:.4}", self.perplexity)?;
        writeln!(f, "identity mean   {:.4}", self.mean_identity)?;
        writeln!(f, "identity max    {:.4}", self.max_identity)?;
        writeln!(f, "kl to reference {:.4}", self.kl)?;
        write!(f, "spearman energy {:.4}", self.spearman_energy)
    }
}

fn score_all(oracle: &dyn EnergyOracle, samples: &[Sequence]) -> Result<Vec<FoldReport>> {
    samples.par_iter().map(|s| oracle.score(s)).collect()
}

/// Scores one shared batch of `n` policy samples on every metric.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    method: &str,
    seed: u64,
    policy: &PolicyModel,
    reference: &PolicyModel,
    oracle: &dyn EnergyOracle,
    criteria: &FoldCriteria,
    train_set: &[Sequence],
    n: usize,
    rng: &mut Rng,
) -> Result<EvalReport> {
    if n == 0 {
        return Err(Error::usage("evaluation needs at least one sample"));
    }
    let samples = policy.sample(n, rng);
    let reports = score_all(oracle, &samples)?;
    let length = policy.length();
    let energy_per_res = reports.iter().map(|r| r.e_per_res()).sum::<f64>() / n as f64;
    let foldability = reports
        .iter()
        .filter(|r| is_foldable(r, length, criteria))
        .count() as f64
        / n as f64;
    let perplexity = perplexity(reference, &samples)?;
    let identities: Vec<f64> = if train_set.is_empty() {
        vec![0.0; n]
    } else {
        samples
            .par_iter()
            .map(|s| {
                let mut best = 0.0f64;
                for t in train_set {
                    best = best.max(hamming_identity(s, t)?);
                }
                Ok(best)
            })
            .collect::<Result<_>>()?
    };
    let mean_identity = identities.iter().sum::<f64>() / n as f64;
    let max_identity = identities.iter().copied().fold(0.0, f64::max);
    let kl = kl_auto(policy, reference, n, rng)?;
    let spearman_energy = if n >= 2 {
        let lp: Vec<f64> = samples
            .par_iter()
            .map(|s| policy.log_prob(s))
            .collect::<Result<_>>()?;
        let neg_e: Vec<f64> = reports.iter().map(|r| -f64::from(r.e_min)).collect();
        spearman(&lp, &neg_e)?
    } else {
        0.0
    };
    Ok(EvalReport {
        method: method.to_string(),
        seed,
        n,
        energy_per_res,
        foldability,
        perplexity,
        mean_identity,
        max_identity,
        kl,
        spearman_energy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Quadrant {
    HighConfLowEnergy,
    HighConfHighEnergy,
    LowConfLowEnergy,
    LowConfHighEnergy,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::HighConfLowEnergy,
        Quadrant::HighConfHighEnergy,
        Quadrant::LowConfLowEnergy,
        Quadrant::LowConfHighEnergy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Quadrant::HighConfLowEnergy => "high_conf_low_energy",
            Quadrant::HighConfHighEnergy => "high_conf_high_energy",
            Quadrant::LowConfLowEnergy => "low_conf_low_energy",
            Quadrant::LowConfHighEnergy => "low_conf_high_energy",
        }
    }
}

/// Median split of the plane; "high" means strictly above the median.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneAxes {
    pub energy: f64,
    pub confidence: f64,
}

impl PlaneAxes {
    pub fn classify(&self, energy_per_res: f64, confidence: f64) -> Quadrant {
        match (confidence > self.confidence, energy_per_res > self.energy) {
            (true, false) => Quadrant::HighConfLowEnergy,
            (true, true) => Quadrant::HighConfHighEnergy,
            (false, false) => Quadrant::LowConfLowEnergy,
            (false, true) => Quadrant::LowConfHighEnergy,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneRow {
    pub seq: Sequence,
    pub energy_per_res: f64,
    /// Mean per-token log-likelihood under the evaluated policy.
    pub confidence: f64,
    pub quadrant: Quadrant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub axes: PlaneAxes,
    pub rows: Vec<PlaneRow>,
}

pub const PLANE_HEADER: &str = "seq,energy_per_res,confidence,quadrant";

impl Plane {
    pub fn count(&self, q: Quadrant) -> usize {
        self.rows.iter().filter(|r| r.quadrant == q).count()
    }

    pub fn counts(&self) -> [(Quadrant, usize); 4] {
        Quadrant::ALL.map(|q| (q, self.count(q)))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(PLANE_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.seq,
                r.energy_per_res,
                r.confidence,
                r.quadrant.name()
            ));
        }
        out
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

fn plane_points(policy: &PolicyModel, oracle: &dyn EnergyOracle, n: usize, rng: &mut Rng) -> Result<Vec<(Sequence, f64, f64)>> {
    if n < 4 {
        return Err(Error::usage("the confidence plane needs at least 4 samples"));
    }
    let samples = policy.sample(n, rng);
    samples
        .into_par_iter()
        .map(|s| {
            let e = oracle.score(&s)?.e_per_res();
            let c = policy.mean_token_log_prob(&s)?;
            Ok((s, e, c))
        })
        .collect()
}

/// Axes taken from the medians of a model's own plane.
pub fn plane_axes(model: &PolicyModel, oracle: &dyn EnergyOracle, n: usize, rng: &mut Rng) -> Result<PlaneAxes> {
    let pts = plane_points(model, oracle, n, rng)?;
    let e: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let c: Vec<f64> = pts.iter().map(|p| p.2).collect();
    Ok(PlaneAxes {
        energy: median(&e),
        confidence: median(&c),
    })
}

/// Samples `n` sequences and places each on fixed axes.
pub fn energy_confidence_plane(
    policy: &PolicyModel,
    oracle: &dyn EnergyOracle,
    n: usize,
    axes: PlaneAxes,
    rng: &mut Rng,
) -> Result<Plane> {
    let rows = plane_points(policy, oracle, n, rng)?
        .into_iter()
        .map(|(seq, e, c)| PlaneRow {
            quadrant: axes.classify(e, c),
            seq,
            energy_per_res: e,
            confidence: c,
        })
        .collect();
    Ok(Plane { axes, rows })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoltzmannFit {
    pub kl: f64,
    pub spearman: f64,
}

/// Compares the policy with `p(s) ∝ exp(-E(s)/T)` over the whole space.
pub fn boltzmann_fit(policy: &PolicyModel, oracle: &dyn EnergyOracle, temperature: f64) -> Result<BoltzmannFit> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::config("eval.temperature", "must be positive"));
    }
    if policy.config().space_size() > MAX_ENUMERATION {
        return Err(Error::Capability(format!(
            "Boltzmann comparison enumerates the space; {} exceeds {MAX_ENUMERATION}",
            policy.config().space_size()
        )));
    }
    let table = policy.enumerate_distribution()?;
    let energies: Vec<f64> = (0..table.len())
        .into_par_iter()
        .map(|i| Ok(f64::from(oracle.score(&all_sequences_index(table.alphabet, table.length, i))?.e_min)))
        .collect::<Result<_>>()?;
    boltzmann_from_table(&table.log_probs, &energies, temperature)
}

/// Boltzmann comparison on an explicit table of log-probabilities and energies.
pub fn boltzmann_from_table(log_probs: &[f64], energies: &[f64], temperature: f64) -> Result<BoltzmannFit> {
    if log_probs.len() != energies.len() || log_probs.len() < 2 {
        return Err(Error::usage("Boltzmann table needs matching lengths of at least 2"));
    }
    let logits: Vec<f64> = energies.iter().map(|e| -e / temperature).collect();
    let log_pb = crate::numerics::log_softmax(&logits)?;
    let mut kl = 0.0;
    for (lp, lb) in log_probs.iter().zip(&log_pb) {
        let p = lp.exp();
        if p > 0.0 {
            kl += p * (lp - lb);
        }
    }
    let neg_e: Vec<f64> = energies.iter().map(|e| -e).collect();
    Ok(BoltzmannFit {
        kl,
        spearman: spearman(log_probs, &neg_e)?,
    })
}
