//! Preference-pair construction: generate, fold, label, mine hard negatives,
//! pair by energy gap, split by identity and persist.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::oracle::{is_foldable, EnergyOracle, FoldCriteria, FoldReport};
use crate::policy::PolicyModel;
use crate::seqcore::{hamming_identity, Alphabet, Sequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Stable,
    Unstable,
    HardNegative,
}

/// A generated sequence with its oracle report and reference confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSequence {
    pub seq: Sequence,
    pub report: FoldReport,
    /// Mean per-token log-likelihood under the reference model.
    pub confidence: f64,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    MaxGap,
    Random,
}

impl Pairing {
    pub fn name(self) -> &'static str {
        match self {
            Pairing::MaxGap => "max_gap",
            Pairing::Random => "random",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "max_gap" => Some(Pairing::MaxGap),
            "random" => Some(Pairing::Random),
            _ => None,
        }
    }
}

impl fmt::Display for Pairing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub y_w: Sequence,
    pub y_l: Sequence,
    pub e_w: i32,
    pub e_l: i32,
    pub delta_e: f64,
    pub pairing: Pairing,
}

impl PreferencePair {
    pub fn new(y_w: Sequence, y_l: Sequence, e_w: i32, e_l: i32, pairing: Pairing) -> Self {
        PreferencePair {
            y_w,
            y_l,
            e_w,
            e_l,
            delta_e: gap(e_w, e_l),
            pairing,
        }
    }
}

fn gap(e_w: i32, e_l: i32) -> f64 {
    f64::from((e_l - e_w).max(0))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<PreferencePair>,
    pub val: Vec<PreferencePair>,
    pub test: Vec<PreferencePair>,
    pub threshold: f64,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Distinct winners and losers of the training split, sorted.
    pub fn train_sequences(&self) -> Vec<Sequence> {
        let mut set: Vec<Sequence> = self
            .train
            .iter()
            .flat_map(|p| [p.y_w.clone(), p.y_l.clone()])
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        set.sort();
        set
    }
}

/// Samples `n` distinct sequences from the reference, folds and labels them.
///
/// Sampling continues past duplicates until `n` distinct sequences are seen,
/// giving up after `100 * n` draws. Entries keep first-seen order.
pub fn generate_fold_score(
    reference: &PolicyModel,
    oracle: &dyn EnergyOracle,
    n: usize,
    criteria: &FoldCriteria,
    rng: &mut Rng,
) -> Result<Vec<ScoredSequence>> {
    if n == 0 {
        return Err(Error::usage("pool size must be at least 1"));
    }
    if n > reference.config().space_size() {
        return Err(Error::usage(format!(
            "pool size {n} exceeds the {} distinct sequences of this length",
            reference.config().space_size()
        )));
    }
    let mut seen = HashSet::new();
    let mut unique = Vec::with_capacity(n);
    let max_draws = n.saturating_mul(100);
    let mut draws = 0;
    while unique.len() < n {
        if draws >= max_draws {
            return Err(Error::Capability(format!(
                "only {} distinct sequences after {max_draws} reference samples",
                unique.len()
            )));
        }
        let s = reference.sample(1, rng).pop().expect("one sample");
        draws += 1;
        if seen.insert(s.clone()) {
            unique.push(s);
        }
    }
    score_sequences(reference, oracle, unique, criteria)
}

/// Folds and labels given sequences (stable iff foldable).
pub fn score_sequences(
    reference: &PolicyModel,
    oracle: &dyn EnergyOracle,
    seqs: Vec<Sequence>,
    criteria: &FoldCriteria,
) -> Result<Vec<ScoredSequence>> {
    seqs.into_par_iter()
        .map(|seq| {
            let report = oracle.score(&seq)?;
            let confidence = reference.mean_token_log_prob(&seq)?;
            let label = if is_foldable(&report, seq.len(), criteria) {
                Label::Stable
            } else {
                Label::Unstable
            };
            Ok(ScoredSequence {
                seq,
                report,
                confidence,
                label,
            })
        })
        .collect()
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Relabels unfoldable entries at or above the `q_conf` confidence quantile
/// as hard negatives and returns them.
pub fn mine_hard_negatives(pool: &mut [ScoredSequence], q_conf: f64) -> Vec<ScoredSequence> {
    if pool.is_empty() {
        return Vec::new();
    }
    let confidences: Vec<f64> = pool.iter().map(|e| e.confidence).collect();
    let cut = quantile(&confidences, q_conf);
    let mut out = Vec::new();
    for e in pool.iter_mut() {
        if e.label != Label::Stable && e.confidence >= cut {
            e.label = Label::HardNegative;
            out.push(e.clone());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairingOptions {
    /// Draw max-gap losers from hard negatives before other unstable entries.
    pub prefer_hard: bool,
    /// Keep pairs whose energy gap is zero.
    pub keep_zero_gap: bool,
}

impl Default for PairingOptions {
    fn default() -> Self {
        PairingOptions {
            prefer_hard: true,
            keep_zero_gap: false,
        }
    }
}

/// Forms up to `m` distinct (winner, loser) pairs from a labelled pool.
///
/// `MaxGap` works in rounds. Winners go most-stable first; each takes the
/// unused loser with the best (tier, gap, sequence) key, where hard negatives
/// form tier 0 when `prefer_hard` is set. A loser is used once per round.
/// `Random` draws winners and losers uniformly.
pub fn build_pairs(
    pool: &[ScoredSequence],
    strategy: Pairing,
    m: usize,
    opts: PairingOptions,
    rng: &mut Rng,
) -> Result<Vec<PreferencePair>> {
    let mut winners: Vec<&ScoredSequence> =
        pool.iter().filter(|e| e.label == Label::Stable).collect();
    let mut losers: Vec<&ScoredSequence> =
        pool.iter().filter(|e| e.label != Label::Stable).collect();
    if winners.is_empty() || losers.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "pool has {} stable and {} non-stable entries; need at least one of each",
            winners.len(),
            losers.len()
        )));
    }
    winners.sort_by(|a, b| {
        a.report
            .e_min
            .cmp(&b.report.e_min)
            .then_with(|| a.seq.cmp(&b.seq))
    });
    losers.sort_by(|a, b| a.seq.cmp(&b.seq));
    let valid = |w: &ScoredSequence, l: &ScoredSequence| {
        if opts.keep_zero_gap {
            w.report.e_min <= l.report.e_min
        } else {
            w.report.e_min < l.report.e_min
        }
    };
    let make = |w: &ScoredSequence, l: &ScoredSequence| {
        PreferencePair::new(
            w.seq.clone(),
            l.seq.clone(),
            w.report.e_min,
            l.report.e_min,
            strategy,
        )
    };

    let mut used: HashSet<(usize, usize)> = HashSet::new();
    let mut pairs = Vec::with_capacity(m);
    match strategy {
        Pairing::MaxGap => {
            let tier = |l: &ScoredSequence| {
                if opts.prefer_hard && l.label == Label::HardNegative {
                    0
                } else {
                    1
                }
            };
            while pairs.len() < m {
                let mut taken = vec![false; losers.len()];
                let before = pairs.len();
                for (wi, w) in winners.iter().enumerate() {
                    if pairs.len() == m {
                        break;
                    }
                    let mut best: Option<(usize, (i32, i32))> = None;
                    for (li, l) in losers.iter().enumerate() {
                        if taken[li] || used.contains(&(wi, li)) || !valid(w, l) {
                            continue;
                        }
                        // losers are sorted, so the first index wins ties
                        let key = (tier(l), -(l.report.e_min - w.report.e_min));
                        if best.is_none_or(|(_, k)| key < k) {
                            best = Some((li, key));
                        }
                    }
                    if let Some((li, _)) = best {
                        taken[li] = true;
                        used.insert((wi, li));
                        pairs.push(make(w, losers[li]));
                    }
                }
                if pairs.len() == before {
                    break;
                }
            }
        }
        Pairing::Random => {
            let max_attempts = m.saturating_mul(200).max(1000);
            let mut attempts = 0;
            while pairs.len() < m && attempts < max_attempts {
                attempts += 1;
                let wi = rng.random_range(0..winners.len());
                let li = rng.random_range(0..losers.len());
                if !valid(winners[wi], losers[li]) || !used.insert((wi, li)) {
                    continue;
                }
                pairs.push(make(winners[wi], losers[li]));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(
            "no winner/loser combination has a positive energy gap".into(),
        ));
    }
    Ok(pairs)
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Single-linkage components over `seqs`: two sequences are linked when
/// their identity is at least `threshold`. Returns a component id per item.
fn identity_components(seqs: &[Sequence], threshold: f64) -> Result<Vec<usize>> {
    let n = seqs.len();
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in i + 1..n {
            if hamming_identity(&seqs[i], &seqs[j])? >= threshold {
                uf.union(i, j);
            }
        }
    }
    Ok((0..n).map(|i| uf.find(i)).collect())
}

fn check_split_args(threshold: f64, fractions: [f64; 3]) -> Result<()> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::config("data.identity_threshold", "must lie in (0, 1]"));
    }
    if fractions.iter().any(|f| *f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(
            "data.fractions",
            "must be nonnegative and sum to 1",
        ));
    }
    Ok(())
}

/// Assigns whole clusters (given as item lists) to train/val/test.
///
/// Clusters are shuffled, then stably sorted largest first, and each goes to
/// the split furthest below its target size.
fn assign_clusters(
    mut clusters: Vec<Vec<usize>>,
    total: usize,
    fractions: [f64; 3],
    rng: &mut Rng,
) -> Result<[Vec<usize>; 3]> {
    let nonzero_targets = fractions.iter().filter(|&&f| f > 0.0).count();
    if clusters.len() == 1 && nonzero_targets > 1 {
        return Err(Error::DegenerateSplit {
            largest: clusters[0].len(),
            total,
        });
    }
    clusters.shuffle(rng);
    clusters.sort_by_key(|c| std::cmp::Reverse(c.len()));
    let mut out: [Vec<usize>; 3] = Default::default();
    for c in clusters {
        let mut pick = 0;
        let mut best = f64::NEG_INFINITY;
        for (j, f) in fractions.iter().enumerate() {
            if *f == 0.0 {
                continue;
            }
            let deficit = f * total as f64 - out[j].len() as f64;
            if deficit > best {
                best = deficit;
                pick = j;
            }
        }
        out[pick].extend(c);
    }
    for part in &mut out {
        part.sort_unstable();
    }
    Ok(out)
}

fn group(ids: &[usize]) -> Vec<Vec<usize>> {
    let mut by_root: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut index: HashMap<usize, usize> = HashMap::new();
    for (item, &root) in ids.iter().enumerate() {
        let slot = *index.entry(root).or_insert_with(|| {
            by_root.push((root, Vec::new()));
            by_root.len() - 1
        });
        by_root[slot].1.push(item);
    }
    by_root.into_iter().map(|(_, v)| v).collect()
}

/// Splits existing pairs so that no val/test sequence reaches `threshold`
/// identity with any training sequence.
///
/// Pairs are clustered by single linkage over their member sequences (a
/// shared sequence always links), and whole clusters are assigned to splits.
pub fn split_by_identity(
    pairs: &[PreferencePair],
    threshold: f64,
    fractions: [f64; 3],
    rng: &mut Rng,
) -> Result<DatasetSplit> {
    check_split_args(threshold, fractions)?;
    if pairs.is_empty() {
        return Ok(DatasetSplit {
            threshold,
            ..DatasetSplit::default()
        });
    }
    let mut distinct: Vec<Sequence> = pairs
        .iter()
        .flat_map(|p| [p.y_w.clone(), p.y_l.clone()])
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    distinct.sort();
    let pos: HashMap<&Sequence, usize> = distinct.iter().enumerate().map(|(i, s)| (s, i)).collect();
    let seq_comp = identity_components(&distinct, threshold)?;
    // join each pair's winner and loser components
    let mut uf = UnionFind::new(distinct.len());
    for (i, &c) in seq_comp.iter().enumerate() {
        uf.union(i, c);
    }
    for p in pairs {
        uf.union(pos[&p.y_w], pos[&p.y_l]);
    }
    let pair_ids: Vec<usize> = pairs.iter().map(|p| uf.find(pos[&p.y_w])).collect();
    let clusters = group(&pair_ids);
    let [tr, va, te] = assign_clusters(clusters, pairs.len(), fractions, rng)?;
    let pick = |ids: Vec<usize>| ids.into_iter().map(|i| pairs[i].clone()).collect();
    Ok(DatasetSplit {
        train: pick(tr),
        val: pick(va),
        test: pick(te),
        threshold,
    })
}

/// Splits a scored pool by identity before pairing, so that pairs can then
/// be formed inside each split without crossing it.
pub fn split_pool_by_identity(
    pool: &[ScoredSequence],
    threshold: f64,
    fractions: [f64; 3],
    rng: &mut Rng,
) -> Result<[Vec<ScoredSequence>; 3]> {
    check_split_args(threshold, fractions)?;
    let seqs: Vec<Sequence> = pool.iter().map(|e| e.seq.clone()).collect();
    let comp = identity_components(&seqs, threshold)?;
    let clusters = group(&comp);
    let parts = assign_clusters(clusters, pool.len(), fractions, rng)?;
    Ok(parts.map(|ids| ids.into_iter().map(|i| pool[i].clone()).collect()))
}

/// Counts val/test sequences whose identity with some training sequence
/// exceeds the split threshold. Brute force over all cross-split pairs.
pub fn leakage_violations(split: &DatasetSplit) -> Result<usize> {
    let train = split.train_sequences();
    let mut held: Vec<Sequence> = split
        .val
        .iter()
        .chain(&split.test)
        .flat_map(|p| [p.y_w.clone(), p.y_l.clone()])
        .collect();
    held.sort();
    held.dedup();
    let mut violations = 0;
    for h in &held {
        for t in &train {
            if hamming_identity(h, t)? > split.threshold {
                violations += 1;
                break;
            }
        }
    }
    Ok(violations)
}

/// Checks every pair against the oracle: stored energies and gap must match.
pub fn revalidate(split: &DatasetSplit, oracle: &dyn EnergyOracle) -> Result<()> {
    for p in split.train.iter().chain(&split.val).chain(&split.test) {
        let (ew, el) = (oracle.score(&p.y_w)?.e_min, oracle.score(&p.y_l)?.e_min);
        if ew != p.e_w || el != p.e_l || p.delta_e != gap(ew, el) {
            return Err(Error::Validation(format!(
                "pair ({}, {}) stores energies ({}, {}), oracle gives ({ew}, {el})",
                p.y_w, p.y_l, p.e_w, p.e_l
            )));
        }
    }
    Ok(())
}

pub const DATASET_FORMAT: &str = "physiopref-dataset";
pub const DATASET_VERSION: u32 = 1;

/// First line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub alphabet: String,
    pub length: usize,
    pub oracle: String,
    pub seed: u64,
    pub identity_threshold: f64,
}

impl DatasetHeader {
    pub fn new(alphabet: Alphabet, length: usize, oracle: &str, seed: u64, threshold: f64) -> Self {
        DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            alphabet: alphabet.name().into(),
            length,
            oracle: oracle.into(),
            seed,
            identity_threshold: threshold,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    yw: String,
    yl: String,
    ew: i32,
    el: i32,
    delta_e: f64,
    pairing: String,
    split: String,
}

/// Serialises a split: header line, then one JSON record per pair.
pub fn encode_dataset(split: &DatasetSplit, header: &DatasetHeader) -> String {
    let mut out = serde_json::to_string(header).expect("header serialises");
    out.push('\n');
    for (name, part) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        for p in part {
            let r = Record {
                yw: p.y_w.to_string(),
                yl: p.y_l.to_string(),
                ew: p.e_w,
                el: p.e_l,
                delta_e: p.delta_e,
                pairing: p.pairing.name().into(),
                split: name.into(),
            };
            out.push_str(&serde_json::to_string(&r).expect("record serialises"));
            out.push('\n');
        }
    }
    out
}

pub fn save_dataset(split: &DatasetSplit, header: &DatasetHeader, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(split, header)).map_err(|e| Error::io(path, e))
}

pub fn decode_dataset(text: &str, origin: &str) -> Result<(DatasetHeader, DatasetSplit)> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let header: DatasetHeader =
        serde_json::from_str(first).map_err(|e| err(1, format!("bad header: {e}")))?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(err(
            1,
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    let alphabet = Alphabet::from_name(&header.alphabet)
        .ok_or_else(|| err(1, format!("unknown alphabet {}", header.alphabet)))?;
    let mut split = DatasetSplit {
        threshold: header.identity_threshold,
        ..DatasetSplit::default()
    };
    for (i, line) in lines {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(line).map_err(|e| err(n, e.to_string()))?;
        let parse = |s: &str| {
            let seq = Sequence::parse(alphabet, s).map_err(|e| err(n, e.to_string()))?;
            if seq.len() != header.length {
                return Err(err(n, format!("sequence {s} has length {}, header says {}", seq.len(), header.length)));
            }
            Ok(seq)
        };
        let pairing = Pairing::from_name(&r.pairing)
            .ok_or_else(|| err(n, format!("unknown pairing {:?}", r.pairing)))?;
        if r.delta_e != gap(r.ew, r.el) {
            return Err(err(
                n,
                format!("delta_e {} inconsistent with energies ({}, {})", r.delta_e, r.ew, r.el),
            ));
        }
        if r.ew > 0 || r.el > 0 {
            return Err(err(n, "lattice energies must be <= 0".into()));
        }
        let pair = PreferencePair {
            y_w: parse(&r.yw)?,
            y_l: parse(&r.yl)?,
            e_w: r.ew,
            e_l: r.el,
            delta_e: r.delta_e,
            pairing,
        };
        match r.split.as_str() {
            "train" => split.train.push(pair),
            "val" => split.val.push(pair),
            "test" => split.test.push(pair),
            other => return Err(err(n, format!("unknown split {other:?}"))),
        }
    }
    Ok((header, split))
}

pub fn load_dataset(path: &Path) -> Result<(DatasetHeader, DatasetSplit)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&text, &path.display().to_string())
}
