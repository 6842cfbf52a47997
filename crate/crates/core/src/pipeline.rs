//! End-to-end stages shared by the command line and the acceptance suite:
//! reference fitting, dataset generation, training, evaluation and sweeps.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng as _;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{
    boltzmann_fit, energy_confidence_plane, evaluate, plane_axes, EvalReport, Plane,
    RESULTS_HEADER,
};
use crate::numerics::{child_seed, seeded_rng, AdamConfig, Rng};
use crate::oracle::{EnergyOracle, FoldReport, LatticeOracle, SurrogateOracle};
use crate::policy::{checkpoint, PolicyModel};
use crate::prefdata::{
    build_pairs, generate_fold_score, load_dataset, mine_hard_negatives, save_dataset,
    split_pool_by_identity, DatasetHeader, DatasetSplit, Label,
};
use crate::seqcore::{Alphabet, Sequence, HP_H, HP_P};
use crate::trainer::{fit_likelihood, train, TrainContext, TrainOutcome};

/// Environment variable naming the lattice fold cache file.
pub const CACHE_ENV: &str = "PHYSIOPREF_CACHE";

pub enum Oracle {
    Lattice(LatticeOracle),
    Surrogate(SurrogateOracle),
}

impl EnergyOracle for Oracle {
    fn name(&self) -> &str {
        match self {
            Oracle::Lattice(o) => o.name(),
            Oracle::Surrogate(o) => o.name(),
        }
    }

    fn score(&self, s: &Sequence) -> Result<FoldReport> {
        match self {
            Oracle::Lattice(o) => o.score(s),
            Oracle::Surrogate(o) => o.score(s),
        }
    }
}

impl Oracle {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        match cfg.oracle.kind.as_str() {
            "lattice" => Ok(Oracle::Lattice(LatticeOracle::new(cfg.oracle.l_max))),
            "surrogate" => Ok(Oracle::Surrogate(SurrogateOracle)),
            other => Err(Error::config("oracle.kind", format!("unknown oracle {other:?}"))),
        }
    }

    /// Loads the fold cache named by the environment, if any and present.
    pub fn load_env_cache(&self) -> Result<()> {
        if let (Oracle::Lattice(o), Some(path)) = (self, std::env::var_os(CACHE_ENV)) {
            let path = PathBuf::from(path);
            if path.exists() {
                o.load_cache(&path)?;
            }
        }
        Ok(())
    }

    pub fn save_env_cache(&self) -> Result<()> {
        if let (Oracle::Lattice(o), Some(path)) = (self, std::env::var_os(CACHE_ENV)) {
            o.save_cache(Path::new(&path))?;
        }
        Ok(())
    }
}

/// Seed corpus for the reference: alternating hydrophobic and polar runs
/// with lengths uniform on {1, 2, 3}, starting class by a fair coin. AA20
/// residues are drawn uniformly within the run's class.
pub fn block_corpus(alphabet: Alphabet, n: usize, length: usize, rng: &mut Rng) -> Result<Vec<Sequence>> {
    let classes: [Vec<u8>; 2] = match alphabet {
        Alphabet::Hp2 => [vec![HP_H], vec![HP_P]],
        Alphabet::Aa20 => {
            let (h, p): (Vec<u8>, Vec<u8>) =
                (0..20u8).partition(|&t| alphabet.is_hydrophobic(t));
            [h, p]
        }
    };
    (0..n)
        .map(|_| {
            let mut tokens = Vec::with_capacity(length);
            let mut class = rng.random_range(0..2usize);
            while tokens.len() < length {
                let run = rng.random_range(1..=3usize);
                for _ in 0..run.min(length - tokens.len()) {
                    let pick = &classes[class];
                    tokens.push(pick[rng.random_range(0..pick.len())]);
                }
                class = 1 - class;
            }
            Sequence::new(alphabet, tokens)
        })
        .collect()
}

/// Fits and freezes the reference model for `seed`.
pub fn build_reference(cfg: &RunConfig, seed: u64) -> Result<PolicyModel> {
    let mut model = PolicyModel::new(cfg.policy_config(child_seed(seed, 10))?)?;
    let mut rng = seeded_rng(child_seed(seed, 11));
    let corpus = block_corpus(cfg.alphabet()?, cfg.reference.corpus_size, cfg.model.length, &mut rng)?;
    let adam = AdamConfig {
        lr: cfg.reference.lr,
        ..AdamConfig::default()
    };
    fit_likelihood(&mut model, &corpus, cfg.reference.steps, cfg.reference.batch, adam, &mut rng)?;
    Ok(model.into_frozen())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenSummary {
    pub pool: usize,
    pub stable: usize,
    pub unstable: usize,
    pub hard_negative: usize,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub test_pairs: usize,
    pub mean_gap: f64,
}

impl std::fmt::Display for GenSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "pool {} (stable {}, unstable {}, hard negative {}); pairs train {} val {} test {}; mean gap {:.3}",
            self.pool,
            self.stable,
            self.unstable,
            self.hard_negative,
            self.train_pairs,
            self.val_pairs,
            self.test_pairs,
            self.mean_gap
        )
    }
}

/// Generates, labels, splits and pairs a pool drawn from `reference`.
///
/// The pool is split by identity first; pairs are then formed inside each
/// split with a pair budget proportional to its share.
pub fn generate_dataset(
    cfg: &RunConfig,
    reference: &PolicyModel,
    oracle: &dyn EnergyOracle,
    seed: u64,
) -> Result<(DatasetSplit, GenSummary)> {
    let criteria = cfg.criteria();
    let mut pool = generate_fold_score(
        reference,
        oracle,
        cfg.data.pool_size,
        &criteria,
        &mut seeded_rng(child_seed(seed, 20)),
    )?;
    mine_hard_negatives(&mut pool, cfg.data.q_conf);
    let count = |l: Label| pool.iter().filter(|e| e.label == l).count();
    let (stable, unstable, hard) = (count(Label::Stable), count(Label::Unstable), count(Label::HardNegative));
    let threshold = cfg.identity_threshold()?;
    let parts = split_pool_by_identity(
        &pool,
        threshold,
        cfg.data.fractions,
        &mut seeded_rng(child_seed(seed, 21)),
    )?;
    let pairing = cfg.pairing()?;
    let mut built: [Vec<_>; 3] = Default::default();
    for (j, part) in parts.iter().enumerate() {
        let m = (cfg.data.pairs as f64 * cfg.data.fractions[j]).round() as usize;
        if m == 0 {
            continue;
        }
        let mut rng = seeded_rng(child_seed(seed, 22 + j as u64));
        match build_pairs(part, pairing, m, cfg.pairing_options(), &mut rng) {
            Ok(p) => built[j] = p,
            // held-out splits may legitimately lack a valid pair
            Err(Error::EmptyDataset(_)) if j > 0 => {}
            Err(e) => return Err(e),
        }
    }
    let [train, val, test] = built;
    let n_pairs = (train.len() + val.len() + test.len()).max(1);
    let mean_gap = train.iter().chain(&val).chain(&test).map(|p| p.delta_e).sum::<f64>() / n_pairs as f64;
    let summary = GenSummary {
        pool: pool.len(),
        stable,
        unstable,
        hard_negative: hard,
        train_pairs: train.len(),
        val_pairs: val.len(),
        test_pairs: test.len(),
        mean_gap,
    };
    Ok((
        DatasetSplit {
            train,
            val,
            test,
            threshold,
        },
        summary,
    ))
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Provenance record written next to a command's artifacts.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: String,
    pub artifacts: BTreeMap<String, String>,
    pub started: u64,
    pub finished: Option<u64>,
}

impl RunManifest {
    /// Records the run and writes the manifest before any work happens.
    pub fn begin(command: &str, cfg: &RunConfig, path: &Path) -> Result<Self> {
        let m = RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed,
            config: cfg.to_toml(),
            artifacts: BTreeMap::new(),
            started: now_secs(),
            finished: None,
        };
        m.write(path)?;
        Ok(m)
    }

    pub fn artifact(&mut self, name: &str, path: &Path) {
        self.artifacts.insert(name.to_string(), path.display().to_string());
    }

    pub fn finish(mut self, path: &Path) -> Result<()> {
        self.finished = Some(now_secs());
        self.write(path)
    }

    fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Creates `dir`, refusing to reuse a populated directory unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let populated = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if populated && !force {
            return Err(Error::OutputExists(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const REFERENCE_FILE: &str = "reference.ckpt";
pub const POLICY_FILE: &str = "policy.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// `gen-data`: fits the reference, builds the dataset, writes both.
pub fn gen_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<GenSummary> {
    cfg.validate()?;
    prepare_out_dir(out, force)?;
    let manifest_path = out.join(MANIFEST_FILE);
    let mut manifest = RunManifest::begin("gen-data", cfg, &manifest_path)?;
    let oracle = Oracle::from_config(cfg)?;
    oracle.load_env_cache()?;
    let reference = build_reference(cfg, cfg.seed)?;
    let (split, summary) = generate_dataset(cfg, &reference, &oracle, cfg.seed)?;
    let header = DatasetHeader::new(cfg.alphabet()?, cfg.model.length, oracle.name(), cfg.seed, split.threshold);
    let ds = out.join(DATASET_FILE);
    save_dataset(&split, &header, &ds)?;
    let rf = out.join(REFERENCE_FILE);
    checkpoint::save(&reference, "reference", &rf)?;
    oracle.save_env_cache()?;
    manifest.artifact("dataset", &ds);
    manifest.artifact("reference", &rf);
    manifest.finish(&manifest_path)?;
    Ok(summary)
}

/// Loads a dataset and checks it against the run configuration.
pub fn load_checked_dataset(cfg: &RunConfig, path: &Path) -> Result<(DatasetHeader, DatasetSplit)> {
    let (header, split) = load_dataset(path)?;
    if header.length != cfg.model.length || header.alphabet != cfg.alphabet()?.name() {
        return Err(Error::Validation(format!(
            "dataset holds {} sequences of length {}, config expects {} length {}",
            header.alphabet,
            header.length,
            cfg.model.alphabet,
            cfg.model.length
        )));
    }
    Ok((header, split))
}

/// Loads a frozen reference checkpoint.
pub fn load_reference(path: &Path) -> Result<PolicyModel> {
    Ok(checkpoint::load(path)?.0.into_frozen())
}

/// Trains one policy from the reference on the split's training pairs.
pub fn train_policy(
    cfg: &RunConfig,
    reference: &PolicyModel,
    split: &DatasetSplit,
    oracle: &dyn EnergyOracle,
    log_path: Option<&Path>,
) -> Result<TrainOutcome> {
    let ctx = TrainContext {
        reference,
        pairs: &split.train,
        oracle,
        criteria: cfg.criteria(),
        objective: &cfg.objective,
        optimizer: cfg.optimizer,
        settings: cfg.train,
        seed: cfg.seed,
        wall_clock: cfg.logging.wall_clock,
    };
    train(reference.trainable_copy(), &ctx, log_path)
}

/// `train`: one run on a stored dataset; writes checkpoint and log.
pub fn train_run(cfg: &RunConfig, dataset: &Path, reference: &Path, out: &Path, force: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    prepare_out_dir(out, force)?;
    let manifest_path = out.join(MANIFEST_FILE);
    let mut manifest = RunManifest::begin("train", cfg, &manifest_path)?;
    let (_, split) = load_checked_dataset(cfg, dataset)?;
    let reference = load_reference(reference)?;
    let oracle = Oracle::from_config(cfg)?;
    oracle.load_env_cache()?;
    let log_path = out.join(TRAIN_LOG_FILE);
    let outcome = train_policy(cfg, &reference, &split, &oracle, Some(&log_path))?;
    let ck = out.join(POLICY_FILE);
    checkpoint::save(&outcome.policy, &cfg.objective.name, &ck)?;
    oracle.save_env_cache()?;
    manifest.artifact("checkpoint", &ck);
    manifest.artifact("train_log", &log_path);
    manifest.finish(&manifest_path)?;
    Ok(outcome)
}

/// Distinct training sequences of a split, for identity metrics.
pub fn train_sequences(split: &DatasetSplit) -> Vec<Sequence> {
    split.train_sequences()
}

/// Evaluates `policy` with the configured sample budget and seed.
pub fn evaluate_policy(
    cfg: &RunConfig,
    method: &str,
    policy: &PolicyModel,
    reference: &PolicyModel,
    oracle: &dyn EnergyOracle,
    train_set: &[Sequence],
) -> Result<EvalReport> {
    let mut rng = seeded_rng(child_seed(cfg.seed, 30));
    evaluate(
        method,
        cfg.seed,
        policy,
        reference,
        oracle,
        &cfg.criteria(),
        train_set,
        cfg.eval.samples,
        &mut rng,
    )
}

/// Plane of `policy` on axes fixed by the reference's own plane.
pub fn hallucination_plane(
    cfg: &RunConfig,
    policy: &PolicyModel,
    reference: &PolicyModel,
    oracle: &dyn EnergyOracle,
) -> Result<Plane> {
    let n = cfg.eval.plane_samples;
    let axes = plane_axes(reference, oracle, n, &mut seeded_rng(child_seed(cfg.seed, 31)))?;
    energy_confidence_plane(policy, oracle, n, axes, &mut seeded_rng(child_seed(cfg.seed, 32)))
}

/// Appends one row to a results table, writing the header for a new file.
pub fn append_results(path: &Path, report: &EvalReport) -> Result<()> {
    let fresh = !path.exists() || fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(RESULTS_HEADER);
        text.push('\n');
    }
    text.push_str(&report.csv());
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// `eval`: scores a checkpoint, appends to `results`, optionally writes
/// the plane.
pub fn eval_run(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    reference: &Path,
    dataset: &Path,
    results: &Path,
    plane: Option<&Path>,
) -> Result<EvalReport> {
    cfg.validate()?;
    let (policy, label) = checkpoint::load(checkpoint_path)?;
    let reference = load_reference(reference)?;
    let (_, split) = load_checked_dataset(cfg, dataset)?;
    let oracle = Oracle::from_config(cfg)?;
    oracle.load_env_cache()?;
    let report = evaluate_policy(cfg, &label, &policy, &reference, &oracle, &split.train_sequences())?;
    append_results(results, &report)?;
    if let Some(p) = plane {
        let pl = hallucination_plane(cfg, &policy, &reference, &oracle)?;
        fs::write(p, pl.to_csv()).map_err(|e| Error::io(p, e))?;
    }
    oracle.save_env_cache()?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Beta,
    Mu,
}

impl SweepParam {
    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(SweepParam::Beta),
            "mu" => Ok(SweepParam::Mu),
            _ => Err(Error::usage(format!("unknown sweep parameter {s:?}; valid: beta, mu"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Beta => "beta",
            SweepParam::Mu => "mu",
        }
    }
}

pub const SWEEP_HEADER: &str = "param,value,energy_per_res,foldability,ppl,kl";

/// One train+eval per grid value on a shared dataset and seed. Failed
/// points are recorded with empty metrics and the sweep continues.
pub fn sweep(
    cfg: &RunConfig,
    param: SweepParam,
    grid: &[f64],
    reference: &PolicyModel,
    split: &DatasetSplit,
    oracle: &dyn EnergyOracle,
) -> Result<(String, Vec<Result<EvalReport>>)> {
    if grid.is_empty() {
        return Err(Error::usage("sweep grid is empty"));
    }
    let train_set = split.train_sequences();
    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    let mut out = Vec::with_capacity(grid.len());
    for &v in grid {
        let mut point = cfg.clone();
        match param {
            SweepParam::Beta => point.objective.beta = v,
            SweepParam::Mu => point.objective.mu = Some(v),
        }
        let res = point.validate().and_then(|_| {
            let run = train_policy(&point, reference, split, oracle, None)?;
            evaluate_policy(&point, &point.objective.name, &run.policy, reference, oracle, &train_set)
        });
        match &res {
            Ok(r) => csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                param.name(),
                v,
                r.energy_per_res,
                r.foldability,
                r.perplexity,
                r.kl
            )),
            Err(_) => csv.push_str(&format!("{},{},,,,\n", param.name(), v)),
        }
        out.push(res);
    }
    Ok((csv, out))
}

/// Methods compared by the table run, as (row label, objective name).
pub const COMPARISON_METHODS: [(&str, &str); 7] = [
    ("sft", "sft"),
    ("dpo", "dpo"),
    ("ipo", "ipo"),
    ("kto", "kto"),
    ("pg", "pg"),
    ("physio", "physio"),
    ("physio-linear", "physio-linear"),
];

/// Reference row plus one row per objective on one dataset.
pub fn compare_methods(
    cfg: &RunConfig,
    reference: &PolicyModel,
    split: &DatasetSplit,
    oracle: &dyn EnergyOracle,
) -> Result<Vec<EvalReport>> {
    let train_set = split.train_sequences();
    let mut rows = vec![evaluate_policy(cfg, "reference", reference, reference, oracle, &train_set)?];
    for (label, objective) in COMPARISON_METHODS {
        let mut c = cfg.clone();
        c.objective.name = objective.to_string();
        let run = train_policy(&c, reference, split, oracle, None)?;
        rows.push(evaluate_policy(&c, label, &run.policy, reference, oracle, &train_set)?);
    }
    Ok(rows)
}

/// Boltzmann comparison at the configured temperature.
pub fn boltzmann(cfg: &RunConfig, policy: &PolicyModel, oracle: &dyn EnergyOracle) -> Result<crate::eval::BoltzmannFit> {
    boltzmann_fit(policy, oracle, cfg.eval.temperature)
}
