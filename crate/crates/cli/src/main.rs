//! `physiopref`: dataset construction, training, evaluation, sweeps and the
//! comparative table, each driven by a TOML config plus flag overrides.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use physiopref_core::config::RunConfig;
use physiopref_core::eval::RESULTS_HEADER;
use physiopref_core::oracle::{EnergyOracle, LatticeOracle, SurrogateOracle};
use physiopref_core::pipeline::{self, Oracle, SweepParam, DATASET_FILE, MANIFEST_FILE, REFERENCE_FILE};
use physiopref_core::policy::checkpoint;
use physiopref_core::seqcore::{Alphabet, Sequence};
use physiopref_core::trainer::{Objective, PsiName};
use physiopref_core::{Error, Result};

/// Config shipped for `repro-table1` when no `--config` is given.
const COMPARISON_CONFIG: &str = include_str!("../configs/comparison.toml");

#[derive(Parser)]
#[command(name = "physiopref", version, about = "Energy-gap-weighted preference optimization on HP lattice proteins")]
struct Cli {
    /// Worker threads; 1 forces fully deterministic execution.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// lattice or surrogate.
    #[arg(long)]
    oracle: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Fold one sequence and print `seq,e_min,g,n_conf,e_per_res`.
    Oracle {
        #[arg(long)]
        seq: String,
        #[arg(long, default_value = "lattice")]
        oracle: String,
        #[arg(long, default_value_t = physiopref_core::oracle::DEFAULT_L_MAX)]
        l_max: usize,
    },
    /// Fit the reference and build a preference dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train one policy on a stored dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        objective: ObjectiveFlags,
        #[command(flatten)]
        data: DataFlags,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint and append a row to the results table.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "results.csv")]
        results: PathBuf,
        /// Also write the energy/confidence plane here.
        #[arg(long)]
        plane: Option<PathBuf>,
    },
    /// Train and evaluate once per grid value of beta or mu.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        objective: ObjectiveFlags,
        #[command(flatten)]
        data: DataFlags,
        /// beta or mu.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Build one dataset and compare every objective on it.
    ReproTable1 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Exact KL to the Boltzmann distribution and energy rank correlation.
    Boltzmann {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Args, Clone, Default)]
struct ObjectiveFlags {
    /// sft, dpo, ipo, kto, physio, physio-linear or pg.
    #[arg(long)]
    objective: Option<String>,
    /// sigmoid, linear or const1.
    #[arg(long)]
    psi: Option<String>,
}

#[derive(Args, Clone, Default)]
struct DataFlags {
    /// Dataset file written by gen-data.
    #[arg(long)]
    dataset: PathBuf,
    /// Reference checkpoint; defaults to the one beside the dataset.
    #[arg(long)]
    reference: Option<PathBuf>,
}

impl DataFlags {
    fn reference_path(&self) -> PathBuf {
        self.reference.clone().unwrap_or_else(|| {
            self.dataset
                .parent()
                .unwrap_or(Path::new("."))
                .join(REFERENCE_FILE)
        })
    }
}

fn load_config(common: &Common, fallback: Option<&str>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, fallback) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(text)) => RunConfig::from_toml(text, "comparison.toml")?,
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(o) = &common.oracle {
        cfg.oracle.kind = o.clone();
    }
    Ok(cfg)
}

fn apply_objective(cfg: &mut RunConfig, flags: &ObjectiveFlags) -> Result<()> {
    if let Some(name) = &flags.objective {
        Objective::from_name(name)?;
        cfg.objective.name = name.clone();
    }
    if let Some(psi) = &flags.psi {
        cfg.objective.psi = PsiName::from_name(psi)?;
    }
    Ok(())
}

fn fold_line(seq: &str, oracle_name: &str, l_max: usize) -> Result<String> {
    let oracle: Box<dyn EnergyOracle> = match oracle_name {
        "lattice" => Box::new(LatticeOracle::new(l_max)),
        "surrogate" => Box::new(SurrogateOracle),
        other => return Err(Error::usage(format!("unknown oracle {other:?}; valid: lattice, surrogate"))),
    };
    let alphabet = if seq.chars().all(|c| c == 'H' || c == 'P') {
        Alphabet::Hp2
    } else {
        Alphabet::Aa20
    };
    let s = Sequence::parse(alphabet, seq)?;
    let r = oracle.score(&s)?;
    Ok(format!("{},{},{},{},{}", s, r.e_min, r.degeneracy, r.n_conf, r.e_per_res()))
}

fn write_new(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Oracle { seq, oracle, l_max } => {
            println!("{}", fold_line(&seq, &oracle, l_max)?);
        }
        Command::GenData { common, out, force } => {
            let cfg = load_config(&common, None)?;
            let summary = pipeline::gen_data(&cfg, &out, force)?;
            println!("{summary}");
        }
        Command::Train {
            common,
            objective,
            data,
            out,
            force,
        } => {
            let mut cfg = load_config(&common, None)?;
            apply_objective(&mut cfg, &objective)?;
            let outcome = pipeline::train_run(&cfg, &data.dataset, &data.reference_path(), &out, force)?;
            if let Some(last) = outcome.log.last() {
                println!(
                    "{} step {} loss {:.5} energy/res {:.4} kl {:.4} foldability {:.4}",
                    cfg.objective.name, last.step, last.loss, last.energy_per_res, last.kl, last.foldability
                );
            }
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            results,
            plane,
        } => {
            let cfg = load_config(&common, None)?;
            let report = pipeline::eval_run(
                &cfg,
                &checkpoint,
                &data.reference_path(),
                &data.dataset,
                &results,
                plane.as_deref(),
            )?;
            println!("{report}");
        }
        Command::Sweep {
            common,
            objective,
            data,
            param,
            grid,
            out,
            force,
        } => {
            let mut cfg = load_config(&common, None)?;
            apply_objective(&mut cfg, &objective)?;
            let param = SweepParam::from_name(&param)?;
            cfg.validate()?;
            pipeline::prepare_out_dir(&out, force)?;
            let manifest_path = out.join(MANIFEST_FILE);
            let mut manifest = pipeline::RunManifest::begin("sweep", &cfg, &manifest_path)?;
            let (_, split) = pipeline::load_checked_dataset(&cfg, &data.dataset)?;
            let reference = pipeline::load_reference(&data.reference_path())?;
            let oracle = Oracle::from_config(&cfg)?;
            oracle.load_env_cache()?;
            let (csv, points) = pipeline::sweep(&cfg, param, &grid, &reference, &split, &oracle)?;
            let path = out.join("sweep.csv");
            write_new(&path, &csv)?;
            oracle.save_env_cache()?;
            for (v, p) in grid.iter().zip(&points) {
                if let Err(e) = p {
                    eprintln!("{}={v}: {e}", param.name());
                }
            }
            print!("{csv}");
            manifest.artifact("sweep", &path);
            manifest.finish(&manifest_path)?;
        }
        Command::ReproTable1 { common, out, force } => {
            let cfg = load_config(&common, Some(COMPARISON_CONFIG))?;
            cfg.validate()?;
            pipeline::prepare_out_dir(&out, force)?;
            let manifest_path = out.join(MANIFEST_FILE);
            let mut manifest = pipeline::RunManifest::begin("repro-table1", &cfg, &manifest_path)?;
            let oracle = Oracle::from_config(&cfg)?;
            oracle.load_env_cache()?;
            let reference = pipeline::build_reference(&cfg, cfg.seed)?;
            let (split, summary) = pipeline::generate_dataset(&cfg, &reference, &oracle, cfg.seed)?;
            println!("{summary}");
            let header = physiopref_core::prefdata::DatasetHeader::new(
                cfg.alphabet()?,
                cfg.model.length,
                oracle.name(),
                cfg.seed,
                split.threshold,
            );
            let ds = out.join(DATASET_FILE);
            physiopref_core::prefdata::save_dataset(&split, &header, &ds)?;
            let rf = out.join(REFERENCE_FILE);
            checkpoint::save(&reference, "reference", &rf)?;
            let rows = pipeline::compare_methods(&cfg, &reference, &split, &oracle)?;
            let mut csv = format!("{RESULTS_HEADER}\n");
            for r in &rows {
                csv.push_str(&r.csv());
                csv.push('\n');
            }
            let path = out.join("results.csv");
            write_new(&path, &csv)?;
            oracle.save_env_cache()?;
            println!("{:<14} {:>10} {:>11} {:>8} {:>7}", "method", "energy/res", "foldability", "ppl", "kl");
            for r in &rows {
                println!(
                    "{:<14} {:>10.4} {:>11.4} {:>8.4} {:>7.3}",
                    r.method, r.energy_per_res, r.foldability, r.perplexity, r.kl
                );
            }
            manifest.artifact("dataset", &ds);
            manifest.artifact("reference", &rf);
            manifest.artifact("results", &path);
            manifest.finish(&manifest_path)?;
        }
        Command::Boltzmann { common, checkpoint } => {
            let cfg = load_config(&common, None)?;
            let (policy, label) = checkpoint::load(&checkpoint)?;
            let oracle = Oracle::from_config(&cfg)?;
            let fit = pipeline::boltzmann(&cfg, &policy, &oracle)?;
            println!("model,temperature,kl,spearman");
            println!("{label},{},{},{}", cfg.eval.temperature, fit.kl, fit.spearman);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

