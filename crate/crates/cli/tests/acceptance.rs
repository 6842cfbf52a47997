//! Acceptance suite. Each test prints one `criterion NN ...: PASS|FAIL` line
//! straight to stderr, so the verdicts appear even when output is captured.
//!
//! Criteria 5, 6, 8 and 9 share one multi-seed experiment that runs once.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use physiopref_core::config::RunConfig;
use physiopref_core::eval::{EvalReport, Quadrant};
use physiopref_core::numerics::{grad_check, seeded_rng, ParameterSet};
use physiopref_core::objectives::{
    bt_loss, dpo_loss, gradient_gain, ipo_loss, kto_reference_point, kto_loss_at, physio_loss, psi,
    sft_loss, LossOutput, PairBatch, PhysioParams, PsiKind, RewardModel,
};
use physiopref_core::oracle::{enumerate_saws, raw_walk_count, EnergyOracle, LatticeOracle};
use physiopref_core::pipeline::{
    boltzmann, build_reference, evaluate_policy, generate_dataset, hallucination_plane, train_policy, Oracle,
    DATASET_FILE, POLICY_FILE, REFERENCE_FILE, TRAIN_LOG_FILE,
};
use physiopref_core::policy::{all_sequences, checkpoint, Architecture, PolicyConfig, PolicyModel};
use physiopref_core::prefdata::{decode_dataset, encode_dataset, Pairing, PreferencePair};
use physiopref_core::seqcore::{Alphabet, Sequence};
use physiopref_core::Result;
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};

const SEEDS: [u64; 3] = [0, 1, 2];

fn report(id: u32, name: &str, pass: bool, started: Instant, detail: &str) {
    let line = format!(
        "criterion {id:02} {name}: {} ({:.1}s) {detail}\n",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    let mut err = std::io::stderr().lock();
    err.write_all(line.as_bytes()).unwrap();
    err.flush().unwrap();
}

fn tiny_policy(seed: u64, arch: Architecture) -> PolicyModel {
    PolicyModel::new(PolicyConfig {
        alphabet: Alphabet::Hp2,
        length: 6,
        arch,
        embed_dim: 4,
        seed,
        init_scale: 0.5,
    })
    .unwrap()
}

/// Pairs drawn from `source` and labelled by the exact oracle, so gaps vary.
fn sampled_pairs(source: &PolicyModel, n: usize, seed: u64) -> Vec<PreferencePair> {
    let oracle = LatticeOracle::new(8);
    let seqs = source.sample(2 * n, &mut seeded_rng(seed));
    seqs.chunks(2)
        .map(|c| {
            let (a, b) = (oracle.score(&c[0]).unwrap().e_min, oracle.score(&c[1]).unwrap().e_min);
            let (w, l, ew, el) = if a <= b {
                (&c[0], &c[1], a, b)
            } else {
                (&c[1], &c[0], b, a)
            };
            PreferencePair::new(w.clone(), l.clone(), ew, el, Pairing::Random)
        })
        .collect()
}

#[test]
fn criterion_01_reduction_identity() {
    let t = Instant::now();
    let mut worst = 0.0f64;
    for k in 0..100u64 {
        let reference = tiny_policy(k, Architecture::Ngram { k: 3, hidden: 6 }).into_frozen();
        let policy = tiny_policy(1000 + k, Architecture::Ngram { k: 3, hidden: 6 });
        let pairs = sampled_pairs(&policy, 1 + (k as usize % 8), k);
        let batch = PairBatch::new(pairs, &policy, &reference).unwrap();
        let beta = 0.05 + 0.01 * k as f64;
        let p = PhysioParams {
            beta,
            ..PhysioParams::lattice()
        };
        let a = physio_loss(&policy, &batch, &p, PsiKind::Const1).unwrap();
        let b = dpo_loss(&policy, &batch, beta).unwrap();
        let mut diff = a.grad.clone();
        diff.add_scaled(&b.grad, -1.0).unwrap();
        worst = worst.max((a.loss - b.loss).abs()).max(diff.max_abs());
    }
    let pass = worst <= 1e-12 && t.elapsed().as_secs_f64() < 10.0;
    report(1, "reduction identity", pass, t, &format!("max abs difference {worst:.2e} over 100 batches"));
    assert!(pass);
}

fn check_loss<F>(policy: &PolicyModel, f: F) -> f64
where
    F: Fn(&PolicyModel) -> Result<LossOutput>,
{
    grad_check(
        |theta: &ParameterSet| {
            let out = f(&policy.with_params(theta.clone())?)?;
            Ok((out.loss, out.grad))
        },
        policy.params(),
        1e-5,
        300,
        0,
    )
    .unwrap()
}

/// `-mean[Ψ σ(-Δr) ∇Δr]` built from per-sequence gradients.
fn hand_assembled(policy: &PolicyModel, batch: &PairBatch, p: &PhysioParams) -> ParameterSet {
    let n = batch.len() as f64;
    let mut g = policy.params().zeros_like();
    for (i, pair) in batch.pairs.iter().enumerate() {
        let dr = p.beta * batch.log_ratio_margin(i);
        let gain = gradient_gain(pair.delta_e, dr, p).unwrap();
        let gw = policy.grad_log_prob(&pair.y_w).unwrap();
        let gl = policy.grad_log_prob(&pair.y_l).unwrap();
        g.add_scaled(&gw, -gain * p.beta / n).unwrap();
        g.add_scaled(&gl, gain * p.beta / n).unwrap();
    }
    g
}

#[test]
fn criterion_02_gradient_conformance() {
    let t = Instant::now();
    let archs = [
        Architecture::Ngram { k: 3, hidden: 5 },
        Architecture::Attn1 { d_model: 4, heads: 2 },
    ];
    let mut worst_fd = 0.0f64;
    let mut worst_hand = 0.0f64;
    for seed in 0..4u64 {
        let arch = archs[seed as usize % 2];
        let reference = tiny_policy(seed, arch).into_frozen();
        let policy = tiny_policy(seed + 50, arch);
        let pairs = sampled_pairs(&reference, 4, seed);
        let batch_at = |m: &PolicyModel| PairBatch::new(pairs.clone(), m, &reference);
        let p = PhysioParams {
            beta: 0.8,
            ..PhysioParams::lattice()
        };
        let z0 = kto_reference_point(&batch_at(&policy).unwrap());
        let winners: Vec<Sequence> = pairs.iter().map(|q| q.y_w.clone()).collect();
        let errs = [
            check_loss(&policy, |m| physio_loss(m, &batch_at(m)?, &p, PsiKind::Sigmoid)),
            check_loss(&policy, |m| dpo_loss(m, &batch_at(m)?, 0.8)),
            check_loss(&policy, |m| ipo_loss(m, &batch_at(m)?, 0.25)),
            check_loss(&policy, |m| kto_loss_at(m, &batch_at(m)?, 0.8, 1.0, 1.3, z0)),
            check_loss(&policy, |m| sft_loss(m, &winners)),
        ];
        worst_fd = errs.iter().fold(worst_fd, |a, &b| a.max(b));

        let rm = RewardModel::new(Alphabet::Hp2, 6, 3, 5, &mut seeded_rng(seed)).unwrap();
        let bt = grad_check(
            |theta: &ParameterSet| {
                let mut m = rm.clone();
                *m.params_mut() = theta.clone();
                let out = bt_loss(&m, &pairs)?;
                Ok((out.loss, out.grad))
            },
            rm.params(),
            1e-5,
            300,
            0,
        )
        .unwrap();
        worst_fd = worst_fd.max(bt);

        let batch = batch_at(&policy).unwrap();
        let analytic = physio_loss(&policy, &batch, &p, PsiKind::Sigmoid).unwrap().grad;
        let mut diff = hand_assembled(&policy, &batch, &p);
        diff.add_scaled(&analytic, -1.0).unwrap();
        worst_hand = worst_hand.max(diff.max_abs());
    }
    let pass = worst_fd < 1e-4 && worst_hand <= 1e-10 && t.elapsed().as_secs_f64() < 60.0;
    report(
        2,
        "gradient conformance",
        pass,
        t,
        &format!("finite-difference rel err {worst_fd:.2e}, hand-assembled diff {worst_hand:.2e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_03_weight_properties() {
    let t = Instant::now();
    let params = (0.01f64..10.0, -10.0f64..60.0, 0.05f64..20.0);
    let strategy = (params, 0.0f64..1.0, 0.01f64..5.0);
    let mut runner = TestRunner::new(ProptestConfig {
        cases: 10_000,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    let outcome = runner.run(&strategy, |((lambda, mu, tau), u, gap)| {
        let p = PhysioParams {
            beta: 0.1,
            lambda,
            mu,
            tau,
        };
        // z = (d - μ)/τ stays where σ(z) is representable strictly inside (0, 1)
        let z_lo = (-mu / tau).max(-30.0);
        prop_assume!(z_lo < 30.0);
        let z1 = z_lo + u * (30.0 - z_lo);
        let z2 = (z1 + gap).min(30.0);
        let (d1, d2) = ((mu + tau * z1).max(0.0), mu + tau * z2);
        prop_assume!(d2 > d1);
        let (a, b) = (psi(d1, &p).unwrap(), psi(d2, &p).unwrap());
        prop_assert!(a > 0.0 && a < lambda, "bounds: psi({d1}) = {a}");
        prop_assert!(a < b, "monotone: psi({d1}) = {a}, psi({d2}) = {b}");
        if mu >= 0.0 {
            prop_assert_eq!(psi(mu, &p).unwrap(), lambda / 2.0);
        }
        let unit = PhysioParams { lambda: 1.0, ..p };
        let lo = mu - 5.0 * tau;
        if lo >= 0.0 {
            prop_assert!((psi(lo, &unit).unwrap() - 0.006693).abs() < 1e-6);
        }
        prop_assert!((psi(mu + 5.0 * tau, &unit).unwrap() - 0.993307).abs() < 1e-6);
        Ok(())
    });
    let pass = outcome.is_ok() && t.elapsed().as_secs_f64() < 5.0;
    let detail = match &outcome {
        Ok(()) => "10000 parameterizations".to_string(),
        Err(e) => e.to_string(),
    };
    report(3, "weight properties", pass, t, &detail);
    assert!(pass);
}

const STEPS: [(i32, i32); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];

/// Every self-avoiding walk of `sites` sites from the origin, no symmetry reduction.
fn all_walks(sites: usize) -> Vec<Vec<(i32, i32)>> {
    fn grow(walk: &mut Vec<(i32, i32)>, sites: usize, out: &mut Vec<Vec<(i32, i32)>>) {
        if walk.len() == sites {
            out.push(walk.clone());
            return;
        }
        let last = *walk.last().unwrap();
        for (dx, dy) in STEPS {
            let next = (last.0 + dx, last.1 + dy);
            if !walk.contains(&next) {
                walk.push(next);
                grow(walk, sites, out);
                walk.pop();
            }
        }
    }
    let mut out = Vec::new();
    grow(&mut vec![(0, 0)], sites, &mut out);
    out
}

/// First step +x and first turn, if any, +y.
fn naive_canonical(w: &[(i32, i32)]) -> bool {
    let step = |i: usize| (w[i + 1].0 - w[i].0, w[i + 1].1 - w[i].1);
    if w.len() < 2 {
        return true;
    }
    if step(0) != (1, 0) {
        return false;
    }
    (1..w.len() - 1)
        .map(step)
        .find(|&s| s != (1, 0))
        .is_none_or(|s| s == (0, 1))
}

fn naive_energy(w: &[(i32, i32)], h: &[bool]) -> i32 {
    let mut e = 0;
    for i in 0..w.len() {
        for j in i + 2..w.len() {
            if h[i] && h[j] && (w[i].0 - w[j].0).abs() + (w[i].1 - w[j].1).abs() == 1 {
                e -= 1;
            }
        }
    }
    e
}

#[test]
fn criterion_04_oracle_equivalence() {
    let t = Instant::now();
    let mut mismatches = Vec::new();
    let mut checked = 0;
    for length in 2..=6usize {
        let walks = all_walks(length);
        let raw = raw_walk_count(enumerate_saws(length, 14).unwrap());
        if raw != walks.len() as u64 {
            mismatches.push(format!("SAW count L={length}: {raw} vs {}", walks.len()));
        }
        if length < 4 {
            continue;
        }
        let canonical: Vec<_> = walks.into_iter().filter(|w| naive_canonical(w)).collect();
        let oracle = LatticeOracle::new(14);
        for s in all_sequences(Alphabet::Hp2, length).unwrap() {
            let h = s.hydrophobic_mask();
            let energies: Vec<i32> = canonical.iter().map(|w| naive_energy(w, &h)).collect();
            let e_min = *energies.iter().min().unwrap();
            let g = energies.iter().filter(|&&e| e == e_min).count() as u64;
            let r = oracle.fold(&s).unwrap();
            if (r.e_min, r.degeneracy) != (e_min, g) {
                mismatches.push(format!("{s}: ({}, {}) vs ({e_min}, {g})", r.e_min, r.degeneracy));
            }
            checked += 1;
        }
    }
    let known: Vec<u64> = (2..=6).map(|l| raw_walk_count(enumerate_saws(l, 14).unwrap())).collect();
    if known != [4, 12, 36, 100, 284] {
        mismatches.push(format!("SAW counts {known:?}"));
    }
    let pass = mismatches.is_empty() && checked == 112 && t.elapsed().as_secs_f64() < 60.0;
    report(
        4,
        "oracle equivalence",
        pass,
        t,
        &format!("{checked} sequences, {} mismatches {:?}", mismatches.len(), mismatches.iter().take(3).collect::<Vec<_>>()),
    );
    assert!(pass);
}

/// One seed of the desk-scale comparison.
struct SeedRun {
    reference: EvalReport,
    physio: EvalReport,
    dpo: EvalReport,
    sft: EvalReport,
    random_pairs: EvalReport,
    linear: EvalReport,
    physio_kl: Vec<f64>,
    pg_final_kl: f64,
    hche_reference: usize,
    hche_physio: usize,
}

struct Experiment {
    runs: Vec<SeedRun>,
    seconds: f64,
}

fn desk_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    cfg.logging.wall_clock = false;
    cfg
}

fn run_seed(seed: u64) -> SeedRun {
    let cfg = desk_config(seed);
    let oracle = Oracle::from_config(&cfg).unwrap();
    let reference = build_reference(&cfg, seed).unwrap();
    let (split, _) = generate_dataset(&cfg, &reference, &oracle, seed).unwrap();
    let train_set = split.train_sequences();
    let eval = |c: &RunConfig, label: &str, m: &PolicyModel| {
        evaluate_policy(c, label, m, &reference, &oracle, &train_set).unwrap()
    };
    let with_objective = |name: &str| {
        let mut c = cfg.clone();
        c.objective.name = name.into();
        c
    };

    let physio_cfg = with_objective("physio");
    let physio = train_policy(&physio_cfg, &reference, &split, &oracle, None).unwrap();
    let trained = |name: &str| {
        let c = with_objective(name);
        let run = train_policy(&c, &reference, &split, &oracle, None).unwrap();
        (eval(&c, name, &run.policy), run.log.last().map_or(0.0, |r| r.kl))
    };
    let (dpo, _) = trained("dpo");
    let (sft, _) = trained("sft");
    let (linear, _) = trained("physio-linear");
    let (_, pg_final_kl) = trained("pg");

    let mut random_cfg = physio_cfg.clone();
    random_cfg.data.pairing = "random".into();
    let (random_split, _) = generate_dataset(&random_cfg, &reference, &oracle, seed).unwrap();
    let random_run = train_policy(&random_cfg, &reference, &random_split, &oracle, None).unwrap();

    let hche = |m: &PolicyModel| {
        hallucination_plane(&cfg, m, &reference, &oracle)
            .unwrap()
            .count(Quadrant::HighConfHighEnergy)
    };
    SeedRun {
        reference: eval(&cfg, "reference", &reference),
        physio: eval(&physio_cfg, "physio", &physio.policy),
        dpo,
        sft,
        random_pairs: eval(&random_cfg, "physio-random", &random_run.policy),
        linear,
        physio_kl: physio.log.iter().map(|r| r.kl).collect(),
        pg_final_kl,
        hche_reference: hche(&reference),
        hche_physio: hche(&physio.policy),
    }
}

fn experiment() -> &'static Experiment {
    static CELL: OnceLock<Experiment> = OnceLock::new();
    CELL.get_or_init(|| {
        let t = Instant::now();
        let runs = SEEDS.iter().map(|&s| run_seed(s)).collect();
        Experiment {
            runs,
            seconds: t.elapsed().as_secs_f64(),
        }
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_05_method_ordering() {
    let t = Instant::now();
    let ex = experiment();
    let e = |f: fn(&SeedRun) -> &EvalReport| mean(ex.runs.iter().map(|r| f(r).energy_per_res));
    let (ep, ed, es, er) = (e(|r| &r.physio), e(|r| &r.dpo), e(|r| &r.sft), e(|r| &r.reference));
    let energy_order = ep <= ed && ed <= es && es <= er;
    let margin_seeds = ex
        .runs
        .iter()
        .filter(|r| r.dpo.energy_per_res - r.physio.energy_per_res >= 0.02)
        .count();
    let fold_seeds = ex
        .runs
        .iter()
        .filter(|r| {
            r.physio.foldability >= r.dpo.foldability
                && r.dpo.foldability >= r.sft.foldability
                && r.sft.foldability >= r.reference.foldability
        })
        .count();
    let pass = energy_order && margin_seeds >= 2 && fold_seeds >= 2 && ex.seconds <= 90.0 * 60.0;
    let per_seed: Vec<String> = ex
        .runs
        .iter()
        .map(|r| {
            format!(
                "[E {:.4}/{:.4}/{:.4}/{:.4} F {:.3}/{:.3}/{:.3}/{:.3}]",
                r.physio.energy_per_res,
                r.dpo.energy_per_res,
                r.sft.energy_per_res,
                r.reference.energy_per_res,
                r.physio.foldability,
                r.dpo.foldability,
                r.sft.foldability,
                r.reference.foldability
            )
        })
        .collect();
    report(
        5,
        "method ordering",
        pass,
        t,
        &format!(
            "mean energy physio {ep:.4} dpo {ed:.4} sft {es:.4} reference {er:.4}; margin >= 0.02 in {margin_seeds}/3; \
             foldability order in {fold_seeds}/3; physio/dpo/sft/reference {}",
            per_seed.join(" ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_06_ablation_ordering() {
    let t = Instant::now();
    let ex = experiment();
    let pairing_seeds = ex
        .runs
        .iter()
        .filter(|r| r.physio.foldability > r.random_pairs.foldability)
        .count();
    let weight_seeds = ex
        .runs
        .iter()
        .filter(|r| r.physio.foldability > r.linear.foldability)
        .count();
    let pass = pairing_seeds >= 2 && weight_seeds >= 2;
    let per_seed: Vec<String> = ex
        .runs
        .iter()
        .map(|r| format!("[{:.3}/{:.3}/{:.3}]", r.physio.foldability, r.random_pairs.foldability, r.linear.foldability))
        .collect();
    report(
        6,
        "ablation ordering",
        pass,
        t,
        &format!(
            "max-gap over random pairing in {pairing_seeds}/3, sigmoid over linear in {weight_seeds}/3; \
             foldability physio/random/linear {}",
            per_seed.join(" ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_boltzmann_alignment() {
    let t = Instant::now();
    let mut ok = 0;
    let mut rows = Vec::new();
    for seed in SEEDS {
        let mut cfg = desk_config(seed);
        cfg.model.length = 8;
        cfg.data.pool_size = 150;
        let oracle = Oracle::from_config(&cfg).unwrap();
        let reference = build_reference(&cfg, seed).unwrap();
        let (split, _) = generate_dataset(&cfg, &reference, &oracle, seed).unwrap();
        let run = train_policy(&cfg, &reference, &split, &oracle, None).unwrap();
        let before = boltzmann(&cfg, &reference, &oracle).unwrap();
        let after = boltzmann(&cfg, &run.policy, &oracle).unwrap();
        if after.kl < before.kl && after.spearman - before.spearman >= 0.1 {
            ok += 1;
        }
        rows.push(format!(
            "[kl {:.3}->{:.3} rho {:.3}->{:.3}]",
            before.kl, after.kl, before.spearman, after.spearman
        ));
    }
    let pass = ok == 3 && t.elapsed().as_secs_f64() < 15.0 * 60.0;
    report(7, "boltzmann alignment", pass, t, &format!("{ok}/3 seeds {}", rows.join(" ")));
    assert!(pass);
}

#[test]
fn criterion_08_kl_boundedness() {
    let t = Instant::now();
    let ex = experiment();
    let cap = RunConfig::default().eval.kl_cap;
    let bounded = ex.runs.iter().all(|r| !r.physio_kl.is_empty() && r.physio_kl.iter().all(|&k| k < cap));
    let pg_seeds = ex
        .runs
        .iter()
        .filter(|r| r.pg_final_kl > *r.physio_kl.last().unwrap())
        .count();
    let pass = bounded && pg_seeds >= 2;
    let per_seed: Vec<String> = ex
        .runs
        .iter()
        .map(|r| {
            format!(
                "[physio max {:.3} final {:.3} pg final {:.3}]",
                r.physio_kl.iter().cloned().fold(0.0, f64::max),
                r.physio_kl.last().unwrap(),
                r.pg_final_kl
            )
        })
        .collect();
    report(
        8,
        "kl boundedness",
        pass,
        t,
        &format!("physio below {cap} at every logged step: {bounded}; pg drifts further in {pg_seeds}/3 {}", per_seed.join(" ")),
    );
    assert!(pass);
}

#[test]
fn criterion_09_hallucination_quadrant() {
    let t = Instant::now();
    let ex = experiment();
    let ok = ex.runs.iter().filter(|r| r.hche_physio < r.hche_reference).count();
    let counts: Vec<String> = ex
        .runs
        .iter()
        .map(|r| format!("{}->{}", r.hche_reference, r.hche_physio))
        .collect();
    let pass = ok == 3;
    report(
        9,
        "hallucination quadrant",
        pass,
        t,
        &format!("high-confidence/high-energy counts reference->physio {}", counts.join(", ")),
    );
    assert!(pass);
}

const TINY_CONFIG: &str = r#"
seed = 4

[model]
length = 8

[reference]
corpus_size = 500
steps = 100

[data]
pool_size = 60
pairs = 80

[optimizer]
lr = 1e-3

[train]
steps = 40
eval_every = 10
metric_samples = 32

[eval]
samples = 50
plane_samples = 40

[logging]
wall_clock = false
"#;

fn physiopref(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_physiopref"))
        .args(["--threads", "1"])
        .args(args)
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn same_bytes(a: &Path, b: &Path) -> bool {
    fs::read(a).unwrap() == fs::read(b).unwrap()
}

#[test]
fn criterion_10_determinism_and_persistence() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.toml");
    fs::write(&cfg_path, TINY_CONFIG).unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let mut failures = Vec::new();

    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let data = dir.path().join(format!("data-{name}"));
            let run = dir.path().join(format!("run-{name}"));
            physiopref(&["gen-data", "--config", cfg, "--out", data.to_str().unwrap()]);
            let ds = data.join(DATASET_FILE);
            physiopref(&["train", "--config", cfg, "--dataset", ds.to_str().unwrap(), "--out", run.to_str().unwrap()]);
            (data, run)
        })
        .collect();
    let (a, b) = (&runs[0], &runs[1]);
    for (what, x, y) in [
        ("dataset", a.0.join(DATASET_FILE), b.0.join(DATASET_FILE)),
        ("reference", a.0.join(REFERENCE_FILE), b.0.join(REFERENCE_FILE)),
        ("checkpoint", a.1.join(POLICY_FILE), b.1.join(POLICY_FILE)),
        ("train log", a.1.join(TRAIN_LOG_FILE), b.1.join(TRAIN_LOG_FILE)),
    ] {
        if !same_bytes(&x, &y) {
            failures.push(format!("{what} differs"));
        }
    }

    let before = fs::read(a.0.join(DATASET_FILE)).unwrap();
    physiopref(&["gen-data", "--config", cfg, "--out", a.0.to_str().unwrap(), "--force"]);
    if fs::read(a.0.join(DATASET_FILE)).unwrap() != before {
        failures.push("forced rerun changed the dataset".into());
    }

    let text = fs::read_to_string(a.0.join(DATASET_FILE)).unwrap();
    let (header, split) = decode_dataset(&text, "dataset").unwrap();
    if encode_dataset(&split, &header) != text {
        failures.push("dataset round trip is lossy".into());
    }
    for path in [a.0.join(REFERENCE_FILE), a.1.join(POLICY_FILE)] {
        let text = fs::read_to_string(&path).unwrap();
        let (model, label) = checkpoint::decode(&text, "checkpoint").unwrap();
        if checkpoint::encode(&model, &label) != text {
            failures.push(format!("{} round trip is lossy", path.display()));
        }
    }

    let pass = failures.is_empty() && t.elapsed().as_secs_f64() < 300.0;
    report(10, "determinism and persistence", pass, t, &format!("{failures:?}"));
    assert!(pass);
}
