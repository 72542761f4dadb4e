//! Self-check suites on freshly generated fixtures.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use xclp::bus::Bus;
use xclp::crypto::KeyProfile;
use xclp::data::{split_synthetic, BlobGeometry, Heterogeneity, SyntheticSpec};
use xclp::fixed_point::FixedPointCodec;
use xclp::hamming::{compute_hamming_matrix, random_codes, HammingMatrix, HammingProtocol, HammingSettings, KeyRing, Schedule};
use xclp::lsh::{estimate_cosine, generate_projection, hash_features, ProjectionSpec};
use xclp::oracle::{decomposed_scores, oracle_run, propagate_iterative};
use xclp::protocol::run_xclp_with_keys;
use xclp::rowsums::{secure_row_sums, PairwiseSecrets};
use xclp::seed::derive_rng;
use xclp::{Cohort, XclpConfig};

use crate::manifest::{CheckPlan, Suite};

const MAX_CLIENTS: usize = 4;

#[derive(Debug, Clone, Serialize)]
pub struct TrialRecord {
    pub suite: &'static str,
    pub trial: usize,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteSummary {
    pub suite: &'static str,
    pub trials: usize,
    pub passed: usize,
}

impl SuiteSummary {
    pub fn ok(&self) -> bool {
        self.passed == self.trials
    }
}

fn default_trials(suite: Suite) -> usize {
    match suite {
        Suite::Hamming => 20,
        Suite::Oracle => 5,
        Suite::Lsh => 5,
        Suite::Lp => 10,
        Suite::Rowsums => 20,
    }
}

struct Ctx<'a> {
    plan: &'a CheckPlan,
    keys: KeyRing,
}

impl Ctx<'_> {
    fn rng(&self, suite: Suite, trial: usize) -> ChaCha20Rng {
        derive_rng(self.plan.seed, &format!("check/{}", suite.name()), &[trial as u64])
    }

    fn fault(&self, trial: usize) -> bool {
        self.plan.inject_fault && trial == 0
    }
}

fn blob_cohort(seed: u64, clients: usize, per_client: usize, classes: usize, label_fraction: f64) -> anyhow::Result<Cohort> {
    Ok(split_synthetic(&SyntheticSpec {
        n_clients: clients,
        per_client,
        dim: 8,
        classes,
        label_fraction,
        heterogeneity: Heterogeneity::Iid,
        seed,
        geometry: BlobGeometry { separation: 4.0, noise: 1.0, stretch: 2.0, offset: 3.0 },
    })?)
}

fn hamming_trial(ctx: &Ctx<'_>, trial: usize) -> anyhow::Result<(bool, String)> {
    let mut rng = ctx.rng(Suite::Hamming, trial);
    let l = [8usize, 16, 64][rng.random_range(0..3)];
    let clients = rng.random_range(2..=MAX_CLIENTS);
    let n = rng.random_range(clients..=16);
    let mut sizes = vec![1usize; clients];
    for _ in clients..n {
        sizes[rng.random_range(0..clients)] += 1;
    }
    let codes: Vec<_> = sizes.iter().map(|&s| random_codes(s, l, &mut rng)).collect();
    let oracle = HammingMatrix::plaintext(&codes)?;
    let mut wrong = Vec::new();
    for protocol in [HammingProtocol::Ot, HammingProtocol::Phe] {
        let settings = HammingSettings {
            protocol,
            ot_backend: ctx.plan.ot_backend,
            key_profile: KeyProfile::Test512,
            schedule: Schedule::Deterministic,
        };
        let got = compute_hamming_matrix(&codes, &settings, Some(&ctx.keys), &Bus::new(), trial as u64, 1, &[])?;
        let mut values = got.values().to_vec();
        if ctx.fault(trial) {
            values[1] ^= 1;
        }
        let bad = values.iter().zip(oracle.values()).filter(|(a, b)| a != b).count();
        if bad > 0 {
            wrong.push(format!("{protocol:?}: {bad} entries differ"));
        }
    }
    let detail = if wrong.is_empty() { format!("L={l} n={n} clients={clients}: exact") } else { format!("L={l} n={n} clients={clients}: {}", wrong.join("; ")) };
    Ok((wrong.is_empty(), detail))
}

fn oracle_trial(ctx: &Ctx<'_>, trial: usize) -> anyhow::Result<(bool, String)> {
    let mut rng = ctx.rng(Suite::Oracle, trial);
    let clients = rng.random_range(2..=MAX_CLIENTS);
    let classes = rng.random_range(2..=4usize);
    let per_client = rng.random_range(6..=20usize);
    let cohort = blob_cohort(ctx.plan.seed ^ trial as u64, clients, per_client, classes, 0.2)?;
    let n = cohort.total_rows();
    let config = XclpConfig {
        code_length: 64,
        k: rng.random_range(1..=5usize).min(n - 1),
        alpha: rng.random_range(0.5..0.99),
        ot_backend: ctx.plan.ot_backend,
        key_profile: KeyProfile::Test512,
        seed: trial as u64,
        ..XclpConfig::default()
    };
    let oracle = oracle_run(&cohort, &config)?;
    let tol = 2f64.powi(-24) * n as f64;
    let mut worst: f64 = 0.0;
    let mut label_mismatch = 0;
    for protocol in [HammingProtocol::Ot, HammingProtocol::Phe, HammingProtocol::PlaintextDebug] {
        let out = run_xclp_with_keys(&cohort, &XclpConfig { hamming_protocol: protocol, ..config.clone() }, Some(&ctx.keys))?;
        for (pos, (scores, assignment)) in oracle.clients.iter().enumerate() {
            let got = out.outputs[pos].as_ref().context("client without output")?;
            let mut labels = got.assignment.labels.clone();
            if ctx.fault(trial) && pos == 0 {
                labels[0] = Some(labels[0].map_or(0, |l| (l + 1) % classes));
            }
            label_mismatch += usize::from(labels != assignment.labels);
            worst = worst.max((&got.scores - scores).amax());
        }
    }
    let pass = label_mismatch == 0 && worst <= tol;
    Ok((pass, format!("n={n} C={classes} k={}: {label_mismatch} label mismatches, max score gap {worst:.2e} (tol {tol:.2e})", config.k)))
}

fn lsh_trial(ctx: &Ctx<'_>, trial: usize) -> anyhow::Result<(bool, String)> {
    let dim = 64;
    let pairs = 200;
    let projection = generate_projection(&ProjectionSpec::new(ctx.plan.seed ^ trial as u64, 4096, dim)?);
    let mut rng = ctx.rng(Suite::Lsh, trial);
    let mut good = 0usize;
    for p in 0..pairs {
        let mut pair = DMatrix::from_fn(2, dim, |_, _| rng.random_range(-1.0..1.0f64));
        for i in 0..2 {
            let norm = pair.row(i).norm();
            pair.row_mut(i).scale_mut(1.0 / norm);
        }
        let truth = pair.row(0).dot(&pair.row(1));
        let codes = hash_features(&pair, &projection)?;
        let mut est = estimate_cosine(u64::from(codes.hamming(0, &codes, 1)), 4096)?;
        if ctx.fault(trial) && p < pairs / 2 {
            est += 0.5;
        }
        good += usize::from((est - truth).abs() <= 0.1);
    }
    Ok((good * 100 >= pairs * 99, format!("{good}/{pairs} pairs within 0.1 at L=4096")))
}

fn lp_trial(ctx: &Ctx<'_>, trial: usize) -> anyhow::Result<(bool, String)> {
    let mut rng = ctx.rng(Suite::Lp, trial);
    let clients = rng.random_range(1..=MAX_CLIENTS);
    let per_client = rng.random_range(10..=40usize);
    let cohort = blob_cohort(ctx.plan.seed ^ trial as u64, clients, per_client, 3, 0.2)?;
    let config = XclpConfig { code_length: 256, k: 5, alpha: 0.99, seed: trial as u64, ..XclpConfig::default() };
    let run = oracle_run(&cohort, &config)?;
    let y = cohort.stacked_labels();
    let iter = propagate_iterative(&run.normalized, &y, config.alpha, 1e-12, 1_000_000)?;
    let mut iter_gap = (&iter.scores - &run.result.scores).amax();
    if ctx.fault(trial) {
        iter_gap += 1.0;
    }
    let parts = decomposed_scores(&run.normalized, &y, &cohort.labeled_global_indices(), config.alpha)?;
    let sum = parts.iter().fold(DMatrix::zeros(y.nrows(), y.ncols()), |acc, p| acc + p);
    let decomp_gap = (sum - &run.result.scores).amax();
    Ok((
        iter_gap <= 1e-8 && decomp_gap <= 1e-8,
        format!("n={}: iterative gap {iter_gap:.2e}, decomposition gap {decomp_gap:.2e}", cohort.total_rows()),
    ))
}

fn rowsums_trial(ctx: &Ctx<'_>, trial: usize) -> anyhow::Result<(bool, String)> {
    let mut rng = ctx.rng(Suite::Rowsums, trial);
    let parties = rng.random_range(2..=5usize);
    let n = rng.random_range(parties..=20);
    let c = rng.random_range(1..=5usize);
    let participants: Vec<u32> = (0..parties as u32).collect();
    let contributions: Vec<DMatrix<f64>> =
        (0..parties).map(|_| DMatrix::from_fn(n, c, |_, _| rng.random_range(-10.0..10.0))).collect();
    let mut partition = vec![Vec::new(); parties];
    for i in 0..n {
        let owner = if i < parties { i } else { rng.random_range(0..parties) };
        partition[owner].push(i);
    }
    let codec = FixedPointCodec::default();
    let secrets = PairwiseSecrets::derive(&participants, ctx.plan.seed ^ trial as u64);
    let blocks = secure_row_sums(&contributions, &partition, &participants, &Bus::new(), &codec, &secrets, 1, &[])?;
    let total = contributions.iter().fold(DMatrix::zeros(n, c), |acc, z| acc + z);
    let mut worst: f64 = 0.0;
    for (rows, block) in partition.iter().zip(&blocks) {
        for (r, &i) in rows.iter().enumerate() {
            for col in 0..c {
                worst = worst.max((block[(r, col)] - total[(i, col)]).abs());
            }
        }
    }
    if ctx.fault(trial) {
        worst += 1.0;
    }
    let tol = parties as f64 * codec.resolution();
    Ok((worst <= tol, format!("{parties} parties, {n}x{c}: max error {worst:.2e} (tol {tol:.2e})")))
}

/// Runs every requested suite, writing one JSON line per trial to
/// `check.jsonl` in `out`.
pub fn run_checks(plan: &CheckPlan, out: &Path) -> anyhow::Result<Vec<SuiteSummary>> {
    let keys = KeyRing::generate(MAX_CLIENTS, KeyProfile::Test512, plan.seed)?;
    let ctx = Ctx { plan, keys };
    let path = out.join("check.jsonl");
    let mut log = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    let mut summaries = Vec::new();
    for &suite in &plan.suites {
        let trials = plan.trials.unwrap_or_else(|| default_trials(suite));
        let mut passed = 0;
        for trial in 0..trials {
            let result = match suite {
                Suite::Hamming => hamming_trial(&ctx, trial),
                Suite::Oracle => oracle_trial(&ctx, trial),
                Suite::Lsh => lsh_trial(&ctx, trial),
                Suite::Lp => lp_trial(&ctx, trial),
                Suite::Rowsums => rowsums_trial(&ctx, trial),
            };
            let (pass, detail) = result.unwrap_or_else(|e| (false, format!("error: {e:#}")));
            passed += usize::from(pass);
            let record = TrialRecord { suite: suite.name(), trial, pass, detail };
            writeln!(log, "{}", serde_json::to_string(&record)?)?;
        }
        log.flush()?;
        summaries.push(SuiteSummary { suite: suite.name(), trials, passed });
    }
    Ok(summaries)
}
