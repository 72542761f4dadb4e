//! Acceptance suite: one pass/fail line per criterion, with wall-clock time.
//!
//! Runs as a plain binary (`harness = false`) so the criteria execute in
//! order and the summary is printed even when one of them fails.

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use xclp::bus::{decode_u64s, Bus, MessageKind, PartyId, Phase};
use xclp::crypto::{KeyProfile, OtBackend};
use xclp::data::{split_synthetic, BlobGeometry, Cohort, Heterogeneity, SyntheticSpec};
use xclp::fixed_point::FixedPointCodec;
use xclp::graph::build_graph_from_similarity;
use xclp::hamming::{compute_hamming_matrix, random_codes, HammingMatrix, HammingProtocol, HammingSettings, KeyRing, Schedule};
use xclp::lsh::{estimate_cosine, generate_projection, hash_features, ProjectionSpec};
use xclp::oracle::{decomposed_scores, oracle_run, propagate_closed_form, propagate_iterative};
use xclp::protocol::{client_codes, entropy_confidence, run_xclp_with_keys, DropoutEvent, DropoutWindow, XclpConfig};
use xclp::rowsums::{mask_contribution, mask_for, PairwiseSecrets};
use xclp::seed::derive_rng;
use xclp::ssl::{train_fedavg_xclp, LinearSoftmax, Pseudolabeler, RoundConfig};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn within(budget: Duration, start: Instant) -> (bool, String) {
    let spent = start.elapsed();
    (spent <= budget, format!("{:.1}s of {:.0}s budget", spent.as_secs_f64(), budget.as_secs_f64()))
}

fn shared_keys() -> &'static KeyRing {
    static KEYS: std::sync::OnceLock<KeyRing> = std::sync::OnceLock::new();
    KEYS.get_or_init(|| KeyRing::generate(10, KeyProfile::Test512, 0xacce97).expect("test keys"))
}

fn blob_cohort(seed: u64, clients: usize, per_client: usize, classes: usize, label_fraction: f64) -> Cohort {
    split_synthetic(&SyntheticSpec {
        n_clients: clients,
        per_client,
        dim: 10,
        classes,
        label_fraction,
        heterogeneity: Heterogeneity::Iid,
        seed,
        geometry: BlobGeometry { separation: 4.0, noise: 1.0, stretch: 2.0, offset: 3.0 },
    })
    .expect("synthetic cohort")
}

/// One criterion-1 fixture: returns (rows, mismatching backends).
fn hamming_fixture(keys: &KeyRing, l: usize, trial: u64) -> (usize, usize) {
    let mut rng = derive_rng(trial, "acceptance/c1", &[l as u64]);
    let clients = rng.random_range(2..=10usize);
    let n = rng.random_range(clients..=200);
    // Random split of n rows, every client at least one.
    let mut sizes = vec![1usize; clients];
    for _ in clients..n {
        sizes[rng.random_range(0..clients)] += 1;
    }
    let codes: Vec<_> = sizes.iter().map(|&s| random_codes(s, l, &mut rng)).collect();
    let oracle = HammingMatrix::plaintext(&codes).expect("plaintext matrix");
    let ot_backend = if l == 8 { OtBackend::DiffieHellman } else { OtBackend::Simulated };
    let mut mismatches = 0;
    for protocol in [HammingProtocol::Ot, HammingProtocol::Phe] {
        let settings = HammingSettings { protocol, ot_backend, key_profile: KeyProfile::Test256, schedule: Schedule::Deterministic };
        let got = compute_hamming_matrix(&codes, &settings, Some(keys), &Bus::new(), trial, 1, &[]).expect("secure hamming");
        if got.values() != oracle.values() {
            mismatches += 1;
        }
    }
    (n, mismatches)
}

/// Hamming matrices from both secure backends equal the popcount matrix.
/// Fixtures are spread over the available cores.
fn criterion_1() -> Verdict {
    let start = Instant::now();
    let keys = KeyRing::generate(10, KeyProfile::Test256, 0xacce97).expect("test keys");
    let jobs: Vec<(usize, u64)> = [8usize, 64, 1024].iter().flat_map(|&l| (0..100u64).map(move |t| (l, t))).collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<(usize, usize)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut out = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        let Some(&(l, trial)) = jobs.get(i) else { break out };
                        out.push(hamming_fixture(&keys, l, trial));
                    }
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("fixture worker")).collect()
    });
    let mismatches: usize = results.iter().map(|r| r.1).sum();
    let largest = results.iter().map(|r| r.0).max().unwrap_or(0);
    let (fast, time) = within(Duration::from_secs(300), start);
    Verdict::new(
        mismatches == 0 && fast,
        format!("{} fixtures x 2 backends on {workers} threads, n <= {largest}, {mismatches} mismatches, {time}", results.len()),
    )
}

/// Protocol labels equal the plaintext oracle; scores within 2^-24 n.
fn criterion_2() -> Verdict {
    let start = Instant::now();
    let keys = shared_keys();
    let mut label_mismatch = 0usize;
    let mut worst_ratio: f64 = 0.0;
    let mut runs = 0usize;
    for trial in 0..50u64 {
        let mut rng = derive_rng(trial, "acceptance/c2", &[]);
        let clients = rng.random_range(2..=6usize);
        let classes = rng.random_range(2..=10usize);
        let per_client = rng.random_range(4..=40usize).max(classes.div_ceil(clients) + 1);
        let cohort = blob_cohort(trial, clients, per_client, classes, rng.random_range(0.05..0.5));
        let n = cohort.total_rows();
        let config = XclpConfig {
            code_length: 64,
            k: rng.random_range(1..=10usize).min(n - 1),
            alpha: rng.random_range(0.5..0.995),
            ot_backend: OtBackend::Simulated,
            key_profile: KeyProfile::Test512,
            seed: trial,
            ..XclpConfig::default()
        };
        let oracle = oracle_run(&cohort, &config).expect("oracle");
        for protocol in [HammingProtocol::Ot, HammingProtocol::Phe, HammingProtocol::PlaintextDebug] {
            let out = run_xclp_with_keys(&cohort, &XclpConfig { hamming_protocol: protocol, ..config.clone() }, Some(keys))
                .expect("protocol run");
            for (pos, (scores, assignment)) in oracle.clients.iter().enumerate() {
                let got = out.outputs[pos].as_ref().expect("client output");
                if got.assignment.labels != assignment.labels {
                    label_mismatch += 1;
                }
                let err = (&got.scores - scores).amax();
                worst_ratio = worst_ratio.max(err / (2f64.powi(-24) * n as f64));
            }
            runs += 1;
        }
    }
    let (fast, time) = within(Duration::from_secs(600), start);
    Verdict::new(
        label_mismatch == 0 && worst_ratio <= 1.0 && fast,
        format!(
            "{runs} runs over 50 cohorts, {label_mismatch} label mismatches, worst score error {worst_ratio:.3} x 2^-24 n, {time}"
        ),
    )
}

/// LSH cosine estimates at L = 4096.
fn criterion_3() -> Verdict {
    let dim = 64;
    let spec = ProjectionSpec::new(3, 4096, dim).expect("projection spec");
    let projection = generate_projection(&spec);
    let mut rng = derive_rng(3, "acceptance/c3", &[]);
    let mut good = 0usize;
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let mut pair = DMatrix::from_fn(2, dim, |_, _| rng.random_range(-1.0..1.0f64));
        for i in 0..2 {
            let norm = pair.row(i).norm();
            pair.row_mut(i).scale_mut(1.0 / norm);
        }
        let truth = pair.row(0).dot(&pair.row(1));
        let codes = hash_features(&pair, &projection).expect("codes");
        let est = estimate_cosine(u64::from(codes.hamming(0, &codes, 1)), 4096).expect("estimate");
        let err = (est - truth).abs();
        worst = worst.max(err);
        good += usize::from(err <= 0.1);
    }
    Verdict::new(good >= 990, format!("{good}/1000 pairs within 0.1, worst error {worst:.4}"))
}

/// Iterative vs closed form, decomposition identity, 2-node value.
fn criterion_4() -> Verdict {
    let mut worst_iter: f64 = 0.0;
    let mut worst_decomp: f64 = 0.0;
    for trial in 0..20u64 {
        let mut rng = derive_rng(trial, "acceptance/c4", &[]);
        let clients = rng.random_range(1..=5usize);
        let per_client = rng.random_range(10..=100usize);
        let cohort = blob_cohort(trial, clients, per_client, 3, 0.2);
        let config = XclpConfig { code_length: 256, k: 5, alpha: 0.99, seed: trial, ..XclpConfig::default() };
        let run = oracle_run(&cohort, &config).expect("oracle");
        let y = cohort.stacked_labels();
        let iter = propagate_iterative(&run.normalized, &y, config.alpha, 1e-10, 1_000_000).expect("iteration");
        worst_iter = worst_iter.max((&iter.scores - &run.result.scores).amax());
        let parts = decomposed_scores(&run.normalized, &y, &cohort.labeled_global_indices(), config.alpha).expect("decomposition");
        let sum = parts.iter().fold(DMatrix::zeros(y.nrows(), y.ncols()), |acc, p| acc + p);
        worst_decomp = worst_decomp.max((sum - &run.result.scores).amax());
    }
    let g = build_graph_from_similarity(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]), 8, 1).expect("graph");
    let two = propagate_closed_form(&g.normalized().to_dense(), &DMatrix::from_row_slice(2, 1, &[1.0, 0.0]), 0.99)
        .expect("two-node solve");
    let value = format!("{:.4}", two.scores[(0, 0)]);
    Verdict::new(
        worst_iter <= 1e-8 && worst_decomp <= 1e-8 && value == "50.2513",
        format!("iterative gap {worst_iter:.2e}, decomposition gap {worst_decomp:.2e}, 2-node S_00 = {value}"),
    )
}

fn outputs_by_id(cohort: &Cohort, out: &xclp::XclpOutcome) -> Vec<(String, Option<DMatrix<f64>>)> {
    cohort
        .clients()
        .iter()
        .zip(&out.outputs)
        .map(|(c, o)| (c.client_id().to_string(), o.as_ref().map(|o| o.scores.clone())))
        .collect()
}

/// Each dropout window against its counterfactual run.
fn criterion_5() -> Verdict {
    let keys = shared_keys();
    let mut failures = Vec::new();
    let mut checked = 0usize;
    for trial in 0..4u64 {
        let cohort = blob_cohort(100 + trial, 4, 12, 3, 0.25);
        let victim = (trial as usize) % 4;
        for protocol in [HammingProtocol::Ot, HammingProtocol::Phe] {
            let base = XclpConfig {
                code_length: 64,
                k: 4,
                hamming_protocol: protocol,
                ot_backend: OtBackend::Simulated,
                key_profile: KeyProfile::Test512,
                seed: trial,
                ..XclpConfig::default()
            };
            let windows = [
                DropoutWindow::BeforeHamming,
                DropoutWindow::DuringHamming { after_pairs: 1 },
                DropoutWindow::AfterHamming,
                DropoutWindow::DuringRowSums,
                DropoutWindow::AfterRowSums,
            ];
            for window in windows {
                let cfg = XclpConfig { dropouts: vec![DropoutEvent { client: victim, window }], ..base.clone() };
                let dropped = run_xclp_with_keys(&cohort, &cfg, Some(keys)).expect("dropout run");
                let (counter_cohort, counter) = match window {
                    DropoutWindow::BeforeHamming | DropoutWindow::DuringHamming { .. } => {
                        let c = cohort.without_client(victim);
                        let out = run_xclp_with_keys(&c, &base, Some(keys)).expect("counterfactual");
                        (c, out)
                    }
                    DropoutWindow::AfterHamming | DropoutWindow::DuringRowSums => {
                        let c = cohort.with_client_unlabeled(victim);
                        let out = run_xclp_with_keys(&c, &base, Some(keys)).expect("counterfactual");
                        (c, out)
                    }
                    DropoutWindow::AfterRowSums => {
                        let out = run_xclp_with_keys(&cohort, &base, Some(keys)).expect("counterfactual");
                        (cohort.clone(), out)
                    }
                };
                let expected: Vec<_> = outputs_by_id(&counter_cohort, &counter)
                    .into_iter()
                    .filter(|(id, _)| *id != cohort.clients()[victim].client_id())
                    .collect();
                let got: Vec<_> = outputs_by_id(&cohort, &dropped)
                    .into_iter()
                    .filter(|(id, _)| *id != cohort.clients()[victim].client_id())
                    .collect();
                let victim_silent = dropped.outputs[victim].is_none();
                let restarted = window != DropoutWindow::DuringRowSums || dropped.report.row_sum_rounds.len() == 2;
                if got != expected || !victim_silent || !restarted {
                    failures.push(format!("{protocol:?}/{window:?}/trial {trial}"));
                }
                checked += 1;
            }
        }
    }
    Verdict::new(failures.is_empty(), format!("{checked} dropout runs, mismatches: {failures:?}"))
}

/// Element counts per message kind match the closed-form formulas.
fn criterion_6() -> Verdict {
    let keys = shared_keys();
    // Uneven client sizes with labels on every client.
    let sizes = [5usize, 8, 3, 6];
    let spec = SyntheticSpec {
        n_clients: 1,
        per_client: sizes.iter().sum(),
        dim: 10,
        classes: 3,
        label_fraction: 0.4,
        heterogeneity: Heterogeneity::Iid,
        seed: 6,
        geometry: BlobGeometry { offset: 3.0, ..BlobGeometry::default() },
    };
    let pooled = split_synthetic(&spec).expect("pooled cohort");
    let all = &pooled.clients()[0];
    let mut offset = 0;
    let mut clients = Vec::new();
    for (j, &s) in sizes.iter().enumerate() {
        let rows: Vec<usize> = (offset..offset + s).collect();
        let labels: Vec<Option<usize>> = rows.iter().map(|&r| if r % 3 == 0 { all.truth().unwrap().get(r).copied() } else { None }).collect();
        clients.push(
            xclp::ClientDataset::new(format!("c{j}"), all.features().select_rows(rows.iter()), labels, 3, None).expect("client"),
        );
        offset += s;
    }
    let cohort = Cohort::new(clients, 3).expect("cohort");
    let n = cohort.total_rows() as u64;
    let c = cohort.class_count() as u64;
    let l = 64u64;
    let mut problems = Vec::new();
    for protocol in [HammingProtocol::Ot, HammingProtocol::Phe] {
        let cfg = XclpConfig {
            code_length: l as usize,
            k: 4,
            hamming_protocol: protocol,
            ot_backend: OtBackend::Simulated,
            key_profile: KeyProfile::Test512,
            seed: 6,
            ..XclpConfig::default()
        };
        let out = run_xclp_with_keys(&cohort, &cfg, Some(keys)).expect("run");
        let count = |kind: MessageKind, from: PartyId, to: PartyId| -> u64 {
            out.wire.iter().filter(|r| r.kind == kind && r.from == from && r.to == to).map(|r| r.elements).sum()
        };
        for j in 0..sizes.len() {
            let nj = sizes[j] as u64;
            let cj = PartyId::Client(j as u32);
            for k in j + 1..sizes.len() {
                let nk = sizes[k] as u64;
                let ck = PartyId::Client(k as u32);
                let checks: Vec<(&str, u64, u64)> = match protocol {
                    HammingProtocol::Ot => vec![("ot offers", count(MessageKind::OtOffer, cj, ck), nj * nk * l)],
                    _ => vec![
                        ("phe codes", count(MessageKind::PheCode, cj, ck), nj * l),
                        ("phe evaluated", count(MessageKind::PheEvaluated, ck, cj), nj * nk),
                    ],
                };
                for (what, got, want) in checks {
                    if got != want {
                        problems.push(format!("{protocol:?} {what} ({j},{k}): {got} != {want}"));
                    }
                }
            }
            let lj = cohort.clients()[j].labeled_count() as u64;
            let phase3 = [
                ("influence download", count(MessageKind::InfluenceBlock, PartyId::Server, cj), n * lj),
                ("rows download", count(MessageKind::AggregateRows, PartyId::Server, cj), nj * c),
                ("share upload", count(MessageKind::MaskedShare, cj, PartyId::Server), n * c),
            ];
            for (what, got, want) in phase3 {
                if got != want {
                    problems.push(format!("{protocol:?} {what} client {j}: {got} != {want}"));
                }
            }
        }
    }
    Verdict::new(problems.is_empty(), if problems.is_empty() { "all per-pair and per-client counts exact".into() } else { problems.join("; ") })
}

fn chi_square_p(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).expect("degrees of freedom").cdf(stat)
}

/// Server transcript hides codes and contributions; shares look uniform.
fn criterion_7() -> Verdict {
    let keys = shared_keys();
    let cohort = blob_cohort(7, 3, 8, 3, 0.3);
    let mut leaks = Vec::new();
    for protocol in [HammingProtocol::Ot, HammingProtocol::Phe] {
        let cfg = XclpConfig {
            code_length: 64,
            k: 3,
            hamming_protocol: protocol,
            ot_backend: OtBackend::Simulated,
            key_profile: KeyProfile::Test512,
            seed: 7,
            log_payloads: true,
            ..XclpConfig::default()
        };
        let out = run_xclp_with_keys(&cohort, &cfg, Some(keys)).expect("run");
        let codes = client_codes(&cohort, &cfg).expect("codes");
        let to_server: Vec<_> = out.wire.iter().filter(|r| r.to == PartyId::Server).collect();
        for r in &to_server {
            if matches!(r.kind, MessageKind::PlainCodes | MessageKind::OtOffer | MessageKind::PheCode | MessageKind::OtChoice) {
                leaks.push(format!("{protocol:?}: server received {:?}", r.kind));
            }
            let payload = r.payload.as_ref().expect("payload log");
            for code in &codes {
                for i in 0..code.rows() {
                    let row: Vec<u8> = code.row(i).iter().flat_map(|w| w.to_le_bytes()).collect();
                    if payload.windows(row.len()).any(|w| w == row.as_slice()) {
                        leaks.push(format!("{protocol:?}: code row in {:?}", r.kind));
                    }
                }
            }
        }
        // Unmasked contribution rows never appear in a share.
        let codec = FixedPointCodec::default();
        let shares: Vec<Vec<u64>> = to_server
            .iter()
            .filter(|r| r.kind == MessageKind::MaskedShare)
            .map(|r| decode_u64s(r.payload.as_ref().unwrap()).unwrap())
            .collect();
        for share in &shares {
            for row in share.chunks(cohort.class_count()) {
                if row.iter().any(|&v| v != 0) && row.iter().all(|&v| codec.decode(v).abs() < 1e4) {
                    leaks.push(format!("{protocol:?}: share row decodes to a plausible score"));
                }
            }
        }
        if !out.wire.iter().any(|r| r.phase == Phase::RowSums) {
            leaks.push("no row-sum traffic".into());
        }
    }

    // 10^4 masked share elements over fresh rounds, fixed contribution.
    let codec = FixedPointCodec::default();
    let ids = [0u32, 1, 2];
    let secrets = PairwiseSecrets::derive(&ids, 77);
    let contribution = DMatrix::from_fn(10, 10, |i, k| (i * 10 + k) as f64 * 0.25);
    let mut high = vec![0u64; 16];
    let mut low = vec![0u64; 16];
    let mut samples = 0usize;
    for round in 0..100u64 {
        let mask = mask_for(0, &ids, (10, 10), &secrets, round).expect("mask");
        let (share, _) = mask_contribution(0, &contribution, &[], &mask, &codec).expect("share");
        for v in share.values {
            high[(v >> 60) as usize] += 1;
            low[(v & 15) as usize] += 1;
            samples += 1;
        }
    }
    let (p_high, p_low) = (chi_square_p(&high), chi_square_p(&low));
    Verdict::new(
        leaks.is_empty() && p_high > 0.001 && p_low > 0.001,
        format!("leaks: {leaks:?}; {samples} share elements, chi-square p = {p_high:.3} (top nibble), {p_low:.3} (low nibble)"),
    )
}

/// Desk-scale training comparison on three seeds.
fn criterion_8() -> Verdict {
    let start = Instant::now();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let spec = SyntheticSpec {
            n_clients: 10,
            per_client: 20,
            dim: 8,
            classes: 3,
            label_fraction: 0.1,
            heterogeneity: Heterogeneity::Iid,
            seed,
            geometry: BlobGeometry { separation: 3.0, noise: 0.5, stretch: 6.0, offset: 3.0 },
        };
        let cohort = split_synthetic(&spec).expect("cohort");
        let test = spec.test_set(600).expect("test set");
        let config = RoundConfig {
            rounds: 200,
            tau: 0.5,
            local_epochs: 5,
            learning_rate: 0.1,
            seed,
            xclp: XclpConfig {
                code_length: 1024,
                k: 3,
                hamming_protocol: HammingProtocol::PlaintextDebug,
                seed,
                ..XclpConfig::small()
            },
            ..RoundConfig::default()
        };
        let acc = |p| train_fedavg_xclp(&cohort, &config, p, &test).expect("training").history.last().expect("rounds").accuracy;
        let (none, per_client, xclp) = (acc(Pseudolabeler::None), acc(Pseudolabeler::PerclientLp), acc(Pseudolabeler::Xclp));
        let win = xclp >= none + 0.05 && xclp >= per_client;
        wins += usize::from(win);
        lines.push(format!("seed {seed}: xclp {xclp:.3} labeled-only {none:.3} perclient {per_client:.3}"));
    }
    let (fast, time) = within(Duration::from_secs(900), start);
    Verdict::new(wins >= 2 && fast, format!("{wins}/3 seeds ({}), {time}", lines.join("; ")))
}

/// Gradient check, zero-weight rows, confidence range and extremes.
fn criterion_9() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut zero_ok = true;
    for trial in 0..50u64 {
        let mut rng = derive_rng(trial, "acceptance/c9", &[]);
        let (b, dim, classes) = (rng.random_range(1..8), rng.random_range(1..6), rng.random_range(2..6));
        let mut m = LinearSoftmax::zeros(dim, classes);
        m.weights.iter_mut().chain(m.bias.iter_mut()).for_each(|w| *w = rng.random_range(-1.0..1.0));
        let x = DMatrix::from_fn(b, dim, |_, _| rng.random_range(-2.0..2.0));
        let t: Vec<usize> = (0..b).map(|_| rng.random_range(0..classes)).collect();
        let w: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..1.0)).collect();
        let (_, grad) = m.loss_and_gradient(&x, &t, &w);
        let analytic: Vec<f64> = grad.weights.iter().chain(&grad.bias).copied().collect();
        let h = 1e-6;
        for (p, a) in analytic.iter().enumerate() {
            let bump = |delta: f64| {
                let mut q = m.clone();
                if p < q.weights.len() {
                    q.weights[p] += delta;
                } else {
                    let idx = p - q.weights.len();
                    q.bias[idx] += delta;
                }
                q.loss_and_gradient(&x, &t, &w).0
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
        }
        let (_, zero) = m.loss_and_gradient(&x, &t, &vec![0.0; b]);
        zero_ok &= zero.weights.iter().chain(&zero.bias).all(|&g| g == 0.0);
    }

    let mut in_range = true;
    let mut rng = derive_rng(9, "acceptance/c9/conf", &[]);
    for _ in 0..10_000 {
        let c = rng.random_range(1..12);
        let row: Vec<f64> = (0..c).map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..5.0) }).collect();
        let w = entropy_confidence(&row).expect("nonnegative row");
        in_range &= (0.0..=1.0).contains(&w);
    }
    let one_hot = entropy_confidence(&[0.0, 3.0, 0.0]).unwrap();
    let uniform = entropy_confidence(&[2.0, 2.0, 2.0, 2.0]).unwrap();
    let extremes = one_hot == 1.0 && uniform.abs() < 1e-15;
    Verdict::new(
        worst <= 1e-5 && zero_ok && in_range && extremes,
        format!(
            "max relative gradient error {worst:.2e}, zero-weight gradient exact: {zero_ok}, confidences in [0,1]: {in_range}, one-hot {one_hot}, uniform {uniform:.1e}"
        ),
    )
}

fn main() {
    // libtest flags such as --nocapture are accepted and ignored.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("crypto-layer exactness", criterion_1),
        ("end-to-end oracle equivalence", criterion_2),
        ("LSH concentration", criterion_3),
        ("label-propagation math", criterion_4),
        ("dropout semantics", criterion_5),
        ("communication accounting", criterion_6),
        ("privacy transcript checks", criterion_7),
        ("desk-scale SSL experiment", criterion_8),
        ("gradient and weighting checks", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let tag = format!("criterion_{}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| tag.contains(f.as_str()) || name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let verdict = run();
        let status = if verdict.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!verdict.pass);
        println!("{tag} {status} {name} [{:.1}s]: {}", start.elapsed().as_secs_f64(), verdict.detail);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
