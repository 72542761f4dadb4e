//! End-to-end cross-client label propagation over the simulated bus.
//!
//! Setup: parties agree on a projection seed, PHE keys are published and
//! pairwise secrets are derived out of band. Hamming phase: clients hash their
//! features and the server learns `H`. Graph phase: the server builds the
//! k-NN graph, solves for the labeled columns of `S` and sends client `j`
//! the block `S_L^(j)`. Row-sum phase: each client contributes
//! `S_L^(j) Y_L^(j)` to a masked sum and receives its own rows of `Z`, from
//! which it derives labels and confidences.
//!
//! Dropouts are injected per client at one of five points. Each has a
//! plaintext counterfactual the remaining clients' outputs must equal:
//!
//! - before or during the Hamming phase: as if the client never joined
//! - after the Hamming phase: as if the client had no labels
//! - during the row sums: the sum restarts without it, same counterfactual
//! - after the row sums: only the client itself misses its outputs

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{decode_f64s, encode_f64s, Bus, BusError, MessageKind, PartyId, PartyTranscript, Phase, WireRecord};
use crate::crypto::{KeyProfile, OtBackend, PaillierError};
use crate::data::{Cohort, LabelAssignment};
use crate::fixed_point::{FixedPointCodec, FixedPointError, DEFAULT_FRACTION_BITS};
use crate::graph::{build_graph, influence_columns_with, GraphError, Solver};
use crate::hamming::{compute_hamming_matrix, HammingDropout, HammingError, HammingProtocol, HammingSettings, KeyRing, Schedule};
use crate::lsh::{generate_projection, hash_features, BitCodeMatrix, LshError, ProjectionSpec};
use crate::rowsums::{row_sums_with_restart, PairwiseSecrets, RowSumsError};
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("every client dropped out")]
    AllDropped,
    #[error(transparent)]
    Lsh(#[from] LshError),
    #[error(transparent)]
    Hamming(#[from] HammingError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    RowSums(#[from] RowSumsError),
    #[error(transparent)]
    FixedPoint(#[from] FixedPointError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Keys(#[from] PaillierError),
}

/// Where a client goes offline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "window")]
pub enum DropoutWindow {
    BeforeHamming,
    /// After completing `after_pairs` of its cross-client pair blocks.
    DuringHamming { after_pairs: usize },
    AfterHamming,
    DuringRowSums,
    AfterRowSums,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropoutEvent {
    /// Cohort position.
    pub client: usize,
    #[serde(flatten)]
    pub window: DropoutWindow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XclpConfig {
    /// Code length `L`.
    pub code_length: usize,
    pub k: usize,
    pub alpha: f64,
    pub hamming_protocol: HammingProtocol,
    #[serde(default = "default_ot_backend")]
    pub ot_backend: OtBackend,
    #[serde(default = "default_key_profile")]
    pub key_profile: KeyProfile,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    #[serde(default = "default_fraction_bits")]
    pub fraction_bits: u32,
    pub seed: u64,
    #[serde(default = "default_solver")]
    pub solver: Solver,
    #[serde(default)]
    pub dropouts: Vec<DropoutEvent>,
    /// Keep message payloads in the wire log.
    #[serde(default)]
    pub log_payloads: bool,
}

fn default_ot_backend() -> OtBackend {
    OtBackend::DiffieHellman
}
fn default_key_profile() -> KeyProfile {
    KeyProfile::Standard2048
}
fn default_schedule() -> Schedule {
    Schedule::Deterministic
}
fn default_fraction_bits() -> u32 {
    DEFAULT_FRACTION_BITS
}
fn default_solver() -> Solver {
    Solver::Auto
}

impl Default for XclpConfig {
    fn default() -> Self {
        Self {
            code_length: 4096,
            k: 10,
            alpha: 0.99,
            hamming_protocol: HammingProtocol::Ot,
            ot_backend: default_ot_backend(),
            key_profile: default_key_profile(),
            schedule: default_schedule(),
            fraction_bits: DEFAULT_FRACTION_BITS,
            seed: 0,
            solver: Solver::Auto,
            dropouts: Vec::new(),
            log_payloads: false,
        }
    }
}

impl XclpConfig {
    /// Shorter codes, smaller `k` and test-size keys for quick runs.
    pub fn small() -> Self {
        Self { code_length: 1024, k: 3, key_profile: KeyProfile::Test512, ..Self::default() }
    }

    /// Checks the config against a graph of `n` vertices.
    pub fn validate(&self, n: usize) -> Result<(), String> {
        if self.code_length == 0 {
            return Err("code length must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(format!("alpha {} outside (0, 1)", self.alpha));
        }
        if self.k == 0 || self.k >= n {
            return Err(format!("k = {} needs 1 <= k < n = {n}", self.k));
        }
        FixedPointCodec::new(self.fraction_bits).map_err(|e| e.to_string())?;
        Ok(())
    }

    fn hamming_settings(&self) -> HammingSettings {
        HammingSettings {
            protocol: self.hamming_protocol,
            ot_backend: self.ot_backend,
            key_profile: self.key_profile,
            schedule: self.schedule,
        }
    }

    fn dropout_at(&self, client: usize) -> Option<DropoutWindow> {
        self.dropouts.iter().find(|d| d.client == client).map(|d| d.window)
    }
}

/// Scores of one row turned into a label: argmax with ties to the lowest
/// class, `None` for an all-zero row.
pub fn predict_label(row: &[f64]) -> Option<usize> {
    if row.iter().all(|&v| v == 0.0) {
        return None;
    }
    let mut best = 0;
    for (c, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = c;
        }
    }
    Some(best)
}

#[derive(Debug, Error, PartialEq)]
#[error("negative score {0}")]
pub struct NegativeScore(pub f64);

/// `1 - H(p) / ln C` for `p = row / sum(row)`; 0 for a zero row.
///
/// With a single class every nonzero row is fully confident.
pub fn entropy_confidence(row: &[f64]) -> Result<f64, NegativeScore> {
    if let Some(&v) = row.iter().find(|v| !(**v >= 0.0)) {
        return Err(NegativeScore(v));
    }
    let total: f64 = row.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    if row.len() < 2 {
        return Ok(1.0);
    }
    let entropy: f64 = row
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| {
            let p = v / total;
            -p * p.ln()
        })
        .sum();
    Ok((1.0 - entropy / (row.len() as f64).ln()).clamp(0.0, 1.0))
}

/// Labels and confidences for each row of `scores`. Negative entries, which
/// only arise from rounding, are treated as zero.
pub fn assign_labels(scores: &DMatrix<f64>) -> LabelAssignment {
    let mut labels = Vec::with_capacity(scores.nrows());
    let mut confidences = Vec::with_capacity(scores.nrows());
    for i in 0..scores.nrows() {
        let row: Vec<f64> = scores.row(i).iter().map(|&v| v.max(0.0)).collect();
        labels.push(predict_label(&row));
        confidences.push(entropy_confidence(&row).expect("row clamped to be nonnegative"));
    }
    LabelAssignment { labels, confidences }
}

/// Every client's codes under the run's shared projection.
pub fn client_codes(cohort: &Cohort, config: &XclpConfig) -> Result<Vec<BitCodeMatrix>, LshError> {
    let spec = ProjectionSpec::new(derive_seed(config.seed, "xclp/projection", &[]), config.code_length, cohort.dim())?;
    let projection = generate_projection(&spec);
    cohort.clients().iter().map(|c| hash_features(c.features(), &projection)).collect()
}

/// A client's output: its rows of `Z` and the labels derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientOutput {
    pub scores: DMatrix<f64>,
    pub assignment: LabelAssignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartyPhaseBytes {
    pub party: String,
    pub phase: Phase,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub elements_sent: u64,
    pub elements_received: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HammingStats {
    pub rows: usize,
    pub min_distance: u32,
    pub mean_distance: f64,
    pub max_distance: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub vertices: usize,
    pub edges: usize,
    pub isolated: usize,
    pub max_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedClient {
    pub client: usize,
    #[serde(flatten)]
    pub window: DropoutWindow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: XclpConfig,
    pub clients: usize,
    pub rows: usize,
    pub dropped: Vec<DroppedClient>,
    pub bytes: Vec<PartyPhaseBytes>,
    pub hamming: HammingStats,
    pub graph: GraphStats,
    pub row_sum_rounds: Vec<u64>,
    /// Accuracy on originally unlabeled rows with known truth; abstains count as wrong.
    pub accuracy: Option<f64>,
    pub abstain_count: usize,
    pub wall_clock_ms: BTreeMap<Phase, f64>,
}

#[derive(Debug, Clone)]
pub struct XclpOutcome {
    /// Per cohort position; `None` for clients without outputs.
    pub outputs: Vec<Option<ClientOutput>>,
    pub transcripts: Vec<PartyTranscript>,
    pub wire: Vec<WireRecord>,
    pub report: RunReport,
}

impl XclpOutcome {
    /// A client's labels in its original input order.
    pub fn labels_in_input_order(&self, cohort: &Cohort, client: usize) -> Option<LabelAssignment> {
        let out = self.outputs.get(client)?.as_ref()?;
        Some(out.assignment.in_original_order(cohort.clients()[client].original_order()))
    }
}

/// Runs the protocol, generating PHE keys from the seed when needed.
pub fn run_xclp(cohort: &Cohort, config: &XclpConfig) -> Result<XclpOutcome, ProtocolError> {
    let keys = if config.hamming_protocol == HammingProtocol::Phe {
        let seed = derive_seed(config.seed, "xclp/keys", &[]);
        Some(KeyRing::generate(cohort.clients().len(), config.key_profile, seed)?)
    } else {
        None
    };
    run_xclp_with_keys(cohort, config, keys.as_ref())
}

/// Runs the protocol with pre-generated PHE keys (indexed by cohort position).
pub fn run_xclp_with_keys(cohort: &Cohort, config: &XclpConfig, keys: Option<&KeyRing>) -> Result<XclpOutcome, ProtocolError> {
    let m = cohort.clients().len();
    config.validate(cohort.total_rows()).map_err(ProtocolError::Config)?;
    for d in &config.dropouts {
        if d.client >= m {
            return Err(ProtocolError::Config(format!("dropout for client {} of {m}", d.client)));
        }
    }
    let codec = FixedPointCodec::new(config.fraction_bits)?;
    let bus = if config.log_payloads { Bus::with_payload_log() } else { Bus::new() };
    let mut clock = BTreeMap::new();
    let client_id = |pos: usize| PartyId::Client(pos as u32);

    // Setup and hashing.
    let start = Instant::now();
    bus.set_phase(Phase::Setup);
    let codes = client_codes(cohort, config)?;
    let secrets = PairwiseSecrets::derive(&(0..m as u32).collect::<Vec<_>>(), derive_seed(config.seed, "xclp/pairwise", &[]));
    clock.insert(Phase::Setup, ms(start));

    // Hamming phase.
    let start = Instant::now();
    let hamming_drops: Vec<HammingDropout> = (0..m)
        .filter_map(|c| match config.dropout_at(c)? {
            DropoutWindow::BeforeHamming => Some(HammingDropout { client: c, after_pairs: 0 }),
            DropoutWindow::DuringHamming { after_pairs } => Some(HammingDropout { client: c, after_pairs }),
            _ => None,
        })
        .collect();
    let settings = config.hamming_settings();
    let full = compute_hamming_matrix(&codes, &settings, keys, &bus, config.seed, 1, &hamming_drops)?;
    clock.insert(Phase::Hamming, ms(start));

    // Compact indexing over the rows the server holds.
    let in_graph: Vec<bool> = (0..m).map(|c| cohort.client_range(c).all(|r| full.present()[r])).collect();
    if !in_graph.iter().any(|&p| p) {
        return Err(ProtocolError::AllDropped);
    }
    let mut compact_start = vec![0usize; m];
    let mut next = 0;
    for c in 0..m {
        compact_start[c] = next;
        if in_graph[c] {
            next += cohort.clients()[c].len();
        }
    }
    let n = next;
    let h = if full.is_complete() { full } else { full.restricted() };
    config.validate(n).map_err(ProtocolError::Config)?;

    // Graph phase.
    let start = Instant::now();
    bus.set_phase(Phase::Graph);
    for c in 0..m {
        if config.dropout_at(c) == Some(DropoutWindow::AfterHamming) {
            bus.drop_party(client_id(c));
        }
    }
    let graph = build_graph(&h, config.k)?;
    let labeled: Vec<Vec<usize>> = (0..m)
        .map(|c| {
            if in_graph[c] && !bus.is_dropped(client_id(c)) {
                (compact_start[c]..compact_start[c] + cohort.clients()[c].labeled_count()).collect()
            } else {
                Vec::new()
            }
        })
        .collect();
    let influence = influence_columns_with(&graph, &labeled, config.alpha, config.solver)?;
    let mut received: Vec<Option<DMatrix<f64>>> = vec![None; m];
    for c in (0..m).filter(|&c| in_graph[c]) {
        let block = &influence.blocks[c];
        match bus.send(
            1,
            PartyId::Server,
            client_id(c),
            MessageKind::InfluenceBlock,
            encode_f64s(block.as_slice()),
            block.len() as u64,
        ) {
            Ok(bytes) => {
                received[c] = Some(DMatrix::from_vec(n, block.ncols(), decode_f64s(&bytes)?));
            }
            Err(BusError::PartyDropped(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    clock.insert(Phase::Graph, ms(start));

    // Row sums.
    let start = Instant::now();
    bus.set_phase(Phase::RowSums);
    let classes = cohort.class_count();
    let mut participants = Vec::new();
    let mut contributions = Vec::new();
    let mut partition = Vec::new();
    for (c, block) in received.iter().enumerate() {
        let Some(s_l) = block else { continue };
        let y_l = cohort.clients()[c].labeled_one_hot(classes);
        contributions.push(s_l * y_l);
        partition.push((compact_start[c]..compact_start[c] + cohort.clients()[c].len()).collect::<Vec<_>>());
        participants.push(c as u32);
    }
    if participants.is_empty() {
        return Err(ProtocolError::AllDropped);
    }
    for &c in &participants {
        if config.dropout_at(c as usize) == Some(DropoutWindow::DuringRowSums) {
            bus.drop_party(PartyId::Client(c));
        }
    }
    let late: Vec<u32> =
        participants.iter().copied().filter(|&c| config.dropout_at(c as usize) == Some(DropoutWindow::AfterRowSums)).collect();
    let sums = row_sums_with_restart(&contributions, &partition, &participants, &bus, &codec, &secrets, 2, &late)?;
    clock.insert(Phase::RowSums, ms(start));

    // Output.
    let start = Instant::now();
    bus.set_phase(Phase::Output);
    let mut outputs: Vec<Option<ClientOutput>> = vec![None; m];
    for (x, block) in sums.outputs.into_iter().enumerate() {
        if let Some(scores) = block {
            let assignment = assign_labels(&scores);
            outputs[participants[x] as usize] = Some(ClientOutput { scores, assignment });
        }
    }
    clock.insert(Phase::Output, ms(start));

    let parties = bus.parties();
    let transcripts: Vec<PartyTranscript> = parties.iter().map(|&p| bus.transcript(p)).collect();
    let report = RunReport {
        config: config.clone(),
        clients: m,
        rows: cohort.total_rows(),
        dropped: config.dropouts.iter().map(|d| DroppedClient { client: d.client, window: d.window }).collect(),
        bytes: phase_bytes(&transcripts),
        hamming: hamming_stats(&h),
        graph: GraphStats {
            vertices: graph.n(),
            edges: graph.adjacency().nnz() / 2,
            isolated: graph.isolated_vertices().len(),
            max_residual: influence.max_residual,
        },
        row_sum_rounds: sums.rounds,
        accuracy: accuracy(cohort, &outputs),
        abstain_count: outputs.iter().flatten().map(|o| o.assignment.abstain_count()).sum(),
        wall_clock_ms: clock,
    };
    Ok(XclpOutcome { outputs, transcripts, wire: bus.records(), report })
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn party_name(p: PartyId) -> String {
    match p {
        PartyId::Client(id) => format!("client-{id}"),
        PartyId::Server => "server".into(),
    }
}

fn phase_bytes(transcripts: &[PartyTranscript]) -> Vec<PartyPhaseBytes> {
    let mut out = Vec::new();
    for t in transcripts {
        for phase in Phase::ALL {
            let row = PartyPhaseBytes {
                party: party_name(t.party),
                phase,
                bytes_sent: t.bytes_sent(phase),
                bytes_received: t.bytes_received(phase),
                elements_sent: t.elements_sent(phase),
                elements_received: t.elements_received(phase),
            };
            if row.bytes_sent + row.bytes_received > 0 {
                out.push(row);
            }
        }
    }
    out
}

fn hamming_stats(h: &crate::hamming::HammingMatrix) -> HammingStats {
    let n = h.n();
    let (mut min, mut max, mut sum, mut count) = (u32::MAX, 0u32, 0u64, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            let d = h.get(i, j);
            min = min.min(d);
            max = max.max(d);
            sum += u64::from(d);
            count += 1;
        }
    }
    HammingStats {
        rows: n,
        min_distance: if count == 0 { 0 } else { min },
        mean_distance: if count == 0 { 0.0 } else { sum as f64 / count as f64 },
        max_distance: max,
    }
}

fn accuracy(cohort: &Cohort, outputs: &[Option<ClientOutput>]) -> Option<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (client, out) in cohort.clients().iter().zip(outputs) {
        let (Some(out), Some(truth)) = (out, client.truth()) else { continue };
        for i in client.labeled_count()..client.len() {
            total += 1;
            hit += usize::from(out.assignment.labels[i] == Some(truth[i]));
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}
