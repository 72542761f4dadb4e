//! In-process message bus with serialized envelopes and per-party transcripts.
//!
//! Parties never share state directly. Every cross-party value is encoded
//! into an [`Envelope`], serialized, decoded again on delivery and logged.
//! The log is what privacy and communication checks inspect: per-party
//! transcripts record a payload hash and byte length, and the wire log can
//! optionally keep full payloads.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Wire value of the server's party id.
pub const SERVER_WIRE_ID: u32 = u32::MAX;

/// Fixed envelope header: round id, from, to, kind, byte length.
pub const ENVELOPE_HEADER_LEN: usize = 8 + 4 + 4 + 1 + 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BusError {
    #[error("envelope truncated: {0} bytes")]
    Truncated(usize),
    #[error("envelope declares {declared} payload bytes but carries {actual}")]
    LengthMismatch { declared: u64, actual: usize },
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("client {0} is the reserved server id")]
    ReservedClientId(u32),
    #[error("{0} has dropped out")]
    PartyDropped(PartyId),
    #[error("payload of {len} bytes is not a whole number of {width}-byte elements")]
    Payload { len: usize, width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PartyId {
    Client(u32),
    Server,
}

impl PartyId {
    pub fn to_wire(self) -> u32 {
        match self {
            PartyId::Client(id) => id,
            PartyId::Server => SERVER_WIRE_ID,
        }
    }

    pub fn from_wire(id: u32) -> Self {
        if id == SERVER_WIRE_ID {
            PartyId::Server
        } else {
            PartyId::Client(id)
        }
    }
}

impl std::fmt::Display for PartyId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PartyId::Client(id) => write!(f, "client {id}"),
            PartyId::Server => f.write_str("server"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum MessageKind {
    /// Paillier public key broadcast during setup.
    PublicKey = 1,
    /// Diffie-Hellman OT sender's public point.
    OtSetup = 2,
    /// OT receiver's blinded choice points.
    OtChoice = 3,
    /// OT sender's masked offers; one counted element per OT instance.
    OtOffer = 4,
    /// Encrypted code bits from the PHE encryptor.
    PheCode = 5,
    /// Homomorphically evaluated, randomized distances.
    PheEvaluated = 6,
    /// A client's additive share of a cross-client Hamming block.
    HammingShare = 7,
    /// A client's own intra-client Hamming distances.
    IntraBlock = 8,
    /// Labeled influence columns sent from the server to their owner.
    InfluenceBlock = 9,
    /// A client's masked, row-zeroed contribution matrix.
    MaskedShare = 10,
    /// Aggregate rows the server relays back to their owner.
    AggregateRows = 11,
    /// Raw sign codes; only the insecure debug backend sends these.
    PlainCodes = 12,
}

impl MessageKind {
    pub const ALL: [MessageKind; 12] = [
        MessageKind::PublicKey,
        MessageKind::OtSetup,
        MessageKind::OtChoice,
        MessageKind::OtOffer,
        MessageKind::PheCode,
        MessageKind::PheEvaluated,
        MessageKind::HammingShare,
        MessageKind::IntraBlock,
        MessageKind::InfluenceBlock,
        MessageKind::MaskedShare,
        MessageKind::AggregateRows,
        MessageKind::PlainCodes,
    ];

    pub fn from_u8(v: u8) -> Result<Self, BusError> {
        Self::ALL.iter().copied().find(|k| *k as u8 == v).ok_or(BusError::UnknownKind(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Setup,
    Hamming,
    Graph,
    RowSums,
    Output,
}

impl Phase {
    pub const ALL: [Phase; 5] = [Phase::Setup, Phase::Hamming, Phase::Graph, Phase::RowSums, Phase::Output];
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub round_id: u64,
    pub from: PartyId,
    pub to: PartyId,
    pub kind: MessageKind,
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn byte_len(&self) -> u64 {
        self.payload.len() as u64
    }

    /// `round_id u64 | from u32 | to u32 | kind u8 | byte_len u64 | payload`, little-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(ENVELOPE_HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.round_id.to_le_bytes());
        out.extend_from_slice(&self.from.to_wire().to_le_bytes());
        out.extend_from_slice(&self.to.to_wire().to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.byte_len().to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, BusError> {
        if bytes.len() < ENVELOPE_HEADER_LEN {
            return Err(BusError::Truncated(bytes.len()));
        }
        let round_id = u64::from_le_bytes(bytes[0..8].try_into().expect("8 bytes"));
        let from = PartyId::from_wire(u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")));
        let to = PartyId::from_wire(u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")));
        let kind = MessageKind::from_u8(bytes[16])?;
        let declared = u64::from_le_bytes(bytes[17..25].try_into().expect("8 bytes"));
        let payload = &bytes[ENVELOPE_HEADER_LEN..];
        if declared != payload.len() as u64 {
            return Err(BusError::LengthMismatch { declared, actual: payload.len() });
        }
        Ok(Self { round_id, from, to, kind, payload: payload.to_vec() })
    }
}

pub fn encode_u32s(values: &[u32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_u32s(bytes: &[u8]) -> Result<Vec<u32>, BusError> {
    if !bytes.len().is_multiple_of(4) {
        return Err(BusError::Payload { len: bytes.len(), width: 4 });
    }
    Ok(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
}

pub fn encode_u64s(values: &[u64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_u64s(bytes: &[u8]) -> Result<Vec<u64>, BusError> {
    if !bytes.len().is_multiple_of(8) {
        return Err(BusError::Payload { len: bytes.len(), width: 8 });
    }
    Ok(bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

pub fn encode_f64s(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f64s(bytes: &[u8]) -> Result<Vec<f64>, BusError> {
    if !bytes.len().is_multiple_of(8) {
        return Err(BusError::Payload { len: bytes.len(), width: 8 });
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

/// One delivered message as the wire saw it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireRecord {
    pub round_id: u64,
    pub from: PartyId,
    pub to: PartyId,
    pub kind: MessageKind,
    pub phase: Phase,
    pub byte_len: u64,
    /// Logical element count (ring values, ciphertexts, OT instances...).
    pub elements: u64,
    pub payload_hash: [u8; 32],
    /// Kept only when the bus was built with [`Bus::with_payload_log`].
    pub payload: Option<Vec<u8>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Sent,
    Received,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub seq: u64,
    pub direction: Direction,
    pub counterpart: PartyId,
    pub round_id: u64,
    pub kind: MessageKind,
    pub phase: Phase,
    pub byte_len: u64,
    pub elements: u64,
    pub payload_hash: [u8; 32],
}

/// Ordered log of what one party sent and received.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartyTranscript {
    pub party: PartyId,
    pub entries: Vec<TranscriptEntry>,
    /// `(entry index, phase)` at every point where the phase changes.
    pub phase_markers: Vec<(usize, Phase)>,
}

impl PartyTranscript {
    pub fn bytes_sent(&self, phase: Phase) -> u64 {
        self.sum(phase, Direction::Sent, |e| e.byte_len)
    }

    pub fn bytes_received(&self, phase: Phase) -> u64 {
        self.sum(phase, Direction::Received, |e| e.byte_len)
    }

    pub fn elements_sent(&self, phase: Phase) -> u64 {
        self.sum(phase, Direction::Sent, |e| e.elements)
    }

    pub fn elements_received(&self, phase: Phase) -> u64 {
        self.sum(phase, Direction::Received, |e| e.elements)
    }

    fn sum(&self, phase: Phase, dir: Direction, f: impl Fn(&TranscriptEntry) -> u64) -> u64 {
        self.entries.iter().filter(|e| e.phase == phase && e.direction == dir).map(f).sum()
    }
}

#[derive(Debug, Default)]
struct BusState {
    phase: Option<Phase>,
    records: Vec<WireRecord>,
    dropped: BTreeSet<PartyId>,
}

/// Shared message log. Cloned into scoped child buses for concurrent work.
#[derive(Debug)]
pub struct Bus {
    keep_payloads: bool,
    state: Mutex<BusState>,
}

impl Default for Bus {
    fn default() -> Self {
        Self::new()
    }
}

impl Bus {
    /// Bus that logs hashes and lengths only.
    pub fn new() -> Self {
        Self { keep_payloads: false, state: Mutex::new(BusState { phase: Some(Phase::Setup), ..Default::default() }) }
    }

    /// Bus that also retains every payload for inspection.
    pub fn with_payload_log() -> Self {
        Self { keep_payloads: true, ..Self::new() }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, BusState> {
        self.state.lock().expect("bus mutex poisoned")
    }

    pub fn set_phase(&self, phase: Phase) {
        self.lock().phase = Some(phase);
    }

    pub fn phase(&self) -> Phase {
        self.lock().phase.unwrap_or(Phase::Setup)
    }

    /// Marks a party as gone; later sends to or from it fail.
    pub fn drop_party(&self, party: PartyId) {
        self.lock().dropped.insert(party);
    }

    pub fn is_dropped(&self, party: PartyId) -> bool {
        self.lock().dropped.contains(&party)
    }

    /// Serializes, delivers and logs one message; returns the payload as
    /// decoded by the receiver.
    pub fn send(
        &self,
        round_id: u64,
        from: PartyId,
        to: PartyId,
        kind: MessageKind,
        payload: Vec<u8>,
        elements: u64,
    ) -> Result<Vec<u8>, BusError> {
        for p in [from, to] {
            if let PartyId::Client(SERVER_WIRE_ID) = p {
                return Err(BusError::ReservedClientId(SERVER_WIRE_ID));
            }
        }
        let mut state = self.lock();
        for p in [from, to] {
            if state.dropped.contains(&p) {
                return Err(BusError::PartyDropped(p));
            }
        }
        let wire = Envelope { round_id, from, to, kind, payload }.encode();
        let delivered = Envelope::decode(&wire)?;
        let payload_hash: [u8; 32] = Sha256::digest(&delivered.payload).into();
        let phase = state.phase.unwrap_or(Phase::Setup);
        state.records.push(WireRecord {
            round_id,
            from,
            to,
            kind,
            phase,
            byte_len: delivered.byte_len(),
            elements,
            payload_hash,
            payload: self.keep_payloads.then(|| delivered.payload.clone()),
        });
        Ok(delivered.payload)
    }

    /// Empty bus with the same phase, payload policy and dropout set.
    pub fn fork(&self) -> Bus {
        let state = self.lock();
        Bus {
            keep_payloads: self.keep_payloads,
            state: Mutex::new(BusState { phase: state.phase, records: Vec::new(), dropped: state.dropped.clone() }),
        }
    }

    /// Appends a forked bus's log. Joining children in a fixed order makes
    /// the combined log independent of thread timing.
    pub fn join(&self, child: Bus) {
        let child = child.state.into_inner().expect("bus mutex poisoned");
        let mut state = self.lock();
        state.records.extend(child.records);
        state.dropped.extend(child.dropped);
    }

    pub fn records(&self) -> Vec<WireRecord> {
        self.lock().records.clone()
    }

    pub fn record_count(&self) -> usize {
        self.lock().records.len()
    }

    /// Sum of elements over records matching the filter.
    pub fn count_elements(&self, filter: impl Fn(&WireRecord) -> bool) -> u64 {
        self.lock().records.iter().filter(|r| filter(r)).map(|r| r.elements).sum()
    }

    pub fn parties(&self) -> BTreeSet<PartyId> {
        self.lock().records.iter().flat_map(|r| [r.from, r.to]).collect()
    }

    pub fn transcript(&self, party: PartyId) -> PartyTranscript {
        let state = self.lock();
        let mut entries = Vec::new();
        let mut phase_markers: Vec<(usize, Phase)> = Vec::new();
        for (seq, r) in state.records.iter().enumerate() {
            let direction = if r.from == party {
                Direction::Sent
            } else if r.to == party {
                Direction::Received
            } else {
                continue;
            };
            if phase_markers.last().is_none_or(|(_, p)| *p != r.phase) {
                phase_markers.push((entries.len(), r.phase));
            }
            entries.push(TranscriptEntry {
                seq: seq as u64,
                direction,
                counterpart: if direction == Direction::Sent { r.to } else { r.from },
                round_id: r.round_id,
                kind: r.kind,
                phase: r.phase,
                byte_len: r.byte_len,
                elements: r.elements,
                payload_hash: r.payload_hash,
            });
        }
        PartyTranscript { party, entries, phase_markers }
    }

    /// Bytes sent per party per phase.
    pub fn bytes_by_phase(&self) -> BTreeMap<Phase, BTreeMap<PartyId, u64>> {
        let mut out: BTreeMap<Phase, BTreeMap<PartyId, u64>> = BTreeMap::new();
        for r in &self.lock().records {
            *out.entry(r.phase).or_default().entry(r.from).or_default() += r.byte_len;
        }
        out
    }
}
