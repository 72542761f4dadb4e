//! Cross-client label propagation.
//!
//! Clients holding partially labeled feature vectors jointly build a k-NN
//! similarity graph from locality-sensitive sign codes, without revealing the
//! codes, and propagate label mass over it so that each client learns scores
//! only for its own rows. The crate contains every party's logic, an
//! in-process message bus that records what each party saw, a centralized
//! plaintext reference, and a federated semi-supervised training loop that
//! uses the propagated labels as pseudo-labels.
//!
//! Module map:
//!
//! - [`data`]: client datasets, cohorts, file formats, synthetic cohorts
//! - [`lsh`]: shared-seed Gaussian projections and packed sign codes
//! - [`bus`]: message envelopes, party transcripts, dropout bookkeeping
//! - [`crypto`]: oblivious transfer and Paillier encryption
//! - [`hamming`]: secure pairwise Hamming distances (OT and PHE variants)
//! - [`graph`]: similarity graph construction and influence-column solves
//! - [`fixed_point`], [`rowsums`]: masked row-partitioned secure summation
//! - [`protocol`]: end-to-end orchestration with dropout injection
//! - [`oracle`]: centralized label propagation used as the reference
//! - [`ssl`]: FedAvg with pseudo-labels and its baselines

pub mod bus;
pub mod crypto;
pub mod data;
pub mod fixed_point;
pub mod graph;
pub mod hamming;
pub mod lsh;
pub mod oracle;
pub mod protocol;
pub mod rowsums;
pub mod seed;
pub mod ssl;

pub use data::{ClientDataset, Cohort, LabelAssignment};
pub use graph::{InfluenceColumns, SimilarityGraph};
pub use hamming::{HammingMatrix, HammingProtocol};
pub use lsh::{BitCodeMatrix, ProjectionSpec};
pub use protocol::{run_xclp, XclpConfig, XclpOutcome};
