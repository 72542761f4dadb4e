//! The record written before every run, sufficient to replay it.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use xclp::data::CohortFormat;
use xclp::data::SyntheticSpec;
use xclp::ssl::{Pseudolabeler, RoundConfig};
use xclp::XclpConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub inputs: Vec<PathBuf>,
    #[serde(flatten)]
    pub job: Job,
}

/// Fully resolved parameters of one subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "subcommand", content = "config", rename_all = "snake_case")]
pub enum Job {
    Propagate { data: PathBuf, format: CohortFormat, xclp: XclpConfig },
    Train { data: TrainData, pseudolabeler: Pseudolabeler, rounds: RoundConfig },
    Check(CheckPlan),
    Generate { spec: SyntheticSpec, format: CohortFormat, test_rows: usize },
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Propagate { .. } => "propagate",
            Job::Train { .. } => "train",
            Job::Check(_) => "check",
            Job::Generate { .. } => "generate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum TrainData {
    /// A cohort directory; without `test`, accuracy is measured on the
    /// cohort's own rows that carry ground truth.
    Cohort { path: PathBuf, format: CohortFormat, test: Option<PathBuf> },
    Synthetic { spec: SyntheticSpec, test_rows: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckPlan {
    pub suites: Vec<Suite>,
    pub trials: Option<usize>,
    pub seed: u64,
    pub ot_backend: xclp::crypto::OtBackend,
    /// Corrupts the first trial of every suite; the run must then fail.
    #[serde(default)]
    pub inject_fault: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Hamming,
    Oracle,
    Lsh,
    Lp,
    Rowsums,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Hamming, Suite::Oracle, Suite::Lsh, Suite::Lp, Suite::Rowsums];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Hamming => "hamming",
            Suite::Oracle => "oracle",
            Suite::Lsh => "lsh",
            Suite::Lp => "lp",
            Suite::Rowsums => "rowsums",
        }
    }
}

impl RunManifest {
    pub fn new(job: Job, seed: u64, output_dir: PathBuf) -> Self {
        let inputs = match &job {
            Job::Propagate { data, .. } => vec![data.clone()],
            Job::Train { data: TrainData::Cohort { path, test, .. }, .. } => {
                std::iter::once(path.clone()).chain(test.clone()).collect()
            }
            _ => Vec::new(),
        };
        Self { tool_version: env!("CARGO_PKG_VERSION").to_string(), seed, output_dir, inputs, job }
    }

    pub fn write(&self) -> anyhow::Result<()> {
        fs::create_dir_all(&self.output_dir)
            .with_context(|| format!("creating output directory {}", self.output_dir.display()))?;
        let path = self.output_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }
}
