//! `xclp`: run cross-client label propagation, federated training, and
//! self-checks from the command line.
//!
//! Exit codes: 0 success, 1 failed check or runtime error, 2 usage error.
//! Errors are reported on stderr as one JSON object.

mod check;
mod manifest;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use xclp::crypto::{KeyProfile, OtBackend};
use xclp::data::{BlobGeometry, CohortFormat, Heterogeneity, SyntheticSpec};
use xclp::graph::Solver;
use xclp::hamming::{HammingProtocol, Schedule};
use xclp::ssl::{Pseudolabeler, RoundConfig};
use xclp::XclpConfig;

use manifest::{CheckPlan, Job, RunManifest, Suite, TrainData, MANIFEST_FILE};

pub const OUTPUT_DIR_ENV: &str = "XCLP_OUTPUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "xclp", version, about = "Cross-client label propagation over secure Hamming distances")]
struct Cli {
    /// Output directory; defaults to `xclp-out/<subcommand>`.
    #[arg(long, global = true, env = OUTPUT_DIR_ENV)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the protocol once over a cohort directory.
    Propagate(PropagateArgs),
    /// Federated training with pseudo-labels; writes metrics.jsonl.
    Train(TrainArgs),
    /// Cross-check secure components against plaintext references.
    Check(CheckArgs),
    /// Write a synthetic blob cohort (and optional held-out set).
    Generate(GenerateArgs),
    /// Replay a run from its manifest.json.
    Rerun {
        manifest: PathBuf,
    },
}

/// Parses a snake_case enum value through its serde representation.
fn serde_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Args, Debug, Default)]
struct XclpArgs {
    /// Start from the small profile (L=1024, k=3, 512-bit test keys).
    #[arg(long)]
    small: bool,
    /// Code length.
    #[arg(long = "L", value_name = "L")]
    code_length: Option<usize>,
    /// Neighbors per row in the k-NN graph.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// ot, phe or plaintext_debug.
    #[arg(long, value_parser = serde_enum::<HammingProtocol>)]
    protocol: Option<HammingProtocol>,
    /// diffie_hellman or simulated.
    #[arg(long, value_parser = serde_enum::<OtBackend>)]
    ot_backend: Option<OtBackend>,
    /// test256, test512 or standard2048.
    #[arg(long, value_parser = serde_enum::<KeyProfile>)]
    key_profile: Option<KeyProfile>,
    /// deterministic or threaded.
    #[arg(long, value_parser = serde_enum::<Schedule>)]
    schedule: Option<Schedule>,
    /// auto, cholesky or conjugate_gradient.
    #[arg(long, value_parser = serde_enum::<Solver>)]
    solver: Option<Solver>,
}

impl XclpArgs {
    fn apply(&self, mut c: XclpConfig) -> XclpConfig {
        if self.small {
            let small = XclpConfig::small();
            c.code_length = small.code_length;
            c.k = small.k;
            c.key_profile = small.key_profile;
        }
        c.code_length = self.code_length.unwrap_or(c.code_length);
        c.k = self.k.unwrap_or(c.k);
        c.alpha = self.alpha.unwrap_or(c.alpha);
        c.hamming_protocol = self.protocol.unwrap_or(c.hamming_protocol);
        c.ot_backend = self.ot_backend.unwrap_or(c.ot_backend);
        c.key_profile = self.key_profile.unwrap_or(c.key_profile);
        c.schedule = self.schedule.unwrap_or(c.schedule);
        c.solver = self.solver.unwrap_or(c.solver);
        c
    }
}

#[derive(Args, Debug)]
struct PropagateArgs {
    /// Cohort directory.
    #[arg(long)]
    data: PathBuf,
    /// csv or rawmatrix.
    #[arg(long, default_value = "csv")]
    format: CohortFormat,
    /// JSON protocol config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    xclp: XclpArgs,
}

#[derive(Args, Debug)]
struct SyntheticArgs {
    #[arg(long, default_value_t = 10)]
    clients: usize,
    #[arg(long, default_value_t = 20)]
    per_client: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 0.1)]
    label_fraction: f64,
    /// Give each client only half of the classes.
    #[arg(long)]
    class_skew: bool,
    /// Held-out rows drawn from the same distributions.
    #[arg(long, default_value_t = 600)]
    test_rows: usize,
}

impl SyntheticArgs {
    fn spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_clients: self.clients,
            per_client: self.per_client,
            dim: self.dim,
            classes: self.classes,
            label_fraction: self.label_fraction,
            heterogeneity: if self.class_skew { Heterogeneity::ClassSkew } else { Heterogeneity::Iid },
            seed,
            geometry: BlobGeometry { separation: 3.0, noise: 0.5, stretch: 6.0, offset: 3.0 },
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Cohort directory; without it a synthetic blob cohort is generated.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: CohortFormat,
    /// Cohort directory with held-out rows (ground truth or labels).
    #[arg(long, requires = "data")]
    test: Option<PathBuf>,
    /// xclp, perclient_lp, network or none.
    #[arg(long, default_value = "xclp")]
    pseudolabeler: Pseudolabeler,
    /// JSON round config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Fraction of clients sampled per round.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    xclp: XclpArgs,
    #[command(flatten)]
    synthetic: SyntheticArgs,
}

#[derive(Args, Debug)]
struct CheckArgs {
    /// Suites to run; repeat the flag for several. Default: all.
    #[arg(long, value_enum)]
    suite: Vec<Suite>,
    /// Trials per suite; each suite has its own default.
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = serde_enum::<OtBackend>, default_value = "diffie_hellman")]
    ot_backend: OtBackend,
    /// Corrupt the first trial of every suite (debug builds only).
    #[cfg(debug_assertions)]
    #[arg(long)]
    inject_fault: bool,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, default_value = "csv")]
    format: CohortFormat,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    synthetic: SyntheticArgs,
}

/// How a failure maps to an exit code.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
    Check(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) | Failure::Check(_) => 1,
        }
    }

    fn to_json(&self) -> serde_json::Value {
        let (kind, message) = match self {
            Failure::Usage(e) => ("usage", format!("{e:#}")),
            Failure::Runtime(e) => ("runtime", format!("{e:#}")),
            Failure::Check(m) => ("check_failed", m.clone()),
        };
        serde_json::json!({ "error": { "kind": kind, "message": message, "exit_code": self.code() } })
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn default_out(name: &str) -> PathBuf {
    Path::new("xclp-out").join(name)
}

fn resolve(command: Command, out: Option<PathBuf>) -> anyhow::Result<RunManifest> {
    let (job, seed) = match command {
        Command::Propagate(a) => {
            let base = match &a.config {
                Some(p) => read_json(p)?,
                None => XclpConfig::default(),
            };
            let mut xclp = a.xclp.apply(base);
            xclp.seed = a.seed.unwrap_or(xclp.seed);
            xclp.validate(usize::MAX).map_err(anyhow::Error::msg)?;
            let seed = xclp.seed;
            (Job::Propagate { data: a.data, format: a.format, xclp }, seed)
        }
        Command::Train(a) => {
            let mut rounds: RoundConfig = match &a.config {
                Some(p) => read_json(p)?,
                None => RoundConfig::default(),
            };
            rounds.rounds = a.rounds.unwrap_or(rounds.rounds);
            rounds.tau = a.tau.unwrap_or(rounds.tau);
            rounds.local_epochs = a.local_epochs.unwrap_or(rounds.local_epochs);
            rounds.learning_rate = a.learning_rate.unwrap_or(rounds.learning_rate);
            if let Some(s) = a.seed {
                rounds.seed = s;
                rounds.xclp.seed = s;
            }
            rounds.xclp = a.xclp.apply(rounds.xclp);
            rounds.validate()?;
            rounds.xclp.validate(usize::MAX).map_err(anyhow::Error::msg)?;
            let data = match a.data {
                Some(path) => TrainData::Cohort { path, format: a.format, test: a.test },
                None => TrainData::Synthetic { spec: a.synthetic.spec(rounds.seed), test_rows: a.synthetic.test_rows },
            };
            let seed = rounds.seed;
            (Job::Train { data, pseudolabeler: a.pseudolabeler, rounds }, seed)
        }
        Command::Check(a) => {
            let mut suites = if a.suite.is_empty() { Suite::ALL.to_vec() } else { a.suite };
            suites.sort();
            suites.dedup();
            #[cfg(debug_assertions)]
            let inject_fault = a.inject_fault;
            #[cfg(not(debug_assertions))]
            let inject_fault = false;
            let plan = CheckPlan { suites, trials: a.trials, seed: a.seed, ot_backend: a.ot_backend, inject_fault };
            (Job::Check(plan), a.seed)
        }
        Command::Generate(a) => {
            let spec = a.synthetic.spec(a.seed);
            (Job::Generate { spec, format: a.format, test_rows: a.synthetic.test_rows }, a.seed)
        }
        Command::Rerun { manifest } => {
            let mut m = RunManifest::read(&manifest)?;
            if let Some(out) = out {
                m.output_dir = out;
            }
            return Ok(m);
        }
    };
    let name = job.name();
    Ok(RunManifest::new(job, seed, out.unwrap_or_else(|| default_out(name))))
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn execute(manifest: &RunManifest) -> Result<(), Failure> {
    let out = &manifest.output_dir;
    match &manifest.job {
        Job::Propagate { data, format, xclp } => {
            print_json(&run::propagate(data, *format, xclp, out).map_err(Failure::Runtime)?).map_err(Failure::Runtime)
        }
        Job::Train { data, pseudolabeler, rounds } => {
            print_json(&run::train(data, *pseudolabeler, rounds, out).map_err(Failure::Runtime)?).map_err(Failure::Runtime)
        }
        Job::Generate { spec, format, test_rows } => {
            print_json(&run::generate(spec, *format, *test_rows, out).map_err(Failure::Runtime)?).map_err(Failure::Runtime)
        }
        Job::Check(plan) => {
            let summaries = check::run_checks(plan, out).map_err(Failure::Runtime)?;
            println!("{:<10} {:>7} {:>7}  status", "suite", "trials", "passed");
            for s in &summaries {
                println!("{:<10} {:>7} {:>7}  {}", s.suite, s.trials, s.passed, if s.ok() { "PASS" } else { "FAIL" });
            }
            let failed: Vec<&str> = summaries.iter().filter(|s| !s.ok()).map(|s| s.suite).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Failure::Check(format!(
                    "suites failed: {}; see {}",
                    failed.join(", "),
                    out.join("check.jsonl").display()
                )))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            let failure = Failure::Usage(anyhow::Error::msg(first));
            eprintln!("{}", failure.to_json());
            return ExitCode::from(failure.code());
        }
    };
    let result = resolve(cli.command, cli.out)
        .map_err(Failure::Usage)
        .and_then(|m| m.write().map_err(Failure::Runtime).map(|()| m))
        .and_then(|m| {
            debug_assert!(m.output_dir.join(MANIFEST_FILE).exists());
            execute(&m)
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("{}", failure.to_json());
            ExitCode::from(failure.code())
        }
    }
}
