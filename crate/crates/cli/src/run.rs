//! Execution of resolved jobs. Each function assumes the manifest is
//! already on disk.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context};
use nalgebra::DMatrix;
use serde::Serialize;
use xclp::data::{load_cohort, save_cohort, split_synthetic, CohortFormat, SyntheticSpec, TestSet, ABSTAIN_CODE};
use xclp::ssl::{evaluate, train_fedavg_xclp_observed, Pseudolabeler, RoundConfig};
use xclp::{run_xclp, ClientDataset, Cohort, XclpConfig};

use crate::manifest::TrainData;

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Label file in the client's input row order; abstains are written as
/// [`ABSTAIN_CODE`].
fn write_labels(path: &Path, assignment: &xclp::LabelAssignment) -> anyhow::Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(out, "row,label,confidence")?;
    for (i, (label, conf)) in assignment.labels.iter().zip(&assignment.confidences).enumerate() {
        let label = label.map_or(ABSTAIN_CODE, |l| l as i64);
        writeln!(out, "{i},{label},{conf}")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
pub struct PropagateSummary {
    pub clients: usize,
    pub rows: usize,
    pub with_output: usize,
    pub abstain_count: usize,
    pub accuracy: Option<f64>,
}

pub fn propagate(data: &Path, format: CohortFormat, config: &XclpConfig, out: &Path) -> anyhow::Result<PropagateSummary> {
    let cohort = load_cohort(data, format)?;
    let outcome = run_xclp(&cohort, config)?;
    // Timings live apart from the report so reruns reproduce it byte for byte.
    let mut report = outcome.report.clone();
    write_json(&out.join("timings.json"), &std::mem::take(&mut report.wall_clock_ms))?;
    write_json(&out.join("report.json"), &report)?;
    let labels_dir = out.join("labels");
    fs::create_dir_all(&labels_dir)?;
    let mut with_output = 0;
    for (pos, client) in cohort.clients().iter().enumerate() {
        if let Some(assignment) = outcome.labels_in_input_order(&cohort, pos) {
            write_labels(&labels_dir.join(format!("{}.csv", client.client_id())), &assignment)?;
            with_output += 1;
        }
    }
    Ok(PropagateSummary {
        clients: cohort.clients().len(),
        rows: cohort.total_rows(),
        with_output,
        abstain_count: outcome.report.abstain_count,
        accuracy: outcome.report.accuracy,
    })
}

/// Every row of `cohort` with ground truth, or failing that a label.
fn rows_with_truth(cohort: &Cohort) -> anyhow::Result<TestSet> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for client in cohort.clients() {
        for i in 0..client.len() {
            let known = client.truth().map(|t| t[i]).or(client.labels()[i]);
            if let Some(label) = known {
                rows.push(client.features().row(i).into_owned());
                labels.push(label);
            }
        }
    }
    if rows.is_empty() {
        bail!("no rows with ground truth or labels to evaluate on");
    }
    Ok(TestSet { features: DMatrix::from_rows(&rows), labels })
}

fn cohort_only_truth(cohort: &Cohort) -> anyhow::Result<TestSet> {
    if cohort.clients().iter().any(|c| c.truth().is_none()) {
        bail!("cohort has clients without ground truth; pass --test");
    }
    rows_with_truth(cohort)
}

pub fn load_train_data(data: &TrainData) -> anyhow::Result<(Cohort, TestSet)> {
    match data {
        TrainData::Cohort { path, format, test } => {
            let cohort = load_cohort(path, *format)?;
            let test = match test {
                Some(t) => rows_with_truth(&load_cohort(t, *format)?)?,
                None => cohort_only_truth(&cohort)?,
            };
            Ok((cohort, test))
        }
        TrainData::Synthetic { spec, test_rows } => Ok((split_synthetic(spec)?, spec.test_set(*test_rows)?)),
    }
}

#[derive(Serialize)]
pub struct TrainSummary {
    pub rounds: usize,
    pub final_accuracy: f64,
    pub balanced_accuracy: f64,
}

/// Streams one JSON line per round to `metrics.jsonl`.
pub fn train(data: &TrainData, pseudolabeler: Pseudolabeler, config: &RoundConfig, out: &Path) -> anyhow::Result<TrainSummary> {
    let (cohort, test) = load_train_data(data)?;
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?);
    let mut write_err = None;
    let outcome = train_fedavg_xclp_observed(&cohort, config, pseudolabeler, &test, |m| {
        if write_err.is_none() {
            let line = serde_json::to_string(m).expect("metrics serialize");
            if let Err(e) = writeln!(metrics, "{line}").and_then(|_| metrics.flush()) {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("writing {}", metrics_path.display()));
    }
    let evaluation = evaluate(&outcome.model, &test);
    write_json(&out.join("model.json"), &outcome.model)?;
    write_json(&out.join("evaluation.json"), &evaluation)?;
    Ok(TrainSummary {
        rounds: outcome.history.len(),
        final_accuracy: evaluation.accuracy,
        balanced_accuracy: evaluation.balanced_accuracy,
    })
}

#[derive(Serialize)]
pub struct GenerateSummary {
    pub clients: usize,
    pub rows: usize,
    pub labeled: usize,
    pub test_rows: usize,
}

/// Writes the cohort to `out` and, when `test_rows > 0`, a single unlabeled
/// client holding the held-out rows to `out/test`.
pub fn generate(spec: &SyntheticSpec, format: CohortFormat, test_rows: usize, out: &Path) -> anyhow::Result<GenerateSummary> {
    let cohort = split_synthetic(spec)?;
    save_cohort(&cohort, out, format)?;
    if test_rows > 0 {
        let test = spec.test_set(test_rows)?;
        let client = ClientDataset::new("test", test.features, vec![None; test_rows], spec.classes, Some(test.labels))?;
        save_cohort(&Cohort::new(vec![client], spec.classes)?, &out.join("test"), format)?;
    }
    Ok(GenerateSummary {
        clients: cohort.clients().len(),
        rows: cohort.total_rows(),
        labeled: cohort.labeled_total(),
        test_rows,
    })
}
