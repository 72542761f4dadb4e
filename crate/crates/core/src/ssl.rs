//! Federated semi-supervised training with propagated pseudo-labels.
//!
//! Each round the server samples clients, broadcasts the model, and every
//! sampled client embeds its data with the frozen featurizer, gets
//! pseudo-labels and confidences for its unlabeled rows, runs a few epochs
//! of confidence-weighted softmax regression, and sends the model back for
//! uniform averaging. Pseudo-labels come from one of:
//!
//! - `xclp`: the cross-client protocol over the sampled clients
//! - `perclient_lp`: label propagation inside each client only
//! - `network`: the current model's own predictions
//! - `none`: unlabeled rows are ignored

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Cohort, DataError, LabelAssignment, TestSet};
use crate::oracle::{oracle_run, OracleError};
use crate::protocol::{entropy_confidence, run_xclp, ProtocolError, XclpConfig};
use crate::seed::{derive_rng, derive_seed};

#[derive(Debug, Error)]
pub enum SslError {
    #[error("invalid round configuration: {0}")]
    Config(String),
    #[error("round {0}: no labeled point among the sampled clients")]
    NoLabeledClients(usize),
    #[error("test set has dimension {found}, cohort has {expected}")]
    TestDimension { expected: usize, found: usize },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pseudolabeler {
    Xclp,
    PerclientLp,
    Network,
    None,
}

impl std::str::FromStr for Pseudolabeler {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "xclp" => Ok(Self::Xclp),
            "perclient_lp" => Ok(Self::PerclientLp),
            "network" => Ok(Self::Network),
            "none" => Ok(Self::None),
            other => Err(format!("unknown pseudolabeler {other:?} (expected xclp, perclient_lp, network or none)")),
        }
    }
}

/// Frozen feature extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Featurizer {
    Identity,
    /// Gaussian projection to `dim` outputs, scaled by `1/sqrt(dim)`.
    RandomProjection { dim: usize, seed: u64 },
}

impl Featurizer {
    pub fn output_dim(&self, input_dim: usize) -> usize {
        match self {
            Featurizer::Identity => input_dim,
            Featurizer::RandomProjection { dim, .. } => *dim,
        }
    }

    pub fn embed(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Featurizer::Identity => x.clone(),
            Featurizer::RandomProjection { dim, seed } => {
                let mut rng = derive_rng(*seed, "ssl/featurizer", &[x.ncols() as u64]);
                let scale = 1.0 / (*dim as f64).sqrt();
                let p = DMatrix::from_fn(x.ncols(), *dim, |_, _| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    g * scale
                });
                x * p
            }
        }
    }
}

/// Linear softmax classifier `p = softmax(x W + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSoftmax {
    pub dim: usize,
    pub classes: usize,
    /// Row-major `dim x classes`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearSoftmax {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        Self { dim, classes, weights: vec![0.0; dim * classes], bias: vec![0.0; classes] }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        for (d, &xd) in x.iter().enumerate() {
            let row = &self.weights[d * self.classes..(d + 1) * self.classes];
            for (zc, w) in z.iter_mut().zip(row) {
                *zc += xd * w;
            }
        }
        z
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let z = self.logits(x);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    /// Argmax of the logits, lowest class on ties.
    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        let mut best = 0;
        for c in 1..z.len() {
            if z[c] > z[best] {
                best = c;
            }
        }
        best
    }

    /// `(1/B) sum_i w_i CE(x_i, t_i)` and its gradient, for the rows of `x`.
    pub fn loss_and_gradient(&self, x: &DMatrix<f64>, targets: &[usize], weights: &[f64]) -> (f64, LinearSoftmax) {
        let b = x.nrows();
        let mut grad = Self::zeros(self.dim, self.classes);
        if b == 0 {
            return (0.0, grad);
        }
        let mut loss = 0.0;
        let mut row = vec![0.0; self.dim];
        for i in 0..b {
            for (d, r) in row.iter_mut().enumerate() {
                *r = x[(i, d)];
            }
            let p = self.probabilities(&row);
            let w = weights[i] / b as f64;
            if w == 0.0 {
                continue;
            }
            loss -= w * p[targets[i]].max(f64::MIN_POSITIVE).ln();
            for c in 0..self.classes {
                let delta = w * (p[c] - f64::from(u8::from(c == targets[i])));
                grad.bias[c] += delta;
                for (d, &xd) in row.iter().enumerate() {
                    grad.weights[d * self.classes + c] += delta * xd;
                }
            }
        }
        (loss, grad)
    }

    fn step(&mut self, grad: &LinearSoftmax, lr: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grad.weights) {
            *w -= lr * g;
        }
        for (w, g) in self.bias.iter_mut().zip(&grad.bias) {
            *w -= lr * g;
        }
    }

    /// Element-wise mean.
    pub fn average(models: &[LinearSoftmax]) -> Option<LinearSoftmax> {
        let first = models.first()?;
        let mut out = Self::zeros(first.dim, first.classes);
        let k = models.len() as f64;
        for m in models {
            for (o, v) in out.weights.iter_mut().zip(&m.weights) {
                *o += v / k;
            }
            for (o, v) in out.bias.iter_mut().zip(&m.bias) {
                *o += v / k;
            }
        }
        Some(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub featurizer: Featurizer,
    pub classifier: LinearSoftmax,
}

impl ModelParams {
    pub fn predict_rows(&self, features: &DMatrix<f64>) -> Vec<usize> {
        let v = self.featurizer.embed(features);
        (0..v.nrows()).map(|i| self.classifier.predict(&row_vec(&v, i))).collect()
    }
}

fn row_vec(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundConfig {
    pub rounds: usize,
    /// Fraction of clients sampled per round.
    pub tau: f64,
    pub local_epochs: usize,
    /// Cap on the labeled batch size; the unlabeled batch matches it.
    #[serde(default = "default_batch")]
    pub max_labeled_batch: usize,
    pub learning_rate: f64,
    /// Round at which the cosine schedule reaches zero; `None` scales 2000
    /// rounds by `rounds / 1500`.
    #[serde(default)]
    pub lr_horizon: Option<usize>,
    #[serde(default = "default_featurizer")]
    pub featurizer: Featurizer,
    pub xclp: XclpConfig,
    pub seed: u64,
}

fn default_batch() -> usize {
    50
}
fn default_featurizer() -> Featurizer {
    Featurizer::Identity
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            rounds: 200,
            tau: 0.3,
            local_epochs: 5,
            max_labeled_batch: 50,
            learning_rate: 0.1,
            lr_horizon: None,
            featurizer: Featurizer::Identity,
            xclp: XclpConfig::small(),
            seed: 0,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<(), SslError> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(SslError::Config(format!("tau {} outside (0, 1]", self.tau)));
        }
        if self.local_epochs == 0 || self.rounds == 0 || self.max_labeled_batch == 0 {
            return Err(SslError::Config("rounds, local epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(SslError::Config(format!("learning rate {}", self.learning_rate)));
        }
        Ok(())
    }

    fn horizon(&self) -> f64 {
        self.lr_horizon.map_or(2000.0 * self.rounds as f64 / 1500.0, |h| h as f64).max(1.0)
    }

    /// Cosine-annealed rate for 0-based round `t`.
    pub fn learning_rate_at(&self, t: usize) -> f64 {
        let frac = (t as f64 / self.horizon()).min(1.0);
        self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// One line of the metrics history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub accuracy: f64,
    pub pseudo_label_accuracy: Option<f64>,
    pub mean_confidence: Option<f64>,
    pub abstain_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub history: Vec<RoundMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    /// Recall per class, `None` for classes absent from the test set.
    pub per_class: Vec<Option<f64>>,
}

pub fn evaluate(model: &ModelParams, test: &TestSet) -> Evaluation {
    evaluate_predictions(&model.predict_rows(&test.features), &test.labels, model.classifier.classes)
}

pub fn evaluate_predictions(predicted: &[usize], truth: &[usize], classes: usize) -> Evaluation {
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        totals[t] += 1;
        hits[t] += usize::from(p == t);
    }
    let per_class: Vec<Option<f64>> =
        hits.iter().zip(&totals).map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64)).collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let n: usize = totals.iter().sum();
    Evaluation {
        accuracy: if n == 0 { 0.0 } else { hits.iter().sum::<usize>() as f64 / n as f64 },
        balanced_accuracy: if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 },
        per_class,
    }
}

/// Stratified sample: `tau` of the labeled clients (at least one) and `tau`
/// of the unlabeled ones, sorted by position.
pub fn sample_clients<R: Rng>(cohort: &Cohort, tau: f64, rng: &mut R) -> Vec<usize> {
    let (labeled, unlabeled): (Vec<usize>, Vec<usize>) =
        (0..cohort.clients().len()).partition(|&p| cohort.clients()[p].labeled_count() > 0);
    let mut out = Vec::new();
    let mut take = |pool: &[usize], at_least: usize, rng: &mut R| {
        if pool.is_empty() {
            return;
        }
        let count = ((tau * pool.len() as f64).round() as usize).max(at_least).min(pool.len());
        out.extend(sample(rng, pool.len(), count).into_iter().map(|i| pool[i]));
    };
    if labeled.is_empty() || unlabeled.is_empty() {
        let all: Vec<usize> = (0..cohort.clients().len()).collect();
        take(&all, 1, rng);
    } else {
        take(&labeled, 1, rng);
        take(&unlabeled, 0, rng);
    }
    out.sort_unstable();
    out
}

/// Pseudo-labels for the stored rows of one client; labeled rows keep `None`.
fn per_client_lp(cohort: &Cohort, xclp: &XclpConfig) -> Result<Vec<LabelAssignment>, SslError> {
    let mut out = Vec::with_capacity(cohort.clients().len());
    for pos in 0..cohort.clients().len() {
        let single = cohort.subset(&[pos]);
        let n = single.total_rows();
        if n < 2 || single.labeled_total() == 0 {
            out.push(LabelAssignment { labels: vec![None; n], confidences: vec![0.0; n] });
            continue;
        }
        let cfg = XclpConfig { k: xclp.k.min(n - 1), ..xclp.clone() };
        let run = oracle_run(&single, &cfg)?;
        out.push(run.clients.into_iter().next().map(|(_, a)| a).expect("one client"));
    }
    Ok(out)
}

fn network_labels(classifier: &LinearSoftmax, embedded: &DMatrix<f64>) -> LabelAssignment {
    let mut labels = Vec::with_capacity(embedded.nrows());
    let mut confidences = Vec::with_capacity(embedded.nrows());
    for i in 0..embedded.nrows() {
        let row = row_vec(embedded, i);
        let p = classifier.probabilities(&row);
        labels.push(Some(classifier.predict(&row)));
        confidences.push(entropy_confidence(&p).unwrap_or(0.0));
    }
    LabelAssignment { labels, confidences }
}

/// Training data of one sampled client for one round.
struct LocalData {
    labeled: DMatrix<f64>,
    labels: Vec<usize>,
    pseudo: DMatrix<f64>,
    pseudo_labels: Vec<usize>,
    pseudo_weights: Vec<f64>,
}

fn local_update(global: &LinearSoftmax, data: &LocalData, config: &RoundConfig, lr: f64, seed: u64) -> LinearSoftmax {
    let mut model = global.clone();
    let n_l = data.labels.len();
    let n_u = data.pseudo_labels.len();
    if n_l == 0 && n_u == 0 {
        return model;
    }
    let b_l = n_l.min(config.max_labeled_batch);
    let b_u = if n_l > 0 { b_l.min(n_u) } else { n_u.min(config.max_labeled_batch) };
    let steps = [(n_l, b_l), (n_u, b_u)].iter().filter(|(_, b)| *b > 0).map(|(n, b)| n.div_ceil(*b)).max().unwrap_or(0);
    let mut rng = derive_rng(seed, "ssl/local", &[]);
    let mut perm_l: Vec<usize> = (0..n_l).collect();
    let mut perm_u: Vec<usize> = (0..n_u).collect();
    let dim = model.dim;
    for _ in 0..config.local_epochs {
        perm_l.shuffle(&mut rng);
        perm_u.shuffle(&mut rng);
        for s in 0..steps {
            let rows_l: Vec<usize> = (0..b_l).map(|i| perm_l[(s * b_l + i) % n_l]).collect();
            let rows_u: Vec<usize> = (0..b_u).map(|i| perm_u[(s * b_u + i) % n_u]).collect();
            let b = rows_l.len() + rows_u.len();
            let mut x = DMatrix::zeros(b, dim);
            let mut targets = Vec::with_capacity(b);
            let mut weights = Vec::with_capacity(b);
            for (r, &i) in rows_l.iter().enumerate() {
                x.row_mut(r).copy_from(&data.labeled.row(i));
                targets.push(data.labels[i]);
                weights.push(1.0);
            }
            for (r, &i) in rows_u.iter().enumerate() {
                x.row_mut(rows_l.len() + r).copy_from(&data.pseudo.row(i));
                targets.push(data.pseudo_labels[i]);
                weights.push(data.pseudo_weights[i]);
            }
            let (_, grad) = model.loss_and_gradient(&x, &targets, &weights);
            model.step(&grad, lr);
        }
    }
    model
}

/// Runs `config.rounds` rounds and evaluates on `test` after each.
pub fn train_fedavg_xclp(
    cohort: &Cohort,
    config: &RoundConfig,
    pseudolabeler: Pseudolabeler,
    test: &TestSet,
) -> Result<TrainOutcome, SslError> {
    train_fedavg_xclp_observed(cohort, config, pseudolabeler, test, |_| {})
}

/// [`train_fedavg_xclp`] that also hands each round's metrics to `on_round`
/// as soon as they are computed.
pub fn train_fedavg_xclp_observed<F: FnMut(&RoundMetrics)>(
    cohort: &Cohort,
    config: &RoundConfig,
    pseudolabeler: Pseudolabeler,
    test: &TestSet,
    mut on_round: F,
) -> Result<TrainOutcome, SslError> {
    config.validate()?;
    if test.features.ncols() != cohort.dim() {
        return Err(SslError::TestDimension { expected: cohort.dim(), found: test.features.ncols() });
    }
    let classes = cohort.class_count();
    let embedded_cohort = cohort.map_features(|c| config.featurizer.embed(c.features()))?;
    let feature_dim = embedded_cohort.dim();
    let mut model = ModelParams { featurizer: config.featurizer.clone(), classifier: LinearSoftmax::zeros(feature_dim, classes) };
    let embedded_test = config.featurizer.embed(&test.features);
    let mut history = Vec::with_capacity(config.rounds);

    for t in 0..config.rounds {
        let mut rng = derive_rng(config.seed, "ssl/sample", &[t as u64]);
        let sampled = sample_clients(&embedded_cohort, config.tau, &mut rng);
        let sub = embedded_cohort.subset(&sampled);
        if pseudolabeler == Pseudolabeler::Xclp && sub.labeled_total() == 0 {
            return Err(SslError::NoLabeledClients(t));
        }

        let assignments: Option<Vec<LabelAssignment>> = match pseudolabeler {
            Pseudolabeler::Xclp => {
                let cfg = XclpConfig { seed: derive_seed(config.xclp.seed, "ssl/xclp", &[t as u64]), ..config.xclp.clone() };
                let run = run_xclp(&sub, &cfg)?;
                Some(
                    run.outputs
                        .into_iter()
                        .zip(sub.clients())
                        .map(|(o, c)| match o {
                            Some(o) => o.assignment,
                            None => LabelAssignment { labels: vec![None; c.len()], confidences: vec![0.0; c.len()] },
                        })
                        .collect(),
                )
            }
            Pseudolabeler::PerclientLp => Some(per_client_lp(&sub, &config.xclp)?),
            Pseudolabeler::Network => {
                Some(sub.clients().iter().map(|c| network_labels(&model.classifier, c.features())).collect())
            }
            Pseudolabeler::None => None,
        };

        let mut pseudo_hits = 0usize;
        let mut pseudo_total = 0usize;
        let mut confidence_sum = 0.0;
        let mut unlabeled_rows = 0usize;
        let mut abstained = 0usize;
        let mut locals = Vec::with_capacity(sampled.len());
        for (x, client) in sub.clients().iter().enumerate() {
            let l = client.labeled_count();
            let labeled = client.features().rows(0, l).into_owned();
            let labels: Vec<usize> = client.labels()[..l].iter().map(|v| v.expect("labeled rows first")).collect();
            let mut pseudo_rows = Vec::new();
            let mut pseudo_labels = Vec::new();
            let mut pseudo_weights = Vec::new();
            if let Some(assignments) = &assignments {
                let a = &assignments[x];
                for i in l..client.len() {
                    unlabeled_rows += 1;
                    confidence_sum += a.confidences[i];
                    match a.labels[i] {
                        Some(label) => {
                            pseudo_rows.push(i);
                            pseudo_labels.push(label);
                            pseudo_weights.push(a.confidences[i]);
                            if let Some(truth) = client.truth() {
                                pseudo_total += 1;
                                pseudo_hits += usize::from(truth[i] == label);
                            }
                        }
                        None => abstained += 1,
                    }
                }
            }
            locals.push(LocalData {
                labeled,
                labels,
                pseudo: client.features().select_rows(pseudo_rows.iter()),
                pseudo_labels,
                pseudo_weights,
            });
        }

        let lr = config.learning_rate_at(t);
        let global = model.classifier.clone();
        let updates: Vec<LinearSoftmax> = std::thread::scope(|scope| {
            let handles: Vec<_> = locals
                .iter()
                .zip(&sampled)
                .map(|(data, &pos)| {
                    let global = &global;
                    let seed = derive_seed(config.seed, "ssl/client", &[t as u64, pos as u64]);
                    scope.spawn(move || local_update(global, data, config, lr, seed))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("client update panicked")).collect()
        });
        model.classifier = LinearSoftmax::average(&updates).unwrap_or(global);

        let predicted: Vec<usize> = (0..embedded_test.nrows()).map(|i| model.classifier.predict(&row_vec(&embedded_test, i))).collect();
        let eval = evaluate_predictions(&predicted, &test.labels, classes);
        let has_pseudo = assignments.is_some() && unlabeled_rows > 0;
        let metrics = RoundMetrics {
            round: t + 1,
            accuracy: eval.accuracy,
            pseudo_label_accuracy: (pseudo_total > 0).then(|| pseudo_hits as f64 / pseudo_total as f64),
            mean_confidence: has_pseudo.then(|| confidence_sum / unlabeled_rows as f64),
            abstain_rate: has_pseudo.then(|| abstained as f64 / unlabeled_rows as f64),
        };
        on_round(&metrics);
        history.push(metrics);
    }
    Ok(TrainOutcome { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_synthetic, BlobGeometry, Heterogeneity, SyntheticSpec};
    use crate::hamming::HammingProtocol;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_model(dim: usize, classes: usize, seed: u64) -> LinearSoftmax {
        let mut rng = derive_rng(seed, "test/ssl/model", &[]);
        let mut m = LinearSoftmax::zeros(dim, classes);
        m.weights.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        m.bias.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        m
    }

    fn finite_difference_check(m: &LinearSoftmax, x: &DMatrix<f64>, t: &[usize], w: &[f64]) -> f64 {
        let (_, grad) = m.loss_and_gradient(x, t, w);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let n_w = m.weights.len();
        for p in 0..n_w + m.bias.len() {
            let mut plus = m.clone();
            let mut minus = m.clone();
            let (analytic, slot_p, slot_m) = if p < n_w {
                (grad.weights[p], &mut plus.weights[p], &mut minus.weights[p])
            } else {
                (grad.bias[p - n_w], &mut plus.bias[p - n_w], &mut minus.bias[p - n_w])
            };
            *slot_p += h;
            *slot_m -= h;
            let numeric = (plus.loss_and_gradient(x, t, w).0 - minus.loss_and_gradient(x, t, w).0) / (2.0 * h);
            let scale = analytic.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((analytic - numeric).abs() / scale);
        }
        worst
    }

    #[test]
    fn zero_weight_rows_have_zero_gradient() {
        let m = random_model(3, 4, 1);
        let x = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 0.3, 0.1, -0.7]);
        let (loss, g) = m.loss_and_gradient(&x.rows(1, 1).into_owned(), &[2], &[0.0]);
        assert_eq!(loss, 0.0);
        assert!(g.weights.iter().chain(&g.bias).all(|&v| v == 0.0));
        // weight 1 on a pseudo-labeled row equals a labeled row
        let (l1, g1) = m.loss_and_gradient(&x, &[1, 2], &[1.0, 1.0]);
        let (l2, g2) = m.loss_and_gradient(&x, &[1, 2], &[1.0, 0.0]);
        let (l3, g3) = m.loss_and_gradient(&x.rows(1, 1).into_owned(), &[2], &[1.0]);
        assert!((l1 - (l2 + l3 / 2.0)).abs() < 1e-12);
        for ((a, b), c) in g1.weights.iter().zip(&g2.weights).zip(&g3.weights) {
            assert!((a - (b + c / 2.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn evaluation_examples() {
        assert_eq!(evaluate_predictions(&[0, 1, 1], &[0, 1, 1], 2).accuracy, 1.0);
        assert_eq!(evaluate_predictions(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).accuracy, 0.5);
        // skewed: class 0 recall 2/3, class 1 recall 1
        let e = evaluate_predictions(&[0, 0, 1, 1], &[0, 0, 0, 1], 2);
        assert!((e.balanced_accuracy - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
        assert_eq!(e.accuracy, 0.75);
        assert_eq!(e.per_class, vec![Some(2.0 / 3.0), Some(1.0)]);
    }

    #[test]
    fn averaging_identical_models_is_identity() {
        let m = random_model(4, 3, 2);
        assert_eq!(LinearSoftmax::average(&[m.clone(), m.clone(), m.clone()]).unwrap(), m);
    }

    #[test]
    fn cosine_schedule() {
        let cfg = RoundConfig { rounds: 1500, learning_rate: 1.0, ..RoundConfig::default() };
        assert_eq!(cfg.learning_rate_at(0), 1.0);
        assert!((cfg.learning_rate_at(1000) - 0.5).abs() < 1e-12);
        let short = RoundConfig { rounds: 150, learning_rate: 1.0, ..RoundConfig::default() };
        assert!((short.learning_rate_at(100) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn stratified_sampling_always_has_labels() {
        let mut c = split_synthetic(&spec(3)).unwrap();
        c = c.with_client_unlabeled(0).with_client_unlabeled(1).with_client_unlabeled(2);
        for t in 0..50 {
            let mut rng = derive_rng(t, "test/sample", &[]);
            let s = sample_clients(&c, 0.1, &mut rng);
            assert!(s.iter().any(|&p| c.clients()[p].labeled_count() > 0));
        }
    }

    fn spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_clients: 4,
            per_client: 15,
            dim: 5,
            classes: 3,
            label_fraction: 0.2,
            heterogeneity: Heterogeneity::Iid,
            seed,
            geometry: BlobGeometry { offset: 3.0, ..BlobGeometry::default() },
        }
    }

    fn quick_config() -> RoundConfig {
        RoundConfig {
            rounds: 5,
            tau: 0.5,
            local_epochs: 2,
            xclp: XclpConfig { code_length: 64, hamming_protocol: HammingProtocol::PlaintextDebug, ..XclpConfig::small() },
            ..RoundConfig::default()
        }
    }

    #[test]
    fn training_is_reproducible_and_records_every_round() {
        let s = spec(1);
        let c = split_synthetic(&s).unwrap();
        let test = s.test_set(30).unwrap();
        for p in [Pseudolabeler::Xclp, Pseudolabeler::PerclientLp, Pseudolabeler::Network, Pseudolabeler::None] {
            let a = train_fedavg_xclp(&c, &quick_config(), p, &test).unwrap();
            let b = train_fedavg_xclp(&c, &quick_config(), p, &test).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.history.len(), 5);
            assert_eq!(a.history[4].round, 5);
            assert_eq!(a.history[0].mean_confidence.is_none(), p == Pseudolabeler::None);
        }
    }

    #[test]
    fn none_ignores_unlabeled_rows() {
        let s = spec(2);
        let c = split_synthetic(&s).unwrap();
        let test = s.test_set(30).unwrap();
        // Changing unlabeled features cannot matter to the labeled-only baseline.
        let shifted = c
            .map_features(|d| {
                let mut f = d.features().clone();
                for i in d.labeled_count()..d.len() {
                    f.row_mut(i).iter_mut().for_each(|v| *v += 100.0);
                }
                f
            })
            .unwrap();
        let a = train_fedavg_xclp(&c, &quick_config(), Pseudolabeler::None, &test).unwrap();
        let b = train_fedavg_xclp(&shifted, &quick_config(), Pseudolabeler::None, &test).unwrap();
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn random_projection_featurizer_shape() {
        let f = Featurizer::RandomProjection { dim: 7, seed: 1 };
        let x = DMatrix::from_element(3, 5, 1.0);
        assert_eq!(f.embed(&x).shape(), (3, 7));
        assert_eq!(f.embed(&x), f.embed(&x));
        assert_eq!(f.output_dim(5), 7);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn analytic_gradient_matches_finite_differences(seed in any::<u64>(), b in 1usize..6, dim in 1usize..5, classes in 2usize..5) {
            let m = random_model(dim, classes, seed);
            let mut rng = derive_rng(seed, "test/ssl/fd", &[]);
            let x = DMatrix::from_fn(b, dim, |_, _| rng.random_range(-2.0..2.0));
            let t: Vec<usize> = (0..b).map(|_| rng.random_range(0..classes)).collect();
            let w: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..1.0)).collect();
            prop_assert!(finite_difference_check(&m, &x, &t, &w) <= 1e-5);
        }
    }
}
