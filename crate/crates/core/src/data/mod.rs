//! Client datasets, cohorts and label outputs.
//!
//! A [`ClientDataset`] keeps its labeled rows first. Loaders accept rows in
//! any order, move labeled rows to the front with a stable sort, and keep the
//! permutation so results can be reported in the caller's original order.

mod io;
mod synthetic;

pub use io::{
    decode_raw_matrix, encode_raw_matrix, load_cohort, parse_client_csv, read_raw_matrix,
    save_cohort, write_client_csv, write_raw_matrix, CohortFormat, CohortManifest,
    RAW_MATRIX_MAGIC,
};
pub use synthetic::{split_synthetic, BlobGeometry, Heterogeneity, SyntheticSpec, TestSet};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("malformed label row {row} of client {client}: {reason}")]
    MalformedLabelRow { client: String, row: usize, reason: String },
    #[error("zero feature row {row} of client {client}")]
    ZeroFeatureRow { client: String, row: usize },
    #[error("non-finite feature at row {row}, column {col} of client {client}")]
    NonFinite { client: String, row: usize, col: usize },
    #[error("label {label} out of range for {classes} classes (client {client}, row {row})")]
    LabelOutOfRange { client: String, row: usize, label: usize, classes: usize },
    #[error("duplicate client id {0}")]
    DuplicateClient(String),
    #[error("invalid raw matrix: {0}")]
    RawMatrix(String),
    #[error("invalid csv: {0}")]
    Csv(String),
    #[error("invalid cohort: {0}")]
    InvalidCohort(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// One client's partially labeled data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    client_id: String,
    features: DMatrix<f64>,
    labels: Vec<Option<usize>>,
    labeled_count: usize,
    original_order: Vec<usize>,
    truth: Option<Vec<usize>>,
}

impl ClientDataset {
    /// Builds a dataset from rows in arbitrary order.
    ///
    /// `labels[i]` is the class of row `i` or `None` when unlabeled. Labeled
    /// rows are moved to the front (stable), and `truth`, when given, is
    /// permuted alongside.
    pub fn new(
        client_id: impl Into<String>,
        features: DMatrix<f64>,
        labels: Vec<Option<usize>>,
        class_count: usize,
        truth: Option<Vec<usize>>,
    ) -> Result<Self, DataError> {
        let client_id = client_id.into();
        let n = features.nrows();
        if labels.len() != n {
            return Err(DataError::DimensionMismatch(format!(
                "client {client_id}: {n} feature rows but {} labels",
                labels.len()
            )));
        }
        if let Some(t) = &truth {
            if t.len() != n {
                return Err(DataError::DimensionMismatch(format!(
                    "client {client_id}: {n} feature rows but {} ground-truth labels",
                    t.len()
                )));
            }
            if let Some((row, &label)) = t.iter().enumerate().find(|(_, &c)| c >= class_count) {
                return Err(DataError::LabelOutOfRange {
                    client: client_id,
                    row,
                    label,
                    classes: class_count,
                });
            }
        }
        validate_features(&client_id, &features)?;
        for (row, label) in labels.iter().enumerate() {
            if let Some(c) = *label {
                if c >= class_count {
                    return Err(DataError::LabelOutOfRange {
                        client: client_id,
                        row,
                        label: c,
                        classes: class_count,
                    });
                }
            }
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| labels[i].is_none());
        let labeled_count = labels.iter().filter(|l| l.is_some()).count();
        let features = features.select_rows(order.iter());
        let labels = order.iter().map(|&i| labels[i]).collect();
        let truth = truth.map(|t| order.iter().map(|&i| t[i]).collect());
        Ok(Self { client_id, features, labels, labeled_count, original_order: order, truth })
    }

    /// Builds a dataset from a zero-or-one-hot label matrix.
    pub fn from_one_hot(
        client_id: impl Into<String>,
        features: DMatrix<f64>,
        one_hot: &DMatrix<f64>,
        truth: Option<Vec<usize>>,
    ) -> Result<Self, DataError> {
        let client_id = client_id.into();
        if one_hot.nrows() != features.nrows() {
            return Err(DataError::DimensionMismatch(format!(
                "client {client_id}: {} feature rows but {} label rows",
                features.nrows(),
                one_hot.nrows()
            )));
        }
        let class_count = one_hot.ncols();
        let mut labels = Vec::with_capacity(one_hot.nrows());
        for row in 0..one_hot.nrows() {
            let mut hot = None;
            let mut sum = 0.0;
            for c in 0..class_count {
                let v = one_hot[(row, c)];
                if v != 0.0 && v != 1.0 {
                    return Err(DataError::MalformedLabelRow {
                        client: client_id,
                        row,
                        reason: format!("entry {v} is not 0 or 1"),
                    });
                }
                if v == 1.0 {
                    hot = Some(c);
                }
                sum += v;
            }
            if sum > 1.0 {
                return Err(DataError::MalformedLabelRow {
                    client: client_id,
                    row,
                    reason: format!("row sums to {sum}"),
                });
            }
            labels.push(hot);
        }
        Self::new(client_id, features, labels, class_count, truth)
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    /// Feature matrix, `n_j x d`, labeled rows first.
    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn labeled_count(&self) -> usize {
        self.labeled_count
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// `original_order()[i]` is the input position of stored row `i`.
    pub fn original_order(&self) -> &[usize] {
        &self.original_order
    }

    /// Ground-truth classes for every row (stored order), when known.
    pub fn truth(&self) -> Option<&[usize]> {
        self.truth.as_deref()
    }

    /// Zero-or-one-hot label matrix, `n_j x class_count`.
    pub fn label_matrix(&self, class_count: usize) -> DMatrix<f64> {
        let mut y = DMatrix::zeros(self.len(), class_count);
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(c) = *l {
                y[(i, c)] = 1.0;
            }
        }
        y
    }

    /// One-hot rows of the labeled prefix only, `l_j x class_count`.
    pub fn labeled_one_hot(&self, class_count: usize) -> DMatrix<f64> {
        let mut y = DMatrix::zeros(self.labeled_count, class_count);
        for i in 0..self.labeled_count {
            let c = self.labels[i].expect("labeled prefix");
            y[(i, c)] = 1.0;
        }
        y
    }

    /// Copy with every label removed; features and truth are kept.
    pub fn without_labels(&self) -> Self {
        let mut out = self.clone();
        out.labels = vec![None; self.len()];
        out.labeled_count = 0;
        out
    }

    /// Copy with features replaced (same shape); used to feed embeddings.
    pub fn with_features(&self, features: DMatrix<f64>) -> Result<Self, DataError> {
        if features.nrows() != self.len() {
            return Err(DataError::DimensionMismatch(format!(
                "client {}: replacing {} rows with {}",
                self.client_id,
                self.len(),
                features.nrows()
            )));
        }
        validate_features(&self.client_id, &features)?;
        let mut out = self.clone();
        out.features = features;
        Ok(out)
    }
}

fn validate_features(client: &str, features: &DMatrix<f64>) -> Result<(), DataError> {
    for row in 0..features.nrows() {
        let mut all_zero = true;
        for col in 0..features.ncols() {
            let v = features[(row, col)];
            if !v.is_finite() {
                return Err(DataError::NonFinite { client: client.to_string(), row, col });
            }
            if v != 0.0 {
                all_zero = false;
            }
        }
        if all_zero {
            return Err(DataError::ZeroFeatureRow { client: client.to_string(), row });
        }
    }
    Ok(())
}

/// An ordered set of clients sharing feature dimension and class count.
///
/// Global row indices are contiguous per client in sequence order.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    clients: Vec<ClientDataset>,
    class_count: usize,
    offsets: Vec<usize>,
}

impl Cohort {
    pub fn new(clients: Vec<ClientDataset>, class_count: usize) -> Result<Self, DataError> {
        if class_count == 0 {
            return Err(DataError::InvalidCohort("class count must be positive".into()));
        }
        if let Some(first) = clients.first() {
            let d = first.dim();
            for c in &clients {
                if c.dim() != d {
                    return Err(DataError::DimensionMismatch(format!(
                        "client {} has dimension {} but client {} has {}",
                        c.client_id(),
                        c.dim(),
                        first.client_id(),
                        d
                    )));
                }
                if let Some(max) = c.labels.iter().flatten().max() {
                    if *max >= class_count {
                        return Err(DataError::LabelOutOfRange {
                            client: c.client_id.clone(),
                            row: 0,
                            label: *max,
                            classes: class_count,
                        });
                    }
                }
            }
        }
        let mut seen = std::collections::HashSet::new();
        for c in &clients {
            if !seen.insert(c.client_id.as_str()) {
                return Err(DataError::DuplicateClient(c.client_id.clone()));
            }
        }
        let mut offsets = Vec::with_capacity(clients.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for c in &clients {
            acc += c.len();
            offsets.push(acc);
        }
        Ok(Self { clients, class_count, offsets })
    }

    pub fn clients(&self) -> &[ClientDataset] {
        &self.clients
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Total row count `n`.
    pub fn total_rows(&self) -> usize {
        *self.offsets.last().expect("offsets never empty")
    }

    pub fn dim(&self) -> usize {
        self.clients.first().map_or(0, |c| c.dim())
    }

    pub fn labeled_total(&self) -> usize {
        self.clients.iter().map(|c| c.labeled_count()).sum()
    }

    /// Global row range of the client at sequence position `pos`.
    pub fn client_range(&self, pos: usize) -> std::ops::Range<usize> {
        self.offsets[pos]..self.offsets[pos + 1]
    }

    pub fn global_index(&self, pos: usize, row: usize) -> usize {
        assert!(row < self.clients[pos].len(), "row {row} out of range for client {pos}");
        self.offsets[pos] + row
    }

    /// Inverse of [`Cohort::global_index`].
    pub fn locate(&self, global: usize) -> (usize, usize) {
        assert!(global < self.total_rows(), "global row {global} out of range");
        let pos = self.offsets.partition_point(|&o| o <= global) - 1;
        (pos, global - self.offsets[pos])
    }

    pub fn position_of(&self, client_id: &str) -> Option<usize> {
        self.clients.iter().position(|c| c.client_id == client_id)
    }

    /// Global indices of labeled rows, grouped per client.
    pub fn labeled_global_indices(&self) -> Vec<Vec<usize>> {
        self.clients
            .iter()
            .enumerate()
            .map(|(pos, c)| (0..c.labeled_count()).map(|r| self.offsets[pos] + r).collect())
            .collect()
    }

    /// Stacked zero-or-one-hot label matrix, `n x C`.
    pub fn stacked_labels(&self) -> DMatrix<f64> {
        let mut y = DMatrix::zeros(self.total_rows(), self.class_count);
        for (pos, c) in self.clients.iter().enumerate() {
            for (i, l) in c.labels.iter().enumerate() {
                if let Some(k) = *l {
                    y[(self.offsets[pos] + i, k)] = 1.0;
                }
            }
        }
        y
    }

    /// Cohort restricted to the clients at `keep` positions, in the given order.
    pub fn subset(&self, keep: &[usize]) -> Self {
        let clients = keep.iter().map(|&p| self.clients[p].clone()).collect();
        Self::new(clients, self.class_count).expect("subset of a valid cohort")
    }

    /// Cohort with every client except `pos` retained.
    pub fn without_client(&self, pos: usize) -> Self {
        let keep: Vec<usize> = (0..self.clients.len()).filter(|&p| p != pos).collect();
        self.subset(&keep)
    }

    /// Cohort where the client at `pos` keeps its rows but loses its labels.
    pub fn with_client_unlabeled(&self, pos: usize) -> Self {
        let mut clients = self.clients.clone();
        clients[pos] = clients[pos].without_labels();
        Self::new(clients, self.class_count).expect("relabeling keeps validity")
    }

    pub fn map_features<F>(&self, mut f: F) -> Result<Self, DataError>
    where
        F: FnMut(&ClientDataset) -> DMatrix<f64>,
    {
        let clients = self
            .clients
            .iter()
            .map(|c| c.with_features(f(c)))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(clients, self.class_count)
    }
}

/// Marker used by writers for an abstained row.
pub const ABSTAIN_CODE: i64 = -1;

/// Labels and confidences a client derives from its rows of the score matrix.
///
/// `labels[i] == None` is the abstain outcome for an all-zero score row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelAssignment {
    pub labels: Vec<Option<usize>>,
    pub confidences: Vec<f64>,
}

impl LabelAssignment {
    pub fn abstain_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    /// Reorders rows from stored order back to the client's input order.
    pub fn in_original_order(&self, original_order: &[usize]) -> Self {
        let n = self.labels.len();
        let mut labels = vec![None; n];
        let mut confidences = vec![0.0; n];
        for (stored, &orig) in original_order.iter().enumerate() {
            labels[orig] = self.labels[stored];
            confidences[orig] = self.confidences[stored];
        }
        Self { labels, confidences }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_row_iterator(rows.len(), rows[0].len(), rows.iter().flat_map(|r| r.iter().copied()))
    }

    #[test]
    fn labeled_rows_move_first_and_permutation_is_kept() {
        let f = feats(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let ds = ClientDataset::new("a", f, vec![None, Some(1), None], 2, Some(vec![0, 1, 0])).unwrap();
        assert_eq!(ds.labeled_count(), 1);
        assert_eq!(ds.labels(), &[Some(1), None, None]);
        assert_eq!(ds.original_order(), &[1, 0, 2]);
        assert_eq!(ds.features()[(0, 1)], 1.0);
        assert_eq!(ds.truth().unwrap(), &[1, 0, 0]);

        let assignment = LabelAssignment { labels: vec![Some(1), Some(0), None], confidences: vec![1.0, 0.5, 0.0] };
        let orig = assignment.in_original_order(ds.original_order());
        assert_eq!(orig.labels, vec![Some(0), Some(1), None]);
    }

    #[test]
    fn zero_feature_row_rejected() {
        let f = feats(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let err = ClientDataset::new("a", f, vec![None, None], 2, None).unwrap_err();
        assert!(matches!(err, DataError::ZeroFeatureRow { row: 1, .. }));
    }

    #[test]
    fn non_finite_feature_rejected() {
        let f = feats(&[&[1.0, f64::NAN]]);
        assert!(matches!(
            ClientDataset::new("a", f, vec![None], 2, None),
            Err(DataError::NonFinite { row: 0, col: 1, .. })
        ));
    }

    #[test]
    fn one_hot_row_summing_to_two_is_malformed() {
        let f = feats(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let y = feats(&[&[1.0, 1.0], &[0.0, 0.0]]);
        let err = ClientDataset::from_one_hot("a", f, &y, None).unwrap_err();
        assert!(err.to_string().contains("malformed label row"), "{err}");
    }

    #[test]
    fn fully_unlabeled_client_is_valid() {
        let f = feats(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let ds = ClientDataset::new("u", f, vec![None, None], 3, None).unwrap();
        let cohort = Cohort::new(vec![ds], 3).unwrap();
        assert_eq!(cohort.labeled_total(), 0);
        assert_eq!(cohort.total_rows(), 2);
    }

    #[test]
    fn cohort_blocks_are_contiguous() {
        let a = ClientDataset::new("1", DMatrix::from_element(3, 4, 1.0), vec![Some(0), None, None], 2, None).unwrap();
        let b = ClientDataset::new("2", DMatrix::from_element(2, 4, 2.0), vec![None, Some(1)], 2, None).unwrap();
        let cohort = Cohort::new(vec![a, b], 2).unwrap();
        assert_eq!(cohort.total_rows(), 5);
        assert_eq!(cohort.client_range(0), 0..3);
        assert_eq!(cohort.client_range(1), 3..5);
        for g in 0..5 {
            let (p, r) = cohort.locate(g);
            assert_eq!(cohort.global_index(p, r), g);
        }
        assert_eq!(cohort.labeled_global_indices(), vec![vec![0], vec![3]]);
        let y = cohort.stacked_labels();
        assert_eq!(y[(0, 0)], 1.0);
        assert_eq!(y[(3, 1)], 1.0);
        assert_eq!(y.sum(), 2.0);
    }

    #[test]
    fn dimension_mismatch_across_clients() {
        let a = ClientDataset::new("1", DMatrix::from_element(1, 4, 1.0), vec![None], 2, None).unwrap();
        let b = ClientDataset::new("2", DMatrix::from_element(1, 3, 1.0), vec![None], 2, None).unwrap();
        assert!(matches!(Cohort::new(vec![a, b], 2), Err(DataError::DimensionMismatch(_))));
    }
}
