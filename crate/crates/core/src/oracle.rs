//! Centralized plaintext label propagation, used as the reference for the
//! secure protocol.
//!
//! Everything here is dense and direct: `Z = (I - alpha W~)^-1 Y` by LU, or
//! the iteration `z_{t+1} = alpha W~ z_t + Y` from `z_0 = 0`.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::data::{Cohort, LabelAssignment};
use crate::graph::{build_graph, GraphError};
use crate::hamming::{HammingError, HammingMatrix};
use crate::lsh::LshError;
use crate::protocol::{assign_labels, client_codes, XclpConfig};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("alpha {0} outside (0, 1)")]
    InvalidAlpha(f64),
    #[error("adjacency is {w}x{w} but labels have {y} rows")]
    Shape { w: usize, y: usize },
    #[error("system matrix is singular")]
    Singular,
    #[error("no convergence after {iterations} iterations, last step {residual:e}")]
    MaxIterations { iterations: usize, residual: f64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Hamming(#[from] HammingError),
    #[error(transparent)]
    Lsh(#[from] LshError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    /// `n x C` scores.
    pub scores: DMatrix<f64>,
    pub assignment: LabelAssignment,
    /// `||z_{t+1} - z_t||_inf` per step, for the iterative solver.
    pub trace: Option<Vec<f64>>,
}

impl OracleResult {
    fn new(scores: DMatrix<f64>, trace: Option<Vec<f64>>) -> Self {
        let assignment = assign_labels(&scores);
        Self { scores, assignment, trace }
    }
}

fn check(w: &DMatrix<f64>, y: &DMatrix<f64>, alpha: f64) -> Result<(), OracleError> {
    if !(alpha > 0.0 && alpha < 1.0) && alpha != 0.0 {
        return Err(OracleError::InvalidAlpha(alpha));
    }
    if !w.is_square() || w.nrows() != y.nrows() {
        return Err(OracleError::Shape { w: w.nrows(), y: y.nrows() });
    }
    Ok(())
}

fn system(w: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    DMatrix::identity(w.nrows(), w.nrows()) - w * alpha
}

/// `Z = (I - alpha W~)^-1 Y` by dense LU. `alpha = 0` is accepted and gives `Z = Y`.
pub fn propagate_closed_form(w: &DMatrix<f64>, y: &DMatrix<f64>, alpha: f64) -> Result<OracleResult, OracleError> {
    check(w, y, alpha)?;
    let scores = system(w, alpha).lu().solve(y).ok_or(OracleError::Singular)?;
    Ok(OracleResult::new(scores, None))
}

/// Fixed-point iteration until `||z_{t+1} - z_t||_inf <= tol`.
pub fn propagate_iterative(
    w: &DMatrix<f64>,
    y: &DMatrix<f64>,
    alpha: f64,
    tol: f64,
    max_iters: usize,
) -> Result<OracleResult, OracleError> {
    check(w, y, alpha)?;
    let mut z = DMatrix::zeros(y.nrows(), y.ncols());
    let mut trace = Vec::new();
    for _ in 0..max_iters {
        let next = w * &z * alpha + y;
        let step = (&next - &z).amax();
        trace.push(step);
        z = next;
        if step <= tol {
            return Ok(OracleResult::new(z, Some(trace)));
        }
    }
    Err(OracleError::MaxIterations { iterations: max_iters, residual: trace.last().copied().unwrap_or(f64::NAN) })
}

/// The per-client terms `S_L^(j) Y_L^(j)` whose sum is `Z`.
///
/// `S` is formed by explicit inversion, independently of the solve in
/// [`propagate_closed_form`].
pub fn decomposed_scores(
    w: &DMatrix<f64>,
    y: &DMatrix<f64>,
    labeled_global_indices: &[Vec<usize>],
    alpha: f64,
) -> Result<Vec<DMatrix<f64>>, OracleError> {
    check(w, y, alpha)?;
    let s = system(w, alpha).try_inverse().ok_or(OracleError::Singular)?;
    Ok(labeled_global_indices
        .iter()
        .map(|cols| {
            let s_l = s.select_columns(cols.iter());
            let y_l = y.select_rows(cols.iter());
            s_l * y_l
        })
        .collect())
}

/// Plaintext end-to-end run over the same graph the protocol builds.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutcome {
    pub hamming: HammingMatrix,
    pub normalized: DMatrix<f64>,
    pub result: OracleResult,
    /// Per-client scores and labels in stored row order.
    pub clients: Vec<(DMatrix<f64>, LabelAssignment)>,
}

pub fn oracle_run(cohort: &Cohort, config: &XclpConfig) -> Result<OracleOutcome, OracleError> {
    config.validate(cohort.total_rows()).map_err(OracleError::Config)?;
    let codes = client_codes(cohort, config)?;
    let hamming = HammingMatrix::plaintext(&codes)?;
    let graph = build_graph(&hamming, config.k)?;
    let normalized = graph.normalized().to_dense();
    let result = propagate_closed_form(&normalized, &cohort.stacked_labels(), config.alpha)?;
    let clients = (0..cohort.clients().len())
        .map(|pos| {
            let range = cohort.client_range(pos);
            let block = result.scores.rows(range.start, range.len()).into_owned();
            let assignment = assign_labels(&block);
            (block, assignment)
        })
        .collect();
    Ok(OracleOutcome { hamming, normalized, result, clients })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph_from_similarity;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    use crate::seed::derive_rng;

    fn random_normalized(n: usize, k: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = derive_rng(seed, "test/oracle", &[]);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.2..1.0));
        let a = (&a + a.transpose()) * 0.5;
        build_graph_from_similarity(a, 64, k).unwrap().normalized().to_dense()
    }

    fn random_labels(n: usize, c: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = derive_rng(seed, "test/oracle/y", &[]);
        let mut y = DMatrix::zeros(n, c);
        for i in 0..n {
            if rng.random_bool(0.3) {
                y[(i, rng.random_range(0..c))] = 1.0;
            }
        }
        y
    }

    #[test]
    fn zero_labels_give_zero_scores() {
        let w = random_normalized(8, 3, 1);
        let r = propagate_closed_form(&w, &DMatrix::zeros(8, 3), 0.9).unwrap();
        assert_eq!(r.scores, DMatrix::zeros(8, 3));
        assert_eq!(r.assignment.abstain_count(), 8);
    }

    #[test]
    fn alpha_zero_is_identity() {
        let w = random_normalized(6, 2, 2);
        let y = random_labels(6, 3, 2);
        assert_eq!(propagate_closed_form(&w, &y, 0.0).unwrap().scores, y);
    }

    #[test]
    fn two_node_closed_form() {
        let w = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let y = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let alpha = 0.99;
        let r = propagate_closed_form(&w, &y, alpha).unwrap();
        assert_relative_eq!(r.scores[(0, 0)], 1.0 / (1.0 - alpha * alpha), epsilon = 1e-9);
        assert_relative_eq!(r.scores[(1, 0)], alpha / (1.0 - alpha * alpha), epsilon = 1e-9);
        assert_eq!(format!("{:.4}", r.scores[(0, 0)]), "50.2513");
    }

    #[test]
    fn first_iterate_is_y() {
        let w = random_normalized(5, 2, 3);
        let y = random_labels(5, 2, 3);
        let r = propagate_iterative(&w, &y, 0.5, 0.0, 1);
        assert!(matches!(r, Err(OracleError::MaxIterations { iterations: 1, .. })));
        let r = propagate_iterative(&w, &DMatrix::zeros(5, 2), 0.5, 0.0, 1).unwrap();
        assert_eq!(r.scores, DMatrix::zeros(5, 2));
    }

    #[test]
    fn iterative_matches_closed_form() {
        for seed in 0..5 {
            let w = random_normalized(40, 4, seed);
            let y = random_labels(40, 3, seed);
            let closed = propagate_closed_form(&w, &y, 0.99).unwrap();
            let iter = propagate_iterative(&w, &y, 0.99, 1e-10, 100_000).unwrap();
            assert!((&closed.scores - &iter.scores).amax() <= 1e-8);
            assert_eq!(closed.assignment.labels, iter.assignment.labels);
        }
    }

    #[test]
    fn residuals_contract_geometrically() {
        let w = random_normalized(30, 4, 9);
        let y = random_labels(30, 2, 9);
        let alpha = 0.9;
        let r = propagate_iterative(&w, &y, alpha, 1e-12, 10_000).unwrap();
        let trace = r.trace.unwrap();
        // The spectral radius of W~ is at most 1, so the step shrinks by alpha
        // in the 2-norm; in the max-norm allow the sqrt(n) slack once.
        let n = 30f64;
        for (t, step) in trace.iter().enumerate() {
            assert!(*step <= trace[0] * n.sqrt() * alpha.powi(t as i32) + 1e-15);
        }
    }

    #[test]
    fn decomposition_sums_to_closed_form() {
        let w = random_normalized(25, 3, 4);
        let y = random_labels(25, 3, 4);
        let labeled: Vec<usize> = (0..25).filter(|&i| y.row(i).sum() > 0.0).collect();
        let (a, b) = labeled.split_at(labeled.len() / 2);
        let parts = decomposed_scores(&w, &y, &[a.to_vec(), b.to_vec()], 0.99).unwrap();
        let closed = propagate_closed_form(&w, &y, 0.99).unwrap();
        assert!((&parts[0] + &parts[1] - closed.scores).amax() <= 1e-8);
    }

    #[test]
    fn rejects_bad_inputs() {
        let w = DMatrix::zeros(3, 3);
        assert!(matches!(propagate_closed_form(&w, &DMatrix::zeros(2, 1), 0.5), Err(OracleError::Shape { .. })));
        assert!(matches!(propagate_closed_form(&w, &DMatrix::zeros(3, 1), 1.0), Err(OracleError::InvalidAlpha(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn iterative_and_closed_agree(seed in any::<u64>(), n in 3usize..30, alpha in 0.05f64..0.95) {
            let k = (n / 3).max(1);
            let w = random_normalized(n, k, seed);
            let y = random_labels(n, 3, seed);
            let closed = propagate_closed_form(&w, &y, alpha).unwrap();
            let iter = propagate_iterative(&w, &y, alpha, 1e-12, 100_000).unwrap();
            prop_assert!((&closed.scores - &iter.scores).amax() <= 1e-9);
            prop_assert!(closed.scores.iter().all(|&v| v >= -1e-12));
        }
    }
}
