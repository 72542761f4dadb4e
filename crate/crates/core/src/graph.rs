//! Server-side graph construction and influence-column solves.
//!
//! From the Hamming matrix the server estimates cosine similarities, keeps
//! the `k` most similar other points per row (ties to the lowest column,
//! negative weights clamped to zero), symmetrizes with `W = B + B^T` and
//! normalizes `W~ = D^-1/2 W D^-1/2`. An isolated vertex gets
//! `D^-1/2 = 0` and so stays disconnected.
//!
//! Only the columns of `S = (I - alpha W~)^-1` at labeled rows are computed:
//! by dense Cholesky up to [`DENSE_SOLVER_LIMIT`] rows, otherwise by
//! conjugate gradients on the sparse operator.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hamming::HammingMatrix;
use crate::lsh::estimate_cosine;

pub const DENSE_SOLVER_LIMIT: usize = 2000;
pub const CG_TOLERANCE: f64 = 1e-10;
pub const RESIDUAL_LIMIT: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("need 1 <= k < n, got k = {k} with n = {n}")]
    InvalidK { k: usize, n: usize },
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("hamming matrix has absent rows; restrict it first")]
    Incomplete,
    #[error("invalid hamming matrix: {0}")]
    InvalidHamming(String),
    #[error("labeled index {index} out of range for {n} rows")]
    LabeledIndex { index: usize, n: usize },
    #[error("matrix is not positive definite at pivot {0}")]
    NotPositiveDefinite(usize),
    #[error("solver stopped after {iterations} iterations with residual {residual:e}")]
    NoConvergence { iterations: usize, residual: f64 },
}

/// Sparse symmetric matrix as sorted adjacency lists.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseSymmetric {
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseSymmetric {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i].binary_search_by_key(&j, |&(c, _)| c).map_or(0.0, |p| self.rows[i][p].1)
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut out = DMatrix::zeros(n, n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                out[(i, j)] = w;
            }
        }
        out
    }

    fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for (i, row) in self.rows.iter().enumerate() {
            out[i] = row.iter().map(|&(j, w)| w * x[j]).sum();
        }
    }
}

/// Similarity, sparsified adjacency and its normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    code_length: usize,
    k: usize,
    similarity: DMatrix<f64>,
    adjacency: SparseSymmetric,
    degrees: Vec<f64>,
    inv_sqrt_degrees: Vec<f64>,
    normalized: SparseSymmetric,
}

impl SimilarityGraph {
    pub fn n(&self) -> usize {
        self.degrees.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn code_length(&self) -> usize {
        self.code_length
    }

    /// Dense cosine estimates `A`.
    pub fn similarity(&self) -> &DMatrix<f64> {
        &self.similarity
    }

    /// Symmetrized sparse adjacency `W`.
    pub fn adjacency(&self) -> &SparseSymmetric {
        &self.adjacency
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    /// `W~ = D^-1/2 W D^-1/2`.
    pub fn normalized(&self) -> &SparseSymmetric {
        &self.normalized
    }

    pub fn isolated_vertices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.degrees[i] == 0.0).collect()
    }

    /// Edge list `i j weight` for `i < j`, one per line.
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for i in 0..self.n() {
            for &(j, w) in self.adjacency.row(i) {
                if i < j {
                    writeln!(out, "{i} {j} {w}")?;
                }
            }
        }
        Ok(())
    }
}

/// Positions of the `k` largest entries of `row`, skipping `skip`; ties go
/// to the lowest index.
pub fn top_k_indices(row: &[f64], skip: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).filter(|&j| j != skip).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Builds the graph from a dense similarity matrix.
pub fn build_graph_from_similarity(similarity: DMatrix<f64>, code_length: usize, k: usize) -> Result<SimilarityGraph, GraphError> {
    let n = similarity.nrows();
    if k == 0 || k >= n {
        return Err(GraphError::InvalidK { k, n });
    }
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for i in 0..n {
        let row: Vec<f64> = similarity.row(i).iter().copied().collect();
        for j in top_k_indices(&row, i, k) {
            let b = row[j].max(0.0);
            if b > 0.0 {
                rows[i].push((j, b));
                rows[j].push((i, b));
            }
        }
    }
    // Merge duplicates: an edge picked by both ends gets B_ij + B_ji.
    for row in rows.iter_mut() {
        row.sort_by_key(|&(j, _)| j);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
        for &(j, w) in row.iter() {
            match merged.last_mut() {
                Some((last, acc)) if *last == j => *acc += w,
                _ => merged.push((j, w)),
            }
        }
        *row = merged;
    }
    let adjacency = SparseSymmetric { rows };
    let degrees: Vec<f64> = adjacency.rows.iter().map(|r| r.iter().map(|&(_, w)| w).sum()).collect();
    let inv_sqrt_degrees: Vec<f64> = degrees.iter().map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }).collect();
    let normalized = SparseSymmetric {
        rows: adjacency
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| r.iter().map(|&(j, w)| (j, w * inv_sqrt_degrees[i] * inv_sqrt_degrees[j])).collect())
            .collect(),
    };
    Ok(SimilarityGraph { code_length, k, similarity, adjacency, degrees, inv_sqrt_degrees, normalized })
}

/// Server-side graph from a complete Hamming matrix.
pub fn build_graph(h: &HammingMatrix, k: usize) -> Result<SimilarityGraph, GraphError> {
    if !h.is_complete() {
        return Err(GraphError::Incomplete);
    }
    h.validate().map_err(GraphError::InvalidHamming)?;
    let l = h.code_length();
    let table: Vec<f64> =
        (0..=l as u64).map(|d| estimate_cosine(d, l).expect("distance within code length")).collect();
    let n = h.n();
    let similarity = DMatrix::from_fn(n, n, |i, j| table[h.get(i, j) as usize]);
    build_graph_from_similarity(similarity, l, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    /// Cholesky up to [`DENSE_SOLVER_LIMIT`] rows, conjugate gradients above.
    Auto,
    Cholesky,
    ConjugateGradient,
}

/// Labeled columns of `S`, grouped per client.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceColumns {
    pub alpha: f64,
    /// `blocks[j]` is `n x l_j`, column `c` for the `c`-th labeled row of client `j`.
    pub blocks: Vec<DMatrix<f64>>,
    /// Largest `||(I - alpha W~) x - e_i||_inf` over all columns.
    pub max_residual: f64,
}

/// Dense `I - alpha W~`.
pub fn system_matrix(graph: &SimilarityGraph, alpha: f64) -> DMatrix<f64> {
    let n = graph.n();
    let mut m = DMatrix::identity(n, n);
    for i in 0..n {
        for &(j, w) in graph.normalized.row(i) {
            m[(i, j)] -= alpha * w;
        }
    }
    m
}

/// Lower Cholesky factor, row-major `n x n`.
struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    fn factor(a: &DMatrix<f64>) -> Result<Self, GraphError> {
        let n = a.nrows();
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let (row_j, _) = l.split_at_mut((j + 1) * n);
            let lj = &row_j[j * n..j * n + j];
            let diag = a[(j, j)] - lj.iter().map(|x| x * x).sum::<f64>();
            if diag.is_nan() || diag <= 0.0 {
                return Err(GraphError::NotPositiveDefinite(j));
            }
            let pivot = diag.sqrt();
            l[j * n + j] = pivot;
            for i in j + 1..n {
                let (head, tail) = l.split_at_mut(i * n);
                let lj = &head[j * n..j * n + j];
                let li = &tail[..j];
                let dot: f64 = li.iter().zip(lj).map(|(x, y)| x * y).sum();
                tail[j] = (a[(i, j)] - dot) / pivot;
            }
        }
        Ok(Self { n, l })
    }

    /// Solves `L L^T x = e_col`.
    fn solve_unit(&self, col: usize) -> Vec<f64> {
        let n = self.n;
        let mut y = vec![0.0; n];
        // Forward substitution; entries above `col` stay zero.
        for i in col..n {
            let rhs = if i == col { 1.0 } else { 0.0 };
            let row = &self.l[i * n..i * n + i];
            let s: f64 = row[col..].iter().zip(&y[col..i]).map(|(a, b)| a * b).sum();
            y[i] = (rhs - s) / self.l[i * n + i];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for (k, xk) in x.iter().enumerate().skip(i + 1) {
                s -= self.l[k * n + i] * xk;
            }
            x[i] = s / self.l[i * n + i];
        }
        x
    }
}

fn apply_system(graph: &SimilarityGraph, alpha: f64, x: &[f64], out: &mut [f64]) {
    graph.normalized.mul_vec(x, out);
    for (o, xi) in out.iter_mut().zip(x) {
        *o = xi - alpha * *o;
    }
}

fn residual_inf(graph: &SimilarityGraph, alpha: f64, x: &[f64], col: usize) -> f64 {
    let mut ax = vec![0.0; x.len()];
    apply_system(graph, alpha, x, &mut ax);
    ax[col] -= 1.0;
    ax.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Conjugate gradients for `(I - alpha W~) x = e_col` from `x = 0`.
fn conjugate_gradient(graph: &SimilarityGraph, alpha: f64, col: usize) -> Result<Vec<f64>, GraphError> {
    let n = graph.n();
    let mut x = vec![0.0; n];
    let mut r = vec![0.0; n];
    r[col] = 1.0;
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr: f64 = 1.0;
    let cap = 10 * n;
    for iteration in 0..cap {
        if rr.sqrt() <= CG_TOLERANCE {
            return Ok(x);
        }
        apply_system(graph, alpha, &p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            return Err(GraphError::NoConvergence { iterations: iteration, residual: rr.sqrt() });
        }
        let step = rr / pap;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * ap[i];
        }
        let rr_next: f64 = r.iter().map(|v| v * v).sum();
        let beta = rr_next / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_next;
    }
    if rr.sqrt() <= CG_TOLERANCE {
        Ok(x)
    } else {
        Err(GraphError::NoConvergence { iterations: cap, residual: rr.sqrt() })
    }
}

/// Labeled columns of `(I - alpha W~)^-1`, one block per client.
pub fn influence_columns(
    graph: &SimilarityGraph,
    labeled_global_indices: &[Vec<usize>],
    alpha: f64,
) -> Result<InfluenceColumns, GraphError> {
    influence_columns_with(graph, labeled_global_indices, alpha, Solver::Auto)
}

pub fn influence_columns_with(
    graph: &SimilarityGraph,
    labeled_global_indices: &[Vec<usize>],
    alpha: f64,
    solver: Solver,
) -> Result<InfluenceColumns, GraphError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(GraphError::InvalidAlpha(alpha));
    }
    let n = graph.n();
    for &index in labeled_global_indices.iter().flatten() {
        if index >= n {
            return Err(GraphError::LabeledIndex { index, n });
        }
    }
    let use_dense = match solver {
        Solver::Auto => n <= DENSE_SOLVER_LIMIT,
        Solver::Cholesky => true,
        Solver::ConjugateGradient => false,
    };
    let any_labels = labeled_global_indices.iter().any(|c| !c.is_empty());
    let factor = if use_dense && any_labels { Some(Cholesky::factor(&system_matrix(graph, alpha))?) } else { None };

    let mut max_residual: f64 = 0.0;
    let mut blocks = Vec::with_capacity(labeled_global_indices.len());
    for cols in labeled_global_indices {
        let mut block = DMatrix::zeros(n, cols.len());
        for (c, &col) in cols.iter().enumerate() {
            let x = match &factor {
                Some(f) => f.solve_unit(col),
                None => conjugate_gradient(graph, alpha, col)?,
            };
            let res = residual_inf(graph, alpha, &x, col);
            if res.is_nan() || res > RESIDUAL_LIMIT {
                return Err(GraphError::NoConvergence { iterations: 0, residual: res });
            }
            max_residual = max_residual.max(res);
            block.column_mut(c).copy_from_slice(&x);
        }
        blocks.push(block);
    }
    Ok(InfluenceColumns { alpha, blocks, max_residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamming::random_codes;
    use crate::seed::derive_rng;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn three_point() -> SimilarityGraph {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.9, 0.1, 0.9, 1.0, 0.2, 0.1, 0.2, 1.0]);
        build_graph_from_similarity(a, 8, 1).unwrap()
    }

    #[test]
    fn top_one_example() {
        let g = three_point();
        assert_relative_eq!(g.adjacency().get(0, 1), 1.8);
        assert_relative_eq!(g.adjacency().get(1, 2), 0.2);
        assert_eq!(g.adjacency().get(0, 2), 0.0);
        assert_eq!(g.adjacency().nnz(), 4);
    }

    #[test]
    fn top_k_ties_go_to_lowest_index() {
        assert_eq!(top_k_indices(&[0.5, 1.0, 0.5, 0.5], 1, 2), vec![0, 2]);
        assert_eq!(top_k_indices(&[1.0, 0.3, 0.3], 0, 1), vec![1]);
    }

    #[test]
    fn full_k_is_dense_a_plus_a_transpose() {
        let mut rng = derive_rng(1, "test/graph", &[]);
        let codes = random_codes(6, 64, &mut rng);
        let h = HammingMatrix::plaintext(&[codes]).unwrap();
        let g = build_graph(&h, 5).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                if i != j {
                    let aij = g.similarity()[(i, j)].max(0.0);
                    assert_relative_eq!(g.adjacency().get(i, j), 2.0 * aij);
                }
            }
        }
    }

    #[test]
    fn negative_similarities_are_clamped() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, -0.5, -0.9, -0.5, 1.0, 0.4, -0.9, 0.4, 1.0]);
        let g = build_graph_from_similarity(a, 8, 1).unwrap();
        assert_eq!(g.degrees()[0], 0.0);
        assert_eq!(g.isolated_vertices(), vec![0]);
        assert!(g.normalized().row(0).is_empty());
    }

    #[test]
    fn invalid_k_and_alpha() {
        let a = DMatrix::identity(3, 3);
        assert!(matches!(build_graph_from_similarity(a.clone(), 8, 3), Err(GraphError::InvalidK { .. })));
        assert!(matches!(build_graph_from_similarity(a, 8, 0), Err(GraphError::InvalidK { .. })));
        let g = three_point();
        assert_eq!(influence_columns(&g, &[vec![0]], 1.0), Err(GraphError::InvalidAlpha(1.0)));
    }

    fn two_node() -> SimilarityGraph {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        build_graph_from_similarity(a, 8, 1).unwrap()
    }

    #[test]
    fn two_node_closed_form() {
        let g = two_node();
        assert_eq!(g.normalized().get(0, 1), 1.0);
        for solver in [Solver::Cholesky, Solver::ConjugateGradient] {
            let s = influence_columns_with(&g, &[vec![0]], 0.99, solver).unwrap();
            let col = s.blocks[0].column(0);
            // 1 / (1 - 0.99^2) and 0.99 / (1 - 0.99^2)
            assert_relative_eq!(col[0], 50.25125628140704, epsilon = 1e-9);
            assert_relative_eq!(col[1], 49.74874371859297, epsilon = 1e-9);
        }
    }

    #[test]
    fn tiny_alpha_gives_unit_columns() {
        let g = three_point();
        let s = influence_columns(&g, &[vec![1], vec![2]], 1e-12).unwrap();
        assert_relative_eq!(s.blocks[0][(1, 0)], 1.0, epsilon = 1e-9);
        assert_relative_eq!(s.blocks[1][(2, 0)], 1.0, epsilon = 1e-9);
        assert!(s.blocks[0][(0, 0)].abs() < 1e-9);
    }

    fn random_graph(seed: u64, n: usize, k: usize) -> SimilarityGraph {
        let mut rng = derive_rng(seed, "test/graph", &[]);
        let codes = random_codes(n, 64, &mut rng);
        let h = HammingMatrix::plaintext(&[codes]).unwrap();
        build_graph(&h, k).unwrap()
    }

    #[test]
    fn solvers_match_dense_inverse() {
        let g = random_graph(2, 30, 4);
        let inv = system_matrix(&g, 0.99).try_inverse().unwrap();
        let labeled = vec![vec![0, 3, 7], vec![20, 29]];
        for solver in [Solver::Cholesky, Solver::ConjugateGradient] {
            let s = influence_columns_with(&g, &labeled, 0.99, solver).unwrap();
            for (block, cols) in s.blocks.iter().zip(&labeled) {
                for (c, &col) in cols.iter().enumerate() {
                    for i in 0..30 {
                        assert!((block[(i, c)] - inv[(i, col)]).abs() < 1e-6);
                    }
                }
            }
            assert!(s.max_residual <= RESIDUAL_LIMIT);
        }
    }

    #[test]
    fn disconnected_components_stay_exactly_zero() {
        // Two far-apart groups: influence never crosses.
        let mut a = DMatrix::from_element(4, 4, -1.0);
        for (i, j) in [(0, 1), (2, 3)] {
            a[(i, j)] = 0.8;
            a[(j, i)] = 0.8;
        }
        a.fill_diagonal(1.0);
        let g = build_graph_from_similarity(a, 8, 1).unwrap();
        for solver in [Solver::Cholesky, Solver::ConjugateGradient] {
            let s = influence_columns_with(&g, &[vec![0]], 0.9, solver).unwrap();
            assert_eq!(s.blocks[0][(2, 0)], 0.0);
            assert_eq!(s.blocks[0][(3, 0)], 0.0);
            assert!(s.blocks[0][(1, 0)] > 0.0);
        }
    }

    #[test]
    fn monotone_in_edge_weight() {
        let mut last = 0.0;
        for w in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let a = DMatrix::from_row_slice(3, 3, &[1.0, w, 0.2, w, 1.0, 0.3, 0.2, 0.3, 1.0]);
            let g = build_graph_from_similarity(a, 8, 2).unwrap();
            let s = influence_columns(&g, &[vec![0]], 0.9).unwrap();
            let v = s.blocks[0][(1, 0)];
            assert!(v >= last - 1e-12, "{v} < {last}");
            last = v;
        }
    }

    #[test]
    fn edge_list_dump() {
        let mut out = Vec::new();
        three_point().write_edge_list(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "0 1 1.8\n1 2 0.2\n");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn graph_invariants(seed in any::<u64>(), n in 3usize..40, k in 1usize..6) {
            let k = k.min(n - 1);
            let g = random_graph(seed, n, k);
            let w = g.adjacency().to_dense();
            prop_assert_eq!(&w, &w.transpose());
            for i in 0..n {
                prop_assert_eq!(w[(i, i)], 0.0);
                // each vertex selected at most k neighbors itself
                let row: Vec<f64> = g.similarity().row(i).iter().copied().collect();
                let picked = top_k_indices(&row, i, k);
                prop_assert!(picked.len() == k && !picked.contains(&i));
            }
            let wt = g.normalized().to_dense();
            let eig = nalgebra::SymmetricEigen::new(wt.clone());
            for &ev in eig.eigenvalues.iter() {
                prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&ev), "eigenvalue {}", ev);
            }
        }

        #[test]
        fn influence_nonnegative_and_residual_small(seed in any::<u64>(), n in 3usize..30) {
            let g = random_graph(seed, n, 3.min(n - 1));
            let mut rng = derive_rng(seed, "test/labels", &[]);
            let labeled: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.3)).collect();
            let s = influence_columns(&g, std::slice::from_ref(&labeled), 0.99).unwrap();
            prop_assert!(s.blocks[0].iter().all(|&v| v >= 0.0));
            prop_assert!(s.max_residual <= RESIDUAL_LIMIT);
        }
    }
}
