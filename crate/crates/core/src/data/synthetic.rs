//! Seeded Gaussian-blob cohorts for experiments and fixtures.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ClientDataset, Cohort, DataError};
use crate::seed::derive_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heterogeneity {
    /// Every client draws from all classes in equal proportion.
    Iid,
    /// Client `j` only sees `ceil(C/2)` classes starting at `j mod C`.
    ClassSkew,
}

/// Shape of the class-conditional distributions.
///
/// Class `c` has center `mu_c` (a random direction scaled to
/// `separation`), isotropic noise `noise`, and an extra Gaussian spread of
/// scale `stretch` along a class-specific random unit direction. A common
/// offset of norm `offset` is added to every point, which keeps all points in
/// one half-space so cosine similarity tracks Euclidean proximity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobGeometry {
    pub separation: f64,
    pub noise: f64,
    pub stretch: f64,
    pub offset: f64,
}

impl Default for BlobGeometry {
    fn default() -> Self {
        Self { separation: 4.0, noise: 1.0, stretch: 0.0, offset: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_clients: usize,
    pub per_client: usize,
    pub dim: usize,
    pub classes: usize,
    pub label_fraction: f64,
    pub heterogeneity: Heterogeneity,
    pub seed: u64,
    #[serde(default)]
    pub geometry: BlobGeometry,
}

/// Held-out examples from the same class-conditional distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    pub features: DMatrix<f64>,
    pub labels: Vec<usize>,
}

struct Blobs {
    centers: Vec<DVector<f64>>,
    stretch_dirs: Vec<DVector<f64>>,
    offset: DVector<f64>,
    geometry: BlobGeometry,
}

impl Blobs {
    fn new(spec: &SyntheticSpec) -> Self {
        let mut rng = derive_rng(spec.seed, "synthetic/centers", &[]);
        let d = spec.dim;
        let unit = |rng: &mut rand_chacha::ChaCha20Rng| {
            let v: DVector<f64> = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
            let norm = v.norm();
            v / norm
        };
        let centers = (0..spec.classes).map(|_| unit(&mut rng) * spec.geometry.separation).collect();
        let stretch_dirs = (0..spec.classes).map(|_| unit(&mut rng)).collect();
        let offset = unit(&mut rng) * spec.geometry.offset;
        Self { centers, stretch_dirs, offset, geometry: spec.geometry }
    }

    fn sample<R: Rng>(&self, class: usize, rng: &mut R) -> DVector<f64> {
        let d = self.offset.len();
        let noise: DVector<f64> = DVector::from_fn(d, |_, _| StandardNormal.sample(rng)) * self.geometry.noise;
        let along: f64 = StandardNormal.sample(rng);
        let mut v = &self.centers[class] + noise + &self.stretch_dirs[class] * (along * self.geometry.stretch) + &self.offset;
        if v.iter().all(|&x| x == 0.0) {
            v[0] = f64::MIN_POSITIVE;
        }
        v
    }
}

fn allowed_classes(spec: &SyntheticSpec, client: usize) -> Vec<usize> {
    match spec.heterogeneity {
        Heterogeneity::Iid => (0..spec.classes).collect(),
        Heterogeneity::ClassSkew => {
            let k = spec.classes.div_ceil(2).max(1);
            (0..k).map(|t| (client + t) % spec.classes).collect()
        }
    }
}

fn validate(spec: &SyntheticSpec) -> Result<(), DataError> {
    if !(0.0..=1.0).contains(&spec.label_fraction) {
        return Err(DataError::InvalidSpec(format!("label_fraction {} outside [0, 1]", spec.label_fraction)));
    }
    if spec.n_clients == 0 || spec.per_client == 0 || spec.dim == 0 || spec.classes == 0 {
        return Err(DataError::InvalidSpec("clients, per_client, dim and classes must be positive".into()));
    }
    let n = spec.n_clients * spec.per_client;
    if spec.label_fraction > 0.0 && spec.classes > n {
        return Err(DataError::InvalidSpec(format!(
            "cannot place one labeled example for each of {} classes among {n} rows",
            spec.classes
        )));
    }
    Ok(())
}

/// Generates a cohort of `n_clients` clients with `per_client` rows each.
///
/// `round(label_fraction * n)` rows are labeled (raised to `C` when positive,
/// so every class can appear), spread as evenly as possible across clients.
/// Ground truth is attached to every row. Deterministic in `seed`.
pub fn split_synthetic(spec: &SyntheticSpec) -> Result<Cohort, DataError> {
    validate(spec)?;
    let blobs = Blobs::new(spec);
    let n = spec.n_clients * spec.per_client;
    let mut total_labels = (spec.label_fraction * n as f64).round() as usize;
    if spec.label_fraction > 0.0 {
        total_labels = total_labels.max(spec.classes);
    }
    let base = total_labels / spec.n_clients;
    let extra = total_labels % spec.n_clients;

    let mut label_cursor = 0usize;
    let mut clients = Vec::with_capacity(spec.n_clients);
    for j in 0..spec.n_clients {
        let mut rng = derive_rng(spec.seed, "synthetic/client", &[j as u64]);
        let allowed = allowed_classes(spec, j);
        let labeled = (base + usize::from(j < extra)).min(spec.per_client);
        let mut features = DMatrix::zeros(spec.per_client, spec.dim);
        let mut labels = Vec::with_capacity(spec.per_client);
        let mut truth = Vec::with_capacity(spec.per_client);
        for i in 0..spec.per_client {
            let class = if i < labeled {
                let c = allowed[label_cursor % allowed.len()];
                label_cursor += 1;
                c
            } else {
                allowed[(i + j) % allowed.len()]
            };
            let v = blobs.sample(class, &mut rng);
            features.row_mut(i).copy_from(&v.transpose());
            labels.push((i < labeled).then_some(class));
            truth.push(class);
        }
        clients.push(ClientDataset::new(format!("client-{j:03}"), features, labels, spec.classes, Some(truth))?);
    }
    Cohort::new(clients, spec.classes)
}

impl SyntheticSpec {
    /// Class-balanced held-out examples drawn from the cohort's distributions.
    pub fn test_set(&self, rows: usize) -> Result<TestSet, DataError> {
        validate(self)?;
        let blobs = Blobs::new(self);
        let mut rng = derive_rng(self.seed, "synthetic/test", &[]);
        let mut features = DMatrix::zeros(rows, self.dim);
        let mut labels = Vec::with_capacity(rows);
        for i in 0..rows {
            let class = i % self.classes;
            features.row_mut(i).copy_from(&blobs.sample(class, &mut rng).transpose());
            labels.push(class);
        }
        Ok(TestSet { features, labels })
    }
}
