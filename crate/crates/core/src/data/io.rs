//! Cohort file formats.
//!
//! A cohort lives in a directory with a `cohort.json` manifest and one set of
//! files per client. CSV clients use `<id>.csv` with columns
//! `f_0..f_{d-1},label[,truth]`; an empty `label` cell marks an unlabeled row.
//! Raw clients use `<id>.features.xclpmat`, `<id>.labels.xclpmat` (one-hot,
//! zero rows unlabeled) and optionally `<id>.truth.xclpmat` (`n x 1`).
//!
//! Raw matrix layout: the 8-byte magic `XCLPMAT1`, `u64` rows, `u64` cols,
//! then row-major `f64`, all little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{ClientDataset, Cohort, DataError};

pub const RAW_MATRIX_MAGIC: &[u8; 8] = b"XCLPMAT1";
const MANIFEST: &str = "cohort.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CohortFormat {
    Csv,
    #[serde(alias = "raw")]
    Rawmatrix,
}

impl std::str::FromStr for CohortFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "rawmatrix" | "raw" => Ok(Self::Rawmatrix),
            other => Err(format!("unknown cohort format {other:?} (expected csv or rawmatrix)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub format: CohortFormat,
    pub class_count: usize,
    pub clients: Vec<String>,
}

pub fn encode_raw_matrix(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * m.len());
    out.extend_from_slice(RAW_MATRIX_MAGIC);
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
    out
}

pub fn decode_raw_matrix(bytes: &[u8]) -> Result<DMatrix<f64>, DataError> {
    if bytes.len() < 24 {
        return Err(DataError::RawMatrix(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..8] != RAW_MATRIX_MAGIC {
        return Err(DataError::RawMatrix("bad magic".into()));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let body = &bytes[24..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| DataError::RawMatrix(format!("{rows}x{cols} overflows")))?;
    if body.len() as u64 != expected {
        return Err(DataError::RawMatrix(format!(
            "{rows}x{cols} needs {expected} payload bytes, found {}",
            body.len()
        )));
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    Ok(DMatrix::from_row_iterator(rows, cols, values))
}

pub fn read_raw_matrix(path: &Path) -> Result<DMatrix<f64>, DataError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode_raw_matrix(&bytes)
}

pub fn write_raw_matrix(path: &Path, m: &DMatrix<f64>) -> Result<(), DataError> {
    fs::write(path, encode_raw_matrix(m)).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

/// Parses one client's CSV. `class_count` bounds the labels.
pub fn parse_client_csv<R: std::io::Read>(
    reader: R,
    client_id: &str,
    class_count: usize,
) -> Result<ClientDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| DataError::Csv(e.to_string()))?.clone();
    let mut d = 0;
    while headers.get(d) == Some(format!("f_{d}").as_str()) {
        d += 1;
    }
    if d == 0 {
        return Err(DataError::Csv("header must start with f_0".into()));
    }
    if headers.get(d) != Some("label") {
        return Err(DataError::Csv(format!("expected column {d} to be \"label\"")));
    }
    let has_truth = match headers.get(d + 1) {
        None => false,
        Some("truth") if headers.len() == d + 2 => true,
        Some(other) => return Err(DataError::Csv(format!("unexpected column {other:?}"))),
    };

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut truth = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| DataError::Csv(e.to_string()))?;
        if record.len() != headers.len() {
            return Err(DataError::Csv(format!("row {row} has {} fields", record.len())));
        }
        for c in 0..d {
            let v: f64 = record[c]
                .parse()
                .map_err(|_| DataError::Csv(format!("row {row}, column f_{c}: {:?} is not a number", &record[c])))?;
            values.push(v);
        }
        labels.push(parse_label_cell(&record[d], row, "label")?);
        if has_truth {
            match parse_label_cell(&record[d + 1], row, "truth")? {
                Some(t) => truth.push(t),
                None => return Err(DataError::Csv(format!("row {row}: empty truth cell"))),
            }
        }
    }
    let features = DMatrix::from_row_slice(labels.len(), d, &values);
    ClientDataset::new(client_id, features, labels, class_count, has_truth.then_some(truth))
}

fn parse_label_cell(cell: &str, row: usize, column: &str) -> Result<Option<usize>, DataError> {
    if cell.is_empty() {
        return Ok(None);
    }
    cell.parse::<usize>()
        .map(Some)
        .map_err(|_| DataError::Csv(format!("row {row}, column {column}: {cell:?} is not a class index")))
}

/// Writes a client's rows in its original input order.
pub fn write_client_csv<W: std::io::Write>(writer: W, client: &ClientDataset) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let d = client.dim();
    let mut header: Vec<String> = (0..d).map(|c| format!("f_{c}")).collect();
    header.push("label".into());
    if client.truth().is_some() {
        header.push("truth".into());
    }
    wtr.write_record(&header).map_err(|e| DataError::Csv(e.to_string()))?;
    for stored in inverse_order(client.original_order()) {
        let mut record: Vec<String> = (0..d).map(|c| client.features()[(stored, c)].to_string()).collect();
        record.push(client.labels()[stored].map(|l| l.to_string()).unwrap_or_default());
        if let Some(t) = client.truth() {
            record.push(t[stored].to_string());
        }
        wtr.write_record(&record).map_err(|e| DataError::Csv(e.to_string()))?;
    }
    wtr.flush().map_err(|e| DataError::Csv(e.to_string()))
}

/// `inverse_order(p)[orig]` is the stored row holding input row `orig`.
fn inverse_order(original_order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; original_order.len()];
    for (stored, &orig) in original_order.iter().enumerate() {
        inv[orig] = stored;
    }
    inv
}

fn client_file(dir: &Path, id: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{id}{suffix}"))
}

pub fn load_cohort(path: &Path, format: CohortFormat) -> Result<Cohort, DataError> {
    if !path.is_dir() {
        return Err(DataError::InvalidCohort(format!("{} is not a directory", path.display())));
    }
    let manifest_path = path.join(MANIFEST);
    let manifest = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
        let m: CohortManifest = serde_json::from_str(&text)
            .map_err(|e| DataError::InvalidCohort(format!("{}: {e}", manifest_path.display())))?;
        if m.format != format {
            return Err(DataError::InvalidCohort(format!(
                "manifest declares {:?} but {:?} was requested",
                m.format, format
            )));
        }
        m
    } else {
        infer_manifest(path, format)?
    };

    let mut clients = Vec::with_capacity(manifest.clients.len());
    for id in &manifest.clients {
        let client = match format {
            CohortFormat::Csv => {
                let p = client_file(path, id, ".csv");
                let file = fs::File::open(&p).map_err(|e| io_err(&p, e))?;
                parse_client_csv(std::io::BufReader::new(file), id, manifest.class_count)?
            }
            CohortFormat::Rawmatrix => {
                let features = read_raw_matrix(&client_file(path, id, ".features.xclpmat"))?;
                let labels = read_raw_matrix(&client_file(path, id, ".labels.xclpmat"))?;
                if labels.ncols() != manifest.class_count {
                    return Err(DataError::DimensionMismatch(format!(
                        "client {id}: label matrix has {} columns, cohort has {} classes",
                        labels.ncols(),
                        manifest.class_count
                    )));
                }
                let truth_path = client_file(path, id, ".truth.xclpmat");
                let truth = if truth_path.exists() {
                    let t = read_raw_matrix(&truth_path)?;
                    if t.ncols() != 1 {
                        return Err(DataError::DimensionMismatch(format!("client {id}: truth must be n x 1")));
                    }
                    let mut out = Vec::with_capacity(t.nrows());
                    for &v in t.iter() {
                        if !(v >= 0.0 && v.fract() == 0.0) {
                            return Err(DataError::RawMatrix(format!("client {id}: truth value {v} is not a class")));
                        }
                        out.push(v as usize);
                    }
                    Some(out)
                } else {
                    None
                };
                ClientDataset::from_one_hot(id.clone(), features, &labels, truth)?
            }
        };
        clients.push(client);
    }
    Cohort::new(clients, manifest.class_count)
}

fn infer_manifest(dir: &Path, format: CohortFormat) -> Result<CohortManifest, DataError> {
    let suffix = match format {
        CohortFormat::Csv => ".csv",
        CohortFormat::Rawmatrix => ".features.xclpmat",
    };
    let mut ids: Vec<String> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(suffix)).map(str::to_string))
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(DataError::InvalidCohort(format!("no client files in {}", dir.display())));
    }
    let class_count = match format {
        CohortFormat::Rawmatrix => read_raw_matrix(&client_file(dir, &ids[0], ".labels.xclpmat"))?.ncols(),
        CohortFormat::Csv => {
            // Without a manifest the class count is the largest class seen plus one.
            let mut max = None::<usize>;
            for id in &ids {
                let p = client_file(dir, id, ".csv");
                let file = fs::File::open(&p).map_err(|e| io_err(&p, e))?;
                let ds = parse_client_csv(std::io::BufReader::new(file), id, usize::MAX)?;
                let local = ds.labels().iter().flatten().chain(ds.truth().unwrap_or(&[])).max().copied();
                max = max.max(local);
            }
            max.map_or(1, |m| m + 1)
        }
    };
    Ok(CohortManifest { format, class_count, clients: ids })
}

/// Writes `cohort` under `dir` (created if missing) with a manifest.
pub fn save_cohort(cohort: &Cohort, dir: &Path, format: CohortFormat) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let manifest = CohortManifest {
        format,
        class_count: cohort.class_count(),
        clients: cohort.clients().iter().map(|c| c.client_id().to_string()).collect(),
    };
    let manifest_path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text).map_err(|e| io_err(&manifest_path, e))?;
    for client in cohort.clients() {
        let id = client.client_id();
        match format {
            CohortFormat::Csv => {
                let p = client_file(dir, id, ".csv");
                let file = fs::File::create(&p).map_err(|e| io_err(&p, e))?;
                write_client_csv(std::io::BufWriter::new(file), client)?;
            }
            CohortFormat::Rawmatrix => {
                let inv = inverse_order(client.original_order());
                let features = client.features().select_rows(inv.iter());
                let labels = client.label_matrix(cohort.class_count()).select_rows(inv.iter());
                write_raw_matrix(&client_file(dir, id, ".features.xclpmat"), &features)?;
                write_raw_matrix(&client_file(dir, id, ".labels.xclpmat"), &labels)?;
                if let Some(t) = client.truth() {
                    let col = DMatrix::from_iterator(t.len(), 1, inv.iter().map(|&s| t[s] as f64));
                    write_raw_matrix(&client_file(dir, id, ".truth.xclpmat"), &col)?;
                }
            }
        }
    }
    Ok(())
}
