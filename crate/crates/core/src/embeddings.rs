//! Per-item semantic embedding tables.
//!
//! Binary layout: little-endian `u64` item count, `u64` dimension, then
//! `items * dim` row-major little-endian `f32` values. A headerless CSV with
//! one row per item is accepted for small fixtures.

use std::fs;
use std::path::Path;

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{device, DTYPE};

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    rows: usize,
    dim: usize,
    values: Vec<f32>,
}

impl EmbeddingTable {
    pub fn new(rows: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != rows * dim {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{dim} table",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value in row {}", pos / dim.max(1))));
        }
        Ok(Self { rows, dim, values })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (rows, dim) = t.dims2()?;
        let values = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(rows, dim, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Table made of the given rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            if r >= self.rows {
                return Err(Error::Index(format!("row {r} out of range ({} rows)", self.rows)));
            }
            values.extend_from_slice(self.row(r));
        }
        Self::new(rows.len(), self.dim, values)
    }

    /// Copy with every row scaled to unit Euclidean norm; zero rows stay zero.
    pub fn l2_normalized(&self) -> Self {
        let mut values = self.values.clone();
        for row in values.chunks_mut(self.dim.max(1)) {
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        Self { values, ..self.clone() }
    }

    /// Reads the binary format, or CSV for a `.csv` path, without a row
    /// count check.
    pub fn read(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Self::decode_csv(path),
            _ => Self::decode_binary(&fs::read(path)?),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.values, (self.rows, self.dim), &device())?.to_dtype(DTYPE)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 4 * self.values.len());
        buf.extend_from_slice(&(self.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, buf)?;
        Ok(())
    }

    fn decode_binary(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Shape("embedding file shorter than its 16-byte header".into()));
        }
        let rows = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        let dim = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() != rows * dim * 4 {
            return Err(Error::Shape(format!(
                "header declares {rows}x{dim} but body holds {} bytes",
                body.len()
            )));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(rows, dim, values)
    }

    fn decode_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut values = Vec::new();
        let mut dim = None;
        let mut rows = 0;
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
            if *dim.get_or_insert(rec.len()) != rec.len() {
                return Err(Error::Shape(format!("row {i} has {} columns", rec.len())));
            }
            for field in rec.iter() {
                let v: f32 = field.parse().map_err(|_| Error::Parse {
                    line: i + 1,
                    message: format!("`{field}` is not a number"),
                })?;
                values.push(v);
            }
            rows += 1;
        }
        Self::new(rows, dim.unwrap_or(0), values)
    }
}

/// Loads a table and checks it has one row per item.
pub fn load_embeddings(path: &Path, expected_items: usize) -> Result<EmbeddingTable> {
    let table = EmbeddingTable::read(path)?;
    if table.rows != expected_items {
        return Err(Error::Shape(format!(
            "{} has {} rows, expected {expected_items}",
            path.display(),
            table.rows
        )));
    }
    Ok(table)
}

/// Clustered Gaussian embeddings: `n_clusters` standard-normal centers,
/// item `i` belongs to cluster `i % n_clusters`, plus isotropic noise.
pub fn synth_embeddings(
    n_items: usize,
    dim: usize,
    n_clusters: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<EmbeddingTable> {
    if n_items == 0 || dim == 0 || n_clusters == 0 || n_clusters > n_items {
        return Err(Error::Argument(format!(
            "need 0 < n_clusters <= n_items and dim > 0 (got {n_clusters} clusters, {n_items} items, dim {dim})"
        )));
    }
    if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
        return Err(Error::Argument(format!("noise_scale must be >= 0, got {noise_scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<f64> = (0..n_clusters * dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let mut values = Vec::with_capacity(n_items * dim);
    for i in 0..n_items {
        let c = i % n_clusters;
        for j in 0..dim {
            let noise: f64 = StandardNormal.sample(&mut rng);
            values.push((centers[c * dim + j] + noise_scale * noise) as f32);
        }
    }
    EmbeddingTable::new(n_items, dim, values)
}
