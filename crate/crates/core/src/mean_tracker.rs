//! Per-class running means over every embedding seen so far.
//!
//! Each class starts from the zero vector with count 0, and every new sample
//! `x` of that class moves the mean by
//!
//! ```text
//! v ← n/(n+1) · v + 1/(n+1) · x,   n ← n + 1
//! ```
//!
//! so the first sample is copied exactly. Means are kept in `f64` regardless
//! of the input precision. Storage is one vector and one counter per class,
//! independent of stream length.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding_store::EmbeddingRecord;

#[derive(Debug, Error)]
pub enum MeanError {
    #[error("dimension mismatch: table holds {expected}-dim means, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite embedding component at index {0}")]
    NonFinite(usize),
    #[error("empty embedding")]
    Empty,
    #[error("unknown class id {0}")]
    UnknownClass(u32),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Running mean and sample count for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMean {
    pub count: u64,
    pub mean: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassMeanTable {
    dim: Option<usize>,
    classes: BTreeMap<u32, ClassMean>,
}

impl ClassMeanTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// A table whose dimension is fixed up front instead of by the first update.
    pub fn with_dim(dim: usize) -> Self {
        Self { dim: Some(dim), classes: BTreeMap::new() }
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, class: u32) -> Option<&ClassMean> {
        self.classes.get(&class)
    }

    pub fn mean(&self, class: u32) -> Option<&[f64]> {
        self.classes.get(&class).map(|c| c.mean.as_slice())
    }

    pub fn count(&self, class: u32) -> u64 {
        self.classes.get(&class).map_or(0, |c| c.count)
    }

    /// Sum of all per-class counts.
    pub fn total_count(&self) -> u64 {
        self.classes.values().map(|c| c.count).sum()
    }

    /// Classes in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (u32, &ClassMean)> {
        self.classes.iter().map(|(k, v)| (*k, v))
    }

    fn check_query<T: Copy + Into<f64>>(&self, x: &[T]) -> Result<(), MeanError> {
        if x.is_empty() {
            return Err(MeanError::Empty);
        }
        if let Some(dim) = self.dim {
            if dim != x.len() {
                return Err(MeanError::DimensionMismatch { expected: dim, got: x.len() });
            }
        }
        if let Some(i) = x.iter().position(|v| !(*v).into().is_finite()) {
            return Err(MeanError::NonFinite(i));
        }
        Ok(())
    }

    /// Folds one embedding into the mean of `label`.
    pub fn update<T: Copy + Into<f64>>(&mut self, embedding: &[T], label: u32) -> Result<(), MeanError> {
        self.check_query(embedding)?;
        let dim = *self.dim.get_or_insert(embedding.len());
        let entry = self
            .classes
            .entry(label)
            .or_insert_with(|| ClassMean { count: 0, mean: vec![0.0; dim] });
        let n = entry.count as f64;
        let keep = n / (n + 1.0);
        let add = 1.0 / (n + 1.0);
        for (v, x) in entry.mean.iter_mut().zip(embedding) {
            *v = keep * *v + add * (*x).into();
        }
        entry.count += 1;
        Ok(())
    }

    pub fn update_record(&mut self, record: &EmbeddingRecord) -> Result<(), MeanError> {
        self.update(&record.vector, record.label)
    }

    /// Squared Euclidean distance from `query` to the mean of `class`.
    pub fn squared_distance<T: Copy + Into<f64>>(&self, class: u32, query: &[T]) -> Result<f64, MeanError> {
        let entry = self.classes.get(&class).ok_or(MeanError::UnknownClass(class))?;
        if entry.mean.len() != query.len() {
            return Err(MeanError::DimensionMismatch { expected: entry.mean.len(), got: query.len() });
        }
        Ok(entry
            .mean
            .iter()
            .zip(query)
            .map(|(m, q)| {
                let d = m - (*q).into();
                d * d
            })
            .sum())
    }

    /// Euclidean distance from `query` to the mean of `class`.
    pub fn distance<T: Copy + Into<f64>>(&self, class: u32, query: &[T]) -> Result<f64, MeanError> {
        self.squared_distance(class, query).map(f64::sqrt)
    }

    /// JSON object `{class id: {count, mean}}`.
    pub fn to_json(&self) -> Result<String, MeanError> {
        Ok(serde_json::to_string(&self.classes)?)
    }

    pub fn from_json(text: &str) -> Result<Self, MeanError> {
        let classes: BTreeMap<u32, ClassMean> = serde_json::from_str(text)?;
        let mut dim = None;
        for (id, c) in &classes {
            if c.count == 0 {
                return Err(MeanError::Checkpoint(format!("class {id} has count 0")));
            }
            if c.mean.iter().any(|v| !v.is_finite()) {
                return Err(MeanError::Checkpoint(format!("class {id} has a non-finite mean")));
            }
            match dim {
                None => dim = Some(c.mean.len()),
                Some(d) if d != c.mean.len() => {
                    return Err(MeanError::DimensionMismatch { expected: d, got: c.mean.len() })
                }
                _ => {}
            }
        }
        Ok(Self { dim, classes })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MeanError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MeanError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Exact per-class means by summation then division, with a second pass
/// over the residuals. Independent of [`ClassMeanTable::update`]; used as
/// the reference those updates are checked against.
pub fn batch_mean_oracle(records: &[EmbeddingRecord]) -> BTreeMap<u32, Vec<f64>> {
    let mut sums: BTreeMap<u32, (u64, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let (n, s) = sums.entry(r.label).or_insert_with(|| (0, vec![0.0; r.vector.len()]));
        *n += 1;
        for (acc, v) in s.iter_mut().zip(&r.vector) {
            *acc += *v as f64;
        }
    }
    let mut means: BTreeMap<u32, Vec<f64>> =
        sums.iter().map(|(c, (n, s))| (*c, s.iter().map(|v| v / *n as f64).collect())).collect();

    let mut residuals: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for r in records {
        let m = &means[&r.label];
        let acc = residuals.entry(r.label).or_insert_with(|| vec![0.0; m.len()]);
        for ((a, v), mu) in acc.iter_mut().zip(&r.vector).zip(m) {
            *a += *v as f64 - mu;
        }
    }
    for (c, res) in residuals {
        let n = sums[&c].0 as f64;
        for (mu, r) in means.get_mut(&c).unwrap().iter_mut().zip(res) {
            *mu += r / n;
        }
    }
    means
}
