//! Prediction rules used at evaluation time.
//!
//! Ties are always broken toward the lower class id. Distances are compared
//! squared; the ordering is the same as for the Euclidean norm.

use std::cmp::Ordering;

use thiserror::Error;

use crate::linear_head::Scalar;
use crate::mean_tracker::ClassMeanTable;

#[derive(Debug, Error, PartialEq)]
pub enum ClassifyError {
    #[error("logit vector has length {logits}, but {classes} classes are mapped")]
    LengthMismatch { logits: usize, classes: usize },
    #[error("{classes} seen classes are not divisible into blocks of {step_size}")]
    NotBlockAligned { classes: usize, step_size: usize },
    #[error("class {0} has no mean; every trained class needs at least one sample")]
    MissingMean(u32),
    #[error("query dimension {got} does not match mean dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no classes to predict from")]
    Empty,
}

/// One candidate class per learned task, in task order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet(pub Vec<u32>);

impl CandidateSet {
    pub fn classes(&self) -> &[u32] {
        &self.0
    }

    pub fn contains(&self, class: u32) -> bool {
        self.0.contains(&class)
    }
}

/// Best `(key, class)` under `better`; ties on the key go to the lower class.
fn pick<K: Copy>(items: impl Iterator<Item = (K, u32)>, better: impl Fn(K, K) -> Option<bool>) -> Option<u32> {
    let mut best: Option<(K, u32)> = None;
    for (key, class) in items {
        best = match best {
            None => Some((key, class)),
            Some((bk, bc)) => match better(key, bk) {
                Some(true) => Some((key, class)),
                None if class < bc => Some((key, class)),
                _ => Some((bk, bc)),
            },
        };
    }
    best.map(|(_, c)| c)
}

/// `Some(true)` if `a` beats `b` in direction `want`, `None` on a tie,
/// `Some(false)` otherwise. NaN never wins.
fn beats<T: PartialOrd>(a: T, b: T, want: Ordering) -> Option<bool> {
    match (a.partial_cmp(&a), b.partial_cmp(&b)) {
        (None, _) => Some(false),
        (_, None) => Some(true),
        _ => match a.partial_cmp(&b) {
            Some(Ordering::Equal) => None,
            o => Some(o == Some(want)),
        },
    }
}

fn greater<T: PartialOrd>(a: T, b: T) -> Option<bool> {
    beats(a, b, Ordering::Greater)
}

fn less<T: PartialOrd>(a: T, b: T) -> Option<bool> {
    beats(a, b, Ordering::Less)
}

/// Per-task argmax over consecutive blocks of `step_size` logits.
/// `row_classes[r]` is the class id scored by logit `r`.
pub fn select_candidates<T: Scalar>(
    logits: &[T],
    row_classes: &[u32],
    step_size: usize,
) -> Result<CandidateSet, ClassifyError> {
    if logits.len() != row_classes.len() {
        return Err(ClassifyError::LengthMismatch { logits: logits.len(), classes: row_classes.len() });
    }
    if step_size == 0 || !logits.len().is_multiple_of(step_size) {
        return Err(ClassifyError::NotBlockAligned { classes: logits.len(), step_size });
    }
    if logits.is_empty() {
        return Err(ClassifyError::Empty);
    }
    let picks = logits
        .chunks(step_size)
        .zip(row_classes.chunks(step_size))
        .map(|(z, c)| pick(z.iter().copied().zip(c.iter().copied()), greater).expect("non-empty block"))
        .collect();
    Ok(CandidateSet(picks))
}

/// Nearest class mean among the candidates.
pub fn ncm_predict<T: Copy + Into<f64>>(
    table: &ClassMeanTable,
    candidates: &CandidateSet,
    query: &[T],
) -> Result<u32, ClassifyError> {
    let mut scored = Vec::with_capacity(candidates.0.len());
    for &c in &candidates.0 {
        scored.push((squared_distance(table, c, query)?, c));
    }
    pick(scored.into_iter(), less).ok_or(ClassifyError::Empty)
}

/// Nearest class mean among every class in the table.
pub fn full_ncm_predict<T: Copy + Into<f64>>(table: &ClassMeanTable, query: &[T]) -> Result<u32, ClassifyError> {
    let mut scored = Vec::with_capacity(table.len());
    for (c, _) in table.iter() {
        scored.push((squared_distance(table, c, query)?, c));
    }
    pick(scored.into_iter(), less).ok_or(ClassifyError::Empty)
}

fn squared_distance<T: Copy + Into<f64>>(table: &ClassMeanTable, class: u32, query: &[T]) -> Result<f64, ClassifyError> {
    let mean = table.mean(class).ok_or(ClassifyError::MissingMean(class))?;
    if mean.len() != query.len() {
        return Err(ClassifyError::DimensionMismatch { expected: mean.len(), got: query.len() });
    }
    Ok(mean
        .iter()
        .zip(query)
        .map(|(m, q)| {
            let d = m - (*q).into();
            d * d
        })
        .sum())
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax_predict<T: Scalar>(logits: &[T]) -> Result<usize, ClassifyError> {
    pick(logits.iter().copied().zip(0u32..), greater).map(|i| i as usize).ok_or(ClassifyError::Empty)
}

/// Class id of the largest logit, lowest class id on ties.
pub fn argmax_class<T: Scalar>(logits: &[T], row_classes: &[u32]) -> Result<u32, ClassifyError> {
    if logits.len() != row_classes.len() {
        return Err(ClassifyError::LengthMismatch { logits: logits.len(), classes: row_classes.len() });
    }
    pick(logits.iter().copied().zip(row_classes.iter().copied()), greater).ok_or(ClassifyError::Empty)
}
