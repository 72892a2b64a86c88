//! Comparison methods: fine-tuning, experience replay over a reservoir
//! buffer, and nearest-mean-of-exemplars prediction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifiers::{full_ncm_predict, ClassifyError};
use crate::embedding_store::EmbeddingRecord;
use crate::linear_head::{HeadError, LinearHead, TrainBatch};
use crate::mean_tracker::{ClassMeanTable, MeanError};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("exemplar buffer is empty")]
    EmptyBuffer,
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Mean(#[from] MeanError),
}

/// Fixed-capacity uniform sample of a stream (reservoir sampling).
/// `capacity` is the total exemplar budget across all classes.
#[derive(Debug, Clone)]
pub struct ExemplarBuffer {
    capacity: usize,
    records: Vec<EmbeddingRecord>,
    total_seen: u64,
    rng: ChaCha8Rng,
}

impl ExemplarBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            capacity,
            records: Vec::with_capacity(capacity.min(1 << 16)),
            total_seen: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_seen(&self) -> u64 {
        self.total_seen
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    /// Offers one stream item. The first `capacity` items are kept; after
    /// that the `n`-th item replaces a uniform slot with probability
    /// `capacity / n`.
    pub fn reservoir_update(&mut self, record: &EmbeddingRecord) {
        self.total_seen += 1;
        if self.capacity == 0 {
            return;
        }
        if self.records.len() < self.capacity {
            self.records.push(record.clone());
            return;
        }
        let j = self.rng.random_range(0..self.total_seen);
        if (j as usize) < self.capacity {
            self.records[j as usize] = record.clone();
        }
    }

    /// `size` records drawn uniformly with replacement.
    pub fn replay_batch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<Vec<&EmbeddingRecord>, BaselineError> {
        if self.records.is_empty() {
            return Err(BaselineError::EmptyBuffer);
        }
        Ok((0..size).map(|_| &self.records[rng.random_range(0..self.records.len())]).collect())
    }

    /// Per-class means over the buffered records only.
    pub fn exemplar_means(&self) -> Result<ClassMeanTable, BaselineError> {
        let mut table = ClassMeanTable::new();
        for r in &self.records {
            table.update_record(r)?;
        }
        Ok(table)
    }

    /// Nearest mean of exemplars. Classes with no buffered record cannot be
    /// predicted.
    pub fn nme_predict<T: Copy + Into<f64>>(&self, query: &[T]) -> Result<u32, BaselineError> {
        if self.records.is_empty() {
            return Err(BaselineError::EmptyBuffer);
        }
        Ok(full_ncm_predict(&self.exemplar_means()?, query)?)
    }
}

/// How the head is trained on each incoming batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPolicy {
    /// Only the current task's rows train; earlier rows stay frozen.
    FrozenOld,
    /// Every row trains on the incoming batch alone.
    FineTune,
    /// Every row trains on the incoming batch plus an equal share of replay.
    ExperienceReplay,
}

/// One SGD step on the incoming batch with every row trainable.
pub fn finetune_step(head: &mut LinearHead<f32>, batch: &TrainBatch<f32>, lr: f32) -> Result<f32, BaselineError> {
    head.unfreeze_all();
    let (loss, grads) = head.ce_loss_and_grad(batch)?;
    head.sgd_step(&grads, lr)?;
    Ok(loss)
}

/// Experience-replay step. `incoming` holds the new records with their head
/// rows. A replay sample of `replay_size` records is drawn from the buffer
/// before the new records are offered to it; with an empty buffer this is
/// exactly [`finetune_step`].
pub fn er_step<R: Rng + ?Sized>(
    head: &mut LinearHead<f32>,
    buffer: &mut ExemplarBuffer,
    incoming: &[(&EmbeddingRecord, usize)],
    replay_size: usize,
    row_of: impl Fn(u32) -> usize,
    lr: f32,
    rng: &mut R,
) -> Result<f32, BaselineError> {
    let mut batch = TrainBatch::new(head.dim());
    for (r, row) in incoming {
        batch.push(&r.vector, *row);
    }
    if !buffer.is_empty() && replay_size > 0 {
        for r in buffer.replay_batch(replay_size, rng)? {
            batch.push(&r.vector, row_of(r.label));
        }
    }
    for (r, _) in incoming {
        buffer.reservoir_update(r);
    }
    finetune_step(head, &batch, lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn rec(i: u32, label: u32) -> EmbeddingRecord {
        EmbeddingRecord::new(vec![i as f32, (i * 2) as f32], label)
    }

    #[test]
    fn under_capacity_keeps_everything() {
        let mut b = ExemplarBuffer::new(5, 0);
        for i in 0..3 {
            b.reservoir_update(&rec(i, 0));
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.total_seen(), 3);
    }

    #[test]
    fn capacity_is_never_exceeded_and_contents_come_from_stream() {
        let mut b = ExemplarBuffer::new(7, 4);
        for i in 0..500 {
            b.reservoir_update(&rec(i, i % 3));
            assert!(b.len() <= 7);
        }
        assert!(b.records().iter().all(|r| r.vector[0] < 500.0 && r.vector[1] == 2.0 * r.vector[0]));
    }

    #[test]
    fn zero_capacity_stores_nothing() {
        let mut b = ExemplarBuffer::new(0, 0);
        b.reservoir_update(&rec(1, 0));
        assert!(b.is_empty());
        assert!(matches!(b.nme_predict(&[0.0f32, 0.0]), Err(BaselineError::EmptyBuffer)));
    }

    #[test]
    fn same_seed_same_buffer() {
        let run = || {
            let mut b = ExemplarBuffer::new(10, 99);
            for i in 0..1000 {
                b.reservoir_update(&rec(i, 0));
            }
            b.records().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn replay_from_singleton() {
        let mut b = ExemplarBuffer::new(3, 0);
        b.reservoir_update(&rec(42, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = b.replay_batch(4, &mut rng).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.iter().all(|r| r.vector[0] == 42.0));
        let empty = ExemplarBuffer::new(3, 0);
        assert!(matches!(empty.replay_batch(1, &mut rng), Err(BaselineError::EmptyBuffer)));
    }

    #[test]
    fn replay_is_seeded() {
        let mut b = ExemplarBuffer::new(20, 1);
        for i in 0..20 {
            b.reservoir_update(&rec(i, 0));
        }
        let a: Vec<_> = b.replay_batch(16, &mut ChaCha8Rng::seed_from_u64(5)).unwrap().into_iter().cloned().collect();
        let c: Vec<_> = b.replay_batch(16, &mut ChaCha8Rng::seed_from_u64(5)).unwrap().into_iter().cloned().collect();
        assert_eq!(a, c);
    }

    #[test]
    fn replay_is_uniform() {
        let n = 10;
        let mut b = ExemplarBuffer::new(n, 1);
        for i in 0..n as u32 {
            b.reservoir_update(&rec(i, 0));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let draws = 2000;
        let size = 8;
        let mut freq = vec![0u64; n];
        for _ in 0..draws {
            for r in b.replay_batch(size, &mut rng).unwrap() {
                freq[r.vector[0] as usize] += 1;
            }
        }
        let total = (draws * size) as f64;
        let p = 1.0 / n as f64;
        let sigma = (total * p * (1.0 - p)).sqrt();
        for f in freq {
            assert!((f as f64 - total * p).abs() < 3.0 * sigma + 1.0, "{f}");
        }
    }

    #[test]
    fn nme_with_one_record_per_class_is_full_ncm() {
        let mut b = ExemplarBuffer::new(10, 0);
        let records: Vec<_> = (0..4).map(|c| EmbeddingRecord::new(vec![c as f32 * 3.0, 1.0 - c as f32], c)).collect();
        let mut table = ClassMeanTable::new();
        for r in &records {
            b.reservoir_update(r);
            table.update_record(r).unwrap();
        }
        for q in [[0.0f32, 0.0], [4.0, -1.0], [9.5, -3.0], [1.5, 0.5]] {
            assert_eq!(b.nme_predict(&q).unwrap(), full_ncm_predict(&table, &q).unwrap());
        }
    }

    #[test]
    fn evicted_class_is_never_predicted() {
        let mut b = ExemplarBuffer::new(2, 3);
        // class 0 first, then a long run of classes 1 and 2 evicts it
        b.reservoir_update(&EmbeddingRecord::new(vec![0.0], 0));
        for i in 0..2000 {
            b.reservoir_update(&EmbeddingRecord::new(vec![10.0 + (i % 2) as f32 * 10.0], 1 + (i % 2)));
        }
        assert!(b.records().iter().all(|r| r.label != 0));
        assert_ne!(b.nme_predict(&[0.0f32]).unwrap(), 0);
    }

    #[test]
    fn nme_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..50 {
            let mut b = ExemplarBuffer::new(30, trial);
            for _ in 0..100 {
                let v: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                b.reservoir_update(&EmbeddingRecord::new(v, rng.random_range(0..6)));
            }
            let q: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            // brute force: sums per class, then a linear scan
            let mut sums: BTreeMap<u32, (f64, Vec<f64>)> = BTreeMap::new();
            for r in b.records() {
                let e = sums.entry(r.label).or_insert((0.0, vec![0.0; 4]));
                e.0 += 1.0;
                for k in 0..4 {
                    e.1[k] += r.vector[k] as f64;
                }
            }
            let mut best = (f64::INFINITY, u32::MAX);
            for (c, (n, s)) in &sums {
                let d: f64 = (0..4).map(|k| (s[k] / n - q[k] as f64).powi(2)).sum();
                if d < best.0 {
                    best = (d, *c);
                }
            }
            assert_eq!(b.nme_predict(&q).unwrap(), best.1);
        }
    }

    #[test]
    fn er_with_empty_buffer_is_finetune() {
        let mut h1 = LinearHead::<f32>::new(2);
        h1.expand(0, 2, 1).unwrap();
        h1.expand(1, 2, 1).unwrap();
        let mut h2 = h1.clone();
        let records: Vec<_> = (0..4).map(|i| rec(i, 2 + i % 2)).collect();
        let incoming: Vec<_> = records.iter().map(|r| (r, r.label as usize)).collect();
        let mut batch = TrainBatch::new(2);
        for (r, row) in &incoming {
            batch.push(&r.vector, *row);
        }
        let mut buffer = ExemplarBuffer::new(0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        er_step(&mut h1, &mut buffer, &incoming, 4, |c| c as usize, 0.1, &mut rng).unwrap();
        finetune_step(&mut h2, &batch, 0.1).unwrap();
        assert_eq!(h1, h2);
    }
}
