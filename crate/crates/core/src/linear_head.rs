//! Fully-connected classification head grown by one row block per task.
//!
//! Rows are class slots in schedule order: row `r` scores the `r`-th class of
//! the task schedule's class order. Expanding for a new task appends
//! `step_size` trainable rows and freezes every earlier row. Freezing is
//! applied to the gradient itself, so a frozen row stays bit-identical under
//! any optimizer that consumes [`HeadGrads`].

use std::fmt::Debug;
use std::fs;
use std::path::Path;

use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floating-point type the head computes in. Training uses `f32`; `f64`
/// exists for gradient checks.
pub trait Scalar: Float + FromPrimitive + Into<f64> + Debug + Send + Sync + 'static {}
impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Error, PartialEq)]
pub enum HeadError {
    #[error("dimension mismatch: head expects {expected} inputs, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("task {task} was already expanded")]
    DuplicateTask { task: usize },
    #[error("expected expansion for task {expected}, got task {got}")]
    OutOfOrderTask { expected: usize, got: usize },
    #[error("step size must be positive")]
    ZeroStepSize,
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch has {inputs} inputs but {targets} targets")]
    BatchShape { inputs: usize, targets: usize },
    #[error("target row {row} is outside the current task's trainable rows")]
    LabelOutsideTask { row: usize },
    #[error("gradient shape mismatch")]
    GradShape,
    #[error("head has no rows")]
    NoRows,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Which logits the softmax normalizes over during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftmaxScope {
    /// Every seen class, frozen rows included.
    #[default]
    All,
    /// Only the rows of the most recent task.
    Task,
}

/// One minibatch. Inputs are row-major `len × dim`; targets are head row
/// indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch<T> {
    pub dim: usize,
    pub inputs: Vec<T>,
    pub targets: Vec<usize>,
}

impl<T: Scalar> TrainBatch<T> {
    pub fn new(dim: usize) -> Self {
        Self { dim, inputs: Vec::new(), targets: Vec::new() }
    }

    pub fn push(&mut self, x: &[T], target: usize) {
        debug_assert_eq!(x.len(), self.dim);
        self.inputs.extend_from_slice(x);
        self.targets.push(target);
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn input(&self, i: usize) -> &[T] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn clear(&mut self) {
        self.inputs.clear();
        self.targets.clear();
    }
}

/// Gradients of the mean batch loss, laid out like the head parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads<T> {
    pub weights: Vec<T>,
    pub biases: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead<T> {
    dim: usize,
    weights: Vec<T>,
    biases: Vec<T>,
    trainable: Vec<bool>,
    row_task: Vec<usize>,
    tasks: usize,
    use_bias: bool,
    scope: SoftmaxScope,
}

impl<T: Scalar> LinearHead<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            weights: Vec::new(),
            biases: Vec::new(),
            trainable: Vec::new(),
            row_task: Vec::new(),
            tasks: 0,
            use_bias: true,
            scope: SoftmaxScope::All,
        }
    }

    pub fn with_bias(mut self, use_bias: bool) -> Self {
        self.use_bias = use_bias;
        self
    }

    pub fn with_scope(mut self, scope: SoftmaxScope) -> Self {
        self.scope = scope;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.biases.len()
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn uses_bias(&self) -> bool {
        self.use_bias
    }

    pub fn scope(&self) -> SoftmaxScope {
        self.scope
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.weights[r * self.dim..(r + 1) * self.dim]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.weights[r * self.dim..(r + 1) * self.dim]
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn biases(&self) -> &[T] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [T] {
        &mut self.biases
    }

    pub fn is_trainable(&self, r: usize) -> bool {
        self.trainable[r]
    }

    pub fn trainable_mask(&self) -> &[bool] {
        &self.trainable
    }

    pub fn row_task(&self, r: usize) -> usize {
        self.row_task[r]
    }

    /// Makes every row trainable (the fine-tuning baselines).
    pub fn unfreeze_all(&mut self) {
        self.trainable.iter_mut().for_each(|t| *t = true);
    }

    /// Appends `step_size` rows for `new_task`, drawn uniformly from
    /// `[-1/√dim, 1/√dim]` with zero biases, and freezes all earlier rows.
    /// The draw depends only on `init_seed` and `new_task`.
    pub fn expand(&mut self, new_task: usize, step_size: usize, init_seed: u64) -> Result<(), HeadError> {
        if new_task < self.tasks {
            return Err(HeadError::DuplicateTask { task: new_task });
        }
        if new_task > self.tasks {
            return Err(HeadError::OutOfOrderTask { expected: self.tasks, got: new_task });
        }
        if step_size == 0 {
            return Err(HeadError::ZeroStepSize);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        rng.set_stream(new_task as u64);
        let bound = 1.0 / (self.dim as f64).sqrt();
        self.trainable.iter_mut().for_each(|t| *t = false);
        for _ in 0..step_size {
            for _ in 0..self.dim {
                let w: f64 = rng.random_range(-bound..=bound);
                self.weights.push(T::from_f64(w).unwrap());
            }
            self.biases.push(T::zero());
            self.trainable.push(true);
            self.row_task.push(new_task);
        }
        self.tasks += 1;
        Ok(())
    }

    fn check_dim(&self, x: &[T]) -> Result<(), HeadError> {
        if x.len() != self.dim {
            return Err(HeadError::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        Ok(())
    }

    /// `W·x + b` over every row.
    pub fn logits(&self, x: &[T]) -> Result<Vec<T>, HeadError> {
        self.check_dim(x)?;
        let mut out = vec![T::zero(); self.rows()];
        self.logits_into(x, &mut out);
        Ok(out)
    }

    fn logits_into(&self, x: &[T], out: &mut [T]) {
        for (r, o) in out.iter_mut().enumerate() {
            let dot = self.row(r).iter().zip(x).fold(T::zero(), |acc, (w, v)| acc + *w * *v);
            *o = if self.use_bias { dot + self.biases[r] } else { dot };
        }
    }

    /// Row range the softmax normalizes over.
    fn scope_rows(&self) -> std::ops::Range<usize> {
        match self.scope {
            SoftmaxScope::All => 0..self.rows(),
            SoftmaxScope::Task => {
                let current = self.tasks.saturating_sub(1);
                let start = self.row_task.iter().position(|&t| t == current).unwrap_or(0);
                start..self.rows()
            }
        }
    }

    fn check_batch(&self, batch: &TrainBatch<T>) -> Result<std::ops::Range<usize>, HeadError> {
        if self.rows() == 0 {
            return Err(HeadError::NoRows);
        }
        if batch.is_empty() {
            return Err(HeadError::EmptyBatch);
        }
        if batch.dim != self.dim {
            return Err(HeadError::DimensionMismatch { expected: self.dim, got: batch.dim });
        }
        if batch.inputs.len() != batch.len() * batch.dim {
            return Err(HeadError::BatchShape { inputs: batch.inputs.len() / batch.dim.max(1), targets: batch.len() });
        }
        let scope = self.scope_rows();
        for &t in &batch.targets {
            if !scope.contains(&t) || !self.trainable[t] {
                return Err(HeadError::LabelOutsideTask { row: t });
            }
        }
        Ok(scope)
    }

    /// Mean cross-entropy over the batch.
    pub fn loss(&self, batch: &TrainBatch<T>) -> Result<T, HeadError> {
        let scope = self.check_batch(batch)?;
        let mut z = vec![T::zero(); self.rows()];
        let mut total = T::zero();
        for i in 0..batch.len() {
            self.logits_into(batch.input(i), &mut z);
            let zs = &z[scope.clone()];
            total = total + log_sum_exp(zs) - z[batch.targets[i]];
        }
        Ok(total / T::from_usize(batch.len()).unwrap())
    }

    /// Mean cross-entropy and its gradient. Gradients of frozen rows are
    /// exactly zero; rows outside the softmax scope get zero as well.
    pub fn ce_loss_and_grad(&self, batch: &TrainBatch<T>) -> Result<(T, HeadGrads<T>), HeadError> {
        let scope = self.check_batch(batch)?;
        let rows = self.rows();
        let mut gw = vec![T::zero(); rows * self.dim];
        let mut gb = vec![T::zero(); rows];
        let mut z = vec![T::zero(); rows];
        let inv_b = T::one() / T::from_usize(batch.len()).unwrap();
        let mut total = T::zero();

        for i in 0..batch.len() {
            let x = batch.input(i);
            let target = batch.targets[i];
            self.logits_into(x, &mut z);
            let max = z[scope.clone()].iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for r in scope.clone() {
                let e = (z[r] - max).exp();
                z[r] = e;
                denom = denom + e;
            }
            total = total + denom.ln() + max - (self.logit_at(x, target));
            for r in scope.clone() {
                if !self.trainable[r] {
                    continue;
                }
                let mut dz = z[r] / denom;
                if r == target {
                    dz = dz - T::one();
                }
                let dz = dz * inv_b;
                for (g, v) in gw[r * self.dim..(r + 1) * self.dim].iter_mut().zip(x) {
                    *g = *g + dz * *v;
                }
                if self.use_bias {
                    gb[r] = gb[r] + dz;
                }
            }
        }
        Ok((total * inv_b, HeadGrads { weights: gw, biases: gb }))
    }

    fn logit_at(&self, x: &[T], r: usize) -> T {
        let dot = self.row(r).iter().zip(x).fold(T::zero(), |acc, (w, v)| acc + *w * *v);
        if self.use_bias {
            dot + self.biases[r]
        } else {
            dot
        }
    }

    /// Plain SGD: trainable rows move by `-lr · grad`, frozen rows are not
    /// touched.
    pub fn sgd_step(&mut self, grads: &HeadGrads<T>, lr: T) -> Result<(), HeadError> {
        if grads.weights.len() != self.weights.len() || grads.biases.len() != self.biases.len() {
            return Err(HeadError::GradShape);
        }
        for r in 0..self.rows() {
            if !self.trainable[r] {
                continue;
            }
            let span = r * self.dim..(r + 1) * self.dim;
            for (w, g) in self.weights[span.clone()].iter_mut().zip(&grads.weights[span]) {
                *w = *w - lr * *g;
            }
            if self.use_bias {
                self.biases[r] = self.biases[r] - lr * grads.biases[r];
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> HeadCheckpoint {
        HeadCheckpoint {
            rows: (0..self.rows())
                .map(|r| CheckpointRow {
                    task: self.row_task[r],
                    trainable: self.trainable[r],
                    bias: self.biases[r].into(),
                    weights: self.row(r).iter().map(|w| (*w).into()).collect(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &HeadCheckpoint, use_bias: bool, scope: SoftmaxScope) -> Result<Self, HeadError> {
        let dim = ck.rows.first().map(|r| r.weights.len()).ok_or(HeadError::NoRows)?;
        let mut head = Self::new(dim).with_bias(use_bias).with_scope(scope);
        for (i, row) in ck.rows.iter().enumerate() {
            if row.weights.len() != dim {
                return Err(HeadError::Checkpoint(format!("row {i} has {} weights, expected {dim}", row.weights.len())));
            }
            if i > 0 && row.task < ck.rows[i - 1].task {
                return Err(HeadError::Checkpoint(format!("row {i} breaks task order")));
            }
            head.weights.extend(row.weights.iter().map(|w| T::from_f64(*w).unwrap()));
            head.biases.push(T::from_f64(row.bias).unwrap());
            head.trainable.push(row.trainable);
            head.row_task.push(row.task);
        }
        head.tasks = head.row_task.last().map_or(0, |t| t + 1);
        Ok(head)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint()).map_err(std::io::Error::other)?;
        fs::write(path, text)
    }
}

/// JSON form `{rows: [{task, trainable, bias, weights}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadCheckpoint {
    pub rows: Vec<CheckpointRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRow {
    pub task: usize,
    pub trainable: bool,
    pub bias: f64,
    pub weights: Vec<f64>,
}

fn log_sum_exp<T: Scalar>(z: &[T]) -> T {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let sum = z.iter().fold(T::zero(), |acc, v| acc + (*v - max).exp());
    max + sum.ln()
}

/// Central-difference gradient of the mean cross-entropy, in `f64`, for
/// every parameter (frozen rows included). Computes its own loss by the
/// textbook formula and shares no code with
/// [`LinearHead::ce_loss_and_grad`]. Never used for training.
pub fn finite_diff_grad_oracle(head: &LinearHead<f64>, batch: &TrainBatch<f64>, h: f64) -> HeadGrads<f64> {
    let dim = head.dim;
    let rows = head.rows();
    let scope = head.scope_rows();
    let use_bias = head.use_bias;
    let loss = |w: &[f64], b: &[f64]| -> f64 {
        let mut total = 0.0;
        for i in 0..batch.len() {
            let x = &batch.inputs[i * dim..(i + 1) * dim];
            let logit = |r: usize| -> f64 {
                let mut s = if use_bias { b[r] } else { 0.0 };
                for j in 0..dim {
                    s += w[r * dim + j] * x[j];
                }
                s
            };
            let denom: f64 = scope.clone().map(|r| logit(r).exp()).sum();
            total -= (logit(batch.targets[i]).exp() / denom).ln();
        }
        total / batch.len() as f64
    };

    let mut w = head.weights.clone();
    let mut b = head.biases.clone();
    let mut gw = vec![0.0; rows * dim];
    for k in 0..w.len() {
        let orig = w[k];
        w[k] = orig + h;
        let up = loss(&w, &b);
        w[k] = orig - h;
        let down = loss(&w, &b);
        w[k] = orig;
        gw[k] = (up - down) / (2.0 * h);
    }
    let mut gb = vec![0.0; rows];
    if use_bias {
        for k in 0..b.len() {
            let orig = b[k];
            b[k] = orig + h;
            let up = loss(&w, &b);
            b[k] = orig - h;
            let down = loss(&w, &b);
            b[k] = orig;
            gb[k] = (up - down) / (2.0 * h);
        }
    }
    HeadGrads { weights: gw, biases: gb }
}
