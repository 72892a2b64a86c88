use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, SplitTag, StoreError};

/// Partition of the class set into `num_tasks` consecutive blocks of
/// `step_size` classes, with per-task record index lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    pub num_tasks: usize,
    pub step_size: usize,
    /// Seeded permutation of all class ids; task `t` owns
    /// `class_order[t * step_size..(t + 1) * step_size]`.
    pub class_order: Vec<u32>,
    /// Per task, training record indices in presentation order.
    pub train: Vec<Vec<usize>>,
    /// Per task, test record indices in file order.
    pub test: Vec<Vec<usize>>,
    pub class_seed: u64,
    pub shuffle_seed: u64,
    task_of: Vec<usize>,
}

impl TaskSchedule {
    /// Builds a schedule from per-record labels and split tags.
    pub fn from_labels(
        num_classes: usize,
        labels: impl IntoIterator<Item = (u32, SplitTag)>,
        step_size: usize,
        class_seed: u64,
        shuffle_seed: u64,
    ) -> Result<Self, StoreError> {
        if step_size == 0 {
            return Err(StoreError::ZeroStepSize);
        }
        if num_classes == 0 || !num_classes.is_multiple_of(step_size) {
            return Err(StoreError::NotDivisible { num_classes, step_size });
        }
        let num_tasks = num_classes / step_size;

        let mut class_order: Vec<u32> = (0..num_classes as u32).collect();
        class_order.shuffle(&mut ChaCha8Rng::seed_from_u64(class_seed));
        let mut task_of = vec![0usize; num_classes];
        for (pos, &c) in class_order.iter().enumerate() {
            task_of[c as usize] = pos / step_size;
        }

        let mut train = vec![Vec::new(); num_tasks];
        let mut test = vec![Vec::new(); num_tasks];
        for (i, (label, tag)) in labels.into_iter().enumerate() {
            let label = label as usize;
            if label >= num_classes {
                return Err(StoreError::LabelOutOfRange { record: i as u64, label: label as u32, num_classes });
            }
            let t = task_of[label];
            match tag {
                SplitTag::Train => train[t].push(i),
                SplitTag::Test => test[t].push(i),
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        for list in &mut train {
            list.shuffle(&mut rng);
        }

        Ok(Self { num_tasks, step_size, class_order, train, test, class_seed, shuffle_seed, task_of })
    }

    pub fn num_classes(&self) -> usize {
        self.class_order.len()
    }

    /// Classes introduced by task `t`.
    pub fn task_classes(&self, t: usize) -> &[u32] {
        &self.class_order[t * self.step_size..(t + 1) * self.step_size]
    }

    /// Classes seen after completing tasks `0..=t`, in head row order.
    pub fn seen_classes(&self, t: usize) -> &[u32] {
        &self.class_order[..(t + 1) * self.step_size]
    }

    pub fn task_of(&self, class: u32) -> Option<usize> {
        self.task_of.get(class as usize).copied()
    }
}

/// Builds the task schedule for a loaded dataset.
pub fn build_task_schedule(
    dataset: &Dataset,
    step_size: usize,
    class_seed: u64,
    shuffle_seed: u64,
) -> Result<TaskSchedule, StoreError> {
    TaskSchedule::from_labels(
        dataset.num_classes(),
        dataset.labels().zip(dataset.split.iter().copied()),
        step_size,
        class_seed,
        shuffle_seed,
    )
}
