//! Replay memory buffer: per-task reservoirs of stored training examples
//! and replay-batch sampling for the outer loop.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::numkit::Rng;
use crate::tasks::{LabeledBatch, TaskDataset};

/// Stored subsets of past tasks. The trainer admits a task only after
/// finishing it, so the buffer never holds data of the task being trained.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    per_task: BTreeMap<usize, LabeledBatch>,
    capacity_fraction: f64,
    /// Per-admission substreams derive from this key, so admission order
    /// never changes which examples a task stores.
    admit_rng: Rng,
    sample_rng: Rng,
    stratified: bool,
}

impl ReplayBuffer {
    pub fn new(capacity_fraction: f64, rng: Rng) -> Result<Self> {
        if !(capacity_fraction > 0.0 && capacity_fraction <= 1.0) {
            return Err(Error::InvalidParameter {
                name: "capacity_fraction",
                message: format!("{capacity_fraction} not in (0, 1]"),
            });
        }
        Ok(ReplayBuffer {
            per_task: BTreeMap::new(),
            capacity_fraction,
            admit_rng: rng.split("admit"),
            sample_rng: rng.split("sample"),
            stratified: false,
        })
    }

    /// Sample replay batches with an equal share per stored task instead of
    /// uniformly over the union.
    pub fn with_stratified(mut self, stratified: bool) -> Self {
        self.stratified = stratified;
        self
    }

    pub fn capacity_fraction(&self) -> f64 {
        self.capacity_fraction
    }

    pub fn is_empty(&self) -> bool {
        self.per_task.is_empty()
    }

    pub fn task_ids(&self) -> Vec<usize> {
        self.per_task.keys().copied().collect()
    }

    pub fn stored(&self, task_id: usize) -> Option<&LabeledBatch> {
        self.per_task.get(&task_id)
    }

    pub fn stored_total(&self) -> usize {
        self.per_task.values().map(|b| b.len()).sum()
    }

    /// Store ceil(capacity_fraction * N_k) training examples of a finished
    /// task, drawn uniformly without replacement.
    pub fn admit_task(&mut self, dataset: &TaskDataset) -> Result<()> {
        if self.per_task.contains_key(&dataset.task_id) {
            return Err(Error::DuplicateTask(dataset.task_id));
        }
        let n = dataset.train.len();
        let keep = ((self.capacity_fraction * n as f64).ceil() as usize).clamp(1, n);
        let mut rng = self.admit_rng.split_index(dataset.task_id as u64);
        let indices = rng.sample_indices(n, keep);
        self.per_task
            .insert(dataset.task_id, dataset.train.select(&indices));
        Ok(())
    }

    /// Draw a replay batch over the union of stored examples: without
    /// replacement when the union is large enough, with replacement
    /// otherwise. Errors when nothing has been admitted yet, which the
    /// trainer treats as "skip the outer loop".
    pub fn sample_replay(&mut self, batch_size: usize) -> Result<LabeledBatch> {
        if self.per_task.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        if batch_size == 0 {
            return Err(Error::InvalidParameter {
                name: "batch_size",
                message: "batch_size must be positive".into(),
            });
        }
        if self.stratified {
            return self.sample_stratified(batch_size);
        }
        let flat: Vec<(usize, usize)> = self
            .per_task
            .iter()
            .flat_map(|(&task, batch)| (0..batch.len()).map(move |i| (task, i)))
            .collect();
        let picks: Vec<usize> = if flat.len() >= batch_size {
            self.sample_rng.sample_indices(flat.len(), batch_size)
        } else {
            (0..batch_size)
                .map(|_| self.sample_rng.next_below(flat.len()))
                .collect()
        };
        let refs: Vec<(usize, usize)> = picks.into_iter().map(|i| flat[i]).collect();
        self.gather(&refs)
    }

    fn sample_stratified(&mut self, batch_size: usize) -> Result<LabeledBatch> {
        let tasks: Vec<usize> = self.per_task.keys().copied().collect();
        let mut refs = Vec::with_capacity(batch_size);
        for slot in 0..batch_size {
            let task = tasks[slot % tasks.len()];
            let stored = &self.per_task[&task];
            refs.push((task, self.sample_rng.next_below(stored.len())));
        }
        self.gather(&refs)
    }

    fn gather(&self, refs: &[(usize, usize)]) -> Result<LabeledBatch> {
        let mut parts = Vec::with_capacity(refs.len());
        for &(task, idx) in refs {
            parts.push(self.per_task[&task].select(&[idx]));
        }
        let views: Vec<&LabeledBatch> = parts.iter().collect();
        LabeledBatch::concat(&views)
    }

    /// Dump stored contents as CSV rows of `task_id,x0,...,x{d-1},label`.
    pub fn dump_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<writer>", e);
        for (&task, batch) in &self.per_task {
            for row in 0..batch.len() {
                let mut line = format!("{task}");
                for &x in batch.inputs.row(row) {
                    line.push_str(&format!(",{x}"));
                }
                line.push_str(&format!(",{}", batch.labels[row]));
                writeln!(w, "{line}").map_err(io)?;
            }
        }
        Ok(())
    }
}
