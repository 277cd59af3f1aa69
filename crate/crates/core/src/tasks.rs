//! Seeded synthetic task streams and dataset handling.
//!
//! Two generator families stand in for text-classification sequences: class
//! Gaussians whose means rotate in a fixed 2-plane between tasks, and a
//! shared base distribution viewed through per-task feature permutations.
//! The label space is shared across tasks (domain-incremental), so one
//! classifier head serves the whole stream. Generators are pure functions
//! of (parameters, seed).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{RealMat, Rng};

/// Rotation-plane radius of class 0's mean.
pub const CLASS_RADIUS_BASE: f64 = 1.8;
/// Radius increment per class, so distinct radii survive any rotation.
pub const CLASS_RADIUS_STEP: f64 = 1.2;
/// Off-plane mean offset: class c also gets this value at input dim 2+c.
/// These dims never rotate, so they carry task-shared class signal through
/// input coordinates the rotating signal does not touch; the rotating
/// plane carries the stronger, task-specific signal.
pub const CLASS_STATIC_SEP: f64 = 2.0;
/// Isotropic noise applied to every input dimension.
pub const NOISE_STD: f64 = 1.0;

/// A batch of inputs with one class index per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub inputs: RealMat,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(inputs: RealMat, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::LengthMismatch {
                context: "LabeledBatch",
                left: inputs.rows(),
                right: labels.len(),
            });
        }
        Ok(LabeledBatch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gather the given rows into a new batch.
    pub fn select(&self, indices: &[usize]) -> LabeledBatch {
        LabeledBatch {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Concatenate batches with identical input width.
    pub fn concat(batches: &[&LabeledBatch]) -> Result<LabeledBatch> {
        let first = batches.first().ok_or(Error::EmptyInput("concat"))?;
        let cols = first.inputs.cols();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for b in batches {
            if b.inputs.cols() != cols {
                return Err(Error::LengthMismatch {
                    context: "LabeledBatch::concat",
                    left: b.inputs.cols(),
                    right: cols,
                });
            }
            data.extend_from_slice(b.inputs.data());
            labels.extend_from_slice(&b.labels);
        }
        Ok(LabeledBatch {
            inputs: RealMat::from_vec(labels.len(), cols, data)?,
            labels,
        })
    }
}

/// Provenance of one generated task: generator name, seed, parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub generator: String,
    pub seed: u64,
    pub params: String,
}

/// One task: a training pool and a held-out test set from one distribution.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub task_id: usize,
    pub train: LabeledBatch,
    pub test: LabeledBatch,
    pub descriptor: TaskDescriptor,
}

/// Which generator family produced a stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StreamKind {
    RotatedGaussian { rotation_step_degrees: f64 },
    PermutedFeatures,
}

/// Everything needed to regenerate a stream bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamDescriptor {
    #[serde(flatten)]
    pub kind: StreamKind,
    pub num_tasks: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Generator-parameter index presented at each position.
    pub order: Vec<usize>,
    pub order_id: String,
}

impl StreamDescriptor {
    /// Identity used to decide whether two runs are comparable: the stream
    /// with order information stripped.
    pub fn family_key(&self) -> String {
        let mut d = self.clone();
        d.order = Vec::new();
        d.order_id = String::new();
        serde_json::to_string(&d).unwrap_or_default()
    }
}

/// An ordered presentation of tasks. task_ids equal positions 0..K.
#[derive(Debug, Clone)]
pub struct TaskSequence {
    pub tasks: Vec<TaskDataset>,
    pub descriptor: StreamDescriptor,
}

impl TaskSequence {
    pub fn new(tasks: Vec<TaskDataset>, descriptor: StreamDescriptor) -> Result<Self> {
        for (pos, t) in tasks.iter().enumerate() {
            if t.task_id != pos {
                return Err(Error::InvalidParameter {
                    name: "tasks",
                    message: format!("task_id {} at position {pos}", t.task_id),
                });
            }
        }
        Ok(TaskSequence { tasks, descriptor })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Present the same generated tasks in a different order. Positional
    /// task_ids are reassigned so ids stay strictly increasing.
    pub fn with_order(&self, perm: &[usize], order_id: &str) -> Result<TaskSequence> {
        if perm.len() != self.tasks.len() {
            return Err(Error::LengthMismatch {
                context: "with_order",
                left: perm.len(),
                right: self.tasks.len(),
            });
        }
        let mut seen = BTreeSet::new();
        for &p in perm {
            if p >= self.tasks.len() || !seen.insert(p) {
                return Err(Error::InvalidParameter {
                    name: "perm",
                    message: format!("{perm:?} is not a permutation"),
                });
            }
        }
        let base_order = &self.descriptor.order;
        let mut tasks = Vec::with_capacity(perm.len());
        let mut order = Vec::with_capacity(perm.len());
        for (pos, &src) in perm.iter().enumerate() {
            let mut t = self.tasks[src].clone();
            t.task_id = pos;
            tasks.push(t);
            order.push(base_order[src]);
        }
        let mut descriptor = self.descriptor.clone();
        descriptor.order = order;
        descriptor.order_id = order_id.to_string();
        TaskSequence::new(tasks, descriptor)
    }
}

fn check_stream_dims(
    num_tasks: usize,
    num_classes: usize,
    input_dim: usize,
    n_train: usize,
    n_test: usize,
) -> Result<()> {
    if num_tasks < 2 {
        return Err(Error::InvalidParameter {
            name: "num_tasks",
            message: format!("{num_tasks} < 2"),
        });
    }
    if num_classes < 2 || input_dim < 2 || n_train == 0 || n_test == 0 {
        return Err(Error::InvalidParameter {
            name: "stream dims",
            message: format!(
                "num_classes={num_classes} input_dim={input_dim} n_train={n_train} n_test={n_test}"
            ),
        });
    }
    Ok(())
}

/// Class means: class c sits at angle 2*pi*c/C plus the task rotation in
/// the (0, 1) plane at its own radius, plus a static off-plane offset at
/// dim 2+c (when the input is wide enough); zero elsewhere.
fn class_means(num_classes: usize, input_dim: usize, rotation: f64) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|c| {
            let angle = std::f64::consts::TAU * c as f64 / num_classes as f64 + rotation;
            let radius = CLASS_RADIUS_BASE + CLASS_RADIUS_STEP * c as f64;
            let mut mean = vec![0.0; input_dim];
            mean[0] = radius * angle.cos();
            mean[1] = radius * angle.sin();
            if 2 + c < input_dim {
                mean[2 + c] = CLASS_STATIC_SEP;
            }
            mean
        })
        .collect()
}

/// Draw n samples (round-robin labels, shuffled row order) from the class
/// Gaussians, optionally viewing features through a permutation.
fn sample_split(
    rng: &mut Rng,
    means: &[Vec<f64>],
    input_dim: usize,
    n: usize,
    perm: Option<&[usize]>,
) -> Result<LabeledBatch> {
    let num_classes = means.len();
    let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    rng.shuffle(&mut labels);
    let mut data = Vec::with_capacity(n * input_dim);
    let mut base_row = vec![0.0; input_dim];
    for &label in &labels {
        let mean = &means[label];
        for (d, slot) in base_row.iter_mut().enumerate() {
            *slot = mean[d] + NOISE_STD * rng.next_normal();
        }
        match perm {
            Some(p) => data.extend(p.iter().map(|&src| base_row[src])),
            None => data.extend_from_slice(&base_row),
        }
    }
    LabeledBatch::new(RealMat::from_vec(n, input_dim, data)?, labels)
}

/// Stream whose class means rotate by `rotation_step_degrees` per task in
/// the (0, 1) input plane. Small steps give high task overlap, large steps
/// give strong interference.
pub fn make_rotated_gaussian_stream(
    num_tasks: usize,
    num_classes: usize,
    input_dim: usize,
    n_train: usize,
    n_test: usize,
    rotation_step_degrees: f64,
    seed: u64,
) -> Result<TaskSequence> {
    check_stream_dims(num_tasks, num_classes, input_dim, n_train, n_test)?;
    if !rotation_step_degrees.is_finite() {
        return Err(Error::InvalidParameter {
            name: "rotation_step_degrees",
            message: format!("{rotation_step_degrees}"),
        });
    }
    let root = Rng::new(seed).split("rotated_gaussian");
    let mut tasks = Vec::with_capacity(num_tasks);
    for k in 0..num_tasks {
        let rotation = (k as f64 * rotation_step_degrees).to_radians();
        let means = class_means(num_classes, input_dim, rotation);
        let mut task_rng = root.split_index(k as u64);
        let train = sample_split(&mut task_rng, &means, input_dim, n_train, None)?;
        let test = sample_split(&mut task_rng, &means, input_dim, n_test, None)?;
        tasks.push(TaskDataset {
            task_id: k,
            train,
            test,
            descriptor: TaskDescriptor {
                generator: "rotated_gaussian".into(),
                seed,
                params: format!("task={k} rotation_deg={}", k as f64 * rotation_step_degrees),
            },
        });
    }
    TaskSequence::new(
        tasks,
        StreamDescriptor {
            kind: StreamKind::RotatedGaussian {
                rotation_step_degrees,
            },
            num_tasks,
            num_classes,
            input_dim,
            n_train,
            n_test,
            seed,
            order: (0..num_tasks).collect(),
            order_id: "canonical".into(),
        },
    )
}

/// The feature permutation applied by task k of a permuted stream.
/// Task 0 is the identity; later tasks draw distinct random permutations.
pub fn permutation_for_task(input_dim: usize, seed: u64, k: usize) -> Vec<usize> {
    if k == 0 {
        return (0..input_dim).collect();
    }
    let root = Rng::new(seed).split("feature_permutations");
    let mut chosen: Vec<Vec<usize>> = vec![(0..input_dim).collect()];
    for task in 1..=k {
        let mut attempt = 0u64;
        loop {
            let mut rng = root.split_index(task as u64).split_index(attempt);
            let mut perm: Vec<usize> = (0..input_dim).collect();
            rng.shuffle(&mut perm);
            if !chosen.contains(&perm) {
                chosen.push(perm);
                break;
            }
            attempt += 1;
        }
    }
    chosen[k].clone()
}

/// Stream that views one fixed base distribution through a distinct
/// feature permutation per task.
pub fn make_permuted_feature_stream(
    num_tasks: usize,
    num_classes: usize,
    input_dim: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<TaskSequence> {
    check_stream_dims(num_tasks, num_classes, input_dim, n_train, n_test)?;
    let root = Rng::new(seed).split("permuted_features");
    let means = class_means(num_classes, input_dim, 0.0);
    let mut tasks = Vec::with_capacity(num_tasks);
    for k in 0..num_tasks {
        let perm = permutation_for_task(input_dim, seed, k);
        let mut task_rng = root.split_index(k as u64);
        let train = sample_split(&mut task_rng, &means, input_dim, n_train, Some(&perm))?;
        let test = sample_split(&mut task_rng, &means, input_dim, n_test, Some(&perm))?;
        tasks.push(TaskDataset {
            task_id: k,
            train,
            test,
            descriptor: TaskDescriptor {
                generator: "permuted_features".into(),
                seed,
                params: format!("task={k}"),
            },
        });
    }
    TaskSequence::new(
        tasks,
        StreamDescriptor {
            kind: StreamKind::PermutedFeatures,
            num_tasks,
            num_classes,
            input_dim,
            n_train,
            n_test,
            seed,
            order: (0..num_tasks).collect(),
            order_id: "canonical".into(),
        },
    )
}

/// Infinite stream of shuffled without-replacement mini-batches. Each epoch
/// reshuffles from the iterator's own RNG stream, so epochs differ but the
/// whole sequence is a pure function of the seed.
pub struct BatchIter<'a> {
    data: &'a LabeledBatch,
    batch_size: usize,
    rng: Rng,
    order: Vec<usize>,
    pos: usize,
}

impl<'a> BatchIter<'a> {
    pub fn new(data: &'a LabeledBatch, batch_size: usize, rng: Rng) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidParameter {
                name: "batch_size",
                message: "batch_size must be positive".into(),
            });
        }
        if batch_size > data.len() {
            return Err(Error::InvalidParameter {
                name: "batch_size",
                message: format!("batch_size {batch_size} exceeds dataset size {}", data.len()),
            });
        }
        Ok(BatchIter {
            data,
            batch_size,
            rng,
            order: Vec::new(),
            pos: 0,
        })
    }

    /// Batches per epoch (the final one may be short).
    pub fn batches_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.batch_size)
    }
}

impl Iterator for BatchIter<'_> {
    type Item = LabeledBatch;

    fn next(&mut self) -> Option<LabeledBatch> {
        if self.pos >= self.order.len() {
            self.order = (0..self.data.len()).collect();
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.data.select(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

/// Write one split as CSV rows of `x0,...,x{d-1},label`.
pub fn write_split_csv<W: Write>(split: &LabeledBatch, mut w: W) -> Result<()> {
    let io = |e| Error::io("<writer>", e);
    for (row, &label) in split.labels.iter().enumerate() {
        let mut line = String::new();
        for &x in split.inputs.row(row) {
            let _ = write!(line, "{x},");
        }
        let _ = write!(line, "{label}");
        writeln!(w, "{line}").map_err(io)?;
    }
    Ok(())
}

fn read_split_csv(path: &Path, input_dim: usize, num_classes: usize) -> Result<LabeledBatch> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&display, e))?;
        let lineno = index + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != input_dim + 1 {
            return Err(Error::Parse {
                path: display,
                line: lineno,
                message: format!("expected {} fields, found {}", input_dim + 1, fields.len()),
            });
        }
        for f in &fields[..input_dim] {
            let value: f64 = f.trim().parse().map_err(|_| Error::Parse {
                path: display.clone(),
                line: lineno,
                message: format!("bad real value {f:?}"),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    path: display.clone(),
                    line: lineno,
                    message: format!("non-finite value {value}"),
                });
            }
            data.push(value);
        }
        let label: usize = fields[input_dim].trim().parse().map_err(|_| Error::Parse {
            path: display.clone(),
            line: lineno,
            message: format!("bad label {:?}", fields[input_dim]),
        })?;
        if label >= num_classes {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes,
                line: Some(lineno),
            });
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Parse {
            path: display,
            line: 0,
            message: "no rows".into(),
        });
    }
    LabeledBatch::new(RealMat::from_vec(labels.len(), input_dim, data)?, labels)
}

/// Save a dataset as `<dir>/train.csv` and `<dir>/test.csv`.
pub fn save_csv_dataset(dataset: &TaskDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for (name, split) in [("train.csv", &dataset.train), ("test.csv", &dataset.test)] {
        let path = dir.join(name);
        let file =
            std::fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        write_split_csv(split, std::io::BufWriter::new(file))?;
    }
    Ok(())
}

/// Load a dataset from `<dir>/train.csv` and `<dir>/test.csv`.
pub fn load_csv_dataset(dir: &Path, input_dim: usize, num_classes: usize) -> Result<TaskDataset> {
    let train = read_split_csv(&dir.join("train.csv"), input_dim, num_classes)?;
    let test = read_split_csv(&dir.join("test.csv"), input_dim, num_classes)?;
    Ok(TaskDataset {
        task_id: 0,
        train,
        test,
        descriptor: TaskDescriptor {
            generator: "csv".into(),
            seed: 0,
            params: dir.display().to_string(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn small_stream(rotation: f64, seed: u64) -> TaskSequence {
        make_rotated_gaussian_stream(3, 4, 8, 40, 20, rotation, seed).unwrap()
    }

    #[test]
    fn generators_are_deterministic() {
        let a = make_rotated_gaussian_stream(2, 2, 6, 30, 10, 45.0, 7).unwrap();
        let b = make_rotated_gaussian_stream(2, 2, 6, 30, 10, 45.0, 7).unwrap();
        for (ta, tb) in a.tasks.iter().zip(b.tasks.iter()) {
            assert_eq!(ta.train, tb.train);
            assert_eq!(ta.test, tb.test);
        }
        let p = make_permuted_feature_stream(3, 2, 5, 20, 10, 9).unwrap();
        let q = make_permuted_feature_stream(3, 2, 5, 20, 10, 9).unwrap();
        assert_eq!(p.tasks[2].train, q.tasks[2].train);
    }

    #[test]
    fn zero_rotation_tasks_are_identically_distributed() {
        let s = small_stream(0.0, 3);
        // Same means, same generator family; only the noise stream differs.
        let m0: f64 = s.tasks[0].train.inputs.data().iter().sum::<f64>();
        let m1: f64 = s.tasks[1].train.inputs.data().iter().sum::<f64>();
        let n = s.tasks[0].train.inputs.data().len() as f64;
        assert!((m0 / n - m1 / n).abs() < 0.3);
    }

    #[test]
    fn rotation_90_makes_orthogonal_bayes_boundaries() {
        // Two classes: the Bayes boundary of equal-covariance Gaussians is
        // the perpendicular bisector of the mean segment, so the boundary
        // normal is mu_0 - mu_1. The rotation-plane component of that
        // normal must become orthogonal under a 90-degree rotation (the
        // static off-plane offsets are rotation-invariant by design).
        let before = class_means(2, 4, 0.0);
        let after = class_means(2, 4, 90f64.to_radians());
        let plane_normal = |means: &[Vec<f64>]| {
            [
                means[0][0] - means[1][0],
                means[0][1] - means[1][1],
            ]
        };
        let n0 = plane_normal(&before);
        let n1 = plane_normal(&after);
        let dot = n0[0] * n1[0] + n0[1] * n1[1];
        assert!(dot.abs() < 1e-9, "dot = {dot}");
    }

    #[test]
    fn class_balance_within_one() {
        let s = small_stream(30.0, 5);
        for t in &s.tasks {
            for split in [&t.train, &t.test] {
                let mut counts = BTreeMap::new();
                for &l in &split.labels {
                    *counts.entry(l).or_insert(0usize) += 1;
                }
                let ideal = split.len() as f64 / 4.0;
                for (_, c) in counts {
                    assert!((c as f64 - ideal).abs() <= 1.0);
                }
            }
        }
    }

    #[test]
    fn train_test_disjoint() {
        let s = small_stream(30.0, 11);
        for t in &s.tasks {
            for r in 0..t.train.len() {
                for q in 0..t.test.len() {
                    assert_ne!(t.train.inputs.row(r), t.test.inputs.row(q));
                }
            }
        }
    }

    #[test]
    fn permutations_identity_then_distinct() {
        assert_eq!(permutation_for_task(6, 1, 0), vec![0, 1, 2, 3, 4, 5]);
        let perms: Vec<Vec<usize>> = (0..5).map(|k| permutation_for_task(6, 1, k)).collect();
        for i in 0..perms.len() {
            for j in (i + 1)..perms.len() {
                assert_ne!(perms[i], perms[j], "tasks {i} and {j} collide");
            }
        }
    }

    #[test]
    fn permutation_composed_with_inverse_recovers_base() {
        let perm = permutation_for_task(7, 2, 3);
        let mut inverse = vec![0usize; perm.len()];
        for (dst, &src) in perm.iter().enumerate() {
            inverse[src] = dst;
        }
        let base: Vec<f64> = (0..7).map(|i| i as f64 * 1.5).collect();
        let permuted: Vec<f64> = perm.iter().map(|&src| base[src]).collect();
        let recovered: Vec<f64> = inverse.iter().map(|&src| permuted[src]).collect();
        assert_eq!(recovered, base);
    }

    #[test]
    fn batch_iter_full_batch_is_whole_dataset() {
        let s = small_stream(0.0, 1);
        let t = &s.tasks[0];
        let mut it = BatchIter::new(&t.train, t.train.len(), Rng::new(4)).unwrap();
        let b = it.next().unwrap();
        assert_eq!(b.len(), t.train.len());
        let mut seen: Vec<Vec<u64>> = (0..b.len())
            .map(|r| b.inputs.row(r).iter().map(|x| x.to_bits()).collect())
            .collect();
        let mut expect: Vec<Vec<u64>> = (0..t.train.len())
            .map(|r| t.train.inputs.row(r).iter().map(|x| x.to_bits()).collect())
            .collect();
        seen.sort();
        expect.sort();
        assert_eq!(seen, expect);
    }

    #[test]
    fn batch_iter_is_seed_deterministic_and_reshuffles() {
        let s = small_stream(0.0, 1);
        let t = &s.tasks[0];
        let take = |seed: u64, n: usize| -> Vec<Vec<usize>> {
            BatchIter::new(&t.train, 8, Rng::new(seed))
                .unwrap()
                .take(n)
                .map(|b| b.labels)
                .collect()
        };
        let per_epoch = t.train.len().div_ceil(8);
        let a = take(42, per_epoch * 2);
        let b = take(42, per_epoch * 2);
        assert_eq!(a, b);
        assert_ne!(a[..per_epoch], a[per_epoch..], "epochs should reshuffle");
    }

    #[test]
    fn batch_iter_epoch_is_partition() {
        let s = small_stream(0.0, 2);
        let t = &s.tasks[1];
        let mut it = BatchIter::new(&t.train, 7, Rng::new(3)).unwrap();
        let mut rows: Vec<Vec<u64>> = Vec::new();
        for _ in 0..it.batches_per_epoch() {
            let b = it.next().unwrap();
            for r in 0..b.len() {
                rows.push(b.inputs.row(r).iter().map(|x| x.to_bits()).collect());
            }
        }
        let mut expect: Vec<Vec<u64>> = (0..t.train.len())
            .map(|r| t.train.inputs.row(r).iter().map(|x| x.to_bits()).collect())
            .collect();
        rows.sort();
        expect.sort();
        assert_eq!(rows, expect);
    }

    #[test]
    fn batch_iter_rejects_bad_sizes() {
        let s = small_stream(0.0, 1);
        assert!(BatchIter::new(&s.tasks[0].train, 0, Rng::new(0)).is_err());
        assert!(BatchIter::new(&s.tasks[0].train, 41, Rng::new(0)).is_err());
    }

    #[test]
    fn with_order_reassigns_positions() {
        let s = small_stream(10.0, 8);
        let r = s.with_order(&[2, 0, 1], "order2").unwrap();
        assert_eq!(r.tasks[0].descriptor.params, s.tasks[2].descriptor.params);
        assert_eq!(r.tasks[0].task_id, 0);
        assert_eq!(r.descriptor.order, vec![2, 0, 1]);
        assert!(s.with_order(&[0, 0, 1], "bad").is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let s = small_stream(20.0, 6);
        save_csv_dataset(&s.tasks[1], dir.path()).unwrap();
        let loaded = load_csv_dataset(dir.path(), 8, 4).unwrap();
        assert_eq!(loaded.train.labels, s.tasks[1].train.labels);
        for r in 0..loaded.train.len() {
            for (a, b) in loaded
                .train
                .inputs
                .row(r)
                .iter()
                .zip(s.tasks[1].train.inputs.row(r))
            {
                assert!((a - b).abs() < 1e-12);
            }
        }

        // empty file -> "no rows"
        std::fs::write(dir.path().join("train.csv"), "").unwrap();
        let err = load_csv_dataset(dir.path(), 8, 4).unwrap_err();
        assert!(err.to_string().contains("no rows"), "{err}");

        // out-of-range label names the line
        let mut row = ["0.0"; 8].join(",");
        row.push_str(",4");
        std::fs::write(dir.path().join("train.csv"), format!("{row}\n")).unwrap();
        let err = load_csv_dataset(dir.path(), 8, 4).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }
}
