//! The recurrent inner/outer training loop, baseline trainers, and
//! evaluation over a task sequence.
//!
//! One cycle: Q fast gradient steps on the current task (inner loop,
//! tracking smoothed importance), a single replay step on the memory
//! buffer (outer loop, re-estimating historical importance at the
//! post-inner parameters), then fusion of the two masked task vectors into
//! the pre-cycle parameters. The parameters are rewound: the fused update
//! applies to the cycle's starting point, not to the post-replay state.
//!
//! The outer loop runs only after full-Q inner loops, so the per-task step
//! budget is exactly N' + floor(N'/Q) * outer_steps once the buffer is
//! non-empty, where N' = epochs * ceil(n_train / batch) matches what plain
//! SGD would take.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fuse_detailed, FusionPolicy};
use crate::importance::{ImportanceMetric, ImportanceState};
use crate::memory::ReplayBuffer;
use crate::model::{sgd_step, Classifier, FlatParams, ModelConfig, TaskVector};
use crate::numkit::{RealVec, Rng};
use crate::report::{
    backward_transfer, overall_performance, AccuracyMatrix, ConfigEcho, CycleLog,
    ImportanceSnapshot, RunReport,
};
use crate::tasks::{BatchIter, LabeledBatch, TaskSequence};

/// Which trainer drives the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Recurrent inner/outer loop with importance-masked fusion.
    Kif,
    /// Plain sequential SGD: no replay, no fusion.
    Seq,
    /// Interleaved SGD on task and memory batches: no fusion.
    Replay,
    /// Kif, but historical importance is frozen at each previous task's
    /// end instead of re-estimated at the current parameters.
    StaticImportance,
    /// Pooled-data joint training; reference upper bound, not sequential.
    Mtl,
}

/// Hyperparameters of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Inner-loop steps Q per cycle.
    pub inner_steps: usize,
    pub outer_steps_per_cycle: usize,
    pub lr_inner: f64,
    pub lr_outer: f64,
    pub batch_inner: usize,
    pub batch_outer: usize,
    /// Inner-loop importance smoothing; weights the previous value.
    pub alpha1: f64,
    /// Outer-loop importance smoothing; weights the new observation.
    pub alpha2: f64,
    pub epochs: usize,
    /// Fraction of each task's training set stored for replay.
    pub capacity_fraction: f64,
    pub method: Method,
    pub policy: FusionPolicy,
    pub importance_metric: ImportanceMetric,
    /// Carry the inner importance EMA across cycles instead of resetting.
    pub inner_ema_carryover: bool,
    /// Sample replay batches with an equal per-task share.
    pub stratified_replay: bool,
    /// Record one cycle log entry every this many cycles.
    pub log_every: u64,
    /// Global cycle indices at which to snapshot importance distributions.
    pub snapshot_cycles: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            inner_steps: 8,
            outer_steps_per_cycle: 1,
            lr_inner: 3e-4,
            lr_outer: 3e-4,
            batch_inner: 8,
            batch_outer: 8,
            alpha1: 0.55,
            alpha2: 0.55,
            epochs: 10,
            capacity_fraction: 0.02,
            method: Method::Kif,
            policy: FusionPolicy::default(),
            importance_metric: ImportanceMetric::GradWeight,
            inner_ema_carryover: false,
            stratified_replay: false,
            log_every: 10,
            snapshot_cycles: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 || self.outer_steps_per_cycle == 0 {
            return Err(Error::InvalidParameter {
                name: "steps",
                message: format!(
                    "inner_steps={} outer_steps_per_cycle={}",
                    self.inner_steps, self.outer_steps_per_cycle
                ),
            });
        }
        let lr_ok = |lr: f64| lr.is_finite() && lr > 0.0;
        if !lr_ok(self.lr_inner) || !lr_ok(self.lr_outer) {
            return Err(Error::InvalidParameter {
                name: "learning rates",
                message: format!("lr_inner={} lr_outer={}", self.lr_inner, self.lr_outer),
            });
        }
        if self.batch_inner == 0 || self.batch_outer == 0 || self.epochs == 0 {
            return Err(Error::InvalidParameter {
                name: "batching",
                message: format!(
                    "batch_inner={} batch_outer={} epochs={}",
                    self.batch_inner, self.batch_outer, self.epochs
                ),
            });
        }
        for (name, alpha) in [("alpha1", self.alpha1), ("alpha2", self.alpha2)] {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::InvalidParameter {
                    name,
                    message: format!("{alpha} not in [0, 1]"),
                });
            }
        }
        if !(self.capacity_fraction > 0.0 && self.capacity_fraction <= 1.0) {
            return Err(Error::InvalidParameter {
                name: "capacity_fraction",
                message: format!("{} not in (0, 1]", self.capacity_fraction),
            });
        }
        if self.log_every == 0 {
            return Err(Error::InvalidParameter {
                name: "log_every",
                message: "log_every must be positive".into(),
            });
        }
        self.policy.validate()
    }

    /// Comparison-row label: the method, with the fusion variant where the
    /// method fuses.
    pub fn method_label(&self) -> String {
        match self.method {
            Method::Kif => format!("kif({})", self.policy.variant_label()),
            Method::Seq => "seq".into(),
            Method::Replay => "replay".into(),
            Method::StaticImportance => "static_importance".into(),
            Method::Mtl => "mtl".into(),
        }
    }

    fn uses_buffer(&self) -> bool {
        matches!(
            self.method,
            Method::Kif | Method::Replay | Method::StaticImportance
        )
    }
}

/// Mutable state threaded through a run.
#[derive(Debug, Clone)]
pub struct RunState {
    pub params: FlatParams,
    pub importance: ImportanceState,
    pub buffer: ReplayBuffer,
    pub current_task: usize,
    /// Completed cycle count b across the whole run.
    pub cycle: u64,
    /// Total gradient steps taken.
    pub update_counter: u64,
    dropout_rng: Option<Rng>,
}

impl RunState {
    pub fn new(
        model: &Classifier,
        params: FlatParams,
        cfg: &TrainConfig,
        root: &Rng,
    ) -> Result<Self> {
        Ok(RunState {
            params,
            importance: ImportanceState::new(model.num_trainable(), cfg.alpha1, cfg.alpha2)?
                .with_metric(cfg.importance_metric)
                .with_inner_carryover(cfg.inner_ema_carryover),
            buffer: ReplayBuffer::new(cfg.capacity_fraction, root.split("buffer"))?
                .with_stratified(cfg.stratified_replay),
            current_task: 0,
            cycle: 0,
            update_counter: 0,
            dropout_rng: (model.config().dropout > 0.0).then(|| root.split("dropout")),
        })
    }

    fn grad_at(
        &mut self,
        model: &Classifier,
        batch: &LabeledBatch,
    ) -> Result<(f64, FlatParams)> {
        let step = self.update_counter;
        model
            .loss_and_grad_dropout(&self.params, batch, self.dropout_rng.as_mut())
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss {
                    task: self.current_task,
                    cycle: self.cycle,
                    step,
                },
                other => other,
            })
    }

    /// One plain SGD step on the given batch.
    fn task_step(&mut self, model: &Classifier, batch: &LabeledBatch, lr: f64) -> Result<f64> {
        let (loss, grad) = self.grad_at(model, batch)?;
        self.params = sgd_step(&self.params, &grad, lr)?;
        self.update_counter += 1;
        Ok(loss)
    }
}

/// What an inner loop hands to the outer learner.
#[derive(Debug, Clone)]
pub struct InnerOutcome {
    pub tau_in: TaskVector,
    pub i_in: RealVec,
    pub mean_loss: f64,
}

/// What an outer loop hands to fusion.
#[derive(Debug, Clone)]
pub struct OuterOutcome {
    pub tau_out: TaskVector,
    pub skipped: bool,
    pub loss: Option<f64>,
}

/// Fast adaptation: `steps` gradient steps on the current task from the
/// cycle's starting parameters, tracking the smoothed inner importance.
/// Leaves `state.params` at the post-inner-loop point for the outer loop.
pub fn run_inner_loop(
    model: &Classifier,
    cfg: &TrainConfig,
    state: &mut RunState,
    batches: &mut BatchIter<'_>,
    steps: usize,
) -> Result<InnerOutcome> {
    let start = state.params.clone();
    state.importance.begin_inner_loop();
    let mut loss_sum = 0.0;
    for _ in 0..steps {
        let batch = batches.next().expect("batch iterator is infinite");
        let (loss, grad) = state.grad_at(model, &batch)?;
        // Importance observes the pre-step parameters the gradient was
        // computed at.
        state.importance.update_inner(&state.params, &grad)?;
        state.params = sgd_step(&state.params, &grad, cfg.lr_inner)?;
        state.update_counter += 1;
        loss_sum += loss;
    }
    Ok(InnerOutcome {
        tau_in: state.params.diff(&start)?,
        i_in: state.importance.inner().clone(),
        mean_loss: loss_sum / steps.max(1) as f64,
    })
}

/// Historical retrieval: replay steps from the post-inner-loop parameters.
/// Skips (zero task vector, importance untouched) while the buffer is
/// empty. Under the static-importance method the replay step still runs
/// but the historical distribution is not re-estimated.
pub fn run_outer_loop(
    model: &Classifier,
    cfg: &TrainConfig,
    state: &mut RunState,
) -> Result<OuterOutcome> {
    if state.buffer.is_empty() {
        return Ok(OuterOutcome {
            tau_out: TaskVector::zeros(state.params.layout().clone()),
            skipped: true,
            loss: None,
        });
    }
    let theta_q = state.params.clone();
    let mut last_loss = 0.0;
    for _ in 0..cfg.outer_steps_per_cycle {
        let batch = state.buffer.sample_replay(cfg.batch_outer)?;
        let (loss, grad) = state.grad_at(model, &batch)?;
        if cfg.method != Method::StaticImportance {
            state.importance.update_outer(&state.params, &grad)?;
        }
        state.params = sgd_step(&state.params, &grad, cfg.lr_outer)?;
        state.update_counter += 1;
        last_loss = loss;
    }
    Ok(OuterOutcome {
        tau_out: state.params.diff(&theta_q)?,
        skipped: false,
        loss: Some(last_loss),
    })
}

/// A cycle's log entry plus the masks fusion used (masked variants only).
#[derive(Debug, Clone)]
pub struct CycleOutcome {
    pub log: CycleLog,
    pub masks: Option<(crate::fusion::BinaryMask, crate::fusion::BinaryMask)>,
}

/// One full iteration: inner loop, outer loop, fusion. The fused update is
/// applied to the pre-cycle parameters, discarding the unmasked portion of
/// the raw trajectory. Short cycles (fewer than Q steps remaining in the
/// task budget) skip the outer loop so the step accounting stays exact.
pub fn run_cycle(
    model: &Classifier,
    cfg: &TrainConfig,
    state: &mut RunState,
    batches: &mut BatchIter<'_>,
    steps_this_cycle: usize,
) -> Result<CycleOutcome> {
    let theta_b = state.params.clone();
    let inner = run_inner_loop(model, cfg, state, batches, steps_this_cycle)?;
    let outer = if steps_this_cycle == cfg.inner_steps {
        run_outer_loop(model, cfg, state)?
    } else {
        OuterOutcome {
            tau_out: TaskVector::zeros(state.params.layout().clone()),
            skipped: true,
            loss: None,
        }
    };
    let i_out = state.importance.outer().clone();
    let outcome = fuse_detailed(
        &theta_b,
        &inner.tau_in,
        &outer.tau_out,
        &inner.i_in,
        &i_out,
        &cfg.policy,
    )?;
    state.params = outcome.params;
    let log = CycleLog {
        cycle: state.cycle,
        task: state.current_task,
        inner_loss: inner.mean_loss,
        outer_loss: outer.loss,
        outer_skipped: outer.skipped,
        overlap: outcome
            .masks
            .as_ref()
            .map(|(a, b)| crate::fusion::overlap_stats(a, b))
            .transpose()?,
        popcount_in: outcome.masks.as_ref().map(|(a, _)| a.popcount()),
        popcount_out: outcome.masks.as_ref().map(|(_, b)| b.popcount()),
    };
    state.cycle += 1;
    Ok(CycleOutcome {
        log,
        masks: outcome.masks,
    })
}

/// Argmax-of-logits accuracy; ties resolve to the lowest class index.
pub fn evaluate(model: &Classifier, params: &FlatParams, test: &LabeledBatch) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyInput("evaluate test set"));
    }
    let logits = model.forward(params, &test.inputs)?;
    let mut correct = 0usize;
    for r in 0..test.len() {
        let row = logits.row(r);
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = c;
            }
        }
        if best == test.labels[r] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

fn maybe_snapshot(
    cfg: &TrainConfig,
    state: &RunState,
    cycle: u64,
    task: usize,
    snapshots: &mut Vec<ImportanceSnapshot>,
) {
    if cfg.snapshot_cycles.contains(&cycle) {
        let (inner, outer) = state.importance.snapshot();
        snapshots.push(ImportanceSnapshot {
            cycle,
            task,
            inner: inner.to_vec(),
            outer: outer.to_vec(),
        });
    }
}

/// Optional output hooks for a run: a per-fusion-step mask CSV and an
/// end-of-run dump of the replay buffer contents.
#[derive(Default)]
pub struct RunSinks<'a> {
    pub mask_csv: Option<&'a mut dyn std::io::Write>,
    pub buffer_csv: Option<&'a mut dyn std::io::Write>,
    /// When set, parameters are checkpointed as `task{k}.ckpt` in this
    /// directory after each task boundary (model-module format).
    pub checkpoint_dir: Option<&'a std::path::Path>,
}

/// Train over the whole sequence with the configured method, evaluating
/// every seen task after each task finishes and admitting the finished
/// task to the replay buffer. Fully reproducible from (configs, seed).
pub fn train_sequence(
    seq: &TaskSequence,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<RunReport> {
    train_sequence_with_sinks(seq, model_cfg, cfg, seed, RunSinks::default())
}

/// [`train_sequence`] with output hooks attached.
pub fn train_sequence_with_sinks(
    seq: &TaskSequence,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
    mut sinks: RunSinks<'_>,
) -> Result<RunReport> {
    cfg.validate()?;
    model_cfg.validate()?;
    let root = Rng::new(seed);
    let (model, params) = Classifier::init(model_cfg, &root.split("model"))?;
    let mut state = RunState::new(&model, params, cfg, &root)?;
    let k = seq.num_tasks();
    let mut matrix = AccuracyMatrix::new(k)?;
    let mut cycle_logs = Vec::new();
    let mut snapshots = Vec::new();

    if let Some(w) = sinks.mask_csv.as_deref_mut() {
        writeln!(w, "cycle,index,m_in,m_out").map_err(|e| Error::io("<mask csv>", e))?;
    }

    if cfg.method == Method::Mtl {
        return train_mtl(seq, model_cfg, cfg, seed, &model, state);
    }

    for pos in 0..k {
        state.current_task = pos;
        let task = &seq.tasks[pos];
        let mut batches = BatchIter::new(
            &task.train,
            cfg.batch_inner,
            root.split("batches").split_index(pos as u64),
        )?;
        let total_steps = cfg.epochs * batches.batches_per_epoch();

        match cfg.method {
            Method::Kif | Method::StaticImportance => {
                let mut remaining = total_steps;
                while remaining > 0 {
                    let steps = remaining.min(cfg.inner_steps);
                    let outcome = run_cycle(&model, cfg, &mut state, &mut batches, steps)?;
                    remaining -= steps;
                    let cycle = outcome.log.cycle;
                    if let (Some(w), Some((m_in, m_out))) =
                        (sinks.mask_csv.as_deref_mut(), outcome.masks.as_ref())
                    {
                        for (i, (a, b)) in
                            m_in.bits().iter().zip(m_out.bits()).enumerate()
                        {
                            writeln!(w, "{cycle},{i},{a},{b}")
                                .map_err(|e| Error::io("<mask csv>", e))?;
                        }
                    }
                    if cycle % cfg.log_every == 0 {
                        cycle_logs.push(outcome.log);
                    }
                    maybe_snapshot(cfg, &state, cycle, pos, &mut snapshots);
                }
            }
            Method::Seq => {
                for _ in 0..total_steps {
                    let batch = batches.next().expect("batch iterator is infinite");
                    state.task_step(&model, &batch, cfg.lr_inner)?;
                }
            }
            Method::Replay => {
                // Alternating task/memory batches inside the same N' step
                // budget vanilla training gets: after each full Q-group of
                // task steps one replay batch takes the next budget slot,
                // the usual experience-replay mixture. No fusion, no
                // rewind; the outer-loop multiplicity is a property of the
                // cycle methods, not of this baseline.
                let mut remaining = total_steps;
                while remaining > 0 {
                    let steps = remaining.min(cfg.inner_steps);
                    for _ in 0..steps {
                        let batch = batches.next().expect("batch iterator is infinite");
                        state.task_step(&model, &batch, cfg.lr_inner)?;
                    }
                    remaining -= steps;
                    if steps == cfg.inner_steps && !state.buffer.is_empty() && remaining > 0 {
                        let batch = state.buffer.sample_replay(cfg.batch_outer)?;
                        state.task_step(&model, &batch, cfg.lr_outer)?;
                        remaining -= 1;
                    }
                    state.cycle += 1;
                }
            }
            Method::Mtl => unreachable!("handled above"),
        }

        for i in 0..=pos {
            matrix.set(i, pos, evaluate(&model, &state.params, &seq.tasks[i].test)?)?;
        }
        if cfg.uses_buffer() {
            state.buffer.admit_task(task)?;
        }
        if cfg.method == Method::StaticImportance && !state.buffer.is_empty() {
            // Historical importance for the next task is computed once,
            // at this task's final parameters, and then held fixed.
            let batch = state.buffer.sample_replay(cfg.batch_outer)?;
            let (_, grad) = state.grad_at(&model, &batch)?;
            state.importance.update_outer(&state.params, &grad)?;
        }
        if let Some(dir) = sinks.checkpoint_dir {
            crate::model::save_checkpoint(&state.params, &dir.join(format!("task{pos}.ckpt")))?;
        }
    }

    if let Some(w) = sinks.buffer_csv.as_deref_mut() {
        state.buffer.dump_csv(w)?;
    }

    let op = overall_performance(&matrix)?;
    let (bwt, bwt_defined) = if k >= 2 {
        (backward_transfer(&matrix)?, true)
    } else {
        (0.0, false)
    };
    Ok(RunReport {
        config: ConfigEcho {
            stream: seq.descriptor.clone(),
            model: model_cfg.clone(),
            train: cfg.clone(),
        },
        seed,
        matrix,
        op,
        bwt,
        bwt_defined,
        update_counter: state.update_counter,
        cycles: cycle_logs,
        snapshots,
    })
}

/// Joint training on the pooled data of every task. The accuracy matrix
/// gets the final column plus a mirrored diagonal so OP is defined; BWT is
/// not a measured quantity here and is reported as 0 with the flag unset.
fn train_mtl(
    seq: &TaskSequence,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
    model: &Classifier,
    mut state: RunState,
) -> Result<RunReport> {
    let root = Rng::new(seed);
    let train_refs: Vec<&LabeledBatch> = seq.tasks.iter().map(|t| &t.train).collect();
    let pooled = LabeledBatch::concat(&train_refs)?;
    let mut batches = BatchIter::new(&pooled, cfg.batch_inner, root.split("batches"))?;
    let total_steps = cfg.epochs * batches.batches_per_epoch();
    for _ in 0..total_steps {
        let batch = batches.next().expect("batch iterator is infinite");
        state.task_step(model, &batch, cfg.lr_inner)?;
    }
    let k = seq.num_tasks();
    let mut matrix = AccuracyMatrix::new(k)?;
    let last = k - 1;
    for i in 0..k {
        let acc = evaluate(model, &state.params, &seq.tasks[i].test)?;
        matrix.set(i, last, acc)?;
        matrix.set(i, i, acc)?;
    }
    let op = overall_performance(&matrix)?;
    Ok(RunReport {
        config: ConfigEcho {
            stream: seq.descriptor.clone(),
            model: model_cfg.clone(),
            train: cfg.clone(),
        },
        seed,
        matrix,
        op,
        bwt: 0.0,
        bwt_defined: false,
        update_counter: state.update_counter,
        cycles: Vec::new(),
        snapshots: Vec::new(),
    })
}
