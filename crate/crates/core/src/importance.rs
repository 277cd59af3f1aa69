//! Knowledge identification: per-parameter importance for the current task
//! (inner loop) and a dynamically updated distribution for historical tasks
//! (outer loop).
//!
//! The raw metric is the magnitude of the gradient-weight product. Both
//! smoothed distributions follow exponential recurrences, written exactly
//! as their respective update rules place the smoothing factor: the inner
//! recurrence weights the previous value by alpha1, the outer recurrence
//! weights the new observation by alpha2.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdapterTensor, FlatParams, ParamLayout};
use crate::numkit::{ema_update, RealVec};

/// Raw importance metric choice; the gradient-only form exists for the
/// metric ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceMetric {
    #[default]
    GradWeight,
    GradOnly,
}

/// |w * grad| per coordinate.
pub fn raw_importance(params: &FlatParams, grad: &FlatParams) -> Result<RealVec> {
    if !params.same_layout(grad) {
        return Err(Error::LayoutMismatch {
            context: "raw_importance",
        });
    }
    RealVec::from_vec(
        params
            .data()
            .iter()
            .zip(grad.data().iter())
            .map(|(w, g)| (w * g).abs())
            .collect(),
    )
}

/// |grad| per coordinate (ablation metric; ignores weight magnitude).
pub fn raw_importance_gradonly(grad: &FlatParams) -> Result<RealVec> {
    RealVec::from_vec(grad.data().iter().map(|g| g.abs()).collect())
}

fn metric_value(
    metric: ImportanceMetric,
    params: &FlatParams,
    grad: &FlatParams,
) -> Result<RealVec> {
    match metric {
        ImportanceMetric::GradWeight => raw_importance(params, grad),
        ImportanceMetric::GradOnly => raw_importance_gradonly(grad),
    }
}

/// Smoothed inner (current-task) and outer (historical) importance.
#[derive(Debug, Clone)]
pub struct ImportanceState {
    inner: RealVec,
    outer: RealVec,
    alpha1: f64,
    alpha2: f64,
    metric: ImportanceMetric,
    inner_step_count: u64,
    outer_step_count: u64,
    /// Set at the start of each inner loop: the first update passes the raw
    /// observation through instead of mixing with a stale or zero value.
    inner_fresh: bool,
    /// Config option: carry the inner EMA across cycles instead of
    /// resetting per inner loop.
    inner_ema_carryover: bool,
}

impl ImportanceState {
    pub fn new(n: usize, alpha1: f64, alpha2: f64) -> Result<Self> {
        for (name, alpha) in [("alpha1", alpha1), ("alpha2", alpha2)] {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::InvalidParameter {
                    name,
                    message: format!("{alpha} not in [0, 1]"),
                });
            }
        }
        Ok(ImportanceState {
            inner: RealVec::zeros(n)?,
            outer: RealVec::zeros(n)?,
            alpha1,
            alpha2,
            metric: ImportanceMetric::GradWeight,
            inner_step_count: 0,
            outer_step_count: 0,
            inner_fresh: true,
            inner_ema_carryover: false,
        })
    }

    pub fn with_metric(mut self, metric: ImportanceMetric) -> Self {
        self.metric = metric;
        self
    }

    pub fn with_inner_carryover(mut self, carryover: bool) -> Self {
        self.inner_ema_carryover = carryover;
        self
    }

    pub fn alpha1(&self) -> f64 {
        self.alpha1
    }

    pub fn alpha2(&self) -> f64 {
        self.alpha2
    }

    pub fn inner(&self) -> &RealVec {
        &self.inner
    }

    pub fn outer(&self) -> &RealVec {
        &self.outer
    }

    pub fn inner_step_count(&self) -> u64 {
        self.inner_step_count
    }

    pub fn outer_step_count(&self) -> u64 {
        self.outer_step_count
    }

    /// Mark the start of a new inner loop. Unless carryover is configured,
    /// the next inner update re-seeds the EMA from its raw observation.
    pub fn begin_inner_loop(&mut self) {
        if !self.inner_ema_carryover {
            self.inner_fresh = true;
        }
    }

    /// Inner recurrence, one call per inner step:
    /// inner <- alpha1 * inner + (1 - alpha1) * raw(params, grad).
    pub fn update_inner(&mut self, params: &FlatParams, grad: &FlatParams) -> Result<()> {
        let raw = metric_value(self.metric, params, grad)?;
        if raw.len() != self.inner.len() {
            return Err(Error::LengthMismatch {
                context: "update_inner",
                left: raw.len(),
                right: self.inner.len(),
            });
        }
        self.inner = if self.inner_fresh {
            self.inner_fresh = false;
            raw
        } else {
            ema_update(&self.inner, &raw, self.alpha1)?
        };
        self.inner_step_count += 1;
        Ok(())
    }

    /// Outer recurrence, one call per outer step: the raw metric is
    /// re-evaluated at the post-inner-loop parameters, then
    /// outer <- alpha2 * raw + (1 - alpha2) * outer.
    pub fn update_outer(
        &mut self,
        params_after_inner: &FlatParams,
        replay_grad: &FlatParams,
    ) -> Result<()> {
        let raw = metric_value(self.metric, params_after_inner, replay_grad)?;
        if raw.len() != self.outer.len() {
            return Err(Error::LengthMismatch {
                context: "update_outer",
                left: raw.len(),
                right: self.outer.len(),
            });
        }
        // alpha2 weights the new observation here.
        self.outer = ema_update(&raw, &self.outer, self.alpha2)?;
        self.outer_step_count += 1;
        Ok(())
    }

    /// Copies of both distributions.
    pub fn snapshot(&self) -> (RealVec, RealVec) {
        (self.inner.clone(), self.outer.clone())
    }
}

/// Dump both importance distributions as CSV rows of
/// `layer,tensor,row,col,inner,outer` for heatmap tooling.
pub fn write_snapshot_csv<W: Write>(
    layout: &ParamLayout,
    inner: &RealVec,
    outer: &RealVec,
    mut w: W,
) -> Result<()> {
    if inner.len() != layout.total_len() || outer.len() != layout.total_len() {
        return Err(Error::LengthMismatch {
            context: "write_snapshot_csv",
            left: inner.len(),
            right: layout.total_len(),
        });
    }
    let io = |e| Error::io("<writer>", e);
    writeln!(w, "layer,tensor,row,col,inner,outer").map_err(io)?;
    for slot in layout.slots() {
        let tag = match slot.tensor {
            AdapterTensor::A => "A",
            AdapterTensor::B => "B",
        };
        for r in 0..slot.rows {
            for c in 0..slot.cols {
                let idx = slot.offset + r * slot.cols + c;
                writeln!(
                    w,
                    "{},{tag},{r},{c},{},{}",
                    slot.layer,
                    inner.as_slice()[idx],
                    outer.as_slice()[idx]
                )
                .map_err(io)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Classifier, ModelConfig};
    use crate::numkit::{RealMat, Rng};
    use crate::tasks::LabeledBatch;

    fn tiny_model() -> (Classifier, FlatParams) {
        let cfg = ModelConfig {
            input_dim: 4,
            hidden_dims: vec![5],
            num_classes: 3,
            rank: 2,
            lora_alpha: 8.0,
            ..ModelConfig::default()
        };
        Classifier::init(&cfg, &Rng::new(3)).unwrap()
    }

    fn params_with(values: f64, layout: &std::sync::Arc<ParamLayout>) -> FlatParams {
        FlatParams::new(
            RealVec::constant(layout.total_len(), values).unwrap(),
            layout.clone(),
        )
        .unwrap()
    }

    fn params_from(values: Vec<f64>, layout: &std::sync::Arc<ParamLayout>) -> FlatParams {
        FlatParams::new(RealVec::from_vec(values).unwrap(), layout.clone()).unwrap()
    }

    #[test]
    fn raw_metric_is_abs_weight_grad_product() {
        let (_, init) = tiny_model();
        let layout = init.layout();
        let w = params_with(2.0, layout);
        let g = params_with(-3.0, layout);
        let imp = raw_importance(&w, &g).unwrap();
        assert!(imp.iter().all(|&v| (v - 6.0).abs() < 1e-15));

        // Sign flips leave it unchanged.
        let wneg = params_with(-2.0, layout);
        let gpos = params_with(3.0, layout);
        assert_eq!(
            raw_importance(&wneg, &gpos).unwrap().as_slice(),
            imp.as_slice()
        );

        // Zero gradient gives zero importance.
        let zero = params_with(0.0, layout);
        assert!(raw_importance(&w, &zero).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradonly_metric_ignores_weights() {
        let (_, init) = tiny_model();
        let layout = init.layout();
        let g = params_with(-3.0, layout);
        let imp = raw_importance_gradonly(&g).unwrap();
        assert!(imp.iter().all(|&v| (v - 3.0).abs() < 1e-15));

        // Rankings differ from grad-weight whenever |w| varies: w=(10, 0.1)
        // with g=(1, 2) ranks coordinate 0 first under grad-weight but
        // coordinate 1 first under grad-only.
        let mut w = vec![1.0; layout.total_len()];
        let mut gv = vec![1.0; layout.total_len()];
        w[0] = 10.0;
        w[1] = 0.1;
        gv[0] = 1.0;
        gv[1] = 2.0;
        let wp = params_from(w, layout);
        let gp = params_from(gv, layout);
        let by_product = raw_importance(&wp, &gp).unwrap();
        let by_grad = raw_importance_gradonly(&gp).unwrap();
        assert!(by_product[0] > by_product[1]);
        assert!(by_grad[0] < by_grad[1]);
    }

    #[test]
    fn inner_update_matches_paper_alpha_arithmetic() {
        let (_, init) = tiny_model();
        let layout = init.layout();
        let mut state = ImportanceState::new(layout.total_len(), 0.55, 0.55).unwrap();
        // Seed the EMA with raw importance 1.0 (pass-through first update).
        state
            .update_inner(&params_with(1.0, layout), &params_with(1.0, layout))
            .unwrap();
        assert!(state.inner().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        // Next observation 0: 0.55 * 1.0 + 0.45 * 0.0 = 0.55.
        state
            .update_inner(&params_with(1.0, layout), &params_with(0.0, layout))
            .unwrap();
        assert!(state.inner().iter().all(|&v| (v - 0.55).abs() < 1e-15));
    }

    #[test]
    fn constant_raw_converges_geometrically() {
        let (_, init) = tiny_model();
        let layout = init.layout();
        let mut state = ImportanceState::new(layout.total_len(), 0.55, 0.55).unwrap();
        let w = params_with(2.0, layout);
        let g = params_with(1.5, layout); // raw = 3.0
        for _ in 0..64 {
            state.update_inner(&w, &g).unwrap();
        }
        assert!(state.inner().iter().all(|&v| (v - 3.0).abs() < 1e-9));
    }

    /// Unrolled closed form of the inner recurrence with pass-through
    /// initialization: I_Q = a^(Q-1) r_1 + sum_{q=2..Q} (1-a) a^(Q-q) r_q.
    fn inner_closed_form(raws: &[f64], alpha: f64) -> f64 {
        let q = raws.len();
        let mut acc = alpha.powi(q as i32 - 1) * raws[0];
        for (j, &r) in raws.iter().enumerate().skip(1) {
            acc += (1.0 - alpha) * alpha.powi((q - 1 - j) as i32) * r;
        }
        acc
    }

    /// Unrolled closed form of the outer recurrence from zero:
    /// I_B = sum_{b=1..B} a (1-a)^(B-b) r_b.
    fn outer_closed_form(raws: &[f64], alpha: f64) -> f64 {
        let mut acc = 0.0;
        for (j, &r) in raws.iter().enumerate() {
            acc += alpha * (1.0 - alpha).powi((raws.len() - 1 - j) as i32) * r;
        }
        acc
    }

    #[test]
    fn inner_recurrence_matches_unrolled_oracle() {
        let (_, init) = tiny_model();
        let layout = init.layout();
        let n = layout.total_len();
        let mut rng = Rng::new(40);
        let mut state = ImportanceState::new(n, 0.55, 0.55).unwrap();
        state.begin_inner_loop();
        let mut raws = Vec::new();
        for _ in 0..8 {
            let w = params_from((0..n).map(|_| rng.next_normal()).collect(), layout);
            let g = params_from((0..n).map(|_| rng.next_normal()).collect(), layout);
            raws.push((w.data()[0] * g.data()[0]).abs());
            state.update_inner(&w, &g).unwrap();
        }
        let expect = inner_closed_form(&raws, 0.55);
        assert!((state.inner()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn outer_recurrence_matches_unrolled_oracle() {
        let (_, init) = tiny_model();
        let layout = init.layout();
        let n = layout.total_len();
        let mut rng = Rng::new(41);
        let mut state = ImportanceState::new(n, 0.55, 0.55).unwrap();
        let mut raws = Vec::new();
        for _ in 0..32 {
            let w = params_from((0..n).map(|_| rng.next_normal()).collect(), layout);
            let g = params_from((0..n).map(|_| rng.next_normal()).collect(), layout);
            raws.push((w.data()[0] * g.data()[0]).abs());
            state.update_outer(&w, &g).unwrap();
        }
        let expect = outer_closed_form(&raws, 0.55);
        assert!((state.outer()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn outer_update_weights_new_observation() {
        let (_, init) = tiny_model();
        let layout = init.layout();
        let mut state = ImportanceState::new(layout.total_len(), 0.55, 0.55).unwrap();
        // prev outer 0, raw 1 -> 0.55 * 1 + 0.45 * 0 = 0.55.
        state
            .update_outer(&params_with(1.0, layout), &params_with(1.0, layout))
            .unwrap();
        assert!(state.outer().iter().all(|&v| (v - 0.55).abs() < 1e-15));
        // Identical raw repeated converges to the raw value.
        for _ in 0..64 {
            state
                .update_outer(&params_with(1.0, layout), &params_with(1.0, layout))
                .unwrap();
        }
        assert!(state.outer().iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn updates_preserve_non_negativity() {
        let (_, init) = tiny_model();
        let layout = init.layout();
        let n = layout.total_len();
        let mut rng = Rng::new(42);
        let mut state = ImportanceState::new(n, 0.55, 0.55).unwrap();
        for cycle in 0..10 {
            state.begin_inner_loop();
            for _ in 0..4 {
                let w = params_from((0..n).map(|_| rng.next_normal()).collect(), layout);
                let g = params_from((0..n).map(|_| rng.next_normal()).collect(), layout);
                state.update_inner(&w, &g).unwrap();
            }
            if cycle % 2 == 0 {
                let w = params_from((0..n).map(|_| rng.next_normal()).collect(), layout);
                let g = params_from((0..n).map(|_| rng.next_normal()).collect(), layout);
                state.update_outer(&w, &g).unwrap();
            }
            assert!(state.inner().iter().all(|&v| v >= 0.0));
            assert!(state.outer().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn raw_outer_estimate_depends_on_parameter_point() {
        // Same replay batch, two different parameter points: the raw
        // historical-importance observation must differ because the replay
        // gradient differs. This is what dynamic estimation provides.
        let (model, params) = tiny_model();
        let mut rng = Rng::new(50);
        let inputs = RealMat::from_vec(
            6,
            4,
            (0..24).map(|_| rng.next_normal()).collect(),
        )
        .unwrap();
        let batch = LabeledBatch::new(inputs, vec![0, 1, 2, 0, 1, 2]).unwrap();

        let moved = params_from(
            params.data().iter().map(|v| v + 0.05).collect(),
            params.layout(),
        );
        let (_, g1) = model.loss_and_grad(&params, &batch).unwrap();
        let (_, g2) = model.loss_and_grad(&moved, &batch).unwrap();
        let raw1 = raw_importance(&params, &g1).unwrap();
        let raw2 = raw_importance(&moved, &g2).unwrap();
        let diff = raw1
            .iter()
            .zip(raw2.iter())
            .filter(|(a, b)| (**a - **b).abs() > 1e-12)
            .count();
        assert!(diff > 0, "raw importance ignored the parameter point");
    }

    #[test]
    fn snapshots_are_copies() {
        let (_, init) = tiny_model();
        let layout = init.layout();
        let mut state = ImportanceState::new(layout.total_len(), 0.55, 0.55).unwrap();
        let (inner0, outer0) = state.snapshot();
        assert!(inner0.iter().all(|&v| v == 0.0));
        assert!(outer0.iter().all(|&v| v == 0.0));
        state
            .update_inner(&params_with(1.0, layout), &params_with(1.0, layout))
            .unwrap();
        assert!(inner0.iter().all(|&v| v == 0.0), "snapshot mutated");
    }

    #[test]
    fn snapshot_csv_matches_per_layer_reduction() {
        let (model, init) = tiny_model();
        let layout = init.layout();
        let n = layout.total_len();
        let mut rng = Rng::new(51);
        let inner =
            RealVec::from_vec((0..n).map(|_| rng.next_f64()).collect()).unwrap();
        let outer =
            RealVec::from_vec((0..n).map(|_| rng.next_f64()).collect()).unwrap();
        let mut out = Vec::new();
        write_snapshot_csv(model.layout(), &inner, &outer, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), n + 1);

        // Sum of the inner column per layer equals a manual reduction over
        // that layer's slots.
        let mut csv_sums = std::collections::BTreeMap::new();
        for line in text.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            let layer: usize = fields[0].parse().unwrap();
            let v: f64 = fields[4].parse().unwrap();
            *csv_sums.entry(layer).or_insert(0.0) += v;
        }
        for (layer, csv_sum) in csv_sums {
            let manual: f64 = layout
                .slots()
                .iter()
                .filter(|s| s.layer == layer)
                .flat_map(|s| {
                    inner.as_slice()[s.offset..s.offset + s.rows * s.cols].iter()
                })
                .sum();
            assert!((csv_sum - manual).abs() < 1e-9);
        }
    }

    #[test]
    fn inner_carryover_option_skips_reset() {
        let (_, init) = tiny_model();
        let layout = init.layout();
        let w = params_with(1.0, layout);
        let zero = params_with(0.0, layout);
        let one = params_with(1.0, layout);

        // Default: reset means the first update after begin_inner_loop is
        // a pass-through of the new raw value.
        let mut reset = ImportanceState::new(layout.total_len(), 0.55, 0.55).unwrap();
        reset.update_inner(&w, &one).unwrap();
        reset.begin_inner_loop();
        reset.update_inner(&w, &zero).unwrap();
        assert!(reset.inner().iter().all(|&v| v == 0.0));

        let mut carry = ImportanceState::new(layout.total_len(), 0.55, 0.55)
            .unwrap()
            .with_inner_carryover(true);
        carry.update_inner(&w, &one).unwrap();
        carry.begin_inner_loop();
        carry.update_inner(&w, &zero).unwrap();
        assert!(carry.inner().iter().all(|&v| (v - 0.55).abs() < 1e-15));
    }
}
