//! Feed-forward classifier with a frozen base and trainable low-rank
//! adapters, with manual forward/backward passes.
//!
//! Each layer computes `y = x W_eff^T + bias` with
//! `W_eff = base_weight + scaling * (B . A)`; tanh sits between layers.
//! Only the A and B factors train, and they are the only tensors that
//! appear in [`FlatParams`]. The base is drawn once from a seeded Gaussian
//! and never changes, standing in for a pretrained backbone.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{RealMat, RealVec, Rng};
use crate::tasks::LabeledBatch;

/// Which adapter factor a layout slot refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdapterTensor {
    /// r x d_in factor, Gaussian-initialized.
    A,
    /// d_out x r factor, zero-initialized so adapters start inert.
    B,
}

/// Location of one trainable tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSlot {
    pub layer: usize,
    pub tensor: AdapterTensor,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

/// Ordered map from flat indices back to (layer, tensor, row, col).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    slots: Vec<LayoutSlot>,
    total_len: usize,
}

impl ParamLayout {
    pub fn new(slots: Vec<LayoutSlot>) -> Result<Self> {
        let mut expected = 0usize;
        for s in &slots {
            if s.offset != expected {
                return Err(Error::InvalidParameter {
                    name: "layout",
                    message: format!("slot offset {} != running total {expected}", s.offset),
                });
            }
            expected += s.rows * s.cols;
        }
        if expected == 0 {
            return Err(Error::EmptyInput("ParamLayout"));
        }
        Ok(ParamLayout {
            slots,
            total_len: expected,
        })
    }

    pub fn slots(&self) -> &[LayoutSlot] {
        &self.slots
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }
}

/// Trainable parameters as one flat vector plus the layout to unflatten.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams {
    data: RealVec,
    layout: Arc<ParamLayout>,
}

/// A parameter-space difference between two checkpoints, same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    data: RealVec,
    layout: Arc<ParamLayout>,
}

macro_rules! flat_like {
    ($name:ident) => {
        impl $name {
            pub fn new(data: RealVec, layout: Arc<ParamLayout>) -> Result<Self> {
                if data.len() != layout.total_len() {
                    return Err(Error::LengthMismatch {
                        context: concat!(stringify!($name), "::new"),
                        left: data.len(),
                        right: layout.total_len(),
                    });
                }
                Ok($name { data, layout })
            }

            pub fn data(&self) -> &RealVec {
                &self.data
            }

            pub fn layout(&self) -> &Arc<ParamLayout> {
                &self.layout
            }

            pub fn len(&self) -> usize {
                self.data.len()
            }

            pub fn is_empty(&self) -> bool {
                false
            }

            /// Flat slice for one layout slot.
            pub fn slot_slice(&self, slot: &LayoutSlot) -> &[f64] {
                &self.data.as_slice()[slot.offset..slot.offset + slot.rows * slot.cols]
            }

            pub fn same_layout(&self, other: &$name) -> bool {
                Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
            }
        }
    };
}

flat_like!(FlatParams);
flat_like!(TaskVector);

impl FlatParams {
    /// Difference self - older, as a task vector.
    pub fn diff(&self, older: &FlatParams) -> Result<TaskVector> {
        if !self.same_layout(older) {
            return Err(Error::LayoutMismatch { context: "diff" });
        }
        TaskVector::new(self.data.sub(&older.data)?, self.layout.clone())
    }

    /// View one slot as a matrix (copies the slice).
    pub fn slot_matrix(&self, slot: &LayoutSlot) -> RealMat {
        RealMat::from_vec(slot.rows, slot.cols, self.slot_slice(slot).to_vec())
            .expect("layout slice is finite and sized")
    }
}

impl TaskVector {
    pub fn zeros(layout: Arc<ParamLayout>) -> TaskVector {
        TaskVector {
            data: RealVec::zeros(layout.total_len()).expect("layout is non-empty"),
            layout,
        }
    }
}

/// One linear layer with frozen base and trainable low-rank factors.
#[derive(Debug, Clone)]
pub struct AdapterLinear {
    base_weight: RealMat, // d_out x d_in, frozen
    base_bias: RealVec,   // d_out, frozen
    rank: usize,
    scaling: f64, // lora_alpha / rank
    d_in: usize,
    d_out: usize,
}

impl AdapterLinear {
    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scaling(&self) -> f64 {
        self.scaling
    }

    pub fn base_weight(&self) -> &RealMat {
        &self.base_weight
    }

    pub fn base_bias(&self) -> &RealVec {
        &self.base_bias
    }
}

/// Model shape and initialization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub rank: usize,
    pub lora_alpha: f64,
    pub adapter_init_std: f64,
    /// Dropout probability on hidden activations during training.
    /// Off by default: exact gradient checks need determinism.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 32,
            hidden_dims: vec![64, 64],
            num_classes: 4,
            rank: 8,
            lora_alpha: 32.0,
            adapter_init_std: 0.02,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes < 2 || self.rank == 0 {
            return Err(Error::InvalidParameter {
                name: "model config",
                message: format!(
                    "input_dim={} num_classes={} rank={}",
                    self.input_dim, self.num_classes, self.rank
                ),
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidParameter {
                name: "dropout",
                message: format!("{} not in [0, 1)", self.dropout),
            });
        }
        Ok(())
    }

    pub fn scaling(&self) -> f64 {
        self.lora_alpha / self.rank as f64
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.num_classes));
        dims
    }
}

/// Classifier: frozen layers plus the layout of their trainable adapters.
#[derive(Debug, Clone)]
pub struct Classifier {
    layers: Vec<AdapterLinear>,
    layout: Arc<ParamLayout>,
    config: ModelConfig,
}

struct ForwardCache {
    /// Input to each layer (batch x d_in).
    inputs: Vec<RealMat>,
    /// x . A^T per layer (batch x r), reused by the backward pass.
    xa: Vec<RealMat>,
    /// Post-activation output per layer (batch x d_out); logits for the last.
    outputs: Vec<RealMat>,
    /// Dropout keep masks (inverted scaling applied), when active.
    dropout_masks: Vec<Option<RealMat>>,
}

impl Classifier {
    /// Build a model and its initial parameters. A factors are Gaussian
    /// (std `adapter_init_std`), B factors are zero, so the adapters start
    /// as an exact no-op on top of the frozen base.
    pub fn init(config: &ModelConfig, rng: &Rng) -> Result<(Classifier, FlatParams)> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut slots = Vec::new();
        let mut flat = Vec::new();
        let mut base_rng = rng.split("base");
        let mut adapter_rng = rng.split("adapters");
        for (layer, (d_in, d_out)) in config.layer_dims().into_iter().enumerate() {
            let base_std = 1.0 / (d_in as f64).sqrt();
            let base_weight = RealMat::from_vec(
                d_out,
                d_in,
                (0..d_out * d_in)
                    .map(|_| base_std * base_rng.next_normal())
                    .collect(),
            )?;
            let base_bias = RealVec::from_vec(
                (0..d_out).map(|_| 0.5 * base_rng.next_normal()).collect(),
            )?;
            layers.push(AdapterLinear {
                base_weight,
                base_bias,
                rank: config.rank,
                scaling: config.scaling(),
                d_in,
                d_out,
            });

            slots.push(LayoutSlot {
                layer,
                tensor: AdapterTensor::A,
                rows: config.rank,
                cols: d_in,
                offset: flat.len(),
            });
            flat.extend(
                (0..config.rank * d_in)
                    .map(|_| config.adapter_init_std * adapter_rng.next_normal()),
            );
            slots.push(LayoutSlot {
                layer,
                tensor: AdapterTensor::B,
                rows: d_out,
                cols: config.rank,
                offset: flat.len(),
            });
            flat.extend(std::iter::repeat_n(0.0, d_out * config.rank));
        }
        let layout = Arc::new(ParamLayout::new(slots)?);
        let params = FlatParams::new(RealVec::from_vec(flat)?, layout.clone())?;
        Ok((
            Classifier {
                layers,
                layout,
                config: config.clone(),
            },
            params,
        ))
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[AdapterLinear] {
        &self.layers
    }

    pub fn num_trainable(&self) -> usize {
        self.layout.total_len()
    }

    fn slot(&self, layer: usize, tensor: AdapterTensor) -> &LayoutSlot {
        self.layout
            .slots()
            .iter()
            .find(|s| s.layer == layer && s.tensor == tensor)
            .expect("layout covers every layer")
    }

    fn check_params(&self, params: &FlatParams) -> Result<()> {
        if !Arc::ptr_eq(params.layout(), &self.layout) && *params.layout().as_ref() != *self.layout
        {
            return Err(Error::LayoutMismatch { context: "params" });
        }
        Ok(())
    }

    fn forward_cached(
        &self,
        params: &FlatParams,
        inputs: &RealMat,
        mut dropout_rng: Option<&mut Rng>,
    ) -> Result<ForwardCache> {
        self.check_params(params)?;
        if inputs.cols() != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                context: "forward",
                lr: inputs.rows(),
                lc: inputs.cols(),
                rr: inputs.rows(),
                rc: self.config.input_dim,
            });
        }
        let mut cache = ForwardCache {
            inputs: Vec::new(),
            xa: Vec::new(),
            outputs: Vec::new(),
            dropout_masks: Vec::new(),
        };
        let mut x = inputs.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let a = params.slot_matrix(self.slot(l, AdapterTensor::A));
            let b = params.slot_matrix(self.slot(l, AdapterTensor::B));
            // z = x W^T + s (x A^T) B^T + bias
            let mut z = x.matmul_transpose(&layer.base_weight)?;
            let xa = x.matmul_transpose(&a)?;
            let lora = xa.matmul_transpose(&b)?;
            for r in 0..z.rows() {
                let zr = z.row_mut(r);
                let lr = lora.row(r);
                for (c, slot) in zr.iter_mut().enumerate() {
                    *slot += layer.scaling * lr[c] + layer.base_bias[c];
                }
            }
            cache.inputs.push(x);
            cache.xa.push(xa);
            let mut mask = None;
            if l != last {
                for v in 0..z.rows() {
                    for c in 0..z.cols() {
                        let t = z.get(v, c).tanh();
                        z.set(v, c, t);
                    }
                }
                if self.config.dropout > 0.0 {
                    if let Some(rng) = dropout_rng.as_deref_mut() {
                        let keep = 1.0 - self.config.dropout;
                        let mut m = RealMat::zeros(z.rows(), z.cols());
                        for r in 0..z.rows() {
                            for c in 0..z.cols() {
                                let bit = if rng.next_f64() < keep { 1.0 / keep } else { 0.0 };
                                m.set(r, c, bit);
                                z.set(r, c, z.get(r, c) * bit);
                            }
                        }
                        mask = Some(m);
                    }
                }
            }
            cache.dropout_masks.push(mask);
            for (index, &v) in z.data().iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        context: "forward activations",
                        index,
                        value: v,
                    });
                }
            }
            cache.outputs.push(z.clone());
            x = z;
        }
        Ok(cache)
    }

    /// Logits for a batch (batch x num_classes). Pure function of
    /// (model, params, inputs).
    pub fn forward(&self, params: &FlatParams, inputs: &RealMat) -> Result<RealMat> {
        let cache = self.forward_cached(params, inputs, None)?;
        Ok(cache.outputs.last().expect("at least one layer").clone())
    }

    /// Mean cross-entropy loss and its gradient with respect to the
    /// trainable parameters only; frozen-tensor gradients are never formed.
    pub fn loss_and_grad(
        &self,
        params: &FlatParams,
        batch: &LabeledBatch,
    ) -> Result<(f64, FlatParams)> {
        self.loss_and_grad_dropout(params, batch, None)
    }

    /// As [`loss_and_grad`](Self::loss_and_grad) but with an RNG substream
    /// for dropout when the model config enables it.
    pub fn loss_and_grad_dropout(
        &self,
        params: &FlatParams,
        batch: &LabeledBatch,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<(f64, FlatParams)> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("loss_and_grad batch"));
        }
        for &label in &batch.labels {
            if label >= self.config.num_classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    num_classes: self.config.num_classes,
                    line: None,
                });
            }
        }
        let cache = self.forward_cached(params, &batch.inputs, dropout_rng)?;
        let logits = cache.outputs.last().expect("layers non-empty");
        let batch_size = batch.len();

        // Softmax cross-entropy, averaged over the batch.
        let mut loss = 0.0;
        let mut dz = RealMat::zeros(batch_size, self.config.num_classes);
        for r in 0..batch_size {
            let row = logits.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &v in row {
                denom += (v - max).exp();
            }
            let log_denom = denom.ln() + max;
            loss += log_denom - row[batch.labels[r]];
            for (c, &logit) in row.iter().enumerate() {
                let p = (logit - log_denom).exp();
                let target = if c == batch.labels[r] { 1.0 } else { 0.0 };
                dz.set(r, c, (p - target) / batch_size as f64);
            }
        }
        loss /= batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "loss",
                index: 0,
                value: loss,
            });
        }

        let mut grad = vec![0.0; self.layout.total_len()];
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let a_slot = self.slot(l, AdapterTensor::A);
            let b_slot = self.slot(l, AdapterTensor::B);
            let a = params.slot_matrix(a_slot);
            let b = params.slot_matrix(b_slot);
            let x = &cache.inputs[l];
            let xa = &cache.xa[l];

            // gB = s * dZ^T . (x A^T); gA = s * (dZ B)^T . x
            let gb = dz.transpose_matmul(xa)?;
            let dzb = dz.matmul(&b)?; // batch x r
            let ga = dzb.transpose_matmul(x)?;
            let gb_slice = &mut grad[b_slot.offset..b_slot.offset + b_slot.rows * b_slot.cols];
            for (dst, src) in gb_slice.iter_mut().zip(gb.data()) {
                *dst = layer.scaling * src;
            }
            let ga_slice = &mut grad[a_slot.offset..a_slot.offset + a_slot.rows * a_slot.cols];
            for (dst, src) in ga_slice.iter_mut().zip(ga.data()) {
                *dst = layer.scaling * src;
            }

            if l > 0 {
                // dX = dZ W + s (dZ B) A, then back through dropout and tanh.
                let mut dx = dz.matmul(&layer.base_weight)?;
                let lora_dx = dzb.matmul(&a)?;
                for r in 0..dx.rows() {
                    let dr = dx.row_mut(r);
                    let sr = lora_dx.row(r);
                    for (d, &s) in dr.iter_mut().zip(sr.iter()) {
                        *d += layer.scaling * s;
                    }
                }
                let h = &cache.outputs[l - 1];
                if let Some(mask) = &cache.dropout_masks[l - 1] {
                    for r in 0..dx.rows() {
                        for c in 0..dx.cols() {
                            dx.set(r, c, dx.get(r, c) * mask.get(r, c));
                        }
                    }
                }
                for r in 0..dx.rows() {
                    for c in 0..dx.cols() {
                        let t = h.get(r, c);
                        dx.set(r, c, dx.get(r, c) * (1.0 - t * t));
                    }
                }
                dz = dx;
            }
        }
        let grad = FlatParams::new(RealVec::from_vec(grad)?, self.layout.clone())?;
        Ok((loss, grad))
    }
}

/// One plain gradient step: out = params - lr * grad.
pub fn sgd_step(params: &FlatParams, grad: &FlatParams, lr: f64) -> Result<FlatParams> {
    if !params.same_layout(grad) {
        return Err(Error::LayoutMismatch { context: "sgd_step" });
    }
    let data = RealVec::from_vec(
        params
            .data()
            .iter()
            .zip(grad.data().iter())
            .map(|(p, g)| p - lr * g)
            .collect(),
    )?;
    FlatParams::new(data, params.layout().clone())
}

const CHECKPOINT_MAGIC: &[u8; 16] = b"KIFLAB-CKPT\0\0\0\0\0";
const CHECKPOINT_VERSION: u8 = 1;

/// Write parameters to the single-file checkpoint format:
/// 16-byte magic, version byte, layout descriptor, then little-endian
/// 64-bit reals. See docs/formats.md for the exact byte layout.
pub fn save_checkpoint(params: &FlatParams, path: &Path) -> Result<()> {
    let display = path.display().to_string();
    let io = |e| Error::io(&display, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&[CHECKPOINT_VERSION]).map_err(io)?;
    let slots = params.layout().slots();
    w.write_all(&(slots.len() as u32).to_le_bytes()).map_err(io)?;
    for s in slots {
        w.write_all(&(s.layer as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&[match s.tensor {
            AdapterTensor::A => 0u8,
            AdapterTensor::B => 1u8,
        }])
        .map_err(io)?;
        w.write_all(&(s.rows as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(s.cols as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(s.offset as u64).to_le_bytes()).map_err(io)?;
    }
    w.write_all(&(params.len() as u64).to_le_bytes()).map_err(io)?;
    for v in params.data().iter() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<FlatParams> {
    let display = path.display().to_string();
    let mut r = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|e| Error::io(&display, e))?,
    );

    let mut magic = [0u8; 16];
    r.read_exact(&mut magic).map_err(|e| Error::io(&display, e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            path: display,
            message: "bad magic".into(),
        });
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version).map_err(|e| Error::io(&display, e))?;
    if version[0] != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path: display,
            found: version[0] as u32,
            expected: CHECKPOINT_VERSION as u32,
        });
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u32buf).map_err(|e| Error::io(&display, e))?;
    let num_slots = u32::from_le_bytes(u32buf) as usize;
    let mut slots = Vec::with_capacity(num_slots);
    for _ in 0..num_slots {
        r.read_exact(&mut u32buf).map_err(|e| Error::io(&display, e))?;
        let layer = u32::from_le_bytes(u32buf) as usize;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag).map_err(|e| Error::io(&display, e))?;
        let tensor = match tag[0] {
            0 => AdapterTensor::A,
            1 => AdapterTensor::B,
            t => {
                return Err(Error::Format {
                    path: display,
                    message: format!("bad tensor tag {t}"),
                })
            }
        };
        r.read_exact(&mut u32buf).map_err(|e| Error::io(&display, e))?;
        let rows = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf).map_err(|e| Error::io(&display, e))?;
        let cols = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u64buf).map_err(|e| Error::io(&display, e))?;
        let offset = u64::from_le_bytes(u64buf) as usize;
        slots.push(LayoutSlot {
            layer,
            tensor,
            rows,
            cols,
            offset,
        });
    }
    let layout = Arc::new(ParamLayout::new(slots)?);
    r.read_exact(&mut u64buf).map_err(|e| Error::io(&display, e))?;
    let len = u64::from_le_bytes(u64buf) as usize;
    if len != layout.total_len() {
        return Err(Error::Format {
            path: display,
            message: format!("data length {len} != layout length {}", layout.total_len()),
        });
    }
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        r.read_exact(&mut u64buf).map_err(|e| Error::io(&display, e))?;
        data.push(f64::from_le_bytes(u64buf));
    }
    FlatParams::new(RealVec::from_vec(data)?, layout)
}
