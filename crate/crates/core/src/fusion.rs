//! Knowledge fusion: binary masks from importance distributions and the
//! merge of inner/outer task vectors into the pre-cycle parameters,
//! including the ablation fusion variants.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FlatParams, ParamLayout, TaskVector};
use crate::numkit::{keep_count, masked_add, quantile_threshold, RealVec};

/// Per-parameter 0/1 selector with exact popcount ceil(keep_fraction * n).
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    bits: Vec<u8>,
    keep_fraction: f64,
    threshold: f64,
}

impl BinaryMask {
    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn keep_fraction(&self) -> f64 {
        self.keep_fraction
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn all_ones(n: usize) -> BinaryMask {
        BinaryMask {
            bits: vec![1; n],
            keep_fraction: 1.0,
            threshold: f64::NEG_INFINITY,
        }
    }

    pub fn all_zeros(n: usize) -> BinaryMask {
        BinaryMask {
            bits: vec![0; n],
            keep_fraction: 0.0,
            threshold: f64::INFINITY,
        }
    }
}

/// mask[i] = 1 iff importance[i] >= delta, where delta is the
/// quantile threshold; entries equal to delta are kept lowest-index-first
/// so the popcount is exactly ceil(keep_fraction * n).
pub fn build_mask(importance: &RealVec, keep_fraction: f64) -> Result<BinaryMask> {
    for (index, &v) in importance.iter().enumerate() {
        if v < 0.0 {
            return Err(Error::InvalidParameter {
                name: "importance",
                message: format!("negative importance {v} at index {index}"),
            });
        }
    }
    let threshold = quantile_threshold(importance, keep_fraction)?;
    let k = keep_count(importance.len(), keep_fraction);
    let mut bits = vec![0u8; importance.len()];
    let mut kept = 0usize;
    for (i, &v) in importance.iter().enumerate() {
        if v > threshold {
            bits[i] = 1;
            kept += 1;
        }
    }
    for (i, &v) in importance.iter().enumerate() {
        if kept == k {
            break;
        }
        if v == threshold {
            bits[i] = 1;
            kept += 1;
        }
    }
    debug_assert_eq!(kept, k);
    Ok(BinaryMask {
        bits,
        keep_fraction,
        threshold,
    })
}

/// As [`build_mask`] but with one quantile per layout slot instead of a
/// single global threshold. Experimental; the default pipeline thresholds
/// globally over the whole flat vector.
pub fn build_mask_per_slot(
    importance: &RealVec,
    layout: &ParamLayout,
    keep_fraction: f64,
) -> Result<BinaryMask> {
    if importance.len() != layout.total_len() {
        return Err(Error::LengthMismatch {
            context: "build_mask_per_slot",
            left: importance.len(),
            right: layout.total_len(),
        });
    }
    let mut bits = vec![0u8; importance.len()];
    let mut last_threshold = 0.0;
    for slot in layout.slots() {
        let range = slot.offset..slot.offset + slot.rows * slot.cols;
        let piece = RealVec::from_vec(importance.as_slice()[range.clone()].to_vec())?;
        let local = build_mask(&piece, keep_fraction)?;
        bits[range].copy_from_slice(local.bits());
        last_threshold = local.threshold();
    }
    Ok(BinaryMask {
        bits,
        keep_fraction,
        threshold: last_threshold,
    })
}

/// Fusion rule selector. `Masked` is the method default; the others are the
/// ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    /// Quantile-masked update of both task vectors.
    Masked,
    /// Merge both task vectors unmasked.
    NoKi,
    /// Scalar importance-weighted global merge.
    GlobalMerge,
    /// Soft per-coordinate weighting by max-normalized importance.
    AdaptiveSoft,
    /// Masked, but the inner mask yields wherever both masks are set.
    NoShare,
}

/// How fusion combines the cycle's task vectors into the new parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionPolicy {
    pub variant: FusionVariant,
    pub keep_fraction: f64,
    /// Overall scale c applied by the global-merge variant.
    pub gm_weight: f64,
    /// Experimental: quantile per layout slot instead of globally.
    pub per_matrix_quantile: bool,
}

impl Default for FusionPolicy {
    fn default() -> Self {
        FusionPolicy {
            variant: FusionVariant::Masked,
            keep_fraction: 0.20,
            gm_weight: 1.0,
            per_matrix_quantile: false,
        }
    }
}

impl FusionPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::InvalidParameter {
                name: "keep_fraction",
                message: format!("{} not in (0, 1]", self.keep_fraction),
            });
        }
        Ok(())
    }

    pub fn variant_label(&self) -> &'static str {
        match self.variant {
            FusionVariant::Masked => "masked",
            FusionVariant::NoKi => "no_ki",
            FusionVariant::GlobalMerge => "global_merge",
            FusionVariant::AdaptiveSoft => "adaptive_soft",
            FusionVariant::NoShare => "no_share",
        }
    }
}

/// Fusion result plus the masks that produced it (masked variants only),
/// for overlap logging.
#[derive(Debug, Clone)]
pub struct FuseOutcome {
    pub params: FlatParams,
    pub masks: Option<(BinaryMask, BinaryMask)>,
}

fn check_fuse_inputs(
    theta: &FlatParams,
    tau_in: &TaskVector,
    tau_out: &TaskVector,
    i_in: &RealVec,
    i_out: &RealVec,
) -> Result<()> {
    let n = theta.len();
    for (len, what) in [
        (tau_in.len(), "tau_in"),
        (tau_out.len(), "tau_out"),
        (i_in.len(), "i_in"),
        (i_out.len(), "i_out"),
    ] {
        if len != n {
            return Err(Error::LengthMismatch {
                context: match what {
                    "tau_in" => "fuse tau_in",
                    "tau_out" => "fuse tau_out",
                    "i_in" => "fuse i_in",
                    _ => "fuse i_out",
                },
                left: len,
                right: n,
            });
        }
    }
    Ok(())
}

/// Merge the cycle's task vectors into the pre-cycle parameters under the
/// given policy, returning the masks used where applicable.
pub fn fuse_detailed(
    theta: &FlatParams,
    tau_in: &TaskVector,
    tau_out: &TaskVector,
    i_in: &RealVec,
    i_out: &RealVec,
    policy: &FusionPolicy,
) -> Result<FuseOutcome> {
    policy.validate()?;
    check_fuse_inputs(theta, tau_in, tau_out, i_in, i_out)?;
    let layout = theta.layout().clone();
    let n = theta.len();

    let build = |importance: &RealVec| -> Result<BinaryMask> {
        if policy.per_matrix_quantile {
            build_mask_per_slot(importance, &layout, policy.keep_fraction)
        } else {
            build_mask(importance, policy.keep_fraction)
        }
    };

    match policy.variant {
        FusionVariant::Masked => {
            let m_in = build(i_in)?;
            let m_out = build(i_out)?;
            let data = masked_add(
                theta.data(),
                m_in.bits(),
                tau_in.data(),
                m_out.bits(),
                tau_out.data(),
            )?;
            Ok(FuseOutcome {
                params: FlatParams::new(data, layout)?,
                masks: Some((m_in, m_out)),
            })
        }
        FusionVariant::NoKi => {
            let ones_in = BinaryMask::all_ones(n);
            let ones_out = BinaryMask::all_ones(n);
            let data = masked_add(
                theta.data(),
                ones_in.bits(),
                tau_in.data(),
                ones_out.bits(),
                tau_out.data(),
            )?;
            Ok(FuseOutcome {
                params: FlatParams::new(data, layout)?,
                masks: None,
            })
        }
        FusionVariant::GlobalMerge => {
            let s_in = i_in.mean();
            let s_out = i_out.mean();
            let total = s_in + s_out;
            // Degenerate all-zero importance: split the weight evenly.
            let (w_in, w_out) = if total > 0.0 {
                (s_in / total, s_out / total)
            } else {
                (0.5, 0.5)
            };
            let c = policy.gm_weight;
            let data = RealVec::from_vec(
                (0..n)
                    .map(|i| {
                        theta.data()[i]
                            + c * (w_in * tau_in.data()[i] + w_out * tau_out.data()[i])
                    })
                    .collect(),
            )?;
            Ok(FuseOutcome {
                params: FlatParams::new(data, layout)?,
                masks: None,
            })
        }
        FusionVariant::AdaptiveSoft => {
            let max_in = i_in.max_value();
            let max_out = i_out.max_value();
            let soft = |v: f64, max: f64| if max > 0.0 { v / max } else { 0.0 };
            let data = RealVec::from_vec(
                (0..n)
                    .map(|i| {
                        theta.data()[i]
                            + soft(i_in[i], max_in) * tau_in.data()[i]
                            + soft(i_out[i], max_out) * tau_out.data()[i]
                    })
                    .collect(),
            )?;
            Ok(FuseOutcome {
                params: FlatParams::new(data, layout)?,
                masks: None,
            })
        }
        FusionVariant::NoShare => {
            let mut m_in = build(i_in)?;
            let m_out = build(i_out)?;
            for i in 0..n {
                if m_in.bits[i] == 1 && m_out.bits[i] == 1 {
                    m_in.bits[i] = 0;
                }
            }
            let data = masked_add(
                theta.data(),
                m_in.bits(),
                tau_in.data(),
                m_out.bits(),
                tau_out.data(),
            )?;
            Ok(FuseOutcome {
                params: FlatParams::new(data, layout)?,
                masks: Some((m_in, m_out)),
            })
        }
    }
}

/// [`fuse_detailed`] without the mask bookkeeping.
pub fn fuse(
    theta: &FlatParams,
    tau_in: &TaskVector,
    tau_out: &TaskVector,
    i_in: &RealVec,
    i_out: &RealVec,
    policy: &FusionPolicy,
) -> Result<FlatParams> {
    Ok(fuse_detailed(theta, tau_in, tau_out, i_in, i_out, policy)?.params)
}

/// Coordinate categories of an inner/outer mask pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapStats {
    pub shared: usize,
    pub in_only: usize,
    pub out_only: usize,
}

/// Count shared / inner-only / outer-only coordinates.
pub fn overlap_stats(m_in: &BinaryMask, m_out: &BinaryMask) -> Result<OverlapStats> {
    if m_in.len() != m_out.len() {
        return Err(Error::LengthMismatch {
            context: "overlap_stats",
            left: m_in.len(),
            right: m_out.len(),
        });
    }
    let mut stats = OverlapStats {
        shared: 0,
        in_only: 0,
        out_only: 0,
    };
    for (a, b) in m_in.bits().iter().zip(m_out.bits()) {
        match (a, b) {
            (1, 1) => stats.shared += 1,
            (1, 0) => stats.in_only += 1,
            (0, 1) => stats.out_only += 1,
            _ => {}
        }
    }
    Ok(stats)
}

/// Dump a mask pair as CSV rows of `index,m_in,m_out`.
pub fn write_mask_csv<W: Write>(m_in: &BinaryMask, m_out: &BinaryMask, mut w: W) -> Result<()> {
    if m_in.len() != m_out.len() {
        return Err(Error::LengthMismatch {
            context: "write_mask_csv",
            left: m_in.len(),
            right: m_out.len(),
        });
    }
    let io = |e| Error::io("<writer>", e);
    for (i, (a, b)) in m_in.bits().iter().zip(m_out.bits()).enumerate() {
        writeln!(w, "{i},{a},{b}").map_err(io)?;
    }
    Ok(())
}
