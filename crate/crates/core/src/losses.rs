//! Training objective `L = L_b + L_iou + L_offset`.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::head::{encode_offsets, AnchorSet, HeadOutput};
use crate::segment::MomentSegment;
use crate::tensor::{Tensor, Var};

/// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Anchors with IoU at least this large are positives.
    pub iou_threshold: f64,
    /// Frames within this distance of a boundary are boundary positives.
    pub boundary_radius: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.7,
            boundary_radius: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionTargets {
    pub start_label: Vec<f64>,
    pub end_label: Vec<f64>,
    pub iou_target: Vec<f64>,
    pub iou_class: Vec<f64>,
    /// `[l_v × 4]`, row-major; meaningful where `iou_class` is 1.
    pub offset_target: Vec<f64>,
}

impl SupervisionTargets {
    /// The start boundary is frame `start`, the end boundary is the last
    /// frame inside the segment. When no anchor reaches the IoU threshold,
    /// the best-overlapping anchor (lowest index on ties) is made positive.
    pub fn new(target: &MomentSegment, anchors: &AnchorSet, config: &LossConfig) -> Self {
        let t = anchors.horizon;
        let band = |centre: f64| -> Vec<f64> {
            let c = centre.clamp(0.0, (t - 1) as f64).round() as usize;
            let lo = c.saturating_sub(config.boundary_radius);
            let hi = (c + config.boundary_radius).min(t - 1);
            (0..t).map(|i| if (lo..=hi).contains(&i) { 1.0 } else { 0.0 }).collect()
        };
        let segments = anchors.segments();
        let iou_target: Vec<f64> = segments.iter().map(|a| a.iou(target)).collect();
        let mut iou_class: Vec<f64> = iou_target
            .iter()
            .map(|&v| if v >= config.iou_threshold { 1.0 } else { 0.0 })
            .collect();
        if !iou_class.contains(&1.0) {
            let best = (0..iou_target.len()).fold(0, |b, i| if iou_target[i] > iou_target[b] { i } else { b });
            iou_class[best] = 1.0;
        }
        let offset_target = segments.iter().flat_map(|a| encode_offsets(a, target)).collect();
        Self {
            start_label: band(target.start().floor()),
            end_label: band(target.end().ceil() - 1.0),
            iou_target,
            iou_class,
            offset_target,
        }
    }

    pub fn positives(&self) -> usize {
        self.iou_class.iter().filter(|&&c| c == 1.0).count()
    }
}

/// Records `Σ_i value_i` as a scalar node whose gradient is `derivative_i`.
fn fused_sum<'g>(x: Var<'g>, terms: Vec<(f64, f64)>) -> Var<'g> {
    let total = terms.iter().map(|t| t.0).sum();
    let shape = x.shape();
    let derivs: Vec<f64> = terms.into_iter().map(|t| t.1).collect();
    x.graph.record(Tensor::scalar(total), &[x], move |g, _| {
        let scale = g.data()[0];
        let d = derivs.iter().map(|v| v * scale).collect();
        vec![Some(Tensor::from_parts(shape.clone(), d))]
    })
}

fn check_len(x: &Var<'_>, n: usize, what: &str) -> Result<Vec<f64>> {
    let v = x.value();
    if v.numel() != n {
        return Err(dim_err(format!("{what}: {} values for {n} labels", v.numel())));
    }
    Ok(v.data().to_vec())
}

/// Class weights `(α⁺, α⁻)`; unweighted when either class is absent.
pub fn balance_weights(labels: &[f64]) -> (f64, f64) {
    let n = labels.len() as f64;
    let pos = labels.iter().filter(|&&g| g == 1.0).count() as f64;
    let neg = n - pos;
    if pos == 0.0 || neg == 0.0 {
        log::warn!("balanced BCE over {n} labels has an empty class ({pos} positives); using unit weights");
        return (1.0, 1.0);
    }
    (n / (2.0 * pos), n / (2.0 * neg))
}

/// `−(1/n) Σ [α⁺ g log p + α⁻ (1 − g) log(1 − p)]` with clamped `p`.
pub fn balanced_bce<'g>(prob: Var<'g>, labels: &[f64]) -> Result<Var<'g>> {
    let p = check_len(&prob, labels.len(), "balanced_bce")?;
    let (a_pos, a_neg) = balance_weights(labels);
    let n = labels.len() as f64;
    let terms = p
        .iter()
        .zip(labels)
        .map(|(&p, &g)| {
            let inside = (PROB_EPS..=1.0 - PROB_EPS).contains(&p);
            let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            let value = -(a_pos * g * pc.ln() + a_neg * (1.0 - g) * (1.0 - pc).ln()) / n;
            let deriv = if inside {
                -(a_pos * g / pc - a_neg * (1.0 - g) / (1.0 - pc)) / n
            } else {
                0.0
            };
            (value, deriv)
        })
        .collect();
    Ok(fused_sum(prob, terms))
}

pub fn boundary_loss<'g>(start_prob: Var<'g>, end_prob: Var<'g>, targets: &SupervisionTargets) -> Result<Var<'g>> {
    balanced_bce(start_prob, &targets.start_label)?.add(balanced_bce(end_prob, &targets.end_label)?)
}

pub fn mse<'g>(x: Var<'g>, target: &[f64]) -> Result<Var<'g>> {
    let v = check_len(&x, target.len(), "mse")?;
    let n = target.len() as f64;
    let terms = v
        .iter()
        .zip(target)
        .map(|(&a, &b)| ((a - b).powi(2) / n, 2.0 * (a - b) / n))
        .collect();
    Ok(fused_sum(x, terms))
}

pub fn iou_loss<'g>(score: Var<'g>, targets: &SupervisionTargets) -> Result<Var<'g>> {
    balanced_bce(score, &targets.iou_class)?.add(mse(score, &targets.iou_target)?)
}

pub fn smooth_l1(delta: f64) -> f64 {
    if delta.abs() < 1.0 {
        0.5 * delta * delta
    } else {
        delta.abs() - 0.5
    }
}

fn smooth_l1_derivative(delta: f64) -> f64 {
    if delta.abs() < 1.0 {
        delta
    } else {
        delta.signum()
    }
}

/// Mean smooth-L1 over positive anchors and their four components.
pub fn offset_loss<'g>(offsets: Var<'g>, targets: &SupervisionTargets) -> Result<Var<'g>> {
    let o = check_len(&offsets, targets.offset_target.len(), "offset_loss")?;
    let count = 4 * targets.positives();
    let terms = o
        .chunks(4)
        .zip(targets.offset_target.chunks(4))
        .zip(&targets.iou_class)
        .flat_map(|((pred, goal), &class)| {
            pred.iter().zip(goal).map(move |(&p, &t)| {
                if class == 1.0 {
                    let d = p - t;
                    (smooth_l1(d) / count as f64, smooth_l1_derivative(d) / count as f64)
                } else {
                    (0.0, 0.0)
                }
            })
        })
        .collect();
    Ok(fused_sum(offsets, terms))
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'g> {
    pub boundary: Var<'g>,
    pub iou: Var<'g>,
    pub offset: Var<'g>,
    pub total: Var<'g>,
}

/// Scalar values of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub boundary: f64,
    pub iou: f64,
    pub offset: f64,
    pub total: f64,
}

impl LossTerms<'_> {
    pub fn values(&self) -> LossValues {
        LossValues {
            boundary: self.boundary.item(),
            iou: self.iou.item(),
            offset: self.offset.item(),
            total: self.total.item(),
        }
    }
}

pub fn total_loss<'g>(out: &HeadOutput<'g>, targets: &SupervisionTargets) -> Result<LossTerms<'g>> {
    let boundary = boundary_loss(out.start_prob, out.end_prob, targets)?;
    let iou = iou_loss(out.iou_score, targets)?;
    let offset = offset_loss(out.offsets, targets)?;
    let total = boundary.add(iou)?.add(offset)?;
    Ok(LossTerms {
        boundary,
        iou,
        offset,
        total,
    })
}
