//! Detector head: two residual bidirectional LSTM layers with sentence
//! fusion, boundary probabilities, per-anchor IoU scores and offsets, and
//! ranking inference over refined anchors.

use std::cmp::Ordering;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result, TsgError};
use crate::nn::{init_tensor, Init, Linear};
use crate::segment::MomentSegment;
use crate::tensor::{Graph, ParamId, ParamStore, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Anchor lengths in frames; each scale uses a stride of half its length.
    pub anchor_scales: Vec<usize>,
    pub layers: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            anchor_scales: vec![4, 8, 16, 32],
            layers: 2,
        }
    }
}

/// Half-open frame ranges `[start, end)` of every candidate moment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorSet {
    pub ranges: Vec<(usize, usize)>,
    pub horizon: usize,
}

impl AnchorSet {
    /// Anchors at every scale with 50% overlap, clipped to `[0, horizon)`.
    /// Each scale stops after its first anchor that reaches the end, and
    /// exact duplicates across scales are dropped.
    pub fn new(scales: &[usize], horizon: usize) -> Result<Self> {
        let smallest = scales
            .iter()
            .copied()
            .min()
            .ok_or_else(|| config_err("at least one anchor scale is required"))?;
        if smallest == 0 {
            return Err(config_err("anchor scales must be positive"));
        }
        if horizon < smallest {
            return Err(TsgError::Input(format!(
                "{horizon} frames is shorter than the smallest anchor scale {smallest}"
            )));
        }
        let mut ranges: Vec<(usize, usize)> = Vec::new();
        for &scale in scales {
            let stride = (scale / 2).max(1);
            let mut start = 0;
            loop {
                let end = (start + scale).min(horizon);
                if !ranges.contains(&(start, end)) {
                    ranges.push((start, end));
                }
                if end == horizon {
                    break;
                }
                start += stride;
            }
        }
        Ok(Self { ranges, horizon })
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn segment(&self, i: usize) -> MomentSegment {
        let (s, e) = self.ranges[i];
        MomentSegment::frames(s, e).expect("anchors are non-empty")
    }

    pub fn segments(&self) -> Vec<MomentSegment> {
        (0..self.len()).map(|i| self.segment(i)).collect()
    }
}

/// Offsets `(Δs, Δe, Δc, Δw)` mapping an anchor onto a segment:
/// `c' = c + Δc·w`, `w' = w·exp(Δw)`, `s' = c' − w'/2 + Δs·w`,
/// `e' = c' + w'/2 + Δe·w`.
pub fn apply_offsets(anchor: &MomentSegment, offsets: [f64; 4]) -> (f64, f64) {
    let [ds, de, dc, dw] = offsets;
    let w = anchor.length();
    let center = anchor.center() + dc * w;
    let width = w * dw.exp();
    (center - width / 2.0 + ds * w, center + width / 2.0 + de * w)
}

/// Applies offsets and clips to `[0, horizon]`; a degenerate or non-finite
/// result falls back to the clipped anchor.
pub fn refine(anchor: &MomentSegment, offsets: [f64; 4], horizon: f64) -> MomentSegment {
    let (s, e) = apply_offsets(anchor, offsets);
    let (s, e) = (s.max(0.0), e.min(horizon));
    MomentSegment::new(s, e)
        .ok()
        .or_else(|| anchor.clipped(horizon))
        .unwrap_or(*anchor)
}

/// Exact inverse of [`apply_offsets`]: the center/width encoding of `target`
/// relative to `anchor`, with zero start/end residuals.
pub fn encode_offsets(anchor: &MomentSegment, target: &MomentSegment) -> [f64; 4] {
    let w = anchor.length();
    [
        0.0,
        0.0,
        (target.center() - anchor.center()) / w,
        (target.length() / w).ln(),
    ]
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput<'g> {
    /// `[T]`
    pub start_prob: Var<'g>,
    /// `[T]`
    pub end_prob: Var<'g>,
    /// `[l_v]`
    pub iou_score: Var<'g>,
    /// `[l_v, 4]`
    pub offsets: Var<'g>,
}

#[derive(Clone, Debug)]
pub struct BiLstmLayer {
    pub fuse: Linear,
    /// `(w_ih, w_hh, bias)` of the forward and backward recurrences.
    pub forward_rnn: [ParamId; 3],
    pub backward_rnn: [ParamId; 3],
    pub proj: Linear,
}

impl BiLstmLayer {
    fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let fuse = Linear::new(store, &format!("{name}.fuse"), d, d, rng, Init::FanIn)?;
        store.value_mut(fuse.bias).fill(1.0);
        let mut rnn = |dir: &str, rng: &mut ChaCha8Rng| -> Result<[ParamId; 3]> {
            Ok([
                store.add(
                    format!("{name}.{dir}.w_ih"),
                    init_tensor(rng, &[4 * d, d], d, Init::FanIn),
                )?,
                store.add(
                    format!("{name}.{dir}.w_hh"),
                    init_tensor(rng, &[4 * d, d], d, Init::FanIn),
                )?,
                store.add(format!("{name}.{dir}.bias"), init_tensor(rng, &[4 * d], d, Init::Zero))?,
            ])
        };
        let forward_rnn = rnn("fwd", rng)?;
        let backward_rnn = rnn("bwd", rng)?;
        let proj = Linear::new(store, &format!("{name}.proj"), d, 2 * d, rng, Init::FanIn)?;
        Ok(Self {
            fuse,
            forward_rnn,
            backward_rnn,
            proj,
        })
    }

    /// `h: [T, d]`, `q: [d]`; returns `fused + proj([fwd; bwd])`.
    fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, h: Var<'g>, q: Var<'g>) -> Result<Var<'g>> {
        let gate = self.fuse.forward(g, store, q)?;
        let fused = h.mul_broadcast(gate, 1)?;
        let run = |p: &[ParamId; 3], reverse| {
            fused.lstm(
                g.param(store, p[0]),
                g.param(store, p[1]),
                g.param(store, p[2]),
                reverse,
            )
        };
        let both = run(&self.forward_rnn, false)?.concat_last(run(&self.backward_rnn, true)?)?;
        fused.add(self.proj.forward(g, store, both)?)
    }
}

#[derive(Clone, Debug)]
pub struct DetectorHead {
    pub layers: Vec<BiLstmLayer>,
    pub start: Linear,
    pub end: Linear,
    pub iou: Linear,
    pub offsets: Linear,
    pub dim: usize,
}

impl DetectorHead {
    pub fn new(store: &mut ParamStore, dim: usize, config: &HeadConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.layers == 0 {
            return Err(config_err("head.layers must be positive"));
        }
        let layers = (0..config.layers)
            .map(|l| BiLstmLayer::new(store, &format!("head.lstm.{l}"), dim, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            start: Linear::new(store, "head.start", 1, dim, rng, Init::FanIn)?,
            end: Linear::new(store, "head.end", 1, dim, rng, Init::FanIn)?,
            iou: Linear::new(store, "head.iou", 1, dim, rng, Init::FanIn)?,
            offsets: Linear::new(store, "head.offsets", 4, dim, rng, Init::FanIn)?,
            dim,
        })
    }

    /// `features: [d, T]`, `q: [d]`.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        features: Var<'g>,
        q: Var<'g>,
        anchors: &AnchorSet,
    ) -> Result<HeadOutput<'g>> {
        let shape = features.shape();
        if shape.len() != 2 || shape[0] != self.dim {
            return Err(dim_err(format!(
                "head expects [{}, T] features, got {shape:?}",
                self.dim
            )));
        }
        let t = shape[1];
        if anchors.horizon != t {
            return Err(TsgError::Input(format!(
                "anchors cover {} frames but the features have {t}",
                anchors.horizon
            )));
        }
        let mut h = features.permute(&[1, 0])?;
        for layer in &self.layers {
            h = layer.forward(g, store, h, q)?;
        }
        let step_prob = |lin: &Linear| -> Result<Var<'g>> { lin.forward(g, store, h)?.sigmoid().reshape(&[t]) };
        let pooled = h.segment_mean(&anchors.ranges)?;
        Ok(HeadOutput {
            start_prob: step_prob(&self.start)?,
            end_prob: step_prob(&self.end)?,
            iou_score: self
                .iou
                .forward(g, store, pooled)?
                .sigmoid()
                .reshape(&[anchors.len()])?,
            offsets: self.offsets.forward(g, store, pooled)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub segment: MomentSegment,
    pub score: f64,
}

/// Refines every anchor and ranks by score (descending), breaking ties by
/// earlier refined start, then by anchor index. Returns at most `top_k`.
pub fn rank_predictions(anchors: &AnchorSet, scores: &[f64], offsets: &[f64], top_k: usize) -> Result<Vec<Prediction>> {
    if scores.len() != anchors.len() || offsets.len() != 4 * anchors.len() {
        return Err(dim_err(format!(
            "{} anchors but {} scores and {} offset values",
            anchors.len(),
            scores.len(),
            offsets.len()
        )));
    }
    let horizon = anchors.horizon as f64;
    let refined: Vec<MomentSegment> = (0..anchors.len())
        .map(|i| {
            let o = &offsets[4 * i..4 * i + 4];
            refine(&anchors.segment(i), [o[0], o[1], o[2], o[3]], horizon)
        })
        .collect();
    let mut order: Vec<usize> = (0..anchors.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(refined[a].start().total_cmp(&refined[b].start()))
            .then(a.cmp(&b))
    });
    Ok(order
        .into_iter()
        .take(top_k)
        .map(|i| Prediction {
            segment: refined[i],
            score: scores[i],
        })
        .collect())
}
