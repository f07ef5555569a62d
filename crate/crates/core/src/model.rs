//! The full grounding model: sentence encoder, backbone with adapters,
//! aggregation, and detector head over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{BackboneConfig, SentenceEncoder, VideoBackbone};
use crate::error::Result;
use crate::head::{rank_predictions, AnchorSet, DetectorHead, HeadConfig, HeadOutput, Prediction};
use crate::losses::{total_loss, LossConfig, LossTerms, SupervisionTargets};
use crate::scada::{aggregate, ScadaBlock, ScadaConfig};
use crate::segment::MomentSegment;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Architecture knobs. Input sizes (vocabulary, channels, frames) come from
/// the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Model-wide hidden width `d`.
    pub dim: usize,
    /// Attach adapters at the backbone insertion points.
    pub adapters: bool,
    pub backbone: BackboneConfig,
    pub scada: ScadaConfig,
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            adapters: true,
            backbone: BackboneConfig::default(),
            scada: ScadaConfig::default(),
            head: HeadConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: SentenceEncoder,
    pub backbone: VideoBackbone,
    pub adapters: Vec<ScadaBlock>,
    pub head: DetectorHead,
}

impl Model {
    /// Parameters are created in a fixed order from a generator seeded by
    /// `seed`, so equal inputs give bit-identical models.
    pub fn new(config: &ModelConfig, vocab: usize, in_channels: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let encoder = SentenceEncoder::new(&mut store, vocab, d, &mut rng)?;
        let backbone = VideoBackbone::new(
            &mut store,
            in_channels,
            d,
            &config.backbone,
            &config.scada.insertion_points,
            &mut rng,
        )?;
        let adapters = if config.adapters {
            backbone
                .insertion_widths()
                .into_iter()
                .enumerate()
                .map(|(i, c)| ScadaBlock::new(&mut store, i, c, d, &config.scada, &mut rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let head = DetectorHead::new(&mut store, d, &config.head, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            backbone,
            adapters,
            head,
        })
    }

    pub fn anchors(&self, frames: usize) -> Result<AnchorSet> {
        AnchorSet::new(&self.config.head.anchor_scales, frames)
    }

    /// Query-independent backbone prefix of a `[c0, T, H, W]` clip.
    pub fn video_prefix<'g>(&self, g: &'g Graph, frames: Tensor) -> Result<Var<'g>> {
        let x = g.constant(frames);
        self.backbone
            .forward_prefix(g, &self.store, x, !self.adapters.is_empty())
    }

    /// Head outputs for one query given the video's prefix feature.
    pub fn forward_query<'g>(
        &self,
        g: &'g Graph,
        prefix: Var<'g>,
        tokens: &[usize],
        anchors: &AnchorSet,
    ) -> Result<HeadOutput<'g>> {
        let q = self.encoder.encode(g, &self.store, tokens)?;
        let (x_b, outers) = self.backbone.forward_tail(g, &self.store, prefix, q, &self.adapters)?;
        let fused = aggregate(x_b, &outers)?;
        self.head.forward(g, &self.store, fused, q, anchors)
    }

    pub fn pair_loss<'g>(
        &self,
        g: &'g Graph,
        prefix: Var<'g>,
        tokens: &[usize],
        target: &MomentSegment,
        anchors: &AnchorSet,
        loss: &LossConfig,
    ) -> Result<LossTerms<'g>> {
        let out = self.forward_query(g, prefix, tokens, anchors)?;
        total_loss(&out, &SupervisionTargets::new(target, anchors, loss))
    }

    /// Ranked refined anchors for each query of one video.
    pub fn infer(&self, frames: &Tensor, queries: &[&[usize]], top_k: usize) -> Result<Vec<Vec<Prediction>>> {
        let anchors = self.anchors(frames.shape()[1])?;
        let g = Graph::new();
        let prefix = self.video_prefix(&g, frames.clone())?;
        queries
            .iter()
            .map(|tokens| {
                let out = self.forward_query(&g, prefix, tokens, &anchors)?;
                rank_predictions(
                    &anchors,
                    out.iou_score.value().data(),
                    out.offsets.value().data(),
                    top_k,
                )
            })
            .collect()
    }

    pub fn trainable_parameters(&self) -> usize {
        self.store.trainable_elements()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform;

    fn tiny() -> ModelConfig {
        ModelConfig {
            dim: 8,
            backbone: BackboneConfig {
                widths: vec![4, 8, 8],
                ..Default::default()
            },
            scada: ScadaConfig {
                gamma: 2,
                insertion_points: vec![0, 1],
                ..Default::default()
            },
            head: HeadConfig {
                anchor_scales: vec![4, 8],
                layers: 2,
            },
            ..Default::default()
        }
    }

    #[test]
    fn fresh_adapters_leave_features_bit_identical() {
        let with = Model::new(&tiny(), 10, 2, 3).unwrap();
        let without = Model::new(
            &ModelConfig {
                adapters: false,
                ..tiny()
            },
            10,
            2,
            3,
        )
        .unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let frames = uniform(&mut r, &[2, 8, 8, 8], 1.0);
        let g = Graph::new();
        let q = with.encoder.encode(&g, &with.store, &[1, 2]).unwrap();
        let pa = with.video_prefix(&g, frames.clone()).unwrap();
        let (xa, oa) = with
            .backbone
            .forward_tail(&g, &with.store, pa, q, &with.adapters)
            .unwrap();
        let pb = without.video_prefix(&g, frames).unwrap();
        let (xb, ob) = without.backbone.forward_tail(&g, &without.store, pb, q, &[]).unwrap();
        assert_eq!(*xa.value(), *xb.value());
        assert_eq!(oa.len(), 2);
        assert!(ob.is_empty());
        assert_eq!(
            *aggregate(xa, &oa).unwrap().value(),
            *aggregate(xb, &ob).unwrap().value()
        );
    }

    #[test]
    fn adapter_parameters_are_a_small_fraction_of_the_backbone() {
        let m = Model::new(&ModelConfig::default(), 32, 3, 0).unwrap();
        let scada = m.store.count_elements("scada.");
        let backbone = m.store.count_elements("backbone.");
        assert!(scada * 4 < backbone, "{scada} vs {backbone}");
    }

    #[test]
    fn infer_shapes() {
        let m = Model::new(&tiny(), 10, 2, 5).unwrap();
        let frames = uniform(&mut ChaCha8Rng::seed_from_u64(6), &[2, 8, 8, 8], 1.0);
        let out = m.infer(&frames, &[&[1, 2], &[3]], 3).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|p| p.len() == 3));
        assert!(out[0].windows(2).all(|w| w[0].score >= w[1].score));
    }
}
