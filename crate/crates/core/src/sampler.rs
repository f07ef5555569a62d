//! Video-centric batching: all queries of a sampled video travel together so
//! the query-independent backbone prefix runs once per video per batch.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result, TsgError};
use crate::losses::{LossConfig, LossValues};
use crate::model::Model;
use crate::segment::MomentSegment;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Maximum (video, query) pairs per batch.
    pub batch_size: usize,
    /// Queries of one video per group; larger videos spill into later batches.
    pub max_queries_per_video: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            max_queries_per_video: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoGroup {
    pub video: usize,
    pub queries: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainBatch {
    pub groups: Vec<VideoGroup>,
    pub total_pairs: usize,
}

impl TrainBatch {
    fn push(&mut self, group: VideoGroup) {
        self.total_pairs += group.queries.len();
        self.groups.push(group);
    }

    fn contains_video(&self, video: usize) -> bool {
        self.groups.iter().any(|g| g.video == video)
    }
}

/// Builds one epoch of batches. `queries_by_video[v]` lists the query
/// indices of video `v`. Videos are shuffled; each contributes a first chunk
/// of at most `cap` queries in that order, and any remainder chunks follow
/// after every video's first chunk. Chunks are packed greedily up to
/// `batch_size` pairs, never placing one video twice in a batch.
pub fn build_epoch(queries_by_video: &[Vec<usize>], config: &SamplerConfig, seed: u64) -> Result<Vec<TrainBatch>> {
    if config.batch_size == 0 || config.max_queries_per_video == 0 {
        return Err(config_err(
            "sampler.batch_size and sampler.max_queries_per_video must be positive",
        ));
    }
    let cap = config.max_queries_per_video.min(config.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..queries_by_video.len()).collect();
    order.shuffle(&mut rng);

    let mut rounds: Vec<Vec<VideoGroup>> = Vec::new();
    for &v in &order {
        let queries = &queries_by_video[v];
        if queries.is_empty() {
            log::warn!("video {v} has no queries; skipped");
            continue;
        }
        let mut shuffled = queries.clone();
        if shuffled.len() > cap {
            shuffled.shuffle(&mut rng);
        }
        for (round, chunk) in shuffled.chunks(cap).enumerate() {
            if rounds.len() <= round {
                rounds.push(Vec::new());
            }
            rounds[round].push(VideoGroup {
                video: v,
                queries: chunk.to_vec(),
            });
        }
    }

    let mut batches = Vec::new();
    let mut current = TrainBatch {
        groups: Vec::new(),
        total_pairs: 0,
    };
    for group in rounds.into_iter().flatten() {
        if current.total_pairs + group.queries.len() > config.batch_size || current.contains_video(group.video) {
            batches.push(std::mem::replace(
                &mut current,
                TrainBatch {
                    groups: Vec::new(),
                    total_pairs: 0,
                },
            ));
        }
        current.push(group);
    }
    if current.total_pairs > 0 {
        batches.push(current);
    }
    Ok(batches)
}

/// Work counters for the sharing claim. Updates are atomic.
#[derive(Debug, Default)]
pub struct ForwardCounter {
    backbone_forwards: AtomicU64,
    pair_forwards: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub backbone_forwards: u64,
    pub pair_forwards: u64,
}

impl ForwardCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_backbone(&self) {
        self.backbone_forwards.fetch_add(1, Ordering::Relaxed);
    }

    pub fn record_pairs(&self, n: usize) {
        self.pair_forwards.fetch_add(n as u64, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            backbone_forwards: self.backbone_forwards.load(Ordering::Relaxed),
            pair_forwards: self.pair_forwards.load(Ordering::Relaxed),
        }
    }
}

/// Where batch members come from; training wraps the dataset with
/// augmentation.
pub trait PairSource {
    fn frames(&self, video: usize) -> Result<Tensor>;
    fn query(&self, query: usize) -> (Vec<usize>, MomentSegment);
}

impl PairSource for crate::data::Dataset {
    fn frames(&self, video: usize) -> Result<Tensor> {
        Ok(self.videos[video].frames.clone())
    }

    fn query(&self, query: usize) -> (Vec<usize>, MomentSegment) {
        let q = &self.queries[query];
        (q.tokens.clone(), q.target)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchLoss<'g> {
    /// Mean total loss over the batch's pairs (the node to differentiate).
    pub loss: Var<'g>,
    /// Mean of each term.
    pub values: LossValues,
}

fn mean_of<'g>(terms: Vec<(Var<'g>, LossValues)>) -> Result<BatchLoss<'g>> {
    let n = terms.len() as f64;
    let mut values = LossValues::default();
    let mut acc: Option<Var<'g>> = None;
    for (var, v) in terms {
        values.boundary += v.boundary / n;
        values.iou += v.iou / n;
        values.offset += v.offset / n;
        values.total += v.total / n;
        acc = Some(match acc {
            Some(a) => a.add(var)?,
            None => var,
        });
    }
    let loss = acc
        .ok_or_else(|| TsgError::Contract("empty batch".into()))?
        .scale(1.0 / n);
    Ok(BatchLoss { loss, values })
}

/// Mean pair loss of a batch, computing each video's backbone prefix once
/// and reusing it for all of that video's queries.
pub fn run_batch<'g>(
    g: &'g Graph,
    model: &Model,
    batch: &TrainBatch,
    source: &dyn PairSource,
    loss_config: &LossConfig,
    counter: &ForwardCounter,
) -> Result<BatchLoss<'g>> {
    if batch.total_pairs == 0 {
        return Err(TsgError::Contract("empty batch".into()));
    }
    let mut terms = Vec::with_capacity(batch.total_pairs);
    for group in &batch.groups {
        let frames = source.frames(group.video)?;
        let anchors = model.anchors(frames.shape()[1])?;
        let prefix = model.video_prefix(g, frames)?;
        counter.record_backbone();
        for &qi in &group.queries {
            let (tokens, target) = source.query(qi);
            let t = model.pair_loss(g, prefix, &tokens, &target, &anchors, loss_config)?;
            counter.record_pairs(1);
            terms.push((t.total, t.values()));
        }
    }
    mean_of(terms)
}

/// Reference without sharing: every pair recomputes the whole backbone.
pub fn run_batch_unshared<'g>(
    g: &'g Graph,
    model: &Model,
    batch: &TrainBatch,
    source: &dyn PairSource,
    loss_config: &LossConfig,
) -> Result<BatchLoss<'g>> {
    let mut terms = Vec::with_capacity(batch.total_pairs);
    for group in &batch.groups {
        for &qi in &group.queries {
            let frames = source.frames(group.video)?;
            let anchors = model.anchors(frames.shape()[1])?;
            let prefix = model.video_prefix(g, frames)?;
            let (tokens, target) = source.query(qi);
            let t = model.pair_loss(g, prefix, &tokens, &target, &anchors, loss_config)?;
            terms.push((t.total, t.values()));
        }
    }
    mean_of(terms)
}
