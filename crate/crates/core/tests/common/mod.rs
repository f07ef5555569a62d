//! Independent brute-force re-implementations used as test oracles.

#![allow(dead_code)]

pub mod gradients;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsg_core::losses::SupervisionTargets;
use tsg_core::MomentSegment;

pub fn iou_oracle(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    inter / union
}

fn bounds(s: &MomentSegment) -> (f64, f64) {
    (s.start(), s.end())
}

pub fn rank_oracle(preds: &[Vec<MomentSegment>], targets: &[MomentSegment], n: usize, m: f64) -> f64 {
    let mut hits = 0usize;
    for q in 0..targets.len() {
        let mut hit = false;
        let mut i = 0;
        while i < n && i < preds[q].len() {
            if iou_oracle(bounds(&preds[q][i]), bounds(&targets[q])) > m {
                hit = true;
            }
            i += 1;
        }
        if hit {
            hits += 1;
        }
    }
    hits as f64 * 100.0 / targets.len() as f64
}

pub fn miou_oracle(preds: &[Vec<MomentSegment>], targets: &[MomentSegment]) -> f64 {
    let mut total = 0.0;
    for q in 0..targets.len() {
        if !preds[q].is_empty() {
            total += iou_oracle(bounds(&preds[q][0]), bounds(&targets[q]));
        }
    }
    total * 100.0 / targets.len() as f64
}

/// Random evaluation set. Segments sit on a half-frame grid so exact IoU
/// ties with the thresholds occur.
pub fn random_eval_set(rng: &mut ChaCha8Rng, queries: usize) -> (Vec<Vec<MomentSegment>>, Vec<MomentSegment>) {
    let seg = |rng: &mut ChaCha8Rng| {
        let s = rng.random_range(0..40) as f64 / 2.0;
        let len = rng.random_range(1..20) as f64 / 2.0;
        MomentSegment::new(s, s + len).unwrap()
    };
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..queries {
        let target = seg(rng);
        let k = rng.random_range(0..8);
        let mut list: Vec<MomentSegment> = (0..k).map(|_| seg(rng)).collect();
        if rng.random_bool(0.2) {
            // A prediction with IoU exactly 0.5: half the target, same start.
            let half = MomentSegment::new(target.start(), target.start() + target.length() / 2.0).unwrap();
            list.insert(0, half);
        }
        preds.push(list);
        targets.push(target);
    }
    (preds, targets)
}

fn bce_oracle(p: &[f64], g: &[f64]) -> f64 {
    let n = g.len() as f64;
    let npos = g.iter().filter(|&&x| x == 1.0).count() as f64;
    let nneg = n - npos;
    let (ap, an) = if npos == 0.0 || nneg == 0.0 {
        (1.0, 1.0)
    } else {
        (n / (2.0 * npos), n / (2.0 * nneg))
    };
    let mut s = 0.0;
    for i in 0..p.len() {
        let q = p[i].clamp(1e-7, 1.0 - 1e-7);
        s += ap * g[i] * q.ln() + an * (1.0 - g[i]) * (1.0 - q).ln();
    }
    -s / n
}

pub fn boundary_oracle(sp: &[f64], ep: &[f64], t: &SupervisionTargets) -> f64 {
    bce_oracle(sp, &t.start_label) + bce_oracle(ep, &t.end_label)
}

pub fn iou_loss_oracle(score: &[f64], t: &SupervisionTargets) -> f64 {
    let mut mse = 0.0;
    for (p, y) in score.iter().zip(&t.iou_target) {
        mse += (p - y).powi(2);
    }
    bce_oracle(score, &t.iou_class) + mse / score.len() as f64
}

pub fn offset_oracle(offsets: &[f64], t: &SupervisionTargets) -> f64 {
    let mut s = 0.0;
    let mut count = 0;
    for a in 0..t.iou_class.len() {
        if t.iou_class[a] != 1.0 {
            continue;
        }
        for k in 0..4 {
            let d: f64 = offsets[4 * a + k] - t.offset_target[4 * a + k];
            s += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        s / count as f64
    }
}

/// Random probabilities, labels and offsets for `t` frames and `l` anchors.
pub struct RandomLossInput {
    pub start_prob: Vec<f64>,
    pub end_prob: Vec<f64>,
    pub score: Vec<f64>,
    pub offsets: Vec<f64>,
    pub targets: SupervisionTargets,
}

pub fn random_loss_input(rng: &mut ChaCha8Rng, t: usize, l: usize) -> RandomLossInput {
    let probs = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(0.0..1.0)).collect() };
    let labels = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect()
    };
    let targets = SupervisionTargets {
        start_label: labels(rng, t),
        end_label: labels(rng, t),
        iou_target: probs(rng, l),
        iou_class: labels(rng, l),
        offset_target: (0..4 * l).map(|_| rng.random_range(-2.0..2.0)).collect(),
    };
    RandomLossInput {
        start_prob: probs(rng, t),
        end_prob: probs(rng, t),
        score: probs(rng, l),
        offsets: (0..4 * l).map(|_| rng.random_range(-3.0..3.0)).collect(),
        targets,
    }
}

use tsg_core::config::RunConfig;
use tsg_core::data::{generate, SynthConfig};
use tsg_core::encoders::BackboneConfig;
use tsg_core::head::HeadConfig;
use tsg_core::metrics::temporal_iou;
use tsg_core::model::ModelConfig;
use tsg_core::optim::AdamW;
use tsg_core::pipeline::build_model;
use tsg_core::scada::ScadaConfig;
use tsg_core::tensor::{Graph, ParamStore, Tensor};

/// d = 8, T = 8, two anchor scales; every parameter trainable.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        dim: 8,
        adapters: true,
        backbone: BackboneConfig {
            widths: vec![4, 8, 8],
            frozen: false,
            ..Default::default()
        },
        scada: ScadaConfig {
            gamma: 2,
            insertion_points: vec![1, 2],
            ..Default::default()
        },
        head: HeadConfig {
            anchor_scales: vec![4, 8],
            layers: 2,
        },
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
    .unwrap()
}

/// Overwrites every parameter, including zero-initialized ones, so no
/// gradient path is trivially zero.
pub fn randomize(store: &mut ParamStore, seed: u64, bound: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, random_tensor(&mut rng, &shape, bound)).unwrap();
    }
}

/// Trains on one pair; returns (initial loss, final loss, rank-1 IoU).
pub fn overfit(steps: usize) -> (f64, f64, f64) {
    let data = generate(&SynthConfig {
        train_videos: 12,
        test_videos: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    let config = RunConfig::default();
    let mut model = build_model(&config, &data).unwrap();
    let query = &data.queries[0];
    let frames = data.video(&query.video_id).unwrap().frames.clone();
    let anchors = model.anchors(frames.shape()[1]).unwrap();
    let mut opt = AdamW::new(1e-2, 0.0);
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..steps {
        let g = Graph::new();
        let prefix = model.video_prefix(&g, frames.clone()).unwrap();
        let terms = model
            .pair_loss(&g, prefix, &query.tokens, &query.target, &anchors, &config.loss)
            .unwrap();
        last = terms.total.item();
        first.get_or_insert(last);
        model.store.zero_grad();
        g.backward(terms.total, &mut model.store).unwrap();
        opt.step(&mut model.store);
    }
    let preds = model.infer(&frames, &[&query.tokens], 1).unwrap();
    (first.unwrap(), last, temporal_iou(&preds[0][0].segment, &query.target))
}
