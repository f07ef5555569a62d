//! Whole-model gradient check, prefix sharing, and single-pair overfitting.

mod common;

use common::*;
use tsg_core::config::RunConfig;
use tsg_core::data::{generate, Dataset, Split, SynthConfig};
use tsg_core::head::AnchorSet;
use tsg_core::metrics::temporal_iou;
use tsg_core::model::ModelConfig;
use tsg_core::pipeline::{build_model, evaluate_model, train, Variant};
use tsg_core::sampler::{build_epoch, run_batch, run_batch_unshared, ForwardCounter, SamplerConfig};
use tsg_core::tensor::{Graph, Tensor};
use tsg_core::MomentSegment;

fn small_data() -> SynthConfig {
    SynthConfig {
        train_videos: 12,
        test_videos: 2,
        ..SynthConfig::default()
    }
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let report = gradients::full_model();
    assert!(report.checked > 1000);
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn shared_prefix_matches_unshared_loss_and_gradients() {
    let data = generate(&small_data()).unwrap().subset(Split::Train);
    let config = RunConfig {
        model: ModelConfig {
            backbone: tsg_core::encoders::BackboneConfig {
                frozen: false,
                ..Default::default()
            },
            ..Default::default()
        },
        ..Default::default()
    };
    let mut model = build_model(&config, &data).unwrap();
    randomize(&mut model.store, 5, 0.3);
    let batches = build_epoch(&data.queries_by_video(), &config.sampler, 1).unwrap();
    let batch = batches
        .iter()
        .find(|b| b.groups.iter().any(|g| g.queries.len() > 1))
        .unwrap();

    let counter = ForwardCounter::new();
    let g = Graph::new();
    let shared = run_batch(&g, &model, batch, &data, &config.loss, &counter).unwrap();
    model.store.zero_grad();
    g.backward(shared.loss, &mut model.store).unwrap();
    let grads_shared: Vec<Tensor> = model.store.ids().map(|id| model.store.grad(id).clone()).collect();

    let g = Graph::new();
    let plain = run_batch_unshared(&g, &model, batch, &data, &config.loss).unwrap();
    model.store.zero_grad();
    g.backward(plain.loss, &mut model.store).unwrap();

    assert!((shared.loss.item() - plain.loss.item()).abs() < 1e-10);
    for (id, a) in model.store.ids().zip(&grads_shared) {
        let b = model.store.grad(id);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-10, "{}", model.store.get(id).name());
        }
    }
    let counts = counter.snapshot();
    assert_eq!(counts.backbone_forwards, batch.groups.len() as u64);
    assert_eq!(counts.pair_forwards, batch.total_pairs as u64);
}

#[test]
fn backbone_runs_once_per_video_group_per_epoch() {
    let data = generate(&small_data()).unwrap().subset(Split::Train);
    let config = RunConfig::default();
    let model = build_model(&config, &data).unwrap();
    let sampler = SamplerConfig {
        batch_size: 4,
        max_queries_per_video: 2,
    };
    let groups = data.queries_by_video();
    let batches = build_epoch(&groups, &sampler, 9).unwrap();
    let counter = ForwardCounter::new();
    for batch in &batches {
        let g = Graph::new();
        run_batch(&g, &model, batch, &data, &config.loss, &counter).unwrap();
    }
    let expected: usize = groups.iter().map(|q| q.len().div_ceil(2)).sum();
    let counts = counter.snapshot();
    assert_eq!(counts.backbone_forwards, expected as u64);
    assert_eq!(counts.pair_forwards, data.queries.len() as u64);
}

#[test]
fn single_pair_overfits() {
    let (initial, fin, iou) = overfit(200);
    assert!(fin < 0.1 * initial, "{initial} -> {fin}");
    assert!(iou > 0.7, "{iou}");
}

#[test]
fn frozen_backbone_is_bitwise_unchanged_by_training() {
    let data = generate(&small_data()).unwrap().subset(Split::Train);
    let mut config = RunConfig::default();
    config.train.epochs = 1;
    let mut model = build_model(&config, &data).unwrap();
    let before = model.store.clone();
    train(&mut model, &data, &config, None).unwrap();
    for (id, p) in before.iter() {
        let same = p.value() == model.store.value(id);
        if p.name().starts_with("backbone.") {
            assert!(same, "{} moved", p.name());
        } else if p.name().ends_with("fc_up.weight") {
            assert!(!same, "{} did not train", p.name());
        }
    }
}

/// Expected Rank1@0.5 of picking one anchor uniformly at random.
fn random_anchor_rank1(data: &Dataset, anchors: &AnchorSet) -> f64 {
    let queries = data.query_indices(Split::Test);
    let segments = anchors.segments();
    let hits: f64 = queries
        .iter()
        .map(|&q| {
            let t = data.queries[q].target;
            segments.iter().filter(|a| temporal_iou(a, &t) > 0.5).count() as f64 / segments.len() as f64
        })
        .sum();
    100.0 * hits / queries.len() as f64
}

/// Best Rank1@0.5 of answering every query with one fixed segment, searched
/// over a half-frame grid.
fn best_constant_rank1(data: &Dataset) -> f64 {
    let queries = data.query_indices(Split::Test);
    let steps = 2 * data.config.frames;
    let mut best = 0.0f64;
    for s in 0..steps {
        for e in s + 1..=steps {
            let seg = MomentSegment::new(s as f64 / 2.0, e as f64 / 2.0).unwrap();
            let hits = queries
                .iter()
                .filter(|&&q| temporal_iou(&seg, &data.queries[q].target) > 0.5)
                .count();
            best = best.max(100.0 * hits as f64 / queries.len() as f64);
        }
    }
    best
}

#[test]
fn untrained_model_scores_at_chance_level() {
    let data = generate(&SynthConfig::default()).unwrap();
    let config = RunConfig::default();
    let model = build_model(&config, &data).unwrap();
    let random = random_anchor_rank1(&data, &model.anchors(data.config.frames).unwrap());
    let constant = best_constant_rank1(&data);
    let got = evaluate_model(&model, &data, &config).unwrap().rank1_iou05;
    assert!(random <= constant);
    assert!(
        got <= constant + 5.0,
        "untrained {got}, random anchor {random}, best constant {constant}"
    );
}

#[test]
fn variants_differ_only_in_their_flags() {
    let base = RunConfig::default();
    for v in Variant::ALL {
        let mut c = v.apply(&base);
        c.model.adapters = base.model.adapters;
        c.model.backbone.frozen = base.model.backbone.frozen;
        c.model.scada.text_free = base.model.scada.text_free;
        assert_eq!(c.to_toml(), base.to_toml(), "{}", v.name());
    }
}
