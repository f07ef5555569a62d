//! Finite-difference checks shared by the gradient tests and acceptance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsg_core::gradcheck::{check_all, GradCheckReport, DEFAULT_STEP};
use tsg_core::losses::{total_loss, LossConfig, SupervisionTargets};
use tsg_core::model::Model;
use tsg_core::scada::aggregate;
use tsg_core::tensor::{Activation, Conv3dSpec, Graph, ParamStore, Var};
use tsg_core::{MomentSegment, Result};

use super::{random_tensor, randomize, tiny_model_config};

/// Random fixed weights turn any output into a scalar with O(1) gradients.
fn weighted_sum<'g>(g: &'g Graph, y: Var<'g>, seed: u64) -> Result<Var<'g>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random_tensor(&mut rng, &y.shape(), 1.0));
    Ok(y.mul(w)?.sum())
}

pub fn linear() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let x = store.add("x", random_tensor(&mut rng, &[3, 3], 1.0)).unwrap();
    let w = store.add("w", random_tensor(&mut rng, &[3, 3], 1.0)).unwrap();
    let b = store.add("b", random_tensor(&mut rng, &[3], 1.0)).unwrap();
    check_all(&mut store, DEFAULT_STEP, |g, s| {
        let y = g.param(s, x).linear(g.param(s, w), Some(g.param(s, b)))?;
        weighted_sum(g, y, 10)
    })
    .unwrap()
}

pub fn dwconv1d() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let x = store.add("x", random_tensor(&mut rng, &[4, 8], 1.0)).unwrap();
    let k = store.add("k", random_tensor(&mut rng, &[4, 3], 1.0)).unwrap();
    check_all(&mut store, DEFAULT_STEP, |g, s| {
        let y = g.param(s, x).dwconv1d(g.param(s, k))?;
        weighted_sum(g, y, 20)
    })
    .unwrap()
}

pub fn conv3d() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let x = store.add("x", random_tensor(&mut rng, &[2, 4, 4, 4], 1.0)).unwrap();
    let k = store.add("k", random_tensor(&mut rng, &[3, 2, 2, 2, 2], 1.0)).unwrap();
    let b = store.add("b", random_tensor(&mut rng, &[3], 1.0)).unwrap();
    let spec = Conv3dSpec::new([1, 2, 2], [1, 0, 1]);
    check_all(&mut store, DEFAULT_STEP, |g, s| {
        let y = g.param(s, x).conv3d(g.param(s, k), Some(g.param(s, b)), spec)?;
        weighted_sum(g, y, 30)
    })
    .unwrap()
}

pub fn layer_norm() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let x = store.add("x", random_tensor(&mut rng, &[8], 1.0)).unwrap();
    let x2 = store.add("x2", random_tensor(&mut rng, &[3, 5, 2], 1.0)).unwrap();
    check_all(&mut store, DEFAULT_STEP, |g, s| {
        let a = weighted_sum(g, g.param(s, x).layer_norm(0, 1e-5)?, 40)?;
        let b = weighted_sum(g, g.param(s, x2).layer_norm(1, 1e-5)?, 41)?;
        a.add(b)
    })
    .unwrap()
}

pub fn activation(kind: Activation) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let x = store.add("x", random_tensor(&mut rng, &[16], 2.0)).unwrap();
    check_all(&mut store, DEFAULT_STEP, |g, s| {
        weighted_sum(g, g.param(s, x).activation(kind), 50)
    })
    .unwrap()
}

/// Elementwise arithmetic, reshapes, broadcasts, pooling and gathers.
pub fn structural() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let a = store.add("a", random_tensor(&mut rng, &[3, 4], 1.0)).unwrap();
    let b = store.add("b", random_tensor(&mut rng, &[3, 2], 1.0)).unwrap();
    let v = store.add("v", random_tensor(&mut rng, &[4], 1.0)).unwrap();
    let c = store.add("c", random_tensor(&mut rng, &[2, 3, 2, 2], 1.0)).unwrap();
    let table = store.add("table", random_tensor(&mut rng, &[5, 4], 1.0)).unwrap();
    check_all(&mut store, DEFAULT_STEP, |g, s| {
        let av = g.param(s, a);
        let cat = av.concat_last(g.param(s, b))?;
        let t1 = weighted_sum(g, cat, 60)?;
        let t2 = weighted_sum(g, av.mul_broadcast(g.param(s, v), 1)?, 61)?;
        let t3 = weighted_sum(g, av.permute(&[1, 0])?.reshape(&[2, 6])?, 62)?;
        let t4 = weighted_sum(g, g.param(s, c).mean_trailing(2)?, 63)?;
        let t5 = weighted_sum(g, av.segment_mean(&[(0, 2), (1, 3), (0, 3)])?, 64)?;
        let t6 = weighted_sum(g, g.param(s, table).gather_mean(&[1, 3, 3])?, 65)?;
        let t7 = av.sub(av.scale(0.3))?.mul(av)?.mean();
        t1.add(t2)?.add(t3)?.add(t4)?.add(t5)?.add(t6)?.add(t7)
    })
    .unwrap()
}

pub fn lstm(reverse: bool) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let x = store.add("x", random_tensor(&mut rng, &[6, 3], 1.0)).unwrap();
    let wi = store.add("wi", random_tensor(&mut rng, &[8, 3], 1.0)).unwrap();
    let wh = store.add("wh", random_tensor(&mut rng, &[8, 2], 1.0)).unwrap();
    let b = store.add("b", random_tensor(&mut rng, &[8], 1.0)).unwrap();
    check_all(&mut store, DEFAULT_STEP, |g, s| {
        let y = g
            .param(s, x)
            .lstm(g.param(s, wi), g.param(s, wh), g.param(s, b), reverse)?;
        weighted_sum(g, y, 70)
    })
    .unwrap()
}

/// Every op check, labelled.
pub fn all_ops() -> Vec<(String, GradCheckReport)> {
    let mut out = vec![
        ("linear".to_string(), linear()),
        ("dwconv1d".to_string(), dwconv1d()),
        ("conv3d".to_string(), conv3d()),
        ("layer_norm".to_string(), layer_norm()),
        ("structural".to_string(), structural()),
    ];
    for kind in [Activation::Gelu, Activation::Sigmoid, Activation::Tanh] {
        out.push((format!("{kind:?}").to_lowercase(), activation(kind)));
    }
    out.push(("lstm_forward".to_string(), lstm(false)));
    out.push(("lstm_reverse".to_string(), lstm(true)));
    out
}

/// Encoders, adapters, head and total loss on the tiny model, with every
/// parameter randomized and trainable.
pub fn full_model() -> GradCheckReport {
    let mut model = Model::new(&tiny_model_config(), 10, 2, 1).unwrap();
    randomize(&mut model.store, 2, 0.5);
    let frames = random_tensor(&mut ChaCha8Rng::seed_from_u64(3), &[2, 8, 8, 8], 1.0);
    let target = MomentSegment::new(1.5, 5.0).unwrap();
    let anchors = model.anchors(8).unwrap();
    let targets = SupervisionTargets::new(&target, &anchors, &LossConfig::default());
    let (encoder, backbone, adapters, head) = (&model.encoder, &model.backbone, &model.adapters, &model.head);
    check_all(&mut model.store, DEFAULT_STEP, |g, s| {
        let q = encoder.encode(g, s, &[1, 4, 7])?;
        let prefix = backbone.forward_prefix(g, s, g.constant(frames.clone()), true)?;
        let (x_b, outers) = backbone.forward_tail(g, s, prefix, q, adapters)?;
        let out = head.forward(g, s, aggregate(x_b, &outers)?, q, &anchors)?;
        Ok(total_loss(&out, &targets)?.total)
    })
    .unwrap()
}
