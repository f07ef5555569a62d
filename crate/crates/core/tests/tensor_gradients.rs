//! Finite-difference checks for every differentiable tensor operation.

mod common;

use common::gradients;
use common::random_tensor as random;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsg_core::tensor::{Activation, Conv3dSpec, Graph};

#[test]
fn linear_gradient() {
    let r = gradients::linear();
    assert!(r.passes(1e-6), "{r:?}");
}

#[test]
fn dwconv1d_gradient() {
    let r = gradients::dwconv1d();
    assert!(r.passes(1e-6), "{r:?}");
}

#[test]
fn conv3d_gradient() {
    let r = gradients::conv3d();
    assert!(r.passes(1e-6), "{r:?}");
}

#[test]
fn layer_norm_gradient() {
    let r = gradients::layer_norm();
    assert!(r.passes(1e-5), "{r:?}");
}

#[test]
fn activation_gradients() {
    for kind in [Activation::Gelu, Activation::Sigmoid, Activation::Tanh] {
        let r = gradients::activation(kind);
        assert!(r.passes(1e-6), "{kind:?}: {r:?}");
    }
}

#[test]
fn structural_op_gradients() {
    let r = gradients::structural();
    assert!(r.passes(1e-6), "{r:?}");
}

#[test]
fn lstm_gradient_both_directions() {
    for reverse in [false, true] {
        let r = gradients::lstm(reverse);
        assert!(r.passes(1e-6), "reverse={reverse}: {r:?}");
    }
}

#[test]
fn ops_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&mut rng, &[2, 4, 4, 4], 1.0);
    let k = random(&mut rng, &[3, 2, 3, 3, 3], 1.0);
    let run = || {
        let g = Graph::new();
        let y = g
            .constant(x.clone())
            .conv3d(g.constant(k.clone()), None, Conv3dSpec::new([1, 1, 1], [1, 1, 1]))
            .unwrap()
            .layer_norm(0, 1e-5)
            .unwrap()
            .gelu();
        y.value().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn layer_norm_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = Graph::new();
    let y = g
        .constant(random(&mut rng, &[6, 10], 1.0))
        .layer_norm(1, 1e-5)
        .unwrap()
        .value();
    for row in y.data().chunks(10) {
        let mean = row.iter().sum::<f64>() / 10.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10.0;
        assert!(mean.abs() < 1e-8);
        // epsilon shrinks the variance by var/(var+eps)
        assert!((var - 1.0).abs() < 1e-3, "variance {var}");
    }
}
