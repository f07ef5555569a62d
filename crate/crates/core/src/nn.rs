//! Small parameter bundles shared by the model components.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Conv3dSpec, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Init {
    /// `U(-1/√fan_in, 1/√fan_in)`.
    FanIn,
    Zero,
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

pub(crate) fn init_tensor(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, init: Init) -> Tensor {
    match init {
        Init::FanIn => uniform(rng, shape, 1.0 / (fan_in as f64).sqrt()),
        Init::Zero => Tensor::zeros(shape),
    }
}

/// Fully connected layer over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        n_out: usize,
        n_in: usize,
        rng: &mut ChaCha8Rng,
        init: Init,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init_tensor(rng, &[n_out, n_in], n_in, init))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[n_out]))?;
        Ok(Self { weight, bias })
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        x.linear(g.param(store, self.weight), Some(g.param(store, self.bias)))
    }
}

/// 3-D convolution with bias and fixed stride/padding.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv3dSpec,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        c_out: usize,
        c_in: usize,
        kernel: [usize; 3],
        spec: Conv3dSpec,
        rng: &mut ChaCha8Rng,
        init: Init,
    ) -> Result<Self> {
        let fan_in = c_in * kernel.iter().product::<usize>();
        let shape = [c_out, c_in, kernel[0], kernel[1], kernel[2]];
        let weight = store.add(format!("{name}.weight"), init_tensor(rng, &shape, fan_in, init))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]))?;
        Ok(Self { weight, bias, spec })
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        x.conv3d(g.param(store, self.weight), Some(g.param(store, self.bias)), self.spec)
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.value(self.weight).shape()[0]
    }
}
