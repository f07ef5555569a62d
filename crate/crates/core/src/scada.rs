//! Sentence-conditioned adapter.
//!
//! Each block attaches to a backbone feature `x: [c, t, h, w]` and a pooled
//! sentence embedding `q: [d]` and has two paths:
//!
//! * inner: `x + σ(FC_up(DWConv1D(Norm(σ(FC_down(x)) ⊗ FC_s(q)))))`, fed back
//!   into the backbone. The depthwise convolution runs along time separately
//!   at every spatial location.
//! * outer: `Pool(σ(Conv_up(Norm(σ(Conv_down(x)) ⊗ FC_s'(q)))))`, a `[d, t]`
//!   skip feature that bypasses the rest of the backbone.
//!
//! `FC_s(q)` is one vector per block, broadcast over every position. `FC_up`
//! and `Conv_up` start at zero, so a fresh block is the identity on the
//! inner path and contributes zeros on the outer path.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::nn::{init_tensor, Conv3d, Init, Linear};
use crate::tensor::{Activation, Conv3dSpec, Graph, ParamId, ParamStore, Var};

/// Epsilon of every affine-free normalization in the model.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScadaConfig {
    /// Channel reduction ratio γ.
    pub gamma: usize,
    /// Spatial compression ratio β of the outer path.
    pub beta: usize,
    /// Temporal kernel of the inner depthwise convolution.
    pub kernel: usize,
    /// Backbone block indices after which an adapter is attached.
    pub insertion_points: Vec<usize>,
    /// Replace the sentence projection by ones in both paths.
    pub text_free: bool,
    pub activation: Activation,
}

impl Default for ScadaConfig {
    fn default() -> Self {
        Self {
            gamma: 4,
            beta: 2,
            kernel: 3,
            insertion_points: vec![1, 2],
            text_free: false,
            activation: Activation::Gelu,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScadaBlock {
    pub name: String,
    pub channels: usize,
    pub reduced: usize,
    pub beta: usize,
    pub text_free: bool,
    pub activation: Activation,
    pub fc_down: Linear,
    pub fc_up: Linear,
    pub fc_sentence: Linear,
    pub dw_kernel: ParamId,
    pub conv_down: Conv3d,
    pub fc_sentence_outer: Linear,
    pub conv_up: Conv3d,
}

impl ScadaBlock {
    /// `channels` is the width of the backbone feature at the insertion point,
    /// `text_dim` the sentence embedding width (also the outer output width).
    pub fn new(
        store: &mut ParamStore,
        index: usize,
        channels: usize,
        text_dim: usize,
        config: &ScadaConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if config.gamma == 0 || !channels.is_multiple_of(config.gamma) {
            return Err(config_err(format!(
                "gamma {} does not divide {channels} channels",
                config.gamma
            )));
        }
        if config.beta == 0 {
            return Err(config_err("scada.beta must be positive"));
        }
        if config.kernel.is_multiple_of(2) {
            return Err(config_err(format!("scada.kernel {} must be odd", config.kernel)));
        }
        let reduced = channels / config.gamma;
        let name = format!("scada.{index}");
        let fc_down = Linear::new(store, &format!("{name}.fc_down"), reduced, channels, rng, Init::FanIn)?;
        let fc_sentence = Linear::new(
            store,
            &format!("{name}.fc_sentence"),
            reduced,
            text_dim,
            rng,
            Init::FanIn,
        )?;
        let dw_kernel = store.add(
            format!("{name}.dwconv.weight"),
            init_tensor(rng, &[reduced, config.kernel], config.kernel, Init::FanIn),
        )?;
        let fc_up = Linear::new(store, &format!("{name}.fc_up"), channels, reduced, rng, Init::Zero)?;
        let conv_down = Conv3d::new(
            store,
            &format!("{name}.conv_down"),
            reduced,
            channels,
            [1, config.beta, config.beta],
            Conv3dSpec::new([1, config.beta, config.beta], [0, 0, 0]),
            rng,
            Init::FanIn,
        )?;
        let fc_sentence_outer = Linear::new(
            store,
            &format!("{name}.fc_sentence_outer"),
            reduced,
            text_dim,
            rng,
            Init::FanIn,
        )?;
        store.value_mut(fc_sentence.bias).fill(1.0);
        store.value_mut(fc_sentence_outer.bias).fill(1.0);
        let conv_up = Conv3d::new(
            store,
            &format!("{name}.conv_up"),
            text_dim,
            reduced,
            [1, 3, 3],
            Conv3dSpec::new([1, 2, 2], [0, 1, 1]),
            rng,
            Init::Zero,
        )?;
        Ok(Self {
            name,
            channels,
            reduced,
            beta: config.beta,
            text_free: config.text_free,
            activation: config.activation,
            fc_down,
            fc_up,
            fc_sentence,
            dw_kernel,
            conv_down,
            fc_sentence_outer,
            conv_up,
        })
    }

    fn check_input(&self, x: &Var<'_>) -> Result<[usize; 4]> {
        let s = x.shape();
        if s.len() != 4 || s[0] != self.channels {
            return Err(dim_err(format!(
                "{} expects [{}, t, h, w] features, got {s:?}",
                self.name, self.channels
            )));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Inner path; output has the shape of `x`.
    pub fn inner_branch<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>, q: Var<'g>) -> Result<Var<'g>> {
        let [c, t, h, w] = self.check_input(&x)?;
        let r = self.reduced;
        let positions = t * h * w;
        let rows = x.permute(&[1, 2, 3, 0])?.reshape(&[positions, c])?;
        let down = self.fc_down.forward(g, store, rows)?.activation(self.activation);
        let modulated = if self.text_free {
            down
        } else {
            let s = self.fc_sentence.forward(g, store, q)?;
            down.mul_broadcast(s, 1)?
        };
        let normed = modulated.layer_norm(1, NORM_EPS)?;
        let temporal = normed
            .reshape(&[t, h, w, r])?
            .permute(&[1, 2, 3, 0])?
            .dwconv1d(g.param(store, self.dw_kernel))?
            .permute(&[3, 0, 1, 2])?
            .reshape(&[positions, r])?;
        let up = self
            .fc_up
            .forward(g, store, temporal)?
            .activation(self.activation)
            .reshape(&[t, h, w, c])?
            .permute(&[3, 0, 1, 2])?;
        x.add(up)
    }

    /// Outer path; returns `[d, t]`.
    pub fn outer_branch<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>, q: Var<'g>) -> Result<Var<'g>> {
        let [_, _, h, w] = self.check_input(&x)?;
        if h % self.beta != 0 || w % self.beta != 0 {
            return Err(config_err(format!(
                "{}: beta {} does not divide spatial size {h}x{w}",
                self.name, self.beta
            )));
        }
        let down = self.conv_down.forward(g, store, x)?.activation(self.activation);
        let modulated = if self.text_free {
            down
        } else {
            let s = self.fc_sentence_outer.forward(g, store, q)?;
            down.mul_broadcast(s, 0)?
        };
        let normed = modulated.layer_norm(0, NORM_EPS)?;
        self.conv_up
            .forward(g, store, normed)?
            .activation(self.activation)
            .mean_trailing(2)
    }

    pub fn param_prefix(&self) -> String {
        format!("{}.", self.name)
    }
}

/// `F = Norm(x_b + Σ outers)` over the channel axis of `[d, t]` features.
pub fn aggregate<'g>(x_b: Var<'g>, outers: &[Var<'g>]) -> Result<Var<'g>> {
    let mut acc = x_b;
    for &o in outers {
        if o.shape() != x_b.shape() {
            return Err(dim_err(format!(
                "aggregate: outer feature {:?} does not match backbone output {:?}",
                o.shape(),
                x_b.shape()
            )));
        }
        acc = acc.add(o)?;
    }
    acc.layer_norm(0, NORM_EPS)
}
