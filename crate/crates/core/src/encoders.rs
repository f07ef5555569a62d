//! Sentence encoder (embedding table + mean pooling) and a toy 3-D
//! convolutional video backbone with adapter insertion points.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result, TsgError};
use crate::nn::{Conv3d, Init};
use crate::scada::{ScadaBlock, NORM_EPS};
use crate::tensor::{Activation, Conv3dSpec, Graph, ParamId, ParamStore, Tensor, Var};

pub const EMBEDDING_PARAM: &str = "encoder.embedding";
pub const BACKBONE_PREFIX: &str = "backbone.";

#[derive(Clone, Debug)]
pub struct SentenceEncoder {
    pub embedding: ParamId,
    pub dim: usize,
}

impl SentenceEncoder {
    pub fn new(store: &mut ParamStore, vocab: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let data = (0..vocab * dim).map(|_| StandardNormal.sample(rng)).collect();
        let embedding = store.add(EMBEDDING_PARAM, Tensor::new(vec![vocab, dim], data)?)?;
        Ok(Self { embedding, dim })
    }

    /// Mean of the token embeddings, `[d]`.
    pub fn encode<'g>(&self, g: &'g Graph, store: &ParamStore, tokens: &[usize]) -> Result<Var<'g>> {
        if tokens.is_empty() {
            return Err(TsgError::Input("empty token sequence".into()));
        }
        g.param(store, self.embedding).gather_mean(tokens)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Output channel width of every block; the last equals the model width.
    pub widths: Vec<usize>,
    /// Blocks whose convolution halves the spatial size.
    pub spatial_stride_blocks: Vec<usize>,
    /// Temporal and spatial extent of every block's (odd) kernel.
    pub kernel: [usize; 2],
    pub activation: Activation,
    /// Exclude block parameters from training.
    pub frozen: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: vec![8, 16, 16, 16],
            spatial_stride_blocks: vec![0, 1],
            kernel: [3, 3],
            activation: Activation::Gelu,
            frozen: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VideoBackbone {
    pub blocks: Vec<Conv3d>,
    pub widths: Vec<usize>,
    pub insertion_points: Vec<usize>,
    pub activation: Activation,
    pub frozen: bool,
}

impl VideoBackbone {
    pub fn new(
        store: &mut ParamStore,
        in_channels: usize,
        dim: usize,
        config: &BackboneConfig,
        insertion_points: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if config.widths.last() != Some(&dim) {
            return Err(config_err(format!(
                "backbone widths {:?} must end at the model width {dim}",
                config.widths
            )));
        }
        let [kt, ks] = config.kernel;
        if kt % 2 == 0 || ks % 2 == 0 {
            return Err(config_err(format!("backbone kernel {:?} must be odd", config.kernel)));
        }
        if let Some(bad) = config.spatial_stride_blocks.iter().find(|&&b| b >= config.widths.len()) {
            return Err(config_err(format!("spatial stride block {bad} does not exist")));
        }
        if insertion_points.windows(2).any(|w| w[0] >= w[1])
            || insertion_points.iter().any(|&p| p >= config.widths.len())
        {
            return Err(config_err(format!(
                "insertion points {insertion_points:?} must be increasing block indices below {}",
                config.widths.len()
            )));
        }
        let mut blocks = Vec::with_capacity(config.widths.len());
        let mut c_in = in_channels;
        for (i, &c_out) in config.widths.iter().enumerate() {
            let s = if config.spatial_stride_blocks.contains(&i) {
                2
            } else {
                1
            };
            let spec = Conv3dSpec::new([1, s, s], [kt / 2, ks / 2, ks / 2]);
            blocks.push(Conv3d::new(
                store,
                &format!("{BACKBONE_PREFIX}{i}"),
                c_out,
                c_in,
                [kt, ks, ks],
                spec,
                rng,
                Init::FanIn,
            )?);
            c_in = c_out;
        }
        store.set_trainable_prefix(BACKBONE_PREFIX, !config.frozen);
        Ok(Self {
            blocks,
            widths: config.widths.clone(),
            insertion_points: insertion_points.to_vec(),
            activation: config.activation,
            frozen: config.frozen,
        })
    }

    pub fn dim(&self) -> usize {
        *self.widths.last().expect("backbone has blocks")
    }

    /// Channel width seen by the adapter at each insertion point.
    pub fn insertion_widths(&self) -> Vec<usize> {
        self.insertion_points.iter().map(|&p| self.widths[p]).collect()
    }

    fn block<'g>(&self, g: &'g Graph, store: &ParamStore, i: usize, x: Var<'g>) -> Result<Var<'g>> {
        Ok(self.blocks[i]
            .forward(g, store, x)?
            .layer_norm(0, NORM_EPS)?
            .activation(self.activation))
    }

    /// Index of the last block whose output does not depend on the query.
    fn prefix_end(&self, with_adapters: bool) -> usize {
        match (with_adapters, self.insertion_points.first()) {
            (true, Some(&p)) => p,
            _ => self.blocks.len() - 1,
        }
    }

    /// Runs the query-independent blocks, up to and including the first
    /// insertion point (or every block when no adapters are used).
    pub fn forward_prefix<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        frames: Var<'g>,
        with_adapters: bool,
    ) -> Result<Var<'g>> {
        let mut x = frames;
        for i in 0..=self.prefix_end(with_adapters) {
            x = self.block(g, store, i, x)?;
        }
        Ok(x)
    }

    /// Continues from a prefix feature: adapters at every insertion point,
    /// remaining blocks, then spatial pooling. Returns `(x_b, outers)`.
    pub fn forward_tail<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        prefix: Var<'g>,
        q: Var<'g>,
        adapters: &[ScadaBlock],
    ) -> Result<(Var<'g>, Vec<Var<'g>>)> {
        self.check_adapters(adapters)?;
        let start = self.prefix_end(!adapters.is_empty());
        let mut x = prefix;
        let mut outers = Vec::with_capacity(adapters.len());
        for i in start..self.blocks.len() {
            if i > start {
                x = self.block(g, store, i, x)?;
            }
            if let Some(k) = self
                .insertion_points
                .iter()
                .position(|&p| p == i)
                .filter(|_| !adapters.is_empty())
            {
                let adapter = &adapters[k];
                let channels = x.shape()[0];
                if channels != adapter.channels {
                    return Err(dim_err(format!(
                        "block {i} emits {channels} channels but {} expects {}",
                        adapter.name, adapter.channels
                    )));
                }
                outers.push(adapter.outer_branch(g, store, x, q)?);
                x = adapter.inner_branch(g, store, x, q)?;
            }
        }
        Ok((x.mean_trailing(2)?, outers))
    }

    /// `frames: [c0, T, H, W]` to `(x_b: [d, T], outers)`.
    pub fn encode_video<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        frames: Var<'g>,
        q: Var<'g>,
        adapters: &[ScadaBlock],
    ) -> Result<(Var<'g>, Vec<Var<'g>>)> {
        self.check_adapters(adapters)?;
        let prefix = self.forward_prefix(g, store, frames, !adapters.is_empty())?;
        self.forward_tail(g, store, prefix, q, adapters)
    }

    fn check_adapters(&self, adapters: &[ScadaBlock]) -> Result<()> {
        if !adapters.is_empty() && adapters.len() != self.insertion_points.len() {
            return Err(config_err(format!(
                "{} adapters for {} insertion points",
                adapters.len(),
                self.insertion_points.len()
            )));
        }
        Ok(())
    }
}
