//! Spatial and lexical augmentations. None of them touches the time axis,
//! so ground-truth segments stay valid.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageAugment {
    /// Random crop window `[h, w]`, resized back by nearest neighbour.
    pub crop: Option<[usize; 2]>,
    pub hflip: bool,
    pub rotate90: bool,
    pub photometric: bool,
}

impl ImageAugment {
    pub fn is_identity(&self) -> bool {
        self.crop.is_none() && !self.hflip && !self.rotate90 && !self.photometric
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextAugment {
    Swap,
    Insert,
    Replace,
}

fn dims(frames: &Tensor) -> (usize, usize, usize, usize) {
    let s = frames.shape();
    (s[0], s[1], s[2], s[3])
}

/// Reverses the width axis of `[c, T, H, W]` frames.
pub fn flip_width(frames: &Tensor) -> Tensor {
    let (_, _, _, w) = dims(frames);
    let data = frames
        .data()
        .chunks(w)
        .flat_map(|row| row.iter().rev().copied())
        .collect();
    Tensor::from_parts(frames.shape().to_vec(), data)
}

/// `a·x + b` on every element.
pub fn photometric(frames: &Tensor, scale: f64, shift: f64) -> Tensor {
    let data = frames.data().iter().map(|v| scale * v + shift).collect();
    Tensor::from_parts(frames.shape().to_vec(), data)
}

fn remap_planes(frames: &Tensor, out_hw: (usize, usize), src: impl Fn(usize, usize) -> (usize, usize)) -> Tensor {
    let (c, t, h, w) = dims(frames);
    let (oh, ow) = out_hw;
    let mut data = Vec::with_capacity(c * t * oh * ow);
    for plane in frames.data().chunks(h * w) {
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = src(y, x);
                data.push(plane[sy * w + sx]);
            }
        }
    }
    Tensor::from_parts(vec![c, t, oh, ow], data)
}

fn rotate_quarter(frames: &Tensor) -> Tensor {
    let (_, _, h, w) = dims(frames);
    // 90° counter-clockwise: out[y][x] = in[x][w-1-y], output is [w, h].
    remap_planes(frames, (w, h), |y, x| (x, w - 1 - y))
}

/// Applies the selected spatial augmentations with randomness from `seed`.
pub fn augment_image(frames: &Tensor, ops: &ImageAugment, seed: u64) -> Result<Tensor> {
    let (_, _, h, w) = dims(frames);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = frames.clone();
    if let Some([ch, cw]) = ops.crop {
        if ch == 0 || cw == 0 || ch > h || cw > w {
            return Err(config_err(format!("crop {ch}x{cw} does not fit {h}x{w} frames")));
        }
        let y0 = rng.random_range(0..=h - ch);
        let x0 = rng.random_range(0..=w - cw);
        out = remap_planes(&out, (h, w), |y, x| (y0 + y * ch / h, x0 + x * cw / w));
    }
    if ops.hflip && rng.random_bool(0.5) {
        out = flip_width(&out);
    }
    if ops.rotate90 {
        // Odd quarter-turns would transpose non-square frames.
        let k = if h == w {
            rng.random_range(0..4)
        } else {
            2 * rng.random_range(0..2)
        };
        for _ in 0..k {
            out = rotate_quarter(&out);
        }
    }
    if ops.photometric {
        let a = rng.random_range(0.8..=1.2);
        let b = rng.random_range(-0.1..=0.1);
        out = photometric(&out, a, b);
    }
    Ok(out)
}

/// Lexical augmentation. Inserted words come from `insert_pool`; replacement
/// only fires on tokens that have a synonym. Preconditions that are not met
/// make the call a no-op.
pub fn augment_text(
    tokens: &[usize],
    kind: TextAugment,
    synonyms: &BTreeMap<usize, usize>,
    insert_pool: &[usize],
    seed: u64,
) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = tokens.to_vec();
    match kind {
        TextAugment::Swap => {
            if out.len() >= 2 {
                let i = rng.random_range(0..out.len());
                let mut j = rng.random_range(0..out.len() - 1);
                if j >= i {
                    j += 1;
                }
                out.swap(i, j);
            }
        }
        TextAugment::Insert => {
            if !insert_pool.is_empty() {
                let word = insert_pool[rng.random_range(0..insert_pool.len())];
                let at = rng.random_range(0..=out.len());
                out.insert(at, word);
            }
        }
        TextAugment::Replace => {
            if !out.is_empty() {
                let i = rng.random_range(0..out.len());
                if let Some(&syn) = synonyms.get(&out[i]) {
                    out[i] = syn;
                }
            }
        }
    }
    out
}
