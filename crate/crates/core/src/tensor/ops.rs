//! Differentiable operations on [`Var`].

use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::graph::Var;
use super::kernels::{dot, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, ConvGeom};
use super::Tensor;
use crate::error::{config_err, dim_err, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// Tanh-approximated GELU.
    Gelu,
    Sigmoid,
    Tanh,
}

impl FromStr for Activation {
    type Err = crate::error::TsgError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            other => Err(config_err(format!("unknown activation {other:?}"))),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at input `x` given output `y = apply(x)`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                let th = u.tanh();
                let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Stride and zero padding of a 3-D convolution, ordered (t, h, w).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3dSpec {
    pub fn new(stride: [usize; 3], pad: [usize; 3]) -> Self {
        Self { stride, pad }
    }

    pub fn unit() -> Self {
        Self::new([1, 1, 1], [0, 0, 0])
    }

    /// Output extents for the given input and kernel extents.
    pub fn output_dims(&self, input: [usize; 3], kernel: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            if self.stride[a] == 0 {
                return Err(config_err("conv3d stride must be positive"));
            }
            let padded = input[a] + 2 * self.pad[a];
            if padded < kernel[a] {
                return Err(dim_err(format!(
                    "conv3d output volume is empty: input {input:?}, kernel {kernel:?}, pad {:?}",
                    self.pad
                )));
            }
            out[a] = (padded - kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }
}

/// `(outer, axis_len, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for a in (0..rank.saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * shape[a + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for a in (0..rank).rev() {
            idx[a] += 1;
            offset += src_strides[a];
            if idx[a] < out_shape[a] {
                break;
            }
            offset -= src_strides[a] * out_shape[a];
            idx[a] = 0;
        }
    }
    (out, out_shape)
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self
            .graph
            .record(out, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.graph.record(out, &[self, other], |g, _| {
            let neg = g.data().iter().map(|v| -v).collect();
            vec![Some(g.clone()), Some(Tensor::from_parts(g.shape().to_vec(), neg))]
        }))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.graph.record(out, &[self, other], move |g, needs| {
            let ga = needs[0].then(|| {
                let d = g.data().iter().zip(b.data()).map(|(g, y)| g * y).collect();
                Tensor::from_parts(g.shape().to_vec(), d)
            });
            let gb = needs[1].then(|| {
                let d = g.data().iter().zip(a.data()).map(|(g, x)| g * x).collect();
                Tensor::from_parts(g.shape().to_vec(), d)
            });
            vec![ga, gb]
        }))
    }

    pub fn scale(self, factor: f64) -> Var<'g> {
        let a = self.value();
        let data = a.data().iter().map(|x| x * factor).collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        self.graph.record(out, &[self], move |g, _| {
            let d = g.data().iter().map(|v| v * factor).collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), d))]
        })
    }

    pub fn sum(self) -> Var<'g> {
        let a = self.value();
        let shape = a.shape().to_vec();
        let total = a.data().iter().sum();
        self.graph.record(Tensor::scalar(total), &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        let original = a.shape().to_vec();
        let out = (*a).clone().reshaped(shape)?;
        Ok(self.graph.record(out, &[self], move |g, _| {
            vec![Some(Tensor::from_parts(original.clone(), g.data().to_vec()))]
        }))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        let rank = a.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes
                .iter()
                .any(|&ax| ax >= rank || std::mem::replace(&mut seen[ax], true))
        {
            return Err(dim_err(format!(
                "permute axes {axes:?} invalid for shape {:?}",
                a.shape()
            )));
        }
        let (data, shape) = permute_data(a.data(), a.shape(), axes);
        let mut inverse = vec![0; rank];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        Ok(self
            .graph
            .record(Tensor::from_parts(shape, data), &[self], move |g, _| {
                let (d, s) = permute_data(g.data(), g.shape(), &inverse);
                vec![Some(Tensor::from_parts(s, d))]
            }))
    }

    /// `y[..., o] = Σ_i x[..., i]·w[o, i] + b[o]`.
    pub fn linear(self, weight: Var<'g>, bias: Option<Var<'g>>) -> Result<Var<'g>> {
        let x = self.value();
        let w = weight.value();
        if w.rank() != 2 || x.shape().last() != Some(&w.shape()[1]) {
            return Err(dim_err(format!(
                "linear: input {:?} incompatible with weight {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let (n_out, n_in) = (w.shape()[0], w.shape()[1]);
        let rows = x.numel() / n_in;
        let mut out = vec![0.0; rows * n_out];
        matmul_a_bt_acc(x.data(), w.data(), &mut out, rows, n_in, n_out);
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [n_out] {
                return Err(dim_err(format!(
                    "linear: bias {:?} does not match weight {:?}",
                    bv.shape(),
                    w.shape()
                )));
            }
            for row in out.chunks_mut(n_out) {
                for (o, bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
            parents.push(b);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = n_out;
        let has_bias = bias.is_some();
        Ok(self
            .graph
            .record(Tensor::from_parts(shape, out), &parents, move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut d = vec![0.0; rows * n_in];
                    matmul_acc(g.data(), w.data(), &mut d, rows, n_out, n_in);
                    Tensor::from_parts(x.shape().to_vec(), d)
                });
                let gw = needs[1].then(|| {
                    let mut d = vec![0.0; n_out * n_in];
                    matmul_at_b_acc(g.data(), x.data(), &mut d, n_out, rows, n_in);
                    Tensor::from_parts(vec![n_out, n_in], d)
                });
                let mut grads = vec![gx, gw];
                if has_bias {
                    grads.push(needs[2].then(|| {
                        let mut d = vec![0.0; n_out];
                        for row in g.data().chunks(n_out) {
                            for (acc, v) in d.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        Tensor::from_parts(vec![n_out], d)
                    }));
                }
                grads
            }))
    }

    /// Multiplies every slice along `axis` by the matching entry of `v`.
    pub fn mul_broadcast(self, v: Var<'g>, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        let vv = v.value();
        if axis >= x.rank() || vv.shape() != [x.shape()[axis]] {
            return Err(dim_err(format!(
                "mul_broadcast: vector {:?} does not match axis {axis} of {:?}",
                vv.shape(),
                x.shape()
            )));
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut out = x.data().to_vec();
        for o in 0..outer {
            for a in 0..n {
                let s = vv.data()[a];
                let base = (o * n + a) * inner;
                out[base..base + inner].iter_mut().for_each(|e| *e *= s);
            }
        }
        Ok(self.graph.record(
            Tensor::from_parts(x.shape().to_vec(), out),
            &[self, v],
            move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut d = g.data().to_vec();
                    for o in 0..outer {
                        for a in 0..n {
                            let s = vv.data()[a];
                            let base = (o * n + a) * inner;
                            d[base..base + inner].iter_mut().for_each(|e| *e *= s);
                        }
                    }
                    Tensor::from_parts(g.shape().to_vec(), d)
                });
                let gv = needs[1].then(|| {
                    let mut d = vec![0.0; n];
                    for o in 0..outer {
                        for (a, acc) in d.iter_mut().enumerate() {
                            let base = (o * n + a) * inner;
                            *acc += dot(&g.data()[base..base + inner], &x.data()[base..base + inner]);
                        }
                    }
                    Tensor::from_parts(vec![n], d)
                });
                vec![gx, gv]
            },
        ))
    }

    /// Affine-free normalization to zero mean and unit variance along `axis`.
    pub fn layer_norm(self, axis: usize, eps: f64) -> Result<Var<'g>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(dim_err(format!(
                "layer_norm: axis {axis} out of range for {:?}",
                x.shape()
            )));
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; outer * inner];
        let xd = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * n + a) * inner + i;
                let mean = (0..n).map(|a| xd[at(a)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|a| (xd[at(a)] - mean).powi(2)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = inv;
                for a in 0..n {
                    xhat[at(a)] = (xd[at(a)] - mean) * inv;
                }
            }
        }
        let shape = x.shape().to_vec();
        let saved = Arc::new(xhat.clone());
        Ok(self
            .graph
            .record(Tensor::from_parts(shape, xhat), &[self], move |g, _| {
                let gd = g.data();
                let mut dx = vec![0.0; gd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * n + a) * inner + i;
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for a in 0..n {
                            mean_g += gd[at(a)];
                            mean_gx += gd[at(a)] * saved[at(a)];
                        }
                        mean_g /= n as f64;
                        mean_gx /= n as f64;
                        let inv = inv_std[o * inner + i];
                        for a in 0..n {
                            dx[at(a)] = inv * (gd[at(a)] - mean_g - saved[at(a)] * mean_gx);
                        }
                    }
                }
                vec![Some(Tensor::from_parts(g.shape().to_vec(), dx))]
            }))
    }

    pub fn activation(self, kind: Activation) -> Var<'g> {
        let x = self.value();
        let y: Vec<f64> = x.data().iter().map(|&v| kind.apply(v)).collect();
        let saved_y = Arc::new(y.clone());
        self.graph
            .record(Tensor::from_parts(x.shape().to_vec(), y), &[self], move |g, _| {
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(saved_y.iter())
                    .map(|((g, &xv), &yv)| g * kind.derivative(xv, yv))
                    .collect();
                vec![Some(Tensor::from_parts(g.shape().to_vec(), d))]
            })
    }

    pub fn gelu(self) -> Var<'g> {
        self.activation(Activation::Gelu)
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.activation(Activation::Sigmoid)
    }

    pub fn tanh(self) -> Var<'g> {
        self.activation(Activation::Tanh)
    }

    /// Depthwise 1-D convolution over the last axis of `[..., channels, time]`
    /// with a `[channels, k]` kernel, `k` odd, zero padded to the same length.
    pub fn dwconv1d(self, kernel: Var<'g>) -> Result<Var<'g>> {
        let x = self.value();
        let kv = kernel.value();
        let rank = x.rank();
        if rank < 2 || kv.rank() != 2 || kv.shape()[0] != x.shape()[rank - 2] {
            return Err(dim_err(format!(
                "dwconv1d: input {:?} incompatible with kernel {:?}",
                x.shape(),
                kv.shape()
            )));
        }
        let (c, k) = (kv.shape()[0], kv.shape()[1]);
        if k % 2 == 0 {
            return Err(config_err(format!("dwconv1d kernel size {k} must be odd")));
        }
        let t = x.shape()[rank - 1];
        let batch = x.numel() / (c * t);
        let pad = (k - 1) / 2;
        let mut out = vec![0.0; x.numel()];
        for b in 0..batch {
            for ch in 0..c {
                let base = (b * c + ch) * t;
                let taps = &kv.data()[ch * k..(ch + 1) * k];
                for tau in 0..t {
                    let mut s = 0.0;
                    for (j, &w) in taps.iter().enumerate() {
                        let src = tau as isize + j as isize - pad as isize;
                        if src >= 0 && (src as usize) < t {
                            s += w * x.data()[base + src as usize];
                        }
                    }
                    out[base + tau] = s;
                }
            }
        }
        Ok(self.graph.record(
            Tensor::from_parts(x.shape().to_vec(), out),
            &[self, kernel],
            move |g, needs| {
                let gd = g.data();
                let mut dx = needs[0].then(|| vec![0.0; x.numel()]);
                let mut dk = needs[1].then(|| vec![0.0; c * k]);
                for b in 0..batch {
                    for ch in 0..c {
                        let base = (b * c + ch) * t;
                        for tau in 0..t {
                            let gv = gd[base + tau];
                            for j in 0..k {
                                let src = tau as isize + j as isize - pad as isize;
                                if src < 0 || src as usize >= t {
                                    continue;
                                }
                                let src = base + src as usize;
                                if let Some(dx) = dx.as_mut() {
                                    dx[src] += kv.data()[ch * k + j] * gv;
                                }
                                if let Some(dk) = dk.as_mut() {
                                    dk[ch * k + j] += gv * x.data()[src];
                                }
                            }
                        }
                    }
                }
                vec![
                    dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
                    dk.map(|d| Tensor::from_parts(vec![c, k], d)),
                ]
            },
        ))
    }

    /// 3-D cross-correlation of a `[c_in, t, h, w]` input with a
    /// `[c_out, c_in, kt, kh, kw]` kernel.
    pub fn conv3d(self, kernel: Var<'g>, bias: Option<Var<'g>>, spec: Conv3dSpec) -> Result<Var<'g>> {
        let x = self.value();
        let kv = kernel.value();
        if x.rank() != 4 || kv.rank() != 5 || kv.shape()[1] != x.shape()[0] {
            return Err(dim_err(format!(
                "conv3d: input {:?} incompatible with kernel {:?}",
                x.shape(),
                kv.shape()
            )));
        }
        let ks = kv.shape();
        let (c_out, c_in) = (ks[0], ks[1]);
        let input = [x.shape()[1], x.shape()[2], x.shape()[3]];
        let kernel_dims = [ks[2], ks[3], ks[4]];
        let output = spec.output_dims(input, kernel_dims)?;
        let geom = ConvGeom {
            c_in,
            input,
            kernel: kernel_dims,
            stride: spec.stride,
            pad: spec.pad,
            output,
        };
        let (rows, cols) = (geom.rows(), geom.cols());
        let col = geom.im2col(x.data());
        let mut out = vec![0.0; c_out * cols];
        matmul_acc(kv.data(), &col, &mut out, c_out, rows, cols);
        let mut parents = vec![self, kernel];
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [c_out] {
                return Err(dim_err(format!(
                    "conv3d: bias {:?} does not match {c_out} output channels",
                    bv.shape()
                )));
            }
            for (row, bb) in out.chunks_mut(cols).zip(bv.data()) {
                row.iter_mut().for_each(|o| *o += bb);
            }
            parents.push(b);
        }
        let has_bias = bias.is_some();
        let shape = vec![c_out, output[0], output[1], output[2]];
        let x_shape = x.shape().to_vec();
        let k_shape = ks.to_vec();
        Ok(self
            .graph
            .record(Tensor::from_parts(shape, out), &parents, move |g, needs| {
                let gd = g.data();
                let gx = needs[0].then(|| {
                    let mut dcol = vec![0.0; rows * cols];
                    matmul_at_b_acc(kv.data(), gd, &mut dcol, rows, c_out, cols);
                    let mut dx = vec![0.0; x_shape.iter().product()];
                    geom.col2im_acc(&dcol, &mut dx);
                    Tensor::from_parts(x_shape.clone(), dx)
                });
                let gk = needs[1].then(|| {
                    let mut dk = vec![0.0; c_out * rows];
                    matmul_a_bt_acc(gd, &col, &mut dk, c_out, cols, rows);
                    Tensor::from_parts(k_shape.clone(), dk)
                });
                let mut grads = vec![gx, gk];
                if has_bias {
                    grads.push(needs[2].then(|| {
                        let d = gd.chunks(cols).map(|row| row.iter().sum()).collect();
                        Tensor::from_parts(vec![c_out], d)
                    }));
                }
                grads
            }))
    }

    /// Averages over the last `n_axes` axes.
    pub fn mean_trailing(self, n_axes: usize) -> Result<Var<'g>> {
        let x = self.value();
        if n_axes == 0 || n_axes >= x.rank() {
            return Err(dim_err(format!(
                "mean_trailing: cannot reduce {n_axes} axes of {:?}",
                x.shape()
            )));
        }
        let keep = x.rank() - n_axes;
        let inner: usize = x.shape()[keep..].iter().product();
        let out_shape = x.shape()[..keep].to_vec();
        let out: Vec<f64> = x
            .data()
            .chunks(inner)
            .map(|c| c.iter().sum::<f64>() / inner as f64)
            .collect();
        let in_shape = x.shape().to_vec();
        Ok(self
            .graph
            .record(Tensor::from_parts(out_shape, out), &[self], move |g, _| {
                let scale = 1.0 / inner as f64;
                let d = g
                    .data()
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v * scale, inner))
                    .collect();
                vec![Some(Tensor::from_parts(in_shape.clone(), d))]
            }))
    }

    /// Concatenates `[.., p]` and `[.., q]` along the last axis.
    pub fn concat_last(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let (ra, rb) = (a.rank(), b.rank());
        if ra != rb || a.shape()[..ra - 1] != b.shape()[..rb - 1] {
            return Err(dim_err(format!(
                "concat_last: shapes {:?} and {:?} incompatible",
                a.shape(),
                b.shape()
            )));
        }
        let (p, q) = (a.shape()[ra - 1], b.shape()[rb - 1]);
        let rows = a.numel() / p;
        let mut out = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            out.extend_from_slice(&a.data()[r * p..(r + 1) * p]);
            out.extend_from_slice(&b.data()[r * q..(r + 1) * q]);
        }
        let mut shape = a.shape().to_vec();
        shape[ra - 1] = p + q;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self
            .graph
            .record(Tensor::from_parts(shape, out), &[self, other], move |g, _| {
                let mut da = Vec::with_capacity(rows * p);
                let mut db = Vec::with_capacity(rows * q);
                for row in g.data().chunks(p + q) {
                    da.extend_from_slice(&row[..p]);
                    db.extend_from_slice(&row[p..]);
                }
                vec![
                    Some(Tensor::from_parts(sa.clone(), da)),
                    Some(Tensor::from_parts(sb.clone(), db)),
                ]
            }))
    }

    /// Row means of a `[T, d]` input over half-open row ranges, giving `[L, d]`.
    pub fn segment_mean(self, ranges: &[(usize, usize)]) -> Result<Var<'g>> {
        let x = self.value();
        if x.rank() != 2 || ranges.is_empty() {
            return Err(dim_err(format!(
                "segment_mean: need [T, d] input and ranges, got {:?}",
                x.shape()
            )));
        }
        let (t, d) = (x.shape()[0], x.shape()[1]);
        if let Some(bad) = ranges.iter().find(|(s, e)| s >= e || *e > t) {
            return Err(dim_err(format!("segment_mean: range {bad:?} invalid for T={t}")));
        }
        let ranges = ranges.to_vec();
        let mut out = vec![0.0; ranges.len() * d];
        for (row, &(s, e)) in out.chunks_mut(d).zip(&ranges) {
            let inv = 1.0 / (e - s) as f64;
            for step in s..e {
                for (o, v) in row.iter_mut().zip(&x.data()[step * d..(step + 1) * d]) {
                    *o += v * inv;
                }
            }
        }
        let shape = vec![ranges.len(), d];
        Ok(self.graph.record(Tensor::from_parts(shape, out), &[self], move |g, _| {
            let mut dx = vec![0.0; t * d];
            for (row, &(s, e)) in g.data().chunks(d).zip(&ranges) {
                let inv = 1.0 / (e - s) as f64;
                for step in s..e {
                    for (o, v) in dx[step * d..(step + 1) * d].iter_mut().zip(row) {
                        *o += v * inv;
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![t, d], dx))]
        }))
    }

    /// Mean of the rows of a `[V, d]` table selected by `ids`.
    pub fn gather_mean(self, ids: &[usize]) -> Result<Var<'g>> {
        let table = self.value();
        if table.rank() != 2 || ids.is_empty() {
            return Err(dim_err(format!(
                "gather_mean: need a [V, d] table and ids, got {:?}",
                table.shape()
            )));
        }
        let (v, d) = (table.shape()[0], table.shape()[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(crate::error::TsgError::Input(format!(
                "token id {bad} outside vocabulary of {v}"
            )));
        }
        let ids = ids.to_vec();
        let inv = 1.0 / ids.len() as f64;
        let mut out = vec![0.0; d];
        for &i in &ids {
            for (o, e) in out.iter_mut().zip(&table.data()[i * d..(i + 1) * d]) {
                *o += e;
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self
            .graph
            .record(Tensor::from_parts(vec![d], out), &[self], move |g, _| {
                let mut dt = vec![0.0; v * d];
                for &i in &ids {
                    for (o, gv) in dt[i * d..(i + 1) * d].iter_mut().zip(g.data()) {
                        *o += gv * inv;
                    }
                }
                vec![Some(Tensor::from_parts(vec![v, d], dt))]
            }))
    }

    /// Single-direction LSTM over a `[T, in]` sequence. Gate order i, f, g, o.
    /// `w_ih: [4h, in]`, `w_hh: [4h, h]`, `bias: [4h]`. Returns `[T, h]`,
    /// indexed by time step regardless of direction.
    pub fn lstm(self, w_ih: Var<'g>, w_hh: Var<'g>, bias: Var<'g>, reverse: bool) -> Result<Var<'g>> {
        let x = self.value();
        let (wi, wh, bv) = (w_ih.value(), w_hh.value(), bias.value());
        if x.rank() != 2 || wi.rank() != 2 || wh.rank() != 2 {
            return Err(dim_err("lstm: expected rank-2 input and weights"));
        }
        let (t_len, n_in) = (x.shape()[0], x.shape()[1]);
        let hidden = wh.shape()[1];
        let g4 = 4 * hidden;
        if wi.shape() != [g4, n_in] || wh.shape() != [g4, hidden] || bv.shape() != [g4] {
            return Err(dim_err(format!(
                "lstm: input {:?}, w_ih {:?}, w_hh {:?}, bias {:?} inconsistent",
                x.shape(),
                wi.shape(),
                wh.shape(),
                bv.shape()
            )));
        }
        let mut pre = vec![0.0; t_len * g4];
        matmul_a_bt_acc(x.data(), wi.data(), &mut pre, t_len, n_in, g4);
        for row in pre.chunks_mut(g4) {
            for (p, b) in row.iter_mut().zip(bv.data()) {
                *p += b;
            }
        }
        let order: Vec<usize> = if reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        let mut gates = vec![0.0; t_len * g4];
        let mut cells = vec![0.0; t_len * hidden];
        let mut hs = vec![0.0; t_len * hidden];
        let mut h_prev = vec![0.0; hidden];
        let mut c_prev = vec![0.0; hidden];
        for &step in &order {
            let gate = &mut gates[step * g4..(step + 1) * g4];
            gate.copy_from_slice(&pre[step * g4..(step + 1) * g4]);
            for (r, gv) in gate.iter_mut().enumerate() {
                *gv += dot(&wh.data()[r * hidden..(r + 1) * hidden], &h_prev);
            }
            for j in 0..hidden {
                let i = sigmoid(gate[j]);
                let f = sigmoid(gate[hidden + j]);
                let gg = gate[2 * hidden + j].tanh();
                let o = sigmoid(gate[3 * hidden + j]);
                gate[j] = i;
                gate[hidden + j] = f;
                gate[2 * hidden + j] = gg;
                gate[3 * hidden + j] = o;
                let c = f * c_prev[j] + i * gg;
                cells[step * hidden + j] = c;
                hs[step * hidden + j] = o * c.tanh();
            }
            c_prev.copy_from_slice(&cells[step * hidden..(step + 1) * hidden]);
            h_prev.copy_from_slice(&hs[step * hidden..(step + 1) * hidden]);
        }
        let saved_h = hs.clone();
        Ok(self.graph.record(
            Tensor::from_parts(vec![t_len, hidden], hs),
            &[self, w_ih, w_hh, bias],
            move |g, needs| {
                let gd = g.data();
                let mut dpre = vec![0.0; t_len * g4];
                let mut dwh = vec![0.0; g4 * hidden];
                let mut dh_next = vec![0.0; hidden];
                let mut dc_next = vec![0.0; hidden];
                for (pos, &step) in order.iter().enumerate().rev() {
                    let prev = (pos > 0).then(|| order[pos - 1]);
                    let gate = &gates[step * g4..(step + 1) * g4];
                    let dp = &mut dpre[step * g4..(step + 1) * g4];
                    for j in 0..hidden {
                        let (i, f, gg, o) = (gate[j], gate[hidden + j], gate[2 * hidden + j], gate[3 * hidden + j]);
                        let c = cells[step * hidden + j];
                        let c_before = prev.map_or(0.0, |p| cells[p * hidden + j]);
                        let dh = gd[step * hidden + j] + dh_next[j];
                        let tc = c.tanh();
                        let d_o = dh * tc;
                        let dc = dh * o * (1.0 - tc * tc) + dc_next[j];
                        dp[j] = dc * gg * i * (1.0 - i);
                        dp[hidden + j] = dc * c_before * f * (1.0 - f);
                        dp[2 * hidden + j] = dc * i * (1.0 - gg * gg);
                        dp[3 * hidden + j] = d_o * o * (1.0 - o);
                        dc_next[j] = dc * f;
                    }
                    dh_next.iter_mut().for_each(|v| *v = 0.0);
                    for (r, &dpr) in dp.iter().enumerate() {
                        if dpr == 0.0 {
                            continue;
                        }
                        let wrow = &wh.data()[r * hidden..(r + 1) * hidden];
                        for (dn, w) in dh_next.iter_mut().zip(wrow) {
                            *dn += w * dpr;
                        }
                        if let Some(p) = prev {
                            let hp = &saved_h[p * hidden..(p + 1) * hidden];
                            for (acc, h) in dwh[r * hidden..(r + 1) * hidden].iter_mut().zip(hp) {
                                *acc += dpr * h;
                            }
                        }
                    }
                }
                let gx = needs[0].then(|| {
                    let mut d = vec![0.0; t_len * n_in];
                    matmul_acc(&dpre, wi.data(), &mut d, t_len, g4, n_in);
                    Tensor::from_parts(vec![t_len, n_in], d)
                });
                let gwi = needs[1].then(|| {
                    let mut d = vec![0.0; g4 * n_in];
                    matmul_at_b_acc(&dpre, x.data(), &mut d, g4, t_len, n_in);
                    Tensor::from_parts(vec![g4, n_in], d)
                });
                let gwh = needs[2].then(|| Tensor::from_parts(vec![g4, hidden], dwh.clone()));
                let gb = needs[3].then(|| {
                    let mut d = vec![0.0; g4];
                    for row in dpre.chunks(g4) {
                        for (acc, v) in d.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    Tensor::from_parts(vec![g4], d)
                });
                vec![gx, gwi, gwh, gb]
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, ParamStore};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_and_affine() {
        let g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, 2.0]));
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2], &[0.0, 0.0]));
        assert_eq!(x.linear(w, Some(b)).unwrap().value().data(), &[1.0, 2.0]);

        let x = g.constant(t(&[2], &[1.0, 1.0]));
        let w = g.constant(t(&[1, 2], &[2.0, 3.0]));
        let b = g.constant(t(&[1], &[1.0]));
        assert_eq!(x.linear(w, Some(b)).unwrap().value().data(), &[6.0]);
    }

    #[test]
    fn linear_shape_mismatch_names_shapes() {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let w = g.constant(Tensor::zeros(&[2, 2]));
        let err = x.linear(w, None).unwrap_err().to_string();
        assert!(err.contains("[3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn dwconv_identity_and_box_kernel() {
        let g = Graph::new();
        let x = g.constant(t(&[2, 4], &[1.0, -2.0, 3.0, 0.5, 4.0, 5.0, 6.0, 7.0]));
        let k = g.constant(t(&[2, 3], &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]));
        assert_eq!(x.dwconv1d(k).unwrap().value().data(), x.value().data());

        let x = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let k = g.constant(t(&[1, 3], &[1.0, 1.0, 1.0]));
        assert_eq!(x.dwconv1d(k).unwrap().value().data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn dwconv_even_kernel_is_config_error() {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 4]));
        let k = g.constant(Tensor::zeros(&[1, 2]));
        assert!(x.dwconv1d(k).unwrap_err().is_config());
    }

    #[test]
    fn conv3d_identity_zero_and_empty() {
        let g = Graph::new();
        let data: Vec<f64> = (0..2 * 3 * 2 * 2).map(|v| v as f64 * 0.1 - 0.5).collect();
        let x = g.constant(t(&[2, 3, 2, 2], &data));
        let ident = g.constant(t(&[2, 2, 1, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
        let y = x.conv3d(ident, None, Conv3dSpec::unit()).unwrap();
        assert_eq!(y.value().data(), &data[..]);

        let zero = g.constant(Tensor::zeros(&[3, 2, 2, 2, 2]));
        let y = x.conv3d(zero, None, Conv3dSpec::unit()).unwrap();
        assert_eq!(y.shape(), vec![3, 2, 1, 1]);
        assert!(y.value().data().iter().all(|&v| v == 0.0));

        let big = g.constant(Tensor::zeros(&[1, 2, 5, 1, 1]));
        let err = x.conv3d(big, None, Conv3dSpec::unit()).unwrap_err();
        assert!(matches!(err, crate::error::TsgError::Dimension(_)));
    }

    #[test]
    fn conv3d_output_size_formula() {
        let spec = Conv3dSpec::new([1, 2, 2], [1, 1, 1]);
        assert_eq!(spec.output_dims([8, 8, 7], [3, 3, 3]).unwrap(), [8, 4, 4]);
    }

    #[test]
    fn layer_norm_examples() {
        let g = Graph::new();
        let c = g.constant(t(&[4], &[2.5; 4]));
        assert!(c.layer_norm(0, 1e-5).unwrap().value().data().iter().all(|&v| v == 0.0));
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = x.layer_norm(0, 1e-5).unwrap().value();
        for (a, b) in y.data().iter().zip([-1.2247, 0.0, 1.2247]) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn layer_norm_along_leading_axis() {
        let g = Graph::new();
        // [3 channels, 2 positions]; normalize each position over channels.
        let x = g.constant(t(&[3, 2], &[1.0, 10.0, 2.0, 20.0, 3.0, 30.0]));
        let y = x.layer_norm(0, 0.0).unwrap().value();
        let col0: Vec<f64> = (0..3).map(|c| y.data()[c * 2]).collect();
        let col1: Vec<f64> = (0..3).map(|c| y.data()[c * 2 + 1]).collect();
        for (a, b) in col0.iter().zip(&col1) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(col0.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn activation_values() {
        assert_eq!(Activation::Gelu.apply(0.0), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
        assert!((Activation::Sigmoid.apply(40.0) - 1.0).abs() < 1e-6);
        assert!("relu".parse::<Activation>().unwrap_err().is_config());
        assert_eq!("gelu".parse::<Activation>().unwrap(), Activation::Gelu);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let g = Graph::new();
        let mut store = ParamStore::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let loss = x.mul(x).unwrap().sum();
        let grads = g.backward(loss, &mut store).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_of_constant_gives_zero_param_grads() {
        let g = Graph::new();
        let mut store = ParamStore::new();
        let id = store.add("w", t(&[2], &[1.0, 2.0])).unwrap();
        let _w = g.param(&store, id);
        let loss = g.constant(Tensor::scalar(3.0));
        g.backward(loss, &mut store).unwrap();
        assert!(store.grad(id).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::new();
        let mut store = ParamStore::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(
            g.backward(x, &mut store),
            Err(crate::error::TsgError::Contract(_))
        ));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut store = ParamStore::new();
        let id = store.add("w", t(&[2], &[1.0, -1.0])).unwrap();
        for _ in 0..2 {
            let g = Graph::new();
            let w = g.param(&store, id);
            let loss = w.mul(w).unwrap().sum();
            g.backward(loss, &mut store).unwrap();
        }
        assert_eq!(store.grad(id).data(), &[4.0, -4.0]);
    }

    #[test]
    fn frozen_param_is_not_updated_by_backward() {
        let mut store = ParamStore::new();
        let id = store.add("w", t(&[2], &[1.0, -1.0])).unwrap();
        store.set_trainable(id, false);
        let g = Graph::new();
        let w = g.param(&store, id);
        let x = g.leaf(t(&[2], &[3.0, 4.0]), true);
        let loss = w.mul(x).unwrap().sum();
        let grads = g.backward(loss, &mut store).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, -1.0]);
        assert!(store.grad(id).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permute_roundtrip_and_values() {
        let g = Graph::new();
        let x = g.constant(t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let y = x.permute(&[1, 0]).unwrap();
        assert_eq!(y.shape(), vec![3, 2]);
        assert_eq!(y.value().data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert!(x.permute(&[0, 0]).is_err());
    }

    #[test]
    fn segment_mean_identical_ranges_match() {
        let g = Graph::new();
        let data: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let x = g.constant(t(&[4, 3], &data));
        let y = x.segment_mean(&[(1, 3), (1, 3), (0, 4)]).unwrap().value();
        assert_eq!(y.data()[0..3], y.data()[3..6]);
        assert_eq!(&y.data()[0..3], &[4.5, 5.5, 6.5]);
    }
}
