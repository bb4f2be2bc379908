//! Forward and backward kernels for the supported layer set.
//!
//! Every backward entry point bumps a process-wide counter so callers can
//! prove that a code path ran forward-only (see [`backward_calls`]).

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{LayerKind, LayerNode};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

static BACKWARD_CALLS: AtomicU64 = AtomicU64::new(0);

/// Number of backward kernel invocations since process start.
pub fn backward_calls() -> u64 {
    BACKWARD_CALLS.load(Ordering::SeqCst)
}

pub(crate) fn count_backward() {
    BACKWARD_CALLS.fetch_add(1, Ordering::SeqCst);
}

// Samples per rayon task. Fixed so reductions are independent of the thread count.
const SAMPLE_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(Error::Shape(format!("degenerate conv spec {self:?}")));
        }
        Ok(())
    }

    /// Output extent along one spatial axis.
    pub fn out_dim(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::Shape(format!(
                "kernel {} larger than padded input {}",
                self.kernel, padded
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![
            self.out_channels,
            self.in_channels,
            self.kernel,
            self.kernel,
        ]
    }

    /// Length of one im2col column: `C_i·k²`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

fn expect_rank(x: &Tensor, rank: usize, what: &str) -> Result<()> {
    if x.ndim() != rank {
        return Err(Error::Shape(format!(
            "{what} expects rank {rank}, got {:?}",
            x.shape()
        )));
    }
    Ok(())
}

fn im2col(x: &[f32], h: usize, w: usize, spec: &ConvSpec, ho: usize, wo: usize, col: &mut [f32]) {
    let k = spec.kernel;
    let p = ho * wo;
    for c in 0..spec.in_channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        dst[oy * wo + ox] =
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                plane[iy as usize * w + ix as usize]
                            } else {
                                0.0
                            };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f32], h: usize, w: usize, spec: &ConvSpec, ho: usize, wo: usize, x: &mut [f32]) {
    let k = spec.kernel;
    let p = ho * wo;
    for c in 0..spec.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        x[c * h * w + iy as usize * w + ix as usize] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

fn conv_dims(
    x: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
) -> Result<(usize, usize, usize, usize, usize)> {
    spec.validate()?;
    expect_rank(x, 4, "conv2d input")?;
    if x.dim(1) != spec.in_channels {
        return Err(Error::Shape(format!(
            "conv2d input has {} channels, spec expects {}",
            x.dim(1),
            spec.in_channels
        )));
    }
    if w.shape() != spec.weight_shape().as_slice() {
        return Err(Error::Shape(format!(
            "conv2d weight {:?}, spec expects {:?}",
            w.shape(),
            spec.weight_shape()
        )));
    }
    let (h, wd) = (x.dim(2), x.dim(3));
    Ok((x.dim(0), h, wd, spec.out_dim(h)?, spec.out_dim(wd)?))
}

/// 2-D cross-correlation plus per-output-channel bias.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (batch, h, wd, ho, wo) = conv_dims(x, w, spec)?;
    if b.numel() != spec.out_channels {
        return Err(Error::Shape(format!(
            "conv2d bias has {} entries for {} channels",
            b.numel(),
            spec.out_channels
        )));
    }
    let in_len = spec.in_channels * h * wd;
    let p = ho * wo;
    let out_len = spec.out_channels * p;
    let kk = spec.patch_len();
    let mut out = vec![0.0f32; batch * out_len];
    out.par_chunks_mut(out_len * SAMPLE_CHUNK)
        .enumerate()
        .for_each(|(chunk, out_chunk)| {
            let mut col = vec![0.0f32; kk * p];
            for (j, y) in out_chunk.chunks_mut(out_len).enumerate() {
                let n = chunk * SAMPLE_CHUNK + j;
                im2col(
                    &x.data()[n * in_len..(n + 1) * in_len],
                    h,
                    wd,
                    spec,
                    ho,
                    wo,
                    &mut col,
                );
                for (c, plane) in y.chunks_mut(p).enumerate() {
                    plane.fill(b.data()[c]);
                }
                gemm_nn(spec.out_channels, kk, p, w.data(), &col, y);
            }
        });
    Tensor::new(vec![batch, spec.out_channels, ho, wo], out)
}

/// Gradients of [`conv2d`]; `grad_w` is skipped (returned empty) when not needed.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
    need_weight_grad: bool,
) -> Result<(Tensor, Option<Tensor>, Tensor)> {
    count_backward();
    let (batch, h, wd, ho, wo) = conv_dims(x, w, spec)?;
    if grad_out.shape() != [batch, spec.out_channels, ho, wo] {
        return Err(Error::Shape(format!(
            "conv2d upstream gradient {:?}",
            grad_out.shape()
        )));
    }
    let in_len = spec.in_channels * h * wd;
    let p = ho * wo;
    let out_len = spec.out_channels * p;
    let kk = spec.patch_len();
    let wsize = w.numel();

    let mut grad_x = vec![0.0f32; batch * in_len];
    let partials: Vec<Vec<f32>> = grad_x
        .par_chunks_mut(in_len * SAMPLE_CHUNK)
        .enumerate()
        .map(|(chunk, gx_chunk)| {
            let mut col = vec![0.0f32; kk * p];
            let mut gcol = vec![0.0f32; kk * p];
            let mut gw = if need_weight_grad {
                vec![0.0f32; wsize]
            } else {
                Vec::new()
            };
            for (j, gx) in gx_chunk.chunks_mut(in_len).enumerate() {
                let n = chunk * SAMPLE_CHUNK + j;
                let gy = &grad_out.data()[n * out_len..(n + 1) * out_len];
                gcol.fill(0.0);
                gemm_tn(kk, spec.out_channels, p, w.data(), gy, &mut gcol);
                col2im(&gcol, h, wd, spec, ho, wo, gx);
                if need_weight_grad {
                    im2col(
                        &x.data()[n * in_len..(n + 1) * in_len],
                        h,
                        wd,
                        spec,
                        ho,
                        wo,
                        &mut col,
                    );
                    gemm_nt(spec.out_channels, p, kk, gy, &col, &mut gw);
                }
            }
            gw
        })
        .collect();

    let grad_w = if need_weight_grad {
        let mut gw = vec![0.0f32; wsize];
        for part in &partials {
            for (a, b) in gw.iter_mut().zip(part) {
                *a += b;
            }
        }
        Some(Tensor::new(w.shape().to_vec(), gw)?)
    } else {
        None
    };

    let mut grad_b = vec![0.0f32; spec.out_channels];
    for n in 0..batch {
        for (c, gb) in grad_b.iter_mut().enumerate() {
            let start = n * out_len + c * p;
            *gb += grad_out.data()[start..start + p].iter().sum::<f32>();
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), grad_x)?,
        grad_w,
        Tensor::new(vec![spec.out_channels], grad_b)?,
    ))
}

fn fc_dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize)> {
    expect_rank(x, 2, "fc input")?;
    expect_rank(w, 2, "fc weight")?;
    if x.dim(1) != w.dim(1) {
        return Err(Error::Shape(format!(
            "fc input {:?} vs weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    Ok((x.dim(0), w.dim(1), w.dim(0)))
}

/// `y = x·Wᵀ + b` with `x: [B, N]`, `W: [M, N]`.
pub fn fc(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, _, m) = fc_dims(x, w)?;
    if b.numel() != m {
        return Err(Error::Shape(format!(
            "fc bias has {} entries for {m} outputs",
            b.numel()
        )));
    }
    let mut out = vec![0.0f32; batch * m];
    for row in out.chunks_mut(m) {
        row.copy_from_slice(b.data());
    }
    gemm_nt(batch, w.dim(1), m, x.data(), w.data(), &mut out);
    Tensor::new(vec![batch, m], out)
}

pub fn fc_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    need_weight_grad: bool,
) -> Result<(Tensor, Option<Tensor>, Tensor)> {
    count_backward();
    let (batch, n, m) = fc_dims(x, w)?;
    if grad_out.shape() != [batch, m] {
        return Err(Error::Shape(format!(
            "fc upstream gradient {:?}",
            grad_out.shape()
        )));
    }
    let mut gx = vec![0.0f32; batch * n];
    gemm_nn(batch, m, n, grad_out.data(), w.data(), &mut gx);
    let grad_w = if need_weight_grad {
        let mut gw = vec![0.0f32; m * n];
        gemm_tn(m, batch, n, grad_out.data(), x.data(), &mut gw);
        Some(Tensor::new(vec![m, n], gw)?)
    } else {
        None
    };
    let mut gb = vec![0.0f32; m];
    for row in grad_out.data().chunks(m) {
        for (a, b) in gb.iter_mut().zip(row) {
            *a += b;
        }
    }
    Ok((
        Tensor::new(vec![batch, n], gx)?,
        grad_w,
        Tensor::new(vec![m], gb)?,
    ))
}

/// Batch-norm parameters in inference form.
#[derive(Debug, Clone, Copy)]
pub struct BnParams<'a> {
    pub gamma: &'a [f32],
    pub beta: &'a [f32],
    pub mean: &'a [f32],
    pub var: &'a [f32],
    pub eps: f32,
}

impl BnParams<'_> {
    fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize)> {
        if x.ndim() < 2 {
            return Err(Error::Shape(format!("batchnorm input {:?}", x.shape())));
        }
        let c = self.channels();
        if x.dim(1) != c || self.beta.len() != c || self.mean.len() != c || self.var.len() != c {
            return Err(Error::Shape(format!(
                "batchnorm with {c} channels applied to {:?}",
                x.shape()
            )));
        }
        Ok((x.dim(0), x.shape()[2..].iter().product()))
    }
}

pub fn batchnorm(x: &Tensor, bn: &BnParams) -> Result<Tensor> {
    let (batch, plane) = bn.check(x)?;
    let c = bn.channels();
    let mut out = x.clone();
    for n in 0..batch {
        for ch in 0..c {
            let scale = bn.gamma[ch] / (bn.var[ch] + bn.eps).sqrt();
            let shift = bn.beta[ch] - bn.mean[ch] * scale;
            let start = (n * c + ch) * plane;
            for v in &mut out.data_mut()[start..start + plane] {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`batchnorm`] w.r.t. input, γ, β, μ and σ².
pub struct BnGrads {
    pub x: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub mean: Tensor,
    pub var: Tensor,
}

pub fn batchnorm_backward(x: &Tensor, bn: &BnParams, grad_out: &Tensor) -> Result<BnGrads> {
    count_backward();
    let (batch, plane) = bn.check(x)?;
    x.expect_same_shape(grad_out)?;
    let c = bn.channels();
    let mut gx = vec![0.0f32; x.numel()];
    let mut gg = vec![0.0f32; c];
    let mut gb = vec![0.0f32; c];
    let mut gm = vec![0.0f32; c];
    let mut gv = vec![0.0f32; c];
    for n in 0..batch {
        for ch in 0..c {
            let denom = (bn.var[ch] + bn.eps).sqrt();
            let start = (n * c + ch) * plane;
            let rows = grad_out.data()[start..start + plane]
                .iter()
                .zip(&x.data()[start..start + plane]);
            for (gx, (&g, &v)) in gx[start..start + plane].iter_mut().zip(rows) {
                let centered = v - bn.mean[ch];
                *gx = g * bn.gamma[ch] / denom;
                gg[ch] += g * centered / denom;
                gb[ch] += g;
                gm[ch] -= g * bn.gamma[ch] / denom;
                gv[ch] -= 0.5 * g * bn.gamma[ch] * centered / (denom * denom * denom);
            }
        }
    }
    Ok(BnGrads {
        x: Tensor::new(x.shape().to_vec(), gx)?,
        gamma: Tensor::from_vec(gg),
        beta: Tensor::from_vec(gb),
        mean: Tensor::from_vec(gm),
        var: Tensor::from_vec(gv),
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Subgradient at 0 is 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    count_backward();
    x.zip_map(grad_out, |v, g| if v > 0.0 { g } else { 0.0 })
}

/// Non-overlapping average pooling with a square window (stride = window).
pub fn avgpool(x: &Tensor, k: usize) -> Result<Tensor> {
    expect_rank(x, 4, "avgpool input")?;
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if k == 0 || h < k || w < k {
        return Err(Error::Shape(format!(
            "avgpool window {k} on {:?}",
            x.shape()
        )));
    }
    let (ho, wo) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f32;
    let mut out = vec![0.0f32; b * c * ho * wo];
    for plane in 0..b * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0f32;
                for dy in 0..k {
                    for dx in 0..k {
                        acc += src[(oy * k + dy) * w + ox * k + dx];
                    }
                }
                dst[oy * wo + ox] = acc * inv;
            }
        }
    }
    Tensor::new(vec![b, c, ho, wo], out)
}

pub fn avgpool_backward(input_shape: &[usize], k: usize, grad_out: &Tensor) -> Result<Tensor> {
    count_backward();
    if input_shape.len() != 4 {
        return Err(Error::Shape(format!("avgpool input {input_shape:?}")));
    }
    let (b, c, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let (ho, wo) = (h / k, w / k);
    if grad_out.shape() != [b, c, ho, wo] {
        return Err(Error::Shape(format!(
            "avgpool upstream gradient {:?}",
            grad_out.shape()
        )));
    }
    let inv = 1.0 / (k * k) as f32;
    let mut gx = vec![0.0f32; b * c * h * w];
    for plane in 0..b * c {
        let src = &grad_out.data()[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let g = src[oy * wo + ox] * inv;
                for dy in 0..k {
                    for dx in 0..k {
                        dst[(oy * k + dy) * w + ox * k + dx] += g;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx)
}

pub fn flatten(x: &Tensor) -> Result<Tensor> {
    let b = x.dim(0);
    let rest = x.row_len();
    x.clone().reshape(vec![b, rest])
}

fn param<'a>(node: &'a LayerNode, name: &str) -> Result<&'a Tensor> {
    node.params
        .get(name)
        .ok_or_else(|| Error::Graph(format!("layer `{}` is missing parameter `{name}`", node.id)))
}

pub(crate) fn bn_params<'a>(node: &'a LayerNode, eps: f32) -> Result<BnParams<'a>> {
    Ok(BnParams {
        gamma: param(node, "gamma")?.data(),
        beta: param(node, "beta")?.data(),
        mean: param(node, "mean")?.data(),
        var: param(node, "var")?.data(),
        eps,
    })
}

fn single<'a>(node: &LayerNode, inputs: &[&'a Tensor]) -> Result<&'a Tensor> {
    match inputs {
        [x] => Ok(x),
        _ => Err(Error::Graph(format!(
            "layer `{}` expects one input, got {}",
            node.id,
            inputs.len()
        ))),
    }
}

/// Full-precision forward of one node using its stored parameters.
pub fn layer_forward(node: &LayerNode, inputs: &[&Tensor]) -> Result<Tensor> {
    match node.kind {
        LayerKind::Fc => fc(
            single(node, inputs)?,
            param(node, "weight")?,
            param(node, "bias")?,
        ),
        LayerKind::Conv2d => {
            let spec = node.conv_spec()?;
            conv2d(
                single(node, inputs)?,
                param(node, "weight")?,
                param(node, "bias")?,
                &spec,
            )
        }
        LayerKind::BatchNorm2d { eps } => batchnorm(single(node, inputs)?, &bn_params(node, eps)?),
        LayerKind::Relu => Ok(relu(single(node, inputs)?)),
        LayerKind::AvgPool { kernel } => avgpool(single(node, inputs)?, kernel),
        LayerKind::Flatten => flatten(single(node, inputs)?),
        LayerKind::Add => match inputs {
            [a, b] => a.add(b),
            _ => Err(Error::Graph(format!("add `{}` needs two inputs", node.id))),
        },
    }
}

/// Gradients of one node: one tensor per input, plus named parameter gradients.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub inputs: Vec<Tensor>,
    pub params: std::collections::BTreeMap<String, Tensor>,
}

pub fn layer_backward(
    node: &LayerNode,
    inputs: &[&Tensor],
    grad_out: &Tensor,
) -> Result<LayerGrads> {
    let mut params = std::collections::BTreeMap::new();
    let grads = match node.kind {
        LayerKind::Fc => {
            let (gx, gw, gb) = fc_backward(
                single(node, inputs)?,
                param(node, "weight")?,
                grad_out,
                true,
            )?;
            params.insert("weight".to_string(), gw.expect("requested"));
            params.insert("bias".to_string(), gb);
            vec![gx]
        }
        LayerKind::Conv2d => {
            let spec = node.conv_spec()?;
            let (gx, gw, gb) = conv2d_backward(
                single(node, inputs)?,
                param(node, "weight")?,
                &spec,
                grad_out,
                true,
            )?;
            params.insert("weight".to_string(), gw.expect("requested"));
            params.insert("bias".to_string(), gb);
            vec![gx]
        }
        LayerKind::BatchNorm2d { eps } => {
            let g = batchnorm_backward(single(node, inputs)?, &bn_params(node, eps)?, grad_out)?;
            params.insert("gamma".to_string(), g.gamma);
            params.insert("beta".to_string(), g.beta);
            params.insert("mean".to_string(), g.mean);
            params.insert("var".to_string(), g.var);
            vec![g.x]
        }
        LayerKind::Relu => vec![relu_backward(single(node, inputs)?, grad_out)?],
        LayerKind::AvgPool { kernel } => {
            vec![avgpool_backward(
                single(node, inputs)?.shape(),
                kernel,
                grad_out,
            )?]
        }
        LayerKind::Flatten => {
            count_backward();
            vec![grad_out
                .clone()
                .reshape(single(node, inputs)?.shape().to_vec())?]
        }
        LayerKind::Add => {
            count_backward();
            if inputs.len() != 2 {
                return Err(Error::Graph(format!("add `{}` needs two inputs", node.id)));
            }
            vec![grad_out.clone(), grad_out.clone()]
        }
    };
    Ok(LayerGrads {
        inputs: grads,
        params,
    })
}
