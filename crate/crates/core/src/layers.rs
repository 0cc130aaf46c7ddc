//! Layer kinds and their forward/backward kernels.
//!
//! Conventions, fixed for the whole toolkit:
//! - feature maps are `(H, W, C)` row-major, channel last;
//! - conv2d weights are `(OC, IC, KH, KW)`, stride 1, valid padding;
//! - dense weights are `(OUT, IN)`;
//! - maxpool2d is a 2x2 window with stride 2 (odd trailing rows/cols drop);
//! - maxpool gradient routes to the first maximum in row-major window order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
    },
    Conv2d {
        kernel_h: usize,
        kernel_w: usize,
        in_channels: usize,
        out_channels: usize,
    },
    MaxPool2d,
    Relu,
    Softmax,
    Flatten,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool2d => "maxpool2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Flatten => "flatten",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    /// Deterministic output shape for a given input shape, or a
    /// construction error when the two are incompatible.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerSpec::Dense { input: n_in, output } => {
                if input != [*n_in] {
                    return Err(Error::Construction(format!(
                        "dense expects input [{n_in}], got {input:?}"
                    )));
                }
                Ok(vec![*output])
            }
            LayerSpec::Conv2d {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
            } => {
                let [h, w, c] = three(input)?;
                if c != *in_channels {
                    return Err(Error::Construction(format!(
                        "conv2d expects {in_channels} input channels, got {c}"
                    )));
                }
                if h < *kernel_h || w < *kernel_w {
                    return Err(Error::Construction(format!(
                        "conv2d kernel {kernel_h}x{kernel_w} does not fit input {h}x{w}"
                    )));
                }
                Ok(vec![h - kernel_h + 1, w - kernel_w + 1, *out_channels])
            }
            LayerSpec::MaxPool2d => {
                let [h, w, c] = three(input)?;
                if h < 2 || w < 2 {
                    return Err(Error::Construction(format!(
                        "maxpool2d needs at least 2x2 input, got {h}x{w}"
                    )));
                }
                Ok(vec![h / 2, w / 2, c])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Softmax => {
                if input.len() != 1 {
                    return Err(Error::Construction(format!(
                        "softmax expects a rank-1 input, got {input:?}"
                    )));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

fn three(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        [h, w, c] => Ok([*h, *w, *c]),
        other => Err(Error::Construction(format!(
            "expected (H, W, C) input, got {other:?}"
        ))),
    }
}

/// Weight and bias block for one parameterized layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl LayerParams {
    pub fn zeros_like(&self) -> LayerParams {
        LayerParams {
            weights: Tensor::zeros(self.weights.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }
}

pub fn forward(
    spec: &LayerSpec,
    params: Option<&LayerParams>,
    input: &Tensor,
) -> Result<Tensor> {
    match spec {
        LayerSpec::Dense { input: n_in, output } => {
            let p = params.ok_or_else(|| Error::usage("dense layer missing parameters"))?;
            let x = input.data();
            let w = p.weights.data();
            let b = p.bias.data();
            let mut out = vec![0.0; *output];
            for (o, out_v) in out.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                let mut acc = b[o];
                for (wi, xi) in row.iter().zip(x.iter()) {
                    acc += wi * xi;
                }
                *out_v = acc;
            }
            Tensor::new(vec![*output], out)
        }
        LayerSpec::Conv2d {
            kernel_h,
            kernel_w,
            in_channels,
            out_channels,
        } => {
            let p = params.ok_or_else(|| Error::usage("conv2d layer missing parameters"))?;
            let [h, w, _] = three(input.shape())?;
            let (oh, ow) = (h - kernel_h + 1, w - kernel_w + 1);
            let wt = p.weights.data();
            let b = p.bias.data();
            let mut out = vec![0.0; oh * ow * out_channels];
            for oy in 0..oh {
                for ox in 0..ow {
                    for oc in 0..*out_channels {
                        let mut acc = b[oc];
                        for ic in 0..*in_channels {
                            for ky in 0..*kernel_h {
                                for kx in 0..*kernel_w {
                                    let wi = ((oc * in_channels + ic) * kernel_h + ky)
                                        * kernel_w
                                        + kx;
                                    acc += wt[wi] * input.at3(oy + ky, ox + kx, ic);
                                }
                            }
                        }
                        out[(oy * ow + ox) * out_channels + oc] = acc;
                    }
                }
            }
            Tensor::new(vec![oh, ow, *out_channels], out)
        }
        LayerSpec::MaxPool2d => {
            let [h, w, c] = three(input.shape())?;
            let (oh, ow) = (h / 2, w / 2);
            let mut out = vec![0.0; oh * ow * c];
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        for ky in 0..2 {
                            for kx in 0..2 {
                                let v = input.at3(oy * 2 + ky, ox * 2 + kx, ch);
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        out[(oy * ow + ox) * c + ch] = best;
                    }
                }
            }
            Tensor::new(vec![oh, ow, c], out)
        }
        LayerSpec::Relu => Ok(input.map(|v| v.max(0.0))),
        LayerSpec::Softmax => {
            let max = input.max();
            let exps: Vec<f64> = input.data().iter().map(|&v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            Tensor::new(input.shape().to_vec(), exps.iter().map(|e| e / sum).collect())
        }
        LayerSpec::Flatten => input.reshaped(&[input.len()]),
    }
}

/// Backpropagates `grad_out` through one layer.
///
/// Returns the gradient with respect to the layer input, plus parameter
/// gradients for dense/conv layers. `input` and `output` must be the
/// tensors seen by the matching forward call.
pub fn backward(
    spec: &LayerSpec,
    params: Option<&LayerParams>,
    input: &Tensor,
    output: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Option<LayerParams>)> {
    match spec {
        LayerSpec::Dense { input: n_in, output: n_out } => {
            let p = params.ok_or_else(|| Error::usage("dense layer missing parameters"))?;
            let w = p.weights.data();
            let g = grad_out.data();
            let x = input.data();
            let mut grad_in = vec![0.0; *n_in];
            let mut grad_w = vec![0.0; n_out * n_in];
            for o in 0..*n_out {
                let go = g[o];
                let row = &w[o * n_in..(o + 1) * n_in];
                for i in 0..*n_in {
                    grad_in[i] += row[i] * go;
                    grad_w[o * n_in + i] = go * x[i];
                }
            }
            let grads = LayerParams {
                weights: Tensor::new(vec![*n_out, *n_in], grad_w)?,
                bias: Tensor::new(vec![*n_out], g.to_vec())?,
            };
            Ok((Tensor::new(vec![*n_in], grad_in)?, Some(grads)))
        }
        LayerSpec::Conv2d {
            kernel_h,
            kernel_w,
            in_channels,
            out_channels,
        } => {
            let p = params.ok_or_else(|| Error::usage("conv2d layer missing parameters"))?;
            let [h, w, _] = three(input.shape())?;
            let (oh, ow) = (h - kernel_h + 1, w - kernel_w + 1);
            let wt = p.weights.data();
            let g = grad_out.data();
            let mut grad_in = Tensor::zeros(input.shape());
            let mut grad_w = vec![0.0; wt.len()];
            let mut grad_b = vec![0.0; *out_channels];
            for oy in 0..oh {
                for ox in 0..ow {
                    for oc in 0..*out_channels {
                        let go = g[(oy * ow + ox) * out_channels + oc];
                        if go == 0.0 {
                            continue;
                        }
                        grad_b[oc] += go;
                        for ic in 0..*in_channels {
                            for ky in 0..*kernel_h {
                                for kx in 0..*kernel_w {
                                    let wi = ((oc * in_channels + ic) * kernel_h + ky)
                                        * kernel_w
                                        + kx;
                                    let ii = grad_in.idx3(oy + ky, ox + kx, ic);
                                    grad_in.data_mut()[ii] += wt[wi] * go;
                                    grad_w[wi] += input.at3(oy + ky, ox + kx, ic) * go;
                                }
                            }
                        }
                    }
                }
            }
            let grads = LayerParams {
                weights: Tensor::new(p.weights.shape().to_vec(), grad_w)?,
                bias: Tensor::new(vec![*out_channels], grad_b)?,
            };
            Ok((grad_in, Some(grads)))
        }
        LayerSpec::MaxPool2d => {
            let [_, w, c] = three(input.shape())?;
            let [oh, ow, _] = three(output.shape())?;
            let _ = w;
            let g = grad_out.data();
            let mut grad_in = Tensor::zeros(input.shape());
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        // First maximum in row-major window order wins ties.
                        let mut best = f64::NEG_INFINITY;
                        let (mut by, mut bx) = (0, 0);
                        for ky in 0..2 {
                            for kx in 0..2 {
                                let v = input.at3(oy * 2 + ky, ox * 2 + kx, ch);
                                if v > best {
                                    best = v;
                                    by = oy * 2 + ky;
                                    bx = ox * 2 + kx;
                                }
                            }
                        }
                        let ii = grad_in.idx3(by, bx, ch);
                        grad_in.data_mut()[ii] += g[(oy * ow + ox) * c + ch];
                    }
                }
            }
            Ok((grad_in, None))
        }
        LayerSpec::Relu => {
            let grad_in: Vec<f64> = input
                .data()
                .iter()
                .zip(grad_out.data())
                .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                .collect();
            Ok((Tensor::new(input.shape().to_vec(), grad_in)?, None))
        }
        LayerSpec::Softmax => {
            // grad_in_j = p_j * (g_j - sum_i g_i p_i)
            let p = output.data();
            let g = grad_out.data();
            let dot: f64 = p.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
            let grad_in: Vec<f64> = p.iter().zip(g.iter()).map(|(&pj, &gj)| pj * (gj - dot)).collect();
            Ok((Tensor::new(input.shape().to_vec(), grad_in)?, None))
        }
        LayerSpec::Flatten => Ok((grad_out.reshaped(input.shape())?, None)),
    }
}
