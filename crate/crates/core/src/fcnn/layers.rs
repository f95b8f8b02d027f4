//! Stride-1 valid convolution and max pooling with their backward passes.
//!
//! Convolutions are lowered to a single matrix product through an im2col
//! buffer, so the forward and both backward products share one gemm kernel.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Square-kernel convolution with optional rectifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub relu: bool,
    /// `(out, in, kh, kw)` row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, relu: bool) -> Self {
        ConvLayer {
            in_channels,
            out_channels,
            kernel,
            relu,
            weights: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Serializable layer descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        relu: bool,
    },
    Pool {
        size: usize,
    },
}

impl LayerSpec {
    /// Loss of side length caused by the layer.
    pub fn reduction(&self) -> usize {
        match *self {
            LayerSpec::Conv { kernel, .. } => kernel - 1,
            LayerSpec::Pool { size } => size - 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    Pool(usize),
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv(c) => LayerSpec::Conv {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                relu: c.relu,
            },
            Layer::Pool(n) => LayerSpec::Pool { size: *n },
        }
    }

    pub fn from_spec(spec: LayerSpec) -> Result<Layer> {
        match spec {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                relu,
            } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 {
                    return Err(Error::InvalidArgument(format!("degenerate conv layer {spec:?}")));
                }
                Ok(Layer::Conv(ConvLayer::zeros(in_channels, out_channels, kernel, relu)))
            }
            LayerSpec::Pool { size } => {
                if size == 0 {
                    return Err(Error::InvalidArgument("pool size must be positive".into()));
                }
                Ok(Layer::Pool(size))
            }
        }
    }

    pub fn reduction(&self) -> usize {
        self.spec().reduction()
    }
}

fn im2col(input: &Tensor, k: usize, oh: usize, ow: usize) -> Vec<f64> {
    let p = oh * ow;
    let mut col = vec![0.0; input.channels * k * k * p];
    for c in 0..input.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let src = (c * input.height + oy + ky) * input.width + kx;
                    dst[oy * ow..(oy + 1) * ow].copy_from_slice(&input.data[src..src + ow]);
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], channels: usize, h: usize, w: usize, k: usize, oh: usize, ow: usize) -> Tensor {
    let p = oh * ow;
    let mut out = Tensor::zeros(channels, h, w);
    for c in 0..channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let dst = (c * h + oy + ky) * w + kx;
                    for (d, s) in out.data[dst..dst + ow].iter_mut().zip(&src[oy * ow..(oy + 1) * ow]) {
                        *d += *s;
                    }
                }
            }
        }
    }
    out
}

/// `c (m x n) = a (m x k) * b (k x n) + beta * c`, all row-major unless transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the m*k, k*n and m*n buffers checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_fit(kernel: usize, input: &Tensor) -> Result<()> {
    if kernel > input.height || kernel > input.width {
        return Err(Error::KernelTooLarge {
            kernel,
            input: input.height.min(input.width),
        });
    }
    Ok(())
}

/// Valid cross-correlation plus bias, followed by the layer's rectifier if any.
pub fn conv_valid(input: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    if input.channels != layer.in_channels {
        return Err(Error::DimMismatch(format!(
            "conv expects {} input channels, got {}",
            layer.in_channels, input.channels
        )));
    }
    check_fit(layer.kernel, input)?;
    let k = layer.kernel;
    let (oh, ow) = (input.height - k + 1, input.width - k + 1);
    let p = oh * ow;
    let mut out = Tensor::zeros(layer.out_channels, oh, ow);
    for (o, b) in layer.bias.iter().enumerate() {
        out.data[o * p..(o + 1) * p].fill(*b);
    }
    let ck = layer.fan_in();
    if k == 1 {
        gemm(layer.out_channels, ck, p, &layer.weights, false, &input.data, false, 1.0, &mut out.data);
    } else {
        let col = im2col(input, k, oh, ow);
        gemm(layer.out_channels, ck, p, &layer.weights, false, &col, false, 1.0, &mut out.data);
    }
    if layer.relu {
        for v in &mut out.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`conv_valid`].
///
/// `output` is the forward result (used for the rectifier mask). Weight and
/// bias gradients are accumulated into `dweights`/`dbias`; the input gradient
/// is returned when `want_input_grad` is set.
pub fn conv_backward(
    input: &Tensor,
    output: &Tensor,
    layer: &ConvLayer,
    dout: &Tensor,
    dweights: &mut [f64],
    dbias: &mut [f64],
    want_input_grad: bool,
) -> Option<Tensor> {
    let k = layer.kernel;
    let (oh, ow) = (output.height, output.width);
    let p = oh * ow;
    let mut g = dout.data.clone();
    if layer.relu {
        for (gv, ov) in g.iter_mut().zip(&output.data) {
            if *ov <= 0.0 {
                *gv = 0.0;
            }
        }
    }
    for o in 0..layer.out_channels {
        dbias[o] += g[o * p..(o + 1) * p].iter().sum::<f64>();
    }
    let ck = layer.fan_in();
    let col_storage;
    let col: &[f64] = if k == 1 {
        &input.data
    } else {
        col_storage = im2col(input, k, oh, ow);
        &col_storage
    };
    // dW (O x CK) += G (O x P) * col^T (P x CK)
    gemm(layer.out_channels, p, ck, &g, false, col, true, 1.0, dweights);
    if !want_input_grad {
        return None;
    }
    // dcol (CK x P) = W^T (CK x O) * G (O x P)
    let mut dcol = vec![0.0; ck * p];
    gemm(ck, layer.out_channels, p, &layer.weights, true, &g, false, 0.0, &mut dcol);
    if k == 1 {
        Some(Tensor {
            channels: input.channels,
            height: input.height,
            width: input.width,
            data: dcol,
        })
    } else {
        Some(col2im(&dcol, input.channels, input.height, input.width, k, oh, ow))
    }
}

/// Stride-1 `n x n` max pooling. Returns the pooled tensor and, per output
/// value, the flat input index of the first maximum in raster order.
pub fn max_pool_with_argmax(input: &Tensor, n: usize) -> Result<(Tensor, Vec<u32>)> {
    if n == 0 {
        return Err(Error::InvalidArgument("pool size must be positive".into()));
    }
    check_fit(n, input)?;
    let (h, w) = (input.height, input.width);
    let (oh, ow) = (h - n + 1, w - n + 1);
    // Separable: horizontal window max, then vertical max over those.
    let mut row_max = vec![0.0; input.channels * h * ow];
    let mut row_arg = vec![0u32; input.channels * h * ow];
    for c in 0..input.channels {
        for y in 0..h {
            let base = (c * h + y) * w;
            let row = &input.data[base..base + w];
            for x in 0..ow {
                let mut best = row[x];
                let mut arg = x;
                for (dx, &v) in row[x + 1..x + n].iter().enumerate() {
                    if v > best {
                        best = v;
                        arg = x + 1 + dx;
                    }
                }
                let o = (c * h + y) * ow + x;
                row_max[o] = best;
                row_arg[o] = (base + arg) as u32;
            }
        }
    }
    let mut out = Tensor::zeros(input.channels, oh, ow);
    let mut argmax = vec![0u32; out.len()];
    for c in 0..input.channels {
        for y in 0..oh {
            for x in 0..ow {
                let mut r = (c * h + y) * ow + x;
                let mut best = row_max[r];
                let mut arg = row_arg[r];
                for _ in 1..n {
                    r += ow;
                    if row_max[r] > best {
                        best = row_max[r];
                        arg = row_arg[r];
                    }
                }
                let o = (c * oh + y) * ow + x;
                out.data[o] = best;
                argmax[o] = arg;
            }
        }
    }
    Ok((out, argmax))
}

/// Stride-1 `n x n` max pooling.
pub fn max_pool_stride1(input: &Tensor, n: usize) -> Result<Tensor> {
    max_pool_with_argmax(input, n).map(|(t, _)| t)
}

/// Routes output gradients back to the recorded maxima.
pub fn max_pool_backward(input: &Tensor, argmax: &[u32], dout: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input.channels, input.height, input.width);
    for (g, &a) in dout.data.iter().zip(argmax) {
        dx.data[a as usize] += g;
    }
    dx
}
