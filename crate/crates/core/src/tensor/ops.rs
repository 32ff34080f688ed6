//! Forward operations. Each op validates shapes, computes its output and
//! records the graph node needed for the backward pass.

use rayon::prelude::*;

use super::{gemm, OpKind, Shape, Tensor};
use crate::error::{Error, Result};

thread_local! {
    static FLOP_COUNTER: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

pub fn reset_flop_counter() {
    FLOP_COUNTER.with(|c| c.set(0));
}

pub fn flop_count() -> u64 {
    FLOP_COUNTER.with(|c| c.get())
}

fn count_flops(n: u64) {
    FLOP_COUNTER.with(|c| c.set(c.get() + n));
}

/// Whether batch statistics are computed (train) or running statistics are
/// consumed (infer).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-channel running mean/variance owned by a batchnorm layer.
#[derive(Debug, Clone)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub initialized: bool,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: false,
        }
    }
}

fn check_axis(
    op: &'static str,
    axis: &'static str,
    expected: usize,
    got: usize,
) -> Result<()> {
    if expected != got {
        return Err(Error::ShapeMismatch {
            op,
            axis,
            expected,
            got,
        });
    }
    Ok(())
}

/// 2-D cross-correlation with zero padding.
///
/// `kernel` is (Cout,Cin,Kh,Kw), `bias` is (1,Cout,1,1).
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<Tensor> {
    let [n, c_in, h, w] = input.shape();
    let [c_out, kc, kh, kw] = kernel.shape();
    check_axis("conv2d", "input channels", kc, c_in)?;
    check_axis("conv2d", "bias channels", c_out, bias.shape()[1])?;
    check_axis("conv2d", "bias batch", 1, bias.shape()[0])?;
    if stride < 1 || dilation < 1 {
        return Err(Error::InvalidArg {
            op: "conv2d",
            msg: format!("stride {stride} and dilation {dilation} must be >= 1"),
        });
    }
    let h_out = out_extent(h, kh, stride, padding, dilation);
    let w_out = out_extent(w, kw, stride, padding, dilation);
    let (h_out, w_out) = match (h_out, w_out) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::EmptyOutput { op: "conv2d", h, w }),
    };

    let k = c_in * kh * kw;
    let out_cells = h_out * w_out;
    count_flops((n * c_out * out_cells) as u64 * (2 * k as u64 + 1));
    let kernel_data = kernel.to_vec();
    let bias_data = bias.to_vec();
    let input_data = input.data();

    let mut out = vec![0.0f32; n * c_out * out_cells];
    // Batch items write disjoint output slices, so parallel execution keeps
    // the per-cell accumulation order identical to the sequential one.
    out.par_chunks_mut(c_out * out_cells)
        .zip(input_data.par_chunks(c_in * h * w))
        .for_each(|(out_item, in_item)| {
            let mut cols = vec![0.0f32; k * out_cells];
            gemm::im2col(
                in_item, c_in, h, w, kh, kw, stride, padding, dilation, h_out, w_out, &mut cols,
            );
            gemm::sgemm_rowmajor(
                c_out, k, out_cells, 1.0, &kernel_data, false, &cols, false, 0.0, out_item,
            );
            for co in 0..c_out {
                let b = bias_data[co];
                for v in &mut out_item[co * out_cells..(co + 1) * out_cells] {
                    *v += b;
                }
            }
        });
    drop(input_data);

    Ok(Tensor::from_op(
        [n, c_out, h_out, w_out],
        out,
        OpKind::Conv2d {
            stride,
            padding,
            dilation,
        },
        vec![input.clone(), kernel.clone(), bias.clone()],
    ))
}

pub(crate) fn out_extent(
    extent: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Option<usize> {
    let span = (extent + 2 * padding) as isize - (dilation * (kernel - 1) + 1) as isize;
    if span < 0 {
        return None;
    }
    Some(span as usize / stride + 1)
}

pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.shape();
    if window > h || window > w {
        return Err(Error::InvalidArg {
            op: "maxpool2d",
            msg: format!("window {window} exceeds input extent {h}x{w}"),
        });
    }
    let h_out = (h - window) / stride + 1;
    let w_out = (w - window) / stride + 1;
    count_flops((n * c * h_out * w_out * window * window) as u64);
    let data = input.data();
    let mut out = vec![0.0f32; n * c * h_out * w_out];
    let mut argmax = vec![0u32; out.len()];
    let mut o = 0;
    for nc in 0..n * c {
        let plane = nc * h * w;
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0usize;
                for ky in 0..window {
                    let row = plane + (oy * stride + ky) * w + ox * stride;
                    for kx in 0..window {
                        let v = data[row + kx];
                        if v > best {
                            best = v;
                            best_idx = row + kx;
                        }
                    }
                }
                out[o] = best;
                argmax[o] = best_idx as u32;
                o += 1;
            }
        }
    }
    drop(data);
    Ok(Tensor::from_op(
        [n, c, h_out, w_out],
        out,
        OpKind::MaxPool2d { argmax },
        vec![input.clone()],
    ))
}

/// Weights of one bilinear output cell under the half-pixel-centers
/// convention with edge clamping: returns (i0, i1, fraction toward i1).
pub(crate) fn bilinear_source(out_idx: usize, in_extent: usize) -> (usize, usize, f32) {
    let src = ((out_idx as f32 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_extent - 1);
    let i1 = (i0 + 1).min(in_extent - 1);
    (i0, i1, src - i0 as f32)
}

pub fn upsample_bilinear2x(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input.shape();
    if h == 0 || w == 0 {
        return Err(Error::EmptyOutput {
            op: "upsample_bilinear2x",
            h,
            w,
        });
    }
    let (h2, w2) = (2 * h, 2 * w);
    count_flops(8 * (n * c * h2 * w2) as u64);
    let data = input.data();
    let mut out = vec![0.0f32; n * c * h2 * w2];
    for nc in 0..n * c {
        let src = &data[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * h2 * w2..(nc + 1) * h2 * w2];
        for oy in 0..h2 {
            let (y0, y1, fy) = bilinear_source(oy, h);
            for ox in 0..w2 {
                let (x0, x1, fx) = bilinear_source(ox, w);
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * w2 + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    drop(data);
    Ok(Tensor::from_op(
        [n, c, h2, w2],
        out,
        OpKind::UpsampleBilinear2x,
        vec![input.clone()],
    ))
}

/// Fill a (N,C,1,1) tensor out to (N,C,h,w).
pub fn broadcast_hw(input: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let [n, c, ih, iw] = input.shape();
    check_axis("broadcast_hw", "height", 1, ih)?;
    check_axis("broadcast_hw", "width", 1, iw)?;
    let data = input.data();
    let mut out = vec![0.0f32; n * c * h * w];
    for nc in 0..n * c {
        out[nc * h * w..(nc + 1) * h * w].fill(data[nc]);
    }
    drop(data);
    Ok(Tensor::from_op(
        [n, c, h, w],
        out,
        OpKind::BroadcastHw,
        vec![input.clone()],
    ))
}

/// Batch normalization over (N,H,W) per channel.
pub fn batchnorm2d(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut RunningStats,
    mode: Mode,
    eps: f32,
    momentum: f32,
) -> Result<Tensor> {
    let [n, c, h, w] = input.shape();
    check_axis("batchnorm2d", "gamma channels", c, gamma.shape()[1])?;
    check_axis("batchnorm2d", "beta channels", c, beta.shape()[1])?;
    check_axis("batchnorm2d", "running-stat channels", c, stats.mean.len())?;

    let (mean, var) = match mode {
        Mode::Train => {
            let m = (n * h * w) as f32;
            let data = input.data();
            let mut mean = vec![0.0f32; c];
            let mut var = vec![0.0f32; c];
            for b in 0..n {
                for ch in 0..c {
                    let plane = &data[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    mean[ch] += plane.iter().sum::<f32>();
                }
            }
            for v in &mut mean {
                *v /= m;
            }
            for b in 0..n {
                for ch in 0..c {
                    let plane = &data[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    var[ch] += plane.iter().map(|x| (x - mean[ch]).powi(2)).sum::<f32>();
                }
            }
            for v in &mut var {
                *v /= m;
            }
            for ch in 0..c {
                stats.mean[ch] = momentum * stats.mean[ch] + (1.0 - momentum) * mean[ch];
                stats.var[ch] = momentum * stats.var[ch] + (1.0 - momentum) * var[ch];
            }
            stats.initialized = true;
            (mean, var)
        }
        Mode::Infer => {
            if !stats.initialized {
                return Err(Error::UninitializedRunningStats);
            }
            (stats.mean.clone(), stats.var.clone())
        }
    };

    count_flops(2 * (n * c * h * w) as u64);
    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let data = input.data();
    let g = gamma.data();
    let be = beta.data();
    let mut x_hat = vec![0.0f32; data.len()];
    let mut out = vec![0.0f32; data.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for i in 0..h * w {
                let xh = (data[base + i] - mean[ch]) * inv_std[ch];
                x_hat[base + i] = xh;
                out[base + i] = g[ch] * xh + be[ch];
            }
        }
    }
    drop((data, g, be));
    Ok(Tensor::from_op(
        [n, c, h, w],
        out,
        OpKind::BatchNorm {
            x_hat,
            inv_std,
            train: mode == Mode::Train,
        },
        vec![input.clone(), gamma.clone(), beta.clone()],
    ))
}

pub fn relu(input: &Tensor) -> Tensor {
    count_flops(input.numel() as u64);
    let out = input.data().iter().map(|v| v.max(0.0)).collect();
    Tensor::from_op(input.shape(), out, OpKind::Relu, vec![input.clone()])
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    count_flops(4 * input.numel() as u64);
    // Clamp into the open interval: saturated f32 sigmoid would otherwise
    // round to exactly 0.0 or 1.0.
    const HI: f32 = 1.0 - f32::EPSILON / 2.0;
    let out = input
        .data()
        .iter()
        .map(|v| (1.0 / (1.0 + (-v).exp())).clamp(f32::MIN_POSITIVE, HI))
        .collect();
    Tensor::from_op(input.shape(), out, OpKind::Sigmoid, vec![input.clone()])
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let sa = a.shape();
    let sb = b.shape();
    if sa != sb {
        return Err(mismatch("add", &sa, &sb));
    }
    count_flops(a.numel() as u64);
    let out = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(sa, out, OpKind::Add, vec![a.clone(), b.clone()]))
}

fn mismatch(op: &'static str, a: &Shape, b: &Shape) -> Error {
    for (axis, name) in ["batch", "channel", "height", "width"].iter().enumerate() {
        if a[axis] != b[axis] {
            return Error::ShapeMismatch {
                op,
                axis: name,
                expected: a[axis],
                got: b[axis],
            };
        }
    }
    unreachable!("mismatch called on equal shapes")
}

/// Elementwise product. `b` may have a single channel (broadcast across
/// channels) or 1x1 spatial extent (broadcast across space).
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    check_axis("mul", "batch", n, nb)?;
    let chan_bcast = cb == 1 && c != 1;
    let spatial_bcast = hb == 1 && wb == 1 && (h, w) != (1, 1);
    if !chan_bcast && !spatial_bcast && (cb, hb, wb) != (c, h, w) {
        return Err(mismatch("mul", &a.shape(), &b.shape()));
    }
    if chan_bcast && (hb, wb) != (h, w) {
        return Err(mismatch("mul", &[n, 1, h, w], &b.shape()));
    }
    if spatial_bcast && cb != c && cb != 1 {
        return Err(mismatch("mul", &a.shape(), &b.shape()));
    }

    count_flops(a.numel() as u64);
    let da = a.data();
    let db = b.data();
    let mut out = vec![0.0f32; da.len()];
    for bi in 0..n {
        for ch in 0..c {
            let base = (bi * c + ch) * h * w;
            for i in 0..h * w {
                let bv = if cb == 1 && hb == 1 && wb == 1 {
                    db[bi]
                } else if chan_bcast {
                    db[bi * h * w + i]
                } else if spatial_bcast {
                    db[bi * c + ch]
                } else {
                    db[base + i]
                };
                out[base + i] = da[base + i] * bv;
            }
        }
    }
    drop((da, db));
    Ok(Tensor::from_op(
        a.shape(),
        out,
        OpKind::Mul,
        vec![a.clone(), b.clone()],
    ))
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    check_axis("concat_channels", "batch", n, nb)?;
    check_axis("concat_channels", "height", h, hb)?;
    check_axis("concat_channels", "width", w, wb)?;
    let da = a.data();
    let db = b.data();
    let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
    for bi in 0..n {
        out.extend_from_slice(&da[bi * ca * h * w..(bi + 1) * ca * h * w]);
        out.extend_from_slice(&db[bi * cb * h * w..(bi + 1) * cb * h * w]);
    }
    drop((da, db));
    Ok(Tensor::from_op(
        [n, ca + cb, h, w],
        out,
        OpKind::ConcatChannels { split: ca },
        vec![a.clone(), b.clone()],
    ))
}

pub fn global_avg_pool(input: &Tensor) -> Tensor {
    count_flops(input.numel() as u64);
    let [n, c, h, w] = input.shape();
    let data = input.data();
    let mut out = vec![0.0f32; n * c];
    let inv = 1.0 / (h * w) as f32;
    for nc in 0..n * c {
        out[nc] = data[nc * h * w..(nc + 1) * h * w].iter().sum::<f32>() * inv;
    }
    drop(data);
    Tensor::from_op([n, c, 1, 1], out, OpKind::GlobalAvgPool, vec![input.clone()])
}

/// Full reduction to a (1,1,1,1) scalar.
pub fn sum_all(input: &Tensor) -> Tensor {
    let s: f32 = input.data().iter().sum();
    Tensor::from_op([1, 1, 1, 1], vec![s], OpKind::Sum, vec![input.clone()])
}

/// y = mul * x + add, elementwise.
pub fn affine(input: &Tensor, mul: f32, add: f32) -> Tensor {
    let out = input.data().iter().map(|v| mul * v + add).collect();
    Tensor::from_op(
        input.shape(),
        out,
        OpKind::Affine { mul },
        vec![input.clone()],
    )
}

/// Elementwise a / b on equal shapes.
pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(mismatch("div", &a.shape(), &b.shape()));
    }
    let out = a.data().iter().zip(b.data().iter()).map(|(x, y)| x / y).collect();
    Ok(Tensor::from_op(
        a.shape(),
        out,
        OpKind::Div,
        vec![a.clone(), b.clone()],
    ))
}

impl Tensor {
    pub fn relu(&self) -> Tensor {
        relu(self)
    }
    pub fn sigmoid(&self) -> Tensor {
        sigmoid(self)
    }
    pub fn sum_all(&self) -> Tensor {
        sum_all(self)
    }
}
