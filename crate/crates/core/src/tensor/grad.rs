//! Reverse-mode gradient propagation over the recorded op graph.

use std::collections::HashSet;

use rayon::prelude::*;

use super::ops::bilinear_source;
use super::{gemm, OpKind, Tensor};
use crate::error::{Error, Result};

impl Tensor {
    /// Backpropagate from a scalar loss, filling `grad` on every
    /// `requires_grad` tensor reachable from it. Gradients accumulate
    /// additively across fan-out.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::InvalidArg {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", self.shape()),
            });
        }
        let order = topo_order(self);
        self.accumulate_grad(&[1.0]);
        for t in order.iter().rev() {
            let Some(g) = t.grad() else { continue };
            backprop_node(t, &g)?;
        }
        Ok(())
    }
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.ptr_id()) {
            continue;
        }
        stack.push((t.clone(), true));
        t.with_op(|op| {
            if let Some(op) = op {
                for input in &op.inputs {
                    stack.push((input.clone(), false));
                }
            }
        });
    }
    order
}

fn backprop_node(out: &Tensor, g: &[f32]) -> Result<()> {
    out.with_op(|op| {
        let Some(op) = op else { return Ok(()) };
        match &op.kind {
            OpKind::Conv2d {
                stride,
                padding,
                dilation,
            } => conv2d_backward(out, g, op, *stride, *padding, *dilation),
            OpKind::MaxPool2d { argmax } => {
                let input = &op.inputs[0];
                let mut gi = vec![0.0f32; input.numel()];
                for (go, &idx) in g.iter().zip(argmax) {
                    gi[idx as usize] += go;
                }
                input.accumulate_grad(&gi);
                Ok(())
            }
            OpKind::UpsampleBilinear2x => {
                let input = &op.inputs[0];
                let [n, c, h, w] = input.shape();
                let (h2, w2) = (2 * h, 2 * w);
                let mut gi = vec![0.0f32; input.numel()];
                for nc in 0..n * c {
                    let src = &g[nc * h2 * w2..(nc + 1) * h2 * w2];
                    let dst = &mut gi[nc * h * w..(nc + 1) * h * w];
                    for oy in 0..h2 {
                        let (y0, y1, fy) = bilinear_source(oy, h);
                        for ox in 0..w2 {
                            let (x0, x1, fx) = bilinear_source(ox, w);
                            let go = src[oy * w2 + ox];
                            dst[y0 * w + x0] += go * (1.0 - fy) * (1.0 - fx);
                            dst[y0 * w + x1] += go * (1.0 - fy) * fx;
                            dst[y1 * w + x0] += go * fy * (1.0 - fx);
                            dst[y1 * w + x1] += go * fy * fx;
                        }
                    }
                }
                input.accumulate_grad(&gi);
                Ok(())
            }
            OpKind::BroadcastHw => {
                let input = &op.inputs[0];
                let [n, c, _, _] = input.shape();
                let [_, _, h, w] = out.shape();
                let mut gi = vec![0.0f32; n * c];
                for nc in 0..n * c {
                    gi[nc] = g[nc * h * w..(nc + 1) * h * w].iter().sum();
                }
                input.accumulate_grad(&gi);
                Ok(())
            }
            OpKind::BatchNorm {
                x_hat,
                inv_std,
                train,
            } => {
                let (input, gamma, beta) = (&op.inputs[0], &op.inputs[1], &op.inputs[2]);
                let [n, c, h, w] = input.shape();
                let m = (n * h * w) as f32;
                let gam = gamma.to_vec();
                let mut sum_g = vec![0.0f32; c];
                let mut sum_gx = vec![0.0f32; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * h * w;
                        for i in 0..h * w {
                            sum_g[ch] += g[base + i];
                            sum_gx[ch] += g[base + i] * x_hat[base + i];
                        }
                    }
                }
                let mut gi = vec![0.0f32; input.numel()];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * h * w;
                        let scale = gam[ch] * inv_std[ch];
                        for i in 0..h * w {
                            gi[base + i] = if *train {
                                scale
                                    * (g[base + i]
                                        - sum_g[ch] / m
                                        - x_hat[base + i] * sum_gx[ch] / m)
                            } else {
                                scale * g[base + i]
                            };
                        }
                    }
                }
                input.accumulate_grad(&gi);
                gamma.accumulate_grad(&sum_gx);
                beta.accumulate_grad(&sum_g);
                Ok(())
            }
            OpKind::Relu => {
                let input = &op.inputs[0];
                let y = out.data();
                let gi: Vec<f32> = g
                    .iter()
                    .zip(y.iter())
                    .map(|(go, v)| if *v > 0.0 { *go } else { 0.0 })
                    .collect();
                drop(y);
                input.accumulate_grad(&gi);
                Ok(())
            }
            OpKind::Sigmoid => {
                let input = &op.inputs[0];
                let y = out.data();
                let gi: Vec<f32> = g
                    .iter()
                    .zip(y.iter())
                    .map(|(go, v)| go * v * (1.0 - v))
                    .collect();
                drop(y);
                input.accumulate_grad(&gi);
                Ok(())
            }
            OpKind::Add => {
                op.inputs[0].accumulate_grad(g);
                op.inputs[1].accumulate_grad(g);
                Ok(())
            }
            OpKind::Mul => mul_backward(g, op),
            OpKind::ConcatChannels { split } => {
                let (a, b) = (&op.inputs[0], &op.inputs[1]);
                let [n, c, h, w] = out.shape();
                let ca = *split;
                let cb = c - ca;
                let mut ga = vec![0.0f32; a.numel()];
                let mut gb = vec![0.0f32; b.numel()];
                for bi in 0..n {
                    let base = bi * c * h * w;
                    ga[bi * ca * h * w..(bi + 1) * ca * h * w]
                        .copy_from_slice(&g[base..base + ca * h * w]);
                    gb[bi * cb * h * w..(bi + 1) * cb * h * w]
                        .copy_from_slice(&g[base + ca * h * w..base + c * h * w]);
                }
                a.accumulate_grad(&ga);
                b.accumulate_grad(&gb);
                Ok(())
            }
            OpKind::GlobalAvgPool => {
                let input = &op.inputs[0];
                let [n, c, h, w] = input.shape();
                let inv = 1.0 / (h * w) as f32;
                let mut gi = vec![0.0f32; input.numel()];
                for nc in 0..n * c {
                    gi[nc * h * w..(nc + 1) * h * w].fill(g[nc] * inv);
                }
                input.accumulate_grad(&gi);
                Ok(())
            }
            OpKind::Sum => {
                let input = &op.inputs[0];
                let gi = vec![g[0]; input.numel()];
                input.accumulate_grad(&gi);
                Ok(())
            }
            OpKind::Affine { mul } => {
                let input = &op.inputs[0];
                let gi: Vec<f32> = g.iter().map(|v| v * mul).collect();
                input.accumulate_grad(&gi);
                Ok(())
            }
            OpKind::Div => {
                let (a, b) = (&op.inputs[0], &op.inputs[1]);
                let da = a.data();
                let db = b.data();
                let ga: Vec<f32> = g.iter().zip(db.iter()).map(|(go, bv)| go / bv).collect();
                let gb: Vec<f32> = g
                    .iter()
                    .zip(da.iter().zip(db.iter()))
                    .map(|(go, (av, bv))| -go * av / (bv * bv))
                    .collect();
                drop((da, db));
                a.accumulate_grad(&ga);
                b.accumulate_grad(&gb);
                Ok(())
            }
        }
    })
}

fn mul_backward(g: &[f32], op: &super::OpNode) -> Result<()> {
    let (a, b) = (&op.inputs[0], &op.inputs[1]);
    let [n, c, h, w] = a.shape();
    let [_, cb, hb, wb] = b.shape();
    let da = a.data();
    let db = b.data();
    let mut ga = vec![0.0f32; a.numel()];
    let mut gb = vec![0.0f32; b.numel()];
    for bi in 0..n {
        for ch in 0..c {
            let base = (bi * c + ch) * h * w;
            for i in 0..h * w {
                let b_idx = if cb == 1 && hb == 1 && wb == 1 {
                    bi
                } else if cb == 1 {
                    bi * h * w + i
                } else if hb == 1 && wb == 1 {
                    bi * c + ch
                } else {
                    base + i
                };
                ga[base + i] = g[base + i] * db[b_idx];
                gb[b_idx] += g[base + i] * da[base + i];
            }
        }
    }
    drop((da, db));
    a.accumulate_grad(&ga);
    b.accumulate_grad(&gb);
    Ok(())
}

fn conv2d_backward(
    out: &Tensor,
    g: &[f32],
    op: &super::OpNode,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<()> {
    let (input, kernel, bias) = (&op.inputs[0], &op.inputs[1], &op.inputs[2]);
    let [n, c_in, h, w] = input.shape();
    let [c_out, _, kh, kw] = kernel.shape();
    let [_, _, h_out, w_out] = out.shape();
    let k = c_in * kh * kw;
    let cells = h_out * w_out;

    let kernel_data = kernel.to_vec();
    let input_data = input.data();

    // Per batch item: recompute the patch matrix, then
    //   dW_item = g_item . cols^T      (Cout x K)
    //   dcols   = W^T . g_item         (K x cells), scattered back via col2im
    // Items are independent; dW contributions are reduced in index order.
    let per_item: Vec<(Vec<f32>, Vec<f32>)> = input_data
        .par_chunks(c_in * h * w)
        .zip(g.par_chunks(c_out * cells))
        .map(|(in_item, g_item)| {
            let mut cols = vec![0.0f32; k * cells];
            gemm::im2col(
                in_item, c_in, h, w, kh, kw, stride, padding, dilation, h_out, w_out, &mut cols,
            );
            let mut dw = vec![0.0f32; c_out * k];
            gemm::sgemm_rowmajor(c_out, cells, k, 1.0, g_item, false, &cols, true, 0.0, &mut dw);
            let mut dcols = vec![0.0f32; k * cells];
            gemm::sgemm_rowmajor(
                k, c_out, cells, 1.0, &kernel_data, true, g_item, false, 0.0, &mut dcols,
            );
            let mut gi = vec![0.0f32; c_in * h * w];
            gemm::col2im_acc(
                &dcols, c_in, h, w, kh, kw, stride, padding, dilation, h_out, w_out, &mut gi,
            );
            (dw, gi)
        })
        .collect();
    drop(input_data);

    let mut dw = vec![0.0f32; c_out * k];
    let mut gi = vec![0.0f32; n * c_in * h * w];
    for (bi, (dw_item, gi_item)) in per_item.into_iter().enumerate() {
        for (acc, v) in dw.iter_mut().zip(&dw_item) {
            *acc += v;
        }
        gi[bi * c_in * h * w..(bi + 1) * c_in * h * w].copy_from_slice(&gi_item);
    }

    let mut dbias = vec![0.0f32; c_out];
    for bi in 0..n {
        for co in 0..c_out {
            let base = (bi * c_out + co) * cells;
            dbias[co] += g[base..base + cells].iter().sum::<f32>();
        }
    }

    input.accumulate_grad(&gi);
    kernel.accumulate_grad(&dw);
    bias.accumulate_grad(&dbias);
    Ok(())
}
