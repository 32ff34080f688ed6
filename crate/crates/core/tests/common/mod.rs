//! Shared test oracles: brute-force reference implementations (f64
//! accumulators) and central finite-difference gradient checking. Everything
//! here is independent of the library's compute path.

#![allow(dead_code)]

use ardu::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct TestRng(pub ChaCha8Rng);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        TestRng(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn uniform(&mut self, n: usize, lo: f32, hi: f32) -> Vec<f32> {
        (0..n).map(|_| self.0.gen_range(lo..hi)).collect()
    }

    pub fn tensor(&mut self, shape: [usize; 4], lo: f32, hi: f32) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, self.uniform(n, lo, hi)).unwrap()
    }
}

pub fn assert_close(got: &[f32], want: &[f32], tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length mismatch");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        let d = (*g as f64 - *w as f64).abs();
        assert!(
            d <= tol,
            "{what}: element {i} differs by {d:.3e} (got {g}, want {w})"
        );
    }
}

/// Direct quadruple-loop cross-correlation, f64 accumulation.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_oracle(
    input: &[f32],
    ishape: [usize; 4],
    kernel: &[f32],
    kshape: [usize; 4],
    bias: &[f32],
    stride: usize,
    padding: usize,
    dilation: usize,
) -> ([usize; 4], Vec<f32>) {
    let [n, c_in, h, w] = ishape;
    let [c_out, _, kh, kw] = kshape;
    let h_out = (h + 2 * padding - dilation * (kh - 1) - 1) / stride + 1;
    let w_out = (w + 2 * padding - dilation * (kw - 1) - 1) / stride + 1;
    let mut out = vec![0.0f32; n * c_out * h_out * w_out];
    for bi in 0..n {
        for co in 0..c_out {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = bias[co] as f64;
                    for ci in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                                let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                    continue;
                                }
                                let iv = input
                                    [((bi * c_in + ci) * h + iy as usize) * w + ix as usize];
                                let kv = kernel[((co * c_in + ci) * kh + ky) * kw + kx];
                                acc += iv as f64 * kv as f64;
                            }
                        }
                    }
                    out[((bi * c_out + co) * h_out + oy) * w_out + ox] = acc as f32;
                }
            }
        }
    }
    ([n, c_out, h_out, w_out], out)
}

/// Brute-force window scan.
pub fn maxpool_oracle(
    input: &[f32],
    ishape: [usize; 4],
    window: usize,
    stride: usize,
) -> ([usize; 4], Vec<f32>) {
    let [n, c, h, w] = ishape;
    let h_out = (h - window) / stride + 1;
    let w_out = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(n * c * h_out * w_out);
    for nc in 0..n * c {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut best = f32::NEG_INFINITY;
                for ky in 0..window {
                    for kx in 0..window {
                        best = best.max(input[nc * h * w + (oy * stride + ky) * w + ox * stride + kx]);
                    }
                }
                out.push(best);
            }
        }
    }
    ([n, c, h_out, w_out], out)
}

/// Per-cell half-pixel-centers interpolation formula with edge clamping.
pub fn upsample2x_oracle(input: &[f32], ishape: [usize; 4]) -> Vec<f32> {
    let [n, c, h, w] = ishape;
    let sample = |idx: usize, extent: usize| -> (usize, usize, f64) {
        let src = (((idx as f64) + 0.5) / 2.0 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(extent - 1);
        (i0, (i0 + 1).min(extent - 1), src - i0 as f64)
    };
    let mut out = Vec::with_capacity(n * c * 4 * h * w);
    for nc in 0..n * c {
        let p = &input[nc * h * w..(nc + 1) * h * w];
        for oy in 0..2 * h {
            let (y0, y1, fy) = sample(oy, h);
            for ox in 0..2 * w {
                let (x0, x1, fx) = sample(ox, w);
                let top = p[y0 * w + x0] as f64 * (1.0 - fx) + p[y0 * w + x1] as f64 * fx;
                let bot = p[y1 * w + x0] as f64 * (1.0 - fx) + p[y1 * w + x1] as f64 * fx;
                out.push((top * (1.0 - fy) + bot * fy) as f32);
            }
        }
    }
    out
}

/// f64 per-channel spatial mean.
pub fn gap_oracle(input: &[f32], ishape: [usize; 4]) -> Vec<f32> {
    let [n, c, h, w] = ishape;
    (0..n * c)
        .map(|nc| {
            let s: f64 = input[nc * h * w..(nc + 1) * h * w]
                .iter()
                .map(|v| *v as f64)
                .sum();
            (s / (h * w) as f64) as f32
        })
        .collect()
}

/// Relative error floored at unit scale: f32 forward evaluation bounds the
/// accuracy of the numeric estimate, so tiny gradients are compared against
/// an absolute tolerance of the same 1e-3.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1.0);
    (analytic - numeric).abs() / scale
}

/// Check analytic gradients of `forward()`'s output against central finite
/// differences, for every element of every tensor in `inputs`.
///
/// The scalar objective is a fixed random weighting of the output, evaluated
/// in f64 for the numeric path.
pub fn check_grads(
    inputs: &[&Tensor],
    forward: &mut dyn FnMut() -> Tensor,
    weight_seed: u64,
    step: f32,
    tol: f64,
    what: &str,
) {
    for t in inputs {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    let out = forward();
    let mut rng = TestRng::new(weight_seed);
    let weights: Vec<f32> = rng
        .uniform(out.numel(), 0.25, 1.0)
        .iter()
        .zip(rng.uniform(out.numel(), -1.0, 1.0))
        .map(|(m, s)| if s < 0.0 { -m } else { *m })
        .collect();
    let wt = Tensor::from_vec(out.shape(), weights.clone()).unwrap();
    let loss = ardu::tensor::sum_all(&ardu::tensor::mul(&out, &wt).unwrap());
    loss.backward().unwrap();

    let eval = |fwd: &mut dyn FnMut() -> Tensor| -> f64 {
        fwd()
            .data()
            .iter()
            .zip(&weights)
            .map(|(o, w)| *o as f64 * *w as f64)
            .sum()
    };

    for (ti, t) in inputs.iter().enumerate() {
        let analytic = t
            .grad()
            .unwrap_or_else(|| panic!("{what}: input {ti} received no gradient"));
        for i in 0..t.numel() {
            let orig = t.data()[i];
            t.data_mut()[i] = orig + step;
            let lp = eval(forward);
            t.data_mut()[i] = orig - step;
            let lm = eval(forward);
            t.data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * step as f64);
            let e = rel_err(analytic[i] as f64, numeric);
            assert!(
                e < tol,
                "{what}: input {ti} element {i}: analytic {} vs numeric {numeric} (rel err {e:.3e})",
                analytic[i]
            );
        }
    }
    for t in inputs {
        t.zero_grad();
    }
}
