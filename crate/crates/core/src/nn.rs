//! Trainable layer primitives: convolution and batchnorm wrappers around the
//! tensor ops, weight initialization, and the named-parameter registry that
//! the optimizer and checkpoint code walk.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{self, Mode, RunningStats, Tensor};

/// Ordered collection of named parameters plus batchnorm running-stat slots.
/// Names are unique; registration order is the checkpoint and optimizer
/// order.
#[derive(Default)]
pub struct ParamBook {
    pub params: Vec<(String, Tensor)>,
    pub bn_stats: Vec<(String, Rc<RefCell<RunningStats>>)>,
}

impl ParamBook {
    pub fn push(&mut self, name: String, t: &Tensor) {
        debug_assert!(
            !self.params.iter().any(|(n, _)| *n == name),
            "duplicate parameter name {name}"
        );
        t.set_requires_grad(true);
        self.params.push((name, t.clone()));
    }

    pub fn push_stats(&mut self, name: String, s: &Rc<RefCell<RunningStats>>) {
        self.bn_stats.push((name, Rc::clone(s)));
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// He-uniform draw over [-sqrt(6/fan_in), sqrt(6/fan_in)].
pub fn he_uniform(rng: &mut ChaCha8Rng, shape: [usize; 4], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

pub struct Conv2d {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Self {
        Conv2d {
            kernel: he_uniform(rng, [c_out, c_in, k, k], c_in * k * k),
            bias: Tensor::zeros([1, c_out, 1, 1]),
            stride,
            padding,
            dilation,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        tensor::conv2d(x, &self.kernel, &self.bias, self.stride, self.padding, self.dilation)
    }

    pub fn register(&self, prefix: &str, book: &mut ParamBook) {
        book.push(format!("{prefix}.kernel"), &self.kernel);
        book.push(format!("{prefix}.bias"), &self.bias);
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    /// 2 flops per multiply-accumulate at the given input extent.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let [c_out, c_in, kh, kw] = self.kernel.shape();
        let h_out = tensor::ops::out_extent(h, kh, self.stride, self.padding, self.dilation)
            .unwrap_or(0);
        let w_out = tensor::ops::out_extent(w, kw, self.stride, self.padding, self.dilation)
            .unwrap_or(0);
        2 * (c_out * c_in * kh * kw * h_out * w_out) as u64
    }
}

pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: Rc<RefCell<RunningStats>>,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::full([1, channels, 1, 1], 1.0),
            beta: Tensor::zeros([1, channels, 1, 1]),
            stats: Rc::new(RefCell::new(RunningStats::new(channels))),
            eps: 1e-5,
            momentum: 0.9,
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut stats = self.stats.borrow_mut();
        tensor::batchnorm2d(x, &self.gamma, &self.beta, &mut stats, mode, self.eps, self.momentum)
    }

    pub fn register(&self, prefix: &str, book: &mut ParamBook) {
        book.push(format!("{prefix}.gamma"), &self.gamma);
        book.push(format!("{prefix}.beta"), &self.beta);
        book.push_stats(prefix.to_string(), &self.stats);
    }
}
