//! Composite layers: residual conv block with squeeze-excite, additive
//! attention gate, atrous spatial pyramid pooling, the VGG-19-topology
//! encoder, and the upsampling decoder block.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ParamBook};
use crate::tensor::{self, Mode, Tensor};

#[derive(Debug, Clone)]
pub struct ConvBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub se_ratio: usize,
    /// Disable to drop the shortcut path (ablation arm).
    pub residual: bool,
}

impl ConvBlockSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.se_ratio == 0 {
            return Err(Error::InvalidArg {
                op: "conv_block",
                msg: "all extents must be >= 1".into(),
            });
        }
        if self.out_channels % self.se_ratio != 0 {
            return Err(Error::InvalidArg {
                op: "conv_block",
                msg: format!(
                    "out_channels {} not divisible by se_ratio {}",
                    self.out_channels, self.se_ratio
                ),
            });
        }
        Ok(())
    }
}

/// Channel attention: x scaled per channel by sigmoid(W2 relu(W1 GAP(x))).
pub struct SqueezeExcite {
    pub reduce: Conv2d,
    pub expand: Conv2d,
}

impl SqueezeExcite {
    pub fn new(rng: &mut ChaCha8Rng, channels: usize, ratio: usize) -> Self {
        let mid = (channels / ratio).max(1);
        SqueezeExcite {
            reduce: Conv2d::new(rng, channels, mid, 1, 1, 0, 1),
            expand: Conv2d::new(rng, mid, channels, 1, 1, 0, 1),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let squeezed = tensor::global_avg_pool(x);
        let scale = self.expand.forward(&self.reduce.forward(&squeezed)?.relu())?.sigmoid();
        tensor::mul(x, &scale)
    }

    pub fn register(&self, prefix: &str, book: &mut ParamBook) {
        self.reduce.register(&format!("{prefix}.se.reduce"), book);
        self.expand.register(&format!("{prefix}.se.expand"), book);
    }
}

/// Two Conv3x3-BN stages with a Conv1x1-BN shortcut, merged by addition and
/// ReLU, then squeeze-excite.
pub struct ConvBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub shortcut: Option<(Conv2d, BatchNorm2d)>,
    pub se: SqueezeExcite,
}

impl ConvBlock {
    pub fn new(rng: &mut ChaCha8Rng, spec: &ConvBlockSpec) -> Result<Self> {
        spec.validate()?;
        let (ci, co) = (spec.in_channels, spec.out_channels);
        Ok(ConvBlock {
            conv1: Conv2d::new(rng, ci, co, 3, 1, 1, 1),
            bn1: BatchNorm2d::new(co),
            conv2: Conv2d::new(rng, co, co, 3, 1, 1, 1),
            bn2: BatchNorm2d::new(co),
            shortcut: spec
                .residual
                .then(|| (Conv2d::new(rng, ci, co, 1, 1, 0, 1), BatchNorm2d::new(co))),
            se: SqueezeExcite::new(rng, co, spec.se_ratio),
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let main = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu();
        let main = self.bn2.forward(&self.conv2.forward(&main)?, mode)?;
        let merged = match &self.shortcut {
            Some((conv, bn)) => {
                let short = bn.forward(&conv.forward(x)?, mode)?;
                tensor::add(&main, &short)?.relu()
            }
            None => main.relu(),
        };
        self.se.forward(&merged)
    }

    pub fn register(&self, prefix: &str, book: &mut ParamBook) {
        self.conv1.register(&format!("{prefix}.conv1"), book);
        self.bn1.register(&format!("{prefix}.bn1"), book);
        self.conv2.register(&format!("{prefix}.conv2"), book);
        self.bn2.register(&format!("{prefix}.bn2"), book);
        if let Some((conv, bn)) = &self.shortcut {
            conv.register(&format!("{prefix}.shortcut.conv"), book);
            bn.register(&format!("{prefix}.shortcut.bn"), book);
        }
        self.se.register(prefix, book);
    }
}

#[derive(Debug, Clone)]
pub struct AttentionGateSpec {
    pub gate_channels: usize,
    pub skip_channels: usize,
    pub inter_channels: usize,
    /// Gating signal arrives at half the skip extent and the coefficient map
    /// is re-expanded bilinearly.
    pub halved: bool,
}

impl AttentionGateSpec {
    pub fn for_skip(skip_channels: usize, gate_channels: usize) -> Self {
        AttentionGateSpec {
            gate_channels,
            skip_channels,
            inter_channels: (skip_channels / 2).max(1),
            halved: true,
        }
    }
}

/// Additive attention over a skip connection: per-pixel coefficients in
/// (0,1) rescale the skip features.
pub struct AttentionGate {
    pub theta_skip: Conv2d,
    pub theta_gate: Conv2d,
    pub psi: Conv2d,
    halved: bool,
}

impl AttentionGate {
    pub fn new(rng: &mut ChaCha8Rng, spec: &AttentionGateSpec) -> Self {
        let stride = if spec.halved { 2 } else { 1 };
        AttentionGate {
            theta_skip: Conv2d::new(rng, spec.skip_channels, spec.inter_channels, 1, stride, 0, 1),
            theta_gate: Conv2d::new(rng, spec.gate_channels, spec.inter_channels, 1, 1, 0, 1),
            psi: Conv2d::new(rng, spec.inter_channels, 1, 1, 1, 0, 1),
            halved: spec.halved,
        }
    }

    pub fn forward(&self, x_skip: &Tensor, gate: &Tensor) -> Result<Tensor> {
        tensor::mul(x_skip, &self.attention(x_skip, gate)?)
    }

    /// Coefficient map alpha at the skip's spatial extent, one channel.
    pub fn attention(&self, x_skip: &Tensor, gate: &Tensor) -> Result<Tensor> {
        let [_, _, hs, ws] = x_skip.shape();
        let [_, _, hg, wg] = gate.shape();
        let expected = if self.halved { (hs / 2, ws / 2) } else { (hs, ws) };
        if (hg, wg) != expected {
            return Err(Error::InvalidArg {
                op: "attention_gate",
                msg: format!(
                    "gate extent {hg}x{wg} incompatible with skip {hs}x{ws} (expected {}x{})",
                    expected.0, expected.1
                ),
            });
        }
        let add = tensor::add(
            &self.theta_skip.forward(x_skip)?,
            &self.theta_gate.forward(gate)?,
        )?;
        let mut alpha = self.psi.forward(&add.relu())?.sigmoid();
        if self.halved {
            alpha = tensor::upsample_bilinear2x(&alpha)?;
        }
        Ok(alpha)
    }

    pub fn register(&self, prefix: &str, book: &mut ParamBook) {
        self.theta_skip.register(&format!("{prefix}.theta_skip"), book);
        self.theta_gate.register(&format!("{prefix}.theta_gate"), book);
        self.psi.register(&format!("{prefix}.psi"), book);
    }
}

#[derive(Debug, Clone)]
pub struct AsppSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub dilation_rates: Vec<usize>,
}

impl AsppSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dilation_rates.first() != Some(&1) {
            return Err(Error::InvalidArg {
                op: "aspp",
                msg: "first dilation rate must be 1".into(),
            });
        }
        if !self.dilation_rates.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidArg {
                op: "aspp",
                msg: format!("rates {:?} must be strictly increasing", self.dilation_rates),
            });
        }
        Ok(())
    }
}

/// Parallel dilated branches plus an image-pooling branch, concatenated and
/// fused back to `out_channels`. Spatial extent is preserved.
pub struct Aspp {
    pub branches: Vec<(Conv2d, BatchNorm2d)>,
    pub pool_branch: (Conv2d, BatchNorm2d),
    pub fuse: (Conv2d, BatchNorm2d),
}

impl Aspp {
    pub fn new(rng: &mut ChaCha8Rng, spec: &AsppSpec) -> Result<Self> {
        spec.validate()?;
        let (ci, co) = (spec.in_channels, spec.out_channels);
        let branches = spec
            .dilation_rates
            .iter()
            .map(|&rate| {
                let conv = if rate == 1 {
                    Conv2d::new(rng, ci, co, 1, 1, 0, 1)
                } else {
                    Conv2d::new(rng, ci, co, 3, 1, rate, rate)
                };
                (conv, BatchNorm2d::new(co))
            })
            .collect::<Vec<_>>();
        let fuse_in = co * (branches.len() + 1);
        Ok(Aspp {
            branches,
            pool_branch: (Conv2d::new(rng, ci, co, 1, 1, 0, 1), BatchNorm2d::new(co)),
            fuse: (Conv2d::new(rng, fuse_in, co, 1, 1, 0, 1), BatchNorm2d::new(co)),
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let [_, _, h, w] = x.shape();
        let mut cat: Option<Tensor> = None;
        for (conv, bn) in &self.branches {
            let y = bn.forward(&conv.forward(x)?, mode)?.relu();
            cat = Some(match cat {
                Some(acc) => tensor::concat_channels(&acc, &y)?,
                None => y,
            });
        }
        let pooled = tensor::global_avg_pool(x);
        let (conv, bn) = &self.pool_branch;
        let pooled = bn.forward(&conv.forward(&pooled)?, mode)?.relu();
        let pooled = tensor::broadcast_hw(&pooled, h, w)?;
        let cat = tensor::concat_channels(&cat.expect("at least one rate"), &pooled)?;
        let (fc, fbn) = &self.fuse;
        Ok(fbn.forward(&fc.forward(&cat)?, mode)?.relu())
    }

    pub fn register(&self, prefix: &str, book: &mut ParamBook) {
        for (i, (conv, bn)) in self.branches.iter().enumerate() {
            conv.register(&format!("{prefix}.branch{i}.conv"), book);
            bn.register(&format!("{prefix}.branch{i}.bn"), book);
        }
        self.pool_branch.0.register(&format!("{prefix}.pool.conv"), book);
        self.pool_branch.1.register(&format!("{prefix}.pool.bn"), book);
        self.fuse.0.register(&format!("{prefix}.fuse.conv"), book);
        self.fuse.1.register(&format!("{prefix}.fuse.bn"), book);
    }
}

pub const VGG_STAGE_CONVS: [usize; 5] = [2, 2, 4, 4, 4];
pub const VGG_BASE_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];

pub fn vgg_widths(width_mult: f32) -> [usize; 5] {
    VGG_BASE_WIDTHS.map(|b| ((b as f32 * width_mult).round() as usize).max(1))
}

/// VGG-19 convolutional topology (16 conv layers in 2,2,4,4,4 stages),
/// randomly initialized, with max-pooling between stages.
pub struct VggEncoder {
    pub stages: Vec<Vec<Conv2d>>,
}

impl VggEncoder {
    pub fn new(rng: &mut ChaCha8Rng, in_channels: usize, width_mult: f32) -> Self {
        let widths = vgg_widths(width_mult);
        let mut stages = Vec::with_capacity(5);
        let mut prev = in_channels;
        for (stage, &n_convs) in VGG_STAGE_CONVS.iter().enumerate() {
            let mut convs = Vec::with_capacity(n_convs);
            for _ in 0..n_convs {
                convs.push(Conv2d::new(rng, prev, widths[stage], 3, 1, 1, 1));
                prev = widths[stage];
            }
            stages.push(convs);
        }
        VggEncoder { stages }
    }

    /// Returns (bottleneck, pre-pool skips of stages 1-4).
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let [_, _, h, w] = x.shape();
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::InvalidArg {
                op: "vgg_encoder",
                msg: format!("input extent {h}x{w} not divisible by 16"),
            });
        }
        let mut skips = Vec::with_capacity(4);
        let mut cur = x.clone();
        for (stage, convs) in self.stages.iter().enumerate() {
            for conv in convs {
                cur = conv.forward(&cur)?.relu();
            }
            if stage < 4 {
                skips.push(cur.clone());
                cur = tensor::maxpool2d(&cur, 2, 2)?;
            }
        }
        Ok((cur, skips))
    }

    pub fn register(&self, prefix: &str, book: &mut ParamBook) {
        for (si, convs) in self.stages.iter().enumerate() {
            for (ci, conv) in convs.iter().enumerate() {
                conv.register(&format!("{prefix}.s{si}.c{ci}"), book);
            }
        }
    }

    pub fn conv_layer_count(&self) -> usize {
        self.stages.iter().map(|s| s.len()).sum()
    }
}

/// Upsample, concatenate already-filtered skip tensors, then a residual conv
/// block.
pub struct DecoderBlock {
    pub block: ConvBlock,
}

impl DecoderBlock {
    pub fn new(rng: &mut ChaCha8Rng, spec: &ConvBlockSpec) -> Result<Self> {
        Ok(DecoderBlock {
            block: ConvBlock::new(rng, spec)?,
        })
    }

    pub fn forward(&self, x: &Tensor, skips: &[&Tensor], mode: Mode) -> Result<Tensor> {
        let [_, _, h, w] = x.shape();
        for skip in skips {
            let [_, _, hs, ws] = skip.shape();
            if (hs, ws) != (2 * h, 2 * w) {
                return Err(Error::InvalidArg {
                    op: "decoder_block",
                    msg: format!("skip extent {hs}x{ws} is not twice the input {h}x{w}"),
                });
            }
        }
        let mut cur = tensor::upsample_bilinear2x(x)?;
        for skip in skips {
            cur = tensor::concat_channels(&cur, skip)?;
        }
        self.block.forward(&cur, mode)
    }

    pub fn register(&self, prefix: &str, book: &mut ParamBook) {
        self.block.register(prefix, book);
    }
}
