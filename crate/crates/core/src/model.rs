//! The assembled dual-U-Net: VGG-topology encoder, ASPP bottlenecks,
//! attention-gated decoders, mask multiplication between the two U-Nets and
//! the fused output head.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    vgg_widths, Aspp, AsppSpec, AttentionGate, AttentionGateSpec, ConvBlock, ConvBlockSpec,
    DecoderBlock, VggEncoder,
};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamBook};
use crate::tensor::{self, ops, Mode, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Attention gates on the first U-Net's skips only.
    HalfAttention,
    /// Attention gates on both U-Nets' skips.
    FullAttention,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "half" | "half_attention" => Ok(Variant::HalfAttention),
            "full" | "full_attention" => Ok(Variant::FullAttention),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub variant: Variant,
    pub width_mult: f32,
    /// Encoder-2 block widths, shallowest first.
    pub encoder2_widths: [usize; 4],
    /// Decoder block widths (shared by both decoders), deepest first.
    pub decoder_widths: [usize; 4],
    pub aspp_out: usize,
    pub aspp_rates: Vec<usize>,
    pub se_ratio: usize,
    pub input_extent: (usize, usize),
    /// Disable to drop the shortcut path in every conv block (ablation arm).
    pub residual: bool,
}

impl ModelConfig {
    /// Desk-scale configuration for 64x64 synthetic images.
    pub fn toy() -> Self {
        ModelConfig {
            variant: Variant::FullAttention,
            width_mult: 0.125,
            encoder2_widths: [8, 16, 32, 64],
            decoder_widths: [64, 32, 16, 8],
            aspp_out: 64,
            aspp_rates: vec![1, 2, 3],
            se_ratio: 8,
            input_extent: (64, 64),
            residual: true,
        }
    }

    /// Full-scale configuration at the published 192x256 input extent.
    pub fn full_size() -> Self {
        ModelConfig {
            variant: Variant::FullAttention,
            width_mult: 1.0,
            encoder2_widths: [32, 64, 128, 256],
            decoder_widths: [256, 128, 64, 32],
            aspp_out: 256,
            aspp_rates: vec![1, 6, 12, 18],
            se_ratio: 8,
            input_extent: (192, 256),
            residual: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_extent;
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Config(format!(
                "input extent {h}x{w} must be divisible by 16"
            )));
        }
        if self.width_mult <= 0.0 {
            return Err(Error::Config("width_mult must be positive".into()));
        }
        for &width in self.encoder2_widths.iter().chain(&self.decoder_widths) {
            if width < self.se_ratio || width % self.se_ratio != 0 {
                return Err(Error::Config(format!(
                    "block width {width} must be a positive multiple of se_ratio {}",
                    self.se_ratio
                )));
            }
        }
        AsppSpec {
            in_channels: 1,
            out_channels: self.aspp_out,
            dilation_rates: self.aspp_rates.clone(),
        }
        .validate()?;
        Ok(())
    }

    fn conv_block_spec(&self, c_in: usize, c_out: usize) -> ConvBlockSpec {
        ConvBlockSpec {
            in_channels: c_in,
            out_channels: c_out,
            se_ratio: self.se_ratio,
            residual: self.residual,
        }
    }
}

pub struct ModelOutputs {
    pub out1: Tensor,
    pub out2: Tensor,
    pub fused: Tensor,
}

/// Parameters, running statistics and wiring of the whole network.
pub struct Model {
    pub config: ModelConfig,
    pub encoder1: VggEncoder,
    pub aspp1: Aspp,
    pub dec1_gates: Vec<AttentionGate>,
    pub dec1_blocks: Vec<DecoderBlock>,
    pub out1_conv: Conv2d,
    pub encoder2: Vec<ConvBlock>,
    pub aspp2: Aspp,
    pub dec2_gates: Vec<Option<AttentionGate>>,
    pub dec2_blocks: Vec<DecoderBlock>,
    pub out2_conv: Conv2d,
    pub fuse_conv: Conv2d,
    book: ParamBook,
}

pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e1w = vgg_widths(config.width_mult);
    let e2w = config.encoder2_widths;
    let dw = config.decoder_widths;

    let encoder1 = VggEncoder::new(&mut rng, 3, config.width_mult);
    let aspp1 = Aspp::new(
        &mut rng,
        &AsppSpec {
            in_channels: e1w[4],
            out_channels: config.aspp_out,
            dilation_rates: config.aspp_rates.clone(),
        },
    )?;

    let mut dec1_gates = Vec::with_capacity(4);
    let mut dec1_blocks = Vec::with_capacity(4);
    let mut prev = config.aspp_out;
    for stage in 0..4 {
        let skip_ch = e1w[3 - stage];
        dec1_gates.push(AttentionGate::new(
            &mut rng,
            &AttentionGateSpec::for_skip(skip_ch, prev),
        ));
        dec1_blocks.push(DecoderBlock::new(
            &mut rng,
            &config.conv_block_spec(prev + skip_ch, dw[stage]),
        )?);
        prev = dw[stage];
    }
    let out1_conv = Conv2d::new(&mut rng, prev, 1, 1, 1, 0, 1);

    let mut encoder2 = Vec::with_capacity(4);
    let mut prev_e2 = 3;
    for &width in &e2w {
        encoder2.push(ConvBlock::new(
            &mut rng,
            &config.conv_block_spec(prev_e2, width),
        )?);
        prev_e2 = width;
    }
    let aspp2 = Aspp::new(
        &mut rng,
        &AsppSpec {
            in_channels: e2w[3],
            out_channels: config.aspp_out,
            dilation_rates: config.aspp_rates.clone(),
        },
    )?;

    let mut dec2_gates = Vec::with_capacity(4);
    let mut dec2_blocks = Vec::with_capacity(4);
    let mut prev = config.aspp_out;
    for stage in 0..4 {
        let skip2_ch = e2w[3 - stage];
        let skip1_ch = e1w[3 - stage];
        let gate = match config.variant {
            Variant::FullAttention => Some(AttentionGate::new(
                &mut rng,
                &AttentionGateSpec::for_skip(skip2_ch, prev),
            )),
            Variant::HalfAttention => None,
        };
        dec2_gates.push(gate);
        dec2_blocks.push(DecoderBlock::new(
            &mut rng,
            &config.conv_block_spec(prev + skip2_ch + skip1_ch, dw[stage]),
        )?);
        prev = dw[stage];
    }
    let out2_conv = Conv2d::new(&mut rng, prev, 1, 1, 1, 0, 1);
    let fuse_conv = Conv2d::new(&mut rng, 2, 1, 1, 1, 0, 1);

    let mut book = ParamBook::default();
    encoder1.register("enc1", &mut book);
    aspp1.register("aspp1", &mut book);
    for (i, gate) in dec1_gates.iter().enumerate() {
        gate.register(&format!("dec1.g{i}"), &mut book);
    }
    for (i, block) in dec1_blocks.iter().enumerate() {
        block.register(&format!("dec1.b{i}"), &mut book);
    }
    out1_conv.register("head1", &mut book);
    for (i, block) in encoder2.iter().enumerate() {
        block.register(&format!("enc2.b{i}"), &mut book);
    }
    aspp2.register("aspp2", &mut book);
    for (i, gate) in dec2_gates.iter().enumerate() {
        if let Some(gate) = gate {
            gate.register(&format!("dec2.g{i}"), &mut book);
        }
    }
    for (i, block) in dec2_blocks.iter().enumerate() {
        block.register(&format!("dec2.b{i}"), &mut book);
    }
    out2_conv.register("head2", &mut book);
    fuse_conv.register("fuse", &mut book);

    Ok(Model {
        config: config.clone(),
        encoder1,
        aspp1,
        dec1_gates,
        dec1_blocks,
        out1_conv,
        encoder2,
        aspp2,
        dec2_gates,
        dec2_blocks,
        out2_conv,
        fuse_conv,
        book,
    })
}

impl Model {
    pub fn book(&self) -> &ParamBook {
        &self.book
    }

    pub fn param_count(&self) -> usize {
        self.book.param_count()
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.book.params {
            t.zero_grad();
        }
    }

    /// First U-Net only: encoder-1, ASPP, attention-gated decoder-1, mask
    /// head. Returns the mask and the encoder-1 skips for reuse.
    pub fn forward_unet1(&self, image: &Tensor, mode: Mode) -> Result<(Tensor, Vec<Tensor>)> {
        let (bottleneck, skips) = self.encoder1.forward(image)?;
        let mut cur = self.aspp1.forward(&bottleneck, mode)?;
        for stage in 0..4 {
            let gated = self.dec1_gates[stage].forward(&skips[3 - stage], &cur)?;
            cur = self.dec1_blocks[stage].forward(&cur, &[&gated], mode)?;
        }
        Ok((self.out1_conv.forward(&cur)?.sigmoid(), skips))
    }

    pub fn forward(&self, image: &Tensor, mode: Mode) -> Result<ModelOutputs> {
        let [_, c, h, w] = image.shape();
        if c != 3 {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                axis: "channel",
                expected: 3,
                got: c,
            });
        }
        if (h, w) != self.config.input_extent {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                axis: "height",
                expected: self.config.input_extent.0,
                got: h,
            });
        }

        let (out1, skips1) = self.forward_unet1(image, mode)?;
        // The 1-channel mask broadcasts over the image's 3 channels.
        let gated_input = tensor::mul(image, &out1)?;

        let mut cur = gated_input;
        let mut skips2 = Vec::with_capacity(4);
        for block in &self.encoder2 {
            let activated = block.forward(&cur, mode)?;
            skips2.push(activated.clone());
            cur = tensor::maxpool2d(&activated, 2, 2)?;
        }
        cur = self.aspp2.forward(&cur, mode)?;
        for stage in 0..4 {
            let skip2 = match &self.dec2_gates[stage] {
                Some(gate) => gate.forward(&skips2[3 - stage], &cur)?,
                None => skips2[3 - stage].clone(),
            };
            cur = self.dec2_blocks[stage].forward(&cur, &[&skip2, &skips1[3 - stage]], mode)?;
        }
        let out2 = self.out2_conv.forward(&cur)?.sigmoid();

        let fused = self
            .fuse_conv
            .forward(&tensor::concat_channels(&out1, &out2)?)?
            .sigmoid();
        Ok(ModelOutputs { out1, out2, fused })
    }
}

/// Exact trainable-parameter count and single-image forward FLOPs for a
/// configuration (convolutions counted as two flops per multiply-accumulate).
pub fn count_params_flops(config: &ModelConfig) -> Result<(usize, u64)> {
    let model = build_model(config, 0)?;
    let (h, w) = config.input_extent;
    let image = Tensor::zeros([1, 3, h, w]);
    ops::reset_flop_counter();
    model.forward(&image, Mode::Train)?;
    Ok((model.param_count(), ops::flop_count()))
}
