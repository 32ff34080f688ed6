//! Run configuration: every knob of the model, trainer, augmentation and
//! preprocessing, parsed from a line-oriented `key = value` file with
//! command-line overrides, and echoed back out for provenance.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::pipeline::{AugmentPolicy, ColorConstancyConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentPolicy,
    pub cc: ColorConstancyConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Sample count for gen-data.
    pub n_samples: usize,
    pub split_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
            augment: AugmentPolicy::default(),
            cc: ColorConstancyConfig::default(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            n_samples: 240,
            split_seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse '{value}' for key '{key}'")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| parse(key, v.trim()))
        .collect()
}

fn parse_array4(key: &str, value: &str) -> Result<[usize; 4]> {
    parse_list(key, value)?
        .try_into()
        .map_err(|_| Error::Config(format!("key '{key}' needs exactly 4 comma-separated values")))
}

impl RunConfig {
    /// Apply one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "preset" => match value {
                "toy" => self.model = ModelConfig::toy(),
                "full" => {
                    self.model = ModelConfig::full_size();
                    self.train.batch_size = 8;
                }
                other => return Err(Error::Config(format!("unknown preset '{other}'"))),
            },
            "variant" => self.model.variant = value.parse()?,
            "width_mult" => self.model.width_mult = parse(key, value)?,
            "encoder2_widths" => self.model.encoder2_widths = parse_array4(key, value)?,
            "decoder_widths" => self.model.decoder_widths = parse_array4(key, value)?,
            "aspp_out" => self.model.aspp_out = parse(key, value)?,
            "aspp_rates" => self.model.aspp_rates = parse_list(key, value)?,
            "se_ratio" => self.model.se_ratio = parse(key, value)?,
            "input_height" => self.model.input_extent.0 = parse(key, value)?,
            "input_width" => self.model.input_extent.1 = parse(key, value)?,
            "residual" => self.model.residual = parse(key, value)?,
            "lr" => self.train.lr = parse(key, value)?,
            "max_epochs" => self.train.max_epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "early_stop_patience" => self.train.early_stop_patience = parse(key, value)?,
            "lr_reduce_factor" => self.train.lr_reduce_factor = parse(key, value)?,
            "lr_reduce_patience" => self.train.lr_reduce_patience = parse(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "beta1" => self.train.beta1 = parse(key, value)?,
            "beta2" => self.train.beta2 = parse(key, value)?,
            "eps" => self.train.eps = parse(key, value)?,
            "lambda" => self.train.lambda = parse(key, value)?,
            "aux_weight" => self.train.aux_weight = parse(key, value)?,
            "threshold" => self.train.threshold = parse(key, value)?,
            "rot90s" => self.augment.rot90s = parse(key, value)?,
            "hflip" => self.augment.hflip = parse(key, value)?,
            "vflip" => self.augment.vflip = parse(key, value)?,
            "brightness_contrast" => self.augment.brightness_contrast = parse(key, value)?,
            "brightness" => self.augment.brightness = parse(key, value)?,
            "contrast" => self.augment.contrast = parse(key, value)?,
            "expansion" => self.augment.expansion = parse(key, value)?,
            "cc_enabled" => self.cc.enabled = parse(key, value)?,
            "cc_p" => self.cc.p = parse(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "n_samples" => self.n_samples = parse(key, value)?,
            "split_seed" => self.split_seed = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Line-oriented `key = value`; '#' starts a comment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected 'key = value'",
                    path.display(),
                    line_no + 1
                ))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        self.cc.validate()
    }

    /// Fully resolved echo, loadable back through `load`.
    pub fn to_text(&self) -> String {
        let variant = match self.model.variant {
            Variant::HalfAttention => "half",
            Variant::FullAttention => "full",
        };
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "variant = {variant}\n\
             width_mult = {}\n\
             encoder2_widths = {}\n\
             decoder_widths = {}\n\
             aspp_out = {}\n\
             aspp_rates = {}\n\
             se_ratio = {}\n\
             input_height = {}\n\
             input_width = {}\n\
             residual = {}\n\
             lr = {}\n\
             max_epochs = {}\n\
             batch_size = {}\n\
             early_stop_patience = {}\n\
             lr_reduce_factor = {}\n\
             lr_reduce_patience = {}\n\
             seed = {}\n\
             beta1 = {}\n\
             beta2 = {}\n\
             eps = {}\n\
             lambda = {}\n\
             aux_weight = {}\n\
             threshold = {}\n\
             rot90s = {}\n\
             hflip = {}\n\
             vflip = {}\n\
             brightness_contrast = {}\n\
             brightness = {}\n\
             contrast = {}\n\
             expansion = {}\n\
             cc_enabled = {}\n\
             cc_p = {}\n\
             data_dir = {}\n\
             out_dir = {}\n\
             n_samples = {}\n\
             split_seed = {}\n",
            self.model.width_mult,
            list(&self.model.encoder2_widths),
            list(&self.model.decoder_widths),
            self.model.aspp_out,
            list(&self.model.aspp_rates),
            self.model.se_ratio,
            self.model.input_extent.0,
            self.model.input_extent.1,
            self.model.residual,
            self.train.lr,
            self.train.max_epochs,
            self.train.batch_size,
            self.train.early_stop_patience,
            self.train.lr_reduce_factor,
            self.train.lr_reduce_patience,
            self.train.seed,
            self.train.beta1,
            self.train.beta2,
            self.train.eps,
            self.train.lambda,
            self.train.aux_weight,
            self.train.threshold,
            self.augment.rot90s,
            self.augment.hflip,
            self.augment.vflip,
            self.augment.brightness_contrast,
            self.augment.brightness,
            self.augment.contrast,
            self.augment.expansion,
            self.cc.enabled,
            self.cc.p,
            self.data_dir.display(),
            self.out_dir.display(),
            self.n_samples,
            self.split_seed,
        )
    }
}
