//! Four-arm ablation at desk scale: attention variant, color constancy,
//! and residual shortcuts, each over several seeds on the same synthetic
//! task.

use crate::dataio::{gen_synthetic, split_dataset, SplitSpec};
use crate::error::Result;
use crate::model::{build_model, ModelConfig, Variant};
use crate::pipeline::{preprocess_for_training, AugmentPolicy, ColorConstancyConfig};
use crate::trainer::{evaluate, train, TrainConfig};

#[derive(Debug, Clone)]
pub struct AblationSettings {
    pub n_samples: usize,
    pub extent: (usize, usize),
    pub data_seed: u64,
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentPolicy,
    pub cc_p: f64,
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings {
            n_samples: 60,
            extent: (32, 32),
            data_seed: 42,
            seeds: vec![1, 2, 3],
            model: ModelConfig {
                input_extent: (32, 32),
                ..ModelConfig::toy()
            },
            train: TrainConfig {
                lr: 1e-3,
                max_epochs: 20,
                batch_size: 4,
                early_stop_patience: 5,
                lr_reduce_patience: 3,
                ..TrainConfig::default()
            },
            augment: AugmentPolicy {
                expansion: 2,
                ..AugmentPolicy::default()
            },
            cc_p: 6.0,
        }
    }
}

pub const ARMS: [&str; 4] = ["full_attention", "half_attention", "no_cc", "no_residual"];

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub arm: &'static str,
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_dsc: f64,
    pub test_dsc: f64,
}

#[derive(Debug, Clone, Default)]
pub struct AblationReport {
    pub results: Vec<ArmResult>,
}

impl AblationReport {
    pub fn mean_val_dsc(&self, arm: &str) -> f64 {
        let vals: Vec<f64> = self
            .results
            .iter()
            .filter(|r| r.arm == arm)
            .map(|r| r.val_dsc)
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }

    pub fn median_best_epoch(&self, arm: &str) -> f64 {
        let mut epochs: Vec<usize> = self
            .results
            .iter()
            .filter(|r| r.arm == arm)
            .map(|r| r.best_epoch + 1)
            .collect();
        epochs.sort_unstable();
        let n = epochs.len();
        if n == 0 {
            return f64::NAN;
        }
        if n % 2 == 1 {
            epochs[n / 2] as f64
        } else {
            (epochs[n / 2 - 1] + epochs[n / 2]) as f64 / 2.0
        }
    }

    /// Table plus the three directional comparisons.
    pub fn to_text(&self) -> String {
        let mut out = String::from("arm\tseed\tbest_epoch\tepochs_run\tval_dsc\ttest_dsc\n");
        for r in &self.results {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{:.4}\t{:.4}\n",
                r.arm,
                r.seed,
                r.best_epoch + 1,
                r.epochs_run,
                r.val_dsc,
                r.test_dsc
            ));
        }
        out.push('\n');
        out.push_str(&format!(
            "mean val DSC: full_attention {:.4} vs half_attention {:.4} (slack 0.02)\n",
            self.mean_val_dsc("full_attention"),
            self.mean_val_dsc("half_attention")
        ));
        out.push_str(&format!(
            "mean val DSC: with color constancy {:.4} vs without {:.4} (slack 0.02)\n",
            self.mean_val_dsc("full_attention"),
            self.mean_val_dsc("no_cc")
        ));
        out.push_str(&format!(
            "median best epoch: residual {:.1} vs no residual {:.1} (slack +3)\n",
            self.median_best_epoch("full_attention"),
            self.median_best_epoch("no_residual")
        ));
        out
    }
}

/// Run one arm/seed cell and report its best-epoch validation DSC and the
/// test DSC of the returned checkpoint.
fn run_cell(settings: &AblationSettings, arm: &'static str, seed: u64) -> Result<ArmResult> {
    let mut model_cfg = settings.model.clone();
    let mut cc = ColorConstancyConfig {
        p: settings.cc_p,
        enabled: true,
    };
    match arm {
        "half_attention" => model_cfg.variant = Variant::HalfAttention,
        "no_cc" => cc.enabled = false,
        "no_residual" => model_cfg.residual = false,
        _ => {}
    }

    let samples = gen_synthetic(settings.n_samples, settings.extent, settings.data_seed)?;
    let splits = split_dataset(
        samples,
        &SplitSpec {
            fractions: (0.8, 0.1, 0.1),
            seed: settings.data_seed,
        },
    )?;
    let splits = preprocess_for_training(splits, &cc, &settings.augment, seed)?;

    let train_cfg = TrainConfig {
        seed,
        ..settings.train
    };
    let model = build_model(&model_cfg, seed)?;
    let history = train(&model, &splits, &train_cfg)?;
    let report = evaluate(&model, &splits.test, train_cfg.threshold)?;
    Ok(ArmResult {
        arm,
        seed,
        best_epoch: history.best_epoch,
        epochs_run: history.epochs.len(),
        val_dsc: history.epochs[history.best_epoch].val_dsc,
        test_dsc: report.mean.dsc,
    })
}

pub fn run_ablation(settings: &AblationSettings) -> Result<AblationReport> {
    let mut report = AblationReport::default();
    for arm in ARMS {
        for &seed in &settings.seeds {
            report.results.push(run_cell(settings, arm, seed)?);
        }
    }
    Ok(report)
}
