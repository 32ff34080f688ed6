//! Command-line surface: dataset generation, preprocessing, training,
//! evaluation, prediction, the four-arm ablation, and model accounting.

use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use ardu::ablate::{run_ablation, AblationSettings};
use ardu::checkpoint::{load_checkpoint, save_checkpoint};
use ardu::config::RunConfig;
use ardu::dataio::{
    gen_synthetic, load_dataset, save_dataset, save_mask_png, split_dataset, ImageSample,
    SplitDataset, SplitSpec,
};
use ardu::model::{build_model, count_params_flops};
use ardu::objective::threshold;
use ardu::pipeline::{apply_color_constancy, normalize_center, preprocess_for_training};
use ardu::tensor::{Mode, NoGrad};
use ardu::trainer::{evaluate, train};

#[derive(Parser)]
#[command(name = "ardu", version, about = "Dual attention-gated residual U-Net segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Line-oriented `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Attention variant: half | full.
    #[arg(long)]
    variant: Option<String>,
    /// Disable color constancy.
    #[arg(long)]
    no_cc: bool,
    /// Disable residual shortcuts.
    #[arg(long)]
    no_residual: bool,
    /// Binarization cutoff in (0,1).
    #[arg(long)]
    threshold: Option<f32>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with an 80-10-10 split.
    GenData(Common),
    /// Apply color constancy to a dataset and write it to the output dir.
    Preprocess(Common),
    /// Train a model; writes checkpoint and history.
    Train(Common),
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// train | val | test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write predicted masks for one split as 8-bit PNGs.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run the four-arm ablation (attention variant, color constancy,
    /// residual shortcuts) over three seeds.
    Ablate(Common),
    /// Print parameter and FLOP counts for the configured model.
    Inspect(Common),
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(dir) = &common.data_dir {
        cfg.data_dir = dir.clone();
    }
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(variant) = &common.variant {
        cfg.model.variant = variant.parse()?;
    }
    if common.no_cc {
        cfg.cc.enabled = false;
    }
    if common.no_residual {
        cfg.model.residual = false;
    }
    if let Some(t) = common.threshold {
        cfg.train.threshold = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Provenance echo: resolved config, seed, and tool version.
fn write_provenance(cfg: &RunConfig, command: &str) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    fs::write(cfg.out_dir.join("config.resolved"), cfg.to_text())?;
    fs::write(
        cfg.out_dir.join("run_info.txt"),
        format!(
            "tool = ardu {}\ncommand = {command}\nseed = {}\n",
            env!("CARGO_PKG_VERSION"),
            cfg.train.seed
        ),
    )?;
    Ok(())
}

fn split_of<'a>(splits: &'a SplitDataset, name: &str) -> Result<&'a [ImageSample]> {
    match name {
        "train" => Ok(&splits.train),
        "val" => Ok(&splits.val),
        "test" => Ok(&splits.test),
        other => anyhow::bail!("unknown split '{other}' (expected train|val|test)"),
    }
}

/// Evaluation-time preprocessing: color constancy and centering, no
/// augmentation.
fn preprocess_for_eval(splits: &mut SplitDataset, cfg: &RunConfig) -> Result<()> {
    for split in [&mut splits.train, &mut splits.val, &mut splits.test] {
        for sample in split.iter_mut() {
            apply_color_constancy(sample, &cfg.cc)?;
            sample.image = normalize_center(&sample.image).0;
        }
    }
    Ok(())
}

fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let samples = gen_synthetic(cfg.n_samples, cfg.model.input_extent, cfg.train.seed)?;
    let splits = split_dataset(
        samples,
        &SplitSpec {
            fractions: (0.8, 0.1, 0.1),
            seed: cfg.split_seed,
        },
    )?;
    save_dataset(&cfg.data_dir, &splits)?;
    println!(
        "wrote {} train / {} val / {} test samples to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        cfg.data_dir.display()
    );
    Ok(())
}

fn cmd_preprocess(cfg: &RunConfig) -> Result<()> {
    let mut splits = load_dataset(&cfg.data_dir)?;
    let n = splits.train.len() + splits.val.len() + splits.test.len();
    for split in [&mut splits.train, &mut splits.val, &mut splits.test] {
        for sample in split.iter_mut() {
            apply_color_constancy(sample, &cfg.cc)?;
        }
    }
    save_dataset(&cfg.out_dir, &splits)?;
    println!("preprocessed {n} samples into {}", cfg.out_dir.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let splits = load_dataset(&cfg.data_dir)?;
    let splits = preprocess_for_training(splits, &cfg.cc, &cfg.augment, cfg.train.seed)?;
    let mut train_cfg = cfg.train;
    train_cfg.verbose = true;
    let model = build_model(&cfg.model, cfg.train.seed)?;
    println!(
        "training {} parameters on {} samples",
        model.param_count(),
        splits.train.len()
    );
    let history = train(&model, &splits, &train_cfg)?;
    save_checkpoint(&model, &cfg.out_dir.join("model.ckpt"))?;
    fs::write(cfg.out_dir.join("history.txt"), history.to_text())?;
    let best = &history.epochs[history.best_epoch];
    println!(
        "done: {} epochs, best epoch {} (val loss {:.6}, val DSC {:.4})",
        history.epochs.len(),
        history.best_epoch + 1,
        best.val_loss,
        best.val_dsc
    );
    Ok(())
}

fn load_trained_model(cfg: &RunConfig) -> Result<ardu::model::Model> {
    let model = build_model(&cfg.model, cfg.train.seed)?;
    let path = cfg.out_dir.join("model.ckpt");
    load_checkpoint(&model, &path).with_context(|| format!("loading {}", path.display()))?;
    Ok(model)
}

fn cmd_eval(cfg: &RunConfig, split: &str) -> Result<()> {
    let mut splits = load_dataset(&cfg.data_dir)?;
    preprocess_for_eval(&mut splits, cfg)?;
    let model = load_trained_model(cfg)?;
    let report = evaluate(&model, split_of(&splits, split)?, cfg.train.threshold)?;
    let path = cfg.out_dir.join(format!("eval_{split}.txt"));
    fs::write(&path, report.to_text())?;
    println!("split {split}: mean {}", report.mean.as_percent_row());
    println!("report written to {}", path.display());
    Ok(())
}

fn cmd_predict(cfg: &RunConfig, split: &str) -> Result<()> {
    let mut splits = load_dataset(&cfg.data_dir)?;
    preprocess_for_eval(&mut splits, cfg)?;
    let model = load_trained_model(cfg)?;
    let samples = split_of(&splits, split)?;
    let dir = cfg.out_dir.join("predictions");
    fs::create_dir_all(&dir)?;
    let _guard = NoGrad::new();
    for sample in samples {
        let (images, _) = ardu::dataio::batch_tensors(&[sample])?;
        let out = model.forward(&images, Mode::Infer)?;
        let bin = threshold(&out.fused, cfg.train.threshold)?;
        let mask: Vec<u8> = bin.data().iter().map(|v| *v as u8).collect();
        save_mask_png(&dir.join(format!("{}.png", sample.id)), &mask, sample.h, sample.w)?;
    }
    println!("wrote {} masks to {}", samples.len(), dir.display());
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let settings = AblationSettings {
        data_seed: cfg.train.seed.wrapping_add(40),
        seeds: vec![cfg.train.seed, cfg.train.seed + 1, cfg.train.seed + 2],
        cc_p: cfg.cc.p,
        ..AblationSettings::default()
    };
    let report = run_ablation(&settings)?;
    let text = report.to_text();
    fs::write(cfg.out_dir.join("ablation.txt"), &text)?;
    println!("{text}");
    Ok(())
}

fn cmd_inspect(cfg: &RunConfig) -> Result<()> {
    let (params, flops) = count_params_flops(&cfg.model)?;
    let params_m = params as f64 / 1e6;
    let gflops = flops as f64 / 1e9;
    println!("parameters: {params} ({params_m:.2} M)");
    println!("forward FLOPs per image: {flops} ({gflops:.2} G)");
    println!(
        "published full-size reference: 36.5 M params ({:+.1}%), 92.1 GFLOPs ({:+.1}%)",
        (params_m - 36.5) / 36.5 * 100.0,
        (gflops - 92.1) / 92.1 * 100.0
    );
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let (common, name): (&Common, &str) = match &cli.command {
        Command::GenData(c) => (c, "gen-data"),
        Command::Preprocess(c) => (c, "preprocess"),
        Command::Train(c) => (c, "train"),
        Command::Eval { common, .. } => (common, "eval"),
        Command::Predict { common, .. } => (common, "predict"),
        Command::Ablate(c) => (c, "ablate"),
        Command::Inspect(c) => (c, "inspect"),
    };
    let cfg = resolve(common)?;
    write_provenance(&cfg, name)?;
    match &cli.command {
        Command::GenData(_) => cmd_gen_data(&cfg),
        Command::Preprocess(_) => cmd_preprocess(&cfg),
        Command::Train(_) => cmd_train(&cfg),
        Command::Eval { split, .. } => cmd_eval(&cfg, split),
        Command::Predict { split, .. } => cmd_predict(&cfg, split),
        Command::Ablate(_) => cmd_ablate(&cfg),
        Command::Inspect(_) => cmd_inspect(&cfg),
    }
}
